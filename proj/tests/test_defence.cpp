#include <gtest/gtest.h>

#include <fstream>

#include "test_util.hpp"

namespace cmtd {
namespace {

using test::random_images;
using test::random_tensor;
using test::tiny_conv;

VulnerabilityMatrix matrix(std::size_t k, std::vector<double> p) {
  return {Tensor(Shape{k, k}, std::move(p)), std::vector<std::size_t>(k, 1)};
}

Classmap cyclic(std::size_t k) {
  Classmap m;
  for (std::size_t i = 0; i < k; ++i) m.robust.push_back(static_cast<int>((i + 1) % k));
  return m;
}

double ce(std::span<const double> z, int label) {
  double m = *std::max_element(z.begin(), z.end());
  double s = 0.0;
  for (double v : z) s += std::exp(v - m);
  return m + std::log(s) - z[static_cast<std::size_t>(label)];
}

TEST(Vulnerability, RowsSumToOne) {
  Model m = build_model(tiny_conv(), 1);
  Dataset d = random_images(24, {1, 8, 8}, 4, 1);
  VulnerabilityMatrix v = estimate_vulnerability(m, d.images, d.labels);
  ASSERT_EQ(v.classes(), 4u);
  for (std::size_t i = 0; i < 4; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < 4; ++j) {
      EXPECT_GE(v.at(i, j), 0.0);
      s += v.at(i, j);
    }
    EXPECT_NEAR(s, 1.0, 1e-12);
    EXPECT_EQ(v.counts[i], 6u);
  }
}

TEST(Vulnerability, SingleExampleRowIsItsSoftmax) {
  Model m = build_model(tiny_conv(), 2);
  Dataset d = random_images(4, {1, 8, 8}, 4, 2);
  VulnerabilityMatrix v = estimate_vulnerability(m, d.images, d.labels);
  const Tensor z = predict_logits(m, d.images);
  for (std::size_t i = 0; i < 4; ++i) {
    double mx = -1e300, s = 0.0;
    for (std::size_t j = 0; j < 4; ++j) mx = std::max(mx, z[i * 4 + j]);
    for (std::size_t j = 0; j < 4; ++j) s += std::exp(z[i * 4 + j] - mx);
    for (std::size_t j = 0; j < 4; ++j)
      EXPECT_NEAR(v.at(i, j), std::exp(z[i * 4 + j] - mx) / s, 1e-12);
  }
}

TEST(Vulnerability, EmptyClassNamed) {
  Model m = build_model(tiny_conv(), 3);
  Dataset d = random_images(6, {1, 8, 8}, 3, 3);  // labels cycle over 0..2, class 3 missing
  try {
    estimate_vulnerability(m, d.images, d.labels);
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("class 3"), std::string::npos) << e.what();
  }
}

TEST(Encode, PicksUniqueMinimumOffDiagonal) {
  // Diagonal entries are smallest but must be ignored.
  Classmap m = encode_classmap(matrix(3, {0.0, 0.7, 0.3,  //
                                          0.2, 0.0, 0.8,  //
                                          0.9, 0.1, 0.0}));
  EXPECT_EQ(m.robust, (std::vector<int>{2, 0, 1}));
}

TEST(Encode, TiesGoToLowestClass) {
  Classmap m = encode_classmap(matrix(3, {0.4, 0.3, 0.3,  //
                                          0.5, 0.0, 0.5,  //
                                          0.2, 0.2, 0.6}));
  EXPECT_EQ(m.robust, (std::vector<int>{1, 0, 0}));
}

TEST(Encode, InvariantUnderRowRescaling) {
  SplitMix64 rng(9);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t k = 5;
    std::vector<double> p(k * k), q(k * k);
    for (std::size_t i = 0; i < k; ++i) {
      const double scale = rng.uniform(0.1, 10.0);
      for (std::size_t j = 0; j < k; ++j) {
        p[i * k + j] = rng.uniform(0.0, 1.0);
        q[i * k + j] = scale * p[i * k + j];
      }
    }
    Classmap a = encode_classmap(matrix(k, p));
    Classmap b = encode_classmap(matrix(k, q));
    EXPECT_EQ(a.robust, b.robust);
    for (std::size_t i = 0; i < k; ++i) EXPECT_NE(a.robust[i], static_cast<int>(i));
  }
}

TEST(Classmap, JsonRoundTripAndLayout) {
  Classmap m = cyclic(4);
  m.source_attack = "fgsm";
  m.epsilon = 0.1;
  m.model_hash = "abc";
  m.examples_per_class = {5, 6, 7, 8};
  test::TempDir dir("classmap");
  save_classmap(m, dir / "cm.json");
  Classmap back = load_classmap(dir / "cm.json");
  EXPECT_EQ(back.robust, m.robust);
  EXPECT_EQ(back.source_attack, "fgsm");
  EXPECT_EQ(back.epsilon, 0.1);
  EXPECT_EQ(back.examples_per_class, m.examples_per_class);

  nlohmann::json j = m;
  EXPECT_EQ(j.at("classes"), 4);
  EXPECT_EQ(j.at("pairs")[1], nlohmann::json::array({1, 2}));
}

TEST(Classmap, RejectsMalformed) {
  nlohmann::json self = {{"classes", 2}, {"pairs", {{0, 0}, {1, 0}}}};
  EXPECT_THROW(self.get<Classmap>(), ConfigError);
  nlohmann::json missing = {{"classes", 3}, {"pairs", {{0, 1}, {1, 0}}}};
  EXPECT_THROW(missing.get<Classmap>(), ConfigError);
  nlohmann::json dup = {{"classes", 2}, {"pairs", {{0, 1}, {0, 1}}}};
  EXPECT_THROW(dup.get<Classmap>(), ConfigError);
  test::TempDir dir("classmap_bad");
  EXPECT_THROW(load_classmap(dir / "none.json"), ConfigError);
}

TEST(Classmap, Similarity) {
  Classmap a = cyclic(10);
  EXPECT_DOUBLE_EQ(classmap_similarity(a, a), 1.0);
  Classmap b = a;
  b.robust[3] = 7;
  EXPECT_DOUBLE_EQ(classmap_similarity(a, b), 0.9);
  EXPECT_THROW(classmap_similarity(a, cyclic(4)), ConfigError);
}

TEST(Classmap, BuildRecordsProvenance) {
  Model m = build_model(tiny_conv(), 4);
  Dataset d = random_images(16, {1, 8, 8}, 4, 4);
  Classmap cm = build_classmap(m, d, 0.1, 3);
  EXPECT_EQ(cm.source_attack, "fgsm");
  EXPECT_EQ(cm.epsilon, 0.1);
  EXPECT_EQ(cm.model_hash, weights_hash(m));
  EXPECT_NO_THROW(cm.validate());
}

TEST(Objective, WeightedSumOfHandComputedTerms) {
  Model m = build_model(tiny_conv(Variant::defended_locked), 5);
  Dataset d = random_images(2, {1, 8, 8}, 4, 5);
  Classmap cm = cyclic(4);
  const LossWeights w{0.3, 0.5, 0.2};
  Tape tape;
  auto params = m.bind(tape, true);
  LossOutput out = build_objective(tape, m, params, d.images, d.labels, cm, w, 0.1, 1);

  const Tensor adv = fgsm_examples(m, d.images, d.labels, 0.1);
  HeadValues hb = forward_heads(m, d.images);
  HeadValues ha = forward_heads(m, adv);
  const Tensor& mb = hb.get(Head::main);
  const Tensor& ma = ha.get(Head::main);
  double ce_b = 0, ce_a = 0, aux_b = 0, aux_a = 0;
  for (std::size_t i = 0; i < 2; ++i) {
    const int r = cm.robust[static_cast<std::size_t>(d.labels[i])];
    ce_b += ce(detail::row_of(mb, i), d.labels[i]) / 2;
    ce_a += ce(detail::row_of(ma, i), d.labels[i]) / 2;
    aux_b += ce(detail::row_of(*hb.z_prime, i), r) / 2;
    aux_a += std::clamp(ce(detail::row_of(*ha.z_prime, i), r), 0.0, kAuxClamp) / 2;
  }
  const double expect = 0.3 * ce_b + 0.5 * ce_a + 0.2 * 0.5 * (aux_b - aux_a);
  EXPECT_NEAR(out.loss.value().item(), expect, 1e-10);
  EXPECT_NEAR(out.terms.at("ce_benign"), ce_b, 1e-10);
  EXPECT_NEAR(out.terms.at("aux_adversarial_clamped"), aux_a, 1e-10);
}

TEST(Objective, MainTermsOnlyReduceToCrossEntropy) {
  Model m = build_model(tiny_conv(Variant::defended_nolock), 6);
  Dataset d = random_images(3, {1, 8, 8}, 4, 6);
  Tape tape;
  auto params = m.bind(tape, true);
  LossOutput out =
      build_objective(tape, m, params, d.images, d.labels, cyclic(4), {1.0, 0.0, 0.0}, 0.1, 1);
  const Tensor z = predict_logits(m, d.images);
  double expect = 0.0;
  for (std::size_t i = 0; i < 3; ++i) expect += ce(detail::row_of(z, i), d.labels[i]) / 3;
  EXPECT_NEAR(out.loss.value().item(), expect, 1e-12);
}

TEST(Objective, WeightGradientMatchesFiniteDifferences) {
  Model m = build_model(tiny_conv(Variant::defended_locked), 7);
  Dataset d = random_images(3, {1, 8, 8}, 4, 7);
  const Classmap cm = cyclic(4);
  for (const char* name : {"conv1.weight", "dense1.weight", "head_z.weight", "head_zp.weight"}) {
    std::size_t idx = 0;
    while (m.parameters()[idx].name != name) ++idx;
    ScalarFn fn = [&](Tape& tape, Var p) {
      auto params = m.bind(tape, false);
      params[idx] = p;
      return build_objective(tape, m, params, d.images, d.labels, cm, LossWeights{}, 0.1, 1).loss;
    };
    FdReport rep = finite_difference_check(fn, m.parameters()[idx].value, 1e-5, 1e-4, 30, 11);
    EXPECT_TRUE(rep.passed) << name << " max rel error " << rep.max_rel_error;
    EXPECT_GT(rep.checked, 0u) << name;
  }
}

TEST(Objective, AdversarialAuxTermIsClamped) {
  // Blow up Z' so its cross-entropy far exceeds the clamp.
  Model m = build_model(tiny_conv(Variant::defended_nolock), 8);
  for (double& v : m.parameter("head_zp.weight").value.data()) v *= 1e4;
  Dataset d = random_images(4, {1, 8, 8}, 4, 8);
  Tape tape;
  auto params = m.bind(tape, true);
  LossOutput out = build_objective(tape, m, params, d.images, d.labels, cyclic(4), {}, 0.1, 1);
  EXPECT_LE(out.terms.at("aux_adversarial_clamped"), kAuxClamp);
  EXPECT_GE(out.terms.at("aux_adversarial_clamped"), 0.0);
  EXPECT_GT(out.terms.at("aux_benign"), kAuxClamp);
}

TEST(Objective, RejectsPlainModelAndBadWeights) {
  Model plain = build_model(tiny_conv(), 9);
  Dataset d = random_images(2, {1, 8, 8}, 4, 9);
  Tape tape;
  auto params = plain.bind(tape, true);
  EXPECT_THROW(build_objective(tape, plain, params, d.images, d.labels, cyclic(4), {}, 0.1, 1),
               ConfigError);
  Model def = build_model(tiny_conv(Variant::defended_locked), 9);
  Tape t2;
  auto p2 = def.bind(t2, true);
  EXPECT_THROW(
      build_objective(t2, def, p2, d.images, d.labels, cyclic(4), {-0.1, 0.5, 0.6}, 0.1, 1),
      ConfigError);
}

TEST(MultitaskTrain, LockUnitNeverChanges) {
  Model m = build_model(tiny_conv(Variant::defended_locked), 10);
  const Model before = m;
  Dataset d = random_images(32, {1, 8, 8}, 4, 10);
  OptimizerConfig opt;
  opt.batch_size = 8;
  multitask_train(m, d, cyclic(4), {}, 0.1, 2, 1, opt);
  bool trained_moved = false;
  for (std::size_t i = 0; i < m.parameters().size(); ++i) {
    const Parameter& a = before.parameters()[i];
    const Parameter& b = m.parameters()[i];
    if (a.frozen) {
      EXPECT_EQ(a.value, b.value) << a.name;
    } else if (!(a.value == b.value)) {
      trained_moved = true;
    }
  }
  EXPECT_TRUE(trained_moved);
}

TEST(MultitaskTrain, ZeroEpochsIsNoOp) {
  Model m = build_model(tiny_conv(Variant::defended_nolock), 11);
  const std::string h = weights_hash(m);
  Dataset d = random_images(8, {1, 8, 8}, 4, 11);
  EXPECT_TRUE(multitask_train(m, d, cyclic(4), {}, 0.1, 0, 1).empty());
  EXPECT_EQ(weights_hash(m), h);
}

TEST(MultitaskTrain, RejectsMismatchedClassmap) {
  Model m = build_model(tiny_conv(Variant::defended_nolock), 12);
  Dataset d = random_images(8, {1, 8, 8}, 4, 12);
  EXPECT_THROW(multitask_train(m, d, cyclic(3), {}, 0.1, 1, 1), ConfigError);
  Model plain = build_model(tiny_conv(), 12);
  EXPECT_THROW(multitask_train(plain, d, cyclic(4), {}, 0.1, 1, 1), ConfigError);
}

TEST(Detector, AcceptsExactlyClassmapPairs) {
  const Classmap cm = cyclic(4);
  for (int p = 0; p < 4; ++p) {
    for (int a = 0; a < 4; ++a) {
      std::vector<double> zm(4, 0.0), zp(4, 0.0);
      zm[static_cast<std::size_t>(p)] = 1.0;
      zp[static_cast<std::size_t>(a)] = 1.0;
      DetectionVerdict v = verdict_from_logits(zm, zp, cm);
      EXPECT_EQ(v.predicted, p);
      EXPECT_EQ(v.auxiliary, a);
      EXPECT_EQ(v.accepted, a == (p + 1) % 4);
      EXPECT_EQ(v.accepted, v.matched_pair);
    }
  }
}

TEST(Detector, BatchVerdictsConsistentWithHeads) {
  Model m = build_model(tiny_conv(Variant::defended_locked), 13);
  Dataset d = random_images(20, {1, 8, 8}, 4, 13);
  const Classmap cm = cyclic(4);
  RejectSummary s = classify_or_reject(m, cm, d.images);
  const auto main = predict_labels(m, d.images, Head::main);
  const auto aux = predict_labels(m, d.images, Head::z_prime);
  ASSERT_EQ(s.verdicts.size(), 20u);
  EXPECT_EQ(s.accepted + s.rejected, 20u);
  for (std::size_t i = 0; i < 20; ++i) {
    EXPECT_EQ(s.verdicts[i].predicted, main[i]);
    EXPECT_EQ(s.verdicts[i].auxiliary, aux[i]);
    EXPECT_EQ(s.verdicts[i].accepted, cm.is_pair(main[i], aux[i]));
    EXPECT_EQ(s.labels[i], s.verdicts[i].accepted ? main[i] : -1);
  }
  DetectionVerdict one = detect(m, cm, d.images.rows(3, 4).reshaped({1, 8, 8}));
  EXPECT_EQ(one.accepted, s.verdicts[3].accepted);
}

TEST(Detector, EmptyBatchAndPlainModel) {
  Model m = build_model(tiny_conv(Variant::defended_nolock), 14);
  EXPECT_TRUE(detect_batch(m, cyclic(4), Tensor(Shape{0, 1, 8, 8})).empty());
  EXPECT_EQ(classify_or_reject(m, cyclic(4), Tensor(Shape{0, 1, 8, 8})).rejection_rate(), 0.0);
  Model plain = build_model(tiny_conv(), 14);
  EXPECT_THROW(detect_batch(plain, cyclic(4), Tensor(Shape{1, 1, 8, 8})), ConfigError);
}

}  // namespace
}  // namespace cmtd
