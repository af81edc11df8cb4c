#include <gtest/gtest.h>

#include <fstream>

#include "test_util.hpp"

using namespace cmtd;
using cmtd::test::random_tensor;
using cmtd::test::TempDir;

namespace {

Tensor lock_output(const Model& m, const Tensor& zp) {
  Tape t;
  Var g = dense(tanh(dense(t.constant(zp), t.constant(m.parameter("lock.fc1.weight").value),
                           t.constant(m.parameter("lock.fc1.bias").value))),
                t.constant(m.parameter("lock.fc2.weight").value),
                t.constant(m.parameter("lock.fc2.bias").value));
  return g.value();
}

std::vector<Tensor> frozen_values(const Model& m) {
  std::vector<Tensor> out;
  for (const auto& p : m.parameters())
    if (p.frozen) out.push_back(p.value);
  return out;
}

// Two Gaussian-free blobs separated by a wide margin along the first axis.
Dataset separable(std::size_t n, std::uint64_t seed) {
  Dataset d;
  d.images = Tensor(Shape{n, 2});
  d.class_count = 2;
  SplitMix64 rng(seed);
  for (std::size_t i = 0; i < n; ++i) {
    const int y = static_cast<int>(i % 2);
    d.images[2 * i] = y ? rng.uniform(0.7, 1.0) : rng.uniform(0.0, 0.3);
    d.images[2 * i + 1] = rng.uniform(0.0, 1.0);
    d.labels.push_back(y);
  }
  return d;
}

}  // namespace

TEST(BuildModel, FullOracleBuildsOnMnistShape) {
  const Model m = build_model(presets::full_oracle(), 1);
  EXPECT_EQ(m.spec().input_shape, (Shape{1, 28, 28}));
  const HeadValues hv = forward_heads(m, random_tensor({2, 1, 28, 28}, 3, 0, 1));
  EXPECT_EQ(hv.z.shape(), (Shape{2, 10}));
}

TEST(BuildModel, SameSeedSameParameters) {
  const Model a = build_model(presets::desk_oracle(Variant::defended_locked), 42);
  const Model b = build_model(presets::desk_oracle(Variant::defended_locked), 42);
  const Model c = build_model(presets::desk_oracle(Variant::defended_locked), 43);
  ASSERT_EQ(a.parameters().size(), b.parameters().size());
  for (std::size_t i = 0; i < a.parameters().size(); ++i) {
    EXPECT_EQ(a.parameters()[i].value, b.parameters()[i].value) << a.parameters()[i].name;
  }
  EXPECT_NE(a.parameter("conv1.weight").value, c.parameter("conv1.weight").value);
}

TEST(BuildModel, DeskParameterCountByShapeArithmetic) {
  // conv 1->8, 8->8, 8->16, 16->16 (3x3), dense 16*4*4 -> 64, head 64 -> 10
  const std::size_t expect = (8 * 1 * 9 + 8) + (8 * 8 * 9 + 8) + (16 * 8 * 9 + 16) +
                             (16 * 16 * 9 + 16) + (64 * 256 + 64) + (10 * 64 + 10);
  const Model m = build_model(presets::desk_oracle(), 0);
  EXPECT_EQ(m.parameter_count(), expect);
  EXPECT_LT(m.parameter_count(), 200000u);
  const Model d = build_model(presets::desk_oracle(Variant::defended_locked), 0);
  EXPECT_EQ(d.parameter_count(), expect + (10 * 64 + 10) + 2 * (10 * 10 + 10));
  EXPECT_LT(d.parameter_count(), 200000u);
}

TEST(BuildModel, InvalidSpecsRejected) {
  ModelSpec conv_after_dense{{LayerSpec::dense(4), LayerSpec::conv(2)}, 3, {1, 8, 8}, Variant::plain};
  EXPECT_THROW(build_model(conv_after_dense, 0), ConfigError);
  ModelSpec big_kernel{{LayerSpec::conv(2, 9)}, 3, {1, 8, 8}, Variant::plain};
  EXPECT_THROW(build_model(big_kernel, 0), ConfigError);
  ModelSpec one_class{{}, 1, {4}, Variant::defended_nolock};
  EXPECT_THROW(build_model(one_class, 0), ConfigError);
  EXPECT_THROW(parse_variant("locked"), ConfigError);
}

TEST(BuildModel, SpecJsonRejectsUnknownLayer) {
  nlohmann::json j = presets::desk_substitute();
  EXPECT_EQ(j.get<ModelSpec>().layers.size(), presets::desk_substitute().layers.size());
  j["layers"][0]["kind"] = "batchnorm";
  EXPECT_THROW(j.get<ModelSpec>(), ConfigError);
}

TEST(ForwardHeads, CombinedHeadIsElementwiseProduct) {
  const Model m = build_model(test::tiny_conv(Variant::defended_locked), 7);
  for (std::uint64_t s = 0; s < 5; ++s) {
    const HeadValues hv = forward_heads(m, random_tensor({3, 1, 8, 8}, s, 0, 1));
    ASSERT_TRUE(hv.z_prime && hv.z_star);
    const Tensor g = lock_output(m, *hv.z_prime);
    for (std::size_t i = 0; i < hv.z.size(); ++i) EXPECT_EQ((*hv.z_star)[i], hv.z[i] * g[i]);
  }
}

TEST(ForwardHeads, PlainHasOnlyZ) {
  const Model m = build_model(test::tiny_conv(), 7);
  const HeadValues hv = forward_heads(m, random_tensor({1, 1, 8, 8}, 1, 0, 1));
  EXPECT_FALSE(hv.z_prime);
  EXPECT_FALSE(hv.z_star);
  EXPECT_EQ(&hv.main(), &hv.z);
  EXPECT_THROW(hv.get(Head::z_star), ConfigError);
  EXPECT_FALSE(m.has_head(Head::z_star));
  EXPECT_FALSE(m.has_head(Head::z_prime));
}

TEST(ForwardHeads, NolockHasNoCombinedHead) {
  const Model m = build_model(test::tiny_conv(Variant::defended_nolock), 7);
  const HeadValues hv = forward_heads(m, random_tensor({1, 1, 8, 8}, 1, 0, 1));
  EXPECT_TRUE(hv.z_prime);
  EXPECT_FALSE(hv.z_star);
  EXPECT_THROW(hv.get(Head::z_star), ConfigError);
}

TEST(ForwardHeads, ForcedOnesLockGivesZ) {
  const Model m = build_model(test::tiny_conv(Variant::defended_locked), 7);
  const HeadValues hv = forward_heads(m, random_tensor({2, 1, 8, 8}, 1, 0, 1),
                                      {false, 0, LockHook::force_ones});
  EXPECT_EQ(*hv.z_star, hv.z);
}

TEST(ForwardHeads, SeveringTheLockPathChangesTheInputGradient) {
  const Model m = build_model(test::tiny_conv(Variant::defended_locked), 9);
  const Tensor x = random_tensor({2, 1, 8, 8}, 4, 0, 1);
  const LossSpec loss = LossSpec::cross_entropy({1, 2}, Head::z_star);
  const Tensor full = grad_wrt_input(m, x, loss);
  const Tensor severed = grad_wrt_input(m, x, loss, {false, 0, LockHook::sever});
  // Severing keeps the forward values, only the gradient path differs.
  EXPECT_EQ(forward_heads(m, x).main(), forward_heads(m, x, {false, 0, LockHook::sever}).main());
  EXPECT_GT(max_abs_diff(full, severed), 1e-8);
}

TEST(ForwardHeads, InputShapeChecked) {
  const Model m = build_model(test::tiny_conv(), 1);
  EXPECT_THROW(forward_heads(m, random_tensor({1, 1, 7, 8}, 1)), ShapeError);
}

TEST(TrainEpoch, SeparableToyReachesFullAccuracy) {
  Model m = build_model(test::linear(2, 2), 3);
  const Dataset d = separable(512, 5);
  OptimizerConfig cfg;
  cfg.learning_rate = 0.05;
  cfg.batch_size = 16;
  Adam opt(cfg);
  const EpochMetrics em = train_epoch(m, d, cross_entropy_loss, opt, 1);
  EXPECT_EQ(em.batches, 32u);
  EXPECT_DOUBLE_EQ(eval_accuracy(m, d), 1.0);
}

TEST(TrainEpoch, FrozenLockWeightsUntouched) {
  Model m = build_model(test::tiny_conv(Variant::defended_locked), 3);
  const auto before = frozen_values(m);
  ASSERT_EQ(before.size(), 4u);
  const Dataset d = test::random_images(32, {1, 8, 8}, 4, 2);
  Adam opt;
  for (std::size_t e = 0; e < 3; ++e) train_epoch(m, d, cross_entropy_loss, opt, 1, e);
  EXPECT_EQ(frozen_values(m), before);
  // Everything else moved.
  EXPECT_NE(m.parameter("conv1.weight").value,
            build_model(test::tiny_conv(Variant::defended_locked), 3).parameter("conv1.weight").value);
}

TEST(TrainEpoch, DivergenceReportsBatchAndTerms) {
  Model m = build_model(test::linear(2, 2), 3);
  const Dataset d = separable(8, 1);
  Adam opt(OptimizerConfig{1e-3, 0.9, 0.999, 1e-8, 4, 1.0});
  LossBuilder boom = [](Tape& t, const Model& model, std::span<const Var> params, const Tensor& x,
                        std::span<const int> y, std::uint64_t s) {
    LossOutput out = cross_entropy_loss(t, model, params, x, y, s);
    out.loss = scalar_mul(out.loss, 1e308);
    out.loss = scalar_mul(out.loss, 1e308);
    return out;
  };
  try {
    train_epoch(m, d, boom, opt, 0);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("batch 0"), std::string::npos) << e.what();
  }
}

TEST(TrainEpoch, EmptyDataOrZeroBatchRejected) {
  Model m = build_model(test::linear(2, 2), 3);
  Dataset empty;
  empty.images = Tensor(Shape{0, 2});
  Adam opt;
  EXPECT_THROW(train_epoch(m, empty, cross_entropy_loss, opt, 0), ConfigError);
  Adam zero(OptimizerConfig{1e-3, 0.9, 0.999, 1e-8, 0, 1.0});
  EXPECT_THROW(train_epoch(m, separable(4, 1), cross_entropy_loss, zero, 0), ConfigError);
}

TEST(Weights, RoundTripIsBitExact) {
  TempDir dir("weights");
  const Model m = build_model(test::tiny_conv(Variant::defended_locked), 77);
  save_weights(m, dir / "m.cmtd", {{"note", "x"}});
  const LoadedModel l = load_weights_with_manifest(dir / "m.cmtd");
  EXPECT_EQ(l.model.seed(), 77u);
  EXPECT_EQ(l.manifest["seed"], 77);
  EXPECT_EQ(l.manifest["variant"], "defended_locked");
  EXPECT_EQ(l.manifest["training"]["note"], "x");
  const Tensor x = random_tensor({3, 1, 8, 8}, 1, 0, 1);
  const HeadValues a = forward_heads(m, x), b = forward_heads(l.model, x);
  EXPECT_EQ(a.z, b.z);
  EXPECT_EQ(*a.z_prime, *b.z_prime);
  EXPECT_EQ(*a.z_star, *b.z_star);
  for (std::size_t i = 0; i < m.parameters().size(); ++i) {
    EXPECT_EQ(m.parameters()[i].frozen, l.model.parameters()[i].frozen);
  }
  EXPECT_EQ(weights_hash(m), weights_hash(l.model));
}

TEST(Weights, HeaderLayout) {
  TempDir dir("weights");
  save_weights(build_model(test::linear(3, 2), 1), dir / "m.cmtd");
  const auto bytes = detail::read_file(dir / "m.cmtd");
  ASSERT_GT(bytes.size(), 10u);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "CMTD");
  EXPECT_EQ(bytes[4] | (bytes[5] << 8), 1);  // u16 little-endian version
}

TEST(Weights, TruncatedFileNamesOffset) {
  TempDir dir("weights");
  save_weights(build_model(test::tiny_conv(), 1), dir / "m.cmtd");
  auto bytes = detail::read_file(dir / "m.cmtd");
  bytes.resize(bytes.size() - 13);
  detail::write_file_atomic(dir / "t.cmtd", bytes.data(), bytes.size());
  try {
    load_weights(dir / "t.cmtd");
    FAIL() << "expected FormatError";
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("offset"), std::string::npos) << e.what();
  }
}

TEST(Weights, ArchitectureMismatchRejected) {
  TempDir dir("weights");
  save_weights(build_model(test::tiny_conv(), 1), dir / "m.cmtd");
  EXPECT_THROW(load_weights(dir / "m.cmtd", test::tiny_conv(Variant::defended_locked)), FormatError);
  EXPECT_NO_THROW(load_weights(dir / "m.cmtd", test::tiny_conv()));

  // A manifest whose stored hash disagrees with its spec is rejected too.
  Container c = read_container(dir / "m.cmtd", kWeightMagic, kWeightVersion);
  c.manifest["architecture_hash"] = "0000000000000000";
  write_container(dir / "bad.cmtd", kWeightMagic, c);
  EXPECT_THROW(load_weights(dir / "bad.cmtd"), FormatError);
}

TEST(Weights, WrongMagicOrVersionRejected) {
  TempDir dir("weights");
  save_weights(build_model(test::linear(3, 2), 1), dir / "m.cmtd");
  EXPECT_THROW(read_container(dir / "m.cmtd", "CMTB", 1), FormatError);
  EXPECT_THROW(read_container(dir / "m.cmtd", kWeightMagic, 2), FormatError);
  EXPECT_THROW(load_weights(dir / "missing.cmtd"), Error);
}

TEST(Substitute, WorstCaseCopyMatchesOracle) {
  const Model oracle = build_model(test::tiny_conv(), 5);
  const Model sub = clone_as_substitute(oracle, test::tiny_conv(), SubstituteMode::worst_case, 99);
  const Tensor x = random_tensor({4, 1, 8, 8}, 3, 0, 1);
  EXPECT_EQ(forward_heads(oracle, x).z, forward_heads(sub, x).z);
}

TEST(Substitute, PlainCopyOfDefendedKeepsZ) {
  const Model oracle = build_model(test::tiny_conv(Variant::defended_locked), 5);
  const Model sub = clone_as_substitute(oracle, test::tiny_conv(), SubstituteMode::worst_case, 0);
  const Tensor x = random_tensor({4, 1, 8, 8}, 3, 0, 1);
  EXPECT_EQ(forward_heads(oracle, x).z, forward_heads(sub, x).z);
  EXPECT_FALSE(sub.has_head(Head::z_prime));
}

TEST(Substitute, MismatchedSpecRejected) {
  const Model oracle = build_model(test::tiny_conv(), 5);
  ModelSpec other = test::tiny_conv();
  other.layers.back() = LayerSpec::dense(9);
  EXPECT_THROW(clone_as_substitute(oracle, other, SubstituteMode::worst_case, 0), ConfigError);
}

TEST(Substitute, NormalModeSeedsDiffer) {
  const Model oracle = build_model(test::tiny_conv(), 5);
  const Model a = clone_as_substitute(oracle, presets::desk_substitute(), SubstituteMode::normal, 1);
  const Model b = clone_as_substitute(oracle, presets::desk_substitute(), SubstituteMode::normal, 2);
  EXPECT_NE(a.parameter("conv1.weight").value, b.parameter("conv1.weight").value);
}
