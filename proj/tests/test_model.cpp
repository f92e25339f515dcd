#include <gtest/gtest.h>

#include <unistd.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>

#include "fec/checkpoint.hpp"
#include "fec/model.hpp"
#include "fec/rng.hpp"

namespace fec {
namespace {

Tensor<float> random_image(int size, std::uint64_t seed) {
  Rng rng(seed);
  Tensor<float> img = Tensor<float>::zeros({3, size, size});
  for (auto& v : img.data) v = static_cast<float>(rng.uniform(-1.0, 1.0));
  return img;
}

TEST(Config, MicroGridLadder) {
  const ModelConfig cfg = ModelConfig::micro();
  cfg.validate();
  EXPECT_EQ(cfg.stage_grid(0).h, 16);
  EXPECT_EQ(cfg.stage_grid(0).w, 16);
  EXPECT_EQ(cfg.stage_grid(1).h, 8);
  EXPECT_EQ(cfg.stage_grid(1).w, 8);
  EXPECT_EQ(cfg.stage_grid(2).h, 4);
  EXPECT_EQ(cfg.stage_grid(2).w, 4);
  EXPECT_EQ(cfg.stage_grid(3).h, 2);
  EXPECT_EQ(cfg.stage_grid(3).w, 2);
}

TEST(Config, SmallGridLadder) {
  const ModelConfig cfg = ModelConfig::small();
  cfg.validate();
  EXPECT_EQ(cfg.stage_grid(0).h, 56);
  EXPECT_EQ(cfg.stage_grid(0).w, 56);
  EXPECT_EQ(cfg.stage_grid(1).h, 28);
  EXPECT_EQ(cfg.stage_grid(1).w, 28);
  EXPECT_EQ(cfg.stage_grid(2).h, 14);
  EXPECT_EQ(cfg.stage_grid(2).w, 14);
  EXPECT_EQ(cfg.stage_grid(3).h, 7);
  EXPECT_EQ(cfg.stage_grid(3).w, 7);
}

TEST(Config, SmallParameterBudget) {
  // 5.5M nominal, +/-15% band.
  Model<float> m = Model<float>::build(ModelConfig::small());
  const std::int64_t n = m.param_count();
  EXPECT_GE(n, 4675000);
  EXPECT_LE(n, 6325000);
}

TEST(Config, RejectsIndivisibleInputSize) {
  ModelConfig cfg = ModelConfig::micro();
  cfg.input_size = 60;  // not divisible by stem * 8
  EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(Config, RejectsStageTooSmallToCluster) {
  ModelConfig cfg = ModelConfig::micro();
  cfg.input_size = 32;  // final stage grid 1x1: centers cannot stay below pixels
  EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(Config, RejectsBadClassCount) {
  ModelConfig cfg = ModelConfig::micro();
  cfg.num_classes = 1;
  EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(Config, JsonRoundTrip) {
  ModelConfig cfg = ModelConfig::micro();
  cfg.seed = 1234;
  cfg.similarity = SimilarityKind::euclidean_negated;
  cfg.dispatch = DispatchMode::dense_sum;
  cfg.mlp_hidden = 24;
  const ModelConfig back = ModelConfig::from_json(cfg.to_json());
  EXPECT_TRUE(back == cfg);
}

TEST(Config, JsonRejectsUnknownKey) {
  ModelConfig cfg = ModelConfig::micro();
  std::string text = cfg.to_json();
  text.insert(text.rfind('}'), ",\"mystery_knob\":3");
  EXPECT_THROW(ModelConfig::from_json(text), ConfigError);
}

TEST(Config, JsonRejectsGarbage) {
  EXPECT_THROW(ModelConfig::from_json("not json at all"), ConfigError);
}

TEST(Model, ParamNamesAreUnique) {
  Model<float> m = Model<float>::build(ModelConfig::micro());
  std::set<std::string> names;
  for (const Param<float>* p : m.params()) EXPECT_TRUE(names.insert(p->name).second) << p->name;
  EXPECT_EQ(names.count("stem.weight"), 1u);
  EXPECT_EQ(names.count("stage1.enc0.key_proj"), 1u);
  EXPECT_EQ(names.count("stage3.pool.pool_residual"), 1u);
  EXPECT_EQ(names.count("head.bias"), 1u);
}

TEST(Model, ForwardShapeAndFiniteness) {
  Model<float> m = Model<float>::build(ModelConfig::micro());
  Tape<float> tape;
  const auto logits = tape.value(m.forward_image(tape, random_image(64, 7)));
  ASSERT_EQ(logits.rows(), 1);
  ASSERT_EQ(logits.cols(), 10);
  EXPECT_FALSE(logits.has_nan());
}

TEST(Model, RecordCountAndShapes) {
  const ModelConfig cfg = ModelConfig::micro();
  Model<float> m = Model<float>::build(cfg);
  std::vector<AssignmentRecord> records;
  Tape<float> tape;
  m.forward_image(tape, random_image(64, 7), &records);
  // One record per clustering layer: all encode layers plus the three pools.
  ASSERT_EQ(static_cast<int>(records.size()), m.layers_per_forward());
  int pools = 0;
  for (std::size_t i = 0; i < records.size(); ++i) {
    const AssignmentRecord& r = records[i];
    EXPECT_EQ(r.layer_id, static_cast<int>(i));
    EXPECT_EQ(static_cast<std::int64_t>(r.assignment.size()), r.input_grid.numel());
    EXPECT_EQ(r.representatives.rows(), r.center_grid.numel());
    for (int a : r.assignment) {
      EXPECT_GE(a, 0);
      EXPECT_LT(a, static_cast<int>(r.center_grid.numel()));
    }
    if (r.is_pool) {
      ++pools;
      EXPECT_EQ(r.center_grid.h * 2, r.input_grid.h);
    }
  }
  EXPECT_EQ(pools, 3);
  // Pool ladder covers 16x16 -> 8x8 -> 4x4 -> 2x2.
  EXPECT_EQ(records.front().input_grid.h, 16);
  EXPECT_EQ(records.back().input_grid.h, 2);
}

TEST(Model, ZeroHeadWeightsGiveBiasLogits) {
  Model<float> m = Model<float>::build(ModelConfig::micro());
  m.head_w.value.fill(0.0f);
  for (int k = 0; k < 10; ++k) m.head_b.value.data[k] = static_cast<float>(k) * 0.5f;
  for (std::uint64_t seed : {1ULL, 2ULL}) {
    Tape<float> tape;
    const auto logits = tape.value(m.forward_image(tape, random_image(64, seed)));
    for (int k = 0; k < 10; ++k) EXPECT_FLOAT_EQ(logits.at(0, k), 0.5f * k);
  }
}

TEST(Model, DeterministicAcrossRebuilds) {
  const ModelConfig cfg = ModelConfig::micro();
  Model<float> a = Model<float>::build(cfg);
  Model<float> b = Model<float>::build(cfg);
  const auto pa = a.params();
  const auto pb = b.params();
  ASSERT_EQ(pa.size(), pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) {
    ASSERT_EQ(pa[i]->name, pb[i]->name);
    EXPECT_EQ(pa[i]->value.data, pb[i]->value.data) << pa[i]->name;
  }
  const Tensor<float> img = random_image(64, 3);
  Tape<float> ta, tb;
  EXPECT_EQ(ta.value(a.forward_image(ta, img)).data, tb.value(b.forward_image(tb, img)).data);
}

TEST(Model, BatchOfIdenticalImagesAgrees) {
  Model<float> m = Model<float>::build(ModelConfig::micro());
  const Tensor<float> img = random_image(64, 11);
  std::vector<std::vector<AssignmentRecord>> records;
  const Tensor<float> logits = m.forward_batch({img, img}, &records);
  ASSERT_EQ(logits.rows(), 2);
  for (int k = 0; k < logits.cols(); ++k) EXPECT_EQ(logits.at(0, k), logits.at(1, k));
  ASSERT_EQ(records.size(), 2u);
  ASSERT_EQ(records[0].size(), records[1].size());
  for (std::size_t i = 0; i < records[0].size(); ++i)
    EXPECT_EQ(records[0][i].assignment, records[1][i].assignment);
}

TEST(Model, ForwardRejectsWrongImageShape) {
  Model<float> m = Model<float>::build(ModelConfig::micro());
  Tape<float> tape;
  EXPECT_THROW(m.forward_image(tape, Tensor<float>::zeros({3, 32, 32})), ShapeError);
  EXPECT_THROW(m.forward_image(tape, Tensor<float>::zeros({1, 64, 64})), ShapeError);
}

TEST(Model, BackwardFillsHeadGradient) {
  Model<float> m = Model<float>::build(ModelConfig::micro());
  Tape<float> tape;
  const auto logits = m.forward_image(tape, random_image(64, 5));
  const int label[] = {3};
  tape.backward(tape.softmax_cross_entropy(logits, label));
  tape.accumulate_param_grads();
  double head_mag = 0.0;
  for (const Param<float>* p : m.params()) {
    ASSERT_EQ(p->grad.shape, p->value.shape) << p->name;
    EXPECT_FALSE(p->grad.has_nan()) << p->name;
    if (p->name == "head.weight")
      for (float g : p->grad.data) head_mag += std::abs(g);
  }
  EXPECT_GT(head_mag, 0.0);
}

class CheckpointFile : public ::testing::Test {
 protected:
  void SetUp() override {
    path_ = (std::filesystem::temp_directory_path() /
             ("fec_ckpt_" + std::to_string(::getpid()) + ".bin"))
                .string();
  }
  void TearDown() override { std::remove(path_.c_str()); }
  std::string path_;
};

TEST_F(CheckpointFile, RoundTripIsBitExact) {
  ModelConfig cfg = ModelConfig::micro();
  cfg.seed = 99;
  Model<float> m = Model<float>::build(cfg);
  m.norm_mean.data = {0.1f, 0.2f, 0.3f};
  m.norm_std.data = {0.9f, 0.8f, 0.7f};
  save_checkpoint(m, path_);

  Model<float> back = load_checkpoint<float>(path_);
  EXPECT_TRUE(back.cfg == cfg);
  EXPECT_EQ(back.norm_mean.data, m.norm_mean.data);
  EXPECT_EQ(back.norm_std.data, m.norm_std.data);
  const auto pa = m.params();
  const auto pb = back.params();
  ASSERT_EQ(pa.size(), pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) EXPECT_EQ(pa[i]->value.data, pb[i]->value.data);

  const Tensor<float> img = random_image(64, 21);
  Tape<float> ta, tb;
  EXPECT_EQ(ta.value(m.forward_image(ta, img)).data, tb.value(back.forward_image(tb, img)).data);
}

TEST_F(CheckpointFile, SaveIsByteStable) {
  Model<float> m = Model<float>::build(ModelConfig::micro());
  save_checkpoint(m, path_);
  const std::string copy = path_ + ".again";
  Model<float> back = load_checkpoint<float>(path_);
  save_checkpoint(back, copy);
  std::ifstream a(path_, std::ios::binary), b(copy, std::ios::binary);
  const std::string bytes_a((std::istreambuf_iterator<char>(a)), std::istreambuf_iterator<char>());
  const std::string bytes_b((std::istreambuf_iterator<char>(b)), std::istreambuf_iterator<char>());
  EXPECT_EQ(bytes_a, bytes_b);
  std::remove(copy.c_str());
}

TEST_F(CheckpointFile, RejectsTruncation) {
  Model<float> m = Model<float>::build(ModelConfig::micro());
  save_checkpoint(m, path_);
  std::ifstream in(path_, std::ios::binary);
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  in.close();
  bytes.resize(bytes.size() / 2);
  std::ofstream(path_, std::ios::binary | std::ios::trunc) << bytes;
  EXPECT_THROW(load_checkpoint<float>(path_), CheckpointError);
}

TEST_F(CheckpointFile, RejectsFlippedByte) {
  Model<float> m = Model<float>::build(ModelConfig::micro());
  save_checkpoint(m, path_);
  std::fstream f(path_, std::ios::binary | std::ios::in | std::ios::out);
  f.seekp(200);
  char b;
  f.seekg(200);
  f.read(&b, 1);
  b = static_cast<char>(b ^ 0x40);
  f.seekp(200);
  f.write(&b, 1);
  f.close();
  EXPECT_THROW(load_checkpoint<float>(path_), CheckpointError);
}

TEST_F(CheckpointFile, RejectsWrongMagic) {
  std::ofstream(path_, std::ios::binary) << "PKZZ this is not a weight file, padded long enough";
  EXPECT_THROW(load_checkpoint<float>(path_), CheckpointError);
}

TEST_F(CheckpointFile, RejectsDtypeMismatch) {
  Model<float> m = Model<float>::build(ModelConfig::micro());
  save_checkpoint(m, path_);
  EXPECT_THROW(load_checkpoint<double>(path_), CheckpointError);
}

TEST_F(CheckpointFile, MissingFileIsAnError) {
  EXPECT_THROW(load_checkpoint<float>("/nonexistent/dir/weights.bin"), CheckpointError);
}

}  // namespace
}  // namespace fec
