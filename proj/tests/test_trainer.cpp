#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "support.hpp"
#include "swapvae/checkpoint.hpp"
#include "swapvae/trainer.hpp"

using namespace swapvae;
using swapvae::testing::TempDir;

namespace {

ModelConfig toy_model() {
  ModelConfig c;
  c.levels = 2;
  c.channels = {8, 16};
  c.latent_size = 8;
  c.features = 4;
  return c;
}

TrainConfig toy_train(std::uint64_t seed = 1) {
  TrainConfig t;
  t.epochs = 1;
  t.lr = 1e-3;
  t.seed = seed;
  return t;
}

const SyntheticDataset& toy_data() {
  static const SyntheticDataset ds = generate_dataset(swapvae::testing::toy_dataset_config(72, 3));
  return ds;
}

std::string error_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const std::exception& e) {
    return e.what();
  }
  return {};
}

}  // namespace

TEST(Trainer, OneEpochIsTrainSplitOverSqrtB) {
  Trainer<float> t(toy_data(), toy_model(), toy_train());
  EXPECT_EQ(t.batches_per_epoch(), 16);
  int steps = 0, epochs = 0;
  std::ostringstream csv;
  write_loss_header(csv);
  Trainer<float>::Hooks hooks;
  hooks.on_step = [&](const StepRecord& r) {
    ++steps;
    write_loss_row(csv, r);
  };
  hooks.on_epoch = [&](const EpochRecord& e) {
    ++epochs;
    EXPECT_EQ(e.epoch, 1);
    EXPECT_TRUE(std::isfinite(e.validation_error));
  };
  t.run(hooks);
  EXPECT_EQ(steps, 16);
  EXPECT_EQ(epochs, 1);
  std::istringstream in(csv.str());
  std::string line;
  int lines = 0;
  while (std::getline(in, line)) ++lines;
  EXPECT_EQ(lines, 17);
}

TEST(Trainer, ConfigMismatchesRejected) {
  ModelConfig wrong = toy_model();
  wrong.features = 8;
  wrong.latent_size = 16;
  EXPECT_THROW(Trainer<float>(toy_data(), wrong, toy_train()), ConfigError);
  EXPECT_THROW(Trainer<double>(toy_data(), toy_model(), toy_train()), ConfigError);
  TrainConfig bad = toy_train();
  bad.batch_size = 12;
  EXPECT_THROW(Trainer<float>(toy_data(), toy_model(), bad), ConfigError);
  bad = toy_train();
  bad.lr = 0;
  EXPECT_THROW(Trainer<float>(toy_data(), toy_model(), bad), ConfigError);
}

TEST(Trainer, SameSeedSameCheckpoint) {
  Trainer<float> a(toy_data(), toy_model(), toy_train(4));
  Trainer<float> b(toy_data(), toy_model(), toy_train(4));
  a.run({}, 5);
  b.run({}, 5);
  EXPECT_TRUE(checkpoint_bytes(a.checkpoint()) == checkpoint_bytes(b.checkpoint()));
  EXPECT_EQ(a.loss_digest(), b.loss_digest());
  Trainer<float> c(toy_data(), toy_model(), toy_train(5));
  c.run({}, 5);
  EXPECT_NE(a.loss_digest(), c.loss_digest());
}

TEST(Trainer, ResumeMatchesUninterruptedRun) {
  Trainer<float> full(toy_data(), toy_model(), toy_train(6));
  full.run({}, 10);

  TempDir dir("resume");
  {
    Trainer<float> first(toy_data(), toy_model(), toy_train(6));
    first.run({}, 4);
    save_checkpoint(dir / "mid.ckpt", first.checkpoint());
  }
  Trainer<float> second(toy_data(), load_checkpoint(dir / "mid.ckpt"));
  EXPECT_EQ(second.step(), 4);
  second.run({}, 10);
  EXPECT_TRUE(checkpoint_bytes(second.checkpoint()) == checkpoint_bytes(full.checkpoint()));
}

TEST(Trainer, ResumeAcrossEpochBoundaryKeepsHistory) {
  TrainConfig tc = toy_train(7);
  tc.epochs = 2;
  Trainer<float> full(toy_data(), toy_model(), tc);
  full.run();
  Trainer<float> first(toy_data(), toy_model(), tc);
  first.run({}, 20);
  Trainer<float> second(toy_data(), first.checkpoint());
  second.run();
  ASSERT_EQ(second.validation_history().size(), 2u);
  EXPECT_EQ(second.validation_history()[1].validation_error, full.validation_history()[1].validation_error);
  EXPECT_TRUE(checkpoint_bytes(second.checkpoint()) == checkpoint_bytes(full.checkpoint()));
}

TEST(Trainer, ReconstructionLossDecreases) {
  TrainConfig tc = toy_train(8);
  tc.epochs = 3;
  Trainer<float> t(toy_data(), toy_model(), tc);
  std::vector<double> recon;
  Trainer<float>::Hooks hooks;
  hooks.on_step = [&](const StepRecord& r) { recon.push_back(r.loss.recon); };
  t.run(hooks);
  ASSERT_EQ(recon.size(), 48u);
  double head = 0, tail = 0;
  for (int i = 0; i < 8; ++i) {
    head += recon[i];
    tail += recon[recon.size() - 1 - i];
  }
  EXPECT_LT(tail, 0.8 * head);
}

TEST(Trainer, NonFiniteParameterStopsBeforeUpdate) {
  Trainer<float> t(toy_data(), toy_model(), toy_train(9));
  t.run({}, 2);
  std::vector<Tensor<float>> before;
  for (const auto& q : t.model().parameters()) before.push_back(q.value);
  auto& p = t.model().parameters().front();
  const float saved = p.value.data[0];
  p.value.data[0] = std::nanf("");
  EXPECT_THROW(t.train_step(), NumericalError);
  EXPECT_EQ(t.step(), 2);
  p.value.data[0] = saved;
  for (std::size_t k = 0; k < before.size(); ++k) EXPECT_EQ(t.model().parameters()[k].value.data, before[k].data);
}

TEST(Trainer, NoNormalizationStoresIdentityStats) {
  TrainConfig tc = toy_train(10);
  tc.no_normalization = true;
  Trainer<float> t(toy_data(), toy_model(), tc);
  EXPECT_FALSE(t.assets().normalized);
  t.run({}, 3);
  auto m = load_model<float>(t.checkpoint());
  EXPECT_FALSE(m.assets.normalized);
  for (double s : m.assets.stats.std) EXPECT_EQ(s, 1.0);
  for (double s : m.assets.stats.mean) EXPECT_EQ(s, 0.0);
  const auto& x = toy_data().meshes[0];
  EXPECT_EQ(m.assets.to_model_space(x), x);
}

TEST(Trainer, DoublePrecisionRuns) {
  TrainConfig tc = toy_train(11);
  tc.precision = "float64";
  Trainer<double> t(toy_data(), toy_model(), tc);
  t.run({}, 2);
  auto ck = t.checkpoint();
  EXPECT_EQ(ck.manifest.at("precision"), "float64");
  EXPECT_THROW(load_model<float>(ck), DataError);
  EXPECT_NO_THROW(load_model<double>(ck));
}

TEST(Checkpoint, RoundTripDecodesBitwise) {
  Trainer<float> t(toy_data(), toy_model(), toy_train(12));
  t.run({}, 3);
  TempDir dir("ckpt");
  save_checkpoint(dir / "a.ckpt", t.checkpoint());
  auto m = load_model<float>(load_checkpoint(dir / "a.ckpt"));
  Rng rng(1);
  Tensor<float> z({2, 8});
  for (auto& v : z.data) v = static_cast<float>(standard_normal(rng));
  EXPECT_EQ(m.vae->decode_values(z).data, t.model().decode_values(z).data);
  EXPECT_EQ(m.assets.landmarks, toy_data().landmarks);
  EXPECT_EQ(m.assets.segmentation.labels(), toy_data().segmentation.labels());
  // Re-serialising the loaded file gives the same bytes.
  EXPECT_TRUE(checkpoint_bytes(load_checkpoint(dir / "a.ckpt")) == swapvae::testing::read_file(dir / "a.ckpt"));
}

TEST(Checkpoint, TamperedTensorFailsChecksum) {
  Trainer<float> t(toy_data(), toy_model(), toy_train(13));
  std::string bytes = checkpoint_bytes(t.checkpoint());
  bytes[bytes.size() - 5] ^= 0x40;
  EXPECT_NE(error_of([&] { parse_checkpoint(bytes); }).find("checksum error"), std::string::npos);
  EXPECT_NE(error_of([&] { parse_checkpoint(bytes.substr(0, bytes.size() - 100)); }).find("truncated"),
            std::string::npos);
  EXPECT_THROW(parse_checkpoint("garbage that is not a checkpoint"), DataError);
}

TEST(Checkpoint, OtherTemplateRejected) {
  Trainer<float> t(toy_data(), toy_model(), toy_train(14));
  auto ck = t.checkpoint();
  Mesh other{toy_data().topology, toy_data().template_positions};
  Rng rng(3);
  for (double& v : other.positions.values()) v += uniform(rng, -0.05, 0.05);
  EXPECT_EQ(error_of([&] { load_model<float>(ck, &other); }), "operator hash mismatch");
  Mesh smaller = icosphere(1);
  EXPECT_EQ(error_of([&] { load_model<float>(ck, &smaller); }), "operator hash mismatch");
  Mesh same{toy_data().topology, toy_data().template_positions};
  EXPECT_NO_THROW(load_model<float>(ck, &same));
}

TEST(Checkpoint, TensorDtypesRoundTrip) {
  Checkpoint c;
  c.put<double>("d", Tensor<double>({2, 2}, {1.5, -2, 3, 4}));
  c.put<float>("f", Tensor<float>({3}, {1.f, 2.f, 3.f}));
  c.put<std::int32_t>("i", Tensor<std::int32_t>({2}, {7, -9}));
  auto back = parse_checkpoint(checkpoint_bytes(c));
  EXPECT_EQ(back.get<double>("d").data, (std::vector<double>{1.5, -2, 3, 4}));
  EXPECT_EQ(back.get<float>("f").shape, (Shape{3}));
  EXPECT_EQ(back.get<std::int32_t>("i").data, (std::vector<std::int32_t>{7, -9}));
  EXPECT_THROW(back.get<float>("d"), DataError);
  EXPECT_THROW(back.get<double>("missing"), DataError);
}
