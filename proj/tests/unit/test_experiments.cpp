// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <fstream>

#include "curvloc/binary_io.hpp"
#include "curvloc/experiments.hpp"
#include "test_support.hpp"

namespace ex = curvloc::experiments;
namespace cv = curvloc::curvature;
using curvloc::Matrix;

namespace {

std::string tiny_toy_config(const std::string& out_dir) {
  return R"({
    "name": "tiny",
    "output_dir": ")" + out_dir + R"(",
    "master_seed": 5,
    "workers": 2,
    "schedule": {"T": 100},
    "dataset": {"kind": "toy_memorization", "height": 4, "width": 4, "n_template": 2, "n_global": 1,
                "n_nonmem": 2, "samples_per_condition": 10, "background_rows_max": 1, "template_row_min": 1,
                "rect_min": 1, "rect_max": 2},
    "model": {"hidden": [8], "time_embed_dim": 4, "cond_embed_dim": 2},
    "train": {"total_steps": 30, "checkpoint_steps": [10], "batch_size": 8, "log_interval": 5},
    "sampler": {"inference_steps": 10},
    "localize": {"K": 4, "seeds_per_condition": 2},
    "render": {"upscale": 2}
  })";
}

}  // namespace

TEST(Config, DefaultsMatchDocumentedValues) {
  const auto c = ex::RunConfig::parse(R"({"name": "x"})");
  EXPECT_EQ(c.schedule.T, 1000);
  EXPECT_EQ(c.sampler.inference_steps, 50);
  EXPECT_DOUBLE_EQ(c.sampler.cfg_scale, 7.5);
  EXPECT_EQ(c.sampler.stop_timestep, 1);
  EXPECT_EQ(c.localize.K, 16);
  EXPECT_EQ(c.localize.seeds_per_condition, 4);
  EXPECT_EQ(c.localize.metrics.size(), 5U);
  EXPECT_EQ(c.train.total_steps, 60000U);
  EXPECT_EQ(c.train.checkpoint_steps, std::vector<std::uint64_t>{20000});
  EXPECT_DOUBLE_EQ(c.render.percentile, 99.0);
  EXPECT_EQ(c.oracle.prop1_instances, 50);
}

TEST(Config, UnknownKeysAndBadValuesAreRejected) {
  EXPECT_THROW((void)ex::RunConfig::parse(R"({"name": "x", "bogus": 1})"), curvloc::diffusion::ConfigError);
  EXPECT_THROW((void)ex::RunConfig::parse(R"({"sampler": {"steps": 3}})"), curvloc::diffusion::ConfigError);
  EXPECT_THROW((void)ex::RunConfig::parse(R"({"sampler": {"cfg_scale": "big"}})"), curvloc::diffusion::ConfigError);
  EXPECT_THROW((void)ex::RunConfig::parse(R"({"localize": {"metrics": ["nope"]}})"), curvloc::diffusion::ConfigError);
  EXPECT_THROW((void)ex::RunConfig::parse(R"({"render": {"percentile": 0}})"), curvloc::diffusion::ConfigError);
  EXPECT_THROW((void)ex::RunConfig::parse(R"({"render": {"scaling": "wide"}})"), curvloc::diffusion::ConfigError);
  EXPECT_THROW((void)ex::RunConfig::parse("{not json"), curvloc::diffusion::ConfigError);
  EXPECT_THROW((void)ex::RunConfig::parse(R"({"master_seed": -4})"), curvloc::diffusion::ConfigError);
  EXPECT_THROW((void)ex::RunConfig::load("/nonexistent/cfg.json"), curvloc::io::MissingInputError);
}

TEST(Config, SerializationRoundTrips) {
  const auto c = ex::RunConfig::parse(tiny_toy_config("out"));
  const auto back = ex::RunConfig::parse(c.to_json());
  EXPECT_EQ(back.to_json(), c.to_json());
  EXPECT_EQ(back.dataset.toy.height, 4);
  EXPECT_EQ(back.localize.K, 4);
  EXPECT_EQ(back.run_dir(), std::filesystem::path("out") / "tiny");
}

TEST(Heatmap, PercentileClipSaturatesOutlier) {
  Matrix m(10, 10);
  for (int i = 0; i < 100; ++i) m(i / 10, i % 10) = i;
  m(9, 9) = 1e6;
  ex::HeatmapRender opts;
  const auto range = ex::render_range({&m}, opts);
  // Reference percentile: linear interpolation between order statistics 98 and 99.
  EXPECT_DOUBLE_EQ(range.lo, 0.0);
  EXPECT_NEAR(range.hi, 98.0 + 0.01 * (1e6 - 98.0), 1e-6);
  const auto px = ex::heatmap_pixels(m, opts, range);
  EXPECT_EQ(px[99], 255);
  EXPECT_EQ(px[0], 0);
}

TEST(Heatmap, PercentileClipWithoutOutlierSpreadsScale) {
  Matrix m(1, 101);
  for (int i = 0; i <= 100; ++i) m(0, i) = i;
  const auto range = ex::render_range({&m}, {});
  EXPECT_DOUBLE_EQ(range.hi, 99.0);
  const auto px = ex::heatmap_pixels(m, {}, range);
  EXPECT_EQ(px[99], 255);
  EXPECT_EQ(px[100], 255);
  EXPECT_EQ(px[50], static_cast<std::uint8_t>(std::lround(50.0 / 99.0 * 255.0)));
}

TEST(Heatmap, NegativesClippedAndUpscaled) {
  Matrix m(1, 2);
  m << -5.0, 2.0;
  ex::HeatmapRender opts;
  opts.clip_negative = true;
  opts.upscale = 3;
  opts.percentile = 100.0;
  const auto px = ex::heatmap_pixels(m, opts, ex::render_range({&m}, opts));
  ASSERT_EQ(px.size(), 18U);
  EXPECT_EQ(px[0], 0);
  EXPECT_EQ(px[5], 255);
  EXPECT_EQ(px[17], 255);
}

TEST(Heatmap, ConstantMapIsDegenerateAndBlack) {
  const auto dir = curvloc::testing::scratch_dir("heatmap");
  const Matrix m = Matrix::Constant(3, 3, 0.7);
  EXPECT_FALSE(ex::render_heatmap(m, {}, dir / "c.pgm"));
  const auto bytes = curvloc::testing::file_bytes(dir / "c.pgm");
  const std::string header = "P5\n3 3\n255\n";
  ASSERT_EQ(bytes.size(), header.size() + 9);
  EXPECT_TRUE(std::equal(header.begin(), header.end(), bytes.begin()));
  for (std::size_t i = header.size(); i < bytes.size(); ++i) EXPECT_EQ(bytes[i], 0);
  Matrix bad = m;
  bad(0, 0) = std::nan("");
  EXPECT_THROW((void)ex::render_heatmap(bad, {}, dir / "n.pgm"), curvloc::ad::NumericError);
}

TEST(Pipeline, TinyToyRunIsDeterministicAndComplete) {
  const auto dir = curvloc::testing::scratch_dir("pipeline");
  auto cfg = ex::RunConfig::parse(tiny_toy_config(dir.string()));

  EXPECT_THROW((void)ex::cmd_localize(cfg), curvloc::io::MissingInputError);
  const auto summary = ex::cmd_train(cfg);
  EXPECT_EQ(summary.checkpoints.size(), 2U);
  EXPECT_EQ(summary.log.size(), 6U);
  EXPECT_EQ(ex::list_checkpoints(cfg), (std::vector<std::uint64_t>{10, 30}));

  const auto entries = ex::cmd_localize(cfg);
  ASSERT_EQ(entries.size(), 5U * 2U * 5U);
  std::vector<std::vector<std::uint8_t>> first;
  for (const auto& e : entries) first.push_back(curvloc::testing::file_bytes(cfg.run_dir() / e.map_file));

  cfg.workers = 1;
  const auto again = ex::cmd_localize(cfg);
  for (std::size_t i = 0; i < again.size(); ++i) {
    EXPECT_EQ(curvloc::testing::file_bytes(cfg.run_dir() / again[i].map_file), first[i]) << again[i].map_file;
  }

  const auto eval = ex::cmd_evaluate(cfg);
  ASSERT_FALSE(eval.tv_nonmem.empty());
  const auto& zeros = eval.tv_nonmem[1];
  EXPECT_EQ(zeros.metric, "all_zeros");
  EXPECT_DOUBLE_EQ(zeros.mean_iou, 0.5);
  // Five metrics + two filtered score rows + two references.
  EXPECT_EQ(eval.all.size(), 9U);
  EXPECT_EQ(eval.detection.size(), 5U);
  for (const auto& d : eval.detection) EXPECT_EQ(d.seeds_per_condition, 2);
  for (const char* f : {"localization_tv.csv", "localization_tv_nonmem.csv", "localization_all.csv", "detection.csv",
                        "train_log.csv"}) {
    EXPECT_TRUE(std::filesystem::exists(cfg.csv_dir() / f)) << f;
  }
  EXPECT_EQ(ex::cmd_render(cfg), 0);
}

TEST(Pipeline, SameBaselineGivesZeroMapsOnlyWhenAllowed) {
  const auto dir = curvloc::testing::scratch_dir("same_baseline");
  auto cfg = ex::RunConfig::parse(tiny_toy_config(dir.string()));
  cfg.train.checkpoint_steps.clear();
  cfg.localize.metrics = {cv::MetricKind::DhBaseline};
  cfg.localize.conditions = {0};
  cfg.sampler.cfg_scale = 1.0;
  (void)ex::cmd_train(cfg);
  EXPECT_THROW((void)ex::cmd_localize(cfg), curvloc::model::CheckpointError);
  cfg.localize.allow_same_baseline = true;
  const auto entries = ex::cmd_localize(cfg);
  for (const auto& e : entries) {
    const auto m = cv::load_map(cfg.run_dir() / e.map_file);
    EXPECT_TRUE((m.values.array() == 0.0).all());
  }
}

TEST(Oracle, DefaultChecksPassAndFaultInjectionFails) {
  ex::RunConfig cfg;
  cfg.oracle.prop2_samples = 20000;
  cfg.oracle.hutchinson_probes = 2000;
  const auto ok = ex::cmd_oracle(cfg);
  EXPECT_TRUE(ok.all_pass());
  EXPECT_EQ(ok.prop1_instances, 50);
  cfg.oracle.inject_prop1_sign_error = true;
  EXPECT_FALSE(ex::cmd_oracle(cfg).all_pass());
}
