#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "pie/metrics.hpp"
#include "pie/synthdata.hpp"

using namespace pie;

TEST(SampleLatent, EmpiricalMoments) {
  const LatentWorld w = progression_world();
  Rng rng = make_rng(1);
  const int n = 20000;
  Vector sum = Vector::Zero(16);
  Eigen::MatrixXd outer = Eigen::MatrixXd::Zero(16, 16);
  for (int i = 0; i < n; ++i) {
    const Vector x = sample_latent(w, {1}, rng).values() - w.mean({1});
    sum += x;
    outer += x * x.transpose();
  }
  const Eigen::MatrixXd cov = outer / n;
  for (int i = 0; i < 16; ++i) {
    EXPECT_NEAR(cov(i, i), w.var, 0.05 * w.var);
    for (int j = 0; j < i; ++j) EXPECT_LT(std::abs(cov(i, j)), 0.05 * w.var);
  }
  EXPECT_LT((sum / n).norm(), 0.1);
}

TEST(SampleLatent, TinyVarianceGivesMean) {
  LatentWorld w = two_class_world(4, 1e-24, 1e12);
  Rng rng = make_rng(2);
  EXPECT_LT((sample_latent(w, {1}, rng).values() - w.mean({1})).norm(), 1e-9);
}

TEST(RenderBlob, SeverityZeroIsBackgroundOnly) {
  BlobImageSpec spec;
  spec.noise_std = 0.0;
  Rng rng = make_rng(1);
  const State img = render_blob(spec, 0.0, rng);
  for (std::size_t r = 0; r < spec.size; ++r) {
    const double row = spec.background + spec.gradient * (r - spec.center_row) / spec.size;
    for (std::size_t c = 0; c < spec.size; ++c) EXPECT_NEAR(img.at(r, c), row, 1e-15);
  }
}

TEST(RenderBlob, CenterPixelAtFullSeverity) {
  BlobImageSpec spec;
  spec.noise_std = 0.0;
  Rng rng = make_rng(1);
  const State img = render_blob(spec, 1.0, rng);
  EXPECT_NEAR(img.at(16, 16), spec.background + spec.peak, 1e-15);
}

TEST(RenderBlob, IntensityGrowsWithSeverity) {
  BlobImageSpec spec;
  spec.noise_std = 0.0;
  double last = -1.0;
  for (double sev : default_severity_grid()) {
    Rng rng = make_rng(1);
    const double total = render_blob(spec, sev, rng).values().sum();
    EXPECT_GT(total, last);
    last = total;
  }
}

TEST(RenderBlob, RejectsSeverityOutsideUnit) {
  Rng rng = make_rng(1);
  EXPECT_THROW(render_blob({}, 1.5, rng), InvalidArgument);
  EXPECT_THROW(render_blob({}, -0.1, rng), InvalidArgument);
}

TEST(Dataset, CountsLabelsAndDeterminism) {
  const BlobImageSpec spec;
  const auto grid = default_severity_grid();
  const Dataset a = make_dataset(spec, 5, grid, 3);
  const Dataset b = make_dataset(spec, 5, grid, 3);
  ASSERT_EQ(a.size(), 40u);
  int disease = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].image, b[i].image);
    EXPECT_EQ(a[i].label, a[i].severity >= 0.5 ? kDisease : kHealthy);
    disease += a[i].label;
    EXPECT_GE(a[i].image.values().minCoeff(), 0.0);
    EXPECT_LE(a[i].image.values().maxCoeff(), 1.0);
  }
  EXPECT_EQ(disease, 20);
  EXPECT_FALSE(make_dataset(spec, 5, grid, 4)[0].image == a[0].image);
}

TEST(DiskMask, Extremes) {
  const RoiMask all = disk_mask({8, 8}, 3.5, 3.5, 100.0);
  EXPECT_EQ(all.area_fraction(), 1.0);
  const RoiMask none = disk_mask({8, 8}, -50.0, -50.0, 1.0);
  EXPECT_EQ(none.area_fraction(), 0.0);
  EXPECT_THROW(disk_mask({8, 8}, 0, 0, 0.0), InvalidArgument);
  EXPECT_THROW(disk_mask({8, 8}, 0, 0, 1.0, -1.0), InvalidArgument);
}

TEST(DiskMask, AreaApproximatesCircle) {
  const RoiMask m = disk_mask({100, 100}, 49.5, 49.5, 25.0);
  EXPECT_NEAR(m.area_fraction(), M_PI * 0.0625, 0.005);
  const RoiMask soft = disk_mask({100, 100}, 49.5, 49.5, 25.0, 3.0);
  EXPECT_NEAR(soft.area_fraction(), M_PI * 0.0625, 0.005);
  for (std::size_t i = 0; i < soft.size(); ++i) {
    EXPECT_GE(soft[i], 0.0);
    EXPECT_LE(soft[i], 1.0);
  }
}

TEST(Pgm, HeaderAndPayload) {
  const State img = State::zeros({32, 32});
  const std::string bytes = encode_pgm(img);
  EXPECT_EQ(bytes.substr(0, 13), "P5\n32 32\n255\n");
  EXPECT_EQ(bytes.size(), 13u + 1024u);
}

TEST(Pgm, RoundtripWithinQuantisation) {
  Rng rng = make_rng(7);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Vector v(6 * 4);
  for (auto& x : v) x = u(rng);
  const State img(v, {4, 6});
  const State back = decode_pgm(encode_pgm(img));
  EXPECT_EQ(back.shape().rows, 4u);
  EXPECT_EQ(back.shape().cols, 6u);
  EXPECT_LE((back.values() - v).cwiseAbs().maxCoeff(), 0.5 / 255.0 + 1e-12);
  EXPECT_EQ(encode_pgm(back), encode_pgm(img));
}

TEST(Pgm, Errors) {
  EXPECT_THROW(encode_pgm(State::latent({1.5})), InvalidArgument);
  EXPECT_THROW(decode_pgm("P6\n1 1\n255\n\x01"), ParseError);
  try {
    decode_pgm(std::string("P5\n2 2\n255\n\x01\x02", 13));
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_NE(std::string(e.what()).find("expected 4 payload bytes, got 2"), std::string::npos);
    EXPECT_EQ(e.offset(), 11u);
  }
}

TEST(Pgm, FileRoundtripAndDatasetManifest) {
  const auto dir = std::filesystem::temp_directory_path() / "pie_synthdata_test";
  std::filesystem::remove_all(dir);
  const Dataset data = make_dataset({}, 1, {0.0, 1.0}, 1);
  write_dataset(dir, data);
  const State back = read_image(dir / "img_000001.pgm");
  EXPECT_LE((back.values() - data[1].image.values()).cwiseAbs().maxCoeff(), 0.5 / 255.0 + 1e-12);
  std::ifstream manifest(dir / "manifest.jsonl");
  std::string line;
  int lines = 0;
  while (std::getline(manifest, line)) {
    const auto j = nlohmann::json::parse(line);
    EXPECT_EQ(j["class"], lines == 0 ? "healthy" : "disease");
    ++lines;
  }
  EXPECT_EQ(lines, 2);
  std::filesystem::remove_all(dir);
}

TEST(Classifier, SeparatesBlobClasses) {
  const Dataset data = make_dataset({}, 100, default_severity_grid(), 11);
  const auto fit = train_classifier(data);
  EXPECT_GE(fit.heldout_accuracy, 0.95);
}
