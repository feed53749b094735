#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iterator>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "pie/rng.hpp"
#include "pie/world.hpp"

namespace pie {

/// mean_y + sqrt(var) z.
inline State sample_latent(const LatentWorld& w, Condition y, Rng& rng) {
  const Vector& mu = w.mean(y);
  return State(mu + std::sqrt(w.var) * standard_normal(mu.size(), rng));
}

/// Procedural grayscale image: background with a linear gradient plus a
/// radial blob whose radius and brightness scale with severity.
struct BlobImageSpec {
  std::size_t size = 32;
  double background = 0.25;
  double gradient = 0.2;  // background change from top to bottom
  double center_row = 16.0;
  double center_col = 16.0;
  double max_radius = 10.0;
  double peak = 0.6;
  double noise_std = 0.02;

  Shape shape() const { return {size, size}; }
};

inline State render_blob(const BlobImageSpec& spec, double severity, Rng& rng) {
  if (!(severity >= 0.0 && severity <= 1.0)) throw InvalidArgument("render_blob: severity must lie in [0,1]");
  const std::size_t n = spec.size;
  const double radius = severity * spec.max_radius;
  const double height = severity * spec.peak;
  std::normal_distribution<double> noise(0.0, 1.0);
  Vector v(static_cast<Eigen::Index>(n * n));
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t c = 0; c < n; ++c) {
      double value = spec.background + spec.gradient * (static_cast<double>(r) - spec.center_row) / static_cast<double>(n);
      if (radius > 0.0) {
        const double dr = static_cast<double>(r) - spec.center_row;
        const double dc = static_cast<double>(c) - spec.center_col;
        const double rho = std::sqrt(dr * dr + dc * dc);
        if (rho < radius) {
          const double u = std::cos(0.5 * M_PI * rho / radius);
          value += height * u * u;
        }
      }
      if (spec.noise_std > 0.0) value += spec.noise_std * noise(rng);
      v[static_cast<Eigen::Index>(r * n + c)] = std::clamp(value, 0.0, 1.0);
    }
  }
  return State(std::move(v), spec.shape());
}

inline constexpr int kHealthy = 0;
inline constexpr int kDisease = 1;

struct LabeledImage {
  State image;
  int label = kHealthy;
  double severity = 0.0;
  std::uint64_t seed = 0;
};

using Dataset = std::vector<LabeledImage>;

/// `n_per_severity` images per grid value; label = disease iff severity >= 0.5.
inline Dataset make_dataset(const BlobImageSpec& spec, std::size_t n_per_severity, const std::vector<double>& grid,
                            std::uint64_t seed) {
  Dataset out;
  out.reserve(n_per_severity * grid.size());
  std::uint64_t index = 0;
  for (double severity : grid) {
    for (std::size_t i = 0; i < n_per_severity; ++i, ++index) {
      const std::uint64_t item_seed = seed * 1000003ULL + index;
      Rng rng = make_rng(item_seed, 0xb10b);
      out.push_back({render_blob(spec, severity, rng), severity >= 0.5 ? kDisease : kHealthy, severity, item_seed});
    }
  }
  return out;
}

inline std::vector<double> default_severity_grid() { return {0.0, 0.125, 0.25, 0.375, 0.625, 0.75, 0.875, 1.0}; }

/// 1 inside radius - edge, 0 outside radius + edge, cosine ramp between.
inline RoiMask disk_mask(Shape grid, double center_row, double center_col, double radius, double soft_edge = 0.0) {
  if (!(radius > 0.0)) throw InvalidArgument("disk_mask: radius must be positive");
  if (soft_edge < 0.0) throw InvalidArgument("disk_mask: soft edge must be non-negative");
  Vector w(static_cast<Eigen::Index>(grid.size()));
  const double inner = radius - soft_edge;
  const double outer = radius + soft_edge;
  for (std::size_t r = 0; r < grid.rows; ++r) {
    for (std::size_t c = 0; c < grid.cols; ++c) {
      const double dr = static_cast<double>(r) - center_row;
      const double dc = static_cast<double>(c) - center_col;
      const double rho = std::sqrt(dr * dr + dc * dc);
      double value;
      if (soft_edge == 0.0) {
        value = rho <= radius ? 1.0 : 0.0;
      } else if (rho <= inner) {
        value = 1.0;
      } else if (rho >= outer) {
        value = 0.0;
      } else {
        value = 0.5 * (1.0 + std::cos(M_PI * (rho - inner) / (outer - inner)));
      }
      w[static_cast<Eigen::Index>(r * grid.cols + c)] = value;
    }
  }
  return {std::move(w), grid};
}

// ---------------------------------------------------------------------------
// Binary PGM (P5, maxval 255)

class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& what, std::size_t offset)
      : std::runtime_error(what + " (at byte " + std::to_string(offset) + ")"), offset_(offset) {}
  std::size_t offset() const { return offset_; }

 private:
  std::size_t offset_;
};

inline std::string encode_pgm(const State& image) {
  const Shape s = image.shape();
  std::string out = "P5\n" + std::to_string(s.cols) + " " + std::to_string(s.rows) + "\n255\n";
  out.reserve(out.size() + image.size());
  for (std::size_t i = 0; i < image.size(); ++i) {
    const double v = image[i];
    if (!(v >= 0.0 && v <= 1.0)) {
      throw InvalidArgument("write_image: value " + std::to_string(v) + " at cell " + std::to_string(i) +
                            " outside [0,1]");
    }
    out.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0))));
  }
  return out;
}

inline State decode_pgm(const std::string& bytes) {
  std::size_t pos = 0;
  auto skip_space = [&] {
    while (pos < bytes.size()) {
      const char ch = bytes[pos];
      if (ch == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(ch))) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto read_int = [&](const char* what) {
    skip_space();
    const std::size_t start = pos;
    std::size_t value = 0;
    while (pos < bytes.size() && std::isdigit(static_cast<unsigned char>(bytes[pos]))) {
      value = value * 10 + static_cast<std::size_t>(bytes[pos] - '0');
      if (value > (1u << 24)) throw ParseError(std::string("pgm: ") + what + " too large", start);
      ++pos;
    }
    if (pos == start) throw ParseError(std::string("pgm: expected ") + what, start);
    return value;
  };

  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '5') throw ParseError("pgm: missing P5 magic", 0);
  pos = 2;
  const std::size_t width = read_int("width");
  const std::size_t height = read_int("height");
  const std::size_t maxval = read_int("maxval");
  if (maxval == 0 || maxval > 255) throw ParseError("pgm: maxval must be in 1..255", pos);
  if (pos >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[pos]))) {
    throw ParseError("pgm: expected single whitespace after maxval", pos);
  }
  ++pos;
  const std::size_t expected = width * height;
  const std::size_t actual = bytes.size() - pos;
  if (actual != expected) {
    throw ParseError("pgm: expected " + std::to_string(expected) + " payload bytes, got " + std::to_string(actual), pos);
  }
  Vector v(static_cast<Eigen::Index>(expected));
  for (std::size_t i = 0; i < expected; ++i) {
    v[static_cast<Eigen::Index>(i)] = static_cast<unsigned char>(bytes[pos + i]) / static_cast<double>(maxval);
  }
  return State(std::move(v), {height, width});
}

inline void write_image(const std::filesystem::path& path, const State& image) {
  const std::string bytes = encode_pgm(image);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("write_image: cannot open " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

inline State read_image(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("read_image: cannot open " + path.string());
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_pgm(bytes);
}

/// Clamp to [0,1] for display.
inline State clamp_unit(const State& x) { return x.with_values(x.values().cwiseMax(0.0).cwiseMin(1.0)); }

/// Writes one PGM per item plus manifest.jsonl lines {path, class, severity, seed}.
inline void write_dataset(const std::filesystem::path& dir, const Dataset& data) {
  std::filesystem::create_directories(dir);
  std::ofstream manifest(dir / "manifest.jsonl", std::ios::binary);
  for (std::size_t i = 0; i < data.size(); ++i) {
    std::ostringstream name;
    name << "img_" << std::setw(6) << std::setfill('0') << i << ".pgm";
    write_image(dir / name.str(), data[i].image);
    const nlohmann::json line{{"path", name.str()},
                              {"class", data[i].label == kDisease ? "disease" : "healthy"},
                              {"severity", data[i].severity},
                              {"seed", data[i].seed}};
    manifest << line.dump() << "\n";
  }
}

}  // namespace pie
