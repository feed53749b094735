#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "pie/metrics.hpp"
#include "pie/mlp.hpp"
#include "pie/synthdata.hpp"
#include "pie/theory.hpp"

namespace pie::experiment {

namespace fs = std::filesystem;
using nlohmann::json;

/// Bad or inconsistent configuration; `pointer` is a JSON pointer into the config.
class ConfigError : public std::runtime_error {
 public:
  ConfigError(std::string pointer, const std::string& what)
      : std::runtime_error("config error at \"" + pointer + "\": " + what), pointer_(std::move(pointer)) {}
  const std::string& pointer() const { return pointer_; }

 private:
  std::string pointer_;
};

class MissingArtifact : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Method { Pie, Theory, Extrapolation, Interpolation };

inline std::string to_string(Method m) {
  switch (m) {
    case Method::Pie: return "pie";
    case Method::Theory: return "theory";
    case Method::Extrapolation: return "extrapolation";
    case Method::Interpolation: return "interpolation";
  }
  return "pie";
}

struct WorldSpec {
  bool image = false;
  LatentWorld latent;
  BlobImageSpec blob;
  std::size_t n_per_severity = 500;
  std::vector<double> severity_grid = default_severity_grid();
  std::uint64_t dataset_seed = 1;
  double source_severity = 0.25;
};

struct MaskSpec {
  std::string type = "ones";
  double center_row = 16.0;
  double center_col = 16.0;
  double radius = 8.0;
  double soft_edge = 0.0;

  RoiMask build(Shape shape) const {
    if (type == "ones") return RoiMask::ones(shape);
    if (type == "zeros") return RoiMask::zeros(shape);
    return disk_mask(shape, center_row, center_col, radius, soft_edge);
  }
};

struct DenoiserSpec {
  bool learned = false;
  fs::path checkpoint;
  std::size_t hidden1 = 256;
  std::size_t hidden2 = 256;
  std::size_t time_features = 16;
  TrainConfig train;
};

struct ExperimentConfig {
  WorldSpec world;
  NoiseSchedule schedule = stable_diffusion_schedule();
  DenoiserSpec denoiser;
  PieConfig pie;
  MaskSpec mask;
  Method method = Method::Pie;
  std::vector<Method> compare;
  std::string source = "healthy";
  std::string target = "disease";
  std::vector<std::uint64_t> seeds{0};
  std::map<std::string, json> grids;
  fs::path output = "out";
  std::size_t direction_pairs = 16;
  std::size_t reference_size = 200;
  bool write_images = true;
  json raw;
};

// ---------------------------------------------------------------------------
// Parsing

namespace detail {

inline std::string child(const std::string& ptr, const std::string& key) { return ptr + "/" + key; }

inline const json& require(const json& j, const std::string& ptr, const std::string& key) {
  if (!j.is_object()) throw ConfigError(ptr, "expected an object");
  auto it = j.find(key);
  if (it == j.end()) throw ConfigError(child(ptr, key), "missing required key");
  return *it;
}

inline double number(const json& j, const std::string& ptr) {
  if (!j.is_number()) throw ConfigError(ptr, "expected a number");
  return j.get<double>();
}

inline std::int64_t integer(const json& j, const std::string& ptr) {
  if (!j.is_number_integer()) throw ConfigError(ptr, "expected an integer");
  return j.get<std::int64_t>();
}

inline std::size_t count(const json& j, const std::string& ptr) {
  const std::int64_t v = integer(j, ptr);
  if (v < 0) throw ConfigError(ptr, "expected a non-negative integer");
  return static_cast<std::size_t>(v);
}

inline std::string text(const json& j, const std::string& ptr) {
  if (!j.is_string()) throw ConfigError(ptr, "expected a string");
  return j.get<std::string>();
}

inline bool boolean(const json& j, const std::string& ptr) {
  if (!j.is_boolean()) throw ConfigError(ptr, "expected true or false");
  return j.get<bool>();
}

template <typename T, typename Fn>
void optional_field(const json& j, const std::string& ptr, const std::string& key, T& out, Fn&& convert) {
  if (!j.is_object()) throw ConfigError(ptr, "expected an object");
  auto it = j.find(key);
  if (it != j.end()) out = convert(*it, child(ptr, key));
}

inline void opt_number(const json& j, const std::string& ptr, const std::string& key, double& out) {
  optional_field(j, ptr, key, out, number);
}
inline void opt_count(const json& j, const std::string& ptr, const std::string& key, std::size_t& out) {
  optional_field(j, ptr, key, out, count);
}

/// Runs `fn`, turning library argument errors into config errors at `ptr`.
template <typename Fn>
auto at(const std::string& ptr, Fn&& fn) {
  try {
    return fn();
  } catch (const InvalidArgument& e) {
    throw ConfigError(ptr, e.what());
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(ptr, e.what());
  }
}

inline NoiseSchedule parse_schedule(const json& j, const std::string& ptr) {
  if (!j.is_object()) throw ConfigError(ptr, "expected an object");
  if (j.contains("alphabar")) return at(ptr, [&] { return schedule_from_json(j); });
  const std::string type = j.contains("type") ? text(j["type"], child(ptr, "type")) : "stable_diffusion";
  if (type == "stable_diffusion") {
    double T = 50, ab0 = 0.9999, ab1 = 0.9995;
    if (j.contains("T")) T = static_cast<double>(integer(j["T"], child(ptr, "T")));
    opt_number(j, ptr, "ab0", ab0);
    opt_number(j, ptr, "ab1", ab1);
    return at(ptr, [&] { return stable_diffusion_schedule(static_cast<int>(T), ab0, ab1); });
  }
  if (type == "linear") {
    const auto T = integer(require(j, ptr, "T"), child(ptr, "T"));
    const double a = number(require(j, ptr, "ab_start"), child(ptr, "ab_start"));
    const double b = number(require(j, ptr, "ab_end"), child(ptr, "ab_end"));
    return at(ptr, [&] { return linear_schedule(static_cast<int>(T), a, b); });
  }
  throw ConfigError(child(ptr, "type"), "unknown schedule type \"" + type + "\"");
}

inline WorldSpec parse_world(const json& j, const std::string& ptr) {
  WorldSpec w;
  const std::string type = text(require(j, ptr, "type"), child(ptr, "type"));
  if (type == "latent") {
    if (j.contains("preset")) {
      const std::string preset = text(j["preset"], child(ptr, "preset"));
      if (preset == "progression") {
        w.latent = progression_world();
      } else if (preset == "reference") {
        w.latent = reference_world();
      } else {
        throw ConfigError(child(ptr, "preset"), "unknown preset \"" + preset + "\"");
      }
    } else if (j.contains("two_class")) {
      const json& t = j["two_class"];
      const std::string p = child(ptr, "two_class");
      const std::size_t dim = count(require(t, p, "dim"), child(p, "dim"));
      const double var = number(require(t, p, "var"), child(p, "var"));
      const double sep = number(require(t, p, "separation"), child(p, "separation"));
      double prior = 0.5;
      opt_number(t, p, "prior", prior);
      w.latent = at(p, [&] { return two_class_world(dim, var, sep, prior); });
    } else {
      w.latent = at(ptr, [&] { return world_from_json(j); });
    }
    return w;
  }
  if (type == "blob") {
    w.image = true;
    w.latent.names = {"healthy", "disease"};
    if (j.contains("image")) {
      const json& im = j["image"];
      const std::string p = child(ptr, "image");
      opt_count(im, p, "size", w.blob.size);
      opt_number(im, p, "background", w.blob.background);
      opt_number(im, p, "gradient", w.blob.gradient);
      opt_number(im, p, "max_radius", w.blob.max_radius);
      opt_number(im, p, "peak", w.blob.peak);
      opt_number(im, p, "noise_std", w.blob.noise_std);
      w.blob.center_row = w.blob.center_col = static_cast<double>(w.blob.size) / 2.0;
      if (im.contains("center")) {
        const json& c = im["center"];
        if (!c.is_array() || c.size() != 2) throw ConfigError(child(p, "center"), "expected [row, col]");
        w.blob.center_row = number(c[0], child(p, "center") + "/0");
        w.blob.center_col = number(c[1], child(p, "center") + "/1");
      }
    }
    if (j.contains("dataset")) {
      const json& d = j["dataset"];
      const std::string p = child(ptr, "dataset");
      opt_count(d, p, "n_per_severity", w.n_per_severity);
      if (d.contains("seed")) w.dataset_seed = count(d["seed"], child(p, "seed"));
      if (d.contains("grid")) {
        w.severity_grid.clear();
        const json& g = d["grid"];
        if (!g.is_array() || g.empty()) throw ConfigError(child(p, "grid"), "expected a non-empty array");
        for (std::size_t i = 0; i < g.size(); ++i) {
          const double v = number(g[i], child(p, "grid") + "/" + std::to_string(i));
          if (!(v >= 0.0 && v <= 1.0)) throw ConfigError(child(p, "grid") + "/" + std::to_string(i), "severity outside [0,1]");
          w.severity_grid.push_back(v);
        }
      }
    }
    opt_number(j, ptr, "source_severity", w.source_severity);
    if (!(w.source_severity >= 0.0 && w.source_severity <= 1.0)) {
      throw ConfigError(child(ptr, "source_severity"), "severity outside [0,1]");
    }
    return w;
  }
  throw ConfigError(child(ptr, "type"), "unknown world type \"" + type + "\" (expected latent or blob)");
}

inline MaskSpec parse_mask(const json& j, const std::string& ptr, Shape shape) {
  MaskSpec m;
  m.center_row = static_cast<double>(shape.rows) / 2.0;
  m.center_col = static_cast<double>(shape.cols) / 2.0;
  if (j.is_null()) return m;
  m.type = text(require(j, ptr, "type"), child(ptr, "type"));
  if (m.type == "none") m.type = "ones";
  if (m.type != "ones" && m.type != "zeros" && m.type != "disk") {
    throw ConfigError(child(ptr, "type"), "unknown mask type \"" + m.type + "\"");
  }
  if (m.type == "disk") {
    if (j.contains("center")) {
      const json& c = j["center"];
      if (!c.is_array() || c.size() != 2) throw ConfigError(child(ptr, "center"), "expected [row, col]");
      m.center_row = number(c[0], child(ptr, "center") + "/0");
      m.center_col = number(c[1], child(ptr, "center") + "/1");
    }
    m.radius = number(require(j, ptr, "radius"), child(ptr, "radius"));
    opt_number(j, ptr, "soft_edge", m.soft_edge);
    at(ptr, [&] { return m.build(shape); });
  }
  return m;
}

inline PieConfig parse_pie(const json& j, const std::string& ptr) {
  PieConfig c;
  if (j.is_null()) return c;
  opt_number(j, ptr, "gamma", c.gamma);
  if (j.contains("N")) c.N = static_cast<int>(integer(j["N"], child(ptr, "N")));
  opt_number(j, ptr, "beta1", c.beta1);
  opt_number(j, ptr, "beta2", c.beta2);
  if (j.contains("noise_mode")) {
    const std::string mode = text(j["noise_mode"], child(ptr, "noise_mode"));
    c.noise_mode = at(child(ptr, "noise_mode"), [&] { return noise_mode_from_string(mode); });
  }
  at(ptr, [&] {
    c.validate();
    return 0;
  });
  return c;
}

inline Method parse_method(const json& j, const std::string& ptr) {
  const std::string m = text(j, ptr);
  if (m == "pie") return Method::Pie;
  if (m == "theory") return Method::Theory;
  if (m == "extrapolation") return Method::Extrapolation;
  if (m == "interpolation") return Method::Interpolation;
  throw ConfigError(ptr, "unknown method \"" + m + "\" (expected pie, theory, extrapolation or interpolation)");
}

inline std::vector<std::uint64_t> parse_seeds(const json& j, const std::string& ptr) {
  std::vector<std::uint64_t> seeds;
  if (j.is_array()) {
    for (std::size_t i = 0; i < j.size(); ++i) seeds.push_back(count(j[i], ptr + "/" + std::to_string(i)));
  } else if (j.is_object()) {
    const std::size_t n = count(require(j, ptr, "count"), child(ptr, "count"));
    std::size_t start = 0;
    opt_count(j, ptr, "start", start);
    for (std::size_t i = 0; i < n; ++i) seeds.push_back(start + i);
  } else {
    throw ConfigError(ptr, "expected an array of seeds or {\"count\", \"start\"}");
  }
  if (seeds.empty()) throw ConfigError(ptr, "at least one seed is required");
  return seeds;
}

}  // namespace detail

/// Parses a config document. Relative paths resolve against `base_dir`.
inline ExperimentConfig parse_config(const json& j, const fs::path& base_dir = ".") {
  using namespace detail;
  if (!j.is_object()) throw ConfigError("", "expected a JSON object");
  ExperimentConfig c;
  c.raw = j;
  c.world = parse_world(require(j, "", "world"), "/world");
  c.schedule = parse_schedule(require(j, "", "schedule"), "/schedule");

  const Shape shape = c.world.image ? c.world.blob.shape() : c.world.latent.shape();
  const json& den = require(j, "", "denoiser");
  const std::string dtype = text(require(den, "/denoiser", "type"), "/denoiser/type");
  if (dtype == "learned") {
    c.denoiser.learned = true;
    c.denoiser.checkpoint = base_dir / fs::path(text(require(den, "/denoiser", "checkpoint"), "/denoiser/checkpoint"));
    opt_count(den, "/denoiser", "time_features", c.denoiser.time_features);
    if (den.contains("hidden")) {
      const json& h = den["hidden"];
      if (!h.is_array() || h.size() != 2) throw ConfigError("/denoiser/hidden", "expected two layer widths");
      c.denoiser.hidden1 = count(h[0], "/denoiser/hidden/0");
      c.denoiser.hidden2 = count(h[1], "/denoiser/hidden/1");
    }
    if (den.contains("train")) {
      const json& t = den["train"];
      const std::string p = "/denoiser/train";
      if (t.contains("steps")) c.denoiser.train.steps = static_cast<long>(count(t["steps"], p + "/steps"));
      opt_count(t, p, "batch", c.denoiser.train.batch);
      opt_number(t, p, "learning_rate", c.denoiser.train.learning_rate);
      opt_number(t, p, "momentum", c.denoiser.train.momentum);
      opt_number(t, p, "step_weight_power", c.denoiser.train.step_weight_power);
      if (t.contains("seed")) c.denoiser.train.seed = count(t["seed"], p + "/seed");
    }
  } else if (dtype == "oracle") {
    if (c.world.image) throw ConfigError("/denoiser/type", "the analytic oracle needs a latent world");
  } else {
    throw ConfigError("/denoiser/type", "unknown denoiser type \"" + dtype + "\" (expected oracle or learned)");
  }

  c.pie = parse_pie(j.value("pie", json()), "/pie");
  c.mask = parse_mask(j.value("mask", json()), "/mask", shape);

  if (j.contains("method")) c.method = parse_method(j["method"], "/method");
  if (j.contains("compare")) {
    const json& list = j["compare"];
    if (!list.is_array()) throw ConfigError("/compare", "expected an array of method names");
    for (std::size_t i = 0; i < list.size(); ++i) {
      const Method m = parse_method(list[i], "/compare/" + std::to_string(i));
      if (m != c.method && std::find(c.compare.begin(), c.compare.end(), m) == c.compare.end()) c.compare.push_back(m);
    }
  }
  if (j.contains("source")) c.source = text(j["source"], "/source");
  if (j.contains("target")) c.target = text(j["target"], "/target");
  at("/source", [&] { return c.world.latent.class_named(c.source); });
  at("/target", [&] { return c.world.latent.class_named(c.target); });

  if (j.contains("seeds")) c.seeds = parse_seeds(j["seeds"], "/seeds");
  if (j.contains("sweep")) {
    const json& s = j["sweep"];
    if (!s.is_object()) throw ConfigError("/sweep", "expected an object of grids");
    for (const auto& [name, values] : s.items()) {
      const std::string p = "/sweep/" + name;
      if (name != "gamma" && name != "N" && name != "beta1" && name != "beta2" && name != "mask") {
        throw ConfigError(p, "unknown grid (expected gamma, N, beta1, beta2 or mask)");
      }
      if (!values.is_array() || values.empty()) throw ConfigError(p, "grid must be a non-empty array");
      for (std::size_t i = 0; i < values.size(); ++i) {
        const std::string q = p + "/" + std::to_string(i);
        if (name == "mask") {
          boolean(values[i], q);
        } else if (name == "N") {
          if (integer(values[i], q) < 0) throw ConfigError(q, "N must be >= 0");
        } else {
          const double v = number(values[i], q);
          if (!(v >= 0.0 && v <= 1.0)) throw ConfigError(q, "value outside [0,1]");
        }
      }
      c.grids[name] = values;
    }
  }
  if (j.contains("output")) c.output = base_dir / fs::path(text(j["output"], "/output"));
  opt_count(j, "", "direction_pairs", c.direction_pairs);
  if (c.direction_pairs == 0) throw ConfigError("/direction_pairs", "need at least one pair");
  opt_count(j, "", "reference_size", c.reference_size);
  if (c.reference_size < 2) throw ConfigError("/reference_size", "need at least two reference samples");
  if (j.contains("write_images")) c.write_images = boolean(j["write_images"], "/write_images");

  if (const char* env = std::getenv("PIE_SEED")) {
    try {
      std::size_t used = 0;
      const unsigned long long v = std::stoull(env, &used);
      if (used != std::string(env).size()) throw std::invalid_argument("trailing characters");
      c.seeds = {static_cast<std::uint64_t>(v)};
    } catch (const std::exception&) {
      throw ConfigError("$PIE_SEED", "expected a non-negative integer, got \"" + std::string(env) + "\"");
    }
  }
  return c;
}

inline ExperimentConfig load_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("", "cannot open config file " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("", std::string("invalid JSON: ") + e.what());
  }
  return parse_config(j, path.parent_path());
}

// ---------------------------------------------------------------------------
// Formatting

inline std::string fmt(double v) {
  if (std::isnan(v)) return "nan";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline void write_text(const fs::path& path, const std::string& body) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << body;
}

inline std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingArtifact("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline json null_if_nan(double v) { return std::isfinite(v) ? json(v) : json(); }

// ---------------------------------------------------------------------------
// Runtime context

/// Training items for the learned denoiser: the blob dataset, or labeled
/// latent samples for a latent world.
inline std::vector<TrainingItem> training_items(const ExperimentConfig& c) {
  std::vector<TrainingItem> items;
  if (c.world.image) {
    for (auto& d : make_dataset(c.world.blob, c.world.n_per_severity, c.world.severity_grid, c.world.dataset_seed)) {
      items.push_back({std::move(d.image), Condition{d.label}});
    }
  } else {
    Rng rng = make_rng(c.world.dataset_seed, 0xda7a);
    const std::size_t per_class = c.world.n_per_severity * c.world.severity_grid.size() / c.world.latent.num_classes();
    for (std::size_t k = 0; k < c.world.latent.num_classes(); ++k) {
      for (std::size_t i = 0; i < per_class; ++i) {
        items.push_back({sample_latent(c.world.latent, Condition{static_cast<int>(k)}, rng), Condition{static_cast<int>(k)}});
      }
    }
  }
  return items;
}

inline MlpArch arch_for(const ExperimentConfig& c) {
  MlpArch a;
  const Shape shape = c.world.image ? c.world.blob.shape() : c.world.latent.shape();
  a.rows = shape.rows;
  a.cols = shape.cols;
  a.hidden1 = c.denoiser.hidden1;
  a.hidden2 = c.denoiser.hidden2;
  a.time_features = c.denoiser.time_features;
  a.num_classes = c.world.image ? 2 : c.world.latent.num_classes();
  a.T = static_cast<std::size_t>(c.schedule.T());
  return a;
}

/// Trains the configured learned denoiser and returns it with its loss curve.
inline std::pair<MlpDenoiser, std::vector<double>> train_denoiser(const ExperimentConfig& c) {
  const auto items = training_items(c);
  double mean = 0.0;
  for (const auto& it : items) mean += it.x0.values().mean();
  mean /= static_cast<double>(items.size());
  MlpDenoiser m = MlpDenoiser::initialized(arch_for(c), c.schedule, c.denoiser.train.seed, mean);
  auto losses = train(m, items, c.denoiser.train);
  return {std::move(m), std::move(losses)};
}

class Context {
 public:
  explicit Context(const ExperimentConfig& cfg) : cfg_(cfg) {
    source_ = cfg.world.latent.class_named(cfg.source);
    target_ = cfg.world.latent.class_named(cfg.target);
    shape_ = cfg.world.image ? cfg.world.blob.shape() : cfg.world.latent.shape();
    mask_ = cfg.mask.build(shape_);
    if (cfg.denoiser.learned) {
      if (!fs::exists(cfg.denoiser.checkpoint)) {
        throw ConfigError("/denoiser/checkpoint", "checkpoint " + cfg.denoiser.checkpoint.string() +
                                                      " does not exist (run `pie train` first)");
      }
      mlp_ = std::make_unique<MlpDenoiser>(load_checkpoint(cfg.denoiser.checkpoint));
      if (!(mlp_->arch() == arch_for(cfg)) || mlp_->alphabars() != cfg.schedule.alphabars()) {
        throw ConfigError("/denoiser/checkpoint", "checkpoint architecture or schedule does not match the config");
      }
      denoiser_ = mlp_.get();
    } else {
      oracle_ = std::make_unique<GaussianWorldOracle>(cfg.world.latent, cfg.schedule);
      denoiser_ = oracle_.get();
    }
    if (cfg.world.image) {
      dataset_ = make_dataset(cfg.world.blob, cfg.world.n_per_severity, cfg.world.severity_grid, cfg.world.dataset_seed);
      classifier_ = train_classifier(dataset_).classifier;
      const bool want_disease = target_.label == kDisease;
      hooks_.confidence = [this, want_disease](const State& x) {
        const double p = classifier_.confidence(x);
        return want_disease ? p : 1.0 - p;
      };
    } else {
      hooks_.confidence = [this](const State& x) { return bayes_confidence(cfg_.world.latent, x, target_); };
    }
  }

  Context(const Context&) = delete;
  Context& operator=(const Context&) = delete;

  const ExperimentConfig& config() const { return cfg_; }
  const Denoiser& denoiser() const { return *denoiser_; }
  const MetricHooks& hooks() const { return hooks_; }
  Shape shape() const { return shape_; }

  State source_state(std::uint64_t seed) const {
    Rng rng = make_rng(seed, 0x5eed);
    if (cfg_.world.image) return render_blob(cfg_.world.blob, cfg_.world.source_severity, rng);
    return sample_latent(cfg_.world.latent, source_, rng);
  }

  /// Target-class samples for the MMD comparison.
  std::vector<State> reference_set() const {
    std::vector<State> out;
    if (cfg_.world.image) {
      for (const auto& d : dataset_) {
        if (d.label == target_.label && out.size() < cfg_.reference_size) out.push_back(d.image);
      }
      return out;
    }
    Rng rng = make_rng(0, 0x4ef);
    for (std::size_t i = 0; i < cfg_.reference_size; ++i) out.push_back(sample_latent(cfg_.world.latent, target_, rng));
    return out;
  }

  std::vector<DirectionPair> direction_pairs(std::uint64_t seed) const {
    Rng rng = make_rng(seed, 0xe0);
    if (!cfg_.world.image) return sample_direction_pairs(cfg_.world.latent, source_, target_, cfg_.direction_pairs, rng);
    std::vector<const State*> from;
    std::vector<const State*> to;
    for (const auto& d : dataset_) (d.label == source_.label ? from : to).push_back(&d.image);
    if (from.empty() || to.empty()) throw ConfigError("/world/dataset", "both classes need training images");
    std::uniform_int_distribution<std::size_t> pick_from(0, from.size() - 1);
    std::uniform_int_distribution<std::size_t> pick_to(0, to.size() - 1);
    std::vector<DirectionPair> pairs;
    for (std::size_t i = 0; i < cfg_.direction_pairs; ++i) {
      const State& a = *from[pick_from(rng)];
      const State& b = *to[pick_to(rng)];
      pairs.push_back({a, b});
    }
    return pairs;
  }

  Trajectory run(Method method, const PieConfig& pie, const RoiMask& mask, std::uint64_t seed) const {
    const State x0 = source_state(seed);
    switch (method) {
      case Method::Pie: return run_progression(x0, target_, mask, pie, *denoiser_, cfg_.schedule, seed, hooks_);
      case Method::Theory:
        return theory::theory_iterate(x0, target_, *denoiser_, cfg_.schedule, pie.N, pie.noise_mode, seed, hooks_);
      case Method::Extrapolation: {
        const std::vector<double> weights(cfg_.direction_pairs, pie.N > 0 ? 1.0 / pie.N : 1.0);
        Trajectory t = run_extrapolation(x0, direction_pairs(seed), weights, mask, pie, hooks_);
        t.seed = seed;
        return t;
      }
      case Method::Interpolation: {
        if (pie.N == 0) {
          Trajectory t;
          t.seed = seed;
          t.config = pie;
          t.states.push_back(x0);
          t.records.push_back(describe(0, x0, x0, nullptr, hooks_));
          return t;
        }
        InterpolationConfig ic;
        ic.steps = pie.N;
        ic.mix = pie.gamma;
        return interpolation_walk(x0, target_, *denoiser_, cfg_.schedule, ic, seed, hooks_);
      }
    }
    throw std::logic_error("unknown method");
  }

  Trajectory run(const PieConfig& pie, const RoiMask& mask, std::uint64_t seed) const {
    return run(cfg_.method, pie, mask, seed);
  }
  Trajectory run(Method method, std::uint64_t seed) const { return run(method, cfg_.pie, mask_, seed); }
  Trajectory run(std::uint64_t seed) const { return run(cfg_.method, seed); }

 private:
  ExperimentConfig cfg_;
  Condition source_;
  Condition target_;
  Shape shape_;
  RoiMask mask_;
  std::unique_ptr<GaussianWorldOracle> oracle_;
  std::unique_ptr<MlpDenoiser> mlp_;
  const Denoiser* denoiser_ = nullptr;
  Dataset dataset_;
  LinearClassifier classifier_;
  MetricHooks hooks_;
};

// ---------------------------------------------------------------------------
// Aggregation

struct Summary {
  double conf_mean = 0.0;
  double conf_std = 0.0;
  double similarity_mean = 0.0;
  double similarity_std = 0.0;
};

inline Summary summarize(const std::vector<double>& conf, const std::vector<double>& sim) {
  auto mean_std = [](const std::vector<double>& v) {
    double m = 0.0;
    for (double x : v) m += x;
    m /= static_cast<double>(v.size());
    double ss = 0.0;
    for (double x : v) ss += (x - m) * (x - m);
    const double sd = v.size() > 1 ? std::sqrt(ss / static_cast<double>(v.size() - 1)) : 0.0;
    return std::pair{m, sd};
  };
  Summary s;
  std::tie(s.conf_mean, s.conf_std) = mean_std(conf);
  std::tie(s.similarity_mean, s.similarity_std) = mean_std(sim);
  return s;
}

inline double final_mmd(const std::vector<Trajectory>& runs, const std::vector<State>& reference) {
  if (runs.size() < 2) return std::numeric_limits<double>::quiet_NaN();
  std::vector<State> finals;
  for (const auto& r : runs) finals.push_back(r.final());
  return mmd_poly(finals, reference);
}

// ---------------------------------------------------------------------------
// run

inline std::string trajectories_csv(const std::vector<Trajectory>& runs) {
  std::string out = "run_id,step,conf,similarity,step_diff_norm\n";
  for (const auto& t : runs) {
    for (const auto& r : t.records) {
      out += std::to_string(t.seed) + "," + std::to_string(r.step) + "," + fmt(r.conf) + "," + fmt(r.similarity) + "," +
             fmt(r.step_diff_norm) + "\n";
    }
  }
  return out;
}

/// Per-step rows for several methods; mmd compares the step-n states of all
/// seeds against the reference set.
inline std::string metrics_csv(const std::vector<std::pair<Method, std::vector<Trajectory>>>& methods,
                               const std::vector<State>& reference) {
  std::string out = "method,run_id,step,conf,similarity,mmd\n";
  for (const auto& [method, runs] : methods) {
    const int N = runs.front().N();
    for (int n = 0; n <= N; ++n) {
      double mmd = std::numeric_limits<double>::quiet_NaN();
      if (runs.size() >= 2) {
        std::vector<State> states;
        for (const auto& t : runs) states.push_back(t.states[static_cast<std::size_t>(n)]);
        mmd = mmd_poly(states, reference);
      }
      for (const auto& t : runs) {
        const auto& r = t.records[static_cast<std::size_t>(n)];
        out += to_string(method) + "," + std::to_string(t.seed) + "," + std::to_string(n) + "," + fmt(r.conf) + "," +
               fmt(r.similarity) + "," + fmt(mmd) + "\n";
      }
    }
  }
  return out;
}

inline json bound_report(const ExperimentConfig& c, const std::vector<Trajectory>& runs) {
  json per_run = json::array();
  std::size_t violations = 0;
  bool drift_holds = true;
  for (const auto& t : runs) {
    const auto k = theory::measure_constants(t);
    const auto r = theory::check_prop2(t, k.C1, k.C2, c.schedule);
    json j = theory::to_json(r);
    j["seed"] = t.seed;
    violations += r.violations.size();
    drift_holds = drift_holds && r.drift_holds();
    per_run.push_back(std::move(j));
  }
  return {{"runs", per_run}, {"prop2_violations", violations}, {"prop3_holds", drift_holds}};
}

/// Runs the configured method for every seed and writes the artifact tree.
inline json run_experiment(const ExperimentConfig& c) {
  const Context ctx(c);
  std::vector<Trajectory> runs;
  for (std::uint64_t seed : c.seeds) runs.push_back(ctx.run(seed));
  const auto reference = ctx.reference_set();

  fs::create_directories(c.output);
  write_text(c.output / "trajectories.csv", trajectories_csv(runs));

  std::vector<std::pair<Method, std::vector<Trajectory>>> by_method{{c.method, runs}};
  for (Method m : c.compare) {
    std::vector<Trajectory> other;
    for (std::uint64_t seed : c.seeds) other.push_back(ctx.run(m, seed));
    by_method.emplace_back(m, std::move(other));
  }
  write_text(c.output / "metrics.csv", metrics_csv(by_method, reference));
  json methods = json::object();
  for (const auto& [m, rs] : by_method) {
    std::vector<double> conf;
    std::vector<double> sim;
    for (const auto& t : rs) {
      conf.push_back(t.records.back().conf);
      sim.push_back(t.records.back().similarity);
    }
    const Summary s = summarize(conf, sim);
    methods[to_string(m)] = {{"conf_mean", null_if_nan(s.conf_mean)},
                             {"conf_std", null_if_nan(s.conf_std)},
                             {"similarity_mean", null_if_nan(s.similarity_mean)},
                             {"final_conf", conf},
                             {"mmd_final", null_if_nan(final_mmd(rs, reference))}};
  }

  json steps = json::array();
  const int N = runs.front().N();
  for (int n = 0; n <= N; ++n) {
    std::vector<double> conf;
    std::vector<double> sim;
    for (const auto& t : runs) {
      conf.push_back(t.records[static_cast<std::size_t>(n)].conf);
      sim.push_back(t.records[static_cast<std::size_t>(n)].similarity);
    }
    const Summary s = summarize(conf, sim);
    steps.push_back({{"step", n},
                     {"conf_mean", null_if_nan(s.conf_mean)},
                     {"conf_std", null_if_nan(s.conf_std)},
                     {"similarity_mean", null_if_nan(s.similarity_mean)},
                     {"similarity_std", null_if_nan(s.similarity_std)}});
  }
  json report{{"method", to_string(c.method)},
              {"seeds", c.seeds},
              {"pie",
               {{"gamma", c.pie.gamma},
                {"N", c.pie.N},
                {"beta1", c.pie.beta1},
                {"beta2", c.pie.beta2},
                {"noise_mode", to_string(c.pie.noise_mode)},
                {"k", c.pie.noise_step(c.schedule.T())}}},
              {"steps", steps},
              {"final", steps.back()},
              {"mmd_final", null_if_nan(final_mmd(runs, reference))},
              {"methods", methods},
              {"config", c.raw}};

  if (c.method == Method::Theory) {
    const json b = bound_report(c, runs);
    write_text(c.output / "bound_report.json", b.dump(2) + "\n");
    report["prop2_violations"] = b["prop2_violations"];
    report["prop3_holds"] = b["prop3_holds"];
  }

  if (c.world.image && c.write_images) {
    fs::create_directories(c.output / "images");
    fs::create_directories(c.output / "heatmaps");
    for (const auto& t : runs) {
      for (int n = 0; n <= t.N(); ++n) {
        const std::string stem = "run" + std::to_string(t.seed) + "_step" + std::to_string(n) + ".pgm";
        write_image(c.output / "images" / stem, clamp_unit(t.states[static_cast<std::size_t>(n)]));
        write_image(c.output / "heatmaps" / stem, clamp_unit(diff_heatmap(t, n)));
      }
    }
  }
  write_text(c.output / "report.json", report.dump(2) + "\n");
  return report;
}

// ---------------------------------------------------------------------------
// sweep

struct SweepRow {
  double value = 0.0;
  std::uint64_t seed = 0;
  double conf = 0.0;
  double similarity = 0.0;
};

inline std::string grid_value_label(const std::string& grid, double v) {
  if (grid == "mask") return v > 0.5 ? "on" : "off";
  return fmt(v);
}

/// One row per (grid value, seed) with final metrics, then mean and std rows
/// per grid value; the mean row carries the MMD of the final states.
inline std::string sweep(const ExperimentConfig& c, const std::string& grid) {
  auto it = c.grids.find(grid);
  if (it == c.grids.end()) throw ConfigError("/sweep/" + grid, "grid is not defined in the config");
  const Context ctx(c);
  const auto reference = ctx.reference_set();

  std::vector<double> values;
  for (const auto& v : it->second) values.push_back(grid == "mask" ? (v.get<bool>() ? 1.0 : 0.0) : v.get<double>());
  std::sort(values.begin(), values.end());
  values.erase(std::unique(values.begin(), values.end()), values.end());

  std::string out = "grid,value,seed,final_conf,final_similarity,mmd\n";
  for (double v : values) {
    PieConfig pie = c.pie;
    RoiMask mask = c.mask.build(ctx.shape());
    if (grid == "gamma") pie.gamma = v;
    if (grid == "N") pie.N = static_cast<int>(v);
    if (grid == "beta1") pie.beta1 = v;
    if (grid == "beta2") pie.beta2 = v;
    if (grid == "mask" && v < 0.5) mask = RoiMask::ones(ctx.shape());

    std::vector<std::uint64_t> seeds = c.seeds;
    std::sort(seeds.begin(), seeds.end());
    std::vector<Trajectory> runs;
    std::vector<double> conf;
    std::vector<double> sim;
    const std::string label = grid_value_label(grid, v);
    for (std::uint64_t seed : seeds) {
      runs.push_back(ctx.run(pie, mask, seed));
      const auto& last = runs.back().records.back();
      conf.push_back(last.conf);
      sim.push_back(last.similarity);
      out += grid + "," + label + "," + std::to_string(seed) + "," + fmt(last.conf) + "," + fmt(last.similarity) + ",\n";
    }
    const Summary s = summarize(conf, sim);
    out += grid + "," + label + ",mean," + fmt(s.conf_mean) + "," + fmt(s.similarity_mean) + "," +
           fmt(final_mmd(runs, reference)) + "\n";
    out += grid + "," + label + ",std," + fmt(s.conf_std) + "," + fmt(s.similarity_std) + ",\n";
  }
  fs::create_directories(c.output);
  write_text(c.output / ("sweep_" + grid + ".csv"), out);
  return out;
}

// ---------------------------------------------------------------------------
// report / check

namespace detail {

inline std::vector<std::vector<std::string>> read_csv(const fs::path& path) {
  std::istringstream in(read_text(path));
  std::vector<std::vector<std::string>> rows;
  std::string line;
  bool header = true;
  while (std::getline(in, line)) {
    if (header) {
      header = false;
      continue;
    }
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::string cell;
    std::istringstream ls(line);
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    if (!line.empty() && line.back() == ',') cells.emplace_back();
    rows.push_back(std::move(cells));
  }
  return rows;
}

inline double parse_double(const std::string& s) {
  if (s.empty() || s == "nan") return std::numeric_limits<double>::quiet_NaN();
  return std::stod(s);
}

inline json spearman_or_null(const std::vector<double>& a, const std::vector<double>& b) {
  try {
    return null_if_nan(spearman(a, b));
  } catch (const std::exception&) {
    return json();
  }
}

}  // namespace detail

/// Summarizes an artifact directory into summary.json and returns it.
inline json report(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw MissingArtifact("not a directory: " + dir.string());
  json summary;

  json inventory = json::array();
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().filename() != "summary.json") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  for (const auto& f : files) {
    inventory.push_back({{"path", fs::relative(f, dir).generic_string()}, {"bytes", fs::file_size(f)}});
  }
  summary["inventory"] = inventory;

  bool found = false;
  if (fs::exists(dir / "trajectories.csv")) {
    found = true;
    std::map<int, std::pair<std::vector<double>, std::vector<double>>> by_step;
    for (const auto& row : detail::read_csv(dir / "trajectories.csv")) {
      if (row.size() < 5) throw MissingArtifact("malformed trajectories.csv row");
      auto& slot = by_step[std::stoi(row[1])];
      slot.first.push_back(detail::parse_double(row[2]));
      slot.second.push_back(detail::parse_double(row[3]));
    }
    std::vector<double> steps;
    std::vector<double> conf;
    std::vector<double> sim;
    for (const auto& [n, v] : by_step) {
      const Summary s = summarize(v.first, v.second);
      steps.push_back(n);
      conf.push_back(s.conf_mean);
      sim.push_back(s.similarity_mean);
    }
    summary["trajectory"] = {{"steps", steps.size()},
                             {"conf_initial", null_if_nan(conf.front())},
                             {"conf_final", null_if_nan(conf.back())},
                             {"similarity_final", null_if_nan(sim.back())},
                             {"spearman_conf_step", detail::spearman_or_null(steps, conf)},
                             {"spearman_similarity_step", detail::spearman_or_null(steps, sim)}};
  }

  json sweeps = json::object();
  for (const auto& f : files) {
    const std::string name = f.filename().string();
    if (f.parent_path() != dir || name.rfind("sweep_", 0) != 0 || f.extension() != ".csv") continue;
    found = true;
    const std::string grid = name.substr(6, name.size() - 10);
    std::vector<double> values;
    std::vector<double> conf;
    std::vector<double> sim;
    json points = json::array();
    for (const auto& row : detail::read_csv(f)) {
      if (row.size() < 6) throw MissingArtifact("malformed " + name + " row");
      if (row[2] != "mean") continue;
      const double v = row[1] == "on" ? 1.0 : row[1] == "off" ? 0.0 : detail::parse_double(row[1]);
      values.push_back(v);
      conf.push_back(detail::parse_double(row[3]));
      sim.push_back(detail::parse_double(row[4]));
      points.push_back({{"value", v},
                        {"conf_mean", null_if_nan(conf.back())},
                        {"similarity_mean", null_if_nan(sim.back())},
                        {"mmd", null_if_nan(detail::parse_double(row[5]))}});
    }
    sweeps[grid] = {{"points", points},
                    {"spearman_conf", detail::spearman_or_null(values, conf)},
                    {"spearman_similarity", detail::spearman_or_null(values, sim)}};
  }
  if (!sweeps.empty()) summary["sweeps"] = sweeps;

  if (fs::exists(dir / "report.json")) {
    const json r = json::parse(read_text(dir / "report.json"));
    if (r.contains("methods") && r["methods"].contains("pie") && r["methods"].size() > 1) {
      const auto pie_conf = r["methods"]["pie"]["final_conf"].get<std::vector<double>>();
      json ordering = json::object();
      for (const auto& [name, m] : r["methods"].items()) {
        if (name == "pie") continue;
        const auto other = m["final_conf"].get<std::vector<double>>();
        int wins = 0;
        for (std::size_t i = 0; i < pie_conf.size() && i < other.size(); ++i) wins += pie_conf[i] > other[i] ? 1 : 0;
        const int n = static_cast<int>(std::min(pie_conf.size(), other.size()));
        ordering[name] = {{"pie_wins", wins}, {"runs", n}, {"sign_test_p", sign_test_p(wins, n)}};
      }
      summary["ordering"] = ordering;
    }
  }

  if (fs::exists(dir / "bound_report.json")) {
    found = true;
    const json b = json::parse(read_text(dir / "bound_report.json"));
    summary["prop2_violations"] = b.at("prop2_violations");
    summary["prop3_holds"] = b.at("prop3_holds");
  }
  if (!found) {
    throw MissingArtifact("no artifacts in " + dir.string() +
                          " (expected trajectories.csv, sweep_*.csv or bound_report.json)");
  }
  write_text(dir / "summary.json", summary.dump(2) + "\n");
  return summary;
}

struct CheckResult {
  std::string name;
  bool pass = false;
  std::string detail;
};

/// Evaluates the trend and bound expectations that apply to the artifacts.
inline std::vector<CheckResult> check(const fs::path& dir) {
  const json s = report(dir);
  std::vector<CheckResult> out;
  auto num = [](const json& j) { return j.is_number() ? j.get<double>() : std::numeric_limits<double>::quiet_NaN(); };

  if (s.contains("prop2_violations")) {
    const auto v = s["prop2_violations"].get<std::size_t>();
    out.push_back({"prop2_envelope", v == 0, std::to_string(v) + " violations"});
    const bool drift = s["prop3_holds"].get<bool>();
    out.push_back({"prop3_drift", drift, drift ? "total drift within kappa" : "total drift exceeds kappa"});
  }
  if (s.contains("trajectory") && !s.contains("prop2_violations")) {
    const double c0 = num(s["trajectory"]["conf_initial"]);
    const double c1 = num(s["trajectory"]["conf_final"]);
    out.push_back({"confidence_rises", c1 >= c0, "initial " + fmt(c0) + ", final " + fmt(c1)});
  }
  if (s.contains("ordering")) {
    for (const auto& [name, o] : s["ordering"].items()) {
      const double p = o["sign_test_p"].get<double>();
      out.push_back({"pie_beats_" + name, p < 0.01,
                     std::to_string(o["pie_wins"].get<int>()) + "/" + std::to_string(o["runs"].get<int>()) +
                         " wins, sign test p = " + fmt(p) + " (need < 0.01)"});
    }
  }
  if (s.contains("sweeps")) {
    for (const auto& [grid, g] : s["sweeps"].items()) {
      const double rc = num(g["spearman_conf"]);
      const double rs = num(g["spearman_similarity"]);
      std::map<double, std::pair<double, double>> at;
      for (const auto& p : g["points"]) at[p["value"].get<double>()] = {num(p["conf_mean"]), num(p["similarity_mean"])};
      if (grid == "gamma") {
        out.push_back({"gamma_conf_trend", rc >= 0.9, "spearman " + fmt(rc) + " (need >= 0.9)"});
        out.push_back({"gamma_similarity_trend", rs <= -0.5, "spearman " + fmt(rs) + " (need <= -0.5)"});
      } else if (grid == "N") {
        if (at.count(1.0) && at.count(10.0)) {
          const double gain = at[10.0].first - at[1.0].first;
          out.push_back({"N_conf_gain", gain >= 0.2, "conf(10) - conf(1) = " + fmt(gain) + " (need >= 0.2)"});
        }
        if (at.count(10.0) && at.count(20.0)) {
          const double gap = std::abs(at[20.0].first - at[10.0].first);
          out.push_back({"N_conf_plateau", gap <= 0.05, "|conf(20) - conf(10)| = " + fmt(gap) + " (need <= 0.05)"});
        }
      } else if (grid == "beta1" || grid == "beta2") {
        const double lo = at.begin()->second.first;
        const double hi = at.rbegin()->second.first;
        out.push_back({grid + "_conf_trend", hi >= lo, "conf " + fmt(lo) + " -> " + fmt(hi)});
      } else if (grid == "mask" && at.count(0.0) && at.count(1.0)) {
        const double on = at[1.0].second;
        const double off = at[0.0].second;
        out.push_back({"mask_similarity", on > off, "with mask " + fmt(on) + ", without " + fmt(off)});
      }
    }
  }
  return out;
}

}  // namespace pie::experiment
