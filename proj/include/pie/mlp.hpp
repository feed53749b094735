#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <string>
#include <vector>

#include "pie/ddim.hpp"
#include "pie/denoiser.hpp"
#include "pie/rng.hpp"
#include "pie/schedule.hpp"

namespace pie {

class TrainingDiverged : public std::runtime_error {
 public:
  explicit TrainingDiverged(long step)
      : std::runtime_error("training diverged at step " + std::to_string(step) + " (non-finite loss)"), step_(step) {}
  long step() const { return step_; }

 private:
  long step_;
};

struct MlpArch {
  std::size_t rows = 32;
  std::size_t cols = 32;
  std::size_t hidden1 = 256;
  std::size_t hidden2 = 256;
  std::size_t time_features = 16;
  std::size_t num_classes = 2;
  std::size_t T = 50;

  std::size_t data_dim() const { return rows * cols; }
  std::size_t input_dim() const { return data_dim() + time_features + num_classes; }
  bool operator==(const MlpArch&) const = default;
};

/// Parameters of the two-hidden-layer tanh network, in declaration order.
struct MlpParams {
  Eigen::MatrixXd W1;
  Vector b1;
  Eigen::MatrixXd W2;
  Vector b2;
  Eigen::MatrixXd W3;
  Vector b3;
  Vector skip;  // single entry

  static MlpParams zeros(const MlpArch& a) {
    const auto in = static_cast<Eigen::Index>(a.input_dim());
    const auto h1 = static_cast<Eigen::Index>(a.hidden1);
    const auto h2 = static_cast<Eigen::Index>(a.hidden2);
    const auto out = static_cast<Eigen::Index>(a.data_dim());
    return {Eigen::MatrixXd::Zero(h1, in), Vector::Zero(h1), Eigen::MatrixXd::Zero(h2, h1),
            Vector::Zero(h2),              Eigen::MatrixXd::Zero(out, h2), Vector::Zero(out), Vector::Zero(1)};
  }

  template <typename Fn>
  void for_each(Fn&& fn) {
    fn(W1.data(), W1.size());
    fn(b1.data(), b1.size());
    fn(W2.data(), W2.size());
    fn(b2.data(), b2.size());
    fn(W3.data(), W3.size());
    fn(b3.data(), b3.size());
    fn(skip.data(), skip.size());
  }

  std::size_t count() const {
    return static_cast<std::size_t>(W1.size() + b1.size() + W2.size() + b2.size() + W3.size() + b3.size() + skip.size());
  }

  std::vector<double> flatten() const {
    std::vector<double> out;
    out.reserve(count());
    const_cast<MlpParams*>(this)->for_each([&](double* p, Eigen::Index n) { out.insert(out.end(), p, p + n); });
    return out;
  }

  void assign(const std::vector<double>& flat) {
    if (flat.size() != count()) throw InvalidArgument("mlp: parameter vector has wrong length");
    std::size_t at = 0;
    for_each([&](double* p, Eigen::Index n) {
      std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(at), n, p);
      at += static_cast<std::size_t>(n);
    });
  }

  bool all_finite() const {
    return W1.allFinite() && b1.allFinite() && W2.allFinite() && b2.allFinite() && W3.allFinite() && b3.allFinite() && skip.allFinite();
  }
};

/// sin/cos of t/T at F/2 geometric frequencies from 1 to T.
inline Vector time_features(int t, const MlpArch& a) {
  const std::size_t pairs = a.time_features / 2;
  Vector f = Vector::Zero(static_cast<Eigen::Index>(a.time_features));
  const double u = static_cast<double>(t) / static_cast<double>(a.T);
  for (std::size_t j = 0; j < pairs; ++j) {
    const double expo = pairs > 1 ? static_cast<double>(j) / static_cast<double>(pairs - 1) : 0.0;
    const double freq = std::pow(static_cast<double>(a.T), expo);
    f[static_cast<Eigen::Index>(2 * j)] = std::sin(freq * u);
    f[static_cast<Eigen::Index>(2 * j + 1)] = std::cos(freq * u);
  }
  return f;
}

struct TrainingExample {
  State x0;
  int t = 1;
  State eps;
  Condition y;
};

struct LossAndGrad {
  double loss = 0.0;
  MlpParams grad;
};

/// Dense epsilon predictor. The network reads [x_t; time features; one-hot y]
/// through two tanh layers and a linear layer g; the output is
///   eps = (skip x_t - sqrt(abar_t) g) / sqrt(1 - abar_t),
/// so g plays the role of a clean-image estimate and the full-rank part of
/// eps comes through the scalar skip weight.
class MlpDenoiser final : public Denoiser {
 public:
  MlpDenoiser(MlpArch arch, const NoiseSchedule& s) : arch_(arch), params_(MlpParams::zeros(arch)), alphabar_(s.alphabars()) {
    if (arch.time_features % 2 != 0) throw InvalidArgument("mlp: time feature count must be even");
    if (arch.num_classes == 0 || arch.data_dim() == 0) throw InvalidArgument("mlp: empty architecture");
    if (static_cast<std::size_t>(s.T()) != arch.T) throw InvalidArgument("mlp: schedule length does not match arch.T");
  }

  /// Scaled-normal hidden weights, unit skip, output bias at `mean_image`.
  static MlpDenoiser initialized(MlpArch arch, const NoiseSchedule& s, std::uint64_t seed, double mean_image = 0.0) {
    MlpDenoiser m(arch, s);
    Rng rng = make_rng(seed, 0x1417);
    std::normal_distribution<double> normal(0.0, 1.0);
    auto fill = [&](Eigen::MatrixXd& W, double scale) {
      for (Eigen::Index i = 0; i < W.size(); ++i) W.data()[i] = scale * normal(rng);
    };
    fill(m.params_.W1, 1.0 / std::sqrt(static_cast<double>(arch.input_dim())));
    fill(m.params_.W2, 1.0 / std::sqrt(static_cast<double>(arch.hidden1)));
    fill(m.params_.W3, 0.01 / std::sqrt(static_cast<double>(arch.hidden2)));
    m.params_.b3.setConstant(mean_image);
    m.params_.skip[0] = 1.0;
    return m;
  }

  const MlpArch& arch() const { return arch_; }
  const MlpParams& params() const { return params_; }
  MlpParams& params() { return params_; }
  const std::vector<double>& alphabars() const { return alphabar_; }

  /// Columns are network inputs for each (x_t, t, y).
  Eigen::MatrixXd assemble_inputs(const std::vector<const State*>& xs, const std::vector<int>& ts,
                                  const std::vector<Condition>& ys) const {
    const auto B = static_cast<Eigen::Index>(xs.size());
    const auto D = static_cast<Eigen::Index>(arch_.data_dim());
    const auto F = static_cast<Eigen::Index>(arch_.time_features);
    Eigen::MatrixXd U = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(arch_.input_dim()), B);
    for (Eigen::Index i = 0; i < B; ++i) {
      const State& x = *xs[static_cast<std::size_t>(i)];
      if (x.size() != arch_.data_dim()) {
        throw InvalidArgument("mlp: input has " + std::to_string(x.size()) + " cells, expected " +
                              std::to_string(arch_.data_dim()));
      }
      const Condition y = ys[static_cast<std::size_t>(i)];
      if (y.label < 0 || static_cast<std::size_t>(y.label) >= arch_.num_classes) {
        throw InvalidArgument("mlp: unknown class " + std::to_string(y.label));
      }
      const int t = ts[static_cast<std::size_t>(i)];
      if (t < 0 || static_cast<std::size_t>(t) > arch_.T) throw InvalidArgument("mlp: step out of range");
      U.col(i).head(D) = x.values();
      U.col(i).segment(D, F) = time_features(t, arch_);
      U(D + F + y.label, i) = 1.0;
    }
    return U;
  }

  State forward(const State& x, int t, Condition y) const {
    const Eigen::MatrixXd U = assemble_inputs({&x}, {t}, {y});
    const Pass p = run(U, {t});
    if (x.shape().size() == arch_.data_dim()) return x.with_values(p.eps.col(0));
    return State(p.eps.col(0), {arch_.rows, arch_.cols});
  }

  State epsilon(const State& x, int t, Condition y) const override { return forward(x, t, y); }

  /// Mean over the batch of |eps - f(x_t, t, y)|^2 / D and its gradient.
  LossAndGrad loss_and_grad(const std::vector<TrainingExample>& batch) const {
    if (batch.empty()) throw InvalidArgument("mlp: empty batch");
    const auto B = static_cast<Eigen::Index>(batch.size());
    const auto D = static_cast<double>(arch_.data_dim());

    std::vector<State> noisy;
    noisy.reserve(batch.size());
    std::vector<const State*> xs;
    std::vector<int> ts;
    std::vector<Condition> ys;
    Eigen::MatrixXd E(static_cast<Eigen::Index>(arch_.data_dim()), B);
    for (Eigen::Index i = 0; i < B; ++i) {
      const auto& ex = batch[static_cast<std::size_t>(i)];
      if (ex.t < 1 || static_cast<std::size_t>(ex.t) > arch_.T) throw InvalidArgument("mlp: training step out of range");
      noisy.push_back(ddim::forward_noise_at(ex.x0, alphabar_[static_cast<std::size_t>(ex.t)], ex.eps));
      ts.push_back(ex.t);
      ys.push_back(ex.y);
      E.col(i) = ex.eps.values();
    }
    for (const auto& x : noisy) xs.push_back(&x);
    const Eigen::MatrixXd U = assemble_inputs(xs, ts, ys);
    const Pass p = run(U, ts);
    const Eigen::MatrixXd R = p.eps - E;

    LossAndGrad out;
    out.loss = R.squaredNorm() / (D * static_cast<double>(B));
    const Eigen::MatrixXd dEps = (2.0 / (D * static_cast<double>(B))) * R;
    out.grad.skip = Vector::Constant(1, (dEps.array() * p.scaled_input.array()).sum());
    const Eigen::MatrixXd dG = dEps * p.g_gain.asDiagonal();
    out.grad.W3 = dG * p.H2.transpose();
    out.grad.b3 = dG.rowwise().sum();
    const Eigen::MatrixXd dZ2 = ((params_.W3.transpose() * dG).array() * (1.0 - p.H2.array().square())).matrix();
    out.grad.W2 = dZ2 * p.H1.transpose();
    out.grad.b2 = dZ2.rowwise().sum();
    const Eigen::MatrixXd dZ1 = ((params_.W2.transpose() * dZ2).array() * (1.0 - p.H1.array().square())).matrix();
    out.grad.W1 = dZ1 * U.transpose();
    out.grad.b1 = dZ1.rowwise().sum();
    return out;
  }

 private:
  struct Pass {
    Eigen::MatrixXd H1;
    Eigen::MatrixXd H2;
    Eigen::MatrixXd scaled_input;  // x_t / sqrt(1 - abar_t)
    Vector g_gain;                 // -sqrt(abar_t) / sqrt(1 - abar_t) per column
    Eigen::MatrixXd eps;
  };

  Pass run(const Eigen::MatrixXd& U, const std::vector<int>& ts) const {
    const auto B = U.cols();
    const auto D = static_cast<Eigen::Index>(arch_.data_dim());
    Pass p;
    p.H1 = ((params_.W1 * U).colwise() + params_.b1).array().tanh();
    p.H2 = ((params_.W2 * p.H1).colwise() + params_.b2).array().tanh();
    const Eigen::MatrixXd G = (params_.W3 * p.H2).colwise() + params_.b3;
    p.scaled_input.resize(D, B);
    p.g_gain.resize(B);
    for (Eigen::Index i = 0; i < B; ++i) {
      const double a = alphabar_[static_cast<std::size_t>(ts[static_cast<std::size_t>(i)])];
      const double inv = 1.0 / std::sqrt(1.0 - a);
      p.scaled_input.col(i) = inv * U.col(i).head(D);
      p.g_gain[i] = -std::sqrt(a) * inv;
    }
    p.eps = params_.skip[0] * p.scaled_input + G * p.g_gain.asDiagonal();
    return p;
  }

  MlpArch arch_;
  MlpParams params_;
  std::vector<double> alphabar_;
};

struct TrainConfig {
  long steps = 4000;
  std::size_t batch = 64;
  double learning_rate = 0.2;
  double momentum = 0.9;
  std::uint64_t seed = 1;
  /// Training steps t are drawn with probability proportional to
  /// (1 - abar_t)^power; 0 gives uniform draws.
  double step_weight_power = 1.5;
};

inline std::vector<double> noise_level_weights(const std::vector<double>& alphabar, double power) {
  std::vector<double> w;
  for (std::size_t t = 1; t < alphabar.size(); ++t) w.push_back(std::pow(1.0 - alphabar[t], power));
  return w;
}

struct TrainingItem {
  State x0;
  Condition y;
};

/// Momentum SGD on the epsilon-prediction loss. Returns the per-step loss.
inline std::vector<double> train(MlpDenoiser& m, const std::vector<TrainingItem>& data, const TrainConfig& cfg,
                                 const std::function<void(long, double)>& on_step = {}) {
  if (data.empty()) throw InvalidArgument("train: empty dataset");
  if (!(cfg.learning_rate >= 0.0)) throw InvalidArgument("train: learning rate must be non-negative");
  if (cfg.batch == 0) throw InvalidArgument("train: batch must be positive");
  Rng rng = make_rng(cfg.seed, 0x7a1);
  std::uniform_int_distribution<std::size_t> pick(0, data.size() - 1);
  const std::vector<double> weights = noise_level_weights(m.alphabars(), cfg.step_weight_power);
  std::discrete_distribution<int> pick_t(weights.begin(), weights.end());

  MlpParams velocity = MlpParams::zeros(m.arch());
  std::vector<double> losses;
  losses.reserve(static_cast<std::size_t>(cfg.steps));
  std::vector<TrainingExample> batch(cfg.batch);
  for (long step = 0; step < cfg.steps; ++step) {
    for (auto& ex : batch) {
      const auto& item = data[pick(rng)];
      ex.x0 = item.x0;
      ex.y = item.y;
      ex.t = pick_t(rng) + 1;
      ex.eps = standard_normal(item.x0.shape(), rng);
    }
    LossAndGrad lg = m.loss_and_grad(batch);
    if (!std::isfinite(lg.loss)) throw TrainingDiverged(step);
    losses.push_back(lg.loss);
    if (cfg.learning_rate > 0.0) {
      MlpParams& p = m.params();
      auto update = [&](Eigen::MatrixXd& W, Eigen::MatrixXd& V, const Eigen::MatrixXd& G) {
        V = cfg.momentum * V - cfg.learning_rate * G;
        W += V;
      };
      auto update_v = [&](Vector& W, Vector& V, const Vector& G) {
        V = cfg.momentum * V - cfg.learning_rate * G;
        W += V;
      };
      update(p.W1, velocity.W1, lg.grad.W1);
      update_v(p.b1, velocity.b1, lg.grad.b1);
      update(p.W2, velocity.W2, lg.grad.W2);
      update_v(p.b2, velocity.b2, lg.grad.b2);
      update(p.W3, velocity.W3, lg.grad.W3);
      update_v(p.b3, velocity.b3, lg.grad.b3);
      update_v(p.skip, velocity.skip, lg.grad.skip);
      if (!p.all_finite()) throw TrainingDiverged(step);
    }
    if (on_step) on_step(step, lg.loss);
  }
  return losses;
}

/// Moving average over a trailing window.
inline std::vector<double> smooth(const std::vector<double>& xs, std::size_t window) {
  std::vector<double> out;
  double acc = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    acc += xs[i];
    if (i >= window) acc -= xs[i - window];
    out.push_back(acc / static_cast<double>(std::min(i + 1, window)));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints: "PIEMLP1", u32 rows, cols, hidden1, hidden2, time_features,
// num_classes, T (little endian), then f64 W1, b1, W2, b2, W3, b3, skip,
// then the T + 1 schedule values.

inline constexpr char kCheckpointMagic[] = "PIEMLP1";

namespace detail {
inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}
inline void put_f64(std::string& out, double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, sizeof bits);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xffu));
}
inline std::uint64_t get_le(const std::string& in, std::size_t at, int bytes) {
  std::uint64_t v = 0;
  for (int i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[at + i])) << (8 * i);
  return v;
}
}  // namespace detail

inline std::string encode_checkpoint(const MlpDenoiser& m) {
  std::string out(kCheckpointMagic, 7);
  const MlpArch& a = m.arch();
  for (std::size_t v : {a.rows, a.cols, a.hidden1, a.hidden2, a.time_features, a.num_classes, a.T}) {
    detail::put_u32(out, static_cast<std::uint32_t>(v));
  }
  for (double w : m.params().flatten()) detail::put_f64(out, w);
  for (double v : m.alphabars()) detail::put_f64(out, v);
  return out;
}

inline MlpDenoiser decode_checkpoint(const std::string& bytes) {
  if (bytes.size() < 7 + 7 * 4 || bytes.compare(0, 7, kCheckpointMagic) != 0) {
    throw InvalidArgument("checkpoint: missing PIEMLP1 header");
  }
  std::size_t at = 7;
  auto u32 = [&] {
    const auto v = static_cast<std::size_t>(detail::get_le(bytes, at, 4));
    at += 4;
    return v;
  };
  MlpArch a;
  a.rows = u32();
  a.cols = u32();
  a.hidden1 = u32();
  a.hidden2 = u32();
  a.time_features = u32();
  a.num_classes = u32();
  a.T = u32();
  const std::size_t count = MlpParams::zeros(a).count();
  const std::size_t expected = at + 8 * (count + a.T + 1);
  if (bytes.size() != expected) {
    throw InvalidArgument("checkpoint: expected " + std::to_string(expected) + " bytes, got " +
                          std::to_string(bytes.size()));
  }
  auto f64 = [&] {
    const std::uint64_t bits = detail::get_le(bytes, at, 8);
    at += 8;
    double v;
    std::memcpy(&v, &bits, sizeof v);
    return v;
  };
  std::vector<double> flat(count);
  for (auto& w : flat) w = f64();
  std::vector<double> alphabar(a.T + 1);
  for (auto& v : alphabar) v = f64();
  MlpDenoiser m(a, NoiseSchedule::from_alphabars(std::move(alphabar)));
  m.params().assign(flat);
  return m;
}

inline void save_checkpoint(const std::filesystem::path& path, const MlpDenoiser& m) {
  const std::string bytes = encode_checkpoint(m);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("save_checkpoint: cannot open " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

inline MlpDenoiser load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("load_checkpoint: cannot open " + path.string());
  return decode_checkpoint(std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>()));
}

}  // namespace pie
