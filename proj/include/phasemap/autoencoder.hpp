#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "phasemap/errors.hpp"
#include "phasemap/rng.hpp"

namespace phasemap {

enum class Activation : std::uint32_t { softplus = 0, tanh = 1 };

struct TrainConfig {
  double learning_rate = 1e-3;  ///< ADAM alpha
  int epochs = 0;               ///< 0 = derive from example_budget
  /// total examples processed when epochs == 0: epochs = budget / n_examples
  int example_budget = 20000;
  int batch_size = 64;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 0;
};

inline int resolve_epochs(const TrainConfig& cfg, std::size_t n_examples) {
  if (cfg.epochs > 0) return cfg.epochs;
  if (n_examples == 0) throw ArgumentError("empty training set");
  return std::max<int>(1, cfg.example_budget / static_cast<int>(n_examples));
}

/// Fully connected autoencoder with mirrored encoder/decoder layer sizes,
/// a smooth rectifier on hidden layers and an identity output layer.
class MlpAutoencoder {
 public:
  MlpAutoencoder() = default;

  /// layer_dims runs input -> ... -> latent -> ... -> output and must be a
  /// palindrome so the decoder mirrors the encoder.
  MlpAutoencoder(std::vector<int> layer_dims, Activation act, std::uint64_t seed)
      : layer_dims_(std::move(layer_dims)), activation_(act), init_seed_(seed) {
    if (layer_dims_.size() < 2) throw ArgumentError("need at least input and output layers");
    for (std::size_t i = 0; i < layer_dims_.size(); ++i) {
      if (layer_dims_[i] < 1) throw ArgumentError("layer dims must be positive");
      if (layer_dims_[layer_dims_.size() - 1 - i] != layer_dims_[i])
        throw ArgumentError("encoder and decoder dims must mirror each other");
    }
    Rng rng(seed);
    const std::size_t n_layers = layer_dims_.size() - 1;
    weights_.resize(n_layers);
    biases_.resize(n_layers);
    for (std::size_t l = 0; l < n_layers; ++l) {
      const int fan_in = layer_dims_[l];
      const int fan_out = layer_dims_[l + 1];
      const double scale = 1.0 / std::sqrt(static_cast<double>(fan_in));
      weights_[l].resize(fan_out, fan_in);
      for (Eigen::Index r = 0; r < weights_[l].rows(); ++r)
        for (Eigen::Index c = 0; c < weights_[l].cols(); ++c)
          weights_[l](r, c) = scale * rng.uniform_pm1();
      biases_[l] = Eigen::VectorXd::Zero(fan_out);
    }
  }

  /// Default architecture for a given feature length: n -> 16 -> 4 -> 16 -> n.
  static MlpAutoencoder make_default(int input_dim, std::uint64_t seed) {
    return MlpAutoencoder({input_dim, 16, 4, 16, input_dim}, Activation::softplus, seed);
  }

  int input_dim() const { return layer_dims_.front(); }
  const std::vector<int>& layer_dims() const { return layer_dims_; }
  Activation activation() const { return activation_; }
  std::uint64_t init_seed() const { return init_seed_; }
  std::size_t n_layers() const { return weights_.size(); }
  std::vector<Eigen::MatrixXd>& weights() { return weights_; }
  std::vector<Eigen::VectorXd>& biases() { return biases_; }
  const std::vector<Eigen::MatrixXd>& weights() const { return weights_; }
  const std::vector<Eigen::VectorXd>& biases() const { return biases_; }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (std::size_t l = 0; l < weights_.size(); ++l)
      n += static_cast<std::size_t>(weights_[l].size() + biases_[l].size());
    return n;
  }

 private:
  std::vector<int> layer_dims_;
  Activation activation_ = Activation::softplus;
  std::uint64_t init_seed_ = 0;
  std::vector<Eigen::MatrixXd> weights_;
  std::vector<Eigen::VectorXd> biases_;
};

namespace detail {

inline double act_value(Activation a, double z) {
  switch (a) {
    case Activation::softplus:
      // overflow-safe log(1 + exp(z))
      return z > 30.0 ? z : std::log1p(std::exp(z));
    case Activation::tanh:
      return std::tanh(z);
  }
  throw ArgumentError("unknown activation");
}

inline double act_derivative(Activation a, double z) {
  switch (a) {
    case Activation::softplus:
      return 1.0 / (1.0 + std::exp(-z));
    case Activation::tanh: {
      const double t = std::tanh(z);
      return 1.0 - t * t;
    }
  }
  throw ArgumentError("unknown activation");
}

}  // namespace detail

/// Deterministic forward pass; hidden layers use the nonlinearity, the output
/// layer is affine.
inline std::vector<double> forward(const MlpAutoencoder& model, const std::vector<double>& x) {
  if (static_cast<int>(x.size()) != model.input_dim())
    throw ArgumentError("input length does not match model input dim");
  Eigen::VectorXd h = Eigen::Map<const Eigen::VectorXd>(x.data(), static_cast<Eigen::Index>(x.size()));
  const std::size_t L = model.n_layers();
  for (std::size_t l = 0; l < L; ++l) {
    Eigen::VectorXd z = model.weights()[l] * h + model.biases()[l];
    if (l + 1 < L)
      for (Eigen::Index i = 0; i < z.size(); ++i) z[i] = detail::act_value(model.activation(), z[i]);
    h = std::move(z);
  }
  return std::vector<double>(h.data(), h.data() + h.size());
}

/// L = sum_i ||x_i - y(x_i)||^2 over the batch.
inline double loss(const MlpAutoencoder& model, const std::vector<std::vector<double>>& batch) {
  if (batch.empty()) throw ArgumentError("empty batch");
  double total = 0.0;
  for (const auto& x : batch) {
    const std::vector<double> y = forward(model, x);
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double d = x[i] - y[i];
      total += d * d;
    }
  }
  return total;
}

/// Squared reconstruction error of a single sample: the anomaly score.
inline double score(const MlpAutoencoder& model, const std::vector<double>& x) {
  const std::vector<double> y = forward(model, x);
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double d = x[i] - y[i];
    s += d * d;
  }
  return s;
}

struct Gradient {
  std::vector<Eigen::MatrixXd> dw;
  std::vector<Eigen::VectorXd> db;
};

/// Exact gradient of the batch loss by reverse-mode accumulation.
inline Gradient gradient(const MlpAutoencoder& model, const std::vector<std::vector<double>>& batch) {
  if (batch.empty()) throw ArgumentError("empty batch");
  const std::size_t L = model.n_layers();
  Gradient g;
  g.dw.resize(L);
  g.db.resize(L);
  for (std::size_t l = 0; l < L; ++l) {
    g.dw[l] = Eigen::MatrixXd::Zero(model.weights()[l].rows(), model.weights()[l].cols());
    g.db[l] = Eigen::VectorXd::Zero(model.biases()[l].size());
  }

  std::vector<Eigen::VectorXd> pre(L);   // pre-activations z_l
  std::vector<Eigen::VectorXd> post(L + 1);  // activations, post[0] = input
  for (const auto& x : batch) {
    if (static_cast<int>(x.size()) != model.input_dim())
      throw ArgumentError("batch element has wrong length");
    post[0] = Eigen::Map<const Eigen::VectorXd>(x.data(), static_cast<Eigen::Index>(x.size()));
    for (std::size_t l = 0; l < L; ++l) {
      pre[l] = model.weights()[l] * post[l] + model.biases()[l];
      post[l + 1] = pre[l];
      if (l + 1 < L)
        for (Eigen::Index i = 0; i < post[l + 1].size(); ++i)
          post[l + 1][i] = detail::act_value(model.activation(), pre[l][i]);
    }

    // d L / d y = 2 (y - x)
    Eigen::VectorXd delta = 2.0 * (post[L] - post[0]);
    for (std::size_t l = L; l-- > 0;) {
      if (l + 1 < L)  // walk back through the nonlinearity
        for (Eigen::Index i = 0; i < delta.size(); ++i)
          delta[i] *= detail::act_derivative(model.activation(), pre[l][i]);
      g.dw[l].noalias() += delta * post[l].transpose();
      g.db[l] += delta;
      if (l > 0) delta = model.weights()[l].transpose() * delta;
    }
  }
  return g;
}

struct TrainResult {
  MlpAutoencoder model;
  std::vector<double> loss_history;  ///< full-set loss per epoch
  int epochs = 0;
};

/// ADAM over shuffled mini-batches; the last partial batch is kept.
/// Deterministic for a fixed (model seed, config seed, data) triple.
inline TrainResult train(MlpAutoencoder model, const std::vector<std::vector<double>>& data,
                         const TrainConfig& cfg) {
  if (data.empty()) throw ArgumentError("empty training set");
  const int epochs = resolve_epochs(cfg, data.size());
  const std::size_t L = model.n_layers();

  std::vector<Eigen::MatrixXd> mw(L), vw(L);
  std::vector<Eigen::VectorXd> mb(L), vb(L);
  for (std::size_t l = 0; l < L; ++l) {
    mw[l] = Eigen::MatrixXd::Zero(model.weights()[l].rows(), model.weights()[l].cols());
    vw[l] = mw[l];
    mb[l] = Eigen::VectorXd::Zero(model.biases()[l].size());
    vb[l] = mb[l];
  }

  Rng rng(cfg.seed);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);

  TrainResult result;
  result.loss_history.reserve(static_cast<std::size_t>(epochs));
  const std::size_t batch_size = std::max<std::size_t>(
      1, std::min<std::size_t>(static_cast<std::size_t>(cfg.batch_size), data.size()));

  long step = 0;
  for (int epoch = 0; epoch < epochs; ++epoch) {
    // seeded Fisher-Yates
    for (std::size_t i = order.size(); i > 1; --i) {
      const std::size_t j = rng.next_u64() % i;
      std::swap(order[i - 1], order[j]);
    }
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < order.size(); start += batch_size) {
      const std::size_t end = std::min(order.size(), start + batch_size);
      std::vector<std::vector<double>> batch;
      batch.reserve(end - start);
      for (std::size_t i = start; i < end; ++i) batch.push_back(data[order[i]]);

      Gradient g = gradient(model, batch);
      ++step;
      const double b1 = cfg.adam_beta1, b2 = cfg.adam_beta2;
      const double corr1 = 1.0 - std::pow(b1, static_cast<double>(step));
      const double corr2 = 1.0 - std::pow(b2, static_cast<double>(step));
      for (std::size_t l = 0; l < L; ++l) {
        mw[l] = b1 * mw[l] + (1.0 - b1) * g.dw[l];
        vw[l] = b2 * vw[l].array().matrix() +
                (1.0 - b2) * Eigen::MatrixXd(g.dw[l].array().square());
        mb[l] = b1 * mb[l] + (1.0 - b1) * g.db[l];
        vb[l] = b2 * vb[l].array().matrix() +
                (1.0 - b2) * Eigen::VectorXd(g.db[l].array().square());
        model.weights()[l].array() -=
            cfg.learning_rate * (mw[l].array() / corr1) /
            ((vw[l].array() / corr2).sqrt() + cfg.adam_eps);
        model.biases()[l].array() -=
            cfg.learning_rate * (mb[l].array() / corr1) /
            ((vb[l].array() / corr2).sqrt() + cfg.adam_eps);
      }
      epoch_loss += loss(model, batch);
    }
    if (!std::isfinite(epoch_loss))
      throw TrainingError("training diverged at epoch " + std::to_string(epoch), epoch);
    result.loss_history.push_back(epoch_loss);
  }
  result.model = std::move(model);
  result.epochs = epochs;
  return result;
}

// ---------------------------------------------------------------------------
// portable little-endian model files
// ---------------------------------------------------------------------------

namespace detail {

inline void write_u32le(std::ostream& os, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xFF);
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline void write_u64le(std::ostream& os, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xFF);
  os.write(reinterpret_cast<const char*>(b), 8);
}

inline void write_f64le(std::ostream& os, double d) { write_u64le(os, double_bits(d)); }

inline std::uint32_t read_u32le(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  std::uint32_t v = 0;
  for (int i = 3; i >= 0; --i) v = (v << 8) | b[i];
  return v;
}

inline std::uint64_t read_u64le(std::istream& is) {
  unsigned char b[8];
  is.read(reinterpret_cast<char*>(b), 8);
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | b[i];
  return v;
}

inline double read_f64le(std::istream& is) {
  union {
    std::uint64_t u;
    double d;
  } conv;
  conv.u = read_u64le(is);
  return conv.d;
}

}  // namespace detail

inline constexpr std::uint32_t kModelMagic = 0x504D4145;  // "PMAE"
inline constexpr std::uint32_t kModelFormatVersion = 1;

inline void save_model(const MlpAutoencoder& model, const std::string& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open model file for writing: " + path);
  detail::write_u32le(os, kModelMagic);
  detail::write_u32le(os, kModelFormatVersion);
  detail::write_u32le(os, static_cast<std::uint32_t>(model.activation()));
  detail::write_u64le(os, model.init_seed());
  detail::write_u32le(os, static_cast<std::uint32_t>(model.layer_dims().size()));
  for (int d : model.layer_dims()) detail::write_u32le(os, static_cast<std::uint32_t>(d));
  for (std::size_t l = 0; l < model.n_layers(); ++l) {
    const auto& w = model.weights()[l];
    for (Eigen::Index r = 0; r < w.rows(); ++r)
      for (Eigen::Index c = 0; c < w.cols(); ++c) detail::write_f64le(os, w(r, c));
    const auto& b = model.biases()[l];
    for (Eigen::Index i = 0; i < b.size(); ++i) detail::write_f64le(os, b[i]);
  }
  if (!os) throw IoError("write failed: " + path);
}

inline MlpAutoencoder load_model(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open model file: " + path);
  if (detail::read_u32le(is) != kModelMagic) throw IoError("not a model file: " + path);
  const std::uint32_t version = detail::read_u32le(is);
  if (version != kModelFormatVersion)
    throw IoError("unsupported model format version " + std::to_string(version));
  const auto act = static_cast<Activation>(detail::read_u32le(is));
  const std::uint64_t seed = detail::read_u64le(is);
  const std::uint32_t n_dims = detail::read_u32le(is);
  std::vector<int> dims(n_dims);
  for (auto& d : dims) d = static_cast<int>(detail::read_u32le(is));
  MlpAutoencoder model(dims, act, seed);
  for (std::size_t l = 0; l < model.n_layers(); ++l) {
    auto& w = model.weights()[l];
    for (Eigen::Index r = 0; r < w.rows(); ++r)
      for (Eigen::Index c = 0; c < w.cols(); ++c) w(r, c) = detail::read_f64le(is);
    auto& b = model.biases()[l];
    for (Eigen::Index i = 0; i < b.size(); ++i) b[i] = detail::read_f64le(is);
  }
  if (!is) throw IoError("truncated model file: " + path);
  return model;
}

}  // namespace phasemap
