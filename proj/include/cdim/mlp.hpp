#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <sstream>
#include <vector>

#include "cdim/core.hpp"
#include "cdim/schedule.hpp"
#include "cdim/score.hpp"

namespace cdim {

struct MlpShape {
  std::size_t n = 0;           // signal dimension (input and output)
  std::size_t time_dim = 16;   // sinusoidal time features (even)
  std::size_t hidden1 = 64;
  std::size_t hidden2 = 64;

  std::size_t input_dim() const { return n + time_dim; }
  std::size_t param_count() const {
    return hidden1 * input_dim() + hidden1 + hidden2 * hidden1 + hidden2 + n * hidden2 + n;
  }
};

struct TrainingError : NumericError {
  using NumericError::NumericError;
};

/// eps-prediction network: [x_t, sin/cos time features] -> SiLU -> SiLU -> eps.
/// Parameters live in one flat vector (W1, b1, W2, b2, W3, b3, row-major).
class MlpDenoiser final : public ScoreModel {
 public:
  MlpDenoiser(MlpShape shape, Vec params) : shape_(shape), params_(std::move(params)) {
    require(shape_.n >= 1 && shape_.hidden1 >= 1 && shape_.hidden2 >= 1, "MlpDenoiser: widths must be >= 1");
    require(shape_.time_dim % 2 == 0, "MlpDenoiser: time_dim must be even");
    require(params_.size() == shape_.param_count(), "MlpDenoiser: parameter count mismatch");
    require(all_finite(params_), "MlpDenoiser: non-finite parameters");
  }

  /// Glorot-uniform weights, zero biases; the output layer is scaled down so
  /// the untrained network predicts eps ≈ 0.
  static MlpDenoiser initialise(MlpShape shape, std::uint64_t seed) {
    Rng rng(seed, 0x3141);
    Vec p(shape.param_count(), 0.0);
    std::size_t off = 0;
    auto fill = [&](std::size_t rows, std::size_t cols, double gain) {
      const double lim = gain * std::sqrt(6.0 / static_cast<double>(rows + cols));
      for (std::size_t i = 0; i < rows * cols; ++i) p[off + i] = rng.uniform(-lim, lim);
      off += rows * cols + rows;  // skip bias (zeros)
    };
    fill(shape.hidden1, shape.input_dim(), 1.0);
    fill(shape.hidden2, shape.hidden1, 1.0);
    fill(shape.n, shape.hidden2, 0.1);
    return MlpDenoiser(shape, std::move(p));
  }

  const MlpShape& shape() const { return shape_; }
  const Vec& params() const { return params_; }
  std::size_t dim() const override { return shape_.n; }

  Vec predict_eps(ConstSpan x_t, Timestep ts) const override {
    Cache c;
    forward(x_t, ts.t, c);
    return c.out;
  }

  /// x̂₀ = (x - b·eps(x))/a  ⇒  Jᵀc = (c - b·(∂eps/∂x)ᵀ c)/a.
  Vec xhat0_vjp(ConstSpan x_t, Timestep ts, ConstSpan cot) const override {
    if (!all_finite(x_t) || !all_finite(cot)) throw NumericError("MlpDenoiser::xhat0_vjp: non-finite input");
    if (!(ts.alpha_bar > 0.0)) throw NumericError("MlpDenoiser::xhat0_vjp: alpha_bar must be > 0");
    const double a = std::sqrt(ts.alpha_bar);
    const double b = std::sqrt(1.0 - ts.alpha_bar);
    Vec out(cot.begin(), cot.end());
    if (b != 0.0) {
      Cache c;
      forward(x_t, ts.t, c);
      Vec gin = backward(c, cot, nullptr);
      for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b * gin[i];
    }
    for (double& v : out) v /= a;
    return out;
  }

  /// Adds (∂eps/∂θ)ᵀ·out_grad into grad (same layout as params).
  void accumulate_param_grad(ConstSpan x_t, int t, ConstSpan out_grad, Vec& grad) const {
    Cache c;
    forward(x_t, t, c);
    backward(c, out_grad, &grad);
  }

  static Vec time_features(int t, std::size_t dim) {
    Vec f(dim);
    const std::size_t half = dim / 2;
    for (std::size_t j = 0; j < half; ++j) {
      const double freq = std::exp(-std::log(10000.0) * static_cast<double>(j) / static_cast<double>(half));
      f[j] = std::sin(t * freq);
      f[half + j] = std::cos(t * freq);
    }
    return f;
  }

 private:
  struct Cache {
    Vec u, z1, a1, z2, a2, out;
  };

  static double silu(double z) { return z / (1.0 + std::exp(-z)); }
  static double silu_grad(double z) {
    const double s = 1.0 / (1.0 + std::exp(-z));
    return s * (1.0 + z * (1.0 - s));
  }

  // Offsets into the flat parameter vector.
  std::size_t w1() const { return 0; }
  std::size_t b1() const { return w1() + shape_.hidden1 * shape_.input_dim(); }
  std::size_t w2() const { return b1() + shape_.hidden1; }
  std::size_t b2() const { return w2() + shape_.hidden2 * shape_.hidden1; }
  std::size_t w3() const { return b2() + shape_.hidden2; }
  std::size_t b3() const { return w3() + shape_.n * shape_.hidden2; }

  void dense(std::size_t w, std::size_t b, std::size_t rows, ConstSpan in, Vec& out) const {
    const std::size_t cols = in.size();
    out.assign(rows, 0.0);
    for (std::size_t r = 0; r < rows; ++r) {
      double s = params_[b + r];
      const double* row = &params_[w + r * cols];
      for (std::size_t c = 0; c < cols; ++c) s += row[c] * in[c];
      out[r] = s;
    }
  }

  void forward(ConstSpan x, int t, Cache& c) const {
    require(x.size() == shape_.n, "MlpDenoiser: input dimension mismatch");
    c.u.assign(x.begin(), x.end());
    const Vec tf = time_features(t, shape_.time_dim);
    c.u.insert(c.u.end(), tf.begin(), tf.end());
    dense(w1(), b1(), shape_.hidden1, c.u, c.z1);
    c.a1.resize(c.z1.size());
    std::transform(c.z1.begin(), c.z1.end(), c.a1.begin(), silu);
    dense(w2(), b2(), shape_.hidden2, c.a1, c.z2);
    c.a2.resize(c.z2.size());
    std::transform(c.z2.begin(), c.z2.end(), c.a2.begin(), silu);
    dense(w3(), b3(), shape_.n, c.a2, c.out);
  }

  // Reverse pass for output cotangent g. Returns the gradient w.r.t. x; adds
  // parameter gradients into *pgrad when provided.
  Vec backward(const Cache& c, ConstSpan g, Vec* pgrad) const {
    const std::size_t n = shape_.n, h1 = shape_.hidden1, h2 = shape_.hidden2, in = shape_.input_dim();
    Vec ga2(h2, 0.0);
    for (std::size_t r = 0; r < n; ++r) {
      const double* row = &params_[w3() + r * h2];
      for (std::size_t j = 0; j < h2; ++j) ga2[j] += row[j] * g[r];
      if (pgrad) {
        for (std::size_t j = 0; j < h2; ++j) (*pgrad)[w3() + r * h2 + j] += g[r] * c.a2[j];
        (*pgrad)[b3() + r] += g[r];
      }
    }
    Vec gz2(h2);
    for (std::size_t j = 0; j < h2; ++j) gz2[j] = ga2[j] * silu_grad(c.z2[j]);
    Vec ga1(h1, 0.0);
    for (std::size_t r = 0; r < h2; ++r) {
      const double* row = &params_[w2() + r * h1];
      for (std::size_t j = 0; j < h1; ++j) ga1[j] += row[j] * gz2[r];
      if (pgrad) {
        for (std::size_t j = 0; j < h1; ++j) (*pgrad)[w2() + r * h1 + j] += gz2[r] * c.a1[j];
        (*pgrad)[b2() + r] += gz2[r];
      }
    }
    Vec gz1(h1);
    for (std::size_t j = 0; j < h1; ++j) gz1[j] = ga1[j] * silu_grad(c.z1[j]);
    Vec gx(n, 0.0);
    for (std::size_t r = 0; r < h1; ++r) {
      const double* row = &params_[w1() + r * in];
      for (std::size_t j = 0; j < n; ++j) gx[j] += row[j] * gz1[r];
      if (pgrad) {
        for (std::size_t j = 0; j < in; ++j) (*pgrad)[w1() + r * in + j] += gz1[r] * c.u[j];
        (*pgrad)[b1() + r] += gz1[r];
      }
    }
    return gx;
  }

  MlpShape shape_;
  Vec params_;
};

struct TrainingConfig {
  std::size_t time_dim = 16;
  std::size_t hidden1 = 64;
  std::size_t hidden2 = 64;
  int epochs = 40;
  std::size_t batch_size = 128;
  double learning_rate = 2e-3;
  double lr_decay = 0.97;       // multiplicative, per epoch
  long max_steps = -1;          // optimiser steps cap; -1 = unlimited
};

struct TrainingResult {
  MlpDenoiser model;
  std::vector<double> epoch_loss;  // mean ‖eps − eps_θ‖² per sample
  long steps = 0;
};

/// Minimises E‖eps − eps_θ(√ᾱ x₀ + √(1−ᾱ) eps, t)‖² with Adam over minibatches,
/// t ~ U{1..T}.
inline TrainingResult train_mlp_denoiser(const std::vector<Vec>& data, const NoiseSchedule& schedule,
                                         const TrainingConfig& cfg, std::uint64_t seed) {
  require(!data.empty(), "train_mlp_denoiser: empty dataset");
  require(cfg.batch_size >= 1 && cfg.epochs >= 0 && cfg.learning_rate > 0.0, "train_mlp_denoiser: bad config");
  const std::size_t n = data.front().size();
  for (const auto& x : data) require(x.size() == n && all_finite(x), "train_mlp_denoiser: ragged or non-finite data");

  MlpShape shape{n, cfg.time_dim, cfg.hidden1, cfg.hidden2};
  MlpDenoiser model = MlpDenoiser::initialise(shape, seed);
  Vec params = model.params();
  Vec m(params.size(), 0.0), v(params.size(), 0.0);
  constexpr double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;

  Rng rng(seed, 0x7a1);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);

  TrainingResult res{model, {}, 0};
  double lr = cfg.learning_rate;
  Vec grad(params.size());
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    if (cfg.max_steps >= 0 && res.steps >= cfg.max_steps) break;
    std::shuffle(order.begin(), order.end(), rng.engine());
    double loss_sum = 0.0;
    std::size_t seen = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      if (cfg.max_steps >= 0 && res.steps >= cfg.max_steps) break;
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      const double inv_b = 1.0 / static_cast<double>(end - start);
      std::fill(grad.begin(), grad.end(), 0.0);
      for (std::size_t bi = start; bi < end; ++bi) {
        const Vec& x0 = data[order[bi]];
        const int t = 1 + static_cast<int>(rng.next_u64() % static_cast<std::uint64_t>(schedule.T()));
        const double ab = schedule.alpha_bar(t);
        const Vec eps = rng.normal_vec(n);
        Vec xt(n);
        for (std::size_t i = 0; i < n; ++i) xt[i] = std::sqrt(ab) * x0[i] + std::sqrt(1.0 - ab) * eps[i];
        const Vec pred = model.predict_eps(xt, {t, ab});
        Vec g(n);
        double l = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
          const double diff = pred[i] - eps[i];
          l += diff * diff;
          g[i] = 2.0 * diff * inv_b;
        }
        loss_sum += l;
        model.accumulate_param_grad(xt, t, g, grad);
      }
      seen += end - start;
      ++res.steps;
      if (!all_finite(grad) || !std::isfinite(loss_sum)) {
        std::ostringstream os;
        os << "train_mlp_denoiser: divergent loss at epoch " << epoch << ", step " << res.steps
           << " (lr=" << lr << ", running loss=" << loss_sum << ")";
        throw TrainingError(os.str());
      }
      const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(res.steps));
      const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(res.steps));
      for (std::size_t i = 0; i < params.size(); ++i) {
        m[i] = beta1 * m[i] + (1.0 - beta1) * grad[i];
        v[i] = beta2 * v[i] + (1.0 - beta2) * grad[i] * grad[i];
        params[i] -= lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + adam_eps);
      }
      if (!all_finite(params)) {
        std::ostringstream os;
        os << "train_mlp_denoiser: parameters became non-finite at epoch " << epoch << ", step " << res.steps
           << " (lr=" << lr << ", running loss=" << loss_sum << ")";
        throw TrainingError(os.str());
      }
      model = MlpDenoiser(shape, params);
    }
    if (seen > 0) res.epoch_loss.push_back(loss_sum / static_cast<double>(seen));
    lr *= cfg.lr_decay;
  }
  res.model = std::move(model);
  return res;
}

}  // namespace cdim
