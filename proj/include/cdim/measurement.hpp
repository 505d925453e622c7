#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <memory>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "cdim/core.hpp"

namespace cdim {

struct DomainError : Error {
  using Error::Error;
};

/// Matrix-free linear map A: R^n -> R^d with its exact transpose.
/// Cheap to copy; the implementation is shared and immutable.
class LinearOperator {
 public:
  struct Impl {
    virtual ~Impl() = default;
    virtual void apply(ConstSpan x, std::span<double> y) const = 0;
    virtual void adjoint(ConstSpan y, std::span<double> x) const = 0;
    std::size_t n = 0;
    std::size_t d = 0;
    std::string name;
  };

  explicit LinearOperator(std::shared_ptr<const Impl> impl) : impl_(std::move(impl)) {}

  std::size_t n() const { return impl_->n; }
  std::size_t d() const { return impl_->d; }
  /// Short description, e.g. "mask(n=16,d=8)"; used in profile fingerprints.
  const std::string& name() const { return impl_->name; }

  Vec apply(ConstSpan x) const {
    require(x.size() == n(), "LinearOperator::apply: expected input of size " + std::to_string(n()));
    Vec y(d(), 0.0);
    impl_->apply(x, y);
    return y;
  }

  Vec adjoint(ConstSpan y) const {
    require(y.size() == d(), "LinearOperator::adjoint: expected input of size " + std::to_string(d()));
    Vec x(n(), 0.0);
    impl_->adjoint(y, x);
    return x;
  }

 private:
  std::shared_ptr<const Impl> impl_;
};

namespace detail {

struct IdentityImpl final : LinearOperator::Impl {
  void apply(ConstSpan x, std::span<double> y) const override { std::copy(x.begin(), x.end(), y.begin()); }
  void adjoint(ConstSpan y, std::span<double> x) const override { std::copy(y.begin(), y.end(), x.begin()); }
};

struct MaskImpl final : LinearOperator::Impl {
  std::vector<std::size_t> kept;
  void apply(ConstSpan x, std::span<double> y) const override {
    for (std::size_t j = 0; j < kept.size(); ++j) y[j] = x[kept[j]];
  }
  void adjoint(ConstSpan y, std::span<double> x) const override {
    std::fill(x.begin(), x.end(), 0.0);
    for (std::size_t j = 0; j < kept.size(); ++j) x[kept[j]] = y[j];
  }
};

struct DownsampleImpl final : LinearOperator::Impl {
  std::size_t factor = 1;
  void apply(ConstSpan x, std::span<double> y) const override {
    const double inv = 1.0 / static_cast<double>(factor);
    for (std::size_t j = 0; j < d; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < factor; ++k) s += x[j * factor + k];
      y[j] = s * inv;
    }
  }
  void adjoint(ConstSpan y, std::span<double> x) const override {
    const double inv = 1.0 / static_cast<double>(factor);
    for (std::size_t j = 0; j < d; ++j)
      for (std::size_t k = 0; k < factor; ++k) x[j * factor + k] = y[j] * inv;
  }
};

// (Ax)_i = Σ_j k_j x_{i+j-c}, zero outside [0,n).
struct BlurImpl final : LinearOperator::Impl {
  Vec kernel;
  void apply(ConstSpan x, std::span<double> y) const override {
    const auto c = static_cast<std::ptrdiff_t>(kernel.size() / 2);
    const auto nn = static_cast<std::ptrdiff_t>(n);
    for (std::ptrdiff_t i = 0; i < nn; ++i) {
      double s = 0.0;
      for (std::ptrdiff_t j = 0; j < static_cast<std::ptrdiff_t>(kernel.size()); ++j) {
        const std::ptrdiff_t src = i + j - c;
        if (src >= 0 && src < nn) s += kernel[j] * x[src];
      }
      y[i] = s;
    }
  }
  void adjoint(ConstSpan y, std::span<double> x) const override {
    const auto c = static_cast<std::ptrdiff_t>(kernel.size() / 2);
    const auto nn = static_cast<std::ptrdiff_t>(n);
    std::fill(x.begin(), x.end(), 0.0);
    for (std::ptrdiff_t i = 0; i < nn; ++i)
      for (std::ptrdiff_t j = 0; j < static_cast<std::ptrdiff_t>(kernel.size()); ++j) {
        const std::ptrdiff_t src = i + j - c;
        if (src >= 0 && src < nn) x[src] += kernel[j] * y[i];
      }
  }
};

struct MatrixImpl final : LinearOperator::Impl {
  Vec rows;  // d x n row-major
  void apply(ConstSpan x, std::span<double> y) const override {
    for (std::size_t i = 0; i < d; ++i) y[i] = dot(ConstSpan(&rows[i * n], n), x);
  }
  void adjoint(ConstSpan y, std::span<double> x) const override {
    std::fill(x.begin(), x.end(), 0.0);
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = 0; j < n; ++j) x[j] += rows[i * n + j] * y[i];
  }
};

struct ComposeImpl final : LinearOperator::Impl {
  LinearOperator outer, inner;
  ComposeImpl(LinearOperator o, LinearOperator i) : outer(std::move(o)), inner(std::move(i)) {}
  void apply(ConstSpan x, std::span<double> y) const override {
    const Vec mid = inner.apply(x);
    const Vec out = outer.apply(mid);
    std::copy(out.begin(), out.end(), y.begin());
  }
  void adjoint(ConstSpan y, std::span<double> x) const override {
    const Vec mid = outer.adjoint(y);
    const Vec out = inner.adjoint(mid);
    std::copy(out.begin(), out.end(), x.begin());
  }
};

inline std::string dims(std::size_t n, std::size_t d) {
  return "(n=" + std::to_string(n) + ",d=" + std::to_string(d) + ")";
}

}  // namespace detail

inline LinearOperator identity_operator(std::size_t n) {
  require(n >= 1, "identity_operator: n must be >= 1");
  auto impl = std::make_shared<detail::IdentityImpl>();
  impl->n = impl->d = n;
  impl->name = "identity" + detail::dims(n, n);
  return LinearOperator(std::move(impl));
}

/// Keeps the listed coordinates (in the given order).
inline LinearOperator mask_operator(std::size_t n, std::vector<std::size_t> kept) {
  require(!kept.empty(), "mask_operator: at least one index must be kept");
  std::vector<bool> seen(n, false);
  for (std::size_t i : kept) {
    require(i < n, "mask_operator: index " + std::to_string(i) + " out of range");
    require(!seen[i], "mask_operator: duplicate index " + std::to_string(i));
    seen[i] = true;
  }
  auto impl = std::make_shared<detail::MaskImpl>();
  impl->n = n;
  impl->d = kept.size();
  impl->kept = std::move(kept);
  impl->name = "mask" + detail::dims(impl->n, impl->d);
  return LinearOperator(std::move(impl));
}

/// Masks consecutive groups of `group_size` coordinates jointly, each group
/// dropped with probability `mask_prob`. If every group is dropped, one group
/// chosen uniformly is kept so the operator stays non-empty.
inline LinearOperator random_mask_operator(std::size_t n, double mask_prob, std::uint64_t seed,
                                           std::size_t group_size = 1) {
  require(mask_prob >= 0.0 && mask_prob <= 1.0, "random_mask_operator: mask_prob outside [0,1]");
  require(group_size >= 1 && n % group_size == 0, "random_mask_operator: group_size must divide n");
  Rng rng(seed, 0x3a5c);
  const std::size_t groups = n / group_size;
  std::vector<std::size_t> kept_groups;
  for (std::size_t g = 0; g < groups; ++g)
    if (rng.uniform() >= mask_prob) kept_groups.push_back(g);
  if (kept_groups.empty()) kept_groups.push_back(rng.next_u64() % groups);
  std::vector<std::size_t> kept;
  for (std::size_t g : kept_groups)
    for (std::size_t k = 0; k < group_size; ++k) kept.push_back(g * group_size + k);
  return mask_operator(n, std::move(kept));
}

/// 50% inpainting: the first half of the signal is hidden, the second half observed.
inline LinearOperator half_mask_operator(std::size_t n) {
  require(n >= 2, "half_mask_operator: n must be >= 2");
  std::vector<std::size_t> kept(n - n / 2);
  std::iota(kept.begin(), kept.end(), n / 2);
  return mask_operator(n, std::move(kept));
}

/// Hides the contiguous block [start, start+len).
inline LinearOperator box_mask_operator(std::size_t n, std::size_t start, std::size_t len) {
  require(start + len <= n && len < n, "box_mask_operator: box must fit and leave something observed");
  std::vector<std::size_t> kept;
  for (std::size_t i = 0; i < n; ++i)
    if (i < start || i >= start + len) kept.push_back(i);
  return mask_operator(n, std::move(kept));
}

/// Block averaging by `factor`.
inline LinearOperator downsample_operator(std::size_t n, std::size_t factor) {
  require(factor >= 1 && n >= 1 && n % factor == 0, "downsample_operator: factor must divide n");
  auto impl = std::make_shared<detail::DownsampleImpl>();
  impl->n = n;
  impl->d = n / factor;
  impl->factor = factor;
  impl->name = "downsample" + detail::dims(impl->n, impl->d);
  return LinearOperator(std::move(impl));
}

inline LinearOperator blur_operator(std::size_t n, Vec kernel) {
  require(!kernel.empty() && kernel.size() % 2 == 1 && kernel.size() <= n,
          "blur_operator: kernel length must be odd and <= n");
  double total = 0.0;
  for (double k : kernel) {
    require(std::isfinite(k), "blur_operator: non-finite kernel weight");
    total += k;
  }
  require(std::abs(total - 1.0) <= 1e-9, "blur_operator: kernel weights must sum to 1");
  auto impl = std::make_shared<detail::BlurImpl>();
  impl->n = impl->d = n;
  impl->kernel = std::move(kernel);
  impl->name = "blur" + detail::dims(n, n);
  return LinearOperator(std::move(impl));
}

/// Normalised Gaussian kernel of the given std-dev, radius ceil(3σ) unless given.
inline Vec gaussian_kernel(double sigma, int radius = -1) {
  require(sigma > 0.0, "gaussian_kernel: sigma must be > 0");
  if (radius < 0) radius = static_cast<int>(std::ceil(3.0 * sigma));
  Vec k(static_cast<std::size_t>(2 * radius + 1));
  double total = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    k[static_cast<std::size_t>(i + radius)] = std::exp(-0.5 * i * i / (sigma * sigma));
    total += k[static_cast<std::size_t>(i + radius)];
  }
  for (double& v : k) v /= total;
  return k;
}

/// Dense d×n matrix (row-major); handy for tests and small experiments.
inline LinearOperator matrix_operator(std::size_t d, std::size_t n, Vec rows) {
  require(d >= 1 && n >= 1 && rows.size() == d * n, "matrix_operator: size mismatch");
  auto impl = std::make_shared<detail::MatrixImpl>();
  impl->n = n;
  impl->d = d;
  impl->rows = std::move(rows);
  impl->name = "matrix" + detail::dims(n, d);
  return LinearOperator(std::move(impl));
}

/// outer ∘ inner.
inline LinearOperator compose(const LinearOperator& outer, const LinearOperator& inner) {
  require(outer.n() == inner.d(), "compose: outer.n must equal inner.d");
  auto impl = std::make_shared<detail::ComposeImpl>(outer, inner);
  impl->n = inner.n();
  impl->d = outer.d();
  impl->name = outer.name() + "*" + inner.name();
  return LinearOperator(std::move(impl));
}

// ---- observation noise ------------------------------------------------------

struct NoiseModel {
  enum class Kind { none, gaussian, bimodal, poisson };
  Kind kind = Kind::none;
  double sigma = 0.0;      // gaussian std-dev
  double amplitude = 0.0;  // bimodal ±a
  double prob = 0.5;       // bimodal P(+a)
  double scale = 1.0;      // poisson s

  static NoiseModel none() { return {}; }
  static NoiseModel gaussian(double sigma) { return {Kind::gaussian, sigma, 0.0, 0.5, 1.0}; }
  static NoiseModel bimodal(double a, double p) { return {Kind::bimodal, 0.0, a, p, 1.0}; }
  static NoiseModel poisson(double s) { return {Kind::poisson, 0.0, 0.0, 0.5, s}; }

  void validate() const {
    require(sigma >= 0.0, "noise: sigma must be >= 0");
    require(prob >= 0.0 && prob <= 1.0, "noise: prob must lie in [0,1]");
    require(scale > 0.0, "noise: poisson scale must be > 0");
  }

  /// Variance of the additive noise per coordinate (gaussian / bimodal only).
  double variance() const {
    switch (kind) {
      case Kind::gaussian: return sigma * sigma;
      case Kind::bimodal: {
        const double mean = amplitude * (2.0 * prob - 1.0);
        return amplitude * amplitude - mean * mean;
      }
      default: return 0.0;
    }
  }
};

inline const char* to_string(NoiseModel::Kind k) {
  switch (k) {
    case NoiseModel::Kind::none: return "none";
    case NoiseModel::Kind::gaussian: return "gaussian";
    case NoiseModel::Kind::bimodal: return "bimodal";
    case NoiseModel::Kind::poisson: return "poisson";
  }
  return "?";
}

/// y = A x_true corrupted by the given noise, deterministic in seed.
inline Vec observe(const LinearOperator& op, ConstSpan x_true, const NoiseModel& noise, std::uint64_t seed) {
  noise.validate();
  require(all_finite(x_true), "observe: x_true must be finite");
  Vec y = op.apply(x_true);
  Rng rng(seed, 0x0b5e);
  switch (noise.kind) {
    case NoiseModel::Kind::none: break;
    case NoiseModel::Kind::gaussian:
      for (double& v : y) v += noise.sigma * rng.normal();
      break;
    case NoiseModel::Kind::bimodal:
      for (double& v : y) v += rng.uniform() < noise.prob ? noise.amplitude : -noise.amplitude;
      break;
    case NoiseModel::Kind::poisson:
      for (double v : y)
        if (v < 0.0) throw DomainError("observe: Poisson rate s*Ax must be >= 0");
      for (double& v : y) v = static_cast<double>(rng.poisson(noise.scale * v)) / noise.scale;
      break;
  }
  return y;
}

}  // namespace cdim
