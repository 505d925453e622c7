#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <memory>
#include <string>
#include <variant>

#include "cdim/core.hpp"
#include "cdim/mlp.hpp"
#include "cdim/score.hpp"

namespace cdim {

static_assert(std::endian::native == std::endian::little, "model_io assumes a little-endian host");

// Binary model files:
//   "CDIM" | u32 version | u8 kind | u32 n | kind payload
// kind 1 (GMM): u32 K, then f64 weights[K], means[K*n], variances[K*n]
// kind 2 (MLP): u32 time_dim, u32 hidden1, u32 hidden2, then f64 params[]
// All integers and doubles little-endian.
inline constexpr std::uint32_t kModelFileVersion = 1;
enum class ModelKind : std::uint8_t { gmm = 1, mlp = 2 };

namespace detail {

template <class T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T get(std::istream& is, const std::string& path) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw FormatError("model file truncated: " + path);
  return v;
}

inline void put_f64s(std::ostream& os, ConstSpan v) {
  os.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(double)));
}

inline Vec get_f64s(std::istream& is, std::size_t count, const std::string& path) {
  Vec v(count);
  is.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(count * sizeof(double)));
  if (!is) throw FormatError("model file truncated: " + path);
  return v;
}

inline void write_header(std::ostream& os, ModelKind kind, std::size_t n) {
  os.write("CDIM", 4);
  put<std::uint32_t>(os, kModelFileVersion);
  put<std::uint8_t>(os, static_cast<std::uint8_t>(kind));
  put<std::uint32_t>(os, static_cast<std::uint32_t>(n));
}

}  // namespace detail

inline void save_gmm(const GmmPrior& g, const std::string& path) {
  g.validate();
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open for writing: " + path);
  detail::write_header(os, ModelKind::gmm, g.dim());
  detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(g.components()));
  detail::put_f64s(os, g.weights);
  for (const auto& m : g.means) detail::put_f64s(os, m);
  for (const auto& v : g.variances) detail::put_f64s(os, v);
  if (!os) throw FormatError("write failed: " + path);
}

inline void save_mlp(const MlpDenoiser& m, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open for writing: " + path);
  const auto& s = m.shape();
  detail::write_header(os, ModelKind::mlp, s.n);
  detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(s.time_dim));
  detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(s.hidden1));
  detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(s.hidden2));
  detail::put_f64s(os, m.params());
  if (!os) throw FormatError("write failed: " + path);
}

using LoadedModel = std::variant<GmmPrior, MlpDenoiser>;

inline LoadedModel load_model(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open model file: " + path);
  std::array<char, 4> magic{};
  is.read(magic.data(), 4);
  if (!is || std::memcmp(magic.data(), "CDIM", 4) != 0) throw FormatError("bad magic in model file: " + path);
  const auto version = detail::get<std::uint32_t>(is, path);
  if (version != kModelFileVersion)
    throw FormatError("unsupported model file version " + std::to_string(version) + ": " + path);
  const auto kind = detail::get<std::uint8_t>(is, path);
  const std::size_t n = detail::get<std::uint32_t>(is, path);
  if (kind == static_cast<std::uint8_t>(ModelKind::gmm)) {
    const std::size_t K = detail::get<std::uint32_t>(is, path);
    GmmPrior g;
    g.weights = detail::get_f64s(is, K, path);
    for (std::size_t k = 0; k < K; ++k) g.means.push_back(detail::get_f64s(is, n, path));
    for (std::size_t k = 0; k < K; ++k) g.variances.push_back(detail::get_f64s(is, n, path));
    g.validate();
    return g;
  }
  if (kind == static_cast<std::uint8_t>(ModelKind::mlp)) {
    MlpShape s;
    s.n = n;
    s.time_dim = detail::get<std::uint32_t>(is, path);
    s.hidden1 = detail::get<std::uint32_t>(is, path);
    s.hidden2 = detail::get<std::uint32_t>(is, path);
    return MlpDenoiser(s, detail::get_f64s(is, s.param_count(), path));
  }
  throw FormatError("unknown model kind " + std::to_string(kind) + ": " + path);
}

/// Wraps whatever was loaded in the ScoreModel interface.
inline std::shared_ptr<const ScoreModel> as_score_model(LoadedModel m) {
  if (auto* g = std::get_if<GmmPrior>(&m)) return std::make_shared<GmmScoreModel>(std::move(*g));
  return std::make_shared<MlpDenoiser>(std::get<MlpDenoiser>(std::move(m)));
}

}  // namespace cdim
