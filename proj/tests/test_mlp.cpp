#include <gtest/gtest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>

#include "cdim/mlp.hpp"
#include "cdim/model_io.hpp"
#include "cdim/oracle.hpp"

using namespace cdim;

namespace {

double rel_err(ConstSpan a, ConstSpan b) { return norm2(sub(a, b)) / std::max(norm2(b), 1e-12); }

GmmPrior toy_prior() { return GmmPrior{{0.5, 0.5}, {{-1.0, 1.0}, {1.0, -0.5}}, {{0.1, 0.15}, {0.2, 0.1}}}; }

std::vector<Vec> draw(const GmmPrior& p, std::size_t count, std::uint64_t seed) { return sample_gmm(p, count, seed); }

int step_nearest(const NoiseSchedule& s, double target) {
  int best = 1;
  for (int t = 1; t <= s.T(); ++t)
    if (std::abs(s.alpha_bar(t) - target) < std::abs(s.alpha_bar(best) - target)) best = t;
  return best;
}

}  // namespace

TEST(Mlp, ZeroStepsLeavesInitialisation) {
  const auto sched = make_linear_schedule();
  TrainingConfig cfg;
  cfg.max_steps = 0;
  const auto res = train_mlp_denoiser(draw(toy_prior(), 64, 1), sched, cfg, 42);
  EXPECT_EQ(res.steps, 0);
  EXPECT_EQ(res.model.params(), MlpDenoiser::initialise({2, 16, 64, 64}, 42).params());
}

TEST(Mlp, VjpMatchesFiniteDifferences) {
  const auto model = MlpDenoiser::initialise({5, 8, 16, 12}, 3);
  Rng rng(6);
  for (int probe = 0; probe < 100; ++probe) {
    const int t = 1 + static_cast<int>(rng.next_u64() % 999);
    const Timestep ts{t, rng.uniform(0.05, 0.95)};
    const Vec x = rng.normal_vec(5), c = rng.normal_vec(5);
    const Vec fd =
        finite_diff_grad([&](ConstSpan z) { return dot(model.predict_xhat0(z, ts), c); }, x, 1e-5);
    EXPECT_LE(rel_err(model.xhat0_vjp(x, ts, c), fd), 1e-4) << "probe " << probe;
  }
}

TEST(Mlp, ParameterGradientMatchesFiniteDifferences) {
  const MlpShape shape{3, 4, 6, 5};
  const auto model = MlpDenoiser::initialise(shape, 9);
  const Vec x{0.3, -0.8, 1.1}, g{1.0, -0.5, 2.0};
  Vec grad(shape.param_count(), 0.0);
  model.accumulate_param_grad(x, 77, g, grad);
  const Vec fd = finite_diff_grad(
      [&](ConstSpan p) {
        return dot(MlpDenoiser(shape, Vec(p.begin(), p.end())).predict_eps(x, {77, 0.5}), g);
      },
      model.params(), 1e-6);
  EXPECT_LE(rel_err(grad, fd), 1e-6);
}

TEST(Mlp, PluginConsistency) {
  const auto model = MlpDenoiser::initialise({4, 16, 32, 32}, 1);
  Rng rng(2);
  for (int trial = 0; trial < 50; ++trial) {
    const Vec x = rng.normal_vec(4);
    const Timestep ts{1 + trial * 20, rng.uniform(1e-4, 0.9999)};
    const Vec direct = model.predict_xhat0(x, ts);
    const Vec plug = xhat_from_eps(x, model.predict_eps(x, ts), ts.alpha_bar);
    EXPECT_LE(norm2(sub(direct, plug)), 1e-10 * std::max(1.0, norm2(direct)));
  }
}

TEST(Mlp, VjpRejectsNonFiniteInput) {
  const auto model = MlpDenoiser::initialise({2, 4, 4, 4}, 1);
  EXPECT_THROW(model.xhat0_vjp(Vec{INFINITY, 0.0}, {10, 0.5}, Vec{1.0, 1.0}), NumericError);
}

TEST(Mlp, TrainsToMatchAnalyticPosteriorMean) {
  const auto prior = toy_prior();
  const auto sched = make_linear_schedule();
  const auto res = train_mlp_denoiser(draw(prior, 10000, 11), sched, TrainingConfig{}, 5);

  ASSERT_GE(res.epoch_loss.size(), 10u);
  EXPECT_LT(res.epoch_loss[9], res.epoch_loss[0]);
  for (double l : res.epoch_loss) EXPECT_GE(l, 0.0);

  const int t = step_nearest(sched, 0.5);
  const double ab = sched.alpha_bar(t);
  const auto held_out = draw(prior, 2000, 999);
  Rng rng(12);
  double mae = 0.0;
  std::size_t count = 0;
  for (const Vec& x0 : held_out) {
    Vec xt(2);
    for (int i = 0; i < 2; ++i) xt[i] = std::sqrt(ab) * x0[i] + std::sqrt(1.0 - ab) * rng.normal();
    const Vec learned = res.model.predict_xhat0(xt, {t, ab});
    const Vec exact = gmm_posterior_mean(prior, xt, ab);
    for (int i = 0; i < 2; ++i, ++count) mae += std::abs(learned[i] - exact[i]);
  }
  mae /= static_cast<double>(count);
  EXPECT_LE(mae, 0.1) << "t=" << t << " alpha_bar=" << ab;
}

TEST(Mlp, DivergentTrainingRaisesWithDiagnostics) {
  TrainingConfig cfg;
  cfg.learning_rate = 1e305;
  cfg.epochs = 2;
  try {
    train_mlp_denoiser(draw(toy_prior(), 256, 1), make_linear_schedule(), cfg, 1);
    FAIL() << "expected TrainingError";
  } catch (const TrainingError& e) {
    EXPECT_NE(std::string(e.what()).find("epoch"), std::string::npos);
  }
}

TEST(Mlp, RejectsEmptyDataset) {
  EXPECT_THROW(train_mlp_denoiser({}, make_linear_schedule(), TrainingConfig{}, 1), ParameterError);
}

TEST(ModelIo, GmmRoundTripIsExact) {
  const auto path = (std::filesystem::temp_directory_path() / "cdim_test_gmm.bin").string();
  const auto g = random_gmm(7, 3, 8);
  save_gmm(g, path);
  const auto loaded = std::get<GmmPrior>(load_model(path));
  EXPECT_EQ(loaded.weights, g.weights);
  EXPECT_EQ(loaded.means, g.means);
  EXPECT_EQ(loaded.variances, g.variances);
  std::filesystem::remove(path);
}

TEST(ModelIo, MlpRoundTripIsExact) {
  const auto path = (std::filesystem::temp_directory_path() / "cdim_test_mlp.bin").string();
  const auto m = MlpDenoiser::initialise({3, 6, 10, 9}, 4);
  save_mlp(m, path);
  const auto loaded = std::get<MlpDenoiser>(load_model(path));
  EXPECT_EQ(loaded.params(), m.params());
  EXPECT_EQ(loaded.shape().hidden2, 9u);
  std::filesystem::remove(path);
}

TEST(ModelIo, RejectsForeignAndTruncatedFiles) {
  const auto path = (std::filesystem::temp_directory_path() / "cdim_test_bad.bin").string();
  {
    std::FILE* f = std::fopen(path.c_str(), "wb");
    std::fputs("NOPE1234", f);
    std::fclose(f);
  }
  EXPECT_THROW(load_model(path), FormatError);
  save_gmm(random_gmm(2, 2, 1), path);
  std::filesystem::resize_file(path, std::filesystem::file_size(path) - 8);
  EXPECT_THROW(load_model(path), FormatError);
  std::filesystem::remove(path);
  EXPECT_THROW(load_model(path), FormatError);
}
