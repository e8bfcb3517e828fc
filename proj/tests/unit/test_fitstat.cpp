#include <doctest.h>

#include <cmath>

#include "tofcal/fitstat.hpp"
#include "tofcal/util.hpp"

using namespace tofcal;
using namespace tofcal::fitstat;

TEST_CASE("mae basics") {
  std::vector<double> labels{0, 0}, preds{10, -10};
  CHECK(mae(labels, preds) == 10.0);
  CHECK(mae(labels, labels) == 0.0);
  CHECK_THROWS_AS(mae({}, {}), std::invalid_argument);
}

TEST_CASE("gaussian fit recovers a known generator") {
  Rng rng(123);
  std::vector<double> samples(100000);
  for (auto& s : samples) s = rng.normal(0, 100);
  const auto fit = fit_gaussian(samples);
  CHECK(fit.sigma > 98.0);
  CHECK(fit.sigma < 102.0);
  CHECK(std::abs(fit.mu) < 1.5);
  CHECK(fit.chi2_ndf > 0.5);
  CHECK(fit.chi2_ndf < 1.6);
  // uncertainty scale: sigma / sqrt(2N) within a factor of two
  const double expect_err = 100.0 / std::sqrt(2.0 * samples.size());
  CHECK(fit.sigma_err > 0.3 * expect_err);
  CHECK(fit.sigma_err < 3.0 * expect_err);
}

TEST_CASE("histogram equal to the model gives chi2 ~ 0") {
  Histogram h;
  const double amp = 1000, mu = 5, sigma = 2;
  const int bins = 60;
  h.edges.resize(bins + 1);
  h.counts.resize(bins);
  for (int i = 0; i <= bins; ++i) h.edges[i] = mu - 6 * sigma + 12.0 * sigma * i / bins;
  for (int i = 0; i < bins; ++i) {
    const double x = h.bin_center(i);
    h.counts[i] = amp * std::exp(-0.5 * (x - mu) * (x - mu) / (sigma * sigma));
  }
  const auto fit = fit_gaussian_hist(h, amp * 0.8, mu + 0.5, sigma * 1.3);
  CHECK(fit.chi2 == doctest::Approx(0.0).epsilon(1e-6));
  CHECK(fit.mu == doctest::Approx(mu).epsilon(1e-9));
  CHECK(fit.sigma == doctest::Approx(sigma).epsilon(1e-9));
}

TEST_CASE("gaussian fit is shift and scale equivariant") {
  Rng rng(321);
  std::vector<double> samples(20000);
  for (auto& s : samples) s = rng.normal(10, 7);
  const auto base = fit_gaussian(samples, {.min_samples = 1000});
  std::vector<double> shifted = samples, scaled = samples;
  for (auto& s : shifted) s += 1000.0;
  for (auto& s : scaled) s *= 3.0;
  const auto fs = fit_gaussian(shifted, {.min_samples = 1000});
  const auto fc = fit_gaussian(scaled, {.min_samples = 1000});
  CHECK(fs.mu == doctest::Approx(base.mu + 1000.0).epsilon(1e-6));
  CHECK(fs.sigma == doctest::Approx(base.sigma).epsilon(1e-6));
  CHECK(fc.sigma == doctest::Approx(3.0 * base.sigma).epsilon(1e-6));
}

TEST_CASE("bimodal input converges to the dominant mode or fails loudly") {
  Rng rng(55);
  std::vector<double> samples;
  for (int i = 0; i < 30000; ++i) samples.push_back(rng.normal(0, 10));
  for (int i = 0; i < 8000; ++i) samples.push_back(rng.normal(80, 10));
  try {
    const auto fit = fit_gaussian(samples);
    const double range = 80 + 8 * 10;
    CHECK(fit.sigma < range);  // never silent nonsense
    CHECK(std::abs(fit.mu) < 40.0);
  } catch (const FitDivergedError&) {
    // acceptable contract
  }
}

TEST_CASE("fit_gaussian enforces the minimum sample count") {
  std::vector<double> tiny(10, 1.0);
  CHECK_THROWS_AS(fit_gaussian(tiny), FitDegenerateError);
}

TEST_CASE("ctr_fwhm closed form") {
  GaussianFit fit;
  fit.sigma = 100.0;
  fit.sigma_err = 1.0;
  const auto f = ctr_fwhm(fit);
  CHECK(f.value_ps == doctest::Approx(235.482).epsilon(1e-5));
  CHECK(f.err_ps == doctest::Approx(2.35482).epsilon(1e-5));
  CHECK(kFwhmPerSigma == 2.0 * std::sqrt(2.0 * std::log(2.0)));
}

TEST_CASE("linearity fit on an exact line") {
  std::vector<LinearityPoint> pts;
  const double theory = -2.0 / kSpeedOfLightMmPerPs;
  for (double z = -75; z <= 45; z += 10) {
    pts.push_back({z, 0.1, theory * z, 0.5});
  }
  const auto fit = fit_linearity(pts);
  CHECK(fit.epsilon == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(fit.intercept_ps == doctest::Approx(0.0).epsilon(1e-9));

  // doubled slope -> epsilon = 2
  for (auto& p : pts) p.mu_ps *= 2.0;
  const auto fit2 = fit_linearity(pts);
  CHECK(fit2.epsilon == doctest::Approx(2.0).epsilon(1e-9));
}

TEST_CASE("linearity fit detector-exchange invariance") {
  Rng rng(77);
  std::vector<LinearityPoint> pts, flipped;
  const double theory = -2.0 / kSpeedOfLightMmPerPs;
  for (double z = -70; z <= 40; z += 10) {
    const double mu = theory * (z + rng.normal(0, 0.02)) + 3.0;
    pts.push_back({z, 0.1, mu, 0.8});
    flipped.push_back({z, 0.1, -mu, 0.8});
  }
  const auto a = fit_linearity(pts);
  // negated time axis: fit against the mirrored theory slope
  const auto b = fit_linearity(flipped, -kSpeedOfLightMmPerPs);
  // epsilon = slope / (-2/c); flipping both slope and theory sign keeps it
  CHECK(b.epsilon == doctest::Approx(a.epsilon).epsilon(1e-9));
  CHECK(b.intercept_ps == doctest::Approx(-a.intercept_ps).epsilon(1e-9));
}

TEST_CASE("linearity fit degenerate abscissa") {
  std::vector<LinearityPoint> pts{{5, 0.1, 1, 1}, {5, 0.1, 2, 1}, {5, 0.1, 3, 1}};
  CHECK_THROWS_AS(fit_linearity(pts), FitDegenerateError);
}

TEST_CASE("york fit shrinks toward known line with noisy both axes") {
  Rng rng(99);
  const double slope = -6.671, intercept = 4.0;
  std::vector<LinearityPoint> pts;
  for (double z = -75; z <= 45; z += 5) {
    const double zn = z + rng.normal(0, 0.1);
    const double mu = slope * z + intercept + rng.normal(0, 1.0);
    pts.push_back({zn, 0.1, mu, 1.0});
  }
  const auto fit = fit_linearity(pts);
  CHECK(fit.slope_ps_per_mm == doctest::Approx(slope).epsilon(0.01));
  CHECK(std::abs(fit.intercept_ps - intercept) < 3.0);
  CHECK(fit.slope_err > 0);
}

TEST_CASE("runs test flags monotone residuals and passes random ones") {
  std::vector<double> systematic;
  for (int i = 0; i < 12; ++i) systematic.push_back(-1.0);
  for (int i = 0; i < 13; ++i) systematic.push_back(1.0);
  CHECK(runs_test_pvalue(systematic) < 0.01);

  Rng rng(13);
  int ok = 0;
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> random;
    for (int i = 0; i < 25; ++i) random.push_back(rng.normal());
    if (runs_test_pvalue(random) > 0.01) ++ok;
  }
  CHECK(ok >= 45);
}

TEST_CASE("goodness_by_position flags degenerate cells") {
  std::map<double, std::vector<double>> by_z;
  Rng rng(1);
  for (int i = 0; i < 5000; ++i) by_z[0.0].push_back(rng.normal(0, 50));
  by_z[5.0] = std::vector<double>(10, 1.0);  // too small
  const auto rows = goodness_by_position(by_z, {.min_samples = 1000});
  REQUIRE(rows.size() == 2);
  CHECK(rows[0].valid);
  CHECK(rows[0].chi2_ndf > 0.3);
  CHECK(rows[0].chi2_ndf < 2.5);
  CHECK_FALSE(rows[1].valid);
}

TEST_CASE("mae_by_position groups by source position") {
  std::vector<double> z{0, 0, 5, 5};
  std::vector<double> labels{0, 0, 0, 0};
  std::vector<double> preds{1, -1, 2, 2};
  const auto rows = mae_by_position(z, labels, preds);
  REQUIRE(rows.size() == 2);
  CHECK(rows[0].mae_ps == 1.0);
  CHECK(rows[1].mae_ps == 2.0);
}
