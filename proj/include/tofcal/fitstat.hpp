#pragma once

#include <map>
#include <span>
#include <vector>

#include "tofcal/util.hpp"

namespace tofcal::fitstat {

struct FitDivergedError : NumericalError {
  using NumericalError::NumericalError;
};
struct FitDegenerateError : NumericalError {
  using NumericalError::NumericalError;
};

struct Histogram {
  std::vector<double> edges;   // size bins+1
  std::vector<double> counts;  // size bins
  double bin_center(std::size_t i) const { return 0.5 * (edges[i] + edges[i + 1]); }
  double bin_width() const { return edges.size() > 1 ? edges[1] - edges[0] : 0; }
};

// Freedman-Diaconis binning by default; fixed width if bin_width_hint > 0.
Histogram make_histogram(std::span<const double> samples, double bin_width_hint = 0);

struct GaussianFit {
  double amplitude = 0;
  double mu = 0;
  double sigma = 0;
  double amplitude_err = 0;
  double mu_err = 0;
  double sigma_err = 0;
  double chi2 = 0;
  int ndf = 0;
  double chi2_ndf = 0;
  int iterations = 0;
  std::size_t n_samples = 0;
};

struct GaussFitOptions {
  std::size_t min_samples = 1000;
  double bin_width_hint = 0;      // 0 = Freedman-Diaconis
  int max_iterations = 200;
  double fit_range_lo = kNaN;     // optional sub-range
  double fit_range_hi = kNaN;
  double min_expected_for_chi2 = 5.0;
};

// Poisson-weighted nonlinear least squares on the histogram, Gauss-Newton
// with Levenberg damping, seeded from sample mean/stddev. Parameter
// uncertainties come from the fit covariance. Throws FitDivergedError when
// the iteration fails or the result is outside the sample range.
GaussianFit fit_gaussian(std::span<const double> samples,
                         const GaussFitOptions& opts = {});

// Same fit on a pre-built histogram, with explicit seeds.
GaussianFit fit_gaussian_hist(const Histogram& hist, double amp0, double mu0,
                              double sigma0, const GaussFitOptions& opts = {});

// FWHM = 2 sqrt(2 ln 2) sigma; value and propagated uncertainty.
struct Fwhm {
  double value_ps = 0;
  double err_ps = 0;
};
Fwhm ctr_fwhm(const GaussianFit& fit);

double mae(std::span<const double> labels, std::span<const double> predictions);

struct MaeRow {
  double z_mm = 0;
  double mae_ps = 0;
  std::size_t count = 0;
};
std::vector<MaeRow> mae_by_position(std::span<const double> z,
                                    std::span<const double> labels,
                                    std::span<const double> predictions);

// One calibration point of the linearity analysis.
struct LinearityPoint {
  double z_mm = 0;
  double z_err_mm = 0.1;   // translation stage uncertainty
  double mu_ps = 0;
  double mu_err_ps = 0;
};

struct LinearityFit {
  double slope_ps_per_mm = 0;
  double slope_err = 0;
  double intercept_ps = 0;
  double intercept_err = 0;
  double epsilon = 0;      // slope / (-2 / c_air)
  double epsilon_err = 0;
  std::size_t n_points = 0;
  std::vector<double> residuals_ps;  // in input order
};

// Errors-in-variables straight line (York's iterated solution, weights in
// both axes), the standard exact treatment behind ODR for a line.
LinearityFit fit_linearity(std::span<const LinearityPoint> points,
                           double c_air_mm_per_ps = kSpeedOfLightMmPerPs);

// Two-sided Wald-Wolfowitz runs test over residual signs; high p-value means
// no monotone systematic. Zeros count as positive.
double runs_test_pvalue(std::span<const double> residuals);

struct GoodnessRow {
  double z_mm = 0;
  double chi2_ndf = 0;
  double mu_ps = 0;
  double sigma_ps = 0;
  std::size_t count = 0;
  bool valid = false;  // false: fit failed or ndf <= 0
};
std::vector<GoodnessRow> goodness_by_position(
    const std::map<double, std::vector<double>>& samples_by_z,
    const GaussFitOptions& opts = {});

}  // namespace tofcal::fitstat
