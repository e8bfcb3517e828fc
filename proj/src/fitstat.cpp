#include "tofcal/fitstat.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>

namespace tofcal::fitstat {

Histogram make_histogram(std::span<const double> samples, double bin_width_hint) {
  if (samples.empty()) throw FitDegenerateError("histogram of empty sample");
  std::vector<double> sorted(samples.begin(), samples.end());
  std::sort(sorted.begin(), sorted.end());
  const double lo = sorted.front(), hi = sorted.back();
  double width = bin_width_hint;
  if (width <= 0) {
    const double iqr =
        quantile_sorted(sorted, 0.75) - quantile_sorted(sorted, 0.25);
    width = 2.0 * iqr / std::cbrt(static_cast<double>(sorted.size()));
  }
  if (width <= 0 || !std::isfinite(width)) {
    width = (hi > lo) ? (hi - lo) / 50.0 : 1.0;
  }
  std::size_t bins = static_cast<std::size_t>(std::ceil((hi - lo) / width));
  bins = std::clamp<std::size_t>(bins, 1, 100000);

  Histogram h;
  h.edges.resize(bins + 1);
  for (std::size_t i = 0; i <= bins; ++i) {
    h.edges[i] = lo + width * static_cast<double>(i);
  }
  h.counts.assign(bins, 0.0);
  for (double x : sorted) {
    auto b = static_cast<std::size_t>((x - lo) / width);
    if (b >= bins) b = bins - 1;
    h.counts[b] += 1.0;
  }
  return h;
}

namespace {

struct FitState {
  double amp, mu, sigma;
};

double chi2_of(const Histogram& h, const FitState& p,
               const std::vector<double>& w, std::size_t b0, std::size_t b1) {
  double c2 = 0;
  for (std::size_t i = b0; i < b1; ++i) {
    const double x = h.bin_center(i);
    const double z = (x - p.mu) / p.sigma;
    const double f = p.amp * std::exp(-0.5 * z * z);
    const double r = h.counts[i] - f;
    c2 += w[i] * r * r;
  }
  return c2;
}

GaussianFit run_fit(const Histogram& h, double amp0, double mu0, double sigma0,
                    const GaussFitOptions& opts, std::size_t n_samples) {
  const std::size_t nbins = h.counts.size();
  std::size_t b0 = 0, b1 = nbins;
  if (std::isfinite(opts.fit_range_lo)) {
    while (b0 < nbins && h.bin_center(b0) < opts.fit_range_lo) ++b0;
  }
  if (std::isfinite(opts.fit_range_hi)) {
    while (b1 > b0 && h.bin_center(b1 - 1) > opts.fit_range_hi) --b1;
  }
  if (b1 - b0 < 4) throw FitDivergedError("gaussian fit: fewer than 4 bins in range");

  FitState p{amp0, mu0, std::abs(sigma0)};
  if (p.sigma <= 0) p.sigma = std::max(h.bin_width(), 1e-12);

  std::vector<double> w(nbins, 0.0);
  GaussianFit out;
  Eigen::Matrix3d jtj_final = Eigen::Matrix3d::Zero();

  // Two weighting passes: observed counts first, then expected counts from
  // the converged model (Pearson weights), which removes the low-count bias.
  for (int pass = 0; pass < 2; ++pass) {
    for (std::size_t i = b0; i < b1; ++i) {
      double denom;
      if (pass == 0) {
        denom = std::max(h.counts[i], 1.0);
      } else {
        const double z = (h.bin_center(i) - p.mu) / p.sigma;
        denom = std::max(p.amp * std::exp(-0.5 * z * z), 1.0);
      }
      w[i] = 1.0 / denom;
    }

    double lambda = 1e-3;
    double chi2 = chi2_of(h, p, w, b0, b1);
    int iter = 0;
    for (; iter < opts.max_iterations; ++iter) {
      Eigen::Matrix3d jtj = Eigen::Matrix3d::Zero();
      Eigen::Vector3d jtr = Eigen::Vector3d::Zero();
      for (std::size_t i = b0; i < b1; ++i) {
        const double x = h.bin_center(i);
        const double z = (x - p.mu) / p.sigma;
        const double g = std::exp(-0.5 * z * z);
        const double f = p.amp * g;
        Eigen::Vector3d j(g, f * z / p.sigma, f * z * z / p.sigma);
        const double r = h.counts[i] - f;
        jtj += w[i] * j * j.transpose();
        jtr += w[i] * r * j;
      }
      jtj_final = jtj;
      Eigen::Matrix3d damped = jtj;
      for (int k = 0; k < 3; ++k) {
        damped(k, k) += lambda * std::max(jtj(k, k), 1e-30);
      }
      const Eigen::Vector3d step = damped.ldlt().solve(jtr);
      if (!step.allFinite()) {
        throw FitDivergedError("gaussian fit: singular normal equations");
      }
      FitState trial{p.amp + step(0), p.mu + step(1), p.sigma + step(2)};
      trial.sigma = std::abs(trial.sigma);
      if (trial.sigma < 1e-12) trial.sigma = 1e-12;
      const double trial_chi2 = chi2_of(h, trial, w, b0, b1);
      if (trial_chi2 <= chi2) {
        const double rel =
            std::abs(step(1)) / std::max(p.sigma, 1e-12) +
            std::abs(step(2)) / std::max(p.sigma, 1e-12);
        p = trial;
        const bool done = (chi2 - trial_chi2) <=
                              1e-12 * std::max(chi2, 1.0) &&
                          rel < 1e-9;
        chi2 = trial_chi2;
        lambda = std::max(lambda * 0.3, 1e-12);
        if (done) break;
      } else {
        lambda *= 10.0;
        if (lambda > 1e12) break;
      }
    }
    out.iterations += iter;
    if (iter >= opts.max_iterations) {
      throw FitDivergedError("gaussian fit: no convergence after " +
                             std::to_string(opts.max_iterations) +
                             " iterations (chi2=" + std::to_string(chi2) + ")");
    }
  }

  const double span = h.edges.back() - h.edges.front();
  if (!(p.sigma > 0) || p.sigma > span || p.mu < h.edges.front() - span ||
      p.mu > h.edges.back() + span || !(p.amp > 0)) {
    throw FitDivergedError("gaussian fit: parameters outside the sample range");
  }

  out.amplitude = p.amp;
  out.mu = p.mu;
  out.sigma = p.sigma;
  out.n_samples = n_samples;

  const Eigen::Matrix3d cov = jtj_final.inverse();
  if (cov.allFinite()) {
    out.amplitude_err = std::sqrt(std::max(cov(0, 0), 0.0));
    out.mu_err = std::sqrt(std::max(cov(1, 1), 0.0));
    out.sigma_err = std::sqrt(std::max(cov(2, 2), 0.0));
  }

  // Pearson chi2 over bins with adequate expected counts.
  double chi2 = 0;
  int used = 0;
  for (std::size_t i = b0; i < b1; ++i) {
    const double z = (h.bin_center(i) - p.mu) / p.sigma;
    const double f = p.amp * std::exp(-0.5 * z * z);
    if (f < opts.min_expected_for_chi2) continue;
    const double r = h.counts[i] - f;
    chi2 += r * r / f;
    ++used;
  }
  out.chi2 = chi2;
  out.ndf = used - 3;
  out.chi2_ndf = out.ndf > 0 ? chi2 / out.ndf : kNaN;
  return out;
}

}  // namespace

GaussianFit fit_gaussian_hist(const Histogram& hist, double amp0, double mu0,
                              double sigma0, const GaussFitOptions& opts) {
  double total = 0;
  for (double c : hist.counts) total += c;
  return run_fit(hist, amp0, mu0, sigma0, opts,
                 static_cast<std::size_t>(total));
}

GaussianFit fit_gaussian(std::span<const double> samples,
                         const GaussFitOptions& opts) {
  if (samples.size() < opts.min_samples) {
    throw FitDegenerateError("gaussian fit: " + std::to_string(samples.size()) +
                             " samples, need " + std::to_string(opts.min_samples));
  }
  const Histogram h = make_histogram(samples, opts.bin_width_hint);
  const double m = mean(samples);
  const double s = stddev(samples);
  const double amp0 = static_cast<double>(samples.size()) * h.bin_width() /
                      (std::max(s, 1e-12) * std::sqrt(2.0 * M_PI));
  return run_fit(h, amp0, m, s, opts, samples.size());
}

Fwhm ctr_fwhm(const GaussianFit& fit) {
  return Fwhm{kFwhmPerSigma * fit.sigma, kFwhmPerSigma * fit.sigma_err};
}

double mae(std::span<const double> labels, std::span<const double> predictions) {
  if (labels.empty() || labels.size() != predictions.size()) {
    throw std::invalid_argument("mae: empty or mismatched inputs");
  }
  double s = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    s += std::abs(labels[i] - predictions[i]);
  }
  return s / static_cast<double>(labels.size());
}

std::vector<MaeRow> mae_by_position(std::span<const double> z,
                                    std::span<const double> labels,
                                    std::span<const double> predictions) {
  if (z.size() != labels.size() || z.size() != predictions.size()) {
    throw std::invalid_argument("mae_by_position: size mismatch");
  }
  std::map<double, std::pair<double, std::size_t>> acc;
  for (std::size_t i = 0; i < z.size(); ++i) {
    auto& a = acc[z[i]];
    a.first += std::abs(labels[i] - predictions[i]);
    a.second += 1;
  }
  std::vector<MaeRow> rows;
  rows.reserve(acc.size());
  for (const auto& [zv, a] : acc) {
    rows.push_back({zv, a.first / static_cast<double>(a.second), a.second});
  }
  return rows;
}

LinearityFit fit_linearity(std::span<const LinearityPoint> points,
                           double c_air_mm_per_ps) {
  const std::size_t n = points.size();
  if (n < 3) throw FitDegenerateError("linearity fit: need at least 3 points");
  double zmin = points[0].z_mm, zmax = points[0].z_mm;
  for (const auto& p : points) {
    zmin = std::min(zmin, p.z_mm);
    zmax = std::max(zmax, p.z_mm);
  }
  if (zmax - zmin < 1e-9) {
    throw FitDegenerateError("linearity fit: degenerate abscissa spread");
  }

  std::vector<double> wx(n), wy(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double sx = std::max(points[i].z_err_mm, 1e-12);
    const double sy = std::max(points[i].mu_err_ps, 1e-12);
    wx[i] = 1.0 / (sx * sx);
    wy[i] = 1.0 / (sy * sy);
  }

  // Ordinary weighted LS slope as the starting value.
  double sw = 0, sx_ = 0, sy_ = 0, sxx = 0, sxy = 0;
  for (std::size_t i = 0; i < n; ++i) {
    sw += wy[i];
    sx_ += wy[i] * points[i].z_mm;
    sy_ += wy[i] * points[i].mu_ps;
    sxx += wy[i] * points[i].z_mm * points[i].z_mm;
    sxy += wy[i] * points[i].z_mm * points[i].mu_ps;
  }
  double b = (sw * sxy - sx_ * sy_) / std::max(sw * sxx - sx_ * sx_, 1e-30);

  // York's iteration for the errors-in-variables line.
  std::vector<double> W(n), U(n), V(n), beta(n);
  double xbar = 0, ybar = 0;
  for (int iter = 0; iter < 200; ++iter) {
    double sW = 0, sWx = 0, sWy = 0;
    for (std::size_t i = 0; i < n; ++i) {
      W[i] = wx[i] * wy[i] / (wx[i] + b * b * wy[i]);
      sW += W[i];
      sWx += W[i] * points[i].z_mm;
      sWy += W[i] * points[i].mu_ps;
    }
    xbar = sWx / sW;
    ybar = sWy / sW;
    double num = 0, den = 0;
    for (std::size_t i = 0; i < n; ++i) {
      U[i] = points[i].z_mm - xbar;
      V[i] = points[i].mu_ps - ybar;
      beta[i] = W[i] * (U[i] / wy[i] + b * V[i] / wx[i]);
      num += W[i] * beta[i] * V[i];
      den += W[i] * beta[i] * U[i];
    }
    const double b_new = num / den;
    const double change = std::abs(b_new - b);
    b = b_new;
    if (change < 1e-14 * std::max(1.0, std::abs(b))) break;
  }
  const double a = ybar - b * xbar;

  // Uncertainties from the adjusted abscissae.
  double sW = 0, sWxadj = 0;
  std::vector<double> xadj(n);
  for (std::size_t i = 0; i < n; ++i) {
    xadj[i] = xbar + beta[i];
    sW += W[i];
    sWxadj += W[i] * xadj[i];
  }
  const double xadj_bar = sWxadj / sW;
  double sWu2 = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double u = xadj[i] - xadj_bar;
    sWu2 += W[i] * u * u;
  }
  const double var_b = 1.0 / std::max(sWu2, 1e-30);
  const double var_a = 1.0 / sW + xadj_bar * xadj_bar * var_b;

  LinearityFit fit;
  fit.slope_ps_per_mm = b;
  fit.slope_err = std::sqrt(var_b);
  fit.intercept_ps = a;
  fit.intercept_err = std::sqrt(var_a);
  const double theory = -2.0 / c_air_mm_per_ps;
  fit.epsilon = b / theory;
  fit.epsilon_err = fit.slope_err / std::abs(theory);
  fit.n_points = n;
  fit.residuals_ps.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    fit.residuals_ps[i] = points[i].mu_ps - (a + b * points[i].z_mm);
  }
  return fit;
}

double runs_test_pvalue(std::span<const double> residuals) {
  std::size_t n_pos = 0, n_neg = 0, runs = 0;
  int prev = 0;
  for (double r : residuals) {
    const int sign = r >= 0 ? 1 : -1;
    if (sign > 0) ++n_pos; else ++n_neg;
    if (sign != prev) ++runs;
    prev = sign;
  }
  if (n_pos == 0 || n_neg == 0) return 1.0;  // intercept handles constant bias
  const double np = static_cast<double>(n_pos), nn = static_cast<double>(n_neg);
  const double n = np + nn;
  const double mu = 2.0 * np * nn / n + 1.0;
  const double var = 2.0 * np * nn * (2.0 * np * nn - n) / (n * n * (n - 1.0));
  if (var <= 0) return 1.0;
  const double z = (static_cast<double>(runs) - mu) / std::sqrt(var);
  return std::erfc(std::abs(z) / std::sqrt(2.0));  // two-sided
}

std::vector<GoodnessRow> goodness_by_position(
    const std::map<double, std::vector<double>>& samples_by_z,
    const GaussFitOptions& opts) {
  std::vector<GoodnessRow> rows;
  for (const auto& [z, v] : samples_by_z) {
    GoodnessRow row;
    row.z_mm = z;
    row.count = v.size();
    try {
      const GaussianFit fit = fit_gaussian(v, opts);
      row.mu_ps = fit.mu;
      row.sigma_ps = fit.sigma;
      row.chi2_ndf = fit.chi2_ndf;
      row.valid = fit.ndf > 0 && std::isfinite(fit.chi2_ndf);
    } catch (const NumericalError&) {
      row.valid = false;
    }
    rows.push_back(row);
  }
  return rows;
}

}  // namespace tofcal::fitstat
