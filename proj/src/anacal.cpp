#include "tofcal/anacal.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>

#include "tofcal/fitstat.hpp"

namespace tofcal::anacal {

Voxelization Voxelization::sipm() { return Voxelization{}; }

Voxelization Voxelization::spatial(int nx, int ny, int ndoi) {
  Voxelization v;
  v.mode = Mode::Spatial;
  v.nx = nx;
  v.ny = ny;
  v.ndoi = ndoi;
  return v;
}

int Voxelization::channel_of(const Cluster& cluster) const {
  if (mode == Mode::Sipm) {
    if (cluster.hits.empty()) throw EmptyClusterError("voxelization: empty cluster");
    return cluster.hits.front().sipm_id;
  }
  if (!cluster.has_position()) {
    throw IncompleteClusterError("voxelization: cluster lacks a position estimate");
  }
  auto axis = [](double v, int n, double lo, double hi) {
    const double rel = (v - lo) / (hi - lo) * n;
    return std::clamp(static_cast<int>(std::floor(rel)), 0, n - 1);
  };
  const int ix = axis(cluster.position_mm[0], nx, -half_extent_mm, half_extent_mm);
  const int iy = axis(cluster.position_mm[1], ny, -half_extent_mm, half_extent_mm);
  int iz = 0;
  if (ndoi > 1) {
    const double doi = std::isfinite(cluster.position_mm[2]) ? cluster.position_mm[2] : 0.0;
    iz = axis(doi, ndoi, 0.0, height_mm);
  }
  return (iz * ny + iy) * nx + ix;
}

namespace {

double truncated_mean(std::vector<double>& v) {
  // Two passes of +-2.5 sigma clipping around the running mean.
  double m = mean(v);
  double s = stddev(v);
  if (!std::isfinite(s) || s <= 0) return m;
  for (int pass = 0; pass < 2; ++pass) {
    double sum = 0;
    std::size_t n = 0;
    for (double x : v) {
      if (std::abs(x - m) <= 2.5 * s) {
        sum += x;
        ++n;
      }
    }
    if (n == 0) break;
    const double new_m = sum / static_cast<double>(n);
    double var = 0;
    for (double x : v) {
      if (std::abs(x - m) <= 2.5 * s) var += (x - new_m) * (x - new_m);
    }
    s = n > 1 ? std::sqrt(var / static_cast<double>(n - 1)) : s;
    m = new_m;
  }
  return m;
}

}  // namespace

MeanDtResult estimate_mean_dt(std::span<const Coincidence> coincidences,
                              const Voxelization& slab_vox,
                              const Voxelization& oto_vox,
                              const MeanDtOptions& opts) {
  std::map<std::pair<int, int>, std::vector<double>> bins;
  for (const Coincidence& c : coincidences) {
    const int ca = slab_vox.channel_of(c.slab);
    const int cb = oto_vox.channel_of(c.oto);
    bins[{ca, cb}].push_back(c.delta_t_meas_ps - c.label_ps);
  }
  if (bins.empty()) {
    throw EmptyCalibrationError("estimate_mean_dt: no coincidences");
  }

  MeanDtResult out;
  for (auto& [key, values] : bins) {
    if (values.size() < opts.min_bin_events) {
      ++out.skipped_bins;
      if (out.warnings.size() < 32) {
        out.warnings.push_back(
            "bin (" + std::to_string(key.first) + "," + std::to_string(key.second) +
            ") skipped: " + std::to_string(values.size()) + " events < " +
            std::to_string(opts.min_bin_events));
      }
      continue;
    }
    BinStat stat;
    stat.channel_slab = key.first;
    stat.channel_oto = key.second;
    stat.count = values.size();
    bool fitted = false;
    if (values.size() >= opts.gauss_fit_min) {
      try {
        fitstat::GaussFitOptions gopts;
        gopts.min_samples = opts.gauss_fit_min;
        const auto fit = fitstat::fit_gaussian(values, gopts);
        stat.mean_ps = fit.mu;
        stat.sigma_mean_ps =
            fit.mu_err > 0
                ? fit.mu_err
                : fit.sigma / std::sqrt(static_cast<double>(values.size()));
        fitted = true;
      } catch (const NumericalError&) {
        fitted = false;
      }
    }
    if (!fitted) {
      stat.mean_ps = truncated_mean(values);
      const double s = stddev(values);
      stat.sigma_mean_ps = (std::isfinite(s) && s > 0 ? s : 1.0) /
                           std::sqrt(static_cast<double>(values.size()));
    }
    if (stat.sigma_mean_ps <= 0 || !std::isfinite(stat.sigma_mean_ps)) {
      stat.sigma_mean_ps = 1.0;
    }
    out.bins.push_back(stat);
  }
  if (out.bins.empty()) {
    throw EmptyCalibrationError("estimate_mean_dt: all bins below minimum count");
  }
  return out;
}

Eigen::MatrixXd build_matrix(std::span<const BinStat> bins, int n_slab,
                             int n_oto) {
  Eigen::MatrixXd m = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(bins.size()),
                                            n_slab + n_oto);
  for (std::size_t r = 0; r < bins.size(); ++r) {
    m(static_cast<Eigen::Index>(r), bins[r].channel_slab) = 1.0;
    m(static_cast<Eigen::Index>(r), n_slab + bins[r].channel_oto) = -1.0;
  }
  return m;
}

CalibrationSolution solve_corrections(const Eigen::MatrixXd& m,
                                      std::span<const double> mean_dt,
                                      std::span<const double> weights,
                                      const Voxelization& slab_vox,
                                      const Voxelization& oto_vox) {
  const Eigen::Index rows = m.rows(), cols = m.cols();
  if (rows == 0) throw EmptyCalibrationError("solve_corrections: no bins");
  if (static_cast<Eigen::Index>(mean_dt.size()) != rows ||
      static_cast<Eigen::Index>(weights.size()) != rows) {
    throw std::invalid_argument("solve_corrections: dimension mismatch");
  }

  Eigen::VectorXd dt(rows), w(rows);
  for (Eigen::Index i = 0; i < rows; ++i) {
    dt(i) = mean_dt[i];
    w(i) = weights[i];
  }

  const Eigen::MatrixXd mtw = m.transpose() * w.asDiagonal();
  const Eigen::MatrixXd a = mtw * m;
  const Eigen::VectorXd b = mtw * dt;

  // Small Tikhonov damping keeps the normal equations well posed on the gauge
  // null space; iterative refinement removes the damping bias on the row
  // space, converging to the minimum-norm least-squares solution.
  const double lambda = 1e-6 * std::max(a.diagonal().maxCoeff(), 1e-30);
  Eigen::MatrixXd damped = a;
  damped.diagonal().array() += lambda;
  const auto ldlt = damped.ldlt();

  Eigen::VectorXd c = ldlt.solve(b);
  for (int it = 0; it < 4; ++it) {
    const Eigen::VectorXd r = b - a * c;
    c += ldlt.solve(r);
  }

  CalibrationSolution sol;
  sol.slab_vox = slab_vox;
  sol.oto_vox = oto_vox;
  sol.corrections_ps.assign(c.data(), c.data() + cols);

  // Gauge fix: only differences across detectors are observable, so the
  // representative with zero mean over populated channels is reported.
  std::vector<bool> populated(cols, false);
  for (Eigen::Index r = 0; r < rows; ++r) {
    for (Eigen::Index k = 0; k < cols; ++k) {
      if (m(r, k) != 0.0) populated[k] = true;
    }
  }
  double sum = 0;
  std::size_t n_pop = 0;
  for (Eigen::Index k = 0; k < cols; ++k) {
    if (populated[k]) {
      sum += sol.corrections_ps[k];
      ++n_pop;
    }
  }
  if (n_pop > 0) {
    const double shift = sum / static_cast<double>(n_pop);
    for (Eigen::Index k = 0; k < cols; ++k) {
      if (populated[k]) sol.corrections_ps[k] -= shift;
      // unpopulated channels stay at zero correction
      else sol.corrections_ps[k] = 0.0;
    }
  }

  Eigen::VectorXd cfixed(cols);
  for (Eigen::Index k = 0; k < cols; ++k) cfixed(k) = sol.corrections_ps[k];
  sol.residual_norm = (dt - m * cfixed).norm();
  return sol;
}

void apply_solution(Coincidence& c, const CalibrationSolution& sol) {
  const auto slab_corr = sol.slab_corrections();
  const auto oto_corr = sol.oto_corrections();

  auto apply_side = [](Cluster& cl, const Voxelization& vox,
                       std::span<const double> corr) {
    if (vox.mode == Voxelization::Mode::Sipm) {
      for (Hit& h : cl.hits) h.timestamp_ps -= corr[h.sipm_id];
      std::sort(cl.hits.begin(), cl.hits.end(),
                [](const Hit& a, const Hit& b) {
                  return a.timestamp_ps < b.timestamp_ps;
                });
    } else {
      const double d = corr[vox.channel_of(cl)];
      for (Hit& h : cl.hits) h.timestamp_ps -= d;
    }
  };
  apply_side(c.slab, sol.slab_vox, slab_corr);
  apply_side(c.oto, sol.oto_vox, oto_corr);
  c.delta_t_meas_ps = c.slab.first_timestamp_ps() - c.oto.first_timestamp_ps();
}

std::vector<ScheduleEntry> default_schedule() {
  std::vector<ScheduleEntry> schedule;
  schedule.push_back({Voxelization::sipm(), Voxelization::sipm()});
  schedule.push_back({Voxelization::spatial(4, 2, 2), Voxelization::spatial(4, 4)});
  schedule.push_back({Voxelization::spatial(8, 4, 3), Voxelization::spatial(8, 8)});
  return schedule;
}

ScheduleResult run_subcalibration_schedule(std::vector<Coincidence>& data,
                                           std::span<const ScheduleEntry> schedule,
                                           const MeanDtOptions& opts) {
  ScheduleResult out;
  int iteration = 0;
  for (const ScheduleEntry& entry : schedule) {
    const MeanDtResult est = estimate_mean_dt(data, entry.slab, entry.oto, opts);
    std::vector<double> dt, w;
    dt.reserve(est.bins.size());
    w.reserve(est.bins.size());
    for (const BinStat& b : est.bins) {
      dt.push_back(b.mean_ps);
      w.push_back(1.0 / (b.sigma_mean_ps * b.sigma_mean_ps));
    }
    const Eigen::MatrixXd m =
        build_matrix(est.bins, entry.slab.channel_count(), entry.oto.channel_count());
    CalibrationSolution sol = solve_corrections(m, dt, w, entry.slab, entry.oto);
    sol.iteration_index = iteration;

    for (Coincidence& c : data) apply_solution(c, sol);

    IterationStats stats;
    stats.iteration = iteration;
    stats.residual_norm = sol.residual_norm;
    stats.bins_used = est.bins.size();
    stats.bins_skipped = est.skipped_bins;
    for (double v : sol.corrections_ps) {
      stats.max_abs_correction_ps = std::max(stats.max_abs_correction_ps, std::abs(v));
    }
    // Label-compensated width documents the CTR convergence.
    std::vector<double> compensated;
    compensated.reserve(data.size());
    for (const Coincidence& c : data) {
      compensated.push_back(c.delta_t_meas_ps - c.label_ps);
    }
    try {
      fitstat::GaussFitOptions gopts;
      gopts.min_samples = 100;
      const auto fit = fitstat::fit_gaussian(compensated, gopts);
      stats.ctr_fwhm_ps = fitstat::ctr_fwhm(fit).value_ps;
    } catch (const NumericalError&) {
      stats.ctr_fwhm_ps = kNaN;
    }
    for (const auto& wmsg : est.warnings) log_debug("anacal: " + wmsg);

    out.solutions.push_back(std::move(sol));
    out.stats.push_back(stats);
    ++iteration;
  }
  return out;
}

namespace {

void save_voxelization(std::ostream& os, const Voxelization& v) {
  os << (v.mode == Voxelization::Mode::Sipm ? "sipm" : "spatial") << " " << v.nx
     << " " << v.ny << " " << v.ndoi << " " << hex_double(v.half_extent_mm)
     << " " << hex_double(v.height_mm) << "\n";
}

Voxelization load_voxelization(std::istream& is) {
  Voxelization v;
  std::string mode, he, h;
  is >> mode >> v.nx >> v.ny >> v.ndoi >> he >> h;
  v.mode = mode == "sipm" ? Voxelization::Mode::Sipm : Voxelization::Mode::Spatial;
  v.half_extent_mm = parse_hex_double(he);
  v.height_mm = parse_hex_double(h);
  return v;
}

}  // namespace

void save_solutions(std::span<const CalibrationSolution> solutions,
                    const std::string& path) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write calibration file: " + path);
  os << "tofcal-calibration 1\n";
  os << "n_iterations " << solutions.size() << "\n";
  for (const auto& sol : solutions) {
    os << "iteration " << sol.iteration_index << "\n";
    save_voxelization(os, sol.slab_vox);
    save_voxelization(os, sol.oto_vox);
    os << "residual_norm " << hex_double(sol.residual_norm) << "\n";
    os << "corrections " << sol.corrections_ps.size() << "\n";
    for (std::size_t i = 0; i < sol.corrections_ps.size(); ++i) {
      os << i << " " << hex_double(sol.corrections_ps[i]) << "\n";
    }
  }
  os << "end\n";
}

std::vector<CalibrationSolution> load_solutions(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw MissingInputError("cannot open calibration file: " + path);
  std::string tag;
  int version = 0;
  is >> tag >> version;
  if (tag != "tofcal-calibration" || version != 1) {
    throw std::runtime_error("not a tofcal-calibration v1 file: " + path);
  }
  std::string key;
  std::size_t n = 0;
  is >> key >> n;
  std::vector<CalibrationSolution> out(n);
  for (auto& sol : out) {
    is >> key >> sol.iteration_index;
    sol.slab_vox = load_voxelization(is);
    sol.oto_vox = load_voxelization(is);
    std::string v;
    is >> key >> v;
    sol.residual_norm = parse_hex_double(v);
    std::size_t nc = 0;
    is >> key >> nc;
    sol.corrections_ps.resize(nc);
    for (std::size_t i = 0; i < nc; ++i) {
      std::size_t idx;
      is >> idx >> v;
      sol.corrections_ps[i] = parse_hex_double(v);
    }
  }
  is >> key;
  if (key != "end") throw std::runtime_error("corrupt calibration file: " + path);
  return out;
}

}  // namespace tofcal::anacal
