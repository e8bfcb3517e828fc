#include "tofcal/prep.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "tofcal/fitstat.hpp"

namespace tofcal::prep {

std::vector<Cluster> cluster_hits(std::span<const Hit> hits, DetectorId det,
                                  double window_ps) {
  std::vector<Cluster> clusters;
  double prev_ts = -std::numeric_limits<double>::infinity();
  for (const Hit& h : hits) {
    if (h.timestamp_ps < prev_ts) {
      throw SortOrderError("cluster_hits: input hits not time-sorted");
    }
    prev_ts = h.timestamp_ps;
    if (clusters.empty() ||
        h.timestamp_ps - clusters.back().hits.front().timestamp_ps > window_ps) {
      Cluster c;
      c.detector_id = det;
      clusters.push_back(std::move(c));
    }
    clusters.back().hits.push_back(h);
  }
  return clusters;
}

std::vector<CoincidencePair> find_coincidences(std::span<const Cluster> a,
                                               std::span<const Cluster> b,
                                               double window_ps) {
  std::vector<CoincidencePair> pairs;
  std::size_t i = 0, j = 0;
  while (i < a.size() && j < b.size()) {
    const double ta = a[i].first_timestamp_ps();
    const double tb = b[j].first_timestamp_ps();
    const double dt = ta - tb;
    if (std::abs(dt) <= window_ps) {
      pairs.push_back({i, j, dt});
      ++i;
      ++j;
    } else if (ta < tb) {
      ++i;
    } else {
      ++j;
    }
  }
  return pairs;
}

bool passes_noise_filter(double total_photons, double lo, double hi) {
  return std::isfinite(total_photons) && total_photons >= lo &&
         total_photons <= hi;
}

double saturate_count(double incident, double n_spad) {
  return n_spad * (1.0 - std::exp(-incident / n_spad));
}

double invert_saturation(double fired_count, double n_spad) {
  if (fired_count < 0 || fired_count >= n_spad) {
    throw SaturatedChannelError(
        "invert_saturation: count " + std::to_string(fired_count) +
        " outside [0, " + std::to_string(n_spad) + ")");
  }
  return -n_spad * std::log(1.0 - fired_count / n_spad);
}

double cluster_total_photons(const Cluster& cluster, double n_spad) {
  double total = 0;
  for (const Hit& h : cluster.hits) {
    for (std::uint16_t c : h.pixel_counts) {
      const double fired = std::min<double>(c, n_spad - 1.0);
      total += -n_spad * std::log(1.0 - fired / n_spad);
    }
  }
  return total;
}

PhotopeakFit find_photopeak(std::span<const double> totals) {
  PhotopeakFit out;
  out.n = totals.size();
  if (totals.size() < 50) return out;

  // Fixed-width binning keeps the mode search stable on small voxels where
  // Freedman-Diaconis widths blow up on the bimodal spectrum.
  double lo = totals[0], hi = totals[0];
  for (double t : totals) {
    lo = std::min(lo, t);
    hi = std::max(hi, t);
  }
  const double width = std::max((hi - lo) / 120.0, 1e-9);
  const auto hist = fitstat::make_histogram(totals, width);

  // 3-bin smoothed mode as the seed.
  std::size_t mode = 0;
  double best = -1;
  for (std::size_t i = 0; i < hist.counts.size(); ++i) {
    double s = hist.counts[i];
    if (i > 0) s += hist.counts[i - 1];
    if (i + 1 < hist.counts.size()) s += hist.counts[i + 1];
    if (s > best) {
      best = s;
      mode = i;
    }
  }
  double mu = hist.bin_center(mode);
  double sigma = 0.05 * std::max(mu, 1.0);

  // Two refit rounds over +-1.5 sigma around the current peak keep the
  // Compton shoulder out of the fit window.
  for (int round = 0; round < 2; ++round) {
    fitstat::GaussFitOptions opts;
    opts.min_samples = 20;
    opts.fit_range_lo = mu - 1.5 * sigma;
    opts.fit_range_hi = mu + 1.5 * sigma;
    const double amp0 = std::max(hist.counts[mode], 1.0);
    try {
      const auto fit = fitstat::fit_gaussian_hist(hist, amp0, mu, sigma, opts);
      mu = fit.mu;
      sigma = fit.sigma;
    } catch (const NumericalError&) {
      // keep the seed from the previous round
      break;
    }
  }
  out.peak = mu;
  out.sigma = sigma;
  return out;
}

int EnergyCalibration::voxel_of(const std::array<double, 3>& pos_mm) const {
  auto axis = [&](double v, int n, double lo, double hi) {
    const double rel = (v - lo) / (hi - lo) * n;
    return std::clamp(static_cast<int>(std::floor(rel)), 0, n - 1);
  };
  const int ix = axis(pos_mm[0], nx, -half_extent_mm, half_extent_mm);
  const int iy = axis(pos_mm[1], ny, -half_extent_mm, half_extent_mm);
  int iz = 0;
  if (ndoi > 1) {
    iz = axis(std::isfinite(pos_mm[2]) ? pos_mm[2] : 0.0, ndoi, 0.0, height_mm);
  }
  return (iz * ny + iy) * nx + ix;
}

double EnergyCalibration::estimate_energy(
    double total_photons, const std::array<double, 3>& pos_mm) const {
  const int v = voxel_of(pos_mm);
  const double peak = std::isfinite(voxel_peak[v]) ? voxel_peak[v] : global_peak;
  if (!std::isfinite(peak) || peak <= 0) {
    throw NumericalError("energy calibration has no usable photopeak");
  }
  return photopeak_kev * total_photons / peak;
}

EnergyCalibration calibrate_energy(std::span<const Cluster> clusters,
                                   DetectorId det, int nx, int ny, int ndoi,
                                   std::size_t min_events) {
  EnergyCalibration cal;
  cal.detector_id = det;
  cal.nx = nx;
  cal.ny = ny;
  cal.ndoi = ndoi;
  cal.voxel_peak.assign(cal.n_voxels(), kNaN);
  cal.voxel_events.assign(cal.n_voxels(), 0);
  cal.used_fallback.assign(cal.n_voxels(), 0);

  std::vector<std::vector<double>> by_voxel(cal.n_voxels());
  std::vector<std::vector<double>> by_column(nx * ny);  // pooled over DOI
  std::vector<double> all;
  all.reserve(clusters.size());
  for (const Cluster& c : clusters) {
    if (!c.has_position() || !std::isfinite(c.total_photons)) continue;
    const int v = cal.voxel_of(c.position_mm);
    by_voxel[v].push_back(c.total_photons);
    by_column[v % (nx * ny)].push_back(c.total_photons);
    all.push_back(c.total_photons);
  }
  const auto global = find_photopeak(all);
  cal.global_peak = global.peak;

  // Fallback order for starved voxels: DOI-pooled column, then global.
  std::vector<double> column_peak(nx * ny, kNaN);
  for (int cidx = 0; cidx < nx * ny; ++cidx) {
    if (by_column[cidx].size() >= min_events) {
      const auto fit = find_photopeak(by_column[cidx]);
      if (std::isfinite(fit.peak) && fit.peak > 0) column_peak[cidx] = fit.peak;
    }
  }

  for (int v = 0; v < cal.n_voxels(); ++v) {
    cal.voxel_events[v] = static_cast<std::uint32_t>(by_voxel[v].size());
    if (by_voxel[v].size() >= min_events) {
      const auto fit = find_photopeak(by_voxel[v]);
      if (std::isfinite(fit.peak) && fit.peak > 0) {
        cal.voxel_peak[v] = fit.peak;
        continue;
      }
    }
    cal.used_fallback[v] = 1;
    const double col = column_peak[v % (nx * ny)];
    if (std::isfinite(col)) cal.voxel_peak[v] = col;
  }
  return cal;
}

void EnergyCalibration::save(const std::string& path) const {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write energy calibration: " + path);
  os << "tofcal-energy-cal 1\n";
  os << "detector " << detector_name(detector_id) << "\n";
  os << "grid " << nx << " " << ny << " " << ndoi << "\n";
  os << "bounds " << hex_double(half_extent_mm) << " " << hex_double(height_mm)
     << "\n";
  os << "photopeak_kev " << hex_double(photopeak_kev) << "\n";
  os << "global_peak " << hex_double(global_peak) << "\n";
  for (int v = 0; v < n_voxels(); ++v) {
    os << v << " " << hex_double(voxel_peak[v]) << " " << voxel_events[v] << " "
       << static_cast<int>(used_fallback[v]) << "\n";
  }
  os << "end\n";
}

EnergyCalibration EnergyCalibration::load(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw MissingInputError("cannot open energy calibration: " + path);
  std::string tag, det, key, v1, v2;
  int version = 0;
  is >> tag >> version;
  if (tag != "tofcal-energy-cal" || version != 1) {
    throw std::runtime_error("not a tofcal-energy-cal v1 file: " + path);
  }
  EnergyCalibration cal;
  is >> key >> det;
  cal.detector_id = det == "slab" ? DetectorId::Slab : DetectorId::OneToOne;
  is >> key >> cal.nx >> cal.ny >> cal.ndoi;
  is >> key >> v1 >> v2;
  cal.half_extent_mm = parse_hex_double(v1);
  cal.height_mm = parse_hex_double(v2);
  is >> key >> v1;
  cal.photopeak_kev = parse_hex_double(v1);
  is >> key >> v1;
  cal.global_peak = parse_hex_double(v1);
  cal.voxel_peak.assign(cal.n_voxels(), kNaN);
  cal.voxel_events.assign(cal.n_voxels(), 0);
  cal.used_fallback.assign(cal.n_voxels(), 0);
  for (int v = 0; v < cal.n_voxels(); ++v) {
    int idx = 0, fb = 0;
    std::string peak;
    is >> idx >> peak >> cal.voxel_events[v] >> fb;
    cal.voxel_peak[v] = parse_hex_double(peak);
    cal.used_fallback[v] = static_cast<std::uint8_t>(fb);
  }
  return cal;
}

std::size_t position_feature_count() { return 65; }

std::vector<double> position_features(const Cluster& cluster) {
  // 64 pixel shares of the total light plus the total itself.
  std::vector<double> f(65, 0.0);
  double total = 0;
  for (const Hit& h : cluster.hits) {
    for (int slot = 0; slot < 4; ++slot) {
      const auto [c, r] = DetectorGeometry::pixel_of(h.sipm_id, slot);
      const double fired = std::min<double>(h.pixel_counts[slot], 3199.0);
      const double inv = -3200.0 * std::log(1.0 - fired / 3200.0);
      f[DetectorGeometry::pixel_id(c, r)] += inv;
      total += inv;
    }
  }
  if (total > 0) {
    for (int i = 0; i < 64; ++i) f[i] /= total;
  }
  f[64] = total;
  return f;
}

std::array<double, 3> SlabPositionModel::predict(const Cluster& cluster) const {
  const auto f = position_features(cluster);
  return {x_model.predict(f), y_model.predict(f), doi_model.predict(f)};
}

void SlabPositionModel::save(const std::string& path) const {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write position model: " + path);
  os << "tofcal-slab-position 1\n";
  gtb::save_ensemble(x_model, os);
  gtb::save_ensemble(y_model, os);
  gtb::save_ensemble(doi_model, os);
}

SlabPositionModel SlabPositionModel::load(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw MissingInputError("cannot open position model: " + path);
  std::string tag;
  int version = 0;
  is >> tag >> version;
  if (tag != "tofcal-slab-position" || version != 1) {
    throw std::runtime_error("not a tofcal-slab-position v1 file: " + path);
  }
  SlabPositionModel m;
  m.x_model = gtb::load_ensemble(is);
  m.y_model = gtb::load_ensemble(is);
  m.doi_model = gtb::load_ensemble(is);
  return m;
}

SlabPositionModel train_slab_position_model(
    std::span<const Cluster> clusters,
    std::span<const std::array<double, 3>> truth_positions,
    const gtb::HyperParams& hp, int threads) {
  if (clusters.size() != truth_positions.size() || clusters.empty()) {
    throw std::invalid_argument("position model: empty or mismatched inputs");
  }
  const std::size_t m = position_feature_count();
  const std::size_t n = clusters.size();
  std::vector<double> X(n * m);
  std::vector<double> yx(n), yy(n), yd(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto f = position_features(clusters[i]);
    std::copy(f.begin(), f.end(), X.begin() + i * m);
    yx[i] = truth_positions[i][0];
    yy[i] = truth_positions[i][1];
    yd[i] = truth_positions[i][2];
  }
  // Hold out a tail slice for early stopping.
  const std::size_t n_valid = std::max<std::size_t>(1, n / 5);
  const std::size_t n_train = n - n_valid;
  const std::uint64_t schema_hash = fnv1a(std::string("slab-position-v1"));

  auto fit = [&](std::vector<double>& y) {
    gtb::DataView train_view{X.data(), n_train, m, y.data()};
    gtb::DataView valid_view{X.data() + n_train * m, n_valid, m,
                             y.data() + n_train};
    return gtb::train(train_view, valid_view, hp, schema_hash, nullptr, threads);
  };
  SlabPositionModel model;
  model.x_model = fit(yx);
  model.y_model = fit(yy);
  model.doi_model = fit(yd);
  return model;
}

std::array<double, 3> estimate_position(const Cluster& cluster,
                                        const DetectorGeometry& geom,
                                        const SlabPositionModel* slab_model) {
  bool any_nonzero = false;
  for (const Hit& h : cluster.hits) {
    for (std::uint16_t c : h.pixel_counts) {
      if (c > 0) any_nonzero = true;
    }
  }
  if (!any_nonzero) {
    throw PositionUndefinedError("estimate_position: all pixel counts zero");
  }

  if (cluster.detector_id == DetectorId::OneToOne) {
    int best_pixel = -1;
    std::uint32_t best_count = 0;
    for (const Hit& h : cluster.hits) {
      for (int slot = 0; slot < 4; ++slot) {
        const auto [c, r] = DetectorGeometry::pixel_of(h.sipm_id, slot);
        const int pid = DetectorGeometry::pixel_id(c, r);
        const std::uint32_t count = h.pixel_counts[slot];
        if (count > best_count ||
            (count == best_count && count > 0 &&
             (best_pixel < 0 || pid < best_pixel))) {
          best_count = count;
          best_pixel = pid;
        }
      }
    }
    const int col = best_pixel % 8, row = best_pixel / 8;
    return {geom.pixel_center_mm(col), geom.pixel_center_mm(row), kNaN};
  }

  if (!slab_model) {
    throw MissingInputError("estimate_position: slab position model required");
  }
  return slab_model->predict(cluster);
}

}  // namespace tofcal::prep
