#include "tofcal/detsim.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <condition_variable>
#include <mutex>
#include <numeric>
#include <thread>

namespace tofcal::detsim {

double TimewalkModel::amplitude_ps(double photon_count) const {
  if (!enabled) return 0.0;
  const double n = std::max(photon_count, 1.0);
  return scale_ps * std::pow(ref_count / n, power);
}

double JitterModel::sigma_ps(double photon_count) const {
  const double n = std::max(photon_count, 1.0);
  return std::sqrt(floor_ps * floor_ps + scale_ps * scale_ps / n);
}

SkewModel SkewModel::zero() {
  SkewModel m;
  m.timewalk.enabled = false;
  m.photon_jitter.floor_ps = 0;
  m.photon_jitter.scale_ps = 0;
  m.rise_jitter_ps = 0;
  return m;
}

SkewModel SkewModel::with_random_skews(std::uint64_t seed, double spread_ps) {
  SkewModel m;
  Rng rng(seed, 0x5caffe11ULL, 0);
  for (auto& s : m.slab_skews_ps) s = rng.normal(0, spread_ps);
  for (auto& s : m.oto_skews_ps) s = rng.normal(0, spread_ps);
  return m;
}

void SkewModel::validate() const {
  if (photon_jitter.floor_ps < 0 || photon_jitter.scale_ps < 0 ||
      rise_jitter_ps < 0) {
    throw ConfigError("jitter widths must be non-negative");
  }
  if (timewalk.enabled && (timewalk.power <= 0 || timewalk.ref_count <= 0)) {
    throw ConfigError("timewalk must decrease with photon count");
  }
}

void SimParams::validate(double max_abs_source_z_mm) const {
  slab_geom.validate(max_abs_source_z_mm);
  oto_geom.validate(max_abs_source_z_mm);
  skew.validate();
  if (energy.photopeak_count_slab <= 0 || energy.photopeak_count_oto <= 0) {
    throw ConfigError("photopeak photon yield must be positive");
  }
  if (energy.photopeak_fraction < 0 || energy.photopeak_fraction > 1) {
    throw ConfigError("photopeak fraction must be in [0, 1]");
  }
  if (attenuation_length_mm <= 0) {
    throw ConfigError("attenuation length must be positive");
  }
  if (trigger_threshold_photons < 0) {
    throw ConfigError("trigger threshold must be non-negative");
  }
}

std::vector<double> default_z_positions() {
  std::vector<double> z;
  for (int i = 0; i < 47; ++i) z.push_back(-130.0 + 5.0 * i);
  return z;
}

std::vector<std::array<double, 2>> default_xy_grid() {
  std::vector<std::array<double, 2>> g;
  for (int i = 0; i < 5; ++i) {
    for (int j = 0; j < 5; ++j) {
      g.push_back({-12.0 + 6.0 * i, -12.0 + 6.0 * j});
    }
  }
  return g;
}

CampaignPlan CampaignPlan::defaults() {
  CampaignPlan p;
  p.z_positions_mm = default_z_positions();
  p.xy_grid_mm = default_xy_grid();
  return p;
}

void CampaignPlan::validate() const {
  if (z_positions_mm.empty() || xy_grid_mm.empty()) {
    throw ConfigError("campaign needs at least one source position");
  }
  if (events_per_point < 0 || performance_events < 0) {
    throw ConfigError("event counts must be non-negative");
  }
  const double fsum = split_train + split_validation + split_test;
  if (split_train < 0 || split_validation < 0 || split_test < 0 ||
      std::abs(fsum - 1.0) > 1e-9) {
    throw ConfigError("split fractions must be non-negative and sum to 1");
  }
}

const char* split_name(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Validation: return "validation";
    case Split::Test: return "test";
    case Split::Performance: return "performance";
  }
  return "?";
}

namespace {

constexpr double kInvSqrt2 = 0.7071067811865475244;

double gauss_integral(double lo, double hi, double mu, double sigma) {
  const double a = (lo - mu) / sigma * kInvSqrt2;
  const double b = (hi - mu) / sigma * kInvSqrt2;
  return 0.5 * (std::erf(b) - std::erf(a));
}

// Incident photons per pixel (8x8), before saturation.
void spread_light_oto(const DetectorGeometry& g, const LightModel& light,
                      double x_mm, double y_mm, double n_tot,
                      std::array<double, 64>& pix) {
  pix.fill(0.0);
  const int col = g.pixel_index_of(x_mm);
  const int row = g.pixel_index_of(y_mm);
  auto deposit = [&](int c, int r, double frac) {
    if (c < 0 || c >= 8 || r < 0 || r >= 8) return;  // lost at the edge
    pix[DetectorGeometry::pixel_id(c, r)] += frac * n_tot;
  };
  deposit(col, row, light.oto_main_fraction);
  deposit(col - 1, row, light.oto_edge_fraction);
  deposit(col + 1, row, light.oto_edge_fraction);
  deposit(col, row - 1, light.oto_edge_fraction);
  deposit(col, row + 1, light.oto_edge_fraction);
  deposit(col - 1, row - 1, light.oto_diag_fraction);
  deposit(col - 1, row + 1, light.oto_diag_fraction);
  deposit(col + 1, row - 1, light.oto_diag_fraction);
  deposit(col + 1, row + 1, light.oto_diag_fraction);
}

void spread_light_slab(const DetectorGeometry& g, const LightModel& light,
                       double x_mm, double y_mm, double doi_mm, double n_tot,
                       std::array<double, 64>& pix) {
  pix.fill(0.0);
  const int slab = g.pixel_index_of(x_mm);
  const double dist_to_sensor = g.crystal_height_mm - doi_mm;
  const double sigma =
      light.slab_sigma_base_mm + light.slab_sigma_slope * dist_to_sensor;
  std::array<double, 8> yshare;
  for (int r = 0; r < 8; ++r) {
    const double lo = -g.half_extent_mm() + g.pitch_mm * r;
    yshare[r] = gauss_integral(lo, lo + g.pitch_mm, y_mm, sigma);
  }
  auto deposit_column = [&](int c, double frac) {
    if (c < 0 || c >= 8) return;
    for (int r = 0; r < 8; ++r) {
      pix[DetectorGeometry::pixel_id(c, r)] += frac * yshare[r] * n_tot;
    }
  };
  deposit_column(slab, 1.0 - 2.0 * light.slab_column_leak);
  deposit_column(slab - 1, light.slab_column_leak);
  deposit_column(slab + 1, light.slab_column_leak);
}

double saturate_pixel(double incident, int n_spad) {
  const double n = static_cast<double>(n_spad);
  return n * (1.0 - std::exp(-incident / n));
}

struct SideResult {
  Cluster cluster;
  SimTruthSide truth;
  bool triggered = false;
};

SideResult simulate_side(DetectorId det, const std::array<double, 3>& source_mm,
                         const SimParams& p, Rng& rng, double t0_ps) {
  const DetectorGeometry& g =
      det == DetectorId::Slab ? p.slab_geom : p.oto_geom;
  const double half = g.half_extent_mm();

  // Interaction point: uniform planar entry, exponential depth truncated to
  // the crystal height.
  const double x = rng.uniform(-half, half);
  const double y = rng.uniform(-half, half);
  const double trunc = 1.0 - std::exp(-g.crystal_height_mm / p.attenuation_length_mm);
  const double doi =
      -p.attenuation_length_mm * std::log(1.0 - rng.uniform() * trunc);

  // Deposited energy: photopeak or Compton continuum.
  const bool photopeak = rng.uniform() < p.energy.photopeak_fraction;
  const double e_kev =
      photopeak ? p.energy.photopeak_kev
                : rng.uniform(p.energy.compton_min_kev, p.energy.compton_max_kev);

  const double peak_count = det == DetectorId::Slab
                                ? p.energy.photopeak_count_slab
                                : p.energy.photopeak_count_oto;
  const double res = det == DetectorId::Slab ? p.energy.resolution_slab
                                             : p.energy.resolution_oto;
  const double mu_n = peak_count * e_kev / p.energy.photopeak_kev;
  const double sigma_n =
      (res / kFwhmPerSigma) * peak_count * std::sqrt(e_kev / p.energy.photopeak_kev);
  const double n_tot = std::max(1.0, rng.normal(mu_n, sigma_n));

  std::array<double, 64> pix_incident;
  if (det == DetectorId::Slab) {
    spread_light_slab(g, p.light, x, y, doi, n_tot, pix_incident);
  } else {
    spread_light_oto(g, p.light, x, y, n_tot, pix_incident);
  }

  // Travel time along the detector axis plus the light transit from the
  // interaction depth to the sensor plane at the crystal back.
  const double axial = det == DetectorId::Slab
                           ? 0.5 * g.detector_spacing_mm - source_mm[2]
                           : 0.5 * g.detector_spacing_mm + source_mm[2];
  const double arrival =
      (axial + doi) / p.c_air_mm_per_ps +
      p.optical_delay_ps_per_mm * (g.crystal_height_mm - doi);

  const auto& skews = det == DetectorId::Slab ? p.skew.slab_skews_ps
                                              : p.skew.oto_skews_ps;
  const double rise =
      p.skew.rise_jitter_ps > 0 ? rng.normal(0, p.skew.rise_jitter_ps) : 0.0;

  SideResult out;
  out.cluster.detector_id = det;
  out.truth.x_mm = x;
  out.truth.y_mm = y;
  out.truth.doi_mm = doi;
  out.truth.energy_kev = e_kev;
  out.truth.rise_jitter_ps = rise;
  out.truth.incident_photons = n_tot;

  struct Raw {
    Hit hit;
    double skew, timewalk, jitter;
  };
  std::vector<Raw> raws;
  for (int s = 0; s < 16; ++s) {
    double incident_sipm = 0;
    for (int slot = 0; slot < 4; ++slot) {
      const auto [c, r] = DetectorGeometry::pixel_of(s, slot);
      incident_sipm += pix_incident[DetectorGeometry::pixel_id(c, r)];
    }
    // Independent SiPM operation: fires only above the trigger threshold, so
    // not every SiPM covered by the scintillator reports a hit.
    if (incident_sipm < p.trigger_threshold_photons) continue;

    const double tw = p.skew.timewalk.amplitude_ps(incident_sipm);
    const double sigma_j = p.skew.photon_jitter.sigma_ps(incident_sipm);
    const double jit = sigma_j > 0 ? rng.normal(0, sigma_j) : 0.0;

    Raw raw;
    raw.hit.sipm_id = static_cast<std::uint8_t>(s);
    raw.hit.timestamp_ps = t0_ps + arrival + rise + skews[s] + tw + jit;
    for (int slot = 0; slot < 4; ++slot) {
      const auto [c, r] = DetectorGeometry::pixel_of(s, slot);
      const double fired =
          saturate_pixel(pix_incident[DetectorGeometry::pixel_id(c, r)],
                         g.spads_per_pixel);
      raw.hit.pixel_counts[slot] = static_cast<std::uint16_t>(
          std::lround(std::clamp(fired, 0.0, 65535.0)));
    }
    raw.skew = skews[s];
    raw.timewalk = tw;
    raw.jitter = jit;
    raws.push_back(raw);
  }
  if (raws.empty()) return out;

  std::sort(raws.begin(), raws.end(), [](const Raw& a, const Raw& b) {
    return a.hit.timestamp_ps < b.hit.timestamp_ps;
  });
  for (const Raw& r : raws) {
    out.cluster.hits.push_back(r.hit);
    out.truth.hit_skew_ps.push_back(r.skew);
    out.truth.hit_timewalk_ps.push_back(r.timewalk);
    out.truth.hit_jitter_ps.push_back(r.jitter);
  }
  out.triggered = true;
  return out;
}

}  // namespace

std::optional<Coincidence> simulate_event(const std::array<double, 3>& source_mm,
                                          const SimParams& params, Rng& rng,
                                          double t0_ps) {
  SideResult slab = simulate_side(DetectorId::Slab, source_mm, params, rng, t0_ps);
  SideResult oto = simulate_side(DetectorId::OneToOne, source_mm, params, rng, t0_ps);
  if (!slab.triggered || !oto.triggered) return std::nullopt;

  Coincidence c = make_coincidence(std::move(slab.cluster), std::move(oto.cluster),
                                   source_mm, params.c_air_mm_per_ps);
  SimTruth truth;
  truth.slab = std::move(slab.truth);
  truth.oto = std::move(oto.truth);
  c.truth = std::move(truth);
  return c;
}

namespace {

struct WorkUnit {
  std::size_t point_index;
  std::array<double, 3> source;
  std::size_t first_event, n_events;
  std::size_t t0_offset;  // global event sequence offset
  bool performance;
};

}  // namespace

void run_campaign(const CampaignPlan& plan, const SimParams& params,
                  CampaignSink& sink, int threads) {
  plan.validate();
  double max_z = 0;
  for (double z : plan.z_positions_mm) max_z = std::max(max_z, std::abs(z));
  params.validate(max_z);

  std::vector<WorkUnit> units;
  std::size_t seq = 0;
  std::size_t point = 0;
  for (double z : plan.z_positions_mm) {
    for (const auto& xy : plan.xy_grid_mm) {
      if (plan.events_per_point > 0) {
        units.push_back({point, {xy[0], xy[1], z}, 0,
                         static_cast<std::size_t>(plan.events_per_point), seq,
                         false});
      }
      seq += static_cast<std::size_t>(plan.events_per_point);
      ++point;
    }
  }
  // Performance block at the iso-center, chunked for parallel generation.
  const std::size_t perf_point = point;
  constexpr std::size_t kChunk = 32768;
  for (std::size_t first = 0;
       first < static_cast<std::size_t>(plan.performance_events); first += kChunk) {
    const std::size_t n = std::min(
        kChunk, static_cast<std::size_t>(plan.performance_events) - first);
    units.push_back({perf_point, {0, 0, 0}, first, n, seq + first, true});
  }

  const double f_train = plan.split_train;
  const double f_valid = plan.split_train + plan.split_validation;

  auto generate = [&](const WorkUnit& u) {
    std::vector<std::pair<Split, Coincidence>> out;
    out.reserve(u.n_events);
    for (std::size_t e = u.first_event; e < u.first_event + u.n_events; ++e) {
      Rng rng(plan.rng_seed, u.point_index, e);
      Split split = Split::Performance;
      if (!u.performance) {
        const double s = rng.uniform();
        split = s < f_train ? Split::Train
                            : (s < f_valid ? Split::Validation : Split::Test);
      }
      const double t0 =
          static_cast<double>(u.t0_offset + (e - u.first_event)) *
          params.event_spacing_ps;
      auto ev = simulate_event(u.source, params, rng, t0);
      if (ev) out.emplace_back(split, std::move(*ev));
    }
    return out;
  };

  threads = std::max(1, threads);
  if (threads == 1 || units.size() < 2) {
    for (const auto& u : units) {
      for (auto& [split, ev] : generate(u)) sink.on_event(split, ev);
    }
    return;
  }

  // Parallel generation with strictly ordered emission.
  std::atomic<std::size_t> next_unit{0};
  std::mutex m;
  std::condition_variable cv;
  std::size_t next_emit = 0;
  auto worker = [&] {
    for (;;) {
      const std::size_t u = next_unit.fetch_add(1);
      if (u >= units.size()) return;
      auto events = generate(units[u]);
      std::unique_lock<std::mutex> lock(m);
      cv.wait(lock, [&] { return next_emit == u; });
      for (auto& [split, ev] : events) sink.on_event(split, ev);
      ++next_emit;
      cv.notify_all();
    }
  };
  std::vector<std::thread> pool;
  for (int t = 0; t < threads; ++t) pool.emplace_back(worker);
  for (auto& th : pool) th.join();
}

}  // namespace tofcal::detsim
