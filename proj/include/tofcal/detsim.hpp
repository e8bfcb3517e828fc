#pragma once

#include <array>
#include <optional>
#include <vector>

#include "tofcal/core.hpp"
#include "tofcal/util.hpp"

namespace tofcal::detsim {

// Timewalk amplitude: scale * (ref_count / n)^power, strictly decreasing in
// the photon count and vanishing for bright hits.
struct TimewalkModel {
  bool enabled = true;
  double scale_ps = 60.0;
  double ref_count = 2000.0;
  double power = 0.7;
  double amplitude_ps(double photon_count) const;
};

// Per-hit timestamp noise, sigma(n) = sqrt(floor^2 + scale^2 / n).
struct JitterModel {
  double floor_ps = 45.0;
  double scale_ps = 1600.0;
  double sigma_ps(double photon_count) const;
};

struct SkewModel {
  std::array<double, 16> slab_skews_ps{};
  std::array<double, 16> oto_skews_ps{};
  TimewalkModel timewalk;
  JitterModel photon_jitter;
  double rise_jitter_ps = 22.0;  // per-cluster scintillation onset spread

  static SkewModel zero();
  // Fixed channel skews drawn once from N(0, spread) per SiPM.
  static SkewModel with_random_skews(std::uint64_t seed, double spread_ps);
  void validate() const;
};

// Light collection shares. One-to-one: dominant share on the covered pixel,
// small leakage to the neighbours; slab: 1D Gaussian spread along the slab
// with a DOI-dependent width plus leakage into adjacent slab columns. Light
// falling outside the crystal is lost (not renormalised).
struct LightModel {
  double oto_main_fraction = 0.90;
  double oto_edge_fraction = 0.018;   // per edge-adjacent pixel (x4)
  double oto_diag_fraction = 0.007;   // per diagonal pixel (x4)
  double slab_sigma_base_mm = 1.4;
  double slab_sigma_slope = 0.26;     // per mm of distance from the sensor
  double slab_column_leak = 0.06;     // per adjacent slab column
};

struct EnergyModel {
  double photopeak_kev = 511.0;
  double photopeak_fraction = 0.62;
  double compton_min_kev = 50.0;
  double compton_max_kev = 340.0;
  double photopeak_count_slab = 2300.0;  // detected-photon scale at 511 keV
  double photopeak_count_oto = 2800.0;
  double resolution_slab = 0.113;        // FWHM / mean at the photopeak
  double resolution_oto = 0.104;
};

struct SimParams {
  DetectorGeometry slab_geom{DetectorId::Slab};
  DetectorGeometry oto_geom{DetectorId::OneToOne};
  SkewModel skew;
  LightModel light;
  EnergyModel energy;
  double attenuation_length_mm = 12.0;
  double optical_delay_ps_per_mm = 6.0;  // light transit from DOI to sensor
  double trigger_threshold_photons = 50.0;
  double c_air_mm_per_ps = kSpeedOfLightMmPerPs;
  double event_spacing_ps = 1.0e6;

  void validate(double max_abs_source_z_mm) const;
};

// Measurement campaign: z scan with an xy grid per z position, plus a
// separate performance block at the iso-center.
struct CampaignPlan {
  std::vector<double> z_positions_mm;
  std::vector<std::array<double, 2>> xy_grid_mm;
  int events_per_point = 80;
  std::uint64_t rng_seed = 1;
  double split_train = 0.6;
  double split_validation = 0.2;
  double split_test = 0.2;
  int performance_events = 100000;

  static CampaignPlan defaults();
  std::size_t n_grid_points() const {
    return z_positions_mm.size() * xy_grid_mm.size();
  }
  void validate() const;
};

std::vector<double> default_z_positions();             // -130..100 mm, 5 mm steps
std::vector<std::array<double, 2>> default_xy_grid();  // 5x5, -12..12 mm

enum class Split : int { Train = 0, Validation = 1, Test = 2, Performance = 3 };
const char* split_name(Split s);

// Simulates one coincidence. Returns nullopt when a side fails to trigger.
// Timestamps are offset by t0_ps so campaign output forms a merged stream.
std::optional<Coincidence> simulate_event(const std::array<double, 3>& source_mm,
                                          const SimParams& params, Rng& rng,
                                          double t0_ps = 0.0);

struct CampaignSink {
  virtual ~CampaignSink() = default;
  virtual void on_event(Split split, const Coincidence& c) = 0;
};

// Deterministic for a fixed seed independent of thread count: event RNG
// streams are keyed by (seed, grid point, event index) and emission is
// committed in plan order.
void run_campaign(const CampaignPlan& plan, const SimParams& params,
                  CampaignSink& sink, int threads = 1);

}  // namespace tofcal::detsim
