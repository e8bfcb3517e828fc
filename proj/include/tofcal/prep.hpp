#pragma once

#include <span>
#include <string>
#include <vector>

#include "tofcal/core.hpp"
#include "tofcal/gtb.hpp"

namespace tofcal::prep {

struct SortOrderError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct SaturatedChannelError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct PositionUndefinedError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Groups a time-sorted hit stream: a hit joins the open cluster iff it lies
// within the window of the cluster's first timestamp.
std::vector<Cluster> cluster_hits(std::span<const Hit> hits, DetectorId det,
                                  double window_ps = 40000.0);

struct CoincidencePair {
  std::size_t a_index;
  std::size_t b_index;
  double delta_t_ps;  // first timestamp A minus first timestamp B
};

// Merge-join over two time-sorted cluster sequences; pairs clusters whose
// first timestamps differ by at most the window. Earliest candidate wins and
// each cluster enters at most one pair.
std::vector<CoincidencePair> find_coincidences(std::span<const Cluster> a,
                                               std::span<const Cluster> b,
                                               double window_ps = 10000.0);

bool passes_noise_filter(double total_photons, double lo = 400.0,
                         double hi = 4000.0);

// SPAD saturation model and its inverse (per readout pixel).
double saturate_count(double incident, double n_spad = 3200.0);
double invert_saturation(double fired_count, double n_spad = 3200.0);

// Saturation-inverted total over all pixels of all hits.
double cluster_total_photons(const Cluster& cluster, double n_spad = 3200.0);

// ---------------------------------------------------------------------------
// Energy calibration: per-voxel photopeak location via an averaged light
// pattern; energy = 511 keV * total / peak(voxel).

struct PhotopeakFit {
  double peak = kNaN;
  double sigma = kNaN;
  std::size_t n = 0;
};

// Histogram-mode seed plus a Gaussian refit over +-1.5 sigma, iterated twice.
PhotopeakFit find_photopeak(std::span<const double> totals);

struct EnergyCalibration {
  DetectorId detector_id = DetectorId::Slab;
  int nx = 8, ny = 8, ndoi = 1;
  double half_extent_mm = 16.0;
  double height_mm = 19.0;
  double photopeak_kev = 511.0;
  std::vector<double> voxel_peak;
  std::vector<std::uint32_t> voxel_events;
  std::vector<std::uint8_t> used_fallback;
  double global_peak = kNaN;

  int n_voxels() const { return nx * ny * ndoi; }
  int voxel_of(const std::array<double, 3>& pos_mm) const;
  double estimate_energy(double total_photons,
                         const std::array<double, 3>& pos_mm) const;

  void save(const std::string& path) const;
  static EnergyCalibration load(const std::string& path);
};

// Positions must already be estimated on the input clusters. Voxels with
// fewer than min_events events fall back to the global photopeak (flagged).
EnergyCalibration calibrate_energy(std::span<const Cluster> clusters,
                                   DetectorId det, int nx, int ny, int ndoi,
                                   std::size_t min_events = 200);

// ---------------------------------------------------------------------------
// Position estimation. One-to-one: center of the highest-count pixel (ties
// resolved toward the lowest pixel index). Slab: per-axis boosted regressors
// over the light pattern, DOI included.

std::vector<double> position_features(const Cluster& cluster);
std::size_t position_feature_count();

struct SlabPositionModel {
  gtb::TreeEnsemble x_model, y_model, doi_model;

  std::array<double, 3> predict(const Cluster& cluster) const;
  void save(const std::string& path) const;
  static SlabPositionModel load(const std::string& path);
};

SlabPositionModel train_slab_position_model(
    std::span<const Cluster> clusters,
    std::span<const std::array<double, 3>> truth_positions,
    const gtb::HyperParams& hp, int threads = 1);

// slab_model may be null for one-to-one clusters.
std::array<double, 3> estimate_position(const Cluster& cluster,
                                        const DetectorGeometry& geom,
                                        const SlabPositionModel* slab_model);

}  // namespace tofcal::prep
