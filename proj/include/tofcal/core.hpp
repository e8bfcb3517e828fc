#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <vector>

#include "tofcal/util.hpp"

namespace tofcal {

enum class DetectorId : std::uint8_t { Slab = 0, OneToOne = 1 };

const char* detector_name(DetectorId id);

// Two facing detector tiles, each read out by a 4x4 array of digital SiPMs
// with 2x2 pixels per SiPM (an 8x8 pixel plane of 4 mm pitch). The crystal
// stack is 19 mm high. One detector carries a one-to-one coupled segment
// array, the other eight semi-monolithic slabs, one slab per pixel column.
struct DetectorGeometry {
  DetectorId detector_id = DetectorId::Slab;
  int n_sipms = 16;
  int pixels_per_sipm = 4;
  int spads_per_pixel = 3200;
  double crystal_height_mm = 19.0;
  double pitch_mm = 4.0;
  int slab_count = 8;
  double detector_spacing_mm = 435.0;

  static constexpr int kPixelCols = 8;
  static constexpr int kPixelRows = 8;
  static constexpr int kPixelCount = kPixelCols * kPixelRows;

  double half_extent_mm() const { return 0.5 * pitch_mm * kPixelCols; }
  double pixel_center_mm(int index) const {
    return -half_extent_mm() + pitch_mm * (static_cast<double>(index) + 0.5);
  }
  int pixel_index_of(double coord_mm) const;  // clamped to [0, 7]

  // Pixel (col,row) -> flat pixel id and owning SiPM.
  static int pixel_id(int col, int row) { return row * kPixelCols + col; }
  static int sipm_of_pixel(int col, int row) {
    return (row / 2) * 4 + (col / 2);
  }
  // Pixel slot within its SiPM, in [0, 3]: (row%2)*2 + col%2.
  static int pixel_slot(int col, int row) { return (row % 2) * 2 + (col % 2); }
  // Inverse: pixel (col,row) of a (sipm, slot) pair.
  static std::pair<int, int> pixel_of(int sipm, int slot);

  void validate(double max_abs_source_z_mm) const;
};

// One triggered SiPM record: a timestamp plus the four pixel photon counts
// (fired-SPAD counts, i.e. after saturation).
struct Hit {
  std::uint8_t sipm_id = 0;
  double timestamp_ps = 0;
  std::array<std::uint16_t, 4> pixel_counts{};
};

// All hits belonging to one gamma interaction on one detector, ordered by
// timestamp. Energy/position estimates are attached by the preprocessing
// chain; total_photons is the saturation-inverted sum over all pixels.
struct Cluster {
  DetectorId detector_id = DetectorId::Slab;
  std::vector<Hit> hits;
  double total_photons = kNaN;
  double energy_kev = kNaN;
  std::array<double, 3> position_mm{kNaN, kNaN, kNaN};  // x, y, DOI

  bool has_energy() const { return std::isfinite(energy_kev); }
  bool has_position() const;
  double first_timestamp_ps() const;
  double timestamp_spread_ps() const;
};

// Per-cluster ground truth recorded by the simulator; absent for real data.
struct SimTruthSide {
  std::vector<double> hit_skew_ps;
  std::vector<double> hit_timewalk_ps;
  std::vector<double> hit_jitter_ps;
  double x_mm = kNaN, y_mm = kNaN, doi_mm = kNaN;
  double energy_kev = kNaN;
  double rise_jitter_ps = kNaN;
  double incident_photons = kNaN;
};

struct SimTruth {
  SimTruthSide slab;
  SimTruthSide oto;
};

// A paired interaction: one cluster per detector, the measured first-timestamp
// difference (slab minus one-to-one, fixed convention), the known source
// position and the derived label.
struct Coincidence {
  Cluster slab;
  Cluster oto;
  double delta_t_meas_ps = kNaN;
  std::array<double, 3> source_pos_mm{0, 0, 0};
  double label_ps = kNaN;
  std::optional<SimTruth> truth;
};

struct EmptyClusterError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct IncompleteClusterError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Number of leading timestamps fed to the regressor: 4 for the slab detector,
// 3 for the one-to-one detector (covers roughly 80% of clusters).
int timestamp_cap(DetectorId id);

// Offsets each cluster timestamp against the cluster's earliest one, so the
// first entry is always 0. Returns at most timestamp_cap() values.
std::vector<double> process_timestamps(const Cluster& cluster);

// Expected time difference for a source at z (iso-centered axis):
// label = -2 z / c_air, in ps.
double compute_label_ps(double z_mm, double c_air_mm_per_ps = kSpeedOfLightMmPerPs);

Coincidence make_coincidence(Cluster slab, Cluster oto,
                             const std::array<double, 3>& source_pos_mm,
                             double c_air_mm_per_ps = kSpeedOfLightMmPerPs);

// ---------------------------------------------------------------------------
// Feature schema

enum class FeatureGroup : std::uint8_t {
  SharedDt = 0,   // measured first-timestamp difference
  SlabTime = 1,   // processed timestamps, SiPM ids, spread, count (slab)
  SlabEnergy = 2, // pixel photon counts of used SiPMs + calibrated energy
  SlabPos = 3,    // x, y, DOI
  OtoTime = 4,
  OtoEnergy = 5,
  OtoPos = 6,
};

const char* feature_group_name(FeatureGroup g);

namespace feat {
inline constexpr int kDtMeas = 0;
inline constexpr int kSlabTs = 1;        // 4 values
inline constexpr int kSlabTsId = 5;      // 4 values
inline constexpr int kSlabSpread = 9;
inline constexpr int kSlabNTs = 10;
inline constexpr int kSlabPix = 11;      // 4 SiPMs x 4 pixels = 16 values
inline constexpr int kSlabEnergy = 27;
inline constexpr int kSlabPos = 28;      // x, y, doi
inline constexpr int kOtoTs = 31;        // 3 values
inline constexpr int kOtoTsId = 34;      // 3 values
inline constexpr int kOtoSpread = 37;
inline constexpr int kOtoNTs = 38;
inline constexpr int kOtoPix = 39;       // 3 SiPMs x 4 pixels = 12 values
inline constexpr int kOtoEnergy = 51;
inline constexpr int kOtoPos = 52;       // x, y
inline constexpr int kCount = 54;
}  // namespace feat

struct FeatureSchema {
  std::vector<std::string> names;
  std::vector<FeatureGroup> groups;
  std::uint64_t hash = 0;

  static const FeatureSchema& standard();
};

using FeatureVector = std::array<double, feat::kCount>;

// Assembles the model input for one coincidence. Slots beyond the cluster's
// hit count are NaN (missing), never zero-filled. Requires energy and
// position estimates on both clusters.
FeatureVector build_features(const Coincidence& c);

}  // namespace tofcal
