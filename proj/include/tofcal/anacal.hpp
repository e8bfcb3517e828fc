#pragma once

#include <Eigen/Dense>
#include <span>
#include <string>
#include <vector>

#include "tofcal/core.hpp"

namespace tofcal::anacal {

struct EmptyCalibrationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Calibration channels for one detector: either the SiPM that produced the
// cluster's first timestamp, or an axis-aligned spatial voxel of the crystal
// volume (with optional DOI binning for the slab).
struct Voxelization {
  enum class Mode { Sipm, Spatial } mode = Mode::Sipm;
  int nx = 1, ny = 1, ndoi = 1;
  double half_extent_mm = 16.0;
  double height_mm = 19.0;

  int channel_count() const {
    return mode == Mode::Sipm ? 16 : nx * ny * ndoi;
  }
  int channel_of(const Cluster& cluster) const;

  static Voxelization sipm();
  static Voxelization spatial(int nx, int ny, int ndoi = 1);
};

struct MeanDtOptions {
  std::size_t min_bin_events = 50;
  std::size_t gauss_fit_min = 200;  // below: truncated mean
};

struct BinStat {
  int channel_slab = 0;
  int channel_oto = 0;
  double mean_ps = 0;       // label-compensated mean of delta_t
  double sigma_mean_ps = 0;
  std::size_t count = 0;
};

struct MeanDtResult {
  std::vector<BinStat> bins;
  std::size_t skipped_bins = 0;
  std::vector<std::string> warnings;
};

// Label-compensated mean time difference per populated channel combination:
// Gaussian-fit mean for well-populated bins, truncated mean otherwise.
MeanDtResult estimate_mean_dt(std::span<const Coincidence> coincidences,
                              const Voxelization& slab_vox,
                              const Voxelization& oto_vox,
                              const MeanDtOptions& opts = {});

// One row per populated bin: +1 in the slab channel column, -1 in the
// one-to-one channel column (delta_t = t_slab - t_oto).
Eigen::MatrixXd build_matrix(std::span<const BinStat> bins, int n_slab,
                             int n_oto);

// One sub-calibration result: corrections per channel (slab channels first),
// gauge-fixed to zero mean over all populated channels.
struct CalibrationSolution {
  Voxelization slab_vox, oto_vox;
  std::vector<double> corrections_ps;  // slab block then oto block
  double residual_norm = 0;
  int iteration_index = 0;

  std::span<const double> slab_corrections() const {
    return {corrections_ps.data(),
            static_cast<std::size_t>(slab_vox.channel_count())};
  }
  std::span<const double> oto_corrections() const {
    return {corrections_ps.data() + slab_vox.channel_count(),
            static_cast<std::size_t>(oto_vox.channel_count())};
  }
};

// Weighted least squares through damped normal equations plus iterative
// refinement (exact on noise-free consistent systems); weights = 1/sigma^2
// of the bin means.
CalibrationSolution solve_corrections(const Eigen::MatrixXd& m,
                                      std::span<const double> mean_dt,
                                      std::span<const double> weights,
                                      const Voxelization& slab_vox,
                                      const Voxelization& oto_vox);

// Subtracts the channel correction from every hit timestamp of the matching
// cluster (per-hit SiPM channel in Sipm mode, the cluster's voxel otherwise)
// and recomputes the measured time difference.
void apply_solution(Coincidence& c, const CalibrationSolution& sol);

struct ScheduleEntry {
  Voxelization slab, oto;
};

// Per-SiPM channels first (signal propagation skews), then spatial voxels of
// increasing resolution with DOI bins for the slab.
std::vector<ScheduleEntry> default_schedule();

struct IterationStats {
  int iteration = 0;
  double max_abs_correction_ps = 0;
  double residual_norm = 0;
  double ctr_fwhm_ps = kNaN;  // label-compensated, after this iteration
  std::size_t bins_used = 0;
  std::size_t bins_skipped = 0;
};

struct ScheduleResult {
  std::vector<CalibrationSolution> solutions;
  std::vector<IterationStats> stats;
};

// Runs the sub-calibrations in order, applying each solution to the dataset
// before estimating the next one. `data` ends up fully corrected.
ScheduleResult run_subcalibration_schedule(std::vector<Coincidence>& data,
                                           std::span<const ScheduleEntry> schedule,
                                           const MeanDtOptions& opts = {});

void save_solutions(std::span<const CalibrationSolution> solutions,
                    const std::string& path);
std::vector<CalibrationSolution> load_solutions(const std::string& path);

}  // namespace tofcal::anacal
