#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "tofcal/anacal.hpp"
#include "tofcal/config.hpp"
#include "tofcal/core.hpp"
#include "tofcal/gtb.hpp"

namespace tofcal::cli {

// One pipeline run lives in a single directory with a subdirectory per
// stage; each stage reads its inputs from sibling stage directories and
// writes a versioned artifact set plus a machine-readable summary.json.
struct RunPaths {
  std::filesystem::path root;
  std::filesystem::path stage(const std::string& name) const {
    return root / name;
  }
  std::filesystem::path summary(const std::string& name) const {
    return root / name / "summary.json";
  }
};

nlohmann::json stage_simulate(const PipelineConfig& cfg, const RunPaths& paths);
nlohmann::json stage_preprocess(const PipelineConfig& cfg, const RunPaths& paths);
nlohmann::json stage_calibrate(const PipelineConfig& cfg, const RunPaths& paths);
nlohmann::json stage_train(const PipelineConfig& cfg, const RunPaths& paths);
nlohmann::json stage_evaluate(const PipelineConfig& cfg, const RunPaths& paths);
nlohmann::json stage_explain(const PipelineConfig& cfg, const RunPaths& paths);
nlohmann::json stage_report(const PipelineConfig& cfg, const RunPaths& paths);

void run_all_stages(const PipelineConfig& cfg, const RunPaths& paths);

// Shipped summary schema for a stage; throws for unknown stages.
const nlohmann::json& stage_schema(const std::string& stage);

// ---------------------------------------------------------------------------
// Helpers shared with tests and the acceptance suite.

struct FeatureMatrix {
  std::vector<double> x;  // row-major n x m
  std::vector<double> y;
  std::size_t n = 0;
  std::size_t m = 0;
  gtb::DataView view() const { return {x.data(), n, m, y.data()}; }
};

FeatureMatrix build_feature_matrix(std::span<const Coincidence> events);

void apply_calibration(std::vector<Coincidence>& events,
                       std::span<const anacal::CalibrationSolution> solutions);

bool in_energy_window(const Coincidence& c, double lo_kev, double hi_kev);

std::string model_file_name(int depth, double learning_rate);

// Seeded subset of [0, n) without replacement, in selection order.
std::vector<std::size_t> seeded_subset(std::size_t n, std::size_t k,
                                       std::uint64_t seed);

// The preprocessing chain on one raw dataset: stream re-clustering,
// coincidence pairing, noise filtering, totals, and record matching.
// Returns kept events (clusters carry total_photons) in record order.
std::vector<Coincidence> preprocess_events(std::vector<Coincidence> records,
                                           const PipelineConfig& cfg,
                                           std::size_t* dropped = nullptr);

}  // namespace tofcal::cli
