#pragma once

#include <span>
#include <vector>

#include "tofcal/core.hpp"
#include "tofcal/gtb.hpp"

namespace tofcal::explain {

// Per-prediction additive attribution. Satisfies local accuracy:
// base_value + sum(sv) equals the model prediction.
struct ShapExplanation {
  double base_value = 0;
  std::vector<double> sv;
  std::vector<double> feature_values;
};

// Exact conditional-expectation Shapley values for one input, computed per
// tree in polynomial time with the recorded training covers as background,
// then summed over trees with learning-rate scaling.
ShapExplanation shap_values(const gtb::TreeEnsemble& ensemble,
                            std::span<const double> x);

std::vector<ShapExplanation> shap_batch(const gtb::TreeEnsemble& ensemble,
                                        const gtb::DataView& data,
                                        int threads = 1);

struct GroupImportanceRow {
  FeatureGroup group;
  std::string name;
  double mean_abs_sv = 0;
  std::size_t n_features = 0;
};

// Mean |SV| per feature set, pooling all features of a group over all
// explanations.
std::vector<GroupImportanceRow> group_importance(
    std::span<const ShapExplanation> explanations, const FeatureSchema& schema);

// Mean |SV| per individual feature.
std::vector<double> feature_importance(std::span<const ShapExplanation> explanations);

struct DependenceRow {
  double feature_value = 0;
  double sv = 0;
  double color_value = 0;
};

// Scatter table of SV(feature) against the feature value, annotated with a
// color quantity (e.g. photon count of the first-timestamp SiPM).
std::vector<DependenceRow> dependence_scan(
    std::span<const ShapExplanation> explanations, int feature_index,
    std::span<const double> color_values);

// Cover-weighted rank correlation between color value and SV inside bins of
// the feature value; the signed aggregate separates timewalk-style monotone
// dependence from antisymmetric trust-weighting effects.
double binned_rank_correlation(std::span<const DependenceRow> rows,
                               int n_bins = 20, std::size_t min_bin_count = 50);

}  // namespace tofcal::explain
