#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "tofcal/util.hpp"

namespace tofcal::gtb {

struct SchemaError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct HyperParams {
  int max_depth = 18;
  double learning_rate = 0.1;
  int n_max = 500;
  int early_stopping_rounds = 10;
  int min_samples_leaf = 20;
  int histogram_bins = 256;
  bool exact_splits = false;  // per-node sorted scan instead of histograms
};

// Binary regression tree node. Internal nodes route x[feature] <= threshold
// to the left child; missing values follow default_left. cover is the number
// of training samples that reached the node.
struct Node {
  int feature = -1;  // -1 marks a leaf
  double threshold = 0;
  int left = -1;
  int right = -1;
  bool default_left = true;
  double leaf_value = 0;
  double cover = 0;
  bool is_leaf() const { return feature < 0; }
};

struct Tree {
  std::vector<Node> nodes;  // nodes[0] is the root
  double predict(std::span<const double> x) const;
  double expected_value() const;  // cover-weighted mean over leaves
};

// Additive ensemble: prediction = base_score + lr * sum_k tree_k(x).
struct TreeEnsemble {
  double base_score = 0;
  double learning_rate = 0.1;
  int max_depth = 0;
  int n_features = 0;
  std::uint64_t schema_hash = 0;
  std::vector<Tree> trees;

  double predict(std::span<const double> x) const;
  double expected_value() const;
  void check_input(std::span<const double> x) const;
};

struct TrainingLog {
  std::vector<double> train_loss;  // MSE after each tree
  std::vector<double> valid_loss;
  int best_iteration = -1;         // index of the last kept tree, -1 = none
  bool early_stopped = false;
  std::vector<std::string> notes;
};

// Row-major feature matrix view with labels; NaN marks missing cells.
struct DataView {
  const double* x = nullptr;
  std::size_t n = 0;
  std::size_t m = 0;
  const double* y = nullptr;

  std::span<const double> row(std::size_t i) const { return {x + i * m, m}; }
};

// Squared-error gradient boosting with greedy variance-reduction splits,
// histogram-based candidate thresholds, missing-value routing to the
// gain-maximizing branch, and validation-loss early stopping.
TreeEnsemble train(const DataView& train_set, const DataView& valid_set,
                   const HyperParams& hp, std::uint64_t schema_hash,
                   TrainingLog* log = nullptr, int threads = 1);

struct GridResult {
  HyperParams hp;
  TreeEnsemble model;
  TrainingLog log;
  double validation_loss = kNaN;
};

std::vector<GridResult> grid_search(const DataView& train_set,
                                    const DataView& valid_set,
                                    std::span<const int> depths,
                                    std::span<const double> learning_rates,
                                    const HyperParams& base,
                                    std::uint64_t schema_hash, int threads = 1);

// Minimal validation loss; ties resolved toward smaller depth, then smaller
// learning rate.
std::size_t select_best(std::span<const GridResult> results);

void save_ensemble(const TreeEnsemble& e, std::ostream& os);
void save_ensemble(const TreeEnsemble& e, const std::string& path);
TreeEnsemble load_ensemble(std::istream& is, std::uint64_t expected_schema_hash = 0);
TreeEnsemble load_ensemble(const std::string& path, std::uint64_t expected_schema_hash = 0);

}  // namespace tofcal::gtb
