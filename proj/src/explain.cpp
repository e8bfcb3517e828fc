#include "tofcal/explain.hpp"

#include <algorithm>
#include <cmath>
#include <thread>

namespace tofcal::explain {

namespace {

// Element of the unique feature path maintained while descending a tree.
// zero_fraction: share of background samples flowing through when the
// feature is unknown; one_fraction: 1 while x follows the path, 0 on the
// excluded branch; pweight: permutation weight bookkeeping.
struct PathElement {
  int feature_index = -1;
  double zero_fraction = 0;
  double one_fraction = 0;
  double pweight = 0;
};

void extend_path(PathElement* path, int unique_depth, double zero_fraction,
                 double one_fraction, int feature_index) {
  path[unique_depth].feature_index = feature_index;
  path[unique_depth].zero_fraction = zero_fraction;
  path[unique_depth].one_fraction = one_fraction;
  path[unique_depth].pweight = unique_depth == 0 ? 1.0 : 0.0;
  for (int i = unique_depth - 1; i >= 0; --i) {
    path[i + 1].pweight +=
        one_fraction * path[i].pweight * (i + 1) / static_cast<double>(unique_depth + 1);
    path[i].pweight = zero_fraction * path[i].pweight * (unique_depth - i) /
                      static_cast<double>(unique_depth + 1);
  }
}

void unwind_path(PathElement* path, int unique_depth, int path_index) {
  const double one_fraction = path[path_index].one_fraction;
  const double zero_fraction = path[path_index].zero_fraction;
  double next_one_portion = path[unique_depth].pweight;
  for (int i = unique_depth - 1; i >= 0; --i) {
    if (one_fraction != 0) {
      const double tmp = path[i].pweight;
      path[i].pweight = next_one_portion * (unique_depth + 1) /
                        static_cast<double>((i + 1) * one_fraction);
      next_one_portion = tmp - path[i].pweight * zero_fraction * (unique_depth - i) /
                         static_cast<double>(unique_depth + 1);
    } else {
      path[i].pweight = path[i].pweight * (unique_depth + 1) /
                        (zero_fraction * (unique_depth - i));
    }
  }
  for (int i = path_index; i < unique_depth; ++i) {
    path[i].feature_index = path[i + 1].feature_index;
    path[i].zero_fraction = path[i + 1].zero_fraction;
    path[i].one_fraction = path[i + 1].one_fraction;
  }
}

double unwound_path_sum(const PathElement* path, int unique_depth, int path_index) {
  const double one_fraction = path[path_index].one_fraction;
  const double zero_fraction = path[path_index].zero_fraction;
  double next_one_portion = path[unique_depth].pweight;
  double total = 0;
  if (one_fraction != 0) {
    for (int i = unique_depth - 1; i >= 0; --i) {
      const double tmp = next_one_portion * (unique_depth + 1) /
                         static_cast<double>((i + 1) * one_fraction);
      total += tmp;
      next_one_portion = path[i].pweight - tmp * zero_fraction * (unique_depth - i) /
                         static_cast<double>(unique_depth + 1);
    }
  } else {
    for (int i = unique_depth - 1; i >= 0; --i) {
      total += path[i].pweight * (unique_depth + 1) /
               (zero_fraction * (unique_depth - i));
    }
  }
  return total;
}

void tree_shap_recurse(const gtb::Tree& tree, std::span<const double> x,
                       double* phi, int node_index, int unique_depth,
                       PathElement* parent_path, double parent_zero_fraction,
                       double parent_one_fraction, int parent_feature_index) {
  const gtb::Node& node = tree.nodes[node_index];
  PathElement* path = parent_path + unique_depth + 1;
  std::copy(parent_path, parent_path + unique_depth + 1, path);
  extend_path(path, unique_depth, parent_zero_fraction, parent_one_fraction,
              parent_feature_index);

  if (node.is_leaf()) {
    for (int i = 1; i <= unique_depth; ++i) {
      const double w = unwound_path_sum(path, unique_depth, i);
      phi[path[i].feature_index] +=
          w * (path[i].one_fraction - path[i].zero_fraction) * node.leaf_value;
    }
    return;
  }

  const double v = x[node.feature];
  int hot, cold;
  if (std::isnan(v)) {
    hot = node.default_left ? node.left : node.right;
  } else {
    hot = v <= node.threshold ? node.left : node.right;
  }
  cold = hot == node.left ? node.right : node.left;

  const double hot_zero_fraction = tree.nodes[hot].cover / node.cover;
  const double cold_zero_fraction = tree.nodes[cold].cover / node.cover;
  double incoming_zero_fraction = 1.0;
  double incoming_one_fraction = 1.0;

  // If this feature was already split on above, undo its factor and fold it
  // into the new contribution.
  int path_index = 0;
  for (; path_index <= unique_depth; ++path_index) {
    if (path[path_index].feature_index == node.feature) break;
  }
  if (path_index != unique_depth + 1) {
    incoming_zero_fraction = path[path_index].zero_fraction;
    incoming_one_fraction = path[path_index].one_fraction;
    unwind_path(path, unique_depth, path_index);
    unique_depth -= 1;
  }

  tree_shap_recurse(tree, x, phi, hot, unique_depth + 1, path,
                    hot_zero_fraction * incoming_zero_fraction,
                    incoming_one_fraction, node.feature);
  tree_shap_recurse(tree, x, phi, cold, unique_depth + 1, path,
                    cold_zero_fraction * incoming_zero_fraction, 0.0,
                    node.feature);
}

int tree_max_depth(const gtb::Tree& tree, int node, int depth) {
  const gtb::Node& n = tree.nodes[node];
  if (n.is_leaf()) return depth;
  return std::max(tree_max_depth(tree, n.left, depth + 1),
                  tree_max_depth(tree, n.right, depth + 1));
}

}  // namespace

ShapExplanation shap_values(const gtb::TreeEnsemble& ensemble,
                            std::span<const double> x) {
  ensemble.check_input(x);
  ShapExplanation out;
  out.sv.assign(x.size(), 0.0);
  out.feature_values.assign(x.begin(), x.end());
  out.base_value = ensemble.expected_value();

  std::vector<double> phi(x.size());
  std::vector<PathElement> buffer;
  for (const gtb::Tree& tree : ensemble.trees) {
    const int depth = tree_max_depth(tree, 0, 0) + 2;
    const std::size_t need = static_cast<std::size_t>(depth) * (depth + 1);
    if (buffer.size() < need) buffer.resize(need);
    std::fill(phi.begin(), phi.end(), 0.0);
    tree_shap_recurse(tree, x, phi.data(), 0, 0, buffer.data(), 1.0, 1.0, -1);
    for (std::size_t f = 0; f < x.size(); ++f) {
      out.sv[f] += ensemble.learning_rate * phi[f];
    }
  }
  return out;
}

std::vector<ShapExplanation> shap_batch(const gtb::TreeEnsemble& ensemble,
                                        const gtb::DataView& data, int threads) {
  std::vector<ShapExplanation> out(data.n);
  auto run = [&](std::size_t i0, std::size_t i1) {
    for (std::size_t i = i0; i < i1; ++i) {
      out[i] = shap_values(ensemble, data.row(i));
    }
  };
  threads = std::max(1, threads);
  if (threads == 1 || data.n < 64) {
    run(0, data.n);
  } else {
    std::vector<std::thread> pool;
    const std::size_t chunk = (data.n + threads - 1) / threads;
    for (int t = 0; t < threads; ++t) {
      const std::size_t i0 = std::min(data.n, chunk * t);
      const std::size_t i1 = std::min(data.n, i0 + chunk);
      if (i0 < i1) pool.emplace_back(run, i0, i1);
    }
    for (auto& th : pool) th.join();
  }
  return out;
}

std::vector<GroupImportanceRow> group_importance(
    std::span<const ShapExplanation> explanations, const FeatureSchema& schema) {
  if (explanations.empty()) {
    throw std::invalid_argument("group_importance: empty explanation batch");
  }
  constexpr int kGroups = 7;
  std::array<double, kGroups> sums{};
  std::array<std::size_t, kGroups> counts{};
  std::array<std::size_t, kGroups> n_feats{};
  for (std::size_t f = 0; f < schema.groups.size(); ++f) {
    ++n_feats[static_cast<int>(schema.groups[f])];
  }
  for (const auto& e : explanations) {
    for (std::size_t f = 0; f < e.sv.size(); ++f) {
      const int g = static_cast<int>(schema.groups[f]);
      sums[g] += std::abs(e.sv[f]);
      ++counts[g];
    }
  }
  std::vector<GroupImportanceRow> rows;
  for (int g = 0; g < kGroups; ++g) {
    GroupImportanceRow row;
    row.group = static_cast<FeatureGroup>(g);
    row.name = feature_group_name(row.group);
    row.mean_abs_sv = counts[g] ? sums[g] / static_cast<double>(counts[g]) : 0;
    row.n_features = n_feats[g];
    rows.push_back(row);
  }
  return rows;
}

std::vector<double> feature_importance(std::span<const ShapExplanation> explanations) {
  if (explanations.empty()) return {};
  std::vector<double> imp(explanations[0].sv.size(), 0.0);
  for (const auto& e : explanations) {
    for (std::size_t f = 0; f < imp.size(); ++f) imp[f] += std::abs(e.sv[f]);
  }
  for (double& v : imp) v /= static_cast<double>(explanations.size());
  return imp;
}

std::vector<DependenceRow> dependence_scan(
    std::span<const ShapExplanation> explanations, int feature_index,
    std::span<const double> color_values) {
  if (!explanations.empty() &&
      (feature_index < 0 ||
       feature_index >= static_cast<int>(explanations[0].sv.size()))) {
    throw std::invalid_argument("dependence_scan: feature index out of range");
  }
  std::vector<DependenceRow> rows;
  rows.reserve(explanations.size());
  for (std::size_t i = 0; i < explanations.size(); ++i) {
    DependenceRow r;
    r.feature_value = explanations[i].feature_values[feature_index];
    r.sv = explanations[i].sv[feature_index];
    r.color_value = i < color_values.size() ? color_values[i] : kNaN;
    rows.push_back(r);
  }
  return rows;
}

double binned_rank_correlation(std::span<const DependenceRow> rows, int n_bins,
                               std::size_t min_bin_count) {
  std::vector<double> fvals;
  fvals.reserve(rows.size());
  for (const auto& r : rows) {
    if (std::isfinite(r.feature_value) && std::isfinite(r.color_value)) {
      fvals.push_back(r.feature_value);
    }
  }
  if (fvals.size() < min_bin_count) return kNaN;
  std::sort(fvals.begin(), fvals.end());

  std::vector<double> edges(n_bins + 1);
  for (int b = 0; b <= n_bins; ++b) {
    edges[b] = quantile_sorted(fvals, static_cast<double>(b) / n_bins);
  }
  std::vector<std::vector<double>> bin_sv(n_bins), bin_color(n_bins);
  for (const auto& r : rows) {
    if (!std::isfinite(r.feature_value) || !std::isfinite(r.color_value)) continue;
    int b = static_cast<int>(
        std::upper_bound(edges.begin(), edges.end() - 1, r.feature_value) -
        edges.begin()) - 1;
    b = std::clamp(b, 0, n_bins - 1);
    bin_sv[b].push_back(r.sv);
    bin_color[b].push_back(r.color_value);
  }
  double wsum = 0, rho_sum = 0;
  for (int b = 0; b < n_bins; ++b) {
    if (bin_sv[b].size() < min_bin_count) continue;
    const double rho = spearman(bin_color[b], bin_sv[b]);
    if (!std::isfinite(rho)) continue;
    const double w = static_cast<double>(bin_sv[b].size());
    rho_sum += w * rho;
    wsum += w;
  }
  return wsum > 0 ? rho_sum / wsum : kNaN;
}

}  // namespace tofcal::explain
