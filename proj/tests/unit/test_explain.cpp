#include <doctest.h>

#include <cmath>

#include "tofcal/explain.hpp"
#include "tofcal/util.hpp"

using namespace tofcal;
using namespace tofcal::explain;
using gtb::Node;
using gtb::Tree;
using gtb::TreeEnsemble;

namespace {

// Conditional expectation of a tree given the feature subset S: known
// features follow x (missing -> default branch), unknown features mix the
// children by cover fraction.
double cond_expect(const Tree& tree, int node, std::span<const double> x,
                   const std::vector<bool>& known) {
  const Node& n = tree.nodes[node];
  if (n.is_leaf()) return n.leaf_value;
  if (known[n.feature]) {
    const double v = x[n.feature];
    int next;
    if (std::isnan(v)) {
      next = n.default_left ? n.left : n.right;
    } else {
      next = v <= n.threshold ? n.left : n.right;
    }
    return cond_expect(tree, next, x, known);
  }
  const double wl = tree.nodes[n.left].cover / n.cover;
  const double wr = tree.nodes[n.right].cover / n.cover;
  return wl * cond_expect(tree, n.left, x, known) +
         wr * cond_expect(tree, n.right, x, known);
}

// Brute-force Shapley values over all feature subsets.
std::vector<double> brute_force_shap(const Tree& tree, std::span<const double> x,
                                     int n_features) {
  std::vector<double> phi(n_features, 0.0);
  std::vector<double> fact(n_features + 1, 1.0);
  for (int i = 1; i <= n_features; ++i) fact[i] = fact[i - 1] * i;
  const int subsets = 1 << n_features;
  std::vector<bool> known(n_features);
  for (int mask = 0; mask < subsets; ++mask) {
    int size = 0;
    for (int f = 0; f < n_features; ++f) {
      known[f] = mask & (1 << f);
      if (known[f]) ++size;
    }
    const double base = cond_expect(tree, 0, x, known);
    const double weight =
        fact[size] * fact[n_features - size - 1] / fact[n_features];
    for (int f = 0; f < n_features; ++f) {
      if (known[f]) continue;
      known[f] = true;
      const double with_f = cond_expect(tree, 0, x, known);
      known[f] = false;
      phi[f] += weight * (with_f - base);
    }
  }
  return phi;
}

TreeEnsemble single_tree_ensemble(Tree tree, int n_features) {
  TreeEnsemble e;
  e.base_score = 0;
  e.learning_rate = 1.0;
  e.n_features = n_features;
  e.trees.push_back(std::move(tree));
  return e;
}

// Random tree with consistent covers, depth <= max_depth.
Tree random_tree(Rng& rng, int n_features, int max_depth) {
  Tree tree;
  struct Todo {
    int node;
    int depth;
    double cover;
  };
  tree.nodes.push_back(Node{});
  std::vector<Todo> todo{{0, 0, 64.0 + static_cast<double>(rng.next_below(64))}};
  while (!todo.empty()) {
    const Todo t = todo.back();
    todo.pop_back();
    Node& n = tree.nodes[t.node];
    n.cover = t.cover;
    const bool leaf = t.depth >= max_depth || rng.uniform() < 0.25;
    if (leaf) {
      n.feature = -1;
      n.leaf_value = rng.uniform(-10, 10);
      continue;
    }
    n.feature = static_cast<int>(rng.next_below(n_features));
    n.threshold = rng.uniform(-1, 1);
    n.default_left = rng.uniform() < 0.5;
    const double frac = 0.1 + 0.8 * rng.uniform();
    const int left = static_cast<int>(tree.nodes.size());
    n.left = left;
    n.right = left + 1;
    tree.nodes.push_back(Node{});
    tree.nodes.push_back(Node{});
    todo.push_back({left, t.depth + 1, t.cover * frac});
    todo.push_back({left + 1, t.depth + 1, t.cover * (1.0 - frac)});
  }
  return tree;
}

}  // namespace

TEST_CASE("single split tree: balanced cover gives half attribution") {
  Tree tree;
  tree.nodes.resize(3);
  tree.nodes[0] = Node{0, 0.0, 1, 2, true, 0, 100};
  tree.nodes[1] = Node{-1, 0, -1, -1, true, 0.0, 50};
  tree.nodes[2] = Node{-1, 0, -1, -1, true, 10.0, 50};
  const auto e = single_tree_ensemble(tree, 2);
  const auto ex = shap_values(e, std::vector<double>{1.0, 0.0});
  CHECK(ex.base_value == doctest::Approx(5.0));
  CHECK(ex.sv[0] == doctest::Approx(5.0).epsilon(1e-12));
  CHECK(ex.sv[1] == doctest::Approx(0.0));  // dummy feature
}

TEST_CASE("local accuracy holds exactly") {
  Rng rng(8);
  for (int trial = 0; trial < 50; ++trial) {
    TreeEnsemble e;
    e.base_score = rng.uniform(-5, 5);
    e.learning_rate = 0.3;
    e.n_features = 8;
    const int n_trees = 1 + static_cast<int>(rng.next_below(6));
    for (int k = 0; k < n_trees; ++k) {
      e.trees.push_back(random_tree(rng, 8, 4));
    }
    for (int rep = 0; rep < 5; ++rep) {
      std::vector<double> x(8);
      for (auto& v : x) v = rng.uniform() < 0.2 ? kNaN : rng.uniform(-1, 1);
      const auto ex = shap_values(e, x);
      double sum = ex.base_value;
      for (double sv : ex.sv) sum += sv;
      CHECK(sum == doctest::Approx(e.predict(x)).epsilon(1e-11));
    }
  }
}

TEST_CASE("tree-path shap equals brute-force enumeration") {
  Rng rng(99);
  for (int trial = 0; trial < 40; ++trial) {
    const int n_features = 4 + static_cast<int>(rng.next_below(9));  // <= 12
    Tree tree = random_tree(rng, n_features, 3);
    const auto e = single_tree_ensemble(tree, n_features);
    std::vector<double> x(n_features);
    for (auto& v : x) v = rng.uniform() < 0.15 ? kNaN : rng.uniform(-1, 1);
    const auto fast = shap_values(e, x);
    const auto slow = brute_force_shap(e.trees[0], x, n_features);
    for (int f = 0; f < n_features; ++f) {
      CHECK(fast.sv[f] == doctest::Approx(slow[f]).epsilon(1e-9));
    }
  }
}

TEST_CASE("constant model gives zero attributions") {
  Tree tree;
  Node leaf;
  leaf.feature = -1;
  leaf.leaf_value = 4.2;
  leaf.cover = 10;
  tree.nodes.push_back(leaf);
  const auto e = single_tree_ensemble(tree, 3);
  const auto ex = shap_values(e, std::vector<double>{1.0, 2.0, 3.0});
  for (double sv : ex.sv) CHECK(sv == 0.0);
  CHECK(ex.base_value == doctest::Approx(4.2));
}

TEST_CASE("consistency: larger leaf contrast never shrinks the attribution") {
  auto build = [](double contrast) {
    Tree tree;
    tree.nodes.resize(3);
    tree.nodes[0] = Node{0, 0.0, 1, 2, true, 0, 100};
    tree.nodes[1] = Node{-1, 0, -1, -1, true, -contrast, 50};
    tree.nodes[2] = Node{-1, 0, -1, -1, true, contrast, 50};
    return tree;
  };
  for (double x0 : {-0.5, 0.5}) {
    const auto weak = shap_values(single_tree_ensemble(build(1.0), 1),
                                  std::vector<double>{x0});
    const auto strong = shap_values(single_tree_ensemble(build(3.0), 1),
                                    std::vector<double>{x0});
    CHECK(std::abs(strong.sv[0]) >= std::abs(weak.sv[0]));
  }
}

TEST_CASE("group importance partitions local accuracy") {
  Rng rng(5);
  TreeEnsemble e;
  e.base_score = 1.0;
  e.learning_rate = 0.5;
  e.n_features = feat::kCount;
  for (int k = 0; k < 4; ++k) e.trees.push_back(random_tree(rng, feat::kCount, 4));

  std::vector<ShapExplanation> exps;
  std::vector<double> preds;
  for (int i = 0; i < 30; ++i) {
    std::vector<double> x(feat::kCount);
    for (auto& v : x) v = rng.uniform(-1, 1);
    exps.push_back(shap_values(e, x));
    preds.push_back(e.predict(x));
  }
  const auto& schema = FeatureSchema::standard();
  const auto rows = group_importance(exps, schema);
  CHECK(rows.size() == 7);
  // per-sample group sums add up to prediction minus base
  for (std::size_t i = 0; i < exps.size(); ++i) {
    double total = 0;
    for (double sv : exps[i].sv) total += sv;
    CHECK(total == doctest::Approx(preds[i] - exps[i].base_value).epsilon(1e-9));
  }
  // a single-feature group reports its own mean |SV|
  double dt_sum = 0;
  for (const auto& ex : exps) dt_sum += std::abs(ex.sv[feat::kDtMeas]);
  CHECK(rows[0].mean_abs_sv ==
        doctest::Approx(dt_sum / exps.size()).epsilon(1e-12));
  CHECK(rows[0].n_features == 1);
}

TEST_CASE("dependence scan and binned rank correlation") {
  // sv correlates with color inside each feature bin
  std::vector<ShapExplanation> exps;
  std::vector<double> color;
  Rng rng(17);
  for (int i = 0; i < 4000; ++i) {
    ShapExplanation ex;
    const double f = rng.uniform(-1, 1);
    const double c = rng.uniform(0, 1);
    ex.feature_values = {f};
    ex.sv = {f + 0.5 * c};
    exps.push_back(ex);
    color.push_back(c);
  }
  const auto rows = dependence_scan(exps, 0, color);
  REQUIRE(rows.size() == 4000);
  const double rho = binned_rank_correlation(rows, 10, 30);
  CHECK(rho > 0.8);

  // uncorrelated color
  std::vector<double> junk;
  for (int i = 0; i < 4000; ++i) junk.push_back(rng.uniform());
  const auto rows2 = dependence_scan(exps, 0, junk);
  CHECK(std::abs(binned_rank_correlation(rows2, 10, 30)) < 0.07);
}

TEST_CASE("batch explanation matches single calls") {
  Rng rng(31);
  TreeEnsemble e;
  e.base_score = 0.5;
  e.learning_rate = 0.2;
  e.n_features = 6;
  for (int k = 0; k < 3; ++k) e.trees.push_back(random_tree(rng, 6, 3));
  std::vector<double> x(5 * 6);
  for (auto& v : x) v = rng.uniform(-1, 1);
  gtb::DataView view{x.data(), 5, 6, nullptr};
  const auto batch = shap_batch(e, view, 2);
  for (int i = 0; i < 5; ++i) {
    const auto single = shap_values(e, view.row(i));
    for (int f = 0; f < 6; ++f) {
      CHECK(batch[i].sv[f] == single.sv[f]);
    }
  }
}
