#include "tofcal/gtb.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>
#include <thread>

namespace tofcal::gtb {

double Tree::predict(std::span<const double> x) const {
  int i = 0;
  while (!nodes[i].is_leaf()) {
    const Node& n = nodes[i];
    const double v = x[n.feature];
    if (std::isnan(v)) {
      i = n.default_left ? n.left : n.right;
    } else {
      i = v <= n.threshold ? n.left : n.right;
    }
  }
  return nodes[i].leaf_value;
}

double Tree::expected_value() const {
  double sum = 0;
  for (const Node& n : nodes) {
    if (n.is_leaf()) sum += n.cover * n.leaf_value;
  }
  return nodes.empty() || nodes[0].cover <= 0 ? 0 : sum / nodes[0].cover;
}

void TreeEnsemble::check_input(std::span<const double> x) const {
  if (static_cast<int>(x.size()) != n_features) {
    throw SchemaError("feature vector has " + std::to_string(x.size()) +
                      " entries, model expects " + std::to_string(n_features));
  }
}

double TreeEnsemble::predict(std::span<const double> x) const {
  check_input(x);
  double p = base_score;
  for (const Tree& t : trees) p += learning_rate * t.predict(x);
  return p;
}

double TreeEnsemble::expected_value() const {
  double p = base_score;
  for (const Tree& t : trees) p += learning_rate * t.expected_value();
  return p;
}

namespace {

struct SplitCandidate {
  bool found = false;
  double gain = 0;
  int feature = -1;
  double threshold = 0;
  bool default_left = true;
  // partition bookkeeping
  int threshold_bin = -1;  // histogram mode
};

struct NodeTask {
  int node_id;
  std::size_t begin, end;  // range in the index array
  int depth;
  double sum;
  std::size_t count;
};

// Candidate cut points per feature (quantile midpoints over the train data).
std::vector<std::vector<double>> build_cuts(const DataView& d, int max_bins) {
  std::vector<std::vector<double>> cuts(d.m);
  std::vector<double> vals;
  for (std::size_t f = 0; f < d.m; ++f) {
    vals.clear();
    for (std::size_t i = 0; i < d.n; ++i) {
      const double v = d.x[i * d.m + f];
      if (!std::isnan(v)) vals.push_back(v);
    }
    if (vals.empty()) continue;
    std::sort(vals.begin(), vals.end());
    auto& c = cuts[f];
    const std::size_t n = vals.size();
    const int nb = std::max(2, max_bins);
    for (int k = 1; k < nb; ++k) {
      const std::size_t pos = n * static_cast<std::size_t>(k) / nb;
      if (pos == 0 || pos >= n) continue;
      const double a = vals[pos - 1], b = vals[pos];
      if (!(a < b)) continue;
      double mid = a + 0.5 * (b - a);
      if (!(mid < b)) mid = a;
      if (c.empty() || mid > c.back()) c.push_back(mid);
    }
  }
  return cuts;
}

inline double split_score(double sl, double cl, double sr, double cr) {
  return sl * sl / cl + sr * sr / cr;
}

class Trainer {
 public:
  Trainer(const DataView& d, const HyperParams& hp, int threads)
      : d_(d), hp_(hp), threads_(std::max(1, threads)) {
    if (!hp.exact_splits) {
      cuts_ = build_cuts(d, hp.histogram_bins);
      n_bins_.resize(d.m);
      binned_.resize(d.m);
      for (std::size_t f = 0; f < d.m; ++f) {
        n_bins_[f] = static_cast<int>(cuts_[f].size()) + 1;
        auto& col = binned_[f];
        col.resize(d.n);
        const auto& c = cuts_[f];
        for (std::size_t i = 0; i < d.n; ++i) {
          const double v = d.x[i * d.m + f];
          if (std::isnan(v)) {
            col[i] = 0;  // missing bin
          } else {
            const auto k = std::lower_bound(c.begin(), c.end(), v) - c.begin();
            col[i] = static_cast<std::uint16_t>(k + 1);
          }
        }
      }
    }
    idx_.resize(d.n);
    std::iota(idx_.begin(), idx_.end(), std::size_t{0});
    scratch_.resize(d.n);
  }

  Tree grow(const std::vector<double>& residuals) {
    res_ = &residuals;
    Tree tree;
    double root_sum = 0;
    for (double r : residuals) root_sum += r;
    tree.nodes.push_back(Node{});
    tree.nodes[0].cover = static_cast<double>(d_.n);

    std::vector<NodeTask> queue;
    queue.push_back({0, 0, d_.n, 0, root_sum, d_.n});
    while (!queue.empty()) {
      const NodeTask task = queue.back();
      queue.pop_back();
      Node& node = tree.nodes[task.node_id];
      node.cover = static_cast<double>(task.count);

      SplitCandidate best;
      if (task.depth < hp_.max_depth &&
          task.count >= 2 * static_cast<std::size_t>(hp_.min_samples_leaf)) {
        best = find_split(task);
      }
      if (!best.found) {
        node.feature = -1;
        node.leaf_value = task.sum / static_cast<double>(task.count);
        leaf_ranges_.push_back({task.begin, task.end, node.leaf_value});
        continue;
      }

      // Stable partition keeps sample order deterministic for the children.
      std::size_t nl = 0, nr = 0;
      double sum_left = 0;
      {
        std::size_t out_l = task.begin;
        std::size_t scratch_n = 0;
        for (std::size_t i = task.begin; i < task.end; ++i) {
          const std::size_t row = idx_[i];
          if (goes_left(row, best)) {
            idx_[out_l++] = row;
            sum_left += (*res_)[row];
            ++nl;
          } else {
            scratch_[scratch_n++] = row;
            ++nr;
          }
        }
        std::copy(scratch_.begin(), scratch_.begin() + scratch_n,
                  idx_.begin() + out_l);
      }

      const int left_id = static_cast<int>(tree.nodes.size());
      const int right_id = left_id + 1;
      node.feature = best.feature;
      node.threshold = best.threshold;
      node.default_left = best.default_left;
      node.left = left_id;
      node.right = right_id;
      tree.nodes.push_back(Node{});  // invalidates `node`
      tree.nodes.push_back(Node{});
      queue.push_back({right_id, task.begin + nl, task.end, task.depth + 1,
                       task.sum - sum_left, nr});
      queue.push_back({left_id, task.begin, task.begin + nl, task.depth + 1,
                       sum_left, nl});
    }
    return tree;
  }

  // Leaf membership of the last grown tree, for in-place prediction updates.
  struct LeafRange {
    std::size_t begin, end;
    double value;
  };
  const std::vector<LeafRange>& leaf_ranges() const { return leaf_ranges_; }
  const std::vector<std::size_t>& index() const { return idx_; }
  void reset_leaves() { leaf_ranges_.clear(); }

 private:
  bool goes_left(std::size_t row, const SplitCandidate& s) const {
    const double v = d_.x[row * d_.m + s.feature];
    if (std::isnan(v)) return s.default_left;
    return v <= s.threshold;
  }

  SplitCandidate find_split(const NodeTask& task) {
    std::vector<SplitCandidate> per_feature(d_.m);
    auto eval_range = [&](std::size_t f0, std::size_t f1) {
      for (std::size_t f = f0; f < f1; ++f) {
        per_feature[f] = hp_.exact_splits ? eval_feature_exact(task, f)
                                          : eval_feature_hist(task, f);
      }
    };
    if (threads_ <= 1 || d_.m < 8) {
      eval_range(0, d_.m);
    } else {
      std::vector<std::thread> pool;
      const std::size_t chunk = (d_.m + threads_ - 1) / threads_;
      for (int t = 0; t < threads_; ++t) {
        const std::size_t f0 = std::min(d_.m, chunk * t);
        const std::size_t f1 = std::min(d_.m, f0 + chunk);
        if (f0 < f1) pool.emplace_back(eval_range, f0, f1);
      }
      for (auto& th : pool) th.join();
    }
    // Ordered reduction: feature order breaks ties, independent of threads.
    SplitCandidate best;
    for (std::size_t f = 0; f < d_.m; ++f) {
      if (per_feature[f].found &&
          (!best.found || per_feature[f].gain > best.gain)) {
        best = per_feature[f];
      }
    }
    return best;
  }

  SplitCandidate eval_feature_hist(const NodeTask& task, std::size_t f) {
    SplitCandidate best;
    const int nb = n_bins_[f];
    if (nb < 2) return best;
    // local scratch: feature evaluations may run on separate threads
    std::vector<double> hist_sum(nb + 1, 0.0);
    std::vector<std::size_t> hist_cnt(nb + 1, 0);
    const auto& col = binned_[f];
    for (std::size_t i = task.begin; i < task.end; ++i) {
      const std::size_t row = idx_[i];
      const int b = col[row];
      hist_sum[b] += (*res_)[row];
      hist_cnt[b] += 1;
    }
    const double miss_sum = hist_sum[0];
    const std::size_t miss_cnt = hist_cnt[0];
    const double total_sum = task.sum;
    const double total_cnt = static_cast<double>(task.count);
    const double parent = total_sum * total_sum / total_cnt;
    const auto msl = static_cast<std::size_t>(hp_.min_samples_leaf);

    double acc_sum = 0;
    std::size_t acc_cnt = 0;
    for (int b = 1; b < nb; ++b) {
      acc_sum += hist_sum[b];
      acc_cnt += hist_cnt[b];
      if (acc_cnt == 0) continue;
      const double rest_sum = total_sum - miss_sum - acc_sum;
      const std::size_t rest_cnt = task.count - miss_cnt - acc_cnt;
      // missing to the left
      {
        const std::size_t cl = acc_cnt + miss_cnt, cr = rest_cnt;
        if (cl >= msl && cr >= msl) {
          const double g = split_score(acc_sum + miss_sum, cl, rest_sum, cr) - parent;
          if (g > best.gain + 1e-12 || (!best.found && g > 1e-12)) {
            best = {true, g, static_cast<int>(f), cuts_[f][b - 1], true, b};
          }
        }
      }
      // missing to the right
      {
        const std::size_t cl = acc_cnt, cr = rest_cnt + miss_cnt;
        if (cl >= msl && cr >= msl) {
          const double g = split_score(acc_sum, cl, rest_sum + miss_sum, cr) - parent;
          if (g > best.gain + 1e-12 || (!best.found && g > 1e-12)) {
            best = {true, g, static_cast<int>(f), cuts_[f][b - 1], false, b};
          }
        }
      }
    }
    return best;
  }

  SplitCandidate eval_feature_exact(const NodeTask& task, std::size_t f) {
    SplitCandidate best;
    std::vector<std::pair<double, double>> vals;  // (x, residual)
    vals.reserve(task.count);
    double miss_sum = 0;
    std::size_t miss_cnt = 0;
    for (std::size_t i = task.begin; i < task.end; ++i) {
      const std::size_t row = idx_[i];
      const double v = d_.x[row * d_.m + f];
      if (std::isnan(v)) {
        miss_sum += (*res_)[row];
        ++miss_cnt;
      } else {
        vals.emplace_back(v, (*res_)[row]);
      }
    }
    if (vals.size() < 2) return best;
    std::stable_sort(vals.begin(), vals.end(),
                     [](const auto& a, const auto& b) { return a.first < b.first; });
    const double total_sum = task.sum;
    const auto msl = static_cast<std::size_t>(hp_.min_samples_leaf);
    const double parent = total_sum * total_sum / static_cast<double>(task.count);

    double acc_sum = 0;
    for (std::size_t i = 0; i + 1 < vals.size(); ++i) {
      acc_sum += vals[i].second;
      if (!(vals[i].first < vals[i + 1].first)) continue;
      double thr = vals[i].first + 0.5 * (vals[i + 1].first - vals[i].first);
      if (!(thr < vals[i + 1].first)) thr = vals[i].first;
      const double rest_sum = total_sum - miss_sum - acc_sum;
      const std::size_t acc_cnt = i + 1;
      const std::size_t rest_cnt = vals.size() - acc_cnt;
      {
        const std::size_t cl = acc_cnt + miss_cnt, cr = rest_cnt;
        if (cl >= msl && cr >= msl) {
          const double g = split_score(acc_sum + miss_sum, cl, rest_sum, cr) - parent;
          if (g > best.gain + 1e-12 || (!best.found && g > 1e-12)) {
            best = {true, g, static_cast<int>(f), thr, true, -1};
          }
        }
      }
      {
        const std::size_t cl = acc_cnt, cr = rest_cnt + miss_cnt;
        if (cl >= msl && cr >= msl) {
          const double g = split_score(acc_sum, cl, rest_sum + miss_sum, cr) - parent;
          if (g > best.gain + 1e-12 || (!best.found && g > 1e-12)) {
            best = {true, g, static_cast<int>(f), thr, false, -1};
          }
        }
      }
    }
    return best;
  }

  const DataView& d_;
  const HyperParams& hp_;
  int threads_;
  std::vector<std::vector<double>> cuts_;
  std::vector<int> n_bins_;
  std::vector<std::vector<std::uint16_t>> binned_;
  std::vector<std::size_t> idx_, scratch_;
  const std::vector<double>* res_ = nullptr;
  std::vector<LeafRange> leaf_ranges_;
};

double mse(std::span<const double> a, std::span<const double> b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return a.empty() ? 0 : s / static_cast<double>(a.size());
}

}  // namespace

TreeEnsemble train(const DataView& train_set, const DataView& valid_set,
                   const HyperParams& hp, std::uint64_t schema_hash,
                   TrainingLog* log, int threads) {
  if (train_set.n == 0 || train_set.m == 0 || !train_set.x || !train_set.y) {
    throw std::invalid_argument("train: empty training set");
  }
  TrainingLog local_log;
  if (!log) log = &local_log;

  HyperParams hp_local = hp;
  hp_local.min_samples_leaf = std::max(1, hp.min_samples_leaf);

  TreeEnsemble e;
  e.learning_rate = hp.learning_rate;
  e.max_depth = hp.max_depth;
  e.n_features = static_cast<int>(train_set.m);
  e.schema_hash = schema_hash;
  e.base_score = mean({train_set.y, train_set.n});
  log->notes.push_back("loss=squared_error; no leaf regularization applied");

  const bool have_valid = valid_set.n > 0 && valid_set.x && valid_set.y;
  if (!have_valid && hp.n_max > 0) {
    log_warn("gtb: empty validation set, early stopping disabled");
    log->notes.push_back("early stopping disabled: empty validation set");
  }
  if (have_valid && valid_set.m != train_set.m) {
    throw SchemaError("validation set feature count mismatch");
  }

  Trainer trainer(train_set, hp_local, threads);
  std::vector<double> residuals(train_set.n);
  for (std::size_t i = 0; i < train_set.n; ++i) {
    residuals[i] = train_set.y[i] - e.base_score;
  }
  std::vector<double> valid_pred(valid_set.n, e.base_score);

  double best_loss = std::numeric_limits<double>::infinity();
  int rounds_without_improvement = 0;

  for (int k = 0; k < hp.n_max; ++k) {
    trainer.reset_leaves();
    Tree tree = trainer.grow(residuals);

    // Update train residuals through the recorded leaf membership.
    for (const auto& lr : trainer.leaf_ranges()) {
      const double delta = hp.learning_rate * lr.value;
      for (std::size_t i = lr.begin; i < lr.end; ++i) {
        residuals[trainer.index()[i]] -= delta;
      }
    }
    double train_loss = 0;
    for (double r : residuals) train_loss += r * r;
    train_loss /= static_cast<double>(train_set.n);
    log->train_loss.push_back(train_loss);

    e.trees.push_back(std::move(tree));

    if (have_valid) {
      for (std::size_t i = 0; i < valid_set.n; ++i) {
        valid_pred[i] += hp.learning_rate * e.trees.back().predict(valid_set.row(i));
      }
      const double vloss = mse({valid_set.y, valid_set.n}, valid_pred);
      log->valid_loss.push_back(vloss);
      if (vloss < best_loss) {
        best_loss = vloss;
        log->best_iteration = k;
        rounds_without_improvement = 0;
      } else {
        ++rounds_without_improvement;
        if (rounds_without_improvement >= hp.early_stopping_rounds) {
          log->early_stopped = true;
          break;
        }
      }
    } else {
      log->best_iteration = k;
    }
  }

  if (have_valid && log->best_iteration + 1 < static_cast<int>(e.trees.size())) {
    e.trees.resize(static_cast<std::size_t>(log->best_iteration + 1));
  }
  return e;
}

std::vector<GridResult> grid_search(const DataView& train_set,
                                    const DataView& valid_set,
                                    std::span<const int> depths,
                                    std::span<const double> learning_rates,
                                    const HyperParams& base,
                                    std::uint64_t schema_hash, int threads) {
  if (train_set.n == 0 || valid_set.n == 0) {
    throw std::invalid_argument("grid_search: empty train or validation set");
  }
  std::vector<GridResult> out;
  for (int d : depths) {
    for (double lr : learning_rates) {
      GridResult r;
      r.hp = base;
      r.hp.max_depth = d;
      r.hp.learning_rate = lr;
      r.model = train(train_set, valid_set, r.hp, schema_hash, &r.log, threads);
      r.validation_loss = r.log.best_iteration >= 0 &&
                                  !r.log.valid_loss.empty()
                              ? r.log.valid_loss[r.log.best_iteration]
                              : kNaN;
      log_info("grid (" + std::to_string(d) + ", " + std::to_string(lr) +
               "): trees=" + std::to_string(r.model.trees.size()) +
               " vloss=" + std::to_string(r.validation_loss));
      out.push_back(std::move(r));
    }
  }
  return out;
}

std::size_t select_best(std::span<const GridResult> results) {
  if (results.empty()) throw std::invalid_argument("select_best: no results");
  std::size_t best = 0;
  for (std::size_t i = 1; i < results.size(); ++i) {
    const auto& a = results[i];
    const auto& b = results[best];
    if (a.validation_loss < b.validation_loss) {
      best = i;
    } else if (a.validation_loss == b.validation_loss) {
      if (a.hp.max_depth < b.hp.max_depth ||
          (a.hp.max_depth == b.hp.max_depth &&
           a.hp.learning_rate < b.hp.learning_rate)) {
        best = i;
      }
    }
  }
  return best;
}

void save_ensemble(const TreeEnsemble& e, std::ostream& os) {
  os << "tofcal-gtb 1\n";
  char hashbuf[32];
  std::snprintf(hashbuf, sizeof(hashbuf), "%016llx",
                static_cast<unsigned long long>(e.schema_hash));
  os << "schema_hash " << hashbuf << "\n";
  os << "n_features " << e.n_features << "\n";
  os << "base_score " << hex_double(e.base_score) << "\n";
  os << "learning_rate " << hex_double(e.learning_rate) << "\n";
  os << "max_depth " << e.max_depth << "\n";
  os << "n_trees " << e.trees.size() << "\n";
  for (std::size_t k = 0; k < e.trees.size(); ++k) {
    const Tree& t = e.trees[k];
    os << "tree " << k << " " << t.nodes.size() << "\n";
    for (const Node& n : t.nodes) {
      if (n.is_leaf()) {
        os << "L " << hex_double(n.leaf_value) << " " << hex_double(n.cover) << "\n";
      } else {
        os << "N " << n.feature << " " << hex_double(n.threshold) << " "
           << (n.default_left ? "L" : "R") << " " << n.left << " " << n.right
           << " " << hex_double(n.cover) << "\n";
      }
    }
  }
  os << "end\n";
}

void save_ensemble(const TreeEnsemble& e, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write model file: " + path);
  save_ensemble(e, os);
}

TreeEnsemble load_ensemble(std::istream& is, std::uint64_t expected_schema_hash) {
  std::string tag;
  int version = 0;
  is >> tag >> version;
  if (tag != "tofcal-gtb" || version != 1) {
    throw std::runtime_error("not a tofcal-gtb v1 model file");
  }
  TreeEnsemble e;
  std::string key, hex;
  is >> key >> hex;
  e.schema_hash = std::stoull(hex, nullptr, 16);
  if (expected_schema_hash != 0 && e.schema_hash != expected_schema_hash) {
    throw SchemaError("model schema hash mismatch");
  }
  std::size_t n_trees = 0;
  std::string v;
  is >> key >> e.n_features;
  is >> key >> v;
  e.base_score = parse_hex_double(v);
  is >> key >> v;
  e.learning_rate = parse_hex_double(v);
  is >> key >> e.max_depth;
  is >> key >> n_trees;
  e.trees.resize(n_trees);
  for (std::size_t k = 0; k < n_trees; ++k) {
    std::size_t idx = 0, n_nodes = 0;
    is >> key >> idx >> n_nodes;
    if (key != "tree" || idx != k) {
      throw std::runtime_error("corrupt model file (tree header)");
    }
    Tree& t = e.trees[k];
    t.nodes.resize(n_nodes);
    for (Node& n : t.nodes) {
      std::string kind;
      is >> kind;
      if (kind == "L") {
        std::string val, cov;
        is >> val >> cov;
        n.feature = -1;
        n.leaf_value = parse_hex_double(val);
        n.cover = parse_hex_double(cov);
      } else if (kind == "N") {
        std::string thr, def, cov;
        is >> n.feature >> thr >> def >> n.left >> n.right >> cov;
        n.threshold = parse_hex_double(thr);
        n.default_left = (def == "L");
        n.cover = parse_hex_double(cov);
      } else {
        throw std::runtime_error("corrupt model file (node kind '" + kind + "')");
      }
    }
  }
  is >> key;
  if (key != "end") throw std::runtime_error("corrupt model file (missing end)");
  return e;
}

TreeEnsemble load_ensemble(const std::string& path, std::uint64_t expected_schema_hash) {
  std::ifstream is(path);
  if (!is) throw MissingInputError("cannot open model file: " + path);
  return load_ensemble(is, expected_schema_hash);
}

}  // namespace tofcal::gtb
