#include <doctest.h>

#include <cmath>
#include <cstring>
#include <sstream>

#include "tofcal/gtb.hpp"
#include "tofcal/util.hpp"

using namespace tofcal;
using namespace tofcal::gtb;

namespace {

struct Table {
  std::vector<double> x;
  std::vector<double> y;
  std::size_t n = 0, m = 0;
  DataView view() const { return {x.data(), n, m, y.data()}; }
};

Table random_table(std::size_t n, std::size_t m, std::uint64_t seed,
                   double missing_rate = 0.0) {
  Table t;
  t.n = n;
  t.m = m;
  t.x.resize(n * m);
  t.y.resize(n);
  Rng rng(seed);
  for (std::size_t i = 0; i < n; ++i) {
    double target = 0;
    for (std::size_t f = 0; f < m; ++f) {
      double v = rng.uniform(-1, 1);
      if (missing_rate > 0 && rng.uniform() < missing_rate) v = kNaN;
      t.x[i * m + f] = v;
      if (!std::isnan(v)) target += (f % 3 == 0 ? 1.0 : -0.5) * v;
    }
    t.y[i] = target + rng.normal(0, 0.05);
  }
  return t;
}

}  // namespace

TEST_CASE("zero trees predict the training mean") {
  Table t;
  t.n = 3;
  t.m = 1;
  t.x = {0.0, 1.0, 2.0};
  t.y = {1.0, 2.0, 3.0};
  HyperParams hp;
  hp.n_max = 0;
  const auto model = train(t.view(), t.view(), hp, 1);
  CHECK(model.base_score == 2.0);
  CHECK(model.predict(std::vector<double>{7.0}) == 2.0);
  CHECK(model.trees.empty());
}

TEST_CASE("step function is fit geometrically by shrinkage") {
  // y = 1[x >= 0]; each depth-1 tree removes half of the remaining residual
  // at lr = 0.5, so RMSE after k trees is 0.5^(k+1) exactly.
  Table t;
  t.m = 1;
  for (double x : {-2.0, -1.0, 1.0, 2.0}) {
    t.x.push_back(x);
    t.y.push_back(x >= 0 ? 1.0 : 0.0);
  }
  t.n = 4;
  HyperParams hp;
  hp.max_depth = 1;
  hp.learning_rate = 0.5;
  hp.n_max = 5;
  hp.min_samples_leaf = 1;
  hp.exact_splits = true;
  TrainingLog log;
  const auto model = train(t.view(), t.view(), hp, 1, &log);
  REQUIRE(model.trees.size() == 5);
  const double rmse = std::sqrt(log.train_loss.back());
  CHECK(rmse == doctest::Approx(std::pow(0.5, 6)).epsilon(1e-12));
}

TEST_CASE("lr = 0 yields constant predictions") {
  auto t = random_table(500, 4, 11);
  HyperParams hp;
  hp.learning_rate = 0.0;
  hp.n_max = 50;
  hp.min_samples_leaf = 5;
  const auto model = train(t.view(), t.view(), hp, 1);
  for (std::size_t i = 0; i < 20; ++i) {
    CHECK(model.predict(t.view().row(i)) == model.base_score);
  }
}

TEST_CASE("train loss is non-increasing (additive residual fitting)") {
  auto t = random_table(2000, 6, 3);
  HyperParams hp;
  hp.max_depth = 4;
  hp.learning_rate = 0.3;
  hp.n_max = 40;
  TrainingLog log;
  train(t.view(), t.view(), hp, 1, &log);
  for (std::size_t k = 1; k < log.train_loss.size(); ++k) {
    CHECK(log.train_loss[k] <= log.train_loss[k - 1] + 1e-12);
  }
}

TEST_CASE("early stopping truncates at the validation minimum") {
  auto t = random_table(3000, 6, 17);
  auto v = random_table(700, 6, 18);
  HyperParams hp;
  hp.max_depth = 6;
  hp.learning_rate = 0.5;  // overfits quickly
  hp.n_max = 200;
  hp.min_samples_leaf = 2;
  TrainingLog log;
  const auto model = train(t.view(), v.view(), hp, 1, &log);
  REQUIRE(!log.valid_loss.empty());
  std::size_t argmin = 0;
  for (std::size_t k = 1; k < log.valid_loss.size(); ++k) {
    if (log.valid_loss[k] < log.valid_loss[argmin]) argmin = k;
  }
  CHECK(log.best_iteration == static_cast<int>(argmin));
  CHECK(model.trees.size() == argmin + 1);
  if (log.early_stopped) {
    CHECK(log.valid_loss.size() - argmin - 1 >=
          static_cast<std::size_t>(hp.early_stopping_rounds));
  }
}

TEST_CASE("empty validation disables early stopping with a note") {
  auto t = random_table(300, 3, 5);
  HyperParams hp;
  hp.n_max = 12;
  hp.min_samples_leaf = 5;
  TrainingLog log;
  const auto model = train(t.view(), DataView{}, hp, 1, &log);
  CHECK(model.trees.size() == 12);
  bool noted = false;
  for (const auto& n : log.notes) {
    if (n.find("early stopping disabled") != std::string::npos) noted = true;
  }
  CHECK(noted);
}

TEST_CASE("empty training set is rejected") {
  HyperParams hp;
  CHECK_THROWS_AS(train(DataView{}, DataView{}, hp, 1), std::invalid_argument);
}

TEST_CASE("missing values route through default branches") {
  // Feature 0 informative; missing samples carry a shifted target so the
  // default branch matters.
  Table t;
  t.m = 2;
  Rng rng(23);
  for (int i = 0; i < 4000; ++i) {
    const bool missing = i % 4 == 0;
    const double x0 = missing ? kNaN : rng.uniform(-1, 1);
    t.x.push_back(x0);
    t.x.push_back(rng.uniform(-1, 1));
    t.y.push_back(missing ? 2.0 : (x0 >= 0 ? 1.0 : -1.0));
  }
  t.n = 4000;
  HyperParams hp;
  hp.max_depth = 3;
  hp.learning_rate = 0.5;
  hp.n_max = 60;
  hp.min_samples_leaf = 10;
  const auto model = train(t.view(), t.view(), hp, 1);
  const double pm = model.predict(std::vector<double>{kNaN, 0.3});
  const double pp = model.predict(std::vector<double>{0.5, 0.3});
  const double pn = model.predict(std::vector<double>{-0.5, 0.3});
  CHECK(pm == doctest::Approx(2.0).epsilon(0.05));
  CHECK(pp == doctest::Approx(1.0).epsilon(0.05));
  CHECK(pn == doctest::Approx(-1.0).epsilon(0.05));
  // all-missing input still predicts without error
  CHECK_NOTHROW(model.predict(std::vector<double>{kNaN, kNaN}));
}

TEST_CASE("prediction equals base plus lr-scaled leaf sums") {
  auto t = random_table(1500, 5, 29, 0.1);
  HyperParams hp;
  hp.max_depth = 4;
  hp.n_max = 25;
  const auto model = train(t.view(), t.view(), hp, 1);
  // independent per-tree traversal oracle
  auto walk = [](const Tree& tree, std::span<const double> x) {
    int i = 0;
    while (!tree.nodes[i].is_leaf()) {
      const auto& n = tree.nodes[i];
      const double v = x[n.feature];
      i = std::isnan(v) ? (n.default_left ? n.left : n.right)
                        : (v <= n.threshold ? n.left : n.right);
    }
    return tree.nodes[i].leaf_value;
  };
  for (std::size_t i = 0; i < 50; ++i) {
    const auto row = t.view().row(i);
    double expect = model.base_score;
    for (const auto& tree : model.trees) {
      expect += model.learning_rate * walk(tree, row);
    }
    CHECK(model.predict(row) == doctest::Approx(expect).epsilon(1e-12));
  }
}

TEST_CASE("schema errors on wrong input width") {
  auto t = random_table(200, 3, 31);
  HyperParams hp;
  hp.n_max = 3;
  hp.min_samples_leaf = 5;
  const auto model = train(t.view(), t.view(), hp, 77);
  CHECK_THROWS_AS(model.predict(std::vector<double>{1.0}), SchemaError);
}

TEST_CASE("serialization round trip is bit exact on 1e4 inputs") {
  auto t = random_table(3000, 8, 37, 0.15);
  HyperParams hp;
  hp.max_depth = 6;
  hp.n_max = 30;
  const auto model = train(t.view(), t.view(), hp, 42);
  std::stringstream ss;
  save_ensemble(model, ss);
  const auto back = load_ensemble(ss, 42);
  Rng rng(41);
  for (int i = 0; i < 10000; ++i) {
    std::vector<double> x(8);
    for (auto& v : x) {
      v = rng.uniform() < 0.1 ? kNaN : rng.uniform(-2, 2);
    }
    const double a = model.predict(x);
    const double b = back.predict(x);
    CHECK(std::memcmp(&a, &b, sizeof a) == 0);
  }
}

TEST_CASE("schema hash checked at load") {
  auto t = random_table(200, 3, 31);
  HyperParams hp;
  hp.n_max = 2;
  hp.min_samples_leaf = 5;
  const auto model = train(t.view(), t.view(), hp, 1234);
  std::stringstream ss;
  save_ensemble(model, ss);
  CHECK_THROWS_AS(load_ensemble(ss, 999), SchemaError);
}

TEST_CASE("grid search trains every configuration deterministically") {
  auto t = random_table(1200, 5, 43);
  auto v = random_table(400, 5, 44);
  const std::vector<int> depths{2, 3, 4, 5};
  const std::vector<double> rates{0.1, 0.3, 0.5};
  HyperParams base;
  base.n_max = 15;
  base.min_samples_leaf = 10;
  const auto res1 = grid_search(t.view(), v.view(), depths, rates, base, 1);
  const auto res2 = grid_search(t.view(), v.view(), depths, rates, base, 1);
  REQUIRE(res1.size() == 12);
  for (std::size_t i = 0; i < 12; ++i) {
    CHECK(res1[i].validation_loss == res2[i].validation_loss);
    CHECK(res1[i].model.trees.size() == res2[i].model.trees.size());
  }
  const auto best = select_best(res1);
  for (const auto& r : res1) {
    CHECK(res1[best].validation_loss <= r.validation_loss);
  }
}

TEST_CASE("select_best tie rule prefers smaller depth then smaller lr") {
  std::vector<GridResult> rs(3);
  rs[0].hp.max_depth = 18;
  rs[0].hp.learning_rate = 0.1;
  rs[0].validation_loss = 1.0;
  rs[1].hp.max_depth = 12;
  rs[1].hp.learning_rate = 0.3;
  rs[1].validation_loss = 1.0;
  rs[2].hp.max_depth = 12;
  rs[2].hp.learning_rate = 0.1;
  rs[2].validation_loss = 1.0;
  CHECK(select_best(rs) == 2);
}

TEST_CASE("exact and histogram splits agree on well-separated data") {
  auto t = random_table(4000, 4, 51);
  HyperParams hist;
  hist.max_depth = 5;
  hist.n_max = 20;
  HyperParams exact = hist;
  exact.exact_splits = true;
  TrainingLog lh, le;
  train(t.view(), t.view(), hist, 1, &lh);
  train(t.view(), t.view(), exact, 1, &le);
  CHECK(lh.train_loss.back() ==
        doctest::Approx(le.train_loss.back()).epsilon(0.15));
}

TEST_CASE("feature-parallel training matches single-threaded output") {
  auto t = random_table(3000, 12, 53, 0.05);
  auto v = random_table(800, 12, 54, 0.05);
  HyperParams hp;
  hp.max_depth = 5;
  hp.n_max = 12;
  TrainingLog l1, l4;
  const auto m1 = train(t.view(), v.view(), hp, 9, &l1, 1);
  const auto m4 = train(t.view(), v.view(), hp, 9, &l4, 4);
  REQUIRE(m1.trees.size() == m4.trees.size());
  CHECK(l1.valid_loss == l4.valid_loss);
  for (std::size_t i = 0; i < 100; ++i) {
    const double a = m1.predict(t.view().row(i));
    const double b = m4.predict(t.view().row(i));
    CHECK(std::memcmp(&a, &b, sizeof a) == 0);
  }
}
