#include <doctest.h>

#include <cmath>

#include "tofcal/core.hpp"
#include "tofcal/util.hpp"

using namespace tofcal;

namespace {

Cluster make_cluster(DetectorId det, std::initializer_list<double> timestamps) {
  Cluster c;
  c.detector_id = det;
  std::uint8_t id = 0;
  for (double t : timestamps) {
    Hit h;
    h.sipm_id = id++;
    h.timestamp_ps = t;
    h.pixel_counts = {100, 50, 20, 10};
    c.hits.push_back(h);
  }
  return c;
}

}  // namespace

TEST_CASE("process_timestamps subtracts the earliest timestamp") {
  const auto out = process_timestamps(
      make_cluster(DetectorId::OneToOne, {1000.0, 1003.0, 1010.0}));
  REQUIRE(out.size() == 3);
  CHECK(out[0] == 0.0);
  CHECK(out[1] == 3.0);
  CHECK(out[2] == 10.0);
}

TEST_CASE("process_timestamps single hit") {
  const auto out = process_timestamps(make_cluster(DetectorId::Slab, {500.0}));
  REQUIRE(out.size() == 1);
  CHECK(out[0] == 0.0);
}

TEST_CASE("process_timestamps caps at 4 for slab, 3 for one-to-one") {
  const auto slab6 = process_timestamps(
      make_cluster(DetectorId::Slab, {0.0, 1, 2, 3, 4, 5}));
  CHECK(slab6.size() == 4);
  const auto slab2 = process_timestamps(make_cluster(DetectorId::Slab, {0.0, 1}));
  CHECK(slab2.size() == 2);
  const auto oto5 =
      process_timestamps(make_cluster(DetectorId::OneToOne, {0.0, 1, 2, 3, 4}));
  CHECK(oto5.size() == 3);
}

TEST_CASE("process_timestamps rejects empty clusters") {
  Cluster c;
  CHECK_THROWS_AS(process_timestamps(c), EmptyClusterError);
}

TEST_CASE("process_timestamps output is non-negative and non-decreasing") {
  Rng rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    Cluster c;
    c.detector_id = trial % 2 ? DetectorId::Slab : DetectorId::OneToOne;
    const int n = 1 + static_cast<int>(rng.next_below(8));
    double t = rng.uniform(-1e6, 1e6);
    for (int i = 0; i < n; ++i) {
      Hit h;
      h.timestamp_ps = t;
      c.hits.push_back(h);
      t += rng.uniform(0, 500);
    }
    const auto out = process_timestamps(c);
    double prev = -1;
    for (double v : out) {
      CHECK(v >= 0.0);
      CHECK(v >= prev);
      prev = v;
    }
  }
}

TEST_CASE("compute_label values and symmetry") {
  CHECK(compute_label_ps(0.0) == 0.0);
  // -2 z / c with c = 2.99792458e8 m/s
  CHECK(compute_label_ps(-130.0) == doctest::Approx(867.27).epsilon(1e-4));
  CHECK(compute_label_ps(100.0) == doctest::Approx(-667.13).epsilon(1e-4));
  const double expected = -2.0 * (-130.0) / 0.299792458;
  CHECK(compute_label_ps(-130.0) == doctest::Approx(expected).epsilon(1e-12));
  Rng rng(2);
  for (int i = 0; i < 100; ++i) {
    const double z = rng.uniform(-200, 200);
    CHECK(compute_label_ps(-z) == doctest::Approx(-compute_label_ps(z)));
  }
}

TEST_CASE("coincidence label matches compute_label exactly") {
  auto slab = make_cluster(DetectorId::Slab, {1000.0});
  auto oto = make_cluster(DetectorId::OneToOne, {900.0});
  const auto c = make_coincidence(slab, oto, {1.0, 2.0, -42.0});
  CHECK(c.label_ps == compute_label_ps(-42.0));
  CHECK(c.delta_t_meas_ps == 100.0);  // slab minus one-to-one
}

namespace {

Coincidence complete_coincidence(int slab_hits, int oto_hits) {
  Cluster slab;
  slab.detector_id = DetectorId::Slab;
  for (int i = 0; i < slab_hits; ++i) {
    Hit h;
    h.sipm_id = static_cast<std::uint8_t>(i);
    h.timestamp_ps = 1000.0 + 7.0 * i;
    h.pixel_counts = {200, 100, 50, 25};
    slab.hits.push_back(h);
  }
  slab.energy_kev = 511.0;
  slab.position_mm = {1.0, -2.0, 9.0};
  slab.total_photons = 2300;
  Cluster oto;
  oto.detector_id = DetectorId::OneToOne;
  for (int i = 0; i < oto_hits; ++i) {
    Hit h;
    h.sipm_id = static_cast<std::uint8_t>(15 - i);
    h.timestamp_ps = 900.0 + 11.0 * i;
    h.pixel_counts = {1500, 30, 20, 10};
    oto.hits.push_back(h);
  }
  oto.energy_kev = 480.0;
  oto.position_mm = {-6.0, 6.0, kNaN};
  oto.total_photons = 2700;
  return make_coincidence(slab, oto, {0, 0, 10.0});
}

}  // namespace

TEST_CASE("build_features layout and missing markers") {
  const auto c = complete_coincidence(2, 1);
  const auto f = build_features(c);
  CHECK(f.size() == 54);
  CHECK(f[feat::kDtMeas] == 100.0);
  // slab: two hits -> {0, 7, missing, missing}
  CHECK(f[feat::kSlabTs] == 0.0);
  CHECK(f[feat::kSlabTs + 1] == 7.0);
  CHECK(std::isnan(f[feat::kSlabTs + 2]));
  CHECK(std::isnan(f[feat::kSlabTs + 3]));
  CHECK(f[feat::kSlabNTs] == 2.0);
  CHECK(f[feat::kSlabSpread] == 7.0);
  // pixel counts of the missing slab SiPMs stay missing, never zero
  CHECK(std::isnan(f[feat::kSlabPix + 2 * 4]));
  CHECK(std::isnan(f[feat::kSlabPix + 3 * 4 + 3]));
  // one-to-one: one hit
  CHECK(f[feat::kOtoTs] == 0.0);
  CHECK(std::isnan(f[feat::kOtoTs + 1]));
  CHECK(f[feat::kOtoTsId] == 15.0);
  CHECK(f[feat::kOtoNTs] == 1.0);
  CHECK(f[feat::kOtoEnergy] == 480.0);
  CHECK(f[feat::kOtoPos] == -6.0);
  CHECK(f[feat::kOtoPos + 1] == 6.0);

  // missing-marker count equals cap minus hit count
  int slab_missing = 0;
  for (int i = 0; i < 4; ++i) {
    if (std::isnan(f[feat::kSlabTs + i])) ++slab_missing;
  }
  CHECK(slab_missing == 4 - 2);
}

TEST_CASE("build_features requires energy and position") {
  auto c = complete_coincidence(2, 2);
  c.slab.energy_kev = kNaN;
  CHECK_THROWS_AS(build_features(c), IncompleteClusterError);
  auto c2 = complete_coincidence(2, 2);
  c2.oto.position_mm[0] = kNaN;
  CHECK_THROWS_AS(build_features(c2), IncompleteClusterError);
}

TEST_CASE("feature schema has 54 named entries and stable hash") {
  const auto& s = FeatureSchema::standard();
  CHECK(s.names.size() == 54);
  CHECK(s.groups.size() == 54);
  CHECK(s.hash != 0);
  CHECK(s.names[feat::kDtMeas] == "dt_meas_ps");
  // group sizes per side: time 10/8, energy 17/13, position 3/2, shared 1
  int counts[7] = {0, 0, 0, 0, 0, 0, 0};
  for (auto g : s.groups) ++counts[static_cast<int>(g)];
  CHECK(counts[0] == 1);
  CHECK(counts[1] == 10);
  CHECK(counts[2] == 17);
  CHECK(counts[3] == 3);
  CHECK(counts[4] == 8);
  CHECK(counts[5] == 13);
  CHECK(counts[6] == 2);
}

TEST_CASE("geometry pixel mapping round trips") {
  for (int s = 0; s < 16; ++s) {
    for (int slot = 0; slot < 4; ++slot) {
      const auto [c, r] = DetectorGeometry::pixel_of(s, slot);
      CHECK(DetectorGeometry::sipm_of_pixel(c, r) == s);
      CHECK(DetectorGeometry::pixel_slot(c, r) == slot);
    }
  }
  DetectorGeometry g;
  CHECK(g.pixel_index_of(-15.9) == 0);
  CHECK(g.pixel_index_of(15.9) == 7);
  CHECK(g.pixel_index_of(0.1) == 4);
  CHECK(g.pixel_center_mm(0) == doctest::Approx(-14.0));
}

TEST_CASE("geometry invariants") {
  DetectorGeometry g;
  CHECK_NOTHROW(g.validate(130.0));
  g.detector_spacing_mm = 200.0;
  CHECK_THROWS_AS(g.validate(130.0), ConfigError);
}
