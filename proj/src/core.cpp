#include "tofcal/core.hpp"

#include <algorithm>
#include <cstdio>

namespace tofcal {

const char* detector_name(DetectorId id) {
  return id == DetectorId::Slab ? "slab" : "oto";
}

int DetectorGeometry::pixel_index_of(double coord_mm) const {
  const double rel = (coord_mm + half_extent_mm()) / pitch_mm;
  int idx = static_cast<int>(std::floor(rel));
  return std::clamp(idx, 0, kPixelCols - 1);
}

std::pair<int, int> DetectorGeometry::pixel_of(int sipm, int slot) {
  const int scol = sipm % 4, srow = sipm / 4;
  return {scol * 2 + slot % 2, srow * 2 + slot / 2};
}

void DetectorGeometry::validate(double max_abs_source_z_mm) const {
  if (n_sipms != 16 || pixels_per_sipm != 4) {
    throw ConfigError("detector tile must have 16 SiPMs with 4 pixels each");
  }
  if (detector_spacing_mm <= 2.0 * max_abs_source_z_mm) {
    throw ConfigError("detector spacing must exceed twice the source z range");
  }
  if (crystal_height_mm <= 0 || pitch_mm <= 0) {
    throw ConfigError("crystal dimensions must be positive");
  }
}

bool Cluster::has_position() const {
  if (!std::isfinite(position_mm[0]) || !std::isfinite(position_mm[1]))
    return false;
  if (detector_id == DetectorId::Slab && !std::isfinite(position_mm[2]))
    return false;
  return true;
}

double Cluster::first_timestamp_ps() const {
  if (hits.empty()) throw EmptyClusterError("cluster has no hits");
  return hits.front().timestamp_ps;
}

double Cluster::timestamp_spread_ps() const {
  if (hits.empty()) throw EmptyClusterError("cluster has no hits");
  return hits.back().timestamp_ps - hits.front().timestamp_ps;
}

int timestamp_cap(DetectorId id) {
  return id == DetectorId::Slab ? 4 : 3;
}

std::vector<double> process_timestamps(const Cluster& cluster) {
  if (cluster.hits.empty()) {
    throw EmptyClusterError("process_timestamps: cluster has no hits");
  }
  const double t0 = cluster.hits.front().timestamp_ps;
  const std::size_t cap =
      static_cast<std::size_t>(timestamp_cap(cluster.detector_id));
  const std::size_t n = std::min(cluster.hits.size(), cap);
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    out[i] = cluster.hits[i].timestamp_ps - t0;
  }
  return out;
}

double compute_label_ps(double z_mm, double c_air_mm_per_ps) {
  return -2.0 * z_mm / c_air_mm_per_ps;
}

Coincidence make_coincidence(Cluster slab, Cluster oto,
                             const std::array<double, 3>& source_pos_mm,
                             double c_air_mm_per_ps) {
  Coincidence c;
  c.delta_t_meas_ps = slab.first_timestamp_ps() - oto.first_timestamp_ps();
  c.slab = std::move(slab);
  c.oto = std::move(oto);
  c.source_pos_mm = source_pos_mm;
  c.label_ps = compute_label_ps(source_pos_mm[2], c_air_mm_per_ps);
  return c;
}

const char* feature_group_name(FeatureGroup g) {
  switch (g) {
    case FeatureGroup::SharedDt: return "F_so";
    case FeatureGroup::SlabTime: return "F_T_s";
    case FeatureGroup::SlabEnergy: return "F_E_s";
    case FeatureGroup::SlabPos: return "F_Pos_s";
    case FeatureGroup::OtoTime: return "F_T_o";
    case FeatureGroup::OtoEnergy: return "F_E_o";
    case FeatureGroup::OtoPos: return "F_Pos_o";
  }
  return "?";
}

namespace {

FeatureSchema build_standard_schema() {
  FeatureSchema s;
  s.names.resize(feat::kCount);
  s.groups.resize(feat::kCount);
  auto set = [&](int idx, const std::string& name, FeatureGroup g) {
    s.names[idx] = name;
    s.groups[idx] = g;
  };
  set(feat::kDtMeas, "dt_meas_ps", FeatureGroup::SharedDt);
  char buf[48];
  for (int i = 0; i < 4; ++i) {
    std::snprintf(buf, sizeof(buf), "slab_ts%d_ps", i);
    set(feat::kSlabTs + i, buf, FeatureGroup::SlabTime);
  }
  for (int i = 0; i < 4; ++i) {
    std::snprintf(buf, sizeof(buf), "slab_ts%d_sipm", i);
    set(feat::kSlabTsId + i, buf, FeatureGroup::SlabTime);
  }
  set(feat::kSlabSpread, "slab_ts_spread_ps", FeatureGroup::SlabTime);
  set(feat::kSlabNTs, "slab_n_ts", FeatureGroup::SlabTime);
  for (int i = 0; i < 4; ++i) {
    for (int p = 0; p < 4; ++p) {
      std::snprintf(buf, sizeof(buf), "slab_sipm%d_pix%d", i, p);
      set(feat::kSlabPix + i * 4 + p, buf, FeatureGroup::SlabEnergy);
    }
  }
  set(feat::kSlabEnergy, "slab_energy_kev", FeatureGroup::SlabEnergy);
  set(feat::kSlabPos + 0, "slab_x_mm", FeatureGroup::SlabPos);
  set(feat::kSlabPos + 1, "slab_y_mm", FeatureGroup::SlabPos);
  set(feat::kSlabPos + 2, "slab_doi_mm", FeatureGroup::SlabPos);
  for (int i = 0; i < 3; ++i) {
    std::snprintf(buf, sizeof(buf), "oto_ts%d_ps", i);
    set(feat::kOtoTs + i, buf, FeatureGroup::OtoTime);
  }
  for (int i = 0; i < 3; ++i) {
    std::snprintf(buf, sizeof(buf), "oto_ts%d_sipm", i);
    set(feat::kOtoTsId + i, buf, FeatureGroup::OtoTime);
  }
  set(feat::kOtoSpread, "oto_ts_spread_ps", FeatureGroup::OtoTime);
  set(feat::kOtoNTs, "oto_n_ts", FeatureGroup::OtoTime);
  for (int i = 0; i < 3; ++i) {
    for (int p = 0; p < 4; ++p) {
      std::snprintf(buf, sizeof(buf), "oto_sipm%d_pix%d", i, p);
      set(feat::kOtoPix + i * 4 + p, buf, FeatureGroup::OtoEnergy);
    }
  }
  set(feat::kOtoEnergy, "oto_energy_kev", FeatureGroup::OtoEnergy);
  set(feat::kOtoPos + 0, "oto_x_mm", FeatureGroup::OtoPos);
  set(feat::kOtoPos + 1, "oto_y_mm", FeatureGroup::OtoPos);

  std::string joined;
  for (const auto& n : s.names) {
    joined += n;
    joined += ';';
  }
  s.hash = fnv1a(joined);
  return s;
}

// Saturation-inverted pixel count; pixel counts in features are on the
// detected-optical-photon scale used everywhere else in the chain.
double inverted_pixel(std::uint16_t fired, int n_spad) {
  const double n = static_cast<double>(n_spad);
  const double c = std::min<double>(fired, n_spad - 1);
  return -n * std::log(1.0 - c / n);
}

void fill_side(const Cluster& cl, FeatureVector& f, int ts_off, int id_off,
               int spread_off, int nts_off, int pix_off, int energy_off,
               int pos_off, int pos_dims) {
  const auto ts = process_timestamps(cl);
  const int cap = timestamp_cap(cl.detector_id);
  for (int i = 0; i < cap; ++i) {
    if (i < static_cast<int>(ts.size())) {
      f[ts_off + i] = ts[i];
      f[id_off + i] = static_cast<double>(cl.hits[i].sipm_id);
      for (int p = 0; p < 4; ++p) {
        f[pix_off + i * 4 + p] = inverted_pixel(cl.hits[i].pixel_counts[p], 3200);
      }
    }
  }
  f[spread_off] = cl.timestamp_spread_ps();
  f[nts_off] = static_cast<double>(cl.hits.size());
  f[energy_off] = cl.energy_kev;
  for (int d = 0; d < pos_dims; ++d) f[pos_off + d] = cl.position_mm[d];
}

}  // namespace

const FeatureSchema& FeatureSchema::standard() {
  static const FeatureSchema schema = build_standard_schema();
  return schema;
}

FeatureVector build_features(const Coincidence& c) {
  if (!c.slab.has_energy() || !c.oto.has_energy() || !c.slab.has_position() ||
      !c.oto.has_position()) {
    throw IncompleteClusterError(
        "build_features: cluster lacks energy or position estimate");
  }
  FeatureVector f;
  f.fill(kNaN);
  f[feat::kDtMeas] = c.delta_t_meas_ps;
  fill_side(c.slab, f, feat::kSlabTs, feat::kSlabTsId, feat::kSlabSpread,
            feat::kSlabNTs, feat::kSlabPix, feat::kSlabEnergy, feat::kSlabPos, 3);
  fill_side(c.oto, f, feat::kOtoTs, feat::kOtoTsId, feat::kOtoSpread,
            feat::kOtoNTs, feat::kOtoPix, feat::kOtoEnergy, feat::kOtoPos, 2);
  return f;
}

}  // namespace tofcal
