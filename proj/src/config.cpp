#include "tofcal/config.hpp"

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <sstream>

namespace tofcal::cli {

namespace {

enum class KeyType { Num, Int, Bool, Str };

struct KeyDef {
  const char* key;
  KeyType type;
  const char* default_value;
};

// The full key registry; every physical quantity carries its unit in the key.
const KeyDef kRegistry[] = {
    {"seed", KeyType::Int, "1"},
    {"threads", KeyType::Int, "1"},
    {"c_air_m_per_s", KeyType::Num, "2.99792458e8"},

    {"geometry.detector_spacing_mm", KeyType::Num, "435.0"},
    {"geometry.crystal_height_mm", KeyType::Num, "19.0"},
    {"geometry.pixel_pitch_mm", KeyType::Num, "4.0"},

    {"campaign.z_min_mm", KeyType::Num, "-130.0"},
    {"campaign.z_max_mm", KeyType::Num, "100.0"},
    {"campaign.z_step_mm", KeyType::Num, "5.0"},
    {"campaign.grid_min_mm", KeyType::Num, "-12.0"},
    {"campaign.grid_max_mm", KeyType::Num, "12.0"},
    {"campaign.grid_step_mm", KeyType::Num, "6.0"},

    {"sim.events_per_point", KeyType::Int, "80"},
    {"sim.performance_events", KeyType::Int, "120000"},
    {"sim.split_train", KeyType::Num, "0.6"},
    {"sim.split_validation", KeyType::Num, "0.2"},
    {"sim.split_test", KeyType::Num, "0.2"},
    {"sim.attenuation_length_mm", KeyType::Num, "12.0"},
    {"sim.optical_delay_ps_per_mm", KeyType::Num, "6.0"},
    {"sim.trigger_threshold_photons", KeyType::Num, "50.0"},
    {"sim.event_spacing_ps", KeyType::Num, "1.0e6"},
    {"sim.photopeak_fraction", KeyType::Num, "0.62"},
    {"sim.compton_min_kev", KeyType::Num, "50.0"},
    {"sim.compton_max_kev", KeyType::Num, "340.0"},
    {"sim.photopeak_count_slab", KeyType::Num, "2300.0"},
    {"sim.photopeak_count_oto", KeyType::Num, "2800.0"},
    {"sim.energy_resolution_slab", KeyType::Num, "0.113"},
    {"sim.energy_resolution_oto", KeyType::Num, "0.104"},
    {"sim.light_oto_main_fraction", KeyType::Num, "0.90"},
    {"sim.light_oto_edge_fraction", KeyType::Num, "0.018"},
    {"sim.light_oto_diag_fraction", KeyType::Num, "0.007"},
    {"sim.light_slab_sigma_base_mm", KeyType::Num, "1.2"},
    {"sim.light_slab_sigma_slope", KeyType::Num, "0.32"},
    {"sim.light_slab_column_leak", KeyType::Num, "0.06"},

    {"skew.channel_spread_ps", KeyType::Num, "100.0"},
    {"skew.timewalk_enabled", KeyType::Bool, "true"},
    {"skew.timewalk_scale_ps", KeyType::Num, "60.0"},
    {"skew.timewalk_ref_count", KeyType::Num, "2000.0"},
    {"skew.timewalk_power", KeyType::Num, "0.7"},
    {"skew.jitter_floor_ps", KeyType::Num, "45.0"},
    {"skew.jitter_scale_ps", KeyType::Num, "1600.0"},
    {"skew.rise_jitter_ps", KeyType::Num, "22.0"},

    {"prep.cluster_window_ps", KeyType::Num, "40000.0"},
    {"prep.coincidence_window_ps", KeyType::Num, "10000.0"},
    {"prep.noise_min_photons", KeyType::Num, "400.0"},
    {"prep.noise_max_photons", KeyType::Num, "4000.0"},
    {"prep.energy_voxels_xy", KeyType::Int, "8"},
    {"prep.energy_voxels_doi", KeyType::Int, "5"},
    {"prep.energy_voxel_min_events", KeyType::Int, "200"},
    {"prep.position_train_events", KeyType::Int, "30000"},
    {"prep.position_max_depth", KeyType::Int, "8"},
    {"prep.position_learning_rate", KeyType::Num, "0.3"},
    {"prep.position_n_max", KeyType::Int, "150"},
    {"prep.position_min_samples_leaf", KeyType::Int, "50"},

    {"anacal.min_bin_events", KeyType::Int, "50"},
    {"anacal.gauss_fit_min_events", KeyType::Int, "200"},
    // Comma-separated iterations: "sipm" or slab NXxNYxNDOI ":" oto NXxNY.
    {"anacal.schedule", KeyType::Str, "sipm,4x2x2:4x4,8x4x3:8x8"},

    {"boost.depths", KeyType::Str, "12,15,18,20"},
    {"boost.learning_rates", KeyType::Str, "0.1,0.3,0.5"},
    {"boost.n_max", KeyType::Int, "500"},
    {"boost.early_stopping_rounds", KeyType::Int, "10"},
    {"boost.min_samples_leaf", KeyType::Int, "20"},
    {"boost.histogram_bins", KeyType::Int, "256"},

    {"eval.energy_windows", KeyType::Str, "all,300-700,450-550"},
    {"eval.linearity_z_min_mm", KeyType::Num, "-75.0"},
    {"eval.linearity_z_max_mm", KeyType::Num, "45.0"},
    {"eval.linearity_window_kev", KeyType::Str, "300-700"},
    {"eval.min_fit_samples", KeyType::Int, "1000"},

    {"explain.subset_size", KeyType::Int, "100000"},
    {"explain.dependence_bins", KeyType::Int, "20"},
    {"explain.min_bin_count", KeyType::Int, "50"},
};

const KeyDef* find_key(const std::string& key) {
  for (const auto& def : kRegistry) {
    if (key == def.key) return &def;
  }
  return nullptr;
}

std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

void check_value(const KeyDef& def, const std::string& value) {
  switch (def.type) {
    case KeyType::Num: {
      char* end = nullptr;
      std::strtod(value.c_str(), &end);
      if (end == value.c_str() || *end != '\0') {
        throw ConfigError("config key '" + std::string(def.key) +
                          "' expects a number, got '" + value + "'");
      }
      break;
    }
    case KeyType::Int: {
      char* end = nullptr;
      std::strtoll(value.c_str(), &end, 10);
      if (end == value.c_str() || *end != '\0') {
        throw ConfigError("config key '" + std::string(def.key) +
                          "' expects an integer, got '" + value + "'");
      }
      break;
    }
    case KeyType::Bool:
      if (value != "true" && value != "false") {
        throw ConfigError("config key '" + std::string(def.key) +
                          "' expects true/false, got '" + value + "'");
      }
      break;
    case KeyType::Str:
      break;
  }
}

}  // namespace

PipelineConfig::PipelineConfig() {
  for (const auto& def : kRegistry) values_[def.key] = def.default_value;
}

PipelineConfig PipelineConfig::from_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw MissingInputError("cannot open config file: " + path);
  std::stringstream ss;
  ss << is.rdbuf();
  return from_string(ss.str());
}

PipelineConfig PipelineConfig::from_string(const std::string& text) {
  PipelineConfig cfg;
  std::istringstream is(text);
  std::string line;
  int line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(line_no) +
                        ": expected 'key = value', got '" + line + "'");
    }
    cfg.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return cfg;
}

void PipelineConfig::set(const std::string& key, const std::string& value) {
  const KeyDef* def = find_key(key);
  if (!def) throw ConfigError("unknown config key: '" + key + "'");
  check_value(*def, value);
  values_[key] = value;
}

bool PipelineConfig::has_key(const std::string& key) const {
  return find_key(key) != nullptr;
}

double PipelineConfig::num(const std::string& key) const {
  const auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError("unknown config key: '" + key + "'");
  return std::strtod(it->second.c_str(), nullptr);
}

long long PipelineConfig::integer(const std::string& key) const {
  const auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError("unknown config key: '" + key + "'");
  return std::strtoll(it->second.c_str(), nullptr, 10);
}

bool PipelineConfig::boolean(const std::string& key) const {
  const auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError("unknown config key: '" + key + "'");
  return it->second == "true";
}

const std::string& PipelineConfig::str(const std::string& key) const {
  const auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError("unknown config key: '" + key + "'");
  return it->second;
}

std::uint64_t PipelineConfig::seed() const {
  return static_cast<std::uint64_t>(integer("seed"));
}

int PipelineConfig::threads() const {
  const long long t = integer("threads");
  return t <= 0 ? 1 : static_cast<int>(t);
}

detsim::SimParams PipelineConfig::sim_params() const {
  detsim::SimParams p;
  const double spacing = num("geometry.detector_spacing_mm");
  const double height = num("geometry.crystal_height_mm");
  const double pitch = num("geometry.pixel_pitch_mm");
  for (DetectorGeometry* g : {&p.slab_geom, &p.oto_geom}) {
    g->detector_spacing_mm = spacing;
    g->crystal_height_mm = height;
    g->pitch_mm = pitch;
  }

  const double spread = num("skew.channel_spread_ps");
  p.skew = spread > 0 ? detsim::SkewModel::with_random_skews(seed(), spread)
                      : detsim::SkewModel{};
  p.skew.timewalk.enabled = boolean("skew.timewalk_enabled");
  p.skew.timewalk.scale_ps = num("skew.timewalk_scale_ps");
  p.skew.timewalk.ref_count = num("skew.timewalk_ref_count");
  p.skew.timewalk.power = num("skew.timewalk_power");
  p.skew.photon_jitter.floor_ps = num("skew.jitter_floor_ps");
  p.skew.photon_jitter.scale_ps = num("skew.jitter_scale_ps");
  p.skew.rise_jitter_ps = num("skew.rise_jitter_ps");

  p.light.oto_main_fraction = num("sim.light_oto_main_fraction");
  p.light.oto_edge_fraction = num("sim.light_oto_edge_fraction");
  p.light.oto_diag_fraction = num("sim.light_oto_diag_fraction");
  p.light.slab_sigma_base_mm = num("sim.light_slab_sigma_base_mm");
  p.light.slab_sigma_slope = num("sim.light_slab_sigma_slope");
  p.light.slab_column_leak = num("sim.light_slab_column_leak");

  p.energy.photopeak_fraction = num("sim.photopeak_fraction");
  p.energy.compton_min_kev = num("sim.compton_min_kev");
  p.energy.compton_max_kev = num("sim.compton_max_kev");
  p.energy.photopeak_count_slab = num("sim.photopeak_count_slab");
  p.energy.photopeak_count_oto = num("sim.photopeak_count_oto");
  p.energy.resolution_slab = num("sim.energy_resolution_slab");
  p.energy.resolution_oto = num("sim.energy_resolution_oto");

  p.attenuation_length_mm = num("sim.attenuation_length_mm");
  p.optical_delay_ps_per_mm = num("sim.optical_delay_ps_per_mm");
  p.trigger_threshold_photons = num("sim.trigger_threshold_photons");
  p.event_spacing_ps = num("sim.event_spacing_ps");
  p.c_air_mm_per_ps = num("c_air_m_per_s") * 1e-9;  // m/s -> mm/ps
  return p;
}

detsim::CampaignPlan PipelineConfig::campaign_plan() const {
  detsim::CampaignPlan plan;
  plan.z_positions_mm.clear();
  const double z0 = num("campaign.z_min_mm"), z1 = num("campaign.z_max_mm");
  const double dz = num("campaign.z_step_mm");
  if (dz <= 0) throw ConfigError("campaign.z_step_mm must be positive");
  for (double z = z0; z <= z1 + 1e-9; z += dz) plan.z_positions_mm.push_back(z);
  plan.xy_grid_mm.clear();
  const double g0 = num("campaign.grid_min_mm"), g1 = num("campaign.grid_max_mm");
  const double dg = num("campaign.grid_step_mm");
  if (dg <= 0) throw ConfigError("campaign.grid_step_mm must be positive");
  for (double x = g0; x <= g1 + 1e-9; x += dg) {
    for (double y = g0; y <= g1 + 1e-9; y += dg) {
      plan.xy_grid_mm.push_back({x, y});
    }
  }
  plan.events_per_point = static_cast<int>(integer("sim.events_per_point"));
  plan.performance_events = static_cast<int>(integer("sim.performance_events"));
  plan.rng_seed = seed();
  plan.split_train = num("sim.split_train");
  plan.split_validation = num("sim.split_validation");
  plan.split_test = num("sim.split_test");
  return plan;
}

std::vector<anacal::ScheduleEntry> PipelineConfig::anacal_schedule() const {
  std::vector<anacal::ScheduleEntry> schedule;
  std::istringstream is(str("anacal.schedule"));
  const double half = 0.5 * num("geometry.pixel_pitch_mm") * 8;
  const double height = num("geometry.crystal_height_mm");
  std::string item;
  while (std::getline(is, item, ',')) {
    item = trim(item);
    if (item.empty()) continue;
    anacal::ScheduleEntry entry;
    if (item == "sipm") {
      entry.slab = anacal::Voxelization::sipm();
      entry.oto = anacal::Voxelization::sipm();
    } else {
      const auto colon = item.find(':');
      if (colon == std::string::npos) {
        throw ConfigError("anacal.schedule entry '" + item +
                          "' must be 'sipm' or 'AxBxC:DxE'");
      }
      auto parse_dims = [&](const std::string& s, bool with_doi) {
        int d[3] = {1, 1, 1};
        int idx = 0;
        std::istringstream ds(s);
        std::string part;
        while (std::getline(ds, part, 'x')) {
          if (idx >= 3 || part.empty()) break;
          d[idx++] = std::atoi(part.c_str());
        }
        if (idx < 2 || d[0] <= 0 || d[1] <= 0 || d[2] <= 0 ||
            (!with_doi && idx > 2)) {
          throw ConfigError("bad voxel grid '" + s + "' in anacal.schedule");
        }
        return anacal::Voxelization::spatial(d[0], d[1], d[2]);
      };
      entry.slab = parse_dims(item.substr(0, colon), true);
      entry.oto = parse_dims(item.substr(colon + 1), false);
    }
    for (anacal::Voxelization* v : {&entry.slab, &entry.oto}) {
      v->half_extent_mm = half;
      v->height_mm = height;
    }
    schedule.push_back(entry);
  }
  if (schedule.empty()) throw ConfigError("anacal.schedule is empty");
  return schedule;
}

anacal::MeanDtOptions PipelineConfig::anacal_options() const {
  anacal::MeanDtOptions opts;
  opts.min_bin_events = static_cast<std::size_t>(integer("anacal.min_bin_events"));
  opts.gauss_fit_min = static_cast<std::size_t>(integer("anacal.gauss_fit_min_events"));
  return opts;
}

gtb::HyperParams PipelineConfig::boost_base_params() const {
  gtb::HyperParams hp;
  hp.n_max = static_cast<int>(integer("boost.n_max"));
  hp.early_stopping_rounds = static_cast<int>(integer("boost.early_stopping_rounds"));
  hp.min_samples_leaf = static_cast<int>(integer("boost.min_samples_leaf"));
  hp.histogram_bins = static_cast<int>(integer("boost.histogram_bins"));
  return hp;
}

std::vector<int> PipelineConfig::boost_depths() const {
  std::vector<int> out;
  for (double v : parse_number_list(str("boost.depths"))) {
    out.push_back(static_cast<int>(v));
  }
  if (out.empty()) throw ConfigError("boost.depths is empty");
  return out;
}

std::vector<double> PipelineConfig::boost_learning_rates() const {
  auto out = parse_number_list(str("boost.learning_rates"));
  if (out.empty()) throw ConfigError("boost.learning_rates is empty");
  return out;
}

gtb::HyperParams PipelineConfig::position_model_params() const {
  gtb::HyperParams hp;
  hp.max_depth = static_cast<int>(integer("prep.position_max_depth"));
  hp.learning_rate = num("prep.position_learning_rate");
  hp.n_max = static_cast<int>(integer("prep.position_n_max"));
  hp.min_samples_leaf = static_cast<int>(integer("prep.position_min_samples_leaf"));
  return hp;
}

std::vector<PipelineConfig::EnergyWindow> PipelineConfig::energy_windows() const {
  std::vector<EnergyWindow> windows;
  std::istringstream is(str("eval.energy_windows"));
  std::string item;
  while (std::getline(is, item, ',')) {
    item = trim(item);
    if (item.empty()) continue;
    if (item == "all") {
      windows.push_back({"all", -std::numeric_limits<double>::infinity(),
                         std::numeric_limits<double>::infinity()});
      continue;
    }
    const auto dash = item.find('-');
    if (dash == std::string::npos) {
      throw ConfigError("energy window '" + item + "' must be 'all' or 'LO-HI'");
    }
    EnergyWindow w;
    w.lo_kev = std::atof(item.substr(0, dash).c_str());
    w.hi_kev = std::atof(item.substr(dash + 1).c_str());
    if (w.hi_kev <= w.lo_kev) {
      throw ConfigError("energy window '" + item + "' is empty");
    }
    w.name = item;
    windows.push_back(w);
  }
  if (windows.empty()) throw ConfigError("eval.energy_windows is empty");
  return windows;
}

std::string PipelineConfig::dump() const {
  std::ostringstream os;
  for (const auto& [k, v] : values_) os << k << " = " << v << "\n";
  return os.str();
}

const std::vector<std::string>& PipelineConfig::known_keys() {
  static const std::vector<std::string> keys = [] {
    std::vector<std::string> k;
    for (const auto& def : kRegistry) k.push_back(def.key);
    return k;
  }();
  return keys;
}

std::vector<double> parse_number_list(const std::string& text) {
  std::vector<double> out;
  std::istringstream is(text);
  std::string item;
  while (std::getline(is, item, ',')) {
    item = trim(item);
    if (item.empty()) continue;
    char* end = nullptr;
    const double v = std::strtod(item.c_str(), &end);
    if (end == item.c_str()) {
      throw ConfigError("cannot parse number '" + item + "' in list");
    }
    out.push_back(v);
  }
  return out;
}

}  // namespace tofcal::cli
