#include "tofcal/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <memory>

#include "tofcal/detsim.hpp"
#include "tofcal/explain.hpp"
#include "tofcal/fitstat.hpp"
#include "tofcal/io.hpp"
#include "tofcal/prep.hpp"

namespace tofcal::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const char* kSplitNames[4] = {"train", "validation", "test", "performance"};

void require_file(const fs::path& p) {
  if (!fs::exists(p)) {
    throw MissingInputError("missing upstream artifact: " + p.string());
  }
}

std::string hex64(std::uint64_t v) {
  char buf[24];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

void write_stage_summary(const RunPaths& paths, const std::string& stage,
                         json& summary) {
  summary["stage"] = stage;
  const auto errors = io::validate_json(summary, stage_schema(stage));
  if (!errors.empty()) {
    throw std::logic_error("summary does not match schema: " + errors.front());
  }
  io::write_json(paths.summary(stage), summary);
}

}  // namespace

// ---------------------------------------------------------------------------
// shared helpers

FeatureMatrix build_feature_matrix(std::span<const Coincidence> events) {
  FeatureMatrix fm;
  fm.n = events.size();
  fm.m = feat::kCount;
  fm.x.resize(fm.n * fm.m);
  fm.y.resize(fm.n);
  for (std::size_t i = 0; i < fm.n; ++i) {
    const FeatureVector f = build_features(events[i]);
    std::copy(f.begin(), f.end(), fm.x.begin() + i * fm.m);
    fm.y[i] = events[i].label_ps;
  }
  return fm;
}

void apply_calibration(std::vector<Coincidence>& events,
                       std::span<const anacal::CalibrationSolution> solutions) {
  for (Coincidence& c : events) {
    for (const auto& sol : solutions) anacal::apply_solution(c, sol);
  }
}

bool in_energy_window(const Coincidence& c, double lo_kev, double hi_kev) {
  return c.slab.energy_kev >= lo_kev && c.slab.energy_kev <= hi_kev &&
         c.oto.energy_kev >= lo_kev && c.oto.energy_kev <= hi_kev;
}

std::string model_file_name(int depth, double learning_rate) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "model_d%d_lr%g.txt", depth, learning_rate);
  return buf;
}

std::vector<std::size_t> seeded_subset(std::size_t n, std::size_t k,
                                       std::uint64_t seed) {
  k = std::min(k, n);
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  Rng rng(seed, 0x5b5e7ULL, 0);
  for (std::size_t i = 0; i < k; ++i) {
    const std::size_t j = i + rng.next_below(n - i);
    std::swap(idx[i], idx[j]);
  }
  idx.resize(k);
  return idx;
}

std::vector<Coincidence> preprocess_events(std::vector<Coincidence> records,
                                           const PipelineConfig& cfg,
                                           std::size_t* dropped) {
  const double cluster_window = cfg.num("prep.cluster_window_ps");
  const double coinc_window = cfg.num("prep.coincidence_window_ps");
  const double noise_lo = cfg.num("prep.noise_min_photons");
  const double noise_hi = cfg.num("prep.noise_max_photons");

  // Rebuild the per-detector streams and run the full chain; the simulator
  // wrote records in time order so concatenated hits are already sorted.
  std::vector<Hit> slab_stream, oto_stream;
  for (const Coincidence& c : records) {
    slab_stream.insert(slab_stream.end(), c.slab.hits.begin(), c.slab.hits.end());
    oto_stream.insert(oto_stream.end(), c.oto.hits.begin(), c.oto.hits.end());
  }
  auto by_time = [](const Hit& a, const Hit& b) {
    return a.timestamp_ps < b.timestamp_ps;
  };
  std::stable_sort(slab_stream.begin(), slab_stream.end(), by_time);
  std::stable_sort(oto_stream.begin(), oto_stream.end(), by_time);

  auto slab_clusters =
      prep::cluster_hits(slab_stream, DetectorId::Slab, cluster_window);
  auto oto_clusters =
      prep::cluster_hits(oto_stream, DetectorId::OneToOne, cluster_window);

  auto filter = [&](std::vector<Cluster>& clusters) {
    std::vector<Cluster> kept;
    kept.reserve(clusters.size());
    for (Cluster& c : clusters) {
      c.total_photons = prep::cluster_total_photons(c);
      if (prep::passes_noise_filter(c.total_photons, noise_lo, noise_hi)) {
        kept.push_back(std::move(c));
      }
    }
    return kept;
  };
  slab_clusters = filter(slab_clusters);
  oto_clusters = filter(oto_clusters);

  const auto pairs =
      prep::find_coincidences(slab_clusters, oto_clusters, coinc_window);

  // Match paired clusters back to their source records by the slab first
  // timestamp (records and pairs are both in time order).
  std::vector<Coincidence> out;
  out.reserve(pairs.size());
  std::size_t rec = 0;
  std::size_t unmatched = 0;
  for (const auto& p : pairs) {
    const double ts = slab_clusters[p.a_index].first_timestamp_ps();
    while (rec < records.size() &&
           records[rec].slab.first_timestamp_ps() < ts - 0.5) {
      ++rec;
    }
    if (rec >= records.size() ||
        std::abs(records[rec].slab.first_timestamp_ps() - ts) > 0.5) {
      ++unmatched;
      continue;
    }
    Coincidence c;
    c.slab = std::move(slab_clusters[p.a_index]);
    c.oto = std::move(oto_clusters[p.b_index]);
    c.delta_t_meas_ps = p.delta_t_ps;
    c.source_pos_mm = records[rec].source_pos_mm;
    c.label_ps = records[rec].label_ps;
    c.truth = std::move(records[rec].truth);
    out.push_back(std::move(c));
    ++rec;
  }
  if (unmatched > 0) {
    log_warn("preprocess: " + std::to_string(unmatched) +
             " coincidences could not be matched to records");
  }
  if (dropped) *dropped = records.size() - out.size();
  return out;
}

// ---------------------------------------------------------------------------
// simulate

json stage_simulate(const PipelineConfig& cfg, const RunPaths& paths) {
  const fs::path dir = paths.stage("simulate");
  fs::create_directories(dir);

  const auto plan = cfg.campaign_plan();
  const auto params = cfg.sim_params();

  struct FileSink : detsim::CampaignSink {
    std::vector<std::unique_ptr<io::DatasetWriter>> writers;
    void on_event(detsim::Split split, const Coincidence& c) override {
      writers[static_cast<int>(split)]->write(c);
    }
  } sink;
  for (int s = 0; s < 4; ++s) {
    sink.writers.push_back(std::make_unique<io::DatasetWriter>(
        (dir / (std::string(kSplitNames[s]) + ".tfcd")).string(), true,
        (dir / (std::string(kSplitNames[s]) + ".tfct")).string()));
  }
  detsim::run_campaign(plan, params, sink, cfg.threads());

  json datasets = json::object();
  for (int s = 0; s < 4; ++s) {
    sink.writers[s]->close();
    const fs::path data = dir / (std::string(kSplitNames[s]) + ".tfcd");
    datasets[kSplitNames[s]] = {
        {"events", sink.writers[s]->count()},
        {"file", data.filename().string()},
        {"checksum", hex64(io::file_checksum(data.string()))},
    };
  }

  json summary;
  summary["seed"] = cfg.seed();
  summary["n_z_positions"] = plan.z_positions_mm.size();
  summary["n_grid_points"] = plan.n_grid_points();
  summary["events_per_point"] = plan.events_per_point;
  summary["datasets"] = datasets;
  write_stage_summary(paths, "simulate", summary);
  return summary;
}

// ---------------------------------------------------------------------------
// preprocess

json stage_preprocess(const PipelineConfig& cfg, const RunPaths& paths) {
  const fs::path sim_dir = paths.stage("simulate");
  const fs::path dir = paths.stage("preprocess");
  fs::create_directories(dir);

  std::array<std::vector<Coincidence>, 4> events;
  std::array<std::size_t, 4> dropped{};
  std::array<std::size_t, 4> raw_counts{};
  for (int s = 0; s < 4; ++s) {
    const fs::path data = sim_dir / (std::string(kSplitNames[s]) + ".tfcd");
    const fs::path truth = sim_dir / (std::string(kSplitNames[s]) + ".tfct");
    require_file(data);
    require_file(truth);
    auto records = io::read_dataset(data.string(), truth.string());
    raw_counts[s] = records.size();
    events[s] = preprocess_events(std::move(records), cfg, &dropped[s]);
  }

  // Slab positioning is re-learned on simulation ground truth.
  const auto pos_train_max =
      static_cast<std::size_t>(cfg.integer("prep.position_train_events"));
  std::vector<Cluster> pos_clusters;
  std::vector<std::array<double, 3>> pos_truth;
  for (const Coincidence& c : events[0]) {
    if (pos_clusters.size() >= pos_train_max) break;
    if (!c.truth) {
      throw MissingInputError("position model training needs the truth sidecar");
    }
    pos_clusters.push_back(c.slab);
    pos_truth.push_back({c.truth->slab.x_mm, c.truth->slab.y_mm,
                         c.truth->slab.doi_mm});
  }
  if (pos_clusters.size() < 100) {
    throw NumericalError("too few training events for the slab position model");
  }
  const auto pos_model = prep::train_slab_position_model(
      pos_clusters, pos_truth, cfg.position_model_params(), cfg.threads());
  pos_model.save((dir / "position_model.txt").string());

  const auto params = cfg.sim_params();
  auto estimate_positions = [&](std::vector<Coincidence>& evs) {
    for (Coincidence& c : evs) {
      c.slab.position_mm =
          prep::estimate_position(c.slab, params.slab_geom, &pos_model);
      c.oto.position_mm =
          prep::estimate_position(c.oto, params.oto_geom, nullptr);
    }
  };
  for (auto& evs : events) estimate_positions(evs);

  // Held-out residuals of the position model (tail of the train split).
  json pos_rmse = json::object();
  {
    double sx = 0, sy = 0, sd = 0;
    std::size_t n = 0;
    const std::size_t begin = pos_clusters.size();
    for (std::size_t i = begin; i < events[0].size() && n < 20000; ++i, ++n) {
      const auto& c = events[0][i];
      const auto& t = c.truth->slab;
      sx += (c.slab.position_mm[0] - t.x_mm) * (c.slab.position_mm[0] - t.x_mm);
      sy += (c.slab.position_mm[1] - t.y_mm) * (c.slab.position_mm[1] - t.y_mm);
      sd += (c.slab.position_mm[2] - t.doi_mm) * (c.slab.position_mm[2] - t.doi_mm);
    }
    if (n > 0) {
      pos_rmse["x_mm"] = std::sqrt(sx / n);
      pos_rmse["y_mm"] = std::sqrt(sy / n);
      pos_rmse["doi_mm"] = std::sqrt(sd / n);
      pos_rmse["holdout_events"] = n;
    }
  }

  // Voxelized energy calibration from the train split.
  const int nxy = static_cast<int>(cfg.integer("prep.energy_voxels_xy"));
  const int ndoi = static_cast<int>(cfg.integer("prep.energy_voxels_doi"));
  const auto min_events =
      static_cast<std::size_t>(cfg.integer("prep.energy_voxel_min_events"));
  std::vector<Cluster> slab_train, oto_train;
  for (const Coincidence& c : events[0]) {
    slab_train.push_back(c.slab);
    oto_train.push_back(c.oto);
  }
  auto slab_cal = prep::calibrate_energy(slab_train, DetectorId::Slab, nxy, nxy,
                                         ndoi, min_events);
  auto oto_cal = prep::calibrate_energy(oto_train, DetectorId::OneToOne, nxy,
                                        nxy, 1, min_events);
  slab_cal.save((dir / "energy_cal_slab.txt").string());
  oto_cal.save((dir / "energy_cal_oto.txt").string());

  for (auto& evs : events) {
    for (Coincidence& c : evs) {
      c.slab.energy_kev = slab_cal.estimate_energy(c.slab.total_photons,
                                                   c.slab.position_mm);
      c.oto.energy_kev = oto_cal.estimate_energy(c.oto.total_photons,
                                                 c.oto.position_mm);
    }
  }

  json splits = json::object();
  for (int s = 0; s < 4; ++s) {
    const fs::path out = dir / (std::string(kSplitNames[s]) + ".tfpd");
    io::write_prepared(out.string(), events[s]);
    splits[kSplitNames[s]] = {
        {"raw_events", raw_counts[s]},
        {"kept_events", events[s].size()},
        {"dropped_events", dropped[s]},
        {"file", out.filename().string()},
    };
  }

  auto count_fallback = [](const prep::EnergyCalibration& cal) {
    std::size_t n = 0;
    for (auto f : cal.used_fallback) n += f;
    return n;
  };
  json summary;
  summary["splits"] = splits;
  summary["position_model"] = {{"file", "position_model.txt"},
                               {"train_events", pos_clusters.size()},
                               {"holdout_rmse", pos_rmse}};
  summary["energy_calibration"] = {
      {"slab",
       {{"global_peak_photons", slab_cal.global_peak},
        {"fallback_voxels", count_fallback(slab_cal)},
        {"voxels", slab_cal.n_voxels()}}},
      {"oto",
       {{"global_peak_photons", oto_cal.global_peak},
        {"fallback_voxels", count_fallback(oto_cal)},
        {"voxels", oto_cal.n_voxels()}}},
  };
  write_stage_summary(paths, "preprocess", summary);
  return summary;
}

// ---------------------------------------------------------------------------
// calibrate

json stage_calibrate(const PipelineConfig& cfg, const RunPaths& paths) {
  const fs::path prep_dir = paths.stage("preprocess");
  const fs::path dir = paths.stage("calibrate");
  fs::create_directories(dir);

  const fs::path train_file = prep_dir / "train.tfpd";
  require_file(train_file);
  auto train_events = io::read_prepared(train_file.string());

  const auto schedule = cfg.anacal_schedule();
  const auto result = anacal::run_subcalibration_schedule(
      train_events, schedule, cfg.anacal_options());
  anacal::save_solutions(result.solutions, (dir / "calibration.txt").string());

  json iterations = json::array();
  for (const auto& st : result.stats) {
    iterations.push_back({{"iteration", st.iteration},
                          {"max_abs_correction_ps", st.max_abs_correction_ps},
                          {"residual_norm", st.residual_norm},
                          {"ctr_fwhm_ps", st.ctr_fwhm_ps},
                          {"bins_used", st.bins_used},
                          {"bins_skipped", st.bins_skipped}});
  }
  json summary;
  summary["iterations"] = iterations;
  summary["calibration_file"] = "calibration.txt";
  write_stage_summary(paths, "calibrate", summary);
  return summary;
}

// ---------------------------------------------------------------------------
// train

json stage_train(const PipelineConfig& cfg, const RunPaths& paths) {
  const fs::path prep_dir = paths.stage("preprocess");
  const fs::path cal_dir = paths.stage("calibrate");
  const fs::path dir = paths.stage("train");
  fs::create_directories(dir);

  require_file(prep_dir / "train.tfpd");
  require_file(prep_dir / "validation.tfpd");
  require_file(cal_dir / "calibration.txt");

  auto train_events = io::read_prepared((prep_dir / "train.tfpd").string());
  auto valid_events = io::read_prepared((prep_dir / "validation.tfpd").string());
  const auto solutions =
      anacal::load_solutions((cal_dir / "calibration.txt").string());
  apply_calibration(train_events, solutions);
  apply_calibration(valid_events, solutions);

  const auto ftrain = build_feature_matrix(train_events);
  const auto fvalid = build_feature_matrix(valid_events);
  const auto& schema = FeatureSchema::standard();

  const auto depths = cfg.boost_depths();
  const auto rates = cfg.boost_learning_rates();
  const auto results =
      gtb::grid_search(ftrain.view(), fvalid.view(), depths, rates,
                       cfg.boost_base_params(), schema.hash, cfg.threads());
  const std::size_t best = gtb::select_best(results);

  json grid = json::array();
  for (std::size_t i = 0; i < results.size(); ++i) {
    const auto& r = results[i];
    const std::string file = model_file_name(r.hp.max_depth, r.hp.learning_rate);
    gtb::save_ensemble(r.model, (dir / file).string());
    grid.push_back({{"depth", r.hp.max_depth},
                    {"learning_rate", r.hp.learning_rate},
                    {"n_trees", r.model.trees.size()},
                    {"best_iteration", r.log.best_iteration},
                    {"early_stopped", r.log.early_stopped},
                    {"validation_loss_ps2", r.validation_loss},
                    {"model_file", file}});
  }

  json summary;
  summary["grid"] = grid;
  summary["best"] = {{"depth", results[best].hp.max_depth},
                     {"learning_rate", results[best].hp.learning_rate},
                     {"model_file", model_file_name(results[best].hp.max_depth,
                                                    results[best].hp.learning_rate)}};
  summary["schema_hash"] = hex64(schema.hash);
  summary["n_features"] = feat::kCount;
  summary["train_events"] = ftrain.n;
  summary["validation_events"] = fvalid.n;
  write_stage_summary(paths, "train", summary);
  return summary;
}

// ---------------------------------------------------------------------------
// evaluate

namespace {

struct LoadedModel {
  int depth;
  double lr;
  std::string name;
  gtb::TreeEnsemble model;
};

std::vector<LoadedModel> load_models(const json& train_summary,
                                     const fs::path& train_dir) {
  std::vector<LoadedModel> models;
  for (const auto& row : train_summary.at("grid")) {
    LoadedModel m;
    m.depth = row.at("depth");
    m.lr = row.at("learning_rate");
    m.name = "(" + std::to_string(m.depth) + ", " +
             std::to_string(m.lr).substr(0, 3) + ")";
    const fs::path file = train_dir / row.at("model_file").get<std::string>();
    require_file(file);
    m.model = gtb::load_ensemble(file.string(), FeatureSchema::standard().hash);
    models.push_back(std::move(m));
  }
  return models;
}

json gaussian_width_cell(std::vector<double>& samples, std::size_t min_fit) {
  json cell;
  cell["n"] = samples.size();
  try {
    fitstat::GaussFitOptions opts;
    opts.min_samples = std::max<std::size_t>(min_fit, 100);
    const auto fit = fitstat::fit_gaussian(samples, opts);
    const auto fwhm = fitstat::ctr_fwhm(fit);
    cell["ctr_ps"] = fwhm.value_ps;
    cell["ctr_err_ps"] = fwhm.err_ps;
    cell["mu_ps"] = fit.mu;
    cell["chi2_ndf"] = fit.chi2_ndf;
    cell["valid"] = true;
  } catch (const NumericalError& e) {
    cell["valid"] = false;
    cell["error"] = e.what();
  }
  return cell;
}

}  // namespace

json stage_evaluate(const PipelineConfig& cfg, const RunPaths& paths) {
  const fs::path prep_dir = paths.stage("preprocess");
  const fs::path cal_dir = paths.stage("calibrate");
  const fs::path train_dir = paths.stage("train");
  const fs::path dir = paths.stage("evaluate");
  fs::create_directories(dir);

  require_file(prep_dir / "test.tfpd");
  require_file(prep_dir / "performance.tfpd");
  require_file(cal_dir / "calibration.txt");
  require_file(paths.summary("train"));

  auto test_events = io::read_prepared((prep_dir / "test.tfpd").string());
  auto perf_events = io::read_prepared((prep_dir / "performance.tfpd").string());
  const auto solutions =
      anacal::load_solutions((cal_dir / "calibration.txt").string());

  // Uncorrected (raw) time differences on the performance set, for the
  // before-calibration reference row.
  std::vector<double> raw_perf_dt;
  raw_perf_dt.reserve(perf_events.size());
  for (const auto& c : perf_events) raw_perf_dt.push_back(c.delta_t_meas_ps);

  apply_calibration(test_events, solutions);
  apply_calibration(perf_events, solutions);

  const auto train_summary = io::read_json(paths.summary("train"));
  auto models = load_models(train_summary, train_dir);
  const std::string best_file = train_summary.at("best").at("model_file");

  const auto ftest = build_feature_matrix(test_events);
  const auto fperf = build_feature_matrix(perf_events);

  // Model predictions.
  std::vector<std::vector<double>> pred_test(models.size()),
      pred_perf(models.size());
  for (std::size_t m = 0; m < models.size(); ++m) {
    pred_test[m].resize(ftest.n);
    for (std::size_t i = 0; i < ftest.n; ++i) {
      pred_test[m][i] = models[m].model.predict(ftest.view().row(i));
    }
    pred_perf[m].resize(fperf.n);
    for (std::size_t i = 0; i < fperf.n; ++i) {
      pred_perf[m][i] = models[m].model.predict(fperf.view().row(i));
    }
  }

  const auto windows = cfg.energy_windows();
  const auto min_fit =
      static_cast<std::size_t>(cfg.integer("eval.min_fit_samples"));

  // Energy-window index sets.
  std::vector<std::vector<std::size_t>> test_idx(windows.size()),
      perf_idx(windows.size());
  for (std::size_t w = 0; w < windows.size(); ++w) {
    for (std::size_t i = 0; i < test_events.size(); ++i) {
      if (in_energy_window(test_events[i], windows[w].lo_kev, windows[w].hi_kev)) {
        test_idx[w].push_back(i);
      }
    }
    for (std::size_t i = 0; i < perf_events.size(); ++i) {
      if (in_energy_window(perf_events[i], windows[w].lo_kev, windows[w].hi_kev)) {
        perf_idx[w].push_back(i);
      }
    }
  }

  // MAE table (test set), one row per model, one column per window.
  json mae_table = json::array();
  std::vector<std::vector<double>> mae_csv_rows;
  for (std::size_t m = 0; m < models.size(); ++m) {
    json row;
    row["depth"] = models[m].depth;
    row["learning_rate"] = models[m].lr;
    json cells = json::object();
    for (std::size_t w = 0; w < windows.size(); ++w) {
      std::vector<double> lab, prd;
      lab.reserve(test_idx[w].size());
      for (std::size_t i : test_idx[w]) {
        lab.push_back(test_events[i].label_ps);
        prd.push_back(pred_test[m][i]);
      }
      const double v = lab.empty() ? kNaN : fitstat::mae(lab, prd);
      cells[windows[w].name] = v;
      mae_csv_rows.push_back({static_cast<double>(models[m].depth), models[m].lr,
                              static_cast<double>(w), v,
                              static_cast<double>(lab.size())});
    }
    row["mae_ps"] = cells;
    mae_table.push_back(row);
  }
  io::write_csv(dir / "mae_table.csv",
                {"depth", "learning_rate", "window_index", "mae_ps", "n"},
                mae_csv_rows);

  // Per-position MAE breakdown (no energy filter).
  {
    std::vector<double> z(test_events.size());
    for (std::size_t i = 0; i < test_events.size(); ++i) {
      z[i] = test_events[i].source_pos_mm[2];
    }
    std::vector<std::vector<double>> rows;
    for (std::size_t m = 0; m < models.size(); ++m) {
      const auto by_pos = fitstat::mae_by_position(z, ftest.y, pred_test[m]);
      for (const auto& r : by_pos) {
        rows.push_back({static_cast<double>(models[m].depth), models[m].lr,
                        r.z_mm, r.mae_ps, static_cast<double>(r.count)});
      }
    }
    io::write_csv(dir / "mae_by_position.csv",
                  {"depth", "learning_rate", "z_mm", "mae_ps", "n"}, rows);
  }

  // Linearity analysis per model over the retained z range.
  const double z_lo = cfg.num("eval.linearity_z_min_mm");
  const double z_hi = cfg.num("eval.linearity_z_max_mm");
  double lin_lo = 0, lin_hi = 0;
  {
    const std::string& w = cfg.str("eval.linearity_window_kev");
    const auto dash = w.find('-');
    if (dash == std::string::npos) {
      throw ConfigError("eval.linearity_window_kev must be LO-HI");
    }
    lin_lo = std::atof(w.substr(0, dash).c_str());
    lin_hi = std::atof(w.substr(dash + 1).c_str());
  }
  const double c_air = cfg.num("c_air_m_per_s") * 1e-9;
  json linearity = json::array();
  std::vector<std::vector<double>> lin_csv;
  for (std::size_t m = 0; m < models.size(); ++m) {
    std::map<double, std::vector<double>> by_z;
    for (std::size_t i = 0; i < test_events.size(); ++i) {
      const double z = test_events[i].source_pos_mm[2];
      if (z < z_lo || z > z_hi) continue;
      if (!in_energy_window(test_events[i], lin_lo, lin_hi)) continue;
      by_z[z].push_back(pred_test[m][i]);
    }
    std::vector<fitstat::LinearityPoint> points;
    for (auto& [z, vals] : by_z) {
      if (vals.size() < std::max<std::size_t>(min_fit, 100)) continue;
      try {
        fitstat::GaussFitOptions opts;
        opts.min_samples = 100;
        const auto fit = fitstat::fit_gaussian(vals, opts);
        points.push_back({z, 0.1, fit.mu, std::max(fit.mu_err, 1e-6)});
      } catch (const NumericalError&) {
        // skip positions where the fit fails
      }
    }
    json row;
    row["depth"] = models[m].depth;
    row["learning_rate"] = models[m].lr;
    if (points.size() >= 3) {
      const auto fit = fitstat::fit_linearity(points, c_air);
      row["epsilon"] = fit.epsilon;
      row["epsilon_err"] = fit.epsilon_err;
      row["intercept_ps"] = fit.intercept_ps;
      row["intercept_err_ps"] = fit.intercept_err;
      row["n_points"] = fit.n_points;
      row["runs_test_p"] = fitstat::runs_test_pvalue(fit.residuals_ps);
      row["valid"] = true;
      for (std::size_t p = 0; p < points.size(); ++p) {
        lin_csv.push_back({static_cast<double>(models[m].depth), models[m].lr,
                           points[p].z_mm, points[p].mu_ps, points[p].mu_err_ps,
                           fit.residuals_ps[p]});
      }
    } else {
      row["valid"] = false;
    }
    linearity.push_back(row);
  }
  io::write_csv(dir / "linearity.csv",
                {"depth", "learning_rate", "z_mm", "mu_ps", "mu_err_ps",
                 "residual_ps"},
                lin_csv);

  // CTR table on the performance set: raw, analytical, then each model.
  json ctr_table = json::array();
  std::vector<std::vector<double>> ctr_csv;
  auto add_ctr_row = [&](const std::string& label,
                         const std::vector<double>& values, int depth,
                         double lr, int row_kind) {
    json row;
    row["row"] = label;
    json cells = json::object();
    for (std::size_t w = 0; w < windows.size(); ++w) {
      std::vector<double> sel;
      sel.reserve(perf_idx[w].size());
      for (std::size_t i : perf_idx[w]) sel.push_back(values[i]);
      json cell = gaussian_width_cell(sel, min_fit);
      cells[windows[w].name] = cell;
      ctr_csv.push_back({static_cast<double>(row_kind),
                         static_cast<double>(depth), lr,
                         static_cast<double>(w),
                         cell.value("ctr_ps", kNaN),
                         cell.value("ctr_err_ps", kNaN),
                         static_cast<double>(sel.size())});
    }
    row["windows"] = cells;
    if (depth > 0) {
      row["depth"] = depth;
      row["learning_rate"] = lr;
    }
    ctr_table.push_back(row);
  };

  std::vector<double> ana_perf_dt;
  ana_perf_dt.reserve(perf_events.size());
  for (const auto& c : perf_events) ana_perf_dt.push_back(c.delta_t_meas_ps);
  add_ctr_row("raw", raw_perf_dt, 0, 0, 0);
  add_ctr_row("analytical", ana_perf_dt, 0, 0, 1);
  for (std::size_t m = 0; m < models.size(); ++m) {
    add_ctr_row(models[m].name, pred_perf[m], models[m].depth, models[m].lr, 2);
  }
  io::write_csv(dir / "ctr_table.csv",
                {"row_kind", "depth", "learning_rate", "window_index", "ctr_ps",
                 "ctr_err_ps", "n"},
                ctr_csv);

  // Goodness-of-fit per source position for the best model (no energy filter).
  json goodness = json::array();
  {
    std::size_t best_m = 0;
    for (std::size_t m = 0; m < models.size(); ++m) {
      if (model_file_name(models[m].depth, models[m].lr) == best_file) best_m = m;
    }
    std::map<double, std::vector<double>> by_z;
    for (std::size_t i = 0; i < test_events.size(); ++i) {
      by_z[test_events[i].source_pos_mm[2]].push_back(pred_test[best_m][i]);
    }
    fitstat::GaussFitOptions opts;
    opts.min_samples = std::max<std::size_t>(min_fit, 100);
    std::vector<std::vector<double>> rows;
    for (const auto& r : fitstat::goodness_by_position(by_z, opts)) {
      goodness.push_back({{"z_mm", r.z_mm},
                          {"chi2_ndf", r.chi2_ndf},
                          {"mu_ps", r.mu_ps},
                          {"sigma_ps", r.sigma_ps},
                          {"n", r.count},
                          {"valid", r.valid}});
      rows.push_back({r.z_mm, r.chi2_ndf, r.mu_ps, r.sigma_ps,
                      static_cast<double>(r.count), r.valid ? 1.0 : 0.0});
    }
    io::write_csv(dir / "goodness_by_position.csv",
                  {"z_mm", "chi2_ndf", "mu_ps", "sigma_ps", "n", "valid"}, rows);
  }

  json window_names = json::array();
  for (const auto& w : windows) window_names.push_back(w.name);

  json summary;
  summary["windows"] = window_names;
  summary["mae"] = mae_table;
  summary["linearity"] = linearity;
  summary["ctr"] = ctr_table;
  summary["goodness_by_position"] = goodness;
  summary["best_model_file"] = best_file;
  summary["test_events"] = test_events.size();
  summary["performance_events"] = perf_events.size();
  write_stage_summary(paths, "evaluate", summary);
  return summary;
}

// ---------------------------------------------------------------------------
// explain

json stage_explain(const PipelineConfig& cfg, const RunPaths& paths) {
  const fs::path prep_dir = paths.stage("preprocess");
  const fs::path cal_dir = paths.stage("calibrate");
  const fs::path train_dir = paths.stage("train");
  const fs::path dir = paths.stage("explain");
  fs::create_directories(dir);

  require_file(prep_dir / "performance.tfpd");
  require_file(cal_dir / "calibration.txt");
  require_file(paths.summary("train"));

  const auto train_summary = io::read_json(paths.summary("train"));
  const std::string best_file = train_summary.at("best").at("model_file");
  const fs::path model_path = train_dir / best_file;
  require_file(model_path);
  const auto model =
      gtb::load_ensemble(model_path.string(), FeatureSchema::standard().hash);

  auto perf_events = io::read_prepared((prep_dir / "performance.tfpd").string());
  const auto solutions =
      anacal::load_solutions((cal_dir / "calibration.txt").string());
  apply_calibration(perf_events, solutions);

  const auto subset_size =
      static_cast<std::size_t>(cfg.integer("explain.subset_size"));
  const auto subset =
      seeded_subset(perf_events.size(), subset_size, cfg.seed());
  std::vector<Coincidence> sample;
  sample.reserve(subset.size());
  for (std::size_t i : subset) sample.push_back(perf_events[i]);

  const auto fm = build_feature_matrix(sample);
  const auto explanations =
      explain::shap_batch(model, fm.view(), cfg.threads());

  // Local accuracy across the whole subset.
  double max_err = 0;
  for (std::size_t i = 0; i < explanations.size(); ++i) {
    double sum = explanations[i].base_value;
    for (double sv : explanations[i].sv) sum += sv;
    max_err = std::max(max_err,
                       std::abs(sum - model.predict(fm.view().row(i))));
  }

  const auto& schema = FeatureSchema::standard();
  const auto groups = explain::group_importance(explanations, schema);
  json group_table = json::array();
  std::vector<std::vector<double>> group_csv;
  for (std::size_t g = 0; g < groups.size(); ++g) {
    group_table.push_back({{"group", groups[g].name},
                           {"mean_abs_sv_ps", groups[g].mean_abs_sv},
                           {"n_features", groups[g].n_features}});
    group_csv.push_back({static_cast<double>(g), groups[g].mean_abs_sv,
                         static_cast<double>(groups[g].n_features)});
  }
  io::write_csv(dir / "importance_groups.csv",
                {"group_index", "mean_abs_sv_ps", "n_features"}, group_csv);

  const auto per_feature = explain::feature_importance(explanations);
  {
    std::vector<std::vector<double>> rows;
    for (std::size_t f = 0; f < per_feature.size(); ++f) {
      rows.push_back({static_cast<double>(f), per_feature[f]});
    }
    io::write_csv(dir / "importance_features.csv",
                  {"feature_index", "mean_abs_sv_ps"}, rows);
  }

  // Dependence of SV(dt_meas) on dt_meas, colored by the photon count on the
  // SiPM that produced the first timestamp of each side.
  auto color_counts = [&](int pix_offset) {
    std::vector<double> color(fm.n, kNaN);
    for (std::size_t i = 0; i < fm.n; ++i) {
      double sum = 0;
      bool ok = true;
      for (int p = 0; p < 4; ++p) {
        const double v = fm.x[i * fm.m + pix_offset + p];
        if (std::isnan(v)) ok = false;
        else sum += v;
      }
      if (ok) color[i] = sum;
    }
    return color;
  };
  const int dep_bins = static_cast<int>(cfg.integer("explain.dependence_bins"));
  const auto min_bin =
      static_cast<std::size_t>(cfg.integer("explain.min_bin_count"));

  json dependence = json::object();
  for (const auto& [side, offset] :
       std::vector<std::pair<std::string, int>>{{"oto", feat::kOtoPix},
                                                {"slab", feat::kSlabPix}}) {
    const auto color = color_counts(offset);
    const auto rows =
        explain::dependence_scan(explanations, feat::kDtMeas, color);
    const double rho = explain::binned_rank_correlation(rows, dep_bins, min_bin);
    std::vector<std::vector<double>> csv;
    csv.reserve(rows.size());
    for (const auto& r : rows) {
      csv.push_back({r.feature_value, r.sv, r.color_value});
    }
    io::write_csv(dir / ("dependence_" + side + ".csv"),
                  {"dt_meas_ps", "sv_ps", "first_sipm_photons"}, csv);
    dependence[side] = {{"rank_correlation", rho},
                        {"file", "dependence_" + side + ".csv"}};
  }

  json summary;
  summary["best_model_file"] = best_file;
  summary["subset_size"] = sample.size();
  summary["base_value_ps"] =
      explanations.empty() ? 0.0 : explanations[0].base_value;
  summary["local_accuracy_max_err_ps"] = max_err;
  summary["group_importance"] = group_table;
  summary["dependence"] = dependence;
  write_stage_summary(paths, "explain", summary);
  return summary;
}

// ---------------------------------------------------------------------------
// report

json stage_report(const PipelineConfig& cfg, const RunPaths& paths) {
  (void)cfg;
  const fs::path dir = paths.stage("report");
  fs::create_directories(dir);

  json report;
  for (const char* stage :
       {"simulate", "preprocess", "calibrate", "train", "evaluate", "explain"}) {
    const fs::path s = paths.summary(stage);
    require_file(s);
    report[stage] = io::read_json(s);
  }

  // Flat text rendition of the headline tables.
  std::string text;
  text += "CTR [ps] by energy window (performance set)\n";
  for (const auto& row : report["evaluate"]["ctr"]) {
    text += "  " + row["row"].get<std::string>() + ":";
    for (const auto& [name, cell] : row["windows"].items()) {
      char buf[96];
      if (cell.value("valid", false)) {
        std::snprintf(buf, sizeof(buf), "  %s=%.1f+-%.1f", name.c_str(),
                      cell["ctr_ps"].get<double>(),
                      cell["ctr_err_ps"].get<double>());
      } else {
        std::snprintf(buf, sizeof(buf), "  %s=n/a", name.c_str());
      }
      text += buf;
    }
    text += "\n";
  }
  text += "\nMAE [ps] by energy window (test set)\n";
  for (const auto& row : report["evaluate"]["mae"]) {
    char head[64];
    std::snprintf(head, sizeof(head), "  (%d, %.1f):",
                  row["depth"].get<int>(), row["learning_rate"].get<double>());
    text += head;
    for (const auto& [name, v] : row["mae_ps"].items()) {
      char buf[64];
      std::snprintf(buf, sizeof(buf), "  %s=%.2f", name.c_str(),
                    v.get<double>());
      text += buf;
    }
    text += "\n";
  }
  {
    std::ofstream os(dir / "report.txt");
    os << text;
  }

  json summary;
  summary["stages"] = {"simulate", "preprocess", "calibrate",
                       "train",    "evaluate",   "explain"};
  summary["report_file"] = "report.json";
  io::write_json(dir / "report.json", report);
  write_stage_summary(paths, "report", summary);
  return summary;
}

void run_all_stages(const PipelineConfig& cfg, const RunPaths& paths) {
  stage_simulate(cfg, paths);
  stage_preprocess(cfg, paths);
  stage_calibrate(cfg, paths);
  stage_train(cfg, paths);
  stage_evaluate(cfg, paths);
  stage_explain(cfg, paths);
  stage_report(cfg, paths);
}

// ---------------------------------------------------------------------------
// schemas

const json& stage_schema(const std::string& stage) {
  static const std::map<std::string, json> schemas = [] {
    std::map<std::string, json> m;
    m["simulate"] = json::parse(R"({
      "type": "object",
      "required": ["stage", "seed", "datasets", "n_grid_points"],
      "properties": {
        "stage": {"type": "string"},
        "seed": {"type": "integer"},
        "n_grid_points": {"type": "integer"},
        "datasets": {"type": "object"}
      }
    })");
    m["preprocess"] = json::parse(R"({
      "type": "object",
      "required": ["stage", "splits", "position_model", "energy_calibration"],
      "properties": {
        "stage": {"type": "string"},
        "splits": {"type": "object"},
        "position_model": {"type": "object"},
        "energy_calibration": {"type": "object"}
      }
    })");
    m["calibrate"] = json::parse(R"({
      "type": "object",
      "required": ["stage", "iterations", "calibration_file"],
      "properties": {
        "stage": {"type": "string"},
        "calibration_file": {"type": "string"},
        "iterations": {
          "type": "array",
          "items": {
            "type": "object",
            "required": ["iteration", "max_abs_correction_ps", "ctr_fwhm_ps"]
          }
        }
      }
    })");
    m["train"] = json::parse(R"({
      "type": "object",
      "required": ["stage", "grid", "best", "schema_hash", "n_features"],
      "properties": {
        "stage": {"type": "string"},
        "grid": {
          "type": "array",
          "items": {
            "type": "object",
            "required": ["depth", "learning_rate", "n_trees",
                         "validation_loss_ps2", "model_file"]
          }
        },
        "best": {"type": "object", "required": ["model_file"]},
        "schema_hash": {"type": "string"},
        "n_features": {"type": "integer"}
      }
    })");
    m["evaluate"] = json::parse(R"({
      "type": "object",
      "required": ["stage", "windows", "mae", "linearity", "ctr",
                   "goodness_by_position", "best_model_file"],
      "properties": {
        "stage": {"type": "string"},
        "windows": {"type": "array"},
        "mae": {"type": "array"},
        "linearity": {"type": "array"},
        "ctr": {"type": "array"}
      }
    })");
    m["explain"] = json::parse(R"({
      "type": "object",
      "required": ["stage", "best_model_file", "subset_size",
                   "local_accuracy_max_err_ps", "group_importance",
                   "dependence"],
      "properties": {
        "stage": {"type": "string"},
        "subset_size": {"type": "integer"},
        "local_accuracy_max_err_ps": {"type": "number"},
        "group_importance": {"type": "array"},
        "dependence": {"type": "object"}
      }
    })");
    m["report"] = json::parse(R"({
      "type": "object",
      "required": ["stage", "stages", "report_file"],
      "properties": {
        "stage": {"type": "string"},
        "stages": {"type": "array"}
      }
    })");
    return m;
  }();
  const auto it = schemas.find(stage);
  if (it == schemas.end()) {
    throw std::invalid_argument("no schema for stage '" + stage + "'");
  }
  return it->second;
}

}  // namespace tofcal::cli
