#include "tofcal/io.hpp"

#include <cstring>
#include <fstream>

namespace tofcal::io {

namespace {

constexpr char kDataMagic[4] = {'T', 'F', 'C', 'D'};
constexpr char kTruthMagic[4] = {'T', 'F', 'C', 'T'};
constexpr char kPreparedMagic[4] = {'T', 'F', 'P', 'D'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void put(std::FILE* f, const T& v) {
  if (std::fwrite(&v, sizeof(T), 1, f) != 1) {
    throw std::runtime_error("dataset write failed");
  }
}

template <typename T>
T get(std::FILE* f, const std::string& path) {
  T v;
  if (std::fread(&v, sizeof(T), 1, f) != 1) {
    throw std::runtime_error("truncated dataset file: " + path);
  }
  return v;
}

std::FILE* open_for_write(const std::string& path, const char magic[4]) {
  std::FILE* f = std::fopen(path.c_str(), "wb");
  if (!f) throw std::runtime_error("cannot create file: " + path);
  std::fwrite(magic, 1, 4, f);
  const std::uint32_t version = kVersion;
  std::fwrite(&version, sizeof(version), 1, f);
  const std::uint64_t zero = 0;  // record count, patched on close
  std::fwrite(&zero, sizeof(zero), 1, f);
  return f;
}

std::FILE* open_for_read(const std::string& path, const char magic[4],
                         std::uint64_t& n_records) {
  std::FILE* f = std::fopen(path.c_str(), "rb");
  if (!f) throw MissingInputError("cannot open dataset file: " + path);
  char m[4];
  if (std::fread(m, 1, 4, f) != 4 || std::memcmp(m, magic, 4) != 0) {
    std::fclose(f);
    throw std::runtime_error("bad magic in dataset file: " + path);
  }
  const auto version = get<std::uint32_t>(f, path);
  if (version != kVersion) {
    std::fclose(f);
    throw std::runtime_error("unsupported dataset version in " + path);
  }
  n_records = get<std::uint64_t>(f, path);
  return f;
}

void write_cluster(std::FILE* f, const Cluster& c) {
  put<std::uint16_t>(f, static_cast<std::uint16_t>(c.hits.size()));
  for (const Hit& h : c.hits) {
    put<std::uint8_t>(f, h.sipm_id);
    put<double>(f, h.timestamp_ps);
    for (std::uint16_t p : h.pixel_counts) put<std::uint16_t>(f, p);
  }
}

Cluster read_cluster(std::FILE* f, DetectorId det, const std::string& path) {
  Cluster c;
  c.detector_id = det;
  const auto n = get<std::uint16_t>(f, path);
  c.hits.resize(n);
  for (Hit& h : c.hits) {
    h.sipm_id = get<std::uint8_t>(f, path);
    h.timestamp_ps = get<double>(f, path);
    for (auto& p : h.pixel_counts) p = get<std::uint16_t>(f, path);
  }
  return c;
}

void write_truth_side(std::FILE* f, const SimTruthSide& t) {
  put<std::uint16_t>(f, static_cast<std::uint16_t>(t.hit_skew_ps.size()));
  for (std::size_t i = 0; i < t.hit_skew_ps.size(); ++i) {
    put<double>(f, t.hit_skew_ps[i]);
    put<double>(f, t.hit_timewalk_ps[i]);
    put<double>(f, t.hit_jitter_ps[i]);
  }
  put<double>(f, t.x_mm);
  put<double>(f, t.y_mm);
  put<double>(f, t.doi_mm);
  put<double>(f, t.energy_kev);
  put<double>(f, t.rise_jitter_ps);
  put<double>(f, t.incident_photons);
}

SimTruthSide read_truth_side(std::FILE* f, const std::string& path) {
  SimTruthSide t;
  const auto n = get<std::uint16_t>(f, path);
  t.hit_skew_ps.resize(n);
  t.hit_timewalk_ps.resize(n);
  t.hit_jitter_ps.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    t.hit_skew_ps[i] = get<double>(f, path);
    t.hit_timewalk_ps[i] = get<double>(f, path);
    t.hit_jitter_ps[i] = get<double>(f, path);
  }
  t.x_mm = get<double>(f, path);
  t.y_mm = get<double>(f, path);
  t.doi_mm = get<double>(f, path);
  t.energy_kev = get<double>(f, path);
  t.rise_jitter_ps = get<double>(f, path);
  t.incident_photons = get<double>(f, path);
  return t;
}

void patch_count(std::FILE* f, std::uint64_t count) {
  std::fseek(f, 8, SEEK_SET);
  std::fwrite(&count, sizeof(count), 1, f);
}

}  // namespace

DatasetWriter::DatasetWriter(const std::string& path, bool with_truth,
                             const std::string& truth_path) {
  data_ = open_for_write(path, kDataMagic);
  if (with_truth) {
    truth_ = open_for_write(
        truth_path.empty() ? path + ".truth" : truth_path, kTruthMagic);
  }
}

DatasetWriter::~DatasetWriter() {
  try {
    close();
  } catch (...) {
  }
}

void DatasetWriter::write(const Coincidence& c) {
  for (double v : c.source_pos_mm) put<double>(data_, v);
  put<double>(data_, c.label_ps);
  write_cluster(data_, c.slab);
  write_cluster(data_, c.oto);
  if (truth_) {
    if (!c.truth) throw std::runtime_error("truth sidecar requested but event has none");
    write_truth_side(truth_, c.truth->slab);
    write_truth_side(truth_, c.truth->oto);
  }
  ++count_;
}

void DatasetWriter::close() {
  if (data_) {
    patch_count(data_, count_);
    std::fclose(data_);
    data_ = nullptr;
  }
  if (truth_) {
    patch_count(truth_, count_);
    std::fclose(truth_);
    truth_ = nullptr;
  }
}

std::vector<Coincidence> read_dataset(const std::string& path,
                                      const std::string& truth_path) {
  std::uint64_t n = 0;
  std::FILE* f = open_for_read(path, kDataMagic, n);
  std::FILE* tf = nullptr;
  if (!truth_path.empty()) {
    std::uint64_t tn = 0;
    tf = open_for_read(truth_path, kTruthMagic, tn);
    if (tn != n) {
      std::fclose(f);
      std::fclose(tf);
      throw std::runtime_error("truth sidecar record count mismatch: " + truth_path);
    }
  }
  std::vector<Coincidence> events;
  events.reserve(n);
  for (std::uint64_t i = 0; i < n; ++i) {
    Coincidence c;
    for (double& v : c.source_pos_mm) v = get<double>(f, path);
    c.label_ps = get<double>(f, path);
    c.slab = read_cluster(f, DetectorId::Slab, path);
    c.oto = read_cluster(f, DetectorId::OneToOne, path);
    c.delta_t_meas_ps =
        c.slab.first_timestamp_ps() - c.oto.first_timestamp_ps();
    if (tf) {
      SimTruth t;
      t.slab = read_truth_side(tf, truth_path);
      t.oto = read_truth_side(tf, truth_path);
      c.truth = std::move(t);
    }
    events.push_back(std::move(c));
  }
  std::fclose(f);
  if (tf) std::fclose(tf);
  return events;
}

void write_prepared(const std::string& path, std::span<const Coincidence> events) {
  std::FILE* f = open_for_write(path, kPreparedMagic);
  for (const Coincidence& c : events) {
    for (double v : c.source_pos_mm) put<double>(f, v);
    put<double>(f, c.label_ps);
    for (const Cluster* cl : {&c.slab, &c.oto}) {
      write_cluster(f, *cl);
      put<double>(f, cl->total_photons);
      put<double>(f, cl->energy_kev);
      for (double v : cl->position_mm) put<double>(f, v);
    }
  }
  patch_count(f, events.size());
  std::fclose(f);
}

std::vector<Coincidence> read_prepared(const std::string& path) {
  std::uint64_t n = 0;
  std::FILE* f = open_for_read(path, kPreparedMagic, n);
  std::vector<Coincidence> events;
  events.reserve(n);
  for (std::uint64_t i = 0; i < n; ++i) {
    Coincidence c;
    for (double& v : c.source_pos_mm) v = get<double>(f, path);
    c.label_ps = get<double>(f, path);
    auto read_side = [&](DetectorId det) {
      Cluster cl = read_cluster(f, det, path);
      cl.total_photons = get<double>(f, path);
      cl.energy_kev = get<double>(f, path);
      for (double& v : cl.position_mm) v = get<double>(f, path);
      return cl;
    };
    c.slab = read_side(DetectorId::Slab);
    c.oto = read_side(DetectorId::OneToOne);
    c.delta_t_meas_ps =
        c.slab.first_timestamp_ps() - c.oto.first_timestamp_ps();
    events.push_back(std::move(c));
  }
  std::fclose(f);
  return events;
}

void export_dataset_csv(const std::string& dataset_path,
                        const std::string& csv_path) {
  const auto events = read_dataset(dataset_path);
  std::ofstream os(csv_path);
  if (!os) throw std::runtime_error("cannot create csv file: " + csv_path);
  os << "record,source_x_mm,source_y_mm,source_z_mm,label_ps,detector,hit,"
        "sipm_id,timestamp_ps,pix0,pix1,pix2,pix3\n";
  char buf[256];
  for (std::size_t r = 0; r < events.size(); ++r) {
    const Coincidence& c = events[r];
    for (const Cluster* cl : {&c.slab, &c.oto}) {
      for (std::size_t h = 0; h < cl->hits.size(); ++h) {
        const Hit& hit = cl->hits[h];
        std::snprintf(buf, sizeof(buf),
                      "%zu,%.6g,%.6g,%.6g,%.9g,%s,%zu,%u,%.9f,%u,%u,%u,%u\n", r,
                      c.source_pos_mm[0], c.source_pos_mm[1], c.source_pos_mm[2],
                      c.label_ps, detector_name(cl->detector_id), h,
                      static_cast<unsigned>(hit.sipm_id), hit.timestamp_ps,
                      hit.pixel_counts[0], hit.pixel_counts[1],
                      hit.pixel_counts[2], hit.pixel_counts[3]);
        os << buf;
      }
    }
  }
}

std::uint64_t file_checksum(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw MissingInputError("cannot open file for checksum: " + path);
  std::uint64_t h = 0xcbf29ce484222325ULL;
  char buf[65536];
  while (is) {
    is.read(buf, sizeof(buf));
    const std::streamsize got = is.gcount();
    for (std::streamsize i = 0; i < got; ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 0x100000001b3ULL;
    }
  }
  return h;
}

void write_json(const std::filesystem::path& path, const nlohmann::json& j) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot create json file: " + path.string());
  os << j.dump(2) << "\n";
}

nlohmann::json read_json(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw MissingInputError("cannot open json file: " + path.string());
  nlohmann::json j;
  is >> j;
  return j;
}

std::vector<std::string> validate_json(const nlohmann::json& instance,
                                       const nlohmann::json& schema,
                                       const std::string& where) {
  std::vector<std::string> errors;
  if (schema.contains("type")) {
    const std::string type = schema["type"];
    bool ok = true;
    if (type == "object") ok = instance.is_object();
    else if (type == "array") ok = instance.is_array();
    else if (type == "string") ok = instance.is_string();
    else if (type == "number") ok = instance.is_number();
    else if (type == "integer") ok = instance.is_number_integer();
    else if (type == "boolean") ok = instance.is_boolean();
    if (!ok) {
      errors.push_back(where + ": expected " + type);
      return errors;
    }
  }
  if (schema.contains("required") && instance.is_object()) {
    for (const auto& key : schema["required"]) {
      if (!instance.contains(key.get<std::string>())) {
        errors.push_back(where + ": missing required key '" +
                         key.get<std::string>() + "'");
      }
    }
  }
  if (schema.contains("properties") && instance.is_object()) {
    for (const auto& [key, sub] : schema["properties"].items()) {
      if (instance.contains(key)) {
        const auto child = validate_json(instance[key], sub, where + "." + key);
        errors.insert(errors.end(), child.begin(), child.end());
      }
    }
  }
  if (schema.contains("items") && instance.is_array()) {
    std::size_t i = 0;
    for (const auto& item : instance) {
      const auto child = validate_json(item, schema["items"],
                                       where + "[" + std::to_string(i) + "]");
      errors.insert(errors.end(), child.begin(), child.end());
      ++i;
    }
  }
  return errors;
}

void write_csv(const std::filesystem::path& path,
               const std::vector<std::string>& header,
               const std::vector<std::vector<double>>& rows) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot create csv file: " + path.string());
  for (std::size_t i = 0; i < header.size(); ++i) {
    os << header[i] << (i + 1 < header.size() ? "," : "\n");
  }
  char buf[40];
  for (const auto& row : rows) {
    for (std::size_t i = 0; i < row.size(); ++i) {
      std::snprintf(buf, sizeof(buf), "%.10g", row[i]);
      os << buf << (i + 1 < row.size() ? "," : "\n");
    }
  }
}

}  // namespace tofcal::io
