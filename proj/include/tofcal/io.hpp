#pragma once

#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "tofcal/core.hpp"

namespace tofcal::io {

// Binary coincidence dataset ('TFCD'), little-endian fixed-width records:
// source xyz (f64[3]), label_ps (f64), then per side a u16 hit count followed
// by hits of {u8 sipm_id, f64 timestamp_ps, u16 pixel_counts[4]}.
// The truth sidecar ('TFCT') carries per-record injected contributions in the
// same record order. Prepared datasets ('TFPD') extend each side with
// total_photons, energy_kev and position estimates.

class DatasetWriter {
 public:
  DatasetWriter(const std::string& path, bool with_truth,
                const std::string& truth_path = "");
  ~DatasetWriter();
  DatasetWriter(const DatasetWriter&) = delete;
  DatasetWriter& operator=(const DatasetWriter&) = delete;

  void write(const Coincidence& c);
  void close();  // patches record counts into the headers
  std::size_t count() const { return count_; }

 private:
  std::FILE* data_ = nullptr;
  std::FILE* truth_ = nullptr;
  std::size_t count_ = 0;
};

std::vector<Coincidence> read_dataset(const std::string& path,
                                      const std::string& truth_path = "");

void write_prepared(const std::string& path, std::span<const Coincidence> events);
std::vector<Coincidence> read_prepared(const std::string& path);

void export_dataset_csv(const std::string& dataset_path,
                        const std::string& csv_path);

std::uint64_t file_checksum(const std::string& path);

// JSON helpers (stable key order, deterministic formatting).
void write_json(const std::filesystem::path& path, const nlohmann::json& j);
nlohmann::json read_json(const std::filesystem::path& path);

// Minimal structural validation: type/required/properties/items.
std::vector<std::string> validate_json(const nlohmann::json& instance,
                                       const nlohmann::json& schema,
                                       const std::string& where = "$");

void write_csv(const std::filesystem::path& path,
               const std::vector<std::string>& header,
               const std::vector<std::vector<double>>& rows);

}  // namespace tofcal::io
