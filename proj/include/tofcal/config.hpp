#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "tofcal/anacal.hpp"
#include "tofcal/detsim.hpp"
#include "tofcal/gtb.hpp"
#include "tofcal/util.hpp"

namespace tofcal::cli {

// Flat key-value configuration with dotted section names. Keys carry their
// unit as a suffix (_ps, _mm, _kev). Unknown keys are rejected; command-line
// flags override file values.
class PipelineConfig {
 public:
  PipelineConfig();  // defaults

  static PipelineConfig from_file(const std::string& path);
  static PipelineConfig from_string(const std::string& text);

  void set(const std::string& key, const std::string& value);  // validates key
  bool has_key(const std::string& key) const;

  double num(const std::string& key) const;
  long long integer(const std::string& key) const;
  bool boolean(const std::string& key) const;
  const std::string& str(const std::string& key) const;

  // Materialized sub-configurations.
  detsim::SimParams sim_params() const;
  detsim::CampaignPlan campaign_plan() const;
  std::vector<anacal::ScheduleEntry> anacal_schedule() const;
  anacal::MeanDtOptions anacal_options() const;
  gtb::HyperParams boost_base_params() const;
  std::vector<int> boost_depths() const;
  std::vector<double> boost_learning_rates() const;
  gtb::HyperParams position_model_params() const;

  struct EnergyWindow {
    std::string name;
    double lo_kev;
    double hi_kev;
  };
  std::vector<EnergyWindow> energy_windows() const;

  std::uint64_t seed() const;
  int threads() const;

  // Stable serialization of the effective configuration (sorted keys).
  std::string dump() const;

  static const std::vector<std::string>& known_keys();

 private:
  std::map<std::string, std::string> values_;
};

std::vector<double> parse_number_list(const std::string& text);

}  // namespace tofcal::cli
