#pragma once

#include <chrono>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ehrprompt/aggregate.hpp"
#include "ehrprompt/llm_client.hpp"
#include "ehrprompt/metrics.hpp"
#include "ehrprompt/optimizer.hpp"
#include "ehrprompt/records.hpp"
#include "ehrprompt/serializer.hpp"
#include "ehrprompt/tasks.hpp"
#include "ehrprompt/token_budget.hpp"

namespace ehrprompt {

enum class RunMode { text, text_ts_numeric, text_ts_description, ts_only };

RunMode parse_run_mode(const std::string& s);
std::string to_string(RunMode m);

struct EndpointConfig {
  std::string base_url;  // empty: EHRPROMPT_ENDPOINT or the client default
  std::string model = "default";
  double temperature = 0.0;
  int max_new_tokens = 16;
  bool use_logprobs = true;
  int parallelism = 4;
  int max_retries = 3;
  long backoff_ms = 200;
  long timeout_ms = 60000;
  std::string cache_dir;  // empty: EHRPROMPT_CACHE_DIR or no disk cache
};

struct DescriptionConfig {
  std::string template_asset = kDescriptionTemplateAsset;
  double temperature = 0.2;
  int max_new_tokens = 256;
};

struct RunConfig {
  std::string task = "mortality";
  RunMode mode = RunMode::text;
  std::string data;
  std::string catalog;  // empty: built-in catalog
  Split split = Split::test;
  AggregationConfig aggregation;
  OutlierPolicy outlier_policy = OutlierPolicy::clamp;
  std::size_t max_context = 2048;
  std::string tokenizer = "whitespace";
  EndpointConfig endpoint;
  DescriptionConfig description;
  std::string instruction;       // fixed instruction text
  std::string instruction_from;  // path to an optimizer best.json
  int repetitions = 3;
  std::uint64_t seed = 0;
  std::optional<std::size_t> max_records;  // seeded subsample per repetition
  std::string energy_meter_command;        // prints a cumulative joule reading
  std::string output_dir;

  void validate() const;
  // Everything that can change results; output and cache locations are left out.
  nlohmann::json to_json() const;
  static RunConfig from_json(const nlohmann::json& j);
  static RunConfig load(const std::filesystem::path& path);
  // SHA-256 of the canonical (key-sorted) JSON form.
  std::string hash() const;
};

RunConfig ablate_feature(const RunConfig& cfg, const std::string& feature_id, const FeatureCatalog& catalog);

FeatureCatalog load_catalog(const RunConfig& cfg);
ClientOptions client_options(const RunConfig& cfg);
GenerationSettings prediction_settings(const RunConfig& cfg);

struct DataSet {
  std::vector<PatientRecord> records;  // canonicalized
  std::vector<Rejection> rejections;
  std::size_t dropped_events = 0;
};

DataSet load_dataset(const RunConfig& cfg, const FeatureCatalog& catalog);

struct InputTrace {
  TruncationReport truncation;
  std::size_t reserved_tokens = 0;
  std::vector<std::string> description_violations;
};

struct BuiltInput {
  ModelInput input;
  InputTrace trace;
};

// aggregate -> render or describe -> reserve and truncate -> assemble.
class InputPipeline {
 public:
  InputPipeline(const RunConfig& cfg, const TaskSpec& task, const FeatureCatalog& catalog, LlmClient& client,
                std::shared_ptr<const Tokenizer> tokenizer);

  BuiltInput build(const std::string& instruction, const PatientRecord& rec) const;
  InputBuilder as_builder() const;

 private:
  TsRepresentation time_series_for(const PatientRecord& rec, InputTrace& trace) const;

  const RunConfig& cfg_;
  const TaskSpec& task_;
  const FeatureCatalog& catalog_;
  LlmClient& client_;
  std::shared_ptr<const Tokenizer> tokenizer_;
  std::string description_template_;
};

std::string resolve_instruction(const RunConfig& cfg, const TaskSpec& task);

struct PredictionRow {
  int rep = 0;
  PredictionRecord prediction;
};

struct TimingInfo {
  std::vector<double> rep_wall_s;
  double median_wall_s = 0.0;
  double per_100_samples_s = 0.0;
};

struct RunReport {
  std::string config_hash;
  std::vector<MetricsReport> repetitions;
  MetricsReport median;
  TimingInfo timing;
  std::vector<PredictionRow> predictions;
  std::vector<std::string> warnings;
  std::size_t rejected_lines = 0;
  std::size_t truncated_inputs = 0;
  std::size_t description_violations = 0;
  std::vector<std::filesystem::path> artifacts;
};

// Runs cfg.repetitions evaluation passes and persists predictions.jsonl,
// report.json, trace.jsonl, timing.json and config.lock.json under
// cfg.output_dir (when set).
RunReport run_experiment(const RunConfig& cfg, LlmClient& client);
RunReport run_experiment(const RunConfig& cfg);

nlohmann::ordered_json report_to_json(const RunReport& report, const RunConfig& cfg);
std::string predictions_to_jsonl(const RunReport& report, const TaskSpec& task);

struct TimingResult {
  std::size_t n_samples = 0;
  double total_s = 0.0;
  double per_100_s = 0.0;
  std::optional<double> energy_j;  // nullopt: no meter configured

  nlohmann::ordered_json to_json() const;
};

// Wall clock over n sequential, uncached inference calls.
TimingResult time_inference(std::size_t n_samples, const RunConfig& cfg, std::shared_ptr<Transport> transport);

// Runs `command` and parses the first number it prints.
double read_energy_meter(const std::string& command);

}  // namespace ehrprompt
