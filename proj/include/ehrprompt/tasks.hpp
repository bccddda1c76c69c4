#pragma once

#include <string>
#include <vector>

#include "ehrprompt/llm_client.hpp"
#include "ehrprompt/metrics.hpp"
#include "ehrprompt/records.hpp"

namespace ehrprompt {

enum class TaskKind { multiclass, scored_binary };

enum class InputShape { note, premise_hypothesis, sentence_pair, note_with_ts };

struct TaskSpec {
  std::string id;
  TaskKind kind = TaskKind::multiclass;
  LabelSchema schema;
  InputShape shape = InputShape::note;
  std::string description;  // plain task description; also the seed instruction
  std::string query;        // question plus answer format, appended last
  ScoreOptions score_options;

  bool supports_time_series() const { return shape == InputShape::note_with_ts; }

  // Text that goes in the note slot of the model input.
  std::string text_for(const PatientRecord& rec) const;

  // Canonical gold label (multiclass) or 0/1 flag rendered as "0"/"1" (scored).
  std::string gold_label(const PatientRecord& rec) const;
  int gold_flag(const PatientRecord& rec) const;
};

const TaskSpec& task_spec(const std::string& id);
std::vector<std::string> task_ids();

// similar iff score > 3.0; scores outside [0, 5] are rejected.
std::string binarize_clinsts(double similarity);

// One endpoint call for one record. Endpoint errors are rethrown as LlmError
// carrying the record id.
PredictionRecord predict(const TaskSpec& task, const PatientRecord& rec, const ModelInput& input, LlmClient& client,
                         const GenerationSettings& settings);

// The prediction recorded when the endpoint gave up on a record.
PredictionRecord fallback_prediction(const TaskSpec& task, const PatientRecord& rec);

enum class MetricId { micro_f1, macro_f1, auroc, auprc };

MetricId parse_metric(const std::string& s);
std::string to_string(MetricId m);
bool metric_applies(MetricId m, const TaskSpec& task);

MetricsReport evaluate(const TaskSpec& task, const std::vector<PredictionRecord>& preds);

// nullopt when the metric is undefined on these predictions.
std::optional<double> metric_value(MetricId m, const TaskSpec& task, const std::vector<PredictionRecord>& preds);

}  // namespace ehrprompt
