#pragma once

#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "ehrprompt/llm_client.hpp"

namespace ehrprompt {

// Raised when a metric has no defined value for the input (e.g. AUROC on one class).
class UndefinedMetricError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

struct PredictionRecord {
  std::string record_id;
  std::string gold_label;       // classification tasks
  std::string predicted_label;  // classification tasks
  int gold_flag = 0;            // scored tasks
  std::optional<double> score;  // scored tasks
  bool unparsed = false;
  std::string raw;  // generated text
  std::int64_t latency_ms = 0;
};

struct ConfusionMatrix {
  std::vector<std::string> labels;
  std::vector<std::vector<std::size_t>> counts;  // [gold][predicted]
  std::size_t n = 0;

  std::size_t at(const std::string& gold, const std::string& predicted) const;
};

ConfusionMatrix confusion_matrix(const std::vector<PredictionRecord>& preds, const LabelSchema& schema);

enum class MacroAverage { classes_in_gold, all_labels };

struct F1Scores {
  double macro = 0.0;
  double micro = 0.0;
  std::vector<double> per_class;  // schema order
};

F1Scores f1_scores(const ConfusionMatrix& cm, MacroAverage avg = MacroAverage::classes_in_gold);

using ScoredLabel = std::pair<double, int>;  // (score, 0/1 label)

// Mann-Whitney statistic from midranks; ties count one half.
double roc_auc(const std::vector<ScoredLabel>& data);

// Step-wise average precision over distinct thresholds.
double pr_auc(const std::vector<ScoredLabel>& data);

struct MetricsReport {
  std::string task;
  std::size_t n = 0;
  std::optional<ConfusionMatrix> confusion;
  std::optional<double> macro_f1;
  std::optional<double> micro_f1;
  std::optional<double> auroc;
  std::optional<double> auprc;
  std::vector<std::string> undefined;  // "<metric>: <reason>"
  double unparsed_rate = 0.0;
  double wall_time_s = 0.0;
};

MetricsReport evaluate_classification(const std::string& task, const std::vector<PredictionRecord>& preds,
                                      const LabelSchema& schema, MacroAverage avg = MacroAverage::classes_in_gold);
MetricsReport evaluate_scored(const std::string& task, const std::vector<PredictionRecord>& preds);

// Per-metric median; the confusion matrix comes from the median-micro-F1 run.
MetricsReport median_of_runs(const std::vector<MetricsReport>& reports);

double median(std::vector<double> values);

// Fixed field order; wall time is left out unless requested so reports stay reproducible.
nlohmann::ordered_json to_json(const MetricsReport& r, bool include_timing = false);

// Table-style rendering: F1 as fractions, AUROC/AUPRC in percent.
std::string render_report_table(const std::vector<MetricsReport>& reports);

}  // namespace ehrprompt
