#include "ehrprompt/tasks.hpp"

#include <cmath>
#include <map>
#include <stdexcept>

namespace ehrprompt {

namespace {

std::map<std::string, TaskSpec> build_registry() {
  std::map<std::string, TaskSpec> reg;

  TaskSpec smoking;
  smoking.id = "smoking";
  smoking.schema = {"smoking",
                    {"Current smoker", "Past smoker", "Non-smoker", "Smoker", "Unknown"},
                    {{"former smoker", "Past smoker"},
                     {"ex smoker", "Past smoker"},
                     {"never smoker", "Non-smoker"},
                     {"nonsmoker", "Non-smoker"},
                     {"smoker unspecified", "Smoker"},
                     {"active smoker", "Current smoker"}},
                    "Unknown"};
  smoking.shape = InputShape::note;
  smoking.description = "Classify the smoking status of the patient described in the discharge summary.";
  smoking.query =
      "What is the patient's smoking status? Answer with exactly one of: Current smoker, Past smoker, Non-smoker, "
      "Smoker, Unknown.";
  reg.emplace(smoking.id, smoking);

  TaskSpec mednli;
  mednli.id = "mednli";
  mednli.schema = {"mednli",
                   {"Entailment", "Contradiction", "Neutral"},
                   {{"entails", "Entailment"}, {"contradicts", "Contradiction"}, {"contradictory", "Contradiction"}},
                   "Neutral"};
  mednli.shape = InputShape::premise_hypothesis;
  mednli.description =
      "Given a clinical premise and a hypothesis, decide whether the premise entails the hypothesis, contradicts "
      "it, or is neutral toward it.";
  mednli.query = "What is the relationship? Answer with exactly one of: Entailment, Contradiction, Neutral.";
  reg.emplace(mednli.id, mednli);

  TaskSpec clinsts;
  clinsts.id = "clinsts";
  clinsts.schema = {"clinsts", {"similar", "dissimilar"}, {{"not similar", "dissimilar"}}, "dissimilar"};
  clinsts.shape = InputShape::sentence_pair;
  clinsts.description = "Decide whether two clinical sentences are semantically similar.";
  clinsts.query = "Are the two sentences similar? Answer with exactly one of: similar, dissimilar.";
  reg.emplace(clinsts.id, clinsts);

  TaskSpec mortality;
  mortality.id = "mortality";
  mortality.kind = TaskKind::scored_binary;
  mortality.schema = {"mortality", {"1", "0"}, {{"yes", "1"}, {"no", "0"}}, "0"};
  mortality.shape = InputShape::note_with_ts;
  mortality.description =
      "Predict whether the patient will die during the hospital stay, using the admission note and the vital "
      "signs recorded in the first 48 hours.";
  mortality.query = "Will the patient die in hospital? Answer yes or no.";
  reg.emplace(mortality.id, mortality);

  for (auto& [id, t] : reg) t.schema.validate();
  return reg;
}

const std::map<std::string, TaskSpec>& registry() {
  static const auto reg = build_registry();
  return reg;
}

}  // namespace

const TaskSpec& task_spec(const std::string& id) {
  auto it = registry().find(id);
  if (it == registry().end()) throw std::invalid_argument("unknown task '" + id + "'");
  return it->second;
}

std::vector<std::string> task_ids() { return {"smoking", "mednli", "clinsts", "mortality"}; }

std::string binarize_clinsts(double similarity) {
  if (!(similarity >= 0.0 && similarity <= 5.0)) {
    throw std::out_of_range("ClinSTS similarity must lie in [0, 5], got " + std::to_string(similarity));
  }
  return similarity > 3.0 ? "similar" : "dissimilar";
}

std::string TaskSpec::text_for(const PatientRecord& rec) const {
  switch (shape) {
    case InputShape::premise_hypothesis:
      return "Premise: " + rec.note + "\nHypothesis: " + rec.text_b;
    case InputShape::sentence_pair:
      return "Sentence 1: " + rec.note + "\nSentence 2: " + rec.text_b;
    case InputShape::note:
    case InputShape::note_with_ts:
      return rec.note;
  }
  return rec.note;
}

std::string TaskSpec::gold_label(const PatientRecord& rec) const {
  if (kind == TaskKind::scored_binary) return std::to_string(gold_flag(rec));
  if (id == "clinsts") {
    if (const auto* d = std::get_if<double>(&rec.label)) return binarize_clinsts(*d);
  }
  const auto* s = std::get_if<std::string>(&rec.label);
  if (s == nullptr) throw std::invalid_argument("record '" + rec.id + "' has no class label");
  if (schema.contains(*s)) return *s;
  const auto norm = normalize_label_text(*s);
  for (const auto& l : schema.labels) {
    if (normalize_label_text(l) == norm) return l;
  }
  for (const auto& [alias, target] : schema.aliases) {
    if (normalize_label_text(alias) == norm) return target;
  }
  throw std::invalid_argument("record '" + rec.id + "': label '" + *s + "' is not in the " + id + " schema");
}

int TaskSpec::gold_flag(const PatientRecord& rec) const {
  if (const auto* d = std::get_if<double>(&rec.label)) {
    if (*d == 0.0 || *d == 1.0) return static_cast<int>(*d);
  }
  if (const auto* s = std::get_if<std::string>(&rec.label)) {
    if (*s == "0") return 0;
    if (*s == "1") return 1;
  }
  throw std::invalid_argument("record '" + rec.id + "' needs a 0/1 mortality label");
}

PredictionRecord fallback_prediction(const TaskSpec& task, const PatientRecord& rec) {
  PredictionRecord p;
  p.record_id = rec.id;
  p.unparsed = true;
  if (task.kind == TaskKind::scored_binary) {
    p.gold_flag = task.gold_flag(rec);
    p.score = 0.5;
  } else {
    p.gold_label = task.gold_label(rec);
    p.predicted_label = task.schema.fallback;
  }
  return p;
}

PredictionRecord predict(const TaskSpec& task, const PatientRecord& rec, const ModelInput& input, LlmClient& client,
                         const GenerationSettings& settings) {
  PredictionRecord p;
  p.record_id = rec.id;
  try {
    if (task.kind == TaskKind::scored_binary) {
      p.gold_flag = task.gold_flag(rec);
      const auto r = score(input, client, settings, task.score_options);
      p.score = r.score;
      p.unparsed = r.unparsed;
      p.raw = r.raw;
      p.latency_ms = r.latency_ms;
    } else {
      p.gold_label = task.gold_label(rec);
      const auto r = classify(input, task.schema, client, settings);
      p.predicted_label = r.label;
      p.unparsed = r.unparsed;
      p.raw = r.raw;
      p.latency_ms = r.latency_ms;
    }
  } catch (const LlmError& e) {
    throw LlmError("record '" + rec.id + "': " + e.what());
  }
  return p;
}

MetricId parse_metric(const std::string& s) {
  if (s == "micro_f1") return MetricId::micro_f1;
  if (s == "macro_f1") return MetricId::macro_f1;
  if (s == "auroc") return MetricId::auroc;
  if (s == "auprc") return MetricId::auprc;
  throw std::invalid_argument("unknown metric '" + s + "'");
}

std::string to_string(MetricId m) {
  switch (m) {
    case MetricId::micro_f1: return "micro_f1";
    case MetricId::macro_f1: return "macro_f1";
    case MetricId::auroc: return "auroc";
    case MetricId::auprc: return "auprc";
  }
  return "micro_f1";
}

bool metric_applies(MetricId m, const TaskSpec& task) {
  const bool scored = m == MetricId::auroc || m == MetricId::auprc;
  return scored == (task.kind == TaskKind::scored_binary);
}

MetricsReport evaluate(const TaskSpec& task, const std::vector<PredictionRecord>& preds) {
  if (task.kind == TaskKind::scored_binary) return evaluate_scored(task.id, preds);
  return evaluate_classification(task.id, preds, task.schema);
}

std::optional<double> metric_value(MetricId m, const TaskSpec& task, const std::vector<PredictionRecord>& preds) {
  if (!metric_applies(m, task)) {
    throw std::invalid_argument("metric " + to_string(m) + " does not apply to task " + task.id);
  }
  const auto r = evaluate(task, preds);
  switch (m) {
    case MetricId::micro_f1: return r.micro_f1;
    case MetricId::macro_f1: return r.macro_f1;
    case MetricId::auroc: return r.auroc;
    case MetricId::auprc: return r.auprc;
  }
  return std::nullopt;
}

}  // namespace ehrprompt
