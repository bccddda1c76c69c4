#include "ehrprompt/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>

namespace ehrprompt {

std::size_t ConfusionMatrix::at(const std::string& gold, const std::string& predicted) const {
  auto gi = std::find(labels.begin(), labels.end(), gold);
  auto pi = std::find(labels.begin(), labels.end(), predicted);
  if (gi == labels.end() || pi == labels.end()) throw std::invalid_argument("label not in confusion matrix");
  return counts[static_cast<std::size_t>(gi - labels.begin())][static_cast<std::size_t>(pi - labels.begin())];
}

ConfusionMatrix confusion_matrix(const std::vector<PredictionRecord>& preds, const LabelSchema& schema) {
  ConfusionMatrix cm;
  cm.labels = schema.labels;
  cm.counts.assign(schema.labels.size(), std::vector<std::size_t>(schema.labels.size(), 0));
  for (const auto& p : preds) {
    const auto g = schema.index_of(p.gold_label);
    const auto q = schema.index_of(p.predicted_label);
    ++cm.counts[g][q];
    ++cm.n;
  }
  return cm;
}

F1Scores f1_scores(const ConfusionMatrix& cm, MacroAverage avg) {
  if (cm.n == 0) throw UndefinedMetricError("F1 is undefined for zero predictions");
  const std::size_t k = cm.labels.size();
  F1Scores out;
  out.per_class.assign(k, 0.0);
  std::size_t tp_total = 0;
  std::size_t fp_total = 0;
  std::size_t fn_total = 0;
  double macro_sum = 0.0;
  std::size_t macro_classes = 0;
  for (std::size_t c = 0; c < k; ++c) {
    const std::size_t tp = cm.counts[c][c];
    std::size_t row = 0;
    std::size_t col = 0;
    for (std::size_t j = 0; j < k; ++j) {
      row += cm.counts[c][j];
      col += cm.counts[j][c];
    }
    const std::size_t fp = col - tp;
    const std::size_t fn = row - tp;
    tp_total += tp;
    fp_total += fp;
    fn_total += fn;
    double f1 = 0.0;
    if (tp > 0) {
      const double p = static_cast<double>(tp) / static_cast<double>(tp + fp);
      const double r = static_cast<double>(tp) / static_cast<double>(tp + fn);
      f1 = 2.0 * p * r / (p + r);
    }
    out.per_class[c] = f1;
    if (avg == MacroAverage::all_labels || row > 0) {
      macro_sum += f1;
      ++macro_classes;
    }
  }
  out.macro = macro_classes == 0 ? 0.0 : macro_sum / static_cast<double>(macro_classes);
  const double mp = static_cast<double>(tp_total) / static_cast<double>(tp_total + fp_total);
  const double mr = static_cast<double>(tp_total) / static_cast<double>(tp_total + fn_total);
  out.micro = tp_total == 0 ? 0.0 : 2.0 * mp * mr / (mp + mr);
  return out;
}

namespace {

void check_scored(const std::vector<ScoredLabel>& data, std::size_t& pos, std::size_t& neg) {
  pos = 0;
  neg = 0;
  for (const auto& [s, y] : data) {
    if (!std::isfinite(s)) throw std::invalid_argument("non-finite score");
    if (y == 1) {
      ++pos;
    } else if (y == 0) {
      ++neg;
    } else {
      throw std::invalid_argument("binary labels must be 0 or 1");
    }
  }
}

}  // namespace

double roc_auc(const std::vector<ScoredLabel>& data) {
  std::size_t pos = 0;
  std::size_t neg = 0;
  check_scored(data, pos, neg);
  if (pos == 0 || neg == 0) throw UndefinedMetricError("AUROC needs at least one positive and one negative");

  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return data[a].first < data[b].first; });
  double pos_rank_sum = 0.0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && data[order[j]].first == data[order[i]].first) ++j;
    const double midrank = static_cast<double>(i + 1 + j) / 2.0;
    for (std::size_t t = i; t < j; ++t) {
      if (data[order[t]].second == 1) pos_rank_sum += midrank;
    }
    i = j;
  }
  const double p = static_cast<double>(pos);
  const double u = pos_rank_sum - p * (p + 1.0) / 2.0;
  return u / (p * static_cast<double>(neg));
}

double pr_auc(const std::vector<ScoredLabel>& data) {
  std::size_t pos = 0;
  std::size_t neg = 0;
  check_scored(data, pos, neg);
  if (pos == 0) throw UndefinedMetricError("AUPRC needs at least one positive");

  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return data[a].first > data[b].first; });
  std::size_t tp = 0;
  std::size_t fp = 0;
  double prev_recall = 0.0;
  double ap = 0.0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && data[order[j]].first == data[order[i]].first) {
      if (data[order[j]].second == 1) {
        ++tp;
      } else {
        ++fp;
      }
      ++j;
    }
    const double recall = static_cast<double>(tp) / static_cast<double>(pos);
    const double precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
    ap += (recall - prev_recall) * precision;
    prev_recall = recall;
    i = j;
  }
  return ap;
}

namespace {

double unparsed_rate(const std::vector<PredictionRecord>& preds) {
  if (preds.empty()) return 0.0;
  const auto k = std::count_if(preds.begin(), preds.end(), [](const auto& p) { return p.unparsed; });
  return static_cast<double>(k) / static_cast<double>(preds.size());
}

}  // namespace

MetricsReport evaluate_classification(const std::string& task, const std::vector<PredictionRecord>& preds,
                                      const LabelSchema& schema, MacroAverage avg) {
  MetricsReport r;
  r.task = task;
  r.n = preds.size();
  r.confusion = confusion_matrix(preds, schema);
  try {
    const auto f1 = f1_scores(*r.confusion, avg);
    r.macro_f1 = f1.macro;
    r.micro_f1 = f1.micro;
  } catch (const UndefinedMetricError& e) {
    r.undefined.push_back(std::string("f1: ") + e.what());
  }
  r.unparsed_rate = unparsed_rate(preds);
  return r;
}

MetricsReport evaluate_scored(const std::string& task, const std::vector<PredictionRecord>& preds) {
  MetricsReport r;
  r.task = task;
  r.n = preds.size();
  std::vector<ScoredLabel> data;
  data.reserve(preds.size());
  for (const auto& p : preds) {
    if (!p.score) throw std::invalid_argument("record '" + p.record_id + "' has no score");
    data.emplace_back(*p.score, p.gold_flag);
  }
  try {
    r.auroc = roc_auc(data);
  } catch (const UndefinedMetricError& e) {
    r.undefined.push_back(std::string("auroc: ") + e.what());
  }
  try {
    r.auprc = pr_auc(data);
  } catch (const UndefinedMetricError& e) {
    r.undefined.push_back(std::string("auprc: ") + e.what());
  }
  r.unparsed_rate = unparsed_rate(preds);
  return r;
}

double median(std::vector<double> values) {
  if (values.empty()) throw std::invalid_argument("median of an empty list");
  std::sort(values.begin(), values.end());
  const std::size_t m = values.size() / 2;
  if (values.size() % 2 == 1) return values[m];
  return (values[m - 1] + values[m]) / 2.0;
}

namespace {

std::optional<double> median_of(const std::vector<MetricsReport>& reports,
                                std::optional<double> MetricsReport::*field) {
  std::vector<double> v;
  for (const auto& r : reports) {
    if (r.*field) v.push_back(*(r.*field));
  }
  if (v.empty()) return std::nullopt;
  return median(std::move(v));
}

}  // namespace

MetricsReport median_of_runs(const std::vector<MetricsReport>& reports) {
  if (reports.empty()) throw std::invalid_argument("median_of_runs needs at least one report");
  for (const auto& r : reports) {
    if (r.task != reports.front().task) throw std::invalid_argument("median_of_runs: reports mix tasks");
    if (r.n != reports.front().n) throw std::invalid_argument("median_of_runs: reports differ in record count");
  }
  if (reports.size() == 1) return reports.front();

  MetricsReport out;
  out.task = reports.front().task;
  out.n = reports.front().n;
  out.macro_f1 = median_of(reports, &MetricsReport::macro_f1);
  out.micro_f1 = median_of(reports, &MetricsReport::micro_f1);
  out.auroc = median_of(reports, &MetricsReport::auroc);
  out.auprc = median_of(reports, &MetricsReport::auprc);
  std::vector<double> unparsed;
  std::vector<double> wall;
  for (const auto& r : reports) {
    unparsed.push_back(r.unparsed_rate);
    wall.push_back(r.wall_time_s);
  }
  out.unparsed_rate = median(unparsed);
  out.wall_time_s = median(wall);

  std::vector<std::size_t> idx(reports.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    return reports[a].micro_f1.value_or(0.0) < reports[b].micro_f1.value_or(0.0);
  });
  out.confusion = reports[idx[(idx.size() - 1) / 2]].confusion;

  const std::pair<const char*, std::optional<double> MetricsReport::*> fields[] = {
      {"f1", &MetricsReport::micro_f1}, {"auroc", &MetricsReport::auroc}, {"auprc", &MetricsReport::auprc}};
  for (const auto& [name, field] : fields) {
    if (out.*field) continue;
    for (const auto& msg : reports.front().undefined) {
      if (msg.rfind(std::string(name) + ":", 0) == 0) out.undefined.push_back(msg);
    }
  }
  return out;
}

nlohmann::ordered_json to_json(const MetricsReport& r, bool include_timing) {
  nlohmann::ordered_json j;
  j["task"] = r.task;
  j["n"] = r.n;
  auto opt = [](const std::optional<double>& v) { return v ? nlohmann::ordered_json(*v) : nlohmann::ordered_json(); };
  j["macro_f1"] = opt(r.macro_f1);
  j["micro_f1"] = opt(r.micro_f1);
  j["auroc"] = opt(r.auroc);
  j["auprc"] = opt(r.auprc);
  j["unparsed_rate"] = r.unparsed_rate;
  j["undefined"] = r.undefined;
  if (r.confusion) {
    j["confusion"] = {{"labels", r.confusion->labels}, {"counts", r.confusion->counts}};
  } else {
    j["confusion"] = nullptr;
  }
  if (include_timing) j["wall_time_s"] = r.wall_time_s;
  return j;
}

std::string render_report_table(const std::vector<MetricsReport>& reports) {
  std::ostringstream out;
  char line[256];
  std::snprintf(line, sizeof line, "%-12s %6s %7s %7s %8s %8s %9s\n", "task", "n", "macro", "micro", "AUROC", "AUPRC",
                "unparsed");
  out << line;
  auto frac = [](const std::optional<double>& v) {
    char b[32];
    if (!v) return std::string("-");
    std::snprintf(b, sizeof b, "%.2f", *v);
    return std::string(b);
  };
  auto pct = [](const std::optional<double>& v) {
    char b[32];
    if (!v) return std::string("-");
    std::snprintf(b, sizeof b, "%.2f", *v * 100.0);
    return std::string(b);
  };
  for (const auto& r : reports) {
    std::snprintf(line, sizeof line, "%-12s %6zu %7s %7s %8s %8s %8.1f%%\n", r.task.c_str(), r.n,
                  frac(r.macro_f1).c_str(), frac(r.micro_f1).c_str(), pct(r.auroc).c_str(), pct(r.auprc).c_str(),
                  r.unparsed_rate * 100.0);
    out << line;
  }
  return out.str();
}

}  // namespace ehrprompt
