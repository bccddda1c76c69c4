#include "ehrprompt/aggregate.hpp"

#include <algorithm>
#include <map>
#include <stdexcept>

namespace ehrprompt {

Imputation parse_imputation(const std::string& s) {
  if (s == "forward_fill") return Imputation::forward_fill;
  if (s == "omit_feature") return Imputation::omit_feature;
  throw std::invalid_argument("unknown imputation policy '" + s + "'");
}

std::string to_string(Imputation i) {
  return i == Imputation::forward_fill ? "forward_fill" : "omit_feature";
}

void AggregationConfig::validate() const {
  if (window_hours < 1) throw std::invalid_argument("window_hours must be >= 1");
  if (bucket_count < 1) throw std::invalid_argument("bucket_count must be >= 1");
  if (bucket_count > window_minutes()) {
    throw std::invalid_argument("bucket_count must not exceed the window length in minutes");
  }
}

nlohmann::json AggregationConfig::to_json() const {
  return {{"window_hours", window_hours},
          {"bucket_count", bucket_count},
          {"excluded_features", excluded_features},
          {"imputation", to_string(imputation)}};
}

AggregationConfig AggregationConfig::from_json(const nlohmann::json& j) {
  AggregationConfig cfg;
  cfg.window_hours = j.value("window_hours", cfg.window_hours);
  cfg.bucket_count = j.value("bucket_count", cfg.bucket_count);
  if (j.contains("excluded_features")) {
    cfg.excluded_features = j.at("excluded_features").get<std::set<std::string>>();
  }
  if (j.contains("imputation")) cfg.imputation = parse_imputation(j.at("imputation").get<std::string>());
  cfg.validate();
  return cfg;
}

std::optional<std::size_t> bucket_index(long offset_minutes, const AggregationConfig& cfg) {
  const long w = cfg.window_minutes();
  if (offset_minutes < 0 || offset_minutes > w) return std::nullopt;
  if (offset_minutes == w) return static_cast<std::size_t>(cfg.bucket_count - 1);
  // floor(offset * B / W) is exact in integer arithmetic
  return static_cast<std::size_t>((offset_minutes * cfg.bucket_count) / w);
}

BucketizeResult bucketize(const std::string& feature_id, const std::vector<TimeSeriesEvent>& events,
                          const AggregationConfig& cfg) {
  const auto b = static_cast<std::size_t>(cfg.bucket_count);
  std::vector<std::vector<double>> values(b);
  BucketizeResult result;
  for (const auto& e : events) {
    if (e.feature_id != feature_id) {
      throw std::invalid_argument("bucketize(" + feature_id + "): got an event for '" + e.feature_id + "'");
    }
    if (auto idx = bucket_index(e.offset_minutes, cfg)) {
      values[*idx].push_back(e.value);
    } else {
      ++result.dropped_outside_window;
    }
  }

  AggregatedSeries s;
  s.feature_id = feature_id;
  s.bucket_means.assign(b, 0.0);
  s.observed.assign(b, false);
  std::optional<std::size_t> first_observed;
  for (std::size_t i = 0; i < b; ++i) {
    auto& v = values[i];
    if (v.empty()) continue;
    // Summing in sorted order makes the mean independent of input order.
    std::sort(v.begin(), v.end());
    double sum = 0.0;
    for (double x : v) sum += x;
    s.bucket_means[i] = sum / static_cast<double>(v.size());
    s.observed[i] = true;
    if (!first_observed) first_observed = i;
  }

  if (!first_observed) return result;
  const bool has_gap = std::find(s.observed.begin(), s.observed.end(), false) != s.observed.end();
  if (has_gap && cfg.imputation == Imputation::omit_feature) return result;

  for (std::size_t i = 0; i < *first_observed; ++i) s.bucket_means[i] = s.bucket_means[*first_observed];
  for (std::size_t i = *first_observed + 1; i < b; ++i) {
    if (!s.observed[i]) s.bucket_means[i] = s.bucket_means[i - 1];
  }
  result.series = std::move(s);
  return result;
}

RecordAggregation aggregate_record(const PatientRecord& record, const FeatureCatalog& catalog,
                                   const AggregationConfig& cfg) {
  cfg.validate();
  std::map<std::string, std::vector<TimeSeriesEvent>> by_feature;
  for (const auto& e : record.events) by_feature[e.feature_id].push_back(e);

  RecordAggregation out;
  for (const auto& spec : catalog.features()) {
    if (cfg.excluded_features.contains(spec.id)) continue;
    if (spec.kind == FeatureKind::static_value) {
      auto it = record.statics.find(spec.id);
      if (it == record.statics.end()) continue;
      AggregatedSeries s;
      s.feature_id = spec.id;
      s.static_value = it->second;
      out.series.push_back(std::move(s));
      continue;
    }
    static const std::vector<TimeSeriesEvent> kNone;
    auto it = by_feature.find(spec.id);
    auto r = bucketize(spec.id, it == by_feature.end() ? kNone : it->second, cfg);
    out.dropped_outside_window += r.dropped_outside_window;
    if (r.series) out.series.push_back(std::move(*r.series));
  }
  return out;
}

nlohmann::json to_json(const AggregatedSeries& s) {
  nlohmann::json j = {{"feature", s.feature_id}};
  if (s.static_value) {
    j["static_value"] = *s.static_value;
  } else {
    j["bucket_means"] = s.bucket_means;
    j["observed"] = s.observed;
  }
  return j;
}

}  // namespace ehrprompt
