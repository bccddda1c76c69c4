#pragma once

#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ehrprompt/records.hpp"

namespace ehrprompt {

enum class Imputation {
  forward_fill,  // fill gaps from neighbouring observed buckets; drop features with no events
  omit_feature,  // drop any feature that has an empty bucket
};

Imputation parse_imputation(const std::string& s);
std::string to_string(Imputation i);

struct AggregationConfig {
  int window_hours = 48;
  int bucket_count = 6;
  std::set<std::string> excluded_features;
  Imputation imputation = Imputation::forward_fill;

  long window_minutes() const { return static_cast<long>(window_hours) * 60; }
  void validate() const;

  nlohmann::json to_json() const;
  static AggregationConfig from_json(const nlohmann::json& j);
};

struct AggregatedSeries {
  std::string feature_id;
  std::vector<double> bucket_means;  // empty for static features
  std::vector<bool> observed;
  std::optional<double> static_value;

  bool is_static() const { return static_value.has_value(); }
};

// Index of the bucket holding `offset_minutes`, or nullopt past the window.
// Buckets are half-open except the last, which also holds offset == W.
std::optional<std::size_t> bucket_index(long offset_minutes, const AggregationConfig& cfg);

struct BucketizeResult {
  std::optional<AggregatedSeries> series;  // nullopt when the feature is omitted
  std::size_t dropped_outside_window = 0;
};

// Events must belong to one feature and already be canonical.
BucketizeResult bucketize(const std::string& feature_id, const std::vector<TimeSeriesEvent>& events,
                          const AggregationConfig& cfg);

struct RecordAggregation {
  std::vector<AggregatedSeries> series;  // catalog order
  std::size_t dropped_outside_window = 0;
};

RecordAggregation aggregate_record(const PatientRecord& record, const FeatureCatalog& catalog,
                                   const AggregationConfig& cfg);

nlohmann::json to_json(const AggregatedSeries& s);

}  // namespace ehrprompt
