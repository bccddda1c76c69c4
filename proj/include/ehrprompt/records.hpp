#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

namespace ehrprompt {

inline constexpr int kRecordFormatVersion = 1;
inline constexpr int kCatalogFormatVersion = 1;

enum class FeatureKind { series, static_value };

struct AffineConversion {
  double scale = 1.0;
  double offset = 0.0;
};

struct FeatureSpec {
  std::string id;
  std::string display_name;  // as rendered in prompts
  FeatureKind kind = FeatureKind::series;
  std::string canonical_unit;
  double plausible_min = 0.0;
  double plausible_max = 0.0;
  std::map<std::string, AffineConversion> conversions;

  // Throws std::invalid_argument when an invariant is broken.
  void validate() const;
};

// Ordered feature list; order is rendering order.
class FeatureCatalog {
 public:
  FeatureCatalog() = default;
  explicit FeatureCatalog(std::vector<FeatureSpec> features);

  const std::vector<FeatureSpec>& features() const { return features_; }
  std::size_t size() const { return features_.size(); }
  const FeatureSpec* find(const std::string& id) const;
  const FeatureSpec& at(const std::string& id) const;
  bool contains(const std::string& id) const { return find(id) != nullptr; }

  nlohmann::json to_json() const;
  static FeatureCatalog from_json(const nlohmann::json& doc);
  static FeatureCatalog load(const std::filesystem::path& path);

 private:
  std::vector<FeatureSpec> features_;
  std::map<std::string, std::size_t> index_;
};

// The 13 mortality features (11 series, weight and height static).
const FeatureCatalog& default_catalog();

struct TimeSeriesEvent {
  std::string feature_id;
  long offset_minutes = 0;
  double value = 0.0;
  std::string unit;

  friend bool operator==(const TimeSeriesEvent&, const TimeSeriesEvent&) = default;
};

enum class Split { train, dev, test };

std::string to_string(Split s);
Split parse_split(const std::string& s);

// Gold label as stored in the file: a class name, a similarity score, or a 0/1 flag.
using Label = std::variant<std::monostate, std::string, double>;

struct PatientRecord {
  std::string id;
  std::string note;
  std::string text_b;  // second sentence for pair tasks; empty otherwise
  std::vector<TimeSeriesEvent> events;
  std::map<std::string, double> statics;
  Label label;
  Split split = Split::test;
};

nlohmann::json record_to_json(const PatientRecord& rec);

struct Rejection {
  std::size_t line_number = 0;  // 1-based
  std::string reason;
};

struct ParseResult {
  std::vector<PatientRecord> records;
  std::vector<Rejection> rejections;
  std::size_t line_count = 0;
};

// Parses one JSONL record per line. Bad lines become rejections.
// Throws std::runtime_error when the file cannot be read.
ParseResult parse_records(const std::filesystem::path& path, const FeatureCatalog& catalog);
ParseResult parse_records_text(const std::string& text, const FeatureCatalog& catalog);

class UnknownUnitError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

TimeSeriesEvent convert_units(const TimeSeriesEvent& event, const FeatureSpec& spec);
double convert_value(double value, const std::string& unit, const FeatureSpec& spec);

enum class OutlierPolicy { clamp, drop };

OutlierPolicy parse_outlier_policy(const std::string& s);
std::string to_string(OutlierPolicy p);

// std::nullopt marks a dropped event.
std::optional<TimeSeriesEvent> clamp_outliers(const TimeSeriesEvent& event, const FeatureSpec& spec,
                                              OutlierPolicy policy);
double clamp_value(double value, const FeatureSpec& spec);

struct CanonicalizeStats {
  std::size_t converted = 0;
  std::size_t clamped = 0;
  std::size_t dropped = 0;
};

// Unit conversion followed by outlier handling for every event and static.
PatientRecord canonicalize_record(const PatientRecord& rec, const FeatureCatalog& catalog,
                                  OutlierPolicy policy, CanonicalizeStats* stats = nullptr);

}  // namespace ehrprompt
