#include "ehrprompt/records.hpp"

#include <algorithm>
#include <cerrno>
#include <cmath>
#include <cstdlib>
#include <sstream>

#include "ehrprompt/util.hpp"

namespace ehrprompt {

using nlohmann::json;

void FeatureSpec::validate() const {
  if (id.empty()) throw std::invalid_argument("feature id must be nonempty");
  if (display_name.empty()) throw std::invalid_argument("feature '" + id + "': display_name must be nonempty");
  if (!(plausible_min < plausible_max)) {
    throw std::invalid_argument("feature '" + id + "': plausible_range min must be below max");
  }
  auto it = conversions.find(canonical_unit);
  if (it == conversions.end() || it->second.scale != 1.0 || it->second.offset != 0.0) {
    throw std::invalid_argument("feature '" + id + "': conversions must map canonical unit '" +
                                canonical_unit + "' to the identity");
  }
  for (const auto& [unit, conv] : conversions) {
    if (!std::isfinite(conv.scale) || !std::isfinite(conv.offset) || conv.scale == 0.0) {
      throw std::invalid_argument("feature '" + id + "': invalid conversion for unit '" + unit + "'");
    }
  }
}

FeatureCatalog::FeatureCatalog(std::vector<FeatureSpec> features) : features_(std::move(features)) {
  for (std::size_t i = 0; i < features_.size(); ++i) {
    features_[i].validate();
    if (!index_.emplace(features_[i].id, i).second) {
      throw std::invalid_argument("duplicate feature id '" + features_[i].id + "'");
    }
  }
}

const FeatureSpec* FeatureCatalog::find(const std::string& id) const {
  auto it = index_.find(id);
  return it == index_.end() ? nullptr : &features_[it->second];
}

const FeatureSpec& FeatureCatalog::at(const std::string& id) const {
  if (const auto* f = find(id)) return *f;
  throw std::invalid_argument("unknown feature id '" + id + "'");
}

json FeatureCatalog::to_json() const {
  json features = json::array();
  for (const auto& f : features_) {
    json conv = json::object();
    for (const auto& [unit, c] : f.conversions) conv[unit] = {{"scale", c.scale}, {"offset", c.offset}};
    features.push_back({{"id", f.id},
                        {"display_name", f.display_name},
                        {"kind", f.kind == FeatureKind::series ? "series" : "static"},
                        {"canonical_unit", f.canonical_unit},
                        {"plausible_range", {f.plausible_min, f.plausible_max}},
                        {"conversions", conv}});
  }
  return {{"format_version", kCatalogFormatVersion}, {"features", features}};
}

FeatureCatalog FeatureCatalog::from_json(const json& doc) {
  const int version = doc.value("format_version", 0);
  if (version != kCatalogFormatVersion) {
    throw std::invalid_argument("unsupported catalog format_version " + std::to_string(version));
  }
  std::vector<FeatureSpec> out;
  for (const auto& f : doc.at("features")) {
    FeatureSpec s;
    s.id = f.at("id").get<std::string>();
    s.display_name = f.at("display_name").get<std::string>();
    const auto kind = f.at("kind").get<std::string>();
    if (kind == "series") {
      s.kind = FeatureKind::series;
    } else if (kind == "static") {
      s.kind = FeatureKind::static_value;
    } else {
      throw std::invalid_argument("feature '" + s.id + "': unknown kind '" + kind + "'");
    }
    s.canonical_unit = f.at("canonical_unit").get<std::string>();
    const auto& range = f.at("plausible_range");
    s.plausible_min = range.at(0).get<double>();
    s.plausible_max = range.at(1).get<double>();
    for (const auto& [unit, c] : f.at("conversions").items()) {
      s.conversions[unit] = {c.value("scale", 1.0), c.value("offset", 0.0)};
    }
    out.push_back(std::move(s));
  }
  return FeatureCatalog(std::move(out));
}

FeatureCatalog FeatureCatalog::load(const std::filesystem::path& path) {
  return from_json(json::parse(read_file(path)));
}

namespace {

FeatureSpec series(std::string id, std::string name, std::string unit, double lo, double hi,
                   std::map<std::string, AffineConversion> extra = {}) {
  FeatureSpec s{std::move(id), std::move(name), FeatureKind::series, unit, lo, hi, std::move(extra)};
  s.conversions[unit] = {1.0, 0.0};
  return s;
}

FeatureSpec static_feature(std::string id, std::string name, std::string unit, double lo, double hi,
                           std::map<std::string, AffineConversion> extra = {}) {
  auto s = series(std::move(id), std::move(name), std::move(unit), lo, hi, std::move(extra));
  s.kind = FeatureKind::static_value;
  return s;
}

}  // namespace

const FeatureCatalog& default_catalog() {
  // Ranges are generous physiological bounds, not population norms.
  static const FeatureCatalog catalog(std::vector<FeatureSpec>{
      series("heart_rate", "heart rate", "bpm", 0, 300, {{"beats/min", {1, 0}}}),
      series("respiratory_rate", "respiratory rate", "breaths/min", 0, 80, {{"bpm", {1, 0}}}),
      series("systolic_blood_pressure", "systolic blood pressure", "mmHg", 0, 375, {{"kPa", {7.50062, 0}}}),
      series("diastolic_blood_pressure", "diastolic blood pressure", "mmHg", 0, 375, {{"kPa", {7.50062, 0}}}),
      series("mean_blood_pressure", "mean blood pressure", "mmHg", 0, 375, {{"kPa", {7.50062, 0}}}),
      series("oxygen_saturation", "oxygen saturation", "%", 0, 100, {{"fraction", {100, 0}}}),
      series("temperature", "temperature", "C", 14.2, 47, {{"F", {5.0 / 9.0, -160.0 / 9.0}}}),
      series("glucose", "glucose", "mg/dL", 0, 2200, {{"mmol/L", {18.0, 0}}}),
      series("glasgow_coma_scale_total", "Glasgow coma scale total", "points", 3, 15),
      series("ph", "ph", "pH", 6.3, 8.4),
      series("fraction_inspired_oxygen", "fraction inspired oxygen", "fraction", 0.2, 1.0, {{"%", {0.01, 0}}}),
      static_feature("weight", "weight", "kg", 0, 300, {{"lb", {0.45359237, 0}}}),
      static_feature("height", "height", "cm", 0, 250, {{"in", {2.54, 0}}, {"m", {100, 0}}}),
  });
  return catalog;
}

std::string to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::dev: return "dev";
    case Split::test: return "test";
  }
  return "test";
}

Split parse_split(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "dev") return Split::dev;
  if (s == "test") return Split::test;
  throw std::invalid_argument("unknown split '" + s + "'");
}

json record_to_json(const PatientRecord& rec) {
  json events = json::array();
  for (const auto& e : rec.events) {
    events.push_back({{"feature", e.feature_id}, {"t_min", e.offset_minutes}, {"value", e.value}, {"unit", e.unit}});
  }
  json label;
  if (const auto* s = std::get_if<std::string>(&rec.label)) label = *s;
  if (const auto* d = std::get_if<double>(&rec.label)) label = *d;
  json out = {{"format_version", kRecordFormatVersion},
              {"id", rec.id},
              {"note", rec.note},
              {"events", events},
              {"statics", rec.statics},
              {"label", label},
              {"split", to_string(rec.split)}};
  if (!rec.text_b.empty()) out["text_b"] = rec.text_b;
  return out;
}

namespace {

// Accepts JSON numbers and numeric strings ("76.0", "NaN"); throws on anything else.
double number_field(const json& v, const char* what) {
  if (v.is_number()) return v.get<double>();
  if (v.is_string()) {
    const auto& s = v.get_ref<const std::string&>();
    char* end = nullptr;
    errno = 0;
    const double d = std::strtod(s.c_str(), &end);
    if (!s.empty() && end == s.c_str() + s.size()) return d;
  }
  throw std::invalid_argument(std::string(what) + " is not a number");
}

PatientRecord parse_line(const std::string& line, const FeatureCatalog& catalog) {
  const json j = json::parse(line);
  if (!j.is_object()) throw std::invalid_argument("record is not a JSON object");
  const int version = j.value("format_version", kRecordFormatVersion);
  if (version != kRecordFormatVersion) {
    throw std::invalid_argument("unsupported format_version " + std::to_string(version));
  }
  PatientRecord rec;
  rec.id = j.at("id").get<std::string>();
  if (rec.id.empty()) throw std::invalid_argument("empty id");
  rec.note = j.value("note", std::string{});
  rec.text_b = j.value("text_b", std::string{});
  if (j.contains("events")) {
    for (const auto& e : j.at("events")) {
      TimeSeriesEvent ev;
      ev.feature_id = e.at("feature").get<std::string>();
      const auto* spec = catalog.find(ev.feature_id);
      if (spec == nullptr) throw std::invalid_argument("unknown feature '" + ev.feature_id + "'");
      if (spec->kind != FeatureKind::series) {
        throw std::invalid_argument("feature '" + ev.feature_id + "' is static but appears as an event");
      }
      ev.offset_minutes = e.at("t_min").get<long>();
      if (ev.offset_minutes < 0) throw std::invalid_argument("negative t_min for '" + ev.feature_id + "'");
      ev.value = number_field(e.at("value"), "event value");
      if (!std::isfinite(ev.value)) throw std::invalid_argument("non-finite value for '" + ev.feature_id + "'");
      ev.unit = e.value("unit", spec->canonical_unit);
      if (!spec->conversions.contains(ev.unit)) {
        throw std::invalid_argument("unknown unit '" + ev.unit + "' for '" + ev.feature_id + "'");
      }
      rec.events.push_back(std::move(ev));
    }
  }
  if (j.contains("statics")) {
    for (const auto& [key, val] : j.at("statics").items()) {
      const auto* spec = catalog.find(key);
      if (spec == nullptr) throw std::invalid_argument("unknown feature '" + key + "'");
      if (spec->kind != FeatureKind::static_value) {
        throw std::invalid_argument("feature '" + key + "' is a series but appears in statics");
      }
      const double v = number_field(val, "static value");
      if (!std::isfinite(v)) throw std::invalid_argument("non-finite value for '" + key + "'");
      rec.statics[key] = v;
    }
  }
  if (j.contains("label")) {
    const auto& l = j.at("label");
    if (l.is_string()) {
      rec.label = l.get<std::string>();
    } else if (l.is_number()) {
      rec.label = l.get<double>();
    } else if (!l.is_null()) {
      throw std::invalid_argument("label must be a string or number");
    }
  }
  rec.split = parse_split(j.value("split", std::string("test")));
  return rec;
}

}  // namespace

ParseResult parse_records_text(const std::string& text, const FeatureCatalog& catalog) {
  ParseResult result;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    ++result.line_count;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (trim(line).empty()) {
      result.rejections.push_back({result.line_count, "blank line"});
      continue;
    }
    try {
      result.records.push_back(parse_line(line, catalog));
    } catch (const std::exception& e) {
      result.rejections.push_back({result.line_count, e.what()});
    }
  }
  return result;
}

ParseResult parse_records(const std::filesystem::path& path, const FeatureCatalog& catalog) {
  return parse_records_text(read_file(path), catalog);
}

double convert_value(double value, const std::string& unit, const FeatureSpec& spec) {
  if (unit == spec.canonical_unit) return value;
  auto it = spec.conversions.find(unit);
  if (it == spec.conversions.end()) {
    throw UnknownUnitError("feature '" + spec.id + "' has no conversion from unit '" + unit + "'");
  }
  return it->second.scale * value + it->second.offset;
}

TimeSeriesEvent convert_units(const TimeSeriesEvent& event, const FeatureSpec& spec) {
  TimeSeriesEvent out = event;
  out.value = convert_value(event.value, event.unit, spec);
  out.unit = spec.canonical_unit;
  return out;
}

OutlierPolicy parse_outlier_policy(const std::string& s) {
  if (s == "clamp") return OutlierPolicy::clamp;
  if (s == "drop") return OutlierPolicy::drop;
  throw std::invalid_argument("unknown outlier policy '" + s + "'");
}

std::string to_string(OutlierPolicy p) { return p == OutlierPolicy::clamp ? "clamp" : "drop"; }

double clamp_value(double value, const FeatureSpec& spec) {
  return std::clamp(value, spec.plausible_min, spec.plausible_max);
}

std::optional<TimeSeriesEvent> clamp_outliers(const TimeSeriesEvent& event, const FeatureSpec& spec,
                                              OutlierPolicy policy) {
  const bool in_range = event.value >= spec.plausible_min && event.value <= spec.plausible_max;
  if (in_range) return event;
  if (policy == OutlierPolicy::drop) return std::nullopt;
  TimeSeriesEvent out = event;
  out.value = clamp_value(event.value, spec);
  return out;
}

PatientRecord canonicalize_record(const PatientRecord& rec, const FeatureCatalog& catalog,
                                  OutlierPolicy policy, CanonicalizeStats* stats) {
  CanonicalizeStats local;
  PatientRecord out = rec;
  out.events.clear();
  for (const auto& ev : rec.events) {
    const auto& spec = catalog.at(ev.feature_id);
    auto converted = convert_units(ev, spec);
    if (ev.unit != spec.canonical_unit) ++local.converted;
    auto kept = clamp_outliers(converted, spec, policy);
    if (!kept) {
      ++local.dropped;
      continue;
    }
    if (kept->value != converted.value) ++local.clamped;
    out.events.push_back(std::move(*kept));
  }
  out.statics.clear();
  for (const auto& [id, value] : rec.statics) {
    const auto& spec = catalog.at(id);
    const bool in_range = value >= spec.plausible_min && value <= spec.plausible_max;
    if (in_range) {
      out.statics[id] = value;
    } else if (policy == OutlierPolicy::clamp) {
      out.statics[id] = clamp_value(value, spec);
      ++local.clamped;
    } else {
      ++local.dropped;
    }
  }
  if (stats) *stats = local;
  return out;
}

}  // namespace ehrprompt
