#pragma once

#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "ehrprompt/aggregate.hpp"
#include "ehrprompt/records.hpp"

namespace ehrprompt {

// Rounds half-to-even at two decimals on the shortest decimal form of `value`,
// then trims trailing zeros while keeping one decimal digit: 76.09, 69.0, 7.4.
std::string format_value(double value);

struct NumericBlock {
  std::string text;
  std::size_t line_count = 0;
};

// One line per series: "<display name>: v1, v2, ..." or "<display name>: v".
// Lines are joined with '\n' and carry no trailing newline.
NumericBlock render_numeric_block(const std::vector<AggregatedSeries>& series, const FeatureCatalog& catalog);

struct ParsedLine {
  std::string display_name;
  std::vector<double> values;
};

// Inverse of render_numeric_block up to rounding.
std::vector<ParsedLine> parse_numeric_block(std::string_view text);

inline constexpr std::string_view kDescriptionMarker = "**[Insert Numeric Time-Series Data Here]**";
inline constexpr const char* kDescriptionTemplateAsset = "templates/describe_timeseries.v1.txt";

class TemplateError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct DescriptionPrompt {
  std::string text;
  std::vector<std::string> warnings;
};

// Substitutes the block at the insertion marker. Throws TemplateError when the
// template has no marker.
DescriptionPrompt build_description_prompt(const NumericBlock& block, const std::string& template_text);
DescriptionPrompt build_description_prompt(const NumericBlock& block);

struct DescriptionValidation {
  std::size_t sentence_count = 0;
  std::vector<std::string> violations;
  bool ok() const { return violations.empty(); }
};

inline constexpr std::size_t kMaxDescriptionSentences = 5;

// Advisory only: counts sentences (. ! ? followed by whitespace or end) and
// flags digits. The text itself is never modified.
DescriptionValidation validate_description(std::string_view text);

enum class TsMode { none, numeric, description };

struct TsRepresentation {
  TsMode mode = TsMode::none;
  std::string payload;

  static TsRepresentation none() { return {}; }
  static TsRepresentation numeric(const NumericBlock& b) { return {TsMode::numeric, b.text}; }
  static TsRepresentation description(std::string text) { return {TsMode::description, std::move(text)}; }
};

struct ModelInput {
  std::string instruction;
  std::string note;
  TsRepresentation ts;
  std::string query;

  // instruction, note, ts, query joined by one blank line; empty parts skipped.
  std::string text() const;
};

ModelInput assemble_input(std::string instruction, std::string note, TsRepresentation ts, std::string query);

}  // namespace ehrprompt
