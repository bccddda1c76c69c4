#include "ehrprompt/serializer.hpp"

#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdlib>
#include <sstream>
#include <system_error>

#include "ehrprompt/util.hpp"

namespace ehrprompt {

namespace {

// Adds one unit in the last place of a digit string; returns true on overflow.
bool increment_digits(std::string& digits) {
  for (auto it = digits.rbegin(); it != digits.rend(); ++it) {
    if (*it == '9') {
      *it = '0';
    } else {
      ++*it;
      return false;
    }
  }
  return true;
}

}  // namespace

std::string format_value(double value) {
  if (!std::isfinite(value)) throw std::invalid_argument("cannot format non-finite value");
  char buf[512];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, value, std::chars_format::fixed);
  if (ec != std::errc{}) throw std::runtime_error("number formatting failed");
  std::string s(buf, end);

  bool negative = false;
  if (!s.empty() && s.front() == '-') {
    negative = true;
    s.erase(0, 1);
  }
  const auto dot = s.find('.');
  std::string int_part = dot == std::string::npos ? s : s.substr(0, dot);
  std::string frac = dot == std::string::npos ? std::string{} : s.substr(dot + 1);

  if (frac.size() > 2) {
    const char decider = frac[2];
    const bool rest_nonzero = frac.find_first_not_of('0', 3) != std::string::npos;
    std::string kept = frac.substr(0, 2);
    bool round_up = decider > '5' || (decider == '5' && rest_nonzero);
    if (decider == '5' && !rest_nonzero) round_up = ((kept[1] - '0') % 2) == 1;
    if (round_up) {
      std::string all = int_part + kept;
      if (increment_digits(all)) all.insert(all.begin(), '1');
      int_part = all.substr(0, all.size() - 2);
      kept = all.substr(all.size() - 2);
    }
    frac = kept;
  }
  while (frac.size() > 1 && frac.back() == '0') frac.pop_back();
  if (frac.empty()) frac = "0";
  if (int_part.empty()) int_part = "0";

  const bool is_zero = int_part.find_first_not_of('0') == std::string::npos &&
                       frac.find_first_not_of('0') == std::string::npos;
  std::string out = (negative && !is_zero) ? "-" : "";
  out += int_part;
  out += '.';
  out += frac;
  return out;
}

NumericBlock render_numeric_block(const std::vector<AggregatedSeries>& series, const FeatureCatalog& catalog) {
  NumericBlock block;
  for (const auto& s : series) {
    if (block.line_count > 0) block.text += '\n';
    block.text += catalog.at(s.feature_id).display_name;
    block.text += ": ";
    if (s.static_value) {
      block.text += format_value(*s.static_value);
    } else {
      for (std::size_t i = 0; i < s.bucket_means.size(); ++i) {
        if (i > 0) block.text += ", ";
        block.text += format_value(s.bucket_means[i]);
      }
    }
    ++block.line_count;
  }
  return block;
}

std::vector<ParsedLine> parse_numeric_block(std::string_view text) {
  std::vector<ParsedLine> out;
  std::istringstream in{std::string(text)};
  std::string line;
  while (std::getline(in, line)) {
    if (trim(line).empty()) continue;
    const auto colon = line.rfind(": ");
    if (colon == std::string::npos) throw std::invalid_argument("numeric block line without ': ' separator");
    ParsedLine parsed;
    parsed.display_name = line.substr(0, colon);
    std::istringstream values(line.substr(colon + 2));
    std::string item;
    while (std::getline(values, item, ',')) {
      const auto t = trim(item);
      double v = 0.0;
      auto [p, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
      if (ec != std::errc{} || p != t.data() + t.size()) {
        throw std::invalid_argument("bad number '" + t + "' in numeric block");
      }
      parsed.values.push_back(v);
    }
    out.push_back(std::move(parsed));
  }
  return out;
}

DescriptionPrompt build_description_prompt(const NumericBlock& block, const std::string& template_text) {
  DescriptionPrompt out;
  out.text = template_text;
  if (replace_all(out.text, kDescriptionMarker, block.text) == 0) {
    throw TemplateError("description template has no insertion marker " + std::string(kDescriptionMarker));
  }
  if (block.text.empty()) out.warnings.push_back("numeric block is empty; prompt has nothing to describe");
  return out;
}

DescriptionPrompt build_description_prompt(const NumericBlock& block) {
  return build_description_prompt(block, load_asset(kDescriptionTemplateAsset));
}

DescriptionValidation validate_description(std::string_view text) {
  DescriptionValidation v;
  bool pending = false;  // inside a sentence that has not been terminated yet
  std::size_t digits = 0;
  for (std::size_t i = 0; i < text.size(); ++i) {
    const unsigned char c = static_cast<unsigned char>(text[i]);
    if (std::isdigit(c)) ++digits;
    if (c == '.' || c == '!' || c == '?') {
      const bool at_boundary = i + 1 == text.size() || std::isspace(static_cast<unsigned char>(text[i + 1]));
      if (at_boundary && pending) {
        ++v.sentence_count;
        pending = false;
      }
      continue;
    }
    if (!std::isspace(c)) pending = true;
  }
  if (pending) ++v.sentence_count;  // trailing fragment without terminator
  if (v.sentence_count > kMaxDescriptionSentences) {
    v.violations.push_back("description has " + std::to_string(v.sentence_count) + " sentences (maximum " +
                           std::to_string(kMaxDescriptionSentences) + ")");
  }
  if (digits > 0) {
    v.violations.push_back("description contains " + std::to_string(digits) + " digit character(s)");
  }
  return v;
}

std::string ModelInput::text() const {
  std::string out;
  auto append = [&out](const std::string& part) {
    if (part.empty()) return;
    if (!out.empty()) out += "\n\n";
    out += part;
  };
  append(instruction);
  append(note);
  if (ts.mode != TsMode::none) append(ts.payload);
  append(query);
  return out;
}

ModelInput assemble_input(std::string instruction, std::string note, TsRepresentation ts, std::string query) {
  if (ts.mode == TsMode::none) ts.payload.clear();
  return ModelInput{std::move(instruction), std::move(note), std::move(ts), std::move(query)};
}

}  // namespace ehrprompt
