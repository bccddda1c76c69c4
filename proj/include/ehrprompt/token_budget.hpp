#pragma once

#include <cstddef>
#include <memory>
#include <mutex>
#include <string>
#include <string_view>
#include <vector>

namespace ehrprompt {

// Byte range [begin, end) of one token in the source text.
struct TokenSpan {
  std::size_t begin = 0;
  std::size_t end = 0;
  friend bool operator==(const TokenSpan&, const TokenSpan&) = default;
};

// Deterministic text -> token spans. Implementations must be safe to share
// across threads.
class Tokenizer {
 public:
  virtual ~Tokenizer() = default;
  virtual std::string name() const = 0;
  virtual std::vector<TokenSpan> tokenize(std::string_view text) const = 0;
};

// Maximal runs of non-whitespace bytes.
class WhitespaceTokenizer final : public Tokenizer {
 public:
  std::string name() const override { return "whitespace"; }
  std::vector<TokenSpan> tokenize(std::string_view text) const override;
};

// Talks to an external tokenizer process over stdin/stdout, one JSON object
// per line: {"text": ...} -> {"count": n, "offsets": [[b, e], ...]}.
class SubprocessTokenizer final : public Tokenizer {
 public:
  explicit SubprocessTokenizer(std::vector<std::string> argv);
  ~SubprocessTokenizer() override;
  SubprocessTokenizer(const SubprocessTokenizer&) = delete;
  SubprocessTokenizer& operator=(const SubprocessTokenizer&) = delete;

  std::string name() const override;
  std::vector<TokenSpan> tokenize(std::string_view text) const override;

 private:
  std::vector<std::string> argv_;
  int pid_ = -1;
  int to_child_ = -1;
  int from_child_ = -1;
  mutable std::string read_buffer_;
  mutable std::mutex mutex_;  // one request in flight at a time
};

std::shared_ptr<const Tokenizer> make_tokenizer(const std::string& spec);

std::size_t count_tokens(std::string_view text, const Tokenizer& tok);

struct BudgetPlan {
  std::size_t max_context = 512;
  std::size_t reserved = 0;  // instruction + time series + query
  std::size_t available_for_note() const { return reserved >= max_context ? 0 : max_context - reserved; }
};

struct TruncationReport {
  std::size_t original_tokens = 0;
  std::size_t kept_tokens = 0;
  bool truncated = false;
  bool no_room = false;  // available_for_note() was zero
};

struct TruncatedNote {
  std::string text;
  TruncationReport report;
};

// Keeps the longest token prefix that fits, cut at the end of the last kept token.
TruncatedNote truncate_to_fit(std::string_view note, const BudgetPlan& plan, const Tokenizer& tok);

}  // namespace ehrprompt
