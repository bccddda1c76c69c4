#include "ehrprompt/token_budget.hpp"

#include <cctype>
#include <cerrno>
#include <csignal>
#include <cstring>
#include <stdexcept>

#include <sys/types.h>
#include <sys/wait.h>
#include <unistd.h>

#include <nlohmann/json.hpp>

namespace ehrprompt {

std::vector<TokenSpan> WhitespaceTokenizer::tokenize(std::string_view text) const {
  std::vector<TokenSpan> out;
  std::size_t i = 0;
  const std::size_t n = text.size();
  while (i < n) {
    while (i < n && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
    if (i == n) break;
    const std::size_t b = i;
    while (i < n && !std::isspace(static_cast<unsigned char>(text[i]))) ++i;
    out.push_back({b, i});
  }
  return out;
}

namespace {

void write_all(int fd, std::string_view data) {
  while (!data.empty()) {
    const ssize_t w = ::write(fd, data.data(), data.size());
    if (w < 0) {
      if (errno == EINTR) continue;
      throw std::runtime_error(std::string("tokenizer adapter write failed: ") + std::strerror(errno));
    }
    data.remove_prefix(static_cast<std::size_t>(w));
  }
}

}  // namespace

SubprocessTokenizer::SubprocessTokenizer(std::vector<std::string> argv) : argv_(std::move(argv)) {
  if (argv_.empty()) throw std::invalid_argument("tokenizer adapter command is empty");
  int in_pipe[2];
  int out_pipe[2];
  if (::pipe(in_pipe) != 0 || ::pipe(out_pipe) != 0) throw std::runtime_error("pipe() failed");
  std::signal(SIGPIPE, SIG_IGN);
  pid_ = ::fork();
  if (pid_ < 0) throw std::runtime_error("fork() failed");
  if (pid_ == 0) {
    ::dup2(in_pipe[0], STDIN_FILENO);
    ::dup2(out_pipe[1], STDOUT_FILENO);
    ::close(in_pipe[0]);
    ::close(in_pipe[1]);
    ::close(out_pipe[0]);
    ::close(out_pipe[1]);
    std::vector<char*> args;
    for (auto& a : argv_) args.push_back(a.data());
    args.push_back(nullptr);
    ::execvp(args[0], args.data());
    ::_exit(127);
  }
  ::close(in_pipe[0]);
  ::close(out_pipe[1]);
  to_child_ = in_pipe[1];
  from_child_ = out_pipe[0];
}

SubprocessTokenizer::~SubprocessTokenizer() {
  if (to_child_ >= 0) ::close(to_child_);
  if (from_child_ >= 0) ::close(from_child_);
  if (pid_ > 0) {
    int status = 0;
    ::waitpid(pid_, &status, 0);
  }
}

std::string SubprocessTokenizer::name() const { return "subprocess:" + argv_.front(); }

std::vector<TokenSpan> SubprocessTokenizer::tokenize(std::string_view text) const {
  std::lock_guard lock(mutex_);
  write_all(to_child_, nlohmann::json{{"text", std::string(text)}}.dump() + "\n");

  std::string line;
  for (;;) {
    const auto nl = read_buffer_.find('\n');
    if (nl != std::string::npos) {
      line = read_buffer_.substr(0, nl);
      read_buffer_.erase(0, nl + 1);
      break;
    }
    char buf[4096];
    const ssize_t r = ::read(from_child_, buf, sizeof buf);
    if (r < 0 && errno == EINTR) continue;
    if (r <= 0) throw std::runtime_error("tokenizer adapter closed its output");
    read_buffer_.append(buf, static_cast<std::size_t>(r));
  }

  const auto j = nlohmann::json::parse(line);
  std::vector<TokenSpan> out;
  for (const auto& o : j.at("offsets")) {
    TokenSpan s{o.at(0).get<std::size_t>(), o.at(1).get<std::size_t>()};
    if (s.begin > s.end || s.end > text.size()) throw std::runtime_error("tokenizer adapter returned bad offsets");
    out.push_back(s);
  }
  if (j.at("count").get<std::size_t>() != out.size()) {
    throw std::runtime_error("tokenizer adapter count disagrees with offsets");
  }
  return out;
}

std::shared_ptr<const Tokenizer> make_tokenizer(const std::string& spec) {
  if (spec.empty() || spec == "whitespace") return std::make_shared<WhitespaceTokenizer>();
  constexpr std::string_view kPrefix = "subprocess:";
  if (spec.starts_with(kPrefix)) {
    std::vector<std::string> argv;
    std::string cur;
    for (char c : spec.substr(kPrefix.size())) {
      if (c == ' ') {
        if (!cur.empty()) argv.push_back(std::move(cur));
        cur.clear();
      } else {
        cur += c;
      }
    }
    if (!cur.empty()) argv.push_back(std::move(cur));
    return std::make_shared<SubprocessTokenizer>(std::move(argv));
  }
  throw std::invalid_argument("unknown tokenizer '" + spec + "'");
}

std::size_t count_tokens(std::string_view text, const Tokenizer& tok) { return tok.tokenize(text).size(); }

TruncatedNote truncate_to_fit(std::string_view note, const BudgetPlan& plan, const Tokenizer& tok) {
  const auto tokens = tok.tokenize(note);
  const std::size_t available = plan.available_for_note();
  TruncatedNote out;
  out.report.original_tokens = tokens.size();
  out.report.no_room = available == 0;
  if (tokens.size() <= available) {
    out.text = std::string(note);
    out.report.kept_tokens = tokens.size();
    return out;
  }
  out.report.truncated = true;
  out.report.kept_tokens = available;
  if (available > 0) out.text = std::string(note.substr(0, tokens[available - 1].end));
  return out;
}

}  // namespace ehrprompt
