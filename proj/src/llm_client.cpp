#include "ehrprompt/llm_client.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdlib>
#include <limits>
#include <regex>
#include <thread>

#include <httplib.h>

#include "ehrprompt/util.hpp"

namespace ehrprompt {

using nlohmann::json;

json to_wire_json(const InferenceRequest& req) {
  json messages = json::array();
  for (const auto& m : req.messages) messages.push_back({{"role", m.role}, {"content", m.content}});
  json body = {{"model", req.model},
               {"messages", messages},
               {"temperature", req.temperature},
               {"max_tokens", req.max_new_tokens},
               {"logprobs", req.want_logprobs}};
  if (req.want_logprobs) body["top_logprobs"] = req.top_logprobs;
  if (req.seed) body["seed"] = *req.seed;
  return body;
}

std::string cache_key(const InferenceRequest& req) {
  // json objects serialize with sorted keys, so the dump is canonical.
  return sha256_hex(to_wire_json(req).dump());
}

namespace {

json logprobs_to_json(const std::vector<TokenLogprob>& lps) {
  json content = json::array();
  for (const auto& t : lps) {
    json top = json::array();
    for (const auto& [tok, lp] : t.top) top.push_back({{"token", tok}, {"logprob", lp}});
    content.push_back({{"token", t.token}, {"logprob", t.logprob}, {"top_logprobs", top}});
  }
  return {{"content", content}};
}

std::vector<TokenLogprob> logprobs_from_json(const json& j) {
  std::vector<TokenLogprob> out;
  for (const auto& c : j.at("content")) {
    TokenLogprob t;
    t.token = c.at("token").get<std::string>();
    t.logprob = c.at("logprob").get<double>();
    if (c.contains("top_logprobs") && c.at("top_logprobs").is_array()) {
      for (const auto& alt : c.at("top_logprobs")) {
        t.top.emplace_back(alt.at("token").get<std::string>(), alt.at("logprob").get<double>());
      }
    }
    out.push_back(std::move(t));
  }
  return out;
}

json response_to_json(const InferenceResponse& r) {
  json j = {{"text", r.text}, {"latency_ms", r.latency_ms}};
  if (r.logprobs) j["logprobs"] = logprobs_to_json(*r.logprobs);
  return j;
}

InferenceResponse response_from_json(const json& j) {
  InferenceResponse r;
  r.text = j.at("text").get<std::string>();
  r.latency_ms = j.value("latency_ms", std::int64_t{0});
  if (j.contains("logprobs")) r.logprobs = logprobs_from_json(j.at("logprobs"));
  return r;
}

}  // namespace

InferenceResponse parse_wire_response(const std::string& body) {
  try {
    const auto j = json::parse(body);
    const auto& choice = j.at("choices").at(0);
    InferenceResponse r;
    const auto& content = choice.at("message").at("content");
    r.text = content.is_null() ? std::string{} : content.get<std::string>();
    if (choice.contains("logprobs") && choice.at("logprobs").is_object()) {
      r.logprobs = logprobs_from_json(choice.at("logprobs"));
    }
    return r;
  } catch (const json::exception& e) {
    throw MalformedResponseError(std::string("malformed chat-completion response: ") + e.what());
  }
}

HttpTransport::HttpTransport(std::string base_url, std::string api_key, std::chrono::milliseconds timeout)
    : api_key_(std::move(api_key)), timeout_(timeout) {
  const auto scheme = base_url.find("://");
  const auto path_start = base_url.find('/', scheme == std::string::npos ? 0 : scheme + 3);
  if (path_start == std::string::npos) {
    base_url_ = base_url;
  } else {
    base_url_ = base_url.substr(0, path_start);
    path_prefix_ = base_url.substr(path_start);
    while (!path_prefix_.empty() && path_prefix_.back() == '/') path_prefix_.pop_back();
  }
}

HttpResult HttpTransport::post(const std::string& path, const std::string& json_body) {
  httplib::Client cli(base_url_);
  const auto secs = std::chrono::duration_cast<std::chrono::seconds>(timeout_);
  const auto usecs = std::chrono::duration_cast<std::chrono::microseconds>(timeout_ - secs);
  cli.set_connection_timeout(secs.count(), usecs.count());
  cli.set_read_timeout(secs.count(), usecs.count());
  cli.set_write_timeout(secs.count(), usecs.count());
  httplib::Headers headers;
  if (!api_key_.empty()) headers.emplace("Authorization", "Bearer " + api_key_);
  auto res = cli.Post(path_prefix_ + path, headers, json_body, "application/json");
  if (!res) return {0, {}, httplib::to_string(res.error())};
  return {res->status, res->body, {}};
}

ClientOptions ClientOptions::from_env() {
  ClientOptions o;
  if (const char* v = std::getenv("EHRPROMPT_ENDPOINT")) o.base_url = v;
  if (const char* v = std::getenv("EHRPROMPT_API_KEY")) o.api_key = v;
  if (const char* v = std::getenv("EHRPROMPT_PARALLELISM")) o.parallelism = std::max(1, std::atoi(v));
  if (const char* v = std::getenv("EHRPROMPT_CACHE_DIR")) o.cache_dir = v;
  return o;
}

ResponseCache::ResponseCache(std::optional<std::filesystem::path> dir) : dir_(std::move(dir)) {}

std::filesystem::path ResponseCache::path_for(const std::string& key) const {
  return *dir_ / key.substr(0, 2) / (key + ".json");
}

std::optional<InferenceResponse> ResponseCache::get(const std::string& key) {
  {
    std::shared_lock lock(mutex_);
    auto it = entries_.find(key);
    if (it != entries_.end()) return it->second;
  }
  if (!dir_) return std::nullopt;
  const auto p = path_for(key);
  if (!std::filesystem::exists(p)) return std::nullopt;
  InferenceResponse r;
  try {
    r = response_from_json(json::parse(read_file(p)));
  } catch (const std::exception&) {
    return std::nullopt;  // unreadable entry; refetch
  }
  std::unique_lock lock(mutex_);
  entries_.emplace(key, r);
  return r;
}

void ResponseCache::put(const std::string& key, const InferenceResponse& resp) {
  std::unique_lock lock(mutex_);
  entries_[key] = resp;
  if (dir_) write_file_atomic(path_for(key), response_to_json(resp).dump());
}

namespace {

class SlotGuard {
 public:
  explicit SlotGuard(std::counting_semaphore<>& s) : s_(s) { s_.acquire(); }
  ~SlotGuard() { s_.release(); }
  SlotGuard(const SlotGuard&) = delete;
  SlotGuard& operator=(const SlotGuard&) = delete;

 private:
  std::counting_semaphore<>& s_;
};

}  // namespace

LlmClient::LlmClient(std::shared_ptr<Transport> transport, ClientOptions options)
    : transport_(std::move(transport)),
      options_(std::move(options)),
      cache_(options_.use_cache ? options_.cache_dir : std::nullopt),
      slots_(std::max(1, options_.parallelism)) {
  if (!transport_) throw std::invalid_argument("LlmClient needs a transport");
}

LlmClient::LlmClient(ClientOptions options)
    : LlmClient(std::make_shared<HttpTransport>(options.base_url, options.api_key, options.timeout), options) {}

InferenceResponse LlmClient::complete(const InferenceRequest& req) {
  if (req.messages.empty()) throw std::invalid_argument("inference request has no messages");
  if (!options_.use_cache) return complete_uncached(req);

  const auto key = cache_key(req);
  if (auto hit = cache_.get(key)) {
    hit->from_cache = true;
    return *hit;
  }

  std::promise<InferenceResponse> promise;
  std::shared_future<InferenceResponse> waiting;
  {
    std::lock_guard lock(inflight_mutex_);
    auto it = inflight_.find(key);
    if (it != inflight_.end()) {
      waiting = it->second;
    } else {
      inflight_.emplace(key, promise.get_future().share());
    }
  }
  if (waiting.valid()) {
    auto r = waiting.get();
    r.from_cache = true;
    return r;
  }

  try {
    auto r = complete_uncached(req);
    cache_.put(key, r);
    promise.set_value(r);
    std::lock_guard lock(inflight_mutex_);
    inflight_.erase(key);
    return r;
  } catch (...) {
    promise.set_exception(std::current_exception());
    std::lock_guard lock(inflight_mutex_);
    inflight_.erase(key);
    throw;
  }
}

InferenceResponse LlmClient::complete_uncached(const InferenceRequest& req) {
  ++network_calls_;
  const auto body = to_wire_json(req).dump();
  const auto start = std::chrono::steady_clock::now();
  HttpResult last;
  for (int attempt = 0; attempt <= options_.max_retries; ++attempt) {
    {
      SlotGuard slot(slots_);
      last = transport_->post("/v1/chat/completions", body);
    }
    if (last.status >= 200 && last.status < 300) {
      auto r = parse_wire_response(last.body);
      r.latency_ms = std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::steady_clock::now() - start)
                         .count();
      r.from_cache = false;
      return r;
    }
    const bool retryable = last.status == 0 || last.status == 429 || last.status >= 500;
    if (!retryable) throw HttpStatusError(last.status, last.body);
    if (attempt < options_.max_retries) {
      auto delay = options_.backoff_initial * (1LL << std::min(attempt, 30));
      std::this_thread::sleep_for(std::min<std::chrono::milliseconds>(delay, options_.backoff_max));
    }
  }
  const auto attempts = std::to_string(options_.max_retries + 1);
  if (last.status == 0) {
    throw TransportError("request failed after " + attempts + " attempt(s): " + last.error);
  }
  throw HttpStatusError(last.status, last.body);
}

InferenceRequest GenerationSettings::request_for(std::string prompt) const {
  InferenceRequest req;
  req.model = model;
  req.messages.push_back({"user", std::move(prompt)});
  req.temperature = temperature;
  req.max_new_tokens = max_new_tokens;
  req.want_logprobs = use_logprobs;
  if (temperature > 0.0) req.seed = seed;
  return req;
}

void LabelSchema::validate() const {
  if (labels.empty()) throw std::invalid_argument("label schema for '" + task + "' is empty");
  for (std::size_t i = 0; i < labels.size(); ++i) {
    for (std::size_t j = i + 1; j < labels.size(); ++j) {
      if (labels[i] == labels[j]) throw std::invalid_argument("duplicate label '" + labels[i] + "'");
    }
  }
  for (const auto& [alias, target] : aliases) {
    if (!contains(target)) throw std::invalid_argument("alias '" + alias + "' maps to unknown label '" + target + "'");
  }
  if (!contains(fallback)) throw std::invalid_argument("fallback label '" + fallback + "' is not in the schema");
}

std::size_t LabelSchema::index_of(const std::string& label) const {
  auto it = std::find(labels.begin(), labels.end(), label);
  if (it == labels.end()) throw std::invalid_argument("label '" + label + "' is not in the " + task + " schema");
  return static_cast<std::size_t>(it - labels.begin());
}

bool LabelSchema::contains(const std::string& label) const {
  return std::find(labels.begin(), labels.end(), label) != labels.end();
}

std::string normalize_label_text(std::string_view text) {
  std::string out;
  bool space = false;
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isspace(c) || std::ispunct(c)) {
      space = !out.empty();
      continue;
    }
    if (space) out += ' ';
    space = false;
    out += static_cast<char>(std::tolower(c));
  }
  return out;
}

LabelMatch match_label(std::string_view raw, const LabelSchema& schema) {
  const auto norm = normalize_label_text(raw);
  std::vector<std::pair<std::string, std::string>> forms;  // normalized form -> canonical
  for (const auto& l : schema.labels) forms.emplace_back(normalize_label_text(l), l);
  for (const auto& [form, label] : forms) {
    if (form == norm) return {label, false};
  }
  for (const auto& [alias, target] : schema.aliases) {
    if (normalize_label_text(alias) == norm) return {target, false};
  }
  for (const auto& [alias, target] : schema.aliases) forms.emplace_back(normalize_label_text(alias), target);

  const std::string padded = " " + norm + " ";
  const std::string* best = nullptr;
  std::size_t best_len = 0;
  std::size_t best_pos = std::string::npos;
  for (const auto& [form, target] : forms) {
    if (form.empty()) continue;
    const auto pos = padded.find(" " + form + " ");
    if (pos == std::string::npos) continue;
    if (form.size() > best_len || (form.size() == best_len && pos < best_pos)) {
      best = &target;
      best_len = form.size();
      best_pos = pos;
    }
  }
  if (best) return {*best, false};
  return {schema.fallback, true};
}

ClassifyResult classify(const ModelInput& input, const LabelSchema& schema, LlmClient& client,
                        const GenerationSettings& settings) {
  if (schema.labels.empty()) throw std::invalid_argument("classify needs a nonempty label schema");
  auto s = settings;
  s.use_logprobs = false;
  const auto resp = client.complete(s.request_for(input.text()));
  const auto m = match_label(resp.text, schema);
  return {m.label, resp.text, m.unparsed, resp.from_cache, resp.latency_ms};
}

ScoreResult score_from_response(const InferenceResponse& resp, const ScoreOptions& opts) {
  ScoreResult out;
  out.raw = resp.text;
  out.from_cache = resp.from_cache;
  out.latency_ms = resp.latency_ms;

  if (resp.logprobs && !resp.logprobs->empty()) {
    const auto& first = resp.logprobs->front();
    std::vector<std::pair<std::string, double>> alts = first.top;
    const bool chosen_listed = std::any_of(alts.begin(), alts.end(), [&](const auto& a) { return a.first == first.token; });
    if (!chosen_listed) alts.emplace_back(first.token, first.logprob);

    const auto pos = normalize_label_text(opts.positive_token);
    const auto neg = normalize_label_text(opts.negative_token);
    double max_lp = -std::numeric_limits<double>::infinity();
    for (const auto& [tok, lp] : alts) {
      const auto t = normalize_label_text(tok);
      if (t == pos || t == neg) max_lp = std::max(max_lp, lp);
    }
    if (std::isfinite(max_lp)) {
      double pos_mass = 0.0;
      double neg_mass = 0.0;
      for (const auto& [tok, lp] : alts) {
        const auto t = normalize_label_text(tok);
        if (t == pos) pos_mass += std::exp(lp - max_lp);
        if (t == neg) neg_mass += std::exp(lp - max_lp);
      }
      out.score = pos_mass / (pos_mass + neg_mass);
      out.from_logprobs = true;
      return out;
    }
  }

  static const std::regex kNumber(R"([-+]?(?:\d+\.?\d*|\.\d+))");
  for (auto it = std::sregex_iterator(resp.text.begin(), resp.text.end(), kNumber); it != std::sregex_iterator();
       ++it) {
    const double v = std::strtod(it->str().c_str(), nullptr);
    if (v >= 0.0 && v <= 1.0) {
      out.score = v;
      return out;
    }
  }
  out.score = 0.5;
  out.unparsed = true;
  return out;
}

ScoreResult score(const ModelInput& input, LlmClient& client, const GenerationSettings& settings,
                  const ScoreOptions& opts) {
  return score_from_response(client.complete(settings.request_for(input.text())), opts);
}

DescriptionResult generate_description(const NumericBlock& block, LlmClient& client,
                                       const GenerationSettings& settings, const std::string& template_text,
                                       const std::string& context) {
  const auto prompt = build_description_prompt(block, template_text);
  auto s = settings;
  s.use_logprobs = false;
  const std::string where = context.empty() ? std::string{} : context + ": ";
  InferenceResponse resp;
  try {
    resp = client.complete(s.request_for(prompt.text));
  } catch (const TransportError& e) {
    throw TransportError(where + e.what());
  } catch (const MalformedResponseError& e) {
    throw MalformedResponseError(where + e.what());
  } catch (const HttpStatusError& e) {
    throw HttpStatusError(e.status(), where + e.body());
  }
  DescriptionResult out;
  out.text = resp.text;
  out.validation = validate_description(resp.text);
  out.prompt_warnings = prompt.warnings;
  return out;
}

}  // namespace ehrprompt
