#include "ehrprompt/runner.hpp"

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <thread>

#include "ehrprompt/util.hpp"

namespace ehrprompt {

using nlohmann::json;
using nlohmann::ordered_json;

RunMode parse_run_mode(const std::string& s) {
  if (s == "text") return RunMode::text;
  if (s == "text+ts-numeric") return RunMode::text_ts_numeric;
  if (s == "text+ts-description") return RunMode::text_ts_description;
  if (s == "ts-only") return RunMode::ts_only;
  throw std::invalid_argument("unknown run mode '" + s + "'");
}

std::string to_string(RunMode m) {
  switch (m) {
    case RunMode::text: return "text";
    case RunMode::text_ts_numeric: return "text+ts-numeric";
    case RunMode::text_ts_description: return "text+ts-description";
    case RunMode::ts_only: return "ts-only";
  }
  return "text";
}

void RunConfig::validate() const {
  const auto& t = task_spec(task);
  if (mode != RunMode::text && !t.supports_time_series()) {
    throw std::invalid_argument("mode " + to_string(mode) + " needs time-series data; task '" + task +
                                "' is text-only");
  }
  if (repetitions < 1) throw std::invalid_argument("repetitions must be >= 1");
  if (max_context < 1) throw std::invalid_argument("max_context must be >= 1");
  if (endpoint.parallelism < 1) throw std::invalid_argument("endpoint.parallelism must be >= 1");
  if (endpoint.max_retries < 0) throw std::invalid_argument("endpoint.max_retries must be >= 0");
  if (max_records && *max_records == 0) throw std::invalid_argument("max_records must be positive");
  if (!instruction.empty() && !instruction_from.empty()) {
    throw std::invalid_argument("set either instruction or instruction_from, not both");
  }
  aggregation.validate();
}

json RunConfig::to_json() const {
  json j = {{"task", task},
            {"mode", to_string(mode)},
            {"data", data},
            {"catalog", catalog},
            {"split", to_string(split)},
            {"aggregation", aggregation.to_json()},
            {"outlier_policy", to_string(outlier_policy)},
            {"max_context", max_context},
            {"tokenizer", tokenizer},
            {"endpoint",
             {{"base_url", endpoint.base_url},
              {"model", endpoint.model},
              {"temperature", endpoint.temperature},
              {"max_new_tokens", endpoint.max_new_tokens},
              {"use_logprobs", endpoint.use_logprobs},
              {"parallelism", endpoint.parallelism},
              {"max_retries", endpoint.max_retries},
              {"backoff_ms", endpoint.backoff_ms},
              {"timeout_ms", endpoint.timeout_ms}}},
            {"description",
             {{"template", description.template_asset},
              {"temperature", description.temperature},
              {"max_new_tokens", description.max_new_tokens}}},
            {"instruction", instruction},
            {"instruction_from", instruction_from},
            {"repetitions", repetitions},
            {"seed", seed},
            {"max_records", max_records ? json(*max_records) : json(nullptr)},
            {"energy_meter_command", energy_meter_command}};
  return j;
}

RunConfig RunConfig::from_json(const json& j) {
  RunConfig c;
  c.task = j.value("task", c.task);
  if (j.contains("mode")) c.mode = parse_run_mode(j.at("mode").get<std::string>());
  c.data = j.value("data", c.data);
  c.catalog = j.value("catalog", c.catalog);
  if (j.contains("split")) c.split = parse_split(j.at("split").get<std::string>());
  if (j.contains("aggregation")) c.aggregation = AggregationConfig::from_json(j.at("aggregation"));
  if (j.contains("outlier_policy")) c.outlier_policy = parse_outlier_policy(j.at("outlier_policy").get<std::string>());
  c.max_context = j.value("max_context", c.max_context);
  c.tokenizer = j.value("tokenizer", c.tokenizer);
  if (j.contains("endpoint")) {
    const auto& e = j.at("endpoint");
    c.endpoint.base_url = e.value("base_url", c.endpoint.base_url);
    c.endpoint.model = e.value("model", c.endpoint.model);
    c.endpoint.temperature = e.value("temperature", c.endpoint.temperature);
    c.endpoint.max_new_tokens = e.value("max_new_tokens", c.endpoint.max_new_tokens);
    c.endpoint.use_logprobs = e.value("use_logprobs", c.endpoint.use_logprobs);
    c.endpoint.parallelism = e.value("parallelism", c.endpoint.parallelism);
    c.endpoint.max_retries = e.value("max_retries", c.endpoint.max_retries);
    c.endpoint.backoff_ms = e.value("backoff_ms", c.endpoint.backoff_ms);
    c.endpoint.timeout_ms = e.value("timeout_ms", c.endpoint.timeout_ms);
    c.endpoint.cache_dir = e.value("cache_dir", c.endpoint.cache_dir);
  }
  if (j.contains("description")) {
    const auto& d = j.at("description");
    c.description.template_asset = d.value("template", c.description.template_asset);
    c.description.temperature = d.value("temperature", c.description.temperature);
    c.description.max_new_tokens = d.value("max_new_tokens", c.description.max_new_tokens);
  }
  c.instruction = j.value("instruction", c.instruction);
  c.instruction_from = j.value("instruction_from", c.instruction_from);
  c.repetitions = j.value("repetitions", c.repetitions);
  c.seed = j.value("seed", c.seed);
  if (j.contains("max_records") && !j.at("max_records").is_null()) {
    c.max_records = j.at("max_records").get<std::size_t>();
  }
  c.energy_meter_command = j.value("energy_meter_command", c.energy_meter_command);
  c.output_dir = j.value("output_dir", c.output_dir);
  c.validate();
  return c;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
  auto cfg = from_json(json::parse(read_file(path)));
  // Relative data/catalog paths resolve against the config file's directory.
  const auto base = path.parent_path();
  auto resolve = [&base](std::string& p) {
    if (!p.empty() && std::filesystem::path(p).is_relative()) p = (base / p).lexically_normal().string();
  };
  resolve(cfg.data);
  resolve(cfg.catalog);
  resolve(cfg.instruction_from);
  return cfg;
}

std::string RunConfig::hash() const { return sha256_hex(to_json().dump()); }

RunConfig ablate_feature(const RunConfig& cfg, const std::string& feature_id, const FeatureCatalog& catalog) {
  if (!catalog.contains(feature_id)) throw std::invalid_argument("cannot ablate unknown feature '" + feature_id + "'");
  RunConfig out = cfg;
  out.aggregation.excluded_features.insert(feature_id);
  return out;
}

FeatureCatalog load_catalog(const RunConfig& cfg) {
  if (cfg.catalog.empty()) return default_catalog();
  return FeatureCatalog::load(cfg.catalog);
}

ClientOptions client_options(const RunConfig& cfg) {
  auto o = ClientOptions::from_env();
  if (!cfg.endpoint.base_url.empty()) o.base_url = cfg.endpoint.base_url;
  o.parallelism = cfg.endpoint.parallelism;
  o.max_retries = cfg.endpoint.max_retries;
  o.backoff_initial = std::chrono::milliseconds(cfg.endpoint.backoff_ms);
  o.timeout = std::chrono::milliseconds(cfg.endpoint.timeout_ms);
  if (!cfg.endpoint.cache_dir.empty()) o.cache_dir = cfg.endpoint.cache_dir;
  return o;
}

GenerationSettings prediction_settings(const RunConfig& cfg) {
  GenerationSettings s;
  s.model = cfg.endpoint.model;
  s.temperature = cfg.endpoint.temperature;
  s.max_new_tokens = cfg.endpoint.max_new_tokens;
  s.use_logprobs = cfg.endpoint.use_logprobs && task_spec(cfg.task).kind == TaskKind::scored_binary;
  s.seed = cfg.seed;
  return s;
}

DataSet load_dataset(const RunConfig& cfg, const FeatureCatalog& catalog) {
  if (cfg.data.empty()) throw std::invalid_argument("run config has no data file");
  auto parsed = parse_records(cfg.data, catalog);
  DataSet ds;
  ds.rejections = std::move(parsed.rejections);
  for (auto& rec : parsed.records) {
    if (rec.split != cfg.split) continue;
    CanonicalizeStats stats;
    ds.records.push_back(canonicalize_record(rec, catalog, cfg.outlier_policy, &stats));
    ds.dropped_events += stats.dropped;
  }
  if (ds.records.empty()) {
    throw std::invalid_argument("no '" + to_string(cfg.split) + "' records in " + cfg.data);
  }
  return ds;
}

InputPipeline::InputPipeline(const RunConfig& cfg, const TaskSpec& task, const FeatureCatalog& catalog,
                             LlmClient& client, std::shared_ptr<const Tokenizer> tokenizer)
    : cfg_(cfg), task_(task), catalog_(catalog), client_(client), tokenizer_(std::move(tokenizer)) {
  if (cfg_.mode == RunMode::text_ts_description) description_template_ = load_asset(cfg_.description.template_asset);
}

TsRepresentation InputPipeline::time_series_for(const PatientRecord& rec, InputTrace& trace) const {
  if (cfg_.mode == RunMode::text) return TsRepresentation::none();
  const auto agg = aggregate_record(rec, catalog_, cfg_.aggregation);
  const auto block = render_numeric_block(agg.series, catalog_);
  if (cfg_.mode != RunMode::text_ts_description) return TsRepresentation::numeric(block);

  GenerationSettings s;
  s.model = cfg_.endpoint.model;
  s.temperature = cfg_.description.temperature;
  s.max_new_tokens = cfg_.description.max_new_tokens;
  s.seed = cfg_.seed;
  auto d = generate_description(block, client_, s, description_template_, "record '" + rec.id + "'");
  trace.description_violations = d.validation.violations;
  return TsRepresentation::description(std::move(d.text));
}

BuiltInput InputPipeline::build(const std::string& instruction, const PatientRecord& rec) const {
  BuiltInput out;
  auto ts = time_series_for(rec, out.trace);
  const std::string note = cfg_.mode == RunMode::ts_only ? std::string{} : task_.text_for(rec);
  // Reserve instruction + time series + query first; the note gets what is left.
  const auto skeleton = assemble_input(instruction, "", ts, task_.query);
  out.trace.reserved_tokens = count_tokens(skeleton.text(), *tokenizer_);
  const BudgetPlan plan{cfg_.max_context, out.trace.reserved_tokens};
  auto truncated = truncate_to_fit(note, plan, *tokenizer_);
  out.trace.truncation = truncated.report;
  out.input = assemble_input(instruction, std::move(truncated.text), std::move(ts), task_.query);
  return out;
}

InputBuilder InputPipeline::as_builder() const {
  return [this](const std::string& instruction, const PatientRecord& rec) { return build(instruction, rec).input; };
}

std::string resolve_instruction(const RunConfig& cfg, const TaskSpec& task) {
  if (!cfg.instruction.empty()) return cfg.instruction;
  if (!cfg.instruction_from.empty()) {
    const auto j = json::parse(read_file(cfg.instruction_from));
    return j.at("text").get<std::string>();
  }
  return task.description;
}

namespace {

// Runs fn(i) for i in [0, n) on up to `workers` threads; rethrows the first error.
template <typename Fn>
void parallel_for(std::size_t n, int workers, Fn fn) {
  const auto k = std::max<std::size_t>(1, std::min<std::size_t>(n, static_cast<std::size_t>(workers)));
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  auto work = [&] {
    for (;;) {
      const auto i = next.fetch_add(1);
      if (i >= n) return;
      try {
        fn(i);
      } catch (...) {
        std::lock_guard lock(error_mutex);
        if (!error) error = std::current_exception();
        next.store(n);
        return;
      }
    }
  };
  std::vector<std::thread> threads;
  for (std::size_t t = 1; t < k; ++t) threads.emplace_back(work);
  work();
  for (auto& t : threads) t.join();
  if (error) std::rethrow_exception(error);
}

std::vector<std::size_t> records_for_rep(const RunConfig& cfg, std::size_t total, int rep) {
  std::vector<std::size_t> idx;
  if (!cfg.max_records || *cfg.max_records >= total) {
    idx.resize(total);
    for (std::size_t i = 0; i < total; ++i) idx[i] = i;
    return idx;
  }
  idx = seeded_permutation(total, cfg.seed + static_cast<std::uint64_t>(rep));
  idx.resize(*cfg.max_records);
  std::sort(idx.begin(), idx.end());
  return idx;
}

ordered_json input_trace_json(int rep, const std::string& id, const InputTrace& t) {
  ordered_json j;
  j["rep"] = rep;
  j["id"] = id;
  j["reserved_tokens"] = t.reserved_tokens;
  j["note_tokens"] = t.truncation.original_tokens;
  j["kept_tokens"] = t.truncation.kept_tokens;
  j["truncated"] = t.truncation.truncated;
  j["no_room"] = t.truncation.no_room;
  j["description_violations"] = t.description_violations;
  return j;
}

}  // namespace

std::string predictions_to_jsonl(const RunReport& report, const TaskSpec& task) {
  std::string out;
  for (const auto& row : report.predictions) {
    ordered_json j;
    j["rep"] = row.rep;
    j["id"] = row.prediction.record_id;
    if (task.kind == TaskKind::scored_binary) {
      j["gold"] = row.prediction.gold_flag;
      j["score"] = *row.prediction.score;
    } else {
      j["gold"] = row.prediction.gold_label;
      j["predicted"] = row.prediction.predicted_label;
    }
    j["unparsed"] = row.prediction.unparsed;
    j["raw"] = row.prediction.raw;
    out += j.dump();
    out += '\n';
  }
  return out;
}

ordered_json report_to_json(const RunReport& report, const RunConfig& cfg) {
  ordered_json j;
  j["config_hash"] = report.config_hash;
  j["task"] = cfg.task;
  j["mode"] = to_string(cfg.mode);
  j["repetitions"] = ordered_json::array();
  for (const auto& r : report.repetitions) j["repetitions"].push_back(to_json(r));
  j["median"] = to_json(report.median);
  j["rejected_lines"] = report.rejected_lines;
  j["truncated_inputs"] = report.truncated_inputs;
  j["description_violations"] = report.description_violations;
  j["warnings"] = report.warnings;
  return j;
}

RunReport run_experiment(const RunConfig& cfg, LlmClient& client) {
  cfg.validate();
  const auto& task = task_spec(cfg.task);
  const auto catalog = load_catalog(cfg);
  const auto data = load_dataset(cfg, catalog);
  const auto tokenizer = make_tokenizer(cfg.tokenizer);
  const auto instruction = resolve_instruction(cfg, task);
  const auto settings = prediction_settings(cfg);
  InputPipeline pipeline(cfg, task, catalog, client, tokenizer);

  RunReport report;
  report.config_hash = cfg.hash();
  report.rejected_lines = data.rejections.size();
  if (!data.rejections.empty()) {
    report.warnings.push_back(std::to_string(data.rejections.size()) + " input line(s) rejected");
  }
  if (data.dropped_events > 0) {
    report.warnings.push_back(std::to_string(data.dropped_events) + " out-of-range event(s) dropped");
  }

  std::string trace;
  for (int rep = 0; rep < cfg.repetitions; ++rep) {
    const auto idx = records_for_rep(cfg, data.records.size(), rep);
    std::vector<PredictionRecord> preds(idx.size());
    std::vector<InputTrace> traces(idx.size());
    auto rep_settings = settings;
    if (rep_settings.seed) rep_settings.seed = *rep_settings.seed + static_cast<std::uint64_t>(rep);

    const auto start = std::chrono::steady_clock::now();
    parallel_for(idx.size(), cfg.endpoint.parallelism, [&](std::size_t i) {
      const auto& rec = data.records[idx[i]];
      auto built = pipeline.build(instruction, rec);
      traces[i] = built.trace;
      preds[i] = predict(task, rec, built.input, client, rep_settings);
    });
    const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

    auto metrics = evaluate(task, preds);
    metrics.wall_time_s = wall;
    report.repetitions.push_back(metrics);
    report.timing.rep_wall_s.push_back(wall);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      report.predictions.push_back({rep, preds[i]});
      if (traces[i].truncation.truncated) ++report.truncated_inputs;
      report.description_violations += traces[i].description_violations.size();
      trace += input_trace_json(rep, data.records[idx[i]].id, traces[i]).dump();
      trace += '\n';
    }
  }
  report.median = median_of_runs(report.repetitions);
  report.timing.median_wall_s = median(report.timing.rep_wall_s);
  const auto per_rep = report.repetitions.front().n;
  report.timing.per_100_samples_s = per_rep == 0 ? 0.0 : report.timing.median_wall_s * 100.0 / static_cast<double>(per_rep);

  if (!cfg.output_dir.empty()) {
    const std::filesystem::path dir(cfg.output_dir);
    std::filesystem::create_directories(dir);
    ordered_json timing;
    timing["rep_wall_s"] = report.timing.rep_wall_s;
    timing["median_wall_s"] = report.timing.median_wall_s;
    timing["per_100_samples_s"] = report.timing.per_100_samples_s;
    timing["energy_j"] = "unavailable";
    ordered_json lock;
    lock["config_hash"] = report.config_hash;
    lock["config"] = cfg.to_json();
    const std::pair<const char*, std::string> files[] = {
        {"predictions.jsonl", predictions_to_jsonl(report, task)},
        {"report.json", report_to_json(report, cfg).dump(2) + "\n"},
        {"trace.jsonl", trace},
        {"timing.json", timing.dump(2) + "\n"},
        {"config.lock.json", lock.dump(2) + "\n"},
    };
    for (const auto& [name, contents] : files) {
      write_file_atomic(dir / name, contents);
      report.artifacts.push_back(dir / name);
    }
  }
  return report;
}

RunReport run_experiment(const RunConfig& cfg) {
  LlmClient client(client_options(cfg));
  return run_experiment(cfg, client);
}

ordered_json TimingResult::to_json() const {
  ordered_json j;
  j["n_samples"] = n_samples;
  j["total_s"] = total_s;
  j["per_100_samples_s"] = per_100_s;
  if (energy_j) {
    j["energy_j"] = *energy_j;
  } else {
    j["energy_j"] = "unavailable";
  }
  return j;
}

double read_energy_meter(const std::string& command) {
  FILE* pipe = ::popen(command.c_str(), "r");
  if (!pipe) throw std::runtime_error("cannot run energy meter command: " + command);
  std::string out;
  char buf[256];
  while (std::fgets(buf, sizeof buf, pipe)) out += buf;
  const int status = ::pclose(pipe);
  if (status != 0) throw std::runtime_error("energy meter command failed: " + command);
  char* end = nullptr;
  const double v = std::strtod(out.c_str(), &end);
  if (end == out.c_str()) throw std::runtime_error("energy meter printed no number: " + trim(out));
  return v;
}

TimingResult time_inference(std::size_t n_samples, const RunConfig& cfg, std::shared_ptr<Transport> transport) {
  if (n_samples == 0) throw std::invalid_argument("time_inference needs at least one sample");
  cfg.validate();
  const auto& task = task_spec(cfg.task);
  const auto catalog = load_catalog(cfg);
  const auto data = load_dataset(cfg, catalog);
  const auto tokenizer = make_tokenizer(cfg.tokenizer);
  const auto instruction = resolve_instruction(cfg, task);
  const auto settings = prediction_settings(cfg);

  // Inputs (including any descriptions) are prepared outside the timed region.
  LlmClient prep_client(transport, client_options(cfg));
  InputPipeline pipeline(cfg, task, catalog, prep_client, tokenizer);
  std::vector<InferenceRequest> requests;
  requests.reserve(n_samples);
  for (std::size_t i = 0; i < n_samples; ++i) {
    const auto& rec = data.records[i % data.records.size()];
    requests.push_back(settings.request_for(pipeline.build(instruction, rec).input.text()));
  }

  auto opts = client_options(cfg);
  opts.use_cache = false;
  opts.cache_dir.reset();
  LlmClient timed(transport, opts);

  TimingResult r;
  r.n_samples = n_samples;
  std::optional<double> before;
  if (!cfg.energy_meter_command.empty()) before = read_energy_meter(cfg.energy_meter_command);
  const auto start = std::chrono::steady_clock::now();
  for (const auto& req : requests) timed.complete(req);
  r.total_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  if (before) r.energy_j = read_energy_meter(cfg.energy_meter_command) - *before;
  r.per_100_s = r.total_s * 100.0 / static_cast<double>(n_samples);
  return r;
}

}  // namespace ehrprompt
