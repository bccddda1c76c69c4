#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "ehrprompt/runner.hpp"
#include "ehrprompt/util.hpp"

using namespace ehrprompt;
using nlohmann::json;
using nlohmann::ordered_json;

namespace {

struct DataOptions {
  std::string records;
  std::string config;
  std::string catalog;
  int buckets = 0;
  std::vector<std::string> exclude;
  std::string outlier_policy;

  void add_to(CLI::App* cmd, bool records_required = true) {
    auto* opt = cmd->add_option("--records", records, "Record file (JSONL)");
    if (records_required) opt->required();
    cmd->add_option("--config", config, "Run config supplying catalog and aggregation settings");
    cmd->add_option("--catalog", catalog, "Feature catalog JSON");
    cmd->add_option("--buckets", buckets, "Buckets per feature (default 6; 48 for hourly)");
    cmd->add_option("--exclude", exclude, "Feature ids to leave out");
    cmd->add_option("--outlier-policy", outlier_policy, "clamp or drop");
  }

  RunConfig resolve() const {
    RunConfig cfg = config.empty() ? RunConfig{} : RunConfig::load(config);
    if (!records.empty()) cfg.data = records;
    if (!catalog.empty()) cfg.catalog = catalog;
    if (buckets > 0) cfg.aggregation.bucket_count = buckets;
    for (const auto& e : exclude) cfg.aggregation.excluded_features.insert(e);
    if (!outlier_policy.empty()) cfg.outlier_policy = parse_outlier_policy(outlier_policy);
    cfg.aggregation.validate();
    return cfg;
  }
};

std::vector<PatientRecord> load_all(const RunConfig& cfg, const FeatureCatalog& catalog) {
  auto parsed = parse_records(cfg.data, catalog);
  for (const auto& r : parsed.rejections) {
    std::cerr << cfg.data << ":" << r.line_number << ": rejected: " << r.reason << "\n";
  }
  std::vector<PatientRecord> out;
  for (const auto& rec : parsed.records) out.push_back(canonicalize_record(rec, catalog, cfg.outlier_policy));
  return out;
}

void emit(const std::string& out_path, const std::string& contents) {
  if (out_path.empty()) {
    std::cout << contents;
  } else {
    write_file_atomic(out_path, contents);
  }
}

int cmd_ingest(const DataOptions& d, const std::string& out) {
  const auto cfg = d.resolve();
  const auto catalog = load_catalog(cfg);
  const auto parsed = parse_records(cfg.data, catalog);
  std::string lines;
  CanonicalizeStats total;
  for (const auto& rec : parsed.records) {
    CanonicalizeStats s;
    lines += record_to_json(canonicalize_record(rec, catalog, cfg.outlier_policy, &s)).dump() + "\n";
    total.converted += s.converted;
    total.clamped += s.clamped;
    total.dropped += s.dropped;
  }
  if (!out.empty()) write_file_atomic(out, lines);
  ordered_json summary;
  summary["lines"] = parsed.line_count;
  summary["records"] = parsed.records.size();
  summary["converted_events"] = total.converted;
  summary["clamped_values"] = total.clamped;
  summary["dropped_values"] = total.dropped;
  summary["rejections"] = json::array();
  for (const auto& r : parsed.rejections) summary["rejections"].push_back({{"line", r.line_number}, {"reason", r.reason}});
  std::cout << summary.dump(2) << "\n";
  return 0;
}

int cmd_aggregate(const DataOptions& d, const std::string& out) {
  const auto cfg = d.resolve();
  const auto catalog = load_catalog(cfg);
  std::string lines;
  for (const auto& rec : load_all(cfg, catalog)) {
    const auto agg = aggregate_record(rec, catalog, cfg.aggregation);
    ordered_json j;
    j["id"] = rec.id;
    j["series"] = json::array();
    for (const auto& s : agg.series) j["series"].push_back(ordered_json(to_json(s)));
    j["dropped_outside_window"] = agg.dropped_outside_window;
    lines += j.dump() + "\n";
  }
  emit(out, lines);
  return 0;
}

int cmd_render(const DataOptions& d, const std::string& id, const std::string& out) {
  const auto cfg = d.resolve();
  const auto catalog = load_catalog(cfg);
  std::string text;
  bool found = false;
  for (const auto& rec : load_all(cfg, catalog)) {
    if (!id.empty() && rec.id != id) continue;
    found = true;
    const auto block = render_numeric_block(aggregate_record(rec, catalog, cfg.aggregation).series, catalog);
    if (id.empty()) {
      text += "# " + rec.id + "\n" + block.text + "\n\n";
    } else {
      text += block.text;
    }
  }
  if (!id.empty() && !found) {
    std::cerr << "no record with id '" << id << "'\n";
    return 1;
  }
  emit(out, text);
  return 0;
}

int cmd_describe(const DataOptions& d, const std::string& out) {
  auto cfg = d.resolve();
  cfg.mode = RunMode::text_ts_description;
  const auto catalog = load_catalog(cfg);
  LlmClient client(client_options(cfg));
  const auto tmpl = load_asset(cfg.description.template_asset);
  GenerationSettings s;
  s.model = cfg.endpoint.model;
  s.temperature = cfg.description.temperature;
  s.max_new_tokens = cfg.description.max_new_tokens;
  s.seed = cfg.seed;
  std::string lines;
  for (const auto& rec : load_all(cfg, catalog)) {
    const auto block = render_numeric_block(aggregate_record(rec, catalog, cfg.aggregation).series, catalog);
    const auto r = generate_description(block, client, s, tmpl, "record '" + rec.id + "'");
    ordered_json j;
    j["id"] = rec.id;
    j["description"] = r.text;
    j["sentences"] = r.validation.sentence_count;
    j["violations"] = r.validation.violations;
    lines += j.dump() + "\n";
  }
  emit(out, lines);
  return 0;
}

int cmd_optimize(const std::string& task_id, const std::string& budget_path, const std::string& config_path,
                 const std::string& out_dir) {
  auto cfg = RunConfig::load(config_path);
  cfg.task = task_id;
  cfg.validate();
  const auto& task = task_spec(task_id);
  const auto budget = OptimizationBudget::from_json(json::parse(read_file(budget_path)));
  const auto catalog = load_catalog(cfg);

  auto train_cfg = cfg;
  train_cfg.split = Split::train;
  auto dev_cfg = cfg;
  dev_cfg.split = Split::dev;
  const auto train = load_dataset(train_cfg, catalog);
  const auto dev = load_dataset(dev_cfg, catalog);

  LlmClient client(client_options(cfg));
  InputPipeline pipeline(cfg, task, catalog, client, make_tokenizer(cfg.tokenizer));
  auto settings = prediction_settings(cfg);
  const auto result = optimize(task, train.records, dev.records, budget, client, settings, pipeline.as_builder());
  for (const auto& w : result.warnings) std::cerr << "warning: " << w << "\n";

  const std::filesystem::path dir(out_dir);
  write_file_atomic(dir / "trace.jsonl", trace_to_jsonl(result.result.trace));
  ordered_json best;
  best["text"] = result.result.best.text;
  best["strategy"] = to_string(result.result.best.strategy);
  best["candidate_hash"] = result.result.best.hash();
  best["metric"] = to_string(budget.metric);
  best["value"] = result.result.best.scores.back().value;
  best["calls_used"] = result.result.calls_used;
  write_file_atomic(dir / "best.json", best.dump(2) + "\n");
  ordered_json cands = json::array();
  for (const auto& c : result.result.candidates) {
    ordered_json j;
    j["candidate_hash"] = c.hash();
    j["strategy"] = to_string(c.strategy);
    j["status"] = to_string(c.status);
    j["text"] = c.text;
    j["scores"] = json::array();
    for (const auto& s : c.scores) j["scores"].push_back({{"subset", s.subset_id}, {"value", s.value}});
    cands.push_back(j);
  }
  write_file_atomic(dir / "candidates.json", cands.dump(2) + "\n");
  ordered_json lock;
  lock["budget"] = budget.to_json();
  lock["config_hash"] = cfg.hash();
  lock["config"] = cfg.to_json();
  write_file_atomic(dir / "config.lock.json", lock.dump(2) + "\n");
  std::cout << best.dump(2) << "\n";
  return 0;
}

int cmd_run(const std::string& config_path, const std::string& out_dir, const std::vector<std::string>& ablate) {
  auto cfg = RunConfig::load(config_path);
  if (!out_dir.empty()) cfg.output_dir = out_dir;
  if (!ablate.empty()) {
    const auto catalog = load_catalog(cfg);
    for (const auto& f : ablate) cfg = ablate_feature(cfg, f, catalog);
  }
  const auto report = run_experiment(cfg);
  for (const auto& w : report.warnings) std::cerr << "warning: " << w << "\n";
  std::cout << render_report_table({report.median});
  for (const auto& a : report.artifacts) std::cout << "wrote " << a.string() << "\n";
  return 0;
}

MetricsReport median_from_json(const json& j) {
  MetricsReport r;
  r.task = j.at("task").get<std::string>();
  r.n = j.at("n").get<std::size_t>();
  auto opt = [&j](const char* k) -> std::optional<double> {
    if (!j.contains(k) || j.at(k).is_null()) return std::nullopt;
    return j.at(k).get<double>();
  };
  r.macro_f1 = opt("macro_f1");
  r.micro_f1 = opt("micro_f1");
  r.auroc = opt("auroc");
  r.auprc = opt("auprc");
  r.unparsed_rate = j.value("unparsed_rate", 0.0);
  return r;
}

int cmd_report(const std::vector<std::string>& runs) {
  std::vector<MetricsReport> medians;
  for (const auto& run : runs) {
    const auto j = json::parse(read_file(std::filesystem::path(run) / "report.json"));
    medians.push_back(median_from_json(j.at("median")));
  }
  std::cout << render_report_table(medians);
  return 0;
}

int cmd_time(const std::string& config_path, std::size_t n, const std::string& out) {
  const auto cfg = RunConfig::load(config_path);
  const auto opts = client_options(cfg);
  auto transport = std::make_shared<HttpTransport>(opts.base_url, opts.api_key, opts.timeout);
  const auto r = time_inference(n, cfg, transport);
  emit(out, r.to_json().dump(2) + "\n");
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Clinical record to LLM prompt pipeline and evaluation harness"};
  app.require_subcommand(1);

  DataOptions ingest_opts;
  std::string ingest_out;
  auto* ingest = app.add_subcommand("ingest", "Parse, convert and clamp records; report rejected lines");
  ingest_opts.add_to(ingest);
  ingest->add_option("--out", ingest_out, "Write canonicalized records here");

  DataOptions agg_opts;
  std::string agg_out;
  auto* aggregate = app.add_subcommand("aggregate", "Bucket means per feature as JSONL");
  agg_opts.add_to(aggregate);
  aggregate->add_option("--out", agg_out);

  DataOptions render_opts;
  std::string render_id;
  std::string render_out;
  auto* render = app.add_subcommand("render", "Numeric time-series block per record");
  render_opts.add_to(render);
  render->add_option("--id", render_id, "Render only this record, without a header");
  render->add_option("--out", render_out);

  DataOptions describe_opts;
  std::string describe_out;
  auto* describe = app.add_subcommand("describe", "Generate time-series descriptions through the endpoint");
  describe_opts.add_to(describe);
  describe->add_option("--out", describe_out);

  std::string opt_task;
  std::string opt_budget;
  std::string opt_config;
  std::string opt_out = "optimize_out";
  auto* optimize_cmd = app.add_subcommand("optimize", "Search task instructions on the dev split");
  optimize_cmd->add_option("--task", opt_task)->required();
  optimize_cmd->add_option("--budget", opt_budget, "Budget JSON")->required();
  optimize_cmd->add_option("--config", opt_config, "Run config for data and endpoint")->required();
  optimize_cmd->add_option("--out", opt_out, "Output directory");

  std::string run_config;
  std::string run_out;
  std::vector<std::string> run_ablate;
  auto* run = app.add_subcommand("run", "Evaluate a run config");
  run->add_option("--config", run_config)->required();
  run->add_option("--out", run_out, "Run directory (overrides output_dir)");
  run->add_option("--ablate", run_ablate, "Feature ids to exclude");

  auto* catalog_cmd = app.add_subcommand("catalog", "Print the built-in feature catalog as JSON");

  std::vector<std::string> report_runs;
  auto* report = app.add_subcommand("report", "Table of median metrics from run directories");
  report->add_option("runs", report_runs)->required();

  std::string time_config;
  std::size_t time_n = 100;
  std::string time_out;
  auto* time_cmd = app.add_subcommand("time", "Time sequential inference calls");
  time_cmd->add_option("--config", time_config)->required();
  time_cmd->add_option("--n", time_n, "Number of calls");
  time_cmd->add_option("--out", time_out);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*ingest) return cmd_ingest(ingest_opts, ingest_out);
    if (*aggregate) return cmd_aggregate(agg_opts, agg_out);
    if (*render) return cmd_render(render_opts, render_id, render_out);
    if (*describe) return cmd_describe(describe_opts, describe_out);
    if (*optimize_cmd) return cmd_optimize(opt_task, opt_budget, opt_config, opt_out);
    if (*run) return cmd_run(run_config, run_out, run_ablate);
    if (*report) return cmd_report(report_runs);
    if (*catalog_cmd) {
      std::cout << default_catalog().to_json().dump(2) << "\n";
      return 0;
    }
    if (*time_cmd) return cmd_time(time_config, time_n, time_out);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
