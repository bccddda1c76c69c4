#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <set>

#include "ehrprompt/runner.hpp"
#include "test_support.hpp"

using namespace ehrprompt;
using namespace ehrprompt::testing;
using namespace std::chrono_literals;

namespace {

void write_lines(const std::filesystem::path& p, const std::vector<nlohmann::json>& rows) {
  std::ofstream out(p);
  for (const auto& r : rows) out << r.dump() << "\n";
}

RunConfig base_config(const std::string& task, const std::filesystem::path& data) {
  RunConfig cfg;
  cfg.task = task;
  cfg.data = data.string();
  cfg.repetitions = 3;
  cfg.endpoint.backoff_ms = 1;
  return cfg;
}

LlmClient& client_of(LoopbackClient& c) { return *c.client; }

}  // namespace

TEST(RunConfig, TextOnlyTaskRejectsTimeSeriesModes) {
  RunConfig cfg;
  cfg.task = "mednli";
  cfg.mode = RunMode::text_ts_numeric;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
  cfg.mode = RunMode::text;
  EXPECT_NO_THROW(cfg.validate());
  EXPECT_THROW(RunConfig::from_json({{"task", "smoking"}, {"mode", "ts-only"}}), std::invalid_argument);
}

TEST(RunConfig, JsonRoundTripAndRelativePaths) {
  TempDir dir;
  const auto cfg_path = dir.path / "sub" / "run.json";
  std::filesystem::create_directories(cfg_path.parent_path());
  write_file_atomic(cfg_path, R"({"task":"mortality","mode":"text+ts-numeric","data":"../records.jsonl","seed":4})");
  const auto cfg = RunConfig::load(cfg_path);
  EXPECT_EQ(cfg.data, (dir.path / "records.jsonl").string());
  EXPECT_EQ(cfg.mode, RunMode::text_ts_numeric);
  EXPECT_EQ(cfg.seed, 4u);
  EXPECT_EQ(RunConfig::from_json(cfg.to_json()).hash(), cfg.hash());
}

TEST(RunConfig, HashIgnoresOutputLocationsAndSeparatesEverythingElse) {
  RunConfig a;
  a.data = "x.jsonl";
  auto b = a;
  b.output_dir = "/tmp/elsewhere";
  b.endpoint.cache_dir = "/tmp/cache";
  EXPECT_EQ(a.hash(), b.hash());

  std::vector<RunConfig> corpus;
  for (const auto* task : {"mortality", "smoking", "mednli", "clinsts"}) {
    for (int seed = 0; seed < 3; ++seed) {
      for (int reps : {1, 3}) {
        RunConfig c;
        c.task = task;
        c.seed = static_cast<std::uint64_t>(seed);
        c.repetitions = reps;
        c.data = "d.jsonl";
        corpus.push_back(c);
      }
    }
  }
  for (auto mode : {RunMode::text_ts_numeric, RunMode::text_ts_description, RunMode::ts_only}) {
    RunConfig c;
    c.mode = mode;
    corpus.push_back(c);
  }
  for (int buckets : {1, 6, 48}) {
    RunConfig c;
    c.aggregation.bucket_count = buckets;
    corpus.push_back(c);
  }
  for (const auto& f : default_catalog().features()) corpus.push_back(ablate_feature(RunConfig{}, f.id, default_catalog()));
  RunConfig t;
  t.endpoint.temperature = 0.3;
  corpus.push_back(t);
  RunConfig m;
  m.max_context = 512;
  corpus.push_back(m);
  RunConfig ins;
  ins.instruction = "Decide.";
  corpus.push_back(ins);

  std::set<std::string> hashes;
  for (const auto& c : corpus) hashes.insert(c.hash());
  EXPECT_EQ(hashes.size(), corpus.size());
}

TEST(AblateFeature, ExcludesAndChangesHash) {
  RunConfig cfg;
  const auto a = ablate_feature(cfg, "glasgow_coma_scale_total", default_catalog());
  EXPECT_TRUE(a.aggregation.excluded_features.count("glasgow_coma_scale_total"));
  EXPECT_NE(a.hash(), cfg.hash());
  const auto agg = aggregate_record(reference_record(), default_catalog(), a.aggregation);
  EXPECT_EQ(render_numeric_block(agg.series, default_catalog()).line_count, 12u);
  EXPECT_THROW(ablate_feature(cfg, "spleen_size", default_catalog()), std::invalid_argument);
}

TEST(ClinSts, Binarize) {
  EXPECT_EQ(binarize_clinsts(3.2), "similar");
  EXPECT_EQ(binarize_clinsts(3.0), "dissimilar");
  EXPECT_EQ(binarize_clinsts(0.0), "dissimilar");
  EXPECT_EQ(binarize_clinsts(5.0), "similar");
  EXPECT_EQ(binarize_clinsts(std::nextafter(3.0, 4.0)), "similar");
  EXPECT_THROW(binarize_clinsts(5.1), std::out_of_range);
  EXPECT_THROW(binarize_clinsts(-0.1), std::out_of_range);
  EXPECT_THROW(binarize_clinsts(std::nan("")), std::out_of_range);
}

TEST(RunExperiment, MednliAlwaysGoldIsPerfect) {
  TempDir dir;
  const std::vector<std::string> labels{"Entailment", "Contradiction", "Neutral"};
  std::vector<nlohmann::json> rows;
  for (int i = 0; i < 6; ++i) {
    rows.push_back({{"id", "n" + std::to_string(i)},
                    {"note", "premise"},
                    {"text_b", "hyp-" + labels[i % 3]},
                    {"label", labels[i % 3]},
                    {"split", "test"}});
  }
  write_lines(dir.path / "nli.jsonl", rows);
  LoopbackClient c([labels](const stub::StubRequest& r) -> stub::StubReply {
    for (const auto& l : labels) {
      if (r.last_content().find("hyp-" + l) != std::string::npos) return {l, {}, 200, {}};
    }
    return {"?", {}, 200, {}};
  });
  const auto rep = run_experiment(base_config("mednli", dir.path / "nli.jsonl"), client_of(c));
  ASSERT_EQ(rep.repetitions.size(), 3u);
  for (const auto& r : rep.repetitions) EXPECT_DOUBLE_EQ(*r.micro_f1, 1.0);
  EXPECT_DOUBLE_EQ(*rep.median.micro_f1, 1.0);
  EXPECT_EQ(rep.predictions.size(), 18u);
}

TEST(RunExperiment, MortalityScriptedScoresMatchPairwiseOracle) {
  TempDir dir;
  // per-record (p_yes, p_no) logprob pairs and gold flags
  const std::vector<std::pair<double, double>> lp{{-0.1, -2.4}, {-1.2, -0.4}, {-0.7, -0.7}, {-2.0, -0.2},
                                                  {-0.3, -1.5}, {-0.7, -0.7}, {-3.0, -0.05}, {-0.5, -0.9}};
  const std::vector<int> gold{1, 0, 1, 0, 1, 0, 0, 1};
  std::vector<nlohmann::json> rows;
  for (std::size_t i = 0; i < gold.size(); ++i) {
    rows.push_back({{"id", "m" + std::to_string(i)},
                    {"note", "case-" + std::to_string(i) + "-end"},
                    {"label", std::to_string(gold[i])},
                    {"split", "test"}});
  }
  write_lines(dir.path / "mort.jsonl", rows);
  LoopbackClient c([lp](const stub::StubRequest& r) -> stub::StubReply {
    for (std::size_t i = 0; i < lp.size(); ++i) {
      if (r.last_content().find("case-" + std::to_string(i) + "-end") != std::string::npos) {
        return {"yes", {{"yes", lp[i].first}, {"no", lp[i].second}}, 200, {}};
      }
    }
    return {"?", {}, 200, {}};
  });
  auto cfg = base_config("mortality", dir.path / "mort.jsonl");
  cfg.repetitions = 1;
  const auto rep = run_experiment(cfg, client_of(c));

  std::vector<double> p(lp.size());
  for (std::size_t i = 0; i < lp.size(); ++i) {
    p[i] = std::exp(lp[i].first) / (std::exp(lp[i].first) + std::exp(lp[i].second));
  }
  double wins = 0, pairs = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    for (std::size_t j = 0; j < p.size(); ++j) {
      if (gold[i] == 1 && gold[j] == 0) {
        pairs += 1;
        wins += p[i] > p[j] ? 1.0 : (p[i] == p[j] ? 0.5 : 0.0);
      }
    }
  }
  EXPECT_NEAR(*rep.median.auroc, wins / pairs, 1e-12);
  for (std::size_t i = 0; i < rep.predictions.size(); ++i) {
    EXPECT_NEAR(*rep.predictions[i].prediction.score, p[i], 1e-12);
  }
}

TEST(RunExperiment, DeterministicArtifacts) {
  TempDir dir;
  const auto script = nlohmann::json::parse(read_file(fixture("stub_script.json")));
  auto run = [&](const std::string& out) {
    LoopbackClient c(stub::load_script(script), quick_options(4));
    auto cfg = base_config("mortality", fixture("mortality.jsonl"));
    cfg.mode = RunMode::text_ts_description;
    cfg.output_dir = (dir.path / out).string();
    run_experiment(cfg, client_of(c));
    return std::make_pair(read_file(dir.path / out / "report.json"), read_file(dir.path / out / "predictions.jsonl"));
  };
  const auto a = run("a");
  const auto b = run("b");
  EXPECT_EQ(a.first, b.first);
  EXPECT_EQ(a.second, b.second);
  for (const auto* f : {"trace.jsonl", "timing.json", "config.lock.json"}) {
    EXPECT_TRUE(std::filesystem::exists(dir.path / "a" / f)) << f;
  }
}

TEST(RunExperiment, EveryPredictionCarriesItsRecordId) {
  const auto script = nlohmann::json::parse(read_file(fixture("stub_script.json")));
  LoopbackClient c(stub::load_script(script));
  auto cfg = base_config("smoking", fixture("smoking.jsonl"));
  cfg.max_records = 7;
  const auto rep = run_experiment(cfg, client_of(c));
  const auto ds = load_dataset(cfg, default_catalog());
  std::set<std::string> ids;
  for (const auto& r : ds.records) ids.insert(r.id);
  ASSERT_EQ(rep.predictions.size(), 3u * 7u);
  for (int r = 0; r < 3; ++r) {
    std::set<std::string> seen;
    for (const auto& row : rep.predictions) {
      if (row.rep != r) continue;
      EXPECT_TRUE(ids.count(row.prediction.record_id));
      seen.insert(row.prediction.record_id);
    }
    EXPECT_EQ(seen.size(), 7u);
    EXPECT_EQ(rep.repetitions[static_cast<std::size_t>(r)].n, 7u);
  }
}

TEST(RunExperiment, EndpointExhaustionNamesRecord) {
  LoopbackClient c([](const stub::StubRequest&) { return stub::StubReply::error(503, "overloaded"); });
  auto cfg = base_config("smoking", fixture("smoking.jsonl"));
  cfg.endpoint.max_retries = 1;
  try {
    run_experiment(cfg, client_of(c));
    FAIL() << "expected LlmError";
  } catch (const LlmError& e) {
    EXPECT_NE(std::string(e.what()).find("record 'smk-"), std::string::npos) << e.what();
  }
}

TEST(RunExperiment, MissingDataAndEmptySplit) {
  LoopbackClient c(stub::canned("x"));
  RunConfig cfg;
  cfg.task = "smoking";
  EXPECT_THROW(run_experiment(cfg, client_of(c)), std::invalid_argument);
  cfg.data = "/nonexistent.jsonl";
  EXPECT_THROW(run_experiment(cfg, client_of(c)), std::runtime_error);
}

TEST(InputPipeline, TimeSeriesSurvivesTruncation) {
  LoopbackClient c(stub::canned("no"));
  RunConfig cfg;
  cfg.task = "mortality";
  cfg.mode = RunMode::text_ts_numeric;
  cfg.max_context = 150;
  const auto& task = task_spec("mortality");
  auto rec = reference_record();
  for (int i = 0; i < 300; ++i) rec.note += " filler";
  InputPipeline pipe(cfg, task, default_catalog(), client_of(c), make_tokenizer("whitespace"));
  const auto built = pipe.build(task.description, rec);
  const auto text = built.input.text();
  EXPECT_NE(text.find(golden("fig1_numeric_block.txt")), std::string::npos);
  EXPECT_TRUE(built.trace.truncation.truncated);
  WhitespaceTokenizer tok;
  EXPECT_LE(count_tokens(text, tok), cfg.max_context);
  EXPECT_EQ(built.trace.truncation.kept_tokens + built.trace.reserved_tokens, cfg.max_context);
}

TEST(InputPipeline, TsOnlyDropsNote) {
  LoopbackClient c(stub::canned("no"));
  RunConfig cfg;
  cfg.mode = RunMode::ts_only;
  const auto& task = task_spec("mortality");
  InputPipeline pipe(cfg, task, default_catalog(), client_of(c), make_tokenizer("whitespace"));
  const auto built = pipe.build("I", reference_record());
  EXPECT_EQ(built.input.note, "");
  EXPECT_EQ(built.input.ts.payload, golden("fig1_numeric_block.txt"));
}

TEST(ResolveInstruction, Sources) {
  TempDir dir;
  RunConfig cfg;
  const auto& task = task_spec("smoking");
  EXPECT_EQ(resolve_instruction(cfg, task), task.description);
  cfg.instruction = "Fixed.";
  EXPECT_EQ(resolve_instruction(cfg, task), "Fixed.");
  cfg.instruction.clear();
  write_file_atomic(dir.path / "best.json", R"({"text":"From optimizer."})");
  cfg.instruction_from = (dir.path / "best.json").string();
  EXPECT_EQ(resolve_instruction(cfg, task), "From optimizer.");
}

TEST(TimeInference, LatencyLowerBoundAndNormalization) {
  auto ep = std::make_shared<stub::StubEndpoint>(stub::canned("no"));
  ep->set_latency(10ms);
  auto transport = std::make_shared<stub::LoopbackTransport>(ep);
  auto cfg = base_config("smoking", fixture("smoking.jsonl"));
  const auto r = time_inference(100, cfg, transport);
  EXPECT_EQ(ep->hits(), 100u);  // uncached, even though records repeat
  EXPECT_GE(r.total_s, 1.0);
  EXPECT_LT(r.total_s, 1.0 + 1.0);
  EXPECT_DOUBLE_EQ(r.per_100_s, r.total_s);
  EXPECT_EQ(r.to_json()["energy_j"], "unavailable");

  ep->set_latency(0ms);
  const auto half = time_inference(50, cfg, transport);
  EXPECT_DOUBLE_EQ(half.per_100_s, 2.0 * half.total_s);
  EXPECT_THROW(time_inference(0, cfg, transport), std::invalid_argument);
}

TEST(TimeInference, EnergyMeterHook) {
  TempDir dir;
  const auto counter = (dir.path / "joules").string();
  auto cfg = base_config("smoking", fixture("smoking.jsonl"));
  cfg.energy_meter_command = "n=$(cat " + counter + " 2>/dev/null || echo 0); n=$((n+7)); echo $n > " + counter +
                             "; echo $n";
  auto ep = std::make_shared<stub::StubEndpoint>(stub::canned("no"));
  const auto r = time_inference(5, cfg, std::make_shared<stub::LoopbackTransport>(ep));
  ASSERT_TRUE(r.energy_j.has_value());
  EXPECT_DOUBLE_EQ(*r.energy_j, 7.0);
  EXPECT_THROW(read_energy_meter("echo not-a-number"), std::runtime_error);
}
