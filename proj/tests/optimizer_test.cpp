#include <gtest/gtest.h>

#include <random>

#include "ehrprompt/optimizer.hpp"
#include "score_table_stub.hpp"
#include "test_support.hpp"

using namespace ehrprompt;
using namespace ehrprompt::testing;

namespace {

const TaskSpec& nli() { return task_spec("mednli"); }

std::vector<PatientRecord> balanced_nli(std::size_t per_class) {
  std::vector<PatientRecord> out;
  for (const auto& l : nli().schema.labels) {
    for (std::size_t i = 0; i < per_class; ++i) {
      PatientRecord r;
      r.id = l + std::to_string(i);
      r.note = "premise " + r.id;
      r.text_b = "hyp";
      r.label = l;
      out.push_back(r);
    }
  }
  return out;
}

// Stub that answers each record's gold label, looked up by record id in the prompt.
stub::Responder gold_oracle(const std::vector<PatientRecord>& recs) {
  std::vector<std::pair<std::string, std::string>> table;
  for (const auto& r : recs) table.emplace_back("premise " + r.id + "\n", std::get<std::string>(r.label));
  return [table](const stub::StubRequest& req) -> stub::StubReply {
    for (const auto& [key, label] : table) {
      if (req.last_content().find(key) != std::string::npos) return {label, {}, 200, {}};
    }
    return {"?", {}, 200, {}};
  };
}

InstructionCandidate cand(std::string text) { return {std::move(text), Strategy::plain, {}, CandidateStatus::pending}; }

// Fixed per-candidate values; counts one call per subset record.
RungEvaluator fixed_scores(std::vector<double> v, std::vector<std::size_t>* rungs_seen = nullptr) {
  return [v, rungs_seen](std::size_t i, std::span<const std::size_t> subset, const std::string&) {
    if (rungs_seen) rungs_seen->push_back(i);
    CandidateEvaluation ev;
    ev.value = v.at(i);
    ev.calls = subset.size();
    return ev;
  };
}

}  // namespace

TEST(Propose, DistinctCandidatesPlusSeed) {
  LoopbackClient c2([](const stub::StubRequest& r) -> stub::StubReply {
    if (r.last_content().find("persona") != std::string::npos) {
      return {"You are a physician working in an ICU. Label it.", {}, 200, {}};
    }
    return {"Short: label it.", {}, 200, {}};
  });
  std::vector<PatientRecord> train = balanced_nli(1);
  const auto p = propose_instructions(nli(), train, 2, {Strategy::persona, Strategy::concise}, *c2.client,
                                      GenerationSettings{});
  ASSERT_EQ(p.candidates.size(), 3u);
  EXPECT_EQ(p.candidates[0].strategy, Strategy::seed);
  EXPECT_EQ(p.candidates[0].text, nli().description);
  EXPECT_TRUE(p.warnings.empty());
}

TEST(Propose, ThreeFixedStringsGiveThreePlusSeed) {
  auto counter = std::make_shared<std::atomic<int>>(0);
  LoopbackClient c([counter](const stub::StubRequest&) -> stub::StubReply {
    return {"Fixed proposal " + std::to_string((*counter)++), {}, 200, {}};
  });
  const auto p = propose_instructions(nli(), {}, 3, {Strategy::persona, Strategy::concise}, *c.client,
                                      GenerationSettings{});
  ASSERT_EQ(p.candidates.size(), 4u);
  std::set<std::string> texts;
  for (const auto& x : p.candidates) texts.insert(x.text);
  EXPECT_EQ(texts.size(), 4u);
  EXPECT_EQ(p.candidates[1].strategy, Strategy::persona);
  EXPECT_EQ(p.candidates[2].strategy, Strategy::concise);
  EXPECT_EQ(p.candidates[3].strategy, Strategy::persona);
}

TEST(Propose, IdenticalRepliesDeduplicatedWithWarning) {
  LoopbackClient c(stub::canned("  \"Same thing.\"  "));
  const auto p = propose_instructions(nli(), {}, 3, {Strategy::plain}, *c.client, GenerationSettings{});
  ASSERT_EQ(p.candidates.size(), 2u);
  EXPECT_EQ(p.candidates[1].text, "Same thing.");
  EXPECT_EQ(p.warnings.size(), 1u);
}

TEST(MetaPrompt, PersonaExemplar) {
  const auto m = meta_prompt(Strategy::persona, "desc", "ex", 0);
  EXPECT_NE(m.find("You are a physician working in an ICU."), std::string::npos);
  EXPECT_NE(m.find("desc"), std::string::npos);
  EXPECT_EQ(m.find("{{"), std::string::npos);
  for (auto s : {Strategy::concise, Strategy::plain}) EXPECT_EQ(meta_prompt(s, "d", "", 2).find("{{"), std::string::npos);
}

TEST(EvaluateCandidate, GoldStubScoresOne) {
  const auto dev = balanced_nli(3);
  LoopbackClient c(gold_oracle(dev));
  auto x = cand("Do it.");
  const auto ev = evaluate_candidate(x, dev, "s", nli(), MetricId::micro_f1, *c.client, GenerationSettings{},
                                     text_input_builder(nli()));
  EXPECT_DOUBLE_EQ(ev.value, 1.0);
  EXPECT_EQ(ev.calls, 9u);
  ASSERT_EQ(x.scores.size(), 1u);
  EXPECT_EQ(x.scores[0].subset_id, "s");
}

TEST(EvaluateCandidate, FixedWrongLabelOnBalancedThreeClass) {
  const auto dev = balanced_nli(4);
  LoopbackClient c(stub::canned("Neutral"));
  auto x = cand("Do it.");
  const auto ev = evaluate_candidate(x, dev, "s", nli(), MetricId::micro_f1, *c.client, GenerationSettings{},
                                     text_input_builder(nli()));
  EXPECT_NEAR(ev.value, 1.0 / 3.0, 1e-12);
}

TEST(EvaluateCandidate, EmptySubsetAndWrongMetric) {
  LoopbackClient c(stub::canned("Neutral"));
  auto x = cand("Do it.");
  EXPECT_THROW(evaluate_candidate(x, {}, "s", nli(), MetricId::micro_f1, *c.client, GenerationSettings{},
                                  text_input_builder(nli())),
               std::invalid_argument);
  const auto dev = balanced_nli(1);
  EXPECT_THROW(evaluate_candidate(x, dev, "s", nli(), MetricId::auroc, *c.client, GenerationSettings{},
                                  text_input_builder(nli())),
               std::invalid_argument);
}

TEST(EvaluateCandidate, EndpointFailuresBecomeFallbacks) {
  const auto dev = balanced_nli(2);
  LoopbackClient c([](const stub::StubRequest&) { return stub::StubReply::error(500, "down"); });
  auto x = cand("Do it.");
  const auto ev = evaluate_candidate(x, dev, "s", nli(), MetricId::micro_f1, *c.client, GenerationSettings{},
                                     text_input_builder(nli()));
  EXPECT_EQ(ev.failed_records, 6u);
  EXPECT_NEAR(ev.value, 1.0 / 3.0, 1e-12);  // fallback Neutral is right for a third
}

TEST(SuccessiveHalving, SelectsFinalRungArgmax) {
  OptimizationBudget b;
  b.rung_sizes = {4, 8};
  std::vector<std::size_t> seen;
  const auto r = successive_halving({cand("a"), cand("b"), cand("c"), cand("d")}, 8, b,
                                    fixed_scores({0.2, 0.9, 0.5, 0.7}, &seen));
  EXPECT_EQ(r.best.text, "b");
  EXPECT_EQ(r.last_rung_reached, 1u);
  EXPECT_EQ(r.calls_used, 4u * 4 + 2u * 8);
  // rung 1 only sees the top half
  EXPECT_EQ(std::vector<std::size_t>(seen.begin() + 4, seen.end()), (std::vector<std::size_t>{1, 3}));
  for (const auto& c : r.candidates) {
    if (c.text == "a" || c.text == "c") {
      EXPECT_EQ(c.status, CandidateStatus::pruned);
      EXPECT_EQ(c.scores.size(), 1u);
    } else {
      EXPECT_EQ(c.status, CandidateStatus::complete);
      EXPECT_EQ(c.scores.size(), 2u);
    }
  }
}

TEST(SuccessiveHalving, SingleCandidate) {
  OptimizationBudget b;
  b.rung_sizes = {2, 4};
  const auto r = successive_halving({cand("only")}, 4, b, fixed_scores({0.3}));
  EXPECT_EQ(r.best.text, "only");
  EXPECT_EQ(r.best.scores.size(), 2u);
  EXPECT_EQ(r.last_rung_reached, 1u);
}

TEST(SuccessiveHalving, TieGoesToSmallerText) {
  OptimizationBudget b;
  b.rung_sizes = {2};
  const auto r = successive_halving({cand("zeta"), cand("alpha")}, 2, b, fixed_scores({0.5, 0.5}));
  EXPECT_EQ(r.best.text, "alpha");
}

TEST(SuccessiveHalving, CapStopsAndNeverOverspends) {
  OptimizationBudget b;
  b.rung_sizes = {4, 8};
  b.eval_calls_max = 4 * 4 + 8;  // room for one rung-1 evaluation
  const auto r = successive_halving({cand("a"), cand("b"), cand("c"), cand("d")}, 8, b,
                                    fixed_scores({0.2, 0.9, 0.5, 0.7}));
  EXPECT_TRUE(r.stopped_by_cap);
  EXPECT_LE(r.calls_used, b.eval_calls_max);
  EXPECT_EQ(r.best.text, "b");
  b.eval_calls_max = 10;
  EXPECT_THROW(successive_halving({cand("a"), cand("b"), cand("c")}, 8, b, fixed_scores({0, 0, 0})),
               OptimizationError);
}

TEST(Budget, Validation) {
  OptimizationBudget b;
  b.rung_sizes = {8, 4};
  EXPECT_THROW(b.validate(100), std::invalid_argument);
  b.rung_sizes = {8, 16};
  EXPECT_THROW(b.validate(10), std::invalid_argument);
  EXPECT_NO_THROW(b.validate(16));
  const auto again = OptimizationBudget::from_json(b.to_json());
  EXPECT_EQ(again.to_json(), b.to_json());
}

TEST(Optimize, MatchesExhaustiveOracleAndIsReproducible) {
  ScoreTable t{{1, 3, 2, 4, 4}, 4, 16, 5};
  const auto dev = score_table_dev(t.dev_size);
  const auto budget = score_table_budget(t, {4, 8, 16}, 1000);
  std::string first_trace;
  for (int run = 0; run < 2; ++run) {
    LoopbackClient c(score_table_responder(t));
    const auto out = optimize(nli(), {}, dev, budget, *c.client, GenerationSettings{}, text_input_builder(nli()));
    // k = 4 ties between CAND-3 and CAND-4; the smaller text wins
    EXPECT_EQ(out.result.best.text, candidate_text(3));
    EXPECT_DOUBLE_EQ(out.result.best.scores.back().value, 1.0);
    EXPECT_LE(c.endpoint->hits(), budget.eval_calls_max);
    const auto trace = trace_to_jsonl(out.result.trace);
    if (run == 0) first_trace = trace;
    EXPECT_EQ(trace, first_trace);
  }
}

TEST(Optimize, WrongMetricForTask) {
  LoopbackClient c(stub::canned("x"));
  OptimizationBudget b;
  b.metric = MetricId::auroc;
  b.rung_sizes = {2};
  const auto dev = balanced_nli(1);
  EXPECT_THROW(optimize(nli(), {}, dev, b, *c.client, GenerationSettings{}, text_input_builder(nli())),
               std::invalid_argument);
}

TEST(Optimize, RefusesBeforeProposingWhenCapIsTooSmall) {
  ScoreTable t{{1, 3, 2, 4, 4}, 4, 16, 5};
  const auto dev = score_table_dev(t.dev_size);
  // 4 proposals + 5 candidates x 4 records = 24 calls needed for rung 0
  for (std::size_t cap : {0u, 3u, 23u}) {
    LoopbackClient c(score_table_responder(t));
    EXPECT_THROW(optimize(nli(), {}, dev, score_table_budget(t, {4, 8}, cap), *c.client, GenerationSettings{},
                          text_input_builder(nli())),
                 OptimizationError);
    EXPECT_EQ(c.endpoint->hits(), 0u) << cap;
  }
  LoopbackClient c(score_table_responder(t));
  EXPECT_NO_THROW(optimize(nli(), {}, dev, score_table_budget(t, {4, 8}, 24), *c.client, GenerationSettings{},
                           text_input_builder(nli())));
  EXPECT_LE(c.endpoint->hits(), 24u);
}
