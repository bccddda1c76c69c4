#include "ehrprompt/optimizer.hpp"

#include <algorithm>
#include <numeric>
#include <set>

#include "ehrprompt/util.hpp"

namespace ehrprompt {

Strategy parse_strategy(const std::string& s) {
  if (s == "persona") return Strategy::persona;
  if (s == "concise") return Strategy::concise;
  if (s == "plain") return Strategy::plain;
  if (s == "seed") return Strategy::seed;
  throw std::invalid_argument("unknown strategy '" + s + "'");
}

std::string to_string(Strategy s) {
  switch (s) {
    case Strategy::persona: return "persona";
    case Strategy::concise: return "concise";
    case Strategy::plain: return "plain";
    case Strategy::seed: return "seed";
  }
  return "plain";
}

std::string to_string(CandidateStatus s) {
  switch (s) {
    case CandidateStatus::pending: return "pending";
    case CandidateStatus::pruned: return "pruned";
    case CandidateStatus::complete: return "complete";
  }
  return "pending";
}

std::string InstructionCandidate::hash() const { return sha256_hex(text).substr(0, 16); }

void OptimizationBudget::validate(std::size_t dev_size) const {
  if (n_candidates < 1) throw std::invalid_argument("budget: n_candidates must be >= 1");
  if (rung_sizes.empty()) throw std::invalid_argument("budget: rung_sizes must be nonempty");
  if (rung_sizes.front() < 1) throw std::invalid_argument("budget: rung sizes must be positive");
  for (std::size_t i = 1; i < rung_sizes.size(); ++i) {
    if (rung_sizes[i] <= rung_sizes[i - 1]) throw std::invalid_argument("budget: rung_sizes must increase strictly");
  }
  if (rung_sizes.back() > dev_size) {
    throw std::invalid_argument("budget: last rung (" + std::to_string(rung_sizes.back()) +
                                ") exceeds the dev set size (" + std::to_string(dev_size) + ")");
  }
  if (strategies.empty()) throw std::invalid_argument("budget: at least one strategy is required");
}

nlohmann::json OptimizationBudget::to_json() const {
  std::vector<std::string> strat;
  for (auto s : strategies) strat.push_back(to_string(s));
  return {{"n_candidates", n_candidates},
          {"eval_calls_max", eval_calls_max},
          {"rung_sizes", rung_sizes},
          {"metric", to_string(metric)},
          {"strategies", strat},
          {"seed", seed},
          {"train_examples", train_examples},
          {"proposal_temperature", proposal_temperature}};
}

OptimizationBudget OptimizationBudget::from_json(const nlohmann::json& j) {
  OptimizationBudget b;
  b.n_candidates = j.value("n_candidates", b.n_candidates);
  b.eval_calls_max = j.value("eval_calls_max", b.eval_calls_max);
  if (j.contains("rung_sizes")) b.rung_sizes = j.at("rung_sizes").get<std::vector<std::size_t>>();
  if (j.contains("metric")) b.metric = parse_metric(j.at("metric").get<std::string>());
  if (j.contains("strategies")) {
    b.strategies.clear();
    for (const auto& s : j.at("strategies")) b.strategies.push_back(parse_strategy(s.get<std::string>()));
  }
  b.seed = j.value("seed", b.seed);
  b.train_examples = j.value("train_examples", b.train_examples);
  b.proposal_temperature = j.value("proposal_temperature", b.proposal_temperature);
  return b;
}

namespace {

std::string template_for(Strategy s) {
  switch (s) {
    case Strategy::persona: return load_asset("templates/meta_persona.v1.txt");
    case Strategy::concise: return load_asset("templates/meta_concise.v1.txt");
    case Strategy::plain: return load_asset("templates/meta_plain.v1.txt");
    case Strategy::seed: break;
  }
  throw std::invalid_argument("the seed strategy has no meta-prompt");
}

void substitute(std::string& text, std::string_view key, const std::string& value) {
  if (replace_all(text, key, value) == 0) {
    throw std::invalid_argument("meta-prompt template is missing placeholder " + std::string(key));
  }
}

// Strips whitespace and one pair of surrounding quotes.
std::string clean_proposal(const std::string& raw) {
  auto t = trim(raw);
  if (t.size() >= 2 && ((t.front() == '"' && t.back() == '"') || (t.front() == '\'' && t.back() == '\''))) {
    t = trim(std::string_view(t).substr(1, t.size() - 2));
  }
  return t;
}

}  // namespace

std::string meta_prompt(Strategy strategy, const std::string& task_description, const std::string& examples,
                        std::size_t variant) {
  auto text = template_for(strategy);
  substitute(text, "{{task_description}}", task_description);
  substitute(text, "{{examples}}", examples.empty() ? std::string("(none)") : examples);
  substitute(text, "{{variant}}", std::to_string(variant + 1));
  return text;
}

std::string format_train_examples(const TaskSpec& task, std::span<const PatientRecord> examples) {
  std::string out;
  for (const auto& rec : examples) {
    if (!out.empty()) out += "\n\n";
    out += "Input: " + task.text_for(rec) + "\nAnswer: ";
    if (task.kind == TaskKind::scored_binary) {
      out += task.gold_flag(rec) == 1 ? task.score_options.positive_token : task.score_options.negative_token;
    } else {
      out += task.gold_label(rec);
    }
  }
  return out;
}

ProposalResult propose_instructions(const TaskSpec& task, std::span<const PatientRecord> train_examples,
                                    std::size_t n, const std::vector<Strategy>& strategies, LlmClient& client,
                                    const GenerationSettings& settings) {
  if (n < 1) throw std::invalid_argument("propose_instructions: n must be >= 1");
  std::vector<Strategy> usable;
  for (auto s : strategies) {
    if (s != Strategy::seed) usable.push_back(s);
  }
  if (usable.empty()) throw std::invalid_argument("propose_instructions: at least one strategy is required");

  ProposalResult out;
  std::set<std::string> seen;
  InstructionCandidate seed{task.description, Strategy::seed, {}, CandidateStatus::pending};
  seen.insert(seed.text);
  out.candidates.push_back(std::move(seed));

  const auto examples = format_train_examples(task, train_examples);
  std::size_t produced = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto strategy = usable[i % usable.size()];
    auto s = settings;
    s.use_logprobs = false;
    if (s.seed) s.seed = *s.seed + i;
    const auto resp = client.complete(s.request_for(meta_prompt(strategy, task.description, examples, i)));
    auto text = clean_proposal(resp.text);
    if (text.empty() || !seen.insert(text).second) continue;
    out.candidates.push_back({std::move(text), strategy, {}, CandidateStatus::pending});
    ++produced;
  }
  if (produced < n) {
    out.warnings.push_back("proposal shortfall: " + std::to_string(produced) + " unique candidate(s) of " +
                           std::to_string(n) + " requested");
  }
  return out;
}

InputBuilder text_input_builder(const TaskSpec& task) {
  return [&task](const std::string& instruction, const PatientRecord& rec) {
    return assemble_input(instruction, task.text_for(rec), TsRepresentation::none(), task.query);
  };
}

CandidateEvaluation evaluate_candidate(InstructionCandidate& cand, std::span<const PatientRecord> subset,
                                       const std::string& subset_id, const TaskSpec& task, MetricId metric,
                                       LlmClient& client, const GenerationSettings& settings,
                                       const InputBuilder& builder) {
  if (subset.empty()) throw std::invalid_argument("evaluate_candidate: subset is empty");
  if (!metric_applies(metric, task)) {
    throw std::invalid_argument("metric " + to_string(metric) + " does not apply to task " + task.id);
  }
  CandidateEvaluation ev;
  std::vector<PredictionRecord> preds;
  preds.reserve(subset.size());
  for (const auto& rec : subset) {
    ++ev.calls;
    try {
      preds.push_back(predict(task, rec, builder(cand.text, rec), client, settings));
    } catch (const LlmError&) {
      ++ev.failed_records;
      preds.push_back(fallback_prediction(task, rec));
    }
  }
  const auto v = metric_value(metric, task, preds);
  ev.undefined = !v.has_value();
  ev.value = v.value_or(0.0);
  cand.scores.push_back({subset_id, ev.value});
  return ev;
}

std::string trace_to_jsonl(const std::vector<TraceEntry>& trace) {
  std::string out;
  for (const auto& t : trace) {
    nlohmann::ordered_json j;
    j["candidate_hash"] = t.candidate_hash;
    j["strategy"] = to_string(t.strategy);
    j["rung"] = t.rung;
    j["subset_size"] = t.subset_size;
    j["metric"] = to_string(t.metric);
    j["value"] = t.value;
    out += j.dump();
    out += '\n';
  }
  return out;
}

namespace {

bool ranks_before(const InstructionCandidate& a, double va, const InstructionCandidate& b, double vb) {
  if (va != vb) return va > vb;
  return a.text < b.text;
}

}  // namespace

OptimizationResult successive_halving(std::vector<InstructionCandidate> candidates, std::size_t dev_size,
                                      const OptimizationBudget& budget, const RungEvaluator& evaluate,
                                      std::size_t calls_already_used) {
  if (candidates.empty()) throw OptimizationError("no instruction candidates to optimize");
  budget.validate(dev_size);

  OptimizationResult res;
  res.calls_used = calls_already_used;
  const auto order = seeded_permutation(dev_size, budget.seed);
  std::vector<std::size_t> survivors(candidates.size());
  std::iota(survivors.begin(), survivors.end(), std::size_t{0});
  // rung_value[i] holds candidate i's score on the highest rung it reached
  std::vector<std::optional<double>> rung_value(candidates.size());
  std::vector<std::size_t> evaluated_on_last;

  for (std::size_t rung = 0; rung < budget.rung_sizes.size(); ++rung) {
    const auto size = budget.rung_sizes[rung];
    const std::span<const std::size_t> subset(order.data(), size);
    const auto subset_id = "rung" + std::to_string(rung) + "-n" + std::to_string(size) + "-seed" +
                           std::to_string(budget.seed);
    std::vector<std::size_t> evaluated;
    for (auto i : survivors) {
      if (res.calls_used + size > budget.eval_calls_max) {
        res.stopped_by_cap = true;
        break;
      }
      const auto ev = evaluate(i, subset, subset_id);
      res.calls_used += ev.calls;
      candidates[i].scores.push_back({subset_id, ev.value});
      rung_value[i] = ev.value;
      evaluated.push_back(i);
      res.trace.push_back({candidates[i].hash(), candidates[i].strategy, rung, size, budget.metric, ev.value});
    }
    if (res.stopped_by_cap && rung == 0 && evaluated.size() < survivors.size()) {
      throw OptimizationError("evaluation budget of " + std::to_string(budget.eval_calls_max) +
                              " calls is exhausted before the first rung completes");
    }
    if (!evaluated.empty()) {
      res.last_rung_reached = rung;
      evaluated_on_last = evaluated;
    }
    if (res.stopped_by_cap) break;

    if (rung + 1 < budget.rung_sizes.size()) {
      std::sort(survivors.begin(), survivors.end(), [&](std::size_t a, std::size_t b) {
        return ranks_before(candidates[a], *rung_value[a], candidates[b], *rung_value[b]);
      });
      const auto keep = (survivors.size() + 1) / 2;
      for (std::size_t k = keep; k < survivors.size(); ++k) candidates[survivors[k]].status = CandidateStatus::pruned;
      survivors.resize(keep);
    }
  }

  std::size_t best = evaluated_on_last.front();
  for (auto i : evaluated_on_last) {
    if (ranks_before(candidates[i], *rung_value[i], candidates[best], *rung_value[best])) best = i;
  }
  for (auto i : evaluated_on_last) candidates[i].status = CandidateStatus::complete;
  res.best = candidates[best];
  res.candidates = std::move(candidates);
  return res;
}

OptimizeOutput optimize(const TaskSpec& task, std::span<const PatientRecord> train, std::span<const PatientRecord> dev,
                        const OptimizationBudget& budget, LlmClient& client, const GenerationSettings& settings,
                        const InputBuilder& builder) {
  budget.validate(dev.size());
  if (!metric_applies(budget.metric, task)) {
    throw std::invalid_argument("metric " + to_string(budget.metric) + " does not apply to task " + task.id);
  }
  // refuse before proposing anything: proposals plus a full first rung must fit under the cap
  // (worst case, every proposal unique)
  const auto first_rung = budget.n_candidates + (budget.n_candidates + 1) * budget.rung_sizes.front();
  if (first_rung > budget.eval_calls_max) {
    throw OptimizationError("evaluation budget of " + std::to_string(budget.eval_calls_max) +
                            " calls cannot cover proposals and the first rung (" + std::to_string(first_rung) + ")");
  }
  auto proposal_settings = settings;
  proposal_settings.temperature = budget.proposal_temperature;
  proposal_settings.seed = budget.seed;
  proposal_settings.max_new_tokens = std::max(settings.max_new_tokens, 256);
  const auto n_examples = std::min(budget.train_examples, train.size());
  auto proposal = propose_instructions(task, train.subspan(0, n_examples), budget.n_candidates, budget.strategies,
                                       client, proposal_settings);

  const auto& cands = proposal.candidates;
  RungEvaluator evaluator = [&](std::size_t index, std::span<const std::size_t> subset, const std::string& id) {
    std::vector<PatientRecord> records;
    records.reserve(subset.size());
    for (auto k : subset) records.push_back(dev[k]);
    auto scratch = cands[index];
    return evaluate_candidate(scratch, records, id, task, budget.metric, client, settings, builder);
  };
  OptimizeOutput out;
  // proposal calls count against the same cap as evaluations
  out.result = successive_halving(proposal.candidates, dev.size(), budget, evaluator, budget.n_candidates);
  out.warnings = std::move(proposal.warnings);
  if (out.result.stopped_by_cap) {
    out.warnings.push_back("evaluation cap reached at rung " + std::to_string(out.result.last_rung_reached) +
                           "; selected among completed evaluations");
  }
  return out;
}

}  // namespace ehrprompt
