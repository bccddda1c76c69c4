#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ehrprompt/llm_client.hpp"
#include "ehrprompt/records.hpp"
#include "ehrprompt/tasks.hpp"

namespace ehrprompt {

enum class Strategy { persona, concise, plain, seed };

Strategy parse_strategy(const std::string& s);
std::string to_string(Strategy s);

enum class CandidateStatus { pending, pruned, complete };

std::string to_string(CandidateStatus s);

struct SubsetScore {
  std::string subset_id;
  double value = 0.0;
};

struct InstructionCandidate {
  std::string text;
  Strategy strategy = Strategy::plain;
  std::vector<SubsetScore> scores;  // append-only
  CandidateStatus status = CandidateStatus::pending;

  std::string hash() const;  // 16 hex chars of the text's SHA-256
};

struct OptimizationBudget {
  std::size_t n_candidates = 4;
  std::size_t eval_calls_max = 1000;
  std::vector<std::size_t> rung_sizes{8, 16};
  MetricId metric = MetricId::micro_f1;
  std::vector<Strategy> strategies{Strategy::persona, Strategy::concise, Strategy::plain};
  std::uint64_t seed = 0;
  std::size_t train_examples = 3;
  double proposal_temperature = 0.7;

  // Throws std::invalid_argument; `dev_size` bounds the last rung.
  void validate(std::size_t dev_size) const;

  nlohmann::json to_json() const;
  static OptimizationBudget from_json(const nlohmann::json& j);
};

class OptimizationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Meta-prompt for one proposal call, built from the strategy's template asset.
std::string meta_prompt(Strategy strategy, const std::string& task_description, const std::string& examples,
                        std::size_t variant);

std::string format_train_examples(const TaskSpec& task, std::span<const PatientRecord> examples);

struct ProposalResult {
  std::vector<InstructionCandidate> candidates;  // seed first
  std::vector<std::string> warnings;
};

// n proposal calls cycling through `strategies`; duplicates are dropped.
ProposalResult propose_instructions(const TaskSpec& task, std::span<const PatientRecord> train_examples,
                                    std::size_t n, const std::vector<Strategy>& strategies, LlmClient& client,
                                    const GenerationSettings& settings);

using InputBuilder = std::function<ModelInput(const std::string& instruction, const PatientRecord& rec)>;

// Plain text input: instruction, task text, query.
InputBuilder text_input_builder(const TaskSpec& task);

struct CandidateEvaluation {
  double value = 0.0;
  bool undefined = false;  // metric undefined on the subset; value is 0
  std::size_t calls = 0;
  std::size_t failed_records = 0;
};

// Runs the candidate over `subset` and appends (subset_id, value) to its scores.
// Records whose request fails count as fallback predictions.
CandidateEvaluation evaluate_candidate(InstructionCandidate& cand, std::span<const PatientRecord> subset,
                                       const std::string& subset_id, const TaskSpec& task, MetricId metric,
                                       LlmClient& client, const GenerationSettings& settings,
                                       const InputBuilder& builder);

struct TraceEntry {
  std::string candidate_hash;
  Strategy strategy = Strategy::plain;
  std::size_t rung = 0;
  std::size_t subset_size = 0;
  MetricId metric = MetricId::micro_f1;
  double value = 0.0;
};

std::string trace_to_jsonl(const std::vector<TraceEntry>& trace);

struct OptimizationResult {
  InstructionCandidate best;
  std::vector<InstructionCandidate> candidates;
  std::vector<TraceEntry> trace;
  std::size_t calls_used = 0;
  std::size_t last_rung_reached = 0;
  bool stopped_by_cap = false;
};

// Scores candidate `index` on the dev records listed in `subset`. Returns the
// metric value and the number of endpoint calls spent.
using RungEvaluator = std::function<CandidateEvaluation(std::size_t index, std::span<const std::size_t> subset,
                                                        const std::string& subset_id)>;

// Successive halving over budget.rung_sizes. Rung r uses the first
// rung_sizes[r] entries of a seeded permutation of the dev set; the top
// ceil(k/2) candidates advance, ties going to the smaller text. A rung
// evaluation only starts if calls_used + rung size stays within
// eval_calls_max; calls_already_used seeds the count.
OptimizationResult successive_halving(std::vector<InstructionCandidate> candidates, std::size_t dev_size,
                                      const OptimizationBudget& budget, const RungEvaluator& evaluate,
                                      std::size_t calls_already_used = 0);

struct OptimizeOutput {
  OptimizationResult result;
  std::vector<std::string> warnings;
};

OptimizeOutput optimize(const TaskSpec& task, std::span<const PatientRecord> train, std::span<const PatientRecord> dev,
                        const OptimizationBudget& budget, LlmClient& client, const GenerationSettings& settings,
                        const InputBuilder& builder);

}  // namespace ehrprompt
