#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "ssmax/corpus.hpp"
#include "ssmax/model.hpp"

namespace ssx {

// Mean next-token loss at each context size 1..max_len, averaged over the
// given sequences, with RoPE theta overridden for the evaluation only (the
// model is not mutated). Sequences shorter than max_len + 1 tokens are
// rejected at ingestion.
std::vector<double> per_position_loss(const Model<float>& model,
                                      const std::vector<std::vector<int>>& sequences,
                                      int max_len, double theta_override);

// Held-out sequences drawn from the synthetic corpus distribution.
std::vector<std::vector<int>> gen_eval_sequences(const Corpus& corpus, int count, int len,
                                                 uint64_t seed);

enum class RetrievalOutcome { correct, first_digit_only, incorrect };

RetrievalOutcome grade_answer(const std::string& emitted, const std::string& answer);

const char* outcome_name(RetrievalOutcome o);

struct DecodeResult {
    std::string text;  // emitted bytes (up to the 8-token cap)
    AttentionTrace trace;
};

// Greedy decoding of the answer: prefill the sample's context, then emit the
// most probable non-eos token at each step, capped at 8 tokens. When
// capture_trace is set, the attention rows at the first answer-generation
// step are recorded.
DecodeResult greedy_decode_answer(const Model<float>& model, const NeedleSample& sample,
                                  bool capture_trace = false, int max_tokens = 8);

struct NiahCell {
    int context_size = 0;
    double depth = 0.0;
    double accuracy = 0.0;
};

// Emits the model's (or a stub's) answer text for a sample.
using AnswerFn = std::function<std::string(const NeedleSample&)>;

// Harness over the size x depth grid; cell RNG streams are derived from
// (seed, size, depth, trial), so parallel execution order never changes the
// result. A prediction is correct iff all 7 digits match.
std::vector<NiahCell> niah_grid(const Corpus& corpus, std::span<const int> sizes,
                                std::span<const double> depths, int samples_per_cell,
                                uint64_t seed, const AnswerFn& answer);

std::vector<NiahCell> niah_eval(const Model<float>& model, const Corpus& corpus,
                                std::span<const int> sizes, std::span<const double> depths,
                                int samples_per_cell, double theta_override, uint64_t seed);

struct NeedleScoreEntry {
    int layer = 0;
    int head = 0;
    double score = 0.0;
};

// Sum of the attention mass each (layer, head) row places on the digit span,
// sorted in descending score order. The list has exactly layers * heads
// entries.
std::vector<NeedleScoreEntry> needle_score(const AttentionTrace& trace, int span_begin,
                                           int span_end);

struct TopScoreTrial {
    double top_score = 0.0;
    RetrievalOutcome outcome = RetrievalOutcome::incorrect;
};

// Fixed context size, random city/number/depth per trial; records the
// maximum needle score across all heads at the first answer-generation step
// together with the graded retrieval outcome.
std::vector<TopScoreTrial> top_needle_score_study(const Model<float>& model,
                                                  const Corpus& corpus, int trials,
                                                  int context_size, double theta_override,
                                                  uint64_t seed);

struct PnFit {
    double a1 = 0.0;
    double a2 = 0.0;
    double r2 = 0.0;
};

// Ordinary least squares of p_n against ln n, n = 1..len. r2 is 0 when the
// data carries no variance.
PnFit fit_pn(std::span<const double> pn);
PnFit fit_pn(std::span<const float> pn);

}  // namespace ssx
