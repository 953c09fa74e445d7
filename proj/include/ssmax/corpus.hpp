#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "ssmax/rng.hpp"

namespace ssx {

// Byte-level identity tokenizer: token ids are the bytes 0..255. Token 0 is
// reserved as the eos-equivalent and never appears in generated text; greedy
// decoding excludes it at every step.
inline constexpr int kVocabBytes = 256;
inline constexpr int kEosToken = 0;

struct CorpusConfig {
    uint64_t corpus_seed = 2024;   // shapes the filler chain, not the data order
    double recall_fraction = 0.5;  // share of training sequences carrying a recall task
    double two_needle_fraction = 0.25;  // share of recall sequences with a distractor needle
    // share of training sequences that are pattern repetitions with a random
    // period; position-independent copying only forms with this dense signal
    double periodic_fraction = 0.25;
};

// Synthetic byte corpus: order-1 Markov filler text plus key-value recall
// strings built from a fixed city list, so retrieval is learnable at desk
// scale.
class Corpus {
public:
    explicit Corpus(const CorpusConfig& cfg);

    const CorpusConfig& config() const { return cfg_; }

    static const std::array<const char*, 64>& city_list();

    static std::string make_needle(const std::string& city, const std::string& digits);
    static std::string make_prompt(const std::string& city);

    // 7 random digits, first one nonzero
    static std::string random_digits(Rng& rng);

    void fill_filler(Rng& rng, int* out, int len) const;

    // One training sequence of `len` tokens (callers use len = N + 1 so that
    // inputs/targets are the first/last N). Recall sequences carry one to
    // three needles and end with the matching prompt + answer pairs; filler
    // sequences repeat earlier chunks of themselves, which is what makes
    // copy heads form. NIAH filler stays plain.
    std::vector<int> gen_sequence(Rng& rng, int len) const;

    // Supervised row: answer span in sequence coordinates (the 7 digits plus
    // the closing period of the response).
    struct SftRow {
        std::vector<int> tokens;  // length = seq_len + 1
        int answer_begin = 0;     // [begin, end) into tokens
        int answer_end = 0;
    };
    SftRow gen_sft_row(Rng& rng, int len) const;

private:
    struct RecallParts {
        std::string city;
        std::string digits;
        std::string needle;
        std::string prompt;
    };
    RecallParts draw_recall(Rng& rng) const;
    void write_recall(Rng& rng, int* out, int len, int num_queries, int* answer_begin,
                      int* answer_end) const;
    void repeat_chunks(Rng& rng, int* out, int len) const;
    void fill_periodic(Rng& rng, int* out, int len) const;

    CorpusConfig cfg_;
    // order-1 chain over a fixed alphabet; 4 successor states per state
    std::vector<uint8_t> alphabet_;
    std::vector<std::array<uint8_t, 4>> next_;
};

// A retrieval sample: a haystack of `context_size` tokens that embeds one
// needle sentence and ends with the question prompt. The span covers the
// seven digits plus the trailing period; its first token sits at the index
// nearest depth * context_size.
struct NeedleSample {
    std::vector<int> tokens;
    int span_begin = 0;
    int span_end = 0;  // exclusive
    double depth = 0.0;
    std::string city;
    std::string answer;  // the 7 digits
};

NeedleSample generate_niah(const Corpus& corpus, int context_size, double depth, Rng& rng);

}  // namespace ssx
