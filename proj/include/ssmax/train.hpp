#pragma once

#include <functional>
#include <string>
#include <vector>

#include "ssmax/corpus.hpp"
#include "ssmax/model.hpp"
#include "ssmax/optim.hpp"

namespace ssx {

struct TrainConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double eps = 1e-8;
    double weight_decay = 0.1;  // rank >= 2 tensors only
    double grad_clip = 1.0;
    LrSchedule schedule = LrSchedule::constant_warmup;
    long warmup = 100;
    long steps = 2000;
    int batch = 32;
    int grad_accum = 1;
    uint64_t seed = 1;

    // Test hook: keeps every head's s at its current value by zeroing its
    // gradient before the update, which reproduces the no-scale variant
    // bit-for-bit when s = 1.
    bool freeze_head_scale = false;

    void validate() const;
};

// Evaluated configurations. 'a'..'f' follow the published list; 'p' trains
// the pn_probe parameterization used for the log-fit experiment.
struct VariantPlan {
    char id = 'a';
    double switch_fraction = 7.0 / 8.0;             // (f): mode switch point
    double post_switch_warmup_fraction = 1.0 / 25.0;  // (f): share of the post-switch budget

    void validate() const;
};

ScoreMode variant_start_mode(char id);

// Fresh model for a variant: shared weights depend only on (config, seed),
// never on the variant, so loss curves are comparable across modes.
Model<float> make_variant_model(ModelConfig base, char variant, uint64_t seed);

struct LossRecord {
    long step = 0;
    double loss = 0.0;
    double lr = 0.0;
};

struct TrainResult {
    std::vector<LossRecord> curve;
    long switch_step = -1;        // variant (f) only
    long post_switch_warmup = 0;  // variant (f) only
    bool aborted = false;
    std::string abort_reason;
};

// Pretraining on the synthetic corpus. The model must be in the variant's
// starting mode. Variant (f) switches softmax -> ssmax after the configured
// fraction of steps and applies a proportional learning-rate warmup after
// the switch; variant (e) applies the replacement to the finished model with
// zero further steps. On a non-finite loss or gradient the loop stops with
// the parameters from before the failing step.
TrainResult run_pretraining(Model<float>& model, const Corpus& corpus, const TrainConfig& tc,
                            const VariantPlan& plan, AdamState<float>* state_out = nullptr);

using SftRowProvider = std::function<Corpus::SftRow(long step, int slot)>;

SftRowProvider corpus_sft_provider(const Corpus& corpus, uint64_t seed, int seq_len);

// Supervised fine-tuning: loss is the per-row sum of token losses over the
// answer span, averaged over the batch. Rows with an empty answer span are
// rejected at ingestion.
TrainResult run_sft(Model<float>& model, const TrainConfig& tc, const SftRowProvider& rows,
                    AdamState<float>* state_out = nullptr);

}  // namespace ssx
