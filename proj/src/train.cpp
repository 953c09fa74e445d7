#include "ssmax/train.hpp"

#include <algorithm>
#include <cmath>

namespace ssx {

void TrainConfig::validate() const {
    if (steps < 0 || batch < 1 || grad_accum < 1)
        throw std::invalid_argument("TrainConfig: bad steps/batch/grad_accum");
    if (warmup < 0 || warmup > steps)
        throw std::invalid_argument("TrainConfig: warmup must lie in [0, steps]");
    if (!(lr > 0)) throw std::invalid_argument("TrainConfig: lr must be positive");
}

void VariantPlan::validate() const {
    if (std::string("abcdefp").find(id) == std::string::npos)
        throw std::invalid_argument(std::string("VariantPlan: unknown variant '") + id + "'");
    if (!(switch_fraction > 0.0 && switch_fraction < 1.0))
        throw std::invalid_argument("VariantPlan: switch fraction must lie in (0, 1)");
    if (!(post_switch_warmup_fraction >= 0.0))
        throw std::invalid_argument("VariantPlan: bad post-switch warmup fraction");
}

ScoreMode variant_start_mode(char id) {
    switch (id) {
        case 'a':
        case 'e':
        case 'f': return ScoreMode::softmax;
        case 'b': return ScoreMode::ssmax;
        case 'c': return ScoreMode::ssmax_no_scale;
        case 'd': return ScoreMode::ssmax_bias;
        case 'p': return ScoreMode::pn_probe;
    }
    throw std::invalid_argument(std::string("unknown variant '") + id + "'");
}

Model<float> make_variant_model(ModelConfig base, char variant, uint64_t seed) {
    base.mode = variant_start_mode(variant);
    return init_model<float>(base, seed);
}

namespace {

AdamWConfig adamw_of(const TrainConfig& tc) {
    AdamWConfig o;
    o.beta1 = tc.beta1;
    o.beta2 = tc.beta2;
    o.eps = tc.eps;
    o.weight_decay = tc.weight_decay;
    o.grad_clip = tc.grad_clip;
    return o;
}

// Remaps optimizer moments by tensor name when the parameter layout changes
// (the mode switch of variant (f) adds head_s tensors mid-run).
void remap_adam_state(const ModelConfig& old_cfg, ParamSet<float>& old_params,
                      const ModelConfig& new_cfg, ParamSet<float>& new_params,
                      AdamState<float>& state) {
    auto old_views = collect_params(old_cfg, old_params);
    auto new_views = collect_params(new_cfg, new_params);
    AdamState<float> fresh;
    fresh.init(new_cfg, new_params);
    fresh.step = state.step;
    for (size_t ni = 0; ni < new_views.size(); ++ni) {
        for (size_t oi = 0; oi < old_views.size(); ++oi) {
            if (new_views[ni].name == old_views[oi].name &&
                new_views[ni].len == old_views[oi].len) {
                fresh.m[ni] = std::move(state.m[oi]);
                fresh.v[ni] = std::move(state.v[oi]);
                break;
            }
        }
    }
    state = std::move(fresh);
}

void zero_head_scale_grads(const ModelConfig& cfg, ParamSet<float>& grads) {
    for (int l = 0; l < cfg.num_layers; ++l) {
        auto& hs = grads.layers[static_cast<size_t>(l)].head_s;
        std::fill(hs.begin(), hs.end(), 0.f);
    }
}

}  // namespace

TrainResult run_pretraining(Model<float>& model, const Corpus& corpus, const TrainConfig& tc,
                            const VariantPlan& plan, AdamState<float>* state_out) {
    tc.validate();
    plan.validate();
    if (model.config.mode != variant_start_mode(plan.id))
        throw std::invalid_argument("run_pretraining: model mode does not match the variant");

    const int N = model.config.seq_len;
    const int B = tc.batch;
    TrainResult res;
    if (plan.id == 'f') {
        res.switch_step = std::llround(plan.switch_fraction * static_cast<double>(tc.steps));
        res.post_switch_warmup = std::llround(plan.post_switch_warmup_fraction *
                                              static_cast<double>(tc.steps - res.switch_step));
    }

    AdamState<float> state;
    state.init(model.config, model.params);
    ParamSet<float> grads;
    alloc_params(model.config, grads);
    Workspace<float> ws;
    std::vector<int> tokens(static_cast<size_t>(B) * N), targets(static_cast<size_t>(B) * N);
    const AdamWConfig base_opt = adamw_of(tc);

    for (long step = 1; step <= tc.steps; ++step) {
        if (plan.id == 'f' && step == res.switch_step + 1) {
            auto old_cfg = model.config;
            auto old_params = model.params;  // layout reference for the remap
            replace_softmax_with_ssmax(model, N);
            alloc_params(model.config, grads);
            remap_adam_state(old_cfg, old_params, model.config, model.params, state);
        }

        zero_params(model.config, grads);
        double loss_acc = 0.0;
        for (int micro = 0; micro < tc.grad_accum; ++micro) {
            for (int b = 0; b < B; ++b) {
                Rng r(mix_seed(tc.seed, 0x0DA7A, static_cast<uint64_t>(step) * tc.grad_accum + micro,
                               static_cast<uint64_t>(b)));
                const auto seq = corpus.gen_sequence(r, N + 1);
                std::copy(seq.begin(), seq.end() - 1, tokens.begin() + static_cast<size_t>(b) * N);
                std::copy(seq.begin() + 1, seq.end(), targets.begin() + static_cast<size_t>(b) * N);
            }
            forward(model, std::span<const int>(tokens), B, N, ws);
            const auto lo = cross_entropy(ws.logits, std::span<const int>(targets), B, N,
                                          LossReduction::mean_tokens, &ws.dlogits);
            loss_acc += lo.value;
            if (!std::isfinite(lo.value)) {
                res.aborted = true;
                res.abort_reason = "non-finite loss at step " + std::to_string(step);
                if (state_out) *state_out = std::move(state);
                return res;
            }
            if (tc.grad_accum > 1) {
                const float inv = 1.f / static_cast<float>(tc.grad_accum);
                for (auto& v : ws.dlogits.v) v *= inv;
            }
            backward(model, std::span<const int>(tokens), B, N, ws, grads);
        }
        if (tc.freeze_head_scale) zero_head_scale_grads(model.config, grads);

        double lr = lr_at(step, tc.lr, tc.schedule, tc.warmup, tc.steps);
        if (plan.id == 'f' && step > res.switch_step && res.post_switch_warmup > 0) {
            const double f = static_cast<double>(step - res.switch_step) /
                             static_cast<double>(res.post_switch_warmup);
            lr *= std::min(1.0, f);
        }
        try {
            adamw_step(model.config, model.params, grads, state, base_opt, lr);
        } catch (const numeric_abort& e) {
            res.aborted = true;
            res.abort_reason = e.what();
            if (state_out) *state_out = std::move(state);
            return res;
        }
        res.curve.push_back({step, loss_acc / tc.grad_accum, lr});
    }

    if (plan.id == 'e') replace_softmax_with_ssmax(model, N);
    if (state_out) *state_out = std::move(state);
    return res;
}

SftRowProvider corpus_sft_provider(const Corpus& corpus, uint64_t seed, int seq_len) {
    return [&corpus, seed, seq_len](long step, int slot) {
        Rng r(mix_seed(seed, 0x5F7A, static_cast<uint64_t>(step), static_cast<uint64_t>(slot)));
        return corpus.gen_sft_row(r, seq_len + 1);
    };
}

TrainResult run_sft(Model<float>& model, const TrainConfig& tc, const SftRowProvider& rows,
                    AdamState<float>* state_out) {
    tc.validate();
    const int N = model.config.seq_len;
    const int B = tc.batch;
    TrainResult res;

    AdamState<float> state;
    state.init(model.config, model.params);
    ParamSet<float> grads;
    alloc_params(model.config, grads);
    Workspace<float> ws;
    std::vector<int> tokens(static_cast<size_t>(B) * N), targets(static_cast<size_t>(B) * N);
    const AdamWConfig opt = adamw_of(tc);

    for (long step = 1; step <= tc.steps; ++step) {
        zero_params(model.config, grads);
        double loss_acc = 0.0;
        for (int micro = 0; micro < tc.grad_accum; ++micro) {
            for (int b = 0; b < B; ++b) {
                const auto row = rows(step * tc.grad_accum + micro, b);
                if (static_cast<int>(row.tokens.size()) != N + 1)
                    throw std::domain_error("run_sft: row length mismatch");
                if (row.answer_end <= row.answer_begin || row.answer_begin < 1 ||
                    row.answer_end > N + 1)
                    throw std::domain_error("run_sft: empty or out-of-range answer span");
                std::copy(row.tokens.begin(), row.tokens.end() - 1,
                          tokens.begin() + static_cast<size_t>(b) * N);
                // mask: only targets inside the answer span carry loss
                for (int t = 0; t < N; ++t) {
                    const int nxt = row.tokens[static_cast<size_t>(t) + 1];
                    const bool in_span = (t + 1 >= row.answer_begin && t + 1 < row.answer_end);
                    targets[static_cast<size_t>(b) * N + t] = in_span ? nxt : -1;
                }
            }
            forward(model, std::span<const int>(tokens), B, N, ws);
            const auto lo = cross_entropy(ws.logits, std::span<const int>(targets), B, N,
                                          LossReduction::sum_mean_batch, &ws.dlogits);
            loss_acc += lo.value;
            if (!std::isfinite(lo.value)) {
                res.aborted = true;
                res.abort_reason = "non-finite loss at step " + std::to_string(step);
                if (state_out) *state_out = std::move(state);
                return res;
            }
            if (tc.grad_accum > 1) {
                const float inv = 1.f / static_cast<float>(tc.grad_accum);
                for (auto& v : ws.dlogits.v) v *= inv;
            }
            backward(model, std::span<const int>(tokens), B, N, ws, grads);
        }
        if (tc.freeze_head_scale) zero_head_scale_grads(model.config, grads);

        const double lr = lr_at(step, tc.lr, tc.schedule, tc.warmup, tc.steps);
        try {
            adamw_step(model.config, model.params, grads, state, opt, lr);
        } catch (const numeric_abort& e) {
            res.aborted = true;
            res.abort_reason = e.what();
            if (state_out) *state_out = std::move(state);
            return res;
        }
        res.curve.push_back({step, loss_acc / tc.grad_accum, lr});
    }
    if (state_out) *state_out = std::move(state);
    return res;
}

}  // namespace ssx
