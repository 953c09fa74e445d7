#include "ssmax/eval.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace ssx {

std::vector<double> per_position_loss(const Model<float>& model,
                                      const std::vector<std::vector<int>>& sequences,
                                      int max_len, double theta_override) {
    if (sequences.empty()) throw std::domain_error("per_position_loss: no sequences");
    for (const auto& s : sequences)
        if (static_cast<int>(s.size()) < max_len + 1)
            throw std::domain_error("per_position_loss: sequence shorter than max_len + 1");

    Model<float> view = model;  // evaluation-only theta override
    set_rope_theta(view, theta_override);

    const int S = static_cast<int>(sequences.size());
    std::vector<double> acc(static_cast<size_t>(S) * max_len, 0.0);
#pragma omp parallel for schedule(dynamic)
    for (int si = 0; si < S; ++si) {
        const auto& seq = sequences[static_cast<size_t>(si)];
        KVCache<float> cache;
        cache.init(view.config, max_len);
        const auto logits =
            forward_cached(view, cache, std::span<const int>(seq.data(), static_cast<size_t>(max_len)));
        for (int t = 0; t < max_len; ++t) {
            const float* lr = logits.row(t);
            float mx = lr[0];
            for (int c = 1; c < view.config.vocab; ++c) mx = std::max(mx, lr[c]);
            double sum = 0.0;
            for (int c = 0; c < view.config.vocab; ++c)
                sum += std::exp(static_cast<double>(lr[c] - mx));
            const double lse = static_cast<double>(mx) + std::log(sum);
            acc[static_cast<size_t>(si) * max_len + t] =
                lse - static_cast<double>(lr[seq[static_cast<size_t>(t) + 1]]);
        }
    }

    std::vector<double> out(static_cast<size_t>(max_len), 0.0);
    for (int t = 0; t < max_len; ++t) {
        double a = 0.0;
        for (int si = 0; si < S; ++si) a += acc[static_cast<size_t>(si) * max_len + t];
        out[static_cast<size_t>(t)] = a / S;
    }
    return out;
}

std::vector<std::vector<int>> gen_eval_sequences(const Corpus& corpus, int count, int len,
                                                 uint64_t seed) {
    std::vector<std::vector<int>> out(static_cast<size_t>(count));
    for (int i = 0; i < count; ++i) {
        Rng r(mix_seed(seed, 0xE7A1, static_cast<uint64_t>(i)));
        out[static_cast<size_t>(i)] = corpus.gen_sequence(r, len);
    }
    return out;
}

RetrievalOutcome grade_answer(const std::string& emitted, const std::string& answer) {
    if (emitted.size() >= answer.size() &&
        std::equal(answer.begin(), answer.end(), emitted.begin()))
        return RetrievalOutcome::correct;
    if (!emitted.empty() && !answer.empty() && emitted[0] == answer[0])
        return RetrievalOutcome::first_digit_only;
    return RetrievalOutcome::incorrect;
}

const char* outcome_name(RetrievalOutcome o) {
    switch (o) {
        case RetrievalOutcome::correct: return "correct";
        case RetrievalOutcome::first_digit_only: return "first_digit_only";
        case RetrievalOutcome::incorrect: return "incorrect";
    }
    return "?";
}

DecodeResult greedy_decode_answer(const Model<float>& model, const NeedleSample& sample,
                                  bool capture_trace, int max_tokens) {
    DecodeResult res;
    const int ctx = static_cast<int>(sample.tokens.size());
    KVCache<float> cache;
    cache.init(model.config, ctx + max_tokens);
    if (capture_trace) res.trace.step = ctx - 1;

    auto logits = forward_cached(model, cache, std::span<const int>(sample.tokens),
                                 capture_trace ? &res.trace : nullptr);
    int last_row = logits.rows - 1;
    for (int step = 0; step < max_tokens; ++step) {
        const float* lr = logits.row(last_row);
        int best = -1;
        float best_v = 0.f;
        for (int c = 0; c < model.config.vocab; ++c) {
            if (c == kEosToken) continue;  // greedy non-eos decoding
            if (best < 0 || lr[c] > best_v) {
                best = c;
                best_v = lr[c];
            }
        }
        res.text.push_back(static_cast<char>(best));
        if (step + 1 == max_tokens) break;
        const int tok = best;
        logits = forward_cached(model, cache, std::span<const int>(&tok, 1));
        last_row = 0;
    }
    return res;
}

std::vector<NiahCell> niah_grid(const Corpus& corpus, std::span<const int> sizes,
                                std::span<const double> depths, int samples_per_cell,
                                uint64_t seed, const AnswerFn& answer) {
    std::vector<NiahCell> grid;
    for (const int size : sizes)
        for (const double depth : depths) grid.push_back({size, depth, 0.0});

    for (auto& cell : grid) {
        std::vector<int> correct(static_cast<size_t>(samples_per_cell), 0);
#pragma omp parallel for schedule(dynamic)
        for (int trial = 0; trial < samples_per_cell; ++trial) {
            Rng r(mix_seed(seed, static_cast<uint64_t>(cell.context_size),
                           static_cast<uint64_t>(std::llround(cell.depth * 1000)),
                           static_cast<uint64_t>(trial)));
            const auto sample = generate_niah(corpus, cell.context_size, cell.depth, r);
            const std::string emitted = answer(sample);
            correct[static_cast<size_t>(trial)] =
                grade_answer(emitted, sample.answer) == RetrievalOutcome::correct ? 1 : 0;
        }
        long n_ok = 0;
        for (int v : correct) n_ok += v;
        cell.accuracy = static_cast<double>(n_ok) / samples_per_cell;
    }
    return grid;
}

std::vector<NiahCell> niah_eval(const Model<float>& model, const Corpus& corpus,
                                std::span<const int> sizes, std::span<const double> depths,
                                int samples_per_cell, double theta_override, uint64_t seed) {
    Model<float> view = model;
    set_rope_theta(view, theta_override);
    const AnswerFn fn = [&view](const NeedleSample& s) {
        return greedy_decode_answer(view, s).text;
    };
    return niah_grid(corpus, sizes, depths, samples_per_cell, seed, fn);
}

std::vector<NeedleScoreEntry> needle_score(const AttentionTrace& trace, int span_begin,
                                           int span_end) {
    if (span_begin < 0 || span_end <= span_begin || span_end > trace.visible)
        throw std::domain_error("needle_score: span outside the trace width");
    std::vector<NeedleScoreEntry> out;
    out.reserve(trace.rows.size());
    for (int l = 0; l < trace.layers; ++l) {
        for (int h = 0; h < trace.heads; ++h) {
            const auto& row = trace.rows[static_cast<size_t>(l) * trace.heads + h];
            double s = 0.0;
            for (int j = span_begin; j < span_end; ++j) s += row[static_cast<size_t>(j)];
            out.push_back({l, h, s});
        }
    }
    std::stable_sort(out.begin(), out.end(),
                     [](const NeedleScoreEntry& a, const NeedleScoreEntry& b) {
                         return a.score > b.score;
                     });
    return out;
}

std::vector<TopScoreTrial> top_needle_score_study(const Model<float>& model,
                                                  const Corpus& corpus, int trials,
                                                  int context_size, double theta_override,
                                                  uint64_t seed) {
    Model<float> view = model;
    set_rope_theta(view, theta_override);
    std::vector<TopScoreTrial> out(static_cast<size_t>(trials));
#pragma omp parallel for schedule(dynamic)
    for (int ti = 0; ti < trials; ++ti) {
        Rng r(mix_seed(seed, 0x705C, static_cast<uint64_t>(ti)));
        const double depth = 0.1 + 0.8 * r.uniform();
        const auto sample = generate_niah(corpus, context_size, depth, r);
        const auto dec = greedy_decode_answer(view, sample, /*capture_trace=*/true);
        const auto scores = needle_score(dec.trace, sample.span_begin, sample.span_end);
        out[static_cast<size_t>(ti)] = {scores.front().score,
                                        grade_answer(dec.text, sample.answer)};
    }
    return out;
}

namespace {
PnFit fit_pn_impl(const double* p, size_t len) {
    if (len < 3) throw std::invalid_argument("fit_pn: need at least 3 entries");
    const auto n = static_cast<double>(len);
    double sx = 0, sy = 0;
    for (size_t i = 0; i < len; ++i) {
        sx += std::log(static_cast<double>(i + 1));
        sy += p[i];
    }
    const double mx = sx / n, my = sy / n;
    double sxx = 0, sxy = 0, syy = 0;
    for (size_t i = 0; i < len; ++i) {
        const double dx = std::log(static_cast<double>(i + 1)) - mx;
        const double dy = p[i] - my;
        sxx += dx * dx;
        sxy += dx * dy;
        syy += dy * dy;
    }
    PnFit fit;
    fit.a1 = sxy / sxx;
    fit.a2 = my - fit.a1 * mx;
    if (syy <= 1e-300) {
        fit.r2 = 0.0;  // no variance to explain
    } else {
        double ssres = 0;
        for (size_t i = 0; i < len; ++i) {
            const double pred = fit.a1 * std::log(static_cast<double>(i + 1)) + fit.a2;
            ssres += (p[i] - pred) * (p[i] - pred);
        }
        fit.r2 = 1.0 - ssres / syy;
    }
    return fit;
}
}  // namespace

PnFit fit_pn(std::span<const double> pn) { return fit_pn_impl(pn.data(), pn.size()); }

PnFit fit_pn(std::span<const float> pn) {
    std::vector<double> tmp(pn.begin(), pn.end());
    return fit_pn_impl(tmp.data(), tmp.size());
}

}  // namespace ssx
