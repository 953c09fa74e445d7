#include "ssmax/cli.hpp"

#include <CLI11.hpp>
#include <algorithm>
#include <chrono>
#include <filesystem>
#include <iostream>

#include "ssmax/checkpoint.hpp"
#include "ssmax/config.hpp"
#include "ssmax/csv.hpp"
#include "ssmax/eval.hpp"
#include "ssmax/kernels.hpp"
#include "ssmax/manifest.hpp"
#include "ssmax/train.hpp"

namespace ssx {

namespace {

namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

ModelConfig model_config_from(KvConfig& kv) {
    ModelConfig cfg;
    cfg.num_layers = static_cast<int>(kv.get_long("model.layers", 4));
    cfg.num_heads = static_cast<int>(kv.get_long("model.heads", 4));
    cfg.hidden = static_cast<int>(kv.get_long("model.hidden", 128));
    cfg.ffn = static_cast<int>(kv.get_long("model.ffn", 384));
    cfg.vocab = static_cast<int>(kv.get_long("model.vocab", 256));
    cfg.rope_theta = kv.get_double("model.rope_theta", 10000.0);
    cfg.seq_len = static_cast<int>(kv.get_long("model.seq_len", 256));
    cfg.validate();
    return cfg;
}

CorpusConfig corpus_config_from(KvConfig& kv) {
    CorpusConfig cc;
    cc.corpus_seed = kv.get_u64("corpus.seed", 2024);
    cc.recall_fraction = kv.get_double("corpus.recall_fraction", 0.5);
    cc.two_needle_fraction = kv.get_double("corpus.two_needle_fraction", 0.25);
    cc.periodic_fraction = kv.get_double("corpus.periodic_fraction", 0.25);
    return cc;
}

TrainConfig train_config_from(KvConfig& kv, bool sft) {
    TrainConfig tc;
    tc.lr = kv.get_double("train.lr", sft ? 5e-4 : 1e-3);
    tc.beta1 = kv.get_double("train.beta1", 0.9);
    tc.beta2 = kv.get_double("train.beta2", sft ? 0.999 : 0.95);
    tc.weight_decay = kv.get_double("train.weight_decay", sft ? 0.0 : 0.1);
    tc.grad_clip = kv.get_double("train.grad_clip", 1.0);
    tc.schedule = parse_schedule(kv.get_str("train.schedule", sft ? "cosine" : "constant"));
    tc.warmup = kv.get_long("train.warmup", sft ? 40 : 100);
    tc.steps = kv.get_long("train.steps", sft ? 400 : 2000);
    tc.batch = static_cast<int>(kv.get_long("train.batch", 32));
    tc.grad_accum = static_cast<int>(kv.get_long("train.grad_accum", 1));
    tc.seed = kv.get_u64("train.seed", 1);
    return tc;
}

void write_loss_csv(const std::string& path, const std::vector<LossRecord>& curve,
                    const std::string& variant) {
    CsvWriter csv(path, "step,loss,lr,variant");
    for (const auto& r : curve) csv.row(r.step, r.loss, r.lr, variant);
}

struct TrainCmd {
    std::string config_path, out_dir;
    std::string variant = "a";
    long steps_override = -1;
    long seed_override = -1;
};

int cmd_train(const TrainCmd& c) {
    const auto t0 = Clock::now();
    if (c.variant.size() != 1 ||
        std::string("abcdefp").find(c.variant[0]) == std::string::npos) {
        std::cerr << "train: unknown variant '" << c.variant << "' (use a..f or p)\n";
        return 2;
    }
    KvConfig kv = c.config_path.empty() ? KvConfig::from_string("")
                                        : KvConfig::from_file(c.config_path);
    const ModelConfig mcfg = model_config_from(kv);
    const CorpusConfig ccfg = corpus_config_from(kv);
    TrainConfig tc = train_config_from(kv, /*sft=*/false);
    kv.reject_unknown();
    if (c.steps_override >= 0) tc.steps = c.steps_override;
    if (c.seed_override >= 0) tc.seed = static_cast<uint64_t>(c.seed_override);
    tc.warmup = std::min(tc.warmup, tc.steps);

    fs::create_directories(c.out_dir);
    const Corpus corpus(ccfg);
    auto model = make_variant_model(mcfg, c.variant[0], tc.seed);
    AdamState<float> state;
    VariantPlan plan;
    plan.id = c.variant[0];
    const TrainResult res = run_pretraining(model, corpus, tc, plan, &state);

    const std::string ckpt = c.out_dir + "/checkpoint.bin";
    const std::string losscsv = c.out_dir + "/loss.csv";
    save_checkpoint(ckpt, model, &state, res.curve.empty() ? 0 : res.curve.back().step);
    write_loss_csv(losscsv, res.curve, c.variant);

    RunManifest man;
    man.command = "train";
    man.config = kv.resolved();
    man.config["variant"] = c.variant;
    man.config["train.steps"] = std::to_string(tc.steps);
    man.config["train.seed"] = std::to_string(tc.seed);
    man.seed = tc.seed;
    man.outputs = {ckpt, losscsv};
    man.wall_clock_sec = seconds_since(t0);
    if (plan.id == 'f') {
        man.extra["switch_step"] = res.switch_step;
        man.extra["post_switch_warmup"] = res.post_switch_warmup;
    }
    if (plan.id == 'e') man.extra["replaced_after_training"] = true;
    if (res.aborted) man.extra["abort_reason"] = res.abort_reason;
    write_manifest(c.out_dir + "/manifest.json", man);

    if (res.aborted) {
        std::cerr << "train: aborted (" << res.abort_reason << "); last-good checkpoint kept\n";
        return 4;
    }
    return 0;
}

struct SftCmd {
    std::string config_path, checkpoint_path, out_dir;
    long seed_override = -1;
};

int cmd_sft(const SftCmd& c) {
    const auto t0 = Clock::now();
    KvConfig kv = c.config_path.empty() ? KvConfig::from_string("")
                                        : KvConfig::from_file(c.config_path);
    const CorpusConfig ccfg = corpus_config_from(kv);
    TrainConfig tc = train_config_from(kv, /*sft=*/true);
    // model geometry comes from the checkpoint; reject only unknown keys
    (void)model_config_from(kv);
    kv.reject_unknown();
    if (c.seed_override >= 0) tc.seed = static_cast<uint64_t>(c.seed_override);

    auto ck = load_checkpoint(c.checkpoint_path);
    fs::create_directories(c.out_dir);
    const Corpus corpus(ccfg);
    AdamState<float> state;
    const TrainResult res =
        run_sft(ck.model, tc, corpus_sft_provider(corpus, tc.seed, ck.model.config.seq_len),
                &state);

    const std::string ckpt = c.out_dir + "/checkpoint.bin";
    const std::string losscsv = c.out_dir + "/loss.csv";
    save_checkpoint(ckpt, ck.model, &state, res.curve.empty() ? 0 : res.curve.back().step);
    write_loss_csv(losscsv, res.curve, "sft");

    RunManifest man;
    man.command = "sft";
    man.config = kv.resolved();
    man.config["checkpoint"] = c.checkpoint_path;
    man.seed = tc.seed;
    man.outputs = {ckpt, losscsv};
    man.wall_clock_sec = seconds_since(t0);
    if (res.aborted) man.extra["abort_reason"] = res.abort_reason;
    write_manifest(c.out_dir + "/manifest.json", man);

    if (res.aborted) {
        std::cerr << "sft: aborted (" << res.abort_reason << "); last-good checkpoint kept\n";
        return 4;
    }
    return 0;
}

struct FadingCmd {
    std::string pattern = "fig1";
    std::vector<long> sizes;
    double s = 0.43;
    std::vector<double> s_list;
    std::vector<double> zmax_range = {0.0, 12.0};
    int zmax_steps = 121;
    std::string out;
};

int cmd_fading(const FadingCmd& c) {
    const auto t0 = Clock::now();
    if (c.sizes.empty()) {
        std::cerr << "fading-curve: --sizes is required\n";
        return 2;
    }
    if (c.pattern == "fig1") {
        const auto pts = spike_fading_curve(std::span<const long>(c.sizes), c.s);
        CsvWriter csv(c.out, "n,softmax_max,ssmax_max");
        for (const auto& p : pts) csv.row(p.n, p.softmax_max, p.ssmax_max);
    } else if (c.pattern == "fig3") {
        const std::vector<double> ss = c.s_list.empty() ? std::vector<double>{c.s} : c.s_list;
        const auto pts =
            focus_sweep_curve(std::span<const long>(c.sizes), std::span<const double>(ss),
                              c.zmax_range.at(0), c.zmax_range.at(1), c.zmax_steps);
        CsvWriter csv(c.out, "n,s,z_max,softmax_value,ssmax_value");
        for (const auto& p : pts) csv.row(p.n, p.s, p.z_max, p.softmax_value, p.ssmax_value);
    } else {
        std::cerr << "fading-curve: unknown pattern '" << c.pattern << "' (use fig1 or fig3)\n";
        return 2;
    }

    RunManifest man;
    man.command = "fading-curve";
    man.config["pattern"] = c.pattern;
    man.config["s"] = std::to_string(c.s);
    man.outputs = {c.out};
    man.wall_clock_sec = seconds_since(t0);
    write_manifest(c.out + ".manifest.json", man);
    return 0;
}

struct EvalCmd {
    std::string checkpoint_path, out_dir;
    std::string protocol;
    double theta_mult = 50.0;
    std::vector<int> sizes;
    std::vector<double> depths = {0.1, 0.3, 0.5, 0.7, 0.9};
    int samples = 200;
    int max_len = -1;
    int num_seq = 64;
    int trials = 50;
    int context = -1;
    long seed = 1;
    uint64_t corpus_seed = 2024;
};

int cmd_eval(const EvalCmd& c) {
    const auto t0 = Clock::now();
    auto ck = load_checkpoint(c.checkpoint_path);
    const Model<float>& model = ck.model;
    const int N = model.config.seq_len;
    const double theta = model.config.rope_theta * c.theta_mult;
    CorpusConfig ccfg;
    ccfg.corpus_seed = c.corpus_seed;
    const Corpus corpus(ccfg);
    fs::create_directories(c.out_dir);

    nlohmann::json summary;
    summary["protocol"] = c.protocol;
    summary["checkpoint"] = c.checkpoint_path;
    summary["theta_mult"] = c.theta_mult;
    summary["theta_eval"] = theta;
    summary["mode"] = score_mode_name(model.config.mode);
    summary["seq_len"] = N;
    summary["seed"] = c.seed;
    std::vector<std::string> outputs;

    if (c.protocol == "posloss") {
        const int max_len = c.max_len > 0 ? c.max_len : 4 * N;
        const auto seqs =
            gen_eval_sequences(corpus, c.num_seq, max_len + 1, static_cast<uint64_t>(c.seed));
        const auto loss = per_position_loss(model, seqs, max_len, theta);
        const std::string path = c.out_dir + "/posloss.csv";
        CsvWriter csv(path, "position,loss");
        for (size_t t = 0; t < loss.size(); ++t) csv.row(t + 1, loss[t]);
        outputs.push_back(path);
        double m1 = 0, m2 = 0;
        for (int t = 0; t < N; ++t) m1 += loss[static_cast<size_t>(t)];
        for (size_t t = static_cast<size_t>(N); t < loss.size(); ++t) m2 += loss[t];
        summary["mean_loss_within_train_len"] = m1 / N;
        summary["mean_loss_beyond_train_len"] =
            loss.size() > static_cast<size_t>(N) ? m2 / (loss.size() - static_cast<size_t>(N))
                                                 : 0.0;
    } else if (c.protocol == "niah") {
        std::vector<int> sizes = c.sizes;
        // depth 0.1 needs room for the needle prefix, so the grid starts at 2N
        if (sizes.empty()) sizes = {2 * N, 4 * N};
        const auto grid = niah_eval(model, corpus, sizes, c.depths, c.samples, theta,
                                    static_cast<uint64_t>(c.seed));
        const std::string path = c.out_dir + "/niah.csv";
        CsvWriter csv(path, "context_size,depth,accuracy");
        double total = 0;
        for (const auto& cell : grid) {
            csv.row(cell.context_size, cell.depth, cell.accuracy);
            total += cell.accuracy;
        }
        outputs.push_back(path);
        summary["mean_accuracy"] = grid.empty() ? 0.0 : total / grid.size();
    } else if (c.protocol == "needlescore") {
        const int ctx = c.context > 0 ? c.context : 4 * N;
        Model<float> view = model;
        set_rope_theta(view, theta);
        Rng rng(mix_seed(static_cast<uint64_t>(c.seed), 0x5C02E));
        const auto sample = generate_niah(corpus, ctx, 0.5, rng);
        const auto dec = greedy_decode_answer(view, sample, /*capture_trace=*/true);
        const auto scores = needle_score(dec.trace, sample.span_begin, sample.span_end);
        const std::string path = c.out_dir + "/needlescore.csv";
        CsvWriter csv(path, "layer,head,score");
        for (const auto& e : scores) csv.row(e.layer, e.head, e.score);
        outputs.push_back(path);
        summary["context_size"] = ctx;
        summary["city"] = sample.city;
        summary["emitted"] = dec.text;
        summary["outcome"] = outcome_name(grade_answer(dec.text, sample.answer));
        summary["top_needle_score"] = scores.front().score;
    } else if (c.protocol == "topscore") {
        const int ctx = c.context > 0 ? c.context : 4 * N;
        const auto trials = top_needle_score_study(model, corpus, c.trials, ctx, theta,
                                                   static_cast<uint64_t>(c.seed));
        auto sorted = trials;
        std::stable_sort(sorted.begin(), sorted.end(),
                         [](const TopScoreTrial& a, const TopScoreTrial& b) {
                             return a.top_score > b.top_score;
                         });
        const std::string path = c.out_dir + "/topscore.csv";
        CsvWriter csv(path, "rank,score,outcome");
        for (size_t i = 0; i < sorted.size(); ++i)
            csv.row(i + 1, sorted[i].top_score, outcome_name(sorted[i].outcome));
        outputs.push_back(path);
        int n_ok = 0;
        for (const auto& t : trials)
            if (t.outcome == RetrievalOutcome::correct) ++n_ok;
        summary["context_size"] = ctx;
        summary["trials"] = c.trials;
        summary["fully_correct"] = n_ok;
    } else if (c.protocol == "fitpn") {
        if (model.config.mode != ScoreMode::pn_probe) {
            std::cerr << "eval: fitpn needs a pn_probe checkpoint, got "
                      << score_mode_name(model.config.mode) << "\n";
            return 3;
        }
        const auto fit =
            fit_pn(std::span<const float>(model.params.pn.data(), model.params.pn.size()));
        const std::string path = c.out_dir + "/fitpn.csv";
        CsvWriter csv(path, "a1,a2,r2");
        csv.row(fit.a1, fit.a2, fit.r2);
        outputs.push_back(path);
        summary["a1"] = fit.a1;
        summary["a2"] = fit.a2;
        summary["r2"] = fit.r2;
    } else {
        std::cerr << "eval: unknown protocol '" << c.protocol << "'\n";
        return 2;
    }

    const std::string spath = c.out_dir + "/summary.json";
    {
        std::ofstream f(spath, std::ios::trunc);
        f << summary.dump(2) << "\n";
    }
    outputs.push_back(spath);

    RunManifest man;
    man.command = "eval." + c.protocol;
    for (auto it = summary.begin(); it != summary.end(); ++it)
        if (it.value().is_string())
            man.config[it.key()] = it.value().get<std::string>();
        else
            man.config[it.key()] = it.value().dump();
    man.seed = static_cast<uint64_t>(c.seed);
    man.outputs = outputs;
    man.wall_clock_sec = seconds_since(t0);
    write_manifest(c.out_dir + "/manifest.json", man);
    return 0;
}

}  // namespace

int run_cli(int argc, const char* const* argv) {
    CLI::App app{"Scalable-Softmax kernels and a desk-scale decoder-only transformer testbed"};
    app.require_subcommand(1);

    FadingCmd fading;
    auto* fc = app.add_subcommand("fading-curve",
                                  "Emit max-output curves for the softmax/ssmax comparison");
    fc->add_option("--pattern", fading.pattern, "fig1 (spike) or fig3 (grid plus free max)");
    fc->add_option("--sizes", fading.sizes, "input sizes")->delimiter(',')->required();
    fc->add_option("--s", fading.s, "ssmax scaling parameter (default 0.43)");
    fc->add_option("--s-list", fading.s_list, "scaling parameters for fig3")->delimiter(',');
    fc->add_option("--zmax-range", fading.zmax_range, "fig3 sweep lo,hi")->delimiter(',');
    fc->add_option("--zmax-steps", fading.zmax_steps, "fig3 sweep points");
    fc->add_option("--out", fading.out, "output CSV path")->required();

    TrainCmd train;
    auto* tc = app.add_subcommand("train", "Pretrain a variant on the synthetic corpus");
    tc->add_option("--config", train.config_path, "key = value config file");
    tc->add_option("--variant", train.variant, "a|b|c|d|e|f|p")->required();
    tc->add_option("--out", train.out_dir, "output directory")->required();
    tc->add_option("--steps", train.steps_override, "override train.steps");
    tc->add_option("--seed", train.seed_override, "override train.seed");

    SftCmd sft;
    auto* sc = app.add_subcommand("sft", "Fine-tune a checkpoint on retrieval rows");
    sc->add_option("--config", sft.config_path, "key = value config file");
    sc->add_option("--checkpoint", sft.checkpoint_path, "input checkpoint")->required();
    sc->add_option("--out", sft.out_dir, "output directory")->required();
    sc->add_option("--seed", sft.seed_override, "override train.seed");

    EvalCmd eval;
    auto* ec = app.add_subcommand("eval", "Run an evaluation protocol on a checkpoint");
    ec->add_option("--checkpoint", eval.checkpoint_path, "input checkpoint")->required();
    ec->add_option("--out", eval.out_dir, "output directory")->required();
    ec->add_option("--protocol", eval.protocol, "posloss|niah|needlescore|topscore|fitpn")
        ->required();
    ec->add_option("--theta-mult", eval.theta_mult, "RoPE theta multiplier (default 50)");
    ec->add_option("--sizes", eval.sizes, "niah context sizes")->delimiter(',');
    ec->add_option("--depths", eval.depths, "niah depths")->delimiter(',');
    ec->add_option("--samples", eval.samples, "niah samples per cell");
    ec->add_option("--max-len", eval.max_len, "posloss maximum context size");
    ec->add_option("--num-seq", eval.num_seq, "posloss sequence count");
    ec->add_option("--trials", eval.trials, "topscore trials");
    ec->add_option("--context", eval.context, "needlescore/topscore context size");
    ec->add_option("--seed", eval.seed, "evaluation seed");
    ec->add_option("--corpus-seed", eval.corpus_seed, "filler distribution seed");

    try {
        app.parse(argc, const_cast<char**>(argv));
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (fc->parsed()) return cmd_fading(fading);
        if (tc->parsed()) return cmd_train(train);
        if (sc->parsed()) return cmd_sft(sft);
        if (ec->parsed()) return cmd_eval(eval);
        return 2;
    } catch (const numeric_abort& e) {
        std::cerr << "numeric abort: " << e.what() << "\n";
        return 4;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    }
}

}  // namespace ssx
