// maskvar: train a toy MLM encoder with a learned mask proposal net,
// audit gradient variance exactly or by Monte Carlo, inspect sampled
// masks, and run the standalone oracle suites.
//
// Exit codes: 0 success, 1 assertion/validation failure, 2 I/O or
// config error.

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "maskvar/checkpoint.hpp"
#include "maskvar/reports.hpp"
#include "maskvar/run_config.hpp"
#include "maskvar/schema_check.hpp"
#include "maskvar/variance_lab.hpp"

namespace fs = std::filesystem;
using namespace maskvar;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitCheckFailed = 1;
constexpr int kExitConfigOrIo = 2;

struct CommonOpts {
    std::string config_path;
    std::vector<std::string> overrides;
    std::optional<std::uint64_t> seed_flag;
    std::optional<int> threads_flag;
};

void add_common(CLI::App* cmd, CommonOpts& opts) {
    cmd->add_option("--config", opts.config_path, "flat key=value config file");
    cmd->add_option("--override", opts.overrides, "config override key=value (repeatable)")->take_all();
    cmd->add_option("--seed", opts.seed_flag, "seed (beats config file and MASKVAR_SEED)");
    cmd->add_option("--threads", opts.threads_flag, "worker cap for per-sentence work");
}

RunConfig resolve_run_config(const CommonOpts& opts) {
    KvConfig kv = opts.config_path.empty() ? KvConfig{} : KvConfig::load_file(opts.config_path);
    for (const std::string& o : opts.overrides) kv.apply_override(o);
    if (opts.seed_flag) {
        kv.set_long("seed", static_cast<long long>(*opts.seed_flag));
    } else if (!kv.has("seed")) {
        if (const char* env = std::getenv("MASKVAR_SEED")) kv.set("seed", env);
    }
    if (opts.threads_flag) kv.set_long("threads", *opts.threads_flag);
    return RunConfig::from_kv(kv);
}

KvConfig resolved_to_kv(const RunConfig& rc) {
    KvConfig kv;
    kv.set_long("hidden", rc.encoder.hidden);
    kv.set_long("heads", rc.encoder.heads);
    kv.set_long("layers", rc.encoder.num_layers);
    kv.set_long("ffn_multiplier", rc.encoder.ffn_multiplier);
    kv.set_long("max_seq_len", rc.encoder.max_seq_len);
    kv.set_bool("sum_loss", rc.encoder.sum_loss);
    kv.set_long("grammar.num_function", rc.grammar.num_function);
    kv.set_long("grammar.num_topics", rc.grammar.num_topics);
    kv.set_long("grammar.content_per_topic", rc.grammar.content_per_topic);
    kv.set_long("grammar.num_noise", rc.grammar.num_noise);
    kv.set_double("grammar.function_weight", rc.grammar.function_weight);
    kv.set_double("grammar.content_weight", rc.grammar.content_weight);
    kv.set_double("grammar.noise_weight", rc.grammar.noise_weight);
    kv.set_long("grammar.min_len", rc.grammar.min_len);
    kv.set_long("grammar.max_len", rc.grammar.max_len);
    kv.set_long("corpus_sentences", rc.corpus_sentences);
    kv.set_long("eval_sentences", rc.eval_sentences);
    if (!rc.corpus_path.empty()) kv.set("corpus_path", rc.corpus_path);
    if (!rc.vocab_path.empty()) kv.set("vocab_path", rc.vocab_path);
    const TrainConfig& t = rc.train;
    kv.set_long("batch_size", t.batch_size);
    kv.set_long("total_steps", t.total_steps);
    kv.set_double("peak_lr", t.peak_lr);
    kv.set_long("warmup_steps", t.warmup_steps);
    kv.set_double("adam_beta1", t.adam_beta1);
    kv.set_double("adam_beta2", t.adam_beta2);
    kv.set_double("adam_eps", t.adam_eps);
    kv.set_double("weight_decay", t.weight_decay);
    kv.set_double("dropout", t.dropout);
    kv.set_double("lambda", t.lambda_mapnet);
    kv.set_double("clip_epsilon", t.clip_epsilon);
    kv.set_double("mask_rate", t.mask_rate);
    kv.set_double("explore_start", t.schedule.start_p);
    kv.set_double("explore_end", t.schedule.end_p);
    kv.set_long("explore_end_step", t.schedule.end_step);
    kv.set_long("seed", static_cast<long long>(t.seed));
    kv.set_long("eval_interval", t.eval_interval);
    kv.set_long("checkpoint_interval", t.checkpoint_interval);
    if (std::isfinite(t.eval_threshold)) kv.set_double("eval_threshold", t.eval_threshold);
    kv.set_bool("stop_at_threshold", t.stop_at_threshold);
    kv.set_long("max_steps", t.max_steps);
    kv.set_long("threads", t.threads);
    kv.set_bool("baseline_uniform", t.baseline_uniform);
    kv.set_bool("lambda_on_encoder", t.lambda_on_encoder);
    kv.set_bool("freeze_shared_embedding_mapnet", t.freeze_shared_embedding_mapnet);
    kv.set_bool("include_uniform_in_mapnet", t.include_uniform_in_mapnet);
    kv.set_bool("sample_with_replacement", t.sample_with_replacement);
    return kv;
}

void write_text_file(const std::string& path, const std::string& text) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write " + path);
    os << text;
    if (!os) throw std::runtime_error("short write: " + path);
}

// ---- train ----

int cmd_train(const CommonOpts& opts, const std::string& out_dir, bool baseline_uniform, const std::string& resume_path) {
    RunConfig rc = resolve_run_config(opts);
    if (baseline_uniform) rc.train.baseline_uniform = true;
    RunData data = materialize_run_data(rc);
    const EncoderConfig enc_cfg = effective_encoder_config(rc, data);

    fs::create_directories(out_dir);
    write_text_file(out_dir + "/config_resolved.cfg", resolved_to_kv(rc).to_text());

    TrainState state = resume_path.empty() ? TrainState::init(enc_cfg, rc.train.seed) : load_train_state(resume_path);
    if (state.encoder.config.vocab_size != enc_cfg.vocab_size)
        throw std::runtime_error("resume checkpoint vocab size does not match the configured corpus");
    state.encoder.config = enc_cfg;

    std::ofstream metrics(out_dir + "/metrics.jsonl", std::ios::binary);
    if (!metrics) throw std::runtime_error("cannot write " + out_dir + "/metrics.jsonl");

    TrainHooks hooks;
    hooks.on_metrics = [&](const StepMetrics& m) { metrics << to_json(m).dump() << "\n"; };
    hooks.on_checkpoint = [&](const TrainState& s, long step, bool final) {
        const std::string path = final ? out_dir + "/checkpoint_final.mvar"
                                       : out_dir + "/checkpoint_step" + std::to_string(step) + ".mvar";
        save_train_state(path, const_cast<TrainState&>(s));
    };

    TrainSummary summary = train(state, rc.train, data.train_corpus, data.eval_corpus, data.vocab, hooks);
    metrics.close();

    json sj;
    sj["steps_run"] = summary.steps_run;
    sj["final_step"] = state.step;
    sj["initial_eval_loss"] = summary.initial_eval_loss;
    sj["final_eval_loss"] = summary.final_eval_loss;
    sj["steps_to_threshold"] = summary.steps_to_threshold >= 0 ? json(summary.steps_to_threshold) : json(nullptr);
    sj["stopped_early"] = summary.stopped_early;
    sj["seed"] = rc.train.seed;
    sj["total_steps"] = rc.train.total_steps;
    sj["baseline_uniform"] = rc.train.baseline_uniform;
    write_text_file(out_dir + "/summary.json", sj.dump(2) + "\n");
    std::cout << "trained " << summary.steps_run << " steps; final eval loss "
              << (std::isfinite(summary.final_eval_loss) ? std::to_string(summary.final_eval_loss) : "n/a") << "\n";
    return kExitOk;
}

// ---- audit-variance ----

int cmd_audit_variance(const CommonOpts& opts, const std::string& checkpoint_path, const std::string& mode, int k,
                       long samples, int sentences, const std::string& out_path) {
    RunConfig rc = resolve_run_config(opts);
    LoadedModel model = load_model(checkpoint_path);

    Vocabulary vocab = rc.grammar.build_vocabulary();
    if (vocab.size() != model.encoder.config.vocab_size)
        throw std::runtime_error("checkpoint vocabulary size " + std::to_string(model.encoder.config.vocab_size) +
                                 " does not match the configured grammar (" + std::to_string(vocab.size()) + ")");
    std::mt19937_64 corpus_rng = make_stream(rc.train.seed, "audit-corpus");
    std::vector<TokenSequence> corpus = generate_corpus(rc.grammar, sentences, corpus_rng).sentences;

    VarianceAuditReport report;
    if (mode == "exact") {
        if (k < 1) throw config_error("k", "exact mode needs an explicit --k >= 1");
        try {
            report = run_variance_audit_exact(corpus, model.encoder, model.mapnet, k);
        } catch (const enumeration_cap_error& e) {
            std::cerr << "error: " << e.what() << "\n       use --mode mc for sentences this long\n";
            return kExitConfigOrIo;
        }
    } else if (mode == "mc") {
        std::mt19937_64 rng = make_stream(rc.train.seed, "audit-mc");
        report = run_variance_audit_mc(corpus, model.encoder, model.mapnet, k, rc.train.mask_rate, samples, rng);
    } else {
        throw config_error("mode", "must be 'exact' or 'mc'");
    }

    const json j = to_json(report);
    const std::string text = j.dump(2) + "\n";
    if (out_path.empty())
        std::cout << text;
    else
        write_text_file(out_path, text);
    std::cerr << "mask_term uniform=" << report.uniform.mask_term << " mapnet=" << report.mapnet.mask_term
              << " ratio=" << report.mask_term_ratio << "\n";
    return kExitOk;
}

// ---- sample-masks ----

int cmd_sample_masks(const CommonOpts& opts, const std::string& checkpoint_path, int count, const std::string& out_path) {
    RunConfig rc = resolve_run_config(opts);
    LoadedModel model = load_model(checkpoint_path);
    Vocabulary vocab = rc.grammar.build_vocabulary();
    if (vocab.size() != model.encoder.config.vocab_size)
        throw std::runtime_error("checkpoint vocabulary size does not match the configured grammar");

    std::mt19937_64 rng = make_stream(rc.train.seed, "sample-masks");
    SyntheticCorpus corpus = generate_corpus(rc.grammar, count, rng);

    std::ostringstream out;
    for (int i = 0; i < count; ++i) {
        const TokenSequence& x = corpus.sentences[static_cast<std::size_t>(i)];
        ProposalDistribution dist = propose(model.mapnet, x);
        const int k = mask_count(rc.train.mask_rate, x.length);
        SampledPositions sp = sample_positions(dist, k, rng);
        ImportanceRatio ratio = importance_ratio(sp.raw_probs, x.length, k, rc.train.clip_epsilon);
        MaskPlan plan;
        plan.positions = std::move(sp.positions);
        plan.raw_probs = std::move(sp.raw_probs);
        plan.ratio = ratio.raw;
        plan.ratio_clipped = ratio.clipped;
        plan.source = MaskSource::proposal_branch;
        corrupt(x, plan, vocab, rng);
        out << mask_sample_to_json(x, vocab, plan, &dist, &corpus.labels[static_cast<std::size_t>(i)],
                                   &corpus.topics[static_cast<std::size_t>(i)])
                   .dump()
            << "\n";
    }
    if (out_path.empty())
        std::cout << out.str();
    else
        write_text_file(out_path, out.str());
    return kExitOk;
}

// ---- eval ----

int cmd_eval(const CommonOpts& opts, const std::string& checkpoint_path) {
    RunConfig rc = resolve_run_config(opts);
    LoadedModel model = load_model(checkpoint_path);
    RunData data = materialize_run_data(rc);
    if (data.vocab.size() != model.encoder.config.vocab_size)
        throw std::runtime_error("checkpoint vocabulary size does not match the configured corpus");
    TrainState state;  // evaluate() only touches the encoder + step
    state.encoder = std::move(model.encoder);
    state.mapnet = std::move(model.mapnet);
    state.step = 0;
    const double loss = evaluate(state, data.eval_corpus, rc.train, data.vocab);
    json j;
    j["eval_loss"] = loss;
    j["num_sentences"] = data.eval_corpus.size();
    j["mask_rate"] = rc.train.mask_rate;
    j["seed"] = rc.train.seed;
    std::cout << j.dump(2) << "\n";
    return kExitOk;
}

// ---- oracle ----

struct OracleCheck {
    std::string name;
    bool passed = false;
    bool informational = false;
    double value = 0.0;
    double limit = std::numeric_limits<double>::quiet_NaN();
    std::string detail;
};

json checks_to_json(const std::string& suite, const std::vector<OracleCheck>& checks) {
    bool all = true;
    json arr = json::array();
    for (const OracleCheck& c : checks) {
        if (!c.informational) all = all && c.passed;
        json cj;
        cj["name"] = c.name;
        cj["passed"] = c.passed;
        cj["informational"] = c.informational;
        cj["value"] = c.value;
        cj["limit"] = std::isfinite(c.limit) ? json(c.limit) : json(nullptr);
        cj["detail"] = c.detail;
        arr.push_back(cj);
    }
    json j;
    j["suite"] = suite;
    j["passed"] = all;
    j["checks"] = arr;
    return j;
}

struct OracleFixture {
    EncoderParams encoder;
    std::vector<TokenSequence> corpus;  // 3 sentences, n = 6
};

OracleFixture make_oracle_fixture(std::uint64_t seed) {
    EncoderConfig cfg;
    cfg.vocab_size = 32;
    cfg.max_seq_len = 8;
    cfg.num_layers = 1;
    cfg.hidden = 16;
    cfg.heads = 2;
    cfg.ffn_multiplier = 2;
    std::mt19937_64 init_rng = make_stream(seed, "oracle-init");
    OracleFixture f{EncoderParams::init(cfg, init_rng), {}};
    std::mt19937_64 rng = make_stream(seed, "oracle-corpus");
    for (int i = 0; i < 3; ++i) {
        std::vector<int> toks;
        for (int j = 0; j < 6; ++j) toks.push_back(Vocabulary::kNumReserved + uniform_below(rng, cfg.vocab_size - Vocabulary::kNumReserved));
        f.corpus.emplace_back(std::move(toks));
    }
    return f;
}

std::vector<OracleCheck> oracle_decomposition(std::uint64_t seed) {
    OracleFixture f = make_oracle_fixture(seed);
    std::vector<OracleCheck> checks;
    VarianceReport r = exact_variance_decomposition(f.corpus, f.encoder, 2);
    checks.push_back({"decomposition_residual_relative", std::abs(r.residual) <= 1e-10 * r.total, false,
                      std::abs(r.residual) / r.total, 1e-10, "law of total variance identity by full enumeration"});
    VarianceReport single = exact_variance_decomposition({f.corpus[0]}, f.encoder, 2);
    checks.push_back({"single_sentence_zero_sentence_term", single.sentence_term == 0.0, false, single.sentence_term, 0.0,
                      "degenerate outer distribution"});
    VarianceReport all_masked = exact_variance_decomposition(f.corpus, f.encoder, 6);
    checks.push_back({"k_equals_n_zero_mask_term", all_masked.mask_term == 0.0, false, all_masked.mask_term, 0.0,
                      "deterministic mask"});
    return checks;
}

std::vector<OracleCheck> oracle_unbiasedness(std::uint64_t seed) {
    OracleFixture f = make_oracle_fixture(seed);
    std::vector<OracleCheck> checks;
    std::mt19937_64 rng = make_stream(seed, "oracle-proposals");
    SubsetValueTable table = subset_gradient_table(f.encoder, f.corpus[0], 2);
    double worst = 0.0;
    for (int i = 0; i < 10; ++i)
        worst = std::max(worst, importance_estimator_audit(table, random_simplex_point(6, rng)).max_abs_deviation);
    checks.push_back({"unclipped_estimator_unbiased", worst <= 1e-10, false, worst, 1e-10,
                      "max coordinate deviation across 10 random positive proposals"});
    std::vector<double> skewed = {0.55, 0.2, 0.1, 0.06, 0.05, 0.04};
    const double clipped_dev = importance_estimator_audit(table, skewed, true, 0.2).max_abs_deviation;
    checks.push_back({"clipped_estimator_bias", clipped_dev > 1e-10, true, clipped_dev, std::numeric_limits<double>::quiet_NaN(),
                      "expected bias of ratio clipping under a skewed proposal (informational)"});
    return checks;
}

std::vector<OracleCheck> oracle_optimality(std::uint64_t seed) {
    OracleFixture f = make_oracle_fixture(seed);
    std::vector<OracleCheck> checks;
    std::mt19937_64 rng = make_stream(seed, "oracle-dirichlet");

    std::vector<double> values;
    for (int i = 0; i < 15; ++i) values.push_back(0.3 + 0.21 * i);
    SubsetValueTable toy = scalar_toy_table(6, 2, values);
    const double toy_var = proposal_variance_over_subsets(toy, optimal_subset_proposal(toy.norms));
    checks.push_back({"scalar_toy_zero_variance", toy_var <= 1e-20, false, toy_var, 1e-20,
                      "positive scalar values: weighted draws all equal the mean"});

    SubsetValueTable table = subset_gradient_table(f.encoder, f.corpus[0], 2);
    std::vector<double> opt = optimal_subset_proposal(table.norms);
    const double v_opt = proposal_variance_over_subsets(table, opt);
    const double v_uni = proposal_variance_over_subsets(table, std::vector<double>(table.values.size(), 1.0 / static_cast<double>(table.count())));
    checks.push_back({"optimal_beats_uniform", v_opt <= v_uni + 1e-8, false, v_opt - v_uni, 1e-8, "gradient-norm proposal vs uniform"});
    bool beats_all = true;
    double worst_gap = 0.0;
    for (int i = 0; i < 20; ++i) {
        const double v = proposal_variance_over_subsets(table, random_simplex_point(static_cast<int>(table.count()), rng));
        beats_all = beats_all && v_opt <= v + 1e-8;
        worst_gap = std::max(worst_gap, v_opt - v);
    }
    checks.push_back({"optimal_beats_dirichlet_20", beats_all, false, worst_gap, 1e-8, "20 random Dirichlet subset proposals"});
    return checks;
}

std::vector<OracleCheck> oracle_correlation(std::uint64_t seed) {
    std::vector<OracleCheck> checks;
    std::vector<double> xs, ys;
    std::mt19937_64 rng = make_stream(seed, "oracle-corr");
    for (int i = 0; i < 64; ++i) {
        const double v = uniform01(rng) * 3.0;
        xs.push_back(v);
        ys.push_back(2.5 * v);
    }
    const double rho = pearson(xs, ys);
    checks.push_back({"proportional_pairs_pearson_one", std::abs(rho - 1.0) <= 1e-12, false, rho, 1e-12,
                      "perfectly proportional synthetic pairs"});

    OracleFixture f = make_oracle_fixture(seed);
    CorrelationReport cr = loss_norm_correlation(f.corpus, f.encoder, 10);
    checks.push_back({"untrained_encoder_correlation", true, true, cr.pearson, std::numeric_limits<double>::quiet_NaN(),
                      "diagnostic only: Pearson at random init over " + std::to_string(cr.pairs) + " positions"});
    return checks;
}

int cmd_oracle(const std::string& suite, std::uint64_t seed, const std::string& out_path) {
    std::vector<OracleCheck> checks;
    if (suite == "decomposition")
        checks = oracle_decomposition(seed);
    else if (suite == "unbiasedness")
        checks = oracle_unbiasedness(seed);
    else if (suite == "optimality")
        checks = oracle_optimality(seed);
    else if (suite == "correlation")
        checks = oracle_correlation(seed);
    else
        throw config_error("suite", "must be one of decomposition|unbiasedness|optimality|correlation");

    const json j = checks_to_json(suite, checks);
    for (const OracleCheck& c : checks)
        std::cout << (c.passed ? "[PASS] " : (c.informational ? "[INFO] " : "[FAIL] ")) << suite << "/" << c.name
                  << " value=" << c.value << (std::isfinite(c.limit) ? " limit=" + std::to_string(c.limit) : "") << "\n";
    if (!out_path.empty()) write_text_file(out_path, j.dump(2) + "\n");
    return j["passed"].get<bool>() ? kExitOk : kExitCheckFailed;
}

}  // namespace

int main(int argc, char** argv) {
    pin_blas_single_thread();
    CLI::App app{"variance-reduced MLM pretraining lab"};
    app.require_subcommand(1);

    CommonOpts train_opts;
    std::string train_out = "run";
    bool train_baseline = false;
    std::string train_resume;
    CLI::App* train_cmd = app.add_subcommand("train", "train encoder + MAP-Net (Algorithm 1)");
    add_common(train_cmd, train_opts);
    train_cmd->add_option("--out", train_out, "output directory");
    train_cmd->add_flag("--baseline-uniform", train_baseline, "pin explore_p to 1.0 (plain uniform masking)");
    train_cmd->add_option("--resume", train_resume, "resume from a train-state checkpoint");

    CommonOpts audit_opts;
    std::string audit_checkpoint, audit_mode = "mc", audit_out;
    int audit_k = 0, audit_sentences = 32;
    long audit_samples = 64;
    CLI::App* audit_cmd = app.add_subcommand("audit-variance", "variance decomposition: uniform vs MAP-Net vs optimal");
    add_common(audit_cmd, audit_opts);
    audit_cmd->add_option("--checkpoint", audit_checkpoint, "model checkpoint (.mvar)")->required();
    audit_cmd->add_option("--mode", audit_mode, "exact | mc");
    audit_cmd->add_option("--k", audit_k, "masked positions per sentence (0 = from mask_rate; exact mode requires it)");
    audit_cmd->add_option("--samples", audit_samples, "mask samples per sentence (mc mode)");
    audit_cmd->add_option("--sentences", audit_sentences, "number of audit sentences");
    audit_cmd->add_option("--out", audit_out, "write the report JSON here instead of stdout");

    CommonOpts sample_opts;
    std::string sample_checkpoint, sample_out;
    int sample_count = 16;
    CLI::App* sample_cmd = app.add_subcommand("sample-masks", "emit sampled MaskPlans as JSON lines");
    add_common(sample_cmd, sample_opts);
    sample_cmd->add_option("--checkpoint", sample_checkpoint, "model checkpoint (.mvar)")->required();
    sample_cmd->add_option("--count", sample_count, "number of sentences to sample");
    sample_cmd->add_option("--out", sample_out, "write JSONL here instead of stdout");

    CommonOpts eval_opts;
    std::string eval_checkpoint;
    CLI::App* eval_cmd = app.add_subcommand("eval", "held-out MLM loss of a checkpoint");
    add_common(eval_cmd, eval_opts);
    eval_cmd->add_option("--checkpoint", eval_checkpoint, "model checkpoint (.mvar)")->required();

    std::string oracle_suite, oracle_out;
    std::uint64_t oracle_seed = 1;
    CLI::App* oracle_cmd = app.add_subcommand("oracle", "standalone theorem checks on built-in fixtures");
    oracle_cmd->add_option("suite", oracle_suite, "decomposition | unbiasedness | optimality | correlation")->required();
    oracle_cmd->add_option("--seed", oracle_seed, "fixture seed");
    oracle_cmd->add_option("--out", oracle_out, "write results JSON here");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitConfigOrIo;
    }

    try {
        if (train_cmd->parsed()) return cmd_train(train_opts, train_out, train_baseline, train_resume);
        if (audit_cmd->parsed())
            return cmd_audit_variance(audit_opts, audit_checkpoint, audit_mode, audit_k, audit_samples, audit_sentences,
                                      audit_out);
        if (sample_cmd->parsed()) return cmd_sample_masks(sample_opts, sample_checkpoint, sample_count, sample_out);
        if (eval_cmd->parsed()) return cmd_eval(eval_opts, eval_checkpoint);
        if (oracle_cmd->parsed()) return cmd_oracle(oracle_suite, oracle_seed, oracle_out);
    } catch (const config_error& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfigOrIo;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitConfigOrIo;
    }
    return kExitConfigOrIo;
}
