#pragma once

// Binds the flat key=value config to the typed configs of every module
// and materializes the data for a run (synthetic generation or file
// loading, train/eval split). Unknown keys are an error so typos fail
// loudly with the field name.

#include <set>
#include <string>
#include <vector>

#include "maskvar/config.hpp"
#include "maskvar/corpus.hpp"
#include "maskvar/encoder.hpp"
#include "maskvar/trainer.hpp"

namespace maskvar {

struct RunConfig {
    EncoderConfig encoder;
    TrainConfig train;
    SyntheticGrammar grammar;
    int corpus_sentences = 2048;
    int eval_sentences = 256;
    std::string corpus_path;  // empty = synthetic
    std::string vocab_path;

    static const std::set<std::string>& known_keys() {
        static const std::set<std::string> keys = {
            "hidden", "heads", "layers", "ffn_multiplier", "max_seq_len", "sum_loss",
            "grammar.num_function", "grammar.num_topics", "grammar.content_per_topic", "grammar.num_noise",
            "grammar.function_weight", "grammar.content_weight", "grammar.noise_weight",
            "grammar.min_len", "grammar.max_len",
            "corpus_sentences", "eval_sentences", "corpus_path", "vocab_path",
            "batch_size", "total_steps", "peak_lr", "warmup_steps",
            "adam_beta1", "adam_beta2", "adam_eps", "weight_decay",
            "dropout", "lambda", "clip_epsilon", "mask_rate",
            "explore_start", "explore_end", "explore_end_step",
            "seed", "eval_interval", "checkpoint_interval", "eval_threshold", "stop_at_threshold", "max_steps",
            "threads", "baseline_uniform", "lambda_on_encoder", "freeze_shared_embedding_mapnet",
            "include_uniform_in_mapnet", "sample_with_replacement",
        };
        return keys;
    }

    static RunConfig from_kv(const KvConfig& kv) {
        for (const std::string& key : kv.keys())
            if (!known_keys().count(key)) throw config_error(key, "unknown key");

        RunConfig rc;
        rc.grammar.num_function = kv.get_int("grammar.num_function", rc.grammar.num_function);
        rc.grammar.num_topics = kv.get_int("grammar.num_topics", rc.grammar.num_topics);
        rc.grammar.content_per_topic = kv.get_int("grammar.content_per_topic", rc.grammar.content_per_topic);
        rc.grammar.num_noise = kv.get_int("grammar.num_noise", rc.grammar.num_noise);
        rc.grammar.function_weight = kv.get_double("grammar.function_weight", rc.grammar.function_weight);
        rc.grammar.content_weight = kv.get_double("grammar.content_weight", rc.grammar.content_weight);
        rc.grammar.noise_weight = kv.get_double("grammar.noise_weight", rc.grammar.noise_weight);
        rc.grammar.min_len = kv.get_int("grammar.min_len", rc.grammar.min_len);
        rc.grammar.max_len = kv.get_int("grammar.max_len", rc.grammar.max_len);
        rc.corpus_sentences = kv.get_int("corpus_sentences", rc.corpus_sentences);
        rc.eval_sentences = kv.get_int("eval_sentences", rc.eval_sentences);
        rc.corpus_path = kv.get_string("corpus_path", "");
        rc.vocab_path = kv.get_string("vocab_path", "");

        rc.encoder.vocab_size = rc.grammar.vocab_size();  // overwritten when loading a vocab file
        rc.encoder.hidden = kv.get_int("hidden", rc.encoder.hidden);
        rc.encoder.heads = kv.get_int("heads", rc.encoder.heads);
        rc.encoder.num_layers = kv.get_int("layers", rc.encoder.num_layers);
        rc.encoder.ffn_multiplier = kv.get_int("ffn_multiplier", rc.encoder.ffn_multiplier);
        rc.encoder.max_seq_len = kv.get_int("max_seq_len", rc.encoder.max_seq_len);
        rc.encoder.sum_loss = kv.get_bool("sum_loss", rc.encoder.sum_loss);

        TrainConfig& t = rc.train;
        t.batch_size = kv.get_int("batch_size", t.batch_size);
        t.total_steps = kv.get_long("total_steps", t.total_steps);
        t.peak_lr = kv.get_double("peak_lr", t.peak_lr);
        t.warmup_steps = kv.get_long("warmup_steps", t.warmup_steps);
        t.adam_beta1 = kv.get_double("adam_beta1", t.adam_beta1);
        t.adam_beta2 = kv.get_double("adam_beta2", t.adam_beta2);
        t.adam_eps = kv.get_double("adam_eps", t.adam_eps);
        t.weight_decay = kv.get_double("weight_decay", t.weight_decay);
        t.dropout = kv.get_double("dropout", t.dropout);
        t.lambda_mapnet = kv.get_double("lambda", t.lambda_mapnet);
        t.clip_epsilon = kv.get_double("clip_epsilon", t.clip_epsilon);
        t.mask_rate = kv.get_double("mask_rate", t.mask_rate);
        t.seed = kv.get_u64("seed", t.seed);
        t.eval_interval = kv.get_long("eval_interval", t.eval_interval);
        t.checkpoint_interval = kv.get_long("checkpoint_interval", t.checkpoint_interval);
        if (kv.has("eval_threshold")) t.eval_threshold = kv.get_double("eval_threshold", 0.0);
        t.stop_at_threshold = kv.get_bool("stop_at_threshold", t.stop_at_threshold);
        t.max_steps = kv.get_long("max_steps", t.max_steps);
        t.threads = kv.get_int("threads", t.threads);
        t.baseline_uniform = kv.get_bool("baseline_uniform", t.baseline_uniform);
        t.lambda_on_encoder = kv.get_bool("lambda_on_encoder", t.lambda_on_encoder);
        t.freeze_shared_embedding_mapnet = kv.get_bool("freeze_shared_embedding_mapnet", t.freeze_shared_embedding_mapnet);
        t.include_uniform_in_mapnet = kv.get_bool("include_uniform_in_mapnet", t.include_uniform_in_mapnet);
        t.sample_with_replacement = kv.get_bool("sample_with_replacement", t.sample_with_replacement);

        t.schedule.start_p = kv.get_double("explore_start", t.schedule.start_p);
        t.schedule.end_p = kv.get_double("explore_end", t.schedule.end_p);
        const long end_step = kv.get_long("explore_end_step", 0);
        t.schedule.end_step = end_step > 0 ? end_step : std::max<long>(t.total_steps, 1);

        rc.validate();
        return rc;
    }

    void validate() const {
        grammar.validate();
        encoder.validate();
        if (train.total_steps > 0) train.validate();
        if (corpus_sentences < 1) throw config_error("corpus_sentences", "must be >= 1");
        if (eval_sentences < 0) throw config_error("eval_sentences", "must be >= 0");
        if (grammar.max_len > encoder.max_seq_len)
            throw config_error("grammar.max_len", "exceeds encoder max_seq_len " + std::to_string(encoder.max_seq_len));
        if (!corpus_path.empty() && vocab_path.empty())
            throw config_error("vocab_path", "required when corpus_path is given");
    }
};

struct RunData {
    Vocabulary vocab;
    std::vector<TokenSequence> train_corpus;
    std::vector<TokenSequence> eval_corpus;
    // synthetic runs keep the difficulty diagnostics
    std::vector<std::vector<PositionClass>> train_labels;
    std::vector<int> train_topics;
    bool synthetic = true;
};

// Synthetic corpora derive from (seed, "corpus"), so a config + seed
// pins the data bit-exactly. File corpora split eval off the tail.
inline RunData materialize_run_data(const RunConfig& rc) {
    RunData data;
    if (rc.corpus_path.empty()) {
        data.vocab = rc.grammar.build_vocabulary();
        std::mt19937_64 rng = make_stream(rc.train.seed, "corpus");
        SyntheticCorpus train_part = generate_corpus(rc.grammar, rc.corpus_sentences, rng);
        SyntheticCorpus eval_part = generate_corpus(rc.grammar, rc.eval_sentences, rng);
        data.train_corpus = std::move(train_part.sentences);
        data.train_labels = std::move(train_part.labels);
        data.train_topics = std::move(train_part.topics);
        data.eval_corpus = std::move(eval_part.sentences);
    } else {
        data.synthetic = false;
        data.vocab = Vocabulary::load(rc.vocab_path);
        std::vector<TokenSequence> all = load_corpus(rc.corpus_path, data.vocab);
        const int eval_n = std::min<int>(rc.eval_sentences, static_cast<int>(all.size()) / 2);
        data.train_corpus.assign(all.begin(), all.end() - eval_n);
        data.eval_corpus.assign(all.end() - eval_n, all.end());
        for (const TokenSequence& s : all)
            if (s.length > rc.encoder.max_seq_len)
                throw config_error("corpus_path", "sentence of length " + std::to_string(s.length) +
                                                      " exceeds max_seq_len " + std::to_string(rc.encoder.max_seq_len));
    }
    return data;
}

// The vocabulary actually in force for a run (file vocab can differ in
// size from the grammar-derived default).
inline EncoderConfig effective_encoder_config(const RunConfig& rc, const RunData& data) {
    EncoderConfig cfg = rc.encoder;
    cfg.vocab_size = data.vocab.size();
    cfg.validate();
    return cfg;
}

}  // namespace maskvar
