#pragma once

// Vocabulary, synthetic corpus generation, and batching. The synthetic
// grammar produces sentences with heterogeneous per-position difficulty:
// FUNCTION tokens are a fixed function of the position, CONTENT tokens
// are determined by the position plus a sentence-level latent topic, and
// NOISE tokens are drawn uniformly (irreducible entropy). That spread is
// the regime where a learned mask proposal has something to exploit.

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "maskvar/rng.hpp"

namespace maskvar {

struct TokenSequence {
    std::vector<int> tokens;  // may carry [PAD] tail after batching
    int length = 0;           // true length; pads live at indices >= length

    TokenSequence() = default;
    explicit TokenSequence(std::vector<int> t) : tokens(std::move(t)), length(static_cast<int>(tokens.size())) {}
};

class Vocabulary {
public:
    static constexpr int kPad = 0;
    static constexpr int kMask = 1;
    static constexpr int kUnk = 2;
    static constexpr int kNumReserved = 3;

    Vocabulary() { add("[PAD]"); add("[MASK]"); add("[UNK]"); }

    int add(const std::string& token) {
        auto it = index_.find(token);
        if (it != index_.end()) return it->second;
        const int id = static_cast<int>(tokens_.size());
        tokens_.push_back(token);
        index_.emplace(token, id);
        return id;
    }

    int size() const { return static_cast<int>(tokens_.size()); }
    int num_regular() const { return size() - kNumReserved; }

    // Index for a token string; unknown strings map to [UNK].
    int id_of(const std::string& token) const {
        auto it = index_.find(token);
        return it == index_.end() ? kUnk : it->second;
    }

    bool contains(const std::string& token) const { return index_.count(token) != 0; }

    const std::string& token_of(int id) const {
        if (id < 0 || id >= size()) throw std::out_of_range("vocabulary: id " + std::to_string(id) + " out of range");
        return tokens_[static_cast<std::size_t>(id)];
    }

    // Corruption's random-replacement draw; never yields a reserved token.
    int random_regular_token(std::mt19937_64& rng) const {
        if (num_regular() <= 0) throw std::runtime_error("vocabulary has no regular tokens");
        return kNumReserved + uniform_below(rng, num_regular());
    }

    void save(const std::string& path) const {
        std::ofstream os(path);
        if (!os) throw std::runtime_error("cannot write vocabulary file: " + path);
        for (const auto& t : tokens_) os << t << "\n";
    }

    static Vocabulary load(const std::string& path) {
        std::ifstream is(path);
        if (!is) throw std::runtime_error("cannot read vocabulary file: " + path);
        Vocabulary v;
        std::string line;
        int lineno = 0;
        while (std::getline(is, line)) {
            ++lineno;
            if (line.empty()) continue;
            if (lineno <= kNumReserved) {
                if (line != v.tokens_[static_cast<std::size_t>(lineno - 1)])
                    throw std::runtime_error("vocabulary file " + path + " line " + std::to_string(lineno) +
                                             ": reserved token mismatch, expected " + v.tokens_[static_cast<std::size_t>(lineno - 1)]);
                continue;
            }
            v.add(line);
        }
        return v;
    }

private:
    std::vector<std::string> tokens_;
    std::unordered_map<std::string, int> index_;
};

enum class PositionClass { function_word, content_word, noise_word };

inline const char* position_class_name(PositionClass c) {
    switch (c) {
        case PositionClass::function_word: return "FUNCTION";
        case PositionClass::content_word: return "CONTENT";
        case PositionClass::noise_word: return "NOISE";
    }
    return "?";
}

struct SyntheticGrammar {
    int num_function = 16;
    int num_topics = 8;
    int content_per_topic = 12;
    int num_noise = 16;
    double function_weight = 0.5;
    double content_weight = 0.35;
    double noise_weight = 0.15;
    int min_len = 12;
    int max_len = 24;

    void validate() const {
        if (num_function < 2 || num_topics < 1 || content_per_topic < 1 || num_noise < 1)
            throw std::invalid_argument("grammar: token partition sizes must be positive");
        if (min_len < 1 || max_len < min_len) throw std::invalid_argument("grammar: bad length range");
        const double w = function_weight + content_weight + noise_weight;
        if (function_weight < 0 || content_weight < 0 || noise_weight < 0 || std::abs(w - 1.0) > 1e-9)
            throw std::invalid_argument("grammar: class weights must be nonnegative and sum to 1");
    }

    int vocab_size() const { return Vocabulary::kNumReserved + num_function + num_topics * content_per_topic + num_noise; }

    Vocabulary build_vocabulary() const {
        validate();
        Vocabulary v;
        char buf[32];
        for (int i = 0; i < num_function; ++i) {
            std::snprintf(buf, sizeof buf, "f%02d", i);
            v.add(buf);
        }
        for (int t = 0; t < num_topics; ++t)
            for (int j = 0; j < content_per_topic; ++j) {
                std::snprintf(buf, sizeof buf, "c%d_%02d", t, j);
                v.add(buf);
            }
        for (int i = 0; i < num_noise; ++i) {
            std::snprintf(buf, sizeof buf, "n%02d", i);
            v.add(buf);
        }
        return v;
    }

    int function_token(int position) const {
        // deterministic given the position: parity picks the phase,
        // the position block cycles the rest of the partition
        return Vocabulary::kNumReserved + (position % 2) + 2 * ((position / 2) % (num_function / 2));
    }

    int content_token(int topic, int position) const {
        return Vocabulary::kNumReserved + num_function + topic * content_per_topic + ((position + topic) % content_per_topic);
    }

    int noise_token(std::mt19937_64& rng) const {
        return Vocabulary::kNumReserved + num_function + num_topics * content_per_topic + uniform_below(rng, num_noise);
    }
};

struct SyntheticCorpus {
    std::vector<TokenSequence> sentences;
    std::vector<std::vector<PositionClass>> labels;  // per sentence, per position
    std::vector<int> topics;
};

inline SyntheticCorpus generate_corpus(const SyntheticGrammar& g, int num_sentences, std::mt19937_64& rng) {
    g.validate();
    SyntheticCorpus out;
    out.sentences.reserve(static_cast<std::size_t>(num_sentences));
    for (int s = 0; s < num_sentences; ++s) {
        const int n = g.min_len + uniform_below(rng, g.max_len - g.min_len + 1);
        const int topic = uniform_below(rng, g.num_topics);
        std::vector<int> toks(static_cast<std::size_t>(n));
        std::vector<PositionClass> cls(static_cast<std::size_t>(n));
        for (int i = 0; i < n; ++i) {
            const double u = uniform01(rng);
            if (u < g.function_weight) {
                toks[static_cast<std::size_t>(i)] = g.function_token(i);
                cls[static_cast<std::size_t>(i)] = PositionClass::function_word;
            } else if (u < g.function_weight + g.content_weight) {
                toks[static_cast<std::size_t>(i)] = g.content_token(topic, i);
                cls[static_cast<std::size_t>(i)] = PositionClass::content_word;
            } else {
                toks[static_cast<std::size_t>(i)] = g.noise_token(rng);
                cls[static_cast<std::size_t>(i)] = PositionClass::noise_word;
            }
        }
        out.sentences.emplace_back(std::move(toks));
        out.labels.push_back(std::move(cls));
        out.topics.push_back(topic);
    }
    return out;
}

// Plain text, one sentence per line, space-separated token strings.
inline void save_corpus(const std::vector<TokenSequence>& corpus, const Vocabulary& vocab, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot write corpus file: " + path);
    for (const auto& s : corpus) {
        for (int i = 0; i < s.length; ++i) {
            if (i) os << ' ';
            os << vocab.token_of(s.tokens[static_cast<std::size_t>(i)]);
        }
        os << '\n';
    }
}

inline std::vector<TokenSequence> load_corpus(const std::string& path, const Vocabulary& vocab) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot read corpus file: " + path);
    std::vector<TokenSequence> out;
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::istringstream ls(line);
        std::vector<int> toks;
        std::string word;
        while (ls >> word) {
            const int id = vocab.id_of(word);
            if (id == Vocabulary::kPad || id == Vocabulary::kMask)
                throw std::runtime_error("corpus file " + path + " line " + std::to_string(lineno) +
                                         ": reserved token '" + word + "' in sentence");
            toks.push_back(id);
        }
        if (toks.empty())
            throw std::runtime_error("corpus file " + path + " line " + std::to_string(lineno) + ": no tokens parsed");
        out.emplace_back(std::move(toks));
    }
    return out;
}

// Batches padded to the max in-batch length with [PAD]; the true length
// rides along so pads never reach masking or loss.
struct Batch {
    std::vector<TokenSequence> sentences;
};

inline std::vector<Batch> batch_iter(const std::vector<TokenSequence>& corpus, int batch_size, std::mt19937_64* rng) {
    if (batch_size < 1) throw std::invalid_argument("batch_iter: batch_size must be >= 1");
    std::vector<int> order(corpus.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
    if (rng) std::shuffle(order.begin(), order.end(), *rng);
    std::vector<Batch> batches;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(batch_size)) {
        const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(batch_size));
        Batch b;
        int max_len = 0;
        for (std::size_t i = start; i < end; ++i)
            max_len = std::max(max_len, corpus[static_cast<std::size_t>(order[i])].length);
        for (std::size_t i = start; i < end; ++i) {
            TokenSequence s = corpus[static_cast<std::size_t>(order[i])];
            s.tokens.resize(static_cast<std::size_t>(max_len), Vocabulary::kPad);
            b.sentences.push_back(std::move(s));
        }
        batches.push_back(std::move(b));
    }
    return batches;
}

}  // namespace maskvar
