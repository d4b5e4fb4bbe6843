#pragma once

// The MVAR checkpoint container: magic bytes "MVAR", a format version, a
// flat key=value config block, then named tensors as (name length, name,
// shape rank, dims, raw little-endian float64), then named byte blobs
// (step counter, serialized RNG streams). The shared token embedding is
// stored exactly once and flagged in the header. Round-trips are
// bit-exact.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "maskvar/config.hpp"
#include "maskvar/mask_proposal.hpp"
#include "maskvar/trainer.hpp"

namespace maskvar {

static_assert(std::endian::native == std::endian::little, "checkpoint writer assumes a little-endian host");

struct CheckpointData {
    KvConfig header;
    std::vector<std::pair<std::string, Tensor>> tensors;
    std::vector<std::pair<std::string, std::string>> blobs;

    const Tensor* find_tensor(const std::string& name) const {
        for (const auto& [n, t] : tensors)
            if (n == name) return &t;
        return nullptr;
    }

    const std::string* find_blob(const std::string& name) const {
        for (const auto& [n, b] : blobs)
            if (n == name) return &b;
        return nullptr;
    }
};

namespace detail {

inline void write_u32(std::ostream& os, std::uint32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); }
inline void write_u64(std::ostream& os, std::uint64_t v) { os.write(reinterpret_cast<const char*>(&v), 8); }
inline void write_str(std::ostream& os, const std::string& s) {
    write_u32(os, static_cast<std::uint32_t>(s.size()));
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::uint32_t read_u32(std::istream& is) {
    std::uint32_t v = 0;
    is.read(reinterpret_cast<char*>(&v), 4);
    return v;
}
inline std::uint64_t read_u64(std::istream& is) {
    std::uint64_t v = 0;
    is.read(reinterpret_cast<char*>(&v), 8);
    return v;
}
inline std::string read_str(std::istream& is) {
    const std::uint32_t n = read_u32(is);
    std::string s(n, '\0');
    is.read(s.data(), n);
    return s;
}

}  // namespace detail

constexpr std::uint32_t kCheckpointVersion = 1;

inline void write_checkpoint_file(const std::string& path, const CheckpointData& data) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write checkpoint: " + path);
    os.write("MVAR", 4);
    detail::write_u32(os, kCheckpointVersion);
    detail::write_str(os, data.header.to_text());
    detail::write_u32(os, static_cast<std::uint32_t>(data.tensors.size()));
    for (const auto& [name, t] : data.tensors) {
        detail::write_str(os, name);
        detail::write_u32(os, static_cast<std::uint32_t>(t.shape.size()));
        for (int d : t.shape) detail::write_u64(os, static_cast<std::uint64_t>(d));
        os.write(reinterpret_cast<const char*>(t.data.data()), static_cast<std::streamsize>(t.data.size() * sizeof(double)));
    }
    detail::write_u32(os, static_cast<std::uint32_t>(data.blobs.size()));
    for (const auto& [name, b] : data.blobs) {
        detail::write_str(os, name);
        detail::write_u64(os, b.size());
        os.write(b.data(), static_cast<std::streamsize>(b.size()));
    }
    if (!os) throw std::runtime_error("short write while saving checkpoint: " + path);
}

inline CheckpointData read_checkpoint_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot read checkpoint: " + path);
    char magic[4] = {};
    is.read(magic, 4);
    if (std::memcmp(magic, "MVAR", 4) != 0) throw std::runtime_error(path + ": not an MVAR checkpoint (bad magic)");
    const std::uint32_t version = detail::read_u32(is);
    if (version != kCheckpointVersion)
        throw std::runtime_error(path + ": unsupported checkpoint version " + std::to_string(version));
    CheckpointData data;
    data.header = KvConfig::parse_text(detail::read_str(is), path + " (header)");
    const std::uint32_t num_tensors = detail::read_u32(is);
    data.tensors.reserve(num_tensors);
    for (std::uint32_t i = 0; i < num_tensors; ++i) {
        std::string name = detail::read_str(is);
        const std::uint32_t rank = detail::read_u32(is);
        std::vector<int> shape(rank);
        for (std::uint32_t r = 0; r < rank; ++r) shape[r] = static_cast<int>(detail::read_u64(is));
        Tensor t(shape);
        is.read(reinterpret_cast<char*>(t.data.data()), static_cast<std::streamsize>(t.data.size() * sizeof(double)));
        data.tensors.emplace_back(std::move(name), std::move(t));
    }
    const std::uint32_t num_blobs = detail::read_u32(is);
    for (std::uint32_t i = 0; i < num_blobs; ++i) {
        std::string name = detail::read_str(is);
        const std::uint64_t size = detail::read_u64(is);
        std::string blob(size, '\0');
        is.read(blob.data(), static_cast<std::streamsize>(size));
        data.blobs.emplace_back(std::move(name), std::move(blob));
    }
    if (!is) throw std::runtime_error(path + ": truncated checkpoint");
    return data;
}

inline void encoder_config_to_header(const EncoderConfig& cfg, KvConfig& h) {
    h.set_long("vocab_size", cfg.vocab_size);
    h.set_long("max_seq_len", cfg.max_seq_len);
    h.set_long("layers", cfg.num_layers);
    h.set_long("hidden", cfg.hidden);
    h.set_long("heads", cfg.heads);
    h.set_long("ffn_multiplier", cfg.ffn_multiplier);
    h.set_bool("sum_loss", cfg.sum_loss);
}

inline EncoderConfig encoder_config_from_header(const KvConfig& h) {
    EncoderConfig cfg;
    cfg.vocab_size = h.get_int("vocab_size", cfg.vocab_size);
    cfg.max_seq_len = h.get_int("max_seq_len", cfg.max_seq_len);
    cfg.num_layers = h.get_int("layers", cfg.num_layers);
    cfg.hidden = h.get_int("hidden", cfg.hidden);
    cfg.heads = h.get_int("heads", cfg.heads);
    cfg.ffn_multiplier = h.get_int("ffn_multiplier", cfg.ffn_multiplier);
    cfg.sum_loss = h.get_bool("sum_loss", cfg.sum_loss);
    cfg.validate();
    return cfg;
}

namespace detail {

inline void append_named(std::vector<std::pair<std::string, Tensor>>& out,
                         const std::vector<std::pair<std::string, Tensor*>>& named) {
    for (const auto& [name, t] : named) out.emplace_back(name, *t);
}

inline void append_moments(std::vector<std::pair<std::string, Tensor>>& out, const AdamMoments& mo,
                           const std::vector<std::pair<std::string, Tensor*>>& named) {
    for (std::size_t i = 0; i < named.size(); ++i) {
        out.emplace_back("opt/m/" + named[i].first, mo.m[i]);
        out.emplace_back("opt/v/" + named[i].first, mo.v[i]);
    }
}

inline void restore_named(const CheckpointData& data, const std::vector<std::pair<std::string, Tensor*>>& named) {
    for (const auto& [name, dst] : named) {
        const Tensor* src = data.find_tensor(name);
        if (!src) throw std::runtime_error("checkpoint is missing tensor '" + name + "'");
        if (src->shape != dst->shape)
            throw std::runtime_error("checkpoint tensor '" + name + "' has shape " + shape_str(src->shape) +
                                     ", expected " + shape_str(dst->shape));
        *dst = *src;
    }
}

inline void restore_moments(const CheckpointData& data, AdamMoments& mo,
                            const std::vector<std::pair<std::string, Tensor*>>& named) {
    for (std::size_t i = 0; i < named.size(); ++i) {
        const Tensor* m = data.find_tensor("opt/m/" + named[i].first);
        const Tensor* v = data.find_tensor("opt/v/" + named[i].first);
        if (!m || !v) throw std::runtime_error("checkpoint is missing optimizer moments for '" + named[i].first + "'");
        mo.m[i] = *m;
        mo.v[i] = *v;
    }
}

}  // namespace detail

// Model-only checkpoint: encoder + MAP-Net parameters, shared embedding
// stored once under "shared/token_embedding".
inline void save_model(const std::string& path, EncoderParams& encoder, MapNetParams& mapnet) {
    CheckpointData data;
    data.header.set("kind", "model");
    data.header.set_bool("shared_embedding", true);
    encoder_config_to_header(encoder.config, data.header);
    detail::append_named(data.tensors, encoder.named_parameters());
    detail::append_named(data.tensors, mapnet.named_parameters(/*include_shared=*/false));
    write_checkpoint_file(path, data);
}

struct LoadedModel {
    EncoderParams encoder;
    MapNetParams mapnet;
};

inline LoadedModel from_checkpoint_skeleton(const CheckpointData& data) {
    const EncoderConfig cfg = encoder_config_from_header(data.header);
    std::mt19937_64 scratch(0);  // shapes only; every tensor is overwritten
    LoadedModel m;
    m.encoder = EncoderParams::init(cfg, scratch);
    m.mapnet = MapNetParams::init(MapNetConfig::from_encoder(cfg), m.encoder.token_embedding, scratch);
    detail::restore_named(data, m.encoder.named_parameters());
    detail::restore_named(data, m.mapnet.named_parameters(/*include_shared=*/false));
    return m;
}

inline LoadedModel load_model(const std::string& path) { return from_checkpoint_skeleton(read_checkpoint_file(path)); }

// Full training-state checkpoint: parameters, Adam moments, step counter
// and the serialized RNG streams. Resuming from it reproduces the
// uninterrupted run bitwise.
inline void save_train_state(const std::string& path, TrainState& state) {
    CheckpointData data;
    data.header.set("kind", "train_state");
    data.header.set_bool("shared_embedding", true);
    encoder_config_to_header(state.encoder.config, data.header);
    detail::append_named(data.tensors, state.encoder.named_parameters());
    detail::append_named(data.tensors, state.mapnet.named_parameters(false));
    std::vector<std::pair<std::string, Tensor*>> shared_named = {{"shared/token_embedding", state.encoder.token_embedding.get()}};
    detail::append_moments(data.tensors, state.shared_moments, shared_named);
    auto enc_named = state.encoder.named_parameters();
    enc_named.erase(enc_named.begin());
    detail::append_moments(data.tensors, state.encoder_moments, enc_named);
    detail::append_moments(data.tensors, state.mapnet_moments, state.mapnet.named_parameters(false));
    data.blobs.emplace_back("step", std::to_string(state.step));
    data.blobs.emplace_back("rng/mask", rng_state_to_string(state.mask_rng));
    data.blobs.emplace_back("rng/corruption", rng_state_to_string(state.corruption_rng));
    data.blobs.emplace_back("rng/dropout", rng_state_to_string(state.dropout_rng));
    write_checkpoint_file(path, data);
}

inline TrainState load_train_state(const std::string& path) {
    CheckpointData data = read_checkpoint_file(path);
    if (data.header.get_string("kind", "") != "train_state")
        throw std::runtime_error(path + ": not a train-state checkpoint");
    const EncoderConfig cfg = encoder_config_from_header(data.header);
    TrainState state = TrainState::init(cfg, 0);
    detail::restore_named(data, state.encoder.named_parameters());
    detail::restore_named(data, state.mapnet.named_parameters(false));
    std::vector<std::pair<std::string, Tensor*>> shared_named = {{"shared/token_embedding", state.encoder.token_embedding.get()}};
    detail::restore_moments(data, state.shared_moments, shared_named);
    auto enc_named = state.encoder.named_parameters();
    enc_named.erase(enc_named.begin());
    detail::restore_moments(data, state.encoder_moments, enc_named);
    detail::restore_moments(data, state.mapnet_moments, state.mapnet.named_parameters(false));
    const std::string* step = data.find_blob("step");
    const std::string* rm = data.find_blob("rng/mask");
    const std::string* rc = data.find_blob("rng/corruption");
    const std::string* rd = data.find_blob("rng/dropout");
    if (!step || !rm || !rc || !rd) throw std::runtime_error(path + ": train-state checkpoint is missing state blobs");
    state.step = std::stol(*step);
    state.mask_rng = rng_state_from_string(*rm);
    state.corruption_rng = rng_state_from_string(*rc);
    state.dropout_rng = rng_state_from_string(*rd);
    return state;
}

}  // namespace maskvar
