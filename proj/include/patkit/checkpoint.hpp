#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "patkit/model.hpp"

namespace patkit {

// Checkpoint container, versioned by a leading magic string:
//   "PATKIT1\n"
//   u64  manifest byte length
//   UTF-8 manifest ("key = value" lines: config, epoch/step/tau/rng state,
//                   tensor directory)
//   per tensor: u32 name length, name, u32 rank, u32 dims[rank],
//               little-endian f32 values
// Integers and floats are written in host byte order, which this project
// requires to be little-endian.

namespace detail {

inline void write_u32(std::ostream& os, uint32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); }
inline void write_u64(std::ostream& os, uint64_t v) { os.write(reinterpret_cast<const char*>(&v), 8); }

inline uint32_t read_u32(std::istream& is, const std::string& path) {
    uint32_t v = 0;
    if (!is.read(reinterpret_cast<char*>(&v), 4)) throw ParseError(path + ": truncated checkpoint");
    return v;
}

inline uint64_t read_u64(std::istream& is, const std::string& path) {
    uint64_t v = 0;
    if (!is.read(reinterpret_cast<char*>(&v), 8)) throw ParseError(path + ": truncated checkpoint");
    return v;
}

template <typename T>
void write_tensor_blob(std::ostream& os, const std::string& name, const Shape& shape,
                       const std::vector<T>& values) {
    write_u32(os, static_cast<uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_u32(os, static_cast<uint32_t>(shape.size()));
    for (int d : shape) write_u32(os, static_cast<uint32_t>(d));
    std::vector<float> f32(values.size());
    for (size_t i = 0; i < values.size(); ++i) f32[i] = static_cast<float>(values[i]);
    os.write(reinterpret_cast<const char*>(f32.data()),
             static_cast<std::streamsize>(f32.size() * sizeof(float)));
}

struct TensorBlob {
    Shape shape;
    std::vector<float> values;
};

}  // namespace detail

inline constexpr const char* kCheckpointMagic = "PATKIT1\n";

template <typename T>
void save_checkpoint(const std::string& path, const PatModel<T>& model, const TrainState& state) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw Error("cannot write checkpoint: " + path);
    KvConfig manifest = model.cfg.to_kv();
    manifest.set_int("state.epoch", state.epoch);
    manifest.set_int("state.step", state.step);
    manifest.set_double("state.tau", state.tau);
    manifest.set_int("state.rng", static_cast<long long>(state.rng_state));
    manifest.set_int("fps_start", model.fps_start_index);
    const auto& params = model.registry.params();
    manifest.set_int("tensor_count", static_cast<long long>(params.size() * 3));
    int ti = 0;
    for (const auto* p : params) {
        char key[32];
        std::snprintf(key, sizeof(key), "tensor.%04d", ti++);
        manifest.set(key, p->name);
        std::snprintf(key, sizeof(key), "tensor.%04d", ti++);
        manifest.set(key, "opt.m1." + p->name);
        std::snprintf(key, sizeof(key), "tensor.%04d", ti++);
        manifest.set(key, "opt.m2." + p->name);
    }
    const std::string text = manifest.serialize();
    os.write(kCheckpointMagic, 8);
    detail::write_u64(os, text.size());
    os.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto* p : params) {
        detail::write_tensor_blob(os, p->name, p->shape, p->value);
        std::vector<T> m1 = p->m1.empty() ? std::vector<T>(p->numel(), T(0)) : p->m1;
        std::vector<T> m2 = p->m2.empty() ? std::vector<T>(p->numel(), T(0)) : p->m2;
        detail::write_tensor_blob(os, "opt.m1." + p->name, p->shape, m1);
        detail::write_tensor_blob(os, "opt.m2." + p->name, p->shape, m2);
    }
    if (!os) throw Error("write failure on checkpoint: " + path);
}

struct CheckpointFile {
    KvConfig manifest;
    std::map<std::string, detail::TensorBlob> tensors;
};

inline CheckpointFile read_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ParseError("cannot open checkpoint: " + path);
    char magic[8];
    if (!is.read(magic, 8) || std::memcmp(magic, kCheckpointMagic, 8) != 0)
        throw ParseError(path + ": not a PATKIT1 checkpoint");
    const uint64_t mlen = detail::read_u64(is, path);
    std::string text(mlen, '\0');
    if (!is.read(text.data(), static_cast<std::streamsize>(mlen)))
        throw ParseError(path + ": truncated manifest");
    CheckpointFile ck;
    ck.manifest = KvConfig::parse(text, path);
    while (true) {
        uint32_t nlen = 0;
        if (!is.read(reinterpret_cast<char*>(&nlen), 4)) break;  // clean EOF
        std::string name(nlen, '\0');
        if (!is.read(name.data(), nlen)) throw ParseError(path + ": truncated tensor name");
        detail::TensorBlob blob;
        const uint32_t rank = detail::read_u32(is, path);
        size_t numel = 1;
        for (uint32_t d = 0; d < rank; ++d) {
            blob.shape.push_back(static_cast<int>(detail::read_u32(is, path)));
            numel *= static_cast<size_t>(blob.shape.back());
        }
        blob.values.resize(numel);
        if (!is.read(reinterpret_cast<char*>(blob.values.data()),
                     static_cast<std::streamsize>(numel * sizeof(float))))
            throw ParseError(path + ": truncated tensor data for '" + name + "'");
        ck.tensors.emplace(std::move(name), std::move(blob));
    }
    return ck;
}

// Restore parameters and optimizer state into a model built from the same
// config. Name or shape mismatches are errors, not warnings.
template <typename T>
TrainState load_checkpoint(const std::string& path, PatModel<T>& model) {
    CheckpointFile ck = read_checkpoint(path);
    const std::string want = model.cfg.to_kv().serialize();
    PATConfig stored = PATConfig::from_kv(ck.manifest);
    if (stored.to_kv().serialize() != want)
        throw ConfigError(path + ": checkpoint config does not match the model config");
    for (auto* p : model.registry.params()) {
        auto it = ck.tensors.find(p->name);
        if (it == ck.tensors.end()) throw ParseError(path + ": missing tensor '" + p->name + "'");
        if (it->second.shape != p->shape)
            throw ParseError(path + ": tensor '" + p->name + "' has shape " +
                             shape_str(it->second.shape) + ", expected " + shape_str(p->shape));
        for (size_t i = 0; i < p->numel(); ++i) p->value[i] = static_cast<T>(it->second.values[i]);
        auto m1 = ck.tensors.find("opt.m1." + p->name);
        auto m2 = ck.tensors.find("opt.m2." + p->name);
        if (m1 != ck.tensors.end()) {
            p->m1.resize(p->numel());
            for (size_t i = 0; i < p->numel(); ++i) p->m1[i] = static_cast<T>(m1->second.values[i]);
        }
        if (m2 != ck.tensors.end()) {
            p->m2.resize(p->numel());
            for (size_t i = 0; i < p->numel(); ++i) p->m2[i] = static_cast<T>(m2->second.values[i]);
        }
    }
    model.fps_start_index = static_cast<int>(ck.manifest.get_int("fps_start"));
    TrainState state;
    state.epoch = static_cast<int>(ck.manifest.get_int("state.epoch"));
    state.step = ck.manifest.get_int("state.step");
    state.tau = ck.manifest.get_double("state.tau");
    state.rng_state = static_cast<uint64_t>(ck.manifest.get_int("state.rng"));
    return state;
}

// Build a fresh model from a checkpoint's stored config, then restore into it.
template <typename T>
std::pair<std::unique_ptr<PatModel<T>>, TrainState> open_checkpoint(const std::string& path) {
    CheckpointFile ck = read_checkpoint(path);
    PATConfig cfg = PATConfig::from_kv(ck.manifest);
    auto model = std::make_unique<PatModel<T>>(cfg);
    TrainState state = load_checkpoint(path, *model);
    return {std::move(model), state};
}

}  // namespace patkit
