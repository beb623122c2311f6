// Versioned binary checkpoint: magic "LASF", a u32 format version, a
// length-prefixed JSON manifest, then raw little-endian 64-bit float blocks
// (parameters, then optimizer moments). Reload followed by re-save is
// byte-identical.
#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "lasformer/common.hpp"
#include "lasformer/model.hpp"
#include "lasformer/optimizer.hpp"

namespace lasformer {

inline constexpr char kCheckpointMagic[4] = {'L', 'A', 'S', 'F'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

inline void write_u32(std::ostream& out, std::uint32_t v) {
    char buf[4];
    std::memcpy(buf, &v, 4);
    out.write(buf, 4);
}

inline void write_u64(std::ostream& out, std::uint64_t v) {
    char buf[8];
    std::memcpy(buf, &v, 8);
    out.write(buf, 8);
}

inline void write_doubles(std::ostream& out, const std::vector<double>& v) {
    out.write(reinterpret_cast<const char*>(v.data()),
              static_cast<std::streamsize>(v.size() * sizeof(double)));
}

inline std::uint32_t read_u32(std::istream& in) {
    char buf[4];
    in.read(buf, 4);
    std::uint32_t v;
    std::memcpy(&v, buf, 4);
    return v;
}

inline std::uint64_t read_u64(std::istream& in) {
    char buf[8];
    in.read(buf, 8);
    std::uint64_t v;
    std::memcpy(&v, buf, 8);
    return v;
}

inline void read_doubles(std::istream& in, std::vector<double>& v) {
    in.read(reinterpret_cast<char*>(v.data()),
            static_cast<std::streamsize>(v.size() * sizeof(double)));
}

}  // namespace detail

struct CheckpointData {
    std::string config_text;  // resolved experiment config
    long long step = 0;
};

inline void save_checkpoint(const std::string& path, const Model& model,
                            const Adam* optimizer, long long step,
                            const std::string& config_text) {
    nlohmann::ordered_json manifest;
    manifest["format_version"] = kCheckpointVersion;
    manifest["config"] = config_text;
    manifest["step"] = step;
    nlohmann::ordered_json params = nlohmann::ordered_json::array();
    for (const std::string& name : model.param_order()) {
        const Tensor& t = model.params().at(name);
        nlohmann::ordered_json p;
        p["name"] = name;
        p["shape"] = t.shape();
        params.push_back(std::move(p));
    }
    manifest["params"] = std::move(params);
    nlohmann::ordered_json states = nlohmann::ordered_json::array();
    for (const auto& [key, st] : model.sparsity_states()) {
        nlohmann::ordered_json s;
        s["kind"] = to_string(static_cast<AttnKind>(key.first));
        s["layer"] = key.second;
        s["k"] = st.k;
        s["frozen_increase"] = st.frozen_increase;
        states.push_back(std::move(s));
    }
    manifest["sparsity"] = std::move(states);
    manifest["optimizer_present"] = optimizer != nullptr;
    manifest["optimizer_steps"] = optimizer != nullptr ? optimizer->steps_taken() : 0;

    const std::string manifest_text = manifest.dump();
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open checkpoint for writing: " + path);
    out.write(kCheckpointMagic, 4);
    detail::write_u32(out, kCheckpointVersion);
    detail::write_u64(out, manifest_text.size());
    out.write(manifest_text.data(),
              static_cast<std::streamsize>(manifest_text.size()));
    for (const std::string& name : model.param_order()) {
        detail::write_doubles(out, model.params().at(name).values());
    }
    if (optimizer != nullptr) {
        for (const std::string& name : model.param_order()) {
            auto it = optimizer->moment1().find(name);
            std::vector<double> zeros;
            if (it == optimizer->moment1().end()) {
                zeros.assign(model.params().at(name).values().size(), 0.0);
                detail::write_doubles(out, zeros);
            } else {
                detail::write_doubles(out, it->second);
            }
        }
        for (const std::string& name : model.param_order()) {
            auto it = optimizer->moment2().find(name);
            std::vector<double> zeros;
            if (it == optimizer->moment2().end()) {
                zeros.assign(model.params().at(name).values().size(), 0.0);
                detail::write_doubles(out, zeros);
            } else {
                detail::write_doubles(out, it->second);
            }
        }
    }
    if (!out) throw IoError("failed writing checkpoint: " + path);
}

// Loads parameters (and optionally optimizer state) into an existing model
// built from the same config. Returns the embedded config text and step.
inline CheckpointData load_checkpoint(const std::string& path, Model& model,
                                      Adam* optimizer) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint: " + path);
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, kCheckpointMagic, 4) != 0) {
        throw IoError("not a checkpoint file (bad magic): " + path);
    }
    const std::uint32_t version = detail::read_u32(in);
    if (version != kCheckpointVersion) {
        throw IoError("unsupported checkpoint version " + std::to_string(version));
    }
    const std::uint64_t manifest_len = detail::read_u64(in);
    std::string manifest_text(manifest_len, '\0');
    in.read(manifest_text.data(), static_cast<std::streamsize>(manifest_len));
    if (!in) throw IoError("truncated checkpoint manifest: " + path);
    nlohmann::json manifest = nlohmann::json::parse(manifest_text);

    // Validate the parameter manifest matches the model exactly once each.
    const auto& params = manifest.at("params");
    if (params.size() != model.param_order().size()) {
        throw IoError("checkpoint has " + std::to_string(params.size()) +
                      " parameters, model expects " +
                      std::to_string(model.param_order().size()));
    }
    for (size_t i = 0; i < params.size(); ++i) {
        const std::string name = params[i].at("name").get<std::string>();
        if (name != model.param_order()[i]) {
            throw IoError("checkpoint parameter order mismatch at " + name);
        }
        const Shape shape = params[i].at("shape").get<Shape>();
        if (shape != model.params().at(name).shape()) {
            throw IoError("checkpoint shape mismatch for " + name);
        }
    }
    for (const std::string& name : model.param_order()) {
        detail::read_doubles(in, model.param(name).values());
    }
    const bool optim_present = manifest.at("optimizer_present").get<bool>();
    if (optim_present && optimizer != nullptr) {
        for (const std::string& name : model.param_order()) {
            auto& m = optimizer->moment1()[name];
            m.assign(model.params().at(name).values().size(), 0.0);
            detail::read_doubles(in, m);
        }
        for (const std::string& name : model.param_order()) {
            auto& v = optimizer->moment2()[name];
            v.assign(model.params().at(name).values().size(), 0.0);
            detail::read_doubles(in, v);
        }
        optimizer->set_steps_taken(manifest.at("optimizer_steps").get<long long>());
    }
    if (!in) throw IoError("truncated checkpoint blocks: " + path);

    for (const auto& s : manifest.at("sparsity")) {
        const AttnKind kind = attn_kind_from_string(s.at("kind").get<std::string>());
        const int layer = s.at("layer").get<int>();
        const GroupKey key{static_cast<int>(kind), layer};
        auto it = model.sparsity_states().find(key);
        if (it == model.sparsity_states().end()) {
            throw IoError("checkpoint sparsity state for unknown group");
        }
        it->second.k = s.at("k").get<double>();
        it->second.frozen_increase = s.at("frozen_increase").get<bool>();
    }

    CheckpointData data;
    data.config_text = manifest.at("config").get<std::string>();
    data.step = manifest.at("step").get<long long>();
    return data;
}

}  // namespace lasformer
