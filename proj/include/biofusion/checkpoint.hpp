#pragma once

// Parameter checkpoints: one line of compact JSON (config echo and a tensor
// manifest with names, shapes and byte offsets) terminated by '\n', followed by
// the raw little-endian float32 payload.

#include <bit>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "biofusion/data.hpp"
#include "biofusion/errors.hpp"
#include "biofusion/fusion.hpp"
#include "json.hpp"

namespace biofusion {

inline constexpr const char* kCheckpointFormat = "biofusion-checkpoint";
inline constexpr int kCheckpointVersion = 1;

struct CheckpointTensor {
    std::string name;
    Shape shape;
    std::vector<float> values;
    bool trainable = true;
};

struct Checkpoint {
    std::string kind;  // "vae" or "model"
    nlohmann::json config = nlohmann::json::object();
    nlohmann::json extra = nlohmann::json::object();
    std::vector<CheckpointTensor> tensors;

    const CheckpointTensor& find(const std::string& name) const {
        for (const auto& t : tensors)
            if (t.name == name) return t;
        throw FormatError("checkpoint: tensor '" + name + "' not found");
    }
};

inline std::string encode_checkpoint(const Checkpoint& c) {
    nlohmann::json header;
    header["format"] = kCheckpointFormat;
    header["version"] = kCheckpointVersion;
    header["kind"] = c.kind;
    header["config"] = c.config;
    header["extra"] = c.extra;
    header["tensors"] = nlohmann::json::array();
    std::uint64_t offset = 0;
    for (const auto& t : c.tensors) {
        if (shape_numel(t.shape) != t.values.size()) throw ShapeError("checkpoint: tensor '" + t.name + "' size mismatch");
        header["tensors"].push_back(
            {{"name", t.name}, {"shape", t.shape}, {"offset", offset}, {"trainable", t.trainable}});
        offset += 4 * t.values.size();
    }
    header["payload_bytes"] = offset;
    std::string out = header.dump();
    out.push_back('\n');
    out.reserve(out.size() + offset);
    for (const auto& t : c.tensors)
        for (float f : t.values) detail::put_f32(out, f);
    return out;
}

inline Checkpoint decode_checkpoint(std::string_view bytes, const std::string& what = "checkpoint") {
    const auto nl = bytes.find('\n');
    if (nl == std::string_view::npos) throw FormatError(what + ": missing header line");
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(bytes.substr(0, nl));
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(what + ": malformed header: " + e.what());
    }
    if (header.value("format", "") != kCheckpointFormat) throw FormatError(what + ": not a checkpoint file");
    if (header.value("version", 0) != kCheckpointVersion) throw FormatError(what + ": unsupported checkpoint version");
    const auto payload = bytes.substr(nl + 1);
    if (payload.size() != header.at("payload_bytes").get<std::uint64_t>())
        throw FormatError(what + ": payload is " + std::to_string(payload.size()) + " bytes, header declares " +
                          std::to_string(header.at("payload_bytes").get<std::uint64_t>()));
    Checkpoint c;
    c.kind = header.value("kind", "");
    c.config = header.value("config", nlohmann::json::object());
    c.extra = header.value("extra", nlohmann::json::object());
    const auto* p = reinterpret_cast<const unsigned char*>(payload.data());
    for (const auto& entry : header.at("tensors")) {
        CheckpointTensor t;
        t.name = entry.at("name").get<std::string>();
        t.shape = entry.at("shape").get<Shape>();
        t.trainable = entry.value("trainable", true);
        const auto offset = entry.at("offset").get<std::uint64_t>();
        const auto n = shape_numel(t.shape);
        if (offset + 4 * n > payload.size()) throw FormatError(what + ": tensor '" + t.name + "' overruns payload");
        t.values.resize(n);
        for (std::size_t i = 0; i < n; ++i) t.values[i] = detail::get_f32(p + offset + 4 * i);
        c.tensors.push_back(std::move(t));
    }
    return c;
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& c) {
    detail::write_file_bytes(path, encode_checkpoint(c));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
    return decode_checkpoint(detail::read_file_bytes(path), path.string());
}

template <typename Real, template <typename> class Params>
Checkpoint to_checkpoint(Params<Real>& params, std::string kind, const FusionConfig& config,
                         nlohmann::json extra = nlohmann::json::object()) {
    Checkpoint c;
    c.kind = std::move(kind);
    c.config = config;
    c.extra = std::move(extra);
    params.visit([&](const std::string& name, BasicTensor<Real>& t, bool trainable) {
        c.tensors.push_back({name, t.shape(), std::vector<float>(t.data().begin(), t.data().end()), trainable});
    });
    return c;
}

/// Overwrites every tensor of `params` (already shaped by the config) from the checkpoint.
template <typename Real, template <typename> class Params>
void assign_from_checkpoint(Params<Real>& params, const Checkpoint& c) {
    params.visit([&](const std::string& name, BasicTensor<Real>& t, bool trainable) {
        const auto& src = c.find(name);
        if (src.shape != t.shape())
            throw ShapeError("checkpoint: tensor '" + name + "' has shape " + shape_str(src.shape) + ", expected " +
                             shape_str(t.shape()));
        t = BasicTensor<Real>(src.shape, std::vector<Real>(src.values.begin(), src.values.end()), trainable);
    });
}

template <typename Real>
std::pair<FusionConfig, VaeParams<Real>> vae_from_checkpoint(const Checkpoint& c) {
    if (c.kind != "vae") throw FormatError("checkpoint: expected a VAE checkpoint, found '" + c.kind + "'");
    FusionConfig cfg = c.config.get<FusionConfig>();
    Rng rng(0);
    auto params = VaeParams<Real>::init(cfg, rng);
    assign_from_checkpoint(params, c);
    return {cfg, std::move(params)};
}

template <typename Real>
std::pair<FusionConfig, ModelParams<Real>> model_from_checkpoint(const Checkpoint& c) {
    if (c.kind != "model") throw FormatError("checkpoint: expected a model checkpoint, found '" + c.kind + "'");
    FusionConfig cfg = c.config.get<FusionConfig>();
    Rng rng(0);
    auto params = ModelParams<Real>::init(cfg, rng);
    assign_from_checkpoint(params, c);
    return {cfg, std::move(params)};
}

}  // namespace biofusion
