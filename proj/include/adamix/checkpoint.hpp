#pragma once

// Checkpoint file: a plain-text manifest followed by a little-endian float64
// payload.
//
//   ADAMIX-CHECKPOINT
//   format_version = 1
//   config.<key> = <value>            (sorted by key)
//   backbone.crc32 = <hex>            (frozen encoder weights, rebuilt from seed)
//   state.<key> = <value>             (optional training state)
//   tensor <name> shape=<d0>x<d1> offset=<byte> count=<n> crc32=<hex>
//   payload.bytes = <n>
//   payload.crc32 = <hex>
//   manifest.crc32 = <hex>            (every manifest byte before this line)
//   end
//   <payload bytes>
//
// The frozen encoder is not stored; it is regenerated from model.seed and
// checked against backbone.crc32 on load.

#include <boost/crc.hpp>

#include <bit>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <istream>
#include <iterator>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "adamix/config.hpp"
#include "adamix/errors.hpp"
#include "adamix/mixture.hpp"
#include "adamix/training.hpp"
#include "adamix/transformer.hpp"

namespace adamix {

inline constexpr int kCheckpointFormatVersion = 1;

struct Checkpoint {
    ConfigMap config;
    std::uint32_t backbone_crc = 0;
    std::map<std::string, std::string> state;
    std::vector<NamedTensor> tensors;

    [[nodiscard]] const Tensor* find(const std::string& name) const {
        for (const auto& t : tensors)
            if (t.name == name) return &t.tensor;
        return nullptr;
    }
};

namespace detail {

inline std::string hex32(std::uint32_t v) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "%08x", v);
    return buf;
}

inline std::uint32_t parse_hex32(const std::string& s, const std::string& what) {
    try {
        std::size_t used = 0;
        const unsigned long v = std::stoul(s, &used, 16);
        if (used == s.size()) return static_cast<std::uint32_t>(v);
    } catch (const std::exception&) {
    }
    throw DataError("checkpoint: malformed " + what + " '" + s + "'");
}

inline std::size_t manifest_u64(const std::string& what, const std::string& s) {
    try {
        return ConfigReader::parse_u64(what, s);
    } catch (const ConfigError&) {
        throw DataError("checkpoint: malformed " + what + " '" + s + "'");
    }
}

inline void append_le(std::string& out, double v) {
    const auto bits = std::bit_cast<std::uint64_t>(v);
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xffU));
}

inline double read_le(const char* p) {
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(p[i])) << (8 * i);
    return std::bit_cast<double>(bits);
}

inline std::uint32_t crc32(const std::string& bytes, std::size_t offset, std::size_t length) {
    boost::crc_32_type crc;
    crc.process_bytes(bytes.data() + offset, length);
    return crc.checksum();
}

}  // namespace detail

inline void save_checkpoint(std::ostream& os, const Checkpoint& ckpt) {
    std::string payload;
    std::ostringstream manifest;
    manifest << "ADAMIX-CHECKPOINT\n";
    manifest << "format_version = " << kCheckpointFormatVersion << '\n';
    for (const auto& [k, v] : ckpt.config) manifest << "config." << k << " = " << v << '\n';
    manifest << "backbone.crc32 = " << detail::hex32(ckpt.backbone_crc) << '\n';
    for (const auto& [k, v] : ckpt.state) manifest << "state." << k << " = " << v << '\n';
    for (const auto& t : ckpt.tensors) {
        const std::size_t offset = payload.size();
        for (double v : t.tensor.data()) detail::append_le(payload, v);
        std::string shape;
        for (std::size_t i = 0; i < t.tensor.rank(); ++i) shape += (i ? "x" : "") + std::to_string(t.tensor.dim(i));
        manifest << "tensor " << t.name << " shape=" << shape << " offset=" << offset << " count=" << t.tensor.numel()
                 << " crc32=" << detail::hex32(detail::crc32(payload, offset, payload.size() - offset)) << '\n';
    }
    manifest << "payload.bytes = " << payload.size() << '\n';
    manifest << "payload.crc32 = " << detail::hex32(detail::crc32(payload, 0, payload.size())) << '\n';
    const std::string body = manifest.str();
    os << body << "manifest.crc32 = " << detail::hex32(detail::crc32(body, 0, body.size())) << "\nend\n";
    os.write(payload.data(), static_cast<std::streamsize>(payload.size()));
}

inline Checkpoint load_checkpoint(std::istream& is) {
    Checkpoint ckpt;
    // Read the whole manifest and verify its checksum before interpreting it.
    std::vector<std::string> lines;
    std::string body, line;
    std::uint32_t manifest_crc = 0;
    bool saw_end = false, saw_manifest_crc = false;
    while (std::getline(is, line)) {
        if (line == "end") {
            saw_end = true;
            break;
        }
        if (line.rfind("manifest.crc32 = ", 0) == 0) {
            manifest_crc = detail::parse_hex32(line.substr(17), "manifest.crc32");
            saw_manifest_crc = true;
            continue;
        }
        if (saw_manifest_crc) throw ChecksumError("checkpoint: manifest continues after its checksum");
        body += line + '\n';
        lines.push_back(line);
        if (body.size() > (std::size_t{1} << 26)) break;
    }
    if (!saw_end || !saw_manifest_crc) throw DataError("checkpoint: truncated manifest");
    if (detail::crc32(body, 0, body.size()) != manifest_crc) throw ChecksumError("checkpoint: manifest checksum mismatch");
    if (lines.empty() || lines.front() != "ADAMIX-CHECKPOINT") throw DataError("checkpoint: missing ADAMIX-CHECKPOINT header");
    struct Entry {
        std::string name;
        Shape shape;
        std::size_t offset, count;
        std::uint32_t crc;
    };
    std::vector<Entry> entries;
    std::size_t payload_bytes = 0;
    std::uint32_t payload_crc = 0;
    bool saw_version = false, saw_backbone = false;
    for (std::size_t li = 1; li < lines.size(); ++li) {
        const std::string& line = lines[li];
        if (line.rfind("tensor ", 0) == 0) {
            std::istringstream fields(line.substr(7));
            Entry e{};
            std::string shape, offset, count, crc;
            fields >> e.name >> shape >> offset >> count >> crc;
            if (shape.rfind("shape=", 0) != 0 || offset.rfind("offset=", 0) != 0 || count.rfind("count=", 0) != 0 ||
                crc.rfind("crc32=", 0) != 0) {
                throw DataError("checkpoint: malformed tensor line '" + line + "'");
            }
            std::istringstream dims(shape.substr(6));
            for (std::string d; std::getline(dims, d, 'x');) e.shape.push_back(detail::manifest_u64("shape", d));
            e.offset = detail::manifest_u64("offset", offset.substr(7));
            e.count = detail::manifest_u64("count", count.substr(6));
            e.crc = detail::parse_hex32(crc.substr(6), "tensor crc32");
            if (e.shape.empty() || shape_numel(e.shape) != e.count) throw DataError("checkpoint: shape/count mismatch for " + e.name);
            entries.push_back(std::move(e));
            continue;
        }
        const auto eq = line.find(" = ");
        if (eq == std::string::npos) throw DataError("checkpoint: malformed manifest line '" + line + "'");
        const std::string key = line.substr(0, eq), value = line.substr(eq + 3);
        if (key == "format_version") {
            if (value != std::to_string(kCheckpointFormatVersion)) throw DataError("checkpoint: unsupported format_version " + value);
            saw_version = true;
        } else if (key.rfind("config.", 0) == 0) {
            ckpt.config[key.substr(7)] = value;
        } else if (key.rfind("state.", 0) == 0) {
            ckpt.state[key.substr(6)] = value;
        } else if (key == "backbone.crc32") {
            ckpt.backbone_crc = detail::parse_hex32(value, "backbone.crc32");
            saw_backbone = true;
        } else if (key == "payload.bytes") {
            payload_bytes = detail::manifest_u64(key, value);
        } else if (key == "payload.crc32") {
            payload_crc = detail::parse_hex32(value, "payload.crc32");
        } else {
            throw DataError("checkpoint: unknown manifest key '" + key + "'");
        }
    }
    if (!saw_version || !saw_backbone) throw DataError("checkpoint: manifest lacks format_version or backbone.crc32");

    std::string payload(payload_bytes, '\0');
    is.read(payload.data(), static_cast<std::streamsize>(payload_bytes));
    if (static_cast<std::size_t>(is.gcount()) != payload_bytes) throw ChecksumError("checkpoint: payload shorter than recorded size");
    if (is.peek() != std::char_traits<char>::eof()) throw ChecksumError("checkpoint: trailing bytes after payload");
    if (detail::crc32(payload, 0, payload.size()) != payload_crc) throw ChecksumError("checkpoint: payload checksum mismatch");

    for (const Entry& e : entries) {
        if (e.offset + e.count * 8 > payload.size()) throw ChecksumError("checkpoint: tensor " + e.name + " exceeds payload");
        if (detail::crc32(payload, e.offset, e.count * 8) != e.crc) throw ChecksumError("checkpoint: checksum mismatch for " + e.name);
        std::vector<double> values(e.count);
        for (std::size_t i = 0; i < e.count; ++i) values[i] = detail::read_le(payload.data() + e.offset + 8 * i);
        ckpt.tensors.push_back({e.name, Tensor(e.shape, std::move(values))});
    }
    return ckpt;
}

inline void save_checkpoint_file(const std::string& path, const Checkpoint& ckpt) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write checkpoint " + path);
    save_checkpoint(out, ckpt);
    if (!out) throw DataError("failed writing checkpoint " + path);
}

inline Checkpoint load_checkpoint_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open checkpoint " + path);
    return load_checkpoint(in);
}

/// Head weights, every mixture tensor, and (when `state` is given) the
/// optimizer moments and RNG streams.
inline Checkpoint make_checkpoint(const RunConfig& config, const BackboneModel& model, const MixtureAdaptation& mixture,
                                  const TrainState* state = nullptr) {
    Checkpoint ckpt;
    RunConfig echo = config;
    echo.mixture.modules = mixture.config().modules;
    echo.merged = mixture.is_merged();
    ckpt.config = to_config_map(echo);
    ckpt.backbone_crc = parameter_checksum(model.backbone_parameters());
    for (const auto& p : model.head_parameters()) ckpt.tensors.push_back({p.name, p.tensor.detach()});
    for (const auto& p : mixture.parameters()) ckpt.tensors.push_back({p.name, p.tensor.detach()});
    if (state) {
        ckpt.state["step"] = std::to_string(state->step);
        ckpt.state["routing_collisions"] = std::to_string(state->routing_collisions);
        ckpt.state["routing_rng"] = rng_state(state->routing_rng);
        ckpt.state["order_rng"] = rng_state(state->order_rng);
        const OptimizerState& opt = state->optimizer;
        for (std::size_t i = 0; i < opt.params.size(); ++i) {
            const Shape& shape = opt.params[i].tensor.shape();
            ckpt.tensors.push_back({"opt.m." + opt.params[i].name, Tensor(shape, opt.first_moment[i])});
            ckpt.tensors.push_back({"opt.v." + opt.params[i].name, Tensor(shape, opt.second_moment[i])});
        }
    }
    return ckpt;
}

struct LoadedModel {
    RunConfig config;
    BackboneModel model;
    MixtureAdaptation mixture;
};

/// Adaptation tensors (site.*) and their total element count.
inline std::size_t stored_adaptation_params(const Checkpoint& ckpt) {
    std::size_t n = 0;
    for (const auto& t : ckpt.tensors)
        if (t.name.rfind("site.", 0) == 0) n += t.tensor.numel();
    return n;
}

/// Rebuilds the frozen encoder from its seed, verifies it against the
/// recorded checksum, and loads head and mixture weights.
inline LoadedModel restore(const Checkpoint& ckpt) {
    LoadedModel out;
    out.config = parse_run_config(ckpt.config);
    out.model = build_backbone(out.config.backbone, out.config.backbone_seed);
    if (parameter_checksum(out.model.backbone_parameters()) != ckpt.backbone_crc) {
        throw DataError("checkpoint: rebuilt backbone does not match backbone.crc32");
    }
    freeze_backbone(out.model, out.config.train.train_head);
    auto copy_into = [&](const NamedTensor& target) {
        const Tensor* src = ckpt.find(target.name);
        if (!src) throw DataError("checkpoint: missing tensor " + target.name);
        if (src->shape() != target.tensor.shape()) {
            throw DataError("checkpoint: tensor " + target.name + " has shape " + shape_str(src->shape()) + ", expected " +
                            shape_str(target.tensor.shape()));
        }
        Tensor t = target.tensor;
        std::copy(src->data().begin(), src->data().end(), t.mutable_data().begin());
    };
    for (const auto& p : out.model.head_parameters()) copy_into(p);
    MixtureAdaptation built = MixtureAdaptation::create(out.config.backbone, out.config.mixture, out.config.mixture_seed);
    out.mixture = MixtureAdaptation::from_sites(built.config(), built.num_layers(),
                                                std::vector<MixtureSite>(built.sites().begin(), built.sites().end()),
                                                out.config.merged);
    const auto params = out.mixture.parameters();
    for (const auto& p : params) copy_into(p);
    if (stored_adaptation_params(ckpt) != out.mixture.parameter_count()) {
        throw DataError("checkpoint: adaptation tensors do not match mixture.M=" + std::to_string(out.config.mixture.modules));
    }
    return out;
}

}  // namespace adamix
