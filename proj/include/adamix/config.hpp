#pragma once

// Flat "dotted.key = value" run configuration.

#include <charconv>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <istream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "adamix/data.hpp"
#include "adamix/errors.hpp"
#include "adamix/mixture.hpp"
#include "adamix/training.hpp"
#include "adamix/transformer.hpp"

namespace adamix {

using ConfigMap = std::map<std::string, std::string>;

inline std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

/// Parses `key = value` lines; `#` starts a comment.
inline ConfigMap parse_config_text(std::istream& in, const std::string& origin = "config") {
    ConfigMap out;
    std::string line;
    for (std::size_t number = 1; std::getline(in, line); ++number) {
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ConfigError(origin + ":" + std::to_string(number) + ": expected key = value");
        const std::string key = trim(line.substr(0, eq));
        if (key.empty()) throw ConfigError(origin + ":" + std::to_string(number) + ": empty key");
        if (out.count(key)) throw ConfigError(origin + ":" + std::to_string(number) + ": duplicate key '" + key + "'");
        out[key] = trim(line.substr(eq + 1));
    }
    return out;
}

inline ConfigMap read_config_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config file " + path);
    return parse_config_text(in, path);
}

/// Typed access to a ConfigMap; every error names the offending key.
class ConfigReader {
public:
    explicit ConfigReader(const ConfigMap& map) : map_(map) {}

    [[nodiscard]] bool has(const std::string& key) const { return map_.count(key) != 0; }

    std::string str(const std::string& key, const std::string& fallback) {
        used_.insert(key);
        auto it = map_.find(key);
        return it == map_.end() ? fallback : it->second;
    }

    std::string required_str(const std::string& key) {
        used_.insert(key);
        auto it = map_.find(key);
        if (it == map_.end() || it->second.empty()) throw ConfigError("missing required field '" + key + "'");
        return it->second;
    }

    std::uint64_t u64(const std::string& key, std::uint64_t fallback) {
        if (!has(key)) {
            used_.insert(key);
            return fallback;
        }
        return parse_u64(key, required_str(key));
    }

    std::uint64_t required_u64(const std::string& key) { return parse_u64(key, required_str(key)); }

    double real(const std::string& key, double fallback) {
        if (!has(key)) {
            used_.insert(key);
            return fallback;
        }
        const std::string v = required_str(key);
        try {
            std::size_t used = 0;
            const double out = std::stod(v, &used);
            if (used == v.size()) return out;
        } catch (const std::exception&) {
        }
        throw ConfigError("field '" + key + "': expected a number, got '" + v + "'");
    }

    bool flag(const std::string& key, bool fallback) {
        if (!has(key)) {
            used_.insert(key);
            return fallback;
        }
        const std::string v = required_str(key);
        if (v == "true" || v == "on" || v == "1") return true;
        if (v == "false" || v == "off" || v == "0") return false;
        throw ConfigError("field '" + key + "': expected true/false, got '" + v + "'");
    }

    /// Keys present in the map that no accessor asked for.
    [[nodiscard]] std::vector<std::string> unused() const {
        std::vector<std::string> out;
        for (const auto& [k, v] : map_)
            if (!used_.count(k)) out.push_back(k);
        return out;
    }

    static std::uint64_t parse_u64(const std::string& key, const std::string& v) {
        std::uint64_t out = 0;
        const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
        if (ec != std::errc{} || ptr != v.data() + v.size()) {
            throw ConfigError("field '" + key + "': expected a non-negative integer, got '" + v + "'");
        }
        return out;
    }

private:
    const ConfigMap& map_;
    std::set<std::string> used_;
};

struct TaskConfig {
    std::string kind = "keyphrase";  // keyphrase | majority | parity | tsv
    std::size_t examples = 4000;
    std::uint64_t seed = 13;
    std::string train_path;
    std::string test_path;
};

struct OutputConfig {
    std::string checkpoint = "adamix.ckpt";
    std::string metrics = "metrics.csv";
};

struct RunConfig {
    TaskConfig task;
    BackboneConfig backbone;
    std::uint64_t backbone_seed = 7;
    MixtureConfig mixture;
    std::uint64_t mixture_seed = 11;
    bool merged = false;
    TrainConfig train;
    InferenceSpec inference;
    OutputConfig output;
};

inline Variant parse_variant(const std::string& s) {
    if (s == "adapter") return Variant::adapter;
    if (s == "lora") return Variant::lora;
    throw ConfigError("field 'mixture.variant': expected adapter or lora, got '" + s + "'");
}

inline Sharing parse_sharing(const std::string& s) {
    if (s == "none" || s == "off" || s == "false") return Sharing::none;
    if (s == "project_up" || s == "on" || s == "true") return Sharing::project_up;
    throw ConfigError("field 'mixture.sharing': expected none or project_up, got '" + s + "'");
}

inline RoutingPolicy parse_routing(const std::string& s) {
    if (s == "independent") return RoutingPolicy::independent;
    if (s == "tied") return RoutingPolicy::tied;
    throw ConfigError("field 'mixture.routing': expected independent or tied, got '" + s + "'");
}

/// Builds a RunConfig. `task.kind` and `mixture.M` are required; unknown keys
/// are rejected.
/// Accepts merge, random_route, fixed_route, ensemble and ensemble(T); the
/// parenthesized form also sets the pass count.
inline void apply_mode_string(const std::string& text, InferenceSpec& spec) {
    const std::string s = trim(text);
    if (s.rfind("ensemble(", 0) == 0 && s.back() == ')') {
        spec.mode = InferenceMode::ensemble;
        spec.passes = ConfigReader::parse_u64("eval.mode", s.substr(9, s.size() - 10));
        return;
    }
    spec.mode = parse_inference_mode(s);
}

inline RunConfig parse_run_config(const ConfigMap& map) {
    ConfigReader r(map);
    RunConfig c;
    c.task.kind = r.required_str("task.kind");
    if (c.task.kind != "tsv") parse_task_kind(c.task.kind);
    c.task.examples = r.u64("task.examples", c.task.examples);
    c.task.seed = r.u64("task.seed", c.task.seed);
    c.task.train_path = r.str("task.train_path", "");
    c.task.test_path = r.str("task.test_path", "");
    if (c.task.kind == "tsv" && c.task.train_path.empty()) throw ConfigError("missing required field 'task.train_path'");

    c.backbone.num_layers = r.u64("model.layers", c.backbone.num_layers);
    c.backbone.model_dim = r.u64("model.dim", c.backbone.model_dim);
    c.backbone.num_heads = r.u64("model.heads", c.backbone.num_heads);
    c.backbone.ffn_dim = r.u64("model.ffn", c.backbone.ffn_dim);
    c.backbone.vocab_size = r.u64("model.vocab", c.backbone.vocab_size);
    c.backbone.max_seq_len = r.u64("model.seq_len", c.backbone.max_seq_len);
    c.backbone.num_classes = r.u64("model.classes", c.backbone.num_classes);
    c.backbone_seed = r.u64("model.seed", c.backbone_seed);
    c.backbone.validate();

    c.mixture.modules = r.required_u64("mixture.M");
    if (c.mixture.modules == 0) throw ConfigError("field 'mixture.M' must be at least 1");
    c.mixture.variant = parse_variant(r.str("mixture.variant", "adapter"));
    c.mixture.bottleneck = r.u64("mixture.r", 8);
    c.mixture.sharing = parse_sharing(r.str("mixture.sharing", "none"));
    c.mixture.attention_sites = r.flag("mixture.attention_sites", false);
    c.mixture.lora_alpha = r.real("mixture.lora_alpha", c.mixture.lora_alpha);
    c.mixture.routing = parse_routing(r.str("mixture.routing", "independent"));
    c.mixture_seed = r.u64("mixture.seed", c.mixture_seed);
    c.merged = r.flag("mixture.merged", false);

    c.train.epochs = r.u64("train.epochs", c.train.epochs);
    c.train.batch_size = r.u64("train.batch_size", c.train.batch_size);
    c.train.lr = r.real("train.lr", c.train.lr);
    c.train.warmup_fraction = r.real("train.warmup", c.train.warmup_fraction);
    c.train.weight_decay = r.real("train.weight_decay", c.train.weight_decay);
    c.train.consistency = r.flag("train.consistency", true);
    c.train.kl_stop_gradient = r.flag("train.kl_stop_gradient", false);
    c.train.train_head = r.flag("train.train_head", true);
    c.train.seed = r.u64("train.seed", c.train.seed);
    c.train.eval_batch_size = r.u64("train.eval_batch_size", c.train.eval_batch_size);
    c.train.validate();

    c.inference.passes = r.u64("eval.T", 4);
    apply_mode_string(r.str("eval.mode", "merge"), c.inference);
    c.inference.seed = r.u64("eval.seed", 0);
    if (c.inference.passes == 0) throw ConfigError("field 'eval.T' must be at least 1");

    c.output.checkpoint = r.str("output.checkpoint", c.output.checkpoint);
    c.output.metrics = r.str("output.metrics", c.output.metrics);

    for (const auto& key : r.unused()) {
        if (key.rfind("grid.", 0) == 0) continue;  // ablation grids share the file
        throw ConfigError("unknown field '" + key + "'");
    }
    return c;
}

/// Canonical key/value echo; parse_run_config(to_config_map(c)) reproduces `c`.
inline ConfigMap to_config_map(const RunConfig& c) {
    auto u = [](std::uint64_t v) { return std::to_string(v); };
    auto b = [](bool v) { return std::string(v ? "true" : "false"); };
    ConfigMap m;
    m["task.kind"] = c.task.kind;
    m["task.examples"] = u(c.task.examples);
    m["task.seed"] = u(c.task.seed);
    if (!c.task.train_path.empty()) m["task.train_path"] = c.task.train_path;
    if (!c.task.test_path.empty()) m["task.test_path"] = c.task.test_path;
    m["model.layers"] = u(c.backbone.num_layers);
    m["model.dim"] = u(c.backbone.model_dim);
    m["model.heads"] = u(c.backbone.num_heads);
    m["model.ffn"] = u(c.backbone.ffn_dim);
    m["model.vocab"] = u(c.backbone.vocab_size);
    m["model.seq_len"] = u(c.backbone.max_seq_len);
    m["model.classes"] = u(c.backbone.num_classes);
    m["model.seed"] = u(c.backbone_seed);
    m["mixture.M"] = u(c.mixture.modules);
    m["mixture.variant"] = to_string(c.mixture.variant);
    m["mixture.r"] = u(c.mixture.bottleneck);
    m["mixture.sharing"] = to_string(c.mixture.sharing);
    m["mixture.attention_sites"] = b(c.mixture.attention_sites);
    m["mixture.lora_alpha"] = format_double(c.mixture.lora_alpha);
    m["mixture.routing"] = c.mixture.routing == RoutingPolicy::tied ? "tied" : "independent";
    m["mixture.seed"] = u(c.mixture_seed);
    m["mixture.merged"] = b(c.merged);
    m["train.epochs"] = u(c.train.epochs);
    m["train.batch_size"] = u(c.train.batch_size);
    m["train.lr"] = format_double(c.train.lr);
    m["train.warmup"] = format_double(c.train.warmup_fraction);
    m["train.weight_decay"] = format_double(c.train.weight_decay);
    m["train.consistency"] = b(c.train.consistency);
    m["train.kl_stop_gradient"] = b(c.train.kl_stop_gradient);
    m["train.train_head"] = b(c.train.train_head);
    m["train.seed"] = u(c.train.seed);
    m["train.eval_batch_size"] = u(c.train.eval_batch_size);
    m["eval.mode"] = to_string(c.inference.mode);
    m["eval.T"] = u(c.inference.passes);
    m["eval.seed"] = u(c.inference.seed);
    m["output.checkpoint"] = c.output.checkpoint;
    m["output.metrics"] = c.output.metrics;
    return m;
}

/// Train/test examples for the configured task.
inline Dataset load_task(const RunConfig& c) {
    if (c.task.kind == "tsv") {
        const auto texts = read_tsv_texts(c.task.train_path);
        const Vocab vocab = build_vocab(texts, c.backbone.vocab_size);
        Dataset d;
        d.train = load_tsv(c.task.train_path, vocab, c.backbone.max_seq_len, c.backbone.num_classes);
        if (!c.task.test_path.empty()) d.test = load_tsv(c.task.test_path, vocab, c.backbone.max_seq_len, c.backbone.num_classes);
        return d;
    }
    SyntheticSpec spec;
    spec.kind = parse_task_kind(c.task.kind);
    spec.examples = c.task.examples;
    spec.vocab_size = c.backbone.vocab_size;
    spec.seq_len = c.backbone.max_seq_len;
    spec.num_classes = c.backbone.num_classes;
    spec.seed = c.task.seed;
    return synthetic_task(spec);
}

}  // namespace adamix
