#pragma once

// The command layer behind tools/adamix: each function reads and writes
// files and reports through a Logger. Errors propagate as adamix::Error
// subclasses; exit_code() maps them to the process exit status.

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <map>
#include <ostream>
#include <set>
#include <string>

#include <nlohmann/json.hpp>

#include "adamix/ablation.hpp"
#include "adamix/checkpoint.hpp"
#include "adamix/config.hpp"
#include "adamix/errors.hpp"
#include "adamix/plot.hpp"
#include "adamix/training.hpp"

namespace adamix {

enum class LogLevel { quiet = 0, error = 1, info = 2, debug = 3 };

/// ADAMIX_LOG=quiet|error|info|debug (default info). Messages go to `sink`.
class Logger {
public:
    explicit Logger(std::ostream& sink = std::cerr, LogLevel level = from_env()) : sink_(&sink), level_(level) {}

    static LogLevel from_env() {
        const char* v = std::getenv("ADAMIX_LOG");
        if (!v) return LogLevel::info;
        const std::string s(v);
        if (s == "quiet" || s == "0") return LogLevel::quiet;
        if (s == "error" || s == "1") return LogLevel::error;
        if (s == "debug" || s == "3") return LogLevel::debug;
        return LogLevel::info;
    }

    [[nodiscard]] LogLevel level() const { return level_; }
    void error(const std::string& msg) const { write(LogLevel::error, "error: ", msg); }
    void info(const std::string& msg) const { write(LogLevel::info, "", msg); }
    void debug(const std::string& msg) const { write(LogLevel::debug, "debug: ", msg); }

private:
    void write(LogLevel at, const char* prefix, const std::string& msg) const {
        if (static_cast<int>(level_) >= static_cast<int>(at)) *sink_ << prefix << msg << '\n';
    }

    std::ostream* sink_;
    LogLevel level_;
};

/// 0 success, 1 config error, 2 data or checksum error, 3 training or any
/// other failure.
inline int exit_code(const std::exception& e) {
    if (dynamic_cast<const ConfigError*>(&e)) return 1;
    if (dynamic_cast<const DataError*>(&e)) return 2;
    return 3;
}

struct TrainOutcome {
    RunConfig config;
    TrainState state;
    std::uint32_t backbone_crc_before = 0;
    std::uint32_t backbone_crc_after = 0;
};

inline void write_text_file(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write " + path);
    out << text;
    if (!out) throw DataError("write failed: " + path);
}

/// Trains the configured mixture and writes the checkpoint (with optimizer
/// state) and the per-epoch metrics CSV named in `output.*`.
inline TrainOutcome cmd_train(const std::string& config_path, const Logger& log) {
    TrainOutcome out;
    out.config = parse_run_config(read_config_file(config_path));
    const RunConfig& c = out.config;
    const Dataset data = load_task(c);
    log.info("train: " + std::to_string(data.train.size()) + " train / " + std::to_string(data.test.size()) + " test examples");
    BackboneModel model = build_backbone(c.backbone, c.backbone_seed);
    MixtureAdaptation mixture = MixtureAdaptation::create(c.backbone, c.mixture, c.mixture_seed);
    out.backbone_crc_before = parameter_checksum(model.backbone_parameters());
    TrainLoopOptions options;
    options.eval = c.inference;
    options.on_epoch = [&](const EpochMetrics& m) {
        log.info("step " + std::to_string(m.step) + " loss " + format_double(m.total_loss) + " ce " + format_double(m.ce_loss) +
                 " kl " + format_double(m.kl_loss) + " eval_acc " + format_double(m.eval_accuracy));
    };
    out.state = train_loop(c.train, data, model, mixture, options);
    out.backbone_crc_after = parameter_checksum(model.backbone_parameters());
    if (out.backbone_crc_after != out.backbone_crc_before) throw TrainingError("backbone parameters changed during training");
    log.debug("routing collisions: " + std::to_string(out.state.routing_collisions));

    save_checkpoint_file(c.output.checkpoint, make_checkpoint(c, model, mixture, &out.state));
    std::ofstream csv(c.output.metrics, std::ios::binary);
    if (!csv) throw DataError("cannot write " + c.output.metrics);
    write_metrics_csv(csv, out.state.history);
    log.info("wrote " + c.output.checkpoint + " and " + c.output.metrics);
    return out;
}

/// Collapses every site to the mean of its modules and writes an M=1
/// checkpoint without optimizer state.
inline void cmd_merge(const std::string& in_path, const std::string& out_path, const Logger& log) {
    const LoadedModel loaded = restore(load_checkpoint_file(in_path));
    const MixtureAdaptation merged = loaded.mixture.merged();
    save_checkpoint_file(out_path, make_checkpoint(loaded.config, loaded.model, merged));
    log.info("merged M=" + std::to_string(loaded.mixture.config().modules) + " -> 1, " +
             std::to_string(merged.parameter_count()) + " adaptation parameters, wrote " + out_path);
}

struct EvalOutcome {
    InferenceSpec spec;
    double accuracy = 0.0;
    std::size_t examples = 0;
    std::string split;
    nlohmann::json report;
};

/// Accuracy of a checkpoint on its task's test split (train split when the
/// task has none). Merge mode needs a merged or single-module checkpoint.
inline EvalOutcome cmd_eval(const std::string& ckpt_path, const InferenceSpec& spec, const std::string& report_path,
                            const Logger& log) {
    if (spec.passes == 0) throw ConfigError("field 'eval.T' must be at least 1");
    const LoadedModel loaded = restore(load_checkpoint_file(ckpt_path));
    const std::size_t modules = loaded.mixture.config().modules;
    if (spec.mode == InferenceMode::merge && modules > 1 && !loaded.mixture.is_merged()) {
        throw ConfigError("eval.mode=merge needs a merged checkpoint, but " + ckpt_path + " holds mixture.M=" +
                          std::to_string(modules) + " modules per site; run `merge` first");
    }
    const Dataset data = load_task(loaded.config);
    EvalOutcome out;
    out.spec = spec;
    out.split = data.test.empty() ? "train" : "test";
    const auto& examples = data.test.empty() ? data.train : data.test;
    out.examples = examples.size();
    out.accuracy = accuracy(loaded.model, loaded.mixture, examples, spec, loaded.config.train.eval_batch_size);
    out.report = {
        {"checkpoint", ckpt_path},
        {"mode", to_string(spec.mode)},
        {"T", spec.mode == InferenceMode::ensemble ? spec.passes : 1},
        {"seed", spec.seed},
        {"modules", modules},
        {"merged", loaded.mixture.is_merged()},
        {"split", out.split},
        {"examples", out.examples},
        {"accuracy", out.accuracy},
    };
    if (!report_path.empty()) write_text_file(report_path, out.report.dump(2) + "\n");
    log.info("accuracy " + format_double(out.accuracy) + " (" + to_string(spec.mode) + ", " + std::to_string(out.examples) + " " +
             out.split + " examples)");
    return out;
}

/// Runs the grid in `grid_path` and writes its CSV to `grid.output`.
inline AblationResult cmd_ablate(const std::string& grid_path, const Logger& log) {
    const AblationGrid grid = parse_grid(read_config_file(grid_path));
    const AblationResult result = run_ablation(grid, [&](const std::string& m) { log.info(m); });
    std::ofstream csv(grid.output, std::ios::binary);
    if (!csv) throw DataError("cannot write " + grid.output);
    write_ablation_csv(csv, grid, result);
    log.info("ablate: " + std::to_string(result.runs) + " runs, " + std::to_string(result.rows.size()) + " rows, wrote " + grid.output);
    return result;
}

struct InspectSummary {
    std::map<std::string, std::size_t> site_modules;  // "<layer>.<point>" -> module count
    std::string sharing;
    std::size_t trainable = 0;
    std::size_t frozen = 0;
    std::size_t adaptation_stored = 0;
    std::size_t adaptation_formula = 0;
};

/// Reads only the checkpoint: the frozen total comes from the configured
/// shape, so large configurations are summarized without building them.
inline InspectSummary inspect_checkpoint(const Checkpoint& ckpt) {
    const RunConfig c = parse_run_config(ckpt.config);
    InspectSummary s;
    s.sharing = to_string(c.mixture.sharing);
    std::map<std::string, std::set<std::string>> owners;
    for (const auto& t : ckpt.tensors) {
        if (t.name.rfind("site.", 0) != 0) continue;
        // site.<layer>.<point>.<owner>.<tensor>
        const auto a = t.name.find('.', 5);
        const auto b = t.name.find('.', a + 1);
        const auto e = t.name.find('.', b + 1);
        if (a == std::string::npos || b == std::string::npos || e == std::string::npos) {
            throw DataError("checkpoint: malformed tensor name " + t.name);
        }
        const std::string owner = t.name.substr(b + 1, e - b - 1);
        auto& set = owners[t.name.substr(5, b - 5)];
        if (owner != "shared") set.insert(owner);
    }
    for (const auto& [site, set] : owners) s.site_modules[site] = set.size();
    s.adaptation_stored = stored_adaptation_params(ckpt);
    const AdaptationShape shape{c.backbone.model_dim, c.backbone.num_layers,        c.mixture.bottleneck,
                                c.mixture.variant,    MixtureAdaptation::points_for(c.mixture).size(),
                                c.mixture.sharing,    c.mixture.modules,            c.merged};
    s.adaptation_formula = count_adaptation_params(shape);
    const std::size_t head = head_param_count(c.backbone);
    s.trainable = s.adaptation_stored + (c.train.train_head ? head : 0);
    s.frozen = backbone_param_count(c.backbone) + (c.train.train_head ? 0 : head);
    return s;
}

inline InspectSummary cmd_inspect(const std::string& ckpt_path, std::ostream& out) {
    const Checkpoint ckpt = load_checkpoint_file(ckpt_path);
    const RunConfig c = parse_run_config(ckpt.config);
    const InspectSummary s = inspect_checkpoint(ckpt);
    out << "checkpoint: " << ckpt_path << '\n';
    out << "variant: " << to_string(c.mixture.variant) << "  M: " << c.mixture.modules << "  r: " << c.mixture.bottleneck
        << "  merged: " << (c.merged ? "yes" : "no") << '\n';
    out << "sharing: " << s.sharing << '\n';
    out << "sites:\n";
    for (const auto& [site, n] : s.site_modules) out << "  " << site << ": " << n << " module" << (n == 1 ? "" : "s") << '\n';
    out << "adaptation parameters: " << s.adaptation_stored << " stored, " << s.adaptation_formula << " by formula (d="
        << c.backbone.model_dim << ", L=" << c.backbone.num_layers << ", r=" << c.mixture.bottleneck << ", points/layer="
        << MixtureAdaptation::points_for(c.mixture).size() << ")\n";
    out << "trainable parameters: " << s.trainable << '\n';
    out << "frozen parameters: " << s.frozen << '\n';
    return s;
}

inline void cmd_plot(const std::string& csv_path, const std::string& out_path, const Logger& log) {
    std::ifstream in(csv_path);
    if (!in) throw DataError("cannot open " + csv_path);
    const CsvTable table = read_csv(in);
    write_text_file(out_path, render_svg(table, csv_path));
    log.info("wrote " + out_path);
}

}  // namespace adamix
