#pragma once

// Grid runner over (M, r, consistency, sharing) x seeds. Every run evaluates
// every requested inference mode on the same held-out split.
//
// Runs are paired: for a given seed every cell shares the dataset, the data
// order, the routing stream and the adapter init seed, so cells differ only
// in the axis values.

#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <mutex>
#include <ostream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "adamix/config.hpp"
#include "adamix/data.hpp"
#include "adamix/errors.hpp"
#include "adamix/mixture.hpp"
#include "adamix/training.hpp"
#include "adamix/transformer.hpp"

namespace adamix {

struct AblationCell {
    std::size_t modules = 1;
    std::size_t bottleneck = 8;
    bool consistency = true;
    Sharing sharing = Sharing::none;
};

struct AblationGrid {
    RunConfig base;
    std::vector<std::size_t> modules{2, 4, 8};
    std::vector<std::size_t> bottlenecks{8, 16, 32};
    std::vector<bool> consistency{true, false};
    std::vector<Sharing> sharing{Sharing::none, Sharing::project_up};
    std::vector<InferenceMode> modes{InferenceMode::merge, InferenceMode::random_route, InferenceMode::fixed_route,
                                     InferenceMode::ensemble};
    std::vector<std::uint64_t> seeds{1, 2, 3};
    std::size_t threads = 1;
    std::string output = "ablation.csv";

    [[nodiscard]] std::vector<AblationCell> cells() const {
        std::vector<AblationCell> out;
        for (std::size_t m : modules)
            for (std::size_t r : bottlenecks)
                for (bool c : consistency)
                    for (Sharing s : sharing) out.push_back({m, r, c, s});
        return out;
    }
};

namespace detail {

inline std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    for (std::string item; std::getline(ss, item, ',');) {
        item = trim(item);
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

}  // namespace detail

/// Grid file: a run config plus `grid.*` list keys (comma separated):
/// grid.M, grid.r, grid.consistency, grid.sharing, grid.modes, grid.seeds,
/// grid.threads, grid.output. Missing axes keep their defaults.
inline AblationGrid parse_grid(ConfigMap map) {
    AblationGrid g;
    auto take = [&](const std::string& key) -> std::vector<std::string> {
        auto it = map.find(key);
        if (it == map.end()) return {};
        auto items = detail::split_list(it->second);
        if (items.empty()) throw ConfigError("field '" + key + "' lists no values");
        map.erase(it);
        return items;
    };
    if (auto v = take("grid.M"); !v.empty()) {
        g.modules.clear();
        for (auto& s : v) {
            g.modules.push_back(ConfigReader::parse_u64("grid.M", s));
            if (g.modules.back() == 0) throw ConfigError("field 'grid.M' values must be at least 1");
        }
    }
    if (auto v = take("grid.r"); !v.empty()) {
        g.bottlenecks.clear();
        for (auto& s : v) g.bottlenecks.push_back(ConfigReader::parse_u64("grid.r", s));
    }
    if (auto v = take("grid.consistency"); !v.empty()) {
        g.consistency.clear();
        for (auto& s : v) {
            if (s == "on" || s == "true") g.consistency.push_back(true);
            else if (s == "off" || s == "false") g.consistency.push_back(false);
            else throw ConfigError("field 'grid.consistency': expected on/off, got '" + s + "'");
        }
    }
    if (auto v = take("grid.sharing"); !v.empty()) {
        g.sharing.clear();
        for (auto& s : v) g.sharing.push_back(parse_sharing(s));
    }
    if (auto v = take("grid.modes"); !v.empty()) {
        g.modes.clear();
        for (auto& s : v) g.modes.push_back(parse_inference_mode(s));
    }
    if (auto v = take("grid.seeds"); !v.empty()) {
        g.seeds.clear();
        for (auto& s : v) g.seeds.push_back(ConfigReader::parse_u64("grid.seeds", s));
    }
    if (auto v = take("grid.threads"); !v.empty()) g.threads = std::max<std::size_t>(1, ConfigReader::parse_u64("grid.threads", v.front()));
    if (auto v = take("grid.output"); !v.empty()) g.output = v.front();
    if (!map.count("mixture.M")) map["mixture.M"] = std::to_string(g.modules.front());
    for (const auto& [k, v] : map)
        if (k.rfind("grid.", 0) == 0) throw ConfigError("unknown field '" + k + "'");
    g.base = parse_run_config(map);
    return g;
}

struct AblationRun {
    std::size_t cell = 0;
    std::uint64_t seed = 0;
    std::vector<double> accuracy;  // per grid mode
    double final_train_loss = 0.0;
};

struct AblationRow {
    AblationCell cell;
    std::string status;  // ok | skipped | failed
    std::string detail;
    std::size_t runs = 0;
    std::vector<double> mode_mean, mode_std;
    double loss_mean = 0.0, loss_std = 0.0;
};

struct AblationResult {
    std::vector<AblationRow> rows;
    std::size_t runs = 0;  // training runs executed
};

inline bool cell_feasible(const AblationCell& cell, const BackboneConfig& b, Variant variant) {
    if (cell.bottleneck == 0) return false;
    return variant == Variant::adapter ? cell.bottleneck < b.model_dim : cell.bottleneck <= b.model_dim;
}

/// One training run of one cell, evaluated in every grid mode.
inline AblationRun run_ablation_cell(const AblationGrid& grid, const AblationCell& cell, std::uint64_t seed, const Dataset& data) {
    RunConfig rc = grid.base;
    rc.mixture.modules = cell.modules;
    rc.mixture.bottleneck = cell.bottleneck;
    rc.mixture.sharing = cell.sharing;
    rc.train.consistency = cell.consistency;
    rc.train.seed = seed;
    rc.mixture_seed = derive_seed(seed, Stream::adaptation);
    BackboneModel model = build_backbone(rc.backbone, rc.backbone_seed);
    MixtureAdaptation mixture = MixtureAdaptation::create(rc.backbone, rc.mixture, rc.mixture_seed);
    TrainLoopOptions options;
    options.eval = {InferenceMode::merge, rc.inference.passes, seed};
    const TrainState state = train_loop(rc.train, data, model, mixture, options);
    AblationRun run;
    run.seed = seed;
    run.final_train_loss = state.history.back().total_loss;
    const auto& eval_set = data.test.empty() ? data.train : data.test;
    for (InferenceMode mode : grid.modes) {
        run.accuracy.push_back(accuracy(model, mixture, eval_set, {mode, rc.inference.passes, seed}, rc.train.eval_batch_size));
    }
    return run;
}

namespace detail {

inline void mean_std(const std::vector<double>& xs, double& mean, double& stddev) {
    mean = 0.0;
    stddev = 0.0;
    if (xs.empty()) return;
    for (double x : xs) mean += x;
    mean /= static_cast<double>(xs.size());
    if (xs.size() < 2) return;
    for (double x : xs) stddev += (x - mean) * (x - mean);
    stddev = std::sqrt(stddev / static_cast<double>(xs.size() - 1));
}

}  // namespace detail

/// Runs every feasible (cell, seed) pair, `grid.threads` at a time. Results
/// are collected by index, so the table does not depend on thread timing.
inline AblationResult run_ablation(const AblationGrid& grid, const std::function<void(const std::string&)>& log = {}) {
    const Dataset data = load_task(grid.base);
    const auto cells = grid.cells();
    struct Job {
        std::size_t cell;
        std::size_t seed_index;
    };
    std::vector<Job> jobs;
    AblationResult result;
    result.rows.resize(cells.size());
    for (std::size_t c = 0; c < cells.size(); ++c) {
        result.rows[c].cell = cells[c];
        if (!cell_feasible(cells[c], grid.base.backbone, grid.base.mixture.variant)) {
            result.rows[c].status = "skipped";
            result.rows[c].detail = "r >= d";
            continue;
        }
        result.rows[c].status = "ok";
        for (std::size_t s = 0; s < grid.seeds.size(); ++s) jobs.push_back({c, s});
    }

    std::vector<AblationRun> runs(jobs.size());
    std::vector<std::string> errors(jobs.size());
    std::atomic<std::size_t> next{0};
    std::mutex log_mutex;
    auto worker = [&] {
        for (std::size_t j = next++; j < jobs.size(); j = next++) {
            const Job& job = jobs[j];
            try {
                runs[j] = run_ablation_cell(grid, cells[job.cell], grid.seeds[job.seed_index], data);
                runs[j].cell = job.cell;
            } catch (const std::exception& e) {
                errors[j] = e.what();
            }
            if (log) {
                std::lock_guard lock(log_mutex);
                const auto& c = cells[job.cell];
                log("ablate: M=" + std::to_string(c.modules) + " r=" + std::to_string(c.bottleneck) +
                    " consistency=" + (c.consistency ? "on" : "off") + " sharing=" + to_string(c.sharing) +
                    " seed=" + std::to_string(grid.seeds[job.seed_index]) + (errors[j].empty() ? " done" : " failed: " + errors[j]));
            }
        }
    };
    const std::size_t n_threads = std::min(grid.threads, std::max<std::size_t>(1, jobs.size()));
    if (n_threads <= 1) {
        worker();
    } else {
        std::vector<std::jthread> pool;
        for (std::size_t t = 0; t < n_threads; ++t) pool.emplace_back(worker);
    }
    result.runs = jobs.size();

    for (std::size_t c = 0; c < cells.size(); ++c) {
        AblationRow& row = result.rows[c];
        if (row.status != "ok") continue;
        std::vector<std::vector<double>> per_mode(grid.modes.size());
        std::vector<double> losses;
        for (std::size_t j = 0; j < jobs.size(); ++j) {
            if (jobs[j].cell != c) continue;
            if (!errors[j].empty()) {
                row.status = "failed";
                row.detail = errors[j];
                continue;
            }
            for (std::size_t m = 0; m < grid.modes.size(); ++m) per_mode[m].push_back(runs[j].accuracy[m]);
            losses.push_back(runs[j].final_train_loss);
            ++row.runs;
        }
        row.mode_mean.resize(grid.modes.size());
        row.mode_std.resize(grid.modes.size());
        for (std::size_t m = 0; m < grid.modes.size(); ++m) detail::mean_std(per_mode[m], row.mode_mean[m], row.mode_std[m]);
        detail::mean_std(losses, row.loss_mean, row.loss_std);
    }
    return result;
}

inline void write_ablation_csv(std::ostream& os, const AblationGrid& grid, const AblationResult& result) {
    os << "M,r,consistency,sharing,status,runs";
    for (InferenceMode m : grid.modes) os << ',' << to_string(m) << "_mean," << to_string(m) << "_std";
    os << ",train_loss_mean,train_loss_std\n";
    for (const AblationRow& row : result.rows) {
        os << row.cell.modules << ',' << row.cell.bottleneck << ',' << (row.cell.consistency ? "on" : "off") << ','
           << to_string(row.cell.sharing) << ',' << row.status << ',' << row.runs;
        const bool ok = row.status == "ok";
        for (std::size_t m = 0; m < grid.modes.size(); ++m) {
            if (ok) {
                os << ',' << format_double(row.mode_mean[m]) << ',' << format_double(row.mode_std[m]);
            } else {
                os << ",,";
            }
        }
        if (ok) {
            os << ',' << format_double(row.loss_mean) << ',' << format_double(row.loss_std) << '\n';
        } else {
            os << ",,\n";
        }
    }
}

}  // namespace adamix
