#pragma once

// Optimization of the adaptation parameters with the backbone frozen:
// two independently routed passes per step, cross-entropy on the first pass
// plus a symmetric KL consistency term between the two.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "adamix/data.hpp"
#include "adamix/errors.hpp"
#include "adamix/mixture.hpp"
#include "adamix/ops.hpp"
#include "adamix/rng.hpp"
#include "adamix/tensor.hpp"
#include "adamix/transformer.hpp"

namespace adamix {

struct OptimizerState {
    std::vector<NamedTensor> params;  // trainable only
    std::vector<std::vector<double>> first_moment;
    std::vector<std::vector<double>> second_moment;
    std::size_t step = 0;
    double lr = 1e-3;
    double weight_decay = 0.0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;

    /// Keeps only tensors with requires_grad; moments start at zero.
    static OptimizerState create(const std::vector<NamedTensor>& candidates, double lr, double weight_decay) {
        OptimizerState s;
        s.lr = lr;
        s.weight_decay = weight_decay;
        for (const auto& p : candidates) {
            if (!p.tensor.requires_grad()) continue;
            s.params.push_back(p);
            s.first_moment.emplace_back(p.tensor.numel(), 0.0);
            s.second_moment.emplace_back(p.tensor.numel(), 0.0);
        }
        return s;
    }

    void zero_grad() {
        for (auto& p : params) p.tensor.clear_grad();
    }
};

/// One AdamW update with bias-corrected moments and decoupled weight decay,
/// using `opt.lr`. Parameters without a gradient count as zero gradient.
inline void adamw_step(OptimizerState& opt) {
    ++opt.step;
    const double t = static_cast<double>(opt.step);
    const double c1 = 1.0 - std::pow(opt.beta1, t);
    const double c2 = 1.0 - std::pow(opt.beta2, t);
    for (std::size_t i = 0; i < opt.params.size(); ++i) {
        Tensor& p = opt.params[i].tensor;
        if (!p.requires_grad()) continue;
        auto w = p.mutable_data();
        auto& m = opt.first_moment[i];
        auto& v = opt.second_moment[i];
        const bool has_grad = p.has_grad();
        for (std::size_t e = 0; e < w.size(); ++e) {
            const double g = has_grad ? p.grad()[e] : 0.0;
            m[e] = opt.beta1 * m[e] + (1.0 - opt.beta1) * g;
            v[e] = opt.beta2 * v[e] + (1.0 - opt.beta2) * g * g;
            const double update = (m[e] / c1) / (std::sqrt(v[e] / c2) + opt.eps);
            w[e] -= opt.lr * (update + opt.weight_decay * w[e]);
        }
    }
}

/// Linear warmup from 0 to `peak_lr` over warmup_fraction * total_steps, then
/// linear decay to 0 at `total_steps`.
inline double lr_at(std::size_t step, std::size_t total_steps, double warmup_fraction, double peak_lr) {
    if (total_steps == 0) return peak_lr;
    const double s = static_cast<double>(std::min(step, total_steps));
    const double total = static_cast<double>(total_steps);
    const double warmup = warmup_fraction * total;
    if (s < warmup) return peak_lr * s / warmup;
    if (warmup >= total) return peak_lr;
    return peak_lr * (total - s) / (total - warmup);
}

struct ConsistencyLoss {
    Tensor total;
    Tensor ce;
    Tensor kl;  // 0.5 * (KL(A||B) + KL(B||A))
};

/// CE(logits_a, labels) + 0.5 * (KL(A||B) + KL(B||A)). With
/// `stop_gradient_b` the second pass is treated as a constant target.
inline ConsistencyLoss consistency_loss(const Tensor& logits_a, const Tensor& logits_b, std::span<const int> labels,
                                        bool stop_gradient_b = false) {
    if (logits_a.shape() != logits_b.shape()) {
        throw DimensionError("consistency_loss: logits " + shape_str(logits_a.shape()) + " vs " + shape_str(logits_b.shape()));
    }
    const Tensor b = stop_gradient_b ? detach(logits_b) : logits_b;
    ConsistencyLoss out;
    out.ce = cross_entropy(logits_a, labels);
    out.kl = scale(add(kl_divergence(logits_a, b), kl_divergence(b, logits_a)), 0.5);
    out.total = add(out.ce, out.kl);
    return out;
}

struct TrainConfig {
    std::size_t epochs = 10;
    std::size_t batch_size = 32;
    double lr = 1e-2;
    double warmup_fraction = 0.06;
    double weight_decay = 0.1;
    bool consistency = true;
    bool kl_stop_gradient = false;
    bool train_head = true;
    std::uint64_t seed = 1;
    std::size_t eval_batch_size = 128;

    void validate() const {
        if (epochs == 0) throw ConfigError("train.epochs must be at least 1");
        if (batch_size == 0) throw ConfigError("train.batch_size must be at least 1");
        if (!(warmup_fraction >= 0.0 && warmup_fraction <= 1.0)) throw ConfigError("train.warmup must lie in [0, 1]");
        if (!(lr >= 0.0)) throw ConfigError("train.lr must be non-negative");
        if (!(weight_decay >= 0.0)) throw ConfigError("train.weight_decay must be non-negative");
    }
};

struct StepMetrics {
    double lr = 0.0;
    double ce = 0.0;
    double kl = 0.0;
    double total = 0.0;
    RoutingSelection pass_a;
    RoutingSelection pass_b;  // empty when consistency is off
    bool collision = false;   // both passes drew the same selection
};

/// One optimization step: route, forward (twice with consistency), backward,
/// AdamW at `lr`. Throws TrainingError on a non-finite loss.
inline StepMetrics train_step(const BackboneModel& model, const MixtureAdaptation& mixture, const Batch& batch,
                              OptimizerState& opt, Rng& routing_rng, double lr, const TrainConfig& config) {
    StepMetrics out;
    out.lr = lr;
    opt.zero_grad();
    const RoutingPolicy policy = mixture.config().routing;
    out.pass_a = select_routing(mixture.sites(), routing_rng, policy);
    Tensor logits_a = routed_forward(model, mixture, batch.tokens, out.pass_a);
    Tensor loss;
    if (config.consistency) {
        out.pass_b = select_routing(mixture.sites(), routing_rng, policy);
        out.collision = out.pass_a == out.pass_b;
        Tensor logits_b = routed_forward(model, mixture, batch.tokens, out.pass_b);
        ConsistencyLoss parts = consistency_loss(logits_a, logits_b, batch.labels, config.kl_stop_gradient);
        out.ce = parts.ce.item();
        out.kl = parts.kl.item();
        loss = parts.total;
    } else {
        loss = cross_entropy(logits_a, batch.labels);
        out.ce = loss.item();
    }
    out.total = loss.item();
    if (!std::isfinite(out.total)) {
        std::ostringstream dump;
        dump << "non-finite loss at step " << opt.step << ": ce=" << out.ce << " kl=" << out.kl << " lr=" << lr << " route_a=";
        for (const auto& p : out.pass_a.pairs) dump << '(' << p.up << ',' << p.down << ')';
        throw TrainingError(dump.str());
    }
    if (loss.requires_grad()) backward(loss);
    opt.lr = lr;
    adamw_step(opt);
    return out;
}

enum class InferenceMode { merge, random_route, fixed_route, ensemble };

inline const char* to_string(InferenceMode m) {
    switch (m) {
        case InferenceMode::merge: return "merge";
        case InferenceMode::random_route: return "random_route";
        case InferenceMode::fixed_route: return "fixed_route";
        case InferenceMode::ensemble: return "ensemble";
    }
    return "?";
}

inline InferenceMode parse_inference_mode(const std::string& s) {
    if (s == "merge") return InferenceMode::merge;
    if (s == "random_route") return InferenceMode::random_route;
    if (s == "fixed_route") return InferenceMode::fixed_route;
    if (s == "ensemble") return InferenceMode::ensemble;
    throw ConfigError("eval.mode: unknown inference mode '" + s + "'");
}

struct InferenceSpec {
    InferenceMode mode = InferenceMode::merge;
    std::size_t passes = 4;  // ensemble T
    std::uint64_t seed = 0;  // consumed by random_route and ensemble
};

/// Predicted class per example. Random and ensemble modes draw one routing
/// per batch from a stream seeded with `spec.seed`; merge mode averages the
/// modules first unless `mixture` is already merged.
inline std::vector<int> predict(const BackboneModel& model, const MixtureAdaptation& mixture,
                                std::span<const LabeledExample> examples, const InferenceSpec& spec, std::size_t batch_size) {
    NoGradGuard no_grad;
    Rng rng(spec.seed);
    MixtureAdaptation merged_storage;
    const MixtureAdaptation* active = &mixture;
    if (spec.mode == InferenceMode::merge && !mixture.is_merged()) {
        merged_storage = mixture.merged();
        active = &merged_storage;
    }
    std::vector<int> out;
    out.reserve(examples.size());
    for (const Batch& batch : sequential_batches(examples, batch_size)) {
        Tensor scores;
        switch (spec.mode) {
            case InferenceMode::merge:
            case InferenceMode::fixed_route: scores = fixed_route_forward(model, *active, batch.tokens); break;
            case InferenceMode::random_route: scores = random_route_forward(model, *active, batch.tokens, rng); break;
            case InferenceMode::ensemble: scores = ensemble_predict(model, *active, batch.tokens, spec.passes, rng); break;
        }
        const std::size_t classes = scores.dim(1);
        for (std::size_t r = 0; r < batch.tokens.batch; ++r) {
            const auto row = scores.data().subspan(r * classes, classes);
            out.push_back(static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin()));
        }
    }
    return out;
}

inline double accuracy(const BackboneModel& model, const MixtureAdaptation& mixture, std::span<const LabeledExample> examples,
                       const InferenceSpec& spec, std::size_t batch_size) {
    if (examples.empty()) return 0.0;
    const auto predicted = predict(model, mixture, examples, spec, batch_size);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < examples.size(); ++i) correct += predicted[i] == examples[i].label;
    return static_cast<double>(correct) / static_cast<double>(examples.size());
}

struct EpochMetrics {
    std::size_t step = 0;
    double lr = 0.0;
    double ce_loss = 0.0;
    double kl_loss = 0.0;
    double total_loss = 0.0;
    double eval_accuracy = 0.0;
    double train_accuracy = -1.0;  // only when TrainLoopOptions::track_train_accuracy
};

struct TrainState {
    OptimizerState optimizer;
    std::size_t step = 0;
    std::size_t routing_collisions = 0;
    Rng routing_rng;
    Rng order_rng;
    std::vector<EpochMetrics> history;
};

struct TrainLoopOptions {
    bool track_train_accuracy = false;
    InferenceSpec eval{};  // mode used for the per-epoch eval accuracy
    std::function<void(const EpochMetrics&)> on_epoch;
};

/// Seeded, deterministic run over `data.train`; appends one history row per
/// epoch (mean losses, lr of the last step, held-out accuracy).
inline TrainState train_loop(const TrainConfig& config, const Dataset& data, BackboneModel& model, MixtureAdaptation& mixture,
                             const TrainLoopOptions& options = {}) {
    config.validate();
    if (data.train.empty()) throw DataError("training set is empty");
    freeze_backbone(model, config.train_head);
    std::vector<NamedTensor> trainable = mixture.parameters();
    for (auto& p : model.head_parameters()) trainable.push_back(p);

    TrainState state;
    state.optimizer = OptimizerState::create(trainable, config.lr, config.weight_decay);
    state.routing_rng.seed(derive_seed(config.seed, Stream::routing));
    state.order_rng.seed(derive_seed(config.seed, Stream::data_order));
    const std::size_t per_epoch = (data.train.size() + config.batch_size - 1) / config.batch_size;
    const std::size_t total_steps = per_epoch * config.epochs;

    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        EpochMetrics row;
        std::size_t seen = 0;
        for (const auto& idx : batch_indices(data.train.size(), config.batch_size, state.order_rng)) {
            const Batch batch = make_batch(data.train, idx);
            const double lr = lr_at(state.step, total_steps, config.warmup_fraction, config.lr);
            const StepMetrics m = train_step(model, mixture, batch, state.optimizer, state.routing_rng, lr, config);
            const double w = static_cast<double>(idx.size());
            row.ce_loss += m.ce * w;
            row.kl_loss += m.kl * w;
            row.total_loss += m.total * w;
            row.lr = lr;
            seen += idx.size();
            state.routing_collisions += m.collision;
            ++state.step;
        }
        row.ce_loss /= static_cast<double>(seen);
        row.kl_loss /= static_cast<double>(seen);
        row.total_loss /= static_cast<double>(seen);
        row.step = state.step;
        row.eval_accuracy = accuracy(model, mixture, data.test, options.eval, config.eval_batch_size);
        if (options.track_train_accuracy) {
            row.train_accuracy = accuracy(model, mixture, data.train, options.eval, config.eval_batch_size);
        }
        state.history.push_back(row);
        if (options.on_epoch) options.on_epoch(row);
    }
    return state;
}

inline std::string format_double(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

/// CSV with columns step,lr,ce_loss,kl_loss,total_loss,eval_accuracy.
inline void write_metrics_csv(std::ostream& os, std::span<const EpochMetrics> history) {
    os << "step,lr,ce_loss,kl_loss,total_loss,eval_accuracy\n";
    for (const auto& r : history) {
        os << r.step << ',' << format_double(r.lr) << ',' << format_double(r.ce_loss) << ',' << format_double(r.kl_loss) << ','
           << format_double(r.total_loss) << ',' << format_double(r.eval_accuracy) << '\n';
    }
}

}  // namespace adamix
