#pragma once

// Single adaptation modules: bottleneck adapters and low-rank (LoRA) pairs.

#include <cstddef>
#include <cstdint>
#include <string>
#include <variant>
#include <vector>

#include "adamix/errors.hpp"
#include "adamix/ops.hpp"
#include "adamix/rng.hpp"
#include "adamix/tensor.hpp"

namespace adamix {

enum class Variant { adapter, lora };
enum class Sharing { none, project_up };

inline const char* to_string(Variant v) { return v == Variant::adapter ? "adapter" : "lora"; }
inline const char* to_string(Sharing s) { return s == Sharing::none ? "none" : "project_up"; }

/// Counts matrix products issued by adaptation modules. Used to show that a
/// routed forward costs the same as a single module regardless of M.
struct OpCounter {
    std::size_t matmuls = 0;
    std::size_t multiply_adds = 0;

    void record(const Tensor& lhs, const Tensor& weight) {
        ++matmuls;
        multiply_adds += lhs.numel() * weight.numel() / lhs.shape().back();
    }
};

/// x <- x + f(x W_down + b_down) W_up + b_up, with W_down [d x r], W_up [r x d].
struct AdapterModule {
    Tensor w_down;
    Tensor b_down;
    Tensor w_up;
    Tensor b_up;

    [[nodiscard]] std::size_t bottleneck() const { return w_down.dim(1); }
    [[nodiscard]] std::size_t model_dim() const { return w_down.dim(0); }
};

/// Low-rank delta (alpha / r) * B A added to a frozen [d_out x d_in] weight.
struct LoraModule {
    Tensor a;  // [r x d_in]
    Tensor b;  // [d_out x r]
    double alpha = 8.0;

    [[nodiscard]] std::size_t rank() const { return a.dim(0); }
    [[nodiscard]] double scaling() const { return alpha / static_cast<double>(rank()); }
};

using AdaptationModule = std::variant<AdapterModule, LoraModule>;

/// The adapter bottleneck branch without its residual: f(x W_down + b_down) W_up + b_up.
inline Tensor adapter_branch(const AdapterModule& m, const Tensor& x, OpCounter* counter = nullptr) {
    if (x.rank() < 2 || x.shape().back() != m.model_dim() || m.w_up.dim(0) != m.bottleneck() ||
        m.w_up.dim(1) != m.model_dim()) {
        throw DimensionError("adapter: input " + shape_str(x.shape()) + " does not fit W_down " + shape_str(m.w_down.shape()) +
                             " / W_up " + shape_str(m.w_up.shape()));
    }
    if (counter) counter->record(x, m.w_down);
    Tensor hidden = gelu(add(matmul(x, m.w_down), m.b_down));
    if (counter) counter->record(hidden, m.w_up);
    return add(matmul(hidden, m.w_up), m.b_up);
}

inline Tensor adapter_forward(const AdapterModule& m, const Tensor& x, OpCounter* counter = nullptr) {
    return add(x, adapter_branch(m, x, counter));
}

/// (alpha / r) * x A^T B^T
inline Tensor lora_delta(const LoraModule& m, const Tensor& x, OpCounter* counter = nullptr) {
    if (x.rank() < 2 || x.shape().back() != m.a.dim(1) || m.b.dim(1) != m.rank()) {
        throw DimensionError("lora: input " + shape_str(x.shape()) + " does not fit A " + shape_str(m.a.shape()) + " / B " +
                             shape_str(m.b.shape()));
    }
    if (counter) counter->record(x, m.a);
    Tensor low = matmul_nt(x, m.a);
    if (counter) counter->record(low, m.b);
    return scale(matmul_nt(low, m.b), m.scaling());
}

/// x W^T + (alpha / r) x A^T B^T for a frozen W [d_out x d_in].
inline Tensor lora_forward(const LoraModule& m, const Tensor& x, const Tensor& frozen_w, OpCounter* counter = nullptr) {
    if (frozen_w.rank() != 2 || frozen_w.dim(1) != m.a.dim(1) || frozen_w.dim(0) != m.b.dim(0)) {
        throw DimensionError("lora: frozen weight " + shape_str(frozen_w.shape()) + " does not fit A " +
                             shape_str(m.a.shape()) + " / B " + shape_str(m.b.shape()));
    }
    return add(matmul_nt(x, frozen_w), lora_delta(m, x, counter));
}

/// W_down ~ N(0, 0.01^2); W_up and both biases zero, so a fresh adapter is
/// the identity map.
inline AdapterModule init_adapter(std::size_t d, std::size_t r, std::uint64_t seed) {
    if (r == 0 || r >= d) {
        throw ConfigError("adapter bottleneck r=" + std::to_string(r) + " must satisfy 0 < r < d=" + std::to_string(d));
    }
    Rng rng(seed);
    AdapterModule m{Tensor({d, r}, 0.0, true), Tensor({r}, 0.0, true), Tensor({r, d}, 0.0, true), Tensor({d}, 0.0, true)};
    fill_gaussian(m.w_down.mutable_data(), 0.01, rng);
    return m;
}

/// A ~ N(0, 0.02^2), B = 0.
inline LoraModule init_lora(std::size_t d_in, std::size_t d_out, std::size_t r, double alpha, std::uint64_t seed) {
    if (r == 0 || r > std::min(d_in, d_out)) {
        throw ConfigError("lora rank r=" + std::to_string(r) + " must satisfy 0 < r <= min(" + std::to_string(d_in) + ", " +
                          std::to_string(d_out) + ")");
    }
    Rng rng(seed);
    LoraModule m{Tensor({r, d_in}, 0.0, true), Tensor({d_out, r}, 0.0, true), alpha};
    fill_gaussian(m.a.mutable_data(), 0.02, rng);
    return m;
}

/// Down-projection tensors first, then up-projection tensors.
inline std::vector<Tensor> module_tensors(const AdaptationModule& m) {
    if (const auto* a = std::get_if<AdapterModule>(&m)) return {a->w_down, a->b_down, a->w_up, a->b_up};
    const auto& l = std::get<LoraModule>(m);
    return {l.a, l.b};
}

struct AdaptationShape {
    std::size_t model_dim = 0;
    std::size_t num_layers = 0;
    std::size_t bottleneck = 0;
    Variant variant = Variant::adapter;
    // Adapter sites per layer, or adapted weight matrices per layer for LoRA.
    std::size_t points_per_layer = 1;
    Sharing sharing = Sharing::none;
    std::size_t modules = 1;
    bool merged = true;
};

/// Tunable adaptation parameters. Merged (inference) counts use one module
/// per point; training counts multiply every unshared matrix by M.
inline std::size_t count_adaptation_params(const AdaptationShape& s) {
    if (s.model_dim == 0 || s.num_layers == 0 || s.bottleneck == 0 || s.points_per_layer == 0 || s.modules == 0) {
        throw ConfigError("parameter count arguments must be positive");
    }
    const std::size_t d = s.model_dim, r = s.bottleneck;
    const std::size_t down = s.variant == Variant::adapter ? d * r + r : d * r;
    const std::size_t up = s.variant == Variant::adapter ? r * d + d : d * r;
    std::size_t per_point = down + up;
    if (!s.merged) {
        per_point = s.modules * down + (s.sharing == Sharing::project_up ? up : s.modules * up);
    }
    return s.num_layers * s.points_per_layer * per_point;
}

}  // namespace adamix
