#pragma once

// Mixture of adaptation modules: M modules per insertion site, one stochastic
// (up, down) pair per site per batch during training, and uniform weight
// averaging into a single module for inference.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <unordered_set>
#include <variant>
#include <vector>

#include "adamix/adaptation.hpp"
#include "adamix/errors.hpp"
#include "adamix/ops.hpp"
#include "adamix/rng.hpp"
#include "adamix/tensor.hpp"
#include "adamix/transformer.hpp"

namespace adamix {

enum class SitePoint { after_attention, after_ffn, query, value };

inline const char* to_string(SitePoint p) {
    switch (p) {
        case SitePoint::after_attention: return "attn";
        case SitePoint::after_ffn: return "ffn";
        case SitePoint::query: return "query";
        case SitePoint::value: return "value";
    }
    return "?";
}

/// How the up index is drawn relative to the down index.
enum class RoutingPolicy { independent, tied };

struct MixtureSite {
    std::size_t layer = 0;
    SitePoint point = SitePoint::after_ffn;
    Variant variant = Variant::adapter;
    Sharing sharing = Sharing::none;
    // Under Sharing::project_up every module holds the same up-projection
    // handle (W_up/b_up for adapters, B for LoRA).
    std::vector<AdaptationModule> modules;

    [[nodiscard]] std::size_t size() const { return modules.size(); }
};

/// Indices (0-based) of the module supplying the up- and down-projection.
struct RoutePair {
    std::size_t up = 0;
    std::size_t down = 0;
    friend bool operator==(const RoutePair&, const RoutePair&) = default;
};

/// One pair per site; the whole batch goes through the same pairs.
struct RoutingSelection {
    std::vector<RoutePair> pairs;
    friend bool operator==(const RoutingSelection&, const RoutingSelection&) = default;

    static RoutingSelection fixed(std::size_t sites) { return {std::vector<RoutePair>(sites)}; }
};

inline RoutingSelection select_routing(std::span<const MixtureSite> sites, Rng& rng,
                                       RoutingPolicy policy = RoutingPolicy::independent) {
    RoutingSelection sel;
    sel.pairs.reserve(sites.size());
    for (const MixtureSite& site : sites) {
        std::uniform_int_distribution<std::size_t> pick(0, site.size() - 1);
        RoutePair pair;
        pair.down = pick(rng);
        if (site.sharing == Sharing::project_up) {
            pair.up = 0;
        } else if (policy == RoutingPolicy::tied) {
            pair.up = pair.down;
        } else {
            pair.up = pick(rng);
        }
        sel.pairs.push_back(pair);
    }
    return sel;
}

/// The single module formed by the up-projection of module `pair.up` and the
/// down-projection of module `pair.down`.
inline AdaptationModule compose_route(const MixtureSite& site, RoutePair pair) {
    if (pair.up >= site.size() || pair.down >= site.size()) {
        throw RoutingError("route (" + std::to_string(pair.up) + ", " + std::to_string(pair.down) + ") out of range for " +
                           std::to_string(site.size()) + " modules at layer " + std::to_string(site.layer));
    }
    if (site.variant == Variant::adapter) {
        const auto& up = std::get<AdapterModule>(site.modules[pair.up]);
        const auto& down = std::get<AdapterModule>(site.modules[pair.down]);
        return AdapterModule{down.w_down, down.b_down, up.w_up, up.b_up};
    }
    const auto& up = std::get<LoraModule>(site.modules[pair.up]);
    const auto& down = std::get<LoraModule>(site.modules[pair.down]);
    return LoraModule{down.a, up.b, down.alpha};
}

/// Routed forward through one site: exactly one down and one up product.
/// LoRA sites need the frozen projection weight they adapt.
inline Tensor mixture_forward(const MixtureSite& site, const Tensor& x, RoutePair pair, OpCounter* counter = nullptr,
                              const Tensor* frozen_w = nullptr) {
    AdaptationModule routed = compose_route(site, pair);
    if (const auto* adapter = std::get_if<AdapterModule>(&routed)) return adapter_forward(*adapter, x, counter);
    if (!frozen_w) throw ContractError("LoRA mixture site needs the frozen weight it adapts");
    return lora_forward(std::get<LoraModule>(routed), x, *frozen_w, counter);
}

/// Sparse-MoE style output x + sum_i gate_i * E_i(x) over the site's adapters.
/// A one-hot gate reproduces mixture_forward with route (i, i).
inline Tensor gated_forward(const MixtureSite& site, const Tensor& x, std::span<const double> gate) {
    if (site.variant != Variant::adapter) throw ContractError("gated_forward is defined for adapter sites");
    if (gate.size() != site.size()) throw RoutingError("gate has " + std::to_string(gate.size()) + " entries for " + std::to_string(site.size()) + " modules");
    Tensor mixed;
    for (std::size_t i = 0; i < site.size(); ++i) {
        Tensor term = scale(adapter_branch(std::get<AdapterModule>(site.modules[i]), x), gate[i]);
        mixed = mixed.defined() ? add(mixed, term) : term;
    }
    return add(x, mixed);
}

namespace detail {

inline Tensor average(const std::vector<Tensor>& tensors) {
    Tensor out(tensors.front().shape(), 0.0, true);
    auto acc = out.mutable_data();
    for (const Tensor& t : tensors)
        for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += t.data()[i];
    const double inv = 1.0 / static_cast<double>(tensors.size());
    for (double& v : acc) v *= inv;
    return out;
}

}  // namespace detail

/// Uniform 1/M average of every corresponding projection. Tied projections
/// are returned as-is (as a fresh copy). The site is left untouched.
inline AdaptationModule merge_site(const MixtureSite& site) {
    if (site.modules.empty()) throw ContractError("cannot merge an empty mixture site");
    const bool tied_up = site.sharing == Sharing::project_up;
    auto gather = [&](auto member) {
        std::vector<Tensor> out;
        for (const auto& m : site.modules) out.push_back(member(m));
        return out;
    };
    auto copy = [](const Tensor& t) {
        Tensor c = t.detach();
        c.set_requires_grad(true);
        return c;
    };
    if (site.variant == Variant::adapter) {
        auto get = [](auto field) { return [field](const AdaptationModule& m) { return std::get<AdapterModule>(m).*field; }; };
        AdapterModule merged;
        merged.w_down = detail::average(gather(get(&AdapterModule::w_down)));
        merged.b_down = detail::average(gather(get(&AdapterModule::b_down)));
        const auto& first = std::get<AdapterModule>(site.modules.front());
        merged.w_up = tied_up ? copy(first.w_up) : detail::average(gather(get(&AdapterModule::w_up)));
        merged.b_up = tied_up ? copy(first.b_up) : detail::average(gather(get(&AdapterModule::b_up)));
        return merged;
    }
    const auto& first = std::get<LoraModule>(site.modules.front());
    LoraModule merged;
    merged.alpha = first.alpha;
    merged.a = detail::average(gather([](const AdaptationModule& m) { return std::get<LoraModule>(m).a; }));
    merged.b = tied_up ? copy(first.b) : detail::average(gather([](const AdaptationModule& m) { return std::get<LoraModule>(m).b; }));
    return merged;
}

struct MixtureConfig {
    Variant variant = Variant::adapter;
    std::size_t modules = 4;     // M
    std::size_t bottleneck = 16;  // r
    Sharing sharing = Sharing::none;
    // Adapter variant: add a site after the attention sub-layer too (the
    // default is one site per layer, after the FFN).
    bool attention_sites = false;
    double lora_alpha = 8.0;
    RoutingPolicy routing = RoutingPolicy::independent;
};

/// All mixture sites of one model.
class MixtureAdaptation {
public:
    MixtureAdaptation() = default;

    static MixtureAdaptation create(const BackboneConfig& backbone, const MixtureConfig& config, std::uint64_t seed) {
        if (config.modules == 0) throw ConfigError("mixture.M must be at least 1");
        MixtureAdaptation out;
        out.config_ = config;
        out.num_layers_ = backbone.num_layers;
        const std::size_t d = backbone.model_dim;
        std::uint64_t stream = 0;
        for (std::size_t layer = 0; layer < backbone.num_layers; ++layer) {
            for (SitePoint point : points_for(config)) {
                MixtureSite site{layer, point, config.variant, config.sharing, {}};
                for (std::size_t j = 0; j < config.modules; ++j) {
                    const std::uint64_t module_seed = derive_seed(seed, stream++);
                    if (config.variant == Variant::adapter) {
                        site.modules.emplace_back(init_adapter(d, config.bottleneck, module_seed));
                    } else {
                        site.modules.emplace_back(init_lora(d, d, config.bottleneck, config.lora_alpha, module_seed));
                    }
                }
                if (config.sharing == Sharing::project_up) out.tie_up_projections(site);
                out.sites_.push_back(std::move(site));
            }
        }
        return out;
    }

    static std::vector<SitePoint> points_for(const MixtureConfig& config) {
        if (config.variant == Variant::lora) return {SitePoint::query, SitePoint::value};
        if (config.attention_sites) return {SitePoint::after_attention, SitePoint::after_ffn};
        return {SitePoint::after_ffn};
    }

    [[nodiscard]] const MixtureConfig& config() const { return config_; }
    [[nodiscard]] std::size_t num_layers() const { return num_layers_; }
    [[nodiscard]] bool is_merged() const { return merged_; }
    [[nodiscard]] std::span<const MixtureSite> sites() const { return sites_; }
    [[nodiscard]] std::vector<MixtureSite>& mutable_sites() { return sites_; }

    [[nodiscard]] const MixtureSite* find(std::size_t layer, SitePoint point) const {
        for (const auto& s : sites_)
            if (s.layer == layer && s.point == point) return &s;
        return nullptr;
    }

    /// Hooks that route every site through `selection`. The hooks refer to
    /// this object and must not outlive it.
    [[nodiscard]] AdaptationHooks hooks(const RoutingSelection& selection, OpCounter* counter = nullptr) const {
        if (selection.pairs.size() != sites_.size()) {
            throw RoutingError("selection has " + std::to_string(selection.pairs.size()) + " pairs for " +
                               std::to_string(sites_.size()) + " sites");
        }
        AdaptationHooks h;
        if (config_.variant == Variant::adapter) {
            h.site = [this, selection, counter](std::size_t layer, InsertionPoint point, const Tensor& x) {
                const SitePoint sp = point == InsertionPoint::after_ffn ? SitePoint::after_ffn : SitePoint::after_attention;
                const std::size_t idx = index_of(layer, sp);
                if (idx == npos) return x;
                return mixture_forward(sites_[idx], x, selection.pairs[idx], counter);
            };
        } else {
            h.projection = [this, selection, counter](std::size_t layer, Projection which, const Tensor& x, const Tensor& w,
                                                      const Tensor& b) {
                std::size_t idx = npos;
                if (which == Projection::query) idx = index_of(layer, SitePoint::query);
                if (which == Projection::value) idx = index_of(layer, SitePoint::value);
                if (idx == npos) return add(matmul_nt(x, w), b);
                return add(mixture_forward(sites_[idx], x, selection.pairs[idx], counter, &w), b);
            };
        }
        return h;
    }

    /// Every site collapsed to its 1/M average; the result has M = 1.
    [[nodiscard]] MixtureAdaptation merged() const {
        MixtureAdaptation out;
        out.config_ = config_;
        out.config_.modules = 1;
        out.num_layers_ = num_layers_;
        out.merged_ = true;
        for (const MixtureSite& site : sites_) {
            MixtureSite m{site.layer, site.point, site.variant, site.sharing, {merge_site(site)}};
            out.sites_.push_back(std::move(m));
        }
        return out;
    }

    /// Distinct trainable tensors; a tied projection appears once.
    [[nodiscard]] std::vector<NamedTensor> parameters() const {
        std::vector<NamedTensor> out;
        std::unordered_set<const detail::TensorImpl*> seen;
        const bool adapter = config_.variant == Variant::adapter;
        for (const MixtureSite& site : sites_) {
            const std::string prefix = "site." + std::to_string(site.layer) + "." + to_string(site.point) + ".";
            for (std::size_t j = 0; j < site.size(); ++j) {
                const auto tensors = module_tensors(site.modules[j]);
                static const char* adapter_names[] = {"w_down", "b_down", "w_up", "b_up"};
                static const char* lora_names[] = {"a", "b"};
                for (std::size_t t = 0; t < tensors.size(); ++t) {
                    if (!seen.insert(tensors[t].impl()).second) continue;
                    const bool up = adapter ? t >= 2 : t == 1;
                    const std::string owner = (site.sharing == Sharing::project_up && up) ? "shared" : "m" + std::to_string(j);
                    out.push_back({prefix + owner + "." + (adapter ? adapter_names[t] : lora_names[t]), tensors[t]});
                }
            }
        }
        return out;
    }

    [[nodiscard]] std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& p : parameters()) n += p.tensor.numel();
        return n;
    }

    [[nodiscard]] AdaptationShape shape(std::size_t model_dim) const {
        return {model_dim, num_layers_, config_.bottleneck, config_.variant, points_for(config_).size(), config_.sharing,
                config_.modules, merged_};
    }

    /// Replaces every module's up-projection with module 0's handle.
    static void tie_up_projections(MixtureSite& site) {
        if (site.variant == Variant::adapter) {
            const auto first = std::get<AdapterModule>(site.modules.front());
            for (auto& m : site.modules) {
                auto& a = std::get<AdapterModule>(m);
                a.w_up = first.w_up;
                a.b_up = first.b_up;
            }
        } else {
            const auto first = std::get<LoraModule>(site.modules.front());
            for (auto& m : site.modules) std::get<LoraModule>(m).b = first.b;
        }
    }

    /// Assembles an object from already-built sites (checkpoint loading).
    static MixtureAdaptation from_sites(const MixtureConfig& config, std::size_t num_layers, std::vector<MixtureSite> sites,
                                        bool merged) {
        MixtureAdaptation out;
        out.config_ = config;
        out.num_layers_ = num_layers;
        out.sites_ = std::move(sites);
        out.merged_ = merged;
        return out;
    }

private:
    static constexpr std::size_t npos = static_cast<std::size_t>(-1);

    [[nodiscard]] std::size_t index_of(std::size_t layer, SitePoint point) const {
        for (std::size_t i = 0; i < sites_.size(); ++i)
            if (sites_[i].layer == layer && sites_[i].point == point) return i;
        return npos;
    }

    MixtureConfig config_;
    std::size_t num_layers_ = 0;
    bool merged_ = false;
    std::vector<MixtureSite> sites_;
};

/// Backbone forward with every site routed through `selection`.
inline Tensor routed_forward(const BackboneModel& model, const MixtureAdaptation& mixture, const TokenBatch& tokens,
                             const RoutingSelection& selection, OpCounter* counter = nullptr) {
    const AdaptationHooks hooks = mixture.hooks(selection, counter);
    return encoder_forward(model, tokens, &hooks);
}

/// Deterministic forward through module 0 at every site.
inline Tensor fixed_route_forward(const BackboneModel& model, const MixtureAdaptation& mixture, const TokenBatch& tokens) {
    return routed_forward(model, mixture, tokens, RoutingSelection::fixed(mixture.sites().size()));
}

/// Forward through one stochastic routing drawn from `rng`.
inline Tensor random_route_forward(const BackboneModel& model, const MixtureAdaptation& mixture, const TokenBatch& tokens,
                                   Rng& rng) {
    return routed_forward(model, mixture, tokens, select_routing(mixture.sites(), rng, mixture.config().routing));
}

/// Monte-Carlo average of softmax outputs over `passes` stochastic routings.
inline Tensor ensemble_predict(const BackboneModel& model, const MixtureAdaptation& mixture, const TokenBatch& tokens,
                               std::size_t passes, Rng& rng) {
    if (passes == 0) throw ConfigError("ensemble needs T >= 1");
    NoGradGuard no_grad;
    Tensor total;
    for (std::size_t t = 0; t < passes; ++t) {
        Tensor probs = softmax(random_route_forward(model, mixture, tokens, rng), -1);
        if (!total.defined()) {
            total = probs;
            continue;
        }
        auto acc = total.mutable_data();
        for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += probs.data()[i];
    }
    auto acc = total.mutable_data();
    for (double& v : acc) v /= static_cast<double>(passes);
    return total;
}

}  // namespace adamix
