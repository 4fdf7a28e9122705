#pragma once

// Toy post-LN transformer encoder that stands in for the frozen pretrained
// model. Adaptation modules attach through AdaptationHooks: site hooks run on
// a sub-layer output before its residual add and layer norm, projection hooks
// replace the query/value linear maps (low-rank variant).

#include <boost/crc.hpp>

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "adamix/errors.hpp"
#include "adamix/ops.hpp"
#include "adamix/rng.hpp"
#include "adamix/tensor.hpp"

namespace adamix {

struct BackboneConfig {
    std::size_t num_layers = 2;
    std::size_t model_dim = 32;
    std::size_t num_heads = 4;
    std::size_t ffn_dim = 64;
    std::size_t vocab_size = 64;
    std::size_t max_seq_len = 16;
    std::size_t num_classes = 4;

    void validate() const {
        auto positive = [](std::size_t v, const char* name) {
            if (v == 0) throw ConfigError(std::string("model.") + name + " must be positive");
        };
        positive(num_layers, "layers");
        positive(model_dim, "dim");
        positive(num_heads, "heads");
        positive(ffn_dim, "ffn");
        positive(vocab_size, "vocab");
        positive(max_seq_len, "seq_len");
        positive(num_classes, "classes");
        if (model_dim % num_heads != 0) {
            throw ConfigError("model.heads=" + std::to_string(num_heads) + " does not divide model.dim=" +
                              std::to_string(model_dim));
        }
    }
};

enum class InsertionPoint { after_attention, after_ffn };
enum class Projection { query, key, value, output };

struct NamedTensor {
    std::string name;
    Tensor tensor;
};

/// Linear maps are stored [out x in] and applied as x * W^T + b.
struct EncoderLayer {
    Tensor query_weight, query_bias;
    Tensor key_weight, key_bias;
    Tensor value_weight, value_bias;
    Tensor output_weight, output_bias;
    Tensor attention_norm_gain, attention_norm_bias;
    Tensor ffn_in_weight, ffn_in_bias;
    Tensor ffn_out_weight, ffn_out_bias;
    Tensor ffn_norm_gain, ffn_norm_bias;
};

struct BackboneModel {
    BackboneConfig config;
    Tensor token_embedding;     // [vocab x d]
    Tensor position_embedding;  // [seq x d]
    std::vector<EncoderLayer> layers;
    Tensor head_weight;  // [classes x d]
    Tensor head_bias;    // [classes]

    /// Encoder parameters, excluding the classifier head.
    [[nodiscard]] std::vector<NamedTensor> backbone_parameters() const {
        std::vector<NamedTensor> out{{"embed.token", token_embedding}, {"embed.position", position_embedding}};
        for (std::size_t i = 0; i < layers.size(); ++i) {
            const EncoderLayer& l = layers[i];
            const std::string p = "layer." + std::to_string(i) + ".";
            out.push_back({p + "attn.query.weight", l.query_weight});
            out.push_back({p + "attn.query.bias", l.query_bias});
            out.push_back({p + "attn.key.weight", l.key_weight});
            out.push_back({p + "attn.key.bias", l.key_bias});
            out.push_back({p + "attn.value.weight", l.value_weight});
            out.push_back({p + "attn.value.bias", l.value_bias});
            out.push_back({p + "attn.output.weight", l.output_weight});
            out.push_back({p + "attn.output.bias", l.output_bias});
            out.push_back({p + "attn.norm.gain", l.attention_norm_gain});
            out.push_back({p + "attn.norm.bias", l.attention_norm_bias});
            out.push_back({p + "ffn.in.weight", l.ffn_in_weight});
            out.push_back({p + "ffn.in.bias", l.ffn_in_bias});
            out.push_back({p + "ffn.out.weight", l.ffn_out_weight});
            out.push_back({p + "ffn.out.bias", l.ffn_out_bias});
            out.push_back({p + "ffn.norm.gain", l.ffn_norm_gain});
            out.push_back({p + "ffn.norm.bias", l.ffn_norm_bias});
        }
        return out;
    }

    [[nodiscard]] std::vector<NamedTensor> head_parameters() const {
        return {{"head.weight", head_weight}, {"head.bias", head_bias}};
    }

    [[nodiscard]] std::vector<NamedTensor> parameters() const {
        auto out = backbone_parameters();
        for (auto& p : head_parameters()) out.push_back(std::move(p));
        return out;
    }
};

/// Element count of the encoder (embeddings + layers), without the head.
inline std::size_t backbone_param_count(const BackboneConfig& c) {
    const std::size_t d = c.model_dim, f = c.ffn_dim;
    const std::size_t per_layer = 4 * (d * d + d) + 2 * d + (f * d + f) + (d * f + d) + 2 * d;
    return c.vocab_size * d + c.max_seq_len * d + c.num_layers * per_layer;
}

inline std::size_t head_param_count(const BackboneConfig& c) { return c.num_classes * c.model_dim + c.num_classes; }

/// Deterministic init: N(0,1) embeddings, N(0, 1/fan_in) linear weights,
/// zero biases, unit norm gains. Everything starts trainable.
inline BackboneModel build_backbone(const BackboneConfig& config, std::uint64_t seed) {
    config.validate();
    Rng rng(seed);
    const std::size_t d = config.model_dim, f = config.ffn_dim;
    auto gaussian = [&rng](Shape shape, double stddev) {
        Tensor t(std::move(shape), 0.0, true);
        fill_gaussian(t.mutable_data(), stddev, rng);
        return t;
    };
    auto linear = [&](std::size_t out, std::size_t in) { return gaussian({out, in}, 1.0 / std::sqrt(static_cast<double>(in))); };
    auto zeros = [](std::size_t n) { return Tensor({n}, 0.0, true); };
    auto ones = [](std::size_t n) { return Tensor({n}, 1.0, true); };

    BackboneModel model;
    model.config = config;
    model.token_embedding = gaussian({config.vocab_size, d}, 1.0);
    model.position_embedding = gaussian({config.max_seq_len, d}, 1.0);
    for (std::size_t i = 0; i < config.num_layers; ++i) {
        EncoderLayer l;
        l.query_weight = linear(d, d);
        l.query_bias = zeros(d);
        l.key_weight = linear(d, d);
        l.key_bias = zeros(d);
        l.value_weight = linear(d, d);
        l.value_bias = zeros(d);
        l.output_weight = linear(d, d);
        l.output_bias = zeros(d);
        l.attention_norm_gain = ones(d);
        l.attention_norm_bias = zeros(d);
        l.ffn_in_weight = linear(f, d);
        l.ffn_in_bias = zeros(f);
        l.ffn_out_weight = linear(d, f);
        l.ffn_out_bias = zeros(d);
        l.ffn_norm_gain = ones(d);
        l.ffn_norm_bias = zeros(d);
        model.layers.push_back(std::move(l));
    }
    model.head_weight = linear(config.num_classes, d);
    model.head_bias = zeros(config.num_classes);
    return model;
}

/// Marks every encoder parameter non-trainable. The classifier head is
/// trainable iff `train_head`.
inline void freeze_backbone(BackboneModel& model, bool train_head) {
    for (auto& p : model.backbone_parameters()) p.tensor.set_requires_grad(false);
    for (auto& p : model.head_parameters()) p.tensor.set_requires_grad(train_head);
}

/// CRC-32 over the raw bytes of the given tensors, in order.
inline std::uint32_t parameter_checksum(const std::vector<NamedTensor>& params) {
    boost::crc_32_type crc;
    for (const auto& p : params) crc.process_bytes(p.tensor.data().data(), p.tensor.numel() * sizeof(double));
    return crc.checksum();
}

struct TokenBatch {
    std::size_t batch = 0;
    std::size_t seq = 0;
    std::vector<int> ids;  // row-major [batch x seq]
};

inline constexpr int kPadId = 0;

struct AdaptationHooks {
    // Transforms a sub-layer output (before residual + norm) at layer i.
    std::function<Tensor(std::size_t, InsertionPoint, const Tensor&)> site;
    // Replaces x * W^T + b for a projection of layer i.
    std::function<Tensor(std::size_t, Projection, const Tensor& x, const Tensor& weight, const Tensor& bias)> projection;
};

namespace detail {

inline Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) { return add(matmul_nt(x, weight), bias); }

inline Tensor project(const AdaptationHooks* hooks, std::size_t layer, Projection which, const Tensor& x,
                      const Tensor& weight, const Tensor& bias) {
    if (hooks && hooks->projection) return hooks->projection(layer, which, x, weight, bias);
    return linear(x, weight, bias);
}

inline Tensor at_site(const AdaptationHooks* hooks, std::size_t layer, InsertionPoint point, const Tensor& x) {
    if (hooks && hooks->site) return hooks->site(layer, point, x);
    return x;
}

}  // namespace detail

/// Logits [B x C] from the first-position representation.
inline Tensor encoder_forward(const BackboneModel& model, const TokenBatch& tokens, const AdaptationHooks* hooks = nullptr) {
    const BackboneConfig& c = model.config;
    const std::size_t b = tokens.batch, s = tokens.seq, d = c.model_dim, h = c.num_heads, dh = d / h;
    if (tokens.ids.size() != b * s || b == 0 || s == 0) throw DataError("token batch shape does not match its ids");
    if (s > c.max_seq_len) {
        throw DataError("sequence length " + std::to_string(s) + " exceeds max_seq_len " + std::to_string(c.max_seq_len));
    }

    std::vector<int> positions(b * s);
    for (std::size_t i = 0; i < b * s; ++i) positions[i] = static_cast<int>(i % s);
    Tensor x = add(embedding(model.token_embedding, tokens.ids, {b, s}), embedding(model.position_embedding, positions, {b, s}));

    // Additive key mask for padded positions, shared by all heads.
    Tensor mask;
    const bool has_pad = std::find(tokens.ids.begin(), tokens.ids.end(), kPadId) != tokens.ids.end();
    if (has_pad) {
        std::vector<double> m(b * h * s * s, 0.0);
        for (std::size_t bi = 0; bi < b; ++bi)
            for (std::size_t k = 0; k < s; ++k)
                if (tokens.ids[bi * s + k] == kPadId)
                    for (std::size_t hi = 0; hi < h; ++hi)
                        for (std::size_t q = 0; q < s; ++q) m[((bi * h + hi) * s + q) * s + k] = -1e9;
        mask = Tensor({b * h, s, s}, std::move(m));
    }

    auto split_heads = [&](const Tensor& t) { return reshape(permute(reshape(t, {b, s, h, dh}), {0, 2, 1, 3}), {b * h, s, dh}); };
    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));

    for (std::size_t i = 0; i < model.layers.size(); ++i) {
        const EncoderLayer& l = model.layers[i];
        Tensor q = detail::project(hooks, i, Projection::query, x, l.query_weight, l.query_bias);
        Tensor k = detail::project(hooks, i, Projection::key, x, l.key_weight, l.key_bias);
        Tensor v = detail::project(hooks, i, Projection::value, x, l.value_weight, l.value_bias);
        Tensor scores = scale(bmm(split_heads(q), split_heads(k), true), inv_sqrt_dh);
        if (mask.defined()) scores = add(scores, mask);
        Tensor context = bmm(softmax(scores, -1), split_heads(v));
        context = reshape(permute(reshape(context, {b, h, s, dh}), {0, 2, 1, 3}), {b, s, d});
        Tensor attn = detail::project(hooks, i, Projection::output, context, l.output_weight, l.output_bias);
        attn = detail::at_site(hooks, i, InsertionPoint::after_attention, attn);
        x = layer_norm(add(x, attn), l.attention_norm_gain, l.attention_norm_bias);

        Tensor ffn = detail::linear(gelu(detail::linear(x, l.ffn_in_weight, l.ffn_in_bias)), l.ffn_out_weight, l.ffn_out_bias);
        ffn = detail::at_site(hooks, i, InsertionPoint::after_ffn, ffn);
        x = layer_norm(add(x, ffn), l.ffn_norm_gain, l.ffn_norm_bias);
    }
    return detail::linear(select(x, 1, 0), model.head_weight, model.head_bias);
}

}  // namespace adamix
