#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "patkit/nn.hpp"
#include "patkit/tensor.hpp"

namespace patkit {

struct GroupConfig {
    int g = 1;
    int channels = 0;

    GroupConfig() = default;
    GroupConfig(int channels_, int g_) : g(g_), channels(channels_) {
        if (g < 1) throw ContractError("group count must be >= 1");
        if (channels % g != 0)
            throw ContractError("channels " + std::to_string(channels) + " not divisible by groups " +
                                std::to_string(g));
    }

    int c_g() const { return channels / g; }
};

// Scaled dot-product attention weights: softmax(Q X^T / sqrt(c)) row-wise.
template <typename T>
Tensor<T> attn_weights(const Tensor<T>& q, const Tensor<T>& x) {
    if (q.rank() != 2 || x.rank() != 2 || q.dim(1) != x.dim(1))
        throw ShapeError("attn_weights: channel mismatch between " + shape_str(q.shape()) + " and " +
                         shape_str(x.shape()));
    const T inv_sqrt_c = static_cast<T>(1.0 / std::sqrt(static_cast<double>(x.dim(1))));
    return softmax(scale(matmul(q, transpose(x)), inv_sqrt_c), 1);
}

// Attn(Q, X) = S(Q, X) * X.
template <typename T>
Tensor<T> vanilla_attn(const Tensor<T>& q, const Tensor<T>& x) {
    return matmul(attn_weights(q, x), x);
}

// Attn_sigma(X, X) = S(X, X) * elu(X): the pre-activation attends to the
// post-activation, replacing the transformer's position-wise MLP.
template <typename T>
Tensor<T> nonlinear_self_attn(const Tensor<T>& x) {
    return matmul(attn_weights(x, x), elu(x));
}

inline std::vector<int> channel_shuffle_order(int c, int g) {
    if (g < 1 || c % g != 0)
        throw ContractError("channel_shuffle: channels " + std::to_string(c) +
                            " not divisible by groups " + std::to_string(g));
    const int c_g = c / g;
    std::vector<int> src(static_cast<size_t>(c));
    for (int j = 0; j < c_g; ++j)
        for (int i = 0; i < g; ++i) src[static_cast<size_t>(j * g + i)] = i * c_g + j;
    return src;
}

// Parameter-free interleave of g channel groups ("reshape - transpose -
// flatten"). Gradient is the inverse permutation. Shuffling again with c/g
// groups undoes it.
template <typename T>
Tensor<T> channel_shuffle(const Tensor<T>& x, int g) {
    if (x.rank() != 2) throw ShapeError("channel_shuffle: expected rank-2, got " + shape_str(x.shape()));
    return permute_cols(x, channel_shuffle_order(x.dim(1), g));
}

// Where normalization statistics pool: per_set treats the N points of one set
// as spatial positions (stats over N x c_g per group); per_point keeps every
// row independent (stats over that row's group channels only).
enum class GnStats { per_set, per_point };

template <typename T>
Tensor<T> group_norm(const Tensor<T>& x, int g, T eps, const Tensor<T>& scale_row,
                     const Tensor<T>& bias_row, GnStats stats = GnStats::per_set) {
    if (x.rank() != 2) throw ShapeError("group_norm: expected rank-2, got " + shape_str(x.shape()));
    const int c = x.dim(1);
    if (g < 1 || c % g != 0)
        throw ContractError("group_norm: channels " + std::to_string(c) + " not divisible by groups " +
                            std::to_string(g));
    const int c_g = c / g;
    std::vector<Tensor<T>> parts;
    parts.reserve(static_cast<size_t>(g));
    for (int i = 0; i < g; ++i) {
        Tensor<T> slab = g == 1 ? x : slice_cols(x, i * c_g, (i + 1) * c_g);
        Tensor<T> mu, var;
        if (stats == GnStats::per_set) {
            mu = reduce_all(slab, Reduce::mean);
            Tensor<T> centered = sub(slab, mu);
            var = reduce_all(mul(centered, centered), Reduce::mean);
            parts.push_back(div(centered, sqrt_op(add_const(var, eps))));
        } else {
            mu = reduce(slab, Reduce::mean, 1, true);
            Tensor<T> centered = sub(slab, mu);
            var = reduce(mul(centered, centered), Reduce::mean, 1, true);
            parts.push_back(div(centered, sqrt_op(add_const(var, eps))));
        }
    }
    Tensor<T> normed = g == 1 ? parts[0] : concat(parts, 1);
    return add(mul(normed, scale_row), bias_row);
}

// Per-point normalization over all channels, then affine.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, T eps, const Tensor<T>& scale_row,
                     const Tensor<T>& bias_row) {
    return group_norm(x, 1, eps, scale_row, bias_row, GnStats::per_point);
}

enum class NormKind { group, layer };

template <typename T>
struct NormLayer {
    Parameter<T> gamma;  // 1 x c
    Parameter<T> beta;   // 1 x c
    int groups = 1;
    NormKind kind = NormKind::group;
    GnStats stats = GnStats::per_set;
    T eps = static_cast<T>(1e-5);

    NormLayer() = default;
    NormLayer(const std::string& name, int channels, int groups_, NormKind kind_,
              GnStats stats_ = GnStats::per_set)
        : gamma(name + ".scale", {1, channels}),
          beta(name + ".bias", {1, channels}),
          groups(groups_),
          kind(kind_),
          stats(stats_) {
        gamma.fill(T(1));
    }

    Tensor<T> forward(Tape<T>* tape, const Tensor<T>& x) {
        Tensor<T> s = gamma.use(tape);
        Tensor<T> b = beta.use(tape);
        if (kind == NormKind::layer) return layer_norm(x, eps, s, b);
        return group_norm(x, groups, eps, s, b, stats);
    }

    template <typename Reg>
    void register_params(Reg& reg) {
        reg.add(&gamma);
        reg.add(&beta);
    }
};

// Group Attention + channel shuffle + residual + group normalization. The
// shuffle flag exists for the ablation that turns it off; the norm kind for
// the GN-vs-LN ablation.
template <typename T>
struct GsaLayer {
    GroupConfig cfg;
    std::vector<Parameter<T>> group_weights;  // g matrices, c_g x c_g each
    NormLayer<T> norm;
    bool shuffle = true;

    GsaLayer() = default;
    GsaLayer(const std::string& name, int channels, int g, Rng& rng, bool shuffle_ = true,
             NormKind norm_kind = NormKind::group)
        : cfg(channels, g), norm(name + ".norm", channels, g, norm_kind), shuffle(shuffle_) {
        const int c_g = cfg.c_g();
        group_weights.reserve(static_cast<size_t>(g));
        for (int i = 0; i < g; ++i) {
            Parameter<T> w(name + ".group." + std::to_string(i) + ".weight", {c_g, c_g});
            w.init_uniform_fan(c_g, c_g, rng);
            group_weights.push_back(std::move(w));
        }
    }

    // GroupAttn(X) = concat{ Attn_sigma(X_i, X_i) | X_i = X^(i) W_i }.
    Tensor<T> group_attn(Tape<T>* tape, const Tensor<T>& x) {
        if (x.rank() != 2 || x.dim(1) != cfg.channels)
            throw ShapeError("group_attn: input " + shape_str(x.shape()) + " does not match width " +
                             std::to_string(cfg.channels));
        const int c_g = cfg.c_g();
        std::vector<Tensor<T>> parts;
        parts.reserve(static_cast<size_t>(cfg.g));
        for (int i = 0; i < cfg.g; ++i) {
            Tensor<T> xi = cfg.g == 1 ? x : slice_cols(x, i * c_g, (i + 1) * c_g);
            parts.push_back(nonlinear_self_attn(matmul(xi, group_weights[static_cast<size_t>(i)].use(tape))));
        }
        return cfg.g == 1 ? parts[0] : concat(parts, 1);
    }

    // GSA(X) = GN(shuffle(GroupAttn(X)) + X).
    Tensor<T> forward(Tape<T>* tape, const Tensor<T>& x) {
        Tensor<T> ga = group_attn(tape, x);
        Tensor<T> sh = shuffle ? channel_shuffle(ga, cfg.g) : ga;
        return norm.forward(tape, add(sh, x));
    }

    // Attention-part parameters: g * c_g^2 = c^2 / g.
    size_t attention_param_count() const {
        return static_cast<size_t>(cfg.channels) * static_cast<size_t>(cfg.c_g());
    }

    template <typename Reg>
    void register_params(Reg& reg) {
        for (auto& w : group_weights) reg.add(&w);
        norm.register_params(reg);
    }
};

// Multi-Head Attention baseline with shared K/Q/V projections per head,
// wrapped with the same residual + normalization shape as GSA so ablations
// isolate the attention mechanism.
template <typename T>
struct MhaLayer {
    int heads = 1;
    int channels = 0;
    std::vector<Parameter<T>> head_weights;  // H matrices, c x (c/H)
    Linear<T> mlp;                           // position-wise, c -> c
    NormLayer<T> norm;

    MhaLayer() = default;
    MhaLayer(const std::string& name, int channels_, int heads_, Rng& rng,
             NormKind norm_kind = NormKind::group)
        : heads(heads_),
          channels(channels_),
          mlp(name + ".mlp", channels_, channels_, rng),
          norm(name + ".norm", channels_, heads_, norm_kind) {
        if (heads < 1 || channels % heads != 0)
            throw ContractError("mha: channels " + std::to_string(channels) + " not divisible by heads " +
                                std::to_string(heads));
        const int c_h = channels / heads;
        head_weights.reserve(static_cast<size_t>(heads));
        for (int h = 0; h < heads; ++h) {
            Parameter<T> w(name + ".head." + std::to_string(h) + ".weight", {channels, c_h});
            w.init_uniform_fan(channels, c_h, rng);
            head_weights.push_back(std::move(w));
        }
    }

    // concat{ Attn(X_h, X_h) | X_h = X W_h }; with H=1 and W = I this is
    // exactly vanilla self-attention.
    Tensor<T> head_attn(Tape<T>* tape, const Tensor<T>& x) {
        if (x.rank() != 2 || x.dim(1) != channels)
            throw ShapeError("mha: input " + shape_str(x.shape()) + " does not match width " +
                             std::to_string(channels));
        std::vector<Tensor<T>> parts;
        parts.reserve(static_cast<size_t>(heads));
        for (int h = 0; h < heads; ++h) {
            Tensor<T> xh = matmul(x, head_weights[static_cast<size_t>(h)].use(tape));
            parts.push_back(vanilla_attn(xh, xh));
        }
        return heads == 1 ? parts[0] : concat(parts, 1);
    }

    Tensor<T> forward(Tape<T>* tape, const Tensor<T>& x) {
        Tensor<T> a = head_attn(tape, x);
        Tensor<T> m = elu(mlp.forward(tape, a));
        return norm.forward(tape, add(m, x));
    }

    size_t attention_param_count() const {
        return static_cast<size_t>(channels) * static_cast<size_t>(channels);
    }

    template <typename Reg>
    void register_params(Reg& reg) {
        for (auto& w : head_weights) reg.add(&w);
        mlp.register_params(reg);
        norm.register_params(reg);
    }
};

// Closed-form trainable-scalar counts used by the bench comparison table.
inline size_t gsa_layer_param_count(int c, int g) {
    return static_cast<size_t>(c) * static_cast<size_t>(c) / static_cast<size_t>(g) +
           2 * static_cast<size_t>(c);
}

inline size_t mha_layer_param_count(int c, int h) {
    (void)h;  // projections total c*(c/h)*h = c^2 for any head count
    const size_t c2 = static_cast<size_t>(c) * static_cast<size_t>(c);
    return c2 /* projections */ + c2 + static_cast<size_t>(c) /* mlp */ +
           2 * static_cast<size_t>(c) /* norm */;
}

}  // namespace patkit
