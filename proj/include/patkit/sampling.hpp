#pragma once

#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "patkit/rng.hpp"
#include "patkit/tensor.hpp"

namespace patkit {

// Temperature and mode switches for all Gumbel-based sampling. tau anneals
// from tau_start to tau_end over training; inference defaults to
// deterministic argmax with noise behind an explicit flag.
struct SamplerConfig {
    double tau = 1.0;
    double tau_start = 1.0;
    double tau_end = 0.1;
    bool training = true;
    bool infer_noise = false;
    uint64_t rng_seed = 0;

    void validate() const {
        if (training && tau <= 0) throw ContractError("sampler: tau must be > 0 in train mode");
        if (tau_end > tau_start) throw ContractError("sampler: tau_end must be <= tau_start");
    }
};

// Exponential interpolation tau(e) = tau_start * (tau_end/tau_start)^(e/total).
inline double anneal(const SamplerConfig& cfg, int epoch, int total_epochs) {
    if (total_epochs < 1) throw ContractError("anneal: total_epochs must be >= 1");
    const double frac = static_cast<double>(epoch) / static_cast<double>(total_epochs);
    return cfg.tau_start * std::pow(cfg.tau_end / cfg.tau_start, frac);
}

// g = -log(-log(u)), u ~ Uniform(0,1) clamped away from {0, 1}.
template <typename T>
Tensor<T> gumbel_noise(Shape shape, Rng& rng) {
    constexpr double kEps = 1e-12;
    std::vector<T> out(shape_numel(shape));
    for (auto& v : out) {
        double u = rng.uniform();
        u = std::min(std::max(u, kEps), 1.0 - kEps);
        v = static_cast<T>(-std::log(-std::log(u)));
    }
    return Tensor<T>::raw(std::move(shape), std::move(out));
}

// Soft categorical sample: softmax((logits + g)/tau) along the last axis.
// Logits are unnormalized log-scores; with zero noise and tau = 1 this is a
// plain softmax. Differentiable in the logits for fixed noise.
template <typename T>
Tensor<T> gumbel_softmax(const Tensor<T>& logits, const Tensor<T>& noise, double tau) {
    if (tau <= 0) throw ContractError("gumbel_softmax: tau must be > 0");
    if (noise.shape() != logits.shape())
        throw ShapeError("gumbel_softmax: noise shape " + shape_str(noise.shape()) +
                         " does not match logits " + shape_str(logits.shape()));
    Tensor<T> shifted = add(logits, noise.detached());
    return softmax(scale(shifted, static_cast<T>(1.0 / tau)), logits.rank() - 1);
}

template <typename T>
Tensor<T> gumbel_softmax(const Tensor<T>& logits, double tau, Rng& rng) {
    return gumbel_softmax(logits, gumbel_noise<T>(Shape(logits.shape()), rng), tau);
}

// Row-wise argmax of logits (+ Gumbel noise when sampling); ties go to the
// lowest index.
template <typename T>
std::vector<int> gumbel_max_indices(const Tensor<T>& logits, Rng& rng, bool with_noise) {
    if (logits.rank() < 1) throw ContractError("gumbel_max: expected rank >= 1");
    const int m = logits.dim(logits.rank() - 1);
    const size_t rows = logits.numel() / static_cast<size_t>(m);
    Tensor<T> noise;
    if (with_noise) noise = gumbel_noise<T>(Shape(logits.shape()), rng);
    std::vector<int> out(rows);
    const auto& lv = logits.data();
    for (size_t r = 0; r < rows; ++r) {
        T best = 0;
        int besti = 0;
        for (int j = 0; j < m; ++j) {
            T v = lv[r * static_cast<size_t>(m) + j];
            if (with_noise) v += noise.data()[r * static_cast<size_t>(m) + j];
            if (j == 0 || v > best) {
                best = v;
                besti = j;
            }
        }
        out[r] = besti;
    }
    return out;
}

// One-hot encoding of gumbel_max_indices; with noise this is an unbiased
// sample from Cat(softmax(logits)).
template <typename T>
Tensor<T> gumbel_max(const Tensor<T>& logits, Rng& rng, bool with_noise) {
    auto idx = gumbel_max_indices(logits, rng, with_noise);
    const int m = logits.dim(logits.rank() - 1);
    std::vector<T> out(logits.numel(), T(0));
    for (size_t r = 0; r < idx.size(); ++r) out[r * static_cast<size_t>(m) + idx[r]] = T(1);
    return Tensor<T>::raw(Shape(logits.shape()), std::move(out));
}

// Attention-based MIL pooling: y = softmax(w X^T) X, one convex combination
// of the rows.
template <typename T>
Tensor<T> mil_pool(const Tensor<T>& x, const Tensor<T>& w) {
    if (x.rank() != 2 || w.numel() != static_cast<size_t>(x.dim(1)))
        throw ShapeError("mil_pool: weight size " + std::to_string(w.numel()) +
                         " does not match channels of " + shape_str(x.shape()));
    Tensor<T> wrow = reshape(w, {1, x.dim(1)});
    Tensor<T> att = softmax(matmul(wrow, transpose(x)), 1);
    return reshape(matmul(att, x), {x.dim(1)});
}

// Learnable subset selector: one score row per output slot.
template <typename T>
struct GssLayer {
    Parameter<T> weight;  // n_out x c
    int n_out = 0;

    GssLayer() = default;
    GssLayer(const std::string& name, int n_out_, int channels, Rng& rng)
        : weight(name + ".weight", {n_out_, channels}), n_out(n_out_) {
        if (n_out_ < 1) throw ContractError("gss: n_out must be >= 1");
        weight.init_uniform_fan(channels, n_out_, rng);
    }

    template <typename Reg>
    void register_params(Reg& reg) {
        reg.add(&weight);
    }
};

template <typename T>
struct GssResult {
    Tensor<T> output;           // n_out x c
    std::vector<int> selected;  // hard mode only: chosen input row per slot
    std::vector<T> margins;     // hard mode only: top1 - top2 score per slot
    int duplicate_count = 0;    // slots that re-selected an earlier slot's row
};

// GSS(X) = gumbel_softmax(W X^T) X. Training draws i.i.d. noise per logit and
// mixes rows softly; inference picks each slot's argmax row verbatim
// (plus noise only when cfg.infer_noise). Nothing forces distinct picks;
// duplicates are counted, not prevented.
template <typename T>
GssResult<T> gss(Tape<T>* tape, const Tensor<T>& x, GssLayer<T>& layer, const SamplerConfig& cfg,
                 Rng& rng) {
    if (x.rank() != 2 || x.dim(1) != layer.weight.shape[1])
        throw ShapeError("gss: input " + shape_str(x.shape()) + " does not match weight " +
                         shape_str(layer.weight.shape));
    cfg.validate();
    GssResult<T> res;
    if (cfg.training) {
        Tensor<T> logits = matmul(layer.weight.use(tape), transpose(x));
        Tensor<T> soft = gumbel_softmax(logits, cfg.tau, rng);
        res.output = matmul(soft, x);
        return res;
    }
    Tensor<T> logits = matmul(layer.weight.use(nullptr), transpose(x.detached()));
    res.selected = gumbel_max_indices(logits, rng, cfg.infer_noise);
    res.output = gather_rows(x, res.selected);
    const int n = logits.dim(1);
    for (int s = 0; s < layer.n_out; ++s) {
        T top1 = logits.at(s, 0), top2 = -std::numeric_limits<T>::infinity();
        for (int j = 1; j < n; ++j) {
            T v = logits.at(s, j);
            if (v > top1) {
                top2 = top1;
                top1 = v;
            } else if (v > top2) {
                top2 = v;
            }
        }
        res.margins.push_back(n > 1 ? top1 - top2 : top1);
    }
    for (size_t i = 0; i < res.selected.size(); ++i)
        for (size_t j = 0; j < i; ++j)
            if (res.selected[i] == res.selected[j]) {
                ++res.duplicate_count;
                break;
            }
    return res;
}

}  // namespace patkit
