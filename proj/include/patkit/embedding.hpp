#pragma once

#include <string>
#include <vector>

#include "patkit/attention.hpp"
#include "patkit/geometry.hpp"
#include "patkit/nn.hpp"

namespace patkit {

// Stack of FC -> GN -> ELU (-> dropout) applied to every row independently.
// Normalization statistics stay per-row so the stack is a pure function of
// each row, which keeps max-pooling over neighbor sets order-independent.
template <typename T>
struct SharedMlp {
    std::vector<Linear<T>> layers;
    std::vector<NormLayer<T>> norms;
    double dropout_rate = 0.0;

    SharedMlp() = default;
    SharedMlp(const std::string& name, int in_dim, const std::vector<int>& widths, Rng& rng,
              double dropout_rate_ = 0.0, int gn_cap = 8)
        : dropout_rate(dropout_rate_) {
        int cur = in_dim;
        for (size_t i = 0; i < widths.size(); ++i) {
            const std::string lname = name + "." + std::to_string(i);
            layers.emplace_back(lname, cur, widths[i], rng);
            // per-point group stats need >= 4 channels per group to carry any
            // signal; narrow desk-scale layers shrink the group count
            const int cap = std::min(gn_cap, std::max(1, widths[i] / 4));
            norms.emplace_back(lname + ".norm", widths[i], fit_group_count(widths[i], cap),
                               NormKind::group, GnStats::per_point);
            cur = widths[i];
        }
    }

    int out_dim() const { return layers.empty() ? 0 : layers.back().out_dim(); }

    Tensor<T> forward(Tape<T>* tape, const Tensor<T>& x, Rng& rng, bool training) {
        Tensor<T> h = x;
        for (size_t i = 0; i < layers.size(); ++i) {
            h = elu(norms[i].forward(tape, layers[i].forward(tape, h)));
            if (dropout_rate > 0) h = dropout(h, dropout_rate, rng, training);
        }
        return h;
    }

    template <typename Reg>
    void register_params(Reg& reg) {
        for (size_t i = 0; i < layers.size(); ++i) {
            layers[i].register_params(reg);
            norms[i].register_params(reg);
        }
    }
};

// Internal widths for the two ARPE MLPs, shrunk proportionally with the
// embedding width (c_out = 1024 gives h 64-128-256 and gamma 512-c_out).
inline std::vector<int> arpe_h_widths(int c_out) {
    auto scaled = [&](int w) { return std::max(4, w * c_out / 1024); };
    return {scaled(64), scaled(128), scaled(256)};
}

inline std::vector<int> arpe_gamma_widths(int c_out) {
    return {std::max(4, 512 * c_out / 1024), c_out};
}

// ARPE(x_p) = gamma(max{ h(pair) | pair in position set of p }): a shared
// PointNet over each point's dilated neighbor position set.
template <typename T>
struct ArpeLayer {
    SharedMlp<T> h;
    SharedMlp<T> gamma;
    int k = 32;
    double d0 = 2.0;
    int n0 = 1024;
    int c_out = 0;

    ArpeLayer() = default;
    ArpeLayer(const std::string& name, int point_dims, int c_out_, Rng& rng, int k_ = 32,
              double d0_ = 2.0, int n0_ = 1024)
        : h(name + ".h", 2 * point_dims, arpe_h_widths(c_out_), rng),
          gamma(name + ".gamma", arpe_h_widths(c_out_).back(), arpe_gamma_widths(c_out_), rng),
          k(k_),
          d0(d0_),
          n0(n0_),
          c_out(c_out_) {}

    // Training consumes rng for dilated sampling; inference truncates the
    // pool to the exact top-K so results are deterministic.
    Tensor<T> forward(Tape<T>* tape, const PointCloud<T>& cloud, Rng& rng, bool training) {
        if (cloud.n < 2) throw ContractError("arpe: need at least 2 points, got " +
                                             std::to_string(cloud.n));
        const int k_eff = std::min(k, cloud.n - 1);
        NeighborIndex nbrs = training ? dilated_neighbor_sample(cloud, k_eff, d0, n0, rng)
                                      : knn(cloud, k_eff);
        return forward_with_neighbors(tape, cloud, nbrs, rng, training);
    }

    Tensor<T> forward_with_neighbors(Tape<T>* tape, const PointCloud<T>& cloud,
                                     const NeighborIndex& nbrs, Rng& rng, bool training) {
        Tensor<T> pairs = position_set(cloud, nbrs);  // N x K x 2(3+f)
        const int two_d = pairs.dim(2);
        Tensor<T> flat = reshape(pairs, {cloud.n * nbrs.k, two_d});
        Tensor<T> hx = h.forward(tape, flat, rng, training);
        Tensor<T> pooled = reduce(reshape(hx, {cloud.n, nbrs.k, h.out_dim()}), Reduce::max, 1);
        return gamma.forward(tape, pooled, rng, training);
    }

    template <typename Reg>
    void register_params(Reg& reg) {
        h.register_params(reg);
        gamma.register_params(reg);
    }
};

// Comparator for the embedding ablation: same widths as ARPE applied to the
// raw per-point coordinates, no neighborhood information.
template <typename T>
struct MlpEmbed {
    SharedMlp<T> stack;
    int c_out = 0;

    MlpEmbed() = default;
    MlpEmbed(const std::string& name, int point_dims, int c_out_, Rng& rng) : c_out(c_out_) {
        std::vector<int> widths = arpe_h_widths(c_out_);
        for (int w : arpe_gamma_widths(c_out_)) widths.push_back(w);
        stack = SharedMlp<T>(name + ".mlp", point_dims, widths, rng);
    }

    Tensor<T> forward(Tape<T>* tape, const PointCloud<T>& cloud, Rng& rng, bool training) {
        return stack.forward(tape, cloud.as_tensor(), rng, training);
    }

    template <typename Reg>
    void register_params(Reg& reg) {
        stack.register_params(reg);
    }
};

}  // namespace patkit
