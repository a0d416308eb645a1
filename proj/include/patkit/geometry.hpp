#pragma once

#include <algorithm>
#include <limits>
#include <vector>

#include "patkit/rng.hpp"
#include "patkit/tensor.hpp"

namespace patkit {

// Raw input points, N x (3+f) row-major. The first 3 channels are xyz; the
// remaining f are extra features (RGB, event polarity, ...). Distances always
// use xyz only.
template <typename T>
struct PointCloud {
    int n = 0;
    int dims = 0;  // 3 + f
    std::vector<T> pts;

    PointCloud() = default;
    PointCloud(int n_, int dims_, std::vector<T> data) : n(n_), dims(dims_), pts(std::move(data)) {
        validate();
    }

    int f() const { return dims - 3; }
    T at(int i, int k) const { return pts[static_cast<size_t>(i) * dims + k]; }
    T& at(int i, int k) { return pts[static_cast<size_t>(i) * dims + k]; }

    void validate() const {
        if (n < 1) throw ContractError("point cloud must contain at least one point");
        if (dims < 3) throw ContractError("point cloud needs at least xyz channels, got " +
                                          std::to_string(dims));
        if (pts.size() != static_cast<size_t>(n) * static_cast<size_t>(dims))
            throw ShapeError("point cloud buffer size mismatch");
        if (!all_finite(pts)) throw DomainError("point cloud contains non-finite coordinates");
    }

    Tensor<T> as_tensor() const {
        std::vector<T> copy = pts;
        return Tensor<T>::raw({n, dims}, std::move(copy));
    }
};

// K selected neighbor indices per point, self excluded, entries distinct.
struct NeighborIndex {
    int n = 0;
    int k = 0;
    int pool = 0;  // candidate pool size the rows were drawn from
    std::vector<int> indices;  // n x k row-major

    int at(int p, int j) const { return indices[static_cast<size_t>(p) * k + j]; }
};

template <typename T>
inline T sq_dist_xyz(const PointCloud<T>& c, int i, int j) {
    T acc = 0;
    for (int d = 0; d < 3; ++d) {
        T diff = c.at(i, d) - c.at(j, d);
        acc += diff * diff;
    }
    return acc;
}

// D[i][j] = ||xyz_i - xyz_j||^2. Symmetric with zero diagonal.
template <typename T>
Tensor<T> pairwise_sq_dist(const PointCloud<T>& cloud) {
    cloud.validate();
    const int n = cloud.n;
    std::vector<T> out(static_cast<size_t>(n) * n, T(0));
    for (int i = 0; i < n; ++i)
        for (int j = i + 1; j < n; ++j) {
            T d = sq_dist_xyz(cloud, i, j);
            out[static_cast<size_t>(i) * n + j] = d;
            out[static_cast<size_t>(j) * n + i] = d;
        }
    return Tensor<T>::raw({n, n}, std::move(out));
}

namespace detail {

// Neighbor candidates of p ordered by (distance, index), self excluded.
template <typename T>
std::vector<int> neighbor_order(const PointCloud<T>& cloud, int p) {
    std::vector<std::pair<T, int>> cand;
    cand.reserve(static_cast<size_t>(cloud.n) - 1);
    for (int j = 0; j < cloud.n; ++j) {
        if (j == p) continue;
        cand.emplace_back(sq_dist_xyz(cloud, p, j), j);
    }
    std::sort(cand.begin(), cand.end());
    std::vector<int> out(cand.size());
    for (size_t i = 0; i < cand.size(); ++i) out[i] = cand[i].second;
    return out;
}

}  // namespace detail

// Row p holds the k nearest indices of p, ties broken by lowest index.
template <typename T>
NeighborIndex knn(const PointCloud<T>& cloud, int k) {
    cloud.validate();
    if (k < 1 || k >= cloud.n)
        throw ContractError("knn: k=" + std::to_string(k) + " requires 1 <= k <= N-1 with N=" +
                            std::to_string(cloud.n));
    NeighborIndex out;
    out.n = cloud.n;
    out.k = k;
    out.pool = k;
    out.indices.resize(static_cast<size_t>(cloud.n) * k);
    for (int p = 0; p < cloud.n; ++p) {
        auto order = detail::neighbor_order(cloud, p);
        for (int j = 0; j < k; ++j) out.indices[static_cast<size_t>(p) * k + j] = order[static_cast<size_t>(j)];
    }
    return out;
}

// Sample K distinct neighbors uniformly from each point's top floor(K*d)
// candidates, d = max(d0*N/N0, 1), pool clamped to N-1. With pool == K this
// degenerates to plain kNN.
template <typename T>
NeighborIndex dilated_neighbor_sample(const PointCloud<T>& cloud, int k, double d0, int n0,
                                      Rng& rng) {
    cloud.validate();
    if (k < 1 || k >= cloud.n)
        throw ContractError("dilated_neighbor_sample: k=" + std::to_string(k) +
                            " requires 1 <= k <= N-1 with N=" + std::to_string(cloud.n));
    const double d_eff = std::max(d0 * static_cast<double>(cloud.n) / static_cast<double>(n0), 1.0);
    int pool = static_cast<int>(static_cast<double>(k) * d_eff);
    pool = std::min(pool, cloud.n - 1);
    pool = std::max(pool, k);
    NeighborIndex out;
    out.n = cloud.n;
    out.k = k;
    out.pool = pool;
    out.indices.resize(static_cast<size_t>(cloud.n) * k);
    for (int p = 0; p < cloud.n; ++p) {
        auto order = detail::neighbor_order(cloud, p);
        // partial Fisher-Yates over the first `pool` candidates
        for (int j = 0; j < k; ++j) {
            int pick = j + rng.uniform_int(pool - j);
            std::swap(order[static_cast<size_t>(j)], order[static_cast<size_t>(pick)]);
            out.indices[static_cast<size_t>(p) * k + j] = order[static_cast<size_t>(j)];
        }
    }
    return out;
}

// Entry (p, j) = concat(x_p, x_{idx(p,j)} - x_p), all 3+f channels on both
// halves. Shape N x K x 2(3+f).
template <typename T>
Tensor<T> position_set(const PointCloud<T>& cloud, const NeighborIndex& nbrs) {
    cloud.validate();
    if (nbrs.n != cloud.n) throw ContractError("position_set: neighbor index does not match cloud");
    const int d = cloud.dims;
    const int k = nbrs.k;
    std::vector<T> out(static_cast<size_t>(cloud.n) * k * 2 * d);
    size_t w = 0;
    for (int p = 0; p < cloud.n; ++p)
        for (int j = 0; j < k; ++j) {
            const int q = nbrs.at(p, j);
            for (int c = 0; c < d; ++c) out[w++] = cloud.at(p, c);
            for (int c = 0; c < d; ++c) out[w++] = cloud.at(q, c) - cloud.at(p, c);
        }
    return Tensor<T>::raw({cloud.n, k, 2 * d}, std::move(out));
}

// Greedy max-min selection in xyz space. Deterministic given start_index;
// ties broken by lowest index. The selected subset genuinely depends on the
// start point, which is exactly the property GSS is designed to avoid.
template <typename T>
std::vector<int> fps(const PointCloud<T>& cloud, int n_out, int start_index = 0) {
    cloud.validate();
    if (n_out < 1 || n_out > cloud.n)
        throw ContractError("fps: n_out=" + std::to_string(n_out) + " must be in [1, " +
                            std::to_string(cloud.n) + "]");
    if (start_index < 0 || start_index >= cloud.n)
        throw ContractError("fps: start index out of range");
    std::vector<int> picked;
    picked.reserve(static_cast<size_t>(n_out));
    std::vector<T> min_d(static_cast<size_t>(cloud.n), std::numeric_limits<T>::max());
    int cur = start_index;
    picked.push_back(cur);
    for (int round = 1; round < n_out; ++round) {
        int best = -1;
        T best_d = -1;
        for (int j = 0; j < cloud.n; ++j) {
            min_d[static_cast<size_t>(j)] =
                std::min(min_d[static_cast<size_t>(j)], sq_dist_xyz(cloud, cur, j));
            if (min_d[static_cast<size_t>(j)] > best_d &&
                std::find(picked.begin(), picked.end(), j) == picked.end()) {
                best_d = min_d[static_cast<size_t>(j)];
                best = j;
            }
        }
        cur = best;
        picked.push_back(cur);
    }
    return picked;
}

}  // namespace patkit
