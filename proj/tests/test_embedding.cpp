#include <doctest.h>

#include "patkit/embedding.hpp"
#include "test_support.hpp"

using namespace patkit;
using namespace patkit::testing;

TEST_SUITE("embedding") {

TEST_CASE("arpe widths shrink proportionally with the embedding size") {
    CHECK(arpe_h_widths(1024) == std::vector<int>{64, 128, 256});
    CHECK(arpe_gamma_widths(1024) == std::vector<int>{512, 1024});
    CHECK(arpe_h_widths(128) == std::vector<int>{8, 16, 32});
    CHECK(arpe_gamma_widths(128) == std::vector<int>{64, 128});
}

TEST_CASE("arpe full-scale output is N x 1024") {
    Rng rng(221);
    ArpeLayer<float> layer("arpe", 3, 1024, rng);
    auto cloud = random_cloud<float>(1024, 3, rng);
    Rng fwd(1);
    auto out = layer.forward(nullptr, cloud, fwd, false);
    CHECK(out.shape() == Shape{1024, 1024});
}

TEST_CASE("arpe rejects single-point clouds") {
    Rng rng(223);
    ArpeLayer<float> layer("arpe", 3, 32, rng);
    PointCloud<float> one(1, 3, {0, 0, 0});
    Rng fwd(1);
    CHECK_THROWS_AS(layer.forward(nullptr, one, fwd, false), ContractError);
}

TEST_CASE("arpe with K=1 is gamma of h of the single pair") {
    Rng rng(227);
    ArpeLayer<float> layer("arpe", 3, 32, rng, /*k=*/1);
    auto cloud = random_cloud<float>(5, 3, rng);
    Rng fwd(1);
    auto out = layer.forward(nullptr, cloud, fwd, false);

    auto nbrs = knn(cloud, 1);
    auto pairs = position_set(cloud, nbrs);
    Rng fwd2(1);
    auto hx = layer.h.forward(nullptr, reshape(pairs, {5, 6}), fwd2, false);
    auto expect = layer.gamma.forward(nullptr, hx, fwd2, false);
    CHECK(max_abs_diff(out, expect) == 0);
}

TEST_CASE("arpe with deterministic neighbors is permutation-equivariant") {
    Rng rng(229);
    ArpeLayer<float> layer("arpe", 3, 24, rng, /*k=*/4);
    auto cloud = random_cloud<float>(14, 3, rng);
    Rng fwd(1);
    auto base = layer.forward(nullptr, cloud, fwd, false);
    auto perm = random_perm(14, rng);
    auto permuted = permute_cloud(cloud, perm);
    Rng fwd2(1);
    auto moved = layer.forward(nullptr, permuted, fwd2, false);
    // row r of the permuted output embeds original point perm[r]
    auto expect = permute_rows(base, perm);
    CHECK(max_abs_diff(moved, expect) < 1e-5);
}

TEST_CASE("arpe is exactly invariant to neighbor-list order") {
    Rng rng(233);
    ArpeLayer<float> layer("arpe", 3, 16, rng, /*k=*/5);
    auto cloud = random_cloud<float>(11, 3, rng);
    auto nbrs = knn(cloud, 5);
    Rng fwd(1);
    auto base = layer.forward_with_neighbors(nullptr, cloud, nbrs, fwd, false);

    NeighborIndex shuffled = nbrs;
    Rng sh(99);
    for (int p = 0; p < nbrs.n; ++p) {
        std::vector<int> row(5);
        for (int j = 0; j < 5; ++j) row[static_cast<size_t>(j)] = nbrs.at(p, j);
        sh.shuffle(row);
        for (int j = 0; j < 5; ++j) shuffled.indices[static_cast<size_t>(p) * 5 + j] = row[static_cast<size_t>(j)];
    }
    Rng fwd2(1);
    auto reordered = layer.forward_with_neighbors(nullptr, cloud, shuffled, fwd2, false);
    CHECK(max_abs_diff(reordered, base) == 0);
}

TEST_CASE("training-mode arpe is deterministic given the rng seed") {
    Rng rng(239);
    ArpeLayer<float> layer("arpe", 3, 16, rng, /*k=*/4, /*d0=*/2.0, /*n0=*/8);
    auto cloud = random_cloud<float>(12, 3, rng);
    Rng a(4), b(4);
    CHECK(max_abs_diff(layer.forward(nullptr, cloud, a, true),
                       layer.forward(nullptr, cloud, b, true)) == 0);
}

TEST_CASE("mlp embedding matches arpe widths and output shape") {
    Rng rng(241);
    MlpEmbed<float> embed("e", 3, 48, rng);
    auto cloud = random_cloud<float>(10, 3, rng);
    Rng fwd(1);
    auto out = embed.forward(nullptr, cloud, fwd, false);
    CHECK(out.shape() == Shape{10, 48});
}

TEST_CASE("shared mlp gradients flow through gn and elu") {
    Rng rng(251);
    // one FC+GN+ELU stage, differentiated through weight, bias and affine
    auto fn = [&](Tape<double>& tape, const std::vector<Tensor<double>>& in) {
        (void)tape;
        auto lin = add(matmul(in[0], in[1]), in[2]);
        auto gn = group_norm(lin, 2, 1e-5, in[3], in[4], GnStats::per_point);
        return reduce_all(mul(elu(gn), in[5]), Reduce::sum);
    };
    std::vector<Tensor<double>> inputs = {
        Tensor<double>::uniform({5, 3}, -2, 2, rng),   // x
        Tensor<double>::uniform({3, 4}, -1, 1, rng),   // W
        Tensor<double>::uniform({1, 4}, -1, 1, rng),   // b
        Tensor<double>::uniform({1, 4}, 0.5, 1.5, rng),  // gn scale
        Tensor<double>::uniform({1, 4}, -0.5, 0.5, rng), // gn bias
        Tensor<double>::uniform({5, 4}, -1, 1, rng),   // probe
    };
    auto report = grad_check(fn, inputs, 1e-5, 1e-4);
    INFO(report.summary());
    CHECK(report.pass);
}

}  // TEST_SUITE
