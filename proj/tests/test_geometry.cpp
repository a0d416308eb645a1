#include <doctest.h>

#include <set>

#include "patkit/geometry.hpp"
#include "test_support.hpp"

using namespace patkit;
using namespace patkit::testing;

namespace {

PointCloud<float> unit_triangle() {
    return PointCloud<float>(3, 3, {0, 0, 0, 1, 0, 0, 0, 1, 0});
}

PointCloud<float> collinear_x() {
    // x-coords {0, 1, 2, 9}
    return PointCloud<float>(4, 3, {0, 0, 0, 1, 0, 0, 2, 0, 0, 9, 0, 0});
}

}  // namespace

TEST_SUITE("geometry") {

TEST_CASE("pairwise_sq_dist on the unit triangle") {
    auto d = pairwise_sq_dist(unit_triangle());
    float expect[9] = {0, 1, 1, 1, 0, 2, 1, 2, 0};
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) CHECK(d.at(i, j) == expect[i * 3 + j]);
}

TEST_CASE("pairwise_sq_dist single point") {
    PointCloud<float> one(1, 3, {4, 5, 6});
    auto d = pairwise_sq_dist(one);
    REQUIRE(d.shape() == Shape{1, 1});
    CHECK(d.at(0, 0) == 0);
}

TEST_CASE("pairwise_sq_dist matches the double-loop oracle and is translation invariant") {
    Rng rng(31);
    auto cloud = random_cloud<double>(20, 3, rng);
    auto d = pairwise_sq_dist(cloud);
    for (int i = 0; i < 20; ++i)
        for (int j = 0; j < 20; ++j) {
            double acc = 0;
            for (int k = 0; k < 3; ++k) {
                double diff = cloud.at(i, k) - cloud.at(j, k);
                acc += diff * diff;
            }
            CHECK(d.at(i, j) == acc);
            CHECK(d.at(i, j) == d.at(j, i));
        }
    for (int i = 0; i < 20; ++i) CHECK(d.at(i, i) == 0);

    PointCloud<double> moved = cloud;
    for (int i = 0; i < moved.n; ++i) {
        moved.at(i, 0) += 10.5;
        moved.at(i, 1) -= 3.25;
        moved.at(i, 2) += 0.125;
    }
    CHECK(max_abs_diff(pairwise_sq_dist(moved), d) < 1e-9);
}

TEST_CASE("knn tie broken by lowest index") {
    auto nb = knn(unit_triangle(), 1);
    CHECK(nb.at(0, 0) == 1);  // points 1 and 2 are both at distance 1
}

TEST_CASE("knn on collinear points orders by distance") {
    auto nb = knn(collinear_x(), 2);
    // neighbors of point 3 (x=9): nearest is 2 (d=49) then 1 (d=64)
    CHECK(nb.at(3, 0) == 2);
    CHECK(nb.at(3, 1) == 1);
}

TEST_CASE("knn matches full-sort oracle") {
    Rng rng(37);
    auto cloud = random_cloud<float>(30, 3, rng);
    auto nb = knn(cloud, 5);
    for (int p = 0; p < 30; ++p) {
        std::vector<std::pair<float, int>> all;
        for (int j = 0; j < 30; ++j)
            if (j != p) all.emplace_back(sq_dist_xyz(cloud, p, j), j);
        std::sort(all.begin(), all.end());
        for (int j = 0; j < 5; ++j) CHECK(nb.at(p, j) == all[static_cast<size_t>(j)].second);
    }
}

TEST_CASE("knn rejects k >= N") {
    CHECK_THROWS_AS(knn(unit_triangle(), 3), ContractError);
}

TEST_CASE("knn and fps ignore feature channels beyond xyz") {
    Rng rng(41);
    auto cloud = random_cloud<float>(25, 3, rng);
    PointCloud<float> with_feats(25, 6, std::vector<float>(25 * 6));
    for (int i = 0; i < 25; ++i) {
        for (int d = 0; d < 3; ++d) with_feats.at(i, d) = cloud.at(i, d);
        for (int d = 3; d < 6; ++d) with_feats.at(i, d) = static_cast<float>(rng.uniform(-9, 9));
    }
    CHECK(knn(cloud, 4).indices == knn(with_feats, 4).indices);
    CHECK(fps(cloud, 10, 2) == fps(with_feats, 10, 2));
}

TEST_CASE("dilated pool sizes follow floor(K*d) with clamping") {
    Rng rng(43);
    auto big = random_cloud<float>(1024, 3, rng);
    Rng s1(1);
    auto nb = dilated_neighbor_sample(big, 32, 2.0, 1024, s1);
    CHECK(nb.pool == 64);  // d = 2 * 1024/1024

    auto small = random_cloud<float>(256, 3, rng);
    Rng s2(1);
    auto nb2 = dilated_neighbor_sample(small, 32, 2.0, 1024, s2);
    CHECK(nb2.pool == 32);  // raw d = 0.5 clamps to 1, pool = K
}

TEST_CASE("dilated sampling with pool == K equals knn as a set") {
    Rng rng(47);
    auto cloud = random_cloud<float>(40, 3, rng);
    Rng s(9);
    auto dil = dilated_neighbor_sample(cloud, 6, 1.0, 40, s);  // d=1 -> pool=6=k
    auto nb = knn(cloud, 6);
    for (int p = 0; p < 40; ++p) {
        std::set<int> a, b;
        for (int j = 0; j < 6; ++j) {
            a.insert(dil.at(p, j));
            b.insert(nb.at(p, j));
        }
        CHECK(a == b);
        CHECK(a.size() == 6);       // entries distinct
        CHECK(a.count(p) == 0);     // self excluded
    }
}

TEST_CASE("dilated sampling is deterministic given the seed") {
    Rng rng(53);
    auto cloud = random_cloud<float>(64, 3, rng);
    Rng a(77), b(77);
    CHECK(dilated_neighbor_sample(cloud, 8, 2.0, 64, a).indices ==
          dilated_neighbor_sample(cloud, 8, 2.0, 64, b).indices);
}

TEST_CASE("position_set substitutes directly") {
    PointCloud<float> two(2, 3, {0, 0, 0, 1, 2, 3});
    NeighborIndex nb;
    nb.n = 2;
    nb.k = 1;
    nb.pool = 1;
    nb.indices = {1, 0};
    auto ps = position_set(two, nb);
    REQUIRE(ps.shape() == Shape{2, 1, 6});
    float expect0[6] = {0, 0, 0, 1, 2, 3};
    for (int c = 0; c < 6; ++c) CHECK(ps.at(0, 0, c) == expect0[c]);
    float expect1[6] = {1, 2, 3, -1, -2, -3};
    for (int c = 0; c < 6; ++c) CHECK(ps.at(1, 0, c) == expect1[c]);
}

TEST_CASE("position_set relative half is translation invariant") {
    Rng rng(59);
    auto cloud = random_cloud<float>(12, 3, rng);
    auto nb = knn(cloud, 3);
    auto ps = position_set(cloud, nb);
    PointCloud<float> moved = cloud;
    for (int i = 0; i < moved.n; ++i) {
        moved.at(i, 0) += 2.5f;
        moved.at(i, 1) -= 1.5f;
        moved.at(i, 2) += 0.75f;
    }
    auto ps2 = position_set(moved, nb);
    for (int p = 0; p < 12; ++p)
        for (int j = 0; j < 3; ++j) {
            // relative half unchanged up to f32 rounding of (x+t)-(p+t)
            for (int c = 3; c < 6; ++c)
                CHECK(std::fabs(ps2.at(p, j, c) - ps.at(p, j, c)) < 1e-6f);
            CHECK(ps2.at(p, j, 0) == doctest::Approx(ps.at(p, j, 0) + 2.5f));  // absolute half
        }
}

TEST_CASE("fps hand-worked greedy picks") {
    auto cloud = collinear_x();
    CHECK(fps(cloud, 3, 0) == std::vector<int>{0, 3, 2});
    CHECK(fps(cloud, 3, 1) == std::vector<int>{1, 3, 0});  // start-dependence witnessed
}

TEST_CASE("fps with n_out == N returns every index") {
    Rng rng(61);
    auto cloud = random_cloud<float>(9, 3, rng);
    for (int start : {0, 4, 8}) {
        auto idx = fps(cloud, 9, start);
        std::set<int> s(idx.begin(), idx.end());
        CHECK(s.size() == 9);
    }
    CHECK_THROWS_AS(fps(cloud, 10, 0), ContractError);
}

TEST_CASE("fps grabs a far outlier within the first two picks") {
    // max-min greedy: the second pick is always the point farthest from the
    // start, so a distant outlier is selected immediately from any start
    Rng rng(71);
    const int n = 40;
    std::vector<float> pts(static_cast<size_t>(n) * 3);
    for (int i = 0; i < n - 1; ++i) {
        double x = rng.normal(), y = rng.normal(), z = rng.normal();
        double inv = 1.0 / std::sqrt(x * x + y * y + z * z);
        pts[static_cast<size_t>(i) * 3 + 0] = static_cast<float>(x * inv);
        pts[static_cast<size_t>(i) * 3 + 1] = static_cast<float>(y * inv);
        pts[static_cast<size_t>(i) * 3 + 2] = static_cast<float>(z * inv);
    }
    const int outlier = n - 1;
    pts[static_cast<size_t>(outlier) * 3 + 0] = 3;
    pts[static_cast<size_t>(outlier) * 3 + 1] = 3;
    pts[static_cast<size_t>(outlier) * 3 + 2] = 3;
    PointCloud<float> cloud(n, 3, std::move(pts));
    for (int start : {0, 7, 23}) {
        auto picks = fps(cloud, 6, start);
        CHECK((picks[0] == outlier || picks[1] == outlier));
    }
}

TEST_CASE("fps is permutation-covariant under relabeling") {
    Rng rng(67);
    auto cloud = random_cloud<float>(16, 3, rng);
    auto perm = random_perm(16, rng);  // permuted.at(r) == cloud.at(perm[r])
    auto permuted = permute_cloud(cloud, perm);
    std::vector<int> inv(16);
    for (int r = 0; r < 16; ++r) inv[static_cast<size_t>(perm[static_cast<size_t>(r)])] = r;

    const int start = 5;
    auto base = fps(cloud, 6, start);
    auto relabeled = fps(permuted, 6, inv[static_cast<size_t>(start)]);
    for (int i = 0; i < 6; ++i)
        CHECK(perm[static_cast<size_t>(relabeled[static_cast<size_t>(i)])] == base[static_cast<size_t>(i)]);
}

}  // TEST_SUITE
