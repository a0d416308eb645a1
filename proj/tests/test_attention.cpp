#include <doctest.h>

#include "patkit/attention.hpp"
#include "test_support.hpp"

using namespace patkit;
using namespace patkit::testing;

TEST_SUITE("attention") {

TEST_CASE("attn_weights is uniform over identical rows") {
    Tensor<float> x({3, 4}, {1, 2, 3, 4, 1, 2, 3, 4, 1, 2, 3, 4});
    auto w = attn_weights(x, x);
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) CHECK(w.at(i, j) == doctest::Approx(1.0 / 3).epsilon(1e-6));
}

TEST_CASE("attn_weights with a single key is 1") {
    Tensor<float> q({2, 3}, {1, 0, 2, -1, 4, 0.5});
    Tensor<float> x({1, 3}, {0.3f, -2, 1});
    auto w = attn_weights(q, x);
    CHECK(w.at(0, 0) == 1);
    CHECK(w.at(1, 0) == 1);
}

TEST_CASE("attn_weights matches the explicit exp/normalize oracle") {
    Rng rng(71);
    Tensor<double> q = Tensor<double>::uniform({4, 8}, -2, 2, rng);
    Tensor<double> x = Tensor<double>::uniform({4, 8}, -2, 2, rng);
    auto w = attn_weights(q, x);
    const double inv = 1.0 / std::sqrt(8.0);
    for (int i = 0; i < 4; ++i) {
        double denom = 0;
        std::vector<double> raw(4);
        for (int j = 0; j < 4; ++j) {
            double dot = 0;
            for (int c = 0; c < 8; ++c) dot += q.at(i, c) * x.at(j, c);
            raw[static_cast<size_t>(j)] = std::exp(dot * inv);
            denom += raw[static_cast<size_t>(j)];
        }
        for (int j = 0; j < 4; ++j)
            CHECK(w.at(i, j) == doctest::Approx(raw[static_cast<size_t>(j)] / denom).epsilon(1e-9));
        double sum = 0;
        for (int j = 0; j < 4; ++j) sum += w.at(i, j);
        CHECK(std::fabs(sum - 1.0) < 1e-6);
    }
}

TEST_CASE("vanilla_attn is convex: identical rows reproduce, hull bounds hold") {
    Tensor<float> same({3, 2}, {0.5f, -1, 0.5f, -1, 0.5f, -1});
    auto y = vanilla_attn(same, same);
    for (int i = 0; i < 3; ++i) {
        CHECK(y.at(i, 0) == doctest::Approx(0.5f));
        CHECK(y.at(i, 1) == doctest::Approx(-1.0f));
    }

    Rng rng(73);
    Tensor<float> x = Tensor<float>::uniform({6, 5}, -2, 2, rng);
    auto out = vanilla_attn(x, x);
    for (int c = 0; c < 5; ++c) {
        float lo = x.at(0, c), hi = x.at(0, c);
        for (int i = 1; i < 6; ++i) {
            lo = std::min(lo, x.at(i, c));
            hi = std::max(hi, x.at(i, c));
        }
        for (int i = 0; i < 6; ++i) {
            CHECK(out.at(i, c) >= lo - 1e-5f);
            CHECK(out.at(i, c) <= hi + 1e-5f);
        }
    }
}

TEST_CASE("vanilla_attn saturates onto the dominant row") {
    // one row has a much larger score against the query direction
    Tensor<float> x({3, 2}, {40, 0, 0, 1, -40, 2});
    Tensor<float> q({1, 2}, {40, 0});
    auto y = vanilla_attn(q, x);
    CHECK(y.at(0, 0) == doctest::Approx(40).epsilon(1e-4));
    CHECK(y.at(0, 1) == doctest::Approx(0).epsilon(1e-4));
}

TEST_CASE("nonlinear_self_attn edge cases") {
    Tensor<float> zeros = Tensor<float>::zeros({4, 3});
    CHECK(max_abs_diff(nonlinear_self_attn(zeros), zeros) == 0);

    Tensor<float> one({1, 3}, {2, -1, 0.5f});
    auto y = nonlinear_self_attn(one);
    auto e = elu(one);
    CHECK(max_abs_diff(y, e) < 1e-7);
}

TEST_CASE("nonlinear_self_attn permutes with its input") {
    Rng rng(79);
    Tensor<float> x = Tensor<float>::uniform({7, 6}, -2, 2, rng);
    auto perm = random_perm(7, rng);
    auto lhs = nonlinear_self_attn(permute_rows(x, perm));
    auto rhs = permute_rows(nonlinear_self_attn(x), perm);
    CHECK(max_abs_diff(lhs, rhs) < 1e-5);
}

TEST_CASE("channel shuffle matches the index formula for c=6 g=2") {
    Tensor<float> x({1, 6}, {1, 2, 3, 4, 5, 6});
    auto y = channel_shuffle(x, 2);
    float expect[6] = {1, 4, 2, 5, 3, 6};
    for (int c = 0; c < 6; ++c) CHECK(y.at(0, c) == expect[c]);
}

TEST_CASE("channel shuffle degenerate groups are identity") {
    Rng rng(83);
    Tensor<float> x = Tensor<float>::uniform({3, 8}, -2, 2, rng);
    CHECK(max_abs_diff(channel_shuffle(x, 1), x) == 0);
    CHECK(max_abs_diff(channel_shuffle(x, 8), x) == 0);
    CHECK_THROWS_AS(channel_shuffle(x, 3), ContractError);
}

TEST_CASE("shuffle(g) then shuffle(c/g) is the identity for every c <= 24") {
    for (int c = 1; c <= 24; ++c)
        for (int g = 1; g <= c; ++g) {
            if (c % g != 0) continue;
            std::vector<float> vals(static_cast<size_t>(c));
            for (int i = 0; i < c; ++i) vals[static_cast<size_t>(i)] = static_cast<float>(i + 1);
            Tensor<float> x({1, c}, std::move(vals));
            auto round = channel_shuffle(channel_shuffle(x, g), c / g);
            CHECK(max_abs_diff(round, x) == 0);
        }
}

TEST_CASE("channel shuffle maps one-hot to one-hot") {
    for (int hot = 0; hot < 12; ++hot) {
        std::vector<float> vals(12, 0);
        vals[static_cast<size_t>(hot)] = 1;
        Tensor<float> x({1, 12}, std::move(vals));
        auto y = channel_shuffle(x, 4);
        int ones = 0;
        for (int c = 0; c < 12; ++c) {
            CHECK((y.at(0, c) == 0 || y.at(0, c) == 1));
            ones += y.at(0, c) == 1;
        }
        CHECK(ones == 1);
    }
}

TEST_CASE("group_attn with g=1 reduces to nonlinear self-attention on xW") {
    Rng rng(89);
    GsaLayer<float> layer("t", 6, 1, rng);
    Tensor<float> x = Tensor<float>::uniform({5, 6}, -2, 2, rng);
    auto got = layer.group_attn(nullptr, x);
    auto expect = nonlinear_self_attn(matmul(x, layer.group_weights[0].use(nullptr)));
    CHECK(max_abs_diff(got, expect) == 0);
}

TEST_CASE("attention parameter counts follow c^2/g") {
    Rng rng(97);
    GsaLayer<float> g8("a", 32, 8, rng);
    GsaLayer<float> g1("b", 32, 1, rng);
    CHECK(g8.attention_param_count() == 32 * 32 / 8);
    CHECK(g1.attention_param_count() == 32 * 32);
    // the full-scale numbers, from the closed form
    CHECK(gsa_layer_param_count(1024, 8) - 2 * 1024 == 131072);
    CHECK(gsa_layer_param_count(1024, 1) - 2 * 1024 == 1048576);
}

TEST_CASE("groups are independent before the shuffle") {
    Rng rng(101);
    GsaLayer<float> layer("t", 12, 3, rng);
    Tensor<float> x = Tensor<float>::uniform({6, 12}, -2, 2, rng);
    auto base = layer.group_attn(nullptr, x);
    // zero group 1's input channels
    std::vector<float> mod = x.data();
    for (int i = 0; i < 6; ++i)
        for (int c = 4; c < 8; ++c) mod[static_cast<size_t>(i) * 12 + c] = 0;
    auto changed = layer.group_attn(nullptr, Tensor<float>::raw({6, 12}, std::move(mod)));
    for (int i = 0; i < 6; ++i)
        for (int c = 0; c < 12; ++c) {
            if (c >= 4 && c < 8) continue;  // the modified group may change
            CHECK(changed.at(i, c) == base.at(i, c));
        }
}

TEST_CASE("group_norm normalizes each slab") {
    // constant input: zero output, exactly in f64, to rounding noise in f32
    Tensor<double> const64 = Tensor<double>::full({5, 8}, 3.7);
    auto y64 = group_norm(const64, 4, 1e-5, Tensor<double>::full({1, 8}, 1.0),
                          Tensor<double>::zeros({1, 8}));
    CHECK(max_abs_diff(y64, Tensor<double>::zeros({5, 8})) < 1e-9);

    Tensor<float> ones = Tensor<float>::full({5, 8}, 3.7f);
    Tensor<float> scale = Tensor<float>::full({1, 8}, 1.0f);
    Tensor<float> bias = Tensor<float>::zeros({1, 8});
    auto y = group_norm(ones, 4, 1e-5f, scale, bias);
    CHECK(max_abs_diff(y, Tensor<float>::zeros({5, 8})) < 5e-3);

    Rng rng(103);
    Tensor<float> x = Tensor<float>::uniform({16, 8}, -2, 2, rng);
    auto n = group_norm(x, 2, 1e-5f, scale, bias);
    for (int grp = 0; grp < 2; ++grp) {
        double mean = 0, var = 0;
        for (int i = 0; i < 16; ++i)
            for (int c = grp * 4; c < (grp + 1) * 4; ++c) mean += n.at(i, c);
        mean /= 16 * 4;
        for (int i = 0; i < 16; ++i)
            for (int c = grp * 4; c < (grp + 1) * 4; ++c) {
                double d = n.at(i, c) - mean;
                var += d * d;
            }
        var /= 16 * 4;
        CHECK(std::fabs(mean) < 1e-5);
        CHECK(var == doctest::Approx(1.0).epsilon(1e-3));
    }
}

TEST_CASE("group_norm with g=1 normalizes the whole slab") {
    Rng rng(107);
    Tensor<float> x = Tensor<float>::uniform({6, 4}, -2, 2, rng);
    Tensor<float> scale = Tensor<float>::full({1, 4}, 1.0f);
    Tensor<float> bias = Tensor<float>::zeros({1, 4});
    auto y = group_norm(x, 1, 1e-5f, scale, bias);
    double mean = 0;
    for (size_t i = 0; i < x.numel(); ++i) mean += x.data()[i];
    mean /= static_cast<double>(x.numel());
    double var = 0;
    for (size_t i = 0; i < x.numel(); ++i) {
        double d = x.data()[i] - mean;
        var += d * d;
    }
    var /= static_cast<double>(x.numel());
    for (size_t i = 0; i < x.numel(); ++i) {
        double expect = (x.data()[i] - mean) / std::sqrt(var + 1e-5);
        CHECK(y.data()[i] == doctest::Approx(expect).epsilon(1e-4));
    }
}

TEST_CASE("layer_norm matches a per-row oracle and is shift invariant") {
    Rng rng(109);
    Tensor<float> x = Tensor<float>::uniform({5, 6}, -2, 2, rng);
    Tensor<float> scale = Tensor<float>::full({1, 6}, 1.0f);
    Tensor<float> bias = Tensor<float>::zeros({1, 6});
    auto y = layer_norm(x, 1e-5f, scale, bias);
    for (int i = 0; i < 5; ++i) {
        double mean = 0;
        for (int c = 0; c < 6; ++c) mean += x.at(i, c);
        mean /= 6;
        double var = 0;
        for (int c = 0; c < 6; ++c) {
            double d = x.at(i, c) - mean;
            var += d * d;
        }
        var /= 6;
        for (int c = 0; c < 6; ++c)
            CHECK(y.at(i, c) == doctest::Approx((x.at(i, c) - mean) / std::sqrt(var + 1e-5)).epsilon(1e-4));
    }

    Tensor<float> row = Tensor<float>::full({2, 6}, 9.0f);
    auto z = layer_norm(row, 1e-5f, scale, bias);
    CHECK(max_abs_diff(z, Tensor<float>::zeros({2, 6})) < 1e-6);

    auto shifted = layer_norm(add_const(x, 4.0f), 1e-5f, scale, bias);
    CHECK(max_abs_diff(shifted, y) < 1e-5);

    // layer_norm is group_norm under the per-point grouping convention
    auto gn = group_norm(x, 1, 1e-5f, scale, bias, GnStats::per_point);
    CHECK(max_abs_diff(gn, y) == 0);
}

TEST_CASE("gsa preserves shape and is permutation-equivariant") {
    Rng rng(113);
    for (int g : {1, 2, 4}) {
        GsaLayer<float> layer("t", 16, g, rng);
        Tensor<float> x = Tensor<float>::uniform({9, 16}, -2, 2, rng);
        auto y = layer.forward(nullptr, x);
        REQUIRE(y.shape() == x.shape());
        auto perm = random_perm(9, rng);
        auto lhs = layer.forward(nullptr, permute_rows(x, perm));
        auto rhs = permute_rows(y, perm);
        CHECK(max_abs_diff(lhs, rhs) < 1e-5);
    }
}

TEST_CASE("gsa layer forward equals the inline op composition") {
    Rng rng(127);
    GsaLayer<double> layer("t", 16, 4, rng);
    Tensor<double> x = Tensor<double>::uniform({8, 16}, -2, 2, rng);
    auto via_layer = layer.forward(nullptr, x);

    const int cg = 4;
    std::vector<Tensor<double>> parts;
    for (int i = 0; i < 4; ++i)
        parts.push_back(nonlinear_self_attn(
            matmul(slice_cols(x, i * cg, (i + 1) * cg), layer.group_weights[static_cast<size_t>(i)].use(nullptr))));
    auto ga = channel_shuffle(concat(parts, 1), 4);
    auto inline_out = group_norm(add(ga, x), 4, 1e-5, layer.norm.gamma.use(nullptr),
                                 layer.norm.beta.use(nullptr));
    CHECK(max_abs_diff(via_layer, inline_out) == 0);
}

TEST_CASE("gsa gradients match finite differences on 8x16 with g=4") {
    Rng rng(131);
    const int c = 16, g = 4, cg = c / g, n = 8;
    Tensor<double> probe = Tensor<double>::uniform({n, c}, -1, 1, rng);
    auto fn = [&](Tape<double>& tape, const std::vector<Tensor<double>>& in) {
        (void)tape;
        const Tensor<double>& x = in[0];
        std::vector<Tensor<double>> parts;
        for (int i = 0; i < g; ++i)
            parts.push_back(nonlinear_self_attn(matmul(slice_cols(x, i * cg, (i + 1) * cg), in[1 + static_cast<size_t>(i)])));
        auto sh = channel_shuffle(concat(parts, 1), g);
        auto gn = group_norm(add(sh, x), g, 1e-5, in[1 + g], in[2 + g]);
        return reduce_all(mul(gn, probe), Reduce::sum);
    };
    std::vector<Tensor<double>> inputs;
    inputs.push_back(Tensor<double>::uniform({n, c}, -2, 2, rng));
    for (int i = 0; i < g; ++i) inputs.push_back(Tensor<double>::uniform({cg, cg}, -1, 1, rng));
    inputs.push_back(Tensor<double>::uniform({1, c}, 0.5, 1.5, rng));
    inputs.push_back(Tensor<double>::uniform({1, c}, -0.5, 0.5, rng));
    auto report = grad_check(fn, inputs, 1e-5, 1e-4);
    INFO(report.summary());
    CHECK(report.pass);
}

TEST_CASE("mha head attention with identity projection is vanilla attention") {
    Rng rng(137);
    MhaLayer<float> layer("t", 4, 1, rng);
    for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 4; ++j)
            layer.head_weights[0].value[static_cast<size_t>(i) * 4 + j] = i == j ? 1.0f : 0.0f;
    Tensor<float> x = Tensor<float>::uniform({6, 4}, -2, 2, rng);
    CHECK(max_abs_diff(layer.head_attn(nullptr, x), vanilla_attn(x, x)) < 1e-6);
}

TEST_CASE("mha block is permutation-equivariant") {
    Rng rng(139);
    MhaLayer<float> layer("t", 12, 4, rng);
    Tensor<float> x = Tensor<float>::uniform({7, 12}, -2, 2, rng);
    auto perm = random_perm(7, rng);
    auto lhs = layer.forward(nullptr, permute_rows(x, perm));
    auto rhs = permute_rows(layer.forward(nullptr, x), perm);
    CHECK(max_abs_diff(lhs, rhs) < 1e-5);
}

TEST_CASE("mha costs strictly more parameters than same-width gsa") {
    for (int c : {16, 64, 256, 1024})
        for (int g : {2, 4, 8})
            CHECK(mha_layer_param_count(c, g) > gsa_layer_param_count(c, g));
    // and the count is strictly decreasing in g at fixed width
    CHECK(gsa_layer_param_count(1024, 8) < gsa_layer_param_count(1024, 4));
    CHECK(gsa_layer_param_count(1024, 4) < gsa_layer_param_count(1024, 1));
}

}  // TEST_SUITE
