#include <doctest.h>

#include "patkit/tensor.hpp"
#include "test_support.hpp"

using namespace patkit;
using patkit::testing::max_abs_diff;

TEST_SUITE("tensor") {

TEST_CASE("matmul identity and permutation") {
    Tensor<float> i2({2, 2}, {1, 0, 0, 1});
    Tensor<float> a({2, 2}, {1, 2, 3, 4});
    CHECK(max_abs_diff(matmul(i2, a), a) == 0);

    Tensor<float> swap({2, 2}, {0, 1, 1, 0});
    Tensor<float> swapped = matmul(i2, swap);
    CHECK(swapped.at(0, 0) == 0);
    CHECK(swapped.at(0, 1) == 1);
    CHECK(swapped.at(1, 0) == 1);
    CHECK(swapped.at(1, 1) == 0);
}

TEST_CASE("matmul against triple-loop oracle") {
    Rng rng(42);
    Tensor<double> a = Tensor<double>::uniform({5, 7}, -2, 2, rng);
    Tensor<double> b = Tensor<double>::uniform({7, 3}, -2, 2, rng);
    Tensor<double> y = matmul(a, b);
    for (int i = 0; i < 5; ++i)
        for (int j = 0; j < 3; ++j) {
            double acc = 0;
            for (int k = 0; k < 7; ++k) acc += a.at(i, k) * b.at(k, j);
            CHECK(std::fabs(y.at(i, j) - acc) < 1e-6);
        }
}

TEST_CASE("matmul shape mismatch names both shapes") {
    Tensor<float> a({2, 3}, {1, 2, 3, 4, 5, 6});
    Tensor<float> b({2, 2}, {1, 2, 3, 4});
    CHECK_THROWS_WITH_AS(matmul(a, b), doctest::Contains("[2x3]"), ShapeError);
}

TEST_CASE("softmax closed forms") {
    Tensor<float> flat({2}, {0, 0});
    Tensor<float> y = softmax(flat, 0);
    CHECK(y.at(0) == doctest::Approx(0.5));
    CHECK(y.at(1) == doctest::Approx(0.5));

    Tensor<float> ln2({2}, {std::log(2.0f), 0});
    Tensor<float> y2 = softmax(ln2, 0);
    CHECK(y2.at(0) == doctest::Approx(2.0 / 3).epsilon(1e-6));
    CHECK(y2.at(1) == doctest::Approx(1.0 / 3).epsilon(1e-6));
}

TEST_CASE("softmax is finite and saturated on huge inputs") {
    Tensor<float> big({2}, {1000, 0});
    Tensor<float> y = softmax(big, 0);
    CHECK(std::isfinite(y.at(0)));
    CHECK(y.at(0) == doctest::Approx(1.0));
    CHECK(y.at(1) == doctest::Approx(0.0));
}

TEST_CASE("softmax rows sum to one and shift invariance") {
    Rng rng(7);
    Tensor<float> x = Tensor<float>::uniform({6, 9}, -2, 2, rng);
    Tensor<float> y = softmax(x, 1);
    for (int i = 0; i < 6; ++i) {
        double s = 0;
        for (int j = 0; j < 9; ++j) s += y.at(i, j);
        CHECK(std::fabs(s - 1.0) < 1e-6);
    }
    Tensor<float> shifted = add_const(x, 3.25f);
    CHECK(max_abs_diff(softmax(shifted, 1), y) < 1e-6);
}

TEST_CASE("elu values") {
    Tensor<float> x({3}, {0, 1, -20});
    Tensor<float> y = elu(x);
    CHECK(y.at(0) == 0);
    CHECK(y.at(1) == 1);
    CHECK(y.at(2) == doctest::Approx(-1.0).epsilon(1e-6));
    CHECK(y.at(2) >= -1.0);
}

TEST_CASE("reduce max routes gradient to first argmax") {
    Tape<float> tape;
    Tensor<float> x = tape.leaf({3}, {1, 5, 3});
    Tensor<float> m = reduce(x, Reduce::max, 0);
    CHECK(m.item() == 5);
    tape.backward(m);
    auto g = tape.grad(x.node());
    CHECK(g[0] == 0);
    CHECK(g[1] == 1);
    CHECK(g[2] == 0);

    // tie: first argmax wins
    Tape<float> tape2;
    Tensor<float> t = tape2.leaf({3}, {5, 5, 1});
    Tensor<float> m2 = reduce(t, Reduce::max, 0);
    tape2.backward(m2);
    auto g2 = tape2.grad(t.node());
    CHECK(g2[0] == 1);
    CHECK(g2[1] == 0);
}

TEST_CASE("reduce mean and sum against accumulation oracle") {
    Tensor<float> x({2}, {2, 4});
    CHECK(reduce(x, Reduce::mean, 0).item() == 3);

    Rng rng(11);
    Tensor<double> r = Tensor<double>::uniform({257}, 0, 1, rng);
    double acc = 0;
    for (size_t i = 0; i < r.numel(); ++i) acc += r.data()[i];
    double got = reduce(r, Reduce::sum, 0).item();
    CHECK(std::fabs(got - acc) / std::fabs(acc) < 1e-6);
}

TEST_CASE("reduce rejects invalid axis") {
    Tensor<float> x({2, 2}, {1, 2, 3, 4});
    CHECK_THROWS_AS(reduce(x, Reduce::sum, 2), ContractError);
}

TEST_CASE("elementwise inverse pair log(exp(x)) == x") {
    for (double v : {-2.0, 0.0, 3.0}) {
        Tensor<double> x = Tensor<double>::scalar(v);
        CHECK(log_op(exp_op(x)).item() == doctest::Approx(v).epsilon(1e-12));
    }
}

TEST_CASE("broadcast add produces full rank") {
    Tensor<float> col({4, 1}, {1, 2, 3, 4});
    Tensor<float> row({1, 3}, {10, 20, 30});
    Tensor<float> y = add(col, row);
    REQUIRE(y.shape() == Shape{4, 3});
    CHECK(y.at(2, 1) == 23);
    CHECK(y.at(0, 2) == 31);
}

TEST_CASE("elementwise chain matches pointwise oracle") {
    Rng rng(3);
    Tensor<double> a = Tensor<double>::uniform({3, 4}, 0.5, 2, rng);
    Tensor<double> b = Tensor<double>::uniform({3, 4}, 0.5, 2, rng);
    Tensor<double> y = div(mul(add(a, b), sub(a, b)), b);
    for (size_t i = 0; i < y.numel(); ++i) {
        double av = a.data()[i], bv = b.data()[i];
        CHECK(y.data()[i] == doctest::Approx((av + bv) * (av - bv) / bv).epsilon(1e-12));
    }
}

TEST_CASE("domain errors") {
    Tensor<float> neg1({1}, {-1});
    CHECK_THROWS_AS(log_op(neg1), DomainError);
    Tensor<float> num({2}, {1, 1});
    Tensor<float> den({2}, {1, 0});
    CHECK_THROWS_AS(div(num, den), DomainError);
}

TEST_CASE("reshape and transpose round trips are bit-exact") {
    Rng rng(21);
    Tensor<float> x = Tensor<float>::uniform({2, 3}, -2, 2, rng);
    Tensor<float> back = reshape(reshape(x, {3, 2}), {2, 3});
    CHECK(back.data() == x.data());
    Tensor<float> t2 = transpose(transpose(x));
    CHECK(t2.data() == x.data());
}

TEST_CASE("concat slices recover inputs") {
    Rng rng(5);
    Tensor<float> a = Tensor<float>::uniform({4, 2}, -1, 1, rng);
    Tensor<float> b = Tensor<float>::uniform({4, 5}, -1, 1, rng);
    Tensor<float> y = concat<float>({a, b}, 1);
    REQUIRE(y.shape() == Shape{4, 7});
    CHECK(max_abs_diff(slice_cols(y, 0, 2), a) == 0);
    CHECK(max_abs_diff(slice_cols(y, 2, 7), b) == 0);
    CHECK_THROWS_AS(concat<float>({a, Tensor<float>::zeros({3, 5})}, 1), ShapeError);
}

TEST_CASE("backward of sum(W x) has the outer structure of x") {
    Tape<float> tape;
    Tensor<float> w = tape.leaf({2, 3}, {1, 1, 1, 1, 1, 1});
    Tensor<float> x({3, 1}, {2, -1, 4});
    Tensor<float> loss = reduce_all(matmul(w, x), Reduce::sum);
    tape.backward(loss);
    auto g = tape.grad(w.node());
    for (int i = 0; i < 2; ++i) {
        CHECK(g[static_cast<size_t>(i) * 3 + 0] == 2);
        CHECK(g[static_cast<size_t>(i) * 3 + 1] == -1);
        CHECK(g[static_cast<size_t>(i) * 3 + 2] == 4);
    }
}

TEST_CASE("cross-entropy gradient on uniform logits is p minus onehot") {
    Tape<float> tape;
    Tensor<float> logits = tape.leaf({1, 2}, {0, 0});
    Tensor<float> mask({1, 2}, {1, 0});
    Tensor<float> loss = neg(reduce_all(mul(log_softmax(logits, 1), mask), Reduce::sum));
    tape.backward(loss);
    auto g = tape.grad(logits.node());
    CHECK(g[0] == doctest::Approx(-0.5));
    CHECK(g[1] == doctest::Approx(0.5));
}

TEST_CASE("backward requires a scalar loss") {
    Tape<float> tape;
    Tensor<float> x = tape.leaf({2}, {1, 2});
    CHECK_THROWS_AS(tape.backward(x), ContractError);
}

TEST_CASE("unreachable leaves get zero gradient") {
    Tape<float> tape;
    Tensor<float> used = tape.leaf({2}, {1, 2});
    Tensor<float> unused = tape.leaf({3}, {1, 2, 3});
    tape.backward(reduce_all(used, Reduce::sum));
    auto g = tape.grad(unused.node());
    CHECK(g == std::vector<float>{0, 0, 0});
}

TEST_CASE("parameter registry rejects duplicate names") {
    Parameter<float> a("layer.weight", {2, 2});
    Parameter<float> b("layer.weight", {3, 3});
    ParamRegistry<float> reg;
    reg.add(&a);
    CHECK_THROWS_AS(reg.add(&b), ConfigError);
}

TEST_CASE("tape replay is deterministic") {
    Rng rng(13);
    Tape<float> tape;
    Tensor<float> x = tape.leaf(Tensor<float>::uniform({4, 4}, -2, 2, rng));
    Tensor<float> loss = reduce_all(mul(softmax(x, 1), elu(x)), Reduce::sum);
    tape.backward(loss);
    auto g1 = tape.grad(x.node());
    tape.backward(loss);
    auto g2 = tape.grad(x.node());
    CHECK(g1 == g2);
}

TEST_CASE("grad_check accepts an exact quadratic") {
    Rng rng(17);
    auto quad = [](Tape<double>& tape, const std::vector<Tensor<double>>& in) {
        (void)tape;
        return reduce_all(mul(in[0], in[0]), Reduce::sum);
    };
    auto report = grad_check(quad, {Tensor<double>::uniform({3, 3}, -2, 2, rng)}, 1e-5, 1e-9);
    CHECK(report.pass);
}

TEST_CASE("grad_check flags a wrong gradient") {
    // forward of x^3 with a deliberately mismatched evaluation around it
    auto wrong = [](Tape<double>& tape, const std::vector<Tensor<double>>& in) {
        (void)tape;
        // f(x) = sum(x * |x|): kink-free nowhere near 0 is fine, but the
        // reverse gradient of mul treats both factors as independent, so
        // feeding the same tensor twice *is* correct; build a genuinely
        // wrong one instead: treat detached square as constant.
        return reduce_all(mul(in[0], mul(in[0], in[0]).detached()), Reduce::sum);
    };
    Rng rng(19);
    auto report = grad_check(wrong, {Tensor<double>::uniform({2, 2}, 0.5, 2, rng)}, 1e-5, 1e-4);
    CHECK_FALSE(report.pass);
    CHECK_FALSE(report.failures.empty());
}

TEST_CASE("every differentiable op passes central finite differences") {
    Rng rng(23);
    auto in1 = Tensor<double>::uniform({4, 6}, -2, 2, rng);
    auto in2 = Tensor<double>::uniform({6, 3}, -2, 2, rng);
    auto pos = Tensor<double>::uniform({4, 6}, 0.5, 2.5, rng);

    using Fn = std::function<Tensor<double>(Tape<double>&, const std::vector<Tensor<double>>&)>;
    std::vector<std::pair<const char*, Fn>> cases = {
        {"matmul", [](Tape<double>&, const std::vector<Tensor<double>>& in) {
             return reduce_all(matmul(in[0], in[1]), Reduce::sum);
         }},
        {"softmax", [](Tape<double>&, const std::vector<Tensor<double>>& in) {
             return reduce_all(mul(softmax(in[0], 1), in[1]), Reduce::sum);
         }},
        {"log_softmax", [](Tape<double>&, const std::vector<Tensor<double>>& in) {
             return reduce_all(mul(log_softmax(in[0], 1), in[1]), Reduce::sum);
         }},
        {"elu", [](Tape<double>&, const std::vector<Tensor<double>>& in) {
             return reduce_all(elu(in[0]), Reduce::sum);
         }},
        {"reduce_max", [](Tape<double>&, const std::vector<Tensor<double>>& in) {
             return reduce_all(reduce(in[0], Reduce::max, 1), Reduce::sum);
         }},
        {"reduce_mean", [](Tape<double>&, const std::vector<Tensor<double>>& in) {
             return reduce_all(reduce(in[0], Reduce::mean, 0), Reduce::sum);
         }},
        {"mul_div", [](Tape<double>&, const std::vector<Tensor<double>>& in) {
             return reduce_all(div(mul(in[0], in[1]), add_const(in[1], 3.0)), Reduce::sum);
         }},
        {"exp_log", [](Tape<double>&, const std::vector<Tensor<double>>& in) {
             return reduce_all(log_op(add_const(exp_op(in[0]), 1.0)), Reduce::sum);
         }},
        {"sqrt", [](Tape<double>&, const std::vector<Tensor<double>>& in) {
             return reduce_all(sqrt_op(in[0]), Reduce::sum);
         }},
        {"reshape_permute", [](Tape<double>&, const std::vector<Tensor<double>>& in) {
             auto t = permute(reshape(in[0], {2, 3, 4}), {2, 0, 1});
             return reduce_all(mul(t, t), Reduce::sum);
         }},
        {"concat_slice", [](Tape<double>&, const std::vector<Tensor<double>>& in) {
             auto c = concat<double>({in[0], in[1]}, 1);
             return reduce_all(mul(slice_cols(c, 2, 7), slice_cols(c, 3, 8)), Reduce::sum);
         }},
        {"gather_rows", [](Tape<double>&, const std::vector<Tensor<double>>& in) {
             return reduce_all(mul(gather_rows(in[0], {2, 0, 2, 1}), gather_rows(in[1], {1, 1, 3, 0})),
                               Reduce::sum);
         }},
        {"permute_cols", [](Tape<double>&, const std::vector<Tensor<double>>& in) {
             auto y = permute_cols(in[0], {3, 1, 4, 0, 5, 2});
             return reduce_all(mul(y, y), Reduce::sum);
         }},
    };

    for (auto& [name, fn] : cases) {
        CAPTURE(name);
        std::vector<Tensor<double>> inputs;
        if (std::string(name) == "matmul")
            inputs = {in1, in2};
        else if (std::string(name) == "sqrt")
            inputs = {pos};
        else if (std::string(name) == "softmax" || std::string(name) == "log_softmax" ||
                 std::string(name) == "mul_div" || std::string(name) == "concat_slice" ||
                 std::string(name) == "gather_rows")
            inputs = {in1, pos};
        else
            inputs = {in1};
        auto report = grad_check(fn, inputs, 1e-5, 1e-4);
        INFO(report.summary());
        CHECK(report.pass);
    }
}

}  // TEST_SUITE
