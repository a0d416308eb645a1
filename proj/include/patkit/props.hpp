#pragma once

#include <chrono>
#include <functional>
#include <iomanip>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "patkit/patkit.hpp"

namespace patkit::props {

// One mechanically checkable claim about the library. Failures carry the
// seed and a counterexample sketch so the run can be replayed with
// `proptest --only <name> --seed <seed>`.
struct Result {
    std::string name;
    bool pass = true;
    double seconds = 0;
    std::string detail;
};

struct Options {
    uint64_t seed = 1234;
    int trials = 0;  // 0 -> per-property default
    std::string only;  // substring filter on property names
    std::ostream* progress = nullptr;
};

namespace detail {

template <typename T>
Tensor<T> permute_rows(const Tensor<T>& x, const std::vector<int>& perm) {
    const int n = x.dim(0);
    const size_t c = x.numel() / static_cast<size_t>(n);
    std::vector<T> out(x.numel());
    for (int r = 0; r < n; ++r)
        for (size_t j = 0; j < c; ++j)
            out[static_cast<size_t>(r) * c + j] =
                x.data()[static_cast<size_t>(perm[static_cast<size_t>(r)]) * c + j];
    return Tensor<T>::raw(Shape(x.shape()), std::move(out));
}

template <typename T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
    double m = 0;
    for (size_t i = 0; i < a.numel(); ++i)
        m = std::max(m, std::fabs(static_cast<double>(a.data()[i]) - static_cast<double>(b.data()[i])));
    return m;
}

inline std::vector<int> random_perm(int n, Rng& rng) {
    std::vector<int> p(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) p[static_cast<size_t>(i)] = i;
    rng.shuffle(p);
    return p;
}

template <typename T>
PointCloud<T> random_cloud(int n, int dims, Rng& rng) {
    std::vector<T> pts(static_cast<size_t>(n) * dims);
    for (auto& v : pts) v = static_cast<T>(rng.uniform(-1, 1));
    return PointCloud<T>(n, dims, std::move(pts));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Parameterized checks shared with the acceptance suite
// ---------------------------------------------------------------------------

struct EquivarianceReport {
    double max_dev32 = 0;
    double max_dev64 = 0;
    int trials = 0;
};

// GSA/MHA blocks and their pieces permute with their input. Random sizes
// N in [4, 64], widths {8, 16, 32}, groups {1, 2, 4, 8}.
template <typename T>
double equivariance_trial(Rng& rng) {
    const int sizes[] = {8, 16, 32};
    const int groups[] = {1, 2, 4, 8};
    const int n = 4 + rng.uniform_int(61);
    const int c = sizes[rng.uniform_int(3)];
    const int g = groups[rng.uniform_int(4)];
    Rng init = rng.split(17);
    Tensor<T> x = Tensor<T>::uniform({n, c}, -2, 2, rng);
    auto perm = detail::random_perm(n, rng);
    double worst = 0;

    GsaLayer<T> gsa("p", c, g, init);
    worst = std::max(worst, detail::max_abs_diff(gsa.forward(nullptr, detail::permute_rows(x, perm)),
                                                 detail::permute_rows(gsa.forward(nullptr, x), perm)));
    worst = std::max(worst,
                     detail::max_abs_diff(nonlinear_self_attn(detail::permute_rows(x, perm)),
                                          detail::permute_rows(nonlinear_self_attn(x), perm)));
    worst = std::max(worst, detail::max_abs_diff(gsa.group_attn(nullptr, detail::permute_rows(x, perm)),
                                                 detail::permute_rows(gsa.group_attn(nullptr, x), perm)));
    if (c % g == 0) {
        MhaLayer<T> mha("q", c, g, init);
        worst = std::max(worst, detail::max_abs_diff(mha.forward(nullptr, detail::permute_rows(x, perm)),
                                                     detail::permute_rows(mha.forward(nullptr, x), perm)));
    }
    return worst;
}

inline EquivarianceReport check_attention_equivariance(int trials, uint64_t seed) {
    EquivarianceReport rep;
    rep.trials = trials;
    Rng rng32(mix_seed(seed, 32));
    Rng rng64(mix_seed(seed, 64));
    for (int t = 0; t < trials; ++t) {
        rep.max_dev32 = std::max(rep.max_dev32, equivariance_trial<float>(rng32));
        rep.max_dev64 = std::max(rep.max_dev64, equivariance_trial<double>(rng64));
    }
    return rep;
}

struct GssInvarianceReport {
    int trials = 0;
    int multiset_mismatches = 0;   // hard mode
    double train_linf = 0;         // distributional gap
};

inline GssInvarianceReport check_gss_invariance(int hard_trials, int dist_trials, uint64_t seed) {
    GssInvarianceReport rep;
    rep.trials = hard_trials;
    Rng rng(mix_seed(seed, 0x655));
    for (int t = 0; t < hard_trials; ++t) {
        const int n = 6 + rng.uniform_int(20);
        const int c = 4 + rng.uniform_int(8);
        const int slots = 1 + rng.uniform_int(std::min(n, 6));
        Tensor<float> x = Tensor<float>::uniform({n, c}, -2, 2, rng);
        Rng init = rng.split(3);
        GssLayer<float> layer("p", slots, c, init);
        SamplerConfig cfg;
        cfg.training = false;
        Rng quiet(0);
        auto base = gss<float>(nullptr, x, layer, cfg, quiet);
        auto perm = detail::random_perm(n, rng);
        auto moved = gss<float>(nullptr, detail::permute_rows(x, perm), layer, cfg, quiet);
        std::multiset<std::vector<float>> a, b;
        for (int s = 0; s < slots; ++s) {
            std::vector<float> ra, rb;
            for (int col = 0; col < c; ++col) {
                ra.push_back(base.output.at(s, col));
                rb.push_back(moved.output.at(s, col));
            }
            a.insert(ra);
            b.insert(rb);
        }
        if (a != b) ++rep.multiset_mismatches;
    }

    // train mode: selection frequencies match after relabeling
    const int n = 8, c = 4, slots = 2;
    Rng drng(mix_seed(seed, 777));
    Tensor<float> x = Tensor<float>::uniform({n, c}, -2, 2, drng);
    Rng init = drng.split(5);
    GssLayer<float> layer("p", slots, c, init);
    auto perm = detail::random_perm(n, drng);
    Tensor<float> px = detail::permute_rows(x, perm);
    auto histogram = [&](const Tensor<float>& input, uint64_t s) {
        std::vector<std::vector<double>> h(slots, std::vector<double>(n, 0));
        Rng noise(s);
        Tensor<float> logits = matmul(layer.weight.use(nullptr), transpose(input));
        for (int t = 0; t < dist_trials; ++t) {
            auto soft = gumbel_softmax(logits, 1.0, noise);
            for (int sl = 0; sl < slots; ++sl) {
                int best = 0;
                for (int j = 1; j < n; ++j)
                    if (soft.at(sl, j) > soft.at(sl, best)) best = j;
                h[static_cast<size_t>(sl)][static_cast<size_t>(best)] += 1.0 / dist_trials;
            }
        }
        return h;
    };
    auto hb = histogram(x, mix_seed(seed, 1));
    auto hp = histogram(px, mix_seed(seed, 2));
    for (int sl = 0; sl < slots; ++sl)
        for (int j = 0; j < n; ++j)
            rep.train_linf = std::max(rep.train_linf,
                                      std::fabs(hp[static_cast<size_t>(sl)][static_cast<size_t>(j)] -
                                                hb[static_cast<size_t>(sl)][static_cast<size_t>(perm[static_cast<size_t>(j)])]));
    return rep;
}

struct GradFidelityReport {
    double worst_rel = 0;
    std::string worst_case;
    bool pass = true;
};

// Central finite differences at 64-bit for every differentiable operator,
// the full GSA block, and gumbel_softmax under fixed noise.
inline GradFidelityReport check_grad_fidelity(uint64_t seed, double tol = 1e-4, double step = 1e-5) {
    GradFidelityReport rep;
    Rng rng(mix_seed(seed, 0xF1D));
    auto in1 = Tensor<double>::uniform({4, 6}, -2, 2, rng);
    auto in2 = Tensor<double>::uniform({6, 3}, -2, 2, rng);
    auto pos = Tensor<double>::uniform({4, 6}, 0.5, 2.5, rng);

    auto run = [&](const char* name, auto fn, std::vector<Tensor<double>> inputs) {
        auto report = grad_check(fn, inputs, step, tol);
        if (report.max_rel_err > rep.worst_rel) {
            rep.worst_rel = report.max_rel_err;
            rep.worst_case = name;
        }
        if (!report.pass) rep.pass = false;
    };

    run("matmul", [](Tape<double>&, const std::vector<Tensor<double>>& in) {
        return reduce_all(matmul(in[0], in[1]), Reduce::sum);
    }, {in1, in2});
    run("softmax", [](Tape<double>&, const std::vector<Tensor<double>>& in) {
        return reduce_all(mul(softmax(in[0], 1), in[1]), Reduce::sum);
    }, {in1, pos});
    run("log_softmax", [](Tape<double>&, const std::vector<Tensor<double>>& in) {
        return reduce_all(mul(log_softmax(in[0], 1), in[1]), Reduce::sum);
    }, {in1, pos});
    run("elu", [](Tape<double>&, const std::vector<Tensor<double>>& in) {
        return reduce_all(elu(in[0]), Reduce::sum);
    }, {in1});
    run("reduce_max", [](Tape<double>&, const std::vector<Tensor<double>>& in) {
        return reduce_all(reduce(in[0], Reduce::max, 1), Reduce::sum);
    }, {in1});
    run("reduce_mean", [](Tape<double>&, const std::vector<Tensor<double>>& in) {
        return reduce_all(reduce(in[0], Reduce::mean, 0), Reduce::sum);
    }, {in1});
    run("elementwise", [](Tape<double>&, const std::vector<Tensor<double>>& in) {
        return reduce_all(div(mul(in[0], in[1]), add_const(in[1], 3.0)), Reduce::sum);
    }, {in1, pos});
    run("exp_log_sqrt", [](Tape<double>&, const std::vector<Tensor<double>>& in) {
        return reduce_all(sqrt_op(log_op(add_const(exp_op(in[0]), 1.0))), Reduce::sum);
    }, {in1});
    run("shape_ops", [](Tape<double>&, const std::vector<Tensor<double>>& in) {
        auto t = permute(reshape(in[0], {2, 3, 4}), {2, 0, 1});
        auto c = concat<double>({reshape(t, {4, 6}), in[1]}, 0);
        return reduce_all(mul(gather_rows(c, {1, 5, 2, 1}), gather_rows(c, {0, 3, 6, 7})), Reduce::sum);
    }, {in1, pos});
    run("norms", [](Tape<double>&, const std::vector<Tensor<double>>& in) {
        auto gn = group_norm(in[0], 2, 1e-5, in[1], in[2], GnStats::per_set);
        auto ln = layer_norm(gn, 1e-5, in[1], in[2]);
        return reduce_all(mul(ln, in[3]), Reduce::sum);
    }, {in1, Tensor<double>::uniform({1, 6}, 0.5, 1.5, rng), Tensor<double>::uniform({1, 6}, -0.5, 0.5, rng),
        Tensor<double>::uniform({4, 6}, -1, 1, rng)});

    {
        const int c = 16, g = 4, cg = c / g, n = 8;
        Tensor<double> probe = Tensor<double>::uniform({n, c}, -1, 1, rng);
        auto fn = [&, probe](Tape<double>&, const std::vector<Tensor<double>>& in) {
            const Tensor<double>& x = in[0];
            std::vector<Tensor<double>> parts;
            for (int i = 0; i < g; ++i)
                parts.push_back(nonlinear_self_attn(
                    matmul(slice_cols(x, i * cg, (i + 1) * cg), in[1 + static_cast<size_t>(i)])));
            auto sh = channel_shuffle(concat(parts, 1), g);
            auto gn = group_norm(add(sh, x), g, 1e-5, in[1 + g], in[2 + g]);
            return reduce_all(mul(gn, probe), Reduce::sum);
        };
        std::vector<Tensor<double>> inputs;
        inputs.push_back(Tensor<double>::uniform({n, c}, -2, 2, rng));
        for (int i = 0; i < g; ++i) inputs.push_back(Tensor<double>::uniform({cg, cg}, -1, 1, rng));
        inputs.push_back(Tensor<double>::uniform({1, c}, 0.5, 1.5, rng));
        inputs.push_back(Tensor<double>::uniform({1, c}, -0.5, 0.5, rng));
        run("gsa_block", fn, inputs);
    }
    {
        Tensor<double> noise = gumbel_noise<double>({3, 5}, rng);
        Tensor<double> probe = Tensor<double>::uniform({3, 5}, -1, 1, rng);
        run("gumbel_softmax", [noise, probe](Tape<double>&, const std::vector<Tensor<double>>& in) {
            return reduce_all(mul(gumbel_softmax(in[0], noise, 0.7), probe), Reduce::sum);
        }, {Tensor<double>::uniform({3, 5}, -2, 2, rng)});
    }
    return rep;
}

struct UnbiasednessReport {
    double worst_linf = 0;
    int distributions = 0;
};

inline UnbiasednessReport check_gumbel_max_unbiased(int draws, uint64_t seed) {
    UnbiasednessReport rep;
    Rng rng(mix_seed(seed, 0xCA7));
    std::vector<std::vector<double>> dists = {{0.2, 0.5, 0.3}};
    for (int extra = 0; extra < 3; ++extra) {
        const int m = 2 + rng.uniform_int(7);  // M <= 8
        std::vector<double> d(static_cast<size_t>(m));
        double sum = 0;
        for (auto& v : d) {
            v = 0.05 + rng.uniform();
            sum += v;
        }
        for (auto& v : d) v /= sum;
        dists.push_back(d);
    }
    for (const auto& dist : dists) {
        std::vector<float> logit;
        for (double p : dist) logit.push_back(static_cast<float>(std::log(p)));
        Tensor<float> s({1, static_cast<int>(dist.size())}, std::move(logit));
        std::vector<int> counts(dist.size(), 0);
        for (int t = 0; t < draws; ++t) ++counts[static_cast<size_t>(gumbel_max_indices(s, rng, true)[0])];
        for (size_t j = 0; j < dist.size(); ++j)
            rep.worst_linf = std::max(rep.worst_linf,
                                      std::fabs(static_cast<double>(counts[j]) / draws - dist[j]));
    }
    rep.distributions = static_cast<int>(dists.size());
    return rep;
}

struct AnnealReport {
    double min_saturation = 1;   // max row entry at tau = 1e-3
    bool entropy_monotone = true;
};

inline AnnealReport check_anneal_saturation(uint64_t seed) {
    AnnealReport rep;
    Rng rng(mix_seed(seed, 0x7A0));
    for (int fixture = 0; fixture < 8; ++fixture) {
        Tensor<double> logits = Tensor<double>::uniform({5, 9}, -1, 1, rng);
        Tensor<double> noise = gumbel_noise<double>({5, 9}, rng);
        auto frozen = gumbel_softmax(logits, noise, 1e-3);
        for (int i = 0; i < 5; ++i) {
            double mx = 0;
            for (int j = 0; j < 9; ++j) mx = std::max(mx, frozen.at(i, j));
            rep.min_saturation = std::min(rep.min_saturation, mx);
        }
        std::vector<double> prev;
        for (double tau : {1.0, 0.5, 0.1, 0.01}) {
            auto y = gumbel_softmax(logits, noise, tau);
            std::vector<double> ent;
            for (int i = 0; i < 5; ++i) {
                double h = 0;
                for (int j = 0; j < 9; ++j) {
                    double p = y.at(i, j);
                    if (p > 1e-30) h -= p * std::log(p);
                }
                ent.push_back(h);
            }
            if (!prev.empty())
                for (size_t i = 0; i < ent.size(); ++i)
                    if (ent[i] > prev[i] + 1e-9) rep.entropy_monotone = false;
            prev = ent;
        }
    }
    return rep;
}

struct ShuffleReport {
    bool formula_ok = true;
    bool inverse_ok = true;
    int cases = 0;
};

inline ShuffleReport check_shuffle_exhaustive(int c_max = 24) {
    ShuffleReport rep;
    for (int c = 1; c <= c_max; ++c)
        for (int g = 1; g <= c; ++g) {
            if (c % g != 0) continue;
            ++rep.cases;
            const int cg = c / g;
            std::vector<float> vals(static_cast<size_t>(c));
            for (int i = 0; i < c; ++i) vals[static_cast<size_t>(i)] = static_cast<float>(i);
            Tensor<float> x({1, c}, std::move(vals));
            auto y = channel_shuffle(x, g);
            // Eq-style index map: output position j*g+i holds input i*cg+j
            for (int i = 0; i < g; ++i)
                for (int j = 0; j < cg; ++j)
                    if (y.at(0, j * g + i) != static_cast<float>(i * cg + j)) rep.formula_ok = false;
            auto round = channel_shuffle(y, cg);
            for (int i = 0; i < c; ++i)
                if (round.at(0, i) != static_cast<float>(i)) rep.inverse_ok = false;
        }
    return rep;
}

struct ParamTrendReport {
    bool monotone = true;
    bool gsa_below_mha = true;
};

inline ParamTrendReport check_param_trend() {
    ParamTrendReport rep;
    for (int c : {64, 128, 256, 512, 1024}) {
        size_t prev = static_cast<size_t>(-1);
        for (int g : {1, 2, 4, 8}) {
            size_t count = gsa_layer_param_count(c, g);
            if (count >= prev) rep.monotone = false;
            prev = count;
        }
        if (gsa_layer_param_count(c, 8) >= mha_layer_param_count(c, 8)) rep.gsa_below_mha = false;
    }
    return rep;
}

// FPS on the 4-point collinear fixture picks different subsets from
// different starts; returns true when the witness holds.
inline bool check_fps_start_witness() {
    PointCloud<float> cloud(4, 3, {0, 0, 0, 1, 0, 0, 2, 0, 0, 9, 0, 0});
    auto a = fps(cloud, 3, 0);
    auto b = fps(cloud, 3, 1);
    if (a != std::vector<int>{0, 3, 2}) return false;
    if (b != std::vector<int>{1, 3, 0}) return false;
    std::set<int> sa(a.begin(), a.end()), sb(b.begin(), b.end());
    return sa != sb;
}

// ---------------------------------------------------------------------------
// Named property registry
// ---------------------------------------------------------------------------

inline std::vector<Result> run_suite(const Options& opts) {
    std::vector<Result> results;
    using Clock = std::chrono::steady_clock;

    auto add = [&](const std::string& name, std::function<std::pair<bool, std::string>()> body) {
        if (!opts.only.empty() && name.find(opts.only) == std::string::npos) return;
        Result r;
        r.name = name;
        auto t0 = Clock::now();
        try {
            auto [pass, detail] = body();
            r.pass = pass;
            r.detail = detail;
        } catch (const std::exception& e) {
            r.pass = false;
            r.detail = std::string("exception: ") + e.what();
        }
        r.seconds = std::chrono::duration<double>(Clock::now() - t0).count();
        if (!r.pass) r.detail += " [replay: --only " + name + " --seed " + std::to_string(opts.seed) + "]";
        if (opts.progress)
            (*opts.progress) << (r.pass ? "[PASS] " : "[FAIL] ") << name << " (" << std::fixed
                             << std::setprecision(2) << r.seconds << "s) " << r.detail << "\n";
        results.push_back(std::move(r));
    };

    const uint64_t seed = opts.seed;
    auto fmt = [](double v) {
        std::ostringstream os;
        os << std::scientific << std::setprecision(2) << v;
        return os.str();
    };

    add("tensor.grad-fidelity", [&] {
        auto rep = check_grad_fidelity(seed);
        return std::make_pair(rep.pass, "worst rel err " + fmt(rep.worst_rel) + " (" + rep.worst_case + ")");
    });

    add("tensor.softmax-rows", [&] {
        Rng rng(mix_seed(seed, 1));
        double worst = 0;
        for (int t = 0; t < (opts.trials ? opts.trials : 50); ++t) {
            Tensor<double> x = Tensor<double>::uniform({6, 9}, -3, 3, rng);
            auto y = softmax(x, 1);
            for (int i = 0; i < 6; ++i) {
                double s = 0;
                for (int j = 0; j < 9; ++j) s += y.at(i, j);
                worst = std::max(worst, std::fabs(s - 1.0));
            }
            worst = std::max(worst, detail::max_abs_diff(softmax(add_const(x, 2.5), 1), y));
        }
        return std::make_pair(worst < 1e-6, "worst deviation " + fmt(worst));
    });

    add("tensor.shape-roundtrip", [&] {
        Rng rng(mix_seed(seed, 2));
        bool ok = true;
        for (int t = 0; t < 20; ++t) {
            Tensor<float> x = Tensor<float>::uniform({5, 8}, -2, 2, rng);
            ok &= reshape(reshape(x, {8, 5}), {5, 8}).data() == x.data();
            ok &= transpose(transpose(x)).data() == x.data();
        }
        return std::make_pair(ok, std::string("bit-exact"));
    });

    add("tensor.tape-replay", [&] {
        Rng rng(mix_seed(seed, 3));
        Tape<float> tape;
        Tensor<float> x = tape.leaf(Tensor<float>::uniform({5, 5}, -2, 2, rng));
        auto loss = reduce_all(mul(softmax(x, 1), elu(x)), Reduce::sum);
        tape.backward(loss);
        auto g1 = tape.grad(x.node());
        tape.backward(loss);
        return std::make_pair(g1 == tape.grad(x.node()), std::string("identical gradients"));
    });

    add("geometry.pairwise", [&] {
        Rng rng(mix_seed(seed, 4));
        double worst = 0;
        for (int t = 0; t < 20; ++t) {
            auto cloud = detail::random_cloud<double>(15, 3, rng);
            auto d = pairwise_sq_dist(cloud);
            for (int i = 0; i < 15; ++i) {
                worst = std::max(worst, std::fabs(static_cast<double>(d.at(i, i))));
                for (int j = 0; j < 15; ++j)
                    worst = std::max(worst, std::fabs(static_cast<double>(d.at(i, j) - d.at(j, i))));
            }
            PointCloud<double> moved = cloud;
            for (int i = 0; i < moved.n; ++i)
                for (int k = 0; k < 3; ++k) moved.at(i, k) += 7.25;
            worst = std::max(worst, detail::max_abs_diff(pairwise_sq_dist(moved), d));
        }
        return std::make_pair(worst < 1e-9, "worst deviation " + fmt(worst));
    });

    add("geometry.feature-invariance", [&] {
        Rng rng(mix_seed(seed, 5));
        bool ok = true;
        for (int t = 0; t < 10; ++t) {
            auto cloud = detail::random_cloud<float>(20, 3, rng);
            PointCloud<float> feat(20, 5, std::vector<float>(100));
            for (int i = 0; i < 20; ++i) {
                for (int d = 0; d < 3; ++d) feat.at(i, d) = cloud.at(i, d);
                feat.at(i, 3) = static_cast<float>(rng.uniform(-9, 9));
                feat.at(i, 4) = static_cast<float>(rng.uniform(-9, 9));
            }
            ok &= knn(cloud, 4).indices == knn(feat, 4).indices;
            ok &= fps(cloud, 7, t % 20) == fps(feat, 7, t % 20);
        }
        return std::make_pair(ok, std::string("knn and fps read xyz only"));
    });

    add("geometry.fps-covariance", [&] {
        if (!check_fps_start_witness())
            return std::make_pair(false, std::string("start-dependence witness failed"));
        Rng rng(mix_seed(seed, 6));
        bool ok = true;
        for (int t = 0; t < 10; ++t) {
            auto cloud = detail::random_cloud<float>(14, 3, rng);
            auto perm = detail::random_perm(14, rng);
            std::vector<float> pts(14 * 3);
            for (int r = 0; r < 14; ++r)
                for (int d = 0; d < 3; ++d)
                    pts[static_cast<size_t>(r) * 3 + d] = cloud.at(perm[static_cast<size_t>(r)], d);
            PointCloud<float> moved(14, 3, std::move(pts));
            std::vector<int> inv(14);
            for (int r = 0; r < 14; ++r) inv[static_cast<size_t>(perm[static_cast<size_t>(r)])] = r;
            auto base = fps(cloud, 5, 2);
            auto rel = fps(moved, 5, inv[2]);
            for (int i = 0; i < 5; ++i)
                ok &= perm[static_cast<size_t>(rel[static_cast<size_t>(i)])] == base[static_cast<size_t>(i)];
        }
        return std::make_pair(ok, std::string("witness holds; relabeling relabels output"));
    });

    add("geometry.dilated-pool", [&] {
        Rng rng(mix_seed(seed, 7));
        bool ok = true;
        for (int t = 0; t < 10; ++t) {
            auto cloud = detail::random_cloud<float>(30, 3, rng);
            Rng s(rng.next_u64());
            auto dil = dilated_neighbor_sample(cloud, 5, 1.0, 30, s);
            auto nb = knn(cloud, 5);
            ok &= dil.pool == 5;
            for (int p = 0; p < 30; ++p) {
                std::set<int> a, b;
                for (int j = 0; j < 5; ++j) {
                    a.insert(dil.at(p, j));
                    b.insert(nb.at(p, j));
                }
                ok &= a == b;
            }
        }
        return std::make_pair(ok, std::string("pool == K degenerates to knn"));
    });

    add("attention.equivariance", [&] {
        auto rep = check_attention_equivariance(opts.trials ? opts.trials : 30, seed);
        bool pass = rep.max_dev32 < 1e-5 && rep.max_dev64 < 1e-10;
        return std::make_pair(pass, "max dev f32 " + fmt(rep.max_dev32) + ", f64 " + fmt(rep.max_dev64));
    });

    add("attention.shuffle-bijection", [&] {
        auto rep = check_shuffle_exhaustive(24);
        return std::make_pair(rep.formula_ok && rep.inverse_ok,
                              std::to_string(rep.cases) + " (c, g) cases, formula + inverse");
    });

    add("attention.rows-sum", [&] {
        Rng rng(mix_seed(seed, 8));
        double worst = 0;
        for (int t = 0; t < 20; ++t) {
            Tensor<float> q = Tensor<float>::uniform({5, 8}, -2, 2, rng);
            Tensor<float> x = Tensor<float>::uniform({7, 8}, -2, 2, rng);
            auto w = attn_weights(q, x);
            for (int i = 0; i < 5; ++i) {
                double s = 0;
                for (int j = 0; j < 7; ++j) s += w.at(i, j);
                worst = std::max(worst, std::fabs(s - 1.0));
            }
        }
        return std::make_pair(worst < 1e-6, "worst row-sum deviation " + fmt(worst));
    });

    add("attention.param-trend", [&] {
        auto rep = check_param_trend();
        return std::make_pair(rep.monotone && rep.gsa_below_mha,
                              std::string("counts strictly decreasing in g; GSA(g=8) < MHA-LG"));
    });

    add("sampling.gumbel-stats", [&] {
        Rng rng(mix_seed(seed, 9));
        auto g = gumbel_noise<double>({200000}, rng);
        double mean = 0;
        for (size_t i = 0; i < g.numel(); ++i) mean += g.data()[i];
        mean /= static_cast<double>(g.numel());
        double var = 0;
        for (size_t i = 0; i < g.numel(); ++i) {
            double d = g.data()[i] - mean;
            var += d * d;
        }
        var /= static_cast<double>(g.numel());
        bool pass = std::fabs(mean - 0.5772156649) < 0.01 && std::fabs(var - 1.6449340668) < 0.05;
        return std::make_pair(pass, "mean " + fmt(mean) + ", var " + fmt(var));
    });

    add("sampling.gumbel-max-unbiased", [&] {
        auto rep = check_gumbel_max_unbiased(opts.trials ? opts.trials : 100000, seed);
        return std::make_pair(rep.worst_linf <= 0.01,
                              "Linf " + fmt(rep.worst_linf) + " over " + std::to_string(rep.distributions) +
                                  " distributions");
    });

    add("sampling.gss-invariance", [&] {
        auto rep = check_gss_invariance(opts.trials ? opts.trials : 50, 10000, seed);
        bool pass = rep.multiset_mismatches == 0 && rep.train_linf <= 0.02;
        return std::make_pair(pass, "hard mismatches " + std::to_string(rep.multiset_mismatches) +
                                        ", train Linf " + fmt(rep.train_linf));
    });

    add("sampling.entropy-anneal", [&] {
        auto rep = check_anneal_saturation(seed);
        bool pass = rep.min_saturation >= 0.999 && rep.entropy_monotone;
        return std::make_pair(pass, "min saturation " + fmt(rep.min_saturation) + ", entropy monotone " +
                                        (rep.entropy_monotone ? "yes" : "no"));
    });

    add("sampling.anneal-schedule", [&] {
        SamplerConfig cfg;
        bool ok = std::fabs(anneal(cfg, 0, 50) - 1.0) < 1e-12 &&
                  std::fabs(anneal(cfg, 50, 50) - 0.1) < 1e-12 &&
                  std::fabs(anneal(cfg, 25, 50) - std::sqrt(0.1)) < 1e-12;
        double prev = 1e9;
        for (int e = 0; e <= 50; ++e) {
            double t = anneal(cfg, e, 50);
            ok &= t <= prev + 1e-15;
            prev = t;
        }
        return std::make_pair(ok, std::string("endpoints 1.0 -> 0.1, monotone"));
    });

    add("embedding.arpe-equivariance", [&] {
        Rng rng(mix_seed(seed, 10));
        double worst = 0;
        for (int t = 0; t < 5; ++t) {
            Rng init = rng.split(100 + static_cast<uint64_t>(t));
            ArpeLayer<float> layer("p", 3, 24, init, 4);
            auto cloud = detail::random_cloud<float>(12, 3, rng);
            Rng fa(1), fb(1);
            auto base = layer.forward(nullptr, cloud, fa, false);
            auto perm = detail::random_perm(12, rng);
            std::vector<float> pts(12 * 3);
            for (int r = 0; r < 12; ++r)
                for (int d = 0; d < 3; ++d)
                    pts[static_cast<size_t>(r) * 3 + d] = cloud.at(perm[static_cast<size_t>(r)], d);
            PointCloud<float> moved(12, 3, std::move(pts));
            auto lhs = layer.forward(nullptr, moved, fb, false);
            worst = std::max(worst, detail::max_abs_diff(lhs, detail::permute_rows(base, perm)));
        }
        return std::make_pair(worst < 1e-5, "max dev " + fmt(worst));
    });

    add("embedding.neighbor-order", [&] {
        Rng rng(mix_seed(seed, 11));
        Rng init = rng.split(55);
        ArpeLayer<float> layer("p", 3, 16, init, 5);
        auto cloud = detail::random_cloud<float>(11, 3, rng);
        auto nbrs = knn(cloud, 5);
        Rng fa(1), fb(1);
        auto base = layer.forward_with_neighbors(nullptr, cloud, nbrs, fa, false);
        NeighborIndex shuffled = nbrs;
        Rng sh(rng.next_u64());
        for (int p = 0; p < nbrs.n; ++p) {
            std::vector<int> row(5);
            for (int j = 0; j < 5; ++j) row[static_cast<size_t>(j)] = nbrs.at(p, j);
            sh.shuffle(row);
            for (int j = 0; j < 5; ++j)
                shuffled.indices[static_cast<size_t>(p) * 5 + j] = row[static_cast<size_t>(j)];
        }
        auto re = layer.forward_with_neighbors(nullptr, cloud, shuffled, fb, false);
        double dev = detail::max_abs_diff(re, base);
        return std::make_pair(dev == 0, "max dev " + fmt(dev) + " (exact)");
    });

    add("embedding.translation", [&] {
        Rng rng(mix_seed(seed, 12));
        auto cloud = detail::random_cloud<float>(10, 3, rng);
        auto nbrs = knn(cloud, 3);
        auto ps = position_set(cloud, nbrs);
        PointCloud<float> moved = cloud;
        for (int i = 0; i < moved.n; ++i) {
            moved.at(i, 0) += 3.5f;
            moved.at(i, 1) -= 2.0f;
            moved.at(i, 2) += 1.25f;
        }
        auto ps2 = position_set(moved, nbrs);
        double rel_dev = 0, abs_dev = 0;
        for (int p = 0; p < 10; ++p)
            for (int j = 0; j < 3; ++j) {
                for (int c = 3; c < 6; ++c)
                    rel_dev = std::max(rel_dev, std::fabs(static_cast<double>(ps2.at(p, j, c) - ps.at(p, j, c))));
                abs_dev = std::max(abs_dev, std::fabs(static_cast<double>(ps2.at(p, j, 0) - ps.at(p, j, 0) - 3.5f)));
            }
        return std::make_pair(rel_dev < 1e-6 && abs_dev < 1e-6,
                              "relative-half dev " + fmt(rel_dev));
    });

    add("model.loss-nonneg", [&] {
        Rng rng(mix_seed(seed, 13));
        bool ok = true;
        for (int t = 0; t < 20; ++t) {
            Tensor<float> logits = Tensor<float>::uniform({5, 4}, -4, 4, rng);
            ok &= element_wise_loss(logits, {rng.uniform_int(4)}).item() >= 0;
        }
        // saturated one-hot-correct logits drive the loss toward zero
        Tensor<float> sat({2, 3}, {30, 0, 0, 30, 0, 0});
        ok &= element_wise_loss(sat, {0}).item() < 1e-6;
        return std::make_pair(ok, std::string("loss >= 0, -> 0 at one-hot-correct saturation"));
    });

    add("model.end-to-end-invariance", [&] {
        Rng rng(mix_seed(seed, 14));
        PATConfig cfg;
        cfg.n_points = 20;
        cfg.c = 16;
        cfg.g = 4;
        cfg.n_gsa = 2;
        cfg.k = 5;
        cfg.m = 3;
        cfg.dropout = 0;
        cfg.plan = parse_plan("gss8");
        PatModel<float> model(cfg);
        bool ok = true;
        double worst = 0;
        for (int t = 0; t < 5; ++t) {
            auto cloud = detail::random_cloud<float>(20, 3, rng);
            auto base = predict(model, cloud);
            auto perm = detail::random_perm(20, rng);
            std::vector<float> pts(20 * 3);
            for (int r = 0; r < 20; ++r)
                for (int d = 0; d < 3; ++d)
                    pts[static_cast<size_t>(r) * 3 + d] = cloud.at(perm[static_cast<size_t>(r)], d);
            auto moved = predict(model, PointCloud<float>(20, 3, std::move(pts)));
            ok &= moved.label == base.label;
            for (int j = 0; j < 3; ++j)
                worst = std::max(worst, std::fabs(moved.scores[static_cast<size_t>(j)] -
                                                  base.scores[static_cast<size_t>(j)]));
        }
        return std::make_pair(ok && worst < 1e-4, "gss-only plan, score dev " + fmt(worst));
    });

    add("model.checkpoint-roundtrip", [&] {
        Rng rng(mix_seed(seed, 15));
        PATConfig cfg;
        cfg.n_points = 16;
        cfg.c = 16;
        cfg.g = 4;
        cfg.n_gsa = 1;
        cfg.k = 4;
        cfg.m = 3;
        cfg.dropout = 0;
        cfg.plan.clear();
        PatModel<float> model(cfg);
        TrainState state;
        state.epoch = 3;
        state.step = 42;
        namespace fs = std::filesystem;
        const std::string path = (fs::temp_directory_path() / "patkit_prop_ckpt.pat").string();
        save_checkpoint(path, model, state);
        auto [restored, rstate] = open_checkpoint<float>(path);
        auto cloud = detail::random_cloud<float>(16, 3, rng);
        Rng fa(2), fb(2);
        auto a = model.forward(nullptr, cloud, false, fa, 0.1);
        auto b = restored->forward(nullptr, cloud, false, fb, 0.1);
        fs::remove(path);
        bool ok = a.point_logits.data() == b.point_logits.data() && rstate.step == 42;
        return std::make_pair(ok, std::string("forward bit-identical after round trip"));
    });

    add("model.overfit-32", [&] {
        PATConfig cfg;
        cfg.n_points = 48;
        cfg.c = 32;
        cfg.g = 4;
        cfg.n_gsa = 2;
        cfg.k = 16;
        cfg.m = 4;
        cfg.plan = parse_plan("gss16");
        cfg.dropout = 0.0;
        cfg.optim.batch = 32;
        cfg.optim.epochs = 200;
        cfg.optim.lr = 1e-2;
        cfg.optim.lr_halve_every = 0;
        PatModel<float> model(cfg);
        Rng rng(2024);
        auto data = gen_shapes<float>(
            {ShapeKind::sphere, ShapeKind::cube, ShapeKind::cylinder, ShapeKind::torus}, 8, 48, 0.01,
            0.0, rng);
        auto state = train(model, data);
        double best = 1e9;
        for (const auto& row : state.history) best = std::min(best, row.loss);
        return std::make_pair(best < 0.05 && state.step <= 200,
                              "best loss " + fmt(best) + " in " + std::to_string(state.step) + " steps");
    });

    add("model.train-determinism", [&] {
        PATConfig cfg;
        cfg.n_points = 24;
        cfg.c = 16;
        cfg.g = 4;
        cfg.n_gsa = 1;
        cfg.k = 6;
        cfg.m = 4;
        cfg.plan = parse_plan("gss8");
        cfg.dropout = 0.1;
        cfg.optim.batch = 8;
        cfg.optim.epochs = 2;
        Rng rng(mix_seed(seed, 16));
        auto data = gen_shapes<float>(
            {ShapeKind::sphere, ShapeKind::cube, ShapeKind::cylinder, ShapeKind::torus}, 4, 24, 0.01,
            0.0, rng);
        PatModel<float> a(cfg), b(cfg);
        auto ra = train(a, data);
        auto rb = train(b, data);
        bool ok = metrics_csv(ra.history) == metrics_csv(rb.history);
        return std::make_pair(ok, std::string("identical metric history for fixed seed"));
    });

    add("dataio.clip-count", [&] {
        Rng rng(mix_seed(seed, 17));
        ClipSpec spec;
        spec.n_sample = 4;
        bool ok = true;
        for (int span_ms : {100, 749, 750, 751, 1049, 1050, 1450, 3000}) {
            std::vector<EventRecord> s = {{0, 0, 0, 0},
                                          {static_cast<int64_t>(span_ms) * 1000 - 1, 1, 1, 1}};
            auto clips = window_events<float>(s, spec, rng);
            int expect = span_ms >= 750 ? (span_ms - 750) / 100 + 1 : 0;
            ok &= static_cast<int>(clips.size()) == expect;
        }
        return std::make_pair(ok, std::string("count == floor((span-window)/step)+1"));
    });

    add("dataio.clip-contents", [&] {
        Rng rng(mix_seed(seed, 18));
        auto stream = gen_gesture_stream(1, 1200, 2000, rng);
        ClipSpec spec;
        spec.n_sample = 64;
        Rng crng(3);
        auto clips = window_events<float>(stream.events, spec, crng);
        bool ok = !clips.empty();
        for (const auto& c : clips) {
            ok &= c.n == 64 && c.dims == 4;
            for (int i = 0; i < c.n; ++i) ok &= c.at(i, 2) >= 0 && c.at(i, 2) < 1;
        }
        return std::make_pair(ok, std::to_string(clips.size()) + " clips, t_norm in [0,1)");
    });

    add("dataio.shape-balance", [&] {
        Rng rng(mix_seed(seed, 19));
        auto set = gen_shapes<float>(
            {ShapeKind::sphere, ShapeKind::cube, ShapeKind::cylinder, ShapeKind::torus}, 6, 64, 0.01,
            0.02, rng);
        std::vector<int> counts(4, 0);
        for (int lab : set.labels) ++counts[static_cast<size_t>(lab)];
        bool ok = true;
        for (int c = 0; c < 4; ++c) ok &= counts[static_cast<size_t>(c)] == 6;
        int outliers = 0;
        for (auto m : set.outlier_masks[0]) outliers += m;
        ok &= outliers == 1;  // floor(0.02 * 64)
        return std::make_pair(ok, std::string("labels exactly balanced"));
    });

    add("dataio.loader-errors", [&] {
        bool ok = true;
        {
            std::istringstream ragged("0 0 0\n1 0\n");
            try {
                parse_point_cloud<float>(ragged, "f");
                ok = false;
            } catch (const ParseError& e) {
                ok &= std::string(e.what()).find("f:2") != std::string::npos;
            }
        }
        {
            std::istringstream bad("t_us,x,y,polarity\n10,5,5,1\n5,5,5,1\n");
            try {
                parse_events(bad, "e");
                ok = false;
            } catch (const ParseError& e) {
                ok &= std::string(e.what()).find("e:3") != std::string::npos;
            }
        }
        return std::make_pair(ok, std::string("malformed inputs rejected with located errors"));
    });

    add("cli.seed-determinism", [&] {
        // two short trainings with the same seed produce identical artifacts
        PATConfig cfg;
        cfg.n_points = 20;
        cfg.c = 16;
        cfg.g = 4;
        cfg.n_gsa = 1;
        cfg.k = 5;
        cfg.m = 4;
        cfg.plan.clear();
        cfg.optim.batch = 8;
        cfg.optim.epochs = 1;
        Rng rng(mix_seed(seed, 20));
        auto data = gen_shapes<float>(
            {ShapeKind::sphere, ShapeKind::cube, ShapeKind::cylinder, ShapeKind::torus}, 3, 20, 0.01,
            0.0, rng);
        PatModel<float> a(cfg), b(cfg);
        auto sa = train(a, data);
        auto sb = train(b, data);
        bool ok = metrics_csv(sa.history) == metrics_csv(sb.history);
        auto pa = predict(a, data.clouds[0]);
        auto pb = predict(b, data.clouds[0]);
        ok &= pa.label == pb.label;
        return std::make_pair(ok, std::string("fixed seed reproduces metrics and predictions"));
    });

    return results;
}

inline bool all_passed(const std::vector<Result>& results) {
    for (const auto& r : results)
        if (!r.pass) return false;
    return true;
}

}  // namespace patkit::props
