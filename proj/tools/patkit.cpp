// patkit: train, evaluate, benchmark and probe point attention models.

#include <CLI11.hpp>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <string>
#include <vector>

#include "patkit/patkit.hpp"
#include "patkit/props.hpp"

namespace fs = std::filesystem;
using namespace patkit;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitRuntime = 2;
constexpr int kExitPropFailure = 3;

struct RunOptions {
    std::string out_dir;
    std::string config_path;
    std::vector<std::string> overrides;  // key=value
    std::string precision = "f32";

    std::string data_dir;
    std::string synthetic;  // shapes4 | gestures3 | sphere|cube|cylinder|torus (sample)
    int train_count = 800;
    int test_count = 200;
    double noise_sigma = 0.01;
    double outlier_frac = 0.0;
    int window_ms = 750;
    int step_ms = 100;
    int stream_duration_ms = 1400;
    int events_per_sec = 2500;

    std::string ckpt_path;
    int ckpt_every = 0;
    double stop_at_acc = -1;
    bool infer_noise = false;
    int fps_start = 0;
    bool quiet = false;

    int bench_runs = 100;
    int bench_batch = 8;
    int sample_n_out = 64;

    std::string prop_only;
    int prop_trials = 0;
};

// defaults -> config file -> --set overrides -> explicit CLI flags
KvConfig resolve_model_config(const PATConfig& defaults, const RunOptions& run,
                              const std::map<std::string, std::string>& explicit_kv) {
    KvConfig kv = defaults.to_kv();
    kv.set("plan", "auto");  // scale the reference plan shape to --points unless overridden
    if (!run.config_path.empty()) kv.merge(KvConfig::load(run.config_path));
    for (const auto& ov : run.overrides) {
        auto eq = ov.find('=');
        if (eq == std::string::npos)
            throw ConfigError("--set expects key=value, got '" + ov + "'");
        kv.set(KvConfig::trim(ov.substr(0, eq)), KvConfig::trim(ov.substr(eq + 1)));
    }
    for (const auto& [k, v] : explicit_kv) kv.set(k, v);
    return kv;
}

void write_resolved(const RunOptions& run, const KvConfig& kv, const std::string& command) {
    if (run.out_dir.empty()) return;
    fs::create_directories(run.out_dir);
    KvConfig out = kv;
    out.set("run.command", command);
    out.set("run.precision", run.precision);
    if (!run.data_dir.empty()) out.set("run.data", run.data_dir);
    if (!run.synthetic.empty()) out.set("run.synthetic", run.synthetic);
    out.save(run.out_dir + "/config.resolved");
}

template <typename T>
struct DataBundle {
    LabeledClouds<T> train;
    LabeledClouds<T> test;
    bool events = false;
};

template <typename T>
DataBundle<T> build_dataset(const PATConfig& cfg, const RunOptions& run) {
    DataBundle<T> out;
    if (!run.data_dir.empty()) {
        // sniff the manifest: event datasets reference .csv streams
        std::ifstream index(run.data_dir + "/index.tsv");
        if (!index) throw ParseError("cannot open dataset index: " + run.data_dir + "/index.tsv");
        std::string first;
        std::getline(index, first);
        const bool events = first.find(".csv") != std::string::npos;
        if (events) {
            auto streams = load_event_dataset(run.data_dir);
            ClipSpec spec{run.window_ms, run.step_ms, cfg.n_points};
            Rng crng(mix_seed(cfg.seed, 0xC11F));
            out.train = event_clip_dataset<T>(streams, spec, crng);
            out.events = true;
        } else {
            out.train = load_dataset<T>(run.data_dir);
        }
        return out;
    }
    if (run.synthetic == "shapes4" || run.synthetic.empty()) {
        const std::vector<ShapeKind> classes = {ShapeKind::sphere, ShapeKind::cube,
                                                ShapeKind::cylinder, ShapeKind::torus};
        const int per_train = std::max(1, run.train_count / 4);
        const int per_test = std::max(1, run.test_count / 4);
        Rng train_rng = Rng(cfg.seed).split(0xDA7A);
        Rng test_rng = Rng(cfg.seed).split(0x7E57);
        out.train = gen_shapes<T>(classes, per_train, cfg.n_points, run.noise_sigma,
                                  run.outlier_frac, train_rng);
        out.test = gen_shapes<T>(classes, per_test, cfg.n_points, run.noise_sigma,
                                 run.outlier_frac, test_rng);
        if (cfg.task == Task::segment) {
            for (const auto& c : out.train.clouds) out.train.point_labels.push_back(quadrant_labels(c));
            for (const auto& c : out.test.clouds) out.test.point_labels.push_back(quadrant_labels(c));
        }
        return out;
    }
    if (run.synthetic == "gestures3") {
        Rng train_rng = Rng(cfg.seed).split(0xDA7A);
        Rng test_rng = Rng(cfg.seed).split(0x7E57);
        const int train_streams = std::max(3, run.train_count);
        const int test_streams = std::max(3, run.test_count);
        auto tr = gen_gesture_streams(std::max(1, train_streams / 3), run.stream_duration_ms,
                                      run.events_per_sec, train_rng);
        auto te = gen_gesture_streams(std::max(1, test_streams / 3), run.stream_duration_ms,
                                      run.events_per_sec, test_rng);
        ClipSpec spec{run.window_ms, run.step_ms, cfg.n_points};
        Rng ca = Rng(cfg.seed).split(0xC1A);
        Rng cb = Rng(cfg.seed).split(0xC1B);
        out.train = event_clip_dataset<T>(tr, spec, ca);
        out.test = event_clip_dataset<T>(te, spec, cb);
        out.events = true;
        return out;
    }
    throw ConfigError("unknown synthetic dataset '" + run.synthetic +
                      "' (expected shapes4 or gestures3)");
}

void print_eval(const std::string& tag, double clip_acc, double stream_acc) {
    std::cout << tag << " accuracy " << std::fixed << std::setprecision(4) << clip_acc;
    if (stream_acc >= 0) std::cout << ", stream-level " << stream_acc;
    std::cout << "\n";
}

template <typename T>
void write_confusion(const std::string& path, const EvalReport<T>& rep) {
    std::ofstream out(path);
    for (size_t i = 0; i < rep.confusion.size(); ++i) {
        for (size_t j = 0; j < rep.confusion[i].size(); ++j) {
            if (j) out << ',';
            out << rep.confusion[i][j];
        }
        out << '\n';
    }
}

template <typename T>
int run_train(const PATConfig& cfg_in, const RunOptions& run, const KvConfig& resolved) {
    PATConfig cfg = cfg_in;
    cfg.validate();
    if (run.out_dir.empty()) throw ConfigError("train requires --out");
    fs::create_directories(run.out_dir);
    write_resolved(run, resolved, "train");

    auto data = build_dataset<T>(cfg, run);
    if (data.train.size() == 0) throw ConfigError("training dataset is empty");
    std::cout << "training on " << data.train.size() << " samples ("
              << (data.events ? "event clips" : "point clouds") << "), "
              << "model " << cfg.output_rows() << " head rows, "
              << PatModel<T>(cfg).param_count() << " parameters\n";

    PatModel<T> model(cfg);
    model.fps_start_index = run.fps_start;
    TrainHooks<T> hooks;
    hooks.out_dir = run.out_dir;
    hooks.ckpt_every = run.ckpt_every;
    hooks.eval_set = data.test.size() ? &data.test : nullptr;
    hooks.stop_at_acc = run.stop_at_acc;
    hooks.log = run.quiet ? nullptr : &std::cout;

    auto state = train(model, data.train, hooks);
    std::cout << "finished after " << state.epoch << " epochs, " << state.step << " steps; final loss "
              << (state.history.empty() ? 0.0 : state.history.back().loss) << "\n";
    if (data.test.size()) {
        auto rep = evaluate(model, data.test);
        print_eval("test", rep.accuracy, rep.stream_accuracy);
        write_confusion(run.out_dir + "/confusion.csv", rep);
    }
    return kExitOk;
}

template <typename T>
int run_eval(const RunOptions& run, const KvConfig& resolved) {
    if (run.ckpt_path.empty()) throw ConfigError("eval requires --ckpt");
    auto [model, state] = open_checkpoint<T>(run.ckpt_path);
    model->fps_start_index = run.fps_start;
    write_resolved(run, resolved, "eval");

    auto data = build_dataset<T>(model->cfg, run);
    const LabeledClouds<T>& set = data.test.size() ? data.test : data.train;
    auto rep = evaluate(*model, set, run.infer_noise, model->cfg.seed);
    print_eval("eval", rep.accuracy, rep.stream_accuracy);
    if (!run.out_dir.empty()) {
        write_confusion(run.out_dir + "/confusion.csv", rep);
        std::ofstream metrics(run.out_dir + "/eval.txt");
        metrics << "accuracy " << rep.accuracy << "\n";
        if (rep.stream_accuracy >= 0) metrics << "stream_accuracy " << rep.stream_accuracy << "\n";
    }
    return kExitOk;
}

// width for the size-matched MHA comparator: closest layer count to the GSA
int mha_sm_width(int c, int g, int heads) {
    const size_t target = gsa_layer_param_count(c, g);
    int best = heads;
    size_t best_gap = static_cast<size_t>(-1);
    for (int w = heads; w <= c; w += heads) {
        size_t count = mha_layer_param_count(w, heads);
        size_t gap = count > target ? count - target : target - count;
        if (gap < best_gap) {
            best_gap = gap;
            best = w;
        }
    }
    return best;
}

template <typename T>
int run_bench(const PATConfig& cfg_in, const RunOptions& run, const KvConfig& resolved) {
    PATConfig cfg = cfg_in;
    cfg.validate();
    write_resolved(run, resolved, "bench");
    std::ostringstream report;

    report << "# per-layer parameter counts at width " << cfg.c << "\n";
    report << "layer,params\n";
    for (int g : {1, 2, 4, 8})
        if (cfg.c % g == 0) report << "gsa_g" << g << "," << gsa_layer_param_count(cfg.c, g) << "\n";
    report << "mha_lg_h" << cfg.heads << "," << mha_layer_param_count(cfg.c, cfg.heads) << "\n";
    const int smw = mha_sm_width(cfg.c, cfg.g, cfg.heads);
    report << "mha_sm_h" << cfg.heads << "_w" << smw << "," << mha_layer_param_count(smw, cfg.heads)
           << "\n";

    auto bench_model = [&](PATConfig mc, const std::string& tag) {
        PatModel<T> model(mc);
        Rng crng(mix_seed(mc.seed, 0xBE7C));
        std::vector<PointCloud<T>> batch;
        for (int i = 0; i < run.bench_batch; ++i) {
            std::vector<T> pts(static_cast<size_t>(mc.n_points) * 3);
            for (auto& v : pts) v = static_cast<T>(crng.uniform(-1, 1));
            batch.emplace_back(mc.n_points, 3, std::move(pts));
        }
        Rng frng(1);
        // warm-up
        for (const auto& c : batch) model.forward(nullptr, c, false, frng, 0.1);
        std::vector<double> times;
        for (int r = 0; r < run.bench_runs; ++r) {
            auto t0 = std::chrono::steady_clock::now();
            for (const auto& c : batch) model.forward(nullptr, c, false, frng, 0.1);
            times.push_back(std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count());
        }
        std::sort(times.begin(), times.end());
        const double median = times[times.size() / 2];
        const double p90 = times[static_cast<size_t>(0.9 * (times.size() - 1))];
        report << tag << "," << model.param_count() << "," << std::fixed << std::setprecision(3)
               << median << "," << p90 << "\n";
    };

    report << "\n# forward latency, batch " << run.bench_batch << ", " << run.bench_runs
           << " runs (ms per batch)\n";
    report << "model,params,median_ms,p90_ms\n";
    bench_model(cfg, "pat_gsa_g" + std::to_string(cfg.g));
    PATConfig mha_lg = cfg;
    mha_lg.attention = AttnKind::mha;
    bench_model(mha_lg, "pat_mha_lg_h" + std::to_string(cfg.heads));
    PATConfig mha_sm = cfg;
    mha_sm.attention = AttnKind::mha;
    mha_sm.c = smw;
    mha_sm.g = 1;
    bench_model(mha_sm, "pat_mha_sm_h" + std::to_string(cfg.heads));

    std::cout << report.str();
    if (!run.out_dir.empty()) {
        std::ofstream out(run.out_dir + "/bench.csv");
        out << report.str();
    }
    return kExitOk;
}

int run_proptest(const RunOptions& run, uint64_t seed, const KvConfig& resolved) {
    props::Options opts;
    opts.seed = seed;
    opts.trials = run.prop_trials;
    opts.only = run.prop_only;
    opts.progress = &std::cout;
    write_resolved(run, resolved, "proptest");
    auto results = props::run_suite(opts);
    if (results.empty()) {
        std::cerr << "no properties match filter '" << run.prop_only << "'\n";
        return kExitUsage;
    }
    int failed = 0;
    for (const auto& r : results) failed += !r.pass;
    std::cout << results.size() - failed << "/" << results.size() << " properties passed\n";
    if (!run.out_dir.empty()) {
        std::ofstream out(run.out_dir + "/proptest.txt");
        for (const auto& r : results)
            out << (r.pass ? "PASS " : "FAIL ") << r.name << " " << r.detail << "\n";
    }
    return failed ? kExitPropFailure : kExitOk;
}

template <typename T>
int run_sample(const PATConfig& cfg_in, const RunOptions& run, const KvConfig& resolved) {
    if (run.out_dir.empty()) throw ConfigError("sample requires --out");
    fs::create_directories(run.out_dir);
    write_resolved(run, resolved, "sample");

    PointCloud<T> cloud;
    if (!run.data_dir.empty()) {
        cloud = load_point_cloud<T>(run.data_dir);
    } else {
        ShapeKind kind = ShapeKind::sphere;
        if (run.synthetic == "cube") kind = ShapeKind::cube;
        else if (run.synthetic == "cylinder") kind = ShapeKind::cylinder;
        else if (run.synthetic == "torus") kind = ShapeKind::torus;
        else if (!run.synthetic.empty() && run.synthetic != "sphere")
            throw ConfigError("unknown --synthetic shape '" + run.synthetic + "'");
        Rng rng(cfg_in.seed);
        auto set = gen_shapes<T>({kind}, 1, cfg_in.n_points, run.noise_sigma, run.outlier_frac, rng);
        cloud = set.clouds[0];
    }
    save_point_cloud(run.out_dir + "/cloud.txt", cloud);

    const int n_out = std::min(run.sample_n_out, cloud.n);
    auto fps_idx = fps(cloud, n_out, std::min(run.fps_start, cloud.n - 1));
    {
        std::ofstream out(run.out_dir + "/fps.txt");
        out << "# index\n";
        for (int i : fps_idx) out << i << "\n";
    }

    // GSS selections come from a model pass: checkpointed weights when given,
    // otherwise a fresh seeded model with a single gss stage
    std::unique_ptr<PatModel<T>> model;
    if (!run.ckpt_path.empty()) {
        model = open_checkpoint<T>(run.ckpt_path).first;
    } else {
        PATConfig cfg = cfg_in;
        cfg.n_points = cloud.n;
        cfg.f = cloud.f();
        cfg.plan = {{DownKind::gss, n_out}};
        cfg.n_gsa = 1;
        cfg.validate();
        model = std::make_unique<PatModel<T>>(cfg);
    }
    model->fps_start_index = run.fps_start;
    Rng frng(cfg_in.seed);
    auto fwd = model->forward(nullptr, cloud, false, frng, model->cfg.sampler.tau_end, run.infer_noise);
    {
        std::ofstream out(run.out_dir + "/gss.txt");
        out << "# stage slot index margin\n";
        int stage = 0;
        size_t margin_stage = 0;
        for (size_t s = 0; s < model->cfg.plan.size(); ++s) {
            if (model->cfg.plan[s].kind != DownKind::gss) {
                ++stage;
                continue;
            }
            const auto& idx = fwd.sampled_idx[s];
            const auto& margins = fwd.gss_margins[margin_stage++];
            for (size_t slot = 0; slot < idx.size(); ++slot)
                out << stage << " " << slot << " " << idx[slot] << " " << margins[slot] << "\n";
            ++stage;
        }
    }
    std::cout << "wrote cloud.txt, fps.txt, gss.txt to " << run.out_dir << "\n";
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"point attention toolkit: train, evaluate and probe attention models on point sets"};
    app.require_subcommand(1);

    RunOptions run;
    PATConfig defaults;
    std::map<std::string, std::string> explicit_kv;

    // model flags shared by train/bench/sample; values land in explicit_kv
    std::string task = "classify", plan = "", attention = "", embedding = "", norm = "", shuffle = "",
                optimizer = "";
    int points = 0, width = 0, groups = 0, gsa_layers = 0, classes = 0, heads = 0, knn_k = 0;
    int batch = 0, epochs = 0, lr_halve = -1;
    long long seed = -1;
    double lr = -1, dropout = -1, tau_start = -1, tau_end = -1;

    auto add_model_flags = [&](CLI::App* cmd) {
        cmd->add_option("--task", task, "classify or segment");
        cmd->add_option("--points", points, "points per cloud");
        cmd->add_option("--width", width, "hidden width c");
        cmd->add_option("--groups", groups, "attention groups g");
        cmd->add_option("--gsa-layers", gsa_layers, "attention block count");
        cmd->add_option("--plan", plan, "down-sampling plan, e.g. fps96,gss32,gss16 or none");
        cmd->add_option("--classes", classes, "class count m");
        cmd->add_option("--knn-k", knn_k, "neighbors per point for the embedding");
        cmd->add_option("--attention", attention, "gsa or mha");
        cmd->add_option("--embedding", embedding, "arpe or mlp");
        cmd->add_option("--norm", norm, "gn or ln");
        cmd->add_option("--shuffle", shuffle, "channel shuffle on/off");
        cmd->add_option("--heads", heads, "MHA head count");
        cmd->add_option("--dropout", dropout, "head dropout rate");
        cmd->add_option("--tau-start", tau_start, "initial Gumbel temperature");
        cmd->add_option("--tau-end", tau_end, "final Gumbel temperature");
        cmd->add_option("--seed", seed, "run seed");
        cmd->add_option("--optimizer", optimizer, "adam or sgd");
        cmd->add_option("--lr", lr, "learning rate");
        cmd->add_option("--lr-halve-every", lr_halve, "halve lr every k epochs (0 off)");
        cmd->add_option("--batch", batch, "minibatch size");
        cmd->add_option("--epochs", epochs, "training epochs");
        cmd->add_option("--config", run.config_path, "key = value config file");
        cmd->add_option("--set", run.overrides, "extra key=value overrides")->take_all();
        cmd->add_option("--precision", run.precision, "f32 or f64")
            ->check(CLI::IsMember({"f32", "f64"}));
        cmd->add_option("--out", run.out_dir, "output directory");
    };

    auto collect_explicit = [&](CLI::App* cmd) {
        auto set_if = [&](const char* flag, const std::string& key, auto value) {
            auto* opt = cmd->get_option_no_throw(flag);
            if (opt && opt->count()) {
                std::ostringstream os;
                os << value;
                explicit_kv[key] = os.str();
            }
        };
        set_if("--task", "task", task);
        set_if("--points", "points", points);
        set_if("--width", "width", width);
        set_if("--groups", "groups", groups);
        set_if("--gsa-layers", "gsa_layers", gsa_layers);
        set_if("--plan", "plan", plan);
        set_if("--classes", "classes", classes);
        set_if("--knn-k", "knn_k", knn_k);
        set_if("--attention", "attention", attention);
        set_if("--embedding", "embedding", embedding);
        set_if("--norm", "norm", norm);
        set_if("--shuffle", "channel_shuffle", shuffle);
        set_if("--heads", "heads", heads);
        set_if("--dropout", "dropout", dropout);
        set_if("--tau-start", "tau_start", tau_start);
        set_if("--tau-end", "tau_end", tau_end);
        set_if("--seed", "seed", seed);
        set_if("--optimizer", "optimizer", optimizer);
        set_if("--lr", "lr", lr);
        set_if("--lr-halve-every", "lr_halve_every", lr_halve);
        set_if("--batch", "batch", batch);
        set_if("--epochs", "epochs", epochs);
    };

    auto* train_cmd = app.add_subcommand("train", "train a model and write checkpoints + metrics");
    add_model_flags(train_cmd);
    train_cmd->add_option("--data", run.data_dir, "dataset manifest directory");
    train_cmd->add_option("--synthetic", run.synthetic, "shapes4 or gestures3");
    train_cmd->add_option("--train-count", run.train_count, "synthetic training samples/streams");
    train_cmd->add_option("--test-count", run.test_count, "synthetic test samples/streams");
    train_cmd->add_option("--noise-sigma", run.noise_sigma, "surface jitter sigma");
    train_cmd->add_option("--outlier-frac", run.outlier_frac, "outlier fraction per cloud");
    train_cmd->add_option("--window-ms", run.window_ms, "event window length");
    train_cmd->add_option("--step-ms", run.step_ms, "event window stride");
    train_cmd->add_option("--ckpt-every", run.ckpt_every, "extra checkpoint every k epochs");
    train_cmd->add_option("--stop-at-acc", run.stop_at_acc, "early stop at this accuracy");
    train_cmd->add_option("--fps-start", run.fps_start, "FPS start index");
    train_cmd->add_flag("--quiet", run.quiet, "suppress per-epoch log lines");

    auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint");
    eval_cmd->add_option("--ckpt", run.ckpt_path, "checkpoint path")->required();
    eval_cmd->add_option("--data", run.data_dir, "dataset manifest directory");
    eval_cmd->add_option("--synthetic", run.synthetic, "shapes4 or gestures3");
    eval_cmd->add_option("--train-count", run.train_count, "synthetic training samples/streams");
    eval_cmd->add_option("--test-count", run.test_count, "synthetic test samples/streams");
    eval_cmd->add_option("--noise-sigma", run.noise_sigma, "surface jitter sigma");
    eval_cmd->add_option("--outlier-frac", run.outlier_frac, "outlier fraction per cloud");
    eval_cmd->add_option("--window-ms", run.window_ms, "event window length");
    eval_cmd->add_option("--step-ms", run.step_ms, "event window stride");
    eval_cmd->add_flag("--infer-noise", run.infer_noise, "sample subsets with Gumbel noise");
    eval_cmd->add_option("--fps-start", run.fps_start, "FPS start index");
    eval_cmd->add_option("--out", run.out_dir, "output directory");
    eval_cmd->add_option("--precision", run.precision, "f32 or f64")
        ->check(CLI::IsMember({"f32", "f64"}));
    eval_cmd->add_option("--seed", seed, "dataset seed");

    auto* bench_cmd = app.add_subcommand("bench", "model size and forward-latency comparison");
    add_model_flags(bench_cmd);
    bench_cmd->add_option("--runs", run.bench_runs, "timed repetitions");
    bench_cmd->add_option("--bench-batch", run.bench_batch, "clouds per timed batch");

    auto* prop_cmd = app.add_subcommand("proptest", "run the property suite");
    prop_cmd->add_option("--only", run.prop_only, "substring filter on property names");
    prop_cmd->add_option("--trials", run.prop_trials, "override per-property trial counts");
    prop_cmd->add_option("--seed", seed, "suite seed");
    prop_cmd->add_option("--out", run.out_dir, "output directory");

    auto* sample_cmd = app.add_subcommand("sample", "dump FPS and GSS selections for plotting");
    add_model_flags(sample_cmd);
    sample_cmd->add_option("--input", run.data_dir, "input point cloud file");
    sample_cmd->add_option("--synthetic-shape", run.synthetic, "sphere, cube, cylinder or torus");
    sample_cmd->add_option("--n-out", run.sample_n_out, "subset size to select");
    sample_cmd->add_option("--noise-sigma", run.noise_sigma, "surface jitter sigma");
    sample_cmd->add_option("--outlier-frac", run.outlier_frac, "outlier fraction");
    sample_cmd->add_option("--fps-start", run.fps_start, "FPS start index");
    sample_cmd->add_option("--ckpt", run.ckpt_path, "optional checkpoint for GSS weights");
    sample_cmd->add_flag("--infer-noise", run.infer_noise, "sample subsets with Gumbel noise");

    CLI11_PARSE(app, argc, argv);

    try {
        CLI::App* cmd = app.get_subcommands().front();
        collect_explicit(cmd);
        if (cmd == eval_cmd && eval_cmd->count("--seed")) explicit_kv["seed"] = std::to_string(seed);
        if (run.synthetic == "gestures3") {
            // event clips are (x, y, t, polarity) points over 3 gesture classes
            if (!explicit_kv.count("classes")) explicit_kv["classes"] = "3";
            if (!explicit_kv.count("extra_features")) explicit_kv["extra_features"] = "1";
        }
        if (cmd == prop_cmd) {
            uint64_t prop_seed = prop_cmd->count("--seed") ? static_cast<uint64_t>(seed) : 1234;
            KvConfig resolved;
            resolved.set("proptest.seed", std::to_string(prop_seed));
            resolved.set("proptest.only", run.prop_only);
            resolved.set_int("proptest.trials", run.prop_trials);
            return run_proptest(run, prop_seed, resolved);
        }

        KvConfig resolved = resolve_model_config(defaults, run, explicit_kv);
        PATConfig cfg = PATConfig::from_kv(resolved);
        resolved.set("plan", plan_to_string(cfg.plan));
        const bool f64 = run.precision == "f64";

        if (cmd == train_cmd)
            return f64 ? run_train<double>(cfg, run, resolved) : run_train<float>(cfg, run, resolved);
        if (cmd == eval_cmd)
            return f64 ? run_eval<double>(run, resolved) : run_eval<float>(run, resolved);
        if (cmd == bench_cmd)
            return f64 ? run_bench<double>(cfg, run, resolved) : run_bench<float>(cfg, run, resolved);
        if (cmd == sample_cmd)
            return f64 ? run_sample<double>(cfg, run, resolved) : run_sample<float>(cfg, run, resolved);
        std::cerr << "unknown command\n";
        return kExitUsage;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const TrainingDiverged& e) {
        std::cerr << "training diverged: " << e.what() << "\n";
        return kExitRuntime;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitRuntime;
    }
}
