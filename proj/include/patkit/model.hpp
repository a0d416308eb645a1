#pragma once

#include <cmath>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "patkit/attention.hpp"
#include "patkit/config.hpp"
#include "patkit/dataio.hpp"
#include "patkit/embedding.hpp"
#include "patkit/sampling.hpp"

namespace patkit {

enum class Task { classify, segment };
enum class AttnKind { gsa, mha };
enum class EmbedKind { arpe, mlp };
enum class DownKind { fps, gss };

struct DownStep {
    DownKind kind = DownKind::fps;
    int size = 0;
};

inline std::string plan_to_string(const std::vector<DownStep>& plan) {
    if (plan.empty()) return "none";
    std::ostringstream os;
    for (size_t i = 0; i < plan.size(); ++i) {
        if (i) os << ',';
        os << (plan[i].kind == DownKind::fps ? "fps" : "gss") << plan[i].size;
    }
    return os.str();
}

// Reference plan shape scaled to the point count: fps(3N/8), gss(N/8), gss(N/16).
inline std::vector<DownStep> default_plan(int n_points) {
    std::vector<DownStep> plan;
    int prev = n_points;
    auto push = [&](DownKind kind, int size) {
        if (size >= 4 && size < prev) {
            plan.push_back({kind, size});
            prev = size;
        }
    };
    push(DownKind::fps, 3 * n_points / 8);
    push(DownKind::gss, n_points / 8);
    push(DownKind::gss, n_points / 16);
    return plan;
}

// "fps384,gss128,gss64", "none", or "auto" (scaled reference shape).
inline std::vector<DownStep> parse_plan(const std::string& s, int n_points = 0) {
    std::vector<DownStep> plan;
    if (s == "auto") {
        if (n_points <= 0) throw ConfigError("plan 'auto' needs a point count");
        return default_plan(n_points);
    }
    if (s.empty() || s == "none") return plan;
    std::istringstream is(s);
    std::string tok;
    while (std::getline(is, tok, ',')) {
        tok = KvConfig::trim(tok);
        DownStep step;
        if (tok.rfind("fps", 0) == 0) step.kind = DownKind::fps;
        else if (tok.rfind("gss", 0) == 0) step.kind = DownKind::gss;
        else throw ConfigError("bad plan step '" + tok + "' (want fps<N> or gss<N>)");
        try {
            step.size = std::stoi(tok.substr(3));
        } catch (const std::logic_error&) {
            throw ConfigError("bad plan step size in '" + tok + "'");
        }
        plan.push_back(step);
    }
    return plan;
}

struct OptimConfig {
    std::string kind = "adam";  // adam | sgd
    double lr = 1e-3;
    int lr_halve_every = 15;  // epochs; 0 disables the schedule
    int batch = 16;
    int epochs = 30;
    double clip_norm = 5.0;
};

// Full model hyperparameter record. Desk-scale defaults; the full-scale
// network (1024 points, width 1024, plan fps384,gss128,gss64) is just
// another assignment of these fields.
struct PATConfig {
    Task task = Task::classify;
    int n_points = 256;
    int f = 0;
    int c = 128;
    int g = 8;
    int n_gsa = 3;
    std::vector<DownStep> plan = {{DownKind::fps, 96}, {DownKind::gss, 32}, {DownKind::gss, 16}};
    std::vector<int> mlp_sizes;  // empty -> {c, c/2, c/4}
    int m = 4;
    double dropout = 0.2;
    int k = 32;
    double d0 = 2.0;
    int n0 = 1024;
    AttnKind attention = AttnKind::gsa;
    EmbedKind embedding = EmbedKind::arpe;
    NormKind norm = NormKind::group;
    bool shuffle = true;
    int heads = 8;
    SamplerConfig sampler;
    OptimConfig optim;
    uint64_t seed = 7;

    std::vector<int> head_widths() const {
        if (!mlp_sizes.empty()) return mlp_sizes;
        return {c, std::max(4, c / 2), std::max(4, c / 4)};
    }

    void validate() const {
        if (optim.kind != "adam" && optim.kind != "sgd")
            throw ConfigError("config: unknown optimizer '" + optim.kind + "'");
        if (n_points < 2) throw ConfigError("config: need at least 2 points");
        if (c < 1 || g < 1 || c % g != 0)
            throw ConfigError("config: width " + std::to_string(c) + " must be divisible by groups " +
                              std::to_string(g));
        if (attention == AttnKind::mha && c % heads != 0)
            throw ConfigError("config: width must be divisible by heads for the MHA baseline");
        if (n_gsa < 1) throw ConfigError("config: need at least one attention block");
        if (m < 2) throw ConfigError("config: need at least 2 classes");
        if (task == Task::segment && !plan.empty())
            throw ConfigError("config: segmentation uses no down-sampling plan");
        int prev = n_points;
        bool seen_gss = false;
        for (const auto& s : plan) {
            if (s.size < 1 || s.size > n_points)
                throw ConfigError("config: plan size " + std::to_string(s.size) + " out of range");
            if (s.size >= prev)
                throw ConfigError("config: plan sizes must be strictly decreasing (" +
                                  std::to_string(s.size) + " after " + std::to_string(prev) + ")");
            if (s.kind == DownKind::gss) seen_gss = true;
            else if (seen_gss)
                throw ConfigError("config: fps after gss is not supported (soft subsets carry no "
                                  "exact coordinates)");
            prev = s.size;
        }
        if (static_cast<int>(plan.size()) > n_gsa)
            throw ConfigError("config: more down-sampling steps than attention blocks");
        sampler.validate();
    }

    KvConfig to_kv() const {
        KvConfig kv;
        kv.set("task", task == Task::classify ? "classify" : "segment");
        kv.set_int("points", n_points);
        kv.set_int("extra_features", f);
        kv.set_int("width", c);
        kv.set_int("groups", g);
        kv.set_int("gsa_layers", n_gsa);
        kv.set("plan", plan_to_string(plan));
        std::ostringstream ms;
        auto hw = head_widths();
        for (size_t i = 0; i < hw.size(); ++i) ms << (i ? "," : "") << hw[i];
        kv.set("mlp_sizes", ms.str());
        kv.set_int("classes", m);
        kv.set_double("dropout", dropout);
        kv.set_int("knn_k", k);
        kv.set_double("dilation_d0", d0);
        kv.set_int("dilation_n0", n0);
        kv.set("attention", attention == AttnKind::gsa ? "gsa" : "mha");
        kv.set("embedding", embedding == EmbedKind::arpe ? "arpe" : "mlp");
        kv.set("norm", norm == NormKind::group ? "gn" : "ln");
        kv.set("channel_shuffle", shuffle ? "on" : "off");
        kv.set_int("heads", heads);
        kv.set_double("tau_start", sampler.tau_start);
        kv.set_double("tau_end", sampler.tau_end);
        kv.set("infer_noise", sampler.infer_noise ? "on" : "off");
        kv.set_int("seed", static_cast<long long>(seed));
        kv.set("optimizer", optim.kind);
        kv.set_double("lr", optim.lr);
        kv.set_int("lr_halve_every", optim.lr_halve_every);
        kv.set_int("batch", optim.batch);
        kv.set_int("epochs", optim.epochs);
        kv.set_double("clip_norm", optim.clip_norm);
        return kv;
    }

    static PATConfig from_kv(const KvConfig& kv) {
        PATConfig cfg;
        cfg.task = kv.get_or("task", "classify") == "segment" ? Task::segment : Task::classify;
        cfg.n_points = static_cast<int>(kv.get_int("points"));
        cfg.f = static_cast<int>(kv.get_int("extra_features"));
        cfg.c = static_cast<int>(kv.get_int("width"));
        cfg.g = static_cast<int>(kv.get_int("groups"));
        cfg.n_gsa = static_cast<int>(kv.get_int("gsa_layers"));
        cfg.plan = cfg.task == Task::segment && kv.get("plan") == "auto"
                       ? std::vector<DownStep>{}
                       : parse_plan(kv.get("plan"), cfg.n_points);
        cfg.mlp_sizes.clear();
        {
            std::istringstream is(kv.get("mlp_sizes"));
            std::string tok;
            while (std::getline(is, tok, ',')) cfg.mlp_sizes.push_back(std::stoi(tok));
        }
        cfg.m = static_cast<int>(kv.get_int("classes"));
        cfg.dropout = kv.get_double("dropout");
        cfg.k = static_cast<int>(kv.get_int("knn_k"));
        cfg.d0 = kv.get_double("dilation_d0");
        cfg.n0 = static_cast<int>(kv.get_int("dilation_n0"));
        cfg.attention = kv.get_or("attention", "gsa") == "mha" ? AttnKind::mha : AttnKind::gsa;
        cfg.embedding = kv.get_or("embedding", "arpe") == "mlp" ? EmbedKind::mlp : EmbedKind::arpe;
        cfg.norm = kv.get_or("norm", "gn") == "ln" ? NormKind::layer : NormKind::group;
        cfg.shuffle = kv.get_or("channel_shuffle", "on") != "off";
        cfg.heads = static_cast<int>(kv.get_int("heads"));
        cfg.sampler.tau_start = kv.get_double("tau_start");
        cfg.sampler.tau_end = kv.get_double("tau_end");
        cfg.sampler.infer_noise = kv.get_or("infer_noise", "off") == "on";
        cfg.seed = static_cast<uint64_t>(kv.get_int("seed"));
        cfg.optim.kind = kv.get_or("optimizer", "adam");
        cfg.optim.lr = kv.get_double("lr");
        cfg.optim.lr_halve_every = static_cast<int>(kv.get_int("lr_halve_every"));
        cfg.optim.batch = static_cast<int>(kv.get_int("batch"));
        cfg.optim.epochs = static_cast<int>(kv.get_int("epochs"));
        cfg.optim.clip_norm = kv.get_double("clip_norm");
        return cfg;
    }

    // rows of per-point logits the head sees
    int output_rows() const { return plan.empty() ? n_points : plan.back().size; }

    static PATConfig full_scale_classifier() {
        PATConfig cfg;
        cfg.n_points = 1024;
        cfg.c = 1024;
        cfg.plan = {{DownKind::fps, 384}, {DownKind::gss, 128}, {DownKind::gss, 64}};
        cfg.m = 40;
        cfg.optim.batch = 64;
        cfg.optim.epochs = 150;
        cfg.optim.lr = 1e-3;
        cfg.optim.lr_halve_every = 15;
        return cfg;
    }
};

// ---------------------------------------------------------------------------
// The PAT network
// ---------------------------------------------------------------------------

template <typename T>
class PatModel {
public:
    PATConfig cfg;
    ArpeLayer<T> arpe;
    MlpEmbed<T> mlp_embed;
    std::vector<GsaLayer<T>> gsa_layers;
    std::vector<MhaLayer<T>> mha_layers;
    std::vector<GssLayer<T>> gss_layers;
    SharedMlp<T> head;
    Linear<T> head_out;
    ParamRegistry<T> registry;
    int fps_start_index = 0;

    explicit PatModel(PATConfig config) : cfg(std::move(config)) {
        cfg.validate();
        Rng rng = Rng(cfg.seed).split(0xA11C);
        const int pdims = 3 + cfg.f;
        if (cfg.embedding == EmbedKind::arpe)
            arpe = ArpeLayer<T>("arpe", pdims, cfg.c, rng, cfg.k, cfg.d0, cfg.n0);
        else
            mlp_embed = MlpEmbed<T>("embed", pdims, cfg.c, rng);
        for (int i = 0; i < cfg.n_gsa; ++i) {
            const std::string name = (cfg.attention == AttnKind::gsa ? "gsa." : "mha.") + std::to_string(i);
            if (cfg.attention == AttnKind::gsa)
                gsa_layers.emplace_back(name, cfg.c, cfg.g, rng, cfg.shuffle, cfg.norm);
            else
                mha_layers.emplace_back(name, cfg.c, cfg.heads, rng, cfg.norm);
        }
        int gss_i = 0;
        for (const auto& s : cfg.plan)
            if (s.kind == DownKind::gss)
                gss_layers.emplace_back("gss." + std::to_string(gss_i++), s.size, cfg.c, rng);
        head = SharedMlp<T>("head", cfg.c, cfg.head_widths(), rng, cfg.dropout);
        head_out = Linear<T>("head.out", cfg.head_widths().back(), cfg.m, rng);
        register_all();
    }

    PatModel(const PatModel&) = delete;
    PatModel& operator=(const PatModel&) = delete;

    struct ForwardResult {
        Tensor<T> point_logits;                      // R x m
        std::vector<std::vector<int>> sampled_idx;   // per plan step (empty for soft gss)
        std::vector<std::vector<T>> gss_margins;     // per hard gss step: top1-top2 scores
        int gss_duplicates = 0;
    };

    // One cloud through the whole network. Training mode draws dilated
    // neighbors, Gumbel noise and dropout from rng; inference is
    // deterministic unless infer_noise asks for sampled subsets.
    ForwardResult forward(Tape<T>* tape, const PointCloud<T>& cloud, bool training, Rng& rng,
                          double tau, bool infer_noise = false) {
        ForwardResult res;
        Tensor<T> feats = cfg.embedding == EmbedKind::arpe
                              ? arpe.forward(tape, cloud, rng, training)
                              : mlp_embed.forward(tape, cloud, rng, training);
        // xyz of the live subset, for FPS steps
        std::vector<T> xyz(static_cast<size_t>(cloud.n) * 3);
        for (int i = 0; i < cloud.n; ++i)
            for (int d = 0; d < 3; ++d) xyz[static_cast<size_t>(i) * 3 + d] = cloud.at(i, d);
        int live = cloud.n;

        int gss_i = 0;
        for (int i = 0; i < cfg.n_gsa; ++i) {
            feats = cfg.attention == AttnKind::gsa
                        ? gsa_layers[static_cast<size_t>(i)].forward(tape, feats)
                        : mha_layers[static_cast<size_t>(i)].forward(tape, feats);
            if (i >= static_cast<int>(cfg.plan.size())) continue;
            const DownStep& step = cfg.plan[static_cast<size_t>(i)];
            if (step.kind == DownKind::fps) {
                PointCloud<T> sub(live, 3, std::vector<T>(xyz.begin(), xyz.begin() + live * 3));
                std::vector<int> idx = fps(sub, step.size, std::min(fps_start_index, live - 1));
                feats = gather_rows(feats, idx);
                std::vector<T> nxyz(static_cast<size_t>(step.size) * 3);
                for (int r = 0; r < step.size; ++r)
                    for (int d = 0; d < 3; ++d)
                        nxyz[static_cast<size_t>(r) * 3 + d] =
                            xyz[static_cast<size_t>(idx[static_cast<size_t>(r)]) * 3 + d];
                xyz = std::move(nxyz);
                live = step.size;
                res.sampled_idx.push_back(std::move(idx));
            } else {
                SamplerConfig sc = cfg.sampler;
                sc.training = training;
                sc.tau = tau;
                sc.infer_noise = infer_noise;
                GssResult<T> g = gss(tape, feats, gss_layers[static_cast<size_t>(gss_i++)], sc, rng);
                feats = g.output;
                res.gss_duplicates += g.duplicate_count;
                if (!g.margins.empty()) res.gss_margins.push_back(g.margins);
                if (!g.selected.empty()) {
                    std::vector<T> nxyz(static_cast<size_t>(step.size) * 3);
                    for (int r = 0; r < step.size; ++r)
                        for (int d = 0; d < 3; ++d)
                            nxyz[static_cast<size_t>(r) * 3 + d] =
                                xyz[static_cast<size_t>(g.selected[static_cast<size_t>(r)]) * 3 + d];
                    xyz = std::move(nxyz);
                    res.sampled_idx.push_back(std::move(g.selected));
                } else {
                    // soft subset: no exact coordinates to carry
                    res.sampled_idx.push_back({});
                    xyz.assign(static_cast<size_t>(step.size) * 3, T(0));
                }
                live = step.size;
            }
        }
        Tensor<T> hidden = head.forward(tape, feats, rng, training);
        res.point_logits = head_out.forward(tape, hidden);
        return res;
    }

    size_t param_count() const { return registry.total_count(); }

private:
    void register_all() {
        if (cfg.embedding == EmbedKind::arpe)
            arpe.register_params(registry);
        else
            mlp_embed.register_params(registry);
        for (auto& l : gsa_layers) l.register_params(registry);
        for (auto& l : mha_layers) l.register_params(registry);
        for (auto& l : gss_layers) l.register_params(registry);
        head.register_params(registry);
        head_out.register_params(registry);
    }
};

// ---------------------------------------------------------------------------
// Loss and prediction
// ---------------------------------------------------------------------------

// Mean over points of softmax cross-entropy. Classification broadcasts one
// label to every remaining point; segmentation passes per-point labels.
template <typename T>
Tensor<T> element_wise_loss(const Tensor<T>& point_logits, const std::vector<int>& labels) {
    if (point_logits.rank() != 2)
        throw ShapeError("element_wise_loss: expected R x m logits, got " +
                         shape_str(point_logits.shape()));
    const int r = point_logits.dim(0);
    const int m = point_logits.dim(1);
    if (static_cast<int>(labels.size()) != r && labels.size() != 1)
        throw ContractError("element_wise_loss: label count " + std::to_string(labels.size()) +
                            " does not match " + std::to_string(r) + " points");
    std::vector<T> onehot(static_cast<size_t>(r) * m, T(0));
    for (int i = 0; i < r; ++i) {
        const int lab = labels[labels.size() == 1 ? 0 : static_cast<size_t>(i)];
        if (lab < 0 || lab >= m)
            throw ContractError("element_wise_loss: label " + std::to_string(lab) + " out of [0, " +
                                std::to_string(m) + ")");
        onehot[static_cast<size_t>(i) * m + lab] = T(1);
    }
    Tensor<T> mask = Tensor<T>::raw({r, m}, std::move(onehot));
    Tensor<T> picked = mul(log_softmax(point_logits, 1), mask);
    return neg(scale(reduce_all(picked, Reduce::sum), static_cast<T>(1.0 / r)));
}

template <typename T>
struct Prediction {
    int label = -1;                 // classification
    std::vector<int> point_labels;  // segmentation
    std::vector<double> scores;     // classification: mean per-class softmax
};

// Classification: argmax of the mean of per-point softmax scores (scores are
// averaged, not logits). Segmentation: per-point argmax.
template <typename T>
Prediction<T> predict_logits(const PATConfig& cfg, const Tensor<T>& point_logits) {
    Prediction<T> pred;
    const int r = point_logits.dim(0);
    const int m = point_logits.dim(1);
    Tensor<T> probs = softmax(point_logits.detached(), 1);
    if (cfg.task == Task::classify) {
        pred.scores.assign(static_cast<size_t>(m), 0.0);
        for (int i = 0; i < r; ++i)
            for (int j = 0; j < m; ++j) pred.scores[static_cast<size_t>(j)] += probs.at(i, j);
        for (auto& s : pred.scores) s /= r;
        pred.label = 0;
        for (int j = 1; j < m; ++j)
            if (pred.scores[static_cast<size_t>(j)] > pred.scores[static_cast<size_t>(pred.label)])
                pred.label = j;
    } else {
        pred.point_labels.resize(static_cast<size_t>(r));
        for (int i = 0; i < r; ++i) {
            int best = 0;
            for (int j = 1; j < m; ++j)
                if (probs.at(i, j) > probs.at(i, best)) best = j;
            pred.point_labels[static_cast<size_t>(i)] = best;
        }
    }
    return pred;
}

template <typename T>
Prediction<T> predict(PatModel<T>& model, const PointCloud<T>& cloud, bool infer_noise = false,
                      uint64_t noise_seed = 0) {
    Rng rng(noise_seed);
    auto fwd = model.forward(nullptr, cloud, false, rng, model.cfg.sampler.tau_end, infer_noise);
    return predict_logits(model.cfg, fwd.point_logits);
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct MetricRow {
    int epoch = 0;
    int64_t step = 0;
    double loss = 0;
    double acc = 0;
    double tau = 0;
    double lr = 0;
};

// Step schedule: halve every `every` epochs (0 disables).
inline double halved_lr(double lr0, int epoch, int every) {
    if (every <= 0) return lr0;
    return lr0 * std::pow(0.5, epoch / every);
}

inline std::string metrics_csv(const std::vector<MetricRow>& rows) {
    std::ostringstream os;
    os << "epoch,step,loss,acc,tau,lr\n";
    os.precision(10);
    for (const auto& r : rows)
        os << r.epoch << ',' << r.step << ',' << r.loss << ',' << r.acc << ',' << r.tau << ','
           << r.lr << '\n';
    return os.str();
}

struct TrainState {
    int epoch = 0;        // epochs completed
    int64_t step = 0;     // optimizer steps taken
    double tau = 1.0;
    uint64_t rng_state = 0;
    std::vector<MetricRow> history;
};

template <typename T>
struct EvalReport {
    double accuracy = 0;                 // clip/sample level
    double stream_accuracy = -1;         // event datasets only
    std::vector<std::vector<int>> confusion;  // [true][pred]
    std::vector<int> predictions;
};

template <typename T>
EvalReport<T> evaluate(PatModel<T>& model, const LabeledClouds<T>& set, bool infer_noise = false,
                       uint64_t noise_seed = 0) {
    EvalReport<T> rep;
    if (model.cfg.task == Task::segment && set.point_labels.size() != set.size())
        throw ContractError("evaluate: segmentation needs per-point labels for every sample");
    rep.confusion.assign(static_cast<size_t>(model.cfg.m),
                         std::vector<int>(static_cast<size_t>(model.cfg.m), 0));
    size_t correct = 0, total = 0;
    std::map<int, std::vector<int>> by_stream;
    for (size_t i = 0; i < set.size(); ++i) {
        if (model.cfg.task == Task::classify) {
            auto pred = predict(model, set.clouds[i], infer_noise, mix_seed(noise_seed, i));
            rep.predictions.push_back(pred.label);
            rep.confusion[static_cast<size_t>(set.labels[i])][static_cast<size_t>(pred.label)]++;
            correct += pred.label == set.labels[i];
            ++total;
            if (!set.stream_ids.empty()) by_stream[set.stream_ids[i]].push_back(pred.label);
        } else {
            auto pred = predict(model, set.clouds[i], infer_noise, mix_seed(noise_seed, i));
            const auto& truth = set.point_labels[i];
            for (size_t p = 0; p < truth.size(); ++p) {
                rep.confusion[static_cast<size_t>(truth[p])][static_cast<size_t>(pred.point_labels[p])]++;
                correct += pred.point_labels[p] == truth[p];
                ++total;
            }
        }
    }
    rep.accuracy = total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0;
    if (!by_stream.empty()) {
        size_t ok = 0;
        for (const auto& [sid, preds] : by_stream) {
            int truth = -1;
            for (size_t i = 0; i < set.size(); ++i)
                if (set.stream_ids[i] == sid) {
                    truth = set.labels[i];
                    break;
                }
            ok += system_prediction(preds) == truth;
        }
        rep.stream_accuracy = static_cast<double>(ok) / static_cast<double>(by_stream.size());
    }
    return rep;
}

template <typename T>
struct TrainHooks {
    std::string out_dir;                        // empty: keep everything in memory
    int ckpt_every = 0;                         // extra checkpoints every k epochs
    const LabeledClouds<T>* eval_set = nullptr;  // acc column uses this when present
    double stop_at_acc = -1;                    // early stop threshold on the acc column
    std::ostream* log = nullptr;
};

template <typename T>
void save_checkpoint(const std::string& path, const PatModel<T>& model, const TrainState& state);

// Minibatch Adam with step-halved learning rate and per-epoch tau annealing.
// Deterministic given cfg.seed: sample order, per-sample noise streams and
// gradient accumulation order are all fixed.
template <typename T>
TrainState train(PatModel<T>& model, const LabeledClouds<T>& train_set, const TrainHooks<T>& hooks = {}) {
    if (train_set.size() == 0) throw ContractError("train: empty dataset");
    if (model.cfg.task == Task::segment && train_set.point_labels.size() != train_set.size())
        throw ContractError("train: segmentation needs per-point labels for every sample");
    const PATConfig& cfg = model.cfg;
    const OptimConfig& opt = cfg.optim;
    constexpr double kBeta1 = 0.9, kBeta2 = 0.999, kAdamEps = 1e-8;

    TrainState state;
    Rng order_rng = Rng(cfg.seed).split(0x0DDE);
    auto& params = model.registry.params();
    for (auto* p : params) {
        if (p->m1.empty()) p->m1.assign(p->numel(), T(0));
        if (p->m2.empty()) p->m2.assign(p->numel(), T(0));
    }
    std::vector<std::vector<T>> grad_acc(params.size());

    const size_t n = train_set.size();
    std::vector<int> order(n);
    for (size_t i = 0; i < n; ++i) order[i] = static_cast<int>(i);

    for (int epoch = 0; epoch < opt.epochs; ++epoch) {
        const double tau = anneal(cfg.sampler, epoch, opt.epochs);
        const double lr = halved_lr(opt.lr, epoch, opt.lr_halve_every);
        state.tau = tau;
        order_rng.shuffle(order);
        double epoch_loss = 0;
        size_t train_correct = 0;
        size_t seen = 0;

        for (size_t b0 = 0; b0 < n; b0 += static_cast<size_t>(opt.batch)) {
            const size_t b1 = std::min(n, b0 + static_cast<size_t>(opt.batch));
            for (auto& g : grad_acc) g.clear();

            // Each sample runs on its own tape with a pre-assigned rng stream;
            // PATKIT_THREADS caps the fan-out. Gradients land in per-sample
            // buffers and merge in sample order, so results do not depend on
            // the worker count.
            struct SampleOut {
                double loss = 0;
                bool correct = false;
                std::vector<std::vector<T>> grads;
                std::exception_ptr error;
            };
            std::vector<SampleOut> outs(b1 - b0);
            auto run_sample = [&](size_t bi) {
                SampleOut& out = outs[bi - b0];
                try {
                    const size_t si = static_cast<size_t>(order[bi]);
                    Rng srng(mix_seed(cfg.seed, static_cast<uint64_t>(epoch) * 1000003u + bi, si));
                    Tape<T> tape;
                    auto fwd = model.forward(&tape, train_set.clouds[si], true, srng, tau);
                    std::vector<int> labels =
                        cfg.task == Task::classify ? std::vector<int>{train_set.labels[si]}
                                                   : train_set.point_labels[si];
                    Tensor<T> loss = element_wise_loss(fwd.point_logits, labels);
                    out.loss = static_cast<double>(loss.item());
                    if (cfg.task == Task::classify)
                        out.correct = predict_logits(cfg, fwd.point_logits).label == train_set.labels[si];
                    tape.backward(loss);
                    out.grads.resize(params.size());
                    for (size_t pi = 0; pi < params.size(); ++pi) {
                        const int node = tape.param_node(params[pi]);
                        out.grads[pi] = node >= 0 ? tape.grad(node)
                                                  : std::vector<T>(params[pi]->numel(), T(0));
                    }
                } catch (...) {
                    out.error = std::current_exception();
                }
            };
            const int cap = env_thread_cap();
            int workers = cap > 0 ? cap : static_cast<int>(std::thread::hardware_concurrency());
            workers = std::max(1, std::min<int>(workers, static_cast<int>(b1 - b0)));
            if (workers == 1) {
                for (size_t bi = b0; bi < b1; ++bi) run_sample(bi);
            } else {
                std::vector<std::thread> pool;
                for (int w = 0; w < workers; ++w)
                    pool.emplace_back([&, w] {
                        for (size_t bi = b0 + static_cast<size_t>(w); bi < b1;
                             bi += static_cast<size_t>(workers))
                            run_sample(bi);
                    });
                for (auto& t : pool) t.join();
            }
            for (size_t bi = b0; bi < b1; ++bi) {
                SampleOut& out = outs[bi - b0];
                if (out.error) std::rethrow_exception(out.error);
                if (!std::isfinite(out.loss))
                    throw TrainingDiverged("loss became non-finite at epoch " + std::to_string(epoch) +
                                           " step " + std::to_string(state.step));
                epoch_loss += out.loss;
                train_correct += out.correct;
                ++seen;
                for (size_t pi = 0; pi < params.size(); ++pi) {
                    if (grad_acc[pi].empty()) grad_acc[pi].assign(params[pi]->numel(), T(0));
                    for (size_t j = 0; j < out.grads[pi].size(); ++j)
                        grad_acc[pi][j] += out.grads[pi][j];
                }
            }
            const double inv_b = 1.0 / static_cast<double>(b1 - b0);
            double norm2 = 0;
            for (auto& g : grad_acc)
                for (auto& v : g) {
                    v = static_cast<T>(v * inv_b);
                    norm2 += static_cast<double>(v) * static_cast<double>(v);
                }
            if (opt.clip_norm > 0 && norm2 > opt.clip_norm * opt.clip_norm) {
                const T s = static_cast<T>(opt.clip_norm / std::sqrt(norm2));
                for (auto& g : grad_acc)
                    for (auto& v : g) v *= s;
            }
            ++state.step;
            const bool adam = opt.kind != "sgd";
            const double bc1 = 1.0 - std::pow(kBeta1, static_cast<double>(state.step));
            const double bc2 = 1.0 - std::pow(kBeta2, static_cast<double>(state.step));
            for (size_t pi = 0; pi < params.size(); ++pi) {
                auto* p = params[pi];
                if (grad_acc[pi].empty()) continue;
                for (size_t j = 0; j < p->numel(); ++j) {
                    const double g = static_cast<double>(grad_acc[pi][j]);
                    if (!adam) {
                        p->value[j] -= static_cast<T>(lr * g);
                        continue;
                    }
                    const double m1 = kBeta1 * static_cast<double>(p->m1[j]) + (1 - kBeta1) * g;
                    const double m2 = kBeta2 * static_cast<double>(p->m2[j]) + (1 - kBeta2) * g * g;
                    p->m1[j] = static_cast<T>(m1);
                    p->m2[j] = static_cast<T>(m2);
                    p->value[j] -= static_cast<T>(lr * (m1 / bc1) / (std::sqrt(m2 / bc2) + kAdamEps));
                }
            }
        }

        MetricRow row;
        row.epoch = epoch;
        row.step = state.step;
        row.loss = epoch_loss / static_cast<double>(seen ? seen : 1);
        row.tau = tau;
        row.lr = lr;
        if (hooks.eval_set) {
            auto rep = evaluate(model, *hooks.eval_set);
            row.acc = rep.stream_accuracy >= 0 ? rep.stream_accuracy : rep.accuracy;
        } else if (cfg.task == Task::classify) {
            row.acc = seen ? static_cast<double>(train_correct) / static_cast<double>(seen) : 0;
        }
        state.history.push_back(row);
        state.epoch = epoch + 1;
        state.rng_state = order_rng.state();
        if (hooks.log)
            (*hooks.log) << "epoch " << epoch << " loss " << row.loss << " acc " << row.acc
                         << " tau " << row.tau << " lr " << row.lr << "\n";
        if (!hooks.out_dir.empty()) {
            std::ofstream mf(hooks.out_dir + "/metrics.csv");
            mf << metrics_csv(state.history);
            if (hooks.ckpt_every > 0 && (epoch + 1) % hooks.ckpt_every == 0) {
                char name[64];
                std::snprintf(name, sizeof(name), "/ckpt_epoch%04d.pat", epoch + 1);
                save_checkpoint(hooks.out_dir + name, model, state);
            }
            save_checkpoint(hooks.out_dir + "/ckpt_last.pat", model, state);
        }
        if (hooks.stop_at_acc > 0 && row.acc >= hooks.stop_at_acc) break;
    }
    if (!hooks.out_dir.empty()) save_checkpoint(hooks.out_dir + "/ckpt_last.pat", model, state);
    return state;
}

}  // namespace patkit

#include "patkit/checkpoint.hpp"  // defines save_checkpoint declared above
