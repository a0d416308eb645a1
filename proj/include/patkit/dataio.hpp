#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "patkit/geometry.hpp"
#include "patkit/rng.hpp"

namespace patkit {

// ---------------------------------------------------------------------------
// Point-cloud text format: whitespace-separated, one point per line, 3+f
// numeric columns; '#' comments and blank lines ignored; f inferred from the
// column count.
// ---------------------------------------------------------------------------

template <typename T>
PointCloud<T> parse_point_cloud(std::istream& in, const std::string& origin) {
    std::vector<T> data;
    int dims = -1;
    int n = 0;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        std::istringstream ls(line);
        std::vector<T> row;
        double v;
        while (ls >> v) row.push_back(static_cast<T>(v));
        if (!ls.eof()) {
            std::string bad;
            ls.clear();
            ls >> bad;
            throw ParseError(origin + ":" + std::to_string(lineno) + ": non-numeric field '" + bad + "'");
        }
        if (row.empty()) continue;
        if (static_cast<int>(row.size()) < 3)
            throw ParseError(origin + ":" + std::to_string(lineno) + ": need at least 3 columns, got " +
                             std::to_string(row.size()));
        if (dims < 0) dims = static_cast<int>(row.size());
        if (static_cast<int>(row.size()) != dims)
            throw ParseError(origin + ":" + std::to_string(lineno) + ": ragged row, expected " +
                             std::to_string(dims) + " columns, got " + std::to_string(row.size()));
        data.insert(data.end(), row.begin(), row.end());
        ++n;
    }
    if (n == 0) throw ParseError(origin + ": no points");
    return PointCloud<T>(n, dims, std::move(data));
}

template <typename T>
PointCloud<T> load_point_cloud(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ParseError("cannot open point cloud file: " + path);
    return parse_point_cloud<T>(in, path);
}

template <typename T>
void save_point_cloud(const std::string& path, const PointCloud<T>& cloud) {
    std::ofstream out(path);
    if (!out) throw Error("cannot write point cloud file: " + path);
    out.precision(9);
    for (int i = 0; i < cloud.n; ++i) {
        for (int d = 0; d < cloud.dims; ++d) {
            if (d) out << ' ';
            out << cloud.at(i, d);
        }
        out << '\n';
    }
}

// ---------------------------------------------------------------------------
// Synthetic labeled shapes (classification / segmentation fixtures)
// ---------------------------------------------------------------------------

enum class ShapeKind { sphere, cube, cylinder, torus };

inline std::string shape_name(ShapeKind k) {
    switch (k) {
        case ShapeKind::sphere: return "sphere";
        case ShapeKind::cube: return "cube";
        case ShapeKind::cylinder: return "cylinder";
        case ShapeKind::torus: return "torus";
    }
    return "?";
}

template <typename T>
struct LabeledClouds {
    std::vector<PointCloud<T>> clouds;
    std::vector<int> labels;                          // per-cloud class
    std::vector<std::vector<int>> point_labels;       // segmentation targets (optional)
    std::vector<std::vector<uint8_t>> outlier_masks;  // synthetic shapes only
    std::vector<int> stream_ids;                      // event clips: owning stream
    std::vector<std::string> class_names;

    size_t size() const { return clouds.size(); }
};

namespace detail {

template <typename T>
void surface_sample(ShapeKind kind, Rng& rng, T out[3]) {
    switch (kind) {
        case ShapeKind::sphere: {
            double x, y, z, n2;
            do {
                x = rng.normal();
                y = rng.normal();
                z = rng.normal();
                n2 = x * x + y * y + z * z;
            } while (n2 < 1e-12);
            double inv = 1.0 / std::sqrt(n2);
            out[0] = static_cast<T>(x * inv);
            out[1] = static_cast<T>(y * inv);
            out[2] = static_cast<T>(z * inv);
            break;
        }
        case ShapeKind::cube: {
            // pick a face, uniform on it; half-extent 1
            int face = rng.uniform_int(6);
            double u = rng.uniform(-1, 1), v = rng.uniform(-1, 1);
            double s = face % 2 == 0 ? 1.0 : -1.0;
            double p[3];
            p[face / 2] = s;
            p[(face / 2 + 1) % 3] = u;
            p[(face / 2 + 2) % 3] = v;
            out[0] = static_cast<T>(p[0]);
            out[1] = static_cast<T>(p[1]);
            out[2] = static_cast<T>(p[2]);
            break;
        }
        case ShapeKind::cylinder: {
            // radius 1, z in [-1, 1]; lateral area 4*pi vs caps 2*pi
            if (rng.uniform() < 2.0 / 3.0) {
                double a = rng.uniform(0, 6.283185307179586);
                out[0] = static_cast<T>(std::cos(a));
                out[1] = static_cast<T>(std::sin(a));
                out[2] = static_cast<T>(rng.uniform(-1, 1));
            } else {
                double a = rng.uniform(0, 6.283185307179586);
                double r = std::sqrt(rng.uniform());
                out[0] = static_cast<T>(r * std::cos(a));
                out[1] = static_cast<T>(r * std::sin(a));
                out[2] = static_cast<T>(rng.uniform() < 0.5 ? -1.0 : 1.0);
            }
            break;
        }
        case ShapeKind::torus: {
            // ring radius 0.7, tube radius 0.3; rejection keeps area-uniform
            const double R = 0.7, r = 0.3;
            double u, v;
            do {
                u = rng.uniform(0, 6.283185307179586);
                v = rng.uniform(0, 6.283185307179586);
            } while (rng.uniform() > (R + r * std::cos(v)) / (R + r));
            out[0] = static_cast<T>((R + r * std::cos(v)) * std::cos(u));
            out[1] = static_cast<T>((R + r * std::cos(v)) * std::sin(u));
            out[2] = static_cast<T>(r * std::sin(v));
            break;
        }
    }
}

}  // namespace detail

// Unit-scale surface samples with clamped Gaussian jitter plus a fixed count
// floor(outlier_frac * n_points) of uniform-box outliers per cloud. Jitter is
// clamped at 2 sigma so non-outlier points stay within 4 sigma of the
// surface. Labels are exactly balanced.
template <typename T>
LabeledClouds<T> gen_shapes(const std::vector<ShapeKind>& classes, int n_per_class, int n_points,
                            double noise_sigma, double outlier_frac, Rng& rng) {
    if (n_points < 8) throw ContractError("gen_shapes: n_points must be >= 8");
    if (classes.empty()) throw ContractError("gen_shapes: no classes");
    LabeledClouds<T> out;
    for (ShapeKind k : classes) out.class_names.push_back(shape_name(k));
    const int n_outlier = static_cast<int>(outlier_frac * n_points);
    for (int c = 0; c < static_cast<int>(classes.size()); ++c) {
        for (int s = 0; s < n_per_class; ++s) {
            std::vector<T> pts(static_cast<size_t>(n_points) * 3);
            std::vector<uint8_t> mask(static_cast<size_t>(n_points), 0);
            for (int i = 0; i < n_points; ++i) {
                T* p = pts.data() + static_cast<size_t>(i) * 3;
                if (i < n_outlier) {
                    mask[static_cast<size_t>(i)] = 1;
                    for (int d = 0; d < 3; ++d) p[d] = static_cast<T>(rng.uniform(-1.5, 1.5));
                } else {
                    detail::surface_sample(classes[static_cast<size_t>(c)], rng, p);
                    for (int d = 0; d < 3; ++d) {
                        double j = rng.normal() * noise_sigma;
                        j = std::min(std::max(j, -2.0 * noise_sigma), 2.0 * noise_sigma);
                        p[d] += static_cast<T>(j);
                    }
                }
            }
            // shuffle rows so outliers are not positionally encoded
            std::vector<int> order(static_cast<size_t>(n_points));
            for (int i = 0; i < n_points; ++i) order[static_cast<size_t>(i)] = i;
            rng.shuffle(order);
            std::vector<T> shuffled(pts.size());
            std::vector<uint8_t> smask(mask.size());
            for (int i = 0; i < n_points; ++i) {
                for (int d = 0; d < 3; ++d)
                    shuffled[static_cast<size_t>(i) * 3 + d] =
                        pts[static_cast<size_t>(order[static_cast<size_t>(i)]) * 3 + d];
                smask[static_cast<size_t>(i)] = mask[static_cast<size_t>(order[static_cast<size_t>(i)])];
            }
            out.clouds.emplace_back(n_points, 3, std::move(shuffled));
            out.labels.push_back(c);
            out.outlier_masks.push_back(std::move(smask));
        }
    }
    return out;
}

// Per-point quadrant labels in the xy plane; a simple 4-class segmentation
// target for any cloud.
template <typename T>
std::vector<int> quadrant_labels(const PointCloud<T>& cloud) {
    std::vector<int> labels(static_cast<size_t>(cloud.n));
    for (int i = 0; i < cloud.n; ++i)
        labels[static_cast<size_t>(i)] = (cloud.at(i, 0) > 0 ? 2 : 0) + (cloud.at(i, 1) > 0 ? 1 : 0);
    return labels;
}

// ---------------------------------------------------------------------------
// Event streams
// ---------------------------------------------------------------------------

struct EventRecord {
    int64_t t_us = 0;
    int x = 0;         // [0, 128)
    int y = 0;         // [0, 128)
    int polarity = 0;  // {0, 1}
};

struct EventStream {
    std::vector<EventRecord> events;  // non-decreasing t
    int label = -1;
};

struct ClipSpec {
    int window_ms = 750;
    int step_ms = 100;
    int n_sample = 1024;

    void validate() const {
        if (window_ms <= 0 || step_ms <= 0) throw ContractError("clip spec: window and step must be positive");
        if (step_ms > window_ms) throw ContractError("clip spec: step must be <= window");
        if (n_sample < 1) throw ContractError("clip spec: n_sample must be >= 1");
    }
};

inline constexpr int kSensorSize = 128;

// std::getline keeps '\r' on CRLF files; strip it before the header compare.
inline std::string strip_trailing_ws(const std::string& s) {
    std::string t = s;
    while (!t.empty() && (t.back() == '\r' || t.back() == ' ')) t.pop_back();
    return t;
}

// CSV with header "t_us,x,y,polarity"; timestamps must be non-decreasing and
// coordinates in range.
inline std::vector<EventRecord> parse_events(std::istream& in, const std::string& origin) {
    std::string line;
    if (!std::getline(in, line)) throw ParseError(origin + ": empty file");
    if (strip_trailing_ws(line) != "t_us,x,y,polarity")
        throw ParseError(origin + ":1: expected header 't_us,x,y,polarity', got '" + line + "'");
    std::vector<EventRecord> out;
    int row = 1;
    while (std::getline(in, line)) {
        ++row;
        if (line.empty()) continue;
        EventRecord e;
        char c1, c2, c3;
        std::istringstream ls(line);
        if (!(ls >> e.t_us >> c1 >> e.x >> c2 >> e.y >> c3 >> e.polarity) || c1 != ',' ||
            c2 != ',' || c3 != ',')
            throw ParseError(origin + ":" + std::to_string(row) + ": malformed event row '" + line + "'");
        if (e.x < 0 || e.x >= kSensorSize || e.y < 0 || e.y >= kSensorSize)
            throw ParseError(origin + ":" + std::to_string(row) + ": coordinate out of range [0, 128)");
        if (e.polarity != 0 && e.polarity != 1)
            throw ParseError(origin + ":" + std::to_string(row) + ": polarity must be 0 or 1");
        if (!out.empty() && e.t_us < out.back().t_us)
            throw ParseError(origin + ":" + std::to_string(row) + ": timestamps must be non-decreasing");
        out.push_back(e);
    }
    return out;
}

inline std::vector<EventRecord> load_events(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ParseError("cannot open event file: " + path);
    return parse_events(in, path);
}

inline void save_events(const std::string& path, const std::vector<EventRecord>& events) {
    std::ofstream out(path);
    if (!out) throw Error("cannot write event file: " + path);
    out << "t_us,x,y,polarity\n";
    for (const auto& e : events) out << e.t_us << ',' << e.x << ',' << e.y << ',' << e.polarity << "\n";
}

// Sliding windows anchored at the first event. A clip covers
// [t0 + k*step, t0 + k*step + window) and is emitted while it fits inside the
// stream span (half-open, t_last - t0 + 1 microseconds). Each clip becomes a
// point cloud of n_sample rows (x, y, t_norm, polarity) with x, y scaled to
// [-1, 1] and t_norm in [0, 1); clips with fewer events than n_sample sample
// with replacement.
template <typename T>
std::vector<PointCloud<T>> window_events(const std::vector<EventRecord>& stream,
                                         const ClipSpec& spec, Rng& rng) {
    spec.validate();
    std::vector<PointCloud<T>> clips;
    if (stream.empty()) return clips;
    const int64_t t0 = stream.front().t_us;
    const int64_t span = stream.back().t_us - t0 + 1;
    const int64_t window = static_cast<int64_t>(spec.window_ms) * 1000;
    const int64_t step = static_cast<int64_t>(spec.step_ms) * 1000;
    if (span < window) return clips;
    const int n_clips = static_cast<int>((span - window) / step) + 1;
    size_t lo = 0;
    for (int k = 0; k < n_clips; ++k) {
        const int64_t start = t0 + static_cast<int64_t>(k) * step;
        const int64_t end = start + window;
        while (lo < stream.size() && stream[lo].t_us < start) ++lo;
        size_t hi = lo;
        while (hi < stream.size() && stream[hi].t_us < end) ++hi;
        const int avail = static_cast<int>(hi - lo);
        std::vector<T> pts(static_cast<size_t>(spec.n_sample) * 4);
        if (avail == 0) {
            // no events in this window: a degenerate all-zero clip
            for (int i = 0; i < spec.n_sample; ++i) {
                T* p = pts.data() + static_cast<size_t>(i) * 4;
                p[0] = p[1] = p[2] = p[3] = 0;
            }
        } else {
            std::vector<int> pick;
            pick.reserve(static_cast<size_t>(spec.n_sample));
            if (avail >= spec.n_sample) {
                std::vector<int> idx(static_cast<size_t>(avail));
                for (int i = 0; i < avail; ++i) idx[static_cast<size_t>(i)] = i;
                for (int i = 0; i < spec.n_sample; ++i) {
                    int j = i + rng.uniform_int(avail - i);
                    std::swap(idx[static_cast<size_t>(i)], idx[static_cast<size_t>(j)]);
                    pick.push_back(idx[static_cast<size_t>(i)]);
                }
            } else {
                for (int i = 0; i < spec.n_sample; ++i) pick.push_back(rng.uniform_int(avail));
            }
            for (int i = 0; i < spec.n_sample; ++i) {
                const EventRecord& e = stream[lo + static_cast<size_t>(pick[static_cast<size_t>(i)])];
                T* p = pts.data() + static_cast<size_t>(i) * 4;
                p[0] = static_cast<T>(2.0 * e.x / (kSensorSize - 1) - 1.0);
                p[1] = static_cast<T>(2.0 * e.y / (kSensorSize - 1) - 1.0);
                p[2] = static_cast<T>(static_cast<double>(e.t_us - start) / static_cast<double>(window));
                p[3] = static_cast<T>(e.polarity);
            }
        }
        clips.emplace_back(spec.n_sample, 4, std::move(pts));
    }
    return clips;
}

// Mode of the per-clip labels; ties go to the lowest class id.
inline int system_prediction(const std::vector<int>& clip_predictions) {
    if (clip_predictions.empty()) throw ContractError("system_prediction: empty prediction list");
    std::map<int, int> counts;
    for (int p : clip_predictions) ++counts[p];
    int best = -1, best_n = 0;
    for (const auto& [label, n] : counts)
        if (n > best_n) {
            best = label;
            best_n = n;
        }
    return best;
}

// Synthetic 3-gesture generator: a noisy blob following a class-specific
// trajectory (horizontal sweep / vertical sweep / circular orbit) on the
// 128x128 sensor grid.
inline EventStream gen_gesture_stream(int label, int duration_ms, int events_per_sec, Rng& rng) {
    if (label < 0 || label > 2) throw ContractError("gen_gesture_stream: label must be 0..2");
    EventStream s;
    s.label = label;
    const int n_events = duration_ms * events_per_sec / 1000;
    const double freq = 1.5;  // oscillations per second
    const double two_pi = 6.283185307179586;
    s.events.reserve(static_cast<size_t>(n_events));
    for (int i = 0; i < n_events; ++i) {
        const double t_s = static_cast<double>(i) * duration_ms / 1000.0 / n_events;
        const double phase = two_pi * freq * t_s;
        double cx = 63.5, cy = 63.5;
        switch (label) {
            case 0: cx += 44 * std::sin(phase); break;
            case 1: cy += 44 * std::sin(phase); break;
            case 2:
                cx += 44 * std::cos(phase);
                cy += 44 * std::sin(phase);
                break;
        }
        EventRecord e;
        e.t_us = static_cast<int64_t>(t_s * 1e6);
        e.x = std::min(kSensorSize - 1, std::max(0, static_cast<int>(cx + rng.normal() * 4.0)));
        e.y = std::min(kSensorSize - 1, std::max(0, static_cast<int>(cy + rng.normal() * 4.0)));
        e.polarity = rng.uniform() < 0.5 ? 0 : 1;
        s.events.push_back(e);
    }
    return s;
}

inline std::vector<EventStream> gen_gesture_streams(int n_per_class, int duration_ms,
                                                    int events_per_sec, Rng& rng) {
    std::vector<EventStream> out;
    for (int c = 0; c < 3; ++c)
        for (int i = 0; i < n_per_class; ++i)
            out.push_back(gen_gesture_stream(c, duration_ms, events_per_sec, rng));
    return out;
}

// Expand streams into labeled clips, remembering the owning stream for
// system-level evaluation.
template <typename T>
LabeledClouds<T> event_clip_dataset(const std::vector<EventStream>& streams, const ClipSpec& spec,
                                    Rng& rng) {
    LabeledClouds<T> out;
    out.class_names = {"gesture0", "gesture1", "gesture2"};
    for (size_t s = 0; s < streams.size(); ++s) {
        auto clips = window_events<T>(streams[s].events, spec, rng);
        for (auto& c : clips) {
            out.clouds.push_back(std::move(c));
            out.labels.push_back(streams[s].label);
            out.stream_ids.push_back(static_cast<int>(s));
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Dataset manifests: a directory with one file per sample plus an index file
// of "label<TAB>path" lines.
// ---------------------------------------------------------------------------

template <typename T>
void save_dataset(const std::string& dir, const LabeledClouds<T>& set) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    std::ofstream index(dir + "/index.tsv");
    if (!index) throw Error("cannot write dataset index in " + dir);
    for (size_t i = 0; i < set.size(); ++i) {
        char name[64];
        std::snprintf(name, sizeof(name), "cloud_%05zu.txt", i);
        save_point_cloud(dir + "/" + name, set.clouds[i]);
        index << set.labels[i] << '\t' << name << '\n';
    }
}

template <typename T>
LabeledClouds<T> load_dataset(const std::string& dir) {
    std::ifstream index(dir + "/index.tsv");
    if (!index) throw ParseError("cannot open dataset index: " + dir + "/index.tsv");
    LabeledClouds<T> out;
    std::string line;
    int lineno = 0;
    while (std::getline(index, line)) {
        ++lineno;
        if (line.empty()) continue;
        auto tab = line.find('\t');
        if (tab == std::string::npos)
            throw ParseError(dir + "/index.tsv:" + std::to_string(lineno) +
                             ": expected 'label<TAB>path'");
        int label;
        try {
            label = std::stoi(line.substr(0, tab));
        } catch (const std::logic_error&) {
            throw ParseError(dir + "/index.tsv:" + std::to_string(lineno) + ": bad label");
        }
        out.labels.push_back(label);
        out.clouds.push_back(load_point_cloud<T>(dir + "/" + line.substr(tab + 1)));
    }
    return out;
}

inline void save_event_dataset(const std::string& dir, const std::vector<EventStream>& streams) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    std::ofstream index(dir + "/index.tsv");
    if (!index) throw Error("cannot write dataset index in " + dir);
    for (size_t i = 0; i < streams.size(); ++i) {
        char name[64];
        std::snprintf(name, sizeof(name), "stream_%05zu.csv", i);
        save_events(dir + "/" + name, streams[i].events);
        index << streams[i].label << '\t' << name << '\n';
    }
}

inline std::vector<EventStream> load_event_dataset(const std::string& dir) {
    std::ifstream index(dir + "/index.tsv");
    if (!index) throw ParseError("cannot open dataset index: " + dir + "/index.tsv");
    std::vector<EventStream> out;
    std::string line;
    int lineno = 0;
    while (std::getline(index, line)) {
        ++lineno;
        if (line.empty()) continue;
        auto tab = line.find('\t');
        if (tab == std::string::npos)
            throw ParseError(dir + "/index.tsv:" + std::to_string(lineno) +
                             ": expected 'label<TAB>path'");
        EventStream s;
        try {
            s.label = std::stoi(line.substr(0, tab));
        } catch (const std::logic_error&) {
            throw ParseError(dir + "/index.tsv:" + std::to_string(lineno) + ": bad label");
        }
        s.events = load_events(dir + "/" + line.substr(tab + 1));
        out.push_back(std::move(s));
    }
    return out;
}

}  // namespace patkit
