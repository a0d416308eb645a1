#pragma once

#include <cmath>
#include <cstdint>
#include <utility>

namespace patkit {

// Deterministic splitmix64 stream. The whole state is one u64, which keeps
// checkpointed rng state trivial and makes per-sample child streams cheap.
// std::mt19937 + std distributions are implementation-defined across
// platforms; this is not.
class Rng {
public:
    explicit Rng(uint64_t seed = 0) : state_(seed) {}

    uint64_t next_u64() {
        uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    // [0, 1)
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // [0, n)
    int uniform_int(int n) {
        return static_cast<int>((static_cast<unsigned __int128>(next_u64()) *
                                 static_cast<unsigned __int128>(n)) >> 64);
    }

    // Box-Muller; draws a fresh pair per call so the state stays a pure
    // function of the draw count.
    double normal() {
        double u1 = uniform();
        double u2 = uniform();
        if (u1 < 1e-300) u1 = 1e-300;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586477 * u2);
    }

    template <typename Vec>
    void shuffle(Vec& v) {
        for (int i = static_cast<int>(v.size()) - 1; i > 0; --i) {
            int j = uniform_int(i + 1);
            std::swap(v[i], v[j]);
        }
    }

    // Independent child stream; mixing the id through the same finalizer keeps
    // children decorrelated from the parent and from each other.
    Rng split(uint64_t stream_id) const {
        Rng mixer(state_ ^ (0x6a09e667f3bcc909ull + stream_id));
        uint64_t s = mixer.next_u64();
        mixer.state_ = s ^ (stream_id * 0x2545f4914f6cdd1dull);
        return Rng(mixer.next_u64());
    }

    uint64_t state() const { return state_; }
    void set_state(uint64_t s) { state_ = s; }

private:
    uint64_t state_;
};

inline uint64_t mix_seed(uint64_t a, uint64_t b, uint64_t c = 0) {
    Rng r(a);
    r.set_state(r.next_u64() ^ (b * 0x9e3779b97f4a7c15ull));
    r.set_state(r.next_u64() ^ (c * 0xc2b2ae3d27d4eb4full));
    return r.next_u64();
}

}  // namespace patkit
