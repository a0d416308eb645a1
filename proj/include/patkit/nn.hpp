#pragma once

#include <string>
#include <vector>

#include "patkit/rng.hpp"
#include "patkit/tensor.hpp"

namespace patkit {

// Fully connected layer applied to every row of an R x in matrix.
template <typename T>
struct Linear {
    Parameter<T> weight;  // in x out
    Parameter<T> bias;    // 1 x out

    Linear() = default;
    Linear(const std::string& name, int in, int out, Rng& rng)
        : weight(name + ".weight", {in, out}), bias(name + ".bias", {1, out}) {
        weight.init_uniform_fan(in, out, rng);
    }

    int in_dim() const { return weight.shape[0]; }
    int out_dim() const { return weight.shape[1]; }

    Tensor<T> forward(Tape<T>* tape, const Tensor<T>& x) {
        return add(matmul(x, weight.use(tape)), bias.use(tape));
    }

    template <typename Reg>
    void register_params(Reg& reg) {
        reg.add(&weight);
        reg.add(&bias);
    }
};

// Inverted dropout; identity when not training or rate == 0.
template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double rate, Rng& rng, bool training) {
    if (!training || rate <= 0.0) return x;
    if (rate >= 1.0) throw ContractError("dropout rate must be < 1");
    const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
    std::vector<T> mask(x.numel());
    for (auto& m : mask) m = rng.uniform() < rate ? T(0) : keep_scale;
    return mul(x, Tensor<T>::raw(Shape(x.shape()), std::move(mask)));
}

// Largest group count <= cap that divides channels.
inline int fit_group_count(int channels, int cap) {
    int g = std::min(channels, cap);
    while (g > 1 && channels % g != 0) --g;
    return std::max(g, 1);
}

}  // namespace patkit
