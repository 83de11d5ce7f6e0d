// Copyright 2026 The ACM Merge Authors
// SPDX-License-Identifier: Apache-2.0

// Synthetic weights and calibration data for the toy feed-forward engine.
// Everything is driven by std::mt19937_64 with hand-rolled conversions so
// the same seed yields the same bits with any standard library.

#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "acm/activation.hpp"
#include "acm/tensorstore.hpp"

namespace acm::toy {

class Gaussian {
public:
    explicit Gaussian(std::uint64_t seed) : rng_(seed) {}

    double operator()() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        spare_ = r * std::sin(2.0 * std::numbers::pi * u2);
        has_spare_ = true;
        return r * std::cos(2.0 * std::numbers::pi * u2);
    }

    double uniform() { return static_cast<double>(rng_() >> 11) * 0x1.0p-53; }

private:
    std::mt19937_64 rng_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

inline Tensor gaussian_tensor(const std::string& name, const Shape& shape, double stddev, Gaussian& g,
                              DType dtype = DType::F32) {
    std::vector<double> v(shape_numel(shape));
    for (auto& x : v) x = stddev * g();
    return Tensor::from_values(name, shape, dtype, v);
}

/// He-style initialisation for every tensor the spec expects.
inline Checkpoint random_weights(const ToyModelSpec& spec, std::uint64_t seed, DType dtype = DType::F32) {
    Gaussian g(seed);
    Checkpoint c;
    for (const auto& [name, shape] : spec.expected_weights())
        c.insert(gaussian_tensor(name, shape, std::sqrt(2.0 / static_cast<double>(shape[0])), g, dtype));
    return c;
}

/// A fine-tuned sibling: every tensor gets additive Gaussian noise of
/// relative size `scale`.
inline Checkpoint perturb(const Checkpoint& base, std::uint64_t seed, double scale) {
    Gaussian g(seed);
    Checkpoint c;
    for (const auto& [name, t] : base) {
        auto v = t.to_f64();
        for (auto& x : v) x += scale * (std::fabs(x) + 0.05) * g();
        c.insert(Tensor::from_values(name, t.shape(), t.dtype(), v));
    }
    return c;
}

inline CalibrationSet random_calibration(std::size_t pieces, std::size_t positions, std::size_t width,
                                         std::uint64_t seed) {
    Gaussian g(seed);
    CalibrationSet calib;
    for (std::size_t p = 0; p < pieces; ++p) {
        Matrix m(positions, width);
        for (auto& v : m.data) v = static_cast<float>(g());
        calib.pieces.push_back(std::move(m));
        calib.ids.push_back("piece-" + std::to_string(p));
    }
    return calib;
}

struct ModelPair {
    Checkpoint pretrained;
    Checkpoint finetuned;
};

/// PT/FT pair with identical embed and lm_head and diverging hidden layers.
/// Hidden weights are block diagonal over a shared block of `shared_width`
/// units and a private block; fine-tuning perturbs only the private block,
/// and the head reads only the shared block. All hidden widths must equal
/// the input width. Pairs that differ only in `variant` share the
/// pretrained weights.
inline ModelPair shared_edge_pair(const ToyModelSpec& spec, std::size_t shared_width, double divergence,
                                  std::uint64_t seed, std::uint64_t variant = 0) {
    spec.validate();
    const std::size_t d = spec.layer_dims.front();
    for (auto w : spec.layer_dims)
        if (w != d) fail(ErrorKind::Configuration, "shared_edge_pair needs equal layer widths");
    if (shared_width == 0 || shared_width >= d)
        fail(ErrorKind::Configuration, "shared_width must lie strictly between 0 and the layer width");

    Gaussian g(seed);
    Gaussian noise(seed ^ 0xA5A5A5A5DEADBEEFull ^ (variant * 0x9E3779B97F4A7C15ull));
    const auto dd = static_cast<std::int64_t>(d);
    const double stddev = std::sqrt(2.0 / static_cast<double>(d));
    ModelPair pair;

    if (spec.has_embed) {
        const Tensor e = gaussian_tensor("embed", {dd, dd}, 1.0 / std::sqrt(static_cast<double>(d)), g);
        pair.pretrained.insert(e);
        pair.finetuned.insert(e);
    }
    for (std::size_t k = 0; k < spec.hidden_layers(); ++k) {
        std::vector<double> pt(d * d, 0.0), ft(d * d, 0.0);
        for (std::size_t r = 0; r < d; ++r)
            for (std::size_t c = 0; c < d; ++c) {
                const bool shared = r < shared_width && c < shared_width;
                const bool priv = r >= shared_width && c >= shared_width;
                if (!shared && !priv) continue;
                const double w = stddev * g();
                pt[r * d + c] = w;
                ft[r * d + c] = priv ? w + divergence * stddev * noise() : w;
            }
        const auto name = ToyModelSpec::weight_name(k);
        pair.pretrained.insert(Tensor::from_values(name, {dd, dd}, DType::F32, pt));
        pair.finetuned.insert(Tensor::from_values(name, {dd, dd}, DType::F32, ft));
    }
    if (spec.has_head) {
        std::vector<double> h(d * d, 0.0);
        for (std::size_t r = 0; r < shared_width; ++r)
            for (std::size_t c = 0; c < d; ++c) h[r * d + c] = g() / std::sqrt(static_cast<double>(shared_width));
        const Tensor t = Tensor::from_values("lm_head", {dd, dd}, DType::F32, h);
        pair.pretrained.insert(t);
        pair.finetuned.insert(t);
    }
    return pair;
}

}  // namespace acm::toy
