// Copyright 2026 The ACM Merge Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include "acm/acm.hpp"

namespace acm::test {

/// Scratch directory removed on destruction.
class TempDir {
public:
    TempDir() {
        std::random_device rd;
        path_ = std::filesystem::temp_directory_path() /
                ("acm-test-" + std::to_string(rd()) + "-" + std::to_string(rd()));
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    std::filesystem::path operator/(const std::string& name) const { return path_ / name; }
    const std::filesystem::path& path() const { return path_; }

private:
    std::filesystem::path path_;
};

inline std::vector<char> read_bytes(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

/// Distance in representable floats between a and b (0 when equal).
inline std::int64_t ulp_distance(float a, float b) {
    auto key = [](float f) {
        const auto bits = static_cast<std::int64_t>(std::bit_cast<std::int32_t>(f));
        return bits < 0 ? std::int64_t{INT32_MIN} - bits : bits;
    };
    if (a == b) return 0;
    return std::llabs(key(a) - key(b));
}

inline std::int64_t max_ulp(const Checkpoint& a, const Checkpoint& b) {
    std::int64_t worst = 0;
    for (const auto& [name, t] : a) {
        const auto x = t.to_f32();
        const auto y = b.at(name).to_f32();
        for (std::size_t i = 0; i < x.size(); ++i) worst = std::max(worst, ulp_distance(x[i], y[i]));
    }
    return worst;
}

/// Random F32 checkpoint with a few layers of assorted shapes.
inline Checkpoint random_checkpoint(std::uint64_t seed, DType dtype = DType::F32) {
    toy::Gaussian g(seed);
    Checkpoint c;
    c.insert(toy::gaussian_tensor("embed", {6, 4}, 1.0, g, dtype));
    c.insert(toy::gaussian_tensor("layer.0.weight", {4, 5}, 0.5, g, dtype));
    c.insert(toy::gaussian_tensor("layer.1.weight", {5, 4}, 0.5, g, dtype));
    c.insert(toy::gaussian_tensor("layer.1.bias", {4}, 0.1, g, dtype));
    c.insert(toy::gaussian_tensor("lm_head", {4, 6}, 1.0, g, dtype));
    return c;
}

inline LayerCoefficients constant_coefficients(const Checkpoint& layout, double value, std::string model_id = "m") {
    LayerCoefficients c;
    c.model_id = std::move(model_id);
    for (const auto& [name, _] : layout) c.lambdas[name] = value;
    return c;
}

}  // namespace acm::test
