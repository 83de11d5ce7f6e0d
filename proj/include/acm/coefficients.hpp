// Copyright 2026 The ACM Merge Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <string>

#include <json.hpp>

#include "acm/error.hpp"
#include "acm/mi.hpp"

namespace acm {

/// Temperature for long-to-short merges.
inline constexpr double kDefaultTemperature = 0.7;
/// Temperature preset for general multi-model merges.
inline constexpr double kGeneralMergeTemperature = -1.8;

struct LayerCoefficients {
    std::string model_id;
    std::map<std::string, double> lambdas;  // layer -> value in (0,1)
    double t = kDefaultTemperature;
    double shift = 0.0;  // subtracted maximum raw MI

    /// Coefficient for a checkpoint tensor. Layers may be named by a dotted
    /// prefix of the tensor name ("layer.3" covers "layer.3.weight"); the
    /// longest matching prefix wins.
    std::optional<double> lookup(std::string_view tensor_name) const {
        std::string_view key = tensor_name;
        for (;;) {
            if (auto it = lambdas.find(std::string(key)); it != lambdas.end()) return it->second;
            const auto dot = key.rfind('.');
            if (dot == std::string_view::npos) return std::nullopt;
            key = key.substr(0, dot);
        }
    }

    friend bool operator==(const LayerCoefficients&, const LayerCoefficients&) = default;
};

/// lambda = 1 - 1/(1 + exp(-t * I)), written as 1/(1 + exp(t * I)), which
/// is the same function and is exactly 0.5 at I = 0. Saturated values are
/// pulled back inside the open interval.
inline double coefficient_from_mi(double translated_mi, double t) {
    const double lambda = 1.0 / (1.0 + std::exp(t * translated_mi));
    constexpr double lo = std::numeric_limits<double>::denorm_min();
    const double hi = std::nextafter(1.0, 0.0);
    return std::clamp(lambda, lo, hi);
}

/// Translates every layer's mean MI by the model-wide maximum per-piece MI
/// and maps it through the sigmoid normalisation.
inline LayerCoefficients compute_coefficients(const MIEstimate& mi, double t) {
    if (mi.per_layer_mean.empty()) fail(ErrorKind::InsufficientData, "no layers to derive coefficients from");
    LayerCoefficients c;
    c.model_id = mi.model_id;
    c.t = t;
    c.shift = mi.max_raw();
    for (const auto& [layer, mean] : mi.per_layer_mean) c.lambdas[layer] = coefficient_from_mi(mean - c.shift, t);
    return c;
}

inline nlohmann::json coefficients_to_json(const LayerCoefficients& c) {
    return {{"model_id", c.model_id}, {"t", c.t}, {"shift", c.shift}, {"lambdas", c.lambdas}};
}

inline LayerCoefficients coefficients_from_json(const nlohmann::json& j, const std::string& label = "coefficients") {
    LayerCoefficients c;
    try {
        c.model_id = j.at("model_id").get<std::string>();
        c.t = j.at("t").get<double>();
        c.shift = j.at("shift").get<double>();
        c.lambdas = j.at("lambdas").get<std::map<std::string, double>>();
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::Format, label + ": " + e.what());
    }
    for (const auto& [layer, v] : c.lambdas)
        if (!(v > 0.0 && v < 1.0))
            fail(ErrorKind::Format, label + ": coefficient for '" + layer + "' is " + std::to_string(v) +
                                        ", outside (0, 1)");
    return c;
}

inline void write_coefficients(const LayerCoefficients& c, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) fail(ErrorKind::Io, "cannot write '" + path.string() + "'");
    out << coefficients_to_json(c).dump(2) << '\n';
    if (!out) fail(ErrorKind::Io, "write to '" + path.string() + "' failed");
}

inline LayerCoefficients read_coefficients(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) fail(ErrorKind::Io, "cannot open '" + path.string() + "'");
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::Format, path.string() + ": " + e.what());
    }
    return coefficients_from_json(j, path.string());
}

}  // namespace acm
