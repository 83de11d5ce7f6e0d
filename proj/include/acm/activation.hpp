// Copyright 2026 The ACM Merge Authors
// SPDX-License-Identifier: Apache-2.0

// Activation traces and a small deterministic feed-forward engine that
// produces them. Trace files use the checkpoint container with keys
// "act.{layer}.piece.{index}" ([positions x hidden], F32) and metadata
// {acm.kind, model_id, calib_id, layer_order (JSON array), piece_count}.
// Calibration sets use keys "calib.piece.{index}" with "piece_ids" metadata.

#pragma once

#include <charconv>
#include <cmath>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "acm/error.hpp"
#include "acm/hash.hpp"
#include "acm/parallel.hpp"
#include "acm/tensorstore.hpp"

namespace acm {

/// Row-major F32 matrix.
struct Matrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<float> data;

    Matrix() = default;
    Matrix(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0.0f) {}
    Matrix(std::size_t r, std::size_t c, std::vector<float> values) : rows(r), cols(c), data(std::move(values)) {
        if (data.size() != r * c) fail(ErrorKind::Compatibility, "matrix value count does not match its shape");
    }

    float& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
    float operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

    double frobenius_norm() const {
        double s = 0.0;
        for (float v : data) s += static_cast<double>(v) * v;
        return std::sqrt(s);
    }

    friend bool operator==(const Matrix&, const Matrix&) = default;
};

inline Matrix matrix_from_tensor(const Tensor& t) {
    if (t.shape().size() != 2)
        fail(ErrorKind::Compatibility, "tensor '" + t.name() + "' must be 2-D, has shape " + shape_to_string(t.shape()));
    return Matrix(static_cast<std::size_t>(t.shape()[0]), static_cast<std::size_t>(t.shape()[1]), t.to_f32());
}

inline Tensor tensor_from_matrix(std::string name, const Matrix& m) {
    return Tensor::from_f32(std::move(name), {static_cast<std::int64_t>(m.rows), static_cast<std::int64_t>(m.cols)},
                            m.data);
}

// ---------------------------------------------------------------------------

struct ActivationTrace {
    std::string model_id;
    std::string calib_id;
    std::vector<std::string> layer_order;
    std::map<std::string, std::vector<Matrix>> layers;  // layer -> per-piece activations

    std::size_t piece_count() const { return layers.empty() ? 0 : layers.begin()->second.size(); }

    /// Every layer has the same piece count, and piece p has the same number
    /// of positions in every layer.
    void validate() const {
        std::set<std::string> ordered(layer_order.begin(), layer_order.end());
        if (ordered.size() != layer_order.size()) fail(ErrorKind::Format, "trace layer order has duplicates");
        if (ordered.size() != layers.size()) fail(ErrorKind::Format, "trace layer order does not match its layers");
        for (const auto& name : layer_order)
            if (!layers.count(name)) fail(ErrorKind::Format, "trace layer order names unknown layer '" + name + "'");
        const std::size_t pieces = piece_count();
        if (pieces == 0) fail(ErrorKind::Format, "trace has no pieces");
        const auto& first = layers.begin()->second;
        for (const auto& [name, ps] : layers) {
            if (ps.size() != pieces)
                fail(ErrorKind::Format, "trace layer '" + name + "' has " + std::to_string(ps.size()) +
                                            " pieces, expected " + std::to_string(pieces));
            for (std::size_t p = 0; p < pieces; ++p)
                if (ps[p].rows != first[p].rows)
                    fail(ErrorKind::Format, "trace layer '" + name + "' piece " + std::to_string(p) + " has " +
                                                std::to_string(ps[p].rows) + " positions, expected " +
                                                std::to_string(first[p].rows));
        }
    }

    friend bool operator==(const ActivationTrace&, const ActivationTrace&) = default;
};

/// PT/FT traces can be compared only over the same calibration data and
/// identical layer layouts.
inline void check_pairable(const ActivationTrace& pt, const ActivationTrace& ft) {
    if (pt.calib_id != ft.calib_id)
        fail(ErrorKind::Compatibility, "traces were produced from different calibration sets (" +
                                        pt.calib_id.substr(0, 12) + " vs " + ft.calib_id.substr(0, 12) + ")");
    if (pt.layers.size() != ft.layers.size())
        fail(ErrorKind::Compatibility, "traces have different layer sets");
    for (const auto& [name, pieces] : pt.layers) {
        auto it = ft.layers.find(name);
        if (it == ft.layers.end()) fail(ErrorKind::Compatibility, "layer '" + name + "' missing from second trace");
        if (it->second.size() != pieces.size())
            fail(ErrorKind::Compatibility, "layer '" + name + "' piece counts differ");
        for (std::size_t p = 0; p < pieces.size(); ++p)
            if (pieces[p].rows != it->second[p].rows || pieces[p].cols != it->second[p].cols)
                fail(ErrorKind::Compatibility, "layer '" + name + "' piece " + std::to_string(p) + " shapes differ");
    }
}

// ---------------------------------------------------------------------------

enum class ActivationFn { Relu, Gelu, Identity };

inline std::string_view activation_name(ActivationFn f) {
    switch (f) {
    case ActivationFn::Relu: return "relu";
    case ActivationFn::Gelu: return "gelu";
    case ActivationFn::Identity: return "identity";
    }
    return "?";
}

inline ActivationFn parse_activation(std::string_view s) {
    if (s == "relu") return ActivationFn::Relu;
    if (s == "gelu") return ActivationFn::Gelu;
    if (s == "identity") return ActivationFn::Identity;
    fail(ErrorKind::Configuration, "unknown activation '" + std::string(s) + "'");
}

inline double apply_activation(ActivationFn f, double x) {
    switch (f) {
    case ActivationFn::Relu: return x > 0.0 ? x : 0.0;
    case ActivationFn::Gelu: return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0)));
    case ActivationFn::Identity: return x;
    }
    return x;
}

/// A plain feed-forward stack: optional linear "embed" [d0 x d0], hidden
/// layers "layer.{k}.weight" [d_k x d_{k+1}] followed by the activation, and
/// an optional linear "lm_head" [dL x dL].
struct ToyModelSpec {
    std::vector<std::size_t> layer_dims;
    ActivationFn activation = ActivationFn::Relu;
    bool has_embed = false;
    bool has_head = false;

    std::size_t hidden_layers() const { return layer_dims.empty() ? 0 : layer_dims.size() - 1; }

    void validate() const {
        if (layer_dims.size() < 2) fail(ErrorKind::Configuration, "toy model needs at least one hidden layer");
        for (auto d : layer_dims)
            if (d == 0) fail(ErrorKind::Configuration, "toy model dimensions must be positive");
    }

    static std::string weight_name(std::size_t k) { return "layer." + std::to_string(k) + ".weight"; }
    static std::string layer_name(std::size_t k) { return "layer." + std::to_string(k); }

    /// (tensor name, shape) pairs the weights checkpoint must provide.
    std::vector<std::pair<std::string, Shape>> expected_weights() const {
        validate();
        std::vector<std::pair<std::string, Shape>> out;
        const auto d0 = static_cast<std::int64_t>(layer_dims.front());
        const auto dl = static_cast<std::int64_t>(layer_dims.back());
        if (has_embed) out.push_back({"embed", {d0, d0}});
        for (std::size_t k = 0; k < hidden_layers(); ++k)
            out.push_back({weight_name(k), {static_cast<std::int64_t>(layer_dims[k]),
                                            static_cast<std::int64_t>(layer_dims[k + 1])}});
        if (has_head) out.push_back({"lm_head", {dl, dl}});
        return out;
    }

    std::vector<std::string> trace_layers() const {
        std::vector<std::string> out;
        if (has_embed) out.push_back("embed");
        for (std::size_t k = 0; k < hidden_layers(); ++k) out.push_back(layer_name(k));
        if (has_head) out.push_back("lm_head");
        return out;
    }

    nlohmann::json to_json() const {
        return {{"layer_dims", layer_dims},
                {"activation", activation_name(activation)},
                {"has_embed", has_embed},
                {"has_head", has_head}};
    }

    static ToyModelSpec from_json(const nlohmann::json& j) {
        ToyModelSpec s;
        try {
            s.layer_dims = j.at("layer_dims").get<std::vector<std::size_t>>();
            s.activation = parse_activation(j.value("activation", std::string("relu")));
            s.has_embed = j.value("has_embed", false);
            s.has_head = j.value("has_head", false);
        } catch (const nlohmann::json::exception& e) {
            fail(ErrorKind::Configuration, std::string("invalid toy model spec: ") + e.what());
        }
        s.validate();
        return s;
    }
};

struct CalibrationSet {
    std::vector<Matrix> pieces;  // [positions x d0]
    std::vector<std::string> ids;

    void validate() const {
        if (pieces.empty()) fail(ErrorKind::Configuration, "calibration set is empty");
        if (ids.size() != pieces.size()) fail(ErrorKind::Format, "calibration ids do not match piece count");
        for (const auto& p : pieces)
            if (p.cols != pieces.front().cols)
                fail(ErrorKind::Compatibility, "calibration pieces disagree on input width");
    }

    std::size_t input_width() const { return pieces.empty() ? 0 : pieces.front().cols; }

    /// Content hash over piece shapes and values; identifies the set in traces.
    std::string content_id() const {
        Sha256 h;
        h.update(std::string_view("acm-calib-v1"));
        for (const auto& p : pieces) {
            h.update_pod(static_cast<std::uint64_t>(p.rows)).update_pod(static_cast<std::uint64_t>(p.cols));
            h.update(std::as_bytes(std::span(p.data)));
        }
        return h.hex_digest();
    }
};

namespace detail {

/// out = in * w with F64 accumulation in fixed index order.
inline Matrix matmul(const Matrix& in, const Matrix& w) {
    Matrix out(in.rows, w.cols);
    std::vector<double> acc(w.cols);
    for (std::size_t r = 0; r < in.rows; ++r) {
        std::fill(acc.begin(), acc.end(), 0.0);
        for (std::size_t i = 0; i < in.cols; ++i) {
            const double a = in(r, i);
            if (a == 0.0) continue;
            const float* wrow = w.data.data() + i * w.cols;
            for (std::size_t c = 0; c < w.cols; ++c) acc[c] += a * wrow[c];
        }
        for (std::size_t c = 0; c < w.cols; ++c) out(r, c) = static_cast<float>(acc[c]);
    }
    return out;
}

}  // namespace detail

/// Forwards every calibration piece and records post-activation outputs per
/// layer. Pure: identical inputs give a bit-identical trace for any thread count.
inline ActivationTrace toy_forward(const ToyModelSpec& spec, const Checkpoint& weights, const CalibrationSet& calib,
                                   unsigned threads = 1) {
    calib.validate();
    const auto expected = spec.expected_weights();
    if (calib.input_width() != spec.layer_dims.front())
        fail(ErrorKind::Compatibility, "calibration width " + std::to_string(calib.input_width()) +
                                           " does not match model input width " +
                                           std::to_string(spec.layer_dims.front()));
    std::map<std::string, Matrix> w;
    for (const auto& [name, shape] : expected) {
        if (!weights.contains(name)) fail(ErrorKind::Compatibility, "weights lack tensor '" + name + "'");
        const Tensor& t = weights.at(name);
        if (t.shape() != shape)
            fail(ErrorKind::Compatibility, "weight '" + name + "' has shape " + shape_to_string(t.shape()) +
                                               ", expected " + shape_to_string(shape));
        w.emplace(name, matrix_from_tensor(t));
    }

    const auto layer_names = spec.trace_layers();
    std::vector<std::vector<Matrix>> per_piece(calib.pieces.size());
    parallel_for(calib.pieces.size(), threads, [&](std::size_t p) {
        std::vector<Matrix> acts;
        Matrix a = calib.pieces[p];
        if (spec.has_embed) {
            a = detail::matmul(a, w.at("embed"));
            acts.push_back(a);
        }
        for (std::size_t k = 0; k < spec.hidden_layers(); ++k) {
            a = detail::matmul(a, w.at(ToyModelSpec::weight_name(k)));
            for (auto& v : a.data) v = static_cast<float>(apply_activation(spec.activation, v));
            acts.push_back(a);
        }
        if (spec.has_head) {
            a = detail::matmul(a, w.at("lm_head"));
            acts.push_back(a);
        }
        per_piece[p] = std::move(acts);
    });

    ActivationTrace trace;
    trace.model_id = weights.content_hash();
    trace.calib_id = calib.content_id();
    trace.layer_order = layer_names;
    for (std::size_t l = 0; l < layer_names.size(); ++l) {
        auto& dst = trace.layers[layer_names[l]];
        for (auto& piece : per_piece) dst.push_back(std::move(piece[l]));
    }
    return trace;
}

// ---------------------------------------------------------------------------
// Container I/O

inline constexpr const char* kTraceKind = "activation_trace";
inline constexpr const char* kCalibKind = "calibration_set";

inline std::string trace_key(const std::string& layer, std::size_t piece) {
    return "act." + layer + ".piece." + std::to_string(piece);
}

namespace detail {

/// Splits "<prefix><name>.piece.<index>"; nullopt when the key does not fit.
inline std::optional<std::pair<std::string, std::size_t>> split_piece_key(std::string_view key,
                                                                          std::string_view prefix) {
    if (!key.starts_with(prefix)) return std::nullopt;
    key.remove_prefix(prefix.size());
    constexpr std::string_view marker = ".piece.";
    const auto pos = key.rfind(marker);
    if (pos == std::string_view::npos) return std::nullopt;
    const auto digits = key.substr(pos + marker.size());
    std::size_t index = 0;
    auto [ptr, ec] = std::from_chars(digits.data(), digits.data() + digits.size(), index);
    if (ec != std::errc{} || ptr != digits.data() + digits.size() || digits.empty()) return std::nullopt;
    return std::pair{std::string(key.substr(0, pos)), index};
}

inline std::string require_meta(const Checkpoint& c, const std::string& key) {
    auto it = c.metadata().find(key);
    if (it == c.metadata().end()) fail(ErrorKind::Format, "'" + c.source_path() + "' metadata lacks '" + key + "'");
    return it->second;
}

}  // namespace detail

inline Checkpoint trace_to_checkpoint(const ActivationTrace& t) {
    t.validate();
    Checkpoint c;
    for (const auto& [layer, pieces] : t.layers)
        for (std::size_t p = 0; p < pieces.size(); ++p) c.insert(tensor_from_matrix(trace_key(layer, p), pieces[p]));
    c.metadata()["acm.kind"] = kTraceKind;
    c.metadata()["model_id"] = t.model_id;
    c.metadata()["calib_id"] = t.calib_id;
    c.metadata()["layer_order"] = nlohmann::json(t.layer_order).dump();
    c.metadata()["piece_count"] = std::to_string(t.piece_count());
    return c;
}

/// Rebuilds a trace and enforces its invariants. "layer_order" and
/// "piece_count" are optional; without an order, layers sort by name.
inline ActivationTrace trace_from_checkpoint(const Checkpoint& c) {
    ActivationTrace t;
    t.model_id = detail::require_meta(c, "model_id");
    t.calib_id = detail::require_meta(c, "calib_id");

    std::map<std::string, std::map<std::size_t, Matrix>> collected;
    for (const auto& [name, tensor] : c) {
        auto parsed = detail::split_piece_key(name, "act.");
        if (!parsed) fail(ErrorKind::Format, "unexpected key '" + name + "' in trace file");
        collected[parsed->first].emplace(parsed->second, matrix_from_tensor(tensor));
    }
    if (collected.empty()) fail(ErrorKind::Format, "trace file holds no activations");

    std::size_t pieces = collected.begin()->second.size();
    if (auto it = c.metadata().find("piece_count"); it != c.metadata().end()) {
        try {
            pieces = std::stoul(it->second);
        } catch (...) {
            fail(ErrorKind::Format, "piece_count metadata is not an integer");
        }
    }
    for (auto& [layer, by_index] : collected) {
        if (by_index.size() != pieces)
            fail(ErrorKind::Format, "trace layer '" + layer + "' has " + std::to_string(by_index.size()) +
                                        " pieces, expected " + std::to_string(pieces));
        auto& dst = t.layers[layer];
        for (std::size_t p = 0; p < pieces; ++p) {
            auto it = by_index.find(p);
            if (it == by_index.end()) fail(ErrorKind::Format, "trace layer '" + layer + "' lacks piece " + std::to_string(p));
            dst.push_back(std::move(it->second));
        }
    }
    if (auto it = c.metadata().find("layer_order"); it != c.metadata().end()) {
        try {
            t.layer_order = nlohmann::json::parse(it->second).get<std::vector<std::string>>();
        } catch (const nlohmann::json::exception&) {
            fail(ErrorKind::Format, "layer_order metadata is not a JSON string array");
        }
    } else {
        for (const auto& [layer, _] : t.layers) t.layer_order.push_back(layer);
    }
    t.validate();
    return t;
}

inline void write_trace(const ActivationTrace& t, const std::filesystem::path& path) {
    save_checkpoint(trace_to_checkpoint(t), path);
}

inline ActivationTrace read_trace(const std::filesystem::path& path) {
    return trace_from_checkpoint(load_checkpoint(path));
}

inline void write_calibration(const CalibrationSet& calib, const std::filesystem::path& path) {
    calib.validate();
    Checkpoint c;
    for (std::size_t p = 0; p < calib.pieces.size(); ++p)
        c.insert(tensor_from_matrix("calib.piece." + std::to_string(p), calib.pieces[p]));
    c.metadata()["acm.kind"] = kCalibKind;
    c.metadata()["piece_ids"] = nlohmann::json(calib.ids).dump();
    save_checkpoint(c, path);
}

inline CalibrationSet read_calibration(const std::filesystem::path& path) {
    const Checkpoint c = load_checkpoint(path);
    std::map<std::size_t, Matrix> by_index;
    for (const auto& [name, tensor] : c) {
        auto parsed = detail::split_piece_key(name, "");
        if (!parsed || parsed->first != "calib") fail(ErrorKind::Format, "unexpected key '" + name + "' in calibration file");
        by_index.emplace(parsed->second, matrix_from_tensor(tensor));
    }
    CalibrationSet calib;
    for (std::size_t p = 0; p < by_index.size(); ++p) {
        auto it = by_index.find(p);
        if (it == by_index.end()) fail(ErrorKind::Format, "calibration file lacks piece " + std::to_string(p));
        calib.pieces.push_back(std::move(it->second));
    }
    if (auto it = c.metadata().find("piece_ids"); it != c.metadata().end()) {
        try {
            calib.ids = nlohmann::json::parse(it->second).get<std::vector<std::string>>();
        } catch (const nlohmann::json::exception&) {
            fail(ErrorKind::Format, "piece_ids metadata is not a JSON string array");
        }
    } else {
        for (std::size_t p = 0; p < calib.pieces.size(); ++p) calib.ids.push_back(std::to_string(p));
    }
    calib.validate();
    return calib;
}

}  // namespace acm
