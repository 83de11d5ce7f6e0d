// Copyright 2026 The ACM Merge Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "acm/error.hpp"
#include "acm/parallel.hpp"
#include "acm/tensorstore.hpp"

namespace acm {

/// Per-layer parameter delta, held in F64 so that base + delta reproduces
/// the tuned weights exactly for F32/BF16 storage.
struct DeltaTensor {
    Shape shape;
    std::vector<double> values;

    friend bool operator==(const DeltaTensor&, const DeltaTensor&) = default;
};

struct TaskVector {
    std::map<std::string, DeltaTensor> deltas;
    std::string base_id;    // content hash of the base checkpoint
    std::string source_id;  // content hash of the tuned checkpoint

    friend bool operator==(const TaskVector&, const TaskVector&) = default;
};

/// Coefficient for every layer of one task vector.
using LayerLambdas = std::map<std::string, double>;

inline LayerLambdas uniform_lambdas(const Checkpoint& layout, double value) {
    LayerLambdas out;
    for (const auto& [name, _] : layout) out.emplace(name, value);
    return out;
}

inline TaskVector compute_task_vector(const Checkpoint& base, const Checkpoint& tuned, unsigned threads = 1) {
    assert_compatible(base, tuned);
    const auto names = base.names();
    std::vector<DeltaTensor> slots(names.size());
    parallel_for(names.size(), threads, [&](std::size_t k) {
        const Tensor& b = base.at(names[k]);
        const Tensor& t = tuned.at(names[k]);
        DeltaTensor d{b.shape(), std::vector<double>(b.numel())};
        for (std::size_t j = 0; j < d.values.size(); ++j) d.values[j] = t.at(j) - b.at(j);
        slots[k] = std::move(d);
    });
    TaskVector tv;
    tv.base_id = base.content_hash();
    tv.source_id = tuned.content_hash();
    for (std::size_t k = 0; k < names.size(); ++k) tv.deltas.emplace(names[k], std::move(slots[k]));
    return tv;
}

struct ApplyOptions {
    bool normalize_by_n = true;
    unsigned threads = 1;
};

/// Checks that every vector is bound to `base` and covers exactly its layers.
inline void check_vectors_against(const Checkpoint& base, std::span<const TaskVector> vectors) {
    const std::string base_id = base.content_hash();
    for (std::size_t i = 0; i < vectors.size(); ++i) {
        const auto& v = vectors[i];
        if (v.base_id != base_id)
            fail(ErrorKind::Provenance, "task vector " + std::to_string(i) + " was computed against base " +
                                            v.base_id.substr(0, 12) + ", not " + base_id.substr(0, 12));
        if (v.deltas.size() != base.size())
            fail(ErrorKind::Compatibility, "task vector " + std::to_string(i) + " has " +
                                               std::to_string(v.deltas.size()) + " layers, base has " +
                                               std::to_string(base.size()));
        for (const auto& [name, t] : base) {
            auto it = v.deltas.find(name);
            if (it == v.deltas.end())
                fail(ErrorKind::Compatibility, "task vector " + std::to_string(i) + " lacks layer '" + name + "'");
            if (it->second.shape != t.shape())
                fail(ErrorKind::Compatibility, "task vector " + std::to_string(i) + " layer '" + name +
                                                   "' has shape " + shape_to_string(it->second.shape));
        }
    }
}

/// Layer-wise merge: out[k] = base[k] + (1/N) * sum_i lambda_i[k] * delta_i[k].
/// Summation runs in vector order, then the result is encoded in the base
/// tensor's dtype.
inline Checkpoint apply_task_vectors(const Checkpoint& base, std::span<const TaskVector> vectors,
                                     std::span<const LayerLambdas> lambdas, const ApplyOptions& opts = {}) {
    if (lambdas.size() != vectors.size())
        fail(ErrorKind::Configuration, std::to_string(lambdas.size()) + " coefficient sets for " +
                                           std::to_string(vectors.size()) + " task vectors");
    check_vectors_against(base, vectors);
    const auto names = base.names();
    for (std::size_t i = 0; i < lambdas.size(); ++i)
        for (const auto& name : names)
            if (!lambdas[i].count(name))
                fail(ErrorKind::Configuration,
                     "no coefficient for task vector " + std::to_string(i) + " layer '" + name + "'");

    const double n = static_cast<double>(vectors.size());
    std::vector<Tensor> out(names.size());
    parallel_for(names.size(), opts.threads, [&](std::size_t k) {
        const Tensor& b = base.at(names[k]);
        std::vector<double> acc(b.numel(), 0.0);
        for (std::size_t i = 0; i < vectors.size(); ++i) {
            const double lambda = lambdas[i].at(names[k]);
            const auto& d = vectors[i].deltas.at(names[k]).values;
            for (std::size_t j = 0; j < acc.size(); ++j) acc[j] += lambda * d[j];
        }
        for (std::size_t j = 0; j < acc.size(); ++j)
            acc[j] = b.at(j) + (opts.normalize_by_n && n > 0 ? acc[j] / n : acc[j]);
        out[k] = Tensor::from_values(names[k], b.shape(), b.dtype(), acc);
    });
    Checkpoint merged;
    for (auto& t : out) merged.insert(std::move(t));
    return merged;
}

// ---------------------------------------------------------------------------
// Serialisation: same container as checkpoints, F64 payload, provenance in
// the metadata block.

inline constexpr const char* kKindKey = "acm.kind";
inline constexpr const char* kTaskVectorKind = "task_vector";

inline Checkpoint task_vector_to_checkpoint(const TaskVector& tv) {
    Checkpoint c;
    for (const auto& [name, d] : tv.deltas) c.insert(Tensor::from_values(name, d.shape, DType::F64, d.values));
    c.metadata()[kKindKey] = kTaskVectorKind;
    c.metadata()["base_id"] = tv.base_id;
    c.metadata()["source_id"] = tv.source_id;
    return c;
}

inline bool is_task_vector(const Checkpoint& c) {
    auto it = c.metadata().find(kKindKey);
    return it != c.metadata().end() && it->second == kTaskVectorKind;
}

inline TaskVector task_vector_from_checkpoint(const Checkpoint& c) {
    if (!is_task_vector(c)) fail(ErrorKind::Format, "'" + c.source_path() + "' is not a task vector file");
    TaskVector tv;
    auto get = [&](const char* key) {
        auto it = c.metadata().find(key);
        if (it == c.metadata().end()) fail(ErrorKind::Format, std::string("task vector metadata lacks ") + key);
        return it->second;
    };
    tv.base_id = get("base_id");
    tv.source_id = get("source_id");
    for (const auto& [name, t] : c) tv.deltas.emplace(name, DeltaTensor{t.shape(), t.to_f64()});
    return tv;
}

inline void save_task_vector(const TaskVector& tv, const std::filesystem::path& path) {
    save_checkpoint(task_vector_to_checkpoint(tv), path);
}

inline TaskVector load_task_vector(const std::filesystem::path& path) {
    return task_vector_from_checkpoint(load_checkpoint(path));
}

// ---------------------------------------------------------------------------
// Salience diagnostics. The Frobenius norm of a layer delta bounds its
// operator norm, and with it the change in that layer's response to any
// unit input.

struct LayerSalience {
    double frobenius_norm = 0.0;
    double max_abs = 0.0;
    std::size_t param_count = 0;
};

struct SalienceReport {
    std::map<std::string, LayerSalience> per_layer;

    /// Layer names by descending Frobenius norm, ties by name.
    std::vector<std::string> sorted_by_norm() const {
        std::vector<std::string> names;
        for (const auto& [n, _] : per_layer) names.push_back(n);
        std::stable_sort(names.begin(), names.end(), [&](const auto& a, const auto& b) {
            return per_layer.at(a).frobenius_norm > per_layer.at(b).frobenius_norm;
        });
        return names;
    }
};

inline LayerSalience layer_salience(std::span<const double> values) {
    LayerSalience s;
    s.param_count = values.size();
    double sum_sq = 0.0;
    for (double v : values) {
        sum_sq += v * v;
        s.max_abs = std::max(s.max_abs, std::fabs(v));
    }
    s.frobenius_norm = std::sqrt(sum_sq);
    return s;
}

inline SalienceReport salience_report(const TaskVector& v) {
    SalienceReport r;
    for (const auto& [name, d] : v.deltas) r.per_layer.emplace(name, layer_salience(d.values));
    return r;
}

/// Same statistics over raw weights, for inspecting plain checkpoints.
inline SalienceReport salience_report(const Checkpoint& c) {
    SalienceReport r;
    for (const auto& [name, t] : c) r.per_layer.emplace(name, layer_salience(t.to_f64()));
    return r;
}

}  // namespace acm
