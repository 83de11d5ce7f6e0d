// Copyright 2026 The ACM Merge Authors
// SPDX-License-Identifier: Apache-2.0

// Task-vector merge strategies. Every strategy is layer-local:
//
//   linear   (average, ta, dare-ta, acm-ta, acm-average)
//       out = base + (1/N) * sum_i lambda_i * delta_i
//   ties     (ties, dare-ties, acm-ties)
//       trim each delta to its top-density magnitudes, elect a sign per
//       element by magnitude mass, then
//       out = base + sum_{i agrees} lambda_i * delta_i / #agreeing
//
// dare-* first drops each delta element with probability r and rescales the
// survivors by 1/(1-r). lambda_i is 1 for average, the global coefficient for
// ta/ties/dare-*, and the per-layer coefficient for acm-*.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "acm/coefficients.hpp"
#include "acm/error.hpp"
#include "acm/parallel.hpp"
#include "acm/philox.hpp"
#include "acm/taskvector.hpp"
#include "acm/tensorstore.hpp"

namespace acm {

enum class MergeMethod { Average, Ta, Ties, DareTa, DareTies, AcmTa, AcmTies, AcmAverage };

inline std::string_view method_name(MergeMethod m) {
    switch (m) {
    case MergeMethod::Average: return "average";
    case MergeMethod::Ta: return "ta";
    case MergeMethod::Ties: return "ties";
    case MergeMethod::DareTa: return "dare-ta";
    case MergeMethod::DareTies: return "dare-ties";
    case MergeMethod::AcmTa: return "acm-ta";
    case MergeMethod::AcmTies: return "acm-ties";
    case MergeMethod::AcmAverage: return "acm-average";
    }
    return "?";
}

inline MergeMethod parse_method(std::string_view s) {
    for (auto m : {MergeMethod::Average, MergeMethod::Ta, MergeMethod::Ties, MergeMethod::DareTa, MergeMethod::DareTies,
                   MergeMethod::AcmTa, MergeMethod::AcmTies, MergeMethod::AcmAverage})
        if (method_name(m) == s) return m;
    fail(ErrorKind::Configuration, "unknown merge method '" + std::string(s) + "'");
}

inline bool uses_acm(MergeMethod m) {
    return m == MergeMethod::AcmTa || m == MergeMethod::AcmTies || m == MergeMethod::AcmAverage;
}
inline bool uses_dare(MergeMethod m) { return m == MergeMethod::DareTa || m == MergeMethod::DareTies; }
inline bool uses_ties(MergeMethod m) {
    return m == MergeMethod::Ties || m == MergeMethod::DareTies || m == MergeMethod::AcmTies;
}

inline constexpr double kDefaultLambda = 0.7;
inline constexpr double kDefaultTiesDensity = 0.7;
inline constexpr double kDefaultDropRate = 0.3;

struct MergeRecipe {
    MergeMethod method = MergeMethod::Ta;
    double global_lambda = kDefaultLambda;
    double ties_density = kDefaultTiesDensity;
    double dare_drop_rate = kDefaultDropRate;
    std::uint64_t seed = 0;
    bool normalize_by_n = true;
    std::vector<std::string> coefficients_paths;  // one per tuned model, acm-* only

    // File inputs; used by the command line, ignored by run_merge.
    std::string base_path;
    std::vector<std::string> model_paths;

    void validate() const {
        if (!(global_lambda >= 0.0 && global_lambda <= 2.0))
            fail(ErrorKind::Configuration, "global_lambda must lie in [0, 2]");
        if (!(ties_density > 0.0 && ties_density <= 1.0))
            fail(ErrorKind::Configuration, "ties_density must lie in (0, 1]");
        if (!(dare_drop_rate >= 0.0 && dare_drop_rate < 1.0))
            fail(ErrorKind::Configuration, "dare_drop_rate must lie in [0, 1)");
    }

    nlohmann::json to_json() const {
        nlohmann::json j = {{"method", method_name(method)},
                            {"global_lambda", global_lambda},
                            {"ties_density", ties_density},
                            {"dare_drop_rate", dare_drop_rate},
                            {"seed", seed},
                            {"normalize_by_n", normalize_by_n}};
        if (!coefficients_paths.empty()) j["coefficients_path"] = coefficients_paths;
        if (!base_path.empty()) j["base"] = base_path;
        if (!model_paths.empty()) j["models"] = model_paths;
        return j;
    }

    /// Parses a recipe document. acm-* recipes must name their coefficient
    /// files; "coefficients_path" accepts a string or one path per model.
    static MergeRecipe from_json(const nlohmann::json& j) {
        static const std::vector<std::string> known = {"method",       "global_lambda",  "ties_density",
                                                       "dare_drop_rate", "seed",         "normalize_by_n",
                                                       "coefficients_path", "base",      "models"};
        if (!j.is_object()) fail(ErrorKind::Configuration, "recipe must be a JSON object");
        for (const auto& [key, _] : j.items())
            if (std::find(known.begin(), known.end(), key) == known.end())
                fail(ErrorKind::Configuration, "unknown recipe field '" + key + "'");
        MergeRecipe r;
        try {
            r.method = parse_method(j.at("method").get<std::string>());
            r.global_lambda = j.value("global_lambda", kDefaultLambda);
            r.ties_density = j.value("ties_density", kDefaultTiesDensity);
            r.dare_drop_rate = j.value("dare_drop_rate", kDefaultDropRate);
            r.seed = j.value("seed", std::uint64_t{0});
            r.normalize_by_n = j.value("normalize_by_n", true);
            if (j.contains("coefficients_path")) {
                const auto& c = j["coefficients_path"];
                if (c.is_string())
                    r.coefficients_paths = {c.get<std::string>()};
                else
                    r.coefficients_paths = c.get<std::vector<std::string>>();
            }
            r.base_path = j.value("base", std::string{});
            if (j.contains("models")) r.model_paths = j["models"].get<std::vector<std::string>>();
        } catch (const nlohmann::json::exception& e) {
            fail(ErrorKind::Configuration, std::string("invalid recipe: ") + e.what());
        }
        if (uses_acm(r.method) && r.coefficients_paths.empty())
            fail(ErrorKind::Configuration, std::string(method_name(r.method)) + " requires coefficients_path");
        r.validate();
        return r;
    }
};

// ---------------------------------------------------------------------------
// Layer kernels. They operate on one layer's flat values and are shared by
// the TaskVector-level operations and by run_merge.

/// ceil(density * n), with products within 1e-9 of an integer taken as that
/// integer so 0.7 * 10 keeps 7 rather than 8.
inline std::size_t trim_keep_count(double density, std::size_t n) {
    const double x = density * static_cast<double>(n);
    const double nearest = std::round(x);
    const double k = std::fabs(x - nearest) <= 1e-9 * std::max(1.0, x) ? nearest : std::ceil(x);
    return std::min(n, static_cast<std::size_t>(k));
}

/// Mask of the entries kept by magnitude trimming; ties at the threshold go
/// to the lower flat index.
inline std::vector<bool> trim_mask(std::span<const double> values, double density) {
    if (!(density > 0.0 && density <= 1.0)) fail(ErrorKind::Configuration, "trim density must lie in (0, 1]");
    const std::size_t n = values.size();
    const std::size_t keep = trim_keep_count(density, n);
    std::vector<bool> mask(n, keep == n);
    if (keep == n || keep == 0) return mask;
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::nth_element(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(keep), order.end(),
                     [&](std::size_t a, std::size_t b) {
                         const double ma = std::fabs(values[a]), mb = std::fabs(values[b]);
                         return ma > mb || (ma == mb && a < b);
                     });
    for (std::size_t i = 0; i < keep; ++i) mask[order[i]] = true;
    return mask;
}

inline void trim_values(std::vector<double>& values, double density) {
    if (density >= 1.0) return;
    const auto mask = trim_mask(values, density);
    for (std::size_t i = 0; i < values.size(); ++i)
        if (!mask[i]) values[i] = 0.0;
}

/// Per element: +1 if positive mass >= negative mass (exact ties included),
/// -1 if negative mass dominates, 0 only when every entry is zero.
inline std::vector<std::int8_t> elect_layer_signs(std::span<const std::vector<double>> deltas) {
    if (deltas.empty()) fail(ErrorKind::Configuration, "sign election needs at least one task vector");
    const std::size_t n = deltas.front().size();
    for (const auto& d : deltas)
        if (d.size() != n) fail(ErrorKind::Compatibility, "sign election inputs differ in size");
    std::vector<std::int8_t> out(n, 0);
    for (std::size_t j = 0; j < n; ++j) {
        double pos = 0.0, neg = 0.0;
        for (const auto& d : deltas) {
            if (d[j] > 0.0)
                pos += d[j];
            else if (d[j] < 0.0)
                neg -= d[j];
        }
        if (pos == 0.0 && neg == 0.0)
            out[j] = 0;
        else
            out[j] = pos >= neg ? 1 : -1;
    }
    return out;
}

inline int sign_of(double v) { return (v > 0.0) - (v < 0.0); }

/// Weighted disjoint mean: per element, sum of lambda_i * delta_i over the
/// entries whose sign equals the elected one, divided by their count.
inline std::vector<double> disjoint_layer_merge(std::span<const std::vector<double>> deltas,
                                                std::span<const std::int8_t> elected, std::span<const double> lambdas) {
    const std::size_t n = elected.size();
    std::vector<double> out(n, 0.0);
    for (std::size_t j = 0; j < n; ++j) {
        if (elected[j] == 0) continue;
        double sum = 0.0;
        std::size_t count = 0;
        for (std::size_t i = 0; i < deltas.size(); ++i) {
            if (sign_of(deltas[i][j]) != elected[j]) continue;
            sum += lambdas[i] * deltas[i][j];
            ++count;
        }
        if (count) out[j] = sum / static_cast<double>(count);
    }
    return out;
}

/// Drops element j with probability `rate` using a Philox draw keyed by
/// (seed, layer, j); survivors are divided by (1 - rate).
inline void dare_values(std::vector<double>& values, double rate, std::uint64_t seed, std::string_view layer) {
    if (!(rate >= 0.0 && rate < 1.0)) fail(ErrorKind::Configuration, "DARE drop rate must lie in [0, 1)");
    if (rate == 0.0) return;
    const KeyedUniform rng(seed, layer);
    const double keep = 1.0 - rate;
    for (std::size_t j = 0; j < values.size(); ++j) values[j] = rng.uniform(j) < rate ? 0.0 : values[j] / keep;
}

/// Seed used for the i-th model's DARE masks; model 0 uses the recipe seed.
inline std::uint64_t dare_model_seed(std::uint64_t seed, std::size_t model_index) {
    return seed ^ (static_cast<std::uint64_t>(model_index) * 0x9E3779B97F4A7C15ull);
}

// ---------------------------------------------------------------------------
// TaskVector-level operations

struct SignElection {
    std::map<std::string, std::vector<std::int8_t>> elected;
};

inline TaskVector trim(const TaskVector& v, double density) {
    TaskVector out = v;
    for (auto& [_, d] : out.deltas) trim_values(d.values, density);
    return out;
}

inline SignElection elect_signs(std::span<const TaskVector> vectors) {
    if (vectors.empty()) fail(ErrorKind::Configuration, "sign election needs at least one task vector");
    SignElection e;
    for (const auto& [name, d0] : vectors.front().deltas) {
        std::vector<std::vector<double>> layer;
        for (const auto& v : vectors) {
            auto it = v.deltas.find(name);
            if (it == v.deltas.end() || it->second.shape != d0.shape)
                fail(ErrorKind::Compatibility, "task vectors disagree on layer '" + name + "'");
            layer.push_back(it->second.values);
        }
        e.elected.emplace(name, elect_layer_signs(layer));
    }
    for (const auto& v : vectors)
        if (v.deltas.size() != vectors.front().deltas.size())
            fail(ErrorKind::Compatibility, "task vectors have different layer sets");
    return e;
}

/// Unweighted disjoint mean of sign-agreeing entries.
inline TaskVector disjoint_merge(std::span<const TaskVector> vectors, const SignElection& election) {
    if (vectors.empty()) fail(ErrorKind::Configuration, "disjoint merge needs at least one task vector");
    TaskVector out;
    out.base_id = vectors.front().base_id;
    out.source_id = "disjoint-merge";
    const std::vector<double> ones(vectors.size(), 1.0);
    for (const auto& [name, d0] : vectors.front().deltas) {
        auto it = election.elected.find(name);
        if (it == election.elected.end() || it->second.size() != d0.values.size())
            fail(ErrorKind::Compatibility, "sign election does not cover layer '" + name + "'");
        std::vector<std::vector<double>> layer;
        for (const auto& v : vectors) layer.push_back(v.deltas.at(name).values);
        out.deltas.emplace(name, DeltaTensor{d0.shape, disjoint_layer_merge(layer, it->second, ones)});
    }
    return out;
}

inline TaskVector dare_transform(const TaskVector& v, double drop_rate, std::uint64_t seed) {
    TaskVector out = v;
    for (auto& [name, d] : out.deltas) dare_values(d.values, drop_rate, seed, name);
    return out;
}

// ---------------------------------------------------------------------------
// run_merge

struct MergeOptions {
    unsigned threads = 1;
};

namespace detail {

/// Validated view of one merge run shared by the in-memory and streaming
/// entry points.
struct MergePlan {
    const MergeRecipe& recipe;
    const Checkpoint& base;
    std::span<const Checkpoint> tuned;
    std::vector<LayerLambdas> lambdas;  // per model, per base tensor
    std::vector<std::string> names;
};

inline MergePlan plan_merge(const MergeRecipe& recipe, const Checkpoint& base, std::span<const Checkpoint> tuned,
                            const std::vector<LayerCoefficients>* coefficients) {
    recipe.validate();
    if (tuned.empty()) fail(ErrorKind::Configuration, "merge needs at least one tuned model");
    for (const auto& t : tuned) assert_compatible(base, t);

    MergePlan plan{recipe, base, tuned, {}, base.names()};
    if (uses_acm(recipe.method)) {
        if (!coefficients)
            fail(ErrorKind::Configuration, std::string(method_name(recipe.method)) + " requires layer coefficients");
        if (coefficients->size() != tuned.size())
            fail(ErrorKind::Configuration, std::to_string(coefficients->size()) + " coefficient sets for " +
                                               std::to_string(tuned.size()) + " models");
        std::vector<std::string> gaps;
        for (std::size_t i = 0; i < tuned.size(); ++i) {
            LayerLambdas l;
            for (const auto& name : plan.names) {
                if (auto v = (*coefficients)[i].lookup(name))
                    l.emplace(name, *v);
                else
                    gaps.push_back("model " + std::to_string(i) + " '" + name + "'");
            }
            plan.lambdas.push_back(std::move(l));
        }
        if (!gaps.empty()) {
            std::string msg = "coefficients do not cover: ";
            for (std::size_t g = 0; g < gaps.size(); ++g) msg += (g ? ", " : "") + gaps[g];
            fail(ErrorKind::Configuration, msg);
        }
    } else {
        const double value = recipe.method == MergeMethod::Average ? 1.0 : recipe.global_lambda;
        for (std::size_t i = 0; i < tuned.size(); ++i) plan.lambdas.push_back(uniform_lambdas(base, value));
    }
    return plan;
}

inline Tensor merge_layer(const MergePlan& plan, std::size_t k) {
    const std::string& name = plan.names[k];
    const MergeRecipe& r = plan.recipe;
    const Tensor& b = plan.base.at(name);
    const std::size_t n = b.numel();
    const auto base_vals = b.to_f64();

    std::vector<std::vector<double>> deltas(plan.tuned.size());
    std::vector<double> lambdas(plan.tuned.size());
    for (std::size_t i = 0; i < plan.tuned.size(); ++i) {
        const Tensor& t = plan.tuned[i].at(name);
        auto& d = deltas[i];
        d.resize(n);
        for (std::size_t j = 0; j < n; ++j) d[j] = t.at(j) - base_vals[j];
        if (uses_dare(r.method)) dare_values(d, r.dare_drop_rate, dare_model_seed(r.seed, i), name);
        lambdas[i] = plan.lambdas[i].at(name);
    }

    std::vector<double> out(n);
    if (uses_ties(r.method)) {
        for (auto& d : deltas) trim_values(d, r.ties_density);
        const auto elected = elect_layer_signs(deltas);
        const auto merged = disjoint_layer_merge(deltas, elected, lambdas);
        for (std::size_t j = 0; j < n; ++j) out[j] = base_vals[j] + merged[j];
    } else {
        // average and acm-average always take the mean; ta variants honour normalize_by_n
        const bool mean = r.normalize_by_n || r.method == MergeMethod::Average || r.method == MergeMethod::AcmAverage;
        const double count = static_cast<double>(deltas.size());
        for (std::size_t j = 0; j < n; ++j) {
            double acc = 0.0;
            for (std::size_t i = 0; i < deltas.size(); ++i) acc += lambdas[i] * deltas[i][j];
            out[j] = base_vals[j] + (mean ? acc / count : acc);
        }
    }
    return Tensor::from_values(name, b.shape(), b.dtype(), out);
}

inline Metadata merge_metadata(const MergePlan& plan, const std::vector<LayerCoefficients>* coefficients) {
    nlohmann::json j = plan.recipe.to_json();
    nlohmann::json inputs = {{"base", plan.base.content_hash()}};
    std::vector<std::string> models;
    for (const auto& t : plan.tuned) models.push_back(t.content_hash());
    inputs["models"] = models;
    if (coefficients && uses_acm(plan.recipe.method)) {
        std::vector<std::string> ids;
        for (const auto& c : *coefficients) ids.push_back(c.model_id);
        inputs["coefficient_model_ids"] = ids;
    }
    j["inputs"] = inputs;
    j["normalization"] = uses_ties(plan.recipe.method) ? "disjoint-mean"
                         : (plan.recipe.normalize_by_n || plan.recipe.method == MergeMethod::Average ||
                            plan.recipe.method == MergeMethod::AcmAverage)
                             ? "divide-by-n"
                             : "none";
    return {{"__merge_recipe__", j.dump()}};
}

}  // namespace detail

/// Key under which the merged checkpoint records its recipe and input hashes.
inline constexpr const char* kMergeRecipeKey = "__merge_recipe__";

/// Merges `tuned` into `base`. `coefficients` (one per tuned model) is
/// required for acm-* methods and ignored otherwise. The result is
/// independent of `opts.threads`.
inline Checkpoint run_merge(const MergeRecipe& recipe, const Checkpoint& base, std::span<const Checkpoint> tuned,
                            const std::vector<LayerCoefficients>* coefficients = nullptr,
                            const MergeOptions& opts = {}) {
    const auto plan = detail::plan_merge(recipe, base, tuned, coefficients);
    std::vector<Tensor> layers(plan.names.size());
    parallel_for(plan.names.size(), opts.threads, [&](std::size_t k) { layers[k] = detail::merge_layer(plan, k); });
    Checkpoint out;
    for (auto& t : layers) out.insert(std::move(t));
    out.metadata() = detail::merge_metadata(plan, coefficients);
    return out;
}

/// Same result as run_merge followed by save_checkpoint, but only `threads`
/// layers are resident at a time.
inline Metadata stream_merge(const MergeRecipe& recipe, const Checkpoint& base, std::span<const Checkpoint> tuned,
                             const std::vector<LayerCoefficients>* coefficients, const std::filesystem::path& out_path,
                             const MergeOptions& opts = {}) {
    const auto plan = detail::plan_merge(recipe, base, tuned, coefficients);
    const Metadata meta = detail::merge_metadata(plan, coefficients);
    std::vector<TensorMeta> layout;
    for (const auto& name : plan.names) layout.push_back(base.at(name).meta());
    CheckpointWriter writer(out_path, std::move(layout), meta);

    const std::size_t batch = std::max<std::size_t>(1, resolve_threads(opts.threads));
    for (std::size_t start = 0; start < plan.names.size(); start += batch) {
        const std::size_t len = std::min(batch, plan.names.size() - start);
        std::vector<Tensor> chunk(len);
        parallel_for(len, opts.threads, [&](std::size_t i) { chunk[i] = detail::merge_layer(plan, start + i); });
        for (const auto& t : chunk) writer.write(t);
    }
    writer.finish();
    return meta;
}

}  // namespace acm
