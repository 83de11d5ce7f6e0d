// Copyright 2026 The ACM Merge Authors
// SPDX-License-Identifier: Apache-2.0

// Mutual information between paired activations, estimated with an
// equal-frequency histogram and the plug-in formula
//
//   I(X;Y) = sum_{x,y} p(x,y) ln( p(x,y) / (p(x) p(y)) )      [nats]

#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "acm/activation.hpp"
#include "acm/error.hpp"
#include "acm/parallel.hpp"

namespace acm {

/// Sample -> bin index under equal-frequency binning. Edges sit at the
/// i*n/bins order statistics; repeated edges collapse, so tied values always
/// share a bin and a constant input lands in a single bin.
struct QuantileBinning {
    std::vector<std::uint32_t> index;  // per sample
    std::size_t bin_count = 0;         // edges + 1, some bins may be empty
    std::size_t occupied = 0;
};

template <std::floating_point T>
QuantileBinning quantile_bin(std::span<const T> values, int bins) {
    const std::size_t n = values.size();
    std::vector<T> sorted(values.begin(), values.end());
    for (T v : sorted)
        if (!std::isfinite(v)) fail(ErrorKind::Format, "non-finite sample in MI input");
    std::sort(sorted.begin(), sorted.end());

    std::vector<T> edges;
    for (int i = 1; i < bins; ++i) {
        const std::size_t at = static_cast<std::size_t>(static_cast<unsigned long long>(i) * n / bins);
        const T e = sorted[std::min(at, n - 1)];
        if (edges.empty() || e != edges.back()) edges.push_back(e);
    }

    QuantileBinning out;
    out.bin_count = edges.size() + 1;
    out.index.resize(n);
    std::vector<std::uint8_t> used(out.bin_count, 0);
    for (std::size_t i = 0; i < n; ++i) {
        const auto b = static_cast<std::uint32_t>(std::upper_bound(edges.begin(), edges.end(), values[i]) - edges.begin());
        out.index[i] = b;
        used[b] = 1;
    }
    for (auto u : used) out.occupied += u;
    return out;
}

/// Plug-in MI of a joint count table (row-major, rows x cols). Empty cells
/// contribute nothing. Clamped at zero against rounding.
inline double mi_from_joint_counts(std::span<const std::uint64_t> counts, std::size_t rows, std::size_t cols) {
    if (counts.size() != rows * cols) fail(ErrorKind::Compatibility, "joint table size does not match its shape");
    std::vector<double> row_sum(rows, 0.0), col_sum(cols, 0.0);
    double n = 0.0;
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) {
            const double v = static_cast<double>(counts[r * cols + c]);
            row_sum[r] += v;
            col_sum[c] += v;
            n += v;
        }
    if (n == 0.0) return 0.0;
    const double log_n = std::log(n);
    double mi = 0.0;
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) {
            const double v = static_cast<double>(counts[r * cols + c]);
            if (v == 0.0) continue;
            mi += v * (std::log(v) + log_n - std::log(row_sum[r]) - std::log(col_sum[c]));
        }
    return std::max(0.0, mi / n);
}

/// Entropy (nats) of a binned marginal.
inline double binned_entropy(const QuantileBinning& b) {
    std::vector<double> counts(b.bin_count, 0.0);
    for (auto i : b.index) counts[i] += 1.0;
    const double n = static_cast<double>(b.index.size());
    double h = 0.0;
    for (double c : counts)
        if (c > 0.0) h -= (c / n) * std::log(c / n);
    return h;
}

struct MiResult {
    double value = 0.0;       // nats, >= 0
    bool degenerate = false;  // one side collapsed into a single bin
};

template <std::floating_point T>
MiResult estimate_mi(std::span<const T> x, std::span<const T> y, int bins) {
    if (bins < 2) fail(ErrorKind::Configuration, "MI needs at least 2 bins, got " + std::to_string(bins));
    if (x.size() != y.size())
        fail(ErrorKind::Compatibility, "MI inputs differ in length (" + std::to_string(x.size()) + " vs " +
                                           std::to_string(y.size()) + ")");
    if (x.size() < 2 * static_cast<std::size_t>(bins))
        fail(ErrorKind::InsufficientData, std::to_string(x.size()) + " samples is too few for " +
                                              std::to_string(bins) + " bins (need " + std::to_string(2 * bins) + ")");
    const auto bx = quantile_bin(x, bins);
    const auto by = quantile_bin(y, bins);
    if (bx.occupied <= 1 || by.occupied <= 1) return {0.0, true};

    std::vector<std::uint64_t> joint(bx.bin_count * by.bin_count, 0);
    for (std::size_t i = 0; i < x.size(); ++i) ++joint[bx.index[i] * by.bin_count + by.index[i]];
    return {mi_from_joint_counts(joint, bx.bin_count, by.bin_count), false};
}

template <std::floating_point T>
MiResult estimate_mi(const std::vector<T>& x, const std::vector<T>& y, int bins) {
    return estimate_mi(std::span<const T>(x), std::span<const T>(y), bins);
}

// ---------------------------------------------------------------------------

inline constexpr int kDefaultBins = 32;

struct MiOptions {
    int bins = kDefaultBins;
    /// Estimate one MI per layer over all pieces concatenated instead of
    /// averaging per-piece estimates.
    bool pooled = false;
    unsigned threads = 1;
};

struct MIEstimate {
    std::string model_id;  // fine-tuned side
    std::string calib_id;
    std::vector<std::string> layer_order;
    std::map<std::string, std::vector<double>> per_layer_per_piece;
    std::map<std::string, std::vector<bool>> degenerate;
    std::map<std::string, double> per_layer_mean;
    int bins = kDefaultBins;
    bool pooled = false;
    std::string estimator = "histogram-quantile";

    /// Largest raw value over every (layer, piece).
    double max_raw() const {
        double m = 0.0;
        bool any = false;
        for (const auto& [_, vals] : per_layer_per_piece)
            for (double v : vals) {
                m = any ? std::max(m, v) : v;
                any = true;
            }
        if (!any) fail(ErrorKind::InsufficientData, "MI estimate is empty");
        return m;
    }

    nlohmann::json to_json() const {
        nlohmann::json layers = nlohmann::json::object();
        for (const auto& name : layer_order) {
            std::vector<std::size_t> degenerate_pieces;
            const auto& flags = degenerate.at(name);
            for (std::size_t p = 0; p < flags.size(); ++p)
                if (flags[p]) degenerate_pieces.push_back(p);
            layers[name] = {{"per_piece", per_layer_per_piece.at(name)},
                            {"mean", per_layer_mean.at(name)},
                            {"degenerate_pieces", degenerate_pieces}};
        }
        return {{"model_id", model_id}, {"calib_id", calib_id}, {"bins", bins},       {"estimator", estimator},
                {"pooled", pooled},     {"layer_order", layer_order}, {"layers", layers}};
    }
};

/// Per layer and piece, pairs PT and FT activations at identical
/// (position, hidden) coordinates and estimates their MI.
inline MIEstimate layer_mi(const ActivationTrace& pt, const ActivationTrace& ft, const MiOptions& opts = {}) {
    check_pairable(pt, ft);
    MIEstimate est;
    est.model_id = ft.model_id;
    est.calib_id = ft.calib_id;
    est.layer_order = pt.layer_order;
    est.bins = opts.bins;
    est.pooled = opts.pooled;

    struct Job {
        std::string layer;
        std::size_t piece;
    };
    std::vector<Job> jobs;
    for (const auto& layer : pt.layer_order) {
        const std::size_t pieces = opts.pooled ? 1 : pt.layers.at(layer).size();
        for (std::size_t p = 0; p < pieces; ++p) jobs.push_back({layer, p});
    }

    std::vector<MiResult> results(jobs.size());
    parallel_for(jobs.size(), opts.threads, [&](std::size_t j) {
        const auto& a = pt.layers.at(jobs[j].layer);
        const auto& b = ft.layers.at(jobs[j].layer);
        if (!opts.pooled) {
            results[j] = estimate_mi(std::span<const float>(a[jobs[j].piece].data),
                                     std::span<const float>(b[jobs[j].piece].data), opts.bins);
            return;
        }
        std::vector<float> xa, xb;
        for (std::size_t p = 0; p < a.size(); ++p) {
            xa.insert(xa.end(), a[p].data.begin(), a[p].data.end());
            xb.insert(xb.end(), b[p].data.begin(), b[p].data.end());
        }
        results[j] = estimate_mi(std::span<const float>(xa), std::span<const float>(xb), opts.bins);
    });

    for (std::size_t j = 0; j < jobs.size(); ++j) {
        est.per_layer_per_piece[jobs[j].layer].push_back(results[j].value);
        est.degenerate[jobs[j].layer].push_back(results[j].degenerate);
    }
    for (const auto& [layer, vals] : est.per_layer_per_piece) {
        double s = 0.0;
        for (double v : vals) s += v;
        est.per_layer_mean[layer] = s / static_cast<double>(vals.size());
    }
    return est;
}

}  // namespace acm
