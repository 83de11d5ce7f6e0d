// Copyright 2026 The ACM Merge Authors
// SPDX-License-Identifier: Apache-2.0

// Calibration subset selection: k-means over precomputed embeddings, then an
// even draw from every cluster.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <numeric>
#include <random>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "acm/error.hpp"
#include "acm/parallel.hpp"
#include "acm/tensorstore.hpp"

namespace acm {

struct EmbeddingSet {
    std::size_t items = 0;
    std::size_t dim = 0;
    std::vector<double> vectors;  // row-major [items x dim]
    std::vector<std::string> item_ids;

    const double* row(std::size_t i) const { return vectors.data() + i * dim; }

    void validate() const {
        if (vectors.size() != items * dim) fail(ErrorKind::Format, "embedding matrix size does not match its shape");
        if (item_ids.size() != items) fail(ErrorKind::Format, "embedding ids do not match item count");
        for (double v : vectors)
            if (!std::isfinite(v)) fail(ErrorKind::Format, "embedding matrix holds a non-finite value");
        std::set<std::string> unique(item_ids.begin(), item_ids.end());
        if (unique.size() != item_ids.size()) fail(ErrorKind::Format, "embedding ids are not unique");
    }
};

enum class QuotaMode { Equal, Proportional };

struct SamplePlan {
    std::size_t k = 20;
    double fraction = 0.10;
    std::uint64_t seed = 0;
    std::size_t max_iters = 100;
    double tol = 1e-6;
    std::size_t n_init = 1;  // independent k-means++ restarts, best inertia kept
    QuotaMode mode = QuotaMode::Equal;
};

struct KMeansResult {
    std::size_t k = 0;
    std::size_t dim = 0;
    std::vector<std::size_t> assignment;  // item -> cluster
    std::vector<double> centroids;        // [k x dim]
    double inertia = 0.0;
    std::vector<double> inertia_history;  // after the initial assignment and every iteration
    std::size_t iterations = 0;
    bool converged = false;

    const double* centroid(std::size_t c) const { return centroids.data() + c * dim; }
};

namespace detail {

inline double squared_distance(const double* a, const double* b, std::size_t dim) {
    double s = 0.0;
    for (std::size_t d = 0; d < dim; ++d) {
        const double diff = a[d] - b[d];
        s += diff * diff;
    }
    return s;
}

/// Uniform [0,1) from a 64-bit engine; fixed across standard libraries,
/// unlike std::uniform_real_distribution.
inline double unit_draw(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

inline std::vector<double> kmeans_pp_init(const EmbeddingSet& e, std::size_t k, std::mt19937_64& rng) {
    std::vector<double> centroids;
    centroids.reserve(k * e.dim);
    std::vector<bool> chosen(e.items, false);
    auto take = [&](std::size_t i) {
        chosen[i] = true;
        centroids.insert(centroids.end(), e.row(i), e.row(i) + e.dim);
    };
    take(static_cast<std::size_t>(unit_draw(rng) * static_cast<double>(e.items)));

    std::vector<double> d2(e.items);
    for (std::size_t i = 0; i < e.items; ++i) d2[i] = squared_distance(e.row(i), centroids.data(), e.dim);
    while (centroids.size() < k * e.dim) {
        const double total = std::accumulate(d2.begin(), d2.end(), 0.0);
        std::size_t pick = e.items;
        if (total > 0.0) {
            const double target = unit_draw(rng) * total;
            double run = 0.0;
            for (std::size_t i = 0; i < e.items; ++i) {
                run += d2[i];
                if (d2[i] > 0.0 && run > target) {
                    pick = i;
                    break;
                }
            }
            if (pick == e.items)  // rounding left target at the very end
                for (std::size_t i = e.items; i-- > 0;)
                    if (d2[i] > 0.0) {
                        pick = i;
                        break;
                    }
        } else {
            // every point coincides with a centroid; take the first unused item
            for (std::size_t i = 0; i < e.items; ++i)
                if (!chosen[i]) {
                    pick = i;
                    break;
                }
        }
        take(pick);
        const double* c = centroids.data() + centroids.size() - e.dim;
        for (std::size_t i = 0; i < e.items; ++i) d2[i] = std::min(d2[i], squared_distance(e.row(i), c, e.dim));
    }
    return centroids;
}

/// Nearest-centroid assignment (lowest cluster index on ties); returns inertia.
inline double assign(const EmbeddingSet& e, const std::vector<double>& centroids, std::size_t k,
                     std::vector<std::size_t>& assignment, unsigned threads) {
    std::vector<double> cost(e.items);
    parallel_for(e.items, threads, [&](std::size_t i) {
        double best = std::numeric_limits<double>::infinity();
        std::size_t arg = 0;
        for (std::size_t c = 0; c < k; ++c) {
            const double d = squared_distance(e.row(i), centroids.data() + c * e.dim, e.dim);
            if (d < best) {
                best = d;
                arg = c;
            }
        }
        assignment[i] = arg;
        cost[i] = best;
    });
    return std::accumulate(cost.begin(), cost.end(), 0.0);
}

/// Exact cluster means; empty clusters keep their previous centroid.
inline void recompute_means(const EmbeddingSet& e, std::size_t k, const std::vector<std::size_t>& assignment,
                            std::vector<double>& centroids) {
    std::vector<double> sum(k * e.dim, 0.0);
    std::vector<std::size_t> counts(k, 0);
    for (std::size_t i = 0; i < e.items; ++i) {
        ++counts[assignment[i]];
        for (std::size_t d = 0; d < e.dim; ++d) sum[assignment[i] * e.dim + d] += e.row(i)[d];
    }
    for (std::size_t c = 0; c < k; ++c)
        if (counts[c])
            for (std::size_t d = 0; d < e.dim; ++d) centroids[c * e.dim + d] = sum[c * e.dim + d] / static_cast<double>(counts[c]);
}

/// One sweep of single-point transfers: item i leaves cluster a for b when
/// n_b/(n_b+1)|x-m_b|^2 < n_a/(n_a-1)|x-m_a|^2, which strictly lowers the
/// objective. Lloyd fixed points frequently admit such moves. Returns
/// whether anything moved; centroids are exact means afterwards.
inline bool transfer_pass(const EmbeddingSet& e, std::size_t k, std::vector<std::size_t>& assignment,
                          std::vector<double>& centroids) {
    std::vector<std::size_t> counts(k, 0);
    for (auto c : assignment) ++counts[c];
    bool moved = false;
    for (std::size_t i = 0; i < e.items; ++i) {
        const std::size_t a = assignment[i];
        if (counts[a] <= 1) continue;
        const double na = static_cast<double>(counts[a]);
        const double leave = na / (na - 1.0) * squared_distance(e.row(i), centroids.data() + a * e.dim, e.dim);
        double best = leave * (1.0 - 1e-12);
        std::size_t to = a;
        for (std::size_t b = 0; b < k; ++b) {
            if (b == a) continue;
            const double nb = static_cast<double>(counts[b]);
            const double join = nb / (nb + 1.0) * squared_distance(e.row(i), centroids.data() + b * e.dim, e.dim);
            if (join < best) {
                best = join;
                to = b;
            }
        }
        if (to == a) continue;
        const double nb = static_cast<double>(counts[to]);
        for (std::size_t d = 0; d < e.dim; ++d) {
            const double x = e.row(i)[d];
            double& ma = centroids[a * e.dim + d];
            double& mb = centroids[to * e.dim + d];
            ma = (na * ma - x) / (na - 1.0);
            mb = (nb * mb + x) / (nb + 1.0);
        }
        --counts[a];
        ++counts[to];
        assignment[i] = to;
        moved = true;
    }
    if (moved) recompute_means(e, k, assignment, centroids);
    return moved;
}

inline double assigned_inertia(const EmbeddingSet& e, const std::vector<double>& centroids,
                               const std::vector<std::size_t>& assignment) {
    double total = 0.0;
    for (std::size_t i = 0; i < e.items; ++i)
        total += squared_distance(e.row(i), centroids.data() + assignment[i] * e.dim, e.dim);
    return total;
}

inline void record_inertia(KMeansResult& r, double inertia) {
    // neither step can raise the objective; allow only rounding noise
    if (inertia > r.inertia + 1e-9 * std::max(1.0, r.inertia))
        throw std::logic_error("k-means inertia increased from " + std::to_string(r.inertia) + " to " +
                               std::to_string(inertia));
    r.inertia = std::min(r.inertia, inertia);
    r.inertia_history.push_back(r.inertia);
}

/// Lloyd iterations until the centroids settle, then a transfer sweep; the
/// two alternate until neither changes anything or max_iters Lloyd steps
/// have run.
inline KMeansResult lloyd(const EmbeddingSet& e, const SamplePlan& plan, std::uint64_t seed, unsigned threads) {
    const std::size_t k = plan.k;
    std::mt19937_64 rng(seed);
    KMeansResult r;
    r.k = k;
    r.dim = e.dim;
    r.centroids = kmeans_pp_init(e, k, rng);
    r.assignment.assign(e.items, 0);
    r.inertia = assign(e, r.centroids, k, r.assignment, threads);
    r.inertia_history.push_back(r.inertia);

    while (r.iterations < plan.max_iters) {
        bool settled = false;
        while (r.iterations < plan.max_iters && !settled) {
            std::vector<double> next(k * e.dim, 0.0);
            std::vector<std::size_t> counts(k, 0);
            for (std::size_t i = 0; i < e.items; ++i) {
                const std::size_t c = r.assignment[i];
                ++counts[c];
                for (std::size_t d = 0; d < e.dim; ++d) next[c * e.dim + d] += e.row(i)[d];
            }
            for (std::size_t c = 0; c < k; ++c)
                if (counts[c])
                    for (std::size_t d = 0; d < e.dim; ++d) next[c * e.dim + d] /= static_cast<double>(counts[c]);

            // Empty clusters move onto the point farthest from its own centroid,
            // taken only from clusters that keep at least one member.
            std::vector<bool> taken(e.items, false);
            for (std::size_t c = 0; c < k; ++c) {
                if (counts[c]) continue;
                double worst = -1.0;
                std::size_t arg = e.items;
                for (std::size_t i = 0; i < e.items; ++i) {
                    const std::size_t owner = r.assignment[i];
                    if (taken[i] || counts[owner] <= 1) continue;
                    const double d = squared_distance(e.row(i), next.data() + owner * e.dim, e.dim);
                    if (d > worst) {
                        worst = d;
                        arg = i;
                    }
                }
                if (arg == e.items) continue;
                taken[arg] = true;
                --counts[r.assignment[arg]];
                ++counts[c];
                std::copy(e.row(arg), e.row(arg) + e.dim, next.begin() + static_cast<std::ptrdiff_t>(c * e.dim));
            }

            double shift = 0.0;
            for (std::size_t c = 0; c < k; ++c)
                shift = std::max(shift, std::sqrt(squared_distance(next.data() + c * e.dim,
                                                                   r.centroids.data() + c * e.dim, e.dim)));
            r.centroids = std::move(next);
            record_inertia(r, assign(e, r.centroids, k, r.assignment, threads));
            ++r.iterations;
            settled = shift < plan.tol;
        }
        if (!settled) break;
        auto assignment = r.assignment;
        auto centroids = r.centroids;
        if (!transfer_pass(e, k, assignment, centroids)) {
            r.converged = true;
            break;
        }
        const double before = r.inertia;
        const double after = assigned_inertia(e, centroids, assignment);
        if (!(after < before)) {  // gains lost to rounding; keep the Lloyd result
            r.converged = true;
            break;
        }
        r.assignment = std::move(assignment);
        r.centroids = std::move(centroids);
        record_inertia(r, after);
    }
    return r;
}

}  // namespace detail

/// k-means from seeded k-means++ starts: Lloyd iterations refined by
/// single-point transfers.
inline KMeansResult kmeans(const EmbeddingSet& e, const SamplePlan& plan, unsigned threads = 1) {
    e.validate();
    if (plan.k == 0) fail(ErrorKind::Configuration, "k must be positive");
    if (plan.k > e.items)
        fail(ErrorKind::Configuration, "k = " + std::to_string(plan.k) + " exceeds the " + std::to_string(e.items) +
                                           " available items");
    KMeansResult best;
    for (std::size_t run = 0; run < std::max<std::size_t>(1, plan.n_init); ++run) {
        auto r = detail::lloyd(e, plan, plan.seed + run, threads);
        if (run == 0 || r.inertia < best.inertia) best = std::move(r);
    }
    return best;
}

inline std::size_t sample_target(double fraction, std::size_t items) {
    if (!(fraction > 0.0 && fraction <= 1.0)) fail(ErrorKind::Configuration, "fraction must lie in (0, 1]");
    return std::min(items, static_cast<std::size_t>(std::llround(fraction * static_cast<double>(items))));
}

/// Per-cluster quotas summing to min(target, items).
inline std::vector<std::size_t> cluster_quotas(const std::vector<std::size_t>& sizes, std::size_t target,
                                               QuotaMode mode) {
    const std::size_t k = sizes.size();
    const std::size_t items = std::accumulate(sizes.begin(), sizes.end(), std::size_t{0});
    target = std::min(target, items);

    // largest clusters first, lower id on ties
    std::vector<std::size_t> order(k);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return sizes[a] > sizes[b]; });

    std::vector<std::size_t> quota(k, 0);
    if (mode == QuotaMode::Equal) {
        for (std::size_t r = 0; r < k; ++r) quota[order[r]] = target / k + (r < target % k ? 1 : 0);
    } else {
        std::vector<double> frac(k);
        std::size_t assigned = 0;
        for (std::size_t c = 0; c < k; ++c) {
            const double exact = static_cast<double>(target) * static_cast<double>(sizes[c]) / static_cast<double>(items);
            quota[c] = static_cast<std::size_t>(std::floor(exact));
            frac[c] = exact - std::floor(exact);
            assigned += quota[c];
        }
        std::vector<std::size_t> by_frac(k);
        std::iota(by_frac.begin(), by_frac.end(), std::size_t{0});
        std::stable_sort(by_frac.begin(), by_frac.end(), [&](auto a, auto b) { return frac[a] > frac[b]; });
        for (std::size_t r = 0; assigned < target; ++r, ++assigned) ++quota[by_frac[r % k]];
    }

    std::size_t deficit = 0;
    for (std::size_t c = 0; c < k; ++c)
        if (quota[c] > sizes[c]) {
            deficit += quota[c] - sizes[c];
            quota[c] = sizes[c];
        }
    while (deficit > 0) {
        for (std::size_t r = 0; r < k && deficit > 0; ++r) {
            const std::size_t c = order[r];
            if (quota[c] < sizes[c]) {
                ++quota[c];
                --deficit;
            }
        }
    }
    return quota;
}

/// Picks round(fraction * items) ids: per-cluster quotas, nearest to the
/// centroid first. Output is grouped by cluster id.
inline std::vector<std::string> even_sample(const EmbeddingSet& e, const KMeansResult& km, const SamplePlan& plan) {
    if (km.assignment.size() != e.items) fail(ErrorKind::Compatibility, "assignment does not match embeddings");
    if (km.assignment.empty()) fail(ErrorKind::Configuration, "nothing to sample from");
    const std::size_t k = km.k;
    std::vector<std::vector<std::size_t>> members(k);
    for (std::size_t i = 0; i < e.items; ++i) {
        if (km.assignment[i] >= k) fail(ErrorKind::Compatibility, "assignment references an unknown cluster");
        members[km.assignment[i]].push_back(i);
    }
    std::vector<std::size_t> sizes(k);
    for (std::size_t c = 0; c < k; ++c) sizes[c] = members[c].size();
    const auto quota = cluster_quotas(sizes, sample_target(plan.fraction, e.items), plan.mode);

    std::vector<std::string> out;
    for (std::size_t c = 0; c < k; ++c) {
        auto& m = members[c];
        std::vector<double> dist(e.items, 0.0);
        for (auto i : m) dist[i] = detail::squared_distance(e.row(i), km.centroid(c), e.dim);
        std::stable_sort(m.begin(), m.end(), [&](auto a, auto b) { return dist[a] < dist[b]; });
        for (std::size_t q = 0; q < quota[c]; ++q) out.push_back(e.item_ids[m[q]]);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Embedding files: tensor "embeddings" [items x dim], ids under metadata
// "item_ids" as a JSON array (defaults to row indices).

inline EmbeddingSet read_embeddings(const std::filesystem::path& path) {
    const Checkpoint c = load_checkpoint(path);
    if (!c.contains("embeddings")) fail(ErrorKind::Format, "'" + path.string() + "' has no 'embeddings' tensor");
    const Tensor& t = c.at("embeddings");
    if (t.shape().size() != 2) fail(ErrorKind::Format, "'embeddings' must be 2-D");
    EmbeddingSet e;
    e.items = static_cast<std::size_t>(t.shape()[0]);
    e.dim = static_cast<std::size_t>(t.shape()[1]);
    e.vectors = t.to_f64();
    if (auto it = c.metadata().find("item_ids"); it != c.metadata().end()) {
        try {
            e.item_ids = nlohmann::json::parse(it->second).get<std::vector<std::string>>();
        } catch (const nlohmann::json::exception&) {
            fail(ErrorKind::Format, "item_ids metadata is not a JSON string array");
        }
    } else {
        for (std::size_t i = 0; i < e.items; ++i) e.item_ids.push_back(std::to_string(i));
    }
    e.validate();
    return e;
}

inline void write_embeddings(const EmbeddingSet& e, const std::filesystem::path& path, DType dtype = DType::F32) {
    e.validate();
    Checkpoint c;
    c.insert(Tensor::from_values("embeddings", {static_cast<std::int64_t>(e.items), static_cast<std::int64_t>(e.dim)},
                                 dtype, e.vectors));
    c.metadata()["item_ids"] = nlohmann::json(e.item_ids).dump();
    save_checkpoint(c, path);
}

}  // namespace acm
