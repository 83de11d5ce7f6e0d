// Copyright 2026 The ACM Merge Authors
// SPDX-License-Identifier: Apache-2.0

#include <catch2/catch_amalgamated.hpp>

#include <numeric>
#include <set>

#include "support.hpp"

using namespace acm;
using acm::test::TempDir;

namespace {

EmbeddingSet blobs(std::size_t items, std::size_t dim, std::size_t centres, std::uint64_t seed) {
    toy::Gaussian g(seed);
    std::vector<double> c(centres * dim);
    for (auto& v : c) v = 10.0 * g();
    EmbeddingSet e;
    e.items = items;
    e.dim = dim;
    for (std::size_t i = 0; i < items; ++i) {
        for (std::size_t d = 0; d < dim; ++d) e.vectors.push_back(c[(i % centres) * dim + d] + g());
        e.item_ids.push_back("item-" + std::to_string(i));
    }
    return e;
}

double inertia_of(const EmbeddingSet& e, const std::vector<std::size_t>& assignment, std::size_t k) {
    std::vector<double> sum(k * e.dim, 0.0);
    std::vector<double> count(k, 0.0);
    for (std::size_t i = 0; i < e.items; ++i) {
        count[assignment[i]] += 1;
        for (std::size_t d = 0; d < e.dim; ++d) sum[assignment[i] * e.dim + d] += e.row(i)[d];
    }
    double total = 0.0;
    for (std::size_t i = 0; i < e.items; ++i)
        for (std::size_t d = 0; d < e.dim; ++d) {
            const double m = sum[assignment[i] * e.dim + d] / count[assignment[i]];
            total += (e.row(i)[d] - m) * (e.row(i)[d] - m);
        }
    return total;
}

}  // namespace

TEST_CASE("k-means separates well spaced blobs", "[calib]") {
    const auto e = blobs(300, 4, 3, 1);
    const auto km = kmeans(e, {.k = 3, .seed = 2});
    REQUIRE(km.converged);
    for (std::size_t i = 0; i < e.items; ++i) REQUIRE(km.assignment[i] == km.assignment[i % 3]);
    REQUIRE(km.inertia == Catch::Approx(inertia_of(e, km.assignment, 3)).epsilon(1e-9));
    for (std::size_t t = 1; t < km.inertia_history.size(); ++t)
        REQUIRE(km.inertia_history[t] <= km.inertia_history[t - 1] * (1 + 1e-12));
}

TEST_CASE("k-means is seeded and thread independent", "[calib]") {
    const auto e = blobs(500, 6, 7, 4);
    const SamplePlan plan{.k = 7, .seed = 99};
    const auto a = kmeans(e, plan, 1);
    const auto b = kmeans(e, plan, 8);
    REQUIRE(a.assignment == b.assignment);
    REQUIRE(a.centroids == b.centroids);
    REQUIRE(a.inertia_history == b.inertia_history);
}

TEST_CASE("k-means argument checks", "[calib]") {
    const auto e = blobs(5, 2, 1, 1);
    REQUIRE_THROWS_AS(kmeans(e, {.k = 6}), Error);
    REQUIRE_THROWS_AS(kmeans(e, {.k = 0}), Error);
    auto bad = e;
    bad.item_ids[1] = bad.item_ids[0];
    REQUIRE_THROWS_AS(kmeans(bad, {.k = 2}), Error);
}

TEST_CASE("duplicate points do not leave clusters empty", "[calib]") {
    EmbeddingSet e;
    e.items = 12;
    e.dim = 1;
    for (std::size_t i = 0; i < 12; ++i) {
        e.vectors.push_back(i < 10 ? 0.0 : 5.0);
        e.item_ids.push_back(std::to_string(i));
    }
    const auto km = kmeans(e, {.k = 4, .seed = 1});
    std::set<std::size_t> used(km.assignment.begin(), km.assignment.end());
    REQUIRE(used.size() >= 2);
    for (std::size_t t = 1; t < km.inertia_history.size(); ++t)
        REQUIRE(km.inertia_history[t] <= km.inertia_history[t - 1] * (1 + 1e-12) + 1e-12);
}

TEST_CASE("quotas", "[calib]") {
    SECTION("equal split, remainder to the largest clusters") {
        REQUIRE(cluster_quotas({10, 30, 20}, 7, QuotaMode::Equal) == std::vector<std::size_t>{2, 3, 2});
    }
    SECTION("small clusters give their shortfall to large ones") {
        REQUIRE(cluster_quotas({1, 50, 2, 40}, 20, QuotaMode::Equal) == std::vector<std::size_t>{1, 9, 2, 8});
    }
    SECTION("proportional uses largest remainders") {
        REQUIRE(cluster_quotas({10, 30, 60}, 10, QuotaMode::Proportional) == std::vector<std::size_t>{1, 3, 6});
        REQUIRE(cluster_quotas({1, 1, 1}, 2, QuotaMode::Proportional) == std::vector<std::size_t>{1, 1, 0});
    }
    SECTION("sums always match") {
        std::mt19937_64 rng(3);
        for (int t = 0; t < 500; ++t) {
            std::vector<std::size_t> sizes(1 + rng() % 25);
            for (auto& s : sizes) s = rng() % 40;
            sizes[0] += 1;
            const std::size_t total = std::accumulate(sizes.begin(), sizes.end(), std::size_t{0});
            const std::size_t target = rng() % (total + 5);
            for (auto mode : {QuotaMode::Equal, QuotaMode::Proportional}) {
                const auto q = cluster_quotas(sizes, target, mode);
                REQUIRE(std::accumulate(q.begin(), q.end(), std::size_t{0}) == std::min(target, total));
                for (std::size_t c = 0; c < sizes.size(); ++c) REQUIRE(q[c] <= sizes[c]);
            }
        }
    }
}

TEST_CASE("even_sample picks the centroid-nearest items", "[calib]") {
    const auto e = blobs(200, 3, 4, 6);
    const SamplePlan plan{.k = 4, .fraction = 0.1, .seed = 3};
    const auto km = kmeans(e, plan);
    const auto ids = even_sample(e, km, plan);
    REQUIRE(ids.size() == 20);
    REQUIRE(std::set<std::string>(ids.begin(), ids.end()).size() == 20);

    std::map<std::string, std::size_t> index;
    for (std::size_t i = 0; i < e.items; ++i) index[e.item_ids[i]] = i;
    std::vector<std::size_t> per_cluster(4, 0);
    for (const auto& id : ids) ++per_cluster[km.assignment[index[id]]];
    for (auto n : per_cluster) REQUIRE(n == 5);

    for (std::size_t c = 0; c < 4; ++c) {
        double worst_chosen = 0.0, best_left = INFINITY;
        std::set<std::string> chosen(ids.begin(), ids.end());
        for (std::size_t i = 0; i < e.items; ++i) {
            if (km.assignment[i] != c) continue;
            const double d = detail::squared_distance(e.row(i), km.centroid(c), e.dim);
            if (chosen.count(e.item_ids[i]))
                worst_chosen = std::max(worst_chosen, d);
            else
                best_left = std::min(best_left, d);
        }
        REQUIRE(worst_chosen <= best_left);
    }
    REQUIRE_THROWS_AS(sample_target(0.0, 10), Error);
}

TEST_CASE("embedding files round trip", "[calib]") {
    TempDir dir;
    const auto e = blobs(10, 3, 2, 1);
    write_embeddings(e, dir / "e.safetensors", DType::F64);
    const auto back = read_embeddings(dir / "e.safetensors");
    REQUIRE(back.vectors == e.vectors);
    REQUIRE(back.item_ids == e.item_ids);

    Checkpoint c;
    c.insert(Tensor::from_values("embeddings", {2, 1}, DType::F32, std::vector<double>{1, 2}));
    save_checkpoint(c, dir / "plain.safetensors");
    REQUIRE(read_embeddings(dir / "plain.safetensors").item_ids == std::vector<std::string>{"0", "1"});
}
