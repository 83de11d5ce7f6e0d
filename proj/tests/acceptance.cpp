// Copyright 2026 The ACM Merge Authors
// SPDX-License-Identifier: Apache-2.0

// Acceptance suite. Prints one PASS/FAIL line per criterion and exits
// non-zero if any criterion fails. Every check compares against an oracle
// written here, not against the library's own arithmetic.

#include <array>
#include <chrono>
#include <cstdio>
#include <functional>
#include <numeric>
#include <sstream>

#include "cli.hpp"
#include "support.hpp"

using namespace acm;
using acm::test::TempDir;

namespace {

struct Outcome {
    bool ok = true;
    std::string detail;
};

/// Collects the first few failure messages for the report line.
class Check {
public:
    void expect(bool cond, const std::string& what) {
        if (cond) return;
        ok_ = false;
        if (++failures_ <= 3) msgs_ << (failures_ > 1 ? "; " : "") << what;
    }
    Outcome done(const std::string& summary) const {
        if (ok_) return {true, summary};
        std::ostringstream s;
        s << msgs_.str();
        if (failures_ > 3) s << " (+" << failures_ - 3 << " more)";
        return {false, s.str()};
    }

private:
    bool ok_ = true;
    int failures_ = 0;
    std::ostringstream msgs_;
};

std::string fmt(const char* f, auto... args) {
    char buf[256];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

// ---------------------------------------------------------------------------

double plugin_mi_oracle(const std::vector<std::uint64_t>& t, std::size_t rows, std::size_t cols) {
    double n = 0;
    for (auto v : t) n += static_cast<double>(v);
    double mi = 0.0;
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) {
            const double pxy = static_cast<double>(t[r * cols + c]) / n;
            if (pxy == 0.0) continue;
            double px = 0.0, py = 0.0;
            for (std::size_t k = 0; k < cols; ++k) px += static_cast<double>(t[r * cols + k]) / n;
            for (std::size_t k = 0; k < rows; ++k) py += static_cast<double>(t[k * cols + c]) / n;
            mi += pxy * std::log(pxy / (px * py));
        }
    return mi;
}

Outcome mi_oracle_equivalence() {
    Check check;
    std::mt19937_64 rng(1);
    double worst = 0.0;
    const int tables = 200;
    for (int k = 0; k < tables; ++k) {
        const std::size_t rows = 1 + rng() % 8, cols = 1 + rng() % 8;
        std::vector<std::uint64_t> t(rows * cols);
        for (auto& v : t) v = (rng() % 4 == 0) ? 0 : rng() % 1000;
        t[rng() % t.size()] += 1;
        const double err = std::fabs(mi_from_joint_counts(t, rows, cols) - plugin_mi_oracle(t, rows, cols));
        worst = std::max(worst, err);
        check.expect(err <= 1e-9, fmt("table %d (%zux%zu) off by %.3g", k, rows, cols, err));
    }
    return check.done(fmt("%d tables up to 8x8, max |err| %.2g nats", tables, worst));
}

Outcome mi_calibration() {
    Check check;
    std::mt19937_64 rng(2);
    std::vector<double> x(10000), y(10000);
    for (auto& v : x) v = static_cast<double>(rng() >> 11) * 0x1.0p-53;
    for (auto& v : y) v = static_cast<double>(rng() >> 11) * 0x1.0p-53;
    const double self = estimate_mi(x, x, 2).value;
    const double indep = estimate_mi(x, y, 8).value;
    check.expect(std::fabs(self - std::log(2.0)) <= 0.01, fmt("I(X;X) = %.6f", self));
    check.expect(indep < 0.02, fmt("independent MI = %.6f", indep));
    return check.done(fmt("I(X;X) = %.6f (ln 2 = %.6f), independent = %.5f", self, std::log(2.0), indep));
}

Outcome sigmoid_arithmetic() {
    Check check;
    for (double t : {0.7, -1.8, 3.0}) check.expect(coefficient_from_mi(0.0, t) == 0.5, fmt("lambda(0) != 0.5 at t=%g", t));
    const double v = coefficient_from_mi(-1.5, 0.7);
    // 1 - sigma(-t * I) written out
    const double oracle = 1.0 - 1.0 / (1.0 + std::exp(-(0.7 * -1.5)));
    check.expect(std::fabs(v - 0.74078) <= 1e-5, fmt("lambda(t=0.7, I=-1.5) = %.8f", v));
    check.expect(std::fabs(v - oracle) <= 1e-12, "formula disagrees with 1 - sigmoid(-tI)");

    for (double t : {0.1, 0.7, 2.0}) {
        double prev = INFINITY;
        for (int i = 0; i < 100; ++i) {
            const double mi = -5.0 + 5.0 * i / 99.0;
            const double l = coefficient_from_mi(mi, t);
            check.expect(l < prev, fmt("not decreasing at I=%.4f, t=%g", mi, t));
            prev = l;
        }
    }

    std::mt19937_64 rng(3);
    double worst = 0.0;
    for (int trial = 0; trial < 50; ++trial) {
        MIEstimate est;
        for (int l = 0; l < 6; ++l) {
            const std::string name = "layer." + std::to_string(l);
            est.layer_order.push_back(name);
            for (int p = 0; p < 4; ++p)
                est.per_layer_per_piece[name].push_back(4.0 * static_cast<double>(rng() >> 11) * 0x1.0p-53);
        }
        const double c = 10.0 * (static_cast<double>(rng() >> 11) * 0x1.0p-53 - 0.5);
        MIEstimate shifted = est;
        for (auto& [name, vals] : shifted.per_layer_per_piece)
            for (auto& x : vals) x += c;
        for (auto* e : {&est, &shifted})
            for (const auto& [name, vals] : e->per_layer_per_piece)
                e->per_layer_mean[name] = std::accumulate(vals.begin(), vals.end(), 0.0) / static_cast<double>(vals.size());
        const auto a = compute_coefficients(est, 0.7), b = compute_coefficients(shifted, 0.7);
        for (const auto& [name, l] : a.lambdas) worst = std::max(worst, std::fabs(l - b.lambdas.at(name)));
    }
    check.expect(worst <= 1e-12, fmt("shift changed lambda by %.3g", worst));
    return check.done(fmt("lambda(0)=0.5, lambda(0.7,-1.5)=%.6f, monotone on 3x100 grid, shift drift %.2g", v, worst));
}

MergeRecipe recipe(MergeMethod m, double lambda = kDefaultLambda) {
    MergeRecipe r;
    r.method = m;
    r.global_lambda = lambda;
    r.seed = 17;
    return r;
}

Outcome plug_and_play() {
    Check check;
    std::int64_t worst = 0;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const auto base = acm::test::random_checkpoint(1000 + seed);
        const std::size_t n = 2 + seed % 3;
        std::vector<Checkpoint> tuned;
        for (std::size_t i = 0; i < n; ++i) tuned.push_back(acm::test::random_checkpoint(2000 + 10 * seed + i));
        const std::vector<LayerCoefficients> coeffs(n, acm::test::constant_coefficients(base, 0.7));
        for (auto [plain, acm_m] : {std::pair{MergeMethod::Ta, MergeMethod::AcmTa},
                                    std::pair{MergeMethod::Ties, MergeMethod::AcmTies}}) {
            const auto x = run_merge(recipe(plain, 0.7), base, tuned);
            const auto y = run_merge(recipe(acm_m), base, tuned, &coeffs);
            const auto d = acm::test::max_ulp(x, y);
            worst = std::max(worst, d);
            check.expect(d <= 1, fmt("seed %llu %s: %lld ULP", static_cast<unsigned long long>(seed),
                                     std::string(method_name(acm_m)).c_str(), static_cast<long long>(d)));
        }
    }
    return check.done(fmt("20 seeds, acm-ta vs ta and acm-ties vs ties, max %lld ULP", static_cast<long long>(worst)));
}

Outcome average_identity() {
    Check check;
    std::int64_t worst = 0;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const auto base = acm::test::random_checkpoint(3000 + seed);
        const std::vector<Checkpoint> pair{acm::test::random_checkpoint(4000 + seed), acm::test::random_checkpoint(5000 + seed)};
        const auto avg = run_merge(recipe(MergeMethod::Average), base, pair);
        for (const auto& [name, t] : avg) {
            const auto a = pair[0].at(name).to_f32(), b = pair[1].at(name).to_f32(), got = t.to_f32();
            for (std::size_t j = 0; j < a.size(); ++j) {
                // exact in double, one rounding to float
                const float mean = static_cast<float>((static_cast<double>(a[j]) + static_cast<double>(b[j])) / 2.0);
                worst = std::max(worst, acm::test::ulp_distance(got[j], mean));
            }
        }
        const std::vector<Checkpoint> one{pair[0]};
        auto r = recipe(MergeMethod::Ta, 1.0);
        const auto ta = run_merge(r, base, one);
        for (const auto& [name, t] : ta) check.expect(t == pair[0].at(name), fmt("ta(1, N=1) differs at %s", name.c_str()));
    }
    check.expect(worst <= 1, fmt("average off by %lld ULP", static_cast<long long>(worst)));
    return check.done(fmt("average within %lld ULP of the mean; ta(lambda=1, N=1) bit-exact, 20 seeds",
                          static_cast<long long>(worst)));
}

// Hand-coded TIES for one element column, used over every sign pattern.
struct TiesOracle {
    static std::vector<std::vector<double>> trim(std::vector<std::vector<double>> d, std::size_t keep) {
        for (auto& v : d) {
            std::vector<std::size_t> idx(v.size());
            std::iota(idx.begin(), idx.end(), std::size_t{0});
            std::stable_sort(idx.begin(), idx.end(), [&](auto a, auto b) { return std::fabs(v[a]) > std::fabs(v[b]); });
            for (std::size_t r = keep; r < idx.size(); ++r) v[idx[r]] = 0.0;
        }
        return d;
    }
    static std::vector<double> merge(const std::vector<std::vector<double>>& d, const std::vector<double>& lambda,
                                     std::vector<int>& elected) {
        const std::size_t n = d.front().size();
        std::vector<double> out(n, 0.0);
        elected.assign(n, 0);
        for (std::size_t j = 0; j < n; ++j) {
            double pos = 0.0, neg = 0.0;
            for (const auto& v : d) (v[j] > 0 ? pos : neg) += std::fabs(v[j]);
            if (pos == 0.0 && neg == 0.0) continue;
            elected[j] = pos >= neg ? 1 : -1;
            double sum = 0.0;
            int count = 0;
            for (std::size_t i = 0; i < d.size(); ++i)
                if ((d[i][j] > 0 && elected[j] > 0) || (d[i][j] < 0 && elected[j] < 0)) {
                    sum += lambda[i] * d[i][j];
                    ++count;
                }
            out[j] = sum / count;
        }
        return out;
    }
};

Outcome ties_invariants() {
    Check check;
    // density 1 with a single model is task arithmetic
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        const auto base = acm::test::random_checkpoint(6000 + seed);
        const std::vector<Checkpoint> one{acm::test::random_checkpoint(7000 + seed)};
        auto ties = recipe(MergeMethod::Ties, 0.7);
        ties.ties_density = 1.0;
        const auto d = acm::test::max_ulp(run_merge(ties, base, one), run_merge(recipe(MergeMethod::Ta, 0.7), base, one));
        check.expect(d == 0, fmt("ties(density 1, N=1) differs from ta by %lld ULP", static_cast<long long>(d)));
    }

    // merged signs follow the election, trim keeps exactly ceil(density * n)
    std::mt19937_64 rng(8);
    std::size_t trims = 0;
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t n = 1 + rng() % 97;
        const unsigned pct = 1 + static_cast<unsigned>(rng() % 100);
        const double density = pct / 100.0;
        std::vector<double> v(n);
        for (std::size_t j = 0; j < n; ++j) v[j] = (static_cast<double>(j + 1) + 0.5 * static_cast<double>(rng() % 1000) / 1000.0) * ((rng() & 1) ? 1 : -1);
        trim_values(v, density);
        const auto kept = static_cast<std::size_t>(std::count_if(v.begin(), v.end(), [](double x) { return x != 0.0; }));
        const std::size_t expect = (pct * n + 99) / 100;  // integer ceiling
        check.expect(kept == expect, fmt("trim kept %zu of %zu at density %.2f, want %zu", kept, n, density, expect));
        ++trims;
    }
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        const auto base = acm::test::random_checkpoint(8000 + seed, DType::F64);
        std::vector<Checkpoint> tuned;
        std::vector<TaskVector> tvs;
        for (int i = 0; i < 3; ++i) {
            tuned.push_back(acm::test::random_checkpoint(9000 + 10 * seed + i, DType::F64));
            tvs.push_back(trim(compute_task_vector(base, tuned.back()), kDefaultTiesDensity));
        }
        const auto elected = elect_signs(tvs);
        const auto out = run_merge(recipe(MergeMethod::Ties), base, tuned);
        for (const auto& [name, t] : out) {
            const auto o = t.to_f64(), b = base.at(name).to_f64();
            for (std::size_t j = 0; j < o.size(); ++j) {
                const double delta = o[j] - b[j];
                if (delta != 0.0)
                    check.expect(sign_of(delta) == elected.elected.at(name)[j], fmt("sign mismatch at %s[%zu]", name.c_str(), j));
            }
        }
    }

    // every sign pattern of 3 models x 4 elements, with and without trimming
    const double mag[3][4] = {{1.0, 2.0, 0.5, 3.0}, {1.0, 1.5, 2.5, 0.25}, {2.0, 0.5, 2.5, 3.0}};
    const std::vector<double> lambdas{0.9, 0.6, 0.3};
    std::size_t patterns = 0;
    for (std::uint32_t code = 0; code < 531441; ++code) {
        std::vector<std::vector<double>> d(3, std::vector<double>(4));
        std::uint32_t c = code;
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 4; ++j, c /= 3) d[i][j] = (static_cast<int>(c % 3) - 1) * mag[i][j];
        for (const auto& [density, keep] : {std::pair{1.0, std::size_t{4}}, std::pair{0.5, std::size_t{2}}}) {
            auto lib = d;
            for (auto& v : lib) trim_values(v, density);
            const auto lib_signs = elect_layer_signs(lib);
            const auto lib_out = disjoint_layer_merge(lib, lib_signs, lambdas);
            std::vector<int> oracle_signs;
            const auto oracle_out = TiesOracle::merge(TiesOracle::trim(d, keep), lambdas, oracle_signs);
            for (int j = 0; j < 4; ++j) {
                check.expect(lib_signs[j] == oracle_signs[j], fmt("pattern %u: elected sign differs", code));
                check.expect(lib_out[j] == oracle_out[j], fmt("pattern %u: merged value differs", code));
                if (lib_out[j] != 0.0) check.expect(sign_of(lib_out[j]) == lib_signs[j], fmt("pattern %u: sign", code));
            }
        }
        ++patterns;
    }
    return check.done(fmt("density-1 = ta, %zu trim counts, elected signs held, %zu sign patterns x 2 densities match",
                          trims, patterns));
}

Outcome dare_statistics() {
    Check check;
    const double rate = 0.3;
    {
        std::vector<double> v{0.7, -0.7, 0.7, 0.7, -0.7, 0.7, 0.7, 0.7};
        const auto orig = v;
        auto same = v;
        dare_values(same, 0.0, 5, "x");
        check.expect(same == orig, "r = 0 changed values");
        dare_values(v, rate, 5, "x");
        for (std::size_t j = 0; j < v.size(); ++j)
            check.expect(v[j] == 0.0 || std::fabs(v[j]) == 1.0, fmt("survivor %zu is %.17g", j, v[j]));
        const auto base = acm::test::random_checkpoint(1);
        const std::vector<Checkpoint> tuned{acm::test::random_checkpoint(2), acm::test::random_checkpoint(3)};
        auto dare = recipe(MergeMethod::DareTa);
        dare.dare_drop_rate = 0.0;
        check.expect(run_merge(dare, base, tuned) .names() == base.names() &&
                         acm::test::max_ulp(run_merge(dare, base, tuned), run_merge(recipe(MergeMethod::Ta), base, tuned)) == 0,
                     "dare-ta at r = 0 differs from ta");
    }

    toy::Gaussian g(4);
    std::vector<double> delta(64);
    for (auto& d : delta) d = g();
    const int seeds = 10000;
    std::vector<double> sum(delta.size(), 0.0);
    for (int s = 0; s < seeds; ++s) {
        auto v = delta;
        dare_values(v, rate, static_cast<std::uint64_t>(s), "layer.0.weight");
        for (std::size_t j = 0; j < v.size(); ++j) sum[j] += v[j];
    }
    double worst_z = 0.0;
    for (std::size_t j = 0; j < delta.size(); ++j) {
        const double mean = sum[j] / seeds;
        const double sigma = std::fabs(delta[j]) * std::sqrt(rate / (1.0 - rate) / seeds);
        const double z = std::fabs(mean - delta[j]) / sigma;
        worst_z = std::max(worst_z, z);
        check.expect(z <= 4.0, fmt("element %zu mean %.5f vs %.5f (%.2f sigma)", j, mean, delta[j], z));
    }

    const auto base = acm::test::random_checkpoint(11);
    const std::vector<Checkpoint> tuned{acm::test::random_checkpoint(12), acm::test::random_checkpoint(13),
                                        acm::test::random_checkpoint(14)};
    for (auto m : {MergeMethod::DareTa, MergeMethod::DareTies}) {
        const auto ref = run_merge(recipe(m), base, tuned, nullptr, {.threads = 1});
        for (unsigned threads : {2u, 3u, 5u, 8u, 16u})
            check.expect(run_merge(recipe(m), base, tuned, nullptr, {.threads = threads}) == ref,
                         fmt("%s differs at %u threads", std::string(method_name(m)).c_str(), threads));
    }
    return check.done(fmt("r=0 identity, 0.7 -> 1.0 at r=0.3, %d seeds worst %.2f sigma, threads {1,2,3,5,8,16} identical",
                          seeds, worst_z));
}

Outcome figure4_pattern() {
    Check check;
    const ToyModelSpec spec{{32, 32, 32, 32, 32}, ActivationFn::Relu, true, true};
    double min_gap = INFINITY;
    for (std::uint64_t seed = 1; seed <= 10; ++seed) {
        const auto pair = toy::shared_edge_pair(spec, 16, 1.0, seed);
        const auto calib = toy::random_calibration(16, 128, 32, seed + 100);
        const auto pt = toy_forward(spec, pair.pretrained, calib);
        const auto ft = toy_forward(spec, pair.finetuned, calib);
        const auto mi = layer_mi(pt, ft);
        const auto coeffs = compute_coefficients(mi, kDefaultTemperature);
        double edge_mi = INFINITY, mid_mi = -INFINITY, edge_l = -INFINITY, mid_l = INFINITY;
        for (const auto& layer : mi.layer_order) {
            const bool edge = layer == "embed" || layer == "lm_head";
            const double m = mi.per_layer_mean.at(layer), l = coeffs.lambdas.at(layer);
            if (edge) {
                edge_mi = std::min(edge_mi, m);
                edge_l = std::max(edge_l, l);
            } else {
                mid_mi = std::max(mid_mi, m);
                mid_l = std::min(mid_l, l);
            }
        }
        min_gap = std::min(min_gap, edge_mi - mid_mi);
        check.expect(edge_mi > mid_mi, fmt("seed %llu: edge MI %.4f <= middle %.4f", static_cast<unsigned long long>(seed), edge_mi, mid_mi));
        check.expect(edge_l < mid_l, fmt("seed %llu: edge lambda %.4f >= middle %.4f", static_cast<unsigned long long>(seed), edge_l, mid_l));
    }
    return check.done(fmt("10/10 seeds: embed/head MI above every middle layer (min gap %.3f nats), lambda below", min_gap));
}

double brute_force_two_means(const EmbeddingSet& e) {
    double best = INFINITY;
    const std::size_t n = e.items;
    for (std::uint32_t mask = 1; mask < (1u << (n - 1)); ++mask) {  // item n-1 always in cluster 0
        double cost = 0.0;
        for (int side = 0; side < 2; ++side) {
            std::vector<double> mean(e.dim, 0.0);
            double count = 0;
            for (std::size_t i = 0; i < n; ++i)
                if (((mask >> i) & 1u) == static_cast<std::uint32_t>(side)) {
                    count += 1;
                    for (std::size_t d = 0; d < e.dim; ++d) mean[d] += e.row(i)[d];
                }
            for (auto& m : mean) m /= count;
            for (std::size_t i = 0; i < n; ++i)
                if (((mask >> i) & 1u) == static_cast<std::uint32_t>(side))
                    for (std::size_t d = 0; d < e.dim; ++d) cost += (e.row(i)[d] - mean[d]) * (e.row(i)[d] - mean[d]);
        }
        best = std::min(best, cost);
    }
    return best;
}

EmbeddingSet random_points(std::size_t n, std::size_t dim, std::uint64_t seed) {
    toy::Gaussian g(seed);
    EmbeddingSet e;
    e.items = n;
    e.dim = dim;
    const std::size_t centres = 1 + seed % 5;
    std::vector<double> c(centres * dim);
    for (auto& v : c) v = 4.0 * g();
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t d = 0; d < dim; ++d) e.vectors.push_back(c[(i % centres) * dim + d] + g());
        e.item_ids.push_back(std::to_string(i));
    }
    return e;
}

Outcome kmeans_properties() {
    Check check;
    std::size_t iterations = 0;
    for (std::uint64_t inst = 0; inst < 100; ++inst) {
        const auto e = random_points(50 + inst * 7 % 300, 2 + inst % 6, inst);
        const auto km = kmeans(e, {.k = 2 + inst % 19, .seed = inst});
        for (std::size_t t = 1; t < km.inertia_history.size(); ++t)
            check.expect(km.inertia_history[t] <= km.inertia_history[t - 1],
                         fmt("instance %llu: inertia rose at iteration %zu", static_cast<unsigned long long>(inst), t));
        iterations += km.iterations;
    }
    for (std::size_t n : {200u, 245u, 333u, 1000u, 1234u, 4005u}) {
        const auto e = random_points(n, 8, n);
        const SamplePlan plan;  // k = 20, fraction = 0.10
        const auto ids = even_sample(e, kmeans(e, plan), plan);
        const std::size_t want = (n + 5) / 10;  // round(n / 10), halves up
        check.expect(ids.size() == want, fmt("n=%zu: %zu samples, want %zu", n, ids.size(), want));
        check.expect(std::set<std::string>(ids.begin(), ids.end()).size() == ids.size(), "duplicate sample ids");
    }
    int matched = 0;
    for (std::uint64_t inst = 0; inst < 60; ++inst) {
        const auto e = random_points(4 + inst % 9, 1 + inst % 3, 500 + inst);
        const auto km = kmeans(e, {.k = 2, .seed = inst, .n_init = 10});
        const double best = brute_force_two_means(e);
        const bool ok = std::fabs(km.inertia - best) <= 1e-9 * std::max(1.0, best);
        matched += ok;
        check.expect(ok, fmt("instance %llu: %.9g vs optimum %.9g", static_cast<unsigned long long>(inst), km.inertia, best));
    }
    return check.done(fmt("100 instances monotone (%zu iterations), exact round(0.1n) samples, %d/60 brute-force optima",
                          iterations, matched));
}

int run_cli(std::vector<std::string> args) {
    args.insert(args.begin(), "acm");
    std::vector<const char*> argv;
    for (const auto& a : args) argv.push_back(a.c_str());
    std::ostringstream out, err;
    const int code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
    if (code) std::fprintf(stderr, "%s", err.str().c_str());
    return code;
}

Outcome end_to_end_determinism() {
    Check check;
    TempDir dir;
    const auto ws = dir / "ws";
    check.expect(run_cli({"--seed", "9", "synth", "--out-dir", ws.string(), "--dims", "24", "24", "24", "24", "--shared",
                          "12", "--pieces", "8", "--positions", "96"}) == 0,
                 "synth failed");
    auto p = [&](const std::string& name) { return (ws / name).string(); };

    // each run works in its own directory under identical relative names, so
    // recipes and the provenance they leave in the merged header match
    std::vector<std::string> digests;
    int run_id = 0;
    for (const char* threads : {"1", "8", "1", "8"}) {
        const auto run = ws / ("run" + std::to_string(run_id++));
        std::filesystem::create_directories(run);
        auto r = [&](const std::string& name) { return (run / name).string(); };
        check.expect(run_cli({"--threads", threads, "trace", "--spec", p("spec.json"), "--weights", p("base.safetensors"),
                              "--calib", p("calib.safetensors"), "--out", r("pt.safetensors")}) == 0,
                     "trace failed");
        nlohmann::json recipe = {{"method", "acm-ties"}, {"base", "../base.safetensors"},
                                 {"models", {"../ft0.safetensors", "../ft1.safetensors"}}, {"seed", 9}};
        for (int i = 0; i < 2; ++i) {
            const std::string ft = "ft" + std::to_string(i);
            const std::string coeffs = "c" + std::to_string(i) + ".json";
            check.expect(run_cli({"--threads", threads, "trace", "--spec", p("spec.json"), "--weights", p(ft + ".safetensors"),
                                  "--calib", p("calib.safetensors"), "--out", r(ft + "-trace.safetensors")}) == 0,
                         "trace failed");
            check.expect(run_cli({"--threads", threads, "coeffs", "--pt", r("pt.safetensors"), "--ft",
                                  r(ft + "-trace.safetensors"), "--out", r(coeffs)}) == 0,
                         "coeffs failed");
            recipe["coefficients_path"].push_back(coeffs);
            check.expect(acm::test::read_bytes(run / coeffs) == acm::test::read_bytes(ws / "run0" / coeffs),
                         "coefficients differ between runs");
        }
        std::ofstream(run / "recipe.json") << recipe.dump();
        check.expect(run_cli({"--threads", threads, "merge", "--recipe", r("recipe.json"), "--out",
                              r("merged.safetensors")}) == 0,
                     "merge failed");
        check.expect(acm::test::read_bytes(run / "pt.safetensors") == acm::test::read_bytes(ws / "run0" / "pt.safetensors"),
                     "traces differ between runs");
        digests.push_back(sha256_file(run / "merged.safetensors"));
    }
    bool same = true;
    for (const auto& d : digests) same = same && d == digests.front();
    check.expect(same, "merged checkpoints differ across runs/thread counts");
    return check.done("trace -> coeffs -> acm-ties merge, 2 runs x threads {1, 8}: merged sha256 " +
                      digests.front().substr(0, 16) + "... identical");
}

struct Criterion {
    int id;
    const char* name;
    double budget_s;  // 0: no runtime bound
    std::function<Outcome()> run;
};

}  // namespace

int main() {
    const std::vector<Criterion> criteria{
        {1, "MI oracle equivalence", 1.0, mi_oracle_equivalence},
        {2, "MI calibration", 5.0, mi_calibration},
        {3, "sigmoid coefficient arithmetic", 0.0, sigmoid_arithmetic},
        {4, "plug-and-play degeneracy", 0.0, plug_and_play},
        {5, "average / task-arithmetic identity", 0.0, average_identity},
        {6, "TIES invariants", 0.0, ties_invariants},
        {7, "DARE statistics", 0.0, dare_statistics},
        {8, "edge vs middle layer pattern", 30.0, figure4_pattern},
        {9, "k-means and even sampling", 0.0, kmeans_properties},
        {10, "end-to-end determinism", 60.0, end_to_end_determinism},
    };
    int failed = 0;
    for (const auto& c : criteria) {
        const auto start = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = c.run();
        } catch (const std::exception& e) {
            o = {false, std::string("threw: ") + e.what()};
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        if (c.budget_s > 0 && secs > c.budget_s) {
            o.ok = false;
            o.detail += fmt(" [over the %.0f s budget]", c.budget_s);
        }
        failed += !o.ok;
        std::printf("%s  [%2d] %-36s %8.3f s  %s\n", o.ok ? "PASS" : "FAIL", c.id, c.name, secs, o.detail.c_str());
        std::fflush(stdout);
    }
    std::printf("%d/%zu criteria passed\n", static_cast<int>(criteria.size()) - failed, criteria.size());
    return failed ? 1 : 0;
}
