// Copyright 2026 The ACM Merge Authors
// SPDX-License-Identifier: Apache-2.0

// Command-line front end. Kept header-only so the tests can drive it
// in-process through run().

#pragma once

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "acm/acm.hpp"

namespace acm::cli {

namespace fs = std::filesystem;
using nlohmann::json;

inline constexpr int kExitOk = 0;
inline constexpr int kExitInput = 2;
inline constexpr int kExitConfig = 3;
inline constexpr int kExitIo = 4;

inline int exit_code(ErrorKind kind) {
    switch (kind) {
    case ErrorKind::Configuration: return kExitConfig;
    case ErrorKind::Io: return kExitIo;
    default: return kExitInput;
    }
}

// ---------------------------------------------------------------------------
// Run manifests

struct RunManifest {
    std::string command;
    json arguments = json::object();
    std::map<std::string, std::string> input_hashes;   // path -> SHA-256 of file bytes
    std::map<std::string, std::string> output_hashes;  // path -> SHA-256 of file bytes
    std::string tool_version = kVersion;
    std::uint64_t seed = 0;

    void add_input(const fs::path& p) { input_hashes[p.string()] = sha256_file(p); }
    void add_output(const fs::path& p) { output_hashes[p.string()] = sha256_file(p); }

    json to_json() const {
        return {{"command", command},           {"arguments", arguments},
                {"input_hashes", input_hashes}, {"output_hashes", output_hashes},
                {"tool_version", tool_version}, {"seed", seed}};
    }

    /// Digest of every field except the timestamp.
    std::string digest() const {
        Sha256 h;
        h.update(std::string_view(to_json().dump()));
        return h.hex_digest();
    }
};

inline std::string utc_timestamp() {
    const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    std::ostringstream s;
    s << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
    return s.str();
}

inline fs::path manifest_path(const fs::path& out) { return fs::path(out.string() + ".manifest.json"); }

inline void write_text(const fs::path& path, const std::string& text) {
    const fs::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) fail(ErrorKind::Io, "cannot write '" + path.string() + "'");
        out << text;
        if (!out) fail(ErrorKind::Io, "write to '" + path.string() + "' failed");
    }
    std::error_code ec;
    fs::rename(tmp, path, ec);
    if (ec) fail(ErrorKind::Io, "cannot rename into '" + path.string() + "': " + ec.message());
}

inline void write_manifest(const RunManifest& m, const fs::path& out) {
    json j = m.to_json();
    j["manifest_digest"] = m.digest();
    j["timestamp"] = utc_timestamp();
    write_text(manifest_path(out), j.dump(2) + "\n");
}

inline json read_json(const fs::path& path, ErrorKind bad_content) {
    std::ifstream in(path);
    if (!in) fail(ErrorKind::Io, "cannot open '" + path.string() + "'");
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        fail(bad_content, path.string() + ": " + e.what());
    }
}

// ---------------------------------------------------------------------------
// Commands

struct Globals {
    unsigned threads = 0;
    std::uint64_t seed = 0;
    bool seed_given = false;
    std::ostream* out = &std::cout;
};

struct DiffArgs {
    std::string base, model, out;
};

inline int cmd_diff(const DiffArgs& a, const Globals& g) {
    const auto base = load_checkpoint(a.base);
    const auto model = load_checkpoint(a.model);
    save_task_vector(compute_task_vector(base, model, resolve_threads(g.threads)), a.out);

    RunManifest m{.command = "diff", .arguments = {{"base", a.base}, {"model", a.model}, {"out", a.out}}};
    m.seed = g.seed;
    m.add_input(a.base);
    m.add_input(a.model);
    m.add_output(a.out);
    write_manifest(m, a.out);
    return kExitOk;
}

struct ApplyArgs {
    std::string base, out;
    std::vector<std::string> vectors, coeffs;
    double lambda = 1.0;
    bool no_normalize = false;
};

inline int cmd_apply(const ApplyArgs& a, const Globals& g) {
    const auto base = load_checkpoint(a.base);
    std::vector<TaskVector> vectors;
    for (const auto& p : a.vectors) vectors.push_back(load_task_vector(p));

    std::vector<LayerLambdas> lambdas;
    if (a.coeffs.empty()) {
        lambdas.assign(vectors.size(), uniform_lambdas(base, a.lambda));
    } else {
        if (a.coeffs.size() != vectors.size())
            fail(ErrorKind::Configuration, "--coeffs must be given once per --vector");
        for (const auto& p : a.coeffs) {
            const auto c = read_coefficients(p);
            LayerLambdas l;
            for (const auto& [name, _] : base) {
                const auto v = c.lookup(name);
                if (!v) fail(ErrorKind::Configuration, p + " has no coefficient for '" + name + "'");
                l.emplace(name, *v);
            }
            lambdas.push_back(std::move(l));
        }
    }
    auto merged = apply_task_vectors(base, vectors, lambdas,
                                     {.normalize_by_n = !a.no_normalize, .threads = resolve_threads(g.threads)});
    save_checkpoint(merged, a.out);

    RunManifest m{.command = "apply"};
    m.arguments = {{"base", a.base},     {"vectors", a.vectors},          {"coeffs", a.coeffs},
                   {"lambda", a.lambda}, {"normalize_by_n", !a.no_normalize}, {"out", a.out}};
    m.seed = g.seed;
    m.add_input(a.base);
    for (const auto& p : a.vectors) m.add_input(p);
    for (const auto& p : a.coeffs) m.add_input(p);
    m.add_output(a.out);
    write_manifest(m, a.out);
    return kExitOk;
}

struct TraceArgs {
    std::string spec, weights, calib, out;
};

inline int cmd_trace(const TraceArgs& a, const Globals& g) {
    const auto spec = ToyModelSpec::from_json(read_json(a.spec, ErrorKind::Configuration));
    const auto weights = load_checkpoint(a.weights);
    const auto calib = read_calibration(a.calib);
    write_trace(toy_forward(spec, weights, calib, resolve_threads(g.threads)), a.out);

    RunManifest m{.command = "trace",
                  .arguments = {{"spec", a.spec}, {"weights", a.weights}, {"calib", a.calib}, {"out", a.out}}};
    m.seed = g.seed;
    m.add_input(a.spec);
    m.add_input(a.weights);
    m.add_input(a.calib);
    m.add_output(a.out);
    write_manifest(m, a.out);
    return kExitOk;
}

struct CoeffsArgs {
    std::string pt, ft, out;
    double t = kDefaultTemperature;
    int bins = kDefaultBins;
    bool pooled = false;
};

inline fs::path mi_report_path(const fs::path& out) { return fs::path(out.string() + ".mi.json"); }

inline int cmd_coeffs(const CoeffsArgs& a, const Globals& g) {
    if (!std::isfinite(a.t)) fail(ErrorKind::Configuration, "--t must be finite");
    const auto pt = read_trace(a.pt);
    const auto ft = read_trace(a.ft);
    const auto mi = layer_mi(pt, ft, {.bins = a.bins, .pooled = a.pooled, .threads = resolve_threads(g.threads)});
    const auto coeffs = compute_coefficients(mi, a.t);
    write_coefficients(coeffs, a.out);

    json report = mi.to_json();
    report["pt_model_id"] = pt.model_id;
    report["t"] = a.t;
    report["shift"] = coeffs.shift;
    report["lambdas"] = coeffs.lambdas;
    write_text(mi_report_path(a.out), report.dump(2) + "\n");

    RunManifest m{.command = "coeffs"};
    m.arguments = {{"pt", a.pt}, {"ft", a.ft}, {"t", a.t}, {"bins", a.bins}, {"pooled", a.pooled}, {"out", a.out}};
    m.seed = g.seed;
    m.add_input(a.pt);
    m.add_input(a.ft);
    m.add_output(a.out);
    m.add_output(mi_report_path(a.out));
    write_manifest(m, a.out);
    return kExitOk;
}

struct MergeArgs {
    std::string recipe, out, base;
    std::vector<std::string> models;
};

/// Relative paths inside a recipe are taken relative to the recipe file.
inline std::string resolve_against(const fs::path& recipe, const std::string& p) {
    const fs::path path(p);
    if (path.is_absolute()) return p;
    return (recipe.parent_path() / path).lexically_normal().string();
}

inline int cmd_merge(const MergeArgs& a, const Globals& g) {
    auto recipe = MergeRecipe::from_json(read_json(a.recipe, ErrorKind::Configuration));
    if (g.seed_given) recipe.seed = g.seed;
    std::string base_path = a.base.empty() ? resolve_against(a.recipe, recipe.base_path) : a.base;
    std::vector<std::string> model_paths = a.models;
    if (model_paths.empty())
        for (const auto& p : recipe.model_paths) model_paths.push_back(resolve_against(a.recipe, p));
    if (recipe.base_path.empty() && a.base.empty())
        fail(ErrorKind::Configuration, "no base checkpoint: set \"base\" in the recipe or pass --base");
    if (model_paths.empty())
        fail(ErrorKind::Configuration, "no models: set \"models\" in the recipe or pass --model");

    std::vector<std::string> coeff_paths;
    for (const auto& p : recipe.coefficients_paths) coeff_paths.push_back(resolve_against(a.recipe, p));
    if (uses_acm(recipe.method) && coeff_paths.size() == 1 && model_paths.size() > 1)
        coeff_paths.assign(model_paths.size(), coeff_paths.front());

    const auto base = load_checkpoint(base_path);
    std::vector<Checkpoint> models;
    for (const auto& p : model_paths) models.push_back(load_checkpoint(p));
    std::vector<LayerCoefficients> coeffs;
    if (uses_acm(recipe.method))
        for (const auto& p : coeff_paths) coeffs.push_back(read_coefficients(p));

    stream_merge(recipe, base, models, uses_acm(recipe.method) ? &coeffs : nullptr, a.out,
                 {.threads = resolve_threads(g.threads)});

    RunManifest m{.command = "merge"};
    m.arguments = {{"recipe", a.recipe}, {"resolved_recipe", recipe.to_json()}, {"base", base_path},
                   {"models", model_paths}, {"out", a.out}};
    m.seed = recipe.seed;
    m.add_input(a.recipe);
    m.add_input(base_path);
    for (const auto& p : model_paths) m.add_input(p);
    if (uses_acm(recipe.method))
        for (const auto& p : coeff_paths) m.add_input(p);
    m.add_output(a.out);
    write_manifest(m, a.out);
    return kExitOk;
}

struct SampleArgs {
    std::string embeddings, out, mode = "equal";
    std::size_t k = 20;
    double fraction = 0.10;
    std::size_t max_iters = 100;
    std::size_t n_init = 1;
};

inline int cmd_sample_calib(const SampleArgs& a, const Globals& g) {
    const auto e = read_embeddings(a.embeddings);
    SamplePlan plan;
    plan.k = a.k;
    plan.fraction = a.fraction;
    plan.seed = g.seed;
    plan.max_iters = a.max_iters;
    plan.n_init = a.n_init;
    if (a.mode == "equal")
        plan.mode = QuotaMode::Equal;
    else if (a.mode == "proportional")
        plan.mode = QuotaMode::Proportional;
    else
        fail(ErrorKind::Configuration, "--mode must be 'equal' or 'proportional'");
    // too little data is an input problem here, not a bad flag
    if (a.k > e.items)
        fail(ErrorKind::InsufficientData, "k = " + std::to_string(a.k) + " exceeds the " + std::to_string(e.items) +
                                              " items in '" + a.embeddings + "'");

    const auto km = kmeans(e, plan, resolve_threads(g.threads));
    const auto ids = even_sample(e, km, plan);
    std::vector<std::size_t> sizes(km.k, 0);
    for (auto c : km.assignment) ++sizes[c];
    const json result = {{"ids", ids},          {"k", km.k},
                         {"fraction", a.fraction}, {"seed", g.seed},
                         {"mode", a.mode},      {"cluster_sizes", sizes},
                         {"inertia", km.inertia}, {"iterations", km.iterations},
                         {"converged", km.converged}};
    write_text(a.out, result.dump(2) + "\n");

    RunManifest m{.command = "sample-calib"};
    m.arguments = {{"embeddings", a.embeddings}, {"k", a.k},         {"fraction", a.fraction}, {"mode", a.mode},
                   {"max_iters", a.max_iters},   {"n_init", a.n_init}, {"out", a.out}};
    m.seed = g.seed;
    m.add_input(a.embeddings);
    m.add_output(a.out);
    write_manifest(m, a.out);
    return kExitOk;
}

struct InspectArgs {
    std::string file;
    bool as_json = false;
    std::string sort = "norm";
};

inline int cmd_inspect(const InspectArgs& a, const Globals& g) {
    const auto c = load_checkpoint(a.file);
    const bool vector = is_task_vector(c);
    const auto report = vector ? salience_report(task_vector_from_checkpoint(c)) : salience_report(c);
    std::vector<std::string> order;
    if (a.sort == "norm")
        order = report.sorted_by_norm();
    else if (a.sort == "name")
        for (const auto& [name, _] : report.per_layer) order.push_back(name);
    else
        fail(ErrorKind::Configuration, "--sort must be 'norm' or 'name'");

    std::ostream& out = *g.out;
    if (a.as_json) {
        json layers = json::array();
        for (const auto& name : order) {
            const auto& s = report.per_layer.at(name);
            layers.push_back({{"layer", name},
                              {"dtype", dtype_name(c.at(name).dtype())},
                              {"shape", c.at(name).shape()},
                              {"frobenius_norm", s.frobenius_norm},
                              {"max_abs", s.max_abs},
                              {"param_count", s.param_count}});
        }
        json doc = {{"file", a.file}, {"kind", vector ? "task_vector" : "checkpoint"}, {"layers", layers}};
        out << doc.dump(2) << '\n';
        return kExitOk;
    }
    out << a.file << " (" << (vector ? "task vector" : "checkpoint") << ", " << c.size() << " tensors)\n";
    std::size_t width = 5;
    for (const auto& name : order) width = std::max(width, name.size());
    out << std::left << std::setw(static_cast<int>(width)) << "layer" << "  " << std::setw(5) << "dtype" << "  "
        << std::setw(14) << "shape" << std::right << std::setw(12) << "params" << std::setw(16) << "frobenius"
        << std::setw(16) << "max_abs" << '\n';
    for (const auto& name : order) {
        const auto& s = report.per_layer.at(name);
        out << std::left << std::setw(static_cast<int>(width)) << name << "  " << std::setw(5)
            << dtype_name(c.at(name).dtype()) << "  " << std::setw(14) << shape_to_string(c.at(name).shape())
            << std::right << std::setw(12) << s.param_count << std::setw(16) << std::setprecision(8)
            << s.frobenius_norm << std::setw(16) << s.max_abs << '\n';
    }
    return kExitOk;
}

struct SynthArgs {
    std::string out_dir;
    std::vector<std::size_t> dims{16, 16, 16, 16};
    std::size_t shared = 8;
    std::size_t models = 2;
    std::size_t pieces = 8;
    std::size_t positions = 64;
    std::size_t items = 400;
    double divergence = 0.5;
};

/// Writes a self-contained toy workspace: spec, base and fine-tuned weights,
/// calibration set, embeddings and ready-to-run recipes.
inline int cmd_synth(const SynthArgs& a, const Globals& g) {
    if (a.models == 0) fail(ErrorKind::Configuration, "--models must be positive");
    const fs::path dir(a.out_dir);
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) fail(ErrorKind::Io, "cannot create '" + dir.string() + "': " + ec.message());

    const ToyModelSpec spec{a.dims, ActivationFn::Relu, true, true};
    write_text(dir / "spec.json", spec.to_json().dump(2) + "\n");
    std::vector<std::string> model_names;
    for (std::size_t i = 0; i < a.models; ++i) {
        const auto pair = toy::shared_edge_pair(spec, a.shared, a.divergence, g.seed, i);
        if (i == 0) save_checkpoint(pair.pretrained, dir / "base.safetensors");
        model_names.push_back("ft" + std::to_string(i) + ".safetensors");
        save_checkpoint(pair.finetuned, dir / model_names.back());
    }
    write_calibration(toy::random_calibration(a.pieces, a.positions, a.dims.front(), g.seed + 7), dir / "calib.safetensors");

    EmbeddingSet e;
    e.items = a.items;
    e.dim = 8;
    toy::Gaussian gauss(g.seed + 11);
    std::vector<double> centres(20 * e.dim);
    for (auto& c : centres) c = 6.0 * gauss();
    for (std::size_t i = 0; i < e.items; ++i) {
        for (std::size_t d = 0; d < e.dim; ++d) e.vectors.push_back(centres[(i % 20) * e.dim + d] + gauss());
        e.item_ids.push_back("sample-" + std::to_string(i));
    }
    write_embeddings(e, dir / "embeddings.safetensors");

    MergeRecipe ties;
    ties.method = MergeMethod::Ties;
    ties.seed = g.seed;
    ties.base_path = "base.safetensors";
    ties.model_paths = model_names;
    write_text(dir / "recipe-ties.json", ties.to_json().dump(2) + "\n");
    MergeRecipe acm_ties = ties;
    acm_ties.method = MergeMethod::AcmTies;
    for (std::size_t i = 0; i < a.models; ++i) acm_ties.coefficients_paths.push_back("coeffs" + std::to_string(i) + ".json");
    write_text(dir / "recipe-acm-ties.json", acm_ties.to_json().dump(2) + "\n");
    *g.out << "wrote toy workspace to " << dir.string() << '\n';
    return kExitOk;
}

// ---------------------------------------------------------------------------

/// Parses argv and runs one subcommand. Returns the process exit code;
/// errors are reported on `err`.
inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
    CLI::App app{"Layer-wise model merging with mutual-information coefficients", "acm"};
    app.require_subcommand(1);
    app.fallthrough();  // --threads/--seed also accepted after the subcommand
    app.set_version_flag("--version", std::string(kVersion));

    Globals g;
    g.out = &out;
    app.add_option("--threads", g.threads, "Worker threads (default: CM_THREADS, else all cores)")->capture_default_str();
    auto* seed_opt = app.add_option("--seed", g.seed, "Seed for every random choice")->capture_default_str();

    DiffArgs diff;
    auto* c_diff = app.add_subcommand("diff", "Task vector of a fine-tuned model against its base");
    c_diff->add_option("--base", diff.base, "Base checkpoint")->required();
    c_diff->add_option("--model", diff.model, "Fine-tuned checkpoint")->required();
    c_diff->add_option("--out", diff.out, "Task vector file")->required();

    ApplyArgs apply;
    auto* c_apply = app.add_subcommand("apply", "Add scaled task vectors to a base checkpoint");
    c_apply->add_option("--base", apply.base, "Base checkpoint")->required();
    c_apply->add_option("--vector", apply.vectors, "Task vector file (repeatable)")->required();
    auto* lambda_opt = c_apply->add_option("--lambda", apply.lambda, "Coefficient for every layer")->capture_default_str();
    c_apply->add_option("--coeffs", apply.coeffs, "Layer coefficients, one per --vector")->excludes(lambda_opt);
    c_apply->add_flag("--no-normalize", apply.no_normalize, "Do not divide the sum by the number of vectors");
    c_apply->add_option("--out", apply.out, "Output checkpoint")->required();

    TraceArgs trace;
    auto* c_trace = app.add_subcommand("trace", "Record layer activations of a toy model");
    c_trace->add_option("--spec", trace.spec, "Toy model spec (JSON)")->required();
    c_trace->add_option("--weights", trace.weights, "Model weights")->required();
    c_trace->add_option("--calib", trace.calib, "Calibration set")->required();
    c_trace->add_option("--out", trace.out, "Trace file")->required();

    CoeffsArgs coeffs;
    auto* c_coeffs = app.add_subcommand("coeffs", "Layer coefficients from a pre-trained/fine-tuned trace pair");
    c_coeffs->add_option("--pt", coeffs.pt, "Pre-trained model trace")->required();
    c_coeffs->add_option("--ft", coeffs.ft, "Fine-tuned model trace")->required();
    c_coeffs->add_option("-t,--t", coeffs.t, "Temperature")->capture_default_str();
    c_coeffs->add_option("--bins", coeffs.bins, "Quantile bins per side")->capture_default_str()->check(CLI::Range(2, 1 << 16));
    c_coeffs->add_flag("--pooled", coeffs.pooled, "One estimate per layer over all pieces");
    c_coeffs->add_option("--out", coeffs.out, "Coefficients file (JSON)")->required();

    MergeArgs merge;
    auto* c_merge = app.add_subcommand("merge", "Merge checkpoints as described by a recipe");
    c_merge->add_option("--recipe", merge.recipe, "Recipe (JSON)")->required();
    c_merge->add_option("--base", merge.base, "Base checkpoint (overrides the recipe)");
    c_merge->add_option("--model", merge.models, "Fine-tuned checkpoint (repeatable, overrides the recipe)");
    c_merge->add_option("--out", merge.out, "Merged checkpoint")->required();

    SampleArgs sample;
    auto* c_sample = app.add_subcommand("sample-calib", "Cluster embeddings and draw an even calibration subset");
    c_sample->add_option("--embeddings", sample.embeddings, "Embedding file")->required();
    c_sample->add_option("--k", sample.k, "Clusters")->capture_default_str();
    c_sample->add_option("--fraction", sample.fraction, "Fraction of items to keep")->capture_default_str();
    c_sample->add_option("--mode", sample.mode, "Quota mode: equal or proportional")->capture_default_str();
    c_sample->add_option("--max-iters", sample.max_iters, "Lloyd iterations")->capture_default_str();
    c_sample->add_option("--n-init", sample.n_init, "k-means++ restarts")->capture_default_str();
    c_sample->add_option("--out", sample.out, "Selected ids (JSON)")->required();

    InspectArgs inspect;
    auto* c_inspect = app.add_subcommand("inspect", "Per-layer salience of a checkpoint or task vector");
    c_inspect->add_option("file", inspect.file, "File to inspect")->required();
    c_inspect->add_flag("--json", inspect.as_json, "JSON output");
    c_inspect->add_option("--sort", inspect.sort, "Row order: norm or name")->capture_default_str();

    SynthArgs synth;
    auto* c_synth = app.add_subcommand("synth", "Write a toy workspace for trying the pipeline");
    c_synth->add_option("--out-dir", synth.out_dir, "Destination directory")->required();
    c_synth->add_option("--dims", synth.dims, "Layer widths (all equal)")->capture_default_str();
    c_synth->add_option("--shared", synth.shared, "Units shared by every fine-tune")->capture_default_str();
    c_synth->add_option("--models", synth.models, "Fine-tuned models")->capture_default_str();
    c_synth->add_option("--pieces", synth.pieces, "Calibration pieces")->capture_default_str();
    c_synth->add_option("--positions", synth.positions, "Positions per piece")->capture_default_str();
    c_synth->add_option("--items", synth.items, "Embedding rows")->capture_default_str();
    c_synth->add_option("--divergence", synth.divergence, "Fine-tuning noise scale")->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? kExitOk : kExitConfig;
    }
    g.seed_given = seed_opt->count() > 0;

    try {
        if (c_diff->parsed()) return cmd_diff(diff, g);
        if (c_apply->parsed()) return cmd_apply(apply, g);
        if (c_trace->parsed()) return cmd_trace(trace, g);
        if (c_coeffs->parsed()) return cmd_coeffs(coeffs, g);
        if (c_merge->parsed()) return cmd_merge(merge, g);
        if (c_sample->parsed()) return cmd_sample_calib(sample, g);
        if (c_inspect->parsed()) return cmd_inspect(inspect, g);
        if (c_synth->parsed()) return cmd_synth(synth, g);
    } catch (const Error& e) {
        err << "acm: " << e.what() << '\n';
        return exit_code(e.kind());
    } catch (const std::bad_alloc&) {
        err << "acm: out of memory\n";
        return 1;
    }
    return kExitConfig;
}

}  // namespace acm::cli
