// SPDX-License-Identifier: Apache-2.0

#include "adapter_forge/cli.hpp"

#include <cstdlib>
#include <filesystem>
#include <optional>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "adapter_forge/adapter_model.hpp"
#include "adapter_forge/audit.hpp"
#include "adapter_forge/merge_engine.hpp"
#include "adapter_forge/tensor_io.hpp"

namespace adapter_forge::cli {

namespace fs = std::filesystem;
using nlohmann::json;

inline constexpr const char* kMergeManifestName = "merge_manifest.json";
inline constexpr double kDefaultTolerance = 1e-5;

int exit_code_for(ErrorCode code) {
    switch (code) {
        case ErrorCode::SignatureMismatch:
        case ErrorCode::LayerCountMismatch:
        case ErrorCode::BaseModelMismatch:
        case ErrorCode::DimensionMismatch:
        case ErrorCode::InvalidWeight:
        case ErrorCode::NonFiniteWeight:
        case ErrorCode::EmptyInput:
            return kRecipePrecondition;
        default:
            return kIoOrFormat;
    }
}

namespace {

// ---------------------------------------------------------------------------
// Settings: flags > environment > config file
// ---------------------------------------------------------------------------

struct Settings {
    std::string schema = "llama";
    std::size_t threshold = kDefaultFlagThreshold;
    std::optional<ModelFamily> model_family;
    double tolerance = kDefaultTolerance;
};

std::optional<fs::path> config_file_path() {
    if (const char* p = std::getenv("ADAPTER_FORGE_CONFIG"); p && *p) return fs::path(p);
    if (const char* xdg = std::getenv("XDG_CONFIG_HOME"); xdg && *xdg) return fs::path(xdg) / "adapter-forge" / "config.json";
    if (const char* home = std::getenv("HOME"); home && *home) return fs::path(home) / ".config" / "adapter-forge" / "config.json";
    return std::nullopt;
}

Settings load_settings() {
    Settings s;
    if (auto path = config_file_path(); path && fs::is_regular_file(*path)) {
        json doc;
        try {
            doc = json::parse(read_file_text(*path));
        } catch (const json::parse_error& e) {
            throw AdapterError(ErrorCode::MalformedConfig, fmt::format("{}: {}", path->string(), e.what()));
        }
        try {
            if (doc.contains("schema")) s.schema = doc.at("schema").get<std::string>();
            if (doc.contains("threshold")) s.threshold = doc.at("threshold").get<std::size_t>();
            if (doc.contains("model_family")) s.model_family = parse_model_family(doc.at("model_family").get<std::string>());
            if (doc.contains("tolerance")) s.tolerance = doc.at("tolerance").get<double>();
        } catch (const json::exception& e) {
            throw AdapterError(ErrorCode::MalformedConfig, fmt::format("{}: {}", path->string(), e.what()));
        }
    }
    if (const char* env = std::getenv("ADAPTER_FORGE_SCHEMA"); env && *env) s.schema = env;
    return s;
}

NamingSchema resolve_schema(const std::string& value) {
    if (value == "llama" || value == "mistral") return NamingSchema::llama();
    return NamingSchema::from_json(read_file_text(value));
}

// ---------------------------------------------------------------------------
// Report helpers
// ---------------------------------------------------------------------------

std::string join_ints(const json& arr) {
    std::string out;
    for (const auto& v : arr) out += (out.empty() ? "" : ",") + v.dump();
    return out;
}

json flag_report_json(const FlagReport& r) {
    return {{"signature", r.signature.str()},
            {"observed_count", r.observed_count},
            {"threshold", r.threshold},
            {"flagged", r.flagged},
            {"rationale", r.rationale}};
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

struct Common {
    std::string schema_flag;
    bool json_output = false;
    Settings settings;
    NamingSchema schema;
};

int cmd_inspect(Common& c, const std::string& path, std::ostream& out) {
    const Adapter a = load_adapter(path, c.schema);
    json report;
    report["path"] = path;
    report["base_model"] = a.config().base_model_id;
    report["peft_type"] = a.config().peft_type;
    report["signature"] = a.signature().str();
    report["layer_count"] = a.layer_count();
    report["rank_default"] = a.config().rank_default;
    report["alpha_default"] = a.config().alpha_default;
    json modules = json::array();
    for (ModuleKind kind : a.config().target_modules.kinds()) {
        json ranks = json::array();
        json alphas = json::array();
        std::size_t d_out = 0, d_in = 0;
        std::string dtype;
        for (int layer = 0; layer < a.layer_count(); ++layer) {
            const LoraPair& p = a.at({layer, kind});
            ranks.push_back(p.rank);
            alphas.push_back(p.alpha);
            d_out = p.d_out();
            d_in = p.d_in();
            dtype = std::string(to_string(p.dtype));
        }
        modules.push_back({{"module", c.schema.name_of(kind)},
                           {"kind", std::string(short_name(kind))},
                           {"d_out", d_out},
                           {"d_in", d_in},
                           {"dtype", dtype},
                           {"ranks", ranks},
                           {"alphas", alphas}});
    }
    report["modules"] = modules;

    if (c.json_output) {
        out << report.dump(2) << "\n";
        return kOk;
    }
    out << fmt::format("path: {}\n", path);
    out << fmt::format("base model: {}\n", a.config().base_model_id);
    out << fmt::format("peft type: {}\n", a.config().peft_type);
    out << fmt::format("signature: {}\n", a.signature().str());
    out << fmt::format("layers: {}\n", a.layer_count());
    out << fmt::format("rank default: {}  alpha default: {}\n", a.config().rank_default, a.config().alpha_default);
    out << fmt::format("{:<12} {:<5} {:>6} {:>6} {:<5} {}\n", "module", "kind", "d_out", "d_in", "dtype", "ranks");
    for (const auto& m : report["modules"]) {
        out << fmt::format("{:<12} {:<5} {:>6} {:>6} {:<5} {}\n", m["module"].get<std::string>(),
                           m["kind"].get<std::string>(), m["d_out"].get<std::size_t>(), m["d_in"].get<std::size_t>(),
                           m["dtype"].get<std::string>(), join_ints(m["ranks"]));
    }
    return kOk;
}

int cmd_stats(Common& c, const std::string& manifest, const std::string& base_model, std::size_t top,
              std::ostream& out) {
    const auto entries = load_manifest(manifest, c.schema);
    const ConfigHistogram hist = build_histogram(entries, base_model);
    json report;
    report["manifest"] = manifest;
    report["base_model"] = base_model;
    report["total_adapters"] = hist.total_adapters;
    report["lora_count"] = hist.lora_count;
    report["lora_percent"] = hist.lora_percent();
    json ranked = json::array();
    const auto order = hist.ranked();
    for (std::size_t i = 0; i < order.size() && (top == 0 || i < top); ++i)
        ranked.push_back({{"signature", order[i].first}, {"count", order[i].second}});
    report["signatures"] = ranked;

    if (c.json_output) {
        out << report.dump(2) << "\n";
        return kOk;
    }
    out << fmt::format("manifest: {}\n", manifest);
    if (!base_model.empty()) out << fmt::format("base model: {}\n", base_model);
    out << fmt::format("adapters: {}\n", hist.total_adapters);
    out << fmt::format("lora: {} ({:.2f}%)\n", hist.lora_count, hist.lora_percent());
    std::size_t rank = 1;
    for (const auto& r : ranked)
        out << fmt::format("{:>3}. {} ({})\n", rank++, r["signature"].get<std::string>(), r["count"].get<std::size_t>());
    return kOk;
}

MergeWeights weights_for(RecipeKind kind, const std::string& override_text, const Adapter& task, const Settings& s) {
    if (!override_text.empty()) return MergeWeights::parse(override_text);
    const ModelFamily family = s.model_family.value_or(infer_model_family(task.config().base_model_id));
    return default_weights(kind, task.signature(), family);
}

int cmd_merge(Common& c, const std::string& task_path, const std::vector<std::string>& backdoor_paths,
              const std::string& recipe_name, const std::string& weights_text, const std::string& out_dir,
              std::ostream& out, std::ostream& err) {
    const RecipeKind kind = parse_recipe_kind(recipe_name);
    std::vector<Adapter> sources;
    sources.push_back(load_adapter(task_path, c.schema));
    for (const auto& p : backdoor_paths) sources.push_back(load_adapter(p, c.schema));

    const Recipe recipe = Recipe::make(kind, weights_for(kind, weights_text, sources[0], c.settings));
    const MergePlan plan = plan_merge(sources[0], std::span(sources).subspan(1), recipe);
    const Adapter merged = execute_merge(plan, sources);
    const double deviation = verify_merge(merged, sources, plan);
    save_adapter(out_dir, merged, c.schema);

    json manifest;
    manifest["recipe"] = std::string(to_string(kind));
    manifest["weights"] = recipe.weights.values();
    json srcs = json::array();
    srcs.push_back({{"role", "task"}, {"path", task_path}, {"signature", sources[0].signature().str()}});
    for (std::size_t i = 0; i < backdoor_paths.size(); ++i)
        srcs.push_back({{"role", kind == RecipeKind::Safety ? "safety" : "backdoor"},
                        {"path", backdoor_paths[i]},
                        {"signature", sources[i + 1].signature().str()}});
    manifest["sources"] = srcs;
    manifest["predicted_signature"] = plan.predicted_signature.str();
    manifest["actual_signature"] = merged.signature().str();
    manifest["max_deviation"] = deviation;
    manifest["tolerance"] = c.settings.tolerance;
    manifest["output"] = out_dir;
    write_file_text(fs::path(out_dir) / kMergeManifestName, manifest.dump(2) + "\n");

    const bool ok = deviation <= c.settings.tolerance && plan.predicted_signature == merged.signature();
    if (c.json_output) {
        out << manifest.dump(2) << "\n";
    } else {
        out << fmt::format("recipe: {}\n", to_string(kind));
        out << fmt::format("weights: {}\n", recipe.weights.str());
        for (const auto& s : srcs)
            out << fmt::format("source ({}): {} [{}]\n", s["role"].get<std::string>(), s["path"].get<std::string>(),
                               s["signature"].get<std::string>());
        out << fmt::format("predicted signature: {}\n", plan.predicted_signature.str());
        out << fmt::format("actual signature: {}\n", merged.signature().str());
        out << fmt::format("max deviation: {:.3e} (tolerance {:.1e})\n", deviation, c.settings.tolerance);
        out << fmt::format("output: {}\n", out_dir);
    }
    if (!ok) {
        err << "merge verification failed\n";
        return kVerificationFailed;
    }
    return kOk;
}

int cmd_audit(Common& c, const std::string& manifest, const std::string& target, const std::string& recipe_name,
              const std::string& base_model, std::ostream& out) {
    ConfigSignature signature;
    if (fs::exists(target)) {
        fs::path config = target;
        if (fs::is_directory(config)) config /= kConfigFileName;
        else if (config.filename() != kConfigFileName) config = config.parent_path() / kConfigFileName;
        signature = signature_of(parse_adapter_config(read_file_text(config), c.schema).target_modules);
    } else {
        signature = ConfigSignature::parse(target);
    }
    const auto entries = load_manifest(manifest, c.schema);
    const ConfigHistogram hist = build_histogram(entries, base_model);

    json report;
    FlagReport flag;
    if (!recipe_name.empty()) {
        const RecipeKind kind = parse_recipe_kind(recipe_name);
        const EvasionResult r = evasion_check(signature.modules(), kind, hist, c.settings.threshold);
        flag = r.report;
        report = flag_report_json(flag);
        report["task_signature"] = signature.str();
        report["recipe"] = std::string(to_string(kind));
        report["predicted_signature"] = r.predicted_signature.str();
    } else {
        flag = flag_config(signature, hist, c.settings.threshold);
        report = flag_report_json(flag);
    }

    if (c.json_output) {
        out << report.dump(2) << "\n";
    } else {
        if (report.contains("recipe")) {
            out << fmt::format("task signature: {}\n", report["task_signature"].get<std::string>());
            out << fmt::format("recipe: {}\n", report["recipe"].get<std::string>());
            out << fmt::format("predicted signature: {}\n", report["predicted_signature"].get<std::string>());
        }
        out << fmt::format("signature: {}\n", flag.signature.str());
        out << fmt::format("observed count: {}\n", flag.observed_count);
        out << fmt::format("threshold: {}\n", flag.threshold);
        out << fmt::format("flagged: {}\n", flag.flagged ? "yes" : "no");
        out << fmt::format("rationale: {}\n", flag.rationale);
    }
    return flag.flagged ? kFlagged : kOk;
}

int cmd_verify(Common& c, const std::string& merged_path, const std::vector<std::string>& source_paths,
               std::string recipe_name, std::string weights_text, std::ostream& out, std::ostream& err) {
    const fs::path root = fs::is_directory(merged_path) ? fs::path(merged_path) : fs::path(merged_path).parent_path();
    if (const fs::path sidecar = root / kMergeManifestName; fs::is_regular_file(sidecar)) {
        json m;
        try {
            m = json::parse(read_file_text(sidecar));
            if (recipe_name.empty()) recipe_name = m.at("recipe").get<std::string>();
            if (weights_text.empty()) weights_text = MergeWeights(m.at("weights").get<std::vector<double>>()).str();
        } catch (const json::exception& e) {
            throw AdapterError(ErrorCode::MalformedConfig, fmt::format("{}: {}", sidecar.string(), e.what()));
        }
    }
    if (recipe_name.empty())
        throw AdapterError(ErrorCode::InvalidArgument, "no --recipe given and no merge manifest next to the merged adapter");

    const RecipeKind kind = parse_recipe_kind(recipe_name);
    const Adapter merged = load_adapter(merged_path, c.schema);
    std::vector<Adapter> sources;
    for (const auto& p : source_paths) sources.push_back(load_adapter(p, c.schema));
    if (sources.empty()) throw AdapterError(ErrorCode::InvalidArgument, "verify needs the source adapters");

    const Recipe recipe = Recipe::make(kind, weights_for(kind, weights_text, sources[0], c.settings));
    const MergePlan plan = plan_merge(sources[0], std::span(sources).subspan(1), recipe);
    const double deviation = verify_merge(merged, sources, plan);
    const bool signature_ok = merged.signature() == plan.predicted_signature;
    const bool ok = deviation <= c.settings.tolerance && signature_ok;

    json report{{"merged", merged_path},
                {"recipe", std::string(to_string(kind))},
                {"weights", recipe.weights.values()},
                {"predicted_signature", plan.predicted_signature.str()},
                {"actual_signature", merged.signature().str()},
                {"max_deviation", deviation},
                {"tolerance", c.settings.tolerance},
                {"passed", ok}};
    if (c.json_output) {
        out << report.dump(2) << "\n";
    } else {
        out << fmt::format("merged: {}\n", merged_path);
        out << fmt::format("recipe: {}  weights: {}\n", to_string(kind), recipe.weights.str());
        out << fmt::format("predicted signature: {}\n", plan.predicted_signature.str());
        out << fmt::format("actual signature: {}\n", merged.signature().str());
        out << fmt::format("max deviation: {:.3e} (tolerance {:.1e})\n", deviation, c.settings.tolerance);
        out << fmt::format("passed: {}\n", ok ? "yes" : "no");
    }
    if (!ok) {
        err << (signature_ok ? "deviation exceeds tolerance\n" : "signature differs from plan\n");
        return kVerificationFailed;
    }
    return kOk;
}

int cmd_diff(Common& c, const std::string& a_path, const std::string& b_path, std::ostream& out) {
    const Adapter a = load_adapter(a_path, c.schema);
    const Adapter b = load_adapter(b_path, c.schema);
    std::map<SlotKey, int> presence;  // bit 1: a, bit 2: b
    for (const auto& [slot, pair] : a.tensors()) presence[slot] |= 1;
    for (const auto& [slot, pair] : b.tensors()) presence[slot] |= 2;

    json rows = json::array();
    for (const auto& [slot, mask] : presence) {
        json row{{"layer", slot.layer}, {"module", c.schema.name_of(slot.kind)}, {"kind", std::string(short_name(slot.kind))}};
        Matrix diff;
        if (mask == 3) {
            const Matrix da = dense_delta(a.at(slot));
            const Matrix db = dense_delta(b.at(slot));
            if (da.rows() != db.rows() || da.cols() != db.cols()) {
                row["status"] = "shape-mismatch";
                row["max_abs"] = nullptr;
                row["frobenius"] = nullptr;
                rows.push_back(row);
                continue;
            }
            diff = da;
            for (std::size_t i = 0; i < diff.size(); ++i) diff.values()[i] -= db.values()[i];
            row["status"] = "both";
        } else {
            diff = dense_delta(mask == 1 ? a.at(slot) : b.at(slot));
            row["status"] = mask == 1 ? "only-a" : "only-b";
        }
        row["max_abs"] = max_abs(diff);
        row["frobenius"] = frobenius_norm(diff);
        rows.push_back(row);
    }
    json report{{"a", a_path},
                {"b", b_path},
                {"a_signature", a.signature().str()},
                {"b_signature", b.signature().str()},
                {"slots", rows}};
    if (c.json_output) {
        out << report.dump(2) << "\n";
        return kOk;
    }
    out << fmt::format("a: {} [{}]\n", a_path, a.signature().str());
    out << fmt::format("b: {} [{}]\n", b_path, b.signature().str());
    out << fmt::format("{:>5} {:<12} {:<15} {:>12} {:>12}\n", "layer", "module", "status", "max_abs", "frobenius");
    for (const auto& r : rows) {
        const auto num = [](const json& v) { return v.is_null() ? std::string("-") : fmt::format("{:.4e}", v.get<double>()); };
        out << fmt::format("{:>5} {:<12} {:<15} {:>12} {:>12}\n", r["layer"].get<int>(), r["module"].get<std::string>(),
                           r["status"].get<std::string>(), num(r["max_abs"]), num(r["frobenius"]));
    }
    return kOk;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Inspect, merge and audit LoRA adapters", "adapter-forge"};
    app.require_subcommand(1);
    app.fallthrough();

    Common common;
    bool json_flag = false;
    std::string threshold_flag;
    std::string family_flag;
    double tolerance_flag = -1.0;
    app.add_option("--schema", common.schema_flag, "Naming schema: 'llama' or a JSON schema file (env ADAPTER_FORGE_SCHEMA)");
    app.add_flag("--json", json_flag, "Emit machine-readable JSON instead of the text report");

    std::string path_a, path_b, manifest, target, recipe_name, weights_text, out_dir, base_model;
    std::vector<std::string> extra_paths;
    std::size_t top = 0;

    auto* inspect = app.add_subcommand("inspect", "Show signature, ranks and shapes of an adapter");
    inspect->add_option("path", path_a, "Adapter directory or weights file")->required();

    auto* stats = app.add_subcommand("stats", "Adapter and target-module statistics over a manifest");
    stats->add_option("manifest", manifest, "NDJSON manifest or directory of adapters")->required();
    stats->add_option("--base-model", base_model, "Only count adapters for this base model");
    stats->add_option("--top", top, "Show only the N most common signatures");

    auto* merge = app.add_subcommand("merge", "Merge a task adapter with backdoor or safety adapters");
    merge->add_option("task", path_a, "Task adapter")->required();
    merge->add_option("sources", extra_paths, "Further source adapters in recipe order")->required();
    merge->add_option("--recipe", recipe_name, "same, ff-only, 2way, 3way, fusion or safety")->required();
    merge->add_option("--weights", weights_text, "Colon-separated ratios, e.g. 1:1:1.5");
    merge->add_option("--model-family", family_flag, "llama or mistral (default: from base model id)");
    merge->add_option("--out", out_dir, "Output directory")->required();
    merge->add_option("--tolerance", tolerance_flag, "Maximum allowed merge deviation");

    auto* audit = app.add_subcommand("audit", "Flag a configuration that is rare in a manifest");
    audit->add_option("manifest", manifest, "NDJSON manifest or directory of adapters")->required();
    audit->add_option("target", target, "Signature (e.g. QVFF) or adapter path")->required();
    audit->add_option("--threshold", threshold_flag, "Flag when observed count <= threshold (default 10)");
    audit->add_option("--recipe", recipe_name, "Audit the output of merging the target with this recipe");
    audit->add_option("--base-model", base_model, "Only count adapters for this base model");

    auto* verify = app.add_subcommand("verify", "Check a merged adapter against its sources");
    verify->add_option("merged", path_a, "Merged adapter")->required();
    verify->add_option("sources", extra_paths, "Source adapters, task first")->required();
    verify->add_option("--recipe", recipe_name, "Recipe (default: from merge_manifest.json)");
    verify->add_option("--weights", weights_text, "Colon-separated ratios (default: from merge_manifest.json)");
    verify->add_option("--model-family", family_flag, "llama or mistral");
    verify->add_option("--tolerance", tolerance_flag, "Maximum allowed deviation (default 1e-5)");

    auto* diff = app.add_subcommand("diff", "Per-slot delta norms between two adapters");
    diff->add_option("a", path_a, "First adapter")->required();
    diff->add_option("b", path_b, "Second adapter")->required();

    std::vector<const char*> argv;
    for (const auto& a : args) argv.push_back(a.c_str());
    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? kOk : kIoOrFormat;
    }

    try {
        common.settings = load_settings();
        if (!common.schema_flag.empty()) common.settings.schema = common.schema_flag;
        if (!threshold_flag.empty()) {
            try {
                std::size_t used = 0;
                const long long t = std::stoll(threshold_flag, &used);
                if (used != threshold_flag.size() || t < 0) throw std::invalid_argument("negative");
                common.settings.threshold = static_cast<std::size_t>(t);
            } catch (const std::exception&) {
                throw AdapterError(ErrorCode::InvalidArgument,
                                   fmt::format("--threshold must be a non-negative integer, got '{}'", threshold_flag));
            }
        }
        if (!family_flag.empty()) common.settings.model_family = parse_model_family(family_flag);
        if (tolerance_flag >= 0.0) common.settings.tolerance = tolerance_flag;
        common.json_output = json_flag;
        common.schema = resolve_schema(common.settings.schema);

        if (*inspect) return cmd_inspect(common, path_a, out);
        if (*stats) return cmd_stats(common, manifest, base_model, top, out);
        if (*merge) return cmd_merge(common, path_a, extra_paths, recipe_name, weights_text, out_dir, out, err);
        if (*audit) return cmd_audit(common, manifest, target, recipe_name, base_model, out);
        if (*verify) return cmd_verify(common, path_a, extra_paths, recipe_name, weights_text, out, err);
        if (*diff) return cmd_diff(common, path_a, path_b, out);
    } catch (const AdapterError& e) {
        err << "error: " << e.what() << "\n";
        if (json_flag)
            out << json{{"error", std::string(to_string(e.code()))}, {"message", e.what()}}.dump() << "\n";
        return exit_code_for(e.code());
    } catch (const std::filesystem::filesystem_error& e) {
        err << "error: " << e.what() << "\n";
        return kIoOrFormat;
    }
    return kIoOrFormat;
}

}  // namespace adapter_forge::cli
