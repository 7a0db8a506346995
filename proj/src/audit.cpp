// SPDX-License-Identifier: Apache-2.0

#include "adapter_forge/audit.hpp"

#include <algorithm>
#include <cctype>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "adapter_forge/error.hpp"
#include "adapter_forge/tensor_io.hpp"

namespace adapter_forge {

using nlohmann::json;

bool is_lora(std::string_view peft_type) {
    if (peft_type.size() != 4) return false;
    std::string upper(peft_type);
    std::transform(upper.begin(), upper.end(), upper.begin(), [](unsigned char c) { return std::toupper(c); });
    return upper == "LORA";
}

ConfigSignature signature_from_names(std::span<const std::string> names, const NamingSchema& schema) {
    ModuleSet modules;
    std::vector<std::string> extras;
    for (const auto& name : names) {
        if (auto kind = schema.kind_of(name)) modules.insert(*kind);
        else extras.push_back(name);
    }
    return signature_of(modules, extras);
}

namespace {

ManifestEntry entry_from_json(const json& doc, const NamingSchema& schema, std::string_view where) {
    auto bad = [&](const std::string& why) {
        return AdapterError(ErrorCode::MalformedManifest, fmt::format("{}: {}", where, why));
    };
    if (!doc.is_object()) throw bad("record must be an object");
    auto get_string = [&](const char* field, bool required) -> std::string {
        if (!doc.contains(field) || doc.at(field).is_null()) {
            if (required) throw bad(fmt::format("missing '{}'", field));
            return {};
        }
        if (!doc.at(field).is_string()) throw bad(fmt::format("'{}' must be a string", field));
        return doc.at(field).get<std::string>();
    };

    ManifestEntry e;
    e.adapter_id = get_string("adapter_id", true);
    e.peft_type = get_string("peft_type", true);
    e.base_model_id = get_string("base_model", false);
    e.source = get_string("source", false);

    std::vector<std::string> names;
    if (doc.contains("target_modules") && !doc.at("target_modules").is_null()) {
        const json& t = doc.at("target_modules");
        if (t.is_string()) {
            names.push_back(t.get<std::string>());
        } else if (t.is_array()) {
            for (const json& n : t) {
                if (!n.is_string()) throw bad("target_modules entries must be strings");
                names.push_back(n.get<std::string>());
            }
        } else {
            throw bad("target_modules must be an array of strings");
        }
    }
    if (is_lora(e.peft_type)) {
        if (names.empty()) throw bad(fmt::format("LoRA adapter '{}' has no target_modules", e.adapter_id));
        e.signature = signature_from_names(names, schema);
    }
    return e;
}

}  // namespace

ManifestEntry parse_manifest_record(std::string_view json_line, const NamingSchema& schema) {
    json doc;
    try {
        doc = json::parse(json_line);
    } catch (const json::parse_error& e) {
        throw AdapterError(ErrorCode::MalformedManifest, e.what());
    }
    return entry_from_json(doc, schema, "manifest record");
}

std::vector<ManifestEntry> read_manifest(std::string_view text, const NamingSchema& schema) {
    std::vector<ManifestEntry> out;
    std::size_t line_no = 0;
    std::size_t start = 0;
    while (start < text.size()) {
        std::size_t end = text.find('\n', start);
        if (end == std::string_view::npos) end = text.size();
        std::string_view line = text.substr(start, end - start);
        ++line_no;
        start = end + 1;
        if (line.find_first_not_of(" \t\r") == std::string_view::npos) continue;
        json doc;
        try {
            doc = json::parse(line);
        } catch (const json::parse_error& e) {
            throw AdapterError(ErrorCode::MalformedManifest, fmt::format("line {}: {}", line_no, e.what()));
        }
        out.push_back(entry_from_json(doc, schema, fmt::format("line {}", line_no)));
    }
    return out;
}

std::vector<ManifestEntry> scan_adapter_tree(const std::filesystem::path& root, const NamingSchema& schema) {
    namespace fs = std::filesystem;
    std::error_code ec;
    if (!fs::is_directory(root, ec)) throw AdapterError(ErrorCode::Io, fmt::format("{} is not a directory", root.string()));

    std::vector<fs::path> configs;
    for (fs::recursive_directory_iterator it(root, ec), end; it != end; it.increment(ec)) {
        if (ec) throw AdapterError(ErrorCode::Io, fmt::format("walking {}: {}", root.string(), ec.message()));
        if (it->is_regular_file() && it->path().filename() == kConfigFileName) configs.push_back(it->path());
    }
    std::sort(configs.begin(), configs.end());

    std::vector<ManifestEntry> out;
    for (const fs::path& config : configs) {
        json doc;
        try {
            doc = json::parse(read_file_text(config));
        } catch (const json::parse_error& e) {
            throw AdapterError(ErrorCode::MalformedManifest, fmt::format("{}: {}", config.string(), e.what()));
        }
        if (!doc.is_object()) throw AdapterError(ErrorCode::MalformedManifest, fmt::format("{}: not an object", config.string()));
        std::string id = fs::relative(config.parent_path(), root).generic_string();
        if (id.empty()) id = ".";
        doc["adapter_id"] = id;
        if (!doc.contains("base_model") && doc.contains("base_model_name_or_path"))
            doc["base_model"] = doc["base_model_name_or_path"];
        doc["source"] = config.string();
        out.push_back(entry_from_json(doc, schema, config.string()));
    }
    return out;
}

std::vector<ManifestEntry> load_manifest(const std::filesystem::path& path, const NamingSchema& schema) {
    std::error_code ec;
    if (std::filesystem::is_directory(path, ec)) return scan_adapter_tree(path, schema);
    return read_manifest(read_file_text(path), schema);
}

// ---------------------------------------------------------------------------
// Histograms
// ---------------------------------------------------------------------------

std::size_t ConfigHistogram::count_of(const ConfigSignature& signature) const {
    auto it = by_signature.find(signature.str());
    return it == by_signature.end() ? 0 : it->second;
}

double ConfigHistogram::lora_percent() const {
    if (total_adapters == 0) return 0.0;
    return 100.0 * static_cast<double>(lora_count) / static_cast<double>(total_adapters);
}

std::vector<std::pair<std::string, std::size_t>> ConfigHistogram::ranked() const {
    std::vector<std::pair<std::string, std::size_t>> out(by_signature.begin(), by_signature.end());
    std::stable_sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
    return out;
}

void HistogramBuilder::add(const ManifestEntry& entry) {
    std::lock_guard lock(mutex_);
    if (!seen_.insert(entry.adapter_id).second)
        throw AdapterError(ErrorCode::DuplicateAdapterId, fmt::format("adapter id '{}' appears twice", entry.adapter_id));
    ++hist_.total_adapters;
    if (is_lora(entry.peft_type)) {
        ++hist_.lora_count;
        ++hist_.by_signature[entry.signature.str()];
    }
}

ConfigHistogram HistogramBuilder::finish() const {
    std::lock_guard lock(mutex_);
    return hist_;
}

ConfigHistogram build_histogram(std::span<const ManifestEntry> entries, std::string_view base_model_id) {
    HistogramBuilder builder;
    for (const ManifestEntry& e : entries) {
        if (!base_model_id.empty() && e.base_model_id != base_model_id) continue;
        builder.add(e);
    }
    return builder.finish();
}

// ---------------------------------------------------------------------------
// Flagging
// ---------------------------------------------------------------------------

FlagReport flag_config(const ConfigSignature& signature, const ConfigHistogram& hist, std::size_t threshold) {
    FlagReport r;
    r.signature = signature;
    r.observed_count = hist.count_of(signature);
    r.threshold = threshold;
    r.flagged = r.observed_count <= threshold;
    if (r.flagged) {
        r.rationale = fmt::format("{} is rare: {} of {} LoRA adapters use it (threshold {})", signature.str(),
                                  r.observed_count, hist.lora_count, threshold);
    } else {
        r.rationale = fmt::format("{} is common: {} of {} LoRA adapters use it (threshold {})", signature.str(),
                                  r.observed_count, hist.lora_count, threshold);
    }
    return r;
}

EvasionResult evasion_check(const ModuleSet& task_modules, RecipeKind recipe, const ConfigHistogram& hist,
                            std::size_t threshold) {
    EvasionResult out;
    out.predicted_signature = predict_signature(task_modules, recipe);
    out.report = flag_config(out.predicted_signature, hist, threshold);
    return out;
}

EvasionResult evasion_check(const Adapter& task, const Recipe& recipe, const ConfigHistogram& hist,
                            std::size_t threshold) {
    return evasion_check(task.modules(), recipe.kind, hist, threshold);
}

}  // namespace adapter_forge
