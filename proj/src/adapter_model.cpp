// SPDX-License-Identifier: Apache-2.0

#include "adapter_forge/adapter_model.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "adapter_forge/error.hpp"

namespace adapter_forge {

using nlohmann::json;

std::string_view to_string(ErrorCode code) {
    switch (code) {
        case ErrorCode::MalformedConfig: return "MalformedConfig";
        case ErrorCode::UnknownModuleName: return "UnknownModuleName";
        case ErrorCode::MissingField: return "MissingField";
        case ErrorCode::InvalidSchema: return "InvalidSchema";
        case ErrorCode::InvalidSignature: return "InvalidSignature";
        case ErrorCode::CorruptHeader: return "CorruptHeader";
        case ErrorCode::UnsupportedDtype: return "UnsupportedDtype";
        case ErrorCode::ShapeMismatch: return "ShapeMismatch";
        case ErrorCode::MissingTensor: return "MissingTensor";
        case ErrorCode::OrphanTensor: return "OrphanTensor";
        case ErrorCode::DimensionMismatch: return "DimensionMismatch";
        case ErrorCode::EmptyInput: return "EmptyInput";
        case ErrorCode::NonFiniteWeight: return "NonFiniteWeight";
        case ErrorCode::InvalidWeight: return "InvalidWeight";
        case ErrorCode::SignatureMismatch: return "SignatureMismatch";
        case ErrorCode::LayerCountMismatch: return "LayerCountMismatch";
        case ErrorCode::BaseModelMismatch: return "BaseModelMismatch";
        case ErrorCode::DuplicateAdapterId: return "DuplicateAdapterId";
        case ErrorCode::MalformedManifest: return "MalformedManifest";
        case ErrorCode::InvalidArgument: return "InvalidArgument";
        case ErrorCode::Io: return "Io";
    }
    return "Unknown";
}

std::string_view short_name(ModuleKind kind) {
    switch (kind) {
        case ModuleKind::Q: return "Q";
        case ModuleKind::K: return "K";
        case ModuleKind::V: return "V";
        case ModuleKind::O: return "O";
        case ModuleKind::FfGate: return "gate";
        case ModuleKind::FfUp: return "up";
        case ModuleKind::FfDown: return "down";
    }
    return "?";
}

// ---------------------------------------------------------------------------
// ModuleSet
// ---------------------------------------------------------------------------

ModuleSet::ModuleSet(std::initializer_list<ModuleKind> kinds) {
    for (ModuleKind k : kinds) insert(k);
}

ModuleSet ModuleSet::full() {
    ModuleSet s;
    for (ModuleKind k : kAllModuleKinds) s.insert(k);
    return s;
}

ModuleSet ModuleSet::attention() { return {ModuleKind::Q, ModuleKind::K, ModuleKind::V, ModuleKind::O}; }

ModuleSet ModuleSet::ff() { return {ModuleKind::FfGate, ModuleKind::FfUp, ModuleKind::FfDown}; }

std::vector<ModuleKind> ModuleSet::kinds() const {
    std::vector<ModuleKind> out;
    for (ModuleKind k : kAllModuleKinds)
        if (contains(k)) out.push_back(k);
    return out;
}

// ---------------------------------------------------------------------------
// NamingSchema
// ---------------------------------------------------------------------------

std::map<ModuleKind, std::string> NamingSchema::default_projection_names() {
    return {
        {ModuleKind::Q, "q_proj"},          {ModuleKind::K, "k_proj"},       {ModuleKind::V, "v_proj"},
        {ModuleKind::O, "o_proj"},          {ModuleKind::FfGate, "gate_proj"}, {ModuleKind::FfUp, "up_proj"},
        {ModuleKind::FfDown, "down_proj"},
    };
}

NamingSchema NamingSchema::llama() { return NamingSchema{}; }

NamingSchema NamingSchema::from_json(std::string_view text) {
    json doc;
    try {
        doc = json::parse(text);
    } catch (const json::parse_error& e) {
        throw AdapterError(ErrorCode::InvalidSchema, e.what());
    }
    if (!doc.is_object()) throw AdapterError(ErrorCode::InvalidSchema, "schema document must be an object");

    NamingSchema s = llama();
    auto read_names = [&](const char* field, std::initializer_list<std::pair<const char*, ModuleKind>> slots) {
        if (!doc.contains(field)) return;
        const json& names = doc.at(field);
        if (!names.is_object()) throw AdapterError(ErrorCode::InvalidSchema, fmt::format("'{}' must be an object", field));
        for (const auto& [label, kind] : slots) {
            if (!names.contains(label)) continue;
            if (!names.at(label).is_string())
                throw AdapterError(ErrorCode::InvalidSchema, fmt::format("'{}.{}' must be a string", field, label));
            s.projection_names[kind] = names.at(label).get<std::string>();
        }
    };
    read_names("attn_names", {{"q", ModuleKind::Q}, {"k", ModuleKind::K}, {"v", ModuleKind::V}, {"o", ModuleKind::O}});
    read_names("ff_names", {{"gate", ModuleKind::FfGate}, {"up", ModuleKind::FfUp}, {"down", ModuleKind::FfDown}});
    auto read_string = [&](const char* field, std::string& out) {
        if (!doc.contains(field)) return;
        if (!doc.at(field).is_string())
            throw AdapterError(ErrorCode::InvalidSchema, fmt::format("'{}' must be a string", field));
        out = doc.at(field).get<std::string>();
    };
    read_string("attention_block", s.attention_block);
    read_string("ff_block", s.ff_block);
    read_string("layer_key_template", s.layer_key_template);
    s.validate();
    return s;
}

void NamingSchema::validate() const {
    std::set<std::string> seen;
    for (ModuleKind k : kAllModuleKinds) {
        auto it = projection_names.find(k);
        if (it == projection_names.end() || it->second.empty())
            throw AdapterError(ErrorCode::InvalidSchema, fmt::format("no name for module {}", short_name(k)));
        if (!seen.insert(it->second).second)
            throw AdapterError(ErrorCode::InvalidSchema, fmt::format("duplicate projection name '{}'", it->second));
    }
    const auto first = layer_key_template.find("{}");
    if (first == std::string::npos || layer_key_template.find("{}", first + 2) != std::string::npos)
        throw AdapterError(ErrorCode::InvalidSchema,
                           fmt::format("layer_key_template '{}' needs exactly one '{{}}'", layer_key_template));
}

const std::string& NamingSchema::name_of(ModuleKind kind) const {
    auto it = projection_names.find(kind);
    if (it == projection_names.end())
        throw AdapterError(ErrorCode::InvalidSchema, fmt::format("no name for module {}", short_name(kind)));
    return it->second;
}

std::optional<ModuleKind> NamingSchema::kind_of(std::string_view projection_name) const {
    for (const auto& [kind, name] : projection_names)
        if (name == projection_name) return kind;
    return std::nullopt;
}

std::string_view NamingSchema::template_prefix() const {
    std::string_view t = layer_key_template;
    return t.substr(0, t.find("{}"));
}

std::string_view NamingSchema::template_suffix() const {
    std::string_view t = layer_key_template;
    return t.substr(t.find("{}") + 2);
}

std::string NamingSchema::module_path(int layer, ModuleKind kind) const {
    return fmt::format("{}{}{}.{}.{}", template_prefix(), layer, template_suffix(),
                       is_ff(kind) ? ff_block : attention_block, name_of(kind));
}

std::string NamingSchema::pattern_key(int layer, ModuleKind kind) const {
    constexpr std::string_view wrapper = "base_model.model.";
    std::string path = module_path(layer, kind);
    if (std::string_view(path).starts_with(wrapper)) path.erase(0, wrapper.size());
    return path;
}

// ---------------------------------------------------------------------------
// ConfigSignature
// ---------------------------------------------------------------------------

ConfigSignature signature_of(const ModuleSet& modules, std::span<const std::string> extra_names) {
    ConfigSignature sig;
    std::vector<std::string> parts;
    std::string letters;
    for (ModuleKind k : {ModuleKind::Q, ModuleKind::K, ModuleKind::V, ModuleKind::O})
        if (modules.contains(k)) letters += short_name(k);
    const ModuleSet ff = modules & ModuleSet::ff();
    const bool full_ff = ff == ModuleSet::ff();
    if (full_ff) letters += "FF";
    if (!letters.empty()) parts.push_back(letters);
    if (!full_ff) {
        for (ModuleKind k : ff.kinds()) parts.emplace_back(short_name(k));
        sig.standard_ = ff.empty();
    }
    std::vector<std::string> extras(extra_names.begin(), extra_names.end());
    std::sort(extras.begin(), extras.end());
    extras.erase(std::unique(extras.begin(), extras.end()), extras.end());
    if (!extras.empty()) {
        sig.standard_ = false;
        sig.has_extras_ = true;
    }
    parts.insert(parts.end(), extras.begin(), extras.end());

    for (std::size_t i = 0; i < parts.size(); ++i) {
        if (i) sig.canonical_ += '+';
        sig.canonical_ += parts[i];
    }
    return sig;
}

ConfigSignature signature_of(const ModuleSet& modules) { return signature_of(modules, {}); }

namespace {

struct SignatureTokens {
    ModuleSet modules;
    std::vector<std::string> extras;
};

SignatureTokens tokenize_signature(std::string_view text) {
    if (text.empty()) throw AdapterError(ErrorCode::InvalidSignature, "empty signature");
    SignatureTokens out;
    std::size_t start = 0;
    bool first = true;
    while (start <= text.size()) {
        std::size_t end = text.find('+', start);
        if (end == std::string_view::npos) end = text.size();
        const std::string_view token = text.substr(start, end - start);
        if (token.empty()) throw AdapterError(ErrorCode::InvalidSignature, fmt::format("empty token in '{}'", text));

        if (token == "gate") {
            out.modules.insert(ModuleKind::FfGate);
        } else if (token == "up") {
            out.modules.insert(ModuleKind::FfUp);
        } else if (token == "down") {
            out.modules.insert(ModuleKind::FfDown);
        } else if (first && token.find_first_not_of("QKVOF") == std::string_view::npos) {
            for (std::size_t i = 0; i < token.size(); ++i) {
                switch (token[i]) {
                    case 'Q': out.modules.insert(ModuleKind::Q); break;
                    case 'K': out.modules.insert(ModuleKind::K); break;
                    case 'V': out.modules.insert(ModuleKind::V); break;
                    case 'O': out.modules.insert(ModuleKind::O); break;
                    default:
                        if (i + 1 >= token.size() || token[i + 1] != 'F')
                            throw AdapterError(ErrorCode::InvalidSignature, fmt::format("lone 'F' in '{}'", text));
                        out.modules = out.modules | ModuleSet::ff();
                        ++i;
                }
            }
        } else if (!first &&
                   token.find_first_not_of("abcdefghijklmnopqrstuvwxyz0123456789_.") == std::string_view::npos) {
            out.extras.emplace_back(token);
        } else {
            throw AdapterError(ErrorCode::InvalidSignature,
                               fmt::format("unrecognised token '{}' in '{}'", token, text));
        }
        first = false;
        start = end + 1;
    }
    return out;
}

}  // namespace

ConfigSignature ConfigSignature::parse(std::string_view text) {
    const SignatureTokens tokens = tokenize_signature(text);
    return signature_of(tokens.modules, tokens.extras);
}

ModuleSet ConfigSignature::modules() const {
    if (has_extras_)
        throw AdapterError(ErrorCode::InvalidSignature,
                           fmt::format("signature '{}' names modules outside the schema", canonical_));
    if (canonical_.empty()) return {};
    return tokenize_signature(canonical_).modules;
}

ModuleSet complement_to_full(const ModuleSet& modules) { return ModuleSet::full() - modules; }

// ---------------------------------------------------------------------------
// AdapterConfig
// ---------------------------------------------------------------------------

namespace {

const json& require_field(const json& doc, const char* field) {
    if (!doc.contains(field) || doc.at(field).is_null())
        throw AdapterError(ErrorCode::MissingField, fmt::format("config has no '{}'", field));
    return doc.at(field);
}

}  // namespace

AdapterConfig parse_adapter_config(std::string_view text, const NamingSchema& schema) {
    json doc;
    try {
        doc = json::parse(text);
    } catch (const json::parse_error& e) {
        throw AdapterError(ErrorCode::MalformedConfig, e.what());
    }
    if (!doc.is_object()) throw AdapterError(ErrorCode::MalformedConfig, "config document must be an object");

    AdapterConfig cfg;
    const json& rank = require_field(doc, "r");
    const json& alpha = require_field(doc, "lora_alpha");
    const json& targets = require_field(doc, "target_modules");

    if (!rank.is_number_integer() || rank.get<long long>() < 1)
        throw AdapterError(ErrorCode::MalformedConfig, fmt::format("'r' must be a positive integer, got {}", rank.dump()));
    cfg.rank_default = rank.get<int>();
    if (!alpha.is_number() || !(alpha.get<double>() > 0.0) || !std::isfinite(alpha.get<double>()))
        throw AdapterError(ErrorCode::MalformedConfig, fmt::format("'lora_alpha' must be positive, got {}", alpha.dump()));
    cfg.alpha_default = alpha.get<double>();

    std::vector<std::string> names;
    if (targets.is_string()) {
        names.push_back(targets.get<std::string>());
    } else if (targets.is_array()) {
        for (const json& t : targets) {
            if (!t.is_string()) throw AdapterError(ErrorCode::MalformedConfig, "target_modules entries must be strings");
            names.push_back(t.get<std::string>());
        }
    } else {
        throw AdapterError(ErrorCode::MalformedConfig, "target_modules must be an array of strings");
    }
    std::vector<std::string> unknown;
    for (const auto& name : names) {
        if (auto kind = schema.kind_of(name)) cfg.target_modules.insert(*kind);
        else unknown.push_back(name);
    }
    if (!unknown.empty()) {
        std::string joined;
        for (const auto& u : unknown) joined += (joined.empty() ? "" : ", ") + u;
        throw AdapterError(ErrorCode::UnknownModuleName, fmt::format("target_modules not in schema: {}", joined));
    }
    if (cfg.target_modules.empty()) throw AdapterError(ErrorCode::MalformedConfig, "target_modules is empty");

    auto optional_string = [&](const char* field, std::string& out) {
        if (!doc.contains(field) || doc.at(field).is_null()) return;
        if (!doc.at(field).is_string()) throw AdapterError(ErrorCode::MalformedConfig, fmt::format("'{}' must be a string", field));
        out = doc.at(field).get<std::string>();
    };
    optional_string("base_model_name_or_path", cfg.base_model_id);
    cfg.peft_type.clear();
    optional_string("peft_type", cfg.peft_type);

    if (doc.contains("lora_dropout") && !doc.at("lora_dropout").is_null()) {
        const json& d = doc.at("lora_dropout");
        if (!d.is_number() || d.get<double>() < 0.0 || d.get<double>() > 1.0)
            throw AdapterError(ErrorCode::MalformedConfig, "'lora_dropout' must lie in [0, 1]");
        cfg.dropout = d.get<double>();
    }

    if (doc.contains("rank_pattern") && doc.at("rank_pattern").is_object()) {
        for (const auto& [key, value] : doc.at("rank_pattern").items()) {
            if (!value.is_number_integer() || value.get<long long>() < 1)
                throw AdapterError(ErrorCode::MalformedConfig, fmt::format("rank_pattern['{}'] must be a positive integer", key));
            cfg.rank_pattern[key] = value.get<int>();
        }
    }
    if (doc.contains("alpha_pattern") && doc.at("alpha_pattern").is_object()) {
        for (const auto& [key, value] : doc.at("alpha_pattern").items()) {
            if (!value.is_number() || !(value.get<double>() > 0.0))
                throw AdapterError(ErrorCode::MalformedConfig, fmt::format("alpha_pattern['{}'] must be positive", key));
            cfg.alpha_pattern[key] = value.get<double>();
        }
    }
    return cfg;
}

std::string render_adapter_config(const AdapterConfig& config, const NamingSchema& schema) {
    json doc = json::object();
    doc["base_model_name_or_path"] = config.base_model_id;
    doc["r"] = config.rank_default;
    doc["lora_alpha"] = config.alpha_default;
    doc["lora_dropout"] = config.dropout;
    doc["peft_type"] = config.peft_type;
    json targets = json::array();
    for (ModuleKind k : config.target_modules.kinds()) targets.push_back(schema.name_of(k));
    doc["target_modules"] = std::move(targets);
    doc["rank_pattern"] = config.rank_pattern;
    doc["alpha_pattern"] = config.alpha_pattern;
    return doc.dump(2) + "\n";
}

// ---------------------------------------------------------------------------
// Weights
// ---------------------------------------------------------------------------

std::string_view to_string(StorageDtype dtype) {
    switch (dtype) {
        case StorageDtype::F32: return "F32";
        case StorageDtype::F16: return "F16";
        case StorageDtype::BF16: return "BF16";
    }
    return "?";
}

std::optional<StorageDtype> parse_dtype(std::string_view text) {
    if (text == "F32") return StorageDtype::F32;
    if (text == "F16") return StorageDtype::F16;
    if (text == "BF16") return StorageDtype::BF16;
    return std::nullopt;
}

LoraPair LoraPair::make(Matrix down, Matrix up, double alpha, StorageDtype dtype) {
    if (down.rows() != up.cols()) {
        throw AdapterError(ErrorCode::ShapeMismatch,
                           fmt::format("down has {} rows but up has {} columns", down.rows(), up.cols()));
    }
    if (down.rows() == 0) throw AdapterError(ErrorCode::ShapeMismatch, "rank must be at least 1");
    if (!(alpha > 0.0) || !std::isfinite(alpha))
        throw AdapterError(ErrorCode::MalformedConfig, fmt::format("alpha must be positive, got {}", alpha));
    LoraPair p;
    p.rank = static_cast<int>(down.rows());
    p.down = std::move(down);
    p.up = std::move(up);
    p.alpha = alpha;
    p.dtype = dtype;
    return p;
}

Matrix dense_delta(const LoraPair& pair) { return scaled_product(pair.up, pair.down, pair.scale()); }

std::string to_string(const SlotKey& slot) { return fmt::format("layer {} {}", slot.layer, short_name(slot.kind)); }

Adapter::Adapter(AdapterConfig config, std::map<SlotKey, LoraPair> tensors, int layer_count)
    : config_(std::move(config)), tensors_(std::move(tensors)), layer_count_(layer_count) {
    config_.rank_pattern.clear();
    config_.alpha_pattern.clear();
    if (layer_count_ < 0) throw AdapterError(ErrorCode::ShapeMismatch, "negative layer count");
    std::map<ModuleKind, std::pair<std::size_t, std::size_t>> dims;
    for (const auto& [slot, pair] : tensors_) {
        if (!config_.target_modules.contains(slot.kind))
            throw AdapterError(ErrorCode::OrphanTensor,
                               fmt::format("{} is not a declared target module", to_string(slot)));
        if (slot.layer < 0 || slot.layer >= layer_count_)
            throw AdapterError(ErrorCode::ShapeMismatch,
                               fmt::format("{} outside 0..{}", to_string(slot), layer_count_ - 1));
        if (pair.down.rows() != pair.up.cols() || pair.rank != static_cast<int>(pair.down.rows()))
            throw AdapterError(ErrorCode::ShapeMismatch, fmt::format("{} has inconsistent rank", to_string(slot)));
        const auto shape = std::make_pair(pair.d_out(), pair.d_in());
        auto [it, inserted] = dims.emplace(slot.kind, shape);
        if (!inserted && it->second != shape)
            throw AdapterError(ErrorCode::ShapeMismatch,
                               fmt::format("{} is {}x{}, other layers are {}x{}", to_string(slot), shape.first,
                                           shape.second, it->second.first, it->second.second));
    }
}

const LoraPair* Adapter::find(SlotKey slot) const {
    auto it = tensors_.find(slot);
    return it == tensors_.end() ? nullptr : &it->second;
}

const LoraPair& Adapter::at(SlotKey slot) const {
    if (const LoraPair* p = find(slot)) return *p;
    throw AdapterError(ErrorCode::MissingTensor, fmt::format("adapter has no weights for {}", to_string(slot)));
}

ModuleSet Adapter::modules() const {
    ModuleSet out;
    for (const auto& [slot, pair] : tensors_) out.insert(slot.kind);
    return out;
}

}  // namespace adapter_forge
