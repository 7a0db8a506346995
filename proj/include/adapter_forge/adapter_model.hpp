// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <bitset>
#include <compare>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "adapter_forge/matrix.hpp"

namespace adapter_forge {

// ---------------------------------------------------------------------------
// Module kinds and sets
// ---------------------------------------------------------------------------

enum class ModuleKind : std::uint8_t { Q, K, V, O, FfGate, FfUp, FfDown };

inline constexpr std::array<ModuleKind, 7> kAllModuleKinds = {
    ModuleKind::Q,      ModuleKind::K,    ModuleKind::V,      ModuleKind::O,
    ModuleKind::FfGate, ModuleKind::FfUp, ModuleKind::FfDown,
};

constexpr bool is_ff(ModuleKind kind) noexcept {
    return kind == ModuleKind::FfGate || kind == ModuleKind::FfUp || kind == ModuleKind::FfDown;
}

/// Short display token: Q/K/V/O for attention, gate/up/down for the MLP projections.
std::string_view short_name(ModuleKind kind);

/// A set of module kinds, iterated in the fixed order Q,K,V,O,gate,up,down.
class ModuleSet {
public:
    ModuleSet() = default;
    ModuleSet(std::initializer_list<ModuleKind> kinds);

    static ModuleSet full();
    static ModuleSet attention();
    static ModuleSet ff();

    void insert(ModuleKind kind) { bits_.set(index(kind)); }
    void erase(ModuleKind kind) { bits_.reset(index(kind)); }
    bool contains(ModuleKind kind) const { return bits_.test(index(kind)); }
    bool empty() const { return bits_.none(); }
    std::size_t size() const { return bits_.count(); }
    bool is_subset_of(const ModuleSet& other) const { return (bits_ & ~other.bits_).none(); }

    std::vector<ModuleKind> kinds() const;

    friend ModuleSet operator|(ModuleSet a, ModuleSet b) { a.bits_ |= b.bits_; return a; }
    friend ModuleSet operator&(ModuleSet a, ModuleSet b) { a.bits_ &= b.bits_; return a; }
    friend ModuleSet operator-(ModuleSet a, ModuleSet b) { a.bits_ &= ~b.bits_; return a; }
    friend bool operator==(const ModuleSet&, const ModuleSet&) = default;

private:
    static std::size_t index(ModuleKind kind) { return static_cast<std::size_t>(kind); }
    std::bitset<7> bits_;
};

// ---------------------------------------------------------------------------
// Naming schema
// ---------------------------------------------------------------------------

/// Maps module kinds onto checkpoint key names. The default is the
/// Llama/Mistral PEFT layout:
///   base_model.model.model.layers.{}.self_attn.q_proj
///   base_model.model.model.layers.{}.mlp.gate_proj
struct NamingSchema {
    static std::map<ModuleKind, std::string> default_projection_names();

    std::map<ModuleKind, std::string> projection_names = default_projection_names();
    std::string attention_block = "self_attn";
    std::string ff_block = "mlp";
    std::string layer_key_template = "base_model.model.model.layers.{}";

    static NamingSchema llama();

    /// Reads a JSON schema document. Missing fields fall back to the Llama defaults.
    static NamingSchema from_json(std::string_view text);

    /// Throws InvalidSchema unless names are distinct and the template has exactly one "{}".
    void validate() const;

    const std::string& name_of(ModuleKind kind) const;
    std::optional<ModuleKind> kind_of(std::string_view projection_name) const;

    /// Full module path for a layer, e.g. base_model.model.model.layers.3.self_attn.q_proj.
    std::string module_path(int layer, ModuleKind kind) const;

    /// Module path without the PEFT wrapper prefix, used as rank/alpha pattern keys.
    std::string pattern_key(int layer, ModuleKind kind) const;

    std::string_view template_prefix() const;
    std::string_view template_suffix() const;
};

// ---------------------------------------------------------------------------
// Configuration signature
// ---------------------------------------------------------------------------

/// Canonical shorthand for a target-module set ("QV", "QKVOFF", "FF").
/// Sets with a partial MLP family render in an extended form such as
/// "QV+up"; unrecognised module names (audit only) are appended as "+name".
class ConfigSignature {
public:
    ConfigSignature() = default;

    const std::string& str() const noexcept { return canonical_; }

    /// True when the signature uses only Q,K,V,O and the whole FF family.
    bool is_standard() const noexcept { return standard_; }

    /// Parses shorthand back into a module set. Throws InvalidSignature on
    /// unknown tokens or on signatures carrying extra module names.
    static ConfigSignature parse(std::string_view text);
    ModuleSet modules() const;

    friend bool operator==(const ConfigSignature& a, const ConfigSignature& b) { return a.canonical_ == b.canonical_; }
    friend auto operator<=>(const ConfigSignature& a, const ConfigSignature& b) { return a.canonical_ <=> b.canonical_; }

private:
    friend ConfigSignature signature_of(const ModuleSet&, std::span<const std::string>);
    std::string canonical_;
    bool standard_ = true;
    bool has_extras_ = false;
};

ConfigSignature signature_of(const ModuleSet& modules, std::span<const std::string> extra_names);
ConfigSignature signature_of(const ModuleSet& modules);

ModuleSet complement_to_full(const ModuleSet& modules);

// ---------------------------------------------------------------------------
// Adapter configuration
// ---------------------------------------------------------------------------

struct AdapterConfig {
    std::string base_model_id;
    int rank_default = 16;
    double alpha_default = 32.0;
    ModuleSet target_modules;
    std::string peft_type = "LORA";
    double dropout = 0.0;
    // Per-module overrides keyed by NamingSchema::pattern_key. Only used on
    // disk; an in-memory Adapter keeps the truth on each LoraPair.
    std::map<std::string, int> rank_pattern;
    std::map<std::string, double> alpha_pattern;

    friend bool operator==(const AdapterConfig&, const AdapterConfig&) = default;
};

/// Parses an adapter_config.json document.
AdapterConfig parse_adapter_config(std::string_view text, const NamingSchema& schema);

/// Inverse of parse_adapter_config; keys are emitted in sorted order.
std::string render_adapter_config(const AdapterConfig& config, const NamingSchema& schema);

// ---------------------------------------------------------------------------
// Weights
// ---------------------------------------------------------------------------

enum class StorageDtype : std::uint8_t { F32, F16, BF16 };

std::string_view to_string(StorageDtype dtype);
std::optional<StorageDtype> parse_dtype(std::string_view text);

/// One module's low-rank factors. delta = (alpha / rank) * up * down.
/// down is rank x d_in (lora_A on disk), up is d_out x rank (lora_B).
struct LoraPair {
    Matrix down;
    Matrix up;
    int rank = 0;
    double alpha = 0.0;
    StorageDtype dtype = StorageDtype::F32;

    /// Validates down.rows == up.cols and derives rank from them.
    static LoraPair make(Matrix down, Matrix up, double alpha, StorageDtype dtype = StorageDtype::F32);

    double scale() const noexcept { return alpha / static_cast<double>(rank); }
    std::size_t d_in() const noexcept { return down.cols(); }
    std::size_t d_out() const noexcept { return up.rows(); }

    friend bool operator==(const LoraPair&, const LoraPair&) = default;
};

/// (alpha / rank) * up * down, shape d_out x d_in.
Matrix dense_delta(const LoraPair& pair);

struct SlotKey {
    int layer = 0;
    ModuleKind kind = ModuleKind::Q;

    friend auto operator<=>(const SlotKey&, const SlotKey&) = default;
};

std::string to_string(const SlotKey& slot);

class Adapter {
public:
    Adapter() = default;

    /// Checks that every slot's kind is declared, layers lie in
    /// [0, layer_count), and all layers of a kind share (d_out, d_in).
    /// Pattern maps on the config are cleared: pairs carry rank and alpha.
    Adapter(AdapterConfig config, std::map<SlotKey, LoraPair> tensors, int layer_count);

    const AdapterConfig& config() const noexcept { return config_; }
    const std::map<SlotKey, LoraPair>& tensors() const noexcept { return tensors_; }
    int layer_count() const noexcept { return layer_count_; }

    const LoraPair* find(SlotKey slot) const;
    const LoraPair& at(SlotKey slot) const;

    /// Kinds that actually carry weights.
    ModuleSet modules() const;
    ConfigSignature signature() const { return signature_of(config_.target_modules); }

    friend bool operator==(const Adapter&, const Adapter&) = default;

private:
    AdapterConfig config_;
    std::map<SlotKey, LoraPair> tensors_;
    int layer_count_ = 0;
};

}  // namespace adapter_forge
