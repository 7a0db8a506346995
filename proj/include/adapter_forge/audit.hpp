// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <filesystem>
#include <map>
#include <mutex>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "adapter_forge/adapter_model.hpp"
#include "adapter_forge/merge_engine.hpp"

namespace adapter_forge {

/// Default rarity threshold: a configuration seen at most this many times is flagged.
inline constexpr std::size_t kDefaultFlagThreshold = 10;

struct ManifestEntry {
    std::string adapter_id;
    std::string peft_type;
    ConfigSignature signature;
    std::string source;
    std::string base_model_id;
};

bool is_lora(std::string_view peft_type);

/// Signature for a list of module names; names outside the schema are kept
/// as extended "+name" tokens rather than dropped.
ConfigSignature signature_from_names(std::span<const std::string> names, const NamingSchema& schema);

/// One manifest record: {"adapter_id", "peft_type", "target_modules", optional "base_model", "source"}.
ManifestEntry parse_manifest_record(std::string_view json_line, const NamingSchema& schema);

/// Newline-delimited manifest; blank lines are skipped.
std::vector<ManifestEntry> read_manifest(std::string_view text, const NamingSchema& schema);

/// Walks a directory tree for adapter_config.json files. adapter_id is the
/// config's directory relative to root.
std::vector<ManifestEntry> scan_adapter_tree(const std::filesystem::path& root, const NamingSchema& schema);

/// Either a manifest file or an adapter tree, by path type.
std::vector<ManifestEntry> load_manifest(const std::filesystem::path& path, const NamingSchema& schema);

struct ConfigHistogram {
    std::size_t total_adapters = 0;
    std::size_t lora_count = 0;
    std::map<std::string, std::size_t> by_signature;

    std::size_t count_of(const ConfigSignature& signature) const;

    /// lora_count / total_adapters as a percentage; 0 for an empty histogram.
    double lora_percent() const;

    /// Signatures by descending count, ties broken by name.
    std::vector<std::pair<std::string, std::size_t>> ranked() const;

    friend bool operator==(const ConfigHistogram&, const ConfigHistogram&) = default;
};

/// Thread-safe accumulator: any number of producers may call add()
/// concurrently; finish() is called once all producers are done.
class HistogramBuilder {
public:
    /// Throws DuplicateAdapterId on a repeated id.
    void add(const ManifestEntry& entry);
    ConfigHistogram finish() const;

private:
    mutable std::mutex mutex_;
    std::set<std::string> seen_;
    ConfigHistogram hist_;
};

/// Non-LoRA entries count toward the total only. When base_model_id is
/// non-empty, entries for other base models are skipped.
ConfigHistogram build_histogram(std::span<const ManifestEntry> entries, std::string_view base_model_id = {});

struct FlagReport {
    ConfigSignature signature;
    std::size_t observed_count = 0;
    std::size_t threshold = 0;
    bool flagged = false;
    std::string rationale;
};

/// Flags when the signature has been observed at most `threshold` times.
FlagReport flag_config(const ConfigSignature& signature, const ConfigHistogram& hist,
                       std::size_t threshold = kDefaultFlagThreshold);

struct EvasionResult {
    ConfigSignature predicted_signature;
    FlagReport report;
};

/// Predicts the merged signature symbolically (no tensor work) and runs the flag.
EvasionResult evasion_check(const ModuleSet& task_modules, RecipeKind recipe, const ConfigHistogram& hist,
                            std::size_t threshold = kDefaultFlagThreshold);
EvasionResult evasion_check(const Adapter& task, const Recipe& recipe, const ConfigHistogram& hist,
                            std::size_t threshold = kDefaultFlagThreshold);

}  // namespace adapter_forge
