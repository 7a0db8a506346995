// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "adapter_forge/adapter_model.hpp"

namespace adapter_forge {

/*
 Weight files use the safetensors layout:
   - 8 bytes: little-endian u64 header length N
   - N bytes: JSON header, one entry per tensor
       {"dtype": "F32", "shape": [r, d], "data_offsets": [begin, end]}
     plus an optional "__metadata__" object of string values
   - payload: tensor bytes, offsets relative to the payload start

 Readers require the byte ranges to tile the payload exactly. Writers emit
 entries in lexicographic key order with no gaps, and pad the header with
 spaces to an 8-byte boundary.
*/

struct TensorEntry {
    StorageDtype dtype = StorageDtype::F32;
    std::vector<std::size_t> shape;
    std::size_t begin = 0;
    std::size_t end = 0;

    friend bool operator==(const TensorEntry&, const TensorEntry&) = default;
};

struct TensorFile {
    std::map<std::string, TensorEntry> header;
    std::map<std::string, std::string> metadata;
    std::vector<std::byte> payload;

    std::span<const std::byte> bytes_of(const std::string& name) const;
};

/// Throws CorruptHeader for any structural problem, UnsupportedDtype for
/// well-formed entries in dtypes other than F32/F16/BF16.
TensorFile parse_tensor_file(std::span<const std::byte> bytes);

struct NamedTensor {
    std::string name;
    StorageDtype dtype = StorageDtype::F32;
    std::vector<std::size_t> shape;
    std::vector<std::byte> bytes;
};

std::vector<std::byte> serialize_tensor_file(std::vector<NamedTensor> tensors,
                                             const std::map<std::string, std::string>& metadata = {});

/// fp32 <-> storage dtype conversion. Encoding rounds to nearest even, so
/// decode followed by encode reproduces 16-bit inputs exactly.
std::vector<float> decode_values(std::span<const std::byte> bytes, StorageDtype dtype);
std::vector<std::byte> encode_values(std::span<const float> values, StorageDtype dtype);

enum class LoraHalf : std::uint8_t { Down, Up };

/// (layer, kind, half) <-> "...layers.{i}.self_attn.q_proj.lora_A.weight".
struct TensorKey {
    int layer = 0;
    ModuleKind kind = ModuleKind::Q;
    LoraHalf half = LoraHalf::Down;

    friend auto operator<=>(const TensorKey&, const TensorKey&) = default;
};

std::string format_tensor_key(const TensorKey& key, const NamingSchema& schema);
std::optional<TensorKey> parse_tensor_key(std::string_view name, const NamingSchema& schema);

/// Assembles an Adapter from a weight file and its config. Layer count is
/// one past the highest layer index present.
Adapter read_adapter(std::span<const std::byte> weights, const AdapterConfig& config, const NamingSchema& schema);

/// Serializes every pair in its recorded storage dtype.
std::vector<std::byte> write_adapter(const Adapter& adapter, const NamingSchema& schema);

/// Config document for an adapter, with rank/alpha patterns recording every
/// pair whose rank or alpha differs from the config defaults.
std::string render_adapter_config(const Adapter& adapter, const NamingSchema& schema);

/// (alpha / rank) * up * down for one slot; MissingTensor when absent.
Matrix dense_delta(const Adapter& adapter, int layer, ModuleKind kind);

inline constexpr const char* kConfigFileName = "adapter_config.json";
inline constexpr const char* kWeightsFileName = "adapter_model.safetensors";

/// Loads a PEFT-style directory holding adapter_config.json and
/// adapter_model.safetensors.
Adapter load_adapter(const std::filesystem::path& dir, const NamingSchema& schema);
void save_adapter(const std::filesystem::path& dir, const Adapter& adapter, const NamingSchema& schema);

std::vector<std::byte> read_file_bytes(const std::filesystem::path& path);
std::string read_file_text(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path, std::span<const std::byte> bytes);
void write_file_text(const std::filesystem::path& path, std::string_view text);

}  // namespace adapter_forge
