// SPDX-License-Identifier: Apache-2.0

#include "adapter_forge/tensor_io.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <set>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "adapter_forge/error.hpp"

static_assert(std::endian::native == std::endian::little, "tensor payloads are read in host byte order");

namespace adapter_forge {

using nlohmann::json;

namespace {

constexpr std::size_t kMaxHeaderBytes = 100u << 20;

std::size_t element_size(StorageDtype dtype) { return dtype == StorageDtype::F32 ? 4 : 2; }

[[noreturn]] void corrupt(const std::string& why) { throw AdapterError(ErrorCode::CorruptHeader, why); }

std::uint16_t float_to_half(float value) {
    const std::uint32_t x = std::bit_cast<std::uint32_t>(value);
    const std::uint16_t sign = static_cast<std::uint16_t>((x >> 16) & 0x8000u);
    const std::uint32_t exp = (x >> 23) & 0xffu;
    std::uint32_t mant = x & 0x7fffffu;

    if (exp == 0xffu) {
        if (mant == 0) return sign | 0x7c00u;
        const std::uint16_t payload = static_cast<std::uint16_t>(mant >> 13);
        return sign | 0x7c00u | (payload ? payload : 0x200u);
    }
    const int e = static_cast<int>(exp) - 127 + 15;
    if (e >= 31) return sign | 0x7c00u;
    if (e <= 0) {
        if (e < -10) return sign;
        mant |= 0x800000u;
        const int shift = 14 - e;
        std::uint32_t half_mant = mant >> shift;
        const std::uint32_t rem = mant & ((1u << shift) - 1);
        const std::uint32_t halfway = 1u << (shift - 1);
        if (rem > halfway || (rem == halfway && (half_mant & 1u))) ++half_mant;
        return static_cast<std::uint16_t>(sign | half_mant);
    }
    std::uint16_t h = static_cast<std::uint16_t>(sign | (static_cast<std::uint32_t>(e) << 10) | (mant >> 13));
    const std::uint32_t rem = mant & 0x1fffu;
    // A carry out of the mantissa correctly bumps the exponent (up to inf).
    if (rem > 0x1000u || (rem == 0x1000u && (h & 1u))) ++h;
    return h;
}

float half_to_float(std::uint16_t h) {
    const std::uint32_t sign = static_cast<std::uint32_t>(h & 0x8000u) << 16;
    const std::uint32_t exp = (h >> 10) & 0x1fu;
    const std::uint32_t mant = h & 0x3ffu;
    if (exp == 0) {
        const float magnitude = std::ldexp(static_cast<float>(mant), -24);
        return sign ? -magnitude : magnitude;
    }
    if (exp == 31) return std::bit_cast<float>(sign | 0x7f800000u | (mant << 13));
    return std::bit_cast<float>(sign | ((exp + 112u) << 23) | (mant << 13));
}

std::uint16_t float_to_bf16(float value) {
    const std::uint32_t x = std::bit_cast<std::uint32_t>(value);
    if ((x & 0x7fffffffu) > 0x7f800000u) {
        std::uint16_t h = static_cast<std::uint16_t>(x >> 16);
        if ((h & 0x7fu) == 0) h |= 0x40u;
        return h;
    }
    return static_cast<std::uint16_t>((x + 0x7fffu + ((x >> 16) & 1u)) >> 16);
}

float bf16_to_float(std::uint16_t h) { return std::bit_cast<float>(static_cast<std::uint32_t>(h) << 16); }

std::uint64_t read_u64_le(std::span<const std::byte> bytes) {
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | std::to_integer<std::uint64_t>(bytes[static_cast<std::size_t>(i)]);
    return v;
}

void append_u64_le(std::vector<std::byte>& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::byte>((v >> (8 * i)) & 0xffu));
}

std::size_t checked_mul(std::size_t a, std::size_t b) {
    if (a != 0 && b > std::numeric_limits<std::size_t>::max() / a) corrupt("tensor size overflows");
    return a * b;
}

std::size_t read_offset(const json& v, const std::string& name) {
    if (!v.is_number_unsigned()) corrupt(fmt::format("'{}' has a non-integer offset or dimension", name));
    return v.get<std::size_t>();
}

}  // namespace

// ---------------------------------------------------------------------------
// Raw tensor files
// ---------------------------------------------------------------------------

std::span<const std::byte> TensorFile::bytes_of(const std::string& name) const {
    auto it = header.find(name);
    if (it == header.end()) throw AdapterError(ErrorCode::MissingTensor, fmt::format("no tensor '{}'", name));
    return std::span<const std::byte>(payload).subspan(it->second.begin, it->second.end - it->second.begin);
}

TensorFile parse_tensor_file(std::span<const std::byte> bytes) {
    if (bytes.size() < 8) corrupt(fmt::format("file is {} bytes, shorter than the length prefix", bytes.size()));
    const std::uint64_t header_len = read_u64_le(bytes.first(8));
    if (header_len > kMaxHeaderBytes) corrupt(fmt::format("header length {} exceeds limit", header_len));
    if (header_len > bytes.size() - 8)
        corrupt(fmt::format("header length {} runs past end of file ({} bytes)", header_len, bytes.size()));

    const auto header_bytes = bytes.subspan(8, static_cast<std::size_t>(header_len));
    const std::string_view header_text(reinterpret_cast<const char*>(header_bytes.data()), header_bytes.size());
    json doc;
    try {
        doc = json::parse(header_text);
    } catch (const json::exception& e) {
        corrupt(fmt::format("header is not valid JSON: {}", e.what()));
    }
    if (!doc.is_object()) corrupt("header must be a JSON object");

    TensorFile file;
    const auto payload = bytes.subspan(8 + static_cast<std::size_t>(header_len));
    for (const auto& [name, entry] : doc.items()) {
        if (name == "__metadata__") {
            if (!entry.is_object()) corrupt("__metadata__ must be an object");
            for (const auto& [k, v] : entry.items()) {
                if (!v.is_string()) corrupt(fmt::format("__metadata__['{}'] must be a string", k));
                file.metadata[k] = v.get<std::string>();
            }
            continue;
        }
        if (!entry.is_object() || !entry.contains("dtype") || !entry.contains("shape") ||
            !entry.contains("data_offsets"))
            corrupt(fmt::format("tensor '{}' lacks dtype/shape/data_offsets", name));
        const json& dtype = entry.at("dtype");
        const json& shape = entry.at("shape");
        const json& offsets = entry.at("data_offsets");
        if (!dtype.is_string()) corrupt(fmt::format("tensor '{}' dtype must be a string", name));
        if (!shape.is_array()) corrupt(fmt::format("tensor '{}' shape must be an array", name));
        if (!offsets.is_array() || offsets.size() != 2)
            corrupt(fmt::format("tensor '{}' data_offsets must be [begin, end]", name));

        TensorEntry te;
        const auto parsed = parse_dtype(dtype.get<std::string>());
        if (!parsed)
            throw AdapterError(ErrorCode::UnsupportedDtype,
                               fmt::format("tensor '{}' has dtype {}", name, dtype.get<std::string>()));
        te.dtype = *parsed;
        std::size_t count = 1;
        for (const json& d : shape) {
            te.shape.push_back(read_offset(d, name));
            count = checked_mul(count, te.shape.back());
        }
        te.begin = read_offset(offsets[0], name);
        te.end = read_offset(offsets[1], name);
        if (te.begin > te.end) corrupt(fmt::format("tensor '{}' has begin > end", name));
        if (te.end > payload.size())
            corrupt(fmt::format("tensor '{}' ends at {} beyond payload of {} bytes", name, te.end, payload.size()));
        if (te.end - te.begin != checked_mul(count, element_size(te.dtype)))
            corrupt(fmt::format("tensor '{}' spans {} bytes but shape needs {}", name, te.end - te.begin,
                                count * element_size(te.dtype)));
        file.header.emplace(name, std::move(te));
    }

    std::vector<const TensorEntry*> order;
    for (const auto& [name, te] : file.header) order.push_back(&te);
    std::sort(order.begin(), order.end(), [](const TensorEntry* a, const TensorEntry* b) {
        return std::tie(a->begin, a->end) < std::tie(b->begin, b->end);
    });
    std::size_t cursor = 0;
    for (const TensorEntry* te : order) {
        if (te->begin != cursor)
            corrupt(te->begin < cursor ? fmt::format("tensor ranges overlap at byte {}", te->begin)
                                       : fmt::format("gap in payload at byte {}", cursor));
        cursor = te->end;
    }
    if (cursor != payload.size())
        corrupt(fmt::format("payload has {} trailing bytes not covered by any tensor", payload.size() - cursor));

    file.payload.assign(payload.begin(), payload.end());
    return file;
}

std::vector<std::byte> serialize_tensor_file(std::vector<NamedTensor> tensors,
                                             const std::map<std::string, std::string>& metadata) {
    std::sort(tensors.begin(), tensors.end(), [](const NamedTensor& a, const NamedTensor& b) { return a.name < b.name; });
    json header = json::object();
    if (!metadata.empty()) header["__metadata__"] = metadata;
    std::size_t offset = 0;
    for (std::size_t i = 0; i < tensors.size(); ++i) {
        const NamedTensor& t = tensors[i];
        if (i && tensors[i - 1].name == t.name)
            throw AdapterError(ErrorCode::CorruptHeader, fmt::format("duplicate tensor name '{}'", t.name));
        std::size_t count = 1;
        for (std::size_t d : t.shape) count *= d;
        if (count * element_size(t.dtype) != t.bytes.size())
            throw AdapterError(ErrorCode::ShapeMismatch, fmt::format("tensor '{}' has {} bytes for {} {} values", t.name,
                                                                     t.bytes.size(), count, to_string(t.dtype)));
        header[t.name] = {{"dtype", std::string(to_string(t.dtype))},
                          {"shape", t.shape},
                          {"data_offsets", {offset, offset + t.bytes.size()}}};
        offset += t.bytes.size();
    }

    std::string text = header.dump();
    text.append((8 - text.size() % 8) % 8, ' ');

    std::vector<std::byte> out;
    out.reserve(8 + text.size() + offset);
    append_u64_le(out, text.size());
    for (char c : text) out.push_back(static_cast<std::byte>(c));
    for (const NamedTensor& t : tensors) out.insert(out.end(), t.bytes.begin(), t.bytes.end());
    return out;
}

std::vector<float> decode_values(std::span<const std::byte> bytes, StorageDtype dtype) {
    const std::size_t width = element_size(dtype);
    if (bytes.size() % width != 0)
        throw AdapterError(ErrorCode::CorruptHeader, fmt::format("{} bytes is not a whole number of {} values",
                                                                 bytes.size(), to_string(dtype)));
    std::vector<float> out(bytes.size() / width);
    if (dtype == StorageDtype::F32) {
        std::memcpy(out.data(), bytes.data(), bytes.size());
        return out;
    }
    for (std::size_t i = 0; i < out.size(); ++i) {
        std::uint16_t h;
        std::memcpy(&h, bytes.data() + 2 * i, 2);
        out[i] = dtype == StorageDtype::F16 ? half_to_float(h) : bf16_to_float(h);
    }
    return out;
}

std::vector<std::byte> encode_values(std::span<const float> values, StorageDtype dtype) {
    std::vector<std::byte> out(values.size() * element_size(dtype));
    if (dtype == StorageDtype::F32) {
        std::memcpy(out.data(), values.data(), out.size());
        return out;
    }
    for (std::size_t i = 0; i < values.size(); ++i) {
        const std::uint16_t h = dtype == StorageDtype::F16 ? float_to_half(values[i]) : float_to_bf16(values[i]);
        std::memcpy(out.data() + 2 * i, &h, 2);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Tensor keys
// ---------------------------------------------------------------------------

namespace {

constexpr std::string_view kDownSuffix = ".lora_A.weight";
constexpr std::string_view kUpSuffix = ".lora_B.weight";

}  // namespace

std::string format_tensor_key(const TensorKey& key, const NamingSchema& schema) {
    return schema.module_path(key.layer, key.kind) + std::string(key.half == LoraHalf::Down ? kDownSuffix : kUpSuffix);
}

std::optional<TensorKey> parse_tensor_key(std::string_view name, const NamingSchema& schema) {
    const std::string_view prefix = schema.template_prefix();
    if (!name.starts_with(prefix)) return std::nullopt;
    name.remove_prefix(prefix.size());

    int layer = 0;
    const auto [ptr, ec] = std::from_chars(name.data(), name.data() + name.size(), layer);
    if (ec != std::errc{} || ptr == name.data() || layer < 0) return std::nullopt;
    // Reject leading zeros so each layer has exactly one spelling.
    if (name.front() == '0' && ptr - name.data() > 1) return std::nullopt;
    const std::string_view tail = name.substr(static_cast<std::size_t>(ptr - name.data()));

    for (ModuleKind kind : kAllModuleKinds) {
        for (LoraHalf half : {LoraHalf::Down, LoraHalf::Up}) {
            const std::string expected = fmt::format("{}.{}.{}{}", schema.template_suffix(),
                                                     is_ff(kind) ? schema.ff_block : schema.attention_block,
                                                     schema.name_of(kind), half == LoraHalf::Down ? kDownSuffix : kUpSuffix);
            if (tail == expected) return TensorKey{layer, kind, half};
        }
    }
    return std::nullopt;
}

// ---------------------------------------------------------------------------
// Adapters
// ---------------------------------------------------------------------------

Adapter read_adapter(std::span<const std::byte> weights, const AdapterConfig& config, const NamingSchema& schema) {
    const TensorFile file = parse_tensor_file(weights);

    struct Halves {
        const TensorEntry* down = nullptr;
        const TensorEntry* up = nullptr;
        std::string down_name, up_name;
    };
    std::map<SlotKey, Halves> slots;
    int layer_count = 0;
    for (const auto& [name, entry] : file.header) {
        const auto key = parse_tensor_key(name, schema);
        if (!key) throw AdapterError(ErrorCode::OrphanTensor, fmt::format("'{}' is not a LoRA tensor under the schema", name));
        if (!config.target_modules.contains(key->kind))
            throw AdapterError(ErrorCode::OrphanTensor,
                               fmt::format("'{}' belongs to {} which the config does not target", name,
                                           schema.name_of(key->kind)));
        Halves& h = slots[SlotKey{key->layer, key->kind}];
        (key->half == LoraHalf::Down ? h.down : h.up) = &entry;
        (key->half == LoraHalf::Down ? h.down_name : h.up_name) = name;
        layer_count = std::max(layer_count, key->layer + 1);
    }
    if (slots.empty())
        throw AdapterError(ErrorCode::MissingTensor, "weight file contains no LoRA tensors for the declared modules");

    std::map<SlotKey, LoraPair> pairs;
    for (int layer = 0; layer < layer_count; ++layer) {
        for (ModuleKind kind : config.target_modules.kinds()) {
            const SlotKey slot{layer, kind};
            auto it = slots.find(slot);
            if (it == slots.end() || !it->second.down || !it->second.up) {
                const bool has_down = it != slots.end() && it->second.down;
                throw AdapterError(ErrorCode::MissingTensor,
                                   fmt::format("missing {}", format_tensor_key({layer, kind, has_down ? LoraHalf::Up : LoraHalf::Down},
                                                                               schema)));
            }
            const Halves& h = it->second;
            if (h.down->shape.size() != 2 || h.up->shape.size() != 2)
                throw AdapterError(ErrorCode::ShapeMismatch, fmt::format("{} factors must be 2-D", to_string(slot)));
            if (h.down->shape[0] != h.up->shape[1])
                throw AdapterError(ErrorCode::ShapeMismatch,
                                   fmt::format("{}: down is ({}, {}) but up is ({}, {})", to_string(slot),
                                               h.down->shape[0], h.down->shape[1], h.up->shape[0], h.up->shape[1]));
            if (h.down->dtype != h.up->dtype)
                throw AdapterError(ErrorCode::UnsupportedDtype, fmt::format("{} mixes dtypes", to_string(slot)));

            const std::string pattern = schema.pattern_key(layer, kind);
            if (auto rp = config.rank_pattern.find(pattern);
                rp != config.rank_pattern.end() && static_cast<std::size_t>(rp->second) != h.down->shape[0])
                throw AdapterError(ErrorCode::ShapeMismatch, fmt::format("{}: rank_pattern says {} but tensors have rank {}",
                                                                         to_string(slot), rp->second, h.down->shape[0]));
            const auto ap = config.alpha_pattern.find(pattern);
            const double alpha = ap != config.alpha_pattern.end() ? ap->second : config.alpha_default;

            Matrix down(h.down->shape[0], h.down->shape[1], decode_values(file.bytes_of(h.down_name), h.down->dtype));
            Matrix up(h.up->shape[0], h.up->shape[1], decode_values(file.bytes_of(h.up_name), h.up->dtype));
            pairs.emplace(slot, LoraPair::make(std::move(down), std::move(up), alpha, h.down->dtype));
        }
    }
    return Adapter(config, std::move(pairs), layer_count);
}

std::vector<std::byte> write_adapter(const Adapter& adapter, const NamingSchema& schema) {
    std::vector<NamedTensor> tensors;
    for (const auto& [slot, pair] : adapter.tensors()) {
        tensors.push_back({format_tensor_key({slot.layer, slot.kind, LoraHalf::Down}, schema), pair.dtype,
                           {pair.down.rows(), pair.down.cols()}, encode_values(pair.down.values(), pair.dtype)});
        tensors.push_back({format_tensor_key({slot.layer, slot.kind, LoraHalf::Up}, schema), pair.dtype,
                           {pair.up.rows(), pair.up.cols()}, encode_values(pair.up.values(), pair.dtype)});
    }
    return serialize_tensor_file(std::move(tensors), {{"format", "pt"}});
}

std::string render_adapter_config(const Adapter& adapter, const NamingSchema& schema) {
    AdapterConfig config = adapter.config();
    for (const auto& [slot, pair] : adapter.tensors()) {
        const std::string key = schema.pattern_key(slot.layer, slot.kind);
        if (pair.rank != config.rank_default) config.rank_pattern[key] = pair.rank;
        if (pair.alpha != config.alpha_default) config.alpha_pattern[key] = pair.alpha;
    }
    return render_adapter_config(config, schema);
}

Matrix dense_delta(const Adapter& adapter, int layer, ModuleKind kind) {
    return dense_delta(adapter.at(SlotKey{layer, kind}));
}

// ---------------------------------------------------------------------------
// Files
// ---------------------------------------------------------------------------

std::vector<std::byte> read_file_bytes(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw AdapterError(ErrorCode::Io, fmt::format("cannot open {}", path.string()));
    in.seekg(0, std::ios::end);
    const auto size = static_cast<std::size_t>(in.tellg());
    in.seekg(0);
    std::vector<std::byte> out(size);
    if (size && !in.read(reinterpret_cast<char*>(out.data()), static_cast<std::streamsize>(size)))
        throw AdapterError(ErrorCode::Io, fmt::format("short read on {}", path.string()));
    return out;
}

std::string read_file_text(const std::filesystem::path& path) {
    const auto bytes = read_file_bytes(path);
    return std::string(reinterpret_cast<const char*>(bytes.data()), bytes.size());
}

void write_file_bytes(const std::filesystem::path& path, std::span<const std::byte> bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw AdapterError(ErrorCode::Io, fmt::format("cannot write {}", path.string()));
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw AdapterError(ErrorCode::Io, fmt::format("short write on {}", path.string()));
}

void write_file_text(const std::filesystem::path& path, std::string_view text) {
    write_file_bytes(path, std::as_bytes(std::span(text.data(), text.size())));
}

Adapter load_adapter(const std::filesystem::path& dir, const NamingSchema& schema) {
    std::filesystem::path root = dir;
    if (std::filesystem::is_regular_file(root)) root = root.parent_path();
    const AdapterConfig config = parse_adapter_config(read_file_text(root / kConfigFileName), schema);
    return read_adapter(read_file_bytes(root / kWeightsFileName), config, schema);
}

void save_adapter(const std::filesystem::path& dir, const Adapter& adapter, const NamingSchema& schema) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw AdapterError(ErrorCode::Io, fmt::format("cannot create {}: {}", dir.string(), ec.message()));
    write_file_text(dir / kConfigFileName, render_adapter_config(adapter, schema));
    write_file_bytes(dir / kWeightsFileName, write_adapter(adapter, schema));
}

}  // namespace adapter_forge
