// SPDX-License-Identifier: Apache-2.0

#include <bit>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <random>

#include <doctest.h>
#include <nlohmann/json.hpp>

#include "adapter_forge/error.hpp"
#include "adapter_forge/merge_engine.hpp"
#include "adapter_forge/tensor_io.hpp"
#include "support/oracle.hpp"
#include "support/random_adapter.hpp"

using namespace adapter_forge;
using K = ModuleKind;

namespace {

const NamingSchema kSchema = NamingSchema::llama();

ErrorCode code_of(auto&& fn) {
    try {
        fn();
    } catch (const AdapterError& e) {
        return e.code();
    }
    FAIL("expected an AdapterError");
    return ErrorCode::Io;
}

std::vector<std::byte> f32_bytes(std::size_t count, float fill = 0.5f) {
    std::vector<float> v(count, fill);
    return encode_values(v, StorageDtype::F32);
}

NamedTensor tensor(const std::string& name, std::vector<std::size_t> shape) {
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    return NamedTensor{name, StorageDtype::F32, shape, f32_bytes(n)};
}

std::string key(int layer, K kind, LoraHalf half) { return format_tensor_key({layer, kind, half}, kSchema); }

AdapterConfig config_for(ModuleSet modules, int rank = 2, double alpha = 4.0) {
    AdapterConfig c;
    c.base_model_id = "meta-llama/Llama-2-7b-hf";
    c.target_modules = modules;
    c.rank_default = rank;
    c.alpha_default = alpha;
    return c;
}

/// Builds a raw file from a header string and payload size, bypassing the writer.
std::vector<std::byte> raw_file(const std::string& header, std::size_t payload_bytes, std::uint64_t declared_len) {
    std::vector<std::byte> out;
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::byte>((declared_len >> (8 * i)) & 0xff));
    for (char c : header) out.push_back(static_cast<std::byte>(c));
    out.resize(out.size() + payload_bytes, std::byte{0});
    return out;
}

std::vector<std::byte> raw_file(const std::string& header, std::size_t payload_bytes) {
    return raw_file(header, payload_bytes, header.size());
}

}  // namespace

TEST_SUITE("tensor keys") {
    TEST_CASE("keys round trip through the schema") {
        for (int layer : {0, 1, 9, 31, 127})
            for (K kind : kAllModuleKinds)
                for (LoraHalf half : {LoraHalf::Down, LoraHalf::Up}) {
                    const TensorKey k{layer, kind, half};
                    CHECK(parse_tensor_key(format_tensor_key(k, kSchema), kSchema) == k);
                }
        CHECK(key(3, K::Q, LoraHalf::Down) == "base_model.model.model.layers.3.self_attn.q_proj.lora_A.weight");
        CHECK(key(0, K::FfUp, LoraHalf::Up) == "base_model.model.model.layers.0.mlp.up_proj.lora_B.weight");
    }

    TEST_CASE("foreign names do not parse") {
        for (const char* name : {"lm_head.weight", "base_model.model.model.layers.01.self_attn.q_proj.lora_A.weight",
                                 "base_model.model.model.layers.x.self_attn.q_proj.lora_A.weight",
                                 "base_model.model.model.layers.0.mlp.q_proj.lora_A.weight",
                                 "base_model.model.model.layers.0.self_attn.q_proj.lora_C.weight",
                                 "base_model.model.model.layers.-1.self_attn.q_proj.lora_A.weight"}) {
            CAPTURE(name);
            CHECK_FALSE(parse_tensor_key(name, kSchema).has_value());
        }
    }
}

TEST_SUITE("dtype conversion") {
    std::uint16_t half_bits(float f) {
        const auto b = encode_values(std::span(&f, 1), StorageDtype::F16);
        std::uint16_t h;
        std::memcpy(&h, b.data(), 2);
        return h;
    }
    std::uint16_t bf16_bits(float f) {
        const auto b = encode_values(std::span(&f, 1), StorageDtype::BF16);
        std::uint16_t h;
        std::memcpy(&h, b.data(), 2);
        return h;
    }

    TEST_CASE("known half encodings") {
        CHECK(half_bits(1.0f) == 0x3c00);
        CHECK(half_bits(-2.0f) == 0xc000);
        CHECK(half_bits(65504.0f) == 0x7bff);
        CHECK(half_bits(65520.0f) == 0x7c00);  // rounds up to inf
        CHECK(half_bits(std::ldexp(1.0f, -24)) == 0x0001);
        CHECK(half_bits(std::ldexp(1.0f, -25)) == 0x0000);       // tie to even
        CHECK(half_bits(std::ldexp(3.0f, -25)) == 0x0002);       // tie to even
        CHECK(half_bits(std::ldexp(1.0f, -14)) == 0x0400);       // smallest normal
        CHECK(half_bits(1.0f + std::ldexp(1.0f, -11)) == 0x3c00);  // tie to even
        CHECK(half_bits(1.0f + std::ldexp(3.0f, -11)) == 0x3c02);
        CHECK(half_bits(INFINITY) == 0x7c00);
        CHECK((half_bits(NAN) & 0x7c00) == 0x7c00);
        CHECK((half_bits(NAN) & 0x3ff) != 0);
    }

    TEST_CASE("known bf16 encodings") {
        CHECK(bf16_bits(1.0f) == 0x3f80);
        CHECK(bf16_bits(-1.5f) == 0xbfc0);
        CHECK(bf16_bits(std::bit_cast<float>(0x3f808000u)) == 0x3f80);  // tie to even
        CHECK(bf16_bits(std::bit_cast<float>(0x3f818000u)) == 0x3f82);
    }

    TEST_CASE("every 16-bit pattern survives decode then encode") {
        for (StorageDtype dtype : {StorageDtype::F16, StorageDtype::BF16}) {
            std::vector<std::byte> all(2 * 65536);
            for (std::uint32_t i = 0; i < 65536; ++i) {
                const auto h = static_cast<std::uint16_t>(i);
                std::memcpy(all.data() + 2 * i, &h, 2);
            }
            const auto values = decode_values(all, dtype);
            CHECK(encode_values(values, dtype) == all);
        }
    }
}

TEST_SUITE("parse_tensor_file") {
    TEST_CASE("well formed file with metadata") {
        const auto bytes = serialize_tensor_file({tensor("b", {2, 3}), tensor("a", {4})}, {{"format", "pt"}});
        const TensorFile f = parse_tensor_file(bytes);
        CHECK(f.metadata.at("format") == "pt");
        CHECK(f.header.at("a").begin == 0);
        CHECK(f.header.at("a").end == 16);
        CHECK(f.header.at("b").begin == 16);
        CHECK(f.header.at("b").shape == std::vector<std::size_t>{2, 3});
        CHECK(f.bytes_of("b").size() == 24);
        const auto h = testing::reparse_header(bytes);
        CHECK(h.header_length % 8 == 0);
        CHECK(h.tiles_payload);
        CHECK(h.ascending_in_key_order);
    }

    TEST_CASE("structural corruption raises CorruptHeader") {
        const std::string ok_entry = R"("t":{"dtype":"F32","shape":[2],"data_offsets":[0,8]})";
        struct Case {
            const char* label;
            std::vector<std::byte> bytes;
        };
        std::vector<Case> cases{
            {"empty file", {}},
            {"short prefix", std::vector<std::byte>(5)},
            {"length overruns file", raw_file("{}", 0, 4096)},
            {"absurd length", raw_file("{}", 0, 1ull << 40)},
            {"not json", raw_file("{\"t\":", 0)},
            {"not an object", raw_file("[1,2,3]", 0)},
            {"entry missing offsets", raw_file(R"({"t":{"dtype":"F32","shape":[2]}})", 8)},
            {"shape not array", raw_file(R"({"t":{"dtype":"F32","shape":2,"data_offsets":[0,8]}})", 8)},
            {"negative offset", raw_file(R"({"t":{"dtype":"F32","shape":[2],"data_offsets":[-8,0]}})", 8)},
            {"begin after end", raw_file(R"({"t":{"dtype":"F32","shape":[0],"data_offsets":[8,0]}})", 8)},
            {"size disagrees with shape", raw_file(R"({"t":{"dtype":"F32","shape":[3],"data_offsets":[0,8]}})", 8)},
            {"range past payload", raw_file("{" + ok_entry + "}", 4)},
            {"trailing payload", raw_file("{" + ok_entry + "}", 12)},
            {"gap before first tensor",
             raw_file(R"({"t":{"dtype":"F32","shape":[2],"data_offsets":[4,12]}})", 12)},
            {"overlapping ranges",
             raw_file(R"({"a":{"dtype":"F32","shape":[2],"data_offsets":[0,8]},"b":{"dtype":"F32","shape":[2],"data_offsets":[4,12]}})",
                      12)},
            {"metadata not strings", raw_file(R"({"__metadata__":{"x":1}})", 0)},
            {"shape overflow",
             raw_file(R"({"t":{"dtype":"F32","shape":[4294967296,4294967296,16],"data_offsets":[0,8]}})", 8)},
        };
        for (const auto& c : cases) {
            CAPTURE(c.label);
            CHECK(code_of([&] { parse_tensor_file(c.bytes); }) == ErrorCode::CorruptHeader);
        }
    }

    TEST_CASE("unsupported dtypes are named") {
        const auto bytes = raw_file(R"({"t":{"dtype":"I8","shape":[2],"data_offsets":[0,2]}})", 2);
        CHECK(code_of([&] { parse_tensor_file(bytes); }) == ErrorCode::UnsupportedDtype);
    }

    TEST_CASE("mutated files fail cleanly") {
        std::mt19937_64 rng(99);
        const auto good = serialize_tensor_file({tensor("a", {3, 2}), tensor("b", {5})}, {{"format", "pt"}});
        int rejected = 0;
        for (int trial = 0; trial < 2000; ++trial) {
            auto bytes = good;
            const int flips = std::uniform_int_distribution<int>(1, 4)(rng);
            for (int i = 0; i < flips; ++i) {
                const auto pos = std::uniform_int_distribution<std::size_t>(0, bytes.size() - 1)(rng);
                bytes[pos] = static_cast<std::byte>(std::uniform_int_distribution<int>(0, 255)(rng));
            }
            if (trial % 5 == 0) bytes.resize(std::uniform_int_distribution<std::size_t>(0, bytes.size())(rng));
            try {
                parse_tensor_file(bytes);
            } catch (const AdapterError&) {
                ++rejected;
            }
        }
        CHECK(rejected > 0);
    }
}

TEST_SUITE("read_adapter") {
    std::vector<NamedTensor> qv_tensors(int layers, std::size_t rank, std::size_t d) {
        std::vector<NamedTensor> t;
        for (int layer = 0; layer < layers; ++layer)
            for (K kind : {K::Q, K::V}) {
                t.push_back(tensor(key(layer, kind, LoraHalf::Down), {rank, d}));
                t.push_back(tensor(key(layer, kind, LoraHalf::Up), {d, rank}));
            }
        return t;
    }

    TEST_CASE("two layers of QV at rank 2") {
        const auto bytes = serialize_tensor_file(qv_tensors(2, 2, 8));
        CHECK(parse_tensor_file(bytes).header.size() == 8);
        const Adapter a = read_adapter(bytes, config_for({K::Q, K::V}), kSchema);
        CHECK(a.tensors().size() == 4);
        CHECK(a.layer_count() == 2);
        CHECK(a.signature().str() == "QV");
        CHECK(a.at({1, K::V}).rank == 2);
        CHECK(a.at({1, K::V}).alpha == 4.0);
    }

    TEST_CASE("down and up must agree on rank") {
        const auto bytes = serialize_tensor_file(
            {tensor(key(0, K::Q, LoraHalf::Down), {2, 8}), tensor(key(0, K::Q, LoraHalf::Up), {8, 3})});
        CHECK(code_of([&] { read_adapter(bytes, config_for({K::Q}), kSchema); }) == ErrorCode::ShapeMismatch);
    }

    TEST_CASE("weights for undeclared modules are orphans") {
        auto t = qv_tensors(1, 2, 4);
        t.push_back(tensor(key(0, K::K, LoraHalf::Down), {2, 4}));
        t.push_back(tensor(key(0, K::K, LoraHalf::Up), {4, 2}));
        CHECK(code_of([&] { read_adapter(serialize_tensor_file(t), config_for({K::Q, K::V}), kSchema); }) ==
              ErrorCode::OrphanTensor);
        auto u = qv_tensors(1, 2, 4);
        u.push_back(tensor("lm_head.weight", {4}));
        CHECK(code_of([&] { read_adapter(serialize_tensor_file(u), config_for({K::Q, K::V}), kSchema); }) ==
              ErrorCode::OrphanTensor);
    }

    TEST_CASE("declared modules without weights are missing") {
        auto t = qv_tensors(2, 2, 4);
        t.pop_back();  // layer 1 V up
        CHECK(code_of([&] { read_adapter(serialize_tensor_file(t), config_for({K::Q, K::V}), kSchema); }) ==
              ErrorCode::MissingTensor);
        CHECK(code_of([&] {
                  read_adapter(serialize_tensor_file(qv_tensors(1, 2, 4)), config_for(ModuleSet{K::Q, K::V, K::O}),
                               kSchema);
              }) == ErrorCode::MissingTensor);
    }

    TEST_CASE("empty adapter does not re-read against a non-empty config") {
        const Adapter empty(config_for({K::Q, K::V}), {}, 0);
        const auto bytes = write_adapter(empty, kSchema);
        CHECK(code_of([&] { read_adapter(bytes, config_for({K::Q, K::V}), kSchema); }) == ErrorCode::MissingTensor);
    }

    TEST_CASE("alpha and rank patterns apply per module") {
        auto cfg = config_for({K::Q, K::V}, 2, 4.0);
        cfg.alpha_pattern[kSchema.pattern_key(1, K::Q)] = 10.0;
        const Adapter a = read_adapter(serialize_tensor_file(qv_tensors(2, 2, 4)), cfg, kSchema);
        CHECK(a.at({1, K::Q}).alpha == 10.0);
        CHECK(a.at({0, K::Q}).alpha == 4.0);
        CHECK(a.config().alpha_pattern.empty());

        auto bad = config_for({K::Q, K::V}, 2, 4.0);
        bad.rank_pattern[kSchema.pattern_key(0, K::V)] = 8;
        CHECK(code_of([&] { read_adapter(serialize_tensor_file(qv_tensors(1, 2, 4)), bad, kSchema); }) ==
              ErrorCode::ShapeMismatch);
    }
}

TEST_SUITE("write_adapter") {
    TEST_CASE("fuzzed adapters round trip bit-exactly") {
        std::mt19937_64 rng(2024);
        for (int trial = 0; trial < 200; ++trial) {
            const StorageDtype dtype = std::array{StorageDtype::F32, StorageDtype::F16, StorageDtype::BF16}[trial % 3];
            const auto dims = testing::random_dims(rng, 1, 12);
            Adapter a = testing::random_adapter(rng, testing::random_module_set(rng),
                                                std::uniform_int_distribution<int>(1, 3)(rng), dims, 1, 6,
                                                "meta-llama/Llama-2-7b-hf", StorageDtype::F32);
            if (dtype != StorageDtype::F32) {
                // Re-quantise so values are representable in the storage dtype.
                std::map<SlotKey, LoraPair> pairs;
                for (auto [slot, pair] : a.tensors()) {
                    pair.down = Matrix(pair.down.rows(), pair.down.cols(),
                                       decode_values(encode_values(pair.down.values(), dtype), dtype));
                    pair.up = Matrix(pair.up.rows(), pair.up.cols(), decode_values(encode_values(pair.up.values(), dtype), dtype));
                    pair.dtype = dtype;
                    pairs.emplace(slot, pair);
                }
                a = Adapter(a.config(), pairs, a.layer_count());
            }
            const auto bytes = write_adapter(a, kSchema);
            const AdapterConfig cfg = parse_adapter_config(render_adapter_config(a, kSchema), kSchema);
            const Adapter back = read_adapter(bytes, cfg, kSchema);
            CAPTURE(trial);
            CHECK(back == a);
            CHECK(write_adapter(back, kSchema) == bytes);
            const auto h = testing::reparse_header(bytes);
            CHECK(h.tiles_payload);
            CHECK(h.ascending_in_key_order);
        }
    }

    TEST_CASE("merged rank is recorded in the header") {
        std::mt19937_64 rng(5);
        const auto p1 = testing::random_pair(rng, 6, 5, 16);
        const auto p2 = testing::random_pair(rng, 6, 5, 16);
        const std::vector<LoraPair> pairs{p1, p2};
        const std::vector<double> weights{1.0, 1.0};
        const LoraPair merged = cat_merge_pair(pairs, weights);
        AdapterConfig cfg = config_for({K::Q}, 32, 32.0);
        std::map<SlotKey, LoraPair> t;
        t.emplace(SlotKey{0, K::Q}, merged);
        const auto bytes = write_adapter(Adapter(cfg, t, 1), kSchema);
        const auto h = testing::reparse_header(bytes);
        CHECK(h.tensors.at(key(0, K::Q, LoraHalf::Down)).shape == std::vector<std::size_t>{32, 5});
        CHECK(h.tensors.at(key(0, K::Q, LoraHalf::Up)).shape == std::vector<std::size_t>{6, 32});
    }

    TEST_CASE("directory save and load keep per-pair alpha and rank") {
        std::mt19937_64 rng(8);
        const auto dims = testing::random_dims(rng, 2, 6);
        Adapter a = testing::random_adapter(rng, ModuleSet{K::Q, K::V} | ModuleSet::ff(), 2, dims, 1, 5);
        const auto dir = std::filesystem::temp_directory_path() / "adapter_forge_io_test";
        std::filesystem::remove_all(dir);
        save_adapter(dir, a, kSchema);
        CHECK(load_adapter(dir, kSchema) == a);
        CHECK(load_adapter(dir / kWeightsFileName, kSchema) == a);
        std::filesystem::remove_all(dir);
    }
}

TEST_SUITE("dense_delta") {
    Adapter single(LoraPair p) {
        std::map<SlotKey, LoraPair> t;
        t.emplace(SlotKey{0, K::Q}, std::move(p));
        return Adapter(config_for({K::Q}), t, 1);
    }

    TEST_CASE("1x1 product") {
        const Adapter a = single(LoraPair::make(Matrix(1, 1, {3.0f}), Matrix(1, 1, {2.0f}), 1.0));
        CHECK(dense_delta(a, 0, K::Q) == Matrix(1, 1, {6.0f}));
    }

    TEST_CASE("identity at unit scale") {
        const Adapter a =
            single(LoraPair::make(Matrix(2, 2, {1, 0, 0, 1}), Matrix(2, 2, {1, 0, 0, 1}), 2.0));
        CHECK(dense_delta(a, 0, K::Q) == Matrix(2, 2, {1, 0, 0, 1}));
    }

    TEST_CASE("random 4x3 matches a naive triple loop") {
        std::mt19937_64 rng(3);
        for (int trial = 0; trial < 20; ++trial) {
            const LoraPair p = testing::random_pair(rng, 4, 3, 2);
            const Matrix d = dense_delta(single(p), 0, K::Q);
            const auto expected = testing::naive_delta(p);
            std::vector<double> got(d.values().begin(), d.values().end());
            CHECK(testing::max_abs_diff(got, expected) <= 1e-6);
        }
    }

    TEST_CASE("linear in the up factor") {
        std::mt19937_64 rng(4);
        for (int trial = 0; trial < 50; ++trial) {
            const LoraPair p = testing::random_pair(rng, 5, 7, 3);
            const double c = std::uniform_real_distribution<double>(-3.0, 3.0)(rng);
            LoraPair q = p;
            q.up = scaled(p.up, c);
            const Matrix base = dense_delta(p);
            const Matrix scaled_delta = dense_delta(q);
            CHECK(max_abs_diff(scaled_delta, scaled(base, c)) <= 1e-5f);
        }
    }

    TEST_CASE("absent slot") {
        const Adapter a = single(LoraPair::make(Matrix(1, 1, {3.0f}), Matrix(1, 1, {2.0f}), 1.0));
        CHECK(code_of([&] { dense_delta(a, 0, K::V); }) == ErrorCode::MissingTensor);
    }
}
