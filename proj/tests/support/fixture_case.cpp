// SPDX-License-Identifier: Apache-2.0

#include "support/fixture_case.hpp"

#include <algorithm>
#include <cmath>

#include <nlohmann/json.hpp>

#include "adapter_forge/error.hpp"
#include "adapter_forge/tensor_io.hpp"

namespace adapter_forge::testing {

namespace fs = std::filesystem;
using nlohmann::json;

std::string expected_delta_key(const SlotKey& slot, const NamingSchema& schema) {
    return schema.module_path(slot.layer, slot.kind) + ".delta";
}

FixtureCase load_fixture(const fs::path& dir, const NamingSchema& schema) {
    const json doc = json::parse(read_file_text(dir / kFixtureDescriptor));
    FixtureCase c;
    c.seed = doc.value("seed", std::uint64_t{0});
    c.recipe = Recipe::make(parse_recipe_kind(doc.at("recipe").get<std::string>()),
                            MergeWeights(doc.at("weights").get<std::vector<double>>()));
    c.tolerance = doc.value("tolerance", 1e-4);
    if (doc.contains("expected_signature"))
        c.expected_signature = ConfigSignature::parse(doc.at("expected_signature").get<std::string>());
    if (doc.contains("metadata"))
        for (const auto& [k, v] : doc.at("metadata").items()) c.metadata[k] = v.is_string() ? v.get<std::string>() : v.dump();

    c.source_names = doc.at("sources").get<std::vector<std::string>>();
    for (const auto& name : c.source_names) c.sources.push_back(load_adapter(dir / name, schema));

    const auto bytes = read_file_bytes(dir / doc.value("expected_deltas", std::string(kExpectedDeltasFile)));
    const TensorFile file = parse_tensor_file(bytes);
    const Adapter& task = c.sources.at(0);
    for (const auto& [name, entry] : file.header) {
        std::optional<SlotKey> slot;
        for (int layer = 0; layer < task.layer_count() && !slot; ++layer)
            for (ModuleKind k : kAllModuleKinds)
                if (expected_delta_key({layer, k}, schema) == name) slot = SlotKey{layer, k};
        if (!slot) throw AdapterError(ErrorCode::OrphanTensor, "unrecognised expected delta " + name);
        if (entry.shape.size() != 2) throw AdapterError(ErrorCode::ShapeMismatch, name + " is not a matrix");
        c.expected_deltas.emplace(*slot, Matrix(entry.shape[0], entry.shape[1],
                                                decode_values(file.bytes_of(name), entry.dtype)));
    }
    return c;
}

void save_fixture(const fs::path& dir, const FixtureCase& c, const NamingSchema& schema) {
    fs::create_directories(dir);
    json doc{{"seed", c.seed},
             {"recipe", std::string(to_string(c.recipe.kind))},
             {"weights", c.recipe.weights.values()},
             {"tolerance", c.tolerance},
             {"sources", c.source_names},
             {"expected_deltas", kExpectedDeltasFile},
             {"metadata", c.metadata}};
    if (c.expected_signature) doc["expected_signature"] = c.expected_signature->str();
    write_file_text(dir / kFixtureDescriptor, doc.dump(2) + "\n");
    for (std::size_t i = 0; i < c.sources.size(); ++i) save_adapter(dir / c.source_names.at(i), c.sources[i], schema);

    std::vector<NamedTensor> tensors;
    for (const auto& [slot, m] : c.expected_deltas)
        tensors.push_back({expected_delta_key(slot, schema), StorageDtype::F32, {m.rows(), m.cols()},
                           encode_values(m.values(), StorageDtype::F32)});
    write_file_bytes(dir / kExpectedDeltasFile, serialize_tensor_file(std::move(tensors), {{"format", "pt"}}));
}

std::vector<fs::path> find_fixtures(const fs::path& root) {
    std::vector<fs::path> out;
    std::error_code ec;
    if (!fs::is_directory(root, ec)) return out;
    for (fs::recursive_directory_iterator it(root, ec), end; it != end; it.increment(ec))
        if (it->is_regular_file() && it->path().filename() == kFixtureDescriptor) out.push_back(it->path().parent_path());
    std::sort(out.begin(), out.end());
    return out;
}

bool FixtureResult::passed() const { return slots_match && signature_matches && max_deviation <= tolerance; }

FixtureResult check_fixture(const FixtureCase& c) {
    const std::span<const Adapter> backdoors(c.sources.data() + 1, c.sources.size() - 1);
    const MergePlan plan = plan_merge(c.sources.at(0), backdoors, c.recipe);
    const Adapter merged = execute_merge(plan, c.sources);

    FixtureResult r;
    r.tolerance = c.tolerance;
    r.slots_match = merged.tensors().size() == c.expected_deltas.size();
    if (c.expected_signature) r.signature_matches = merged.signature() == *c.expected_signature;
    for (const auto& [slot, expected] : c.expected_deltas) {
        const LoraPair* pair = merged.find(slot);
        if (!pair) {
            r.slots_match = false;
            r.max_deviation = INFINITY;
            continue;
        }
        const Matrix got = dense_delta(*pair);
        if (got.rows() != expected.rows() || got.cols() != expected.cols()) {
            r.slots_match = false;
            r.max_deviation = INFINITY;
            continue;
        }
        r.max_deviation = std::max(r.max_deviation, static_cast<double>(max_abs_diff(got, expected)));
    }
    return r;
}

}  // namespace adapter_forge::testing
