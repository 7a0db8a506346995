// SPDX-License-Identifier: Apache-2.0

// Test-only oracles. Nothing here calls into the library's matrix, merge or
// tensor-file code paths, so they can check those paths independently.

#pragma once

#include <cstddef>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "adapter_forge/adapter_model.hpp"
#include "adapter_forge/merge_engine.hpp"

namespace adapter_forge::testing {

/// Row-major double matrix from a plain triple loop: (alpha / rank) * up * down.
std::vector<double> naive_delta(const LoraPair& pair);

/// Plain triple-loop product of row-major float matrices, accumulated in double.
std::vector<double> naive_matmul(std::span<const float> lhs, std::size_t n, std::size_t inner,
                                 std::span<const float> rhs, std::size_t m);

double max_abs_diff(std::span<const double> a, std::span<const double> b);

/// Source indices expected for each module, restated directly from the
/// recipe rules (task is source 0).
std::map<ModuleKind, std::vector<std::size_t>> oracle_routing(RecipeKind kind, const ModuleSet& task,
                                                              const ModuleSet& second_source);

/// Max over all slots of |delta(output) - sum_i w_i delta(source_i)| using
/// oracle_routing and naive_delta only.
double oracle_merge_deviation(const Adapter& output, std::span<const Adapter> sources, const Recipe& recipe);

struct HeaderRecord {
    std::string dtype;
    std::vector<std::size_t> shape;
    std::size_t begin = 0;
    std::size_t end = 0;
};

struct IndependentHeader {
    std::size_t header_length = 0;
    std::size_t payload_size = 0;
    std::map<std::string, HeaderRecord> tensors;
    bool tiles_payload = false;
    bool ascending_in_key_order = false;
};

/// Re-parses a weight file header by hand, without parse_tensor_file.
IndependentHeader reparse_header(std::span<const std::byte> file);

}  // namespace adapter_forge::testing
