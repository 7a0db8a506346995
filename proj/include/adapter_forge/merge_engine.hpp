// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "adapter_forge/adapter_model.hpp"

namespace adapter_forge {

/// Non-negative per-source merge weights, at least one strictly positive.
class MergeWeights {
public:
    MergeWeights() = default;
    explicit MergeWeights(std::vector<double> weights);

    /// Parses colon-separated ratios such as "1:1:1.5".
    static MergeWeights parse(std::string_view text);

    const std::vector<double>& values() const noexcept { return weights_; }
    std::size_t size() const noexcept { return weights_.size(); }
    double operator[](std::size_t i) const { return weights_[i]; }

    std::string str() const;

    friend bool operator==(const MergeWeights&, const MergeWeights&) = default;

private:
    std::vector<double> weights_;
};

enum class RecipeKind { Same, FfOnly, TwoWayComplement, ThreeWayComplement, FusionFull, Safety };

inline constexpr std::array<RecipeKind, 6> kAllRecipeKinds = {
    RecipeKind::Same,       RecipeKind::FfOnly, RecipeKind::TwoWayComplement, RecipeKind::ThreeWayComplement,
    RecipeKind::FusionFull, RecipeKind::Safety,
};

/// CLI names: same, ff-only, 2way, 3way, fusion, safety.
std::string_view to_string(RecipeKind kind);
RecipeKind parse_recipe_kind(std::string_view name);

/// Sources including the task adapter: 3 for the 3-way complement, 2 otherwise.
std::size_t source_count(RecipeKind kind);

struct Recipe {
    RecipeKind kind = RecipeKind::Same;
    MergeWeights weights;

    /// Throws InvalidWeight when the weight count does not fit the recipe.
    static Recipe make(RecipeKind kind, MergeWeights weights);
};

enum class ModelFamily { Llama, Mistral };

std::string_view to_string(ModelFamily family);
ModelFamily parse_model_family(std::string_view name);

/// Mistral when the base model id mentions it, Llama otherwise.
ModelFamily infer_model_family(std::string_view base_model_id);

/// Default ratios per recipe and model family, including the exceptions for
/// tasks that already target QKVOFF.
MergeWeights default_weights(RecipeKind kind, const ConfigSignature& task_signature, ModelFamily family);

// ---------------------------------------------------------------------------
// Cat merging
// ---------------------------------------------------------------------------

/// Concatenates pairs into one whose delta is sum_i w_i * (alpha_i/r_i) * up_i * down_i.
/// Scaling lives only in the up factor; down factors stack unscaled and the
/// merged alpha equals the merged rank, so the merged scale is exactly 1.
LoraPair cat_merge_pair(std::span<const LoraPair> pairs, std::span<const double> weights);

// ---------------------------------------------------------------------------
// Planning and execution
// ---------------------------------------------------------------------------

struct SourceWeight {
    std::size_t source = 0;
    double weight = 0.0;

    friend bool operator==(const SourceWeight&, const SourceWeight&) = default;
};

struct MergePlan {
    RecipeKind recipe = RecipeKind::Same;
    int layer_count = 0;
    std::map<SlotKey, std::vector<SourceWeight>> assignments;
    ConfigSignature predicted_signature;

    /// Per-kind routing shared by every layer.
    std::map<ModuleKind, std::vector<SourceWeight>> routing;
};

/// Module-level routing for a recipe given the module sets actually present
/// in each source (task first). Throws SignatureMismatch when the recipe's
/// structural precondition fails.
std::map<ModuleKind, std::vector<SourceWeight>> route_modules(RecipeKind kind, std::span<const ModuleSet> source_modules,
                                                              const MergeWeights& weights);

/// Signature a recipe would produce for a task, assuming canonical backdoors
/// (QKVOFF for full backdoors, FF for FF-only ones, the task's own set for Same/Safety).
ConfigSignature predict_signature(const ModuleSet& task_modules, RecipeKind kind);

/// backdoors holds every source after the task, in recipe order:
/// 3-way takes (QKVOFF backdoor, FF backdoor); Safety takes the safety adapter.
MergePlan plan_merge(const Adapter& task, std::span<const Adapter> backdoors, const Recipe& recipe);

/// sources = task followed by the backdoors passed to plan_merge.
Adapter execute_merge(const MergePlan& plan, std::span<const Adapter> sources);

/// Max over planned slots of |delta(output) - sum_i w_i * delta(source_i)|,
/// computed through an independent double-precision dense path. Slots in the
/// output that the plan does not cover count against a zero expectation.
double verify_merge(const Adapter& output, std::span<const Adapter> sources, const MergePlan& plan);

}  // namespace adapter_forge
