// SPDX-License-Identifier: Apache-2.0

#include "adapter_forge/merge_engine.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>

#include <fmt/format.h>

#include "adapter_forge/error.hpp"

namespace adapter_forge {

// ---------------------------------------------------------------------------
// Weights and recipes
// ---------------------------------------------------------------------------

MergeWeights::MergeWeights(std::vector<double> weights) : weights_(std::move(weights)) {
    if (weights_.empty()) throw AdapterError(ErrorCode::EmptyInput, "no merge weights given");
    bool any_positive = false;
    for (double w : weights_) {
        if (!std::isfinite(w)) throw AdapterError(ErrorCode::NonFiniteWeight, fmt::format("weight {} is not finite", w));
        if (w < 0.0) throw AdapterError(ErrorCode::InvalidWeight, fmt::format("weight {} is negative", w));
        any_positive = any_positive || w > 0.0;
    }
    if (!any_positive) throw AdapterError(ErrorCode::InvalidWeight, "at least one weight must be positive");
}

MergeWeights MergeWeights::parse(std::string_view text) {
    std::vector<double> values;
    std::size_t start = 0;
    while (start <= text.size()) {
        std::size_t end = text.find(':', start);
        if (end == std::string_view::npos) end = text.size();
        const std::string_view token = text.substr(start, end - start);
        double v = 0.0;
        const auto [ptr, ec] = std::from_chars(token.data(), token.data() + token.size(), v);
        if (token.empty() || ec != std::errc{} || ptr != token.data() + token.size())
            throw AdapterError(ErrorCode::InvalidWeight, fmt::format("cannot parse '{}' in weights '{}'", token, text));
        values.push_back(v);
        start = end + 1;
    }
    return MergeWeights(std::move(values));
}

std::string MergeWeights::str() const {
    std::string out;
    for (std::size_t i = 0; i < weights_.size(); ++i) out += fmt::format("{}{}", i ? ":" : "", weights_[i]);
    return out;
}

std::string_view to_string(RecipeKind kind) {
    switch (kind) {
        case RecipeKind::Same: return "same";
        case RecipeKind::FfOnly: return "ff-only";
        case RecipeKind::TwoWayComplement: return "2way";
        case RecipeKind::ThreeWayComplement: return "3way";
        case RecipeKind::FusionFull: return "fusion";
        case RecipeKind::Safety: return "safety";
    }
    return "?";
}

RecipeKind parse_recipe_kind(std::string_view name) {
    for (RecipeKind k : kAllRecipeKinds)
        if (to_string(k) == name) return k;
    throw AdapterError(ErrorCode::InvalidArgument,
                       fmt::format("unknown recipe '{}' (expected same, ff-only, 2way, 3way, fusion or safety)", name));
}

std::size_t source_count(RecipeKind kind) { return kind == RecipeKind::ThreeWayComplement ? 3 : 2; }

Recipe Recipe::make(RecipeKind kind, MergeWeights weights) {
    if (weights.size() != source_count(kind))
        throw AdapterError(ErrorCode::InvalidWeight, fmt::format("recipe {} takes {} weights, got {}", to_string(kind),
                                                                 source_count(kind), weights.size()));
    return Recipe{kind, std::move(weights)};
}

std::string_view to_string(ModelFamily family) { return family == ModelFamily::Llama ? "llama" : "mistral"; }

ModelFamily parse_model_family(std::string_view name) {
    std::string lower(name);
    std::transform(lower.begin(), lower.end(), lower.begin(), [](unsigned char c) { return std::tolower(c); });
    if (lower == "llama") return ModelFamily::Llama;
    if (lower == "mistral") return ModelFamily::Mistral;
    throw AdapterError(ErrorCode::InvalidArgument, fmt::format("unknown model family '{}'", name));
}

ModelFamily infer_model_family(std::string_view base_model_id) {
    std::string lower(base_model_id);
    std::transform(lower.begin(), lower.end(), lower.begin(), [](unsigned char c) { return std::tolower(c); });
    return lower.find("mistral") != std::string::npos ? ModelFamily::Mistral : ModelFamily::Llama;
}

MergeWeights default_weights(RecipeKind kind, const ConfigSignature& task_signature, ModelFamily family) {
    const bool full_task = task_signature.str() == "QKVOFF";
    const bool mistral = family == ModelFamily::Mistral;
    switch (kind) {
        case RecipeKind::Same:
            return MergeWeights({1.0, mistral ? 2.0 : 1.0});
        case RecipeKind::FfOnly:
            if (mistral) return MergeWeights({1.0, full_task ? 2.0 : 1.5});
            return MergeWeights({1.0, full_task ? 1.5 : 1.0});
        case RecipeKind::FusionFull:
        case RecipeKind::TwoWayComplement:
            return MergeWeights({1.0, 1.0});
        case RecipeKind::ThreeWayComplement:
            if (!full_task) return MergeWeights({1.0, 1.0, 1.0});
            return MergeWeights({1.0, 1.0, mistral ? 2.0 : 1.5});
        case RecipeKind::Safety:
            return MergeWeights({0.6, 0.4});
    }
    throw AdapterError(ErrorCode::InvalidWeight, "unhandled recipe");
}

// ---------------------------------------------------------------------------
// Cat merging
// ---------------------------------------------------------------------------

LoraPair cat_merge_pair(std::span<const LoraPair> pairs, std::span<const double> weights) {
    if (pairs.empty()) throw AdapterError(ErrorCode::EmptyInput, "cat merge needs at least one pair");
    if (pairs.size() != weights.size())
        throw AdapterError(ErrorCode::DimensionMismatch,
                           fmt::format("{} pairs but {} weights", pairs.size(), weights.size()));
    const std::size_t d_out = pairs.front().d_out();
    const std::size_t d_in = pairs.front().d_in();

    std::vector<Matrix> ups;
    std::vector<Matrix> downs;
    int rank = 0;
    for (std::size_t i = 0; i < pairs.size(); ++i) {
        const LoraPair& p = pairs[i];
        if (!std::isfinite(weights[i]))
            throw AdapterError(ErrorCode::NonFiniteWeight, fmt::format("weight {} is not finite", weights[i]));
        if (weights[i] < 0.0) throw AdapterError(ErrorCode::InvalidWeight, fmt::format("weight {} is negative", weights[i]));
        if (p.d_out() != d_out || p.d_in() != d_in)
            throw AdapterError(ErrorCode::DimensionMismatch,
                               fmt::format("pair {} is {}x{}, expected {}x{}", i, p.d_out(), p.d_in(), d_out, d_in));
        ups.push_back(scaled(p.up, weights[i] * p.scale()));
        downs.push_back(p.down);
        rank += p.rank;
    }
    return LoraPair::make(vconcat(downs), hconcat(ups), static_cast<double>(rank), StorageDtype::F32);
}

// ---------------------------------------------------------------------------
// Planning
// ---------------------------------------------------------------------------

namespace {

void require_signature(const ModuleSet& actual, const ModuleSet& expected, RecipeKind kind) {
    if (actual != expected)
        throw AdapterError(ErrorCode::SignatureMismatch,
                           fmt::format("recipe {} needs a {} backdoor, got {}", to_string(kind),
                                       signature_of(expected).str(), signature_of(actual).str()));
}

}  // namespace

std::map<ModuleKind, std::vector<SourceWeight>> route_modules(RecipeKind kind, std::span<const ModuleSet> source_modules,
                                                              const MergeWeights& weights) {
    if (source_modules.size() != source_count(kind) || weights.size() != source_count(kind))
        throw AdapterError(ErrorCode::EmptyInput, fmt::format("recipe {} takes {} sources, got {} sources and {} weights",
                                                              to_string(kind), source_count(kind),
                                                              source_modules.size(), weights.size()));
    const ModuleSet& task = source_modules[0];
    if (task.empty()) throw AdapterError(ErrorCode::EmptyInput, "task adapter targets no modules");
    auto sw = [&](std::size_t i) { return SourceWeight{i, weights[i]}; };

    std::map<ModuleKind, std::vector<SourceWeight>> routing;
    switch (kind) {
        case RecipeKind::Same:
            if (source_modules[1] != task)
                throw AdapterError(ErrorCode::SignatureMismatch,
                                   fmt::format("recipe same needs matching signatures, task is {} and backdoor is {}",
                                               signature_of(task).str(), signature_of(source_modules[1]).str()));
            for (ModuleKind k : task.kinds()) routing[k] = {sw(0), sw(1)};
            break;

        case RecipeKind::Safety:
            for (ModuleKind k : (task | source_modules[1]).kinds()) {
                if (task.contains(k)) routing[k].push_back(sw(0));
                if (source_modules[1].contains(k)) routing[k].push_back(sw(1));
            }
            break;

        case RecipeKind::FfOnly:
            require_signature(source_modules[1], ModuleSet::ff(), kind);
            for (ModuleKind k : (task - ModuleSet::ff()).kinds()) routing[k] = {sw(0)};
            for (ModuleKind k : ModuleSet::ff().kinds()) {
                if (task.contains(k)) routing[k] = {sw(0), sw(1)};
                else routing[k] = {sw(1)};
            }
            break;

        case RecipeKind::TwoWayComplement:
            require_signature(source_modules[1], ModuleSet::full(), kind);
            for (ModuleKind k : task.kinds()) routing[k] = {sw(0)};
            for (ModuleKind k : complement_to_full(task).kinds()) routing[k] = {sw(1)};
            break;

        case RecipeKind::ThreeWayComplement:
            require_signature(source_modules[1], ModuleSet::full(), kind);
            require_signature(source_modules[2], ModuleSet::ff(), kind);
            for (ModuleKind k : ModuleSet::attention().kinds()) routing[k] = {task.contains(k) ? sw(0) : sw(1)};
            for (ModuleKind k : ModuleSet::ff().kinds()) {
                if (task.contains(k)) routing[k] = {sw(0), sw(2)};
                else routing[k] = {sw(2)};
            }
            break;

        case RecipeKind::FusionFull:
            require_signature(source_modules[1], ModuleSet::full(), kind);
            for (ModuleKind k : ModuleSet::full().kinds()) {
                if (task.contains(k)) routing[k].push_back(sw(0));
                routing[k].push_back(sw(1));
            }
            break;
    }
    return routing;
}

ConfigSignature predict_signature(const ModuleSet& task_modules, RecipeKind kind) {
    std::vector<ModuleSet> sources{task_modules};
    switch (kind) {
        case RecipeKind::Same:
        case RecipeKind::Safety: sources.push_back(task_modules); break;
        case RecipeKind::FfOnly: sources.push_back(ModuleSet::ff()); break;
        case RecipeKind::TwoWayComplement:
        case RecipeKind::FusionFull: sources.push_back(ModuleSet::full()); break;
        case RecipeKind::ThreeWayComplement:
            sources.push_back(ModuleSet::full());
            sources.push_back(ModuleSet::ff());
            break;
    }
    // Unit weights: routing depends only on module sets.
    const auto routing = route_modules(kind, sources, MergeWeights(std::vector<double>(sources.size(), 1.0)));
    ModuleSet out;
    for (const auto& [k, srcs] : routing) out.insert(k);
    return signature_of(out);
}

MergePlan plan_merge(const Adapter& task, std::span<const Adapter> backdoors, const Recipe& recipe) {
    std::vector<const Adapter*> sources{&task};
    for (const Adapter& b : backdoors) sources.push_back(&b);
    if (sources.size() != source_count(recipe.kind))
        throw AdapterError(ErrorCode::EmptyInput, fmt::format("recipe {} takes {} backdoor adapter(s), got {}",
                                                              to_string(recipe.kind), source_count(recipe.kind) - 1,
                                                              backdoors.size()));
    for (std::size_t i = 1; i < sources.size(); ++i) {
        if (sources[i]->config().base_model_id != task.config().base_model_id)
            throw AdapterError(ErrorCode::BaseModelMismatch,
                               fmt::format("source {} is for '{}', task is for '{}'", i,
                                           sources[i]->config().base_model_id, task.config().base_model_id));
        if (sources[i]->layer_count() != task.layer_count())
            throw AdapterError(ErrorCode::LayerCountMismatch,
                               fmt::format("source {} has {} layers, task has {}", i, sources[i]->layer_count(),
                                           task.layer_count()));
    }

    std::vector<ModuleSet> modules;
    for (const Adapter* a : sources) modules.push_back(a->modules());

    MergePlan plan;
    plan.recipe = recipe.kind;
    plan.layer_count = task.layer_count();
    plan.routing = route_modules(recipe.kind, modules, recipe.weights);

    ModuleSet planned;
    for (const auto& [kind, srcs] : plan.routing) {
        planned.insert(kind);
        std::size_t d_out = 0, d_in = 0;
        for (int layer = 0; layer < plan.layer_count; ++layer) {
            const SlotKey slot{layer, kind};
            for (const SourceWeight& s : srcs) {
                const LoraPair* p = sources[s.source]->find(slot);
                if (!p)
                    throw AdapterError(ErrorCode::MissingTensor,
                                       fmt::format("source {} has no weights for {}", s.source, to_string(slot)));
                if (d_out == 0) {
                    d_out = p->d_out();
                    d_in = p->d_in();
                } else if (p->d_out() != d_out || p->d_in() != d_in) {
                    throw AdapterError(ErrorCode::DimensionMismatch,
                                       fmt::format("{}: source {} is {}x{}, expected {}x{}", to_string(slot), s.source,
                                                   p->d_out(), p->d_in(), d_out, d_in));
                }
            }
            plan.assignments[slot] = srcs;
        }
    }
    plan.predicted_signature = signature_of(planned);
    return plan;
}

// ---------------------------------------------------------------------------
// Execution
// ---------------------------------------------------------------------------

namespace {

/// Single-source slots keep their tensor bytes; a non-unit weight is
/// absorbed into alpha. A zero weight cannot live in alpha, so it goes
/// through the cat path, which zeroes the up factor.
LoraPair merge_slot(std::span<const LoraPair> pairs, std::span<const double> weights) {
    if (pairs.size() == 1 && weights[0] > 0.0) {
        LoraPair out = pairs[0];
        if (weights[0] != 1.0) out.alpha = pairs[0].alpha * weights[0];
        return out;
    }
    return cat_merge_pair(pairs, weights);
}

}  // namespace

Adapter execute_merge(const MergePlan& plan, std::span<const Adapter> sources) {
    if (sources.size() != source_count(plan.recipe))
        throw AdapterError(ErrorCode::EmptyInput, fmt::format("plan for {} needs {} sources, got {}",
                                                              to_string(plan.recipe), source_count(plan.recipe),
                                                              sources.size()));
    std::map<SlotKey, LoraPair> merged;
    ModuleSet targets;
    int max_rank = 0;
    for (const auto& [slot, srcs] : plan.assignments) {
        std::vector<LoraPair> pairs;
        std::vector<double> weights;
        for (const SourceWeight& s : srcs) {
            if (s.source >= sources.size())
                throw AdapterError(ErrorCode::EmptyInput, fmt::format("plan references missing source {}", s.source));
            pairs.push_back(sources[s.source].at(slot));
            weights.push_back(s.weight);
        }
        LoraPair out = merge_slot(pairs, weights);
        max_rank = std::max(max_rank, out.rank);
        targets.insert(slot.kind);
        merged.emplace(slot, std::move(out));
    }

    const AdapterConfig& task_config = sources[0].config();
    AdapterConfig config;
    config.base_model_id = task_config.base_model_id;
    config.peft_type = "LORA";
    config.dropout = task_config.dropout;
    config.target_modules = targets;
    config.rank_default = std::max(max_rank, 1);
    config.alpha_default = static_cast<double>(config.rank_default);
    return Adapter(std::move(config), std::move(merged), plan.layer_count);
}

// ---------------------------------------------------------------------------
// Verification
// ---------------------------------------------------------------------------

namespace {

/// Accumulates scale * up * down into acc (row-major d_out x d_in), in double.
void accumulate_delta(std::vector<double>& acc, const LoraPair& pair, double scale) {
    const std::size_t d_out = pair.up.rows();
    const std::size_t d_in = pair.down.cols();
    const std::size_t rank = pair.down.rows();
    for (std::size_t r = 0; r < d_out; ++r) {
        for (std::size_t c = 0; c < d_in; ++c) {
            double s = 0.0;
            for (std::size_t k = 0; k < rank; ++k)
                s += static_cast<double>(pair.up(r, k)) * static_cast<double>(pair.down(k, c));
            acc[r * d_in + c] += scale * s;
        }
    }
}

}  // namespace

double verify_merge(const Adapter& output, std::span<const Adapter> sources, const MergePlan& plan) {
    double worst = 0.0;
    for (const auto& [slot, srcs] : plan.assignments) {
        const LoraPair* merged = output.find(slot);
        if (!merged)
            throw AdapterError(ErrorCode::MissingTensor, fmt::format("merged adapter lacks {}", to_string(slot)));
        const std::size_t d_out = merged->d_out();
        const std::size_t d_in = merged->d_in();

        std::vector<double> expected(d_out * d_in, 0.0);
        for (const SourceWeight& s : srcs) {
            if (s.source >= sources.size())
                throw AdapterError(ErrorCode::ShapeMismatch, fmt::format("plan references missing source {}", s.source));
            const LoraPair& p = sources[s.source].at(slot);
            if (p.d_out() != d_out || p.d_in() != d_in)
                throw AdapterError(ErrorCode::ShapeMismatch,
                                   fmt::format("{}: merged is {}x{} but source {} is {}x{}", to_string(slot), d_out,
                                               d_in, s.source, p.d_out(), p.d_in()));
            accumulate_delta(expected, p, s.weight * p.alpha / p.rank);
        }
        std::vector<double> actual(d_out * d_in, 0.0);
        accumulate_delta(actual, *merged, merged->alpha / merged->rank);
        for (std::size_t i = 0; i < actual.size(); ++i) worst = std::max(worst, std::abs(actual[i] - expected[i]));
    }
    for (const auto& [slot, pair] : output.tensors()) {
        if (plan.assignments.contains(slot)) continue;
        std::vector<double> stray(pair.d_out() * pair.d_in(), 0.0);
        accumulate_delta(stray, pair, pair.alpha / pair.rank);
        for (double v : stray) worst = std::max(worst, std::abs(v));
    }
    return worst;
}

}  // namespace adapter_forge
