#pragma once

#include "anchorfuse/backbone.hpp"
#include "anchorfuse/ops.hpp"
#include "anchorfuse/registry.hpp"
#include "anchorfuse/rng.hpp"

#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace anchorfuse {

// D_uni: the shared interaction width.
inline int unified_width(int visual_width, int text_width) { return std::max(visual_width, text_width); }

// Registry names for the fusion module at image layer `layer`.
std::string fusion_prefix(int layer);

// Registers one fusion module's weights as trainable. Projections and
// attention weights are N(0, init_std^2); gate weights start at zero.
void add_fusion_parameters(ParameterRegistry& registry, int layer, int visual_width, int text_width, Rng& rng,
                           double init_std);

// A fusion module's weights bound onto a tape.
struct FusionVars {
    int layer = -1;
    int heads = 1;
    Var visual_in;  // D_v x D_uni
    Var text_in;    // D_t x D_uni
    AttentionVars visual_from_text; // queries from visual prompts, keys/values from text
    AttentionVars text_from_visual;
    Var visual_out; // D_uni x D_v
    Var text_out;   // D_uni x D_t
    Var visual_gate; // 2 D_v x D_v
    Var text_gate;   // 2 D_t x D_t
};

FusionVars bind_fusion(Tape& tape, const ParameterRegistry& registry, int layer, int heads);

struct UnifiedPrompts {
    Var visual;
    Var text;
};

UnifiedPrompts project_to_unified(Var visual_prompts, Var text_prompts, const FusionVars& module);

// Multi-head cross-attention; rejects an empty key set.
Var mhca(Var queries, Var keys, Var values, const AttentionVars& weights, int heads);

struct GatedUpdate {
    Var refined; // P + gate * delta
    Var gate;    // sigmoid([P ; delta] W_g), elementwise
};

GatedUpdate gated_residual(Var prompts, Var delta, Var gate_weights);

struct FusedPrompts {
    GatedUpdate visual;
    GatedUpdate text;
};

// Both directions are computed from the pre-update prompts.
FusedPrompts fuse_layer(Var visual_prompts, Var text_prompts, const FusionVars& module, int layer);

// Runs fuse_layer at each fusion layer of an image pass, threading the
// refined text stream from one fusion layer into the next.
class FusionChain {
public:
    FusionChain(std::vector<FusionVars> modules, Var text_bank);

    FusionChain(const FusionChain&) = delete;
    FusionChain& operator=(const FusionChain&) = delete;

    // The returned hook refers to this chain.
    FusionHook hook();
    Var text_stream() const noexcept { return m_text; }
    // Visual gate activations recorded so far, in layer order.
    const std::vector<Var>& visual_gates() const noexcept { return m_visual_gates; }

private:
    std::vector<FusionVars> m_modules;
    Var m_text;
    std::vector<Var> m_visual_gates;
};

// Elementwise mean over the class axis.
Tensor global_medical_context(std::span<const Tensor> class_banks);

enum class ContextStrategy { null, retrieval, mean, oracle };

const char* strategy_name(ContextStrategy strategy);
ContextStrategy parse_strategy(std::string_view name);

// Index of the class embedding with the largest cosine to `query`; ties go to
// the lowest index.
int retrieve_class(const Tensor& query, std::span<const Tensor> class_text_embeddings);

// null -> no context; mean -> global_medical_context; retrieval -> the bank of
// the retrieved class (query must come from a hook-free pass); oracle -> the
// bank of `true_class`.
std::optional<Tensor> select_context(ContextStrategy strategy, const Tensor& query_embedding,
                                     std::span<const Tensor> class_text_embeddings,
                                     std::span<const Tensor> class_banks, std::optional<int> true_class);

} // namespace anchorfuse
