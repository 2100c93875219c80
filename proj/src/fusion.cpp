#include "anchorfuse/fusion.hpp"

#include "anchorfuse/error.hpp"

#include <array>
#include <cmath>

namespace anchorfuse {

std::string fusion_prefix(int layer) { return "fusion.layer" + std::to_string(layer) + "."; }

namespace {

Tensor gaussian(Rng& rng, std::size_t rows, std::size_t cols, double stddev) {
    Tensor t = Tensor::matrix(rows, cols);
    for (double& v : t.values()) v = rng.normal(0.0, stddev);
    return t;
}

constexpr std::array<const char*, 4> kAttentionParts = {"query", "key", "value", "output"};

AttentionVars bind_attention(Tape& tape, const ParameterRegistry& registry, const std::string& prefix) {
    return {tape.parameter(registry.at(prefix + "query")), tape.parameter(registry.at(prefix + "key")),
            tape.parameter(registry.at(prefix + "value")), tape.parameter(registry.at(prefix + "output"))};
}

} // namespace

void add_fusion_parameters(ParameterRegistry& registry, int layer, int visual_width, int text_width, Rng& rng,
                           double init_std) {
    const auto dv = static_cast<std::size_t>(visual_width);
    const auto dt = static_cast<std::size_t>(text_width);
    const auto du = static_cast<std::size_t>(unified_width(visual_width, text_width));
    const std::string p = fusion_prefix(layer);
    registry.add(p + "visual_in", gaussian(rng, dv, du, init_std), false);
    registry.add(p + "text_in", gaussian(rng, dt, du, init_std), false);
    for (const char* direction : {"visual_from_text.", "text_from_visual."}) {
        for (const char* part : kAttentionParts) {
            registry.add(p + direction + part, gaussian(rng, du, du, init_std), false);
        }
    }
    registry.add(p + "visual_out", gaussian(rng, du, dv, init_std), false);
    registry.add(p + "text_out", gaussian(rng, du, dt, init_std), false);
    registry.add(p + "visual_gate", Tensor::matrix(2 * dv, dv), false);
    registry.add(p + "text_gate", Tensor::matrix(2 * dt, dt), false);
}

FusionVars bind_fusion(Tape& tape, const ParameterRegistry& registry, int layer, int heads) {
    const std::string p = fusion_prefix(layer);
    FusionVars f;
    f.layer = layer;
    f.heads = heads;
    f.visual_in = tape.parameter(registry.at(p + "visual_in"));
    f.text_in = tape.parameter(registry.at(p + "text_in"));
    f.visual_from_text = bind_attention(tape, registry, p + "visual_from_text.");
    f.text_from_visual = bind_attention(tape, registry, p + "text_from_visual.");
    f.visual_out = tape.parameter(registry.at(p + "visual_out"));
    f.text_out = tape.parameter(registry.at(p + "text_out"));
    f.visual_gate = tape.parameter(registry.at(p + "visual_gate"));
    f.text_gate = tape.parameter(registry.at(p + "text_gate"));
    return f;
}

UnifiedPrompts project_to_unified(Var visual_prompts, Var text_prompts, const FusionVars& module) {
    return {matmul(visual_prompts, module.visual_in), matmul(text_prompts, module.text_in)};
}

Var mhca(Var queries, Var keys, Var values, const AttentionVars& weights, int heads) {
    if (keys.rows() == 0) {
        fail(ErrorCategory::invalid_argument, "cross-attention without context tokens");
    }
    return attention(queries, keys, values, weights, heads, false);
}

GatedUpdate gated_residual(Var prompts, Var delta, Var gate_weights) {
    if (!prompts.value().same_shape(delta.value())) {
        fail(ErrorCategory::shape_mismatch, "gated residual: prompts " + prompts.value().shape_string() +
                                                " vs update " + delta.value().shape_string());
    }
    const std::size_t d = prompts.cols();
    if (gate_weights.rows() != 2 * d || gate_weights.cols() != d) {
        fail(ErrorCategory::shape_mismatch, "gate weights must be " + std::to_string(2 * d) + "x" + std::to_string(d) +
                                                ", got " + gate_weights.value().shape_string());
    }
    Var gate = sigmoid(matmul(concat_cols(prompts, delta), gate_weights));
    return {add(prompts, mul(gate, delta)), gate};
}

FusedPrompts fuse_layer(Var visual_prompts, Var text_prompts, const FusionVars& module, int layer) {
    if (module.layer != layer) {
        fail(ErrorCategory::invalid_argument, "fusion module for layer " + std::to_string(module.layer) +
                                                  " applied at layer " + std::to_string(layer));
    }
    const UnifiedPrompts u = project_to_unified(visual_prompts, text_prompts, module);
    Var visual_delta = matmul(mhca(u.visual, u.text, u.text, module.visual_from_text, module.heads), module.visual_out);
    Var text_delta = matmul(mhca(u.text, u.visual, u.visual, module.text_from_visual, module.heads), module.text_out);
    return {gated_residual(visual_prompts, visual_delta, module.visual_gate),
            gated_residual(text_prompts, text_delta, module.text_gate)};
}

FusionChain::FusionChain(std::vector<FusionVars> modules, Var text_bank)
    : m_modules(std::move(modules)), m_text(text_bank) {}

FusionHook FusionChain::hook() {
    FusionHook h;
    for (const auto& m : m_modules) {
        h.layers.push_back(m.layer);
    }
    h.refine = [this](int layer, Var prompts) {
        for (const auto& m : m_modules) {
            if (m.layer == layer) {
                FusedPrompts fused = fuse_layer(prompts, m_text, m, layer);
                m_text = fused.text.refined;
                m_visual_gates.push_back(fused.visual.gate);
                return fused.visual.refined;
            }
        }
        fail(ErrorCategory::invalid_argument, "no fusion module at layer " + std::to_string(layer));
    };
    return h;
}

Tensor global_medical_context(std::span<const Tensor> class_banks) {
    if (class_banks.empty()) {
        fail(ErrorCategory::invalid_argument, "global context needs at least one class bank");
    }
    Tensor mean = Tensor(class_banks.front().shape(), 0.0);
    for (const Tensor& bank : class_banks) {
        if (!bank.same_shape(mean)) {
            fail(ErrorCategory::shape_mismatch, "class banks differ in shape: " + mean.shape_string() + " vs " +
                                                    bank.shape_string());
        }
        for (std::size_t i = 0; i < bank.size(); ++i) mean[i] += bank[i];
    }
    for (double& v : mean.values()) v /= static_cast<double>(class_banks.size());
    return mean;
}

const char* strategy_name(ContextStrategy strategy) {
    switch (strategy) {
    case ContextStrategy::null: return "null";
    case ContextStrategy::retrieval: return "retrieval";
    case ContextStrategy::mean: return "mean";
    case ContextStrategy::oracle: return "oracle";
    }
    return "unknown";
}

ContextStrategy parse_strategy(std::string_view name) {
    for (auto s : {ContextStrategy::null, ContextStrategy::retrieval, ContextStrategy::mean, ContextStrategy::oracle}) {
        if (name == strategy_name(s)) {
            return s;
        }
    }
    fail(ErrorCategory::config, "unknown inference context strategy '" + std::string(name) + "'");
}

int retrieve_class(const Tensor& query, std::span<const Tensor> class_text_embeddings) {
    if (class_text_embeddings.empty()) {
        fail(ErrorCategory::invalid_argument, "retrieval over an empty class set");
    }
    const double qn = kernels::norm2(query.values());
    if (!(qn > 0.0)) {
        fail(ErrorCategory::numeric, "retrieval query has zero norm");
    }
    int best = 0;
    double best_score = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < class_text_embeddings.size(); ++c) {
        const Tensor& t = class_text_embeddings[c];
        if (t.size() != query.size()) {
            fail(ErrorCategory::shape_mismatch, "retrieval query " + query.shape_string() + " vs class embedding " +
                                                    t.shape_string());
        }
        const double score = kernels::dot(query.values(), t.values()) / (qn * kernels::norm2(t.values()));
        if (score > best_score) {
            best_score = score;
            best = static_cast<int>(c);
        }
    }
    return best;
}

std::optional<Tensor> select_context(ContextStrategy strategy, const Tensor& query_embedding,
                                     std::span<const Tensor> class_text_embeddings,
                                     std::span<const Tensor> class_banks, std::optional<int> true_class) {
    switch (strategy) {
    case ContextStrategy::null:
        return std::nullopt;
    case ContextStrategy::mean:
        return global_medical_context(class_banks);
    case ContextStrategy::retrieval: {
        if (class_text_embeddings.size() != class_banks.size()) {
            fail(ErrorCategory::shape_mismatch, "retrieval needs one bank per class embedding");
        }
        return class_banks[static_cast<std::size_t>(retrieve_class(query_embedding, class_text_embeddings))];
    }
    case ContextStrategy::oracle:
        if (!true_class) {
            fail(ErrorCategory::invalid_argument, "oracle context requires the true class");
        }
        if (*true_class < 0 || static_cast<std::size_t>(*true_class) >= class_banks.size()) {
            fail(ErrorCategory::invalid_argument, "oracle class " + std::to_string(*true_class) + " out of range");
        }
        return class_banks[static_cast<std::size_t>(*true_class)];
    }
    fail(ErrorCategory::invalid_argument, "unknown context strategy");
}

} // namespace anchorfuse
