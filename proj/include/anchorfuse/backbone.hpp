#pragma once

#include "anchorfuse/ops.hpp"
#include "anchorfuse/registry.hpp"
#include "anchorfuse/tape.hpp"

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

namespace anchorfuse {

struct BackboneConfig {
    int image_depth = 10;
    int text_depth = 4;
    int image_width = 32; // D_v
    int text_width = 24;  // D_t
    int heads = 4;
    int image_size = 16;
    int patch_size = 4;
    int vocab_size = 64;
    int max_text_len = 16;
    int embed_dim = 16;
    int mlp_ratio = 4;
    std::uint64_t seed = 0;

    void validate() const;
    // Every fusion layer must index an existing image layer.
    void validate_fusion_layers(std::span<const int> layers) const;

    int patches_per_side() const { return image_size / patch_size; }
    int num_patches() const { return patches_per_side() * patches_per_side(); }
};

// Called at each layer listed in `layers` with that layer's prompt tokens;
// must return a tensor of the same shape.
struct FusionHook {
    std::vector<int> layers;
    std::function<Var(int layer, Var prompts)> refine;

    bool active_at(int layer) const;
};

struct ImageEncoding {
    Var tokens; // final-layer sequence: [summary; patches; prompts]
    Var pooled; // 1 x embed_dim, unit norm
};

// Seed-deterministic stand-in for a pretrained dual encoder. All weights are
// registered frozen and never change after construction.
class FrozenBackbone {
public:
    explicit FrozenBackbone(const BackboneConfig& config);

    const BackboneConfig& config() const noexcept { return m_config; }
    const ParameterRegistry& parameters() const noexcept { return m_params; }
    std::uint64_t parameter_hash() const { return m_params.hash(); }
    // CLIP-style temperature, fixed at exp(2).
    double logit_scale() const noexcept { return m_logit_scale; }

    // `prompts` is either empty or holds one M_v x D_v tensor per image layer;
    // layer l's prompts replace the prompt outputs of layer l-1.
    ImageEncoding encode_image(Tape& tape, const Tensor& image, std::span<const Var> prompts,
                               const FusionHook* hook = nullptr) const;

    // Context rows (may be an invalid Var for no context) are prepended to the
    // embedded tokens; the output is the projected final-position feature.
    Var encode_text(Tape& tape, Var context, std::span<const int> token_ids) const;

    // Promptless, gradient-free conveniences.
    Tensor image_embedding(const Tensor& image) const;
    Tensor text_embedding(std::span<const int> token_ids) const;

    // Rows of the token embedding table.
    Tensor token_rows(std::span<const int> token_ids) const;
    // Mean token embedding, 1 x D_t.
    Tensor mean_token_embedding(std::span<const int> token_ids) const;

private:
    struct Block {
        const Tensor* wq;
        const Tensor* wk;
        const Tensor* wv;
        const Tensor* wo;
        const Tensor* w_up;
        const Tensor* w_down;
    };

    Var run_block(Tape& tape, Var x, const Block& block, bool causal) const;
    Tensor embed_patches(const Tensor& image) const;

    BackboneConfig m_config;
    ParameterRegistry m_params;
    double m_logit_scale;
    std::vector<Block> m_image_blocks;
    std::vector<Block> m_text_blocks;
    const Tensor* m_patch_proj = nullptr;
    const Tensor* m_image_pos = nullptr;
    const Tensor* m_summary_token = nullptr;
    const Tensor* m_image_head = nullptr;
    const Tensor* m_token_table = nullptr;
    const Tensor* m_text_pos = nullptr;
    const Tensor* m_text_head = nullptr;
};

FrozenBackbone init_frozen(const BackboneConfig& config);

} // namespace anchorfuse
