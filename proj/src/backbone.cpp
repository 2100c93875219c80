#include "anchorfuse/backbone.hpp"

#include "anchorfuse/error.hpp"
#include "anchorfuse/rng.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace anchorfuse {

void BackboneConfig::validate() const {
    auto positive = [](int v, const char* name) {
        if (v <= 0) fail(ErrorCategory::config, std::string("backbone ") + name + " must be positive");
    };
    positive(image_depth, "image_depth");
    positive(text_depth, "text_depth");
    positive(image_width, "image_width");
    positive(text_width, "text_width");
    positive(heads, "heads");
    positive(image_size, "image_size");
    positive(patch_size, "patch_size");
    positive(vocab_size, "vocab_size");
    positive(max_text_len, "max_text_len");
    positive(embed_dim, "embed_dim");
    positive(mlp_ratio, "mlp_ratio");
    if (image_size % patch_size != 0) {
        fail(ErrorCategory::config, "image_size " + std::to_string(image_size) + " not divisible by patch_size " +
                                        std::to_string(patch_size));
    }
    if (image_width % heads != 0 || text_width % heads != 0) {
        fail(ErrorCategory::config, "image_width and text_width must be divisible by heads");
    }
}

void BackboneConfig::validate_fusion_layers(std::span<const int> layers) const {
    for (int l : layers) {
        if (l < 0 || l >= image_depth) {
            fail(ErrorCategory::config, "fusion layer " + std::to_string(l) + " outside image depth " +
                                            std::to_string(image_depth));
        }
    }
}

bool FusionHook::active_at(int layer) const {
    return refine && std::find(layers.begin(), layers.end(), layer) != layers.end();
}

namespace {

Tensor gaussian(Rng& rng, std::size_t rows, std::size_t cols, double variance) {
    Tensor t = Tensor::matrix(rows, cols);
    const double stddev = std::sqrt(variance);
    for (double& v : t.values()) {
        v = rng.normal(0.0, stddev);
    }
    return t;
}

} // namespace

FrozenBackbone::FrozenBackbone(const BackboneConfig& config) : m_config(config), m_logit_scale(std::exp(2.0)) {
    config.validate();
    Rng rng(config.seed);
    const auto dv = static_cast<std::size_t>(config.image_width);
    const auto dt = static_cast<std::size_t>(config.text_width);
    const auto patch_dim = static_cast<std::size_t>(config.patch_size * config.patch_size);
    const auto patches = static_cast<std::size_t>(config.num_patches());
    const auto embed = static_cast<std::size_t>(config.embed_dim);

    // Weights have variance 1/fan_in; embeddings use 1/width.
    auto add = [&](const std::string& name, std::size_t rows, std::size_t cols, double variance) {
        return &m_params.add(name, gaussian(rng, rows, cols, variance), true);
    };
    m_patch_proj = add("image.patch_proj", patch_dim, dv, 1.0 / static_cast<double>(patch_dim));
    m_image_pos = add("image.position", patches + 1, dv, 1.0 / static_cast<double>(dv));
    m_summary_token = add("image.summary_token", 1, dv, 1.0 / static_cast<double>(dv));
    auto make_blocks = [&](const std::string& prefix, int depth, std::size_t width, std::vector<Block>& out) {
        const std::size_t hidden = width * static_cast<std::size_t>(config.mlp_ratio);
        const double inv_w = 1.0 / static_cast<double>(width);
        for (int l = 0; l < depth; ++l) {
            const std::string p = prefix + ".layer" + std::to_string(l) + ".";
            Block b{};
            b.wq = add(p + "attn.query", width, width, inv_w);
            b.wk = add(p + "attn.key", width, width, inv_w);
            b.wv = add(p + "attn.value", width, width, inv_w);
            b.wo = add(p + "attn.output", width, width, inv_w);
            b.w_up = add(p + "mlp.up", width, hidden, inv_w);
            b.w_down = add(p + "mlp.down", hidden, width, 1.0 / static_cast<double>(hidden));
            out.push_back(b);
        }
    };
    make_blocks("image", config.image_depth, dv, m_image_blocks);
    m_image_head = add("image.head", dv, embed, 1.0 / static_cast<double>(dv));

    m_token_table = add("text.token_embedding", static_cast<std::size_t>(config.vocab_size), dt,
                        1.0 / static_cast<double>(dt));
    m_text_pos = add("text.position", static_cast<std::size_t>(config.max_text_len), dt, 1.0 / static_cast<double>(dt));
    make_blocks("text", config.text_depth, dt, m_text_blocks);
    m_text_head = add("text.head", dt, embed, 1.0 / static_cast<double>(dt));
}

FrozenBackbone init_frozen(const BackboneConfig& config) { return FrozenBackbone(config); }

Var FrozenBackbone::run_block(Tape& tape, Var x, const Block& block, bool causal) const {
    const AttentionVars w{tape.constant_ref(*block.wq), tape.constant_ref(*block.wk), tape.constant_ref(*block.wv),
                          tape.constant_ref(*block.wo)};
    Var h = layer_norm_rows(x);
    x = add(x, attention(h, h, h, w, m_config.heads, causal));
    h = layer_norm_rows(x);
    Var up = gelu(matmul(h, tape.constant_ref(*block.w_up)));
    return add(x, matmul(up, tape.constant_ref(*block.w_down)));
}

Tensor FrozenBackbone::embed_patches(const Tensor& image) const {
    const int size = m_config.image_size;
    const int p = m_config.patch_size;
    const int side = m_config.patches_per_side();
    if (image.size() != static_cast<std::size_t>(size * size)) {
        fail(ErrorCategory::shape_mismatch, "image has " + std::to_string(image.size()) + " pixels, expected " +
                                                std::to_string(size * size));
    }
    const auto patch_dim = static_cast<std::size_t>(p * p);
    Tensor patches = Tensor::matrix(static_cast<std::size_t>(side * side), patch_dim);
    for (int pr = 0; pr < side; ++pr) {
        for (int pc = 0; pc < side; ++pc) {
            const auto row = static_cast<std::size_t>(pr * side + pc);
            for (int r = 0; r < p; ++r) {
                for (int c = 0; c < p; ++c) {
                    patches(row, static_cast<std::size_t>(r * p + c)) =
                        image[static_cast<std::size_t>((pr * p + r) * size + pc * p + c)];
                }
            }
        }
    }
    const std::size_t dv = m_patch_proj->cols();
    Tensor seq = Tensor::matrix(patches.rows() + 1, dv);
    for (std::size_t c = 0; c < dv; ++c) {
        seq(0, c) = (*m_summary_token)(0, c) + (*m_image_pos)(0, c);
    }
    kernels::gemm_nn(patches.rows(), patch_dim, dv, patches.data(), m_patch_proj->data(), seq.data() + dv, false);
    for (std::size_t r = 1; r < seq.rows(); ++r) {
        for (std::size_t c = 0; c < dv; ++c) {
            seq(r, c) += (*m_image_pos)(r, c);
        }
    }
    return seq;
}

ImageEncoding FrozenBackbone::encode_image(Tape& tape, const Tensor& image, std::span<const Var> prompts,
                                           const FusionHook* hook) const {
    const auto depth = static_cast<std::size_t>(m_config.image_depth);
    if (!prompts.empty() && prompts.size() != depth) {
        fail(ErrorCategory::shape_mismatch, "expected prompts for all " + std::to_string(depth) + " image layers, got " +
                                                std::to_string(prompts.size()));
    }
    const std::size_t prompt_rows = prompts.empty() ? 0 : prompts.front().rows();
    for (Var p : prompts) {
        if (p.rows() != prompt_rows || p.cols() != static_cast<std::size_t>(m_config.image_width)) {
            fail(ErrorCategory::shape_mismatch, "visual prompts must be " + std::to_string(prompt_rows) + "x" +
                                                    std::to_string(m_config.image_width) + ", got " +
                                                    p.value().shape_string());
        }
    }
    const std::size_t base_rows = static_cast<std::size_t>(m_config.num_patches()) + 1;
    Var x = tape.constant(embed_patches(image));
    for (std::size_t l = 0; l < depth; ++l) {
        if (prompt_rows > 0) {
            Var p = prompts[l];
            if (hook && hook->active_at(static_cast<int>(l))) {
                Var refined = hook->refine(static_cast<int>(l), p);
                if (!refined.value().same_shape(p.value())) {
                    fail(ErrorCategory::shape_mismatch, "fusion hook at layer " + std::to_string(l) + " returned " +
                                                            refined.value().shape_string() + " for prompts " +
                                                            p.value().shape_string());
                }
                p = refined;
            }
            Var base = l == 0 ? x : slice_rows(x, 0, base_rows);
            const std::array<Var, 2> parts{base, p};
            x = concat_rows(parts);
        }
        x = run_block(tape, x, m_image_blocks[l], false);
    }
    Var summary = layer_norm_rows(slice_rows(x, 0, 1));
    Var pooled = l2_normalize(matmul(summary, tape.constant_ref(*m_image_head)));
    return {x, pooled};
}

Var FrozenBackbone::encode_text(Tape& tape, Var context, std::span<const int> token_ids) const {
    const std::size_t context_rows = context.valid() ? context.rows() : 0;
    const std::size_t total = context_rows + token_ids.size();
    if (total == 0) {
        fail(ErrorCategory::invalid_argument, "encode_text on an empty sequence");
    }
    if (total > static_cast<std::size_t>(m_config.max_text_len)) {
        fail(ErrorCategory::invalid_argument, "text sequence of length " + std::to_string(total) +
                                                  " exceeds max_text_len " + std::to_string(m_config.max_text_len));
    }
    const auto dt = static_cast<std::size_t>(m_config.text_width);
    if (context.valid() && context.cols() != dt) {
        fail(ErrorCategory::shape_mismatch, "text context must have width " + std::to_string(dt) + ", got " +
                                                context.value().shape_string());
    }
    Tensor tokens = token_rows(token_ids);
    Tensor positions = Tensor::matrix(total, dt);
    std::copy_n(m_text_pos->data(), total * dt, positions.data());

    Var x;
    if (context_rows > 0) {
        Var embedded = tape.constant(std::move(tokens));
        if (token_ids.empty()) {
            x = context;
        } else {
            const std::array<Var, 2> parts{context, embedded};
            x = concat_rows(parts);
        }
        x = add(x, tape.constant(std::move(positions)));
    } else {
        for (std::size_t i = 0; i < tokens.size(); ++i) tokens[i] += positions[i];
        x = tape.constant(std::move(tokens));
    }
    for (const Block& block : m_text_blocks) {
        x = run_block(tape, x, block, true);
    }
    Var last = layer_norm_rows(slice_rows(x, total - 1, 1));
    return l2_normalize(matmul(last, tape.constant_ref(*m_text_head)));
}

Tensor FrozenBackbone::image_embedding(const Tensor& image) const {
    Tape tape(false);
    return encode_image(tape, image, {}).pooled.value();
}

Tensor FrozenBackbone::text_embedding(std::span<const int> token_ids) const {
    Tape tape(false);
    return encode_text(tape, Var{}, token_ids).value();
}

Tensor FrozenBackbone::token_rows(std::span<const int> token_ids) const {
    const std::size_t dt = m_token_table->cols();
    Tensor out = Tensor::matrix(token_ids.size(), dt);
    for (std::size_t i = 0; i < token_ids.size(); ++i) {
        const int id = token_ids[i];
        if (id < 0 || id >= m_config.vocab_size) {
            fail(ErrorCategory::invalid_argument, "token id " + std::to_string(id) + " outside vocabulary");
        }
        std::copy_n(m_token_table->data() + static_cast<std::size_t>(id) * dt, dt, out.data() + i * dt);
    }
    return out;
}

Tensor FrozenBackbone::mean_token_embedding(std::span<const int> token_ids) const {
    if (token_ids.empty()) {
        fail(ErrorCategory::invalid_argument, "mean token embedding of an empty sequence");
    }
    const Tensor rows = token_rows(token_ids);
    Tensor out = Tensor::matrix(1, rows.cols());
    for (std::size_t r = 0; r < rows.rows(); ++r) {
        for (std::size_t c = 0; c < rows.cols(); ++c) out[c] += rows(r, c);
    }
    for (double& v : out.values()) v /= static_cast<double>(rows.rows());
    return out;
}

} // namespace anchorfuse
