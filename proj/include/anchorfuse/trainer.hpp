#pragma once

#include "anchorfuse/anchors.hpp"
#include "anchorfuse/backbone.hpp"
#include "anchorfuse/dataset.hpp"
#include "anchorfuse/fusion.hpp"
#include "anchorfuse/objective.hpp"
#include "anchorfuse/registry.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace anchorfuse {

struct AdamWConfig {
    double lr = 2e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 1e-4;

    void validate() const;
    friend bool operator==(const AdamWConfig&, const AdamWConfig&) = default;
};

struct TrainConfig {
    int shots = 16; // K
    int epochs = 50;
    int batch_size = 4;
    AdamWConfig optimizer;
    std::uint64_t seed = 0;
    int visual_prompts = 4; // M_v, per image layer
    int text_context = 4;   // M_t
    std::vector<int> fusion_layers{5, 8};
    LossConfig loss;
    bool use_fusion = true;
    bool use_anchor = true;
    bool use_conf_weighting = true;

    void validate(const BackboneConfig& backbone) const;
    // Layers that actually carry a fusion module.
    std::vector<int> active_fusion_layers() const;
    LossSwitches switches() const { return {use_anchor, use_conf_weighting}; }
    friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

// Trainable tensors: one visual prompt block per image layer, the shared text
// context, and the fusion modules at `fusion_layers`.
struct PromptState {
    ParameterRegistry params;
    int visual_prompts = 0;
    int text_context = 0;
    std::vector<int> fusion_layers;
    int image_depth = 0;
    int heads = 1;

    bool has_fusion() const { return !fusion_layers.empty(); }
    friend bool operator==(const PromptState&, const PromptState&) = default;
};

std::string visual_prompt_name(int layer);
inline const char* const kTextContextName = "prompt.text_context";

PromptState init_prompt_state(const TrainConfig& cfg, const BackboneConfig& backbone, std::uint64_t seed);

struct AdamMoments {
    std::map<std::string, Tensor> m;
    std::map<std::string, Tensor> v;
};

// Decoupled decay (theta -= lr * wd * theta) followed by the bias-corrected
// adaptive step. `t` counts from 1.
void adamw_step(ParameterRegistry& registry, const GradientMap& grads, AdamMoments& moments, const AdamWConfig& cfg,
                int t);

// A prompt state bound onto a tape.
struct BoundPrompts {
    std::vector<Var> visual; // empty when M_v = 0
    Var context;             // invalid when M_t = 0
    std::vector<FusionVars> fusion;
    std::map<std::string, Var> by_name;
};

BoundPrompts bind_prompts(Tape& tape, const PromptState& state);

// Class bank: context rows plus the mean token embedding of the class tokens.
Tensor class_bank(const Tensor& context, const Tensor& token_mean);

// Prompts after running every fusion module on `bank` (a class bank or a mean
// of them, built from the bound context and `token_mean`). Fusion does not see
// the image, so one conditioning serves a whole batch.
struct ConditionedPrompts {
    std::vector<Var> visual;
    Var context; // refined text stream with the token mean taken out again
};

// Returns the bound prompts unchanged when there are no fusion modules.
ConditionedPrompts condition_prompts(Tape& tape, const BoundPrompts& bound, Var bank, const Tensor& token_mean);

struct TrainingSample {
    Tensor image;
    int label = 0; // position in the problem's class list
    std::vector<double> zero_shot_logits;
};

// Everything fixed during one adaptation run: the class subset, its minimal
// template tokens, anchors, and the support samples with frozen zero-shot
// logits.
class AdaptationProblem {
public:
    AdaptationProblem(const FewShotTask& task, std::vector<int> classes, const TrainConfig& cfg,
                      const FrozenBackbone& backbone);

    const std::vector<int>& classes() const noexcept { return m_classes; }
    const AnchorSet& anchors() const noexcept { return m_anchors; }
    const std::vector<TrainingSample>& samples() const noexcept { return m_samples; }
    const TrainConfig& config() const noexcept { return m_cfg; }
    const FrozenBackbone& backbone() const noexcept { return *m_backbone; }

    // Mean loss over `batch` (sample indices). Fusion is conditioned on the
    // mean bank of the batch's ground-truth classes. Fills `grads` for every
    // trainable entry when given, and the per-sample breakdowns in batch order
    // when `per_sample` is given.
    LossBreakdown batch_loss(const PromptState& state, std::span<const std::size_t> batch,
                             GradientMap* grads = nullptr, std::vector<LossBreakdown>* per_sample = nullptr) const;

    // Top-1 accuracy over all support samples, fusion conditioned on the mean
    // bank of all classes.
    double train_accuracy(const PromptState& state) const;

private:
    struct SampleForward {
        Var logits;
        RecordedLoss loss;
    };
    SampleForward forward(Tape& tape, const ConditionedPrompts& prompts, std::span<const Var> class_texts,
                          const TrainingSample& sample) const;
    // Conditioned prompts plus every class text under the refined context.
    std::pair<ConditionedPrompts, std::vector<Var>> condition(Tape& tape, const BoundPrompts& bound,
                                                              std::span<const int> labels) const;

    const FrozenBackbone* m_backbone;
    TrainConfig m_cfg;
    std::vector<int> m_classes;
    std::vector<std::vector<int>> m_tokens;
    std::vector<Tensor> m_token_means;
    AnchorSet m_anchors;
    std::vector<TrainingSample> m_samples;
};

// Loss of one sample conditioned on its own class.
LossBreakdown forward_train(const AdaptationProblem& problem, const PromptState& state, std::size_t sample);

struct ModelGradientCheck {
    std::map<std::string, GradientComparison> per_tensor;
    std::size_t coordinates = 0;
    std::size_t failures = 0;
    double max_relative_error = 0.0;
    double max_absolute_error = 0.0;
};

// Reverse-mode gradients of the full-batch objective against central
// differences, for every trainable tensor. The numeric side holds each
// sample's w at its value at `state`, as the analytic side does.
ModelGradientCheck check_gradients(const AdaptationProblem& problem, const PromptState& state, double eps,
                                   double rel_tol, double abs_tol);

struct AdaptedState {
    PromptState prompts;
    AnchorSet anchors;
    std::vector<int> classes; // task class indices the state was trained on
    TrainConfig config;
    std::vector<LossBreakdown> loss_history; // per-epoch means
    double train_accuracy = 0.0;

    friend bool operator==(const AdaptedState&, const AdaptedState&) = default;
};

// Trains on `classes` (all task classes when empty) using each class's first
// cfg.shots support images.
AdaptedState train_few_shot(const FewShotTask& task, const TrainConfig& cfg, const FrozenBackbone& backbone,
                            std::vector<int> classes = {});

void save_checkpoint(const AdaptedState& state, const std::filesystem::path& path);
AdaptedState load_checkpoint(const std::filesystem::path& path);

} // namespace anchorfuse
