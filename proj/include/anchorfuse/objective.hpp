#pragma once

#include "anchorfuse/tape.hpp"
#include "anchorfuse/tensor.hpp"

#include <span>
#include <vector>

namespace anchorfuse {

struct LossConfig {
    double lambda_kd = 1.0;
    double lambda_align = 0.5;
    double lambda_high = 0.5;
    double lambda_low = 0.5;
    double temperature = 2.0;

    void validate() const;
    friend bool operator==(const LossConfig&, const LossConfig&) = default;
};

struct LossBreakdown {
    double total = 0.0;
    double ce = 0.0;
    double kl = 0.0;
    double anchor = 0.0;
    double align = 0.0;
    double conf = 0.0;
    double w = 1.0;

    friend bool operator==(const LossBreakdown&, const LossBreakdown&) = default;
};

// Field-wise arithmetic mean.
LossBreakdown mean_breakdown(std::span<const LossBreakdown> items);

// s_c = scale * <image, text_c>; all embeddings must be unit norm within 1e-6.
std::vector<double> logits(const Tensor& image_embedding, std::span<const Tensor> class_text_embeddings,
                           double logit_scale);
double cross_entropy(std::span<const double> s, int y);

struct Confidence {
    double conf = 0.0;
    double w = 1.0;
};

// conf = 1 - H(p) / log C.
Confidence confidence(std::span<const double> p);
// KL(softmax(s/T) || softmax(s0/T)).
double kl_distill(std::span<const double> s, std::span<const double> s0, double temperature);
// 1 - cosine(a, b).
double align_loss(const Tensor& fused_visual, const Tensor& text_rep);

struct LossInputs {
    std::span<const double> s;
    std::span<const double> s0;
    int y = 0;
    const Tensor* f_text = nullptr;
    const Tensor* f_high = nullptr;
    const Tensor* f_low = nullptr;
    const Tensor* fused_visual = nullptr;
    const Tensor* text_rep = nullptr;
};

// Ablation switches shared by the scalar and recorded objectives.
struct LossSwitches {
    bool use_anchor = true;
    bool use_conf_weighting = true; // when off, w = 1 and conf = 0
};

LossBreakdown total_loss(const LossInputs& in, const LossConfig& cfg, LossSwitches switches = {});

// Recorded counterparts. `s` is 1 x C.
Var logits(Var image_embedding, Var class_text_embeddings, double logit_scale);
Var cross_entropy(Var s, int y);
Var kl_distill(Var s, std::span<const double> s0, double temperature);
Var align_loss(Var fused_visual, Var text_rep);

struct RecordedLoss {
    Var total;
    LossBreakdown values;
};

// w is computed from the current logits and enters as a constant.
RecordedLoss total_loss(Var s, std::span<const double> s0, int y, Var f_text, const Tensor& f_high,
                        const Tensor& f_low, Var fused_visual, Var text_rep, const LossConfig& cfg,
                        LossSwitches switches = {});

} // namespace anchorfuse
