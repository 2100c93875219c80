#include "anchorfuse/anchors.hpp"

#include "anchorfuse/error.hpp"

#include <array>
#include <cmath>

namespace anchorfuse {

namespace {

void check_lambdas(double lambda_high, double lambda_low) {
    if (!(lambda_high >= 0.0) || !(lambda_low >= 0.0)) {
        fail(ErrorCategory::invalid_argument, "anchor weights must be non-negative, got lambda_high=" +
                                                  std::to_string(lambda_high) +
                                                  " lambda_low=" + std::to_string(lambda_low));
    }
}

void check_sizes(std::size_t text, const Tensor& high, const Tensor& low) {
    if (high.size() != text || low.size() != text) {
        fail(ErrorCategory::shape_mismatch, "anchor loss: text embedding has " + std::to_string(text) +
                                                " entries, anchors " + high.shape_string() + " and " +
                                                low.shape_string());
    }
}

Tensor reshaped(const Tensor& t, std::vector<std::size_t> shape) {
    return Tensor(std::move(shape), std::vector<double>(t.values().begin(), t.values().end()));
}

} // namespace

Tensor build_high_anchor(std::span<const std::string> templates, std::string_view class_name,
                         const FrozenBackbone& backbone) {
    if (templates.empty()) {
        fail(ErrorCategory::invalid_argument, "high anchor needs at least one template");
    }
    Tensor mean;
    for (const std::string& pattern : templates) {
        const Tensor e = backbone.text_embedding(expand_pattern(pattern, class_name));
        if (mean.empty()) {
            mean = Tensor(e.shape(), 0.0);
        }
        for (std::size_t i = 0; i < e.size(); ++i) mean[i] += e[i];
    }
    for (double& v : mean.values()) v /= static_cast<double>(templates.size());
    return l2_normalize(mean);
}

Tensor build_low_anchor(std::span<const Tensor> support_images, const FrozenBackbone& backbone) {
    if (support_images.empty()) {
        fail(ErrorCategory::invalid_argument, "low anchor needs at least one support image");
    }
    Tensor mean;
    for (const Tensor& image : support_images) {
        const Tensor e = l2_normalize(backbone.image_embedding(image));
        if (mean.empty()) {
            mean = Tensor(e.shape(), 0.0);
        }
        for (std::size_t i = 0; i < e.size(); ++i) mean[i] += e[i];
    }
    for (double& v : mean.values()) v /= static_cast<double>(support_images.size());
    return mean;
}

AnchorSet build_anchors(const FewShotTask& task, std::span<const int> classes, int shots,
                        const FrozenBackbone& backbone) {
    AnchorSet anchors;
    for (int c : classes) {
        if (c < 0 || c >= task.class_count()) {
            fail(ErrorCategory::invalid_argument, "class index " + std::to_string(c) + " out of range");
        }
        const auto i = static_cast<std::size_t>(c);
        anchors.high.push_back(build_high_anchor(task.expert_templates[i], task.class_names[i], backbone));
        const std::vector<Tensor> images = task.support_images(c, shots);
        anchors.low.push_back(build_low_anchor(images, backbone));
    }
    return anchors;
}

double anchor_loss(const Tensor& f_text, const Tensor& f_high, const Tensor& f_low, double lambda_high,
                   double lambda_low) {
    check_lambdas(lambda_high, lambda_low);
    check_sizes(f_text.size(), f_high, f_low);
    double high = 0.0;
    double low = 0.0;
    for (std::size_t i = 0; i < f_text.size(); ++i) {
        high += std::abs(f_text[i] - f_high[i]);
        low += std::abs(f_text[i] - f_low[i]);
    }
    return lambda_high * high + lambda_low * low;
}

Var anchor_loss(Var f_text, const Tensor& f_high, const Tensor& f_low, double lambda_high, double lambda_low) {
    check_lambdas(lambda_high, lambda_low);
    check_sizes(f_text.value().size(), f_high, f_low);
    Tape& tape = *f_text.tape;
    const std::vector<std::size_t> shape = f_text.value().shape();
    Var high = abs_sum(sub(f_text, tape.constant(reshaped(f_high, shape))));
    Var low = abs_sum(sub(f_text, tape.constant(reshaped(f_low, shape))));
    const std::array<Var, 2> terms{high, low};
    const std::array<double, 2> weights{lambda_high, lambda_low};
    return weighted_sum(terms, weights);
}

} // namespace anchorfuse
