#pragma once

#include "anchorfuse/backbone.hpp"
#include "anchorfuse/dataset.hpp"

#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace anchorfuse {

// Per-class anchors, indexed by position in the class list they were built for.
struct AnchorSet {
    std::vector<Tensor> high; // unit norm
    std::vector<Tensor> low;  // mean of unit vectors, not renormalized

    int class_count() const { return static_cast<int>(high.size()); }
    friend bool operator==(const AnchorSet&, const AnchorSet&) = default;
};

// Mean of the frozen text embeddings of each expanded template, renormalized.
Tensor build_high_anchor(std::span<const std::string> templates, std::string_view class_name,
                         const FrozenBackbone& backbone);

// Mean of the normalized promptless image embeddings of the support images.
Tensor build_low_anchor(std::span<const Tensor> support_images, const FrozenBackbone& backbone);

// Anchors for `classes` (task class indices) from each class's first `shots`
// support images and its expert templates.
AnchorSet build_anchors(const FewShotTask& task, std::span<const int> classes, int shots,
                        const FrozenBackbone& backbone);

double anchor_loss(const Tensor& f_text, const Tensor& f_high, const Tensor& f_low, double lambda_high,
                   double lambda_low);
Var anchor_loss(Var f_text, const Tensor& f_high, const Tensor& f_low, double lambda_high, double lambda_low);

} // namespace anchorfuse
