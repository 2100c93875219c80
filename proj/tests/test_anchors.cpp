#include "support.hpp"

#include <doctest.h>

#include <cmath>

using namespace anchorfuse;
using namespace anchorfuse::testing;

namespace {

const FrozenBackbone& backbone() {
    static const FrozenBackbone b(tiny_model(1).backbone_config);
    return b;
}

const FewShotTask& task() {
    static const FewShotTask t = [] {
        SyntheticTaskSpec s = tiny_model(1).task_spec;
        s.k_max = 3;
        return generate_task(s);
    }();
    return t;
}

} // namespace

TEST_CASE("high anchor examples") {
    const std::vector<std::string> one{"a medical image of {c}"};
    const Tensor single = build_high_anchor(one, "glioma", backbone());
    CHECK(max_abs_diff(single, backbone().text_embedding(expand_pattern(one[0], "glioma"))) <= 1e-15);

    const std::vector<std::string> dup{one[0], one[0]};
    CHECK(max_abs_diff(build_high_anchor(dup, "glioma", backbone()), single) <= 1e-15);

    std::vector<std::string> many{"{c}", "a {c}", "a photo of {c}", "medical image of {c}"};
    const Tensor base = build_high_anchor(many, "nevus", backbone());
    CHECK(std::abs(kernels::norm2(base.values()) - 1.0) <= 1e-12);
    std::reverse(many.begin(), many.end());
    CHECK(max_abs_diff(build_high_anchor(many, "nevus", backbone()), base) <= 1e-15);

    // renormalized mean of the per-template embeddings
    Tensor mean = Tensor::matrix(1, base.cols());
    for (const auto& p : many) {
        const Tensor e = backbone().text_embedding(expand_pattern(p, "nevus"));
        for (std::size_t i = 0; i < e.size(); ++i) mean[i] += e[i] / 4.0;
    }
    const double n = kernels::norm2(mean.values());
    for (std::size_t i = 0; i < mean.size(); ++i) CHECK(std::abs(base[i] - mean[i] / n) <= 1e-14);

    CHECK_THROWS_AS(build_high_anchor(std::vector<std::string>{}, "glioma", backbone()), Error);
}

TEST_CASE("low anchor examples") {
    const auto images = task().support_images(0, 3);
    const Tensor k1 = build_low_anchor(std::span(images.data(), 1), backbone());
    CHECK(max_abs_diff(k1, backbone().image_embedding(images[0])) <= 1e-15);
    CHECK(std::abs(kernels::norm2(k1.values()) - 1.0) <= 1e-12);

    const std::vector<Tensor> same{images[0], images[0], images[0]};
    CHECK(max_abs_diff(build_low_anchor(same, backbone()), k1) <= 1e-15);

    const Tensor k3 = build_low_anchor(images, backbone());
    CHECK(kernels::norm2(k3.values()) <= 1.0 + 1e-12);
    CHECK(kernels::norm2(k3.values()) > 0.0);
    for (std::size_t i = 0; i < k3.size(); ++i) {
        double s = 0.0;
        for (const auto& img : images) s += backbone().image_embedding(img)[i];
        CHECK(std::abs(k3[i] - s / 3.0) <= 1e-15);
    }
    CHECK_THROWS_AS(build_low_anchor(std::vector<Tensor>{}, backbone()), Error);
}

TEST_CASE("mean of two orthogonal unit features") {
    const Tensor e1 = Tensor::row({1, 0}), e2 = Tensor::row({0, 1});
    Tensor mean = Tensor::matrix(1, 2);
    for (std::size_t i = 0; i < 2; ++i) mean[i] = 0.5 * (e1[i] + e2[i]);
    CHECK(std::abs(kernels::norm2(mean.values()) - std::sqrt(0.5)) <= 1e-15);
    CHECK(std::abs(kernels::norm2(mean.values()) - 0.7071) < 1e-4);
}

TEST_CASE("anchor set for a task") {
    const std::vector<int> classes{2, 0};
    const AnchorSet a = build_anchors(task(), classes, 2, backbone());
    CHECK(a.class_count() == 2);
    for (std::size_t i = 0; i < 2; ++i) {
        const int c = classes[i];
        CHECK(a.high[i] == build_high_anchor(task().expert_templates[static_cast<std::size_t>(c)],
                                             task().class_names[static_cast<std::size_t>(c)], backbone()));
        CHECK(a.low[i] == build_low_anchor(task().support_images(c, 2), backbone()));
        CHECK(std::abs(kernels::norm2(a.high[i].values()) - 1.0) <= 1e-12);
        CHECK(kernels::norm2(a.low[i].values()) <= 1.0 + 1e-12);
    }
    CHECK(build_anchors(task(), classes, 2, backbone()) == a);
    CHECK_THROWS_AS(build_anchors(task(), classes, 4, backbone()), Error);
}

TEST_CASE("anchor loss examples") {
    const Tensor a = Tensor::row({0.3, -0.2, 0.9});
    CHECK(anchor_loss(a, a, a, 0.5, 0.5) == 0.0);
    CHECK(anchor_loss(Tensor::row({1, 0}), Tensor::row({0, 1}), Tensor::row({1, 0}), 1.0, 1.0) == 2.0);
    Rng rng(3);
    for (int i = 0; i < 100; ++i) {
        const Tensor f = random_tensor(rng, 1, 5), h = random_tensor(rng, 1, 5), l = random_tensor(rng, 1, 5);
        CHECK(anchor_loss(f, h, l, 0.0, 0.0) == 0.0);
        const double lh = rng.uniform(), ll = rng.uniform();
        double want = 0.0;
        for (std::size_t k = 0; k < 5; ++k) want += lh * std::abs(f[k] - h[k]) + ll * std::abs(f[k] - l[k]);
        const double got = anchor_loss(f, h, l, lh, ll);
        CHECK(got >= 0.0);
        CHECK(got == doctest::Approx(want).epsilon(1e-14));
    }
    CHECK_THROWS_AS(anchor_loss(a, a, a, -0.1, 0.5), Error);
    CHECK_THROWS_AS(anchor_loss(a, a, a, 0.5, -0.1), Error);
    CHECK_THROWS_AS(anchor_loss(a, Tensor::row({1, 0}), a, 0.5, 0.5), Error);
}

TEST_CASE("anchor loss gradient") {
    Rng rng(4);
    const Tensor h = random_tensor(rng, 1, 6), l = random_tensor(rng, 1, 6);
    const GradientComparison c = check_op(
        [&](Tape&, std::span<const Var> v) { return anchor_loss(v[0], h, l, 0.7, 0.3); }, {random_tensor(rng, 1, 6)});
    CHECK(c.failures == 0);

    // exact coincidence: zero subgradient
    Tape tape;
    Var f = tape.parameter(h);
    Var loss = anchor_loss(f, h, h, 1.0, 1.0);
    CHECK(loss.item() == 0.0);
    tape.backward(loss);
    const Tensor g = tape.grad(f);
    for (double v : g.values()) CHECK(v == 0.0);
}
