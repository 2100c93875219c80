#pragma once

#include "anchorfuse/error.hpp"
#include "anchorfuse/harness.hpp"
#include "anchorfuse/ops.hpp"

#include <cmath>
#include <functional>
#include <map>
#include <numeric>
#include <string>
#include <vector>

namespace anchorfuse::testing {

inline Tensor random_tensor(Rng& rng, std::size_t rows, std::size_t cols, double stddev = 1.0) {
    Tensor t = Tensor::matrix(rows, cols);
    for (double& v : t.values()) v = rng.normal(0.0, stddev);
    return t;
}

inline Tensor random_unit(Rng& rng, std::size_t n) {
    Tensor t = random_tensor(rng, 1, n);
    double norm = 0.0;
    for (double v : t.values()) norm += v * v;
    norm = std::sqrt(norm);
    for (double& v : t.values()) v /= norm;
    return t;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

// Triple loop, no blocking.
inline Tensor naive_matmul(const Tensor& a, const Tensor& b) {
    Tensor c = Tensor::matrix(a.rows(), b.cols());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        for (std::size_t j = 0; j < b.cols(); ++j) {
            double s = 0.0;
            for (std::size_t k = 0; k < a.cols(); ++k) s += a(i, k) * b(k, j);
            c(i, j) = s;
        }
    }
    return c;
}

inline std::vector<double> naive_softmax(const std::vector<double>& s, double t) {
    std::vector<double> e(s.size());
    double z = 0.0;
    for (std::size_t i = 0; i < s.size(); ++i) z += e[i] = std::exp(s[i] / t);
    for (double& v : e) v /= z;
    return e;
}

using OpFn = std::function<Var(Tape&, std::span<const Var>)>;

// Reverse-mode gradient of <fn(inputs), R> against central differences, with
// R a fixed random weighting so non-scalar outputs are covered too.
inline GradientComparison check_op(const OpFn& fn, const std::vector<Tensor>& inputs, double eps = 1e-6,
                                   double rel_tol = 1e-6, double abs_tol = 1e-8, std::uint64_t seed = 11) {
    ParameterRegistry reg;
    std::vector<std::string> names;
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        names.push_back("x" + std::to_string(i));
        reg.add(names.back(), inputs[i], false);
    }
    Tensor weights;
    auto eval = [&](const ParameterRegistry& r, GradientMap* grads) {
        Tape tape(grads != nullptr);
        std::vector<Var> vars;
        for (const auto& n : names) vars.push_back(tape.parameter(r.at(n)));
        Var out = fn(tape, vars);
        if (weights.empty()) {
            Rng rng(seed);
            weights = random_tensor(rng, out.rows(), out.cols());
        }
        Var loss = sum(mul(out, tape.constant(weights)));
        if (grads) {
            tape.backward(loss);
            for (std::size_t i = 0; i < names.size(); ++i) (*grads)[names[i]] = tape.grad(vars[i]);
        }
        return loss.item();
    };
    GradientMap analytic;
    eval(reg, &analytic);
    GradientComparison worst;
    for (const auto& n : names) {
        const Tensor numeric =
            finite_difference_grad([&](const ParameterRegistry& r) { return eval(r, nullptr); }, reg, n, eps);
        const GradientComparison c = compare_gradients(analytic.at(n), numeric, rel_tol, abs_tol);
        worst.max_relative_error = std::max(worst.max_relative_error, c.max_relative_error);
        worst.max_absolute_error = std::max(worst.max_absolute_error, c.max_absolute_error);
        worst.coordinates += c.coordinates;
        worst.failures += c.failures;
    }
    return worst;
}

// Query accuracy of cosine nearest-prototype classification on frozen,
// promptless image features, prototypes from the first k support images.
inline double nearest_prototype_accuracy(const FewShotTask& task, const FrozenBackbone& backbone, int k) {
    std::vector<Tensor> prototypes;
    for (int c = 0; c < task.class_count(); ++c) {
        const auto images = task.support_images(c, k);
        prototypes.push_back(l2_normalize(build_low_anchor(images, backbone)));
    }
    std::size_t correct = 0;
    for (const LabeledImage& q : task.query) {
        const Tensor f = backbone.image_embedding(q.pixels);
        int best = 0;
        double best_score = -2.0;
        for (int c = 0; c < task.class_count(); ++c) {
            const double score = kernels::dot(f.values(), prototypes[static_cast<std::size_t>(c)].values());
            if (score > best_score) {
                best_score = score;
                best = c;
            }
        }
        if (best == q.label) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(task.query.size());
}

// The smallest model that still exercises every trainable path: C=3,
// 8x8 images, D_v=16, D_t=12, two prompt tokens per side, one fusion layer.
struct TinyModel {
    BackboneConfig backbone_config;
    SyntheticTaskSpec task_spec;
    TrainConfig train_config;
};

inline TinyModel tiny_model(std::uint64_t seed) {
    TinyModel m;
    m.backbone_config.image_depth = 3;
    m.backbone_config.text_depth = 2;
    m.backbone_config.image_width = 16;
    m.backbone_config.text_width = 12;
    m.backbone_config.heads = 2;
    m.backbone_config.image_size = 8;
    m.backbone_config.patch_size = 4;
    m.backbone_config.embed_dim = 8;
    m.backbone_config.mlp_ratio = 2;
    m.backbone_config.seed = seed;
    m.task_spec.classes = 3;
    m.task_spec.k_max = 2;
    m.task_spec.queries_per_class = 2;
    m.task_spec.image_size = 8;
    m.task_spec.template_pool_size = 3;
    m.task_spec.seed = seed;
    m.train_config.shots = 2;
    m.train_config.epochs = 1;
    m.train_config.batch_size = 3;
    m.train_config.visual_prompts = 2;
    m.train_config.text_context = 2;
    m.train_config.fusion_layers = {1};
    m.train_config.seed = seed;
    return m;
}

// Moves every trainable tensor off its initialization so gates, attention and
// anchors all sit in a generic regime.
inline void perturb(PromptState& state, std::uint64_t seed, double stddev = 0.3) {
    Rng rng(derive_seed(seed, 77));
    for (const auto& name : state.params.trainable_names()) {
        for (double& v : state.params.at(name).values()) v += rng.normal(0.0, stddev);
    }
}

struct ModelGradCheck {
    std::map<std::string, GradientComparison> per_tensor;
    std::size_t coordinates = 0;
    std::size_t failures = 0;
    double max_relative_error = 0.0;
    double max_absolute_error = 0.0;
};

// Reverse-mode gradients of the batch objective against central differences
// for every trainable tensor. The oracle recomposes the objective from the
// per-sample components with each sample's weight w pinned at its value at the
// unperturbed point, since w carries no gradient by construction.
inline ModelGradCheck check_model_gradients(const TinyModel& m, double eps, double rel_tol, double abs_tol) {
    const FrozenBackbone backbone(m.backbone_config);
    const FewShotTask task = generate_task(m.task_spec);
    const AdaptationProblem problem(task, {}, m.train_config, backbone);
    PromptState state = init_prompt_state(m.train_config, m.backbone_config, m.train_config.seed);
    perturb(state, m.train_config.seed);

    std::vector<std::size_t> batch(problem.samples().size());
    std::iota(batch.begin(), batch.end(), 0);
    GradientMap analytic;
    std::vector<LossBreakdown> base;
    problem.batch_loss(state, batch, &analytic, &base);

    const LossConfig& lc = m.train_config.loss;
    auto objective = [&](const ParameterRegistry& r) {
        PromptState s = state;
        s.params = r;
        std::vector<LossBreakdown> parts;
        problem.batch_loss(s, batch, nullptr, &parts);
        double total = 0.0;
        for (std::size_t i = 0; i < parts.size(); ++i) {
            const LossBreakdown& b = parts[i];
            total += b.ce + base[i].w * (lc.lambda_kd * b.kl + b.anchor + lc.lambda_align * b.align);
        }
        return total / static_cast<double>(parts.size());
    };

    ModelGradCheck out;
    for (const auto& name : state.params.trainable_names()) {
        const Tensor numeric = finite_difference_grad(objective, state.params, name, eps);
        const GradientComparison c = compare_gradients(analytic.at(name), numeric, rel_tol, abs_tol);
        out.per_tensor[name] = c;
        out.coordinates += c.coordinates;
        out.failures += c.failures;
        out.max_relative_error = std::max(out.max_relative_error, c.max_relative_error);
        out.max_absolute_error = std::max(out.max_absolute_error, c.max_absolute_error);
    }
    return out;
}

} // namespace anchorfuse::testing
