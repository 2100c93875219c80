#include "support.hpp"

#include <doctest.h>

#include <array>
#include <filesystem>
#include <fstream>

using namespace anchorfuse;
using namespace anchorfuse::testing;

namespace {

struct TinyRun {
    TinyModel model;
    FrozenBackbone backbone;
    FewShotTask task;

    explicit TinyRun(std::uint64_t seed)
        : model(tiny_model(seed)), backbone(model.backbone_config), task(generate_task(model.task_spec)) {}
};

std::filesystem::path temp_path(const std::string& name) {
    return std::filesystem::temp_directory_path() / ("anchorfuse_test_" + name);
}

} // namespace

TEST_CASE("full-model gradients match central differences at three seeds") {
    for (std::uint64_t seed : {0u, 1u, 2u}) {
        const ModelGradCheck check = check_model_gradients(tiny_model(seed), 1e-5, 1e-4, 1e-7);
        INFO("seed " << seed << " max rel " << check.max_relative_error);
        CHECK(check.failures == 0);
        CHECK(check.coordinates > 1000);
        for (const auto& [name, c] : check.per_tensor) {
            INFO(name);
            CHECK(c.failures == 0);
        }
    }
}

TEST_CASE("gradient reaches all fusion weight groups") {
    TinyRun run(3);
    const AdaptationProblem problem(run.task, {}, run.model.train_config, run.backbone);
    PromptState state = init_prompt_state(run.model.train_config, run.model.backbone_config, 3);
    perturb(state, 3);
    GradientMap grads;
    const std::array<std::size_t, 3> batch{0, 2, 4};
    problem.batch_loss(state, batch, &grads);
    CHECK(grads.size() == state.params.trainable_names().size());
    for (const auto& [name, g] : grads) {
        double norm = 0.0;
        for (double v : g.values()) norm += v * v;
        INFO(name);
        CHECK(norm > 0.0);
    }
}

TEST_CASE("adamw examples") {
    AdamWConfig cfg;
    cfg.weight_decay = 0.0;
    ParameterRegistry reg;
    reg.add("theta", Tensor::row({1.5, -2.0}), false);
    reg.add("frozen", Tensor::row({1.0}), true);
    AdamMoments moments;
    GradientMap zero{{"theta", Tensor::row({0.0, 0.0})}};
    adamw_step(reg, zero, moments, cfg, 1);
    CHECK(reg.at("theta") == Tensor::row({1.5, -2.0}));

    cfg.weight_decay = 0.1;
    cfg.lr = 0.01;
    AdamMoments fresh;
    adamw_step(reg, zero, fresh, cfg, 1);
    CHECK(reg.at("theta")[0] == doctest::Approx(1.5 * (1.0 - 0.001)).epsilon(1e-15));
    CHECK(reg.at("theta")[1] == doctest::Approx(-2.0 * (1.0 - 0.001)).epsilon(1e-15));

    ParameterRegistry scalar;
    scalar.add("x", Tensor::scalar(0.0), false);
    AdamWConfig plain;
    plain.weight_decay = 0.0;
    AdamMoments m;
    adamw_step(scalar, {{"x", Tensor::scalar(1.0)}}, m, plain, 1);
    CHECK(scalar.at("x")[0] == doctest::Approx(-plain.lr).epsilon(1e-6));
    // constant gradient: every bias-corrected step stays close to -lr
    for (int t = 2; t <= 5; ++t) adamw_step(scalar, {{"x", Tensor::scalar(1.0)}}, m, plain, t);
    CHECK(scalar.at("x")[0] == doctest::Approx(-5 * plain.lr).epsilon(1e-5));

    CHECK_THROWS_AS(adamw_step(reg, {{"frozen", Tensor::row({1.0})}}, moments, cfg, 2), Error);
    CHECK_THROWS_AS(adamw_step(reg, zero, moments, cfg, 0), Error);
    CHECK_THROWS_AS(adamw_step(reg, {{"theta", Tensor::row({1.0})}}, moments, cfg, 2), Error);
}

TEST_CASE("prompt state initialization") {
    const TinyModel m = tiny_model(0);
    const PromptState s = init_prompt_state(m.train_config, m.backbone_config, 0);
    CHECK(s.params.contains(visual_prompt_name(0)));
    CHECK(s.params.contains(visual_prompt_name(2)));
    CHECK(s.params.at(kTextContextName).shape() == std::vector<std::size_t>{2, 12});
    CHECK(s.has_fusion());
    for (const auto& name : s.params.names()) {
        CHECK_FALSE(s.params.frozen(name));
        const Tensor& t = s.params.at(name);
        if (name.find("gate") != std::string::npos) {
            for (double v : t.values()) CHECK(v == 0.0);
        } else {
            double sq = 0.0;
            for (double v : t.values()) sq += v * v;
            const double std = std::sqrt(sq / static_cast<double>(t.size()));
            INFO(name);
            CHECK(std > 0.01);
            CHECK(std < 0.03);
        }
    }
    CHECK(init_prompt_state(m.train_config, m.backbone_config, 0) == s);

    TrainConfig no_fusion = m.train_config;
    no_fusion.use_fusion = false;
    const PromptState plain = init_prompt_state(no_fusion, m.backbone_config, 0);
    CHECK_FALSE(plain.has_fusion());
    for (const auto& name : plain.params.names()) CHECK(name.rfind("prompt.", 0) == 0);

    TrainConfig bad = m.train_config;
    bad.fusion_layers = {5};
    CHECK_THROWS_AS(init_prompt_state(bad, m.backbone_config, 0), Error);
    bad.fusion_layers = {1, 1};
    CHECK_THROWS_AS(init_prompt_state(bad, m.backbone_config, 0), Error);
}

TEST_CASE("zero epochs leave the initial state") {
    TinyRun run(0);
    TrainConfig cfg = run.model.train_config;
    cfg.epochs = 0;
    const AdaptedState s = train_few_shot(run.task, cfg, run.backbone);
    CHECK(s.prompts == init_prompt_state(cfg, run.model.backbone_config, cfg.seed));
    CHECK(s.loss_history.empty());
}

TEST_CASE("training is deterministic and leaves the backbone untouched") {
    TinyRun run(1);
    TrainConfig cfg = run.model.train_config;
    cfg.epochs = 3;
    const auto hash = run.backbone.parameter_hash();
    const AdaptedState a = train_few_shot(run.task, cfg, run.backbone);
    const AdaptedState b = train_few_shot(run.task, cfg, run.backbone);
    CHECK(a == b);
    CHECK(run.backbone.parameter_hash() == hash);
    CHECK(FrozenBackbone(run.model.backbone_config).parameter_hash() == hash);
    CHECK(a.loss_history.size() == 3);
    for (const auto& h : a.loss_history) CHECK(std::isfinite(h.total));
    CHECK_FALSE(a.prompts == init_prompt_state(cfg, run.model.backbone_config, cfg.seed));

    cfg.seed = 2;
    const AdaptedState c = train_few_shot(run.task, cfg, run.backbone);
    CHECK_FALSE(c.prompts == a.prompts);
}

TEST_CASE("ablation wiring") {
    TinyRun run(2);
    TrainConfig cfg = run.model.train_config;
    cfg.epochs = 2;
    cfg.use_anchor = false;
    const AdaptedState no_anchor = train_few_shot(run.task, cfg, run.backbone);
    for (const auto& h : no_anchor.loss_history) CHECK(h.anchor == 0.0);

    cfg.use_anchor = true;
    cfg.use_fusion = false;
    const AdaptationProblem problem(run.task, {}, cfg, run.backbone);
    PromptState state = init_prompt_state(cfg, run.model.backbone_config, 0);
    GradientMap grads;
    const std::array<std::size_t, 2> batch{0, 5};
    problem.batch_loss(state, batch, &grads);
    for (const auto& [name, g] : grads) CHECK(name.rfind("prompt.", 0) == 0);

    cfg.use_conf_weighting = false;
    const AdaptationProblem static_weights(run.task, {}, cfg, run.backbone);
    std::vector<LossBreakdown> parts;
    static_weights.batch_loss(state, batch, nullptr, &parts);
    for (const auto& p : parts) {
        CHECK(p.w == 1.0);
        CHECK(p.conf == 0.0);
    }
}

TEST_CASE("fusion-free forward equals a hook-free pass with raw prompts") {
    TinyRun run(4);
    TrainConfig cfg = run.model.train_config;
    cfg.use_fusion = false;
    const AdaptationProblem problem(run.task, {}, cfg, run.backbone);
    PromptState state = init_prompt_state(cfg, run.model.backbone_config, 4);
    perturb(state, 4);
    const LossBreakdown got = forward_train(problem, state, 1);

    Tape tape(false);
    const BoundPrompts bound = bind_prompts(tape, state);
    const TrainingSample& sample = problem.samples()[1];
    const Tensor image = run.backbone.encode_image(tape, sample.image, bound.visual, nullptr).pooled.value();
    std::vector<Tensor> texts;
    for (int c : problem.classes()) {
        const auto ids = expand_template(PromptTemplate::of(TemplateCategory::minimal),
                                         run.task.class_names[static_cast<std::size_t>(c)]);
        texts.push_back(run.backbone.encode_text(tape, bound.context, ids).value());
    }
    const std::vector<double> s = logits(image, texts, run.backbone.logit_scale());
    CHECK(got.ce == doctest::Approx(cross_entropy(s, sample.label)).epsilon(1e-12));
    const auto y = static_cast<std::size_t>(sample.label);
    LossInputs in{s, sample.zero_shot_logits, sample.label, &texts[y], &problem.anchors().high[y],
                  &problem.anchors().low[y], &image, &texts[y]};
    const LossBreakdown want = total_loss(in, cfg.loss, cfg.switches());
    CHECK(got.total == doctest::Approx(want.total).epsilon(1e-12));
    CHECK(got.kl == doctest::Approx(want.kl).epsilon(1e-12));
    CHECK(got.anchor == doctest::Approx(want.anchor).epsilon(1e-12));
    CHECK(got.align == doctest::Approx(want.align).epsilon(1e-12));
    CHECK(forward_train(problem, state, 1) == got);
}

TEST_CASE("a single-sample batch is conditioned on that sample's class") {
    TinyRun run(5);
    const AdaptationProblem problem(run.task, {}, run.model.train_config, run.backbone);
    PromptState state = init_prompt_state(run.model.train_config, run.model.backbone_config, 5);
    perturb(state, 5);
    const std::size_t i = 3;
    const int y = problem.samples()[i].label;

    Tape tape(false);
    const BoundPrompts bound = bind_prompts(tape, state);
    const auto ids = expand_template(PromptTemplate::of(TemplateCategory::minimal),
                                     run.task.class_names[static_cast<std::size_t>(problem.classes()[static_cast<std::size_t>(y)])]);
    const Tensor token_mean = run.backbone.mean_token_embedding(ids);
    const Var bank = tape.constant(class_bank(state.params.at(kTextContextName), token_mean));
    const ConditionedPrompts cp = condition_prompts(tape, bound, bank, token_mean);
    const Tensor image =
        run.backbone.encode_image(tape, problem.samples()[i].image, cp.visual, nullptr).pooled.value();
    std::vector<Tensor> texts;
    for (int c : problem.classes()) {
        const auto class_ids = expand_template(PromptTemplate::of(TemplateCategory::minimal),
                                               run.task.class_names[static_cast<std::size_t>(c)]);
        texts.push_back(run.backbone.encode_text(tape, cp.context, class_ids).value());
    }
    const std::vector<double> s = logits(image, texts, run.backbone.logit_scale());
    CHECK(forward_train(problem, state, i).ce == doctest::Approx(cross_entropy(s, y)).epsilon(1e-12));
}

TEST_CASE("condition_prompts without fusion returns the bound prompts") {
    const TinyModel m = tiny_model(0);
    TrainConfig cfg = m.train_config;
    cfg.use_fusion = false;
    const PromptState state = init_prompt_state(cfg, m.backbone_config, 0);
    Tape tape;
    const BoundPrompts bound = bind_prompts(tape, state);
    const ConditionedPrompts cp = condition_prompts(tape, bound, Var{}, Tensor::matrix(1, 12));
    REQUIRE(cp.visual.size() == bound.visual.size());
    for (std::size_t l = 0; l < cp.visual.size(); ++l) CHECK(cp.visual[l].id == bound.visual[l].id);
    CHECK(cp.context.id == bound.context.id);
}

TEST_CASE("checkpoint round trip is bit exact") {
    TinyRun run(6);
    TrainConfig cfg = run.model.train_config;
    cfg.epochs = 2;
    const AdaptedState state = train_few_shot(run.task, cfg, run.backbone);
    const auto path = temp_path("checkpoint.json");
    save_checkpoint(state, path);
    const AdaptedState loaded = load_checkpoint(path);
    CHECK(loaded == state);

    EvalOptions options;
    CHECK(evaluate(loaded, run.backbone, run.task, options) == evaluate(state, run.backbone, run.task, options));

    try {
        load_checkpoint(temp_path("does_not_exist.json"));
        FAIL("expected an io error");
    } catch (const Error& e) {
        CHECK(e.category() == ErrorCategory::io);
    }
    {
        std::ofstream out(path);
        out << "{\"format\": \"something-else\", \"version\": 1}";
    }
    CHECK_THROWS_AS(load_checkpoint(path), Error);
    {
        std::ofstream out(path);
        out << "not json";
    }
    CHECK_THROWS_AS(load_checkpoint(path), Error);
    std::filesystem::remove(path);
}

TEST_CASE("insufficient support is rejected") {
    TinyRun run(0);
    TrainConfig cfg = run.model.train_config;
    cfg.shots = 3; // k_max is 2
    CHECK_THROWS_AS(train_few_shot(run.task, cfg, run.backbone), Error);
    cfg.shots = 2;
    CHECK_THROWS_AS(train_few_shot(run.task, cfg, run.backbone, {1}), Error);
    CHECK_THROWS_AS(train_few_shot(run.task, cfg, run.backbone, {0, 7}), Error);
}

TEST_CASE("training makes progress on the default task") {
    const FrozenBackbone backbone{BackboneConfig{}};
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        SyntheticTaskSpec spec;
        spec.seed = seed;
        const FewShotTask task = generate_task(spec);
        TrainConfig cfg;
        cfg.shots = 2;
        cfg.seed = seed;
        const AdaptedState s = train_few_shot(task, cfg, backbone);
        REQUIRE(s.loss_history.size() >= 10);
        double first = 0.0, last = 0.0;
        for (std::size_t i = 0; i < 5; ++i) {
            first += s.loss_history[i].total;
            last += s.loss_history[s.loss_history.size() - 1 - i].total;
        }
        INFO("seed " << seed);
        CHECK(last <= first);
    }
}

TEST_CASE("separable four-class task is fit perfectly") {
    const FrozenBackbone backbone{BackboneConfig{}};
    SyntheticTaskSpec spec;
    spec.classes = 4;
    const FewShotTask task = generate_task(spec);
    // the fit requirement only applies when frozen features already separate the classes
    REQUIRE(nearest_prototype_accuracy(task, backbone, 16) > 0.95);
    const AdaptedState s = train_few_shot(task, TrainConfig{}, backbone);
    CHECK(s.train_accuracy == 1.0);
}
