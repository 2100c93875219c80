// Command-line front end: task generation, training, evaluation and the
// experiment protocols. Every subcommand reads one JSON run config.

#include "anchorfuse/config.hpp"
#include "anchorfuse/error.hpp"
#include "anchorfuse/harness.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

using namespace anchorfuse;

namespace {

// Exit codes. CLI11 parse errors keep CLI11's own codes.
int exit_code(ErrorCategory category) {
    switch (category) {
    case ErrorCategory::invalid_argument: return 2;
    case ErrorCategory::shape_mismatch: return 3;
    case ErrorCategory::config: return 4;
    case ErrorCategory::io: return 5;
    case ErrorCategory::numeric: return 6;
    }
    return 1;
}

struct GlobalOptions {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out = "anchorfuse_out";
    bool reference = false;
};

RunConfig load(const GlobalOptions& g) {
    RunConfig cfg = g.config.empty() ? RunConfig{} : load_run_config(g.config);
    if (g.seed) cfg.seeds = {*g.seed};
    if (g.reference) cfg.reference_mode = true;
    cfg.validate();
    return cfg;
}

void emit(const EvalReport& report, const std::filesystem::path& out) {
    report.write(out);
    std::cout << report.summary() << "wrote " << (out / report.protocol).string() << ".{jsonl,csv,txt}\n";
}

FewShotTask task_for(const RunConfig& cfg) { return generate_task(task_spec_for_seed(cfg.task, cfg.seeds.front())); }

void gen_data(const GlobalOptions& g) {
    const RunConfig cfg = load(g);
    const FewShotTask task = task_for(cfg);
    write_task(task, g.out);
    std::cout << "wrote task with " << task.class_count() << " classes, " << task.query.size() << " queries to "
              << g.out << '\n';
}

void train(const GlobalOptions& g) {
    const RunConfig cfg = load(g);
    const FrozenBackbone backbone(cfg.backbone);
    const FewShotTask task = task_for(cfg);
    const std::uint64_t seed = cfg.seeds.front();
    const AdaptedState state = train_few_shot(task, train_config_for(cfg.train, cfg.train.shots, seed), backbone);
    const std::filesystem::path path = std::filesystem::path(g.out) / "checkpoint.json";
    std::filesystem::create_directories(g.out);
    save_checkpoint(state, path);

    EvalReport report;
    report.protocol = "train";
    report.config = to_json(cfg);
    for (std::size_t e = 0; e < state.loss_history.size(); ++e) {
        const LossBreakdown& b = state.loss_history[e];
        report.rows.push_back({"epoch=" + std::to_string(e), seed,
                               {{"total", b.total}, {"ce", b.ce}, {"kl", b.kl}, {"anchor", b.anchor},
                                {"align", b.align}, {"conf", b.conf}}});
    }
    report.rows.push_back({"final", seed, {{"train_accuracy", state.train_accuracy}}});
    report.write(g.out);
    std::cout << "trained " << state.loss_history.size() << " epochs, train accuracy " << state.train_accuracy
              << "\ncheckpoint " << path.string() << '\n';
}

void eval(const GlobalOptions& g, const std::string& checkpoint) {
    const RunConfig cfg = load(g);
    const FrozenBackbone backbone(cfg.backbone);
    const FewShotTask task = task_for(cfg);
    const AdaptedState state = load_checkpoint(checkpoint);
    EvalOptions options;
    options.strategy = cfg.inference_context;
    options.prompt = PromptTemplate::of(cfg.eval_template);
    options.reference_mode = cfg.reference_mode;
    options.classes = state.classes;
    EvalReport report;
    report.protocol = "eval";
    report.config = to_json(cfg);
    std::string label = std::string("strategy=") + strategy_name(options.strategy) + " template=" +
                        category_name(cfg.eval_template);
    report.rows.push_back({label, cfg.seeds.front(), {{"accuracy", evaluate(state, backbone, task, options)}}});
    emit(report, g.out);
}

void gradcheck(const GlobalOptions& g, double eps, double rel_tol) {
    // The smallest configuration that exercises every trainable path.
    RunConfig cfg = g.config.empty() ? RunConfig{} : load_run_config(g.config);
    BackboneConfig& b = cfg.backbone;
    b.image_depth = 3;
    b.text_depth = 2;
    b.image_width = 16;
    b.text_width = 12;
    b.heads = 2;
    b.image_size = 8;
    b.patch_size = 4;
    b.embed_dim = 8;
    b.mlp_ratio = 2;
    SyntheticTaskSpec& t = cfg.task;
    t.classes = 3;
    t.k_max = 2;
    t.queries_per_class = 2;
    t.image_size = 8;
    t.template_pool_size = 3;
    TrainConfig& tc = cfg.train;
    tc.shots = 2;
    tc.visual_prompts = 2;
    tc.text_context = 2;
    tc.fusion_layers = {1};
    const std::vector<std::uint64_t> seeds = g.seed ? std::vector<std::uint64_t>{*g.seed} : cfg.seeds;

    EvalReport report;
    report.protocol = "gradcheck";
    report.config = to_json(cfg);
    report.notes.push_back("max over every coordinate of every trainable tensor; eps " + std::to_string(eps));
    std::size_t failures = 0;
    for (std::uint64_t seed : seeds) {
        b.seed = seed;
        t.seed = seed;
        tc.seed = seed;
        const FrozenBackbone backbone(b);
        const FewShotTask task = generate_task(t);
        const AdaptationProblem problem(task, {}, tc, backbone);
        PromptState state = init_prompt_state(tc, b, seed);
        // Off the initialization, so gates and attention are in a generic regime.
        Rng rng(derive_seed(seed, 77));
        for (const auto& name : state.params.trainable_names()) {
            for (double& v : state.params.at(name).values()) v += rng.normal(0.0, 0.3);
        }
        const ModelGradientCheck c = check_gradients(problem, state, eps, rel_tol, 1e-7);
        failures += c.failures;
        report.rows.push_back({"seed", seed,
                               {{"coordinates", static_cast<double>(c.coordinates)},
                                {"failures", static_cast<double>(c.failures)},
                                {"max_relative_error", c.max_relative_error},
                                {"max_absolute_error", c.max_absolute_error}}});
    }
    emit(report, g.out);
    if (failures > 0) fail(ErrorCategory::numeric, std::to_string(failures) + " gradient coordinates out of tolerance");
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"anchorfuse: gated prompt fusion with dual anchors on a synthetic few-shot benchmark"};
    app.require_subcommand(1);
    GlobalOptions g;
    app.add_option("--config", g.config, "JSON run config")->check(CLI::ExistingFile);
    app.add_option("--seed", g.seed, "run a single seed instead of the config's seed list");
    app.add_option("--out", g.out, "output directory")->capture_default_str();
    app.add_flag("--reference", g.reference, "permit oracle-context evaluation");

    std::string checkpoint;
    double eps = 1e-5;
    double rel_tol = 1e-4;
    std::vector<std::string> layer_sets;

    auto* gen = app.add_subcommand("gen-data", "write a synthetic task directory");
    auto* tr = app.add_subcommand("train", "train one state and save a checkpoint");
    auto* ev = app.add_subcommand("eval", "evaluate a checkpoint");
    ev->add_option("--checkpoint", checkpoint, "checkpoint written by train")->required()->check(CLI::ExistingFile);
    auto* few = app.add_subcommand("few-shot", "accuracy for each K over the seeds");
    auto* b2n = app.add_subcommand("base-to-novel", "base, novel and harmonic-mean accuracy");
    auto* robust = app.add_subcommand("robustness", "five-template sweep");
    auto* ctx = app.add_subcommand("context-compare", "null / retrieval / mean (/ oracle with --reference)");
    auto* layers = app.add_subcommand("layer-sweep", "accuracy for each fusion layer set");
    layers->add_option("--layers", layer_sets, "layer sets such as '5,8' or '' (default: a spread over the depth)");
    auto* ablate = app.add_subcommand("ablate", "neither / +gcpf / +anchor / full");
    auto* grad = app.add_subcommand("gradcheck", "finite-difference check on a minimal model");
    grad->add_option("--eps", eps)->capture_default_str();
    grad->add_option("--rel-tol", rel_tol)->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    }

    try {
        auto protocol = [&](auto run) {
            const RunConfig cfg = load(g);
            const FrozenBackbone backbone(cfg.backbone);
            RunCache cache;
            emit(run(Experiment{cfg, &backbone, &cache}), g.out);
        };
        if (*gen) gen_data(g);
        else if (*tr) train(g);
        else if (*ev) eval(g, checkpoint);
        else if (*few) protocol(few_shot_protocol);
        else if (*b2n) protocol(base_to_novel_protocol);
        else if (*robust) protocol(robustness_protocol);
        else if (*ctx) protocol(context_protocol);
        else if (*ablate) protocol(ablation_run);
        else if (*layers) {
            protocol([&](const Experiment& ex) {
                std::vector<std::vector<int>> sets;
                for (const std::string& s : layer_sets) {
                    std::vector<int> set;
                    std::stringstream ss(s);
                    for (std::string item; std::getline(ss, item, ',');) {
                        try {
                            set.push_back(std::stoi(item));
                        } catch (const std::exception&) {
                            fail(ErrorCategory::invalid_argument, "bad layer index '" + item + "'");
                        }
                    }
                    sets.push_back(set);
                }
                if (sets.empty()) sets = default_layer_sets(ex.cfg.backbone.image_depth);
                return fusion_layer_sweep(ex, sets);
            });
        } else if (*grad) gradcheck(g, eps, rel_tol);
    } catch (const Error& e) {
        std::fprintf(stderr, "error [%s]: %s\n", category_name(e.category()), e.what());
        return exit_code(e.category());
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error [internal]: %s\n", e.what());
        return 1;
    }
    return 0;
}
