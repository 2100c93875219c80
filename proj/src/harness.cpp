#include "anchorfuse/harness.hpp"

#include "anchorfuse/error.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <memory>
#include <sstream>

namespace anchorfuse {

namespace {

int argmax_lowest(std::span<const double> s) {
    int best = 0;
    for (std::size_t i = 1; i < s.size(); ++i) {
        if (s[i] > s[static_cast<std::size_t>(best)]) best = static_cast<int>(i);
    }
    return best;
}

RunCache& cache_or(const Experiment& ex, RunCache& local) { return ex.cache ? *ex.cache : local; }

void require_backbone(const Experiment& ex) {
    if (!ex.backbone) fail(ErrorCategory::invalid_argument, "experiment has no backbone");
    if (ex.backbone->config().seed != ex.cfg.backbone.seed) {
        fail(ErrorCategory::config, "experiment backbone does not match its configuration");
    }
}

EvalOptions default_options(const RunConfig& cfg) {
    EvalOptions o;
    o.strategy = cfg.inference_context;
    o.prompt = PromptTemplate::of(cfg.eval_template);
    o.reference_mode = cfg.reference_mode;
    return o;
}

std::string fmt(double v) {
    std::ostringstream os;
    if (v != 0.0 && std::abs(v) < 1e-3) os << std::scientific << std::setprecision(3) << v;
    else os << std::fixed << std::setprecision(4) << v;
    return os.str();
}

} // namespace

std::vector<int> predict(const AdaptedState& state, const FrozenBackbone& backbone, const FewShotTask& task,
                         const EvalOptions& options) {
    if (options.strategy == ContextStrategy::oracle && !options.reference_mode) {
        fail(ErrorCategory::invalid_argument, "oracle context is only available in reference mode");
    }
    const std::vector<int>& classes = options.classes.empty() ? state.classes : options.classes;
    if (classes.size() < 2) fail(ErrorCategory::invalid_argument, "evaluation needs at least 2 classes");
    std::vector<int> position(static_cast<std::size_t>(task.class_count()), -1);
    for (std::size_t i = 0; i < classes.size(); ++i) {
        const int c = classes[i];
        if (c < 0 || c >= task.class_count()) {
            fail(ErrorCategory::invalid_argument, "class index " + std::to_string(c) + " out of range");
        }
        position[static_cast<std::size_t>(c)] = static_cast<int>(i);
    }

    const PromptState& prompts = state.prompts;
    const Tensor* context = prompts.text_context > 0 ? &prompts.params.at(kTextContextName) : nullptr;
    std::vector<std::vector<int>> tokens;
    std::vector<Tensor> token_means;
    std::vector<Tensor> class_text;
    std::vector<Tensor> banks;
    for (int c : classes) {
        tokens.push_back(expand_template(options.prompt, task.class_names[static_cast<std::size_t>(c)]));
        token_means.push_back(backbone.mean_token_embedding(tokens.back()));
        Tape tape(false);
        class_text.push_back(
            backbone.encode_text(tape, context ? tape.constant_ref(*context) : Var{}, tokens.back()).value());
        if (context && prompts.has_fusion()) banks.push_back(class_bank(*context, token_means.back()));
    }
    const bool fused = prompts.has_fusion() && options.strategy != ContextStrategy::null;

    // Conditioned prompts and class texts, keyed by selected class (-1 for the
    // global context). Fusion does not see the image, so each is built once.
    struct Conditioned {
        std::vector<Tensor> visual;
        std::vector<Tensor> text;
    };
    std::map<int, std::unique_ptr<Conditioned>> conditioned;
    auto conditioned_for = [&](int selected, const Tensor& bank) -> const Conditioned& {
        auto& slot = conditioned[selected];
        if (slot) return *slot;
        slot = std::make_unique<Conditioned>();
        Tensor token_mean;
        if (selected >= 0) {
            token_mean = token_means[static_cast<std::size_t>(selected)];
        } else {
            token_mean = Tensor(token_means.front().shape(), 0.0);
            for (const Tensor& e : token_means) {
                for (std::size_t i = 0; i < e.size(); ++i) token_mean[i] += e[i] / static_cast<double>(classes.size());
            }
        }
        Tape tape(false);
        const BoundPrompts bound = bind_prompts(tape, prompts);
        const ConditionedPrompts cp = condition_prompts(tape, bound, tape.constant(bank), token_mean);
        for (Var v : cp.visual) slot->visual.push_back(v.value());
        for (const auto& ids : tokens) slot->text.push_back(backbone.encode_text(tape, cp.context, ids).value());
        return *slot;
    };

    std::vector<Tensor> plain;
    for (int l = 0; l < prompts.image_depth && prompts.visual_prompts > 0; ++l) {
        plain.push_back(prompts.params.at(visual_prompt_name(l)));
    }
    auto encode = [&](Tape& tape, const Tensor& pixels, const std::vector<Tensor>& visual) {
        std::vector<Var> bound;
        for (const Tensor& p : visual) bound.push_back(tape.constant_ref(p));
        return backbone.encode_image(tape, pixels, bound, nullptr).pooled.value();
    };
    std::vector<int> predictions;
    for (const LabeledImage& q : task.query) {
        const int truth = position[static_cast<std::size_t>(q.label)];
        if (truth < 0) continue;
        Tape tape(false);
        if (!fused) {
            const Tensor embedding = encode(tape, q.pixels, plain);
            predictions.push_back(argmax_lowest(logits(embedding, class_text, backbone.logit_scale())));
            continue;
        }
        Tensor query;
        if (options.strategy == ContextStrategy::retrieval) {
            query = encode(tape, q.pixels, plain);
        }
        const std::optional<Tensor> bank = select_context(options.strategy, query, class_text, banks, truth);
        int selected = -1;
        if (options.strategy == ContextStrategy::retrieval) selected = retrieve_class(query, class_text);
        if (options.strategy == ContextStrategy::oracle) selected = truth;
        const Conditioned& cond = conditioned_for(selected, *bank);
        const Tensor embedding = encode(tape, q.pixels, cond.visual);
        predictions.push_back(argmax_lowest(logits(embedding, cond.text, backbone.logit_scale())));
    }
    return predictions;
}

double evaluate(const AdaptedState& state, const FrozenBackbone& backbone, const FewShotTask& task,
                const EvalOptions& options) {
    const std::vector<int> predictions = predict(state, backbone, task, options);
    const std::vector<int>& classes = options.classes.empty() ? state.classes : options.classes;
    std::size_t correct = 0;
    std::size_t i = 0;
    for (const LabeledImage& q : task.query) {
        const auto it = std::find(classes.begin(), classes.end(), q.label);
        if (it == classes.end()) continue;
        if (predictions[i++] == static_cast<int>(it - classes.begin())) ++correct;
    }
    if (i == 0) fail(ErrorCategory::invalid_argument, "no queries for the evaluated classes");
    return static_cast<double>(correct) / static_cast<double>(i);
}

double harmonic_mean(double a, double b) {
    if (a < 0.0 || b < 0.0) {
        fail(ErrorCategory::invalid_argument, "harmonic mean of negative values");
    }
    if (a + b == 0.0) return 0.0;
    return 2.0 * a * b / (a + b);
}

double ReportRow::metric(const std::string& name) const {
    for (const auto& [k, v] : metrics) {
        if (k == name) return v;
    }
    fail(ErrorCategory::invalid_argument, "row '" + label + "' has no metric '" + name + "'");
}

std::vector<Aggregate> EvalReport::aggregates() const {
    std::vector<std::string> labels;
    for (const auto& r : rows) {
        if (std::find(labels.begin(), labels.end(), r.label) == labels.end()) labels.push_back(r.label);
    }
    std::vector<Aggregate> out;
    for (const std::string& label : labels) {
        std::vector<std::string> metrics;
        for (const auto& r : rows) {
            if (r.label != label) continue;
            for (const auto& [k, v] : r.metrics) {
                if (std::find(metrics.begin(), metrics.end(), k) == metrics.end()) metrics.push_back(k);
            }
        }
        for (const std::string& metric : metrics) {
            std::vector<double> values;
            for (const auto& r : rows) {
                if (r.label != label) continue;
                for (const auto& [k, v] : r.metrics) {
                    if (k == metric) values.push_back(v);
                }
            }
            Aggregate a{label, metric, 0.0, 0.0, values.size()};
            for (double v : values) a.mean += v;
            a.mean /= static_cast<double>(values.size());
            if (values.size() > 1) {
                double ss = 0.0;
                for (double v : values) ss += (v - a.mean) * (v - a.mean);
                a.stddev = std::sqrt(ss / static_cast<double>(values.size() - 1));
            }
            out.push_back(a);
        }
    }
    return out;
}

double EvalReport::mean(const std::string& label, const std::string& metric) const {
    for (const Aggregate& a : aggregates()) {
        if (a.label == label && a.metric == metric) return a.mean;
    }
    fail(ErrorCategory::invalid_argument, "report '" + protocol + "' has no " + label + "/" + metric);
}

nlohmann::json EvalReport::to_json() const {
    nlohmann::json rows_json = nlohmann::json::array();
    for (const auto& r : rows) {
        nlohmann::json m = nlohmann::json::object();
        for (const auto& [k, v] : r.metrics) m[k] = v;
        rows_json.push_back({{"label", r.label}, {"seed", r.seed}, {"metrics", m}});
    }
    nlohmann::json agg = nlohmann::json::array();
    for (const auto& a : aggregates()) {
        agg.push_back({{"label", a.label}, {"metric", a.metric}, {"mean", a.mean}, {"std", a.stddev}, {"n", a.count}});
    }
    return {{"protocol", protocol}, {"config", config}, {"notes", notes}, {"rows", rows_json}, {"aggregates", agg}};
}

std::string EvalReport::jsonl() const {
    std::ostringstream os;
    for (const auto& r : rows) {
        nlohmann::ordered_json j = {{"protocol", protocol}, {"label", r.label}, {"seed", r.seed}};
        for (const auto& [k, v] : r.metrics) j[k] = v;
        os << j.dump() << '\n';
    }
    return os.str();
}

std::string EvalReport::csv() const {
    std::vector<std::string> metrics;
    for (const auto& r : rows) {
        for (const auto& [k, v] : r.metrics) {
            if (std::find(metrics.begin(), metrics.end(), k) == metrics.end()) metrics.push_back(k);
        }
    }
    std::ostringstream os;
    os << "protocol,label,seed";
    for (const auto& m : metrics) os << ',' << m;
    os << '\n';
    os << std::setprecision(17);
    for (const auto& r : rows) {
        os << protocol << ",\"" << r.label << "\"," << r.seed;
        for (const auto& m : metrics) {
            os << ',';
            for (const auto& [k, v] : r.metrics) {
                if (k == m) os << v;
            }
        }
        os << '\n';
    }
    return os.str();
}

std::string EvalReport::summary() const {
    std::ostringstream os;
    os << "protocol: " << protocol << '\n';
    for (const auto& n : notes) os << "note: " << n << '\n';
    std::size_t width = 5, metric_width = 6;
    for (const auto& a : aggregates()) {
        width = std::max(width, a.label.size());
        metric_width = std::max(metric_width, a.metric.size());
    }
    const int mw = static_cast<int>(metric_width) + 2;
    os << std::left << std::setw(static_cast<int>(width) + 2) << "label" << std::setw(mw) << "metric"
       << std::setw(12) << "mean" << std::setw(12) << "std" << "seeds\n";
    for (const auto& a : aggregates()) {
        os << std::left << std::setw(static_cast<int>(width) + 2) << a.label << std::setw(mw) << a.metric
           << std::setw(12) << fmt(a.mean) << std::setw(12) << fmt(a.stddev) << a.count << '\n';
    }
    return os.str();
}

void EvalReport::write(const std::filesystem::path& dir) const {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) fail(ErrorCategory::io, "cannot create " + dir.string() + ": " + ec.message());
    const std::pair<const char*, std::string> files[] = {{".jsonl", jsonl()}, {".csv", csv()}, {".txt", summary()}};
    for (const auto& [ext, content] : files) {
        const auto path = dir / (protocol + ext);
        std::ofstream out(path);
        out << content;
        if (!out) fail(ErrorCategory::io, "cannot write " + path.string());
    }
}

const AdaptedState& RunCache::train(const FewShotTask& task, const TrainConfig& cfg, const FrozenBackbone& backbone,
                                    const std::vector<int>& classes) {
    TrainConfig normalized = cfg;
    normalized.fusion_layers = cfg.active_fusion_layers();
    normalized.use_fusion = true;
    const nlohmann::json key = {{"task", to_json(task.spec)},
                                {"backbone", to_json(backbone.config())},
                                {"train", to_json(normalized)},
                                {"classes", classes}};
    auto& slot = m_states[key.dump()];
    if (!slot) {
        slot = std::make_unique<AdaptedState>(train_few_shot(task, cfg, backbone, classes));
        ++m_trainings;
    }
    return *slot;
}

SyntheticTaskSpec task_spec_for_seed(const SyntheticTaskSpec& spec, std::uint64_t seed) {
    SyntheticTaskSpec s = spec;
    s.seed = spec.seed + seed;
    return s;
}

TrainConfig train_config_for(const TrainConfig& cfg, int shots, std::uint64_t seed) {
    TrainConfig c = cfg;
    c.shots = shots;
    c.seed = cfg.seed + seed;
    return c;
}

EvalReport few_shot_protocol(const Experiment& ex) {
    require_backbone(ex);
    ex.cfg.validate();
    RunCache local;
    RunCache& cache = cache_or(ex, local);
    EvalReport report;
    report.protocol = "few_shot";
    report.config = to_json(ex.cfg);
    for (int k : ex.cfg.shot_values) {
        for (std::uint64_t seed : ex.cfg.seeds) {
            const FewShotTask task = generate_task(task_spec_for_seed(ex.cfg.task, seed));
            const AdaptedState& state = cache.train(task, train_config_for(ex.cfg.train, k, seed), *ex.backbone);
            const double acc = evaluate(state, *ex.backbone, task, default_options(ex.cfg));
            report.rows.push_back({"K=" + std::to_string(k), seed, {{"accuracy", acc},
                                                                     {"train_accuracy", state.train_accuracy}}});
        }
    }
    return report;
}

EvalReport base_to_novel_protocol(const Experiment& ex) {
    require_backbone(ex);
    ex.cfg.validate();
    RunCache local;
    RunCache& cache = cache_or(ex, local);
    EvalReport report;
    report.protocol = "base_to_novel";
    report.config = to_json(ex.cfg);
    report.notes.push_back("hm is computed per seed from that seed's base and novel accuracy; the aggregate hm is the "
                           "mean of per-seed values and can differ from the harmonic mean of the aggregate base and "
                           "novel accuracies");
    for (std::uint64_t seed : ex.cfg.seeds) {
        const FewShotTask task = generate_task(task_spec_for_seed(ex.cfg.task, seed));
        if (task.base_classes.size() < 2 || task.novel_classes.size() < 2) {
            fail(ErrorCategory::invalid_argument, "base-to-novel needs at least 2 base and 2 novel classes");
        }
        const AdaptedState& state = cache.train(task, train_config_for(ex.cfg.train, ex.cfg.train.shots, seed),
                                                *ex.backbone, task.base_classes);
        EvalOptions options = default_options(ex.cfg);
        options.classes = task.base_classes;
        const double base = evaluate(state, *ex.backbone, task, options);
        options.classes = task.novel_classes;
        const double novel = evaluate(state, *ex.backbone, task, options);
        report.rows.push_back({"base-to-novel", seed, {{"base", base}, {"novel", novel},
                                                       {"hm", harmonic_mean(base, novel)}}});
    }
    return report;
}

EvalReport robustness_sweep(const AdaptedState& state, const FrozenBackbone& backbone, const FewShotTask& task,
                            const std::vector<PromptTemplate>& templates, std::uint64_t seed) {
    EvalReport report;
    report.protocol = "robustness";
    report.notes.push_back("degradation is the minimal-template accuracy minus the row accuracy, in points");
    EvalOptions options;
    options.prompt = PromptTemplate::of(TemplateCategory::minimal);
    const double minimal = evaluate(state, backbone, task, options);
    for (const PromptTemplate& t : templates) {
        options.prompt = t;
        const bool is_minimal = t.pattern == PromptTemplate::of(TemplateCategory::minimal).pattern;
        const double acc = is_minimal ? minimal : evaluate(state, backbone, task, options);
        report.rows.push_back({std::string("template=") + category_name(t.category), seed,
                               {{"accuracy", acc}, {"degradation", 100.0 * (minimal - acc)}}});
    }
    return report;
}

EvalReport robustness_protocol(const Experiment& ex) {
    require_backbone(ex);
    ex.cfg.validate();
    RunCache local;
    RunCache& cache = cache_or(ex, local);
    EvalReport report;
    report.protocol = "robustness";
    report.config = to_json(ex.cfg);
    for (std::uint64_t seed : ex.cfg.seeds) {
        const FewShotTask task = generate_task(task_spec_for_seed(ex.cfg.task, seed));
        const AdaptedState& state =
            cache.train(task, train_config_for(ex.cfg.train, ex.cfg.train.shots, seed), *ex.backbone);
        EvalReport one = robustness_sweep(state, *ex.backbone, task, robustness_templates(), seed);
        report.notes = one.notes;
        for (auto& r : one.rows) report.rows.push_back(std::move(r));
    }
    return report;
}

EvalReport context_strategy_comparison(const AdaptedState& state, const FrozenBackbone& backbone,
                                       const FewShotTask& task, std::uint64_t seed, bool reference_mode) {
    EvalReport report;
    report.protocol = "context_compare";
    std::vector<ContextStrategy> strategies{ContextStrategy::null, ContextStrategy::retrieval, ContextStrategy::mean};
    if (reference_mode) {
        strategies.push_back(ContextStrategy::oracle);
        report.notes.push_back("the oracle row conditions on ground-truth labels and is a reference only");
    }
    for (ContextStrategy s : strategies) {
        EvalOptions options;
        options.strategy = s;
        options.reference_mode = reference_mode;
        std::string label = std::string("strategy=") + strategy_name(s);
        if (s == ContextStrategy::oracle) label += " (reference)";
        report.rows.push_back({label, seed, {{"accuracy", evaluate(state, backbone, task, options)}}});
    }
    return report;
}

EvalReport context_protocol(const Experiment& ex) {
    require_backbone(ex);
    ex.cfg.validate();
    RunCache local;
    RunCache& cache = cache_or(ex, local);
    EvalReport report;
    report.protocol = "context_compare";
    report.config = to_json(ex.cfg);
    for (std::uint64_t seed : ex.cfg.seeds) {
        const FewShotTask task = generate_task(task_spec_for_seed(ex.cfg.task, seed));
        const AdaptedState& state =
            cache.train(task, train_config_for(ex.cfg.train, ex.cfg.train.shots, seed), *ex.backbone);
        EvalReport one = context_strategy_comparison(state, *ex.backbone, task, seed, ex.cfg.reference_mode);
        report.notes = one.notes;
        for (auto& r : one.rows) report.rows.push_back(std::move(r));
    }
    return report;
}

std::string layer_label(const std::vector<int>& layers) {
    std::string s = "layers=[";
    for (std::size_t i = 0; i < layers.size(); ++i) s += (i ? "," : "") + std::to_string(layers[i]);
    return s + "]";
}

std::vector<std::vector<int>> default_layer_sets(int image_depth) {
    const int d = image_depth;
    if (d < 4) fail(ErrorCategory::config, "default layer sets need an image depth of at least 4");
    return {{}, {d / 5}, {d / 2}, {d - 1}, {d / 2, d - 2}, {d - 3, d - 2, d - 1}};
}

EvalReport fusion_layer_sweep(const Experiment& ex, const std::vector<std::vector<int>>& layer_sets) {
    require_backbone(ex);
    ex.cfg.validate();
    for (const auto& set : layer_sets) ex.cfg.backbone.validate_fusion_layers(set);
    RunCache local;
    RunCache& cache = cache_or(ex, local);
    EvalReport report;
    report.protocol = "layer_sweep";
    report.config = to_json(ex.cfg);
    for (const auto& set : layer_sets) {
        for (std::uint64_t seed : ex.cfg.seeds) {
            const FewShotTask task = generate_task(task_spec_for_seed(ex.cfg.task, seed));
            TrainConfig tc = train_config_for(ex.cfg.train, ex.cfg.train.shots, seed);
            tc.fusion_layers = set;
            tc.use_fusion = true;
            const AdaptedState& state = cache.train(task, tc, *ex.backbone);
            report.rows.push_back({layer_label(set), seed,
                                   {{"accuracy", evaluate(state, *ex.backbone, task, default_options(ex.cfg))}}});
        }
    }
    return report;
}

const std::vector<AblationVariant>& ablation_variants() {
    static const std::vector<AblationVariant> variants{
        {"neither", false, false}, {"+gcpf", true, false}, {"+anchor", false, true}, {"full", true, true}};
    return variants;
}

EvalReport ablation_run(const Experiment& ex) {
    require_backbone(ex);
    ex.cfg.validate();
    RunCache local;
    RunCache& cache = cache_or(ex, local);
    EvalReport report;
    report.protocol = "ablation";
    report.config = to_json(ex.cfg);
    report.notes.push_back("few_shot is the mean accuracy over the K values; base/novel/hm use K = train.shots");
    for (const AblationVariant& v : ablation_variants()) {
        for (std::uint64_t seed : ex.cfg.seeds) {
            const FewShotTask task = generate_task(task_spec_for_seed(ex.cfg.task, seed));
            ReportRow row{v.name, seed, {}};
            double few_shot = 0.0;
            double max_anchor = 0.0;
            std::size_t fusion_parameters = 0;
            std::vector<std::pair<std::string, double>> per_k;
            for (int k : ex.cfg.shot_values) {
                TrainConfig tc = train_config_for(ex.cfg.train, k, seed);
                tc.use_fusion = v.use_fusion;
                tc.use_anchor = v.use_anchor;
                const AdaptedState& state = cache.train(task, tc, *ex.backbone);
                const double acc = evaluate(state, *ex.backbone, task, default_options(ex.cfg));
                few_shot += acc;
                per_k.emplace_back("acc_k" + std::to_string(k), acc);
                for (const auto& b : state.loss_history) max_anchor = std::max(max_anchor, b.anchor);
                for (const auto& [name, e] : state.prompts.params.entries()) {
                    if (name.rfind("fusion.", 0) == 0) fusion_parameters += e.value.size();
                }
            }
            row.metrics.emplace_back("few_shot", few_shot / static_cast<double>(ex.cfg.shot_values.size()));
            for (auto& m : per_k) row.metrics.push_back(std::move(m));

            if (task.base_classes.size() < 2 || task.novel_classes.size() < 2) {
                fail(ErrorCategory::invalid_argument, "base-to-novel needs at least 2 base and 2 novel classes");
            }
            TrainConfig tc = train_config_for(ex.cfg.train, ex.cfg.train.shots, seed);
            tc.use_fusion = v.use_fusion;
            tc.use_anchor = v.use_anchor;
            const AdaptedState& b2n = cache.train(task, tc, *ex.backbone, task.base_classes);
            EvalOptions options = default_options(ex.cfg);
            options.classes = task.base_classes;
            const double base = evaluate(b2n, *ex.backbone, task, options);
            options.classes = task.novel_classes;
            const double novel = evaluate(b2n, *ex.backbone, task, options);
            row.metrics.emplace_back("base", base);
            row.metrics.emplace_back("novel", novel);
            row.metrics.emplace_back("hm", harmonic_mean(base, novel));
            row.metrics.emplace_back("fusion_parameters", static_cast<double>(fusion_parameters));
            row.metrics.emplace_back("max_anchor_loss", max_anchor);
            report.rows.push_back(std::move(row));
        }
    }
    return report;
}

} // namespace anchorfuse
