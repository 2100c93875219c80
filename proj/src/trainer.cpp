#include "anchorfuse/trainer.hpp"

#include "anchorfuse/config.hpp"
#include "anchorfuse/error.hpp"
#include "anchorfuse/ops.hpp"

#include <json.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <numeric>

namespace anchorfuse {

namespace {

constexpr double kInitStd = 0.02;

Tensor gaussian(Rng& rng, std::size_t rows, std::size_t cols, double stddev) {
    Tensor t = Tensor::matrix(rows, cols);
    for (double& v : t.values()) v = rng.normal(0.0, stddev);
    return t;
}

int argmax_lowest(std::span<const double> s) {
    int best = 0;
    for (std::size_t i = 1; i < s.size(); ++i) {
        if (s[i] > s[static_cast<std::size_t>(best)]) best = static_cast<int>(i);
    }
    return best;
}

} // namespace

void AdamWConfig::validate() const {
    if (!(lr > 0.0)) fail(ErrorCategory::config, "learning rate must be positive");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
        fail(ErrorCategory::config, "adam betas must lie in [0, 1)");
    }
    if (!(eps > 0.0)) fail(ErrorCategory::config, "adam eps must be positive");
    if (!(weight_decay >= 0.0)) fail(ErrorCategory::config, "weight decay must be non-negative");
}

void TrainConfig::validate(const BackboneConfig& backbone) const {
    if (shots < 1) fail(ErrorCategory::config, "shots must be at least 1");
    if (epochs < 0) fail(ErrorCategory::config, "epochs must be non-negative");
    if (batch_size < 1) fail(ErrorCategory::config, "batch_size must be at least 1");
    if (visual_prompts < 0 || text_context < 0) fail(ErrorCategory::config, "prompt counts must be non-negative");
    optimizer.validate();
    loss.validate();
    backbone.validate_fusion_layers(fusion_layers);
    std::vector<int> sorted = fusion_layers;
    std::sort(sorted.begin(), sorted.end());
    if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end()) {
        fail(ErrorCategory::config, "fusion_layers contains a duplicate layer");
    }
    if (!active_fusion_layers().empty() && (visual_prompts == 0 || text_context == 0)) {
        fail(ErrorCategory::config, "fusion needs at least one visual prompt and one text context token");
    }
}

std::vector<int> TrainConfig::active_fusion_layers() const {
    if (!use_fusion) return {};
    std::vector<int> layers = fusion_layers;
    std::sort(layers.begin(), layers.end());
    return layers;
}

std::string visual_prompt_name(int layer) { return "prompt.visual.layer" + std::to_string(layer); }

PromptState init_prompt_state(const TrainConfig& cfg, const BackboneConfig& backbone, std::uint64_t seed) {
    backbone.validate();
    cfg.validate(backbone);
    PromptState state;
    state.visual_prompts = cfg.visual_prompts;
    state.text_context = cfg.text_context;
    state.fusion_layers = cfg.active_fusion_layers();
    state.image_depth = backbone.image_depth;
    state.heads = backbone.heads;

    Rng visual_rng(derive_seed(seed, 101));
    if (cfg.visual_prompts > 0) {
        for (int l = 0; l < backbone.image_depth; ++l) {
            state.params.add(visual_prompt_name(l),
                             gaussian(visual_rng, static_cast<std::size_t>(cfg.visual_prompts),
                                      static_cast<std::size_t>(backbone.image_width), kInitStd),
                             false);
        }
    }
    Rng text_rng(derive_seed(seed, 102));
    if (cfg.text_context > 0) {
        state.params.add(kTextContextName,
                         gaussian(text_rng, static_cast<std::size_t>(cfg.text_context),
                                  static_cast<std::size_t>(backbone.text_width), kInitStd),
                         false);
    }
    for (int l : state.fusion_layers) {
        Rng fusion_rng(derive_seed(seed, 200 + static_cast<std::uint64_t>(l)));
        add_fusion_parameters(state.params, l, backbone.image_width, backbone.text_width, fusion_rng, kInitStd);
    }
    return state;
}

void adamw_step(ParameterRegistry& registry, const GradientMap& grads, AdamMoments& moments, const AdamWConfig& cfg,
                int t) {
    if (t < 1) fail(ErrorCategory::invalid_argument, "adamw step index must start at 1");
    for (const auto& [name, g] : grads) {
        if (registry.frozen(name)) {
            fail(ErrorCategory::invalid_argument, "gradient supplied for frozen parameter '" + name + "'");
        }
    }
    const double c1 = 1.0 - std::pow(cfg.beta1, t);
    const double c2 = 1.0 - std::pow(cfg.beta2, t);
    for (const auto& [name, g] : grads) {
        Tensor& theta = registry.at(name);
        if (!g.same_shape(theta)) {
            fail(ErrorCategory::shape_mismatch, "gradient for '" + name + "' is " + g.shape_string() +
                                                    ", parameter is " + theta.shape_string());
        }
        auto [mit, m_new] = moments.m.try_emplace(name, Tensor(theta.shape(), 0.0));
        auto [vit, v_new] = moments.v.try_emplace(name, Tensor(theta.shape(), 0.0));
        Tensor& m = mit->second;
        Tensor& v = vit->second;
        const double decay = 1.0 - cfg.lr * cfg.weight_decay;
        for (std::size_t i = 0; i < theta.size(); ++i) {
            theta[i] *= decay;
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            theta[i] -= cfg.lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + cfg.eps);
        }
    }
}

BoundPrompts bind_prompts(Tape& tape, const PromptState& state) {
    BoundPrompts b;
    for (const auto& [name, entry] : state.params.entries()) {
        b.by_name.emplace(name, tape.parameter(entry.value));
    }
    if (state.visual_prompts > 0) {
        for (int l = 0; l < state.image_depth; ++l) b.visual.push_back(b.by_name.at(visual_prompt_name(l)));
    }
    if (state.text_context > 0) b.context = b.by_name.at(kTextContextName);
    for (int l : state.fusion_layers) {
        FusionVars f;
        f.layer = l;
        f.heads = state.heads;
        const std::string p = fusion_prefix(l);
        auto at = [&](const std::string& n) { return b.by_name.at(p + n); };
        f.visual_in = at("visual_in");
        f.text_in = at("text_in");
        f.visual_from_text = {at("visual_from_text.query"), at("visual_from_text.key"), at("visual_from_text.value"),
                              at("visual_from_text.output")};
        f.text_from_visual = {at("text_from_visual.query"), at("text_from_visual.key"), at("text_from_visual.value"),
                              at("text_from_visual.output")};
        f.visual_out = at("visual_out");
        f.text_out = at("text_out");
        f.visual_gate = at("visual_gate");
        f.text_gate = at("text_gate");
        b.fusion.push_back(f);
    }
    return b;
}

Tensor class_bank(const Tensor& context, const Tensor& token_mean) {
    if (token_mean.size() != context.cols()) {
        fail(ErrorCategory::shape_mismatch, "class bank: context " + context.shape_string() + " vs token mean " +
                                                token_mean.shape_string());
    }
    Tensor bank = context;
    for (std::size_t r = 0; r < bank.rows(); ++r) {
        for (std::size_t c = 0; c < bank.cols(); ++c) bank(r, c) += token_mean[c];
    }
    return bank;
}

ConditionedPrompts condition_prompts(Tape& tape, const BoundPrompts& bound, Var bank, const Tensor& token_mean) {
    if (bound.fusion.empty()) return {bound.visual, bound.context};
    FusionChain chain(bound.fusion, bank);
    const FusionHook hook = chain.hook();
    ConditionedPrompts out{bound.visual, {}};
    for (int layer : hook.layers) {
        auto& p = out.visual.at(static_cast<std::size_t>(layer));
        p = hook.refine(layer, p);
    }
    Tensor negated = token_mean;
    for (double& v : negated.values()) v = -v;
    out.context = add_row(chain.text_stream(), tape.constant(std::move(negated)));
    return out;
}

AdaptationProblem::AdaptationProblem(const FewShotTask& task, std::vector<int> classes, const TrainConfig& cfg,
                                     const FrozenBackbone& backbone)
    : m_backbone(&backbone), m_cfg(cfg), m_classes(std::move(classes)) {
    cfg.validate(backbone.config());
    if (m_classes.empty()) {
        m_classes.resize(static_cast<std::size_t>(task.class_count()));
        std::iota(m_classes.begin(), m_classes.end(), 0);
    }
    if (m_classes.size() < 2) fail(ErrorCategory::invalid_argument, "training needs at least 2 classes");
    const PromptTemplate minimal = PromptTemplate::of(TemplateCategory::minimal);
    for (int c : m_classes) {
        if (c < 0 || c >= task.class_count()) {
            fail(ErrorCategory::invalid_argument, "class index " + std::to_string(c) + " out of range");
        }
        if (static_cast<int>(task.support[static_cast<std::size_t>(c)].size()) < cfg.shots) {
            fail(ErrorCategory::invalid_argument, "class " + std::to_string(c) + " has fewer than " +
                                                      std::to_string(cfg.shots) + " support images");
        }
        m_tokens.push_back(expand_template(minimal, task.class_names[static_cast<std::size_t>(c)]));
        m_token_means.push_back(backbone.mean_token_embedding(m_tokens.back()));
    }
    m_anchors = build_anchors(task, m_classes, cfg.shots, backbone);

    std::vector<Tensor> zero_shot_text;
    for (const auto& ids : m_tokens) zero_shot_text.push_back(backbone.text_embedding(ids));
    for (std::size_t pos = 0; pos < m_classes.size(); ++pos) {
        for (Tensor& image : task.support_images(m_classes[pos], cfg.shots)) {
            TrainingSample s;
            s.zero_shot_logits = logits(backbone.image_embedding(image), zero_shot_text, backbone.logit_scale());
            s.image = std::move(image);
            s.label = static_cast<int>(pos);
            m_samples.push_back(std::move(s));
        }
    }
}

AdaptationProblem::SampleForward AdaptationProblem::forward(Tape& tape, const ConditionedPrompts& prompts,
                                                            std::span<const Var> class_texts,
                                                            const TrainingSample& sample) const {
    const auto y = static_cast<std::size_t>(sample.label);
    const ImageEncoding image = m_backbone->encode_image(tape, sample.image, prompts.visual, nullptr);
    Var s = logits(image.pooled, concat_rows(class_texts), m_backbone->logit_scale());
    RecordedLoss loss = total_loss(s, sample.zero_shot_logits, sample.label, class_texts[y], m_anchors.high[y],
                                   m_anchors.low[y], image.pooled, class_texts[y], m_cfg.loss, m_cfg.switches());
    return {s, loss};
}

std::pair<ConditionedPrompts, std::vector<Var>> AdaptationProblem::condition(Tape& tape, const BoundPrompts& bound,
                                                                             std::span<const int> labels) const {
    Tensor token_mean(m_token_means.front().shape(), 0.0);
    for (int y : labels) {
        const Tensor& e = m_token_means[static_cast<std::size_t>(y)];
        for (std::size_t i = 0; i < token_mean.size(); ++i) token_mean[i] += e[i];
    }
    for (double& v : token_mean.values()) v /= static_cast<double>(labels.size());
    Var bank = bound.fusion.empty() ? Var{} : add_row(bound.context, tape.constant(token_mean));
    ConditionedPrompts prompts = condition_prompts(tape, bound, bank, token_mean);
    std::vector<Var> texts;
    texts.reserve(m_tokens.size());
    for (const auto& ids : m_tokens) texts.push_back(m_backbone->encode_text(tape, prompts.context, ids));
    return {std::move(prompts), std::move(texts)};
}

LossBreakdown AdaptationProblem::batch_loss(const PromptState& state, std::span<const std::size_t> batch,
                                            GradientMap* grads, std::vector<LossBreakdown>* per_sample) const {
    if (batch.empty()) fail(ErrorCategory::invalid_argument, "empty batch");
    std::vector<int> labels;
    for (std::size_t index : batch) {
        if (index >= m_samples.size()) fail(ErrorCategory::invalid_argument, "sample index out of range");
        labels.push_back(m_samples[index].label);
    }
    Tape tape(grads != nullptr);
    const BoundPrompts bound = bind_prompts(tape, state);
    const auto [prompts, class_texts] = condition(tape, bound, labels);

    std::vector<Var> totals;
    std::vector<LossBreakdown> parts;
    for (std::size_t index : batch) {
        SampleForward f = forward(tape, prompts, class_texts, m_samples[index]);
        totals.push_back(f.loss.total);
        parts.push_back(f.loss.values);
    }
    const std::vector<double> weights(totals.size(), 1.0 / static_cast<double>(totals.size()));
    Var total = weighted_sum(totals, weights);
    LossBreakdown mean = mean_breakdown(parts);
    mean.total = total.item();
    if (per_sample) *per_sample = parts;
    if (grads) {
        tape.backward(total);
        grads->clear();
        for (const auto& [name, var] : bound.by_name) {
            if (!state.params.frozen(name)) grads->emplace(name, tape.grad(var));
        }
    }
    return mean;
}

double AdaptationProblem::train_accuracy(const PromptState& state) const {
    Tape tape(false);
    const BoundPrompts bound = bind_prompts(tape, state);
    std::vector<int> all(m_classes.size());
    std::iota(all.begin(), all.end(), 0);
    const auto [prompts, class_texts] = condition(tape, bound, all);
    std::size_t correct = 0;
    for (const TrainingSample& sample : m_samples) {
        SampleForward f = forward(tape, prompts, class_texts, sample);
        if (argmax_lowest(f.logits.value().values()) == sample.label) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(m_samples.size());
}

LossBreakdown forward_train(const AdaptationProblem& problem, const PromptState& state, std::size_t sample) {
    const std::array<std::size_t, 1> batch{sample};
    return problem.batch_loss(state, batch, nullptr);
}

AdaptedState train_few_shot(const FewShotTask& task, const TrainConfig& cfg, const FrozenBackbone& backbone,
                            std::vector<int> classes) {
    const std::uint64_t frozen_hash = backbone.parameter_hash();
    const AdaptationProblem problem(task, std::move(classes), cfg, backbone);

    AdaptedState out;
    out.prompts = init_prompt_state(cfg, backbone.config(), cfg.seed);
    out.anchors = problem.anchors();
    out.classes = problem.classes();
    out.config = cfg;

    std::vector<std::size_t> order(problem.samples().size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng shuffle_rng(derive_seed(cfg.seed, 301));
    AdamMoments moments;
    int step = 0;
    GradientMap grads;
    const auto batch = static_cast<std::size_t>(cfg.batch_size);
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        shuffle_rng.shuffle(order.begin(), order.end());
        std::vector<LossBreakdown> epoch_parts;
        for (std::size_t begin = 0; begin < order.size(); begin += batch) {
            const std::size_t count = std::min(batch, order.size() - begin);
            const std::span<const std::size_t> indices(order.data() + begin, count);
            LossBreakdown b = problem.batch_loss(out.prompts, indices, &grads);
            if (!std::isfinite(b.total)) {
                fail(ErrorCategory::numeric, "non-finite loss at epoch " + std::to_string(epoch));
            }
            adamw_step(out.prompts.params, grads, moments, cfg.optimizer, ++step);
            // weight each batch by its size so the epoch mean is per-sample
            for (std::size_t i = 0; i < count; ++i) epoch_parts.push_back(b);
        }
        out.loss_history.push_back(mean_breakdown(epoch_parts));
    }
    if (backbone.parameter_hash() != frozen_hash) {
        fail(ErrorCategory::numeric, "frozen backbone parameters changed during training");
    }
    out.train_accuracy = problem.train_accuracy(out.prompts);
    return out;
}

namespace {

constexpr const char* kCheckpointFormat = "anchorfuse-checkpoint";
constexpr int kCheckpointVersion = 1;

nlohmann::json tensor_json(const Tensor& t) {
    return {{"shape", t.shape()}, {"values", std::vector<double>(t.values().begin(), t.values().end())}};
}

Tensor tensor_from_json(const nlohmann::json& j) {
    return Tensor(j.at("shape").get<std::vector<std::size_t>>(), j.at("values").get<std::vector<double>>());
}

nlohmann::json breakdown_json(const LossBreakdown& b) {
    return {{"total", b.total}, {"ce", b.ce},     {"kl", b.kl}, {"anchor", b.anchor},
            {"align", b.align}, {"conf", b.conf}, {"w", b.w}};
}

LossBreakdown breakdown_from_json(const nlohmann::json& j) {
    LossBreakdown b;
    b.total = j.at("total").get<double>();
    b.ce = j.at("ce").get<double>();
    b.kl = j.at("kl").get<double>();
    b.anchor = j.at("anchor").get<double>();
    b.align = j.at("align").get<double>();
    b.conf = j.at("conf").get<double>();
    b.w = j.at("w").get<double>();
    return b;
}

} // namespace

void save_checkpoint(const AdaptedState& state, const std::filesystem::path& path) {
    nlohmann::json params = nlohmann::json::object();
    for (const auto& [name, entry] : state.prompts.params.entries()) params[name] = tensor_json(entry.value);
    nlohmann::json high = nlohmann::json::array(), low = nlohmann::json::array();
    for (const Tensor& t : state.anchors.high) high.push_back(tensor_json(t));
    for (const Tensor& t : state.anchors.low) low.push_back(tensor_json(t));
    nlohmann::json history = nlohmann::json::array();
    for (const auto& b : state.loss_history) history.push_back(breakdown_json(b));

    const nlohmann::json j = {
        {"format", kCheckpointFormat},
        {"version", kCheckpointVersion},
        {"config", to_json(state.config)},
        {"prompts",
         {{"visual_prompts", state.prompts.visual_prompts},
          {"text_context", state.prompts.text_context},
          {"fusion_layers", state.prompts.fusion_layers},
          {"image_depth", state.prompts.image_depth},
          {"heads", state.prompts.heads},
          {"params", params}}},
        {"anchors", {{"high", high}, {"low", low}}},
        {"classes", state.classes},
        {"loss_history", history},
        {"train_accuracy", state.train_accuracy},
    };
    std::ofstream out(path);
    if (!out) fail(ErrorCategory::io, "cannot write checkpoint " + path.string());
    out << j.dump(1) << '\n';
    if (!out) fail(ErrorCategory::io, "failed writing checkpoint " + path.string());
}

AdaptedState load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) fail(ErrorCategory::io, "cannot read checkpoint " + path.string());
    nlohmann::json j;
    try {
        in >> j;
        if (j.at("format") != kCheckpointFormat || j.at("version") != kCheckpointVersion) {
            fail(ErrorCategory::io, path.string() + " is not a version " + std::to_string(kCheckpointVersion) +
                                        " checkpoint");
        }
        AdaptedState s;
        s.config = train_config_from_json(j.at("config"));
        const auto& p = j.at("prompts");
        s.prompts.visual_prompts = p.at("visual_prompts").get<int>();
        s.prompts.text_context = p.at("text_context").get<int>();
        s.prompts.fusion_layers = p.at("fusion_layers").get<std::vector<int>>();
        s.prompts.image_depth = p.at("image_depth").get<int>();
        s.prompts.heads = p.at("heads").get<int>();
        for (const auto& [name, t] : p.at("params").items()) s.prompts.params.add(name, tensor_from_json(t), false);
        for (const auto& t : j.at("anchors").at("high")) s.anchors.high.push_back(tensor_from_json(t));
        for (const auto& t : j.at("anchors").at("low")) s.anchors.low.push_back(tensor_from_json(t));
        s.classes = j.at("classes").get<std::vector<int>>();
        for (const auto& b : j.at("loss_history")) s.loss_history.push_back(breakdown_from_json(b));
        s.train_accuracy = j.at("train_accuracy").get<double>();
        return s;
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorCategory::io, "malformed checkpoint " + path.string() + ": " + e.what());
    }
}

ModelGradientCheck check_gradients(const AdaptationProblem& problem, const PromptState& state, double eps,
                                   double rel_tol, double abs_tol) {
    std::vector<std::size_t> batch(problem.samples().size());
    std::iota(batch.begin(), batch.end(), 0);
    GradientMap analytic;
    std::vector<LossBreakdown> base;
    problem.batch_loss(state, batch, &analytic, &base);

    const LossConfig& lc = problem.config().loss;
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

    ModelGradientCheck out;
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

} // namespace anchorfuse
