#include "anchorfuse/config.hpp"

#include "anchorfuse/error.hpp"

#include <fstream>
#include <initializer_list>
#include <string>

namespace anchorfuse {

namespace {

using nlohmann::json;

void check_keys(const json& j, const char* section, std::initializer_list<const char*> allowed) {
    if (!j.is_object()) {
        fail(ErrorCategory::config, std::string("section '") + section + "' must be an object");
    }
    for (const auto& [key, value] : j.items()) {
        bool known = false;
        for (const char* a : allowed) known = known || key == a;
        if (!known) {
            fail(ErrorCategory::config, std::string("unknown key '") + key + "' in section '" + section + "'");
        }
    }
}

template <typename T>
void read(const json& j, const char* key, T& out) {
    if (!j.contains(key)) return;
    try {
        out = j.at(key).get<T>();
    } catch (const json::exception& e) {
        fail(ErrorCategory::config, std::string("bad value for '") + key + "': " + e.what());
    }
}

} // namespace

json to_json(const SyntheticTaskSpec& s) {
    return {{"classes", s.classes},
            {"k_max", s.k_max},
            {"queries_per_class", s.queries_per_class},
            {"image_size", s.image_size},
            {"noise_std", s.noise_std},
            {"template_pool_size", s.template_pool_size},
            {"base_fraction", s.base_fraction},
            {"seed", s.seed}};
}

SyntheticTaskSpec spec_from_json(const json& j, SyntheticTaskSpec s) {
    check_keys(j, "task",
               {"classes", "k_max", "queries_per_class", "image_size", "noise_std", "template_pool_size",
                "base_fraction", "seed"});
    read(j, "classes", s.classes);
    read(j, "k_max", s.k_max);
    read(j, "queries_per_class", s.queries_per_class);
    read(j, "image_size", s.image_size);
    read(j, "noise_std", s.noise_std);
    read(j, "template_pool_size", s.template_pool_size);
    read(j, "base_fraction", s.base_fraction);
    read(j, "seed", s.seed);
    return s;
}

json to_json(const BackboneConfig& c) {
    return {{"image_depth", c.image_depth}, {"text_depth", c.text_depth},   {"image_width", c.image_width},
            {"text_width", c.text_width},   {"heads", c.heads},             {"image_size", c.image_size},
            {"patch_size", c.patch_size},   {"vocab_size", c.vocab_size},   {"max_text_len", c.max_text_len},
            {"embed_dim", c.embed_dim},     {"mlp_ratio", c.mlp_ratio},     {"seed", c.seed}};
}

BackboneConfig backbone_config_from_json(const json& j, BackboneConfig c) {
    check_keys(j, "backbone",
               {"image_depth", "text_depth", "image_width", "text_width", "heads", "image_size", "patch_size",
                "vocab_size", "max_text_len", "embed_dim", "mlp_ratio", "seed"});
    read(j, "image_depth", c.image_depth);
    read(j, "text_depth", c.text_depth);
    read(j, "image_width", c.image_width);
    read(j, "text_width", c.text_width);
    read(j, "heads", c.heads);
    read(j, "image_size", c.image_size);
    read(j, "patch_size", c.patch_size);
    read(j, "vocab_size", c.vocab_size);
    read(j, "max_text_len", c.max_text_len);
    read(j, "embed_dim", c.embed_dim);
    read(j, "mlp_ratio", c.mlp_ratio);
    read(j, "seed", c.seed);
    return c;
}

json to_json(const LossConfig& c) {
    return {{"lambda_kd", c.lambda_kd},
            {"lambda_align", c.lambda_align},
            {"lambda_high", c.lambda_high},
            {"lambda_low", c.lambda_low},
            {"temperature", c.temperature}};
}

LossConfig loss_config_from_json(const json& j, LossConfig c) {
    check_keys(j, "loss", {"lambda_kd", "lambda_align", "lambda_high", "lambda_low", "temperature"});
    read(j, "lambda_kd", c.lambda_kd);
    read(j, "lambda_align", c.lambda_align);
    read(j, "lambda_high", c.lambda_high);
    read(j, "lambda_low", c.lambda_low);
    read(j, "temperature", c.temperature);
    return c;
}

json to_json(const TrainConfig& c) {
    return {{"shots", c.shots},
            {"epochs", c.epochs},
            {"batch_size", c.batch_size},
            {"lr", c.optimizer.lr},
            {"beta1", c.optimizer.beta1},
            {"beta2", c.optimizer.beta2},
            {"eps", c.optimizer.eps},
            {"weight_decay", c.optimizer.weight_decay},
            {"seed", c.seed},
            {"visual_prompts", c.visual_prompts},
            {"text_context", c.text_context},
            {"fusion_layers", c.fusion_layers},
            {"use_fusion", c.use_fusion},
            {"use_anchor", c.use_anchor},
            {"use_conf_weighting", c.use_conf_weighting},
            {"loss", to_json(c.loss)}};
}

TrainConfig train_config_from_json(const json& j, TrainConfig c) {
    check_keys(j, "train",
               {"shots", "epochs", "batch_size", "lr", "beta1", "beta2", "eps", "weight_decay", "seed",
                "visual_prompts", "text_context", "fusion_layers", "use_fusion", "use_anchor",
                "use_conf_weighting", "loss"});
    read(j, "shots", c.shots);
    read(j, "epochs", c.epochs);
    read(j, "batch_size", c.batch_size);
    read(j, "lr", c.optimizer.lr);
    read(j, "beta1", c.optimizer.beta1);
    read(j, "beta2", c.optimizer.beta2);
    read(j, "eps", c.optimizer.eps);
    read(j, "weight_decay", c.optimizer.weight_decay);
    read(j, "seed", c.seed);
    read(j, "visual_prompts", c.visual_prompts);
    read(j, "text_context", c.text_context);
    read(j, "fusion_layers", c.fusion_layers);
    read(j, "use_fusion", c.use_fusion);
    read(j, "use_anchor", c.use_anchor);
    read(j, "use_conf_weighting", c.use_conf_weighting);
    if (j.contains("loss")) c.loss = loss_config_from_json(j.at("loss"), c.loss);
    return c;
}

void RunConfig::validate() const {
    task.validate();
    backbone.validate();
    train.validate(backbone);
    if (task.image_size != backbone.image_size) {
        fail(ErrorCategory::config, "task image_size " + std::to_string(task.image_size) +
                                        " differs from backbone image_size " + std::to_string(backbone.image_size));
    }
    if (seeds.empty()) fail(ErrorCategory::config, "at least one seed is required");
    for (int k : shot_values) {
        if (k < 1 || k > task.k_max) {
            fail(ErrorCategory::config, "shot value " + std::to_string(k) + " outside [1, k_max]");
        }
    }
    if (inference_context == ContextStrategy::oracle && !reference_mode) {
        fail(ErrorCategory::config, "oracle inference context requires reference_mode");
    }
}

json to_json(const RunConfig& c) {
    json train = to_json(c.train);
    json loss = train.at("loss");
    train.erase("loss");
    return {{"task", to_json(c.task)},
            {"backbone", to_json(c.backbone)},
            {"train", train},
            {"loss", loss},
            {"inference_context", strategy_name(c.inference_context)},
            {"eval_template", category_name(c.eval_template)},
            {"shot_values", c.shot_values},
            {"seeds", c.seeds},
            {"reference_mode", c.reference_mode}};
}

RunConfig run_config_from_json(const json& j) {
    check_keys(j, "top level",
               {"task", "backbone", "train", "loss", "inference_context", "eval_template", "shot_values", "seeds",
                "reference_mode"});
    RunConfig c;
    if (j.contains("task")) c.task = spec_from_json(j.at("task"));
    if (j.contains("backbone")) c.backbone = backbone_config_from_json(j.at("backbone"));
    if (j.contains("train")) c.train = train_config_from_json(j.at("train"));
    if (j.contains("loss")) c.train.loss = loss_config_from_json(j.at("loss"), c.train.loss);
    if (j.contains("inference_context")) {
        c.inference_context = parse_strategy(j.at("inference_context").get<std::string>());
    }
    if (j.contains("eval_template")) {
        c.eval_template = parse_template_category(j.at("eval_template").get<std::string>());
    }
    read(j, "shot_values", c.shot_values);
    read(j, "seeds", c.seeds);
    read(j, "reference_mode", c.reference_mode);
    return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) fail(ErrorCategory::io, "cannot read config " + path.string());
    json j;
    try {
        j = json::parse(in);
    } catch (const json::exception& e) {
        fail(ErrorCategory::config, "config " + path.string() + " is not valid JSON: " + e.what());
    }
    RunConfig c = run_config_from_json(j);
    c.validate();
    return c;
}

} // namespace anchorfuse
