#pragma once

#include "anchorfuse/backbone.hpp"
#include "anchorfuse/dataset.hpp"
#include "anchorfuse/fusion.hpp"
#include "anchorfuse/objective.hpp"
#include "anchorfuse/trainer.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <vector>

namespace anchorfuse {

// One file drives every CLI subcommand. Sections and keys:
//   task:     classes k_max queries_per_class image_size noise_std template_pool_size base_fraction seed
//   backbone: image_depth text_depth image_width text_width heads image_size patch_size vocab_size
//             max_text_len embed_dim mlp_ratio seed
//   train:    shots epochs batch_size lr beta1 beta2 eps weight_decay seed visual_prompts text_context
//             fusion_layers use_fusion use_anchor use_conf_weighting
//   loss:     lambda_kd lambda_align lambda_high lambda_low temperature
//   top level: inference_context eval_template shot_values seeds reference_mode
// Missing keys keep their defaults; unknown keys are rejected.
struct RunConfig {
    SyntheticTaskSpec task;
    BackboneConfig backbone;
    TrainConfig train;
    ContextStrategy inference_context = ContextStrategy::mean;
    TemplateCategory eval_template = TemplateCategory::minimal;
    std::vector<int> shot_values{1, 2, 4, 8, 16};
    std::vector<std::uint64_t> seeds{0, 1, 2};
    bool reference_mode = false; // permits oracle-context evaluation

    void validate() const;
};

nlohmann::json to_json(const SyntheticTaskSpec& spec);
SyntheticTaskSpec spec_from_json(const nlohmann::json& j, SyntheticTaskSpec base = {});

nlohmann::json to_json(const BackboneConfig& cfg);
BackboneConfig backbone_config_from_json(const nlohmann::json& j, BackboneConfig base = {});

nlohmann::json to_json(const LossConfig& cfg);
LossConfig loss_config_from_json(const nlohmann::json& j, LossConfig base = {});

// Includes the loss section under "loss".
nlohmann::json to_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig base = {});

nlohmann::json to_json(const RunConfig& cfg);
RunConfig run_config_from_json(const nlohmann::json& j);

RunConfig load_run_config(const std::filesystem::path& path);

} // namespace anchorfuse
