#pragma once

#include "anchorfuse/config.hpp"
#include "anchorfuse/trainer.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <string>
#include <utility>
#include <vector>

namespace anchorfuse {

struct EvalOptions {
    ContextStrategy strategy = ContextStrategy::mean;
    PromptTemplate prompt = PromptTemplate::of(TemplateCategory::minimal);
    bool reference_mode = false; // required for the oracle strategy
    // Task class indices to classify among; empty means the state's classes.
    std::vector<int> classes;
};

// Top-1 accuracy over the queries whose label is in the evaluated class set.
double evaluate(const AdaptedState& state, const FrozenBackbone& backbone, const FewShotTask& task,
                const EvalOptions& options = {});

// Predicted position within the evaluated class list, one per query in `task.query`
// order restricted to the class set.
std::vector<int> predict(const AdaptedState& state, const FrozenBackbone& backbone, const FewShotTask& task,
                         const EvalOptions& options);

// 2ab / (a + b); 0 when a + b = 0.
double harmonic_mean(double a, double b);

struct ReportRow {
    std::string label; // the protocol variant, e.g. "K=4" or "template=article"
    std::uint64_t seed = 0;
    std::vector<std::pair<std::string, double>> metrics;

    double metric(const std::string& name) const;
};

struct Aggregate {
    std::string label;
    std::string metric;
    double mean = 0.0;
    double stddev = 0.0; // sample standard deviation; 0 for a single seed
    std::size_t count = 0;
};

struct EvalReport {
    std::string protocol;
    nlohmann::json config;
    std::vector<std::string> notes;
    std::vector<ReportRow> rows;

    // Labels in first-appearance order, metrics in row order.
    std::vector<Aggregate> aggregates() const;
    double mean(const std::string& label, const std::string& metric) const;

    nlohmann::json to_json() const;
    // One JSON object per row.
    std::string jsonl() const;
    std::string csv() const;
    std::string summary() const;
    // Writes <protocol>.jsonl, <protocol>.csv and <protocol>.txt into `dir`.
    void write(const std::filesystem::path& dir) const;
};

// Memoizes trained states by (task spec, backbone, train config, class set).
class RunCache {
public:
    const AdaptedState& train(const FewShotTask& task, const TrainConfig& cfg, const FrozenBackbone& backbone,
                              const std::vector<int>& classes = {});
    std::size_t size() const noexcept { return m_states.size(); }
    std::size_t trainings() const noexcept { return m_trainings; }

private:
    std::map<std::string, std::unique_ptr<AdaptedState>> m_states;
    std::size_t m_trainings = 0;
};

// Per-run-seed task and training seeds: the configured seeds plus the run seed.
SyntheticTaskSpec task_spec_for_seed(const SyntheticTaskSpec& spec, std::uint64_t seed);
TrainConfig train_config_for(const TrainConfig& cfg, int shots, std::uint64_t seed);

// Shared context for protocol runs. The backbone must be built from cfg.backbone.
struct Experiment {
    RunConfig cfg;
    const FrozenBackbone* backbone = nullptr;
    RunCache* cache = nullptr; // optional; shares trained states across protocols
};

EvalReport few_shot_protocol(const Experiment& ex);
EvalReport base_to_novel_protocol(const Experiment& ex);

// One row per template for a single trained state.
EvalReport robustness_sweep(const AdaptedState& state, const FrozenBackbone& backbone, const FewShotTask& task,
                            const std::vector<PromptTemplate>& templates, std::uint64_t seed);
// Trains at cfg.train.shots for every seed and sweeps the five templates.
EvalReport robustness_protocol(const Experiment& ex);

// null, retrieval and mean rows, plus the oracle row in reference mode.
EvalReport context_strategy_comparison(const AdaptedState& state, const FrozenBackbone& backbone,
                                       const FewShotTask& task, std::uint64_t seed, bool reference_mode);
EvalReport context_protocol(const Experiment& ex);

EvalReport fusion_layer_sweep(const Experiment& ex, const std::vector<std::vector<int>>& layer_sets);
std::vector<std::vector<int>> default_layer_sets(int image_depth);

// neither / +GCPF / +anchor / full, each with few-shot accuracy averaged over
// cfg.shot_values and base-to-novel accuracies at cfg.train.shots.
EvalReport ablation_run(const Experiment& ex);

struct AblationVariant {
    std::string name;
    bool use_fusion;
    bool use_anchor;
};
const std::vector<AblationVariant>& ablation_variants();

std::string layer_label(const std::vector<int>& layers);

} // namespace anchorfuse
