#pragma once

#include <cstdint>
#include <filesystem>

#include <json.hpp>

#include "loramix/lora.hpp"
#include "loramix/losses.hpp"
#include "loramix/routing.hpp"
#include "loramix/toy_model.hpp"
#include "loramix/training.hpp"

namespace loramix {

/// Everything a workbench run needs. Defaults are the desk-scale settings.
struct PipelineConfig {
    ToyModelConfig model;
    LoraConfig lora;
    RouterConfig router;
    std::size_t num_experts = 4;
    std::size_t n_per_domain = 3000;
    /// Empty means default_domain_specs(seed, model.vocab, model.seq_len).
    std::vector<DomainSpec> domains;
    HeadCalibration head;
    PhaseConfig phase1 = PhaseConfig::expert_defaults();
    PhaseConfig phase2 = PhaseConfig::router_defaults();
    std::uint64_t seed = 0;

    /// Propagates `seed` into the per-phase seeds.
    void apply_seed(std::uint64_t s);
    void validate() const;
    std::vector<DomainSpec> domain_specs() const;
};

// JSON mapping. Missing keys keep their defaults; unknown keys are rejected.
void to_json(nlohmann::json &j, const ToyModelConfig &c);
void from_json(const nlohmann::json &j, ToyModelConfig &c);
void to_json(nlohmann::json &j, const LoraConfig &c);
void from_json(const nlohmann::json &j, LoraConfig &c);
void to_json(nlohmann::json &j, const RouterConfig &c);
void from_json(const nlohmann::json &j, RouterConfig &c);
void to_json(nlohmann::json &j, const LossWeights &c);
void from_json(const nlohmann::json &j, LossWeights &c);
void to_json(nlohmann::json &j, const AdamWConfig &c);
void from_json(const nlohmann::json &j, AdamWConfig &c);
void to_json(nlohmann::json &j, const PhaseConfig &c);
void from_json(const nlohmann::json &j, PhaseConfig &c);
void to_json(nlohmann::json &j, const HeadCalibration &c);
void from_json(const nlohmann::json &j, HeadCalibration &c);
void to_json(nlohmann::json &j, const DomainSpec &c);
void from_json(const nlohmann::json &j, DomainSpec &c);
void to_json(nlohmann::json &j, const PipelineConfig &c);
void from_json(const nlohmann::json &j, PipelineConfig &c);

PipelineConfig load_pipeline_config(const std::filesystem::path &path);

}  // namespace loramix
