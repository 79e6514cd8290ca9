#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "ernie/action_reg.hpp"
#include "ernie/adv_reg.hpp"
#include "ernie/envs.hpp"
#include "ernie/marl.hpp"
#include "ernie/net.hpp"

namespace ernie::cfg {

enum class Algo { qcombo, ddpg, mf_ddpg };
enum class EnvKind { coopnav, gridq };

std::string to_string(Algo a);
std::string to_string(EnvKind e);

struct TrainSettings {
    double gamma = 0.95;
    double tau = 0.01;
    double lr = 1e-3;
    marl::Optimizer optimizer = marl::Optimizer::sgd;
    int batch = 64;
    int replay_capacity = 100000;
    double lambda_q = 1.0;
    std::vector<int> hidden{64, 64};
    nn::Activation activation = nn::Activation::relu;
    /// Updates start once the buffer holds this many transitions (at least one batch).
    int warmup = 1000;
    int update_every = 1;
    int log_every = 100;
    /// 0 selects the environment default (coopnav 50, gridq 100).
    int episode_length = 0;
    /// Rewards are multiplied by this factor before they enter the learner.
    double reward_scale = 1.0;
    double explore_final = 0.05;
    double explore_fraction = 0.3;
    double actor_noise = 0.1;
};

struct ErnieSettings {
    bool enabled = false;
    bool stackelberg = false;
    double epsilon = 0.1;
    int k_steps = 3;
    double eta = 0.0;
    double lambda = 0.1;
    adv::Metric metric = adv::Metric::sq_l2;
    adv::Norm norm = adv::Norm::l2;
    /// pgd or gaussian (random-noise baseline).
    std::string attack = "pgd";
    double sigma = 0.0;
    double init_fraction = 0.1;
    bool regularize_global = false;
};

struct ErnieASettings {
    bool enabled = false;
    int k = 1;
    action::Mode mode = action::Mode::greedy;
    double lambda = 0.1;
    bool restart_each_round = false;
};

struct MeanFieldSettings {
    bool enabled = false;
    double lambda_w = 1.0;
    int steps = 5;
    double eta = 0.05;
    double lambda = 0.1;
    bool attack_avg_action = false;
};

struct EvalSettings {
    int episodes = 20;
    std::vector<double> sigmas{0.0, 0.1, 0.25, 0.5, 1.0};
    std::vector<double> dynamics_scales{0.75, 1.0, 1.5};
    std::vector<double> malicious_rates{0.03, 0.05};
    env::MaliciousMode malicious_mode = env::MaliciousMode::adversarial;
    std::uint64_t seed = 12345;
};

struct ExperimentConfig {
    Algo algo = Algo::qcombo;
    EnvKind env = EnvKind::gridq;
    int n_agents = 4;
    int grid_rows = 2;
    int grid_cols = 2;
    double gridq_exit_fraction = 0.5;
    std::vector<std::uint64_t> seeds{1};
    long train_steps = 10000;
    TrainSettings train;
    ErnieSettings ernie;
    ErnieASettings ernie_a;
    MeanFieldSettings meanfield;
    EvalSettings eval;
    std::string out_dir = "runs";
    bool strict = true;

    /// Cross-field checks; throws ConfigError.
    void validate() const;
    bool discrete() const { return env == EnvKind::gridq; }
    int episode_length() const;
};

/// Defaults are filled for absent keys. Unknown keys are rejected when "strict" is true
/// (the default). Throws ConfigError on any violation.
ExperimentConfig config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const ExperimentConfig& c);
ExperimentConfig load_config(const std::string& path);
/// Writes the fully resolved config as `resolved_config.json` under `dir`.
std::string echo_config(const ExperimentConfig& c, const std::string& dir);

} // namespace ernie::cfg
