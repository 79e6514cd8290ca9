#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "ernie/config.hpp"
#include "ernie/envs.hpp"
#include "ernie/marl.hpp"

namespace ernie::train {

inline constexpr const char* kMetricsFormat = "ernie-lab-metrics/1";
inline constexpr const char* kCheckpointFormat = "ernie-lab-checkpoint/1";

/// One logging interval. Loss columns that do not apply to the algorithm are 0;
/// intervals without a finished episode or without an update hold nan.
struct MetricsRow {
    long step = 0;
    std::uint64_t seed = 0;
    double episodic_return_mean = 0.0;
    double episodic_return_std = 0.0;
    double loss_total = 0.0;
    double loss_ind = 0.0;
    double loss_glob = 0.0;
    double loss_reg = 0.0;
    double loss_critic = 0.0;
    double loss_actor = 0.0;
    double reg_value_mean = 0.0;
    double attack_norm_mean = 0.0;
    double action_reg_mean = 0.0;
    double mf_reg_mean = 0.0;
    /// Written to timing.csv, never to metrics.csv.
    double wall_ms = 0.0;
};

std::string metrics_header();
std::string format_metrics_row(const MetricsRow& r);
/// Inverse of format_metrics_row (wall_ms is left at 0).
MetricsRow parse_metrics_row(const std::string& line);
/// Shortest decimal form that parses back to the same double.
std::string format_double(double v);

/// Trained nets of one run, for whichever algorithm the config selects.
struct Agents {
    cfg::Algo algo = cfg::Algo::qcombo;
    marl::QcomboNets qcombo;
    marl::DdpgNets ddpg;
    marl::MfDdpgNets mf;

    /// Deterministic execution policy (argmax of individual Qs, or actor outputs).
    env::JointAct act(const env::Obs& obs) const;
    /// Global Q of the agents; empty for the continuous learners.
    env::GlobalQFn global_q() const;
};

std::unique_ptr<env::MultiAgentEnv> make_env(const cfg::ExperimentConfig& c);
Agents init_agents(const cfg::ExperimentConfig& c, const env::MultiAgentEnv& e, std::uint64_t seed);

struct RunOptions {
    /// Directory for metrics.csv, timing.csv and checkpoints/; empty writes nothing.
    std::string out_dir;
    bool write_checkpoints = true;
    /// Called after every update with (step, losses row so far); used by tests.
    std::function<void(long, const MetricsRow&)> on_update;
};

struct RunResult {
    std::vector<MetricsRow> rows;
    Agents agents;
    std::vector<double> episode_returns;
};

/// One training run. Deterministic per (config, seed).
RunResult train_run(const cfg::ExperimentConfig& c, std::uint64_t seed, const RunOptions& opts = {});

/// Trains every seed in the config under `out_dir`/seed_<s>/ and echoes the resolved config.
std::vector<RunResult> cmd_train(const cfg::ExperimentConfig& c, const std::string& out_dir);

void save_checkpoint(const Agents& a, const cfg::ExperimentConfig& c, std::uint64_t seed, long step,
                     const std::string& dir);

struct Checkpoint {
    Agents agents;
    nlohmann::json manifest;
};

/// Accepts a checkpoint directory or its manifest.json.
Checkpoint load_checkpoint(const std::string& path);
/// Throws ConfigError when the checkpoint was produced for a different algorithm or env shape.
void check_compatible(const cfg::ExperimentConfig& c, const Checkpoint& ck);

struct EvalRow {
    env::PerturbSpec spec;
    int episode = 0;
    double ret = 0.0;
};

struct EvalSummary {
    env::PerturbSpec spec;
    int episodes = 0;
    double mean = 0.0;
    double std = 0.0;
    double p10 = 0.0;
    double p50 = 0.0;
    double p90 = 0.0;
};

/// One factor at a time: the noise sweep (ascending), then dynamics scales other than 1,
/// then malicious rates (discrete envs only).
std::vector<env::PerturbSpec> eval_sweep(const cfg::ExperimentConfig& c);

/// `episodes` rollouts per perturbation setting; episode e uses the same seed under every setting.
std::vector<EvalRow> evaluate_agents(const Agents& a, const cfg::ExperimentConfig& c,
                                     const std::vector<env::PerturbSpec>& specs, int episodes, std::uint64_t seed);
std::vector<EvalSummary> summarize(const std::vector<EvalRow>& rows);
/// Linear interpolation between order statistics.
double percentile(std::vector<double> v, double q);

/// Evaluates a checkpoint over the configured sweep; writes results.csv and summary.csv to out_dir.
std::vector<EvalSummary> cmd_evaluate(const cfg::ExperimentConfig& c, const std::string& checkpoint,
                                      const std::string& out_dir);

} // namespace ernie::train
