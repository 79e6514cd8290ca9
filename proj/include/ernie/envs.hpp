#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <ostream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "ernie/action_reg.hpp"

namespace ernie::env {

using Obs = std::vector<Eigen::VectorXd>;

enum class MaliciousMode { random, adversarial };
std::string to_string(MaliciousMode m);
MaliciousMode malicious_mode_from_string(const std::string& s);

/// Evaluation-time perturbation of an environment.
struct PerturbSpec {
    double obs_noise_sigma = 0.0;
    /// Multiplies the max speed (coopnav) or the service rate (gridq).
    double dynamics_scale = 1.0;
    double malicious_rate = 0.0;
    MaliciousMode malicious_mode = MaliciousMode::random;

    void validate() const;
    bool is_identity() const;
};

// ---------------------------------------------------------------- coopnav

struct CoopNavParams {
    double dt = 0.1;
    double v_max = 1.0;
    double collision_dist = 0.1;
    double bound = 1.0;
};

/// Columns are agents / landmarks.
struct CoopNavState {
    Eigen::MatrixXd pos;
    Eigen::MatrixXd vel;
    Eigen::MatrixXd landmarks;
    int t = 0;
    CoopNavParams params;

    int n_agents() const { return static_cast<int>(pos.cols()); }
};

struct CoopNavReset {
    CoopNavState state;
    Obs obs;
};

struct CoopNavStep {
    CoopNavState state;
    Obs obs;
    Eigen::VectorXd rewards;
    double global_reward = 0.0;
    /// Number of action coordinates that were outside [-1, 1] and got clamped.
    int clamped = 0;
};

CoopNavReset coopnav_reset(int n_agents, std::uint64_t seed, const CoopNavParams& params = {});
/// obs_i = [own pos, own vel, landmark offsets, other-agent offsets].
Obs coopnav_obs(const CoopNavState& s);
int coopnav_obs_dim(int n_agents);
/// [positions, velocities, landmarks], each flattened agent-major.
Eigen::VectorXd coopnav_global_state(const CoopNavState& s);
Eigen::VectorXd coopnav_rewards(const CoopNavState& s);
CoopNavStep coopnav_step(const CoopNavState& s, const std::vector<Eigen::VectorXd>& actions,
                         double dynamics_scale = 1.0);

// ---------------------------------------------------------------- gridq

/// Approach order of the four queues at an intersection.
enum Dir { north = 0, south = 1, east = 2, west = 3 };

struct GridQParams {
    int rows = 2;
    int cols = 2;
    /// Per-approach arrival rates are drawn uniformly from [arrival_lo, arrival_hi].
    double arrival_lo = 0.05;
    double arrival_hi = 0.25;
    double serve = 1.0;
    /// Share of served cars that leave the network instead of joining the next intersection.
    double exit_fraction = 0.5;
    double init_queue_max = 4.0;
};

struct GridQState {
    int rows = 0;
    int cols = 0;
    Eigen::MatrixXd queues;   // 4 x N, rows ordered as Dir
    std::vector<int> phase;   // 0 serves north/south, 1 serves east/west
    Eigen::MatrixXd arrival;  // 4 x N
    double serve = 1.0;
    double exit_fraction = 0.5;
    int t = 0;

    int n_agents() const { return rows * cols; }
    /// Neighbour of intersection i one step in direction d on the torus.
    int neighbor(int i, Dir d) const;
};

struct GridQStep {
    GridQState state;
    Obs obs;
    Eigen::VectorXd rewards;
    double global_reward = 0.0;
};

GridQState gridq_reset(const GridQParams& params, std::uint64_t seed);
/// obs_i = own 4 queues, total queue at each of the 4 neighbours, own phase.
Obs gridq_obs(const GridQState& s);
constexpr int gridq_obs_dim() { return 9; }
Eigen::VectorXd gridq_global_state(const GridQState& s);
GridQStep gridq_step(const GridQState& s, const std::vector<int>& phases, double dynamics_scale = 1.0);

// ---------------------------------------------------------------- common interface

/// Per-agent actions; exactly one of the two members is used depending on the env.
struct JointAct {
    std::vector<int> discrete;
    std::vector<Eigen::VectorXd> continuous;
};

struct StepResult {
    Obs obs;
    Eigen::VectorXd rewards;
    double global_reward = 0.0;
    /// Episode reached its time limit. There are no terminal states, so this is a truncation.
    bool truncated = false;
};

class MultiAgentEnv {
public:
    virtual ~MultiAgentEnv() = default;

    virtual std::string name() const = 0;
    virtual int n_agents() const = 0;
    virtual bool discrete() const = 0;
    /// Discrete: number of actions per agent. Continuous: 0.
    virtual int n_actions() const = 0;
    /// Continuous: action vector length. Discrete: 0.
    virtual int action_dim() const = 0;
    virtual int obs_dim() const = 0;
    virtual int state_dim() const = 0;
    /// Physical state of one agent as seen by its neighbours (mean-field input).
    virtual int agent_state_dim() const = 0;
    virtual int horizon() const = 0;

    virtual Obs reset(std::uint64_t seed) = 0;
    virtual StepResult step(const JointAct& a, double dynamics_scale) = 0;
    virtual Obs observe() const = 0;
    virtual Eigen::VectorXd global_state() const = 0;
    virtual std::vector<Eigen::VectorXd> agent_states() const = 0;
    virtual std::unique_ptr<MultiAgentEnv> clone() const = 0;
};

class CoopNavEnv : public MultiAgentEnv {
public:
    CoopNavEnv(int n_agents, int horizon = 50, CoopNavParams params = {});

    std::string name() const override { return "coopnav"; }
    int n_agents() const override { return n_; }
    bool discrete() const override { return false; }
    int n_actions() const override { return 0; }
    int action_dim() const override { return 2; }
    int obs_dim() const override { return coopnav_obs_dim(n_); }
    int state_dim() const override { return 6 * n_; }
    int agent_state_dim() const override { return 4; }
    int horizon() const override { return horizon_; }

    Obs reset(std::uint64_t seed) override;
    StepResult step(const JointAct& a, double dynamics_scale) override;
    Obs observe() const override { return coopnav_obs(state_); }
    Eigen::VectorXd global_state() const override { return coopnav_global_state(state_); }
    std::vector<Eigen::VectorXd> agent_states() const override;
    std::unique_ptr<MultiAgentEnv> clone() const override { return std::make_unique<CoopNavEnv>(*this); }

    const CoopNavState& state() const { return state_; }
    long clamped_total() const { return clamped_total_; }

private:
    int n_;
    int horizon_;
    CoopNavParams params_;
    CoopNavState state_;
    long clamped_total_ = 0;
};

class GridQEnv : public MultiAgentEnv {
public:
    explicit GridQEnv(GridQParams params = {}, int horizon = 100);

    std::string name() const override { return "gridq"; }
    int n_agents() const override { return params_.rows * params_.cols; }
    bool discrete() const override { return true; }
    int n_actions() const override { return 2; }
    int action_dim() const override { return 0; }
    int obs_dim() const override { return gridq_obs_dim(); }
    int state_dim() const override { return 5 * n_agents(); }
    int agent_state_dim() const override { return 5; }
    int horizon() const override { return horizon_; }

    Obs reset(std::uint64_t seed) override;
    StepResult step(const JointAct& a, double dynamics_scale) override;
    Obs observe() const override { return gridq_obs(state_); }
    Eigen::VectorXd global_state() const override { return gridq_global_state(state_); }
    std::vector<Eigen::VectorXd> agent_states() const override;
    std::unique_ptr<MultiAgentEnv> clone() const override { return std::make_unique<GridQEnv>(*this); }

    const GridQState& state() const { return state_; }

private:
    GridQParams params_;
    int horizon_;
    GridQState state_;
};

// ---------------------------------------------------------------- perturbations

/// obs + sigma * N(0, I) per agent, from the seeded stream. sigma == 0 returns obs unchanged.
Obs perturb_obs(const Obs& obs, const PerturbSpec& spec, std::uint64_t seed);

/// With probability `rate`, one uniformly chosen agent's action is replaced: uniformly at
/// random, or (adversarial) by the single-agent change minimising q_global.
std::vector<int> malicious_injector(const std::vector<int>& joint, const std::vector<int>& n_actions,
                                    const action::QFunction& q_global, const PerturbSpec& spec,
                                    std::uint64_t seed);
/// Continuous form: random mode draws the victim's action uniformly from the box [-1, 1];
/// adversarial mode is a domain error.
std::vector<Eigen::VectorXd> malicious_injector(const std::vector<Eigen::VectorXd>& joint, const PerturbSpec& spec,
                                                std::uint64_t seed);

// ---------------------------------------------------------------- rollout

using PolicyFn = std::function<JointAct(const Obs& obs)>;
/// Global Q of the evaluated agents at a state, used by the adversarial injector.
using GlobalQFn = std::function<double(const Eigen::VectorXd& state, const std::vector<int>& joint)>;

struct RolloutResult {
    Eigen::VectorXd returns;  // undiscounted per-agent sums
    double global_return = 0.0;
    int steps = 0;
};

/// Resets `env` with `seed` and runs T steps. Observation noise is applied before action
/// selection and malicious actions after it. With `dump` set, one JSON line per step
/// {t, obs, actions, rewards} is written.
RolloutResult rollout(MultiAgentEnv& env, const PolicyFn& policy, int T, const PerturbSpec& spec, std::uint64_t seed,
                      const GlobalQFn& q_global = {}, std::ostream* dump = nullptr);

} // namespace ernie::env
