#pragma once

#include <cstdint>
#include <vector>

#include <Eigen/Dense>

#include "ernie/action_reg.hpp"
#include "ernie/adv_reg.hpp"
#include "ernie/envs.hpp"
#include "ernie/meanfield.hpp"
#include "ernie/net.hpp"

namespace ernie::marl {

struct Transition {
    env::Obs obs;
    env::Obs next_obs;
    Eigen::VectorXd state;
    Eigen::VectorXd next_state;
    /// Per-agent physical states, only needed by the mean-field learner.
    std::vector<Eigen::VectorXd> agent_states;
    std::vector<Eigen::VectorXd> next_agent_states;
    std::vector<int> discrete_actions;
    std::vector<Eigen::VectorXd> actions;
    Eigen::VectorXd rewards;
    double global_reward = 0.0;
    bool done = false;

    int n_agents() const { return static_cast<int>(obs.size()); }
    /// Throws ShapeError when the per-agent fields disagree on the agent count.
    void check() const;
};

/// Fixed-capacity ring of transitions.
class ReplayBuffer {
public:
    explicit ReplayBuffer(std::size_t capacity);

    /// Overwrites the oldest slot once full.
    void push(Transition t);
    /// Uniform with replacement over the filled slots.
    std::vector<Transition> sample(int batch, std::uint64_t seed) const;

    std::size_t size() const { return items_.size(); }
    std::size_t capacity() const { return capacity_; }
    /// Slot i in storage order.
    const Transition& slot(std::size_t i) const { return items_.at(i); }

private:
    std::size_t capacity_;
    std::size_t cursor_ = 0;
    int n_agents_ = -1;
    std::vector<Transition> items_;
};

/// Column-stacked view of a sampled batch.
struct Batch {
    int n_agents = 0;
    int size = 0;
    std::vector<Eigen::MatrixXd> obs;       // per agent, obs_dim x B
    std::vector<Eigen::MatrixXd> next_obs;
    Eigen::MatrixXd state;                  // state_dim x B
    Eigen::MatrixXd next_state;
    std::vector<Eigen::MatrixXd> agent_states;  // per agent, agent_state_dim x B (may be empty)
    std::vector<Eigen::MatrixXd> next_agent_states;
    std::vector<std::vector<int>> discrete;  // per agent, B entries
    std::vector<Eigen::MatrixXd> actions;    // per agent, action_dim x B
    Eigen::MatrixXd rewards;                 // N x B
    Eigen::VectorXd global_reward;           // B
    Eigen::VectorXd not_done;                // B

    bool is_discrete() const { return !discrete.empty(); }
};

Batch make_batch(const std::vector<Transition>& ts);

enum class Optimizer { sgd, adam };
Optimizer optimizer_from_string(const std::string& s);
std::string to_string(Optimizer o);

struct LearnerParams {
    double gamma = 0.95;
    double tau = 0.01;
    double lr = 1e-3;
    double lambda_q = 1.0;
    Optimizer optimizer = Optimizer::sgd;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
};

/// Adam moment estimates of one net; empty until the first step.
struct AdamState {
    Eigen::VectorXd m;
    Eigen::VectorXd v;
    long t = 0;
};

enum class RegAttack { pgd, gaussian };

/// Observation-space regularizer on the individual nets.
struct ErnieHook {
    bool enabled = false;
    bool stackelberg = false;
    adv::AttackConfig attack;
    double lambda = 0.1;
    RegAttack kind = RegAttack::pgd;
    /// Gaussian baseline scale.
    double sigma = 0.0;
    /// QCOMBO only: also regularize the global Q on its state coordinates.
    bool regularize_global = false;
};

/// Joint-action regularizer on the global / central Q.
struct ErnieAHook {
    bool enabled = false;
    int k = 1;
    action::Mode mode = action::Mode::greedy;
    double lambda = 0.1;
    action::GreedyOptions greedy;
};

/// Wasserstein regularizer on the mean-field critics.
struct MeanFieldHook {
    bool enabled = false;
    mf::MfAttackConfig attack;
    double lambda = 0.1;
    /// Also attack the average neighbour action with the observation-space PGD.
    bool attack_avg_action = false;
    adv::AttackConfig avg_action_attack;
};

/// Regularizer contribution of one net: mean gradient, value and attack size.
struct RegContribution {
    Eigen::VectorXd grad;
    double value = 0.0;
    double attack_norm = 0.0;
};

RegContribution ernie_contribution(const adv::PolicyNet& policy, const Eigen::MatrixXd& obs, const ErnieHook& hook,
                                   std::uint64_t seed);

// ---------------------------------------------------------------- QCOMBO

struct QcomboNets {
    std::vector<nn::Net> q;
    std::vector<nn::Net> q_target;
    nn::Net global;
    nn::Net global_target;
    int n_actions = 0;
    int state_dim = 0;
    std::vector<AdamState> q_opt;
    AdamState global_opt;
};

QcomboNets qcombo_init(int n_agents, int obs_dim, int state_dim, int n_actions, const std::vector<int>& hidden,
                       nn::Activation act, std::uint64_t seed);
/// [state; one-hot per agent].
Eigen::VectorXd global_q_input(const Eigen::VectorXd& state, const std::vector<int>& joint, int n_actions);
double global_q(const QcomboNets& nets, const Eigen::VectorXd& state, const std::vector<int>& joint);

struct QcomboLosses {
    double ind = 0.0;
    double glob = 0.0;
    double reg = 0.0;
    double total = 0.0;
};

QcomboLosses qcombo_losses(const Batch& batch, const QcomboNets& nets, double gamma, double lambda_q);

struct QcomboUpdate {
    QcomboLosses losses;
    std::vector<Eigen::VectorXd> grad_q;
    Eigen::VectorXd grad_global;
    double reg_value = 0.0;
    double attack_norm = 0.0;
    double action_reg_value = 0.0;
};

QcomboUpdate qcombo_grads(const Batch& batch, const QcomboNets& nets, const LearnerParams& p, const ErnieHook& ernie,
                          const ErnieAHook& ernie_a, std::uint64_t seed);
/// SGD step on every online net followed by the soft target update.
void qcombo_apply(QcomboNets& nets, const QcomboUpdate& u, const LearnerParams& p);

// ---------------------------------------------------------------- DDPG

struct DdpgNets {
    std::vector<nn::Net> actor;
    std::vector<nn::Net> actor_target;
    nn::Net critic;
    nn::Net critic_target;
    int action_dim = 0;
    int state_dim = 0;
    std::vector<AdamState> actor_opt;
    AdamState critic_opt;
};

DdpgNets ddpg_init(int n_agents, int obs_dim, int state_dim, int action_dim, const std::vector<int>& hidden,
                   nn::Activation act, std::uint64_t seed);
/// tanh-bounded actor output.
Eigen::VectorXd actor_action(const nn::Net& actor, const Eigen::VectorXd& obs);

struct DdpgUpdate {
    double critic_loss = 0.0;
    double actor_loss = 0.0;
    std::vector<Eigen::VectorXd> grad_actor;
    Eigen::VectorXd grad_critic;
    double reg_value = 0.0;
    double attack_norm = 0.0;
};

DdpgUpdate ddpg_grads(const Batch& batch, const DdpgNets& nets, const LearnerParams& p, const ErnieHook& ernie,
                      std::uint64_t seed);
void ddpg_apply(DdpgNets& nets, const DdpgUpdate& u, const LearnerParams& p);

// ---------------------------------------------------------------- mean-field DDPG

/// Per-agent critics Q^j(o_j, d_s, a_j, abar_j) where d_s is the cloud of the other agents' states.
struct MfDdpgNets {
    std::vector<nn::Net> actor;
    std::vector<nn::Net> actor_target;
    std::vector<nn::Net> critic;
    std::vector<nn::Net> critic_target;
    int action_dim = 0;
    int obs_dim = 0;
    int agent_state_dim = 0;
    std::vector<AdamState> actor_opt;
    std::vector<AdamState> critic_opt;
};

MfDdpgNets mf_ddpg_init(int n_agents, int obs_dim, int agent_state_dim, int action_dim, const std::vector<int>& hidden,
                        nn::Activation act, std::uint64_t seed);

/// Mean-field input of agent j for batch column b; `actions` holds one action_dim x B block per agent.
mf::MeanFieldInput mf_agent_input(const Eigen::MatrixXd& obs_j, const std::vector<Eigen::MatrixXd>& agent_states,
                                  const std::vector<Eigen::MatrixXd>& actions, int j, int b);

/// Probe actions for the mean-field regularizer: the agent's own action and the signed axis units.
std::vector<Eigen::VectorXd> mf_probe_actions(const Eigen::VectorXd& own_action);

struct MfDdpgUpdate {
    double critic_loss = 0.0;
    double actor_loss = 0.0;
    std::vector<Eigen::VectorXd> grad_actor;
    std::vector<Eigen::VectorXd> grad_critic;
    double reg_value = 0.0;
    double attack_norm = 0.0;
    double mf_reg_value = 0.0;
};

MfDdpgUpdate mf_ddpg_grads(const Batch& batch, const MfDdpgNets& nets, const LearnerParams& p, const ErnieHook& ernie,
                           const MeanFieldHook& mfh, std::uint64_t seed);
void mf_ddpg_apply(MfDdpgNets& nets, const MfDdpgUpdate& u, const LearnerParams& p);

// ---------------------------------------------------------------- shared pieces

/// target <- (1 - tau) target + tau online.
void soft_update(nn::Net& target, const nn::Net& online, double tau);
void sgd_step(nn::Net& net, const Eigen::VectorXd& grad, double lr);
/// Bias-corrected Adam step with step size p.lr.
void adam_step(nn::Net& net, AdamState& state, const Eigen::VectorXd& grad, const LearnerParams& p);
/// Dispatches on p.optimizer; `state` is only touched by Adam.
void optimizer_step(nn::Net& net, AdamState& state, const Eigen::VectorXd& grad, const LearnerParams& p);

/// epsilon-greedy over the individual Q outputs; ties go to the lowest action.
int select_discrete(const nn::Net& q, const Eigen::VectorXd& obs, double rate, std::uint64_t seed);
/// actor output plus noise * N(0, I), clamped to [-1, 1].
Eigen::VectorXd select_continuous(const nn::Net& actor, const Eigen::VectorXd& obs, double noise, std::uint64_t seed);

/// Linear decay from 1 to `final_rate` over the first `fraction` of the run, constant afterwards.
double exploration_rate(long step, long total_steps, double final_rate = 0.05, double fraction = 0.3);

} // namespace ernie::marl
