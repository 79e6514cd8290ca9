#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

namespace ernie::mdp {

/// Norm used to measure distances between embedded states and perturbation sizes.
enum class StateNorm { l2, linf };

double state_distance(const Eigen::VectorXd& a, const Eigen::VectorXd& b, StateNorm norm = StateNorm::l2);

/// Finite MDP whose states carry coordinates in R^d (d <= 3).
///
/// `trans[a]` is an n_states x n_states matrix whose row s is P(. | s, a).
/// `l_r` and `l_p` are the smoothness constants the instance is claimed to satisfy;
/// `audit` measures them.
struct TabularMdp {
    int n_states = 0;
    int n_actions = 0;
    double gamma = 0.9;
    double l_r = 0.0;
    double l_p = 0.0;
    Eigen::MatrixXd embed;               // n_states x d
    Eigen::MatrixXd reward;              // n_states x n_actions
    std::vector<Eigen::MatrixXd> trans;  // n_actions of (n_states x n_states)

    Eigen::VectorXd state(int s) const { return embed.row(s).transpose(); }
    int dim() const { return static_cast<int>(embed.cols()); }

    /// Throws ShapeError / DomainError if structural invariants fail
    /// (dimensions, stochastic rows within 1e-12, |r| <= 1, gamma in (0,1)).
    void validate() const;
};

/// Largest observed slopes of an MDP's reward and transition kernel.
struct SmoothnessAudit {
    double reward_slope = 0.0;      // max |r(s,a)-r(s',a)| / ||s-s'||
    double transition_slope = 0.0;  // max ||P(.|s,a)-P(.|s',a)||_1 / ||s-s'||
    bool smooth = true;             // both slopes within the declared constants
};

SmoothnessAudit audit_smoothness(const TabularMdp& mdp, StateNorm norm = StateNorm::l2);

struct TabularPolicy {
    Eigen::MatrixXd probs;  // n_states x n_actions
    double l_pi = 0.0;
};

struct ValuePair {
    Eigen::VectorXd v;
    Eigen::MatrixXd q;
};

struct LipschitzBounds {
    double l_q = 0.0;
    double l_v = 0.0;
};

struct GenOptions {
    int dim = 2;
    /// Fraction of the declared constants actually used by the generator; the audit
    /// shrinks it further if rounding ever pushes a slope over the declared value.
    double margin = 0.999;
};

/// Random instance satisfying the (l_r, l_p) smoothness definition exactly.
TabularMdp gen_smooth_mdp(int n_states, int n_actions, double l_r, double l_p, double gamma,
                          std::uint64_t seed, const GenOptions& opts = {});

/// Exact evaluation: dense LU solve for n_states <= 64, fixed-point iteration beyond.
ValuePair policy_eval(const TabularMdp& mdp, const TabularPolicy& policy, double tol = 1e-12);

/// Optimal Q. Value iteration to `tol`, then polished by exact policy iteration so the
/// result is the exact Q* whenever the greedy policy stabilises.
Eigen::MatrixXd value_iteration(const TabularMdp& mdp, double tol = 1e-12);

/// Bellman optimality residual ||q - T* q||_inf.
double bellman_optimality_residual(const TabularMdp& mdp, const Eigen::MatrixXd& q);

/// Deterministic greedy policy (lowest action index on ties).
TabularPolicy greedy_policy(const Eigen::MatrixXd& q);

TabularPolicy uniform_policy(int n_states, int n_actions);

/// pi(.|s) = softmax(eta * q(s,.)) with eta = ln(n_actions) / epsilon_target.
TabularPolicy softmax_policy(const Eigen::MatrixXd& q_table, double epsilon_target, int n_actions);

enum class OutputMetric { l1, abs };

/// max over state pairs with distinct embeddings of d_out(values_s, values_s') / ||s - s'||.
double empirical_lipschitz(const Eigen::MatrixXd& values, const Eigen::MatrixXd& embed,
                           OutputMetric metric, StateNorm norm = StateNorm::l2);

LipschitzBounds lipschitz_bounds(double l_r, double l_p, double l_pi, double gamma);

/// Tabular policy extended off-grid by inverse-distance blending of the two nearest states.
class InterpolatedPolicy {
public:
    InterpolatedPolicy(TabularPolicy policy, Eigen::MatrixXd embed, StateNorm norm = StateNorm::l2);

    Eigen::VectorXd at(const Eigen::VectorXd& x) const;
    const TabularPolicy& table() const { return policy_; }
    const Eigen::MatrixXd& embed() const { return embed_; }
    StateNorm norm() const { return norm_; }

private:
    TabularPolicy policy_;
    Eigen::MatrixXd embed_;
    StateNorm norm_;
};

/// Finite set of perturbations inside the epsilon-ball: a resolution^d lattice
/// (points outside the ball dropped) plus 2*resolution seeded points on the sphere.
std::vector<Eigen::VectorXd> perturbation_grid(int dim, double epsilon, int grid_resolution,
                                               StateNorm norm, std::uint64_t seed);

/// Smallest L with ||pi(s+delta) - pi(s)||_1 <= L ||delta|| over the given perturbations
/// at every tabular state, combined with the pairwise tabular constant.
double measured_interpolated_lipschitz(const InterpolatedPolicy& policy,
                                       const std::vector<Eigen::VectorXd>& deltas);

struct GapResult {
    double gap = 0.0;        // max_s |V^pi(s) - V^pi~(s)|
    double l_pi = 0.0;       // measured constant of the interpolated policy
    double bound = 0.0;      // 2 l_pi eps / (1-gamma)^2
    int horizon = 0;
    int n_deltas = 0;
};

/// Worst value deviation of a per-step, per-state perturbed policy, found by backward
/// induction over the perturbation grid (minimising and maximising adversaries). After
/// `horizon` steps the perturbation is switched off.
GapResult perturbed_value_gap(const TabularMdp& mdp, const InterpolatedPolicy& policy, double epsilon,
                              int horizon, int grid_resolution, std::uint64_t seed);

/// Smallest horizon T with gamma^T / (1-gamma) < tol.
int horizon_for(double gamma, double tol = 1e-6);

nlohmann::json to_json(const TabularMdp& mdp);
TabularMdp mdp_from_json(const nlohmann::json& j);

} // namespace ernie::mdp
