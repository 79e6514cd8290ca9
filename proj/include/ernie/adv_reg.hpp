#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "ernie/net.hpp"

namespace ernie::adv {

enum class Norm { l2, linf };
enum class Metric { kl, sq_l2 };
enum class Init { zero, random_ball };

/// Output transform applied after the network. Stochastic policies use softmax,
/// deterministic actors use tanh (bounded actions) or linear (Q-vectors).
enum class Head { linear, softmax, tanh };

std::string to_string(Norm n);
std::string to_string(Metric m);
std::string to_string(Init i);
std::string to_string(Head h);
Norm norm_from_string(const std::string& s);
Metric metric_from_string(const std::string& s);
Init init_from_string(const std::string& s);
Head head_from_string(const std::string& s);

struct PolicyNet {
    nn::Net net;
    Head head = Head::linear;

    Eigen::VectorXd operator()(const Eigen::VectorXd& x) const;
    Eigen::MatrixXd batch(const Eigen::MatrixXd& x) const;
};

/// Backprop through the head: gradient w.r.t. the pre-head output given the head output y.
Eigen::MatrixXd head_backward(Head head, const Eigen::MatrixXd& y, const Eigen::MatrixXd& upstream);

struct AttackConfig {
    double epsilon = 0.1;
    int k_steps = 3;
    /// Inner ascent step; <= 0 selects 2.5 * epsilon / k_steps.
    double eta = 0.0;
    Norm norm = Norm::l2;
    Metric metric = Metric::sq_l2;
    Init init = Init::random_ball;
    /// delta^0 is drawn from the ball of radius init_fraction * epsilon.
    double init_fraction = 0.1;
    /// Project onto the epsilon-ball after every ascent step (false: plain unconstrained ascent).
    bool project_each_step = true;
    /// Only the leading `perturb_dims` input coordinates are attacked (-1: all).
    int perturb_dims = -1;
    std::uint64_t seed = 0;

    double step_size() const { return eta > 0.0 ? eta : (k_steps > 0 ? 2.5 * epsilon / k_steps : 0.0); }
    void validate() const;
};

/// Attack output: perturbation, divergence value and parameter gradient.
struct RegTerm {
    Eigen::VectorXd delta;
    double value = 0.0;
    Eigen::VectorXd grad_theta;
};

/// Batched attack output; value and gradient are means over the columns.
struct BatchRegTerm {
    Eigen::MatrixXd delta;
    double value = 0.0;
    Eigen::VectorXd grad_theta;
    double mean_delta_norm = 0.0;
};

double divergence(const Eigen::VectorXd& out_a, const Eigen::VectorXd& out_b, Metric metric);

struct DivergenceGrad {
    double value = 0.0;
    Eigen::VectorXd d_a;
    Eigen::VectorXd d_b;
};
DivergenceGrad divergence_grad(const Eigen::VectorXd& out_a, const Eigen::VectorXd& out_b, Metric metric);

double delta_norm(const Eigen::VectorXd& delta, Norm norm);
Eigen::VectorXd project(const Eigen::VectorXd& z, double epsilon, Norm norm);

/// delta^0 for one observation, drawn from its own stream.
Eigen::VectorXd initial_delta(int dim, const AttackConfig& cfg, std::uint64_t stream);

/// K steps of delta <- Proj(delta + eta grad_delta D(pi(o + delta), pi(o))).
Eigen::VectorXd pgd_attack(const PolicyNet& policy, const Eigen::VectorXd& obs, const AttackConfig& cfg);
/// Column-wise attack; column j uses stream derive_seed(cfg.seed, {j}).
Eigen::MatrixXd pgd_attack_batch(const PolicyNet& policy, const Eigen::MatrixXd& obs, const AttackConfig& cfg);

/// D(pi(o + delta), pi(o)) at the supplied delta.
double regularizer(const PolicyNet& policy, const Eigen::VectorXd& obs, const Eigen::VectorXd& delta, Metric metric);

/// i.i.d. N(0, sigma^2) entries from the seeded stream.
Eigen::VectorXd gaussian_delta(int dim, double sigma, std::uint64_t seed);

/// Regularizer gradient treating the attack as a constant (leader term only).
RegTerm vanilla_reg_term(const PolicyNet& policy, const Eigen::VectorXd& obs, const AttackConfig& cfg);
BatchRegTerm vanilla_reg_term_batch(const PolicyNet& policy, const Eigen::MatrixXd& obs, const AttackConfig& cfg);

/// Total derivative of R(o, delta^K(theta); theta), back-propagated through the unrolled
/// ascent steps with finite-difference Hessian-vector products.
RegTerm stackelberg_reg_term(const PolicyNet& policy, const Eigen::VectorXd& obs, const AttackConfig& cfg,
                             double fd_step = 0.0);
BatchRegTerm stackelberg_reg_term_batch(const PolicyNet& policy, const Eigen::MatrixXd& obs, const AttackConfig& cfg,
                                        double fd_step = 0.0);
Eigen::VectorXd stackelberg_grad(const PolicyNet& policy, const Eigen::VectorXd& obs, const AttackConfig& cfg);

/// Regularizer evaluated at Gaussian perturbations sigma * N(0, I) (random-noise baseline).
BatchRegTerm gaussian_reg_term_batch(const PolicyNet& policy, const Eigen::MatrixXd& obs, double sigma, Metric metric,
                                     std::uint64_t seed, int perturb_dims = -1);

/// The scalar map theta -> R(o, delta^K(theta); theta) with delta^0 fixed by cfg.seed.
double attacked_regularizer(const PolicyNet& policy, const Eigen::VectorXd& obs, const AttackConfig& cfg);

/// base + lambda * mean(reg_grads); lambda == 0 returns base unchanged.
Eigen::VectorXd regularized_grad(const Eigen::VectorXd& base_grad, const std::vector<Eigen::VectorXd>& reg_grads,
                                 double lambda);
/// Per-agent form.
std::vector<Eigen::VectorXd> regularized_grad(const std::vector<Eigen::VectorXd>& base_grads,
                                              const std::vector<std::vector<Eigen::VectorXd>>& reg_grads,
                                              double lambda);

} // namespace ernie::adv
