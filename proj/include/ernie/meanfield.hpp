#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "ernie/net.hpp"

namespace ernie::mf {

/// Uniformly weighted particles; column j is particle j.
struct ParticleCloud {
    Eigen::MatrixXd points;

    int size() const { return static_cast<int>(points.cols()); }
    int dim() const { return static_cast<int>(points.rows()); }
    Eigen::VectorXd mean() const;
    /// Per-coordinate population standard deviation.
    Eigen::VectorXd stddev() const;
};

struct MeanFieldInput {
    Eigen::VectorXd own_state;
    ParticleCloud cloud;
    Eigen::VectorXd own_action;
    Eigen::VectorXd avg_action;
};

struct MeanEmbedding {
    ParticleCloud cloud;
    Eigen::VectorXd avg_action;
};

MeanEmbedding mean_embedding(const std::vector<Eigen::VectorXd>& neighbor_states,
                             const std::vector<Eigen::VectorXd>& neighbor_actions);

/// Network input: own_state | cloud mean | cloud std | own_action | avg_action.
Eigen::VectorXd flatten(const MeanFieldInput& in);
Eigen::VectorXd flatten(const MeanFieldInput& in, const ParticleCloud& cloud, const Eigen::VectorXd& own_action);
int flat_dim(int state_dim, int cloud_dim, int action_dim);

enum class WMode { identity_coupling, exact_matching, closed_form_1d };
WMode wmode_from_string(const std::string& s);

/// W1-type distances between uniform clouds. identity_coupling is the cost of pairing
/// particle i with particle i (an upper bound on W1); exact_matching is the optimal
/// perfect matching (n <= 16); closed_form_1d pairs sorted 1-D samples.
double w_distance(const ParticleCloud& a, const ParticleCloud& b, WMode mode);

/// Optimal assignment for a square cost matrix (Hungarian method); returns column per row.
std::vector<int> min_cost_assignment(const Eigen::MatrixXd& cost);

struct MfAttackConfig {
    double lambda_w = 1.0;
    int steps = 5;
    double eta = 0.05;
    /// Particles start at d_s plus a uniform jitter in the ball of this radius.
    double jitter = 0.01;
    std::uint64_t seed = 0;
};

/// Proximal ascent on sum_a ||Q(s,d',a) - Q(s,d,a)||^2 - lambda_w * W_identity(d', d)
/// over the particle coordinates of d'. `actions` enumerates the action set.
ParticleCloud mf_attack(const nn::Net& q_net, const MeanFieldInput& input, const std::vector<Eigen::VectorXd>& actions,
                        const MfAttackConfig& cfg);

/// sum_a ||Q(s,d',a) - Q(s,d,a)||^2.
double mf_regularizer(const nn::Net& q_net, const MeanFieldInput& input, const ParticleCloud& perturbed,
                      const std::vector<Eigen::VectorXd>& actions);

/// Parameter gradient of mf_regularizer with the perturbed cloud held fixed.
Eigen::VectorXd mf_regularizer_grad(const nn::Net& q_net, const MeanFieldInput& input, const ParticleCloud& perturbed,
                                    const std::vector<Eigen::VectorXd>& actions);

} // namespace ernie::mf
