#include <gtest/gtest.h>

#include <cmath>
#include <cstring>

#include "ernie/adv_reg.hpp"
#include "ernie/errors.hpp"
#include "ernie/rng.hpp"

using namespace ernie;
using namespace ernie::adv;

namespace {

double rel_err(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
    return (a - b).norm() / std::max({a.norm(), b.norm(), 1e-12});
}

PolicyNet linear_policy(const Eigen::MatrixXd& w) {
    nn::Net net({static_cast<int>(w.cols()), static_cast<int>(w.rows())}, nn::Activation::identity);
    net.layers()[0].weight = w;
    return {net, Head::linear};
}

PolicyNet random_policy(Rng& rng, std::uint64_t seed, Head head, int max_in = 4) {
    int in = 2 + rng.index(max_in - 1);
    int hidden = 3 + rng.index(6);
    int out = 2 + rng.index(3);
    nn::Net net = nn::net_init({in, hidden, out}, nn::Activation::tanh, seed, 2.0);
    for (auto& layer : net.layers()) layer.bias = rng.normal_vector(layer.bias.size()) * 0.2;
    return {net, head};
}

// Oracle: central differences of theta -> R(o, delta^K(theta); theta), rerunning the attack per probe.
Eigen::VectorXd fd_total_derivative(const PolicyNet& policy, const Eigen::VectorXd& obs, const AttackConfig& cfg) {
    Eigen::VectorXd theta = policy.net.params();
    Eigen::VectorXd g(theta.size());
    PolicyNet probe = policy;
    for (Eigen::Index i = 0; i < theta.size(); ++i) {
        double h = 1e-5 * (1.0 + std::abs(theta[i]));
        Eigen::VectorXd tp = theta, tm = theta;
        tp[i] += h;
        tm[i] -= h;
        probe.net.set_params(tp);
        double fp = attacked_regularizer(probe, obs, cfg);
        probe.net.set_params(tm);
        double fm = attacked_regularizer(probe, obs, cfg);
        g[i] = (fp - fm) / (2 * h);
    }
    return g;
}

} // namespace

TEST(Divergence, Examples) {
    Eigen::Vector2d p(0.3, 0.7);
    EXPECT_EQ(divergence(p, p, Metric::kl), 0.0);
    EXPECT_EQ(divergence(p, p, Metric::sq_l2), 0.0);
    EXPECT_NEAR(divergence(Eigen::Vector2d(1, 0), Eigen::Vector2d(0.5, 0.5), Metric::kl), std::log(2.0), 1e-15);
    EXPECT_NEAR(divergence(Eigen::Vector2d(1, 0), Eigen::Vector2d(0.5, 0.5), Metric::kl), 0.693147, 1e-6);
    EXPECT_EQ(divergence(Eigen::Vector2d(1, 0), Eigen::Vector2d(0, 1), Metric::sq_l2), 2.0);
    EXPECT_THROW(divergence(Eigen::Vector2d(1, 1), Eigen::Vector2d(0.5, 0.5), Metric::kl), DomainError);
    EXPECT_THROW(divergence(Eigen::Vector2d(1, 0), Eigen::Vector3d(1, 0, 0), Metric::sq_l2), ShapeError);
}

TEST(Divergence, KlNonNegativeOnRandomSimplexPairs) {
    Rng rng(1);
    for (int trial = 0; trial < 500; ++trial) {
        int n = 2 + rng.index(5);
        Eigen::VectorXd a(n), b(n);
        for (int i = 0; i < n; ++i) {
            a[i] = rng.uniform();
            b[i] = rng.uniform();
        }
        a /= a.sum();
        b /= b.sum();
        EXPECT_GE(divergence(a, b, Metric::kl), 0.0);
        EXPECT_EQ(divergence(a, a, Metric::kl), 0.0);
    }
}

TEST(PgdAttack, ConstantPolicyKeepsInitialDelta) {
    PolicyNet policy{nn::Net({3, 4, 2}, nn::Activation::relu), Head::linear};
    AttackConfig cfg;
    cfg.epsilon = 0.2;
    cfg.k_steps = 5;
    cfg.seed = 3;
    Eigen::VectorXd delta = pgd_attack(policy, Eigen::Vector3d(1, 2, 3), cfg);
    EXPECT_EQ(delta, initial_delta(3, cfg, derive_seed(cfg.seed, {0})));
    EXPECT_GT(delta.norm(), 0.0);
    EXPECT_LE(delta.norm(), 0.1 * cfg.epsilon);
    EXPECT_EQ(regularizer(policy, Eigen::Vector3d(1, 2, 3), delta, Metric::sq_l2), 0.0);
}

TEST(PgdAttack, LinearPolicyConvergesToTopSingularDirection) {
    Eigen::Matrix2d w = Eigen::Vector2d(2, 1).asDiagonal();
    PolicyNet policy = linear_policy(w);
    AttackConfig cfg;
    cfg.epsilon = 0.1;
    cfg.k_steps = 200;
    cfg.eta = 0.05;
    cfg.metric = Metric::sq_l2;
    Eigen::Vector2d obs(0.5, -0.3);
    Eigen::VectorXd delta = pgd_attack(policy, obs, cfg);
    EXPECT_NEAR(std::abs(delta[0]), 0.1, 1e-9);
    EXPECT_NEAR(delta[1], 0.0, 1e-9);
    // (sigma_1 * eps)^2
    EXPECT_NEAR(regularizer(policy, obs, delta, Metric::sq_l2), 0.04, 1e-9);
}

TEST(PgdAttack, ZeroBudgetReturnsZero) {
    Rng rng(2);
    PolicyNet policy = random_policy(rng, 5, Head::softmax);
    AttackConfig cfg;
    cfg.epsilon = 0.0;
    cfg.k_steps = 7;
    cfg.metric = Metric::kl;
    Eigen::VectorXd obs = rng.normal_vector(policy.net.input_dim());
    EXPECT_EQ(pgd_attack(policy, obs, cfg).cwiseAbs().maxCoeff(), 0.0);
}

TEST(PgdAttack, ProjectionInvariantBothNorms) {
    Rng rng(3);
    for (int trial = 0; trial < 200; ++trial) {
        PolicyNet policy = random_policy(rng, 50 + trial, trial % 2 ? Head::softmax : Head::tanh);
        AttackConfig cfg;
        cfg.epsilon = rng.uniform(0.01, 0.5);
        cfg.k_steps = 1 + rng.index(5);
        cfg.norm = trial % 3 == 0 ? Norm::linf : Norm::l2;
        cfg.metric = policy.head == Head::softmax ? Metric::kl : Metric::sq_l2;
        cfg.eta = rng.uniform(0.01, 2.0);
        cfg.seed = trial;
        Eigen::VectorXd obs = rng.normal_vector(policy.net.input_dim());
        Eigen::VectorXd delta = pgd_attack(policy, obs, cfg);
        EXPECT_LE(delta_norm(delta, cfg.norm), cfg.epsilon + 1e-12);
        EXPECT_GE(regularizer(policy, obs, delta, cfg.metric), 0.0);
    }
}

TEST(PgdAttack, ZeroInitIsANoOp) {
    Eigen::Matrix2d w = Eigen::Vector2d(2, 1).asDiagonal();
    AttackConfig cfg;
    cfg.init = Init::zero;
    cfg.k_steps = 10;
    EXPECT_EQ(pgd_attack(linear_policy(w), Eigen::Vector2d(1, 1), cfg), Eigen::Vector2d::Zero());
}

TEST(Regularizer, Examples) {
    Eigen::Matrix2d ident = Eigen::Matrix2d::Identity();
    PolicyNet lin = linear_policy(ident);
    Eigen::Vector2d obs(0.2, 0.4);
    EXPECT_EQ(regularizer(lin, obs, Eigen::Vector2d::Zero(), Metric::sq_l2), 0.0);
    Eigen::Vector2d delta(0.06, 0.08);  // norm 0.1
    EXPECT_NEAR(regularizer(lin, obs, delta, Metric::sq_l2), 0.01, 1e-15);
    PolicyNet constant{nn::Net({2, 3}, nn::Activation::relu), Head::softmax};
    EXPECT_EQ(regularizer(constant, obs, delta, Metric::kl), 0.0);
}

TEST(GaussianDelta, Examples) {
    EXPECT_EQ(gaussian_delta(5, 0.0, 1).cwiseAbs().maxCoeff(), 0.0);
    EXPECT_EQ(gaussian_delta(5, 1.0, 7), gaussian_delta(5, 1.0, 7));
    Eigen::VectorXd big = gaussian_delta(10000, 1.0, 42);
    double mean = big.mean();
    double var = (big.array() - mean).square().sum() / (big.size() - 1);
    EXPECT_LT(std::abs(mean), 0.05);
    EXPECT_GT(var, 0.9);
    EXPECT_LT(var, 1.1);
}

TEST(Stackelberg, ZeroStepsEqualsVanilla) {
    Rng rng(4);
    PolicyNet policy = random_policy(rng, 9, Head::softmax);
    AttackConfig cfg;
    cfg.k_steps = 0;
    cfg.metric = Metric::kl;
    cfg.seed = 5;
    Eigen::VectorXd obs = rng.normal_vector(policy.net.input_dim());
    RegTerm s = stackelberg_reg_term(policy, obs, cfg);
    RegTerm v = vanilla_reg_term(policy, obs, cfg);
    EXPECT_EQ(s.grad_theta, v.grad_theta);
    EXPECT_EQ(s.value, v.value);
}

TEST(Stackelberg, ConstantPolicyGivesZeroGradient) {
    PolicyNet policy{nn::Net({3, 4, 2}, nn::Activation::tanh), Head::tanh};
    AttackConfig cfg;
    cfg.k_steps = 3;
    EXPECT_EQ(stackelberg_grad(policy, Eigen::Vector3d(1, 0, -1), cfg).cwiseAbs().maxCoeff(), 0.0);
}

TEST(Stackelberg, MatchesFiniteDifferenceOfUnrolledAttack) {
    Rng rng(5);
    for (int trial = 0; trial < 30; ++trial) {
        Head head = trial % 3 == 0 ? Head::softmax : (trial % 3 == 1 ? Head::tanh : Head::linear);
        PolicyNet policy = random_policy(rng, 200 + trial, head);
        AttackConfig cfg;
        cfg.epsilon = 0.3;
        cfg.k_steps = 1 + trial % 3;
        cfg.metric = head == Head::softmax ? Metric::kl : Metric::sq_l2;
        cfg.norm = trial % 4 == 3 ? Norm::linf : Norm::l2;
        cfg.init_fraction = 0.5;
        cfg.seed = 1000 + trial;
        Eigen::VectorXd obs = rng.normal_vector(policy.net.input_dim());
        Eigen::VectorXd analytic = stackelberg_grad(policy, obs, cfg);
        Eigen::VectorXd oracle = fd_total_derivative(policy, obs, cfg);
        EXPECT_LT(rel_err(analytic, oracle), 1e-4) << "trial " << trial;
    }
}

TEST(Stackelberg, DiffersFromLeaderOnlyGradient) {
    Rng rng(6);
    PolicyNet policy = random_policy(rng, 77, Head::tanh);
    AttackConfig cfg;
    cfg.epsilon = 0.3;
    cfg.k_steps = 3;
    cfg.init_fraction = 0.5;
    Eigen::VectorXd obs = rng.normal_vector(policy.net.input_dim());
    EXPECT_GT(rel_err(stackelberg_grad(policy, obs, cfg), vanilla_reg_term(policy, obs, cfg).grad_theta), 1e-6);
}

TEST(Stackelberg, BatchIsMeanOfColumns) {
    Rng rng(7);
    PolicyNet policy = random_policy(rng, 11, Head::tanh);
    AttackConfig cfg;
    cfg.epsilon = 0.2;
    cfg.k_steps = 2;
    cfg.seed = 3;
    Eigen::MatrixXd obs(policy.net.input_dim(), 3);
    for (Eigen::Index i = 0; i < obs.size(); ++i) obs.data()[i] = rng.normal();
    BatchRegTerm batch = stackelberg_reg_term_batch(policy, obs, cfg);
    EXPECT_EQ(batch.delta.cols(), 3);
    // Directional FD check of the batched total derivative.
    Eigen::VectorXd theta = policy.net.params();
    Eigen::VectorXd dir = rng.normal_vector(theta.size());
    auto batch_value = [&](const Eigen::VectorXd& t) {
        PolicyNet probe = policy;
        probe.net.set_params(t);
        Eigen::MatrixXd delta = pgd_attack_batch(probe, obs, cfg);
        double total = 0.0;
        for (int c = 0; c < 3; ++c) total += regularizer(probe, obs.col(c), delta.col(c), cfg.metric);
        return total / 3.0;
    };
    double h = 1e-5;
    double fd = (batch_value(theta + h * dir) - batch_value(theta - h * dir)) / (2 * h);
    EXPECT_NEAR(batch.grad_theta.dot(dir), fd, 1e-4 * std::max(1e-8, std::abs(fd)));
}

TEST(AttackSoundness, PgdBeatsGaussianOfSameNorm) {
    Rng rng(8);
    int wins = 0;
    const int trials = 500;
    for (int trial = 0; trial < trials; ++trial) {
        PolicyNet policy = random_policy(rng, 3000 + trial, trial % 2 ? Head::softmax : Head::tanh);
        AttackConfig cfg;
        cfg.epsilon = 0.2;
        cfg.k_steps = 5;
        cfg.eta = 10.0;
        cfg.metric = policy.head == Head::softmax ? Metric::kl : Metric::sq_l2;
        cfg.seed = trial;
        Eigen::VectorXd obs = rng.normal_vector(policy.net.input_dim());
        Eigen::VectorXd pgd = pgd_attack(policy, obs, cfg);
        Eigen::VectorXd noise = gaussian_delta(static_cast<int>(obs.size()), 1.0, 9000 + trial);
        noise *= pgd.norm() / noise.norm();
        if (regularizer(policy, obs, pgd, cfg.metric) >= regularizer(policy, obs, noise, cfg.metric)) ++wins;
    }
    EXPECT_GE(wins, 400);
}

TEST(AttackSoundness, DefaultStepNeverLosesToItsStart) {
    Rng rng(9);
    for (int trial = 0; trial < 200; ++trial) {
        PolicyNet policy = random_policy(rng, 4000 + trial, trial % 2 ? Head::softmax : Head::tanh);
        AttackConfig cfg;
        cfg.epsilon = 0.1;
        cfg.metric = policy.head == Head::softmax ? Metric::kl : Metric::sq_l2;
        cfg.seed = trial;
        Eigen::VectorXd obs = rng.normal_vector(policy.net.input_dim());
        Eigen::VectorXd start = initial_delta(static_cast<int>(obs.size()), cfg, derive_seed(cfg.seed, {0}));
        Eigen::VectorXd pgd = pgd_attack(policy, obs, cfg);
        EXPECT_GE(regularizer(policy, obs, pgd, cfg.metric), regularizer(policy, obs, start, cfg.metric));
    }
}

TEST(RegularizedGrad, Examples) {
    Eigen::VectorXd base = Eigen::Vector3d(1.0, -0.0, 2.5);
    std::vector<Eigen::VectorXd> regs = {Eigen::Vector3d(0.3, 0.1, -1.0)};
    Eigen::VectorXd same = regularized_grad(base, regs, 0.0);
    EXPECT_EQ(std::memcmp(same.data(), base.data(), sizeof(double) * 3), 0);
    EXPECT_EQ(regularized_grad(base, {Eigen::Vector3d::Zero()}, 5.0), base);
    EXPECT_EQ(regularized_grad(base, regs, 2.0), Eigen::VectorXd(base + 2.0 * regs[0]));
    std::vector<Eigen::VectorXd> two = {Eigen::Vector3d(1, 1, 1), Eigen::Vector3d(3, 3, 3)};
    EXPECT_EQ(regularized_grad(base, two, 1.0), Eigen::VectorXd(base + Eigen::Vector3d(2, 2, 2)));
    EXPECT_THROW(regularized_grad(base, {Eigen::Vector2d(1, 1)}, 1.0), ShapeError);
}

TEST(AttackConfig, Validation) {
    AttackConfig cfg;
    cfg.epsilon = -1.0;
    EXPECT_THROW(cfg.validate(), ParameterError);
    cfg.epsilon = 0.1;
    cfg.k_steps = -1;
    EXPECT_THROW(cfg.validate(), ParameterError);
    cfg.k_steps = 4;
    EXPECT_DOUBLE_EQ(cfg.step_size(), 2.5 * 0.1 / 4);
}
