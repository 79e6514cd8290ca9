#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>

#include "ernie/errors.hpp"
#include "ernie/meanfield.hpp"
#include "ernie/rng.hpp"

using namespace ernie;
using namespace ernie::mf;

namespace {

ParticleCloud cloud_of(std::initializer_list<std::initializer_list<double>> pts) {
    std::vector<std::vector<double>> v;
    for (auto p : pts) v.emplace_back(p);
    ParticleCloud c;
    c.points.resize(static_cast<Eigen::Index>(v.front().size()), static_cast<Eigen::Index>(v.size()));
    for (std::size_t j = 0; j < v.size(); ++j)
        for (std::size_t i = 0; i < v[j].size(); ++i) c.points(i, j) = v[j][i];
    return c;
}

ParticleCloud random_cloud(Rng& rng, int d, int n) {
    ParticleCloud c;
    c.points.resize(d, n);
    for (Eigen::Index i = 0; i < c.points.size(); ++i) c.points.data()[i] = rng.normal();
    return c;
}

// Oracle: minimum over all permutations via std::next_permutation.
double brute_matching(const ParticleCloud& a, const ParticleCloud& b) {
    std::vector<int> perm(a.size());
    std::iota(perm.begin(), perm.end(), 0);
    double best = 1e300;
    do {
        double cost = 0.0;
        for (int i = 0; i < a.size(); ++i) cost += (a.points.col(i) - b.points.col(perm[i])).norm();
        best = std::min(best, cost / a.size());
    } while (std::next_permutation(perm.begin(), perm.end()));
    return best;
}

MeanFieldInput make_input(Rng& rng, int sd, int d, int n, int ad) {
    MeanFieldInput in;
    in.own_state = rng.normal_vector(sd);
    in.cloud = random_cloud(rng, d, n);
    in.own_action = rng.normal_vector(ad);
    in.avg_action = rng.normal_vector(ad);
    return in;
}

std::vector<Eigen::VectorXd> unit_actions(int ad) {
    std::vector<Eigen::VectorXd> out;
    for (int i = 0; i < ad; ++i) out.push_back(Eigen::VectorXd::Unit(ad, i));
    return out;
}

} // namespace

TEST(MeanEmbedding, Examples) {
    auto emb = mean_embedding({Eigen::Vector2d(0, 0), Eigen::Vector2d(2, 0)},
                              {Eigen::Vector2d(1, 0), Eigen::Vector2d(0, 1)});
    EXPECT_EQ(emb.cloud.mean(), Eigen::Vector2d(1, 0));
    EXPECT_EQ(emb.cloud.stddev(), Eigen::Vector2d(1, 0));
    EXPECT_EQ(emb.avg_action, Eigen::Vector2d(0.5, 0.5));
    EXPECT_THROW(mean_embedding({}, {}), DomainError);
    EXPECT_THROW(mean_embedding({Eigen::Vector2d(0, 0), Eigen::Vector3d(0, 0, 0)},
                                {Eigen::Vector2d(0, 0), Eigen::Vector2d(0, 0)}),
                 ShapeError);
}

TEST(MeanEmbedding, PermutationInvariantFlatten) {
    Rng rng(1);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<Eigen::VectorXd> s, a;
        for (int i = 0; i < 5; ++i) {
            s.push_back(rng.normal_vector(3));
            a.push_back(rng.normal_vector(2));
        }
        auto e1 = mean_embedding(s, a);
        std::vector<int> perm = {3, 0, 4, 1, 2};
        std::vector<Eigen::VectorXd> sp, ap;
        for (int p : perm) {
            sp.push_back(s[p]);
            ap.push_back(a[p]);
        }
        auto e2 = mean_embedding(sp, ap);
        MeanFieldInput in1{Eigen::Vector2d(1, 2), e1.cloud, Eigen::Vector2d(0, 1), e1.avg_action};
        MeanFieldInput in2{Eigen::Vector2d(1, 2), e2.cloud, Eigen::Vector2d(0, 1), e2.avg_action};
        EXPECT_LT((flatten(in1) - flatten(in2)).cwiseAbs().maxCoeff(), 1e-12);
        EXPECT_EQ(flatten(in1).size(), flat_dim(2, 3, 2));
    }
}

TEST(WDistance, Examples) {
    ParticleCloud a = cloud_of({{0.0}, {1.0}});
    ParticleCloud b = cloud_of({{1.0}, {0.0}});
    EXPECT_EQ(w_distance(a, b, WMode::closed_form_1d), 0.0);
    EXPECT_EQ(w_distance(a, b, WMode::identity_coupling), 1.0);
    EXPECT_EQ(w_distance(a, b, WMode::exact_matching), 0.0);
    EXPECT_EQ(w_distance(a, a, WMode::identity_coupling), 0.0);
    ParticleCloud two_d = cloud_of({{0.0, 0.0}, {1.0, 1.0}});
    EXPECT_THROW(w_distance(two_d, two_d, WMode::closed_form_1d), ParameterError);
    EXPECT_THROW(w_distance(a, cloud_of({{0.0}}), WMode::identity_coupling), ParameterError);
}

TEST(WDistance, MatchingAgainstPermutationOracle) {
    Rng rng(2);
    for (int trial = 0; trial < 200; ++trial) {
        int n = 1 + rng.index(7);
        int d = 1 + rng.index(3);
        ParticleCloud a = random_cloud(rng, d, n), b = random_cloud(rng, d, n);
        double exact = w_distance(a, b, WMode::exact_matching);
        EXPECT_NEAR(exact, brute_matching(a, b), 1e-12);
        EXPECT_LE(exact, w_distance(a, b, WMode::identity_coupling) + 1e-12);
        EXPECT_NEAR(exact, w_distance(b, a, WMode::exact_matching), 1e-12);
        if (d == 1) EXPECT_NEAR(exact, w_distance(a, b, WMode::closed_form_1d), 1e-12);
    }
}

TEST(WDistance, HungarianMatchesEnumerationAboveEight) {
    Rng rng(3);
    for (int trial = 0; trial < 5; ++trial) {
        int n = 9;
        Eigen::MatrixXd cost(n, n);
        for (Eigen::Index i = 0; i < cost.size(); ++i) cost.data()[i] = rng.uniform();
        std::vector<int> assign = min_cost_assignment(cost);
        double got = 0.0;
        for (int i = 0; i < n; ++i) got += cost(i, assign[i]);
        std::vector<int> perm(n);
        std::iota(perm.begin(), perm.end(), 0);
        double best = 1e300;
        do {
            double c = 0.0;
            for (int i = 0; i < n; ++i) c += cost(i, perm[i]);
            best = std::min(best, c);
        } while (std::next_permutation(perm.begin(), perm.end()));
        EXPECT_NEAR(got, best, 1e-12);
        std::vector<int> sorted = assign;
        std::sort(sorted.begin(), sorted.end());
        for (int i = 0; i < n; ++i) EXPECT_EQ(sorted[i], i);
    }
}

TEST(WDistance, TriangleInequality1d) {
    Rng rng(4);
    for (int trial = 0; trial < 200; ++trial) {
        int n = 1 + rng.index(10);
        ParticleCloud a = random_cloud(rng, 1, n), b = random_cloud(rng, 1, n), c = random_cloud(rng, 1, n);
        EXPECT_LE(w_distance(a, c, WMode::closed_form_1d),
                  w_distance(a, b, WMode::closed_form_1d) + w_distance(b, c, WMode::closed_form_1d) + 1e-12);
    }
}

TEST(MfAttack, HugePenaltyStaysAtOriginalCloud) {
    Rng rng(5);
    for (int trial = 0; trial < 20; ++trial) {
        MeanFieldInput in = make_input(rng, 2, 2, 4, 2);
        nn::Net q = nn::net_init({flat_dim(2, 2, 2), 8, 1}, nn::Activation::tanh, 100 + trial, 2.0);
        MfAttackConfig cfg;
        cfg.lambda_w = 1e6;
        cfg.steps = 10;
        cfg.seed = trial;
        ParticleCloud out = mf_attack(q, in, unit_actions(2), cfg);
        EXPECT_LE(w_distance(out, in.cloud, WMode::identity_coupling), 1e-3);
    }
}

TEST(MfAttack, ConstantQOnlyShrinksJitter) {
    Rng rng(6);
    MeanFieldInput in = make_input(rng, 2, 2, 3, 2);
    nn::Net q({flat_dim(2, 2, 2), 4, 1}, nn::Activation::relu);
    MfAttackConfig cfg;
    cfg.jitter = 0.05;
    cfg.seed = 9;
    ParticleCloud out = mf_attack(q, in, unit_actions(2), cfg);
    EXPECT_LE(w_distance(out, in.cloud, WMode::identity_coupling), cfg.jitter);
    EXPECT_EQ(mf_regularizer(q, in, out, unit_actions(2)), 0.0);
}

TEST(MfAttack, DeterministicAndIncreasesRegularizer) {
    Rng rng(7);
    int increased = 0;
    for (int trial = 0; trial < 30; ++trial) {
        MeanFieldInput in = make_input(rng, 2, 2, 5, 2);
        nn::Net q = nn::net_init({flat_dim(2, 2, 2), 8, 1}, nn::Activation::tanh, 300 + trial, 2.0);
        MfAttackConfig cfg;
        cfg.lambda_w = 0.0;
        cfg.steps = 10;
        cfg.eta = 0.2;
        cfg.seed = trial;
        ParticleCloud a = mf_attack(q, in, unit_actions(2), cfg);
        ParticleCloud b = mf_attack(q, in, unit_actions(2), cfg);
        EXPECT_EQ(a.points, b.points);
        MfAttackConfig one = cfg;
        one.steps = 1;
        ParticleCloud first = mf_attack(q, in, unit_actions(2), one);
        if (mf_regularizer(q, in, a, unit_actions(2)) >= mf_regularizer(q, in, first, unit_actions(2))) ++increased;
    }
    EXPECT_GE(increased, 25);
}

TEST(MfRegularizer, LinearClosedForm) {
    Rng rng(8);
    for (int trial = 0; trial < 50; ++trial) {
        MeanFieldInput in = make_input(rng, 2, 3, 4, 2);
        int dim = flat_dim(2, 3, 2);
        nn::Net q({dim, 1}, nn::Activation::identity);
        Eigen::VectorXd w = rng.normal_vector(dim);
        q.layers()[0].weight = w.transpose();
        q.layers()[0].bias << rng.normal();
        ParticleCloud pert = in.cloud;
        pert.points += 0.1 * random_cloud(rng, 3, 4).points;
        // Q difference is independent of the action for an affine Q.
        Eigen::VectorXd v = Eigen::VectorXd::Zero(dim);
        v.segment(2, 3) = pert.mean() - in.cloud.mean();
        v.segment(5, 3) = pert.stddev() - in.cloud.stddev();
        double expected = 3.0 * std::pow(w.dot(v), 2);
        std::vector<Eigen::VectorXd> actions = {Eigen::Vector2d(1, 0), Eigen::Vector2d(0, 1), Eigen::Vector2d(-1, 0)};
        EXPECT_NEAR(mf_regularizer(q, in, pert, actions), expected, 1e-12 * (1 + expected));
    }
}

TEST(MfRegularizer, GradientMatchesFiniteDifference) {
    Rng rng(9);
    for (int trial = 0; trial < 20; ++trial) {
        MeanFieldInput in = make_input(rng, 2, 2, 4, 2);
        nn::Net q = nn::net_init({flat_dim(2, 2, 2), 6, 2}, nn::Activation::tanh, 500 + trial, 2.0);
        ParticleCloud pert = in.cloud;
        pert.points += 0.3 * random_cloud(rng, 2, 4).points;
        auto acts = unit_actions(2);
        Eigen::VectorXd g = mf_regularizer_grad(q, in, pert, acts);
        Eigen::VectorXd theta = q.params();
        Eigen::VectorXd fd(theta.size());
        for (Eigen::Index i = 0; i < theta.size(); ++i) {
            double h = 1e-6 * (1 + std::abs(theta[i]));
            nn::Net p = q, m = q;
            Eigen::VectorXd tp = theta, tm = theta;
            tp[i] += h;
            tm[i] -= h;
            p.set_params(tp);
            m.set_params(tm);
            fd[i] = (mf_regularizer(p, in, pert, acts) - mf_regularizer(m, in, pert, acts)) / (2 * h);
        }
        EXPECT_LT((g - fd).norm(), 1e-6 * std::max(1.0, fd.norm()));
    }
}

TEST(MfRegularizer, ShapeChecks) {
    Rng rng(10);
    MeanFieldInput in = make_input(rng, 2, 2, 3, 2);
    nn::Net q({5, 1}, nn::Activation::identity);
    EXPECT_THROW(mf_regularizer(q, in, in.cloud, unit_actions(2)), ShapeError);
    nn::Net ok({flat_dim(2, 2, 2), 1}, nn::Activation::identity);
    EXPECT_THROW(mf_regularizer(ok, in, in.cloud, {}), ParameterError);
}
