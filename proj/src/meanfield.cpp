#include "ernie/meanfield.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "ernie/errors.hpp"
#include "ernie/rng.hpp"

namespace ernie::mf {

Eigen::VectorXd ParticleCloud::mean() const { return points.rowwise().mean(); }

Eigen::VectorXd ParticleCloud::stddev() const {
    Eigen::VectorXd m = mean();
    Eigen::MatrixXd centered = points.colwise() - m;
    return (centered.array().square().rowwise().sum() / static_cast<double>(points.cols())).sqrt().matrix();
}

MeanEmbedding mean_embedding(const std::vector<Eigen::VectorXd>& neighbor_states,
                             const std::vector<Eigen::VectorXd>& neighbor_actions) {
    if (neighbor_states.empty() || neighbor_actions.empty()) throw DomainError("mean_embedding: empty neighbor set");
    MeanEmbedding out;
    const auto d = neighbor_states.front().size();
    out.cloud.points.resize(d, static_cast<Eigen::Index>(neighbor_states.size()));
    for (std::size_t i = 0; i < neighbor_states.size(); ++i) {
        if (neighbor_states[i].size() != d) throw ShapeError("mean_embedding: ragged neighbor states");
        out.cloud.points.col(static_cast<Eigen::Index>(i)) = neighbor_states[i];
    }
    const auto ad = neighbor_actions.front().size();
    out.avg_action = Eigen::VectorXd::Zero(ad);
    for (const auto& a : neighbor_actions) {
        if (a.size() != ad) throw ShapeError("mean_embedding: ragged neighbor actions");
        out.avg_action += a;
    }
    out.avg_action /= static_cast<double>(neighbor_actions.size());
    return out;
}

int flat_dim(int state_dim, int cloud_dim, int action_dim) { return state_dim + 2 * cloud_dim + 2 * action_dim; }

Eigen::VectorXd flatten(const MeanFieldInput& in, const ParticleCloud& cloud, const Eigen::VectorXd& own_action) {
    const int d = cloud.dim();
    Eigen::VectorXd x(flat_dim(static_cast<int>(in.own_state.size()), d, static_cast<int>(own_action.size())));
    if (in.avg_action.size() != own_action.size()) throw ShapeError("flatten: action and average action differ in size");
    Eigen::Index off = 0;
    x.segment(off, in.own_state.size()) = in.own_state;
    off += in.own_state.size();
    x.segment(off, d) = cloud.mean();
    off += d;
    x.segment(off, d) = cloud.stddev();
    off += d;
    x.segment(off, own_action.size()) = own_action;
    off += own_action.size();
    x.segment(off, in.avg_action.size()) = in.avg_action;
    return x;
}

Eigen::VectorXd flatten(const MeanFieldInput& in) { return flatten(in, in.cloud, in.own_action); }

WMode wmode_from_string(const std::string& s) {
    if (s == "identity_coupling") return WMode::identity_coupling;
    if (s == "exact_matching") return WMode::exact_matching;
    if (s == "closed_form_1d") return WMode::closed_form_1d;
    throw ParameterError("unknown Wasserstein mode: " + s);
}

std::vector<int> min_cost_assignment(const Eigen::MatrixXd& cost) {
    // Shortest augmenting path Hungarian algorithm with potentials (1-indexed internals).
    const int n = static_cast<int>(cost.rows());
    if (cost.cols() != n) throw ShapeError("min_cost_assignment: cost matrix must be square");
    const double inf = std::numeric_limits<double>::infinity();
    std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
    std::vector<int> p(n + 1, 0), way(n + 1, 0);
    for (int i = 1; i <= n; ++i) {
        p[0] = i;
        int j0 = 0;
        std::vector<double> minv(n + 1, inf);
        std::vector<bool> used(n + 1, false);
        do {
            used[j0] = true;
            int i0 = p[j0], j1 = 0;
            double delta = inf;
            for (int j = 1; j <= n; ++j) {
                if (used[j]) continue;
                double cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if (cur < minv[j]) {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if (minv[j] < delta) {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for (int j = 0; j <= n; ++j) {
                if (used[j]) {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
        } while (p[j0] != 0);
        do {
            int j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
        } while (j0);
    }
    std::vector<int> assignment(n, -1);
    for (int j = 1; j <= n; ++j)
        if (p[j] > 0) assignment[p[j] - 1] = j - 1;
    return assignment;
}

namespace {

double matching_by_permutation(const Eigen::MatrixXd& cost) {
    const int n = static_cast<int>(cost.rows());
    std::vector<int> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    double best = std::numeric_limits<double>::infinity();
    do {
        double total = 0.0;
        for (int i = 0; i < n; ++i) total += cost(i, perm[i]);
        best = std::min(best, total);
    } while (std::next_permutation(perm.begin(), perm.end()));
    return best;
}

} // namespace

double w_distance(const ParticleCloud& a, const ParticleCloud& b, WMode mode) {
    if (a.dim() != b.dim()) throw ParameterError("w_distance: clouds differ in dimension");
    if (a.size() < 1 || b.size() < 1) throw ParameterError("w_distance: empty cloud");
    if (a.size() != b.size()) throw ParameterError("w_distance: clouds must have equal sizes");
    const int n = a.size();
    switch (mode) {
    case WMode::identity_coupling: {
        double total = 0.0;
        for (int i = 0; i < n; ++i) total += (a.points.col(i) - b.points.col(i)).norm();
        return total / n;
    }
    case WMode::closed_form_1d: {
        if (a.dim() != 1) throw ParameterError("w_distance: closed_form_1d requires one-dimensional clouds");
        std::vector<double> xs(a.points.data(), a.points.data() + n);
        std::vector<double> ys(b.points.data(), b.points.data() + n);
        std::sort(xs.begin(), xs.end());
        std::sort(ys.begin(), ys.end());
        double total = 0.0;
        for (int i = 0; i < n; ++i) total += std::abs(xs[i] - ys[i]);
        return total / n;
    }
    case WMode::exact_matching: {
        if (n > 16) throw ParameterError("w_distance: exact_matching supports at most 16 particles");
        Eigen::MatrixXd cost(n, n);
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < n; ++j) cost(i, j) = (a.points.col(i) - b.points.col(j)).norm();
        if (n <= 8) return matching_by_permutation(cost) / n;
        std::vector<int> assign = min_cost_assignment(cost);
        double total = 0.0;
        for (int i = 0; i < n; ++i) total += cost(i, assign[i]);
        return total / n;
    }
    }
    return 0.0;
}

namespace {

// Inputs for every action in the set, columns ordered like `actions`.
Eigen::MatrixXd action_batch(const MeanFieldInput& in, const ParticleCloud& cloud,
                             const std::vector<Eigen::VectorXd>& actions) {
    if (actions.empty()) throw ParameterError("mean-field: action set must be non-empty");
    Eigen::VectorXd first = flatten(in, cloud, actions.front());
    Eigen::MatrixXd x(first.size(), static_cast<Eigen::Index>(actions.size()));
    x.col(0) = first;
    for (std::size_t k = 1; k < actions.size(); ++k) x.col(static_cast<Eigen::Index>(k)) = flatten(in, cloud, actions[k]);
    return x;
}

void check_input(const nn::Net& q_net, const MeanFieldInput& in) {
    if (in.cloud.size() < 1) throw DomainError("mean-field: empty cloud");
    if (!in.cloud.points.allFinite() || !in.own_state.allFinite()) throw NumericError("mean-field: non-finite input");
    int expected = flat_dim(static_cast<int>(in.own_state.size()), in.cloud.dim(), static_cast<int>(in.own_action.size()));
    if (q_net.input_dim() != expected) throw ShapeError("mean-field: Q network input dimension mismatch");
}

} // namespace

double mf_regularizer(const nn::Net& q_net, const MeanFieldInput& input, const ParticleCloud& perturbed,
                      const std::vector<Eigen::VectorXd>& actions) {
    check_input(q_net, input);
    if (perturbed.dim() != input.cloud.dim()) throw ShapeError("mf_regularizer: perturbed cloud dimension mismatch");
    Eigen::MatrixXd clean = q_net.forward_batch(action_batch(input, input.cloud, actions));
    Eigen::MatrixXd attacked = q_net.forward_batch(action_batch(input, perturbed, actions));
    return (attacked - clean).squaredNorm();
}

Eigen::VectorXd mf_regularizer_grad(const nn::Net& q_net, const MeanFieldInput& input, const ParticleCloud& perturbed,
                                    const std::vector<Eigen::VectorXd>& actions) {
    check_input(q_net, input);
    nn::Tape clean = q_net.forward_tape(action_batch(input, input.cloud, actions));
    nn::Tape attacked = q_net.forward_tape(action_batch(input, perturbed, actions));
    Eigen::MatrixXd diff = attacked.output - clean.output;
    Eigen::VectorXd g = q_net.backward(attacked, 2.0 * diff).grad_params;
    g += q_net.backward(clean, -2.0 * diff).grad_params;
    return g;
}

ParticleCloud mf_attack(const nn::Net& q_net, const MeanFieldInput& input, const std::vector<Eigen::VectorXd>& actions,
                        const MfAttackConfig& cfg) {
    check_input(q_net, input);
    if (cfg.steps < 1) throw ParameterError("mf_attack: steps must be >= 1");
    if (cfg.lambda_w < 0.0) throw ParameterError("mf_attack: lambda_w must be >= 0");
    if (!(cfg.eta > 0.0)) throw ParameterError("mf_attack: eta must be positive");

    const ParticleCloud& base = input.cloud;
    const int n = base.size();
    const int d = base.dim();
    const Eigen::Index state_dim = input.own_state.size();

    ParticleCloud cur = base;
    if (cfg.jitter > 0.0) {
        Rng rng(cfg.seed);
        for (int i = 0; i < n; ++i) cur.points.col(i) += rng.in_l2_ball(d, cfg.jitter);
    }
    const Eigen::MatrixXd clean_q = q_net.forward_batch(action_batch(input, base, actions));
    const double shrink = cfg.eta * cfg.lambda_w / n;

    for (int step = 0; step < cfg.steps; ++step) {
        nn::Tape tape = q_net.forward_tape(action_batch(input, cur, actions));
        Eigen::MatrixXd diff = tape.output - clean_q;
        Eigen::MatrixXd g_in = q_net.backward(tape, 2.0 * diff, false).grad_input;
        Eigen::VectorXd g_mean = g_in.middleRows(state_dim, d).rowwise().sum();
        Eigen::VectorXd g_std = g_in.middleRows(state_dim + d, d).rowwise().sum();

        Eigen::VectorXd m = cur.mean();
        Eigen::VectorXd sd = cur.stddev();
        Eigen::MatrixXd grad(d, n);
        for (int i = 0; i < n; ++i) {
            for (int j = 0; j < d; ++j) {
                double g = g_mean[j] / n;
                if (sd[j] > 1e-12) g += g_std[j] * (cur.points(j, i) - m[j]) / (n * sd[j]);
                grad(j, i) = g;
            }
        }
        if (!grad.allFinite()) throw NumericError("mf_attack: non-finite gradient");
        cur.points += cfg.eta * grad;

        // Proximal step for the identity-coupling penalty: shrink each particle toward
        // its partner in d_s by eta * lambda_w / n.
        for (int i = 0; i < n; ++i) {
            Eigen::VectorXd off = cur.points.col(i) - base.points.col(i);
            double len = off.norm();
            double keep = len > shrink ? 1.0 - shrink / len : 0.0;
            cur.points.col(i) = base.points.col(i) + keep * off;
        }
    }
    if (!cur.points.allFinite()) throw NumericError("mf_attack: non-finite cloud");
    return cur;
}

} // namespace ernie::mf
