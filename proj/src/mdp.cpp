#include "ernie/mdp.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "ernie/errors.hpp"
#include "ernie/rng.hpp"

namespace ernie::mdp {

double state_distance(const Eigen::VectorXd& a, const Eigen::VectorXd& b, StateNorm norm) {
    if (norm == StateNorm::linf) return (a - b).lpNorm<Eigen::Infinity>();
    return (a - b).norm();
}

void TabularMdp::validate() const {
    if (n_states < 1 || n_actions < 1) throw ShapeError("mdp: need at least one state and one action");
    if (!(gamma > 0.0 && gamma < 1.0)) throw ParameterError("mdp: gamma must lie in (0,1)");
    if (embed.rows() != n_states || embed.cols() < 1 || embed.cols() > 3)
        throw ShapeError("mdp: embedding must be n_states x d with 1 <= d <= 3");
    if (reward.rows() != n_states || reward.cols() != n_actions) throw ShapeError("mdp: reward shape");
    if (static_cast<int>(trans.size()) != n_actions) throw ShapeError("mdp: one transition matrix per action");
    if (!embed.allFinite() || !reward.allFinite()) throw NumericError("mdp: non-finite entries");
    if (reward.cwiseAbs().maxCoeff() > 1.0) throw DomainError("mdp: |r(s,a)| must be <= 1");
    for (const auto& p : trans) {
        if (p.rows() != n_states || p.cols() != n_states) throw ShapeError("mdp: transition shape");
        if (!p.allFinite()) throw NumericError("mdp: non-finite transition");
        if (p.minCoeff() < 0.0) throw DomainError("mdp: negative transition probability");
        for (int s = 0; s < n_states; ++s)
            if (std::abs(p.row(s).sum() - 1.0) > 1e-12) throw DomainError("mdp: transition row does not sum to 1");
    }
}

SmoothnessAudit audit_smoothness(const TabularMdp& mdp, StateNorm norm) {
    SmoothnessAudit out;
    bool smooth = true;
    for (int s = 0; s < mdp.n_states; ++s) {
        for (int t = s + 1; t < mdp.n_states; ++t) {
            double dist = state_distance(mdp.state(s), mdp.state(t), norm);
            for (int a = 0; a < mdp.n_actions; ++a) {
                double dr = std::abs(mdp.reward(s, a) - mdp.reward(t, a));
                double dp = (mdp.trans[a].row(s) - mdp.trans[a].row(t)).lpNorm<1>();
                if (dr > mdp.l_r * dist || dp > mdp.l_p * dist) smooth = false;
                if (dist > 0.0) {
                    out.reward_slope = std::max(out.reward_slope, dr / dist);
                    out.transition_slope = std::max(out.transition_slope, dp / dist);
                }
            }
        }
    }
    out.smooth = smooth;
    return out;
}

namespace {

// Random f: R^d -> R with global Lipschitz constant <= 1 in the Euclidean norm:
// f(x) = sum_k c_k sin(w_k . x + phi_k) with sum_k |c_k| ||w_k|| = 1.
struct LipschitzWave {
    std::vector<Eigen::VectorXd> freq;
    std::vector<double> phase;
    std::vector<double> coef;

    LipschitzWave(int dim, Rng& rng, int terms = 3) {
        double total = 0.0;
        for (int k = 0; k < terms; ++k) {
            Eigen::VectorXd w = rng.normal_vector(dim) * 3.0;
            freq.push_back(w);
            phase.push_back(rng.uniform(0.0, 2.0 * M_PI));
            double c = rng.uniform(0.2, 1.0);
            coef.push_back(c);
            total += c * w.norm();
        }
        if (total > 0.0)
            for (auto& c : coef) c /= total;
    }

    double operator()(const Eigen::VectorXd& x) const {
        double v = 0.0;
        for (std::size_t k = 0; k < freq.size(); ++k) v += coef[k] * std::sin(freq[k].dot(x) + phase[k]);
        return v;
    }
};

Eigen::VectorXd random_distribution(int n, Rng& rng) {
    Eigen::VectorXd p(n);
    for (int i = 0; i < n; ++i) p[i] = -std::log(1.0 - rng.uniform());
    return p / p.sum();
}

TabularMdp build_instance(int n_states, int n_actions, double l_r, double l_p, double gamma,
                          std::uint64_t seed, int dim, double shrink) {
    Rng rng(seed);
    TabularMdp m;
    m.n_states = n_states;
    m.n_actions = n_actions;
    m.gamma = gamma;
    m.l_r = l_r;
    m.l_p = l_p;
    m.embed.resize(n_states, dim);
    for (int s = 0; s < n_states; ++s)
        for (int j = 0; j < dim; ++j) m.embed(s, j) = rng.uniform();
    m.reward.resize(n_states, n_actions);
    m.trans.assign(n_actions, Eigen::MatrixXd::Zero(n_states, n_states));

    for (int a = 0; a < n_actions; ++a) {
        double base = rng.uniform(-0.5, 0.5);
        LipschitzWave reward_wave(dim, rng);
        LipschitzWave mix_wave(dim, rng);
        Eigen::VectorXd first = random_distribution(n_states, rng);
        Eigen::VectorXd second = random_distribution(n_states, rng);
        double spread = (first - second).lpNorm<1>();
        // ||t(x) first + (1-t(x)) second - (t(y) first + (1-t(y)) second)||_1 = |t(x)-t(y)| * spread
        double mix_slope = spread > 0.0 ? shrink * l_p / spread : 0.0;
        for (int s = 0; s < n_states; ++s) {
            Eigen::VectorXd x = m.state(s);
            double r = base + shrink * l_r * reward_wave(x);
            m.reward(s, a) = std::clamp(r, -1.0, 1.0);
            double t = std::clamp(0.5 + mix_slope * mix_wave(x), 0.0, 1.0);
            Eigen::VectorXd row = t * first + (1.0 - t) * second;
            row = row.cwiseMax(0.0);
            m.trans[a].row(s) = (row / row.sum()).transpose();
        }
    }
    return m;
}

} // namespace

TabularMdp gen_smooth_mdp(int n_states, int n_actions, double l_r, double l_p, double gamma,
                          std::uint64_t seed, const GenOptions& opts) {
    if (n_states < 1 || n_actions < 1) throw ParameterError("gen_smooth_mdp: need n_states, n_actions >= 1");
    if (l_r < 0.0 || l_p < 0.0) throw ParameterError("gen_smooth_mdp: Lipschitz constants must be >= 0");
    if (!(gamma > 0.0 && gamma < 1.0)) throw ParameterError("gen_smooth_mdp: gamma must lie in (0,1)");
    if (opts.dim < 1 || opts.dim > 3) throw ParameterError("gen_smooth_mdp: embedding dimension must be 1..3");
    if (!(opts.margin > 0.0 && opts.margin <= 1.0)) throw ParameterError("gen_smooth_mdp: margin must lie in (0,1]");

    double shrink = opts.margin;
    for (int attempt = 0; attempt < 64; ++attempt) {
        TabularMdp m = build_instance(n_states, n_actions, l_r, l_p, gamma, seed, opts.dim, shrink);
        bool rows_ok = true;
        for (const auto& p : m.trans)
            for (int s = 0; s < n_states; ++s)
                if (std::abs(p.row(s).sum() - 1.0) > 1e-12) rows_ok = false;
        if (rows_ok && audit_smoothness(m).smooth) return m;
        shrink *= 0.9;
    }
    throw NumericError("gen_smooth_mdp: could not satisfy the smoothness audit");
}

namespace {

void check_policy_shape(const TabularMdp& mdp, const TabularPolicy& policy) {
    if (policy.probs.rows() != mdp.n_states || policy.probs.cols() != mdp.n_actions)
        throw ShapeError("policy dimensions do not match the MDP");
}

// P^pi (rows = current state) and r^pi.
void induced_chain(const TabularMdp& mdp, const Eigen::MatrixXd& probs, Eigen::MatrixXd& p_pi,
                   Eigen::VectorXd& r_pi) {
    p_pi = Eigen::MatrixXd::Zero(mdp.n_states, mdp.n_states);
    r_pi = Eigen::VectorXd::Zero(mdp.n_states);
    for (int a = 0; a < mdp.n_actions; ++a) {
        p_pi += probs.col(a).asDiagonal() * mdp.trans[a];
        r_pi += probs.col(a).cwiseProduct(mdp.reward.col(a));
    }
}

Eigen::MatrixXd q_from_v(const TabularMdp& mdp, const Eigen::VectorXd& v) {
    Eigen::MatrixXd q(mdp.n_states, mdp.n_actions);
    for (int a = 0; a < mdp.n_actions; ++a) q.col(a) = mdp.reward.col(a) + mdp.gamma * (mdp.trans[a] * v);
    return q;
}

} // namespace

ValuePair policy_eval(const TabularMdp& mdp, const TabularPolicy& policy, double tol) {
    check_policy_shape(mdp, policy);
    if (!(tol > 0.0)) throw ParameterError("policy_eval: tol must be positive");
    Eigen::MatrixXd p_pi;
    Eigen::VectorXd r_pi;
    induced_chain(mdp, policy.probs, p_pi, r_pi);

    Eigen::VectorXd v;
    if (mdp.n_states <= 64) {
        Eigen::MatrixXd lhs = Eigen::MatrixXd::Identity(mdp.n_states, mdp.n_states) - mdp.gamma * p_pi;
        v = lhs.partialPivLu().solve(r_pi);
        // One refinement step removes most of the LU round-off.
        Eigen::VectorXd resid = r_pi - lhs * v;
        v += lhs.partialPivLu().solve(resid);
    } else {
        v = Eigen::VectorXd::Zero(mdp.n_states);
        for (int it = 0; it < 1000000; ++it) {
            Eigen::VectorXd next = r_pi + mdp.gamma * (p_pi * v);
            double resid = (next - v).lpNorm<Eigen::Infinity>();
            v = std::move(next);
            if (resid * mdp.gamma <= tol) break;
        }
    }
    return {v, q_from_v(mdp, v)};
}

double bellman_optimality_residual(const TabularMdp& mdp, const Eigen::MatrixXd& q) {
    Eigen::VectorXd m = q.rowwise().maxCoeff();
    return (q_from_v(mdp, m) - q).lpNorm<Eigen::Infinity>();
}

TabularPolicy greedy_policy(const Eigen::MatrixXd& q) {
    TabularPolicy p;
    p.probs = Eigen::MatrixXd::Zero(q.rows(), q.cols());
    for (Eigen::Index s = 0; s < q.rows(); ++s) {
        Eigen::Index best = 0;
        for (Eigen::Index a = 1; a < q.cols(); ++a)
            if (q(s, a) > q(s, best)) best = a;
        p.probs(s, best) = 1.0;
    }
    return p;
}

TabularPolicy uniform_policy(int n_states, int n_actions) {
    TabularPolicy p;
    p.probs = Eigen::MatrixXd::Constant(n_states, n_actions, 1.0 / n_actions);
    return p;
}

Eigen::MatrixXd value_iteration(const TabularMdp& mdp, double tol) {
    if (!(tol > 0.0)) throw ParameterError("value_iteration: tol must be positive");
    Eigen::MatrixXd q = Eigen::MatrixXd::Zero(mdp.n_states, mdp.n_actions);
    for (int it = 0; it < 1000000; ++it) {
        Eigen::MatrixXd next = q_from_v(mdp, q.rowwise().maxCoeff());
        double resid = (next - q).lpNorm<Eigen::Infinity>();
        q = std::move(next);
        if (resid <= tol) break;
    }
    // Policy-iteration polish: Q of a stable greedy policy is Q* up to solver round-off.
    TabularPolicy greedy = greedy_policy(q);
    for (int it = 0; it < 100; ++it) {
        Eigen::MatrixXd q_pi = policy_eval(mdp, greedy, tol).q;
        TabularPolicy next = greedy_policy(q_pi);
        if (next.probs == greedy.probs) {
            if (bellman_optimality_residual(mdp, q_pi) <= bellman_optimality_residual(mdp, q)) q = q_pi;
            break;
        }
        greedy = std::move(next);
    }
    return q;
}

TabularPolicy softmax_policy(const Eigen::MatrixXd& q_table, double epsilon_target, int n_actions) {
    if (!(epsilon_target > 0.0)) throw ParameterError("softmax_policy: epsilon_target must be positive");
    if (q_table.cols() != n_actions) throw ShapeError("softmax_policy: q_table width != n_actions");
    double eta = std::log(static_cast<double>(n_actions)) / epsilon_target;
    TabularPolicy p;
    p.probs.resize(q_table.rows(), q_table.cols());
    for (Eigen::Index s = 0; s < q_table.rows(); ++s) {
        Eigen::RowVectorXd z = eta * q_table.row(s);
        z.array() -= z.maxCoeff();
        Eigen::RowVectorXd e = z.array().exp();
        p.probs.row(s) = e / e.sum();
    }
    return p;
}

double empirical_lipschitz(const Eigen::MatrixXd& values, const Eigen::MatrixXd& embed, OutputMetric metric,
                           StateNorm norm) {
    if (values.rows() != embed.rows()) throw ShapeError("empirical_lipschitz: one value row per state");
    if (metric == OutputMetric::abs && values.cols() != 1)
        throw ShapeError("empirical_lipschitz: abs metric expects scalar values");
    double best = 0.0;
    bool any_pair = false;
    for (Eigen::Index s = 0; s < values.rows(); ++s) {
        for (Eigen::Index t = s + 1; t < values.rows(); ++t) {
            double dist = state_distance(embed.row(s).transpose(), embed.row(t).transpose(), norm);
            if (dist == 0.0) continue;
            any_pair = true;
            double out = (values.row(s) - values.row(t)).lpNorm<1>();
            best = std::max(best, out / dist);
        }
    }
    if (!any_pair) throw DomainError("empirical_lipschitz: need two states with distinct embeddings");
    return best;
}

LipschitzBounds lipschitz_bounds(double l_r, double l_p, double l_pi, double gamma) {
    if (!(gamma > 0.0 && gamma < 1.0)) throw ParameterError("lipschitz_bounds: gamma must lie in (0,1)");
    if (l_r < 0.0 || l_p < 0.0 || l_pi < 0.0) throw ParameterError("lipschitz_bounds: constants must be >= 0");
    LipschitzBounds b;
    b.l_q = l_r + gamma * l_p / (1.0 - gamma);
    b.l_v = l_pi / (1.0 - gamma) + b.l_q;
    return b;
}

InterpolatedPolicy::InterpolatedPolicy(TabularPolicy policy, Eigen::MatrixXd embed, StateNorm norm)
    : policy_(std::move(policy)), embed_(std::move(embed)), norm_(norm) {
    if (policy_.probs.rows() != embed_.rows()) throw ShapeError("InterpolatedPolicy: one row per embedded state");
}

Eigen::VectorXd InterpolatedPolicy::at(const Eigen::VectorXd& x) const {
    const Eigen::Index n = embed_.rows();
    if (n == 1) return policy_.probs.row(0).transpose();
    Eigen::Index first = -1, second = -1;
    double d_first = std::numeric_limits<double>::infinity();
    double d_second = d_first;
    for (Eigen::Index s = 0; s < n; ++s) {
        double d = state_distance(embed_.row(s).transpose(), x, norm_);
        if (d < d_first) {
            second = first;
            d_second = d_first;
            first = s;
            d_first = d;
        } else if (d < d_second) {
            second = s;
            d_second = d;
        }
    }
    if (d_first == 0.0) return policy_.probs.row(first).transpose();
    double w_first = d_second / (d_first + d_second);
    Eigen::VectorXd p = w_first * policy_.probs.row(first).transpose() +
                        (1.0 - w_first) * policy_.probs.row(second).transpose();
    return p / p.sum();
}

std::vector<Eigen::VectorXd> perturbation_grid(int dim, double epsilon, int grid_resolution, StateNorm norm,
                                               std::uint64_t seed) {
    if (grid_resolution < 1) throw ParameterError("perturbation_grid: resolution must be >= 1");
    std::vector<Eigen::VectorXd> out;
    if (epsilon == 0.0) {
        out.push_back(Eigen::VectorXd::Zero(dim));
        return out;
    }
    int total = 1;
    for (int j = 0; j < dim; ++j) total *= grid_resolution;
    for (int idx = 0; idx < total; ++idx) {
        Eigen::VectorXd d(dim);
        int rem = idx;
        for (int j = 0; j < dim; ++j) {
            int k = rem % grid_resolution;
            rem /= grid_resolution;
            d[j] = grid_resolution == 1 ? 0.0 : -epsilon + 2.0 * epsilon * k / (grid_resolution - 1);
        }
        double size = norm == StateNorm::l2 ? d.norm() : d.lpNorm<Eigen::Infinity>();
        if (size <= epsilon * (1.0 + 1e-12)) out.push_back(d);
    }
    Rng rng(seed);
    for (int k = 0; k < 2 * grid_resolution; ++k) {
        Eigen::VectorXd d = rng.normal_vector(dim);
        if (norm == StateNorm::l2) {
            d *= epsilon / d.norm();
        } else {
            for (int j = 0; j < dim; ++j) d[j] = rng.uniform(-epsilon, epsilon);
            d[rng.index(dim)] = rng.uniform() < 0.5 ? -epsilon : epsilon;
        }
        out.push_back(d);
    }
    return out;
}

double measured_interpolated_lipschitz(const InterpolatedPolicy& policy, const std::vector<Eigen::VectorXd>& deltas) {
    const auto& embed = policy.embed();
    double best = 0.0;
    if (embed.rows() >= 2) {
        try {
            best = empirical_lipschitz(policy.table().probs, embed, OutputMetric::l1, policy.norm());
        } catch (const DomainError&) {
            best = 0.0;
        }
    }
    for (Eigen::Index s = 0; s < embed.rows(); ++s) {
        Eigen::VectorXd x = embed.row(s).transpose();
        Eigen::VectorXd base = policy.at(x);
        for (const auto& d : deltas) {
            double size = policy.norm() == StateNorm::l2 ? d.norm() : d.lpNorm<Eigen::Infinity>();
            if (size == 0.0) continue;
            best = std::max(best, (policy.at(x + d) - base).lpNorm<1>() / size);
        }
    }
    return best;
}

int horizon_for(double gamma, double tol) {
    if (!(gamma > 0.0 && gamma < 1.0)) throw ParameterError("horizon_for: gamma must lie in (0,1)");
    int t = 0;
    double tail = 1.0 / (1.0 - gamma);
    while (tail >= tol) {
        tail *= gamma;
        ++t;
    }
    return t;
}

GapResult perturbed_value_gap(const TabularMdp& mdp, const InterpolatedPolicy& policy, double epsilon,
                              int horizon, int grid_resolution, std::uint64_t seed) {
    if (epsilon < 0.0) throw ParameterError("perturbed_value_gap: epsilon must be >= 0");
    if (std::pow(mdp.gamma, horizon) / (1.0 - mdp.gamma) >= 1e-6)
        throw ParameterError("perturbed_value_gap: horizon too small for the 1e-6 truncation tolerance");
    if (policy.table().probs.rows() != mdp.n_states || policy.table().probs.cols() != mdp.n_actions)
        throw ShapeError("perturbed_value_gap: policy dimensions do not match the MDP");

    auto deltas = perturbation_grid(mdp.dim(), epsilon, grid_resolution, policy.norm(), seed);
    GapResult out;
    out.horizon = horizon;
    out.n_deltas = static_cast<int>(deltas.size());
    out.l_pi = measured_interpolated_lipschitz(policy, deltas);
    out.bound = 2.0 * out.l_pi * epsilon / ((1.0 - mdp.gamma) * (1.0 - mdp.gamma));

    const ValuePair clean = policy_eval(mdp, policy.table());

    // Perturbed action distributions, per state and per candidate delta.
    std::vector<Eigen::MatrixXd> perturbed(mdp.n_states);
    for (int s = 0; s < mdp.n_states; ++s) {
        perturbed[s].resize(deltas.size(), mdp.n_actions);
        Eigen::VectorXd x = mdp.state(s);
        for (std::size_t k = 0; k < deltas.size(); ++k) perturbed[s].row(k) = policy.at(x + deltas[k]).transpose();
    }

    // Terminal value = clean V^pi: perturbation stops after the horizon, which is itself
    // an admissible perturbation sequence (delta = 0).
    Eigen::VectorXd v_min = clean.v;
    Eigen::VectorXd v_max = clean.v;
    for (int t = horizon - 1; t >= 0; --t) {
        Eigen::MatrixXd q_min = q_from_v(mdp, v_min);
        Eigen::MatrixXd q_max = q_from_v(mdp, v_max);
        Eigen::VectorXd next_min(mdp.n_states), next_max(mdp.n_states);
        for (int s = 0; s < mdp.n_states; ++s) {
            Eigen::VectorXd lo = perturbed[s] * q_min.row(s).transpose();
            Eigen::VectorXd hi = perturbed[s] * q_max.row(s).transpose();
            next_min[s] = lo.minCoeff();
            next_max[s] = hi.maxCoeff();
        }
        v_min = std::move(next_min);
        v_max = std::move(next_max);
    }
    out.gap = std::max((clean.v - v_min).maxCoeff(), (v_max - clean.v).maxCoeff());
    out.gap = std::max(out.gap, 0.0);
    return out;
}

nlohmann::json to_json(const TabularMdp& mdp) {
    nlohmann::json j;
    j["n_states"] = mdp.n_states;
    j["n_actions"] = mdp.n_actions;
    j["gamma"] = mdp.gamma;
    j["l_r"] = mdp.l_r;
    j["l_p"] = mdp.l_p;
    auto& embed = j["embed"] = nlohmann::json::array();
    for (int s = 0; s < mdp.n_states; ++s) {
        nlohmann::json row = nlohmann::json::array();
        for (int k = 0; k < mdp.dim(); ++k) row.push_back(mdp.embed(s, k));
        embed.push_back(row);
    }
    auto& reward = j["reward"] = nlohmann::json::array();
    for (int s = 0; s < mdp.n_states; ++s) {
        nlohmann::json row = nlohmann::json::array();
        for (int a = 0; a < mdp.n_actions; ++a) row.push_back(mdp.reward(s, a));
        reward.push_back(row);
    }
    auto& trans = j["trans"] = nlohmann::json::array();
    for (int s = 0; s < mdp.n_states; ++s) {
        nlohmann::json per_action = nlohmann::json::array();
        for (int a = 0; a < mdp.n_actions; ++a) {
            nlohmann::json row = nlohmann::json::array();
            for (int t = 0; t < mdp.n_states; ++t) row.push_back(mdp.trans[a](s, t));
            per_action.push_back(row);
        }
        trans.push_back(per_action);
    }
    return j;
}

TabularMdp mdp_from_json(const nlohmann::json& j) {
    TabularMdp m;
    try {
        m.n_states = j.at("n_states").get<int>();
        m.n_actions = j.at("n_actions").get<int>();
        m.gamma = j.at("gamma").get<double>();
        m.l_r = j.at("l_r").get<double>();
        m.l_p = j.at("l_p").get<double>();
        const auto& embed = j.at("embed");
        if (static_cast<int>(embed.size()) != m.n_states || embed.empty()) throw ShapeError("mdp json: embed rows");
        int dim = static_cast<int>(embed.at(0).size());
        m.embed.resize(m.n_states, dim);
        for (int s = 0; s < m.n_states; ++s) {
            if (static_cast<int>(embed.at(s).size()) != dim) throw ShapeError("mdp json: ragged embed");
            for (int k = 0; k < dim; ++k) m.embed(s, k) = embed.at(s).at(k).get<double>();
        }
        m.reward.resize(m.n_states, m.n_actions);
        for (int s = 0; s < m.n_states; ++s)
            for (int a = 0; a < m.n_actions; ++a) m.reward(s, a) = j.at("reward").at(s).at(a).get<double>();
        m.trans.assign(m.n_actions, Eigen::MatrixXd::Zero(m.n_states, m.n_states));
        for (int s = 0; s < m.n_states; ++s)
            for (int a = 0; a < m.n_actions; ++a)
                for (int t = 0; t < m.n_states; ++t) m.trans[a](s, t) = j.at("trans").at(s).at(a).at(t).get<double>();
    } catch (const nlohmann::json::exception& e) {
        throw ShapeError(std::string("mdp json: ") + e.what());
    }
    m.validate();
    return m;
}

} // namespace ernie::mdp
