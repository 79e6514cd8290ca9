#include "ernie/envs.hpp"

#include <algorithm>
#include <cmath>

#include <json.hpp>

#include "ernie/errors.hpp"
#include "ernie/rng.hpp"

namespace ernie::env {

std::string to_string(MaliciousMode m) { return m == MaliciousMode::random ? "random" : "adversarial"; }

MaliciousMode malicious_mode_from_string(const std::string& s) {
    if (s == "random") return MaliciousMode::random;
    if (s == "adversarial") return MaliciousMode::adversarial;
    throw ParameterError("unknown malicious mode: " + s);
}

void PerturbSpec::validate() const {
    if (!(obs_noise_sigma >= 0.0)) throw ParameterError("perturb spec: obs_noise_sigma must be >= 0");
    if (!(dynamics_scale > 0.0)) throw ParameterError("perturb spec: dynamics_scale must be > 0");
    if (!(malicious_rate >= 0.0 && malicious_rate <= 1.0))
        throw ParameterError("perturb spec: malicious_rate must lie in [0, 1]");
}

bool PerturbSpec::is_identity() const {
    return obs_noise_sigma == 0.0 && dynamics_scale == 1.0 && malicious_rate == 0.0;
}

// ---------------------------------------------------------------- coopnav

int coopnav_obs_dim(int n_agents) { return 4 + 2 * n_agents + 2 * (n_agents - 1); }

CoopNavReset coopnav_reset(int n_agents, std::uint64_t seed, const CoopNavParams& params) {
    if (n_agents < 1) throw ParameterError("coopnav_reset: n_agents must be >= 1");
    Rng rng(seed);
    CoopNavState s;
    s.params = params;
    s.pos.resize(2, n_agents);
    s.landmarks.resize(2, n_agents);
    for (int i = 0; i < n_agents; ++i) s.pos.col(i) = rng.in_linf_ball(2, params.bound);
    for (int i = 0; i < n_agents; ++i) s.landmarks.col(i) = rng.in_linf_ball(2, params.bound);
    s.vel = Eigen::MatrixXd::Zero(2, n_agents);
    return {s, coopnav_obs(s)};
}

Obs coopnav_obs(const CoopNavState& s) {
    const int n = s.n_agents();
    Obs out(n);
    for (int i = 0; i < n; ++i) {
        Eigen::VectorXd o(coopnav_obs_dim(n));
        o.segment(0, 2) = s.pos.col(i);
        o.segment(2, 2) = s.vel.col(i);
        int k = 4;
        for (int l = 0; l < n; ++l, k += 2) o.segment(k, 2) = s.landmarks.col(l) - s.pos.col(i);
        for (int j = 0; j < n; ++j) {
            if (j == i) continue;
            o.segment(k, 2) = s.pos.col(j) - s.pos.col(i);
            k += 2;
        }
        out[i] = std::move(o);
    }
    return out;
}

Eigen::VectorXd coopnav_global_state(const CoopNavState& s) {
    const int n = s.n_agents();
    Eigen::VectorXd g(6 * n);
    g.segment(0, 2 * n) = s.pos.reshaped();
    g.segment(2 * n, 2 * n) = s.vel.reshaped();
    g.segment(4 * n, 2 * n) = s.landmarks.reshaped();
    return g;
}

Eigen::VectorXd coopnav_rewards(const CoopNavState& s) {
    const int n = s.n_agents();
    double cover = 0.0;
    for (int l = 0; l < n; ++l) {
        double best = (s.pos.col(0) - s.landmarks.col(l)).norm();
        for (int i = 1; i < n; ++i) best = std::min(best, (s.pos.col(i) - s.landmarks.col(l)).norm());
        cover += best;
    }
    Eigen::VectorXd r = Eigen::VectorXd::Constant(n, -cover);
    for (int i = 0; i < n; ++i)
        for (int j = i + 1; j < n; ++j)
            if ((s.pos.col(i) - s.pos.col(j)).norm() < s.params.collision_dist) {
                r[i] -= 1.0;
                r[j] -= 1.0;
            }
    return r;
}

CoopNavStep coopnav_step(const CoopNavState& s, const std::vector<Eigen::VectorXd>& actions, double dynamics_scale) {
    const int n = s.n_agents();
    if (static_cast<int>(actions.size()) != n) throw ShapeError("coopnav_step: one action per agent required");
    if (!(dynamics_scale > 0.0)) throw ParameterError("coopnav_step: dynamics_scale must be > 0");
    CoopNavStep out;
    out.state = s;
    CoopNavState& ns = out.state;
    const CoopNavParams& p = s.params;
    for (int i = 0; i < n; ++i) {
        if (actions[i].size() != 2) throw ShapeError("coopnav_step: actions are 2-vectors");
        if (!actions[i].allFinite()) throw NumericError("coopnav_step: non-finite action");
        Eigen::Vector2d a = actions[i];
        for (int k = 0; k < 2; ++k) {
            if (a[k] > 1.0 || a[k] < -1.0) {
                ++out.clamped;
                a[k] = std::clamp(a[k], -1.0, 1.0);
            }
        }
        ns.vel.col(i) = 0.5 * s.vel.col(i) + 0.5 * a * p.v_max * dynamics_scale;
        ns.pos.col(i) = (s.pos.col(i) + ns.vel.col(i) * p.dt).cwiseMax(-p.bound).cwiseMin(p.bound);
    }
    ns.t = s.t + 1;
    out.obs = coopnav_obs(ns);
    out.rewards = coopnav_rewards(ns);
    out.global_reward = out.rewards.mean();
    return out;
}

CoopNavEnv::CoopNavEnv(int n_agents, int horizon, CoopNavParams params)
    : n_(n_agents), horizon_(horizon), params_(params) {
    if (n_agents < 1) throw ParameterError("CoopNavEnv: n_agents must be >= 1");
    if (horizon < 1) throw ParameterError("CoopNavEnv: horizon must be >= 1");
    state_ = coopnav_reset(n_, 0, params_).state;
}

Obs CoopNavEnv::reset(std::uint64_t seed) {
    auto r = coopnav_reset(n_, seed, params_);
    state_ = std::move(r.state);
    return std::move(r.obs);
}

StepResult CoopNavEnv::step(const JointAct& a, double dynamics_scale) {
    auto r = coopnav_step(state_, a.continuous, dynamics_scale);
    clamped_total_ += r.clamped;
    state_ = std::move(r.state);
    return {std::move(r.obs), std::move(r.rewards), r.global_reward, state_.t >= horizon_};
}

std::vector<Eigen::VectorXd> CoopNavEnv::agent_states() const {
    std::vector<Eigen::VectorXd> out(n_);
    for (int i = 0; i < n_; ++i) {
        out[i].resize(4);
        out[i] << state_.pos.col(i), state_.vel.col(i);
    }
    return out;
}

// ---------------------------------------------------------------- gridq

int GridQState::neighbor(int i, Dir d) const {
    int r = i / cols, c = i % cols;
    switch (d) {
    case north: r = (r + rows - 1) % rows; break;
    case south: r = (r + 1) % rows; break;
    case east: c = (c + 1) % cols; break;
    case west: c = (c + cols - 1) % cols; break;
    }
    return r * cols + c;
}

GridQState gridq_reset(const GridQParams& p, std::uint64_t seed) {
    if (p.rows < 1 || p.cols < 1) throw ParameterError("gridq_reset: grid must be at least 1x1");
    if (p.arrival_lo < 0.0 || p.arrival_hi < p.arrival_lo) throw ParameterError("gridq_reset: bad arrival range");
    if (p.serve < 0.0) throw ParameterError("gridq_reset: serve must be >= 0");
    if (p.exit_fraction < 0.0 || p.exit_fraction > 1.0) throw ParameterError("gridq_reset: exit_fraction in [0, 1]");
    if (p.init_queue_max < 0.0) throw ParameterError("gridq_reset: init_queue_max must be >= 0");
    Rng rng(seed);
    GridQState s;
    s.rows = p.rows;
    s.cols = p.cols;
    const int n = p.rows * p.cols;
    s.queues.resize(4, n);
    s.arrival.resize(4, n);
    for (Eigen::Index k = 0; k < s.queues.size(); ++k) s.queues.data()[k] = rng.uniform(0.0, p.init_queue_max);
    for (Eigen::Index k = 0; k < s.arrival.size(); ++k) s.arrival.data()[k] = rng.uniform(p.arrival_lo, p.arrival_hi);
    s.phase.assign(n, 0);
    s.serve = p.serve;
    s.exit_fraction = p.exit_fraction;
    return s;
}

Obs gridq_obs(const GridQState& s) {
    const int n = s.n_agents();
    Obs out(n);
    for (int i = 0; i < n; ++i) {
        Eigen::VectorXd o(gridq_obs_dim());
        o.head(4) = s.queues.col(i);
        for (int d = 0; d < 4; ++d) o[4 + d] = s.queues.col(s.neighbor(i, static_cast<Dir>(d))).sum();
        o[8] = s.phase[i];
        out[i] = std::move(o);
    }
    return out;
}

Eigen::VectorXd gridq_global_state(const GridQState& s) {
    const int n = s.n_agents();
    Eigen::VectorXd g(5 * n);
    g.head(4 * n) = s.queues.reshaped();
    for (int i = 0; i < n; ++i) g[4 * n + i] = s.phase[i];
    return g;
}

GridQStep gridq_step(const GridQState& s, const std::vector<int>& phases, double dynamics_scale) {
    const int n = s.n_agents();
    if (static_cast<int>(phases.size()) != n) throw ShapeError("gridq_step: one phase per intersection required");
    if (!(dynamics_scale > 0.0)) throw ParameterError("gridq_step: dynamics_scale must be > 0");
    for (int p : phases)
        if (p != 0 && p != 1) throw ParameterError("gridq_step: phases must be 0 or 1");
    static constexpr Dir opposite[4] = {south, north, west, east};

    GridQStep out;
    out.state = s;
    GridQState& ns = out.state;
    const double capacity = s.serve * dynamics_scale;
    Eigen::MatrixXd inflow = Eigen::MatrixXd::Zero(4, n);
    for (int i = 0; i < n; ++i) {
        for (int d = 0; d < 4; ++d) {
            double q = s.queues(d, i) + s.arrival(d, i);
            bool served = phases[i] == 0 ? (d == north || d == south) : (d == east || d == west);
            double cleared = served ? std::min(q, capacity) : 0.0;
            ns.queues(d, i) = std::max(0.0, q - cleared);
            // Cars keep travelling straight and join the same approach downstream.
            inflow(d, s.neighbor(i, opposite[d])) += (1.0 - s.exit_fraction) * cleared;
        }
    }
    ns.queues += inflow;
    ns.phase = phases;
    ns.t = s.t + 1;
    out.obs = gridq_obs(ns);
    out.rewards = -ns.queues.colwise().sum().transpose();
    out.global_reward = out.rewards.mean();
    return out;
}

GridQEnv::GridQEnv(GridQParams params, int horizon) : params_(params), horizon_(horizon) {
    if (horizon < 1) throw ParameterError("GridQEnv: horizon must be >= 1");
    state_ = gridq_reset(params_, 0);
}

Obs GridQEnv::reset(std::uint64_t seed) {
    state_ = gridq_reset(params_, seed);
    return gridq_obs(state_);
}

StepResult GridQEnv::step(const JointAct& a, double dynamics_scale) {
    auto r = gridq_step(state_, a.discrete, dynamics_scale);
    state_ = std::move(r.state);
    return {std::move(r.obs), std::move(r.rewards), r.global_reward, state_.t >= horizon_};
}

std::vector<Eigen::VectorXd> GridQEnv::agent_states() const {
    const int n = n_agents();
    std::vector<Eigen::VectorXd> out(n);
    for (int i = 0; i < n; ++i) {
        out[i].resize(5);
        out[i] << state_.queues.col(i), static_cast<double>(state_.phase[i]);
    }
    return out;
}

// ---------------------------------------------------------------- perturbations

Obs perturb_obs(const Obs& obs, const PerturbSpec& spec, std::uint64_t seed) {
    if (!(spec.obs_noise_sigma >= 0.0)) throw ParameterError("perturb_obs: sigma must be >= 0");
    if (spec.obs_noise_sigma == 0.0) return obs;
    Rng rng(seed);
    Obs out = obs;
    for (auto& o : out) o += spec.obs_noise_sigma * rng.normal_vector(o.size());
    return out;
}

std::vector<int> malicious_injector(const std::vector<int>& joint, const std::vector<int>& n_actions,
                                    const action::QFunction& q_global, const PerturbSpec& spec,
                                    std::uint64_t seed) {
    if (!(spec.malicious_rate >= 0.0 && spec.malicious_rate <= 1.0))
        throw ParameterError("malicious_injector: rate must lie in [0, 1]");
    if (joint.size() != n_actions.size()) throw ShapeError("malicious_injector: arity mismatch");
    if (spec.malicious_rate == 0.0 || joint.empty()) return joint;
    Rng rng(seed);
    if (rng.uniform() >= spec.malicious_rate) return joint;
    const int victim = rng.index(static_cast<int>(joint.size()));
    if (spec.malicious_mode == MaliciousMode::random) {
        std::vector<int> out = joint;
        out[victim] = rng.index(n_actions[victim]);
        return out;
    }
    if (!q_global) throw StateError("malicious_injector: adversarial mode needs a global Q");
    return action::worst_single_flip(q_global, n_actions, joint, victim);
}

std::vector<Eigen::VectorXd> malicious_injector(const std::vector<Eigen::VectorXd>& joint, const PerturbSpec& spec,
                                                std::uint64_t seed) {
    if (spec.malicious_mode == MaliciousMode::adversarial && spec.malicious_rate > 0.0)
        throw DomainError("malicious_injector: adversarial mode needs discrete actions");
    if (!(spec.malicious_rate >= 0.0 && spec.malicious_rate <= 1.0))
        throw ParameterError("malicious_injector: rate must lie in [0, 1]");
    if (spec.malicious_rate == 0.0 || joint.empty()) return joint;
    Rng rng(seed);
    if (rng.uniform() >= spec.malicious_rate) return joint;
    const int victim = rng.index(static_cast<int>(joint.size()));
    std::vector<Eigen::VectorXd> out = joint;
    out[victim] = rng.in_linf_ball(joint[victim].size(), 1.0);
    return out;
}

// ---------------------------------------------------------------- rollout

namespace {

nlohmann::json vec_json(const Eigen::VectorXd& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

} // namespace

RolloutResult rollout(MultiAgentEnv& env, const PolicyFn& policy, int T, const PerturbSpec& spec, std::uint64_t seed,
                      const GlobalQFn& q_global, std::ostream* dump) {
    if (T < 1) throw ParameterError("rollout: T must be >= 1");
    spec.validate();
    RolloutResult res;
    res.returns = Eigen::VectorXd::Zero(env.n_agents());
    Obs obs = env.reset(seed);
    const std::vector<int> n_actions(env.n_agents(), env.n_actions());
    for (int t = 0; t < T; ++t) {
        const auto step = static_cast<std::uint64_t>(t);
        Obs seen = perturb_obs(obs, spec, derive_seed(seed, {1, step}));
        JointAct a = policy(seen);
        if (spec.malicious_rate > 0.0) {
            const std::uint64_t s = derive_seed(seed, {2, step});
            if (env.discrete()) {
                action::QFunction q;
                if (q_global) {
                    Eigen::VectorXd state = env.global_state();
                    q = [&q_global, state](const std::vector<int>& joint) { return q_global(state, joint); };
                }
                a.discrete = malicious_injector(a.discrete, n_actions, q, spec, s);
            } else {
                a.continuous = malicious_injector(a.continuous, spec, s);
            }
        }
        StepResult r = env.step(a, spec.dynamics_scale);
        res.returns += r.rewards;
        res.global_return += r.global_reward;
        ++res.steps;
        if (dump) {
            nlohmann::json rec;
            rec["t"] = t;
            nlohmann::json o = nlohmann::json::array();
            for (const auto& v : seen) o.push_back(vec_json(v));
            rec["obs"] = o;
            if (env.discrete()) {
                rec["actions"] = a.discrete;
            } else {
                nlohmann::json acts = nlohmann::json::array();
                for (const auto& v : a.continuous) acts.push_back(vec_json(v));
                rec["actions"] = acts;
            }
            rec["rewards"] = vec_json(r.rewards);
            *dump << rec.dump() << '\n';
        }
        obs = std::move(r.obs);
    }
    return res;
}

} // namespace ernie::env
