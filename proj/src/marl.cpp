#include "ernie/marl.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "ernie/errors.hpp"
#include "ernie/rng.hpp"

namespace ernie::marl {

void Transition::check() const {
    const auto n = obs.size();
    auto same = [n](std::size_t m) { return m == n; };
    if (n == 0) throw ShapeError("transition: no agents");
    if (!same(next_obs.size()) || rewards.size() != static_cast<Eigen::Index>(n))
        throw ShapeError("transition: per-agent arities differ");
    if (discrete_actions.empty() == actions.empty())
        throw ShapeError("transition: exactly one of discrete or continuous actions must be set");
    if (!discrete_actions.empty() && !same(discrete_actions.size()))
        throw ShapeError("transition: joint action arity differs from the agent count");
    if (!actions.empty() && !same(actions.size()))
        throw ShapeError("transition: joint action arity differs from the agent count");
    if (!agent_states.empty() && (!same(agent_states.size()) || !same(next_agent_states.size())))
        throw ShapeError("transition: agent state arity differs from the agent count");
}

// ---------------------------------------------------------------- replay

ReplayBuffer::ReplayBuffer(std::size_t capacity) : capacity_(capacity) {
    if (capacity == 0) throw ParameterError("ReplayBuffer: capacity must be positive");
}

void ReplayBuffer::push(Transition t) {
    t.check();
    if (n_agents_ >= 0 && t.n_agents() != n_agents_) throw ShapeError("ReplayBuffer: agent count changed");
    n_agents_ = t.n_agents();
    if (items_.size() < capacity_) {
        items_.push_back(std::move(t));
    } else {
        items_[cursor_] = std::move(t);
    }
    cursor_ = (cursor_ + 1) % capacity_;
}

std::vector<Transition> ReplayBuffer::sample(int batch, std::uint64_t seed) const {
    if (batch < 1) throw ParameterError("ReplayBuffer::sample: batch must be >= 1");
    if (items_.empty()) throw StateError("ReplayBuffer::sample: buffer is empty");
    Rng rng(seed);
    std::vector<Transition> out;
    out.reserve(batch);
    const int n = static_cast<int>(items_.size());
    for (int i = 0; i < batch; ++i) out.push_back(items_[rng.index(n)]);
    return out;
}

Batch make_batch(const std::vector<Transition>& ts) {
    if (ts.empty()) throw ParameterError("make_batch: empty batch");
    Batch b;
    b.n_agents = ts.front().n_agents();
    b.size = static_cast<int>(ts.size());
    const int n = b.n_agents, B = b.size;
    const bool disc = !ts.front().discrete_actions.empty();
    const bool has_agent_states = !ts.front().agent_states.empty();
    for (const auto& t : ts) {
        t.check();
        if (t.n_agents() != n) throw ShapeError("make_batch: agent count differs across transitions");
    }
    auto stack = [&](auto get) {
        const Eigen::VectorXd& first = get(ts.front());
        Eigen::MatrixXd m(first.size(), B);
        for (int c = 0; c < B; ++c) {
            const Eigen::VectorXd& v = get(ts[c]);
            if (v.size() != first.size()) throw ShapeError("make_batch: ragged vectors");
            m.col(c) = v;
        }
        return m;
    };
    b.state = stack([](const Transition& t) -> const Eigen::VectorXd& { return t.state; });
    b.next_state = stack([](const Transition& t) -> const Eigen::VectorXd& { return t.next_state; });
    for (int i = 0; i < n; ++i) {
        b.obs.push_back(stack([i](const Transition& t) -> const Eigen::VectorXd& { return t.obs[i]; }));
        b.next_obs.push_back(stack([i](const Transition& t) -> const Eigen::VectorXd& { return t.next_obs[i]; }));
        if (has_agent_states) {
            b.agent_states.push_back(
                stack([i](const Transition& t) -> const Eigen::VectorXd& { return t.agent_states.at(i); }));
            b.next_agent_states.push_back(
                stack([i](const Transition& t) -> const Eigen::VectorXd& { return t.next_agent_states.at(i); }));
        }
        if (disc) {
            std::vector<int> a(B);
            for (int c = 0; c < B; ++c) a[c] = ts[c].discrete_actions.at(i);
            b.discrete.push_back(std::move(a));
        } else {
            b.actions.push_back(stack([i](const Transition& t) -> const Eigen::VectorXd& { return t.actions.at(i); }));
        }
    }
    b.rewards.resize(n, B);
    b.global_reward.resize(B);
    b.not_done.resize(B);
    for (int c = 0; c < B; ++c) {
        b.rewards.col(c) = ts[c].rewards;
        b.global_reward[c] = ts[c].global_reward;
        b.not_done[c] = ts[c].done ? 0.0 : 1.0;
    }
    return b;
}

// ---------------------------------------------------------------- regularizer hook

RegContribution ernie_contribution(const adv::PolicyNet& policy, const Eigen::MatrixXd& obs, const ErnieHook& hook,
                                   std::uint64_t seed) {
    RegContribution out;
    if (!hook.enabled) {
        out.grad = Eigen::VectorXd::Zero(policy.net.num_params());
        return out;
    }
    adv::AttackConfig cfg = hook.attack;
    cfg.seed = seed;
    adv::BatchRegTerm t;
    if (hook.kind == RegAttack::gaussian)
        t = adv::gaussian_reg_term_batch(policy, obs, hook.sigma, cfg.metric, seed, cfg.perturb_dims);
    else if (hook.stackelberg)
        t = adv::stackelberg_reg_term_batch(policy, obs, cfg);
    else
        t = adv::vanilla_reg_term_batch(policy, obs, cfg);
    out.grad = std::move(t.grad_theta);
    out.value = t.value;
    out.attack_norm = t.mean_delta_norm;
    return out;
}

namespace {

std::vector<int> layer_dims(int in, const std::vector<int>& hidden, int out) {
    std::vector<int> d{in};
    d.insert(d.end(), hidden.begin(), hidden.end());
    d.push_back(out);
    return d;
}

Eigen::MatrixXd tanh_of(const Eigen::MatrixXd& x) { return x.array().tanh().matrix(); }

void check_finite(const Eigen::VectorXd& g, const char* what) {
    if (!g.allFinite()) throw NumericError(std::string(what) + ": non-finite gradient");
}

} // namespace

// ---------------------------------------------------------------- QCOMBO

QcomboNets qcombo_init(int n_agents, int obs_dim, int state_dim, int n_actions, const std::vector<int>& hidden,
                       nn::Activation act, std::uint64_t seed) {
    if (n_agents < 1 || n_actions < 1) throw ParameterError("qcombo_init: need agents and actions");
    QcomboNets nets;
    nets.n_actions = n_actions;
    nets.state_dim = state_dim;
    for (int i = 0; i < n_agents; ++i) {
        nets.q.push_back(nn::net_init(layer_dims(obs_dim, hidden, n_actions), act,
                                      derive_seed(seed, {1, static_cast<std::uint64_t>(i)})));
    }
    nets.q_target = nets.q;
    nets.global = nn::net_init(layer_dims(state_dim + n_agents * n_actions, hidden, 1), act, derive_seed(seed, {2}));
    nets.global_target = nets.global;
    return nets;
}

Eigen::VectorXd global_q_input(const Eigen::VectorXd& state, const std::vector<int>& joint, int n_actions) {
    Eigen::VectorXd x = Eigen::VectorXd::Zero(state.size() + static_cast<Eigen::Index>(joint.size()) * n_actions);
    x.head(state.size()) = state;
    for (std::size_t i = 0; i < joint.size(); ++i) {
        if (joint[i] < 0 || joint[i] >= n_actions) throw DomainError("global_q_input: action index out of range");
        x[state.size() + static_cast<Eigen::Index>(i) * n_actions + joint[i]] = 1.0;
    }
    return x;
}

double global_q(const QcomboNets& nets, const Eigen::VectorXd& state, const std::vector<int>& joint) {
    return nets.global.forward(global_q_input(state, joint, nets.n_actions))[0];
}

namespace {

Eigen::MatrixXd global_inputs(const Eigen::MatrixXd& states, const std::vector<std::vector<int>>& per_agent,
                              int n_actions) {
    const int n = static_cast<int>(per_agent.size());
    const Eigen::Index B = states.cols();
    Eigen::MatrixXd x = Eigen::MatrixXd::Zero(states.rows() + n * n_actions, B);
    x.topRows(states.rows()) = states;
    for (int i = 0; i < n; ++i)
        for (Eigen::Index c = 0; c < B; ++c) x(states.rows() + i * n_actions + per_agent[i][c], c) = 1.0;
    return x;
}

struct QcomboCore {
    QcomboLosses losses;
    std::vector<Eigen::VectorXd> grad_q;
    Eigen::VectorXd grad_global;
    nn::Tape global_tape;
};

QcomboCore qcombo_core(const Batch& batch, const QcomboNets& nets, double gamma, double lambda_q, bool want_grads) {
    if (!batch.is_discrete()) throw DomainError("qcombo: continuous actions are not supported");
    const int n = batch.n_agents, B = batch.size, A = nets.n_actions;
    if (static_cast<int>(nets.q.size()) != n) throw ShapeError("qcombo: agent count does not match the nets");
    QcomboCore core;

    std::vector<nn::Tape> tapes(n);
    std::vector<std::vector<int>> next_greedy(n, std::vector<int>(B));
    Eigen::MatrixXd ind_diff(n, B);
    Eigen::VectorXd q_sum = Eigen::VectorXd::Zero(B);
    for (int i = 0; i < n; ++i) {
        tapes[i] = nets.q[i].forward_tape(batch.obs[i]);
        Eigen::MatrixXd next = nets.q_target[i].forward_batch(batch.next_obs[i]);
        for (int c = 0; c < B; ++c) {
            Eigen::Index best = 0;
            for (Eigen::Index a = 1; a < A; ++a)
                if (next(a, c) > next(best, c)) best = a;
            next_greedy[i][c] = static_cast<int>(best);
            double y = batch.rewards(i, c) + gamma * batch.not_done[c] * next(best, c);
            double qa = tapes[i].output(batch.discrete[i][c], c);
            ind_diff(i, c) = qa - y;
            q_sum[c] += qa;
        }
    }
    core.global_tape = nets.global.forward_tape(global_inputs(batch.state, batch.discrete, A));
    Eigen::RowVectorXd next_g =
        nets.global_target.forward_batch(global_inputs(batch.next_state, next_greedy, A)).row(0);
    Eigen::VectorXd qg = core.global_tape.output.row(0).transpose();
    Eigen::VectorXd y = batch.global_reward + gamma * batch.not_done.cwiseProduct(next_g.transpose());
    Eigen::VectorXd glob_diff = qg - y;
    Eigen::VectorXd cons = qg - q_sum;

    core.losses.ind = 0.5 * ind_diff.squaredNorm() / (n * B);
    core.losses.glob = 0.5 * glob_diff.squaredNorm() / B;
    core.losses.reg = 0.5 * cons.squaredNorm() / B;
    core.losses.total = core.losses.glob + core.losses.ind + lambda_q * core.losses.reg;
    if (!want_grads) return core;

    Eigen::MatrixXd up_g = ((glob_diff + lambda_q * cons) / B).transpose();
    core.grad_global = nets.global.backward(core.global_tape, up_g).grad_params;
    for (int i = 0; i < n; ++i) {
        Eigen::MatrixXd up = Eigen::MatrixXd::Zero(A, B);
        for (int c = 0; c < B; ++c)
            up(batch.discrete[i][c], c) = ind_diff(i, c) / (n * B) - lambda_q * cons[c] / B;
        core.grad_q.push_back(nets.q[i].backward(tapes[i], up).grad_params);
    }
    return core;
}

} // namespace

QcomboLosses qcombo_losses(const Batch& batch, const QcomboNets& nets, double gamma, double lambda_q) {
    return qcombo_core(batch, nets, gamma, lambda_q, false).losses;
}

QcomboUpdate qcombo_grads(const Batch& batch, const QcomboNets& nets, const LearnerParams& p, const ErnieHook& ernie,
                          const ErnieAHook& ernie_a, std::uint64_t seed) {
    QcomboCore core = qcombo_core(batch, nets, p.gamma, p.lambda_q, true);
    QcomboUpdate u;
    u.losses = core.losses;
    const int n = batch.n_agents, B = batch.size;

    if (ernie.enabled) {
        for (int i = 0; i < n; ++i) {
            adv::PolicyNet pol{nets.q[i], adv::Head::linear};
            RegContribution r = ernie_contribution(pol, batch.obs[i], ernie, derive_seed(seed, {10, static_cast<std::uint64_t>(i)}));
            u.reg_value += r.value / n;
            u.attack_norm += r.attack_norm / n;
            core.grad_q[i] = adv::regularized_grad(core.grad_q[i], {r.grad}, ernie.lambda);
        }
        if (ernie.regularize_global) {
            ErnieHook g = ernie;
            g.attack.perturb_dims = nets.state_dim;
            adv::PolicyNet pol{nets.global, adv::Head::linear};
            Eigen::MatrixXd x = global_inputs(batch.state, batch.discrete, nets.n_actions);
            RegContribution r = ernie_contribution(pol, x, g, derive_seed(seed, {11}));
            core.grad_global = adv::regularized_grad(core.grad_global, {r.grad}, ernie.lambda);
        }
    }

    if (ernie_a.enabled) {
        const std::vector<int> n_actions(n, nets.n_actions);
        std::vector<std::vector<int>> attacked(n, std::vector<int>(B));
        for (int c = 0; c < B; ++c) {
            Eigen::VectorXd s = batch.state.col(c);
            action::QFunction q = [&nets, &s](const std::vector<int>& joint) { return global_q(nets, s, joint); };
            std::vector<int> a(n);
            for (int i = 0; i < n; ++i) a[i] = batch.discrete[i][c];
            action::ActionAttackResult r = ernie_a.mode == action::Mode::greedy
                                               ? action::greedy_action_attack(q, n_actions, a, ernie_a.k, ernie_a.greedy)
                                               : action::brute_force_action_attack(q, n_actions, a, ernie_a.k);
            for (int i = 0; i < n; ++i) attacked[i][c] = r.perturbed[i];
        }
        nn::Tape pert = nets.global.forward_tape(global_inputs(batch.state, attacked, nets.n_actions));
        Eigen::RowVectorXd diff = core.global_tape.output.row(0) - pert.output.row(0);
        u.action_reg_value = diff.squaredNorm() / B;
        Eigen::VectorXd g = nets.global.backward(core.global_tape, 2.0 * diff / B).grad_params;
        g += nets.global.backward(pert, -2.0 * diff / B).grad_params;
        core.grad_global = adv::regularized_grad(core.grad_global, {g}, ernie_a.lambda);
    }

    for (const auto& g : core.grad_q) check_finite(g, "qcombo");
    check_finite(core.grad_global, "qcombo");
    u.grad_q = std::move(core.grad_q);
    u.grad_global = std::move(core.grad_global);
    return u;
}

void qcombo_apply(QcomboNets& nets, const QcomboUpdate& u, const LearnerParams& p) {
    nets.q_opt.resize(nets.q.size());
    for (std::size_t i = 0; i < nets.q.size(); ++i) {
        optimizer_step(nets.q[i], nets.q_opt[i], u.grad_q[i], p);
        soft_update(nets.q_target[i], nets.q[i], p.tau);
    }
    optimizer_step(nets.global, nets.global_opt, u.grad_global, p);
    soft_update(nets.global_target, nets.global, p.tau);
}

// ---------------------------------------------------------------- DDPG

DdpgNets ddpg_init(int n_agents, int obs_dim, int state_dim, int action_dim, const std::vector<int>& hidden,
                   nn::Activation act, std::uint64_t seed) {
    if (n_agents < 1 || action_dim < 1) throw ParameterError("ddpg_init: need agents and actions");
    DdpgNets nets;
    nets.action_dim = action_dim;
    nets.state_dim = state_dim;
    for (int i = 0; i < n_agents; ++i)
        nets.actor.push_back(nn::net_init(layer_dims(obs_dim, hidden, action_dim), act,
                                          derive_seed(seed, {3, static_cast<std::uint64_t>(i)})));
    nets.actor_target = nets.actor;
    nets.critic = nn::net_init(layer_dims(state_dim + n_agents * action_dim, hidden, 1), act, derive_seed(seed, {4}));
    nets.critic_target = nets.critic;
    return nets;
}

Eigen::VectorXd actor_action(const nn::Net& actor, const Eigen::VectorXd& obs) {
    return actor.forward(obs).array().tanh().matrix();
}

namespace {

Eigen::MatrixXd critic_inputs(const Eigen::MatrixXd& states, const std::vector<Eigen::MatrixXd>& actions) {
    Eigen::Index rows = states.rows();
    for (const auto& a : actions) rows += a.rows();
    Eigen::MatrixXd x(rows, states.cols());
    x.topRows(states.rows()) = states;
    Eigen::Index r = states.rows();
    for (const auto& a : actions) {
        x.middleRows(r, a.rows()) = a;
        r += a.rows();
    }
    return x;
}

} // namespace

DdpgUpdate ddpg_grads(const Batch& batch, const DdpgNets& nets, const LearnerParams& p, const ErnieHook& ernie,
                      std::uint64_t seed) {
    if (batch.is_discrete()) throw DomainError("ddpg: discrete actions are not supported");
    const int n = batch.n_agents, B = batch.size, ad = nets.action_dim;
    if (static_cast<int>(nets.actor.size()) != n) throw ShapeError("ddpg: agent count does not match the nets");
    DdpgUpdate u;

    // Critic.
    nn::Tape ctape = nets.critic.forward_tape(critic_inputs(batch.state, batch.actions));
    std::vector<Eigen::MatrixXd> next_act(n);
    for (int i = 0; i < n; ++i) next_act[i] = tanh_of(nets.actor_target[i].forward_batch(batch.next_obs[i]));
    Eigen::RowVectorXd next_q = nets.critic_target.forward_batch(critic_inputs(batch.next_state, next_act)).row(0);
    Eigen::RowVectorXd y = batch.global_reward.transpose() + p.gamma * batch.not_done.transpose().cwiseProduct(next_q);
    Eigen::RowVectorXd diff = ctape.output.row(0) - y;
    u.critic_loss = 0.5 * diff.squaredNorm() / B;
    u.grad_critic = nets.critic.backward(ctape, diff / B).grad_params;

    // Actors: ascend Q(s, mu_1(o_1), ..., mu_N(o_N)).
    std::vector<nn::Tape> atapes(n);
    std::vector<Eigen::MatrixXd> mu(n);
    for (int i = 0; i < n; ++i) {
        atapes[i] = nets.actor[i].forward_tape(batch.obs[i]);
        mu[i] = tanh_of(atapes[i].output);
    }
    nn::Tape qtape = nets.critic.forward_tape(critic_inputs(batch.state, mu));
    u.actor_loss = -qtape.output.mean();
    Eigen::MatrixXd gin =
        nets.critic.backward(qtape, Eigen::MatrixXd::Constant(1, B, -1.0 / B), false).grad_input;
    for (int i = 0; i < n; ++i) {
        Eigen::MatrixXd g_mu = gin.middleRows(nets.state_dim + i * ad, ad);
        Eigen::MatrixXd g_pre = g_mu.array() * (1.0 - mu[i].array().square());
        Eigen::VectorXd g = nets.actor[i].backward(atapes[i], g_pre).grad_params;
        if (ernie.enabled) {
            adv::PolicyNet pol{nets.actor[i], adv::Head::tanh};
            RegContribution r = ernie_contribution(pol, batch.obs[i], ernie, derive_seed(seed, {20, static_cast<std::uint64_t>(i)}));
            u.reg_value += r.value / n;
            u.attack_norm += r.attack_norm / n;
            g = adv::regularized_grad(g, {r.grad}, ernie.lambda);
        }
        check_finite(g, "ddpg actor");
        u.grad_actor.push_back(std::move(g));
    }
    check_finite(u.grad_critic, "ddpg critic");
    return u;
}

void ddpg_apply(DdpgNets& nets, const DdpgUpdate& u, const LearnerParams& p) {
    nets.actor_opt.resize(nets.actor.size());
    optimizer_step(nets.critic, nets.critic_opt, u.grad_critic, p);
    for (std::size_t i = 0; i < nets.actor.size(); ++i) optimizer_step(nets.actor[i], nets.actor_opt[i], u.grad_actor[i], p);
    soft_update(nets.critic_target, nets.critic, p.tau);
    for (std::size_t i = 0; i < nets.actor.size(); ++i) soft_update(nets.actor_target[i], nets.actor[i], p.tau);
}

// ---------------------------------------------------------------- mean-field DDPG

MfDdpgNets mf_ddpg_init(int n_agents, int obs_dim, int agent_state_dim, int action_dim, const std::vector<int>& hidden,
                        nn::Activation act, std::uint64_t seed) {
    if (n_agents < 2) throw ParameterError("mf_ddpg_init: mean-field learning needs at least two agents");
    MfDdpgNets nets;
    nets.action_dim = action_dim;
    nets.obs_dim = obs_dim;
    nets.agent_state_dim = agent_state_dim;
    const int in = mf::flat_dim(obs_dim, agent_state_dim, action_dim);
    for (int i = 0; i < n_agents; ++i) {
        const auto tag = static_cast<std::uint64_t>(i);
        nets.actor.push_back(nn::net_init(layer_dims(obs_dim, hidden, action_dim), act, derive_seed(seed, {5, tag})));
        nets.critic.push_back(nn::net_init(layer_dims(in, hidden, 1), act, derive_seed(seed, {6, tag})));
    }
    nets.actor_target = nets.actor;
    nets.critic_target = nets.critic;
    return nets;
}

mf::MeanFieldInput mf_agent_input(const Eigen::MatrixXd& obs_j, const std::vector<Eigen::MatrixXd>& agent_states,
                                  const std::vector<Eigen::MatrixXd>& actions, int j, int b) {
    const int n = static_cast<int>(agent_states.size());
    if (n < 2) throw DomainError("mf_agent_input: no neighbours");
    if (static_cast<int>(actions.size()) != n) throw ShapeError("mf_agent_input: action arity mismatch");
    mf::MeanFieldInput in;
    in.own_state = obs_j.col(b);
    in.cloud.points.resize(agent_states.front().rows(), n - 1);
    in.own_action = actions[j].col(b);
    in.avg_action = Eigen::VectorXd::Zero(actions[j].rows());
    int k = 0;
    for (int o = 0; o < n; ++o) {
        if (o == j) continue;
        in.cloud.points.col(k++) = agent_states[o].col(b);
        in.avg_action += actions[o].col(b);
    }
    in.avg_action /= (n - 1);
    return in;
}

std::vector<Eigen::VectorXd> mf_probe_actions(const Eigen::VectorXd& own_action) {
    std::vector<Eigen::VectorXd> out{own_action};
    for (Eigen::Index k = 0; k < own_action.size(); ++k) {
        out.push_back(Eigen::VectorXd::Unit(own_action.size(), k));
        out.push_back(-Eigen::VectorXd::Unit(own_action.size(), k));
    }
    return out;
}

namespace {

Eigen::MatrixXd mf_inputs(const Eigen::MatrixXd& obs_j, const std::vector<Eigen::MatrixXd>& agent_states,
                          const std::vector<Eigen::MatrixXd>& actions, int j) {
    const Eigen::Index B = obs_j.cols();
    Eigen::MatrixXd x;
    for (Eigen::Index c = 0; c < B; ++c) {
        Eigen::VectorXd f = mf::flatten(mf_agent_input(obs_j, agent_states, actions, j, static_cast<int>(c)));
        if (c == 0) x.resize(f.size(), B);
        x.col(c) = f;
    }
    return x;
}

/// Copy of `net` whose input block [offset, offset + len) is moved to the front.
nn::Net lead_block(const nn::Net& net, int offset, int len, std::vector<int>& perm) {
    const int in = net.input_dim();
    perm.clear();
    for (int k = offset; k < offset + len; ++k) perm.push_back(k);
    for (int k = 0; k < in; ++k)
        if (k < offset || k >= offset + len) perm.push_back(k);
    nn::Net out = net;
    Eigen::MatrixXd& w = out.layers()[0].weight;
    const Eigen::MatrixXd orig = net.layers()[0].weight;
    for (int p = 0; p < in; ++p) w.col(p) = orig.col(perm[p]);
    return out;
}

Eigen::VectorXd unpermute_grad(const Eigen::VectorXd& g, const nn::Net& net, const std::vector<int>& perm) {
    Eigen::VectorXd out = g;
    const Eigen::Index rows = net.layers()[0].weight.rows();
    for (std::size_t p = 0; p < perm.size(); ++p)
        out.segment(perm[p] * rows, rows) = g.segment(static_cast<Eigen::Index>(p) * rows, rows);
    return out;
}

} // namespace

MfDdpgUpdate mf_ddpg_grads(const Batch& batch, const MfDdpgNets& nets, const LearnerParams& p, const ErnieHook& ernie,
                           const MeanFieldHook& mfh, std::uint64_t seed) {
    if (batch.is_discrete()) throw DomainError("mf_ddpg: discrete actions are not supported");
    if (batch.agent_states.empty()) throw ShapeError("mf_ddpg: transitions carry no agent states");
    const int n = batch.n_agents, B = batch.size, ad = nets.action_dim;
    if (static_cast<int>(nets.actor.size()) != n) throw ShapeError("mf_ddpg: agent count does not match the nets");
    MfDdpgUpdate u;

    std::vector<Eigen::MatrixXd> next_act(n), mu(n);
    std::vector<nn::Tape> atapes(n);
    for (int i = 0; i < n; ++i) {
        next_act[i] = tanh_of(nets.actor_target[i].forward_batch(batch.next_obs[i]));
        atapes[i] = nets.actor[i].forward_tape(batch.obs[i]);
        mu[i] = tanh_of(atapes[i].output);
    }
    const int own_offset = nets.obs_dim + 2 * nets.agent_state_dim;

    for (int j = 0; j < n; ++j) {
        const auto tag = static_cast<std::uint64_t>(j);
        // Critic j.
        nn::Tape ctape = nets.critic[j].forward_tape(mf_inputs(batch.obs[j], batch.agent_states, batch.actions, j));
        Eigen::RowVectorXd next_q =
            nets.critic_target[j].forward_batch(mf_inputs(batch.next_obs[j], batch.next_agent_states, next_act, j)).row(0);
        Eigen::RowVectorXd y = batch.rewards.row(j) + p.gamma * batch.not_done.transpose().cwiseProduct(next_q);
        Eigen::RowVectorXd diff = ctape.output.row(0) - y;
        u.critic_loss += 0.5 * diff.squaredNorm() / (B * n);
        Eigen::VectorXd gc = nets.critic[j].backward(ctape, diff / (B * n)).grad_params;

        if (mfh.enabled) {
            Eigen::VectorXd reg = Eigen::VectorXd::Zero(gc.size());
            for (int c = 0; c < B; ++c) {
                mf::MeanFieldInput in = mf_agent_input(batch.obs[j], batch.agent_states, batch.actions, j, c);
                auto probes = mf_probe_actions(in.own_action);
                mf::MfAttackConfig cfg = mfh.attack;
                cfg.seed = derive_seed(seed, {30, tag, static_cast<std::uint64_t>(c)});
                mf::ParticleCloud pert = mf::mf_attack(nets.critic[j], in, probes, cfg);
                u.mf_reg_value += mf::mf_regularizer(nets.critic[j], in, pert, probes) / (B * n);
                reg += mf::mf_regularizer_grad(nets.critic[j], in, pert, probes) / B;
            }
            if (mfh.attack_avg_action) {
                std::vector<int> perm;
                const int avg_offset = own_offset + ad;
                nn::Net lead = lead_block(nets.critic[j], avg_offset, ad, perm);
                Eigen::MatrixXd x = mf_inputs(batch.obs[j], batch.agent_states, batch.actions, j);
                Eigen::MatrixXd xp(x.rows(), x.cols());
                for (std::size_t r = 0; r < perm.size(); ++r) xp.row(static_cast<Eigen::Index>(r)) = x.row(perm[r]);
                ErnieHook h;
                h.enabled = true;
                h.attack = mfh.avg_action_attack;
                h.attack.perturb_dims = ad;
                RegContribution r = ernie_contribution({lead, adv::Head::linear}, xp, h, derive_seed(seed, {31, tag}));
                reg += unpermute_grad(r.grad, nets.critic[j], perm);
            }
            gc = adv::regularized_grad(gc, {reg}, mfh.lambda);
        }
        check_finite(gc, "mf_ddpg critic");
        u.grad_critic.push_back(std::move(gc));

        // Actor j through its own critic; the neighbours' actions enter only via abar.
        nn::Tape qtape = nets.critic[j].forward_tape(mf_inputs(batch.obs[j], batch.agent_states, mu, j));
        u.actor_loss -= qtape.output.mean() / n;
        Eigen::MatrixXd gin =
            nets.critic[j].backward(qtape, Eigen::MatrixXd::Constant(1, B, -1.0 / B), false).grad_input;
        Eigen::MatrixXd g_pre = gin.middleRows(own_offset, ad).array() * (1.0 - mu[j].array().square());
        Eigen::VectorXd ga = nets.actor[j].backward(atapes[j], g_pre).grad_params;
        if (ernie.enabled) {
            RegContribution r = ernie_contribution({nets.actor[j], adv::Head::tanh}, batch.obs[j], ernie,
                                                   derive_seed(seed, {20, tag}));
            u.reg_value += r.value / n;
            u.attack_norm += r.attack_norm / n;
            ga = adv::regularized_grad(ga, {r.grad}, ernie.lambda);
        }
        check_finite(ga, "mf_ddpg actor");
        u.grad_actor.push_back(std::move(ga));
    }
    return u;
}

void mf_ddpg_apply(MfDdpgNets& nets, const MfDdpgUpdate& u, const LearnerParams& p) {
    nets.actor_opt.resize(nets.actor.size());
    nets.critic_opt.resize(nets.critic.size());
    for (std::size_t i = 0; i < nets.actor.size(); ++i) {
        optimizer_step(nets.critic[i], nets.critic_opt[i], u.grad_critic[i], p);
        optimizer_step(nets.actor[i], nets.actor_opt[i], u.grad_actor[i], p);
        soft_update(nets.critic_target[i], nets.critic[i], p.tau);
        soft_update(nets.actor_target[i], nets.actor[i], p.tau);
    }
}

// ---------------------------------------------------------------- shared pieces

void soft_update(nn::Net& target, const nn::Net& online, double tau) {
    if (!(tau >= 0.0 && tau <= 1.0)) throw ParameterError("soft_update: tau must lie in [0, 1]");
    if (target.layer_dims() != online.layer_dims()) throw ShapeError("soft_update: target and online shapes differ");
    if (tau == 0.0) return;
    for (std::size_t l = 0; l < target.layers().size(); ++l) {
        auto& t = target.layers()[l];
        const auto& o = online.layers()[l];
        if (tau == 1.0) {
            t = o;
            continue;
        }
        t.weight = (1.0 - tau) * t.weight + tau * o.weight;
        t.bias = (1.0 - tau) * t.bias + tau * o.bias;
    }
}

void sgd_step(nn::Net& net, const Eigen::VectorXd& grad, double lr) {
    if (grad.size() != net.num_params()) throw ShapeError("sgd_step: gradient size mismatch");
    net.add_scaled(grad, -lr);
}

void adam_step(nn::Net& net, AdamState& state, const Eigen::VectorXd& grad, const LearnerParams& p) {
    if (grad.size() != net.num_params()) throw ShapeError("adam_step: gradient size mismatch");
    if (!(p.adam_beta1 >= 0.0 && p.adam_beta1 < 1.0 && p.adam_beta2 >= 0.0 && p.adam_beta2 < 1.0 && p.adam_eps > 0.0))
        throw ParameterError("adam_step: need beta1, beta2 in [0, 1) and eps > 0");
    if (state.m.size() != grad.size()) {
        state.m = Eigen::VectorXd::Zero(grad.size());
        state.v = Eigen::VectorXd::Zero(grad.size());
        state.t = 0;
    }
    ++state.t;
    state.m = p.adam_beta1 * state.m + (1.0 - p.adam_beta1) * grad;
    state.v = p.adam_beta2 * state.v + (1.0 - p.adam_beta2) * grad.cwiseProduct(grad);
    const double c1 = 1.0 - std::pow(p.adam_beta1, static_cast<double>(state.t));
    const double c2 = 1.0 - std::pow(p.adam_beta2, static_cast<double>(state.t));
    Eigen::VectorXd step = (state.m / c1).array() / ((state.v / c2).array().sqrt() + p.adam_eps);
    net.add_scaled(step, -p.lr);
}

void optimizer_step(nn::Net& net, AdamState& state, const Eigen::VectorXd& grad, const LearnerParams& p) {
    if (p.optimizer == Optimizer::adam)
        adam_step(net, state, grad, p);
    else
        sgd_step(net, grad, p.lr);
}

Optimizer optimizer_from_string(const std::string& s) {
    if (s == "sgd") return Optimizer::sgd;
    if (s == "adam") return Optimizer::adam;
    throw ParameterError("unknown optimizer '" + s + "'");
}

std::string to_string(Optimizer o) { return o == Optimizer::adam ? "adam" : "sgd"; }

int select_discrete(const nn::Net& q, const Eigen::VectorXd& obs, double rate, std::uint64_t seed) {
    if (!(rate >= 0.0 && rate <= 1.0)) throw ParameterError("select_discrete: rate must lie in [0, 1]");
    Rng rng(seed);
    const int A = q.output_dim();
    if (rng.uniform() < rate) return rng.index(A);
    Eigen::VectorXd v = q.forward(obs);
    int best = 0;
    for (int a = 1; a < A; ++a)
        if (v[a] > v[best]) best = a;
    return best;
}

Eigen::VectorXd select_continuous(const nn::Net& actor, const Eigen::VectorXd& obs, double noise, std::uint64_t seed) {
    if (!(noise >= 0.0)) throw ParameterError("select_continuous: noise must be >= 0");
    Eigen::VectorXd a = actor_action(actor, obs);
    if (noise == 0.0) return a;
    Rng rng(seed);
    a += noise * rng.normal_vector(a.size());
    return a.cwiseMax(-1.0).cwiseMin(1.0);
}

double exploration_rate(long step, long total_steps, double final_rate, double fraction) {
    const double horizon = fraction * static_cast<double>(total_steps);
    if (horizon <= 0.0 || step >= horizon) return final_rate;
    return 1.0 + (final_rate - 1.0) * static_cast<double>(step) / horizon;
}

} // namespace ernie::marl
