#include "ernie/trainer.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>

#include "ernie/errors.hpp"
#include "ernie/rng.hpp"

namespace ernie::train {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------- metrics rows

std::string format_double(double v) {
    if (std::isnan(v)) return "nan";
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

std::string metrics_header() {
    return "step,seed,episodic_return_mean,episodic_return_std,loss_total,loss_ind,loss_glob,loss_reg,"
           "loss_critic,loss_actor,reg_value_mean,attack_norm_mean,action_reg_mean,mf_reg_mean";
}

std::string format_metrics_row(const MetricsRow& r) {
    std::string s = std::to_string(r.step) + "," + std::to_string(r.seed);
    for (double v : {r.episodic_return_mean, r.episodic_return_std, r.loss_total, r.loss_ind, r.loss_glob, r.loss_reg,
                     r.loss_critic, r.loss_actor, r.reg_value_mean, r.attack_norm_mean, r.action_reg_mean,
                     r.mf_reg_mean})
        s += "," + format_double(v);
    return s;
}

MetricsRow parse_metrics_row(const std::string& line) {
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string item;
    while (std::getline(ss, item, ',')) f.push_back(item);
    if (f.size() != 14) throw ParameterError("metrics row: expected 14 fields, got " + std::to_string(f.size()));
    auto num = [](const std::string& s) {
        if (s == "nan") return std::numeric_limits<double>::quiet_NaN();
        if (s == "inf") return std::numeric_limits<double>::infinity();
        if (s == "-inf") return -std::numeric_limits<double>::infinity();
        double v = 0.0;
        auto res = std::from_chars(s.data(), s.data() + s.size(), v);
        if (res.ec != std::errc() || res.ptr != s.data() + s.size()) throw ParameterError("metrics row: bad number " + s);
        return v;
    };
    MetricsRow r;
    r.step = std::stol(f[0]);
    r.seed = std::stoull(f[1]);
    double* dst[] = {&r.episodic_return_mean, &r.episodic_return_std, &r.loss_total, &r.loss_ind,
                     &r.loss_glob,           &r.loss_reg,           &r.loss_critic, &r.loss_actor,
                     &r.reg_value_mean,      &r.attack_norm_mean,   &r.action_reg_mean, &r.mf_reg_mean};
    for (int k = 0; k < 12; ++k) *dst[k] = num(f[2 + k]);
    return r;
}

// ---------------------------------------------------------------- agents

env::JointAct Agents::act(const env::Obs& obs) const {
    env::JointAct a;
    switch (algo) {
    case cfg::Algo::qcombo:
        for (std::size_t i = 0; i < obs.size(); ++i) {
            Eigen::VectorXd q = qcombo.q[i].forward(obs[i]);
            Eigen::Index best = 0;
            for (Eigen::Index k = 1; k < q.size(); ++k)
                if (q[k] > q[best]) best = k;
            a.discrete.push_back(static_cast<int>(best));
        }
        break;
    case cfg::Algo::ddpg:
        for (std::size_t i = 0; i < obs.size(); ++i) a.continuous.push_back(marl::actor_action(ddpg.actor[i], obs[i]));
        break;
    case cfg::Algo::mf_ddpg:
        for (std::size_t i = 0; i < obs.size(); ++i) a.continuous.push_back(marl::actor_action(mf.actor[i], obs[i]));
        break;
    }
    return a;
}

env::GlobalQFn Agents::global_q() const {
    if (algo != cfg::Algo::qcombo) return {};
    const marl::QcomboNets* nets = &qcombo;
    return [nets](const Eigen::VectorXd& s, const std::vector<int>& joint) { return marl::global_q(*nets, s, joint); };
}

std::unique_ptr<env::MultiAgentEnv> make_env(const cfg::ExperimentConfig& c) {
    if (c.env == cfg::EnvKind::coopnav) return std::make_unique<env::CoopNavEnv>(c.n_agents, c.episode_length());
    env::GridQParams p;
    p.rows = c.grid_rows;
    p.cols = c.grid_cols;
    p.exit_fraction = c.gridq_exit_fraction;
    return std::make_unique<env::GridQEnv>(p, c.episode_length());
}

Agents init_agents(const cfg::ExperimentConfig& c, const env::MultiAgentEnv& e, std::uint64_t seed) {
    Agents a;
    a.algo = c.algo;
    const auto& t = c.train;
    switch (c.algo) {
    case cfg::Algo::qcombo:
        a.qcombo = marl::qcombo_init(e.n_agents(), e.obs_dim(), e.state_dim(), e.n_actions(), t.hidden, t.activation, seed);
        break;
    case cfg::Algo::ddpg:
        a.ddpg = marl::ddpg_init(e.n_agents(), e.obs_dim(), e.state_dim(), e.action_dim(), t.hidden, t.activation, seed);
        break;
    case cfg::Algo::mf_ddpg:
        a.mf = marl::mf_ddpg_init(e.n_agents(), e.obs_dim(), e.agent_state_dim(), e.action_dim(), t.hidden,
                                  t.activation, seed);
        break;
    }
    return a;
}

// ---------------------------------------------------------------- checkpoints

namespace {

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path.string());
    out << text;
    if (!out) throw IoError("write failed: " + path.string());
}

json read_json(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path.string());
    try {
        return json::parse(in);
    } catch (const json::parse_error& e) {
        throw IoError("cannot parse " + path.string() + ": " + e.what());
    }
}

std::vector<std::pair<std::string, const nn::Net*>> named_nets(const Agents& a) {
    std::vector<std::pair<std::string, const nn::Net*>> out;
    auto add_all = [&out](const std::string& name, const std::vector<nn::Net>& nets) {
        for (std::size_t i = 0; i < nets.size(); ++i) out.emplace_back(name + "_" + std::to_string(i), &nets[i]);
    };
    switch (a.algo) {
    case cfg::Algo::qcombo:
        add_all("q", a.qcombo.q);
        add_all("q_target", a.qcombo.q_target);
        out.emplace_back("global", &a.qcombo.global);
        out.emplace_back("global_target", &a.qcombo.global_target);
        break;
    case cfg::Algo::ddpg:
        add_all("actor", a.ddpg.actor);
        add_all("actor_target", a.ddpg.actor_target);
        out.emplace_back("critic", &a.ddpg.critic);
        out.emplace_back("critic_target", &a.ddpg.critic_target);
        break;
    case cfg::Algo::mf_ddpg:
        add_all("actor", a.mf.actor);
        add_all("actor_target", a.mf.actor_target);
        add_all("critic", a.mf.critic);
        add_all("critic_target", a.mf.critic_target);
        break;
    }
    return out;
}

} // namespace

void save_checkpoint(const Agents& a, const cfg::ExperimentConfig& c, std::uint64_t seed, long step,
                     const std::string& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create " + dir + ": " + ec.message());
    auto e = make_env(c);
    json m;
    m["format"] = kCheckpointFormat;
    m["metrics_format"] = kMetricsFormat;
    m["algo"] = cfg::to_string(c.algo);
    m["env"] = cfg::to_string(c.env);
    m["n_agents"] = c.n_agents;
    m["obs_dim"] = e->obs_dim();
    m["state_dim"] = e->state_dim();
    m["n_actions"] = e->n_actions();
    m["action_dim"] = e->action_dim();
    m["seed"] = seed;
    m["step"] = step;
    json nets = json::object();
    for (const auto& [name, net] : named_nets(a)) {
        const std::string file = name + ".json";
        write_text(fs::path(dir) / file, nn::to_json(*net).dump() + "\n");
        nets[name] = file;
    }
    m["nets"] = nets;
    m["config"] = cfg::to_json(c);
    write_text(fs::path(dir) / "manifest.json", m.dump(2) + "\n");
}

Checkpoint load_checkpoint(const std::string& path) {
    fs::path p(path);
    fs::path manifest = fs::is_directory(p) ? p / "manifest.json" : p;
    Checkpoint ck;
    ck.manifest = read_json(manifest);
    const fs::path dir = manifest.parent_path();
    if (ck.manifest.value("format", "") != kCheckpointFormat)
        throw ConfigError("unsupported checkpoint format in " + manifest.string());
    const std::string algo = ck.manifest.at("algo").get<std::string>();
    const int n = ck.manifest.at("n_agents").get<int>();
    const json& nets = ck.manifest.at("nets");
    auto load = [&](const std::string& name) {
        if (!nets.contains(name)) throw ConfigError("checkpoint lacks net " + name);
        return nn::net_from_json(read_json(dir / nets.at(name).get<std::string>()));
    };
    auto load_all = [&](const std::string& name) {
        std::vector<nn::Net> out;
        for (int i = 0; i < n; ++i) out.push_back(load(name + "_" + std::to_string(i)));
        return out;
    };
    Agents& a = ck.agents;
    if (algo == "qcombo") {
        a.algo = cfg::Algo::qcombo;
        a.qcombo.q = load_all("q");
        a.qcombo.q_target = load_all("q_target");
        a.qcombo.global = load("global");
        a.qcombo.global_target = load("global_target");
        a.qcombo.n_actions = ck.manifest.at("n_actions").get<int>();
        a.qcombo.state_dim = ck.manifest.at("state_dim").get<int>();
    } else if (algo == "ddpg") {
        a.algo = cfg::Algo::ddpg;
        a.ddpg.actor = load_all("actor");
        a.ddpg.actor_target = load_all("actor_target");
        a.ddpg.critic = load("critic");
        a.ddpg.critic_target = load("critic_target");
        a.ddpg.action_dim = ck.manifest.at("action_dim").get<int>();
        a.ddpg.state_dim = ck.manifest.at("state_dim").get<int>();
    } else if (algo == "mf_ddpg") {
        a.algo = cfg::Algo::mf_ddpg;
        a.mf.actor = load_all("actor");
        a.mf.actor_target = load_all("actor_target");
        a.mf.critic = load_all("critic");
        a.mf.critic_target = load_all("critic_target");
        a.mf.action_dim = ck.manifest.at("action_dim").get<int>();
        a.mf.obs_dim = ck.manifest.at("obs_dim").get<int>();
        a.mf.agent_state_dim = a.mf.critic.front().input_dim() - a.mf.obs_dim - 2 * a.mf.action_dim;
        a.mf.agent_state_dim /= 2;
    } else {
        throw ConfigError("checkpoint has unknown algo " + algo);
    }
    return ck;
}

void check_compatible(const cfg::ExperimentConfig& c, const Checkpoint& ck) {
    const json& m = ck.manifest;
    auto e = make_env(c);
    auto mismatch = [](const std::string& what) { throw ConfigError("checkpoint/config mismatch: " + what); };
    if (m.at("algo").get<std::string>() != cfg::to_string(c.algo)) mismatch("algo");
    if (m.at("env").get<std::string>() != cfg::to_string(c.env)) mismatch("env");
    if (m.at("n_agents").get<int>() != c.n_agents) mismatch("n_agents");
    if (m.at("obs_dim").get<int>() != e->obs_dim()) mismatch("obs_dim");
    if (m.at("state_dim").get<int>() != e->state_dim()) mismatch("state_dim");
}

// ---------------------------------------------------------------- training

namespace {

struct Interval {
    std::vector<double> returns;
    int updates = 0;
    MetricsRow sums;

    void add(const MetricsRow& r) {
        ++updates;
        sums.loss_total += r.loss_total;
        sums.loss_ind += r.loss_ind;
        sums.loss_glob += r.loss_glob;
        sums.loss_reg += r.loss_reg;
        sums.loss_critic += r.loss_critic;
        sums.loss_actor += r.loss_actor;
        sums.reg_value_mean += r.reg_value_mean;
        sums.attack_norm_mean += r.attack_norm_mean;
        sums.action_reg_mean += r.action_reg_mean;
        sums.mf_reg_mean += r.mf_reg_mean;
    }

    MetricsRow row(long step, std::uint64_t seed) const {
        const double nan = std::numeric_limits<double>::quiet_NaN();
        MetricsRow r;
        r.step = step;
        r.seed = seed;
        if (returns.empty()) {
            r.episodic_return_mean = r.episodic_return_std = nan;
        } else {
            double mean = 0.0;
            for (double v : returns) mean += v;
            mean /= static_cast<double>(returns.size());
            double var = 0.0;
            for (double v : returns) var += (v - mean) * (v - mean);
            r.episodic_return_mean = mean;
            r.episodic_return_std = std::sqrt(var / static_cast<double>(returns.size()));
        }
        double* dst[] = {&r.loss_total,     &r.loss_ind,         &r.loss_glob,       &r.loss_reg,   &r.loss_critic,
                         &r.loss_actor,     &r.reg_value_mean,   &r.attack_norm_mean, &r.action_reg_mean,
                         &r.mf_reg_mean};
        const double* src[] = {&sums.loss_total,     &sums.loss_ind,          &sums.loss_glob,
                               &sums.loss_reg,       &sums.loss_critic,       &sums.loss_actor,
                               &sums.reg_value_mean, &sums.attack_norm_mean,  &sums.action_reg_mean,
                               &sums.mf_reg_mean};
        for (int k = 0; k < 10; ++k) *dst[k] = updates > 0 ? *src[k] / updates : nan;
        return r;
    }
};

marl::ErnieHook ernie_hook(const cfg::ExperimentConfig& c) {
    marl::ErnieHook h;
    const auto& e = c.ernie;
    h.enabled = e.enabled;
    h.stackelberg = e.stackelberg;
    h.lambda = e.lambda;
    h.kind = e.attack == "gaussian" ? marl::RegAttack::gaussian : marl::RegAttack::pgd;
    h.sigma = e.sigma;
    h.regularize_global = e.regularize_global;
    h.attack.epsilon = e.epsilon;
    h.attack.k_steps = e.k_steps;
    h.attack.eta = e.eta;
    h.attack.metric = e.metric;
    h.attack.norm = e.norm;
    h.attack.init_fraction = e.init_fraction;
    return h;
}

marl::ErnieAHook ernie_a_hook(const cfg::ExperimentConfig& c) {
    marl::ErnieAHook h;
    h.enabled = c.ernie_a.enabled;
    h.k = c.ernie_a.k;
    h.mode = c.ernie_a.mode;
    h.lambda = c.ernie_a.lambda;
    h.greedy.restart_each_round = c.ernie_a.restart_each_round;
    return h;
}

marl::MeanFieldHook mf_hook(const cfg::ExperimentConfig& c) {
    marl::MeanFieldHook h;
    h.enabled = c.meanfield.enabled;
    h.lambda = c.meanfield.lambda;
    h.attack.lambda_w = c.meanfield.lambda_w;
    h.attack.steps = c.meanfield.steps;
    h.attack.eta = c.meanfield.eta;
    h.attack_avg_action = c.meanfield.attack_avg_action;
    h.avg_action_attack = ernie_hook(c).attack;
    return h;
}

MetricsRow update_once(Agents& a, const cfg::ExperimentConfig& c, const marl::Batch& batch, std::uint64_t seed) {
    marl::LearnerParams p;
    p.gamma = c.train.gamma;
    p.tau = c.train.tau;
    p.lr = c.train.lr;
    p.lambda_q = c.train.lambda_q;
    p.optimizer = c.train.optimizer;
    MetricsRow r;
    switch (c.algo) {
    case cfg::Algo::qcombo: {
        auto u = marl::qcombo_grads(batch, a.qcombo, p, ernie_hook(c), ernie_a_hook(c), seed);
        marl::qcombo_apply(a.qcombo, u, p);
        r.loss_total = u.losses.total;
        r.loss_ind = u.losses.ind;
        r.loss_glob = u.losses.glob;
        r.loss_reg = u.losses.reg;
        r.reg_value_mean = u.reg_value;
        r.attack_norm_mean = u.attack_norm;
        r.action_reg_mean = c.ernie_a.lambda * u.action_reg_value;
        break;
    }
    case cfg::Algo::ddpg: {
        auto u = marl::ddpg_grads(batch, a.ddpg, p, ernie_hook(c), seed);
        marl::ddpg_apply(a.ddpg, u, p);
        r.loss_total = u.critic_loss + u.actor_loss;
        r.loss_critic = u.critic_loss;
        r.loss_actor = u.actor_loss;
        r.reg_value_mean = u.reg_value;
        r.attack_norm_mean = u.attack_norm;
        break;
    }
    case cfg::Algo::mf_ddpg: {
        auto u = marl::mf_ddpg_grads(batch, a.mf, p, ernie_hook(c), mf_hook(c), seed);
        marl::mf_ddpg_apply(a.mf, u, p);
        r.loss_total = u.critic_loss + u.actor_loss;
        r.loss_critic = u.critic_loss;
        r.loss_actor = u.actor_loss;
        r.reg_value_mean = u.reg_value;
        r.attack_norm_mean = u.attack_norm;
        r.mf_reg_mean = c.meanfield.lambda * u.mf_reg_value;
        break;
    }
    }
    return r;
}

class CsvOut {
public:
    CsvOut() = default;
    CsvOut(const fs::path& path, const std::string& header) : path_(path), out_(path, std::ios::binary) {
        if (!out_) throw IoError("cannot write " + path.string());
        line(header);
    }
    void line(const std::string& s) {
        if (!out_.is_open()) return;
        out_ << s << '\n';
        out_.flush();
        if (!out_) throw IoError("write failed: " + path_.string());
    }

private:
    fs::path path_;
    std::ofstream out_;
};

} // namespace

RunResult train_run(const cfg::ExperimentConfig& c, std::uint64_t seed, const RunOptions& opts) {
    c.validate();
    const auto t0 = std::chrono::steady_clock::now();
    auto e = make_env(c);
    RunResult res;
    res.agents = init_agents(c, *e, derive_seed(seed, {100}));
    Agents& agents = res.agents;

    CsvOut metrics, timing;
    fs::path ckpt_root;
    if (!opts.out_dir.empty()) {
        std::error_code ec;
        fs::create_directories(opts.out_dir, ec);
        if (ec) throw IoError("cannot create " + opts.out_dir + ": " + ec.message());
        metrics = CsvOut(fs::path(opts.out_dir) / "metrics.csv", metrics_header());
        timing = CsvOut(fs::path(opts.out_dir) / "timing.csv", "step,wall_ms");
        ckpt_root = fs::path(opts.out_dir) / "checkpoints";
    }
    const long total = c.train_steps;
    const long ckpt_every = std::max(1L, total / 10);
    auto checkpoint = [&](long step) {
        if (opts.out_dir.empty() || !opts.write_checkpoints) return;
        save_checkpoint(agents, c, seed, step, (ckpt_root / ("step_" + std::to_string(step))).string());
    };
    checkpoint(0);

    marl::ReplayBuffer buffer(static_cast<std::size_t>(c.train.replay_capacity));
    const bool disc = e->discrete();
    const bool want_agent_states = c.algo == cfg::Algo::mf_ddpg;
    const double scale = c.train.reward_scale;
    const int n = e->n_agents();
    long episode = 0;
    env::Obs obs = e->reset(derive_seed(seed, {200, 0}));
    double ep_return = 0.0;
    Interval interval;
    const long start_updates = std::max<long>(c.train.warmup, c.train.batch);

    for (long step = 1; step <= total; ++step) {
        const auto us = static_cast<std::uint64_t>(step);
        env::JointAct a;
        if (disc) {
            const double rate = marl::exploration_rate(step - 1, total, c.train.explore_final, c.train.explore_fraction);
            for (int i = 0; i < n; ++i)
                a.discrete.push_back(marl::select_discrete(agents.qcombo.q[i], obs[i], rate,
                                                           derive_seed(seed, {300, us, static_cast<std::uint64_t>(i)})));
        } else {
            const auto& actors = c.algo == cfg::Algo::ddpg ? agents.ddpg.actor : agents.mf.actor;
            for (int i = 0; i < n; ++i)
                a.continuous.push_back(marl::select_continuous(actors[i], obs[i], c.train.actor_noise,
                                                               derive_seed(seed, {300, us, static_cast<std::uint64_t>(i)})));
        }
        marl::Transition tr;
        tr.obs = obs;
        tr.state = e->global_state();
        if (want_agent_states) tr.agent_states = e->agent_states();
        env::StepResult r = e->step(a, 1.0);
        tr.next_obs = r.obs;
        tr.next_state = e->global_state();
        if (want_agent_states) tr.next_agent_states = e->agent_states();
        tr.discrete_actions = a.discrete;
        tr.actions = a.continuous;
        tr.rewards = r.rewards * scale;
        tr.global_reward = r.global_reward * scale;
        tr.done = false;
        buffer.push(std::move(tr));
        ep_return += r.global_reward;
        obs = std::move(r.obs);
        if (r.truncated) {
            interval.returns.push_back(ep_return);
            res.episode_returns.push_back(ep_return);
            ep_return = 0.0;
            ++episode;
            obs = e->reset(derive_seed(seed, {200, static_cast<std::uint64_t>(episode)}));
        }

        if (static_cast<long>(buffer.size()) >= start_updates && step % c.train.update_every == 0) {
            marl::Batch batch = marl::make_batch(buffer.sample(c.train.batch, derive_seed(seed, {400, us})));
            MetricsRow u = update_once(agents, c, batch, derive_seed(seed, {500, us}));
            interval.add(u);
            if (opts.on_update) opts.on_update(step, u);
        }

        if (step % c.train.log_every == 0) {
            MetricsRow row = interval.row(step, seed);
            row.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
            metrics.line(format_metrics_row(row));
            timing.line(std::to_string(step) + "," + format_double(row.wall_ms));
            res.rows.push_back(row);
            interval = Interval{};
        }
        if (step % ckpt_every == 0 || step == total) checkpoint(step);
    }
    return res;
}

std::vector<RunResult> cmd_train(const cfg::ExperimentConfig& c, const std::string& out_dir) {
    cfg::echo_config(c, out_dir);
    std::vector<RunResult> out;
    for (std::uint64_t s : c.seeds) {
        RunOptions o;
        o.out_dir = (fs::path(out_dir) / ("seed_" + std::to_string(s))).string();
        out.push_back(train_run(c, s, o));
    }
    return out;
}

// ---------------------------------------------------------------- evaluation

std::vector<env::PerturbSpec> eval_sweep(const cfg::ExperimentConfig& c) {
    std::vector<env::PerturbSpec> out;
    std::vector<double> sig = c.eval.sigmas, dyn = c.eval.dynamics_scales, mal = c.eval.malicious_rates;
    std::sort(sig.begin(), sig.end());
    std::sort(dyn.begin(), dyn.end());
    std::sort(mal.begin(), mal.end());
    for (double s : sig) {
        env::PerturbSpec p;
        p.obs_noise_sigma = s;
        out.push_back(p);
    }
    for (double d : dyn) {
        if (d == 1.0) continue;
        env::PerturbSpec p;
        p.dynamics_scale = d;
        out.push_back(p);
    }
    if (c.discrete()) {
        for (double r : mal) {
            if (r == 0.0) continue;
            env::PerturbSpec p;
            p.malicious_rate = r;
            p.malicious_mode = c.eval.malicious_mode;
            out.push_back(p);
        }
    }
    return out;
}

std::vector<EvalRow> evaluate_agents(const Agents& a, const cfg::ExperimentConfig& c,
                                     const std::vector<env::PerturbSpec>& specs, int episodes, std::uint64_t seed) {
    if (episodes < 1) throw ParameterError("evaluate_agents: episodes must be >= 1");
    auto e = make_env(c);
    env::PolicyFn policy = [&a](const env::Obs& o) { return a.act(o); };
    env::GlobalQFn q = a.global_q();
    std::vector<EvalRow> rows;
    for (const auto& spec : specs) {
        for (int ep = 0; ep < episodes; ++ep) {
            auto r = env::rollout(*e, policy, c.episode_length(), spec, derive_seed(seed, {static_cast<std::uint64_t>(ep)}), q);
            rows.push_back({spec, ep, r.global_return});
        }
    }
    return rows;
}

double percentile(std::vector<double> v, double q) {
    if (v.empty()) throw ParameterError("percentile: empty sample");
    std::sort(v.begin(), v.end());
    const double pos = q * static_cast<double>(v.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, v.size() - 1);
    return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

std::vector<EvalSummary> summarize(const std::vector<EvalRow>& rows) {
    std::vector<EvalSummary> out;
    std::size_t i = 0;
    while (i < rows.size()) {
        std::size_t j = i;
        std::vector<double> v;
        auto same = [&](const env::PerturbSpec& a, const env::PerturbSpec& b) {
            return a.obs_noise_sigma == b.obs_noise_sigma && a.dynamics_scale == b.dynamics_scale &&
                   a.malicious_rate == b.malicious_rate && a.malicious_mode == b.malicious_mode;
        };
        while (j < rows.size() && same(rows[j].spec, rows[i].spec)) v.push_back(rows[j++].ret);
        EvalSummary s;
        s.spec = rows[i].spec;
        s.episodes = static_cast<int>(v.size());
        double mean = 0.0;
        for (double x : v) mean += x;
        mean /= static_cast<double>(v.size());
        double var = 0.0;
        for (double x : v) var += (x - mean) * (x - mean);
        s.mean = mean;
        s.std = std::sqrt(var / static_cast<double>(v.size()));
        s.p10 = percentile(v, 0.1);
        s.p50 = percentile(v, 0.5);
        s.p90 = percentile(v, 0.9);
        out.push_back(s);
        i = j;
    }
    return out;
}

std::vector<EvalSummary> cmd_evaluate(const cfg::ExperimentConfig& c, const std::string& checkpoint,
                                      const std::string& out_dir) {
    Checkpoint ck = load_checkpoint(checkpoint);
    check_compatible(c, ck);
    auto specs = eval_sweep(c);
    auto rows = evaluate_agents(ck.agents, c, specs, c.eval.episodes, c.eval.seed);
    auto summary = summarize(rows);

    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec) throw IoError("cannot create " + out_dir + ": " + ec.message());
    auto spec_cols = [](const env::PerturbSpec& s) {
        return format_double(s.obs_noise_sigma) + "," + format_double(s.dynamics_scale) + "," +
               format_double(s.malicious_rate) + "," + env::to_string(s.malicious_mode);
    };
    std::string results = "obs_noise_sigma,dynamics_scale,malicious_rate,malicious_mode,episode,return\n";
    for (const auto& r : rows) results += spec_cols(r.spec) + "," + std::to_string(r.episode) + "," + format_double(r.ret) + "\n";
    write_text(fs::path(out_dir) / "results.csv", results);
    std::string sum = "obs_noise_sigma,dynamics_scale,malicious_rate,malicious_mode,episodes,mean,std,p10,p50,p90\n";
    for (const auto& s : summary)
        sum += spec_cols(s.spec) + "," + std::to_string(s.episodes) + "," + format_double(s.mean) + "," +
               format_double(s.std) + "," + format_double(s.p10) + "," + format_double(s.p50) + "," +
               format_double(s.p90) + "\n";
    write_text(fs::path(out_dir) / "summary.csv", sum);
    return summary;
}

} // namespace ernie::train
