#include "ernie/config.hpp"

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "ernie/errors.hpp"

namespace ernie::cfg {

using nlohmann::json;

std::string to_string(Algo a) {
    switch (a) {
    case Algo::qcombo: return "qcombo";
    case Algo::ddpg: return "ddpg";
    case Algo::mf_ddpg: return "mf_ddpg";
    }
    return "?";
}

std::string to_string(EnvKind e) { return e == EnvKind::coopnav ? "coopnav" : "gridq"; }

namespace {

Algo algo_from_string(const std::string& s) {
    if (s == "qcombo") return Algo::qcombo;
    if (s == "ddpg") return Algo::ddpg;
    if (s == "mf_ddpg") return Algo::mf_ddpg;
    throw ConfigError("unknown algo: " + s);
}

EnvKind env_from_string(const std::string& s) {
    if (s == "coopnav") return EnvKind::coopnav;
    if (s == "gridq") return EnvKind::gridq;
    throw ConfigError("unknown env: " + s);
}

/// Reads keys out of one JSON object and remembers which ones were used.
class Section {
public:
    Section(const json& j, std::string path, bool strict) : j_(j), path_(std::move(path)), strict_(strict) {
        if (!j_.is_object()) throw ConfigError(where() + " must be an object");
    }

    bool has(const std::string& key) const { return j_.contains(key); }

    template <class T>
    void get(const std::string& key, T& out) {
        used_.insert(key);
        if (!j_.contains(key) || j_.at(key).is_null()) return;
        try {
            out = j_.at(key).get<T>();
        } catch (const json::exception& e) {
            throw ConfigError(where() + "." + key + ": " + e.what());
        }
    }

    template <class T, class F>
    void get_as(const std::string& key, T& out, F convert) {
        std::string s;
        get(key, s);
        if (!s.empty()) {
            try {
                out = convert(s);
            } catch (const Error& e) {
                throw ConfigError(where() + "." + key + ": " + e.what());
            }
        }
    }

    Section child(const std::string& key) {
        used_.insert(key);
        static const json empty = json::object();
        const json& c = j_.contains(key) && !j_.at(key).is_null() ? j_.at(key) : empty;
        return Section(c, path_ + "." + key, strict_);
    }

    void finish() const {
        if (!strict_) return;
        for (auto it = j_.begin(); it != j_.end(); ++it)
            if (!used_.count(it.key())) throw ConfigError("unknown key " + where() + "." + it.key());
    }

private:
    std::string where() const { return path_; }

    const json& j_;
    std::string path_;
    bool strict_;
    std::set<std::string> used_;
};

void require(bool ok, const std::string& msg) {
    if (!ok) throw ConfigError(msg);
}

} // namespace

int ExperimentConfig::episode_length() const {
    if (train.episode_length > 0) return train.episode_length;
    return env == EnvKind::coopnav ? 50 : 100;
}

void ExperimentConfig::validate() const {
    if (algo == Algo::qcombo) require(env == EnvKind::gridq, "qcombo needs a discrete-action env (gridq)");
    else require(env == EnvKind::coopnav, to_string(algo) + " needs a continuous-action env (coopnav)");
    if (ernie_a.enabled) require(algo == Algo::qcombo, "ernie_a needs discrete actions (qcombo on gridq)");
    if (meanfield.enabled) require(algo == Algo::mf_ddpg, "meanfield regularizer needs algo mf_ddpg");
    if (algo == Algo::mf_ddpg) require(n_agents >= 2, "mf_ddpg needs at least two agents");
    require(n_agents >= 1, "n_agents must be >= 1");
    if (env == EnvKind::gridq) {
        require(grid_rows >= 1 && grid_cols >= 1, "grid dimensions must be positive");
        require(n_agents == grid_rows * grid_cols, "gridq n_agents must equal rows * cols");
        require(gridq_exit_fraction >= 0.0 && gridq_exit_fraction <= 1.0, "gridq exit_fraction must lie in [0, 1]");
    }
    require(!seeds.empty(), "seeds must be non-empty");
    require(train_steps >= 0, "train_steps must be >= 0");

    const auto& t = train;
    require(t.gamma > 0.0 && t.gamma < 1.0, "train.gamma must lie in (0, 1)");
    require(t.tau >= 0.0 && t.tau <= 1.0, "train.tau must lie in [0, 1]");
    require(t.lr > 0.0, "train.lr must be positive");
    require(t.batch >= 1, "train.batch must be >= 1");
    require(t.replay_capacity >= t.batch, "train.replay_capacity must be >= batch");
    require(t.lambda_q >= 0.0, "train.lambda_q must be >= 0");
    require(!t.hidden.empty(), "train.hidden must list at least one layer");
    for (int h : t.hidden) require(h >= 1, "train.hidden sizes must be positive");
    require(t.warmup >= 0 && t.update_every >= 1 && t.log_every >= 1, "train warmup/update_every/log_every out of range");
    require(t.episode_length >= 0, "train.episode_length must be >= 0");
    require(t.reward_scale > 0.0, "train.reward_scale must be positive");
    require(t.explore_final >= 0.0 && t.explore_final <= 1.0, "train.explore_final must lie in [0, 1]");
    require(t.explore_fraction >= 0.0 && t.explore_fraction <= 1.0, "train.explore_fraction must lie in [0, 1]");
    require(t.actor_noise >= 0.0, "train.actor_noise must be >= 0");

    const auto& e = ernie;
    require(e.epsilon >= 0.0 && e.k_steps >= 0 && e.lambda >= 0.0, "ernie epsilon/k_steps/lambda must be >= 0");
    require(e.metric == adv::Metric::sq_l2, "ernie.metric kl needs a softmax policy; all learners here are deterministic");
    require(e.attack == "pgd" || e.attack == "gaussian", "ernie.attack must be pgd or gaussian");
    require(e.sigma >= 0.0, "ernie.sigma must be >= 0");
    require(e.init_fraction >= 0.0 && e.init_fraction <= 1.0, "ernie.init_fraction must lie in [0, 1]");
    if (e.regularize_global) require(algo == Algo::qcombo, "ernie.regularize_global applies to qcombo only");

    require(ernie_a.k >= 0 && ernie_a.lambda >= 0.0, "ernie_a k/lambda must be >= 0");
    if (ernie_a.enabled && ernie_a.mode == action::Mode::brute)
        require(n_agents <= 6, "ernie_a brute mode supports at most 6 agents");
    require(meanfield.lambda_w >= 0.0 && meanfield.steps >= 1 && meanfield.eta > 0.0 && meanfield.lambda >= 0.0,
            "meanfield parameters out of range");

    require(eval.episodes >= 1, "eval.episodes must be >= 1");
    for (double s : eval.sigmas) require(s >= 0.0, "eval.sigmas must be >= 0");
    for (double s : eval.dynamics_scales) require(s > 0.0, "eval.dynamics_scales must be > 0");
    for (double r : eval.malicious_rates) require(r >= 0.0 && r <= 1.0, "eval.malicious_rates must lie in [0, 1]");
}

ExperimentConfig config_from_json(const json& j) {
    if (!j.is_object()) throw ConfigError("config must be a JSON object");
    ExperimentConfig c;
    bool strict = true;
    if (j.contains("strict")) {
        if (!j.at("strict").is_boolean()) throw ConfigError("strict must be a boolean");
        strict = j.at("strict").get<bool>();
    }
    c.strict = strict;
    Section root(j, "config", strict);
    root.get("strict", c.strict);
    root.get_as("algo", c.algo, algo_from_string);
    if (!j.contains("env") && c.algo != Algo::qcombo) c.env = EnvKind::coopnav;
    root.get_as("env", c.env, env_from_string);

    Section grid = root.child("grid");
    grid.get("rows", c.grid_rows);
    grid.get("cols", c.grid_cols);
    grid.get("exit_fraction", c.gridq_exit_fraction);
    grid.finish();
    c.n_agents = c.env == EnvKind::coopnav ? 3 : c.grid_rows * c.grid_cols;
    root.get("n_agents", c.n_agents);

    root.get("seeds", c.seeds);
    root.get("train_steps", c.train_steps);

    Section t = root.child("train");
    t.get("gamma", c.train.gamma);
    t.get("tau", c.train.tau);
    t.get("lr", c.train.lr);
    t.get_as("optimizer", c.train.optimizer, marl::optimizer_from_string);
    t.get("batch", c.train.batch);
    t.get("replay_capacity", c.train.replay_capacity);
    t.get("lambda_q", c.train.lambda_q);
    t.get("hidden", c.train.hidden);
    t.get_as("activation", c.train.activation, nn::activation_from_string);
    t.get("warmup", c.train.warmup);
    t.get("update_every", c.train.update_every);
    t.get("log_every", c.train.log_every);
    t.get("episode_length", c.train.episode_length);
    t.get("reward_scale", c.train.reward_scale);
    t.get("explore_final", c.train.explore_final);
    t.get("explore_fraction", c.train.explore_fraction);
    t.get("actor_noise", c.train.actor_noise);
    t.finish();

    Section e = root.child("ernie");
    e.get("enabled", c.ernie.enabled);
    e.get("stackelberg", c.ernie.stackelberg);
    e.get("epsilon", c.ernie.epsilon);
    e.get("k_steps", c.ernie.k_steps);
    e.get("eta", c.ernie.eta);
    e.get("lambda", c.ernie.lambda);
    e.get_as("metric", c.ernie.metric, adv::metric_from_string);
    e.get_as("norm", c.ernie.norm, adv::norm_from_string);
    e.get("attack", c.ernie.attack);
    e.get("sigma", c.ernie.sigma);
    e.get("init_fraction", c.ernie.init_fraction);
    e.get("regularize_global", c.ernie.regularize_global);
    e.finish();

    Section a = root.child("ernie_a");
    a.get("enabled", c.ernie_a.enabled);
    a.get("k", c.ernie_a.k);
    a.get_as("mode", c.ernie_a.mode, action::mode_from_string);
    a.get("lambda", c.ernie_a.lambda);
    a.get("restart_each_round", c.ernie_a.restart_each_round);
    a.finish();

    Section m = root.child("meanfield");
    m.get("enabled", c.meanfield.enabled);
    m.get("lambda_w", c.meanfield.lambda_w);
    m.get("steps", c.meanfield.steps);
    m.get("eta", c.meanfield.eta);
    m.get("lambda", c.meanfield.lambda);
    m.get("attack_avg_action", c.meanfield.attack_avg_action);
    m.finish();

    Section ev = root.child("eval");
    ev.get("episodes", c.eval.episodes);
    ev.get("sigmas", c.eval.sigmas);
    ev.get("dynamics_scales", c.eval.dynamics_scales);
    ev.get("malicious_rates", c.eval.malicious_rates);
    ev.get_as("malicious_mode", c.eval.malicious_mode, env::malicious_mode_from_string);
    ev.get("seed", c.eval.seed);
    ev.finish();

    Section paths = root.child("paths");
    paths.get("out", c.out_dir);
    paths.finish();
    root.finish();

    c.validate();
    return c;
}

json to_json(const ExperimentConfig& c) {
    json j;
    j["algo"] = to_string(c.algo);
    j["env"] = to_string(c.env);
    j["n_agents"] = c.n_agents;
    j["grid"] = {{"rows", c.grid_rows}, {"cols", c.grid_cols}, {"exit_fraction", c.gridq_exit_fraction}};
    j["seeds"] = c.seeds;
    j["train_steps"] = c.train_steps;
    const auto& t = c.train;
    j["train"] = {{"gamma", t.gamma},
                  {"tau", t.tau},
                  {"lr", t.lr},
                  {"optimizer", marl::to_string(t.optimizer)},
                  {"batch", t.batch},
                  {"replay_capacity", t.replay_capacity},
                  {"lambda_q", t.lambda_q},
                  {"hidden", t.hidden},
                  {"activation", nn::to_string(t.activation)},
                  {"warmup", t.warmup},
                  {"update_every", t.update_every},
                  {"log_every", t.log_every},
                  {"episode_length", t.episode_length},
                  {"reward_scale", t.reward_scale},
                  {"explore_final", t.explore_final},
                  {"explore_fraction", t.explore_fraction},
                  {"actor_noise", t.actor_noise}};
    const auto& e = c.ernie;
    j["ernie"] = {{"enabled", e.enabled},
                  {"stackelberg", e.stackelberg},
                  {"epsilon", e.epsilon},
                  {"k_steps", e.k_steps},
                  {"eta", e.eta},
                  {"lambda", e.lambda},
                  {"metric", adv::to_string(e.metric)},
                  {"norm", adv::to_string(e.norm)},
                  {"attack", e.attack},
                  {"sigma", e.sigma},
                  {"init_fraction", e.init_fraction},
                  {"regularize_global", e.regularize_global}};
    j["ernie_a"] = {{"enabled", c.ernie_a.enabled},
                    {"k", c.ernie_a.k},
                    {"mode", action::to_string(c.ernie_a.mode)},
                    {"lambda", c.ernie_a.lambda},
                    {"restart_each_round", c.ernie_a.restart_each_round}};
    j["meanfield"] = {{"enabled", c.meanfield.enabled},
                      {"lambda_w", c.meanfield.lambda_w},
                      {"steps", c.meanfield.steps},
                      {"eta", c.meanfield.eta},
                      {"lambda", c.meanfield.lambda},
                      {"attack_avg_action", c.meanfield.attack_avg_action}};
    j["eval"] = {{"episodes", c.eval.episodes},
                 {"sigmas", c.eval.sigmas},
                 {"dynamics_scales", c.eval.dynamics_scales},
                 {"malicious_rates", c.eval.malicious_rates},
                 {"malicious_mode", env::to_string(c.eval.malicious_mode)},
                 {"seed", c.eval.seed}};
    j["paths"] = {{"out", c.out_dir}};
    j["strict"] = c.strict;
    return j;
}

ExperimentConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config file: " + path);
    json j;
    try {
        j = json::parse(in);
    } catch (const json::parse_error& e) {
        throw ConfigError("config parse error in " + path + ": " + e.what());
    }
    return config_from_json(j);
}

std::string echo_config(const ExperimentConfig& c, const std::string& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("cannot create directory " + dir + ": " + ec.message());
    const std::string path = (std::filesystem::path(dir) / "resolved_config.json").string();
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path);
    out << to_json(c).dump(2) << '\n';
    if (!out) throw IoError("write failed: " + path);
    return path;
}

} // namespace ernie::cfg
