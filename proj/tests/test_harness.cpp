#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "ernie/certify.hpp"
#include "ernie/config.hpp"
#include "ernie/errors.hpp"
#include "ernie/rng.hpp"
#include "ernie/trainer.hpp"

using namespace ernie;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
    fs::path p = fs::temp_directory_path() / ("ernie_harness_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

cfg::ExperimentConfig small_config(const std::string& algo) {
    json j;
    j["algo"] = algo;
    j["env"] = algo == "qcombo" ? "gridq" : "coopnav";
    j["train_steps"] = 300;
    j["train"] = {{"warmup", 64}, {"batch", 16}, {"hidden", {8}}, {"log_every", 50}, {"reward_scale", 0.1}};
    return cfg::config_from_json(j);
}

} // namespace

// ---------------------------------------------------------------- config

TEST(Config, EmptyDocumentGivesValidDefaults) {
    cfg::ExperimentConfig c = cfg::config_from_json(json::object());
    EXPECT_NO_THROW(c.validate());
    EXPECT_EQ(c.algo, cfg::Algo::qcombo);
    EXPECT_EQ(c.env, cfg::EnvKind::gridq);
    EXPECT_EQ(c.n_agents, 4);
    EXPECT_EQ(c.train.log_every, 100);
    EXPECT_EQ(c.eval.episodes, 20);
    EXPECT_EQ(c.episode_length(), 100);
}

TEST(Config, ContinuousAlgoDefaultsToCoopnav) {
    cfg::ExperimentConfig c = cfg::config_from_json({{"algo", "ddpg"}});
    EXPECT_EQ(c.env, cfg::EnvKind::coopnav);
    EXPECT_EQ(c.n_agents, 3);
    EXPECT_EQ(c.episode_length(), 50);
}

TEST(Config, IncompatibleCombinationsAreRejected) {
    EXPECT_THROW(cfg::config_from_json({{"algo", "qcombo"}, {"env", "coopnav"}}), ConfigError);
    EXPECT_THROW(cfg::config_from_json({{"algo", "ddpg"}, {"env", "gridq"}}), ConfigError);
    EXPECT_THROW(cfg::config_from_json({{"algo", "ddpg"}, {"ernie_a", {{"enabled", true}}}}), ConfigError);
    EXPECT_THROW(cfg::config_from_json({{"algo", "ddpg"}, {"meanfield", {{"enabled", true}}}}), ConfigError);
    EXPECT_THROW(cfg::config_from_json({{"algo", "mf_ddpg"}, {"n_agents", 1}}), ConfigError);
}

TEST(Config, UnknownKeysAndBadValues) {
    EXPECT_THROW(cfg::config_from_json({{"algoo", "qcombo"}}), ConfigError);
    EXPECT_THROW(cfg::config_from_json({{"ernie", {{"epsilonn", 0.1}}}}), ConfigError);
    EXPECT_NO_THROW(cfg::config_from_json({{"strict", false}, {"algoo", "qcombo"}}));
    EXPECT_THROW(cfg::config_from_json({{"train_steps", -1}}), ConfigError);
    EXPECT_THROW(cfg::config_from_json({{"ernie", {{"epsilon", "big"}}}}), ConfigError);
    EXPECT_THROW(cfg::config_from_json({{"algo", "ppo"}}), ConfigError);
    EXPECT_THROW(cfg::config_from_json({{"train", {{"optimizer", "rmsprop"}}}}), ConfigError);
    EXPECT_EQ(cfg::config_from_json({{"train", {{"optimizer", "adam"}}}}).train.optimizer, marl::Optimizer::adam);
    EXPECT_THROW(cfg::config_from_json(json::array()), ConfigError);
}

TEST(Config, RoundTripThroughEchoIsIdentical) {
    fs::path dir = scratch("roundtrip");
    json j = {{"algo", "mf_ddpg"},
              {"seeds", {3, 4}},
              {"ernie", {{"enabled", true}, {"epsilon", 0.2}, {"norm", "linf"}}},
              {"meanfield", {{"enabled", true}, {"lambda_w", 2.0}}},
              {"eval", {{"sigmas", {0.0, 0.5}}}}};
    cfg::ExperimentConfig a = cfg::config_from_json(j);
    std::string path = cfg::echo_config(a, dir.string());
    cfg::ExperimentConfig b = cfg::load_config(path);
    EXPECT_EQ(cfg::to_json(a), cfg::to_json(b));
    std::string again = cfg::echo_config(b, (dir / "again").string());
    EXPECT_EQ(slurp(path), slurp(again));
}

TEST(Config, LoadErrors) {
    fs::path dir = scratch("loaderr");
    EXPECT_THROW(cfg::load_config((dir / "missing.json").string()), IoError);
    std::ofstream(dir / "bad.json") << "{ not json";
    EXPECT_THROW(cfg::load_config((dir / "bad.json").string()), ConfigError);
}

// ---------------------------------------------------------------- metrics rows

TEST(Metrics, RowRoundTripIsLossless) {
    train::MetricsRow r;
    r.step = 300;
    r.seed = 7;
    r.episodic_return_mean = -1.0 / 3.0;
    r.episodic_return_std = std::nan("");
    r.loss_total = 1e-300;
    r.loss_ind = 0.1 + 0.2;
    r.attack_norm_mean = 123456.789;
    std::string line = train::format_metrics_row(r);
    train::MetricsRow back = train::parse_metrics_row(line);
    EXPECT_EQ(train::format_metrics_row(back), line);
    EXPECT_EQ(back.episodic_return_mean, r.episodic_return_mean);
    EXPECT_TRUE(std::isnan(back.episodic_return_std));
    EXPECT_EQ(back.loss_ind, 0.1 + 0.2);
    EXPECT_THROW(train::parse_metrics_row("1,2,3"), ParameterError);
}

TEST(Metrics, PercentileInterpolates) {
    EXPECT_DOUBLE_EQ(train::percentile({1, 2, 3, 4, 5}, 0.5), 3.0);
    EXPECT_DOUBLE_EQ(train::percentile({5, 1, 4, 2, 3}, 0.1), 1.4);
    EXPECT_DOUBLE_EQ(train::percentile({7}, 0.9), 7.0);
    EXPECT_THROW(train::percentile({}, 0.5), ParameterError);
}

// ---------------------------------------------------------------- training

TEST(Train, ZeroStepsWritesInitialCheckpointAndHeaderOnly) {
    fs::path dir = scratch("zero");
    cfg::ExperimentConfig c = small_config("qcombo");
    c.train_steps = 0;
    train::RunOptions o;
    o.out_dir = dir.string();
    train::train_run(c, 1, o);
    EXPECT_EQ(slurp(dir / "metrics.csv"), train::metrics_header() + "\n");
    EXPECT_TRUE(fs::exists(dir / "checkpoints" / "step_0" / "manifest.json"));
    int count = 0;
    for (const auto& e : fs::directory_iterator(dir / "checkpoints")) count += e.is_directory();
    EXPECT_EQ(count, 1);
}

TEST(Train, MetricsAreByteIdenticalAcrossRepeats) {
    for (const std::string algo : {"qcombo", "ddpg", "mf_ddpg"}) {
        cfg::ExperimentConfig c = small_config(algo);
        fs::path a = scratch("det_a_" + algo), b = scratch("det_b_" + algo);
        train::RunOptions oa, ob;
        oa.out_dir = a.string();
        ob.out_dir = b.string();
        oa.write_checkpoints = ob.write_checkpoints = false;
        train::train_run(c, 5, oa);
        train::train_run(c, 5, ob);
        EXPECT_EQ(slurp(a / "metrics.csv"), slurp(b / "metrics.csv")) << algo;
        EXPECT_FALSE(fs::exists(a / "checkpoints"));
    }
}

TEST(Train, MetricsFileLayout) {
    fs::path dir = scratch("layout");
    cfg::ExperimentConfig c = small_config("ddpg");
    train::RunOptions o;
    o.out_dir = dir.string();
    auto res = train::train_run(c, 2, o);
    std::istringstream in(slurp(dir / "metrics.csv"));
    std::string line;
    std::getline(in, line);
    EXPECT_EQ(line, train::metrics_header());
    long prev = 0;
    int rows = 0;
    while (std::getline(in, line)) {
        train::MetricsRow r = train::parse_metrics_row(line);
        EXPECT_GT(r.step, prev);
        EXPECT_EQ(r.step % 50, 0);
        prev = r.step;
        ++rows;
    }
    EXPECT_EQ(rows, 6);
    EXPECT_EQ(res.rows.size(), 6u);
    // Episode length 50: six finished episodes in 300 steps.
    EXPECT_EQ(res.episode_returns.size(), 6u);
    // Checkpoints every 10% of the run plus the initial one.
    int count = 0;
    for (const auto& e : fs::directory_iterator(dir / "checkpoints")) count += e.is_directory();
    EXPECT_EQ(count, 11);
    EXPECT_TRUE(fs::exists(dir / "timing.csv"));
}

TEST(Train, RegressionIdentityWithZeroStrengthRegularizers) {
    for (const std::string algo : {"qcombo", "ddpg", "mf_ddpg"}) {
        cfg::ExperimentConfig base = small_config(algo);
        cfg::ExperimentConfig reg = base;
        reg.ernie.enabled = true;
        reg.ernie.lambda = 0.0;
        reg.ernie.epsilon = 0.0;
        reg.ernie.k_steps = 0;
        if (algo == "qcombo") {
            reg.ernie_a.enabled = true;
            reg.ernie_a.lambda = 0.0;
        }
        if (algo == "mf_ddpg") {
            reg.meanfield.enabled = true;
            reg.meanfield.lambda = 0.0;
        }
        fs::path a = scratch("reg_a_" + algo), b = scratch("reg_b_" + algo);
        train::RunOptions oa, ob;
        oa.out_dir = a.string();
        ob.out_dir = b.string();
        oa.write_checkpoints = ob.write_checkpoints = false;
        auto ra = train::train_run(base, 3, oa);
        auto rb = train::train_run(reg, 3, ob);
        std::string ma = slurp(a / "metrics.csv"), mb = slurp(b / "metrics.csv");
        EXPECT_EQ(ma, mb) << algo;
    }
}

TEST(Train, CheckpointRoundTripReproducesPolicy) {
    for (const std::string algo : {"qcombo", "ddpg", "mf_ddpg"}) {
        fs::path dir = scratch("ckpt_" + algo);
        cfg::ExperimentConfig c = small_config(algo);
        train::RunOptions o;
        o.out_dir = dir.string();
        auto res = train::train_run(c, 4, o);
        train::Checkpoint ck = train::load_checkpoint((dir / "checkpoints" / "step_300").string());
        EXPECT_NO_THROW(train::check_compatible(c, ck));
        auto e = train::make_env(c);
        env::Obs obs = e->reset(9);
        env::JointAct x = res.agents.act(obs), y = ck.agents.act(obs);
        EXPECT_EQ(x.discrete, y.discrete);
        ASSERT_EQ(x.continuous.size(), y.continuous.size());
        for (std::size_t i = 0; i < x.continuous.size(); ++i) EXPECT_EQ(x.continuous[i], y.continuous[i]);
        cfg::ExperimentConfig other = c;
        other.algo = algo == "qcombo" ? cfg::Algo::ddpg : cfg::Algo::qcombo;
        other.env = algo == "qcombo" ? cfg::EnvKind::coopnav : cfg::EnvKind::gridq;
        other.n_agents = algo == "qcombo" ? 3 : 4;
        EXPECT_THROW(train::check_compatible(other, ck), ConfigError);
    }
    EXPECT_THROW(train::load_checkpoint("/nonexistent/ckpt"), IoError);
}

TEST(Evaluate, SweepOrderAndRowCounts) {
    cfg::ExperimentConfig c = small_config("qcombo");
    c.eval.sigmas = {0.5, 0.0, 0.1};
    auto specs = train::eval_sweep(c);
    ASSERT_EQ(specs.size(), 3u + 2u + 2u);
    EXPECT_EQ(specs[0].obs_noise_sigma, 0.0);
    EXPECT_EQ(specs[1].obs_noise_sigma, 0.1);
    EXPECT_EQ(specs[2].obs_noise_sigma, 0.5);
    EXPECT_EQ(specs[3].dynamics_scale, 0.75);
    EXPECT_EQ(specs[5].malicious_rate, 0.03);
    EXPECT_EQ(specs[6].malicious_mode, env::MaliciousMode::adversarial);
    // Continuous envs have no malicious rows.
    EXPECT_EQ(train::eval_sweep(small_config("ddpg")).size(), 5u + 2u);
}

TEST(Evaluate, WritesTwentyRowsPerSpecAndSummary) {
    fs::path dir = scratch("eval");
    cfg::ExperimentConfig c = small_config("qcombo");
    c.eval.sigmas = {0.0, 0.25};
    c.eval.dynamics_scales = {1.0};
    c.eval.malicious_rates = {0.05};
    train::RunOptions o;
    o.out_dir = (dir / "run").string();
    train::train_run(c, 1, o);
    auto summary = train::cmd_evaluate(c, (dir / "run" / "checkpoints" / "step_300").string(), (dir / "eval").string());
    ASSERT_EQ(summary.size(), 3u);
    for (const auto& s : summary) EXPECT_EQ(s.episodes, 20);
    std::istringstream in(slurp(dir / "eval" / "results.csv"));
    std::string line;
    std::getline(in, line);
    EXPECT_EQ(line, "obs_noise_sigma,dynamics_scale,malicious_rate,malicious_mode,episode,return");
    int rows = 0;
    while (std::getline(in, line)) ++rows;
    EXPECT_EQ(rows, 60);
    EXPECT_LE(summary[0].p10, summary[0].p50);
    EXPECT_LE(summary[0].p50, summary[0].p90);
    // Deterministic output bytes.
    train::cmd_evaluate(c, (dir / "run" / "checkpoints" / "step_300").string(), (dir / "eval2").string());
    EXPECT_EQ(slurp(dir / "eval" / "results.csv"), slurp(dir / "eval2" / "results.csv"));
    EXPECT_EQ(slurp(dir / "eval" / "summary.csv"), slurp(dir / "eval2" / "summary.csv"));
}

TEST(Evaluate, IdentityNoiseRowEqualsCleanRollouts) {
    cfg::ExperimentConfig c = small_config("ddpg");
    auto res = train::train_run(c, 6);
    env::PerturbSpec clean;
    auto rows = train::evaluate_agents(res.agents, c, {clean}, 3, 77);
    auto e = train::make_env(c);
    env::PolicyFn pol = [&](const env::Obs& o) { return res.agents.act(o); };
    for (int ep = 0; ep < 3; ++ep)
        EXPECT_EQ(rows[ep].ret, env::rollout(*e, pol, 50, clean, derive_seed(77, {static_cast<std::uint64_t>(ep)})).global_return);
}

// ---------------------------------------------------------------- reports

TEST(Certify, SmallRunPassesAndIsReproducible) {
    certify::CertifyOptions o;
    o.instances = 10;
    o.gap_instances = 3;
    o.seed = 4;
    auto a = certify::run_certify(o);
    auto b = certify::run_certify(o);
    EXPECT_TRUE(a.passed());
    EXPECT_EQ(a.to_json().dump(), b.to_json().dump());
    for (const auto& s : a.suites) EXPECT_LE(s.max_excess, s.tolerance) << s.name;
}

TEST(Certify, NegativeControlFlagsQSmoothness) {
    certify::CertifyOptions o;
    o.instances = 3;
    o.gap_instances = 1;
    o.negative_control = true;
    auto rep = certify::run_certify(o);
    EXPECT_FALSE(rep.passed());
    EXPECT_FALSE(rep.suites[0].passed);
    ASSERT_FALSE(rep.suites[0].offending.empty());
    // The serialized instance replays to the same violation.
    mdp::TabularMdp m = mdp::mdp_from_json(rep.suites[0].offending.front().instance);
    const double l_q = mdp::lipschitz_bounds(m.l_r, m.l_p, 0.0, m.gamma).l_q;
    EXPECT_GT(certify::q_smoothness_excess(m, mdp::value_iteration(m), l_q), 1e-8);
    for (std::size_t k = 1; k < rep.suites.size(); ++k) EXPECT_TRUE(rep.suites[k].passed);
}

TEST(Gradcheck, SmallRunPassesWithExactZeroStepCase) {
    certify::GradcheckOptions o;
    o.nets = 10;
    o.seed = 3;
    auto rep = certify::run_gradcheck(o);
    EXPECT_TRUE(rep.passed());
    ASSERT_EQ(rep.suites.size(), 5u);
    EXPECT_TRUE(rep.suites[1].exact);
    EXPECT_FALSE(rep.suites[2].exact);
    EXPECT_EQ(rep.to_json().dump(), certify::run_gradcheck(o).to_json().dump());
}
