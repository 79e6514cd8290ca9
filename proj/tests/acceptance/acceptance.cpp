#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "ernie/action_reg.hpp"
#include "ernie/certify.hpp"
#include "ernie/config.hpp"
#include "ernie/errors.hpp"
#include "ernie/meanfield.hpp"
#include "ernie/rng.hpp"
#include "ernie/trainer.hpp"

using namespace ernie;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    bool passed = false;
    std::string detail;
};

std::string fmt(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.4g", v);
    return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string suite_detail(const certify::SuiteResult& s) {
    return s.name + ": " + std::to_string(s.instances) + " instances, " + std::to_string(s.checks) +
           " checks, max excess " + fmt(s.max_excess) + " (tol " + fmt(s.tolerance) + ")";
}

// ---------------------------------------------------------------- certificates

Outcome criterion1() {
    const auto t0 = std::chrono::steady_clock::now();
    certify::CertifyOptions o;
    certify::SuiteResult s = certify::q_smoothness_suite(o);
    const double secs = seconds_since(t0);
    return {s.passed && s.instances == 200 && secs <= 120.0, suite_detail(s) + ", " + fmt(secs) + " s"};
}

Outcome criterion2() {
    certify::CertifyOptions o;
    auto suites = certify::softmax_policy_suites(o);
    bool ok = suites.size() == 2;
    std::string detail;
    for (const auto& s : suites) {
        ok = ok && s.passed && s.instances == 200;
        detail += (detail.empty() ? "" : "; ") + suite_detail(s);
    }
    return {ok, detail};
}

Outcome criterion3() {
    certify::CertifyOptions o;
    certify::SuiteResult s = certify::perturbed_value_suite(o);
    return {s.passed && s.instances == 50, suite_detail(s)};
}

// ---------------------------------------------------------------- gradients and oracles

Outcome criterion4() {
    const auto t0 = std::chrono::steady_clock::now();
    certify::GradcheckOptions o;
    o.stackelberg_steps = {1, 2, 3};
    certify::GradcheckReport r = certify::run_gradcheck(o);
    const double secs = seconds_since(t0);
    bool ok = secs <= 60.0;
    std::string detail;
    for (const auto& s : r.suites) {
        if (s.name.rfind("stackelberg", 0) != 0) continue;
        ok = ok && s.passed && s.cases == 100 && s.max_rel_error < 1e-4;
        detail += s.name + " max rel err " + fmt(s.max_rel_error) + "; ";
    }
    return {ok, detail + fmt(secs) + " s"};
}

Outcome criterion5() {
    Rng rng(derive_seed(5, {1}));
    int k1_equal = 0, k23_bounded = 0, count_ok = 0, k23_total = 0;
    const int tables = 500;
    for (int t = 0; t < tables; ++t) {
        const int n = 1 + rng.index(4);
        std::vector<int> n_actions(n);
        int a_max = 0;
        for (int& m : n_actions) {
            m = 2 + rng.index(4);
            a_max = std::max(a_max, m);
        }
        std::map<std::vector<int>, double> table;
        std::function<void(std::vector<int>&, int)> fill = [&](std::vector<int>& a, int i) {
            if (i == n) {
                table[a] = rng.normal() * 3.0;
                return;
            }
            for (a[i] = 0; a[i] < n_actions[i]; ++a[i]) fill(a, i + 1);
        };
        std::vector<int> scratch(n);
        fill(scratch, 0);
        action::QFunction q = [&table](const action::JointAction& a) { return table.at(a); };
        action::JointAction a(n);
        for (int i = 0; i < n; ++i) a[i] = rng.index(n_actions[i]);

        bool counts = true;
        for (int k = 1; k <= 3; ++k) {
            action::ActionAttackResult g = action::greedy_action_attack(q, n_actions, a, k);
            action::ActionAttackResult b = action::brute_force_action_attack(q, n_actions, a, k);
            counts = counts && g.evaluations <= static_cast<long>(a_max) * n * k;
            if (k == 1) {
                k1_equal += g.value == b.value;
            } else {
                ++k23_total;
                k23_bounded += g.value <= b.value;
            }
        }
        count_ok += counts;
    }
    const bool ok = k1_equal == tables && k23_bounded == k23_total && count_ok == tables;
    return {ok, "K=1 exact " + std::to_string(k1_equal) + "/" + std::to_string(tables) + ", K in {2,3} bounded " +
                    std::to_string(k23_bounded) + "/" + std::to_string(k23_total) + ", eval budget " +
                    std::to_string(count_ok) + "/" + std::to_string(tables)};
}

Eigen::MatrixXd normal_matrix(Rng& rng, int rows, int cols) {
    Eigen::MatrixXd m(rows, cols);
    for (int j = 0; j < cols; ++j) m.col(j) = rng.normal_vector(rows);
    return m;
}

Outcome criterion6() {
    Rng rng(derive_seed(6, {1}));
    int dominated = 0, matched = 0;
    double worst_1d = 0.0;
    for (int t = 0; t < 200; ++t) {
        const int n = 1 + rng.index(16), d = 1 + rng.index(4);
        mf::ParticleCloud a{normal_matrix(rng, d, n)}, b{normal_matrix(rng, d, n) * 2.0};
        dominated += mf::w_distance(a, b, mf::WMode::identity_coupling) >= mf::w_distance(a, b, mf::WMode::exact_matching);
    }
    for (int t = 0; t < 200; ++t) {
        const int n = 1 + rng.index(16);
        mf::ParticleCloud a{normal_matrix(rng, 1, n)}, b{normal_matrix(rng, 1, n) * 3.0};
        const double diff = std::abs(mf::w_distance(a, b, mf::WMode::closed_form_1d) -
                                     mf::w_distance(a, b, mf::WMode::exact_matching));
        worst_1d = std::max(worst_1d, diff);
        matched += diff <= 1e-9;
    }
    return {dominated == 200 && matched == 200, "identity >= exact " + std::to_string(dominated) +
                                                   "/200, 1-D closed form = exact " + std::to_string(matched) +
                                                   "/200 (max diff " + fmt(worst_1d) + ")"};
}

// ---------------------------------------------------------------- training runs

std::string metrics_bytes(const cfg::ExperimentConfig& c, std::uint64_t seed, const std::string& tag) {
    const fs::path dir = fs::temp_directory_path() / ("ernie_acceptance_" + tag);
    fs::remove_all(dir);
    train::RunOptions o;
    o.out_dir = dir.string();
    o.write_checkpoints = false;
    train::train_run(c, seed, o);
    std::ifstream in(dir / "metrics.csv", std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    fs::remove_all(dir);
    return ss.str();
}

Outcome criterion7() {
    int identical = 0, total = 0;
    std::string detail;
    for (const std::string algo : {"qcombo", "ddpg"}) {
        nlohmann::json j = {{"algo", algo},
                            {"train_steps", 1500},
                            {"train", {{"warmup", 200}, {"batch", 32}, {"log_every", 100}, {"reward_scale", 0.1}}}};
        cfg::ExperimentConfig base = cfg::config_from_json(j);
        cfg::ExperimentConfig reg = base;
        reg.ernie.enabled = true;
        reg.ernie.lambda = 0.0;
        reg.ernie.epsilon = 0.0;
        reg.ernie.k_steps = 0;
        if (reg.discrete()) {
            reg.ernie_a.enabled = true;
            reg.ernie_a.lambda = 0.0;
        }
        int same = 0;
        for (std::uint64_t seed : {1, 2, 3}) {
            same += metrics_bytes(base, seed, "base") == metrics_bytes(reg, seed, "reg");
            ++total;
        }
        identical += same;
        detail += algo + " " + std::to_string(same) + "/3; ";
    }
    return {identical == total, detail + "byte-identical metrics"};
}

Outcome criterion10() {
    std::string detail;
    bool ok = true;
    for (const std::string algo : {"qcombo", "ddpg"}) {
        nlohmann::json j = {{"algo", algo},
                            {"train_steps", 100},
                            {"train", {{"warmup", 50}, {"batch", 32}, {"log_every", 100}, {"reward_scale", 0.1}}}};
        cfg::ExperimentConfig base = cfg::config_from_json(j);
        auto losses_at_100 = [](const cfg::ExperimentConfig& c) {
            train::MetricsRow last;
            train::RunOptions o;
            o.on_update = [&last](long step, const train::MetricsRow& r) {
                if (step == 100) last = r;
            };
            train::train_run(c, 7, o);
            return std::vector<double>{last.loss_total, last.loss_ind,    last.loss_glob,
                                       last.loss_reg,   last.loss_critic, last.loss_actor};
        };
        const std::vector<double> ref = losses_at_100(base);
        std::string sweep;
        double final_diff = 0.0;
        for (double sigma : {1e-3, 1e-5, 1e-7}) {
            cfg::ExperimentConfig g = base;
            g.ernie.enabled = true;
            g.ernie.attack = "gaussian";
            g.ernie.sigma = sigma;
            const std::vector<double> got = losses_at_100(g);
            double diff = 0.0;
            for (std::size_t i = 0; i < ref.size(); ++i) diff = std::max(diff, std::abs(got[i] - ref[i]));
            sweep += " sigma " + fmt(sigma) + ": " + fmt(diff);
            final_diff = diff;
        }
        ok = ok && final_diff <= 1e-9 && std::isfinite(ref[0]) && ref[0] != 0.0;
        detail += algo + ":" + sweep + "; ";
    }
    return {ok, detail + "max loss difference at step 100"};
}

cfg::ExperimentConfig load_acceptance_config(const std::string& name) {
    return cfg::load_config(std::string(ERNIE_CONFIG_DIR) + "/" + name);
}

struct SeedEval {
    std::map<double, double> by_level;  // perturbation level -> mean return
};

SeedEval train_and_evaluate(const cfg::ExperimentConfig& c, std::uint64_t seed,
                            const std::vector<env::PerturbSpec>& specs, const std::function<double(const env::PerturbSpec&)>& level) {
    train::RunResult r = train::train_run(c, seed);
    auto rows = train::evaluate_agents(r.agents, c, specs, c.eval.episodes, c.eval.seed);
    SeedEval out;
    for (const auto& s : train::summarize(rows)) out.by_level[level(s.spec)] = s.mean;
    return out;
}

Outcome criterion8() {
    const auto t0 = std::chrono::steady_clock::now();
    cfg::ExperimentConfig ernie_cfg = load_acceptance_config("navigation_ernie_ddpg.json");
    cfg::ExperimentConfig base_cfg = ernie_cfg;
    base_cfg.ernie.enabled = false;
    std::vector<env::PerturbSpec> specs(3);
    specs[1].obs_noise_sigma = 0.5;
    specs[2].obs_noise_sigma = 1.0;
    auto level = [](const env::PerturbSpec& s) { return s.obs_noise_sigma; };

    std::map<double, double> base_sum, ernie_sum;
    int flatter = 0;
    std::ostringstream seeds;
    const std::vector<std::uint64_t> seed_list{1, 2, 3, 4, 5};
    for (std::uint64_t seed : seed_list) {
        SeedEval b = train_and_evaluate(base_cfg, seed, specs, level);
        SeedEval e = train_and_evaluate(ernie_cfg, seed, specs, level);
        for (double s : {0.0, 0.5, 1.0}) {
            base_sum[s] += b.by_level[s] / seed_list.size();
            ernie_sum[s] += e.by_level[s] / seed_list.size();
        }
        const double slope_b = b.by_level[0.0] - b.by_level[1.0];
        const double slope_e = e.by_level[0.0] - e.by_level[1.0];
        flatter += slope_e < slope_b;
        seeds << " seed " << seed << " slope " << fmt(slope_e) << " vs " << fmt(slope_b) << ";";
    }
    const double secs = seconds_since(t0);
    const bool ok = ernie_sum[0.5] >= base_sum[0.5] && ernie_sum[1.0] >= base_sum[1.0] && flatter >= 4 && secs <= 45 * 60;
    std::ostringstream d;
    d << "mean return sigma 0.5: " << fmt(ernie_sum[0.5]) << " vs " << fmt(base_sum[0.5]) << ", sigma 1.0: "
      << fmt(ernie_sum[1.0]) << " vs " << fmt(base_sum[1.0]) << "; flatter in " << flatter << "/5;" << seeds.str()
      << " " << fmt(secs) << " s";
    return {ok, d.str()};
}

Outcome criterion9() {
    const auto t0 = std::chrono::steady_clock::now();
    cfg::ExperimentConfig ea_cfg = load_acceptance_config("traffic_ernie_a_qcombo.json");
    cfg::ExperimentConfig base_cfg = ea_cfg;
    base_cfg.ernie_a.enabled = false;
    base_cfg.ernie.enabled = false;
    std::vector<env::PerturbSpec> specs(2);
    specs[0].malicious_rate = 0.03;
    specs[1].malicious_rate = 0.05;
    for (auto& s : specs) s.malicious_mode = env::MaliciousMode::adversarial;
    auto level = [](const env::PerturbSpec& s) { return s.malicious_rate; };

    std::map<double, int> wins;
    std::ostringstream seeds;
    for (std::uint64_t seed : {1, 2, 3, 4, 5}) {
        SeedEval b = train_and_evaluate(base_cfg, seed, specs, level);
        SeedEval e = train_and_evaluate(ea_cfg, seed, specs, level);
        seeds << " seed " << seed;
        for (double r : {0.03, 0.05}) {
            wins[r] += e.by_level[r] >= b.by_level[r];
            seeds << " " << fmt(e.by_level[r]) << " vs " << fmt(b.by_level[r]);
        }
        seeds << ";";
    }
    const double secs = seconds_since(t0);
    const bool ok = wins[0.03] >= 4 && wins[0.05] >= 4 && secs <= 30 * 60;
    std::ostringstream d;
    d << "ERNIE-A >= baseline at rate 0.03 in " << wins[0.03] << "/5 seeds, at 0.05 in " << wins[0.05] << "/5;"
      << seeds.str() << " " << fmt(secs) << " s";
    return {ok, d.str()};
}

} // namespace

int main(int argc, char** argv) {
    const std::map<int, std::pair<std::string, std::function<Outcome()>>> criteria{
        {1, {"Q smoothness certificate", criterion1}},
        {2, {"softmax policy certificate", criterion2}},
        {3, {"perturbed value certificate", criterion3}},
        {4, {"Stackelberg gradient check", criterion4}},
        {5, {"action attack oracle equivalence", criterion5}},
        {6, {"Wasserstein oracles", criterion6}},
        {7, {"regression identity", criterion7}},
        {8, {"observation noise robustness", criterion8}},
        {9, {"malicious action robustness", criterion9}},
        {10, {"Gaussian baseline limit", criterion10}},
    };
    std::vector<int> selected;
    for (int i = 1; i < argc; ++i) selected.push_back(std::atoi(argv[i]));
    if (selected.empty())
        for (const auto& [k, v] : criteria) selected.push_back(k);

    int failed = 0;
    for (int k : selected) {
        auto it = criteria.find(k);
        if (it == criteria.end()) {
            std::fprintf(stderr, "unknown criterion %d\n", k);
            return 2;
        }
        Outcome o;
        try {
            o = it->second.second();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        failed += !o.passed;
        std::printf("criterion %d (%s): %s | %s\n", k, it->second.first.c_str(), o.passed ? "PASS" : "FAIL",
                    o.detail.c_str());
        std::fflush(stdout);
    }
    return failed == 0 ? 0 : 1;
}
