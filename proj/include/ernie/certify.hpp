#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "ernie/mdp.hpp"

namespace ernie::certify {

struct CertifyOptions {
    /// Instances for the Q-smoothness and softmax-policy suites.
    int instances = 200;
    /// Instances for the perturbed-value suite (the first ones of the same sequence).
    int gap_instances = 50;
    std::uint64_t seed = 0;
    int grid_resolution = 9;
    std::vector<double> softmax_epsilons{0.05, 0.1, 0.2};
    std::vector<double> gap_epsilons{0.05, 0.1};
    /// Softmax temperature target of the policies whose perturbation gap is measured.
    double gap_policy_epsilon = 0.1;
    /// Adds a non-smooth instance with a mislabeled l_r to the Q-smoothness suite.
    bool negative_control = false;
    int max_offending = 5;
};

/// Random instance parameters drawn for index i: |S| in [2,20], |A| in [2,4], d = 2,
/// l_r and l_p in [0,1], gamma in {0.9, 0.95}.
struct InstanceSpec {
    std::uint64_t seed = 0;
    int n_states = 0;
    int n_actions = 0;
    double l_r = 0.0;
    double l_p = 0.0;
    double gamma = 0.9;
};

InstanceSpec instance_spec(std::uint64_t base_seed, int index);
mdp::TabularMdp make_instance(const InstanceSpec& spec);

/// Two nearby states with opposite rewards, labelled with a reward constant far below the truth.
mdp::TabularMdp negative_control_instance();

struct Offending {
    std::string label;
    std::uint64_t seed = 0;
    double excess = 0.0;
    nlohmann::json instance;
};

/// One bound family. `max_excess` is max(measured - bound) over all checks; the suite
/// passes when it is <= tolerance.
struct SuiteResult {
    std::string name;
    int instances = 0;
    long checks = 0;
    double tolerance = 0.0;
    double max_excess = -1e300;
    bool passed = true;
    std::vector<Offending> offending;

    void record(double measured, double bound, const std::string& label, std::uint64_t seed,
                const mdp::TabularMdp& m, int max_offending);
    nlohmann::json to_json() const;
};

/// max over (s, s', a) of |q(s,a) - q(s',a)| - l_q ||s - s'||.
double q_smoothness_excess(const mdp::TabularMdp& m, const Eigen::MatrixXd& q, double l_q);

SuiteResult q_smoothness_suite(const CertifyOptions& opts);
/// Two checks per (instance, epsilon): suboptimality and Lipschitz constant of the softmax policy.
std::vector<SuiteResult> softmax_policy_suites(const CertifyOptions& opts);
SuiteResult perturbed_value_suite(const CertifyOptions& opts);

struct CertifyReport {
    CertifyOptions options;
    std::vector<SuiteResult> suites;
    bool passed() const;
    nlohmann::json to_json() const;
};

CertifyReport run_certify(const CertifyOptions& opts);

/// Writes theory_report.json under `out_dir` and returns its path.
std::string write_report(const nlohmann::json& report, const std::string& out_dir, const std::string& name);

// ---------------------------------------------------------------- gradient checks

struct GradcheckOptions {
    std::uint64_t seed = 0;
    int nets = 100;
    double tolerance = 1e-4;
    std::vector<int> stackelberg_steps{0, 1, 2, 3};
};

struct GradSuite {
    std::string name;
    int cases = 0;
    double max_rel_error = 0.0;
    double tolerance = 0.0;
    /// Set when every case matched bit for bit (the K = 0 Stackelberg case against the leader-only gradient).
    bool exact = false;
    bool passed = true;
    nlohmann::json to_json() const;
};

struct GradcheckReport {
    GradcheckOptions options;
    std::vector<GradSuite> suites;
    bool passed() const;
    nlohmann::json to_json() const;
};

/// Central-difference oracle of theta -> R(o, delta^K(theta); theta), rerunning the attack per probe.
GradcheckReport run_gradcheck(const GradcheckOptions& opts);

} // namespace ernie::certify
