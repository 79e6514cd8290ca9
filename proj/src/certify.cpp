#include "ernie/certify.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "ernie/adv_reg.hpp"
#include "ernie/errors.hpp"
#include "ernie/net.hpp"
#include "ernie/rng.hpp"

namespace ernie::certify {

namespace fs = std::filesystem;
using nlohmann::json;

InstanceSpec instance_spec(std::uint64_t base_seed, int index) {
    InstanceSpec s;
    s.seed = derive_seed(base_seed, {static_cast<std::uint64_t>(index)});
    Rng rng(s.seed);
    s.n_states = 2 + rng.index(19);
    s.n_actions = 2 + rng.index(3);
    s.l_r = rng.uniform();
    s.l_p = rng.uniform();
    s.gamma = rng.index(2) == 0 ? 0.9 : 0.95;
    return s;
}

mdp::TabularMdp make_instance(const InstanceSpec& spec) {
    return mdp::gen_smooth_mdp(spec.n_states, spec.n_actions, spec.l_r, spec.l_p, spec.gamma, spec.seed);
}

mdp::TabularMdp negative_control_instance() {
    mdp::TabularMdp m;
    m.n_states = 3;
    m.n_actions = 2;
    m.gamma = 0.9;
    m.l_r = 0.1;
    m.l_p = 0.0;
    m.embed.resize(3, 2);
    m.embed << 0.5, 0.5, 0.51, 0.5, 0.9, 0.1;
    m.reward.resize(3, 2);
    m.reward << 1.0, 1.0, -1.0, -1.0, 0.0, 0.0;
    Eigen::MatrixXd shared = Eigen::MatrixXd::Constant(3, 3, 1.0 / 3.0);
    m.trans = {shared, shared};
    return m;
}

void SuiteResult::record(double measured, double bound, const std::string& label, std::uint64_t seed,
                         const mdp::TabularMdp& m, int max_offending) {
    ++checks;
    const double excess = measured - bound;
    max_excess = std::max(max_excess, excess);
    if (excess > tolerance) {
        passed = false;
        if (static_cast<int>(offending.size()) < max_offending) offending.push_back({label, seed, excess, mdp::to_json(m)});
    }
}

json SuiteResult::to_json() const {
    json j;
    j["name"] = name;
    j["passed"] = passed;
    j["instances"] = instances;
    j["checks"] = checks;
    j["tolerance"] = tolerance;
    j["max_excess"] = max_excess;
    j["min_margin"] = -max_excess;
    json off = json::array();
    for (const auto& o : offending)
        off.push_back({{"label", o.label}, {"seed", o.seed}, {"excess", o.excess}, {"instance", o.instance}});
    j["offending"] = off;
    return j;
}

double q_smoothness_excess(const mdp::TabularMdp& m, const Eigen::MatrixXd& q, double l_q) {
    double worst = -1e300;
    for (int s = 0; s < m.n_states; ++s)
        for (int t = s + 1; t < m.n_states; ++t) {
            const double d = mdp::state_distance(m.state(s), m.state(t));
            for (int a = 0; a < m.n_actions; ++a) worst = std::max(worst, std::abs(q(s, a) - q(t, a)) - l_q * d);
        }
    return worst;
}

namespace {

mdp::TabularPolicy random_tabular_policy(int n_states, int n_actions, std::uint64_t seed) {
    Rng rng(seed);
    mdp::TabularPolicy p;
    p.probs.resize(n_states, n_actions);
    for (int s = 0; s < n_states; ++s) {
        for (int a = 0; a < n_actions; ++a) p.probs(s, a) = rng.uniform() + 1e-3;
        p.probs.row(s) /= p.probs.row(s).sum();
    }
    return p;
}

void q_checks(SuiteResult& suite, const mdp::TabularMdp& m, std::uint64_t seed, int max_offending) {
    const double l_q = mdp::lipschitz_bounds(m.l_r, m.l_p, 0.0, m.gamma).l_q;
    suite.record(q_smoothness_excess(m, mdp::value_iteration(m), l_q), 0.0, "q_star", seed, m, max_offending);
    suite.record(q_smoothness_excess(m, mdp::policy_eval(m, mdp::uniform_policy(m.n_states, m.n_actions)).q, l_q),
                 0.0, "q_uniform", seed, m, max_offending);
    auto pi = random_tabular_policy(m.n_states, m.n_actions, derive_seed(seed, {1}));
    suite.record(q_smoothness_excess(m, mdp::policy_eval(m, pi).q, l_q), 0.0, "q_random_policy", seed, m,
                 max_offending);
}

} // namespace

SuiteResult q_smoothness_suite(const CertifyOptions& opts) {
    SuiteResult suite;
    suite.name = "q_smoothness";
    suite.tolerance = 1e-8;
    for (int i = 0; i < opts.instances; ++i) {
        InstanceSpec spec = instance_spec(opts.seed, i);
        q_checks(suite, make_instance(spec), spec.seed, opts.max_offending);
        ++suite.instances;
    }
    if (opts.negative_control) {
        q_checks(suite, negative_control_instance(), 0, opts.max_offending);
        ++suite.instances;
    }
    return suite;
}

std::vector<SuiteResult> softmax_policy_suites(const CertifyOptions& opts) {
    SuiteResult gap, lip;
    gap.name = "softmax_suboptimality";
    lip.name = "softmax_lipschitz";
    gap.tolerance = lip.tolerance = 1e-8;
    for (int i = 0; i < opts.instances; ++i) {
        InstanceSpec spec = instance_spec(opts.seed, i);
        mdp::TabularMdp m = make_instance(spec);
        Eigen::MatrixXd q = mdp::value_iteration(m);
        Eigen::VectorXd v_star = q.rowwise().maxCoeff();
        const double l_q = mdp::lipschitz_bounds(m.l_r, m.l_p, 0.0, m.gamma).l_q;
        const double n_a = static_cast<double>(m.n_actions);
        for (double eps : opts.softmax_epsilons) {
            const std::string label = "epsilon=" + std::to_string(eps);
            mdp::TabularPolicy pi = mdp::softmax_policy(q, eps, m.n_actions);
            mdp::ValuePair vp = mdp::policy_eval(m, pi);
            gap.record((v_star - vp.v).maxCoeff(), 2.0 * eps / (1.0 - m.gamma), label, spec.seed, m,
                       opts.max_offending);
            lip.record(mdp::empirical_lipschitz(pi.probs, m.embed, mdp::OutputMetric::l1),
                       n_a * std::log(n_a) * l_q / eps, label, spec.seed, m, opts.max_offending);
        }
        ++gap.instances;
        ++lip.instances;
    }
    return {gap, lip};
}

SuiteResult perturbed_value_suite(const CertifyOptions& opts) {
    SuiteResult suite;
    suite.name = "perturbed_value_gap";
    suite.tolerance = 2e-6;
    for (int i = 0; i < opts.gap_instances; ++i) {
        InstanceSpec spec = instance_spec(opts.seed, i);
        mdp::TabularMdp m = make_instance(spec);
        mdp::TabularPolicy pi = mdp::softmax_policy(mdp::value_iteration(m), opts.gap_policy_epsilon, m.n_actions);
        mdp::InterpolatedPolicy ip(pi, m.embed);
        const int horizon = mdp::horizon_for(m.gamma);
        for (double eps : opts.gap_epsilons) {
            mdp::GapResult r = mdp::perturbed_value_gap(m, ip, eps, horizon, opts.grid_resolution, derive_seed(spec.seed, {3}));
            suite.record(r.gap, r.bound, "epsilon=" + std::to_string(eps), spec.seed, m, opts.max_offending);
        }
        ++suite.instances;
    }
    return suite;
}

bool CertifyReport::passed() const {
    return std::all_of(suites.begin(), suites.end(), [](const SuiteResult& s) { return s.passed; });
}

json CertifyReport::to_json() const {
    json j;
    j["report"] = "theory";
    j["seed"] = options.seed;
    j["instances"] = options.instances;
    j["gap_instances"] = options.gap_instances;
    j["grid_resolution"] = options.grid_resolution;
    j["negative_control"] = options.negative_control;
    j["passed"] = passed();
    json arr = json::array();
    for (const auto& s : suites) arr.push_back(s.to_json());
    j["suites"] = arr;
    json seeds = json::array();
    for (int i = 0; i < options.instances; ++i) seeds.push_back(instance_spec(options.seed, i).seed);
    j["instance_seeds"] = seeds;
    return j;
}

CertifyReport run_certify(const CertifyOptions& opts) {
    if (opts.instances < 0 || opts.gap_instances < 0 || opts.gap_instances > opts.instances)
        throw ParameterError("certify: need 0 <= gap_instances <= instances");
    CertifyReport rep;
    rep.options = opts;
    rep.suites.push_back(q_smoothness_suite(opts));
    for (auto& s : softmax_policy_suites(opts)) rep.suites.push_back(std::move(s));
    rep.suites.push_back(perturbed_value_suite(opts));
    return rep;
}

std::string write_report(const json& report, const std::string& out_dir, const std::string& name) {
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec) throw IoError("cannot create " + out_dir + ": " + ec.message());
    const fs::path path = fs::path(out_dir) / name;
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path.string());
    out << report.dump(2) << '\n';
    if (!out) throw IoError("write failed: " + path.string());
    return path.string();
}

// ---------------------------------------------------------------- gradient checks

namespace {

double rel_err(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
    return (a - b).norm() / std::max({a.norm(), b.norm(), 1e-12});
}

Eigen::VectorXd fd_params(const nn::Net& net, const std::function<double(const nn::Net&)>& f) {
    Eigen::VectorXd theta = net.params();
    Eigen::VectorXd g(theta.size());
    nn::Net probe = net;
    for (Eigen::Index i = 0; i < theta.size(); ++i) {
        const double h = 1e-5 * (1.0 + std::abs(theta[i]));
        Eigen::VectorXd tp = theta, tm = theta;
        tp[i] += h;
        tm[i] -= h;
        probe.set_params(tp);
        const double fp = f(probe);
        probe.set_params(tm);
        const double fm = f(probe);
        g[i] = (fp - fm) / (2 * h);
    }
    return g;
}

Eigen::VectorXd fd_input(const nn::Net& net, const Eigen::VectorXd& x, const Eigen::VectorXd& u) {
    Eigen::VectorXd g(x.size());
    for (Eigen::Index i = 0; i < x.size(); ++i) {
        const double h = 1e-5 * (1.0 + std::abs(x[i]));
        Eigen::VectorXd xp = x, xm = x;
        xp[i] += h;
        xm[i] -= h;
        g[i] = (u.dot(net.forward(xp)) - u.dot(net.forward(xm))) / (2 * h);
    }
    return g;
}

GradSuite net_suite(const GradcheckOptions& opts) {
    GradSuite s;
    s.name = "net_parameter_and_input_gradients";
    s.tolerance = opts.tolerance;
    Rng rng(derive_seed(opts.seed, {1}));
    for (int trial = 0; s.cases < opts.nets && trial < 50 * opts.nets; ++trial) {
        const int in = 1 + rng.index(5), hidden = 2 + rng.index(8), out = 1 + rng.index(4);
        const nn::Activation act = trial % 2 == 0 ? nn::Activation::relu : nn::Activation::tanh;
        nn::Net net = nn::net_init({in, hidden, hidden, out}, act, derive_seed(opts.seed, {2, static_cast<std::uint64_t>(trial)}), 1.5);
        for (auto& layer : net.layers()) layer.bias = rng.normal_vector(layer.bias.size()) * 0.1;
        Eigen::VectorXd x = rng.normal_vector(in);
        Eigen::VectorXd u = rng.normal_vector(out);
        if (nn::min_abs_preactivation(net, x) < 1e-3) continue;
        nn::GradBundle g = nn::net_grads(net, x, u);
        const double e_in = rel_err(g.grad_input, fd_input(net, x, u));
        const double e_par = rel_err(g.grad_params, fd_params(net, [&](const nn::Net& n) { return u.dot(n.forward(x)); }));
        s.max_rel_error = std::max({s.max_rel_error, e_in, e_par});
        ++s.cases;
    }
    s.passed = s.cases == opts.nets && s.max_rel_error < s.tolerance;
    return s;
}

adv::PolicyNet random_policy(Rng& rng, std::uint64_t seed, adv::Head head) {
    const int in = 2 + rng.index(4), hidden = 3 + rng.index(10), out = 2 + rng.index(3);
    nn::Net net = nn::net_init({in, hidden, out}, nn::Activation::tanh, seed, 2.0);
    for (auto& layer : net.layers()) layer.bias = rng.normal_vector(layer.bias.size()) * 0.2;
    return {net, head};
}

GradSuite stackelberg_suite(const GradcheckOptions& opts, int k) {
    GradSuite s;
    s.name = "stackelberg_total_derivative_k" + std::to_string(k);
    s.tolerance = opts.tolerance;
    Rng rng(derive_seed(opts.seed, {10, static_cast<std::uint64_t>(k)}));
    bool all_exact = true;
    for (int trial = 0; trial < opts.nets; ++trial) {
        const adv::Head head = trial % 3 == 0 ? adv::Head::softmax : (trial % 3 == 1 ? adv::Head::tanh : adv::Head::linear);
        adv::PolicyNet policy = random_policy(rng, derive_seed(opts.seed, {11, static_cast<std::uint64_t>(k),
                                                                           static_cast<std::uint64_t>(trial)}), head);
        adv::AttackConfig cfg;
        cfg.epsilon = 0.3;
        cfg.k_steps = k;
        cfg.metric = head == adv::Head::softmax ? adv::Metric::kl : adv::Metric::sq_l2;
        cfg.norm = trial % 4 == 3 ? adv::Norm::linf : adv::Norm::l2;
        cfg.init_fraction = 0.5;
        cfg.seed = derive_seed(opts.seed, {12, static_cast<std::uint64_t>(trial)});
        Eigen::VectorXd obs = rng.normal_vector(policy.net.input_dim());
        Eigen::VectorXd analytic = adv::stackelberg_grad(policy, obs, cfg);
        Eigen::VectorXd oracle = fd_params(policy.net, [&](const nn::Net& n) {
            adv::PolicyNet probe{n, policy.head};
            return adv::attacked_regularizer(probe, obs, cfg);
        });
        s.max_rel_error = std::max(s.max_rel_error, rel_err(analytic, oracle));
        if (k == 0) all_exact = all_exact && analytic == adv::vanilla_reg_term(policy, obs, cfg).grad_theta;
        ++s.cases;
    }
    s.exact = k == 0 && all_exact;
    s.passed = s.max_rel_error < s.tolerance && (k != 0 || s.exact);
    return s;
}

} // namespace

json GradSuite::to_json() const {
    return {{"name", name},          {"passed", passed},      {"cases", cases},
            {"max_rel_error", max_rel_error}, {"tolerance", tolerance}, {"exact_match", exact}};
}

bool GradcheckReport::passed() const {
    return std::all_of(suites.begin(), suites.end(), [](const GradSuite& s) { return s.passed; });
}

json GradcheckReport::to_json() const {
    json j;
    j["report"] = "gradcheck";
    j["seed"] = options.seed;
    j["passed"] = passed();
    double worst = 0.0;
    json arr = json::array();
    for (const auto& s : suites) {
        arr.push_back(s.to_json());
        worst = std::max(worst, s.max_rel_error);
    }
    j["max_rel_error"] = worst;
    j["suites"] = arr;
    return j;
}

GradcheckReport run_gradcheck(const GradcheckOptions& opts) {
    if (opts.nets < 1) throw ParameterError("gradcheck: nets must be >= 1");
    GradcheckReport rep;
    rep.options = opts;
    rep.suites.push_back(net_suite(opts));
    for (int k : opts.stackelberg_steps) rep.suites.push_back(stackelberg_suite(opts, k));
    return rep;
}

} // namespace ernie::certify
