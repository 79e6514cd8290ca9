#include "ernie/adv_reg.hpp"

#include <algorithm>
#include <cmath>

#include "ernie/errors.hpp"
#include "ernie/rng.hpp"

namespace ernie::adv {

std::string to_string(Norm n) { return n == Norm::l2 ? "l2" : "linf"; }
std::string to_string(Metric m) { return m == Metric::kl ? "kl" : "sq_l2"; }
std::string to_string(Init i) { return i == Init::zero ? "zero" : "random_ball"; }
std::string to_string(Head h) {
    switch (h) {
    case Head::linear: return "linear";
    case Head::softmax: return "softmax";
    case Head::tanh: return "tanh";
    }
    return "linear";
}

Norm norm_from_string(const std::string& s) {
    if (s == "l2") return Norm::l2;
    if (s == "linf") return Norm::linf;
    throw ParameterError("unknown norm: " + s);
}
Metric metric_from_string(const std::string& s) {
    if (s == "kl") return Metric::kl;
    if (s == "sq_l2") return Metric::sq_l2;
    throw ParameterError("unknown metric: " + s);
}
Init init_from_string(const std::string& s) {
    if (s == "zero") return Init::zero;
    if (s == "random_ball") return Init::random_ball;
    throw ParameterError("unknown init: " + s);
}
Head head_from_string(const std::string& s) {
    if (s == "linear") return Head::linear;
    if (s == "softmax") return Head::softmax;
    if (s == "tanh") return Head::tanh;
    throw ParameterError("unknown head: " + s);
}

namespace {

Eigen::MatrixXd apply_head(Head head, Eigen::MatrixXd z) {
    switch (head) {
    case Head::linear: return z;
    case Head::tanh: return z.array().tanh().matrix();
    case Head::softmax: {
        for (Eigen::Index c = 0; c < z.cols(); ++c) {
            z.col(c).array() -= z.col(c).maxCoeff();
            z.col(c) = z.col(c).array().exp().matrix();
            z.col(c) /= z.col(c).sum();
        }
        return z;
    }
    }
    return z;
}

void require_finite(const Eigen::MatrixXd& m, const char* what) {
    if (!m.allFinite()) throw NumericError(std::string("non-finite ") + what);
}

constexpr double kKlFloor = 1e-12;

} // namespace

Eigen::VectorXd PolicyNet::operator()(const Eigen::VectorXd& x) const { return apply_head(head, net.forward_batch(x)); }

Eigen::MatrixXd PolicyNet::batch(const Eigen::MatrixXd& x) const { return apply_head(head, net.forward_batch(x)); }

Eigen::MatrixXd head_backward(Head head, const Eigen::MatrixXd& y, const Eigen::MatrixXd& upstream) {
    switch (head) {
    case Head::linear: return upstream;
    case Head::tanh: return (upstream.array() * (1.0 - y.array() * y.array())).matrix();
    case Head::softmax: {
        Eigen::MatrixXd g(upstream.rows(), upstream.cols());
        for (Eigen::Index c = 0; c < y.cols(); ++c) {
            double dot = upstream.col(c).dot(y.col(c));
            g.col(c) = y.col(c).cwiseProduct(upstream.col(c).array().matrix() - Eigen::VectorXd::Constant(y.rows(), dot));
        }
        return g;
    }
    }
    return upstream;
}

void AttackConfig::validate() const {
    if (epsilon < 0.0) throw ParameterError("attack: epsilon must be >= 0");
    if (k_steps < 0) throw ParameterError("attack: k_steps must be >= 0");
    if (k_steps > 0 && epsilon > 0.0 && !(step_size() > 0.0)) throw ParameterError("attack: eta must be > 0");
    if (init_fraction < 0.0 || init_fraction > 1.0) throw ParameterError("attack: init_fraction must lie in [0,1]");
}

namespace {

void check_simplex(const Eigen::VectorXd& p) {
    if (p.minCoeff() < 0.0 || std::abs(p.sum() - 1.0) > 1e-9)
        throw DomainError("kl divergence requires probability vectors");
}

} // namespace

DivergenceGrad divergence_grad(const Eigen::VectorXd& out_a, const Eigen::VectorXd& out_b, Metric metric) {
    if (out_a.size() != out_b.size()) throw ShapeError("divergence: dimension mismatch");
    DivergenceGrad g;
    if (metric == Metric::sq_l2) {
        Eigen::VectorXd diff = out_a - out_b;
        g.value = diff.squaredNorm();
        g.d_a = 2.0 * diff;
        g.d_b = -2.0 * diff;
        return g;
    }
    check_simplex(out_a);
    check_simplex(out_b);
    g.d_a.resize(out_a.size());
    g.d_b.resize(out_a.size());
    for (Eigen::Index i = 0; i < out_a.size(); ++i) {
        double a = out_a[i];
        double b = std::max(out_b[i], kKlFloor);
        if (a > 0.0) {
            g.value += a * std::log(a / b);
            g.d_a[i] = std::log(a / b) + 1.0;
        } else {
            g.d_a[i] = std::log(kKlFloor / b) + 1.0;
        }
        g.d_b[i] = out_b[i] > kKlFloor ? -a / b : 0.0;
    }
    g.value = std::max(g.value, 0.0);
    return g;
}

double divergence(const Eigen::VectorXd& out_a, const Eigen::VectorXd& out_b, Metric metric) {
    return divergence_grad(out_a, out_b, metric).value;
}

double delta_norm(const Eigen::VectorXd& delta, Norm norm) {
    return norm == Norm::l2 ? delta.norm() : (delta.size() ? delta.lpNorm<Eigen::Infinity>() : 0.0);
}

Eigen::VectorXd project(const Eigen::VectorXd& z, double epsilon, Norm norm) {
    if (norm == Norm::linf) return z.cwiseMax(-epsilon).cwiseMin(epsilon);
    double n = z.norm();
    if (n <= epsilon) return z;
    return z * (epsilon / n);
}

namespace {

// Transpose of the projection Jacobian at z, applied to w (the Jacobian is symmetric).
Eigen::VectorXd project_jacobian_t(const Eigen::VectorXd& z, const Eigen::VectorXd& w, double epsilon, Norm norm) {
    if (norm == Norm::linf) {
        Eigen::VectorXd out = w;
        for (Eigen::Index i = 0; i < z.size(); ++i)
            if (std::abs(z[i]) > epsilon) out[i] = 0.0;
        return out;
    }
    double n = z.norm();
    if (n <= epsilon) return w;
    Eigen::VectorXd u = z / n;
    return (epsilon / n) * (w - u * u.dot(w));
}

int attacked_rows(const PolicyNet& policy, const AttackConfig& cfg) {
    int in = policy.net.input_dim();
    if (cfg.perturb_dims < 0) return in;
    if (cfg.perturb_dims > in) throw ShapeError("attack: perturb_dims exceeds the input dimension");
    return cfg.perturb_dims;
}

struct JointGrad {
    Eigen::VectorXd values;      // per column
    Eigen::VectorXd grad_theta;  // summed over columns
    Eigen::MatrixXd grad_delta;  // per column
};

// Gradient of sum_j D(pi(o_j + delta_j), pi(o_j)) w.r.t. delta (and theta when requested).
JointGrad joint_grad(const PolicyNet& policy, const Eigen::MatrixXd& obs, const Eigen::MatrixXd& delta, Metric metric,
                     bool want_theta) {
    const nn::Net& net = policy.net;
    Eigen::MatrixXd perturbed = obs;
    perturbed.topRows(delta.rows()) += delta;

    nn::Tape tape_a = net.forward_tape(perturbed);
    Eigen::MatrixXd y_a = apply_head(policy.head, tape_a.output);
    nn::Tape tape_b;
    Eigen::MatrixXd y_b;
    if (want_theta) {
        tape_b = net.forward_tape(obs);
        y_b = apply_head(policy.head, tape_b.output);
    } else {
        y_b = policy.batch(obs);
    }

    JointGrad out;
    out.values.resize(obs.cols());
    Eigen::MatrixXd up_a(y_a.rows(), y_a.cols());
    Eigen::MatrixXd up_b(y_b.rows(), y_b.cols());
    for (Eigen::Index c = 0; c < obs.cols(); ++c) {
        DivergenceGrad g = divergence_grad(y_a.col(c), y_b.col(c), metric);
        out.values[c] = g.value;
        up_a.col(c) = g.d_a;
        up_b.col(c) = g.d_b;
    }
    nn::BatchGrads ga = net.backward(tape_a, head_backward(policy.head, y_a, up_a), want_theta);
    out.grad_delta = ga.grad_input.topRows(delta.rows());
    require_finite(out.grad_delta, "attack gradient");
    if (want_theta) {
        nn::BatchGrads gb = net.backward(tape_b, head_backward(policy.head, y_b, up_b), true);
        out.grad_theta = ga.grad_params + gb.grad_params;
        require_finite(out.grad_theta, "regularizer gradient");
    }
    return out;
}

// delta^0 per column, then the ascent iterates. z_k is the pre-projection point of step k.
struct AttackTrace {
    std::vector<Eigen::MatrixXd> deltas;  // delta^0 .. delta^K
    std::vector<Eigen::MatrixXd> z;       // z_0 .. z_{K-1}
};

AttackTrace run_attack(const PolicyNet& policy, const Eigen::MatrixXd& obs, const AttackConfig& cfg) {
    cfg.validate();
    const int rows = attacked_rows(policy, cfg);
    AttackTrace trace;
    Eigen::MatrixXd delta(rows, obs.cols());
    for (Eigen::Index c = 0; c < obs.cols(); ++c)
        delta.col(c) = initial_delta(rows, cfg, derive_seed(cfg.seed, {static_cast<std::uint64_t>(c)}));
    trace.deltas.push_back(delta);
    const double eta = cfg.step_size();
    for (int k = 0; k < cfg.k_steps; ++k) {
        JointGrad g = joint_grad(policy, obs, delta, cfg.metric, false);
        Eigen::MatrixXd z = delta + eta * g.grad_delta;
        if (cfg.project_each_step)
            for (Eigen::Index c = 0; c < z.cols(); ++c) delta.col(c) = project(z.col(c), cfg.epsilon, cfg.norm);
        else
            delta = z;
        trace.z.push_back(std::move(z));
        trace.deltas.push_back(delta);
    }
    return trace;
}

double mean_norm(const Eigen::MatrixXd& delta, Norm norm) {
    if (delta.cols() == 0) return 0.0;
    double total = 0.0;
    for (Eigen::Index c = 0; c < delta.cols(); ++c) total += delta_norm(delta.col(c), norm);
    return total / static_cast<double>(delta.cols());
}

RegTerm single(const BatchRegTerm& b) { return {b.delta.col(0), b.value, b.grad_theta}; }

void check_obs(const PolicyNet& policy, const Eigen::MatrixXd& obs) {
    if (obs.rows() != policy.net.input_dim()) throw ShapeError("attack: observation dimension mismatch");
}

} // namespace

Eigen::VectorXd initial_delta(int dim, const AttackConfig& cfg, std::uint64_t stream) {
    if (cfg.init == Init::zero || cfg.epsilon == 0.0 || cfg.init_fraction == 0.0) return Eigen::VectorXd::Zero(dim);
    Rng rng(stream);
    double radius = cfg.init_fraction * cfg.epsilon;
    return cfg.norm == Norm::l2 ? rng.in_l2_ball(dim, radius) : rng.in_linf_ball(dim, radius);
}

Eigen::MatrixXd pgd_attack_batch(const PolicyNet& policy, const Eigen::MatrixXd& obs, const AttackConfig& cfg) {
    check_obs(policy, obs);
    return run_attack(policy, obs, cfg).deltas.back();
}

Eigen::VectorXd pgd_attack(const PolicyNet& policy, const Eigen::VectorXd& obs, const AttackConfig& cfg) {
    return pgd_attack_batch(policy, obs, cfg).col(0);
}

double regularizer(const PolicyNet& policy, const Eigen::VectorXd& obs, const Eigen::VectorXd& delta, Metric metric) {
    if (obs.size() != policy.net.input_dim() || delta.size() > obs.size())
        throw ShapeError("regularizer: dimension mismatch");
    Eigen::VectorXd perturbed = obs;
    perturbed.head(delta.size()) += delta;
    return divergence(policy(perturbed), policy(obs), metric);
}

Eigen::VectorXd gaussian_delta(int dim, double sigma, std::uint64_t seed) {
    if (sigma < 0.0) throw ParameterError("gaussian_delta: sigma must be >= 0");
    Rng rng(seed);
    return rng.normal_vector(dim) * sigma;
}

BatchRegTerm vanilla_reg_term_batch(const PolicyNet& policy, const Eigen::MatrixXd& obs, const AttackConfig& cfg) {
    check_obs(policy, obs);
    AttackTrace trace = run_attack(policy, obs, cfg);
    JointGrad g = joint_grad(policy, obs, trace.deltas.back(), cfg.metric, true);
    const double n = static_cast<double>(obs.cols());
    BatchRegTerm out;
    out.delta = std::move(trace.deltas.back());
    out.value = g.values.sum() / n;
    out.grad_theta = g.grad_theta / n;
    out.mean_delta_norm = mean_norm(out.delta, cfg.norm);
    return out;
}

RegTerm vanilla_reg_term(const PolicyNet& policy, const Eigen::VectorXd& obs, const AttackConfig& cfg) {
    return single(vanilla_reg_term_batch(policy, obs, cfg));
}

BatchRegTerm stackelberg_reg_term_batch(const PolicyNet& policy, const Eigen::MatrixXd& obs, const AttackConfig& cfg,
                                        double fd_step) {
    check_obs(policy, obs);
    AttackTrace trace = run_attack(policy, obs, cfg);
    const double eta = cfg.step_size();
    const Eigen::Index rows = trace.deltas.front().rows();
    const Eigen::Index cols = obs.cols();

    JointGrad final_grad = joint_grad(policy, obs, trace.deltas.back(), cfg.metric, true);
    Eigen::VectorXd total = final_grad.grad_theta;
    Eigen::MatrixXd adjoint = final_grad.grad_delta;  // dR / d delta^k

    for (int k = cfg.k_steps - 1; k >= 0; --k) {
        // w = J_P(z_k)^T adjoint
        Eigen::MatrixXd w(rows, cols);
        for (Eigen::Index c = 0; c < cols; ++c)
            w.col(c) = cfg.project_each_step ? project_jacobian_t(trace.z[k].col(c), adjoint.col(c), cfg.epsilon, cfg.norm)
                                             : Eigen::VectorXd(adjoint.col(c));
        if (w.norm() == 0.0) {
            adjoint.setZero();
            continue;
        }
        // Directional derivative of (grad_theta D, grad_delta D) along w at delta^k:
        // returns (H_theta,delta w, H_delta,delta w) stacked.
        const Eigen::MatrixXd& at = trace.deltas[k];
        const Eigen::Index n_theta = total.size();
        nn::GradFn stacked = [&](const Eigen::VectorXd& flat_delta) {
            Eigen::MatrixXd d = flat_delta.reshaped(rows, cols);
            JointGrad g = joint_grad(policy, obs, d, cfg.metric, true);
            Eigen::VectorXd out(n_theta + rows * cols);
            out.head(n_theta) = g.grad_theta;
            out.tail(rows * cols) = g.grad_delta.reshaped();
            return out;
        };
        Eigen::VectorXd point = at.reshaped();
        double h = fd_step > 0.0 ? fd_step : nn::default_fd_step(point);
        Eigen::VectorXd prod = nn::hvp(stacked, point, w.reshaped(), h);
        require_finite(prod, "Hessian-vector product");

        total += eta * prod.head(n_theta);
        adjoint = w + eta * prod.tail(rows * cols).reshaped(rows, cols);
    }

    const double n = static_cast<double>(cols);
    BatchRegTerm out;
    out.delta = std::move(trace.deltas.back());
    out.value = final_grad.values.sum() / n;
    out.grad_theta = total / n;
    out.mean_delta_norm = mean_norm(out.delta, cfg.norm);
    return out;
}

RegTerm stackelberg_reg_term(const PolicyNet& policy, const Eigen::VectorXd& obs, const AttackConfig& cfg,
                             double fd_step) {
    return single(stackelberg_reg_term_batch(policy, obs, cfg, fd_step));
}

Eigen::VectorXd stackelberg_grad(const PolicyNet& policy, const Eigen::VectorXd& obs, const AttackConfig& cfg) {
    return stackelberg_reg_term(policy, obs, cfg).grad_theta;
}

BatchRegTerm gaussian_reg_term_batch(const PolicyNet& policy, const Eigen::MatrixXd& obs, double sigma, Metric metric,
                                     std::uint64_t seed, int perturb_dims) {
    check_obs(policy, obs);
    int rows = perturb_dims < 0 ? policy.net.input_dim() : perturb_dims;
    Eigen::MatrixXd delta(rows, obs.cols());
    for (Eigen::Index c = 0; c < obs.cols(); ++c)
        delta.col(c) = gaussian_delta(rows, sigma, derive_seed(seed, {static_cast<std::uint64_t>(c)}));
    JointGrad g = joint_grad(policy, obs, delta, metric, true);
    const double n = static_cast<double>(obs.cols());
    BatchRegTerm out;
    out.value = g.values.sum() / n;
    out.grad_theta = g.grad_theta / n;
    out.mean_delta_norm = mean_norm(delta, Norm::l2);
    out.delta = std::move(delta);
    return out;
}

double attacked_regularizer(const PolicyNet& policy, const Eigen::VectorXd& obs, const AttackConfig& cfg) {
    Eigen::VectorXd delta = pgd_attack(policy, obs, cfg);
    return regularizer(policy, obs, delta, cfg.metric);
}

Eigen::VectorXd regularized_grad(const Eigen::VectorXd& base_grad, const std::vector<Eigen::VectorXd>& reg_grads,
                                 double lambda) {
    for (const auto& g : reg_grads)
        if (g.size() != base_grad.size()) throw ShapeError("regularized_grad: shape mismatch");
    if (lambda == 0.0 || reg_grads.empty()) return base_grad;
    Eigen::VectorXd mean = Eigen::VectorXd::Zero(base_grad.size());
    for (const auto& g : reg_grads) mean += g;
    mean /= static_cast<double>(reg_grads.size());
    return base_grad + lambda * mean;
}

std::vector<Eigen::VectorXd> regularized_grad(const std::vector<Eigen::VectorXd>& base_grads,
                                              const std::vector<std::vector<Eigen::VectorXd>>& reg_grads,
                                              double lambda) {
    if (base_grads.size() != reg_grads.size()) throw ShapeError("regularized_grad: agent count mismatch");
    std::vector<Eigen::VectorXd> out;
    out.reserve(base_grads.size());
    for (std::size_t i = 0; i < base_grads.size(); ++i) out.push_back(regularized_grad(base_grads[i], reg_grads[i], lambda));
    return out;
}

} // namespace ernie::adv
