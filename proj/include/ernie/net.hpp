#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

namespace ernie::nn {

/// Hidden-layer nonlinearity. The final layer is always affine.
enum class Activation { relu, tanh, identity };

std::string to_string(Activation a);
Activation activation_from_string(const std::string& s);

struct Layer {
    Eigen::MatrixXd weight;  // out x in
    Eigen::VectorXd bias;    // out
};

/// Pre-activations and activations of one batched forward pass (columns are samples).
struct Tape {
    std::vector<Eigen::MatrixXd> inputs;  // input to layer l (inputs[0] is the network input)
    std::vector<Eigen::MatrixXd> pre;     // W_l x + b_l
    Eigen::MatrixXd output;
};

/// Parameter gradient (flat, same layout as Net::params) and input gradient.
struct GradBundle {
    Eigen::VectorXd grad_params;
    Eigen::VectorXd grad_input;
};

/// Batched counterpart of GradBundle: parameter gradient summed over the batch,
/// input gradient per column.
struct BatchGrads {
    Eigen::VectorXd grad_params;
    Eigen::MatrixXd grad_input;
};

/// Small fully connected network f(x) = W_L s(... s(W_1 x + b_1) ...) + b_L in 64-bit floats.
class Net {
public:
    Net() = default;
    Net(std::vector<int> layer_dims, Activation activation);

    const std::vector<int>& layer_dims() const { return dims_; }
    Activation activation() const { return activation_; }
    int input_dim() const { return dims_.front(); }
    int output_dim() const { return dims_.back(); }
    int num_params() const { return num_params_; }

    const std::vector<Layer>& layers() const { return layers_; }
    std::vector<Layer>& layers() { return layers_; }

    /// Flat parameters: for each layer, the weight in column-major order followed by the bias.
    Eigen::VectorXd params() const;
    void set_params(const Eigen::VectorXd& flat);
    /// params += alpha * delta, without materialising the flat vector.
    void add_scaled(const Eigen::VectorXd& delta, double alpha);

    Eigen::VectorXd forward(const Eigen::VectorXd& x) const;
    Eigen::MatrixXd forward_batch(const Eigen::MatrixXd& x) const;
    Tape forward_tape(const Eigen::MatrixXd& x) const;

    /// Reverse pass for the scalar sum_j upstream.col(j) . y.col(j).
    BatchGrads backward(const Tape& tape, const Eigen::MatrixXd& upstream, bool want_params = true) const;

    bool operator==(const Net& other) const;

private:
    std::vector<int> dims_;
    Activation activation_ = Activation::relu;
    std::vector<Layer> layers_;
    int num_params_ = 0;
};

/// Weights uniform in +-scale/sqrt(fan_in), biases zero. Deterministic per (dims, seed, scale).
Net net_init(const std::vector<int>& layer_dims, Activation activation, std::uint64_t seed, double scale = 1.0);

Eigen::VectorXd net_forward(const Net& net, const Eigen::VectorXd& x);

/// Gradients of upstream . net(x) with respect to the parameters and to x.
/// The relu subgradient at 0 is 0.
GradBundle net_grads(const Net& net, const Eigen::VectorXd& x, const Eigen::VectorXd& upstream);

using GradFn = std::function<Eigen::VectorXd(const Eigen::VectorXd&)>;

/// Default finite-difference step 1e-5 * (1 + ||theta||).
double default_fd_step(const Eigen::VectorXd& theta);

/// Finite-difference Hessian-vector product: [g(theta + h' v) - g(theta - h' v)] / (2 h'),
/// h' = h / ||v||. `grad_fn` may return a vector of any length, in which case the result is
/// the directional derivative of that map along v.
Eigen::VectorXd hvp(const GradFn& grad_fn, const Eigen::VectorXd& theta, const Eigen::VectorXd& v, double h);

nlohmann::json to_json(const Net& net);
Net net_from_json(const nlohmann::json& j);

/// Smallest |pre-activation| over all hidden units for input x; used to keep
/// finite-difference checks away from relu kinks.
double min_abs_preactivation(const Net& net, const Eigen::VectorXd& x);

} // namespace ernie::nn
