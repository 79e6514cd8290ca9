#include "ernie/net.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "ernie/errors.hpp"
#include "ernie/rng.hpp"

namespace ernie::nn {

std::string to_string(Activation a) {
    switch (a) {
    case Activation::relu: return "relu";
    case Activation::tanh: return "tanh";
    case Activation::identity: return "identity";
    }
    return "relu";
}

Activation activation_from_string(const std::string& s) {
    if (s == "relu") return Activation::relu;
    if (s == "tanh") return Activation::tanh;
    if (s == "identity" || s == "identity-final") return Activation::identity;
    throw ParameterError("unknown activation: " + s);
}

Net::Net(std::vector<int> layer_dims, Activation activation) : dims_(std::move(layer_dims)), activation_(activation) {
    if (dims_.size() < 2) throw ParameterError("net: need at least input and output dims");
    for (int d : dims_)
        if (d < 1) throw ParameterError("net: layer widths must be positive");
    for (std::size_t l = 0; l + 1 < dims_.size(); ++l) {
        layers_.push_back({Eigen::MatrixXd::Zero(dims_[l + 1], dims_[l]), Eigen::VectorXd::Zero(dims_[l + 1])});
        num_params_ += dims_[l + 1] * dims_[l] + dims_[l + 1];
    }
}

Eigen::VectorXd Net::params() const {
    Eigen::VectorXd flat(num_params_);
    Eigen::Index off = 0;
    for (const auto& layer : layers_) {
        flat.segment(off, layer.weight.size()) = layer.weight.reshaped();
        off += layer.weight.size();
        flat.segment(off, layer.bias.size()) = layer.bias;
        off += layer.bias.size();
    }
    return flat;
}

void Net::set_params(const Eigen::VectorXd& flat) {
    if (flat.size() != num_params_) throw ShapeError("net: parameter vector has wrong length");
    Eigen::Index off = 0;
    for (auto& layer : layers_) {
        layer.weight.reshaped() = flat.segment(off, layer.weight.size());
        off += layer.weight.size();
        layer.bias = flat.segment(off, layer.bias.size());
        off += layer.bias.size();
    }
}

void Net::add_scaled(const Eigen::VectorXd& delta, double alpha) {
    if (delta.size() != num_params_) throw ShapeError("net: parameter delta has wrong length");
    Eigen::Index off = 0;
    for (auto& layer : layers_) {
        layer.weight.reshaped() += alpha * delta.segment(off, layer.weight.size());
        off += layer.weight.size();
        layer.bias += alpha * delta.segment(off, layer.bias.size());
        off += layer.bias.size();
    }
}

namespace {

void activate(Activation act, Eigen::MatrixXd& z) {
    switch (act) {
    case Activation::relu: z = z.cwiseMax(0.0); break;
    case Activation::tanh: z = z.array().tanh().matrix(); break;
    case Activation::identity: break;
    }
}

} // namespace

Tape Net::forward_tape(const Eigen::MatrixXd& x) const {
    if (x.rows() != input_dim()) throw ShapeError("net: input dimension mismatch");
    Tape tape;
    Eigen::MatrixXd h = x;
    for (std::size_t l = 0; l < layers_.size(); ++l) {
        tape.inputs.push_back(h);
        Eigen::MatrixXd z = layers_[l].weight * h;
        z.colwise() += layers_[l].bias;
        tape.pre.push_back(z);
        if (l + 1 < layers_.size()) activate(activation_, z);
        h = std::move(z);
    }
    tape.output = std::move(h);
    return tape;
}

Eigen::MatrixXd Net::forward_batch(const Eigen::MatrixXd& x) const {
    if (x.rows() != input_dim()) throw ShapeError("net: input dimension mismatch");
    Eigen::MatrixXd h = x;
    for (std::size_t l = 0; l < layers_.size(); ++l) {
        Eigen::MatrixXd z = layers_[l].weight * h;
        z.colwise() += layers_[l].bias;
        if (l + 1 < layers_.size()) activate(activation_, z);
        h = std::move(z);
    }
    return h;
}

Eigen::VectorXd Net::forward(const Eigen::VectorXd& x) const { return forward_batch(x); }

BatchGrads Net::backward(const Tape& tape, const Eigen::MatrixXd& upstream, bool want_params) const {
    if (upstream.rows() != output_dim() || upstream.cols() != tape.output.cols())
        throw ShapeError("net: upstream shape does not match the output");
    BatchGrads out;
    if (want_params) out.grad_params = Eigen::VectorXd::Zero(num_params_);

    // Offsets of each layer inside the flat parameter vector.
    std::vector<Eigen::Index> offsets(layers_.size());
    Eigen::Index off = 0;
    for (std::size_t l = 0; l < layers_.size(); ++l) {
        offsets[l] = off;
        off += layers_[l].weight.size() + layers_[l].bias.size();
    }

    Eigen::MatrixXd g = upstream;  // gradient w.r.t. pre-activation of the current layer
    for (std::size_t li = layers_.size(); li-- > 0;) {
        const auto& layer = layers_[li];
        if (li + 1 < layers_.size()) {
            const Eigen::MatrixXd& z = tape.pre[li];
            switch (activation_) {
            case Activation::relu: g = g.cwiseProduct((z.array() > 0.0).cast<double>().matrix()); break;
            case Activation::tanh: {
                Eigen::ArrayXXd t = z.array().tanh();
                g = (g.array() * (1.0 - t * t)).matrix();
                break;
            }
            case Activation::identity: break;
            }
        }
        if (want_params) {
            Eigen::MatrixXd gw = g * tape.inputs[li].transpose();
            out.grad_params.segment(offsets[li], gw.size()) = gw.reshaped();
            out.grad_params.segment(offsets[li] + gw.size(), layer.bias.size()) = g.rowwise().sum();
        }
        g = layer.weight.transpose() * g;
    }
    out.grad_input = std::move(g);
    return out;
}

bool Net::operator==(const Net& other) const {
    if (dims_ != other.dims_ || activation_ != other.activation_) return false;
    for (std::size_t l = 0; l < layers_.size(); ++l)
        if (layers_[l].weight != other.layers_[l].weight || layers_[l].bias != other.layers_[l].bias) return false;
    return true;
}

Net net_init(const std::vector<int>& layer_dims, Activation activation, std::uint64_t seed, double scale) {
    if (layer_dims.size() < 2) throw ParameterError("net_init: need at least two layer dims");
    if (!(scale > 0.0)) throw ParameterError("net_init: scale must be positive");
    Net net(layer_dims, activation);
    Rng rng(seed);
    for (auto& layer : net.layers()) {
        double bound = scale / std::sqrt(static_cast<double>(layer.weight.cols()));
        for (Eigen::Index c = 0; c < layer.weight.cols(); ++c)
            for (Eigen::Index r = 0; r < layer.weight.rows(); ++r) layer.weight(r, c) = rng.uniform(-bound, bound);
    }
    return net;
}

Eigen::VectorXd net_forward(const Net& net, const Eigen::VectorXd& x) { return net.forward(x); }

GradBundle net_grads(const Net& net, const Eigen::VectorXd& x, const Eigen::VectorXd& upstream) {
    if (upstream.size() != net.output_dim()) throw ShapeError("net_grads: upstream length != output dim");
    Tape tape = net.forward_tape(x);
    BatchGrads g = net.backward(tape, upstream);
    return {std::move(g.grad_params), g.grad_input.col(0)};
}

double default_fd_step(const Eigen::VectorXd& theta) { return 1e-5 * (1.0 + theta.norm()); }

Eigen::VectorXd hvp(const GradFn& grad_fn, const Eigen::VectorXd& theta, const Eigen::VectorXd& v, double h) {
    double vn = v.norm();
    if (!(vn > 0.0)) throw ParameterError("hvp: direction must be nonzero");
    if (!(h > 0.0)) throw ParameterError("hvp: step must be positive");
    if (v.size() != theta.size()) throw ShapeError("hvp: direction and point differ in length");
    double step = h / vn;
    Eigen::VectorXd plus = grad_fn(theta + step * v);
    Eigen::VectorXd minus = grad_fn(theta - step * v);
    return (plus - minus) / (2.0 * step);
}

nlohmann::json to_json(const Net& net) {
    nlohmann::json j;
    j["layer_dims"] = net.layer_dims();
    j["activation"] = to_string(net.activation());
    auto& weights = j["weights"] = nlohmann::json::array();
    auto& biases = j["biases"] = nlohmann::json::array();
    for (const auto& layer : net.layers()) {
        nlohmann::json w = nlohmann::json::array();
        for (Eigen::Index r = 0; r < layer.weight.rows(); ++r) {
            nlohmann::json row = nlohmann::json::array();
            for (Eigen::Index c = 0; c < layer.weight.cols(); ++c) row.push_back(layer.weight(r, c));
            w.push_back(row);
        }
        weights.push_back(w);
        nlohmann::json b = nlohmann::json::array();
        for (Eigen::Index r = 0; r < layer.bias.size(); ++r) b.push_back(layer.bias[r]);
        biases.push_back(b);
    }
    return j;
}

Net net_from_json(const nlohmann::json& j) {
    try {
        Net net(j.at("layer_dims").get<std::vector<int>>(), activation_from_string(j.at("activation").get<std::string>()));
        const auto& weights = j.at("weights");
        const auto& biases = j.at("biases");
        if (weights.size() != net.layers().size() || biases.size() != net.layers().size())
            throw ShapeError("net json: layer count mismatch");
        for (std::size_t l = 0; l < net.layers().size(); ++l) {
            auto& layer = net.layers()[l];
            if (weights[l].size() != static_cast<std::size_t>(layer.weight.rows()) ||
                biases[l].size() != static_cast<std::size_t>(layer.bias.size()))
                throw ShapeError("net json: layer shape mismatch");
            for (Eigen::Index r = 0; r < layer.weight.rows(); ++r) {
                if (weights[l][r].size() != static_cast<std::size_t>(layer.weight.cols()))
                    throw ShapeError("net json: weight row length mismatch");
                for (Eigen::Index c = 0; c < layer.weight.cols(); ++c) layer.weight(r, c) = weights[l][r][c].get<double>();
                layer.bias[r] = biases[l][r].get<double>();
            }
        }
        return net;
    } catch (const nlohmann::json::exception& e) {
        throw ShapeError(std::string("net json: ") + e.what());
    }
}

double min_abs_preactivation(const Net& net, const Eigen::VectorXd& x) {
    Tape tape = net.forward_tape(x);
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t l = 0; l + 1 < tape.pre.size(); ++l) best = std::min(best, tape.pre[l].cwiseAbs().minCoeff());
    return best;
}

} // namespace ernie::nn
