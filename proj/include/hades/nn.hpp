#pragma once

// Small dense feed-forward / Elman-recurrent networks with backpropagation,
// Adam and sample-weighted MSE training. Everything is double precision.
//
// Canonical flat parameter layout, layer by layer (hidden layers first, then
// the linear output layer):
//
//     W_in   (out x in, row-major)
//     W_rec  (out x out, row-major)   -- recurrent hidden layers only
//     b      (out)
//
// A spec with hidden_layers == 0 is a single linear map input -> output.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "error.hpp"
#include "rng.hpp"

namespace hades::nn {

enum class Activation { relu, leaky_relu, elu };

inline constexpr double kLeakySlope = 0.01;
inline constexpr double kEluAlpha = 1.0;

inline std::string_view to_string(Activation a)
{
    switch (a) {
    case Activation::relu: return "relu";
    case Activation::leaky_relu: return "leaky_relu";
    case Activation::elu: return "elu";
    }
    return "relu";
}

inline Activation activation_from_string(std::string_view name)
{
    if (name == "relu")
        return Activation::relu;
    if (name == "leaky_relu")
        return Activation::leaky_relu;
    if (name == "elu")
        return Activation::elu;
    throw UsageError("unknown activation '" + std::string(name) + "'");
}

template <typename Derived>
auto activate(const Eigen::ArrayBase<Derived>& z, Activation a)
{
    using Array = Eigen::Array<typename Derived::Scalar, Eigen::Dynamic, Eigen::Dynamic>;
    switch (a) {
    case Activation::leaky_relu: return Array((z > 0).select(z, kLeakySlope * z));
    case Activation::elu: return Array((z > 0).select(z, kEluAlpha * z.expm1()));
    case Activation::relu: break;
    }
    return Array(z.max(0.0));
}

/// Derivative of the activation, expressed in terms of the pre-activation z.
template <typename Derived>
auto activate_derivative(const Eigen::ArrayBase<Derived>& z, Activation a)
{
    using Array = Eigen::Array<typename Derived::Scalar, Eigen::Dynamic, Eigen::Dynamic>;
    switch (a) {
    case Activation::leaky_relu: return Array((z > 0).select(Array::Ones(z.rows(), z.cols()), kLeakySlope));
    case Activation::elu: return Array((z > 0).select(Array::Ones(z.rows(), z.cols()), kEluAlpha * z.exp()));
    case Activation::relu: break;
    }
    return Array((z > 0).template cast<double>());
}

struct NetSpec {
    std::size_t input_dim = 1;
    std::size_t hidden_layers = 1;
    std::size_t hidden_units = 1;
    std::size_t output_dim = 1;
    Activation activation = Activation::relu;
    bool recurrent = false;

    friend bool operator==(const NetSpec&, const NetSpec&) = default;

    void validate() const
    {
        if (input_dim == 0 || output_dim == 0)
            throw UsageError("NetSpec: input_dim and output_dim must be >= 1");
        if (hidden_layers > 0 && hidden_units == 0)
            throw UsageError("NetSpec: hidden_units must be >= 1");
        if (recurrent && hidden_layers == 0)
            throw UsageError("NetSpec: a recurrent net needs at least one hidden layer");
    }
};

struct LayerShape {
    std::size_t in = 0;
    std::size_t out = 0;
    bool recurrent = false;
    bool hidden = false;
    std::size_t weight_offset = 0;
    std::size_t recurrent_offset = 0;
    std::size_t bias_offset = 0;
    std::size_t end = 0;
};

inline std::vector<LayerShape> layer_shapes(const NetSpec& spec)
{
    spec.validate();
    std::vector<LayerShape> layers;
    std::size_t offset = 0;
    std::size_t in = spec.input_dim;
    auto push = [&](std::size_t out, bool hidden) {
        LayerShape l;
        l.in = in;
        l.out = out;
        l.hidden = hidden;
        l.recurrent = hidden && spec.recurrent;
        l.weight_offset = offset;
        offset += out * in;
        l.recurrent_offset = offset;
        if (l.recurrent)
            offset += out * out;
        l.bias_offset = offset;
        offset += out;
        l.end = offset;
        layers.push_back(l);
        in = out;
    };
    for (std::size_t i = 0; i < spec.hidden_layers; ++i)
        push(spec.hidden_units, true);
    push(spec.output_dim, false);
    return layers;
}

inline std::size_t parameter_count(const NetSpec& spec)
{
    return layer_shapes(spec).back().end;
}

using RowMajorMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixView = Eigen::Map<RowMajorMatrix>;
using ConstMatrixView = Eigen::Map<const RowMajorMatrix>;
using VectorView = Eigen::Map<Eigen::VectorXd>;
using ConstVectorView = Eigen::Map<const Eigen::VectorXd>;

/// A network's parameters: a spec plus one flat vector in canonical order.
class NetParams {
public:
    NetParams() = default;

    explicit NetParams(NetSpec spec)
        : spec_(spec), layers_(layer_shapes(spec)), values_(Eigen::VectorXd::Zero(layers_.back().end))
    {
    }

    NetParams(NetSpec spec, Eigen::VectorXd values)
        : spec_(spec), layers_(layer_shapes(spec)), values_(std::move(values))
    {
        if (static_cast<std::size_t>(values_.size()) != layers_.back().end)
            throw UsageError("NetParams: expected " + std::to_string(layers_.back().end) + " values, got "
                             + std::to_string(values_.size()));
    }

    const NetSpec& spec() const noexcept { return spec_; }
    const std::vector<LayerShape>& layers() const noexcept { return layers_; }
    const Eigen::VectorXd& values() const noexcept { return values_; }
    Eigen::VectorXd& values() noexcept { return values_; }
    std::size_t size() const noexcept { return static_cast<std::size_t>(values_.size()); }

    ConstMatrixView weights(std::size_t l) const
    {
        const auto& s = layers_.at(l);
        return {values_.data() + s.weight_offset, Eigen::Index(s.out), Eigen::Index(s.in)};
    }
    MatrixView weights(std::size_t l)
    {
        const auto& s = layers_.at(l);
        return {values_.data() + s.weight_offset, Eigen::Index(s.out), Eigen::Index(s.in)};
    }
    ConstMatrixView recurrent_weights(std::size_t l) const
    {
        const auto& s = layers_.at(l);
        return {values_.data() + s.recurrent_offset, Eigen::Index(s.recurrent ? s.out : 0), Eigen::Index(s.out)};
    }
    MatrixView recurrent_weights(std::size_t l)
    {
        const auto& s = layers_.at(l);
        return {values_.data() + s.recurrent_offset, Eigen::Index(s.recurrent ? s.out : 0), Eigen::Index(s.out)};
    }
    ConstVectorView bias(std::size_t l) const
    {
        const auto& s = layers_.at(l);
        return {values_.data() + s.bias_offset, Eigen::Index(s.out)};
    }
    VectorView bias(std::size_t l)
    {
        const auto& s = layers_.at(l);
        return {values_.data() + s.bias_offset, Eigen::Index(s.out)};
    }

    friend bool operator==(const NetParams& a, const NetParams& b)
    {
        return a.spec_ == b.spec_ && a.values_ == b.values_;
    }

private:
    NetSpec spec_{};
    std::vector<LayerShape> layers_;
    Eigen::VectorXd values_;
};

/// Structured per-layer view of the parameters (the "unflattened" form).
struct LayerParams {
    Eigen::MatrixXd weights;
    Eigen::MatrixXd recurrent; // 0x0 for non-recurrent layers
    Eigen::VectorXd bias;
};

inline std::vector<LayerParams> unflatten(const NetParams& p)
{
    std::vector<LayerParams> out;
    for (std::size_t l = 0; l < p.layers().size(); ++l)
        out.push_back({p.weights(l), p.recurrent_weights(l), p.bias(l)});
    return out;
}

inline NetParams flatten(const NetSpec& spec, const std::vector<LayerParams>& layers)
{
    NetParams p(spec);
    if (layers.size() != p.layers().size())
        throw UsageError("flatten: layer count mismatch");
    for (std::size_t l = 0; l < layers.size(); ++l) {
        auto w = p.weights(l);
        auto r = p.recurrent_weights(l);
        auto b = p.bias(l);
        if (layers[l].weights.rows() != w.rows() || layers[l].weights.cols() != w.cols()
            || layers[l].recurrent.rows() != r.rows() || (r.rows() > 0 && layers[l].recurrent.cols() != r.cols())
            || layers[l].bias.size() != b.size())
            throw UsageError("flatten: layer " + std::to_string(l) + " shape mismatch");
        w = layers[l].weights;
        if (r.rows() > 0)
            r = layers[l].recurrent;
        b = layers[l].bias;
    }
    return p;
}

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for every weight and bias.
inline NetParams init_params(const NetSpec& spec, Rng& rng)
{
    NetParams p(spec);
    for (const auto& l : p.layers()) {
        const double fan_in = static_cast<double>(l.in + (l.recurrent ? l.out : 0));
        std::uniform_real_distribution<double> dist(-1.0 / std::sqrt(fan_in), 1.0 / std::sqrt(fan_in));
        for (std::size_t i = l.weight_offset; i < l.end; ++i)
            p.values()[Eigen::Index(i)] = dist(rng);
    }
    return p;
}

using HiddenState = std::vector<Eigen::VectorXd>;

inline HiddenState zero_state(const NetSpec& spec)
{
    if (!spec.recurrent)
        return {};
    return HiddenState(spec.hidden_layers, Eigen::VectorXd::Zero(Eigen::Index(spec.hidden_units)));
}

/// Step-by-step evaluator with preallocated buffers. For recurrent specs the
/// hidden state persists across step() calls until reset().
class Evaluator {
public:
    explicit Evaluator(const NetParams& params) : params_(&params), state_(zero_state(params.spec()))
    {
        for (const auto& l : params.layers())
            scratch_.emplace_back(Eigen::Index(l.out));
    }

    void reset() { state_ = zero_state(params_->spec()); }

    const HiddenState& state() const noexcept { return state_; }

    void set_state(HiddenState s)
    {
        if (!params_->spec().recurrent)
            throw UsageError("Evaluator: state supplied to a feed-forward net");
        if (s.size() != state_.size())
            throw UsageError("Evaluator: hidden state layer count mismatch");
        for (std::size_t i = 0; i < s.size(); ++i)
            if (s[i].size() != state_[i].size())
                throw UsageError("Evaluator: hidden state size mismatch");
        state_ = std::move(s);
    }

    const Eigen::VectorXd& step(std::span<const double> input)
    {
        const auto& spec = params_->spec();
        if (input.size() != spec.input_dim)
            throw UsageError("net_forward: expected input of length " + std::to_string(spec.input_dim) + ", got "
                             + std::to_string(input.size()));
        Eigen::Map<const Eigen::VectorXd> x(input.data(), Eigen::Index(input.size()));
        const auto& layers = params_->layers();
        for (std::size_t l = 0; l < layers.size(); ++l) {
            auto& z = scratch_[l];
            if (l == 0)
                z.noalias() = params_->weights(l) * x;
            else
                z.noalias() = params_->weights(l) * scratch_[l - 1];
            if (layers[l].recurrent)
                z.noalias() += params_->recurrent_weights(l) * state_[l];
            z += params_->bias(l);
            if (layers[l].hidden) {
                z = activate(z.array(), spec.activation).matrix();
                if (layers[l].recurrent)
                    state_[l] = z;
            }
        }
        return scratch_.back();
    }

private:
    const NetParams* params_;
    HiddenState state_;
    std::vector<Eigen::VectorXd> scratch_;
};

struct ForwardResult {
    Eigen::VectorXd output;
    std::optional<HiddenState> state;
};

/// Single-sample evaluation. `state` must be present iff the network is recurrent.
inline ForwardResult forward(const NetParams& params, std::span<const double> input,
                             std::optional<HiddenState> state = std::nullopt)
{
    if (params.spec().recurrent != state.has_value())
        throw UsageError(params.spec().recurrent ? "net_forward: recurrent net requires a hidden state"
                                                 : "net_forward: feed-forward net takes no hidden state");
    Evaluator ev(params);
    if (state)
        ev.set_state(std::move(*state));
    Eigen::VectorXd out = ev.step(input);
    if (params.spec().recurrent)
        return {std::move(out), ev.state()};
    return {std::move(out), std::nullopt};
}

/// Batched feed-forward evaluation; one sample per column.
inline Eigen::MatrixXd forward_batch(const NetParams& params, const Eigen::MatrixXd& inputs)
{
    const auto& spec = params.spec();
    if (spec.recurrent)
        throw UsageError("forward_batch: recurrent nets are evaluated step by step");
    if (static_cast<std::size_t>(inputs.rows()) != spec.input_dim)
        throw UsageError("forward_batch: input rows != input_dim");
    Eigen::MatrixXd a = inputs;
    const auto& layers = params.layers();
    for (std::size_t l = 0; l < layers.size(); ++l) {
        Eigen::MatrixXd z = params.weights(l) * a;
        z.colwise() += params.bias(l);
        if (layers[l].hidden)
            a = activate(z.array(), spec.activation).matrix();
        else
            a = std::move(z);
    }
    return a;
}

/// Training data, one sample per column.
struct WeightedBatch {
    Eigen::MatrixXd inputs;  // input_dim x n
    Eigen::MatrixXd targets; // output_dim x n
    Eigen::VectorXd weights; // n, finite and >= 0

    Eigen::Index size() const noexcept { return inputs.cols(); }

    void validate() const
    {
        if (targets.cols() != inputs.cols() || weights.size() != inputs.cols())
            throw UsageError("WeightedBatch: sample counts disagree");
        for (Eigen::Index i = 0; i < weights.size(); ++i)
            if (!std::isfinite(weights[i]) || weights[i] < 0.0)
                throw UsageError("WeightedBatch: weight " + std::to_string(i) + " is negative or non-finite");
    }
};

struct LossAndGrad {
    double loss = 0.0;
    Eigen::VectorXd grads;
};

/// loss = sum_i w_i |net(x_i) - y_i|^2 / sum_i w_i, and its gradient w.r.t.
/// the flat parameter vector. Feed-forward specs only.
inline LossAndGrad weighted_mse_grad(const NetParams& params, const WeightedBatch& batch)
{
    batch.validate();
    const auto& spec = params.spec();
    if (spec.recurrent)
        throw UsageError("weighted_mse_grad: recurrent nets are not trainable here");
    if (static_cast<std::size_t>(batch.inputs.rows()) != spec.input_dim
        || static_cast<std::size_t>(batch.targets.rows()) != spec.output_dim)
        throw UsageError("weighted_mse_grad: batch dimensions do not match the net");
    const double weight_sum = batch.weights.sum();
    if (!(weight_sum > 0.0))
        throw DegenerateError("weighted_mse_grad: all sample weights are zero");

    const auto& layers = params.layers();
    const std::size_t n_layers = layers.size();
    std::vector<Eigen::MatrixXd> act(n_layers);  // input to layer l
    std::vector<Eigen::MatrixXd> pre(n_layers);  // pre-activation of layer l

    const Eigen::MatrixXd* a = &batch.inputs;
    for (std::size_t l = 0; l < n_layers; ++l) {
        pre[l].noalias() = params.weights(l) * (*a);
        pre[l].colwise() += params.bias(l);
        if (l + 1 < n_layers) {
            act[l + 1] = activate(pre[l].array(), spec.activation).matrix();
            a = &act[l + 1];
        }
    }

    Eigen::MatrixXd delta = pre.back() - batch.targets;
    const Eigen::RowVectorXd sq = delta.colwise().squaredNorm();
    LossAndGrad out;
    out.loss = sq.dot(batch.weights.transpose()) / weight_sum;
    out.grads = Eigen::VectorXd::Zero(Eigen::Index(params.size()));

    delta.array().rowwise() *= (2.0 / weight_sum) * batch.weights.transpose().array();

    for (std::size_t l = n_layers; l-- > 0;) {
        const Eigen::MatrixXd& input = (l == 0) ? batch.inputs : act[l];
        const auto& s = layers[l];
        MatrixView gw(out.grads.data() + s.weight_offset, Eigen::Index(s.out), Eigen::Index(s.in));
        gw.noalias() = delta * input.transpose();
        VectorView(out.grads.data() + s.bias_offset, Eigen::Index(s.out)) = delta.rowwise().sum();
        if (l > 0) {
            Eigen::MatrixXd back = params.weights(l).transpose() * delta;
            back.array() *= activate_derivative(pre[l - 1].array(), spec.activation);
            delta = std::move(back);
        }
    }
    return out;
}

struct AdamState {
    Eigen::VectorXd first_moment;
    Eigen::VectorXd second_moment;
    std::size_t step_count = 0;
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
};

inline AdamState make_adam(std::size_t n_params, double lr, double weight_decay = 0.0)
{
    AdamState s;
    s.first_moment = Eigen::VectorXd::Zero(Eigen::Index(n_params));
    s.second_moment = Eigen::VectorXd::Zero(Eigen::Index(n_params));
    s.lr = lr;
    s.weight_decay = weight_decay;
    return s;
}

/// One Adam update with decoupled weight decay (params are scaled by
/// 1 - lr * weight_decay before the moment update is applied).
inline void adam_step(AdamState& state, NetParams& params, const Eigen::VectorXd& grads)
{
    const Eigen::Index n = Eigen::Index(params.size());
    if (grads.size() != n || state.first_moment.size() != n || state.second_moment.size() != n)
        throw UsageError("adam_step: vector lengths disagree");
    for (Eigen::Index i = 0; i < n; ++i)
        if (!std::isfinite(grads[i]))
            throw NumericError("adam_step: non-finite gradient", std::size_t(i));

    ++state.step_count;
    const double t = static_cast<double>(state.step_count);
    auto& p = params.values();
    if (state.weight_decay != 0.0)
        p *= (1.0 - state.lr * state.weight_decay);
    state.first_moment = state.beta1 * state.first_moment + (1.0 - state.beta1) * grads;
    state.second_moment = state.beta2 * state.second_moment + (1.0 - state.beta2) * grads.cwiseAbs2();
    const double c1 = 1.0 - std::pow(state.beta1, t);
    const double c2 = 1.0 - std::pow(state.beta2, t);
    p.array() -= state.lr * (state.first_moment.array() / c1)
                 / ((state.second_moment.array() / c2).sqrt() + state.eps);
}

/// Gather the columns `idx[begin, end)` of a dataset into a batch.
inline WeightedBatch gather(const WeightedBatch& data, std::span<const std::size_t> idx)
{
    WeightedBatch b;
    const auto n = Eigen::Index(idx.size());
    b.inputs.resize(data.inputs.rows(), n);
    b.targets.resize(data.targets.rows(), n);
    b.weights.resize(n);
    for (Eigen::Index j = 0; j < n; ++j) {
        const auto src = Eigen::Index(idx[std::size_t(j)]);
        b.inputs.col(j) = data.inputs.col(src);
        b.targets.col(j) = data.targets.col(src);
        b.weights[j] = data.weights[src];
    }
    return b;
}

/// Minibatch Adam training. Each batch gradient is rescaled by
/// (batch weight) / (mean dataset weight * batch size), so that one epoch
/// estimates the dataset-wide weighted loss rather than the mean of
/// per-batch normalized losses. Batches whose weights are all zero are skipped.
/// Returns one loss value per epoch (the dataset-weighted mean of the batch
/// losses seen during that epoch).
inline std::vector<double> train(NetParams& params, AdamState& optimizer, const WeightedBatch& data,
                                 std::size_t epochs, std::size_t batch_size, Rng& rng)
{
    data.validate();
    if (data.size() == 0)
        throw UsageError("train: empty dataset");
    if (batch_size == 0)
        throw UsageError("train: batch_size must be >= 1");
    const double total_weight = data.weights.sum();
    if (!(total_weight > 0.0))
        throw DegenerateError("train: all sample weights are zero");
    const double mean_weight = total_weight / double(data.size());

    std::vector<std::size_t> order(std::size_t(data.size()));
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::vector<double> trace;
    trace.reserve(epochs);

    for (std::size_t e = 0; e < epochs; ++e) {
        std::shuffle(order.begin(), order.end(), rng);
        double epoch_loss = 0.0;
        for (std::size_t start = 0; start < order.size(); start += batch_size) {
            const std::size_t end = std::min(order.size(), start + batch_size);
            auto batch = gather(data, std::span(order).subspan(start, end - start));
            const double bw = batch.weights.sum();
            if (!(bw > 0.0))
                continue;
            auto lg = weighted_mse_grad(params, batch);
            const double scale = bw / (mean_weight * double(end - start));
            lg.grads *= scale;
            epoch_loss += lg.loss * bw;
            adam_step(optimizer, params, lg.grads);
        }
        trace.push_back(epoch_loss / total_weight);
    }
    return trace;
}

} // namespace hades::nn
