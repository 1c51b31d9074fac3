#pragma once

// Denoising diffusion on flat genome vectors: noise schedule, forward
// diffusion, fitness-weighted epsilon-prediction training with condition
// dropout, and DDIM sampling with classifier-free guidance.
//
// Notation: alpha_bar[t] is the cumulative signal fraction, alpha_bar[0] = 1
// and alpha_bar[T] = 0. Genomes and conditions are stored one per column.

#include <cmath>
#include <cstddef>
#include <limits>
#include <numbers>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "error.hpp"
#include "nn.hpp"
#include "rng.hpp"

namespace hades::diffusion {

struct NoiseSchedule {
    std::vector<double> alpha_bar; // length T + 1

    std::size_t steps() const noexcept { return alpha_bar.empty() ? 0 : alpha_bar.size() - 1; }
    double operator[](std::size_t t) const { return alpha_bar.at(t); }
};

/// alpha_bar_t = cos^2(pi/2 * t/T), with exact endpoints 1 and 0.
inline NoiseSchedule schedule_cosine(std::size_t steps)
{
    if (steps < 2)
        throw UsageError("schedule_cosine: need at least 2 steps");
    NoiseSchedule s;
    s.alpha_bar.resize(steps + 1);
    for (std::size_t t = 0; t <= steps; ++t) {
        const double c = std::cos(0.5 * std::numbers::pi * double(t) / double(steps));
        s.alpha_bar[t] = c * c;
    }
    s.alpha_bar.front() = 1.0;
    s.alpha_bar.back() = 0.0;
    return s;
}

/// alpha_bar_t = 1 - t/T.
inline NoiseSchedule schedule_linear(std::size_t steps)
{
    if (steps < 2)
        throw UsageError("schedule_linear: need at least 2 steps");
    NoiseSchedule s;
    s.alpha_bar.resize(steps + 1);
    for (std::size_t t = 0; t <= steps; ++t)
        s.alpha_bar[t] = 1.0 - double(t) / double(steps);
    return s;
}

enum class ScheduleKind { cosine, linear };

inline NoiseSchedule make_schedule(ScheduleKind kind, std::size_t steps)
{
    return kind == ScheduleKind::cosine ? schedule_cosine(steps) : schedule_linear(steps);
}

/// Convert a fraction of T (e.g. t_mu / T from a config) to a step index.
inline std::size_t steps_from_ratio(double ratio, std::size_t steps)
{
    if (!(ratio >= 0.0 && ratio <= 1.0))
        throw UsageError("diffusion step ratio must lie in [0, 1]");
    return static_cast<std::size_t>(std::llround(ratio * double(steps)));
}

struct Diffused {
    Eigen::VectorXd x_t;
    Eigen::VectorXd noise;
};

/// x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps, eps ~ N(0, I).
inline Diffused forward_diffuse(const Eigen::VectorXd& x0, std::size_t t, const NoiseSchedule& schedule, Rng& rng)
{
    if (t > schedule.steps())
        throw UsageError("forward_diffuse: step " + std::to_string(t) + " outside [0, T]");
    Diffused d;
    d.noise = normal_vector(x0.size(), rng);
    const double a = schedule[t];
    d.x_t = std::sqrt(a) * x0 + std::sqrt(1.0 - a) * d.noise;
    return d;
}

enum class TimeEncoding { scalar, sinusoidal };

struct DenoiserSpec {
    std::size_t dim = 1;      // genome dimension D
    std::size_t cond_dim = 0; // 0 for unconditional models
    std::size_t hidden_layers = 2;
    std::size_t hidden_units = 64;
    nn::Activation activation = nn::Activation::leaky_relu;
    TimeEncoding time_encoding = TimeEncoding::scalar;
    std::size_t sinusoidal_features = 8;

    std::size_t time_features() const noexcept
    {
        return time_encoding == TimeEncoding::scalar ? 1 : sinusoidal_features;
    }

    /// Input layout: [x_t (D) | time features | condition values | presence mask].
    nn::NetSpec net_spec() const
    {
        if (dim == 0)
            throw UsageError("DenoiserSpec: dim must be >= 1");
        if (time_encoding == TimeEncoding::sinusoidal && (sinusoidal_features == 0 || sinusoidal_features % 2 != 0))
            throw UsageError("DenoiserSpec: sinusoidal_features must be a positive even number");
        nn::NetSpec s;
        s.input_dim = dim + time_features() + 2 * cond_dim;
        s.hidden_layers = hidden_layers;
        s.hidden_units = hidden_units;
        s.output_dim = dim;
        s.activation = activation;
        s.recurrent = false;
        return s;
    }

    friend bool operator==(const DenoiserSpec&, const DenoiserSpec&) = default;
};

/// Epsilon-prediction network eps(x_t, t, c). Conditions enter the net
/// z-scored with stored per-dimension statistics, followed by a 0/1 mask;
/// a NaN entry means "absent" and is encoded as value 0 with mask 0. The
/// null token used for classifier-free guidance is an all-NaN condition.
class Denoiser {
public:
    Denoiser() = default;

    Denoiser(DenoiserSpec spec, nn::NetParams net) : spec_(spec), net_(std::move(net))
    {
        if (!(net_.spec() == spec_.net_spec()))
            throw UsageError("Denoiser: network spec does not match the denoiser layout");
        cond_mean_ = Eigen::VectorXd::Zero(Eigen::Index(spec_.cond_dim));
        cond_scale_ = Eigen::VectorXd::Ones(Eigen::Index(spec_.cond_dim));
    }

    static Denoiser create(const DenoiserSpec& spec, Rng& rng)
    {
        return Denoiser(spec, nn::init_params(spec.net_spec(), rng));
    }

    const DenoiserSpec& spec() const noexcept { return spec_; }
    const nn::NetParams& net() const noexcept { return net_; }
    nn::NetParams& net() noexcept { return net_; }
    const Eigen::VectorXd& cond_mean() const noexcept { return cond_mean_; }
    const Eigen::VectorXd& cond_scale() const noexcept { return cond_scale_; }

    void set_standardization(Eigen::VectorXd mean, Eigen::VectorXd scale)
    {
        if (mean.size() != Eigen::Index(spec_.cond_dim) || scale.size() != Eigen::Index(spec_.cond_dim))
            throw UsageError("Denoiser: standardization size mismatch");
        for (Eigen::Index i = 0; i < scale.size(); ++i)
            if (!(scale[i] > 0.0) || !std::isfinite(mean[i]))
                throw UsageError("Denoiser: standardization scale must be positive and finite");
        cond_mean_ = std::move(mean);
        cond_scale_ = std::move(scale);
    }

    /// Fit z-score statistics on the finite entries of each condition row;
    /// rows with zero spread get scale 1.
    void fit_standardization(const Eigen::MatrixXd& conditions)
    {
        Eigen::VectorXd mean = Eigen::VectorXd::Zero(Eigen::Index(spec_.cond_dim));
        Eigen::VectorXd scale = Eigen::VectorXd::Ones(Eigen::Index(spec_.cond_dim));
        for (Eigen::Index r = 0; r < conditions.rows(); ++r) {
            double sum = 0.0, sum2 = 0.0;
            std::size_t n = 0;
            for (Eigen::Index c = 0; c < conditions.cols(); ++c) {
                const double v = conditions(r, c);
                if (std::isfinite(v)) {
                    sum += v;
                    ++n;
                }
            }
            if (n == 0)
                continue;
            const double m = sum / double(n);
            for (Eigen::Index c = 0; c < conditions.cols(); ++c) {
                const double v = conditions(r, c);
                if (std::isfinite(v))
                    sum2 += (v - m) * (v - m);
            }
            const double sd = std::sqrt(sum2 / double(n));
            mean[r] = m;
            scale[r] = sd > 1e-12 ? sd : 1.0;
        }
        set_standardization(std::move(mean), std::move(scale));
    }

    /// Write the time features of step t into `out` (length time_features()).
    template <typename Out>
    void encode_time(std::size_t t, std::size_t steps, Out&& out) const
    {
        const double u = double(t) / double(steps);
        if (spec_.time_encoding == TimeEncoding::scalar) {
            out[0] = u;
            return;
        }
        for (std::size_t k = 0; k < spec_.sinusoidal_features / 2; ++k) {
            const double w = std::numbers::pi * std::pow(2.0, double(k));
            out[Eigen::Index(2 * k)] = std::sin(w * u);
            out[Eigen::Index(2 * k + 1)] = std::cos(w * u);
        }
    }

    /// Write condition values and mask for one (raw) condition column.
    template <typename In, typename Out>
    void encode_condition(const In& raw, Out&& out) const
    {
        const auto cd = Eigen::Index(spec_.cond_dim);
        for (Eigen::Index k = 0; k < cd; ++k) {
            const double v = raw[k];
            if (std::isfinite(v)) {
                out[k] = (v - cond_mean_[k]) / cond_scale_[k];
                out[cd + k] = 1.0;
            }
            else {
                out[k] = 0.0;
                out[cd + k] = 0.0;
            }
        }
    }

    /// Predict the injected noise for a batch at a common step t.
    /// `conditions` is null (unconditional) or has cond_dim rows and either
    /// one column (broadcast) or one column per sample.
    Eigen::MatrixXd predict(const Eigen::MatrixXd& x_t, std::size_t t, std::size_t steps,
                            const Eigen::MatrixXd* conditions) const
    {
        const auto d = Eigen::Index(spec_.dim);
        const auto tf = Eigen::Index(spec_.time_features());
        const auto cd = Eigen::Index(spec_.cond_dim);
        if (x_t.rows() != d)
            throw UsageError("Denoiser: genome dimension mismatch");
        check_conditions(conditions, x_t.cols());

        Eigen::MatrixXd in(d + tf + 2 * cd, x_t.cols());
        in.topRows(d) = x_t;
        Eigen::VectorXd time(tf);
        encode_time(t, steps, time);
        in.middleRows(d, tf).colwise() = time;
        if (cd > 0) {
            if (conditions == nullptr) {
                in.bottomRows(2 * cd).setZero();
            }
            else {
                for (Eigen::Index c = 0; c < x_t.cols(); ++c) {
                    const Eigen::Index src = conditions->cols() == 1 ? 0 : c;
                    encode_condition(conditions->col(src), in.col(c).segment(d + tf, 2 * cd));
                }
            }
        }
        return nn::forward_batch(net_, in);
    }

    void check_conditions(const Eigen::MatrixXd* conditions, Eigen::Index n) const
    {
        if (conditions == nullptr)
            return;
        if (conditions->rows() != Eigen::Index(spec_.cond_dim))
            throw UsageError("Denoiser: condition length " + std::to_string(conditions->rows()) + " != cond_dim "
                             + std::to_string(spec_.cond_dim));
        if (conditions->cols() != 1 && conditions->cols() != n)
            throw UsageError("Denoiser: expected 1 or " + std::to_string(n) + " condition columns");
    }

private:
    DenoiserSpec spec_{};
    nn::NetParams net_;
    Eigen::VectorXd cond_mean_;
    Eigen::VectorXd cond_scale_;
};

struct GuidanceConfig {
    double guidance_weight = 0.0;
    double cond_dropout_prob = 0.1;

    void validate() const
    {
        if (!(guidance_weight >= 0.0))
            throw UsageError("GuidanceConfig: guidance_weight must be >= 0");
        if (!(cond_dropout_prob >= 0.0 && cond_dropout_prob <= 1.0))
            throw UsageError("GuidanceConfig: cond_dropout_prob must lie in [0, 1]");
    }
};

/// Classifier-free guided noise estimate:
/// (1 + w) eps(x, t, c) - w eps(x, t, null), or a single pass when the
/// condition is absent or w == 0.
inline Eigen::MatrixXd cfg_epsilon(const Denoiser& net, const Eigen::MatrixXd& x_t, std::size_t t, std::size_t steps,
                                   const Eigen::MatrixXd* condition, const GuidanceConfig& guidance)
{
    if (net.spec().cond_dim == 0 || condition == nullptr)
        return net.predict(x_t, t, steps, nullptr);
    if (guidance.guidance_weight == 0.0)
        return net.predict(x_t, t, steps, condition);
    const double w = guidance.guidance_weight;
    return (1.0 + w) * net.predict(x_t, t, steps, condition) - w * net.predict(x_t, t, steps, nullptr);
}

struct TrainingSet {
    Eigen::MatrixXd genomes;    // D x n
    Eigen::VectorXd weights;    // n
    Eigen::MatrixXd conditions; // cond_dim x n (0 x n when unconditional)
};

struct DmTrainOptions {
    std::size_t epochs = 100;
    std::size_t batch_size = 256;
    double lr = 1e-3;
    double weight_decay = 1e-5;
};

/// Fitness-weighted denoiser training (one pass over the set per epoch).
/// Every sample visit draws t ~ U{1..T}, eps ~ N(0, I), and with probability
/// cond_dropout_prob replaces its condition by the null token. Condition
/// standardization is refit on the training set. Returns the per-epoch loss.
inline std::vector<double> dm_train(Denoiser& net, const TrainingSet& data, const NoiseSchedule& schedule,
                                    const GuidanceConfig& guidance, const DmTrainOptions& opts, Rng& rng)
{
    guidance.validate();
    const auto n = data.genomes.cols();
    const auto d = Eigen::Index(net.spec().dim);
    const auto cd = Eigen::Index(net.spec().cond_dim);
    const auto tf = Eigen::Index(net.spec().time_features());
    const std::size_t T = schedule.steps();
    if (n == 0)
        throw UsageError("dm_train: empty training set");
    if (data.genomes.rows() != d || data.weights.size() != n)
        throw UsageError("dm_train: training set shape mismatch");
    if (cd > 0 && (data.conditions.rows() != cd || data.conditions.cols() != n))
        throw UsageError("dm_train: condition block must be cond_dim x n");
    for (Eigen::Index i = 0; i < n; ++i)
        if (!std::isfinite(data.weights[i]) || data.weights[i] < 0.0)
            throw UsageError("dm_train: weights must be finite and >= 0");
    const double total_weight = data.weights.sum();
    if (!(total_weight > 0.0))
        throw DegenerateError("dm_train: all sample weights are zero");
    const double mean_weight = total_weight / double(n);
    if (opts.batch_size == 0)
        throw UsageError("dm_train: batch_size must be >= 1");

    if (cd > 0)
        net.fit_standardization(data.conditions);

    auto adam = nn::make_adam(net.net().size(), opts.lr, opts.weight_decay);
    std::vector<std::size_t> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::uniform_int_distribution<std::size_t> step_dist(1, T);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::vector<double> trace;
    trace.reserve(opts.epochs);

    nn::WeightedBatch batch;
    Eigen::VectorXd time(tf);
    for (std::size_t e = 0; e < opts.epochs; ++e) {
        std::shuffle(order.begin(), order.end(), rng);
        double epoch_loss = 0.0;
        for (std::size_t start = 0; start < order.size(); start += opts.batch_size) {
            const std::size_t end = std::min(order.size(), start + opts.batch_size);
            const auto b = Eigen::Index(end - start);
            batch.inputs.resize(d + tf + 2 * cd, b);
            batch.targets.resize(d, b);
            batch.weights.resize(b);
            for (Eigen::Index j = 0; j < b; ++j) {
                const auto src = Eigen::Index(order[start + std::size_t(j)]);
                const std::size_t t = step_dist(rng);
                const double a = schedule[t];
                for (Eigen::Index k = 0; k < d; ++k)
                    batch.targets(k, j) = normal(rng);
                batch.inputs.col(j).head(d) = std::sqrt(a) * data.genomes.col(src) + std::sqrt(1.0 - a) * batch.targets.col(j);
                net.encode_time(t, T, time);
                batch.inputs.col(j).segment(d, tf) = time;
                if (cd > 0) {
                    const bool drop = uniform01(rng) < guidance.cond_dropout_prob;
                    if (drop)
                        batch.inputs.col(j).tail(2 * cd).setZero();
                    else
                        net.encode_condition(data.conditions.col(src), batch.inputs.col(j).segment(d + tf, 2 * cd));
                }
                batch.weights[j] = data.weights[src];
            }
            const double bw = batch.weights.sum();
            if (!(bw > 0.0))
                continue;
            auto lg = nn::weighted_mse_grad(net.net(), batch);
            lg.grads *= bw / (mean_weight * double(b));
            epoch_loss += lg.loss * bw;
            nn::adam_step(adam, net.net(), lg.grads);
        }
        trace.push_back(epoch_loss / total_weight);
    }
    return trace;
}

enum class SigmaRule { paper_default, deterministic };

struct SamplerConfig {
    SigmaRule sigma_rule = SigmaRule::paper_default;
    /// Step at which iteration starts; defaults to T. Only meaningful with
    /// an explicit init, otherwise sampling always starts from x_T.
    std::optional<std::size_t> start_step;
    /// Standard deviation of x_T when no init is given.
    double init_std = 1.0;
    /// Lower bound on alpha_bar_t when recovering x0 from an eps estimate.
    /// Only affects t = T, where alpha_bar_T = 0 makes the estimate undefined.
    double alpha_floor = 1e-4;
    GuidanceConfig guidance{};
};

/// sigma_t = sqrt((1 - a_{t-1}) / (1 - a_t)) * sqrt(1 - a_t / a_{t-1}).
inline double sigma_paper(const NoiseSchedule& s, std::size_t t)
{
    const double a_t = s[t];
    const double a_prev = s[t - 1];
    if (a_t >= 1.0)
        return 0.0;
    const double v = (1.0 - a_prev) / (1.0 - a_t) * (1.0 - a_t / a_prev);
    return std::sqrt(std::max(0.0, v));
}

/// One reverse step t -> t-1 applied to every column of x.
inline void ddim_step(const Denoiser& net, const NoiseSchedule& schedule, const SamplerConfig& sampler,
                      Eigen::MatrixXd& x, std::size_t t, const Eigen::MatrixXd* condition, Rng& rng)
{
    const std::size_t T = schedule.steps();
    const double a_t = schedule[t];
    const double a_prev = schedule[t - 1];
    const Eigen::MatrixXd eps = cfg_epsilon(net, x, t, T, condition, sampler.guidance);
    const double sigma = sampler.sigma_rule == SigmaRule::paper_default ? sigma_paper(schedule, t) : 0.0;
    const double a_div = std::max(a_t, sampler.alpha_floor);
    const double dir = std::sqrt(std::max(0.0, 1.0 - a_prev - sigma * sigma));
    Eigen::MatrixXd x0 = (x - std::sqrt(1.0 - a_t) * eps) / std::sqrt(a_div);
    x = std::sqrt(a_prev) * x0 + dir * eps;
    if (sigma > 0.0)
        x += sigma * normal_matrix(x.rows(), x.cols(), rng);
}

/// DDIM sampling. Without `init`, draws x_T ~ N(0, init_std^2 I) and runs
/// t = T..1; with `init` (D x n), runs t = start_step..1 from it.
inline Eigen::MatrixXd ddim_sample(const Denoiser& net, const NoiseSchedule& schedule, const SamplerConfig& sampler,
                                   std::size_t n, const Eigen::MatrixXd* condition, const Eigen::MatrixXd* init,
                                   Rng& rng)
{
    const std::size_t T = schedule.steps();
    const auto d = Eigen::Index(net.spec().dim);
    net.check_conditions(condition, Eigen::Index(n));
    Eigen::MatrixXd x;
    std::size_t start = T;
    if (init != nullptr) {
        if (init->rows() != d || init->cols() != Eigen::Index(n))
            throw UsageError("ddim_sample: init must be D x n");
        x = *init;
        start = sampler.start_step.value_or(T);
    }
    else {
        x = normal_matrix(d, Eigen::Index(n), rng, sampler.init_std);
    }
    if (start > T)
        throw UsageError("ddim_sample: start step " + std::to_string(start) + " outside [0, T]");
    for (std::size_t t = start; t >= 1; --t)
        ddim_step(net, schedule, sampler, x, t, condition, rng);
    return x;
}

/// Readapt genomes by running t_a reverse steps starting at diffusion time t_a.
inline Eigen::MatrixXd partial_denoise(const Denoiser& net, const NoiseSchedule& schedule,
                                       const Eigen::MatrixXd& genomes, std::size_t t_a,
                                       const Eigen::MatrixXd* condition, SamplerConfig sampler, Rng& rng)
{
    if (t_a > schedule.steps())
        throw UsageError("partial_denoise: t_a outside [0, T]");
    sampler.start_step = t_a;
    return ddim_sample(net, schedule, sampler, std::size_t(genomes.cols()), condition, &genomes, rng);
}

} // namespace hades::diffusion
