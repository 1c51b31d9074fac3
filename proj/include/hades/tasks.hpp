#pragma once

// Fitness landscapes and environments. All fitness values are maximized.

#include <cmath>
#include <cstddef>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include <Eigen/Dense>

#include "error.hpp"
#include "nn.hpp"
#include "phenotype.hpp"
#include "rng.hpp"

namespace hades::tasks {

inline void require_2d(std::size_t n, const char* who)
{
    if (n != 2)
        throw UsageError(std::string(who) + ": genome must be 2-dimensional, got " + std::to_string(n));
}

// ---------------------------------------------------------------------------
// Double peak

struct DoublePeakParams {
    double sigma = 0.1;
    double omega = 0.0; // angular velocity per generation
    double phi = 0.0;   // phase shift of the (+1, +1) peak
};

/// cos(w t) N(g; mu_-) + cos(w t + phi) N(g; mu_+), unnormalized Gaussians of
/// width sigma centred at mu_+- = (+-1, +-1).
inline double double_peak_fitness(std::span<const double> g, double generation, const DoublePeakParams& p)
{
    require_2d(g.size(), "double_peak_fitness");
    if (!(p.sigma > 0.0))
        throw UsageError("double_peak_fitness: sigma must be > 0");
    const double s2 = 2.0 * p.sigma * p.sigma;
    const double dm = (g[0] + 1.0) * (g[0] + 1.0) + (g[1] + 1.0) * (g[1] + 1.0);
    const double dp = (g[0] - 1.0) * (g[0] - 1.0) + (g[1] - 1.0) * (g[1] - 1.0);
    return std::cos(p.omega * generation) * std::exp(-dm / s2)
           + std::cos(p.omega * generation + p.phi) * std::exp(-dp / s2);
}

// ---------------------------------------------------------------------------
// Truncated (optionally twisted) Rastrigin

struct RastriginParams {
    double A = 10.0;
    double bound = 4.0;
    double twist = 0.0; // spiral constant; 0 disables the transform
};

/// x -> r (cos(theta + w r), sin(theta + w r)).
inline Eigen::Vector2d spiral_transform(double x, double y, double twist)
{
    if (twist == 0.0)
        return {x, y};
    const double r = std::hypot(x, y);
    const double theta = std::atan2(y, x) + twist * r;
    return {r * std::cos(theta), r * std::sin(theta)};
}

/// Inverse of spiral_transform.
inline Eigen::Vector2d spiral_inverse(double x, double y, double twist)
{
    return spiral_transform(x, y, -twist);
}

/// 2A + sum(x_i^2 - A cos(2 pi x_i)) on the (twisted) coordinates, and 0
/// wherever any twisted coordinate exceeds the bound.
inline double rastrigin_fitness(std::span<const double> g, const RastriginParams& p)
{
    require_2d(g.size(), "rastrigin_fitness");
    const Eigen::Vector2d x = spiral_transform(g[0], g[1], p.twist);
    if (std::abs(x[0]) > p.bound || std::abs(x[1]) > p.bound)
        return 0.0;
    double f = 2.0 * p.A;
    for (int i = 0; i < 2; ++i)
        f += x[i] * x[i] - p.A * std::cos(2.0 * std::numbers::pi * x[i]);
    return f;
}

/// Coordinate of the largest in-bound 1-D maximum of x^2 - A cos(2 pi x).
inline double rastrigin_peak_coordinate(const RastriginParams& p)
{
    // The outermost local maximum below the bound sits near bound - 0.5.
    double x = std::floor(p.bound - 0.5) + 0.5;
    for (int it = 0; it < 50; ++it) {
        const double w = 2.0 * std::numbers::pi;
        const double d1 = 2.0 * x + p.A * w * std::sin(w * x);
        const double d2 = 2.0 + p.A * w * w * std::cos(w * x);
        x -= d1 / d2;
    }
    return x;
}

inline double rastrigin_max_fitness(const RastriginParams& p)
{
    const double c = rastrigin_peak_coordinate(p);
    const double untwisted[2] = {c, c};
    return rastrigin_fitness(untwisted, RastriginParams{p.A, p.bound, 0.0});
}

/// The four global maxima in genome space (pre-images under the twist).
inline std::vector<Eigen::VectorXd> rastrigin_peaks(const RastriginParams& p)
{
    const double c = rastrigin_peak_coordinate(p);
    std::vector<Eigen::VectorXd> peaks;
    for (double sx : {1.0, -1.0})
        for (double sy : {1.0, -1.0}) {
            const Eigen::Vector2d q = spiral_inverse(sx * c, sy * c, p.twist);
            peaks.emplace_back(Eigen::VectorXd(q));
        }
    return peaks;
}

// ---------------------------------------------------------------------------
// Cart-pole (Barto, Sutton & Anderson dynamics, explicit Euler)

struct CartPoleParams {
    double x_limit = 2.4;
    double phi_limit = 12.0 * std::numbers::pi / 180.0;
    std::size_t max_steps = 500;
    std::size_t resting_window = 100; // N_r
    std::size_t episodes = 16;        // N_e
    double gravity = 9.8;
    double cart_mass = 1.0;
    double pole_mass = 0.1;
    double half_length = 0.5;
    double force = 10.0;
    double dt = 0.02;
    double init_range = 0.05;
};

struct CartPoleState {
    double x = 0.0, x_dot = 0.0, phi = 0.0, phi_dot = 0.0;
};

inline CartPoleState cartpole_step(const CartPoleState& s, int action, const CartPoleParams& p)
{
    const double f = action == 1 ? p.force : -p.force;
    const double total_mass = p.cart_mass + p.pole_mass;
    const double pml = p.pole_mass * p.half_length;
    const double c = std::cos(s.phi);
    const double sn = std::sin(s.phi);
    const double temp = (f + pml * s.phi_dot * s.phi_dot * sn) / total_mass;
    const double phi_acc =
        (p.gravity * sn - c * temp) / (p.half_length * (4.0 / 3.0 - p.pole_mass * c * c / total_mass));
    const double x_acc = temp - pml * phi_acc * c / total_mass;
    CartPoleState n;
    n.x = s.x + p.dt * s.x_dot;
    n.x_dot = s.x_dot + p.dt * x_acc;
    n.phi = s.phi + p.dt * s.phi_dot;
    n.phi_dot = s.phi_dot + p.dt * phi_acc;
    return n;
}

inline bool cartpole_failed(const CartPoleState& s, const CartPoleParams& p)
{
    return s.x < -p.x_limit || s.x > p.x_limit || s.phi < -p.phi_limit || s.phi > p.phi_limit;
}

/// Two output units; argmax selects left (0) or right (1), ties push right.
inline int decode_action(const Eigen::VectorXd& out)
{
    if (out.size() == 1)
        return out[0] >= 0.0 ? 1 : 0;
    return out[1] >= out[0] ? 1 : 0;
}

/// Run one episode. The policy sees (x, x_dot, phi, phi_dot). Throws
/// NumericError if the policy emits a non-finite output.
inline EpisodeSummary cartpole_episode(const nn::NetParams& policy, const CartPoleParams& p, Rng& rng,
                                       bool record_trajectory = false)
{
    if (policy.spec().input_dim != 4)
        throw UsageError("cartpole_episode: policy input_dim must be 4");
    std::uniform_real_distribution<double> init(-p.init_range, p.init_range);
    CartPoleState s;
    s.x = init(rng);
    s.x_dot = init(rng);
    s.phi = init(rng);
    s.phi_dot = init(rng);

    nn::Evaluator ev(policy);
    EpisodeSummary out;
    std::vector<double> xs, vs;
    xs.reserve(p.max_steps);
    vs.reserve(p.max_steps);
    double obs[4];
    while (out.steps < p.max_steps) {
        obs[0] = s.x;
        obs[1] = s.x_dot;
        obs[2] = s.phi;
        obs[3] = s.phi_dot;
        const Eigen::VectorXd& y = ev.step(obs);
        for (Eigen::Index i = 0; i < y.size(); ++i)
            if (!std::isfinite(y[i]))
                throw NumericError("cartpole_episode: policy produced a non-finite output", out.steps);
        const int action = decode_action(y);
        s = cartpole_step(s, action, p);
        ++out.steps;
        xs.push_back(s.x);
        vs.push_back(s.x_dot);
        if (record_trajectory)
            out.trajectory.push_back({out.steps, s.x, s.x_dot, s.phi, s.phi_dot, action});
        if (cartpole_failed(s, p))
            break;
    }
    const std::size_t window = std::min(p.resting_window, out.steps);
    if (window > 0) {
        double sx = 0.0, sv = 0.0;
        for (std::size_t i = out.steps - window; i < out.steps; ++i) {
            sx += xs[i];
            sv += vs[i];
        }
        out.x_resting = sx / double(window);
        out.x_dot_resting = sv / double(window);
    }
    return out;
}

struct PolicyEvaluation {
    double fitness = 0.0;                // mean steps over episodes
    std::array<double, 3> condition{};   // mean (x_resting, x_dot_resting, steps)
    std::vector<EpisodeSummary> episodes;
};

/// Average over N_e episodes, each with its own stream derived from one draw
/// of `rng`. A policy that emits a non-finite output scores 0 steps in that
/// episode (resting averages 0).
inline PolicyEvaluation evaluate_policy(const nn::NetParams& policy, const CartPoleParams& p, std::size_t episodes,
                                        Rng& rng)
{
    if (episodes == 0)
        throw UsageError("evaluate_policy: need at least one episode");
    const std::uint64_t base = rng();
    PolicyEvaluation out;
    out.episodes.reserve(episodes);
    for (std::size_t e = 0; e < episodes; ++e) {
        Rng er = make_rng(base, {e});
        try {
            out.episodes.push_back(cartpole_episode(policy, p, er));
        }
        catch (const NumericError&) {
            out.episodes.push_back(EpisodeSummary{});
        }
    }
    out.condition = conditioning::phenotype_condition(out.episodes);
    out.fitness = out.condition[2];
    return out;
}

// ---------------------------------------------------------------------------
// Task: uniform interface used by every solver.

struct Evaluation {
    double fitness = 0.0;
    Eigen::VectorXd traits; // task-specific phenotype (cart-pole: x_r, x_dot_r, f)
};

struct DoublePeakTask {
    DoublePeakParams params;
};

struct RastriginTask {
    RastriginParams params;
};

struct CartPoleTask {
    CartPoleParams params;
    nn::NetSpec agent;
};

/// f(x) = -|x|^2 in any dimension; used for sanity runs of the baselines.
struct SphereTask {
    std::size_t dim = 2;
};

class Task {
public:
    using Variant = std::variant<DoublePeakTask, RastriginTask, CartPoleTask, SphereTask>;

    Task(Variant v, double success_threshold) : v_(std::move(v)), success_threshold_(success_threshold) {}

    static Task double_peak(DoublePeakParams p) { return Task(DoublePeakTask{p}, 0.9); }
    static Task rastrigin(RastriginParams p) { return Task(RastriginTask{p}, 0.98 * rastrigin_max_fitness(p)); }
    static Task cartpole(CartPoleParams p, nn::NetSpec agent)
    {
        agent.validate();
        if (agent.input_dim != 4)
            throw UsageError("cart-pole agents take 4 inputs");
        return Task(CartPoleTask{p, agent}, double(p.max_steps));
    }
    static Task sphere(std::size_t dim) { return Task(SphereTask{dim}, -1e-2); }

    const Variant& variant() const noexcept { return v_; }
    double success_threshold() const noexcept { return success_threshold_; }
    void set_success_threshold(double v) { success_threshold_ = v; }

    std::size_t dim() const
    {
        return std::visit(
            [](const auto& t) -> std::size_t {
                using T = std::decay_t<decltype(t)>;
                if constexpr (std::is_same_v<T, CartPoleTask>)
                    return nn::parameter_count(t.agent);
                else if constexpr (std::is_same_v<T, SphereTask>)
                    return t.dim;
                else
                    return 2;
            },
            v_);
    }

    std::size_t trait_dim() const { return std::holds_alternative<CartPoleTask>(v_) ? 3 : 0; }

    /// Evaluate a genome at a generation. Deterministic given the rng state.
    Evaluation evaluate(const Eigen::VectorXd& g, std::size_t generation, Rng& rng) const
    {
        if (std::size_t(g.size()) != dim())
            throw UsageError("Task::evaluate: genome has " + std::to_string(g.size()) + " entries, expected "
                             + std::to_string(dim()));
        std::span<const double> gs(g.data(), std::size_t(g.size()));
        return std::visit(
            [&](const auto& t) -> Evaluation {
                using T = std::decay_t<decltype(t)>;
                if constexpr (std::is_same_v<T, DoublePeakTask>) {
                    return {double_peak_fitness(gs, double(generation), t.params), {}};
                }
                else if constexpr (std::is_same_v<T, RastriginTask>) {
                    return {rastrigin_fitness(gs, t.params), {}};
                }
                else if constexpr (std::is_same_v<T, CartPoleTask>) {
                    const nn::NetParams policy(t.agent, g);
                    auto ev = evaluate_policy(policy, t.params, t.params.episodes, rng);
                    Eigen::VectorXd traits(3);
                    traits << ev.condition[0], ev.condition[1], ev.condition[2];
                    return {ev.fitness, traits};
                }
                else {
                    return {-g.squaredNorm(), {}};
                }
            },
            v_);
    }

    /// Known optima for "peaks found" tracking (empty when not applicable).
    std::vector<Eigen::VectorXd> peak_centers() const
    {
        if (const auto* r = std::get_if<RastriginTask>(&v_))
            return rastrigin_peaks(r->params);
        if (std::holds_alternative<DoublePeakTask>(v_)) {
            Eigen::VectorXd a(2), b(2);
            a << 1.0, 1.0;
            b << -1.0, -1.0;
            return {a, b};
        }
        return {};
    }

private:
    Variant v_;
    double success_threshold_;
};

} // namespace hades::tasks
