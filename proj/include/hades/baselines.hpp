#pragma once

// Reference solvers: a simple elitist genetic algorithm and CMA-ES.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "error.hpp"
#include "evolution.hpp"
#include "rng.hpp"
#include "tasks.hpp"

namespace hades::baselines {

// ---------------------------------------------------------------------------
// SimpleGA

struct SimpleGaConfig {
    std::size_t population = 256;
    double sigma_init = 1.0;
    double elite_fraction = 0.1;
    double mutation_sigma = 0.1;
    bool elitism = true;
    std::uint64_t seed = 0;
    std::size_t threads = 1;

    std::size_t elite_count() const
    {
        return std::max<std::size_t>(1, std::size_t(std::ceil(elite_fraction * double(population) - 1e-9)));
    }

    void validate() const
    {
        if (population < 1)
            throw UsageError("SimpleGaConfig: population must be >= 1");
        if (!(elite_fraction > 0.0 && elite_fraction <= 1.0))
            throw UsageError("SimpleGaConfig: elite fraction must lie in (0, 1]");
        if (!(mutation_sigma >= 0.0))
            throw UsageError("SimpleGaConfig: mutation sigma must be >= 0");
        if (!(sigma_init > 0.0))
            throw UsageError("SimpleGaConfig: sigma_I must be > 0");
    }
};

/// Truncation selection: the best individual is kept unchanged (elitism);
/// every other slot is a uniform crossover of two random elites plus
/// N(0, sigma_m^2) noise per coordinate.
inline Eigen::MatrixXd simplega_step(const Eigen::MatrixXd& population, std::span<const double> fitness,
                                     const SimpleGaConfig& cfg, Rng& rng)
{
    const auto n = std::size_t(population.cols());
    if (fitness.size() != n || n == 0)
        throw UsageError("simplega_step: fitness count must match a non-empty population");
    std::vector<std::size_t> rank(n);
    std::iota(rank.begin(), rank.end(), std::size_t{0});
    std::stable_sort(rank.begin(), rank.end(), [&](std::size_t a, std::size_t b) { return fitness[a] > fitness[b]; });
    const std::size_t ne = std::min(cfg.elite_count(), n);
    std::uniform_int_distribution<std::size_t> pick(0, ne - 1);
    std::normal_distribution<double> noise(0.0, 1.0);

    Eigen::MatrixXd next(population.rows(), Eigen::Index(cfg.population));
    std::size_t start = 0;
    if (cfg.elitism) {
        next.col(0) = population.col(Eigen::Index(rank[0]));
        start = 1;
    }
    for (std::size_t j = start; j < cfg.population; ++j) {
        const auto a = population.col(Eigen::Index(rank[pick(rng)]));
        const auto b = population.col(Eigen::Index(rank[pick(rng)]));
        Eigen::VectorXd child = evolution::crossover_uniform(a, b, rng);
        for (Eigen::Index i = 0; i < child.size(); ++i)
            child[i] += cfg.mutation_sigma * noise(rng);
        next.col(Eigen::Index(j)) = child;
    }
    return next;
}

// ---------------------------------------------------------------------------
// CMA-ES, (mu/mu_w, lambda) with default strategy constants

struct CmaState {
    std::size_t dim = 0;
    std::size_t lambda = 0;
    std::size_t mu = 0;
    Eigen::VectorXd weights;
    double mu_eff = 0.0;
    double c_sigma = 0.0, d_sigma = 0.0, c_c = 0.0, c_1 = 0.0, c_mu = 0.0, chi_n = 0.0;

    Eigen::VectorXd mean;
    double sigma = 1.0;
    Eigen::MatrixXd C;
    Eigen::VectorXd p_sigma, p_c;
    std::size_t generation = 0;

    // eigendecomposition of C = B diag(D^2) B^T
    Eigen::MatrixXd B;
    Eigen::VectorXd D;

    Eigen::MatrixXd pending; // candidates of the last ask, awaiting tell
};

inline constexpr double kCmaEigenFloor = 1e-12;

inline void cma_decompose(CmaState& s)
{
    s.C = 0.5 * (s.C + s.C.transpose());
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(s.C);
    if (es.info() != Eigen::Success)
        throw NumericError("cmaes: eigendecomposition failed", s.generation);
    Eigen::VectorXd ev = es.eigenvalues().cwiseMax(kCmaEigenFloor);
    s.B = es.eigenvectors();
    s.D = ev.cwiseSqrt();
    s.C = s.B * ev.asDiagonal() * s.B.transpose();
}

inline CmaState cmaes_init(Eigen::VectorXd mean, double sigma, std::size_t lambda)
{
    const auto n = std::size_t(mean.size());
    if (n == 0)
        throw UsageError("cmaes_init: empty mean");
    if (lambda < 2)
        throw UsageError("cmaes_init: lambda must be >= 2");
    if (!(sigma > 0.0))
        throw UsageError("cmaes_init: sigma must be > 0");
    CmaState s;
    s.dim = n;
    s.lambda = lambda;
    s.mu = lambda / 2;
    s.weights.resize(Eigen::Index(s.mu));
    for (std::size_t i = 0; i < s.mu; ++i)
        s.weights[Eigen::Index(i)] = std::log((double(lambda) + 1.0) / 2.0) - std::log(double(i + 1));
    s.weights /= s.weights.sum();
    s.mu_eff = 1.0 / s.weights.squaredNorm();
    const double N = double(n);
    s.c_sigma = (s.mu_eff + 2.0) / (N + s.mu_eff + 5.0);
    s.d_sigma = 1.0 + 2.0 * std::max(0.0, std::sqrt((s.mu_eff - 1.0) / (N + 1.0)) - 1.0) + s.c_sigma;
    s.c_c = (4.0 + s.mu_eff / N) / (N + 4.0 + 2.0 * s.mu_eff / N);
    s.c_1 = 2.0 / ((N + 1.3) * (N + 1.3) + s.mu_eff);
    s.c_mu = std::min(1.0 - s.c_1, 2.0 * (s.mu_eff - 2.0 + 1.0 / s.mu_eff) / ((N + 2.0) * (N + 2.0) + s.mu_eff));
    s.chi_n = std::sqrt(N) * (1.0 - 1.0 / (4.0 * N) + 1.0 / (21.0 * N * N));
    s.mean = std::move(mean);
    s.sigma = sigma;
    s.C = Eigen::MatrixXd::Identity(Eigen::Index(n), Eigen::Index(n));
    s.p_sigma = Eigen::VectorXd::Zero(Eigen::Index(n));
    s.p_c = Eigen::VectorXd::Zero(Eigen::Index(n));
    s.B = s.C;
    s.D = Eigen::VectorXd::Ones(Eigen::Index(n));
    return s;
}

/// Candidates m + sigma B D z for given standard-normal draws z (D x k).
inline Eigen::MatrixXd cmaes_ask_with(CmaState& s, const Eigen::MatrixXd& z)
{
    if (z.rows() != Eigen::Index(s.dim))
        throw UsageError("cmaes_ask: z must have D rows");
    Eigen::MatrixXd x = (s.B * s.D.asDiagonal() * z * s.sigma).colwise() + s.mean;
    s.pending = x;
    return x;
}

inline Eigen::MatrixXd cmaes_ask(CmaState& s, std::size_t lambda, Rng& rng)
{
    if (lambda != s.lambda)
        throw UsageError("cmaes_ask: lambda differs from the configured population");
    return cmaes_ask_with(s, normal_matrix(Eigen::Index(s.dim), Eigen::Index(lambda), rng));
}

/// Update from the candidates of the last ask and their fitness (maximized).
inline void cmaes_tell(CmaState& s, const Eigen::MatrixXd& candidates, std::span<const double> fitness)
{
    if (s.pending.size() == 0)
        throw UsageError("cmaes_tell: no outstanding ask");
    if (candidates.rows() != s.pending.rows() || candidates.cols() != s.pending.cols() || candidates != s.pending)
        throw UsageError("cmaes_tell: candidates differ from the last ask");
    if (fitness.size() != s.lambda)
        throw UsageError("cmaes_tell: fitness count must equal lambda");
    for (std::size_t i = 0; i < fitness.size(); ++i)
        if (!std::isfinite(fitness[i]))
            throw NumericError("cmaes_tell: non-finite fitness", i);

    std::vector<std::size_t> rank(s.lambda);
    std::iota(rank.begin(), rank.end(), std::size_t{0});
    std::stable_sort(rank.begin(), rank.end(), [&](std::size_t a, std::size_t b) { return fitness[a] > fitness[b]; });

    const auto n = Eigen::Index(s.dim);
    const Eigen::VectorXd old_mean = s.mean;
    Eigen::MatrixXd y(n, Eigen::Index(s.mu));
    for (std::size_t i = 0; i < s.mu; ++i)
        y.col(Eigen::Index(i)) = (candidates.col(Eigen::Index(rank[i])) - old_mean) / s.sigma;
    const Eigen::VectorXd y_w = y * s.weights;
    s.mean = old_mean + s.sigma * y_w;

    // C^{-1/2} y_w = B D^{-1} B^T y_w
    const Eigen::VectorXd c_inv_sqrt_y = s.B * (s.B.transpose() * y_w).cwiseQuotient(s.D);
    s.p_sigma = (1.0 - s.c_sigma) * s.p_sigma + std::sqrt(s.c_sigma * (2.0 - s.c_sigma) * s.mu_eff) * c_inv_sqrt_y;
    const double ps_norm = s.p_sigma.norm();
    const double decay = 1.0 - std::pow(1.0 - s.c_sigma, 2.0 * double(s.generation + 1));
    const bool h_sigma = ps_norm / std::sqrt(decay) < (1.4 + 2.0 / (double(s.dim) + 1.0)) * s.chi_n;
    s.p_c = (1.0 - s.c_c) * s.p_c;
    if (h_sigma)
        s.p_c += std::sqrt(s.c_c * (2.0 - s.c_c) * s.mu_eff) * y_w;

    const double delta_h = h_sigma ? 0.0 : s.c_c * (2.0 - s.c_c);
    Eigen::MatrixXd rank_mu = y * s.weights.asDiagonal() * y.transpose();
    s.C = (1.0 - s.c_1 - s.c_mu) * s.C + s.c_1 * (s.p_c * s.p_c.transpose() + delta_h * s.C) + s.c_mu * rank_mu;
    s.sigma *= std::exp((s.c_sigma / s.d_sigma) * (ps_norm / s.chi_n - 1.0));
    if (!std::isfinite(s.sigma))
        throw NumericError("cmaes_tell: step size diverged", s.generation);
    cma_decompose(s);
    s.pending.resize(0, 0);
    ++s.generation;
}

struct CmaConfig {
    std::size_t population = 256; // lambda
    double sigma_init = 1.0;
    std::uint64_t seed = 0;
    std::size_t threads = 1;

    void validate() const
    {
        if (population < 2)
            throw UsageError("CmaConfig: population must be >= 2");
        if (!(sigma_init > 0.0))
            throw UsageError("CmaConfig: sigma_I must be > 0");
    }
};

// ---------------------------------------------------------------------------
// Runners sharing the evaluation and record pipeline of the evolution module.

inline evolution::RunHistory run_simplega(const SimpleGaConfig& cfg, const tasks::Task& task,
                                          std::size_t generations, const evolution::RunOptions& opts = {})
{
    cfg.validate();
    using namespace evolution;
    RecordBuilder records(task);
    RunHistory h;
    Rng init = make_rng(cfg.seed, {kStreamInit});
    Eigen::MatrixXd pop =
        normal_matrix(Eigen::Index(task.dim()), Eigen::Index(cfg.population), init, cfg.sigma_init);
    HadesState view;
    for (std::size_t g = 0;; ++g) {
        auto ev = evaluate_population(task, pop, g, cfg.seed, cfg.threads);
        const RunRecord r = records.make(g, ev.fitness, pop);
        h.records.push_back(r);
        view.generation = g;
        view.population = pop;
        view.fitness = ev.fitness;
        view.traits = ev.traits;
        if (opts.keep_generations)
            h.generations.push_back(log_state(view));
        const bool go = !opts.on_generation || opts.on_generation(r, view);
        if (g == generations || !go)
            break;
        Rng rng = make_rng(cfg.seed, {kStreamSample, g + 1});
        pop = simplega_step(pop, ev.fitness, cfg, rng);
    }
    h.final_population = view.population;
    h.final_fitness = view.fitness;
    return h;
}

inline evolution::RunHistory run_cmaes(const CmaConfig& cfg, const tasks::Task& task, std::size_t generations,
                                       const evolution::RunOptions& opts = {})
{
    cfg.validate();
    using namespace evolution;
    RecordBuilder records(task);
    RunHistory h;
    CmaState state = cmaes_init(Eigen::VectorXd::Zero(Eigen::Index(task.dim())), cfg.sigma_init, cfg.population);
    HadesState view;
    for (std::size_t g = 0; g <= generations; ++g) {
        Rng rng = make_rng(cfg.seed, {kStreamSample, g});
        const Eigen::MatrixXd pop = cmaes_ask(state, cfg.population, rng);
        auto ev = evaluate_population(task, pop, g, cfg.seed, cfg.threads);
        const RunRecord r = records.make(g, ev.fitness, pop);
        h.records.push_back(r);
        view.generation = g;
        view.population = pop;
        view.fitness = ev.fitness;
        view.traits = ev.traits;
        if (opts.keep_generations)
            h.generations.push_back(log_state(view));
        if (opts.on_generation && !opts.on_generation(r, view))
            break;
        if (g < generations)
            cmaes_tell(state, pop, ev.fitness);
    }
    h.final_population = view.population;
    h.final_fitness = view.fitness;
    return h;
}

} // namespace hades::baselines
