#pragma once

// The generational loop: evaluate, weight, buffer, retrain the denoiser,
// assemble crossover and noise seeds, sample, mutate, readapt.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "conditioning.hpp"
#include "diffusion.hpp"
#include "error.hpp"
#include "metrics.hpp"
#include "parallel.hpp"
#include "rng.hpp"
#include "tasks.hpp"

namespace hades::evolution {

enum class WeightMode { normalized, fitness_scaled }; // w_N, w_f
enum class RetrainMode { warm_start, reinit };

inline std::string_view to_string(WeightMode m) { return m == WeightMode::normalized ? "w_N" : "w_f"; }
inline std::string_view to_string(RetrainMode m) { return m == RetrainMode::warm_start ? "warm_start" : "reinit"; }

// ---------------------------------------------------------------------------
// Roulette reweighting

/// h[f_i]: sort ascending, F_j = exp(s (f_j - f_min) / (f_max - f_min))
/// (F = 1 when all fitnesses are equal), h = w * cumsum(F) / sum(cumsum(F)),
/// with w = 1 (w_N) or w = sum |f| (w_f). Returned in input order; ties share
/// the order of a stable sort.
///
/// `literal` evaluates F_j = exp(s (f_j - f_min) / (f_j - f_max)) instead,
/// taking its left limit 0 at f_j = f_max. Kept for audits only.
inline std::vector<double> roulette_weights(std::span<const double> f, double s, WeightMode mode,
                                            bool literal = false)
{
    const std::size_t n = f.size();
    if (n == 0)
        throw UsageError("roulette_weights: empty fitness vector");
    for (std::size_t i = 0; i < n; ++i)
        if (!std::isfinite(f[i]))
            throw NumericError("roulette_weights: non-finite fitness", i);
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return f[a] < f[b]; });
    const double fmin = f[order.front()];
    const double fmax = f[order.back()];

    std::vector<double> cum(n);
    double run = 0.0;
    for (std::size_t r = 0; r < n; ++r) {
        const double v = f[order[r]];
        double F = 1.0;
        if (fmax > fmin) {
            if (!literal)
                F = std::exp(s * (v - fmin) / (fmax - fmin));
            else
                F = v < fmax ? std::exp(s * (v - fmin) / (v - fmax)) : 0.0;
        }
        run += F;
        cum[r] = run;
    }
    const double total = std::accumulate(cum.begin(), cum.end(), 0.0);
    double w = 1.0;
    if (mode == WeightMode::fitness_scaled) {
        w = 0.0;
        for (double v : f)
            w += std::abs(v);
    }
    std::vector<double> h(n, 0.0);
    if (total > 0.0)
        for (std::size_t r = 0; r < n; ++r)
            h[order[r]] = w * cum[r] / total;
    return h;
}

// ---------------------------------------------------------------------------
// Variation operators

/// Two parents drawn independently (duplicates allowed) with probability
/// h[f; w_N] over the elites.
inline std::pair<std::size_t, std::size_t> select_parents(std::span<const double> elite_fitness, double s, Rng& rng)
{
    if (elite_fitness.size() < 2)
        throw UsageError("select_parents: need at least 2 elites");
    const auto h = roulette_weights(elite_fitness, s, WeightMode::normalized);
    std::discrete_distribution<std::size_t> pick(h.begin(), h.end());
    const std::size_t a = pick(rng);
    const std::size_t b = pick(rng);
    return {a, b};
}

/// Each coordinate copied from a or b with probability 1/2.
inline Eigen::VectorXd crossover_uniform(const Eigen::VectorXd& a, const Eigen::VectorXd& b, Rng& rng)
{
    if (a.size() != b.size())
        throw UsageError("crossover_uniform: parent lengths differ");
    Eigen::VectorXd c(a.size());
    std::bernoulli_distribution coin(0.5);
    for (Eigen::Index i = 0; i < a.size(); ++i)
        c[i] = coin(rng) ? b[i] : a[i];
    return c;
}

/// One forward-diffusion application at step t_mu.
inline Eigen::VectorXd mutate_diffuse(const Eigen::VectorXd& g, std::size_t t_mu,
                                      const diffusion::NoiseSchedule& schedule, Rng& rng)
{
    return diffusion::forward_diffuse(g, t_mu, schedule, rng).x_t;
}

// ---------------------------------------------------------------------------
// Memory buffer

struct Individual {
    Eigen::VectorXd genome;
    double fitness = 0.0;
    double weight = 0.0;     // h[f] within its cohort
    Eigen::VectorXd condition;
    std::size_t generation = 0;
};

class DatasetBuffer {
public:
    DatasetBuffer() = default;
    explicit DatasetBuffer(std::size_t capacity) : capacity_(capacity)
    {
        if (capacity == 0)
            throw UsageError("DatasetBuffer: capacity must be >= 1");
    }

    std::size_t capacity() const noexcept { return capacity_; }
    std::size_t size() const noexcept { return entries_.size(); }
    bool empty() const noexcept { return entries_.empty(); }
    const std::vector<Individual>& entries() const noexcept { return entries_; }
    std::vector<Individual>& entries() noexcept { return entries_; }

    /// Evict the lowest-fitness incumbents needed to make room (ties: oldest
    /// generation first, then earliest insertion), then append every newcomer.
    void update(std::vector<Individual> newcomers)
    {
        if (newcomers.size() > capacity_)
            throw UsageError("buffer_update: " + std::to_string(newcomers.size()) + " newcomers exceed capacity "
                             + std::to_string(capacity_));
        const std::size_t total = entries_.size() + newcomers.size();
        if (total > capacity_) {
            const std::size_t evict = total - capacity_;
            std::vector<std::size_t> idx(entries_.size());
            std::iota(idx.begin(), idx.end(), std::size_t{0});
            std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
                if (entries_[a].fitness != entries_[b].fitness)
                    return entries_[a].fitness < entries_[b].fitness;
                return entries_[a].generation < entries_[b].generation;
            });
            std::vector<char> drop(entries_.size(), 0);
            for (std::size_t k = 0; k < evict; ++k)
                drop[idx[k]] = 1;
            std::vector<Individual> kept;
            kept.reserve(capacity_);
            for (std::size_t i = 0; i < entries_.size(); ++i)
                if (!drop[i])
                    kept.push_back(std::move(entries_[i]));
            entries_ = std::move(kept);
        }
        for (auto& n : newcomers)
            entries_.push_back(std::move(n));
    }

    Eigen::MatrixXd genomes() const
    {
        if (entries_.empty())
            return {};
        Eigen::MatrixXd g(entries_[0].genome.size(), Eigen::Index(entries_.size()));
        for (std::size_t i = 0; i < entries_.size(); ++i)
            g.col(Eigen::Index(i)) = entries_[i].genome;
        return g;
    }

    Eigen::MatrixXd conditions(std::size_t cond_dim) const
    {
        Eigen::MatrixXd c(Eigen::Index(cond_dim), Eigen::Index(entries_.size()));
        for (std::size_t i = 0; i < entries_.size() && cond_dim > 0; ++i)
            c.col(Eigen::Index(i)) = entries_[i].condition;
        return c;
    }

    std::vector<double> fitness() const
    {
        std::vector<double> f(entries_.size());
        for (std::size_t i = 0; i < entries_.size(); ++i)
            f[i] = entries_[i].fitness;
        return f;
    }

private:
    std::size_t capacity_ = 1;
    std::vector<Individual> entries_;
};

inline void buffer_update(DatasetBuffer& buffer, std::vector<Individual> newcomers)
{
    buffer.update(std::move(newcomers));
}

// ---------------------------------------------------------------------------
// Configuration

struct EvoConfig {
    std::size_t population = 256;    // N_p
    double sigma_init = 1.0;         // sigma_I
    double buffer_ratio = 1.0;       // N_B / N_p
    double elite_ratio = 0.1;        // N_e / N_p
    double crossover_ratio = 0.0;    // N_c / N_p
    double mutation_ratio = 1.0;     // N_mu / N_p
    double t_mu_over_T = 0.05;
    std::size_t t_a = 0;             // readaptation steps
    double selection_pressure = 10.0; // s
    WeightMode weight_mode = WeightMode::fitness_scaled;
    RetrainMode retrain_mode = RetrainMode::warm_start;
    bool literal_relative_fitness = false;

    // denoiser
    std::size_t hidden_layers = 2;   // N_L
    std::size_t hidden_units = 64;   // N_H
    nn::Activation activation = nn::Activation::leaky_relu; // f_F
    diffusion::TimeEncoding time_encoding = diffusion::TimeEncoding::scalar;
    std::size_t sinusoidal_features = 8;
    diffusion::DmTrainOptions train{}; // epochs (N_E), batch size, lambda_LR, lambda_L2
    std::size_t diffusion_steps = 100; // T
    diffusion::ScheduleKind schedule = diffusion::ScheduleKind::cosine;
    diffusion::SigmaRule sigma_rule = diffusion::SigmaRule::paper_default;
    double alpha_floor = 1e-4;
    diffusion::GuidanceConfig guidance{};

    std::uint64_t seed = 0;
    std::size_t threads = 1; // fitness evaluation workers

    std::size_t buffer_capacity() const { return std::size_t(std::llround(buffer_ratio * double(population))); }
    std::size_t elite_count() const { return std::size_t(std::ceil(elite_ratio * double(population) - 1e-9)); }
    std::size_t crossover_count() const { return std::size_t(std::llround(crossover_ratio * double(population))); }
    std::size_t mutation_count() const { return std::size_t(std::llround(mutation_ratio * double(population))); }
    std::size_t t_mu() const { return diffusion::steps_from_ratio(t_mu_over_T, diffusion_steps); }

    void validate() const
    {
        auto ratio = [](double v, const char* name) {
            if (!(v >= 0.0 && v <= 1.0))
                throw UsageError(std::string("EvoConfig: ") + name + " must lie in [0, 1]");
        };
        if (population < 1)
            throw UsageError("EvoConfig: population must be >= 1");
        if (!(sigma_init > 0.0) || !std::isfinite(sigma_init))
            throw UsageError("EvoConfig: sigma_I must be > 0");
        if (!(buffer_ratio >= 1.0) || !std::isfinite(buffer_ratio))
            throw UsageError("EvoConfig: N_B_ratio must be >= 1 (the buffer must hold a full generation)");
        ratio(elite_ratio, "N_e_ratio");
        ratio(crossover_ratio, "N_c_ratio");
        ratio(mutation_ratio, "N_mu_ratio");
        ratio(t_mu_over_T, "t_mu_over_T");
        if (crossover_count() >= population)
            throw UsageError("EvoConfig: N_c must be smaller than N_p");
        if (crossover_count() > 0 && elite_count() < 2)
            throw UsageError("EvoConfig: crossover needs at least 2 elites");
        if (diffusion_steps < 2)
            throw UsageError("EvoConfig: T must be >= 2");
        if (t_a > diffusion_steps)
            throw UsageError("EvoConfig: t_a must lie in [0, T]");
        if (!(selection_pressure >= 0.0) || !std::isfinite(selection_pressure))
            throw UsageError("EvoConfig: s must be >= 0");
        if (hidden_units < 1)
            throw UsageError("EvoConfig: N_H must be >= 1");
        if (train.batch_size < 1)
            throw UsageError("EvoConfig: batch_size must be >= 1");
        if (!(train.lr > 0.0))
            throw UsageError("EvoConfig: lambda_LR must be > 0");
        if (!(alpha_floor > 0.0 && alpha_floor <= 1.0))
            throw UsageError("EvoConfig: alpha_floor must lie in (0, 1]");
        guidance.validate();
    }

    diffusion::DenoiserSpec denoiser_spec(std::size_t dim, std::size_t cond_dim) const
    {
        diffusion::DenoiserSpec s;
        s.dim = dim;
        s.cond_dim = cond_dim;
        s.hidden_layers = hidden_layers;
        s.hidden_units = hidden_units;
        s.activation = activation;
        s.time_encoding = time_encoding;
        s.sinusoidal_features = sinusoidal_features;
        return s;
    }

    diffusion::SamplerConfig sampler() const
    {
        diffusion::SamplerConfig s;
        s.sigma_rule = sigma_rule;
        s.init_std = sigma_init;
        s.alpha_floor = alpha_floor;
        s.guidance = guidance;
        return s;
    }
};

// ---------------------------------------------------------------------------
// Per-generation statistics

struct RunRecord {
    std::size_t generation = 0;
    double f_max = 0.0;
    double f_mean = 0.0;
    double f_std = 0.0;
    double entropy_bits = std::numeric_limits<double>::quiet_NaN(); // 2-D tasks only
    double peaks_cum = std::numeric_limits<double>::quiet_NaN();    // tasks with known optima only
    double condition_target = std::numeric_limits<double>::quiet_NaN(); // mean of the first target row
    double condition_mean = std::numeric_limits<double>::quiet_NaN();   // mean of the first label row
};

/// Builds RunRecords for any solver on a given task.
class RecordBuilder {
public:
    explicit RecordBuilder(const tasks::Task& task) : two_d_(task.dim() == 2)
    {
        auto centers = task.peak_centers();
        if (!centers.empty())
            tracker_.emplace(std::move(centers));
    }

    RunRecord make(std::size_t generation, std::span<const double> fitness, const Eigen::MatrixXd& genomes,
                   const Eigen::MatrixXd* targets = nullptr, const Eigen::MatrixXd* labels = nullptr)
    {
        RunRecord r;
        r.generation = generation;
        const auto s = metrics::fitness_stats(fitness);
        r.f_max = s.max;
        r.f_mean = s.mean;
        r.f_std = s.std;
        if (two_d_)
            r.entropy_bits = metrics::grid_entropy(genomes);
        if (tracker_)
            r.peaks_cum = double(tracker_->update(genomes));
        if (targets != nullptr && targets->rows() > 0 && targets->cols() > 0)
            r.condition_target = targets->row(0).mean();
        if (labels != nullptr && labels->rows() > 0 && labels->cols() > 0)
            r.condition_mean = labels->row(0).mean();
        return r;
    }

private:
    bool two_d_;
    std::optional<metrics::PeakTracker> tracker_;
};

// ---------------------------------------------------------------------------
// Evaluation

struct PopulationEvaluation {
    std::vector<double> fitness;
    Eigen::MatrixXd traits; // trait_dim x n
};

enum StreamTag : std::uint64_t {
    kStreamInit = 1,
    kStreamEval = 2,
    kStreamTrain = 3,
    kStreamTargets = 4,
    kStreamSeeds = 5,
    kStreamSample = 6,
    kStreamMutate = 7,
    kStreamModel = 8,
    kStreamCrossover = 9,
    kStreamResample = 10,
};

/// Evaluate every column. Individual i draws from the stream
/// (seed, generation, i), so the thread count cannot change results.
inline PopulationEvaluation evaluate_population(const tasks::Task& task, const Eigen::MatrixXd& genomes,
                                                std::size_t generation, std::uint64_t seed, std::size_t threads)
{
    const auto n = std::size_t(genomes.cols());
    PopulationEvaluation out;
    out.fitness.assign(n, 0.0);
    out.traits.resize(Eigen::Index(task.trait_dim()), Eigen::Index(n));
    parallel_for(n, threads, [&](std::size_t i) {
        Rng rng = make_rng(seed, {kStreamEval, generation, i});
        auto ev = task.evaluate(genomes.col(Eigen::Index(i)), generation, rng);
        out.fitness[i] = ev.fitness;
        if (task.trait_dim() > 0)
            out.traits.col(Eigen::Index(i)) = ev.traits;
    });
    return out;
}

// ---------------------------------------------------------------------------
// HADES / CHARLES-D state machine

struct HadesState {
    std::size_t generation = 0;
    Eigen::MatrixXd population;  // D x N_p, evaluated
    Eigen::MatrixXd targets;     // cond_dim x N_p used to sample it (no columns for generation 0)
    std::vector<double> fitness;
    Eigen::MatrixXd traits;      // trait_dim x N_p
    Eigen::MatrixXd labels;      // cond_dim x N_p
    DatasetBuffer buffer;
    std::optional<diffusion::Denoiser> model;
    std::vector<double> loss_trace; // last training run
};

class Hades {
public:
    Hades(EvoConfig cfg, tasks::Task task, conditioning::ConditionScheme scheme)
        : cfg_(std::move(cfg)), task_(std::move(task)), scheme_(std::move(scheme)),
          schedule_(diffusion::make_schedule(cfg_.schedule, cfg_.diffusion_steps)), records_(task_)
    {
        cfg_.validate();
        scheme_.validate(task_.dim(), task_.trait_dim());
        cond_dim_ = scheme_.cond_dim();
    }

    const EvoConfig& config() const noexcept { return cfg_; }
    const tasks::Task& task() const noexcept { return task_; }
    const conditioning::ConditionScheme& scheme() const noexcept { return scheme_; }
    const HadesState& state() const noexcept { return state_; }
    const diffusion::NoiseSchedule& schedule() const noexcept { return schedule_; }

    /// Draw and evaluate generation 0 from N(0, sigma_I^2 I).
    RunRecord initialize()
    {
        state_ = HadesState{};
        state_.buffer = DatasetBuffer(cfg_.buffer_capacity());
        Rng rng = make_rng(cfg_.seed, {kStreamInit});
        Eigen::MatrixXd pop = normal_matrix(Eigen::Index(task_.dim()), Eigen::Index(cfg_.population), rng,
                                            cfg_.sigma_init);
        initialized_ = true;
        return absorb(0, std::move(pop), Eigen::MatrixXd(Eigen::Index(cond_dim_), 0));
    }

    /// Train on the buffer, sample the next generation, evaluate it and
    /// return its record.
    RunRecord step()
    {
        if (!initialized_)
            throw UsageError("Hades::step: call initialize() first");
        const std::size_t next = state_.generation + 1;
        train(next);
        Eigen::MatrixXd targets = draw_targets(next);
        Eigen::MatrixXd pop = sample(next, targets);
        return absorb(next, std::move(pop), std::move(targets));
    }

private:
    RunRecord absorb(std::size_t generation, Eigen::MatrixXd pop, Eigen::MatrixXd targets)
    {
        auto ev = evaluate_population(task_, pop, generation, cfg_.seed, cfg_.threads);
        const auto n = std::size_t(pop.cols());
        Eigen::MatrixXd labels{Eigen::Index(cond_dim_), Eigen::Index(n)};
        for (std::size_t i = 0; i < n && cond_dim_ > 0; ++i) {
            const Eigen::VectorXd tr =
                task_.trait_dim() > 0 ? Eigen::VectorXd(ev.traits.col(Eigen::Index(i))) : Eigen::VectorXd();
            scheme_.classify(pop.col(Eigen::Index(i)), ev.fitness[i], tr, labels.col(Eigen::Index(i)));
        }
        const auto h = roulette_weights(ev.fitness, cfg_.selection_pressure, cfg_.weight_mode,
                                        cfg_.literal_relative_fitness);
        std::vector<Individual> cohort(n);
        for (std::size_t i = 0; i < n; ++i) {
            cohort[i].genome = pop.col(Eigen::Index(i));
            cohort[i].fitness = ev.fitness[i];
            cohort[i].weight = h[i];
            cohort[i].condition = labels.col(Eigen::Index(i));
            cohort[i].generation = generation;
        }
        state_.buffer.update(std::move(cohort));
        if (scheme_.needs_relabel()) {
            Eigen::MatrixXd bg = state_.buffer.genomes();
            Eigen::MatrixXd bc = state_.buffer.conditions(cond_dim_);
            scheme_.relabel(bg, bc);
            auto& entries = state_.buffer.entries();
            for (std::size_t i = 0; i < entries.size(); ++i)
                entries[i].condition = bc.col(Eigen::Index(i));
            // newcomers sit at the tail of the buffer
            labels = bc.rightCols(Eigen::Index(n));
        }
        state_.generation = generation;
        state_.population = std::move(pop);
        state_.targets = std::move(targets);
        state_.fitness = std::move(ev.fitness);
        state_.traits = std::move(ev.traits);
        state_.labels = std::move(labels);
        return records_.make(generation, state_.fitness, state_.population, &state_.targets, &state_.labels);
    }

    diffusion::TrainingSet training_set(std::size_t generation) const
    {
        const auto& entries = state_.buffer.entries();
        const auto m = Eigen::Index(entries.size());
        const auto d = Eigen::Index(task_.dim());
        diffusion::TrainingSet ts;
        ts.genomes.resize(d, m);
        ts.weights.resize(m);
        ts.conditions.resize(Eigen::Index(cond_dim_), m);
        double total = 0.0;
        for (const auto& e : entries)
            total += e.weight;
        const bool uniform = !(total > 0.0);
        if (cfg_.weight_mode == WeightMode::fitness_scaled || uniform) {
            for (Eigen::Index i = 0; i < m; ++i) {
                const auto& e = entries[std::size_t(i)];
                ts.genomes.col(i) = e.genome;
                ts.weights[i] = uniform ? 1.0 : e.weight;
                if (cond_dim_ > 0)
                    ts.conditions.col(i) = e.condition;
            }
            return ts;
        }
        // w_N: importance-resample |buffer| training points with probability h.
        std::vector<double> p(entries.size());
        for (std::size_t i = 0; i < entries.size(); ++i)
            p[i] = entries[i].weight;
        std::discrete_distribution<std::size_t> pick(p.begin(), p.end());
        Rng rng = make_rng(cfg_.seed, {kStreamResample, generation});
        for (Eigen::Index i = 0; i < m; ++i) {
            const auto& e = entries[pick(rng)];
            ts.genomes.col(i) = e.genome;
            ts.weights[i] = 1.0;
            if (cond_dim_ > 0)
                ts.conditions.col(i) = e.condition;
        }
        return ts;
    }

    void train(std::size_t generation)
    {
        if (!state_.model || cfg_.retrain_mode == RetrainMode::reinit) {
            Rng mrng = make_rng(cfg_.seed, {kStreamModel, generation});
            state_.model = diffusion::Denoiser::create(cfg_.denoiser_spec(task_.dim(), cond_dim_), mrng);
        }
        Rng trng = make_rng(cfg_.seed, {kStreamTrain, generation});
        state_.loss_trace =
            diffusion::dm_train(*state_.model, training_set(generation), schedule_, cfg_.guidance, cfg_.train, trng);
    }

    Eigen::MatrixXd draw_targets(std::size_t generation) const
    {
        if (cond_dim_ == 0)
            return Eigen::MatrixXd(0, Eigen::Index(cfg_.population));
        const auto bf = state_.buffer.fitness();
        const Eigen::MatrixXd bc = state_.buffer.conditions(cond_dim_);
        conditioning::TargetContext ctx;
        ctx.next_generation = generation;
        ctx.population_fitness = state_.fitness;
        ctx.buffer_fitness = bf;
        ctx.buffer_conditions = &bc;
        Rng rng = make_rng(cfg_.seed, {kStreamTargets, generation});
        return scheme_.targets(ctx, cfg_.population, rng);
    }

    static Eigen::MatrixXd columns(const Eigen::MatrixXd& m, const std::vector<Eigen::Index>& idx)
    {
        Eigen::MatrixXd out(m.rows(), Eigen::Index(idx.size()));
        for (std::size_t j = 0; j < idx.size(); ++j)
            out.col(Eigen::Index(j)) = m.col(idx[j]);
        return out;
    }

    Eigen::MatrixXd sample(std::size_t generation, const Eigen::MatrixXd& targets) const
    {
        const auto& model = *state_.model;
        const auto sampler = cfg_.sampler();
        const auto d = Eigen::Index(task_.dim());
        const std::size_t np = cfg_.population;
        const std::size_t nc = cfg_.crossover_count();
        const std::size_t nf = np - nc;
        const std::size_t t_mu = cfg_.t_mu();
        const bool cond = cond_dim_ > 0;
        Eigen::MatrixXd pop(d, Eigen::Index(np));

        // crossover children from the elites of the current generation
        if (nc > 0) {
            Rng crng = make_rng(cfg_.seed, {kStreamCrossover, generation});
            std::vector<std::size_t> rank(state_.fitness.size());
            std::iota(rank.begin(), rank.end(), std::size_t{0});
            std::stable_sort(rank.begin(), rank.end(),
                             [&](std::size_t a, std::size_t b) { return state_.fitness[a] > state_.fitness[b]; });
            const std::size_t ne = std::min(cfg_.elite_count(), rank.size());
            std::vector<double> ef(ne);
            for (std::size_t e = 0; e < ne; ++e)
                ef[e] = state_.fitness[rank[e]];
            for (std::size_t c = 0; c < nc; ++c) {
                const auto [a, b] = select_parents(ef, cfg_.selection_pressure, crng);
                pop.col(Eigen::Index(c)) = crossover_uniform(state_.population.col(Eigen::Index(rank[a])),
                                                             state_.population.col(Eigen::Index(rank[b])), crng);
            }
            if (cfg_.t_a > 0) {
                const std::size_t start = std::max(cfg_.t_a, t_mu);
                Rng prng = make_rng(cfg_.seed, {kStreamSample, generation, 1});
                Eigen::MatrixXd kids = pop.leftCols(Eigen::Index(nc));
                for (Eigen::Index c = 0; c < kids.cols(); ++c)
                    kids.col(c) = mutate_diffuse(kids.col(c), start, schedule_, prng);
                const Eigen::MatrixXd kt = cond ? Eigen::MatrixXd(targets.leftCols(Eigen::Index(nc))) : Eigen::MatrixXd();
                pop.leftCols(Eigen::Index(nc)) =
                    diffusion::partial_denoise(model, schedule_, kids, start, cond ? &kt : nullptr, sampler, prng);
            }
        }

        // fresh samples from sigma_I-scaled noise
        if (nf > 0) {
            Rng srng = make_rng(cfg_.seed, {kStreamSeeds, generation});
            const Eigen::MatrixXd seeds = normal_matrix(d, Eigen::Index(nf), srng, cfg_.sigma_init);
            const Eigen::MatrixXd ft = cond ? Eigen::MatrixXd(targets.rightCols(Eigen::Index(nf))) : Eigen::MatrixXd();
            Rng prng = make_rng(cfg_.seed, {kStreamSample, generation, 0});
            pop.rightCols(Eigen::Index(nf)) =
                diffusion::ddim_sample(model, schedule_, sampler, nf, cond ? &ft : nullptr, &seeds, prng);
        }

        // mutation of a random N_mu subset, then readaptation
        const std::size_t nm = std::min(cfg_.mutation_count(), np);
        if (nm > 0 && t_mu > 0) {
            Rng mrng = make_rng(cfg_.seed, {kStreamMutate, generation});
            std::vector<Eigen::Index> all(np);
            std::iota(all.begin(), all.end(), Eigen::Index{0});
            std::shuffle(all.begin(), all.end(), mrng);
            std::vector<Eigen::Index> chosen(all.begin(), all.begin() + std::ptrdiff_t(nm));
            std::sort(chosen.begin(), chosen.end());
            for (auto j : chosen)
                pop.col(j) = mutate_diffuse(pop.col(j), t_mu, schedule_, mrng);
            if (cfg_.t_a > 0) {
                const Eigen::MatrixXd sub = columns(pop, chosen);
                const Eigen::MatrixXd st = cond ? columns(targets, chosen) : Eigen::MatrixXd();
                const Eigen::MatrixXd re =
                    diffusion::partial_denoise(model, schedule_, sub, cfg_.t_a, cond ? &st : nullptr, sampler, mrng);
                for (std::size_t k = 0; k < chosen.size(); ++k)
                    pop.col(chosen[k]) = re.col(Eigen::Index(k));
            }
        }
        for (Eigen::Index j = 0; j < pop.cols(); ++j)
            for (Eigen::Index i = 0; i < d; ++i)
                if (!std::isfinite(pop(i, j)))
                    throw NumericError("sampled genome is not finite", std::size_t(j));
        return pop;
    }

    EvoConfig cfg_;
    tasks::Task task_;
    conditioning::ConditionScheme scheme_;
    diffusion::NoiseSchedule schedule_;
    RecordBuilder records_;
    std::size_t cond_dim_ = 0;
    HadesState state_;
    bool initialized_ = false;
};

/// One full generation on an initialized driver.
inline RunRecord hades_generation(Hades& driver) { return driver.step(); }

// ---------------------------------------------------------------------------
// Whole runs

/// Snapshot of one evaluated generation.
struct GenerationLog {
    std::size_t generation = 0;
    Eigen::MatrixXd genomes;
    std::vector<double> fitness;
    Eigen::MatrixXd traits;
    Eigen::MatrixXd labels;
    Eigen::MatrixXd targets;
};

struct RunHistory {
    std::vector<RunRecord> records; // generation 0..N_tau
    std::vector<GenerationLog> generations; // filled when requested
    Eigen::MatrixXd final_population;
    std::vector<double> final_fitness;
    std::optional<diffusion::Denoiser> final_model;
};

struct RunOptions {
    bool keep_generations = false;
    /// Called after every generation; return false to stop early.
    std::function<bool(const RunRecord&, const HadesState&)> on_generation;
};

inline GenerationLog log_state(const HadesState& s)
{
    return {s.generation, s.population, s.fitness, s.traits, s.labels, s.targets};
}

/// Generation 0 is the N(0, sigma_I^2) initial population; generations
/// 1..N_tau are sampled by the denoiser. Returns N_tau + 1 records unless
/// stopped early.
inline RunHistory run_evolution(const EvoConfig& cfg, const tasks::Task& task,
                                const conditioning::ConditionScheme& scheme, std::size_t generations,
                                const RunOptions& opts = {})
{
    Hades driver(cfg, task, scheme);
    RunHistory h;
    auto handle = [&](RunRecord r) {
        h.records.push_back(r);
        if (opts.keep_generations)
            h.generations.push_back(log_state(driver.state()));
        return !opts.on_generation || opts.on_generation(r, driver.state());
    };
    bool go = handle(driver.initialize());
    for (std::size_t g = 1; g <= generations && go; ++g)
        go = handle(driver.step());
    h.final_population = driver.state().population;
    h.final_fitness = driver.state().fitness;
    h.final_model = driver.state().model;
    return h;
}

} // namespace hades::evolution
