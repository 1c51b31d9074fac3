#pragma once

// Condition labels for training samples and condition targets for sampling.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "error.hpp"
#include "metrics.hpp"
#include "phenotype.hpp"
#include "rng.hpp"

namespace hades::conditioning {

/// Quadrant label of a 2-D genome: 1 in the first quadrant, -1 in the third,
/// 0 in the second and fourth and on the axes.
inline double quadrant_classify(std::span<const double> g)
{
    if (g.size() != 2)
        throw UsageError("quadrant_classify: genome must be 2-dimensional");
    if (g[0] > 0.0 && g[1] > 0.0)
        return 1.0;
    if (g[0] < 0.0 && g[1] < 0.0)
        return -1.0;
    return 0.0;
}

/// mu_f + |z| sigma_f with z ~ N(0, 1).
inline double fisher_target(std::span<const double> fitness, Rng& rng)
{
    const auto s = metrics::fitness_stats(fitness);
    return s.mean + std::abs(standard_normal(rng)) * s.std;
}

/// f_max + z sigma_f with z ~ N(0, 1).
inline double greedy_target(std::span<const double> fitness, Rng& rng)
{
    const auto s = metrics::fitness_stats(fitness);
    return s.max + standard_normal(rng) * s.std;
}

/// Per-point diversity: log of the mean Euclidean distance to all points
/// beyond the k-th nearest neighbour (genomes: D x N). When N == k + 1 nothing
/// lies beyond the k-th neighbour and its distance is used instead. Mean
/// distances below `floor` are clamped before the log.
inline std::vector<double> knn_diversity(const Eigen::MatrixXd& genomes, std::size_t k, double floor = 1e-8)
{
    const auto n = std::size_t(genomes.cols());
    if (k < 1)
        throw UsageError("knn_diversity: k must be >= 1");
    if (n <= k)
        throw UsageError("knn_diversity: need more than k = " + std::to_string(k) + " points, got "
                         + std::to_string(n));
    std::vector<double> out(n);
    std::vector<double> dist(n - 1);
    for (std::size_t i = 0; i < n; ++i) {
        std::size_t m = 0;
        for (std::size_t j = 0; j < n; ++j) {
            if (j == i)
                continue;
            dist[m++] = (genomes.col(Eigen::Index(j)) - genomes.col(Eigen::Index(i))).norm();
        }
        double mean;
        if (n - 1 == k) {
            mean = *std::max_element(dist.begin(), dist.end());
        }
        else {
            std::nth_element(dist.begin(), dist.begin() + std::ptrdiff_t(k), dist.end());
            // dist[k..] now holds exactly the neighbours ranked beyond k (0-based index k = rank k + 1)
            const double far = std::accumulate(dist.begin() + std::ptrdiff_t(k), dist.end(), 0.0);
            mean = far / double(n - 1 - k);
        }
        out[i] = std::log(std::max(mean, floor));
    }
    return out;
}

struct NoveltyParams {
    std::size_t k = 128;
    double beta = 10.0;
    double delta = 1e-8;
};

/// Selection probabilities over candidates for a novelty target. Low relative
/// fitness and high diversity are favoured:
///   f~_i = 1 - (f_i - f_min) / (f_max - f_min)    (0 when all equal)
///   E_i  = f~_i / max(delta_i + |min delta + D|, D)
///   p_i  ~ exp(-beta E_i)
inline std::vector<double> novelty_probabilities(std::span<const double> fitness, std::span<const double> diversity,
                                                 const NoveltyParams& p)
{
    if (fitness.size() != diversity.size() || fitness.empty())
        throw UsageError("novelty_probabilities: fitness and diversity must be equally sized and non-empty");
    const auto [fmin_it, fmax_it] = std::minmax_element(fitness.begin(), fitness.end());
    const double fmin = *fmin_it, fmax = *fmax_it;
    const double dmin = *std::min_element(diversity.begin(), diversity.end());
    const double offset = std::abs(dmin + p.delta);
    std::vector<double> e(fitness.size());
    for (std::size_t i = 0; i < e.size(); ++i) {
        const double rel = fmax > fmin ? 1.0 - (fitness[i] - fmin) / (fmax - fmin) : 0.0;
        e[i] = rel / std::max(diversity[i] + offset, p.delta);
    }
    const double emin = *std::min_element(e.begin(), e.end());
    std::vector<double> prob(e.size());
    double z = 0.0;
    for (std::size_t i = 0; i < e.size(); ++i) {
        prob[i] = std::exp(-p.beta * (e[i] - emin));
        z += prob[i];
    }
    for (auto& v : prob)
        v /= z;
    return prob;
}

/// Draw one candidate by novelty_probabilities and return its diversity value.
inline double novelty_target(std::span<const double> fitness, std::span<const double> diversity,
                             const NoveltyParams& p, Rng& rng)
{
    const auto prob = novelty_probabilities(fitness, diversity, p);
    std::discrete_distribution<std::size_t> pick(prob.begin(), prob.end());
    return diversity[pick(rng)];
}

// ---------------------------------------------------------------------------
// Piecewise-constant condition targets over generations.

class ConditionSchedule {
public:
    struct Segment {
        std::size_t first = 1; // inclusive, 1-based generation
        std::size_t last = 1;  // inclusive
        Eigen::VectorXd target;
    };

    ConditionSchedule() = default;

    /// Segments must be contiguous, start at generation 1 and share one
    /// target dimension. With `cyclic`, generations beyond the last segment
    /// wrap around; otherwise they are an error.
    ConditionSchedule(std::vector<Segment> segments, bool cyclic = false)
        : segments_(std::move(segments)), cyclic_(cyclic)
    {
        if (segments_.empty())
            throw UsageError("ConditionSchedule: no segments");
        std::size_t expect = 1;
        for (std::size_t i = 0; i < segments_.size(); ++i) {
            const auto& s = segments_[i];
            if (s.first != expect || s.last < s.first)
                throw UsageError("ConditionSchedule: segment " + std::to_string(i)
                                 + " must start at generation " + std::to_string(expect)
                                 + " and end no earlier than it starts");
            if (s.target.size() != segments_[0].target.size() || s.target.size() == 0)
                throw UsageError("ConditionSchedule: segment " + std::to_string(i) + " has a mismatched target");
            expect = s.last + 1;
        }
    }

    /// Single target for every generation.
    static ConditionSchedule constant(Eigen::VectorXd target)
    {
        return ConditionSchedule({{1, 1, std::move(target)}}, true);
    }

    /// True when every generation in [1, n] has a target.
    bool covers(std::size_t n) const noexcept { return !empty() && (cyclic_ || span_length() >= n); }

    bool empty() const noexcept { return segments_.empty(); }
    std::size_t dim() const noexcept { return empty() ? 0 : std::size_t(segments_[0].target.size()); }
    std::size_t span_length() const noexcept { return empty() ? 0 : segments_.back().last; }
    bool cyclic() const noexcept { return cyclic_; }
    const std::vector<Segment>& segments() const noexcept { return segments_; }

    /// Target for generation tau (1-based).
    const Eigen::VectorXd& target(std::size_t tau) const
    {
        if (empty())
            throw UsageError("ConditionSchedule: empty schedule");
        if (tau < 1)
            throw UsageError("ConditionSchedule: generations are 1-based");
        std::size_t g = tau;
        if (g > span_length()) {
            if (!cyclic_)
                throw UsageError("ConditionSchedule: generation " + std::to_string(tau)
                                 + " is not covered (schedule ends at " + std::to_string(span_length()) + ")");
            g = (g - 1) % span_length() + 1;
        }
        for (const auto& s : segments_)
            if (g >= s.first && g <= s.last)
                return s.target;
        return segments_.back().target;
    }

private:
    std::vector<Segment> segments_;
    bool cyclic_ = false;
};

inline const Eigen::VectorXd& schedule_target(const ConditionSchedule& schedule, std::size_t tau)
{
    return schedule.target(tau);
}

// ---------------------------------------------------------------------------
// Conditioning scheme: how samples are labelled and how targets are drawn.

enum class ConditionKind { none, quadrant, fitness_fisher, fitness_greedy, novelty, phenotype, composite };

inline std::string_view to_string(ConditionKind k)
{
    switch (k) {
    case ConditionKind::none: return "none";
    case ConditionKind::quadrant: return "quadrant";
    case ConditionKind::fitness_fisher: return "fitness_fisher";
    case ConditionKind::fitness_greedy: return "fitness_greedy";
    case ConditionKind::novelty: return "novelty";
    case ConditionKind::phenotype: return "phenotype";
    case ConditionKind::composite: return "composite";
    }
    return "?";
}

inline ConditionKind condition_kind_from_string(std::string_view s)
{
    for (auto k : {ConditionKind::none, ConditionKind::quadrant, ConditionKind::fitness_fisher,
                   ConditionKind::fitness_greedy, ConditionKind::novelty, ConditionKind::phenotype,
                   ConditionKind::composite})
        if (to_string(k) == s)
            return k;
    throw UsageError("unknown condition kind '" + std::string(s) + "'");
}

/// Everything a scheme may read when drawing targets for the next generation.
struct TargetContext {
    std::size_t next_generation = 1;           // generation the targets are for
    std::span<const double> population_fitness; // fitness of the generation just evaluated
    std::span<const double> buffer_fitness;     // fitness stored with buffer entries
    const Eigen::MatrixXd* buffer_conditions = nullptr; // cond_dim x |buffer|
};

struct ConditionScheme {
    ConditionKind kind = ConditionKind::none;
    ConditionSchedule schedule; // quadrant / phenotype targets
    NoveltyParams novelty{};
    std::vector<ConditionScheme> components; // composite only; each contributes its rows in order

    static ConditionScheme none() { return {}; }

    static ConditionScheme quadrant(ConditionSchedule s)
    {
        ConditionScheme c;
        c.kind = ConditionKind::quadrant;
        c.schedule = std::move(s);
        return c;
    }

    static ConditionScheme fisher() { return {ConditionKind::fitness_fisher, {}, {}, {}}; }
    static ConditionScheme greedy() { return {ConditionKind::fitness_greedy, {}, {}, {}}; }
    static ConditionScheme novelty_scheme(NoveltyParams p = {}) { return {ConditionKind::novelty, {}, p, {}}; }

    static ConditionScheme phenotype(ConditionSchedule s)
    {
        ConditionScheme c;
        c.kind = ConditionKind::phenotype;
        c.schedule = std::move(s);
        return c;
    }

    static ConditionScheme composite(std::vector<ConditionScheme> parts)
    {
        ConditionScheme c;
        c.kind = ConditionKind::composite;
        c.components = std::move(parts);
        return c;
    }

    void validate(std::size_t genome_dim, std::size_t trait_dim) const
    {
        switch (kind) {
        case ConditionKind::quadrant:
            if (genome_dim != 2)
                throw UsageError("quadrant conditioning needs a 2-D genome");
            if (schedule.dim() != 1)
                throw UsageError("quadrant conditioning needs a 1-D target schedule");
            break;
        case ConditionKind::phenotype:
            if (trait_dim != 3)
                throw UsageError("phenotype conditioning needs a task with (x_r, x_dot_r, f) traits");
            if (schedule.dim() != 3)
                throw UsageError("phenotype conditioning needs a 3-D target schedule");
            break;
        case ConditionKind::novelty:
            if (novelty.k < 1 || !(novelty.beta >= 0.0) || !(novelty.delta > 0.0))
                throw UsageError("novelty conditioning needs k >= 1, beta >= 0, delta > 0");
            break;
        case ConditionKind::composite:
            if (components.empty())
                throw UsageError("composite conditioning needs at least one component");
            for (const auto& c : components) {
                if (c.kind == ConditionKind::composite || c.kind == ConditionKind::none)
                    throw UsageError("composite components must be plain, non-empty schemes");
                c.validate(genome_dim, trait_dim);
            }
            break;
        default: break;
        }
    }

    std::size_t cond_dim() const
    {
        switch (kind) {
        case ConditionKind::none: return 0;
        case ConditionKind::phenotype: return 3;
        case ConditionKind::composite: {
            std::size_t d = 0;
            for (const auto& c : components)
                d += c.cond_dim();
            return d;
        }
        default: return 1;
        }
    }

    /// True when labels depend on the whole buffer and must be recomputed
    /// after every buffer update.
    bool needs_relabel() const
    {
        if (kind == ConditionKind::novelty)
            return true;
        return std::any_of(components.begin(), components.end(), [](const auto& c) { return c.needs_relabel(); });
    }

    /// Label one evaluated individual. Buffer-dependent rows are left NaN.
    void classify(const Eigen::VectorXd& genome, double fitness, const Eigen::VectorXd& traits,
                  Eigen::Ref<Eigen::VectorXd> out) const
    {
        switch (kind) {
        case ConditionKind::none: break;
        case ConditionKind::quadrant:
            out[0] = quadrant_classify(std::span<const double>(genome.data(), std::size_t(genome.size())));
            break;
        case ConditionKind::fitness_fisher:
        case ConditionKind::fitness_greedy: out[0] = fitness; break;
        case ConditionKind::novelty: out[0] = std::numeric_limits<double>::quiet_NaN(); break;
        case ConditionKind::phenotype:
            if (traits.size() != 3)
                throw UsageError("phenotype conditioning: individual has no phenotype traits");
            out = traits;
            break;
        case ConditionKind::composite: {
            Eigen::Index off = 0;
            for (const auto& c : components) {
                const auto d = Eigen::Index(c.cond_dim());
                c.classify(genome, fitness, traits, out.segment(off, d));
                off += d;
            }
            break;
        }
        }
    }

    /// Recompute buffer-dependent rows over the whole buffer (genomes D x n).
    void relabel(const Eigen::MatrixXd& genomes, Eigen::MatrixXd& conditions) const
    {
        relabel_rows(genomes, conditions, 0);
    }

    /// Targets for the next generation, one column per offspring.
    Eigen::MatrixXd targets(const TargetContext& ctx, std::size_t n, Rng& rng) const
    {
        Eigen::MatrixXd out{Eigen::Index(cond_dim()), Eigen::Index(n)};
        fill_targets(ctx, out, 0, rng);
        return out;
    }

private:
    void relabel_rows(const Eigen::MatrixXd& genomes, Eigen::MatrixXd& conditions, Eigen::Index row) const
    {
        if (kind == ConditionKind::novelty) {
            const auto n = std::size_t(genomes.cols());
            if (n <= 1) {
                conditions.row(row).setZero();
                return;
            }
            // Fewer points than k + 1 (early generations) shrink k.
            const std::size_t k = std::min(novelty.k, n - 1);
            const auto div = knn_diversity(genomes, k);
            for (std::size_t i = 0; i < n; ++i)
                conditions(row, Eigen::Index(i)) = div[i];
        }
        else if (kind == ConditionKind::composite) {
            Eigen::Index off = row;
            for (const auto& c : components) {
                c.relabel_rows(genomes, conditions, off);
                off += Eigen::Index(c.cond_dim());
            }
        }
    }

    void fill_targets(const TargetContext& ctx, Eigen::MatrixXd& out, Eigen::Index row, Rng& rng) const
    {
        const Eigen::Index n = out.cols();
        switch (kind) {
        case ConditionKind::none: break;
        case ConditionKind::quadrant:
        case ConditionKind::phenotype: {
            const auto& t = schedule.target(ctx.next_generation);
            for (Eigen::Index j = 0; j < n; ++j)
                out.block(row, j, t.size(), 1) = t;
            break;
        }
        case ConditionKind::fitness_fisher:
            for (Eigen::Index j = 0; j < n; ++j)
                out(row, j) = fisher_target(ctx.population_fitness, rng);
            break;
        case ConditionKind::fitness_greedy:
            for (Eigen::Index j = 0; j < n; ++j)
                out(row, j) = greedy_target(ctx.population_fitness, rng);
            break;
        case ConditionKind::novelty: {
            if (ctx.buffer_conditions == nullptr)
                throw UsageError("novelty targets need the buffer labels");
            const auto m = std::size_t(ctx.buffer_conditions->cols());
            std::vector<double> div(m);
            for (std::size_t i = 0; i < m; ++i)
                div[i] = (*ctx.buffer_conditions)(row, Eigen::Index(i));
            const auto prob = novelty_probabilities(ctx.buffer_fitness, div, novelty);
            std::discrete_distribution<std::size_t> pick(prob.begin(), prob.end());
            for (Eigen::Index j = 0; j < n; ++j)
                out(row, j) = div[pick(rng)];
            break;
        }
        case ConditionKind::composite: {
            Eigen::Index off = row;
            for (const auto& c : components) {
                c.fill_targets(ctx, out, off, rng);
                off += Eigen::Index(c.cond_dim());
            }
            break;
        }
        }
    }
};

} // namespace hades::conditioning
