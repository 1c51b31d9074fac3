#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "error.hpp"
#include "nn.hpp"
#include "rng.hpp"

namespace hades::metrics {

struct GridSpec {
    std::size_t bins = 101;
    double lo = -6.0;
    double hi = 6.0;
};

/// Shannon entropy (bits) of the 2-D histogram of a population (2 x n).
/// Points outside the grid are clamped into the border cells.
inline double grid_entropy(const Eigen::MatrixXd& genomes, const GridSpec& grid = {})
{
    if (genomes.rows() != 2)
        throw UsageError("grid_entropy: genomes must be 2 x n");
    if (genomes.cols() == 0)
        throw UsageError("grid_entropy: empty population");
    if (grid.bins == 0 || !(grid.hi > grid.lo))
        throw UsageError("grid_entropy: invalid grid");
    const double width = (grid.hi - grid.lo) / double(grid.bins);
    auto cell = [&](double v) -> std::size_t {
        if (!std::isfinite(v))
            throw NumericError("grid_entropy: non-finite genome", 0);
        const double k = std::floor((v - grid.lo) / width);
        return std::size_t(std::clamp(k, 0.0, double(grid.bins - 1)));
    };
    std::vector<std::size_t> counts(grid.bins * grid.bins, 0);
    for (Eigen::Index j = 0; j < genomes.cols(); ++j)
        ++counts[cell(genomes(0, j)) * grid.bins + cell(genomes(1, j))];
    const double n = double(genomes.cols());
    double h = 0.0;
    for (std::size_t c : counts)
        if (c > 0) {
            const double p = double(c) / n;
            h -= p * std::log2(p);
        }
    return h;
}

/// Cumulative count of optima that have been "found": a peak counts from the
/// first generation holding at least `min_points` samples within `radius` of it.
class PeakTracker {
public:
    PeakTracker(std::vector<Eigen::VectorXd> centers, double radius = 0.25, std::size_t min_points = 10)
        : centers_(std::move(centers)), radius_(radius), min_points_(min_points), found_(centers_.size(), 0)
    {
        if (!(radius > 0.0))
            throw UsageError("PeakTracker: radius must be > 0");
    }

    /// Add one generation (D x n) and return the cumulative number of peaks found.
    std::size_t update(const Eigen::MatrixXd& population)
    {
        for (std::size_t p = 0; p < centers_.size(); ++p) {
            if (centers_[p].size() != population.rows())
                throw UsageError("PeakTracker: dimension mismatch");
            std::size_t near = 0;
            for (Eigen::Index j = 0; j < population.cols(); ++j)
                near += (population.col(j) - centers_[p]).norm() <= radius_;
            if (near >= min_points_)
                found_[p] = 1;
        }
        return found();
    }

    std::size_t found() const { return std::size_t(std::count(found_.begin(), found_.end(), char(1))); }

    std::size_t peak_count() const noexcept { return centers_.size(); }

private:
    std::vector<Eigen::VectorXd> centers_;
    double radius_;
    std::size_t min_points_;
    std::vector<char> found_;
};

/// Peaks found after each generation of `history`.
inline std::vector<std::size_t> peaks_found(const std::vector<Eigen::MatrixXd>& history,
                                            std::vector<Eigen::VectorXd> centers, double radius = 0.25,
                                            std::size_t min_points = 10)
{
    PeakTracker tracker(std::move(centers), radius, min_points);
    std::vector<std::size_t> out;
    out.reserve(history.size());
    for (const auto& pop : history)
        out.push_back(tracker.update(pop));
    return out;
}

struct FitnessStats {
    double max = 0.0;
    double mean = 0.0;
    double std = 0.0; // population standard deviation
    std::size_t argmax = 0;
};

inline FitnessStats fitness_stats(std::span<const double> f)
{
    if (f.empty())
        throw UsageError("fitness_stats: empty input");
    FitnessStats s;
    s.max = f[0];
    double sum = 0.0;
    for (std::size_t i = 0; i < f.size(); ++i) {
        if (!std::isfinite(f[i]))
            throw NumericError("fitness_stats: non-finite fitness", i);
        sum += f[i];
        if (f[i] > s.max) {
            s.max = f[i];
            s.argmax = i;
        }
    }
    s.mean = sum / double(f.size());
    double ss = 0.0;
    for (double v : f)
        ss += (v - s.mean) * (v - s.mean);
    s.std = std::sqrt(ss / double(f.size()));
    return s;
}

// ---------------------------------------------------------------------------
// Surrogate trait predictor: genome -> phenotype, weighted MSE fit.

struct TraitPredictorOptions {
    std::size_t hidden_layers = 4;
    std::size_t hidden_units = 48;
    std::size_t epochs = 500;
    std::size_t batch_size = 256;
    double lr = 1e-3;
    double weight_decay = 0.0;
};

struct TraitPredictor {
    nn::NetParams net;
    std::vector<double> loss_trace;

    Eigen::MatrixXd predict(const Eigen::MatrixXd& genomes) const { return nn::forward_batch(net, genomes); }
};

/// genomes: D x n, traits: k x n, weights: n (>= 0, not all zero).
inline TraitPredictor train_trait_predictor(const Eigen::MatrixXd& genomes, const Eigen::MatrixXd& traits,
                                            const Eigen::VectorXd& weights, const TraitPredictorOptions& opts,
                                            Rng& rng)
{
    if (genomes.cols() == 0)
        throw UsageError("train_trait_predictor: empty dataset");
    if (traits.cols() != genomes.cols() || weights.size() != genomes.cols())
        throw UsageError("train_trait_predictor: sample count mismatch");
    nn::NetSpec spec;
    spec.input_dim = std::size_t(genomes.rows());
    spec.hidden_layers = opts.hidden_layers;
    spec.hidden_units = opts.hidden_units;
    spec.output_dim = std::size_t(traits.rows());
    spec.activation = nn::Activation::leaky_relu;
    TraitPredictor out{nn::init_params(spec, rng), {}};
    nn::WeightedBatch data{genomes, traits, weights};
    auto adam = nn::make_adam(out.net.size(), opts.lr, opts.weight_decay);
    out.loss_trace = nn::train(out.net, adam, data, opts.epochs, opts.batch_size, rng);
    return out;
}

/// Prediction error overall and within the high-fitness stratum.
struct TraitReport {
    double mse_all = 0.0;
    double mse_high = std::numeric_limits<double>::quiet_NaN(); // NaN when the stratum is empty
    std::size_t n_all = 0;
    std::size_t n_high = 0;
};

/// Unweighted mean squared error (summed over trait components) on a held-out
/// set; the high stratum holds samples with fitness >= `high_fitness`.
inline TraitReport trait_report(const TraitPredictor& predictor, const Eigen::MatrixXd& genomes,
                                const Eigen::MatrixXd& traits, std::span<const double> fitness, double high_fitness)
{
    if (genomes.cols() == 0)
        throw UsageError("trait_report: empty dataset");
    if (traits.cols() != genomes.cols() || fitness.size() != std::size_t(genomes.cols()))
        throw UsageError("trait_report: sample count mismatch");
    const Eigen::MatrixXd err = predictor.predict(genomes) - traits;
    TraitReport r;
    double all = 0.0, high = 0.0;
    for (Eigen::Index j = 0; j < err.cols(); ++j) {
        const double e = err.col(j).squaredNorm();
        all += e;
        ++r.n_all;
        if (fitness[std::size_t(j)] >= high_fitness) {
            high += e;
            ++r.n_high;
        }
    }
    r.mse_all = all / double(r.n_all);
    if (r.n_high > 0)
        r.mse_high = high / double(r.n_high);
    return r;
}

} // namespace hades::metrics
