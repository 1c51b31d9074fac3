#include <algorithm>
#include <cmath>
#include <numeric>

#include <gtest/gtest.h>

#include <hades/evolution.hpp>

using namespace hades;
using namespace hades::evolution;

namespace {

// Roulette weights evaluated by hand for an already ascending fitness vector.
std::vector<double> roulette_oracle(const std::vector<double>& sorted, double s)
{
    const double lo = sorted.front(), hi = sorted.back();
    std::vector<double> cum;
    double run = 0;
    for (double f : sorted) {
        run += hi > lo ? std::exp(s * (f - lo) / (hi - lo)) : 1.0;
        cum.push_back(run);
    }
    const double total = std::accumulate(cum.begin(), cum.end(), 0.0);
    for (auto& c : cum)
        c /= total;
    return cum;
}

Individual ind(double fitness, std::size_t generation, double tag = 0)
{
    return {Eigen::VectorXd::Constant(1, tag), fitness, 0.0, {}, generation};
}

EvoConfig small_config(std::uint64_t seed)
{
    EvoConfig c;
    c.population = 32;
    c.sigma_init = 0.5;
    c.elite_ratio = 0.25;
    c.hidden_layers = 2;
    c.hidden_units = 8;
    c.train.epochs = 4;
    c.train.batch_size = 16;
    c.seed = seed;
    return c;
}

EvoConfig row1_static(std::uint64_t seed)
{
    EvoConfig c;
    c.population = 256;
    c.sigma_init = 0.5;
    c.buffer_ratio = 1.0;
    c.elite_ratio = 0.15;
    c.crossover_ratio = 0.0;
    c.mutation_ratio = 1.0;
    c.t_mu_over_T = 0.05;
    c.t_a = 0;
    c.selection_pressure = 10;
    c.weight_mode = WeightMode::normalized;
    c.hidden_layers = 3;
    c.hidden_units = 24;
    c.activation = nn::Activation::leaky_relu;
    c.train = {100, 256, 1e-3, 1e-5};
    c.seed = seed;
    return c;
}

} // namespace

TEST(Roulette, EqualFitnessIsRankLinear)
{
    const std::vector<double> two{3.0, 3.0};
    const auto h2 = roulette_weights(two, 10.0, WeightMode::normalized);
    EXPECT_NEAR(h2[0], 1.0 / 3.0, 1e-15);
    EXPECT_NEAR(h2[1], 2.0 / 3.0, 1e-15);
    const std::vector<double> four(4, -1.0);
    const auto h4 = roulette_weights(four, 5.0, WeightMode::normalized);
    for (std::size_t i = 0; i < 4; ++i)
        EXPECT_NEAR(h4[i], 2.0 * double(i + 1) / (4.0 * 5.0), 1e-15);
}

TEST(Roulette, HandEvaluatedPair)
{
    const std::vector<double> f{0.0, 1.0};
    const auto h = roulette_weights(f, 1.0, WeightMode::normalized);
    const double e = std::exp(1.0);
    EXPECT_NEAR(h[0], 1.0 / (2.0 + e), 1e-15);
    EXPECT_NEAR(h[1], (1.0 + e) / (2.0 + e), 1e-15);
}

TEST(Roulette, InputOrderIsPreserved)
{
    const std::vector<double> f{5.0, -2.0, 1.0, 9.0};
    const auto h = roulette_weights(f, 3.0, WeightMode::normalized);
    const auto want = roulette_oracle({-2.0, 1.0, 5.0, 9.0}, 3.0);
    EXPECT_NEAR(h[1], want[0], 1e-15);
    EXPECT_NEAR(h[2], want[1], 1e-15);
    EXPECT_NEAR(h[0], want[2], 1e-15);
    EXPECT_NEAR(h[3], want[3], 1e-15);
}

TEST(Roulette, NormalizedSumsToOneAndIsMonotone)
{
    Rng rng = make_rng(1, {});
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t n = 1 + std::size_t(uniform01(rng) * 300);
        std::vector<double> f(n);
        for (auto& v : f)
            v = std::round(10.0 * standard_normal(rng)) / 2.0; // some ties
        const double s = 20.0 * uniform01(rng);
        const auto h = roulette_weights(f, s, WeightMode::normalized);
        EXPECT_NEAR(std::accumulate(h.begin(), h.end(), 0.0), 1.0, 1e-9);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < n; ++j)
                if (f[i] > f[j])
                    EXPECT_GT(h[i], h[j]);
    }
}

TEST(Roulette, FitnessScaledMultipliesBySumOfMagnitudes)
{
    const std::vector<double> f{-1.0, 2.0, 0.5};
    const auto hn = roulette_weights(f, 4.0, WeightMode::normalized);
    const auto hf = roulette_weights(f, 4.0, WeightMode::fitness_scaled);
    for (std::size_t i = 0; i < f.size(); ++i)
        EXPECT_NEAR(hf[i], 3.5 * hn[i], 1e-14);
}

TEST(Roulette, LiteralFormForAudit)
{
    const std::vector<double> f{0.0, 1.0, 2.0};
    const auto h = roulette_weights(f, 1.0, WeightMode::normalized, true);
    const double c1 = 1.0, c2 = 1.0 + std::exp(-1.0), c3 = c2; // F at f_max is the left limit 0
    const double total = c1 + c2 + c3;
    EXPECT_NEAR(h[0], c1 / total, 1e-15);
    EXPECT_NEAR(h[1], c2 / total, 1e-15);
    EXPECT_NEAR(h[2], c3 / total, 1e-15);
}

TEST(Roulette, RejectsEmptyAndNonFinite)
{
    EXPECT_THROW(roulette_weights({}, 1.0, WeightMode::normalized), UsageError);
    const std::vector<double> bad{1.0, std::nan("")};
    EXPECT_THROW(roulette_weights(bad, 1.0, WeightMode::normalized), NumericError);
}

TEST(SelectParents, EqualElitesGiveUniformPairs)
{
    const std::vector<double> f{1.0, 1.0};
    Rng rng = make_rng(2, {});
    double counts[2][2] = {};
    const int n = 10000;
    for (int i = 0; i < n; ++i) {
        const auto [a, b] = select_parents(f, 10.0, rng);
        counts[a][b] += 1;
    }
    // h = [1/3, 2/3] by rank, so pair probabilities are products of those.
    const double p[2] = {1.0 / 3.0, 2.0 / 3.0};
    double chi2 = 0;
    for (int a = 0; a < 2; ++a)
        for (int b = 0; b < 2; ++b) {
            const double expected = n * p[a] * p[b];
            chi2 += (counts[a][b] - expected) * (counts[a][b] - expected) / expected;
        }
    EXPECT_LT(chi2, 11.345); // chi-square, 3 dof, p = 0.01
}

TEST(SelectParents, PressureFavorsFitterParent)
{
    const std::vector<double> f{0.0, 100.0};
    Rng rng = make_rng(3, {});
    int high = 0;
    const int n = 10000;
    for (int i = 0; i < n; ++i) {
        const auto [a, b] = select_parents(f, 12.0, rng);
        high += (a == 1) + (b == 1);
    }
    EXPECT_GT(high, int(0.9 * 2 * n));
}

TEST(SelectParents, DuplicatesAllowedAndTooFewRejected)
{
    const std::vector<double> same{2.0, 2.0, 2.0};
    Rng rng = make_rng(4, {});
    for (int i = 0; i < 100; ++i)
        EXPECT_NO_THROW(select_parents(same, 1.0, rng));
    const std::vector<double> one{1.0};
    EXPECT_THROW(select_parents(one, 1.0, rng), UsageError);
}

TEST(Crossover, CoordinatesComeFromParents)
{
    Rng rng = make_rng(5, {});
    const Eigen::VectorXd a = Eigen::VectorXd::Zero(4), b = Eigen::VectorXd::Ones(4);
    Eigen::VectorXd mean = Eigen::VectorXd::Zero(4);
    const int n = 10000;
    for (int i = 0; i < n; ++i) {
        const auto c = crossover_uniform(a, b, rng);
        for (int k = 0; k < 4; ++k)
            EXPECT_TRUE(c[k] == 0.0 || c[k] == 1.0);
        mean += c;
    }
    mean /= n;
    for (int k = 0; k < 4; ++k)
        EXPECT_NEAR(mean[k], 0.5, 0.02);
    const Eigen::VectorXd g = Eigen::Vector3d(1, -2, 3);
    EXPECT_EQ(crossover_uniform(g, g, rng), g);
    EXPECT_THROW(crossover_uniform(g, a, rng), UsageError);
}

TEST(Mutation, DiffusionStep)
{
    const auto s = diffusion::schedule_cosine(100);
    const Eigen::VectorXd g = Eigen::Vector2d(3.0, -1.0);
    const Eigen::VectorXd zero = Eigen::VectorXd::Zero(2);
    Rng rng = make_rng(6, {});
    EXPECT_EQ(mutate_diffuse(g, 0, s, rng), g);
    Rng a = make_rng(7, {}), b = make_rng(7, {});
    EXPECT_EQ(mutate_diffuse(g, 100, s, a), mutate_diffuse(zero, 100, s, b));
    Rng c = make_rng(8, {}), d = make_rng(8, {});
    const Eigen::VectorXd eps = mutate_diffuse(zero, 50, s, d) * std::sqrt(2.0);
    EXPECT_TRUE(mutate_diffuse(g, 50, s, c).isApprox((g + eps) / std::sqrt(2.0), 1e-12));
}

TEST(Buffer, FillsUntilCapacity)
{
    DatasetBuffer buf(10);
    buffer_update(buf, {ind(1, 0), ind(2, 0), ind(3, 0), ind(4, 0)});
    EXPECT_EQ(buf.size(), 4u);
    EXPECT_EQ(buf.fitness(), (std::vector<double>{1, 2, 3, 4}));
}

TEST(Buffer, EvictsLowestIncumbents)
{
    DatasetBuffer buf(10);
    std::vector<Individual> first;
    for (int f = 10; f >= 1; --f)
        first.push_back(ind(f, 0));
    buffer_update(buf, first);
    buffer_update(buf, {ind(100, 1), ind(100, 1), ind(100, 1)});
    auto f = buf.fitness();
    std::sort(f.begin(), f.end());
    EXPECT_EQ(f, (std::vector<double>{4, 5, 6, 7, 8, 9, 10, 100, 100, 100}));
}

TEST(Buffer, WorseNewcomersStillEnter)
{
    DatasetBuffer buf(3);
    buffer_update(buf, {ind(5, 0), ind(6, 0), ind(7, 0)});
    buffer_update(buf, {ind(-1, 1), ind(-2, 1)});
    auto f = buf.fitness();
    std::sort(f.begin(), f.end());
    EXPECT_EQ(f, (std::vector<double>{-2, -1, 7}));
}

TEST(Buffer, TiesEvictOldestFirst)
{
    DatasetBuffer buf(3);
    buffer_update(buf, {ind(1, 2, 20.0), ind(1, 0, 0.0), ind(1, 1, 10.0)});
    buffer_update(buf, {ind(5, 3, 30.0)});
    std::vector<double> tags;
    for (const auto& e : buf.entries())
        tags.push_back(e.genome[0]);
    EXPECT_EQ(tags, (std::vector<double>{20.0, 10.0, 30.0}));
}

TEST(Buffer, OverfullCohortRejected)
{
    DatasetBuffer buf(2);
    EXPECT_THROW(buffer_update(buf, {ind(1, 0), ind(2, 0), ind(3, 0)}), UsageError);
    EXPECT_THROW(DatasetBuffer(0), UsageError);
}

TEST(EvoConfig, Validation)
{
    EvoConfig c;
    EXPECT_NO_THROW(c.validate());
    c.crossover_ratio = 1.0;
    EXPECT_THROW(c.validate(), UsageError);
    c = {};
    c.elite_ratio = 1.5;
    EXPECT_THROW(c.validate(), UsageError);
    c = {};
    c.buffer_ratio = 0.5;
    EXPECT_THROW(c.validate(), UsageError);
    c = {};
    c.t_a = 101;
    EXPECT_THROW(c.validate(), UsageError);
    c = {};
    c.population = 256;
    c.elite_ratio = 0.15;
    EXPECT_EQ(c.elite_count(), 39u);
    c.t_mu_over_T = 0.05;
    EXPECT_EQ(c.t_mu(), 5u);
}

TEST(Run, ZeroGenerationsIsInitialPopulation)
{
    auto cfg = small_config(9);
    cfg.population = 4000;
    const auto h = run_evolution(cfg, tasks::Task::double_peak({}), conditioning::ConditionScheme::none(), 0);
    ASSERT_EQ(h.records.size(), 1u);
    EXPECT_EQ(h.records[0].generation, 0u);
    EXPECT_FALSE(h.final_model.has_value());
    const auto& P = h.final_population;
    ASSERT_EQ(P.cols(), 4000);
    const Eigen::VectorXd mean = P.rowwise().mean();
    const Eigen::VectorXd sd = ((P.colwise() - mean).rowwise().squaredNorm() / double(P.cols())).cwiseSqrt();
    EXPECT_LT(mean.cwiseAbs().maxCoeff(), 0.05);
    EXPECT_NEAR(sd[0], 0.5, 0.025);
    EXPECT_NEAR(sd[1], 0.5, 0.025);
}

TEST(Run, InvariantsHoldEveryGeneration)
{
    auto cfg = small_config(10);
    cfg.buffer_ratio = 2.0;
    cfg.crossover_ratio = 0.25;
    cfg.t_a = 5;
    cfg.weight_mode = WeightMode::normalized;
    const std::size_t N_tau = 4;
    std::size_t seen = 0;
    RunOptions opts;
    opts.on_generation = [&](const RunRecord& r, const HadesState& s) {
        EXPECT_EQ(r.generation, seen++);
        EXPECT_EQ(s.population.cols(), 32);
        EXPECT_EQ(s.fitness.size(), 32u);
        EXPECT_LE(s.buffer.size(), cfg.buffer_capacity());
        return true;
    };
    const auto h = run_evolution(cfg, tasks::Task::double_peak({}), conditioning::ConditionScheme::none(), N_tau, opts);
    EXPECT_EQ(h.records.size(), N_tau + 1);
    EXPECT_TRUE(h.final_model.has_value());
}

TEST(Run, BufferEntriesComeFromPastPopulations)
{
    auto cfg = small_config(11);
    cfg.buffer_ratio = 3.0;
    std::vector<Eigen::MatrixXd> pops;
    RunOptions opts;
    opts.on_generation = [&](const RunRecord&, const HadesState& s) {
        pops.push_back(s.population);
        for (const auto& e : s.buffer.entries()) {
            const auto& P = pops.at(e.generation);
            bool found = false;
            for (Eigen::Index j = 0; j < P.cols() && !found; ++j)
                found = P.col(j) == e.genome;
            EXPECT_TRUE(found);
        }
        return true;
    };
    run_evolution(cfg, tasks::Task::double_peak({}), conditioning::ConditionScheme::none(), 4, opts);
}

TEST(Run, SameSeedSameHistoryAcrossThreadCounts)
{
    auto run = [](std::size_t threads) {
        auto cfg = small_config(12);
        cfg.crossover_ratio = 0.25;
        cfg.threads = threads;
        const auto scheme = conditioning::ConditionScheme::quadrant(
            conditioning::ConditionSchedule::constant(Eigen::VectorXd::Constant(1, 1.0)));
        return run_evolution(cfg, tasks::Task::double_peak({}), scheme, 3);
    };
    const auto a = run(1), b = run(1), c = run(4);
    ASSERT_EQ(a.records.size(), 4u);
    for (std::size_t g = 0; g < a.records.size(); ++g) {
        EXPECT_EQ(a.records[g].f_max, b.records[g].f_max);
        EXPECT_EQ(a.records[g].condition_mean, c.records[g].condition_mean);
        EXPECT_EQ(a.records[g].f_std, c.records[g].f_std);
    }
    EXPECT_EQ(a.final_population, b.final_population);
    EXPECT_EQ(a.final_population, c.final_population);
}

TEST(Run, StaticDoublePeakIsFoundQuickly)
{
    // Dynamic-peak settings (N_p 256, s 10, w_N) on a static landscape; ten seeds.
    std::vector<double> first, tenth;
    int solved = 0;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        const auto h = run_evolution(row1_static(100 + seed), tasks::Task::double_peak({}),
                                     conditioning::ConditionScheme::none(), 10);
        bool hit = false;
        for (const auto& r : h.records)
            hit = hit || (r.generation > 0 && r.f_max >= 0.9);
        solved += hit;
        first.push_back(h.records[1].f_max);
        tenth.push_back(h.records[10].f_max);
    }
    EXPECT_GE(solved, 8);
    std::sort(first.begin(), first.end());
    std::sort(tenth.begin(), tenth.end());
    EXPECT_GT(0.5 * (tenth[4] + tenth[5]), 0.5 * (first[4] + first[5]));
}
