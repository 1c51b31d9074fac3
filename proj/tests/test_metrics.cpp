#include <cmath>

#include <gtest/gtest.h>

#include <hades/metrics.hpp>

using namespace hades;
using namespace hades::metrics;

namespace {

// Points placed in the centres of chosen 101 x 101 grid cells on [-6, 6].
Eigen::MatrixXd in_cells(const std::vector<std::pair<int, int>>& cells)
{
    const double w = 12.0 / 101.0;
    Eigen::MatrixXd g(2, Eigen::Index(cells.size()));
    for (std::size_t j = 0; j < cells.size(); ++j) {
        g(0, Eigen::Index(j)) = -6.0 + (cells[j].first + 0.5) * w;
        g(1, Eigen::Index(j)) = -6.0 + (cells[j].second + 0.5) * w;
    }
    return g;
}

} // namespace

TEST(GridEntropy, HandValues)
{
    EXPECT_EQ(grid_entropy(in_cells({{3, 4}, {3, 4}, {3, 4}})), 0.0);
    EXPECT_NEAR(grid_entropy(in_cells({{0, 0}, {1, 0}, {0, 1}, {100, 100}})), 2.0, 1e-15);
    EXPECT_NEAR(grid_entropy(in_cells({{5, 5}, {5, 5}, {6, 5}, {6, 5}, {7, 7}, {7, 7}, {7, 7}, {7, 7}})), 1.5, 1e-15);
}

TEST(GridEntropy, OutOfRangeClampsToBorder)
{
    const Eigen::MatrixXd g = (Eigen::MatrixXd(2, 3) << -100.0, -6.0, -7.0, 50.0, 6.0 - 1e-9, 1e9).finished();
    // all three land in cell (0, 100)
    EXPECT_EQ(grid_entropy(g), 0.0);
}

TEST(GridEntropy, BoundedByUniformGrid)
{
    Rng rng = make_rng(1, {});
    const Eigen::MatrixXd g = normal_matrix(2, 20000, rng, 4.0);
    const double h = grid_entropy(g);
    EXPECT_GT(h, 0.0);
    EXPECT_LE(h, std::log2(101.0 * 101.0));
    EXPECT_THROW(grid_entropy(Eigen::MatrixXd(3, 2)), UsageError);
    EXPECT_THROW(grid_entropy(Eigen::MatrixXd(2, 0)), UsageError);
}

TEST(Peaks, TenSamplesFindAPeak)
{
    const std::vector<Eigen::VectorXd> centers{Eigen::Vector2d(1, 1), Eigen::Vector2d(-1, -1)};
    const Eigen::MatrixXd ten = Eigen::Vector2d(1, 1).replicate(1, 10);
    EXPECT_EQ(peaks_found({ten}, centers), std::vector<std::size_t>{1});
    Eigen::MatrixXd nine = Eigen::MatrixXd::Constant(2, 12, 5.0);
    for (int j = 0; j < 9; ++j)
        nine.col(j) = Eigen::Vector2d(-1.0 + 0.1, -1.0 - 0.1);
    EXPECT_EQ(peaks_found({nine}, centers), std::vector<std::size_t>{0});
}

TEST(Peaks, CumulativeAcrossGenerations)
{
    const std::vector<Eigen::VectorXd> centers{Eigen::Vector2d(1, 1), Eigen::Vector2d(-1, -1)};
    const Eigen::MatrixXd nothing = Eigen::MatrixXd::Zero(2, 20);
    const Eigen::MatrixXd a = Eigen::Vector2d(1, 1).replicate(1, 10);
    const Eigen::MatrixXd b = Eigen::Vector2d(-1, -1.2).replicate(1, 10);
    EXPECT_EQ(peaks_found({nothing, a, nothing, b, nothing}, centers), (std::vector<std::size_t>{0, 1, 1, 2, 2}));
}

TEST(Peaks, SamplesDoNotAccumulateAcrossGenerations)
{
    const std::vector<Eigen::VectorXd> centers{Eigen::Vector2d(1, 1)};
    const Eigen::MatrixXd five = Eigen::Vector2d(1, 1).replicate(1, 5);
    EXPECT_EQ(peaks_found({five, five, five}, centers), (std::vector<std::size_t>{0, 0, 0}));
}

TEST(Peaks, OrderInvariant)
{
    Rng rng = make_rng(2, {});
    Eigen::MatrixXd g = normal_matrix(2, 400, rng, 0.3);
    g.leftCols(200).colwise() += Eigen::Vector2d(1, 1);
    const std::vector<Eigen::VectorXd> centers{Eigen::Vector2d(1, 1), Eigen::Vector2d(0, 0)};
    const Eigen::MatrixXd rev = g.rowwise().reverse();
    EXPECT_EQ(peaks_found({g}, centers), peaks_found({rev}, centers));
}

TEST(FitnessStats, HandValues)
{
    const std::vector<double> one{3.0};
    const auto s1 = fitness_stats(one);
    EXPECT_EQ(s1.max, 3.0);
    EXPECT_EQ(s1.mean, 3.0);
    EXPECT_EQ(s1.std, 0.0);
    const std::vector<double> two{0.0, 10.0};
    const auto s2 = fitness_stats(two);
    EXPECT_EQ(s2.mean, 5.0);
    EXPECT_EQ(s2.std, 5.0);
    EXPECT_EQ(s2.argmax, 1u);
    const std::vector<double> ties{1.0, 4.0, 4.0};
    EXPECT_EQ(fitness_stats(ties).argmax, 1u);
    EXPECT_THROW(fitness_stats({}), UsageError);
}

TEST(TraitPredictor, LearnsLinearTrait)
{
    Rng rng = make_rng(3, {});
    const Eigen::MatrixXd g = normal_matrix(3, 512, rng);
    const Eigen::MatrixXd trait = g.topRows(1);
    TraitPredictorOptions opts;
    opts.hidden_layers = 1;
    opts.hidden_units = 16;
    opts.epochs = 200;
    opts.batch_size = 64;
    opts.lr = 1e-2;
    const auto pred = train_trait_predictor(g, trait, Eigen::VectorXd::Ones(512), opts, rng);
    const Eigen::MatrixXd held = normal_matrix(3, 256, rng);
    const std::vector<double> f(256, 1.0);
    const auto rep = trait_report(pred, held, held.topRows(1), f, 2.0);
    EXPECT_LT(rep.mse_all, 1e-3);
    EXPECT_EQ(rep.n_all, 256u);
    EXPECT_EQ(rep.n_high, 0u);
    EXPECT_TRUE(std::isnan(rep.mse_high));
}

TEST(TraitPredictor, ConstantTrait)
{
    Rng rng = make_rng(4, {});
    const Eigen::MatrixXd g = normal_matrix(2, 128, rng);
    TraitPredictorOptions opts;
    opts.hidden_layers = 1;
    opts.hidden_units = 8;
    opts.epochs = 300;
    opts.batch_size = 128;
    opts.lr = 1e-2;
    const auto pred = train_trait_predictor(g, Eigen::MatrixXd::Constant(1, 128, 0.7), Eigen::VectorXd::Ones(128),
                                            opts, rng);
    const Eigen::MatrixXd out = pred.predict(normal_matrix(2, 50, rng));
    EXPECT_LT((out.array() - 0.7).abs().maxCoeff(), 0.05);
}

TEST(TraitPredictor, RejectsEmptyData)
{
    Rng rng = make_rng(5, {});
    EXPECT_THROW(train_trait_predictor(Eigen::MatrixXd(2, 0), Eigen::MatrixXd(1, 0), Eigen::VectorXd(0), {}, rng),
                 UsageError);
}

TEST(TraitPredictor, ReportStratifiesByFitness)
{
    TraitPredictor zero{nn::NetParams(nn::NetSpec{1, 0, 0, 1}), {}};
    const Eigen::MatrixXd g = Eigen::MatrixXd::Zero(1, 4);
    const Eigen::MatrixXd t = (Eigen::MatrixXd(1, 4) << 1.0, 2.0, 0.0, 0.5).finished();
    const std::vector<double> f{10.0, 10.0, 500.0, 500.0};
    const auto r = trait_report(zero, g, t, f, 500.0);
    EXPECT_DOUBLE_EQ(r.mse_all, (1.0 + 4.0 + 0.0 + 0.25) / 4.0);
    EXPECT_DOUBLE_EQ(r.mse_high, 0.125);
    EXPECT_EQ(r.n_high, 2u);
}
