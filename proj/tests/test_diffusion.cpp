#include <cmath>

#include <gtest/gtest.h>

#include <hades/diffusion.hpp>

using namespace hades;
using namespace hades::diffusion;

namespace {

Denoiser random_denoiser(std::size_t dim, std::size_t cond_dim, std::uint64_t seed)
{
    DenoiserSpec spec;
    spec.dim = dim;
    spec.cond_dim = cond_dim;
    spec.hidden_units = 16;
    Rng rng = make_rng(seed, {});
    return Denoiser::create(spec, rng);
}

Denoiser zero_denoiser(std::size_t dim)
{
    DenoiserSpec spec;
    spec.dim = dim;
    spec.hidden_units = 8;
    return Denoiser(spec, nn::NetParams(spec.net_spec()));
}

Denoiser trained_on(const Eigen::MatrixXd& genomes, const Eigen::VectorXd& weights, std::uint64_t seed)
{
    DenoiserSpec spec;
    spec.dim = std::size_t(genomes.rows());
    spec.hidden_units = 32;
    Rng rng = make_rng(seed, {});
    Denoiser net = Denoiser::create(spec, rng);
    TrainingSet data{genomes, weights, Eigen::MatrixXd(0, genomes.cols())};
    dm_train(net, data, schedule_cosine(100), {}, {400, 64, 1e-2, 0.0}, rng);
    return net;
}

} // namespace

TEST(Schedule, CosineEndpointsAndMidpoint)
{
    const auto s = schedule_cosine(100);
    ASSERT_EQ(s.steps(), 100u);
    EXPECT_EQ(s[0], 1.0);
    EXPECT_EQ(s[100], 0.0);
    EXPECT_NEAR(s[50], 0.5, 1e-15);
}

TEST(Schedule, StrictlyDecreasing)
{
    for (std::size_t T : {2u, 3u, 10u, 100u, 1000u})
        for (auto kind : {ScheduleKind::cosine, ScheduleKind::linear}) {
            const auto s = make_schedule(kind, T);
            EXPECT_EQ(s[0], 1.0);
            EXPECT_NEAR(s[T], 0.0, 1e-12);
            for (std::size_t t = 1; t <= T; ++t)
                EXPECT_LT(s[t], s[t - 1]);
        }
    EXPECT_THROW(schedule_cosine(1), UsageError);
}

TEST(Schedule, StepsFromRatio)
{
    EXPECT_EQ(steps_from_ratio(0.05, 100), 5u);
    EXPECT_EQ(steps_from_ratio(0.0, 100), 0u);
    EXPECT_EQ(steps_from_ratio(1.0, 100), 100u);
    EXPECT_THROW(steps_from_ratio(1.5, 100), UsageError);
}

TEST(ForwardDiffuse, Endpoints)
{
    const auto s = schedule_cosine(100);
    const Eigen::Vector3d x0(0.5, -2.0, 3.0);
    Rng rng = make_rng(1, {});
    const auto at0 = forward_diffuse(x0, 0, s, rng);
    EXPECT_EQ(at0.x_t, Eigen::VectorXd(x0));
    const auto atT = forward_diffuse(x0, 100, s, rng);
    EXPECT_EQ(atT.x_t, atT.noise);
    const auto mid = forward_diffuse(x0, 50, s, rng);
    EXPECT_TRUE(mid.x_t.isApprox((x0 + mid.noise) / std::sqrt(2.0), 1e-12));
    EXPECT_THROW(forward_diffuse(x0, 101, s, rng), UsageError);
}

TEST(ForwardDiffuse, MarginalMoments)
{
    const auto s = schedule_cosine(100);
    const Eigen::Vector2d x0(2.0, -1.0);
    Rng rng = make_rng(2, {});
    for (std::size_t t : {30u, 70u, 100u}) {
        const int n = 10000;
        Eigen::MatrixXd xs(2, n);
        for (int i = 0; i < n; ++i)
            xs.col(i) = forward_diffuse(x0, t, s, rng).x_t;
        const Eigen::Vector2d mean = xs.rowwise().mean();
        const Eigen::Vector2d var = (xs.colwise() - mean).rowwise().squaredNorm() / double(n);
        if (t == 100) {
            EXPECT_LT(mean.cwiseAbs().maxCoeff(), 0.05);
            EXPECT_GT(var.minCoeff(), 0.9);
            EXPECT_LT(var.maxCoeff(), 1.1);
            continue;
        }
        const Eigen::Vector2d want_mean = std::sqrt(s[t]) * x0;
        for (int k = 0; k < 2; ++k) {
            EXPECT_NEAR(mean[k], want_mean[k], 0.05 * std::abs(want_mean[k])) << "t=" << t;
            EXPECT_NEAR(var[k], 1.0 - s[t], 0.05 * (1.0 - s[t])) << "t=" << t;
        }
    }
}

TEST(Denoiser, InputLayoutAndMask)
{
    DenoiserSpec spec;
    spec.dim = 3;
    spec.cond_dim = 2;
    EXPECT_EQ(spec.net_spec().input_dim, 3u + 1 + 2 + 2);
    spec.time_encoding = TimeEncoding::sinusoidal;
    EXPECT_EQ(spec.net_spec().input_dim, 3u + 8 + 2 + 2);
    EXPECT_EQ(spec.net_spec().output_dim, 3u);

    auto net = random_denoiser(2, 2, 4);
    net.set_standardization(Eigen::Vector2d(1.0, 0.0), Eigen::Vector2d(2.0, 1.0));
    Eigen::Vector4d enc;
    net.encode_condition(Eigen::Vector2d(5.0, std::nan("")), enc);
    EXPECT_EQ(enc, Eigen::Vector4d(2.0, 0.0, 1.0, 0.0));
}

TEST(Denoiser, RejectsBadConditions)
{
    const auto net = random_denoiser(2, 1, 5);
    const Eigen::MatrixXd x = Eigen::MatrixXd::Zero(2, 3);
    const Eigen::MatrixXd c2 = Eigen::MatrixXd::Zero(2, 1);
    const Eigen::MatrixXd c_cols = Eigen::MatrixXd::Zero(1, 2);
    EXPECT_THROW(net.predict(x, 5, 100, &c2), UsageError);
    EXPECT_THROW(net.predict(x, 5, 100, &c_cols), UsageError);
}

TEST(Guidance, ZeroWeightIsSingleConditionalPass)
{
    const auto net = random_denoiser(2, 1, 6);
    Rng rng = make_rng(6, {});
    const Eigen::MatrixXd x = normal_matrix(2, 4, rng);
    const Eigen::MatrixXd c = Eigen::MatrixXd::Constant(1, 1, 0.7);
    EXPECT_EQ(cfg_epsilon(net, x, 10, 100, &c, {0.0, 0.1}), net.predict(x, 10, 100, &c));
    EXPECT_EQ(cfg_epsilon(net, x, 10, 100, nullptr, {3.0, 0.1}), net.predict(x, 10, 100, nullptr));
}

TEST(Guidance, TwoPassCombination)
{
    const auto net = random_denoiser(2, 1, 7);
    Rng rng = make_rng(7, {});
    const Eigen::MatrixXd x = normal_matrix(2, 4, rng);
    const Eigen::MatrixXd c = Eigen::MatrixXd::Constant(1, 1, -1.0);
    const Eigen::MatrixXd null_token = Eigen::MatrixXd::Constant(1, 1, std::nan(""));
    const Eigen::MatrixXd eps_c = net.predict(x, 30, 100, &c);
    const Eigen::MatrixXd eps_0 = net.predict(x, 30, 100, &null_token);
    EXPECT_TRUE(eps_0.isApprox(net.predict(x, 30, 100, nullptr), 1e-15));
    EXPECT_TRUE(cfg_epsilon(net, x, 30, 100, &c, {1.0, 0.1}).isApprox(2 * eps_c - eps_0, 1e-12));
}

TEST(Sampler, SigmaRule)
{
    const auto s = schedule_cosine(100);
    EXPECT_EQ(sigma_paper(s, 1), 0.0);
    const double a = s[40], ap = s[39];
    EXPECT_NEAR(sigma_paper(s, 40), std::sqrt((1 - ap) / (1 - a) * (1 - a / ap)), 1e-15);
}

TEST(Sampler, ZeroDenoiserStepwise)
{
    const auto s = schedule_cosine(100);
    const auto net = zero_denoiser(2);
    SamplerConfig sc;
    sc.sigma_rule = SigmaRule::deterministic;
    Rng rng = make_rng(8, {});
    const Eigen::MatrixXd init = normal_matrix(2, 5, rng);
    for (std::size_t start : {100u, 40u, 1u}) {
        sc.start_step = start;
        Eigen::MatrixXd want = init;
        for (std::size_t t = start; t >= 1; --t)
            want *= std::sqrt(s[t - 1] / std::max(s[t], sc.alpha_floor));
        const auto got = ddim_sample(net, s, sc, 5, nullptr, &init, rng);
        EXPECT_TRUE(got.isApprox(want, 1e-10)) << "start " << start;
    }
}

TEST(Sampler, StartStepZeroIsIdentity)
{
    const auto s = schedule_cosine(100);
    const auto net = random_denoiser(3, 0, 9);
    Rng rng = make_rng(9, {});
    const Eigen::MatrixXd init = normal_matrix(3, 6, rng);
    SamplerConfig sc;
    sc.start_step = 0;
    EXPECT_EQ(ddim_sample(net, s, sc, 6, nullptr, &init, rng), init);
    EXPECT_EQ(partial_denoise(net, s, init, 0, nullptr, {}, rng), init);
    sc.start_step = 101;
    EXPECT_THROW(ddim_sample(net, s, sc, 6, nullptr, &init, rng), UsageError);
    EXPECT_THROW(partial_denoise(net, s, init, 101, nullptr, {}, rng), UsageError);
}

TEST(Sampler, PartialDenoiseIsDdimFromInit)
{
    const auto s = schedule_cosine(100);
    const auto net = random_denoiser(2, 0, 10);
    Rng r0 = make_rng(10, {});
    const Eigen::MatrixXd init = normal_matrix(2, 7, r0);
    Rng a = make_rng(11, {}), b = make_rng(11, {});
    SamplerConfig sc;
    sc.start_step = 25;
    EXPECT_EQ(partial_denoise(net, s, init, 25, nullptr, {}, a), ddim_sample(net, s, sc, 7, nullptr, &init, b));
}

TEST(Sampler, InitStdScalesStartingNoise)
{
    // With a zero net and start T the output is x_T scaled by a fixed factor,
    // so its spread is proportional to init_std.
    const auto s = schedule_cosine(100);
    const auto net = zero_denoiser(1);
    SamplerConfig sc;
    sc.sigma_rule = SigmaRule::deterministic;
    sc.init_std = 1.0;
    Rng a = make_rng(12, {}), b = make_rng(12, {});
    const auto x1 = ddim_sample(net, s, sc, 10, nullptr, nullptr, a);
    sc.init_std = 2.0;
    const auto x2 = ddim_sample(net, s, sc, 10, nullptr, nullptr, b);
    EXPECT_TRUE(x2.isApprox(2.0 * x1, 1e-12));
}

TEST(DmTrain, AllZeroWeightsAreDegenerate)
{
    auto net = random_denoiser(2, 0, 13);
    Rng rng = make_rng(13, {});
    TrainingSet data{Eigen::MatrixXd::Ones(2, 4), Eigen::VectorXd::Zero(4), Eigen::MatrixXd(0, 4)};
    EXPECT_THROW(dm_train(net, data, schedule_cosine(100), {}, {}, rng), DegenerateError);
    data.weights[1] = -1.0;
    EXPECT_THROW(dm_train(net, data, schedule_cosine(100), {}, {}, rng), UsageError);
}

TEST(DmTrain, RecoversSinglePoint)
{
    const Eigen::Vector2d p(1.5, -0.5);
    const Eigen::MatrixXd genomes = p.replicate(1, 64);
    const auto net = trained_on(genomes, Eigen::VectorXd::Ones(64), 14);
    Rng rng = make_rng(14, {1});
    const auto xs = ddim_sample(net, schedule_cosine(100), {}, 256, nullptr, nullptr, rng);
    const Eigen::Vector2d mean = xs.rowwise().mean();
    EXPECT_LT((mean - p).norm(), 0.1 * p.norm() + 0.1);
}

TEST(DmTrain, ZeroWeightedPointsAreIgnored)
{
    Rng rng = make_rng(15, {});
    Eigen::MatrixXd genomes = normal_matrix(2, 64, rng, 3.0);
    const Eigen::Vector2d q(-1.0, 2.0);
    Eigen::VectorXd w = Eigen::VectorXd::Zero(64);
    for (int i = 0; i < 64; i += 8) {
        genomes.col(i) = q;
        w[i] = 1.0;
    }
    const auto net = trained_on(genomes, w, 15);
    const auto xs = ddim_sample(net, schedule_cosine(100), {}, 256, nullptr, nullptr, rng);
    const Eigen::Vector2d mean = xs.rowwise().mean();
    EXPECT_LT((mean - q).norm(), 0.1 * q.norm() + 0.1);
}

TEST(DmTrain, PartialDenoisePullsTowardData)
{
    const Eigen::Vector2d p(1.0, 1.0);
    const auto net = trained_on(p.replicate(1, 64), Eigen::VectorXd::Ones(64), 16);
    Rng rng = make_rng(16, {});
    const Eigen::MatrixXd noisy = p.replicate(1, 128) + normal_matrix(2, 128, rng, 0.5);
    const auto moved = partial_denoise(net, schedule_cosine(100), noisy, 20, nullptr, {}, rng);
    const double before = (noisy.colwise() - p).colwise().norm().mean();
    const double after = (moved.colwise() - p).colwise().norm().mean();
    EXPECT_LT(after, before);
}

TEST(DmTrain, SameSeedIsBitIdentical)
{
    Rng rng = make_rng(17, {});
    const Eigen::MatrixXd g = normal_matrix(2, 32, rng);
    DenoiserSpec spec;
    spec.dim = 2;
    spec.cond_dim = 1;
    spec.hidden_units = 8;
    auto run = [&] {
        Rng r = make_rng(18, {});
        auto net = Denoiser::create(spec, r);
        TrainingSet data{g, Eigen::VectorXd::Ones(32), g.topRows(1)};
        const auto trace = dm_train(net, data, schedule_cosine(100), {}, {5, 8, 1e-3, 1e-5}, r);
        return std::make_pair(trace, net.net());
    };
    const auto a = run(), b = run();
    EXPECT_EQ(a.first, b.first);
    EXPECT_EQ(a.second, b.second);
}
