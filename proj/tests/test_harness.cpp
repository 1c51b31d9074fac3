#include <filesystem>
#include <fstream>
#include <sstream>

#include <gtest/gtest.h>

#include <hades/harness.hpp>

using namespace hades;
using namespace hades::harness;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name)
{
    const fs::path p = fs::temp_directory_path() / ("hades_test_" + name);
    fs::remove_all(p);
    return p;
}

std::string slurp(const fs::path& p)
{
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
}

json tiny_config(const std::string& name)
{
    json j = json::parse(R"({
        "name": "tiny",
        "task": {"kind": "double_peak", "sigma": 0.1, "omega": 0.0, "phi": 0.0},
        "solver": {"kind": "hades", "N_p": 16, "N_L": 1, "N_H": 8, "N_E": 2},
        "generations": 0,
        "replicates": 1,
        "seed": 11
    })");
    j["name"] = name;
    return j;
}

evolution::RunRecord record(std::size_t g, double fmax, double peaks)
{
    evolution::RunRecord r;
    r.generation = g;
    r.f_max = fmax;
    r.f_mean = fmax / 2;
    r.f_std = 0.0;
    r.entropy_bits = 1.0;
    r.peaks_cum = peaks;
    return r;
}

} // namespace

TEST(Harness, ZeroGenerationRunHasOneRow)
{
    auto cfg = parse_config(tiny_config("zero"));
    cfg.output = scratch("zero").string();
    const auto res = run_experiment(cfg);
    ASSERT_TRUE(res.all_ok()) << res.replicates[0].error;
    const auto rows = read_records((fs::path(cfg.output) / "replicate_000.csv").string());
    ASSERT_EQ(rows.size(), 1u);
    EXPECT_EQ(rows[0].generation, 0u);
    const auto s = aggregate(cfg.output);
    ASSERT_EQ(s.columns.size(), 1u);
    EXPECT_EQ(s.columns[0][0].std, 0.0);
    EXPECT_EQ(s.columns[0][0].mean, rows[0].f_max);
    EXPECT_TRUE(fs::exists(fs::path(cfg.output) / "summary.csv"));
    EXPECT_FALSE(fs::exists(fs::path(cfg.output) / "model_000.json")); // nothing trained yet
    fs::remove_all(cfg.output);
}

TEST(Harness, SummaryStatisticsByHand)
{
    auto cfg = parse_config(tiny_config("hand"));
    const std::vector<std::vector<evolution::RunRecord>> runs{{record(0, 1.0, 0), record(1, 2.0, 1)},
                                                              {record(0, 3.0, 0), record(1, 2.0, 2)}};
    const auto s = summarize(cfg, {0, 1}, runs);
    ASSERT_EQ(s.columns.size(), 2u);
    EXPECT_DOUBLE_EQ(s.columns[0][0].mean, 2.0);
    EXPECT_DOUBLE_EQ(s.columns[0][0].std, 1.0); // population std of {1, 3}
    EXPECT_DOUBLE_EQ(s.columns[1][0].std, 0.0);
    EXPECT_DOUBLE_EQ(s.columns[1][4].mean, 1.5);
    EXPECT_EQ(s.peak_count, 2u);
    EXPECT_DOUBLE_EQ(s.all_peaks_fraction, 0.5);
    EXPECT_TRUE(std::isnan(s.columns[0][6].mean)); // never recorded
    // threshold 0.9 is already met at generation 0 by both
    EXPECT_EQ(s.time_to_solve[0], 0u);
    ASSERT_TRUE(s.median_time_to_solve.has_value());
    EXPECT_DOUBLE_EQ(*s.median_time_to_solve, 0.0);
}

TEST(Harness, MedianTimeTreatsUnsolvedAsNever)
{
    EXPECT_EQ(median_time({3, std::nullopt, 5}), 5.0);
    EXPECT_FALSE(median_time({3, std::nullopt, std::nullopt}).has_value());
    EXPECT_EQ(median_time({2, 4, 6, std::nullopt}), 5.0);
}

TEST(Harness, UnknownKeyReportsItsPath)
{
    json j = tiny_config("bad");
    j["solver"]["N_q"] = 3;
    try {
        parse_config(j);
        FAIL() << "accepted an unknown key";
    }
    catch (const ConfigError& e) {
        EXPECT_EQ(e.path(), "solver.N_q");
    }
    j = tiny_config("bad");
    j["solver"]["N_p"] = -4;
    EXPECT_THROW(parse_config(j), ConfigError);
    j = tiny_config("bad");
    j["solver"]["kind"] = "charles";
    EXPECT_THROW(parse_config(j), ConfigError);
}

TEST(Harness, ShortScheduleIsRejected)
{
    json j = tiny_config("sched");
    j["solver"]["kind"] = "charles";
    j["generations"] = 10;
    j["condition"] = json::parse(R"({"kind": "quadrant",
        "schedule": {"segments": [{"first": 1, "last": 5, "target": [1]}]}})");
    try {
        parse_config(j);
        FAIL() << "accepted a schedule that ends early";
    }
    catch (const ConfigError& e) {
        EXPECT_EQ(e.path(), "condition.schedule");
    }
}

TEST(Harness, MixedRunDirectoryIsRejected)
{
    auto cfg = parse_config(tiny_config("mixed"));
    cfg.replicates = 2;
    cfg.output = scratch("mixed").string();
    ASSERT_TRUE(run_experiment(cfg).all_ok());
    const fs::path meta = fs::path(cfg.output) / "replicate_001.json";
    json m = json::parse(slurp(meta));
    m["config_hash"] = "0000000000000000";
    write_text(meta, m.dump());
    EXPECT_THROW(aggregate(cfg.output), UsageError);
    fs::remove_all(cfg.output);
}

TEST(Harness, RecipesParseAndRoundTrip)
{
    const auto recipes = list_recipes(default_recipe_dir());
    ASSERT_GE(recipes.size(), 20u);
    for (const auto& r : recipes) {
        SCOPED_TRACE(r.name);
        const auto cfg = load_config(r.path.string());
        EXPECT_EQ(cfg.name, r.name);
        const json echo = to_json(cfg);
        const auto again = parse_config(echo);
        EXPECT_EQ(to_json(again), echo);
        EXPECT_EQ(config_hash(again), config_hash(cfg));
    }
}

TEST(Harness, ConfigHashIgnoresExecutionFields)
{
    auto a = parse_config(tiny_config("hash"));
    auto b = a;
    b.replicates = 7;
    b.threads = 4;
    b.jobs = 2;
    b.output = "elsewhere";
    EXPECT_EQ(config_hash(a), config_hash(b));
    b.seed += 1;
    EXPECT_NE(config_hash(a), config_hash(b));
    EXPECT_EQ(config_hash(a).size(), 16u);
}

TEST(Harness, CsvFormat)
{
    auto r = record(3, 0.1, 2);
    r.entropy_bits = std::numeric_limits<double>::quiet_NaN();
    r.condition_target = 1.0;
    r.condition_mean = 1.0 / 3.0;
    std::ostringstream out;
    write_records(out, {r});
    const std::string text = out.str();
    EXPECT_EQ(text.substr(0, text.find("\r\n")), kCsvHeader);
    EXPECT_NE(text.find("3,0.10000000000000001,0.050000000000000003,0,,2,1,0.33333333333333331\r\n"), std::string::npos);

    const fs::path p = scratch("csv.csv");
    write_text(p, text);
    const auto back = read_records(p.string());
    ASSERT_EQ(back.size(), 1u);
    EXPECT_EQ(back[0].f_max, r.f_max);
    EXPECT_EQ(back[0].condition_mean, r.condition_mean);
    EXPECT_TRUE(std::isnan(back[0].entropy_bits));
    fs::remove(p);

    EXPECT_EQ(csv_split(R"(a,"b,c","d""e")"), (std::vector<std::string>{"a", "b,c", "d\"e"}));
    EXPECT_EQ(csv_escape("x,y"), "\"x,y\"");
}

TEST(Harness, ParseVector)
{
    EXPECT_EQ(parse_vector("0.5, 0, 500"), Eigen::Vector3d(0.5, 0, 500));
    EXPECT_EQ(parse_vector("[1 -2]"), Eigen::Vector2d(1, -2));
    EXPECT_THROW(parse_vector("1, x"), UsageError);
}

TEST(Snapshot, RoundTripPredictsIdentically)
{
    diffusion::DenoiserSpec spec;
    spec.dim = 3;
    spec.cond_dim = 2;
    spec.hidden_layers = 2;
    spec.hidden_units = 16;
    Rng rng = make_rng(12, {});
    auto net = diffusion::Denoiser::create(spec, rng);
    net.set_standardization(Eigen::Vector2d(0.5, -1.0), Eigen::Vector2d(2.0, 0.25));
    snapshot::ModelSnapshot snap{net, diffusion::ScheduleKind::cosine, 100, {}};
    const fs::path p = scratch("snap.json");
    snapshot::save(snap, p.string());
    const auto back = snapshot::load(p.string());
    fs::remove(p);
    EXPECT_EQ(back.steps, 100u);
    EXPECT_EQ(back.model.net().values(), net.net().values());
    const Eigen::MatrixXd x = normal_matrix(3, 5, rng);
    const Eigen::MatrixXd c = normal_matrix(2, 5, rng);
    EXPECT_EQ(back.model.predict(x, 40, 100, &c), net.predict(x, 40, 100, &c));
    EXPECT_EQ(sample_snapshot(back, Eigen::Vector2d(1, 0), 4, 9), sample_snapshot(snap, Eigen::Vector2d(1, 0), 4, 9));
    EXPECT_THROW(sample_snapshot(back, std::nullopt, 4, 9), UsageError);
}
