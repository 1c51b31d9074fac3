// hades: run experiment recipes, aggregate run directories, sample saved models.
//
// Exit codes: 0 ok, 1 configuration or usage error, 2 runtime error.

#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include <hades/harness.hpp>

namespace {

constexpr int kOk = 0;
constexpr int kConfigError = 1;
constexpr int kRuntimeError = 2;

struct RunArgs {
    std::string config;
    std::optional<std::size_t> replicates;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> out;
    std::optional<std::size_t> threads;
    std::optional<std::size_t> jobs;
    std::optional<std::size_t> generations;
    bool aggregate = true;
    bool quiet = false;
};

int cmd_run(const RunArgs& a)
{
    using namespace hades::harness;
    const auto path = resolve_config(a.config, default_recipe_dir());
    json j = read_json_file(path.string());
    if (j.is_object()) {
        if (a.replicates)
            j["replicates"] = *a.replicates;
        if (a.seed)
            j["seed"] = *a.seed;
        if (a.out)
            j["output"] = *a.out;
        if (a.threads)
            j["threads"] = *a.threads;
        if (a.jobs)
            j["jobs"] = *a.jobs;
        if (a.generations)
            j["generations"] = *a.generations;
    }
    const ExperimentConfig cfg = parse_config(j);
    const auto result = run_experiment(cfg, a.quiet ? nullptr : &std::cerr);
    std::size_t failed = 0;
    for (const auto& r : result.replicates)
        failed += !r.ok;
    if (a.aggregate && failed < result.replicates.size()) {
        const auto s = aggregate(result.directory);
        if (!a.quiet && !s.columns.empty())
            std::cerr << "final f_max " << s.columns.back()[0].mean << " +- " << s.columns.back()[0].std << " over "
                      << s.replicates.size() << " replicate(s)\n";
    }
    std::cout << result.directory.string() << '\n';
    if (failed) {
        std::cerr << failed << " of " << result.replicates.size() << " replicate(s) failed\n";
        return kRuntimeError;
    }
    return kOk;
}

int cmd_aggregate(const std::string& dir)
{
    const auto s = hades::harness::aggregate(dir);
    std::cout << (std::filesystem::path(dir) / "summary.csv").string() << '\n'
              << (std::filesystem::path(dir) / "summary.json").string() << '\n';
    if (!s.failed.empty())
        std::cerr << s.failed.size() << " failed replicate(s) skipped\n";
    return kOk;
}

int cmd_sample(const std::string& model, const std::optional<std::string>& condition, std::size_t n,
               std::uint64_t seed, const std::optional<std::string>& out)
{
    using namespace hades::harness;
    const auto snap = hades::snapshot::load(model);
    std::optional<Eigen::VectorXd> c;
    if (condition)
        c = parse_vector(*condition);
    const auto genomes = sample_snapshot(snap, c, n, seed);
    if (out) {
        std::ofstream f(*out, std::ios::binary);
        if (!f)
            throw std::runtime_error("cannot write " + *out);
        write_genomes(f, genomes);
    }
    else
        write_genomes(std::cout, genomes);
    return kOk;
}

int cmd_list(const std::optional<std::string>& dir)
{
    using namespace hades::harness;
    const auto recipes = list_recipes(dir ? std::filesystem::path(*dir) : default_recipe_dir());
    for (const auto& r : recipes)
        std::cout << r.name << "\t" << r.description << '\n';
    return kOk;
}

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"Diffusion-model evolutionary strategies: experiment runner"};
    app.require_subcommand(1);

    RunArgs run;
    auto* run_cmd = app.add_subcommand("run", "Run every replicate of an experiment config or recipe");
    run_cmd->add_option("config", run.config, "Config file or recipe name")->required();
    run_cmd->add_option("--replicates", run.replicates, "Override the replicate count");
    run_cmd->add_option("--seed", run.seed, "Override the base seed");
    run_cmd->add_option("--out", run.out, "Override the output directory");
    run_cmd->add_option("--threads", run.threads, "Evaluation workers per replicate (0 = all cores)");
    run_cmd->add_option("--jobs", run.jobs, "Replicates run concurrently");
    run_cmd->add_option("--generations", run.generations, "Override N_tau");
    run_cmd->add_flag("!--no-aggregate", run.aggregate, "Skip writing summary files");
    run_cmd->add_flag("-q,--quiet", run.quiet, "No progress output");

    std::string agg_dir;
    auto* agg_cmd = app.add_subcommand("aggregate", "Summarize the replicates in a run directory");
    agg_cmd->add_option("dir", agg_dir, "Run directory")->required();

    std::string model;
    std::optional<std::string> condition, sample_out;
    std::size_t n = 256;
    std::uint64_t sample_seed = 0;
    auto* sample_cmd = app.add_subcommand("sample", "Draw genomes from a saved denoiser");
    sample_cmd->add_option("model", model, "Model snapshot (JSON)")->required();
    sample_cmd->add_option("--condition", condition, "Condition vector, e.g. \"0.5,0,500\"");
    sample_cmd->add_option("-n", n, "Number of samples")->check(CLI::PositiveNumber);
    sample_cmd->add_option("--seed", sample_seed, "Sampling seed");
    sample_cmd->add_option("-o,--out", sample_out, "Write CSV here instead of stdout");

    std::optional<std::string> recipe_dir;
    auto* list_cmd = app.add_subcommand("list-recipes", "List shipped experiment recipes");
    list_cmd->add_option("--dir", recipe_dir, "Recipe directory");

    try {
        app.parse(argc, argv);
    }
    catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kOk : kConfigError;
    }

    try {
        if (*run_cmd)
            return cmd_run(run);
        if (*agg_cmd)
            return cmd_aggregate(agg_dir);
        if (*sample_cmd)
            return cmd_sample(model, condition, n, sample_seed, sample_out);
        return cmd_list(recipe_dir);
    }
    catch (const hades::ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return kConfigError;
    }
    catch (const hades::UsageError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kConfigError;
    }
    catch (const std::exception& e) {
        std::cerr << "runtime error: " << e.what() << '\n';
        return kRuntimeError;
    }
}
