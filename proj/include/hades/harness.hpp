#pragma once

// Experiment configuration, seeded replication and run-directory output.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <initializer_list>
#include <iostream>
#include <limits>
#include <map>
#include <mutex>
#include <numbers>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "baselines.hpp"
#include "conditioning.hpp"
#include "error.hpp"
#include "evolution.hpp"
#include "parallel.hpp"
#include "snapshot.hpp"
#include "tasks.hpp"

namespace hades::harness {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Schema reader. Every lookup marks the key as known; `finish` rejects the rest.

class Fields {
public:
    Fields(const json& j, std::string path) : j_(j), path_(std::move(path))
    {
        if (!j_.is_object())
            throw ConfigError(path_.empty() ? "<root>" : path_, "expected an object");
    }

    std::string at(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }
    bool has(const std::string& key) const { return j_.contains(key); }

    const json& need(const std::string& key)
    {
        seen_.insert(key);
        if (!j_.contains(key))
            throw ConfigError(at(key), "required key is missing");
        return j_.at(key);
    }

    const json* maybe(const std::string& key)
    {
        seen_.insert(key);
        return j_.contains(key) ? &j_.at(key) : nullptr;
    }

    double number(const std::string& key, double def)
    {
        const json* v = maybe(key);
        if (!v)
            return def;
        if (!v->is_number())
            throw ConfigError(at(key), "expected a number");
        const double x = v->get<double>();
        if (!std::isfinite(x))
            throw ConfigError(at(key), "expected a finite number");
        return x;
    }

    std::size_t count(const std::string& key, std::size_t def)
    {
        const json* v = maybe(key);
        if (!v)
            return def;
        if (!v->is_number_unsigned() && !(v->is_number_integer() && v->get<std::int64_t>() >= 0))
            throw ConfigError(at(key), "expected a non-negative integer");
        return v->get<std::size_t>();
    }

    std::uint64_t seed(const std::string& key, std::uint64_t def)
    {
        return std::uint64_t(count(key, std::size_t(def)));
    }

    bool flag(const std::string& key, bool def)
    {
        const json* v = maybe(key);
        if (!v)
            return def;
        if (!v->is_boolean())
            throw ConfigError(at(key), "expected true or false");
        return v->get<bool>();
    }

    std::string text(const std::string& key, const std::string& def)
    {
        const json* v = maybe(key);
        if (!v)
            return def;
        if (!v->is_string())
            throw ConfigError(at(key), "expected a string");
        return v->get<std::string>();
    }

    std::string choice(const std::string& key, const std::string& def, std::initializer_list<const char*> allowed)
    {
        const std::string v = text(key, def);
        for (const char* a : allowed)
            if (v == a)
                return v;
        std::string msg = "expected one of";
        for (const char* a : allowed)
            msg += std::string(" '") + a + "'";
        throw ConfigError(at(key), msg + ", got '" + v + "'");
    }

    void finish() const
    {
        for (auto it = j_.begin(); it != j_.end(); ++it)
            if (!seen_.count(it.key()))
                throw ConfigError(at(it.key()), "unknown key");
    }

private:
    const json& j_;
    std::string path_;
    std::set<std::string> seen_;
};

inline Eigen::VectorXd number_vector(const json& v, const std::string& path)
{
    if (!v.is_array() || v.empty())
        throw ConfigError(path, "expected a non-empty array of numbers");
    Eigen::VectorXd out(Eigen::Index(v.size()));
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (!v[i].is_number())
            throw ConfigError(path + "[" + std::to_string(i) + "]", "expected a number");
        out[Eigen::Index(i)] = v[i].get<double>();
    }
    return out;
}

inline std::vector<double> as_list(const Eigen::VectorXd& v) { return {v.data(), v.data() + v.size()}; }

// ---------------------------------------------------------------------------
// Configuration types

enum class SolverKind { hades, charles, cmaes, simplega };

inline std::string_view to_string(SolverKind k)
{
    switch (k) {
    case SolverKind::hades: return "hades";
    case SolverKind::charles: return "charles";
    case SolverKind::cmaes: return "cmaes";
    case SolverKind::simplega: return "simplega";
    }
    return "?";
}

struct TaskConfig {
    std::string kind = "double_peak"; // double_peak | rastrigin | cartpole | sphere
    tasks::DoublePeakParams double_peak{};
    tasks::RastriginParams rastrigin{};
    tasks::CartPoleParams cartpole{};
    nn::NetSpec agent{4, 1, 8, 2, nn::Activation::relu, true};
    std::size_t sphere_dim = 2;
    std::optional<double> success_threshold; // task default when unset

    tasks::Task build() const
    {
        tasks::Task t = kind == "double_peak" ? tasks::Task::double_peak(double_peak)
                        : kind == "rastrigin" ? tasks::Task::rastrigin(rastrigin)
                        : kind == "cartpole"  ? tasks::Task::cartpole(cartpole, agent)
                                              : tasks::Task::sphere(sphere_dim);
        if (success_threshold)
            t.set_success_threshold(*success_threshold);
        return t;
    }
};

struct ExperimentConfig {
    std::string name = "experiment";
    std::string description;
    TaskConfig task{};
    SolverKind solver = SolverKind::hades;
    evolution::EvoConfig evo{};
    baselines::CmaConfig cma{};
    baselines::SimpleGaConfig ga{};
    conditioning::ConditionScheme condition{};
    std::size_t generations = 100; // N_tau
    std::size_t replicates = 1;
    std::uint64_t seed = 0;  // replicate r runs with seed + r
    std::size_t threads = 1; // evaluation workers per replicate (0 = hardware)
    std::size_t jobs = 1;    // replicates run concurrently
    std::string output;      // default runs/<name>
};

// ---------------------------------------------------------------------------
// Parsing

inline nn::Activation parse_activation(Fields& f, const std::string& key, nn::Activation def)
{
    return nn::activation_from_string(f.choice(key, std::string(nn::to_string(def)), {"relu", "leaky_relu", "elu"}));
}

inline TaskConfig parse_task(const json& j, const std::string& path)
{
    Fields f(j, path);
    TaskConfig t;
    t.kind = f.choice("kind", "", {"double_peak", "rastrigin", "cartpole", "sphere"});
    if (t.kind == "double_peak") {
        t.double_peak.sigma = f.number("sigma", t.double_peak.sigma);
        t.double_peak.omega = f.number("omega", t.double_peak.omega);
        t.double_peak.phi = f.number("phi", t.double_peak.phi);
        if (!(t.double_peak.sigma > 0.0))
            throw ConfigError(f.at("sigma"), "must be > 0");
    }
    else if (t.kind == "rastrigin") {
        t.rastrigin.A = f.number("A", t.rastrigin.A);
        t.rastrigin.bound = f.number("bound", t.rastrigin.bound);
        t.rastrigin.twist = f.number("twist", t.rastrigin.twist);
        if (!(t.rastrigin.bound > 0.5))
            throw ConfigError(f.at("bound"), "must be > 0.5");
    }
    else if (t.kind == "cartpole") {
        auto& c = t.cartpole;
        c.episodes = f.count("episodes", c.episodes);
        c.max_steps = f.count("max_steps", c.max_steps);
        c.resting_window = f.count("resting_window", c.resting_window);
        c.x_limit = f.number("x_limit", c.x_limit);
        c.phi_limit = f.number("phi_limit", c.phi_limit);
        c.init_range = f.number("init_range", c.init_range);
        if (c.episodes < 1 || c.max_steps < 1 || c.resting_window < 1)
            throw ConfigError(f.at("episodes"), "episodes, max_steps and resting_window must be >= 1");
        if (const json* a = f.maybe("agent")) {
            Fields g(*a, f.at("agent"));
            t.agent.input_dim = g.count("input_dim", 4);
            t.agent.hidden_layers = g.count("hidden_layers", t.agent.hidden_layers);
            t.agent.hidden_units = g.count("hidden_units", t.agent.hidden_units);
            t.agent.output_dim = g.count("output_dim", t.agent.output_dim);
            t.agent.activation = parse_activation(g, "activation", t.agent.activation);
            t.agent.recurrent = g.flag("recurrent", t.agent.recurrent);
            g.finish();
            if (t.agent.input_dim != 4)
                throw ConfigError(g.at("input_dim"), "cart-pole agents observe 4 state variables");
            if (t.agent.output_dim < 1 || t.agent.output_dim > 2)
                throw ConfigError(g.at("output_dim"), "must be 1 or 2");
            try {
                t.agent.validate();
            }
            catch (const UsageError& e) {
                throw ConfigError(f.at("agent"), e.what());
            }
        }
    }
    else {
        t.sphere_dim = f.count("dim", t.sphere_dim);
        if (t.sphere_dim < 1)
            throw ConfigError(f.at("dim"), "must be >= 1");
    }
    if (const json* s = f.maybe("success_threshold")) {
        if (!s->is_number())
            throw ConfigError(f.at("success_threshold"), "expected a number");
        t.success_threshold = s->get<double>();
    }
    f.finish();
    return t;
}

inline conditioning::ConditionSchedule parse_schedule(const json& j, const std::string& path)
{
    Fields f(j, path);
    std::vector<conditioning::ConditionSchedule::Segment> segments;
    bool cyclic = false;
    if (const json* t = f.maybe("target")) {
        if (f.has("segments"))
            throw ConfigError(path, "give either 'target' or 'segments', not both");
        segments.push_back({1, 1, number_vector(*t, f.at("target"))});
        cyclic = true;
        f.flag("cyclic", true);
    }
    else {
        const json& segs = f.need("segments");
        if (!segs.is_array() || segs.empty())
            throw ConfigError(f.at("segments"), "expected a non-empty array");
        for (std::size_t i = 0; i < segs.size(); ++i) {
            Fields s(segs[i], f.at("segments") + "[" + std::to_string(i) + "]");
            conditioning::ConditionSchedule::Segment seg;
            seg.first = s.count("first", 0);
            seg.last = s.count("last", 0);
            seg.target = number_vector(s.need("target"), s.at("target"));
            s.finish();
            segments.push_back(std::move(seg));
        }
        cyclic = f.flag("cyclic", false);
    }
    f.finish();
    try {
        return conditioning::ConditionSchedule(std::move(segments), cyclic);
    }
    catch (const UsageError& e) {
        throw ConfigError(path, e.what());
    }
}

inline conditioning::ConditionScheme parse_condition(const json& j, const std::string& path)
{
    using conditioning::ConditionKind;
    using conditioning::ConditionScheme;
    Fields f(j, path);
    const auto kind = conditioning::condition_kind_from_string(f.choice(
        "kind", "none", {"none", "quadrant", "fitness_fisher", "fitness_greedy", "novelty", "phenotype", "composite"}));
    ConditionScheme c;
    switch (kind) {
    case ConditionKind::none: break;
    case ConditionKind::fitness_fisher: c = ConditionScheme::fisher(); break;
    case ConditionKind::fitness_greedy: c = ConditionScheme::greedy(); break;
    case ConditionKind::quadrant: c = ConditionScheme::quadrant(parse_schedule(f.need("schedule"), f.at("schedule"))); break;
    case ConditionKind::phenotype:
        c = ConditionScheme::phenotype(parse_schedule(f.need("schedule"), f.at("schedule")));
        break;
    case ConditionKind::novelty: {
        conditioning::NoveltyParams p;
        p.k = f.count("k", p.k);
        p.beta = f.number("beta", p.beta);
        p.delta = f.number("delta", p.delta);
        if (p.k < 1)
            throw ConfigError(f.at("k"), "must be >= 1");
        if (!(p.delta > 0.0))
            throw ConfigError(f.at("delta"), "must be > 0");
        c = ConditionScheme::novelty_scheme(p);
        break;
    }
    case ConditionKind::composite: {
        const json& parts = f.need("components");
        if (!parts.is_array() || parts.empty())
            throw ConfigError(f.at("components"), "expected a non-empty array");
        std::vector<ConditionScheme> list;
        for (std::size_t i = 0; i < parts.size(); ++i)
            list.push_back(parse_condition(parts[i], f.at("components") + "[" + std::to_string(i) + "]"));
        c = ConditionScheme::composite(std::move(list));
        break;
    }
    }
    f.finish();
    return c;
}

inline void parse_evo(Fields& f, evolution::EvoConfig& e)
{
    e.population = f.count("N_p", e.population);
    e.sigma_init = f.number("sigma_I", e.sigma_init);
    e.buffer_ratio = f.number("N_B_ratio", e.buffer_ratio);
    e.elite_ratio = f.number("N_e_ratio", e.elite_ratio);
    e.crossover_ratio = f.number("N_c_ratio", e.crossover_ratio);
    e.mutation_ratio = f.number("N_mu_ratio", e.mutation_ratio);
    e.t_mu_over_T = f.number("t_mu_over_T", e.t_mu_over_T);
    e.t_a = f.count("t_a", e.t_a);
    e.selection_pressure = f.number("s", e.selection_pressure);
    e.weight_mode = f.choice("weight_mode", std::string(evolution::to_string(e.weight_mode)), {"w_f", "w_N"}) == "w_N"
                        ? evolution::WeightMode::normalized
                        : evolution::WeightMode::fitness_scaled;
    e.retrain_mode =
        f.choice("retrain_mode", std::string(evolution::to_string(e.retrain_mode)), {"warm_start", "reinit"}) == "reinit"
            ? evolution::RetrainMode::reinit
            : evolution::RetrainMode::warm_start;
    e.literal_relative_fitness = f.flag("literal_relative_fitness", e.literal_relative_fitness);
    e.hidden_layers = f.count("N_L", e.hidden_layers);
    e.hidden_units = f.count("N_H", e.hidden_units);
    e.activation = parse_activation(f, "f_F", e.activation);
    e.train.lr = f.number("lambda_LR", e.train.lr);
    e.train.weight_decay = f.number("lambda_L2", e.train.weight_decay);
    e.train.epochs = f.count("N_E", e.train.epochs);
    e.train.batch_size = f.count("batch_size", e.train.batch_size);
    e.diffusion_steps = f.count("T", e.diffusion_steps);
    e.schedule = f.choice("schedule", "cosine", {"cosine", "linear"}) == "linear" ? diffusion::ScheduleKind::linear
                                                                                  : diffusion::ScheduleKind::cosine;
    e.sigma_rule = f.choice("sigma_rule", "paper_default", {"paper_default", "deterministic"}) == "deterministic"
                       ? diffusion::SigmaRule::deterministic
                       : diffusion::SigmaRule::paper_default;
    e.alpha_floor = f.number("alpha_floor", e.alpha_floor);
    e.time_encoding = f.choice("time_encoding", "scalar", {"scalar", "sinusoidal"}) == "sinusoidal"
                          ? diffusion::TimeEncoding::sinusoidal
                          : diffusion::TimeEncoding::scalar;
    e.sinusoidal_features = f.count("sinusoidal_features", e.sinusoidal_features);
    e.guidance.guidance_weight = f.number("guidance_weight", e.guidance.guidance_weight);
    e.guidance.cond_dropout_prob = f.number("cond_dropout", e.guidance.cond_dropout_prob);
}

inline SolverKind parse_solver(const json& j, const std::string& path, ExperimentConfig& cfg)
{
    Fields f(j, path);
    const std::string kind = f.choice("kind", "", {"hades", "charles", "cmaes", "simplega"});
    SolverKind k = kind == "hades" ? SolverKind::hades
                   : kind == "charles" ? SolverKind::charles
                   : kind == "cmaes"   ? SolverKind::cmaes
                                       : SolverKind::simplega;
    try {
        if (k == SolverKind::hades || k == SolverKind::charles) {
            parse_evo(f, cfg.evo);
            f.finish();
            cfg.evo.validate();
        }
        else if (k == SolverKind::cmaes) {
            cfg.cma.population = f.count("N_p", cfg.cma.population);
            cfg.cma.sigma_init = f.number("sigma_I", cfg.cma.sigma_init);
            f.finish();
            cfg.cma.validate();
        }
        else {
            cfg.ga.population = f.count("N_p", cfg.ga.population);
            cfg.ga.sigma_init = f.number("sigma_I", cfg.ga.sigma_init);
            cfg.ga.elite_fraction = f.number("elite_fraction", cfg.ga.elite_fraction);
            cfg.ga.mutation_sigma = f.number("mutation_sigma", cfg.ga.mutation_sigma);
            cfg.ga.elitism = f.flag("elitism", cfg.ga.elitism);
            f.finish();
            cfg.ga.validate();
        }
    }
    catch (const UsageError& e) {
        throw ConfigError(path, e.what());
    }
    return k;
}

inline ExperimentConfig parse_config(const json& j)
{
    Fields f(j, "");
    ExperimentConfig cfg;
    cfg.name = f.text("name", cfg.name);
    cfg.description = f.text("description", cfg.description);
    cfg.task = parse_task(f.need("task"), "task");
    cfg.solver = parse_solver(f.need("solver"), "solver", cfg);
    if (const json* c = f.maybe("condition"))
        cfg.condition = parse_condition(*c, "condition");
    cfg.generations = f.count("generations", cfg.generations);
    cfg.replicates = f.count("replicates", cfg.replicates);
    cfg.seed = f.seed("seed", cfg.seed);
    cfg.threads = f.count("threads", cfg.threads);
    cfg.jobs = f.count("jobs", cfg.jobs);
    cfg.output = f.text("output", "runs/" + cfg.name);
    f.finish();

    if (cfg.name.empty() || cfg.name.find_first_of("/\\") != std::string::npos)
        throw ConfigError("name", "must be a non-empty plain file name");
    if (cfg.replicates < 1)
        throw ConfigError("replicates", "must be >= 1");
    if (cfg.jobs < 1)
        throw ConfigError("jobs", "must be >= 1");

    const bool conditioned = cfg.condition.kind != conditioning::ConditionKind::none;
    if (cfg.solver == SolverKind::charles && !conditioned)
        throw ConfigError("condition", "solver 'charles' needs a condition scheme");
    if (cfg.solver != SolverKind::charles && conditioned)
        throw ConfigError("condition", "only solver 'charles' accepts a condition scheme");

    const tasks::Task task = [&] {
        try {
            return cfg.task.build();
        }
        catch (const UsageError& e) {
            throw ConfigError("task", e.what());
        }
    }();
    if (conditioned) {
        try {
            cfg.condition.validate(task.dim(), task.trait_dim());
        }
        catch (const UsageError& e) {
            throw ConfigError("condition", e.what());
        }
        std::vector<const conditioning::ConditionScheme*> stack{&cfg.condition};
        while (!stack.empty()) {
            const auto* c = stack.back();
            stack.pop_back();
            if (!c->schedule.empty() && !c->schedule.covers(cfg.generations))
                throw ConfigError("condition.schedule",
                                  "ends at generation " + std::to_string(c->schedule.span_length())
                                      + " but the run has " + std::to_string(cfg.generations)
                                      + " generations (set cyclic or extend it)");
            for (const auto& part : c->components)
                stack.push_back(&part);
        }
    }
    return cfg;
}

inline json read_json_file(const std::string& path)
{
    std::ifstream in(path);
    if (!in)
        throw ConfigError(path, "cannot open file");
    try {
        json j;
        in >> j;
        return j;
    }
    catch (const json::parse_error& e) {
        throw ConfigError(path, std::string("malformed JSON: ") + e.what());
    }
}

inline ExperimentConfig load_config(const std::string& path) { return parse_config(read_json_file(path)); }

// ---------------------------------------------------------------------------
// Config echo with every default materialized

inline json schedule_json(const conditioning::ConditionSchedule& s)
{
    json segs = json::array();
    for (const auto& seg : s.segments())
        segs.push_back({{"first", seg.first}, {"last", seg.last}, {"target", as_list(seg.target)}});
    return {{"segments", segs}, {"cyclic", s.cyclic()}};
}

inline json condition_json(const conditioning::ConditionScheme& c)
{
    using conditioning::ConditionKind;
    json j = {{"kind", std::string(conditioning::to_string(c.kind))}};
    if (c.kind == ConditionKind::quadrant || c.kind == ConditionKind::phenotype)
        j["schedule"] = schedule_json(c.schedule);
    if (c.kind == ConditionKind::novelty)
        j.update({{"k", c.novelty.k}, {"beta", c.novelty.beta}, {"delta", c.novelty.delta}});
    if (c.kind == ConditionKind::composite) {
        j["components"] = json::array();
        for (const auto& part : c.components)
            j["components"].push_back(condition_json(part));
    }
    return j;
}

inline json task_json(const TaskConfig& t)
{
    json j = {{"kind", t.kind}};
    if (t.kind == "double_peak")
        j.update({{"sigma", t.double_peak.sigma}, {"omega", t.double_peak.omega}, {"phi", t.double_peak.phi}});
    else if (t.kind == "rastrigin")
        j.update({{"A", t.rastrigin.A}, {"bound", t.rastrigin.bound}, {"twist", t.rastrigin.twist}});
    else if (t.kind == "cartpole") {
        const auto& c = t.cartpole;
        j.update({{"episodes", c.episodes},
                  {"max_steps", c.max_steps},
                  {"resting_window", c.resting_window},
                  {"x_limit", c.x_limit},
                  {"phi_limit", c.phi_limit},
                  {"init_range", c.init_range}});
        j["agent"] = {{"input_dim", t.agent.input_dim},
                      {"hidden_layers", t.agent.hidden_layers},
                      {"hidden_units", t.agent.hidden_units},
                      {"output_dim", t.agent.output_dim},
                      {"activation", std::string(nn::to_string(t.agent.activation))},
                      {"recurrent", t.agent.recurrent}};
    }
    else
        j["dim"] = t.sphere_dim;
    j["success_threshold"] = t.build().success_threshold();
    return j;
}

inline json solver_json(const ExperimentConfig& cfg)
{
    json j = {{"kind", std::string(to_string(cfg.solver))}};
    if (cfg.solver == SolverKind::cmaes)
        j.update({{"N_p", cfg.cma.population}, {"sigma_I", cfg.cma.sigma_init}});
    else if (cfg.solver == SolverKind::simplega)
        j.update({{"N_p", cfg.ga.population},
                  {"sigma_I", cfg.ga.sigma_init},
                  {"elite_fraction", cfg.ga.elite_fraction},
                  {"mutation_sigma", cfg.ga.mutation_sigma},
                  {"elitism", cfg.ga.elitism}});
    else {
        const auto& e = cfg.evo;
        j.update({
            {"N_p", e.population},
            {"sigma_I", e.sigma_init},
            {"N_B_ratio", e.buffer_ratio},
            {"N_e_ratio", e.elite_ratio},
            {"N_c_ratio", e.crossover_ratio},
            {"N_mu_ratio", e.mutation_ratio},
            {"t_mu_over_T", e.t_mu_over_T},
            {"t_a", e.t_a},
            {"s", e.selection_pressure},
            {"weight_mode", std::string(evolution::to_string(e.weight_mode))},
            {"retrain_mode", std::string(evolution::to_string(e.retrain_mode))},
            {"literal_relative_fitness", e.literal_relative_fitness},
            {"N_L", e.hidden_layers},
            {"N_H", e.hidden_units},
            {"f_F", std::string(nn::to_string(e.activation))},
            {"lambda_LR", e.train.lr},
            {"lambda_L2", e.train.weight_decay},
            {"N_E", e.train.epochs},
            {"batch_size", e.train.batch_size},
            {"T", e.diffusion_steps},
            {"schedule", e.schedule == diffusion::ScheduleKind::cosine ? "cosine" : "linear"},
            {"sigma_rule", e.sigma_rule == diffusion::SigmaRule::paper_default ? "paper_default" : "deterministic"},
            {"alpha_floor", e.alpha_floor},
            {"time_encoding", e.time_encoding == diffusion::TimeEncoding::scalar ? "scalar" : "sinusoidal"},
            {"sinusoidal_features", e.sinusoidal_features},
            {"guidance_weight", e.guidance.guidance_weight},
            {"cond_dropout", e.guidance.cond_dropout_prob},
        });
    }
    return j;
}

inline json to_json(const ExperimentConfig& cfg)
{
    return {
        {"name", cfg.name},
        {"description", cfg.description},
        {"task", task_json(cfg.task)},
        {"solver", solver_json(cfg)},
        {"condition", condition_json(cfg.condition)},
        {"generations", cfg.generations},
        {"replicates", cfg.replicates},
        {"seed", cfg.seed},
        {"threads", cfg.threads},
        {"jobs", cfg.jobs},
        {"output", cfg.output},
    };
}

/// FNV-1a over the canonical echo, minus fields that do not affect results.
inline std::string config_hash(const ExperimentConfig& cfg)
{
    json j = to_json(cfg);
    for (const char* k : {"replicates", "threads", "jobs", "output", "description"})
        j.erase(k);
    std::uint64_t h = 14695981039346656037ull;
    for (unsigned char c : j.dump()) {
        h ^= c;
        h *= 1099511628211ull;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

// ---------------------------------------------------------------------------
// CSV

inline constexpr const char* kCsvHeader =
    "generation,f_max,f_mean,f_std,entropy_bits,peaks_cum,condition_target,condition_mean";

/// %.17g round-trips doubles; missing values are empty fields.
inline std::string format_number(double v)
{
    if (std::isnan(v))
        return "";
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline double parse_number(const std::string& s)
{
    if (s.empty())
        return std::numeric_limits<double>::quiet_NaN();
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size())
        throw UsageError("malformed number '" + s + "'");
    return v;
}

inline std::string csv_escape(const std::string& s)
{
    if (s.find_first_of(",\"\r\n") == std::string::npos)
        return s;
    std::string out = "\"";
    for (char c : s)
        out += c == '"' ? std::string("\"\"") : std::string(1, c);
    return out + "\"";
}

/// Splits one RFC-4180 record (no embedded line breaks).
inline std::vector<std::string> csv_split(const std::string& line)
{
    std::vector<std::string> out(1);
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        const char c = line[i];
        if (quoted) {
            if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
                out.back() += '"';
                ++i;
            }
            else if (c == '"')
                quoted = false;
            else
                out.back() += c;
        }
        else if (c == '"')
            quoted = true;
        else if (c == ',')
            out.emplace_back();
        else
            out.back() += c;
    }
    return out;
}

inline void write_records(std::ostream& out, const std::vector<evolution::RunRecord>& records)
{
    out << kCsvHeader << "\r\n";
    for (const auto& r : records)
        out << r.generation << ',' << format_number(r.f_max) << ',' << format_number(r.f_mean) << ','
            << format_number(r.f_std) << ',' << format_number(r.entropy_bits) << ',' << format_number(r.peaks_cum)
            << ',' << format_number(r.condition_target) << ',' << format_number(r.condition_mean) << "\r\n";
}

inline std::vector<evolution::RunRecord> read_records(const std::string& path)
{
    std::ifstream in(path);
    if (!in)
        throw UsageError("cannot open " + path);
    std::string line;
    auto next = [&] {
        if (!std::getline(in, line))
            return false;
        if (!line.empty() && line.back() == '\r')
            line.pop_back();
        return true;
    };
    if (!next() || line != kCsvHeader)
        throw UsageError(path + ": unexpected header");
    std::vector<evolution::RunRecord> out;
    while (next()) {
        if (line.empty())
            continue;
        const auto cells = csv_split(line);
        if (cells.size() != 8)
            throw UsageError(path + ": expected 8 fields, got " + std::to_string(cells.size()));
        try {
            evolution::RunRecord r;
            r.generation = std::size_t(std::stoull(cells[0]));
            r.f_max = parse_number(cells[1]);
            r.f_mean = parse_number(cells[2]);
            r.f_std = parse_number(cells[3]);
            r.entropy_bits = parse_number(cells[4]);
            r.peaks_cum = parse_number(cells[5]);
            r.condition_target = parse_number(cells[6]);
            r.condition_mean = parse_number(cells[7]);
            out.push_back(r);
        }
        catch (const std::logic_error& e) {
            throw UsageError(path + ": " + e.what());
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Running

/// One replicate of `cfg` with seed = cfg.seed + r.
inline evolution::RunHistory run_replicate(const ExperimentConfig& cfg, std::size_t r,
                                           const evolution::RunOptions& opts = {})
{
    const tasks::Task task = cfg.task.build();
    const std::uint64_t seed = cfg.seed + r;
    switch (cfg.solver) {
    case SolverKind::cmaes: {
        auto c = cfg.cma;
        c.seed = seed;
        c.threads = cfg.threads;
        return baselines::run_cmaes(c, task, cfg.generations, opts);
    }
    case SolverKind::simplega: {
        auto g = cfg.ga;
        g.seed = seed;
        g.threads = cfg.threads;
        return baselines::run_simplega(g, task, cfg.generations, opts);
    }
    default: {
        auto e = cfg.evo;
        e.seed = seed;
        e.threads = cfg.threads;
        return evolution::run_evolution(e, task, cfg.condition, cfg.generations, opts);
    }
    }
}

inline std::string replicate_file(const char* prefix, std::size_t r, const char* ext)
{
    char buf[64];
    std::snprintf(buf, sizeof buf, "%s_%03zu%s", prefix, r, ext);
    return buf;
}

struct ReplicateStatus {
    std::size_t replicate = 0;
    std::uint64_t seed = 0;
    bool ok = false;
    std::string error;
    double seconds = 0.0;
};

struct ExperimentResult {
    std::filesystem::path directory;
    std::vector<ReplicateStatus> replicates;

    bool all_ok() const
    {
        return std::all_of(replicates.begin(), replicates.end(), [](const auto& r) { return r.ok; });
    }
};

inline void write_text(const std::filesystem::path& path, const std::string& text)
{
    std::ofstream out(path, std::ios::binary);
    if (!out)
        throw std::runtime_error("cannot write " + path.string());
    out << text;
    out.close();
    if (!out)
        throw std::runtime_error("failed writing " + path.string());
}

/// Runs every replicate into `cfg.output`: config.json (echo), and per
/// replicate a CSV, a status JSON and (diffusion solvers) a model snapshot.
/// A failing replicate is recorded and does not stop the others.
inline ExperimentResult run_experiment(const ExperimentConfig& cfg, std::ostream* log = nullptr)
{
    namespace fs = std::filesystem;
    ExperimentResult result;
    result.directory = cfg.output;
    fs::create_directories(result.directory);
    const std::string hash = config_hash(cfg);
    write_text(result.directory / "config.json", to_json(cfg).dump(2) + "\n");

    result.replicates.resize(cfg.replicates);
    std::mutex log_mutex;
    parallel_for(cfg.replicates, cfg.jobs, [&](std::size_t r) {
        auto& st = result.replicates[r];
        st.replicate = r;
        st.seed = cfg.seed + r;
        const auto start = std::chrono::steady_clock::now();
        try {
            const auto history = run_replicate(cfg, r);
            std::ostringstream csv;
            write_records(csv, history.records);
            write_text(result.directory / replicate_file("replicate", r, ".csv"), csv.str());
            if (history.final_model) {
                snapshot::ModelSnapshot snap{*history.final_model, cfg.evo.schedule, cfg.evo.diffusion_steps,
                                             cfg.evo.sampler()};
                snapshot::save(snap, (result.directory / replicate_file("model", r, ".json")).string());
            }
            st.ok = true;
        }
        catch (const std::exception& e) {
            st.error = e.what();
        }
        st.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        json meta = {{"replicate", r},       {"seed", st.seed},       {"config_hash", hash},
                     {"status", st.ok ? "ok" : "failed"}, {"seconds", st.seconds}};
        if (!st.ok)
            meta["error"] = st.error;
        try {
            write_text(result.directory / replicate_file("replicate", r, ".json"), meta.dump(2) + "\n");
        }
        catch (const std::exception& e) {
            st.ok = false;
            st.error = e.what();
        }
        if (log) {
            std::lock_guard lock(log_mutex);
            *log << cfg.name << " replicate " << r << " (seed " << st.seed << "): "
                 << (st.ok ? "ok" : "FAILED: " + st.error) << " in " << st.seconds << " s\n";
        }
    });
    return result;
}

// ---------------------------------------------------------------------------
// Aggregation across the replicates of one run directory

struct ColumnStats {
    double mean = 0.0;
    double std = 0.0; // population standard deviation across replicates
};

/// NaN when any replicate lacks the value.
inline ColumnStats column_stats(const std::vector<double>& v)
{
    ColumnStats s;
    if (v.empty() || std::any_of(v.begin(), v.end(), [](double x) { return std::isnan(x); })) {
        s.mean = s.std = std::numeric_limits<double>::quiet_NaN();
        return s;
    }
    for (double x : v)
        s.mean += x;
    s.mean /= double(v.size());
    double ss = 0.0;
    for (double x : v)
        ss += (x - s.mean) * (x - s.mean);
    s.std = std::sqrt(ss / double(v.size()));
    return s;
}

struct Summary {
    std::string name;
    std::string config_hash;
    std::vector<std::size_t> replicates; // completed replicate indices
    std::vector<std::size_t> failed;
    std::vector<std::size_t> generation;
    // per generation, per column (f_max, f_mean, f_std, entropy_bits, peaks_cum, condition_target, condition_mean)
    std::vector<std::array<ColumnStats, 7>> columns;
    std::size_t peak_count = 0;
    std::vector<double> final_peaks;         // per replicate
    double all_peaks_fraction = std::numeric_limits<double>::quiet_NaN();
    double success_threshold = 0.0;
    std::vector<std::optional<std::size_t>> time_to_solve; // per replicate
    std::optional<double> median_time_to_solve;
};

inline constexpr std::array<const char*, 7> kSummaryColumns = {
    "f_max", "f_mean", "f_std", "entropy_bits", "peaks_cum", "condition_target", "condition_mean"};

inline std::array<double, 7> record_values(const evolution::RunRecord& r)
{
    return {r.f_max, r.f_mean, r.f_std, r.entropy_bits, r.peaks_cum, r.condition_target, r.condition_mean};
}

/// Median generation-to-solve; unsolved replicates count as never, so the
/// median is undefined when fewer than half of them solved.
inline std::optional<double> median_time(const std::vector<std::optional<std::size_t>>& t)
{
    if (t.empty())
        return std::nullopt;
    std::vector<double> v;
    for (const auto& x : t)
        v.push_back(x ? double(*x) : std::numeric_limits<double>::infinity());
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    const double m = n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
    if (!std::isfinite(m))
        return std::nullopt;
    return m;
}

inline std::optional<std::size_t> first_solved(const std::vector<evolution::RunRecord>& records, double threshold)
{
    for (const auto& r : records)
        if (r.f_max >= threshold)
            return r.generation;
    return std::nullopt;
}

inline Summary summarize(const ExperimentConfig& cfg, const std::vector<std::size_t>& ids,
                         const std::vector<std::vector<evolution::RunRecord>>& runs)
{
    if (runs.empty())
        throw UsageError("aggregate: no completed replicates");
    Summary s;
    s.name = cfg.name;
    s.config_hash = config_hash(cfg);
    s.replicates = ids;
    const tasks::Task task = cfg.task.build();
    s.success_threshold = task.success_threshold();
    s.peak_count = task.peak_centers().size();

    std::size_t rows = runs[0].size();
    for (const auto& r : runs)
        rows = std::min(rows, r.size());
    for (std::size_t g = 0; g < rows; ++g) {
        s.generation.push_back(runs[0][g].generation);
        std::array<ColumnStats, 7> cols;
        for (std::size_t c = 0; c < 7; ++c) {
            std::vector<double> v;
            for (const auto& r : runs) {
                if (r[g].generation != runs[0][g].generation)
                    throw UsageError("aggregate: replicates disagree on generation numbering");
                v.push_back(record_values(r[g])[c]);
            }
            cols[c] = column_stats(v);
        }
        s.columns.push_back(cols);
    }
    for (const auto& r : runs) {
        s.final_peaks.push_back(r.empty() ? std::numeric_limits<double>::quiet_NaN() : r.back().peaks_cum);
        s.time_to_solve.push_back(first_solved(r, s.success_threshold));
    }
    if (s.peak_count > 0) {
        std::size_t all = 0;
        for (double p : s.final_peaks)
            all += p >= double(s.peak_count);
        s.all_peaks_fraction = double(all) / double(runs.size());
    }
    s.median_time_to_solve = median_time(s.time_to_solve);
    return s;
}

inline std::string summary_csv(const Summary& s)
{
    std::ostringstream out;
    out << "generation,replicates";
    for (const char* c : kSummaryColumns)
        out << ',' << c << "_mean," << c << "_std";
    out << "\r\n";
    for (std::size_t g = 0; g < s.generation.size(); ++g) {
        out << s.generation[g] << ',' << s.replicates.size();
        for (const auto& c : s.columns[g])
            out << ',' << format_number(c.mean) << ',' << format_number(c.std);
        out << "\r\n";
    }
    return out.str();
}

inline json summary_json(const Summary& s)
{
    auto num = [](double v) { return std::isnan(v) ? json(nullptr) : json(v); };
    json j;
    j["name"] = s.name;
    j["config_hash"] = s.config_hash;
    j["replicates"] = s.replicates;
    j["failed"] = s.failed;
    j["generations"] = s.generation.empty() ? 0 : s.generation.back();
    json fin = json::object();
    if (!s.columns.empty())
        for (std::size_t c = 0; c < 7; ++c)
            fin[kSummaryColumns[c]] = {{"mean", num(s.columns.back()[c].mean)}, {"std", num(s.columns.back()[c].std)}};
    j["final"] = fin;
    if (s.peak_count > 0) {
        json per = json::array();
        std::map<std::string, std::size_t> hist;
        for (double p : s.final_peaks) {
            per.push_back(num(p));
            if (!std::isnan(p))
                ++hist[std::to_string(std::llround(p))];
        }
        j["peaks_cum"] = {{"peak_count", s.peak_count},
                          {"final", per},
                          {"histogram", hist},
                          {"mean", num(column_stats(s.final_peaks).mean)},
                          {"all_peaks_fraction", num(s.all_peaks_fraction)}};
    }
    else
        j["peaks_cum"] = nullptr;
    json tts = json::array();
    std::size_t solved = 0;
    for (const auto& t : s.time_to_solve) {
        tts.push_back(t ? json(*t) : json(nullptr));
        solved += t.has_value();
    }
    j["time_to_solve"] = {
        {"threshold", s.success_threshold},
        {"per_replicate", tts},
        {"solved_fraction", s.time_to_solve.empty() ? 0.0 : double(solved) / double(s.time_to_solve.size())},
        {"median", s.median_time_to_solve ? json(*s.median_time_to_solve) : json(nullptr)}};
    return j;
}

/// Reads a run directory, checks every replicate came from the same config,
/// and writes summary.csv and summary.json next to the replicates.
inline Summary aggregate(const std::filesystem::path& dir)
{
    namespace fs = std::filesystem;
    if (!fs::is_directory(dir))
        throw UsageError("aggregate: " + dir.string() + " is not a directory");
    const fs::path echo = dir / "config.json";
    if (!fs::exists(echo))
        throw UsageError("aggregate: " + echo.string() + " not found");
    ExperimentConfig cfg;
    try {
        cfg = load_config(echo.string());
    }
    catch (const ConfigError& e) {
        throw UsageError(std::string("aggregate: invalid config echo: ") + e.what());
    }
    const std::string hash = config_hash(cfg);

    std::vector<fs::path> metas;
    for (const auto& entry : fs::directory_iterator(dir)) {
        const std::string file = entry.path().filename().string();
        if (file.rfind("replicate_", 0) == 0 && entry.path().extension() == ".json")
            metas.push_back(entry.path());
    }
    std::sort(metas.begin(), metas.end());

    std::vector<std::size_t> ids, failed;
    std::vector<std::vector<evolution::RunRecord>> runs;
    for (const auto& m : metas) {
        json meta;
        try {
            std::ifstream in(m);
            in >> meta;
        }
        catch (const json::exception& e) {
            throw UsageError("aggregate: " + m.string() + ": " + e.what());
        }
        if (meta.value("config_hash", std::string()) != hash)
            throw UsageError("aggregate: " + m.filename().string()
                             + " was produced by a different config (mixed run directory)");
        const std::size_t r = meta.value("replicate", std::size_t(0));
        if (meta.value("status", std::string()) != "ok") {
            failed.push_back(r);
            continue;
        }
        fs::path csv = m;
        csv.replace_extension(".csv");
        runs.push_back(read_records(csv.string()));
        ids.push_back(r);
    }
    if (runs.empty())
        throw UsageError("aggregate: no completed replicates in " + dir.string());
    Summary s = summarize(cfg, ids, runs);
    s.failed = failed;
    write_text(dir / "summary.csv", summary_csv(s));
    write_text(dir / "summary.json", summary_json(s).dump(2) + "\n");
    return s;
}

// ---------------------------------------------------------------------------
// Recipes

inline std::filesystem::path default_recipe_dir()
{
    if (const char* env = std::getenv("HADES_RECIPES"))
        return env;
#ifdef HADES_RECIPE_DIR
    return HADES_RECIPE_DIR;
#else
    return "recipes";
#endif
}

/// A path to an existing file, or the name of a shipped recipe.
inline std::filesystem::path resolve_config(const std::string& arg, const std::filesystem::path& recipes)
{
    namespace fs = std::filesystem;
    if (fs::is_regular_file(arg))
        return arg;
    for (const fs::path& p : {recipes / arg, recipes / (arg + ".json")})
        if (fs::is_regular_file(p))
            return p;
    throw ConfigError(arg, "no such config file or recipe");
}

struct RecipeInfo {
    std::string name;
    std::string description;
    std::filesystem::path path;
};

inline std::vector<RecipeInfo> list_recipes(const std::filesystem::path& dir)
{
    std::vector<RecipeInfo> out;
    if (!std::filesystem::is_directory(dir))
        return out;
    for (const auto& entry : std::filesystem::directory_iterator(dir))
        if (entry.path().extension() == ".json") {
            const json j = read_json_file(entry.path().string());
            out.push_back({entry.path().stem().string(), j.value("description", std::string()), entry.path()});
        }
    std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.name < b.name; });
    return out;
}

// ---------------------------------------------------------------------------
// Offline sampling from a saved denoiser

/// Parses "0.5, 0, 500" or "[0.5 0 500]".
inline Eigen::VectorXd parse_vector(const std::string& text)
{
    std::string s = text;
    for (char& c : s)
        if (c == ',' || c == '[' || c == ']' || c == ';')
            c = ' ';
    std::istringstream in(s);
    std::vector<double> v;
    std::string tok;
    while (in >> tok) {
        try {
            std::size_t used = 0;
            v.push_back(std::stod(tok, &used));
            if (used != tok.size())
                throw std::invalid_argument(tok);
        }
        catch (const std::logic_error&) {
            throw UsageError("cannot parse '" + tok + "' as a number");
        }
    }
    return Eigen::Map<const Eigen::VectorXd>(v.data(), Eigen::Index(v.size()));
}

/// n genomes (D x n) drawn from a snapshot, optionally under one condition.
inline Eigen::MatrixXd sample_snapshot(const snapshot::ModelSnapshot& snap, const std::optional<Eigen::VectorXd>& cond,
                                       std::size_t n, std::uint64_t seed)
{
    const auto schedule = diffusion::make_schedule(snap.schedule, snap.steps);
    Rng rng = make_rng(seed, {evolution::kStreamSample});
    if (snap.model.spec().cond_dim > 0 && !cond)
        throw UsageError("this model is conditional: pass --condition with "
                         + std::to_string(snap.model.spec().cond_dim) + " values");
    if (!cond)
        return diffusion::ddim_sample(snap.model, schedule, snap.sampler, n, nullptr, nullptr, rng);
    if (std::size_t(cond->size()) != snap.model.spec().cond_dim)
        throw UsageError("condition has " + std::to_string(cond->size()) + " values, model expects "
                         + std::to_string(snap.model.spec().cond_dim));
    const Eigen::MatrixXd c = *cond;
    return diffusion::ddim_sample(snap.model, schedule, snap.sampler, n, &c, nullptr, rng);
}

inline void write_genomes(std::ostream& out, const Eigen::MatrixXd& genomes)
{
    for (Eigen::Index d = 0; d < genomes.rows(); ++d)
        out << (d ? "," : "") << 'g' << d;
    out << "\r\n";
    for (Eigen::Index j = 0; j < genomes.cols(); ++j) {
        for (Eigen::Index d = 0; d < genomes.rows(); ++d)
            out << (d ? "," : "") << format_number(genomes(d, j));
        out << "\r\n";
    }
}

} // namespace hades::harness
