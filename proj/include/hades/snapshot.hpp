#pragma once

// Versioned JSON snapshots of trained denoisers.

#include <fstream>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "diffusion.hpp"
#include "error.hpp"

namespace hades::snapshot {

inline constexpr const char* kFormat = "hades-denoiser";
inline constexpr int kVersion = 1;

struct ModelSnapshot {
    diffusion::Denoiser model;
    diffusion::ScheduleKind schedule = diffusion::ScheduleKind::cosine;
    std::size_t steps = 100;
    diffusion::SamplerConfig sampler{};
};

inline std::vector<double> to_vector(const Eigen::VectorXd& v) { return {v.data(), v.data() + v.size()}; }

inline Eigen::VectorXd from_vector(const std::vector<double>& v)
{
    return Eigen::Map<const Eigen::VectorXd>(v.data(), Eigen::Index(v.size()));
}

inline nlohmann::json to_json(const ModelSnapshot& s)
{
    const auto& spec = s.model.spec();
    nlohmann::json j;
    j["format"] = kFormat;
    j["version"] = kVersion;
    j["spec"] = {
        {"dim", spec.dim},
        {"cond_dim", spec.cond_dim},
        {"hidden_layers", spec.hidden_layers},
        {"hidden_units", spec.hidden_units},
        {"activation", std::string(nn::to_string(spec.activation))},
        {"time_encoding", spec.time_encoding == diffusion::TimeEncoding::scalar ? "scalar" : "sinusoidal"},
        {"sinusoidal_features", spec.sinusoidal_features},
    };
    j["schedule"] = {{"kind", s.schedule == diffusion::ScheduleKind::cosine ? "cosine" : "linear"},
                     {"steps", s.steps}};
    j["sampler"] = {
        {"sigma_rule", s.sampler.sigma_rule == diffusion::SigmaRule::paper_default ? "paper_default" : "deterministic"},
        {"init_std", s.sampler.init_std},
        {"alpha_floor", s.sampler.alpha_floor},
        {"guidance_weight", s.sampler.guidance.guidance_weight},
    };
    j["cond_mean"] = to_vector(s.model.cond_mean());
    j["cond_scale"] = to_vector(s.model.cond_scale());
    j["params"] = to_vector(s.model.net().values());
    return j;
}

inline ModelSnapshot from_json(const nlohmann::json& j)
{
    try {
        if (j.at("format").get<std::string>() != kFormat)
            throw UsageError("snapshot: not a denoiser snapshot");
        if (j.at("version").get<int>() != kVersion)
            throw UsageError("snapshot: unsupported version " + std::to_string(j.at("version").get<int>()));
        const auto& js = j.at("spec");
        diffusion::DenoiserSpec spec;
        spec.dim = js.at("dim").get<std::size_t>();
        spec.cond_dim = js.at("cond_dim").get<std::size_t>();
        spec.hidden_layers = js.at("hidden_layers").get<std::size_t>();
        spec.hidden_units = js.at("hidden_units").get<std::size_t>();
        spec.activation = nn::activation_from_string(js.at("activation").get<std::string>());
        spec.time_encoding = js.at("time_encoding").get<std::string>() == "scalar" ? diffusion::TimeEncoding::scalar
                                                                                   : diffusion::TimeEncoding::sinusoidal;
        spec.sinusoidal_features = js.at("sinusoidal_features").get<std::size_t>();

        ModelSnapshot s;
        const auto params = j.at("params").get<std::vector<double>>();
        s.model = diffusion::Denoiser(spec, nn::NetParams(spec.net_spec(), from_vector(params)));
        s.model.set_standardization(from_vector(j.at("cond_mean").get<std::vector<double>>()),
                                    from_vector(j.at("cond_scale").get<std::vector<double>>()));
        s.schedule = j.at("schedule").at("kind").get<std::string>() == "cosine" ? diffusion::ScheduleKind::cosine
                                                                                : diffusion::ScheduleKind::linear;
        s.steps = j.at("schedule").at("steps").get<std::size_t>();
        const auto& sm = j.at("sampler");
        s.sampler.sigma_rule = sm.at("sigma_rule").get<std::string>() == "paper_default"
                                   ? diffusion::SigmaRule::paper_default
                                   : diffusion::SigmaRule::deterministic;
        s.sampler.init_std = sm.at("init_std").get<double>();
        s.sampler.alpha_floor = sm.at("alpha_floor").get<double>();
        s.sampler.guidance.guidance_weight = sm.at("guidance_weight").get<double>();
        return s;
    }
    catch (const nlohmann::json::exception& e) {
        throw UsageError(std::string("snapshot: malformed file: ") + e.what());
    }
}

inline void save(const ModelSnapshot& s, const std::string& path)
{
    std::ofstream out(path);
    if (!out)
        throw std::runtime_error("cannot write " + path);
    out << to_json(s).dump(1) << '\n';
    if (!out)
        throw std::runtime_error("failed writing " + path);
}

inline ModelSnapshot load(const std::string& path)
{
    std::ifstream in(path);
    if (!in)
        throw UsageError("cannot open snapshot " + path);
    nlohmann::json j;
    try {
        in >> j;
    }
    catch (const nlohmann::json::exception& e) {
        throw UsageError("snapshot " + path + ": " + e.what());
    }
    return from_json(j);
}

} // namespace hades::snapshot
