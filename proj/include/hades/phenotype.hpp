#pragma once

#include <algorithm>
#include <array>
#include <cstddef>
#include <span>
#include <vector>

#include "error.hpp"

namespace hades {

struct TrajectoryRow {
    std::size_t step = 0;
    double x = 0.0, x_dot = 0.0, phi = 0.0, phi_dot = 0.0;
    int action = 0; // 0 = left, 1 = right
};

/// Outcome of one cart-pole episode.
struct EpisodeSummary {
    std::size_t steps = 0;      // fitness: steps survived, <= max_steps
    double x_resting = 0.0;     // mean cart position over the final min(N_r, steps) steps
    double x_dot_resting = 0.0; // mean cart velocity over the same window
    std::vector<TrajectoryRow> trajectory; // filled only on request
};

namespace conditioning {

/// (x_resting, x_dot_resting, fitness) averaged over evaluation episodes.
inline std::array<double, 3> phenotype_condition(std::span<const EpisodeSummary> episodes)
{
    if (episodes.empty())
        throw UsageError("phenotype_condition: no episodes");
    std::array<double, 3> c{0.0, 0.0, 0.0};
    for (const auto& e : episodes) {
        c[0] += e.x_resting;
        c[1] += e.x_dot_resting;
        c[2] += double(e.steps);
    }
    for (auto& v : c)
        v /= double(episodes.size());
    return c;
}

inline std::array<double, 3> phenotype_condition(const EpisodeSummary& episode)
{
    return phenotype_condition(std::span<const EpisodeSummary>(&episode, 1));
}

} // namespace conditioning
} // namespace hades
