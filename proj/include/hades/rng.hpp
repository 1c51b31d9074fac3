#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

#include <Eigen/Dense>

namespace hades {

using Rng = std::mt19937_64;

inline std::uint64_t splitmix64(std::uint64_t x) noexcept
{
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

/// Derive an independent stream seed from a base seed and a tuple of labels,
/// e.g. (run seed, generation, individual index).
inline std::uint64_t derive_seed(std::uint64_t base, std::initializer_list<std::uint64_t> labels) noexcept
{
    std::uint64_t h = splitmix64(base);
    for (auto l : labels)
        h = splitmix64(h ^ splitmix64(l + 0x632be59bd9b4e019ULL));
    return h;
}

inline Rng make_rng(std::uint64_t base, std::initializer_list<std::uint64_t> labels)
{
    return Rng(derive_seed(base, labels));
}

inline double standard_normal(Rng& rng)
{
    return std::normal_distribution<double>(0.0, 1.0)(rng);
}

inline double uniform01(Rng& rng)
{
    return std::uniform_real_distribution<double>(0.0, 1.0)(rng);
}

inline Eigen::MatrixXd normal_matrix(Eigen::Index rows, Eigen::Index cols, Rng& rng, double stddev = 1.0)
{
    std::normal_distribution<double> dist(0.0, stddev);
    Eigen::MatrixXd m(rows, cols);
    // Column-major fill order is part of the determinism contract.
    for (Eigen::Index c = 0; c < cols; ++c)
        for (Eigen::Index r = 0; r < rows; ++r)
            m(r, c) = dist(rng);
    return m;
}

inline Eigen::VectorXd normal_vector(Eigen::Index n, Rng& rng, double stddev = 1.0)
{
    return normal_matrix(n, 1, rng, stddev);
}

} // namespace hades
