#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <utility>

namespace hades {

/// Caller violated a documented precondition (dimension mismatch, bad index, ...).
class UsageError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// A computation produced or received a non-finite value.
class NumericError : public std::runtime_error {
public:
    NumericError(const std::string& what, std::size_t index)
        : std::runtime_error(what + " (index " + std::to_string(index) + ")"), index_(index) {}

    std::size_t index() const noexcept { return index_; }

private:
    std::size_t index_;
};

/// A weighted objective whose weights are all zero.
class DegenerateError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Experiment configuration failed validation; `path` locates the offending key.
class ConfigError : public std::runtime_error {
public:
    ConfigError(std::string path, const std::string& what)
        : std::runtime_error(path + ": " + what), path_(std::move(path)) {}

    const std::string& path() const noexcept { return path_; }

private:
    std::string path_;
};

} // namespace hades
