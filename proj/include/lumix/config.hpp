#pragma once

#include <filesystem>
#include <stdexcept>
#include <string>
#include <string_view>

#include "lumix/diffusion.hpp"

namespace lumix::config {

class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Model and training settings as one flat key=value document.
struct RunConfig {
    diffusion::DiTConfig model;
    diffusion::TrainConfig train;

    bool operator==(const RunConfig&) const = default;
};

/**
 * Parses `key = value` lines. `#` starts a comment; blank lines are ignored.
 * Unknown or repeated keys, malformed values and invalid combinations raise
 * ConfigError naming the line. Missing keys keep their defaults.
 */
RunConfig parse(std::string_view text);
RunConfig load(const std::filesystem::path& path);

/// Canonical form: every key, fixed order, shortest round-trip numbers.
std::string emit(const RunConfig& config);

}  // namespace lumix::config
