#pragma once

#include <stdexcept>
#include <string>

namespace mst {

// Shape or dimension disagreement between operands.
struct ShapeError : std::runtime_error {
    explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

// Invalid configuration value (named field in the message).
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// Checkpoint file problems, each kind distinct.
struct CheckpointError : std::runtime_error {
    enum class Kind { BadMagic, BadVersion, Structural, Truncated };
    Kind kind;
    CheckpointError(Kind k, const std::string& msg) : std::runtime_error(msg), kind(k) {}
};

// Image decode/encode problems (unsupported color type, bad file, ...).
struct ImageError : std::runtime_error {
    explicit ImageError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace mst
