#pragma once

#include <stdexcept>
#include <string>

namespace csadapt {

// Error taxonomy. The CLI maps these to exit codes: config/input/validation/
// feasibility -> 1, internal -> 2.

struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error("config error: " + msg) {}
};

struct InputError : std::runtime_error {
    explicit InputError(const std::string& msg) : std::runtime_error("input error: " + msg) {}
};

struct ValidationError : std::runtime_error {
    explicit ValidationError(const std::string& msg) : std::runtime_error("validation error: " + msg) {}
};

// Structurally impossible CTC target for the given frame count. Distinct from
// numeric failure so the trainer can fail loudly instead of averaging an inf.
struct FeasibilityError : std::runtime_error {
    explicit FeasibilityError(const std::string& msg) : std::runtime_error("feasibility error: " + msg) {}
};

struct InternalError : std::runtime_error {
    explicit InternalError(const std::string& msg) : std::runtime_error("internal error: " + msg) {}
};

}  // namespace csadapt
