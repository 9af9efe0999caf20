#pragma once

// Error taxonomy shared across the library. The CLI maps each class to a
// distinct process exit code.

#include <stdexcept>
#include <string>

namespace cas {

struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Tensor shape / dimension disagreements.
struct ShapeError : Error {
    using Error::Error;
};

// Out-of-range ids (token ids, targets, vocabulary lookups).
struct IndexError : Error {
    using Error::Error;
};

// API misuse: violated preconditions that are not shape related.
struct ContractError : Error {
    using Error::Error;
};

// Invalid configuration values.
struct ConfigError : Error {
    using Error::Error;
};

// File system / encoding failures.
struct IoError : Error {
    using Error::Error;
};

// Incompatible artifacts (vocabulary vs. model, checkpoint vs. descriptor).
struct MismatchError : Error {
    using Error::Error;
};

// Non-finite loss during training; carries enough to diagnose the step.
struct DivergenceError : Error {
    std::size_t step;
    double value;
    DivergenceError(std::size_t step_, double value_)
        : Error("training diverged at step " + std::to_string(step_) +
                ": loss = " + std::to_string(value_)),
          step(step_),
          value(value_) {}
};

}  // namespace cas
