#pragma once

#include <stdexcept>
#include <string>

namespace voxalign {

// Base class for all library errors. The CLI maps subtypes to exit codes.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// A caller violated an operation's preconditions (rejected input).
struct InvalidArgument : Error {
    using Error::Error;
};

// Bad or inconsistent configuration (strict-schema violations included).
struct ConfigError : Error {
    using Error::Error;
};

struct IoError : Error {
    using Error::Error;
};

// Checkpoint directory does not match its manifest.
struct CorruptCheckpoint : Error {
    using Error::Error;
};

// A vector that must be normalized had (near-)zero norm.
struct DegenerateVector : Error {
    using Error::Error;
};

// Training hit a non-finite loss; a diagnostic dump is written before throwing.
struct TrainingDiverged : Error {
    using Error::Error;
};

}  // namespace voxalign
