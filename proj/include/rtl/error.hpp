#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace rtl {

/// Base of every error the library throws.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Tensor shapes or extents that do not fit together.
class DimensionError : public Error {
public:
    using Error::Error;
};

/// A caller broke an operation's precondition.
class ContractError : public Error {
public:
    using Error::Error;
};

/// Operation invoked in the wrong lifecycle state (e.g. backward twice).
class StateError : public Error {
public:
    using Error::Error;
};

class IndexError : public Error {
public:
    using Error::Error;
};

/// Invalid model, dataset, training, or experiment configuration.
class ConfigError : public Error {
public:
    using Error::Error;
};

class CorruptCheckpoint : public Error {
public:
    using Error::Error;
};

/// Malformed dataset file; the message names the offending record.
class LoadError : public Error {
public:
    using Error::Error;
};

/// Required checkpoint, dataset, or record file does not exist.
class MissingArtifact : public Error {
public:
    using Error::Error;
};

class ReportError : public Error {
public:
    using Error::Error;
};

/// Training produced a non-finite loss.
class DivergenceError : public Error {
public:
    DivergenceError(std::size_t epoch, std::size_t batch, const std::string& what)
        : Error("divergence at epoch " + std::to_string(epoch) + ", batch " +
                std::to_string(batch) + ": " + what),
          epoch_(epoch),
          batch_(batch) {}

    std::size_t epoch() const noexcept { return epoch_; }
    std::size_t batch() const noexcept { return batch_; }

private:
    std::size_t epoch_;
    std::size_t batch_;
};

}  // namespace rtl
