#pragma once

#include <stdexcept>
#include <string>

namespace pcarch {

// Broad classes used by the CLI to pick an exit code.
enum class ErrorKind {
    usage,      // bad arguments or configuration
    data,       // malformed or inconsistent input files and tensors
    numerical,  // solver non-convergence, training divergence
};

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

#define PCARCH_DEFINE_ERROR(Name, Kind)                                              \
    class Name : public Error {                                                      \
    public:                                                                          \
        explicit Name(const std::string& what) : Error(ErrorKind::Kind, what) {}     \
    };

PCARCH_DEFINE_ERROR(ArgumentError, usage)
PCARCH_DEFINE_ERROR(ContractError, usage)
PCARCH_DEFINE_ERROR(DimensionError, data)
PCARCH_DEFINE_ERROR(DataError, data)
PCARCH_DEFINE_ERROR(FormatError, data)
PCARCH_DEFINE_ERROR(LengthError, data)
PCARCH_DEFINE_ERROR(ShapeError, data)
PCARCH_DEFINE_ERROR(ConsistencyError, data)
PCARCH_DEFINE_ERROR(DegenerateInputError, data)
PCARCH_DEFINE_ERROR(InsufficientDataError, data)
PCARCH_DEFINE_ERROR(NumericalError, numerical)

#undef PCARCH_DEFINE_ERROR

// Loss became non-finite during training.
class TrainingError : public Error {
public:
    TrainingError(std::size_t epoch, const std::string& what)
        : Error(ErrorKind::numerical, what), epoch_(epoch) {}
    std::size_t epoch() const noexcept { return epoch_; }

private:
    std::size_t epoch_;
};

// Exit codes of the command-line tool.
inline int exit_code(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::usage: return 2;
        case ErrorKind::data: return 3;
        case ErrorKind::numerical: return 4;
    }
    return 1;
}

}  // namespace pcarch
