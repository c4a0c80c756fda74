#pragma once

#include <stdexcept>
#include <string>
#include <utility>

namespace svc {

// Exit-code categories used by the CLI: usage = 1, data = 2, numerical = 3.
inline constexpr int kExitUsage = 1;
inline constexpr int kExitData = 2;
inline constexpr int kExitNumeric = 3;

class Error : public std::runtime_error {
public:
    Error(std::string kind, const std::string& message, int exit_code)
        : std::runtime_error(message), kind_(std::move(kind)), exit_code_(exit_code) {}

    const std::string& kind() const noexcept { return kind_; }
    int exit_code() const noexcept { return exit_code_; }

private:
    std::string kind_;
    int exit_code_;
};

#define SVC_DEFINE_ERROR(Name, Exit)                    \
    class Name : public Error {                         \
    public:                                             \
        explicit Name(const std::string& message)       \
            : Error(#Name, message, Exit) {}            \
    }

SVC_DEFINE_ERROR(UsageError, kExitUsage);

SVC_DEFINE_ERROR(IoFailure, kExitData);
SVC_DEFINE_ERROR(MalformedHeader, kExitData);
SVC_DEFINE_ERROR(ShapeDataMismatch, kExitData);
SVC_DEFINE_ERROR(UnsupportedDtype, kExitData);
SVC_DEFINE_ERROR(DuplicateParameter, kExitData);
SVC_DEFINE_ERROR(ParameterSetMismatch, kExitData);
SVC_DEFINE_ERROR(ShapeMismatch, kExitData);
SVC_DEFINE_ERROR(DimensionMismatch, kExitData);
SVC_DEFINE_ERROR(LengthMismatch, kExitData);
SVC_DEFINE_ERROR(EmptyTaskList, kExitData);
SVC_DEFINE_ERROR(EmptyList, kExitData);
SVC_DEFINE_ERROR(InvalidTrimFraction, kExitData);
SVC_DEFINE_ERROR(InvalidDropRate, kExitData);
SVC_DEFINE_ERROR(InvalidConfig, kExitData);
SVC_DEFINE_ERROR(NonUnitDirection, kExitData);
SVC_DEFINE_ERROR(DegenerateResponse, kExitData);

SVC_DEFINE_ERROR(NonFiniteInput, kExitNumeric);
SVC_DEFINE_ERROR(ConvergenceFailure, kExitNumeric);

#undef SVC_DEFINE_ERROR

}  // namespace svc
