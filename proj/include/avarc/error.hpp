#pragma once

#include <stdexcept>
#include <string>

namespace avarc {

/// Base class for every error raised by the library. `code()` is a stable
/// machine-readable identifier used by the CLI error JSON.
class Error : public std::runtime_error {
public:
    Error(std::string code, const std::string& message)
        : std::runtime_error(message), code_(std::move(code)) {}

    const std::string& code() const noexcept { return code_; }

private:
    std::string code_;
};

#define AVARC_DEFINE_ERROR(Name, Code)                                   \
    class Name : public Error {                                          \
    public:                                                              \
        explicit Name(const std::string& message) : Error(Code, message) {} \
    };

AVARC_DEFINE_ERROR(ShapeError, "shape_error")
AVARC_DEFINE_ERROR(ParameterError, "parameter_error")
AVARC_DEFINE_ERROR(InvalidTokenError, "invalid_token")
AVARC_DEFINE_ERROR(LabelError, "label_error")
AVARC_DEFINE_ERROR(CapabilityError, "capability_error")
AVARC_DEFINE_ERROR(DataError, "data_error")
AVARC_DEFINE_ERROR(FormatError, "format_error")
AVARC_DEFINE_ERROR(ConfigError, "config_error")
AVARC_DEFINE_ERROR(CompatibilityError, "compatibility_error")
AVARC_DEFINE_ERROR(DegenerateInputError, "degenerate_input")

#undef AVARC_DEFINE_ERROR

}  // namespace avarc
