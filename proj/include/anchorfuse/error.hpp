#pragma once

#include <stdexcept>
#include <string>

namespace anchorfuse {

// Categories map onto CLI exit codes (see tools/anchorfuse.cpp).
enum class ErrorCategory {
    invalid_argument,
    shape_mismatch,
    config,
    io,
    numeric,
};

class Error : public std::runtime_error {
public:
    Error(ErrorCategory category, const std::string& message)
        : std::runtime_error(message), m_category(category) {}

    ErrorCategory category() const noexcept { return m_category; }

private:
    ErrorCategory m_category;
};

inline const char* category_name(ErrorCategory category) {
    switch (category) {
    case ErrorCategory::invalid_argument: return "invalid-argument";
    case ErrorCategory::shape_mismatch: return "shape-mismatch";
    case ErrorCategory::config: return "config";
    case ErrorCategory::io: return "io";
    case ErrorCategory::numeric: return "numeric";
    }
    return "unknown";
}

[[noreturn]] inline void fail(ErrorCategory category, const std::string& message) {
    throw Error(category, message);
}

inline void require(bool condition, const std::string& message) {
    if (!condition) {
        throw Error(ErrorCategory::invalid_argument, message);
    }
}

} // namespace anchorfuse
