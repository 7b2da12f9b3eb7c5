#pragma once

#include <functional>
#include <iostream>
#include <stdexcept>
#include <string>
#include <string_view>

namespace biofusion {

/// Base for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Input, configuration, and contract problems. The CLI maps these to exit code 1.
class ValidationError : public Error {
public:
    using Error::Error;
};

class ShapeError : public ValidationError {
public:
    using ValidationError::ValidationError;
};

class FormatError : public ValidationError {
public:
    using ValidationError::ValidationError;
};

class ContractError : public ValidationError {
public:
    using ValidationError::ValidationError;
};

// Numerical failures. The CLI maps these to exit code 2.
class NumericError : public Error {
public:
    using Error::Error;
};

/// A loss or metric whose value is mathematically undefined for the given input
/// (no events, no comparable pairs, ...).
class UndefinedError : public NumericError {
public:
    using NumericError::NumericError;
};

class RankDeficiencyError : public NumericError {
public:
    using NumericError::NumericError;
};

using WarningHandler = std::function<void(std::string_view)>;

inline WarningHandler& warning_handler() {
    static WarningHandler handler = [](std::string_view msg) { std::cerr << "warning: " << msg << '\n'; };
    return handler;
}

inline void warn(std::string_view msg) {
    if (auto& h = warning_handler()) h(msg);
}

/// Swaps the warning handler for the lifetime of the guard.
class ScopedWarningHandler {
public:
    explicit ScopedWarningHandler(WarningHandler h) : previous_(std::move(warning_handler())) {
        warning_handler() = std::move(h);
    }
    ~ScopedWarningHandler() { warning_handler() = std::move(previous_); }
    ScopedWarningHandler(const ScopedWarningHandler&) = delete;
    ScopedWarningHandler& operator=(const ScopedWarningHandler&) = delete;

private:
    WarningHandler previous_;
};

}  // namespace biofusion
