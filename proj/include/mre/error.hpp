#pragma once

#include <stdexcept>
#include <string>

namespace mre {

// Base class for every error raised by the library. `module()` names the
// component that failed so the CLI can report it.
class Error : public std::runtime_error {
public:
    Error(std::string module, const std::string& what)
        : std::runtime_error(what), module_(std::move(module)) {}

    const std::string& module() const noexcept { return module_; }

private:
    std::string module_;
};

class ParseError : public Error {
public:
    ParseError(const std::string& what, std::size_t line = 0)
        : Error("data_model", line ? "line " + std::to_string(line) + ": " + what : what),
          line_(line) {}

    std::size_t line() const noexcept { return line_; }

private:
    std::size_t line_;
};

class ValidationError : public Error {
public:
    explicit ValidationError(const std::string& what, std::string module = "data_model")
        : Error(std::move(module), what) {}
};

class ShapeError : public Error {
public:
    explicit ShapeError(const std::string& what) : Error("fusion", what) {}
};

class ConfigError : public Error {
public:
    explicit ConfigError(const std::string& what, std::string module = "config")
        : Error(std::move(module), what) {}
};

class FormatError : public Error {
public:
    explicit FormatError(const std::string& what) : Error("encoders", what) {}
};

class DecodeError : public Error {
public:
    explicit DecodeError(const std::string& what) : Error("evidence_retrieval", what) {}
};

// Programming-contract violations (bad positions, missing intermediates).
class ContractViolation : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

} // namespace mre
