// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace nlab {

/// Caller passed data that cannot be processed (bad token, empty dataset, k out of range).
class InputError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// A precondition on shapes or argument pairing was broken by the calling code.
class ContractViolation : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

/// NaN or Inf produced by a numeric operation; `op()` names the culprit.
class NumericFault : public std::runtime_error {
public:
    NumericFault(std::string op, const std::string& what)
        : std::runtime_error(what), op_(std::move(op)) {}
    explicit NumericFault(std::string op)
        : std::runtime_error("non-finite value produced by op '" + op + "'"), op_(std::move(op)) {}

    const std::string& op() const noexcept { return op_; }

private:
    std::string op_;
};

/// Cosine or correlation requested on a degenerate (zero-norm / constant) input.
class UndefinedValue : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ParseError : public std::runtime_error {
public:
    ParseError(std::size_t line, const std::string& what)
        : std::runtime_error("line " + std::to_string(line) + ": " + what), line_(line) {}

    std::size_t line() const noexcept { return line_; }

private:
    std::size_t line_;
};

class SchemaError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Missing or unreadable file / artifact.
class FileError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

}  // namespace nlab
