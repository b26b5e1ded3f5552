// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace laysum {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Malformed input record. `line()` is 1-based, 0 when unknown.
class ParseError : public Error {
public:
    ParseError(const std::string& what, std::size_t line)
        : Error(line ? what + " (line " + std::to_string(line) + ")" : what), line_(line) {}
    std::size_t line() const noexcept { return line_; }

private:
    std::size_t line_;
};

class ValidationError : public Error {
public:
    using Error::Error;
};

/// Binary/text container problems. `offset()` is the byte offset where decoding failed.
class FormatError : public Error {
public:
    FormatError(const std::string& what, std::size_t offset)
        : Error(what + " at byte offset " + std::to_string(offset)), offset_(offset) {}
    explicit FormatError(const std::string& what) : Error(what), offset_(0) {}
    std::size_t offset() const noexcept { return offset_; }

private:
    std::size_t offset_;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

class OverBudgetError : public Error {
public:
    OverBudgetError(std::size_t needed, std::size_t budget)
        : Error("prompt needs " + std::to_string(needed) + " tokens without demonstrations, budget is " +
                std::to_string(budget)),
          needed_(needed), budget_(budget) {}
    std::size_t needed() const noexcept { return needed_; }
    std::size_t budget() const noexcept { return budget_; }

private:
    std::size_t needed_;
    std::size_t budget_;
};

// Generation-service failures.
class PermanentError : public Error {
public:
    PermanentError(const std::string& what, int status) : Error(what), status_(status) {}
    int status() const noexcept { return status_; }

private:
    int status_;
};

class TransientExhaustedError : public Error {
public:
    TransientExhaustedError(const std::string& what, int attempts) : Error(what), attempts_(attempts) {}
    int attempts() const noexcept { return attempts_; }

private:
    int attempts_;
};

class ProtocolError : public Error {
public:
    using Error::Error;
};

class ReplayMiss : public Error {
public:
    explicit ReplayMiss(const std::string& key) : Error("replay miss for key " + key), key_(key) {}
    const std::string& key() const noexcept { return key_; }

private:
    std::string key_;
};

} // namespace laysum
