#pragma once

#include <stdexcept>
#include <string>

namespace dbqa {

/// Base class for every error raised by the harness.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Malformed input text (dataset record, completion, config file).
class ParseError : public Error {
public:
    using Error::Error;
};

/// Cross-record consistency failure, e.g. a question naming an absent database.
class IntegrityError : public Error {
public:
    using Error::Error;
};

/// Invalid or missing configuration (unregistered model, even reviewer count, ...).
class ConfigError : public Error {
public:
    using Error::Error;
};

/// Provider call failed after all retry attempts.
class TransportError : public Error {
public:
    TransportError(const std::string& what, int attempts = 1)
        : Error(what), attempts_(attempts) {}
    int attempts() const { return attempts_; }

private:
    int attempts_;
};

/// API misuse such as querying a closed sandbox.
class UsageError : public Error {
public:
    using Error::Error;
};

/// Failure while building a sandbox from a DatabaseSpec.
class SandboxError : public Error {
public:
    SandboxError(const std::string& what, std::size_t statement_index, std::string engine_message)
        : Error(what), statement_index_(statement_index), engine_message_(std::move(engine_message)) {}
    std::size_t statement_index() const { return statement_index_; }
    const std::string& engine_message() const { return engine_message_; }

private:
    std::size_t statement_index_;
    std::string engine_message_;
};

/// Template rendering failure (unknown template or unfilled placeholder).
class TemplateError : public Error {
public:
    using Error::Error;
};

/// Dataset-forge stage violation or generation failure.
class PipelineError : public Error {
public:
    PipelineError(const std::string& what, std::string raw = {})
        : Error(what), raw_(std::move(raw)) {}
    const std::string& raw_completion() const { return raw_; }

private:
    std::string raw_;
};

class NotFoundError : public Error {
public:
    using Error::Error;
};

class ConflictError : public Error {
public:
    using Error::Error;
};

class ValidationError : public Error {
public:
    using Error::Error;
};

}  // namespace dbqa
