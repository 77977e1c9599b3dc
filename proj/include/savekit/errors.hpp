#pragma once

#include <stdexcept>
#include <string>

namespace savekit {

// Base of every error the library raises. Subclasses name the contract that
// was broken so callers (and the CLI exit path) can tell them apart.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ContractError : public Error {
public:
    using Error::Error;
};

class DomainError : public Error {
public:
    using Error::Error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

class PromptError : public Error {
public:
    using Error::Error;
};

class AggregationError : public Error {
public:
    using Error::Error;
};

class InflationError : public Error {
public:
    using Error::Error;
};

class DependencyError : public Error {
public:
    using Error::Error;
};

class IngestionError : public Error {
public:
    using Error::Error;
};

class FormatError : public Error {
public:
    using Error::Error;
};

}  // namespace savekit
