#pragma once

#include <stdexcept>
#include <string>

namespace flexdoc {

/// Raised when input data (documents, schemas, corpora) fails a contract.
class DataError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Raised on shape mismatches and other misuse of the tensor engine.
class ShapeError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class TrainingError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

}  // namespace flexdoc
