#pragma once

#include <stdexcept>
#include <string>

namespace fedmm {

// Invalid experiment configuration (CLI maps this to exit code 1).
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

// Dataset ingestion or partitioning failure (exit code 2).
struct DataError : std::runtime_error {
    explicit DataError(const std::string& what) : std::runtime_error(what) {}
};

// Parameter-vector / layer dimension mismatch (exit code 3).
struct ShapeError : std::runtime_error {
    explicit ShapeError(const std::string& what) : std::runtime_error(what) {}
};

// Any other invariant violation detected at run time (exit code 3).
struct RuntimeError : std::runtime_error {
    explicit RuntimeError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace fedmm
