#pragma once

#include <stdexcept>
#include <string>

namespace fusionscope {

/// Bad user input: malformed files, schema violations, contract breaches.
/// The CLI maps this to exit code 1; everything else maps to 2.
class ValidationError : public std::runtime_error {
public:
    explicit ValidationError(const std::string& what) : std::runtime_error(what) {}
};

/// Training aborted (divergence, non-finite loss).
class TrainingError : public std::runtime_error {
public:
    explicit TrainingError(const std::string& what) : std::runtime_error(what) {}
};

/// Filesystem / codec failures.
class IoError : public std::runtime_error {
public:
    explicit IoError(const std::string& what) : std::runtime_error(what) {}
};

} // namespace fusionscope
