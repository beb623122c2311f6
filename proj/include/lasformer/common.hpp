// Shared error types and small utilities used across the library.
#pragma once

#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace lasformer {

// Additive logit value standing in for -inf. exp(kMaskedLogit - rowmax)
// underflows to exactly 0.0 in double precision, so masked positions carry
// exactly zero weight without NaN propagation.
inline constexpr double kMaskedLogit = -1e30;

// Anything at or below this is treated as a masked-out logit when detecting
// degenerate (fully masked) rows.
inline constexpr double kMaskedThreshold = -1e29;

class ShapeError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class DegenerateRowError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ContractError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class DivergenceError : public NumericError {
public:
    DivergenceError(const std::string& what, long long step)
        : NumericError(what), step_(step) {}
    long long step() const { return step_; }

private:
    long long step_;
};

class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class InputError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class InstrumentationError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

using Shape = std::vector<int>;

inline int numel(const Shape& shape) {
    int n = 1;
    for (int d : shape) n *= d;
    return n;
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ",";
        os << shape[i];
    }
    os << "]";
    return os.str();
}

}  // namespace lasformer
