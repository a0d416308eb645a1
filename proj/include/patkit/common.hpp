#pragma once

#include <cmath>
#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace patkit {

// Error taxonomy. Everything user-facing derives from Error so the CLI can
// map failures onto its exit-code contract.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Incompatible tensor shapes (matmul inner dims, concat off-axis dims, ...).
class ShapeError : public Error {
public:
    explicit ShapeError(const std::string& msg) : Error(msg) {}
};

// Math domain violations: log of non-positive, division by zero.
class DomainError : public Error {
public:
    explicit DomainError(const std::string& msg) : Error(msg) {}
};

// Caller broke an operation precondition (k >= N, non-scalar loss, tau <= 0).
class ContractError : public Error {
public:
    explicit ContractError(const std::string& msg) : Error(msg) {}
};

// Invalid run or model configuration.
class ConfigError : public Error {
public:
    explicit ConfigError(const std::string& msg) : Error(msg) {}
};

// Malformed input file; message carries the file location.
class ParseError : public Error {
public:
    explicit ParseError(const std::string& msg) : Error(msg) {}
};

// Training loss became non-finite.
class TrainingDiverged : public Error {
public:
    explicit TrainingDiverged(const std::string& msg) : Error(msg) {}
};

using Shape = std::vector<int>;

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) os << 'x';
        os << s[i];
    }
    os << ']';
    return os.str();
}

inline size_t shape_numel(const Shape& s) {
    size_t n = 1;
    for (int d : s) {
        if (d <= 0) throw ShapeError("non-positive dimension in shape " + shape_str(s));
        n *= static_cast<size_t>(d);
    }
    return n;
}

template <typename T>
inline bool all_finite(const std::vector<T>& v) {
    for (T x : v)
        if (!std::isfinite(static_cast<double>(x))) return false;
    return true;
}

inline int env_thread_cap() {
    // PATKIT_THREADS caps worker parallelism; everything currently runs on the
    // calling thread, the cap is honored by the batch loop when it fans out.
    const char* s = std::getenv("PATKIT_THREADS");
    if (!s) return 0;
    int v = std::atoi(s);
    return v > 0 ? v : 1;
}

}  // namespace patkit
