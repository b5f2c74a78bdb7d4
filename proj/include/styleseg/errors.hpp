#pragma once

#include <stdexcept>
#include <string>

namespace styleseg {

// Bad flags/config files; CLI exit code 1.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Missing/unreadable/inconsistent data; CLI exit code 2.
struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Non-finite training loss; CLI exit code 3.
struct TrainingDivergence : std::runtime_error {
    explicit TrainingDivergence(int epoch)
        : std::runtime_error("training diverged: non-finite loss at epoch " + std::to_string(epoch)),
          epoch(epoch) {}
    int epoch;
};

struct ParseError : std::runtime_error {
    ParseError(const std::string& what, int line)
        : std::runtime_error(what + " (line " + std::to_string(line) + ")"), line(line) {}
    int line;
};

} // namespace styleseg
