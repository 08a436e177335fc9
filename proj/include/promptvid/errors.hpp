#pragma once

#include <stdexcept>
#include <string>

namespace promptvid {

// Error taxonomy. Each kind maps to a CLI exit code in tools/main.cpp:
// config -> 2, data -> 3, numeric/contract/dimension -> 4.
enum class ErrorKind {
    dimension,   // shape or extent mismatch
    contract,    // precondition violated by the caller
    numeric,     // NaN/Inf or numeric breakdown
    vocabulary,  // token id out of range / unknown word
    span,        // subject span out of range
    schedule,    // timestep outside the noise schedule
    state,       // missing checkpoint / uninitialized module
    plan,        // unknown stage tag in a training plan
    parse,       // caption has no recognizable subject chunk
    split,       // not enough records for the requested split
    extraction,  // empty mask or unusable prompt crop
    metric,      // degenerate embedding (zero norm)
    version,     // file format or config-hash mismatch
    config,      // bad run configuration
    data,        // missing or malformed input file
};

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& msg)
        : std::runtime_error(msg), kind_(kind) {}

    ErrorKind kind() const { return kind_; }

private:
    ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& msg) {
    throw Error(kind, msg);
}

} // namespace promptvid
