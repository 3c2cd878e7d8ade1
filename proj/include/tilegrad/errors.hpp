#pragma once

#include <stdexcept>
#include <string>

namespace tilegrad {

/// Base class for everything thrown by this library.
class error : public std::runtime_error {
public:
    explicit error(const std::string& what) : std::runtime_error(what) {}
};

/// Operand dimensions do not fit the requested operation.
class shape_error : public error {
public:
    explicit shape_error(const std::string& what) : error("shape error: " + what) {}
};

/// User-supplied configuration (model, grid, profile, roster) is unusable.
class config_error : public error {
public:
    explicit config_error(const std::string& what) : error("configuration error: " + what) {}
};

/// An internal plan invariant failed to hold; indicates a bug, not bad input.
class plan_error : public error {
public:
    explicit plan_error(const std::string& what) : error("plan invariant violation: " + what) {}
};

/// Malformed text input (model config, roster file); carries a line number.
class parse_error : public error {
public:
    parse_error(const std::string& file, int line, const std::string& what)
        : error("parse error: " + file + ":" + std::to_string(line) + ": " + what),
          line_number(line) {}
    int line_number;
};

/// Malformed binary file (bad magic, version, truncation).
class format_error : public error {
public:
    explicit format_error(const std::string& what) : error("format error: " + what) {}
};

/// Replicated state diverged across tiles (e.g. post-broadcast weight
/// checksums disagree). Fatal: the cluster no longer computes one model.
class consistency_error : public error {
public:
    explicit consistency_error(const std::string& what) : error("consistency error: " + what) {}
};

/// Transport failure: connection loss, malformed frame, checksum mismatch.
class transport_error : public error {
public:
    explicit transport_error(const std::string& what) : error("transport error: " + what) {}
};

/// A blocking receive exceeded its deadline.
class timeout_error : public transport_error {
public:
    explicit timeout_error(const std::string& what) : transport_error("timeout: " + what) {}
};

} // namespace tilegrad
