#pragma once

#include <stdexcept>
#include <string>

namespace deltashift {

enum class error_kind {
    validation,      // bad arguments, invariant violations, misaligned maps
    io,              // open/read/write failures
    corrupt_header,  // bad magic, version or structural field
    truncated,       // payload shorter than the header promises
    duplicate_name,
    checksum,        // CRC-64 mismatch
    numerical,       // non-finite values, degenerate divisions
};

const char * to_string(error_kind kind);

class error : public std::runtime_error {
public:
    error(error_kind kind, const std::string & msg)
        : std::runtime_error(msg), kind_(kind) {}

    error_kind kind() const noexcept { return kind_; }

private:
    error_kind kind_;
};

[[noreturn]] inline void fail(error_kind kind, const std::string & msg) {
    throw error(kind, msg);
}

inline void require(bool cond, const std::string & msg) {
    if (!cond) {
        throw error(error_kind::validation, msg);
    }
}

} // namespace deltashift
