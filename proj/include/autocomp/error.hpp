#pragma once

#include <stdexcept>
#include <string>
#include <utility>

namespace autocomp {

// All recoverable failures carry a stable machine-readable code plus a human
// message. The CLI maps these to single-line JSON errors on stderr.
class Error : public std::runtime_error {
public:
    Error(std::string code, const std::string& message)
        : std::runtime_error(message), code_(std::move(code)) {}

    const std::string& code() const { return code_; }

private:
    std::string code_;
};

[[noreturn]] inline void fail(const std::string& code, const std::string& message) {
    throw Error(code, message);
}

inline void require(bool ok, const std::string& code, const std::string& message) {
    if (!ok) fail(code, message);
}

// Hot paths use this so the message expression is only evaluated on failure.
#define AUTOCOMP_REQUIRE(cond, code, msg)          \
    do {                                           \
        if (!(cond)) ::autocomp::fail((code), (msg)); \
    } while (0)

}  // namespace autocomp
