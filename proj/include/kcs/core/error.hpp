#pragma once

#include <stdexcept>
#include <string>

namespace kcs {

/// Base error for the toolkit. `code` is a short machine-readable tag that the
/// CLI copies into its error record.
class Error : public std::runtime_error {
public:
    Error(std::string code, const std::string& message)
        : std::runtime_error(message), code_(std::move(code)) {}

    const std::string& code() const noexcept { return code_; }

private:
    std::string code_;
};

inline void require(bool condition, const char* code, const std::string& message) {
    if (!condition) throw Error(code, message);
}

}  // namespace kcs
