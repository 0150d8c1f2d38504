#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace axn {

enum class Errc {
    io,
    format,
    invalid_matrix,
    dimension_mismatch,
    size_mismatch,
    budget_exhausted,
    backend_failure,
    spawn_failure,
    handshake_mismatch,
    invalid_spec,
    degenerate_input,
    degenerate_distribution,
    lambda_out_of_range,
    non_finite_loss,
    config,
};

std::string_view to_string(Errc code) noexcept;

/// Every failure in the library surfaces as this exception; `code()` is the
/// machine-checkable category and `what()` carries the diagnostic.
class Error : public std::runtime_error {
public:
    Error(Errc code, const std::string& message)
        : std::runtime_error(std::string(to_string(code)) + ": " + message), code_(code) {}

    Errc code() const noexcept { return code_; }

private:
    Errc code_;
};

}  // namespace axn
