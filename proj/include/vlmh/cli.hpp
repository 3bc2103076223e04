#pragma once

#include <memory>
#include <ostream>
#include <string>
#include <vector>

#include "vlmh/gateway.hpp"

namespace vlmh {

inline constexpr int kExitOk = 0;
inline constexpr int kExitDomainError = 1;
inline constexpr int kExitUsage = 2;

/// Parses `args` (without the program name) and runs one subcommand.
/// `transport` replaces the HTTP client, which tests use to observe or forbid
/// network traffic.
int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err,
             std::shared_ptr<Transport> transport = nullptr);

}  // namespace vlmh
