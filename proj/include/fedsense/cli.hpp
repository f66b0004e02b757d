#pragma once

#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "fedsense/sim.hpp"

namespace fedsense::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitRuntime = 1;
inline constexpr int kExitValidation = 2;

// args excludes the program name.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

// 1-based line of the key addressed by a JSON pointer inside the config
// text, or nullopt when it cannot be located.
std::optional<std::size_t> locate_pointer(const std::string& text, const std::string& pointer);

// "latency:gsfs<fedopt<fedavg" or "energy:gsfs>fedopt>fedavg". Metrics:
// latency (client response latency), energy, accuracy, f1, uploads, or any
// comparison column name.
struct OrderAssertion {
  std::string metric;
  std::vector<Strategy> chain;
  std::vector<char> ops;  // '<' or '>' between neighbours
};

OrderAssertion parse_order_assertion(const std::string& text);
// Empty when the assertion holds, otherwise a description of the violation.
std::string check_order(const OrderAssertion& a, const std::vector<ComparisonRow>& rows);

void configure_logging();

}  // namespace fedsense::cli
