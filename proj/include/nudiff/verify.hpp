#pragma once

#include <string>
#include <vector>

namespace nudiff {

// Acceptance suite names, in execution order for "all".
std::vector<std::string> verify_suite_names();

// Runs one named property suite (or "all"), printing one [PASS]/[FAIL] line
// per property to stdout. Returns the number of failed properties. Throws
// std::invalid_argument on an unknown name.
int run_verify_suite(const std::string& name);

}  // namespace nudiff
