#pragma once

#include <span>
#include <string>
#include <string_view>

namespace svc {

// Shell-style matching with '*' (any run, possibly empty) and '?' (one byte).
bool glob_match(std::string_view pattern, std::string_view text);

// Empty include list selects everything; any exclude match wins.
bool selected_by_patterns(std::string_view name, std::span<const std::string> include,
                          std::span<const std::string> exclude);

}  // namespace svc
