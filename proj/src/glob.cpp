#include "svc/glob.hpp"

namespace svc {

bool glob_match(std::string_view pattern, std::string_view text) {
    std::size_t p = 0, t = 0;
    std::size_t star = std::string_view::npos, mark = 0;
    while (t < text.size()) {
        if (p < pattern.size() && (pattern[p] == '?' || pattern[p] == text[t])) {
            ++p;
            ++t;
        } else if (p < pattern.size() && pattern[p] == '*') {
            star = p++;
            mark = t;
        } else if (star != std::string_view::npos) {
            p = star + 1;
            t = ++mark;
        } else {
            return false;
        }
    }
    while (p < pattern.size() && pattern[p] == '*') ++p;
    return p == pattern.size();
}

bool selected_by_patterns(std::string_view name, std::span<const std::string> include,
                          std::span<const std::string> exclude) {
    for (const std::string& pattern : exclude) {
        if (glob_match(pattern, name)) return false;
    }
    if (include.empty()) return true;
    for (const std::string& pattern : include) {
        if (glob_match(pattern, name)) return true;
    }
    return false;
}

}  // namespace svc
