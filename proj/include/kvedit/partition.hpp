// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "kvedit/errors.hpp"

namespace kvedit {

/// Split of token positions into the edited region (fg) and the preserved
/// region (bg). Both lists are strictly increasing, disjoint and together
/// cover 0..P-1.
struct TokenPartition {
    std::vector<std::size_t> fg;
    std::vector<std::size_t> bg;

    std::size_t tokens() const { return fg.size() + bg.size(); }

    /// Per-position flag, 1 for foreground.
    std::vector<char> fg_flags() const {
        std::vector<char> f(tokens(), 0);
        for (std::size_t p : fg) f.at(p) = 1;
        return f;
    }

    static TokenPartition from_flags(const std::vector<char>& is_fg) {
        TokenPartition p;
        for (std::size_t k = 0; k < is_fg.size(); ++k) (is_fg[k] ? p.fg : p.bg).push_back(k);
        return p;
    }

    void validate(std::size_t num_tokens) const {
        if (tokens() != num_tokens)
            throw ShapeError("partition covers " + std::to_string(tokens()) + " tokens, expected " +
                             std::to_string(num_tokens));
        std::vector<char> seen(num_tokens, 0);
        for (const auto* list : {&fg, &bg}) {
            for (std::size_t r = 0; r < list->size(); ++r) {
                std::size_t p = (*list)[r];
                if (p >= num_tokens || seen[p])
                    throw ShapeError("partition: position " + std::to_string(p) + " out of range or repeated");
                if (r && p <= (*list)[r - 1]) throw ShapeError("partition: positions must be strictly increasing");
                seen[p] = 1;
            }
        }
    }

    friend bool operator==(const TokenPartition&, const TokenPartition&) = default;
};

} // namespace kvedit
