#pragma once

#include <cstdint>
#include <string>
#include <vector>

// Fixed 66-symbol character inventory: ids 0-9 are digits, 10-35 Latin
// capitals, 36-65 Hangul syllables used on Korean plates.

namespace lpsr {

inline constexpr int kNumClasses = 66;
inline constexpr int kFirstLatin = 10;
inline constexpr int kFirstHangul = 36;

// UTF-8 spelling of a class id. Throws InvalidSpecError for unknown ids.
const std::string& symbol(int class_id);

// Inverse of symbol(); throws InvalidSpecError for unknown symbols.
int class_of(const std::string& symbol);

// Monochrome bitmap of a class, row-major, 1 = ink.
struct Glyph {
    int width = 0;
    int height = 0;
    std::vector<std::uint8_t> ink;

    bool at(int x, int y) const { return ink[static_cast<std::size_t>(y * width + x)] != 0; }
};

const Glyph& glyph(int class_id);

}  // namespace lpsr
