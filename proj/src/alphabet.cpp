#include "lpsr/alphabet.hpp"

#include <array>
#include <map>

#include "lpsr/errors.hpp"

namespace lpsr {

namespace {

using Rows = std::vector<const char*>;

Glyph from_rows(const Rows& rows) {
    Glyph g;
    g.height = static_cast<int>(rows.size());
    g.width = static_cast<int>(std::char_traits<char>::length(rows.front()));
    for (const char* r : rows)
        for (int x = 0; x < g.width; ++x) g.ink.push_back(r[x] == '#');
    return g;
}

// 5x7 digits and Latin capitals.
const std::array<Rows, 36> kLatin = {{
    {".###.", "#...#", "#..##", "#.#.#", "##..#", "#...#", ".###."},
    {"..#..", ".##..", "..#..", "..#..", "..#..", "..#..", ".###."},
    {".###.", "#...#", "....#", "...#.", "..#..", ".#...", "#####"},
    {"#####", "...#.", "..#..", "...#.", "....#", "#...#", ".###."},
    {"...#.", "..##.", ".#.#.", "#..#.", "#####", "...#.", "...#."},
    {"#####", "#....", "####.", "....#", "....#", "#...#", ".###."},
    {"..##.", ".#...", "#....", "####.", "#...#", "#...#", ".###."},
    {"#####", "....#", "...#.", "..#..", ".#...", ".#...", ".#..."},
    {".###.", "#...#", "#...#", ".###.", "#...#", "#...#", ".###."},
    {".###.", "#...#", "#...#", ".####", "....#", "...#.", ".##.."},
    {".###.", "#...#", "#...#", "#####", "#...#", "#...#", "#...#"},
    {"####.", "#...#", "#...#", "####.", "#...#", "#...#", "####."},
    {".###.", "#...#", "#....", "#....", "#....", "#...#", ".###."},
    {"###..", "#..#.", "#...#", "#...#", "#...#", "#..#.", "###.."},
    {"#####", "#....", "#....", "####.", "#....", "#....", "#####"},
    {"#####", "#....", "#....", "####.", "#....", "#....", "#...."},
    {".###.", "#...#", "#....", "#.###", "#...#", "#...#", ".####"},
    {"#...#", "#...#", "#...#", "#####", "#...#", "#...#", "#...#"},
    {".###.", "..#..", "..#..", "..#..", "..#..", "..#..", ".###."},
    {"..###", "...#.", "...#.", "...#.", "...#.", "#..#.", ".##.."},
    {"#...#", "#..#.", "#.#..", "##...", "#.#..", "#..#.", "#...#"},
    {"#....", "#....", "#....", "#....", "#....", "#....", "#####"},
    {"#...#", "##.##", "#.#.#", "#.#.#", "#...#", "#...#", "#...#"},
    {"#...#", "#...#", "##..#", "#.#.#", "#..##", "#...#", "#...#"},
    {".###.", "#...#", "#...#", "#...#", "#...#", "#...#", ".###."},
    {"####.", "#...#", "#...#", "####.", "#....", "#....", "#...."},
    {".###.", "#...#", "#...#", "#...#", "#.#.#", "#..#.", ".##.#"},
    {"####.", "#...#", "#...#", "####.", "#.#..", "#..#.", "#...#"},
    {".####", "#....", "#....", ".###.", "....#", "....#", "####."},
    {"#####", "..#..", "..#..", "..#..", "..#..", "..#..", "..#.."},
    {"#...#", "#...#", "#...#", "#...#", "#...#", "#...#", ".###."},
    {"#...#", "#...#", "#...#", "#...#", "#...#", ".#.#.", "..#.."},
    {"#...#", "#...#", "#...#", "#.#.#", "#.#.#", "#.#.#", ".#.#."},
    {"#...#", "#...#", ".#.#.", "..#..", ".#.#.", "#...#", "#...#"},
    {"#...#", "#...#", ".#.#.", "..#..", "..#..", "..#..", "..#.."},
    {"#####", "....#", "...#.", "..#..", ".#...", "#....", "#####"},
}};

// 5x5 initial consonants.
const std::map<char, Rows> kConsonants = {
    {'g', {"#####", "....#", "....#", "....#", "....#"}},  // ㄱ
    {'n', {"#....", "#....", "#....", "#....", "#####"}},  // ㄴ
    {'d', {"#####", "#....", "#....", "#....", "#####"}},  // ㄷ
    {'r', {"#####", "....#", "#####", "#....", "#####"}},  // ㄹ
    {'m', {"#####", "#...#", "#...#", "#...#", "#####"}},  // ㅁ
    {'b', {"#...#", "#...#", "#####", "#...#", "#####"}},  // ㅂ
    {'s', {"..#..", "..#..", ".#.#.", "#...#", "#...#"}},  // ㅅ
    {'o', {".###.", "#...#", "#...#", "#...#", ".###."}},  // ㅇ
    {'j', {"#####", "..#..", ".#.#.", "#...#", "#...#"}},  // ㅈ
};

struct Syllable {
    const char* utf8;
    char consonant;
    char vowel;  // 'a' = ㅏ, 'e' = ㅓ, 'o' = ㅗ, 'u' = ㅜ
};

const std::array<Syllable, 30> kHangul = {{
    {"가", 'g', 'a'}, {"나", 'n', 'a'}, {"다", 'd', 'a'}, {"라", 'r', 'a'}, {"마", 'm', 'a'},
    {"거", 'g', 'e'}, {"너", 'n', 'e'}, {"더", 'd', 'e'}, {"러", 'r', 'e'}, {"머", 'm', 'e'},
    {"버", 'b', 'e'}, {"서", 's', 'e'}, {"어", 'o', 'e'}, {"저", 'j', 'e'}, {"고", 'g', 'o'},
    {"노", 'n', 'o'}, {"도", 'd', 'o'}, {"로", 'r', 'o'}, {"모", 'm', 'o'}, {"보", 'b', 'o'},
    {"소", 's', 'o'}, {"오", 'o', 'o'}, {"조", 'j', 'o'}, {"구", 'g', 'u'}, {"누", 'n', 'u'},
    {"두", 'd', 'u'}, {"루", 'r', 'u'}, {"무", 'm', 'u'}, {"부", 'b', 'u'}, {"수", 's', 'u'},
}};

// Composes an 8x9 syllable: vertical vowels sit right of the consonant,
// horizontal vowels below it.
Glyph compose(const Syllable& s) {
    Glyph g;
    g.width = 8;
    g.height = 9;
    g.ink.assign(72, 0);
    auto set = [&](int x, int y) { g.ink[static_cast<std::size_t>(y * 8 + x)] = 1; };
    const Rows& c = kConsonants.at(s.consonant);
    const bool vertical = s.vowel == 'a' || s.vowel == 'e';
    const int ox = vertical ? 0 : 1;
    const int oy = vertical ? 2 : 0;
    for (int y = 0; y < 5; ++y)
        for (int x = 0; x < 5; ++x)
            if (c[static_cast<std::size_t>(y)][x] == '#') set(ox + x, oy + y);
    switch (s.vowel) {
        case 'a':
            for (int y = 0; y < 9; ++y) set(6, y);
            set(7, 4);
            break;
        case 'e':
            for (int y = 0; y < 9; ++y) set(7, y);
            set(6, 4);
            set(5, 4);
            break;
        case 'o':
            for (int x = 0; x < 8; ++x) set(x, 8);
            set(3, 7);
            set(4, 7);
            set(3, 6);
            set(4, 6);
            break;
        case 'u':
            for (int x = 0; x < 8; ++x) set(x, 6);
            set(3, 7);
            set(4, 7);
            set(3, 8);
            set(4, 8);
            break;
        default:
            break;
    }
    return g;
}

struct Table {
    std::vector<std::string> symbols;
    std::vector<Glyph> glyphs;
    std::map<std::string, int> index;

    Table() {
        const char* latin = "0123456789ABCDEFGHIJKLMNOPQRSTUVWXYZ";
        for (int i = 0; i < 36; ++i) {
            symbols.emplace_back(1, latin[i]);
            glyphs.push_back(from_rows(kLatin[static_cast<std::size_t>(i)]));
        }
        for (const auto& s : kHangul) {
            symbols.emplace_back(s.utf8);
            glyphs.push_back(compose(s));
        }
        for (int i = 0; i < static_cast<int>(symbols.size()); ++i) index[symbols[static_cast<std::size_t>(i)]] = i;
    }
};

const Table& table() {
    static const Table t;
    return t;
}

void check_id(int class_id) {
    if (class_id < 0 || class_id >= kNumClasses)
        throw InvalidSpecError("unknown class id " + std::to_string(class_id));
}

}  // namespace

const std::string& symbol(int class_id) {
    check_id(class_id);
    return table().symbols[static_cast<std::size_t>(class_id)];
}

int class_of(const std::string& s) {
    auto it = table().index.find(s);
    if (it == table().index.end()) throw InvalidSpecError("unknown symbol '" + s + "'");
    return it->second;
}

const Glyph& glyph(int class_id) {
    check_id(class_id);
    return table().glyphs[static_cast<std::size_t>(class_id)];
}

}  // namespace lpsr
