#pragma once

#include <array>
#include <string>
#include <string_view>
#include <vector>

#include "difftx/diffusion.hpp"
#include "difftx/errors.hpp"

namespace difftx {

/// 29 symbols: A-Z, space, apostrophe, and a padding symbol (index 28,
/// rendered '_' only in raw dumps).
class Alphabet {
 public:
  static constexpr int kSize = 29;
  static constexpr int kPad = 28;
  static constexpr char kPadChar = '_';

  static constexpr char symbol(int idx) {
    if (idx < 26) return static_cast<char>('A' + idx);
    if (idx == 26) return ' ';
    if (idx == 27) return '\'';
    return kPadChar;
  }

  /// -1 for characters outside the alphabet (the pad glyph included).
  static constexpr int index_of(char ch) {
    if (ch >= 'A' && ch <= 'Z') return ch - 'A';
    if (ch >= 'a' && ch <= 'z') return ch - 'a';
    if (ch == ' ') return 26;
    if (ch == '\'') return 27;
    return -1;
  }

  /// Text -> tokens, right-padded to `length` (no padding when length < 0).
  static TokenSeq encode(std::string_view text, int length = -1) {
    if (length >= 0 && static_cast<int>(text.size()) > length)
      throw EncodingError("text of " + std::to_string(text.size()) +
                          " characters does not fit in sequence length " + std::to_string(length));
    std::vector<int> toks;
    toks.reserve(length >= 0 ? static_cast<std::size_t>(length) : text.size());
    for (char ch : text) {
      const int idx = index_of(ch);
      if (idx < 0) throw EncodingError(std::string("character '") + ch + "' is not in the alphabet");
      toks.push_back(idx);
    }
    while (length >= 0 && static_cast<int>(toks.size()) < length) toks.push_back(kPad);
    return TokenSeq(std::move(toks), kSize);
  }

  /// Raw rendering, pads shown as '_'.
  static std::string render(const TokenSeq& x) {
    std::string out;
    out.reserve(static_cast<std::size_t>(x.size()));
    for (int tok : x.tokens) out.push_back(symbol(tok));
    return out;
  }
};

/// Maps tokens to text. Pad symbols are dropped wherever they occur, so a
/// trailing pad run disappears and a stray interior pad counts as a deletion.
inline std::string tokens_to_text(const TokenSeq& x) {
  std::string out;
  for (int tok : x.tokens) {
    if (tok < 0 || tok >= Alphabet::kSize) throw EncodingError("token outside alphabet");
    if (tok != Alphabet::kPad) out.push_back(Alphabet::symbol(tok));
  }
  return out;
}

/// Uppercase, single spaces, no leading/trailing space.
inline std::string normalize_text(std::string_view text) {
  std::string out;
  bool pending_space = false;
  for (char ch : text) {
    if (ch == ' ' || ch == '\t' || ch == '\n' || ch == '\r') {
      pending_space = !out.empty();
      continue;
    }
    if (pending_space) out.push_back(' ');
    pending_space = false;
    out.push_back(ch >= 'a' && ch <= 'z' ? static_cast<char>(ch - 'a' + 'A') : ch);
  }
  return out;
}

}  // namespace difftx
