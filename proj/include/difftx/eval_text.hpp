#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "difftx/alphabet.hpp"
#include "difftx/errors.hpp"

namespace difftx {

struct EditResult {
  std::size_t distance = 0;
  std::size_t substitutions = 0;
  std::size_t insertions = 0;
  std::size_t deletions = 0;
};

/// Unit-cost Levenshtein distance with one optimal S/I/D split. The
/// backtrace prefers substitution (or match), then insertion, then deletion.
template <typename T>
EditResult edit_distance(std::span<const T> ref, std::span<const T> hyp) {
  const std::size_t n = ref.size(), m = hyp.size();
  std::vector<std::size_t> d((n + 1) * (m + 1));
  auto at = [&](std::size_t i, std::size_t j) -> std::size_t& { return d[i * (m + 1) + j]; };
  for (std::size_t i = 0; i <= n; ++i) at(i, 0) = i;
  for (std::size_t j = 0; j <= m; ++j) at(0, j) = j;
  for (std::size_t i = 1; i <= n; ++i)
    for (std::size_t j = 1; j <= m; ++j)
      at(i, j) = std::min({at(i - 1, j - 1) + (ref[i - 1] == hyp[j - 1] ? 0 : 1), at(i, j - 1) + 1, at(i - 1, j) + 1});

  EditResult r;
  r.distance = at(n, m);
  std::size_t i = n, j = m;
  while (i > 0 || j > 0) {
    if (i > 0 && j > 0 && at(i, j) == at(i - 1, j - 1) + (ref[i - 1] == hyp[j - 1] ? 0 : 1)) {
      if (ref[i - 1] != hyp[j - 1]) ++r.substitutions;
      --i, --j;
    } else if (j > 0 && at(i, j) == at(i, j - 1) + 1) {
      ++r.insertions;
      --j;
    } else {
      ++r.deletions;
      --i;
    }
  }
  return r;
}

template <typename T>
EditResult edit_distance(const std::vector<T>& ref, const std::vector<T>& hyp) {
  return edit_distance(std::span<const T>(ref), std::span<const T>(hyp));
}

struct ErrorReport {
  std::size_t substitutions = 0;
  std::size_t insertions = 0;
  std::size_t deletions = 0;
  std::size_t ref_length = 0;
  double rate = 0.0;  // may exceed 1

  std::size_t errors() const noexcept { return substitutions + insertions + deletions; }

  ErrorReport& operator+=(const ErrorReport& o) {
    substitutions += o.substitutions;
    insertions += o.insertions;
    deletions += o.deletions;
    ref_length += o.ref_length;
    rate = ref_length == 0 ? 0.0 : static_cast<double>(errors()) / static_cast<double>(ref_length);
    return *this;
  }
};

inline std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> words;
  std::string cur;
  for (char ch : text) {
    if (ch == ' ' || ch == '\t' || ch == '\n' || ch == '\r') {
      if (!cur.empty()) words.push_back(std::move(cur)), cur.clear();
    } else {
      cur.push_back(ch);
    }
  }
  if (!cur.empty()) words.push_back(std::move(cur));
  return words;
}

namespace detail {
template <typename T>
ErrorReport make_report(const std::vector<T>& ref, const std::vector<T>& hyp, const char* what) {
  if (ref.empty()) throw ParameterError(std::string(what) + " is undefined for an empty reference");
  const EditResult e = edit_distance(ref, hyp);
  ErrorReport r{e.substitutions, e.insertions, e.deletions, ref.size(), 0.0};
  r.rate = static_cast<double>(r.errors()) / static_cast<double>(r.ref_length);
  return r;
}
}  // namespace detail

/// Word error rate over whitespace-separated tokens of normalized text.
inline ErrorReport wer(std::string_view ref, std::string_view hyp) {
  return detail::make_report(split_words(normalize_text(ref)), split_words(normalize_text(hyp)), "WER");
}

/// Character error rate, spaces included, on normalized text.
inline ErrorReport cer(std::string_view ref, std::string_view hyp) {
  const std::string r = normalize_text(ref), h = normalize_text(hyp);
  return detail::make_report(std::vector<char>(r.begin(), r.end()), std::vector<char>(h.begin(), h.end()), "CER");
}

struct CorpusScore {
  ErrorReport wer;
  ErrorReport cer;
};

/// Corpus-level rates: total errors over total reference length.
inline CorpusScore score_corpus(std::span<const std::string> refs, std::span<const std::string> hyps) {
  if (refs.size() != hyps.size()) throw ShapeError("score_corpus: reference/hypothesis count mismatch");
  CorpusScore s;
  for (std::size_t i = 0; i < refs.size(); ++i) {
    s.wer += wer(refs[i], hyps[i]);
    s.cer += cer(refs[i], hyps[i]);
  }
  return s;
}

}  // namespace difftx
