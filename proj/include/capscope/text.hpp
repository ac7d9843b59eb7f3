#pragma once

#include <cstddef>
#include <set>
#include <string>
#include <string_view>
#include <vector>

namespace capscope::text {

/// A lowercase word and its byte span in the source text.
struct Token {
  std::string word;
  std::size_t begin = 0;
  std::size_t end = 0;
};

/// Splits text into lowercase word tokens. Words are maximal runs of ASCII
/// letters, digits, apostrophes and inner hyphens; everything else separates.
std::vector<Token> lex(std::string_view text);
std::vector<std::string> lex_words(std::string_view text);

/// Identifier of the shipped stop-word list, recorded in dataset metadata.
inline constexpr std::string_view kStopWordsVersion = "english-179-v1";

const std::set<std::string, std::less<>>& default_stop_words();
bool is_stop_word(std::string_view word);

/// Lowercases and singularizes plural nouns with a rule table. Idempotent;
/// forms not covered by the table pass through lowercased.
std::string normalize_word(std::string_view word);

/// Removes `prompt` from the front of `text` when it is an exact prefix ending
/// on a word boundary. Returns the remainder (or `text` unchanged).
std::string_view strip_prompt(std::string_view text, std::string_view prompt);

/// Prompt-stripped, punctuation-free, stop-word-free set of normalized words.
std::set<std::string> tokenize_caption(std::string_view text,
                                       std::string_view prompt);

}  // namespace capscope::text
