#include "capscope/text.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <map>
#include <utility>

namespace capscope::text {
namespace {

bool is_word_char(char c) {
  const auto u = static_cast<unsigned char>(c);
  return std::isalnum(u) != 0 || c == '\'';
}

char lower(char c) {
  return static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
}

bool ends_with(std::string_view s, std::string_view suffix) {
  return s.size() >= suffix.size() &&
         s.substr(s.size() - suffix.size()) == suffix;
}

// Irregular plurals and forms the suffix rules would get wrong.
const std::map<std::string, std::string, std::less<>>& irregular_plurals() {
  static const std::map<std::string, std::string, std::less<>> table = {
      {"men", "man"},         {"women", "woman"},     {"children", "child"},
      {"people", "person"},   {"persons", "person"},  {"mice", "mouse"},
      {"geese", "goose"},     {"teeth", "tooth"},     {"feet", "foot"},
      {"oxen", "ox"},         {"lice", "louse"},      {"dice", "die"},
      {"knives", "knife"},    {"wives", "wife"},      {"lives", "life"},
      {"leaves", "leaf"},     {"wolves", "wolf"},     {"scarves", "scarf"},
      {"shelves", "shelf"},   {"calves", "calf"},     {"halves", "half"},
      {"loaves", "loaf"},     {"hooves", "hoof"},     {"thieves", "thief"},
      {"elves", "elf"},       {"selves", "self"},     {"wharves", "wharf"},
      {"tomatoes", "tomato"}, {"potatoes", "potato"}, {"heroes", "hero"},
      {"echoes", "echo"},     {"vetoes", "veto"},     {"torpedoes", "torpedo"},
      {"mangoes", "mango"},   {"volcanoes", "volcano"}, {"goes", "go"},
      {"buses", "bus"},       {"gases", "gas"},       {"lenses", "lens"},
      {"quizzes", "quiz"},    {"analyses", "analysis"}, {"crises", "crisis"},
      {"theses", "thesis"},   {"cacti", "cactus"},    {"fungi", "fungus"},
      {"cactuses", "cactus"}, {"funguses", "fungus"},
      {"octopi", "octopus"},  {"menus", "menu"},      {"emus", "emu"},
      {"gnus", "gnu"},        {"tofus", "tofu"},      {"pies", "pie"},
      {"ties", "tie"},        {"lies", "lie"},        {"dies", "die"},
      {"hoes", "hoe"},        {"toes", "toe"},        {"shoes", "shoe"},
      {"canoes", "canoe"},    {"horses", "horse"},    {"houses", "house"},
      {"cookies", "cookie"},  {"movies", "movie"},    {"zombies", "zombie"},
      {"hippies", "hippie"},  {"selfies", "selfie"},  {"brownies", "brownie"},
      {"headaches", "headache"}, {"moustaches", "moustache"},
      {"mustaches", "mustache"}, {"avalanches", "avalanche"},
      {"caches", "cache"},    {"niches", "niche"},    {"gloves", "glove"},
      {"sleeves", "sleeve"},  {"valves", "valve"},    {"curves", "curve"},
      {"olives", "olive"},    {"waves", "wave"},      {"caves", "cave"},
      {"stoves", "stove"},    {"groves", "grove"},    {"doves", "dove"},
      {"axes", "axe"},
  };
  return table;
}

// Words ending in s that are already singular (or have no singular in
// caption usage).
const std::set<std::string, std::less<>>& uninflected() {
  static const std::set<std::string, std::less<>> words = {
      "sheep",     "deer",    "fish",     "series",   "species",  "news",
      "aircraft",  "bison",   "moose",    "salmon",   "trout",    "swine",
      "glasses",   "sunglasses", "eyeglasses", "goggles", "jeans", "pants",
      "shorts",    "trousers", "scissors", "clothes",  "pajamas",  "tights",
      "overalls",  "binoculars", "bus",    "gas",      "lens",     "yes",
      "this",      "his",     "hers",     "its",      "was",      "has",
      "as",        "us",      "always",   "perhaps",  "plus",     "tennis",
      "canvas",    "atlas",   "chaos",    "dais",     "iris",     "bias",
      "alias",     "christmas", "mathematics", "physics", "gymnastics",
      "athletics", "billiards", "darts",  "measles",  "thanks",   "whereas",
      "nevertheless", "is",    "does",    "lots",     "sometimes", "besides",
      "towards",   "afterwards", "upstairs", "downstairs", "outdoors",
      "indoors",   "ourselves", "yourselves", "themselves", "whose",
      "mattress",
  };
  return words;
}

}  // namespace

std::vector<Token> lex(std::string_view text) {
  std::vector<Token> tokens;
  std::size_t i = 0;
  const std::size_t n = text.size();
  while (i < n) {
    while (i < n && !is_word_char(text[i])) ++i;
    if (i >= n) break;
    std::size_t j = i;
    while (j < n) {
      if (is_word_char(text[j])) {
        ++j;
      } else if (text[j] == '-' && j + 1 < n && is_word_char(text[j + 1]) &&
                 j > i) {
        ++j;
      } else {
        break;
      }
    }
    std::size_t b = i;
    std::size_t e = j;
    while (b < e && text[b] == '\'') ++b;
    while (e > b && text[e - 1] == '\'') --e;
    if (b < e) {
      Token t;
      t.begin = b;
      t.end = e;
      t.word.reserve(e - b);
      for (std::size_t k = b; k < e; ++k) t.word.push_back(lower(text[k]));
      tokens.push_back(std::move(t));
    }
    i = j;
  }
  return tokens;
}

std::vector<std::string> lex_words(std::string_view text) {
  std::vector<std::string> words;
  for (auto& t : lex(text)) words.push_back(std::move(t.word));
  return words;
}

const std::set<std::string, std::less<>>& default_stop_words() {
  // The standard 179-word English stop list.
  static const std::set<std::string, std::less<>> words = {
      "i",          "me",        "my",        "myself",    "we",
      "our",        "ours",      "ourselves", "you",       "you're",
      "you've",     "you'll",    "you'd",     "your",      "yours",
      "yourself",   "yourselves", "he",       "him",       "his",
      "himself",    "she",       "she's",     "her",       "hers",
      "herself",    "it",        "it's",      "its",       "itself",
      "they",       "them",      "their",     "theirs",    "themselves",
      "what",       "which",     "who",       "whom",      "this",
      "that",       "that'll",   "these",     "those",     "am",
      "is",         "are",       "was",       "were",      "be",
      "been",       "being",     "have",      "has",       "had",
      "having",     "do",        "does",      "did",       "doing",
      "a",          "an",        "the",       "and",       "but",
      "if",         "or",        "because",   "as",        "until",
      "while",      "of",        "at",        "by",        "for",
      "with",       "about",     "against",   "between",   "into",
      "through",    "during",    "before",    "after",     "above",
      "below",      "to",        "from",      "up",        "down",
      "in",         "out",       "on",        "off",       "over",
      "under",      "again",     "further",   "then",      "once",
      "here",       "there",     "when",      "where",     "why",
      "how",        "all",       "any",       "both",      "each",
      "few",        "more",      "most",      "other",     "some",
      "such",       "no",        "nor",       "not",       "only",
      "own",        "same",      "so",        "than",      "too",
      "very",       "s",         "t",         "can",       "will",
      "just",       "don",       "don't",     "should",    "should've",
      "now",        "d",         "ll",        "m",         "o",
      "re",         "ve",        "y",         "ain",       "aren",
      "aren't",     "couldn",    "couldn't",  "didn",      "didn't",
      "doesn",      "doesn't",   "hadn",      "hadn't",    "hasn",
      "hasn't",     "haven",     "haven't",   "isn",       "isn't",
      "ma",         "mightn",    "mightn't",  "mustn",     "mustn't",
      "needn",      "needn't",   "shan",      "shan't",    "shouldn",
      "shouldn't",  "wasn",      "wasn't",    "weren",     "weren't",
      "won",        "won't",     "wouldn",    "wouldn't",
  };
  return words;
}

bool is_stop_word(std::string_view word) {
  return default_stop_words().contains(word);
}

std::string normalize_word(std::string_view word) {
  std::string w;
  w.reserve(word.size());
  for (char c : word) w.push_back(lower(c));
  if (ends_with(w, "'s")) w.resize(w.size() - 2);

  if (auto it = irregular_plurals().find(w); it != irregular_plurals().end()) {
    return it->second;
  }
  if (uninflected().contains(w) || w.size() <= 3) return w;
  if (w.back() != 's') return w;
  if (ends_with(w, "ss") || ends_with(w, "us") || ends_with(w, "is")) {
    return w;
  }
  // Tokens with digits ("1990s", "4x4s") are left alone.
  if (std::any_of(w.begin(), w.end(),
                  [](char c) { return std::isdigit(static_cast<unsigned char>(c)); })) {
    return w;
  }

  const auto drop = [&](std::size_t n) { return w.substr(0, w.size() - n); };
  if (ends_with(w, "ies")) {
    return drop(3) + "y";
  }
  if (ends_with(w, "sses") || ends_with(w, "shes") || ends_with(w, "ches") ||
      ends_with(w, "xes") || ends_with(w, "zzes")) {
    return drop(2);
  }
  if (ends_with(w, "ves")) {
    return drop(1);
  }
  return drop(1);
}

std::string_view strip_prompt(std::string_view text, std::string_view prompt) {
  std::size_t lead = 0;
  while (lead < text.size() &&
         std::isspace(static_cast<unsigned char>(text[lead]))) {
    ++lead;
  }
  text.remove_prefix(lead);
  if (prompt.empty() || text.size() < prompt.size() ||
      text.substr(0, prompt.size()) != prompt) {
    return text;
  }
  if (text.size() > prompt.size() && is_word_char(text[prompt.size()]) &&
      is_word_char(prompt.back())) {
    return text;  // prompt ends mid-word
  }
  return text.substr(prompt.size());
}

std::set<std::string> tokenize_caption(std::string_view text,
                                       std::string_view prompt) {
  std::set<std::string> out;
  for (const auto& tok : lex(strip_prompt(text, prompt))) {
    if (is_stop_word(tok.word)) continue;
    std::string norm = normalize_word(tok.word);
    if (norm.empty() || is_stop_word(norm)) continue;
    out.insert(std::move(norm));
  }
  return out;
}

}  // namespace capscope::text
