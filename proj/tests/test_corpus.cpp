#include <algorithm>
#include <set>
#include <string>
#include <vector>

#include "doctest.h"

#include "capscope/corpus.hpp"
#include "capscope/error.hpp"
#include "capscope/random.hpp"
#include "capscope/text.hpp"
#include "capscope_ref/reference.hpp"

using namespace capscope;
using corpus::CaptionRecord;

namespace {

const char* kVocab[] = {"dog",  "dogs", "ball", "balls", "grass", "the", "a",     "tree",
                        "fish", "man",  "men",  "hat",   "red",   "on",  "water", "boat"};

std::vector<CaptionRecord> random_captions(Rng& rng, std::size_t n) {
  std::vector<CaptionRecord> out;
  for (std::size_t i = 0; i < n; ++i) {
    std::string text = "a picture of";
    const auto len = 1 + rng.below(9);
    for (std::size_t k = 0; k < len; ++k) text += std::string(" ") + kVocab[rng.below(16)];
    out.push_back(CaptionRecord::make("img" + std::to_string(i), text, "a picture of",
                                      rng.uniform()));
  }
  return out;
}

std::vector<std::set<std::string>> word_sets(const std::vector<CaptionRecord>& cs) {
  std::vector<std::set<std::string>> out;
  for (const auto& c : cs) out.push_back(c.normalized_words);
  return out;
}

}  // namespace

TEST_CASE("caption record words are normalized and stop-word free") {
  const auto r = CaptionRecord::make("x", "a picture of the dogs and a ball", "a picture of", 0.3);
  CHECK(r.normalized_words == std::set<std::string>{"dog", "ball"});
  const auto back = corpus::record_from_json(corpus::record_to_json(r));
  CHECK(back.image_id == "x");
  CHECK(back.normalized_words == r.normalized_words);
  CHECK(back.itm_score == r.itm_score);
}

TEST_CASE("co-occurrence matches the pair enumeration oracle") {
  Rng rng(11);
  for (int round = 0; round < 20; ++round) {
    const auto captions = random_captions(rng, 1 + rng.below(60));
    const auto g = corpus::build_cooccurrence(captions);
    const auto expect = ref::cooccurrence(word_sets(captions));
    CHECK(g.nodes == expect.nodes);
    CHECK(g.edges == expect.edges);
  }
}

TEST_CASE("co-occurrence invariants") {
  Rng rng(12);
  auto captions = random_captions(rng, 300);
  const auto g = corpus::build_cooccurrence(captions);
  for (const auto& [pair, count] : g.edges) {
    CHECK(pair.first < pair.second);
    REQUIRE(g.nodes.count(pair.first));
    REQUIRE(g.nodes.count(pair.second));
    CHECK(count >= 1);
    CHECK(count <= std::min(g.nodes.at(pair.first), g.nodes.at(pair.second)));
  }
  for (const auto& [w, c] : g.nodes) {
    CHECK_FALSE(text::is_stop_word(w));
    CHECK(c >= 1);
  }
  // Permutation invariance.
  for (int i = 0; i < 5; ++i) {
    for (std::size_t k = captions.size() - 1; k > 0; --k) {
      std::swap(captions[k], captions[rng.below(k + 1)]);
    }
    CHECK(corpus::build_cooccurrence(captions) == g);
  }
}

TEST_CASE("repeated words count once per caption") {
  const std::vector<std::set<std::string>> sets = {{"dog", "ball"}, {"dog"}};
  const auto g = corpus::build_cooccurrence(std::span<const std::set<std::string>>(sets));
  const auto r = CaptionRecord::make("a", "dog dog dogs ball ball", "", 0.5);
  const auto g2 = corpus::build_cooccurrence(std::span<const CaptionRecord>(&r, 1));
  CHECK(g2.nodes.at("dog") == 1);
  CHECK(g2.edges.at({"ball", "dog"}) == 1);
  CHECK(g.nodes.at("dog") == 2);
  CHECK(g.total_edge_weight() == 1);
}

TEST_CASE("graph filter keeps endpoints") {
  Rng rng(13);
  const auto g = corpus::build_cooccurrence(random_captions(rng, 200));
  for (std::int64_t mn : {1, 5, 20, 60}) {
    for (std::int64_t me : {1, 3, 10}) {
      const auto f = corpus::filter_graph(g, mn, me);
      for (const auto& [w, c] : f.nodes) CHECK(c >= mn);
      for (const auto& [p, c] : f.edges) {
        CHECK(c >= me);
        CHECK(f.nodes.count(p.first));
        CHECK(f.nodes.count(p.second));
      }
    }
  }
}

TEST_CASE("graph json round trip") {
  Rng rng(14);
  const auto g = corpus::build_cooccurrence(random_captions(rng, 50));
  const auto j = corpus::graph_to_json(g);
  CHECK(corpus::graph_from_json(j) == g);
  CHECK(j.dump() == corpus::graph_to_json(corpus::graph_from_json(j)).dump());
}

TEST_CASE("histogram conservation and oracle") {
  Rng rng(15);
  for (std::size_t bins : {1u, 2u, 7u, 20u}) {
    std::vector<double> scores(500);
    for (auto& s : scores) s = rng.uniform();
    scores.push_back(0.0);
    scores.push_back(1.0);
    scores.push_back(0.5);
    const auto h = corpus::itm_histogram(scores, bins);
    CHECK(h.counts == ref::histogram(scores, bins));
    std::int64_t total = 0;
    for (auto c : h.counts) total += c;
    CHECK(total == static_cast<std::int64_t>(scores.size()));
    REQUIRE(h.bin_edges.size() == bins + 1);
    CHECK(h.bin_edges.front() == 0.0);
    CHECK(h.bin_edges.back() == 1.0);
    for (std::size_t i = 1; i < h.bin_edges.size(); ++i) CHECK(h.bin_edges[i] > h.bin_edges[i - 1]);
  }
  const std::vector<double> bad = {0.2, 1.5};
  CHECK_THROWS_AS(corpus::itm_histogram(bad, 4), ValidationError);
  CHECK_THROWS_AS(corpus::itm_histogram(std::vector<double>{0.1}, 0), ValidationError);
}

TEST_CASE("portions match oracle and widen monotonically") {
  Rng rng(16);
  const auto captions = random_captions(rng, 200);
  const auto p = corpus::word_portions_in_range(captions, 0.2, 0.6);
  CHECK(p == ref::portions(captions, 0.2, 0.6));
  const auto wider = corpus::word_portions_in_range(captions, 0.1, 0.7);
  for (const auto& [w, v] : p) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
    CHECK(wider.at(w) >= v);
  }
  const auto all = corpus::word_portions_in_range(captions, 0.0, 1.0);
  for (const auto& [w, v] : all) CHECK(v == 1.0);
}
