#include "capscope/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_map>

#include "capscope/error.hpp"
#include "capscope/text.hpp"

namespace capscope::corpus {

CaptionRecord CaptionRecord::make(std::string image_id, std::string text,
                                  std::string prompt, double itm_score) {
  CaptionRecord r;
  r.normalized_words = text::tokenize_caption(text, prompt);
  r.image_id = std::move(image_id);
  r.text = std::move(text);
  r.prompt = std::move(prompt);
  r.itm_score = itm_score;
  return r;
}

std::int64_t CoOccurrenceGraph::total_edge_weight() const {
  std::int64_t total = 0;
  for (const auto& [pair, count] : edges) total += count;
  return total;
}

CoOccurrenceGraph build_cooccurrence(std::span<const std::set<std::string>> word_sets) {
  // Intern the vocabulary so the hot loop works on integer ids.
  std::vector<std::string> vocab;
  {
    std::set<std::string> all;
    for (const auto& ws : word_sets) all.insert(ws.begin(), ws.end());
    vocab.assign(all.begin(), all.end());
  }
  std::unordered_map<std::string, std::uint32_t> ids;
  ids.reserve(vocab.size());
  for (std::uint32_t i = 0; i < vocab.size(); ++i) ids.emplace(vocab[i], i);

  const auto n = static_cast<std::int64_t>(word_sets.size());
  std::vector<std::int64_t> node_counts(vocab.size(), 0);
  std::unordered_map<std::uint64_t, std::int64_t> edge_counts;

#pragma omp parallel
  {
    std::vector<std::int64_t> local_nodes(vocab.size(), 0);
    std::unordered_map<std::uint64_t, std::int64_t> local_edges;
    std::vector<std::uint32_t> caption_ids;
#pragma omp for schedule(static)
    for (std::int64_t c = 0; c < n; ++c) {
      caption_ids.clear();
      // std::set iteration is sorted, and vocab ids follow the same order.
      for (const auto& w : word_sets[static_cast<std::size_t>(c)]) {
        caption_ids.push_back(ids.at(w));
      }
      for (std::size_t i = 0; i < caption_ids.size(); ++i) {
        ++local_nodes[caption_ids[i]];
        for (std::size_t j = i + 1; j < caption_ids.size(); ++j) {
          const auto key = (static_cast<std::uint64_t>(caption_ids[i]) << 32) | caption_ids[j];
          ++local_edges[key];
        }
      }
    }
#pragma omp critical(capscope_cooccurrence_merge)
    {
      for (std::size_t i = 0; i < vocab.size(); ++i) node_counts[i] += local_nodes[i];
      for (const auto& [key, count] : local_edges) edge_counts[key] += count;
    }
  }

  CoOccurrenceGraph g;
  for (std::size_t i = 0; i < vocab.size(); ++i) {
    if (node_counts[i] > 0) g.nodes.emplace(vocab[i], node_counts[i]);
  }
  for (const auto& [key, count] : edge_counts) {
    g.edges.emplace(WordPair{vocab[key >> 32], vocab[key & 0xffffffffu]}, count);
  }
  return g;
}

CoOccurrenceGraph build_cooccurrence(std::span<const CaptionRecord> captions) {
  std::vector<std::set<std::string>> sets;
  sets.reserve(captions.size());
  for (const auto& c : captions) sets.push_back(c.normalized_words);
  return build_cooccurrence(std::span<const std::set<std::string>>(sets));
}

CoOccurrenceGraph filter_graph(const CoOccurrenceGraph& graph, std::int64_t min_node,
                               std::int64_t min_edge) {
  CoOccurrenceGraph out;
  for (const auto& [word, count] : graph.nodes) {
    if (count >= min_node) out.nodes.emplace(word, count);
  }
  for (const auto& [pair, count] : graph.edges) {
    if (count >= min_edge && out.nodes.contains(pair.first) &&
        out.nodes.contains(pair.second)) {
      out.edges.emplace(pair, count);
    }
  }
  return out;
}

ScoreHistogram itm_histogram(std::span<const double> scores, std::size_t bins) {
  if (bins == 0) throw ValidationError("histogram needs at least one bin");
  ScoreHistogram h;
  h.bin_edges.resize(bins + 1);
  for (std::size_t i = 0; i <= bins; ++i) {
    h.bin_edges[i] = static_cast<double>(i) / static_cast<double>(bins);
  }
  h.counts.assign(bins, 0);
  for (double s : scores) {
    if (!(s >= 0.0 && s <= 1.0)) {
      throw ValidationError("itm score " + std::to_string(s) + " outside [0, 1]");
    }
    auto idx = static_cast<std::size_t>(std::floor(s * static_cast<double>(bins)));
    idx = std::min(idx, bins - 1);
    // Keep the bin consistent with the published edges despite rounding.
    while (idx > 0 && s < h.bin_edges[idx]) --idx;
    while (idx + 1 < bins && s >= h.bin_edges[idx + 1]) ++idx;
    ++h.counts[idx];
  }
  return h;
}

std::map<std::string, double> word_portions_in_range(
    std::span<const CaptionRecord> captions, double lo, double hi) {
  if (!(lo >= 0.0 && hi <= 1.0 && lo <= hi)) {
    throw ValidationError("score range must satisfy 0 <= lo <= hi <= 1");
  }
  std::map<std::string, std::pair<std::int64_t, std::int64_t>> counts;  // in, total
  for (const auto& c : captions) {
    const bool inside = c.itm_score >= lo && c.itm_score <= hi;
    for (const auto& w : c.normalized_words) {
      auto& [in, total] = counts[w];
      ++total;
      if (inside) ++in;
    }
  }
  std::map<std::string, double> portions;
  for (const auto& [w, c] : counts) {
    portions.emplace(w, static_cast<double>(c.first) / static_cast<double>(c.second));
  }
  return portions;
}

nlohmann::json graph_to_json(const CoOccurrenceGraph& graph,
                             const std::optional<std::map<std::string, double>>& portions) {
  nlohmann::json nodes = nlohmann::json::array();
  for (const auto& [word, count] : graph.nodes) {
    nlohmann::json n = {{"word", word}, {"count", count}};
    if (portions) {
      const auto it = portions->find(word);
      n["portion"] = it == portions->end() ? 0.0 : it->second;
    }
    nodes.push_back(std::move(n));
  }
  nlohmann::json edges = nlohmann::json::array();
  for (const auto& [pair, count] : graph.edges) {
    edges.push_back({{"a", pair.first}, {"b", pair.second}, {"count", count}});
  }
  return {{"nodes", std::move(nodes)}, {"edges", std::move(edges)}};
}

CoOccurrenceGraph graph_from_json(const nlohmann::json& j) {
  CoOccurrenceGraph g;
  try {
    for (const auto& n : j.at("nodes")) {
      g.nodes.emplace(n.at("word").get<std::string>(), n.at("count").get<std::int64_t>());
    }
    for (const auto& e : j.at("edges")) {
      auto a = e.at("a").get<std::string>();
      auto b = e.at("b").get<std::string>();
      if (b < a) std::swap(a, b);
      g.edges.emplace(WordPair{a, b}, e.at("count").get<std::int64_t>());
    }
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("graph document: ") + e.what());
  }
  return g;
}

nlohmann::json histogram_to_json(const ScoreHistogram& h) {
  return {{"bin_edges", h.bin_edges}, {"counts", h.counts}};
}

nlohmann::json record_to_json(const CaptionRecord& r) {
  return {{"image_id", r.image_id},
          {"text", r.text},
          {"prompt", r.prompt},
          {"normalized_words", r.normalized_words},
          {"itm_score", r.itm_score}};
}

CaptionRecord record_from_json(const nlohmann::json& j) {
  CaptionRecord r;
  r.image_id = j.at("image_id").get<std::string>();
  r.text = j.at("text").get<std::string>();
  r.prompt = j.value("prompt", std::string());
  r.normalized_words = j.at("normalized_words").get<std::set<std::string>>();
  r.itm_score = j.at("itm_score").get<double>();
  return r;
}

}  // namespace capscope::corpus
