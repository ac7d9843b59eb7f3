#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

namespace capscope::corpus {

struct CaptionRecord {
  std::string image_id;
  std::string text;
  std::string prompt;
  std::set<std::string> normalized_words;
  double itm_score = 0.0;

  /// Fills normalized_words from text and prompt.
  static CaptionRecord make(std::string image_id, std::string text,
                            std::string prompt, double itm_score);
};

using WordPair = std::pair<std::string, std::string>;  // first < second

/// Caption-level co-occurrence: node count = captions containing the word,
/// edge count = captions containing both words.
struct CoOccurrenceGraph {
  std::map<std::string, std::int64_t> nodes;
  std::map<WordPair, std::int64_t> edges;

  std::int64_t total_edge_weight() const;
  bool operator==(const CoOccurrenceGraph&) const = default;
};

/// Builds the graph with captions sharded across OpenMP threads; per-thread
/// counts are merged by pointwise sum, so the result is independent of both
/// thread count and caption order.
CoOccurrenceGraph build_cooccurrence(std::span<const CaptionRecord> captions);
CoOccurrenceGraph build_cooccurrence(std::span<const std::set<std::string>> word_sets);

/// Drops nodes with count < min_node and edges with count < min_edge or with
/// a dropped endpoint.
CoOccurrenceGraph filter_graph(const CoOccurrenceGraph& graph, std::int64_t min_node,
                               std::int64_t min_edge);

struct ScoreHistogram {
  std::vector<double> bin_edges;  // bins + 1 entries, 0 .. 1
  std::vector<std::int64_t> counts;
};

/// Equal-width bins over [0, 1]; bins are [lo, hi) except the last, which is
/// closed. Throws ValidationError on bins == 0 or a score outside [0, 1].
ScoreHistogram itm_histogram(std::span<const double> scores, std::size_t bins);

/// portion(w) = |{captions containing w with score in [lo, hi]}| /
///              |{captions containing w}|.
std::map<std::string, double> word_portions_in_range(
    std::span<const CaptionRecord> captions, double lo, double hi);

/// {"nodes": [{word, count, portion?}], "edges": [{a, b, count}]}, sorted.
nlohmann::json graph_to_json(
    const CoOccurrenceGraph& graph,
    const std::optional<std::map<std::string, double>>& portions = std::nullopt);
CoOccurrenceGraph graph_from_json(const nlohmann::json& j);

nlohmann::json histogram_to_json(const ScoreHistogram& h);

nlohmann::json record_to_json(const CaptionRecord& r);
CaptionRecord record_from_json(const nlohmann::json& j);

}  // namespace capscope::corpus
