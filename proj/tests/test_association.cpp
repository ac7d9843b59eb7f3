#include <cmath>
#include <vector>

#include "doctest.h"

#include "capscope/association.hpp"
#include "capscope/error.hpp"
#include "capscope_ref/reference.hpp"
#include "support.hpp"

using namespace capscope;
using namespace capscope::assoc;
using capscope::testing::non_empty_mask;
using capscope::testing::numbered_tokens;
using capscope::testing::random_bundle;

namespace {

double max_abs_diff(const MatrixD& a, const MatrixD& b) {
  REQUIRE(a.rows() == b.rows());
  REQUIRE(a.cols() == b.cols());
  double d = 0;
  for (std::size_t i = 0; i < a.size(); ++i) d = std::max(d, std::abs(a.data()[i] - b.data()[i]));
  return d;
}

AssociationMatrix random_matrix(Rng& rng, const std::string& image, std::size_t rows,
                                std::size_t cols) {
  std::vector<std::string> r, ri, c;
  for (std::size_t i = 0; i < rows; ++i) {
    r.push_back(image + "_s" + std::to_string(i));
    ri.push_back(image);
  }
  for (std::size_t j = 0; j < cols; ++j) c.push_back("w" + std::to_string(j));
  AssociationMatrix m(Scope::per_image, r, ri, c);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j)
      m.set(i, j, rng.below(3) == 0 ? static_cast<double>(rng.below(3)) : rng.uniform());
  return m;
}

}  // namespace

TEST_CASE("gradcam matches the elementwise oracle") {
  Rng rng(41);
  for (int i = 0; i < 50; ++i) {
    const auto b = random_bundle(rng, 2, 1 + rng.below(3), 2 + rng.below(3),
                                 numbered_tokens(2 + rng.below(4)));
    for (bool clamp : {true, false}) {
      CHECK(max_abs_diff(compute_gradcam(b, 1, clamp), ref::gradcam(b, 1, clamp)) < 1e-12);
      CHECK(max_abs_diff(compute_gradcam_head(b, 0, 0, clamp), ref::gradcam_head(b, 0, 0, clamp)) <
            1e-12);
    }
    CHECK(max_abs_diff(mean_attention(b, 1), ref::mean_attention(b, 1, std::nullopt)) < 1e-12);
    CHECK(max_abs_diff(mean_attention(b, 0, 0), ref::mean_attention(b, 0, 0)) < 1e-12);
    const auto clamped = compute_gradcam(b, 0, true);
    for (double v : clamped.data()) CHECK(v >= 0.0);
  }
  Rng r2(1);
  const auto b = random_bundle(r2, 1, 1, 2, numbered_tokens(2));
  CHECK_THROWS_AS(compute_gradcam(b, 1), ValidationError);
  CHECK_THROWS_AS(compute_gradcam_head(b, 0, 1), ValidationError);
  const auto no_grad = random_bundle(r2, 1, 1, 2, numbered_tokens(2), false);
  CHECK_THROWS_AS(compute_gradcam(no_grad, 0), DataError);
  CHECK_NOTHROW(mean_attention(no_grad, 0));
}

TEST_CASE("stop-word columns are dropped and duplicates merged") {
  MatrixD c(2, 5);
  for (std::size_t r = 0; r < 2; ++r)
    for (std::size_t j = 0; j < 5; ++j) c(r, j) = static_cast<double>(10 * r + j);
  const std::vector<std::string> toks = {"a", "dogs", "and", "a", "dog"};
  const auto wc = drop_stopword_columns(c, toks);
  REQUIRE(wc.words == std::vector<std::string>{"dog"});
  CHECK(wc.values(0, 0) == 1 + 4);
  CHECK(wc.values(1, 0) == 11 + 14);
  const std::vector<std::string> toks2 = {"picture", "of", "hat", "picture", "man"};
  const auto wp = drop_stopword_columns(c, toks2, "picture of");
  CHECK(wp.words == std::vector<std::string>{"hat", "man", "picture"});
}

TEST_CASE("resize matches oracle and keeps constants exactly") {
  Rng rng(42);
  for (int i = 0; i < 30; ++i) {
    const auto p = 1 + rng.below(5);
    MatrixD g(p, p);
    for (auto& v : g.data()) v = rng.uniform();
    const auto w = 1 + rng.below(40), h = 1 + rng.below(40);
    const auto r = resize_map(g, w, h);
    CHECK(r.rows() == h);
    CHECK(r.cols() == w);
    CHECK(max_abs_diff(r, ref::resize(g, w, h)) < 1e-12);
    const double c = rng.uniform(-5, 5);
    const auto k = resize_map(MatrixD(p, p, c), w, h);
    for (double v : k.data()) CHECK(v == c);
  }
}

TEST_CASE("segment score laws") {
  Rng rng(43);
  for (int i = 0; i < 100; ++i) {
    const auto h = 1 + rng.below(30), w = 1 + rng.below(30);
    const Mask m = non_empty_mask(rng, h, w);
    const double c = rng.uniform(0.0, 10.0);
    const double s = segment_score(MatrixD(h, w, c), m);
    CHECK(std::abs(s - c * std::sqrt(static_cast<double>(m.area()))) < 1e-9);
    MatrixD map(h, w);
    for (auto& v : map.data()) v = rng.uniform();
    CHECK(segment_score(map, m) == doctest::Approx(ref::segment_score(map, m)).epsilon(1e-12));
  }
  CHECK_THROWS_AS(segment_score(MatrixD(3, 3, 1.0), Mask(3, 3)), ValidationError);
  Mask m(3, 4);
  m.set(0, 0);
  CHECK_THROWS_AS(segment_score(MatrixD(3, 3, 1.0), m), ValidationError);
}

TEST_CASE("linearity: scaling attention scales scores and keeps rankings") {
  Rng rng(44);
  const ImageRef image{"im", 20, 16, ""};
  const auto caption = corpus::CaptionRecord::make("im", "a dog with a ball on grass", "", 0.5);
  std::vector<segments::SegmentRecord> segs;
  for (std::size_t i = 0; i < 4; ++i) {
    segments::SegmentRecord s;
    s.segment_id = segments::segment_id("im", i);
    s.image_id = "im";
    s.mask = non_empty_mask(rng, 16, 20);
    segs.push_back(s);
  }
  const auto tokens = std::vector<std::string>{"a", "dog", "with", "a", "ball", "on", "grass"};
  const auto b = random_bundle(rng, 2, 2, 3, tokens);
  const double alpha = 2.5;
  auto scaled_a = b.attention_data();
  for (auto& v : scaled_a) v *= static_cast<float>(alpha);
  const AttentionBundle scaled(b.source(), 2, 2, 3, tokens, scaled_a, b.gradient_data(), 0.5);
  const auto m1 = build_association(image, caption, segs, b, 1);
  const auto m2 = build_association(image, caption, segs, scaled, 1);
  for (std::size_t r = 0; r < m1.row_count(); ++r)
    for (std::size_t c = 0; c < m1.col_count(); ++c)
      CHECK(*m2.at(r, c) == doctest::Approx(alpha * *m1.at(r, c)).epsilon(1e-5));
  const std::vector<AssociationMatrix> a = {m1}, s = {m2};
  for (std::size_t k = 1; k <= 4; ++k) CHECK(coverage(a, k) == coverage(s, k));
  for (const auto& seg : segs) {
    const auto t1 = top_words_for_segment(seg.segment_id, m1, 3);
    const auto t2 = top_words_for_segment(seg.segment_id, m2, 3);
    REQUIRE(t1.size() == t2.size());
    for (std::size_t i = 0; i < t1.size(); ++i) CHECK(t1[i].first == t2[i].first);
  }
}

TEST_CASE("build_association matches the naive pipeline") {
  Rng rng(45);
  for (int round = 0; round < 10; ++round) {
    const ImageRef image{"im", 10 + rng.below(30), 10 + rng.below(30), ""};
    const auto caption =
        corpus::CaptionRecord::make("im", "a picture of the dogs and a dog near trees", "a picture of", 0.4);
    std::vector<segments::SegmentRecord> segs;
    for (std::size_t i = 0; i < 1 + rng.below(5); ++i) {
      segments::SegmentRecord s;
      s.segment_id = segments::segment_id("im", i);
      s.image_id = "im";
      s.mask = non_empty_mask(rng, image.height, image.width);
      segs.push_back(s);
    }
    const std::vector<std::string> tokens = {"a",   "picture", "of",   "the",  "dogs",
                                             "and", "a",       "dog",  "near", "trees"};
    const auto b = random_bundle(rng, 2, 2, 2 + rng.below(3), tokens);
    const auto m = build_association(image, caption, segs, b, 1);
    const auto expect = ref::association(image, caption, segs, b, 1, true);
    CHECK(m.rows() == expect.rows);
    CHECK(m.cols() == expect.cols);
    CHECK(m.image_id() == "im");
    for (std::size_t r = 0; r < m.row_count(); ++r)
      for (std::size_t c = 0; c < m.col_count(); ++c)
        CHECK(std::abs(*m.at(r, c) - expect.values(r, c)) < 1e-6);
  }
}

TEST_CASE("union keeps cells and never invents cross-image scores") {
  Rng rng(46);
  std::vector<AssociationMatrix> ms = {random_matrix(rng, "x", 3, 4), random_matrix(rng, "y", 2, 3)};
  const auto u = union_associations(ms);
  CHECK(u.scope() == Scope::union_all);
  CHECK(u.row_count() == 5);
  CHECK(u.col_count() == 4);
  for (const auto& m : ms) {
    for (std::size_t r = 0; r < m.row_count(); ++r) {
      const auto ur = *u.row_index(m.rows()[r]);
      for (std::size_t c = 0; c < u.col_count(); ++c) {
        const auto mc = m.col_index(u.cols()[c]);
        if (mc) {
          CHECK(u.at(ur, c) == m.at(r, *mc));
        } else {
          CHECK_FALSE(u.at(ur, c).has_value());
        }
      }
    }
  }
  std::vector<AssociationMatrix> dup = {ms[0], ms[0]};
  CHECK_THROWS_AS(union_associations(dup), ValidationError);
  std::vector<AssociationMatrix> nested = {u};
  CHECK_THROWS_AS(union_associations(nested), ValidationError);
}

TEST_CASE("coverage matches brute force") {
  Rng rng(47);
  for (int round = 0; round < 30; ++round) {
    std::vector<AssociationMatrix> ms;
    for (int i = 0; i < 3; ++i) {
      ms.push_back(random_matrix(rng, "img" + std::to_string(i % 2) + "_" + std::to_string(round * 3 + i),
                                 1 + rng.below(6), 1 + rng.below(5)));
    }
    for (std::size_t k = 1; k <= 5; ++k) CHECK(coverage(ms, k) == ref::coverage(ms, k));
  }
}

TEST_CASE("top words and word colors") {
  Rng rng(48);
  const auto m = random_matrix(rng, "x", 3, 6);
  for (std::size_t r = 0; r < 3; ++r) {
    const auto got = top_words_for_segment(m.rows()[r], m, 4);
    const auto want = ref::top_words(m, r, 4);
    CHECK(got == want);
  }
  CHECK_THROWS_AS(top_words_for_segment("nope", m, 2), NotFoundError);
  const auto colors = word_attention_colors("w1", m);
  CHECK(colors.size() == 3);
  CHECK(colors.at("x_s2") == *m.at(2, 1));
  CHECK(word_attention_colors("zebra", m).empty());
}

TEST_CASE("heat colors and bitmap export") {
  CHECK(heat_color(1.0, 0.0, 1.0) == Rgb{255, 0, 0});
  CHECK(heat_color(0.0, 0.0, 1.0) == Rgb{0, 0, 255});
  Mask m(4, 6);
  m.fill_rect(1, 1, 3, 2);
  MatrixD map(4, 6, 0.5);
  const auto bmp = render_heatmap_bmp(map, m);
  REQUIRE(bmp.size() > 54);
  CHECK(static_cast<char>(bmp[0]) == 'B');
  CHECK(static_cast<char>(bmp[1]) == 'M');
  // 3 x 2 pixels, rows padded to 12 bytes
  CHECK(bmp.size() == 54 + 2 * 12);
}
