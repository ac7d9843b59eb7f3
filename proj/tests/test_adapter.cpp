#include <algorithm>
#include <cmath>
#include <vector>

#include "doctest.h"

#include "capscope/error.hpp"
#include "capscope/mock_adapter.hpp"
#include "capscope/text.hpp"
#include "support.hpp"

using namespace capscope;

namespace {

MockAdapter small_adapter(std::uint64_t seed = 3) {
  MockConfig cfg;
  cfg.seed = seed;
  cfg.grid = {4, 8};
  cfg.layers = 3;
  cfg.heads = 2;
  MockFixtures fx;
  fx.add_image("a", 32, 32);
  fx.add_image("b", 40, 24);
  fx.add_image("broken", 32, 32, true);
  fx.add_caption("a", "a picture of", "a picture of a dog with a ball");
  fx.steering.push_back({"a", std::nullopt, {5, 6}, 2.0, std::nullopt, "a picture of a hat"});
  fx.planted["b"] = PlantedPeak{1, 9};
  return MockAdapter(cfg, fx);
}

const ImageRef kA{"a", 32, 32, ""};
const ImageRef kB{"b", 40, 24, ""};

}  // namespace

TEST_CASE("captions are deterministic and use fixtures") {
  auto m = small_adapter();
  auto n = small_adapter();
  const auto c = m.generate_caption(kA, "a picture of");
  CHECK(c.text == "a picture of a dog with a ball");
  CHECK(c.prompt == "a picture of");
  CHECK(c.decode.strategy == "greedy");
  const auto synth = m.generate_caption(kB, "a picture of");
  CHECK(synth.text == n.generate_caption(kB, "a picture of").text);
  CHECK(synth.text.rfind("a picture of ", 0) == 0);
  std::string joined;
  for (const auto& t : synth.tokens) joined += (joined.empty() ? "" : " ") + t;
  CHECK(joined == synth.text);
  CHECK(small_adapter(99).generate_caption(kB, "a picture of").text != synth.text);
}

TEST_CASE("identity weights reproduce the unweighted caption") {
  auto m = small_adapter();
  const std::vector<double> ones(16, 1.0);
  for (const auto& img : {kA, kB}) {
    for (const char* prompt : {"a picture of", "the person is wearing", ""}) {
      CHECK(m.generate_caption(img, prompt, ones) == m.generate_caption(img, prompt));
    }
  }
}

TEST_CASE("steering rules") {
  auto m = small_adapter();
  std::vector<double> w(16, 1.0);
  w[5] = w[6] = 2.0;
  CHECK(m.generate_caption(kA, "a picture of", w).text == "a picture of a hat");
  w[6] = 1.5;
  CHECK(m.generate_caption(kA, "a picture of", w).text == "a picture of a dog with a ball");
  std::vector<double> bad(16, 1.0);
  bad[0] = -1;
  CHECK_THROWS_AS(m.generate_caption(kA, "a picture of", bad), ValidationError);
  CHECK_THROWS_AS(m.generate_caption(kA, "a picture of", std::vector<double>(15, 1.0)),
                  ValidationError);
  bad[0] = std::nan("");
  CHECK_THROWS_AS(m.generate_caption(kA, "a picture of", bad), ValidationError);
}

TEST_CASE("bundle shapes and attention normalization") {
  auto m = small_adapter();
  const std::string caption = "a picture of a dog with a ball";
  const auto b = m.score_and_attend(kA, caption, AttentionSource::itm);
  CHECK(b.layers() == 3);
  CHECK(b.heads() == 2);
  CHECK(b.grid() == 4);
  CHECK(b.tokens() == text::lex_words(caption));
  REQUIRE(b.itm_score());
  CHECK(*b.itm_score() >= 0.0);
  CHECK(*b.itm_score() <= 1.0);
  CHECK(b.attention_data().size() == b.gradient_data().size());
  const auto t = b.token_count();
  for (std::size_t l = 0; l < 3; ++l) {
    for (std::size_t h = 0; h < 2; ++h) {
      const auto a = b.attention(l, h);
      CHECK(a.size() == 16 * t);
      CHECK(b.gradient(l, h).size() == 16 * t);
      for (float v : a) CHECK(v >= 0.0f);
      for (std::size_t c = 0; c < t; ++c) {
        double s = 0;
        for (std::size_t r = 0; r < 16; ++r) s += a[r * t + c];
        CHECK(s == doctest::Approx(1.0).epsilon(1e-5));
      }
    }
  }
  CHECK(b == m.score_and_attend(kA, caption, AttentionSource::itm));
  CHECK_FALSE(b == m.score_and_attend(kA, caption, AttentionSource::lm));
  const auto lm = m.score_and_attend(kA, caption, AttentionSource::lm);
  CHECK_FALSE(lm.itm_score().has_value());
}

TEST_CASE("attention-only calls carry no gradients and are recorded") {
  auto m = small_adapter();
  const auto before = m.gradient_requests();
  const auto b = m.score_and_attend(kA, "a dog", AttentionSource::itm, {false});
  CHECK_FALSE(b.has_gradients());
  CHECK_THROWS_AS(b.gradient(0, 0), DataError);
  CHECK(m.gradient_requests() == before);
  m.score_and_attend(kA, "a dog", AttentionSource::itm, {true});
  CHECK(m.gradient_requests() == before + 1);
  CHECK(m.attend_calls() == 2);
}

TEST_CASE("planted peaks dominate every column at their layer") {
  auto m = small_adapter();
  const auto b = m.score_and_attend(kB, "a fish on a boat", AttentionSource::lm);
  const auto t = b.token_count();
  for (std::size_t h = 0; h < 2; ++h) {
    const auto a = b.attention(1, h);
    const auto g = b.gradient(1, h);
    for (std::size_t c = 0; c < t; ++c) {
      for (std::size_t r = 0; r < 16; ++r) {
        if (r == 9) continue;
        CHECK(a[9 * t + c] > a[r * t + c]);
      }
      CHECK(g[9 * t + c] > 0.0f);
    }
  }
}

TEST_CASE("image checks") {
  auto m = small_adapter();
  CHECK_THROWS_AS(m.generate_caption({"zzz", 32, 32, ""}, "x"), NotFoundError);
  CHECK_THROWS_AS(m.generate_caption({"broken", 32, 32, ""}, "x"), IoError);
  CHECK_THROWS_AS(m.generate_caption({"a", 31, 32, ""}, "x"), ValidationError);
  CHECK_THROWS_AS(m.score_and_attend(kA, "", AttentionSource::itm), ValidationError);
  CHECK_THROWS_AS(m.score_and_attend(kA, "!!!", AttentionSource::itm), ValidationError);
  CHECK_THROWS_AS(validate_image({"", 3, 3, ""}), ValidationError);
  CHECK_THROWS_AS(validate_image({"a/b", 3, 3, ""}), ValidationError);
  CHECK_THROWS_AS(validate_image({"ok", 0, 3, ""}), ValidationError);
}

TEST_CASE("segmenter and embeddings") {
  auto m = small_adapter();
  const auto masks = m.segment_image(kB);
  CHECK(masks.size() >= 4);
  for (const auto& rm : masks) {
    CHECK(rm.image_id == "b");
    CHECK(rm.bitmap.height() == 24);
    CHECK(rm.bitmap.width() == 40);
  }
  CHECK(masks == m.segment_image(kB));
  const auto e = m.embed_segment(kB, masks[0]);
  CHECK(e.size() == m.embedding_dim());
  CHECK(e == m.embed_segment(kB, masks[0]));
  CHECK_THROWS_AS(m.embed_segment(kA, masks[0]), ValidationError);
}

TEST_CASE("adapter factory and fixture files") {
  const auto dir = capscope::testing::fixture_dir() / "demo";
  auto adapter = make_adapter({{"name", "mock"}, {"seed", 7}, {"fixtures", "."}}, dir.string());
  CHECK(adapter->name() == "mock");
  CHECK(adapter->patch_grid().per_side == 24);
  const auto c = adapter->generate_caption({"tench_001", 384, 384, ""}, "a picture of");
  CHECK_FALSE(c.text.empty());
  CHECK_THROWS_AS(make_adapter({{"name", "nope"}}), AdapterError);
  CHECK_THROWS_AS(make_adapter({{"name", "mock"}, {"fixtures", "/nonexistent/dir"}}), IoError);
}
