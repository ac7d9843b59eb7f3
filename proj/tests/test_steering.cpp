#include <vector>

#include "doctest.h"

#include "capscope/error.hpp"
#include "capscope/mock_adapter.hpp"
#include "capscope/steering.hpp"
#include "capscope_ref/reference.hpp"
#include "support.hpp"

using namespace capscope;
using namespace capscope::steer;

namespace {

MockAdapter steer_adapter() {
  MockConfig cfg;
  cfg.grid = {4, 8};
  cfg.layers = 2;
  cfg.heads = 1;
  MockFixtures fx;
  for (int i = 0; i < 10; ++i) {
    const auto id = "p" + std::to_string(i);
    fx.add_image(id, 32, 32);
    fx.add_caption(id, "a picture of", "a picture of a person on a street");
    fx.add_caption(id, "the person is wearing",
                   i < 9 ? "the person is wearing hats and a coat" : "the person is wearing a coat");
  }
  fx.add_image("bad", 32, 32, true);
  fx.steering.push_back({"p0", std::nullopt, {0, 1}, 3.0, std::nullopt, "a picture of a red hat"});
  return MockAdapter(cfg, fx);
}

ImageRef img(int i) { return {"p" + std::to_string(i), 32, 32, ""}; }

}  // namespace

TEST_CASE("pixel to patch routing") {
  Rng rng(51);
  for (int round = 0; round < 50; ++round) {
    const std::size_t w = 1 + rng.below(500), h = 1 + rng.below(500), p = 1 + rng.below(30);
    const ImageRef image{"i", w, h, ""};
    std::vector<Pixel> px = {{0, 0}, {w - 1, 0}, {0, h - 1}, {w - 1, h - 1}};
    for (int i = 0; i < 20; ++i) px.push_back({rng.below(w), rng.below(h)});
    for (const auto& q : px) {
      const auto got = pixels_to_patches({q}, image, p);
      REQUIRE(got.size() == 1);
      CHECK(*got.begin() == ref::pixel_patch(q.x, q.y, w, h, p));
      CHECK(*got.begin() < p * p);
    }
  }
  const ImageRef image{"i", 10, 10, ""};
  CHECK_THROWS_AS(pixels_to_patches({{10, 0}}, image, 4), ValidationError);
  CHECK_THROWS_AS(pixels_to_patches({{0, 10}}, image, 4), ValidationError);
  CHECK_THROWS_AS(pixels_to_patches({{0, 0}}, image, 0), ValidationError);
  CHECK(pixels_to_patches({}, image, 4).empty());
}

TEST_CASE("patch cells tile the image") {
  for (std::size_t w : {7u, 24u, 100u}) {
    for (std::size_t h : {5u, 24u, 64u}) {
      const std::size_t p = 6;
      std::vector<std::size_t> count(p * p, 0);
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) ++count[ref::pixel_patch(x, y, w, h, p)];
      std::size_t total = 0;
      for (auto c : count) total += c;
      CHECK(total == w * h);
    }
  }
}

TEST_CASE("mask to patches matches oracle") {
  Rng rng(52);
  for (int i = 0; i < 100; ++i) {
    const auto h = 1 + rng.below(50), w = 1 + rng.below(50), p = 1 + rng.below(8);
    const Mask m = capscope::testing::random_mask(rng, h, w);
    for (double f : {0.0, 0.25, 0.5, 1.0}) CHECK(mask_to_patches(m, p, f) == ref::mask_patches(m, p, f));
  }
  Mask full(8, 8);
  full.fill_rect(0, 0, 8, 8);
  CHECK(mask_to_patches(full, 4).size() == 16);
  CHECK(mask_to_patches(Mask(8, 8), 4).empty());
}

TEST_CASE("requests from a selection") {
  const auto r = SteerRequest::from_selection("x", "p", {1, 3}, 2.5, 5);
  CHECK(r.patch_weights == std::vector<double>{1, 2.5, 1, 2.5, 1});
  CHECK_THROWS_AS(SteerRequest::from_selection("x", "p", {5}, 2.0, 5), ValidationError);
}

TEST_CASE("identity weights never change the caption") {
  auto m = steer_adapter();
  for (int i = 0; i < 3; ++i) {
    SteerRequest r = SteerRequest::from_selection(img(i).id, std::string(kDefaultPrompt), {0, 1, 5},
                                                  1.0, 16);
    const auto res = steer::steer(r, img(i), m);
    CHECK_FALSE(res.changed);
    CHECK(res.steered_caption == res.baseline_caption);
  }
}

TEST_CASE("steer reports changes and target hits") {
  auto m = steer_adapter();
  auto r = SteerRequest::from_selection("p0", std::string(kDefaultPrompt), {0, 1}, 3.0, 16);
  const auto res = steer::steer(r, img(0), m, {"hats", "coat"});
  CHECK(res.changed);
  CHECK(res.steered_caption == "a picture of a red hat");
  CHECK(res.target_hits.at("hats"));
  CHECK_FALSE(res.target_hits.at("coat"));
  CHECK(res.baseline_caption == "a picture of a person on a street");

  const auto again = steer::steer(r, img(0), m, {"hats", "coat"});
  CHECK(result_to_json(again) == result_to_json(res));

  SteerRequest prompt_only;
  prompt_only.image_id = "p1";
  prompt_only.prompt = "the person is wearing";
  const auto pr = steer::steer(prompt_only, img(1), m, {"hat"});
  CHECK(pr.changed);
  CHECK(pr.target_hits.at("hat"));

  SteerRequest bad = r;
  bad.patch_weights[2] = -1.0;
  CHECK_THROWS_AS(steer::steer(bad, img(0), m), ValidationError);
}

TEST_CASE("batch success rate is exact") {
  auto m = steer_adapter();
  std::vector<ImageRef> images;
  for (int i = 0; i < 10; ++i) images.push_back(img(i));
  const auto rep = steer_batch(images, "the person is wearing", {"hat"}, m);
  CHECK(rep.success_count == 9);
  CHECK(rep.failure_count == 0);
  CHECK(rep.success_rate.numerator == 9);
  CHECK(rep.success_rate.denominator == 10);
  CHECK(rep.success_rate.value() == 0.9);
  REQUIRE(rep.items.size() == 10);
  for (int i = 0; i < 10; ++i) {
    CHECK(rep.items[i].image_id == img(i).id);
    CHECK(rep.items[i].success == (i < 9));
    CHECK(rep.items[i].weights_digest == weights_digest(std::vector<double>(16, 1.0)));
  }
  const auto j = report_to_json(rep);
  CHECK(j["success_rate_exact"]["numerator"] == 9);
  CHECK(j["items"].size() == 10);
}

TEST_CASE("batch excludes adapter failures from the rate") {
  auto m = steer_adapter();
  std::vector<ImageRef> images = {img(0), {"bad", 32, 32, ""}, img(9), img(1)};
  const auto rep = steer_batch(images, "the person is wearing", {"hat"}, m);
  CHECK(rep.failure_count == 1);
  CHECK(rep.success_count == 2);
  CHECK(rep.success_rate.denominator == 3);
  CHECK_FALSE(rep.items[1].result.has_value());
  CHECK_FALSE(rep.items[1].error.empty());
  CHECK(rep.success_rate.value() * 3 == doctest::Approx(2.0));
  CHECK_THROWS_AS(steer_batch({}, "x", {"hat"}, m), ValidationError);
}

TEST_CASE("weights digest is stable and sensitive") {
  const std::vector<double> a(16, 1.0);
  auto b = a;
  b[3] = 1.5;
  CHECK(weights_digest(a) == weights_digest(a));
  CHECK(weights_digest(a) != weights_digest(b));
  CHECK(weights_digest(a).size() == 16);
}
