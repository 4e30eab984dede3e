#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <random>

#include "rqunify/data.hpp"
#include "rqunify/sequencer.hpp"

using namespace rqunify;

namespace {

UnifiedVocab make_vocab() { return UnifiedVocab(TextVocab{}); }

CodeGrid make_grid(int64_t h, int64_t w, int64_t depth, int64_t base = 1) {
  CodeGrid g;
  g.height = h;
  g.width = w;
  for (int64_t p = 0; p < h * w; ++p) {
    CodeStack st;
    for (int64_t d = 0; d < depth; ++d) st.push_back((base + p + d) % 7);
    g.stacks.push_back(st);
  }
  return g;
}

}  // namespace

TEST_CASE("TextImage layout: trailing visual region fully supervised") {
  auto v = make_vocab();
  std::vector<int64_t> text{0, 1, 2};
  auto s = build_sample(DataForm::TextImage, v, text, {make_grid(4, 4, 2)});
  // bos + |text| + start + 16 + end
  CHECK(s.length() == 1 + 3 + 1 + 16 + 1);
  // mask true exactly on the trailing 18 positions (start, codes, end)
  for (int64_t i = 0; i < s.length(); ++i)
    CHECK(s.loss_mask[i] == (i >= s.length() - 18));
  CHECK(s.elements[4].text_id == v.image_start);
  CHECK(s.elements[s.length() - 1].text_id == v.image_end);
  check_bracket_integrity(s, v);
}

TEST_CASE("ImageText: mask false on visual, true on caption after the image") {
  auto v = make_vocab();
  std::vector<int64_t> text{3, 4, 5, 6};
  auto s = build_sample(DataForm::ImageText, v, text, {make_grid(2, 2, 3)});
  // bos, start, 4 codes, end, 4 text, eos
  CHECK(s.length() == 1 + 1 + 4 + 1 + 4 + 1);
  for (int64_t i = 0; i < s.length(); ++i) {
    bool after_image = i >= 7;
    CHECK(s.loss_mask[i] == after_image);
    if (s.elements[i].is_visual()) CHECK(!s.loss_mask[i]);
  }
  CHECK(s.elements[s.length() - 1].text_id == v.eos);
  check_bracket_integrity(s, v);
}

TEST_CASE("TextVideo: video brackets, frames concatenated directly") {
  auto v = make_vocab();
  auto f0 = make_grid(2, 2, 2, 1);
  auto f1 = make_grid(2, 2, 2, 3);
  auto s = build_sample(DataForm::TextVideo, v, {0, 1}, {f0, f1});
  CHECK(s.length() == 1 + 2 + 1 + 8 + 1);
  CHECK(s.elements[3].text_id == v.video_start);
  CHECK(s.elements[s.length() - 1].text_id == v.video_end);
  for (int64_t i = 3; i < s.length(); ++i) CHECK(s.loss_mask[i]);
  check_bracket_integrity(s, v);
  // single visual block spanning both frames, no separators
  REQUIRE(s.blocks.size() == 1);
  CHECK(s.blocks[0].frames == 2);
  CHECK(s.blocks[0].count == 8);

  // unequal frame shapes rejected
  CHECK_THROWS_AS(
      build_sample(DataForm::TextVideo, v, {0}, {f0, make_grid(3, 2, 2)}),
      ContractError);
  // a single frame is not a video
  CHECK_THROWS_AS(build_sample(DataForm::TextVideo, v, {0}, {f0}),
                  ContractError);
}

TEST_CASE("Interleaved: mask true on zero visual positions, all text") {
  auto v = make_vocab();
  std::vector<int64_t> text{0, 1, 2, 3, 4, 5};
  auto s = build_sample(DataForm::InterleavedImageText, v, text,
                        {make_grid(2, 2, 2), make_grid(2, 2, 2)});
  int visual_masked = 0, text_masked = 0;
  for (int64_t i = 0; i < s.length(); ++i) {
    if (s.elements[i].is_visual() && s.loss_mask[i]) ++visual_masked;
    if (s.elements[i].is_text() && s.loss_mask[i]) ++text_masked;
    // boundary specials of unsupervised blocks are unsupervised
    if (s.elements[i].is_text() &&
        (s.elements[i].text_id == v.image_start ||
         s.elements[i].text_id == v.image_end))
      CHECK(!s.loss_mask[i]);
  }
  CHECK(visual_masked == 0);
  CHECK(text_masked == int(text.size()) + 1);  // words + eos
  check_bracket_integrity(s, v);
}

TEST_CASE("flatten_video ordering and index formula") {
  auto f = [&](int base) { return make_grid(2, 3, 1, base); };
  auto toks = flatten_video({f(0), f(10), f(20)});
  CHECK(toks.size() == 18);
  // position of frame fr, cell (r,c) = fr*H*W + r*W + c
  for (int fr = 0; fr < 3; ++fr)
    for (int r = 0; r < 2; ++r)
      for (int c = 0; c < 3; ++c) {
        auto grids = std::vector<CodeGrid>{f(0), f(10), f(20)};
        CHECK(toks[fr * 6 + r * 3 + c].stack == grids[fr].at(r, c));
      }
  // one frame == image flattening
  auto one = flatten_video({f(5)});
  auto g = f(5);
  for (int p = 0; p < 6; ++p) CHECK(one[p].stack == g.stacks[p]);
}

TEST_CASE("make_cfg_pair contracts") {
  auto v = make_vocab();
  auto s = build_sample(DataForm::TextImage, v, {0, 1, 2}, {make_grid(2, 2, 2)});
  auto [cond, uncond] = make_cfg_pair(s, v);
  // unconditional text region is exactly [<null_cond>]
  CHECK(uncond.elements[0].text_id == v.bos);
  CHECK(uncond.elements[1].text_id == v.null_cond);
  CHECK(uncond.elements[2].text_id == v.image_start);
  // visual region identical
  auto cg = cond.extract_grids();
  auto ug = uncond.extract_grids();
  REQUIRE(cg.size() == 1);
  CHECK(cg[0] == ug[0]);
  // applying again is idempotent on the unconditional member
  auto [c2, u2] = make_cfg_pair(uncond, v);
  CHECK(u2.length() == uncond.length());
  for (int64_t i = 0; i < u2.length(); ++i) {
    CHECK(u2.elements[i].kind == uncond.elements[i].kind);
    CHECK(u2.elements[i].text_id == uncond.elements[i].text_id);
  }
  // unsupported form
  auto it = build_sample(DataForm::ImageText, v, {0}, {make_grid(2, 2, 2)});
  CHECK_THROWS_AS(make_cfg_pair(it, v), ContractError);
}

TEST_CASE("round-trip: extract_grids returns the inputs") {
  auto v = make_vocab();
  std::mt19937_64 rng(3);
  for (int t = 0; t < 20; ++t) {
    auto g1 = make_grid(2 + t % 3, 2 + t % 2, 1 + t % 3, t);
    auto s = build_sample(DataForm::TextImage, v, {0, 1}, {g1});
    auto out = s.extract_grids();
    REQUIRE(out.size() == 1);
    CHECK(out[0] == g1);
  }
  // video round trip
  auto f0 = make_grid(2, 2, 2, 1), f1 = make_grid(2, 2, 2, 9);
  auto s = build_sample(DataForm::TextVideo, v, {0}, {f0, f1});
  auto out = s.extract_grids();
  REQUIRE(out.size() == 2);
  CHECK(out[0] == f0);
  CHECK(out[1] == f1);
}

TEST_CASE("property: bracket integrity and mask-form bijection over random layouts") {
  auto v = make_vocab();
  std::mt19937_64 rng(11);
  for (int t = 0; t < 200; ++t) {
    DataForm form = static_cast<DataForm>(rng() % 4);
    std::vector<int64_t> text(1 + rng() % 6);
    for (auto& id : text) id = int64_t(rng() % v.text_size());
    std::vector<CodeGrid> grids;
    int64_t h = 1 + rng() % 3, w = 1 + rng() % 3, d = 1 + rng() % 4;
    size_t n = form == DataForm::TextVideo ? 2 + rng() % 3
               : form == DataForm::InterleavedImageText ? 1 + rng() % 3
                                                        : 1;
    for (size_t i = 0; i < n; ++i) grids.push_back(make_grid(h, w, d, int(i)));
    auto s = build_sample(form, v, text, grids);
    check_bracket_integrity(s, v);
    // mask is a pure function of the layout: rebuild and compare
    auto s2 = build_sample(form, v, text, grids);
    CHECK(s.loss_mask == s2.loss_mask);
    // per-form mask rule
    for (int64_t i = 0; i < s.length(); ++i) {
      bool vis = s.elements[i].is_visual();
      switch (form) {
        case DataForm::ImageText:
        case DataForm::InterleavedImageText:
          if (vis) CHECK(!s.loss_mask[i]);
          break;
        case DataForm::TextImage:
        case DataForm::TextVideo:
          if (vis) CHECK(s.loss_mask[i]);
          break;
      }
    }
  }
}

TEST_CASE("condition dropout rate is honored") {
  auto v = make_vocab();
  auto s = build_sample(DataForm::TextImage, v, {0, 1, 2}, {make_grid(2, 2, 2)});
  std::mt19937_64 rng(42);
  int dropped = 0;
  const int N = 10000;
  for (int i = 0; i < N; ++i) {
    auto out = apply_condition_dropout(s, v, 0.1, rng);
    if (out.elements[1].text_id == v.null_cond) ++dropped;
  }
  CHECK(dropped > N * 0.09);
  CHECK(dropped < N * 0.11);
}

TEST_CASE("the [video, text] form does not exist") {
  CHECK_THROWS_AS(form_from_name("video_text"), ConfigError);
}
