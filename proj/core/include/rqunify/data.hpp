#pragma once

// Procedurally generated shapes-and-captions corpus: deterministic renderer,
// word-level caption grammar, binary PPM (P6) I/O, and disjoint train/eval
// splits keyed by attribute combination.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "rqunify/errors.hpp"

namespace rqunify {

struct Image {
  int64_t height = 0, width = 0;
  std::vector<float> rgb;  // row-major H*W*3, values in [0,1]

  float& at(int64_t r, int64_t c, int64_t ch) {
    return rgb[(r * width + c) * 3 + ch];
  }
  float at(int64_t r, int64_t c, int64_t ch) const {
    return rgb[(r * width + c) * 3 + ch];
  }
};

inline void write_ppm(const std::string& path, const Image& img) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open for write: " + path);
  f << "P6\n" << img.width << " " << img.height << "\n255\n";
  for (float v : img.rgb) {
    float clamped = v < 0.f ? 0.f : (v > 1.f ? 1.f : v);
    f.put(static_cast<char>(std::lround(clamped * 255.f)));
  }
  if (!f) throw IoError("write failed: " + path);
}

inline Image read_ppm(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open for read: " + path);
  std::string magic;
  int w, h, maxv;
  f >> magic >> w >> h >> maxv;
  if (magic != "P6" || maxv != 255)
    throw IoError("unsupported PPM header in " + path);
  f.get();  // single whitespace after header
  Image img;
  img.width = w;
  img.height = h;
  img.rgb.resize(size_t(w) * h * 3);
  for (auto& v : img.rgb) {
    int byte = f.get();
    if (byte < 0) throw IoError("truncated PPM: " + path);
    v = float(byte) / 255.f;
  }
  return img;
}

// ---------------------------------------------------------------------------
// Attribute space and caption grammar
// ---------------------------------------------------------------------------

inline const std::array<std::string, 4>& shape_names() {
  static const std::array<std::string, 4> n{"square", "circle", "triangle",
                                            "cross"};
  return n;
}
inline const std::array<std::string, 4>& color_names() {
  static const std::array<std::string, 4> n{"red", "green", "blue", "yellow"};
  return n;
}
inline const std::array<std::string, 2>& size_names() {
  static const std::array<std::string, 2> n{"small", "large"};
  return n;
}
inline const std::array<std::string, 2>& position_names() {
  static const std::array<std::string, 2> n{"center", "corner"};
  return n;
}

struct Attributes {
  int shape = 0, color = 0, size = 0, position = 0;

  static constexpr int kCount = 4 * 4 * 2 * 2;  // 64 combinations

  int label() const {
    return ((shape * 4 + color) * 2 + size) * 2 + position;
  }
  static Attributes from_label(int label) {
    Attributes a;
    a.position = label % 2;
    label /= 2;
    a.size = label % 2;
    label /= 2;
    a.color = label % 4;
    label /= 4;
    a.shape = label % 4;
    return a;
  }
  bool operator==(const Attributes& o) const {
    return label() == o.label();
  }
};

inline std::string caption_for(const Attributes& a) {
  return "a " + size_names()[a.size] + " " + color_names()[a.color] + " " +
         shape_names()[a.shape] + " at the " + position_names()[a.position];
}

// Inverse of the grammar; throws ConfigError on captions it cannot parse.
inline Attributes parse_caption(const std::string& caption) {
  std::istringstream is(caption);
  std::vector<std::string> w;
  std::string tok;
  while (is >> tok) w.push_back(tok);
  if (w.size() != 7 || w[0] != "a" || w[4] != "at" || w[5] != "the")
    throw ConfigError("caption does not match grammar: " + caption);
  Attributes a;
  auto find = [&](const auto& names, const std::string& s, const char* what) {
    for (size_t i = 0; i < names.size(); ++i)
      if (names[i] == s) return int(i);
    throw ConfigError(std::string("unknown ") + what + " word: " + s);
  };
  a.size = find(size_names(), w[1], "size");
  a.color = find(color_names(), w[2], "color");
  a.shape = find(shape_names(), w[3], "shape");
  a.position = find(position_names(), w[6], "position");
  return a;
}

// Fixed word-level vocabulary covering the grammar.
class TextVocab {
 public:
  TextVocab() {
    auto addw = [&](const std::string& w) { words_.push_back(w); };
    addw("a");
    addw("at");
    addw("the");
    for (auto& w : size_names()) addw(w);
    for (auto& w : color_names()) addw(w);
    for (auto& w : shape_names()) addw(w);
    for (auto& w : position_names()) addw(w);
  }

  int64_t size() const { return int64_t(words_.size()); }

  int64_t id(const std::string& w) const {
    for (size_t i = 0; i < words_.size(); ++i)
      if (words_[i] == w) return int64_t(i);
    return -1;
  }
  const std::string& word(int64_t i) const { return words_.at(size_t(i)); }

  std::vector<int64_t> encode(const std::string& text) const {
    std::istringstream is(text);
    std::string w;
    std::vector<int64_t> out;
    std::vector<std::string> unknown;
    while (is >> w) {
      int64_t i = id(w);
      if (i < 0)
        unknown.push_back(w);
      else
        out.push_back(i);
    }
    if (!unknown.empty()) {
      std::string msg = "words outside the vocabulary:";
      for (auto& u : unknown) msg += " " + u;
      throw ConfigError(msg);
    }
    return out;
  }

  std::string decode(const std::vector<int64_t>& ids) const {
    std::string out;
    for (size_t i = 0; i < ids.size(); ++i)
      out += (i ? " " : "") + word(ids[i]);
    return out;
  }

 private:
  std::vector<std::string> words_;
};

// ---------------------------------------------------------------------------
// Renderer
// ---------------------------------------------------------------------------

struct SyntheticSpec {
  int64_t image_size = 32;
  uint64_t seed = 0;
  int video_min_frames = 2;
  int video_max_frames = 4;
  double eval_fraction = 0.5;  // of the 64 combinations
};

namespace detail {

inline std::array<float, 3> color_rgb(int color) {
  switch (color) {
    case 0: return {0.85f, 0.10f, 0.10f};
    case 1: return {0.10f, 0.80f, 0.15f};
    case 2: return {0.15f, 0.20f, 0.90f};
    default: return {0.90f, 0.85f, 0.10f};
  }
}

inline bool inside_shape(int shape, double dx, double dy, double radius) {
  switch (shape) {
    case 0:  // square
      return std::abs(dx) <= radius && std::abs(dy) <= radius;
    case 1:  // circle
      return dx * dx + dy * dy <= radius * radius;
    case 2:  // triangle, apex up
      return dy >= -radius && dy <= radius &&
             std::abs(dx) <= (dy + radius) / 2.0;
    default:  // cross
      return (std::abs(dx) <= radius / 2.5 && std::abs(dy) <= radius) ||
             (std::abs(dy) <= radius / 2.5 && std::abs(dx) <= radius);
  }
}

}  // namespace detail

// Renders one combination at an optional integer offset (used for video
// frames). Fully deterministic.
inline Image render_image(const SyntheticSpec& spec, const Attributes& a,
                          int64_t off_r = 0, int64_t off_c = 0) {
  const int64_t N = spec.image_size;
  Image img;
  img.height = img.width = N;
  img.rgb.assign(size_t(N) * N * 3, 0.12f);
  const double radius = a.size == 0 ? N * 0.17 : N * 0.30;
  double cr = a.position == 0 ? N / 2.0 : N / 4.0 + 1;
  double cc = a.position == 0 ? N / 2.0 : N / 4.0 + 1;
  cr += double(off_r);
  cc += double(off_c);
  auto rgb = detail::color_rgb(a.color);
  for (int64_t r = 0; r < N; ++r)
    for (int64_t c = 0; c < N; ++c)
      if (detail::inside_shape(a.shape, c + 0.5 - cc, r + 0.5 - cr, radius))
        for (int ch = 0; ch < 3; ++ch) img.at(r, c, ch) = rgb[ch];
  return img;
}

// 2-4 frames with the shape translating 1-2 px/frame; direction and speed
// derive deterministically from the attributes and the spec seed.
inline std::vector<Image> render_video(const SyntheticSpec& spec,
                                       const Attributes& a) {
  std::mt19937_64 rng(spec.seed * 1000003u + uint64_t(a.label()));
  std::uniform_int_distribution<int> nframes(spec.video_min_frames,
                                             spec.video_max_frames);
  std::uniform_int_distribution<int> speed(1, 2);
  std::uniform_int_distribution<int> dir(0, 3);
  const int F = nframes(rng);
  const int v = speed(rng);
  static const int dr[4] = {0, 0, 1, -1};
  static const int dc[4] = {1, -1, 0, 0};
  const int d = dir(rng);
  std::vector<Image> frames;
  for (int f = 0; f < F; ++f)
    frames.push_back(render_image(spec, a, int64_t(f) * v * dr[d],
                                  int64_t(f) * v * dc[d]));
  return frames;
}

// Disjoint-by-combination split: a seeded shuffle of the 64 labels.
struct CorpusSplit {
  std::vector<int> train_labels;
  std::vector<int> eval_labels;
};

inline CorpusSplit make_split(const SyntheticSpec& spec) {
  std::vector<int> labels(Attributes::kCount);
  for (int i = 0; i < Attributes::kCount; ++i) labels[i] = i;
  std::mt19937_64 rng(spec.seed ^ 0x5eedu);
  std::shuffle(labels.begin(), labels.end(), rng);
  const size_t n_eval =
      size_t(std::lround(spec.eval_fraction * Attributes::kCount));
  CorpusSplit s;
  s.eval_labels.assign(labels.begin(), labels.begin() + n_eval);
  s.train_labels.assign(labels.begin() + n_eval, labels.end());
  return s;
}

}  // namespace rqunify
