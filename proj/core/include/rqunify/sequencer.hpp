#pragma once

// Unified multimodal token sequences: text tokens and CodeStack-carrying
// visual slots, bracketed by modality boundary specials, with per-form loss
// masks and the CFG conditional/unconditional pairing.

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "rqunify/data.hpp"
#include "rqunify/errors.hpp"
#include "rqunify/quantizer.hpp"

namespace rqunify {

// Text-stream vocabulary: word ids first, then the reserved specials.
// Visual positions are not vocabulary ids; they are slots carrying stacks.
class UnifiedVocab {
 public:
  explicit UnifiedVocab(const TextVocab& text) : text_(text) {
    const int64_t v = text.size();
    null_cond = v + 0;
    bos = v + 1;
    eos = v + 2;
    pad = v + 3;
    image_start = v + 4;
    image_end = v + 5;
    video_start = v + 6;
    video_end = v + 7;
  }

  const TextVocab& text() const { return text_; }
  int64_t text_size() const { return text_.size(); }
  int64_t size() const { return text_.size() + 8; }

  bool is_special(int64_t id) const { return id >= text_.size(); }

  std::string name(int64_t id) const {
    if (id < text_.size()) return text_.word(id);
    if (id == null_cond) return "<null_cond>";
    if (id == bos) return "<bos>";
    if (id == eos) return "<eos>";
    if (id == pad) return "<pad>";
    if (id == image_start) return "<image_start>";
    if (id == image_end) return "<image_end>";
    if (id == video_start) return "<video_start>";
    if (id == video_end) return "<video_end>";
    return "<invalid>";
  }

  int64_t null_cond, bos, eos, pad;
  int64_t image_start, image_end, video_start, video_end;

 private:
  TextVocab text_;
};

struct SeqElement {
  enum class Kind { Text, Visual };
  Kind kind = Kind::Text;
  int64_t text_id = -1;  // valid iff kind == Text
  CodeStack stack;       // valid iff kind == Visual

  static SeqElement text(int64_t id) {
    SeqElement e;
    e.kind = Kind::Text;
    e.text_id = id;
    return e;
  }
  static SeqElement visual(CodeStack s) {
    SeqElement e;
    e.kind = Kind::Visual;
    e.stack = std::move(s);
    return e;
  }
  bool is_text() const { return kind == Kind::Text; }
  bool is_visual() const { return kind == Kind::Visual; }
};

enum class DataForm { ImageText, TextImage, TextVideo, InterleavedImageText };
// [video, text] is intentionally not a pre-training form.

inline std::string form_name(DataForm f) {
  switch (f) {
    case DataForm::ImageText: return "image_text";
    case DataForm::TextImage: return "text_image";
    case DataForm::TextVideo: return "text_video";
    default: return "interleaved";
  }
}

inline DataForm form_from_name(const std::string& s) {
  if (s == "image_text") return DataForm::ImageText;
  if (s == "text_image") return DataForm::TextImage;
  if (s == "text_video") return DataForm::TextVideo;
  if (s == "interleaved") return DataForm::InterleavedImageText;
  if (s == "video_text")
    throw ConfigError("the [video, text] form is excluded from pre-training");
  throw ConfigError("unknown data form: " + s);
}

// One bracketed run of visual slots inside a sample.
struct VisualBlock {
  int64_t begin = 0;   // index of the first visual element
  int64_t count = 0;   // number of visual elements
  int64_t height = 0, width = 0;
  int64_t frames = 1;  // > 1 for video blocks
  bool video = false;
};

struct MultimodalSample {
  DataForm form = DataForm::TextImage;
  std::vector<SeqElement> elements;
  std::vector<bool> loss_mask;  // per position, targets of the loss
  std::vector<VisualBlock> blocks;

  int64_t length() const { return int64_t(elements.size()); }

  // Round-trip extraction of the visual content.
  std::vector<CodeGrid> extract_grids() const {
    std::vector<CodeGrid> out;
    for (const auto& b : blocks) {
      for (int64_t f = 0; f < b.frames; ++f) {
        CodeGrid g;
        g.height = b.height;
        g.width = b.width;
        for (int64_t p = 0; p < b.height * b.width; ++p)
          g.stacks.push_back(
              elements[b.begin + f * b.height * b.width + p].stack);
        out.push_back(std::move(g));
      }
    }
    return out;
  }
};

// Row-major flattening of frame grids; frames concatenated directly with no
// per-frame separators.
inline std::vector<SeqElement> flatten_video(const std::vector<CodeGrid>& frames) {
  if (frames.empty()) throw ContractError("flatten_video: no frames");
  for (const auto& f : frames)
    if (f.height != frames[0].height || f.width != frames[0].width ||
        f.depth() != frames[0].depth())
      throw ContractError("flatten_video: frame shapes differ");
  std::vector<SeqElement> out;
  for (const auto& f : frames)
    for (const auto& st : f.stacks) out.push_back(SeqElement::visual(st));
  return out;
}

namespace detail {

inline void append_text(MultimodalSample& s, const std::vector<int64_t>& ids,
                        bool supervised) {
  for (int64_t id : ids) {
    s.elements.push_back(SeqElement::text(id));
    s.loss_mask.push_back(supervised);
  }
}

inline void append_visual_block(MultimodalSample& s, const UnifiedVocab& v,
                                const std::vector<CodeGrid>& frames,
                                bool video, bool supervised) {
  const int64_t open = video ? v.video_start : v.image_start;
  const int64_t close = video ? v.video_end : v.image_end;
  // Boundary specials on the supervised side are themselves supervised.
  s.elements.push_back(SeqElement::text(open));
  s.loss_mask.push_back(supervised);
  VisualBlock b;
  b.begin = int64_t(s.elements.size());
  b.height = frames[0].height;
  b.width = frames[0].width;
  b.frames = int64_t(frames.size());
  b.video = video;
  auto toks = flatten_video(frames);
  b.count = int64_t(toks.size());
  for (auto& t : toks) {
    s.elements.push_back(std::move(t));
    s.loss_mask.push_back(supervised);
  }
  s.blocks.push_back(b);
  s.elements.push_back(SeqElement::text(close));
  s.loss_mask.push_back(supervised);
}

}  // namespace detail

// Builds one training sample. Ordering, bracketing and the loss mask are
// pure functions of the form:
//   ImageText   -> bos [img] caption eos      supervised: caption + eos
//   TextImage   -> bos caption [img]          supervised: visual + brackets
//   TextVideo   -> bos caption [video]        supervised: visual + brackets
//   Interleaved -> bos t0 [img] t1 [img] ...  supervised: text + eos only
inline MultimodalSample build_sample(DataForm form, const UnifiedVocab& vocab,
                                     const std::vector<int64_t>& text,
                                     const std::vector<CodeGrid>& visuals) {
  MultimodalSample s;
  s.form = form;
  switch (form) {
    case DataForm::ImageText: {
      if (visuals.size() != 1)
        throw ContractError("ImageText requires exactly one grid");
      detail::append_text(s, {vocab.bos}, false);
      detail::append_visual_block(s, vocab, {visuals[0]}, false, false);
      detail::append_text(s, text, true);
      detail::append_text(s, {vocab.eos}, true);
      break;
    }
    case DataForm::TextImage: {
      if (visuals.size() != 1)
        throw ContractError("TextImage requires exactly one grid");
      detail::append_text(s, {vocab.bos}, false);
      detail::append_text(s, text, false);
      detail::append_visual_block(s, vocab, {visuals[0]}, false, true);
      break;
    }
    case DataForm::TextVideo: {
      if (visuals.size() < 2)
        throw ContractError("TextVideo requires at least two frame grids");
      detail::append_text(s, {vocab.bos}, false);
      detail::append_text(s, text, false);
      detail::append_visual_block(s, vocab, visuals, true, true);
      break;
    }
    case DataForm::InterleavedImageText: {
      if (visuals.empty())
        throw ContractError("Interleaved requires at least one grid");
      detail::append_text(s, {vocab.bos}, false);
      // text split into |visuals|+1 contiguous chunks, as even as possible
      const size_t chunks = visuals.size() + 1;
      const size_t per = (text.size() + chunks - 1) / chunks;
      size_t off = 0;
      for (size_t i = 0; i < visuals.size(); ++i) {
        size_t end = std::min(text.size(), off + per);
        detail::append_text(
            s, {text.begin() + off, text.begin() + end}, true);
        off = end;
        detail::append_visual_block(s, vocab, {visuals[i]}, false, false);
      }
      detail::append_text(s, {text.begin() + off, text.end()}, true);
      detail::append_text(s, {vocab.eos}, true);
      break;
    }
  }
  return s;
}

// Conditional/unconditional twin for classifier-free guidance: the entire
// pre-visual text condition collapses to the single <null_cond> token; the
// visual region is untouched. Idempotent on the unconditional member.
inline std::pair<MultimodalSample, MultimodalSample> make_cfg_pair(
    const MultimodalSample& sample, const UnifiedVocab& vocab) {
  if (sample.form != DataForm::TextImage && sample.form != DataForm::TextVideo)
    throw ContractError("make_cfg_pair supports TextImage/TextVideo only");
  if (sample.blocks.size() != 1)
    throw ContractError("make_cfg_pair: expected a single visual block");
  MultimodalSample uncond;
  uncond.form = sample.form;
  const int64_t visual_open = sample.blocks[0].begin - 1;
  // bos, then the null condition
  uncond.elements.push_back(sample.elements[0]);
  uncond.loss_mask.push_back(false);
  uncond.elements.push_back(SeqElement::text(vocab.null_cond));
  uncond.loss_mask.push_back(false);
  VisualBlock b = sample.blocks[0];
  const int64_t shift = visual_open - 2;  // dropped condition length delta
  for (int64_t i = visual_open; i < sample.length(); ++i) {
    uncond.elements.push_back(sample.elements[i]);
    uncond.loss_mask.push_back(sample.loss_mask[i]);
  }
  b.begin -= shift;
  uncond.blocks.push_back(b);
  return {sample, uncond};
}

// Pre-training condition dropout: TextImage/TextVideo samples are replaced
// by their unconditional twin with the given probability.
inline MultimodalSample apply_condition_dropout(const MultimodalSample& s,
                                                const UnifiedVocab& vocab,
                                                double rate,
                                                std::mt19937_64& rng) {
  if (s.form != DataForm::TextImage && s.form != DataForm::TextVideo) return s;
  std::uniform_real_distribution<double> u(0.0, 1.0);
  if (u(rng) >= rate) return s;
  return make_cfg_pair(s, vocab).second;
}

// Scans a sample and throws on unbalanced, nested or mismatched brackets.
inline void check_bracket_integrity(const MultimodalSample& s,
                                    const UnifiedVocab& v) {
  int64_t open = -1;  // id of the currently open bracket
  for (const auto& e : s.elements) {
    if (e.is_visual()) {
      if (open < 0) throw ContractError("visual slot outside a bracket");
      continue;
    }
    int64_t id = e.text_id;
    if (id == v.image_start || id == v.video_start) {
      if (open >= 0) throw ContractError("nested visual bracket");
      open = id;
    } else if (id == v.image_end || id == v.video_end) {
      int64_t expect = (open == v.image_start) ? v.image_end : v.video_end;
      if (open < 0 || id != expect)
        throw ContractError("mismatched visual bracket");
      open = -1;
    } else if (open >= 0) {
      throw ContractError("text token inside a visual bracket");
    }
  }
  if (open >= 0) throw ContractError("unclosed visual bracket");
}

}  // namespace rqunify
