#pragma once

// Experiment drivers shared by the CLI and the test suite: corpus
// generation, staged tower training, multimodal training over the frozen
// tower, sampling, and evaluation. Every driver is deterministic given
// (config, seed) and owns its output directory through a lock file.

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "rqunify/checkpoint.hpp"
#include "rqunify/config.hpp"
#include "rqunify/generator.hpp"
#include "rqunify/metrics.hpp"
#include "rqunify/probe.hpp"
#include "rqunify/recipes.hpp"
#include "rqunify/tower.hpp"

namespace rqunify {

namespace fs = std::filesystem;

// RQUNIFY_OUT, when set, overrides the output root for relative out_dir.
inline std::string resolve_out_dir(const ExperimentConfig& cfg) {
  fs::path p(cfg.out_dir);
  if (p.is_absolute()) return p.string();
  if (const char* root = std::getenv("RQUNIFY_OUT"))
    return (fs::path(root) / p).string();
  return p.string();
}

// One run owns one output directory. The lock is advisory: concurrent
// ablation runs use disjoint directories.
class DirLock {
 public:
  explicit DirLock(const std::string& dir) : path_(fs::path(dir) / ".lock") {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create output directory: " + dir);
    if (fs::exists(path_))
      throw IoError("output directory is locked by another run: " + dir +
                    " (remove " + path_.string() + " if stale)");
    std::ofstream f(path_);
    if (!f) throw IoError("cannot create lock file: " + path_.string());
  }
  ~DirLock() {
    std::error_code ec;
    fs::remove(path_, ec);
  }
  DirLock(const DirLock&) = delete;
  DirLock& operator=(const DirLock&) = delete;

 private:
  fs::path path_;
};

// ---- corpus ---------------------------------------------------------------

struct GenDataResult {
  int images = 0;
  int video_frames = 0;
  std::string index_path;
};

inline GenDataResult gen_dataset(const ExperimentConfig& cfg,
                                 const std::string& out, bool force) {
  fs::path dir = fs::path(out) / "data";
  if (fs::exists(dir) && !fs::is_empty(dir)) {
    if (!force)
      throw IoError("dataset directory " + dir.string() +
                    " is not empty; pass --force to overwrite");
    fs::remove_all(dir);
  }
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create dataset directory: " + dir.string());

  auto spec = cfg.synthetic_spec();
  auto split = make_split(spec);
  std::vector<bool> is_eval(Attributes::kCount, false);
  for (int l : split.eval_labels) is_eval[l] = true;

  GenDataResult res;
  std::ofstream index(dir / "index.jsonl", std::ios::trunc);
  if (!index) throw IoError("cannot write corpus index");
  for (int label = 0; label < Attributes::kCount; ++label) {
    auto a = Attributes::from_label(label);
    std::string img_name = "img_" + std::to_string(label) + ".ppm";
    write_ppm((dir / img_name).string(), render_image(spec, a));
    ++res.images;
    auto frames = render_video(spec, a);
    std::vector<std::string> frame_names;
    for (size_t f = 0; f < frames.size(); ++f) {
      frame_names.push_back("vid_" + std::to_string(label) + "_f" +
                            std::to_string(f) + ".ppm");
      write_ppm((dir / frame_names.back()).string(), frames[f]);
      ++res.video_frames;
    }
    nlohmann::json rec;
    rec["label"] = label;
    rec["caption"] = caption_for(a);
    rec["image"] = img_name;
    rec["frames"] = frame_names;
    rec["split"] = is_eval[label] ? "eval" : "train";
    index << rec.dump() << "\n";
  }
  if (!index) throw IoError("corpus index write failed");
  res.index_path = (dir / "index.jsonl").string();
  return res;
}

// ---- tower checkpointing --------------------------------------------------

template <typename S>
StateDictT<S> tower_state(TowerT<S>& tower, AdamT<S>& opt,
                          const std::string& hash, int64_t step) {
  StateDictT<S> sd;
  sd.config_hash = hash;
  sd.step = step;
  pack_params(sd, "tower/", tower.params());
  pack_codebook(sd, "tower/", tower.codebook());
  pack_adam(sd, "tower/", opt, tower.params());
  return sd;
}

template <typename S>
void load_tower_state(const StateDictT<S>& sd, TowerT<S>& tower,
                      AdamT<S>& opt) {
  unpack_params(sd, "tower/", tower.params());
  unpack_codebook(sd, "tower/", tower.codebook());
  unpack_adam(sd, "tower/", opt, tower.params());
}

// ---- tower training driver ------------------------------------------------

struct TowerRunResult {
  RecipeResult recipe;
  std::string ckpt_path;
  std::string metrics_path;
};

inline TowerRunResult cmd_tower(const ExperimentConfig& cfg,
                                const std::string& out,
                                const std::string& resume = "") {
  TextVocab vocab;
  auto ds = make_toy_dataset(cfg.synthetic_spec(), vocab);
  std::mt19937_64 rng(cfg.seed);
  Tower tower(cfg.tower_config(vocab.size()), cfg.quantizer_config(), rng);
  AdamT<float> opt({.lr = cfg.tower_lr});
  RecipeConfig rc = cfg.recipe_config();
  RecipeMode mode = recipe_from_name(cfg.recipe);
  const std::string hash = config_hash(cfg.canonical());

  if (!resume.empty()) {
    auto sd = load_checkpoint<float>(resume);
    if (sd.config_hash != hash)
      throw ConfigError("checkpoint " + resume +
                        " was written under a different configuration");
    load_tower_state(sd, tower, opt);
    rc.resume_joint_from = int(sd.step);
  }

  TowerRunResult res;
  res.metrics_path = (fs::path(out) / "tower_metrics.jsonl").string();
  MetricsWriter mw(res.metrics_path, cfg.deterministic);
  std::string last_phase;
  auto on_metrics = [&](const RecipeMetrics& m) {
    int64_t gstep =
        m.phase == "stage_a" ? m.step : int64_t(rc.stage_a_steps) + m.step;
    if (m.phase == "joint") gstep = m.step;
    if (!last_phase.empty() && last_phase != m.phase)
      mw.write({gstep, 0, m.phase, {{"stage_transition", 1.0}}});
    last_phase = m.phase;
    MetricsRecord rec;
    rec.step = gstep;
    rec.phase = m.phase;
    rec.values = {{"contra", m.contra},   {"recon", m.recon},
                  {"commit", m.commit},   {"total", m.total},
                  {"retrieval", m.retrieval}, {"recon_mse", m.recon_mse}};
    mw.write(rec);
    // autosave inside the joint phase so interrupted runs can resume
    if (m.phase != "stage_a") {
      auto sd = tower_state(tower, opt, hash, m.step);
      save_checkpoint((fs::path(out) / "tower_autosave.ckpt").string(), sd);
    }
  };
  res.recipe = run_recipe(mode, tower, opt, ds, rc, on_metrics);

  MetricsRecord fin;
  fin.step = int64_t(rc.stage_a_steps) + rc.stage_b_steps;
  fin.phase = "final";
  fin.values = {{"retrieval", res.recipe.final_retrieval},
                {"recon_mse", res.recipe.final_recon_mse},
                {"diverged", res.recipe.diverged ? 1.0 : 0.0}};
  mw.write(fin);

  auto sd = tower_state(tower, opt, hash,
                        mode == RecipeMode::JointFromScratch
                            ? rc.stage_a_steps + rc.stage_b_steps
                            : rc.stage_b_steps);
  res.ckpt_path = (fs::path(out) / "tower.ckpt").string();
  save_checkpoint(res.ckpt_path, sd);
  return res;
}

// ---- frozen-tower tokenize / detokenize -----------------------------------

template <typename S>
CodeGrid tower_tokenize(TowerT<S>& tower, const Image& img) {
  auto feats = tower.encode_image(img);
  const auto& cfg = tower.config();
  CodeGrid grid;
  grid.height = grid.width = cfg.grid_side();
  const int64_t C = cfg.embed_dim;
  for (int64_t p = 0; p < cfg.patches(); ++p) {
    std::vector<S> z(feats.data().begin() + p * C,
                     feats.data().begin() + (p + 1) * C);
    grid.stacks.push_back(
        residual_quantize(z, tower.codebook(), tower.codebook().config().depth)
            .stack);
  }
  return grid;
}

template <typename S>
Image tower_detokenize(TowerT<S>& tower, const CodeGrid& grid) {
  const auto& cfg = tower.config();
  if (grid.positions() != cfg.patches())
    throw ContractError("grid has " + std::to_string(grid.positions()) +
                        " positions, tower expects " +
                        std::to_string(cfg.patches()));
  auto vals = dequantize_grid(grid, tower.codebook());
  auto t = TensorT<S>::from_data({cfg.patches(), cfg.embed_dim},
                                 std::move(vals), false);
  return tower.patches_to_image(tower.decode_features(t).data());
}

// ---- multimodal training --------------------------------------------------

template <typename S>
StateDictT<S> generator_state(GeneratorT<S>& gen, AdamT<S>& opt,
                              const std::string& hash, int64_t step) {
  StateDictT<S> sd;
  sd.config_hash = hash;
  sd.step = step;
  pack_params(sd, "gen/", gen.params());
  pack_adam(sd, "gen/", opt, gen.params());
  return sd;
}

// Pre-tokenized training pool: the tower is frozen, so every label's code
// grids are computed once.
struct TokenizedCorpus {
  std::vector<int> labels;
  std::vector<std::vector<int64_t>> captions;
  std::vector<CodeGrid> image_grids;
  std::vector<std::vector<CodeGrid>> video_grids;
};

template <typename S>
TokenizedCorpus tokenize_corpus(TowerT<S>& tower, const SyntheticSpec& spec,
                                const TextVocab& vocab,
                                const std::vector<int>& labels) {
  TokenizedCorpus tc;
  tc.labels = labels;
  for (int label : labels) {
    auto a = Attributes::from_label(label);
    tc.captions.push_back(vocab.encode(caption_for(a)));
    tc.image_grids.push_back(tower_tokenize(tower, render_image(spec, a)));
    std::vector<CodeGrid> vg;
    for (const auto& f : render_video(spec, a))
      vg.push_back(tower_tokenize(tower, f));
    tc.video_grids.push_back(std::move(vg));
  }
  return tc;
}

// Draws one training sample according to the configured form mixture.
// VideoText does not exist as a form and can never be drawn.
inline MultimodalSample draw_sample(const ExperimentConfig& cfg,
                                    const TokenizedCorpus& tc,
                                    const UnifiedVocab& uv,
                                    std::mt19937_64& rng,
                                    DataForm* drawn_form = nullptr) {
  const double w[4] = {cfg.mix_image_text, cfg.mix_text_image,
                       cfg.mix_text_video, cfg.mix_interleaved};
  double total = w[0] + w[1] + w[2] + w[3];
  double u = double(rng() >> 11) * 0x1p-53 * total;
  int pick = 0;
  double acc = w[0];
  while (pick < 3 && u >= acc) acc += w[++pick];
  std::uniform_int_distribution<size_t> li(0, tc.labels.size() - 1);
  size_t i = li(rng);
  DataForm form;
  MultimodalSample s;
  switch (pick) {
    case 0:
      form = DataForm::ImageText;
      s = build_sample(form, uv, tc.captions[i], {tc.image_grids[i]});
      break;
    case 1:
      form = DataForm::TextImage;
      s = build_sample(form, uv, tc.captions[i], {tc.image_grids[i]});
      s = apply_condition_dropout(s, uv, cfg.condition_dropout, rng);
      break;
    case 2:
      form = DataForm::TextVideo;
      s = build_sample(form, uv, tc.captions[i], tc.video_grids[i]);
      s = apply_condition_dropout(s, uv, cfg.condition_dropout, rng);
      break;
    default: {
      form = DataForm::InterleavedImageText;
      size_t j = li(rng);
      auto text = tc.captions[i];
      text.insert(text.end(), tc.captions[j].begin(), tc.captions[j].end());
      s = build_sample(form, uv, text,
                       {tc.image_grids[i], tc.image_grids[j]});
      break;
    }
  }
  if (drawn_form) *drawn_form = form;
  return s;
}

struct TrainMMResult {
  double first_loss = 0, last_loss = 0;
  bool diverged = false;
  std::string ckpt_path;
  std::string metrics_path;
};

inline TrainMMResult cmd_train_mm(const ExperimentConfig& cfg,
                                  const std::string& out,
                                  const std::string& tower_ckpt) {
  TextVocab vocab;
  UnifiedVocab uv(vocab);
  std::mt19937_64 trng(cfg.seed);
  Tower tower(cfg.tower_config(vocab.size()), cfg.quantizer_config(), trng);
  {
    if (!fs::exists(tower_ckpt))
      throw IoError("tower checkpoint not found: " + tower_ckpt);
    auto sd = load_checkpoint<float>(tower_ckpt);
    AdamT<float> scratch;
    load_tower_state(sd, tower, scratch);  // tower stays frozen from here on
  }
  auto spec = cfg.synthetic_spec();
  auto split = make_split(spec);
  auto tc = tokenize_corpus(tower, spec, vocab, split.train_labels);

  std::mt19937_64 grng(cfg.seed ^ 0xb0c0ull);
  Generator gen(cfg.backbone_config(uv.size()), grng);
  AdamT<float> opt({.lr = cfg.mm_lr});
  const std::string hash = config_hash(cfg.canonical());

  TrainMMResult res;
  res.metrics_path = (fs::path(out) / "mm_metrics.jsonl").string();
  MetricsWriter mw(res.metrics_path, cfg.deterministic);
  for (int64_t step = 0; step < cfg.mm_steps; ++step) {
    std::mt19937_64 rng(step_seed(cfg.seed, 3, uint64_t(step)));
    gen.params().zero_grad();
    Tensor loss;
    double text_v = 0, vis_v = 0;
    for (int64_t b = 0; b < cfg.mm_batch; ++b) {
      auto s = draw_sample(cfg, tc, uv, rng);
      auto h = gen.forward(s, tower.codebook());
      auto tl = gen.text_loss(h, s);
      auto vl = gen.visual_loss(h, s, tower.codebook());
      text_v += tl.loss.item();
      vis_v += vl.loss.item();
      auto l = add(tl.loss, vl.loss);
      loss = loss.defined() ? add(loss, l) : l;
    }
    loss = scale(loss, float(1.0 / double(cfg.mm_batch)));
    double lv = loss.item();
    if (step == 0) res.first_loss = lv;
    res.last_loss = lv;
    if (!std::isfinite(lv)) {
      res.diverged = true;
      mw.write({step, 0, "mm", {{"diverged", 1.0}}});
      break;
    }
    backward(loss);
    opt.step(gen.params().tensors, &gen.params().trainable);
    if ((step + 1) % cfg.eval_every == 0 || step + 1 == cfg.mm_steps) {
      MetricsRecord rec;
      rec.step = step + 1;
      rec.phase = "mm";
      rec.values = {{"total", lv},
                    {"text", text_v / double(cfg.mm_batch)},
                    {"visual", vis_v / double(cfg.mm_batch)}};
      mw.write(rec);
    }
  }
  auto sd = generator_state(gen, opt, hash, cfg.mm_steps);
  res.ckpt_path = (fs::path(out) / "mm.ckpt").string();
  save_checkpoint(res.ckpt_path, sd);
  return res;
}

// ---- generation -----------------------------------------------------------

struct GeneratedSample {
  std::string file;
  double cfg_scale = 0;
  GenResultMeta meta;
  CodeGrid grid;
};

struct GenerateResult {
  std::vector<GeneratedSample> samples;
  std::string records_path;
};

inline GenerateResult cmd_generate(const ExperimentConfig& cfg,
                                   const std::string& out,
                                   const std::string& tower_ckpt,
                                   const std::string& mm_ckpt,
                                   const std::string& prompt,
                                   const std::vector<double>& scales) {
  TextVocab vocab;
  UnifiedVocab uv(vocab);
  std::mt19937_64 trng(cfg.seed);
  Tower tower(cfg.tower_config(vocab.size()), cfg.quantizer_config(), trng);
  {
    auto sd = load_checkpoint<float>(tower_ckpt);
    AdamT<float> scratch;
    load_tower_state(sd, tower, scratch);
  }
  std::mt19937_64 grng(cfg.seed ^ 0xb0c0ull);
  Generator gen(cfg.backbone_config(uv.size()), grng);
  {
    auto sd = load_checkpoint<float>(mm_ckpt);
    unpack_params(sd, "gen/", gen.params());
  }
  auto prompt_ids = vocab.encode(prompt);  // rejects unknown words

  fs::path gdir = fs::path(out) / "gen";
  std::error_code ec;
  fs::create_directories(gdir, ec);
  if (ec) throw IoError("cannot create " + gdir.string());

  GenerateResult res;
  res.records_path = (gdir / "generations.jsonl").string();
  std::ofstream rec_out(res.records_path, std::ios::app);
  if (!rec_out) throw IoError("cannot open generation records");
  for (double s : scales) {
    GenParams gp;
    gp.cfg_scale = s;
    gp.temperature = cfg.temperature;
    gp.top_k = std::min<int64_t>(cfg.top_k, cfg.codebook_size);
    gp.grid_h = gp.grid_w = cfg.image_size / cfg.patch_size;
    gp.seed = cfg.seed;
    GeneratedSample g;
    g.cfg_scale = s;
    g.grid = gen.generate_visual(prompt_ids, uv, tower.codebook(), gp,
                                 &g.meta);
    std::ostringstream name;
    name << "gen_s";
    name << s;
    name << "_seed" << cfg.seed << ".ppm";
    g.file = (gdir / name.str()).string();
    write_ppm(g.file, tower_detokenize(tower, g.grid));
    nlohmann::json j;
    j["prompt"] = prompt;
    j["cfg_scale"] = s;
    j["seed"] = cfg.seed;
    j["file"] = name.str();
    j["empty"] = g.meta.empty;
    j["positions"] = g.meta.positions;
    rec_out << j.dump() << "\n";
    res.samples.push_back(std::move(g));
  }
  return res;
}

// ---- evaluation -----------------------------------------------------------

struct EvalResult {
  double retrieval = 0;
  double recon_mse = 0;
  std::vector<double> depth_err;  // mean residual norm after each depth
  double probe_acc = -1;          // at cfg.cfg_scale; -1 when not evaluated
  double probe_acc_uncond = -1;   // at s = 0
  std::string metrics_path;
};

// Probe trained on ground-truth renders only, then frozen.
template <typename S>
ProbeT<S> train_eval_probe(const ExperimentConfig& cfg) {
  auto spec = cfg.synthetic_spec();
  std::vector<Image> imgs;
  std::vector<Attributes> labels;
  for (int l = 0; l < Attributes::kCount; ++l) {
    labels.push_back(Attributes::from_label(l));
    imgs.push_back(render_image(spec, labels.back()));
  }
  ProbeConfig pc;
  pc.image_size = cfg.image_size;
  pc.seed = cfg.seed;
  return train_probe<S>(pc, imgs, labels);
}

inline EvalResult cmd_eval(const ExperimentConfig& cfg, const std::string& out,
                           const std::string& tower_ckpt,
                           const std::string& mm_ckpt = "",
                           int gen_count = 64) {
  TextVocab vocab;
  UnifiedVocab uv(vocab);
  std::mt19937_64 trng(cfg.seed);
  Tower tower(cfg.tower_config(vocab.size()), cfg.quantizer_config(), trng);
  {
    auto sd = load_checkpoint<float>(tower_ckpt);
    AdamT<float> scratch;
    load_tower_state(sd, tower, scratch);
  }
  auto spec = cfg.synthetic_spec();
  auto ds = make_toy_dataset(spec, vocab);

  EvalResult res;
  res.retrieval = tower.retrieval_eval(ds.eval_images, ds.eval_caps, true);
  res.recon_mse = tower.mean_recon_mse(ds.eval_images);

  // mean residual norm after each depth over all eval patches
  const int64_t D = tower.codebook().config().depth;
  const int64_t C = tower.config().embed_dim;
  res.depth_err.assign(size_t(D), 0.0);
  int64_t n = 0;
  for (const auto& img : ds.eval_images) {
    auto feats = tower.encode_image(img);
    for (int64_t p = 0; p < tower.config().patches(); ++p) {
      std::vector<float> z(feats.data().begin() + p * C,
                           feats.data().begin() + (p + 1) * C);
      auto q = residual_quantize(z, tower.codebook(), D);
      for (int64_t d = 0; d < D; ++d) {
        double e = 0;
        for (float v : q.residuals[d + 1]) e += double(v) * v;
        res.depth_err[d] += std::sqrt(e);
      }
      ++n;
    }
  }
  for (auto& e : res.depth_err) e /= double(n);

  if (!mm_ckpt.empty()) {
    std::mt19937_64 grng(cfg.seed ^ 0xb0c0ull);
    Generator gen(cfg.backbone_config(uv.size()), grng);
    auto sd = load_checkpoint<float>(mm_ckpt);
    unpack_params(sd, "gen/", gen.params());
    auto probe = train_eval_probe<float>(cfg);

    auto run_probe = [&](double s) {
      std::vector<Image> imgs;
      std::vector<Attributes> labels;
      for (int i = 0; i < gen_count; ++i) {
        // prompts come from the training captions: this measures generation
        // quality and conditioning, not compositional generalization
        int label = ds.train_labels[size_t(i) % ds.train_labels.size()];
        auto a = Attributes::from_label(label);
        GenParams gp;
        gp.cfg_scale = s;
        gp.temperature = cfg.temperature;
        gp.top_k = std::min<int64_t>(cfg.top_k, cfg.codebook_size);
        gp.grid_h = gp.grid_w = cfg.image_size / cfg.patch_size;
        gp.seed = cfg.seed + uint64_t(i) * 7919;
        auto grid = gen.generate_visual(vocab.encode(caption_for(a)), uv,
                                        tower.codebook(), gp);
        imgs.push_back(tower_detokenize(tower, grid));
        labels.push_back(a);
      }
      return probe.accuracy(imgs, labels);
    };
    res.probe_acc = run_probe(cfg.cfg_scale);
    res.probe_acc_uncond = run_probe(0.0);
  }

  res.metrics_path = (fs::path(out) / "eval_metrics.jsonl").string();
  MetricsWriter mw(res.metrics_path, cfg.deterministic);
  MetricsRecord rec;
  rec.step = 0;
  rec.phase = "eval";
  rec.values = {{"retrieval", res.retrieval}, {"recon_mse", res.recon_mse}};
  for (int64_t d = 0; d < int64_t(res.depth_err.size()); ++d)
    rec.values["depth_err_" + std::to_string(d + 1)] = res.depth_err[d];
  if (res.probe_acc >= 0) {
    rec.values["probe_acc"] = res.probe_acc;
    rec.values["probe_acc_uncond"] = res.probe_acc_uncond;
  }
  mw.write(rec);
  return res;
}

// ---- ablation matrix ------------------------------------------------------

struct AblateResult {
  struct Row {
    std::string mode;
    double retrieval = 0, recon_mse = 0;
    bool diverged = false;
  };
  std::vector<Row> rows;
  std::string summary_path;
};

inline AblateResult cmd_ablate(const ExperimentConfig& cfg,
                               const std::string& out) {
  AblateResult res;
  res.summary_path = (fs::path(out) / "ablate_summary.jsonl").string();
  std::ofstream summary(res.summary_path, std::ios::trunc);
  if (!summary) throw IoError("cannot write ablation summary");
  for (RecipeMode mode :
       {RecipeMode::Final, RecipeMode::Failed1_TextCLIPOnly,
        RecipeMode::Failed2_RQVAEInit, RecipeMode::Failed3_FrozenVisionEnc,
        RecipeMode::Failed4_TrainableTextEnc, RecipeMode::JointFromScratch}) {
    ExperimentConfig sub = cfg;
    sub.recipe = recipe_name(mode);
    std::string subdir = (fs::path(out) / ("ablate_" + sub.recipe)).string();
    std::error_code ec;
    fs::create_directories(subdir, ec);
    if (ec) throw IoError("cannot create " + subdir);
    auto run = cmd_tower(sub, subdir);
    AblateResult::Row row;
    row.mode = sub.recipe;
    row.retrieval = run.recipe.final_retrieval;
    row.recon_mse = run.recipe.final_recon_mse;
    row.diverged = run.recipe.diverged;
    nlohmann::json j;
    j["mode"] = row.mode;
    j["retrieval"] = row.retrieval;
    j["recon_mse"] = row.recon_mse;
    j["diverged"] = row.diverged;
    summary << j.dump() << "\n";
    res.rows.push_back(std::move(row));
  }
  return res;
}

}  // namespace rqunify
