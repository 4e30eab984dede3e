// Harness and persistence layer: checkpoint round trips, config parsing,
// metrics files, dataset generation, sample mixture, resume, and the CLI
// error taxonomy (via subprocess).

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "rqunify/harness.hpp"

using namespace rqunify;
namespace fs = std::filesystem;

namespace {

// Small configuration so every driver finishes in well under a second.
ExperimentConfig tiny_cfg() {
  ExperimentConfig c;
  c.image_size = 16;
  c.patch_size = 4;
  c.embed_dim = 16;
  c.tower_heads = 2;
  c.enc_layers = 1;
  c.dec_layers = 1;
  c.text_layers = 1;
  c.proj_dim = 8;
  c.codebook_size = 16;
  c.depth = 2;
  c.stage_a_steps = 4;
  c.stage_b_steps = 6;
  c.tower_batch = 4;
  c.eval_every = 3;
  c.bb_layers = 1;
  c.bb_heads = 2;
  c.bb_model_dim = 32;
  c.bb_context_len = 128;
  c.depth_layers = 1;
  c.depth_heads = 2;
  c.mm_steps = 4;
  c.mm_batch = 2;
  c.top_k = 16;
  c.deterministic = true;
  return c;
}

std::string fresh_dir(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("rqtest_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p.string();
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(bool(in));
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

bool same_floats(const std::vector<float>& a, const std::vector<float>& b) {
  return a.size() == b.size() &&
         std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0;
}

}  // namespace

TEST_CASE("checkpoint round trip is bit exact") {
  StateDictT<float> sd;
  sd.config_hash = "cafebabe01234567";
  sd.step = 42;
  // values chosen to expose any text formatting: negative zero, denormal,
  // extremes
  sd.add("a/w", {2, 3}, {0.f, -0.f, 1e-45f, -3.4028235e38f, 0.1f, -1.f});
  sd.add("a/b", {3}, {1.f, 2.f, 3.f});

  std::string dir = fresh_dir("ckpt");
  std::string path = dir + "/t.ckpt";
  save_checkpoint(path, sd);
  auto back = load_checkpoint<float>(path);

  CHECK(back.config_hash == sd.config_hash);
  CHECK(back.step == sd.step);
  REQUIRE(back.arrays.size() == sd.arrays.size());
  for (size_t i = 0; i < sd.arrays.size(); ++i) {
    CHECK(back.arrays[i].name == sd.arrays[i].name);
    CHECK(back.arrays[i].shape == sd.arrays[i].shape);
    CHECK(same_floats(back.arrays[i].data, sd.arrays[i].data));
  }

  // saving again produces identical bytes
  std::string path2 = dir + "/t2.ckpt";
  save_checkpoint(path2, back);
  CHECK(slurp(path) == slurp(path2));
}

TEST_CASE("checkpoint rejects corruption and wrong scalar width") {
  std::string dir = fresh_dir("ckpt_bad");
  CHECK_THROWS_AS(load_checkpoint<float>(dir + "/missing.ckpt"), IoError);

  std::string garbage = dir + "/garbage.ckpt";
  std::ofstream(garbage) << "not a checkpoint at all";
  CHECK_THROWS_AS(load_checkpoint<float>(garbage), IoError);

  StateDictT<float> sd;
  sd.add("x", {4}, {1, 2, 3, 4});
  std::string path = dir + "/ok.ckpt";
  save_checkpoint(path, sd);
  CHECK_THROWS_AS(load_checkpoint<double>(path), IoError);

  // truncate the array payload
  std::string bytes = slurp(path);
  std::ofstream(dir + "/short.ckpt", std::ios::binary)
      << bytes.substr(0, bytes.size() - 8);
  CHECK_THROWS_AS(load_checkpoint<float>(dir + "/short.ckpt"), IoError);

  CHECK_THROWS_AS(sd.add("x", {1}, {0.f}), ContractError);
  CHECK_THROWS_AS(sd.add("y", {3}, {0.f}), ContractError);
  CHECK_THROWS_AS(sd.at("absent"), ContractError);
}

TEST_CASE("config parsing rejects unknown keys and the excluded form") {
  nlohmann::json j = {{"image_size", 16}, {"patch_size", 4}};
  CHECK_NOTHROW(ExperimentConfig::from_json(j));

  j["imge_size"] = 16;
  CHECK_THROWS_AS(ExperimentConfig::from_json(j), ConfigError);
  j.erase("imge_size");

  j["mix_video_text"] = 1.0;
  try {
    ExperimentConfig::from_json(j);
    FAIL("mix_video_text must be rejected");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("mix_video_text") != std::string::npos);
  }
  j.erase("mix_video_text");

  // a trainable text encoder is only reachable through the matching recipes
  j["stage_b_trainable_text"] = true;
  CHECK_THROWS_AS(ExperimentConfig::from_json(j), ConfigError);
  j["recipe"] = "failed4_trainable_text_enc";
  CHECK_NOTHROW(ExperimentConfig::from_json(j));

  CHECK_THROWS_AS(ExperimentConfig::from_json(nlohmann::json::array()),
                  ConfigError);
  CHECK_THROWS_AS(ExperimentConfig::from_json({{"image_size", "big"}}),
                  ConfigError);
  CHECK_THROWS_AS(ExperimentConfig::from_json({{"image_size", 15}}),
                  ConfigError);
}

TEST_CASE("config serialization round trips through canonical form") {
  auto c = tiny_cfg();
  c.recipe = "failed3_frozen_vision_enc";
  c.out_dir = "somewhere/else";
  auto back = ExperimentConfig::from_json(c.to_json());
  CHECK(back.canonical() == c.canonical());
  CHECK(config_hash(back.canonical()) == config_hash(c.canonical()));
  // any field change moves the hash
  back.seed += 1;
  CHECK(config_hash(back.canonical()) != config_hash(c.canonical()));
}

TEST_CASE("metrics writer enforces monotone steps and zeroes wall time") {
  std::string dir = fresh_dir("metrics");
  std::string path = dir + "/m.jsonl";
  {
    MetricsWriter mw(path, /*deterministic=*/true);
    mw.write({5, 0, "p", {{"loss", 1.5}}});
    mw.write({5, 0, "p", {{"loss", 1.25}}});
    CHECK_THROWS_AS(mw.write({3, 0, "p", {}}), ContractError);
    mw.write({9, 123.0, "q", {}});
  }
  std::ifstream in(path);
  std::string line;
  int lines = 0;
  while (std::getline(in, line)) {
    auto j = nlohmann::json::parse(line);
    CHECK(j.at("wall_time_s").get<double>() == 0.0);
    ++lines;
  }
  CHECK(lines == 3);
  CHECK_THROWS_AS(MetricsWriter(dir + "/no/such/dir/m.jsonl"), IoError);
}

TEST_CASE("dataset generation honors --force and is byte deterministic") {
  auto cfg = tiny_cfg();
  std::string a = fresh_dir("data_a");
  auto res = gen_dataset(cfg, a, false);
  CHECK(res.images == Attributes::kCount);
  CHECK(res.video_frames > 0);
  CHECK(fs::exists(res.index_path));

  // refuse to clobber without force, succeed with it
  CHECK_THROWS_AS(gen_dataset(cfg, a, false), IoError);
  CHECK_NOTHROW(gen_dataset(cfg, a, true));

  std::string b = fresh_dir("data_b");
  gen_dataset(cfg, b, false);
  CHECK(slurp(a + "/data/index.jsonl") == slurp(b + "/data/index.jsonl"));
  CHECK(slurp(a + "/data/img_0.ppm") == slurp(b + "/data/img_0.ppm"));
  CHECK(slurp(a + "/data/vid_5_f0.ppm") == slurp(b + "/data/vid_5_f0.ppm"));

  // index records reproduce the caption grammar and the split
  std::ifstream in(a + "/data/index.jsonl");
  std::string line;
  int train = 0, eval_n = 0;
  while (std::getline(in, line)) {
    auto j = nlohmann::json::parse(line);
    auto attrs = Attributes::from_label(j.at("label").get<int>());
    CHECK(j.at("caption").get<std::string>() == caption_for(attrs));
    (j.at("split") == "train" ? train : eval_n)++;
  }
  CHECK(train == Attributes::kCount / 2);
  CHECK(eval_n == Attributes::kCount / 2);
}

TEST_CASE("sample mixture matches the configured weights, no video-to-text") {
  auto cfg = tiny_cfg();
  TextVocab vocab;
  UnifiedVocab uv(vocab);
  std::mt19937_64 trng(7);
  Tower tower(cfg.tower_config(vocab.size()), cfg.quantizer_config(), trng);
  auto tc = tokenize_corpus(tower, cfg.synthetic_spec(), vocab, {0, 1, 2, 3});

  const int N = 10000;
  std::mt19937_64 rng(11);
  int counts[4] = {0, 0, 0, 0};
  for (int i = 0; i < N; ++i) {
    DataForm form;
    auto s = draw_sample(cfg, tc, uv, rng, &form);
    counts[int(form)]++;
    // a video can only ever be preceded by its text condition; every sample
    // that contains video frames must open with text right after <bos>
    bool has_video = false;
    for (const auto& e : s.elements)
      if (e.is_text() && e.text_id == uv.video_start) has_video = true;
    if (has_video) {
      CHECK(form == DataForm::TextVideo);
      REQUIRE(s.elements.size() > 1);
      CHECK(s.elements[1].is_text());
      CHECK(s.elements[1].text_id != uv.video_start);
    }
  }
  // weights 3:3:1:3
  CHECK(counts[0] + counts[1] + counts[2] + counts[3] == N);
  CHECK(std::abs(counts[0] / double(N) - 0.3) < 0.02);
  CHECK(std::abs(counts[1] / double(N) - 0.3) < 0.02);
  CHECK(std::abs(counts[2] / double(N) - 0.1) < 0.02);
  CHECK(std::abs(counts[3] / double(N) - 0.3) < 0.02);
}

TEST_CASE("condition dropout hits its configured rate") {
  auto cfg = tiny_cfg();
  cfg.mix_image_text = 0;
  cfg.mix_text_image = 1;
  cfg.mix_text_video = 0;
  cfg.mix_interleaved = 0;
  TextVocab vocab;
  UnifiedVocab uv(vocab);
  std::mt19937_64 trng(7);
  Tower tower(cfg.tower_config(vocab.size()), cfg.quantizer_config(), trng);
  auto tc = tokenize_corpus(tower, cfg.synthetic_spec(), vocab, {0, 1});

  const int N = 10000;
  std::mt19937_64 rng(13);
  int dropped = 0;
  for (int i = 0; i < N; ++i) {
    auto s = draw_sample(cfg, tc, uv, rng);
    for (const auto& e : s.elements)
      if (e.is_text() && e.text_id == uv.null_cond) {
        ++dropped;
        break;
      }
  }
  CHECK(std::abs(dropped / double(N) - cfg.condition_dropout) < 0.01);
}

TEST_CASE("tower run resumed from a mid-phase checkpoint is bit exact") {
  auto cfg = tiny_cfg();
  TextVocab vocab;
  auto ds = make_toy_dataset(cfg.synthetic_spec(), vocab);
  RecipeConfig rc = cfg.recipe_config();

  // uninterrupted reference run
  std::mt19937_64 r1(cfg.seed);
  Tower full(cfg.tower_config(vocab.size()), cfg.quantizer_config(), r1);
  AdamT<float> full_opt({.lr = cfg.tower_lr});
  run_recipe(RecipeMode::Final, full, full_opt, ds, rc);

  // same run, capturing state at the joint-phase eval point (step 3 of 6)
  std::mt19937_64 r2(cfg.seed);
  Tower cut(cfg.tower_config(vocab.size()), cfg.quantizer_config(), r2);
  AdamT<float> cut_opt({.lr = cfg.tower_lr});
  StateDictT<float> mid;
  bool captured = false;
  run_recipe<float>(RecipeMode::Final, cut, cut_opt, ds, rc,
                    [&](const RecipeMetrics& m) {
                      if (m.phase == "stage_b" && m.step == 3 && !captured) {
                        mid = tower_state(cut, cut_opt, "h", 3);
                        captured = true;
                      }
                    });
  REQUIRE(captured);

  // restore into a differently initialized tower and finish the run
  std::mt19937_64 r3(cfg.seed + 999);
  Tower resumed(cfg.tower_config(vocab.size()), cfg.quantizer_config(), r3);
  AdamT<float> res_opt({.lr = cfg.tower_lr});
  load_tower_state(mid, resumed, res_opt);
  RecipeConfig rc2 = rc;
  rc2.resume_joint_from = 3;
  run_recipe(RecipeMode::Final, resumed, res_opt, ds, rc2);

  for (size_t i = 0; i < full.params().size(); ++i)
    CHECK(same_floats(full.params().tensors[i].data(),
                      resumed.params().tensors[i].data()));
  CHECK(same_floats(full.codebook().raw_embeddings(),
                    resumed.codebook().raw_embeddings()));
  CHECK(same_floats(full.codebook().raw_ema_counts(),
                    resumed.codebook().raw_ema_counts()));
  REQUIRE(full_opt.moment1().size() == res_opt.moment1().size());
  CHECK(full_opt.step_count() == res_opt.step_count());
  for (size_t i = 0; i < full_opt.moment1().size(); ++i) {
    CHECK(same_floats(full_opt.moment1()[i], res_opt.moment1()[i]));
    CHECK(same_floats(full_opt.moment2()[i], res_opt.moment2()[i]));
  }
}

TEST_CASE("cmd_tower writes deterministic metrics and a loadable checkpoint") {
  auto cfg = tiny_cfg();
  std::string a = fresh_dir("tower_a");
  std::string b = fresh_dir("tower_b");
  auto ra = cmd_tower(cfg, a);
  auto rb = cmd_tower(cfg, b);
  CHECK_FALSE(ra.recipe.diverged);
  CHECK(slurp(ra.metrics_path) == slurp(rb.metrics_path));
  CHECK(slurp(ra.ckpt_path) == slurp(rb.ckpt_path));

  bool saw_transition = false, saw_final = false;
  std::ifstream in(ra.metrics_path);
  std::string line;
  while (std::getline(in, line)) {
    auto j = nlohmann::json::parse(line);
    if (j.contains("stage_transition")) saw_transition = true;
    if (j.value("phase", "") == "final") {
      saw_final = true;
      CHECK(j.at("retrieval").get<double>() >= 0.0);
    }
  }
  CHECK(saw_transition);
  CHECK(saw_final);

  auto sd = load_checkpoint<float>(ra.ckpt_path);
  CHECK(sd.config_hash == config_hash(cfg.canonical()));
  CHECK(sd.step == cfg.stage_b_steps);

  // the last autosave is the end state, so resuming from it is a no-op run
  std::string c = fresh_dir("tower_c");
  auto rc2 = cmd_tower(cfg, c, a + "/tower_autosave.ckpt");
  CHECK(slurp(rc2.ckpt_path) == slurp(ra.ckpt_path));

  // resuming under a different configuration must be refused
  auto other = cfg;
  other.seed += 1;
  std::string d = fresh_dir("tower_d");
  CHECK_THROWS_AS(cmd_tower(other, d, ra.ckpt_path), ConfigError);
}

TEST_CASE("train, generate, and eval run off a tower checkpoint") {
  auto cfg = tiny_cfg();
  std::string dir = fresh_dir("pipeline");
  auto tr = cmd_tower(cfg, dir);

  CHECK_THROWS_AS(cmd_train_mm(cfg, dir, dir + "/nope.ckpt"), IoError);
  auto mm = cmd_train_mm(cfg, dir, tr.ckpt_path);
  CHECK_FALSE(mm.diverged);
  CHECK(std::isfinite(mm.last_loss));

  auto gen = cmd_generate(cfg, dir, tr.ckpt_path, mm.ckpt_path,
                          "a large red circle at the center", {0.0, 3.0});
  REQUIRE(gen.samples.size() == 2);
  for (const auto& g : gen.samples) CHECK(fs::exists(g.file));
  CHECK_THROWS_AS(cmd_generate(cfg, dir, tr.ckpt_path, mm.ckpt_path,
                               "a glorious nonsense word", {1.0}),
                  ConfigError);

  auto ev = cmd_eval(cfg, dir, tr.ckpt_path, mm.ckpt_path, 4);
  CHECK(ev.retrieval >= 0.0);
  CHECK(ev.recon_mse >= 0.0);
  REQUIRE(ev.depth_err.size() == size_t(cfg.depth));
  // residual energy cannot grow with quantization depth
  for (size_t d = 1; d < ev.depth_err.size(); ++d)
    CHECK(ev.depth_err[d] <= ev.depth_err[d - 1] + 1e-9);
  CHECK(fs::exists(dir + "/eval_metrics.jsonl"));
}

TEST_CASE("output directory lock is exclusive and released on destruction") {
  std::string dir = fresh_dir("lock");
  {
    DirLock lock(dir);
    CHECK_THROWS_AS(DirLock{dir}, IoError);
  }
  CHECK_NOTHROW(DirLock{dir});
}

TEST_CASE("RQUNIFY_OUT overrides the root for relative output dirs") {
  auto cfg = tiny_cfg();
  cfg.out_dir = "rel/run1";
  setenv("RQUNIFY_OUT", "/tmp/rq_root", 1);
  CHECK(resolve_out_dir(cfg) == "/tmp/rq_root/rel/run1");
  cfg.out_dir = "/abs/run1";
  CHECK(resolve_out_dir(cfg) == "/abs/run1");
  unsetenv("RQUNIFY_OUT");
  cfg.out_dir = "rel/run1";
  CHECK(resolve_out_dir(cfg) == "rel/run1");
}

#ifdef RQ_CLI_PATH
TEST_CASE("CLI maps the error taxonomy onto exit codes") {
  std::string dir = fresh_dir("cli");
  auto run = [&](const std::string& args) {
    std::string cmd = std::string(RQ_CLI_PATH) + " " + args + " >" + dir +
                      "/out.txt 2>" + dir + "/err.txt";
    int rc = std::system(cmd.c_str());
    return WEXITSTATUS(rc);
  };

  // config errors exit 2 with a machine-readable record on stderr
  std::ofstream(dir + "/bad.json") << "{\"no_such_key\": 1}";
  CHECK(run("gen-data --config " + dir + "/bad.json") == 2);
  auto err = nlohmann::json::parse(slurp(dir + "/err.txt"));
  CHECK(err.at("error") == "config");
  CHECK(err.at("exit_code") == 2);
  CHECK(err.contains("message"));

  // a valid tiny run, then a refused overwrite (I/O error, exit 4)
  auto cfg = tiny_cfg();
  cfg.out_dir = dir + "/run";
  std::ofstream(dir + "/ok.json") << cfg.to_json().dump();
  CHECK(run("gen-data --config " + dir + "/ok.json") == 0);
  CHECK(run("gen-data --config " + dir + "/ok.json") == 4);
  err = nlohmann::json::parse(slurp(dir + "/err.txt"));
  CHECK(err.at("error") == "io");
  CHECK(run("gen-data --config " + dir + "/ok.json --force") == 0);

  // a held lock refuses a second run on the same directory
  { std::ofstream(dir + "/run/.lock"); }
  CHECK(run("gen-data --config " + dir + "/ok.json --force") == 4);
  fs::remove(dir + "/run/.lock");

  // bad guidance list is a config error
  CHECK(run("generate --config " + dir + "/ok.json --prompt x --cfg 1,oops") ==
        2);
}
#endif
