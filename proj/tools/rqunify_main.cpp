// Command-line front end. Subcommands map 1:1 onto the harness drivers;
// every failure exits with the taxonomy code (2 config, 3 numeric, 4 I/O)
// and prints a machine-readable JSON error record on stderr.

#include <cstdio>
#include <exception>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "rqunify/harness.hpp"

using namespace rqunify;

namespace {

struct CommonOpts {
  std::string config_path;
  int64_t seed = -1;
  bool deterministic = false;
};

void add_common(CLI::App* cmd, CommonOpts& o) {
  cmd->add_option("--config", o.config_path, "experiment config (flat JSON)");
  cmd->add_option("--seed", o.seed, "override the run seed");
  cmd->add_flag("--deterministic", o.deterministic,
                "zero wall-time fields so metrics files are byte-stable");
}

ExperimentConfig load_config(const CommonOpts& o) {
  ExperimentConfig cfg = o.config_path.empty()
                             ? ExperimentConfig{}
                             : ExperimentConfig::from_file(o.config_path);
  if (o.seed >= 0) cfg.seed = uint64_t(o.seed);
  if (o.deterministic) cfg.deterministic = true;
  cfg.validate();
  return cfg;
}

std::vector<double> parse_scales(const std::string& csv) {
  std::vector<double> out;
  std::stringstream ss(csv);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    try {
      size_t used = 0;
      double v = std::stod(tok, &used);
      if (used != tok.size() || v < 0) throw std::invalid_argument(tok);
      out.push_back(v);
    } catch (const std::exception&) {
      throw ConfigError("bad --cfg value: '" + tok + "'");
    }
  }
  if (out.empty()) throw ConfigError("--cfg list is empty");
  return out;
}

int error_exit(const char* kind, int code, const std::string& msg) {
  nlohmann::json j;
  j["error"] = kind;
  j["exit_code"] = code;
  j["message"] = msg;
  std::cerr << j.dump() << "\n";
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"unified autoregressive multimodal toy pipeline"};
  app.require_subcommand(1);

  CommonOpts gen_data_o, tower_o, train_o, generate_o, eval_o, ablate_o;
  bool force = false;
  std::string resume, tower_ckpt, mm_ckpt, prompt, cfg_csv = "3", recipe;
  int gen_count = 64;

  auto* c_gen_data =
      app.add_subcommand("gen-data", "write the synthetic corpus to disk");
  add_common(c_gen_data, gen_data_o);
  c_gen_data->add_flag("--force", force,
                       "overwrite a non-empty dataset directory");

  auto* c_tower = app.add_subcommand("tower", "train the vision tower");
  add_common(c_tower, tower_o);
  c_tower->add_option("--resume", resume, "resume from a tower checkpoint");
  c_tower->add_option("--recipe", recipe, "override the training recipe");

  auto* c_train = app.add_subcommand(
      "train-mm", "train the multimodal generator over a frozen tower");
  add_common(c_train, train_o);
  c_train->add_option("--tower", tower_ckpt,
                      "tower checkpoint (default <out>/tower.ckpt)");

  auto* c_generate =
      app.add_subcommand("generate", "sample images from a text prompt");
  add_common(c_generate, generate_o);
  c_generate->add_option("--prompt", prompt, "text prompt")->required();
  c_generate->add_option("--cfg", cfg_csv,
                         "guidance scale or comma list, e.g. 1,2,3,5");
  c_generate->add_option("--tower", tower_ckpt, "tower checkpoint");
  c_generate->add_option("--mm", mm_ckpt, "generator checkpoint");

  auto* c_eval = app.add_subcommand("eval", "evaluate checkpoints");
  add_common(c_eval, eval_o);
  c_eval->add_option("--tower", tower_ckpt, "tower checkpoint");
  c_eval->add_option("--mm", mm_ckpt,
                     "generator checkpoint (enables the probe metric)");
  c_eval->add_option("--gen-count", gen_count,
                     "generated images per probe pass");

  auto* c_ablate =
      app.add_subcommand("ablate", "run every training recipe side by side");
  add_common(c_ablate, ablate_o);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*c_gen_data) {
      auto cfg = load_config(gen_data_o);
      std::string out = resolve_out_dir(cfg);
      DirLock lock(out);
      auto res = gen_dataset(cfg, out, force);
      std::cout << "wrote " << res.images << " images and "
                << res.video_frames << " video frames under " << out
                << "/data\n";
    } else if (*c_tower) {
      auto cfg = load_config(tower_o);
      if (!recipe.empty()) {
        cfg.recipe = recipe;
        cfg.validate();
      }
      std::string out = resolve_out_dir(cfg);
      DirLock lock(out);
      auto res = cmd_tower(cfg, out, resume);
      std::cout << "tower " << cfg.recipe << ": retrieval "
                << res.recipe.final_retrieval << ", recon mse "
                << res.recipe.final_recon_mse << ", checkpoint "
                << res.ckpt_path << "\n";
      if (res.recipe.diverged)
        return error_exit("numeric", 3, res.recipe.divergence_note);
    } else if (*c_train) {
      auto cfg = load_config(train_o);
      std::string out = resolve_out_dir(cfg);
      DirLock lock(out);
      if (tower_ckpt.empty()) tower_ckpt = out + "/tower.ckpt";
      auto res = cmd_train_mm(cfg, out, tower_ckpt);
      std::cout << "train-mm: loss " << res.first_loss << " -> "
                << res.last_loss << ", checkpoint " << res.ckpt_path << "\n";
      if (res.diverged)
        return error_exit("numeric", 3, "multimodal training diverged");
    } else if (*c_generate) {
      auto cfg = load_config(generate_o);
      std::string out = resolve_out_dir(cfg);
      DirLock lock(out);
      if (tower_ckpt.empty()) tower_ckpt = out + "/tower.ckpt";
      if (mm_ckpt.empty()) mm_ckpt = out + "/mm.ckpt";
      auto res = cmd_generate(cfg, out, tower_ckpt, mm_ckpt, prompt,
                              parse_scales(cfg_csv));
      for (const auto& g : res.samples)
        std::cout << "cfg " << g.cfg_scale << " -> " << g.file
                  << (g.meta.empty ? " (empty)" : "") << "\n";
    } else if (*c_eval) {
      auto cfg = load_config(eval_o);
      std::string out = resolve_out_dir(cfg);
      DirLock lock(out);
      if (tower_ckpt.empty()) tower_ckpt = out + "/tower.ckpt";
      auto res = cmd_eval(cfg, out, tower_ckpt, mm_ckpt, gen_count);
      std::cout << "retrieval " << res.retrieval << ", recon mse "
                << res.recon_mse;
      if (res.probe_acc >= 0)
        std::cout << ", probe " << res.probe_acc << " (uncond "
                  << res.probe_acc_uncond << ")";
      std::cout << "\n";
    } else if (*c_ablate) {
      auto cfg = load_config(ablate_o);
      std::string out = resolve_out_dir(cfg);
      DirLock lock(out);
      auto res = cmd_ablate(cfg, out);
      for (const auto& r : res.rows)
        std::cout << r.mode << ": retrieval " << r.retrieval << ", recon mse "
                  << r.recon_mse << (r.diverged ? " (diverged)" : "") << "\n";
    }
  } catch (const ConfigError& e) {
    return error_exit("config", 2, e.what());
  } catch (const ContractError& e) {
    return error_exit("contract", 2, e.what());
  } catch (const NumericError& e) {
    return error_exit("numeric", 3, e.what());
  } catch (const IoError& e) {
    return error_exit("io", 4, e.what());
  } catch (const std::exception& e) {
    return error_exit("internal", 1, e.what());
  }
  return 0;
}
