// osvi: synth | train | infer | eval | verify

#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include "CLI11.hpp"
#include "osvi/checkpoint.hpp"
#include "osvi/commands.hpp"
#include "osvi/config.hpp"
#include "osvi/verify.hpp"

namespace {

using osvi::TrainConfig;

struct TrainCli {
  TrainConfig cfg;
  bool no_guidance = false;
  std::string masking = "key-side";
  std::map<std::string, CLI::Option*> opts;  // keyed like the config file
};

void add_train_options(CLI::App* sub, TrainCli& t) {
  TrainConfig& c = t.cfg;
  auto& o = t.opts;
  o["batch"] = sub->add_option("--batch", c.batch, "snippets per step")->capture_default_str();
  o["frames"] = sub->add_option("--frames", c.snippet_len, "frames per snippet")->capture_default_str();
  o["height"] = sub->add_option("--height", c.height, "frame height")->capture_default_str();
  o["width"] = sub->add_option("--width", c.width, "frame width")->capture_default_str();
  o["iterations"] = sub->add_option("--iterations", c.iterations, "training steps")->capture_default_str();
  o["checkpoint-every"] = sub->add_option("--checkpoint-every", c.checkpoint_every, "steps between checkpoints")
                              ->capture_default_str()
                              ->check(CLI::PositiveNumber);
  o["lr"] = sub->add_option("--lr", c.lr, "Adam learning rate")->capture_default_str();
  o["seed"] = sub->add_option("--seed", c.seed, "model, discriminator and batch-order seed")->capture_default_str();
  o["no-mask-loss"] = sub->add_flag("--no-mask-loss", c.no_mask_loss, "drop the mask loss from the total (default: off)");
  o["no-gan"] = sub->add_flag("--no-gan", c.no_gan, "skip the discriminator and adversarial term (default: off)");
  o["no-mask-guidance"] = sub->add_flag("--no-mask-guidance", t.no_guidance,
                                        "temporal attention ignores the predicted mask (default: off)");
  o["stb-masked"] = sub->add_flag("--stb-masked", c.flags.spatial_masked,
                                  "spatial stage uses masked attention too (default: off)");
  o["detach-masks"] = sub->add_flag("--detach-masks", c.flags.detach_masks,
                                    "completion sees masks and shared features as constants (default: off)");
  o["separate-encoders"] = sub->add_flag("--separate-encoders", c.flags.separate_encoders,
                                         "completion gets its own encoder (default: off)");
  o["masking"] = sub->add_option("--masking", t.masking, "guidance rule")
                     ->capture_default_str()
                     ->check(CLI::IsMember({"key-side", "paper-literal"}));
  o["token-channels"] = sub->add_option("--token-channels", c.attention.channels, "transformer width")->capture_default_str();
  o["heads"] = sub->add_option("--heads", c.attention.heads, "attention heads")->capture_default_str();
  o["blocks"] = sub->add_option("--blocks", c.attention.blocks, "transformer blocks")->capture_default_str();
  o["mlp-hidden"] = sub->add_option("--mlp-hidden", c.attention.mlp_hidden, "MLP hidden width")->capture_default_str();
  o["memory-every"] = sub->add_option("--memory-every", c.memory_every, "memory stores every k-th frame")
                          ->capture_default_str();
}

std::string read_text(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw osvi::IoError("cannot open config " + path);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

// Config file (or checkpoint) first, then every flag given on the command line.
TrainConfig resolve_train_config(TrainCli& t, const std::string& config_path,
                                 const std::string& resume_path) {
  t.cfg.flags.use_guidance = !t.no_guidance;
  t.cfg.flags.masking = osvi::parse_masking(t.masking);
  TrainConfig out;
  if (!resume_path.empty()) {
    out = osvi::config_from_text(osvi::load_checkpoint(resume_path).config_text);
  } else if (!config_path.empty()) {
    out = osvi::config_from_text(read_text(config_path));
  }
  std::map<std::string, std::string> given;
  std::istringstream lines(osvi::config_to_text(t.cfg));
  for (std::string l; std::getline(lines, l);) {
    const auto eq = l.find(" = ");
    given[l.substr(0, eq)] = l.substr(eq + 3);
  }
  for (const auto& [key, opt] : t.opts) {
    if (opt->count() > 0) osvi::apply_config_value(out, key, given.at(key));
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"One-shot video inpainting: synthesize data, train, infer, evaluate, self-check"};
  app.require_subcommand(1);
  app.get_formatter()->column_width(34);

  osvi::SynthArgs sa;
  auto* synth = app.add_subcommand("synth", "write a synthetic dataset");
  synth->add_option("--n", sa.n, "number of snippets")->capture_default_str();
  synth->add_option("--out", sa.out, "output directory")->required();
  synth->add_option("--profile", sa.profile, "toy-A or toy-B")
      ->capture_default_str()
      ->check(CLI::IsMember({"toy-A", "toy-B"}));
  synth->add_option("--seed", sa.seed, "base seed")->capture_default_str();
  synth->add_option("--frames", sa.frames, "frames per snippet")->capture_default_str();
  synth->add_option("--height", sa.height, "frame height")->capture_default_str();
  synth->add_option("--width", sa.width, "frame width")->capture_default_str();

  osvi::TrainArgs ta;
  TrainCli tc;
  std::string config_path, resume_path;
  auto* train = app.add_subcommand("train", "train on a dataset");
  train->add_option("--data", ta.data, "dataset directory")->required();
  train->add_option("--out", ta.out, "run directory (train.log, checkpoint.osvc)")->required();
  train->add_option("--config", config_path, "key = value file; flags override it");
  train->add_option("--resume", resume_path, "continue from this checkpoint");
  train->add_flag("--assert-detach", ta.assert_detach,
                  "fail if completion losses reach mask parameters (default: off)");
  train->add_option("--progress-every", ta.progress_every, "steps between progress lines")
      ->capture_default_str();
  add_train_options(train, tc);

  osvi::InferArgs ia;
  auto* infer = app.add_subcommand("infer", "complete a clip (or every snippet of a dataset)");
  infer->add_option("--video", ia.video, "directory of frames");
  infer->add_option("--mask0", ia.mask0, "frame-0 object mask (PGM)");
  infer->add_option("--data", ia.data, "dataset directory instead of --video/--mask0");
  infer->add_option("--checkpoint", ia.checkpoint, "trained checkpoint")->required();
  infer->add_option("--out", ia.out, "output directory")->required();
  infer->add_option("--prefix", ia.prefix, "frame file prefix inside --video")->capture_default_str();
  infer->add_flag("--composite", ia.composite,
                  "keep input pixels where the predicted mask is below 0.5 (default: off)");

  osvi::EvalArgs ea;
  auto* eval = app.add_subcommand("eval", "score predictions against a dataset");
  eval->add_option("--pred", ea.pred, "prediction directory (one subdirectory per snippet id)")->required();
  eval->add_option("--data", ea.data, "dataset directory")->required();
  eval->add_option("--out", ea.out, "report path (default: <pred>/eval.tsv)");

  osvi::VerifyArgs va;
  auto* verify = app.add_subcommand("verify", "run the self-check suites");
  verify->add_option("--suite", va.suites, "suite to run, repeatable (default: all)")
      ->check(CLI::IsMember(osvi::suite_names()));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? osvi::kExitOk : osvi::kExitUsage;
  }

  try {
    if (synth->parsed()) {
      osvi::cmd_synth(sa, std::cout);
    } else if (train->parsed()) {
      if (!config_path.empty() && !resume_path.empty()) {
        throw osvi::UsageError("--config and --resume are exclusive; a checkpoint carries its config");
      }
      ta.cfg = resolve_train_config(tc, config_path, resume_path);
      if (!resume_path.empty()) ta.resume = resume_path;
      osvi::cmd_train(ta, std::cout);
    } else if (infer->parsed()) {
      osvi::cmd_infer(ia, std::cout);
    } else if (eval->parsed()) {
      osvi::cmd_eval(ea, std::cerr);
    } else if (verify->parsed()) {
      return osvi::cmd_verify(va, std::cout) ? osvi::kExitOk : osvi::kExitNumeric;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return osvi::exit_code_for(e);
  }
  return osvi::kExitOk;
}
