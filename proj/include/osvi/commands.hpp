#pragma once

// The five subcommands as library calls; tools/osvi.cpp only parses flags.
// Errors surface as exceptions and map to exit codes via exit_code_for().

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "osvi/trainer.hpp"

namespace osvi {

enum ExitCode : int { kExitOk = 0, kExitUsage = 1, kExitData = 2, kExitNumeric = 3 };

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// UsageError → 1, NumericError / failed checks → 3, anything else about
/// inputs (files, shapes, contracts) → 2.
int exit_code_for(const std::exception& e);

struct SynthArgs {
  std::size_t n = 16;
  std::filesystem::path out;
  std::string profile = "toy-A";
  std::uint64_t seed = 1;
  std::size_t frames = 7, height = 48, width = 80;
};
DatasetManifest cmd_synth(const SynthArgs& a, std::ostream& log);

inline constexpr const char* kTrainLog = "train.log";
inline constexpr const char* kCheckpointName = "checkpoint.osvc";

struct TrainArgs {
  std::filesystem::path data, out;
  TrainConfig cfg;
  /// Continue from this checkpoint; cfg must equal the stored one apart
  /// from `iterations`.
  std::optional<std::filesystem::path> resume;
  /// Before every step, assert the completion losses leave mask-module
  /// gradients at exactly zero (only meaningful with detach-masks).
  bool assert_detach = false;
  std::size_t progress_every = 25;
};
/// Writes out/train.log (one line per step), out/config.txt and
/// out/checkpoint.osvc every cfg.checkpoint_every steps and at the end.
void cmd_train(const TrainArgs& a, std::ostream& log);

inline constexpr const char* kDefaultFramePrefix = "input_";

struct InferArgs {
  std::filesystem::path video;   // directory of <prefix>*.ppm frames
  std::filesystem::path mask0;   // frame-0 PGM mask
  std::filesystem::path data;    // alternative: every snippet of a dataset
  std::filesystem::path checkpoint, out;
  std::string prefix = kDefaultFramePrefix;
  bool composite = false;
};
/// Writes frame_%04d.ppm and mask_%04d.pgm per clip (under out/<id>/ in
/// dataset mode). The frame-0 mask is a byte copy of the given mask.
void cmd_infer(const InferArgs& a, std::ostream& log);

inline constexpr const char* kEvalName = "eval.tsv";

struct EvalArgs {
  std::filesystem::path pred, data;
  std::filesystem::path out;  // default pred/eval.tsv
};
struct EvalRow {
  std::string id;
  double psnr = 0, ssim = 0, iou = 0, recall = 0;
};
/// Scores pred/<id>/ against each dataset snippet; unmatched ids are
/// reported and skipped. Throws IoError when nothing matched. Worker count
/// is capped by OSVI_THREADS.
std::vector<EvalRow> cmd_eval(const EvalArgs& a, std::ostream& log);

struct VerifyArgs {
  std::vector<std::string> suites;  // empty = all
};
/// Returns true when every check passed.
bool cmd_verify(const VerifyArgs& a, std::ostream& log);

/// Frames of a directory: files named <prefix>*.ppm in name order.
std::vector<std::filesystem::path> list_frames(const std::filesystem::path& dir,
                                               const std::string& prefix);

}  // namespace osvi
