#include "osvi/commands.hpp"

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <ostream>

#include "osvi/checkpoint.hpp"
#include "osvi/config.hpp"
#include "osvi/image_io.hpp"
#include "osvi/metrics.hpp"
#include "osvi/verify.hpp"

namespace osvi {

namespace fs = std::filesystem;

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const UsageError*>(&e) != nullptr) return kExitUsage;
  if (dynamic_cast<const NumericError*>(&e) != nullptr) return kExitNumeric;
  if (dynamic_cast<const EvaluationError*>(&e) != nullptr) return kExitNumeric;
  return kExitData;
}

namespace {

void make_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
}

std::string index_list(const std::vector<std::size_t>& v) {
  std::string s = "[";
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s + "]";
}

Tensor<float> stack_frames(const std::vector<Tensor<float>>& frames) {
  Shape shape{frames.size()};
  for (std::size_t d : frames.front().shape()) shape.push_back(d);
  Tensor<float> out(shape);
  const std::size_t n = frames.front().size();
  for (std::size_t t = 0; t < frames.size(); ++t) {
    if (frames[t].shape() != frames.front().shape()) {
      throw DimensionError("frame " + std::to_string(t) + " is " + shape_str(frames[t].shape()) +
                           ", frame 0 is " + shape_str(frames.front().shape()));
    }
    std::copy(frames[t].ptr(), frames[t].ptr() + n, out.ptr() + t * n);
  }
  return out;
}

Tensor<float> binarize(Tensor<float> m) {
  for (auto& v : m.data()) v = v >= 0.5f ? 1.0f : 0.0f;
  return m;
}

std::vector<std::string> read_lines(const fs::path& path) {
  std::vector<std::string> lines;
  std::ifstream in(path);
  for (std::string l; std::getline(in, l);) lines.push_back(l);
  return lines;
}

std::size_t eval_threads() {
  std::size_t n = static_cast<std::size_t>(kernels::max_threads());
  if (const char* env = std::getenv("OSVI_THREADS")) {
    const long v = std::strtol(env, nullptr, 10);
    if (v > 0) n = std::min(n, static_cast<std::size_t>(v));
  }
  return std::max<std::size_t>(1, n);
}

}  // namespace

std::vector<fs::path> list_frames(const fs::path& dir, const std::string& prefix) {
  if (!fs::is_directory(dir)) throw IoError("not a directory: " + dir.string());
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(dir)) {
    const std::string name = e.path().filename().string();
    if (e.is_regular_file() && name.rfind(prefix, 0) == 0 && e.path().extension() == ".ppm") {
      out.push_back(e.path());
    }
  }
  std::sort(out.begin(), out.end());
  return out;
}

// --- synth -------------------------------------------------------------------

DatasetManifest cmd_synth(const SynthArgs& a, std::ostream& log) {
  if (a.out.empty()) throw UsageError("synth needs --out");
  SynthConfig cfg;
  cfg.frames = a.frames;
  cfg.height = a.height;
  cfg.width = a.width;
  cfg.profile = parse_profile(a.profile);
  DatasetManifest m = write_dataset(a.n, a.out, cfg, a.seed);
  log << "wrote " << m.entries.size() << " " << profile_name(cfg.profile) << " snippets ("
      << cfg.frames << "x" << cfg.height << "x" << cfg.width << ") to " << a.out.string() << "\n";
  return m;
}

// --- train -------------------------------------------------------------------

void cmd_train(const TrainArgs& a, std::ostream& log) {
  if (a.data.empty() || a.out.empty()) throw UsageError("train needs --data and --out");
  a.cfg.validate();
  std::vector<Snippet> data = load_dataset(a.data);
  for (const auto& s : data) {
    if (s.frames() != a.cfg.snippet_len) {
      throw GeometryError("snippet " + s.id + " has " + std::to_string(s.frames()) +
                          " frames, config expects " + std::to_string(a.cfg.snippet_len));
    }
  }
  make_dir(a.out);
  Trainer trainer(a.cfg, std::move(data));

  const fs::path log_path = a.out / kTrainLog;
  std::vector<std::string> kept;
  if (a.resume) {
    const Checkpoint ck = load_checkpoint(*a.resume);
    TrainConfig stored = config_from_text(ck.config_text);
    stored.iterations = a.cfg.iterations;
    if (config_to_text(stored) != config_to_text(a.cfg)) {
      throw UsageError("config differs from the one stored in " + a.resume->string());
    }
    restore(trainer, ck);
    // Keep the log lines of the steps the checkpoint already covers.
    kept = read_lines(log_path);
    if (kept.size() < ck.step) {
      throw IoError(log_path.string() + " has " + std::to_string(kept.size()) +
                    " lines, checkpoint is at step " + std::to_string(ck.step));
    }
    kept.resize(ck.step);
    log << "resumed from " << a.resume->string() << " at step " << ck.step << "\n";
  }
  {
    std::ofstream cfg_out(a.out / "config.txt");
    cfg_out << config_to_text(a.cfg);
    if (!cfg_out) throw IoError("cannot write " + (a.out / "config.txt").string());
  }
  std::ofstream train_log(log_path, std::ios::trunc);
  if (!train_log) throw IoError("cannot write " + log_path.string());
  for (const auto& l : kept) train_log << l << "\n";

  std::optional<std::size_t> saved_at;
  auto save = [&] {
    save_checkpoint(a.out / kCheckpointName, snapshot(trainer));
    saved_at = trainer.steps_done();
  };
  while (trainer.steps_done() < a.cfg.iterations) {
    if (a.assert_detach) {
      for (std::size_t i : trainer.batch_indices(trainer.steps_done())) {
        const float g = trainer.completion_grad_on_mask(i);
        if (g != 0.0f) {
          throw NumericError("completion losses reach mask parameters (max |grad| " +
                             std::to_string(g) + ") at step " +
                             std::to_string(trainer.steps_done()));
        }
      }
    }
    const LossBundle b = trainer.step();
    const std::size_t step = trainer.steps_done();
    train_log << format_log_line(step, b) << "\n";
    train_log.flush();
    if (a.progress_every != 0 && step % a.progress_every == 0) {
      log << "step " << step << "/" << a.cfg.iterations << "  total " << b.l_total << "\n";
    }
    if (step % a.cfg.checkpoint_every == 0) save();
  }
  if (saved_at != trainer.steps_done()) save();
  if (!train_log) throw IoError("write failed: " + log_path.string());
  log << "trained " << trainer.steps_done() << " steps; checkpoint "
      << (a.out / kCheckpointName).string() << "\n";
}

// --- infer -------------------------------------------------------------------

namespace {

void infer_clip(const OsviModel<float>& model, const Tensor<float>& video,
                const fs::path& mask0_file, bool composite, const fs::path& out_dir,
                std::ostream& log) {
  const ModelConfig& mc = model.config();
  if (video.dim(2) != mc.height || video.dim(3) != mc.width) {
    throw GeometryError("video frames are " + std::to_string(video.dim(2)) + "x" +
                        std::to_string(video.dim(3)) + ", checkpoint expects " +
                        std::to_string(mc.height) + "x" + std::to_string(mc.width));
  }
  const Tensor<float> mask0 = binarize(read_pgm(mask0_file));
  if (mask0.dim(0) != mc.height || mask0.dim(1) != mc.width) {
    throw GeometryError("mask " + mask0_file.string() + " is " + shape_str(mask0.shape()) +
                        ", frames are " + std::to_string(mc.height) + "x" + std::to_string(mc.width));
  }
  Tape<float> tape;
  ForwardOptions opt;
  opt.composite = composite;
  const ModelOutput<float> out = model.forward(tape, video, mask0, opt);
  make_dir(out_dir);
  const std::size_t frames = video.dim(0);
  for (std::size_t t = 0; t < frames; ++t) {
    write_ppm(out_dir / frame_name("frame", t, "ppm"), frame_of(out.video.value(), t));
    const fs::path mask_path = out_dir / frame_name("mask", t, "pgm");
    if (t == 0) {
      std::error_code ec;
      fs::copy_file(mask0_file, mask_path, fs::copy_options::overwrite_existing, ec);
      if (ec) throw IoError("cannot copy " + mask0_file.string() + ": " + ec.message());
    } else {
      write_pgm(mask_path, binarize(out.sequence.masks[t].soft.value()));
    }
  }
  log << out_dir.string() << ": " << frames << " frames, memory frames "
      << index_list(out.sequence.memory.frame_indices) << "\n";
}

}  // namespace

void cmd_infer(const InferArgs& a, std::ostream& log) {
  if (a.checkpoint.empty() || a.out.empty()) throw UsageError("infer needs --checkpoint and --out");
  const bool single = !a.video.empty();
  if (single == !a.data.empty()) throw UsageError("infer needs exactly one of --video or --data");
  if (single && a.mask0.empty()) throw UsageError("infer --video needs --mask0");

  const Checkpoint ck = load_checkpoint(a.checkpoint);
  OsviModel<float> model(config_from_text(ck.config_text).model_config());
  restore_model(model, ck);

  if (single) {
    const auto files = list_frames(a.video, a.prefix);
    if (files.empty()) {
      throw IoError("no " + a.prefix + "*.ppm frames in " + a.video.string());
    }
    std::vector<Tensor<float>> frames;
    for (const auto& f : files) frames.push_back(read_ppm(f));
    infer_clip(model, stack_frames(frames), a.mask0, a.composite, a.out, log);
    return;
  }
  const DatasetManifest m = read_manifest(a.data);
  for (const auto& e : m.entries) {
    const Snippet s = load_snippet(a.data, e, m);
    infer_clip(model, s.input, a.data / e.dir / frame_name("mask", 0, "pgm"), a.composite,
               a.out / e.id, log);
  }
}

// --- eval --------------------------------------------------------------------

std::vector<EvalRow> cmd_eval(const EvalArgs& a, std::ostream& log) {
  if (a.pred.empty() || a.data.empty()) throw UsageError("eval needs --pred and --data");
  const DatasetManifest m = read_manifest(a.data);

  std::vector<const ManifestEntry*> matched;
  for (const auto& e : m.entries) {
    if (fs::is_directory(a.pred / e.id)) {
      matched.push_back(&e);
    } else {
      log << "warning: no prediction for " << e.id << ", skipped\n";
    }
  }
  if (fs::is_directory(a.pred)) {
    for (const auto& d : fs::directory_iterator(a.pred)) {
      if (!d.is_directory()) continue;
      const std::string id = d.path().filename().string();
      const bool known = std::any_of(m.entries.begin(), m.entries.end(),
                                     [&](const ManifestEntry& e) { return e.id == id; });
      if (!known) log << "warning: prediction " << id << " has no ground truth, skipped\n";
    }
  }
  if (matched.empty()) throw IoError("no prediction matches a snippet id of " + a.data.string());

  std::vector<EvalRow> rows(matched.size());
  std::vector<std::string> errors(matched.size());
  const int threads = static_cast<int>(eval_threads());
#pragma omp parallel for schedule(dynamic) num_threads(threads)
  for (std::size_t k = 0; k < matched.size(); ++k) {
    try {
      const ManifestEntry& e = *matched[k];
      const Snippet gt = load_snippet(a.data, e, m);
      std::vector<Tensor<float>> frames, masks;
      for (std::size_t t = 0; t < gt.frames(); ++t) {
        frames.push_back(read_ppm(a.pred / e.id / frame_name("frame", t, "ppm")));
        masks.push_back(read_pgm(a.pred / e.id / frame_name("mask", t, "pgm")));
      }
      const MetricReport r = evaluate_clip(stack_frames(frames), gt.clean, stack_frames(masks), gt.masks);
      rows[k] = {e.id, r.mean_psnr, r.mean_ssim, r.mean_iou, r.mean_recall};
    } catch (const std::exception& ex) {
      errors[k] = ex.what();
    }
  }
  for (const auto& err : errors) {
    if (!err.empty()) throw IoError(err);
  }

  const fs::path out = a.out.empty() ? a.pred / kEvalName : a.out;
  std::ofstream tsv(out);
  if (!tsv) throw IoError("cannot write " + out.string());
  auto line = [&tsv](const EvalRow& r) {
    char buf[256];
    std::snprintf(buf, sizeof buf, "%s\t%.6f\t%.6f\t%.6f\t%.6f\n", r.id.c_str(), r.psnr, r.ssim,
                  r.iou, r.recall);
    tsv << buf;
  };
  tsv << "snippet\tpsnr\tssim\tiou\trecall\n";
  EvalRow mean{"MEAN"};
  for (const auto& r : rows) {
    line(r);
    mean.psnr += r.psnr / static_cast<double>(rows.size());
    mean.ssim += r.ssim / static_cast<double>(rows.size());
    mean.iou += r.iou / static_cast<double>(rows.size());
    mean.recall += r.recall / static_cast<double>(rows.size());
  }
  line(mean);
  if (!tsv) throw IoError("write failed: " + out.string());
  log << "evaluated " << rows.size() << " of " << m.entries.size() << " snippets: psnr "
      << mean.psnr << " ssim " << mean.ssim << " iou " << mean.iou << " recall " << mean.recall
      << " -> " << out.string() << "\n";
  rows.push_back(mean);
  return rows;
}

// --- verify ------------------------------------------------------------------

bool cmd_verify(const VerifyArgs& a, std::ostream& log) {
  const std::vector<std::string> suites = a.suites.empty() ? suite_names() : a.suites;
  for (const auto& s : suites) {
    if (std::find(suite_names().begin(), suite_names().end(), s) == suite_names().end()) {
      throw UsageError("unknown suite '" + s + "'");
    }
  }
  bool all = true;
  for (const auto& s : suites) {
    const SuiteResult r = run_suite(s);
    char head[128];
    std::snprintf(head, sizeof head, "%-10s %s  %.2f s\n", r.name.c_str(), r.passed() ? "PASS" : "FAIL",
                  r.seconds);
    log << head;
    for (const auto& c : r.checks) {
      log << "    " << (c.passed ? "ok   " : "FAIL ") << c.name;
      if (!c.detail.empty()) log << "  (" << c.detail << ")";
      log << "\n";
    }
    all = all && r.passed();
  }
  log << (all ? "all suites passed" : "verification FAILED") << "\n";
  return all;
}

}  // namespace osvi
