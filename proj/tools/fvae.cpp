// fvae: dataset synthesis, training, editing and evaluation from the command line.
//
// Settings come from built-in defaults, then --config FILE, then --seed, then
// any --key value overrides in the order given. A key is a dotted path into
// the config ("train.max_steps") or a leaf name that is unique in it
// ("max-steps").
//
// Exit codes: 0 success, 1 runtime failure (I/O, malformed input), 2 usage or
// configuration error, 3 non-finite loss during training.

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <limits>
#include <mutex>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"
#include "fvae/binary_io.hpp"
#include "fvae/checkpoint.hpp"
#include "fvae/config.hpp"
#include "fvae/editing.hpp"
#include "fvae/image_io.hpp"
#include "fvae/train.hpp"

namespace fs = std::filesystem;
using namespace fvae;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------- settings

struct CommonOptions {
  std::string config_path;
  std::optional<std::uint64_t> seed;
};

void add_common(CLI::App* cmd, CommonOptions& opts) {
  cmd->add_option("--config", opts.config_path, "JSON config file")->check(CLI::ExistingFile);
  cmd->add_option("--seed", opts.seed, "Sets train.seed and data.synth.seed");
  cmd->allow_extras();
}

std::vector<std::pair<std::string, std::string>> parse_overrides(const std::vector<std::string>& args) {
  std::vector<std::pair<std::string, std::string>> out;
  for (std::size_t i = 0; i < args.size(); ++i) {
    const std::string& a = args[i];
    if (a.rfind("--", 0) != 0 || a.size() == 2) throw UsageError("unexpected argument '" + a + "'");
    const auto eq = a.find('=');
    if (eq != std::string::npos) {
      out.emplace_back(a.substr(2, eq - 2), a.substr(eq + 1));
    } else if (i + 1 < args.size()) {
      out.emplace_back(a.substr(2), args[++i]);
    } else {
      throw UsageError("option " + a + " needs a value");
    }
  }
  return out;
}

Json base_document(const CommonOptions& opts) {
  if (opts.config_path.empty()) return to_json(RunConfig{});
  std::ifstream in(opts.config_path);
  Json doc = Json::parse(in, nullptr, false);
  if (doc.is_discarded()) throw UsageError("config '" + opts.config_path + "' is not valid JSON");
  // round trip through the typed config to fill defaults and reject unknown keys
  return to_json(run_config_from_json(doc));
}

RunConfig finish_config(Json doc, const CommonOptions& opts, const std::vector<std::string>& extras) {
  if (opts.seed) {
    doc["train"]["seed"] = *opts.seed;
    doc["data"]["synth"]["seed"] = *opts.seed;
  }
  for (const auto& [key, value] : parse_overrides(extras)) apply_override(doc, key, value);
  RunConfig cfg = run_config_from_json(doc);
  cfg.validate();
  return cfg;
}

RunConfig effective_config(const CommonOptions& opts, const std::vector<std::string>& extras) {
  return finish_config(base_document(opts), opts, extras);
}

// ---------------------------------------------------------------- helpers

int worker_count(std::size_t jobs) {
  unsigned n = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("FVAE_THREADS")) {
    int cap = 0;
    const auto [p, ec] = std::from_chars(env, env + std::strlen(env), cap);
    if (ec != std::errc() || *p != '\0' || cap < 1) {
      throw UsageError(std::string("FVAE_THREADS must be a positive integer, got '") + env + "'");
    }
    n = std::min(n, static_cast<unsigned>(cap));
  }
  return static_cast<int>(std::min<std::size_t>(n, std::max<std::size_t>(jobs, 1)));
}

// Runs fn(i) for i in [0, n) on the worker pool; rethrows the first failure.
template <typename Fn>
void parallel_for(std::size_t n, Fn fn) {
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  auto work = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      try {
        fn(i);
      } catch (...) {
        std::lock_guard lock(error_mutex);
        if (!error) error = std::current_exception();
        next = n;
      }
    }
  };
  std::vector<std::thread> pool;
  const int workers = worker_count(n);
  for (int w = 1; w < workers; ++w) pool.emplace_back(work);
  work();
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

std::string fmt_double(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

std::string numbered(const std::string& stem, int i, std::size_t channels) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%s_%03d.%s", stem.c_str(), i, channels == 1 ? "pgm" : "ppm");
  return buf;
}

void make_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) {
    throw std::runtime_error("cannot create directory '" + dir.string() + "': " + ec.message());
  }
}

void write_text(const fs::path& path, const std::string& text) {
  write_file_atomic(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

Tensor load_model_image(const fs::path& path, const ModelConfig& mc, std::size_t size) {
  const Tensor t = normalize(read_image(path));
  if (t.dim(0) != mc.channels || t.dim(1) != size || t.dim(2) != size) {
    throw UsageError("image '" + path.string() + "' is " + shape_string(t.shape()) + ", expected [" +
                     std::to_string(mc.channels) + "x" + std::to_string(size) + "x" +
                     std::to_string(size) + "]");
  }
  return t;
}

FacePairSet restrict_to(const FacePairSet& set, const std::set<int>& ids) {
  FacePairSet out;
  std::vector<std::size_t> remap(set.images.size(), SIZE_MAX);
  for (std::size_t i = 0; i < set.images.size(); ++i) {
    if (!ids.count(set.images[i].identity)) continue;
    remap[i] = out.images.size();
    out.images.push_back(set.images[i]);
  }
  for (const auto& p : set.pairs) {
    if (remap[p.source] != SIZE_MAX && remap[p.target] != SIZE_MAX) {
      out.pairs.push_back({remap[p.source], remap[p.target]});
    }
  }
  return out;
}

// Manifest pairs split by identity with the same seeded shuffle build_pairs uses.
DatasetSplit load_split(const RunConfig& cfg) {
  const FacePairSet all = load_manifest_pairs(fs::path(cfg.dataset_dir) / "manifest.tsv");
  const DatasetSplit ids = build_pairs(all.images, cfg.data.split_seed, cfg.data.train_fraction);
  const auto train_ids = ids.train.identities();
  const auto test_ids = ids.test.identities();
  return {restrict_to(all, {train_ids.begin(), train_ids.end()}),
          restrict_to(all, {test_ids.begin(), test_ids.end()})};
}

void check_images(const FacePairSet& set, const ModelConfig& mc) {
  for (const auto& img : set.images) {
    const Shape want{mc.channels, mc.image_size, mc.image_size};
    if (img.pixels.shape() != want) {
      throw UsageError("dataset image is " + shape_string(img.pixels.shape()) + " but the model expects " +
                       shape_string(want));
    }
  }
}

TrainingState load_state(const std::string& path) {
  if (!fs::exists(path)) throw std::runtime_error("checkpoint '" + path + "' not found");
  return load_checkpoint(path);
}

std::string checkpoint_path(const std::string& given, const RunConfig& cfg) {
  return given.empty() ? (fs::path(cfg.run_dir) / "checkpoint.fvae").string() : given;
}

// ---------------------------------------------------------------- synth

int cmd_synth(const RunConfig& cfg) {
  const fs::path dir = cfg.dataset_dir;
  make_dir(dir);
  const SynthConfig& sc = cfg.data.synth;
  const auto ids = synth_identities(sc);
  std::vector<std::string> names(ids.size() * kExpressions.size());
  parallel_for(names.size(), [&](std::size_t i) {
    const int id = static_cast<int>(i / kExpressions.size());
    const Expression e = kExpressions[i % kExpressions.size()];
    char stem[48];
    std::snprintf(stem, sizeof stem, "id%03d_%s", id, std::string(to_string(e)).c_str());
    names[i] = std::string(stem) + (sc.channels == 1 ? ".pgm" : ".ppm");
    write_image(dir / names[i], denormalize(render_face({ids[id], e, 1.0f}, sc.image_size, sc.channels)));
  });
  std::vector<ManifestRecord> records;
  for (std::size_t id = 0; id < ids.size(); ++id)
    for (std::size_t s = 0; s < kExpressions.size(); ++s)
      for (std::size_t t = 0; t < kExpressions.size(); ++t) {
        if (s == t) continue;
        const std::size_t base = id * kExpressions.size();
        records.push_back({static_cast<int>(id), kExpressions[s], kExpressions[t], names[base + s],
                           names[base + t]});
      }
  write_manifest(dir / "manifest.tsv", records);
  save_run_config(dir / "config.json", cfg);
  std::printf("wrote %zu images and %zu pairs to %s\n", names.size(), records.size(), dir.c_str());
  return 0;
}

// ---------------------------------------------------------------- train

constexpr const char* kMetricsHeader = "step,recon,prior,coherence,total,mask_loss,val_total";

std::string metrics_row(const LogRow& r) {
  std::string line = std::to_string(r.step);
  auto cell = [&](std::optional<double> v) { line += "," + (v ? fmt_double(*v) : std::string()); };
  cell(r.fvae ? std::optional(r.fvae->recon) : std::nullopt);
  cell(r.fvae ? std::optional(r.fvae->prior) : std::nullopt);
  cell(r.fvae ? std::optional(r.fvae->coherence) : std::nullopt);
  cell(r.fvae ? std::optional(r.fvae->total) : std::nullopt);
  cell(r.mask_loss);
  cell(r.val_total);
  return line;
}

// Keeps the header and rows up to and including step.
void truncate_metrics(const fs::path& path, std::int64_t step) {
  std::string kept = std::string(kMetricsHeader) + "\n";
  std::ifstream in(path);
  std::string line;
  bool header = true;
  while (std::getline(in, line)) {
    if (header) {
      header = false;
      continue;
    }
    if (line.empty()) continue;
    if (std::stoll(line.substr(0, line.find(','))) <= step) kept += line + "\n";
  }
  write_text(path, kept);
}

int cmd_train(const CommonOptions& opts, const std::vector<std::string>& extras, const std::string& resume) {
  Json doc = base_document(opts);
  std::optional<TrainingState> state;
  if (!resume.empty()) {
    state.emplace(load_state(resume));
    doc["model"] = to_json(state->model.config());
    doc["train"] = to_json(state->config);
  }
  const RunConfig cfg = finish_config(doc, opts, extras);
  if (state) {
    if (cfg.model != state->model.config()) throw UsageError("model settings cannot change on resume");
    state->config = cfg.train;
  } else {
    state.emplace(cfg.model, cfg.train);
  }

  const DatasetSplit split = load_split(cfg);
  check_images(split.train, cfg.model);
  const DatasetSplit fit = validation_split(split.train, cfg.train);

  const fs::path run = cfg.run_dir;
  make_dir(run / "checkpoints");
  save_run_config(run / "config.json", cfg);
  const fs::path metrics = run / "metrics.csv";
  if (resume.empty()) {
    write_text(metrics, std::string(kMetricsHeader) + "\n");
  } else {
    truncate_metrics(metrics, state->step + state->mask_step);
  }
  std::ofstream log(metrics, std::ios::app);
  if (!log) throw std::runtime_error("cannot write '" + metrics.string() + "'");

  TrainHooks hooks;
  hooks.on_log = [&](const LogRow& r) {
    log << metrics_row(r) << "\n" << std::flush;
    if (r.fvae) {
      std::printf("step %lld total %.5f%s\n", static_cast<long long>(r.step), r.fvae->total,
                  r.val_total ? (" val " + fmt_double(*r.val_total)).c_str() : "");
    } else if (r.mask_loss) {
      std::printf("mask step %lld loss %.5f\n", static_cast<long long>(r.step), *r.mask_loss);
    }
  };
  hooks.on_checkpoint = [&](const TrainingState& s) {
    char name[40];
    std::snprintf(name, sizeof name, "step_%06lld.fvae", static_cast<long long>(s.step + s.mask_step));
    auto& mut = const_cast<TrainingState&>(s);
    save_checkpoint(mut, run / "checkpoints" / name);
    save_checkpoint(mut, run / "checkpoint.fvae");
  };
  try {
    run_training(*state, fit.train, fit.test, hooks);
  } catch (const NonFiniteLoss& e) {
    std::fprintf(stderr, "fvae train: %s; last good checkpoint kept in %s\n", e.what(), run.c_str());
    return 3;
  }
  save_checkpoint(*state, run / "checkpoint.fvae");
  std::printf("trained %lld steps and %lld mask steps%s; checkpoint %s\n",
              static_cast<long long>(state->step), static_cast<long long>(state->mask_step),
              state->early_stop.stopped ? " (stopped early)" : "", (run / "checkpoint.fvae").c_str());
  return 0;
}

// ---------------------------------------------------------------- editing

struct EditOptions {
  std::string checkpoint, source, first, second, out;
  std::string source_label, target_label;
  int steps = 5;
  int factor = 0;
};

std::optional<Expression> optional_label(const std::string& name) {
  if (name.empty()) return std::nullopt;
  return parse_expression(name);
}

fs::path out_dir(const EditOptions& eo, const RunConfig& cfg, const char* sub) {
  const fs::path dir = eo.out.empty() ? fs::path(cfg.run_dir) / sub : fs::path(eo.out);
  make_dir(dir);
  return dir;
}

void write_steps(const fs::path& dir, const std::vector<Tensor>& images) {
  for (std::size_t i = 0; i < images.size(); ++i) {
    write_image(dir / numbered("out", static_cast<int>(i) + 1, images[i].dim(0)), denormalize(images[i]));
  }
  std::printf("wrote %zu images to %s\n", images.size(), dir.c_str());
}

int cmd_edit(const RunConfig& cfg, const EditOptions& eo, bool highres) {
  TrainingState state = load_state(checkpoint_path(eo.checkpoint, cfg));
  const ModelConfig& mc = state.model.config();
  const DatasetSplit split = load_split(cfg);
  check_images(split.train, mc);
  const auto source_label = optional_label(eo.source_label);
  const Expression target_label = parse_expression(eo.target_label);
  std::vector<EditStep> steps;
  if (highres) {
    const Tensor src = normalize(read_image(eo.source));
    int factor = eo.factor;
    if (factor == 0) factor = static_cast<int>(src.dim(1) / mc.image_size);
    steps = edit_highres(state.model, src, source_label, target_label, eo.steps, split.train.images, factor);
  } else {
    const Tensor src = load_model_image(eo.source, mc, mc.image_size);
    steps = expression_edit(state.model, src, source_label, target_label, eo.steps, split.train.images);
  }
  std::vector<Tensor> images;
  for (auto& s : steps) images.push_back(std::move(s.image));
  write_steps(out_dir(eo, cfg, highres ? "edit_hires" : "edit"), images);
  return 0;
}

int cmd_interpolate(const RunConfig& cfg, const EditOptions& eo) {
  TrainingState state = load_state(checkpoint_path(eo.checkpoint, cfg));
  const ModelConfig& mc = state.model.config();
  const Tensor s1 = load_model_image(eo.first, mc, mc.image_size);
  const Tensor s2 = load_model_image(eo.second, mc, mc.image_size);
  std::vector<Tensor> images;
  for (auto& s : expression_interpolate(state.model, s1, s2, eo.steps)) images.push_back(std::move(s.image));
  write_steps(out_dir(eo, cfg, "interpolate"), images);
  return 0;
}

// ---------------------------------------------------------------- eval

int cmd_eval(const RunConfig& cfg, const EditOptions& eo, const std::string& which) {
  TrainingState state = load_state(checkpoint_path(eo.checkpoint, cfg));
  const ModelConfig& mc = state.model.config();
  FacePairSet set;
  if (which == "all") {
    set = load_manifest_pairs(fs::path(cfg.dataset_dir) / "manifest.tsv");
  } else {
    const DatasetSplit split = load_split(cfg);
    set = which == "train" ? split.train : split.test;
  }
  check_images(set, mc);
  if (set.pairs.empty()) throw UsageError("no pairs to evaluate");
  std::string report = "identity\tsource_label\ttarget_label\tpsnr_db\n";
  double sum = 0;
  for (std::size_t p = 0; p < set.pairs.size(); ++p) {
    const FaceImage& s = set.source(p);
    const FaceImage& t = set.target(p);
    const Tensor warped = batch_item(decode(state.model, s.pixels, encode(state.model, t.pixels).mu).warped, 0);
    const double db = psnr(denormalize(warped), denormalize(t.pixels));
    sum += db;
    report += std::to_string(s.identity) + "\t" + std::string(to_string(s.label)) + "\t" +
              std::string(to_string(t.label)) + "\t" + fmt_double(db) + "\n";
  }
  const double mean = sum / static_cast<double>(set.pairs.size());
  const fs::path dir = out_dir(eo, cfg, "eval");
  write_text(dir / "psnr.tsv", report);
  std::printf("mean PSNR %s dB over %zu pairs\n", fmt_double(mean).c_str(), set.pairs.size());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Flow variational autoencoder for facial expression editing"};
  app.require_subcommand(1);

  CommonOptions common;
  EditOptions eo;
  std::string resume, split = "test";

  auto* synth = app.add_subcommand("synth", "Render the synthetic face dataset and its manifest");
  add_common(synth, common);

  auto* train = app.add_subcommand("train", "Train the flow VAE and then the mask network");
  add_common(train, common);
  train->add_option("--resume", resume, "Continue from this checkpoint");

  auto* edit = app.add_subcommand("edit", "Move a face along an expression direction");
  auto* hires = app.add_subcommand("edit-hires", "Edit a larger image through an upsampled flow");
  for (auto* cmd : {edit, hires}) {
    add_common(cmd, common);
    cmd->add_option("--checkpoint", eo.checkpoint, "Checkpoint (default <run_dir>/checkpoint.fvae)");
    cmd->add_option("--source", eo.source, "Source image (PGM/PPM)")->required();
    cmd->add_option("--source-label", eo.source_label, "Expression of the source; omit to use its own code");
    cmd->add_option("--target-label", eo.target_label, "Expression to move towards")->required();
    cmd->add_option("--steps", eo.steps, "Number of output images")->check(CLI::PositiveNumber);
    cmd->add_option("--out", eo.out, "Output directory");
  }
  hires->add_option("--factor", eo.factor, "Resolution factor (default source size / model size)")
      ->check(CLI::Range(1, 4));

  auto* interp = app.add_subcommand("interpolate", "Blend between the expressions of two faces");
  add_common(interp, common);
  interp->add_option("--checkpoint", eo.checkpoint, "Checkpoint (default <run_dir>/checkpoint.fvae)");
  interp->add_option("--first", eo.first, "First source image")->required();
  interp->add_option("--second", eo.second, "Second source image")->required();
  interp->add_option("--steps", eo.steps, "Number of output images")->check(CLI::PositiveNumber);
  interp->add_option("--out", eo.out, "Output directory");

  auto* eval = app.add_subcommand("eval", "Mean PSNR of reconstructions from ground-truth target codes");
  add_common(eval, common);
  eval->add_option("--checkpoint", eo.checkpoint, "Checkpoint (default <run_dir>/checkpoint.fvae)");
  eval->add_option("--split", split, "Pairs to score")->check(CLI::IsMember({"test", "train", "all"}));
  eval->add_option("--out", eo.out, "Output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  }

  CLI::App* cmd = app.get_subcommands().front();
  try {
    const auto extras = cmd->remaining();
    if (cmd == train) return cmd_train(common, extras, resume);
    const RunConfig cfg = effective_config(common, extras);
    if (cmd == synth) return cmd_synth(cfg);
    if (cmd == edit) return cmd_edit(cfg, eo, false);
    if (cmd == hires) return cmd_edit(cfg, eo, true);
    if (cmd == interp) return cmd_interpolate(cfg, eo);
    return cmd_eval(cfg, eo, split);
  } catch (const UsageError& e) {
    std::fprintf(stderr, "fvae %s: %s\n", cmd->get_name().c_str(), e.what());
    return 2;
  } catch (const std::invalid_argument& e) {
    std::fprintf(stderr, "fvae %s: %s\n", cmd->get_name().c_str(), e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "fvae %s: %s\n", cmd->get_name().c_str(), e.what());
    return 1;
  }
}
