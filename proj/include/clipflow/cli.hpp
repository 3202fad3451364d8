#pragma once

// Command-line front end. `run` returns the process exit status:
// 0 success, 1 runtime failure, 2 usage error.

#include <CLI11.hpp>
#include <fcntl.h>
#include <fmt/format.h>
#include <spawn.h>
#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "clipflow/detail/binary_io.hpp"
#include "clipflow/error.hpp"
#include "clipflow/feature_store.hpp"
#include "clipflow/image_io.hpp"
#include "clipflow/model_file.hpp"
#include "clipflow/proxy_forge.hpp"
#include "clipflow/scorer_eval.hpp"
#include "clipflow/trainer.hpp"

extern char** environ;

namespace clipflow::cli {

namespace fs = std::filesystem;

inline constexpr const char* kExtractorEnv = "CLIPFLOW_EXTRACTOR";
inline constexpr std::uint32_t kDefaultExtractorDim = 768;

namespace detail {

inline void require_file(const fs::path& p, std::string_view what) {
  if (!fs::is_regular_file(p)) throw IoError(std::string(what) + " not found: " + p.string());
}

inline void require_dir(const fs::path& p, std::string_view what) {
  if (!fs::is_directory(p)) throw IoError(std::string(what) + " is not a directory: " + p.string());
}

inline void require_parent(const fs::path& p) {
  const fs::path parent = p.parent_path();
  if (!parent.empty() && !fs::is_directory(parent))
    throw IoError("output directory does not exist: " + parent.string());
}

inline bool has_image_extension(const fs::path& p) {
  std::string ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return ext == ".png" || ext == ".jpg" || ext == ".jpeg";
}

inline std::vector<fs::path> list_files(const fs::path& dir, bool png_only) {
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    const auto& p = e.path();
    if (png_only ? p.extension() == ".png" || p.extension() == ".PNG" : has_image_extension(p)) out.push_back(p);
  }
  std::sort(out.begin(), out.end());
  return out;
}

struct SpawnResult {
  int exit_code = 0;
  std::string diagnostics;
};

/// Runs `argv` with stderr captured to a temporary file.
inline SpawnResult spawn_and_wait(const std::vector<std::string>& argv, const fs::path& stderr_path) {
  posix_spawn_file_actions_t actions;
  posix_spawn_file_actions_init(&actions);
  posix_spawn_file_actions_addopen(&actions, STDERR_FILENO, stderr_path.c_str(), O_WRONLY | O_CREAT | O_TRUNC, 0644);
  std::vector<char*> cargv;
  for (const auto& a : argv) cargv.push_back(const_cast<char*>(a.c_str()));
  cargv.push_back(nullptr);
  pid_t pid = 0;
  const int rc = posix_spawnp(&pid, cargv[0], &actions, nullptr, cargv.data(), environ);
  posix_spawn_file_actions_destroy(&actions);
  if (rc != 0) throw IoError("cannot launch extractor " + argv[0] + ": " + std::strerror(rc));
  int status = 0;
  if (waitpid(pid, &status, 0) < 0) throw IoError("waiting for extractor failed");
  SpawnResult r;
  r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : 128 + (WIFSIGNALED(status) ? WTERMSIG(status) : 0);
  std::error_code ec;
  if (fs::exists(stderr_path, ec)) {
    r.diagnostics = clipflow::detail::read_file_bytes(stderr_path);
    fs::remove(stderr_path, ec);
  }
  return r;
}

inline std::string loss_csv(const std::vector<double>& losses) {
  std::string out = "epoch,mean_loss\n";
  for (std::size_t i = 0; i < losses.size(); ++i) out += fmt::format("{},{:.17g}\n", i + 1, losses[i]);
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Subcommand option sets

struct ForgeOptions {
  std::string in_dir, out_dir, op = "frequency_mask", band = "low";
  double ratio = 1.0;
  bool phase_only = false;
  std::uint64_t seed = 0;
  double noise_sigma = 5.0;
  std::optional<double> blur_sigma, sharpen_amount;
  double brightness = 0.0, contrast = 0.0, saturation = 0.0, hue = 0.0;
  bool jitter_set = false;
  double stop_inner = 30.0, stop_outer = 100.0;
};

struct ExtractOptions {
  std::string images, mode = "test", out, extractor;
  std::uint32_t expected_dim = kDefaultExtractorDim;
  std::optional<int> batch;
  std::uint64_t seed = 0;
  bool square_resize = false;
};

struct TrainOptions {
  std::string manifest, mode, out, loss_csv;
  double lr = 1e-4;
  std::size_t batch = 128;
  std::size_t epochs = 0;
  int dim = kDefaultReducedDim, blocks = 8, hidden = 256;
  double clamp = 1.9;
  std::uint64_t seed = 0;
  bool freeze_adapter = false, paper_eq7_signs = false, no_dr = false, no_normalize = false;
  double dequant_sigma = 0.0;
};

struct ThresholdOptions {
  std::string model, val_manifest, criterion = "balanced", out;
};

struct ScoreOptions {
  std::string model, features, out;
};

struct EvalOptions {
  std::string model, out, text_out;
  std::vector<std::string> manifests;
  std::optional<double> threshold;
};

// ---------------------------------------------------------------------------
// Subcommand bodies

inline void forge_proxies(const ForgeOptions& o, std::ostream& log) {
  detail::require_dir(o.in_dir, "input directory");
  ProxyConfig cfg;
  cfg.operation = parse_proxy_operation(o.op);
  if (cfg.operation == ProxyOperation::frequency_mask) {
    SpectralMaskSpec spec;
    spec.band = parse_band(o.band);
    spec.ratio = o.ratio;
    spec.phase_only = o.phase_only;
    if (!(o.ratio >= 0.0 && o.ratio <= 1.0)) throw ConfigError("--ratio must lie in [0, 1]");
    cfg.spectral = spec;
  }
  cfg.noise_sigma = o.noise_sigma;
  cfg.blur_sigma = o.blur_sigma;
  cfg.sharpen_amount = o.sharpen_amount;
  if (o.jitter_set) cfg.jitter = ColorJitter{o.brightness, o.contrast, o.saturation, o.hue};
  cfg.band_stop_inner = o.stop_inner;
  cfg.band_stop_outer = o.stop_outer;

  validate_proxy_config(cfg);
  const auto inputs = detail::list_files(o.in_dir, true);
  if (inputs.empty()) throw IoError("no PNG images in " + o.in_dir);
  if (fs::exists(o.out_dir) && fs::equivalent(o.in_dir, o.out_dir))
    throw ConfigError("--out must differ from --in");
  fs::create_directories(o.out_dir);
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    ProxyConfig c = cfg;
    const std::uint64_t s = o.seed ^ static_cast<std::uint64_t>(i);
    c.seed = s;
    if (c.spectral) c.spectral->seed = s;
    write_png(fs::path(o.out_dir) / inputs[i].filename(), make_proxy(read_png(inputs[i]), c));
  }
  log << "forged " << inputs.size() << " proxies with " << o.op << " into " << o.out_dir << "\n";
}

inline void extract_features(const ExtractOptions& o, std::ostream& log) {
  std::string exe = o.extractor;
  if (exe.empty()) {
    const char* env = std::getenv(kExtractorEnv);
    if (env) exe = env;
  }
  if (exe.empty())
    throw IoError(std::string("no feature extractor configured: set ") + kExtractorEnv + " or pass --extractor");
  if (o.mode != "train" && o.mode != "test") throw ConfigError("--mode must be train or test");
  detail::require_dir(o.images, "image directory");
  const fs::path out = o.out;
  detail::require_parent(out);
  const auto images = detail::list_files(o.images, false);
  if (images.empty()) throw IoError("no images in " + o.images);

  const fs::path list_path = fs::path(out.string() + ".list");
  {
    std::ofstream list(list_path);
    for (const auto& p : images) list << fs::absolute(p).string() << "\n";
    if (!list) throw IoError("cannot write image list " + list_path.string());
  }
  std::vector<std::string> argv{exe, "--images", list_path.string(), "--mode", o.mode, "--out", out.string()};
  if (o.batch) argv.insert(argv.end(), {"--batch", std::to_string(*o.batch)});
  argv.insert(argv.end(), {"--seed", std::to_string(o.seed)});
  if (o.square_resize) argv.push_back("--square-resize");

  const auto result = detail::spawn_and_wait(argv, fs::path(out.string() + ".stderr"));
  std::error_code ec;
  fs::remove(list_path, ec);
  if (result.exit_code != 0)
    throw IoError("extractor exited with status " + std::to_string(result.exit_code) +
                  (result.diagnostics.empty() ? std::string() : ":\n" + result.diagnostics));
  if (!result.diagnostics.empty()) log << result.diagnostics;

  const FeatureHeader header = read_feature_header(out);
  if (header.dim != o.expected_dim)
    throw FormatError("extractor produced unexpected dimension " + std::to_string(header.dim) + " (expected " +
                      std::to_string(o.expected_dim) + ")");
  const FeatureMatrix m = read_feature_file(out);
  if (static_cast<std::size_t>(m.rows()) != images.size())
    log << "warning: extractor skipped " << images.size() - static_cast<std::size_t>(m.rows()) << " image(s)\n";
  log << "extracted " << m.rows() << " x " << m.cols() << " features to " << out.string() << "\n";
}

inline void train_command(const TrainOptions& o, std::ostream& log) {
  detail::require_file(o.manifest, "manifest");
  detail::require_parent(o.out);
  TrainConfig cfg;
  cfg.mode = parse_train_mode(o.mode);
  cfg.adam.learning_rate = o.lr;
  cfg.batch_size = o.batch;
  cfg.epochs = o.epochs;
  cfg.seed = o.seed;
  cfg.flow = FlowConfig{o.dim, o.blocks, o.hidden, o.clamp};
  cfg.use_dr = !o.no_dr;
  cfg.normalize = !o.no_normalize;
  cfg.freeze_adapter = o.freeze_adapter;
  cfg.paper_eq7_signs = o.paper_eq7_signs;
  cfg.dequant_sigma = o.dequant_sigma;
  if (!(cfg.adam.learning_rate > 0.0)) throw ConfigError("--lr must be positive");
  if (cfg.batch_size < 1) throw ConfigError("--batch must be at least 1");
  validate_flow_config(cfg.flow);

  const DatasetManifest manifest = load_manifest(o.manifest);
  const TrainResult r = train(manifest, cfg);
  save_model(r.model, o.out);
  const fs::path csv = o.loss_csv.empty() ? fs::path(o.out + ".loss.csv") : fs::path(o.loss_csv);
  clipflow::detail::write_file_bytes(csv, detail::loss_csv(r.epoch_loss));
  log << "trained mode " << to_string(cfg.mode) << " for " << r.epoch_loss.size() << " epoch(s); final loss "
      << fmt::format("{:.6g}", r.epoch_loss.back()) << "; model written to " << o.out << "\n";
}

inline void pick_threshold_command(const ThresholdOptions& o, std::ostream& out) {
  detail::require_file(o.model, "model file");
  detail::require_file(o.val_manifest, "validation manifest");
  const auto criterion = parse_criterion(o.criterion);
  const fs::path dest = o.out.empty() ? fs::path(o.model) : fs::path(o.out);
  detail::require_parent(dest);

  Model model = load_model(o.model);
  const DatasetManifest manifest = load_manifest(o.val_manifest);
  std::vector<ScoredSample> samples;
  for (const auto& e : manifest.with_role(Role::val)) {
    for (double s : score_features(read_feature_file(e.path), model))
      samples.push_back({s, static_cast<int>(e.label), e.dataset});
  }
  if (samples.empty()) throw ConfigError("validation manifest has no val entries");
  const double t = pick_threshold(samples, criterion);
  model.meta.threshold = t;
  save_model(model, dest);
  out << fmt::format("threshold {:.9g} (balanced accuracy {:.4f}, accuracy {:.4f} on {} validation samples)\n", t,
                     balanced_accuracy(samples, t), accuracy(samples, t), samples.size());
}

inline void score_command(const ScoreOptions& o, std::ostream& log) {
  detail::require_file(o.model, "model file");
  detail::require_file(o.features, "feature file");
  detail::require_parent(o.out);
  const Model model = load_model(o.model);
  const auto scores = score_features(read_feature_file(o.features), model);
  std::string csv = "index,score\n";
  for (std::size_t i = 0; i < scores.size(); ++i) csv += fmt::format("{},{:.17g}\n", i, scores[i]);
  clipflow::detail::write_file_bytes(o.out, csv);
  log << "scored " << scores.size() << " samples\n";
}

inline void eval_command(const EvalOptions& o, std::ostream& out) {
  detail::require_file(o.model, "model file");
  for (const auto& m : o.manifests) detail::require_file(m, "manifest");
  detail::require_parent(o.out);
  const Model model = load_model(o.model);
  const std::optional<double> threshold = o.threshold ? o.threshold : model.meta.threshold;
  if (!threshold) throw ConfigError("model has no stored threshold; run pick-threshold or pass --threshold");
  std::vector<DatasetManifest> manifests;
  for (const auto& m : o.manifests) manifests.push_back(load_manifest(m));
  const EvalReport rep = benchmark(model, manifests, *threshold);
  clipflow::detail::write_file_bytes(o.out, report_csv(rep));
  out << report_text(rep);
}

inline void inspect_model_command(const std::string& path, std::ostream& out) {
  detail::require_file(path, "model file");
  const Model m = load_model(path);
  out << "format version  " << kModelVersion << "\n"
      << "raw dim D_raw   " << m.adapter.in_dim() << "\n"
      << "flow dim C      " << m.flow.dim << "\n"
      << "blocks K        " << m.flow.blocks.size() << "\n"
      << "hidden H        " << m.flow.hidden << "\n"
      << "clamp           " << fmt::format("{:g}", m.flow.clamp) << "\n"
      << "normalize       " << (m.adapter.normalize ? "yes" : "no") << "\n"
      << "frozen adapter  " << (m.meta.frozen_adapter ? "yes" : "no") << "\n"
      << "training mode   " << to_string(m.meta.mode) << "\n"
      << "loss signs      " << (m.meta.paper_eq7_signs ? "literal" : "standard") << "\n"
      << "train seed      " << m.meta.train_seed << "\n"
      << "adapter seed    " << m.meta.adapter_seed << "\n"
      << "flow seed       " << m.meta.flow_seed << "\n"
      << "threshold       " << (m.meta.threshold ? fmt::format("{:.9g}", *m.meta.threshold) : "unset") << "\n";
}

// ---------------------------------------------------------------------------

inline int run(const std::vector<std::string>& args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"clipflow: AI-generated image detection with proxy-trained normalizing flows", "clipflow"};
  app.require_subcommand(1);
  bool verbose = false;
  app.add_flag("-v,--verbose", verbose, "Print progress details");

  ForgeOptions forge;
  auto* c_forge = app.add_subcommand("forge-proxies", "Perturb natural PNG images into proxy images");
  c_forge->add_option("--in", forge.in_dir, "Directory of natural PNG images")->required();
  c_forge->add_option("--out", forge.out_dir, "Output directory")->required();
  c_forge->add_option("--op", forge.op,
                      "frequency_mask | smoothing | sharpening | gaussian_noise | color_jitter | band_stop")
      ->check(CLI::IsMember({"frequency_mask", "smoothing", "sharpening", "gaussian_noise", "color_jitter", "band_stop"}));
  c_forge->add_option("--band", forge.band, "low | mid | high")->check(CLI::IsMember({"low", "mid", "high"}));
  c_forge->add_option("--ratio", forge.ratio, "Per-bin masking probability in [0, 1]");
  c_forge->add_flag("--phase-only", forge.phase_only, "Zero the phase of masked bins, keep magnitude");
  c_forge->add_option("--seed", forge.seed, "Base seed; image i uses seed XOR i");
  c_forge->add_option("--noise-sigma", forge.noise_sigma, "Gaussian noise std (pixel units)");
  c_forge->add_option("--blur-sigma", forge.blur_sigma, "Gaussian blur std (pixels)");
  c_forge->add_option("--sharpen-amount", forge.sharpen_amount, "Unsharp-mask gain");
  auto* jb = c_forge->add_option("--brightness", forge.brightness, "Color jitter brightness range");
  auto* jc = c_forge->add_option("--contrast", forge.contrast, "Color jitter contrast range");
  auto* js = c_forge->add_option("--saturation", forge.saturation, "Color jitter saturation range");
  auto* jh = c_forge->add_option("--hue", forge.hue, "Color jitter hue range (turns, <= 0.5)");
  c_forge->add_option("--stop-inner", forge.stop_inner, "band_stop inner Chebyshev radius");
  c_forge->add_option("--stop-outer", forge.stop_outer, "band_stop outer Chebyshev radius");

  ExtractOptions ext;
  auto* c_ext = app.add_subcommand("extract-features", "Run the embedding extractor over an image directory");
  c_ext->add_option("--images", ext.images, "Image directory")->required();
  c_ext->add_option("--mode", ext.mode, "train | test")->check(CLI::IsMember({"train", "test"}));
  c_ext->add_option("--out", ext.out, "Output feature file")->required();
  c_ext->add_option("--extractor", ext.extractor, std::string("Extractor executable (default: $") + kExtractorEnv + ")");
  c_ext->add_option("--expected-dim", ext.expected_dim, "Required embedding width");
  c_ext->add_option("--batch", ext.batch, "Extractor batch size");
  c_ext->add_option("--seed", ext.seed, "Seed for train-mode crops");
  c_ext->add_flag("--square-resize", ext.square_resize, "Stretch to 256x256 instead of short-side resize");

  TrainOptions tr;
  auto* c_train = app.add_subcommand("train", "Train adapter + flow from a manifest");
  c_train->add_option("--manifest", tr.manifest, "Training manifest")->required();
  c_train->add_option("--mode", tr.mode, "N | P | N+P")->required()->check(CLI::IsMember({"N", "P", "N+P"}));
  c_train->add_option("--out", tr.out, "Output model file")->required();
  c_train->add_option("--lr", tr.lr, "Adam learning rate");
  c_train->add_option("--batch", tr.batch, "Batch size");
  c_train->add_option("--epochs", tr.epochs, "Epochs (default 30 for N and P, 10 for N+P)");
  c_train->add_option("--dim", tr.dim, "Reduced dimension C");
  c_train->add_option("--blocks", tr.blocks, "Coupling blocks K");
  c_train->add_option("--hidden", tr.hidden, "Subnet hidden width H");
  c_train->add_option("--clamp", tr.clamp, "Soft clamp for log-scales");
  c_train->add_option("--seed", tr.seed, "Seed");
  c_train->add_flag("--freeze-adapter", tr.freeze_adapter, "Keep the DR matrix at its initial value");
  c_train->add_flag("--paper-eq7-signs", tr.paper_eq7_signs, "Use the literal printed loss signs (negated objective)");
  c_train->add_flag("--no-dr", tr.no_dr, "Skip dimension reduction (requires --dim == raw dim)");
  c_train->add_flag("--no-normalize", tr.no_normalize, "Skip unit-norm feature normalization");
  c_train->add_option("--dequant-sigma", tr.dequant_sigma, "Std of noise added to adapted features");
  c_train->add_option("--loss-csv", tr.loss_csv, "Loss history CSV (default <out>.loss.csv)");

  ThresholdOptions th;
  auto* c_th = app.add_subcommand("pick-threshold", "Select and store a decision threshold");
  c_th->add_option("--model", th.model, "Model file")->required();
  c_th->add_option("--val-manifest", th.val_manifest, "Validation manifest (role val)")->required();
  c_th->add_option("--criterion", th.criterion, "balanced | accuracy | eer")
      ->check(CLI::IsMember({"balanced", "accuracy", "eer"}));
  c_th->add_option("--out", th.out, "Write the updated model here instead of in place");

  ScoreOptions sc;
  auto* c_score = app.add_subcommand("score", "Write anomaly scores for a feature file");
  c_score->add_option("--model", sc.model, "Model file")->required();
  c_score->add_option("--features", sc.features, "Feature file")->required();
  c_score->add_option("--out", sc.out, "Output CSV (index,score)")->required();

  EvalOptions ev;
  auto* c_eval = app.add_subcommand("eval", "Per-dataset AP / accuracy and their means");
  c_eval->add_option("--model", ev.model, "Model file")->required();
  c_eval->add_option("--manifests", ev.manifests, "Test manifests")->required()->delimiter(',');
  c_eval->add_option("--out", ev.out, "Report CSV")->required();
  c_eval->add_option("--threshold", ev.threshold, "Override the stored threshold");

  std::string inspect_path;
  auto* c_inspect = app.add_subcommand("inspect-model", "Print model header metadata");
  c_inspect->add_option("--model", inspect_path, "Model file")->required();

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    const CLI::App* target = &app;
    for (auto* sub : app.get_subcommands()) target = sub;
    out << target->help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n";
    const CLI::App* target = &app;
    for (auto* sub : app.get_subcommands()) target = sub;
    err << target->help();
    return 2;
  }
  forge.jitter_set = jb->count() + jc->count() + js->count() + jh->count() > 0;

  std::ostringstream sink;
  std::ostream& log = verbose ? err : static_cast<std::ostream&>(sink);
  try {
    if (*c_forge) forge_proxies(forge, log);
    else if (*c_ext) extract_features(ext, log);
    else if (*c_train) train_command(tr, log);
    else if (*c_th) pick_threshold_command(th, out);
    else if (*c_score) score_command(sc, log);
    else if (*c_eval) eval_command(ev, out);
    else if (*c_inspect) inspect_model_command(inspect_path, out);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

inline int run(int argc, const char* const* argv) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return run(args);
}

}  // namespace clipflow::cli
