// Command-line front end: profile, train, eval, predict, gradcheck, synth.
//
// Every failure ends with one JSON line on stderr, {"error": kind, "message": ...},
// and a nonzero exit code.

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "ctfm/ctfm.hpp"

namespace fs = std::filesystem;
using namespace ctfm;
using json = nlohmann::json;

namespace {

/// A config file path or one of the built-in presets.
ModelConfig resolve_config(const std::string& spec) {
  if (spec == "reference") return ModelConfig::reference();
  if (spec == "tiny") return ModelConfig::tiny();
  if (spec == "gradcheck") return ModelConfig::gradcheck();
  return load_model_config(spec);
}

Shape parse_input_shape(const std::string& text) {
  Shape dims;
  std::stringstream in(text);
  std::string part;
  while (std::getline(in, part, 'x')) {
    require(!part.empty() && part.find_first_not_of("0123456789") == std::string::npos, ErrorKind::InvalidParameter,
            "profile: --input must look like 4x384x384, got \"" + text + "\"");
    dims.push_back(std::stoul(part));
  }
  require(dims.size() == 3 || dims.size() == 4, ErrorKind::InvalidParameter,
          "profile: --input needs CxHxW or NxCxHxW, got \"" + text + "\"");
  if (dims.size() == 3) dims.insert(dims.begin(), 1);
  return dims;
}

void write_text(const std::string& path, const std::string& text) {
  if (path.empty() || path == "-") {
    std::cout << text;
    return;
  }
  if (fs::path(path).has_parent_path()) fs::create_directories(fs::path(path).parent_path());
  std::ofstream out(path);
  require(out.good(), ErrorKind::Io, "cannot open " + path + " for writing");
  out << text;
  require(out.good(), ErrorKind::Io, "write failed for " + path);
}

/// Smallest multiple of the output stride covering the scene, capped at 384.
std::size_t auto_patch(const std::vector<Scene>& scenes, std::size_t stride) {
  std::size_t extent = 0;
  for (const auto& s : scenes) extent = std::max({extent, s.height(), s.width()});
  return std::min(detail::round_up(std::max<std::size_t>(extent, 1), stride), detail::round_up(384, stride));
}

struct ProfileArgs {
  std::string config = "reference";
  std::string input = "4x384x384";
  bool ablation = false;
  std::string format = "csv";
  std::string out;
};

void run_profile(const ProfileArgs& a) {
  const ModelConfig config = resolve_config(a.config);
  const Shape shape = parse_input_shape(a.input);
  require(shape[1] == config.bands, ErrorKind::Incompatible,
          "profile: input has " + std::to_string(shape[1]) + " bands, config expects " + std::to_string(config.bands));
  if (a.ablation) {
    json rows = json::array();
    std::ostringstream csv;
    csv << "method,params,params_m,macs,gflops\n";
    for (const auto& row : ablation_rows(config)) {
      CdCtfm<float> model(row.config);
      const auto report = cost(model, shape);
      char buf[160];
      std::snprintf(buf, sizeof buf, "%s,%llu,%.4f,%llu,%.4f\n", row.method.c_str(),
                    static_cast<unsigned long long>(report.total_params()), report.params_m(),
                    static_cast<unsigned long long>(report.total_macs()), report.gflops());
      csv << buf;
      rows.push_back({{"method", row.method},
                      {"params", report.total_params()},
                      {"macs", report.total_macs()},
                      {"gflops", report.gflops()}});
    }
    write_text(a.out, a.format == "json" ? json{{"input", shape}, {"rows", rows}}.dump(2) + "\n" : csv.str());
    return;
  }
  CdCtfm<float> model(config);
  const auto report = cost(model, shape);
  if (a.format == "json") {
    json j = report.to_json();
    j["input"] = shape;
    write_text(a.out, j.dump(2) + "\n");
  } else {
    write_text(a.out, report.to_csv());
  }
}

struct TrainArgs {
  std::string config = "tiny";
  std::string data;
  std::string out;
  std::string preset = "desk";
  double val_fraction = 0.1;
  std::optional<double> lr;
  std::optional<std::size_t> batch, epochs, max_steps, patch;
  std::uint64_t seed = 0;
};

void run_train(const TrainArgs& a) {
  const ModelConfig config = resolve_config(a.config);
  TrainConfig cfg = a.preset == "published" ? TrainConfig::published() : TrainConfig::desk();
  cfg.val_fraction = a.val_fraction;
  cfg.seed = a.seed;
  if (a.lr) cfg.lr0 = *a.lr;
  if (a.batch) cfg.batch_size = *a.batch;
  if (a.epochs) cfg.epochs = *a.epochs;
  if (a.max_steps) cfg.max_steps = *a.max_steps;
  if (a.patch) cfg.patch_size = *a.patch;
  cfg.validate();

  const auto scenes = load_dataset(a.data);
  CdCtfm<float> model(config);
  const auto start = std::chrono::steady_clock::now();
  const auto result = train(model, scenes, cfg, {}, [&](const EpochRecord& e) {
    const auto m = metrics(e.val);
    json line{{"epoch", e.epoch}, {"train_loss", e.train_loss}};
    if (m.miou) line["val_miou"] = *m.miou;
    std::cerr << line.dump() << "\n";
  });
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

  save_checkpoint(a.out, model);
  write_text(a.out + ".loss.csv", loss_curve_csv(result));
  write_text(a.out + ".epochs.csv", epoch_csv(result));
  json summary{{"checkpoint", a.out},
               {"steps", result.steps.size()},
               {"train_patches", result.train_patches},
               {"val_patches", result.val_patches},
               {"seconds", seconds}};
  if (!result.steps.empty()) summary["final_loss"] = result.steps.back().loss;
  if (!result.epochs.empty())
    if (const auto m = metrics(result.epochs.back().val); m.miou) summary["val_miou"] = *m.miou;
  std::cout << summary.dump() << "\n";
}

struct EvalArgs {
  std::string ckpt;
  std::string data;
  std::string report;
  std::string method = "CD-CTFM";
  std::optional<double> threshold;
  std::optional<std::size_t> patch;
};

void run_eval(const EvalArgs& a) {
  auto model = load_checkpoint<float>(a.ckpt);
  const auto scenes = load_dataset(a.data);
  const std::size_t stride = model->config().output_stride();
  const std::size_t patch = a.patch ? *a.patch : auto_patch(scenes, stride);
  const double threshold = a.threshold ? *a.threshold : model->config().threshold;
  const auto counts = evaluate_scenes(*model, scenes, patch, threshold);
  const auto profile = cost(*model, {1, model->config().bands, 384, 384});
  write_text(a.report, metrics_csv_header() + metrics_csv_row(a.method, counts, profile.params_m(), profile.gflops()));
  if (!a.report.empty() && a.report != "-")
    std::cout << json{{"report", a.report}, {"scenes", scenes.size()}, {"pixels", counts.total()}}.dump() << "\n";
}

struct PredictArgs {
  std::string ckpt;
  std::string manifest;
  std::string out;
  std::optional<double> threshold;
  std::optional<std::size_t> patch;
};

void run_predict(const PredictArgs& a) {
  auto model = load_checkpoint<float>(a.ckpt);
  const Scene scene = load_scene(a.manifest);
  const std::size_t patch = a.patch ? *a.patch : auto_patch({scene}, model->config().output_stride());
  const double threshold = a.threshold ? *a.threshold : model->config().threshold;
  const auto mask = predict_scene(*model, scene, patch, threshold);
  fs::create_directories(a.out);
  const std::string mask_path = (fs::path(a.out) / (scene.id + "_pred.pgm")).string();
  const std::string overlay_path = (fs::path(a.out) / (scene.id + "_overlay.ppm")).string();
  write_mask_pgm(mask_path, mask);
  write_overlay_ppm(overlay_path, mask, scene.mask);
  const auto m = metrics(confusion(mask, scene.mask));
  json j{{"scene", scene.id}, {"mask", mask_path}, {"overlay", overlay_path}};
  j["miou"] = m.miou ? json(*m.miou) : json(nullptr);
  std::cout << j.dump() << "\n";
}

bool run_gradcheck(const std::string& config_spec, std::size_t max_probes) {
  GradCheckOptions opt;
  opt.max_probes = max_probes;
  bool ok = true;
  std::cout << "block,max_rel_error,tolerance,probes,worst,passed\n";
  for (const auto& r : gradcheck_blocks(resolve_config(config_spec), opt)) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.3e,%.0e", r.result.max_rel_error, r.tolerance);
    std::cout << r.block << "," << buf << "," << r.result.probes << "," << r.result.worst << ","
              << (r.passed() ? "true" : "false") << "\n";
    ok = ok && r.passed();
  }
  return ok;
}

struct SynthArgs {
  std::uint64_t seed = 0;
  std::size_t scenes = 10;
  std::size_t size = 64;
  std::size_t bands = 4;
  std::optional<double> density, texture;
  std::string out;
};

void run_synth(const SynthArgs& a) {
  require(a.scenes >= 1, ErrorKind::InvalidParameter, "synth: --scenes must be >= 1");
  SplitMix64 rng(a.seed);
  for (std::size_t i = 0; i < a.scenes; ++i) {
    SynthOptions opt;
    opt.size = a.size;
    opt.bands = a.bands;
    opt.cloud_density = a.density ? *a.density : rng.uniform(0.3, 0.7);
    opt.texture_level = a.texture ? *a.texture : rng.uniform(0.2, 0.8);
    Scene s = synth_scene(a.seed * 1000003 + i, opt);
    char id[32];
    std::snprintf(id, sizeof id, "scene_%05zu", i);
    s.id = id;
    save_scene(s, a.out);
  }
  std::cout << json{{"out", a.out}, {"scenes", a.scenes}, {"size", a.size}}.dump() << "\n";
}

int report_error(const std::string& kind, const std::string& message, int code) {
  std::cerr << json{{"error", kind}, {"message", message}}.dump() << "\n";
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Lightweight CNN-Transformer cloud segmentation"};
  app.require_subcommand(1);

  ProfileArgs pa;
  auto* profile = app.add_subcommand("profile", "Parameter and FLOP report, no weights needed");
  profile->add_option("--config", pa.config, "Model config JSON or preset (reference, tiny, gradcheck)");
  profile->add_option("--input", pa.input, "Input shape CxHxW or NxCxHxW");
  profile->add_flag("--ablation", pa.ablation, "Four-row backbone/LWFPM/LWAM table");
  profile->add_option("--format", pa.format, "csv or json")->check(CLI::IsMember({"csv", "json"}));
  profile->add_option("--out", pa.out, "Output file (default stdout)");

  TrainArgs ta;
  auto* train_cmd = app.add_subcommand("train", "Train from a directory of scene manifests");
  train_cmd->add_option("--config", ta.config, "Model config JSON or preset");
  train_cmd->add_option("--data", ta.data, "Dataset directory")->required();
  train_cmd->add_option("--out", ta.out, "Checkpoint path")->required();
  train_cmd->add_option("--preset", ta.preset, "desk or published")->check(CLI::IsMember({"desk", "published"}));
  train_cmd->add_option("--val-fraction", ta.val_fraction, "Held-out scene fraction")->check(CLI::Range(0.0, 0.99));
  train_cmd->add_option("--lr", ta.lr, "Initial learning rate");
  train_cmd->add_option("--batch", ta.batch, "Batch size");
  train_cmd->add_option("--epochs", ta.epochs, "Epochs");
  train_cmd->add_option("--max-steps", ta.max_steps, "Step cap (0: none)");
  train_cmd->add_option("--patch", ta.patch, "Training patch size");
  train_cmd->add_option("--seed", ta.seed, "Shuffle and split seed");

  EvalArgs ea;
  auto* eval_cmd = app.add_subcommand("eval", "Metrics CSV over a dataset");
  eval_cmd->add_option("--ckpt", ea.ckpt, "Checkpoint")->required();
  eval_cmd->add_option("--data", ea.data, "Dataset directory")->required();
  eval_cmd->add_option("--report", ea.report, "CSV output (default stdout)");
  eval_cmd->add_option("--method", ea.method, "Method label for the row");
  eval_cmd->add_option("--threshold", ea.threshold, "Override the checkpoint threshold");
  eval_cmd->add_option("--patch", ea.patch, "Inference patch size");

  PredictArgs pra;
  auto* predict_cmd = app.add_subcommand("predict", "Mask PGM and error overlay PPM for one scene");
  predict_cmd->add_option("--ckpt", pra.ckpt, "Checkpoint")->required();
  predict_cmd->add_option("--manifest", pra.manifest, "Scene manifest JSON")->required();
  predict_cmd->add_option("--out", pra.out, "Output directory")->required();
  predict_cmd->add_option("--threshold", pra.threshold, "Override the checkpoint threshold");
  predict_cmd->add_option("--patch", pra.patch, "Inference patch size");

  std::string gc_config = "gradcheck";
  std::size_t gc_probes = 0;
  auto* gradcheck_cmd = app.add_subcommand("gradcheck", "Finite-difference check of every composite block");
  gradcheck_cmd->add_option("--config", gc_config, "Model config JSON or preset");
  gradcheck_cmd->add_option("--max-probes", gc_probes, "Entries probed per tensor (0: all)");

  SynthArgs sa;
  auto* synth_cmd = app.add_subcommand("synth", "Write synthetic scenes with exact masks");
  synth_cmd->add_option("--seed", sa.seed, "Seed");
  synth_cmd->add_option("--scenes", sa.scenes, "Number of scenes");
  synth_cmd->add_option("--size", sa.size, "Scene edge in pixels");
  synth_cmd->add_option("--bands", sa.bands, "Bands per scene");
  synth_cmd->add_option("--density", sa.density, "Fixed cloud density (default U(0.3, 0.7))");
  synth_cmd->add_option("--texture", sa.texture, "Fixed texture level (default U(0.2, 0.8))");
  synth_cmd->add_option("--out", sa.out, "Output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return report_error("usage", e.what(), 64);
  }

  try {
    if (*profile) run_profile(pa);
    if (*train_cmd) run_train(ta);
    if (*eval_cmd) run_eval(ea);
    if (*predict_cmd) run_predict(pra);
    if (*gradcheck_cmd && !run_gradcheck(gc_config, gc_probes))
      return report_error("gradcheck_failed", "a block exceeded its tolerance", 1);
    if (*synth_cmd) run_synth(sa);
  } catch (const Error& e) {
    return report_error(std::string(to_string(e.kind())), e.what(), 2);
  } catch (const std::exception& e) {
    return report_error("internal", e.what(), 3);
  }
  return 0;
}
