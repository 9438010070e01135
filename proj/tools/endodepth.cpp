// endodepth: command-line front end.
//
// Exit status: 0 success, 1 usage error, 2 validation or data error,
// 3 numerical failure.

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "endodepth/depth_model.hpp"
#include "endodepth/gradcheck.hpp"
#include "endodepth/image_io.hpp"
#include "endodepth/sparse_supervision.hpp"
#include "endodepth/synthetic.hpp"
#include "endodepth/text.hpp"
#include "endodepth/train_eval.hpp"

namespace fs = std::filesystem;
using namespace endodepth;

namespace {

constexpr std::uint64_t kDefaultSeed = 20190220;

struct Common {
  std::string config;
  std::uint64_t seed = kDefaultSeed;
  bool seed_given = false;
  std::string out;
  std::vector<std::string> overrides;
};

void add_common(CLI::App* cmd, Common& c, bool needs_out) {
  cmd->add_option("--config", c.config, "flat key=value configuration file");
  cmd->add_option("--seed", c.seed, "random seed (default 20190220)");
  auto* out = cmd->add_option("--out", c.out, "output directory");
  if (needs_out) out->required();
  cmd->add_option("--set", c.overrides, "override a configuration key (key=value), repeatable");
}

int run_synth(const Common& c, const std::string& trajectory_seed) {
  synth::DatasetOptions opt;
  opt.seed = c.seed;
  opt.trajectory_seed = c.seed;
  opt.sfm.seed = c.seed;
  if (!c.config.empty()) synth::apply_settings_text(opt, text::read_file(c.config), c.config);
  if (!trajectory_seed.empty()) synth::apply_setting(opt, "trajectory_seed", trajectory_seed);
  for (const auto& kv : c.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ValidationError("--set: expected key=value, got '" + kv + "'");
    synth::apply_setting(opt, kv.substr(0, eq), kv.substr(eq + 1));
  }
  synth::write_dataset(c.out, opt);
  std::printf("wrote %d frames to %s\n", opt.scene.frames, c.out.c_str());
  return 0;
}

int run_gen_data(const Common& c, const std::string& input) {
  PreprocessOptions opt;
  auto apply = [&](const std::string& key, const std::string& value, const std::string& ctx) {
    if (key == "filter") opt.filter = text::parse_int(value, ctx) != 0;
    else if (key == "neighbor_count") opt.neighbor_count = static_cast<int>(text::parse_int(value, ctx));
    else if (key == "std_multiplier") opt.std_multiplier = text::parse_real(value, ctx);
    else if (key == "smoothing_window") opt.smoothing_window = static_cast<int>(text::parse_int(value, ctx));
    else if (key == "sigma") opt.sigma = text::parse_real(value, ctx);
    else throw ValidationError(ctx + ": unknown key '" + key + "'");
  };
  auto apply_line = [&](const std::string& kv, const std::string& ctx) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ValidationError(ctx + ": expected key=value");
    apply(std::string(text::trim(kv.substr(0, eq))), std::string(text::trim(kv.substr(eq + 1))), ctx);
  };
  if (!c.config.empty()) {
    for (const auto& line : text::data_lines(text::read_file(c.config))) {
      std::string joined;
      for (const auto& t : line.tokens) joined += t;
      apply_line(joined, c.config + ":" + std::to_string(line.number));
    }
  }
  for (const auto& kv : c.overrides) apply_line(kv, "--set");
  const auto m = build_dataset(input, c.out, opt);
  std::printf("wrote %zu frames to %s (sigma %s)\n", m.frames.size(), c.out.c_str(),
              text::format_real(m.sigma).c_str());
  return 0;
}

RunConfig load_run_config(const Common& c) {
  RunConfig rc;
  if (!c.config.empty()) apply_config_text(rc, text::read_file(c.config), c.config);
  if (c.seed_given) rc.train.seed = c.seed;
  for (const auto& kv : c.overrides) apply_override(rc, kv);
  return rc;
}

// True when the config file or a --set names `key`.
bool sets_key(const Common& c, const std::string& key) {
  auto names = [&](std::string_view line) {
    const auto eq = line.find('=');
    return eq != std::string_view::npos && text::trim(line.substr(0, eq)) == key;
  };
  for (const auto& kv : c.overrides) {
    if (names(kv)) return true;
  }
  if (!c.config.empty()) {
    const std::string content = text::read_file(c.config);
    for (const auto& line : text::data_lines(content)) {
      std::string joined;
      for (const auto& t : line.tokens) joined += t;
      if (names(joined)) return true;
    }
  }
  return false;
}

int run_train(const Common& c, const std::string& data_dir, const std::string& validation, const std::string& resume,
              bool serial) {
  RunConfig rc = load_run_config(c);
  if (serial) rc.train.serial = true;
  const Dataset data = load_dataset(data_dir);
  // The network input follows the dataset unless configured explicitly.
  if (!sets_key(c, "height")) rc.model.height = data.manifest.height;
  if (!sets_key(c, "width")) rc.model.width = data.manifest.width;
  TrainOptions opt;
  opt.out_dir = c.out;
  if (!validation.empty()) opt.validation_dir = validation;
  if (!resume.empty()) opt.resume_from = resume;
  opt.on_epoch = [](const EpochSummary& s) {
    std::printf("epoch %3d  sfl %.6f  dcl %.6f  total %.6f  skipped %d", s.epoch, s.sfl, s.dcl, s.total, s.skipped);
    if (s.validation_total) std::printf("  val %.6f", *s.validation_total);
    if (s.validation_dense) std::printf("  val_abs_rel %.4f", s.validation_dense->abs_rel);
    std::printf("  (%.1fs)\n", s.seconds);
    std::fflush(stdout);
  };
  const auto result = train(data, rc, opt);
  std::printf("last checkpoint: %s\n", result.last_checkpoint.string().c_str());
  if (!result.best_checkpoint.empty()) std::printf("best checkpoint: %s\n", result.best_checkpoint.string().c_str());
  return 0;
}

int run_predict(const Common& c, const std::string& checkpoint, const std::string& data_dir) {
  auto net = load_model(checkpoint);
  const Dataset data = load_dataset(data_dir);
  fs::create_directories(fs::path(c.out) / "depth");
  fs::create_directories(fs::path(c.out) / "color");
  for (std::size_t i = 0; i < data.frame_ids.size(); ++i) {
    const DepthMap d = net->predict(data.images[i]);
    const std::string name = std::to_string(data.frame_ids[i]);
    RealGrid values = d.values;
    for (std::size_t p = 0; p < values.size(); ++p) {
      if (!d.valid[p]) values[p] = 0.0;
    }
    write_array(fs::path(c.out) / "depth" / (name + ".eda"), values);
    write_png_rgb8(fs::path(c.out) / "color" / (name + ".png"), d.values.rows(), d.values.cols(), colorize_depth(d));
  }
  std::printf("wrote %zu predictions to %s\n", data.frame_ids.size(), c.out.c_str());
  return 0;
}

nlohmann::ordered_json metrics_record(const std::string& scope, const std::string& kind, const EvalMetrics& m) {
  nlohmann::ordered_json j;
  j["scope"] = scope;
  j["reference"] = kind;
  j["abs_rel"] = m.abs_rel;
  j["thresh_1_25"] = m.thresh_1_25;
  j["thresh_1_25_sq"] = m.thresh_1_25_sq;
  j["thresh_1_25_cu"] = m.thresh_1_25_cu;
  j["n_valid"] = m.n_valid;
  return j;
}

int run_eval(const Common& c, const std::string& checkpoint, const std::string& data_dir) {
  RunConfig rc = load_run_config(c);
  auto net = load_model(checkpoint);
  const Dataset data = load_dataset(data_dir);
  std::vector<nlohmann::ordered_json> records;
  std::printf("%-8s %12s %10s %10s %10s %10s\n", "ref", "abs_rel", "d<1.25", "d<1.25^2", "d<1.25^3", "n_valid");
  auto row = [](const char* name, const EvalMetrics& m) {
    std::printf("%-8s %12.6f %10.6f %10.6f %10.6f %10zu\n", name, m.abs_rel, m.thresh_1_25, m.thresh_1_25_sq,
                m.thresh_1_25_cu, m.n_valid);
  };
  const auto sparse = evaluate_sparse_dataset(*net, data, rc.train.epsilon);
  row("sparse", sparse);
  records.push_back(metrics_record("dataset", "sparse", sparse));
  const bool has_gt = std::any_of(data.depth_gt.begin(), data.depth_gt.end(), [](const auto& g) { return g.has_value(); });
  if (has_gt) {
    const auto dense = evaluate_dense_dataset(*net, data);
    row("dense", dense);
    records.push_back(metrics_record("dataset", "dense", dense));
  }
  if (!c.out.empty()) {
    fs::create_directories(c.out);
    std::string body;
    for (const auto& r : records) body += r.dump() + "\n";
    text::write_file(fs::path(c.out) / "eval.jsonl", body);
  }
  return 0;
}

int run_gradcheck(const Common& c, int instances) {
  GradCheckOptions opt;
  opt.seed = c.seed;
  opt.instances = instances;
  const auto results = run_gradient_suite(opt);
  bool ok = true;
  for (const auto& r : results) {
    std::printf("%-28s %s  instances %3d  checked %6zu  skipped %4zu  max_rel %.3e  (%.2fs)\n", r.name.c_str(),
                r.passed ? "PASS" : "FAIL", r.instances, r.checked, r.skipped, r.max_rel_error, r.seconds);
    ok = ok && r.passed;
  }
  return ok ? 0 : 3;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Depth estimation from sparse structure-from-motion supervision"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "expanded help for every subcommand");

  Common c;
  std::string trajectory_seed, input, data_dir, validation, resume, checkpoint;
  bool serial = false;
  int instances = 50;

  auto* synth_cmd = app.add_subcommand("synth", "render a synthetic sequence with simulated SfM output");
  add_common(synth_cmd, c, true);
  synth_cmd->add_option("--trajectory-seed", trajectory_seed, "camera path seed (defaults to --seed)");

  auto* gen_cmd = app.add_subcommand("gen-data", "build sparse supervision and a manifest from an SfM directory");
  add_common(gen_cmd, c, true);
  gen_cmd->add_option("--input", input, "directory with intrinsics/poses/points/visibility and frames/")->required();

  auto* train_cmd = app.add_subcommand("train", "train the depth network");
  add_common(train_cmd, c, true);
  train_cmd->add_option("--data", data_dir, "dataset produced by gen-data")->required();
  train_cmd->add_option("--validation", validation, "held-out dataset for model selection");
  train_cmd->add_option("--resume", resume, "checkpoint to resume from");
  train_cmd->add_flag("--serial", serial, "prepare batches on the training thread");

  auto* predict_cmd = app.add_subcommand("predict", "write depth arrays and colorized depth images");
  add_common(predict_cmd, c, true);
  predict_cmd->add_option("--checkpoint", checkpoint, "model checkpoint")->required();
  predict_cmd->add_option("--data", data_dir, "dataset produced by gen-data")->required();

  auto* eval_cmd = app.add_subcommand("eval", "report depth metrics");
  add_common(eval_cmd, c, false);
  eval_cmd->add_option("--checkpoint", checkpoint, "model checkpoint")->required();
  eval_cmd->add_option("--data", data_dir, "dataset produced by gen-data")->required();

  auto* grad_cmd = app.add_subcommand("gradcheck", "finite-difference checks of layers and losses");
  add_common(grad_cmd, c, false);
  grad_cmd->add_option("--instances", instances, "random instances per case");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    std::cerr << app.help();
    return 1;
  }

  for (auto* cmd : app.get_subcommands()) {
    if (cmd->count("--seed") > 0) c.seed_given = true;
  }

  try {
    if (synth_cmd->parsed()) return run_synth(c, trajectory_seed);
    if (gen_cmd->parsed()) return run_gen_data(c, input);
    if (train_cmd->parsed()) return run_train(c, data_dir, validation, resume, serial);
    if (predict_cmd->parsed()) return run_predict(c, checkpoint, data_dir);
    if (eval_cmd->parsed()) return run_eval(c, checkpoint, data_dir);
    if (grad_cmd->parsed()) return run_gradcheck(c, instances);
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return 3;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
