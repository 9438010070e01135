#include "endodepth/train_eval.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <future>
#include <random>
#include <sstream>

#include <nlohmann/json.hpp>

#include "endodepth/image_io.hpp"
#include "endodepth/text.hpp"

namespace endodepth {

namespace fs = std::filesystem;

namespace {

std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
  std::uint64_t x = a ^ (b + 0x9e3779b97f4a7c15ull + (a << 6) + (a >> 2));
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

}  // namespace

// ---------------------------------------------------------------------------

std::vector<std::pair<int, int>> sample_pairs(const std::vector<int>& frame_ids, GapRange gap, std::size_t count,
                                              std::uint64_t seed) {
  if (gap.min < 1 || gap.max < gap.min) throw InputError("sample_pairs: invalid gap range");
  const int n = static_cast<int>(frame_ids.size());
  const int max_gap = std::min(gap.max, n - 1);
  if (max_gap < gap.min) {
    throw InputError("sample_pairs: no admissible pair for " + std::to_string(n) + " frames with gap in [" +
                     std::to_string(gap.min) + ", " + std::to_string(gap.max) + "]");
  }
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> pick_gap(gap.min, max_gap);
  std::uniform_int_distribution<int> pick_dir(0, 1);
  std::vector<std::pair<int, int>> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    const int g = pick_gap(rng);
    const int first = std::uniform_int_distribution<int>(0, n - 1 - g)(rng);
    const bool forward = pick_dir(rng) == 1;
    const int a = forward ? first : first + g;
    const int b = forward ? first + g : first;
    out.emplace_back(frame_ids[a], frame_ids[b]);
  }
  return out;
}

// ---------------------------------------------------------------------------

void TrainConfig::validate() const {
  if (gap.min < 1 || gap.max < gap.min) throw ValidationError("train: require 1 <= gap_min <= gap_max");
  if (batch_size < 1) throw ValidationError("train: batch_size must be >= 1");
  if (epochs < 1) throw ValidationError("train: epochs must be >= 1");
  if (!(lr_min > 0.0) || !(lr_min < lr_max)) throw ValidationError("train: require 0 < lr_min < lr_max");
  if (lr_cycle_epochs < 1) throw ValidationError("train: lr_cycle_epochs must be >= 1");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ValidationError("train: momentum must be in [0, 1)");
  if (!(epsilon > 0.0)) throw ValidationError("train: epsilon must be positive");
  if (!(augment.probability >= 0.0 && augment.probability <= 1.0)) {
    throw ValidationError("train: aug_probability must be in [0, 1]");
  }
  if (checkpoint_every < 1) throw ValidationError("train: checkpoint_every must be >= 1");
  weights.validate();
}

namespace {

using Setter = std::function<void(RunConfig&, const std::string&, const std::string&)>;

bool parse_bool(const std::string& v, const std::string& ctx) {
  if (v == "1" || v == "true" || v == "on" || v == "yes") return true;
  if (v == "0" || v == "false" || v == "off" || v == "no") return false;
  throw ValidationError(ctx + ": expected a boolean, got '" + v + "'");
}

int parse_i(const std::string& v, const std::string& ctx) { return static_cast<int>(text::parse_int(v, ctx)); }

template <typename M>
Setter int_field(M member) {
  return [member](RunConfig& c, const std::string& v, const std::string& ctx) { member(c) = parse_i(v, ctx); };
}
template <typename M>
Setter real_field(M member) {
  return [member](RunConfig& c, const std::string& v, const std::string& ctx) {
    member(c) = text::parse_real(v, ctx);
  };
}
template <typename M>
Setter bool_field(M member) {
  return [member](RunConfig& c, const std::string& v, const std::string& ctx) { member(c) = parse_bool(v, ctx); };
}

const std::map<std::string, Setter>& setters() {
  static const std::map<std::string, Setter> table = {
      {"height", int_field([](RunConfig& c) -> int& { return c.model.height; })},
      {"width", int_field([](RunConfig& c) -> int& { return c.model.width; })},
      {"levels", int_field([](RunConfig& c) -> int& { return c.model.levels; })},
      {"base_channels", int_field([](RunConfig& c) -> int& { return c.model.base_channels; })},
      {"max_channels", int_field([](RunConfig& c) -> int& { return c.model.max_channels; })},
      {"groups", int_field([](RunConfig& c) -> int& { return c.model.groups; })},
      {"dense_blocks", bool_field([](RunConfig& c) -> bool& { return c.model.dense_blocks; })},
      {"border", int_field([](RunConfig& c) -> int& { return c.model.border; })},
      {"model_seed",
       [](RunConfig& c, const std::string& v, const std::string& ctx) {
         c.model.seed = static_cast<std::uint64_t>(text::parse_int(v, ctx));
       }},
      {"gap_min", int_field([](RunConfig& c) -> int& { return c.train.gap.min; })},
      {"gap_max", int_field([](RunConfig& c) -> int& { return c.train.gap.max; })},
      {"batch_size", int_field([](RunConfig& c) -> int& { return c.train.batch_size; })},
      {"epochs", int_field([](RunConfig& c) -> int& { return c.train.epochs; })},
      {"momentum", real_field([](RunConfig& c) -> double& { return c.train.momentum; })},
      {"lr_min", real_field([](RunConfig& c) -> double& { return c.train.lr_min; })},
      {"lr_max", real_field([](RunConfig& c) -> double& { return c.train.lr_max; })},
      {"lr_cycle_epochs", int_field([](RunConfig& c) -> int& { return c.train.lr_cycle_epochs; })},
      {"lambda1", real_field([](RunConfig& c) -> double& { return c.train.weights.lambda1; })},
      {"lambda2_phase1", real_field([](RunConfig& c) -> double& { return c.train.weights.lambda2_phase1; })},
      {"lambda2", real_field([](RunConfig& c) -> double& { return c.train.weights.lambda2; })},
      {"phase1_epochs", int_field([](RunConfig& c) -> int& { return c.train.weights.phase1_epochs; })},
      {"sigma", real_field([](RunConfig& c) -> double& { return c.train.sigma; })},
      {"epsilon", real_field([](RunConfig& c) -> double& { return c.train.epsilon; })},
      {"seed",
       [](RunConfig& c, const std::string& v, const std::string& ctx) {
         c.train.seed = static_cast<std::uint64_t>(text::parse_int(v, ctx));
       }},
      {"augment", bool_field([](RunConfig& c) -> bool& { return c.train.augment_enabled; })},
      {"aug_brightness", bool_field([](RunConfig& c) -> bool& { return c.train.augment.brightness; })},
      {"aug_contrast", bool_field([](RunConfig& c) -> bool& { return c.train.augment.contrast; })},
      {"aug_gamma", bool_field([](RunConfig& c) -> bool& { return c.train.augment.gamma; })},
      {"aug_hsv", bool_field([](RunConfig& c) -> bool& { return c.train.augment.hsv; })},
      {"aug_gaussian_blur", bool_field([](RunConfig& c) -> bool& { return c.train.augment.gaussian_blur; })},
      {"aug_motion_blur", bool_field([](RunConfig& c) -> bool& { return c.train.augment.motion_blur; })},
      {"aug_jpeg", bool_field([](RunConfig& c) -> bool& { return c.train.augment.jpeg; })},
      {"aug_noise", bool_field([](RunConfig& c) -> bool& { return c.train.augment.noise; })},
      {"aug_probability", real_field([](RunConfig& c) -> double& { return c.train.augment.probability; })},
      {"serial", bool_field([](RunConfig& c) -> bool& { return c.train.serial; })},
      {"sfl_in_view", bool_field([](RunConfig& c) -> bool& { return c.train.sfl_in_view; })},
      {"checkpoint_every", int_field([](RunConfig& c) -> int& { return c.train.checkpoint_every; })},
  };
  return table;
}

void set_key(RunConfig& config, const std::string& key, const std::string& value, const std::string& ctx) {
  const auto& table = setters();
  const auto it = table.find(key);
  if (it == table.end()) throw ValidationError(ctx + ": unknown key '" + key + "'");
  it->second(config, value, ctx + ": " + key);
}

}  // namespace

void apply_config_text(RunConfig& config, const std::string& body, const std::string& origin) {
  std::istringstream is(body);
  std::string line;
  int number = 0;
  while (std::getline(is, line)) {
    ++number;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    const std::string t(text::trim(line));
    if (t.empty()) continue;
    const auto eq = t.find('=');
    const std::string ctx = origin + ":" + std::to_string(number);
    if (eq == std::string::npos) throw ValidationError(ctx + ": expected key=value");
    set_key(config, std::string(text::trim(t.substr(0, eq))), std::string(text::trim(t.substr(eq + 1))), ctx);
  }
}

void apply_override(RunConfig& config, const std::string& kv) {
  const auto eq = kv.find('=');
  if (eq == std::string::npos) throw ValidationError("--set: expected key=value, got '" + kv + "'");
  set_key(config, std::string(text::trim(kv.substr(0, eq))), std::string(text::trim(kv.substr(eq + 1))), "--set");
}

std::string to_text(const RunConfig& c) {
  const auto& t = c.train;
  const auto& a = t.augment;
  std::ostringstream os;
  os << to_text(c.model);
  auto real = [](double v) { return text::format_real(v); };
  os << "gap_min=" << t.gap.min << "\ngap_max=" << t.gap.max << "\nbatch_size=" << t.batch_size
     << "\nepochs=" << t.epochs << "\nmomentum=" << real(t.momentum) << "\nlr_min=" << real(t.lr_min)
     << "\nlr_max=" << real(t.lr_max) << "\nlr_cycle_epochs=" << t.lr_cycle_epochs
     << "\nlambda1=" << real(t.weights.lambda1) << "\nlambda2_phase1=" << real(t.weights.lambda2_phase1)
     << "\nlambda2=" << real(t.weights.lambda2) << "\nphase1_epochs=" << t.weights.phase1_epochs
     << "\nsigma=" << real(t.sigma) << "\nepsilon=" << real(t.epsilon)
     << "\nsfl_in_view=" << t.sfl_in_view << "\nseed=" << t.seed
     << "\naugment=" << t.augment_enabled << "\naug_brightness=" << a.brightness << "\naug_contrast=" << a.contrast
     << "\naug_gamma=" << a.gamma << "\naug_hsv=" << a.hsv << "\naug_gaussian_blur=" << a.gaussian_blur
     << "\naug_motion_blur=" << a.motion_blur << "\naug_jpeg=" << a.jpeg << "\naug_noise=" << a.noise
     << "\naug_probability=" << real(a.probability) << "\nserial=" << t.serial
     << "\ncheckpoint_every=" << t.checkpoint_every << "\n";
  return os.str();
}

double cyclical_lr(const TrainConfig& config, double epoch_position) {
  const double cycle = config.lr_cycle_epochs;
  const double p = std::fmod(std::max(epoch_position, 0.0), cycle) / cycle;
  const double tri = 1.0 - std::abs(2.0 * p - 1.0);
  return config.lr_min + (config.lr_max - config.lr_min) * tri;
}

// ---------------------------------------------------------------------------

std::size_t Dataset::index_of(int frame_id) const {
  const auto it = std::lower_bound(frame_ids.begin(), frame_ids.end(), frame_id);
  if (it == frame_ids.end() || *it != frame_id) throw InputError("dataset: unknown frame " + std::to_string(frame_id));
  return static_cast<std::size_t>(it - frame_ids.begin());
}

DepthMap read_depth_gt(const fs::path& path) {
  RealGrid v = read_array(path);
  MaskGrid m(v.rows(), v.cols(), 1, 0);
  for (std::size_t i = 0; i < v.size(); ++i) m[i] = std::isfinite(v[i]) && v[i] > 0.0 ? 1 : 0;
  return DepthMap(std::move(v), std::move(m));
}

Dataset load_dataset(const fs::path& dir) {
  Dataset d;
  d.root = dir;
  d.manifest = load_manifest(dir);
  d.recon = parse_reconstruction(dir / d.manifest.reconstruction);
  for (const auto& f : d.manifest.frames) {
    if (!d.recon.frame_index(f.id)) throw ValidationError("manifest frame " + std::to_string(f.id) + " not in reconstruction");
    if (!d.frame_ids.empty() && f.id <= d.frame_ids.back()) throw ValidationError("manifest frames not sorted");
    d.frame_ids.push_back(f.id);
    d.images.push_back(read_png(dir / f.image));
    FrameSupervision sup;
    sup.depth.values = read_array(dir / f.depth);
    sup.depth.frame_id = f.id;
    sup.mask.values = read_array(dir / f.mask);
    sup.mask.frame_id = f.id;
    d.supervision.push_back(std::move(sup));
    if (!f.depth_gt.empty()) {
      d.depth_gt.emplace_back(read_depth_gt(dir / f.depth_gt));
    } else {
      d.depth_gt.emplace_back(std::nullopt);
    }
  }
  if (d.frame_ids.size() < 2) throw ValidationError("dataset needs at least two frames");
  return d;
}

// ---------------------------------------------------------------------------

EvalMetrics compute_metrics(const std::vector<double>& estimate, const std::vector<double>& reference) {
  if (estimate.size() != reference.size()) throw InputError("compute_metrics: size mismatch");
  if (estimate.empty()) throw InputError("metrics: no valid positions");
  EvalMetrics m;
  std::size_t t1 = 0, t2 = 0, t3 = 0;
  double rel = 0.0;
  for (std::size_t i = 0; i < estimate.size(); ++i) {
    const double y = estimate[i], ys = reference[i];
    rel += std::abs(y - ys) / ys;
    const double ratio = std::max(y / ys, ys / y);
    t1 += ratio < 1.25;
    t2 += ratio < 1.25 * 1.25;
    t3 += ratio < 1.25 * 1.25 * 1.25;
  }
  const double n = static_cast<double>(estimate.size());
  m.abs_rel = rel / n;
  m.thresh_1_25 = t1 / n;
  m.thresh_1_25_sq = t2 / n;
  m.thresh_1_25_cu = t3 / n;
  m.n_valid = estimate.size();
  return m;
}

EvalMetrics evaluate_sparse(const DepthMap& prediction, const RealGrid& sparse_depth, const RealGrid& mask,
                            double epsilon) {
  ScaledDepth scaled;
  try {
    scaled = scale_depth(clamp_depth(prediction, epsilon), sparse_depth, mask, epsilon);
  } catch (const EmptySupportError&) {
    throw InputError("evaluate_sparse: empty mask");
  }
  std::vector<double> est, ref;
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (mask[i] > 0.0 && sparse_depth[i] > 0.0 && scaled.depth.valid[i]) {
      est.push_back(scaled.depth.values[i]);
      ref.push_back(sparse_depth[i]);
    }
  }
  if (est.empty()) throw InputError("evaluate_sparse: empty mask");
  return compute_metrics(est, ref);
}

EvalMetrics evaluate_dense(const DepthMap& prediction, const DepthMap& depth_gt) {
  require_same_shape(prediction.values, depth_gt.values, "evaluate_dense");
  std::vector<double> est, ref, ratios;
  for (std::size_t i = 0; i < prediction.values.size(); ++i) {
    if (!prediction.valid[i] || !depth_gt.valid[i]) continue;
    const double g = depth_gt.values[i];
    if (!(g > 0.0)) throw InputError("evaluate_dense: non-positive ground truth at a valid pixel");
    const double p = std::max(prediction.values[i], kDepthFloor);
    est.push_back(p);
    ref.push_back(g);
    ratios.push_back(g / p);
  }
  if (est.empty()) throw InputError("evaluate_dense: no valid pixels");
  const std::size_t mid = ratios.size() / 2;
  std::nth_element(ratios.begin(), ratios.begin() + mid, ratios.end());
  double s = ratios[mid];
  if (ratios.size() % 2 == 0) {
    const double lower = *std::max_element(ratios.begin(), ratios.begin() + mid);
    s = 0.5 * (s + lower);
  }
  for (double& v : est) v *= s;
  return compute_metrics(est, ref);
}

EvalMetrics average(const std::vector<EvalMetrics>& per_frame) {
  if (per_frame.empty()) throw InputError("average: no frames");
  EvalMetrics m;
  for (const auto& f : per_frame) {
    m.abs_rel += f.abs_rel;
    m.thresh_1_25 += f.thresh_1_25;
    m.thresh_1_25_sq += f.thresh_1_25_sq;
    m.thresh_1_25_cu += f.thresh_1_25_cu;
    m.n_valid += f.n_valid;
  }
  const double n = static_cast<double>(per_frame.size());
  m.abs_rel /= n;
  m.thresh_1_25 /= n;
  m.thresh_1_25_sq /= n;
  m.thresh_1_25_cu /= n;
  return m;
}

// ---------------------------------------------------------------------------

namespace {

constexpr std::size_t kInferenceChunk = 8;

std::vector<DepthMap> predict_frames(DepthNet& net, const Dataset& data, const std::vector<std::size_t>& indices) {
  std::vector<DepthMap> out;
  for (std::size_t start = 0; start < indices.size(); start += kInferenceChunk) {
    std::vector<Image> chunk;
    for (std::size_t i = start; i < std::min(indices.size(), start + kInferenceChunk); ++i) {
      chunk.push_back(data.images[indices[i]]);
    }
    for (auto& d : net.predict(chunk)) out.push_back(std::move(d));
  }
  return out;
}

std::vector<FrameSupervision> resolve_supervision(const Dataset& data, double sigma) {
  if (!(sigma > 0.0) || sigma == data.manifest.sigma) return data.supervision;
  std::vector<FrameSupervision> out;
  for (int id : data.frame_ids) out.push_back(rasterize_frame(data.recon, id, sigma));
  return out;
}

struct PreparedBatch {
  std::vector<std::pair<int, int>> pairs;
  std::vector<Image> images;  // j images then k images
};

PreparedBatch prepare_batch(const Dataset& data, const TrainConfig& cfg, const std::vector<std::pair<int, int>>& all,
                            std::size_t begin, std::size_t end, std::uint64_t batch_seed) {
  PreparedBatch b;
  b.pairs.assign(all.begin() + static_cast<std::ptrdiff_t>(begin), all.begin() + static_cast<std::ptrdiff_t>(end));
  const std::size_t n = b.pairs.size();
  b.images.resize(2 * n);
  for (std::size_t i = 0; i < n; ++i) {
    for (int side = 0; side < 2; ++side) {
      const int id = side == 0 ? b.pairs[i].first : b.pairs[i].second;
      const Image& src = data.images[data.index_of(id)];
      b.images[side * n + i] =
          cfg.augment_enabled ? augment(src, mix(batch_seed, 2 * i + side), cfg.augment) : src;
    }
  }
  return b;
}

void write_json_line(std::ofstream& os, const nlohmann::ordered_json& j) {
  os << j.dump() << '\n';
  os.flush();
}

nlohmann::ordered_json metrics_json(const EvalMetrics& m) {
  nlohmann::ordered_json j;
  j["abs_rel"] = m.abs_rel;
  j["thresh_1_25"] = m.thresh_1_25;
  j["thresh_1_25_sq"] = m.thresh_1_25_sq;
  j["thresh_1_25_cu"] = m.thresh_1_25_cu;
  j["n_valid"] = m.n_valid;
  return j;
}

void dump_batch(const fs::path& dir, int epoch, std::int64_t step, const PreparedBatch& batch,
                const std::vector<PairEvaluation>& evals, const std::vector<DepthMap>& preds) {
  fs::create_directories(dir);
  nlohmann::ordered_json j;
  j["epoch"] = epoch;
  j["step"] = step;
  auto& arr = j["pairs"] = nlohmann::ordered_json::array();
  for (std::size_t i = 0; i < batch.pairs.size(); ++i) {
    nlohmann::ordered_json p;
    p["j"] = batch.pairs[i].first;
    p["k"] = batch.pairs[i].second;
    p["skipped"] = evals[i].skipped;
    p["sfl"] = std::isfinite(evals[i].sfl) ? nlohmann::ordered_json(evals[i].sfl) : nlohmann::ordered_json("nan");
    p["dcl"] = std::isfinite(evals[i].dcl) ? nlohmann::ordered_json(evals[i].dcl) : nlohmann::ordered_json("nan");
    p["scale_j"] = evals[i].scaled_j.scale;
    p["scale_k"] = evals[i].scaled_k.scale;
    arr.push_back(p);
  }
  text::write_file(dir / "batch.json", j.dump(2) + "\n");
  for (std::size_t i = 0; i < preds.size(); ++i) {
    write_array(dir / ("prediction_" + std::to_string(i) + ".eda"), preds[i].values);
  }
}

}  // namespace

double validation_loss(DepthNet& net, const Dataset& data, const RunConfig& config) {
  const auto& cfg = config.train;
  const auto sup = resolve_supervision(data, cfg.sigma);
  const auto pairs = sample_pairs(data.frame_ids, cfg.gap, data.frame_ids.size(), mix(cfg.seed, 0x76616c));
  std::vector<std::size_t> all(data.frame_ids.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  const auto preds = predict_frames(net, data, all);
  double sum = 0.0;
  int used = 0;
  for (const auto& [j, k] : pairs) {
    const std::size_t ij = data.index_of(j), ik = data.index_of(k);
    const auto pair = make_pair_supervision(data.recon, j, k, sup[ij], sup[ik], cfg.sfl_in_view);
    const auto ev = evaluate_pair(preds[ij], preds[ik], pair, cfg.weights.lambda1, cfg.weights.lambda2, false,
                                  cfg.epsilon);
    if (ev.skipped) continue;
    sum += ev.total;
    ++used;
  }
  if (used == 0) throw NumericalError("validation: every pair was skipped");
  return sum / used;
}

EvalMetrics evaluate_dense_dataset(DepthNet& net, const Dataset& data) {
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < data.depth_gt.size(); ++i) {
    if (data.depth_gt[i]) idx.push_back(i);
  }
  if (idx.empty()) throw InputError("evaluate: dataset has no ground-truth depth");
  const auto preds = predict_frames(net, data, idx);
  std::vector<EvalMetrics> per;
  for (std::size_t i = 0; i < idx.size(); ++i) per.push_back(evaluate_dense(preds[i], *data.depth_gt[idx[i]]));
  return average(per);
}

EvalMetrics evaluate_sparse_dataset(DepthNet& net, const Dataset& data, double epsilon) {
  std::vector<std::size_t> idx(data.frame_ids.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  const auto preds = predict_frames(net, data, idx);
  std::vector<EvalMetrics> per;
  for (std::size_t i = 0; i < idx.size(); ++i) {
    try {
      per.push_back(evaluate_sparse(preds[i], data.supervision[i].depth.values, data.supervision[i].mask.values,
                                    epsilon));
    } catch (const InputError&) {
      // frame without supervision
    }
  }
  return average(per);
}

std::unique_ptr<DepthNet> load_model(const fs::path& checkpoint) {
  const Checkpoint ck = read_checkpoint(checkpoint);
  auto net = build_model(ck.model);
  restore_state(ck, *net, nullptr);
  return net;
}

TrainResult train(const Dataset& data, const RunConfig& config, const TrainOptions& options) {
  const auto& cfg = config.train;
  cfg.validate();
  config.model.validate();
  if (config.model.height != data.manifest.height || config.model.width != data.manifest.width) {
    throw ValidationError("train: model input " + std::to_string(config.model.height) + "x" +
                          std::to_string(config.model.width) + " does not match dataset " +
                          std::to_string(data.manifest.height) + "x" + std::to_string(data.manifest.width));
  }
  sample_pairs(data.frame_ids, cfg.gap, 1, 0);  // fails early without admissible pairs

  std::optional<Dataset> validation;
  if (options.validation_dir) validation = load_dataset(*options.validation_dir);

  const auto sup = resolve_supervision(data, cfg.sigma);
  auto net = build_model(config.model);
  net->set_input_stats({data.manifest.image_mean[0], data.manifest.image_mean[1], data.manifest.image_mean[2]},
                       {data.manifest.image_std[0], data.manifest.image_std[1], data.manifest.image_std[2]});
  nn::SgdMomentum opt(net->parameters(), static_cast<float>(cfg.momentum));

  fs::create_directories(options.out_dir / "checkpoints");
  const std::string config_text = to_text(config);
  text::write_file(options.out_dir / "config.txt", config_text);

  int start_epoch = 1;
  std::int64_t step = 0;
  double best = std::numeric_limits<double>::infinity();
  if (options.resume_from) {
    const Checkpoint ck = read_checkpoint(*options.resume_from);
    if (to_text(ck.model) != to_text(config.model)) throw ValidationError("resume: model configuration differs");
    restore_state(ck, *net, &opt);
    start_epoch = static_cast<int>(ck.epoch) + 1;
    step = ck.step;
    best = ck.best_validation;
  }

  std::ofstream log(options.out_dir / "metrics.jsonl", options.resume_from ? std::ios::app : std::ios::trunc);
  if (!log) throw WriteError("cannot open metrics log in " + options.out_dir.string());

  TrainResult result;
  const std::size_t pairs_per_epoch = data.frame_ids.size();
  const std::size_t steps_per_epoch = (pairs_per_epoch + cfg.batch_size - 1) / cfg.batch_size;
  const int H = config.model.height, W = config.model.width;
  const int last_epoch = options.stop_after_epoch > 0 ? std::min(cfg.epochs, options.stop_after_epoch) : cfg.epochs;

  for (int epoch = start_epoch; epoch <= last_epoch; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    const std::uint64_t epoch_seed = mix(cfg.seed, static_cast<std::uint64_t>(epoch));
    const auto pairs = sample_pairs(data.frame_ids, cfg.gap, pairs_per_epoch, epoch_seed);
    const double lambda2 = cfg.weights.lambda2_at(epoch);
    EpochSummary summary;
    summary.epoch = epoch;
    int counted = 0;

    auto launch = [&](std::size_t s) {
      const std::size_t b = s * cfg.batch_size;
      const std::size_t e = std::min(pairs.size(), b + cfg.batch_size);
      const std::uint64_t seed = mix(epoch_seed, 0x1000 + s);
      if (cfg.serial) {
        std::promise<PreparedBatch> p;
        p.set_value(prepare_batch(data, cfg, pairs, b, e, seed));
        return p.get_future();
      }
      return std::async(std::launch::async, [&data, &cfg, &pairs, b, e, seed] {
        return prepare_batch(data, cfg, pairs, b, e, seed);
      });
    };

    std::future<PreparedBatch> next = launch(0);
    for (std::size_t s = 0; s < steps_per_epoch; ++s) {
      PreparedBatch batch = next.get();
      if (s + 1 < steps_per_epoch) next = launch(s + 1);

      const int n = static_cast<int>(batch.pairs.size());
      std::vector<const Image*> ptrs;
      for (const auto& im : batch.images) ptrs.push_back(&im);
      const nn::Tensor input = net->pack(ptrs);
      const nn::Tensor output = net->forward(input);

      std::vector<DepthMap> preds;
      for (int i = 0; i < 2 * n; ++i) preds.push_back(net->to_depth(output, i));
      std::vector<PairEvaluation> evals;
      StepRecord rec;
      rec.epoch = epoch;
      rec.pairs = n;
      for (int i = 0; i < n; ++i) {
        const auto [j, k] = batch.pairs[i];
        const auto pair = make_pair_supervision(data.recon, j, k, sup[data.index_of(j)], sup[data.index_of(k)],
                                                cfg.sfl_in_view);
        evals.push_back(evaluate_pair(preds[i], preds[n + i], pair, cfg.weights.lambda1, lambda2, true, cfg.epsilon));
        const auto& ev = evals.back();
        if (ev.skipped) {
          ++rec.skipped;
          continue;
        }
        if (!std::isfinite(ev.total) || !std::isfinite(ev.sfl) || !std::isfinite(ev.dcl)) {
          const fs::path dump = options.out_dir / "nan_dump";
          dump_batch(dump, epoch, step, batch, evals, preds);
          throw NumericalError("non-finite loss at epoch " + std::to_string(epoch) + " step " +
                               std::to_string(step) + " (pair " + std::to_string(j) + "," + std::to_string(k) +
                               "); batch dumped to " + dump.string());
        }
      }
      const int used = n - rec.skipped;
      ++step;
      rec.step = step;
      rec.lr = cyclical_lr(cfg, (epoch - 1) + static_cast<double>(s) / steps_per_epoch);
      if (used > 0) {
        nn::Tensor grad(2 * n, 1, H, W);
        const double inv = 1.0 / used;
        for (int i = 0; i < n; ++i) {
          const auto& ev = evals[i];
          if (ev.skipped) continue;
          rec.sfl += ev.sfl * inv;
          rec.dcl += ev.dcl * inv;
          rec.total += ev.total * inv;
          float* gj = grad.channel(i, 0);
          float* gk = grad.channel(n + i, 0);
          for (std::size_t p = 0; p < ev.grad_j.size(); ++p) {
            gj[p] = static_cast<float>(ev.grad_j[p] * inv);
            gk[p] = static_cast<float>(ev.grad_k[p] * inv);
          }
        }
        opt.zero_grad();
        net->backward(grad);
        for (auto* p : net->parameters()) {
          for (float g : p->grad) {
            if (!std::isfinite(g)) {
              const fs::path dump = options.out_dir / "nan_dump";
              dump_batch(dump, epoch, step, batch, evals, preds);
              throw NumericalError("non-finite gradient in " + p->name + " at step " + std::to_string(step) +
                                   "; batch dumped to " + dump.string());
            }
          }
        }
        opt.step(static_cast<float>(rec.lr));
        summary.sfl += rec.sfl;
        summary.dcl += rec.dcl;
        summary.total += rec.total;
        ++counted;
      }
      summary.skipped += rec.skipped;

      nlohmann::ordered_json j;
      j["kind"] = "step";
      j["epoch"] = rec.epoch;
      j["step"] = rec.step;
      j["sfl"] = rec.sfl;
      j["dcl"] = rec.dcl;
      j["total"] = rec.total;
      j["lr"] = rec.lr;
      j["pairs"] = rec.pairs;
      j["skipped"] = rec.skipped;
      write_json_line(log, j);
      result.steps.push_back(rec);
    }
    if (counted > 0) {
      summary.sfl /= counted;
      summary.dcl /= counted;
      summary.total /= counted;
    }

    if (validation) {
      summary.validation_total = validation_loss(*net, *validation, config);
      bool has_gt = std::any_of(validation->depth_gt.begin(), validation->depth_gt.end(),
                                [](const auto& g) { return g.has_value(); });
      if (has_gt) summary.validation_dense = evaluate_dense_dataset(*net, *validation);
    }

    nlohmann::ordered_json j;
    j["kind"] = "epoch";
    j["epoch"] = epoch;
    j["step"] = step;
    j["sfl"] = summary.sfl;
    j["dcl"] = summary.dcl;
    j["total"] = summary.total;
    j["lr"] = cyclical_lr(cfg, epoch);
    j["skipped"] = summary.skipped;
    if (summary.validation_total) j["val_total"] = *summary.validation_total;
    if (summary.validation_dense) j["val_dense"] = metrics_json(*summary.validation_dense);
    write_json_line(log, j);

    Checkpoint ck;
    capture_state(*net, &opt, ck);
    ck.config_text = config_text;
    ck.epoch = epoch;
    ck.step = step;
    const bool improved = summary.validation_total && *summary.validation_total < best;
    if (improved) best = *summary.validation_total;
    ck.best_validation = best;
    ck.rng_state = "seed=" + std::to_string(cfg.seed) + " epoch=" + std::to_string(epoch);
    result.last_checkpoint = options.out_dir / "last.ckpt";
    write_checkpoint(result.last_checkpoint, ck);
    if (epoch % cfg.checkpoint_every == 0 || epoch == cfg.epochs) {
      char name[32];
      std::snprintf(name, sizeof(name), "epoch_%04d.ckpt", epoch);
      write_checkpoint(options.out_dir / "checkpoints" / name, ck);
    }
    if (improved) write_checkpoint(options.out_dir / "best.ckpt", ck);

    summary.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    result.epochs.push_back(summary);
    if (options.on_epoch) options.on_epoch(summary);
  }
  if (fs::exists(options.out_dir / "best.ckpt")) result.best_checkpoint = options.out_dir / "best.ckpt";
  return result;
}

}  // namespace endodepth
