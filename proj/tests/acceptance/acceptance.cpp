// Acceptance suite: one PASS/FAIL line per criterion, exit status 1 on any failure.
//
//   endodepth_acceptance [--work DIR] [--only 1,4,9] [--epochs N]

#include <chrono>
#include <cmath>
#include <cstdarg>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "endodepth/geom_layers.hpp"
#include "endodepth/gradcheck.hpp"
#include "endodepth/losses.hpp"
#include "endodepth/objective.hpp"
#include "endodepth/sparse_supervision.hpp"
#include "endodepth/synthetic.hpp"
#include "endodepth/train_eval.hpp"

using namespace endodepth;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, ...) __attribute__((format(printf, 1, 2)));
std::string fmt(const char* f, ...) {
  char buf[512];
  va_list ap;
  va_start(ap, f);
  std::vsnprintf(buf, sizeof(buf), f, ap);
  va_end(ap);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

Mat3 random_rotation(std::mt19937_64& rng, double max_angle) {
  std::normal_distribution<double> g(0.0, 1.0);
  std::uniform_real_distribution<double> u(-max_angle, max_angle);
  return Eigen::AngleAxisd(u(rng), Vec3(g(rng), g(rng), g(rng)).normalized()).toRotationMatrix();
}

RelativeTransform random_rel(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> t(-0.3, 0.3);
  RelativeTransform rel;
  rel.rotation = random_rotation(rng, 0.2);
  rel.translation = Vec3(t(rng), t(rng), t(rng));
  return rel;
}

CameraIntrinsics small_k() { return CameraIntrinsics{8.0, 8.5, 4.5, 3.5, 10, 8}; }

DepthMap random_depth(std::mt19937_64& rng, double lo, double hi) {
  std::uniform_real_distribution<double> u(lo, hi);
  DepthMap d(8, 10);
  for (double& v : d.values.storage()) v = u(rng);
  return d;
}

// (relative path -> bytes) for every regular file below `dir`.
std::map<std::string, std::string> snapshot(const fs::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    std::ifstream is(e.path(), std::ios::binary);
    std::ostringstream ss;
    ss << is.rdbuf();
    out[fs::relative(e.path(), dir).generic_string()] = ss.str();
  }
  return out;
}

std::string compare_snapshots(const fs::path& a, const fs::path& b) {
  const auto sa = snapshot(a), sb = snapshot(b);
  if (sa.size() != sb.size()) return fmt("file counts differ (%zu vs %zu)", sa.size(), sb.size());
  for (const auto& [name, bytes] : sa) {
    const auto it = sb.find(name);
    if (it == sb.end()) return "missing " + name;
    if (it->second != bytes) return "bytes differ in " + name;
  }
  return fmt("%zu files identical", sa.size());
}

// ---------------------------------------------------------------------------

Outcome gradient_suite() {
  const auto t0 = std::chrono::steady_clock::now();
  const GradCheckOptions opt;  // 50 instances, 8x10, rel 1e-4
  const auto results = run_gradient_suite(opt);
  const double elapsed = seconds_since(t0);
  bool ok = elapsed < 120.0 && !results.empty();
  double worst = 0.0;
  std::string failed;
  for (const auto& r : results) {
    worst = std::max(worst, r.max_rel_error);
    if (!r.passed || r.checked == 0) {
      ok = false;
      failed += " " + r.name;
    }
  }
  return {ok, fmt("%zu cases x %d instances, worst rel err %.2e, %.1f s", results.size(), opt.instances, worst,
                  elapsed) +
                  (failed.empty() ? "" : "; failing:" + failed)};
}

Outcome projection_oracle() {
  std::mt19937_64 rng(2);
  const auto k = small_k();
  double worst = 0.0;
  for (int i = 0; i < 100; ++i) {
    const auto z = random_depth(rng, 1.0, 4.0);
    const auto rel = random_rel(rng);
    const auto f = flow_from_depth(z, rel, k);
    for (int r = 0; r < 8; ++r) {
      for (int c = 0; c < 10; ++c) {
        const double d = z.values(r, c);
        const Vec3 p((c - k.cx) / k.fx * d, (r - k.cy) / k.fy * d, d);
        const Vec3 q = rel.rotation * p + rel.translation;
        const double u = k.fx * q.x() / q.z() + k.cx, v = k.fy * q.y() / q.z() + k.cy;
        worst = std::max({worst, std::abs(f.target_u(r, c) - u), std::abs(f.target_v(r, c) - v),
                          std::abs(f.flow.values(r, c, 0) - (u - c) / k.width),
                          std::abs(f.flow.values(r, c, 1) - (v - r) / k.height)});
      }
    }
  }
  return {worst <= 1e-6, fmt("100 instances, max deviation %.2e px", worst)};
}

Outcome identity_invariants() {
  std::mt19937_64 rng(3);
  const auto k = small_k();
  const auto id = RelativeTransform::identity();
  double max_flow = 0.0, max_warp = 0.0;
  int interior_invalid = 0;
  for (int i = 0; i < 20; ++i) {
    const auto zj = random_depth(rng, 0.1, 10.0), zk = random_depth(rng, 0.1, 10.0);
    const auto f = flow_from_depth(zj, id, k);
    for (double v : f.flow.values.values()) max_flow = std::max(max_flow, std::abs(v));
    const auto w = warp_depth(zj, zk, id, id, k);
    for (int r = 1; r < 7; ++r) {
      for (int c = 1; c < 9; ++c) {
        if (!w.warped.valid(r, c)) {
          ++interior_invalid;
          continue;
        }
        max_warp = std::max(max_warp, std::abs(w.warped.values(r, c) - zk.values(r, c)));
      }
    }
  }
  return {max_flow == 0.0 && max_warp <= 1e-6 && interior_invalid == 0,
          fmt("max |flow| %.1e, max warp deviation %.2e, invalid interior pixels %d", max_flow, max_warp,
              interior_invalid)};
}

SfmReconstruction scaled(const SfmReconstruction& recon, double factor) {
  SfmReconstruction out = recon;
  for (auto& p : out.points) p.position *= factor;
  for (auto& f : out.frames) f.pose.translation *= factor;
  return out;
}

Outcome scale_invariances() {
  // (a) SFL under a global x10 rescaling of the reconstruction.
  synth::SceneConfig sc;
  sc.frames = 60;
  const auto bundle = synth::make_scene(3, sc);
  const auto K = synth::default_intrinsics();
  const auto sim = synth::simulate_sfm(bundle.scene, bundle.trajectory, K, synth::SfmSimConfig{});
  const auto big = scaled(sim.recon, 10.0);
  const double sigma = sim.recon.mean_track_length();
  int identical = 0, evaluated = 0;
  const std::vector<std::pair<int, int>> pairs = {{5, 12}, {10, 30}, {20, 25}, {40, 55}, {3, 33}, {50, 44}};
  for (const auto& [j, k] : pairs) {
    DepthMap dj = synth::render_frame(bundle.scene, bundle.trajectory.poses[j], K).depth;
    DepthMap dk = synth::render_frame(bundle.scene, bundle.trajectory.poses[k], K).depth;
    for (int r = 0; r < K.height; ++r) {
      for (int c = 0; c < K.width; ++c) {
        dj.values(r, c) *= 1.0 + 0.1 * std::sin(0.3 * c + 0.2 * r);
        dk.values(r, c) *= 1.0 + 0.1 * std::cos(0.25 * c - 0.15 * r);
      }
    }
    auto pair_of = [&](const SfmReconstruction& rc) {
      return make_pair_supervision(rc, j, k, rasterize_frame(rc, j, sigma), rasterize_frame(rc, k, sigma), true);
    };
    const auto a = evaluate_pair(dj, dk, pair_of(sim.recon), 20.0, 5.0, false);
    const auto b = evaluate_pair(dj, dk, pair_of(big), 20.0, 5.0, false);
    if (a.skipped || b.skipped || !(a.sfl > 0.0)) continue;
    ++evaluated;
    identical += a.sfl == b.sfl;
  }
  const bool ok_a = evaluated == static_cast<int>(pairs.size()) && identical == evaluated;

  // (b) DCL under joint positive rescaling of all depth inputs.
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(0.5, 3.0);
  std::bernoulli_distribution keep(0.8);
  double dcl_worst = 0.0;
  for (int t = 0; t < 50; ++t) {
    RealGrid zj(8, 10), zk(8, 10), wkj(8, 10), wjk(8, 10);
    MaskGrid ojk(8, 10), okj(8, 10);
    for (std::size_t i = 0; i < 80; ++i) {
      zj[i] = u(rng);
      zk[i] = u(rng);
      wkj[i] = u(rng);
      wjk[i] = u(rng);
      ojk[i] = keep(rng);
      okj[i] = keep(rng);
    }
    const double base = depth_consistency_loss(zj, zk, wkj, wjk, ojk, okj);
    for (double s : {1e-3, 0.37, 10.0, 4096.0, 1e5}) {
      auto m = [s](RealGrid g) {
        for (double& v : g.storage()) v *= s;
        return g;
      };
      const double v = depth_consistency_loss(m(zj), m(zk), m(wkj), m(wjk), ojk, okj);
      dcl_worst = std::max(dcl_worst, std::abs(v - base) / base);
    }
  }
  const bool ok_b = dcl_worst <= 1e-14;

  // (c) evaluate_sparse under positive rescaling of the prediction.
  double metric_worst = 0.0;
  bool thresholds_equal = true;
  for (int t = 0; t < 50; ++t) {
    const auto pred = random_depth(rng, 0.5, 3.0), gt = random_depth(rng, 0.5, 3.0);
    RealGrid mask(8, 10);
    for (double& v : mask.storage()) v = keep(rng) ? 0.0 : u(rng) / 3.0;
    const auto base = evaluate_sparse(pred, gt.values, mask);
    for (double s : {1e-3, 0.37, 10.0, 4096.0}) {
      auto p = pred;
      for (double& v : p.values.storage()) v *= s;
      const auto m = evaluate_sparse(p, gt.values, mask);
      metric_worst = std::max(metric_worst, std::abs(m.abs_rel - base.abs_rel) / base.abs_rel);
      thresholds_equal &= m.thresh_1_25 == base.thresh_1_25 && m.thresh_1_25_sq == base.thresh_1_25_sq &&
                          m.thresh_1_25_cu == base.thresh_1_25_cu && m.n_valid == base.n_valid;
    }
  }
  const bool ok_c = metric_worst <= 1e-14 && thresholds_equal;

  return {ok_a && ok_b && ok_c,
          fmt("(a) SFL bit-identical on %d/%d pairs [%s]; (b) DCL max rel change %.1e [%s]; "
              "(c) abs_rel max rel change %.1e, thresholds %s [%s]",
              identical, static_cast<int>(pairs.size()), ok_a ? "ok" : "FAIL", dcl_worst, ok_b ? "ok" : "FAIL",
              metric_worst, thresholds_equal ? "equal" : "differ", ok_c ? "ok" : "FAIL")};
}

Outcome renderer_cross_check() {
  // Full-resolution rendering keeps bilinear interpolation error below the
  // ray-march tolerance on the smooth wall.
  const auto bundle = synth::make_scene(7, synth::SceneConfig{});
  const auto K = synth::default_intrinsics(512, 640);
  const double tol = 2.0 * bundle.scene.config().march_tolerance;
  const Mat3 kinv = K.inverse_matrix();
  std::string detail;
  bool ok = true;
  for (int gap : {5, 30}) {
    const int j = 40, k = 40 + gap;
    const auto& pj = bundle.trajectory.poses[j];
    const auto& pk = bundle.trajectory.poses[k];
    const auto fj = synth::render_frame(bundle.scene, pj, K), fk = synth::render_frame(bundle.scene, pk, K);
    const auto w = warp_depth(fj.depth, fk.depth, relative_transform(pj, pk, j, k), relative_transform(pk, pj, k, j), K);
    auto world = [&](const CameraPose& p, double z, double c, double r) {
      return Vec3(p.rotation.transpose() * (z * (kinv * Vec3(c, r, 1.0)) - p.translation));
    };
    std::size_t covisible = 0, within = 0;
    for (int r = 0; r < K.height; ++r) {
      for (int c = 0; c < K.width; ++c) {
        if (!w.warped.valid(r, c)) continue;
        // Co-visible: the frame-j surface point is unoccluded from k, and the
        // four frame-k pixels used by the sampler see points unoccluded from j.
        if (!synth::observes(bundle.scene, pk, K, world(pj, fj.depth.values(r, c), c, r), 1e-3)) continue;
        const int c0 = static_cast<int>(std::floor(w.coords(r, c, 0)));
        const int r0 = static_cast<int>(std::floor(w.coords(r, c, 1)));
        bool corners = true;
        for (int dr = 0; dr < 2 && corners; ++dr) {
          for (int dc = 0; dc < 2 && corners; ++dc) {
            const Vec3 y = world(pk, fk.depth.values(r0 + dr, c0 + dc), c0 + dc, r0 + dr);
            corners = synth::observes(bundle.scene, pj, K, y, 1e-3);
          }
        }
        if (!corners) continue;
        ++covisible;
        within += std::abs(w.warped.values(r, c) - fj.depth.values(r, c)) <= tol;
      }
    }
    const double frac = covisible ? static_cast<double>(within) / covisible : 0.0;
    ok &= covisible > 1000 && frac >= 0.95;
    detail += fmt("%sgap %d: %.2f%% of %zu co-visible pixels within %.0e", detail.empty() ? "" : "; ", gap,
                  100.0 * frac, covisible, tol);
  }
  return {ok, detail + " (512x640)"};
}

Outcome closed_forms() {
  const double soft = soft_weight(7, 7.0);
  DepthMap pred(2, 2, 5.0);
  pred.values(0, 0) = 1.0;
  pred.values(1, 1) = 2.0;
  RealGrid sparse(2, 2), mask(2, 2);
  sparse(0, 0) = 2.0;
  sparse(1, 1) = 4.0;
  mask(0, 0) = mask(1, 1) = 1.0;
  const double s = scale_depth(pred, sparse, mask).scale;
  std::mt19937_64 rng(6);
  const auto zj = random_depth(rng, 0.5, 3.0), zk = random_depth(rng, 0.5, 3.0);
  RealGrid wkj = zj.values, wjk = zk.values;
  for (double& v : wkj.storage()) v *= 2.0;
  for (double& v : wjk.storage()) v *= 2.0;
  const MaskGrid all(8, 10, 1, 1);
  const double dcl = depth_consistency_loss(zj.values, zk.values, wkj, wjk, all, all);
  const double e1 = std::abs(soft - (1.0 - std::exp(-1.0))), e2 = std::abs(s - 2.0), e3 = std::abs(dcl - 0.4);
  return {e1 <= 1e-9 && e2 <= 1e-9 && e3 <= 1e-9,
          fmt("soft mask %.12f (err %.1e), scale %.12f (err %.1e), DCL %.12f (err %.1e)", soft, e1, s, e2, dcl, e3)};
}

// ---------------------------------------------------------------------------
// Criteria 7 and 8 share the synthetic benchmark.

struct Benchmark {
  fs::path train_dir;
  fs::path val_dir;
  std::unique_ptr<Dataset> train;
  std::unique_ptr<Dataset> val;
  int epochs = 30;
  std::map<std::pair<bool, std::uint64_t>, EvalMetrics> results;  // (with_dcl, seed)
  std::map<std::pair<bool, std::uint64_t>, double> cpu_hours;
  std::size_t parameters = 0;
};

void prepare_benchmark(Benchmark& b, const fs::path& work) {
  if (b.train) return;
  synth::DatasetOptions train_opt;  // default scene, 200 frames, noise 1% of the unit radius
  synth::DatasetOptions val_opt = train_opt;
  val_opt.trajectory_seed = 7;  // same cavity, different camera path
  fs::remove_all(work / "bench");
  synth::write_dataset(work / "bench" / "raw_train", train_opt);
  synth::write_dataset(work / "bench" / "raw_val", val_opt);
  b.train_dir = work / "bench" / "train";
  b.val_dir = work / "bench" / "val";
  build_dataset(work / "bench" / "raw_train", b.train_dir);
  build_dataset(work / "bench" / "raw_val", b.val_dir);
  b.train = std::make_unique<Dataset>(load_dataset(b.train_dir));
  b.val = std::make_unique<Dataset>(load_dataset(b.val_dir));
}

const EvalMetrics& benchmark_run(Benchmark& b, const fs::path& work, bool with_dcl, std::uint64_t seed) {
  const auto key = std::make_pair(with_dcl, seed);
  if (auto it = b.results.find(key); it != b.results.end()) return it->second;
  RunConfig cfg;
  cfg.model.height = 64;
  cfg.model.width = 80;
  cfg.model.seed = seed;
  cfg.train.seed = seed;
  cfg.train.epochs = b.epochs;
  if (!with_dcl) {
    cfg.train.weights.lambda2 = 0.0;
    cfg.train.weights.lambda2_phase1 = 0.0;
  }
  TrainOptions opt;
  opt.out_dir = work / "bench" / fmt("run_%s_%llu", with_dcl ? "sfl_dcl" : "sfl", static_cast<unsigned long long>(seed));
  fs::remove_all(opt.out_dir);
  const std::clock_t c0 = std::clock();
  const auto t0 = std::chrono::steady_clock::now();
  const auto result = train(*b.train, cfg, opt);
  b.cpu_hours[key] = static_cast<double>(std::clock() - c0) / CLOCKS_PER_SEC / 3600.0;
  auto net = load_model(result.last_checkpoint);
  b.parameters = net->parameter_count();
  const auto m = evaluate_dense_dataset(*net, *b.val);
  std::printf("  run %-7s seed %-9llu abs_rel %.4f d<1.25 %.4f (%.1f min)\n", with_dcl ? "sfl+dcl" : "sfl",
              static_cast<unsigned long long>(seed), m.abs_rel, m.thresh_1_25, seconds_since(t0) / 60.0);
  std::fflush(stdout);
  return b.results[key] = m;
}

constexpr std::uint64_t kSeeds[3] = {20190220, 1, 2};

Outcome end_to_end(Benchmark& b, const fs::path& work) {
  prepare_benchmark(b, work);
  const auto& m = benchmark_run(b, work, true, kSeeds[0]);
  const double hours = b.cpu_hours[{true, kSeeds[0]}];
  const bool ok = m.abs_rel < 0.15 && m.thresh_1_25 > 0.80 && hours <= 4.0;
  return {ok, fmt("held-out dense abs_rel %.4f (< 0.15), d<1.25 %.4f (> 0.80); %zu parameters, %d epochs, "
                  "%.2f CPU hours, mask density %.2f%%",
                  m.abs_rel, m.thresh_1_25, b.parameters, b.epochs, hours, 100.0 * b.train->manifest.mask_density)};
}

Outcome ablation(Benchmark& b, const fs::path& work) {
  prepare_benchmark(b, work);
  double with = 0.0, without = 0.0;
  for (std::uint64_t seed : kSeeds) {
    with += benchmark_run(b, work, true, seed).abs_rel / 3.0;
    without += benchmark_run(b, work, false, seed).abs_rel / 3.0;
  }
  return {with <= without, fmt("mean held-out abs_rel over 3 seeds: SFL+DCL %.4f, SFL only %.4f", with, without)};
}

Outcome determinism(const fs::path& work) {
  const fs::path root = work / "determinism";
  fs::remove_all(root);
  synth::DatasetOptions opt;
  opt.seed = 99;
  opt.trajectory_seed = 99;
  opt.scene.frames = 40;
  std::string detail;
  bool ok = true;
  auto check = [&](const char* what, const fs::path& a, const fs::path& b) {
    const auto msg = compare_snapshots(a, b);
    const bool same = msg.find("identical") != std::string::npos;
    ok &= same;
    detail += fmt("%s%s: %s", detail.empty() ? "" : "; ", what, msg.c_str());
  };
  for (const char* run : {"a", "b"}) {
    synth::write_dataset(root / run / "raw", opt);
    build_dataset(root / run / "raw", root / run / "data");
  }
  check("synth", root / "a" / "raw", root / "b" / "raw");
  check("gen-data", root / "a" / "data", root / "b" / "data");

  RunConfig cfg;
  cfg.model.height = 64;
  cfg.model.width = 80;
  cfg.train.epochs = 2;
  cfg.train.serial = true;
  const auto data = load_dataset(root / "a" / "data");
  for (const char* run : {"a", "b"}) {
    TrainOptions t;
    t.out_dir = root / run / "train";
    train(data, cfg, t);
  }
  check("serial train", root / "a" / "train", root / "b" / "train");
  return {ok, detail};
}

}  // namespace

int main(int argc, char** argv) {
  fs::path work = fs::temp_directory_path() / "endodepth_acceptance";
  std::set<int> only;
  int epochs = 30;
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--work" && i + 1 < argc) {
      work = argv[++i];
    } else if (a == "--only" && i + 1 < argc) {
      std::stringstream ss(argv[++i]);
      std::string item;
      while (std::getline(ss, item, ',')) only.insert(std::stoi(item));
    } else if (a == "--epochs" && i + 1 < argc) {
      epochs = std::stoi(argv[++i]);
    } else {
      std::fprintf(stderr, "usage: %s [--work DIR] [--only 1,2,...] [--epochs N]\n", argv[0]);
      return 2;
    }
  }
  fs::create_directories(work);

  Benchmark bench;
  bench.epochs = epochs;
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"gradient suite", gradient_suite},
      {"projection oracle", projection_oracle},
      {"identity invariants", identity_invariants},
      {"scale invariances", scale_invariances},
      {"renderer cross-check", renderer_cross_check},
      {"closed forms", closed_forms},
      {"synthetic end-to-end", [&] { return end_to_end(bench, work); }},
      {"ablation direction", [&] { return ablation(bench, work); }},
      {"determinism", [&] { return determinism(work); }},
  };

  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!only.empty() && !only.count(id)) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failures += !o.pass;
    std::printf("criterion %d %-22s %s  %s\n", id, criteria[i].first.c_str(), o.pass ? "PASS" : "FAIL",
                o.detail.c_str());
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}
