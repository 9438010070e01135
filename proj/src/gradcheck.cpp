#include "endodepth/gradcheck.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <random>

#include "endodepth/geom_layers.hpp"
#include "endodepth/losses.hpp"
#include "endodepth/objective.hpp"

namespace endodepth {

ElementCheck check_gradient(const std::function<Probe(std::span<const double>)>& f,
                            std::span<const double> x, std::span<const double> analytic,
                            double step_scale) {
  ElementCheck out;
  double g_max = 0.0;
  for (double a : analytic) g_max = std::max(g_max, std::abs(a));
  const double floor = std::max(1e-3 * g_max, 1e-12);
  const std::uint64_t base_region = f(x).region;
  std::vector<double> work(x.begin(), x.end());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double h = step_scale * std::max(std::abs(x[i]), 1.0);
    work[i] = x[i] + h;
    const Probe plus = f(work);
    work[i] = x[i] - h;
    const Probe minus = f(work);
    work[i] = x[i];
    if (plus.region != base_region || minus.region != base_region) {
      ++out.skipped;
      continue;
    }
    const double numeric = (plus.value - minus.value) / (2.0 * h);
    const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), floor});
    out.max_rel_error = std::max(out.max_rel_error, std::abs(analytic[i] - numeric) / denom);
    ++out.checked;
  }
  return out;
}

namespace {

class Hasher {
 public:
  void add(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) {
      h_ ^= (v >> (8 * i)) & 0xff;
      h_ *= 1099511628211ULL;
    }
  }
  void add_mask(const MaskGrid& m) {
    for (auto b : m.values()) add(b);
  }
  void add_floor(double x) { add(static_cast<std::uint64_t>(static_cast<std::int64_t>(std::floor(x)))); }
  std::uint64_t value() const { return h_; }

 private:
  std::uint64_t h_ = 1469598103934665603ULL;
};

using Rng = std::mt19937_64;

double uniform(Rng& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

RealGrid random_grid(Rng& rng, int rows, int cols, int channels, double lo, double hi) {
  RealGrid g(rows, cols, channels);
  for (double& v : g.storage()) v = uniform(rng, lo, hi);
  return g;
}

CameraIntrinsics random_intrinsics(Rng& rng, int rows, int cols) {
  CameraIntrinsics k;
  k.width = cols;
  k.height = rows;
  k.fx = uniform(rng, 0.8, 1.2) * cols;
  k.fy = k.fx * uniform(rng, 0.95, 1.05);
  k.cx = (cols - 1) / 2.0 + uniform(rng, -0.5, 0.5);
  k.cy = (rows - 1) / 2.0 + uniform(rng, -0.5, 0.5);
  return k;
}

RelativeTransform random_motion(Rng& rng, double max_angle, double max_shift) {
  Vec3 axis(uniform(rng, -1, 1), uniform(rng, -1, 1), uniform(rng, -1, 1));
  axis.normalize();
  RelativeTransform rel;
  rel.rotation = Eigen::AngleAxisd(uniform(rng, -max_angle, max_angle), axis).toRotationMatrix();
  rel.translation = Vec3(uniform(rng, -max_shift, max_shift), uniform(rng, -max_shift, max_shift),
                         uniform(rng, -max_shift, max_shift));
  rel.source_frame = 0;
  rel.target_frame = 1;
  return rel;
}

RealGrid random_sparse_mask(Rng& rng, int rows, int cols, double density) {
  RealGrid m(rows, cols);
  for (double& v : m.storage()) v = uniform(rng, 0, 1) < density ? uniform(rng, 0.1, 0.9) : 0.0;
  m[0] = 0.5;  // never empty
  return m;
}

DepthMap as_depth(std::span<const double> values, int rows, int cols) {
  DepthMap d(rows, cols);
  std::copy(values.begin(), values.end(), d.values.storage().begin());
  return d;
}

double dot(const RealGrid& a, const RealGrid& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

std::vector<double> concat(const RealGrid& a, const RealGrid& b) {
  std::vector<double> v(a.storage());
  v.insert(v.end(), b.storage().begin(), b.storage().end());
  return v;
}

struct Accumulator {
  GradCheckResult result;
  void add(const ElementCheck& e) {
    result.checked += e.checked;
    result.skipped += e.skipped;
    result.max_rel_error = std::max(result.max_rel_error, e.max_rel_error);
  }
};

using CaseFn = ElementCheck (*)(Rng&, const GradCheckOptions&);

ElementCheck case_bilinear_grid(Rng& rng, const GradCheckOptions& o) {
  const RealGrid grid = random_grid(rng, o.rows, o.cols, 1, 1.0, 3.0);
  RealGrid coords(o.rows, o.cols, 2);
  for (std::size_t p = 0; p < grid.size(); ++p) {
    coords[2 * p] = uniform(rng, 0.0, o.cols - 1);
    coords[2 * p + 1] = uniform(rng, 0.0, o.rows - 1);
  }
  const RealGrid weights = random_grid(rng, o.rows, o.cols, 1, -1, 1);
  auto f = [&](std::span<const double> x) {
    RealGrid g(o.rows, o.cols);
    std::copy(x.begin(), x.end(), g.storage().begin());
    return Probe{dot(bilinear_sample(g, coords).values, weights), 0};
  };
  const auto fwd = bilinear_sample(grid, coords);
  const auto bg = bilinear_sample_backward(grid, coords, fwd, weights);
  return check_gradient(f, grid.storage(), bg.grid.storage(), o.step_scale);
}

ElementCheck case_bilinear_coords(Rng& rng, const GradCheckOptions& o) {
  const RealGrid grid = random_grid(rng, o.rows, o.cols, 1, 1.0, 3.0);
  RealGrid coords(o.rows, o.cols, 2);
  for (std::size_t p = 0; p < grid.size(); ++p) {
    coords[2 * p] = uniform(rng, 0.0, o.cols - 1);
    coords[2 * p + 1] = uniform(rng, 0.0, o.rows - 1);
  }
  const RealGrid weights = random_grid(rng, o.rows, o.cols, 1, -1, 1);
  auto f = [&](std::span<const double> x) {
    RealGrid c(o.rows, o.cols, 2);
    std::copy(x.begin(), x.end(), c.storage().begin());
    const auto s = bilinear_sample(grid, c);
    Hasher h;
    h.add_mask(s.in_bounds);
    for (double v : x) h.add_floor(v);
    return Probe{dot(s.values, weights), h.value()};
  };
  const auto fwd = bilinear_sample(grid, coords);
  const auto bg = bilinear_sample_backward(grid, coords, fwd, weights);
  return check_gradient(f, coords.storage(), bg.coords.storage(), o.step_scale);
}

ElementCheck case_scale_depth(Rng& rng, const GradCheckOptions& o) {
  const RealGrid pred = random_grid(rng, o.rows, o.cols, 1, 0.5, 2.0);
  const RealGrid sparse = random_grid(rng, o.rows, o.cols, 1, 1.0, 5.0);
  const RealGrid mask = random_sparse_mask(rng, o.rows, o.cols, 0.3);
  const RealGrid weights = random_grid(rng, o.rows, o.cols, 1, -1, 1);
  auto f = [&](std::span<const double> x) {
    return Probe{dot(scale_depth(as_depth(x, o.rows, o.cols), sparse, mask).depth.values, weights), 0};
  };
  const DepthMap d = as_depth(pred.storage(), o.rows, o.cols);
  const auto fwd = scale_depth(d, sparse, mask);
  const auto g = scale_depth_backward(d, sparse, mask, fwd, weights);
  return check_gradient(f, pred.storage(), g.storage(), o.step_scale);
}

ElementCheck case_flow_from_depth(Rng& rng, const GradCheckOptions& o) {
  const auto k = random_intrinsics(rng, o.rows, o.cols);
  const auto rel = random_motion(rng, 0.1, 0.3);
  const RealGrid depth = random_grid(rng, o.rows, o.cols, 1, 2.0, 4.0);
  const RealGrid wf = random_grid(rng, o.rows, o.cols, 2, -1, 1);
  const RealGrid wu = random_grid(rng, o.rows, o.cols, 1, -1, 1);
  const RealGrid wv = random_grid(rng, o.rows, o.cols, 1, -1, 1);
  auto f = [&](std::span<const double> x) {
    const auto out = flow_from_depth(as_depth(x, o.rows, o.cols), rel, k);
    Hasher h;
    h.add_mask(out.flow.valid);
    return Probe{dot(out.flow.values, wf) + dot(out.target_u, wu) + dot(out.target_v, wv), h.value()};
  };
  const DepthMap d = as_depth(depth.storage(), o.rows, o.cols);
  const auto fwd = flow_from_depth(d, rel, k);
  const auto g = flow_from_depth_backward(d, rel, k, fwd, &wf, &wu, &wv);
  return check_gradient(f, depth.storage(), g.storage(), o.step_scale);
}

struct WarpInstance {
  CameraIntrinsics k;
  RelativeTransform rel_jk, rel_kj;
  RealGrid depth_j, depth_k, weights;
};

WarpInstance random_warp(Rng& rng, const GradCheckOptions& o) {
  WarpInstance w;
  w.k = random_intrinsics(rng, o.rows, o.cols);
  w.rel_jk = random_motion(rng, 0.05, 0.15);
  w.rel_kj = w.rel_jk.inverse();
  w.depth_j = random_grid(rng, o.rows, o.cols, 1, 2.0, 4.0);
  w.depth_k = random_grid(rng, o.rows, o.cols, 1, 2.0, 4.0);
  w.weights = random_grid(rng, o.rows, o.cols, 1, -1, 1);
  return w;
}

Probe warp_probe(const WarpInstance& w, const DepthMap& zj, const DepthMap& zk) {
  const auto out = warp_depth(zj, zk, w.rel_jk, w.rel_kj, w.k);
  Hasher h;
  h.add_mask(out.warped.valid);
  for (std::size_t p = 0; p < out.warped.values.size(); ++p) {
    if (!out.warped.valid[p]) continue;
    h.add_floor(out.coords[2 * p]);
    h.add_floor(out.coords[2 * p + 1]);
  }
  return Probe{dot(out.warped.values, w.weights), h.value()};
}

ElementCheck case_warp_depth_j(Rng& rng, const GradCheckOptions& o) {
  const auto w = random_warp(rng, o);
  const DepthMap zj = as_depth(w.depth_j.storage(), o.rows, o.cols);
  const DepthMap zk = as_depth(w.depth_k.storage(), o.rows, o.cols);
  auto f = [&](std::span<const double> x) { return warp_probe(w, as_depth(x, o.rows, o.cols), zk); };
  const auto fwd = warp_depth(zj, zk, w.rel_jk, w.rel_kj, w.k);
  const auto g = warp_depth_backward(fwd, zj, zk, w.rel_jk, w.rel_kj, w.k, w.weights);
  return check_gradient(f, w.depth_j.storage(), g.depth_j.storage(), o.step_scale);
}

ElementCheck case_warp_depth_k(Rng& rng, const GradCheckOptions& o) {
  const auto w = random_warp(rng, o);
  const DepthMap zj = as_depth(w.depth_j.storage(), o.rows, o.cols);
  const DepthMap zk = as_depth(w.depth_k.storage(), o.rows, o.cols);
  auto f = [&](std::span<const double> x) { return warp_probe(w, zj, as_depth(x, o.rows, o.cols)); };
  const auto fwd = warp_depth(zj, zk, w.rel_jk, w.rel_kj, w.k);
  const auto g = warp_depth_backward(fwd, zj, zk, w.rel_jk, w.rel_kj, w.k, w.weights);
  return check_gradient(f, w.depth_k.storage(), g.depth_k.storage(), o.step_scale);
}

FlowField as_flow(std::span<const double> values, int rows, int cols) {
  FlowField f;
  f.values = RealGrid(rows, cols, 2);
  std::copy(values.begin(), values.end(), f.values.storage().begin());
  f.valid = MaskGrid(rows, cols, 1, 1);
  return f;
}

ElementCheck case_sparse_flow_loss(Rng& rng, const GradCheckOptions& o) {
  const RealGrid dense_jk = random_grid(rng, o.rows, o.cols, 2, -0.05, 0.05);
  const RealGrid dense_kj = random_grid(rng, o.rows, o.cols, 2, -0.05, 0.05);
  const RealGrid sparse_jk = random_grid(rng, o.rows, o.cols, 2, -0.05, 0.05);
  const RealGrid sparse_kj = random_grid(rng, o.rows, o.cols, 2, -0.05, 0.05);
  const RealGrid mj = random_sparse_mask(rng, o.rows, o.cols, 0.3);
  const RealGrid mk = random_sparse_mask(rng, o.rows, o.cols, 0.3);
  const std::size_t half = dense_jk.size();
  auto f = [&](std::span<const double> x) {
    const auto a = as_flow(x.subspan(0, half), o.rows, o.cols);
    const auto b = as_flow(x.subspan(half), o.rows, o.cols);
    Hasher h;
    for (std::size_t i = 0; i < half; ++i) {
      h.add(x[i] > sparse_jk[i]);
      h.add(x[half + i] > sparse_kj[i]);
    }
    return Probe{sparse_flow_loss(a, b, sparse_jk, sparse_kj, mj, mk), h.value()};
  };
  const auto g = sparse_flow_loss_backward(as_flow(dense_jk.storage(), o.rows, o.cols),
                                           as_flow(dense_kj.storage(), o.rows, o.cols), sparse_jk,
                                           sparse_kj, mj, mk);
  return check_gradient(f, concat(dense_jk, dense_kj), concat(g.dense_jk, g.dense_kj), o.step_scale);
}

ElementCheck case_depth_consistency_loss(Rng& rng, const GradCheckOptions& o) {
  std::vector<RealGrid> in;
  for (int i = 0; i < 4; ++i) in.push_back(random_grid(rng, o.rows, o.cols, 1, 1.0, 3.0));
  MaskGrid wjk(o.rows, o.cols), wkj(o.rows, o.cols);
  for (std::size_t p = 0; p < wjk.size(); ++p) {
    wjk[p] = uniform(rng, 0, 1) < 0.7;
    wkj[p] = uniform(rng, 0, 1) < 0.7;
  }
  const std::size_t n = in[0].size();
  std::vector<double> x;
  for (const auto& g : in) x.insert(x.end(), g.storage().begin(), g.storage().end());
  auto unpack = [&](std::span<const double> v, int i) {
    RealGrid g(o.rows, o.cols);
    std::copy(v.begin() + i * n, v.begin() + (i + 1) * n, g.storage().begin());
    return g;
  };
  auto f = [&](std::span<const double> v) {
    return Probe{depth_consistency_loss(unpack(v, 0), unpack(v, 1), unpack(v, 2), unpack(v, 3), wjk, wkj), 0};
  };
  const auto g = depth_consistency_loss_backward(in[0], in[1], in[2], in[3], wjk, wkj);
  std::vector<double> a;
  for (const RealGrid* gg : {&g.depth_j, &g.depth_k, &g.warped_kj, &g.warped_jk}) {
    a.insert(a.end(), gg->storage().begin(), gg->storage().end());
  }
  return check_gradient(f, x, a, o.step_scale);
}

ElementCheck case_pair_objective(Rng& rng, const GradCheckOptions& o) {
  PairSupervision p;
  p.intrinsics = random_intrinsics(rng, o.rows, o.cols);
  p.rel_jk = random_motion(rng, 0.05, 0.15);
  p.rel_kj = p.rel_jk.inverse();
  p.mask_j = random_sparse_mask(rng, o.rows, o.cols, 0.3);
  p.mask_k = random_sparse_mask(rng, o.rows, o.cols, 0.3);
  p.sparse_depth_j = random_grid(rng, o.rows, o.cols, 1, 2.0, 4.0);
  p.sparse_depth_k = random_grid(rng, o.rows, o.cols, 1, 2.0, 4.0);
  p.sparse_flow_jk = random_grid(rng, o.rows, o.cols, 2, -0.05, 0.05);
  p.sparse_flow_kj = random_grid(rng, o.rows, o.cols, 2, -0.05, 0.05);
  p.flow_mask_j = p.mask_j;
  p.flow_mask_k = p.mask_k;
  const RealGrid pj = random_grid(rng, o.rows, o.cols, 1, 0.5, 1.5);
  const RealGrid pk = random_grid(rng, o.rows, o.cols, 1, 0.5, 1.5);
  const std::size_t n = pj.size();
  auto f = [&](std::span<const double> x) {
    const auto ev = evaluate_pair(as_depth(x.subspan(0, n), o.rows, o.cols),
                                  as_depth(x.subspan(n), o.rows, o.cols), p, 20.0, 5.0, false);
    Hasher h;
    h.add(ev.skipped);
    if (!ev.skipped) {
      for (const DepthWarp* w : {&ev.warp_kj, &ev.warp_jk}) {
        h.add_mask(w->warped.valid);
        for (std::size_t i = 0; i < n; ++i) {
          if (!w->warped.valid[i]) continue;
          h.add_floor(w->coords[2 * i]);
          h.add_floor(w->coords[2 * i + 1]);
        }
      }
      for (std::size_t i = 0; i < 2 * n; ++i) {
        h.add(ev.flow_jk.flow.values[i] > p.sparse_flow_jk[i]);
        h.add(ev.flow_kj.flow.values[i] > p.sparse_flow_kj[i]);
      }
    }
    return Probe{ev.total, h.value()};
  };
  const auto ev = evaluate_pair(as_depth(pj.storage(), o.rows, o.cols),
                                as_depth(pk.storage(), o.rows, o.cols), p, 20.0, 5.0, true);
  if (ev.skipped) return {};
  return check_gradient(f, concat(pj, pk), concat(ev.grad_j, ev.grad_k), o.step_scale);
}

}  // namespace

std::vector<GradCheckResult> run_gradient_suite(const GradCheckOptions& options) {
  const std::vector<std::pair<const char*, CaseFn>> cases = {
      {"bilinear_sample/grid", case_bilinear_grid},
      {"bilinear_sample/coords", case_bilinear_coords},
      {"scale_depth", case_scale_depth},
      {"flow_from_depth", case_flow_from_depth},
      {"warp_depth/depth_j", case_warp_depth_j},
      {"warp_depth/depth_k", case_warp_depth_k},
      {"sparse_flow_loss", case_sparse_flow_loss},
      {"depth_consistency_loss", case_depth_consistency_loss},
      {"pair_objective", case_pair_objective},
  };
  std::vector<GradCheckResult> results;
  for (std::size_t c = 0; c < cases.size(); ++c) {
    const auto start = std::chrono::steady_clock::now();
    Accumulator acc;
    acc.result.name = cases[c].first;
    Rng rng(options.seed + 7919 * c);
    for (int i = 0; i < options.instances; ++i) {
      acc.add(cases[c].second(rng, options));
      ++acc.result.instances;
    }
    acc.result.passed = acc.result.checked > 0 && acc.result.max_rel_error < options.tolerance;
    acc.result.seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    results.push_back(acc.result);
  }
  return results;
}

}  // namespace endodepth
