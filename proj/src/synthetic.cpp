#include "endodepth/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>
#include <string>

#include "endodepth/text.hpp"

namespace endodepth::synth {

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;

std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

double smooth(double t) { return t * t * (3.0 - 2.0 * t); }

}  // namespace

void SceneConfig::validate() const {
  if (!(length > 2.0)) throw ValidationError("scene: length must exceed 2");
  if (!(radius > 0.0)) throw ValidationError("scene: radius must be positive");
  if (radius_variation < 0.0 || radius_variation >= 0.9) throw ValidationError("scene: radius_variation out of range");
  if (bump_amplitude < 0.0 || bump_terms < 0) throw ValidationError("scene: negative bump parameters");
  const double min_radius = radius * (1.0 - radius_variation) - bump_amplitude * std::sqrt(2.0 * bump_terms);
  if (min_radius < 0.25 * radius) throw ValidationError("scene: wall too close to the centerline");
  if (wobble < 0.0 || wobble > 0.5) throw ValidationError("scene: wobble must be in [0, 0.5]");
  if (frames < 2) throw ValidationError("scene: need at least two frames");
  if (!(step > 0.0)) throw ValidationError("scene: step must be positive");
  if (start < 1.0 || start + step * (frames - 1) > length - 2.0) {
    throw ValidationError("scene: camera path leaves the tube");
  }
  if (!(march_tolerance > 0.0) || march_steps < 8) throw ValidationError("scene: invalid ray-march settings");
  if (!(light_power > 0.0)) throw ValidationError("scene: light_power must be positive");
}

Scene::Scene(std::uint64_t seed, const SceneConfig& config) : config_(config), seed_(splitmix(seed)) {
  config_.validate();
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> phase(0.0, kTwoPi);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (double& p : phase_) p = phase(rng);
  const double amp = config_.bump_amplitude / std::sqrt(std::max(1.0, config_.bump_terms / 2.0));
  for (int i = 0; i < config_.bump_terms; ++i) {
    Bump b;
    b.m = 2 + static_cast<int>(unit(rng) * 6.0);
    b.k = 0.8 + 1.7 * unit(rng);
    b.phase = phase(rng);
    b.amp = amp * (0.5 + 0.5 * unit(rng));
    bumps_.push_back(b);
  }
}

Vec3 Scene::centerline(double z) const {
  const double w = kTwoPi / config_.bend_wavelength;
  const double a = config_.bend_amplitude;
  return {a * std::sin(w * z + phase_[0]), 0.8 * a * std::sin(w / 1.37 * z + phase_[1]), z};
}

Vec3 Scene::centerline_tangent(double z) const {
  const double w = kTwoPi / config_.bend_wavelength;
  const double a = config_.bend_amplitude;
  return Vec3(a * w * std::cos(w * z + phase_[0]), 0.8 * a * w / 1.37 * std::cos(w / 1.37 * z + phase_[1]), 1.0)
      .normalized();
}

double Scene::wall_radius(double z, double theta) const {
  double r = config_.radius *
             (1.0 + config_.radius_variation * std::sin(kTwoPi / (0.7 * config_.bend_wavelength) * z + phase_[2]));
  for (const auto& b : bumps_) r += b.amp * std::sin(b.m * theta + b.k * z + b.phase);
  return r;
}

double Scene::inside(const Vec3& p) const {
  const Vec3 c = centerline(p.z());
  const double dx = p.x() - c.x();
  const double dy = p.y() - c.y();
  const double r = std::hypot(dx, dy);
  const double g = wall_radius(p.z(), std::atan2(dy, dx)) - r;
  return std::min({g, p.z(), config_.length - p.z()});
}

Vec3 Scene::normal(const Vec3& p) const {
  constexpr double h = 1e-5;
  Vec3 g;
  for (int i = 0; i < 3; ++i) {
    Vec3 a = p, b = p;
    a[i] += h;
    b[i] -= h;
    g[i] = inside(a) - inside(b);
  }
  const double n = g.norm();
  return n > 0.0 ? Vec3(g / n) : Vec3(0.0, 0.0, 1.0);
}

double Scene::lattice(int x, int y, int z) const {
  std::uint64_t h = seed_;
  h = splitmix(h ^ static_cast<std::uint64_t>(static_cast<std::int64_t>(x)));
  h = splitmix(h ^ static_cast<std::uint64_t>(static_cast<std::int64_t>(y)));
  h = splitmix(h ^ static_cast<std::uint64_t>(static_cast<std::int64_t>(z)));
  return static_cast<double>(h >> 11) * 0x1.0p-53;
}

double Scene::noise(const Vec3& p) const {
  const double fx = std::floor(p.x()), fy = std::floor(p.y()), fz = std::floor(p.z());
  const int x = static_cast<int>(fx), y = static_cast<int>(fy), z = static_cast<int>(fz);
  const double tx = smooth(p.x() - fx), ty = smooth(p.y() - fy), tz = smooth(p.z() - fz);
  auto lerp = [](double a, double b, double t) { return a + (b - a) * t; };
  const double c00 = lerp(lattice(x, y, z), lattice(x + 1, y, z), tx);
  const double c10 = lerp(lattice(x, y + 1, z), lattice(x + 1, y + 1, z), tx);
  const double c01 = lerp(lattice(x, y, z + 1), lattice(x + 1, y, z + 1), tx);
  const double c11 = lerp(lattice(x, y + 1, z + 1), lattice(x + 1, y + 1, z + 1), tx);
  return lerp(lerp(c00, c10, ty), lerp(c01, c11, ty), tz);
}

std::array<double, 3> Scene::albedo(const Vec3& p) const {
  const Vec3 q = p * config_.texture_scale;
  const double n = (2.0 * noise(q) + noise(2.7 * q + Vec3(17.0, 3.0, 5.0))) / 3.0;
  const double v = 1.0 + config_.texture_contrast * (2.0 * n - 1.0);
  const double vein = noise(0.6 * q + Vec3(-4.0, 9.0, 1.0));
  const double dark = vein > 0.7 ? 1.0 - 1.2 * (vein - 0.7) : 1.0;
  return {std::clamp(0.85 * v, 0.0, 1.0), std::clamp(0.45 * v * dark, 0.0, 1.0),
          std::clamp(0.38 * v * dark, 0.0, 1.0)};
}

RayHit Scene::cast(const Vec3& origin, const Vec3& dir) const {
  RayHit out;
  double g = inside(origin);
  if (!(g > 0.0)) return out;
  const double dir_norm = dir.norm();
  double t = 0.0;
  for (int i = 0; i < config_.march_steps; ++i) {
    const double step = std::max(0.5 * g / dir_norm, 1e-3 * (1.0 + t));
    const double next = t + step;
    const double gn = inside(origin + next * dir);
    if (gn <= 0.0) {
      // Bracketed: refine well below the march tolerance.
      double lo = t, hi = next;
      while (hi - lo > 1e-3 * config_.march_tolerance) {
        const double mid = 0.5 * (lo + hi);
        if (inside(origin + mid * dir) > 0.0) {
          lo = mid;
        } else {
          hi = mid;
        }
      }
      out.hit = true;
      out.t = 0.5 * (lo + hi);
      out.point = origin + out.t * dir;
      return out;
    }
    t = next;
    g = gn;
  }
  return out;
}

std::array<double, 3> shade(const Scene& scene, const Vec3& point, const Vec3& camera_center) {
  const auto& c = scene.config();
  const Vec3 to_light = camera_center - point;
  const double d2 = to_light.squaredNorm();
  const Vec3 l = to_light / std::sqrt(d2);
  Vec3 n = scene.normal(point);
  if (n.dot(l) < 0.0) n = -n;
  const double cos_t = std::max(0.0, n.dot(l));
  // Light and viewer coincide, so the half vector is the light direction.
  const double spec = c.specular * std::pow(cos_t, c.shininess);
  const auto a = scene.albedo(point);
  std::array<double, 3> out{};
  for (int ch = 0; ch < 3; ++ch) out[ch] = c.light_power / d2 * (a[ch] * cos_t + spec) + c.ambient * a[ch];
  return out;
}

CameraIntrinsics default_intrinsics(int height, int width) {
  CameraIntrinsics K;
  K.width = width;
  K.height = height;
  K.fx = 0.5 * width;
  K.fy = 0.5 * width;
  K.cx = 0.5 * width;
  K.cy = 0.5 * height;
  return K;
}

SceneBundle make_scene(std::uint64_t seed, const SceneConfig& config, std::uint64_t trajectory_seed) {
  SceneBundle b{Scene(seed, config), {}};
  const auto& c = b.scene.config();
  std::mt19937_64 rng(splitmix(trajectory_seed ^ 0x7261796dull));
  std::uniform_real_distribution<double> phase(0.0, kTwoPi);
  std::uniform_real_distribution<double> freq(0.6, 1.4);
  std::array<double, 5> ph{}, fr{};
  for (int i = 0; i < 5; ++i) {
    ph[i] = phase(rng);
    fr[i] = freq(rng);
  }
  for (int i = 0; i < c.frames; ++i) {
    const double s = c.start + c.step * i;
    const Vec3 axis = b.scene.centerline(s);
    const Vec3 center = axis + Vec3(c.wobble * c.radius * std::sin(fr[0] * s + ph[0]),
                                    c.wobble * c.radius * std::sin(fr[1] * s + ph[1]), 0.0);
    const Vec3 tangent = b.scene.centerline_tangent(s + 0.5);
    const double yaw = c.look_jitter * std::sin(fr[2] * s + ph[2]);
    const double pitch = c.look_jitter * std::sin(fr[3] * s + ph[3]);
    const double roll = 0.3 * std::sin(0.5 * fr[4] * s + ph[4]);
    const Vec3 f = (tangent + Vec3(yaw, pitch, 0.0)).normalized();
    Vec3 x = Vec3(0.0, 1.0, 0.0).cross(f).normalized();
    Vec3 y = f.cross(x);
    const double cr = std::cos(roll), sr = std::sin(roll);
    const Vec3 xr = cr * x + sr * y;
    const Vec3 yr = -sr * x + cr * y;
    Mat3 R;
    R.row(0) = xr.transpose();
    R.row(1) = yr.transpose();
    R.row(2) = f.transpose();
    // Round through the stored quaternion form so file round-trips are exact.
    CameraPose pose = CameraPose::from_quaternion(Eigen::Quaterniond(R), Vec3::Zero());
    pose.translation = -pose.rotation * center;
    if (b.scene.inside(center) < 0.2 * c.radius) {
      throw ValidationError("make_scene: camera " + std::to_string(i) + " too close to the wall");
    }
    b.trajectory.poses.push_back(pose);
  }
  return b;
}

RenderedFrame render_frame(const Scene& scene, const CameraPose& pose, const CameraIntrinsics& K) {
  K.validate();
  RenderedFrame out{Image(K.height, K.width, 3, 0.0f), DepthMap(K.height, K.width, 0.0)};
  const Vec3 center = pose.center();
  const Mat3 Rt = pose.rotation.transpose();
  for (int r = 0; r < K.height; ++r) {
    for (int c = 0; c < K.width; ++c) {
      const Vec3 dir = Rt * Vec3((c - K.cx) / K.fx, (r - K.cy) / K.fy, 1.0);
      const RayHit hit = scene.cast(center, dir);
      if (!hit.hit) {
        out.depth.valid(r, c) = 0;
        continue;
      }
      out.depth.values(r, c) = hit.t;
      out.depth.valid(r, c) = 1;
      const auto rgb = shade(scene, hit.point, center);
      for (int ch = 0; ch < 3; ++ch) {
        out.image(r, c, ch) = static_cast<float>(std::pow(std::clamp(rgb[ch], 0.0, 1.0), 1.0 / 2.2));
      }
    }
  }
  return out;
}

void SfmSimConfig::validate() const {
  if (n_points < 10) throw ValidationError("simulate_sfm: n_points must be at least 10");
  if (!(noise_sigma >= 0.0)) throw ValidationError("simulate_sfm: noise_sigma must be non-negative");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ValidationError("simulate_sfm: dropout must be in [0, 1)");
  if (!(max_scale_change >= 1.0)) throw ValidationError("simulate_sfm: max_scale_change must be >= 1");
}

bool observes(const Scene& scene, const CameraPose& pose, const CameraIntrinsics& K, const Vec3& point,
              double tolerance) {
  const Vec3 pc = pose.apply(point);
  if (!(pc.z() > 1e-6)) return false;
  int col = 0, row = 0;
  if (!rounded_pixel(K, K.fx * pc.x() / pc.z() + K.cx, K.fy * pc.y() / pc.z() + K.cy, col, row)) return false;
  const Vec3 center = pose.center();
  const Vec3 to = point - center;
  const double dist = to.norm();
  const RayHit hit = scene.cast(center, to / dist);
  return hit.hit && hit.t >= dist * (1.0 - tolerance);
}

SfmSimulation simulate_sfm(const Scene& scene, const Trajectory& trajectory, const CameraIntrinsics& K,
                           const SfmSimConfig& config) {
  config.validate();
  K.validate();
  const std::size_t nf = trajectory.poses.size();
  if (nf < 2) throw ValidationError("simulate_sfm: trajectory needs at least two poses");
  SfmSimulation sim;
  auto& recon = sim.recon;
  recon.intrinsics = K;
  for (std::size_t i = 0; i < nf; ++i) recon.frames.push_back({static_cast<int>(i), trajectory.poses[i]});
  std::vector<Vec3> centers;
  for (const auto& p : trajectory.poses) centers.push_back(p.center());

  std::mt19937_64 rng(config.seed);
  std::uniform_int_distribution<std::size_t> pick_frame(0, nf - 1);
  std::uniform_int_distribution<int> pick_row(0, K.height - 1), pick_col(0, K.width - 1);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);
  const double cos_max = std::cos(config.max_angle_deg * std::numbers::pi / 180.0);

  std::vector<std::uint8_t> row(nf);
  const std::size_t max_attempts = 50 * static_cast<std::size_t>(config.n_points);
  for (std::size_t attempt = 0; attempt < max_attempts && sim.true_positions.size() < std::size_t(config.n_points);
       ++attempt) {
    const std::size_t f = pick_frame(rng);
    const int r = pick_row(rng), c = pick_col(rng);
    const auto& pose = trajectory.poses[f];
    const Vec3 dir = pose.rotation.transpose() * Vec3((c - K.cx) / K.fx, (r - K.cy) / K.fy, 1.0);
    const RayHit hit = scene.cast(centers[f], dir);
    if (!hit.hit) continue;
    const Vec3 X = hit.point;
    const Vec3 seed_ray = X - centers[f];
    const double seed_dist = seed_ray.norm();
    int track = 0;
    for (std::size_t g = 0; g < nf; ++g) {
      row[g] = 0;
      const double drop = unit(rng);
      if (g == f) {
        row[g] = 1;
        ++track;
        continue;
      }
      const Vec3 ray = X - centers[g];
      const double dist = ray.norm();
      const double ratio = dist / seed_dist;
      if (ratio > config.max_scale_change || ratio < 1.0 / config.max_scale_change) continue;
      if (ray.dot(seed_ray) < cos_max * dist * seed_dist) continue;
      if (!observes(scene, trajectory.poses[g], K, X, config.occlusion_tolerance)) continue;
      if (drop < config.dropout) continue;
      row[g] = 1;
      ++track;
    }
    const double sigma = config.noise_sigma / std::sqrt(static_cast<double>(std::max(track, 1)));
    const Vec3 noise(gauss(rng), gauss(rng), gauss(rng));
    if (track < 2) continue;
    SparsePoint p;
    p.id = static_cast<std::int64_t>(recon.points.size());
    p.position = X + sigma * noise;
    p.track_length = track;
    recon.points.push_back(p);
    recon.visibility.insert(recon.visibility.end(), row.begin(), row.end());
    sim.true_positions.push_back(X);
  }
  recon.validate();
  return sim;
}

void write_dataset(const std::filesystem::path& dir, const DatasetOptions& options) {
  namespace fs = std::filesystem;
  SceneConfig scene_cfg = options.scene;
  const auto bundle = make_scene(options.seed, scene_cfg, options.trajectory_seed);
  const auto K = default_intrinsics(options.height, options.width);
  const auto sim = simulate_sfm(bundle.scene, bundle.trajectory, K, options.sfm);
  fs::create_directories(dir / "frames");
  fs::create_directories(dir / "depth_gt");
  write_reconstruction(sim.recon, dir);
  for (std::size_t i = 0; i < bundle.trajectory.poses.size(); ++i) {
    const auto frame = render_frame(bundle.scene, bundle.trajectory.poses[i], K);
    const std::string name = std::to_string(i);
    write_png(dir / "frames" / (name + ".png"), frame.image);
    RealGrid gt = frame.depth.values;
    for (std::size_t p = 0; p < gt.size(); ++p) {
      if (!frame.depth.valid[p]) gt[p] = 0.0;
    }
    write_array(dir / "depth_gt" / (name + ".eda"), gt);
  }
}

void apply_setting(DatasetOptions& o, const std::string& key, const std::string& value) {
  const std::string ctx = "synth: " + key;
  auto real = [&] { return text::parse_real(value, ctx); };
  auto integer = [&] { return static_cast<int>(text::parse_int(value, ctx)); };
  auto seed = [&] { return static_cast<std::uint64_t>(text::parse_int(value, ctx)); };
  auto& s = o.scene;
  auto& f = o.sfm;
  if (key == "height") o.height = integer();
  else if (key == "width") o.width = integer();
  else if (key == "seed") o.seed = seed();
  else if (key == "trajectory_seed") o.trajectory_seed = seed();
  else if (key == "sfm_seed") f.seed = seed();
  else if (key == "frames") s.frames = integer();
  else if (key == "step") s.step = real();
  else if (key == "start") s.start = real();
  else if (key == "wobble") s.wobble = real();
  else if (key == "look_jitter") s.look_jitter = real();
  else if (key == "length") s.length = real();
  else if (key == "radius") s.radius = real();
  else if (key == "radius_variation") s.radius_variation = real();
  else if (key == "bump_amplitude") s.bump_amplitude = real();
  else if (key == "bump_terms") s.bump_terms = integer();
  else if (key == "bend_amplitude") s.bend_amplitude = real();
  else if (key == "bend_wavelength") s.bend_wavelength = real();
  else if (key == "texture_scale") s.texture_scale = real();
  else if (key == "texture_contrast") s.texture_contrast = real();
  else if (key == "light_power") s.light_power = real();
  else if (key == "ambient") s.ambient = real();
  else if (key == "specular") s.specular = real();
  else if (key == "shininess") s.shininess = real();
  else if (key == "march_tolerance") s.march_tolerance = real();
  else if (key == "march_steps") s.march_steps = integer();
  else if (key == "n_points") f.n_points = integer();
  else if (key == "noise_sigma") f.noise_sigma = real();
  else if (key == "dropout") f.dropout = real();
  else if (key == "max_scale_change") f.max_scale_change = real();
  else if (key == "max_angle_deg") f.max_angle_deg = real();
  else throw ValidationError("synth: unknown key '" + key + "'");
}

void apply_settings_text(DatasetOptions& options, const std::string& body, const std::string& origin) {
  int number = 0;
  std::size_t pos = 0;
  while (pos <= body.size()) {
    const std::size_t end = std::min(body.find('\n', pos), body.size());
    std::string line = body.substr(pos, end - pos);
    pos = end + 1;
    ++number;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    const std::string t(text::trim(line));
    if (t.empty()) continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) {
      throw ValidationError(origin + ":" + std::to_string(number) + ": expected key=value");
    }
    apply_setting(options, std::string(text::trim(t.substr(0, eq))), std::string(text::trim(t.substr(eq + 1))));
  }
}

}  // namespace endodepth::synth
