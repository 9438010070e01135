#include "endodepth/sparse_supervision.hpp"

#include <cmath>
#include <limits>

#include <json.hpp>

#include "endodepth/errors.hpp"
#include "endodepth/image_io.hpp"
#include "endodepth/text.hpp"

namespace endodepth {

namespace fs = std::filesystem;

double soft_weight(int track_length, double sigma) {
  return 1.0 - std::exp(-static_cast<double>(track_length) / sigma);
}

namespace {

// Collision rule shared by depth, mask and flow rasterization.
bool wins(double weight, double depth, double best_weight, double best_depth) {
  if (weight != best_weight) return weight > best_weight;
  return depth < best_depth;
}

struct CameraPoint {
  bool ok = false;
  double u = 0.0, v = 0.0, z = 0.0;
};

CameraPoint to_camera(const CameraIntrinsics& k, const CameraPose& pose, const Vec3& world) {
  const Vec3 cam = pose.apply(world);
  CameraPoint p;
  p.z = cam.z();
  if (!(p.z > 0.0)) return p;
  p.u = k.fx * (cam.x() / p.z) + k.cx;
  p.v = k.fy * (cam.y() / p.z) + k.cy;
  p.ok = std::isfinite(p.u) && std::isfinite(p.v);
  return p;
}

}  // namespace

FrameSupervision rasterize_frame(const SfmReconstruction& recon, int frame_id, double sigma) {
  if (!(sigma > 0.0)) throw InputError("rasterize_frame: sigma must be positive");
  const std::size_t j = recon.require_frame(frame_id);
  const auto& k = recon.intrinsics;
  FrameSupervision out;
  out.depth.frame_id = frame_id;
  out.mask.frame_id = frame_id;
  out.depth.values = RealGrid(k.height, k.width);
  out.mask.values = RealGrid(k.height, k.width);
  for (std::size_t n = 0; n < recon.points.size(); ++n) {
    if (!recon.visible(n, j)) continue;
    const auto p = to_camera(k, recon.frames[j].pose, recon.points[n].position);
    if (!p.ok) continue;
    int col = 0, row = 0;
    if (!rounded_pixel(k, p.u, p.v, col, row)) continue;
    const double w = soft_weight(recon.points[n].track_length, sigma);
    double& best_w = out.mask.values(row, col);
    double& best_z = out.depth.values(row, col);
    if (best_w == 0.0 || wins(w, p.z, best_w, best_z)) {
      best_w = w;
      best_z = p.z;
    }
  }
  return out;
}

SparseFlowMap rasterize_flow(const SfmReconstruction& recon, int frame_j, int frame_k) {
  const std::size_t j = recon.require_frame(frame_j);
  const std::size_t kk = recon.require_frame(frame_k);
  const auto& k = recon.intrinsics;
  SparseFlowMap out;
  out.source_frame = frame_j;
  out.target_frame = frame_k;
  out.values = RealGrid(k.height, k.width, 2);
  out.support = MaskGrid(k.height, k.width);
  RealGrid best_w(k.height, k.width, 1, -1.0);
  RealGrid best_z(k.height, k.width);
  const double w_inv = 1.0 / k.width;
  const double h_inv = 1.0 / k.height;
  for (std::size_t n = 0; n < recon.points.size(); ++n) {
    if (!recon.visible(n, j)) continue;
    const auto pj = to_camera(k, recon.frames[j].pose, recon.points[n].position);
    if (!pj.ok) continue;
    int col = 0, row = 0;
    if (!rounded_pixel(k, pj.u, pj.v, col, row)) continue;
    const auto pk = to_camera(k, recon.frames[kk].pose, recon.points[n].position);
    if (!pk.ok) continue;
    // Track length orders points exactly like the soft weight does.
    const double w = recon.points[n].track_length;
    if (out.support(row, col) && !wins(w, pj.z, best_w(row, col), best_z(row, col))) continue;
    best_w(row, col) = w;
    best_z(row, col) = pj.z;
    out.support(row, col) = 1;
    out.values(row, col, 0) = (pk.u - pj.u) * w_inv;
    out.values(row, col, 1) = (pk.v - pj.v) * h_inv;
  }
  return out;
}

std::string DatasetManifest::to_json() const {
  nlohmann::json j;
  j["version"] = version;
  j["sigma"] = sigma;
  j["width"] = width;
  j["height"] = height;
  j["reconstruction"] = reconstruction;
  j["image_mean"] = {image_mean[0], image_mean[1], image_mean[2]};
  j["image_std"] = {image_std[0], image_std[1], image_std[2]};
  j["mask_density"] = mask_density;
  auto& arr = j["frames"] = nlohmann::json::array();
  for (const auto& f : frames) {
    nlohmann::json e{{"id", f.id}, {"image", f.image}, {"depth", f.depth}, {"mask", f.mask}};
    if (!f.depth_gt.empty()) e["depth_gt"] = f.depth_gt;
    arr.push_back(std::move(e));
  }
  return j.dump(2) + "\n";
}

DatasetManifest DatasetManifest::from_json(const std::string& text) {
  DatasetManifest m;
  try {
    const auto j = nlohmann::json::parse(text);
    m.version = j.at("version").get<int>();
    m.sigma = j.at("sigma").get<double>();
    m.width = j.at("width").get<int>();
    m.height = j.at("height").get<int>();
    m.reconstruction = j.at("reconstruction").get<std::string>();
    for (int c = 0; c < 3; ++c) {
      m.image_mean[c] = j.at("image_mean").at(c).get<double>();
      m.image_std[c] = j.at("image_std").at(c).get<double>();
    }
    m.mask_density = j.value("mask_density", 0.0);
    for (const auto& e : j.at("frames")) {
      ManifestFrame f;
      f.id = e.at("id").get<int>();
      f.image = e.at("image").get<std::string>();
      f.depth = e.at("depth").get<std::string>();
      f.mask = e.at("mask").get<std::string>();
      f.depth_gt = e.value("depth_gt", std::string());
      m.frames.push_back(std::move(f));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("manifest: ") + e.what());
  }
  return m;
}

DatasetManifest generate_dataset(const SfmReconstruction& recon, const fs::path& frames_dir,
                                 const fs::path& out_dir, double sigma) {
  if (!(sigma > 0.0)) throw InputError("generate_dataset: sigma must be positive");
  std::error_code ec;
  for (const char* sub : {"frames", "depth", "mask"}) {
    fs::create_directories(out_dir / sub, ec);
    if (ec) throw WriteError("cannot create " + (out_dir / sub).string() + ": " + ec.message());
  }
  write_reconstruction(recon, out_dir / "sfm");

  const fs::path gt_dir = frames_dir.parent_path() / "depth_gt";
  const bool has_gt = fs::is_directory(gt_dir);
  if (has_gt) fs::create_directories(out_dir / "depth_gt", ec);

  DatasetManifest m;
  m.sigma = sigma;
  m.width = recon.intrinsics.width;
  m.height = recon.intrinsics.height;
  double sum[3] = {0, 0, 0};
  double sum_sq[3] = {0, 0, 0};
  std::size_t pixel_count = 0;
  std::size_t nonzero = 0;
  for (const auto& frame : recon.frames) {
    const std::string name = std::to_string(frame.id);
    ManifestFrame mf;
    mf.id = frame.id;
    mf.image = "frames/" + name + ".png";
    mf.depth = "depth/" + name + ".eda";
    mf.mask = "mask/" + name + ".eda";

    const fs::path src = frames_dir / (name + ".png");
    const Image image = read_png(src);
    if (image.rows() != m.height || image.cols() != m.width) {
      throw ValidationError(src.string() + ": image size does not match intrinsics");
    }
    for (std::size_t p = 0; p < image.pixels(); ++p) {
      for (int c = 0; c < 3; ++c) {
        const double v = image[p * 3 + c];
        sum[c] += v;
        sum_sq[c] += v * v;
      }
    }
    pixel_count += image.pixels();
    text::write_file(out_dir / mf.image, text::read_file(src));

    const auto sup = rasterize_frame(recon, frame.id, sigma);
    write_array(out_dir / mf.depth, sup.depth.values);
    write_array(out_dir / mf.mask, sup.mask.values);
    for (double w : sup.mask.values.values()) nonzero += w > 0.0;

    const fs::path gt = gt_dir / (name + ".eda");
    if (has_gt && fs::exists(gt)) {
      mf.depth_gt = "depth_gt/" + name + ".eda";
      text::write_file(out_dir / mf.depth_gt, text::read_file(gt));
    }
    m.frames.push_back(std::move(mf));
  }
  if (pixel_count > 0) {
    for (int c = 0; c < 3; ++c) {
      const double mean = sum[c] / pixel_count;
      m.image_mean[c] = mean;
      m.image_std[c] = std::sqrt(std::max(sum_sq[c] / pixel_count - mean * mean, 1e-12));
    }
    m.mask_density = static_cast<double>(nonzero) / pixel_count;
  }
  text::write_file(out_dir / "manifest.json", m.to_json());
  return m;
}

DatasetManifest load_manifest(const fs::path& dataset_dir) {
  return DatasetManifest::from_json(text::read_file(dataset_dir / "manifest.json"));
}

DatasetManifest build_dataset(const fs::path& raw_dir, const fs::path& out_dir, const PreprocessOptions& options) {
  if (options.smoothing_window < 0) throw InputError("build_dataset: smoothing window must be non-negative");
  SfmReconstruction recon = parse_reconstruction(raw_dir);
  if (options.filter) recon = filter_points(recon, options.neighbor_count, options.std_multiplier);
  recon = smooth_visibility(recon, options.smoothing_window);
  const double sigma = options.sigma > 0.0 ? options.sigma : recon.mean_track_length();
  return generate_dataset(recon, raw_dir / "frames", out_dir, sigma);
}

}  // namespace endodepth
