#include "endodepth/sfm_io.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <string>
#include <unordered_map>

#include "endodepth/errors.hpp"
#include "endodepth/text.hpp"

namespace endodepth {

namespace fs = std::filesystem;

std::optional<std::size_t> SfmReconstruction::frame_index(int frame_id) const {
  auto it = std::lower_bound(frames.begin(), frames.end(), frame_id,
                             [](const FrameRecord& f, int id) { return f.id < id; });
  if (it == frames.end() || it->id != frame_id) return std::nullopt;
  return static_cast<std::size_t>(it - frames.begin());
}

std::size_t SfmReconstruction::require_frame(int frame_id) const {
  auto idx = frame_index(frame_id);
  if (!idx) throw InputError("unknown frame id " + std::to_string(frame_id));
  return *idx;
}

double SfmReconstruction::mean_track_length() const {
  if (points.empty()) return 0.0;
  double sum = 0.0;
  for (const auto& p : points) sum += p.track_length;
  return sum / static_cast<double>(points.size());
}

void SfmReconstruction::recount_tracks() {
  const std::size_t nf = frames.size();
  for (std::size_t n = 0; n < points.size(); ++n) {
    int count = 0;
    for (std::size_t j = 0; j < nf; ++j) count += visibility[n * nf + j] != 0;
    points[n].track_length = count;
  }
}

void SfmReconstruction::validate() const {
  intrinsics.validate();
  for (std::size_t j = 0; j < frames.size(); ++j) {
    if (frames[j].id < 0) {
      throw ValidationError("frame id must be non-negative, got " + std::to_string(frames[j].id));
    }
    if (j > 0 && frames[j].id <= frames[j - 1].id) {
      throw ValidationError("frame ids must be unique and increasing (frame " +
                            std::to_string(frames[j].id) + ")");
    }
    try {
      frames[j].pose.validate();
    } catch (const ValidationError& e) {
      throw ValidationError("frame " + std::to_string(frames[j].id) + ": " + e.what());
    }
  }
  if (visibility.size() != points.size() * frames.size()) {
    throw ValidationError("visibility matrix has " + std::to_string(visibility.size()) +
                          " entries, expected " +
                          std::to_string(points.size() * frames.size()));
  }
  for (std::size_t n = 0; n < points.size(); ++n) {
    const auto& p = points[n];
    if (!p.position.allFinite()) {
      throw ValidationError("point " + std::to_string(p.id) + ": non-finite position");
    }
    if (p.track_length < 2) {
      throw ValidationError("point " + std::to_string(p.id) + ": track length " +
                            std::to_string(p.track_length) + " < 2");
    }
    int count = 0;
    for (std::size_t j = 0; j < frames.size(); ++j) count += visible(n, j);
    if (count != p.track_length) {
      throw ValidationError("point " + std::to_string(p.id) + ": track length " +
                            std::to_string(p.track_length) + " but visible in " +
                            std::to_string(count) + " frames");
    }
  }
}

namespace {

std::string where(const fs::path& file, int line) {
  return file.filename().string() + ":" + std::to_string(line);
}

CameraIntrinsics parse_intrinsics(const fs::path& file) {
  const auto content = text::read_file(file);
  const auto lines = text::data_lines(content);
  if (lines.size() != 1 || lines[0].tokens.size() != 6) {
    throw ValidationError(file.filename().string() + ": expected one line 'fx fy cx cy W H'");
  }
  const auto& t = lines[0].tokens;
  const auto ctx = where(file, lines[0].number);
  CameraIntrinsics k;
  k.fx = text::parse_real(t[0], ctx);
  k.fy = text::parse_real(t[1], ctx);
  k.cx = text::parse_real(t[2], ctx);
  k.cy = text::parse_real(t[3], ctx);
  k.width = static_cast<int>(text::parse_int(t[4], ctx));
  k.height = static_cast<int>(text::parse_int(t[5], ctx));
  k.validate();
  return k;
}

std::vector<FrameRecord> parse_poses(const fs::path& file) {
  const auto content = text::read_file(file);
  std::vector<FrameRecord> frames;
  for (const auto& line : text::data_lines(content)) {
    const auto ctx = where(file, line.number);
    const auto& t = line.tokens;
    FrameRecord rec;
    if (t.empty()) continue;
    const long long id = text::parse_int(t[0], ctx);
    if (id < 0 || id > std::numeric_limits<int>::max()) {
      throw ValidationError(ctx + ": frame id out of range");
    }
    rec.id = static_cast<int>(id);
    if (t.size() == 8) {
      Eigen::Quaterniond q(text::parse_real(t[1], ctx), text::parse_real(t[2], ctx),
                           text::parse_real(t[3], ctx), text::parse_real(t[4], ctx));
      const double norm = q.norm();
      if (!std::isfinite(norm) || std::abs(norm - 1.0) > 1e-6) {
        throw ValidationError(ctx + ": frame " + std::to_string(rec.id) +
                              " quaternion is not unit length (norm " + std::to_string(norm) +
                              ")");
      }
      const Vec3 tr(text::parse_real(t[5], ctx), text::parse_real(t[6], ctx),
                    text::parse_real(t[7], ctx));
      rec.pose = CameraPose::from_quaternion(q, tr);
    } else if (t.size() == 13) {
      // Row-major rotation matrix followed by translation.
      for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 3; ++c) rec.pose.rotation(r, c) = text::parse_real(t[1 + 3 * r + c], ctx);
      rec.pose.translation =
          Vec3(text::parse_real(t[10], ctx), text::parse_real(t[11], ctx), text::parse_real(t[12], ctx));
    } else {
      throw ValidationError(ctx + ": expected 'frame_id qw qx qy qz tx ty tz'");
    }
    try {
      rec.pose.validate();
    } catch (const ValidationError& e) {
      throw ValidationError(ctx + ": frame " + std::to_string(rec.id) + ": " + e.what());
    }
    frames.push_back(rec);
  }
  return frames;
}

}  // namespace

SfmReconstruction parse_reconstruction(const fs::path& dir) {
  SfmReconstruction recon;
  recon.intrinsics = parse_intrinsics(dir / "intrinsics.txt");
  recon.frames = parse_poses(dir / "poses.txt");

  const fs::path points_file = dir / "points.txt";
  const auto points_content = text::read_file(points_file);
  std::unordered_map<std::int64_t, std::size_t> point_row;
  for (const auto& line : text::data_lines(points_content)) {
    const auto ctx = where(points_file, line.number);
    if (line.tokens.size() != 5) {
      throw ValidationError(ctx + ": expected 'point_id x y z track_length'");
    }
    SparsePoint p;
    p.id = text::parse_int(line.tokens[0], ctx);
    p.position = Vec3(text::parse_real(line.tokens[1], ctx), text::parse_real(line.tokens[2], ctx),
                      text::parse_real(line.tokens[3], ctx));
    p.track_length = static_cast<int>(text::parse_int(line.tokens[4], ctx));
    if (!point_row.emplace(p.id, recon.points.size()).second) {
      throw ValidationError(ctx + ": duplicate point id " + std::to_string(p.id));
    }
    recon.points.push_back(p);
  }

  // Frame ordering is checked before visibility lookups rely on it.
  for (std::size_t j = 1; j < recon.frames.size(); ++j) {
    if (recon.frames[j].id <= recon.frames[j - 1].id) {
      throw ValidationError("poses.txt: frame ids must be unique and sorted (frame " +
                            std::to_string(recon.frames[j].id) + ")");
    }
  }

  const fs::path vis_file = dir / "visibility.txt";
  const auto vis_content = text::read_file(vis_file);
  recon.visibility.assign(recon.points.size() * recon.frames.size(), 0);
  std::vector<std::uint8_t> seen(recon.points.size(), 0);
  for (const auto& line : text::data_lines(vis_content)) {
    const auto ctx = where(vis_file, line.number);
    const auto id = text::parse_int(line.tokens[0], ctx);
    auto it = point_row.find(id);
    if (it == point_row.end()) {
      throw ValidationError(ctx + ": visibility for unknown point " + std::to_string(id));
    }
    if (seen[it->second]) {
      throw ValidationError(ctx + ": duplicate visibility line for point " + std::to_string(id));
    }
    seen[it->second] = 1;
    for (std::size_t i = 1; i < line.tokens.size(); ++i) {
      const auto fid = text::parse_int(line.tokens[i], ctx);
      auto idx = recon.frame_index(static_cast<int>(fid));
      if (fid < 0 || !idx) {
        throw ValidationError(ctx + ": point " + std::to_string(id) + " references unknown frame " +
                              std::to_string(fid));
      }
      recon.set_visible(it->second, *idx, true);
    }
  }
  for (std::size_t n = 0; n < seen.size(); ++n) {
    if (!seen[n]) {
      throw ValidationError("visibility.txt: no line for point " +
                            std::to_string(recon.points[n].id));
    }
  }
  recon.validate();
  return recon;
}

void write_reconstruction(const SfmReconstruction& recon, const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw WriteError("cannot create " + dir.string() + ": " + ec.message());
  using text::format_real;

  const auto& k = recon.intrinsics;
  text::write_file(dir / "intrinsics.txt",
                   "# fx fy cx cy W H\n" + format_real(k.fx) + " " + format_real(k.fy) + " " +
                       format_real(k.cx) + " " + format_real(k.cy) + " " +
                       std::to_string(k.width) + " " + std::to_string(k.height) + "\n");

  std::string poses = "# frame_id qw qx qy qz tx ty tz (world-to-camera)\n";
  for (const auto& f : recon.frames) {
    const auto q = f.pose.quaternion();
    const auto& t = f.pose.translation;
    poses += std::to_string(f.id) + " " + format_real(q.w()) + " " + format_real(q.x()) + " " +
             format_real(q.y()) + " " + format_real(q.z()) + " " + format_real(t.x()) + " " +
             format_real(t.y()) + " " + format_real(t.z()) + "\n";
  }
  text::write_file(dir / "poses.txt", poses);

  std::string points = "# point_id x y z track_length\n";
  std::string vis = "# point_id frame_ids...\n";
  for (std::size_t n = 0; n < recon.points.size(); ++n) {
    const auto& p = recon.points[n];
    points += std::to_string(p.id) + " " + format_real(p.position.x()) + " " +
              format_real(p.position.y()) + " " + format_real(p.position.z()) + " " +
              std::to_string(p.track_length) + "\n";
    vis += std::to_string(p.id);
    for (std::size_t j = 0; j < recon.frames.size(); ++j) {
      if (recon.visible(n, j)) vis += " " + std::to_string(recon.frames[j].id);
    }
    vis += "\n";
  }
  text::write_file(dir / "points.txt", points);
  text::write_file(dir / "visibility.txt", vis);
}

SfmReconstruction filter_points(const SfmReconstruction& recon, int neighbor_count,
                                double std_multiplier) {
  if (neighbor_count < 1) throw InputError("filter_points: neighbor_count must be >= 1");
  const std::size_t n = recon.points.size();
  if (n < static_cast<std::size_t>(neighbor_count) + 1) {
    throw InputError("filter_points: need at least " + std::to_string(neighbor_count + 1) +
                     " points, have " + std::to_string(n));
  }

  std::vector<double> mean_dist(n);
  std::vector<double> dists(n - 1);
  for (std::size_t a = 0; a < n; ++a) {
    std::size_t m = 0;
    for (std::size_t b = 0; b < n; ++b) {
      if (a == b) continue;
      dists[m++] = (recon.points[a].position - recon.points[b].position).norm();
    }
    std::nth_element(dists.begin(), dists.begin() + (neighbor_count - 1), dists.end());
    std::sort(dists.begin(), dists.begin() + neighbor_count);
    mean_dist[a] = std::accumulate(dists.begin(), dists.begin() + neighbor_count, 0.0) / neighbor_count;
  }
  const double mean = std::accumulate(mean_dist.begin(), mean_dist.end(), 0.0) / n;
  double var = 0.0;
  for (double d : mean_dist) var += (d - mean) * (d - mean);
  const double stddev = std::sqrt(var / n);
  const double threshold = mean + std_multiplier * stddev;

  SfmReconstruction out;
  out.intrinsics = recon.intrinsics;
  out.frames = recon.frames;
  const std::size_t nf = recon.frames.size();
  for (std::size_t a = 0; a < n; ++a) {
    if (mean_dist[a] > threshold) continue;
    out.points.push_back(recon.points[a]);
    out.visibility.insert(out.visibility.end(), recon.visibility.begin() + a * nf,
                          recon.visibility.begin() + (a + 1) * nf);
  }
  return out;
}

SfmReconstruction smooth_visibility(const SfmReconstruction& recon, int window) {
  if (window < 0) throw InputError("smooth_visibility: window must be >= 0");
  SfmReconstruction out = recon;
  if (window == 0) return out;
  const std::size_t nf = recon.frames.size();
  const auto& k = recon.intrinsics;
  for (std::size_t n = 0; n < recon.points.size(); ++n) {
    // Prefix counts over the original row give O(1) window queries.
    std::vector<int> prefix(nf + 1, 0);
    for (std::size_t j = 0; j < nf; ++j) prefix[j + 1] = prefix[j] + recon.visible(n, j);
    for (std::size_t j = 0; j < nf; ++j) {
      if (recon.visible(n, j)) continue;
      const std::size_t lo = j >= static_cast<std::size_t>(window) ? j - window : 0;
      const std::size_t hi = std::min(nf - 1, j + static_cast<std::size_t>(window));
      if (prefix[hi + 1] - prefix[lo] == 0) continue;
      const Vec3 cam = recon.frames[j].pose.apply(recon.points[n].position);
      if (!(cam.z() > 1e-12)) continue;
      int col = 0, row = 0;
      const double u = k.fx * (cam.x() / cam.z()) + k.cx;
      const double v = k.fy * (cam.y() / cam.z()) + k.cy;
      if (!rounded_pixel(k, u, v, col, row)) continue;
      out.set_visible(n, j, true);
    }
  }
  out.recount_tracks();
  return out;
}

Projection project_point(const CameraIntrinsics& intrinsics, const CameraPose& pose,
                         const SparsePoint& point) {
  return project_point(intrinsics, pose, point.position);
}

}  // namespace endodepth
