#include <pybind11/eigen.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "endodepth/depth_model.hpp"
#include "endodepth/geom_layers.hpp"
#include "endodepth/gradcheck.hpp"
#include "endodepth/losses.hpp"
#include "endodepth/sfm_io.hpp"
#include "endodepth/sparse_supervision.hpp"
#include "endodepth/synthetic.hpp"
#include "endodepth/train_eval.hpp"

namespace py = pybind11;
using namespace endodepth;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

template <typename T>
py::array_t<T> to_numpy(const Grid<T>& g) {
  std::vector<py::ssize_t> shape{g.rows(), g.cols()};
  if (g.channels() > 1) shape.push_back(g.channels());
  py::array_t<T> out(shape);
  std::copy(g.storage().begin(), g.storage().end(), out.mutable_data());
  return out;
}

RealGrid to_grid(const Array& a) {
  if (a.ndim() != 2 && a.ndim() != 3) throw InputError("expected a 2-D or 3-D array");
  const int channels = a.ndim() == 3 ? static_cast<int>(a.shape(2)) : 1;
  RealGrid g(static_cast<int>(a.shape(0)), static_cast<int>(a.shape(1)), channels);
  std::copy(a.data(), a.data() + g.size(), g.storage().begin());
  return g;
}

MaskGrid to_mask(const py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>& a) {
  if (a.ndim() != 2) throw InputError("expected a 2-D mask");
  MaskGrid g(static_cast<int>(a.shape(0)), static_cast<int>(a.shape(1)));
  std::copy(a.data(), a.data() + g.size(), g.storage().begin());
  return g;
}

Image to_image(const py::array_t<float, py::array::c_style | py::array::forcecast>& a) {
  if (a.ndim() != 3 || a.shape(2) != 3) throw InputError("expected an HxWx3 image");
  Image g(static_cast<int>(a.shape(0)), static_cast<int>(a.shape(1)), 3);
  std::copy(a.data(), a.data() + g.size(), g.storage().begin());
  return g;
}

// Depth maps cross the boundary as a float array; non-positive or
// non-finite entries are invalid.
DepthMap to_depth(const Array& a) {
  RealGrid v = to_grid(a);
  MaskGrid m(v.rows(), v.cols());
  for (std::size_t i = 0; i < v.size(); ++i) m[i] = std::isfinite(v[i]) && v[i] > 0.0 ? 1 : 0;
  return DepthMap(std::move(v), std::move(m));
}

py::array_t<double> depth_to_numpy(const DepthMap& d) {
  RealGrid v = d.values;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (!d.valid[i]) v[i] = std::numeric_limits<double>::quiet_NaN();
  }
  return to_numpy(v);
}

py::dict metrics_dict(const EvalMetrics& m) {
  py::dict d;
  d["abs_rel"] = m.abs_rel;
  d["thresh_1_25"] = m.thresh_1_25;
  d["thresh_1_25_sq"] = m.thresh_1_25_sq;
  d["thresh_1_25_cu"] = m.thresh_1_25_cu;
  d["n_valid"] = m.n_valid;
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Depth estimation from sparse structure-from-motion supervision";

  auto base = py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
  py::register_exception<LoadError>(m, "LoadError", base.ptr());
  py::register_exception<ValidationError>(m, "ValidationError", base.ptr());
  py::register_exception<InputError>(m, "InputError", base.ptr());
  py::register_exception<WriteError>(m, "WriteError", base.ptr());
  py::register_exception<NumericalError>(m, "NumericalError", base.ptr());
  py::register_exception<EmptySupportError>(m, "EmptySupportError", base.ptr());

  py::class_<CameraIntrinsics>(m, "CameraIntrinsics")
      .def(py::init([](double fx, double fy, double cx, double cy, int width, int height) {
             CameraIntrinsics k{fx, fy, cx, cy, width, height};
             k.validate();
             return k;
           }),
           py::arg("fx"), py::arg("fy"), py::arg("cx"), py::arg("cy"), py::arg("width"), py::arg("height"))
      .def_readwrite("fx", &CameraIntrinsics::fx)
      .def_readwrite("fy", &CameraIntrinsics::fy)
      .def_readwrite("cx", &CameraIntrinsics::cx)
      .def_readwrite("cy", &CameraIntrinsics::cy)
      .def_readwrite("width", &CameraIntrinsics::width)
      .def_readwrite("height", &CameraIntrinsics::height)
      .def("matrix", &CameraIntrinsics::matrix);

  py::class_<CameraPose>(m, "CameraPose")
      .def(py::init([](const Mat3& r, const Vec3& t) { return CameraPose{r, t}; }), py::arg("rotation"),
           py::arg("translation"))
      .def_readwrite("rotation", &CameraPose::rotation)
      .def_readwrite("translation", &CameraPose::translation)
      .def("center", &CameraPose::center);

  py::class_<RelativeTransform>(m, "RelativeTransform")
      .def(py::init([](const Mat3& r, const Vec3& t) {
             RelativeTransform rel;
             rel.rotation = r;
             rel.translation = t;
             return rel;
           }),
           py::arg("rotation"), py::arg("translation"))
      .def_readwrite("rotation", &RelativeTransform::rotation)
      .def_readwrite("translation", &RelativeTransform::translation)
      .def("inverse", &RelativeTransform::inverse);

  m.def("relative_transform",
        [](const CameraPose& j, const CameraPose& k) { return relative_transform(j, k); });

  py::class_<SfmReconstruction>(m, "SfmReconstruction")
      .def_readonly("intrinsics", &SfmReconstruction::intrinsics)
      .def_property_readonly("frame_ids",
                             [](const SfmReconstruction& r) {
                               std::vector<int> ids;
                               for (const auto& f : r.frames) ids.push_back(f.id);
                               return ids;
                             })
      .def_property_readonly("poses",
                             [](const SfmReconstruction& r) {
                               std::vector<CameraPose> poses;
                               for (const auto& f : r.frames) poses.push_back(f.pose);
                               return poses;
                             })
      .def_property_readonly("points",
                             [](const SfmReconstruction& r) {
                               py::array_t<double> out({static_cast<py::ssize_t>(r.points.size()), py::ssize_t{3}});
                               auto a = out.mutable_unchecked<2>();
                               for (std::size_t i = 0; i < r.points.size(); ++i) {
                                 for (int c = 0; c < 3; ++c) a(i, c) = r.points[i].position[c];
                               }
                               return out;
                             })
      .def_property_readonly("track_lengths",
                             [](const SfmReconstruction& r) {
                               std::vector<int> t;
                               for (const auto& p : r.points) t.push_back(p.track_length);
                               return t;
                             })
      .def_property_readonly("visibility",
                             [](const SfmReconstruction& r) {
                               py::array_t<std::uint8_t> out(
                                   {static_cast<py::ssize_t>(r.point_count()), static_cast<py::ssize_t>(r.frame_count())});
                               std::copy(r.visibility.begin(), r.visibility.end(), out.mutable_data());
                               return out;
                             })
      .def("mean_track_length", &SfmReconstruction::mean_track_length);

  m.def("parse_reconstruction", &parse_reconstruction, py::arg("directory"));
  m.def("write_reconstruction", &write_reconstruction, py::arg("reconstruction"), py::arg("directory"));
  m.def("filter_points", &filter_points, py::arg("reconstruction"), py::arg("neighbor_count") = 16,
        py::arg("std_multiplier") = 2.0);
  m.def("smooth_visibility", &smooth_visibility, py::arg("reconstruction"), py::arg("window"));

  m.def("soft_weight", &soft_weight, py::arg("track_length"), py::arg("sigma"));
  m.def(
      "rasterize_frame",
      [](const SfmReconstruction& r, int frame, double sigma) {
        const auto s = rasterize_frame(r, frame, sigma);
        return py::make_tuple(to_numpy(s.depth.values), to_numpy(s.mask.values));
      },
      py::arg("reconstruction"), py::arg("frame_id"), py::arg("sigma"),
      "Returns (sparse_depth, soft_mask) arrays of shape HxW.");
  m.def(
      "rasterize_flow",
      [](const SfmReconstruction& r, int j, int k) {
        const auto f = rasterize_flow(r, j, k);
        return py::make_tuple(to_numpy(f.values), to_numpy(f.support));
      },
      py::arg("reconstruction"), py::arg("frame_j"), py::arg("frame_k"),
      "Returns (flow HxWx2, support HxW).");
  m.def(
      "build_dataset",
      [](const std::filesystem::path& raw, const std::filesystem::path& out, double sigma) {
        PreprocessOptions o;
        o.sigma = sigma;
        return build_dataset(raw, out, o).to_json();
      },
      py::arg("raw_dir"), py::arg("out_dir"), py::arg("sigma") = 0.0, "Returns the manifest as JSON text.");

  m.def(
      "scale_depth",
      [](const Array& pred, const Array& sparse, const Array& mask, double eps) {
        const auto s = scale_depth(to_depth(pred), to_grid(sparse), to_grid(mask), eps);
        return py::make_tuple(depth_to_numpy(s.depth), s.scale);
      },
      py::arg("prediction"), py::arg("sparse_depth"), py::arg("mask"), py::arg("epsilon") = kDepthFloor,
      "Returns (scaled_depth, scale).");
  m.def(
      "flow_from_depth",
      [](const Array& depth, const RelativeTransform& rel, const CameraIntrinsics& k) {
        const auto f = flow_from_depth(to_depth(depth), rel, k);
        return py::make_tuple(to_numpy(f.flow.values), to_numpy(f.flow.valid));
      },
      py::arg("depth"), py::arg("relative"), py::arg("intrinsics"), "Returns (flow HxWx2, valid HxW).");
  m.def(
      "bilinear_sample",
      [](const Array& grid, const Array& coords) {
        const auto s = bilinear_sample(to_grid(grid), to_grid(coords));
        return py::make_tuple(to_numpy(s.values), to_numpy(s.in_bounds));
      },
      py::arg("grid"), py::arg("coords"));
  m.def(
      "warp_depth",
      [](const Array& dj, const Array& dk, const RelativeTransform& rel_jk, const CameraIntrinsics& k) {
        const auto w = warp_depth(to_depth(dj), to_depth(dk), rel_jk, rel_jk.inverse(), k);
        return depth_to_numpy(w.warped);
      },
      py::arg("depth_j"), py::arg("depth_k"), py::arg("relative_jk"), py::arg("intrinsics"),
      "Frame k depth resampled onto frame j; NaN outside the overlap.");

  m.def(
      "sparse_flow_loss",
      [](const Array& djk, const Array& dkj, const Array& sjk, const Array& skj, const Array& mj, const Array& mk) {
        FlowField a{to_grid(djk), MaskGrid(), -1, -1};
        FlowField b{to_grid(dkj), MaskGrid(), -1, -1};
        a.valid = MaskGrid(a.values.rows(), a.values.cols(), 1, 1);
        b.valid = MaskGrid(b.values.rows(), b.values.cols(), 1, 1);
        return sparse_flow_loss(a, b, to_grid(sjk), to_grid(skj), to_grid(mj), to_grid(mk));
      },
      py::arg("dense_jk"), py::arg("dense_kj"), py::arg("sparse_jk"), py::arg("sparse_kj"), py::arg("mask_j"),
      py::arg("mask_k"));
  m.def(
      "depth_consistency_loss",
      [](const Array& dj, const Array& dk, const Array& wkj, const Array& wjk, const py::array_t<std::uint8_t>& ojk,
         const py::array_t<std::uint8_t>& okj) {
        return depth_consistency_loss(to_grid(dj), to_grid(dk), to_grid(wkj), to_grid(wjk), to_mask(ojk),
                                      to_mask(okj));
      },
      py::arg("depth_j"), py::arg("depth_k"), py::arg("warped_kj"), py::arg("warped_jk"), py::arg("overlap_jk"),
      py::arg("overlap_kj"));

  m.def(
      "compute_metrics",
      [](const std::vector<double>& est, const std::vector<double>& ref) { return metrics_dict(compute_metrics(est, ref)); },
      py::arg("estimate"), py::arg("reference"));
  m.def(
      "evaluate_sparse",
      [](const Array& pred, const Array& sparse, const Array& mask) {
        return metrics_dict(evaluate_sparse(to_depth(pred), to_grid(sparse), to_grid(mask)));
      },
      py::arg("prediction"), py::arg("sparse_depth"), py::arg("mask"));

  py::class_<DepthNet>(m, "DepthNet")
      .def(py::init([](int height, int width, int levels, int base, int max, bool dense, std::uint64_t seed) {
             ModelConfig c;
             c.height = height;
             c.width = width;
             c.levels = levels;
             c.base_channels = base;
             c.max_channels = max;
             c.dense_blocks = dense;
             c.seed = seed;
             return build_model(c);
           }),
           py::arg("height") = 64, py::arg("width") = 80, py::arg("levels") = 4, py::arg("base_channels") = 16,
           py::arg("max_channels") = 64, py::arg("dense_blocks") = false, py::arg("seed") = 20190220)
      .def_static("load", &load_model, py::arg("checkpoint"))
      .def("parameter_count", &DepthNet::parameter_count)
      .def("architecture", &DepthNet::architecture)
      .def(
          "predict",
          [](DepthNet& net, const py::array_t<float, py::array::c_style | py::array::forcecast>& image) {
            const Image img = to_image(image);
            DepthMap d;
            {
              py::gil_scoped_release release;
              d = net.predict(img);
            }
            return depth_to_numpy(d);
          },
          py::arg("image"), "Unscaled depth for an HxWx3 image in [0,1].");

  auto synth = m.def_submodule("synth", "Procedural cavity scenes");
  py::class_<synth::SceneBundle>(synth, "Scene")
      .def(py::init([](std::uint64_t seed, std::uint64_t trajectory_seed, int frames) {
             synth::SceneConfig c;
             c.frames = frames;
             return synth::make_scene(seed, c, trajectory_seed);
           }),
           py::arg("seed") = 20190220, py::arg("trajectory_seed") = 20190220, py::arg("frames") = 200)
      .def_property_readonly("poses", [](const synth::SceneBundle& b) { return b.trajectory.poses; })
      .def(
          "render",
          [](const synth::SceneBundle& b, int frame, const CameraIntrinsics& k) {
            const auto f = synth::render_frame(b.scene, b.trajectory.poses.at(frame), k);
            return py::make_tuple(to_numpy(f.image), depth_to_numpy(f.depth));
          },
          py::arg("frame"), py::arg("intrinsics"), "Returns (image HxWx3, depth HxW with NaN misses).");
  synth.def("default_intrinsics", &synth::default_intrinsics, py::arg("height") = 64, py::arg("width") = 80);
  synth.def(
      "write_dataset",
      [](const std::filesystem::path& dir, std::uint64_t seed, std::uint64_t trajectory_seed, int frames) {
        synth::DatasetOptions o;
        o.seed = seed;
        o.trajectory_seed = trajectory_seed;
        o.sfm.seed = seed;
        o.scene.frames = frames;
        synth::write_dataset(dir, o);
      },
      py::arg("directory"), py::arg("seed") = 20190220, py::arg("trajectory_seed") = 20190220,
      py::arg("frames") = 200);

  m.def(
      "run_gradient_suite",
      [](int instances, std::uint64_t seed) {
        GradCheckOptions o;
        o.instances = instances;
        o.seed = seed;
        py::list out;
        for (const auto& r : run_gradient_suite(o)) {
          py::dict d;
          d["name"] = r.name;
          d["passed"] = r.passed;
          d["max_rel_error"] = r.max_rel_error;
          d["checked"] = r.checked;
          d["skipped"] = r.skipped;
          out.append(d);
        }
        return out;
      },
      py::arg("instances") = 50, py::arg("seed") = 20190220);
}
