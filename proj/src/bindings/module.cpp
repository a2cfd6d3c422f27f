#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "coopadapt/config.hpp"
#include "coopadapt/dataset.hpp"
#include "coopadapt/evaluation.hpp"
#include "coopadapt/grl.hpp"
#include "coopadapt/synthgen.hpp"
#include "coopadapt/training.hpp"

namespace py = pybind11;
using namespace coopadapt;

namespace {

Pose pose_from_array(const py::array_t<double>& arr) {
  const auto buf = arr.unchecked<2>();
  if (buf.shape(0) != 4 || buf.shape(1) != 4) {
    throw std::invalid_argument("pose must be a 4x4 array");
  }
  Eigen::Matrix4d m;
  for (int r = 0; r < 4; ++r) {
    for (int c = 0; c < 4; ++c) m(r, c) = buf(r, c);
  }
  return Pose::from_matrix(m);
}

py::array_t<double> pose_to_array(const Pose& p) {
  py::array_t<double> out({4, 4});
  auto buf = out.mutable_unchecked<2>();
  for (int r = 0; r < 4; ++r) {
    for (int c = 0; c < 4; ++c) buf(r, c) = p.matrix(r, c);
  }
  return out;
}

PointCloud cloud_from_array(const py::array_t<double>& arr) {
  const auto buf = arr.unchecked<2>();
  if (buf.shape(1) != 4) throw std::invalid_argument("point cloud must be N x 4");
  PointCloud c;
  c.points.reserve(static_cast<std::size_t>(buf.shape(0)));
  for (py::ssize_t i = 0; i < buf.shape(0); ++i) {
    c.points.push_back({buf(i, 0), buf(i, 1), buf(i, 2), buf(i, 3)});
  }
  return c;
}

py::array_t<double> cloud_to_array(const PointCloud& c) {
  py::array_t<double> out({static_cast<py::ssize_t>(c.size()), static_cast<py::ssize_t>(4)});
  auto buf = out.mutable_unchecked<2>();
  for (py::ssize_t i = 0; i < static_cast<py::ssize_t>(c.size()); ++i) {
    const auto& p = c.points[static_cast<std::size_t>(i)];
    buf(i, 0) = p.x;
    buf(i, 1) = p.y;
    buf(i, 2) = p.z;
    buf(i, 3) = p.intensity;
  }
  return out;
}

Box box_from_row(const double* row, bool with_score) {
  Box b;
  b.center = Eigen::Vector3d(row[0], row[1], row[2]);
  b.size = Eigen::Vector3d(row[3], row[4], row[5]);
  b.yaw = row[6];
  if (with_score) b.score = row[7];
  return b;
}

BoxSet boxes_from_array(const py::array_t<double>& arr) {
  const auto buf = arr.unchecked<2>();
  if (buf.shape(1) != 7 && buf.shape(1) != 8) {
    throw std::invalid_argument("boxes must be N x 7 (or N x 8 with scores)");
  }
  BoxSet out;
  for (py::ssize_t i = 0; i < buf.shape(0); ++i) {
    std::array<double, 8> row{};
    for (py::ssize_t c = 0; c < buf.shape(1); ++c) row[static_cast<std::size_t>(c)] = buf(i, c);
    out.push_back(box_from_row(row.data(), buf.shape(1) == 8));
  }
  return out;
}

py::array_t<double> boxes_to_array(const BoxSet& boxes) {
  py::array_t<double> out({static_cast<py::ssize_t>(boxes.size()), static_cast<py::ssize_t>(8)});
  auto buf = out.mutable_unchecked<2>();
  for (py::ssize_t i = 0; i < static_cast<py::ssize_t>(boxes.size()); ++i) {
    const auto& b = boxes[static_cast<std::size_t>(i)];
    buf(i, 0) = b.center(0);
    buf(i, 1) = b.center(1);
    buf(i, 2) = b.center(2);
    buf(i, 3) = b.size(0);
    buf(i, 4) = b.size(1);
    buf(i, 5) = b.size(2);
    buf(i, 6) = b.yaw;
    buf(i, 7) = b.score.value_or(0.0);
  }
  return out;
}

py::dict report_to_dict(const evaluation::EvalReport& report) {
  py::dict ap;
  for (const auto& [t, v] : report.ap_by_threshold) ap[py::float_(t)] = v;
  py::dict out;
  out["ap"] = ap;
  out["n_frames"] = report.n_frames;
  out["n_gts"] = report.n_gts;
  out["n_preds"] = report.n_preds;
  out["checkpoint"] = report.checkpoint;
  out["dataset"] = report.dataset;
  return out;
}

}  // namespace

PYBIND11_MODULE(_coopadapt, m) {
  m.doc() = "collaborative-detection domain adaptation core";

  // ---- geometry ----
  m.def("pose_inverse",
        [](const py::array_t<double>& p) { return pose_to_array(pose_inverse(pose_from_array(p))); },
        py::arg("pose"), "Invert a rigid 4x4 pose.");
  m.def("compose",
        [](const py::array_t<double>& a, const py::array_t<double>& b) {
          return pose_to_array(compose(pose_from_array(a), pose_from_array(b)));
        },
        py::arg("a"), py::arg("b"));
  m.def("project_to_ego",
        [](const py::array_t<double>& cloud, const py::array_t<double>& t_agent,
           const py::array_t<double>& t_ego) {
          return cloud_to_array(
              project_to_ego(cloud_from_array(cloud), pose_from_array(t_agent), pose_from_array(t_ego)));
        },
        py::arg("points"), py::arg("t_agent"), py::arg("t_ego"),
        "Project an N x 4 cloud from an agent frame into the ego frame.");
  m.def("transform_boxes",
        [](const py::array_t<double>& boxes, const py::array_t<double>& t_from,
           const py::array_t<double>& t_to) {
          return boxes_to_array(
              transform_boxes(boxes_from_array(boxes), pose_from_array(t_from), pose_from_array(t_to)));
        },
        py::arg("boxes"), py::arg("t_from"), py::arg("t_to"));

  // ---- evaluation primitives ----
  m.def("bev_iou",
        [](const py::array_t<double>& a, const py::array_t<double>& b) {
          const auto ba = boxes_from_array(a);
          const auto bb = boxes_from_array(b);
          if (ba.size() != 1 || bb.size() != 1) {
            throw std::invalid_argument("bev_iou expects single boxes (1 x 7 arrays)");
          }
          return evaluation::bev_iou(ba[0], bb[0]);
        },
        py::arg("a"), py::arg("b"), "Rotated BEV IoU of two boxes given as 1 x 7 arrays.");
  m.def("average_precision",
        [](const std::vector<std::pair<double, bool>>& preds, int n_gt) {
          evaluation::MatchResult frame;
          frame.preds = preds;
          frame.n_gt = n_gt;
          return evaluation::average_precision({frame});
        },
        py::arg("scored_matches"), py::arg("n_gt"),
        "All-point AP from (score, is_tp) pairs against n_gt ground truths.");

  // ---- gradient reversal ----
  m.def("grl_backward",
        [](const py::array_t<double>& upstream, double gamma) {
          const grl::GrlFactor f(gamma);
          py::array_t<double> out(upstream.request().shape);
          const auto in = upstream.unchecked();
          auto ob = out.mutable_unchecked();
          for (py::ssize_t i = 0; i < in.size(); ++i) {
            ob.mutable_data()[i] = f.gamma * in.data()[i];
          }
          return out;
        },
        py::arg("upstream"), py::arg("gamma"),
        "Backward rule of the gradient reversal layer: gamma * upstream.");

  // ---- synthetic data ----
  m.def("generate_dataset",
        [](const std::string& profile, int frames, const std::string& out, std::uint64_t seed,
           const std::string& profile_file) {
          const synthgen::DomainProfile p = profile_file.empty()
                                                ? synthgen::builtin_profile(profile)
                                                : synthgen::load_profile_file(profile_file);
          const auto manifest = synthgen::generate_dataset(p, frames, out, seed);
          py::dict d;
          d["root"] = manifest.root;
          d["domain"] = manifest.domain;
          d["n_frames"] = manifest.n_frames;
          d["seed"] = manifest.seed;
          d["profile_hash"] = manifest.profile_hash;
          return d;
        },
        py::arg("profile") = "synthetic_sim", py::arg("frames") = 8, py::arg("out"),
        py::arg("seed") = 0, py::arg("profile_file") = "");
  m.def("builtin_profile_json",
        [](const std::string& name) { return synthgen::profile_to_json_string(synthgen::builtin_profile(name)); },
        py::arg("name"));

  // ---- training / evaluation workflows ----
  m.def("pretrain",
        [](const std::string& config_path, const std::string& run_dir, const std::string& from,
           int start_epoch) {
          const ExperimentConfig cfg = config_from_file(config_path);
          const Dataset source = Dataset::open(cfg.source_dataset);
          return training::pretrain_source(cfg, source, run_dir, from, start_epoch).checkpoint_dir;
        },
        py::arg("config"), py::arg("run_dir"), py::arg("from_checkpoint") = "",
        py::arg("start_epoch") = 0);
  m.def("adapt",
        [](const std::string& config_path, const std::string& method, const std::string& from,
           const std::string& run_dir) {
          const ExperimentConfig cfg = config_from_file(config_path);
          const Dataset target = Dataset::open(cfg.target_dataset);
          if (method == "dusa") {
            const Dataset source = Dataset::open(cfg.source_dataset);
            return training::adapt_dusa(cfg, from, source, target, run_dir).checkpoint_dir;
          }
          if (method == "discriminator") {
            const Dataset source = Dataset::open(cfg.source_dataset);
            return training::baseline_naive_discriminator(cfg, from, source, target, run_dir)
                .checkpoint_dir;
          }
          if (method == "self-train") {
            return training::baseline_self_training(cfg, from, target, nullptr, run_dir)
                .checkpoint_dir;
          }
          throw std::invalid_argument("unknown adaptation method: " + method);
        },
        py::arg("config"), py::arg("method"), py::arg("from_checkpoint"), py::arg("run_dir"));
  m.def("evaluate",
        [](const std::string& config_path, const std::string& checkpoint,
           const std::string& dataset, const std::vector<double>& thresholds) {
          const ExperimentConfig cfg = config_from_file(config_path);
          const Dataset ds = Dataset::open(dataset);
          const auto report = evaluation::evaluate(
              cfg, checkpoint, ds, thresholds.empty() ? cfg.eval.thresholds : thresholds);
          return report_to_dict(report);
        },
        py::arg("config"), py::arg("checkpoint"), py::arg("dataset"),
        py::arg("thresholds") = std::vector<double>{});
  m.def("domain_probe_accuracy",
        [](const std::string& config_path, const std::string& checkpoint, int probe_steps,
           std::uint64_t probe_seed) {
          const ExperimentConfig cfg = config_from_file(config_path);
          const Dataset source = Dataset::open(cfg.source_dataset);
          const Dataset target = Dataset::open(cfg.target_dataset);
          return training::domain_probe_accuracy(cfg, checkpoint, source, target, probe_steps,
                                                 probe_seed);
        },
        py::arg("config"), py::arg("checkpoint"), py::arg("probe_steps") = 300,
        py::arg("probe_seed") = 7);
}
