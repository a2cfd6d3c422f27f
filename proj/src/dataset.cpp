#include "coopadapt/dataset.hpp"

#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <stdexcept>

namespace fs = std::filesystem;
using nlohmann::json;

namespace coopadapt {

namespace {

json read_json(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open: " + path.string());
  json j;
  is >> j;
  return j;
}

}  // namespace

Dataset Dataset::open(const std::string& root) {
  const json manifest = read_json(fs::path(root) / "manifest.json");
  Dataset ds;
  ds.root_ = root;
  ds.domain_ = domain_from_string(manifest.at("domain").get<std::string>());
  ds.n_frames_ = manifest.at("n_frames").get<int>();
  ds.seed_ = manifest.at("seed").get<std::uint64_t>();
  return ds;
}

CollaborativeSample Dataset::load_frame(int idx, bool with_labels) const {
  if (idx < 0 || idx >= n_frames_) {
    throw std::out_of_range("Dataset: frame index " + std::to_string(idx) + " out of range");
  }
  const fs::path frame_dir = fs::path(root_) / ("frame_" + std::to_string(idx));

  CollaborativeSample sample;
  sample.domain = domain_;

  for (int j = 0;; ++j) {
    const fs::path agent_dir = frame_dir / ("agent_" + std::to_string(j));
    if (!fs::exists(agent_dir)) break;

    AgentFrame agent;
    const json meta = read_json(agent_dir / "meta.json");
    agent.agent_type = agent_type_from_string(meta.at("agent_type").get<std::string>());
    agent.is_ego = meta.at("is_ego").get<bool>();

    {
      std::ifstream is(agent_dir / "pose.txt");
      if (!is) throw std::runtime_error("cannot open: " + (agent_dir / "pose.txt").string());
      Eigen::Matrix4d m;
      for (int r = 0; r < 4; ++r) {
        for (int c = 0; c < 4; ++c) {
          if (!(is >> m(r, c))) {
            throw std::runtime_error("malformed pose.txt in " + agent_dir.string());
          }
        }
      }
      agent.pose = Pose::from_matrix(m);
    }

    {
      const fs::path pts = agent_dir / "points.bin";
      std::ifstream is(pts, std::ios::binary | std::ios::ate);
      if (!is) throw std::runtime_error("cannot open: " + pts.string());
      const auto bytes = static_cast<std::size_t>(is.tellg());
      if (bytes % (4 * sizeof(float)) != 0) {
        throw std::runtime_error("points.bin size is not a multiple of 16: " + pts.string());
      }
      const std::size_t n = bytes / (4 * sizeof(float));
      is.seekg(0);
      std::vector<float> raw(n * 4);
      if (n > 0) {
        is.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(bytes));
        if (!is) throw std::runtime_error("short read: " + pts.string());
      }
      agent.cloud.points.reserve(n);
      for (std::size_t i = 0; i < n; ++i) {
        agent.cloud.points.push_back({static_cast<double>(raw[4 * i + 0]),
                                      static_cast<double>(raw[4 * i + 1]),
                                      static_cast<double>(raw[4 * i + 2]),
                                      static_cast<double>(raw[4 * i + 3])});
      }
    }
    sample.agents.push_back(std::move(agent));
  }
  if (sample.agents.empty()) {
    throw std::runtime_error("Dataset: no agents in " + frame_dir.string());
  }

  if (with_labels) {
    const json labels = read_json(frame_dir / "labels.json");
    BoxSet boxes;
    for (const auto& lj : labels) {
      Box b;
      b.center = Eigen::Vector3d(lj.at("cx").get<double>(), lj.at("cy").get<double>(),
                                 lj.at("cz").get<double>());
      b.size = Eigen::Vector3d(lj.at("l").get<double>(), lj.at("w").get<double>(),
                               lj.at("h").get<double>());
      b.yaw = lj.at("yaw").get<double>();
      boxes.push_back(b);
    }
    sample.annotations = std::move(boxes);
  }
  return sample;
}

}  // namespace coopadapt
