#include "ftfoot/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <stdexcept>

#include "json.hpp"

#include "ftfoot/image_io.hpp"

namespace ftfoot {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string sample_name(int id) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%06d", id);
  return buf;
}

json load_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("dataset: cannot open " + path.string());
  json j;
  in >> j;
  return j;
}

void save_json(const fs::path& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("dataset: cannot write " + path.string());
  out << j.dump(2) << "\n";
}

std::vector<uint16_t> depth_to_mm(const Tensor& depth) {
  std::vector<uint16_t> mm(static_cast<size_t>(depth.size()));
  for (int64_t i = 0; i < depth.size(); ++i) {
    const double v = std::clamp(depth[i] * 1000.0, 0.0, 65535.0);
    mm[static_cast<size_t>(i)] = static_cast<uint16_t>(std::lround(v));
  }
  return mm;
}

Tensor mm_to_depth(const std::vector<uint16_t>& mm, int h, int w) {
  Tensor depth({1, h, w});
  for (int64_t i = 0; i < depth.size(); ++i) depth[i] = mm[static_cast<size_t>(i)] / 1000.0;
  return depth;
}

// normals in [-1,1] stored as bytes via (n+1)/2
Tensor normals_to_rgb(const Tensor& normals) {
  Tensor rgb = normals;
  for (int64_t i = 0; i < rgb.size(); ++i) rgb[i] = std::clamp((rgb[i] + 1.0) * 0.5, 0.0, 1.0);
  return rgb;
}

Tensor rgb_to_normals(const Tensor& rgb) {
  Tensor n = rgb;
  for (int64_t i = 0; i < n.size(); ++i) n[i] = n[i] * 2.0 - 1.0;
  return n;
}

}  // namespace

DatasetWriter::DatasetWriter(std::string root) : root_(std::move(root)) { fs::create_directories(root_); }

std::string DatasetWriter::add_sample(const TrainSample& sample, const std::string& split) {
  const std::string id = sample_name(next_id_++);
  const fs::path dir = fs::path(root_) / id;
  fs::create_directories(dir);

  write_rgb8_png((dir / "rgb.png").string(), sample.frame.rgb);
  write_gray16_png((dir / "depth.png").string(), depth_to_mm(sample.frame.depth), sample.frame.height(),
                   sample.frame.width());
  write_mask_png((dir / "footprint.png").string(), sample.footprint.mask);
  if (sample.has_gt_normals()) {
    write_rgb8_png((dir / "gt_normals.png").string(), normals_to_rgb(sample.gt_normals.normals));
    write_mask_png((dir / "gt_normals_valid.png").string(), sample.gt_normals.validity);
  }
  if (sample.has_gt_traversable()) {
    write_mask_png((dir / "gt_traversable.png").string(), sample.gt_traversable);
  }

  json intr = {{"fx", sample.frame.intrinsics.fx},
               {"fy", sample.frame.intrinsics.fy},
               {"cx", sample.frame.intrinsics.cx},
               {"cy", sample.frame.intrinsics.cy}};
  save_json(dir / "intrinsics.json", intr);

  json pose;
  pose["rotation"] = std::vector<double>(sample.frame.pose.rotation.m, sample.frame.pose.rotation.m + 9);
  pose["translation"] = {sample.frame.pose.translation.x, sample.frame.pose.translation.y,
                         sample.frame.pose.translation.z};
  pose["frame_id"] = sample.frame.frame_id;
  save_json(dir / "pose.json", pose);

  entries_.emplace_back(split, id);
  return id;
}

void DatasetWriter::finalize() {
  json splits = json::object();
  for (const auto& [split, id] : entries_) {
    if (!splits.contains(split)) splits[split] = json::array();
    splits[split].push_back(id);
  }
  save_json(fs::path(root_) / "manifest.json", json{{"splits", splits}});
}

DatasetReader::DatasetReader(std::string root, const std::string& split) : root_(std::move(root)) {
  const fs::path manifest_path = fs::path(root_) / "manifest.json";
  if (!fs::exists(manifest_path)) {
    if (!fs::exists(root_)) throw std::runtime_error("dataset: no such directory " + root_);
    return;  // empty dataset: zero samples, no error
  }
  json manifest;
  try {
    manifest = load_json(manifest_path);
  } catch (const json::exception& e) {
    throw std::runtime_error("dataset: malformed manifest " + manifest_path.string() + ": " + e.what());
  }
  if (!manifest.contains("splits") || !manifest["splits"].is_object()) {
    throw std::runtime_error("dataset: malformed manifest " + manifest_path.string() + ": missing splits object");
  }
  if (!manifest["splits"].contains(split)) {
    std::string known;
    for (const auto& [name, ids] : manifest["splits"].items()) known += (known.empty() ? "" : ", ") + name;
    throw std::runtime_error("dataset: unknown split '" + split + "' (manifest has: " + known + ")");
  }
  for (const auto& id : manifest["splits"][split]) ids_.push_back(id.get<std::string>());
}

TrainSample DatasetReader::load(size_t index) const {
  const std::string& id = ids_.at(index);
  const fs::path dir = fs::path(root_) / id;
  TrainSample s;
  s.id = id;

  s.frame.rgb = read_rgb8_png((dir / "rgb.png").string());
  int h = 0, w = 0;
  const std::vector<uint16_t> mm = read_gray16_png((dir / "depth.png").string(), h, w);
  s.frame.depth = mm_to_depth(mm, h, w);
  if (s.frame.rgb.dim(1) != h || s.frame.rgb.dim(2) != w) {
    throw std::runtime_error("dataset: rgb/depth extents differ in " + dir.string());
  }

  const json intr = load_json(dir / "intrinsics.json");
  s.frame.intrinsics = {intr.at("fx").get<double>(), intr.at("fy").get<double>(), intr.at("cx").get<double>(),
                        intr.at("cy").get<double>()};
  const json pose = load_json(dir / "pose.json");
  const auto rot = pose.at("rotation").get<std::vector<double>>();
  if (rot.size() != 9) throw std::runtime_error("dataset: bad rotation in " + dir.string());
  std::copy(rot.begin(), rot.end(), s.frame.pose.rotation.m);
  const auto trans = pose.at("translation").get<std::vector<double>>();
  if (trans.size() != 3) throw std::runtime_error("dataset: bad translation in " + dir.string());
  s.frame.pose.translation = {trans[0], trans[1], trans[2]};
  s.frame.frame_id = pose.value("frame_id", 0);

  s.footprint.mask = read_mask_png((dir / "footprint.png").string());
  s.footprint.valid = Tensor::full(s.footprint.mask.shape(), 1.0);

  if (fs::exists(dir / "gt_normals.png")) {
    s.gt_normals.normals = rgb_to_normals(read_rgb8_png((dir / "gt_normals.png").string()));
    if (fs::exists(dir / "gt_normals_valid.png")) {
      s.gt_normals.validity = read_mask_png((dir / "gt_normals_valid.png").string());
    } else {
      s.gt_normals.validity = Tensor::full({1, h, w}, 1.0);
    }
  } else {
    s.gt_normals.normals = Tensor({3, h, w});
    s.gt_normals.validity = Tensor({1, h, w});
  }
  if (fs::exists(dir / "gt_traversable.png")) {
    s.gt_traversable = read_mask_png((dir / "gt_traversable.png").string());
  }
  return s;
}

std::vector<TrainSample> DatasetReader::load_all() const {
  std::vector<TrainSample> out;
  for (size_t i = 0; i < ids_.size(); ++i) {
    try {
      out.push_back(load(i));
    } catch (const std::exception& e) {
      std::cerr << "dataset: skipping sample " << ids_[i] << ": " << e.what() << "\n";
    }
  }
  return out;
}

}  // namespace ftfoot
