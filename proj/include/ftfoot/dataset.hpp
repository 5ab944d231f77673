#pragma once

#include <optional>
#include <string>
#include <vector>

#include "ftfoot/geometry.hpp"

namespace ftfoot {

// One annotated observation as stored on disk under <root>/<id>/:
//   rgb.png (8-bit), depth.png (16-bit millimeters, 0 = invalid),
//   intrinsics.json, pose.json, footprint.png, and optionally
//   gt_normals.png / gt_traversable.png. manifest.json at the root lists the
//   sample ids per split.
struct TrainSample {
  RgbdFrame frame;
  FootprintMask footprint;
  SurfaceNormalImage gt_normals;  // validity all zero when absent
  Tensor gt_traversable;          // empty when absent
  std::string id;

  bool has_gt_normals() const { return gt_normals.validity.size() > 0 && gt_normals.validity.max() > 0.0; }
  bool has_gt_traversable() const { return gt_traversable.size() > 0; }
};

class DatasetWriter {
 public:
  explicit DatasetWriter(std::string root);

  // Writes the sample directory and records it under `split`; returns the id.
  std::string add_sample(const TrainSample& sample, const std::string& split);
  void finalize();  // writes manifest.json

 private:
  std::string root_;
  int next_id_ = 0;
  std::vector<std::pair<std::string, std::string>> entries_;  // (split, id)
};

class DatasetReader {
 public:
  // Throws on a malformed manifest or unknown split name. Samples that fail
  // to load are skipped with a diagnostic on stderr.
  DatasetReader(std::string root, const std::string& split);

  size_t size() const { return ids_.size(); }
  const std::vector<std::string>& ids() const { return ids_; }
  TrainSample load(size_t index) const;

  // Loads every sample, skipping corrupt ones.
  std::vector<TrainSample> load_all() const;

 private:
  std::string root_;
  std::vector<std::string> ids_;
};

}  // namespace ftfoot
