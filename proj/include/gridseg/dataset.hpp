#pragma once

#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "gridseg/core.hpp"

namespace gridseg {

using json = nlohmann::ordered_json;

struct DatasetImage {
  int id = 0;
  int width = 0;
  int height = 0;
  std::string file;
};

/** @brief Ground-truth instance tied to an image; the mask is kept run-length encoded. */
struct ImageAnnotation {
  int image_id = 0;
  int class_id = 0;
  BoundingBox bbox;
  std::vector<long long> rle;
};

struct Dataset {
  std::vector<DatasetImage> images;
  std::vector<ImageAnnotation> annotations;
  std::vector<std::string> class_names;

  const DatasetImage* find_image(int id) const {
    for (const auto& im : images)
      if (im.id == id) return &im;
    return nullptr;
  }
};

/** @brief Detection record as written by the detector; mask is optional. */
struct DetectionRecord {
  int image_id = 0;
  int class_id = 0;
  double confidence = 0.0;
  BoundingBox bbox;
  std::optional<std::vector<long long>> rle;
};

inline json bbox_to_json(const BoundingBox& b) { return json::array({b.cx, b.cy, b.w, b.h}); }

inline BoundingBox bbox_from_json(const json& j) {
  if (!j.is_array() || j.size() != 4) throw std::invalid_argument("bbox: expected [cx,cy,w,h]");
  BoundingBox b;
  b.cx = j[0].get<double>();
  b.cy = j[1].get<double>();
  b.w = j[2].get<double>();
  b.h = j[3].get<double>();
  return b;
}

inline json dataset_to_json(const Dataset& ds) {
  json images = json::array();
  for (const auto& im : ds.images)
    images.push_back({{"id", im.id}, {"width", im.width}, {"height", im.height}, {"file", im.file}});
  json anns = json::array();
  for (const auto& a : ds.annotations)
    anns.push_back({{"image_id", a.image_id},
                    {"class_id", a.class_id},
                    {"bbox", bbox_to_json(a.bbox)},
                    {"rle", a.rle}});
  json root;
  root["classes"] = ds.class_names;
  root["images"] = images;
  root["annotations"] = anns;
  return root;
}

inline Dataset dataset_from_json(const json& root) {
  Dataset ds;
  if (root.contains("classes"))
    ds.class_names = root.at("classes").get<std::vector<std::string>>();
  for (const auto& j : root.at("images")) {
    DatasetImage im;
    im.id = j.at("id").get<int>();
    im.width = j.at("width").get<int>();
    im.height = j.at("height").get<int>();
    if (j.contains("file")) im.file = j.at("file").get<std::string>();
    if (im.width <= 0 || im.height <= 0)
      throw std::invalid_argument("dataset: image dimensions must be positive");
    ds.images.push_back(im);
  }
  for (const auto& j : root.at("annotations")) {
    ImageAnnotation a;
    a.image_id = j.at("image_id").get<int>();
    a.class_id = j.at("class_id").get<int>();
    a.bbox = bbox_from_json(j.at("bbox"));
    a.rle = j.at("rle").get<std::vector<long long>>();
    if (!ds.find_image(a.image_id))
      throw std::invalid_argument("dataset: annotation references unknown image id");
    ds.annotations.push_back(a);
  }
  return ds;
}

inline void save_dataset(const Dataset& ds, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  out << dataset_to_json(ds).dump(2) << "\n";
}

inline Dataset load_dataset(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open: " + path);
  json root;
  in >> root;
  return dataset_from_json(root);
}

/** @brief Decode an annotation's mask at the resolution of its image. */
inline BinaryMask annotation_mask(const Dataset& ds, const ImageAnnotation& a) {
  const DatasetImage* im = ds.find_image(a.image_id);
  if (!im) throw std::invalid_argument("annotation references unknown image id");
  RleMask rle;
  rle.width = im->width;
  rle.height = im->height;
  rle.runs = a.rle;
  return rle_decode(rle);
}

inline json detection_to_json(const DetectionRecord& d) {
  json j;
  j["image_id"] = d.image_id;
  j["class_id"] = d.class_id;
  j["confidence"] = d.confidence;
  j["bbox"] = bbox_to_json(d.bbox);
  if (d.rle) j["rle"] = *d.rle;
  return j;
}

inline DetectionRecord detection_from_json(const json& j) {
  DetectionRecord d;
  d.image_id = j.at("image_id").get<int>();
  d.class_id = j.at("class_id").get<int>();
  d.confidence = j.at("confidence").get<double>();
  d.bbox = bbox_from_json(j.at("bbox"));
  if (j.contains("rle")) d.rle = j.at("rle").get<std::vector<long long>>();
  return d;
}

/** @brief Detections are stored one JSON object per line. */
inline void save_detections_jsonl(const std::vector<DetectionRecord>& dets, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  for (const auto& d : dets) out << detection_to_json(d).dump() << "\n";
}

inline std::vector<DetectionRecord> load_detections_jsonl(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open: " + path);
  std::vector<DetectionRecord> dets;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    dets.push_back(detection_from_json(json::parse(line)));
  }
  return dets;
}

}  // namespace gridseg
