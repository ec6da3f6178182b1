// Command line for the gridseg library: dataset synthesis, shape codecs,
// detection metrics, architecture costing, model training, and augmentation.
//
// Exit codes: 0 success, 1 validation error (bad flags, bad config, bad file
// content), 2 I/O error (missing or unwritable files). Every command that
// draws random numbers demands an explicit --seed, and rerunning a command
// with the same seed and inputs writes byte-identical outputs.

#include <CLI11.hpp>
#include <json.hpp>

#include <gridseg/archspec.hpp>
#include <gridseg/augment.hpp>
#include <gridseg/core.hpp>
#include <gridseg/dataset.hpp>
#include <gridseg/eval.hpp>
#include <gridseg/shapecodec.hpp>
#include <gridseg/synth.hpp>
#include <gridseg/trainer.hpp>

#include <atomic>
#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <future>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

struct GlobalOpts {
  std::optional<std::uint64_t> seed;
  std::string config_path;
  std::string out_dir;
  int jobs = 1;
};

std::uint64_t require_seed(const GlobalOpts& g) {
  if (!g.seed) throw std::invalid_argument("this command draws random numbers; pass --seed");
  return *g.seed;
}

const std::string& require_config(const GlobalOpts& g) {
  if (g.config_path.empty()) throw std::invalid_argument("this command needs --config <json>");
  return g.config_path;
}

fs::path require_out(const GlobalOpts& g) {
  if (g.out_dir.empty()) throw std::invalid_argument("this command writes files; pass --out <dir>");
  std::error_code ec;
  fs::create_directories(g.out_dir, ec);
  if (ec) throw std::runtime_error("cannot create output directory: " + g.out_dir);
  return fs::path(g.out_dir);
}

ordered_json load_json_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open: " + path);
  return ordered_json::parse(in);
}

void write_text_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open for writing: " + path.string());
  out << text;
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

void write_json_file(const fs::path& path, const ordered_json& j) {
  write_text_file(path, j.dump(2) + "\n");
}

/** @brief Shortest decimal string that parses back to exactly this double. */
std::string fmt_double(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

std::string fmt_fixed(double v, int places) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(places) << v;
  return os.str();
}

std::string group_thousands(long long v) {
  std::string digits = std::to_string(v);
  std::string out;
  int count = 0;
  for (auto it = digits.rbegin(); it != digits.rend(); ++it) {
    if (count && count % 3 == 0) out.push_back(',');
    out.push_back(*it);
    ++count;
  }
  return std::string(out.rbegin(), out.rend());
}

/** @brief Run fn(0..n-1) on up to `jobs` threads; each index owns its output slot. */
void parallel_for(std::size_t n, int jobs, const std::function<void(std::size_t)>& fn) {
  if (jobs <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::future<void>> workers;
  const std::size_t count = std::min<std::size_t>(static_cast<std::size_t>(jobs), n);
  for (std::size_t w = 0; w < count; ++w)
    workers.push_back(std::async(std::launch::async, [&] {
      for (std::size_t i = next++; i < n; i = next++) fn(i);
    }));
  for (auto& f : workers) f.get();
}

gridseg::MatchCriterion criterion_from(const std::string& name) {
  if (name == "box") return gridseg::MatchCriterion::Box;
  if (name == "mask") return gridseg::MatchCriterion::Mask;
  throw std::invalid_argument("criterion must be 'box' or 'mask', got '" + name + "'");
}

std::vector<double> parse_thresholds(const std::string& csv) {
  std::vector<double> out;
  std::istringstream in(csv);
  std::string item;
  while (std::getline(in, item, ',')) {
    if (item.empty()) continue;
    std::size_t used = 0;
    const double t = std::stod(item, &used);
    if (used != item.size() || !(t > 0.0 && t <= 1.0))
      throw std::invalid_argument("thresholds must be numbers in (0, 1], got '" + item + "'");
    out.push_back(t);
  }
  if (out.empty()) throw std::invalid_argument("at least one IoU threshold is required");
  return out;
}

/** @brief Bind detection records to images, decoding masks when the criterion needs them. */
std::vector<gridseg::DetectionInstance> to_instances(const gridseg::Dataset& ds,
                                                     const std::vector<gridseg::DetectionRecord>& records,
                                                     gridseg::MatchCriterion criterion, int jobs) {
  std::vector<gridseg::DetectionInstance> out(records.size());
  parallel_for(records.size(), jobs, [&](std::size_t i) {
    const gridseg::DetectionRecord& r = records[i];
    const gridseg::DatasetImage* im = ds.find_image(r.image_id);
    if (!im) throw std::invalid_argument("detection references unknown image id " +
                                         std::to_string(r.image_id));
    gridseg::DetectionInstance di;
    di.image_id = r.image_id;
    di.det.class_id = r.class_id;
    di.det.confidence = r.confidence;
    di.det.bbox = r.bbox;
    if (criterion == gridseg::MatchCriterion::Mask) {
      if (!r.rle)
        throw std::invalid_argument("mask criterion needs an rle on every detection");
      gridseg::RleMask rle;
      rle.width = im->width;
      rle.height = im->height;
      rle.runs = *r.rle;
      di.det.mask = gridseg::rle_decode(rle);
    }
    out[i] = std::move(di);
  });
  return out;
}

/** @brief One similarity-group index per dataset class, from a named-groups file. */
std::vector<int> groups_for(const gridseg::Dataset& ds, const ordered_json& root) {
  if (!root.contains("groups") || !root["groups"].is_object())
    throw std::invalid_argument("groups file needs a top-level 'groups' object");
  std::map<std::string, int> by_class;
  std::vector<std::string> group_names;
  int index = 0;
  for (const auto& [name, members] : root["groups"].items()) {
    group_names.push_back(name);
    for (const auto& m : members) {
      const std::string cls = m.get<std::string>();
      if (!by_class.emplace(cls, index).second)
        throw std::invalid_argument("class '" + cls + "' appears in more than one group");
    }
    ++index;
  }
  std::vector<int> out;
  out.reserve(ds.class_names.size());
  for (const std::string& cls : ds.class_names) {
    const auto it = by_class.find(cls);
    if (it == by_class.end())
      throw std::invalid_argument("class '" + cls + "' is not in any similarity group");
    out.push_back(it->second);
  }
  return out;
}

// ---------------------------------------------------------------- synth ----

int cmd_synth(const GlobalOpts& g) {
  const std::uint64_t seed = require_seed(g);
  const ordered_json cfg = load_json_file(require_config(g));
  const fs::path out = require_out(g);

  gridseg::SynthConfig base;
  base.image_side = cfg.value("image_side", base.image_side);
  base.classes = cfg.value("classes", base.classes);
  base.min_objects = cfg.value("min_objects", base.min_objects);
  base.max_objects = cfg.value("max_objects", base.max_objects);
  base.min_size = cfg.value("min_size", base.min_size);
  base.max_size = cfg.value("max_size", base.max_size);
  base.min_center_dist = cfg.value("min_center_dist", base.min_center_dist);
  base.co_centered_pairs = cfg.value("co_centered_pairs", base.co_centered_pairs);
  const int train_images = cfg.value("train_images", 0);
  const int val_images = cfg.value("val_images", 0);
  if (train_images < 1 || val_images < 1)
    throw std::invalid_argument("synth: train_images and val_images must be >= 1");
  if (base.image_side < 32) throw std::invalid_argument("synth: image_side must be >= 32");

  base.seed = seed;
  base.images = train_images;
  const gridseg::Dataset train = gridseg::make_synth_dataset(base);
  base.seed = seed + 1;  // validation draws from its own stream
  base.images = val_images;
  const gridseg::Dataset val = gridseg::make_synth_dataset(base);

  const fs::path train_path = out / "train.json";
  const fs::path val_path = out / "val.json";
  gridseg::save_dataset(train, train_path.string());
  gridseg::save_dataset(val, val_path.string());

  ordered_json summary;
  summary["train"] = train_path.string();
  summary["train_images"] = train.images.size();
  summary["train_annotations"] = train.annotations.size();
  summary["val"] = val_path.string();
  summary["val_images"] = val.images.size();
  summary["val_annotations"] = val.annotations.size();
  std::cout << summary.dump(2) << "\n";
  return 0;
}

// ---------------------------------------------------------------- codec ----

struct CodecFiles {
  std::string dataset;
  std::string codes;
  int decode_side = 0;  // 0 means the codec's own crop side
};

int cmd_codec_encode(const GlobalOpts& g, const CodecFiles& files) {
  const ordered_json codec_cfg = load_json_file(require_config(g));
  const fs::path out = require_out(g);
  const auto codec = gridseg::make_codec(codec_cfg);
  const gridseg::Dataset ds = gridseg::load_dataset(files.dataset);

  std::vector<ordered_json> rows(ds.annotations.size());
  parallel_for(ds.annotations.size(), g.jobs, [&](std::size_t i) {
    const gridseg::ImageAnnotation& a = ds.annotations[i];
    const gridseg::BinaryMask mask = gridseg::annotation_mask(ds, a);
    const gridseg::BinaryMask crop = gridseg::crop_resize_mask(mask, a.bbox, codec->crop_side());
    rows[i] = {{"image_id", a.image_id},
               {"class_id", a.class_id},
               {"bbox", gridseg::bbox_to_json(a.bbox)},
               {"code", codec->encode(crop)}};
  });

  ordered_json doc;
  doc["codec"] = codec->config_json();
  doc["codes"] = rows;
  const fs::path path = out / "codes.json";
  write_json_file(path, doc);

  ordered_json summary;
  summary["file"] = path.string();
  summary["codes"] = rows.size();
  summary["code_length"] = codec->code_length();
  std::cout << summary.dump(2) << "\n";
  return 0;
}

int cmd_codec_decode(const GlobalOpts& g, const CodecFiles& files) {
  const ordered_json codec_cfg = load_json_file(require_config(g));
  const fs::path out = require_out(g);
  const auto codec = gridseg::make_codec(codec_cfg);
  const ordered_json doc = load_json_file(files.codes);
  if (doc.contains("codec") && doc["codec"].dump() != codec->config_json().dump())
    throw std::invalid_argument("codes file was written by a different codec configuration");
  if (!doc.contains("codes") || !doc["codes"].is_array())
    throw std::invalid_argument("codes file needs a top-level 'codes' array");

  const int side = files.decode_side > 0 ? files.decode_side : codec->crop_side();
  const auto& codes = doc["codes"];
  std::vector<ordered_json> rows(codes.size());
  parallel_for(codes.size(), g.jobs, [&](std::size_t i) {
    const auto code = codes[i].at("code").get<std::vector<double>>();
    const gridseg::BinaryMask mask = codec->decode(code, side);
    rows[i] = {{"image_id", codes[i].value("image_id", 0)},
               {"class_id", codes[i].value("class_id", 0)},
               {"side", side},
               {"rle", gridseg::rle_encode(mask).runs}};
  });

  ordered_json masks_doc;
  masks_doc["side"] = side;
  masks_doc["masks"] = rows;
  const fs::path path = out / "masks.json";
  write_json_file(path, masks_doc);

  ordered_json summary;
  summary["file"] = path.string();
  summary["masks"] = rows.size();
  summary["side"] = side;
  std::cout << summary.dump(2) << "\n";
  return 0;
}

int cmd_codec_roundtrip(const GlobalOpts& g, const CodecFiles& files) {
  const ordered_json codec_cfg = load_json_file(require_config(g));
  const auto codec = gridseg::make_codec(codec_cfg);
  const gridseg::Dataset ds = gridseg::load_dataset(files.dataset);
  if (ds.annotations.empty()) throw std::invalid_argument("roundtrip: dataset has no annotations");

  std::vector<double> ious(ds.annotations.size());
  parallel_for(ds.annotations.size(), g.jobs, [&](std::size_t i) {
    const gridseg::ImageAnnotation& a = ds.annotations[i];
    const gridseg::DatasetImage* im = ds.find_image(a.image_id);
    const gridseg::BinaryMask mask = gridseg::annotation_mask(ds, a);
    const gridseg::BinaryMask crop = gridseg::crop_resize_mask(mask, a.bbox, codec->crop_side());
    const gridseg::BinaryMask back = codec->decode(codec->encode(crop), codec->crop_side());
    const gridseg::BinaryMask pasted = gridseg::paste_mask(back, a.bbox, im->width, im->height);
    ious[i] = gridseg::iou_mask(mask, pasted);
  });

  double sum = 0.0, lo = 1.0;
  std::vector<double> class_sum(ds.class_names.size(), 0.0);
  std::vector<int> class_count(ds.class_names.size(), 0);
  for (std::size_t i = 0; i < ious.size(); ++i) {
    sum += ious[i];
    lo = std::min(lo, ious[i]);
    const int c = ds.annotations[i].class_id;
    class_sum[c] += ious[i];
    ++class_count[c];
  }

  ordered_json per_class = ordered_json::object();
  for (std::size_t c = 0; c < ds.class_names.size(); ++c)
    if (class_count[c])
      per_class[ds.class_names[c]] = {{"count", class_count[c]},
                                      {"mean_iou", class_sum[c] / class_count[c]}};
  ordered_json report;
  report["codec"] = codec->config_json();
  report["count"] = ious.size();
  report["mean_iou"] = sum / static_cast<double>(ious.size());
  report["min_iou"] = lo;
  report["per_class"] = per_class;
  if (!g.out_dir.empty()) write_json_file(require_out(g) / "roundtrip.json", report);
  std::cout << report.dump(2) << "\n";
  return 0;
}

// ----------------------------------------------------------------- eval ----

int cmd_eval(const GlobalOpts& g, const std::string& gt_path, const std::string& det_path,
             const std::string& criterion_name, const std::string& thresholds_csv) {
  const gridseg::Dataset ds = gridseg::load_dataset(gt_path);
  const std::vector<gridseg::DetectionRecord> records = gridseg::load_detections_jsonl(det_path);
  gridseg::EvalConfig cfg;
  cfg.criterion = criterion_from(criterion_name);
  cfg.iou_thresholds = parse_thresholds(thresholds_csv);
  const auto instances = to_instances(ds, records, cfg.criterion, g.jobs);
  const ordered_json report = gridseg::eval_report(ds, instances, cfg);
  if (!g.out_dir.empty()) write_json_file(require_out(g) / "eval.json", report);
  std::cout << report.dump(2) << "\n";
  return 0;
}

// -------------------------------------------------------------- analyze ----

int cmd_analyze(const GlobalOpts& g, const std::string& gt_path, const std::string& det_path,
                const std::string& groups_path, const std::string& criterion_name) {
  const gridseg::Dataset ds = gridseg::load_dataset(gt_path);
  const std::vector<gridseg::DetectionRecord> records = gridseg::load_detections_jsonl(det_path);
  const ordered_json groups_doc = load_json_file(groups_path);
  const std::vector<int> groups = groups_for(ds, groups_doc);
  const gridseg::MatchCriterion criterion = criterion_from(criterion_name);
  const auto instances = to_instances(ds, records, criterion, g.jobs);
  const gridseg::ErrorBreakdown eb = gridseg::error_taxonomy(ds, instances, groups, criterion);

  ordered_json classes = ordered_json::object();
  std::vector<std::string> group_names;
  for (const auto& [name, members] : groups_doc["groups"].items()) group_names.push_back(name);
  for (std::size_t c = 0; c < ds.class_names.size(); ++c)
    classes[ds.class_names[c]] = group_names[static_cast<std::size_t>(groups[c])];

  ordered_json report;
  report["classes"] = classes;
  report["considered"] = eb.considered;
  report["corr"] = eb.corr;
  report["loc"] = eb.loc;
  report["sim"] = eb.sim;
  report["dissim"] = eb.dissim;
  report["backgr"] = eb.backgr;
  report["fp_loc"] = eb.fp_loc;
  report["fp_sim"] = eb.fp_sim;
  report["fp_dissim"] = eb.fp_dissim;
  report["fp_backgr"] = eb.fp_backgr;
  if (!g.out_dir.empty()) write_json_file(require_out(g) / "analyze.json", report);
  std::cout << report.dump(2) << "\n";
  return 0;
}

// ----------------------------------------------------------------- arch ----

int cmd_arch(const GlobalOpts& g, const std::string& table_path, const std::string& unit) {
  std::ifstream in(table_path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open: " + table_path);
  std::ostringstream buf;
  buf << in.rdbuf();
  const gridseg::ArchTable table = gridseg::parse_table(buf.str());
  const gridseg::CostReport report = gridseg::cost_report(table);
  const double div = unit == "K" ? 1e3 : 1e6;

  std::ostringstream text;
  text << "input " << report.input.h << "x" << report.input.w << "x" << report.input.c << "\n";
  text << std::left << std::setw(10) << "layer" << std::right << std::setw(8) << "filters"
       << std::setw(8) << "kernel" << std::setw(8) << "stride" << std::setw(14) << "output"
       << std::setw(12) << ("ops(" + unit + ")") << std::setw(12) << ("params(" + unit + ")")
       << "\n";
  ordered_json layers = ordered_json::array();
  for (const auto& row : report.rows) {
    const long long ops_scaled =
        static_cast<long long>(gridseg::round_half_up(static_cast<double>(row.ops) / div, 0));
    const double params_scaled = gridseg::round_half_up(static_cast<double>(row.params) / div, 2);
    const std::string kernel = std::to_string(row.spec.kh) + "x" + std::to_string(row.spec.kw);
    const std::string out_shape = std::to_string(row.out.h) + "x" + std::to_string(row.out.w) +
                                  "x" + std::to_string(row.out.c);
    text << std::left << std::setw(10) << gridseg::layer_kind_name(row.spec.kind) << std::right
         << std::setw(8) << row.spec.filters << std::setw(8) << kernel << std::setw(8)
         << row.spec.stride << std::setw(14) << out_shape << std::setw(12)
         << group_thousands(ops_scaled) << std::setw(12) << fmt_fixed(params_scaled, 2) << "\n";
    layers.push_back({{"kind", gridseg::layer_kind_name(row.spec.kind)},
                      {"filters", row.spec.filters},
                      {"kernel", {row.spec.kh, row.spec.kw}},
                      {"stride", row.spec.stride},
                      {"out", {row.out.h, row.out.w, row.out.c}},
                      {"ops", row.ops},
                      {"params", row.params},
                      {"ops_scaled", ops_scaled},
                      {"params_scaled", params_scaled}});
  }
  const long long total_ops_scaled = static_cast<long long>(
      gridseg::round_half_up(static_cast<double>(report.total_ops) / div, 0));
  const double total_params_scaled =
      gridseg::round_half_up(static_cast<double>(report.total_params) / div, 1);
  const std::string totals =
      group_thousands(total_ops_scaled) + " / " + fmt_fixed(total_params_scaled, 1);
  text << "Total: " << totals << "  (" << unit << " ops / " << unit << " params)\n";

  ordered_json doc;
  doc["unit"] = unit;
  doc["input"] = {report.input.h, report.input.w, report.input.c};
  doc["layers"] = layers;
  doc["total_ops"] = report.total_ops;
  doc["total_params"] = report.total_params;
  doc["total_ops_scaled"] = total_ops_scaled;
  doc["total_params_scaled"] = total_params_scaled;
  doc["totals"] = totals;
  if (!g.out_dir.empty()) write_json_file(require_out(g) / "arch.json", doc);
  std::cout << text.str();
  return 0;
}

// ---------------------------------------------------------------- train ----

int cmd_train_autoencoder(const GlobalOpts& g) {
  const std::uint64_t seed = require_seed(g);
  const ordered_json cfg = load_json_file(require_config(g));
  const fs::path out = require_out(g);
  if (!cfg.contains("dataset")) throw std::invalid_argument("autoencoder config needs 'dataset'");
  const gridseg::Dataset ds = gridseg::load_dataset(cfg["dataset"].get<std::string>());

  const int mask_side = cfg.value("mask_side", 16);
  if (mask_side < 2) throw std::invalid_argument("autoencoder: mask_side must be >= 2");
  std::vector<gridseg::BinaryMask> masks;
  masks.reserve(ds.annotations.size());
  for (const auto& a : ds.annotations)
    masks.push_back(
        gridseg::crop_resize_mask(gridseg::annotation_mask(ds, a), a.bbox, mask_side));

  gridseg::AutoencoderConfig ac;
  ac.code_length = cfg.value("code_length", ac.code_length);
  ac.hidden = cfg.value("hidden", ac.hidden);
  ac.epochs = cfg.value("epochs", ac.epochs);
  ac.noise_rate = cfg.value("noise_rate", ac.noise_rate);
  ac.learning_rate = cfg.value("learning_rate", ac.learning_rate);
  ac.seed = seed;
  const gridseg::AutoencoderResult res = gridseg::train_autoencoder(masks, ac);

  const fs::path enc_path = out / "encoder.net";
  const fs::path dec_path = out / "decoder.net";
  gridseg::save_net(res.encoder, enc_path.string());
  gridseg::save_net(res.decoder, dec_path.string());
  std::ostringstream csv;
  csv << "epoch,bce\n";
  for (std::size_t i = 0; i < res.epoch_bce.size(); ++i)
    csv << i << "," << fmt_double(res.epoch_bce[i]) << "\n";
  const fs::path trace_path = out / "trace.csv";
  write_text_file(trace_path, csv.str());

  ordered_json summary;
  summary["masks"] = masks.size();
  summary["epochs"] = ac.epochs;
  summary["initial_bce"] = res.epoch_bce.front();
  summary["final_bce"] = res.final_bce;
  summary["encoder"] = enc_path.string();
  summary["decoder"] = dec_path.string();
  summary["trace"] = trace_path.string();
  std::cout << summary.dump(2) << "\n";
  return 0;
}

int cmd_train_detector(const GlobalOpts& g) {
  const std::uint64_t seed = require_seed(g);
  const ordered_json cfg = load_json_file(require_config(g));
  const fs::path out = require_out(g);
  for (const char* key : {"train_dataset", "val_dataset", "codec"})
    if (!cfg.contains(key))
      throw std::invalid_argument(std::string("detector config needs '") + key + "'");

  const gridseg::Dataset train = gridseg::load_dataset(cfg["train_dataset"].get<std::string>());
  const gridseg::Dataset val = gridseg::load_dataset(cfg["val_dataset"].get<std::string>());
  const auto codec = gridseg::make_codec(cfg["codec"]);

  gridseg::DetectorConfig dc;
  dc.grid.S = cfg.value("grid_side", dc.grid.S);
  dc.grid.B = cfg.value("boxes_per_cell", dc.grid.B);
  dc.grid.C = static_cast<int>(train.class_names.size());
  dc.grid.M = 0;  // filled from the codec
  const std::string mode = cfg.value("mode", std::string("anchor"));
  if (mode == "anchor")
    dc.mode = gridseg::TargetMode::Anchor;
  else if (mode == "legacy")
    dc.mode = gridseg::TargetMode::Legacy;
  else
    throw std::invalid_argument("detector: mode must be 'anchor' or 'legacy'");
  if (cfg.contains("channels")) dc.channels = cfg["channels"].get<std::vector<int>>();
  dc.schedule_scale = cfg.value("schedule_scale", dc.schedule_scale);
  dc.epochs = cfg.value("epochs", dc.epochs);
  dc.eval_confidence = cfg.value("eval_confidence", dc.eval_confidence);
  dc.eval_nms_iou = cfg.value("eval_nms_iou", dc.eval_nms_iou);
  dc.seed = seed;
  const gridseg::DetectorResult res = gridseg::train_detector(train, val, *codec, dc);

  const fs::path net_path = out / "detector.net";
  gridseg::save_net(res.net, net_path.string());
  std::ostringstream csv;
  csv << "epoch,loss,map50\n";
  for (std::size_t i = 0; i < res.trace.size(); ++i)
    csv << i << "," << fmt_double(res.trace[i].loss) << "," << fmt_double(res.trace[i].map50)
        << "\n";
  const fs::path trace_path = out / "trace.csv";
  write_text_file(trace_path, csv.str());

  ordered_json summary;
  summary["train_images"] = train.images.size();
  summary["val_images"] = val.images.size();
  summary["epochs"] = dc.epochs;
  summary["mode"] = mode;
  summary["final_loss"] = res.trace.back().loss;
  summary["final_map50"] = res.trace.back().map50;
  summary["detector"] = net_path.string();
  summary["trace"] = trace_path.string();
  std::cout << summary.dump(2) << "\n";
  return 0;
}

// -------------------------------------------------------------- augment ----

int cmd_augment(const GlobalOpts& g, const std::string& dataset_path) {
  const std::uint64_t seed = require_seed(g);
  const ordered_json cfg_json = load_json_file(require_config(g));
  const fs::path out = require_out(g);
  const gridseg::AugmentConfig cfg = gridseg::augment_config_from_json(cfg_json);
  const gridseg::Dataset ds = gridseg::load_dataset(dataset_path);

  gridseg::Rng rng(seed);
  gridseg::Dataset augmented;
  augmented.images = ds.images;
  augmented.class_names = ds.class_names;
  std::ostringstream csv;
  csv << "image_id,angle_deg,dx,dy,scale,flip,intensity_scale,intensity_offset\n";
  std::size_t dropped = 0;

  for (const auto& im : ds.images) {
    const gridseg::AugmentSample s = gridseg::sample_params(cfg, rng);
    csv << im.id << "," << fmt_double(s.angle_deg) << "," << fmt_double(s.dx) << ","
        << fmt_double(s.dy) << "," << fmt_double(s.scale) << "," << (s.flip ? 1 : 0) << ","
        << fmt_double(s.intensity_scale) << "," << fmt_double(s.intensity_offset) << "\n";

    std::vector<gridseg::AugmentInstance> instances;
    for (const gridseg::Annotation& a : gridseg::image_annotations(ds, im.id)) {
      gridseg::AugmentInstance inst;
      inst.class_id = a.class_id;
      inst.mask = a.mask;
      inst.bbox = a.bbox;
      instances.push_back(std::move(inst));
    }
    const gridseg::Tensor image = gridseg::render_image(ds, im);
    gridseg::AugmentScene scene = gridseg::apply_affine(image, instances, s);
    scene.image = gridseg::apply_photometric(scene.image, s);

    dropped += instances.size() - scene.instances.size();
    for (const gridseg::AugmentInstance& inst : scene.instances) {
      gridseg::ImageAnnotation a;
      a.image_id = im.id;
      a.class_id = inst.class_id;
      a.bbox = inst.bbox;
      a.rle = gridseg::rle_encode(inst.mask).runs;
      augmented.annotations.push_back(std::move(a));
    }
  }

  const fs::path ds_path = out / "augmented.json";
  const fs::path trace_path = out / "augment_trace.csv";
  gridseg::save_dataset(augmented, ds_path.string());
  write_text_file(trace_path, csv.str());

  ordered_json summary;
  summary["images"] = augmented.images.size();
  summary["annotations"] = augmented.annotations.size();
  summary["dropped"] = dropped;
  summary["dataset"] = ds_path.string();
  summary["trace"] = trace_path.string();
  std::cout << summary.dump(2) << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"grid-based single-shot instance segmentation toolkit"};
  app.require_subcommand(1);
  app.fallthrough();

  GlobalOpts g;
  app.add_option_function<std::uint64_t>(
      "--seed", [&](std::uint64_t v) { g.seed = v; },
      "random seed (required by synth/train/augment)");
  app.add_option("--config", g.config_path, "JSON configuration file");
  app.add_option("--out", g.out_dir, "output directory (created if missing)");
  app.add_option("--jobs", g.jobs, "worker threads for per-item work")
      ->check(CLI::PositiveNumber);

  int rc = 0;

  auto* synth = app.add_subcommand("synth", "generate a synthetic train/val dataset pair");
  synth->callback([&] { rc = cmd_synth(g); });

  auto* codec = app.add_subcommand("codec", "encode, decode, or round-trip shape codes");
  codec->require_subcommand(1);
  codec->fallthrough();
  CodecFiles cf;
  auto* enc = codec->add_subcommand("encode", "encode every annotation of a dataset");
  enc->add_option("--dataset", cf.dataset, "dataset JSON file")->required();
  enc->callback([&] { rc = cmd_codec_encode(g, cf); });
  auto* dec = codec->add_subcommand("decode", "decode a codes file back to masks");
  dec->add_option("--codes", cf.codes, "codes JSON file written by encode")->required();
  dec->add_option("--side", cf.decode_side, "output mask side (default: codec crop side)")
      ->check(CLI::PositiveNumber);
  dec->callback([&] { rc = cmd_codec_decode(g, cf); });
  auto* rt = codec->add_subcommand("roundtrip", "report encode/decode IoU per annotation");
  rt->add_option("--dataset", cf.dataset, "dataset JSON file")->required();
  rt->callback([&] { rc = cmd_codec_roundtrip(g, cf); });

  std::string gt_path, det_path, groups_path;
  std::string criterion = "box";
  std::string thresholds = "0.5";
  auto* eval = app.add_subcommand("eval", "score detections against ground truth");
  eval->add_option("--gt", gt_path, "ground-truth dataset JSON")->required();
  eval->add_option("--det", det_path, "detections JSONL")->required();
  eval->add_option("--criterion", criterion, "match criterion: box or mask");
  eval->add_option("--thresholds", thresholds, "comma-separated IoU thresholds");
  eval->callback([&] { rc = cmd_eval(g, gt_path, det_path, criterion, thresholds); });

  auto* analyze = app.add_subcommand("analyze", "break errors down by similarity group");
  analyze->add_option("--gt", gt_path, "ground-truth dataset JSON")->required();
  analyze->add_option("--det", det_path, "detections JSONL")->required();
  analyze->add_option("--groups", groups_path, "similarity groups JSON")->required();
  analyze->add_option("--criterion", criterion, "match criterion: box or mask");
  analyze->callback([&] { rc = cmd_analyze(g, gt_path, det_path, groups_path, criterion); });

  std::string table_path;
  std::string unit = "M";
  auto* arch = app.add_subcommand("arch", "cost out an architecture table");
  arch->add_option("table", table_path, "layer table text file")->required();
  arch->add_option("--unit", unit, "scale for printed numbers: M or K")
      ->check(CLI::IsMember({"M", "K"}));
  arch->callback([&] { rc = cmd_arch(g, table_path, unit); });

  std::string train_kind;
  auto* train = app.add_subcommand("train", "train the autoencoder or the detector");
  train->add_option("kind", train_kind, "autoencoder or detector")
      ->required()
      ->check(CLI::IsMember({"autoencoder", "detector"}));
  train->callback([&] {
    rc = train_kind == "autoencoder" ? cmd_train_autoencoder(g) : cmd_train_detector(g);
  });

  std::string aug_dataset;
  auto* augment = app.add_subcommand("augment", "write a randomly transformed copy of a dataset");
  augment->add_option("--dataset", aug_dataset, "dataset JSON file")->required();
  augment->callback([&] { rc = cmd_augment(g, aug_dataset); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return rc;
}
