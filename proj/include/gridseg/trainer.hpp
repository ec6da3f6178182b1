#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "gridseg/core.hpp"
#include "gridseg/dataset.hpp"
#include "gridseg/eval.hpp"
#include "gridseg/loss.hpp"
#include "gridseg/postproc.hpp"
#include "gridseg/rng.hpp"
#include "gridseg/shapecodec.hpp"
#include "gridseg/targets.hpp"
#include "gridseg/tinynet.hpp"

namespace gridseg {

/** @brief Rasterize one dataset image: single channel, one intensity level per class.
 *
 * Background is 0; an object of class k paints (k+1)/(C+1), so every class is
 * separable by intensity alone. Later annotations overwrite earlier ones.
 */
inline Tensor render_image(const Dataset& ds, const DatasetImage& img) {
  const int classes = static_cast<int>(ds.class_names.size());
  Tensor t(img.height, img.width, 1);
  for (const auto& a : ds.annotations) {
    if (a.image_id != img.id) continue;
    const BinaryMask m = annotation_mask(ds, a);
    const double level = static_cast<double>(a.class_id + 1) / (classes + 1);
    for (int y = 0; y < m.height; ++y)
      for (int x = 0; x < m.width; ++x)
        if (m.at(x, y)) t.at(y, x, 0) = level;
  }
  return t;
}

/** @brief All annotations of one image, with masks decoded. */
inline std::vector<Annotation> image_annotations(const Dataset& ds, int image_id) {
  std::vector<Annotation> out;
  for (const auto& a : ds.annotations) {
    if (a.image_id != image_id) continue;
    Annotation ann;
    ann.class_id = a.class_id;
    ann.bbox = a.bbox;
    ann.mask = annotation_mask(ds, a);
    out.push_back(std::move(ann));
  }
  return out;
}

// -------------------------------------------------------------------------
// Denoising shape autoencoder
// -------------------------------------------------------------------------

struct AutoencoderConfig {
  int code_length = 20;
  int hidden = 64;
  int epochs = 200;
  double noise_rate = 0.1;
  double learning_rate = 0.02;  // initial step for the per-epoch line search
  std::uint64_t seed = 1;
};

struct AutoencoderResult {
  Net encoder;
  Net decoder;
  std::vector<double> epoch_bce;  // [0] before training, then one entry per epoch
  double final_bce = 0.0;
};

namespace detail {

inline Tensor mask_to_tensor(const BinaryMask& m) {
  Tensor t(m.height, m.width, 1);
  for (std::size_t i = 0; i < m.data.size(); ++i) t.data[i] = m.data[i] ? 1.0 : 0.0;
  return t;
}

/** @brief Mean per-example BCE of decoder(encoder(input)) against clean targets. */
inline double autoencoder_bce(const Net& enc, const Net& dec, const std::vector<Tensor>& inputs,
                              const std::vector<Tensor>& targets) {
  double total = 0.0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const Tensor code = net_forward1(enc, inputs[i]);
    const Tensor recon = net_forward1(dec, code);
    total += bce(recon.data, targets[i].data);
  }
  return total / static_cast<double>(inputs.size());
}

/** @brief v <- mu v - step g over every parameter array. */
inline void blend_velocity(NetGrads& vel, const NetGrads& grads, double mu, double step) {
  for (std::size_t li = 0; li < vel.layers.size(); ++li) {
    auto apply = [&](std::vector<double>& v, const std::vector<double>& g) {
      for (std::size_t i = 0; i < v.size(); ++i) v[i] = mu * v[i] - step * g[i];
    };
    apply(vel.layers[li].w, grads.layers[li].w);
    apply(vel.layers[li].b, grads.layers[li].b);
    apply(vel.layers[li].bn_gamma, grads.layers[li].bn_gamma);
    apply(vel.layers[li].bn_beta, grads.layers[li].bn_beta);
  }
}

inline void add_scaled(Net& net, const NetGrads& grads, double factor) {
  for (std::size_t li = 0; li < net.params.size(); ++li) {
    auto apply = [&](std::vector<double>& w, const std::vector<double>& g) {
      for (std::size_t i = 0; i < w.size(); ++i) w[i] += factor * g[i];
    };
    apply(net.params[li].w, grads.layers[li].w);
    apply(net.params[li].b, grads.layers[li].b);
    apply(net.params[li].bn_gamma, grads.layers[li].bn_gamma);
    apply(net.params[li].bn_beta, grads.layers[li].bn_beta);
  }
}

}  // namespace detail

/** @brief Train the denoising autoencoder: reconstruct clean masks from corrupted inputs.
 *
 * Corruption flips each pixel independently with the configured rate and is
 * drawn once per example, so the objective is a fixed deterministic function.
 * Each epoch takes one full-batch gradient step sized by a backtracking line
 * search, which keeps the per-epoch BCE trace non-increasing by construction.
 */
inline AutoencoderResult train_autoencoder(const std::vector<BinaryMask>& masks,
                                           const AutoencoderConfig& cfg) {
  if (masks.empty()) throw std::invalid_argument("train_autoencoder: no masks");
  if (cfg.code_length < 2) throw std::invalid_argument("train_autoencoder: code length below 2");
  if (cfg.epochs < 0 || cfg.noise_rate < 0.0 || cfg.noise_rate >= 1.0 || cfg.learning_rate <= 0.0)
    throw std::invalid_argument("train_autoencoder: degenerate config");
  const int side = masks.front().width;
  for (const auto& m : masks)
    if (m.width != side || m.height != side)
      throw std::invalid_argument("train_autoencoder: masks must share one square side");

  Rng rng(cfg.seed);
  std::vector<Tensor> targets, inputs;
  targets.reserve(masks.size());
  inputs.reserve(masks.size());
  for (const auto& m : masks) {
    targets.push_back(detail::mask_to_tensor(m));
    Tensor corrupted = targets.back();
    for (auto& v : corrupted.data)
      if (rng.uniform() < cfg.noise_rate) v = 1.0 - v;
    inputs.push_back(std::move(corrupted));
  }

  AutoencoderResult res;
  res.encoder = make_net({side, side, 1},
                         {{LayerKind::Dense, cfg.hidden}, {LayerKind::LeakyRelu},
                          {LayerKind::Dense, cfg.code_length}, {LayerKind::Sigmoid}},
                         rng.next_u64());
  res.decoder = make_net({1, 1, cfg.code_length},
                         {{LayerKind::Dense, cfg.hidden}, {LayerKind::LeakyRelu},
                          {LayerKind::Dense, side * side}, {LayerKind::Sigmoid}},
                         rng.next_u64());

  NetGrads enc_grads = make_grads(res.encoder);
  NetGrads dec_grads = make_grads(res.decoder);
  NetGrads enc_vel = make_grads(res.encoder);
  NetGrads dec_vel = make_grads(res.decoder);

  res.epoch_bce.push_back(detail::autoencoder_bce(res.encoder, res.decoder, inputs, targets));
  const std::size_t n = inputs.size();
  double step = cfg.learning_rate;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    NetCache enc_cache, dec_cache;
    const std::vector<Tensor> codes = net_forward(res.encoder, inputs, &enc_cache);
    const std::vector<Tensor> recon = net_forward(res.decoder, codes, &dec_cache);

    std::vector<Tensor> gout(recon.size());
    for (std::size_t i = 0; i < recon.size(); ++i) {
      gout[i] = Tensor(recon[i].h, recon[i].w, recon[i].c);
      gout[i].data = bce_backward(recon[i].data, targets[i].data);
    }
    zero_grads(enc_grads);
    zero_grads(dec_grads);
    const std::vector<Tensor> gcode = net_backward(res.decoder, dec_cache, gout, dec_grads);
    net_backward(res.encoder, enc_cache, gcode, enc_grads);
    scale_grads(enc_grads, 1.0 / static_cast<double>(n));
    scale_grads(dec_grads, 1.0 / static_cast<double>(n));

    // Heavy-ball step guarded by a backtracking line search: a rejected trial
    // restores the exact snapshot and restarts with pure gradient descent at
    // half the step, so the recorded trace can never increase.
    const std::vector<LayerParams> enc_snap = res.encoder.params;
    const std::vector<LayerParams> dec_snap = res.decoder.params;
    const double before = res.epoch_bce.back();
    double after = before;
    step = std::min(step * 1.5, 8.0 * cfg.learning_rate);
    bool use_momentum = true;
    for (int attempt = 0; attempt < 40; ++attempt) {
      const double mu = use_momentum ? 0.9 : 0.0;
      detail::blend_velocity(enc_vel, enc_grads, mu, step);
      detail::blend_velocity(dec_vel, dec_grads, mu, step);
      detail::add_scaled(res.encoder, enc_vel, 1.0);
      detail::add_scaled(res.decoder, dec_vel, 1.0);
      after = detail::autoencoder_bce(res.encoder, res.decoder, inputs, targets);
      if (after <= before) break;
      res.encoder.params = enc_snap;
      res.decoder.params = dec_snap;
      after = before;  // step rejected; the trace must not record the trial
      use_momentum = false;
      step *= 0.5;
    }
    if (after >= before) {
      zero_grads(enc_vel);  // no descent this epoch: drop the stale velocity
      zero_grads(dec_vel);
    }
    res.epoch_bce.push_back(after);
  }
  res.final_bce = res.epoch_bce.back();
  return res;
}

inline AutoencoderResult train_autoencoder(const std::vector<BinaryMask>& masks, int code_length,
                                           int epochs, double noise_rate = 0.1,
                                           std::uint64_t seed = 1) {
  AutoencoderConfig cfg;
  cfg.code_length = code_length;
  cfg.epochs = epochs;
  cfg.noise_rate = noise_rate;
  cfg.seed = seed;
  return train_autoencoder(masks, cfg);
}

/** @brief Shape codec backed by a trained encoder/decoder pair. */
class EmbeddingCodec final : public ShapeCodec {
 public:
  EmbeddingCodec(Net encoder, Net decoder)
      : enc_(std::move(encoder)), dec_(std::move(decoder)) {
    if (enc_.input.h != enc_.input.w || enc_.input.c != 1)
      throw std::invalid_argument("EmbeddingCodec: encoder wants a square one-channel mask");
    const TensorShape code = enc_.output_shape();
    const TensorShape out = dec_.output_shape();
    if (code.size() != dec_.input.size())
      throw std::invalid_argument("EmbeddingCodec: decoder input does not fit the code");
    if (out.size() != static_cast<long long>(enc_.input.h) * enc_.input.w)
      throw std::invalid_argument("EmbeddingCodec: decoder output does not fit the mask");
  }

  int code_length() const override { return static_cast<int>(enc_.output_shape().size()); }
  int crop_side() const override { return enc_.input.h; }

  std::vector<double> encode(const BinaryMask& crop) const override {
    if (crop.width != crop_side() || crop.height != crop_side())
      throw std::invalid_argument("EmbeddingCodec::encode: crop side mismatch");
    return net_forward1(enc_, detail::mask_to_tensor(crop)).data;
  }

  BinaryMask decode(std::span<const double> code, int out_side) const override {
    if (static_cast<int>(code.size()) != code_length())
      throw std::invalid_argument("EmbeddingCodec::decode: code length mismatch");
    Tensor in(dec_.input.h, dec_.input.w, dec_.input.c);
    in.data.assign(code.begin(), code.end());
    const Tensor out = net_forward1(dec_, in);
    const int side = crop_side();
    BinaryMask m(side, side);
    for (std::size_t i = 0; i < m.data.size(); ++i) m.data[i] = out.data[i] >= 0.5 ? 1 : 0;
    if (out_side == side) return m;
    std::vector<double> src(m.data.size());
    for (std::size_t i = 0; i < src.size(); ++i) src[i] = m.data[i] ? 1.0 : 0.0;
    const std::vector<double> up = resample_bilinear(src, side, side, out_side, out_side);
    BinaryMask res(out_side, out_side);
    for (std::size_t i = 0; i < up.size(); ++i) res.data[i] = up[i] >= 0.5 ? 1 : 0;
    return res;
  }

  nlohmann::ordered_json config_json() const override {
    return {{"kind", "embedding"},
            {"code_length", code_length()},
            {"mask_side", crop_side()}};
  }

  const Net& encoder() const { return enc_; }
  const Net& decoder() const { return dec_; }

 private:
  Net enc_;
  Net dec_;
};

// -------------------------------------------------------------------------
// Grid detector training
// -------------------------------------------------------------------------

struct DetectorConfig {
  GridSpec grid{3, 2, 3, 0};  // M is taken from the codec when 0
  TargetMode mode = TargetMode::Anchor;
  AnchorSet anchors;
  LossWeights weights;
  std::vector<int> channels = {8, 16, 32, 64, 64};  // one stride-2 conv per entry
  double schedule_scale = 0.02;
  int epochs = 30;
  std::uint64_t seed = 1;
  double eval_confidence = 0.05;
  double eval_nms_iou = 0.5;
};

struct EpochTrace {
  double loss = 0.0;
  double map50 = 0.0;
};

struct DetectorResult {
  Net net;
  PredLayout layout;
  std::vector<double> step_losses;  // mean per-image loss at each accumulated update
  std::vector<EpochTrace> trace;    // [0] untrained baseline, then one entry per epoch
};

namespace detail {

inline std::vector<double> flatten_prediction(const Tensor& t) {
  return t.data;  // (row, col, channel) order matches the flat cell-major layout
}

inline Tensor prediction_grad_tensor(const std::vector<double>& grad, const TensorShape& s) {
  Tensor t(s.h, s.w, s.c);
  t.data = grad;
  return t;
}

}  // namespace detail

/** @brief Run a frozen detector over a dataset: decode, threshold and suppress. */
inline std::vector<DetectionInstance> run_detector(const Net& net, const PredLayout& layout,
                                                   const ShapeCodec& codec, const Dataset& ds,
                                                   double confidence, double nms_iou) {
  PostprocConfig pp;
  pp.confidence_threshold = confidence;
  pp.nms_iou_threshold = nms_iou;
  std::vector<DetectionInstance> out;
  for (const auto& img : ds.images) {
    const Tensor pred = net_forward1(net, render_image(ds, img));
    const std::vector<Proposal> props =
        unpack_predictions(detail::flatten_prediction(pred), layout);
    std::vector<Detection> dets =
        nms(decode_detections(props, codec, pp, img.width, img.height), pp);
    for (auto& d : dets) out.push_back({img.id, std::move(d)});
  }
  return out;
}

/** @brief Mask-overlap mAP at IoU 0.5 for a frozen detector. */
inline double detector_map(const Net& net, const PredLayout& layout, const ShapeCodec& codec,
                           const Dataset& ds, double confidence, double nms_iou) {
  EvalConfig ec;
  ec.criterion = MatchCriterion::Mask;
  return map_at(ds, run_detector(net, layout, codec, ds, confidence, nms_iou), 0.5, ec).map;
}

/** @brief Train a small stride-2 conv stack with a grid prediction head.
 *
 * Gradients accumulate over 8 mini-batches of 8 before each optimizer step;
 * batch-norm statistics come from each mini-batch of 8. Iteration order is
 * fixed, so a run is fully reproducible from its seed.
 */
inline DetectorResult train_detector(const Dataset& train_ds, const Dataset& val_ds,
                                     const ShapeCodec& codec, DetectorConfig cfg) {
  if (train_ds.images.empty()) throw std::invalid_argument("train_detector: empty training set");
  if (cfg.grid.M == 0) cfg.grid.M = codec.code_length();
  if (cfg.grid.M != codec.code_length())
    throw std::invalid_argument("train_detector: grid M does not match the codec");
  if (cfg.grid.C != static_cast<int>(train_ds.class_names.size()))
    throw std::invalid_argument("train_detector: grid C does not match the dataset");

  const int side = train_ds.images.front().width;
  for (const auto& img : train_ds.images)
    if (img.width != side || img.height != side)
      throw std::invalid_argument("train_detector: images must share one square side");
  int reduced = side;
  for (std::size_t i = 0; i < cfg.channels.size(); ++i) reduced = (reduced + 1) / 2;
  if (reduced != cfg.grid.S)
    throw std::invalid_argument("train_detector: conv stack does not reduce the side to S");

  DetectorResult res;
  res.layout.spec = cfg.grid;
  res.layout.mode = cfg.mode;
  res.layout.anchors = cfg.mode == TargetMode::Anchor ? cfg.anchors.size() : 0;

  std::vector<LayerSpec> layers;
  for (int c : cfg.channels) {
    layers.push_back({LayerKind::Conv, c, 3, 3, 2});
    layers.push_back({LayerKind::BatchNorm});
    layers.push_back({LayerKind::LeakyRelu});
  }
  layers.push_back({LayerKind::Conv, res.layout.cell_stride(), 1, 1, 1});
  res.net = make_net({side, side, 1}, layers, cfg.seed);

  std::vector<Tensor> images;
  std::vector<TargetTensor> targets;
  images.reserve(train_ds.images.size());
  targets.reserve(train_ds.images.size());
  for (const auto& img : train_ds.images) {
    images.push_back(render_image(train_ds, img));
    const std::vector<Annotation> anns = image_annotations(train_ds, img.id);
    targets.push_back(cfg.mode == TargetMode::Anchor
                          ? encode_anchored(anns, cfg.grid, cfg.anchors, codec)
                          : encode_legacy(anns, cfg.grid, codec));
  }

  OptimState opt = make_optim(res.net, detection_schedule(cfg.schedule_scale));
  NetGrads grads = make_grads(res.net);
  const TensorShape head = res.net.output_shape();

  {
    double loss = 0.0;
    for (std::size_t i = 0; i < images.size(); ++i) {
      const Tensor pred = net_forward1(res.net, images[i]);
      loss += loss_forward(detail::flatten_prediction(pred), targets[i], res.layout, cfg.weights)
                  .total;
    }
    res.trace.push_back({loss / static_cast<double>(images.size()),
                         detector_map(res.net, res.layout, codec, val_ds, cfg.eval_confidence,
                                      cfg.eval_nms_iou)});
  }

  long long update_index = 0;
  const std::size_t n = images.size();
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    double epoch_loss = 0.0;
    for (std::size_t chunk = 0; chunk < n; chunk += 64) {
      const std::size_t chunk_end = std::min(chunk + 64, n);
      zero_grads(grads);
      double chunk_loss = 0.0;
      for (std::size_t start = chunk; start < chunk_end; start += 8) {
        const std::size_t stop = std::min(start + 8, chunk_end);
        const std::vector<Tensor> batch(images.begin() + start, images.begin() + stop);
        NetCache cache;
        const std::vector<Tensor> preds = net_forward(res.net, batch, &cache, true);
        std::vector<Tensor> gout;
        gout.reserve(preds.size());
        for (std::size_t i = 0; i < preds.size(); ++i) {
          const std::vector<double> flat = detail::flatten_prediction(preds[i]);
          const TargetTensor& tgt = targets[start + i];
          const MatchResult m = match(flat, tgt, res.layout);
          chunk_loss += loss_forward(flat, tgt, res.layout, cfg.weights, m).total;
          gout.push_back(detail::prediction_grad_tensor(
              loss_backward(flat, tgt, res.layout, cfg.weights, m), head));
        }
        net_backward(res.net, cache, gout, grads);
        update_bn_running(res.net, cache);
      }
      const double count = static_cast<double>(chunk_end - chunk);
      scale_grads(grads, 1.0 / count);
      sgd_step(res.net, grads, opt, ++update_index);
      res.step_losses.push_back(chunk_loss / count);
      epoch_loss += chunk_loss;
    }
    res.trace.push_back({epoch_loss / static_cast<double>(n),
                         detector_map(res.net, res.layout, codec, val_ds, cfg.eval_confidence,
                                      cfg.eval_nms_iou)});
  }
  return res;
}

}  // namespace gridseg
