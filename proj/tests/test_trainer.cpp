#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "gridseg/synth.hpp"
#include "gridseg/trainer.hpp"
#include "test_util.hpp"

using namespace gridseg;

namespace {

std::vector<BinaryMask> blob_set(int count, int side, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<BinaryMask> out;
  for (int i = 0; i < count; ++i) out.push_back(testutil::random_blob(rng, side));
  return out;
}

}  // namespace

TEST_CASE("rendered images paint one intensity level per class") {
  SynthConfig sc;
  sc.images = 4;
  sc.seed = 21;
  const Dataset ds = make_synth_dataset(sc);

  for (const auto& img : ds.images) {
    const Tensor t = render_image(ds, img);
    REQUIRE(t.h == img.height);
    REQUIRE(t.w == img.width);
    REQUIRE(t.c == 1);

    // Every non-background pixel must carry the level of a class present in
    // the image, and every annotation must contribute its own level somewhere.
    const int classes = static_cast<int>(ds.class_names.size());
    for (const auto& a : ds.annotations) {
      if (a.image_id != img.id) continue;
      const double level = static_cast<double>(a.class_id + 1) / (classes + 1);
      int painted = 0;
      const BinaryMask m = annotation_mask(ds, a);
      for (int y = 0; y < m.height; ++y)
        for (int x = 0; x < m.width; ++x)
          if (m.at(x, y) && t.at(y, x, 0) == level) ++painted;
      REQUIRE(painted > 0);
    }
    for (double v : t.data) {
      bool valid = v == 0.0;
      for (int k = 0; k < classes && !valid; ++k)
        valid = v == static_cast<double>(k + 1) / (classes + 1);
      REQUIRE(valid);
    }
  }
}

TEST_CASE("zero autoencoder epochs return the untrained baseline") {
  const auto blobs = blob_set(8, 16, 5);
  const AutoencoderResult res = train_autoencoder(blobs, 12, 0);
  REQUIRE(res.epoch_bce.size() == 1);
  REQUIRE(res.final_bce == res.epoch_bce[0]);
  REQUIRE(res.final_bce > 0.0);

  // The untrained pair still runs end to end.
  const EmbeddingCodec codec(res.encoder, res.decoder);
  REQUIRE(codec.code_length() == 12);
  REQUIRE(codec.crop_side() == 16);
  REQUIRE(codec.encode(blobs[0]).size() == 12);
}

TEST_CASE("autoencoder training lowers a never-increasing loss trace") {
  const auto blobs = blob_set(16, 16, 9);
  const AutoencoderResult res = train_autoencoder(blobs, 12, 40);
  REQUIRE(res.epoch_bce.size() == 41);
  for (std::size_t i = 1; i < res.epoch_bce.size(); ++i)
    REQUIRE(res.epoch_bce[i] <= res.epoch_bce[i - 1]);
  REQUIRE(res.final_bce < res.epoch_bce[0]);

  SECTION("same seed reproduces the trace, another seed does not") {
    const AutoencoderResult again = train_autoencoder(blobs, 12, 40);
    REQUIRE(again.epoch_bce == res.epoch_bce);
    const AutoencoderResult other = train_autoencoder(blobs, 12, 40, 0.1, 2);
    REQUIRE(other.epoch_bce != res.epoch_bce);
  }
}

TEST_CASE("autoencoder rejects degenerate configurations") {
  const auto blobs = blob_set(4, 16, 3);
  REQUIRE_THROWS_AS(train_autoencoder({}, 12, 1), std::invalid_argument);
  REQUIRE_THROWS_AS(train_autoencoder(blobs, 1, 1), std::invalid_argument);
  REQUIRE_THROWS_AS(train_autoencoder(blobs, 12, 1, 1.0), std::invalid_argument);

  auto ragged = blobs;
  ragged.push_back(BinaryMask(8, 8));
  REQUIRE_THROWS_AS(train_autoencoder(ragged, 12, 1), std::invalid_argument);
}

TEST_CASE("embedding codec round trip keeps shape and rejects bad sizes") {
  const auto blobs = blob_set(16, 16, 11);
  const AutoencoderResult res = train_autoencoder(blobs, 12, 30);
  const EmbeddingCodec codec(res.encoder, res.decoder);

  const std::vector<double> code = codec.encode(blobs[0]);
  for (double v : code) {
    REQUIRE(v >= 0.0);
    REQUIRE(v <= 1.0);  // sigmoid bottleneck
  }
  const BinaryMask same = codec.decode(code, 16);
  REQUIRE(same.width == 16);
  const BinaryMask big = codec.decode(code, 32);
  REQUIRE(big.width == 32);

  REQUIRE_THROWS_AS(codec.encode(BinaryMask(8, 8)), std::invalid_argument);
  REQUIRE_THROWS_AS(codec.decode(std::vector<double>(5, 0.0), 16), std::invalid_argument);
}

TEST_CASE("zero detector epochs leave the net at its baseline") {
  SynthConfig sc;
  sc.images = 6;
  sc.seed = 7;
  sc.image_side = 96;
  const Dataset ds = make_synth_dataset(sc);
  const DtCodec codec({2, 8});

  DetectorConfig cfg;
  cfg.grid = {3, 2, 3, 0};
  cfg.epochs = 0;
  cfg.seed = 3;
  const DetectorResult res = train_detector(ds, ds, codec, cfg);
  REQUIRE(res.trace.size() == 1);
  REQUIRE(res.step_losses.empty());
  REQUIRE(res.layout.spec.M == codec.code_length());

  const double rerun =
      detector_map(res.net, res.layout, codec, ds, cfg.eval_confidence, cfg.eval_nms_iou);
  REQUIRE(res.trace[0].map50 == rerun);
}

TEST_CASE("detector loss falls strictly across the first accumulated steps") {
  SynthConfig sc;
  sc.images = 16;
  sc.seed = 7;
  const Dataset ds = make_synth_dataset(sc);
  const DtCodec codec({2, 8});

  DetectorConfig cfg;
  cfg.grid = {3, 2, 3, 0};
  cfg.epochs = 5;  // 16 images make one accumulated update per epoch
  cfg.seed = 3;
  const DetectorResult res = train_detector(ds, ds, codec, cfg);
  REQUIRE(res.step_losses.size() == 5);
  for (std::size_t i = 1; i < res.step_losses.size(); ++i)
    REQUIRE(res.step_losses[i] < res.step_losses[i - 1]);

  SECTION("training is bit-reproducible from the seed") {
    const DetectorResult again = train_detector(ds, ds, codec, cfg);
    REQUIRE(again.step_losses == res.step_losses);
    for (std::size_t li = 0; li < res.net.params.size(); ++li) {
      REQUIRE(again.net.params[li].w == res.net.params[li].w);
      REQUIRE(again.net.params[li].b == res.net.params[li].b);
    }
    for (std::size_t i = 0; i < res.trace.size(); ++i) {
      REQUIRE(again.trace[i].loss == res.trace[i].loss);
      REQUIRE(again.trace[i].map50 == res.trace[i].map50);
    }
  }
}

TEST_CASE("detector training validates its configuration") {
  SynthConfig sc;
  sc.images = 2;
  sc.seed = 7;
  const Dataset ds = make_synth_dataset(sc);
  const DtCodec codec({2, 8});

  DetectorConfig bad_classes;
  bad_classes.grid = {3, 2, 5, 0};  // dataset has 3 classes
  REQUIRE_THROWS_AS(train_detector(ds, ds, codec, bad_classes), std::invalid_argument);

  DetectorConfig bad_stack;
  bad_stack.grid = {3, 2, 3, 0};
  bad_stack.channels = {8, 16};  // 96 -> 24, not 3
  REQUIRE_THROWS_AS(train_detector(ds, ds, codec, bad_stack), std::invalid_argument);

  DetectorConfig bad_code;
  bad_code.grid = {3, 2, 3, 64};  // codec emits 128 values
  REQUIRE_THROWS_AS(train_detector(ds, ds, codec, bad_code), std::invalid_argument);

  REQUIRE_THROWS_AS(train_detector(Dataset{}, ds, codec, DetectorConfig{}),
                    std::invalid_argument);
}
