#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "msn/masking.hpp"
#include "msn/rng.hpp"
#include "msn/tensor.hpp"
#include "msn/vit.hpp"

namespace msn {

struct ImageRecord {
  Tensor pixels;  // [C, H, W] in [0, 1]
  std::optional<int> label;
};

// ---- CIFAR-10 binary layout: 1 label byte + 3072 bytes (R, G, B planes of 32x32) ----
inline constexpr std::size_t kCifarRecordBytes = 3073;

std::vector<ImageRecord> load_cifar10(const std::string& path);
std::vector<ImageRecord> parse_cifar10(const std::vector<std::uint8_t>& bytes);
std::vector<std::uint8_t> encode_cifar10_record(const ImageRecord& record);

// ---- synthetic shapes ----
inline constexpr std::size_t kSynthClassLimit = 10;

// `per_class` images of each of `classes` shape signatures, labels grouped by class.
std::vector<ImageRecord> synth_dataset(std::size_t classes, std::size_t per_class, std::size_t image_size, Rng& rng);

// ---- augmentation ----

// Which augmentations anchors share with the target view.
enum class ViewSharing {
  Independent,     // every view draws its own crop, flip, colour and blur
  ColorJitterOnly, // anchors reuse the target geometry and blur, colour drawn independently
  Shared,          // anchors are pixel-identical to the target
};

const char* to_string(ViewSharing sharing);
ViewSharing parse_view_sharing(const std::string& text);

struct AugmentPolicy {
  double crop_scale_min = 0.3;
  double crop_scale_max = 1.0;
  double aspect_min = 3.0 / 4.0;
  double aspect_max = 4.0 / 3.0;
  double flip_prob = 0.5;
  double jitter_prob = 0.8;
  double brightness = 0.4;
  double contrast = 0.4;
  double saturation = 0.4;
  double grayscale_prob = 0.2;
  double blur_prob = 0.5;
  double blur_sigma_min = 0.1;
  double blur_sigma_max = 2.0;
  ViewSharing sharing = ViewSharing::Independent;

  // Every augmentation disabled: views equal the input.
  static AugmentPolicy off();
};

struct CropBox {
  double top = 0.0, left = 0.0, height = 0.0, width = 0.0;  // pixels, continuous
};

struct ViewParams {
  CropBox crop;
  bool full_frame = true;
  bool flip = false;
  bool jitter = false;
  double brightness = 1.0, contrast = 1.0, saturation = 1.0;
  bool grayscale = false;
  double blur_sigma = 0.0;  // 0 = no blur
};

ViewParams sample_view_params(std::size_t height, std::size_t width, const AugmentPolicy& policy, Rng& rng);
Tensor render_view(const Tensor& image, const ViewParams& params);
Tensor hflip(const Tensor& image);

struct AugmentedViews {
  Tensor target;
  std::vector<Tensor> anchors;
};

AugmentedViews augment(const ImageRecord& image, std::size_t anchors, const AugmentPolicy& policy, Rng& rng);

// One unmasked target and M masked anchors for a single image.
struct ViewBundle {
  PatchSequence target;
  std::vector<PatchSequence> anchors;
  std::vector<MaskSpec> masks;
};

ViewBundle make_view_bundle(const ImageRecord& image, std::span<const MaskSpec> anchor_masks, std::size_t patch_size,
                            const AugmentPolicy& policy, Rng& rng);

// ---- low-shot splits ----
struct LowShotSplit {
  std::size_t images_per_class = 0;
  std::uint64_t seed = 0;
  std::vector<std::vector<std::size_t>> per_class;  // indices into the labelled pool, by class id

  std::vector<std::size_t> indices() const;
};

std::size_t num_classes(const std::vector<ImageRecord>& data);
LowShotSplit make_lowshot_split(const std::vector<ImageRecord>& pool, std::size_t k, std::uint64_t seed);
// Same split from bare class ids (negative ids are unlabelled and never picked).
LowShotSplit make_lowshot_split(const std::vector<int>& labels, std::size_t k, std::uint64_t seed);

}  // namespace msn
