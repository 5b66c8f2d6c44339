#include "msn/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <numeric>

#include "msn/error.hpp"

namespace msn {

// ---------------------------------------------------------------------------
// CIFAR-10

std::vector<ImageRecord> parse_cifar10(const std::vector<std::uint8_t>& bytes) {
  if (bytes.empty() || bytes.size() % kCifarRecordBytes != 0) {
    throw FormatError("cifar10: file length " + std::to_string(bytes.size()) + " is not a positive multiple of " +
                      std::to_string(kCifarRecordBytes));
  }
  const std::size_t n = bytes.size() / kCifarRecordBytes;
  std::vector<ImageRecord> out;
  out.reserve(n);
  for (std::size_t r = 0; r < n; ++r) {
    const std::uint8_t* rec = bytes.data() + r * kCifarRecordBytes;
    if (rec[0] > 9) {
      throw FormatError("cifar10: record " + std::to_string(r) + " has label " + std::to_string(rec[0]) + " > 9");
    }
    std::vector<double> px(3072);
    for (std::size_t i = 0; i < 3072; ++i) px[i] = static_cast<double>(rec[1 + i]) / 255.0;
    out.push_back({Tensor::from_values({3, 32, 32}, std::move(px)), static_cast<int>(rec[0])});
  }
  return out;
}

std::vector<ImageRecord> load_cifar10(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cifar10: cannot open " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_cifar10(bytes);
}

std::vector<std::uint8_t> encode_cifar10_record(const ImageRecord& record) {
  if (record.pixels.shape() != Shape{3, 32, 32}) {
    throw DimensionError("cifar10: record must be [3, 32, 32], got " + shape_string(record.pixels.shape()));
  }
  if (!record.label || *record.label < 0 || *record.label > 9) throw FormatError("cifar10: label must be in 0..9");
  std::vector<std::uint8_t> out(kCifarRecordBytes);
  out[0] = static_cast<std::uint8_t>(*record.label);
  for (std::size_t i = 0; i < 3072; ++i) {
    const double v = std::clamp(record.pixels.at(i), 0.0, 1.0);
    out[1 + i] = static_cast<std::uint8_t>(std::lround(v * 255.0));
  }
  return out;
}

// ---------------------------------------------------------------------------
// synthetic shapes

namespace {

// Membership of normalised offset (u, v) in the class signature, |u|,|v| <~ 1.
bool inside(std::size_t cls, double u, double v) {
  const double au = std::fabs(u), av = std::fabs(v);
  const double r = std::sqrt(u * u + v * v);
  const double box = std::max(au, av);
  switch (cls) {
    case 0:  // disk
      return r <= 1.0;
    case 1:  // ring
      return r >= 0.55 && r <= 1.0;
    case 2:  // square
      return box <= 0.85;
    case 3:  // frame
      return box >= 0.55 && box <= 0.9;
    case 4:  // plus
      return (au <= 0.28 && av <= 1.0) || (av <= 0.28 && au <= 1.0);
    case 5:  // diagonal cross
      return std::fabs(au - av) <= 0.3 && box <= 1.0;
    case 6:  // horizontal stripes
      return box <= 0.9 && static_cast<int>(std::floor((v + 1.0) * 2.5)) % 2 == 0;
    case 7:  // vertical stripes
      return box <= 0.9 && static_cast<int>(std::floor((u + 1.0) * 2.5)) % 2 == 0;
    case 8:  // checkerboard
      return box <= 0.9 &&
             (static_cast<int>(std::floor((u + 1.0) * 2.0)) + static_cast<int>(std::floor((v + 1.0) * 2.0))) % 2 == 0;
    case 9:  // triangle, apex up
      return v >= -1.0 && v <= 0.8 && au <= (v + 1.0) / 1.8;
    default:
      return false;
  }
}

}  // namespace

std::vector<ImageRecord> synth_dataset(std::size_t classes, std::size_t per_class, std::size_t image_size, Rng& rng) {
  if (classes < 2) throw ParameterError("synth_dataset: need at least 2 classes");
  if (classes > kSynthClassLimit) {
    throw ParameterError("synth_dataset: at most " + std::to_string(kSynthClassLimit) + " classes are defined");
  }
  if (image_size < 8) throw ParameterError("synth_dataset: image_size must be >= 8");
  const std::size_t S = image_size;
  const double sz = static_cast<double>(S);
  std::vector<ImageRecord> out;
  out.reserve(classes * per_class);
  for (std::size_t c = 0; c < classes; ++c) {
    for (std::size_t n = 0; n < per_class; ++n) {
      Rng r = rng.derive({c, n});
      const double cx = r.uniform(0.3, 0.7) * sz, cy = r.uniform(0.3, 0.7) * sz;
      const double half = r.uniform(0.18, 0.32) * sz;
      // Grey levels only. A per-image hue survives brightness/contrast/saturation
      // jitter, and the encoder matched views on it instead of on shape.
      const double fg = r.uniform(0.55, 1.0);
      const double bg = r.uniform(0.0, 0.3);
      std::vector<double> px(3 * S * S);
      for (std::size_t y = 0; y < S; ++y) {
        for (std::size_t x = 0; x < S; ++x) {
          // 2x2 supersampling for soft edges.
          double cover = 0.0;
          for (int sy = 0; sy < 2; ++sy)
            for (int sx = 0; sx < 2; ++sx) {
              const double u = (static_cast<double>(x) + 0.25 + 0.5 * sx - cx) / half;
              const double v = (static_cast<double>(y) + 0.25 + 0.5 * sy - cy) / half;
              cover += inside(c, u, v) ? 0.25 : 0.0;
            }
          const double val = std::clamp(cover * fg + (1.0 - cover) * bg + r.normal(0.0, 0.05), 0.0, 1.0);
          for (std::size_t ch = 0; ch < 3; ++ch) px[(ch * S + y) * S + x] = val;
        }
      }
      out.push_back({Tensor::from_values({3, S, S}, std::move(px)), static_cast<int>(c)});
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// augmentation

const char* to_string(ViewSharing sharing) {
  switch (sharing) {
    case ViewSharing::Independent:
      return "independent";
    case ViewSharing::ColorJitterOnly:
      return "color";
    case ViewSharing::Shared:
      return "shared";
  }
  return "independent";
}

ViewSharing parse_view_sharing(const std::string& text) {
  if (text == "independent") return ViewSharing::Independent;
  if (text == "color") return ViewSharing::ColorJitterOnly;
  if (text == "shared") return ViewSharing::Shared;
  throw ParameterError("view_sharing must be independent, color or shared; got '" + text + "'");
}

AugmentPolicy AugmentPolicy::off() {
  AugmentPolicy p;
  p.crop_scale_min = p.crop_scale_max = 1.0;
  p.aspect_min = p.aspect_max = 1.0;
  p.flip_prob = p.jitter_prob = p.grayscale_prob = p.blur_prob = 0.0;
  return p;
}

ViewParams sample_view_params(std::size_t height, std::size_t width, const AugmentPolicy& policy, Rng& rng) {
  ViewParams vp;
  const double H = static_cast<double>(height), W = static_cast<double>(width);
  vp.crop = {0.0, 0.0, H, W};
  if (policy.crop_scale_min < 1.0) {
    bool found = false;
    for (int attempt = 0; attempt < 10 && !found; ++attempt) {
      const double area = rng.uniform(policy.crop_scale_min, policy.crop_scale_max) * H * W;
      const double aspect =
          std::exp(rng.uniform(std::log(policy.aspect_min), std::log(policy.aspect_max)));
      const double w = std::sqrt(area * aspect), h = std::sqrt(area / aspect);
      if (w >= 1.0 && h >= 1.0 && w <= W && h <= H) {
        vp.crop = {rng.uniform(0.0, H - h), rng.uniform(0.0, W - w), h, w};
        found = true;
      }
    }
    if (!found) {
      // Clamp to the largest admissible box at the minimum scale.
      const double side = std::sqrt(std::max(policy.crop_scale_min, 1.0 / (H * W)) * H * W);
      const double h = std::min(H, side), w = std::min(W, side);
      vp.crop = {(H - h) / 2.0, (W - w) / 2.0, h, w};
    }
    vp.full_frame = vp.crop.height == H && vp.crop.width == W;
  }
  vp.flip = rng.bernoulli(policy.flip_prob);
  vp.jitter = rng.bernoulli(policy.jitter_prob);
  if (vp.jitter) {
    vp.brightness = rng.uniform(1.0 - policy.brightness, 1.0 + policy.brightness);
    vp.contrast = rng.uniform(1.0 - policy.contrast, 1.0 + policy.contrast);
    vp.saturation = rng.uniform(1.0 - policy.saturation, 1.0 + policy.saturation);
  }
  vp.grayscale = rng.bernoulli(policy.grayscale_prob);
  if (rng.bernoulli(policy.blur_prob)) vp.blur_sigma = rng.uniform(policy.blur_sigma_min, policy.blur_sigma_max);
  return vp;
}

Tensor hflip(const Tensor& image) {
  const std::size_t C = image.dim(0), H = image.dim(1), W = image.dim(2);
  std::vector<double> out(image.numel());
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x) out[(c * H + y) * W + x] = image.at((c * H + y) * W + (W - 1 - x));
  return Tensor::from_values(image.shape(), std::move(out));
}

namespace {

std::vector<double> resized_crop(const std::vector<double>& src, std::size_t C, std::size_t H, std::size_t W,
                                 const CropBox& box) {
  std::vector<double> out(C * H * W);
  const double sy = box.height / static_cast<double>(H), sx = box.width / static_cast<double>(W);
  for (std::size_t y = 0; y < H; ++y) {
    const double fy = std::clamp(box.top + (static_cast<double>(y) + 0.5) * sy - 0.5, 0.0, static_cast<double>(H - 1));
    const auto y0 = static_cast<std::size_t>(std::floor(fy));
    const std::size_t y1 = std::min(y0 + 1, H - 1);
    const double wy = fy - static_cast<double>(y0);
    for (std::size_t x = 0; x < W; ++x) {
      const double fx =
          std::clamp(box.left + (static_cast<double>(x) + 0.5) * sx - 0.5, 0.0, static_cast<double>(W - 1));
      const auto x0 = static_cast<std::size_t>(std::floor(fx));
      const std::size_t x1 = std::min(x0 + 1, W - 1);
      const double wx = fx - static_cast<double>(x0);
      for (std::size_t c = 0; c < C; ++c) {
        const double* p = src.data() + c * H * W;
        const double top = p[y0 * W + x0] * (1.0 - wx) + p[y0 * W + x1] * wx;
        const double bot = p[y1 * W + x0] * (1.0 - wx) + p[y1 * W + x1] * wx;
        out[(c * H + y) * W + x] = top * (1.0 - wy) + bot * wy;
      }
    }
  }
  return out;
}

void to_gray(std::vector<double>& px, std::size_t HW, std::vector<double>& gray) {
  gray.resize(HW);
  for (std::size_t i = 0; i < HW; ++i) gray[i] = 0.299 * px[i] + 0.587 * px[HW + i] + 0.114 * px[2 * HW + i];
}

void color_jitter(std::vector<double>& px, std::size_t C, std::size_t HW, const ViewParams& vp) {
  for (double& v : px) v = std::clamp(v * vp.brightness, 0.0, 1.0);
  std::vector<double> gray;
  double m = 0.0;
  if (C == 3) {
    to_gray(px, HW, gray);
    m = std::accumulate(gray.begin(), gray.end(), 0.0) / static_cast<double>(HW);
  } else {
    m = std::accumulate(px.begin(), px.end(), 0.0) / static_cast<double>(px.size());
  }
  for (double& v : px) v = std::clamp((v - m) * vp.contrast + m, 0.0, 1.0);
  if (C == 3) {
    to_gray(px, HW, gray);
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t i = 0; i < HW; ++i)
        px[c * HW + i] = std::clamp(gray[i] + (px[c * HW + i] - gray[i]) * vp.saturation, 0.0, 1.0);
  }
}

void gaussian_blur(std::vector<double>& px, std::size_t C, std::size_t H, std::size_t W, double sigma) {
  // Kernel spans about a tenth of the image side.
  const std::size_t radius = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(0.05 * static_cast<double>(std::min(H, W)))));
  std::vector<double> k(2 * radius + 1);
  double total = 0.0;
  for (std::size_t i = 0; i < k.size(); ++i) {
    const double d = static_cast<double>(i) - static_cast<double>(radius);
    k[i] = std::exp(-0.5 * d * d / (sigma * sigma));
    total += k[i];
  }
  for (double& v : k) v /= total;
  std::vector<double> tmp(px.size());
  const auto r = static_cast<std::ptrdiff_t>(radius);
  auto clampi = [](std::ptrdiff_t v, std::size_t n) {
    return static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(v, 0, static_cast<std::ptrdiff_t>(n) - 1));
  };
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x) {
        double acc = 0.0;
        for (std::ptrdiff_t d = -r; d <= r; ++d)
          acc += k[static_cast<std::size_t>(d + r)] * px[(c * H + y) * W + clampi(static_cast<std::ptrdiff_t>(x) + d, W)];
        tmp[(c * H + y) * W + x] = acc;
      }
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x) {
        double acc = 0.0;
        for (std::ptrdiff_t d = -r; d <= r; ++d)
          acc += k[static_cast<std::size_t>(d + r)] * tmp[(c * H + clampi(static_cast<std::ptrdiff_t>(y) + d, H)) * W + x];
        px[(c * H + y) * W + x] = std::clamp(acc, 0.0, 1.0);  // kernel sums to 1 only up to rounding
      }
}

}  // namespace

Tensor render_view(const Tensor& image, const ViewParams& vp) {
  if (image.rank() != 3) throw DimensionError("render_view: expected [C, H, W], got " + shape_string(image.shape()));
  const std::size_t C = image.dim(0), H = image.dim(1), W = image.dim(2), HW = H * W;
  std::vector<double> px(image.values().begin(), image.values().end());
  if (!vp.full_frame) px = resized_crop(px, C, H, W, vp.crop);
  if (vp.flip) {
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t y = 0; y < H; ++y) std::reverse(px.begin() + static_cast<std::ptrdiff_t>((c * H + y) * W),
                                                       px.begin() + static_cast<std::ptrdiff_t>((c * H + y + 1) * W));
  }
  if (vp.jitter) color_jitter(px, C, HW, vp);
  if (vp.grayscale && C == 3) {
    std::vector<double> gray;
    to_gray(px, HW, gray);
    for (std::size_t c = 0; c < 3; ++c) std::copy(gray.begin(), gray.end(), px.begin() + static_cast<std::ptrdiff_t>(c * HW));
  }
  if (vp.blur_sigma > 0.0) gaussian_blur(px, C, H, W, vp.blur_sigma);
  return Tensor::from_values(image.shape(), std::move(px));
}

AugmentedViews augment(const ImageRecord& image, std::size_t anchors, const AugmentPolicy& policy, Rng& rng) {
  const Tensor& src = image.pixels;
  const std::size_t H = src.dim(1), W = src.dim(2);
  const ViewParams target = sample_view_params(H, W, policy, rng);
  AugmentedViews out;
  out.target = render_view(src, target);
  for (std::size_t m = 0; m < anchors; ++m) {
    if (policy.sharing == ViewSharing::Shared) {
      out.anchors.push_back(out.target);
      continue;
    }
    ViewParams vp = sample_view_params(H, W, policy, rng);
    if (policy.sharing == ViewSharing::ColorJitterOnly) {
      vp.crop = target.crop;
      vp.full_frame = target.full_frame;
      vp.flip = target.flip;
      vp.blur_sigma = target.blur_sigma;
    }
    out.anchors.push_back(render_view(src, vp));
  }
  return out;
}

ViewBundle make_view_bundle(const ImageRecord& image, std::span<const MaskSpec> anchor_masks, std::size_t patch_size,
                            const AugmentPolicy& policy, Rng& rng) {
  if (anchor_masks.empty()) throw PreconditionError("view bundle: need M >= 1 anchor views");
  AugmentedViews views = augment(image, anchor_masks.size(), policy, rng);
  ViewBundle b;
  b.target = patchify(views.target, patch_size);
  for (std::size_t m = 0; m < anchor_masks.size(); ++m) {
    PatchSequence seq = patchify(views.anchors[m], patch_size);
    const Mask mask = make_mask(anchor_masks[m], seq.grid_h, seq.grid_w, rng);
    b.anchors.push_back(apply_mask(seq, mask));
    b.masks.push_back(anchor_masks[m]);
  }
  return b;
}

// ---------------------------------------------------------------------------
// low-shot splits

std::vector<std::size_t> LowShotSplit::indices() const {
  std::vector<std::size_t> out;
  for (const auto& c : per_class) out.insert(out.end(), c.begin(), c.end());
  return out;
}

std::size_t num_classes(const std::vector<ImageRecord>& data) {
  int top = -1;
  for (const auto& r : data)
    if (r.label) top = std::max(top, *r.label);
  return static_cast<std::size_t>(top + 1);
}

LowShotSplit make_lowshot_split(const std::vector<ImageRecord>& pool, std::size_t k, std::uint64_t seed) {
  std::vector<int> labels(pool.size(), -1);
  for (std::size_t i = 0; i < pool.size(); ++i)
    if (pool[i].label) labels[i] = *pool[i].label;
  return make_lowshot_split(labels, k, seed);
}

LowShotSplit make_lowshot_split(const std::vector<int>& labels, std::size_t k, std::uint64_t seed) {
  if (k == 0) throw ParameterError("lowshot split: k must be >= 1");
  int top = -1;
  for (int l : labels) top = std::max(top, l);
  const auto C = static_cast<std::size_t>(top + 1);
  std::vector<std::vector<std::size_t>> by_class(C);
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (labels[i] >= 0) by_class[static_cast<std::size_t>(labels[i])].push_back(i);
  LowShotSplit split;
  split.images_per_class = k;
  split.seed = seed;
  Rng rng(seed);
  for (std::size_t c = 0; c < C; ++c) {
    auto& idx = by_class[c];
    if (idx.size() < k) {
      throw PreconditionError("lowshot split: class " + std::to_string(c) + " has " + std::to_string(idx.size()) +
                              " images, fewer than k = " + std::to_string(k));
    }
    for (std::size_t i = 0; i < k; ++i) std::swap(idx[i], idx[i + rng.below(idx.size() - i)]);
    idx.resize(k);
    std::sort(idx.begin(), idx.end());
    split.per_class.push_back(std::move(idx));
  }
  return split;
}

}  // namespace msn
