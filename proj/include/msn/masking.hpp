#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "msn/rng.hpp"
#include "msn/vit.hpp"

namespace msn {

enum class MaskKind { None, Random, Focal };

struct MaskSpec {
  MaskKind kind = MaskKind::None;
  double ratio = 0.0;        // Random: fraction of patches dropped
  std::size_t block_h = 0;   // Focal: kept rectangle, in patches
  std::size_t block_w = 0;

  static MaskSpec none() { return {}; }
  static MaskSpec random(double ratio) { return {MaskKind::Random, ratio, 0, 0}; }
  static MaskSpec focal(std::size_t h, std::size_t w) { return {MaskKind::Focal, 0.0, h, w}; }

  // "none", "random:0.5", "focal:3x4"
  static MaskSpec parse(const std::string& text);
  std::string to_string() const;

  // Number of patches kept on a grid_h x grid_w grid.
  std::size_t kept(std::size_t grid_h, std::size_t grid_w) const;

  friend bool operator==(const MaskSpec&, const MaskSpec&) = default;
};

// Sorted, unique grid indices that survive masking.
struct Mask {
  std::vector<std::size_t> keep_positions;
};

// Keep count for a random mask: max(1, P - floor(ratio * P)).
std::size_t random_keep_count(std::size_t num_patches, double ratio);

Mask random_mask(std::size_t grid_h, std::size_t grid_w, double ratio, Rng& rng);
Mask focal_mask(std::size_t grid_h, std::size_t grid_w, std::size_t block_h, std::size_t block_w, Rng& rng);
Mask identity_mask(std::size_t grid_h, std::size_t grid_w);
Mask make_mask(const MaskSpec& spec, std::size_t grid_h, std::size_t grid_w, Rng& rng);

// Sub-sequence at the kept positions, original order preserved.
PatchSequence apply_mask(const PatchSequence& seq, const Mask& mask);

// Focal block closest to `area_fraction` of the grid, as square as possible.
MaskSpec default_focal_spec(std::size_t grid_h, std::size_t grid_w, double area_fraction = (96.0 * 96.0) / (224.0 * 224.0));

}  // namespace msn
