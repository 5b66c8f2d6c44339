#include "msn/masking.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "msn/error.hpp"

namespace msn {

MaskSpec MaskSpec::parse(const std::string& text) {
  if (text == "none") return none();
  const auto colon = text.find(':');
  const std::string kind = text.substr(0, colon);
  const std::string arg = colon == std::string::npos ? "" : text.substr(colon + 1);
  try {
    if (kind == "random") {
      std::size_t used = 0;
      const double r = std::stod(arg, &used);
      if (used != arg.size()) throw std::invalid_argument(arg);
      if (!(r >= 0.0 && r < 1.0)) throw ParameterError("mask ratio must lie in [0, 1), got " + arg);
      return random(r);
    }
    if (kind == "focal") {
      const auto x = arg.find('x');
      if (x == std::string::npos) throw std::invalid_argument(arg);
      std::size_t u1 = 0, u2 = 0;
      const std::string hs = arg.substr(0, x), ws = arg.substr(x + 1);
      const unsigned long h = std::stoul(hs, &u1), w = std::stoul(ws, &u2);
      if (u1 != hs.size() || u2 != ws.size() || h == 0 || w == 0) throw std::invalid_argument(arg);
      return focal(h, w);
    }
  } catch (const std::logic_error&) {
  }
  throw ParameterError("unrecognised mask spec '" + text + "' (expected none, random:<ratio> or focal:<h>x<w>)");
}

std::string MaskSpec::to_string() const {
  char buf[64];
  switch (kind) {
    case MaskKind::None:
      return "none";
    case MaskKind::Random:
      std::snprintf(buf, sizeof buf, "random:%.17g", ratio);
      return buf;
    case MaskKind::Focal:
      return "focal:" + std::to_string(block_h) + "x" + std::to_string(block_w);
  }
  return "none";
}

std::size_t random_keep_count(std::size_t num_patches, double ratio) {
  if (!(ratio >= 0.0 && ratio < 1.0)) {
    throw ParameterError("random_mask: ratio must lie in [0, 1), got " + std::to_string(ratio));
  }
  const auto drop = static_cast<std::size_t>(std::floor(ratio * static_cast<double>(num_patches)));
  return std::max<std::size_t>(1, num_patches - std::min(drop, num_patches));
}

std::size_t MaskSpec::kept(std::size_t grid_h, std::size_t grid_w) const {
  switch (kind) {
    case MaskKind::None:
      return grid_h * grid_w;
    case MaskKind::Random:
      return random_keep_count(grid_h * grid_w, ratio);
    case MaskKind::Focal:
      return block_h * block_w;
  }
  return 0;
}

Mask random_mask(std::size_t grid_h, std::size_t grid_w, double ratio, Rng& rng) {
  const std::size_t P = grid_h * grid_w;
  const std::size_t keep = random_keep_count(P, ratio);
  std::vector<std::size_t> idx(P);
  std::iota(idx.begin(), idx.end(), 0);
  // Partial Fisher-Yates: the first `keep` slots form a uniform sample.
  for (std::size_t i = 0; i < keep; ++i) {
    const std::size_t j = i + rng.below(P - i);
    std::swap(idx[i], idx[j]);
  }
  idx.resize(keep);
  std::sort(idx.begin(), idx.end());
  return {std::move(idx)};
}

Mask focal_mask(std::size_t grid_h, std::size_t grid_w, std::size_t block_h, std::size_t block_w, Rng& rng) {
  if (block_h < 1 || block_w < 1 || block_h > grid_h || block_w > grid_w) {
    throw ParameterError("focal_mask: block " + std::to_string(block_h) + "x" + std::to_string(block_w) +
                         " does not fit grid " + std::to_string(grid_h) + "x" + std::to_string(grid_w));
  }
  const std::size_t top = rng.below(grid_h - block_h + 1);
  const std::size_t left = rng.below(grid_w - block_w + 1);
  Mask m;
  m.keep_positions.reserve(block_h * block_w);
  for (std::size_t r = top; r < top + block_h; ++r)
    for (std::size_t c = left; c < left + block_w; ++c) m.keep_positions.push_back(r * grid_w + c);
  return m;
}

Mask identity_mask(std::size_t grid_h, std::size_t grid_w) {
  Mask m;
  m.keep_positions.resize(grid_h * grid_w);
  std::iota(m.keep_positions.begin(), m.keep_positions.end(), 0);
  return m;
}

Mask make_mask(const MaskSpec& spec, std::size_t grid_h, std::size_t grid_w, Rng& rng) {
  switch (spec.kind) {
    case MaskKind::Random:
      return random_mask(grid_h, grid_w, spec.ratio, rng);
    case MaskKind::Focal:
      return focal_mask(grid_h, grid_w, spec.block_h, spec.block_w, rng);
    case MaskKind::None:
      break;
  }
  return identity_mask(grid_h, grid_w);
}

PatchSequence apply_mask(const PatchSequence& seq, const Mask& mask) {
  if (mask.keep_positions.empty()) throw PreconditionError("apply_mask: mask keeps no patches");
  const std::size_t td = seq.tokens.dim(1);
  PatchSequence out;
  out.grid_h = seq.grid_h;
  out.grid_w = seq.grid_w;
  std::vector<double> tokens;
  tokens.reserve(mask.keep_positions.size() * td);
  // Both lists are sorted when they come from masks; fall back to search otherwise.
  std::size_t cursor = 0;
  for (std::size_t pos : mask.keep_positions) {
    std::size_t row = seq.positions.size();
    if (cursor < seq.positions.size() && seq.positions[cursor] == pos) {
      row = cursor;
    } else {
      auto it = std::find(seq.positions.begin(), seq.positions.end(), pos);
      if (it != seq.positions.end()) row = static_cast<std::size_t>(it - seq.positions.begin());
    }
    if (row == seq.positions.size()) {
      throw PreconditionError("apply_mask: mask keeps position " + std::to_string(pos) +
                              " which is absent from the sequence");
    }
    cursor = row + 1;
    out.positions.push_back(pos);
    const auto src = seq.tokens.values().subspan(row * td, td);
    tokens.insert(tokens.end(), src.begin(), src.end());
  }
  out.tokens = Tensor::from_values({out.positions.size(), td}, std::move(tokens));
  return out;
}

MaskSpec default_focal_spec(std::size_t grid_h, std::size_t grid_w, double area_fraction) {
  const double target = area_fraction * static_cast<double>(grid_h * grid_w);
  std::size_t best_h = 1, best_w = 1;
  double best_cost = 1e300;
  for (std::size_t h = 1; h <= grid_h; ++h) {
    for (std::size_t w = 1; w <= grid_w; ++w) {
      const double area_err = std::fabs(static_cast<double>(h * w) - target);
      const double aspect = static_cast<double>(std::max(h, w)) / static_cast<double>(std::min(h, w));
      const double cost = area_err + 0.5 * (aspect - 1.0);
      if (cost < best_cost - 1e-12) {
        best_cost = cost;
        best_h = h;
        best_w = w;
      }
    }
  }
  return MaskSpec::focal(best_h, best_w);
}

}  // namespace msn
