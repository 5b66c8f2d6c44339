#pragma once

// Vision Transformer trunk over variable-length (masked) patch sequences,
// plus the batch-normalised projection head used only during pre-training.

#include <cstddef>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "msn/rng.hpp"
#include "msn/tensor.hpp"

namespace msn {

struct EncoderConfig {
  std::size_t image_size = 32;
  std::size_t patch_size = 4;
  std::size_t channels = 3;
  std::size_t depth = 3;
  std::size_t hidden_dim = 64;
  std::size_t heads = 4;
  double mlp_ratio = 4.0;
  std::size_t head_hidden_dim = 64;
  std::size_t output_dim = 32;

  std::size_t grid() const { return image_size / patch_size; }
  std::size_t num_patches() const { return grid() * grid(); }
  std::size_t token_dim() const { return channels * patch_size * patch_size; }
  std::size_t mlp_dim() const;

  // Throws ParameterError when an invariant does not hold.
  void validate() const;
};

// Patch tokens [S, C*N*N] with their row-major indices into the full grid.
struct PatchSequence {
  Tensor tokens;
  std::vector<std::size_t> positions;
  std::size_t grid_h = 0;
  std::size_t grid_w = 0;

  std::size_t length() const { return positions.size(); }
};

// Named trainable tensors, ordered by name.
class ParameterSet {
 public:
  void add(const std::string& name, Tensor tensor);
  bool contains(const std::string& name) const { return tensors_.count(name) != 0; }
  const Tensor& at(const std::string& name) const;
  Tensor& at(const std::string& name);
  std::size_t size() const { return tensors_.size(); }
  std::vector<std::string> names() const;

  auto begin() { return tensors_.begin(); }
  auto end() { return tensors_.end(); }
  auto begin() const { return tensors_.begin(); }
  auto end() const { return tensors_.end(); }

  // Independent copy of every tensor as a leaf with the given requires_grad.
  ParameterSet copy(bool requires_grad) const;
  void zero_grad();

 private:
  std::map<std::string, Tensor> tensors_;
};

// Trunk + head parameters together with the head's batch-norm running statistics.
struct Encoder {
  EncoderConfig config;
  ParameterSet params;
  std::map<std::string, BatchNormStats> norm_stats;

  // Deep copy; the copy's parameters carry the given requires_grad.
  Encoder copy(bool requires_grad) const;
};

// Trunk CLS vectors [B, d_enc] and head outputs [B, d] for a batch of views.
struct Representation {
  Tensor vector;
  Tensor projected;
};

// image [C, H, W] -> (H/N)(W/N) tokens of C*N*N values each, row-major.
PatchSequence patchify(const Tensor& image, std::size_t patch_size);

ParameterSet init_params(const EncoderConfig& config, Rng& rng);
Encoder make_encoder(const EncoderConfig& config, Rng& rng);

// Row 0 is the CLS embedding; row i+1 is linear(token_i) + pos_embed[positions[i]].
Tensor embed(const PatchSequence& seq, const ParameterSet& params);
// Equal-length sequences -> [B, S+1, d_enc].
Tensor embed_batch(std::span<const PatchSequence> batch, const ParameterSet& params);

// Transformer blocks + final norm; returns the CLS row of each sequence, [B, d_enc].
Tensor encode_trunk(std::span<const PatchSequence> batch, const Encoder& encoder);
// Projection head on trunk vectors [R, d_enc] -> [R, d]; Train mode needs R >= 2.
Tensor project(const Tensor& trunk, Encoder& encoder, Mode mode);

Representation encode_batch(std::span<const PatchSequence> batch, Encoder& encoder, Mode mode);
// Single-sequence form; vector is [d_enc] and projected is [d].
Representation encode(const PatchSequence& seq, Encoder& encoder, Mode mode);

// Batches sequences by length, so callers can pass mixed-length sets.
std::vector<std::vector<std::size_t>> group_by_length(std::span<const PatchSequence> seqs);

void require_finite(const Tensor& t, const std::string& what);

}  // namespace msn
