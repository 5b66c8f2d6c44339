#include "msn/vit.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "msn/error.hpp"

namespace msn {

std::size_t EncoderConfig::mlp_dim() const {
  return static_cast<std::size_t>(std::llround(mlp_ratio * static_cast<double>(hidden_dim)));
}

void EncoderConfig::validate() const {
  if (patch_size == 0 || image_size == 0 || image_size % patch_size != 0) {
    throw ParameterError("encoder: image_size " + std::to_string(image_size) + " not divisible by patch_size " +
                         std::to_string(patch_size));
  }
  if (heads == 0 || hidden_dim == 0 || hidden_dim % heads != 0) {
    throw ParameterError("encoder: hidden_dim " + std::to_string(hidden_dim) + " not divisible by heads " +
                         std::to_string(heads));
  }
  if (channels == 0 || head_hidden_dim == 0 || output_dim == 0 || mlp_dim() == 0) {
    throw ParameterError("encoder: channels, head widths and mlp width must be positive");
  }
}

// ---------------------------------------------------------------------------

void ParameterSet::add(const std::string& name, Tensor tensor) {
  if (!tensors_.emplace(name, std::move(tensor)).second) throw PreconditionError("duplicate parameter " + name);
}

const Tensor& ParameterSet::at(const std::string& name) const {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) throw PreconditionError("unknown parameter " + name);
  return it->second;
}

Tensor& ParameterSet::at(const std::string& name) {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) throw PreconditionError("unknown parameter " + name);
  return it->second;
}

std::vector<std::string> ParameterSet::names() const {
  std::vector<std::string> out;
  out.reserve(tensors_.size());
  for (const auto& [name, _] : tensors_) out.push_back(name);
  return out;
}

ParameterSet ParameterSet::copy(bool requires_grad) const {
  ParameterSet out;
  for (const auto& [name, t] : tensors_) {
    Tensor c = t.detach();
    c.set_requires_grad(requires_grad);
    out.add(name, std::move(c));
  }
  return out;
}

void ParameterSet::zero_grad() {
  for (auto& [_, t] : tensors_) t.zero_grad();
}

Encoder Encoder::copy(bool requires_grad) const { return Encoder{config, params.copy(requires_grad), norm_stats}; }

// ---------------------------------------------------------------------------

PatchSequence patchify(const Tensor& image, std::size_t patch_size) {
  if (image.rank() != 3) throw DimensionError("patchify: expected [C, H, W], got " + shape_string(image.shape()));
  const std::size_t C = image.dim(0), H = image.dim(1), W = image.dim(2);
  if (patch_size == 0 || H % patch_size != 0 || W % patch_size != 0) {
    throw DimensionError("patchify: image " + shape_string(image.shape()) + " not divisible into " +
                         std::to_string(patch_size) + "x" + std::to_string(patch_size) + " patches");
  }
  const std::size_t gh = H / patch_size, gw = W / patch_size, N = patch_size;
  const std::size_t td = C * N * N;
  std::vector<double> tokens(gh * gw * td);
  const double* px = image.values().data();
  for (std::size_t py = 0; py < gh; ++py) {
    for (std::size_t pxi = 0; pxi < gw; ++pxi) {
      double* dst = tokens.data() + (py * gw + pxi) * td;
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t dy = 0; dy < N; ++dy)
          for (std::size_t dx = 0; dx < N; ++dx)
            *dst++ = px[(c * H + py * N + dy) * W + pxi * N + dx];
    }
  }
  PatchSequence seq;
  seq.tokens = Tensor::from_values({gh * gw, td}, std::move(tokens));
  seq.positions.resize(gh * gw);
  for (std::size_t i = 0; i < gh * gw; ++i) seq.positions[i] = i;
  seq.grid_h = gh;
  seq.grid_w = gw;
  return seq;
}

namespace {

void add_linear(ParameterSet& ps, const std::string& name, std::size_t in, std::size_t out, Rng& rng,
                bool with_bias = true) {
  std::vector<double> w(in * out);
  for (double& v : w) v = rng.truncated_normal(0.02);
  ps.add(name + ".weight", Tensor::from_values({in, out}, std::move(w), true));
  if (with_bias) ps.add(name + ".bias", Tensor::zeros({out}, true));
}

void add_norm(ParameterSet& ps, const std::string& name, std::size_t d, bool with_bias = true) {
  ps.add(name + ".gain", Tensor::full({d}, 1.0, true));
  if (with_bias) ps.add(name + ".bias", Tensor::zeros({d}, true));
}

std::string block_prefix(std::size_t i) { return "blocks." + std::to_string(i) + "."; }

}  // namespace

ParameterSet init_params(const EncoderConfig& config, Rng& rng) {
  config.validate();
  const std::size_t d = config.hidden_dim;
  ParameterSet ps;
  add_linear(ps, "patch_embed", config.token_dim(), d, rng);
  ps.add("cls_token", Tensor::zeros({d}, true));
  std::vector<double> pos(config.num_patches() * d);
  for (double& v : pos) v = rng.normal(0.0, 0.02);
  ps.add("pos_embed", Tensor::from_values({config.num_patches(), d}, std::move(pos), true));
  for (std::size_t i = 0; i < config.depth; ++i) {
    const std::string p = block_prefix(i);
    add_norm(ps, p + "norm1", d);
    add_linear(ps, p + "attn.query", d, d, rng);
    // a key bias only shifts each query's scores by a constant, which softmax ignores
    add_linear(ps, p + "attn.key", d, d, rng, false);
    add_linear(ps, p + "attn.value", d, d, rng);
    add_linear(ps, p + "attn.proj", d, d, rng);
    add_norm(ps, p + "norm2", d);
    add_linear(ps, p + "mlp.fc1", d, config.mlp_dim(), rng);
    add_linear(ps, p + "mlp.fc2", config.mlp_dim(), d, rng);
  }
  // No shift on the last norm: the head's batch-statistics norm removes it,
  // so it would never receive a gradient.
  add_norm(ps, "norm", d, false);
  const std::size_t h = config.head_hidden_dim;
  add_norm(ps, "head.bn0", d);
  add_linear(ps, "head.fc1", d, h, rng);
  add_norm(ps, "head.bn1", h);
  add_linear(ps, "head.fc2", h, h, rng);
  add_linear(ps, "head.fc3", h, config.output_dim, rng);
  return ps;
}

Encoder make_encoder(const EncoderConfig& config, Rng& rng) {
  Encoder enc{config, init_params(config, rng), {}};
  enc.norm_stats.emplace("head.bn0", BatchNormStats(config.hidden_dim));
  enc.norm_stats.emplace("head.bn1", BatchNormStats(config.head_hidden_dim));
  return enc;
}

// ---------------------------------------------------------------------------

Tensor embed_batch(std::span<const PatchSequence> batch, const ParameterSet& params) {
  if (batch.empty()) throw PreconditionError("embed: empty batch");
  const Tensor& w = params.at("patch_embed.weight");
  const Tensor& pos = params.at("pos_embed");
  const std::size_t td = w.dim(0), d = w.dim(1), P = pos.dim(0);
  const std::size_t S = batch[0].length();
  const std::size_t B = batch.size();
  std::vector<double> tokens;
  tokens.reserve(B * S * td);
  std::vector<std::size_t> positions;
  positions.reserve(B * S);
  for (const PatchSequence& seq : batch) {
    if (seq.length() == 0) throw PreconditionError("embed: sequence must contain at least one patch");
    if (seq.length() != S) {
      throw DimensionError("embed: batch mixes sequence lengths " + std::to_string(S) + " and " +
                           std::to_string(seq.length()));
    }
    if (seq.tokens.rank() != 2 || seq.tokens.dim(0) != S || seq.tokens.dim(1) != td) {
      throw DimensionError("embed: tokens " + shape_string(seq.tokens.shape()) + " do not match embedding weight " +
                           shape_string(w.shape()));
    }
    for (std::size_t p : seq.positions) {
      if (p >= P) {
        throw DimensionError("embed: position " + std::to_string(p) + " outside the " + std::to_string(P) +
                             "-patch grid");
      }
      positions.push_back(p);
    }
    tokens.insert(tokens.end(), seq.tokens.values().begin(), seq.tokens.values().end());
  }
  Tensor x = Tensor::from_values({B * S, td}, std::move(tokens));
  Tensor h = add(linear(x, w, params.at("patch_embed.bias")), gather_rows(pos, positions));
  h = reshape(h, {B, S, d});
  Tensor cls = reshape(repeat(params.at("cls_token"), B), {B, 1, d});
  const Tensor parts[] = {cls, h};
  return concat(parts, 1);
}

Tensor embed(const PatchSequence& seq, const ParameterSet& params) {
  Tensor out = embed_batch(std::span<const PatchSequence>(&seq, 1), params);
  return reshape(out, {out.dim(1), out.dim(2)});
}

namespace {

Tensor norm(const Tensor& x, const ParameterSet& ps, const std::string& name) {
  const Tensor& gain = ps.at(name + ".gain");
  const std::string bias = name + ".bias";
  return layer_norm(x, gain, ps.contains(bias) ? ps.at(bias) : Tensor::zeros(gain.shape()));
}

Tensor dense(const Tensor& x, const ParameterSet& ps, const std::string& name) {
  const std::string bias = name + ".bias";
  return linear(x, ps.at(name + ".weight"), ps.contains(bias) ? ps.at(bias) : Tensor());
}

// [B, L, d] -> [B*H, L, d/H]
Tensor split_heads(const Tensor& x, std::size_t heads) {
  const std::size_t B = x.dim(0), L = x.dim(1), d = x.dim(2), dh = d / heads;
  return reshape(transpose(reshape(x, {B, L, heads, dh}), 1, 2), {B * heads, L, dh});
}

// [B*H, L, dh] -> [B, L, H*dh]
Tensor merge_heads(const Tensor& x, std::size_t batch, std::size_t heads) {
  const std::size_t L = x.dim(1), dh = x.dim(2);
  return reshape(transpose(reshape(x, {batch, heads, L, dh}), 1, 2), {batch, L, heads * dh});
}

// With cls_only, only row 0 is carried out of the block: keys and values still
// span every token, but the query, residual and MLP are computed for CLS alone.
Tensor block(const Tensor& x, const ParameterSet& ps, std::size_t index, const EncoderConfig& cfg, bool cls_only) {
  const std::string p = block_prefix(index);
  const std::size_t B = x.dim(0);
  const std::size_t dh = cfg.hidden_dim / cfg.heads;
  Tensor h = norm(x, ps, p + "norm1");
  Tensor residual = cls_only ? slice(x, 1, 0, 1) : x;
  Tensor q = split_heads(dense(cls_only ? slice(h, 1, 0, 1) : h, ps, p + "attn.query"), cfg.heads);
  Tensor k = split_heads(dense(h, ps, p + "attn.key"), cfg.heads);
  Tensor v = split_heads(dense(h, ps, p + "attn.value"), cfg.heads);
  Tensor attn = softmax(bmm(q, k, true), std::sqrt(static_cast<double>(dh)));
  Tensor ctx = merge_heads(bmm(attn, v), B, cfg.heads);
  Tensor y = add(residual, dense(ctx, ps, p + "attn.proj"));
  Tensor m = dense(gelu(dense(norm(y, ps, p + "norm2"), ps, p + "mlp.fc1")), ps, p + "mlp.fc2");
  return add(y, m);
}

}  // namespace

void require_finite(const Tensor& t, const std::string& what) {
  for (double v : t.values()) {
    if (!std::isfinite(v)) throw NumericError(what + ": non-finite value in output");
  }
}

Tensor encode_trunk(std::span<const PatchSequence> batch, const Encoder& encoder) {
  const ParameterSet& ps = encoder.params;
  Tensor x = embed_batch(batch, ps);
  const std::size_t depth = encoder.config.depth;
  for (std::size_t i = 0; i < depth; ++i) x = block(x, ps, i, encoder.config, i + 1 == depth);
  const std::size_t B = x.dim(0), d = x.dim(2);
  // Layer norm is row-wise, so normalising only the CLS rows is exact.
  Tensor cls = reshape(slice(x, 1, 0, 1), {B, d});
  Tensor out = norm(cls, ps, "norm");
  require_finite(out, "encode");
  return out;
}

Tensor project(const Tensor& trunk, Encoder& encoder, Mode mode) {
  const ParameterSet& ps = encoder.params;
  auto bn = [&](const Tensor& x, const std::string& name) {
    return batch_norm_1d(x, ps.at(name + ".gain"), ps.at(name + ".bias"), encoder.norm_stats.at(name), mode);
  };
  Tensor h = gelu(dense(bn(trunk, "head.bn0"), ps, "head.fc1"));
  h = gelu(dense(bn(h, "head.bn1"), ps, "head.fc2"));
  Tensor out = dense(h, ps, "head.fc3");
  require_finite(out, "projection head");
  return out;
}

Representation encode_batch(std::span<const PatchSequence> batch, Encoder& encoder, Mode mode) {
  Tensor trunk = encode_trunk(batch, encoder);
  return {trunk, project(trunk, encoder, mode)};
}

Representation encode(const PatchSequence& seq, Encoder& encoder, Mode mode) {
  Representation r = encode_batch(std::span<const PatchSequence>(&seq, 1), encoder, mode);
  return {reshape(r.vector, {r.vector.numel()}), reshape(r.projected, {r.projected.numel()})};
}

std::vector<std::vector<std::size_t>> group_by_length(std::span<const PatchSequence> seqs) {
  std::map<std::size_t, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < seqs.size(); ++i) groups[seqs[i].length()].push_back(i);
  std::vector<std::vector<std::size_t>> out;
  for (auto& [_, idx] : groups) out.push_back(std::move(idx));
  return out;
}

}  // namespace msn
