#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "vitrm/tensor.hpp"

// The recursive vision model: patch embedding, one shared k-layer
// transformer block, a dual recurrent state (prediction token + latent
// memory), and the classification/halting heads. All forward functions are
// batched: activations hold `batch` stacked per-example blocks and the
// attention never crosses example boundaries.

namespace vitrm {

struct ModelConfig {
  int image_h = 32;
  int image_w = 32;
  int channels = 3;
  int patch_size = 4;
  int embed_dim = 312;
  int latent_tokens = 16;  // memory size K, independent of the patch count
  int num_heads = 8;
  int ffn_hidden = 1248;
  int block_depth = 3;
  int num_classes = 10;
  int recursion_steps = 1;       // T: memory refinements + prediction update
  int latent_steps = 3;          // M: inner memory refinements per recursion
  int max_supervision_steps = 1; // N: training-time supervised segments
  double halt_threshold = 0.5;   // tau: batch-mean halting exit

  int patch_tokens() const {
    return (image_h / patch_size) * (image_w / patch_size);
  }
  int patch_dim() const { return channels * patch_size * patch_size; }

  void validate() const {
    auto fail = [](const std::string& msg) {
      throw std::invalid_argument("model config: " + msg);
    };
    if (image_h <= 0 || image_w <= 0) fail("image_h/image_w must be positive");
    if (channels <= 0) fail("channels must be positive");
    if (patch_size <= 0) fail("patch_size must be positive");
    if (image_h % patch_size != 0)
      fail("image_h (" + std::to_string(image_h) +
           ") not divisible by patch_size (" + std::to_string(patch_size) +
           ")");
    if (image_w % patch_size != 0)
      fail("image_w (" + std::to_string(image_w) +
           ") not divisible by patch_size (" + std::to_string(patch_size) +
           ")");
    if (embed_dim < 2) fail("embed_dim must be at least 2");
    if (num_heads <= 0) fail("num_heads must be positive");
    if (embed_dim % num_heads != 0)
      fail("embed_dim (" + std::to_string(embed_dim) +
           ") not divisible by num_heads (" + std::to_string(num_heads) + ")");
    if (ffn_hidden <= 0) fail("ffn_hidden must be positive");
    if (block_depth <= 0) fail("block_depth must be positive");
    if (latent_tokens <= 0) fail("latent_tokens must be positive");
    if (num_classes < 2) fail("num_classes must be at least 2");
    if (recursion_steps < 1) fail("recursion_steps must be >= 1");
    if (latent_steps < 1) fail("latent_steps must be >= 1");
    if (max_supervision_steps < 1) fail("max_supervision_steps must be >= 1");
    if (!(halt_threshold > 0.0 && halt_threshold < 1.0))
      fail("halt_threshold must lie in (0, 1)");
  }
};

inline ModelConfig cifar10_config() { return ModelConfig{}; }

inline ModelConfig cifar100_config() {
  ModelConfig cfg;
  cfg.num_classes = 100;
  return cfg;
}

template <class Real>
struct BlockLayerT {
  TensorT<Real> attn_wq, attn_bq;
  TensorT<Real> attn_wk, attn_bk;
  TensorT<Real> attn_wv, attn_bv;
  TensorT<Real> attn_wo, attn_bo;
  TensorT<Real> ln1_gamma, ln1_beta;
  TensorT<Real> ln2_gamma, ln2_beta;
  TensorT<Real> ffn_w1, ffn_b1;
  TensorT<Real> ffn_w2, ffn_b2;
};

template <class Real>
struct ParamRefT {
  std::string name;
  TensorT<Real> tensor;
  bool weight_decay;  // biases and layer-norm affine params are exempt
};

template <class Real>
struct ModelParamsT {
  ModelConfig config;
  TensorT<Real> patch_weight;  // embed_dim x patch_dim
  TensorT<Real> patch_bias;    // 1 x embed_dim
  TensorT<Real> pos_embed;     // patch_tokens x embed_dim
  std::vector<BlockLayerT<Real>> block;  // block_depth layers, shared by
                                         // every invocation
  TensorT<Real> pred_init;    // 1 x embed_dim
  TensorT<Real> memory_init;  // latent_tokens x embed_dim
  TensorT<Real> cls_weight, cls_bias;    // num_classes x d, 1 x num_classes
  TensorT<Real> halt_weight, halt_bias;  // 1 x d, 1 x 1
};

// Fixed parameter enumeration order; the optimizer, the EMA and the
// checkpoint manifest all share it.
template <class Real>
std::vector<ParamRefT<Real>> all_params(ModelParamsT<Real>& p) {
  std::vector<ParamRefT<Real>> out;
  out.push_back({"patch.weight", p.patch_weight, true});
  out.push_back({"patch.bias", p.patch_bias, false});
  out.push_back({"pos_embed", p.pos_embed, true});
  for (std::size_t l = 0; l < p.block.size(); ++l) {
    auto& b = p.block[l];
    const std::string pre = "block" + std::to_string(l) + ".";
    out.push_back({pre + "attn.wq", b.attn_wq, true});
    out.push_back({pre + "attn.bq", b.attn_bq, false});
    out.push_back({pre + "attn.wk", b.attn_wk, true});
    out.push_back({pre + "attn.bk", b.attn_bk, false});
    out.push_back({pre + "attn.wv", b.attn_wv, true});
    out.push_back({pre + "attn.bv", b.attn_bv, false});
    out.push_back({pre + "attn.wo", b.attn_wo, true});
    out.push_back({pre + "attn.bo", b.attn_bo, false});
    out.push_back({pre + "ln1.gamma", b.ln1_gamma, false});
    out.push_back({pre + "ln1.beta", b.ln1_beta, false});
    out.push_back({pre + "ln2.gamma", b.ln2_gamma, false});
    out.push_back({pre + "ln2.beta", b.ln2_beta, false});
    out.push_back({pre + "ffn.w1", b.ffn_w1, true});
    out.push_back({pre + "ffn.b1", b.ffn_b1, false});
    out.push_back({pre + "ffn.w2", b.ffn_w2, true});
    out.push_back({pre + "ffn.b2", b.ffn_b2, false});
  }
  out.push_back({"pred_init", p.pred_init, true});
  out.push_back({"memory_init", p.memory_init, true});
  out.push_back({"head.cls.weight", p.cls_weight, true});
  out.push_back({"head.cls.bias", p.cls_bias, false});
  out.push_back({"head.halt.weight", p.halt_weight, true});
  out.push_back({"head.halt.bias", p.halt_bias, false});
  return out;
}

template <class Real>
long long count_params(ModelParamsT<Real>& p) {
  long long total = 0;
  for (const auto& ref : all_params(p))
    total += static_cast<long long>(ref.tensor.size());
  return total;
}

template <class Real>
std::vector<std::pair<std::string, long long>> param_breakdown(
    ModelParamsT<Real>& p) {
  std::vector<std::pair<std::string, long long>> rows;
  for (const auto& ref : all_params(p))
    rows.emplace_back(ref.name, static_cast<long long>(ref.tensor.size()));
  return rows;
}

template <class Real>
void zero_all_grads(ModelParamsT<Real>& p) {
  for (auto& ref : all_params(p)) ref.tensor.zero_grad();
}

namespace detail {

// Truncated normal, std 0.02, resampled beyond two standard deviations.
template <class Real>
void fill_trunc_normal(TensorT<Real>& t, std::mt19937_64& rng, double std) {
  std::normal_distribution<double> dist(0.0, std);
  Real* p = t.data();
  for (std::size_t i = 0; i < t.size(); ++i) {
    double v = dist(rng);
    while (std::abs(v) > 2.0 * std) v = dist(rng);
    p[i] = static_cast<Real>(v);
  }
}

}  // namespace detail

template <class Real>
ModelParamsT<Real> init_params(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  ModelParamsT<Real> p;
  p.config = cfg;
  const int d = cfg.embed_dim;
  std::mt19937_64 rng(seed);
  auto weight = [&](std::size_t r, std::size_t c) {
    TensorT<Real> t(r, c, true);
    detail::fill_trunc_normal(t, rng, 0.02);
    return t;
  };
  auto zeros = [&](std::size_t r, std::size_t c) {
    return TensorT<Real>::zeros(r, c, true);
  };
  auto ones = [&](std::size_t r, std::size_t c) {
    return TensorT<Real>::full(r, c, Real(1), true);
  };

  p.patch_weight = weight(d, cfg.patch_dim());
  p.patch_bias = zeros(1, d);
  p.pos_embed = weight(cfg.patch_tokens(), d);
  p.block.resize(cfg.block_depth);
  for (auto& b : p.block) {
    b.attn_wq = weight(d, d);
    b.attn_bq = zeros(1, d);
    b.attn_wk = weight(d, d);
    b.attn_bk = zeros(1, d);
    b.attn_wv = weight(d, d);
    b.attn_bv = zeros(1, d);
    b.attn_wo = weight(d, d);
    b.attn_bo = zeros(1, d);
    b.ln1_gamma = ones(1, d);
    b.ln1_beta = zeros(1, d);
    b.ln2_gamma = ones(1, d);
    b.ln2_beta = zeros(1, d);
    b.ffn_w1 = weight(cfg.ffn_hidden, d);
    b.ffn_b1 = zeros(1, cfg.ffn_hidden);
    b.ffn_w2 = weight(d, cfg.ffn_hidden);
    b.ffn_b2 = zeros(1, d);
  }
  p.pred_init = weight(1, d);
  p.memory_init = weight(cfg.latent_tokens, d);
  p.cls_weight = weight(cfg.num_classes, d);
  p.cls_bias = zeros(1, cfg.num_classes);
  p.halt_weight = weight(1, d);
  p.halt_bias = zeros(1, 1);
  return p;
}

template <class Real>
ModelParamsT<Real> clone_params(ModelParamsT<Real>& src) {
  ModelParamsT<Real> dst;
  dst.config = src.config;
  dst.block.resize(src.block.size());
  auto s = all_params(src);
  // rebuild with copied storage, preserving tracked flags
  auto copy_into = [](TensorT<Real>& out, const TensorT<Real>& in) {
    out = TensorT<Real>::from_values(in.rows(), in.cols(),
                                     std::vector<Real>(in.values()),
                                     in.tracked());
  };
  copy_into(dst.patch_weight, src.patch_weight);
  copy_into(dst.patch_bias, src.patch_bias);
  copy_into(dst.pos_embed, src.pos_embed);
  for (std::size_t l = 0; l < src.block.size(); ++l) {
    copy_into(dst.block[l].attn_wq, src.block[l].attn_wq);
    copy_into(dst.block[l].attn_bq, src.block[l].attn_bq);
    copy_into(dst.block[l].attn_wk, src.block[l].attn_wk);
    copy_into(dst.block[l].attn_bk, src.block[l].attn_bk);
    copy_into(dst.block[l].attn_wv, src.block[l].attn_wv);
    copy_into(dst.block[l].attn_bv, src.block[l].attn_bv);
    copy_into(dst.block[l].attn_wo, src.block[l].attn_wo);
    copy_into(dst.block[l].attn_bo, src.block[l].attn_bo);
    copy_into(dst.block[l].ln1_gamma, src.block[l].ln1_gamma);
    copy_into(dst.block[l].ln1_beta, src.block[l].ln1_beta);
    copy_into(dst.block[l].ln2_gamma, src.block[l].ln2_gamma);
    copy_into(dst.block[l].ln2_beta, src.block[l].ln2_beta);
    copy_into(dst.block[l].ffn_w1, src.block[l].ffn_w1);
    copy_into(dst.block[l].ffn_b1, src.block[l].ffn_b1);
    copy_into(dst.block[l].ffn_w2, src.block[l].ffn_w2);
    copy_into(dst.block[l].ffn_b2, src.block[l].ffn_b2);
  }
  copy_into(dst.pred_init, src.pred_init);
  copy_into(dst.memory_init, src.memory_init);
  copy_into(dst.cls_weight, src.cls_weight);
  copy_into(dst.cls_bias, src.cls_bias);
  copy_into(dst.halt_weight, src.halt_weight);
  copy_into(dst.halt_bias, src.halt_bias);
  return dst;
}

// ---------------------------------------------------------------------------
// forward pieces

inline thread_local long g_shared_block_calls = 0;
inline long shared_block_call_count() { return g_shared_block_calls; }
inline void reset_shared_block_call_count() { g_shared_block_calls = 0; }

// Flattens non-overlapping patches: channel-major within a patch, row-major
// over the patch grid. Images arrive as per-channel planes (CIFAR layout),
// already normalized. Output is plain data, never tracked.
template <class Real>
TensorT<Real> extract_patches(const float* images, std::size_t batch,
                              const ModelConfig& cfg) {
  const int P = cfg.patch_size;
  const int gh = cfg.image_h / P;
  const int gw = cfg.image_w / P;
  const int pd = cfg.patch_dim();
  const int plane = cfg.image_h * cfg.image_w;
  TensorT<Real> out(batch * cfg.patch_tokens(), pd);
  Real* op = out.data();
  for (std::size_t b = 0; b < batch; ++b) {
    const float* img = images + b * cfg.channels * plane;
    for (int ty = 0; ty < gh; ++ty)
      for (int tx = 0; tx < gw; ++tx) {
        Real* row =
            op + (b * cfg.patch_tokens() + ty * gw + tx) * pd;
        for (int c = 0; c < cfg.channels; ++c)
          for (int py = 0; py < P; ++py)
            for (int px = 0; px < P; ++px)
              row[c * P * P + py * P + px] = static_cast<Real>(
                  img[c * plane + (ty * P + py) * cfg.image_w + tx * P + px]);
      }
  }
  return out;
}

// Linear projection of the flattened patches plus the learned positional
// rows. The result is computed once per sample and reused, value-identical,
// by every later recursion step.
template <class Real>
TensorT<Real> patch_embed(const float* images, std::size_t batch,
                          const ModelParamsT<Real>& p) {
  auto patches = extract_patches<Real>(images, batch, p.config);
  auto projected = linear(patches, p.patch_weight, p.patch_bias);
  return add(projected, tile_rows(p.pos_embed, batch));
}

template <class Real>
TensorT<Real> patch_embed(const std::vector<float>& image,
                          const ModelParamsT<Real>& p) {
  const auto expect = static_cast<std::size_t>(p.config.channels) *
                      p.config.image_h * p.config.image_w;
  if (image.size() != expect)
    throw std::invalid_argument(
        "patch_embed: image has " + std::to_string(image.size()) +
        " values, config expects " + std::to_string(expect));
  return patch_embed(image.data(), 1, p);
}

// One pass through the shared k-layer block: pre-norm attention and FFN
// sublayers, each wrapped by a residual connection. Every invocation reads
// the same parameter arrays.
template <class Real>
TensorT<Real> shared_block(TensorT<Real> tokens, const ModelParamsT<Real>& p,
                           std::size_t batch = 1) {
  ++g_shared_block_calls;
  const auto heads = static_cast<std::size_t>(p.config.num_heads);
  for (const auto& b : p.block) {
    auto normed = layer_norm(tokens, b.ln1_gamma, b.ln1_beta);
    auto q = linear(normed, b.attn_wq, b.attn_bq);
    auto k = linear(normed, b.attn_wk, b.attn_bk);
    auto v = linear(normed, b.attn_wv, b.attn_bv);
    auto mixed = multihead_attention(q, k, v, heads, batch);
    tokens = add(tokens, linear(mixed, b.attn_wo, b.attn_bo));
    auto normed2 = layer_norm(tokens, b.ln2_gamma, b.ln2_beta);
    auto hidden = gelu(linear(normed2, b.ffn_w1, b.ffn_b1));
    tokens = add(tokens, linear(hidden, b.ffn_w2, b.ffn_b2));
  }
  return tokens;
}

template <class Real>
struct RecurrentStateT {
  std::size_t batch = 1;
  TensorT<Real> pred;    // batch x d prediction tokens
  TensorT<Real> memory;  // (batch * latent_tokens) x d latent memory
};

// Per-example replicas of the learned initial embeddings. The replicas
// share the embeddings, so gradients sum across the batch.
template <class Real>
RecurrentStateT<Real> init_state(const ModelParamsT<Real>& p,
                                 std::size_t batch) {
  RecurrentStateT<Real> s;
  s.batch = batch;
  s.pred = tile_rows(p.pred_init, batch);
  s.memory = tile_rows(p.memory_init, batch);
  return s;
}

template <class Real>
RecurrentStateT<Real> detach_state(const RecurrentStateT<Real>& s) {
  return {s.batch, detach(s.pred), detach(s.memory)};
}

// Inner memory refinement: M passes of the shared block over
// [x, pred, memory], keeping only the last K output tokens each time.
// x and pred are unchanged inputs for every inner iteration.
template <class Real>
TensorT<Real> refine_memory(const TensorT<Real>& x,
                            const RecurrentStateT<Real>& state,
                            const ModelParamsT<Real>& p, int inner_steps) {
  if (inner_steps < 1)
    throw std::invalid_argument("refine_memory: inner_steps must be >= 1");
  const auto batch = state.batch;
  const auto k = static_cast<std::size_t>(p.config.latent_tokens);
  const auto lx = static_cast<std::size_t>(p.config.patch_tokens());
  TensorT<Real> memory = state.memory;
  for (int i = 0; i < inner_steps; ++i) {
    auto tokens = concat_tokens<Real>({x, state.pred, memory}, batch);
    auto out = shared_block(tokens, p, batch);
    memory = slice_tokens(out, lx + 1, k, batch);
  }
  return memory;
}

// Prediction update: the block sees only [pred, memory]; image tokens are
// not part of this input, so visual information reaches the prediction
// exclusively through the refined memory.
template <class Real>
TensorT<Real> update_prediction(const TensorT<Real>& pred,
                                const TensorT<Real>& memory_new,
                                const ModelParamsT<Real>& p,
                                std::size_t batch) {
  auto tokens = concat_tokens<Real>({pred, memory_new}, batch);
  auto out = shared_block(tokens, p, batch);
  return slice_tokens(out, 0, 1, batch);
}

// T recursion steps of {refine memory M times, update prediction}. Returns
// the final prediction tokens and the full state for the next supervision
// step.
template <class Real>
std::pair<TensorT<Real>, RecurrentStateT<Real>> recurse(
    const TensorT<Real>& x, RecurrentStateT<Real> state,
    const ModelParamsT<Real>& p, int steps, int inner_steps) {
  if (steps < 1)
    throw std::invalid_argument("recurse: steps must be >= 1");
  for (int t = 0; t < steps; ++t) {
    state.memory = refine_memory(x, state, p, inner_steps);
    state.pred = update_prediction(state.pred, state.memory, p, state.batch);
  }
  return {state.pred, state};
}

template <class Real>
struct HeadOutputsT {
  TensorT<Real> logits;       // batch x num_classes
  TensorT<Real> halt_logits;  // batch x 1
  std::vector<Real> halt_prob;
};

template <class Real>
HeadOutputsT<Real> heads(const TensorT<Real>& pred,
                         const ModelParamsT<Real>& p) {
  HeadOutputsT<Real> out;
  out.logits = linear(pred, p.cls_weight, p.cls_bias);
  out.halt_logits = linear(pred, p.halt_weight, p.halt_bias);
  out.halt_prob.resize(out.halt_logits.rows());
  for (std::size_t r = 0; r < out.halt_logits.rows(); ++r)
    out.halt_prob[r] = sigmoid_value(out.halt_logits.at(r, 0));
  return out;
}

}  // namespace vitrm
