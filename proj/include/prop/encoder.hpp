#pragma once

// Small pre-norm transformer encoder with prompt-augmented self-attention.
//
// A raw feature vector x (width input_dim) is mapped by a fixed random
// projection onto seq_len-1 content tokens of width D; a class token is placed
// at position 0 and its final-layer row is the D-dimensional feature.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <random>
#include <type_traits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "prop/autodiff.hpp"
#include "prop/errors.hpp"
#include "prop/optimizer.hpp"
#include "prop/tensor.hpp"

namespace prop {

/// Where the prompt enters attention.
enum class PromptMode : std::uint32_t {
  concat = 0,  // [h; p] feeds queries, keys and values; output truncated to the first L_h rows
  prefix = 1,  // queries from h only; [h; p] feeds keys and values
};

enum class PromptSharing : std::uint32_t {
  per_layer = 0,  // one L_p x D block per attention layer
  shared = 1,     // a single block reused by every layer
};

struct EncoderConfig {
  std::size_t input_dim = 16;
  std::size_t num_layers = 2;
  std::size_t num_heads = 2;
  std::size_t model_dim = 16;
  std::size_t seq_len = 8;  // includes the class token
  std::size_t ff_hidden = 64;
  PromptMode prompt_mode = PromptMode::concat;
  PromptSharing prompt_sharing = PromptSharing::per_layer;
  // Test-harness degenerate mode: prompt rows never act as keys or values,
  // which makes every prompt an exact no-op.
  bool mask_prompt_keys = false;

  std::size_t head_dim() const { return model_dim / num_heads; }
  std::size_t content_tokens() const { return seq_len - 1; }
  std::size_t prompt_blocks() const { return prompt_sharing == PromptSharing::shared ? 1 : num_layers; }

  void validate() const {
    if (input_dim == 0 || num_layers == 0 || num_heads == 0 || model_dim == 0 || ff_hidden == 0) {
      throw ConfigError("encoder: dimensions must be positive");
    }
    if (seq_len < 2) throw ConfigError("encoder: seq_len must leave room for the class token and one content token");
    if (model_dim % num_heads != 0) {
      throw ConfigError("encoder: model_dim " + std::to_string(model_dim) + " is not divisible by num_heads " +
                        std::to_string(num_heads));
    }
  }

  friend bool operator==(const EncoderConfig&, const EncoderConfig&) = default;
};

/// Projection matrices of one multi-head self-attention layer. Head i uses
/// columns [i*dh, (i+1)*dh) of wq, wk and wv.
struct AttentionWeights {
  Tensor wq, wk, wv;  // D x D
  Tensor wo;          // D x D
};

struct LayerParams {
  Tensor ln1_gain, ln1_bias;
  AttentionWeights attn;
  Tensor ln2_gain, ln2_bias;
  Tensor ff1_w, ff1_b;  // D x H, H
  Tensor ff2_w, ff2_b;  // H x D, D
};

/// Per-task prompt: one L_p x D block per attention layer (or a single shared block).
struct TaskPrompt {
  std::size_t task_id = 0;
  std::vector<Tensor> blocks;

  std::size_t length() const { return blocks.empty() ? 0 : blocks.front().rows(); }
  bool empty() const { return blocks.empty(); }

  static std::string block_name(std::size_t task, std::size_t layer) {
    return "prompt." + std::to_string(task) + "." + std::to_string(layer);
  }

  friend bool operator==(const TaskPrompt&, const TaskPrompt&) = default;
};

/// Attention MACs executed, split by score (QK^T) and value (AV) products and
/// by whether the pass carried a prompt.
struct MacCounter {
  std::uint64_t prompted_score = 0;
  std::uint64_t prompted_value = 0;
  std::uint64_t frozen_score = 0;
  std::uint64_t frozen_value = 0;

  std::uint64_t prompted_total() const { return prompted_score + prompted_value; }
  std::uint64_t frozen_total() const { return frozen_score + frozen_value; }
};

namespace detail {

inline Tensor gaussian(Shape shape, real stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, static_cast<double>(stddev));
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = static_cast<real>(dist(rng));
  return t;
}

}  // namespace detail

struct EncoderParams {
  EncoderConfig config;
  Tensor token_embed;  // input_dim x (content_tokens * D), never trained
  Tensor cls_token;    // 1 x D
  std::vector<LayerParams> layers;
  Tensor final_gain, final_bias;
  bool frozen = false;

  static EncoderParams init(const EncoderConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    std::mt19937_64 rng(seed);
    const std::size_t d = cfg.model_dim, h = cfg.ff_hidden;
    const real wstd = real(1) / std::sqrt(real(d));
    EncoderParams p;
    p.config = cfg;
    p.token_embed = detail::gaussian({cfg.input_dim, cfg.content_tokens() * d},
                                     real(1) / std::sqrt(real(cfg.input_dim)), rng);
    p.cls_token = detail::gaussian({1, d}, real(1), rng);
    for (std::size_t l = 0; l < cfg.num_layers; ++l) {
      LayerParams lp;
      lp.ln1_gain = Tensor({d}, real(1));
      lp.ln1_bias = Tensor({d});
      lp.attn.wq = detail::gaussian({d, d}, wstd, rng);
      lp.attn.wk = detail::gaussian({d, d}, wstd, rng);
      lp.attn.wv = detail::gaussian({d, d}, wstd, rng);
      lp.attn.wo = detail::gaussian({d, d}, wstd, rng);
      lp.ln2_gain = Tensor({d}, real(1));
      lp.ln2_bias = Tensor({d});
      lp.ff1_w = detail::gaussian({d, h}, wstd, rng);
      lp.ff1_b = Tensor({h});
      lp.ff2_w = detail::gaussian({h, d}, real(1) / std::sqrt(real(h)), rng);
      lp.ff2_b = Tensor({d});
      p.layers.push_back(std::move(lp));
    }
    p.final_gain = Tensor({d}, real(1));
    p.final_bias = Tensor({d});
    return p;
  }

  /// Every parameter tensor with its checkpoint name, in a fixed order.
  template <class Self>
  static auto named_impl(Self& self) {
    using T = std::conditional_t<std::is_const_v<Self>, const Tensor, Tensor>;
    std::vector<std::pair<std::string, T*>> out;
    out.emplace_back("embed.tokens", &self.token_embed);
    out.emplace_back("embed.cls", &self.cls_token);
    for (std::size_t l = 0; l < self.layers.size(); ++l) {
      auto& L = self.layers[l];
      const std::string pre = "layer." + std::to_string(l) + ".";
      out.emplace_back(pre + "ln1.gain", &L.ln1_gain);
      out.emplace_back(pre + "ln1.bias", &L.ln1_bias);
      out.emplace_back(pre + "attn.wq", &L.attn.wq);
      out.emplace_back(pre + "attn.wk", &L.attn.wk);
      out.emplace_back(pre + "attn.wv", &L.attn.wv);
      out.emplace_back(pre + "attn.wo", &L.attn.wo);
      out.emplace_back(pre + "ln2.gain", &L.ln2_gain);
      out.emplace_back(pre + "ln2.bias", &L.ln2_bias);
      out.emplace_back(pre + "ff1.w", &L.ff1_w);
      out.emplace_back(pre + "ff1.b", &L.ff1_b);
      out.emplace_back(pre + "ff2.w", &L.ff2_w);
      out.emplace_back(pre + "ff2.b", &L.ff2_b);
    }
    out.emplace_back("final.gain", &self.final_gain);
    out.emplace_back("final.bias", &self.final_bias);
    return out;
  }
  std::vector<std::pair<std::string, const Tensor*>> named() const { return named_impl(*this); }
  std::vector<std::pair<std::string, Tensor*>> named_mut() { return named_impl(*this); }

  /// Trainable backbone tensors (everything except the fixed token projection).
  ParamMap trainable_map() const {
    ParamMap m;
    for (const auto& [name, t] : named()) {
      if (name != "embed.tokens") m.emplace(name, *t);
    }
    return m;
  }

  void assign(const ParamMap& m) {
    if (frozen) throw ProtocolError("attempt to modify a frozen backbone");
    for (auto& [name, t] : named_mut()) {
      auto it = m.find(name);
      if (it == m.end()) continue;
      if (it->second.shape() != t->shape()) throw DimensionError("assign: shape mismatch for " + name);
      *t = it->second;
    }
  }

  std::uint64_t hash() const {
    std::uint64_t h = 1469598103934665603ull;
    for (const auto& [name, t] : named()) h = content_hash(*t, h);
    return h;
  }
};

/// Tape handles for every backbone tensor.
struct BoundLayer {
  ad::Var ln1_gain, ln1_bias, wq, wk, wv, wo, ln2_gain, ln2_bias, ff1_w, ff1_b, ff2_w, ff2_b;
};

struct BoundEncoder {
  const EncoderConfig* config = nullptr;
  ad::Var token_embed, cls_token, final_gain, final_bias;
  std::vector<BoundLayer> layers;
};

/// Places the backbone on a tape, as named parameters when `trainable`
/// (the token projection always stays constant) and as constants otherwise.
inline BoundEncoder bind(ad::Tape& tape, const EncoderParams& p, bool trainable) {
  if (trainable && p.frozen) throw ProtocolError("cannot bind a frozen backbone as trainable");
  auto put = [&](const std::string& name, const Tensor& t) {
    return trainable ? tape.parameter(name, t) : tape.constant(t);
  };
  BoundEncoder b;
  b.config = &p.config;
  b.token_embed = tape.constant(p.token_embed);
  b.cls_token = put("embed.cls", p.cls_token);
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    const auto& L = p.layers[l];
    const std::string pre = "layer." + std::to_string(l) + ".";
    b.layers.push_back(BoundLayer{put(pre + "ln1.gain", L.ln1_gain), put(pre + "ln1.bias", L.ln1_bias),
                                  put(pre + "attn.wq", L.attn.wq), put(pre + "attn.wk", L.attn.wk),
                                  put(pre + "attn.wv", L.attn.wv), put(pre + "attn.wo", L.attn.wo),
                                  put(pre + "ln2.gain", L.ln2_gain), put(pre + "ln2.bias", L.ln2_bias),
                                  put(pre + "ff1.w", L.ff1_w), put(pre + "ff1.b", L.ff1_b),
                                  put(pre + "ff2.w", L.ff2_w), put(pre + "ff2.b", L.ff2_b)});
  }
  b.final_gain = put("final.gain", p.final_gain);
  b.final_bias = put("final.bias", p.final_bias);
  return b;
}

struct AttentionOptions {
  std::size_t num_heads = 1;
  PromptMode mode = PromptMode::concat;
  bool mask_prompt_keys = false;
  MacCounter* macs = nullptr;
};

/// Multi-head self-attention over h with an optional prompt block, returning
/// exactly h.rows() output rows.
inline ad::Var attention_with_prompt(ad::Var h, std::optional<ad::Var> prompt, ad::Var wq, ad::Var wk, ad::Var wv,
                                     ad::Var wo, const AttentionOptions& opt) {
  const std::size_t lh = h.value().rows();
  const std::size_t d = h.value().cols();
  if (wq.value().rows() != d) throw DimensionError("attention: projection width differs from hidden width");
  if (opt.num_heads == 0 || d % opt.num_heads != 0) throw DimensionError("attention: width not divisible by heads");
  if (prompt && prompt->value().cols() != d) {
    throw DimensionError("attention: prompt width " + std::to_string(prompt->value().cols()) +
                         " differs from hidden width " + std::to_string(d));
  }
  const std::size_t dh = d / opt.num_heads;
  const real inv_sqrt = real(1) / std::sqrt(real(dh));

  const bool prompted = prompt.has_value();
  const ad::Var joint = prompted ? ad::concat_rows(h, *prompt) : h;
  const ad::Var kv_src = (prompted && !opt.mask_prompt_keys) ? joint : h;
  const ad::Var q_src = (prompted && opt.mode == PromptMode::concat) ? joint : h;

  const ad::Var q = ad::matmul(q_src, wq);
  const ad::Var k = ad::matmul(kv_src, wk);
  const ad::Var v = ad::matmul(kv_src, wv);
  const std::size_t rq = q.value().rows(), rk = k.value().rows();

  std::vector<ad::Var> heads;
  heads.reserve(opt.num_heads);
  for (std::size_t i = 0; i < opt.num_heads; ++i) {
    const ad::Var qi = ad::slice_cols(q, i * dh, dh);
    const ad::Var ki = ad::slice_cols(k, i * dh, dh);
    const ad::Var vi = ad::slice_cols(v, i * dh, dh);
    const ad::Var scores = ad::scale(ad::matmul(qi, ad::transpose(ki)), inv_sqrt);
    heads.push_back(ad::matmul(ad::softmax_rows(scores), vi));
  }
  if (opt.macs) {
    const std::uint64_t per = static_cast<std::uint64_t>(rq) * rk * d;
    if (prompted) {
      opt.macs->prompted_score += per;
      opt.macs->prompted_value += per;
    } else {
      opt.macs->frozen_score += per;
      opt.macs->frozen_value += per;
    }
  }
  ad::Var merged = heads.size() == 1 ? heads.front() : ad::concat_cols(heads);
  if (merged.value().rows() != lh) merged = ad::slice_rows(merged, 0, lh);
  return ad::matmul(merged, wo);
}

/// Tensor-level convenience wrapper around the taped attention.
inline Tensor attention_with_prompt(const Tensor& h, const Tensor* prompt, const AttentionWeights& w,
                                    const AttentionOptions& opt) {
  ad::Tape tape;
  const ad::Var hv = tape.constant(h);
  std::optional<ad::Var> pv;
  if (prompt) pv = tape.constant(*prompt);
  return attention_with_prompt(hv, pv, tape.constant(w.wq), tape.constant(w.wk), tape.constant(w.wv),
                               tape.constant(w.wo), opt)
      .value();
}

inline ad::Var layer_norm(ad::Var x, ad::Var gain, ad::Var bias) {
  return ad::add_row_bias(ad::mul_row(ad::normalize_rows(x), gain), bias);
}

/// Runs the encoder on one raw sample and returns the 1 x D class-token feature.
/// `prompt_blocks` is empty for the frozen path, otherwise holds
/// config.prompt_blocks() blocks.
inline ad::Var encode(const BoundEncoder& enc, std::span<const real> x, std::span<const ad::Var> prompt_blocks,
                      MacCounter* macs = nullptr) {
  const EncoderConfig& cfg = *enc.config;
  ad::Tape& tape = *enc.cls_token.tape;
  if (x.size() != cfg.input_dim) {
    throw DimensionError("encode: sample width " + std::to_string(x.size()) + " differs from input_dim " +
                         std::to_string(cfg.input_dim));
  }
  if (!prompt_blocks.empty() && prompt_blocks.size() != cfg.prompt_blocks()) {
    throw DimensionError("encode: expected " + std::to_string(cfg.prompt_blocks()) + " prompt blocks, got " +
                         std::to_string(prompt_blocks.size()));
  }
  const std::size_t d = cfg.model_dim;
  const ad::Var xv = tape.constant(Tensor::matrix(1, x.size(), std::vector<real>(x.begin(), x.end())));
  const ad::Var content = ad::reshape(ad::matmul(xv, enc.token_embed), cfg.content_tokens(), d);
  ad::Var h = ad::concat_rows(enc.cls_token, content);
  if (h.value().rows() != cfg.seq_len) throw DimensionError("encode: token count differs from seq_len");

  AttentionOptions opt{cfg.num_heads, cfg.prompt_mode, cfg.mask_prompt_keys, macs};
  for (std::size_t l = 0; l < enc.layers.size(); ++l) {
    const BoundLayer& L = enc.layers[l];
    std::optional<ad::Var> p;
    if (!prompt_blocks.empty()) p = prompt_blocks[cfg.prompt_sharing == PromptSharing::shared ? 0 : l];
    const ad::Var n1 = layer_norm(h, L.ln1_gain, L.ln1_bias);
    h = ad::add(h, attention_with_prompt(n1, p, L.wq, L.wk, L.wv, L.wo, opt));
    const ad::Var n2 = layer_norm(h, L.ln2_gain, L.ln2_bias);
    const ad::Var ff = ad::add_row_bias(
        ad::matmul(ad::gelu(ad::add_row_bias(ad::matmul(n2, L.ff1_w), L.ff1_b)), L.ff2_w), L.ff2_b);
    h = ad::add(h, ff);
  }
  return layer_norm(ad::slice_rows(h, 0, 1), enc.final_gain, enc.final_bias);
}

/// Puts a prompt's blocks on the tape, as parameters named "prompt.<task>.<layer>"
/// when trainable.
inline std::vector<ad::Var> bind_prompt(ad::Tape& tape, const TaskPrompt& prompt, bool trainable) {
  std::vector<ad::Var> out;
  for (std::size_t l = 0; l < prompt.blocks.size(); ++l) {
    out.push_back(trainable ? tape.parameter(TaskPrompt::block_name(prompt.task_id, l), prompt.blocks[l])
                            : tape.constant(prompt.blocks[l]));
  }
  return out;
}

/// Feature of one sample as a width-D vector; prompt may be null (frozen path).
inline Tensor encode(const EncoderParams& params, std::span<const real> x, const TaskPrompt* prompt,
                     MacCounter* macs = nullptr) {
  ad::Tape tape;
  const BoundEncoder enc = bind(tape, params, false);
  std::vector<ad::Var> blocks;
  if (prompt && !prompt->empty()) blocks = bind_prompt(tape, *prompt, false);
  Tensor f = encode(enc, x, blocks, macs).value();
  return f.reshaped({params.config.model_dim});
}

/// Gaussian prompt init, mean 0, the given standard deviation.
inline TaskPrompt init_prompt(std::size_t task_id, const EncoderConfig& cfg, std::size_t prompt_len, real stddev,
                              std::mt19937_64& rng) {
  TaskPrompt p;
  p.task_id = task_id;
  if (prompt_len == 0) return p;
  for (std::size_t l = 0; l < cfg.prompt_blocks(); ++l) {
    p.blocks.push_back(detail::gaussian({prompt_len, cfg.model_dim}, stddev, rng));
  }
  return p;
}

}  // namespace prop
