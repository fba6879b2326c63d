#pragma once

// Closed-form inference cost of prompt-prototype scoring versus key-value
// retrieval, and an empirical attention-MAC count to check it against.
//
// Counting convention: a (rows_q x dh) by (dh x rows_k) score product costs
// rows_q * rows_k * dh MACs per head, so rows_q * rows_k * D summed over
// heads; the value product costs the same again. The closed-form forward term
// L * (L_h + L_p)^2 * D therefore equals the *score* MACs of one prompted pass
// in concat mode, and half of the score+value total.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "prop/encoder.hpp"
#include "prop/errors.hpp"
#include "prop/prop_core.hpp"

namespace prop {

struct CostModel {
  std::uint64_t tasks = 1;          // T
  std::uint64_t layers = 1;         // L
  std::uint64_t seq_len = 1;        // L_h
  std::uint64_t prompt_len = 0;     // L_p
  std::uint64_t model_dim = 1;      // D
  std::uint64_t pool_size = 1;      // P, keys in the key-value pool
  std::uint64_t top_k = 1;          // k, prompts retrieved per query
};

struct CostEstimate {
  std::uint64_t prop_similarity = 0;  // T * L_p * D
  std::uint64_t prop_forward = 0;     // T * L * (L_h + L_p)^2 * D
  std::uint64_t prop_total = 0;
  std::uint64_t kv_matching = 0;      // P * L_p * D
  std::uint64_t kv_forward = 0;       // L * (L_h + k * L_p)^2 * D
  std::uint64_t kv_total = 0;
};

namespace detail {

inline std::uint64_t checked_mul(std::uint64_t a, std::uint64_t b) {
  std::uint64_t r;
  if (__builtin_mul_overflow(a, b, &r)) throw OverflowError("cost model: multiplication overflows u64");
  return r;
}

inline std::uint64_t checked_add(std::uint64_t a, std::uint64_t b) {
  std::uint64_t r;
  if (__builtin_add_overflow(a, b, &r)) throw OverflowError("cost model: addition overflows u64");
  return r;
}

template <class... Ts>
std::uint64_t product(std::uint64_t first, Ts... rest) {
  std::uint64_t r = first;
  ((r = checked_mul(r, rest)), ...);
  return r;
}

}  // namespace detail

inline CostEstimate flop_estimate(const CostModel& m) {
  if (m.tasks == 0 || m.layers == 0 || m.seq_len == 0 || m.model_dim == 0 || m.pool_size == 0 || m.top_k == 0) {
    throw ConfigError("cost model: T, L, L_h, D, P and k must be positive");
  }
  using detail::checked_add;
  using detail::product;
  CostEstimate e;
  const std::uint64_t prop_seq = checked_add(m.seq_len, m.prompt_len);
  e.prop_similarity = product(m.tasks, m.prompt_len, m.model_dim);
  e.prop_forward = product(m.tasks, m.layers, prop_seq, prop_seq, m.model_dim);
  e.prop_total = checked_add(e.prop_similarity, e.prop_forward);
  const std::uint64_t kv_seq = checked_add(m.seq_len, product(m.top_k, m.prompt_len));
  e.kv_matching = product(m.pool_size, m.prompt_len, m.model_dim);
  e.kv_forward = product(m.layers, kv_seq, kv_seq, m.model_dim);
  e.kv_total = checked_add(e.kv_matching, e.kv_forward);
  return e;
}

/// Attention MACs actually executed by one predict call.
inline MacCounter measure_macs(std::span<const real> x, const EncoderParams& params, const PropModel& model) {
  MacCounter macs;
  (void)predict(x, params, model, &macs);
  return macs;
}

/// Attention MACs of a single encode (frozen path when prompt is null).
inline MacCounter measure_encode_macs(std::span<const real> x, const EncoderParams& params, const TaskPrompt* prompt) {
  MacCounter macs;
  (void)encode(params, x, prompt, &macs);
  return macs;
}

inline CostModel cost_model_for(const EncoderParams& params, const PropModel& model) {
  CostModel m;
  m.tasks = model.prompts.size();
  m.layers = params.config.num_layers;
  m.seq_len = params.config.seq_len;
  m.prompt_len = model.prompts.empty() ? 0 : model.prompts.front().length();
  m.model_dim = params.config.model_dim;
  m.pool_size = model.prompts.empty() ? 1 : model.prompts.size();
  m.top_k = 1;
  return m;
}

}  // namespace prop
