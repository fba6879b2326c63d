#pragma once

// PROPCKPT: little-endian binary checkpoint.
//
//   magic      8 bytes  "PROPCKPT"
//   version    u32      (kCheckpointVersion)
//   config     9 x u32  input_dim, num_layers, num_heads, model_dim, seq_len,
//                       ff_hidden, prompt_mode, prompt_sharing, mask_prompt_keys
//   count      u32      number of tensors
//   tensors    count x { name_len u32, name bytes, rank u32, dims rank x u32,
//                        data product(dims) x float64 }
//
// Backbone tensors use the names of EncoderParams::named(); prompts are
// "prompt.<task>.<layer>", prototypes "proto.<class>" with their task in
// "proto_task.<class>", keys "key.<task>", the fusion strategy "meta.fusion",
// and "meta.frozen" (1 if the backbone was never trained on stream data).

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "prop/baselines.hpp"
#include "prop/encoder.hpp"
#include "prop/errors.hpp"
#include "prop/prop_core.hpp"
#include "prop/tensor.hpp"

namespace prop {

inline constexpr std::array<char, 8> kCheckpointMagic{'P', 'R', 'O', 'P', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

struct CheckpointData {
  EncoderConfig config;
  NamedTensors tensors;

  const Tensor* find(const std::string& name) const {
    for (const auto& [n, t] : tensors)
      if (n == name) return &t;
    return nullptr;
  }
};

namespace detail {

class ByteWriter {
 public:
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  void f64(double v) {
    const auto u = std::bit_cast<std::uint64_t>(v);
    for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<char>((u >> (8 * i)) & 0xff));
  }
  void bytes(const char* p, std::size_t n) { buf_.append(p, n); }
  std::string take() { return std::move(buf_); }

 private:
  std::string buf_;
};

class ByteReader {
 public:
  explicit ByteReader(const std::string& b) : b_(b) {}
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(static_cast<unsigned char>(b_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }
  double f64() {
    need(8);
    std::uint64_t u = 0;
    for (int i = 0; i < 8; ++i) u |= std::uint64_t(static_cast<unsigned char>(b_[pos_ + i])) << (8 * i);
    pos_ += 8;
    return std::bit_cast<double>(u);
  }
  std::string str(std::size_t n) {
    need(n);
    std::string s = b_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == b_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > b_.size()) throw IoError("checkpoint truncated");
  }
  const std::string& b_;
  std::size_t pos_ = 0;
};

inline std::uint32_t narrow_u32(std::size_t v, const char* what) {
  if (v > 0xffffffffu) throw IoError(std::string("checkpoint: ") + what + " exceeds u32");
  return static_cast<std::uint32_t>(v);
}

}  // namespace detail

inline std::string serialize_checkpoint(const CheckpointData& ck) {
  detail::ByteWriter w;
  w.bytes(kCheckpointMagic.data(), kCheckpointMagic.size());
  w.u32(kCheckpointVersion);
  const EncoderConfig& c = ck.config;
  for (std::size_t v : {c.input_dim, c.num_layers, c.num_heads, c.model_dim, c.seq_len, c.ff_hidden}) {
    w.u32(detail::narrow_u32(v, "config field"));
  }
  w.u32(static_cast<std::uint32_t>(c.prompt_mode));
  w.u32(static_cast<std::uint32_t>(c.prompt_sharing));
  w.u32(c.mask_prompt_keys ? 1u : 0u);
  w.u32(detail::narrow_u32(ck.tensors.size(), "tensor count"));
  for (const auto& [name, t] : ck.tensors) {
    w.u32(detail::narrow_u32(name.size(), "name length"));
    w.bytes(name.data(), name.size());
    w.u32(detail::narrow_u32(t.rank(), "rank"));
    for (auto d : t.shape()) w.u32(detail::narrow_u32(d, "dimension"));
    for (auto v : t.data()) w.f64(static_cast<double>(v));
  }
  return w.take();
}

inline CheckpointData parse_checkpoint(const std::string& bytes) {
  detail::ByteReader r(bytes);
  const std::string magic = r.str(kCheckpointMagic.size());
  if (magic != std::string(kCheckpointMagic.begin(), kCheckpointMagic.end())) throw IoError("not a PROPCKPT file");
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) throw IoError("unsupported checkpoint version " + std::to_string(version));
  CheckpointData ck;
  EncoderConfig& c = ck.config;
  c.input_dim = r.u32();
  c.num_layers = r.u32();
  c.num_heads = r.u32();
  c.model_dim = r.u32();
  c.seq_len = r.u32();
  c.ff_hidden = r.u32();
  const std::uint32_t mode = r.u32(), sharing = r.u32(), mask = r.u32();
  if (mode > 1 || sharing > 1 || mask > 1) throw IoError("checkpoint: invalid encoder enum field");
  c.prompt_mode = static_cast<PromptMode>(mode);
  c.prompt_sharing = static_cast<PromptSharing>(sharing);
  c.mask_prompt_keys = mask != 0;
  const std::uint32_t count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = r.str(r.u32());
    const std::uint32_t rank = r.u32();
    if (rank == 0 || rank > 8) throw IoError("checkpoint: tensor '" + name + "' has invalid rank");
    Shape shape;
    for (std::uint32_t k = 0; k < rank; ++k) shape.push_back(r.u32());
    std::vector<real> data(shape_size(shape));
    for (auto& v : data) v = static_cast<real>(r.f64());
    ck.tensors.emplace_back(std::move(name), Tensor(std::move(shape), std::move(data)));
  }
  if (!r.done()) throw IoError("checkpoint: trailing bytes");
  return ck;
}

/// Writes to a temporary sibling and renames it into place.
inline void write_file_atomic(const std::filesystem::path& path, const std::string& contents) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    if (!out) throw IoError("write failed: " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

inline void save_checkpoint(const std::filesystem::path& path, const CheckpointData& ck) {
  write_file_atomic(path, serialize_checkpoint(ck));
}

inline CheckpointData load_checkpoint(const std::filesystem::path& path) { return parse_checkpoint(read_file(path)); }

// ---------------------------------------------------------------------------
// Model <-> named tensors

/// Backbone, plus optionally the learner state and keys, as a checkpoint.
inline CheckpointData to_checkpoint(const EncoderParams& params, const PropModel* model = nullptr,
                                    const KeyPool* keys = nullptr) {
  CheckpointData ck;
  ck.config = params.config;
  for (const auto& [name, t] : params.named()) ck.tensors.emplace_back(name, *t);
  ck.tensors.emplace_back("meta.frozen", Tensor::vector({params.frozen ? real(1) : real(0)}));
  if (model) {
    ck.tensors.emplace_back("meta.fusion", Tensor::vector({static_cast<real>(model->bank.fusion())}));
    for (const auto& p : model->prompts) {
      for (std::size_t l = 0; l < p.blocks.size(); ++l) ck.tensors.emplace_back(TaskPrompt::block_name(p.task_id, l), p.blocks[l]);
    }
    for (const auto& [cls, e] : model->bank.entries()) {
      ck.tensors.emplace_back("proto." + std::to_string(cls), e.vector);
      ck.tensors.emplace_back("proto_task." + std::to_string(cls), Tensor::vector({static_cast<real>(e.task_id)}));
    }
  }
  if (keys) {
    for (const auto& [task, k] : keys->keys()) ck.tensors.emplace_back(KeyPool::key_name(task), k);
  }
  return ck;
}

inline EncoderParams params_from_checkpoint(const CheckpointData& ck) {
  ck.config.validate();
  EncoderParams p = EncoderParams::init(ck.config, 0);
  for (auto& [name, t] : p.named_mut()) {
    const Tensor* src = ck.find(name);
    if (!src) throw IoError("checkpoint: missing backbone tensor '" + name + "'");
    if (src->shape() != t->shape()) throw IoError("checkpoint: shape mismatch for '" + name + "'");
    *t = *src;
  }
  const Tensor* frozen = ck.find("meta.frozen");
  p.frozen = frozen && frozen->item() != 0;
  return p;
}

namespace detail {

inline std::optional<std::pair<std::size_t, std::size_t>> parse_prompt_name(const std::string& name) {
  if (name.rfind("prompt.", 0) != 0) return std::nullopt;
  const auto dot = name.find('.', 7);
  if (dot == std::string::npos) return std::nullopt;
  return std::make_pair(static_cast<std::size_t>(std::stoull(name.substr(7, dot - 7))),
                        static_cast<std::size_t>(std::stoull(name.substr(dot + 1))));
}

}  // namespace detail

/// Rebuilds prompts (in task-id order) and the prototype bank.
inline PropModel model_from_checkpoint(const CheckpointData& ck) {
  const Tensor* fusion = ck.find("meta.fusion");
  if (!fusion) throw IoError("checkpoint: no learner state (meta.fusion missing)");
  const auto f = static_cast<std::uint32_t>(fusion->item());
  if (f > 3) throw IoError("checkpoint: invalid fusion id");
  PropModel model(static_cast<Fusion>(f), ck.config.model_dim);
  std::map<std::size_t, std::map<std::size_t, Tensor>> blocks;
  for (const auto& [name, t] : ck.tensors) {
    if (auto pl = detail::parse_prompt_name(name)) blocks[pl->first][pl->second] = t;
  }
  for (auto& [task, layers] : blocks) {
    TaskPrompt p;
    p.task_id = task;
    for (std::size_t l = 0; l < layers.size(); ++l) {
      auto it = layers.find(l);
      if (it == layers.end()) throw IoError("checkpoint: prompt for task " + std::to_string(task) + " has a gap");
      p.blocks.push_back(it->second);
    }
    model.prompts.push_back(std::move(p));
  }
  for (const auto& [name, t] : ck.tensors) {
    if (name.rfind("proto.", 0) != 0) continue;
    const std::string cls = name.substr(6);
    const Tensor* task = ck.find("proto_task." + cls);
    if (!task) throw IoError("checkpoint: no task id for prototype " + cls);
    model.bank.insert(std::stoull(cls), static_cast<std::size_t>(task->item()), t);
  }
  return model;
}

inline KeyPool keys_from_checkpoint(const CheckpointData& ck) {
  KeyPool pool;
  for (const auto& [name, t] : ck.tensors) {
    if (name.rfind("key.", 0) == 0) pool.add(std::stoull(name.substr(4)), t);
  }
  return pool;
}

}  // namespace prop
