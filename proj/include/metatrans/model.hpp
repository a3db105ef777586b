#pragma once

// The two-stream model: a temporal stream that sees positional embeddings, a
// static stream that never does, their subtraction into a latent temporal
// embedding, a frame aggregation network, and task/domain heads.
//
// Both streams run the same encoder stack by default (shared weights); a
// config switch instantiates an independent, identically-structured stack
// for the static stream instead.

#include <cstdint>
#include <fstream>
#include <map>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "metatrans/io.hpp"
#include "metatrans/nn.hpp"
#include "metatrans/tensor.hpp"

namespace metatrans {

struct ModelConfig {
  int d = 32;
  int n_layers = 2;
  int n_heads = 4;
  int d_ff = 64;
  int d_v = 32;
  int n_classes = 4;
  int head_hidden = 32;
  int t_max = 64;
  double ln_eps = 1e-5;
  bool share_encoder = true;

  int d_head() const { return d / n_heads; }

  void validate() const {
    if (d < 2 || d % 2 != 0) throw ConfigError("model: d must be even, >= 2");
    if (n_heads < 1 || d % n_heads != 0) {
      throw ConfigError("model: n_heads must divide d");
    }
    if (n_layers < 1 || d_ff < 1 || d_v < 1 || n_classes < 2 ||
        head_hidden < 1 || t_max < 1 || ln_eps <= 0.0) {
      throw ConfigError("model: invalid dimensions");
    }
  }
};

// Run variants used by training and ablations.
enum class Variant { kFull, kWoSub, kWoAdv, kFsPooling, kSourceOnly };

inline const char* variant_name(Variant v) {
  switch (v) {
    case Variant::kFull: return "full";
    case Variant::kWoSub: return "wo_sub";
    case Variant::kWoAdv: return "wo_adv";
    case Variant::kFsPooling: return "fs_pooling";
    case Variant::kSourceOnly: return "source_only";
  }
  return "full";
}

inline Variant variant_from_name(const std::string& s) {
  if (s == "full") return Variant::kFull;
  if (s == "wo_sub") return Variant::kWoSub;
  if (s == "wo_adv") return Variant::kWoAdv;
  if (s == "fs_pooling") return Variant::kFsPooling;
  if (s == "source_only") return Variant::kSourceOnly;
  throw ConfigError("unknown variant: " + s);
}

// Whether the variant subtracts a static representation from the temporal
// stream, and where that static representation comes from.
inline bool variant_subtracts(Variant v) {
  return v == Variant::kFull || v == Variant::kWoAdv ||
         v == Variant::kFsPooling;
}
inline bool variant_uses_adversary(Variant v) {
  return v == Variant::kFull || v == Variant::kWoSub ||
         v == Variant::kFsPooling;
}

struct MetaTransModel {
  ModelConfig cfg;
  std::vector<EncoderBlockParams> encoder_stack;
  // Populated only when cfg.share_encoder == false; same structure,
  // independent weights.
  std::vector<EncoderBlockParams> encoder_static;
  PositionalEmbedding pos_emb;
  MlpParams fan;                // pooled frame embedding -> video feature
  MlpParams task_head;          // d_v -> n_classes
  MlpParams domain_head_frame;  // d -> 2
  MlpParams domain_head_video;  // d_v -> 2

  const std::vector<EncoderBlockParams>& static_stack() const {
    return cfg.share_encoder ? encoder_stack : encoder_static;
  }

  static MetaTransModel init(const ModelConfig& cfg, std::mt19937_64& rng) {
    cfg.validate();
    MetaTransModel m;
    m.cfg = cfg;
    for (int i = 0; i < cfg.n_layers; ++i) {
      m.encoder_stack.push_back(
          init::encoder_block(cfg.d, cfg.n_heads, cfg.d_head(), cfg.d_ff, rng));
    }
    if (!cfg.share_encoder) {
      for (int i = 0; i < cfg.n_layers; ++i) {
        m.encoder_static.push_back(init::encoder_block(
            cfg.d, cfg.n_heads, cfg.d_head(), cfg.d_ff, rng));
      }
    }
    m.pos_emb = PositionalEmbedding(cfg.t_max, cfg.d);
    m.fan = init::mlp(cfg.d, cfg.d_v, cfg.d_v, rng);
    m.task_head = init::mlp(cfg.d_v, cfg.head_hidden, cfg.n_classes, rng);
    m.domain_head_frame = init::mlp(cfg.d, cfg.head_hidden, 2, rng);
    m.domain_head_video = init::mlp(cfg.d_v, cfg.head_hidden, 2, rng);
    return m;
  }

  std::vector<std::pair<std::string, Tensor>> named_parameters() const {
    std::vector<std::pair<std::string, Tensor>> out;
    auto add_block = [&out](const std::string& prefix,
                            const EncoderBlockParams& b) {
      for (std::size_t h = 0; h < b.heads.size(); ++h) {
        const std::string hp = prefix + ".head." + std::to_string(h);
        out.emplace_back(hp + ".wq", b.heads[h].wq);
        out.emplace_back(hp + ".wk", b.heads[h].wk);
        out.emplace_back(hp + ".wv", b.heads[h].wv);
      }
      out.emplace_back(prefix + ".w_o", b.w_o);
      out.emplace_back(prefix + ".ln1.gain", b.ln1_gain);
      out.emplace_back(prefix + ".ln1.bias", b.ln1_bias);
      out.emplace_back(prefix + ".ln2.gain", b.ln2_gain);
      out.emplace_back(prefix + ".ln2.bias", b.ln2_bias);
      out.emplace_back(prefix + ".ffn.w1", b.ffn_w1);
      out.emplace_back(prefix + ".ffn.b1", b.ffn_b1);
      out.emplace_back(prefix + ".ffn.w2", b.ffn_w2);
      out.emplace_back(prefix + ".ffn.b2", b.ffn_b2);
    };
    for (std::size_t i = 0; i < encoder_stack.size(); ++i) {
      add_block("encoder." + std::to_string(i), encoder_stack[i]);
    }
    for (std::size_t i = 0; i < encoder_static.size(); ++i) {
      add_block("static_encoder." + std::to_string(i), encoder_static[i]);
    }
    auto add_mlp = [&out](const std::string& prefix, const MlpParams& p) {
      out.emplace_back(prefix + ".w1", p.w1);
      out.emplace_back(prefix + ".b1", p.b1);
      out.emplace_back(prefix + ".w2", p.w2);
      out.emplace_back(prefix + ".b2", p.b2);
    };
    add_mlp("fan", fan);
    add_mlp("task_head", task_head);
    add_mlp("domain_head_frame", domain_head_frame);
    add_mlp("domain_head_video", domain_head_video);
    return out;
  }

  std::vector<Tensor> parameters() const {
    std::vector<Tensor> out;
    for (auto& [name, t] : named_parameters()) out.push_back(t);
    return out;
  }

  // Deep copy with fresh leaf tensors (used for per-epoch snapshots).
  MetaTransModel clone() const {
    MetaTransModel m = *this;
    m.encoder_stack.clear();
    m.encoder_static.clear();
    auto copy_block = [](const EncoderBlockParams& b) {
      EncoderBlockParams c;
      for (const auto& h : b.heads) {
        c.heads.push_back({Tensor(h.wq.shape(), h.wq.data(), true),
                           Tensor(h.wk.shape(), h.wk.data(), true),
                           Tensor(h.wv.shape(), h.wv.data(), true)});
      }
      auto cp = [](const Tensor& t) { return Tensor(t.shape(), t.data(), true); };
      c.w_o = cp(b.w_o);
      c.ln1_gain = cp(b.ln1_gain);
      c.ln1_bias = cp(b.ln1_bias);
      c.ln2_gain = cp(b.ln2_gain);
      c.ln2_bias = cp(b.ln2_bias);
      c.ffn_w1 = cp(b.ffn_w1);
      c.ffn_b1 = cp(b.ffn_b1);
      c.ffn_w2 = cp(b.ffn_w2);
      c.ffn_b2 = cp(b.ffn_b2);
      return c;
    };
    for (const auto& b : encoder_stack) m.encoder_stack.push_back(copy_block(b));
    for (const auto& b : encoder_static)
      m.encoder_static.push_back(copy_block(b));
    auto copy_mlp = [](const MlpParams& p) {
      MlpParams c;
      c.w1 = Tensor(p.w1.shape(), p.w1.data(), true);
      c.b1 = Tensor(p.b1.shape(), p.b1.data(), true);
      c.w2 = Tensor(p.w2.shape(), p.w2.data(), true);
      c.b2 = Tensor(p.b2.shape(), p.b2.data(), true);
      return c;
    };
    m.fan = copy_mlp(fan);
    m.task_head = copy_mlp(task_head);
    m.domain_head_frame = copy_mlp(domain_head_frame);
    m.domain_head_video = copy_mlp(domain_head_video);
    return m;
  }
};

// ---------------------------------------------------------------------------
// Forward paths.

// Temporal stream: positional embeddings added, then the encoder stack.
inline Tensor forward_temporal(const Tensor& x, const MetaTransModel& m) {
  if (x.cols() != m.cfg.d) {
    throw DimensionError("forward_temporal: feature dim mismatch");
  }
  Tensor h = add(x, m.pos_emb.prefix(x.rows()));
  for (const auto& b : m.encoder_stack) h = encoder_block(h, b, m.cfg.ln_eps);
  return h;
}

// Static stream: the raw sequence through the encoder stack, then temporal
// mean pooling. No positional information anywhere on this path.
inline Tensor forward_static(const Tensor& x, const MetaTransModel& m) {
  if (x.cols() != m.cfg.d) {
    throw DimensionError("forward_static: feature dim mismatch");
  }
  Tensor h = x;
  for (const auto& b : m.static_stack()) h = encoder_block(h, b, m.cfg.ln_eps);
  return mean_pool_time(h);
}

// F = temporal(x) - static(x) repeated over the T frames. Both streams
// receive gradients; the repeat sums the static branch gradient over time.
inline Tensor subtract_features(const Tensor& x, const MetaTransModel& m) {
  Tensor z = forward_temporal(x, m);
  Tensor s = forward_static(x, m);
  return sub(z, repeat_rows(s, z.rows()));
}

// Latent embedding under a run variant. wo_sub and source_only skip the
// subtraction; fs_pooling derives the static representation by pooling the
// temporal stream instead of running the invariant stream.
inline Tensor latent_embedding(const Tensor& x, const MetaTransModel& m,
                               Variant v) {
  if (!variant_subtracts(v)) return forward_temporal(x, m);
  if (v == Variant::kFsPooling) {
    Tensor z = forward_temporal(x, m);
    Tensor s = mean_pool_time(z);
    return sub(z, repeat_rows(s, z.rows()));
  }
  return subtract_features(x, m);
}

// Video-level feature: mean over frames then the aggregation MLP.
inline Tensor aggregate(const Tensor& f, const MetaTransModel& m) {
  return mlp_head(mean_pool_time(f), m.fan);
}

struct ModelOutput {
  Tensor task_logits;          // 1 x n_classes
  Tensor frame_domain_logits;  // T x 2
  Tensor video_domain_logits;  // 1 x 2
  Tensor latent;               // T x d
  Tensor video_feature;        // 1 x d_v
};

// Full forward. The gradient reversal sits between the features and the
// domain heads, so one minimization trains the heads while pushing the
// encoder the other way at weight lambda.
inline ModelOutput model_forward(const Tensor& x, const MetaTransModel& m,
                                 double lambda, Variant v = Variant::kFull) {
  ModelOutput out;
  out.latent = latent_embedding(x, m, v);
  out.video_feature = aggregate(out.latent, m);
  out.task_logits = mlp_head(out.video_feature, m.task_head);
  out.frame_domain_logits =
      mlp_head(gradient_reversal(out.latent, lambda), m.domain_head_frame);
  out.video_domain_logits = mlp_head(
      gradient_reversal(out.video_feature, lambda), m.domain_head_video);
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints: magic "MTCK", version u32, then per parameter
// {name_len u32, name, rank u32, dims u32..., row-major f64 LE payload}.

inline constexpr char kCheckpointMagic[4] = {'M', 'T', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

inline void save_checkpoint(const MetaTransModel& m, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open checkpoint for writing: " + path);
  io::write_magic(os, kCheckpointMagic);
  io::write_u32(os, kCheckpointVersion);
  for (const auto& [name, t] : m.named_parameters()) {
    io::write_u32(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    const auto& shape = t.shape();
    io::write_u32(os, static_cast<std::uint32_t>(shape.size()));
    for (int dim : shape) io::write_u32(os, static_cast<std::uint32_t>(dim));
    for (double v : t.data()) io::write_f64(os, v);
  }
  if (!os) throw FormatError("write failure on checkpoint: " + path);
}

struct CheckpointEntry {
  std::vector<int> shape;
  std::vector<double> data;
};

inline std::map<std::string, CheckpointEntry> read_checkpoint_entries(
    const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open checkpoint: " + path);
  io::expect_magic(is, kCheckpointMagic, "MTCK");
  const std::uint32_t version = io::read_u32(is, "version");
  if (version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " +
                      std::to_string(version));
  }
  std::map<std::string, CheckpointEntry> entries;
  while (true) {
    is.peek();
    if (is.eof()) break;
    const std::uint32_t name_len = io::read_u32(is, "name length");
    std::string name(name_len, '\0');
    if (!is.read(name.data(), name_len)) {
      throw FormatError("truncated file while reading parameter name");
    }
    const std::uint32_t rank = io::read_u32(is, "rank of " + name);
    CheckpointEntry e;
    std::size_t numel = 1;
    for (std::uint32_t r = 0; r < rank; ++r) {
      const std::uint32_t dim = io::read_u32(is, "dims of " + name);
      e.shape.push_back(static_cast<int>(dim));
      numel *= dim;
    }
    e.data.resize(numel);
    for (std::size_t i = 0; i < numel; ++i) {
      e.data[i] = io::read_f64(is, "payload of " + name);
    }
    if (!entries.emplace(name, std::move(e)).second) {
      throw FormatError("duplicate parameter in checkpoint: " + name);
    }
  }
  return entries;
}

// Reconstructs the model from a checkpoint. All dimensions are recovered
// from parameter names and shapes; t_max is not stored and must be supplied.
inline MetaTransModel load_checkpoint(const std::string& path,
                                      int t_max = 512) {
  auto entries = read_checkpoint_entries(path);
  auto find = [&](const std::string& name) -> const CheckpointEntry& {
    auto it = entries.find(name);
    if (it == entries.end()) {
      throw FormatError("checkpoint missing parameter: " + name);
    }
    return it->second;
  };

  ModelConfig cfg;
  cfg.t_max = t_max;
  int layers = 0;
  while (entries.count("encoder." + std::to_string(layers) + ".w_o")) ++layers;
  if (layers == 0) throw FormatError("checkpoint missing encoder blocks");
  cfg.n_layers = layers;
  int heads = 0;
  while (entries.count("encoder.0.head." + std::to_string(heads) + ".wq")) {
    ++heads;
  }
  if (heads == 0) throw FormatError("checkpoint missing attention heads");
  cfg.n_heads = heads;
  cfg.d = find("encoder.0.w_o").shape.at(1);
  cfg.d_ff = find("encoder.0.ffn.w1").shape.at(1);
  cfg.d_v = find("fan.w2").shape.at(1);
  cfg.n_classes = find("task_head.w2").shape.at(1);
  cfg.head_hidden = find("task_head.w1").shape.at(1);
  cfg.share_encoder = entries.count("static_encoder.0.w_o") == 0;
  if (find("encoder.0.head.0.wq").shape.at(1) != cfg.d_head()) {
    throw FormatError("checkpoint head width inconsistent with d/n_heads");
  }
  cfg.validate();

  std::mt19937_64 rng(0);
  MetaTransModel m = MetaTransModel::init(cfg, rng);
  for (auto& [name, t] : m.named_parameters()) {
    const CheckpointEntry& e = find(name);
    if (e.shape != t.shape()) {
      throw FormatError("checkpoint shape mismatch for " + name);
    }
    Tensor param = t;
    param.data_mut() = e.data;
  }
  return m;
}

}  // namespace metatrans
