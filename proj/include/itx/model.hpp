#pragma once

#include <fstream>
#include <unordered_map>

#include <json.hpp>

#include "itx/attention.hpp"
#include "itx/io.hpp"

namespace itx {

/// Cell sequence of one block, e.g. "FLG" = frame, local, global.
struct BlockSpec {
  std::string spec = "FLG";

  void validate() const {
    check_config(!spec.empty(), "block spec must be non-empty");
    for (char ch : spec)
      check_config(ch == 'F' || ch == 'L' || ch == 'G',
                   std::string("invalid block spec character '") + ch +
                       "' (expected F, L or G)");
  }

  AttnKind kind_at(size_t i) const {
    switch (spec[i]) {
      case 'F': return AttnKind::Frame;
      case 'L': return AttnKind::Local;
      default: return AttnKind::Global;
    }
  }
};

/// Full model wiring. The reference spatial size fixes the window grids of
/// the global-attention bias tables; with bias enabled, inputs must pad to
/// the same grid.
struct ModelConfig {
  int64_t channels = 16;      // encoding channels C
  int64_t in_channels = 3;    // real, imaginary, g-factor map
  int64_t out_channels = 2;   // real, imaginary
  BlockSpec block;            // applied to all five backbone blocks
  WindowSpec ws{8, 2};
  int64_t heads = 2;
  float dropout = 0.1f;
  bool use_bias = true;
  int64_t ref_height = 32, ref_width = 32;

  /// Both resolution levels must tile into windows, so inputs pad to 2w.
  int64_t pad_multiple() const { return 2 * ws.window; }
  int64_t padded_ref_h() const {
    return (ref_height + pad_multiple() - 1) / pad_multiple() * pad_multiple();
  }
  int64_t padded_ref_w() const {
    return (ref_width + pad_multiple() - 1) / pad_multiple() * pad_multiple();
  }

  void validate() const {
    check_config(channels > 0 && in_channels > 0 && out_channels > 0,
                 "channel counts must be positive");
    block.validate();
    ws.validate();
    check_config(heads > 0 && channels % heads == 0,
                 "heads must divide encoding channels");
    check_config(dropout >= 0.0f && dropout < 1.0f, "dropout must be in [0,1)");
    check_config(ref_height > 0 && ref_width > 0,
                 "reference size must be positive");
  }
};

/// Ordered, named collection of all learnable arrays.
template <typename T>
class ParamStoreT {
public:
  void add(const std::string& name, TensorT<T> t) {
    check_config(index_.find(name) == index_.end(),
                 "duplicate parameter name: " + name);
    index_[name] = entries_.size();
    entries_.emplace_back(name, std::move(t));
  }

  bool has(const std::string& name) const { return index_.count(name) > 0; }

  const TensorT<T>& get(const std::string& name) const {
    auto it = index_.find(name);
    check_config(it != index_.end(), "unknown parameter: " + name);
    return entries_[it->second].second;
  }

  TensorT<T>& get(const std::string& name) {
    auto it = index_.find(name);
    check_config(it != index_.end(), "unknown parameter: " + name);
    return entries_[it->second].second;
  }

  size_t count() const { return entries_.size(); }
  const std::pair<std::string, TensorT<T>>& entry(size_t i) const {
    return entries_[i];
  }
  std::pair<std::string, TensorT<T>>& entry(size_t i) { return entries_[i]; }

  int64_t total_params() const {
    int64_t n = 0;
    for (const auto& [name, t] : entries_) n += t.size();
    return n;
  }

  template <typename U>
  ParamStoreT<U> cast() const {
    ParamStoreT<U> out;
    for (const auto& [name, t] : entries_) out.add(name, t.template cast<U>());
    return out;
  }

private:
  std::vector<std::pair<std::string, TensorT<T>>> entries_;
  std::unordered_map<std::string, size_t> index_;
};

using ParamStore = ParamStoreT<float>;

struct Model {
  ModelConfig cfg;
  ParamStore params;
};

// ---------------------------------------------------------------------------
// Parameter registration. Names follow the forward wiring; registration and
// use must stay in lockstep (save/load round-trip tests guard this).
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
void add_conv(ParamStoreT<T>& s, const std::string& prefix, int64_t cout,
              int64_t cin, std::mt19937_64& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(cin * 9));
  std::uniform_real_distribution<double> dist(-bound, bound);
  TensorT<T> w(Dims5{cout, cin, 1, 3, 3});
  for (int64_t i = 0; i < w.size(); ++i) w[i] = static_cast<T>(dist(rng));
  s.add(prefix + ".w", std::move(w));
  s.add(prefix + ".b", TensorT<T>(Dims5{1, cout, 1, 1, 1}));
}

template <typename T>
void add_cell(ParamStoreT<T>& s, const std::string& prefix, AttnKind kind,
              int64_t C, const ModelConfig& cfg, int64_t res_h, int64_t res_w,
              std::mt19937_64& rng) {
  s.add(prefix + "ln1.g", TensorT<T>(Dims5{1, C, 1, 1, 1}, T(1)));
  s.add(prefix + "ln1.o", TensorT<T>(Dims5{1, C, 1, 1, 1}));
  add_conv(s, prefix + "attn.q", C, C, rng);
  add_conv(s, prefix + "attn.k", C, C, rng);
  add_conv(s, prefix + "attn.v", C, C, rng);
  AttentionConfig acfg{kind, cfg.ws, cfg.heads, C,
                       cfg.use_bias && kind != AttnKind::Frame};
  const int64_t bsz = attention_bias_size(acfg, res_h, res_w);
  if (bsz > 0)
    s.add(prefix + "attn.bias", TensorT<T>(Dims5{1, 1, 1, 1, bsz}));
  s.add(prefix + "ln2.g", TensorT<T>(Dims5{1, C, 1, 1, 1}, T(1)));
  s.add(prefix + "ln2.o", TensorT<T>(Dims5{1, C, 1, 1, 1}));
  add_conv(s, prefix + "mix.c1", 4 * C, C, rng);
  s.add(prefix + "mix.slope", TensorT<T>(Dims5{1, 4 * C, 1, 1, 1}, T(0.25)));
  add_conv(s, prefix + "mix.c2", C, 4 * C, rng);
}

template <typename T>
void add_block(ParamStoreT<T>& s, const std::string& prefix,
               const ModelConfig& cfg, int64_t C, int64_t res_h, int64_t res_w,
               std::mt19937_64& rng) {
  for (size_t i = 0; i < cfg.block.spec.size(); ++i)
    add_cell(s, prefix + "c" + std::to_string(i) + ".", cfg.block.kind_at(i),
             C, cfg, res_h, res_w, rng);
}

}  // namespace detail

/// Builds the two-resolution HRNet: pre-conv, Block1 at full resolution,
/// Blocks 2-3 continuing at full resolution, Blocks 4-5 on a downsampled
/// branch at doubled channels, bilinear upsample back, fusion by channel
/// concatenation, post-conv.
inline Model build_hrnet(const ModelConfig& cfg, uint64_t seed) {
  cfg.validate();
  Model m;
  m.cfg = cfg;
  std::mt19937_64 rng(seed);
  const int64_t C = cfg.channels;
  const int64_t H = cfg.padded_ref_h(), W = cfg.padded_ref_w();
  detail::add_conv(m.params, "pre", C, cfg.in_channels, rng);
  detail::add_block(m.params, "blk1.", cfg, C, H, W, rng);
  detail::add_block(m.params, "blk2.", cfg, C, H, W, rng);
  detail::add_block(m.params, "blk3.", cfg, C, H, W, rng);
  detail::add_conv(m.params, "down", 2 * C, 4 * C, rng);
  detail::add_block(m.params, "blk4.", cfg, 2 * C, H / 2, W / 2, rng);
  detail::add_block(m.params, "blk5.", cfg, 2 * C, H / 2, W / 2, rng);
  detail::add_conv(m.params, "up", C, 2 * C, rng);
  detail::add_conv(m.params, "post", cfg.out_channels, 2 * C, rng);
  return m;
}

inline int64_t count_params(const Model& m) { return m.params.total_params(); }

/// Parameter count of one block at the given channel width (block-local sum).
inline int64_t block_param_count(const Model& m, const std::string& prefix) {
  int64_t n = 0;
  for (size_t i = 0; i < m.params.count(); ++i) {
    const auto& [name, t] = m.params.entry(i);
    if (name.rfind(prefix, 0) == 0) n += t.size();
  }
  return n;
}

// ---------------------------------------------------------------------------
// Forward pass (tape-level, shared by training, inference and grad checks)
// ---------------------------------------------------------------------------

/// Binds store parameters into a graph on first use.
template <typename T>
class ParamBinding {
public:
  ParamBinding(ad::GraphT<T>& g, const ParamStoreT<T>& store)
      : g_(g), store_(store) {}

  ad::Id operator()(const std::string& name) {
    auto it = ids_.find(name);
    if (it != ids_.end()) return it->second;
    ad::Id id = g_.param(name, store_.get(name));
    ids_[name] = id;
    return id;
  }

private:
  ad::GraphT<T>& g_;
  const ParamStoreT<T>& store_;
  std::unordered_map<std::string, ad::Id> ids_;
};

namespace detail {

template <typename T>
ad::Id cell_forward(ad::GraphT<T>& g, ParamBinding<T>& P,
                    const std::string& prefix, ad::Id x, AttnKind kind,
                    int64_t C, const ModelConfig& cfg, bool training,
                    std::mt19937_64* rng) {
  const T eps = static_cast<T>(1e-5);
  AttentionConfig acfg{kind, cfg.ws, cfg.heads, C,
                       cfg.use_bias && kind != AttnKind::Frame};
  // y = x + attention(LN(x))
  ad::Id n1 = ad::layer_norm(g, x, P(prefix + "ln1.g"), P(prefix + "ln1.o"), eps);
  AttentionParamIds<T> ids;
  ids.qw = P(prefix + "attn.q.w");
  ids.qb = P(prefix + "attn.q.b");
  ids.kw = P(prefix + "attn.k.w");
  ids.kb = P(prefix + "attn.k.b");
  ids.vw = P(prefix + "attn.v.w");
  ids.vb = P(prefix + "attn.v.b");
  if (acfg.use_bias) ids.bias = P(prefix + "attn.bias");
  ad::Id y = ad::add(g, x, attention_forward(g, n1, acfg, ids));
  // z = y + mixer(LN(y)); mixer = conv C->4C, PReLU, conv 4C->C
  ad::Id n2 = ad::layer_norm(g, y, P(prefix + "ln2.g"), P(prefix + "ln2.o"), eps);
  ad::Id h = ad::conv2d(g, n2, P(prefix + "mix.c1.w"), P(prefix + "mix.c1.b"));
  h = ad::prelu(g, h, P(prefix + "mix.slope"));
  h = ad::conv2d(g, h, P(prefix + "mix.c2.w"), P(prefix + "mix.c2.b"));
  ad::Id z = ad::add(g, y, h);
  if (training && cfg.dropout > 0.0f) {
    check_config(rng != nullptr, "training forward requires a dropout RNG");
    TensorT<T> mask(g.val(z).dims());
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const T keep_scale = static_cast<T>(1.0 / (1.0 - cfg.dropout));
    for (int64_t i = 0; i < mask.size(); ++i)
      mask[i] = u(*rng) < cfg.dropout ? T(0) : keep_scale;
    z = ad::mul_mask(g, z, std::move(mask));
  }
  return z;
}

template <typename T>
ad::Id block_forward(ad::GraphT<T>& g, ParamBinding<T>& P,
                     const std::string& prefix, ad::Id x, int64_t C,
                     const ModelConfig& cfg, bool training,
                     std::mt19937_64* rng) {
  ad::Id cur = x;
  for (size_t i = 0; i < cfg.block.spec.size(); ++i)
    cur = cell_forward(g, P, prefix + "c" + std::to_string(i) + ".", cur,
                       cfg.block.kind_at(i), C, cfg, training, rng);
  return cur;
}

}  // namespace detail

template <typename T>
ad::Id model_forward_graph(ad::GraphT<T>& g, ParamBinding<T>& P,
                           const ModelConfig& cfg, ad::Id x, bool training,
                           std::mt19937_64* rng) {
  const Dims5 din = g.val(x).dims();
  check_shape(din.c == cfg.in_channels,
              "model_forward: expected " + std::to_string(cfg.in_channels) +
                  " input channels, got " + std::to_string(din.c));
  WindowSpec pad_ws{cfg.pad_multiple(), cfg.ws.patch};
  auto [xp, rec] = ad::pad_to_window(g, x, pad_ws);
  const Dims5 dp = g.val(xp).dims();
  if (cfg.use_bias)
    check_config(dp.h == cfg.padded_ref_h() && dp.w == cfg.padded_ref_w(),
                 "input padded size " + dp.str() +
                     " does not match the configured reference size; global "
                     "bias tables are sized for the reference grid");
  const int64_t C = cfg.channels;
  ad::Id cur = ad::conv2d(g, xp, P("pre.w"), P("pre.b"));
  cur = detail::block_forward(g, P, "blk1.", cur, C, cfg, training, rng);
  // branch A: two more blocks at full resolution
  ad::Id a = detail::block_forward(g, P, "blk2.", cur, C, cfg, training, rng);
  a = detail::block_forward(g, P, "blk3.", a, C, cfg, training, rng);
  // branch B: downsample (channels double), two blocks, upsample back
  ad::Id b = ad::patch_merge_rearrange(g, cur);
  b = ad::conv2d(g, b, P("down.w"), P("down.b"));
  b = detail::block_forward(g, P, "blk4.", b, 2 * C, cfg, training, rng);
  b = detail::block_forward(g, P, "blk5.", b, 2 * C, cfg, training, rng);
  b = ad::upsample2x(g, b);
  b = ad::conv2d(g, b, P("up.w"), P("up.b"));
  ad::Id fused = ad::concat_channels(g, a, b);
  ad::Id out = ad::conv2d(g, fused, P("post.w"), P("post.b"));
  return ad::crop_pad(g, out, rec);
}

template <typename T>
TensorT<T> model_forward_t(const ModelConfig& cfg, const ParamStoreT<T>& store,
                           const TensorT<T>& x, bool training = false,
                           std::mt19937_64* rng = nullptr) {
  ad::GraphT<T> g(false);
  ParamBinding<T> P(g, store);
  ad::Id out = model_forward_graph(g, P, cfg, g.input(x), training, rng);
  return g.val(out);
}

inline Tensor5D model_forward(const Model& m, const Tensor5D& x,
                              bool training = false,
                              std::mt19937_64* rng = nullptr) {
  return model_forward_t<float>(m.cfg, m.params, x, training, rng);
}

// ---------------------------------------------------------------------------
// Parameter files (.itxp): one JSON header line listing (name, dims) in
// order, then concatenated little-endian f32 payloads.
// ---------------------------------------------------------------------------

inline void save_params(const Model& m, const std::string& path,
                        const nlohmann::json& meta = {}) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open for writing: " + path);
  nlohmann::json hdr;
  hdr["format"] = "itxp";
  hdr["params"] = nlohmann::json::array();
  for (size_t i = 0; i < m.params.count(); ++i) {
    const auto& [name, t] = m.params.entry(i);
    hdr["params"].push_back(
        {{"name", name},
         {"dims", {t.dims().b, t.dims().c, t.dims().f, t.dims().h, t.dims().w}}});
  }
  if (!meta.is_null() && !meta.empty()) hdr["meta"] = meta;
  os << hdr.dump() << "\n";
  for (size_t i = 0; i < m.params.count(); ++i) {
    const auto& t = m.params.entry(i).second;
    os.write(reinterpret_cast<const char*>(t.data()),
             static_cast<std::streamsize>(t.size()) * 4);
  }
  if (!os) throw IoError("short write: " + path);
}

/// Loads parameters into a model built with a matching config. Returns the
/// meta object stored at save time (empty when absent).
inline nlohmann::json load_params(Model& m, const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open: " + path);
  std::string line;
  if (!std::getline(is, line)) throw IoError("missing header line: " + path);
  nlohmann::json hdr = nlohmann::json::parse(line, nullptr, false);
  if (hdr.is_discarded() || hdr.value("format", "") != "itxp")
    throw IoError("not an itxp parameter file: " + path);
  const auto& plist = hdr["params"];
  if (plist.size() != m.params.count())
    throw IoError("parameter count mismatch: file has " +
                  std::to_string(plist.size()) + ", model expects " +
                  std::to_string(m.params.count()));
  for (size_t i = 0; i < m.params.count(); ++i) {
    auto& [name, t] = m.params.entry(i);
    const std::string fname = plist[i]["name"].get<std::string>();
    if (fname != name)
      throw IoError("parameter name mismatch at entry " + std::to_string(i) +
                    ": file has '" + fname + "', model expects '" + name + "'");
    const auto& dv = plist[i]["dims"];
    Dims5 fd{dv[0].get<int64_t>(), dv[1].get<int64_t>(), dv[2].get<int64_t>(),
             dv[3].get<int64_t>(), dv[4].get<int64_t>()};
    if (!(fd == t.dims()))
      throw IoError("parameter shape mismatch for '" + name + "': file has " +
                    fd.str() + ", model expects " + t.dims().str());
    is.read(reinterpret_cast<char*>(t.data()),
            static_cast<std::streamsize>(t.size()) * 4);
    if (is.gcount() != t.size() * 4)
      throw IoError("truncated parameter payload in: " + path);
  }
  return hdr.value("meta", nlohmann::json::object());
}

}  // namespace itx
