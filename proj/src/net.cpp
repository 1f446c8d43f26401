#include "fhseg/net.hpp"

#include <cmath>

#include "fhseg/errors.hpp"
#include "fhseg/util.hpp"

namespace fhseg {

namespace {

constexpr double kBnEps = 1e-5;

BnMode bn_mode(Phase p) {
  switch (p) {
    case Phase::train: return BnMode::train;
    case Phase::frozen: return BnMode::train_frozen;
    case Phase::eval: return BnMode::eval;
  }
  throw ContractError("unknown phase");
}

}  // namespace

std::string skip_mode_name(SkipMode m) {
  switch (m) {
    case SkipMode::plain: return "plain";
    case SkipMode::fullscale_neighbor: return "fullscale_neighbor";
    case SkipMode::fullscale_all: return "fullscale_all";
  }
  throw ContractError("unknown skip mode");
}

SkipMode skip_mode_from_name(const std::string& s) {
  if (s == "plain") return SkipMode::plain;
  if (s == "fullscale_neighbor") return SkipMode::fullscale_neighbor;
  if (s == "fullscale_all") return SkipMode::fullscale_all;
  throw ConfigError("unknown skip mode '" + s + "'");
}

void validate(const ModelConfig& cfg) {
  if (cfg.depth < 2) throw ConfigError("model depth must be >= 2");
  if (cfg.depth > 8) throw ConfigError("model depth must be <= 8");
  if (cfg.base_channels < 1) throw ConfigError("base_channels must be >= 1");
  if (cfg.kernel_size < 1 || cfg.kernel_size % 2 == 0) {
    throw ConfigError("kernel_size must be odd and >= 1");
  }
  if (cfg.skip_branch_channels < 2) throw ConfigError("skip_branch_channels must be >= 2");
  if (cfg.num_classes < 2) throw ConfigError("num_classes must be >= 2");
  if (cfg.input_channels < 1) throw ConfigError("input_channels must be >= 1");
}

int encoder_channels(const ModelConfig& cfg, int level) {
  if (level < 1 || level > cfg.depth) throw ContractError("encoder level out of range");
  return cfg.base_channels << level;
}

int gate_inter_channels(const ModelConfig& cfg) {
  return std::max(1, cfg.skip_branch_channels / 2);
}

std::vector<SourceRef> skip_sources(const ModelConfig& cfg, int level) {
  if (level < 1 || level >= cfg.depth) {
    throw ContractError("skip sources defined for decoder levels 1..depth-1");
  }
  std::vector<SourceRef> out;
  if (cfg.skip_mode == SkipMode::fullscale_all) {
    for (int l = 1; l <= level; ++l) out.push_back({SourceRef::Origin::encoder, l});
    for (int l = level + 1; l <= cfg.depth; ++l) out.push_back({SourceRef::Origin::decoder, l});
  } else {
    // Baseline and neighbor modes both draw on the same-level encoder feature
    // and the next-coarser decoder feature; what differs is the stage built on
    // top. A finer decoder neighbor cannot feed level j: a single top-down
    // sweep has not produced it yet when level j is computed.
    out.push_back({SourceRef::Origin::encoder, level});
    out.push_back({SourceRef::Origin::decoder, level + 1});
  }
  return out;
}

int decoder_channels(const ModelConfig& cfg, int level) {
  if (level < 1 || level > cfg.depth) throw ContractError("decoder level out of range");
  if (level == cfg.depth) return encoder_channels(cfg, cfg.depth);  // bottleneck
  if (cfg.skip_mode == SkipMode::plain) return cfg.base_channels << level;
  return static_cast<int>(skip_sources(cfg, level).size()) * cfg.skip_branch_channels;
}

// ---------------------------------------------------------------------------
// Construction
// ---------------------------------------------------------------------------

namespace {

struct Builder {
  Model& m;
  std::uint64_t seed;

  TensorPtr he_weight(const std::string& name, std::vector<int> shape) {
    GaussianRng rng(seeded_engine(seed, name));
    const int fan_in = shape[1] * shape[2] * shape[3];
    const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
    auto t = Tensor::make(std::move(shape), true);
    for (double& v : t->data) v = rng.next() * stddev;
    return t;
  }

  void reg(const std::string& name, const TensorPtr& t, ParamKind kind, ParamGroup group,
           int level) {
    m.params.push_back(ParamEntry{name, t, kind, group, level});
  }

  ConvLayer conv(const std::string& prefix, int cout, int cin, int k, ParamGroup group,
                 int level) {
    ConvLayer layer;
    layer.w = he_weight(prefix + ".weight", {cout, cin, k, k});
    layer.b = Tensor::make({cout}, true);
    reg(prefix + ".weight", layer.w, ParamKind::conv_weight, group, level);
    reg(prefix + ".bias", layer.b, ParamKind::conv_bias, group, level);
    return layer;
  }

  BnLayer bn(const std::string& prefix, int c, ParamGroup group, int level) {
    BnLayer layer;
    layer.gamma = Tensor::full({c}, 1.0, true);
    layer.beta = Tensor::make({c}, true);
    layer.state.running_mean.assign(static_cast<std::size_t>(c), 0.0);
    layer.state.running_var.assign(static_cast<std::size_t>(c), 1.0);
    reg(prefix + ".gamma", layer.gamma, ParamKind::bn_gamma, group, level);
    reg(prefix + ".beta", layer.beta, ParamKind::bn_beta, group, level);
    return layer;
  }

  ConvBnBlock conv_bn(const std::string& prefix, int cout, int cin, int k, ParamGroup group,
                      int level) {
    ConvBnBlock blk;
    blk.conv = conv(prefix + ".conv", cout, cin, k, group, level);
    blk.bn = bn(prefix + ".bn", cout, group, level);
    return blk;
  }

  AttentionGateParams gate(const std::string& prefix, int branch_ch, int signal_ch, int inter,
                           int level) {
    AttentionGateParams gp;
    gp.inter = inter;
    gp.mx_w = he_weight(prefix + ".mx.weight", {inter, branch_ch, 1, 1});
    gp.my_w = he_weight(prefix + ".my.weight", {inter, signal_ch, 1, 1});
    gp.cy = Tensor::make({inter}, true);
    gp.phi_w = he_weight(prefix + ".phi.weight", {1, inter, 1, 1});
    gp.cphi = Tensor::make({1}, true);
    reg(prefix + ".mx.weight", gp.mx_w, ParamKind::conv_weight, ParamGroup::gate, level);
    reg(prefix + ".my.weight", gp.my_w, ParamKind::conv_weight, ParamGroup::gate, level);
    reg(prefix + ".cy", gp.cy, ParamKind::conv_bias, ParamGroup::gate, level);
    reg(prefix + ".phi.weight", gp.phi_w, ParamKind::conv_weight, ParamGroup::gate, level);
    reg(prefix + ".cphi", gp.cphi, ParamKind::conv_bias, ParamGroup::gate, level);
    return gp;
  }
};

std::string source_label(const SourceRef& s) {
  return (s.origin == SourceRef::Origin::encoder ? "e" : "d") + std::to_string(s.level);
}

}  // namespace

Model build_model(const ModelConfig& cfg, std::uint64_t seed, const BuildOptions& opts) {
  validate(cfg);
  Model m;
  m.cfg = cfg;

  // The collapse hook builds the baseline stage topology (with baseline
  // parameter names) regardless of the configured skip mode.
  ModelConfig eff = cfg;
  if (opts.collapse_sources_to_same_level_encoder) eff.skip_mode = SkipMode::plain;

  Builder b{m, seed};
  const int M = cfg.depth;
  const int K = cfg.kernel_size;
  const int sbc = cfg.skip_branch_channels;
  const int inter = gate_inter_channels(cfg);

  m.encoder.resize(static_cast<std::size_t>(M) + 1);
  for (int i = 1; i <= M; ++i) {
    const int cin = i == 1 ? cfg.input_channels : encoder_channels(cfg, i - 1);
    const int cout = encoder_channels(cfg, i);
    const std::string prefix = "encoder.l" + std::to_string(i);
    EncoderLevel lvl;
    lvl.block = b.conv_bn(prefix, cout, cin, K, ParamGroup::encoder_main, i);
    if (cin != cout) {
      lvl.proj = b.conv(prefix + ".proj", cout, cin, 1, ParamGroup::encoder_proj, i);
    }
    m.encoder[static_cast<std::size_t>(i)] = std::move(lvl);
  }

  m.decoder.resize(static_cast<std::size_t>(M));
  for (int j = 1; j <= M - 1; ++j) {
    const std::string prefix = "decoder.l" + std::to_string(j);
    DecoderLevel lvl;
    lvl.sources = skip_sources(eff, j);
    const int cj = decoder_channels(eff, j);

    std::vector<int> branch_channels;  // channels seen by each gate
    if (eff.skip_mode == SkipMode::plain) {
      const int c_up = decoder_channels(eff, j + 1);
      const int c_enc = encoder_channels(eff, j);
      PlainStage st;
      st.up = b.conv_bn(prefix + ".up", cj, c_up, K, ParamGroup::decoder_up, j);
      st.cat = b.conv_bn(prefix + ".cat", cj, c_enc + cj, K, ParamGroup::decoder_cat, j);
      st.refine = b.conv_bn(prefix + ".refine", cj, cj, K, ParamGroup::decoder_refine, j);
      lvl.stage = std::move(st);
      branch_channels = {c_enc, cj};  // encoder skip, up-projected trunk
    } else {
      FullscaleStage st;
      for (const auto& src : lvl.sources) {
        const int c_src = src.origin == SourceRef::Origin::encoder
                              ? encoder_channels(eff, src.level)
                              : decoder_channels(eff, src.level);
        st.branches.push_back(b.conv(prefix + ".branch." + source_label(src), sbc, c_src, K,
                                     ParamGroup::decoder_branch, j));
        branch_channels.push_back(sbc);
      }
      st.fuse = b.conv_bn(prefix + ".fuse", cj, cj, K, ParamGroup::decoder_fuse, j);
      lvl.stage = std::move(st);
    }

    if (cfg.gates_enabled) {
      lvl.gate_resampler = b.conv(prefix + ".resampler.conv", sbc, decoder_channels(eff, j + 1),
                                  1, ParamGroup::gate_resampler, j);
      for (std::size_t i = 0; i < lvl.sources.size(); ++i) {
        lvl.gates.push_back(b.gate(prefix + ".gate." + source_label(lvl.sources[i]),
                                   branch_channels[i], sbc, inter, j));
      }
    }
    m.decoder[static_cast<std::size_t>(j)] = std::move(lvl);
  }

  m.head = b.conv("head.conv", cfg.num_classes, decoder_channels(eff, 1), 1, ParamGroup::head, 0);
  return m;
}

std::vector<BufferRef> Model::buffers() {
  std::vector<BufferRef> out;
  auto push_bn = [&out](const std::string& prefix, BnLayer& bn) {
    out.push_back({prefix + ".running_mean", &bn.state.running_mean});
    out.push_back({prefix + ".running_var", &bn.state.running_var});
  };
  for (int i = 1; i < static_cast<int>(encoder.size()); ++i) {
    push_bn("encoder.l" + std::to_string(i) + ".bn", encoder[static_cast<std::size_t>(i)].block.bn);
  }
  for (int j = 1; j < static_cast<int>(decoder.size()); ++j) {
    auto& lvl = decoder[static_cast<std::size_t>(j)];
    const std::string prefix = "decoder.l" + std::to_string(j);
    if (auto* st = std::get_if<PlainStage>(&lvl.stage)) {
      push_bn(prefix + ".up.bn", st->up.bn);
      push_bn(prefix + ".cat.bn", st->cat.bn);
      push_bn(prefix + ".refine.bn", st->refine.bn);
    } else {
      push_bn(prefix + ".fuse.bn", std::get<FullscaleStage>(lvl.stage).fuse.bn);
    }
  }
  return out;
}

const ParamEntry* Model::find_param(const std::string& name) const {
  for (const auto& p : params) {
    if (p.name == name) return &p;
  }
  return nullptr;
}

// ---------------------------------------------------------------------------
// Forward
// ---------------------------------------------------------------------------

namespace {

TensorPtr cbr(Graph& g, ConvBnBlock& blk, const TensorPtr& x, Phase phase) {
  const int k = blk.conv.w->dim(2);
  auto y = ops::conv2d(g, x, blk.conv.w, blk.conv.b, 1, k / 2);
  y = ops::batch_norm(g, y, blk.bn.gamma, blk.bn.beta, blk.bn.state, kBnEps, bn_mode(phase));
  return ops::relu(g, y);
}

// Spatial-only alignment of a source feature to the target extent.
TensorPtr align_spatial(Graph& g, const TensorPtr& x, int th, int tw) {
  const int h = x->dim(2), w = x->dim(3);
  if (th == h && tw == w) return x;
  if (th > h) {
    if (th % h != 0 || tw % w != 0 || th / h != tw / w) {
      throw ShapeError("cannot upsample " + x->shape_str() + " to " + std::to_string(th) + "x" +
                       std::to_string(tw));
    }
    return ops::upsample(g, x, th / h, UpsampleMethod::bilinear);
  }
  if (h % th != 0 || w % tw != 0 || h / th != w / tw) {
    throw ShapeError("cannot downsample " + x->shape_str() + " to " + std::to_string(th) + "x" +
                     std::to_string(tw));
  }
  return ops::downsample(g, x, h / th);
}

TensorPtr gate_beta(Graph& g, const Model& m, const AttentionGateParams& gp, const TensorPtr& y,
                    const TensorPtr& h_tilde) {
  if (m.force_gate == ForceGate::one) {
    return Tensor::full({y->dim(0), 1, y->dim(2), y->dim(3)}, 1.0);
  }
  if (m.force_gate == ForceGate::zero) {
    return Tensor::full({y->dim(0), 1, y->dim(2), y->dim(3)}, 0.0);
  }
  return hsa_gate(g, y, h_tilde, gp);
}

TensorPtr decode_level(Graph& g, Model& m, int level, const std::vector<TensorPtr>& enc,
                       const std::vector<TensorPtr>& dec, Phase phase, bool gated) {
  auto& lvl = m.decoder[static_cast<std::size_t>(level)];
  const TensorPtr& deeper = dec[static_cast<std::size_t>(level + 1)];
  if (!deeper) throw ContractError("decoder level " + std::to_string(level + 1) + " not computed");
  const int th = enc[static_cast<std::size_t>(level)]->dim(2);
  const int tw = enc[static_cast<std::size_t>(level)]->dim(3);

  TensorPtr h_tilde;
  if (gated) {
    if (!lvl.gate_resampler || lvl.gates.empty()) {
      throw ContractError("gates were not allocated for this model");
    }
    h_tilde = resample(g, deeper, th, tw, *lvl.gate_resampler);
  }

  std::vector<TensorPtr> parts;
  if (auto* st = std::get_if<PlainStage>(&lvl.stage)) {
    auto u = ops::upsample(g, deeper, 2, UpsampleMethod::bilinear);
    u = cbr(g, st->up, u, phase);
    parts = {enc[static_cast<std::size_t>(level)], u};
    if (gated) {
      for (std::size_t i = 0; i < parts.size(); ++i) {
        parts[i] = ops::mul(g, parts[i], gate_beta(g, m, lvl.gates[i], parts[i], h_tilde));
      }
    }
    auto z = ops::concat(g, parts);
    z = cbr(g, st->cat, z, phase);
    return cbr(g, st->refine, z, phase);
  }

  auto& st = std::get<FullscaleStage>(lvl.stage);
  const int k = m.cfg.kernel_size;
  for (std::size_t i = 0; i < lvl.sources.size(); ++i) {
    const auto& src = lvl.sources[i];
    const TensorPtr& feat = src.origin == SourceRef::Origin::encoder
                                ? enc[static_cast<std::size_t>(src.level)]
                                : dec[static_cast<std::size_t>(src.level)];
    if (!feat) throw ContractError("skip source not available at level " + std::to_string(level));
    auto x = align_spatial(g, feat, th, tw);
    x = ops::conv2d(g, x, st.branches[i].w, st.branches[i].b, 1, k / 2);
    if (gated) x = ops::mul(g, x, gate_beta(g, m, lvl.gates[i], x, h_tilde));
    parts.push_back(x);
  }
  auto z = ops::concat(g, parts);
  return cbr(g, st.fuse, z, phase);
}

}  // namespace

std::vector<TensorPtr> encode(Graph& g, Model& m, const TensorPtr& image, Phase phase) {
  if (!image || image->ndim() != 4) throw ShapeError("encode expects a rank-4 image");
  if (image->dim(1) != m.cfg.input_channels) {
    throw ShapeError("encode expects " + std::to_string(m.cfg.input_channels) +
                     " input channels, got " + image->shape_str());
  }
  const int M = m.cfg.depth;
  const int H = image->dim(2), W = image->dim(3);
  const int div = 1 << (M - 1);
  if (H % div != 0 || W % div != 0) {
    throw ShapeError("input extent " + image->shape_str() + " must be divisible by 2^(depth-1)");
  }
  if (H / div < 1 || W / div < 1) {
    throw ConfigError("model depth too large for input extent " + image->shape_str());
  }

  std::vector<TensorPtr> feats(static_cast<std::size_t>(M) + 1);
  TensorPtr x = image;
  const int K = m.cfg.kernel_size;
  for (int i = 1; i <= M; ++i) {
    if (i > 1) x = ops::downsample(g, x, 2);
    auto& lvl = m.encoder[static_cast<std::size_t>(i)];
    auto main = ops::conv2d(g, x, lvl.block.conv.w, lvl.block.conv.b, 1, K / 2);
    main = ops::batch_norm(g, main, lvl.block.bn.gamma, lvl.block.bn.beta, lvl.block.bn.state,
                           kBnEps, bn_mode(phase));
    TensorPtr shortcut = lvl.proj ? ops::conv2d(g, x, lvl.proj->w, lvl.proj->b, 1, 0) : x;
    x = ops::relu(g, ops::add(g, main, shortcut));
    feats[static_cast<std::size_t>(i)] = x;
  }
  return feats;
}

TensorPtr resample(Graph& g, const TensorPtr& x, int target_h, int target_w,
                   const ConvLayer& proj) {
  if (!x) throw ContractError("resample input is null");
  auto y = align_spatial(g, x, target_h, target_w);
  if (proj.w->dim(1) != y->dim(1)) {
    throw ShapeError("resample channel mismatch: feature " + y->shape_str() + " vs projection " +
                     proj.w->shape_str());
  }
  return ops::conv2d(g, y, proj.w, proj.b, 1, 0);
}

TensorPtr hsa_gate(Graph& g, const TensorPtr& y, const TensorPtr& h_resampled,
                   const AttentionGateParams& gate) {
  if (!y || !h_resampled) throw ContractError("hsa_gate input is null");
  if (y->dim(2) != h_resampled->dim(2) || y->dim(3) != h_resampled->dim(3) ||
      y->dim(0) != h_resampled->dim(0)) {
    throw ShapeError("hsa_gate resolution mismatch: " + y->shape_str() + " vs " +
                     h_resampled->shape_str());
  }
  if (gate.mx_w->dim(1) != y->dim(1) || gate.my_w->dim(1) != h_resampled->dim(1)) {
    throw ShapeError("hsa_gate channel mismatch after resampler: branch " + y->shape_str() +
                     ", signal " + h_resampled->shape_str());
  }
  auto zero_bias = Tensor::make({gate.inter});
  auto ax = ops::conv2d(g, y, gate.mx_w, zero_bias, 1, 0);
  auto ah = ops::conv2d(g, h_resampled, gate.my_w, gate.cy, 1, 0);
  auto pre = ops::relu(g, ops::add(g, ax, ah));
  auto logit = ops::conv2d(g, pre, gate.phi_w, gate.cphi, 1, 0);
  return ops::sigmoid(g, logit);
}

TensorPtr hsa_gate(Graph& g, const TensorPtr& y, const TensorPtr& h, const ConvLayer& resampler,
                   const AttentionGateParams& gate) {
  auto h_tilde = resample(g, h, y->dim(2), y->dim(3), resampler);
  return hsa_gate(g, y, h_tilde, gate);
}

TensorPtr full_scale_skip(Graph& g, Model& m, int level, const std::vector<TensorPtr>& enc,
                          const std::vector<TensorPtr>& dec, Phase phase) {
  if (level == m.cfg.depth) return enc[static_cast<std::size_t>(level)];  // bottleneck: no skip
  if (level < 1 || level > m.cfg.depth) throw ContractError("decoder level out of range");
  return decode_level(g, m, level, enc, dec, phase, /*gated=*/false);
}

TensorPtr gated_decode(Graph& g, Model& m, int level, const std::vector<TensorPtr>& enc,
                       const std::vector<TensorPtr>& dec, Phase phase) {
  if (level == m.cfg.depth) return enc[static_cast<std::size_t>(level)];
  if (level < 1 || level > m.cfg.depth) throw ContractError("decoder level out of range");
  return decode_level(g, m, level, enc, dec, phase, /*gated=*/true);
}

TensorPtr forward(Graph& g, Model& m, const TensorPtr& image, Phase phase) {
  auto enc = encode(g, m, image, phase);
  const int M = m.cfg.depth;
  std::vector<TensorPtr> dec(static_cast<std::size_t>(M) + 2);
  dec[static_cast<std::size_t>(M)] = enc[static_cast<std::size_t>(M)];
  for (int j = M - 1; j >= 1; --j) {
    dec[static_cast<std::size_t>(j)] =
        decode_level(g, m, j, enc, dec, phase, m.cfg.gates_enabled);
  }
  return ops::conv2d(g, dec[1], m.head.w, m.head.b, 1, 0);
}

}  // namespace fhseg
