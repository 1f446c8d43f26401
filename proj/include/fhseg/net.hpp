#pragma once

#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "fhseg/ops.hpp"
#include "fhseg/tensor.hpp"

namespace fhseg {

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

enum class SkipMode { plain, fullscale_neighbor, fullscale_all };

std::string skip_mode_name(SkipMode m);
SkipMode skip_mode_from_name(const std::string& s);

struct ModelConfig {
  int depth = 3;                  // encoder levels, >= 2
  int base_channels = 32;         // level i has base_channels * 2^i channels
  int kernel_size = 3;            // odd
  SkipMode skip_mode = SkipMode::fullscale_neighbor;
  bool gates_enabled = true;
  int skip_branch_channels = 64;  // width of each full-scale skip branch
  int num_classes = 7;
  int input_channels = 3;

  bool operator==(const ModelConfig&) const = default;
};

void validate(const ModelConfig& cfg);  // throws ConfigError

// Channel schedule helpers.
int encoder_channels(const ModelConfig& cfg, int level);  // base * 2^level
int decoder_channels(const ModelConfig& cfg, int level);
int gate_inter_channels(const ModelConfig& cfg);          // skip_branch_channels / 2

// One source feeding a decoder level's skip aggregation.
struct SourceRef {
  enum class Origin { encoder, decoder };
  Origin origin;
  int level;

  bool operator==(const SourceRef&) const = default;
};

// Source set for decoder level j, in concatenation order: encoder levels
// ascending, then decoder levels ascending.
//   plain:               E_j plus the up-projected trunk from D_{j+1}
//   fullscale_neighbor:  E_j, D_{j+1}  (the same-level-coarser D_{j-1} slot is
//                        unreachable in a single top-down pass)
//   fullscale_all:       E_1..E_j, D_{j+1}..D_M
std::vector<SourceRef> skip_sources(const ModelConfig& cfg, int level);

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

struct ConvLayer {
  TensorPtr w;  // [Cout, Cin, K, K]
  TensorPtr b;  // [Cout]
};

struct BnLayer {
  TensorPtr gamma;
  TensorPtr beta;
  BatchNormState state;
};

struct ConvBnBlock {
  ConvLayer conv;
  BnLayer bn;
};

// Residual encoder level: ReLU(BN(Conv_K(x)) + shortcut(x)); the shortcut is
// the identity when channel counts match and a 1x1 projection otherwise.
struct EncoderLevel {
  ConvBnBlock block;
  std::optional<ConvLayer> proj;
};

// Soft attention gate. beta = sigmoid(phi^T ReLU(M_x y + M_y h~ + c_y) + c_phi),
// computed with 1x1 convolutions; h~ is the level's resampled gating signal.
struct AttentionGateParams {
  TensorPtr mx_w;   // [inter, C_branch, 1, 1]
  TensorPtr my_w;   // [inter, C_signal, 1, 1]
  TensorPtr cy;     // [inter], bias on the summed pre-activation
  TensorPtr phi_w;  // [1, inter, 1, 1]
  TensorPtr cphi;   // [1]
  int inter = 0;
};

// Baseline decoder stage: up-projection conv on the upsampled trunk, concat
// conv over (encoder skip ++ trunk), then a square refine conv.
struct PlainStage {
  ConvBnBlock up;      // c(D_{j+1}) -> c_j
  ConvBnBlock cat;     // (c(E_j) + c_j) -> c_j
  ConvBnBlock refine;  // c_j -> c_j
};

// Full-scale decoder stage: every source is spatially resampled to the level's
// resolution, passed through its own KxK branch conv to skip_branch_channels,
// concatenated, then fused with a square Conv->BN->ReLU.
struct FullscaleStage {
  std::vector<ConvLayer> branches;
  ConvBnBlock fuse;
};

struct DecoderLevel {
  std::vector<SourceRef> sources;
  std::variant<PlainStage, FullscaleStage> stage;
  std::vector<AttentionGateParams> gates;  // one per branch; empty if disabled
  std::optional<ConvLayer> gate_resampler;  // shared per level: 1x1 to skip_branch_channels
};

// ---------------------------------------------------------------------------
// Model + parameter registry
// ---------------------------------------------------------------------------

enum class ParamKind { conv_weight, conv_bias, bn_gamma, bn_beta };

enum class ParamGroup {
  encoder_main,
  encoder_proj,
  decoder_up,
  decoder_cat,
  decoder_refine,
  decoder_branch,
  decoder_fuse,
  gate,
  gate_resampler,
  head,
};

struct ParamEntry {
  std::string name;
  TensorPtr t;
  ParamKind kind;
  ParamGroup group;
  int level;  // 0 for the head
};

struct BufferRef {
  std::string name;
  std::vector<double>* values;
};

enum class ForceGate { none, one, zero };

struct Model {
  ModelConfig cfg;
  std::vector<EncoderLevel> encoder;  // index 0 unused; levels 1..M
  std::vector<DecoderLevel> decoder;  // index 0 unused; levels 1..M-1
  ConvLayer head;
  std::vector<ParamEntry> params;     // construction order; stable across runs

  // Runtime test hooks, never serialized.
  ForceGate force_gate = ForceGate::none;

  std::vector<BufferRef> buffers();   // batch-norm running stats, stable order
  const ParamEntry* find_param(const std::string& name) const;
};

struct BuildOptions {
  // Restricts every decoder level's source set to the same-level encoder
  // feature. A source set that degenerate collapses the stage to the baseline
  // trunk, with parameter names shared with plain mode.
  bool collapse_sources_to_same_level_encoder = false;
};

// Allocates and initializes all parameters. Weights are He-normal seeded per
// parameter name, so models sharing a (seed, name) pair share those weights
// regardless of which other parameters exist.
Model build_model(const ModelConfig& cfg, std::uint64_t seed, const BuildOptions& opts = {});

enum class Phase { train, frozen, eval };

// Encoder sweep; returns features indexed 1..M (index 0 empty). Level i has
// shape [B, base*2^i, H/2^(i-1), W/2^(i-1)].
std::vector<TensorPtr> encode(Graph& g, Model& m, const TensorPtr& image, Phase phase);

// Spatial+channel resampler: bilinear up / max-pool down to the target extent,
// then a 1x1 conv whose kernel determines the output channel count.
TensorPtr resample(Graph& g, const TensorPtr& x, int target_h, int target_w,
                   const ConvLayer& proj);

// Attention gate on branch y with an already-resampled gating signal.
TensorPtr hsa_gate(Graph& g, const TensorPtr& y, const TensorPtr& h_resampled,
                   const AttentionGateParams& gate);
// Convenience overload that resamples h to y's resolution first.
TensorPtr hsa_gate(Graph& g, const TensorPtr& y, const TensorPtr& h,
                   const ConvLayer& resampler, const AttentionGateParams& gate);

// Ungated full-scale aggregation producing decoder feature j from encoder
// features and the already-computed coarser decoder features.
TensorPtr full_scale_skip(Graph& g, Model& m, int level, const std::vector<TensorPtr>& enc,
                          const std::vector<TensorPtr>& dec, Phase phase);

// Stage with per-branch attention gates applied before concatenation.
TensorPtr gated_decode(Graph& g, Model& m, int level, const std::vector<TensorPtr>& enc,
                       const std::vector<TensorPtr>& dec, Phase phase);

// Full forward pass to logits [B, num_classes, H, W].
TensorPtr forward(Graph& g, Model& m, const TensorPtr& image, Phase phase);

// ---------------------------------------------------------------------------
// Analytic parameter counts (conv weights only; biases and BN affine terms are
// reported separately by the audit).
// ---------------------------------------------------------------------------

struct StageCount {
  int level = 0;
  long long conv_weights = 0;
  std::string formula;  // human-readable expansion
};

struct ParamCounts {
  std::vector<StageCount> decoder_stages;
  long long encoder_conv = 0;
  long long head_conv = 0;
  long long gate_conv = 0;           // M_x, M_y, phi weights
  long long gate_resampler_conv = 0;
  long long decoder_conv() const;
  long long conv_total() const;
};

// Per-stage baseline decoder formula K^2 * (c_up*c + c^2 + (c_enc + c)*c)
// plus encoder and head counts. Requires skip_mode == plain.
ParamCounts count_params_unet(const ModelConfig& cfg);

// Per-stage full-scale formula D^2 * ((sum of source channels) * branch_width
// + c_j^2) plus encoder and head counts. Requires a fullscale skip mode.
ParamCounts count_params_fullscale(const ModelConfig& cfg);

struct AllocatedCounts {
  std::vector<StageCount> decoder_stages;  // conv weights allocated per level
  long long encoder_conv = 0;
  long long head_conv = 0;
  long long gate_conv = 0;
  long long gate_resampler_conv = 0;
  long long conv_total = 0;
  long long bias_total = 0;
  long long bn_total = 0;
};

AllocatedCounts allocated_counts(const Model& m);

// True when every analytic stage count and category total matches allocation.
struct AuditResult {
  bool exact = false;
  std::string report;  // printable table
};
AuditResult audit_params(const ModelConfig& cfg, std::uint64_t seed = 0);

}  // namespace fhseg
