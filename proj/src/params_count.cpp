#include <map>
#include <sstream>

#include "fhseg/errors.hpp"
#include "fhseg/net.hpp"

namespace fhseg {

namespace {

long long gate_weights_for_branch(const ModelConfig& cfg, int branch_ch) {
  // Two 1x1 projections into the intermediate width plus the 1x1 scoring conv.
  const long long inter = gate_inter_channels(cfg);
  return inter * branch_ch + inter * cfg.skip_branch_channels + inter;
}

void add_gate_counts(const ModelConfig& cfg, ParamCounts& pc,
                     const std::vector<std::vector<int>>& branch_channels_per_level) {
  if (!cfg.gates_enabled) return;
  for (int j = 1; j <= cfg.depth - 1; ++j) {
    pc.gate_resampler_conv +=
        static_cast<long long>(cfg.skip_branch_channels) * decoder_channels(cfg, j + 1);
    for (int bc : branch_channels_per_level[static_cast<std::size_t>(j)]) {
      pc.gate_conv += gate_weights_for_branch(cfg, bc);
    }
  }
}

long long encoder_conv_count(const ModelConfig& cfg) {
  const long long k2 = static_cast<long long>(cfg.kernel_size) * cfg.kernel_size;
  long long total = 0;
  for (int i = 1; i <= cfg.depth; ++i) {
    const long long cin = i == 1 ? cfg.input_channels : encoder_channels(cfg, i - 1);
    const long long cout = encoder_channels(cfg, i);
    total += k2 * cin * cout;
    if (cin != cout) total += cin * cout;  // 1x1 shortcut projection
  }
  return total;
}

}  // namespace

long long ParamCounts::decoder_conv() const {
  long long total = 0;
  for (const auto& s : decoder_stages) total += s.conv_weights;
  return total;
}

long long ParamCounts::conv_total() const {
  return decoder_conv() + encoder_conv + head_conv + gate_conv + gate_resampler_conv;
}

ParamCounts count_params_unet(const ModelConfig& cfg) {
  validate(cfg);
  if (cfg.skip_mode != SkipMode::plain) {
    throw ContractError("count_params_unet requires the plain skip mode");
  }
  ParamCounts pc;
  const long long k2 = static_cast<long long>(cfg.kernel_size) * cfg.kernel_size;
  std::vector<std::vector<int>> gate_branch_channels(static_cast<std::size_t>(cfg.depth));
  for (int j = 1; j <= cfg.depth - 1; ++j) {
    const long long c = decoder_channels(cfg, j);
    const long long c_up = decoder_channels(cfg, j + 1);
    const long long c_enc = encoder_channels(cfg, j);
    const long long stage = k2 * (c_up * c + c * c + (c_enc + c) * c);
    std::ostringstream f;
    f << k2 << "*(" << c_up << "*" << c << " + " << c << "^2 + (" << c_enc << "+" << c << ")*"
      << c << ") = " << stage;
    pc.decoder_stages.push_back({j, stage, f.str()});
    gate_branch_channels[static_cast<std::size_t>(j)] = {static_cast<int>(c_enc),
                                                         static_cast<int>(c)};
  }
  pc.encoder_conv = encoder_conv_count(cfg);
  pc.head_conv = static_cast<long long>(decoder_channels(cfg, 1)) * cfg.num_classes;
  add_gate_counts(cfg, pc, gate_branch_channels);
  return pc;
}

ParamCounts count_params_fullscale(const ModelConfig& cfg) {
  validate(cfg);
  if (cfg.skip_mode == SkipMode::plain) {
    throw ContractError("count_params_fullscale requires a fullscale skip mode");
  }
  ParamCounts pc;
  const long long k2 = static_cast<long long>(cfg.kernel_size) * cfg.kernel_size;
  const long long sbc = cfg.skip_branch_channels;
  std::vector<std::vector<int>> gate_branch_channels(static_cast<std::size_t>(cfg.depth));
  for (int j = 1; j <= cfg.depth - 1; ++j) {
    const auto sources = skip_sources(cfg, j);
    long long src_channels = 0;
    for (const auto& s : sources) {
      src_channels += s.origin == SourceRef::Origin::encoder ? encoder_channels(cfg, s.level)
                                                             : decoder_channels(cfg, s.level);
    }
    const long long cj = decoder_channels(cfg, j);  // = n_branches * branch width
    const long long stage = k2 * (src_channels * sbc + cj * cj);
    std::ostringstream f;
    f << k2 << "*(" << src_channels << "*" << sbc << " + " << cj << "^2) = " << stage;
    pc.decoder_stages.push_back({j, stage, f.str()});
    gate_branch_channels[static_cast<std::size_t>(j)]
        .assign(sources.size(), static_cast<int>(sbc));
  }
  pc.encoder_conv = encoder_conv_count(cfg);
  pc.head_conv = static_cast<long long>(decoder_channels(cfg, 1)) * cfg.num_classes;
  add_gate_counts(cfg, pc, gate_branch_channels);
  return pc;
}

AllocatedCounts allocated_counts(const Model& m) {
  AllocatedCounts ac;
  std::map<int, long long> stage_conv;
  for (const auto& p : m.params) {
    const long long n = static_cast<long long>(p.t->numel());
    switch (p.kind) {
      case ParamKind::conv_bias:
        ac.bias_total += n;
        continue;
      case ParamKind::bn_gamma:
      case ParamKind::bn_beta:
        ac.bn_total += n;
        continue;
      case ParamKind::conv_weight:
        break;
    }
    ac.conv_total += n;
    switch (p.group) {
      case ParamGroup::encoder_main:
      case ParamGroup::encoder_proj:
        ac.encoder_conv += n;
        break;
      case ParamGroup::decoder_up:
      case ParamGroup::decoder_cat:
      case ParamGroup::decoder_refine:
      case ParamGroup::decoder_branch:
      case ParamGroup::decoder_fuse:
        stage_conv[p.level] += n;
        break;
      case ParamGroup::gate:
        ac.gate_conv += n;
        break;
      case ParamGroup::gate_resampler:
        ac.gate_resampler_conv += n;
        break;
      case ParamGroup::head:
        ac.head_conv += n;
        break;
    }
  }
  for (const auto& [level, n] : stage_conv) {
    ac.decoder_stages.push_back({level, n, "allocated"});
  }
  return ac;
}

AuditResult audit_params(const ModelConfig& cfg, std::uint64_t seed) {
  Model m = build_model(cfg, seed);
  const ParamCounts analytic = cfg.skip_mode == SkipMode::plain ? count_params_unet(cfg)
                                                                : count_params_fullscale(cfg);
  const AllocatedCounts alloc = allocated_counts(m);

  AuditResult r;
  r.exact = true;
  std::ostringstream out;
  out << "parameter audit (" << skip_mode_name(cfg.skip_mode)
      << (cfg.gates_enabled ? ", gated" : ", ungated") << ")\n";
  auto row = [&out, &r](const std::string& label, long long expect, long long got,
                        const std::string& note = "") {
    const bool ok = expect == got;
    r.exact = r.exact && ok;
    out << "  " << label << ": expected " << expect << ", allocated " << got
        << (ok ? "  ok" : "  MISMATCH");
    if (!note.empty()) out << "  [" << note << "]";
    out << "\n";
  };

  if (analytic.decoder_stages.size() != alloc.decoder_stages.size()) {
    r.exact = false;
    out << "  stage count mismatch: expected " << analytic.decoder_stages.size()
        << " decoder stages, allocated " << alloc.decoder_stages.size() << "\n";
  } else {
    for (std::size_t i = 0; i < analytic.decoder_stages.size(); ++i) {
      const auto& a = analytic.decoder_stages[i];
      const auto& b = alloc.decoder_stages[i];
      row("decoder stage " + std::to_string(a.level), a.conv_weights, b.conv_weights, a.formula);
    }
  }
  row("encoder conv", analytic.encoder_conv, alloc.encoder_conv);
  row("head conv", analytic.head_conv, alloc.head_conv);
  row("gate conv", analytic.gate_conv, alloc.gate_conv);
  row("gate resampler conv", analytic.gate_resampler_conv, alloc.gate_resampler_conv);
  row("conv total", analytic.conv_total(), alloc.conv_total);
  out << "  conv biases: " << alloc.bias_total << ", bn affine: " << alloc.bn_total << "\n";
  r.report = out.str();
  return r;
}

}  // namespace fhseg
