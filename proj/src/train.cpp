#include "fhseg/train.hpp"

#include <cmath>
#include <cstdio>
#include <memory>
#include <ostream>

#include "fhseg/errors.hpp"
#include "fhseg/ops.hpp"
#include "fhseg/util.hpp"

namespace fhseg {

namespace {

void check_mask(const Tensor& logits, const MaskBatch& mask) {
  if (logits.ndim() != 4) throw ShapeError("loss expects rank-4 logits");
  if (mask.b != logits.dim(0) || mask.h != logits.dim(2) || mask.w != logits.dim(3)) {
    throw ShapeError("mask extent " + std::to_string(mask.b) + "x" + std::to_string(mask.h) +
                     "x" + std::to_string(mask.w) + " does not match logits " +
                     logits.shape_str());
  }
  if (mask.ids.size() != static_cast<std::size_t>(mask.b) * mask.h * mask.w) {
    throw ShapeError("mask id buffer has the wrong length");
  }
  const int classes = logits.dim(1);
  for (std::uint8_t id : mask.ids) {
    if (id >= classes) {
      throw DataError("mask class id " + std::to_string(id) + " out of range for " +
                      std::to_string(classes) + " classes");
    }
  }
}

// Per-pixel softmax with max subtraction; layout matches the logits.
std::shared_ptr<std::vector<double>> softmax_probs(const Tensor& logits) {
  const int b = logits.dim(0), c = logits.dim(1), h = logits.dim(2), w = logits.dim(3);
  const std::size_t hw = static_cast<std::size_t>(h) * w;
  const std::size_t plane = static_cast<std::size_t>(c) * hw;
  auto probs = std::make_shared<std::vector<double>>(logits.data.size());
  for (int bi = 0; bi < b; ++bi) {
    for (std::size_t p = 0; p < hw; ++p) {
      const std::size_t base = static_cast<std::size_t>(bi) * plane + p;
      double mx = logits.data[base];
      for (int ci = 1; ci < c; ++ci) mx = std::max(mx, logits.data[base + ci * hw]);
      double denom = 0.0;
      for (int ci = 0; ci < c; ++ci) {
        const double e = std::exp(logits.data[base + ci * hw] - mx);
        (*probs)[base + ci * hw] = e;
        denom += e;
      }
      for (int ci = 0; ci < c; ++ci) (*probs)[base + ci * hw] /= denom;
    }
  }
  return probs;
}

}  // namespace

TensorPtr batch_images(const std::vector<const Sample*>& samples) {
  if (samples.empty()) throw ContractError("batch_images: empty batch");
  const int h = samples.front()->h, w = samples.front()->w;
  auto t = Tensor::make({static_cast<int>(samples.size()), 3, h, w});
  const std::size_t chw = 3 * static_cast<std::size_t>(h) * w;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const Sample& s = *samples[i];
    if (s.h != h || s.w != w) throw ShapeError("batch_images: sample extents differ");
    std::copy(s.image.begin(), s.image.end(), t->data.begin() + static_cast<std::ptrdiff_t>(i * chw));
  }
  return t;
}

MaskBatch batch_masks(const std::vector<const Sample*>& samples) {
  if (samples.empty()) throw ContractError("batch_masks: empty batch");
  MaskBatch m;
  m.b = static_cast<int>(samples.size());
  m.h = samples.front()->h;
  m.w = samples.front()->w;
  m.ids.reserve(static_cast<std::size_t>(m.b) * m.h * m.w);
  for (const Sample* s : samples) {
    if (s->h != m.h || s->w != m.w) throw ShapeError("batch_masks: sample extents differ");
    m.ids.insert(m.ids.end(), s->mask.begin(), s->mask.end());
  }
  return m;
}

TensorPtr cross_entropy(Graph& g, const TensorPtr& logits, const MaskBatch& mask) {
  if (!logits) throw ContractError("cross_entropy: null logits");
  check_mask(*logits, mask);
  const int b = logits->dim(0), c = logits->dim(1), h = logits->dim(2), w = logits->dim(3);
  const std::size_t hw = static_cast<std::size_t>(h) * w;
  const std::size_t plane = static_cast<std::size_t>(c) * hw;
  const std::size_t npx = static_cast<std::size_t>(b) * hw;

  auto probs = softmax_probs(*logits);
  double total = 0.0;
  for (int bi = 0; bi < b; ++bi) {
    for (std::size_t p = 0; p < hw; ++p) {
      const std::size_t base = static_cast<std::size_t>(bi) * plane + p;
      double mx = logits->data[base];
      for (int ci = 1; ci < c; ++ci) mx = std::max(mx, logits->data[base + ci * hw]);
      double denom = 0.0;
      for (int ci = 0; ci < c; ++ci) denom += std::exp(logits->data[base + ci * hw] - mx);
      const int truth = mask.ids[static_cast<std::size_t>(bi) * hw + p];
      total += mx + std::log(denom) - logits->data[base + truth * hw];
    }
  }
  const double inv_npx = 1.0 / static_cast<double>(npx);
  MaskBatch mask_copy = mask;

  return g.emit({1}, {total * inv_npx}, {logits},
                [logits, probs, mask_copy, b, c, hw, plane, inv_npx](const Tensor& out) {
                  if (!logits->requires_grad) return;
                  logits->ensure_grad();
                  const double gout = out.grad[0];
                  for (int bi = 0; bi < b; ++bi) {
                    for (std::size_t p = 0; p < hw; ++p) {
                      const std::size_t base = static_cast<std::size_t>(bi) * plane + p;
                      const int truth = mask_copy.ids[static_cast<std::size_t>(bi) * hw + p];
                      for (int ci = 0; ci < c; ++ci) {
                        const double soft = (*probs)[base + ci * hw] - (ci == truth ? 1.0 : 0.0);
                        logits->grad[base + ci * hw] += gout * soft * inv_npx;
                      }
                    }
                  }
                });
}

TensorPtr soft_dice(Graph& g, const TensorPtr& logits, const MaskBatch& mask) {
  if (!logits) throw ContractError("soft_dice: null logits");
  check_mask(*logits, mask);
  const int b = logits->dim(0), c = logits->dim(1), h = logits->dim(2), w = logits->dim(3);
  const std::size_t hw = static_cast<std::size_t>(h) * w;
  const std::size_t plane = static_cast<std::size_t>(c) * hw;
  constexpr double kSmooth = 1.0;

  auto probs = softmax_probs(*logits);
  auto inter = std::make_shared<std::vector<double>>(static_cast<std::size_t>(c), 0.0);
  auto sums = std::make_shared<std::vector<double>>(static_cast<std::size_t>(c), 0.0);
  for (int bi = 0; bi < b; ++bi) {
    for (std::size_t p = 0; p < hw; ++p) {
      const std::size_t base = static_cast<std::size_t>(bi) * plane + p;
      const int truth = mask.ids[static_cast<std::size_t>(bi) * hw + p];
      for (int ci = 0; ci < c; ++ci) {
        const double prob = (*probs)[base + ci * hw];
        (*sums)[static_cast<std::size_t>(ci)] += prob + (ci == truth ? 1.0 : 0.0);
      }
      (*inter)[static_cast<std::size_t>(truth)] += (*probs)[base + truth * hw];
    }
  }
  double dice_sum = 0.0;
  for (int ci = 0; ci < c; ++ci) {
    dice_sum += (2.0 * (*inter)[static_cast<std::size_t>(ci)] + kSmooth) /
                ((*sums)[static_cast<std::size_t>(ci)] + kSmooth);
  }
  const double loss = 1.0 - dice_sum / static_cast<double>(c);
  MaskBatch mask_copy = mask;

  return g.emit(
      {1}, {loss}, {logits},
      [logits, probs, inter, sums, mask_copy, b, c, hw, plane](const Tensor& out) {
        if (!logits->requires_grad) return;
        logits->ensure_grad();
        const double gout = out.grad[0];
        const double inv_c = 1.0 / static_cast<double>(c);
        // d(loss)/d(prob of class ci at a pixel), split into the truth-driven
        // part and the class-wide part shared by every pixel.
        std::vector<double> d_any(static_cast<std::size_t>(c));   // any pixel
        std::vector<double> d_hit(static_cast<std::size_t>(c));   // truth pixels
        for (int ci = 0; ci < c; ++ci) {
          const double s1 = (*sums)[static_cast<std::size_t>(ci)] + kSmooth;
          const double num = 2.0 * (*inter)[static_cast<std::size_t>(ci)] + kSmooth;
          d_any[static_cast<std::size_t>(ci)] = inv_c * num / (s1 * s1);
          d_hit[static_cast<std::size_t>(ci)] = d_any[static_cast<std::size_t>(ci)] -
                                                inv_c * 2.0 / s1;
        }
        for (int bi = 0; bi < b; ++bi) {
          for (std::size_t p = 0; p < hw; ++p) {
            const std::size_t base = static_cast<std::size_t>(bi) * plane + p;
            const int truth = mask_copy.ids[static_cast<std::size_t>(bi) * hw + p];
            double dot = 0.0;  // sum over classes of dL/dprob * prob
            for (int ci = 0; ci < c; ++ci) {
              const double dp = ci == truth ? d_hit[static_cast<std::size_t>(ci)]
                                            : d_any[static_cast<std::size_t>(ci)];
              dot += dp * (*probs)[base + ci * hw];
            }
            for (int ci = 0; ci < c; ++ci) {
              const double dp = ci == truth ? d_hit[static_cast<std::size_t>(ci)]
                                            : d_any[static_cast<std::size_t>(ci)];
              logits->grad[base + ci * hw] +=
                  gout * (*probs)[base + ci * hw] * (dp - dot);
            }
          }
        }
      });
}

TensorPtr segmentation_loss(Graph& g, const TensorPtr& logits, const MaskBatch& mask) {
  return ops::add(g, cross_entropy(g, logits, mask), soft_dice(g, logits, mask));
}

void validate(const TrainConfig& cfg) {
  validate(cfg.model);
  if (cfg.epochs < 0) throw ConfigError("epochs must be >= 0");
  if (cfg.batch_size < 1) throw ConfigError("batch size must be >= 1");
  if (!(cfg.lr > 0.0)) throw ConfigError("learning rate must be > 0");
  if (cfg.beta1 < 0.0 || cfg.beta1 >= 1.0) throw ConfigError("beta1 must be in [0,1)");
  if (cfg.beta2 < 0.0 || cfg.beta2 >= 1.0) throw ConfigError("beta2 must be in [0,1)");
  if (cfg.adam_eps <= 0.0) throw ConfigError("adam eps must be > 0");
  if (cfg.checkpoint_interval < 0) throw ConfigError("checkpoint interval must be >= 0");
}

void adam_step(Model& model, AdamState& st, double lr, double beta1, double beta2, double eps) {
  if (st.m.empty()) {
    st.m.resize(model.params.size());
    st.v.resize(model.params.size());
    for (std::size_t i = 0; i < model.params.size(); ++i) {
      st.m[i].assign(model.params[i].t->numel(), 0.0);
      st.v[i].assign(model.params[i].t->numel(), 0.0);
    }
  }
  if (st.m.size() != model.params.size()) {
    throw ContractError("optimizer state does not match the parameter registry");
  }
  st.step += 1;
  const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(st.step));
  const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(st.step));
  for (std::size_t i = 0; i < model.params.size(); ++i) {
    Tensor& t = *model.params[i].t;
    auto& m = st.m[i];
    auto& v = st.v[i];
    const bool has_grad = t.grad_allocated();
    for (std::size_t k = 0; k < t.data.size(); ++k) {
      const double gk = has_grad ? t.grad[k] : 0.0;
      m[k] = beta1 * m[k] + (1.0 - beta1) * gk;
      v[k] = beta2 * v[k] + (1.0 - beta2) * gk * gk;
      t.data[k] -= lr * (m[k] / bc1) / (std::sqrt(v[k] / bc2) + eps);
    }
    t.zero_grad();
  }
}

Trainer::Trainer(const TrainConfig& c)
    : cfg(c), model(build_model(c.model, c.seed)), rng(seeded_engine(c.seed, "shuffle")) {
  validate(cfg);
}

double Trainer::step(const TensorPtr& images, const MaskBatch& masks) {
  Graph g;
  auto logits = forward(g, model, images, Phase::train);
  auto loss = segmentation_loss(g, logits, masks);
  g.backward(loss);

  const double loss_value = loss->data[0];
  bool bad = !std::isfinite(loss_value);
  std::string first_bad = "(loss value)";
  for (const auto& p : model.params) {
    if (!p.t->grad_allocated()) continue;
    for (double gv : p.t->grad) {
      if (!std::isfinite(gv)) {
        bad = true;
        first_bad = p.name;
        break;
      }
    }
    if (bad && first_bad != "(loss value)") break;
  }
  if (bad) {
    throw NumericError("non-finite loss at iteration " + std::to_string(iter + 1) +
                       "; first non-finite gradient: " + first_bad);
  }

  adam_step(model, adam, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps);
  ++iter;
  return loss_value;
}

void Trainer::run_one_epoch(const std::vector<Sample>& train, const LossHook& on_loss) {
  if (train.empty()) throw DataError("training set is empty");
  const long long this_epoch = epoch + 1;
  std::vector<int> order(train.size());
  for (std::size_t i = 0; i < train.size(); ++i) order[i] = static_cast<int>(i);
  fisher_yates(order, rng);

  for (std::size_t at = 0; at < order.size(); at += static_cast<std::size_t>(cfg.batch_size)) {
    const std::size_t end = std::min(order.size(), at + static_cast<std::size_t>(cfg.batch_size));
    std::vector<Sample> staged;
    staged.reserve(end - at);
    for (std::size_t k = at; k < end; ++k) {
      const int idx = order[k];
      if (cfg.augment_enabled) {
        const std::uint64_t aseed = derive_seed(
            cfg.seed, "augment.e" + std::to_string(this_epoch) + ".s" + std::to_string(idx));
        staged.push_back(augment(train[static_cast<std::size_t>(idx)], aseed));
      } else {
        staged.push_back(train[static_cast<std::size_t>(idx)]);
      }
    }
    std::vector<const Sample*> refs;
    refs.reserve(staged.size());
    for (const auto& s : staged) refs.push_back(&s);
    const double loss = step(batch_images(refs), batch_masks(refs));
    if (on_loss) on_loss(iter, this_epoch, loss);
  }
  epoch = this_epoch;
}

void Trainer::run(const std::vector<Sample>& train, const LossHook& on_loss,
                  const EpochHook& on_epoch) {
  while (epoch < cfg.epochs) {
    run_one_epoch(train, on_loss);
    if (on_epoch) on_epoch(epoch);
  }
}

std::string loss_log_line(long long iter, long long epoch, double loss) {
  char buf[96];
  std::snprintf(buf, sizeof buf, "%lld %lld %.17g\n", iter, epoch, loss);
  return buf;
}

std::vector<AblationVariant> ablation_variants(const ModelConfig& total) {
  validate(total);
  if (total.skip_mode == SkipMode::plain) {
    throw ConfigError("ablation needs a full-scale skip mode in the model config");
  }
  ModelConfig base = total;
  base.skip_mode = SkipMode::plain;
  base.gates_enabled = false;
  ModelConfig hsa = base;
  hsa.gates_enabled = true;
  ModelConfig fs = total;
  fs.gates_enabled = false;
  ModelConfig full = total;
  full.gates_enabled = true;
  return {{"Base", base}, {"w/HSA", hsa}, {"w/FS", fs}, {"Total", full}};
}

std::vector<AblationOutcome> run_ablation(const TrainConfig& base,
                                          const std::vector<Sample>& train,
                                          const std::vector<Sample>& test,
                                          const std::vector<std::uint64_t>& seeds,
                                          std::ostream* log) {
  if (seeds.empty()) throw ConfigError("ablation needs at least one seed");
  std::vector<AblationOutcome> out;
  for (const auto& variant : ablation_variants(base.model)) {
    AblationOutcome oc;
    oc.name = variant.name;
    for (std::uint64_t seed : seeds) {
      TrainConfig tc = base;
      tc.model = variant.model;
      tc.seed = seed;
      Trainer trainer(tc);
      trainer.run(train);
      oc.per_seed.push_back(evaluate(trainer.model, test));
      if (log) {
        *log << variant.name << " seed " << seed << " macro average "
             << oc.per_seed.back().macro_average << "\n";
      }
    }
    oc.mean = mean_reports(oc.per_seed);
    if (log) {
      *log << variant.name << " mean:\n" << oc.mean.table();
    }
    out.push_back(std::move(oc));
  }
  return out;
}

}  // namespace fhseg
