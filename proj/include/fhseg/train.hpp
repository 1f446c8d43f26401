#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "fhseg/data.hpp"
#include "fhseg/metrics.hpp"
#include "fhseg/net.hpp"
#include "fhseg/tensor.hpp"

namespace fhseg {

// Ground-truth class ids for a batch, aligned with [B,C,H,W] logits.
struct MaskBatch {
  int b = 0, h = 0, w = 0;
  std::vector<std::uint8_t> ids;  // b*h*w, row-major
};

TensorPtr batch_images(const std::vector<const Sample*>& samples);
MaskBatch batch_masks(const std::vector<const Sample*>& samples);

// Mean over all pixels of softmax cross-entropy against the mask ids.
TensorPtr cross_entropy(Graph& g, const TensorPtr& logits, const MaskBatch& mask);

// 1 - mean over classes of (2*intersection + 1) / (probability mass + truth
// count + 1), pooled over the whole batch. Soft and differentiable; the +1
// smoothing keeps absent classes harmless.
TensorPtr soft_dice(Graph& g, const TensorPtr& logits, const MaskBatch& mask);

// cross_entropy + soft_dice, weighted 1.0 each.
TensorPtr segmentation_loss(Graph& g, const TensorPtr& logits, const MaskBatch& mask);

struct TrainConfig {
  ModelConfig model;
  int epochs = 10;
  int batch_size = 4;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 0;
  std::string manifest;
  int checkpoint_interval = 1;  // epochs between checkpoint writes; 0 = final only
  bool augment_enabled = true;

  bool operator==(const TrainConfig&) const = default;
};

void validate(const TrainConfig& cfg);

// First and second moment accumulators, aligned with the model's registry.
struct AdamState {
  long long step = 0;
  std::vector<std::vector<double>> m, v;
};

// One bias-corrected Adam update over every registered parameter; consumes
// (zeroes) the gradients.
void adam_step(Model& model, AdamState& st, double lr, double beta1, double beta2, double eps);

class Trainer {
 public:
  explicit Trainer(const TrainConfig& cfg);

  TrainConfig cfg;
  Model model;
  AdamState adam;
  std::mt19937_64 rng;  // shuffle stream; persisted in checkpoints
  long long epoch = 0;  // completed epochs
  long long iter = 0;   // completed optimizer steps

  // Forward, backward, Adam. Throws NumericError on a non-finite loss or
  // gradient, naming the first offending parameter.
  double step(const TensorPtr& images, const MaskBatch& masks);

  using LossHook = std::function<void(long long iter, long long epoch, double loss)>;

  // One pass over the training set: shuffle, augment, batch, step.
  void run_one_epoch(const std::vector<Sample>& train, const LossHook& on_loss = {});

  using EpochHook = std::function<void(long long epoch)>;

  // Runs until cfg.epochs are complete (no-op if already there).
  void run(const std::vector<Sample>& train, const LossHook& on_loss = {},
           const EpochHook& on_epoch = {});
};

// "{iter} {epoch} {loss}" with the loss at full precision.
std::string loss_log_line(long long iter, long long epoch, double loss);

// ---------------------------------------------------------------------------
// Ablation: four variants isolating the two architectural components.
// ---------------------------------------------------------------------------

struct AblationVariant {
  std::string name;  // Base, w/HSA, w/FS, Total
  ModelConfig model;
};

// The input config is the Total variant (full-scale skips + gates); the other
// three are derived by flipping skip_mode and gates_enabled only.
std::vector<AblationVariant> ablation_variants(const ModelConfig& total);

struct AblationOutcome {
  std::string name;
  MetricsReport mean;
  std::vector<MetricsReport> per_seed;
};

// Trains every variant with identical data, schedule, and seeds; reports
// per-seed and mean test metrics.
std::vector<AblationOutcome> run_ablation(const TrainConfig& base,
                                          const std::vector<Sample>& train,
                                          const std::vector<Sample>& test,
                                          const std::vector<std::uint64_t>& seeds,
                                          std::ostream* log = nullptr);

}  // namespace fhseg
