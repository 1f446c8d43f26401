#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fhseg/data.hpp"
#include "fhseg/net.hpp"

namespace fhseg {

// Per-class scores in percent. Dice is averaged per image (macro); F1 comes
// from true/false positive counts pooled over the whole set (micro) — the two
// deliberately disagree whenever per-image overlap is uneven.
struct ClassMetrics {
  double dice = 0.0;     // [0,100]
  double f1 = 0.0;       // [0,100]
  double average = 0.0;  // (dice + f1) / 2
  bool present = false;  // class occurs in the split's ground truth
};

struct MetricsReport {
  std::vector<ClassMetrics> per_class;  // indexed by class id
  double macro_dice = 0.0;              // means over present classes
  double macro_f1 = 0.0;
  double macro_average = 0.0;
  double foreground_dice = 0.0;  // macro dice excluding background

  std::string table() const;       // printable Dice / F1 / Average columns
  std::string key_values() const;  // machine-readable key=value lines
};

// Per-pixel argmax over class logits for image b of a [B,C,H,W] tensor.
// Ties break toward the lowest class id.
std::vector<std::uint8_t> argmax_mask(const Tensor& logits, int b);

// 2|P∩T| / (|P| + |T|) for one class over one mask pair; 1 when both empty.
double dice_coefficient(const std::vector<std::uint8_t>& pred,
                        const std::vector<std::uint8_t>& truth, int cls);

// Aggregates predictions against ground truth. preds[i] and truths[i] must
// have equal extents.
MetricsReport compute_report(const std::vector<std::vector<std::uint8_t>>& preds,
                             const std::vector<const std::vector<std::uint8_t>*>& truths,
                             int num_classes);

// Runs the model over every sample (batch-norm in inference mode, running
// statistics) and scores the argmax predictions.
MetricsReport evaluate(Model& m, const std::vector<Sample>& samples);

// Field-wise mean across seeds; inputs must share the class layout.
MetricsReport mean_reports(const std::vector<MetricsReport>& reports);

}  // namespace fhseg
