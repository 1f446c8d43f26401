#include "fhseg/metrics.hpp"

#include <cstdio>
#include <sstream>

#include "fhseg/errors.hpp"
#include "fhseg/util.hpp"

namespace fhseg {

std::vector<std::uint8_t> argmax_mask(const Tensor& logits, int b) {
  if (logits.ndim() != 4) throw ShapeError("argmax_mask expects rank-4 logits");
  const int cc = logits.dim(1), h = logits.dim(2), w = logits.dim(3);
  if (b < 0 || b >= logits.dim(0)) throw ShapeError("argmax_mask batch index out of range");
  const std::size_t hw = static_cast<std::size_t>(h) * w;
  const std::size_t plane = static_cast<std::size_t>(cc) * hw;
  std::vector<std::uint8_t> out(hw);
  for (std::size_t p = 0; p < hw; ++p) {
    int best = 0;
    double best_v = logits.data[static_cast<std::size_t>(b) * plane + p];
    for (int c = 1; c < cc; ++c) {
      const double v = logits.data[static_cast<std::size_t>(b) * plane + c * hw + p];
      if (v > best_v) {  // strict: ties keep the lowest class id
        best_v = v;
        best = c;
      }
    }
    out[p] = static_cast<std::uint8_t>(best);
  }
  return out;
}

double dice_coefficient(const std::vector<std::uint8_t>& pred,
                        const std::vector<std::uint8_t>& truth, int cls) {
  if (pred.size() != truth.size()) throw ShapeError("dice: mask extents differ");
  long long np = 0, nt = 0, ni = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred[i] == cls;
    const bool t = truth[i] == cls;
    np += p;
    nt += t;
    ni += p && t;
  }
  if (np + nt == 0) return 1.0;
  return 2.0 * static_cast<double>(ni) / static_cast<double>(np + nt);
}

MetricsReport compute_report(const std::vector<std::vector<std::uint8_t>>& preds,
                             const std::vector<const std::vector<std::uint8_t>*>& truths,
                             int num_classes) {
  if (preds.empty() || preds.size() != truths.size()) {
    throw ContractError("compute_report: prediction/truth counts differ or are empty");
  }
  MetricsReport r;
  r.per_class.resize(static_cast<std::size_t>(num_classes));
  for (int c = 0; c < num_classes; ++c) {
    double dice_sum = 0.0;
    long long tp = 0, fp = 0, fn = 0, truth_total = 0;
    for (std::size_t i = 0; i < preds.size(); ++i) {
      const auto& p = preds[i];
      const auto& t = *truths[i];
      if (p.size() != t.size()) throw ShapeError("compute_report: mask extents differ");
      long long np = 0, nt = 0, ni = 0;
      for (std::size_t k = 0; k < p.size(); ++k) {
        const bool ip = p[k] == c;
        const bool it = t[k] == c;
        np += ip;
        nt += it;
        ni += ip && it;
      }
      dice_sum += np + nt == 0 ? 1.0 : 2.0 * static_cast<double>(ni) / static_cast<double>(np + nt);
      tp += ni;
      fp += np - ni;
      fn += nt - ni;
      truth_total += nt;
    }
    auto& cm = r.per_class[static_cast<std::size_t>(c)];
    cm.present = truth_total > 0;
    if (!cm.present) continue;
    cm.dice = 100.0 * dice_sum / static_cast<double>(preds.size());
    cm.f1 = 100.0 * 2.0 * static_cast<double>(tp) / static_cast<double>(2 * tp + fp + fn);
    cm.average = 0.5 * (cm.dice + cm.f1);
  }

  int n_present = 0, n_fg = 0;
  double fg_dice = 0.0;
  for (int c = 0; c < num_classes; ++c) {
    const auto& cm = r.per_class[static_cast<std::size_t>(c)];
    if (!cm.present) continue;
    ++n_present;
    r.macro_dice += cm.dice;
    r.macro_f1 += cm.f1;
    if (c != 0) {
      ++n_fg;
      fg_dice += cm.dice;
    }
  }
  if (n_present > 0) {
    r.macro_dice /= n_present;
    r.macro_f1 /= n_present;
    r.macro_average = 0.5 * (r.macro_dice + r.macro_f1);
  }
  if (n_fg > 0) r.foreground_dice = fg_dice / n_fg;
  return r;
}

MetricsReport evaluate(Model& m, const std::vector<Sample>& samples) {
  if (samples.empty()) throw DataError("evaluation set is empty");
  std::vector<std::vector<std::uint8_t>> preds(samples.size());
  parallel_for(samples.size(), [&](std::size_t i) {
    const Sample& s = samples[i];
    auto image = Tensor::make({1, 3, s.h, s.w});
    image->data = s.image;
    Graph g;
    auto logits = forward(g, m, image, Phase::eval);
    preds[i] = argmax_mask(*logits, 0);
  });
  std::vector<const std::vector<std::uint8_t>*> truths(samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) truths[i] = &samples[i].mask;
  return compute_report(preds, truths, m.cfg.num_classes);
}

std::string MetricsReport::table() const {
  std::ostringstream out;
  char line[128];
  std::snprintf(line, sizeof line, "%-12s %8s %8s %8s\n", "class", "Dice", "F1", "Average");
  out << line;
  for (std::size_t c = 0; c < per_class.size(); ++c) {
    const auto& cm = per_class[c];
    const char* name = c < kNumClasses ? class_name(static_cast<int>(c))
                                       : "extra";
    if (cm.present) {
      std::snprintf(line, sizeof line, "%-12s %8.2f %8.2f %8.2f\n", name, cm.dice, cm.f1,
                    cm.average);
    } else {
      std::snprintf(line, sizeof line, "%-12s %8s %8s %8s\n", name, "-", "-", "-");
    }
    out << line;
  }
  std::snprintf(line, sizeof line, "%-12s %8.2f %8.2f %8.2f\n", "macro", macro_dice, macro_f1,
                macro_average);
  out << line;
  return out.str();
}

std::string MetricsReport::key_values() const {
  std::ostringstream out;
  char buf[160];
  for (std::size_t c = 0; c < per_class.size(); ++c) {
    const auto& cm = per_class[c];
    const char* name = c < kNumClasses ? class_name(static_cast<int>(c)) : "extra";
    std::snprintf(buf, sizeof buf, "class.%s.present=%d\n", name, cm.present ? 1 : 0);
    out << buf;
    if (!cm.present) continue;
    std::snprintf(buf, sizeof buf, "class.%s.dice=%.17g\nclass.%s.f1=%.17g\nclass.%s.average=%.17g\n",
                  name, cm.dice, name, cm.f1, name, cm.average);
    out << buf;
  }
  std::snprintf(buf, sizeof buf, "macro.dice=%.17g\nmacro.f1=%.17g\nmacro.average=%.17g\n",
                macro_dice, macro_f1, macro_average);
  out << buf;
  std::snprintf(buf, sizeof buf, "foreground.dice=%.17g\n", foreground_dice);
  out << buf;
  return out.str();
}

MetricsReport mean_reports(const std::vector<MetricsReport>& reports) {
  if (reports.empty()) throw ContractError("mean_reports: no reports");
  MetricsReport mean;
  mean.per_class.resize(reports.front().per_class.size());
  for (const auto& r : reports) {
    if (r.per_class.size() != mean.per_class.size()) {
      throw ContractError("mean_reports: class layouts differ");
    }
    for (std::size_t c = 0; c < mean.per_class.size(); ++c) {
      mean.per_class[c].dice += r.per_class[c].dice;
      mean.per_class[c].f1 += r.per_class[c].f1;
      mean.per_class[c].present = mean.per_class[c].present || r.per_class[c].present;
    }
    mean.macro_dice += r.macro_dice;
    mean.macro_f1 += r.macro_f1;
    mean.foreground_dice += r.foreground_dice;
  }
  const double n = static_cast<double>(reports.size());
  for (auto& cm : mean.per_class) {
    cm.dice /= n;
    cm.f1 /= n;
    cm.average = 0.5 * (cm.dice + cm.f1);
  }
  mean.macro_dice /= n;
  mean.macro_f1 /= n;
  mean.macro_average = 0.5 * (mean.macro_dice + mean.macro_f1);
  mean.foreground_dice /= n;
  return mean;
}

}  // namespace fhseg
