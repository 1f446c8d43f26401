#include "fhseg/gradcheck.hpp"

#include <cmath>

#include "fhseg/errors.hpp"
#include "fhseg/net.hpp"
#include "fhseg/ops.hpp"
#include "fhseg/train.hpp"
#include "fhseg/util.hpp"

namespace fhseg {

namespace {

std::string g_fault_op;  // check_all_ops row to corrupt; empty = none

TensorPtr random_tensor(std::vector<int> shape, std::mt19937_64& eng, double lo = -1.0,
                        double hi = 1.0) {
  auto t = Tensor::make(std::move(shape));
  for (double& v : t->data) v = uniform_real(eng, lo, hi);
  return t;
}

// Values bounded away from the ReLU kink so finite differences stay one-sided.
TensorPtr random_tensor_off_kink(std::vector<int> shape, std::mt19937_64& eng) {
  auto t = Tensor::make(std::move(shape));
  for (double& v : t->data) {
    const double sign = uniform01(eng) < 0.5 ? -1.0 : 1.0;
    v = sign * uniform_real(eng, 0.05, 1.0);
  }
  return t;
}

// Distinct values with gaps far larger than eps, so max-pool argmaxes are
// stable under perturbation.
TensorPtr random_tensor_distinct(std::vector<int> shape, std::mt19937_64& eng) {
  auto t = Tensor::make(std::move(shape));
  std::vector<int> order(t->numel());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
  fisher_yates(order, eng);
  for (std::size_t i = 0; i < order.size(); ++i) {
    t->data[i] = 0.1 * static_cast<double>(order[i]) + uniform_real(eng, -0.02, 0.02);
  }
  return t;
}

std::vector<std::size_t> all_coords(const Tensor& t) {
  std::vector<std::size_t> c(t.numel());
  for (std::size_t i = 0; i < c.size(); ++i) c[i] = i;
  return c;
}

// Central-difference check of d(build)/d(target) at the sampled coordinates.
// When branches_stable is non-null, every forward runs with branch tracing and
// the probe is only trusted while the +eps and -eps passes take exactly the
// branches of the unperturbed pass. The first straddled relu sign or pool
// argmax flip sets *branches_stable = false and returns early: a central
// difference across a piecewise boundary averages two different smooth pieces
// and says nothing about either one, so the caller must pick a different
// evaluation point rather than read the number.
double check_against(const BuildFn& build, Tensor& target, const std::vector<std::size_t>& coords,
                     double eps, double analytic_nudge, bool* branches_stable = nullptr) {
  target.requires_grad = true;
  std::vector<double> analytic(target.numel(), 0.0);
  std::uint64_t base_hash = 0;
  {
    Graph g;
    g.trace_branches(branches_stable != nullptr);
    target.zero_grad();
    auto out = build(g);
    if (!out || out->numel() != 1) throw ContractError("grad check needs a scalar function");
    g.backward(out);
    if (target.grad_allocated()) analytic = target.grad;
    base_hash = g.branch_hash();
  }
  if (analytic_nudge != 0.0 && !analytic.empty()) analytic[0] += analytic_nudge;

  double max_err = 0.0;
  for (std::size_t i : coords) {
    if (i >= target.numel()) throw ContractError("grad check coordinate out of range");
    const double orig = target.data[i];
    target.data[i] = orig + eps;
    double fp;
    std::uint64_t hash_p = base_hash;
    {
      Graph g;
      g.trace_branches(branches_stable != nullptr);
      fp = build(g)->data[0];
      hash_p = g.branch_hash();
    }
    target.data[i] = orig - eps;
    double fm;
    std::uint64_t hash_m = base_hash;
    {
      Graph g;
      g.trace_branches(branches_stable != nullptr);
      fm = build(g)->data[0];
      hash_m = g.branch_hash();
    }
    target.data[i] = orig;
    if (branches_stable != nullptr && (hash_p != base_hash || hash_m != base_hash)) {
      *branches_stable = false;
      target.zero_grad();
      return max_err;
    }
    const double numeric = (fp - fm) / (2.0 * eps);
    const double a = analytic[i];
    const double err = std::abs(a - numeric) / std::max({1.0, std::abs(a), std::abs(numeric)});
    max_err = std::max(max_err, err);
  }
  target.zero_grad();
  return max_err;
}

// Weighted sum turns any op output into a scalar whose gradient varies by
// position, so transposed or shifted backward indexing cannot cancel out.
TensorPtr weighted(Graph& g, const TensorPtr& x, const TensorPtr& wts) {
  return ops::sum(g, ops::mul(g, x, wts));
}

struct OpFixture {
  std::string name;
  std::vector<TensorPtr> targets;
  BuildFn build;
};

std::vector<OpFixture> make_fixtures(std::uint64_t seed) {
  std::vector<OpFixture> fx;
  auto eng_for = [seed](std::string_view label) { return seeded_engine(seed, label); };

  {
    auto eng = eng_for("conv2d");
    auto x = random_tensor({2, 2, 5, 5}, eng);
    auto k = random_tensor({3, 2, 3, 3}, eng);
    auto b = random_tensor({3}, eng);
    auto w1 = random_tensor({2, 3, 5, 5}, eng, 0.5, 1.5);
    auto xs = random_tensor({1, 2, 5, 5}, eng);
    auto w2 = random_tensor({1, 3, 2, 2}, eng, 0.5, 1.5);
    fx.push_back({"conv2d",
                  {x, k, b, xs},
                  [=](Graph& g) {
                    auto a = weighted(g, ops::conv2d(g, x, k, b, 1, 1), w1);
                    auto c = weighted(g, ops::conv2d(g, xs, k, b, 2, 0), w2);
                    return ops::add(g, a, c);
                  }});
  }
  {
    auto eng = eng_for("batch_norm");
    auto x = random_tensor({2, 3, 4, 4}, eng);
    auto gamma = random_tensor({3}, eng, 0.5, 1.5);
    auto beta = random_tensor({3}, eng);
    auto w = random_tensor({2, 3, 4, 4}, eng, 0.5, 1.5);
    auto state = std::make_shared<BatchNormState>();
    fx.push_back({"batch_norm",
                  {x, gamma, beta},
                  [=](Graph& g) {
                    return weighted(
                        g, ops::batch_norm(g, x, gamma, beta, *state, 1e-5, BnMode::train_frozen),
                        w);
                  }});
  }
  {
    auto eng = eng_for("batch_norm_eval");
    auto x = random_tensor({2, 3, 4, 4}, eng);
    auto gamma = random_tensor({3}, eng, 0.5, 1.5);
    auto beta = random_tensor({3}, eng);
    auto w = random_tensor({2, 3, 4, 4}, eng, 0.5, 1.5);
    auto state = std::make_shared<BatchNormState>();
    state->running_mean = {0.1, -0.2, 0.3};
    state->running_var = {1.1, 0.7, 1.4};
    fx.push_back({"batch_norm_eval",
                  {x, gamma, beta},
                  [=](Graph& g) {
                    return weighted(
                        g, ops::batch_norm(g, x, gamma, beta, *state, 1e-5, BnMode::eval), w);
                  }});
  }
  {
    auto eng = eng_for("relu");
    auto x = random_tensor_off_kink({2, 3, 4, 4}, eng);
    auto w = random_tensor({2, 3, 4, 4}, eng, 0.5, 1.5);
    fx.push_back({"relu", {x}, [=](Graph& g) { return weighted(g, ops::relu(g, x), w); }});
  }
  {
    auto eng = eng_for("sigmoid");
    auto x = random_tensor({2, 3, 4, 4}, eng, -3.0, 3.0);
    auto w = random_tensor({2, 3, 4, 4}, eng, 0.5, 1.5);
    fx.push_back(
        {"sigmoid", {x}, [=](Graph& g) { return weighted(g, ops::sigmoid(g, x), w); }});
  }
  {
    auto eng = eng_for("upsample_bilinear");
    auto x = random_tensor({1, 3, 4, 4}, eng);
    auto w = random_tensor({1, 3, 8, 8}, eng, 0.5, 1.5);
    fx.push_back({"upsample_bilinear", {x}, [=](Graph& g) {
                    return weighted(g, ops::upsample(g, x, 2, UpsampleMethod::bilinear), w);
                  }});
  }
  {
    auto eng = eng_for("upsample_nearest");
    auto x = random_tensor({1, 3, 4, 4}, eng);
    auto w = random_tensor({1, 3, 8, 8}, eng, 0.5, 1.5);
    fx.push_back({"upsample_nearest", {x}, [=](Graph& g) {
                    return weighted(g, ops::upsample(g, x, 2, UpsampleMethod::nearest), w);
                  }});
  }
  {
    auto eng = eng_for("downsample");
    auto x = random_tensor_distinct({1, 2, 4, 4}, eng);
    auto w = random_tensor({1, 2, 2, 2}, eng, 0.5, 1.5);
    fx.push_back({"downsample",
                  {x},
                  [=](Graph& g) { return weighted(g, ops::downsample(g, x, 2), w); }});
  }
  {
    auto eng = eng_for("concat");
    auto a = random_tensor({1, 2, 3, 3}, eng);
    auto b = random_tensor({1, 3, 3, 3}, eng);
    auto w = random_tensor({1, 5, 3, 3}, eng, 0.5, 1.5);
    fx.push_back({"concat", {a, b}, [=](Graph& g) {
                    return weighted(g, ops::concat(g, {a, b}), w);
                  }});
  }
  {
    auto eng = eng_for("slice_channels");
    auto x = random_tensor({1, 4, 3, 3}, eng);
    auto w = random_tensor({1, 2, 3, 3}, eng, 0.5, 1.5);
    fx.push_back({"slice_channels", {x}, [=](Graph& g) {
                    return weighted(g, ops::slice_channels(g, x, 1, 3), w);
                  }});
  }
  {
    auto eng = eng_for("mul");
    auto a = random_tensor({2, 2, 3, 3}, eng);
    auto b = random_tensor({2, 2, 3, 3}, eng);
    auto w = random_tensor({2, 2, 3, 3}, eng, 0.5, 1.5);
    fx.push_back({"mul", {a, b}, [=](Graph& g) { return weighted(g, ops::mul(g, a, b), w); }});
  }
  {
    auto eng = eng_for("mul_broadcast");
    auto a = random_tensor({1, 3, 4, 4}, eng);
    auto b = random_tensor({1, 1, 4, 4}, eng);
    auto w = random_tensor({1, 3, 4, 4}, eng, 0.5, 1.5);
    fx.push_back({"mul_broadcast",
                  {a, b},
                  [=](Graph& g) { return weighted(g, ops::mul(g, a, b), w); }});
  }
  {
    auto eng = eng_for("add");
    auto a = random_tensor({2, 2, 3, 3}, eng);
    auto b = random_tensor({2, 2, 3, 3}, eng);
    auto w = random_tensor({2, 2, 3, 3}, eng, 0.5, 1.5);
    fx.push_back({"add", {a, b}, [=](Graph& g) { return weighted(g, ops::add(g, a, b), w); }});
  }
  {
    auto eng = eng_for("sum");
    auto x = random_tensor({2, 3, 3, 3}, eng);
    fx.push_back({"sum", {x}, [=](Graph& g) { return ops::sum(g, x); }});
  }
  {
    auto eng = eng_for("cross_entropy");
    auto logits = random_tensor({2, 4, 3, 3}, eng, -2.0, 2.0);
    auto mask = std::make_shared<MaskBatch>();
    mask->b = 2;
    mask->h = 3;
    mask->w = 3;
    for (int i = 0; i < 18; ++i) {
      mask->ids.push_back(static_cast<std::uint8_t>(uniform_int(eng, 0, 3)));
    }
    fx.push_back({"cross_entropy",
                  {logits},
                  [=](Graph& g) { return cross_entropy(g, logits, *mask); }});
  }
  {
    auto eng = eng_for("soft_dice");
    auto logits = random_tensor({2, 4, 3, 3}, eng, -2.0, 2.0);
    auto mask = std::make_shared<MaskBatch>();
    mask->b = 2;
    mask->h = 3;
    mask->w = 3;
    for (int i = 0; i < 18; ++i) {
      mask->ids.push_back(static_cast<std::uint8_t>(uniform_int(eng, 0, 3)));
    }
    fx.push_back(
        {"soft_dice", {logits}, [=](Graph& g) { return soft_dice(g, logits, *mask); }});
  }
  {
    auto eng = eng_for("resample");
    auto x = random_tensor({1, 3, 4, 4}, eng);
    auto proj = std::make_shared<ConvLayer>();
    proj->w = random_tensor({5, 3, 1, 1}, eng);
    proj->b = random_tensor({5}, eng);
    proj->w->requires_grad = true;
    proj->b->requires_grad = true;
    auto w = random_tensor({1, 5, 8, 8}, eng, 0.5, 1.5);
    fx.push_back({"resample", {x, proj->w, proj->b}, [=](Graph& g) {
                    return weighted(g, resample(g, x, 8, 8, *proj), w);
                  }});
  }
  {
    auto eng = eng_for("hsa_gate");
    auto y = random_tensor({1, 6, 4, 4}, eng);
    auto h = random_tensor({1, 8, 4, 4}, eng);
    auto gate = std::make_shared<AttentionGateParams>();
    gate->inter = 4;
    gate->mx_w = random_tensor({4, 6, 1, 1}, eng);
    gate->my_w = random_tensor({4, 8, 1, 1}, eng);
    gate->cy = random_tensor({4}, eng);
    gate->phi_w = random_tensor({1, 4, 1, 1}, eng);
    gate->cphi = random_tensor({1}, eng);
    for (auto& t : {gate->mx_w, gate->my_w, gate->cy, gate->phi_w, gate->cphi}) {
      t->requires_grad = true;
    }
    auto w = random_tensor({1, 6, 4, 4}, eng, 0.5, 1.5);
    fx.push_back({"hsa_gate",
                  {y, h, gate->mx_w, gate->my_w, gate->cy, gate->phi_w, gate->cphi},
                  [=](Graph& g) {
                    auto beta = hsa_gate(g, y, h, *gate);
                    return weighted(g, ops::mul(g, y, beta), w);
                  }});
  }
  return fx;
}

}  // namespace

double grad_check_coords(const BuildFn& build, Tensor& target,
                         const std::vector<std::size_t>& coords, double eps) {
  if (eps < 1e-7 || eps > 1e-3) throw ConfigError("grad check eps must be in [1e-7, 1e-3]");
  return check_against(build, target, coords, eps, 0.0);
}

double grad_check(const TensorFn& f, const TensorPtr& input, double eps) {
  if (!input) throw ContractError("grad_check: null input");
  return grad_check_coords([&f, input](Graph& g) { return f(g, input); }, *input,
                           all_coords(*input), eps);
}

std::vector<OpCheckResult> check_all_ops(std::uint64_t seed, double eps, double tol) {
  if (eps < 1e-7 || eps > 1e-3) throw ConfigError("grad check eps must be in [1e-7, 1e-3]");
  std::vector<OpCheckResult> table;
  for (auto& fx : make_fixtures(seed)) {
    const double nudge = fx.name == g_fault_op ? 1e-2 : 0.0;
    OpCheckResult row;
    row.name = fx.name;
    for (auto& target : fx.targets) {
      target->requires_grad = true;
      row.max_rel_err = std::max(
          row.max_rel_err, check_against(fx.build, *target, all_coords(*target), eps, nudge));
    }
    row.pass = row.max_rel_err < tol;
    table.push_back(std::move(row));
  }
  return table;
}

ModelCheckResult full_model_check(std::uint64_t seed, double eps) {
  if (eps < 1e-7 || eps > 1e-3) throw ConfigError("grad check eps must be in [1e-7, 1e-3]");
  ModelConfig cfg;
  cfg.depth = 3;
  cfg.base_channels = 4;
  cfg.kernel_size = 3;
  cfg.skip_mode = SkipMode::fullscale_all;
  cfg.gates_enabled = true;
  cfg.skip_branch_channels = 8;
  cfg.num_classes = 7;
  cfg.input_channels = 3;

  // A random weight/input draw occasionally lands a relu preactivation or a
  // pool near-tie within eps-reach of a checked coordinate, and a central
  // difference across such a boundary measures neither adjacent piece. Those
  // draws are detected exactly (branch tracing) and redrawn deterministically;
  // the accepted draw has every sampled coordinate measured, none skipped.
  constexpr int kMaxAttempts = 20;
  ModelCheckResult result;
  for (int attempt = 0; attempt < kMaxAttempts; ++attempt) {
    const std::string salt = attempt == 0 ? "" : ".a" + std::to_string(attempt);
    Model model = build_model(cfg, derive_seed(seed, "gradcheck.model" + salt));

    auto eng = seeded_engine(seed, "gradcheck.data" + salt);
    auto image = random_tensor({1, 3, 16, 16}, eng, 0.0, 1.0);
    MaskBatch mask;
    mask.b = 1;
    mask.h = 16;
    mask.w = 16;
    for (int i = 0; i < 16 * 16; ++i) {
      mask.ids.push_back(static_cast<std::uint8_t>(uniform_int(eng, 0, cfg.num_classes - 1)));
    }

    BuildFn build = [&model, image, &mask](Graph& g) {
      auto logits = forward(g, model, image, Phase::frozen);
      return segmentation_loss(g, logits, mask);
    };

    result = ModelCheckResult{};
    result.attempt = attempt;
    result.measurable = true;
    image->requires_grad = true;
    std::vector<std::size_t> image_coords;
    const std::size_t phase = static_cast<std::size_t>(uniform_int(eng, 0, 7));
    for (std::size_t i = phase; i < image->numel(); i += 8) image_coords.push_back(i);
    result.max_rel_err = check_against(build, *image, image_coords, eps, 0.0, &result.measurable);
    result.coords = static_cast<long long>(image_coords.size());

    for (auto& p : model.params) {
      if (!result.measurable) break;
      std::vector<std::size_t> coords = {0};
      if (p.t->numel() > 1) {
        coords.push_back(static_cast<std::size_t>(
            uniform_int(eng, 1, static_cast<std::int64_t>(p.t->numel()) - 1)));
      }
      result.max_rel_err = std::max(
          result.max_rel_err, check_against(build, *p.t, coords, eps, 0.0, &result.measurable));
      result.coords += static_cast<long long>(coords.size());
    }
    if (result.measurable) return result;
  }
  return result;  // every attempt straddled a boundary; caller sees measurable == false
}

void set_fault_injection(const std::string& op_name) { g_fault_op = op_name; }

}  // namespace fhseg
