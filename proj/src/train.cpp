#include "switch_sae/train.hpp"

#include "switch_sae/data.hpp"
#include "switch_sae/rng.hpp"

#include <cmath>
#include <optional>
#include <sstream>

namespace ssae {
namespace {

using ParamsVariant = std::variant<DenseSaeParams<double>, SwitchSaeParams<double>>;

Matrixd tied_decoder(Rng& rng, Index d, Index m) {
  Matrixd dec(d, m);
  for (Index j = 0; j < m; ++j)
    for (Index i = 0; i < d; ++i) dec(i, j) = rng.normal();
  dec.colwise().normalize();
  return dec;
}

/// Marks which global feature indices fired in one step.
void mark_active(const SparseLatents<double>& latents, Index expert_width,
                 std::vector<char>& fired) {
  for (std::size_t t = 0; t < latents.rows.size(); ++t) {
    const Index offset = latents.expert.empty() ? 0 : latents.expert[t] * expert_width;
    for (const auto& e : latents.rows[t].entries)
      fired[static_cast<std::size_t>(offset + e.index)] = 1;
  }
}

struct StepOutcome {
  LossBreakdown loss;
  std::vector<double> f;
  ParamsVariant grads;
};

StepOutcome compute_step(const SaeModel& model, const Batchd& x, double l1_coeff, double alpha,
                         std::vector<char>& fired) {
  StepOutcome out;
  switch (model.kind) {
    case ArchKind::TopK: {
      auto b = topk_sae_backward(model.dense(), x, model.k, model.topk_relu);
      mark_active(b.forward.latents, model.width(), fired);
      out.loss = b.loss;
      out.grads = std::move(b.grads);
      break;
    }
    case ArchKind::ReLU: {
      auto b = relu_sae_backward(model.dense(), x, l1_coeff);
      for (Index t = 0; t < b.forward.latents.rows(); ++t)
        for (Index j = 0; j < b.forward.latents.cols(); ++j)
          if (b.forward.latents(t, j) > 0) fired[static_cast<std::size_t>(j)] = 1;
      out.loss = b.loss;
      out.grads = std::move(b.grads);
      break;
    }
    case ArchKind::Switch: {
      auto b = switch_sae_backward(model.switched(), x, model.k, alpha, model.topk_relu);
      mark_active(b.forward.latents, model.switched().expert_width(), fired);
      out.loss = b.loss;
      const auto& f = b.forward.routing.f;
      out.f.assign(f.data(), f.data() + f.size());
      out.grads = std::move(b.grads);
      break;
    }
  }
  return out;
}

}  // namespace

void TrainConfig::validate() const {
  auto fail = [](const std::string& what) { throw std::invalid_argument("TrainConfig: " + what); };
  if (d < 1) fail("d must be at least 1");
  if (width < 1) fail("M must be at least 1");
  if (steps < 1) fail("steps must be at least 1");
  if (batch_size < 1) fail("batch_size must be at least 1");
  if (eval_every < 1) fail("eval_every must be at least 1");
  if (!(alpha >= 0)) fail("alpha must be non-negative");
  if (!(l1_coeff >= 0)) fail("l1_coeff must be non-negative");
  if (!(base_lr_scale >= 0)) fail("base_lr_scale must be non-negative");
  if (!(lr_decay_fraction >= 0 && lr_decay_fraction <= 1)) fail("lr_decay_fraction must lie in [0, 1]");
  switch (arch) {
    case ArchKind::TopK:
      if (k < 1 || k > width) fail("k must lie in [1, M]");
      break;
    case ArchKind::ReLU:
      break;
    case ArchKind::Switch:
      if (experts < 1) fail("N must be at least 1");
      if (width % experts != 0) fail("M must be divisible by N");
      if (k < 1 || k > width / experts) fail("k must lie in [1, M/N]");
      break;
  }
}

Index SaeModel::d() const {
  return std::visit([](const auto& p) { return p.d(); }, params);
}

Index SaeModel::width() const {
  return std::visit([](const auto& p) { return p.width(); }, params);
}

Index SaeModel::experts() const {
  return kind == ArchKind::Switch ? switched().num_experts() : 1;
}

double lr_schedule(Index step, Index total_steps, Index width, double base_lr_scale,
                   double decay_fraction) {
  const double base = base_lr_scale / std::sqrt(static_cast<double>(width));
  if (step >= total_steps) return 0.0;
  const double decay_start = (1.0 - decay_fraction) * static_cast<double>(total_steps);
  const double s = static_cast<double>(step);
  if (s < decay_start) return base;
  return base * (static_cast<double>(total_steps) - s) /
         (static_cast<double>(total_steps) - decay_start);
}

SaeModel init_params(const TrainConfig& config, const Batchd& init_batch, std::uint64_t seed) {
  config.validate();
  if (init_batch.rows() == 0) throw std::invalid_argument("init_params: empty initialization batch");
  if (init_batch.cols() != config.d)
    throw std::invalid_argument("init_params: batch width does not match d");

  SaeModel model;
  model.kind = config.arch;
  model.k = config.arch == ArchKind::ReLU ? 0 : config.k;
  model.topk_relu = config.topk_relu;
  Rng decoder_rng(mix_seed(seed, 0));
  const Vectord median = geometric_median(init_batch);

  if (config.arch == ArchKind::Switch) {
    const Index m = config.width / config.experts;
    auto p = SwitchSaeParams<double>::zeros(config.d, config.experts, m);
    for (auto& e : p.experts) {
      e.w_dec = tied_decoder(decoder_rng, config.d, m);
      e.w_enc = e.w_dec.transpose();
    }
    Rng router_rng(mix_seed(seed, 1));
    const double scale = 1.0 / std::sqrt(static_cast<double>(config.d));
    for (Index j = 0; j < config.d; ++j)
      for (Index i = 0; i < config.experts; ++i) p.w_router(i, j) = scale * router_rng.normal();
    p.b_pre = median;
    p.b_router = geometric_median(init_batch);
    model.params = std::move(p);
  } else {
    auto p = DenseSaeParams<double>::zeros(config.d, config.width);
    p.w_dec = tied_decoder(decoder_rng, config.d, config.width);
    p.w_enc = p.w_dec.transpose();
    p.b_pre = median;
    model.params = std::move(p);
  }
  return model;
}

TrainResult train(const TrainConfig& config, BatchSource& source, const StepObserver& observer) {
  config.validate();
  if (source.dim() != config.d)
    throw std::invalid_argument("train: data width " + std::to_string(source.dim()) +
                                " does not match d = " + std::to_string(config.d));

  Batchd batch = source.next_batch();
  TrainResult result{init_params(config, batch, mix_seed(config.seed, 0)), {}};
  SaeModel& model = result.model;

  std::visit([&](auto& p) { renormalize_decoder(p); }, model.params);
  auto adam = std::visit(
      [](const auto& p) -> std::variant<AdamState<DenseSaeParams<double>>, AdamState<SwitchSaeParams<double>>> {
        return AdamState<std::decay_t<decltype(p)>>::for_params(p);
      },
      model.params);

  const Index N = model.experts();
  std::vector<char> fired(static_cast<std::size_t>(model.width()), 0);
  std::vector<double> f_window(static_cast<std::size_t>(N), 0.0);
  double recon_window = 0.0, aux_window = 0.0, total_window = 0.0;
  Index window = 0;

  for (Index step = 0; step < config.steps; ++step) {
    if (step > 0) batch = source.next_batch();
    const double lr =
        lr_schedule(step, config.steps, config.width, config.base_lr_scale, config.lr_decay_fraction);

    StepOutcome outcome = compute_step(model, batch, config.l1_coeff, config.alpha, fired);
    const LossBreakdown& loss = outcome.loss;
    if (!std::isfinite(loss.total) || !std::isfinite(loss.recon) || !std::isfinite(loss.aux)) {
      std::ostringstream msg;
      msg << "non-finite loss at step " << step << ": recon=" << loss.recon << " aux=" << loss.aux
          << " l1=" << loss.l1 << " total=" << loss.total;
      throw NumericalError(msg.str());
    }
    if (outcome.f.empty()) outcome.f.assign(static_cast<std::size_t>(N), 1.0 / static_cast<double>(N));

    std::optional<SaeModel> before;
    if (observer) before = model;

    std::visit(
        [&](auto& p) {
          using P = std::decay_t<decltype(p)>;
          auto& g = std::get<P>(outcome.grads);
          project_decoder_grads(p, g);
          adam_step(std::get<AdamState<P>>(adam), p, g, lr);
          renormalize_decoder(p);
        },
        model.params);

    if (observer) observer(StepView{step, lr, loss, outcome.f, *before, outcome.grads, model});

    recon_window += loss.recon;
    aux_window += loss.aux;
    total_window += loss.total;
    for (Index i = 0; i < N; ++i) f_window[static_cast<std::size_t>(i)] += outcome.f[static_cast<std::size_t>(i)];
    ++window;

    if ((step + 1) % config.eval_every == 0 || step + 1 == config.steps) {
      TrainLogRow row;
      row.step = step;
      row.lr = lr;
      const double w = static_cast<double>(window);
      row.recon = recon_window / w;
      row.aux = aux_window / w;
      row.total = total_window / w;
      Index dead = 0;
      for (char c : fired) dead += c ? 0 : 1;
      row.dead_frac = static_cast<double>(dead) / static_cast<double>(fired.size());
      for (double v : f_window) row.f.push_back(v / w);
      result.log.push_back(std::move(row));

      std::fill(fired.begin(), fired.end(), 0);
      std::fill(f_window.begin(), f_window.end(), 0.0);
      recon_window = aux_window = total_window = 0.0;
      window = 0;
    }
  }
  return result;
}

}  // namespace ssae
