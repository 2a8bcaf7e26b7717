#pragma once

#include <chrono>
#include <cmath>
#include <limits>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "neuralfactors/checkpoint.hpp"
#include "neuralfactors/model.hpp"
#include "neuralfactors/panel.hpp"

namespace nf::train {

// decoupled weight decay so the penalty never routes through the moment
// estimates; decay_mask switches it off per tensor
struct Adam {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
  std::vector<Tensor> m, v;
  std::size_t t = 0;

  void init(const model::Weights& w) {
    m.clear();
    v.clear();
    for (const Tensor& p : w.values) {
      m.emplace_back(p.shape());
      v.emplace_back(p.shape());
    }
    t = 0;
  }

  void step(model::Weights& w, const std::vector<Tensor>& grads,
            const std::vector<char>& decay) {
    require(grads.size() == w.count() && decay.size() == w.count(),
            "optimizer state does not match the parameter list");
    ++t;
    const double c1 = 1.0 - std::pow(beta1, static_cast<double>(t));
    const double c2 = 1.0 - std::pow(beta2, static_cast<double>(t));
    for (std::size_t i = 0; i < w.count(); ++i) {
      auto& mw = m[i].data();
      auto& vw = v[i].data();
      auto& pw = w.values[i].data();
      const auto& g = grads[i].data();
      const double wd = decay[i] ? lr * weight_decay : 0.0;
      for (std::size_t j = 0; j < pw.size(); ++j) {
        mw[j] = beta1 * mw[j] + (1.0 - beta1) * g[j];
        vw[j] = beta2 * vw[j] + (1.0 - beta2) * g[j] * g[j];
        pw[j] -= lr * (mw[j] / c1) / (std::sqrt(vw[j] / c2) + eps) + wd * pw[j];
      }
    }
  }
};

// equal-weight running average of parameter iterates
struct Polyak {
  std::size_t count = 0;
  std::vector<Tensor> avg;

  void observe(const model::Weights& w) {
    if (avg.empty())
      for (const Tensor& p : w.values) avg.emplace_back(p.shape());
    ++count;
    const double k = static_cast<double>(count);
    for (std::size_t i = 0; i < avg.size(); ++i) {
      auto& a = avg[i].data();
      const auto& p = w.values[i].data();
      for (std::size_t j = 0; j < a.size(); ++j) a[j] += (p[j] - a[j]) / k;
    }
  }

  model::Weights materialize(const model::Weights& like) const {
    model::Weights out = like;
    if (count == 0) return out;
    for (std::size_t i = 0; i < out.count(); ++i) out.values[i] = avg[i];
    return out;
  }
};

namespace detail {

struct DaySample {
  data::DayWindows windows;
  Tensor r_next;
};

inline DaySample day_sample(const data::ReturnsPanel& p, const data::FeaturePanel& f,
                            std::size_t t, std::size_t lookback) {
  DaySample out;
  std::vector<std::size_t> both = data::members_at_both(p, t);
  require(!both.empty(), "no stocks present on both " + p.dates[t] + " and the next day");
  out.windows = data::make_windows(p, f, t, lookback, &both);
  out.r_next = data::gather_returns(p, t + 1, both);
  return out;
}

// dates whose window fits and whose target return stays inside [lo, hi)
inline std::vector<std::size_t> eligible_dates(std::size_t lookback, std::size_t lo,
                                               std::size_t hi) {
  std::vector<std::size_t> out;
  for (std::size_t t = std::max(lookback, lo); t + 1 < hi; ++t) out.push_back(t);
  return out;
}

// validation stays affordable on a fixed evenly-spaced subset of dates
inline std::vector<std::size_t> thin_dates(const std::vector<std::size_t>& dates,
                                           std::size_t cap) {
  if (dates.size() <= cap) return dates;
  std::vector<std::size_t> out(cap);
  for (std::size_t i = 0; i < cap; ++i)
    out[i] = dates[(i * (dates.size() - 1)) / (cap - 1)];
  return out;
}

}  // namespace detail

inline constexpr std::size_t kValDateCap = 32;

inline double validation_loss(const model::Weights& w, const model::ModelConfig& cfg,
                              const std::vector<detail::DaySample>& days) {
  double total = 0.0;
  for (const detail::DaySample& d : days) {
    ad::Tape tape;
    model::Lifted lifted = model::lift(tape, w, false);
    Rng rng = Rng::substream(cfg.seed, "val.draws", d.windows.t);
    total += model::ciwae_loss(tape, lifted, cfg, d.windows, d.r_next, model::no_dropout(), rng)
                 .val()
                 .value();
  }
  return total / static_cast<double>(days.size());
}

inline ckpt::Checkpoint train(model::ModelConfig cfg, const data::ReturnsPanel& panel,
                              const data::FeaturePanel& features,
                              const data::SplitRanges& split, std::ostream* log = nullptr) {
  cfg.channels = 2 + features.ts_width();
  cfg.d_static = features.static_width();
  cfg.validate();

  const std::vector<std::size_t> train_dates =
      detail::eligible_dates(cfg.lookback, 0, split.train_end);
  require(!train_dates.empty(), "training split is empty after lookback warm-up");
  const std::vector<std::size_t> val_dates = detail::thin_dates(
      detail::eligible_dates(cfg.lookback, split.train_end, split.val_end), kValDateCap);

  model::Weights weights = model::init_weights(cfg);
  std::vector<char> decay(weights.count());
  for (std::size_t i = 0; i < weights.count(); ++i)
    decay[i] = weights.names[i].rfind("prior.", 0) == 0 ? 0 : 1;

  Adam adam;
  adam.lr = cfg.lr;
  adam.weight_decay = cfg.weight_decay;
  adam.init(weights);
  Polyak polyak;
  const std::size_t polyak_start = cfg.effective_polyak_start();

  std::vector<std::optional<detail::DaySample>> cache(panel.days());
  auto day_at = [&](std::size_t t) -> const detail::DaySample& {
    if (!cache[t]) cache[t] = detail::day_sample(panel, features, t, cfg.lookback);
    return *cache[t];
  };
  std::vector<detail::DaySample> val_days;
  for (std::size_t t : val_dates) val_days.push_back(day_at(t));

  Rng date_rng = Rng::substream(cfg.seed, "train.dates");
  const auto started = std::chrono::steady_clock::now();
  double best_val = std::numeric_limits<double>::infinity();
  std::optional<model::Weights> best_polyak;
  double train_acc = 0.0;
  std::size_t train_acc_n = 0;

  for (std::size_t step = 1; step <= cfg.steps; ++step) {
    const std::size_t t = train_dates[date_rng.uniform_index(train_dates.size())];
    const detail::DaySample& day = day_at(t);

    ad::Tape tape;
    model::Lifted lifted = model::lift(tape, weights);
    std::vector<Tensor> grads;
    grads.reserve(weights.count());
    try {
      Rng mask_rng = Rng::substream(cfg.seed, "train.dropout", step);
      model::DropoutMasks drop = model::draw_dropout(cfg, mask_rng);
      Rng draw_rng = Rng::substream(cfg.seed, "train.draws", step);
      ad::Val loss =
          model::ciwae_loss(tape, lifted, cfg, day.windows, day.r_next, drop, draw_rng);
      const double loss_v = loss.val().value();
      if (!std::isfinite(loss_v)) throw NumericalError("training loss is not finite");
      train_acc += loss_v;
      ++train_acc_n;
      tape.backward(loss);
    } catch (const NumericalError& e) {
      throw NumericalError("training diverged at step " + std::to_string(step) + ": " +
                           e.what());
    }
    for (ad::Val v : lifted.vals) grads.push_back(tape.grad(v));
    adam.step(weights, grads, decay);

    if (step > polyak_start) polyak.observe(weights);

    if (cfg.val_every && step % cfg.val_every == 0 && polyak.count > 0 && !val_days.empty()) {
      const model::Weights averaged = polyak.materialize(weights);
      const double val_v = validation_loss(averaged, cfg, val_days);
      if (val_v < best_val) {
        best_val = val_v;
        best_polyak = averaged;
      }
      if (log) {
        const double secs =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
        nlohmann::json line{{"step", step},
                            {"train_loss", train_acc / static_cast<double>(train_acc_n)},
                            {"val_loss", val_v},
                            {"wallclock_s", secs}};
        *log << line.dump() << "\n";
      }
      train_acc = 0.0;
      train_acc_n = 0;
    }
  }

  ckpt::Checkpoint out;
  out.config = cfg;
  out.norm_constant = panel.norm_constant;
  out.weights = weights;
  out.polyak = best_polyak ? std::move(*best_polyak) : polyak.materialize(weights);
  return out;
}

}  // namespace nf::train
