#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "itx/model.hpp"

namespace itx {

struct TrainConfig {
  int64_t epochs = 10;
  int64_t batch = 2;
  double peak_lr = 1e-3;  // desk default; full-scale training used 1e-5
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  uint64_t seed = 0;
  double val_fraction = 0.05;

  void validate() const {
    check_config(epochs > 0 && batch > 0, "epochs and batch must be positive");
    check_config(peak_lr >= 0.0, "peak learning rate must be non-negative");
    check_config(val_fraction > 0.0 && val_fraction < 1.0,
                 "validation fraction must be in (0,1)");
  }
};

/// Mean squared difference over all elements (64-bit accumulation).
template <typename T>
double mse(const TensorT<T>& a, const TensorT<T>& b) {
  check_shape(a.dims() == b.dims(),
              "mse: dims mismatch " + a.dims().str() + " vs " + b.dims().str());
  double acc = 0.0;
  for (int64_t i = 0; i < a.size(); ++i) {
    const double e = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    acc += e * e;
  }
  return acc / static_cast<double>(a.size());
}

/// One-cycle schedule: linear warmup from peak/25 to peak over the first
/// 30% of steps, then cosine decay to peak/1e4.
inline double one_cycle_lr(int64_t step, int64_t total_steps, double peak_lr) {
  check_config(total_steps > 0, "one_cycle_lr: total_steps must be positive");
  if (step < 0 || step >= total_steps)
    throw ConfigError("one_cycle_lr: step " + std::to_string(step) +
                      " outside [0," + std::to_string(total_steps) + ")");
  const double start = peak_lr / 25.0;
  const double floor = peak_lr / 1e4;
  int64_t warm = std::llround(0.3 * static_cast<double>(total_steps));
  warm = std::clamp<int64_t>(warm, 1, total_steps - 1 > 0 ? total_steps - 1 : 1);
  if (total_steps == 1) return peak_lr;
  if (step < warm)
    return start + (peak_lr - start) * static_cast<double>(step) /
                       static_cast<double>(warm);
  const double x = static_cast<double>(step - warm) /
                   static_cast<double>(total_steps - 1 - warm > 0
                                           ? total_steps - 1 - warm
                                           : 1);
  return floor + (peak_lr - floor) * 0.5 * (1.0 + std::cos(M_PI * x));
}

/// Adam first/second moments, aligned with ParamStore entry order.
struct AdamState {
  std::vector<Tensor5D> m, v;
  int64_t t = 0;

  static AdamState init(const ParamStore& params) {
    AdamState s;
    for (size_t i = 0; i < params.count(); ++i) {
      s.m.emplace_back(params.entry(i).second.dims());
      s.v.emplace_back(params.entry(i).second.dims());
    }
    return s;
  }
};

/// Standard Adam update with bias correction. Parameters without a gradient
/// entry are treated as zero-gradient.
inline void adam_step(ParamStore& params,
                      const std::unordered_map<std::string, Tensor5D>& grads,
                      AdamState& state, double lr, double beta1, double beta2,
                      double eps) {
  check_config(state.m.size() == params.count(), "adam state not initialized");
  state.t += 1;
  const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(state.t));
  for (size_t i = 0; i < params.count(); ++i) {
    auto& [name, p] = params.entry(i);
    auto it = grads.find(name);
    Tensor5D& m = state.m[i];
    Tensor5D& v = state.v[i];
    for (int64_t j = 0; j < p.size(); ++j) {
      const double g = it == grads.end() ? 0.0 : static_cast<double>(it->second[j]);
      const double mj = beta1 * m[j] + (1.0 - beta1) * g;
      const double vj = beta2 * v[j] + (1.0 - beta2) * g * g;
      m[j] = static_cast<float>(mj);
      v[j] = static_cast<float>(vj);
      p[j] -= static_cast<float>(lr * (mj / bc1) /
                                 (std::sqrt(vj / bc2) + eps));
    }
  }
}

struct Sample {
  Tensor5D input;   // (1, 3, F, H, W): real, imag, g-map
  Tensor5D target;  // (1, 2, F, H, W): real, imag
};

struct EpochLog {
  int64_t epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double lr = 0.0;
};

struct TrainResult {
  std::vector<EpochLog> log;
  double best_val = std::numeric_limits<double>::infinity();
  int64_t best_epoch = -1;
  int64_t steps_done = 0;
};

namespace detail {

inline Tensor5D stack_batch(const std::vector<Sample>& data,
                            const std::vector<size_t>& idx, bool inputs) {
  const Tensor5D& first = inputs ? data[idx[0]].input : data[idx[0]].target;
  Dims5 d = first.dims();
  d.b = static_cast<int64_t>(idx.size());
  Tensor5D out(d);
  const int64_t per = first.size();
  for (size_t i = 0; i < idx.size(); ++i) {
    const Tensor5D& t = inputs ? data[idx[i]].input : data[idx[i]].target;
    check_shape(t.dims() == first.dims(), "train: samples must share dims");
    std::copy(t.data(), t.data() + per, out.data() + static_cast<int64_t>(i) * per);
  }
  return out;
}

}  // namespace detail

/// Desk-scale training loop: seeded shuffling, 95/5 style split, Adam with
/// one-cycle schedule, per-epoch train/validation loss, best-validation
/// checkpointing. Same seed reproduces the loss log exactly.
inline TrainResult train(Model& model, const std::vector<Sample>& data,
                         const TrainConfig& cfg,
                         const std::string& best_path = "",
                         const std::string& last_path = "",
                         int64_t start_step = 0) {
  cfg.validate();
  check_config(!data.empty(), "train: dataset is empty");
  check_config(data.size() >= 2,
               "train: need at least 2 samples to hold out validation data");

  std::mt19937_64 rng(cfg.seed);
  std::vector<size_t> order(data.size());
  std::iota(order.begin(), order.end(), size_t{0});
  std::shuffle(order.begin(), order.end(), rng);
  int64_t n_val = std::llround(cfg.val_fraction * static_cast<double>(data.size()));
  n_val = std::clamp<int64_t>(n_val, 1, static_cast<int64_t>(data.size()) - 1);
  std::vector<size_t> val_idx(order.begin(), order.begin() + n_val);
  std::vector<size_t> train_idx(order.begin() + n_val, order.end());

  const int64_t batch =
      std::min<int64_t>(cfg.batch, static_cast<int64_t>(train_idx.size()));
  const int64_t steps_per_epoch =
      (static_cast<int64_t>(train_idx.size()) + batch - 1) / batch;
  const int64_t total_steps = cfg.epochs * steps_per_epoch;

  AdamState adam = AdamState::init(model.params);
  TrainResult res;
  int64_t step = 0;

  for (int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(train_idx.begin(), train_idx.end(), rng);
    double loss_sum = 0.0;
    int64_t loss_n = 0;
    double lr = 0.0;
    for (int64_t s0 = 0; s0 < static_cast<int64_t>(train_idx.size());
         s0 += batch) {
      std::vector<size_t> bidx(
          train_idx.begin() + s0,
          train_idx.begin() +
              std::min<int64_t>(s0 + batch,
                                static_cast<int64_t>(train_idx.size())));
      Tensor5D in = detail::stack_batch(data, bidx, true);
      auto target = std::make_shared<const Tensor5D>(
          detail::stack_batch(data, bidx, false));

      ad::Graph g(true);
      ParamBinding<float> P(g, model.params);
      std::mt19937_64 drop_rng(mix_seed(cfg.seed, 0xd0d0 + start_step + step));
      ad::Id out =
          model_forward_graph(g, P, model.cfg, g.input(in), true, &drop_rng);
      ad::Id loss = ad::mse_loss(g, out, target);
      const double loss_v = static_cast<double>(g.val(loss)[0]);
      g.backward(loss);
      auto grads = g.param_grads();

      lr = one_cycle_lr(step, total_steps, cfg.peak_lr);
      adam_step(model.params, grads, adam, lr, cfg.beta1, cfg.beta2, cfg.eps);
      loss_sum += loss_v * static_cast<double>(bidx.size());
      loss_n += static_cast<int64_t>(bidx.size());
      ++step;
    }

    double val_sum = 0.0;
    for (size_t vi : val_idx) {
      Tensor5D out = model_forward(model, data[vi].input, false);
      val_sum += mse(out, data[vi].target);
    }
    const double val_loss = val_sum / static_cast<double>(val_idx.size());
    res.log.push_back(EpochLog{epoch, loss_sum / static_cast<double>(loss_n),
                               val_loss, lr});
    if (val_loss < res.best_val) {
      res.best_val = val_loss;
      res.best_epoch = epoch;
      if (!best_path.empty())
        save_params(model, best_path,
                    {{"epoch", epoch}, {"step", start_step + step},
                     {"val_loss", val_loss}});
    }
  }
  res.steps_done = step;
  if (!last_path.empty())
    save_params(model, last_path,
                {{"epoch", cfg.epochs - 1}, {"step", start_step + step}});
  return res;
}

}  // namespace itx
