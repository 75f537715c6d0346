#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "vitrm/data.hpp"
#include "vitrm/metrics.hpp"
#include "vitrm/model.hpp"
#include "vitrm/tensor.hpp"

// Deep-supervision training: per-step optimizer updates under a fresh tape,
// state detachment between steps, batch-mean halting exit, AdamW with a
// cosine/warmup schedule, and an EMA shadow of the weights.

namespace vitrm {

struct TrainConfig {
  double lr_max = 3e-4;
  double weight_decay = 0.05;
  double warmup_fraction = 0.05;  // of the total optimizer-step budget
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double ema_decay = 0.999;
  int batch_size = 128;
  int max_epochs = 1000;
  int patience = 10;
  int micro_batch = 64;  // gradient-accumulation chunk inside one update
  std::uint64_t seed = 0;

  void validate() const {
    auto fail = [](const std::string& msg) {
      throw std::invalid_argument("train config: " + msg);
    };
    if (!(lr_max > 0.0)) fail("lr_max must be positive");
    if (weight_decay < 0.0) fail("weight_decay must be >= 0");
    if (warmup_fraction < 0.0 || warmup_fraction >= 1.0)
      fail("warmup_fraction must lie in [0, 1)");
    if (beta1 < 0.0 || beta1 >= 1.0) fail("beta1 must lie in [0, 1)");
    if (beta2 < 0.0 || beta2 >= 1.0) fail("beta2 must lie in [0, 1)");
    if (!(adam_eps > 0.0)) fail("adam_eps must be positive");
    if (!(ema_decay > 0.0 && ema_decay < 1.0))
      fail("ema_decay must lie in (0, 1)");
    if (batch_size < 1) fail("batch_size must be >= 1");
    if (max_epochs < 1) fail("max_epochs must be >= 1");
    if (patience < 1) fail("patience must be >= 1");
    if (micro_batch < 1) fail("micro_batch must be >= 1");
  }
};

// Linear ramp to lr_max over the warmup steps, then cosine decay to zero.
inline double cosine_lr(long step, long total_steps, long warmup_steps,
                        double lr_max) {
  if (step < 0 || step > total_steps)
    throw std::invalid_argument("cosine_lr: step " + std::to_string(step) +
                                " outside [0, " + std::to_string(total_steps) +
                                "]");
  if (warmup_steps > 0 && step < warmup_steps)
    return lr_max * static_cast<double>(step) /
           static_cast<double>(warmup_steps);
  if (total_steps <= warmup_steps) return lr_max;
  const double progress = static_cast<double>(step - warmup_steps) /
                          static_cast<double>(total_steps - warmup_steps);
  const double lr = 0.5 * lr_max * (1.0 + std::cos(progress * M_PI));
  return std::max(lr, 0.0);
}

// True once the best accuracy is `patience` or more epochs old. Improvement
// is strict; ties keep the earlier epoch.
inline bool early_stop(const std::vector<double>& history, int patience) {
  if (history.empty())
    throw std::invalid_argument("early_stop: empty history");
  std::size_t best = 0;
  for (std::size_t i = 1; i < history.size(); ++i)
    if (history[i] > history[best]) best = i;
  return history.size() - 1 - best >= static_cast<std::size_t>(patience);
}

template <class Real>
class AdamWT {
 public:
  AdamWT() = default;
  AdamWT(std::vector<ParamRefT<Real>> params, double beta1, double beta2,
         double eps, double weight_decay)
      : params_(std::move(params)),
        beta1_(beta1),
        beta2_(beta2),
        eps_(eps),
        weight_decay_(weight_decay) {
    m_.resize(params_.size());
    v_.resize(params_.size());
    for (std::size_t i = 0; i < params_.size(); ++i) {
      m_[i].assign(params_[i].tensor.size(), Real(0));
      v_[i].assign(params_[i].tensor.size(), Real(0));
    }
  }

  AdamWT(ModelParamsT<Real>& params, const TrainConfig& cfg)
      : AdamWT(all_params(params), cfg.beta1, cfg.beta2, cfg.adam_eps,
               cfg.weight_decay) {}

  // Bias-corrected moments plus decoupled weight decay, both applied
  // against the pre-update parameter value.
  void step(double lr) {
    ++step_count_;
    const Real b1 = static_cast<Real>(beta1_);
    const Real b2 = static_cast<Real>(beta2_);
    const Real bc1 =
        Real(1) - static_cast<Real>(std::pow(beta1_, step_count_));
    const Real bc2 =
        Real(1) - static_cast<Real>(std::pow(beta2_, step_count_));
    const Real lrr = static_cast<Real>(lr);
    const Real epsr = static_cast<Real>(eps_);
    for (std::size_t s = 0; s < params_.size(); ++s) {
      auto& t = params_[s].tensor;
      const Real wd = params_[s].weight_decay
                          ? static_cast<Real>(weight_decay_)
                          : Real(0);
      const Real* g = t.has_grad() ? t.grad().data() : nullptr;
      Real* __restrict__ theta = t.data();
      Real* __restrict__ m = m_[s].data();
      Real* __restrict__ v = v_[s].data();
      const std::size_t n = t.size();
      for (std::size_t i = 0; i < n; ++i) {
        const Real gi = g ? g[i] : Real(0);
        m[i] = b1 * m[i] + (Real(1) - b1) * gi;
        v[i] = b2 * v[i] + (Real(1) - b2) * gi * gi;
        const Real mhat = m[i] / bc1;
        const Real vhat = v[i] / bc2;
        theta[i] -= lrr * (mhat / (std::sqrt(vhat) + epsr) + wd * theta[i]);
      }
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.tensor.zero_grad();
  }

  long step_count() const { return step_count_; }
  void set_step_count(long t) { step_count_ = t; }
  std::size_t slot_count() const { return params_.size(); }
  const ParamRefT<Real>& slot(std::size_t i) const { return params_[i]; }
  std::vector<Real>& moment1(std::size_t i) { return m_[i]; }
  std::vector<Real>& moment2(std::size_t i) { return v_[i]; }

 private:
  std::vector<ParamRefT<Real>> params_;
  std::vector<std::vector<Real>> m_, v_;
  double beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-8, weight_decay_ = 0.0;
  long step_count_ = 0;
};

// Shadow copy of every trainable array; never sees gradients.
template <class Real>
class EmaT {
 public:
  EmaT() = default;
  explicit EmaT(ModelParamsT<Real>& params) {
    for (auto& ref : all_params(params)) shadow_.push_back(ref.tensor.values());
  }

  void update(ModelParamsT<Real>& params, double decay) {
    const Real d = static_cast<Real>(decay);
    auto refs = all_params(params);
    for (std::size_t s = 0; s < refs.size(); ++s) {
      const Real* p = refs[s].tensor.data();
      Real* sh = shadow_[s].data();
      const std::size_t n = shadow_[s].size();
      for (std::size_t i = 0; i < n; ++i)
        sh[i] = d * sh[i] + (Real(1) - d) * p[i];
    }
  }

  void copy_to(ModelParamsT<Real>& params) const {
    auto refs = all_params(params);
    for (std::size_t s = 0; s < refs.size(); ++s)
      std::copy(shadow_[s].begin(), shadow_[s].end(),
                refs[s].tensor.data());
  }

  std::size_t slot_count() const { return shadow_.size(); }
  std::vector<Real>& shadow(std::size_t i) { return shadow_[i]; }
  const std::vector<Real>& shadow(std::size_t i) const { return shadow_[i]; }

 private:
  std::vector<std::vector<Real>> shadow_;
};

template <class Real>
struct LossBundleT {
  TensorT<Real> total, cls, halt;  // total = cls + halt, all scalars
  std::vector<int> predicted;
  long correct = 0;
};

// Eq-style combined loss: soft-target cross-entropy plus binary
// cross-entropy on the halting logit against the correctness indicator.
// The indicator is data, never a gradient path; argmax ties resolve to the
// lowest class index.
template <class Real>
LossBundleT<Real> total_loss(const TensorT<Real>& logits,
                             const TensorT<Real>& soft_targets,
                             const std::vector<int>& hard_labels,
                             const TensorT<Real>& halt_logits) {
  const std::size_t batch = logits.rows();
  if (hard_labels.size() != batch)
    throw std::invalid_argument("total_loss: " +
                                std::to_string(hard_labels.size()) +
                                " labels for batch " + std::to_string(batch));
  LossBundleT<Real> out;
  out.predicted.resize(batch);
  auto halt_target = TensorT<Real>::zeros(batch, 1);
  for (std::size_t r = 0; r < batch; ++r) {
    const int cls = static_cast<int>(argmax_row(logits, r));
    out.predicted[r] = cls;
    if (hard_labels[r] < 0 ||
        hard_labels[r] >= static_cast<int>(logits.cols()))
      throw std::invalid_argument("total_loss: label " +
                                  std::to_string(hard_labels[r]) +
                                  " outside [0, " +
                                  std::to_string(logits.cols()) + ")");
    if (cls == hard_labels[r]) {
      halt_target.at(r, 0) = Real(1);
      ++out.correct;
    }
  }
  out.cls = cross_entropy_soft(logits, soft_targets);
  out.halt = bce_with_logits(halt_logits, halt_target);
  out.total = add(out.cls, out.halt);
  return out;
}

template <class Real>
struct SupervisionContextT {
  ModelParamsT<Real>* params = nullptr;
  AdamWT<Real>* opt = nullptr;
  EmaT<Real>* ema = nullptr;  // optional
  double ema_decay = 0.999;
  int micro_batch = 64;
};

template <class Real>
struct StepResultT {
  double loss_total = 0.0;
  double loss_cls = 0.0;
  double loss_halt = 0.0;
  double mean_halt = 0.0;
  long correct = 0;
};

namespace detail {

template <class Real>
TensorT<Real> chunk_targets(const LabeledBatch& batch, long lo, long take) {
  std::vector<Real> vals(take * batch.classes);
  for (long i = 0; i < take * batch.classes; ++i)
    vals[i] = static_cast<Real>(
        batch.soft_targets[lo * batch.classes + i]);
  return TensorT<Real>::from_values(take, batch.classes, std::move(vals));
}

template <class Real>
std::string grad_norm_summary(ModelParamsT<Real>& params) {
  double total = 0.0;
  for (auto& ref : all_params(params)) {
    if (!ref.tensor.has_grad()) continue;
    for (Real g : ref.tensor.grad())
      total += static_cast<double>(g) * static_cast<double>(g);
  }
  return "|grad| = " + std::to_string(std::sqrt(total));
}

}  // namespace detail

// One supervised segment: forward under a fresh tape from a detached state,
// combined loss, backward, one AdamW update, EMA update, and a detached
// state handed to the next segment. Large batches accumulate gradients over
// micro-batch chunks of fixed size; the result equals the full-batch mean.
//
// Image tokens are embedded once per batch: the first step fills
// `token_cache` (and backpropagates into the patch projection); later steps
// reuse the cached values as constants, keeping x bit-identical across
// segments even though the parameters moved.
template <class Real>
StepResultT<Real> supervision_step(const SupervisionContextT<Real>& ctx,
                                   const LabeledBatch& batch,
                                   RecurrentStateT<Real>& state,
                                   std::vector<TensorT<Real>>& token_cache,
                                   double lr, int step_index) {
  ModelParamsT<Real>& params = *ctx.params;
  const ModelConfig& cfg = params.config;
  const long B = batch.size;
  const auto K = static_cast<std::size_t>(cfg.latent_tokens);
  const bool first_step = token_cache.empty();

  StepResultT<Real> res;
  std::vector<TensorT<Real>> pred_chunks, mem_chunks;
  long chunk_index = 0;
  for (long lo = 0; lo < B; lo += ctx.micro_batch, ++chunk_index) {
    const long take = std::min<long>(ctx.micro_batch, B - lo);
    TapeT<Real> tape;

    TensorT<Real> x;
    if (first_step) {
      x = patch_embed(batch.images.data() + lo * kImageBytes,
                      static_cast<std::size_t>(take), params);
    } else {
      x = token_cache[chunk_index];
    }

    RecurrentStateT<Real> chunk_state;
    chunk_state.batch = static_cast<std::size_t>(take);
    chunk_state.pred = slice_tokens(state.pred, lo, take);
    chunk_state.memory = slice_tokens(state.memory, lo * K, take * K);

    auto [pred, new_state] = recurse(x, chunk_state, params,
                                     cfg.recursion_steps, cfg.latent_steps);
    auto h = heads(pred, params);
    auto targets = detail::chunk_targets<Real>(batch, lo, take);
    std::vector<int> hard(batch.hard_labels.begin() + lo,
                          batch.hard_labels.begin() + lo + take);
    auto loss = total_loss(h.logits, targets, hard, h.halt_logits);

    const double w = static_cast<double>(take) / static_cast<double>(B);
    const double lt = static_cast<double>(loss.total.item());
    if (!std::isfinite(lt))
      throw std::runtime_error(
          "supervision step " + std::to_string(step_index) +
          ": non-finite loss (total=" + std::to_string(lt) +
          ", lr=" + std::to_string(lr) + ", " +
          detail::grad_norm_summary(params) + ")");
    backward(scale_by(loss.total, static_cast<Real>(w)));

    res.loss_total += lt * w;
    res.loss_cls += static_cast<double>(loss.cls.item()) * w;
    res.loss_halt += static_cast<double>(loss.halt.item()) * w;
    res.correct += loss.correct;
    for (Real q : h.halt_prob)
      res.mean_halt += static_cast<double>(q) / static_cast<double>(B);

    pred_chunks.push_back(detach(new_state.pred));
    mem_chunks.push_back(detach(new_state.memory));
    if (first_step) token_cache.push_back(detach(x));
  }

  ctx.opt->step(lr);
  ctx.opt->zero_grad();
  if (ctx.ema) ctx.ema->update(params, ctx.ema_decay);

  state.batch = static_cast<std::size_t>(B);
  state.pred = concat_tokens(pred_chunks);
  state.memory = concat_tokens(mem_chunks);
  return res;
}

template <class Real>
struct LoopResultT {
  int steps_used = 0;
  StepResultT<Real> last;  // metrics of the final executed segment
};

// Runs up to `max_steps` supervised segments, exiting early once the
// batch-mean halting probability (from the segment's own forward pass)
// exceeds tau. The recurrent state threads through detached.
template <class Real>
LoopResultT<Real> deep_supervision_loop(const SupervisionContextT<Real>& ctx,
                                        const LabeledBatch& batch,
                                        int max_steps, double tau,
                                        double lr) {
  if (max_steps < 1)
    throw std::invalid_argument("deep_supervision_loop: max_steps >= 1");
  LoopResultT<Real> out;
  RecurrentStateT<Real> state =
      detach_state(init_state(*ctx.params, batch.size));
  std::vector<TensorT<Real>> token_cache;
  for (int n = 0; n < max_steps; ++n) {
    out.last = supervision_step(ctx, batch, state, token_cache, lr, n);
    ++out.steps_used;
    if (out.last.mean_halt > tau) break;
  }
  return out;
}

template <class Real>
struct EvalResultT {
  double accuracy = 0.0;
  double loss_total = 0.0;
  double loss_cls = 0.0;
  double loss_halt = 0.0;
  double mean_halt = 0.0;
  long count = 0;
};

// Inference protocol: exactly T recursion steps, no halting condition, no
// augmentation or target mixing; plain argmax accuracy.
template <class Real>
EvalResultT<Real> evaluate(const std::vector<ImageRecord>& records,
                           const DataStats& stats,
                           ModelParamsT<Real>& params, int recursion_steps,
                           int latent_steps, int eval_batch = 250,
                           long subset = 0) {
  BatchOptions opts;
  opts.batch_size = eval_batch;
  opts.num_classes = params.config.num_classes;
  opts.train_mode = false;
  opts.subset = subset;
  BatchIter iter(records, stats, opts);
  EvalResultT<Real> res;
  LabeledBatch b;
  long correct = 0;
  while (iter.next(b)) {
    auto x = patch_embed(b.images.data(), b.size, params);
    auto state = init_state(params, b.size);
    auto [pred, st] =
        recurse(x, state, params, recursion_steps, latent_steps);
    auto h = heads(pred, params);
    auto targets = detail::chunk_targets<Real>(b, 0, b.size);
    auto loss = total_loss(h.logits, targets, b.hard_labels, h.halt_logits);
    correct += loss.correct;
    res.loss_total += static_cast<double>(loss.total.item()) * b.size;
    res.loss_cls += static_cast<double>(loss.cls.item()) * b.size;
    res.loss_halt += static_cast<double>(loss.halt.item()) * b.size;
    for (Real q : h.halt_prob) res.mean_halt += static_cast<double>(q);
    res.count += b.size;
  }
  if (res.count > 0) {
    res.accuracy = static_cast<double>(correct) / res.count;
    res.loss_total /= res.count;
    res.loss_cls /= res.count;
    res.loss_halt /= res.count;
    res.mean_halt /= res.count;
  }
  return res;
}

template <class Real>
struct TrainerStateT {
  ModelParamsT<Real> params;
  AdamWT<Real> opt;
  EmaT<Real> ema;
  long global_step = 0;  // optimizer batches seen; drives the lr schedule
  int epoch = 0;         // completed epochs
  double best_val_accuracy = -1.0;
  int best_epoch = 0;
};

template <class Real>
TrainerStateT<Real> init_trainer(const ModelConfig& mc,
                                 const TrainConfig& tc) {
  mc.validate();
  tc.validate();
  TrainerStateT<Real> tr;
  tr.params = init_params<Real>(mc, tc.seed);
  tr.opt = AdamWT<Real>(tr.params, tc);
  tr.ema = EmaT<Real>(tr.params);
  return tr;
}

struct FitOptions {
  long train_subset = 0;
  long val_subset = 0;
  bool augment = true;
  double mixup_alpha = 0.2;
  double cutmix_alpha = 1.0;
  double mixup_prob = 0.25;
  double cutmix_prob = 0.25;
  int eval_batch = 250;
  bool eval_with_ema = true;  // the reported accuracy uses EMA weights
};

struct FitReport {
  std::vector<MetricRecord> history;
  int epochs_run = 0;
  double best_val_accuracy = -1.0;
  int best_epoch = 0;
};

// Full training loop with per-epoch validation, best-checkpoint callback
// and patience-based early stopping. The lr schedule spans the whole
// max_epochs budget and advances once per batch, regardless of how many
// supervision segments the halting exit allowed.
template <class Real>
FitReport fit(TrainerStateT<Real>& tr, const TrainConfig& tc,
              const std::vector<ImageRecord>& train_records,
              const std::vector<ImageRecord>& val_records,
              const DataStats& stats, const FitOptions& opts,
              const std::function<void(const MetricRecord&)>& emit = {},
              const std::function<void(const TrainerStateT<Real>&)>&
                  save_best = {}) {
  tc.validate();
  const ModelConfig& mc = tr.params.config;
  FitReport report;

  long train_n = static_cast<long>(train_records.size());
  if (opts.train_subset > 0) train_n = std::min(train_n, opts.train_subset);
  const long batches_per_epoch = (train_n + tc.batch_size - 1) / tc.batch_size;
  const long total_steps = batches_per_epoch * tc.max_epochs;
  const long warmup_steps =
      std::lround(tc.warmup_fraction * static_cast<double>(total_steps));

  SupervisionContextT<Real> ctx;
  ctx.params = &tr.params;
  ctx.opt = &tr.opt;
  ctx.ema = &tr.ema;
  ctx.ema_decay = tc.ema_decay;
  ctx.micro_batch = tc.micro_batch;

  auto emit_record = [&](const MetricRecord& r) {
    report.history.push_back(r);
    if (emit) emit(r);
  };

  for (int epoch = tr.epoch + 1; epoch <= tc.max_epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    BatchOptions bo;
    bo.batch_size = tc.batch_size;
    bo.num_classes = mc.num_classes;
    bo.train_mode = true;
    bo.geometric = opts.augment;
    bo.mixup_prob = opts.augment ? opts.mixup_prob : 0.0;
    bo.cutmix_prob = opts.augment ? opts.cutmix_prob : 0.0;
    bo.mixup_alpha = opts.mixup_alpha;
    bo.cutmix_alpha = opts.cutmix_alpha;
    bo.seed = tc.seed;
    bo.epoch = epoch;
    bo.subset = opts.train_subset;
    BatchIter iter(train_records, stats, bo);

    MetricRecord train_rec;
    train_rec.epoch = epoch;
    train_rec.split = "train";
    double weight_sum = 0.0;
    long correct = 0, seen = 0;
    double last_lr = 0.0;
    LabeledBatch batch;
    while (iter.next(batch)) {
      last_lr = cosine_lr(tr.global_step, total_steps, warmup_steps,
                          tc.lr_max);
      auto loop = deep_supervision_loop(ctx, batch, mc.max_supervision_steps,
                                        mc.halt_threshold, last_lr);
      ++tr.global_step;
      const double w = batch.size;
      train_rec.loss_total += loop.last.loss_total * w;
      train_rec.loss_cls += loop.last.loss_cls * w;
      train_rec.loss_halt += loop.last.loss_halt * w;
      train_rec.mean_q += loop.last.mean_halt * w;
      train_rec.supervision_steps_used += loop.steps_used * w;
      correct += loop.last.correct;
      seen += batch.size;
      weight_sum += w;
    }
    if (weight_sum > 0) {
      train_rec.loss_total /= weight_sum;
      train_rec.loss_cls /= weight_sum;
      train_rec.loss_halt /= weight_sum;
      train_rec.mean_q /= weight_sum;
      train_rec.supervision_steps_used /= weight_sum;
      train_rec.accuracy = static_cast<double>(correct) / seen;
    }
    train_rec.lr = last_lr;
    train_rec.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
            .count();
    emit_record(train_rec);

    const auto t1 = std::chrono::steady_clock::now();
    EvalResultT<Real> ev;
    if (opts.eval_with_ema) {
      auto shadow_params = clone_params(tr.params);
      tr.ema.copy_to(shadow_params);
      ev = evaluate(val_records, stats, shadow_params, mc.recursion_steps,
                    mc.latent_steps, opts.eval_batch, opts.val_subset);
    } else {
      ev = evaluate(val_records, stats, tr.params, mc.recursion_steps,
                    mc.latent_steps, opts.eval_batch, opts.val_subset);
    }
    MetricRecord val_rec;
    val_rec.epoch = epoch;
    val_rec.split = "val";
    val_rec.loss_total = ev.loss_total;
    val_rec.loss_cls = ev.loss_cls;
    val_rec.loss_halt = ev.loss_halt;
    val_rec.accuracy = ev.accuracy;
    val_rec.lr = last_lr;
    val_rec.mean_q = ev.mean_halt;
    val_rec.supervision_steps_used = 0.0;
    val_rec.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t1)
            .count();
    emit_record(val_rec);

    tr.epoch = epoch;
    ++report.epochs_run;
    if (ev.accuracy > tr.best_val_accuracy) {
      tr.best_val_accuracy = ev.accuracy;
      tr.best_epoch = epoch;
      if (save_best) save_best(tr);
    }
    if (epoch - tr.best_epoch >= tc.patience) break;
  }

  report.best_val_accuracy = tr.best_val_accuracy;
  report.best_epoch = tr.best_epoch;
  return report;
}

}  // namespace vitrm
