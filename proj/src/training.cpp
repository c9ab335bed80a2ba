#include "ratles/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <numeric>
#include <random>
#include <sstream>

#include "ratles/checkpoint.hpp"
#include "ratles/error.hpp"
#include "ratles/metrics.hpp"

namespace ratles {

void TrainConfig::validate() const {
  if (!(learning_rate > 0)) throw ConfigError("train config: learning_rate must be > 0");
  if (!(beta1 >= 0 && beta1 < 1)) throw ConfigError("train config: beta1 must be in [0,1)");
  if (!(beta2 >= 0 && beta2 < 1)) throw ConfigError("train config: beta2 must be in [0,1)");
  if (!(epsilon > 0)) throw ConfigError("train config: epsilon must be > 0");
  if (epochs < 1) throw ConfigError("train config: epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("train config: batch_size must be >= 1");
}

// ---- losses ------------------------------------------------------------------

namespace {

constexpr double kProbClamp = 1e-12;
constexpr double kDiceGuard = 1e-12;

void check_loss_inputs(const char* op, const Tensor& prob, const Tensor& target) {
  if (!prob.defined() || prob.rank() != 5 || prob.dim(1) != 2)
    throw ContractViolation(std::string(op) + ": probabilities must be rank-5 with 2 channels");
  if (!target.defined() || target.rank() != 5 || target.dim(1) != 1)
    throw ContractViolation(std::string(op) + ": target must be rank-5 with 1 channel");
  if (prob.dim(0) != target.dim(0) || prob.dim(2) != target.dim(2) ||
      prob.dim(3) != target.dim(3) || prob.dim(4) != target.dim(4))
    throw ContractViolation(std::string(op) + ": probability/target shape mismatch");
}

// Flat index of voxel v's lesion-channel entry for batch item n.
inline int64_t lesion_index(int64_t n, int64_t v, int64_t plane) {
  return (2 * n + 1) * plane + v;
}

}  // namespace

Tensor bce_loss(const Tensor& prob, const Tensor& target) {
  check_loss_inputs("bce_loss", prob, target);
  const int64_t batch = prob.dim(0);
  const int64_t plane = prob.dim(2) * prob.dim(3) * prob.dim(4);
  const int64_t count = batch * plane;
  const double* q = prob.values().data();
  const double* p = target.values().data();

  double acc = 0.0;
  for (int64_t n = 0; n < batch; ++n)
    for (int64_t v = 0; v < plane; ++v) {
      const double qc =
          std::clamp(q[lesion_index(n, v, plane)], kProbClamp, 1.0 - kProbClamp);
      const double pv = p[n * plane + v];
      acc += pv * std::log(qc) + (1.0 - pv) * std::log(1.0 - qc);
    }
  Tensor out = Tensor::scalar(-acc / static_cast<double>(count));

  if (autograd::grad_enabled() && prob.requires_grad()) {
    auto qi = prob.impl(), pi = target.impl(), oi = out.impl();
    autograd::record_node("bce_loss", oi, [qi, pi, oi, batch, plane, count] {
      if (oi->grad.empty()) return;
      const double go = oi->grad[0];
      std::vector<double> g(qi->data.size(), 0.0);
      for (int64_t n = 0; n < batch; ++n)
        for (int64_t v = 0; v < plane; ++v) {
          const int64_t i = lesion_index(n, v, plane);
          const double qv = qi->data[static_cast<size_t>(i)];
          if (qv <= kProbClamp || qv >= 1.0 - kProbClamp) continue;  // clamp is flat
          const double pv = pi->data[static_cast<size_t>(n * plane + v)];
          g[static_cast<size_t>(i)] =
              -go / static_cast<double>(count) * (pv / qv - (1.0 - pv) / (1.0 - qv));
        }
      autograd::accumulate_grad(qi, g);
    });
  }
  return out;
}

Tensor dice_loss(const Tensor& prob, const Tensor& target) {
  check_loss_inputs("dice_loss", prob, target);
  const int64_t batch = prob.dim(0);
  const int64_t plane = prob.dim(2) * prob.dim(3) * prob.dim(4);
  const double* q = prob.values().data();
  const double* p = target.values().data();

  double overlap = 0.0;  // sum p*q
  double denom = kDiceGuard;
  for (int64_t n = 0; n < batch; ++n)
    for (int64_t v = 0; v < plane; ++v) {
      const double qv = q[lesion_index(n, v, plane)];
      const double pv = p[n * plane + v];
      overlap += pv * qv;
      denom += pv * pv + qv * qv;
    }
  Tensor out = Tensor::scalar(1.0 - 2.0 * overlap / denom);

  if (autograd::grad_enabled() && prob.requires_grad()) {
    auto qi = prob.impl(), pi = target.impl(), oi = out.impl();
    autograd::record_node("dice_loss", oi, [qi, pi, oi, batch, plane, overlap, denom] {
      if (oi->grad.empty()) return;
      const double go = oi->grad[0];
      std::vector<double> g(qi->data.size(), 0.0);
      for (int64_t n = 0; n < batch; ++n)
        for (int64_t v = 0; v < plane; ++v) {
          const int64_t i = lesion_index(n, v, plane);
          const double qv = qi->data[static_cast<size_t>(i)];
          const double pv = pi->data[static_cast<size_t>(n * plane + v)];
          // d/dq of (1 - 2A/B) with A = sum pq, B = sum p^2 + q^2 + guard
          g[static_cast<size_t>(i)] =
              go * (-2.0 * pv * denom + 4.0 * overlap * qv) / (denom * denom);
        }
      autograd::accumulate_grad(qi, g);
    });
  }
  return out;
}

Tensor total_loss(const Tensor& prob, const Tensor& target) {
  return add(bce_loss(prob, target), dice_loss(prob, target));
}

// ---- Adam ---------------------------------------------------------------------

void adam_step(std::vector<NamedParam>& params, AdamState& state, const TrainConfig& cfg) {
  state.t += 1;
  const double bias1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
  const double bias2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));

  for (auto& p : params) {
    const size_t n = static_cast<size_t>(p.tensor.size());
    auto& m = state.m[p.name];
    auto& v = state.v[p.name];
    if (m.size() != n) m.assign(n, 0.0);
    if (v.size() != n) v.assign(n, 0.0);

    std::span<const double> g = p.tensor.grad();
    double* w = p.tensor.values().data();
    for (size_t i = 0; i < n; ++i) {
      const double gi = g.empty() ? 0.0 : g[i];
      if (!std::isfinite(gi))
        throw NumericalError("non-finite gradient in parameter '" + p.name + "'");
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
      const double mhat = m[i] / bias1;
      const double vhat = v[i] / bias2;
      w[i] -= cfg.learning_rate * mhat / (std::sqrt(vhat) + cfg.epsilon);
    }
  }
}

// ---- training loop --------------------------------------------------------------

namespace {

uint64_t mix_seed(uint64_t seed, uint64_t salt) {
  uint64_t z = seed + 0x9e3779b97f4a7c15ull * (salt + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

struct PreparedSample {
  Tensor image;   // normalized, padded, (1,1,D,H,W)
  Tensor target;  // padded, (1,1,D,H,W)
  PadRecord rec;
  const Mask* original_label = nullptr;
};

Tensor stack_batch(const std::vector<PreparedSample>& samples, const std::vector<size_t>& idx,
                   bool images) {
  if (idx.size() == 1) return images ? samples[idx[0]].image : samples[idx[0]].target;
  const Tensor& first = images ? samples[idx[0]].image : samples[idx[0]].target;
  std::vector<int64_t> shape = first.shape();
  shape[0] = static_cast<int64_t>(idx.size());
  Tensor out(shape);
  const int64_t item = first.size();
  for (size_t b = 0; b < idx.size(); ++b) {
    const Tensor& t = images ? samples[idx[b]].image : samples[idx[b]].target;
    if (t.shape() != first.shape())
      throw ContractViolation("train: batch members must share dimensions");
    std::copy_n(t.values().data(), item, out.values().data() + static_cast<int64_t>(b) * item);
  }
  return out;
}

}  // namespace

TrainResult train(Model& model, const std::vector<TrainSample>& train_set,
                  const std::vector<TrainSample>& val_set, const TrainConfig& cfg,
                  const TrainState* resume, const EpochCallback& on_epoch) {
  cfg.validate();
  if (train_set.empty()) throw ContractViolation("train: training set is empty");

  const int64_t mult = int64_t{1} << model.config().levels;
  auto prepare = [&](const TrainSample& s) {
    if (s.image.dims != s.label.dims)
      throw DataError("train: image/label dims differ for sample '" + s.id + "'");
    for (double v : s.image.data)
      if (!std::isfinite(v))
        throw NumericalError("non-finite intensity in sample '" + s.id + "'");
    PreparedSample p;
    p.rec = make_pad_record(s.image.dims, mult);
    p.image = to_tensor(pad(normalize(s.image), p.rec));
    p.target = to_tensor(pad(s.label, p.rec));
    p.original_label = &s.label;
    return p;
  };
  std::vector<PreparedSample> train_prepared;
  for (const auto& s : train_set) train_prepared.push_back(prepare(s));
  std::vector<PreparedSample> val_prepared;
  for (const auto& s : val_set) val_prepared.push_back(prepare(s));

  TrainState state = resume ? *resume : TrainState{};
  if (state.epochs_done >= cfg.epochs)
    throw ConfigError("train: checkpoint already has " + std::to_string(state.epochs_done) +
                      " epochs, nothing to do");
  auto params = model.parameters();

  TrainResult result;
  for (int64_t epoch = state.epochs_done + 1; epoch <= cfg.epochs; ++epoch) {
    model.set_training(true);
    std::vector<size_t> order(train_prepared.size());
    std::iota(order.begin(), order.end(), size_t{0});
    std::mt19937_64 rng(mix_seed(cfg.seed, static_cast<uint64_t>(epoch)));
    std::shuffle(order.begin(), order.end(), rng);

    double loss_sum = 0.0;
    int64_t steps = 0;
    for (size_t pos = 0; pos < order.size(); pos += static_cast<size_t>(cfg.batch_size)) {
      std::vector<size_t> chunk(order.begin() + static_cast<int64_t>(pos),
                                order.begin() +
                                    static_cast<int64_t>(std::min(
                                        pos + static_cast<size_t>(cfg.batch_size), order.size())));
      Tensor x = stack_batch(train_prepared, chunk, true);
      Tensor t = stack_batch(train_prepared, chunk, false);

      model.zero_grad();
      Tensor prob = model.forward(x);
      Tensor loss = total_loss(prob, t);
      const double loss_value = loss.item();
      if (!std::isfinite(loss_value)) {
        autograd::reset_tape();
        throw NumericalError("non-finite training loss at epoch " + std::to_string(epoch));
      }
      backward(loss);
      try {
        adam_step(params, state.adam, cfg);
      } catch (const NumericalError& e) {
        throw NumericalError(std::string(e.what()) + " at epoch " + std::to_string(epoch));
      }
      loss_sum += loss_value;
      ++steps;
    }

    EpochMetrics em;
    em.epoch = epoch;
    em.train_loss = loss_sum / static_cast<double>(steps);

    if (!val_prepared.empty()) {
      model.set_training(false);
      autograd::NoGradGuard ng;
      double vloss = 0.0;
      double vdice = 0.0;
      for (const auto& s : val_prepared) {
        Tensor prob = model.forward(s.image);
        vloss += total_loss(prob, s.target).item();
        Mask pred = crop(argmax_mask(prob, s.original_label->spacing), s.rec);
        vdice += dice(pred, *s.original_label);
      }
      em.val_loss = vloss / static_cast<double>(val_prepared.size());
      em.val_dice = vdice / static_cast<double>(val_prepared.size());
      if (!std::isfinite(*em.val_loss))
        throw NumericalError("non-finite validation loss at epoch " + std::to_string(epoch));
    }
    result.history.push_back(em);
    if (on_epoch) on_epoch(em);

    state.epochs_done = epoch;
    bool is_best = false;
    if (em.val_loss.has_value()) {
      if (*em.val_loss < state.best_val_loss) {
        state.best_val_loss = *em.val_loss;
        is_best = true;
      }
    }
    result.last_checkpoint = checkpoint_bytes(model, &state);
    if (is_best || result.best_checkpoint.empty())
      result.best_checkpoint = result.last_checkpoint;
    result.final_train_loss = em.train_loss;
  }
  if (val_prepared.empty()) result.best_checkpoint = result.last_checkpoint;
  return result;
}

std::string metrics_csv(const std::vector<EpochMetrics>& history) {
  std::ostringstream os;
  os << "epoch,train_loss,val_loss,val_dice\n";
  char buf[64];
  auto fmt = [&buf](double v) {
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return std::string(buf);
  };
  for (const auto& em : history) {
    os << em.epoch << "," << fmt(em.train_loss) << ",";
    if (em.val_loss) os << fmt(*em.val_loss);
    os << ",";
    if (em.val_dice) os << fmt(*em.val_dice);
    os << "\n";
  }
  return os.str();
}

Mask majority_vote(const std::vector<Mask>& masks) {
  if (masks.size() != 3) throw ContractViolation("majority_vote: exactly 3 masks required");
  const Mask& a = masks[0];
  for (const Mask& m : masks) {
    if (m.dims != a.dims || m.spacing != a.spacing)
      throw ContractViolation("majority_vote: masks must share dims and spacing");
  }
  Mask out = a;
  for (size_t i = 0; i < out.data.size(); ++i) {
    const int votes = masks[0].data[i] + masks[1].data[i] + masks[2].data[i];
    out.data[i] = votes >= 2 ? 1 : 0;
  }
  return out;
}

}  // namespace ratles
