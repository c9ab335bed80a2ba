#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>
#include <sstream>

#include "gradcheck_util.hpp"
#include "ratles/checkpoint.hpp"
#include "ratles/error.hpp"
#include "ratles/metrics.hpp"
#include "ratles/phantom.hpp"
#include "ratles/training.hpp"

using namespace ratles;

namespace {

Tensor prob_of(std::vector<int64_t> spatial, const std::vector<double>& lesion_q) {
  const int64_t plane = spatial[0] * spatial[1] * spatial[2];
  REQUIRE(static_cast<int64_t>(lesion_q.size()) == plane);
  Tensor t({1, 2, spatial[0], spatial[1], spatial[2]});
  for (int64_t i = 0; i < plane; ++i) {
    t.values()[i] = 1.0 - lesion_q[static_cast<size_t>(i)];
    t.values()[plane + i] = lesion_q[static_cast<size_t>(i)];
  }
  return t;
}

Tensor target_of(std::vector<int64_t> spatial, const std::vector<double>& p) {
  return Tensor({1, 1, spatial[0], spatial[1], spatial[2]}, p);
}

std::vector<TrainSample> tiny_cohort(int64_t n, uint64_t seed) {
  PhantomSpec spec;
  spec.dims = {8, 8, 8};
  std::vector<TrainSample> out;
  for (const auto& item : generate_cohort(n, spec, seed))
    out.push_back({item.id, item.image, item.label});
  return out;
}

ModelConfig narrow_config() {
  ModelConfig cfg;
  cfg.levels = 2;
  cfg.encoder_width = 4;
  cfg.decoder_width = 8;
  return cfg;
}

}  // namespace

TEST_CASE("bce_loss: closed forms") {
  CHECK(bce_loss(prob_of({1, 1, 1}, {0.5}), target_of({1, 1, 1}, {1.0})).item() ==
        doctest::Approx(std::log(2.0)).epsilon(1e-12));
  CHECK(bce_loss(prob_of({1, 1, 1}, {0.25}), target_of({1, 1, 1}, {1.0})).item() ==
        doctest::Approx(std::log(4.0)).epsilon(1e-12));

  // q == p exactly: the clamp keeps the loss at the rounding floor
  Tensor q = prob_of({1, 1, 2}, {0.0, 1.0});
  Tensor p = target_of({1, 1, 2}, {0.0, 1.0});
  CHECK(bce_loss(q, p).item() <= 1e-11);
  CHECK(bce_loss(q, p).item() >= 0.0);
}

TEST_CASE("dice_loss: closed forms") {
  // binary q == p, nonzero -> 0
  Tensor q = prob_of({1, 2, 2}, {0, 1, 0, 1});
  Tensor p = target_of({1, 2, 2}, {0, 1, 0, 1});
  CHECK(dice_loss(q, p).item() == doctest::Approx(0.0).epsilon(1e-9));

  // q = 0.5 everywhere, p half-ones -> 1/3
  Tensor qh = prob_of({1, 2, 2}, {0.5, 0.5, 0.5, 0.5});
  Tensor ph = target_of({1, 2, 2}, {1, 1, 0, 0});
  CHECK(dice_loss(qh, ph).item() == doctest::Approx(1.0 / 3.0).epsilon(1e-12));

  // q = 0, p nonzero -> 1 under the denominator guard
  Tensor q0 = prob_of({1, 2, 2}, {0, 0, 0, 0});
  CHECK(dice_loss(q0, ph).item() == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("losses: range invariants on random inputs") {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> uq(0.0, 1.0);
  std::bernoulli_distribution bit(0.3);
  for (int t = 0; t < 100; ++t) {
    std::vector<double> qv(27), pv(27);
    for (auto& v : qv) v = uq(rng);
    for (auto& v : pv) v = bit(rng) ? 1.0 : 0.0;
    Tensor q = prob_of({3, 3, 3}, qv);
    Tensor p = target_of({3, 3, 3}, pv);
    const double d = dice_loss(q, p).item();
    CHECK(d >= 0.0);
    CHECK(d <= 1.0);
    CHECK(bce_loss(q, p).item() >= 0.0);
  }
}

TEST_CASE("total_loss: additivity and gradient decomposition") {
  std::mt19937_64 rng(6);
  std::uniform_real_distribution<double> uq(0.01, 0.99);
  std::vector<double> qv(8), pv{1, 0, 0, 1, 0, 1, 0, 0};
  for (auto& v : qv) v = uq(rng);

  Tensor q = prob_of({2, 2, 2}, qv);
  Tensor p = target_of({2, 2, 2}, pv);
  const double total = total_loss(q, p).item();
  CHECK(std::fabs(total - (bce_loss(q, p).item() + dice_loss(q, p).item())) < 1e-15);

  // d(total)/dq matches finite differences at interior points
  for (int t = 0; t < 50; ++t) {
    for (auto& v : qv) v = uq(rng);
    Tensor qt = prob_of({2, 2, 2}, qv);
    qt.set_requires_grad(true);
    backward(total_loss(qt, p));
    auto forward = [&] { return total_loss(qt, p).item(); };
    // lesion channel entries occupy the second half of the tensor
    std::vector<int64_t> lesion_entries;
    for (int64_t i = 8; i < 16; ++i) lesion_entries.push_back(i);
    CHECK(gradcheck::max_rel_err(qt, lesion_entries, forward) < gradcheck::kRelTol);
  }

  // and the total gradient is the sum of the component gradients
  Tensor qa = prob_of({2, 2, 2}, qv);
  Tensor qb = prob_of({2, 2, 2}, qv);
  Tensor qc = prob_of({2, 2, 2}, qv);
  qa.set_requires_grad(true);
  qb.set_requires_grad(true);
  qc.set_requires_grad(true);
  backward(total_loss(qa, p));
  backward(bce_loss(qb, p));
  backward(dice_loss(qc, p));
  for (int64_t i = 0; i < 16; ++i)
    CHECK(qa.grad()[i] == doctest::Approx(qb.grad()[i] + qc.grad()[i]).epsilon(1e-12));
}

TEST_CASE("loss shape contracts") {
  Tensor q = prob_of({2, 2, 2}, std::vector<double>(8, 0.5));
  CHECK_THROWS_AS(bce_loss(q, target_of({2, 2, 1}, {1, 0, 0, 1})), ContractViolation);
  CHECK_THROWS_AS(dice_loss(q, Tensor({1, 2, 2, 2, 2})), ContractViolation);
}

TEST_CASE("adam_step: first step moves by about the learning rate against the sign") {
  TrainConfig cfg;
  cfg.learning_rate = 1e-3;
  for (double g : {5.0, -2.0, 1e4, 0.5}) {
    Tensor w = Tensor::scalar(1.0);
    w.set_requires_grad(true);
    w.impl()->grad = {g};
    std::vector<NamedParam> params{{"w", w}};
    AdamState state;
    adam_step(params, state, cfg);
    const double delta = w.values()[0] - 1.0;
    CHECK(std::fabs(delta + cfg.learning_rate * (g > 0 ? 1.0 : -1.0)) < 1e-9);
    CHECK(state.t == 1);
  }
}

TEST_CASE("adam_step: zero gradient means zero update; update magnitude stays bounded") {
  TrainConfig cfg;
  cfg.learning_rate = 1e-3;
  Tensor w = Tensor::scalar(2.0);
  w.set_requires_grad(true);
  w.impl()->grad = {0.0};
  std::vector<NamedParam> params{{"w", w}};
  AdamState state;
  adam_step(params, state, cfg);
  CHECK(w.values()[0] == 2.0);

  // gradient-scale invariance in the large-|g| limit, across many steps
  for (double scale : {1e-6, 1e-2, 1.0, 1e3, 1e8}) {
    Tensor u = Tensor::scalar(0.0);
    u.set_requires_grad(true);
    std::vector<NamedParam> ps{{"u", u}};
    AdamState s;
    std::mt19937_64 rng(9);
    std::normal_distribution<double> dist(0.0, scale);
    double prev = 0.0;
    for (int step = 0; step < 25; ++step) {
      u.impl()->grad = {dist(rng)};
      adam_step(ps, s, cfg);
      const double delta = std::fabs(u.values()[0] - prev);
      prev = u.values()[0];
      CHECK(delta <= cfg.learning_rate * (1.0 + 1e-6) * (0.1 / std::sqrt(1.0 - cfg.beta2)));
    }
  }
}

TEST_CASE("adam_step: non-finite gradients abort with the parameter name") {
  TrainConfig cfg;
  Tensor w = Tensor::scalar(1.0);
  w.set_requires_grad(true);
  w.impl()->grad = {std::numeric_limits<double>::quiet_NaN()};
  std::vector<NamedParam> params{{"enc1.conv1.weight", w}};
  AdamState state;
  try {
    adam_step(params, state, cfg);
    FAIL("expected NumericalError");
  } catch (const NumericalError& e) {
    CHECK(std::string(e.what()).find("enc1.conv1.weight") != std::string::npos);
  }
}

TEST_CASE("train: two runs with the same seed give identical trajectories") {
  auto run = [&] {
    Model m = Model::build(narrow_config(), 4);
    TrainConfig cfg;
    cfg.epochs = 3;
    cfg.seed = 21;
    auto samples = tiny_cohort(2, 8);
    return train(m, samples, samples, cfg);
  };
  TrainResult a = run();
  TrainResult b = run();
  CHECK(a.last_checkpoint == b.last_checkpoint);
  CHECK(metrics_csv(a.history) == metrics_csv(b.history));
}

TEST_CASE("train: validation runs in eval mode (differs from train-mode loss)") {
  Model m = Model::build(narrow_config(), 5);
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.seed = 3;
  auto samples = tiny_cohort(1, 9);
  TrainResult r = train(m, samples, samples, cfg);
  REQUIRE(r.history.size() == 2);
  REQUIRE(r.history[1].val_loss.has_value());
  // same sample, but train-mode batch stats vs eval-mode running stats
  CHECK(*r.history[1].val_loss != r.history[1].train_loss);
  CHECK(r.history[0].val_dice.has_value());
}

TEST_CASE("train: resuming from a checkpoint reproduces the trajectory bit-exactly") {
  auto samples = tiny_cohort(2, 10);
  TrainConfig cfg;
  cfg.epochs = 6;
  cfg.seed = 77;

  Model straight = Model::build(narrow_config(), 6);
  TrainResult full = train(straight, samples, samples, cfg);

  TrainConfig half = cfg;
  half.epochs = 3;
  Model first = Model::build(narrow_config(), 6);
  TrainResult part1 = train(first, samples, samples, half);

  std::istringstream is(part1.last_checkpoint);
  TrainState state;
  Model second = load_checkpoint(is, &state);
  CHECK(state.epochs_done == 3);
  TrainResult part2 = train(second, samples, samples, cfg, &state);

  CHECK(part2.last_checkpoint == full.last_checkpoint);
  REQUIRE(part2.history.size() == 3);
  CHECK(part2.history.back().train_loss == full.history.back().train_loss);
}

TEST_CASE("train: empty training set is rejected; non-finite data aborts with context") {
  Model m = Model::build(narrow_config(), 7);
  TrainConfig cfg;
  CHECK_THROWS_AS(train(m, {}, {}, cfg), ContractViolation);

  auto samples = tiny_cohort(1, 11);
  samples[0].image.data[17] = std::numeric_limits<double>::quiet_NaN();
  try {
    train(m, samples, {}, cfg);
    FAIL("expected NumericalError");
  } catch (const NumericalError& e) {
    CHECK(std::string(e.what()).find("0001") != std::string::npos);
  }
}

TEST_CASE("metrics_csv: header and blank validation fields") {
  std::vector<EpochMetrics> history(2);
  history[0].epoch = 1;
  history[0].train_loss = 1.5;
  history[1].epoch = 2;
  history[1].train_loss = 1.25;
  history[1].val_loss = 0.5;
  history[1].val_dice = 0.75;
  const std::string csv = metrics_csv(history);
  CHECK(csv == "epoch,train_loss,val_loss,val_dice\n1,1.5,,\n2,1.25,0.5,0.75\n");
}

TEST_CASE("majority_vote: definition, idempotence, permutation invariance") {
  Mask a, b, c;
  a.dims = b.dims = c.dims = {1, 1, 2};
  a.spacing = b.spacing = c.spacing = {1, 1, 1};
  a.data = {1, 1};
  b.data = {1, 0};
  c.data = {0, 0};
  // votes per voxel: (1,1,0) -> 1 and (1,0,0) -> 0
  Mask v = majority_vote({a, b, c});
  CHECK(v.data == std::vector<uint8_t>{1, 0});

  Mask vp = majority_vote({c, a, b});
  CHECK(vp.data == v.data);

  CHECK(majority_vote({a, a, a}).data == a.data);
  CHECK(majority_vote({a, a, c}).data == a.data);  // majority_vote(m, m, anything) = m

  CHECK_THROWS_AS(majority_vote({a, b}), ContractViolation);
  Mask wrong = a;
  wrong.dims = {2, 1, 1};
  CHECK_THROWS_AS(majority_vote({a, b, wrong}), ContractViolation);
}

TEST_CASE("checkpoint: round trip is bit-exact") {
  Model m = Model::build(narrow_config(), 12);
  TrainState state;
  state.adam.t = 5;
  state.epochs_done = 2;
  state.best_val_loss = 0.25;
  for (auto& p : m.parameters()) {
    state.adam.m[p.name].assign(static_cast<size_t>(p.tensor.size()), 0.125);
    state.adam.v[p.name].assign(static_cast<size_t>(p.tensor.size()), 0.5);
  }
  const std::string bytes = checkpoint_bytes(m, &state);

  std::istringstream is(bytes);
  TrainState back;
  Model loaded = load_checkpoint(is, &back);
  CHECK(back.adam.t == 5);
  CHECK(back.epochs_done == 2);
  CHECK(back.best_val_loss == 0.25);
  CHECK(checkpoint_bytes(loaded, &back) == bytes);

  std::istringstream garbage("not a checkpoint");
  CHECK_THROWS_AS(load_checkpoint(garbage), DataError);
}
