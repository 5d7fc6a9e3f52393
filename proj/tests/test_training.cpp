#include <algorithm>
#include <cmath>

#include "bsbi/objectives.hpp"
#include "bsbi/training.hpp"
#include "doctest.h"
#include "support.hpp"

using namespace bsbi;

namespace {

ModelConfig small_model() {
  ModelConfig m;
  m.classifier_hidden = 16;
  m.classifier_layers = 3;
  m.flow_transforms = 2;
  m.flow_hidden = 16;
  m.flow_conditioner_layers = 2;
  return m;
}

TrainConfig quick(Algorithm alg, std::size_t epochs) {
  TrainConfig cfg;
  cfg.algorithm = alg;
  cfg.max_epochs = epochs;
  cfg.batch = 64;
  return cfg;
}

double median_of(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

double training_balance(const SurrogateDensity& s, const Split& train, std::uint64_t seed) {
  Rng rng(seed);
  const Tensor marginal = shuffle_rows(train.theta, rng);
  return balance_binary(classifier_from_density(s, train.theta, train.x),
                        classifier_from_density(s, marginal, train.x));
}

}  // namespace

TEST_CASE("algorithm names") {
  for (const Algorithm a : all_algorithms()) CHECK(parse_algorithm(algorithm_name(a)) == a);
  CHECK(parse_algorithm("bnre-c") == Algorithm::BNREC);
  CHECK(parse_algorithm("bnpe-init") == Algorithm::BNPEInit);
  CHECK_THROWS_AS(parse_algorithm("SNPE"), std::invalid_argument);
  CHECK(all_algorithms().size() == 8);
  CHECK(is_balanced(Algorithm::BNPEInit));
  CHECK_FALSE(is_balanced(Algorithm::RNPE));
  CHECK(is_flow_based(Algorithm::RNPE));
  CHECK_FALSE(is_flow_based(Algorithm::NREC));
}

TEST_CASE("training defaults") {
  const TrainConfig cfg;
  CHECK(cfg.lambda == 100.0);
  CHECK(cfg.gamma == 1.0);
  CHECK(cfg.K == 5);
  CHECK(cfg.lr == 1e-3);
  CHECK(cfg.batch == 256);
  CHECK(cfg.max_epochs == 500);
  CHECK(cfg.patience == 10);
  CHECK(cfg.lr_factor == 10.0);
}

TEST_CASE("training config validation") {
  TrainConfig cfg;
  cfg.algorithm = Algorithm::BNRE;
  cfg.lambda = 0.0;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg.algorithm = Algorithm::NRE;
  CHECK_NOTHROW(cfg.validate());
  CHECK(cfg.effective_lambda() == 0.0);
  cfg.lambda = -1.0;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = TrainConfig{};
  cfg.K = 0;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = TrainConfig{};
  cfg.gamma = 0.0;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = TrainConfig{};
  cfg.algorithm = Algorithm::BNPE;
  CHECK(cfg.effective_lambda() == 100.0);
}

TEST_CASE("training is deterministic") {
  const TaskDefinition task = two_moons_task();
  const Dataset data = generate_dataset(task, 256, 3, 100);
  for (const Algorithm alg : {Algorithm::BNRE, Algorithm::BNREC, Algorithm::BNPE}) {
    CAPTURE(algorithm_name(alg));
    const TrainConfig cfg = quick(alg, 3);
    const TrainResult a = train(cfg, small_model(), data, task, Rng(7));
    const TrainResult b = train(cfg, small_model(), data, task, Rng(7));
    CHECK(a.log.csv() == b.log.csv());
    CHECK(a.surrogate->log_unnorm(data.test.theta, data.test.x) ==
          b.surrogate->log_unnorm(data.test.theta, data.test.x));
    const TrainResult c = train(cfg, small_model(), data, task, Rng(8));
    CHECK(a.log.csv() != c.log.csv());
  }
}

TEST_CASE("training log and best checkpoint") {
  const TaskDefinition task = gaussian_linear_task();
  const Dataset data = generate_dataset(task, 512, 1, 100);
  TrainConfig cfg = quick(Algorithm::BNRE, 40);
  cfg.patience = 2;
  cfg.lr = 3e-3;
  const TrainResult r = train(cfg, small_model(), data, task, Rng(1));
  const auto& ep = r.log.epochs;
  REQUIRE(ep.size() == 40);

  const std::string csv = r.log.csv();
  CHECK(csv.rfind("epoch,train_loss,val_loss,balance_B,lr\n", 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 41);

  std::size_t argmin = 0;
  for (std::size_t i = 0; i < ep.size(); ++i) {
    CHECK(ep[i].epoch == i + 1);
    CHECK(ep[i].balance >= 0.0);
    if (ep[i].val_loss < ep[argmin].val_loss) argmin = i;
  }
  CHECK(r.log.best_epoch == argmin + 1);
  CHECK(r.log.best_val_loss == ep[argmin].val_loss);

  // Learning rate drops by the factor after more than `patience` epochs
  // without strict improvement, and never otherwise.
  double best = ep[0].val_loss;
  std::size_t bad = 0;
  double lr = cfg.lr;
  for (std::size_t i = 0; i < ep.size(); ++i) {
    CHECK(ep[i].lr == doctest::Approx(lr).epsilon(1e-15));
    if (i == 0 || ep[i].val_loss < best) {
      best = ep[i].val_loss;
      bad = 0;
    } else if (++bad > cfg.patience) {
      lr /= cfg.lr_factor;
      bad = 0;
    }
  }
}

TEST_CASE("training stops once the learning rate falls below the floor") {
  const TaskDefinition task = two_moons_task();
  const Dataset data = generate_dataset(task, 256, 2, 100);
  TrainConfig cfg = quick(Algorithm::NRE, 500);
  cfg.patience = 0;
  cfg.min_lr = 1e-5;
  const TrainResult r = train(cfg, small_model(), data, task, Rng(2));
  CHECK(r.log.epochs.size() < 500);
  CHECK(r.log.epochs.back().lr >= cfg.min_lr);
}

TEST_CASE("divergence reports epoch and batch") {
  const TaskDefinition task = two_moons_task();
  Dataset data = generate_dataset(task, 640, 4, 100);
  data.train.theta(17, 0) = 3.0;
  TrainConfig cfg = quick(Algorithm::NPE, 5);
  try {
    train(cfg, small_model(), data, task, Rng(4));
    FAIL("expected a divergence");
  } catch (const DivergenceError& err) {
    CHECK(err.epoch() == 1);
    CHECK(err.batch() < 9);
    CHECK(std::string(err.what()).find("epoch 1, batch " + std::to_string(err.batch())) != std::string::npos);
  }
}

TEST_CASE("splits too small for the contrastive batch are rejected") {
  const TaskDefinition task = two_moons_task();
  Dataset data = generate_dataset(task, 64, 4, 100);
  data.val.theta = Tensor::zeros(3, 2);
  data.val.x = Tensor::zeros(3, 2);
  CHECK_THROWS_AS(train(quick(Algorithm::NREC, 1), small_model(), data, task, Rng(0)), std::invalid_argument);
}

TEST_CASE("exact plug-in ratio beats a briefly trained classifier") {
  const TaskDefinition task = gaussian_linear_task();
  const Dataset data = generate_dataset(task, 4096, 5, 100);
  const TrainResult r = train(quick(Algorithm::NRE, 1), small_model(), data, task, Rng(5));

  Rng rng(55);
  const Split joint = sample_joint_split(task, 100000, rng);
  const Tensor marginal = shuffle_rows(joint.theta, rng);
  const AnalyticSurrogate exact(task);
  const double exact_loss =
      nre_loss(exact.log_ratio(joint.theta, joint.x), exact.log_ratio(marginal, joint.x));
  const double trained_loss =
      nre_loss(r.surrogate->log_ratio(joint.theta, joint.x), r.surrogate->log_ratio(marginal, joint.x));
  CHECK(exact_loss < trained_loss);
}

TEST_CASE("posterior estimation loss decreases early on") {
  const TaskDefinition task = two_moons_task();
  std::vector<double> drops;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const Dataset data = generate_dataset(task, 1024, seed, 100);
    const TrainResult r = train(quick(Algorithm::NPE, 10), small_model(), data, task, Rng(seed));
    drops.push_back(r.log.epochs.front().train_loss - r.log.epochs.back().train_loss);
  }
  CHECK(median_of(drops) > 0.0);
}

TEST_CASE("training balance does not increase with lambda") {
  const TaskDefinition task = two_moons_task();
  std::vector<double> b0, b1, b100;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const Dataset data = generate_dataset(task, 256, seed, 100);
    auto run = [&](Algorithm alg, double lambda) {
      TrainConfig cfg = quick(alg, 60);
      cfg.lambda = lambda;
      cfg.lr = 3e-3;
      const TrainResult r = train(cfg, small_model(), data, task, Rng(seed));
      return training_balance(*r.surrogate, data.train, 1000 + seed);
    };
    b0.push_back(run(Algorithm::NRE, 0.0));
    b1.push_back(run(Algorithm::BNRE, 1.0));
    b100.push_back(run(Algorithm::BNRE, 100.0));
  }
  MESSAGE("median B: " << median_of(b0) << " " << median_of(b1) << " " << median_of(b100));
  CHECK(median_of(b1) <= median_of(b0));
  CHECK(median_of(b100) <= median_of(b1));
}
