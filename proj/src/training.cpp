#include "bsbi/training.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

namespace bsbi {

namespace {

constexpr std::uint64_t kValidationKey = 0x76616c;

struct AlgorithmInfo {
  Algorithm algorithm;
  const char* name;
};

constexpr AlgorithmInfo kAlgorithms[] = {
    {Algorithm::NRE, "NRE"},   {Algorithm::BNRE, "BNRE"},         {Algorithm::NREC, "NRE-C"},
    {Algorithm::BNREC, "BNRE-C"}, {Algorithm::NPE, "NPE"},         {Algorithm::BNPE, "BNPE"},
    {Algorithm::BNPEInit, "BNPE-Init"}, {Algorithm::RNPE, "RNPE"},
};

std::string upper(std::string s) {
  for (char& c : s) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  return s;
}

Tensor gather_rows(const Tensor& t, std::span<const std::size_t> rows) {
  Tensor out = Tensor::zeros(rows.size(), t.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto src = t.row(rows[i]);
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  return out;
}

Tensor prior_column(const PriorSpec& prior, const Tensor& theta) {
  Tensor out = Tensor::zeros(theta.rows(), 1);
  for (std::size_t i = 0; i < theta.rows(); ++i) {
    out[i] = prior.log_density(theta.row(i));
    if (!std::isfinite(out[i])) throw DomainError("training theta outside the prior support");
  }
  return out;
}

std::vector<std::size_t> random_permutation(std::size_t n, Rng& rng) {
  std::vector<std::size_t> p(n);
  std::iota(p.begin(), p.end(), 0);
  std::shuffle(p.begin(), p.end(), rng);
  return p;
}

std::size_t min_batch(const TrainConfig& cfg) {
  return is_contrastive(cfg.algorithm) ? std::max<std::size_t>(2, cfg.K + 1) : 2;
}

/// Batch boundaries over n rows: full batches of `size`, with a short tail
/// kept only if it can form a valid batch.
std::vector<std::pair<std::size_t, std::size_t>> batch_ranges(std::size_t n, std::size_t size, std::size_t min_size) {
  std::vector<std::pair<std::size_t, std::size_t>> out;
  for (std::size_t begin = 0; begin < n; begin += size) {
    const std::size_t end = std::min(n, begin + size);
    if (end - begin >= min_size) out.emplace_back(begin, end);
  }
  return out;
}

std::vector<Tensor> snapshot(const std::vector<Parameter*>& params) {
  std::vector<Tensor> out;
  out.reserve(params.size());
  for (const Parameter* p : params) out.push_back(p->value);
  return out;
}

}  // namespace

std::string algorithm_name(Algorithm a) {
  for (const auto& info : kAlgorithms) {
    if (info.algorithm == a) return info.name;
  }
  throw std::invalid_argument("unknown algorithm");
}

Algorithm parse_algorithm(const std::string& name) {
  for (const auto& info : kAlgorithms) {
    if (upper(info.name) == upper(name)) return info.algorithm;
  }
  throw std::invalid_argument("unknown algorithm '" + name + "'");
}

std::vector<Algorithm> all_algorithms() {
  std::vector<Algorithm> out;
  for (const auto& info : kAlgorithms) out.push_back(info.algorithm);
  return out;
}

bool is_balanced(Algorithm a) {
  return a == Algorithm::BNRE || a == Algorithm::BNREC || a == Algorithm::BNPE || a == Algorithm::BNPEInit;
}

bool is_flow_based(Algorithm a) {
  return a == Algorithm::NPE || a == Algorithm::BNPE || a == Algorithm::BNPEInit || a == Algorithm::RNPE;
}

bool is_contrastive(Algorithm a) { return a == Algorithm::NREC || a == Algorithm::BNREC; }

void TrainConfig::validate() const {
  if (!(lambda >= 0.0)) throw std::invalid_argument("lambda must be non-negative");
  if (is_balanced(algorithm) && !(lambda > 0.0)) {
    throw std::invalid_argument("balanced algorithm " + algorithm_name(algorithm) + " requires lambda > 0");
  }
  if (!(gamma > 0.0)) throw std::invalid_argument("gamma must be positive");
  if (K < 1) throw std::invalid_argument("K must be at least 1");
  if (!(lr > 0.0)) throw std::invalid_argument("lr must be positive");
  if (batch < 2) throw std::invalid_argument("batch must be at least 2");
  if (max_epochs < 1) throw std::invalid_argument("max_epochs must be at least 1");
  if (!(lr_factor > 1.0)) throw std::invalid_argument("lr_factor must exceed 1");
  if (!(min_lr >= 0.0)) throw std::invalid_argument("min_lr must be non-negative");
}

std::string TrainLog::csv() const {
  std::ostringstream os;
  os.precision(12);
  os << "epoch,train_loss,val_loss,balance_B,lr\n";
  for (const auto& e : epochs) {
    os << e.epoch << ',' << e.train_loss << ',' << e.val_loss << ',' << e.balance << ',' << e.lr << '\n';
  }
  return os.str();
}

DivergenceError::DivergenceError(std::size_t epoch, std::size_t batch, const std::string& what)
    : NumericError("training diverged at epoch " + std::to_string(epoch) + ", batch " + std::to_string(batch) +
                   ": " + what),
      epoch_(epoch),
      batch_(batch) {}

std::unique_ptr<SurrogateDensity> make_surrogate(Algorithm algorithm, const TaskDefinition& task,
                                                 const ModelConfig& model, const Split& train, Rng& rng) {
  if (is_flow_based(algorithm)) {
    FlowConfig fc;
    fc.theta_dim = task.theta_dim;
    fc.x_dim = task.x_dim;
    fc.transforms = model.flow_transforms;
    fc.hidden = model.flow_hidden;
    fc.conditioner_layers = model.flow_conditioner_layers;
    fc.spline = model.spline;
    std::optional<Box> box;
    if (task.prior.is_box()) box = task.prior.box();
    ConditionalFlow flow(fc, box);
    flow.init(algorithm == Algorithm::BNPEInit ? FlowInit::ScaledBy5 : FlowInit::Standard, rng);
    flow.context_normalizer() = Standardizer::fit(train.x);
    return std::make_unique<FlowSurrogate>(std::move(flow), task.prior);
  }
  ClassifierHead head(task.theta_dim, task.x_dim, model.classifier_hidden, model.classifier_layers);
  head.mlp.init_fan_in(rng);
  head.theta_norm = Standardizer::fit(train.theta);
  head.x_norm = Standardizer::fit(train.x);
  return std::make_unique<RatioSurrogate>(std::move(head), task.prior);
}

std::vector<Parameter*> trainable_parameters(SurrogateDensity& surrogate) {
  if (auto* r = dynamic_cast<RatioSurrogate*>(&surrogate)) return r->head().mlp.parameters();
  if (auto* f = dynamic_cast<FlowSurrogate*>(&surrogate)) return f->flow().parameters();
  throw std::invalid_argument("surrogate has no trainable parameters");
}

BatchObjective batch_objective(const TrainConfig& cfg, const SurrogateDensity& surrogate, const TaskDefinition& task,
                               Tape& tape, const std::vector<Var>& bound, const Tensor& theta, const Tensor& x,
                               const std::vector<std::size_t>& perm) {
  const std::size_t n = theta.rows();
  if (perm.size() != n) throw ShapeError("batch permutation does not match batch size");
  const Tensor theta_marg = gather_rows(theta, perm);
  const double lambda = cfg.effective_lambda();
  BatchObjective out;

  if (const auto* r = dynamic_cast<const RatioSurrogate*>(&surrogate)) {
    const ClassifierHead& head = r->head();
    if (!is_contrastive(cfg.algorithm)) {
      Var fj = head.logits(tape, theta, x, bound);
      Var fm = head.logits(tape, theta_marg, x, bound);
      out.balance = balance_binary(fj, fm);
      out.loss = regularized_loss(nre_loss(fj, fm), out.balance, lambda);
      return out;
    }
    const std::size_t k = cfg.K;
    if (n < k + 1) {
      throw std::invalid_argument("contrastive batch of " + std::to_string(n) + " is smaller than K + 1 = " +
                                  std::to_string(k + 1));
    }
    // Row i is paired with theta[perm[(i + c) mod n]] for c = 0..K-1.
    Tensor theta_c = Tensor::zeros(n * k, theta.cols());
    Tensor x_c = Tensor::zeros(n * k, x.cols());
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t c = 0; c < k; ++c) {
        const auto t = theta.row(perm[(i + c) % n]);
        std::copy(t.begin(), t.end(), theta_c.row(i * k + c).begin());
        std::copy(x.row(i).begin(), x.row(i).end(), x_c.row(i * k + c).begin());
      }
    }
    Var hc = reshape(head.logits(tape, theta_c, x_c, bound), n, k);
    Var hj = head.logits(tape, theta, x, bound);
    Var h_yK = k == 1 ? hj : concat_cols({select_cols(hc, [&] {
                                            std::vector<std::size_t> cols(k - 1);
                                            std::iota(cols.begin(), cols.end(), 0);
                                            return cols;
                                          }()),
                                          hj});
    out.balance = balance_binary(hj, select_cols(hc, {0}));
    out.loss = regularized_loss(nre_c_loss(hc, h_yK, cfg.gamma), out.balance, lambda);
    return out;
  }

  const auto* f = dynamic_cast<const FlowSurrogate*>(&surrogate);
  if (!f) throw std::invalid_argument("surrogate cannot be trained");
  const ConditionalFlow& flow = f->flow();
  Var log_q = flow.log_prob(tape, theta, x, bound);
  Var lp = tape.constant(prior_column(task.prior, theta));
  if (cfg.algorithm == Algorithm::NPE) {
    // No marginal pass: the balance column of the log is filled from
    // validation.
    out.loss = npe_loss(log_q);
    return out;
  }
  Var log_q_m = flow.log_prob(tape, theta_marg, x, bound);
  Var lp_m = tape.constant(prior_column(task.prior, theta_marg));
  Var fj = log_q - lp;
  Var fm = log_q_m - lp_m;
  out.balance = balance_binary(fj, fm);
  if (cfg.algorithm == Algorithm::RNPE) {
    out.loss = nre_loss(fj, fm);
  } else {
    out.loss = regularized_loss(npe_loss(log_q), out.balance, lambda);
  }
  return out;
}

TrainResult train(const TrainConfig& cfg, const ModelConfig& model, const Dataset& data, const TaskDefinition& task,
                  const Rng& rng) {
  cfg.validate();
  const std::size_t n_train = data.train.size();
  const std::size_t n_val = data.val.size();
  const std::size_t min_size = min_batch(cfg);
  if (n_train < min_size || n_val < min_size) {
    throw std::invalid_argument("dataset splits too small for " + algorithm_name(cfg.algorithm));
  }
  Rng init_rng = rng.split(Stream::Init);
  Rng shuffle_rng = rng.split(Stream::Shuffle);

  TrainResult result;
  result.surrogate = make_surrogate(cfg.algorithm, task, model, data.train, init_rng);
  const std::vector<Parameter*> params = trainable_parameters(*result.surrogate);
  AdamState adam = make_adam(params, cfg.lr);

  const std::size_t batch = std::min(cfg.batch, n_train);
  const auto train_ranges = batch_ranges(n_train, batch, min_size);
  // Validation batches and their marginal permutations are fixed for the run
  // so val losses are comparable across epochs.
  auto val_ranges = batch_ranges(n_val, std::min(cfg.batch, n_val), 1);
  if (val_ranges.size() > 1 && val_ranges.back().second - val_ranges.back().first < min_size) {
    val_ranges[val_ranges.size() - 2].second = val_ranges.back().second;
    val_ranges.pop_back();
  }
  std::vector<std::vector<std::size_t>> val_perms;
  Rng val_rng = rng.split(Stream::Shuffle).split(kValidationKey);
  for (const auto& [b, e] : val_ranges) val_perms.push_back(random_permutation(e - b, val_rng));

  Tape tape;
  std::vector<Tensor> best = snapshot(params);
  double best_val = std::numeric_limits<double>::infinity();
  std::size_t bad_epochs = 0;

  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    const std::vector<std::size_t> order = random_permutation(n_train, shuffle_rng);
    double train_sum = 0.0;
    std::size_t train_count = 0;
    for (std::size_t bi = 0; bi < train_ranges.size(); ++bi) {
      const auto [b, e] = train_ranges[bi];
      const std::span<const std::size_t> rows(order.data() + b, e - b);
      const Tensor theta = gather_rows(data.train.theta, rows);
      const Tensor x = gather_rows(data.train.x, rows);
      const std::vector<std::size_t> perm = random_permutation(e - b, shuffle_rng);
      std::vector<Tensor> grads;
      double loss = 0.0;
      try {
        tape.clear();
        const std::vector<Var> bound = bind(tape, params);
        const BatchObjective obj = batch_objective(cfg, *result.surrogate, task, tape, bound, theta, x, perm);
        loss = obj.loss.value().item();
        if (!std::isfinite(loss)) throw NumericError("non-finite loss");
        tape.backward(obj.loss);
        grads.reserve(bound.size());
        for (const Var& v : bound) {
          grads.push_back(tape.grad(v));
          if (!grads.back().all_finite()) throw NumericError("non-finite gradient");
        }
      } catch (const NumericError& err) {
        throw DivergenceError(epoch, bi, err.what());
      } catch (const DomainError& err) {
        throw DivergenceError(epoch, bi, err.what());
      }
      adam_step(params, grads, adam);
      train_sum += loss * static_cast<double>(e - b);
      train_count += e - b;
    }

    double val_sum = 0.0;
    double balance_sum = 0.0;
    for (std::size_t vi = 0; vi < val_ranges.size(); ++vi) {
      const auto [b, e] = val_ranges[vi];
      std::vector<std::size_t> rows(e - b);
      std::iota(rows.begin(), rows.end(), b);
      const Tensor theta = gather_rows(data.val.theta, rows);
      const Tensor x = gather_rows(data.val.x, rows);
      tape.clear();
      const std::vector<Var> bound = bind(tape, params);
      TrainConfig eval_cfg = cfg;
      BatchObjective obj;
      try {
        obj = batch_objective(eval_cfg, *result.surrogate, task, tape, bound, theta, x, val_perms[vi]);
      } catch (const NumericError& err) {
        throw DivergenceError(epoch, vi, std::string("validation: ") + err.what());
      }
      double bal = 0.0;
      if (obj.balance.valid()) {
        bal = obj.balance.value().item();
      } else {
        // NPE skips the marginal pass during training; evaluate it here.
        eval_cfg.algorithm = Algorithm::BNPE;
        eval_cfg.lambda = 1.0;
        bal = batch_objective(eval_cfg, *result.surrogate, task, tape, bound, theta, x, val_perms[vi])
                  .balance.value()
                  .item();
      }
      val_sum += obj.loss.value().item() * static_cast<double>(e - b);
      balance_sum += bal * static_cast<double>(e - b);
    }
    tape.clear();

    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = train_sum / static_cast<double>(train_count);
    rec.val_loss = val_sum / static_cast<double>(n_val);
    rec.balance = balance_sum / static_cast<double>(n_val);
    rec.lr = adam.lr;
    if (!std::isfinite(rec.val_loss)) throw DivergenceError(epoch, 0, "non-finite validation loss");
    result.log.epochs.push_back(rec);

    if (rec.val_loss < best_val) {
      best_val = rec.val_loss;
      best = snapshot(params);
      result.log.best_epoch = epoch;
      bad_epochs = 0;
    } else if (++bad_epochs > cfg.patience) {
      adam.lr /= cfg.lr_factor;
      bad_epochs = 0;
      if (adam.lr < cfg.min_lr) break;
    }
  }

  for (std::size_t i = 0; i < params.size(); ++i) params[i]->value = best[i];
  result.log.best_val_loss = best_val;
  return result;
}

}  // namespace bsbi
