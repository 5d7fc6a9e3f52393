#include "bsbi/surrogate.hpp"

#include <cmath>
#include <map>
#include <sstream>

#include "bsbi/binary_io.hpp"

namespace bsbi {

namespace {

Tensor concat_inputs(const Tensor& a, const Tensor& b) {
  if (a.rows() != b.rows()) {
    throw ShapeError("classifier inputs " + a.shape_string() + " and " + b.shape_string() + " differ in rows");
  }
  Tensor out = Tensor::zeros(a.rows(), a.cols() + b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto r = out.row(i);
    std::copy(a.row(i).begin(), a.row(i).end(), r.begin());
    std::copy(b.row(i).begin(), b.row(i).end(), r.begin() + static_cast<std::ptrdiff_t>(a.cols()));
  }
  return out;
}

std::vector<double> prior_log_density(const PriorSpec& prior, const Tensor& theta) {
  std::vector<double> out(theta.rows());
  for (std::size_t i = 0; i < theta.rows(); ++i) out[i] = prior.log_density(theta.row(i));
  return out;
}

Tensor tensor_of(const std::vector<double>& v) { return Tensor({v.size()}, v); }

std::vector<double> values_of(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

}  // namespace

ClassifierHead::ClassifierHead(std::size_t theta_dim, std::size_t x_dim, std::size_t hidden, std::size_t layers)
    : mlp("classifier", theta_dim + x_dim, hidden, layers, 1),
      theta_norm(Standardizer::identity(theta_dim)),
      x_norm(Standardizer::identity(x_dim)) {}

Var ClassifierHead::logits(Tape& tape, const Tensor& theta, const Tensor& x, const std::vector<Var>& bound) const {
  Var in = tape.constant(concat_inputs(theta_norm.apply(theta), x_norm.apply(x)));
  return mlp.forward(in, bound);
}

std::vector<double> ClassifierHead::logits(const Tensor& theta, const Tensor& x) const {
  return values_of(mlp.evaluate(concat_inputs(theta_norm.apply(theta), x_norm.apply(x))));
}

std::vector<double> SurrogateDensity::log_ratio(const Tensor& theta, const Tensor& x) const {
  std::vector<double> out = log_unnorm(theta, x);
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (!prior().in_support(theta.row(i))) throw DomainError("log_ratio: theta outside the prior support");
    out[i] -= prior().log_density(theta.row(i));
  }
  return out;
}

Tensor SurrogateDensity::sample(std::span<const double>, Rng&, std::size_t, std::vector<double>*) const {
  throw std::logic_error("surrogate does not support direct sampling");
}

std::vector<double> RatioSurrogate::log_unnorm(const Tensor& theta, const Tensor& x) const {
  std::vector<double> out = head_.logits(theta, x);
  const std::vector<double> lp = prior_log_density(prior_, theta);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += lp[i];
  return out;
}

std::vector<double> RatioSurrogate::log_ratio(const Tensor& theta, const Tensor& x) const {
  for (std::size_t i = 0; i < theta.rows(); ++i) {
    if (!prior_.in_support(theta.row(i))) throw DomainError("log_ratio: theta outside the prior support");
  }
  return head_.logits(theta, x);
}

std::vector<double> FlowSurrogate::log_unnorm(const Tensor& theta, const Tensor& x) const {
  return flow_.log_prob(theta, x);
}

Tensor FlowSurrogate::sample(std::span<const double> x, Rng& rng, std::size_t n, std::vector<double>* log_q) const {
  return flow_.sample(x, rng, n, log_q);
}

std::vector<double> PriorSurrogate::log_unnorm(const Tensor& theta, const Tensor&) const {
  return prior_log_density(prior_, theta);
}

std::vector<double> PriorSurrogate::log_ratio(const Tensor& theta, const Tensor&) const {
  for (std::size_t i = 0; i < theta.rows(); ++i) {
    if (!prior_.in_support(theta.row(i))) throw DomainError("log_ratio: theta outside the prior support");
  }
  return std::vector<double>(theta.rows(), 0.0);
}

Tensor PriorSurrogate::sample(std::span<const double>, Rng& rng, std::size_t n, std::vector<double>* log_q) const {
  Tensor out = Tensor::zeros(n, prior_.dim());
  if (log_q) log_q->assign(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const ParamVector t = prior_.sample(rng);
    std::copy(t.begin(), t.end(), out.row(i).begin());
    if (log_q) (*log_q)[i] = prior_.log_density(t);
  }
  return out;
}

AnalyticSurrogate::AnalyticSurrogate(const TaskDefinition& task)
    : prior_(task.prior), posterior_(task.analytic_posterior) {
  if (!posterior_) throw std::invalid_argument("task " + task.name + " has no analytic posterior");
}

std::vector<double> AnalyticSurrogate::log_unnorm(const Tensor& theta, const Tensor& x) const {
  if (theta.rows() != x.rows()) throw ShapeError("analytic posterior: theta and x differ in rows");
  std::vector<double> out(theta.rows());
  for (std::size_t i = 0; i < theta.rows(); ++i) out[i] = posterior_(x.row(i)).log_density(theta.row(i));
  return out;
}

Tensor AnalyticSurrogate::sample(std::span<const double> x, Rng& rng, std::size_t n,
                                 std::vector<double>* log_q) const {
  const GaussianPosterior post = posterior_(x);
  Tensor out = Tensor::zeros(n, post.mean.size());
  if (log_q) log_q->assign(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const ParamVector t = post.sample(rng);
    std::copy(t.begin(), t.end(), out.row(i).begin());
    if (log_q) (*log_q)[i] = post.log_density(t);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints: envelope, meta text (key=value lines), tensor count, then
// per tensor: name, ndim, dims, data.

namespace {

using Meta = std::map<std::string, std::string>;

void write_tensor(BinaryWriter& w, const std::string& name, const Tensor& t) {
  w.string(name);
  w.u32(static_cast<std::uint32_t>(t.shape().size()));
  for (std::size_t d : t.shape()) w.u64(d);
  w.f64s({t.data().begin(), t.data().end()});
}

std::string meta_text(const Meta& meta) {
  std::ostringstream os;
  for (const auto& [k, v] : meta) os << k << '=' << v << '\n';
  return os.str();
}

Meta parse_meta(const std::string& text) {
  Meta meta;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw FormatError("checkpoint meta line without '=': " + line);
    meta[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return meta;
}

std::size_t meta_size(const Meta& meta, const std::string& key) {
  const auto it = meta.find(key);
  if (it == meta.end()) throw FormatError("checkpoint meta lacks '" + key + "'");
  try {
    return static_cast<std::size_t>(std::stoull(it->second));
  } catch (const std::exception&) {
    throw FormatError("checkpoint meta '" + key + "' is not an integer: " + it->second);
  }
}

double meta_double(const Meta& meta, const std::string& key) {
  const auto it = meta.find(key);
  if (it == meta.end()) throw FormatError("checkpoint meta lacks '" + key + "'");
  return std::stod(it->second);
}

std::string format_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

std::vector<std::pair<std::string, Tensor>> standardizer_tensors(const std::string& prefix, const Standardizer& s) {
  return {{prefix + ".mean", tensor_of(s.mean)}, {prefix + ".scale", tensor_of(s.scale)}};
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const SurrogateDensity& surrogate, const std::string& task) {
  Meta meta{{"task", task}};
  std::vector<std::pair<std::string, Tensor>> tensors;
  if (const auto* r = dynamic_cast<const RatioSurrogate*>(&surrogate)) {
    const ClassifierHead& h = r->head();
    meta["kind"] = "ratio";
    meta["theta_dim"] = std::to_string(h.theta_dim());
    meta["x_dim"] = std::to_string(h.x_dim());
    meta["hidden"] = std::to_string(h.mlp.hidden());
    meta["layers"] = std::to_string(h.mlp.layers());
    for (const Parameter* p : h.mlp.parameters()) tensors.emplace_back(p->name, p->value);
    for (auto& t : standardizer_tensors("theta_norm", h.theta_norm)) tensors.push_back(std::move(t));
    for (auto& t : standardizer_tensors("x_norm", h.x_norm)) tensors.push_back(std::move(t));
  } else if (const auto* f = dynamic_cast<const FlowSurrogate*>(&surrogate)) {
    const ConditionalFlow& flow = f->flow();
    const FlowConfig& c = flow.config();
    meta["kind"] = "flow";
    meta["theta_dim"] = std::to_string(c.theta_dim);
    meta["x_dim"] = std::to_string(c.x_dim);
    meta["transforms"] = std::to_string(c.transforms);
    meta["hidden"] = std::to_string(c.hidden);
    meta["conditioner_layers"] = std::to_string(c.conditioner_layers);
    meta["bins"] = std::to_string(c.spline.bins);
    meta["bound"] = format_double(c.spline.bound);
    meta["min_bin_fraction"] = format_double(c.spline.min_bin_fraction);
    meta["prior_map"] = flow.has_prior_map() ? "1" : "0";
    for (const Parameter* p : flow.parameters()) tensors.emplace_back(p->name, p->value);
    for (auto& t : standardizer_tensors("context_norm", flow.context_normalizer())) tensors.push_back(std::move(t));
  } else {
    throw std::invalid_argument("only trained ratio or flow surrogates can be checkpointed");
  }

  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    BinaryWriter w(tmp);
    w.envelope();
    w.string(meta_text(meta));
    w.u64(tensors.size());
    for (const auto& [name, t] : tensors) write_tensor(w, name, t);
    w.close();
  }
  std::filesystem::rename(tmp, path);
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  BinaryReader r(path);
  r.envelope();
  const Meta meta = parse_meta(r.string());
  const std::uint64_t count = r.u64();
  std::map<std::string, Tensor> tensors;
  for (std::uint64_t i = 0; i < count; ++i) {
    std::string name = r.string();
    const std::uint32_t ndim = r.u32();
    if (ndim > 2) throw FormatError("checkpoint tensor " + name + " has " + std::to_string(ndim) + " dims");
    std::vector<std::size_t> shape(ndim);
    std::size_t n = 1;
    for (auto& d : shape) {
      d = static_cast<std::size_t>(r.u64());
      n *= d;
    }
    tensors[name] = Tensor(shape, r.f64s(n));
  }
  if (!r.at_end()) throw FormatError("trailing bytes in checkpoint " + path.string());

  const auto it = meta.find("task");
  if (it == meta.end()) throw FormatError("checkpoint meta lacks 'task'");
  LoadedCheckpoint out;
  out.task = it->second;
  const TaskDefinition task = make_task(out.task);

  auto take = [&](const std::string& name, const std::vector<std::size_t>& shape) {
    const auto t = tensors.find(name);
    if (t == tensors.end()) throw FormatError("checkpoint lacks tensor " + name);
    if (t->second.shape() != shape) {
      throw FormatError("checkpoint tensor " + name + " has shape " + t->second.shape_string() + ", expected " +
                        shape_string(shape));
    }
    return t->second;
  };
  auto fill = [&](const std::vector<Parameter*>& params) {
    for (Parameter* p : params) p->value = take(p->name, p->value.shape());
  };
  auto load_standardizer = [&](const std::string& prefix, std::size_t dim) {
    Standardizer s;
    s.mean = values_of(take(prefix + ".mean", {dim}));
    s.scale = values_of(take(prefix + ".scale", {dim}));
    return s;
  };

  const std::string kind = meta.count("kind") ? meta.at("kind") : "";
  const std::size_t theta_dim = meta_size(meta, "theta_dim");
  const std::size_t x_dim = meta_size(meta, "x_dim");
  if (theta_dim != task.theta_dim || x_dim != task.x_dim) {
    throw FormatError("checkpoint dimensions do not match task " + out.task);
  }
  if (kind == "ratio") {
    ClassifierHead head(theta_dim, x_dim, meta_size(meta, "hidden"), meta_size(meta, "layers"));
    fill(head.mlp.parameters());
    head.theta_norm = load_standardizer("theta_norm", theta_dim);
    head.x_norm = load_standardizer("x_norm", x_dim);
    out.surrogate = std::make_unique<RatioSurrogate>(std::move(head), task.prior);
  } else if (kind == "flow") {
    FlowConfig c;
    c.theta_dim = theta_dim;
    c.x_dim = x_dim;
    c.transforms = meta_size(meta, "transforms");
    c.hidden = meta_size(meta, "hidden");
    c.conditioner_layers = meta_size(meta, "conditioner_layers");
    c.spline.bins = meta_size(meta, "bins");
    c.spline.bound = meta_double(meta, "bound");
    c.spline.min_bin_fraction = meta_double(meta, "min_bin_fraction");
    std::optional<Box> box;
    if (meta_size(meta, "prior_map") == 1) {
      if (!task.prior.is_box()) throw FormatError("prior map stored for a task without a box prior");
      box = task.prior.box();
    }
    ConditionalFlow flow(c, box);
    fill(flow.parameters());
    flow.context_normalizer() = load_standardizer("context_norm", x_dim);
    out.surrogate = std::make_unique<FlowSurrogate>(std::move(flow), task.prior);
  } else {
    throw FormatError("unknown checkpoint kind '" + kind + "'");
  }
  return out;
}

}  // namespace bsbi
