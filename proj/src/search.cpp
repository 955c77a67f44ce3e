#include "fna/search.hpp"

#include <cmath>
#include <cstdio>
#include <limits>

#include "fna/ops.hpp"
#include "fna/random.hpp"

namespace fna {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

std::string fmt17(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

// Batches of a shuffled copy of `indices`; the last batch may be short.
std::vector<std::vector<std::size_t>> epoch_batches(std::span<const std::size_t> indices, std::size_t batch,
                                                    std::mt19937_64& rng) {
  std::vector<std::size_t> order(indices.begin(), indices.end());
  portable_shuffle(order, rng);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < order.size(); i += batch)
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                     order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), i + batch)));
  return out;
}

// Temporarily detaches the operation weights from autograd so an alpha step
// neither computes nor leaves gradients on them.
class FreezeWeights {
 public:
  explicit FreezeWeights(ParamMap& params) : params_(params) {
    for (auto& [name, t] : params_)
      if (t.requires_grad()) {
        frozen_.push_back(name);
        t.set_requires_grad(false);
      }
  }
  ~FreezeWeights() {
    for (const auto& name : frozen_) params_.at(name).set_requires_grad(true);
  }
  FreezeWeights(const FreezeWeights&) = delete;
  FreezeWeights& operator=(const FreezeWeights&) = delete;

 private:
  ParamMap& params_;
  std::vector<std::string> frozen_;
};

void check_dataset_matches(const SearchSpace& space, const Dataset& data) {
  if (space.head.classes != data.spec.classes)
    throw ConfigError("head has " + std::to_string(space.head.classes) + " classes, dataset has " +
                      std::to_string(data.spec.classes));
  if ((space.head.kind == HeadKind::kDense) != (data.kind == TaskKind::kDense))
    throw ConfigError("head kind does not match the task kind");
  if (space.input_height != data.spec.height || space.input_width != data.spec.width)
    throw ConfigError("search space resolution does not match the dataset");
}

}  // namespace

void Sgd::step(ParamMap& params) {
  for (auto& [name, t] : params) {
    if (!t.requires_grad() || !t.has_grad()) {
      t.zero_grad();
      continue;
    }
    auto& v = velocity_[name];
    if (v.empty()) v.assign(t.numel(), 0.0);
    auto w = t.mutable_data();
    auto g = t.grad();
    for (std::size_t i = 0; i < w.size(); ++i) {
      v[i] = cfg_.momentum * v[i] + g[i] + cfg_.weight_decay * w[i];
      w[i] -= cfg_.lr * v[i];
    }
    t.zero_grad();
  }
}

void Adam::step(std::vector<Tensor>& params) {
  if (m_.empty()) {
    for (const Tensor& p : params) {
      m_.emplace_back(p.numel(), 0.0);
      v_.emplace_back(p.numel(), 0.0);
    }
  }
  if (m_.size() != params.size()) throw ShapeError("Adam: parameter list changed between steps");
  ++t_;
  const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor& p = params[k];
    if (p.has_grad()) {
      auto w = p.mutable_data();
      auto g = p.grad();
      for (std::size_t i = 0; i < w.size(); ++i) {
        const double gi = g[i] + cfg_.weight_decay * w[i];
        m_[k][i] = cfg_.beta1 * m_[k][i] + (1.0 - cfg_.beta1) * gi;
        v_[k][i] = cfg_.beta2 * v_[k][i] + (1.0 - cfg_.beta2) * gi * gi;
        w[i] -= cfg_.lr * (m_[k][i] / c1) / (std::sqrt(v_[k][i] / c2) + cfg_.eps);
      }
    }
    p.zero_grad();
  }
}

Tensor search_loss(const Tensor& task_loss, const Tensor& expected_cost, double lambda) {
  if (!(lambda >= 0.0)) throw DomainError("search_loss: lambda must be >= 0");
  if (!(expected_cost.item() > 0.0)) throw DomainError("search_loss: expected cost must be positive");
  return add(task_loss, scale(log10(expected_cost), lambda));
}

void validate_search_config(const SearchConfig& c) {
  if (c.total_epochs < 0 || c.warmup_epochs < 0) throw ConfigError("epochs must be >= 0");
  if (c.warmup_epochs > c.total_epochs) throw ConfigError("warmup_epochs must not exceed total_epochs");
  if (!(c.val_fraction > 0.0 && c.val_fraction < 1.0)) throw ConfigError("val_fraction must lie in (0, 1)");
  if (!(c.lambda_cost >= 0.0) || !std::isfinite(c.lambda_cost)) throw ConfigError("lambda must be finite and >= 0");
  if (c.batch_size == 0) throw ConfigError("batch_size must be >= 1");
  if (!(c.weights.lr > 0.0) || !(c.alpha.lr >= 0.0)) throw ConfigError("learning rates must be positive");
}

nlohmann::ordered_json search_config_to_json(const SearchConfig& c) {
  nlohmann::ordered_json j;
  j["total_epochs"] = c.total_epochs;
  j["warmup_epochs"] = c.warmup_epochs;
  j["lambda"] = c.lambda_cost;
  j["val_fraction"] = c.val_fraction;
  j["weights"] = {{"lr", c.weights.lr}, {"momentum", c.weights.momentum}, {"weight_decay", c.weights.weight_decay}};
  j["alpha"] = {{"lr", c.alpha.lr},
                {"beta1", c.alpha.beta1},
                {"beta2", c.alpha.beta2},
                {"eps", c.alpha.eps},
                {"weight_decay", c.alpha.weight_decay}};
  j["batch_size"] = c.batch_size;
  j["seed"] = c.seed;
  j["bn_updates"] = c.bn_updates;
  return j;
}

SearchConfig search_config_from_json(const nlohmann::json& doc, SearchConfig c) {
  if (!doc.is_object()) throw ConfigError("search config must be a JSON object");
  try {
    for (const auto& [key, v] : doc.items()) {
      if (key == "total_epochs") c.total_epochs = v.get<int>();
      else if (key == "warmup_epochs") c.warmup_epochs = v.get<int>();
      else if (key == "lambda") c.lambda_cost = v.get<double>();
      else if (key == "val_fraction") c.val_fraction = v.get<double>();
      else if (key == "batch_size") c.batch_size = v.get<std::size_t>();
      else if (key == "seed") c.seed = v.get<std::uint64_t>();
      else if (key == "bn_updates") c.bn_updates = v.get<bool>();
      else if (key == "weights") {
        for (const auto& [k, x] : v.items()) {
          if (k == "lr") c.weights.lr = x.get<double>();
          else if (k == "momentum") c.weights.momentum = x.get<double>();
          else if (k == "weight_decay") c.weights.weight_decay = x.get<double>();
          else throw ConfigError("unknown key 'weights." + k + "'");
        }
      } else if (key == "alpha") {
        for (const auto& [k, x] : v.items()) {
          if (k == "lr") c.alpha.lr = x.get<double>();
          else if (k == "beta1") c.alpha.beta1 = x.get<double>();
          else if (k == "beta2") c.alpha.beta2 = x.get<double>();
          else if (k == "eps") c.alpha.eps = x.get<double>();
          else if (k == "weight_decay") c.alpha.weight_decay = x.get<double>();
          else throw ConfigError("unknown key 'alpha." + k + "'");
        }
      } else {
        throw ConfigError("unknown search config key '" + key + "'");
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("search config: ") + e.what());
  }
  validate_search_config(c);
  return c;
}

void SearchTrace::write_csv(std::ostream& out) const {
  out << "step,epoch,phase,task_loss,cost_term,expected_madds,arch_hash\n";
  for (const TraceRecord& r : records)
    out << r.step << ',' << r.epoch << ',' << r.phase << ',' << fmt17(r.task_loss) << ',' << fmt17(r.cost_term) << ','
        << fmt17(r.expected_madds) << ',' << r.arch_hash << '\n';
}

SearchResult run_search(SuperNet net, const Dataset& data, std::span<const std::size_t> pool, const SearchConfig& cfg,
                        const SearchObserver& observer) {
  validate_search_config(cfg);
  check_dataset_matches(net.space, data);
  SearchTrace trace;
  {
    std::vector<std::size_t> order(pool.begin(), pool.end());
    std::mt19937_64 split_rng(derive_seed(cfg.seed, 1));
    portable_shuffle(order, split_rng);
    const auto n_val = static_cast<std::size_t>(std::llround(cfg.val_fraction * static_cast<double>(order.size())));
    if (n_val == 0 || n_val >= order.size()) throw ConfigError("search pool too small for val_fraction");
    trace.val_indices.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_val));
    trace.train_indices.assign(order.begin() + static_cast<std::ptrdiff_t>(n_val), order.end());
  }
  mark_trainable(net.params);
  set_bn_updates(net, cfg.bn_updates);
  std::mt19937_64 batch_rng(derive_seed(cfg.seed, 2));
  Sgd sgd(cfg.weights);
  Adam adam(cfg.alpha);

  auto record = [&](int epoch, const char* phase, double task, std::vector<std::size_t> path) {
    TraceRecord r;
    r.step = trace.records.size();
    r.epoch = epoch;
    r.phase = phase;
    r.task_loss = task;
    {
      NoGradGuard guard;
      r.expected_madds = expected_cost(net).item();
    }
    r.cost_term = cfg.lambda_cost * std::log10(r.expected_madds);
    r.path = std::move(path);
    r.arch_hash = arch_hash(derive_architecture(net.space, alpha_values(net)));
    trace.records.push_back(std::move(r));
    if (observer) observer(trace.records.back(), net);
    if (!std::isfinite(task))
      throw SearchDiverged("search diverged at step " + std::to_string(trace.records.size() - 1) + " (" + phase +
                               " loss " + fmt17(task) + ")",
                           trace);
  };

  std::vector<std::vector<std::size_t>> val_batches;
  std::size_t val_cursor = 0;
  for (int epoch = 1; epoch <= cfg.total_epochs; ++epoch) {
    const bool warm = epoch <= cfg.warmup_epochs;
    for (const auto& idx : epoch_batches(trace.train_indices, cfg.batch_size, batch_rng)) {
      // Weight step on one sampled path.
      for (Tensor& a : net.alpha) a.zero_grad();
      const auto path = sample_path(net);
      Batch b = make_batch(data, idx);
      double task = kNaN;
      try {
        Tensor loss = softmax_cross_entropy(path_forward(net, path, b.x, RunMode{train_bn_mode(net)}), b.labels);
        task = loss.item();
        if (std::isfinite(task)) {
          loss.backward();
          sgd.step(net.params);
        }
      } catch (const DivergenceError&) {
        // blown-up activations; recorded as a non-finite loss below
      }
      record(epoch, warm ? "warmup" : "weights", task, path);
      if (warm) continue;

      // Architecture step on the full mixture.
      if (val_cursor >= val_batches.size()) {
        val_batches = epoch_batches(trace.val_indices, cfg.batch_size, batch_rng);
        val_cursor = 0;
      }
      Batch vb = make_batch(data, val_batches[val_cursor++]);
      double vtask = kNaN;
      try {
        FreezeWeights freeze(net.params);
        const BNMode mode = net.bn_updates ? BNMode::kBatchStats : BNMode::kFrozen;
        Tensor vloss = softmax_cross_entropy(supernet_forward(net, vb.x, RunMode{mode}), vb.labels);
        vtask = vloss.item();
        if (std::isfinite(vtask)) {
          search_loss(vloss, expected_cost(net), cfg.lambda_cost).backward();
          adam.step(net.alpha);
        }
      } catch (const DivergenceError&) {
      }
      record(epoch, "alpha", vtask, {});
    }
  }
  ArchDescriptor arch = derive_architecture(net.space, alpha_values(net));
  return SearchResult{std::move(arch), std::move(net), std::move(trace)};
}

void write_curve_csv(std::ostream& out, const std::vector<CurvePoint>& curve) {
  out << "epoch,train_loss,val_metric,val_accuracy\n";
  for (const CurvePoint& p : curve)
    out << p.epoch << ',' << fmt17(p.train_loss) << ',' << fmt17(p.val_metric) << ',' << fmt17(p.val_accuracy) << '\n';
}

FinetuneResult finetune(const ArchDescriptor& arch, const ParamMap& init, const Dataset& data,
                        std::span<const std::size_t> train, std::span<const std::size_t> val, const TrainConfig& cfg) {
  if (cfg.epochs < 0) throw ConfigError("epochs must be >= 0");
  if (cfg.batch_size == 0) throw ConfigError("batch_size must be >= 1");
  const auto shapes = param_shapes(arch);
  if (shapes.size() != init.size()) throw ShapeError("finetune: parameter set does not match the architecture");
  for (const auto& [name, shape] : shapes) {
    const auto it = init.find(name);
    if (it == init.end()) throw ShapeError("finetune: missing parameter '" + name + "'");
    if (it->second.shape() != shape)
      throw ShapeError("finetune: '" + name + "' is " + shape_str(it->second.shape()) + ", expected " + shape_str(shape));
  }
  FinetuneResult r{clone_params(init), {}};
  mark_trainable(r.params);
  Sgd sgd(cfg.sgd);
  std::mt19937_64 rng(derive_seed(cfg.seed, 3));
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    double total = 0.0;
    std::size_t count = 0;
    for (const auto& idx : epoch_batches(train, cfg.batch_size, rng)) {
      Batch b = make_batch(data, idx);
      Tensor loss;
      double l = kNaN;
      try {
        loss = softmax_cross_entropy(network_forward(arch, r.params, b.x, RunMode{BNMode::kTrain}), b.labels);
        l = loss.item();
      } catch (const DivergenceError&) {
      }
      if (!std::isfinite(l))
        throw FinetuneDiverged("finetune diverged in epoch " + std::to_string(epoch) + " (loss " + fmt17(l) + ")",
                               r.curve);
      loss.backward();
      sgd.step(r.params);
      total += l * static_cast<double>(idx.size());
      count += idx.size();
    }
    CurvePoint p;
    p.epoch = epoch;
    p.train_loss = count ? total / static_cast<double>(count) : 0.0;
    if (!val.empty()) {
      const MetricReport m = evaluate(arch, r.params, data, val);
      p.val_metric = m.primary();
      p.val_accuracy = m.accuracy;
    }
    r.curve.push_back(p);
  }
  return r;
}

std::vector<ArchDescriptor> run_random_sample_baseline(const SearchSpace& space, std::size_t n, double cost_target,
                                                       double tolerance, std::mt19937_64& rng, std::size_t max_tries) {
  if (n == 0) throw ConfigError("need at least one sample");
  if (!(cost_target > 0.0) || !(tolerance >= 0.0)) throw ConfigError("cost window needs target > 0, tolerance >= 0");
  const Resolution res{space.input_height, space.input_width};
  const auto refs = space.searchable_layers();
  std::vector<ArchDescriptor> out;
  for (std::size_t tries = 0; out.size() < n; ++tries) {
    if (tries == max_tries)
      throw SamplingError("only " + std::to_string(out.size()) + " of " + std::to_string(n) +
                          " architectures fell inside " + fmt17(cost_target) + " * (1 +- " + fmt17(tolerance) +
                          ") MAdds after " + std::to_string(max_tries) + " draws");
    std::vector<std::size_t> choice;
    for (const LayerRef& r : refs) choice.push_back(uniform_index(rng, space.candidates(r).ops.size()));
    ArchDescriptor a = arch_from_choices(space, choice);
    const auto madds = static_cast<double>(network_cost(a, res));
    if (std::abs(madds - cost_target) <= tolerance * cost_target) out.push_back(std::move(a));
  }
  return out;
}

RandomSearchResult run_random_search(const SearchSpace& space, const ArchDescriptor& seed, const ParamMap& seed_params,
                                     const Dataset& data, std::span<const std::size_t> train,
                                     std::span<const std::size_t> val, const RandomSearchConfig& cfg) {
  if (cfg.samples == 0) throw ConfigError("random search needs at least one sample");
  std::mt19937_64 rng(derive_seed(cfg.seed, 4));
  const auto archs = run_random_sample_baseline(space, cfg.samples, cfg.cost_target, cfg.tolerance, rng, cfg.max_tries);
  RandomSearchResult out;
  double best = -1.0;
  for (std::size_t i = 0; i < archs.size(); ++i) {
    const ParamMap init = remap_seed_to_target(seed, seed_params, archs[i], cfg.remap).params;
    TrainConfig tc = cfg.train;
    tc.seed = derive_seed(cfg.seed, 100 + i);
    FinetuneResult fr = finetune(archs[i], init, data, train, {}, tc);
    const double metric = evaluate(archs[i], fr.params, data, val).primary();
    out.candidates.push_back(
        RandomCandidate{archs[i], network_cost(archs[i], {space.input_height, space.input_width}), metric});
    if (metric > best) {
      best = metric;
      out.best = i;
      out.best_params = std::move(fr.params);
    }
  }
  return out;
}

}  // namespace fna
