#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "fna/arch.hpp"
#include "fna/error.hpp"
#include "fna/remap.hpp"
#include "fna/supernet.hpp"
#include "fna/tasks.hpp"

namespace fna {

// Heavy-ball SGD: v = momentum * v + (g + wd * w); w -= lr * v.
struct SgdConfig {
  double lr = 0.05;
  double momentum = 0.9;
  double weight_decay = 4e-5;
};

// Adam with bias correction; wd is added to the gradient.
struct AdamConfig {
  double lr = 3e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

class Sgd {
 public:
  explicit Sgd(SgdConfig cfg) : cfg_(cfg) {}
  // Steps every trainable tensor touched by the last backward, then clears
  // all gradients. Untouched tensors keep their velocity and values.
  void step(ParamMap& params);

 private:
  SgdConfig cfg_;
  std::map<std::string, std::vector<double>> velocity_;
};

class Adam {
 public:
  explicit Adam(AdamConfig cfg) : cfg_(cfg) {}
  void step(std::vector<Tensor>& params);

 private:
  AdamConfig cfg_;
  long long t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

// L_task + lambda * log10(expected_cost).
Tensor search_loss(const Tensor& task_loss, const Tensor& expected_cost, double lambda);

struct SearchConfig {
  int total_epochs = 40;
  int warmup_epochs = 20;  // alpha frozen
  double lambda_cost = 0.08;
  double val_fraction = 0.2;
  SgdConfig weights;
  AdamConfig alpha;
  std::size_t batch_size = 16;
  std::uint64_t seed = 0;
  bool bn_updates = true;
};

void validate_search_config(const SearchConfig& cfg);
nlohmann::ordered_json search_config_to_json(const SearchConfig& cfg);
SearchConfig search_config_from_json(const nlohmann::json& doc, SearchConfig base = {});

struct TraceRecord {
  std::size_t step = 0;
  int epoch = 0;
  std::string phase;  // "warmup" and "weights" use the train split, "alpha" the val split
  double task_loss = 0.0;
  double cost_term = 0.0;  // lambda * log10(expected MAdds)
  double expected_madds = 0.0;
  std::vector<std::size_t> path;  // sampled path; empty on alpha steps
  std::string arch_hash;          // of the current argmax architecture
};

struct SearchTrace {
  std::vector<std::size_t> train_indices;
  std::vector<std::size_t> val_indices;
  std::vector<TraceRecord> records;

  // Columns: step, epoch, phase, task_loss, cost_term, expected_madds, arch_hash.
  void write_csv(std::ostream& out) const;
};

struct SearchResult {
  ArchDescriptor arch;
  SuperNet net;
  SearchTrace trace;
};

class SearchDiverged : public DivergenceError {
 public:
  SearchDiverged(const std::string& what, SearchTrace trace) : DivergenceError(what), trace(std::move(trace)) {}
  SearchTrace trace;
};

// Called after every recorded step with the network as that step left it.
using SearchObserver = std::function<void(const TraceRecord&, const SuperNet&)>;

// Warmup trains w on sampled paths; afterwards every iteration is a
// single-path w-step on a train batch followed by a full-mixture alpha-step
// on a validation batch. `pool` is split once into the two halves.
SearchResult run_search(SuperNet net, const Dataset& data, std::span<const std::size_t> pool, const SearchConfig& cfg,
                        const SearchObserver& observer = {});

struct TrainConfig {
  int epochs = 10;
  SgdConfig sgd;
  std::size_t batch_size = 16;
  std::uint64_t seed = 0;
};

struct CurvePoint {
  int epoch = 0;
  double train_loss = 0.0;
  double val_metric = 0.0;  // mIOU (dense) or accuracy
  double val_accuracy = 0.0;
};

void write_curve_csv(std::ostream& out, const std::vector<CurvePoint>& curve);

struct FinetuneResult {
  ParamMap params;
  std::vector<CurvePoint> curve;
};

class FinetuneDiverged : public DivergenceError {
 public:
  FinetuneDiverged(const std::string& what, std::vector<CurvePoint> curve)
      : DivergenceError(what), curve(std::move(curve)) {}
  std::vector<CurvePoint> curve;
};

// Plain supervised training from `init` (copied, never modified).
FinetuneResult finetune(const ArchDescriptor& arch, const ParamMap& init, const Dataset& data,
                        std::span<const std::size_t> train, std::span<const std::size_t> val, const TrainConfig& cfg);

// Uniform per-layer choices, kept when the derived MAdds fall inside
// target * (1 +- tolerance).
std::vector<ArchDescriptor> run_random_sample_baseline(const SearchSpace& space, std::size_t n, double cost_target,
                                                       double tolerance, std::mt19937_64& rng,
                                                       std::size_t max_tries = 100000);

struct RandomSearchConfig {
  std::size_t samples = 8;
  double cost_target = 0.0;
  double tolerance = 0.1;
  std::size_t max_tries = 100000;
  TrainConfig train = {1, {}, 16, 0};
  RemapOptions remap;
  std::uint64_t seed = 0;
};

struct RandomCandidate {
  ArchDescriptor arch;
  MAdds madds = 0;
  double val_metric = 0.0;
};

struct RandomSearchResult {
  std::vector<RandomCandidate> candidates;
  std::size_t best = 0;  // first candidate with the highest metric
  ParamMap best_params;
};

// Each sample is remapped from the seed, trained briefly and scored on `val`.
RandomSearchResult run_random_search(const SearchSpace& space, const ArchDescriptor& seed, const ParamMap& seed_params,
                                     const Dataset& data, std::span<const std::size_t> train,
                                     std::span<const std::size_t> val, const RandomSearchConfig& cfg);

}  // namespace fna
