#pragma once

#include <cstdint>
#include <filesystem>
#include <ostream>
#include <string>

#include <json.hpp>

#include "fna/remap.hpp"
#include "fna/search.hpp"
#include "fna/tasks.hpp"

namespace fna {

enum class AdaptSource { kSupernet, kSeed, kRandom };

std::string_view adapt_source_name(AdaptSource s);
AdaptSource parse_adapt_source(std::string_view name);

struct SeedArchConfig {
  std::string profile = "seg";
  std::size_t stage_count = 4;
  double depth_scale = 0.5;
  int width_divisor = 16;
};

struct RandomSearchSettings {
  std::size_t samples = 8;
  double tolerance = 0.1;
  double cost_target = 0.0;  // 0: MAdds of the seed-shaped target network
  int train_epochs = 1;
  std::size_t max_tries = 100000;
};

// Everything a subcommand needs. Nested training/search seeds are derived
// from `seed` when the config is resolved; dataset seeds stay as given.
struct RunConfig {
  std::uint64_t seed = 0;
  std::filesystem::path out = "run";
  std::filesystem::path seed_checkpoint;  // default: <out>/seed.ckpt
  std::filesystem::path arch;             // cost, remap
  std::filesystem::path checkpoint;       // eval
  int resolution = 0;                     // cost; 0: target task resolution
  TaskSpec seed_task;
  TaskSpec target_task;
  SeedArchConfig seed_arch;
  TrainConfig seed_train;
  SearchConfig search;
  TrainConfig finetune;
  RemapStrategy strategy = RemapStrategy::kStandard;
  AdaptSource adapt_source = AdaptSource::kSupernet;
  bool search_from_remap = true;  // false: the super network starts from random weights
  RandomSearchSettings random_search;
  bool explain_remap = false;
};

RunConfig default_run_config();
// Applies a JSON document over `base`; unknown keys are a ConfigError.
RunConfig run_config_from_json(const nlohmann::json& doc, RunConfig base = default_run_config());
nlohmann::ordered_json run_config_to_json(const RunConfig& cfg);
RunConfig load_run_config(const std::filesystem::path& path);
// Fills derived seeds and default paths.
RunConfig resolve(RunConfig cfg);

struct LoadedNetwork {
  ArchDescriptor arch;
  ParamMap params;
  TaskSpec task;
};

// Seed network for the given head.
ArchDescriptor seed_architecture(const RunConfig& cfg, const HeadSpec& head);
// The seed with its head swapped for the target task.
ArchDescriptor seed_shaped_target(const RunConfig& cfg, const ArchDescriptor& seed);
SearchSpace target_space(const RunConfig& cfg, const ArchDescriptor& seed);

// Subcommands. Each writes its resolved config and artifacts under cfg.out,
// logs progress to `log`, and on failure leaves a FAILED marker before
// rethrowing.
void cmd_train_seed(const RunConfig& cfg, std::ostream& log);
void cmd_adapt(const RunConfig& cfg, std::ostream& log);
void cmd_random_search(const RunConfig& cfg, std::ostream& log);
void cmd_cost(const RunConfig& cfg, std::ostream& out);
void cmd_remap(const RunConfig& cfg, std::ostream& log);
void cmd_eval(const RunConfig& cfg, std::ostream& out);

// The pieces of cmd_adapt, for harnesses that reuse one search for several arms.
struct TargetSearch {
  Dataset data;
  Splits splits;
  SearchSpace space;
  RemapPlan expand_plan;  // empty when the super network starts from random weights
  SearchResult result;
};
TargetSearch search_target(const RunConfig& cfg, const LoadedNetwork& seed, const SearchObserver& observer = {});
// Initial weights of `arch` (normally the derived one) for an adaptation source.
RemapResult adaptation_init(const RunConfig& cfg, const LoadedNetwork& seed, const TargetSearch& search,
                            const ArchDescriptor& arch, AdaptSource source);

// Checkpoint of a concrete network: meta holds kind, arch and task spec.
void save_network(const std::filesystem::path& path, const ArchDescriptor& arch, const ParamMap& params,
                  const TaskSpec& task);
LoadedNetwork load_network(const std::filesystem::path& path);

}  // namespace fna
