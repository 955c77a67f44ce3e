// fna: seed training, parameter remapping and cost-aware search from the shell.
//
//   fna train-seed --out run
//   fna adapt --out run --adapt-source supernet --lambda 0.08
//   fna cost --arch run/arch.json
//
// Exit status: 0 on success, 1 for usage and configuration errors, 2 when a
// run fails (divergence, bad checkpoint, I/O).

#include <iostream>
#include <optional>

#include <CLI11.hpp>

#include "fna/error.hpp"
#include "fna/pipeline.hpp"

namespace {

struct Flags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<std::string> strategy;
  std::optional<std::string> adapt_source;
  std::optional<double> lambda;
  std::optional<std::string> arch;
  std::optional<std::string> checkpoint;
  std::optional<std::string> seed_checkpoint;
  std::optional<int> resolution;
  bool explain_remap = false;
};

fna::RunConfig build_config(const Flags& f) {
  fna::RunConfig c = f.config.empty() ? fna::default_run_config() : fna::load_run_config(f.config);
  if (f.seed) c.seed = *f.seed;
  if (f.out) c.out = *f.out;
  if (f.strategy) c.strategy = fna::parse_strategy(*f.strategy);
  if (f.adapt_source) c.adapt_source = fna::parse_adapt_source(*f.adapt_source);
  if (f.lambda) c.search.lambda_cost = *f.lambda;
  if (f.arch) c.arch = *f.arch;
  if (f.checkpoint) c.checkpoint = *f.checkpoint;
  if (f.seed_checkpoint) c.seed_checkpoint = *f.seed_checkpoint;
  if (f.resolution) c.resolution = *f.resolution;
  if (f.explain_remap) c.explain_remap = true;
  return fna::resolve(c);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Parameter remapping and cost-regularized architecture search"};
  app.require_subcommand(1);
  Flags flags;

  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", flags.config, "JSON run configuration")->check(CLI::ExistingFile);
    sub->add_option("--seed", flags.seed, "master seed");
    sub->add_option("--out", flags.out, "output directory");
  };
  auto remapping = [&](CLI::App* sub) {
    sub->add_option("--strategy", flags.strategy, "standard, bn_gamma, weight_std, weight_l1 or kernel_dilate");
    sub->add_flag("--explain-remap", flags.explain_remap, "print the remap plan");
    sub->add_option("--seed-checkpoint", flags.seed_checkpoint, "seed network checkpoint");
  };

  CLI::App* train_seed = app.add_subcommand("train-seed", "train the seed network on the seed task");
  common(train_seed);
  CLI::App* adapt = app.add_subcommand("adapt", "remap, search and finetune on the target task");
  common(adapt);
  remapping(adapt);
  adapt->add_option("--adapt-source", flags.adapt_source, "supernet, seed or random");
  adapt->add_option("--lambda", flags.lambda, "cost weight of the search loss");
  CLI::App* random_search = app.add_subcommand("random-search", "random architecture search baseline");
  common(random_search);
  remapping(random_search);
  CLI::App* cost = app.add_subcommand("cost", "MAdds report of an architecture");
  common(cost);
  cost->add_option("--arch", flags.arch, "architecture JSON")->required();
  cost->add_option("--resolution", flags.resolution, "square input side");
  CLI::App* remap = app.add_subcommand("remap", "remap seed weights onto an architecture");
  common(remap);
  remapping(remap);
  remap->add_option("--arch", flags.arch, "target architecture JSON")->required();
  CLI::App* eval = app.add_subcommand("eval", "score a network checkpoint");
  common(eval);
  eval->add_option("--checkpoint", flags.checkpoint, "network checkpoint")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    const fna::RunConfig cfg = build_config(flags);
    if (*train_seed) fna::cmd_train_seed(cfg, std::cout);
    else if (*adapt) fna::cmd_adapt(cfg, std::cout);
    else if (*random_search) fna::cmd_random_search(cfg, std::cout);
    else if (*cost) fna::cmd_cost(cfg, std::cout);
    else if (*remap) fna::cmd_remap(cfg, std::cout);
    else if (*eval) fna::cmd_eval(cfg, std::cout);
  } catch (const fna::ConfigError& e) {
    std::cerr << "fna: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "fna: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
