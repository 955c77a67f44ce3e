#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "fna/cost.hpp"
#include "fna/error.hpp"
#include "fna/network.hpp"
#include "fna/pipeline.hpp"

using namespace fna;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("fna_pipeline_" + name);
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::ostringstream s;
  s << f.rdbuf();
  return s.str();
}

// Small enough for a few seconds per full adapt run.
RunConfig small_config(const fs::path& out) {
  RunConfig c = default_run_config();
  c.out = out;
  c.seed = 5;
  c.seed_task.size = 96;
  c.target_task.size = 64;
  c.seed_train.epochs = 1;
  c.search.total_epochs = 2;
  c.search.warmup_epochs = 1;
  c.finetune.epochs = 1;
  c.random_search.samples = 2;
  return resolve(c);
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(FNA_CLI_PATH) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST_CASE("run config json round trip") {
  RunConfig c = default_run_config();
  c.seed = 77;
  c.out = "somewhere/else";
  c.strategy = RemapStrategy::kWeightL1;
  c.adapt_source = AdaptSource::kRandom;
  c.search_from_remap = false;
  c.search.lambda_cost = 0.5;
  c.target_task.context_radius = 3;
  c.finetune.sgd.lr = 0.02;
  c.explain_remap = true;
  const auto j = run_config_to_json(c);
  const RunConfig back = run_config_from_json(nlohmann::json::parse(j.dump()));
  CHECK(run_config_to_json(back).dump() == j.dump());

  // Partial documents patch the defaults, nested objects included.
  const RunConfig patched = run_config_from_json(nlohmann::json::parse(R"({"target_task": {"noise": 0.1}})"));
  CHECK(patched.target_task.noise == 0.1);
  CHECK(patched.target_task.family == default_run_config().target_task.family);

  CHECK_THROWS_AS(run_config_from_json(nlohmann::json{{"sead", 1}}), ConfigError);
  CHECK_THROWS_AS(run_config_from_json(nlohmann::json{{"finetune", {{"epochz", 1}}}}), ConfigError);
  CHECK_THROWS_AS(run_config_from_json(nlohmann::json{{"strategy", "magic"}}), ConfigError);
  CHECK_THROWS_AS(run_config_from_json(nlohmann::json{{"adapt_source", "thin air"}}), ConfigError);
  CHECK_THROWS_AS(run_config_from_json(nlohmann::json{{"seed", "seven"}}), ConfigError);
  CHECK_THROWS_AS(parse_adapt_source("nothing"), ConfigError);
}

TEST_CASE("resolve derives nested seeds and paths") {
  RunConfig c = default_run_config();
  c.out = "o";
  c.seed = 1;
  const RunConfig a = resolve(c);
  c.seed = 2;
  const RunConfig b = resolve(c);
  CHECK(a.seed_checkpoint == fs::path("o") / "seed.ckpt");
  CHECK(a.search.seed != b.search.seed);
  CHECK(a.finetune.seed != b.finetune.seed);
  CHECK(a.search.seed != a.finetune.seed);
  CHECK(resolve(a).search.seed == a.search.seed);
  c.target_task.family = "stripes";
  CHECK_THROWS_AS(resolve(c), ConfigError);
}

TEST_CASE("network checkpoints round trip") {
  const fs::path dir = scratch("netckpt");
  fs::create_directories(dir);
  const RunConfig cfg = small_config(dir);
  const ArchDescriptor a = seed_architecture(cfg, HeadSpec{HeadKind::kDense, 4});
  ParamMap p = init_params(a, 3);
  save_network(dir / "n.ckpt", a, p, cfg.target_task);
  LoadedNetwork n = load_network(dir / "n.ckpt");
  CHECK(n.arch == a);
  CHECK(task_spec_to_json(n.task).dump() == task_spec_to_json(cfg.target_task).dump());
  const Tensor x = Tensor::full({2, 1, 16, 16}, 0.3);
  const Tensor y1 = network_forward(a, p, x, RunMode{BNMode::kEval});
  const Tensor y2 = network_forward(n.arch, n.params, x, RunMode{BNMode::kEval});
  CHECK(std::equal(y1.data().begin(), y1.data().end(), y2.data().begin()));
  fs::remove_all(dir);
}

TEST_CASE("cost reports") {
  const RunConfig cfg = small_config("unused");
  const ArchDescriptor seed = seed_architecture(cfg, HeadSpec{HeadKind::kDense, 4});
  const auto doc = nlohmann::json::parse(arch_cost_report(seed, {16, 16}));
  CHECK(doc["total_madds"].get<MAdds>() == network_cost(seed, {16, 16}));
  MAdds sum = doc["stem_madds"].get<MAdds>() + doc["head_madds"].get<MAdds>();
  for (const auto& l : doc["layers"]) sum += l["madds"].get<MAdds>();
  CHECK(sum == network_cost(seed, {16, 16}));

  // Identity layers only remove cost.
  const SearchSpace space = target_space(cfg, seed);
  std::vector<std::size_t> full, thin;
  for (const LayerRef& r : space.searchable_layers()) {
    const auto& ops = space.candidates(r).ops;
    full.push_back(0);
    thin.push_back(ops.back().is_identity() ? ops.size() - 1 : 0);
  }
  CHECK(network_cost(arch_from_choices(space, thin), {16, 16}) < network_cost(arch_from_choices(space, full), {16, 16}));

  // Without strides every conv scales with the pixel count.
  ArchDescriptor flat;
  flat.stem = plain_conv_op(3, 1, 1, 8);
  flat.stages.push_back(ArchStage{StageSpec{8, 1, 1, false}, {mbconv_op(5, 3, 1, 8, 8)}});
  flat.head = HeadSpec{HeadKind::kDense, 2};
  CHECK(network_cost(flat, {32, 32}) == 4 * network_cost(flat, {16, 16}));
}

TEST_CASE("subcommands produce reproducible artifacts") {
  const fs::path a = scratch("run_a"), b = scratch("run_b");
  for (const fs::path& out : {a, b}) {
    std::ostringstream log;
    const RunConfig cfg = small_config(out / "nested");  // directory does not exist yet
    cmd_train_seed(cfg, log);
    cmd_adapt(cfg, log);
    RunConfig from_seed = cfg;
    from_seed.adapt_source = AdaptSource::kSeed;
    cmd_adapt(from_seed, log);
    RunConfig rs = cfg;
    rs.out = out / "rs";
    cmd_random_search(rs, log);
  }
  for (const char* f : {"nested/seed_curve.csv", "nested/search_trace.csv", "nested/finetune_supernet.csv",
                        "nested/finetune_seed.csv", "nested/arch.json", "nested/summary.json",
                        "rs/random_search.csv", "rs/finetune_random_search.csv"}) {
    CAPTURE(f);
    REQUIRE(fs::exists(a / f));
    CHECK(slurp(a / f) == slurp(b / f));
  }
  CHECK(slurp(a / "nested/seed.ckpt") == slurp(b / "nested/seed.ckpt"));
  CHECK(slurp(a / "nested/target.ckpt") == slurp(b / "nested/target.ckpt"));
  CHECK(slurp(a / "nested/finetune_supernet.csv") != slurp(a / "nested/finetune_seed.csv"));
  CHECK(!fs::exists(a / "nested/FAILED"));

  // Persisted config reproduces the run when fed back in.
  const RunConfig again = resolve(load_run_config(a / "nested/config.json"));
  RunConfig last = small_config(a / "nested");
  last.adapt_source = AdaptSource::kSeed;
  CHECK(run_config_to_json(again).dump() == run_config_to_json(last).dump());

  const auto rs_doc = nlohmann::json::parse(slurp(a / "rs/summary.json"));
  const double target = rs_doc["cost_target"].get<double>();
  std::istringstream rows(slurp(a / "rs/random_search.csv"));
  std::string line;
  std::getline(rows, line);
  int n = 0;
  while (std::getline(rows, line)) {
    const auto c1 = line.find(','), c2 = line.find(',', c1 + 1), c3 = line.find(',', c2 + 1);
    const double madds = std::stod(line.substr(c2 + 1, c3 - c2 - 1));
    CHECK(std::abs(madds - target) <= 0.1 * target);
    ++n;
  }
  CHECK(n == 2);
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST_CASE("failures leave a marker") {
  const fs::path out = scratch("fail");
  const RunConfig cfg = small_config(out);
  std::ostringstream log;
  CHECK_THROWS_AS(cmd_adapt(cfg, log), ConfigError);
  CHECK(fs::exists(out / "FAILED"));
  CHECK(slurp(out / "FAILED").find("seed checkpoint") != std::string::npos);

  RunConfig diverge = cfg;
  diverge.seed_train.sgd.lr = 1e300;
  diverge.seed_train.sgd.weight_decay = 0.0;
  CHECK_THROWS_AS(cmd_train_seed(diverge, log), DivergenceError);
  CHECK(fs::exists(out / "FAILED"));
  CHECK(fs::exists(out / "seed_curve.csv"));
  fs::remove_all(out);
}

TEST_CASE("command line exit codes") {
  const fs::path out = scratch("cli");
  fs::create_directories(out);
  std::ofstream(out / "cfg.json") << R"({"seed_task": {"size": 64}, "target_task": {"size": 48},
    "seed_train": {"epochs": 1}, "search": {"total_epochs": 1, "warmup_epochs": 1}, "finetune": {"epochs": 1}})";
  std::ofstream(out / "bad.json") << R"({"seed_task": {"size": 64}, "flux_capacitor": true})";
  std::ofstream(out / "broken.json") << "{ not json";
  const std::string o = " --out " + (out / "run").string();
  const std::string cfg = " --config " + (out / "cfg.json").string();

  CHECK(run_cli("") == 1);
  CHECK(run_cli("frobnicate") == 1);
  CHECK(run_cli("train-seed --seed notanumber") == 1);
  CHECK(run_cli("train-seed --config " + (out / "bad.json").string() + o) == 1);
  CHECK(run_cli("train-seed --config " + (out / "broken.json").string() + o) == 1);
  CHECK(run_cli("adapt" + cfg + o + " --strategy nonsense") == 1);
  CHECK(run_cli("adapt" + cfg + o) == 1);  // no seed checkpoint yet
  CHECK(run_cli("train-seed" + cfg + o + " --seed 3") == 0);
  CHECK(fs::exists(out / "run/seed.ckpt"));
  CHECK(run_cli("adapt" + cfg + o + " --seed 3 --lambda 0.2 --adapt-source seed --explain-remap") == 0);
  CHECK(fs::exists(out / "run/finetune_seed.csv"));
  CHECK(fs::exists(out / "run/remap_target.txt"));
  const auto written = nlohmann::json::parse(slurp(out / "run/config.json"));
  CHECK(written["search"]["lambda"].get<double>() == 0.2);
  CHECK(written["adapt_source"] == "seed");
  CHECK(run_cli("cost --arch " + (out / "run/arch.json").string()) == 0);
  CHECK(run_cli("cost --arch " + (out / "missing.json").string()) == 1);
  CHECK(run_cli("eval --checkpoint " + (out / "run/target.ckpt").string()) == 0);
  CHECK(run_cli("eval --checkpoint " + (out / "cfg.json").string()) == 2);
  CHECK(run_cli("remap" + cfg + " --arch " + (out / "run/arch.json").string() + " --seed-checkpoint " +
                (out / "run/seed.ckpt").string() + " --out " + (out / "remap").string()) == 0);
  CHECK(fs::exists(out / "remap/remap_plan.txt"));
  fs::remove_all(out);
}
