#include "fna/pipeline.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

#include "fna/checkpoint.hpp"
#include "fna/cost.hpp"
#include "fna/error.hpp"
#include "fna/random.hpp"

namespace fna {

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

namespace {

// Stream ids for seeds derived from the master seed.
enum : std::uint64_t {
  kSeedTrainStream = 11,
  kSearchStream,
  kFinetuneStream,
  kSeedInitStream,
  kHeadInitStream,
  kRandomInitStream,
  kSupernetStream,
  kRandomSearchStream,
};

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot write '" + path.string() + "'");
  f << text;
  if (!f) throw Error("write to '" + path.string() + "' failed");
}

std::string read_text(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot read '" + path.string() + "'");
  std::ostringstream s;
  s << f.rdbuf();
  return s.str();
}

ojson train_config_json(const TrainConfig& t) {
  ojson j;
  j["epochs"] = t.epochs;
  j["lr"] = t.sgd.lr;
  j["momentum"] = t.sgd.momentum;
  j["weight_decay"] = t.sgd.weight_decay;
  j["batch_size"] = t.batch_size;
  j["seed"] = t.seed;
  return j;
}

TrainConfig train_config_from(const nlohmann::json& doc, TrainConfig t, const std::string& where) {
  if (!doc.is_object()) throw ConfigError(where + " must be an object");
  for (const auto& [k, v] : doc.items()) {
    if (k == "epochs") t.epochs = v.get<int>();
    else if (k == "lr") t.sgd.lr = v.get<double>();
    else if (k == "momentum") t.sgd.momentum = v.get<double>();
    else if (k == "weight_decay") t.sgd.weight_decay = v.get<double>();
    else if (k == "batch_size") t.batch_size = v.get<std::size_t>();
    else if (k == "seed") t.seed = v.get<std::uint64_t>();
    else throw ConfigError("unknown key '" + where + "." + k + "'");
  }
  if (t.epochs < 0 || t.batch_size == 0 || !(t.sgd.lr > 0.0)) throw ConfigError(where + ": invalid training settings");
  return t;
}

// Runs `body`; on failure leaves out/FAILED with the message and rethrows.
template <typename Body>
void guarded(const RunConfig& cfg, Body&& body) {
  try {
    fs::create_directories(cfg.out);
    fs::remove(cfg.out / "FAILED");
    body();
  } catch (const std::exception& e) {
    std::error_code ec;
    fs::create_directories(cfg.out, ec);
    std::ofstream(cfg.out / "FAILED") << e.what() << "\n";
    throw;
  }
}

nlohmann::json merge_task(const TaskSpec& base, const nlohmann::json& patch) {
  nlohmann::json j = nlohmann::json::parse(task_spec_to_json(base).dump());
  if (!patch.is_object()) throw ConfigError("task spec must be a JSON object");
  for (const auto& [k, v] : patch.items()) j[k] = v;
  return j;
}

void write_config(const RunConfig& cfg) { write_text(cfg.out / "config.json", run_config_to_json(cfg).dump(2) + "\n"); }

std::string curve_csv(const std::vector<CurvePoint>& curve) {
  std::ostringstream s;
  write_curve_csv(s, curve);
  return s.str();
}

LoadedNetwork load_seed(const RunConfig& cfg) {
  if (!fs::exists(cfg.seed_checkpoint))
    throw ConfigError("seed checkpoint '" + cfg.seed_checkpoint.string() + "' does not exist (run train-seed first)");
  return load_network(cfg.seed_checkpoint);
}

ojson metrics_summary(const MetricReport& m) {
  return ojson{{"metric", m.primary()}, {"accuracy", m.accuracy}, {"miou", m.miou}};
}

// Finetunes, writing the curve (partial on divergence) under `name`.
FinetuneResult finetune_logged(const RunConfig& cfg, const ArchDescriptor& arch, const ParamMap& init,
                               const Dataset& data, const Splits& sp, const TrainConfig& tc, const std::string& name,
                               std::ostream& log) {
  try {
    FinetuneResult r = finetune(arch, init, data, sp.train, sp.val, tc);
    write_text(cfg.out / name, curve_csv(r.curve));
    for (const CurvePoint& p : r.curve)
      log << "  epoch " << p.epoch << " train_loss " << p.train_loss << " val " << p.val_metric << "\n";
    return r;
  } catch (const FinetuneDiverged& e) {
    write_text(cfg.out / name, curve_csv(e.curve));
    throw;
  }
}

}  // namespace

std::string_view adapt_source_name(AdaptSource s) {
  switch (s) {
    case AdaptSource::kSupernet: return "supernet";
    case AdaptSource::kSeed: return "seed";
    case AdaptSource::kRandom: return "random";
  }
  return "?";
}

AdaptSource parse_adapt_source(std::string_view name) {
  if (name == "supernet") return AdaptSource::kSupernet;
  if (name == "seed") return AdaptSource::kSeed;
  if (name == "random") return AdaptSource::kRandom;
  throw ConfigError("unknown adaptation source '" + std::string(name) + "' (expected supernet, seed or random)");
}

RunConfig default_run_config() {
  RunConfig c;
  c.seed_task.family = "stripes";
  c.seed_task.classes = 4;
  c.seed_task.noise = 0.3;
  c.seed_task.size = 640;
  c.seed_task.seed = 100;
  c.target_task.family = "orient_regions";
  c.target_task.classes = 4;
  c.target_task.noise = 0.8;
  c.target_task.size = 512;
  c.target_task.seed = 200;
  c.target_task.context_radius = 5;
  c.seed_train.epochs = 8;
  c.finetune.epochs = 10;
  return c;
}

RunConfig run_config_from_json(const nlohmann::json& doc, RunConfig c) {
  if (!doc.is_object()) throw ConfigError("run config must be a JSON object");
  try {
    for (const auto& [k, v] : doc.items()) {
      if (k == "seed") c.seed = v.get<std::uint64_t>();
      else if (k == "out") c.out = v.get<std::string>();
      else if (k == "seed_checkpoint") c.seed_checkpoint = v.get<std::string>();
      else if (k == "arch") c.arch = v.get<std::string>();
      else if (k == "checkpoint") c.checkpoint = v.get<std::string>();
      else if (k == "resolution") c.resolution = v.get<int>();
      else if (k == "seed_task") c.seed_task = task_spec_from_json(merge_task(c.seed_task, v));
      else if (k == "target_task") c.target_task = task_spec_from_json(merge_task(c.target_task, v));
      else if (k == "seed_arch") {
        for (const auto& [a, x] : v.items()) {
          if (a == "profile") c.seed_arch.profile = x.get<std::string>();
          else if (a == "stage_count") c.seed_arch.stage_count = x.get<std::size_t>();
          else if (a == "depth_scale") c.seed_arch.depth_scale = x.get<double>();
          else if (a == "width_divisor") c.seed_arch.width_divisor = x.get<int>();
          else throw ConfigError("unknown key 'seed_arch." + a + "'");
        }
      } else if (k == "seed_train") c.seed_train = train_config_from(v, c.seed_train, "seed_train");
      else if (k == "finetune") c.finetune = train_config_from(v, c.finetune, "finetune");
      else if (k == "search") c.search = search_config_from_json(v, c.search);
      else if (k == "strategy") c.strategy = parse_strategy(v.get<std::string>());
      else if (k == "adapt_source") c.adapt_source = parse_adapt_source(v.get<std::string>());
      else if (k == "search_init") {
        const auto s = v.get<std::string>();
        if (s != "remap" && s != "random") throw ConfigError("search_init must be 'remap' or 'random'");
        c.search_from_remap = s == "remap";
      } else if (k == "random_search") {
        for (const auto& [a, x] : v.items()) {
          if (a == "samples") c.random_search.samples = x.get<std::size_t>();
          else if (a == "tolerance") c.random_search.tolerance = x.get<double>();
          else if (a == "cost_target") c.random_search.cost_target = x.get<double>();
          else if (a == "train_epochs") c.random_search.train_epochs = x.get<int>();
          else if (a == "max_tries") c.random_search.max_tries = x.get<std::size_t>();
          else throw ConfigError("unknown key 'random_search." + a + "'");
        }
      } else if (k == "explain_remap") c.explain_remap = v.get<bool>();
      else throw ConfigError("unknown config key '" + k + "'");
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("run config: ") + e.what());
  }
  return c;
}

nlohmann::ordered_json run_config_to_json(const RunConfig& c) {
  ojson j;
  j["seed"] = c.seed;
  j["out"] = c.out.generic_string();
  j["seed_checkpoint"] = c.seed_checkpoint.generic_string();
  j["arch"] = c.arch.generic_string();
  j["checkpoint"] = c.checkpoint.generic_string();
  j["resolution"] = c.resolution;
  j["seed_task"] = task_spec_to_json(c.seed_task);
  j["target_task"] = task_spec_to_json(c.target_task);
  j["seed_arch"] = {{"profile", c.seed_arch.profile},
                    {"stage_count", c.seed_arch.stage_count},
                    {"depth_scale", c.seed_arch.depth_scale},
                    {"width_divisor", c.seed_arch.width_divisor}};
  j["seed_train"] = train_config_json(c.seed_train);
  j["search"] = search_config_to_json(c.search);
  j["finetune"] = train_config_json(c.finetune);
  j["strategy"] = std::string(strategy_name(c.strategy));
  j["adapt_source"] = std::string(adapt_source_name(c.adapt_source));
  j["search_init"] = c.search_from_remap ? "remap" : "random";
  j["random_search"] = {{"samples", c.random_search.samples},
                        {"tolerance", c.random_search.tolerance},
                        {"cost_target", c.random_search.cost_target},
                        {"train_epochs", c.random_search.train_epochs},
                        {"max_tries", c.random_search.max_tries}};
  j["explain_remap"] = c.explain_remap;
  return j;
}

RunConfig load_run_config(const fs::path& path) {
  const std::string text = read_text(path);
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config '" + path.string() + "': " + e.what());
  }
  return run_config_from_json(doc);
}

RunConfig resolve(RunConfig c) {
  c.seed_train.seed = derive_seed(c.seed, kSeedTrainStream);
  c.search.seed = derive_seed(c.seed, kSearchStream);
  c.finetune.seed = derive_seed(c.seed, kFinetuneStream);
  if (c.seed_checkpoint.empty()) c.seed_checkpoint = c.out / "seed.ckpt";
  validate_task_spec(c.seed_task);
  validate_task_spec(c.target_task);
  if (family_kind(c.seed_task.family) != TaskKind::kClassification)
    throw ConfigError("seed_task must be a classification family");
  if (family_kind(c.target_task.family) != TaskKind::kDense) throw ConfigError("target_task must be a dense family");
  validate_search_config(c.search);
  return c;
}

ArchDescriptor seed_architecture(const RunConfig& cfg, const HeadSpec& head) {
  DeskSeedOptions o;
  o.profile = cfg.seed_arch.profile;
  o.stage_count = cfg.seed_arch.stage_count;
  o.depth_scale = cfg.seed_arch.depth_scale;
  o.width_divisor = cfg.seed_arch.width_divisor;
  o.head = head;
  return make_mbconv_seed(o);
}

ArchDescriptor seed_shaped_target(const RunConfig& cfg, const ArchDescriptor& seed) {
  ArchDescriptor dense = seed;
  dense.head = HeadSpec{HeadKind::kDense, cfg.target_task.classes};
  return dense;
}

SearchSpace target_space(const RunConfig& cfg, const ArchDescriptor& seed) {
  return build_mbconv_space(seed_shaped_target(cfg, seed), desk_profile(table_profile(cfg.seed_arch.profile), cfg.seed_arch.stage_count,
                                                cfg.seed_arch.depth_scale),
                            cfg.target_task.height, cfg.target_task.width);
}

void save_network(const fs::path& path, const ArchDescriptor& arch, const ParamMap& params, const TaskSpec& task) {
  Checkpoint c;
  c.params = params;
  c.meta["kind"] = "network";
  c.meta["arch"] = ojson::parse(serialize_arch(arch));
  c.meta["task"] = task_spec_to_json(task);
  save_checkpoint(path, c);
}

LoadedNetwork load_network(const fs::path& path) {
  Checkpoint c = load_checkpoint(path);
  if (!c.meta.contains("kind") || c.meta["kind"] != "network")
    throw CheckpointError("'" + path.string() + "' does not hold a network checkpoint");
  LoadedNetwork n;
  n.arch = deserialize_arch(c.meta["arch"].dump());
  n.task = task_spec_from_json(nlohmann::json::parse(c.meta["task"].dump()));
  n.params = std::move(c.params);
  for (const auto& [name, shape] : param_shapes(n.arch))
    if (!n.params.count(name) || n.params.at(name).shape() != shape)
      throw CheckpointError("'" + path.string() + "': parameters do not match the stored architecture");
  mark_trainable(n.params);
  return n;
}

void cmd_train_seed(const RunConfig& cfg, std::ostream& log) {
  guarded(cfg, [&] {
    write_config(cfg);
    const Dataset data = make_seed_task(cfg.seed_task);
    const Splits sp = split_dataset(data);
    const ArchDescriptor arch = seed_architecture(cfg, HeadSpec{HeadKind::kClassification, cfg.seed_task.classes});
    log << "train-seed: " << arch_hash(arch) << ", " << network_cost(arch, {cfg.seed_task.height, cfg.seed_task.width})
        << " MAdds, " << sp.train.size() << " train samples\n";
    write_text(cfg.out / "seed_arch.json", serialize_arch(arch) + "\n");
    FinetuneResult r = finetune_logged(cfg, arch, init_params(arch, derive_seed(cfg.seed, kSeedInitStream)), data, sp,
                                       cfg.seed_train, "seed_curve.csv", log);
    save_network(cfg.seed_checkpoint, arch, r.params, cfg.seed_task);
    ojson summary;
    summary["arch_hash"] = arch_hash(arch);
    summary["val"] = metrics_summary(evaluate(arch, r.params, data, sp.val));
    summary["test"] = metrics_summary(evaluate(arch, r.params, data, sp.test));
    write_text(cfg.out / "summary.json", summary.dump(2) + "\n");
    log << "train-seed: val accuracy " << summary["val"]["accuracy"].get<double>() << "\n";
  });
}

TargetSearch search_target(const RunConfig& cfg, const LoadedNetwork& seed, const SearchObserver& observer) {
  TargetSearch t;
  t.data = make_target_task(cfg.target_task);
  t.splits = split_dataset(t.data);
  t.space = target_space(cfg, seed.arch);
  ParamMap super_params;
  if (cfg.search_from_remap) {
    RemapResult r = remap_seed_to_supernet(seed.arch, seed.params, t.space,
                                           {cfg.strategy, derive_seed(cfg.seed, kHeadInitStream)});
    t.expand_plan = std::move(r.plan);
    super_params = std::move(r.params);
  } else {
    super_params = init_supernet_params(t.space, derive_seed(cfg.seed, kRandomInitStream));
  }
  SuperNet net = make_supernet(t.space, std::move(super_params), derive_seed(cfg.seed, kSupernetStream));
  t.result = run_search(std::move(net), t.data, t.splits.train, cfg.search, observer);
  return t;
}

RemapResult adaptation_init(const RunConfig& cfg, const LoadedNetwork& seed, const TargetSearch& t,
                            const ArchDescriptor& arch, AdaptSource source) {
  switch (source) {
    case AdaptSource::kSupernet: return remap_supernet_to_target(t.space, t.result.net.params, arch);
    case AdaptSource::kSeed:
      return remap_seed_to_target(seed.arch, seed.params, arch, {cfg.strategy, derive_seed(cfg.seed, kHeadInitStream)});
    case AdaptSource::kRandom: break;
  }
  return RemapResult{init_params(arch, derive_seed(cfg.seed, kRandomInitStream)), {}};
}

void cmd_adapt(const RunConfig& cfg, std::ostream& log) {
  guarded(cfg, [&] {
    write_config(cfg);
    const LoadedNetwork seed = load_seed(cfg);
    log << "adapt: searching from " << (cfg.search_from_remap ? "remapped" : "random") << " weights, lambda "
        << cfg.search.lambda_cost << "\n";
    const TargetSearch t = [&] {
      try {
        return search_target(cfg, seed);
      } catch (const SearchDiverged& e) {
        std::ostringstream csv;
        e.trace.write_csv(csv);
        write_text(cfg.out / "search_trace.csv", csv.str());
        throw;
      }
    }();
    if (cfg.explain_remap && cfg.search_from_remap) {
      write_text(cfg.out / "remap_supernet.txt", t.expand_plan.dump());
      log << t.expand_plan.dump();
    }
    const SearchResult& res = t.result;
    {
      std::ostringstream csv;
      res.trace.write_csv(csv);
      write_text(cfg.out / "search_trace.csv", csv.str());
      ojson split{{"train", res.trace.train_indices}, {"val", res.trace.val_indices}};
      write_text(cfg.out / "search_split.json", split.dump() + "\n");
    }
    save_checkpoint(cfg.out / "supernet.ckpt", supernet_checkpoint(res.net));
    write_text(cfg.out / "arch.json", serialize_arch(res.arch) + "\n");
    const Resolution r{cfg.target_task.height, cfg.target_task.width};
    const auto alpha = alpha_values(res.net);
    ojson cost;
    cost["arch"] = ojson::parse(arch_cost_report(res.arch, r));
    cost["space"] = ojson::parse(cost_report(t.space, res.net.costs, &alpha));
    write_text(cfg.out / "cost_report.json", cost.dump(2) + "\n");
    log << "adapt: derived " << arch_hash(res.arch) << " with " << network_cost(res.arch, r) << " MAdds\n";

    RemapResult init = adaptation_init(cfg, seed, t, res.arch, cfg.adapt_source);
    if (cfg.explain_remap && cfg.adapt_source != AdaptSource::kRandom)
      write_text(cfg.out / "remap_target.txt", init.plan.dump());
    const std::string arm = std::string(adapt_source_name(cfg.adapt_source));
    FinetuneResult ft =
        finetune_logged(cfg, res.arch, init.params, t.data, t.splits, cfg.finetune, "finetune_" + arm + ".csv", log);
    save_network(cfg.out / "target.ckpt", res.arch, ft.params, cfg.target_task);

    ojson summary;
    summary["arch_hash"] = arch_hash(res.arch);
    summary["madds"] = network_cost(res.arch, r);
    summary["seed_madds"] = network_cost(seed_shaped_target(cfg, seed.arch), r);
    summary["adapt_source"] = arm;
    summary["search_init"] = cfg.search_from_remap ? "remap" : "random";
    summary["epoch1_train_loss"] = ft.curve.empty() ? 0.0 : ft.curve.front().train_loss;
    summary["val"] = metrics_summary(evaluate(res.arch, ft.params, t.data, t.splits.val));
    summary["test"] = metrics_summary(evaluate(res.arch, ft.params, t.data, t.splits.test));
    write_text(cfg.out / "summary.json", summary.dump(2) + "\n");
    log << "adapt: val metric " << summary["val"]["metric"].get<double>() << "\n";
  });
}

void cmd_random_search(const RunConfig& cfg, std::ostream& log) {
  guarded(cfg, [&] {
    write_config(cfg);
    const LoadedNetwork seed = load_seed(cfg);
    const Dataset data = make_target_task(cfg.target_task);
    const Splits sp = split_dataset(data);
    const SearchSpace space = target_space(cfg, seed.arch);
    const Resolution res{cfg.target_task.height, cfg.target_task.width};
    RandomSearchConfig rc;
    rc.samples = cfg.random_search.samples;
    rc.tolerance = cfg.random_search.tolerance;
    rc.cost_target = cfg.random_search.cost_target > 0
                         ? cfg.random_search.cost_target
                         : static_cast<double>(network_cost(seed_shaped_target(cfg, seed.arch), res));
    rc.max_tries = cfg.random_search.max_tries;
    rc.train = cfg.finetune;
    rc.train.epochs = cfg.random_search.train_epochs;
    rc.remap = RemapOptions{cfg.strategy, derive_seed(cfg.seed, kHeadInitStream)};
    rc.seed = derive_seed(cfg.seed, kRandomSearchStream);
    log << "random-search: " << rc.samples << " samples around " << rc.cost_target << " MAdds\n";
    const RandomSearchResult rs = run_random_search(space, seed.arch, seed.params, data, sp.train, sp.val, rc);
    std::ostringstream csv;
    csv << "index,arch_hash,madds,val_metric\n";
    for (std::size_t i = 0; i < rs.candidates.size(); ++i) {
      char buf[64];
      std::snprintf(buf, sizeof buf, "%.17g", rs.candidates[i].val_metric);
      csv << i << ',' << arch_hash(rs.candidates[i].arch) << ',' << rs.candidates[i].madds << ',' << buf << '\n';
    }
    write_text(cfg.out / "random_search.csv", csv.str());
    const ArchDescriptor& best = rs.candidates[rs.best].arch;
    write_text(cfg.out / "arch.json", serialize_arch(best) + "\n");
    write_text(cfg.out / "cost_report.json", arch_cost_report(best, res) + "\n");
    const ParamMap init = remap_seed_to_target(seed.arch, seed.params, best, rc.remap).params;
    FinetuneResult ft = finetune_logged(cfg, best, init, data, sp, cfg.finetune, "finetune_random_search.csv", log);
    save_network(cfg.out / "target.ckpt", best, ft.params, cfg.target_task);
    ojson summary;
    summary["arch_hash"] = arch_hash(best);
    summary["madds"] = network_cost(best, res);
    summary["cost_target"] = rc.cost_target;
    summary["best_index"] = rs.best;
    summary["val"] = metrics_summary(evaluate(best, ft.params, data, sp.val));
    summary["test"] = metrics_summary(evaluate(best, ft.params, data, sp.test));
    write_text(cfg.out / "summary.json", summary.dump(2) + "\n");
  });
}

void cmd_cost(const RunConfig& cfg, std::ostream& out) {
  if (cfg.arch.empty()) throw ConfigError("cost needs an architecture file (--arch)");
  const ArchDescriptor arch = deserialize_arch(read_text(cfg.arch));
  const int h = cfg.resolution > 0 ? cfg.resolution : cfg.target_task.height;
  const int w = cfg.resolution > 0 ? cfg.resolution : cfg.target_task.width;
  out << arch_cost_report(arch, {h, w}) << "\n";
}

void cmd_remap(const RunConfig& cfg, std::ostream& log) {
  guarded(cfg, [&] {
    if (cfg.arch.empty()) throw ConfigError("remap needs a target architecture file (--arch)");
    write_config(cfg);
    const LoadedNetwork seed = load_seed(cfg);
    const ArchDescriptor arch = deserialize_arch(read_text(cfg.arch));
    const RemapResult r =
        remap_seed_to_target(seed.arch, seed.params, arch, {cfg.strategy, derive_seed(cfg.seed, kHeadInitStream)});
    write_text(cfg.out / "remap_plan.txt", r.plan.dump());
    if (cfg.explain_remap) log << r.plan.dump();
    const TaskSpec& task = arch.head.kind == HeadKind::kDense ? cfg.target_task : cfg.seed_task;
    save_network(cfg.out / "remapped.ckpt", arch, r.params, task);
    log << "remap: " << r.params.size() << " tensors -> " << (cfg.out / "remapped.ckpt").string() << "\n";
  });
}

void cmd_eval(const RunConfig& cfg, std::ostream& out) {
  if (cfg.checkpoint.empty()) throw ConfigError("eval needs a network checkpoint (--checkpoint)");
  LoadedNetwork n = load_network(cfg.checkpoint);
  const Dataset data = make_task(n.task);
  const Splits sp = split_dataset(data);
  ojson doc;
  doc["arch_hash"] = arch_hash(n.arch);
  doc["task"] = task_spec_to_json(n.task);
  doc["val"] = evaluate(n.arch, n.params, data, sp.val).to_json();
  doc["test"] = evaluate(n.arch, n.params, data, sp.test).to_json();
  out << doc.dump(2) << "\n";
}

}  // namespace fna
