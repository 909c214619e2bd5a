// ctxssl gen-world|train|eval|ablate --config <path> [--key value ...]
//
// Exit codes: 0 success, 2 config error, 3 numeric failure, 4 artifact mismatch.

#include <atomic>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <mutex>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>

#include "ctxssl/config.hpp"
#include "ctxssl/evaluation.hpp"
#include "ctxssl/synthetic_world.hpp"
#include "ctxssl/training.hpp"

namespace fs = std::filesystem;
using namespace ctxssl;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitNumeric = 3;
constexpr int kExitMismatch = 4;

int exit_code_for(const Error& e) {
  switch (e.kind()) {
    case ErrorKind::Numeric: return kExitNumeric;
    case ErrorKind::Mismatch:
    case ErrorKind::Io:
    case ErrorKind::Shape: return kExitMismatch;
    case ErrorKind::Config:
    case ErrorKind::Domain: return kExitConfig;
  }
  return kExitConfig;
}

/// "--key value", "--key=value" and bare "--flag" (= true).
std::vector<std::pair<std::string, std::string>> parse_overrides(const std::vector<std::string>& args) {
  std::vector<std::pair<std::string, std::string>> out;
  for (std::size_t i = 0; i < args.size(); ++i) {
    const std::string& a = args[i];
    require(a.rfind("--", 0) == 0 && a.size() > 2, ErrorKind::Config, "unexpected argument '" + a + "'");
    std::string key = a.substr(2);
    if (const auto eq = key.find('='); eq != std::string::npos) {
      out.emplace_back(key.substr(0, eq), key.substr(eq + 1));
    } else if (i + 1 < args.size() && args[i + 1].rfind("--", 0) != 0) {
      out.emplace_back(key, args[++i]);
    } else {
      out.emplace_back(key, "true");
    }
  }
  return out;
}

RunConfig load_run_config(const std::string& config_path, const std::vector<std::string>& extras) {
  const json file_cfg = config_path.empty() ? json() : read_config_file(config_path);
  return resolve_config(file_cfg, parse_overrides(extras));
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  require(static_cast<bool>(os), ErrorKind::Io, "cannot write " + path.string());
  os << text;
}

World load_world_for(const RunConfig& rc) {
  require(fs::exists(rc.paths.world), ErrorKind::Config, "world file not found: " + rc.paths.world);
  return load_world(rc.paths.world);
}

void write_report(const EvalReport& rep, const fs::path& dir, bool svg) {
  write_text(dir / "report.json", json(rep).dump(2) + "\n");
  write_text(dir / "report.csv", report_csv(rep));
  if (svg)
    for (const auto& [name, text] : report_charts(rep)) write_text(dir / ("chart_" + name + ".svg"), text);
}

// ---------------------------------------------------------------------------

int cmd_gen_world(const RunConfig& rc) {
  const World world = make_world(rc.world);
  if (const fs::path parent = fs::path(rc.paths.world).parent_path(); !parent.empty())
    fs::create_directories(parent);
  save_world(world, rc.paths.world);
  json resolved = rc;
  write_text(fs::path(rc.paths.world).string() + ".config.json", resolved.dump(2) + "\n");
  std::printf("world: %s\n  objects %d (%d classes x %d)\n  prototype_dim %d  obs_dim %d  render_hidden %d\n"
              "  seed %llu  groups",
              rc.paths.world.c_str(), world.n_objects(), rc.world.n_classes, rc.world.objects_per_class,
              rc.world.prototype_dim, rc.world.obs_dim, rc.world.render_hidden,
              static_cast<unsigned long long>(rc.world.seed));
  for (GroupId g : rc.world.active_groups) std::printf(" %s", std::string(group_name(g)).c_str());
  std::printf("\n  config hash %016llx\n", static_cast<unsigned long long>(world.config_hash()));
  return kExitOk;
}

/// Trains `rc` to completion in `rc.paths.out_dir`, resuming when asked and a
/// checkpoint exists. Returns the final state.
TrainState run_training(const RunConfig& rc, const World& world, bool verbose) {
  const fs::path out(rc.paths.out_dir);
  fs::create_directories(out);
  const fs::path ckpt = rc.checkpoint_path();
  TrainState state;
  bool resumed = false;
  if (rc.paths.resume && fs::exists(ckpt)) {
    state = load_checkpoint(ckpt);
    require(state.world_hash == world.config_hash(), ErrorKind::Mismatch,
            "checkpoint was trained on a different world");
    TrainConfig a = state.train_cfg, b = rc.train;
    a.steps = b.steps = 0;
    require(json(a) == json(b), ErrorKind::Mismatch, "resume: training config differs from the checkpoint");
    state.train_cfg.steps = rc.train.steps;
    resumed = true;
  } else {
    state = make_train_state(world, rc.model, rc.train);
  }
  json resolved = rc;
  resolved["world"] = world.config();
  resolved["model"] = state.model.config();
  resolved["audit"] = {{"effective_lambda", rc.train.effective_lambda()}, {"world_hash", world.config_hash()}};
  write_text(out / "resolved_config.json", resolved.dump(2) + "\n");

  TrainLog log(out / "train_log.jsonl", resumed);
  std::size_t nonzero_actions = 0;
  const std::int64_t every = rc.paths.checkpoint_every;
  try {
    train_until(state, world, rc.train.steps, [&](const TrainState& s, const StepInfo& info) {
      log.write(s, info);
      nonzero_actions += info.nonzero_actions;
      if (every > 0 && s.step % every == 0 && s.step < rc.train.steps) save_checkpoint(s, ckpt);
      if (verbose && (s.step % 100 == 0 || s.step == rc.train.steps))
        std::printf("step %lld  contrastive %.4f  predictor %.4f  total %.4f\n", static_cast<long long>(s.step),
                    info.loss.contrastive, info.loss.predictor, info.loss.total);
    });
  } catch (const Error& e) {
    if (e.kind() == ErrorKind::Numeric) {
      write_text(out / "failure.json", json{{"step", state.step}, {"error", e.what()}}.dump(2) + "\n");
      save_checkpoint(state, out / "failure_state.bin");
    }
    throw;
  }
  save_checkpoint(state, ckpt);
  resolved["audit"]["nonzero_actions"] = nonzero_actions;
  write_text(out / "resolved_config.json", resolved.dump(2) + "\n");
  return state;
}

int cmd_train(const RunConfig& rc) {
  const World world = load_world_for(rc);
  run_training(rc, world, true);
  std::printf("checkpoint: %s\n", rc.checkpoint_path().string().c_str());
  return kExitOk;
}

int cmd_eval(const RunConfig& rc) {
  const World world = load_world_for(rc);
  const fs::path ckpt = rc.checkpoint_path();
  require(fs::exists(ckpt), ErrorKind::Config, "checkpoint not found: " + ckpt.string());
  const TrainState state = load_checkpoint(ckpt);
  const EvalReport rep = full_report(state, world, rc.probe);
  const fs::path out(rc.paths.out_dir);
  json resolved = rc;
  resolved["world"] = world.config();
  write_text(out / "eval_config.json", resolved.dump(2) + "\n");
  write_report(rep, out, rc.paths.svg);
  std::printf("report: %s\n", (out / "report.json").string().c_str());
  std::fputs(report_csv(rep).c_str(), stdout);
  return kExitOk;
}

struct AblateCell {
  double p = 0, lambda = 0;
  std::uint64_t seed = 0;
  RunConfig rc;
  std::string id;
  std::string status;
  EvalReport report;
};

int cmd_ablate(const RunConfig& rc) {
  const World world = load_world_for(rc);
  const std::vector<double> lambdas =
      rc.ablate.lambda_grid.empty() ? std::vector<double>{rc.train.loss.lambda} : rc.ablate.lambda_grid;
  std::vector<AblateCell> cells;
  for (double lambda : lambdas)
    for (double p : rc.ablate.p_grid)
      for (std::uint64_t seed : rc.ablate.seeds) {
        AblateCell c;
        c.p = p;
        c.lambda = lambda;
        c.seed = seed;
        c.rc = rc;
        c.rc.train.mask.p = p;
        c.rc.train.loss.lambda = lambda;
        c.rc.train.seed = seed;
        c.rc.paths.resume = true;
        json key = {{"world", world.config()}, {"model", c.rc.model}, {"train", c.rc.train}, {"probe", c.rc.probe}};
        char buf[17];
        std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(config_hash(key)));
        c.id = buf;
        c.rc.paths.out_dir = (fs::path(rc.paths.out_dir) / "cells" / c.id).string();
        c.rc.paths.checkpoint.clear();
        cells.push_back(std::move(c));
      }

  int threads = 1;
  if (const char* env = std::getenv("CTXSSL_THREADS")) threads = std::max(1, std::atoi(env));
  threads = std::min<int>(threads, static_cast<int>(cells.size()));
  std::atomic<std::size_t> next{0};
  std::mutex io;
  auto worker = [&] {
    for (std::size_t i = next++; i < cells.size(); i = next++) {
      AblateCell& c = cells[i];
      const fs::path report = fs::path(c.rc.paths.out_dir) / "report.json";
      try {
        if (fs::exists(report)) {
          c.report = json::parse(std::ifstream(report)).get<EvalReport>();
          c.status = "cached";
        } else {
          const TrainState st = run_training(c.rc, world, false);
          c.report = full_report(st, world, c.rc.probe);
          write_report(c.report, c.rc.paths.out_dir, false);
          c.status = "ok";
        }
      } catch (const std::exception& e) {
        c.status = std::string("failed: ") + e.what();
      }
      std::lock_guard<std::mutex> lock(io);
      std::printf("cell p=%g lambda=%g seed=%llu [%s] %s\n", c.p, c.lambda, static_cast<unsigned long long>(c.seed),
                  c.id.c_str(), c.status.c_str());
      std::fflush(stdout);
    }
  };
  std::vector<std::thread> pool;
  for (int t = 1; t < threads; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();

  std::ostringstream csv;
  csv.precision(17);
  csv << "p,lambda,seed,cell,status,context_group,mode,length,metric,value\n";
  int ok = 0;
  for (const auto& c : cells) {
    const bool good = c.status == "ok" || c.status == "cached";
    ok += good;
    const std::string head = [&] {
      std::ostringstream h;
      h.precision(17);
      h << c.p << ',' << c.lambda << ',' << c.seed << ',' << c.id << ',' << (good ? "ok" : "failed");
      return h.str();
    }();
    if (!good) {
      csv << head << ",,,,,\n";
      continue;
    }
    for (const auto& cell : c.report.cells)
      for (const auto& [name, v] : cell.metrics)
        csv << head << ',' << group_name(cell.context_group) << ',' << mode_name(cell.mode) << ',' << cell.length
            << ',' << name << ',' << v << '\n';
    csv << head << ",,,,classification_top1," << c.report.classification_top1 << '\n';
  }
  const fs::path out(rc.paths.out_dir);
  json resolved = rc;
  resolved["world"] = world.config();
  write_text(out / "ablate_config.json", resolved.dump(2) + "\n");
  write_text(out / "ablation.csv", csv.str());
  std::printf("ablation: %s (%d/%zu cells ok)\n", (out / "ablation.csv").string().c_str(), ok, cells.size());
  return ok > 0 ? kExitOk : kExitNumeric;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Contextual self-supervised learning on a synthetic transformation world"};
  app.require_subcommand(1);
  std::string config_path;
  struct Sub {
    const char* name;
    const char* help;
    int (*fn)(const RunConfig&);
  };
  const Sub subs[] = {{"gen-world", "generate and save a synthetic world", cmd_gen_world},
                      {"train", "train a model on a saved world", cmd_train},
                      {"eval", "evaluate a checkpoint and write reports", cmd_eval},
                      {"ablate", "train and evaluate a grid over mask p and lambda", cmd_ablate}};
  std::vector<CLI::App*> apps;
  for (const auto& s : subs) {
    CLI::App* sub = app.add_subcommand(s.name, s.help);
    sub->add_option("--config", config_path, "JSON run config");
    sub->allow_extras();
    sub->footer("Any config key can be overridden as --section.key value (e.g. --train.steps 10).");
    apps.push_back(sub);
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitConfig;
  }
  for (std::size_t i = 0; i < apps.size(); ++i) {
    if (!apps[i]->parsed()) continue;
    try {
      const RunConfig rc = load_run_config(config_path, apps[i]->remaining());
      return subs[i].fn(rc);
    } catch (const Error& e) {
      std::fprintf(stderr, "error: %s\n", e.what());
      return exit_code_for(e);
    } catch (const std::exception& e) {
      std::fprintf(stderr, "error: %s\n", e.what());
      return kExitConfig;
    }
  }
  return kExitConfig;
}
