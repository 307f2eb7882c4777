// ketlab command line: synthetic-world knowledge-edit retention experiments.
//
// Layers are 0-based on the command line and in config files; report files
// carry the same 0-based indices. Exit codes: 0 success, 2 config error,
// 3 when grid cells failed.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>

#include "CLI11.hpp"
#include "ketlab/checkpoint.hpp"
#include "ketlab/runner.hpp"

namespace fs = std::filesystem;
using namespace ketlab;

namespace {

runner::ExperimentConfig load_config(const std::string& config_path, uint64_t seed_override,
                                     bool has_seed) {
  runner::ExperimentConfig cfg = config_path.empty()
                                     ? runner::ExperimentConfig::defaults()
                                     : runner::ExperimentConfig::from_json_file(config_path);
  if (has_seed) cfg.seed = seed_override;
  cfg.validate();
  return cfg;
}

training::FreezePolicy parse_policy(const std::string& s) {
  if (s == "full") return training::FreezePolicy::full();
  if (s.rfind("thr:", 0) == 0) return training::FreezePolicy::threshold_at(std::stoi(s.substr(4)));
  if (s.rfind("win:", 0) == 0) {
    const size_t c = s.find(':', 4);
    if (c != std::string::npos)
      return training::FreezePolicy::window_at(std::stoi(s.substr(4, c - 4)),
                                               std::stoi(s.substr(c + 1)));
  }
  throw runner::ConfigError("bad policy spec '" + s + "' (use full | thr:L | win:C:S)");
}

void write_file(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + p.string());
  out << text;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ketlab: knowledge-edit retention experiments on a synthetic fact world"};
  app.require_subcommand(1);

  std::string config_path;
  std::string out_dir = "runs/default";
  uint64_t seed = 0;
  bool has_seed = false;
  int jobs = 1;
  app.add_option("--config", config_path, "experiment config JSON (strict schema)");
  app.add_option("--out", out_dir, "output directory");
  app.add_option("--seed", seed, "override the config seed")->each([&](const std::string&) {
    has_seed = true;
  });
  app.add_option("--jobs", jobs, "worker threads for grid cells");

  auto* gen_world = app.add_subcommand("gen-world", "generate the synthetic fact world");
  auto* pretrain = app.add_subcommand("pretrain", "pretrain the toy LM on the fact corpus");
  auto* calibrate =
      app.add_subcommand("calibrate", "pilot-run the unedited model to fix stopping thresholds");

  auto* edit = app.add_subcommand("edit", "apply a single knowledge edit");
  std::string edit_method = "rome";
  int edit_layer = 2;
  int edit_fact = 0;
  edit->add_option("--method", edit_method, "ft | rome");
  edit->add_option("--layer", edit_layer, "edit layer (0-based)");
  edit->add_option("--fact", edit_fact, "index into the edit set");

  auto* finetune = app.add_subcommand("finetune", "fine-tune a checkpoint on a downstream task");
  std::string ft_task = "unstructured";
  std::string ft_policy = "full";
  std::string ft_from;
  finetune->add_option("--task", ft_task, "unstructured | structured | classification | sft");
  finetune->add_option("--policy", ft_policy, "full | thr:L | win:C:S");
  finetune->add_option("--from", ft_from, "checkpoint directory (default: pristine pretrain)");

  auto* evaluate = app.add_subcommand("evaluate", "retention report for a checkpoint");
  std::string ev_from;
  evaluate->add_option("--from", ev_from, "checkpoint directory (default: pristine pretrain)");

  auto* run_grid = app.add_subcommand("run-grid", "run the full experiment grid (resumable)");

  auto* report = app.add_subcommand("report", "emit CSV/JSON reports from a completed grid");
  std::string report_kind = "fig2";
  report->add_option("--kind", report_kind, "fig2 | fig3a | fig3b | fig4 | table1 | appc");

  CLI11_PARSE(app, argc, argv);

  try {
    runner::ExperimentConfig cfg = load_config(config_path, seed, has_seed);
    const fs::path out(out_dir);

    if (gen_world->parsed()) {
      runner::prepare_grid(cfg, out, nullptr, runner::PrepStage::world);
      std::printf("world written to %s\n", (out / "world.json").c_str());
      return 0;
    }
    if (pretrain->parsed()) {
      runner::StageTimes times;
      runner::prepare_grid(cfg, out, &times, runner::PrepStage::pretrain);
      std::printf("pretrained checkpoint at %s (%.1fs)\n", (out / "pretrain").c_str(),
                  times.pretrain_s);
      return 0;
    }
    if (calibrate->parsed()) {
      runner::prepare_grid(cfg, out, nullptr, runner::PrepStage::calibrate);
      std::printf("calibration written to %s\n", (out / "calibration.json").c_str());
      return 0;
    }
    if (edit->parsed()) {
      auto ctx = runner::prepare_grid(cfg, out, nullptr, runner::PrepStage::splits);
      if (edit_fact < 0 || edit_fact >= static_cast<int>(ctx.edit_set.size()))
        throw runner::ConfigError("--fact out of range for the edit set");
      editing::EditRequest req;
      req.fact = ctx.edit_set[edit_fact];
      req.method = editing::method_from_name(edit_method);
      req.layer = edit_layer;
      req.hyper = cfg.edit_hyper;
      model::TransformerLM m = ctx.pristine;
      editing::EditOutcome outcome;
      if (req.method == editing::EditMethod::FT) {
        outcome = editing::ft_edit(m, ctx.world, req);
      } else {
        outcome = editing::rome_edit(m, ctx.world, req, ctx.pretrain_corpus,
                                     numerics::Rng(cfg.seed).substream("cli-edit"));
      }
      const fs::path edir = out / ("edit-" + edit_method + "-L" + std::to_string(edit_layer) +
                                   "-f" + std::to_string(edit_fact));
      model::save_checkpoint_dir(m, edir);
      write_file(edir / "outcome.json", outcome.to_json(req));
      std::printf("edit %s: success=%d steps=%d post_prob=%.4f -> %s\n", edit_method.c_str(),
                  outcome.success ? 1 : 0, outcome.steps_used, outcome.post_prob,
                  edir.c_str());
      return 0;
    }
    if (finetune->parsed()) {
      auto ctx = runner::prepare_grid(cfg, out);
      corpus::TaskKind task = corpus::task_from_name(ft_task);
      if (!ctx.datasets.count(task))
        throw runner::ConfigError("task not in the configured task list: " + ft_task);
      model::TransformerLM m =
          ft_from.empty() ? ctx.pristine : model::load_checkpoint_dir(ft_from);
      auto res = training::finetune(m, ctx.datasets.at(task), ctx.task_specs.at(task),
                                    parse_policy(ft_policy),
                                    numerics::Rng(cfg.seed).substream("cli-finetune").next_u64());
      const fs::path fdir = out / ("finetune-" + ft_task + "-" + parse_policy(ft_policy).name());
      model::save_checkpoint_dir(m, fdir);
      write_file(fdir / "train_log.jsonl", res.log.to_jsonl());
      std::printf("finetune %s: %s at step %ld (%d epochs) -> %s\n", ft_task.c_str(),
                  res.log.stop_reason.c_str(), res.log.stop_step, res.log.epochs_used,
                  fdir.c_str());
      return 0;
    }
    if (evaluate->parsed()) {
      auto ctx = runner::prepare_grid(cfg, out, nullptr, runner::PrepStage::splits);
      model::TransformerLM m =
          ev_from.empty() ? ctx.pristine : model::load_checkpoint_dir(ev_from);
      auto rep = evaluation::make_retention_report(m, ctx.world, ctx.edit_set, ctx.intrinsic_set,
                                                   ev_from.empty() ? "pristine" : ev_from);
      write_file(out / "retention.json", rep.to_json());
      write_file(out / "retention.csv", rep.to_csv());
      std::printf("edited (counterfactual targets): %.4f  intrinsic (true targets): %.4f\n",
                  rep.edited_rate, rep.intrinsic_rate);
      return 0;
    }
    if (run_grid->parsed()) {
      runner::StageTimes times;
      auto record = runner::run_grid(cfg, out, jobs, &times);
      std::printf(
          "grid complete: %zu cells (%d executed, %d skipped, %d failed)\n"
          "stage seconds: pretrain=%.1f datasets=%.1f calibrate=%.1f cells=%.1f (max %.1f)\n",
          record.cells.size(), record.executed, record.skipped, record.failures, times.pretrain_s,
          times.datasets_s, times.calibrate_s, times.cells_core_s, times.max_cell_s);
      return record.failures > 0 ? 3 : 0;
    }
    if (report->parsed()) {
      runner::emit_report(out, runner::report_kind_from_name(report_kind));
      std::printf("report %s written under %s\n", report_kind.c_str(),
                  (out / "reports").c_str());
      return 0;
    }
  } catch (const runner::ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
