#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "ketlab/corpus.hpp"
#include "ketlab/editing.hpp"
#include "ketlab/evaluation.hpp"
#include "ketlab/model.hpp"
#include "ketlab/training.hpp"

namespace ketlab::runner {

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct WorldConfig {
  corpus::WorldSizes sizes;
  int pretrain_facts = 240;  // facts whose paraphrases enter the pretraining corpus
  int n_edit = 50;
  int n_intrinsic = 100;
  double margin = 0.1;
};

struct PretrainConfig {
  training::PretrainSpec spec;
  int paraphrases_per_fact = 4;
  double filler_ratio = 0.3;
};

struct TaskConfig {
  int train = 0;
  int val = 0;
  training::TaskSpec spec;  // threshold filled by calibration unless overridden
  long pilot_steps = 100;
  std::optional<double> threshold_override;
};

struct ExperimentConfig {
  uint64_t seed = 1;
  model::ModelConfig model;  // vocab_size derived from the world
  WorldConfig world;
  PretrainConfig pretrain;
  std::vector<editing::EditMethod> methods;
  std::vector<int> edit_layers;
  editing::EditHyperparams edit_hyper;
  std::vector<corpus::TaskKind> tasks;
  std::vector<training::FreezePolicy> policies;
  int replicates = 10;
  std::vector<corpus::TaskKind> distribution_tasks;
  bool distribution_intrinsic = false;
  bool scrub_counterfactuals = true;
  int case_study_k = 3;
  std::map<corpus::TaskKind, TaskConfig> task_configs;

  static ExperimentConfig defaults();
  /// Strict parse: unknown keys anywhere are a ConfigError.
  static ExperimentConfig from_json_text(const std::string& text);
  static ExperimentConfig from_json_file(const std::filesystem::path& path);
  std::string to_json() const;  // canonical form
  uint64_t hash() const;
  void validate() const;
};

struct CellKey {
  std::string method;  // "ft" | "rome" | "none" (control)
  int layer = -1;
  corpus::TaskKind task = corpus::TaskKind::unstructured;
  std::string policy_name;
  int policy_index = -1;  // -1 for control (always the full policy)
  int rep = 0;
  std::string id() const;
};

struct CellResult {
  CellKey key;
  int seq = 0;  // deterministic position in the sorted grid enumeration
  int fact_id = -1;
  bool ok = false;
  std::string error;
  std::optional<editing::EditOutcome> edit;
  double post_edit_edited = 0.0, post_edit_intrinsic = 0.0;
  double post_ft_edited = 0.0, post_ft_intrinsic = 0.0;
  long ft_steps = 0;
  int ft_epochs = 0;
  std::string stop_reason;
  double final_metric = 0.0;
  uint64_t task_spec_hash = 0;
  double cell_seconds = 0.0;  // stderr diagnostics only, never serialized
};

struct RunRecord {
  uint64_t config_hash = 0;
  std::vector<CellResult> cells;  // sorted by cell id
  int executed = 0;
  int skipped = 0;
  int failures = 0;
};

struct StageTimes {
  double pretrain_s = 0.0;
  double calibrate_s = 0.0;
  double datasets_s = 0.0;
  double cells_core_s = 0.0;  // summed per-cell wall time
  double max_cell_s = 0.0;
};

/// Prepared shared state for a grid (world, pristine checkpoint, splits,
/// datasets, calibrated task specs). All stages are persisted under `out`
/// and reloaded when their stamps match.
struct GridContext {
  corpus::World world;
  model::TransformerLM pristine;
  std::vector<corpus::FactTuple> edit_set, intrinsic_set;
  std::vector<corpus::Sentence> pretrain_corpus;
  std::map<corpus::TaskKind, corpus::TaskDataset> datasets;
  std::map<corpus::TaskKind, training::TaskSpec> task_specs;  // calibrated
};

enum class PrepStage { world, pretrain, splits, datasets, calibrate };

GridContext prepare_grid(const ExperimentConfig& cfg, const std::filesystem::path& out,
                         StageTimes* times = nullptr, PrepStage upto = PrepStage::calibrate);

std::vector<CellKey> enumerate_cells(const ExperimentConfig& cfg);

RunRecord run_grid(const ExperimentConfig& cfg, const std::filesystem::path& out, int jobs,
                   StageTimes* times = nullptr);

/// Pilot fine-tunes the unedited model for each task at its fixed step
/// budget; the achieved validation metric becomes the stopping threshold.
std::map<corpus::TaskKind, double> calibrate_thresholds(const ExperimentConfig& cfg,
                                                        const model::TransformerLM& pristine,
                                                        const GridContext& ctx, uint64_t seed);

enum class ReportKind { fig2, fig3a, fig3b, fig4, table1, appc };
ReportKind report_kind_from_name(const std::string& s);
std::string report_kind_name(ReportKind k);

/// Emits reports/<kind>.csv (aggregate) and reports/<kind>_cells.csv (raw
/// rows the aggregate is recomputable from) plus reports/<kind>.json.
void emit_report(const std::filesystem::path& out_dir, ReportKind kind);

RunRecord load_record(const std::filesystem::path& out_dir);

}  // namespace ketlab::runner
