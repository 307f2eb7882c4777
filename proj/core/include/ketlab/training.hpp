#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "ketlab/corpus.hpp"
#include "ketlab/model.hpp"
#include "ketlab/rng.hpp"

namespace ketlab::training {

using corpus::TaskKind;

enum class StopMetric { validation_loss_below, validation_accuracy_above };

struct TaskSpec {
  TaskKind kind = TaskKind::unstructured;
  StopMetric stop_metric = StopMetric::validation_loss_below;
  double threshold = 0.0;
  int eval_every = 20;
  int max_epochs = 50;
  int batch_size = 16;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double weight_decay = 0.01;
  void validate() const;
  uint64_t hash() const;  // fairness: identical criteria hash identically
};

struct FreezePolicy {
  enum class Kind { full, threshold, window, explicit_set };
  Kind kind = Kind::full;
  int layer = 0;            // threshold: train layers with index >= layer
  int center = 0, size = 0; // window: [center - size/2, center + size/2], size odd
  std::vector<int> layers;  // explicit_set
  bool train_embeddings = false;
  bool train_head = false;  // unembedding + final layer norm

  static FreezePolicy full();
  static FreezePolicy threshold_at(int layer);
  static FreezePolicy window_at(int center, int size);
  std::string name() const;
};

/// Threshold(L) trains layers with index >= L (strictly-inclusive-of-L,
/// 0-based). Window(c, s) trains layers in [c - s/2, c + s/2] clamped to the
/// valid range. Throws on an empty trainable set.
model::FreezeMask apply_freeze_policy(const model::TransformerLM& m, const FreezePolicy& policy);

struct TrainingLog {
  struct Record {
    long step = 0;
    double epoch = 0.0;
    double val_metric = 0.0;
    double train_loss = 0.0;
  };
  std::vector<Record> records;
  std::string stop_reason;  // "criterion_met" | "max_epochs"
  int epochs_used = 0;
  long stop_step = 0;
  std::string to_jsonl() const;
};

struct ConvergenceError : std::runtime_error {
  TrainingLog log;
  ConvergenceError(const std::string& msg, TrainingLog l)
      : std::runtime_error(msg), log(std::move(l)) {}
};

/// Pure predicate on the last eval record; strict inequality.
bool check_stopping(const TrainingLog& log, const TaskSpec& spec);

/// Called at every evaluation point (including the pre-training step 0 one).
using EvalObserver =
    std::function<void(long step, double epoch, const model::TransformerLM& m)>;

struct FinetuneResult {
  TrainingLog log;
  std::optional<model::ClassifierHead> head;  // classification runs
};

/// AdamW fine-tuning under a freeze policy until the task's stopping
/// criterion crosses its threshold. Evaluates every eval_every steps (plus
/// once before training). Throws ConvergenceError when max_epochs ends
/// without meeting the criterion. An exact step budget (pilot runs) can be
/// set via max_steps_override; the stopping criterion is then ignored.
FinetuneResult finetune(model::TransformerLM& m, const corpus::TaskDataset& data,
                        const TaskSpec& spec, const FreezePolicy& policy, uint64_t seed,
                        const EvalObserver& observer = nullptr,
                        std::optional<long> max_steps_override = std::nullopt);

struct PretrainSpec {
  int batch_size = 32;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double weight_decay = 0.01;
  int max_epochs = 300;
  int eval_every = 250;
  double margin = 0.1;
  double target_retention = 0.95;  // margin-filter fraction to reach
};

/// Next-token training over the corpus until the margin filter retains at
/// least target_retention of target_facts (or max_epochs, which throws).
TrainingLog pretrain(model::TransformerLM& m, const corpus::World& w,
                     std::span<const corpus::Sentence> corpus_sentences,
                     const PretrainSpec& spec, std::span<const corpus::FactTuple> target_facts,
                     uint64_t seed);

double eval_lm_loss(const model::TransformerLM& m, std::span<const model::LmExample> examples);
/// Teacher-forced argmax accuracy at supervised positions.
double eval_lm_accuracy(const model::TransformerLM& m, std::span<const model::LmExample> examples);
double eval_cls_accuracy(const model::TransformerLM& m, const model::ClassifierHead& head,
                         std::span<const model::ClsExample> examples, int eos_id);

}  // namespace ketlab::training
