#include "ketlab/training.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "json.hpp"

namespace ketlab::training {

using model::FreezeMask;
using model::TransformerLM;
using numerics::Rng;

namespace {

void require(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

}  // namespace

void TaskSpec::validate() const {
  require(std::isfinite(threshold), "TaskSpec: threshold must be finite");
  require(eval_every >= 1, "TaskSpec: eval_every must be >= 1");
  require(max_epochs >= 1 && batch_size >= 1, "TaskSpec: epochs/batch must be >= 1");
  require(lr > 0, "TaskSpec: lr must be > 0");
}

uint64_t TaskSpec::hash() const {
  nlohmann::json j = {{"kind", corpus::task_name(kind)},
                      {"metric", stop_metric == StopMetric::validation_loss_below ? "loss_below"
                                                                                  : "accuracy_above"},
                      {"threshold", threshold},
                      {"eval_every", eval_every},
                      {"max_epochs", max_epochs},
                      {"batch_size", batch_size},
                      {"lr", lr},
                      {"beta1", beta1},
                      {"beta2", beta2},
                      {"weight_decay", weight_decay}};
  return numerics::fnv1a64(j.dump());
}

FreezePolicy FreezePolicy::full() {
  FreezePolicy p;
  p.kind = Kind::full;
  p.train_embeddings = true;
  p.train_head = true;
  return p;
}

FreezePolicy FreezePolicy::threshold_at(int layer) {
  FreezePolicy p;
  p.kind = Kind::threshold;
  p.layer = layer;
  return p;
}

FreezePolicy FreezePolicy::window_at(int center, int size) {
  FreezePolicy p;
  p.kind = Kind::window;
  p.center = center;
  p.size = size;
  return p;
}

std::string FreezePolicy::name() const {
  switch (kind) {
    case Kind::full: return "full";
    case Kind::threshold: return "thr" + std::to_string(layer);
    case Kind::window: return "win" + std::to_string(center) + "x" + std::to_string(size);
    case Kind::explicit_set: {
      std::string s = "set";
      for (int l : layers) s += "_" + std::to_string(l);
      return s;
    }
  }
  return "?";
}

FreezeMask apply_freeze_policy(const TransformerLM& m, const FreezePolicy& policy) {
  const int L = m.config.n_layers;
  std::vector<int> train_layers;
  switch (policy.kind) {
    case FreezePolicy::Kind::full:
      for (int l = 0; l < L; ++l) train_layers.push_back(l);
      break;
    case FreezePolicy::Kind::threshold:
      require(policy.layer >= 0 && policy.layer < L, "freeze policy: threshold layer out of range");
      for (int l = policy.layer; l < L; ++l) train_layers.push_back(l);
      break;
    case FreezePolicy::Kind::window: {
      require(policy.size >= 1 && policy.size % 2 == 1, "freeze policy: window size must be odd");
      require(policy.center >= 0 && policy.center < L, "freeze policy: window center out of range");
      const int half = policy.size / 2;
      for (int l = std::max(0, policy.center - half); l <= std::min(L - 1, policy.center + half); ++l)
        train_layers.push_back(l);
      break;
    }
    case FreezePolicy::Kind::explicit_set:
      for (int l : policy.layers) {
        require(l >= 0 && l < L, "freeze policy: explicit layer out of range");
        train_layers.push_back(l);
      }
      break;
  }

  FreezeMask mask = FreezeMask::all(m, false);
  static const char* fields[] = {"ln1_scale", "ln1_shift", "attn_qkv", "attn_out",
                                 "ln2_scale", "ln2_shift", "mlp_fc",   "mlp_proj"};
  for (int l : train_layers)
    for (const char* f : fields) mask.set(m, model::layer_param_name(l, f), true);
  if (policy.train_embeddings) {
    mask.set(m, "tok_emb", true);
    mask.set(m, "pos_emb", true);
  }
  if (policy.train_head) {
    mask.set(m, "unembed", true);
    mask.set(m, "final_ln_scale", true);
    mask.set(m, "final_ln_shift", true);
  }
  if (mask.count_trainable() == 0) throw std::invalid_argument("freeze policy: empty trainable set");
  return mask;
}

std::string TrainingLog::to_jsonl() const {
  std::ostringstream os;
  for (const Record& r : records) {
    nlohmann::json j = {{"step", r.step},
                        {"epoch", r.epoch},
                        {"val_metric", r.val_metric},
                        {"train_loss", r.train_loss}};
    os << j.dump() << "\n";
  }
  nlohmann::json tail = {{"stop_reason", stop_reason},
                         {"epochs_used", epochs_used},
                         {"stop_step", stop_step}};
  os << tail.dump() << "\n";
  return os.str();
}

bool check_stopping(const TrainingLog& log, const TaskSpec& spec) {
  require(!log.records.empty(), "check_stopping: empty log");
  const double v = log.records.back().val_metric;
  if (spec.stop_metric == StopMetric::validation_loss_below) return v < spec.threshold;
  return v > spec.threshold;
}

double eval_lm_loss(const TransformerLM& m, std::span<const model::LmExample> examples) {
  require(!examples.empty(), "eval_lm_loss: empty evaluation set");
  return model::batch_loss(m, examples);
}

double eval_lm_accuracy(const TransformerLM& m, std::span<const model::LmExample> examples) {
  require(!examples.empty(), "eval_lm_accuracy: empty evaluation set");
  long total = 0, correct = 0;
  for (const model::LmExample& ex : examples) {
    auto fwd = model::forward(m, ex.tokens);
    for (size_t t = 1; t < ex.tokens.size(); ++t) {
      if (ex.loss_mask[t] == 0.0f) continue;
      auto row = fwd.logits.row(static_cast<int>(t) - 1);
      int best = 0;
      for (int v = 1; v < m.config.vocab_size; ++v)
        if (row[v] > row[best]) best = v;
      ++total;
      if (best == ex.tokens[t]) ++correct;
    }
  }
  require(total > 0, "eval_lm_accuracy: no supervised positions");
  return static_cast<double>(correct) / static_cast<double>(total);
}

double eval_cls_accuracy(const TransformerLM& m, const model::ClassifierHead& head,
                         std::span<const model::ClsExample> examples, int eos_id) {
  require(!examples.empty(), "eval_cls_accuracy: empty evaluation set");
  long correct = 0;
  for (const model::ClsExample& ex : examples) {
    auto logits = model::forward_classify(m, head, ex.tokens, eos_id);
    int best = 0;
    for (int v = 1; v < logits.cols; ++v)
      if (logits.at(0, v) > logits.at(0, best)) best = v;
    if (best == ex.label) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(examples.size());
}

namespace {

struct OptimizerState {
  std::vector<std::optional<numerics::AdamState>> per_param;
  long step = 0;
};

void optimizer_step(TransformerLM& m, const model::GradMap& grads, const FreezeMask& mask,
                    OptimizerState& opt, const TaskSpec& spec) {
  ++opt.step;
  for (size_t i = 0; i < m.names.size(); ++i) {
    if (!mask.is_trainable(static_cast<int>(i))) continue;
    const numerics::Matrix& g = grads.grads[i];
    if (g.size() == 0) continue;
    if (!opt.per_param[i]) opt.per_param[i].emplace(m.tensors[i]);
    numerics::adamw_step(m.tensors[i], g, *opt.per_param[i], opt.step, spec.lr, spec.beta1,
                         spec.beta2, 1e-8, spec.weight_decay);
  }
}

}  // namespace

FinetuneResult finetune(TransformerLM& m, const corpus::TaskDataset& data, const TaskSpec& spec,
                        const FreezePolicy& policy, uint64_t seed, const EvalObserver& observer,
                        std::optional<long> max_steps_override) {
  spec.validate();
  require(data.train_size() > 0 && data.val_size() > 0, "finetune: need train and validation splits");
  const bool is_cls = data.kind == TaskKind::classification;

  FreezeMask mask = apply_freeze_policy(m, policy);
  Rng rng(seed);
  std::optional<model::ClassifierHead> head;
  std::optional<numerics::AdamState> head_w_state, head_b_state;
  if (is_cls) {
    head = model::ClassifierHead::init(m.config, 2, rng.substream("head").next_u64());
    head_w_state.emplace(head->weight);
    head_b_state.emplace(head->bias);
  }

  OptimizerState opt;
  opt.per_param.resize(m.names.size());

  TrainingLog log;
  const size_t n_train = data.train_size();
  double interval_loss = 0.0;
  long interval_count = 0;

  auto evaluate = [&](long step) {
    double metric;
    if (is_cls) {
      metric = eval_cls_accuracy(m, *head, data.cls_val, data.eos_id);
    } else if (spec.stop_metric == StopMetric::validation_accuracy_above) {
      metric = eval_lm_accuracy(m, data.val);
    } else {
      metric = eval_lm_loss(m, data.val);
    }
    TrainingLog::Record r;
    r.step = step;
    r.epoch = static_cast<double>(step) * spec.batch_size / static_cast<double>(n_train);
    r.val_metric = metric;
    r.train_loss = interval_count > 0 ? interval_loss / interval_count : 0.0;
    log.records.push_back(r);
    interval_loss = 0.0;
    interval_count = 0;
    if (observer) observer(step, r.epoch, m);
  };

  long step = 0;
  evaluate(0);
  if (!max_steps_override && check_stopping(log, spec)) {
    log.stop_reason = "criterion_met";
    log.stop_step = 0;
    log.epochs_used = 0;
    return {std::move(log), std::move(head)};
  }

  std::vector<size_t> order(n_train);
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (int epoch = 0; epoch < spec.max_epochs; ++epoch) {
    Rng erng = rng.substream("epoch" + std::to_string(epoch));
    erng.shuffle(order);
    for (size_t start = 0; start < order.size(); start += spec.batch_size) {
      const size_t end = std::min(order.size(), start + spec.batch_size);
      if (is_cls) {
        std::vector<model::ClsExample> batch;
        for (size_t i = start; i < end; ++i) batch.push_back(data.cls_train[order[i]]);
        auto res = model::classify_loss_and_grads(m, *head, batch, data.eos_id, mask);
        interval_loss += res.loss;
        ++interval_count;
        ++opt.step;
        for (size_t i = 0; i < m.names.size(); ++i) {
          if (!mask.is_trainable(static_cast<int>(i))) continue;
          const numerics::Matrix& g = res.model_grads.grads[i];
          if (g.size() == 0) continue;
          if (!opt.per_param[i]) opt.per_param[i].emplace(m.tensors[i]);
          numerics::adamw_step(m.tensors[i], g, *opt.per_param[i], opt.step, spec.lr, spec.beta1,
                               spec.beta2, 1e-8, spec.weight_decay);
        }
        numerics::adamw_step(head->weight, res.head_weight_grad, *head_w_state, opt.step, spec.lr,
                             spec.beta1, spec.beta2, 1e-8, spec.weight_decay);
        numerics::adamw_step(head->bias, res.head_bias_grad, *head_b_state, opt.step, spec.lr,
                             spec.beta1, spec.beta2, 1e-8, 0.0);
      } else {
        std::vector<model::LmExample> batch;
        for (size_t i = start; i < end; ++i) batch.push_back(data.train[order[i]]);
        auto [loss, grads] = model::loss_and_grads(m, batch, mask);
        interval_loss += loss;
        ++interval_count;
        optimizer_step(m, grads, mask, opt, spec);
      }
      ++step;

      if (max_steps_override) {
        if (step >= *max_steps_override) {
          evaluate(step);
          log.stop_reason = "step_budget";
          log.stop_step = step;
          log.epochs_used = epoch + 1;
          return {std::move(log), std::move(head)};
        }
        continue;
      }
      if (step % spec.eval_every == 0) {
        evaluate(step);
        if (check_stopping(log, spec)) {
          log.stop_reason = "criterion_met";
          log.stop_step = step;
          log.epochs_used = epoch + 1;
          return {std::move(log), std::move(head)};
        }
      }
    }
  }
  if (max_steps_override) {
    evaluate(step);
    log.stop_reason = "step_budget";
    log.stop_step = step;
    log.epochs_used = spec.max_epochs;
    return {std::move(log), std::move(head)};
  }
  log.stop_reason = "max_epochs";
  log.epochs_used = spec.max_epochs;
  log.stop_step = step;
  throw ConvergenceError("finetune: stopping criterion not met within max_epochs", std::move(log));
}

TrainingLog pretrain(TransformerLM& m, const corpus::World& w,
                     std::span<const corpus::Sentence> corpus_sentences, const PretrainSpec& spec,
                     std::span<const corpus::FactTuple> target_facts, uint64_t seed) {
  require(!corpus_sentences.empty(), "pretrain: empty corpus");
  require(!target_facts.empty(), "pretrain: empty target fact set");

  std::vector<model::LmExample> examples;
  examples.reserve(corpus_sentences.size());
  for (const corpus::Sentence& s : corpus_sentences) {
    model::LmExample ex;
    ex.tokens = s;
    ex.loss_mask.assign(s.size(), 1.0f);
    ex.loss_mask[0] = 0.0f;
    examples.push_back(std::move(ex));
  }

  FreezeMask mask = model::FreezeMask::all(m, true);
  OptimizerState opt;
  opt.per_param.resize(m.names.size());
  TaskSpec opt_spec;  // optimizer hyper carrier
  opt_spec.lr = spec.lr;
  opt_spec.beta1 = spec.beta1;
  opt_spec.beta2 = spec.beta2;
  opt_spec.weight_decay = spec.weight_decay;

  Rng rng(seed);
  TrainingLog log;
  long step = 0;
  double interval_loss = 0.0;
  long interval_count = 0;

  auto retained_fraction = [&]() {
    auto kept = corpus::margin_filter(m, w, target_facts, spec.margin);
    return static_cast<double>(kept.size()) / static_cast<double>(target_facts.size());
  };

  std::vector<size_t> order(examples.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (int epoch = 0; epoch < spec.max_epochs; ++epoch) {
    Rng erng = rng.substream("epoch" + std::to_string(epoch));
    erng.shuffle(order);
    for (size_t start = 0; start < order.size(); start += spec.batch_size) {
      const size_t end = std::min(order.size(), start + spec.batch_size);
      std::vector<model::LmExample> batch;
      for (size_t i = start; i < end; ++i) batch.push_back(examples[order[i]]);
      auto [loss, grads] = model::loss_and_grads(m, batch, mask);
      interval_loss += loss;
      ++interval_count;
      optimizer_step(m, grads, mask, opt, opt_spec);
      ++step;

      if (step % spec.eval_every == 0) {
        TrainingLog::Record r;
        r.step = step;
        r.epoch = static_cast<double>(step) * spec.batch_size / static_cast<double>(examples.size());
        r.val_metric = retained_fraction();
        r.train_loss = interval_count > 0 ? interval_loss / interval_count : 0.0;
        log.records.push_back(r);
        interval_loss = 0.0;
        interval_count = 0;
        if (r.val_metric >= spec.target_retention) {
          log.stop_reason = "criterion_met";
          log.stop_step = step;
          log.epochs_used = epoch + 1;
          return log;
        }
      }
    }
  }
  log.stop_reason = "max_epochs";
  log.epochs_used = spec.max_epochs;
  log.stop_step = step;
  throw ConvergenceError("pretrain: margin retention target not reached", std::move(log));
}

}  // namespace ketlab::training
