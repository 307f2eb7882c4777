#include "ketlab/runner.hpp"

#include <atomic>
#include <chrono>
#include <fstream>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include "json.hpp"
#include "ketlab/checkpoint.hpp"

namespace ketlab::runner {

using corpus::FactTuple;
using corpus::TaskKind;
using corpus::World;
using editing::EditMethod;
using model::TransformerLM;
using nlohmann::json;
using numerics::Rng;
using training::FreezePolicy;
using training::TaskSpec;

namespace fs = std::filesystem;

namespace {

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

void check_keys(const json& j, std::initializer_list<const char*> allowed,
                const std::string& ctx) {
  if (!j.is_object()) throw ConfigError("config section '" + ctx + "' must be an object");
  for (const auto& [key, value] : j.items()) {
    (void)value;
    bool ok = false;
    for (const char* a : allowed)
      if (key == a) {
        ok = true;
        break;
      }
    if (!ok) throw ConfigError("unknown config key '" + key + "' in " + ctx);
  }
}

void atomic_write_text(const fs::path& path, const std::string& content) {
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open for write: " + tmp.string());
    out << content;
  }
  fs::rename(tmp, path);
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open: " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::string hex64(uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

bool stamp_matches(const fs::path& p, uint64_t hash) {
  if (!fs::exists(p)) return false;
  try {
    json j = json::parse(read_text(p));
    return j.at("hash").get<std::string>() == hex64(hash);
  } catch (...) {
    return false;
  }
}

void write_stamp(const fs::path& p, uint64_t hash) {
  json j = {{"hash", hex64(hash)}};
  atomic_write_text(p, j.dump() + "\n");
}

json policy_to_json(const FreezePolicy& p) {
  json j;
  switch (p.kind) {
    case FreezePolicy::Kind::full: j["kind"] = "full"; break;
    case FreezePolicy::Kind::threshold:
      j["kind"] = "threshold";
      j["layer"] = p.layer;
      break;
    case FreezePolicy::Kind::window:
      j["kind"] = "window";
      j["center"] = p.center;
      j["size"] = p.size;
      break;
    case FreezePolicy::Kind::explicit_set:
      j["kind"] = "explicit";
      j["layers"] = p.layers;
      break;
  }
  if (p.train_embeddings) j["train_embeddings"] = true;
  if (p.train_head) j["train_head"] = true;
  return j;
}

FreezePolicy policy_from_json(const json& j) {
  check_keys(j, {"kind", "layer", "center", "size", "layers", "train_embeddings", "train_head"},
             "policy");
  const std::string kind = j.at("kind").get<std::string>();
  FreezePolicy p;
  if (kind == "full") {
    p = FreezePolicy::full();
  } else if (kind == "threshold") {
    p = FreezePolicy::threshold_at(j.at("layer").get<int>());
  } else if (kind == "window") {
    p = FreezePolicy::window_at(j.at("center").get<int>(), j.at("size").get<int>());
  } else if (kind == "explicit") {
    p.kind = FreezePolicy::Kind::explicit_set;
    p.layers = j.at("layers").get<std::vector<int>>();
  } else {
    throw ConfigError("unknown policy kind: " + kind);
  }
  if (j.contains("train_embeddings")) p.train_embeddings = j.at("train_embeddings").get<bool>();
  if (j.contains("train_head")) p.train_head = j.at("train_head").get<bool>();
  return p;
}

training::StopMetric default_metric(TaskKind k) {
  switch (k) {
    case TaskKind::unstructured:
    case TaskKind::sft: return training::StopMetric::validation_loss_below;
    case TaskKind::structured:
    case TaskKind::classification: return training::StopMetric::validation_accuracy_above;
  }
  throw std::logic_error("bad task kind");
}

TaskConfig default_task_config(TaskKind k) {
  TaskConfig t;
  t.spec.kind = k;
  t.spec.stop_metric = default_metric(k);
  t.spec.batch_size = 16;
  t.spec.lr = 1e-3;
  t.spec.weight_decay = 0.01;
  t.spec.beta1 = 0.9;
  t.spec.beta2 = 0.999;
  switch (k) {
    case TaskKind::unstructured:
      t.train = 2000;
      t.val = 100;
      t.spec.eval_every = 20;
      t.spec.max_epochs = 40;
      t.pilot_steps = 120;
      break;
    case TaskKind::structured:
      t.train = 300;
      t.val = 30;
      t.spec.eval_every = 10;
      t.spec.max_epochs = 80;
      t.pilot_steps = 100;
      break;
    case TaskKind::classification:
      t.train = 1000;
      t.val = 50;
      t.spec.eval_every = 10;
      t.spec.max_epochs = 40;
      t.pilot_steps = 60;
      break;
    case TaskKind::sft:
      t.train = 1000;
      t.val = 60;
      t.spec.eval_every = 20;
      t.spec.max_epochs = 60;
      t.pilot_steps = 100;
      break;
  }
  return t;
}

json task_config_to_json(const TaskConfig& t) {
  json j = {{"train", t.train},
            {"val", t.val},
            {"batch_size", t.spec.batch_size},
            {"lr", t.spec.lr},
            {"weight_decay", t.spec.weight_decay},
            {"eval_every", t.spec.eval_every},
            {"max_epochs", t.spec.max_epochs},
            {"pilot_steps", t.pilot_steps}};
  if (t.threshold_override) j["threshold_override"] = *t.threshold_override;
  return j;
}

TaskConfig task_config_from_json(TaskKind k, const json& j) {
  check_keys(j,
             {"train", "val", "batch_size", "lr", "weight_decay", "eval_every", "max_epochs",
              "pilot_steps", "threshold_override"},
             "task_configs." + corpus::task_name(k));
  TaskConfig t = default_task_config(k);
  if (j.contains("train")) t.train = j.at("train").get<int>();
  if (j.contains("val")) t.val = j.at("val").get<int>();
  if (j.contains("batch_size")) t.spec.batch_size = j.at("batch_size").get<int>();
  if (j.contains("lr")) t.spec.lr = j.at("lr").get<double>();
  if (j.contains("weight_decay")) t.spec.weight_decay = j.at("weight_decay").get<double>();
  if (j.contains("eval_every")) t.spec.eval_every = j.at("eval_every").get<int>();
  if (j.contains("max_epochs")) t.spec.max_epochs = j.at("max_epochs").get<int>();
  if (j.contains("pilot_steps")) t.pilot_steps = j.at("pilot_steps").get<long>();
  if (j.contains("threshold_override"))
    t.threshold_override = j.at("threshold_override").get<double>();
  return t;
}

}  // namespace

ExperimentConfig ExperimentConfig::defaults() {
  ExperimentConfig c;
  c.seed = 1;
  c.model = model::ModelConfig{};  // vocab filled later
  c.world.sizes = corpus::WorldSizes{10, 40, 360, 360, 5};
  c.world.pretrain_facts = 240;
  c.world.n_edit = 50;
  c.world.n_intrinsic = 100;
  c.world.margin = 0.1;
  c.pretrain.spec = training::PretrainSpec{};
  c.pretrain.spec.eval_every = 150;
  c.pretrain.spec.max_epochs = 400;
  c.pretrain.paraphrases_per_fact = 4;
  c.pretrain.filler_ratio = 0.3;
  c.methods = {EditMethod::FT, EditMethod::ROME};
  c.edit_layers = {2};
  c.tasks = {TaskKind::unstructured, TaskKind::structured, TaskKind::classification,
             TaskKind::sft};
  c.policies = {FreezePolicy::full(), FreezePolicy::threshold_at(6),
                FreezePolicy::window_at(6, 5)};
  c.replicates = 10;
  c.distribution_tasks = {TaskKind::unstructured};
  for (TaskKind k : corpus::kAllTasks) c.task_configs[k] = default_task_config(k);
  return c;
}

void ExperimentConfig::validate() const {
  if (methods.empty()) throw ConfigError("edit.methods must be non-empty");
  if (edit_layers.empty()) throw ConfigError("edit.layers must be non-empty");
  if (tasks.empty()) throw ConfigError("tasks must be non-empty");
  if (policies.empty()) throw ConfigError("policies must be non-empty");
  if (replicates < 1) throw ConfigError("replicates must be >= 1");
  for (int l : edit_layers)
    if (l < 0 || l >= model.n_layers) throw ConfigError("edit layer out of range");
  for (TaskKind k : tasks)
    if (!task_configs.count(k)) throw ConfigError("missing task_configs for " + corpus::task_name(k));
  edit_hyper.validate();
}

std::string ExperimentConfig::to_json() const {
  json j;
  j["seed"] = seed;
  j["model"] = {{"n_layers", model.n_layers},     {"d_model", model.d_model},
                {"n_heads", model.n_heads},       {"d_ff", model.d_ff},
                {"max_seq_len", model.max_seq_len}};
  j["world"] = {{"categories", world.sizes.categories},
                {"objects_per_category", world.sizes.objects_per_category},
                {"subjects", world.sizes.subjects},
                {"facts", world.sizes.facts},
                {"paraphrases_per_relation", world.sizes.paraphrases_per_relation},
                {"pretrain_facts", world.pretrain_facts},
                {"n_edit", world.n_edit},
                {"n_intrinsic", world.n_intrinsic},
                {"margin", world.margin}};
  j["pretrain"] = {{"batch_size", pretrain.spec.batch_size},
                   {"lr", pretrain.spec.lr},
                   {"weight_decay", pretrain.spec.weight_decay},
                   {"max_epochs", pretrain.spec.max_epochs},
                   {"eval_every", pretrain.spec.eval_every},
                   {"target_retention", pretrain.spec.target_retention},
                   {"paraphrases_per_fact", pretrain.paraphrases_per_fact},
                   {"filler_ratio", pretrain.filler_ratio}};
  json methods_j = json::array();
  for (EditMethod m : methods) methods_j.push_back(editing::method_name(m));
  j["edit"] = {{"methods", methods_j},
               {"layers", edit_layers},
               {"ft",
                {{"lr", edit_hyper.ft.lr},
                 {"max_steps", edit_hyper.ft.max_steps},
                 {"weight_decay", edit_hyper.ft.weight_decay},
                 {"early_stop_loss", edit_hyper.ft.early_stop_loss}}},
               {"rome",
                {{"v_lr", edit_hyper.rome.v_lr},
                 {"v_max_steps", edit_hyper.rome.v_max_steps},
                 {"v_weight_decay", edit_hyper.rome.v_weight_decay},
                 {"kl_factor", edit_hyper.rome.kl_factor},
                 {"covariance_samples", edit_hyper.rome.covariance_samples},
                 {"covariance_jitter", edit_hyper.rome.covariance_jitter},
                 {"key_prefixes", edit_hyper.rome.key_prefixes}}}};
  json tasks_j = json::array();
  for (TaskKind k : tasks) tasks_j.push_back(corpus::task_name(k));
  j["tasks"] = tasks_j;
  json tconf;
  for (const auto& [k, t] : task_configs) tconf[corpus::task_name(k)] = task_config_to_json(t);
  j["task_configs"] = tconf;
  json pol = json::array();
  for (const FreezePolicy& p : policies) pol.push_back(policy_to_json(p));
  j["policies"] = pol;
  j["replicates"] = replicates;
  json dist = json::array();
  for (TaskKind k : distribution_tasks) dist.push_back(corpus::task_name(k));
  j["distribution_tasks"] = dist;
  j["distribution_intrinsic"] = distribution_intrinsic;
  j["scrub_counterfactuals"] = scrub_counterfactuals;
  j["case_study_k"] = case_study_k;
  return j.dump(2) + "\n";
}

uint64_t ExperimentConfig::hash() const { return numerics::fnv1a64(to_json()); }

ExperimentConfig ExperimentConfig::from_json_text(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const std::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  check_keys(j,
             {"seed", "model", "world", "pretrain", "edit", "tasks", "task_configs", "policies",
              "replicates", "distribution_tasks", "distribution_intrinsic",
              "scrub_counterfactuals", "case_study_k"},
             "top level");
  ExperimentConfig c = defaults();
  if (j.contains("seed")) c.seed = j.at("seed").get<uint64_t>();
  if (j.contains("model")) {
    const json& m = j.at("model");
    check_keys(m, {"n_layers", "d_model", "n_heads", "d_ff", "max_seq_len"}, "model");
    if (m.contains("n_layers")) c.model.n_layers = m.at("n_layers").get<int>();
    if (m.contains("d_model")) c.model.d_model = m.at("d_model").get<int>();
    if (m.contains("n_heads")) c.model.n_heads = m.at("n_heads").get<int>();
    if (m.contains("d_ff")) c.model.d_ff = m.at("d_ff").get<int>();
    if (m.contains("max_seq_len")) c.model.max_seq_len = m.at("max_seq_len").get<int>();
  }
  if (j.contains("world")) {
    const json& w = j.at("world");
    check_keys(w,
               {"categories", "objects_per_category", "subjects", "facts",
                "paraphrases_per_relation", "pretrain_facts", "n_edit", "n_intrinsic", "margin"},
               "world");
    if (w.contains("categories")) c.world.sizes.categories = w.at("categories").get<int>();
    if (w.contains("objects_per_category"))
      c.world.sizes.objects_per_category = w.at("objects_per_category").get<int>();
    if (w.contains("subjects")) c.world.sizes.subjects = w.at("subjects").get<int>();
    if (w.contains("facts")) c.world.sizes.facts = w.at("facts").get<int>();
    if (w.contains("paraphrases_per_relation"))
      c.world.sizes.paraphrases_per_relation = w.at("paraphrases_per_relation").get<int>();
    if (w.contains("pretrain_facts")) c.world.pretrain_facts = w.at("pretrain_facts").get<int>();
    if (w.contains("n_edit")) c.world.n_edit = w.at("n_edit").get<int>();
    if (w.contains("n_intrinsic")) c.world.n_intrinsic = w.at("n_intrinsic").get<int>();
    if (w.contains("margin")) c.world.margin = w.at("margin").get<double>();
  }
  if (j.contains("pretrain")) {
    const json& p = j.at("pretrain");
    check_keys(p,
               {"batch_size", "lr", "weight_decay", "max_epochs", "eval_every",
                "target_retention", "paraphrases_per_fact", "filler_ratio"},
               "pretrain");
    if (p.contains("batch_size")) c.pretrain.spec.batch_size = p.at("batch_size").get<int>();
    if (p.contains("lr")) c.pretrain.spec.lr = p.at("lr").get<double>();
    if (p.contains("weight_decay"))
      c.pretrain.spec.weight_decay = p.at("weight_decay").get<double>();
    if (p.contains("max_epochs")) c.pretrain.spec.max_epochs = p.at("max_epochs").get<int>();
    if (p.contains("eval_every")) c.pretrain.spec.eval_every = p.at("eval_every").get<int>();
    if (p.contains("target_retention"))
      c.pretrain.spec.target_retention = p.at("target_retention").get<double>();
    if (p.contains("paraphrases_per_fact"))
      c.pretrain.paraphrases_per_fact = p.at("paraphrases_per_fact").get<int>();
    if (p.contains("filler_ratio")) c.pretrain.filler_ratio = p.at("filler_ratio").get<double>();
  }
  if (j.contains("edit")) {
    const json& e = j.at("edit");
    check_keys(e, {"methods", "layers", "ft", "rome"}, "edit");
    if (e.contains("methods")) {
      c.methods.clear();
      for (const json& s : e.at("methods"))
        c.methods.push_back(editing::method_from_name(s.get<std::string>()));
    }
    if (e.contains("layers")) c.edit_layers = e.at("layers").get<std::vector<int>>();
    if (e.contains("ft")) {
      const json& f = e.at("ft");
      check_keys(f, {"lr", "max_steps", "weight_decay", "early_stop_loss"}, "edit.ft");
      if (f.contains("lr")) c.edit_hyper.ft.lr = f.at("lr").get<double>();
      if (f.contains("max_steps")) c.edit_hyper.ft.max_steps = f.at("max_steps").get<int>();
      if (f.contains("weight_decay"))
        c.edit_hyper.ft.weight_decay = f.at("weight_decay").get<double>();
      if (f.contains("early_stop_loss"))
        c.edit_hyper.ft.early_stop_loss = f.at("early_stop_loss").get<double>();
    }
    if (e.contains("rome")) {
      const json& r = e.at("rome");
      check_keys(r,
                 {"v_lr", "v_max_steps", "v_weight_decay", "kl_factor", "covariance_samples",
                  "covariance_jitter", "key_prefixes"},
                 "edit.rome");
      if (r.contains("v_lr")) c.edit_hyper.rome.v_lr = r.at("v_lr").get<double>();
      if (r.contains("v_max_steps"))
        c.edit_hyper.rome.v_max_steps = r.at("v_max_steps").get<int>();
      if (r.contains("v_weight_decay"))
        c.edit_hyper.rome.v_weight_decay = r.at("v_weight_decay").get<double>();
      if (r.contains("kl_factor")) c.edit_hyper.rome.kl_factor = r.at("kl_factor").get<double>();
      if (r.contains("covariance_samples"))
        c.edit_hyper.rome.covariance_samples = r.at("covariance_samples").get<int>();
      if (r.contains("covariance_jitter"))
        c.edit_hyper.rome.covariance_jitter = r.at("covariance_jitter").get<double>();
      if (r.contains("key_prefixes"))
        c.edit_hyper.rome.key_prefixes = r.at("key_prefixes").get<int>();
    }
  }
  if (j.contains("tasks")) {
    c.tasks.clear();
    for (const json& s : j.at("tasks")) c.tasks.push_back(corpus::task_from_name(s.get<std::string>()));
  }
  if (j.contains("task_configs")) {
    for (const auto& [name, tj] : j.at("task_configs").items()) {
      TaskKind k = corpus::task_from_name(name);
      c.task_configs[k] = task_config_from_json(k, tj);
    }
  }
  if (j.contains("policies")) {
    c.policies.clear();
    for (const json& p : j.at("policies")) c.policies.push_back(policy_from_json(p));
  }
  if (j.contains("replicates")) c.replicates = j.at("replicates").get<int>();
  if (j.contains("distribution_tasks")) {
    c.distribution_tasks.clear();
    for (const json& s : j.at("distribution_tasks"))
      c.distribution_tasks.push_back(corpus::task_from_name(s.get<std::string>()));
  }
  if (j.contains("distribution_intrinsic"))
    c.distribution_intrinsic = j.at("distribution_intrinsic").get<bool>();
  if (j.contains("scrub_counterfactuals"))
    c.scrub_counterfactuals = j.at("scrub_counterfactuals").get<bool>();
  if (j.contains("case_study_k")) c.case_study_k = j.at("case_study_k").get<int>();
  c.validate();
  return c;
}

ExperimentConfig ExperimentConfig::from_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file: " + path.string());
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return from_json_text(text);
}

std::string CellKey::id() const {
  std::string s = method;
  if (method != "none") s += "-L" + std::to_string(layer);
  s += "-" + corpus::task_name(task) + "-" + policy_name + "-r";
  char buf[8];
  std::snprintf(buf, sizeof(buf), "%03d", rep);
  return s + buf;
}

std::vector<CellKey> enumerate_cells(const ExperimentConfig& cfg) {
  std::vector<CellKey> cells;
  for (EditMethod m : cfg.methods)
    for (int layer : cfg.edit_layers)
      for (TaskKind task : cfg.tasks)
        for (size_t pi = 0; pi < cfg.policies.size(); ++pi)
          for (int rep = 0; rep < cfg.replicates; ++rep) {
            CellKey k;
            k.method = editing::method_name(m);
            k.layer = layer;
            k.task = task;
            k.policy_index = static_cast<int>(pi);
            k.policy_name = cfg.policies[pi].name();
            k.rep = rep;
            cells.push_back(std::move(k));
          }
  // No-edit control arm: one per (task, replicate) under the full policy.
  for (TaskKind task : cfg.tasks)
    for (int rep = 0; rep < cfg.replicates; ++rep) {
      CellKey k;
      k.method = "none";
      k.layer = -1;
      k.task = task;
      k.policy_index = -1;
      k.policy_name = "full";
      k.rep = rep;
      cells.push_back(std::move(k));
    }
  std::sort(cells.begin(), cells.end(),
            [](const CellKey& a, const CellKey& b) { return a.id() < b.id(); });
  return cells;
}

// --- grid preparation --------------------------------------------------------

namespace {

json world_stage_json(const ExperimentConfig& c) {
  return {{"seed", c.seed},
          {"categories", c.world.sizes.categories},
          {"objects_per_category", c.world.sizes.objects_per_category},
          {"subjects", c.world.sizes.subjects},
          {"facts", c.world.sizes.facts},
          {"paraphrases_per_relation", c.world.sizes.paraphrases_per_relation}};
}

std::vector<FactTuple> pretrain_fact_subset(const ExperimentConfig& cfg, const World& w) {
  std::vector<int> idx(w.facts.size());
  for (size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<int>(i);
  Rng rng = Rng(cfg.seed).substream("partition");
  rng.shuffle(idx);
  const int n = std::min<int>(cfg.world.pretrain_facts, static_cast<int>(idx.size()));
  std::vector<int> take(idx.begin(), idx.begin() + n);
  std::sort(take.begin(), take.end());
  std::vector<FactTuple> out;
  for (int i : take) out.push_back(w.facts[i]);
  return out;
}

json lm_dataset_to_json(const std::vector<model::LmExample>& v) {
  json arr = json::array();
  for (const model::LmExample& ex : v) {
    json m = json::array();
    for (size_t t = 0; t < ex.loss_mask.size(); ++t)
      if (ex.loss_mask[t] != 0.0f) m.push_back(t);
    arr.push_back({{"t", ex.tokens}, {"m", m}});
  }
  return arr;
}

std::vector<model::LmExample> lm_dataset_from_json(const json& arr) {
  std::vector<model::LmExample> out;
  for (const json& e : arr) {
    model::LmExample ex;
    ex.tokens = e.at("t").get<std::vector<int>>();
    ex.loss_mask.assign(ex.tokens.size(), 0.0f);
    for (const json& p : e.at("m")) ex.loss_mask[p.get<size_t>()] = 1.0f;
    out.push_back(std::move(ex));
  }
  return out;
}

json cls_dataset_to_json(const std::vector<model::ClsExample>& v) {
  json arr = json::array();
  for (const model::ClsExample& ex : v) arr.push_back({{"t", ex.tokens}, {"y", ex.label}});
  return arr;
}

std::vector<model::ClsExample> cls_dataset_from_json(const json& arr) {
  std::vector<model::ClsExample> out;
  for (const json& e : arr)
    out.push_back({e.at("t").get<std::vector<int>>(), e.at("y").get<int>()});
  return out;
}

void save_dataset(const corpus::TaskDataset& ds, const fs::path& path) {
  json j;
  j["kind"] = corpus::task_name(ds.kind);
  j["eos_id"] = ds.eos_id;
  if (ds.kind == TaskKind::classification) {
    j["train"] = cls_dataset_to_json(ds.cls_train);
    j["val"] = cls_dataset_to_json(ds.cls_val);
  } else {
    j["train"] = lm_dataset_to_json(ds.train);
    j["val"] = lm_dataset_to_json(ds.val);
  }
  atomic_write_text(path, j.dump() + "\n");
}

corpus::TaskDataset load_dataset(const fs::path& path) {
  json j = json::parse(read_text(path));
  corpus::TaskDataset ds;
  ds.kind = corpus::task_from_name(j.at("kind").get<std::string>());
  ds.eos_id = j.at("eos_id").get<int>();
  if (ds.kind == TaskKind::classification) {
    ds.cls_train = cls_dataset_from_json(j.at("train"));
    ds.cls_val = cls_dataset_from_json(j.at("val"));
  } else {
    ds.train = lm_dataset_from_json(j.at("train"));
    ds.val = lm_dataset_from_json(j.at("val"));
  }
  return ds;
}

}  // namespace

std::map<TaskKind, double> calibrate_thresholds(const ExperimentConfig& cfg,
                                                const TransformerLM& pristine,
                                                const GridContext& ctx, uint64_t seed) {
  std::map<TaskKind, double> out;
  for (TaskKind k : cfg.tasks) {
    const TaskConfig& tc = cfg.task_configs.at(k);
    if (tc.threshold_override) {
      out[k] = *tc.threshold_override;
      continue;
    }
    TransformerLM pilot = pristine;
    TaskSpec spec = tc.spec;
    spec.threshold = spec.stop_metric == training::StopMetric::validation_loss_below
                         ? -1e30
                         : 1e30;  // unreachable; the pilot runs its full budget
    Rng rng = Rng(seed).substream("calibrate/" + corpus::task_name(k));
    auto res = training::finetune(pilot, ctx.datasets.at(k), spec, FreezePolicy::full(),
                                  rng.next_u64(), nullptr, tc.pilot_steps);
    out[k] = res.log.records.back().val_metric;  // achieved metric, verbatim
  }
  return out;
}

GridContext prepare_grid(const ExperimentConfig& cfg, const fs::path& out, StageTimes* times,
                         PrepStage upto) {
  cfg.validate();
  fs::create_directories(out);
  atomic_write_text(out / "config.json", cfg.to_json());

  GridContext ctx;

  // -- world
  const uint64_t h_world = numerics::fnv1a64(world_stage_json(cfg).dump());
  const fs::path world_stamp = out / "world.stamp.json";
  if (stamp_matches(world_stamp, h_world)) {
    ctx.world = corpus::load_world(out / "world.json", out / "facts.json");
  } else {
    ctx.world = corpus::generate_world(cfg.seed, cfg.world.sizes);
    corpus::save_world(ctx.world, out / "world.json", out / "facts.json");
    write_stamp(world_stamp, h_world);
  }
  if (upto == PrepStage::world) return ctx;

  model::ModelConfig mc = cfg.model;
  mc.vocab_size = ctx.world.tok.size();
  mc.seed = Rng(cfg.seed).substream("model-init").next_u64();

  // -- pretraining corpus + checkpoint
  auto t0 = std::chrono::steady_clock::now();
  std::vector<FactTuple> pretrain_facts = pretrain_fact_subset(cfg, ctx.world);
  ctx.pretrain_corpus = corpus::build_pretrain_corpus(
      ctx.world, pretrain_facts, cfg.pretrain.paraphrases_per_fact, cfg.pretrain.filler_ratio,
      Rng(cfg.seed).substream("pretrain-corpus"));

  json pre_j = {{"world", hex64(h_world)},
                {"model",
                 {{"n_layers", mc.n_layers},
                  {"d_model", mc.d_model},
                  {"n_heads", mc.n_heads},
                  {"d_ff", mc.d_ff},
                  {"max_seq_len", mc.max_seq_len},
                  {"vocab", mc.vocab_size}}},
                {"pretrain_facts", cfg.world.pretrain_facts},
                {"spec",
                 {{"batch", cfg.pretrain.spec.batch_size},
                  {"lr", cfg.pretrain.spec.lr},
                  {"wd", cfg.pretrain.spec.weight_decay},
                  {"max_epochs", cfg.pretrain.spec.max_epochs},
                  {"eval_every", cfg.pretrain.spec.eval_every},
                  {"target", cfg.pretrain.spec.target_retention},
                  {"margin", cfg.world.margin},
                  {"paraphrases", cfg.pretrain.paraphrases_per_fact},
                  {"filler", cfg.pretrain.filler_ratio}}}};
  const uint64_t h_pre = numerics::fnv1a64(pre_j.dump());
  const fs::path pre_stamp = out / "pretrain.stamp.json";
  const fs::path pre_dir = out / "pretrain";
  if (stamp_matches(pre_stamp, h_pre) && model::checkpoint_exists(pre_dir)) {
    ctx.pristine = model::load_checkpoint_dir(pre_dir);
  } else {
    ctx.pristine = TransformerLM::init(mc);
    training::PretrainSpec ps = cfg.pretrain.spec;
    ps.margin = cfg.world.margin;
    auto log = training::pretrain(ctx.pristine, ctx.world, ctx.pretrain_corpus, ps, pretrain_facts,
                                  Rng(cfg.seed).substream("pretrain").next_u64());
    model::save_checkpoint_dir(ctx.pristine, pre_dir);
    atomic_write_text(pre_dir / "log.jsonl", log.to_jsonl());
    write_stamp(pre_stamp, h_pre);
  }
  if (times) times->pretrain_s += seconds_since(t0);
  if (upto == PrepStage::pretrain) return ctx;

  // -- margin filter + split
  t0 = std::chrono::steady_clock::now();
  json split_j = {{"pre", hex64(h_pre)},
                  {"n_edit", cfg.world.n_edit},
                  {"n_intrinsic", cfg.world.n_intrinsic},
                  {"margin", cfg.world.margin}};
  const uint64_t h_split = numerics::fnv1a64(split_j.dump());
  const fs::path split_stamp = out / "splits.stamp.json";
  const fs::path split_path = out / "splits.json";
  if (stamp_matches(split_stamp, h_split) && fs::exists(split_path)) {
    json j = json::parse(read_text(split_path));
    ctx.edit_set = corpus::facts_from_json(j.at("edit").dump());
    ctx.intrinsic_set = corpus::facts_from_json(j.at("intrinsic").dump());
    // facts_from_json re-numbers ids from 0; restore from the stored ids
    for (size_t i = 0; i < ctx.edit_set.size(); ++i)
      ctx.edit_set[i].id = j.at("edit_ids")[i].get<int>();
    for (size_t i = 0; i < ctx.intrinsic_set.size(); ++i)
      ctx.intrinsic_set[i].id = j.at("intrinsic_ids")[i].get<int>();
  } else {
    auto kept = corpus::margin_filter(ctx.pristine, ctx.world, pretrain_facts, cfg.world.margin);
    // Also require the decode-based probe to succeed so intrinsic retention
    // is exactly 1.0 at split time.
    std::vector<FactTuple> verified;
    for (const FactTuple& f : kept) {
      auto prompt = corpus::render_prompt(ctx.world, f);
      auto tok = evaluation::first_non_stop_token(ctx.pristine, prompt, ctx.world.stop_ids, 5);
      if (tok.has_value() && *tok == ctx.world.tok.id(f.true_object)) verified.push_back(f);
    }
    auto [edit, intrinsic] =
        corpus::split_edit_intrinsic(ctx.world, verified, cfg.world.n_edit, cfg.world.n_intrinsic,
                                     Rng(cfg.seed).substream("split").next_u64());
    ctx.edit_set = std::move(edit);
    ctx.intrinsic_set = std::move(intrinsic);
    json j;
    j["edit"] = json::parse(corpus::facts_to_json(ctx.edit_set));
    j["intrinsic"] = json::parse(corpus::facts_to_json(ctx.intrinsic_set));
    json eids = json::array(), iids = json::array();
    for (const FactTuple& f : ctx.edit_set) eids.push_back(f.id);
    for (const FactTuple& f : ctx.intrinsic_set) iids.push_back(f.id);
    j["edit_ids"] = eids;
    j["intrinsic_ids"] = iids;
    atomic_write_text(split_path, j.dump(2) + "\n");
    write_stamp(split_stamp, h_split);
  }

  if (upto == PrepStage::splits) return ctx;

  // -- downstream datasets
  std::vector<FactTuple> protected_facts = ctx.edit_set;
  protected_facts.insert(protected_facts.end(), ctx.intrinsic_set.begin(),
                         ctx.intrinsic_set.end());
  fs::create_directories(out / "datasets");
  for (TaskKind k : cfg.tasks) {
    const TaskConfig& tc = cfg.task_configs.at(k);
    json dj = {{"split", hex64(h_split)},
               {"task", corpus::task_name(k)},
               {"train", tc.train},
               {"val", tc.val},
               {"scrub_cf", cfg.scrub_counterfactuals}};
    const uint64_t h_data = numerics::fnv1a64(dj.dump());
    const fs::path stamp = out / "datasets" / (corpus::task_name(k) + ".stamp.json");
    const fs::path dpath = out / "datasets" / (corpus::task_name(k) + ".json");
    if (stamp_matches(stamp, h_data) && fs::exists(dpath)) {
      ctx.datasets[k] = load_dataset(dpath);
    } else {
      corpus::DownstreamSizes sizes{tc.train, tc.val};
      ctx.datasets[k] = corpus::build_downstream(
          ctx.world, k, ctx.pristine, protected_facts,
          Rng(cfg.seed).substream("task/" + corpus::task_name(k)).next_u64(), sizes,
          cfg.scrub_counterfactuals);
      save_dataset(ctx.datasets[k], dpath);
      write_stamp(stamp, h_data);
    }
  }
  {
    corpus::DatasetBundle bundle;
    bundle.pretrain_corpus = ctx.pretrain_corpus;
    bundle.edit_set = ctx.edit_set;
    bundle.intrinsic_set = ctx.intrinsic_set;
    bundle.tasks = ctx.datasets;
    bundle.validate(ctx.world);
  }
  if (times) times->datasets_s += seconds_since(t0);
  if (upto == PrepStage::datasets) return ctx;

  // -- calibration
  t0 = std::chrono::steady_clock::now();
  json cal_dep = {{"split", hex64(h_split)}, {"tasks", json::array()}};
  for (TaskKind k : cfg.tasks)
    cal_dep["tasks"].push_back(
        {{"task", corpus::task_name(k)}, {"cfg", task_config_to_json(cfg.task_configs.at(k))}});
  const uint64_t h_cal = numerics::fnv1a64(cal_dep.dump());
  const fs::path cal_stamp = out / "calibration.stamp.json";
  const fs::path cal_path = out / "calibration.json";
  std::map<TaskKind, double> thresholds;
  if (stamp_matches(cal_stamp, h_cal) && fs::exists(cal_path)) {
    json j = json::parse(read_text(cal_path));
    for (const auto& [name, v] : j.items()) thresholds[corpus::task_from_name(name)] = v.get<double>();
  } else {
    thresholds = calibrate_thresholds(cfg, ctx.pristine, ctx, cfg.seed);
    json j;
    for (const auto& [k, v] : thresholds) j[corpus::task_name(k)] = v;
    atomic_write_text(cal_path, j.dump(2) + "\n");
    write_stamp(cal_stamp, h_cal);
  }
  for (TaskKind k : cfg.tasks) {
    TaskSpec spec = cfg.task_configs.at(k).spec;
    spec.threshold = thresholds.at(k);
    ctx.task_specs[k] = spec;
  }
  if (times) times->calibrate_s += seconds_since(t0);

  return ctx;
}

// --- cells --------------------------------------------------------------------

namespace {

json cell_result_to_json(const CellResult& r) {
  json j;
  j["id"] = r.key.id();
  j["method"] = r.key.method;
  j["layer"] = r.key.layer;
  j["task"] = corpus::task_name(r.key.task);
  j["policy"] = r.key.policy_name;
  j["policy_index"] = r.key.policy_index;
  j["rep"] = r.key.rep;
  j["seq"] = r.seq;
  j["fact_id"] = r.fact_id;
  j["ok"] = r.ok;
  j["error"] = r.error;
  if (r.edit) {
    j["edit"] = {{"success", r.edit->success},
                 {"steps_used", r.edit->steps_used},
                 {"update_rank", r.edit->update_rank},
                 {"delta_frobenius", r.edit->delta_frobenius},
                 {"pre_prob", r.edit->pre_prob},
                 {"post_prob", r.edit->post_prob}};
  } else {
    j["edit"] = nullptr;
  }
  j["post_edit"] = {{"edited", r.post_edit_edited}, {"intrinsic", r.post_edit_intrinsic}};
  j["post_finetune"] = {{"edited", r.post_ft_edited}, {"intrinsic", r.post_ft_intrinsic}};
  j["finetune"] = {{"steps", r.ft_steps},
                   {"epochs", r.ft_epochs},
                   {"stop_reason", r.stop_reason},
                   {"final_metric", r.final_metric}};
  j["task_spec_hash"] = hex64(r.task_spec_hash);
  return j;
}

CellResult cell_result_from_json(const json& j) {
  CellResult r;
  r.key.method = j.at("method").get<std::string>();
  r.key.layer = j.at("layer").get<int>();
  r.key.task = corpus::task_from_name(j.at("task").get<std::string>());
  r.key.policy_name = j.at("policy").get<std::string>();
  r.key.policy_index = j.at("policy_index").get<int>();
  r.key.rep = j.at("rep").get<int>();
  r.seq = j.at("seq").get<int>();
  r.fact_id = j.at("fact_id").get<int>();
  r.ok = j.at("ok").get<bool>();
  r.error = j.at("error").get<std::string>();
  if (!j.at("edit").is_null()) {
    editing::EditOutcome e;
    const json& je = j.at("edit");
    e.success = je.at("success").get<bool>();
    e.steps_used = je.at("steps_used").get<int>();
    e.update_rank = je.at("update_rank").get<int>();
    e.delta_frobenius = je.at("delta_frobenius").get<double>();
    e.pre_prob = je.at("pre_prob").get<double>();
    e.post_prob = je.at("post_prob").get<double>();
    r.edit = e;
  }
  r.post_edit_edited = j.at("post_edit").at("edited").get<double>();
  r.post_edit_intrinsic = j.at("post_edit").at("intrinsic").get<double>();
  r.post_ft_edited = j.at("post_finetune").at("edited").get<double>();
  r.post_ft_intrinsic = j.at("post_finetune").at("intrinsic").get<double>();
  r.ft_steps = j.at("finetune").at("steps").get<long>();
  r.ft_epochs = j.at("finetune").at("epochs").get<int>();
  r.stop_reason = j.at("finetune").at("stop_reason").get<std::string>();
  r.final_metric = j.at("finetune").at("final_metric").get<double>();
  r.task_spec_hash = std::stoull(j.at("task_spec_hash").get<std::string>(), nullptr, 16);
  return r;
}

uint64_t cell_stamp_hash(const ExperimentConfig& cfg, const CellKey& key) {
  json j = {{"config", hex64(cfg.hash())}, {"cell", key.id()}};
  return numerics::fnv1a64(j.dump());
}

struct CellRunOutput {
  CellResult result;
  bool skipped = false;
};

CellRunOutput run_cell(const ExperimentConfig& cfg, const GridContext& ctx, const CellKey& key,
                       int seq, const fs::path& out) {
  const fs::path cdir = out / "cells" / key.id();
  const uint64_t stamp = cell_stamp_hash(cfg, key);
  const fs::path rpath = cdir / "result.json";
  if (fs::exists(rpath)) {
    try {
      json j = json::parse(read_text(rpath));
      if (j.at("stamp").get<std::string>() == hex64(stamp)) {
        CellRunOutput o;
        o.result = cell_result_from_json(j);
        o.skipped = true;
        return o;
      }
    } catch (...) {
      // fall through and recompute
    }
  }
  fs::create_directories(cdir);

  auto t0 = std::chrono::steady_clock::now();
  CellResult r;
  r.key = key;
  r.seq = seq;
  const bool control = key.method == "none";
  const TaskSpec& spec = ctx.task_specs.at(key.task);
  r.task_spec_hash = spec.hash();
  const FreezePolicy policy =
      control ? FreezePolicy::full() : cfg.policies.at(key.policy_index);

  TransformerLM m = ctx.pristine;
  Rng cell_rng = Rng(cfg.seed).substream("cell/" + key.id());
  FactTuple fact;
  std::vector<std::string> dist_lines;
  std::string train_log_text;

  try {
    bool track = false;
    if (!control) {
      fact = ctx.edit_set[key.rep % ctx.edit_set.size()];
      r.fact_id = fact.id;
      for (TaskKind k : cfg.distribution_tasks) track = track || k == key.task;

      editing::EditRequest req;
      req.fact = fact;
      req.layer = key.layer;
      req.hyper = cfg.edit_hyper;
      if (key.method == "ft") {
        req.method = EditMethod::FT;
        r.edit = editing::ft_edit(m, ctx.world, req);
      } else {
        req.method = EditMethod::ROME;
        r.edit = editing::rome_edit(m, ctx.world, req, ctx.pretrain_corpus,
                                    cell_rng.substream("edit"));
      }
      std::span<const FactTuple> efacts(&fact, 1);
      r.post_edit_edited =
          evaluation::retention_rate(m, ctx.world, efacts, evaluation::TargetKind::edited_target);
      r.post_edit_intrinsic = evaluation::retention_rate(m, ctx.world, ctx.intrinsic_set,
                                                         evaluation::TargetKind::true_target);
      if (track) {
        // pre-edit top-k for the case study comes from the pristine model
        auto prompt = corpus::render_prompt(ctx.world, fact);
        json pre;
        pre["phase"] = "pre_edit";
        json topk = json::array();
        for (auto [tok, p] : model::logits_topk(ctx.pristine, prompt, cfg.case_study_k))
          topk.push_back({ctx.world.tok.word(tok), p});
        pre["topk"] = topk;
        dist_lines.push_back(pre.dump());
      }
    } else {
      r.post_edit_edited = -1.0;
      r.post_edit_intrinsic = evaluation::retention_rate(m, ctx.world, ctx.intrinsic_set,
                                                         evaluation::TargetKind::true_target);
    }

    training::EvalObserver observer = nullptr;
    if (track) {
      observer = [&](long step, double epoch, const TransformerLM& snap) {
        std::span<const FactTuple> efacts(&fact, 1);
        auto masses = evaluation::token_class_masses(snap, ctx.world, efacts);
        json line = {{"phase", "finetune"},
                     {"step", step},
                     {"epoch", epoch},
                     {"p_edit_target", masses.p_edit_target},
                     {"p_true", masses.p_true},
                     {"p_related", masses.p_related},
                     {"p_other", masses.p_other}};
        auto prompt = corpus::render_prompt(ctx.world, fact);
        json topk = json::array();
        for (auto [tok, p] : model::logits_topk(snap, prompt, cfg.case_study_k))
          topk.push_back({ctx.world.tok.word(tok), p});
        line["topk"] = topk;
        if (cfg.distribution_intrinsic) {
          auto im = evaluation::token_class_masses(snap, ctx.world, ctx.intrinsic_set);
          line["intrinsic"] = {{"p_edit_target", im.p_edit_target},
                               {"p_true", im.p_true},
                               {"p_related", im.p_related},
                               {"p_other", im.p_other}};
        }
        dist_lines.push_back(line.dump());
      };
    }

    try {
      auto ft = training::finetune(m, ctx.datasets.at(key.task), spec, policy,
                                   cell_rng.substream("finetune").next_u64(), observer);
      r.ft_steps = ft.log.stop_step;
      r.ft_epochs = ft.log.epochs_used;
      r.stop_reason = ft.log.stop_reason;
      r.final_metric = ft.log.records.back().val_metric;
      train_log_text = ft.log.to_jsonl();
      r.ok = true;
    } catch (const training::ConvergenceError& e) {
      r.ft_steps = e.log.stop_step;
      r.ft_epochs = e.log.epochs_used;
      r.stop_reason = e.log.stop_reason;
      r.final_metric = e.log.records.empty() ? 0.0 : e.log.records.back().val_metric;
      train_log_text = e.log.to_jsonl();
      r.error = e.what();
      r.ok = false;
    }

    if (!control) {
      std::span<const FactTuple> efacts(&fact, 1);
      r.post_ft_edited =
          evaluation::retention_rate(m, ctx.world, efacts, evaluation::TargetKind::edited_target);
    } else {
      r.post_ft_edited = -1.0;
    }
    r.post_ft_intrinsic = evaluation::retention_rate(m, ctx.world, ctx.intrinsic_set,
                                                     evaluation::TargetKind::true_target);
  } catch (const std::exception& e) {
    r.ok = false;
    r.error = e.what();
  }

  r.cell_seconds = seconds_since(t0);

  if (!train_log_text.empty()) atomic_write_text(cdir / "train_log.jsonl", train_log_text);
  if (!dist_lines.empty()) {
    std::string text;
    for (const std::string& l : dist_lines) text += l + "\n";
    atomic_write_text(cdir / "dist.jsonl", text);
  }
  json j = cell_result_to_json(r);
  j["stamp"] = hex64(stamp);
  atomic_write_text(rpath, j.dump(2) + "\n");
  return {std::move(r), false};
}

}  // namespace

RunRecord run_grid(const ExperimentConfig& cfg, const fs::path& out, int jobs,
                   StageTimes* times) {
  GridContext ctx = prepare_grid(cfg, out, times);
  std::vector<CellKey> keys = enumerate_cells(cfg);
  fs::create_directories(out / "cells");

  RunRecord record;
  record.config_hash = cfg.hash();
  record.cells.resize(keys.size());
  std::atomic<size_t> next{0};
  std::atomic<int> executed{0}, skipped{0};
  std::mutex io_mutex;
  double max_cell = 0.0, total_cell = 0.0;

  auto worker = [&]() {
    while (true) {
      const size_t i = next.fetch_add(1);
      if (i >= keys.size()) return;
      CellRunOutput o = run_cell(cfg, ctx, keys[i], static_cast<int>(i), out);
      {
        std::lock_guard<std::mutex> lock(io_mutex);
        if (o.skipped) {
          ++skipped;
        } else {
          ++executed;
          total_cell += o.result.cell_seconds;
          max_cell = std::max(max_cell, o.result.cell_seconds);
          std::fprintf(stderr, "[ketlab] cell %s done in %.1fs%s\n", keys[i].id().c_str(),
                       o.result.cell_seconds, o.result.ok ? "" : " (FAILED)");
        }
        o.result.seq = static_cast<int>(i);
        record.cells[i] = std::move(o.result);
      }
    }
  };

  const int n_workers = std::max(1, jobs);
  std::vector<std::thread> pool;
  for (int t = 0; t < n_workers; ++t) pool.emplace_back(worker);
  for (std::thread& t : pool) t.join();

  record.executed = executed.load();
  record.skipped = skipped.load();
  for (const CellResult& r : record.cells)
    if (!r.ok) ++record.failures;
  if (times) {
    times->cells_core_s += total_cell;
    times->max_cell_s = std::max(times->max_cell_s, max_cell);
  }

  json j;
  j["config_hash"] = hex64(record.config_hash);
  json cells = json::array();
  for (const CellResult& r : record.cells) cells.push_back(cell_result_to_json(r));
  j["cells"] = std::move(cells);
  atomic_write_text(out / "record.json", j.dump(2) + "\n");
  return record;
}

RunRecord load_record(const fs::path& out_dir) {
  json j = json::parse(read_text(out_dir / "record.json"));
  RunRecord r;
  r.config_hash = std::stoull(j.at("config_hash").get<std::string>(), nullptr, 16);
  for (const json& c : j.at("cells")) {
    r.cells.push_back(cell_result_from_json(c));
    if (!r.cells.back().ok) ++r.failures;
  }
  return r;
}

}  // namespace ketlab::runner
