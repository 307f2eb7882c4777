#pragma once

#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "ketlab/model.hpp"
#include "ketlab/rng.hpp"

namespace ketlab::corpus {

/// A relation template: token sequence with one "[S]" slot and a trailing
/// "[O]" slot. All non-slot tokens are drawn from the world's stop-word
/// vocabulary, so a rendered prompt's only non-stop token is the subject.
struct RelationTemplate {
  std::vector<std::string> tokens;
};

struct Relation {
  std::string category;  // object pool this relation selects from
  RelationTemplate canonical;
  std::vector<RelationTemplate> paraphrases;
};

struct WorldSpec {
  std::vector<std::pair<std::string, std::vector<std::string>>> categories;  // ordered
  std::vector<std::string> subjects;
  std::vector<Relation> templates;  // relation_id indexes this list
  std::vector<std::string> stop_words;
  uint64_t seed = 0;
  // auxiliary pools; all of these words are also stop words
  std::vector<std::string> filler_words;
  std::vector<std::string> pos_markers;
  std::vector<std::string> neg_markers;
};

struct FactTuple {
  int id = 0;
  std::string subject;
  int relation_id = 0;
  std::string true_object;
  std::string counterfactual_object;
  std::string category;
};

struct Tokenizer {
  std::vector<std::string> vocab;
  std::unordered_map<std::string, int> ids;
  int eos_id = 0;

  static Tokenizer build(const WorldSpec& spec);
  int id(const std::string& word) const;  // throws on unknown word
  const std::string& word(int id) const { return vocab.at(id); }
  int size() const { return static_cast<int>(vocab.size()); }
};

struct World {
  WorldSpec spec;
  std::vector<FactTuple> facts;
  Tokenizer tok;
  std::unordered_set<int> stop_ids;

  const std::vector<std::string>& category_objects(const std::string& name) const;
  bool is_stop(int token_id) const { return stop_ids.count(token_id) > 0; }
  void rebuild_derived();  // tokenizer + stop ids from spec
};

struct WorldSizes {
  int categories = 10;
  int objects_per_category = 40;
  int subjects = 360;
  int facts = 360;
  int paraphrases_per_relation = 4;  // distinct surface forms incl. canonical
};

/// Deterministic synthetic world. Sizes must yield >= 300 facts,
/// >= 4 categories and >= 5 objects per category; each relation draws both
/// objects from its own category, so every fact has same-category
/// alternatives for the related-term token class.
World generate_world(uint64_t seed, const WorldSizes& sizes);

using Sentence = std::vector<int>;

std::vector<int> render_prompt(const World& w, const FactTuple& f);  // object excluded
std::vector<std::string> render_prompt_words(const World& w, const FactTuple& f);
/// Prompt under surface-form `variant` (0 = canonical).
std::vector<int> render_prompt_variant(const World& w, const FactTuple& f, int variant);
/// Full sentence under `variant`: prompt + object + "." + EOS.
Sentence render_sentence(const World& w, const FactTuple& f, int variant,
                         bool use_counterfactual = false);
int subject_position_in_prompt(const World& w, const FactTuple& f);
int n_variants(const World& w, const FactTuple& f);

std::vector<Sentence> make_filler_sentences(const World& w, int count, numerics::Rng& rng);

/// Fact paraphrase sentences (>= paraphrases_per_fact distinct templates per
/// fact) interleaved with filler at filler_ratio (fraction of the corpus).
std::vector<Sentence> build_pretrain_corpus(const World& w, std::span<const FactTuple> facts,
                                            int paraphrases_per_fact, double filler_ratio,
                                            numerics::Rng rng);

/// Keep iff the true object is the top-probability non-stop first token and
/// beats the second-ranked non-stop token by at least `margin`.
bool margin_keep(std::span<const double> first_token_probs, int true_object_id,
                 const std::unordered_set<int>& stop_ids, double margin);
std::vector<FactTuple> margin_filter(const model::TransformerLM& m, const World& w,
                                     std::span<const FactTuple> facts, double margin);

/// Deterministic split with subject, relation and object disjointness across
/// the two sets (objects include counterfactual targets).
std::pair<std::vector<FactTuple>, std::vector<FactTuple>> split_edit_intrinsic(
    const World& w, std::span<const FactTuple> kept, int n_edit, int n_intrinsic, uint64_t seed);

/// Protected token ids for scrubbing: non-stop canonical-prompt tokens and
/// true targets of every protected fact, plus counterfactual targets when
/// scrub_counterfactuals is set.
std::unordered_set<int> protected_token_ids(const World& w, std::span<const FactTuple> facts,
                                            bool scrub_counterfactuals);
std::vector<Sentence> scrub_overlap(std::span<const Sentence> corpus, const World& w,
                                    std::span<const FactTuple> protected_facts,
                                    bool scrub_counterfactuals = true);

enum class TaskKind { unstructured, structured, classification, sft };
std::string task_name(TaskKind k);
TaskKind task_from_name(const std::string& s);
inline constexpr TaskKind kAllTasks[] = {TaskKind::unstructured, TaskKind::structured,
                                         TaskKind::classification, TaskKind::sft};

struct TaskDataset {
  TaskKind kind = TaskKind::unstructured;
  int eos_id = 0;
  std::vector<model::LmExample> train, val;          // LM-style kinds
  std::vector<model::ClsExample> cls_train, cls_val; // classification
  size_t train_size() const;
  size_t val_size() const;
};

struct DownstreamSizes {
  int train = 0;
  int val = 0;
};

TaskDataset build_downstream(const World& w, TaskKind kind, const model::TransformerLM& m,
                             std::span<const FactTuple> protected_facts, uint64_t seed,
                             const DownstreamSizes& sizes, bool scrub_counterfactuals = true);

struct DatasetBundle {
  std::vector<Sentence> pretrain_corpus;
  std::vector<FactTuple> edit_set;
  std::vector<FactTuple> intrinsic_set;
  std::map<TaskKind, TaskDataset> tasks;

  void validate(const World& w) const;  // throws on invariant violations
};

// --- JSON persistence -------------------------------------------------------
void save_world(const World& w, const std::filesystem::path& world_path,
                const std::filesystem::path& facts_path);
World load_world(const std::filesystem::path& world_path,
                 const std::filesystem::path& facts_path);
std::string facts_to_json(std::span<const FactTuple> facts);
std::vector<FactTuple> facts_from_json(const std::string& text);

}  // namespace ketlab::corpus
