#include "ketlab/corpus.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <stdexcept>

#include "json.hpp"

namespace ketlab::corpus {

using nlohmann::json;
using numerics::Rng;

namespace {

void require(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

const std::vector<std::string>& aux_words() {
  static const std::vector<std::string> v = {"is",  "was", "has",  "had",  "are", "were",
                                             "will", "can", "does", "did", "been"};
  return v;
}

const std::vector<std::string>& prep_words() {
  static const std::vector<std::string> v = {"of",   "in",    "to",     "near",   "with",  "from",
                                             "at",   "under", "over",   "by",     "for",   "as",
                                             "on",   "past",  "along",  "around", "behind", "beyond",
                                             "through", "toward", "upon", "within", "about", "beside"};
  return v;
}

const std::vector<std::string>& article_words() {
  static const std::vector<std::string> v = {"the", "a",    "an",   "its",  "this", "that",
                                             "some", "any", "each", "no",   "their"};
  return v;
}

const std::vector<std::string>& connector_words() {
  static const std::vector<std::string> v = {"so", "well", "then", "now", "and", "or", "it", "but"};
  return v;
}

std::vector<std::string> function_words() {
  std::vector<std::string> out;
  for (auto* src : {&aux_words(), &prep_words(), &article_words(), &connector_words()})
    out.insert(out.end(), src->begin(), src->end());
  out.push_back("what");
  return out;
}

const std::vector<std::string>& category_name_pool() {
  static const std::vector<std::string> v = {"company", "country", "instrument", "language",
                                             "city",    "animal",  "plant",      "metal",
                                             "color",   "sport",   "river",      "tool"};
  return v;
}

/// Deterministic pronounceable unique words.
struct WordGen {
  Rng rng;
  std::unordered_set<std::string> used;

  explicit WordGen(uint64_t seed) : rng(seed) {
    for (const std::string& w : function_words()) used.insert(w);
    for (const std::string& w : category_name_pool()) used.insert(w);
  }

  std::string next() {
    static const char* syl[] = {"ba", "be", "bi", "bo", "bu", "da", "de", "di", "do", "du",
                                "ka", "ke", "ki", "ko", "ku", "la", "le", "li", "lo", "lu",
                                "ma", "me", "mi", "mo", "mu", "na", "ne", "ni", "no", "nu",
                                "ra", "re", "ri", "ro", "ru", "sa", "se", "si", "so", "su",
                                "ta", "te", "ti", "to", "tu", "va", "ve", "vi", "vo", "vu",
                                "za", "ze", "zi", "zo", "zu", "fa", "fe", "fi", "fo", "fu"};
    constexpr int n_syl = sizeof(syl) / sizeof(syl[0]);
    for (int tries = 0; tries < 10000; ++tries) {
      const int len = 2 + static_cast<int>(rng.below(2));
      std::string w;
      for (int i = 0; i < len; ++i) w += syl[rng.below(n_syl)];
      if (used.insert(w).second) return w;
    }
    throw std::runtime_error("word generator exhausted");
  }
};

std::vector<std::string> gen_words(WordGen& g, int n) {
  std::vector<std::string> out;
  out.reserve(n);
  for (int i = 0; i < n; ++i) out.push_back(g.next());
  return out;
}

RelationTemplate make_variant(int rel, int variant) {
  const auto& aux = aux_words();
  const auto& prep = prep_words();
  const auto& art = article_words();
  const auto& lead = connector_words();
  RelationTemplate t;
  if (variant > 0 && variant % 2 == 0) t.tokens.push_back(lead[(rel + variant) % lead.size()]);
  t.tokens.push_back("[S]");
  t.tokens.push_back(aux[(rel + 3 * variant) % aux.size()]);
  t.tokens.push_back(prep[rel % prep.size()]);  // the relation signature
  t.tokens.push_back(art[(2 * rel + 5 * variant) % art.size()]);
  t.tokens.push_back("[O]");
  return t;
}

const RelationTemplate& variant_template(const World& w, const FactTuple& f, int variant) {
  const Relation& rel = w.spec.templates.at(f.relation_id);
  if (variant == 0) return rel.canonical;
  return rel.paraphrases.at(variant - 1);
}

}  // namespace

Tokenizer Tokenizer::build(const WorldSpec& spec) {
  Tokenizer t;
  auto add = [&t](const std::string& w) {
    if (t.ids.count(w)) return;
    t.ids[w] = static_cast<int>(t.vocab.size());
    t.vocab.push_back(w);
  };
  add("<eos>");
  add(".");
  add("?");
  for (const std::string& w : function_words()) add(w);
  for (const std::string& w : spec.filler_words) add(w);
  for (const std::string& w : spec.pos_markers) add(w);
  for (const std::string& w : spec.neg_markers) add(w);
  for (const std::string& w : spec.subjects) add(w);
  for (const auto& [name, objects] : spec.categories)
    for (const std::string& w : objects) add(w);
  t.eos_id = t.ids.at("<eos>");
  return t;
}

int Tokenizer::id(const std::string& word) const {
  auto it = ids.find(word);
  if (it == ids.end()) throw std::invalid_argument("unknown token: " + word);
  return it->second;
}

const std::vector<std::string>& World::category_objects(const std::string& name) const {
  for (const auto& [n, objs] : spec.categories)
    if (n == name) return objs;
  throw std::invalid_argument("unknown category: " + name);
}

void World::rebuild_derived() {
  tok = Tokenizer::build(spec);
  stop_ids.clear();
  for (const std::string& w : spec.stop_words) stop_ids.insert(tok.id(w));
}

World generate_world(uint64_t seed, const WorldSizes& sizes) {
  require(sizes.facts >= 300, "infeasible sizes: need >= 300 facts");
  require(sizes.categories >= 4, "infeasible sizes: need >= 4 categories");
  require(sizes.objects_per_category >= 5, "infeasible sizes: need >= 5 objects per category");
  require(sizes.subjects >= sizes.facts, "infeasible sizes: need one subject per fact");
  require(sizes.categories <= static_cast<int>(prep_words().size()),
          "infeasible sizes: more categories than relation signatures");
  require(sizes.paraphrases_per_relation >= 4 && sizes.paraphrases_per_relation <= 8,
          "infeasible sizes: paraphrases_per_relation must be in [4, 8]");

  World w;
  w.spec.seed = seed;
  WordGen gen(seed);

  for (int c = 0; c < sizes.categories; ++c) {
    std::string name = c < static_cast<int>(category_name_pool().size())
                           ? category_name_pool()[c]
                           : "category" + std::to_string(c);
    w.spec.categories.emplace_back(name, gen_words(gen, sizes.objects_per_category));
  }
  w.spec.subjects = gen_words(gen, sizes.subjects);
  w.spec.filler_words = gen_words(gen, 24);
  w.spec.pos_markers = gen_words(gen, 8);
  w.spec.neg_markers = gen_words(gen, 8);

  for (int r = 0; r < sizes.categories; ++r) {
    Relation rel;
    rel.category = w.spec.categories[r].first;
    rel.canonical = make_variant(r, 0);
    for (int v = 1; v < sizes.paraphrases_per_relation; ++v)
      rel.paraphrases.push_back(make_variant(r, v));
    w.spec.templates.push_back(std::move(rel));
  }

  w.spec.stop_words = {"<eos>", ".", "?"};
  for (const std::string& s : function_words()) w.spec.stop_words.push_back(s);
  for (const std::string& s : w.spec.filler_words) w.spec.stop_words.push_back(s);
  for (const std::string& s : w.spec.pos_markers) w.spec.stop_words.push_back(s);
  for (const std::string& s : w.spec.neg_markers) w.spec.stop_words.push_back(s);

  Rng fact_rng = Rng(seed).substream("facts");
  for (int i = 0; i < sizes.facts; ++i) {
    FactTuple f;
    f.id = i;
    f.subject = w.spec.subjects[i];
    f.relation_id = i % sizes.categories;
    f.category = w.spec.templates[f.relation_id].category;
    const auto& objs = w.spec.categories[f.relation_id].second;
    f.true_object = objs[fact_rng.below(objs.size())];
    do {
      f.counterfactual_object = objs[fact_rng.below(objs.size())];
    } while (f.counterfactual_object == f.true_object);
    w.facts.push_back(std::move(f));
  }

  w.rebuild_derived();
  return w;
}

std::vector<std::string> render_prompt_words(const World& w, const FactTuple& f) {
  require(f.relation_id >= 0 && f.relation_id < static_cast<int>(w.spec.templates.size()),
          "unknown relation id");
  std::vector<std::string> out;
  for (const std::string& t : w.spec.templates[f.relation_id].canonical.tokens) {
    if (t == "[O]") break;  // object slot is trailing; prompt excludes it
    out.push_back(t == "[S]" ? f.subject : t);
  }
  return out;
}

std::vector<int> render_prompt(const World& w, const FactTuple& f) {
  std::vector<int> out;
  for (const std::string& t : render_prompt_words(w, f)) out.push_back(w.tok.id(t));
  return out;
}

std::vector<int> render_prompt_variant(const World& w, const FactTuple& f, int variant) {
  std::vector<int> out;
  for (const std::string& t : variant_template(w, f, variant).tokens) {
    if (t == "[O]") break;
    out.push_back(w.tok.id(t == "[S]" ? f.subject : t));
  }
  return out;
}

Sentence render_sentence(const World& w, const FactTuple& f, int variant, bool use_counterfactual) {
  Sentence out;
  const std::string& object = use_counterfactual ? f.counterfactual_object : f.true_object;
  for (const std::string& t : variant_template(w, f, variant).tokens) {
    if (t == "[S]") {
      out.push_back(w.tok.id(f.subject));
    } else if (t == "[O]") {
      out.push_back(w.tok.id(object));
    } else {
      out.push_back(w.tok.id(t));
    }
  }
  out.push_back(w.tok.id("."));
  out.push_back(w.tok.eos_id);
  return out;
}

int subject_position_in_prompt(const World& w, const FactTuple& f) {
  const auto& toks = w.spec.templates.at(f.relation_id).canonical.tokens;
  for (size_t i = 0; i < toks.size(); ++i)
    if (toks[i] == "[S]") return static_cast<int>(i);
  throw std::logic_error("template without subject slot");
}

int n_variants(const World& w, const FactTuple& f) {
  return 1 + static_cast<int>(w.spec.templates.at(f.relation_id).paraphrases.size());
}

std::vector<Sentence> make_filler_sentences(const World& w, int count, Rng& rng) {
  std::vector<int> pool;
  for (const std::string& s : w.spec.filler_words) pool.push_back(w.tok.id(s));
  for (const std::string& s : connector_words()) pool.push_back(w.tok.id(s));
  for (const std::string& s : article_words()) pool.push_back(w.tok.id(s));
  std::vector<Sentence> out;
  out.reserve(count);
  for (int i = 0; i < count; ++i) {
    const int len = 5 + static_cast<int>(rng.below(5));
    Sentence s;
    for (int j = 0; j < len; ++j) s.push_back(pool[rng.below(pool.size())]);
    s.push_back(w.tok.id("."));
    s.push_back(w.tok.eos_id);
    out.push_back(std::move(s));
  }
  return out;
}

std::vector<Sentence> build_pretrain_corpus(const World& w, std::span<const FactTuple> facts,
                                            int paraphrases_per_fact, double filler_ratio,
                                            Rng rng) {
  require(paraphrases_per_fact >= 3, "paraphrases_per_fact must be >= 3");
  require(filler_ratio >= 0.0 && filler_ratio < 1.0, "filler_ratio must be in [0, 1)");
  std::vector<Sentence> out;
  for (const FactTuple& f : facts) {
    const int nv = n_variants(w, f);
    require(paraphrases_per_fact <= nv, "world does not provide enough paraphrase templates");
    for (int v = 0; v < paraphrases_per_fact; ++v) out.push_back(render_sentence(w, f, v));
  }
  if (filler_ratio > 0.0) {
    const int n_fact = static_cast<int>(out.size());
    const int n_filler = static_cast<int>(filler_ratio / (1.0 - filler_ratio) * n_fact);
    Rng frng = rng.substream("filler");
    auto filler = make_filler_sentences(w, n_filler, frng);
    out.insert(out.end(), filler.begin(), filler.end());
  }
  Rng srng = rng.substream("shuffle");
  srng.shuffle(out);
  return out;
}

bool margin_keep(std::span<const double> first_token_probs, int true_object_id,
                 const std::unordered_set<int>& stop_ids, double margin) {
  require(margin > 0.0 && margin < 1.0, "margin must be in (0, 1)");
  int top = -1, second = -1;
  for (int v = 0; v < static_cast<int>(first_token_probs.size()); ++v) {
    if (stop_ids.count(v)) continue;
    if (top < 0 || first_token_probs[v] > first_token_probs[top]) {
      second = top;
      top = v;
    } else if (second < 0 || first_token_probs[v] > first_token_probs[second]) {
      second = v;
    }
  }
  if (top != true_object_id) return false;
  const double p2 = second >= 0 ? first_token_probs[second] : 0.0;
  return first_token_probs[top] - p2 >= margin;
}

std::vector<FactTuple> margin_filter(const model::TransformerLM& m, const World& w,
                                     std::span<const FactTuple> facts, double margin) {
  require(margin > 0.0 && margin < 1.0, "margin must be in (0, 1)");
  std::vector<FactTuple> kept;
  for (const FactTuple& f : facts) {
    auto prompt = render_prompt(w, f);
    auto fwd = model::forward(m, prompt);
    std::vector<double> probs = numerics::softmax(fwd.logits.row(fwd.logits.rows - 1));
    if (margin_keep(probs, w.tok.id(f.true_object), w.stop_ids, margin)) kept.push_back(f);
  }
  return kept;
}

std::pair<std::vector<FactTuple>, std::vector<FactTuple>> split_edit_intrinsic(
    const World& w, std::span<const FactTuple> kept, int n_edit, int n_intrinsic, uint64_t seed) {
  require(n_edit > 0 && n_intrinsic > 0, "split sizes must be positive");
  (void)w;
  Rng rng(seed);

  // Group by relation, shuffle groups, then hand whole relations to one side
  // so relation disjointness holds by construction.
  std::map<int, std::vector<FactTuple>> by_rel;
  for (const FactTuple& f : kept) by_rel[f.relation_id].push_back(f);
  std::vector<int> rel_ids;
  for (auto& [r, group] : by_rel) {
    rel_ids.push_back(r);
    Rng grng = rng.substream("rel" + std::to_string(r));
    grng.shuffle(group);
  }
  Rng order_rng = rng.substream("relorder");
  order_rng.shuffle(rel_ids);

  std::vector<FactTuple> edit, intrinsic;
  std::set<std::string> edit_objects, intrinsic_objects, edit_subjects, intrinsic_subjects;
  int rem_e = n_edit, rem_i = n_intrinsic;
  for (int r : rel_ids) {
    const auto& group = by_rel[r];
    const bool to_edit =
        rem_i <= 0 || (rem_e > 0 && static_cast<double>(rem_e) / n_edit >=
                                        static_cast<double>(rem_i) / n_intrinsic);
    auto& dst = to_edit ? edit : intrinsic;
    auto& dst_obj = to_edit ? edit_objects : intrinsic_objects;
    auto& other_obj = to_edit ? intrinsic_objects : edit_objects;
    auto& dst_sub = to_edit ? edit_subjects : intrinsic_subjects;
    auto& other_sub = to_edit ? intrinsic_subjects : edit_subjects;
    int& rem = to_edit ? rem_e : rem_i;
    for (const FactTuple& f : group) {
      if (rem <= 0) break;
      if (other_obj.count(f.true_object) || other_obj.count(f.counterfactual_object)) continue;
      if (other_sub.count(f.subject) || dst_sub.count(f.subject)) continue;
      dst.push_back(f);
      dst_obj.insert(f.true_object);
      dst_obj.insert(f.counterfactual_object);
      dst_sub.insert(f.subject);
      --rem;
    }
  }
  if (rem_e > 0 || rem_i > 0)
    throw std::runtime_error("split_edit_intrinsic: insufficient disjoint facts");
  return {std::move(edit), std::move(intrinsic)};
}

std::unordered_set<int> protected_token_ids(const World& w, std::span<const FactTuple> facts,
                                            bool scrub_counterfactuals) {
  std::unordered_set<int> out;
  for (const FactTuple& f : facts) {
    for (int t : render_prompt(w, f))
      if (!w.is_stop(t)) out.insert(t);
    out.insert(w.tok.id(f.true_object));
    if (scrub_counterfactuals) out.insert(w.tok.id(f.counterfactual_object));
  }
  return out;
}

std::vector<Sentence> scrub_overlap(std::span<const Sentence> corpus, const World& w,
                                    std::span<const FactTuple> protected_facts,
                                    bool scrub_counterfactuals) {
  auto blocked = protected_token_ids(w, protected_facts, scrub_counterfactuals);
  std::vector<Sentence> out;
  out.reserve(corpus.size());
  for (const Sentence& s : corpus) {
    bool hit = false;
    for (int t : s)
      if (blocked.count(t)) {
        hit = true;
        break;
      }
    if (!hit) out.push_back(s);
  }
  return out;
}

std::string task_name(TaskKind k) {
  switch (k) {
    case TaskKind::unstructured: return "unstructured";
    case TaskKind::structured: return "structured";
    case TaskKind::classification: return "classification";
    case TaskKind::sft: return "sft";
  }
  throw std::logic_error("bad task kind");
}

TaskKind task_from_name(const std::string& s) {
  for (TaskKind k : kAllTasks)
    if (task_name(k) == s) return k;
  throw std::invalid_argument("unknown task kind: " + s);
}

size_t TaskDataset::train_size() const {
  return kind == TaskKind::classification ? cls_train.size() : train.size();
}
size_t TaskDataset::val_size() const {
  return kind == TaskKind::classification ? cls_val.size() : val.size();
}

namespace {

int probe_first_non_stop(const model::TransformerLM& m, const World& w,
                         std::span<const int> prompt, int max_steps = 5) {
  const int budget = std::min<int>(max_steps, m.config.max_seq_len - static_cast<int>(prompt.size()));
  auto gen = model::greedy_decode(m, prompt, std::max(budget, 0));
  for (int t : gen)
    if (!w.is_stop(t)) return t;
  return -1;
}

model::LmExample lm_example_full(const Sentence& s) {
  model::LmExample ex;
  ex.tokens = s;
  ex.loss_mask.assign(s.size(), 1.0f);
  ex.loss_mask[0] = 0.0f;
  return ex;
}

std::vector<Sentence> dedupe(std::vector<Sentence> in) {
  std::set<Sentence> seen;
  std::vector<Sentence> out;
  for (Sentence& s : in)
    if (seen.insert(s).second) out.push_back(std::move(s));
  return out;
}

}  // namespace

TaskDataset build_downstream(const World& w, TaskKind kind, const model::TransformerLM& m,
                             std::span<const FactTuple> protected_facts, uint64_t seed,
                             const DownstreamSizes& sizes, bool scrub_counterfactuals) {
  require(sizes.train > 0 && sizes.val > 0, "downstream sizes must be positive");
  Rng rng(seed);
  TaskDataset ds;
  ds.kind = kind;
  ds.eos_id = w.tok.eos_id;

  std::set<int> protected_ids;
  for (const FactTuple& f : protected_facts) protected_ids.insert(f.id);
  std::vector<FactTuple> held_out;
  for (const FactTuple& f : w.facts)
    if (!protected_ids.count(f.id)) held_out.push_back(f);

  const int total = sizes.train + sizes.val;

  if (kind == TaskKind::classification) {
    // Marker-word sentences; labels balanced by alternation. No fact tokens,
    // so scrubbing cannot unbalance the set.
    std::set<Sentence> seen;
    std::vector<model::ClsExample> all;
    std::vector<int> pool;
    for (const std::string& s : w.spec.filler_words) pool.push_back(w.tok.id(s));
    for (const std::string& s : connector_words()) pool.push_back(w.tok.id(s));
    for (const std::string& s : article_words()) pool.push_back(w.tok.id(s));
    std::vector<std::vector<int>> markers(2);
    for (const std::string& s : w.spec.pos_markers) markers[1].push_back(w.tok.id(s));
    for (const std::string& s : w.spec.neg_markers) markers[0].push_back(w.tok.id(s));
    int label = 0;
    int guard = 0;
    while (static_cast<int>(all.size()) < total && guard++ < 100 * total) {
      const int len = 5 + static_cast<int>(rng.below(4));
      Sentence s;
      for (int j = 0; j < len; ++j) s.push_back(pool[rng.below(pool.size())]);
      const int n_marks = 1 + static_cast<int>(rng.below(2));
      for (int j = 0; j < n_marks; ++j) {
        const int pos = static_cast<int>(rng.below(s.size() + 1));
        s.insert(s.begin() + pos, markers[label][rng.below(markers[label].size())]);
      }
      s.push_back(w.tok.id("."));
      s.push_back(w.tok.eos_id);
      if (static_cast<int>(s.size()) > m.config.max_seq_len) continue;
      if (!seen.insert(s).second) continue;
      all.push_back({std::move(s), label});
      label = 1 - label;
    }
    require(static_cast<int>(all.size()) == total, "could not build classification dataset");
    ds.cls_val.assign(all.begin(), all.begin() + sizes.val);
    ds.cls_train.assign(all.begin() + sizes.val, all.end());
    return ds;
  }

  std::vector<Sentence> sentences;

  if (kind == TaskKind::unstructured) {
    for (const FactTuple& f : held_out)
      for (int v = 0; v < n_variants(w, f); ++v) sentences.push_back(render_sentence(w, f, v));
    sentences = scrub_overlap(sentences, w, protected_facts, scrub_counterfactuals);
    sentences = dedupe(std::move(sentences));
    Rng frng = rng.substream("filler");
    const int n_filler =
        std::max(total - static_cast<int>(sentences.size()), static_cast<int>(0.3 * total));
    auto filler = make_filler_sentences(w, n_filler, frng);
    sentences.insert(sentences.end(), filler.begin(), filler.end());
    sentences = dedupe(std::move(sentences));
  } else if (kind == TaskKind::structured) {
    // Prompt -> true-target pairs the current model gets wrong, mirroring the
    // edit-data format; supervise only the object position.
    std::vector<FactTuple> failing;
    for (const FactTuple& f : held_out) {
      auto prompt = render_prompt(w, f);
      if (probe_first_non_stop(m, w, prompt) != w.tok.id(f.true_object)) failing.push_back(f);
    }
    for (const FactTuple& f : failing)
      for (int v = 0; v < n_variants(w, f); ++v) sentences.push_back(render_sentence(w, f, v));
    sentences = scrub_overlap(sentences, w, protected_facts, scrub_counterfactuals);
    sentences = dedupe(std::move(sentences));
  } else {  // sft
    for (const FactTuple& f : held_out) {
      const Relation& rel = w.spec.templates.at(f.relation_id);
      for (int v = 0; v < n_variants(w, f); ++v) {
        const RelationTemplate& tpl = v == 0 ? rel.canonical : rel.paraphrases[v - 1];
        Sentence s;
        s.push_back(w.tok.id("what"));
        for (const std::string& t : tpl.tokens) {
          if (t == "[S]") {
            s.push_back(w.tok.id(f.subject));
          } else if (t == "[O]") {
            break;
          } else {
            s.push_back(w.tok.id(t));
          }
        }
        s.push_back(w.tok.id("?"));
        s.push_back(w.tok.id(f.true_object));  // answer token
        s.push_back(w.tok.id("."));
        s.push_back(w.tok.eos_id);
        sentences.push_back(std::move(s));
      }
    }
    sentences = scrub_overlap(sentences, w, protected_facts, scrub_counterfactuals);
    sentences = dedupe(std::move(sentences));
  }

  Rng srng = rng.substream("shuffle");
  srng.shuffle(sentences);
  if (static_cast<int>(sentences.size()) > total) sentences.resize(total);
  require(static_cast<int>(sentences.size()) > sizes.val,
          "not enough downstream data for task " + task_name(kind));

  auto to_example = [&](const Sentence& s) {
    if (kind == TaskKind::unstructured) return lm_example_full(s);
    model::LmExample ex;
    ex.tokens = s;
    ex.loss_mask.assign(s.size(), 0.0f);
    // answer = third-from-last token (object, then ".", then EOS)
    ex.loss_mask[s.size() - 3] = 1.0f;
    return ex;
  };
  for (size_t i = 0; i < sentences.size(); ++i) {
    auto ex = to_example(sentences[i]);
    if (static_cast<int>(i) < sizes.val) {
      ds.val.push_back(std::move(ex));
    } else {
      ds.train.push_back(std::move(ex));
    }
  }
  return ds;
}

void DatasetBundle::validate(const World& w) const {
  (void)w;
  std::set<std::string> es, eo, is, io;
  std::set<int> er, ir;
  for (const FactTuple& f : edit_set) {
    es.insert(f.subject);
    er.insert(f.relation_id);
    eo.insert(f.true_object);
    eo.insert(f.counterfactual_object);
  }
  for (const FactTuple& f : intrinsic_set) {
    is.insert(f.subject);
    ir.insert(f.relation_id);
    io.insert(f.true_object);
    io.insert(f.counterfactual_object);
  }
  auto disjoint = [](const auto& a, const auto& b) {
    for (const auto& x : a)
      if (b.count(x)) return false;
    return true;
  };
  if (!disjoint(es, is)) throw std::runtime_error("edit/intrinsic subject overlap");
  if (!disjoint(er, ir)) throw std::runtime_error("edit/intrinsic relation overlap");
  if (!disjoint(eo, io)) throw std::runtime_error("edit/intrinsic object overlap");
  for (const auto& [kind, ds] : tasks) {
    (void)kind;
    if (ds.kind == TaskKind::classification) {
      std::set<Sentence> tr;
      for (const auto& e : ds.cls_train) tr.insert(e.tokens);
      for (const auto& e : ds.cls_val)
        if (tr.count(e.tokens)) throw std::runtime_error("classification train/val overlap");
    } else {
      std::set<Sentence> tr;
      for (const auto& e : ds.train) tr.insert(e.tokens);
      for (const auto& e : ds.val)
        if (tr.count(e.tokens)) throw std::runtime_error("train/val overlap in " + task_name(ds.kind));
    }
  }
}

// --- persistence -------------------------------------------------------------

namespace {

json template_to_json(const RelationTemplate& t) { return json(t.tokens); }
RelationTemplate template_from_json(const json& j) {
  RelationTemplate t;
  t.tokens = j.get<std::vector<std::string>>();
  return t;
}

void atomic_write_text(const std::filesystem::path& path, const std::string& content) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open for write: " + tmp.string());
    out << content;
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace

std::string facts_to_json(std::span<const FactTuple> facts) {
  json arr = json::array();
  for (const FactTuple& f : facts)
    arr.push_back({{"s", f.subject},
                   {"r", f.relation_id},
                   {"o_true", f.true_object},
                   {"o_false", f.counterfactual_object},
                   {"cat", f.category}});
  return arr.dump(2) + "\n";
}

std::vector<FactTuple> facts_from_json(const std::string& text) {
  json arr = json::parse(text);
  std::vector<FactTuple> out;
  int id = 0;
  for (const json& j : arr) {
    FactTuple f;
    f.id = id++;
    f.subject = j.at("s").get<std::string>();
    f.relation_id = j.at("r").get<int>();
    f.true_object = j.at("o_true").get<std::string>();
    f.counterfactual_object = j.at("o_false").get<std::string>();
    f.category = j.at("cat").get<std::string>();
    out.push_back(std::move(f));
  }
  return out;
}

void save_world(const World& w, const std::filesystem::path& world_path,
                const std::filesystem::path& facts_path) {
  json jw;
  json cats = json::array();
  for (const auto& [name, objs] : w.spec.categories)
    cats.push_back({{"name", name}, {"objects", objs}});
  jw["categories"] = std::move(cats);
  jw["subjects"] = w.spec.subjects;
  json tpls = json::array();
  for (const Relation& r : w.spec.templates) {
    json jt;
    jt["category"] = r.category;
    jt["canonical"] = template_to_json(r.canonical);
    json ps = json::array();
    for (const RelationTemplate& p : r.paraphrases) ps.push_back(template_to_json(p));
    jt["paraphrases"] = std::move(ps);
    tpls.push_back(std::move(jt));
  }
  jw["templates"] = std::move(tpls);
  jw["stop_words"] = w.spec.stop_words;
  jw["seed"] = w.spec.seed;
  jw["filler_words"] = w.spec.filler_words;
  jw["class_markers"] = {{"pos", w.spec.pos_markers}, {"neg", w.spec.neg_markers}};
  atomic_write_text(world_path, jw.dump(2) + "\n");
  atomic_write_text(facts_path, facts_to_json(w.facts));
}

World load_world(const std::filesystem::path& world_path,
                 const std::filesystem::path& facts_path) {
  std::ifstream wf(world_path);
  if (!wf) throw std::runtime_error("cannot open world file: " + world_path.string());
  json jw = json::parse(wf);
  World w;
  for (const json& c : jw.at("categories"))
    w.spec.categories.emplace_back(c.at("name").get<std::string>(),
                                   c.at("objects").get<std::vector<std::string>>());
  w.spec.subjects = jw.at("subjects").get<std::vector<std::string>>();
  for (const json& jt : jw.at("templates")) {
    Relation r;
    r.category = jt.at("category").get<std::string>();
    r.canonical = template_from_json(jt.at("canonical"));
    for (const json& p : jt.at("paraphrases")) r.paraphrases.push_back(template_from_json(p));
    w.spec.templates.push_back(std::move(r));
  }
  w.spec.stop_words = jw.at("stop_words").get<std::vector<std::string>>();
  w.spec.seed = jw.at("seed").get<uint64_t>();
  w.spec.filler_words = jw.at("filler_words").get<std::vector<std::string>>();
  w.spec.pos_markers = jw.at("class_markers").at("pos").get<std::vector<std::string>>();
  w.spec.neg_markers = jw.at("class_markers").at("neg").get<std::vector<std::string>>();

  std::ifstream ff(facts_path);
  if (!ff) throw std::runtime_error("cannot open facts file: " + facts_path.string());
  std::string text((std::istreambuf_iterator<char>(ff)), std::istreambuf_iterator<char>());
  w.facts = facts_from_json(text);
  w.rebuild_derived();
  return w;
}

}  // namespace ketlab::corpus
