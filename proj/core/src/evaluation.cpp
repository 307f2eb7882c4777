#include "ketlab/evaluation.hpp"

#include <algorithm>
#include <sstream>

#include "json.hpp"

namespace ketlab::evaluation {

using corpus::FactTuple;
using corpus::World;
using model::TransformerLM;

std::optional<int> first_non_stop_token(const TransformerLM& m, std::span<const int> prompt,
                                        const std::unordered_set<int>& stop_ids, int max_steps) {
  if (max_steps < 1) throw std::invalid_argument("first_non_stop_token: max_steps must be >= 1");
  std::vector<int> seq(prompt.begin(), prompt.end());
  const int room = m.config.max_seq_len - static_cast<int>(seq.size());
  const int budget = std::min(max_steps, room);
  for (int i = 0; i < budget; ++i) {
    auto next = model::greedy_decode(m, seq, 1);
    if (!stop_ids.count(next[0])) return next[0];
    seq.push_back(next[0]);
  }
  return std::nullopt;
}

std::vector<FactOutcome> fact_outcomes(const TransformerLM& m, const World& w,
                                       std::span<const FactTuple> facts, TargetKind kind,
                                       int max_steps) {
  std::vector<FactOutcome> out;
  out.reserve(facts.size());
  for (const FactTuple& f : facts) {
    const int target = w.tok.id(kind == TargetKind::edited_target ? f.counterfactual_object
                                                                  : f.true_object);
    auto prompt = corpus::render_prompt(w, f);
    auto tok = first_non_stop_token(m, prompt, w.stop_ids, max_steps);
    FactOutcome o;
    o.fact_id = f.id;
    o.predicted = tok.value_or(-1);
    o.correct = tok.has_value() && *tok == target;
    out.push_back(o);
  }
  return out;
}

double retention_rate(const TransformerLM& m, const World& w, std::span<const FactTuple> facts,
                      TargetKind kind, int max_steps) {
  if (facts.empty()) throw std::invalid_argument("retention_rate: empty fact set");
  auto outcomes = fact_outcomes(m, w, facts, kind, max_steps);
  long correct = 0;
  for (const FactOutcome& o : outcomes) correct += o.correct ? 1 : 0;
  return static_cast<double>(correct) / static_cast<double>(outcomes.size());
}

RetentionReport make_retention_report(const TransformerLM& m, const World& w,
                                      std::span<const FactTuple> edit_facts,
                                      std::span<const FactTuple> intrinsic_facts,
                                      std::string snapshot_tag) {
  RetentionReport r;
  r.snapshot_tag = std::move(snapshot_tag);
  r.edited_outcomes = fact_outcomes(m, w, edit_facts, TargetKind::edited_target);
  r.intrinsic_outcomes = fact_outcomes(m, w, intrinsic_facts, TargetKind::true_target);
  long ce = 0, ci = 0;
  for (const FactOutcome& o : r.edited_outcomes) ce += o.correct ? 1 : 0;
  for (const FactOutcome& o : r.intrinsic_outcomes) ci += o.correct ? 1 : 0;
  r.edited_rate = r.edited_outcomes.empty() ? 0.0 : static_cast<double>(ce) / r.edited_outcomes.size();
  r.intrinsic_rate =
      r.intrinsic_outcomes.empty() ? 0.0 : static_cast<double>(ci) / r.intrinsic_outcomes.size();
  return r;
}

std::string RetentionReport::to_json() const {
  nlohmann::json j;
  j["snapshot"] = snapshot_tag;
  j["edited_rate"] = edited_rate;
  j["intrinsic_rate"] = intrinsic_rate;
  auto dump = [](const std::vector<FactOutcome>& v) {
    nlohmann::json arr = nlohmann::json::array();
    for (const FactOutcome& o : v)
      arr.push_back({{"fact_id", o.fact_id}, {"predicted", o.predicted}, {"correct", o.correct}});
    return arr;
  };
  j["edited"] = dump(edited_outcomes);
  j["intrinsic"] = dump(intrinsic_outcomes);
  return j.dump(2) + "\n";
}

std::string RetentionReport::to_csv() const {
  std::ostringstream os;
  os << "snapshot,set,fact_id,predicted,correct\n";
  for (const FactOutcome& o : edited_outcomes)
    os << snapshot_tag << ",edited," << o.fact_id << "," << o.predicted << "," << o.correct << "\n";
  for (const FactOutcome& o : intrinsic_outcomes)
    os << snapshot_tag << ",intrinsic," << o.fact_id << "," << o.predicted << "," << o.correct
       << "\n";
  return os.str();
}

TokenClass classify_token(int token_id, const FactTuple& fact, const World& w) {
  const std::string& word = w.tok.word(token_id);
  if (word == fact.counterfactual_object) return TokenClass::EditTarget;
  if (word == fact.true_object) return TokenClass::True;
  for (const std::string& obj : w.category_objects(fact.category))
    if (obj == word) return TokenClass::Related;
  return TokenClass::Other;
}

ClassMasses token_class_masses(const TransformerLM& m, const World& w,
                               std::span<const FactTuple> facts) {
  if (facts.empty()) throw std::invalid_argument("token_class_masses: empty fact set");
  ClassMasses acc;
  for (const FactTuple& f : facts) {
    auto prompt = corpus::render_prompt(w, f);
    auto fwd = model::forward(m, prompt);
    auto probs = numerics::softmax(fwd.logits.row(fwd.logits.rows - 1));
    const int edit_id = w.tok.id(f.counterfactual_object);
    const int true_id = w.tok.id(f.true_object);
    double p_edit = probs[edit_id];
    double p_true = probs[true_id];
    double p_related = 0.0;
    for (const std::string& obj : w.category_objects(f.category)) {
      const int oid = w.tok.id(obj);
      if (oid == edit_id || oid == true_id) continue;
      p_related += probs[oid];
    }
    acc.p_edit_target += p_edit;
    acc.p_true += p_true;
    acc.p_related += p_related;
    acc.p_other += 1.0 - p_edit - p_true - p_related;
  }
  const double n = static_cast<double>(facts.size());
  acc.p_edit_target /= n;
  acc.p_true /= n;
  acc.p_related /= n;
  acc.p_other /= n;
  return acc;
}

TokenClassDistribution token_distribution(
    std::span<const std::pair<double, const TransformerLM*>> snapshots, const World& w,
    std::span<const FactTuple> facts) {
  if (snapshots.empty()) throw std::invalid_argument("token_distribution: need >= 1 snapshot");
  TokenClassDistribution dist;
  for (const auto& [epoch, m] : snapshots)
    dist.records.push_back({epoch, token_class_masses(*m, w, facts)});
  return dist;
}

std::string TokenClassDistribution::to_json() const {
  nlohmann::json arr = nlohmann::json::array();
  for (const Record& r : records)
    arr.push_back({{"epoch", r.epoch},
                   {"p_edit_target", r.masses.p_edit_target},
                   {"p_true", r.masses.p_true},
                   {"p_related", r.masses.p_related},
                   {"p_other", r.masses.p_other}});
  return arr.dump(2) + "\n";
}

std::vector<CaseStudyRow> case_study(
    std::span<const std::pair<std::string, const TransformerLM*>> snapshots, const World& w,
    const FactTuple& fact, int k) {
  if (k < 1) throw std::invalid_argument("case_study: k must be >= 1");
  auto prompt = corpus::render_prompt(w, fact);
  std::vector<CaseStudyRow> rows;
  for (const auto& [tag, m] : snapshots) {
    CaseStudyRow row;
    row.tag = tag;
    for (auto [tok, p] : model::logits_topk(*m, prompt, k)) row.topk.emplace_back(w.tok.word(tok), p);
    rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace ketlab::evaluation
