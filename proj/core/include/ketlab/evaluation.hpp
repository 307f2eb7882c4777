#pragma once

#include <optional>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

#include "ketlab/corpus.hpp"
#include "ketlab/model.hpp"

namespace ketlab::evaluation {

/// Greedy decoding until a non-stop token appears, at most max_steps
/// generations. nullopt when every generated token was a stop word
/// (callers count that as incorrect).
std::optional<int> first_non_stop_token(const model::TransformerLM& m,
                                        std::span<const int> prompt,
                                        const std::unordered_set<int>& stop_ids, int max_steps);

enum class TargetKind { edited_target, true_target };

struct FactOutcome {
  int fact_id = 0;
  int predicted = -1;  // -1: stop-word exhaustion
  bool correct = false;
};

struct RetentionReport {
  double edited_rate = 0.0;
  double intrinsic_rate = 0.0;
  std::vector<FactOutcome> edited_outcomes;
  std::vector<FactOutcome> intrinsic_outcomes;
  std::string snapshot_tag;
  std::string to_json() const;
  std::string to_csv() const;  // one row per fact
};

/// Fraction of facts whose target is the first non-stop token. Exact
/// counting; the rate is correct/total by construction.
double retention_rate(const model::TransformerLM& m, const corpus::World& w,
                      std::span<const corpus::FactTuple> facts, TargetKind kind,
                      int max_steps = 5);
std::vector<FactOutcome> fact_outcomes(const model::TransformerLM& m, const corpus::World& w,
                                       std::span<const corpus::FactTuple> facts, TargetKind kind,
                                       int max_steps = 5);
RetentionReport make_retention_report(const model::TransformerLM& m, const corpus::World& w,
                                      std::span<const corpus::FactTuple> edit_facts,
                                      std::span<const corpus::FactTuple> intrinsic_facts,
                                      std::string snapshot_tag);

enum class TokenClass { EditTarget, True, Related, Other };

/// Exactly one class per (token, fact): EditTarget if the counterfactual
/// target, True if the original target, Related for other same-category
/// objects, Other for everything else.
TokenClass classify_token(int token_id, const corpus::FactTuple& fact, const corpus::World& w);

struct ClassMasses {
  double p_edit_target = 0.0;
  double p_true = 0.0;
  double p_related = 0.0;
  double p_other = 0.0;
  double sum() const { return p_edit_target + p_true + p_related + p_other; }
};

/// First-generated-position softmax mass per token class, averaged over facts.
ClassMasses token_class_masses(const model::TransformerLM& m, const corpus::World& w,
                               std::span<const corpus::FactTuple> facts);

struct TokenClassDistribution {
  struct Record {
    double epoch = 0.0;
    ClassMasses masses;
  };
  std::vector<Record> records;
  std::string to_json() const;
};

TokenClassDistribution token_distribution(
    std::span<const std::pair<double, const model::TransformerLM*>> snapshots,
    const corpus::World& w, std::span<const corpus::FactTuple> facts);

struct CaseStudyRow {
  std::string tag;
  std::vector<std::pair<std::string, double>> topk;  // descending probability
};

std::vector<CaseStudyRow> case_study(
    std::span<const std::pair<std::string, const model::TransformerLM*>> snapshots,
    const corpus::World& w, const corpus::FactTuple& fact, int k);

}  // namespace ketlab::evaluation
