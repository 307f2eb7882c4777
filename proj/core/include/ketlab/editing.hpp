#pragma once

#include <span>
#include <string>
#include <vector>

#include "ketlab/corpus.hpp"
#include "ketlab/model.hpp"
#include "ketlab/rng.hpp"

namespace ketlab::editing {

using numerics::Matrix;

enum class EditMethod { FT, ROME };
std::string method_name(EditMethod m);
EditMethod method_from_name(const std::string& s);

struct FtHyper {
  double lr = 0.05;
  int max_steps = 25;
  double weight_decay = 0.0;
  double early_stop_loss = 0.01;
};

struct RomeHyper {
  double v_lr = 0.5;
  int v_max_steps = 50;
  double v_weight_decay = 0.015;
  double kl_factor = 0.0625;
  int covariance_samples = 200;
  double covariance_jitter = 1e-2;
  int key_prefixes = 5;
};

struct EditHyperparams {
  FtHyper ft;
  RomeHyper rome;
  void validate() const;
};

struct EditRequest {
  corpus::FactTuple fact;
  EditMethod method = EditMethod::FT;
  int layer = 0;
  EditHyperparams hyper;
};

struct EditOutcome {
  bool success = false;
  int steps_used = 0;
  int update_rank = 0;
  double delta_frobenius = 0.0;
  double pre_prob = 0.0;   // p(counterfactual target | prompt) before the edit
  double post_prob = 0.0;  // and after
  std::string to_json(const EditRequest& req) const;
};

/// Constrained fine-tuning edit: Adam (no decoupled decay) on
/// mlp_proj(req.layer) alone, single prompt -> counterfactual-target example,
/// stopping when the loss drops below early_stop_loss.
EditOutcome ft_edit(model::TransformerLM& m, const corpus::World& w, const EditRequest& req);

/// C = (1/N) sum k k^T + lambda I over keys captured at (layer, last
/// position) of the sample prompts, accumulated in binary64.
Matrix estimate_key_covariance(const model::TransformerLM& m, int layer,
                               std::span<const std::vector<int>> sample_prompts, double lambda);

struct TargetValue {
  std::vector<float> v_star;  // original mlp output + delta
  std::vector<float> delta;
  int steps_used = 0;
  double final_nll = 0.0;
};

/// Optimizes a residual delta added to the mlp_proj output at
/// (layer, subject-last position) so the counterfactual target becomes the
/// continuation, with a KL anchor on the bare-subject prompt distribution
/// and an L2 penalty (v_weight_decay) on delta.
TargetValue compute_target_value(const model::TransformerLM& m, const corpus::World& w,
                                 const corpus::FactTuple& fact, int layer, const RomeHyper& hyper);

/// Rank-one insertion in the key-response convention (W maps keys to values,
/// shape d_out x d_in): W' = W + (v* - W k*) (C^-1 k*)^T / ((C^-1 k*)^T k*).
Matrix rome_insert(const Matrix& W, std::span<const float> k_star, std::span<const float> v_star,
                   const Matrix& C);

struct DegenerateKeyError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Full ROME edit on mlp_proj(req.layer): averaged key over random filler
/// prefixes, covariance from corpus sample prompts, optimized target value,
/// rank-one insert. Only that matrix changes.
EditOutcome rome_edit(model::TransformerLM& m, const corpus::World& w, const EditRequest& req,
                      std::span<const corpus::Sentence> covariance_corpus, numerics::Rng rng);

/// True iff the first non-stop greedily generated token equals the
/// counterfactual target.
bool verify_edit(const model::TransformerLM& m, const corpus::World& w,
                 const corpus::FactTuple& fact);

/// p(target | prompt) at the first generated position.
double target_first_token_prob(const model::TransformerLM& m, const corpus::World& w,
                               const corpus::FactTuple& fact, bool counterfactual);

}  // namespace ketlab::editing
