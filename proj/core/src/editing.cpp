#include "ketlab/editing.hpp"

#include <Eigen/Dense>

#include <cmath>

#include "json.hpp"
#include "ketlab/evaluation.hpp"

namespace ketlab::editing {

using corpus::FactTuple;
using corpus::World;
using model::TransformerLM;
using numerics::Rng;

namespace {

void require(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

int svd_rank(const Matrix& delta, double rel_tol = 1e-5) {
  Eigen::MatrixXd d(delta.rows, delta.cols);
  for (int i = 0; i < delta.rows; ++i)
    for (int j = 0; j < delta.cols; ++j) d(i, j) = delta.at(i, j);
  Eigen::BDCSVD<Eigen::MatrixXd> svd(d);
  const auto& sv = svd.singularValues();
  if (sv.size() == 0 || sv(0) <= 0.0) return 0;
  int rank = 0;
  for (int i = 0; i < sv.size(); ++i)
    if (sv(i) > rel_tol * sv(0)) ++rank;
  return rank;
}

Matrix sub(const Matrix& a, const Matrix& b) {
  Matrix out = a;
  for (size_t i = 0; i < out.data.size(); ++i) out.data[i] -= b.data[i];
  return out;
}

}  // namespace

std::string method_name(EditMethod m) { return m == EditMethod::FT ? "ft" : "rome"; }

EditMethod method_from_name(const std::string& s) {
  if (s == "ft") return EditMethod::FT;
  if (s == "rome") return EditMethod::ROME;
  throw std::invalid_argument("unknown edit method: " + s);
}

void EditHyperparams::validate() const {
  require(ft.lr > 0 && ft.max_steps > 0 && ft.early_stop_loss > 0 && ft.weight_decay >= 0,
          "invalid FT hyperparameters");
  require(rome.v_lr > 0 && rome.v_max_steps > 0 && rome.v_weight_decay >= 0 &&
              rome.kl_factor >= 0 && rome.covariance_samples > 0 && rome.covariance_jitter > 0 &&
              rome.key_prefixes > 0,
          "invalid ROME hyperparameters");
}

std::string EditOutcome::to_json(const EditRequest& req) const {
  nlohmann::json j;
  j["method"] = method_name(req.method);
  j["layer"] = req.layer;
  j["fact"] = {{"s", req.fact.subject},
               {"r", req.fact.relation_id},
               {"o_true", req.fact.true_object},
               {"o_false", req.fact.counterfactual_object},
               {"cat", req.fact.category}};
  if (req.method == EditMethod::FT) {
    j["hyper"] = {{"lr", req.hyper.ft.lr},
                  {"max_steps", req.hyper.ft.max_steps},
                  {"weight_decay", req.hyper.ft.weight_decay},
                  {"early_stop_loss", req.hyper.ft.early_stop_loss}};
  } else {
    j["hyper"] = {{"v_lr", req.hyper.rome.v_lr},
                  {"v_max_steps", req.hyper.rome.v_max_steps},
                  {"v_weight_decay", req.hyper.rome.v_weight_decay},
                  {"kl_factor", req.hyper.rome.kl_factor},
                  {"covariance_samples", req.hyper.rome.covariance_samples},
                  {"covariance_jitter", req.hyper.rome.covariance_jitter},
                  {"key_prefixes", req.hyper.rome.key_prefixes}};
  }
  j["success"] = success;
  j["steps_used"] = steps_used;
  j["update_rank"] = update_rank;
  j["delta_frobenius"] = delta_frobenius;
  j["pre_prob"] = pre_prob;
  j["post_prob"] = post_prob;
  return j.dump(2) + "\n";
}

double target_first_token_prob(const TransformerLM& m, const World& w, const FactTuple& fact,
                               bool counterfactual) {
  auto prompt = corpus::render_prompt(w, fact);
  auto fwd = model::forward(m, prompt);
  auto probs = numerics::softmax(fwd.logits.row(fwd.logits.rows - 1));
  const int target = w.tok.id(counterfactual ? fact.counterfactual_object : fact.true_object);
  return probs[target];
}

bool verify_edit(const TransformerLM& m, const World& w, const FactTuple& fact) {
  auto prompt = corpus::render_prompt(w, fact);
  auto tok = evaluation::first_non_stop_token(m, prompt, w.stop_ids, 5);
  return tok.has_value() && *tok == w.tok.id(fact.counterfactual_object);
}

EditOutcome ft_edit(TransformerLM& m, const World& w, const EditRequest& req) {
  require(req.method == EditMethod::FT, "ft_edit: request method must be FT");
  require(req.layer >= 0 && req.layer < m.config.n_layers, "ft_edit: layer out of range");
  req.hyper.validate();
  const FtHyper& h = req.hyper.ft;

  EditOutcome out;
  out.pre_prob = target_first_token_prob(m, w, req.fact, true);

  const std::string pname = model::layer_param_name(req.layer, "mlp_proj");
  Matrix before = m.param(pname);

  model::LmExample ex;
  ex.tokens = corpus::render_prompt(w, req.fact);
  const int obj_pos = static_cast<int>(ex.tokens.size());
  ex.tokens.push_back(w.tok.id(req.fact.counterfactual_object));
  ex.loss_mask.assign(ex.tokens.size(), 0.0f);
  ex.loss_mask[obj_pos] = 1.0f;

  model::FreezeMask mask = model::FreezeMask::all(m, false);
  mask.set(m, pname, true);

  numerics::AdamState state(m.param(pname));
  std::span<const model::LmExample> batch(&ex, 1);
  for (int step = 0; step < h.max_steps; ++step) {
    auto [loss, grads] = model::loss_and_grads(m, batch, mask);
    if (loss < h.early_stop_loss) break;
    const Matrix* g = grads.find(m, pname);
    numerics::adam_step(m.param(pname), *g, state, step + 1, h.lr, 0.9, 0.999, 1e-8,
                        h.weight_decay);
    out.steps_used = step + 1;
  }

  Matrix delta = sub(m.param(pname), before);
  out.delta_frobenius = numerics::frobenius_norm(delta);
  out.update_rank = out.delta_frobenius > 0 ? svd_rank(delta) : 0;
  out.post_prob = target_first_token_prob(m, w, req.fact, true);
  out.success = verify_edit(m, w, req.fact);
  return out;
}

Matrix estimate_key_covariance(const TransformerLM& m, int layer,
                               std::span<const std::vector<int>> sample_prompts, double lambda) {
  require(!sample_prompts.empty(), "estimate_key_covariance: need at least one sample prompt");
  require(layer >= 0 && layer < m.config.n_layers, "estimate_key_covariance: layer out of range");
  const int f = m.config.d_ff;
  std::vector<double> acc(static_cast<size_t>(f) * f, 0.0);
  for (const std::vector<int>& prompt : sample_prompts) {
    model::CaptureSpec cap{layer, static_cast<int>(prompt.size()) - 1};
    auto fwd = model::forward(m, prompt, cap);
    const std::vector<float>& k = *fwd.captured_key;
    for (int i = 0; i < f; ++i) {
      const double ki = k[i];
      double* row = acc.data() + static_cast<size_t>(i) * f;
      for (int j = 0; j < f; ++j) row[j] += ki * k[j];
    }
  }
  const double inv_n = 1.0 / static_cast<double>(sample_prompts.size());
  Matrix c(f, f);
  for (int i = 0; i < f; ++i)
    for (int j = 0; j < f; ++j) {
      double v = acc[static_cast<size_t>(i) * f + j] * inv_n;
      if (i == j) v += lambda;
      c.at(i, j) = static_cast<float>(v);
    }
  return c;
}

TargetValue compute_target_value(const TransformerLM& m, const World& w, const FactTuple& fact,
                                 int layer, const RomeHyper& hyper) {
  require(layer >= 0 && layer < m.config.n_layers, "compute_target_value: layer out of range");
  const int d = m.config.d_model;
  const int target = w.tok.id(fact.counterfactual_object);

  const std::vector<int> prompt = corpus::render_prompt(w, fact);
  const int subj_pos = corpus::subject_position_in_prompt(w, fact);
  const std::vector<int> subject_prompt(prompt.begin() + subj_pos, prompt.begin() + subj_pos + 1);

  // Original mlp_proj output at (layer, subject position): key times W.
  model::CaptureSpec cap{layer, subj_pos};
  auto bare = model::forward(m, prompt, cap);
  const Matrix& w_proj = m.param(model::layer_param_name(layer, "mlp_proj"));
  Matrix key_row(1, m.config.d_ff);
  std::copy(bare.captured_key->begin(), bare.captured_key->end(), key_row.data.begin());
  Matrix v0 = numerics::matmul(key_row, w_proj);  // 1 x d

  // KL anchor: unperturbed next-token distribution of the bare-subject prompt.
  auto anchor_fwd = model::forward(m, subject_prompt);
  std::vector<double> anchor_logq;
  {
    auto q = numerics::softmax(anchor_fwd.logits.row(anchor_fwd.logits.rows - 1));
    anchor_logq.resize(q.size());
    for (size_t i = 0; i < q.size(); ++i) anchor_logq[i] = std::log(std::max(q[i], 1e-300));
  }

  TargetValue out;
  out.delta.assign(d, 0.0f);
  Matrix delta_m(1, d);
  numerics::AdamState state(delta_m);
  const int V = m.config.vocab_size;
  const int last = static_cast<int>(prompt.size()) - 1;

  for (int step = 0; step < hyper.v_max_steps; ++step) {
    model::InjectionSpec inj{layer, subj_pos, out.delta};
    auto run = model::injected_forward(m, prompt, inj);
    auto sx = numerics::softmax_xent(run.logits().row(last), target);
    out.final_nll = sx.loss;

    model::InjectionSpec inj_subj{layer, subj_pos, out.delta};
    auto run_subj = model::injected_forward(m, subject_prompt, inj_subj);
    auto p = numerics::softmax(run_subj.logits().row(static_cast<int>(subject_prompt.size()) - 1));
    double kl = 0.0;
    for (int v = 0; v < V; ++v) {
      const double lp = std::log(std::max(p[v], 1e-300));
      kl += p[v] * (lp - anchor_logq[v]);
    }

    double penalty = 0.0;
    for (float x : out.delta) penalty += 0.5 * hyper.v_weight_decay * x * x;
    const double total = sx.loss + hyper.kl_factor * kl + penalty;
    if (!std::isfinite(total))
      throw std::runtime_error("compute_target_value: optimization diverged");
    if (sx.loss < 0.05) break;

    Matrix dlogits(run.logits().rows, V);
    for (int v = 0; v < V; ++v) dlogits.at(last, v) = sx.dlogits[v];
    std::vector<float> g = model::injected_delta_grad(m, run, dlogits);

    if (hyper.kl_factor > 0.0) {
      Matrix dkl(run_subj.logits().rows, V);
      const int spos = static_cast<int>(subject_prompt.size()) - 1;
      for (int v = 0; v < V; ++v) {
        const double lp = std::log(std::max(p[v], 1e-300));
        dkl.at(spos, v) = static_cast<float>(hyper.kl_factor * p[v] * ((lp - anchor_logq[v]) - kl));
      }
      std::vector<float> gk = model::injected_delta_grad(m, run_subj, dkl);
      for (int j = 0; j < d; ++j) g[j] += gk[j];
    }
    for (int j = 0; j < d; ++j)
      g[j] += static_cast<float>(hyper.v_weight_decay * out.delta[j]);

    Matrix gm(1, d);
    std::copy(g.begin(), g.end(), gm.data.begin());
    std::copy(out.delta.begin(), out.delta.end(), delta_m.data.begin());
    numerics::adam_step(delta_m, gm, state, step + 1, hyper.v_lr, 0.9, 0.999, 1e-8, 0.0);
    std::copy(delta_m.data.begin(), delta_m.data.end(), out.delta.begin());
    out.steps_used = step + 1;
  }

  out.v_star.resize(d);
  for (int j = 0; j < d; ++j) out.v_star[j] = v0.at(0, j) + out.delta[j];
  return out;
}

Matrix rome_insert(const Matrix& W, std::span<const float> k_star, std::span<const float> v_star,
                   const Matrix& C) {
  require(W.cols == static_cast<int>(k_star.size()), "rome_insert: key dimension mismatch");
  require(W.rows == static_cast<int>(v_star.size()), "rome_insert: value dimension mismatch");
  require(C.rows == C.cols && C.rows == W.cols, "rome_insert: covariance dimension mismatch");

  Matrix k_col = Matrix::column(k_star);
  Matrix c_inv_k = numerics::solve_spd(C, k_col);  // d_in x 1
  const double denom = numerics::dot(
      std::span<const float>(c_inv_k.data.data(), c_inv_k.data.size()), k_star);
  if (std::abs(denom) < 1e-10) throw DegenerateKeyError("rome_insert: degenerate key");

  // residual = v* - W k*
  std::vector<double> resid(W.rows, 0.0);
  for (int i = 0; i < W.rows; ++i) {
    double s = 0.0;
    for (int j = 0; j < W.cols; ++j) s += static_cast<double>(W.at(i, j)) * k_star[j];
    resid[i] = static_cast<double>(v_star[i]) - s;
  }

  Matrix out = W;
  for (int i = 0; i < W.rows; ++i) {
    const double ri = resid[i] / denom;
    for (int j = 0; j < W.cols; ++j)
      out.at(i, j) = static_cast<float>(out.at(i, j) + ri * c_inv_k.data[j]);
  }
  if (!numerics::all_finite(out)) throw std::runtime_error("rome_insert: non-finite update");
  return out;
}

EditOutcome rome_edit(TransformerLM& m, const World& w, const EditRequest& req,
                      std::span<const corpus::Sentence> covariance_corpus, Rng rng) {
  require(req.method == EditMethod::ROME, "rome_edit: request method must be ROME");
  require(req.layer >= 0 && req.layer < m.config.n_layers, "rome_edit: layer out of range");
  require(!covariance_corpus.empty(), "rome_edit: empty covariance corpus");
  req.hyper.validate();
  const RomeHyper& h = req.hyper.rome;
  const int f = m.config.d_ff;

  EditOutcome out;
  out.pre_prob = target_first_token_prob(m, w, req.fact, true);

  const std::vector<int> prompt = corpus::render_prompt(w, req.fact);
  const int subj_pos = corpus::subject_position_in_prompt(w, req.fact);

  // k*: average key over filler-prefixed prompt variants.
  std::vector<int> prefix_pool;
  for (const std::string& word : w.spec.filler_words) prefix_pool.push_back(w.tok.id(word));
  Rng prefix_rng = rng.substream("prefixes");
  std::vector<double> k_acc(f, 0.0);
  for (int i = 0; i < h.key_prefixes; ++i) {
    std::vector<int> tokens;
    const int plen = 1 + static_cast<int>(prefix_rng.below(3));
    for (int j = 0; j < plen; ++j) tokens.push_back(prefix_pool[prefix_rng.below(prefix_pool.size())]);
    tokens.insert(tokens.end(), prompt.begin(), prompt.end());
    model::CaptureSpec cap{req.layer, plen + subj_pos};
    auto fwd = model::forward(m, tokens, cap);
    for (int j = 0; j < f; ++j) k_acc[j] += (*fwd.captured_key)[j];
  }
  std::vector<float> k_star(f);
  for (int j = 0; j < f; ++j) k_star[j] = static_cast<float>(k_acc[j] / h.key_prefixes);

  // Covariance over random-length prefixes of random corpus sentences.
  Rng cov_rng = rng.substream("covariance");
  std::vector<std::vector<int>> sample_prompts;
  sample_prompts.reserve(h.covariance_samples);
  for (int i = 0; i < h.covariance_samples; ++i) {
    const corpus::Sentence& s = covariance_corpus[cov_rng.below(covariance_corpus.size())];
    const int len = 1 + static_cast<int>(cov_rng.below(s.size()));
    sample_prompts.emplace_back(s.begin(), s.begin() + len);
  }
  Matrix cov = estimate_key_covariance(m, req.layer, sample_prompts, h.covariance_jitter);

  TargetValue tv = compute_target_value(m, w, req.fact, req.layer, h);
  out.steps_used = tv.steps_used;

  // Stored mlp_proj is input-major (f x d); the insert works in the
  // key-response convention (d x f), so transpose in and out.
  const std::string pname = model::layer_param_name(req.layer, "mlp_proj");
  const Matrix& stored = m.param(pname);
  Matrix w_math(stored.cols, stored.rows);
  for (int i = 0; i < stored.rows; ++i)
    for (int j = 0; j < stored.cols; ++j) w_math.at(j, i) = stored.at(i, j);

  Matrix w_new = rome_insert(w_math, k_star, tv.v_star, cov);

  Matrix& dst = m.param(pname);
  double fro = 0.0;
  for (int i = 0; i < dst.rows; ++i)
    for (int j = 0; j < dst.cols; ++j) {
      const double diff = static_cast<double>(w_new.at(j, i)) - dst.at(i, j);
      fro += diff * diff;
      dst.at(i, j) = w_new.at(j, i);
    }
  out.delta_frobenius = std::sqrt(fro);
  out.update_rank = out.delta_frobenius > 0 ? 1 : 0;
  out.post_prob = target_first_token_prob(m, w, req.fact, true);
  out.success = verify_edit(m, w, req.fact);
  return out;
}

}  // namespace ketlab::editing
