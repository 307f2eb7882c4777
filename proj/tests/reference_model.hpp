#pragma once

// Independent double-precision forward pass used as the finite-difference
// oracle for backprop checks. Plain loops, no shared code with the library
// forward path beyond the parameter layout.

#include <cmath>
#include <span>
#include <vector>

#include "ketlab/model.hpp"

namespace ketlab::testref {

inline double ref_gelu(double x) {
  const double c0 = 0.7978845608028654;
  return 0.5 * x * (1.0 + std::tanh(c0 * (x + 0.044715 * x * x * x)));
}

struct RefInjection {
  int layer = -1;
  int position = -1;
  std::vector<double> delta;
};

// Forward loss of one sequence in double arithmetic, reading the model's
// binary32 parameters. Mirrors the architecture definition: pre-LN blocks,
// causal attention, tanh GELU, masked mean next-token loss.
inline double ref_sequence_loss_terms(const model::TransformerLM& m,
                                      std::span<const int> tokens,
                                      std::span<const float> mask,
                                      const RefInjection* inj, double* weight_out) {
  const auto& cfg = m.config;
  const int T = static_cast<int>(tokens.size());
  const int d = cfg.d_model, f = cfg.d_ff, H = cfg.n_heads, hd = cfg.d_model / cfg.n_heads;
  const double eps = 1e-5;

  auto P = [&](const char* name) -> const numerics::Matrix& { return m.param(name); };
  auto L = [&](int l, const char* field) -> const numerics::Matrix& {
    return m.param(model::layer_param_name(l, field));
  };

  std::vector<std::vector<double>> x(T, std::vector<double>(d));
  for (int t = 0; t < T; ++t)
    for (int j = 0; j < d; ++j)
      x[t][j] = static_cast<double>(P("tok_emb").at(tokens[t], j)) + P("pos_emb").at(t, j);

  auto layer_norm = [&](const std::vector<std::vector<double>>& in, const numerics::Matrix& scale,
                        const numerics::Matrix& shift) {
    std::vector<std::vector<double>> out(T, std::vector<double>(d));
    for (int t = 0; t < T; ++t) {
      double mu = 0, var = 0;
      for (int j = 0; j < d; ++j) mu += in[t][j];
      mu /= d;
      for (int j = 0; j < d; ++j) var += (in[t][j] - mu) * (in[t][j] - mu);
      var /= d;
      const double rstd = 1.0 / std::sqrt(var + eps);
      for (int j = 0; j < d; ++j)
        out[t][j] = (in[t][j] - mu) * rstd * scale.at(0, j) + shift.at(0, j);
    }
    return out;
  };

  for (int l = 0; l < cfg.n_layers; ++l) {
    auto ln1 = layer_norm(x, L(l, "ln1_scale"), L(l, "ln1_shift"));
    std::vector<std::vector<double>> qkv(T, std::vector<double>(3 * d, 0.0));
    for (int t = 0; t < T; ++t)
      for (int k = 0; k < d; ++k) {
        const double v = ln1[t][k];
        for (int c = 0; c < 3 * d; ++c) qkv[t][c] += v * L(l, "attn_qkv").at(k, c);
      }
    std::vector<std::vector<double>> ctx(T, std::vector<double>(d, 0.0));
    const double inv_scale = 1.0 / std::sqrt(static_cast<double>(hd));
    for (int h = 0; h < H; ++h) {
      const int qo = h * hd, ko = d + h * hd, vo = 2 * d + h * hd;
      for (int i = 0; i < T; ++i) {
        std::vector<double> s(i + 1);
        double mx = -1e300;
        for (int j = 0; j <= i; ++j) {
          double dot = 0;
          for (int r = 0; r < hd; ++r) dot += qkv[i][qo + r] * qkv[j][ko + r];
          s[j] = dot * inv_scale;
          mx = std::max(mx, s[j]);
        }
        double denom = 0;
        for (int j = 0; j <= i; ++j) {
          s[j] = std::exp(s[j] - mx);
          denom += s[j];
        }
        for (int j = 0; j <= i; ++j) {
          const double p = s[j] / denom;
          for (int r = 0; r < hd; ++r) ctx[i][h * hd + r] += p * qkv[j][vo + r];
        }
      }
    }
    std::vector<std::vector<double>> res1(T, std::vector<double>(d));
    for (int t = 0; t < T; ++t)
      for (int j = 0; j < d; ++j) {
        double a = 0;
        for (int k = 0; k < d; ++k) a += ctx[t][k] * L(l, "attn_out").at(k, j);
        res1[t][j] = x[t][j] + a;
      }
    auto ln2 = layer_norm(res1, L(l, "ln2_scale"), L(l, "ln2_shift"));
    for (int t = 0; t < T; ++t) {
      std::vector<double> h1(f, 0.0);
      for (int k = 0; k < d; ++k) {
        const double v = ln2[t][k];
        for (int c = 0; c < f; ++c) h1[c] += v * L(l, "mlp_fc").at(k, c);
      }
      for (int c = 0; c < f; ++c) h1[c] = ref_gelu(h1[c]);
      std::vector<double> mo(d, 0.0);
      for (int c = 0; c < f; ++c) {
        const double v = h1[c];
        for (int j = 0; j < d; ++j) mo[j] += v * L(l, "mlp_proj").at(c, j);
      }
      if (inj && inj->layer == l && inj->position == t)
        for (int j = 0; j < d; ++j) mo[j] += inj->delta[j];
      for (int j = 0; j < d; ++j) x[t][j] = res1[t][j] + mo[j];
    }
  }

  auto lnf = layer_norm(x, P("final_ln_scale"), P("final_ln_shift"));
  double loss_sum = 0.0, weight = 0.0;
  for (int t = 1; t < T; ++t) {
    const double w = mask[t];
    if (w == 0.0) continue;
    std::vector<double> logits(cfg.vocab_size, 0.0);
    for (int k = 0; k < d; ++k) {
      const double v = lnf[t - 1][k];
      for (int c = 0; c < cfg.vocab_size; ++c) logits[c] += v * P("unembed").at(k, c);
    }
    double mx = -1e300;
    for (double z : logits) mx = std::max(mx, z);
    double denom = 0.0;
    for (double z : logits) denom += std::exp(z - mx);
    loss_sum += w * (-(logits[tokens[t]] - mx) + std::log(denom));
    weight += w;
  }
  if (weight_out) *weight_out = weight;
  return loss_sum;
}

inline double ref_batch_loss(const model::TransformerLM& m,
                             std::span<const model::LmExample> batch,
                             const RefInjection* inj = nullptr) {
  double loss = 0.0, weight = 0.0;
  for (const model::LmExample& ex : batch) {
    double w = 0.0;
    loss += ref_sequence_loss_terms(m, ex.tokens, ex.loss_mask, inj, &w);
    weight += w;
  }
  return loss / weight;
}

}  // namespace ketlab::testref
