#include "ketlab/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <stdexcept>

namespace ketlab::model {

using numerics::Matrix;

namespace {

constexpr double kLnEps = 1e-5;
constexpr float kNegInf = -1e30f;

void require(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

double gelu(double x) {
  const double c0 = 0.7978845608028654;  // sqrt(2/pi)
  const double u = c0 * (x + 0.044715 * x * x * x);
  return 0.5 * x * (1.0 + std::tanh(u));
}

double gelu_grad(double x) {
  const double c0 = 0.7978845608028654;
  const double u = c0 * (x + 0.044715 * x * x * x);
  const double t = std::tanh(u);
  const double du = c0 * (1.0 + 3.0 * 0.044715 * x * x);
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
}

}  // namespace

void ModelConfig::validate() const {
  require(n_layers >= 2, "ModelConfig: n_layers must be >= 2");
  require(d_model > 0 && n_heads > 0 && d_ff > 0, "ModelConfig: dimensions must be positive");
  require(d_model % n_heads == 0, "ModelConfig: d_model must be divisible by n_heads");
  require(vocab_size >= 8, "ModelConfig: vocab_size must be >= 8");
  require(max_seq_len >= 2, "ModelConfig: max_seq_len must be >= 2");
}

std::string layer_param_name(int layer, std::string_view field) {
  return "layer" + std::to_string(layer) + "." + std::string(field);
}

TransformerLM TransformerLM::init(const ModelConfig& cfg) {
  cfg.validate();
  TransformerLM m;
  m.config = cfg;

  auto add = [&m](const std::string& name, int rows, int cols) {
    m.names.push_back(name);
    m.tensors.emplace_back(rows, cols);
  };

  const int d = cfg.d_model, f = cfg.d_ff;
  add("tok_emb", cfg.vocab_size, d);
  add("pos_emb", cfg.max_seq_len, d);
  for (int l = 0; l < cfg.n_layers; ++l) {
    add(layer_param_name(l, "ln1_scale"), 1, d);
    add(layer_param_name(l, "ln1_shift"), 1, d);
    add(layer_param_name(l, "attn_qkv"), d, 3 * d);
    add(layer_param_name(l, "attn_out"), d, d);
    add(layer_param_name(l, "ln2_scale"), 1, d);
    add(layer_param_name(l, "ln2_shift"), 1, d);
    add(layer_param_name(l, "mlp_fc"), d, f);
    add(layer_param_name(l, "mlp_proj"), f, d);
  }
  add("final_ln_scale", 1, d);
  add("final_ln_shift", 1, d);
  add("unembed", d, cfg.vocab_size);

  numerics::Rng root(cfg.seed);
  for (size_t i = 0; i < m.names.size(); ++i) {
    const std::string& name = m.names[i];
    Matrix& t = m.tensors[i];
    if (name.ends_with("_scale")) {
      t.fill(1.0f);
    } else if (name.ends_with("_shift")) {
      t.fill(0.0f);
    } else {
      double std = name == "pos_emb" ? 0.01 : 0.02;
      numerics::Rng r = root.substream(name);
      for (float& x : t.data) x = static_cast<float>(r.normal(0.0, std));
    }
  }
  return m;
}

int TransformerLM::param_index(std::string_view name) const {
  for (size_t i = 0; i < names.size(); ++i)
    if (names[i] == name) return static_cast<int>(i);
  return -1;
}

Matrix& TransformerLM::param(std::string_view name) {
  int i = param_index(name);
  require(i >= 0, "unknown parameter: " + std::string(name));
  return tensors[i];
}

const Matrix& TransformerLM::param(std::string_view name) const {
  int i = param_index(name);
  require(i >= 0, "unknown parameter: " + std::string(name));
  return tensors[i];
}

size_t TransformerLM::n_params() const {
  size_t n = 0;
  for (const Matrix& t : tensors) n += t.size();
  return n;
}

std::map<std::string, uint64_t> param_checksums(const TransformerLM& m) {
  std::map<std::string, uint64_t> out;
  for (size_t i = 0; i < m.names.size(); ++i) {
    const Matrix& t = m.tensors[i];
    std::string_view bytes(reinterpret_cast<const char*>(t.data.data()),
                           t.data.size() * sizeof(float));
    out[m.names[i]] = numerics::fnv1a64(bytes);
  }
  return out;
}

uint64_t model_checksum(const TransformerLM& m) {
  uint64_t acc = 0xcbf29ce484222325ULL;
  for (auto& [name, sum] : param_checksums(m)) {
    acc ^= numerics::fnv1a64(name);
    acc ^= sum;
    acc *= 0x100000001b3ULL;
  }
  return acc;
}

FreezeMask FreezeMask::all(const TransformerLM& m, bool value) {
  FreezeMask f;
  f.trainable.assign(m.names.size(), value ? 1 : 0);
  return f;
}

void FreezeMask::set(const TransformerLM& m, std::string_view name, bool value) {
  int i = m.param_index(name);
  require(i >= 0, "FreezeMask::set: unknown parameter " + std::string(name));
  trainable[i] = value ? 1 : 0;
}

int FreezeMask::count_trainable() const {
  int n = 0;
  for (uint8_t v : trainable) n += v;
  return n;
}

ClassifierHead ClassifierHead::init(const ModelConfig& cfg, int n_classes, uint64_t seed) {
  ClassifierHead h;
  h.weight = Matrix(cfg.d_model, n_classes);
  h.bias = Matrix(1, n_classes);
  numerics::Rng r(seed);
  for (float& x : h.weight.data) x = static_cast<float>(r.normal(0.0, 0.02));
  return h;
}

// ---------------------------------------------------------------------------
// forward / backward

namespace {

struct LnCache {
  Matrix out;
  std::vector<float> mean, rstd;
};

struct LayerCache {
  LnCache ln1, ln2;
  Matrix qkv;               // T x 3d
  std::vector<Matrix> att;  // per head, T x T row-causal softmax
  Matrix ctx;               // T x d
  Matrix attn_proj;         // T x d
  Matrix res1;              // T x d
  Matrix mlp_pre;           // T x f
  Matrix mlp_h;             // T x f
  Matrix res2;              // T x d (res1 + mlp output [+ injection])
};

struct SeqCache {
  std::vector<int> tokens;
  int T = 0;
  Matrix x0;  // T x d
  std::vector<LayerCache> layers;
  LnCache lnf;
  Matrix logits;  // T x vocab
};

void layer_norm_fwd(const Matrix& x, const Matrix& scale, const Matrix& shift, LnCache& c) {
  const int T = x.rows, d = x.cols;
  c.out = Matrix(T, d);
  c.mean.resize(T);
  c.rstd.resize(T);
  for (int t = 0; t < T; ++t) {
    double mu = 0.0;
    for (int j = 0; j < d; ++j) mu += x.at(t, j);
    mu /= d;
    double var = 0.0;
    for (int j = 0; j < d; ++j) {
      double dv = x.at(t, j) - mu;
      var += dv * dv;
    }
    var /= d;
    const double rstd = 1.0 / std::sqrt(var + kLnEps);
    c.mean[t] = static_cast<float>(mu);
    c.rstd[t] = static_cast<float>(rstd);
    for (int j = 0; j < d; ++j) {
      const double xhat = (x.at(t, j) - mu) * rstd;
      c.out.at(t, j) = static_cast<float>(xhat * scale.at(0, j) + shift.at(0, j));
    }
  }
}

/// dx += backward of layer norm; dscale/dshift accumulated when non-null.
void layer_norm_bwd(const Matrix& x, const Matrix& scale, const LnCache& c, const Matrix& dout,
                    Matrix& dx, Matrix* dscale, Matrix* dshift) {
  const int T = x.rows, d = x.cols;
  for (int t = 0; t < T; ++t) {
    const double mu = c.mean[t], rstd = c.rstd[t];
    double m_dxhat = 0.0, m_dxhat_xhat = 0.0;
    for (int j = 0; j < d; ++j) {
      const double xhat = (x.at(t, j) - mu) * rstd;
      const double dxhat = static_cast<double>(dout.at(t, j)) * scale.at(0, j);
      m_dxhat += dxhat;
      m_dxhat_xhat += dxhat * xhat;
    }
    m_dxhat /= d;
    m_dxhat_xhat /= d;
    for (int j = 0; j < d; ++j) {
      const double xhat = (x.at(t, j) - mu) * rstd;
      const double dxhat = static_cast<double>(dout.at(t, j)) * scale.at(0, j);
      dx.at(t, j) += static_cast<float>(rstd * (dxhat - m_dxhat - xhat * m_dxhat_xhat));
      if (dscale) dscale->at(0, j) += static_cast<float>(dout.at(t, j) * xhat);
      if (dshift) dshift->at(0, j) += dout.at(t, j);
    }
  }
}

void forward_seq(const TransformerLM& m, std::span<const int> tokens, const InjectionSpec* inj,
                 SeqCache& c) {
  const ModelConfig& cfg = m.config;
  const int T = static_cast<int>(tokens.size());
  require(T >= 1, "forward: empty token sequence");
  require(T <= cfg.max_seq_len, "forward: sequence longer than max_seq_len");
  for (int t : tokens)
    require(t >= 0 && t < cfg.vocab_size, "forward: token id out of vocabulary");
  if (inj) {
    require(inj->layer >= 0 && inj->layer < cfg.n_layers, "injection: layer out of range");
    require(inj->position >= 0 && inj->position < T, "injection: position out of range");
    require(static_cast<int>(inj->delta.size()) == cfg.d_model, "injection: delta size mismatch");
  }

  const int d = cfg.d_model, f = cfg.d_ff, H = cfg.n_heads, hd = cfg.head_dim();
  const float inv_scale = 1.0f / std::sqrt(static_cast<float>(hd));

  c.tokens.assign(tokens.begin(), tokens.end());
  c.T = T;
  const Matrix& tok_emb = m.tensors[0];
  const Matrix& pos_emb = m.tensors[1];
  c.x0 = Matrix(T, d);
  for (int t = 0; t < T; ++t)
    for (int j = 0; j < d; ++j) c.x0.at(t, j) = tok_emb.at(tokens[t], j) + pos_emb.at(t, j);

  c.layers.resize(cfg.n_layers);
  const Matrix* x = &c.x0;
  for (int l = 0; l < cfg.n_layers; ++l) {
    LayerCache& lc = c.layers[l];
    const Matrix& w_qkv = m.param(layer_param_name(l, "attn_qkv"));
    const Matrix& w_out = m.param(layer_param_name(l, "attn_out"));
    const Matrix& w_fc = m.param(layer_param_name(l, "mlp_fc"));
    const Matrix& w_proj = m.param(layer_param_name(l, "mlp_proj"));

    layer_norm_fwd(*x, m.param(layer_param_name(l, "ln1_scale")),
                   m.param(layer_param_name(l, "ln1_shift")), lc.ln1);
    lc.qkv = numerics::matmul(lc.ln1.out, w_qkv);

    lc.att.assign(H, Matrix());
    lc.ctx = Matrix(T, d);
    for (int h = 0; h < H; ++h) {
      Matrix& P = lc.att[h];
      P = Matrix(T, T);
      const int qo = h * hd, ko = d + h * hd, vo = 2 * d + h * hd;
      for (int i = 0; i < T; ++i) {
        // causal scores for row i
        float mx = kNegInf;
        for (int j = 0; j <= i; ++j) {
          double s = 0.0;
          for (int r = 0; r < hd; ++r)
            s += static_cast<double>(lc.qkv.at(i, qo + r)) * lc.qkv.at(j, ko + r);
          P.at(i, j) = static_cast<float>(s) * inv_scale;
          mx = std::max(mx, P.at(i, j));
        }
        double denom = 0.0;
        for (int j = 0; j <= i; ++j) {
          const double e = std::exp(static_cast<double>(P.at(i, j)) - mx);
          P.at(i, j) = static_cast<float>(e);
          denom += e;
        }
        for (int j = 0; j <= i; ++j) P.at(i, j) = static_cast<float>(P.at(i, j) / denom);
        for (int r = 0; r < hd; ++r) {
          double s = 0.0;
          for (int j = 0; j <= i; ++j)
            s += static_cast<double>(P.at(i, j)) * lc.qkv.at(j, vo + r);
          lc.ctx.at(i, h * hd + r) = static_cast<float>(s);
        }
      }
    }

    lc.attn_proj = numerics::matmul(lc.ctx, w_out);
    lc.res1 = *x;
    numerics::add_inplace(lc.res1, lc.attn_proj);

    layer_norm_fwd(lc.res1, m.param(layer_param_name(l, "ln2_scale")),
                   m.param(layer_param_name(l, "ln2_shift")), lc.ln2);
    lc.mlp_pre = numerics::matmul(lc.ln2.out, w_fc);
    lc.mlp_h = Matrix(T, f);
    for (size_t i = 0; i < lc.mlp_pre.data.size(); ++i)
      lc.mlp_h.data[i] = static_cast<float>(gelu(lc.mlp_pre.data[i]));
    Matrix mlp_out = numerics::matmul(lc.mlp_h, w_proj);
    if (inj && inj->layer == l)
      for (int j = 0; j < d; ++j) mlp_out.at(inj->position, j) += inj->delta[j];
    lc.res2 = lc.res1;
    numerics::add_inplace(lc.res2, mlp_out);
    x = &lc.res2;
  }

  layer_norm_fwd(*x, m.param("final_ln_scale"), m.param("final_ln_shift"), c.lnf);
  c.logits = numerics::matmul(c.lnf.out, m.param("unembed"));
}

struct BackwardOptions {
  const FreezeMask* freeze = nullptr;  // null: no parameter gradients
  GradMap* grads = nullptr;
  const InjectionSpec* inj = nullptr;  // where to capture d delta
  std::vector<float>* d_delta = nullptr;
  // Backward flows at least down to this layer even if nothing below is
  // trainable (used to reach an injection point).
  int min_layer = -1;
};

bool layer_has_trainable(const TransformerLM& m, const FreezeMask* f, int layer) {
  if (!f) return false;
  static const char* fields[] = {"ln1_scale", "ln1_shift", "attn_qkv", "attn_out",
                                 "ln2_scale", "ln2_shift", "mlp_fc",   "mlp_proj"};
  for (const char* fd : fields) {
    int idx = m.param_index(layer_param_name(layer, fd));
    if (idx >= 0 && f->is_trainable(idx)) return true;
  }
  return false;
}

bool name_trainable(const TransformerLM& m, const FreezeMask* f, std::string_view name) {
  if (!f) return false;
  int idx = m.param_index(name);
  return idx >= 0 && f->is_trainable(idx);
}

Matrix& grad_for(const TransformerLM& m, GradMap& g, std::string_view name) {
  int idx = m.param_index(name);
  Matrix& mat = g.grads[idx];
  if (mat.size() == 0) mat = Matrix(m.tensors[idx].rows, m.tensors[idx].cols);
  return mat;
}

/// Backward through the whole stack from (dlogits and/or a gradient on the
/// final-layer-norm output). Accumulates parameter grads for trainable
/// entries and optionally the injected-delta gradient.
void backward_seq(const TransformerLM& m, const SeqCache& c, const Matrix* dlogits,
                  const Matrix* d_lnf_out_seed, const BackwardOptions& opt) {
  const ModelConfig& cfg = m.config;
  const int T = c.T, d = cfg.d_model, H = cfg.n_heads, hd = cfg.head_dim();
  const float inv_scale = 1.0f / std::sqrt(static_cast<float>(hd));

  // Lowest layer the backward pass has to reach.
  int stop_layer = cfg.n_layers;  // nothing below final norm
  bool want_embeddings = false;
  if (opt.freeze) {
    want_embeddings = name_trainable(m, opt.freeze, "tok_emb") ||
                      name_trainable(m, opt.freeze, "pos_emb");
    if (want_embeddings) {
      stop_layer = 0;
    } else {
      for (int l = 0; l < cfg.n_layers; ++l)
        if (layer_has_trainable(m, opt.freeze, l)) {
          stop_layer = l;
          break;
        }
    }
  }
  if (opt.inj && opt.d_delta) stop_layer = std::min(stop_layer, opt.inj->layer);
  if (opt.min_layer >= 0) stop_layer = std::min(stop_layer, opt.min_layer);

  Matrix d_lnf_out(T, d);
  if (d_lnf_out_seed) d_lnf_out = *d_lnf_out_seed;
  if (dlogits) {
    require(dlogits->rows == T && dlogits->cols == cfg.vocab_size,
            "backward: dlogits shape mismatch");
    const Matrix& unembed = m.param("unembed");
    if (name_trainable(m, opt.freeze, "unembed"))
      numerics::matmul_tn_acc(c.lnf.out, *dlogits, grad_for(m, *opt.grads, "unembed"));
    numerics::add_inplace(d_lnf_out, numerics::matmul_nt(*dlogits, unembed));
  }

  const Matrix& x_top = cfg.n_layers > 0 ? c.layers.back().res2 : c.x0;
  Matrix d_res(T, d);
  {
    Matrix* dsc = nullptr;
    Matrix* dsh = nullptr;
    if (name_trainable(m, opt.freeze, "final_ln_scale"))
      dsc = &grad_for(m, *opt.grads, "final_ln_scale");
    if (name_trainable(m, opt.freeze, "final_ln_shift"))
      dsh = &grad_for(m, *opt.grads, "final_ln_shift");
    layer_norm_bwd(x_top, m.param("final_ln_scale"), c.lnf, d_lnf_out, d_res, dsc, dsh);
  }

  if (stop_layer >= cfg.n_layers) return;
  const int last_layer = want_embeddings ? 0 : stop_layer;

  for (int l = cfg.n_layers - 1; l >= last_layer; --l) {
    const LayerCache& lc = c.layers[l];
    const Matrix& x_in = l == 0 ? c.x0 : c.layers[l - 1].res2;
    auto pgrad = [&](const char* field) -> Matrix* {
      std::string name = layer_param_name(l, field);
      if (!name_trainable(m, opt.freeze, name)) return nullptr;
      return &grad_for(m, *opt.grads, name);
    };

    // res2 = res1 + mlp_out (+ delta at the injection row)
    if (opt.inj && opt.d_delta && opt.inj->layer == l) {
      opt.d_delta->assign(d, 0.0f);
      for (int j = 0; j < d; ++j) (*opt.d_delta)[j] = d_res.at(opt.inj->position, j);
    }
    const Matrix& w_proj = m.param(layer_param_name(l, "mlp_proj"));
    const Matrix& w_fc = m.param(layer_param_name(l, "mlp_fc"));
    if (Matrix* g = pgrad("mlp_proj")) numerics::matmul_tn_acc(lc.mlp_h, d_res, *g);
    Matrix d_mlp_h = numerics::matmul_nt(d_res, w_proj);
    Matrix d_mlp_pre(T, cfg.d_ff);
    for (size_t i = 0; i < d_mlp_pre.data.size(); ++i)
      d_mlp_pre.data[i] =
          static_cast<float>(d_mlp_h.data[i] * gelu_grad(lc.mlp_pre.data[i]));
    if (Matrix* g = pgrad("mlp_fc")) numerics::matmul_tn_acc(lc.ln2.out, d_mlp_pre, *g);
    Matrix d_ln2_out = numerics::matmul_nt(d_mlp_pre, w_fc);
    // d_res currently holds d(res2); res1 receives it directly plus the LN2 path.
    layer_norm_bwd(lc.res1, m.param(layer_param_name(l, "ln2_scale")), lc.ln2, d_ln2_out, d_res,
                   pgrad("ln2_scale"), pgrad("ln2_shift"));

    // attention branch: res1 = x_in + attn_proj
    const Matrix& w_out = m.param(layer_param_name(l, "attn_out"));
    const Matrix& w_qkv = m.param(layer_param_name(l, "attn_qkv"));
    if (Matrix* g = pgrad("attn_out")) numerics::matmul_tn_acc(lc.ctx, d_res, *g);
    Matrix d_ctx = numerics::matmul_nt(d_res, w_out);

    Matrix d_qkv(T, 3 * d);
    for (int h = 0; h < H; ++h) {
      const Matrix& P = lc.att[h];
      const int qo = h * hd, ko = d + h * hd, vo = 2 * d + h * hd;
      for (int i = 0; i < T; ++i) {
        // dV and dP over the causal range
        std::vector<double> dp(i + 1, 0.0);
        for (int j = 0; j <= i; ++j) {
          double s = 0.0;
          for (int r = 0; r < hd; ++r)
            s += static_cast<double>(d_ctx.at(i, h * hd + r)) * lc.qkv.at(j, vo + r);
          dp[j] = s;
          for (int r = 0; r < hd; ++r)
            d_qkv.at(j, vo + r) += static_cast<float>(
                static_cast<double>(P.at(i, j)) * d_ctx.at(i, h * hd + r));
        }
        double dot = 0.0;
        for (int j = 0; j <= i; ++j) dot += dp[j] * P.at(i, j);
        for (int j = 0; j <= i; ++j) {
          const double ds = P.at(i, j) * (dp[j] - dot) * inv_scale;
          for (int r = 0; r < hd; ++r) {
            d_qkv.at(i, qo + r) += static_cast<float>(ds * lc.qkv.at(j, ko + r));
            d_qkv.at(j, ko + r) += static_cast<float>(ds * lc.qkv.at(i, qo + r));
          }
        }
      }
    }

    if (Matrix* g = pgrad("attn_qkv")) numerics::matmul_tn_acc(lc.ln1.out, d_qkv, *g);
    Matrix d_ln1_out = numerics::matmul_nt(d_qkv, w_qkv);
    layer_norm_bwd(x_in, m.param(layer_param_name(l, "ln1_scale")), lc.ln1, d_ln1_out, d_res,
                   pgrad("ln1_scale"), pgrad("ln1_shift"));
  }

  if (want_embeddings && opt.grads) {
    Matrix* d_tok = name_trainable(m, opt.freeze, "tok_emb") ? &grad_for(m, *opt.grads, "tok_emb") : nullptr;
    Matrix* d_pos = name_trainable(m, opt.freeze, "pos_emb") ? &grad_for(m, *opt.grads, "pos_emb") : nullptr;
    for (int t = 0; t < T; ++t)
      for (int j = 0; j < d; ++j) {
        if (d_tok) d_tok->at(c.tokens[t], j) += d_res.at(t, j);
        if (d_pos) d_pos->at(t, j) += d_res.at(t, j);
      }
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// public surface

ForwardResult forward(const TransformerLM& m, std::span<const int> tokens,
                      std::optional<CaptureSpec> capture) {
  SeqCache c;
  forward_seq(m, tokens, nullptr, c);
  ForwardResult out;
  out.logits = std::move(c.logits);
  if (capture) {
    require(capture->layer >= 0 && capture->layer < m.config.n_layers,
            "capture: layer out of range");
    require(capture->position >= 0 && capture->position < c.T, "capture: position out of range");
    auto row = c.layers[capture->layer].mlp_h.row(capture->position);
    out.captured_key = std::vector<float>(row.begin(), row.end());
  }
  return out;
}

ForwardResult forward_injected(const TransformerLM& m, std::span<const int> tokens,
                               const InjectionSpec& inj, std::optional<CaptureSpec> capture) {
  SeqCache c;
  forward_seq(m, tokens, &inj, c);
  ForwardResult out;
  out.logits = std::move(c.logits);
  if (capture) {
    require(capture->layer >= 0 && capture->layer < m.config.n_layers,
            "capture: layer out of range");
    require(capture->position >= 0 && capture->position < c.T, "capture: position out of range");
    auto row = c.layers[capture->layer].mlp_h.row(capture->position);
    out.captured_key = std::vector<float>(row.begin(), row.end());
  }
  return out;
}

const Matrix* GradMap::find(const TransformerLM& m, std::string_view name) const {
  int idx = m.param_index(name);
  if (idx < 0 || grads[idx].size() == 0) return nullptr;
  return &grads[idx];
}

namespace {

double total_mask_weight(std::span<const LmExample> batch) {
  double w = 0.0;
  for (const LmExample& ex : batch) {
    require(ex.tokens.size() == ex.loss_mask.size(), "loss mask length mismatch");
    for (size_t t = 1; t < ex.tokens.size(); ++t) w += ex.loss_mask[t];
  }
  return w;
}

}  // namespace

double batch_loss(const TransformerLM& m, std::span<const LmExample> batch) {
  require(!batch.empty(), "batch_loss: empty batch");
  const double total_w = total_mask_weight(batch);
  require(total_w > 0.0, "batch_loss: empty effective loss mask");
  double loss = 0.0;
  for (const LmExample& ex : batch) {
    SeqCache c;
    forward_seq(m, ex.tokens, nullptr, c);
    for (size_t t = 1; t < ex.tokens.size(); ++t) {
      const float w = ex.loss_mask[t];
      if (w == 0.0f) continue;
      auto sx = numerics::softmax_xent(c.logits.row(static_cast<int>(t) - 1), ex.tokens[t]);
      loss += w * sx.loss;
    }
  }
  return loss / total_w;
}

std::pair<double, GradMap> loss_and_grads(const TransformerLM& m,
                                          std::span<const LmExample> batch,
                                          const FreezeMask& freeze) {
  require(!batch.empty(), "loss_and_grads: empty batch");
  require(freeze.trainable.size() == m.names.size(), "loss_and_grads: freeze mask misaligned");
  const double total_w = total_mask_weight(batch);
  require(total_w > 0.0, "loss_and_grads: empty effective loss mask");

  GradMap gm;
  gm.grads.resize(m.names.size());
  double loss = 0.0;
  for (const LmExample& ex : batch) {
    SeqCache c;
    forward_seq(m, ex.tokens, nullptr, c);
    Matrix dlogits(c.T, m.config.vocab_size);
    bool any = false;
    for (size_t t = 1; t < ex.tokens.size(); ++t) {
      const float w = ex.loss_mask[t];
      if (w == 0.0f) continue;
      auto sx = numerics::softmax_xent(c.logits.row(static_cast<int>(t) - 1), ex.tokens[t]);
      loss += w * sx.loss;
      const float scale = static_cast<float>(w / total_w);
      float* drow = dlogits.row(static_cast<int>(t) - 1).data();
      for (int v = 0; v < m.config.vocab_size; ++v) drow[v] += scale * sx.dlogits[v];
      any = true;
    }
    if (!any || freeze.count_trainable() == 0) continue;
    BackwardOptions opt;
    opt.freeze = &freeze;
    opt.grads = &gm;
    backward_seq(m, c, &dlogits, nullptr, opt);
  }
  // Grads exist for exactly the trainable parameters.
  for (size_t i = 0; i < m.names.size(); ++i)
    if (freeze.is_trainable(static_cast<int>(i)) && gm.grads[i].size() == 0)
      gm.grads[i] = Matrix(m.tensors[i].rows, m.tensors[i].cols);
  return {loss / total_w, std::move(gm)};
}

struct InjectedRun::Impl {
  SeqCache cache;
  InjectionSpec inj;
};

const Matrix& InjectedRun::logits() const { return impl->cache.logits; }

InjectedRun injected_forward(const TransformerLM& m, std::span<const int> tokens,
                             const InjectionSpec& inj) {
  InjectedRun run;
  run.impl = std::make_shared<InjectedRun::Impl>();
  run.impl->inj = inj;
  forward_seq(m, tokens, &run.impl->inj, run.impl->cache);
  return run;
}

std::vector<float> injected_delta_grad(const TransformerLM& m, const InjectedRun& run,
                                       const Matrix& dlogits) {
  std::vector<float> d_delta;
  BackwardOptions opt;
  opt.inj = &run.impl->inj;
  opt.d_delta = &d_delta;
  backward_seq(m, run.impl->cache, &dlogits, nullptr, opt);
  return d_delta;
}

Matrix forward_classify(const TransformerLM& m, const ClassifierHead& head,
                        std::span<const int> tokens, int eos_id) {
  require(!tokens.empty() && tokens.back() == eos_id, "forward_classify: sequence must end with EOS");
  SeqCache c;
  forward_seq(m, tokens, nullptr, c);
  const int n_classes = head.weight.cols;
  Matrix h(1, m.config.d_model);
  for (int j = 0; j < m.config.d_model; ++j) h.at(0, j) = c.lnf.out.at(c.T - 1, j);
  Matrix logits = numerics::matmul(h, head.weight);
  for (int j = 0; j < n_classes; ++j) logits.at(0, j) += head.bias.at(0, j);
  return logits;
}

ClassifyGrads classify_loss_and_grads(const TransformerLM& m, const ClassifierHead& head,
                                      std::span<const ClsExample> batch, int eos_id,
                                      const FreezeMask& freeze) {
  require(!batch.empty(), "classify_loss_and_grads: empty batch");
  const int n_classes = head.weight.cols;
  ClassifyGrads out;
  out.model_grads.grads.resize(m.names.size());
  out.head_weight_grad = Matrix(head.weight.rows, head.weight.cols);
  out.head_bias_grad = Matrix(1, n_classes);
  const float scale = 1.0f / static_cast<float>(batch.size());

  for (const ClsExample& ex : batch) {
    require(ex.label >= 0 && ex.label < n_classes, "classify: label out of range");
    require(!ex.tokens.empty() && ex.tokens.back() == eos_id,
            "classify: sequence must end with EOS");
    SeqCache c;
    forward_seq(m, ex.tokens, nullptr, c);
    Matrix h(1, m.config.d_model);
    for (int j = 0; j < m.config.d_model; ++j) h.at(0, j) = c.lnf.out.at(c.T - 1, j);
    Matrix logits = numerics::matmul(h, head.weight);
    for (int j = 0; j < n_classes; ++j) logits.at(0, j) += head.bias.at(0, j);
    auto sx = numerics::softmax_xent(logits.row(0), ex.label);
    out.loss += sx.loss / batch.size();

    Matrix dcls(1, n_classes);
    for (int j = 0; j < n_classes; ++j) dcls.at(0, j) = scale * sx.dlogits[j];
    numerics::matmul_tn_acc(h, dcls, out.head_weight_grad);
    for (int j = 0; j < n_classes; ++j) out.head_bias_grad.at(0, j) += dcls.at(0, j);

    if (freeze.count_trainable() > 0) {
      Matrix d_lnf(c.T, m.config.d_model);
      Matrix dh = numerics::matmul_nt(dcls, head.weight);
      for (int j = 0; j < m.config.d_model; ++j) d_lnf.at(c.T - 1, j) = dh.at(0, j);
      BackwardOptions opt;
      opt.freeze = &freeze;
      opt.grads = &out.model_grads;
      backward_seq(m, c, nullptr, &d_lnf, opt);
    }
  }
  return out;
}

std::vector<int> greedy_decode(const TransformerLM& m, std::span<const int> prompt, int max_new) {
  require(max_new >= 0, "greedy_decode: max_new must be >= 0");
  require(static_cast<int>(prompt.size()) + max_new <= m.config.max_seq_len,
          "greedy_decode: prompt does not fit max_seq_len - max_new");
  std::vector<int> seq(prompt.begin(), prompt.end());
  std::vector<int> out;
  for (int i = 0; i < max_new; ++i) {
    SeqCache c;
    forward_seq(m, seq, nullptr, c);
    auto row = c.logits.row(c.T - 1);
    int best = 0;
    for (int v = 1; v < m.config.vocab_size; ++v)
      if (row[v] > row[best]) best = v;
    out.push_back(best);
    seq.push_back(best);
  }
  return out;
}

std::vector<std::pair<int, double>> logits_topk(const TransformerLM& m,
                                                std::span<const int> prompt, int k) {
  require(k >= 0 && k <= m.config.vocab_size, "logits_topk: k out of range");
  SeqCache c;
  forward_seq(m, prompt, nullptr, c);
  std::vector<double> p = numerics::softmax(c.logits.row(c.T - 1));
  std::vector<int> idx(p.size());
  for (size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<int>(i);
  std::sort(idx.begin(), idx.end(), [&p](int a, int b) {
    if (p[a] != p[b]) return p[a] > p[b];
    return a < b;
  });
  std::vector<std::pair<int, double>> out;
  out.reserve(k);
  for (int i = 0; i < k; ++i) out.emplace_back(idx[i], p[idx[i]]);
  return out;
}

}  // namespace ketlab::model
