#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ketlab/numerics.hpp"
#include "ketlab/rng.hpp"

namespace ketlab::model {

using numerics::Matrix;

struct ModelConfig {
  int n_layers = 12;
  int d_model = 64;
  int n_heads = 4;
  int d_ff = 256;
  int vocab_size = 0;
  int max_seq_len = 32;
  uint64_t seed = 0;

  int head_dim() const { return d_model / n_heads; }
  void validate() const;  // throws std::invalid_argument
  bool operator==(const ModelConfig&) const = default;
};

std::string layer_param_name(int layer, std::string_view field);

/// Decoder-only pre-LN transformer with a flat, deterministically ordered
/// parameter registry. Registry order: tok_emb, pos_emb, per-layer tensors
/// in ascending layer order, final_ln_scale/shift, unembed.
///
/// Per-layer tensors and shapes (d = d_model, f = d_ff):
///   ln1_scale/ln1_shift 1xd, attn_qkv dx3d, attn_out dxd,
///   ln2_scale/ln2_shift 1xd, mlp_fc dxf, mlp_proj fxd.
/// mlp_proj is stored input-major (f x d): rows are keys, columns write the
/// residual stream. Activations are row vectors multiplying on the left.
/// Linear layers carry no bias terms.
struct TransformerLM {
  ModelConfig config;
  std::vector<std::string> names;
  std::vector<Matrix> tensors;

  static TransformerLM init(const ModelConfig& cfg);

  int param_index(std::string_view name) const;  // -1 if absent
  Matrix& param(std::string_view name);
  const Matrix& param(std::string_view name) const;
  size_t n_params() const;
};

/// Per-tensor FNV-1a checksums of the raw parameter bytes, keyed by name.
std::map<std::string, uint64_t> param_checksums(const TransformerLM& m);
uint64_t model_checksum(const TransformerLM& m);

/// true = trainable. Covers every registered parameter exactly once.
struct FreezeMask {
  std::vector<uint8_t> trainable;  // aligned to registry order

  static FreezeMask all(const TransformerLM& m, bool value);
  void set(const TransformerLM& m, std::string_view name, bool value);
  bool is_trainable(int idx) const { return trainable[idx] != 0; }
  int count_trainable() const;
};

struct ClassifierHead {
  Matrix weight;  // d_model x n_classes
  Matrix bias;    // 1 x n_classes

  static ClassifierHead init(const ModelConfig& cfg, int n_classes, uint64_t seed);
};

struct CaptureSpec {
  int layer = 0;
  int position = 0;
};

struct InjectionSpec {
  int layer = 0;
  int position = 0;
  std::vector<float> delta;  // length d_model, added to mlp_proj output
};

struct ForwardResult {
  Matrix logits;                                  // seq_len x vocab
  std::optional<std::vector<float>> captured_key; // length d_ff
};

ForwardResult forward(const TransformerLM& m, std::span<const int> tokens,
                      std::optional<CaptureSpec> capture = std::nullopt);
ForwardResult forward_injected(const TransformerLM& m, std::span<const int> tokens,
                               const InjectionSpec& inj,
                               std::optional<CaptureSpec> capture = std::nullopt);

/// One training example: token ids plus a per-position loss mask.
/// loss_mask[t] weighs the prediction of tokens[t] from position t-1;
/// loss_mask[0] is ignored.
struct LmExample {
  std::vector<int> tokens;
  std::vector<float> loss_mask;
};

struct GradMap {
  // parallel to the registry; empty Matrix means "not computed"
  std::vector<Matrix> grads;
  const Matrix* find(const TransformerLM& m, std::string_view name) const;
};

double batch_loss(const TransformerLM& m, std::span<const LmExample> batch);

/// Mean masked next-token loss and gradients for trainable parameters only.
/// Throws std::invalid_argument on an empty batch, an all-frozen mask is
/// allowed (loss only); an all-zero loss mask is an error.
std::pair<double, GradMap> loss_and_grads(const TransformerLM& m,
                                          std::span<const LmExample> batch,
                                          const FreezeMask& freeze);

/// Opaque forward state for the injected-residual optimization used by the
/// editing module: run once, then backpropagate an arbitrary dlogits to the
/// injected delta.
struct InjectedRun {
  struct Impl;
  std::shared_ptr<Impl> impl;
  const Matrix& logits() const;
};

InjectedRun injected_forward(const TransformerLM& m, std::span<const int> tokens,
                             const InjectionSpec& inj);
/// d loss / d delta for the given upstream dlogits (seq_len x vocab).
std::vector<float> injected_delta_grad(const TransformerLM& m, const InjectedRun& run,
                                       const Matrix& dlogits);

/// Class logits from the final-position hidden state (after the final layer
/// norm). The sequence must end with eos_id.
Matrix forward_classify(const TransformerLM& m, const ClassifierHead& head,
                        std::span<const int> tokens, int eos_id);

struct ClsExample {
  std::vector<int> tokens;  // ends with EOS
  int label = 0;
};

struct ClassifyGrads {
  double loss = 0.0;
  GradMap model_grads;
  Matrix head_weight_grad;
  Matrix head_bias_grad;
};

ClassifyGrads classify_loss_and_grads(const TransformerLM& m, const ClassifierHead& head,
                                      std::span<const ClsExample> batch, int eos_id,
                                      const FreezeMask& freeze);

/// Greedy argmax decoding; ties break toward the lowest token index.
std::vector<int> greedy_decode(const TransformerLM& m, std::span<const int> prompt, int max_new);

/// Top-k (token, probability) of the final-position next-token distribution,
/// descending probability, ties toward the lowest token index.
std::vector<std::pair<int, double>> logits_topk(const TransformerLM& m,
                                                std::span<const int> prompt, int k);

}  // namespace ketlab::model
