#pragma once

// Minimal decoder-only causal transformer: pre-norm residual blocks, GELU MLP,
// learned positions. forward() returns logits plus the per-token last-layer
// hidden trajectory (taken after the final norm, i.e. the states that feed the
// unembedding).

#include <cstdint>
#include <string>
#include <vector>

#include "stp/tensor.hpp"

namespace stp {

// Reserved token ids (fixed vocabulary layout, shared with the data module).
inline constexpr int kPadToken = 0;
inline constexpr int kBosToken = 1;
inline constexpr int kEosToken = 2;
inline constexpr int kMaskToken = 3;

struct ModelConfig {
  int vocab_size = 64;
  int d_model = 64;
  int n_layers = 2;
  int n_heads = 2;
  int d_ff = 256;
  int max_seq_len = 96;
  bool tie_embeddings = false;

  void validate() const;  // throws std::invalid_argument
};

struct LayerParams {
  Tensor ln1_gain, ln1_bias, ln2_gain, ln2_bias;
  Tensor wq, wk, wv, wo;      // d_model x d_model
  Tensor w1, b1, w2, b2;      // d_model x d_ff, d_ff, d_ff x d_model, d_model
};

struct ModelParams {
  ModelConfig config;
  Tensor tok_embed;           // vocab x d_model
  Tensor pos_embed;           // max_seq_len x d_model
  std::vector<LayerParams> layers;
  Tensor final_gain, final_bias;
  Tensor unembed;             // d_model x vocab (absent when tied)

  // Fixed enumeration order (also the checkpoint order): token embedding,
  // positional embedding, all attention blocks, all MLP blocks, all pre-norm
  // affines, final norm affine, unembedding.
  std::vector<Tensor> all() const;
  size_t parameter_count() const;
};

struct HiddenTrajectory {
  Tensor states;              // seq_len x d_model, post-final-norm
  std::vector<int> tokens;
};

struct ForwardResult {
  Tensor logits;              // seq_len x vocab
  HiddenTrajectory trajectory;
};

// Weights ~ N(0, 0.02^2), norm gains 1, biases 0; deterministic in seed.
ModelParams init_params(const ModelConfig& config, uint64_t seed);

ForwardResult forward(const ModelParams& params, const std::vector<int>& tokens);

// Appends argmax tokens (lowest id wins ties); stops after emitting EOS or
// after max_new tokens. The returned sequence includes the prompt.
std::vector<int> greedy_decode(const ModelParams& params, const std::vector<int>& prompt,
                               int max_new);

// Checkpoint file: magic "STPC", u32 version=1, u32 {vocab, d_model, n_layers,
// n_heads, d_ff, max_seq_len, tie}, then f32 little-endian parameters in the
// fixed ModelParams order.
void save_checkpoint(const ModelParams& params, const std::string& path);
ModelParams load_checkpoint(const std::string& path);

}  // namespace stp
