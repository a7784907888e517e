#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "aft/aft_layers.hpp"
#include "aft/nn.hpp"

namespace aft {

struct ModelConfig {
  std::size_t layers = 2;
  std::size_t d = 64;
  Variant variant = Variant::Local;
  std::size_t window = 8;       // local only
  bool hard_window = false;     // local only
  std::size_t factor_rank = 0;  // full/local: 0 = dense w, else w = u v^T with this rank
  std::size_t heads = 1;        // conv only
  std::size_t kernel = 3;       // conv only
  std::size_t ffn_mult = 4;
  double dropout = 0.1;
  std::size_t vocab = 256;
  std::size_t max_len = 128;
  bool learned_positions = true;

  /// Throws ConfigError describing the first invalid field.
  void validate() const;
  /// Position-bias parameters in one layer.
  std::size_t bias_parameter_count() const;
};

std::string to_json(const ModelConfig& cfg);
/// Starts from `base` and overrides the keys present. Unknown keys are a ConfigError.
ModelConfig model_config_from_json(std::string_view text, const ModelConfig& base = {});

struct ParamRef {
  std::string name;
  Tensor* value;
  bool decay;  // linear-transformation weight, subject to weight decay
};

struct Block {
  Tensor ln1_gain, ln1_bias;
  AftFullParams attn;  // full, local, simple (simple ignores attn.bias)
  AftConvParams conv;  // conv only
  Tensor ln2_gain, ln2_bias;
  Tensor w1, b1, w2, b2;
};

struct Model {
  ModelConfig cfg;
  Tensor tok_emb;  // [vocab x d]
  Tensor pos_emb;  // [max_len x d], empty without learned positions
  std::vector<Block> blocks;
  Tensor lnf_gain, lnf_bias;
  Tensor head_w, head_b;  // [d x vocab], [vocab]

  /// Fixed order, identical for any two models with the same config.
  std::vector<ParamRef> parameters();
  std::size_t parameter_count() const;
  Model zeros_like() const;
};

Model init_model(const ModelConfig& cfg, Rng& rng);

/// Token sequences laid out [batch x length] row-major.
struct Batch {
  std::size_t batch = 0, length = 0;
  std::vector<int> inputs, targets;
  std::vector<double> weight;  // 1 where the position contributes to the loss
};

struct BlockCache {
  nn::LayerNormCache ln1, ln2;
  AftCache attn;
  Tensor drop1, drop2;
  Tensor h2, m1, g;
};

struct ModelCache {
  std::size_t batch = 0, length = 0;
  std::vector<int> tokens;
  std::vector<BlockCache> blocks;
  nn::LayerNormCache lnf;
  Tensor hf;
};

struct ModelForward {
  Tensor logits;  // [batch*length x vocab]
  ModelCache cache;
};

/// Causal forward. Dropout is active only when dropout_rng is non-null.
ModelForward model_forward(const Model& m, const std::vector<int>& tokens, std::size_t batch, std::size_t length,
                           Rng* dropout_rng, bool keep_cache);
/// Gradients of the loss whose logit gradient is dlogits, in a model-shaped container.
Model model_backward(const Model& m, const ModelCache& cache, const Tensor& dlogits);

/// Cross-entropy of a batch. Fills grads when non-null.
double model_loss(const Model& m, const Batch& b, Rng* dropout_rng, Model* grads);

}  // namespace aft
