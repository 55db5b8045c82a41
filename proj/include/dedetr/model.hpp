#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "dedetr/sampling.hpp"
#include "dedetr/supervision.hpp"
#include "dedetr/tensor.hpp"

namespace dedetr {

struct ModelConfig {
  int64_t hidden_dim = 64;
  int num_heads = 4;
  int64_t num_queries = 25;
  int enc_layers = 2;
  int dec_layers = 3;
  int64_t num_classes = 6;
  int64_t ffn_dim = 256;
  int roi_resolution = 4;
  int num_levels = 3;          // pyramid levels the model expects
  int64_t in_channels = 16;    // raw feature channels per level
  bool sparse_sampling = true;  // decoder layers >= 2 sample inside boxes
  bool multiscale = true;       // sparse layers read all levels, not just the coarsest
  bool label_aug = true;        // recorded here so eval knows to run NMS
  bool box_refine = true;       // layer-wise reference update

  void validate() const;  // throws ConfigError

  // Levels sparse layers sample: all of them with multiscale, else the coarsest.
  std::vector<int> sample_levels() const;
};

struct AttentionParams {
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;
};

// Scaled dot-product attention with num_heads head splits of the last axis.
// Inputs are [len, D] or [batch, len, D]; q_pos/k_pos (same shape as q/k, or
// undefined for none) are added to queries/keys only, never values.
Tensor multi_head_attention(const AttentionParams& p, int num_heads, const Tensor& q,
                            const Tensor& k, const Tensor& v, const Tensor& q_pos,
                            const Tensor& k_pos);

class Model {
 public:
  Model(const ModelConfig& cfg, uint64_t seed);

  // Runs the full stack on a raw feature pyramid and returns one LayerOutput
  // per decoder layer (last = final predictions).
  std::vector<LayerOutput> forward(const FeaturePyramid& pyramid);

  const ModelConfig& config() const { return cfg_; }
  const std::vector<std::pair<std::string, Tensor>>& parameters() const { return params_; }
  Tensor param(const std::string& name) const;

  void zero_grads();

  // Exposed for tests: encode the coarsest level -> ([S, D] features, pos).
  std::pair<Tensor, Tensor> encode_top(const FeatureMap& top);

 private:
  Tensor add_param(const std::string& name, const Shape& dims);
  void init_params(uint64_t seed);
  AttentionParams attn(const std::string& prefix) const;
  Tensor ffn_block(const std::string& prefix, const Tensor& x) const;
  Tensor norm(const std::string& prefix, const Tensor& x) const;

  ModelConfig cfg_;
  std::vector<std::pair<std::string, Tensor>> params_;
};

}  // namespace dedetr
