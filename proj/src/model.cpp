#include "dedetr/model.hpp"

#include <cmath>

#include "dedetr/rng.hpp"

namespace dedetr {

void ModelConfig::validate() const {
  if (hidden_dim < 4 || hidden_dim % 4 != 0)
    throw ConfigError("hidden_dim must be a positive multiple of 4");
  if (num_heads < 1 || hidden_dim % num_heads != 0)
    throw ConfigError("num_heads must divide hidden_dim");
  if (num_queries < 1) throw ConfigError("num_queries must be >= 1");
  if (enc_layers < 0) throw ConfigError("enc_layers must be >= 0");
  if (dec_layers < 1) throw ConfigError("dec_layers must be >= 1");
  if (num_classes < 1) throw ConfigError("num_classes must be >= 1");
  if (ffn_dim < 1) throw ConfigError("ffn_dim must be >= 1");
  if (roi_resolution < 1) throw ConfigError("roi_resolution must be >= 1");
  if (num_levels < 1) throw ConfigError("num_levels must be >= 1");
  if (in_channels < 1) throw ConfigError("in_channels must be >= 1");
}

std::vector<int> ModelConfig::sample_levels() const {
  std::vector<int> out;
  if (multiscale) {
    for (int l = 0; l < num_levels; ++l) out.push_back(l);
  } else {
    out.push_back(num_levels - 1);
  }
  return out;
}

Tensor multi_head_attention(const AttentionParams& p, int num_heads, const Tensor& q,
                            const Tensor& k, const Tensor& v, const Tensor& q_pos,
                            const Tensor& k_pos) {
  const int64_t dim = p.wq.dims()[0];
  if (num_heads < 1 || dim % num_heads != 0)
    throw ConfigError("attention heads must divide the model width");
  if (q.rank() != k.rank() || (q.rank() != 2 && q.rank() != 3))
    throw ShapeError("attention inputs must both be rank 2 or rank 3");
  if (k.dims() != v.dims()) throw ShapeError("attention k/v shapes differ");
  if (q.dims().back() != dim || k.dims().back() != dim)
    throw ShapeError("attention input width disagrees with projection");
  if (q.rank() == 3 && q.dims()[0] != k.dims()[0])
    throw ShapeError("attention batch sizes differ");

  Tensor qi = q_pos.defined() ? add(q, q_pos) : q;
  Tensor ki = k_pos.defined() ? add(k, k_pos) : k;
  Tensor qp = linear(qi, p.wq, p.bq);
  Tensor kp = linear(ki, p.wk, p.bk);
  Tensor vp = linear(v, p.wv, p.bv);

  const int last = q.rank() - 1;
  const int64_t dh = dim / num_heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<int> swap_last =
      q.rank() == 2 ? std::vector<int>{1, 0} : std::vector<int>{0, 2, 1};

  std::vector<Tensor> heads;
  heads.reserve(num_heads);
  for (int h = 0; h < num_heads; ++h) {
    Tensor qh = slice(qp, last, h * dh, dh);
    Tensor kh = slice(kp, last, h * dh, dh);
    Tensor vh = slice(vp, last, h * dh, dh);
    Tensor scores = scale(matmul(qh, transpose(kh, swap_last)), inv_sqrt);
    Tensor att = softmax(scores, -1);
    heads.push_back(matmul(att, vh));
  }
  Tensor ctx = num_heads == 1 ? heads[0] : concat(heads, last);
  return linear(ctx, p.wo, p.bo);
}

Model::Model(const ModelConfig& cfg, uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  const int64_t d = cfg_.hidden_dim;
  const int64_t c = cfg_.in_channels;
  for (int l = 0; l < cfg_.num_levels; ++l) {
    add_param("embed." + std::to_string(l) + ".w", {c, d});
    add_param("embed." + std::to_string(l) + ".b", {d});
  }
  auto add_attn = [&](const std::string& prefix) {
    for (const char* part : {"wq", "wk", "wv", "wo"}) add_param(prefix + "." + part, {d, d});
    for (const char* part : {"bq", "bk", "bv", "bo"}) add_param(prefix + "." + part, {d});
  };
  auto add_norm = [&](const std::string& prefix) {
    add_param(prefix + ".gamma", {d});
    add_param(prefix + ".beta", {d});
  };
  auto add_ffn = [&](const std::string& prefix) {
    add_param(prefix + ".w1", {d, cfg_.ffn_dim});
    add_param(prefix + ".b1", {cfg_.ffn_dim});
    add_param(prefix + ".w2", {cfg_.ffn_dim, d});
    add_param(prefix + ".b2", {d});
  };
  for (int e = 0; e < cfg_.enc_layers; ++e) {
    const std::string p = "enc." + std::to_string(e);
    add_attn(p + ".attn");
    add_norm(p + ".norm1");
    add_ffn(p + ".ffn");
    add_norm(p + ".norm2");
  }
  for (int i = 0; i < cfg_.dec_layers; ++i) {
    const std::string p = "dec." + std::to_string(i);
    add_attn(p + ".self");
    add_norm(p + ".norm1");
    add_attn(p + ".cross");
    add_norm(p + ".norm2");
    add_ffn(p + ".ffn");
    add_norm(p + ".norm3");
  }
  add_param("query_pos", {cfg_.num_queries, d});
  add_param("ref_logit", {cfg_.num_queries, 4});
  add_param("cls.w", {d, cfg_.num_classes + 1});
  add_param("cls.b", {cfg_.num_classes + 1});
  add_param("box.w1", {d, d});
  add_param("box.b1", {d});
  add_param("box.w2", {d, d});
  add_param("box.b2", {d});
  add_param("box.w3", {d, 4});
  add_param("box.b3", {4});
  init_params(seed);
}

Tensor Model::add_param(const std::string& name, const Shape& dims) {
  Tensor t = Tensor::zeros(dims, true);
  params_.emplace_back(name, t);
  return t;
}

void Model::init_params(uint64_t seed) {
  for (size_t idx = 0; idx < params_.size(); ++idx) {
    const std::string& name = params_[idx].first;
    Tensor& t = params_[idx].second;
    Rng rng(mix_seed(seed, idx));
    const bool is_gamma = name.size() > 6 && name.compare(name.size() - 6, 6, ".gamma") == 0;
    if (is_gamma) {
      std::fill(t.values().begin(), t.values().end(), 1.0);
    } else if (name == "query_pos") {
      for (double& x : t.values()) x = -0.1 + 0.2 * rng.uniform();
    } else if (name == "ref_logit") {
      // Grid of reference boxes covering the unit square, stored as logits.
      const int64_t n = t.dims()[0];
      const int64_t g = static_cast<int64_t>(std::ceil(std::sqrt(static_cast<double>(n))));
      auto logit = [](double p) {
        p = std::clamp(p, kInverseSigmoidEps, 1.0 - kInverseSigmoidEps);
        return std::log(p / (1.0 - p));
      };
      double* v = t.data();
      for (int64_t q = 0; q < n; ++q) {
        const double cx = (static_cast<double>(q % g) + 0.5) / static_cast<double>(g);
        const double cy = (static_cast<double>(q / g) + 0.5) / static_cast<double>(g);
        v[4 * q] = logit(cx);
        v[4 * q + 1] = logit(cy);
        v[4 * q + 2] = logit(1.0 / static_cast<double>(g));
        v[4 * q + 3] = logit(1.0 / static_cast<double>(g));
      }
    } else if (t.rank() == 2) {
      const double limit = std::sqrt(6.0 / static_cast<double>(t.dims()[0] + t.dims()[1]));
      for (double& x : t.values()) x = (2.0 * rng.uniform() - 1.0) * limit;
    }
    // rank-1 biases and norm betas stay zero
  }
}

Tensor Model::param(const std::string& name) const {
  for (const auto& kv : params_)
    if (kv.first == name) return kv.second;
  throw ContractError("unknown parameter: " + name);
}

void Model::zero_grads() {
  for (auto& kv : params_) kv.second.zero_grad();
}

AttentionParams Model::attn(const std::string& prefix) const {
  return AttentionParams{param(prefix + ".wq"), param(prefix + ".bq"),
                         param(prefix + ".wk"), param(prefix + ".bk"),
                         param(prefix + ".wv"), param(prefix + ".bv"),
                         param(prefix + ".wo"), param(prefix + ".bo")};
}

Tensor Model::ffn_block(const std::string& prefix, const Tensor& x) const {
  Tensor h = relu(linear(x, param(prefix + ".w1"), param(prefix + ".b1")));
  return linear(h, param(prefix + ".w2"), param(prefix + ".b2"));
}

Tensor Model::norm(const std::string& prefix, const Tensor& x) const {
  return layer_norm(x, param(prefix + ".gamma"), param(prefix + ".beta"), -1);
}

std::pair<Tensor, Tensor> Model::encode_top(const FeatureMap& top) {
  if (top.channels != cfg_.in_channels)
    throw ShapeError("coarsest level channels disagree with the model");
  const std::string embed = "embed." + std::to_string(cfg_.num_levels - 1);
  Tensor x = flatten_embed(top, param(embed + ".w"), param(embed + ".b"));

  std::vector<double> xs, ys;
  xs.reserve(top.height * top.width);
  ys.reserve(top.height * top.width);
  for (int64_t i = 0; i < top.height; ++i)
    for (int64_t j = 0; j < top.width; ++j) {
      xs.push_back((static_cast<double>(j) + 0.5) / static_cast<double>(top.width));
      ys.push_back((static_cast<double>(i) + 0.5) / static_cast<double>(top.height));
    }
  Tensor pos = sine_pos_embed(xs, ys, cfg_.hidden_dim);

  for (int e = 0; e < cfg_.enc_layers; ++e) {
    const std::string p = "enc." + std::to_string(e);
    Tensor t = add(x, multi_head_attention(attn(p + ".attn"), cfg_.num_heads, x, x, x, pos, pos));
    x = norm(p + ".norm1", t);
    t = add(x, ffn_block(p + ".ffn", x));
    x = norm(p + ".norm2", t);
  }
  return {x, pos};
}

std::vector<LayerOutput> Model::forward(const FeaturePyramid& pyramid) {
  if (static_cast<int>(pyramid.levels.size()) != cfg_.num_levels)
    throw ShapeError("pyramid has " + std::to_string(pyramid.levels.size()) +
                     " levels, model expects " + std::to_string(cfg_.num_levels));
  for (size_t l = 1; l < pyramid.levels.size(); ++l)
    if (pyramid.levels[l].stride <= pyramid.levels[l - 1].stride)
      throw ContractError("pyramid levels must run fine to coarse");
  for (const FeatureMap& lv : pyramid.levels)
    if (lv.channels != cfg_.in_channels)
      throw ShapeError("pyramid level channels disagree with the model");

  auto [z, pos_top] = encode_top(pyramid.levels.back());

  const std::vector<int> levels = cfg_.sample_levels();
  FeaturePyramid prepared;
  prepared.levels = pyramid.levels;
  prepared.encoded_top = z;
  prepared.pos_top = pos_top;
  if (cfg_.sparse_sampling) {
    for (int l : levels) {
      if (l == cfg_.num_levels - 1) continue;  // sparse layers read the encoder output instead
      FeatureMap& fm = prepared.levels[l];
      const std::string embed = "embed." + std::to_string(l);
      Tensor flat = flatten_embed(fm, param(embed + ".w"), param(embed + ".b"));
      fm.values = reshape(flat, {fm.height, fm.width, cfg_.hidden_dim});
      fm.channels = cfg_.hidden_dim;
    }
    FeatureMap& top = prepared.levels.back();
    top.values = reshape(z, {top.height, top.width, cfg_.hidden_dim});
    top.channels = cfg_.hidden_dim;
  }

  const int64_t n = cfg_.num_queries;
  const int64_t d = cfg_.hidden_dim;
  Tensor x = Tensor::zeros({n, d});
  Tensor q_pos = param("query_pos");
  Tensor ref = sigmoid(param("ref_logit"));  // layer 1 references, on the tape
  BoxSet prev_boxes;

  std::vector<LayerOutput> outputs;
  outputs.reserve(cfg_.dec_layers);
  for (int i = 0; i < cfg_.dec_layers; ++i) {
    const std::string p = "dec." + std::to_string(i);
    Tensor t = add(x, multi_head_attention(attn(p + ".self"), cfg_.num_heads, x, x, x,
                                           q_pos, q_pos));
    x = norm(p + ".norm1", t);

    Tensor cross;
    if (i == 0 || !cfg_.sparse_sampling) {
      cross = multi_head_attention(attn(p + ".cross"), cfg_.num_heads, x, z, z, q_pos, pos_top);
    } else {
      SparseKV kv = build_multiscale_kv(prepared, prev_boxes, cfg_.roi_resolution, levels);
      Tensor q3 = reshape(x, {n, 1, d});
      Tensor qp3 = reshape(q_pos, {n, 1, d});
      Tensor c3 = multi_head_attention(attn(p + ".cross"), cfg_.num_heads, q3, kv.keys_values,
                                       kv.keys_values, qp3, kv.pos);
      cross = reshape(c3, {n, d});
    }
    t = add(x, cross);
    x = norm(p + ".norm2", t);
    t = add(x, ffn_block(p + ".ffn", x));
    x = norm(p + ".norm3", t);

    Tensor logits = linear(x, param("cls.w"), param("cls.b"));
    Tensor h1 = relu(linear(x, param("box.w1"), param("box.b1")));
    Tensor h2 = relu(linear(h1, param("box.w2"), param("box.b2")));
    Tensor delta = linear(h2, param("box.w3"), param("box.b3"));
    Tensor boxes = cfg_.box_refine ? sigmoid(add(inverse_sigmoid(ref), delta))
                                   : sigmoid(delta);

    LayerOutput out{logits, softmax(logits, -1), boxes};
    prev_boxes = out.box_set();
    if (cfg_.box_refine && i + 1 < cfg_.dec_layers) {
      // next layer refines this layer's boxes, gradient-detached
      ref = boxes.detached();
    }
    outputs.push_back(std::move(out));
  }
  return outputs;
}

}  // namespace dedetr
