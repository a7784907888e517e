#include "aft/model.hpp"

#include <cmath>
#include <json.hpp>

#include "aft/errors.hpp"

namespace aft {

using json = nlohmann::json;

void ModelConfig::validate() const {
  if (layers == 0) throw ConfigError("layers must be positive");
  if (d == 0) throw ConfigError("model width d must be positive");
  if (ffn_mult == 0) throw ConfigError("ffn_mult must be positive");
  if (vocab < 2) throw ConfigError("vocab must be at least 2");
  if (max_len == 0) throw ConfigError("max_len must be positive");
  if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("dropout must be in [0, 1)");
  switch (variant) {
    case Variant::Local:
      if (window > max_len) throw ConfigError("local window exceeds max_len");
      if (hard_window && window == 0) throw ConfigError("hard_window with window 0 leaves an empty context");
      [[fallthrough]];
    case Variant::Full:
      if (factor_rank > 0 && factor_rank > max_len) throw ConfigError("factor_rank larger than max_len is pointless");
      break;
    case Variant::Simple:
      break;
    case Variant::Conv:
      if (kernel % 2 == 0) throw ConfigError("conv kernel must be odd");
      if (heads == 0 || d % heads != 0) throw ConfigError("conv heads must divide d");
      break;
  }
}

std::size_t ModelConfig::bias_parameter_count() const {
  switch (variant) {
    case Variant::Full:
    case Variant::Local:
      return factor_rank == 0 ? max_len * max_len : 2 * max_len * factor_rank;
    case Variant::Simple:
      return 0;
    case Variant::Conv:
      return heads * kernel * kernel + 2 * heads;
  }
  return 0;
}

std::string to_json(const ModelConfig& c) {
  json j{{"layers", c.layers},
         {"d", c.d},
         {"variant", std::string(to_string(c.variant))},
         {"window", c.window},
         {"hard_window", c.hard_window},
         {"factor_rank", c.factor_rank},
         {"heads", c.heads},
         {"kernel", c.kernel},
         {"ffn_mult", c.ffn_mult},
         {"dropout", c.dropout},
         {"vocab", c.vocab},
         {"max_len", c.max_len},
         {"learned_positions", c.learned_positions}};
  return j.dump();
}

ModelConfig model_config_from_json(std::string_view text, const ModelConfig& base) {
  ModelConfig c = base;
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("model config is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw ConfigError("model config must be a JSON object");
  try {
    for (const auto& [key, v] : j.items()) {
      if (key == "layers") c.layers = v.get<std::size_t>();
      else if (key == "d") c.d = v.get<std::size_t>();
      else if (key == "variant") c.variant = parse_variant(v.get<std::string>());
      else if (key == "window") c.window = v.get<std::size_t>();
      else if (key == "hard_window") c.hard_window = v.get<bool>();
      else if (key == "factor_rank") c.factor_rank = v.get<std::size_t>();
      else if (key == "heads") c.heads = v.get<std::size_t>();
      else if (key == "kernel") c.kernel = v.get<std::size_t>();
      else if (key == "ffn_mult") c.ffn_mult = v.get<std::size_t>();
      else if (key == "dropout") c.dropout = v.get<double>();
      else if (key == "vocab") c.vocab = v.get<std::size_t>();
      else if (key == "max_len") c.max_len = v.get<std::size_t>();
      else if (key == "learned_positions") c.learned_positions = v.get<bool>();
      else throw ConfigError("unknown model config key '" + key + "'");
    }
  } catch (const json::type_error& e) {
    throw ConfigError(std::string("model config has a value of the wrong type: ") + e.what());
  }
  return c;
}

std::vector<ParamRef> Model::parameters() {
  std::vector<ParamRef> out;
  out.push_back({"tok_emb", &tok_emb, false});
  if (!pos_emb.empty()) out.push_back({"pos_emb", &pos_emb, false});
  for (std::size_t l = 0; l < blocks.size(); ++l) {
    Block& b = blocks[l];
    const std::string p = "blocks." + std::to_string(l) + ".";
    out.push_back({p + "ln1.gain", &b.ln1_gain, false});
    out.push_back({p + "ln1.bias", &b.ln1_bias, false});
    if (cfg.variant == Variant::Conv) {
      out.push_back({p + "attn.wq", &b.conv.wq, true});
      out.push_back({p + "attn.wk", &b.conv.wk, true});
      out.push_back({p + "attn.wv", &b.conv.wv, true});
      out.push_back({p + "attn.w_raw", &b.conv.w_raw, false});
      out.push_back({p + "attn.gamma", &b.conv.gamma, false});
      out.push_back({p + "attn.beta", &b.conv.beta, false});
    } else {
      out.push_back({p + "attn.wq", &b.attn.proj.wq, true});
      out.push_back({p + "attn.wk", &b.attn.proj.wk, true});
      out.push_back({p + "attn.wv", &b.attn.proj.wv, true});
      out.push_back({p + "attn.wo", &b.attn.proj.wo, true});
      if (cfg.variant != Variant::Simple) {
        if (auto* dense = std::get_if<DenseBias>(&b.attn.bias.param)) {
          out.push_back({p + "attn.w", &dense->w, false});
        } else {
          auto& f = std::get<FactorizedBias>(b.attn.bias.param);
          out.push_back({p + "attn.u", &f.u, false});
          out.push_back({p + "attn.v", &f.v, false});
        }
      }
    }
    out.push_back({p + "ln2.gain", &b.ln2_gain, false});
    out.push_back({p + "ln2.bias", &b.ln2_bias, false});
    out.push_back({p + "mlp.w1", &b.w1, true});
    out.push_back({p + "mlp.b1", &b.b1, false});
    out.push_back({p + "mlp.w2", &b.w2, true});
    out.push_back({p + "mlp.b2", &b.b2, false});
  }
  out.push_back({"ln_f.gain", &lnf_gain, false});
  out.push_back({"ln_f.bias", &lnf_bias, false});
  out.push_back({"head.w", &head_w, true});
  out.push_back({"head.b", &head_b, false});
  return out;
}

std::size_t Model::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : const_cast<Model*>(this)->parameters()) n += p.value->numel();
  return n;
}

Model Model::zeros_like() const {
  Model z = *this;
  for (auto& p : z.parameters()) p.value->fill_inplace(0.0);
  return z;
}

namespace {
constexpr double kEmbeddingStd = 0.02;
constexpr double kHeadStd = 0.02;
// Dense and factorized biases, and the raw conv bias: N(0, 1e-2) read as variance.
constexpr double kBiasStd = 0.1;

Tensor linear_init(Rng& rng, std::size_t in, std::size_t out) {
  return randn(rng, {in, out}, 0.0, 1.0 / std::sqrt(static_cast<double>(in)));
}
}  // namespace

Model init_model(const ModelConfig& cfg, Rng& rng) {
  cfg.validate();
  Model m;
  m.cfg = cfg;
  const std::size_t d = cfg.d, hidden = cfg.ffn_mult * cfg.d;
  m.tok_emb = randn(rng, {cfg.vocab, d}, 0.0, kEmbeddingStd);
  if (cfg.learned_positions) m.pos_emb = randn(rng, {cfg.max_len, d}, 0.0, kEmbeddingStd);
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    Block b;
    b.ln1_gain = Tensor({d}, 1.0);
    b.ln1_bias = Tensor({d});
    if (cfg.variant == Variant::Conv) {
      b.conv = init_conv_params(rng, d, cfg.heads, cfg.kernel, 1.0 / std::sqrt(static_cast<double>(d)), kBiasStd);
    } else {
      b.attn.proj = {linear_init(rng, d, d), linear_init(rng, d, d), linear_init(rng, d, d), linear_init(rng, d, d)};
      // simple blocks carry an unused placeholder bias; it is not a parameter
      if (cfg.variant == Variant::Simple) b.attn.bias = PositionBias::dense(Tensor({1, 1}));
      else if (cfg.factor_rank == 0) b.attn.bias = init_dense_bias(rng, cfg.max_len, kBiasStd);
      else b.attn.bias = init_factorized_bias(rng, cfg.max_len, cfg.factor_rank, kBiasStd);
    }
    b.ln2_gain = Tensor({d}, 1.0);
    b.ln2_bias = Tensor({d});
    b.w1 = linear_init(rng, d, hidden);
    b.b1 = Tensor({hidden});
    b.w2 = linear_init(rng, hidden, d);
    b.b2 = Tensor({d});
    m.blocks.push_back(std::move(b));
  }
  m.lnf_gain = Tensor({d}, 1.0);
  m.lnf_bias = Tensor({d});
  m.head_w = randn(rng, {d, cfg.vocab}, 0.0, kHeadStd);
  m.head_b = Tensor({cfg.vocab});
  return m;
}

namespace {

void apply_mask(Tensor& x, const Tensor& mask) {
  if (mask.empty()) return;
  for (std::size_t i = 0; i < x.numel(); ++i) x[i] *= mask[i];
}

AftForward attn_forward(const Model& m, const Block& b, const Tensor& h, bool keep) {
  const LayerMode mode{.causal = true, .hard_window = m.cfg.hard_window};
  switch (m.cfg.variant) {
    case Variant::Full:
      return aft_full_forward(h, b.attn, mode, keep);
    case Variant::Local:
      return aft_local_forward(h, b.attn, std::min(m.cfg.window, h.dim(1)), mode, keep);
    case Variant::Simple:
      return aft_simple_forward(h, b.attn.proj, mode, keep);
    case Variant::Conv:
      break;
  }
  throw ConfigError("the conv variant is non-causal and cannot drive an autoregressive model");
}

}  // namespace

ModelForward model_forward(const Model& m, const std::vector<int>& tokens, std::size_t B, std::size_t T,
                           Rng* dropout_rng, bool keep_cache) {
  const std::size_t d = m.cfg.d, V = m.cfg.vocab, N = B * T;
  if (B == 0 || T == 0) throw DimensionError("model_forward: empty batch");
  if (tokens.size() != N) throw DimensionError("model_forward: expected " + std::to_string(N) + " tokens");
  if (T > m.cfg.max_len)
    throw DimensionError("sequence length " + std::to_string(T) + " exceeds max_len " + std::to_string(m.cfg.max_len));
  if (m.cfg.variant == Variant::Conv)
    throw ConfigError("the conv variant is non-causal and cannot drive an autoregressive model");
  const double rate = dropout_rng ? m.cfg.dropout : 0.0;

  Tensor x({N, d});
  for (std::size_t n = 0; n < N; ++n) {
    const int tok = tokens[n];
    if (tok < 0 || static_cast<std::size_t>(tok) >= V) throw DimensionError("token id out of range");
    const double* e = m.tok_emb.ptr() + static_cast<std::size_t>(tok) * d;
    const double* p = m.pos_emb.empty() ? nullptr : m.pos_emb.ptr() + (n % T) * d;
    for (std::size_t j = 0; j < d; ++j) x[n * d + j] = e[j] + (p ? p[j] : 0.0);
  }

  ModelForward out;
  ModelCache& c = out.cache;
  if (keep_cache) {
    c.batch = B;
    c.length = T;
    c.tokens = tokens;
  }
  for (const Block& b : m.blocks) {
    BlockCache bc;
    const Tensor h1 = nn::layer_norm(x, b.ln1_gain, b.ln1_bias, keep_cache ? &bc.ln1 : nullptr);
    AftForward a = attn_forward(m, b, h1.reshape({B, T, d}), keep_cache);
    Tensor ay = std::move(a.y);
    ay.reshape_inplace({N, d});
    if (rate > 0.0) {
      bc.drop1 = nn::dropout_mask(*dropout_rng, ay.shape(), rate);
      apply_mask(ay, bc.drop1);
    }
    x.add_inplace(ay);

    Tensor h2 = nn::layer_norm(x, b.ln2_gain, b.ln2_bias, keep_cache ? &bc.ln2 : nullptr);
    Tensor m1 = nn::linear(h2, b.w1, b.b1);
    Tensor g = nn::gelu(m1);
    Tensor m2 = nn::linear(g, b.w2, b.b2);
    if (rate > 0.0) {
      bc.drop2 = nn::dropout_mask(*dropout_rng, m2.shape(), rate);
      apply_mask(m2, bc.drop2);
    }
    x.add_inplace(m2);
    if (keep_cache) {
      bc.attn = std::move(a.cache);
      bc.h2 = std::move(h2);
      bc.m1 = std::move(m1);
      bc.g = std::move(g);
      c.blocks.push_back(std::move(bc));
    }
  }
  Tensor hf = nn::layer_norm(x, m.lnf_gain, m.lnf_bias, keep_cache ? &c.lnf : nullptr);
  out.logits = nn::linear(hf, m.head_w, m.head_b);
  if (keep_cache) c.hf = std::move(hf);
  return out;
}

Model model_backward(const Model& m, const ModelCache& c, const Tensor& dlogits) {
  if (c.hf.empty()) throw UsageError("model_backward needs a forward pass run with keep_cache");
  const std::size_t d = m.cfg.d, B = c.batch, T = c.length, N = B * T;
  if (dlogits.shape() != Shape{N, m.cfg.vocab}) throw DimensionError("model_backward: dlogits shape mismatch");
  Model g = m.zeros_like();

  auto head = nn::linear_backward(c.hf, m.head_w, dlogits, true);
  g.head_w = std::move(head.dw);
  g.head_b = std::move(head.db);
  auto lnf = nn::layer_norm_backward(c.lnf, m.lnf_gain, head.dx);
  g.lnf_gain = std::move(lnf.dgain);
  g.lnf_bias = std::move(lnf.dbias);
  Tensor dx = std::move(lnf.dx);

  for (std::size_t l = m.blocks.size(); l-- > 0;) {
    const Block& b = m.blocks[l];
    const BlockCache& bc = c.blocks[l];
    Block& gb = g.blocks[l];

    Tensor dm2 = dx;
    apply_mask(dm2, bc.drop2);
    auto l2 = nn::linear_backward(bc.g, b.w2, dm2, true);
    gb.w2 = std::move(l2.dw);
    gb.b2 = std::move(l2.db);
    const Tensor dm1 = nn::gelu_backward(bc.m1, l2.dx);
    auto l1 = nn::linear_backward(bc.h2, b.w1, dm1, true);
    gb.w1 = std::move(l1.dw);
    gb.b1 = std::move(l1.db);
    auto ln2 = nn::layer_norm_backward(bc.ln2, b.ln2_gain, l1.dx);
    gb.ln2_gain = std::move(ln2.dgain);
    gb.ln2_bias = std::move(ln2.dbias);
    dx.add_inplace(ln2.dx);

    Tensor da = dx;
    apply_mask(da, bc.drop1);
    da.reshape_inplace({B, T, d});
    Tensor dh1;
    if (m.cfg.variant == Variant::Simple) {
      auto ag = aft_simple_backward(bc.attn, b.attn.proj, da);
      gb.attn.proj = {std::move(ag.proj.dwq), std::move(ag.proj.dwk), std::move(ag.proj.dwv), std::move(ag.proj.dwo)};
      dh1 = std::move(ag.dx);
    } else {
      auto ag = m.cfg.variant == Variant::Full ? aft_full_backward(bc.attn, b.attn, da)
                                               : aft_local_backward(bc.attn, b.attn, da);
      gb.attn.proj = {std::move(ag.proj.dwq), std::move(ag.proj.dwk), std::move(ag.proj.dwv), std::move(ag.proj.dwo)};
      gb.attn.bias = std::move(ag.dbias);
      dh1 = std::move(ag.dx);
    }
    dh1.reshape_inplace({N, d});
    auto ln1 = nn::layer_norm_backward(bc.ln1, b.ln1_gain, dh1);
    gb.ln1_gain = std::move(ln1.dgain);
    gb.ln1_bias = std::move(ln1.dbias);
    dx.add_inplace(ln1.dx);
  }

  for (std::size_t n = 0; n < N; ++n) {
    double* e = g.tok_emb.ptr() + static_cast<std::size_t>(c.tokens[n]) * d;
    double* p = g.pos_emb.empty() ? nullptr : g.pos_emb.ptr() + (n % T) * d;
    for (std::size_t j = 0; j < d; ++j) {
      e[j] += dx[n * d + j];
      if (p) p[j] += dx[n * d + j];
    }
  }
  return g;
}

double model_loss(const Model& m, const Batch& b, Rng* dropout_rng, Model* grads) {
  const bool want_grads = grads != nullptr;
  ModelForward f = model_forward(m, b.inputs, b.batch, b.length, dropout_rng, want_grads);
  Tensor dlogits;
  const double loss = nn::cross_entropy(f.logits, b.targets, b.weight, want_grads ? &dlogits : nullptr);
  if (want_grads) *grads = model_backward(m, f.cache, dlogits);
  return loss;
}

}  // namespace aft
