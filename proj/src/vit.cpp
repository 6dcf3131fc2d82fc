#include "csft/vit.hpp"

#include <cmath>
#include <stdexcept>

#include "csft/checkpoint.hpp"
#include "json.hpp"

namespace csft {

void ViTConfig::validate() const {
  if (image_size <= 0 || patch_size <= 0 || image_size % patch_size != 0)
    throw std::invalid_argument("ViTConfig: image_size must be a multiple of patch_size");
  if (embed_dim <= 0 || num_heads <= 0 || embed_dim % num_heads != 0)
    throw std::invalid_argument("ViTConfig: embed_dim must be divisible by num_heads");
  if (num_blocks <= 0 || num_classes <= 0 || num_styles <= 0 || mlp_ratio <= 0)
    throw std::invalid_argument("ViTConfig: counts must be positive");
}

namespace {

Tensor randn_param(Rng& rng, const Shape& shape, double stddev) {
  Tensor t = Tensor::zeros(shape, true);
  for (double& v : t.data()) v = rng.normal(0.0, stddev);
  return t;
}

constexpr double kInitStd = 0.02;

}  // namespace

ViTModel init_vit(const ViTConfig& cfg, Rng& rng) {
  cfg.validate();
  ViTModel m;
  m.cfg = cfg;
  const int d = cfg.embed_dim;
  const int dk = cfg.head_dim();
  const int pdim = 3 * cfg.patch_size * cfg.patch_size;
  m.patch_w = randn_param(rng, {pdim, d}, kInitStd);
  m.patch_b = Tensor::zeros({d}, true);
  m.cls_token = randn_param(rng, {d}, kInitStd);
  m.sty_token = randn_param(rng, {d}, kInitStd);
  m.pos_emb = randn_param(rng, {cfg.tokens(), d}, kInitStd);
  m.blocks.resize(static_cast<size_t>(cfg.num_blocks));
  for (auto& blk : m.blocks) {
    for (int i = 0; i < cfg.num_heads; ++i) {
      blk.w_q.push_back(randn_param(rng, {d, dk}, kInitStd));
      blk.w_k.push_back(randn_param(rng, {d, dk}, kInitStd));
      blk.w_v.push_back(randn_param(rng, {d, dk}, kInitStd));
      blk.w_o.push_back(randn_param(rng, {dk, d}, kInitStd));
    }
    blk.b_o = Tensor::zeros({d}, true);
    blk.ln1_g = Tensor::full({d}, 1.0, true);
    blk.ln1_b = Tensor::zeros({d}, true);
    blk.ln2_g = Tensor::full({d}, 1.0, true);
    blk.ln2_b = Tensor::zeros({d}, true);
    blk.mlp_w1 = randn_param(rng, {d, cfg.mlp_ratio * d}, kInitStd);
    blk.mlp_b1 = Tensor::zeros({cfg.mlp_ratio * d}, true);
    blk.mlp_w2 = randn_param(rng, {cfg.mlp_ratio * d, d}, kInitStd);
    blk.mlp_b2 = Tensor::zeros({d}, true);
  }
  m.fg_w = randn_param(rng, {d, cfg.num_classes}, kInitStd);
  m.fg_b = Tensor::zeros({cfg.num_classes}, true);
  m.fn_w = randn_param(rng, {d, cfg.num_styles}, kInitStd);
  m.fn_b = Tensor::zeros({cfg.num_styles}, true);
  return m;
}

std::vector<std::pair<std::string, Tensor>> named_params(const ViTModel& m) {
  std::vector<std::pair<std::string, Tensor>> out;
  out.emplace_back("patch_embed.w", m.patch_w);
  out.emplace_back("patch_embed.b", m.patch_b);
  out.emplace_back("cls_token", m.cls_token);
  out.emplace_back("style_token", m.sty_token);
  out.emplace_back("pos_embed", m.pos_emb);
  for (size_t l = 0; l < m.blocks.size(); ++l) {
    const auto& blk = m.blocks[l];
    const std::string p = "blocks." + std::to_string(l) + ".";
    for (size_t i = 0; i < blk.w_q.size(); ++i) {
      const std::string h = p + "head." + std::to_string(i) + ".";
      out.emplace_back(h + "wq", blk.w_q[i]);
      out.emplace_back(h + "wk", blk.w_k[i]);
      out.emplace_back(h + "wv", blk.w_v[i]);
      out.emplace_back(h + "wo", blk.w_o[i]);
    }
    out.emplace_back(p + "attn.b_o", blk.b_o);
    out.emplace_back(p + "ln1.g", blk.ln1_g);
    out.emplace_back(p + "ln1.b", blk.ln1_b);
    out.emplace_back(p + "ln2.g", blk.ln2_g);
    out.emplace_back(p + "ln2.b", blk.ln2_b);
    out.emplace_back(p + "mlp.w1", blk.mlp_w1);
    out.emplace_back(p + "mlp.b1", blk.mlp_b1);
    out.emplace_back(p + "mlp.w2", blk.mlp_w2);
    out.emplace_back(p + "mlp.b2", blk.mlp_b2);
  }
  out.emplace_back("goal_head.w", m.fg_w);
  out.emplace_back("goal_head.b", m.fg_b);
  out.emplace_back("style_head.w", m.fn_w);
  out.emplace_back("style_head.b", m.fn_b);
  return out;
}

std::vector<Tensor> all_params(const ViTModel& m) {
  std::vector<Tensor> out;
  for (auto& [name, t] : named_params(m)) out.push_back(t);
  return out;
}

void copy_parameters(ViTModel& dst, const ViTModel& src) {
  auto d = named_params(dst);
  auto s = named_params(src);
  if (d.size() != s.size()) throw std::logic_error("copy_parameters: model mismatch");
  for (size_t i = 0; i < d.size(); ++i) {
    if (d[i].second.shape() != s[i].second.shape())
      throw std::logic_error("copy_parameters: shape mismatch at " + d[i].first);
    d[i].second.data() = s[i].second.data();
  }
}

void zero_all_grads(const ViTModel& m) {
  for (Tensor t : all_params(m)) t.zero_grad();
}

ParamPartition partition_params(const ViTModel& m, const HeadMask& mask) {
  if (mask.blocks != m.cfg.num_blocks || mask.heads != m.cfg.num_heads)
    throw std::invalid_argument("partition_params: mask dims do not match config");
  ParamPartition part;
  part.causal_backbone.push_back(m.patch_w);
  part.causal_backbone.push_back(m.patch_b);
  part.causal_backbone.push_back(m.cls_token);
  part.causal_backbone.push_back(m.sty_token);
  part.causal_backbone.push_back(m.pos_emb);
  for (int l = 0; l < m.cfg.num_blocks; ++l) {
    const auto& blk = m.blocks[static_cast<size_t>(l)];
    for (int i = 0; i < m.cfg.num_heads; ++i) {
      auto& group = mask.at(l, i) ? part.noncausal_heads : part.causal_backbone;
      group.push_back(blk.w_q[static_cast<size_t>(i)]);
      group.push_back(blk.w_k[static_cast<size_t>(i)]);
      group.push_back(blk.w_v[static_cast<size_t>(i)]);
      group.push_back(blk.w_o[static_cast<size_t>(i)]);
    }
    part.causal_backbone.push_back(blk.b_o);
    part.causal_backbone.push_back(blk.ln1_g);
    part.causal_backbone.push_back(blk.ln1_b);
    part.causal_backbone.push_back(blk.ln2_g);
    part.causal_backbone.push_back(blk.ln2_b);
    part.causal_backbone.push_back(blk.mlp_w1);
    part.causal_backbone.push_back(blk.mlp_b1);
    part.causal_backbone.push_back(blk.mlp_w2);
    part.causal_backbone.push_back(blk.mlp_b2);
  }
  part.goal_head.push_back(m.fg_w);
  part.goal_head.push_back(m.fg_b);
  part.style_head.push_back(m.fn_w);
  part.style_head.push_back(m.fn_b);
  return part;
}

Tensor embed_tokens(const ViTModel& m, const Tensor& images) {
  if (images.ndim() != 4 || images.dim(1) != 3 || images.dim(2) != m.cfg.image_size ||
      images.dim(3) != m.cfg.image_size)
    throw std::invalid_argument("embed_tokens: image shape does not match config");
  Tensor patches = extract_patches(images, m.cfg.patch_size);
  Tensor emb = add_rowvec(matmul(patches, m.patch_w), m.patch_b);
  Tensor tokens = prepend_tokens(emb, m.cls_token, m.sty_token);
  return add_rowmat(tokens, m.pos_emb);
}

Tensor head_attention(const Tensor& tokens, const Tensor& w_q, const Tensor& w_k,
                      const Tensor& w_v) {
  const int dk = w_q.dim(1);
  Tensor q = matmul(tokens, w_q);
  Tensor k = matmul(tokens, w_k);
  Tensor v = matmul(tokens, w_v);
  Tensor scores = affine(matmul_nt(q, k), 1.0 / std::sqrt(static_cast<double>(dk)), 0.0);
  return matmul(softmax_rows(scores), v);
}

std::vector<Tensor> block_heads(const BlockWeights& blk, const Tensor& tokens_ln) {
  std::vector<Tensor> outs;
  outs.reserve(blk.w_q.size());
  for (size_t i = 0; i < blk.w_q.size(); ++i)
    outs.push_back(head_attention(tokens_ln, blk.w_q[i], blk.w_k[i], blk.w_v[i]));
  return outs;
}

Tensor block_finish(const BlockWeights& blk, const Tensor& residual_base,
                    const std::vector<Tensor>& head_outs) {
  Tensor attn = matmul(head_outs[0], blk.w_o[0]);
  for (size_t i = 1; i < head_outs.size(); ++i)
    attn = add(attn, matmul(head_outs[i], blk.w_o[i]));
  Tensor y = add(residual_base, add_rowvec(attn, blk.b_o));
  Tensor h2 = layer_norm(y, blk.ln2_g, blk.ln2_b);
  Tensor mid = gelu(add_rowvec(matmul(h2, blk.mlp_w1), blk.mlp_b1));
  Tensor mlp_out = add_rowvec(matmul(mid, blk.mlp_w2), blk.mlp_b2);
  return add(y, mlp_out);
}

Tensor block_forward(const BlockWeights& blk, const Tensor& tokens) {
  Tensor h = layer_norm(tokens, blk.ln1_g, blk.ln1_b);
  return block_finish(blk, tokens, block_heads(blk, h));
}

ForwardResult vit_forward(const ViTModel& m, const Tensor& images) {
  Tensor tokens = embed_tokens(m, images);
  for (const auto& blk : m.blocks) tokens = block_forward(blk, tokens);
  ForwardResult r;
  r.z_c = select_token(tokens, 0);
  r.z_n = select_token(tokens, 1);
  r.goal_logits = add_rowvec(matmul(r.z_c, m.fg_w), m.fg_b);
  r.style_logits = add_rowvec(matmul(r.z_n, m.fn_w), m.fn_b);
  return r;
}

namespace {

nlohmann::json config_to_json(const ViTConfig& c) {
  return {{"image_size", c.image_size},   {"patch_size", c.patch_size},
          {"embed_dim", c.embed_dim},     {"num_blocks", c.num_blocks},
          {"num_heads", c.num_heads},     {"num_classes", c.num_classes},
          {"num_styles", c.num_styles},   {"mlp_ratio", c.mlp_ratio}};
}

ViTConfig config_from_json(const nlohmann::json& j) {
  ViTConfig c;
  c.image_size = j.at("image_size");
  c.patch_size = j.at("patch_size");
  c.embed_dim = j.at("embed_dim");
  c.num_blocks = j.at("num_blocks");
  c.num_heads = j.at("num_heads");
  c.num_classes = j.at("num_classes");
  c.num_styles = j.at("num_styles");
  c.mlp_ratio = j.at("mlp_ratio");
  return c;
}

}  // namespace

void save_model(const std::string& path, const ViTModel& m, const HeadMask& mask) {
  nlohmann::json manifest;
  manifest["format"] = "csft-model";
  manifest["version"] = 1;
  manifest["config"] = config_to_json(m.cfg);
  nlohmann::json rows = nlohmann::json::array();
  for (int l = 0; l < mask.blocks; ++l) {
    nlohmann::json row = nlohmann::json::array();
    for (int i = 0; i < mask.heads; ++i) row.push_back(mask.at(l, i) ? 1 : 0);
    rows.push_back(row);
  }
  manifest["head_mask"] = rows;
  save_checkpoint_with_header(path, manifest.dump(), named_params(m));
}

ViTModel load_model(const std::string& path, HeadMask& mask_out) {
  std::string header;
  auto entries = load_checkpoint_with_header(path, header);
  nlohmann::json manifest = nlohmann::json::parse(header);
  if (manifest.at("format") != "csft-model" || manifest.at("version") != 1)
    throw std::runtime_error("load_model: unrecognized manifest in " + path);
  const ViTConfig cfg = config_from_json(manifest.at("config"));
  Rng rng(0);  // values are overwritten below
  ViTModel m = init_vit(cfg, rng);
  apply_checkpoint(entries, named_params(m));
  const auto& rows = manifest.at("head_mask");
  mask_out = HeadMask(cfg.num_blocks, cfg.num_heads, false);
  for (int l = 0; l < cfg.num_blocks; ++l)
    for (int i = 0; i < cfg.num_heads; ++i)
      mask_out.set(l, i, rows.at(static_cast<size_t>(l)).at(static_cast<size_t>(i)).get<int>() != 0);
  return m;
}

}  // namespace csft
