#pragma once

#include <string>
#include <utility>
#include <vector>

#include "csft/rng.hpp"
#include "csft/tensor.hpp"

namespace csft {

struct ViTConfig {
  int image_size = 32;
  int patch_size = 8;
  int embed_dim = 64;
  int num_blocks = 4;
  int num_heads = 4;
  int num_classes = 5;
  int num_styles = 6;
  int mlp_ratio = 4;

  int grid() const { return image_size / patch_size; }
  int patches() const { return grid() * grid(); }
  int tokens() const { return patches() + 2; }  // class + style + patches
  int head_dim() const { return embed_dim / num_heads; }
  void validate() const;

  bool operator==(const ViTConfig&) const = default;
};

// Per-(block,head) designation; true = non-causal.
struct HeadMask {
  int blocks = 0;
  int heads = 0;
  std::vector<char> flags;  // row-major [blocks x heads]

  HeadMask() = default;
  HeadMask(int l, int h, bool v = false)
      : blocks(l), heads(h), flags(static_cast<size_t>(l) * h, v ? 1 : 0) {}

  bool at(int l, int i) const { return flags[static_cast<size_t>(l) * heads + i] != 0; }
  void set(int l, int i, bool v) { flags[static_cast<size_t>(l) * heads + i] = v ? 1 : 0; }
  int count() const {
    int c = 0;
    for (char f : flags) c += f != 0;
    return c;
  }
  bool operator==(const HeadMask&) const = default;
};

struct BlockWeights {
  std::vector<Tensor> w_q, w_k, w_v;  // per head, [d, d_k]
  std::vector<Tensor> w_o;            // per head slice of the output projection, [d_k, d]
  Tensor b_o;                         // [d]
  Tensor ln1_g, ln1_b, ln2_g, ln2_b;  // [d]
  Tensor mlp_w1, mlp_b1, mlp_w2, mlp_b2;
};

struct ViTModel {
  ViTConfig cfg;
  Tensor patch_w, patch_b;        // [P*P*C, d], [d]
  Tensor cls_token, sty_token;    // [d]
  Tensor pos_emb;                 // [T, d]
  std::vector<BlockWeights> blocks;
  Tensor fg_w, fg_b;              // goal classifier over z_c
  Tensor fn_w, fn_b;              // style classifier over z_n
};

ViTModel init_vit(const ViTConfig& cfg, Rng& rng);

// Fixed-order parameter enumeration (drives checkpoints and partitioning).
std::vector<std::pair<std::string, Tensor>> named_params(const ViTModel& m);
std::vector<Tensor> all_params(const ViTModel& m);
void copy_parameters(ViTModel& dst, const ViTModel& src);
void zero_all_grads(const ViTModel& m);

// Disjoint, exhaustive parameter groups. A head group (l,i) holds exactly
// that head's W_Q, W_K, W_V and its slice of the block output projection.
struct ParamPartition {
  std::vector<Tensor> noncausal_heads;  // theta_{h_n}
  std::vector<Tensor> causal_backbone;  // theta_f minus theta_{h_n}
  std::vector<Tensor> goal_head;        // theta_{f_g}
  std::vector<Tensor> style_head;       // theta_{f_n}
};
ParamPartition partition_params(const ViTModel& m, const HeadMask& mask);

// [B,C,H,W] -> [B,T,d] with class/style tokens at positions 0/1 and
// positional embeddings added.
Tensor embed_tokens(const ViTModel& m, const Tensor& images);

// Scaled dot-product self-attention for a single head over all tokens.
Tensor head_attention(const Tensor& tokens, const Tensor& w_q, const Tensor& w_k,
                      const Tensor& w_v);

// Per-head attention outputs from a pre-normalized token stream.
std::vector<Tensor> block_heads(const BlockWeights& blk, const Tensor& tokens_ln);
// Output projection + residual + MLP half of the block.
Tensor block_finish(const BlockWeights& blk, const Tensor& residual_base,
                    const std::vector<Tensor>& head_outs);
Tensor block_forward(const BlockWeights& blk, const Tensor& tokens);

struct ForwardResult {
  Tensor z_c, z_n;            // [B,d]
  Tensor goal_logits;         // [B,num_classes]
  Tensor style_logits;        // [B,num_styles]
};
ForwardResult vit_forward(const ViTModel& m, const Tensor& images);

// Model file: one-line JSON manifest (config + head mask) followed by the
// checkpoint container.
void save_model(const std::string& path, const ViTModel& m, const HeadMask& mask);
ViTModel load_model(const std::string& path, HeadMask& mask_out);

}  // namespace csft
