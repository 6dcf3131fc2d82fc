#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "csft/rng.hpp"
#include "csft/tensor.hpp"

namespace csft {

// Generative parameters of the benchmark's causal graph: shape S determines
// the label, texture Z is spuriously paired with S with probability rho.
// rho = 1/num_styles_z makes S and Z independent.
struct CausalGraphParams {
  int num_classes = 5;
  int num_styles_z = 5;
  double rho = 0.9;
  double sigma = 0.05;
  uint64_t seed = 1;
  std::vector<int> pairing;  // texture paired with each shape; empty = identity

  std::vector<int> resolved_pairing() const;
  bool operator==(const CausalGraphParams&) const = default;
};

struct DomainDataset {
  int channels = 3, height = 32, width = 32;
  std::vector<double> images;    // [N, C, H, W]
  std::vector<int> goal_labels;  // y_s == S; may be empty (target role on disk)
  std::vector<int> style_labels; // present only for style datasets
  std::vector<int> latent_s;     // evaluation-only latents
  std::vector<int> latent_z;

  int size() const {
    return static_cast<int>(images.size() / (static_cast<size_t>(channels) * height * width));
  }
  size_t image_numel() const {
    return static_cast<size_t>(channels) * height * width;
  }
  const double* image_ptr(int i) const { return images.data() + image_numel() * i; }

  // Images of rows [begin, end) as a [B,C,H,W] tensor (no grad).
  Tensor image_batch(const std::vector<int>& indices) const;
  Tensor image_batch(int begin, int end) const;
  DomainDataset subset(int begin, int end) const;
};

// Deterministic rasterization of shape `s` over texture `z` plus Gaussian
// pixel noise; values clamped to [0,1].
std::vector<double> render(int shape_id, int texture_id, double sigma, Rng& rng,
                           int size = 32);

DomainDataset sample_domain(const CausalGraphParams& params, int n);

// 80/20 split in generation order.
void split_train_test(const DomainDataset& d, DomainDataset& train, DomainDataset& test);

// Binary container: magic "CSFTDS01" | u32 version | u32 N,C,H,W |
// u8 has_goal,has_style,has_latents,pad | f32 images | i32 label columns.
// `include_goal_labels=false` writes a target-role file without y_s.
void save_dataset(const std::string& path, const DomainDataset& d,
                  bool include_goal_labels = true);
DomainDataset load_dataset(const std::string& path);

void save_sidecar(const std::string& dataset_path, const CausalGraphParams& params,
                  const std::string& role, const std::string& split);

}  // namespace csft
