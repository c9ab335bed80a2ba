#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <variant>
#include <vector>

#include "ratles/layers.hpp"
#include "ratles/volume.hpp"

namespace ratles {

enum class BlockType { resnet, densenet };

std::string to_string(BlockType t);
BlockType block_type_from_string(const std::string& s);

// Architecture descriptor covering the baseline network and its variants.
struct ModelConfig {
  int64_t levels = 3;
  int64_t encoder_width = 32;
  int64_t decoder_width = 64;  // always 2 * encoder_width in this topology
  BlockType block_type = BlockType::resnet;
  int64_t input_channels = 1;
  int64_t classes = 2;
  std::string variant = "baseline";

  void validate() const;
  std::string to_json_string() const;
  static ModelConfig from_json_string(const std::string& json);
};

// baseline | densenet | half_rf | half_rf_matched | width28 | width36
ModelConfig ablation_variant(const std::string& name);

// Total trainable parameters (weights, biases, gammas, betas) from the
// config alone, without building the network.
int64_t parameter_count(const ModelConfig& cfg);

// Receptive field of the longest path (stem -> deepest level -> head) from
// the recurrence rf += (k-1)*jump, jump *= stride.
std::array<int64_t, 3> receptive_field(const ModelConfig& cfg);

// Same recurrence over an explicit (kernel, stride) layer list; upsampling
// enters as kernel 2, stride 0.5.
int64_t receptive_field_1d(const std::vector<std::pair<int64_t, double>>& layers);

struct LayerRow {
  std::string name;
  std::vector<int64_t> output_shape;
};

struct ModelSummary {
  int64_t parameter_count = 0;
  std::array<int64_t, 3> receptive_field{0, 0, 0};
  std::vector<LayerRow> layer_table;
  int64_t densenet_growth = 0;  // 0 when not a densenet variant
};

// Either block flavor behind one interface.
struct StageBlock {
  std::variant<ResNetBlock, DenseNetBlock> impl;

  Tensor forward(const Tensor& x);
  void set_training(bool on);
  void collect_parameters(const std::string& prefix, std::vector<NamedParam>& out);
  void collect_buffers(const std::string& prefix, std::vector<NamedBuffer>& out);
};

// Encoder/decoder segmentation network: a stem bottleneck, `levels` encoder
// stages (block + maxpool), a bridge block, `levels` decoder stages
// (upsample + skip concat + block, reduced back to encoder width except at
// full resolution), and a softmax head.
class Model {
 public:
  static Model build(const ModelConfig& cfg, uint64_t seed);

  // (N, input_channels, D, H, W) -> per-voxel class probabilities
  // (N, classes, D, H, W). Spatial dims must be divisible by 2^levels.
  Tensor forward(const Tensor& x) { return forward_traced(x, nullptr); }
  Tensor forward_traced(const Tensor& x, std::vector<LayerRow>* trace);

  // Full single-volume pipeline: normalize, pad, forward in eval mode,
  // argmax (ties resolve to non-lesion), crop back to the input dims.
  Mask predict_mask(const Volume& v);

  void set_training(bool on);
  bool is_training() const { return training_; }
  const ModelConfig& config() const { return config_; }

  std::vector<NamedParam> parameters();
  std::vector<NamedBuffer> buffers();
  void zero_grad();

  // Parameter count by enumerating the live tensors (the analytic
  // parameter_count(cfg) is the independent route).
  int64_t parameter_count_enumerated();

  ModelSummary summarize(const std::array<int64_t, 3>& reference_dims);

 private:
  ModelConfig config_;
  bool training_ = true;
  Bottleneck stem_;
  std::vector<StageBlock> encoder_;
  StageBlock bridge_;
  std::vector<StageBlock> decoder_;     // deepest first
  std::vector<Bottleneck> reducers_;    // after all but the last decoder stage
  Bottleneck head_;
  int64_t densenet_growth_ = 0;
};

// Argmax over the two class channels of a (1,2,D,H,W) probability tensor;
// exact ties go to non-lesion.
Mask argmax_mask(const Tensor& prob, const std::array<double, 3>& spacing);

}  // namespace ratles
