#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "ratles/tensor.hpp"

namespace ratles {

struct NamedParam {
  std::string name;
  Tensor tensor;
};

// Mutable view of a non-trainable state array (BatchNorm running stats).
struct NamedBuffer {
  std::string name;
  std::vector<double>* values;
};

// Same-padded 3D cross-correlation, kernel 1 or 3, stride 1.
// Weight layout (out_ch, in_ch, k, k, k), bias (out_ch).
struct Conv3d {
  Tensor weight;
  Tensor bias;
  int64_t kernel = 3;

  // He-style init: weights ~ N(0, sqrt(2/fan_in)), bias zero.
  static Conv3d create(int64_t in_ch, int64_t out_ch, int64_t kernel, std::mt19937_64& rng);

  int64_t in_channels() const { return weight.dim(1); }
  int64_t out_channels() const { return weight.dim(0); }
  void collect_parameters(const std::string& prefix, std::vector<NamedParam>& out);
};

Tensor conv3d(const Tensor& x, const Conv3d& p);

// Per-channel normalization over (batch, depth, height, width).
// Train mode uses batch statistics and updates the running ones;
// eval mode applies the running statistics as a fixed affine map.
struct BatchNorm3d {
  Tensor gamma;
  Tensor beta;
  std::vector<double> running_mean;
  std::vector<double> running_var;
  double momentum = 0.1;
  double epsilon = 1e-5;
  bool training = true;

  static BatchNorm3d create(int64_t channels);

  int64_t channels() const { return gamma.dim(0); }
  void collect_parameters(const std::string& prefix, std::vector<NamedParam>& out);
  void collect_buffers(const std::string& prefix, std::vector<NamedBuffer>& out);
};

Tensor batchnorm(const Tensor& x, BatchNorm3d& s);

// 2x2x2 max pooling with stride 2; all spatial dims must be even.
// The gradient routes to the argmax voxel, first index on ties.
Tensor maxpool2(const Tensor& x);

// Doubles the spatial dims by trilinear interpolation (align_corners=false:
// sample centers at (i + 0.5)/2 - 0.5). Exact on constants.
Tensor upsample_trilinear2(const Tensor& x);

// ReLU -> BatchNorm -> 1x1x1 conv changing in_ch to out_ch.
struct Bottleneck {
  BatchNorm3d bn;
  Conv3d conv;

  static Bottleneck create(int64_t in_ch, int64_t out_ch, std::mt19937_64& rng);
  Tensor forward(const Tensor& x);
  void set_training(bool on) { bn.training = on; }
  void collect_parameters(const std::string& prefix, std::vector<NamedParam>& out);
  void collect_buffers(const std::string& prefix, std::vector<NamedBuffer>& out);
};

// y = x + F(x) with F = (ReLU -> BatchNorm -> 3x3x3 conv) twice, channel-preserving.
struct ResNetBlock {
  BatchNorm3d bn1, bn2;
  Conv3d conv1, conv2;

  static ResNetBlock create(int64_t channels, std::mt19937_64& rng);
  Tensor forward(const Tensor& x);
  void set_training(bool on);
  void collect_parameters(const std::string& prefix, std::vector<NamedParam>& out);
  void collect_buffers(const std::string& prefix, std::vector<NamedBuffer>& out);
};

// Two conv stages, each fed the concatenation of every earlier output,
// then a 1x1x1 projection back to the block width. The growth rate is chosen
// so the parameter count tracks ResNetBlock of the same width.
struct DenseNetBlock {
  BatchNorm3d bn1, bn2;
  Conv3d conv1, conv2;
  Bottleneck projection;
  int64_t growth = 0;

  static DenseNetBlock create(int64_t channels, int64_t growth, std::mt19937_64& rng);
  Tensor forward(const Tensor& x);
  void set_training(bool on);
  void collect_parameters(const std::string& prefix, std::vector<NamedParam>& out);
  void collect_buffers(const std::string& prefix, std::vector<NamedBuffer>& out);
};

// Parameter counts from the layer shapes alone.
int64_t resnet_block_param_count(int64_t channels);
int64_t densenet_block_param_count(int64_t channels, int64_t growth);

// Growth rate whose DenseNetBlock parameter count is closest to the
// same-width ResNetBlock (quadratic solve, then pick the better neighbor).
int64_t densenet_growth_for(int64_t channels);

}  // namespace ratles
