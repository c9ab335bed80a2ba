#include "ratles/model.hpp"

#include <cmath>
#include <limits>

#include "json.hpp"
#include "ratles/error.hpp"

namespace ratles {

std::string to_string(BlockType t) {
  return t == BlockType::resnet ? "resnet" : "densenet";
}

BlockType block_type_from_string(const std::string& s) {
  if (s == "resnet") return BlockType::resnet;
  if (s == "densenet") return BlockType::densenet;
  throw ConfigError("unknown block type '" + s + "' (expected resnet or densenet)");
}

void ModelConfig::validate() const {
  if (levels < 1) throw ConfigError("model config: levels must be >= 1");
  if (encoder_width < 4) throw ConfigError("model config: encoder_width must be >= 4");
  if (decoder_width != 2 * encoder_width)
    throw ConfigError("model config: decoder_width must be 2 * encoder_width");
  if (input_channels < 1) throw ConfigError("model config: input_channels must be >= 1");
  if (classes != 2) throw ConfigError("model config: only 2-class segmentation is supported");
}

std::string ModelConfig::to_json_string() const {
  nlohmann::json j;
  j["levels"] = levels;
  j["encoder_width"] = encoder_width;
  j["decoder_width"] = decoder_width;
  j["block_type"] = to_string(block_type);
  j["input_channels"] = input_channels;
  j["classes"] = classes;
  j["variant"] = variant;
  return j.dump();
}

ModelConfig ModelConfig::from_json_string(const std::string& json) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(json);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("model config: bad JSON: ") + e.what());
  }
  ModelConfig cfg;
  for (const auto& [key, value] : j.items()) {
    if (key == "levels")
      cfg.levels = value.get<int64_t>();
    else if (key == "encoder_width")
      cfg.encoder_width = value.get<int64_t>();
    else if (key == "decoder_width")
      cfg.decoder_width = value.get<int64_t>();
    else if (key == "block_type")
      cfg.block_type = block_type_from_string(value.get<std::string>());
    else if (key == "input_channels")
      cfg.input_channels = value.get<int64_t>();
    else if (key == "classes")
      cfg.classes = value.get<int64_t>();
    else if (key == "variant")
      cfg.variant = value.get<std::string>();
    else
      throw ConfigError("model config: unknown key '" + key + "'");
  }
  cfg.validate();
  return cfg;
}

ModelConfig ablation_variant(const std::string& name) {
  ModelConfig cfg;
  cfg.variant = name;
  if (name == "baseline") {
  } else if (name == "densenet") {
    cfg.block_type = BlockType::densenet;
  } else if (name == "half_rf") {
    cfg.levels = 2;
  } else if (name == "half_rf_matched") {
    cfg.levels = 2;
    const int64_t target = parameter_count(ModelConfig{});
    int64_t best_width = 4;
    int64_t best_diff = std::numeric_limits<int64_t>::max();
    for (int64_t w = 4; w <= 256; ++w) {
      ModelConfig probe = cfg;
      probe.encoder_width = w;
      probe.decoder_width = 2 * w;
      const int64_t diff = std::llabs(parameter_count(probe) - target);
      if (diff < best_diff) {
        best_diff = diff;
        best_width = w;
      }
    }
    cfg.encoder_width = best_width;
    cfg.decoder_width = 2 * best_width;
  } else if (name == "width28") {
    cfg.encoder_width = 28;
    cfg.decoder_width = 56;
  } else if (name == "width36") {
    cfg.encoder_width = 36;
    cfg.decoder_width = 72;
  } else {
    throw ConfigError("unknown ablation variant '" + name + "'");
  }
  cfg.validate();
  return cfg;
}

namespace {

int64_t stage_block_params(BlockType t, int64_t ch) {
  return t == BlockType::resnet ? resnet_block_param_count(ch)
                                : densenet_block_param_count(ch, densenet_growth_for(ch));
}

int64_t bottleneck_params(int64_t in_ch, int64_t out_ch) {
  return 2 * in_ch + in_ch * out_ch + out_ch;
}

}  // namespace

int64_t parameter_count(const ModelConfig& cfg) {
  cfg.validate();
  const int64_t w = cfg.encoder_width;
  const int64_t dw = cfg.decoder_width;
  int64_t total = bottleneck_params(cfg.input_channels, w);
  total += cfg.levels * stage_block_params(cfg.block_type, w);
  total += stage_block_params(cfg.block_type, w);  // bridge
  total += cfg.levels * stage_block_params(cfg.block_type, dw);
  total += (cfg.levels - 1) * bottleneck_params(dw, w);
  total += bottleneck_params(dw, cfg.classes);
  return total;
}

int64_t receptive_field_1d(const std::vector<std::pair<int64_t, double>>& layers) {
  double rf = 1.0;
  double jump = 1.0;
  for (const auto& [kernel, stride] : layers) {
    rf += static_cast<double>(kernel - 1) * jump;
    jump *= stride;
  }
  return static_cast<int64_t>(std::llround(rf));
}

std::array<int64_t, 3> receptive_field(const ModelConfig& cfg) {
  cfg.validate();
  std::vector<std::pair<int64_t, double>> layers;
  layers.emplace_back(1, 1.0);  // stem 1x1x1 conv
  for (int64_t l = 0; l < cfg.levels; ++l) {
    layers.emplace_back(3, 1.0);
    layers.emplace_back(3, 1.0);
    layers.emplace_back(2, 2.0);  // maxpool
  }
  layers.emplace_back(3, 1.0);  // bridge
  layers.emplace_back(3, 1.0);
  for (int64_t l = 0; l < cfg.levels; ++l) {
    layers.emplace_back(2, 0.5);  // trilinear upsample
    layers.emplace_back(3, 1.0);
    layers.emplace_back(3, 1.0);
    layers.emplace_back(1, 1.0);  // reducer / head 1x1x1
  }
  const int64_t rf = receptive_field_1d(layers);
  return {rf, rf, rf};
}

// ---- StageBlock --------------------------------------------------------------

Tensor StageBlock::forward(const Tensor& x) {
  return std::visit([&](auto& block) { return block.forward(x); }, impl);
}

void StageBlock::set_training(bool on) {
  std::visit([&](auto& block) { block.set_training(on); }, impl);
}

void StageBlock::collect_parameters(const std::string& prefix, std::vector<NamedParam>& out) {
  std::visit([&](auto& block) { block.collect_parameters(prefix, out); }, impl);
}

void StageBlock::collect_buffers(const std::string& prefix, std::vector<NamedBuffer>& out) {
  std::visit([&](auto& block) { block.collect_buffers(prefix, out); }, impl);
}

namespace {

StageBlock make_stage_block(const ModelConfig& cfg, int64_t channels, std::mt19937_64& rng) {
  StageBlock b;
  if (cfg.block_type == BlockType::resnet) {
    b.impl = ResNetBlock::create(channels, rng);
  } else {
    b.impl = DenseNetBlock::create(channels, densenet_growth_for(channels), rng);
  }
  return b;
}

}  // namespace

// ---- Model ---------------------------------------------------------------------

Model Model::build(const ModelConfig& cfg, uint64_t seed) {
  cfg.validate();
  Model m;
  m.config_ = cfg;
  std::mt19937_64 rng(seed);
  const int64_t w = cfg.encoder_width;
  const int64_t dw = cfg.decoder_width;

  m.stem_ = Bottleneck::create(cfg.input_channels, w, rng);
  for (int64_t l = 0; l < cfg.levels; ++l) m.encoder_.push_back(make_stage_block(cfg, w, rng));
  m.bridge_ = make_stage_block(cfg, w, rng);
  for (int64_t l = 0; l < cfg.levels; ++l) {
    m.decoder_.push_back(make_stage_block(cfg, dw, rng));
    if (l + 1 < cfg.levels) m.reducers_.push_back(Bottleneck::create(dw, w, rng));
  }
  m.head_ = Bottleneck::create(dw, cfg.classes, rng);
  if (cfg.block_type == BlockType::densenet) m.densenet_growth_ = densenet_growth_for(w);
  return m;
}

Tensor Model::forward_traced(const Tensor& x, std::vector<LayerRow>* trace) {
  if (!x.defined() || x.rank() != 5)
    throw ContractViolation("model forward: input must be rank-5 (N,C,D,H,W)");
  if (x.dim(1) != config_.input_channels)
    throw ContractViolation("model forward: expected " + std::to_string(config_.input_channels) +
                            " input channels, got " + std::to_string(x.dim(1)));
  const int64_t mult = int64_t{1} << config_.levels;
  for (int64_t axis : {2, 3, 4}) {
    if (x.dim(axis) % mult != 0)
      throw ContractViolation("model forward: spatial dims must be divisible by " +
                              std::to_string(mult));
  }
  auto note = [&](const std::string& name, const Tensor& t) {
    if (trace) trace->push_back({name, t.shape()});
  };

  Tensor h = stem_.forward(x);
  note("stem", h);
  std::vector<Tensor> skips;
  for (size_t l = 0; l < encoder_.size(); ++l) {
    Tensor e = encoder_[l].forward(h);
    note("enc" + std::to_string(l + 1) + ".block", e);
    skips.push_back(e);
    h = maxpool2(e);
    note("enc" + std::to_string(l + 1) + ".pool", h);
  }
  h = bridge_.forward(h);
  note("bridge", h);
  for (size_t i = 0; i < decoder_.size(); ++i) {
    const std::string stage = "dec" + std::to_string(decoder_.size() - i);
    Tensor u = upsample_trilinear2(h);
    note(stage + ".upsample", u);
    Tensor c = concat_channels(u, skips[skips.size() - 1 - i]);
    note(stage + ".concat", c);
    Tensor d = decoder_[i].forward(c);
    note(stage + ".block", d);
    if (i < reducers_.size()) {
      h = reducers_[i].forward(d);
      note(stage + ".reduce", h);
    } else {
      h = d;
    }
  }
  Tensor logits = head_.forward(h);
  note("head", logits);
  Tensor prob = softmax_channels(logits);
  note("softmax", prob);
  return prob;
}

Mask argmax_mask(const Tensor& prob, const std::array<double, 3>& spacing) {
  if (prob.rank() != 5 || prob.dim(0) != 1 || prob.dim(1) != 2)
    throw ContractViolation("argmax_mask: expected a (1,2,D,H,W) probability tensor");
  Mask m;
  m.dims = {prob.dim(2), prob.dim(3), prob.dim(4)};
  m.spacing = spacing;
  const int64_t plane = m.voxels();
  m.data.resize(static_cast<size_t>(plane));
  const double* q = prob.values().data();
  for (int64_t i = 0; i < plane; ++i)
    m.data[static_cast<size_t>(i)] = q[plane + i] > q[i] ? 1 : 0;
  return m;
}

Mask Model::predict_mask(const Volume& v) {
  const bool was_training = training_;
  set_training(false);
  Mask out;
  try {
    autograd::NoGradGuard ng;
    PadRecord rec;
    const Volume padded = pad_to_multiple(normalize(v), int64_t{1} << config_.levels, rec);
    const Tensor prob = forward(to_tensor(padded));
    Mask full = argmax_mask(prob, v.spacing);
    full.orient = v.orient;
    out = crop(full, rec);
  } catch (...) {
    set_training(was_training);
    throw;
  }
  set_training(was_training);
  return out;
}

void Model::set_training(bool on) {
  training_ = on;
  stem_.set_training(on);
  for (auto& b : encoder_) b.set_training(on);
  bridge_.set_training(on);
  for (auto& b : decoder_) b.set_training(on);
  for (auto& r : reducers_) r.set_training(on);
  head_.set_training(on);
}

std::vector<NamedParam> Model::parameters() {
  std::vector<NamedParam> out;
  stem_.collect_parameters("stem", out);
  for (size_t l = 0; l < encoder_.size(); ++l)
    encoder_[l].collect_parameters("enc" + std::to_string(l + 1), out);
  bridge_.collect_parameters("bridge", out);
  for (size_t i = 0; i < decoder_.size(); ++i) {
    const std::string stage = "dec" + std::to_string(decoder_.size() - i);
    decoder_[i].collect_parameters(stage + ".block", out);
    if (i < reducers_.size()) reducers_[i].collect_parameters(stage + ".reduce", out);
  }
  head_.collect_parameters("head", out);
  return out;
}

std::vector<NamedBuffer> Model::buffers() {
  std::vector<NamedBuffer> out;
  stem_.collect_buffers("stem", out);
  for (size_t l = 0; l < encoder_.size(); ++l)
    encoder_[l].collect_buffers("enc" + std::to_string(l + 1), out);
  bridge_.collect_buffers("bridge", out);
  for (size_t i = 0; i < decoder_.size(); ++i) {
    const std::string stage = "dec" + std::to_string(decoder_.size() - i);
    decoder_[i].collect_buffers(stage + ".block", out);
    if (i < reducers_.size()) reducers_[i].collect_buffers(stage + ".reduce", out);
  }
  head_.collect_buffers("head", out);
  return out;
}

void Model::zero_grad() {
  for (auto& p : parameters()) p.tensor.zero_grad();
}

int64_t Model::parameter_count_enumerated() {
  int64_t total = 0;
  for (const auto& p : parameters()) total += p.tensor.size();
  return total;
}

ModelSummary Model::summarize(const std::array<int64_t, 3>& reference_dims) {
  ModelSummary s;
  s.parameter_count = parameter_count(config_);
  s.receptive_field = receptive_field(config_);
  s.densenet_growth = densenet_growth_;

  const bool was_training = training_;
  set_training(false);
  try {
    autograd::NoGradGuard ng;
    Tensor ref({1, config_.input_channels, reference_dims[0], reference_dims[1],
                reference_dims[2]});
    forward_traced(ref, &s.layer_table);
  } catch (...) {
    set_training(was_training);
    throw;
  }
  set_training(was_training);
  return s;
}

}  // namespace ratles
