#include "ratles/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "ratles/error.hpp"

static_assert(std::endian::native == std::endian::little,
              "checkpoint writer assumes a little-endian host");

namespace ratles {

namespace {

constexpr char kMagic[8] = {'R', 'L', 'N', '2', 'C', 'K', 'P', 'T'};
constexpr uint32_t kVersion = 1;

void put_u32(std::ostream& out, uint32_t v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

void put_u64(std::ostream& out, uint64_t v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

void put_entry(std::ostream& out, const std::string& name, const double* data, uint64_t count) {
  put_u32(out, static_cast<uint32_t>(name.size()));
  out.write(name.data(), static_cast<std::streamsize>(name.size()));
  put_u64(out, count);
  out.write(reinterpret_cast<const char*>(data),
            static_cast<std::streamsize>(count * sizeof(double)));
}

uint32_t get_u32(std::istream& in) {
  uint32_t v = 0;
  in.read(reinterpret_cast<char*>(&v), sizeof v);
  if (!in) throw DataError("checkpoint: truncated file");
  return v;
}

uint64_t get_u64(std::istream& in) {
  uint64_t v = 0;
  in.read(reinterpret_cast<char*>(&v), sizeof v);
  if (!in) throw DataError("checkpoint: truncated file");
  return v;
}

}  // namespace

void save_checkpoint(std::ostream& out, Model& model, const TrainState* trainer) {
  out.write(kMagic, sizeof kMagic);
  put_u32(out, kVersion);

  const std::string config = model.config().to_json_string();
  put_u32(out, static_cast<uint32_t>(config.size()));
  out.write(config.data(), static_cast<std::streamsize>(config.size()));

  auto params = model.parameters();
  auto buffers = model.buffers();
  uint64_t entries = params.size() + buffers.size();
  if (trainer) entries += 3 + 2 * params.size();
  put_u64(out, entries);

  for (const auto& p : params)
    put_entry(out, p.name, p.tensor.values().data(), static_cast<uint64_t>(p.tensor.size()));
  for (const auto& b : buffers) put_entry(out, b.name, b.values->data(), b.values->size());

  if (trainer) {
    const double t = static_cast<double>(trainer->adam.t);
    const double epochs = static_cast<double>(trainer->epochs_done);
    put_entry(out, "trainer.t", &t, 1);
    put_entry(out, "trainer.epochs_done", &epochs, 1);
    put_entry(out, "trainer.best_val_loss", &trainer->best_val_loss, 1);
    for (const auto& p : params) {
      const auto mi = trainer->adam.m.find(p.name);
      const auto vi = trainer->adam.v.find(p.name);
      static const std::vector<double> kEmpty;
      const std::vector<double>& m = mi == trainer->adam.m.end() ? kEmpty : mi->second;
      const std::vector<double>& v = vi == trainer->adam.v.end() ? kEmpty : vi->second;
      std::vector<double> mfull(static_cast<size_t>(p.tensor.size()), 0.0);
      std::vector<double> vfull(static_cast<size_t>(p.tensor.size()), 0.0);
      std::copy(m.begin(), m.end(), mfull.begin());
      std::copy(v.begin(), v.end(), vfull.begin());
      put_entry(out, "trainer.m." + p.name, mfull.data(), mfull.size());
      put_entry(out, "trainer.v." + p.name, vfull.data(), vfull.size());
    }
  }
  if (!out) throw DataError("checkpoint: write failed");
}

std::string checkpoint_bytes(Model& model, const TrainState* trainer) {
  std::ostringstream os(std::ios::binary);
  save_checkpoint(os, model, trainer);
  return os.str();
}

void save_checkpoint_file(const std::string& path, Model& model, const TrainState* trainer) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("checkpoint: cannot open '" + path + "' for writing");
  save_checkpoint(f, model, trainer);
  if (!f) throw DataError("checkpoint: write to '" + path + "' failed");
}

Model load_checkpoint(std::istream& in, TrainState* trainer_out) {
  char magic[8] = {};
  in.read(magic, sizeof magic);
  if (!in || std::memcmp(magic, kMagic, sizeof kMagic) != 0)
    throw DataError("checkpoint: bad magic");
  const uint32_t version = get_u32(in);
  if (version != kVersion)
    throw DataError("checkpoint: unsupported version " + std::to_string(version));

  const uint32_t config_len = get_u32(in);
  std::string config_json(config_len, '\0');
  in.read(config_json.data(), config_len);
  if (!in) throw DataError("checkpoint: truncated config");
  const ModelConfig cfg = ModelConfig::from_json_string(config_json);

  Model model = Model::build(cfg, 0);
  auto params = model.parameters();
  auto buffers = model.buffers();

  if (trainer_out) *trainer_out = TrainState{};

  const uint64_t entries = get_u64(in);
  for (uint64_t e = 0; e < entries; ++e) {
    const uint32_t name_len = get_u32(in);
    std::string name(name_len, '\0');
    in.read(name.data(), name_len);
    const uint64_t count = get_u64(in);
    std::vector<double> values(count);
    in.read(reinterpret_cast<char*>(values.data()),
            static_cast<std::streamsize>(count * sizeof(double)));
    if (!in) throw DataError("checkpoint: truncated entry '" + name + "'");

    bool matched = false;
    for (auto& p : params) {
      if (p.name == name) {
        if (static_cast<uint64_t>(p.tensor.size()) != count)
          throw DataError("checkpoint: size mismatch for '" + name + "'");
        std::copy(values.begin(), values.end(), p.tensor.values().begin());
        matched = true;
        break;
      }
    }
    if (!matched) {
      for (auto& b : buffers) {
        if (b.name == name) {
          if (b.values->size() != count)
            throw DataError("checkpoint: size mismatch for '" + name + "'");
          *b.values = std::move(values);
          matched = true;
          break;
        }
      }
    }
    if (!matched && name.rfind("trainer.", 0) == 0) {
      matched = true;
      if (trainer_out) {
        if (name == "trainer.t")
          trainer_out->adam.t = static_cast<int64_t>(values.at(0));
        else if (name == "trainer.epochs_done")
          trainer_out->epochs_done = static_cast<int64_t>(values.at(0));
        else if (name == "trainer.best_val_loss")
          trainer_out->best_val_loss = values.at(0);
        else if (name.rfind("trainer.m.", 0) == 0)
          trainer_out->adam.m[name.substr(10)] = std::move(values);
        else if (name.rfind("trainer.v.", 0) == 0)
          trainer_out->adam.v[name.substr(10)] = std::move(values);
        else
          throw DataError("checkpoint: unknown trainer entry '" + name + "'");
      }
    }
    if (!matched) throw DataError("checkpoint: unknown entry '" + name + "'");
  }
  return model;
}

Model load_checkpoint_file(const std::string& path, TrainState* trainer_out) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("checkpoint: cannot open '" + path + "'");
  return load_checkpoint(f, trainer_out);
}

}  // namespace ratles
