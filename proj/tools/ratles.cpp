// Command-line front end: phantom generation, training, ensembled inference,
// post-processing, evaluation, and model diagnostics.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "ratles/checkpoint.hpp"
#include "ratles/error.hpp"
#include "ratles/metrics.hpp"
#include "ratles/model.hpp"
#include "ratles/nifti.hpp"
#include "ratles/phantom.hpp"
#include "ratles/training.hpp"
#include "ratles/volume.hpp"

namespace fs = std::filesystem;
using namespace ratles;

namespace {

// ---- run configuration -------------------------------------------------------

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  int64_t postproc_threshold = 20;
  std::string train_dir;
  std::string val_dir;
  std::string out_dir;
};

void reject_unknown(const nlohmann::json& section, const char* name,
                    const std::vector<std::string>& allowed) {
  for (const auto& [key, value] : section.items()) {
    if (std::find(allowed.begin(), allowed.end(), key) == allowed.end())
      throw ConfigError(std::string("config: unknown key '") + key + "' in section '" + name +
                        "'");
  }
}

ModelConfig parse_model_section(const nlohmann::json& section) {
  reject_unknown(section, "model", {"levels", "encoder_width", "block_type", "variant"});
  const std::string variant =
      section.contains("variant") ? section["variant"].get<std::string>() : "baseline";
  if (variant != "baseline") {
    if (section.size() > 1)
      throw ConfigError("config: variant '" + variant +
                        "' fixes the architecture; drop the other model keys");
    return ablation_variant(variant);
  }
  ModelConfig cfg;
  if (section.contains("levels")) cfg.levels = section["levels"].get<int64_t>();
  if (section.contains("encoder_width"))
    cfg.encoder_width = section["encoder_width"].get<int64_t>();
  if (section.contains("block_type"))
    cfg.block_type = block_type_from_string(section["block_type"].get<std::string>());
  cfg.decoder_width = 2 * cfg.encoder_width;
  cfg.validate();
  return cfg;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("config: cannot open '" + path + "'");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(f);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: bad JSON: ") + e.what());
  }
  reject_unknown(j, "<root>", {"model", "train", "postproc", "paths"});

  RunConfig cfg;
  if (j.contains("model")) cfg.model = parse_model_section(j["model"]);
  if (j.contains("train")) {
    const auto& t = j["train"];
    reject_unknown(t, "train", {"learning_rate", "epochs", "batch_size", "seed"});
    if (t.contains("learning_rate")) cfg.train.learning_rate = t["learning_rate"].get<double>();
    if (t.contains("epochs")) cfg.train.epochs = t["epochs"].get<int64_t>();
    if (t.contains("batch_size")) cfg.train.batch_size = t["batch_size"].get<int64_t>();
    if (t.contains("seed")) cfg.train.seed = t["seed"].get<uint64_t>();
    cfg.train.validate();
  }
  if (j.contains("postproc")) {
    const auto& p = j["postproc"];
    reject_unknown(p, "postproc", {"threshold"});
    if (p.contains("threshold")) cfg.postproc_threshold = p["threshold"].get<int64_t>();
    if (cfg.postproc_threshold < 0)
      throw ConfigError("config: postproc threshold must be >= 0");
  }
  if (j.contains("paths")) {
    const auto& p = j["paths"];
    reject_unknown(p, "paths", {"train_dir", "val_dir", "out_dir"});
    if (p.contains("train_dir")) cfg.train_dir = p["train_dir"].get<std::string>();
    if (p.contains("val_dir")) cfg.val_dir = p["val_dir"].get<std::string>();
    if (p.contains("out_dir")) cfg.out_dir = p["out_dir"].get<std::string>();
  }
  return cfg;
}

// ---- shared data plumbing ------------------------------------------------------

// image_<id>.nii / label_<id>.nii pairs, sorted by id.
std::vector<TrainSample> load_pairs(const std::string& dir) {
  if (!fs::is_directory(dir)) throw DataError("data: '" + dir + "' is not a directory");
  std::vector<std::string> ids;
  for (const auto& entry : fs::directory_iterator(dir)) {
    const std::string name = entry.path().filename().string();
    if (name.rfind("image_", 0) == 0 && name.size() > 10 &&
        name.substr(name.size() - 4) == ".nii")
      ids.push_back(name.substr(6, name.size() - 10));
  }
  std::sort(ids.begin(), ids.end());
  if (ids.empty()) throw DataError("data: no image_*.nii files in '" + dir + "'");

  std::vector<TrainSample> samples;
  for (const std::string& id : ids) {
    TrainSample s;
    s.id = id;
    s.image = read_nifti_volume((fs::path(dir) / ("image_" + id + ".nii")).string());
    const auto label_path = fs::path(dir) / ("label_" + id + ".nii");
    if (!fs::exists(label_path))
      throw DataError("data: missing label for id '" + id + "' in '" + dir + "'");
    s.label = read_nifti_mask(label_path.string());
    samples.push_back(std::move(s));
  }
  return samples;
}

std::map<std::string, fs::path> files_by_id(const std::string& dir, const std::string& prefix) {
  if (!fs::is_directory(dir)) throw DataError("data: '" + dir + "' is not a directory");
  std::map<std::string, fs::path> out;
  for (const auto& entry : fs::directory_iterator(dir)) {
    const std::string name = entry.path().filename().string();
    if (name.rfind(prefix, 0) == 0 && name.size() > prefix.size() + 4 &&
        name.substr(name.size() - 4) == ".nii")
      out[name.substr(prefix.size(), name.size() - prefix.size() - 4)] = entry.path();
  }
  return out;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path);
  if (!f) throw DataError("data: cannot write '" + path.string() + "'");
  f << text;
}

std::string dims_str(const std::array<int64_t, 3>& d) {
  std::ostringstream os;
  os << d[0] << "," << d[1] << "," << d[2];
  return os.str();
}

// ---- subcommands -----------------------------------------------------------------

int cmd_phantom(int64_t count, const std::string& dims_flag, double sham_fraction,
                uint64_t seed, const std::string& out, int64_t blobs, double gain,
                double noise) {
  PhantomSpec spec;
  if (!dims_flag.empty()) {
    int64_t w = 0, h = 0, d = 0;
    char sep1 = 0, sep2 = 0;
    std::istringstream is(dims_flag);
    if (!(is >> w >> sep1 >> h >> sep2 >> d) || (sep1 != 'x' && sep1 != ',') || sep1 != sep2)
      throw ConfigError("config: --dims expects WxHxD, e.g. 32x32x16");
    spec.dims = {d, h, w};
  }
  spec.lesion_blobs = blobs;
  spec.lesion_intensity_gain = gain;
  spec.noise_sigma = noise;

  fs::create_directories(out);
  auto items = generate_cohort(count, spec, seed, sham_fraction);
  for (const auto& item : items) {
    write_nifti(item.image, (fs::path(out) / ("image_" + item.id + ".nii")).string());
    write_nifti(item.label, (fs::path(out) / ("label_" + item.id + ".nii")).string());
  }
  write_text(fs::path(out) / "manifest.csv", cohort_manifest_csv(items));
  std::printf("wrote %lld phantom pairs to %s\n", static_cast<long long>(count), out.c_str());
  return 0;
}

int cmd_train(const std::string& config_path, int64_t runs) {
  const RunConfig cfg = load_run_config(config_path);
  if (runs < 1) throw ConfigError("config: --runs must be >= 1");
  if (cfg.train_dir.empty() || cfg.out_dir.empty())
    throw ConfigError("config: paths.train_dir and paths.out_dir are required for train");

  const auto train_set = load_pairs(cfg.train_dir);
  std::vector<TrainSample> val_set;
  if (!cfg.val_dir.empty()) val_set = load_pairs(cfg.val_dir);

  for (int64_t run = 0; run < runs; ++run) {
    TrainConfig tc = cfg.train;
    tc.seed = cfg.train.seed + static_cast<uint64_t>(run);
    Model model = Model::build(cfg.model, tc.seed);

    const fs::path run_dir = fs::path(cfg.out_dir) / ("run_" + std::to_string(run + 1));
    fs::create_directories(run_dir);

    auto log = [&](const EpochMetrics& em) {
      std::printf("run %lld/%lld epoch %lld/%lld train_loss %.6f", static_cast<long long>(run + 1),
                  static_cast<long long>(runs), static_cast<long long>(em.epoch),
                  static_cast<long long>(tc.epochs), em.train_loss);
      if (em.val_loss) std::printf(" val_loss %.6f", *em.val_loss);
      if (em.val_dice) std::printf(" val_dice %.4f", *em.val_dice);
      std::printf("\n");
      std::fflush(stdout);
    };
    TrainResult result = train(model, train_set, val_set, tc, nullptr, log);

    write_text(run_dir / "metrics.csv", metrics_csv(result.history));
    write_text(run_dir / "checkpoint_last.ckpt", result.last_checkpoint);
    write_text(run_dir / "checkpoint_best.ckpt", result.best_checkpoint);
  }
  return 0;
}

int cmd_infer(const std::vector<std::string>& checkpoints, const std::string& in,
              const std::string& out, const std::string& postproc, int64_t threshold) {
  if (checkpoints.size() != 1 && checkpoints.size() != 3)
    throw ConfigError("config: --checkpoints takes one model or an ensemble of three");
  if (postproc != "on" && postproc != "off")
    throw ConfigError("config: --postproc must be on or off");
  if (threshold < 0) throw ConfigError("config: --threshold must be >= 0");

  std::vector<Model> models;
  for (const auto& path : checkpoints) models.push_back(load_checkpoint_file(path));
  for (const auto& m : models) {
    if (m.config().to_json_string() != models.front().config().to_json_string())
      throw DataError("data: ensemble checkpoints disagree on the model config");
  }

  std::vector<std::pair<std::string, fs::path>> inputs;
  if (fs::is_directory(in)) {
    for (const auto& [id, path] : files_by_id(in, "image_")) inputs.emplace_back(id, path);
    if (inputs.empty()) throw DataError("data: no image_*.nii files in '" + in + "'");
  } else if (fs::exists(in)) {
    std::string id = fs::path(in).stem().string();
    if (id.rfind("image_", 0) == 0) id = id.substr(6);
    inputs.emplace_back(id, in);
  } else {
    throw DataError("data: input '" + in + "' does not exist");
  }

  fs::create_directories(out);
  std::string joined;
  for (const auto& c : checkpoints) joined += (joined.empty() ? "" : ",") + c;

  for (const auto& [id, path] : inputs) {
    const Volume vol = read_nifti_volume(path.string());
    Mask result;
    if (models.size() == 1) {
      result = models[0].predict_mask(vol);
    } else {
      std::vector<Mask> votes;
      for (auto& m : models) votes.push_back(m.predict_mask(vol));
      result = majority_vote(votes);
    }
    if (postproc == "on") result = remove_islands_fill_holes(result, threshold);

    write_nifti(result, (fs::path(out) / ("pred_" + id + ".nii")).string());

    const PadRecord rec =
        make_pad_record(vol.dims, int64_t{1} << models.front().config().levels);
    std::ostringstream meta;
    meta << "source=" << path.filename().string() << "\n"
         << "checkpoints=" << joined << "\n"
         << "model_variant=" << models.front().config().variant << "\n"
         << "postproc=" << postproc << "\n"
         << "threshold=" << threshold << "\n"
         << "pad_lo=" << dims_str(rec.lo) << "\n"
         << "pad_hi=" << dims_str(rec.hi) << "\n"
         << "original_dims=" << dims_str(rec.original) << "\n"
         << "padded_dims=" << dims_str(rec.padded) << "\n";
    write_text(fs::path(out) / ("pred_" + id + ".meta"), meta.str());
  }
  std::printf("wrote %zu prediction(s) to %s\n", inputs.size(), out.c_str());
  return 0;
}

int cmd_eval(const std::string& pred_dir, const std::string& gt_dir, const std::string& out,
             const std::string& compare_dir, int64_t iterations, uint64_t seed) {
  const auto gts = files_by_id(gt_dir, "label_");
  if (gts.empty()) throw DataError("data: no label_*.nii files in '" + gt_dir + "'");
  const auto preds = files_by_id(pred_dir, "pred_");

  std::vector<std::string> ids;
  std::vector<Mask> gt_masks, pred_masks;
  for (const auto& [id, gt_path] : gts) {
    const auto it = preds.find(id);
    if (it == preds.end())
      throw DataError("data: no prediction for id '" + id + "' in '" + pred_dir + "'");
    ids.push_back(id);
    gt_masks.push_back(read_nifti_mask(gt_path.string()));
    pred_masks.push_back(read_nifti_mask(it->second.string()));
  }
  for (const auto& [id, path] : preds)
    if (!gts.count(id))
      throw DataError("data: prediction id '" + id + "' has no ground truth in '" + gt_dir + "'");

  const auto reports = evaluate_cohort(pred_masks, gt_masks);
  const CohortSummary summary = summarize(reports);
  std::string csv = metrics_report_csv(ids, reports, &summary);

  if (!compare_dir.empty()) {
    const auto others = files_by_id(compare_dir, "pred_");
    std::vector<Mask> other_masks;
    for (const auto& id : ids) {
      const auto it = others.find(id);
      if (it == others.end())
        throw DataError("data: no prediction for id '" + id + "' in '" + compare_dir + "'");
      other_masks.push_back(read_nifti_mask(it->second.string()));
    }
    const auto other_reports = evaluate_cohort(other_masks, gt_masks);

    auto paired = [&](auto pick, const char* name) {
      std::vector<double> a, b;
      for (size_t i = 0; i < reports.size(); ++i) {
        const auto va = pick(reports[i]);
        const auto vb = pick(other_reports[i]);
        if (va && vb) {
          a.push_back(*va);
          b.push_back(*vb);
        }
      }
      if (a.size() < 2) {
        std::printf("p_%s=\n", name);
        return std::string("p_") + name + ",,,\n";
      }
      const double p = paired_permutation_test(a, b, iterations, seed);
      std::printf("p_%s=%.6g\n", name, p);
      char buf[64];
      std::snprintf(buf, sizeof buf, "%.17g", p);
      return std::string("p_") + name + "," + buf + ",,\n";
    };
    csv += paired([](const MetricReport& r) { return std::optional<double>(r.dice); }, "dice");
    csv += paired([](const MetricReport& r) { return r.compactness; }, "compactness");
    csv += paired([](const MetricReport& r) { return r.hausdorff_mm; }, "hausdorff_mm");
  }

  if (!out.empty()) {
    if (const auto parent = fs::path(out).parent_path(); !parent.empty())
      fs::create_directories(parent);
    write_text(out, csv);
  }
  std::printf("evaluated %zu item(s): mean dice %.4f\n", ids.size(), summary.dice_mean);
  return 0;
}

int cmd_summary(const std::string& config_path) {
  const RunConfig cfg = load_run_config(config_path);
  Model model = Model::build(cfg.model, cfg.train.seed);
  const int64_t side = (int64_t{1} << cfg.model.levels) * 2;
  const ModelSummary s = model.summarize({side, side, side});

  std::printf("variant: %s\n", cfg.model.variant.c_str());
  std::printf("block type: %s\n", to_string(cfg.model.block_type).c_str());
  std::printf("levels: %lld  encoder width: %lld  decoder width: %lld\n",
              static_cast<long long>(cfg.model.levels),
              static_cast<long long>(cfg.model.encoder_width),
              static_cast<long long>(cfg.model.decoder_width));
  if (s.densenet_growth > 0)
    std::printf("densenet growth (encoder/decoder): %lld/%lld\n",
                static_cast<long long>(s.densenet_growth),
                static_cast<long long>(densenet_growth_for(cfg.model.decoder_width)));
  std::printf("parameters: %lld\n", static_cast<long long>(s.parameter_count));
  std::printf("receptive field: %lldx%lldx%lld\n", static_cast<long long>(s.receptive_field[0]),
              static_cast<long long>(s.receptive_field[1]),
              static_cast<long long>(s.receptive_field[2]));
  std::printf(
      "note: previously reported receptive-field figures for this architecture disagree\n"
      "      (76 vs 72); the value above is computed from the layer recurrence and is\n"
      "      asserted in place of either.\n");
  std::printf("layers (reference input 1x%lldx%lldx%lldx%lld):\n",
              static_cast<long long>(cfg.model.input_channels), static_cast<long long>(side),
              static_cast<long long>(side), static_cast<long long>(side));
  for (const auto& row : s.layer_table) {
    std::string shape;
    for (size_t i = 0; i < row.output_shape.size(); ++i)
      shape += (i ? "x" : "") + std::to_string(row.output_shape[i]);
    std::printf("  %-16s %s\n", row.name.c_str(), shape.c_str());
  }
  return 0;
}

int cmd_gradcheck(const std::string& config_path) {
  const RunConfig cfg = load_run_config(config_path);
  Model model = Model::build(cfg.model, cfg.train.seed);

  // A normalized phantom matches the distribution the network actually sees;
  // its intensities sit far from the ReLU kinks that make central
  // differences on arbitrary Gaussian inputs ill-conditioned.
  PhantomSpec spec;
  spec.dims = {8, 8, 8};
  spec.seed = cfg.train.seed + 100;
  const auto [vol, mask] = generate_phantom(spec);
  const Tensor x = to_tensor(normalize(vol));
  const Tensor target = to_tensor(mask);

  auto loss_value = [&] {
    autograd::NoGradGuard ng;
    return total_loss(model.forward(x), target).item();
  };
  backward(total_loss(model.forward(x), target));

  const double step = 1e-5;
  double worst_overall = 0.0;
  for (auto& p : model.parameters()) {
    // deterministic sample of entries per parameter group
    std::mt19937_64 pick(42);
    std::vector<int64_t> entries(static_cast<size_t>(p.tensor.size()));
    for (size_t i = 0; i < entries.size(); ++i) entries[i] = static_cast<int64_t>(i);
    std::shuffle(entries.begin(), entries.end(), pick);
    entries.resize(std::min<size_t>(entries.size(), 4));

    double worst = 0.0;
    for (int64_t idx : entries) {
      double* values = p.tensor.values().data();
      const double saved = values[idx];
      values[idx] = saved + step;
      const double up = loss_value();
      values[idx] = saved - step;
      const double down = loss_value();
      values[idx] = saved;
      const double numeric = (up - down) / (2.0 * step);
      const double analytic =
          p.tensor.grad().empty() ? 0.0 : p.tensor.grad()[static_cast<size_t>(idx)];
      const double rel = std::fabs(analytic - numeric) /
                         std::max({std::fabs(analytic), std::fabs(numeric), 1e-3});
      worst = std::max(worst, rel);
    }
    std::printf("%-24s max rel err %.3g\n", p.name.c_str(), worst);
    worst_overall = std::max(worst_overall, worst);
  }
  std::printf("overall max rel err %.3g (tolerance 1e-4)\n", worst_overall);
  if (worst_overall >= 1e-4)
    throw NumericalError("gradcheck: max relative error " + std::to_string(worst_overall));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Volumetric lesion segmentation: phantoms, training, inference, evaluation"};
  app.require_subcommand(1);

  auto* phantom = app.add_subcommand("phantom", "Generate a synthetic phantom cohort");
  int64_t count = 1;
  std::string dims_flag;
  double sham_fraction = 0.0;
  uint64_t seed = 0;
  std::string out_dir;
  int64_t blobs = 3;
  double gain = 0.5, noise = 0.05;
  phantom->add_option("--count", count, "Number of phantom pairs")->required();
  phantom->add_option("--dims", dims_flag, "Volume dims as WxHxD (default 32x32x16)");
  phantom->add_option("--sham-fraction", sham_fraction, "Fraction of lesion-free items");
  phantom->add_option("--seed", seed, "Cohort seed");
  phantom->add_option("--out", out_dir, "Output directory")->required();
  phantom->add_option("--blobs", blobs, "Lesion blobs per phantom");
  phantom->add_option("--gain", gain, "Lesion intensity gain over brain tissue");
  phantom->add_option("--noise-sigma", noise, "Additive Gaussian noise sigma");

  auto* train_cmd = app.add_subcommand("train", "Train one or more runs from a JSON config");
  std::string config_path;
  int64_t runs = 1;
  train_cmd->add_option("--config", config_path, "JSON run configuration")->required();
  train_cmd->add_option("--runs", runs, "Independent runs with seeds seed+0..N-1");

  auto* infer = app.add_subcommand("infer", "Segment volumes with one model or a 3-ensemble");
  std::vector<std::string> checkpoints;
  std::string in_path, infer_out, postproc = "on";
  int64_t threshold = 20;
  infer->add_option("--checkpoints", checkpoints, "1 or 3 checkpoint files")
      ->required()
      ->delimiter(',');
  infer->add_option("--in", in_path, "Input volume file or directory of image_*.nii")
      ->required();
  infer->add_option("--out", infer_out, "Output directory")->required();
  infer->add_option("--postproc", postproc, "Remove small islands/holes: on|off");
  infer->add_option("--threshold", threshold, "Island/hole size threshold in voxels");

  auto* eval_cmd = app.add_subcommand("eval", "Score predictions against ground truth");
  std::string pred_dir, gt_dir, eval_out, compare_dir;
  int64_t iterations = 10000;
  uint64_t eval_seed = 0;
  eval_cmd->add_option("--pred-dir", pred_dir, "Directory of pred_*.nii")->required();
  eval_cmd->add_option("--gt-dir", gt_dir, "Directory of label_*.nii")->required();
  eval_cmd->add_option("--out", eval_out, "Metrics CSV path");
  eval_cmd->add_option("--compare", compare_dir,
                       "Second prediction directory for paired permutation tests");
  eval_cmd->add_option("--iterations", iterations, "Permutation iterations");
  eval_cmd->add_option("--seed", eval_seed, "Permutation seed");

  auto* summary = app.add_subcommand("summary", "Print parameter count, receptive field, layers");
  std::string summary_config;
  summary->add_option("--config", summary_config, "JSON run configuration")->required();

  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference check on an 8x8x8 input");
  std::string gradcheck_config;
  gradcheck->add_option("--config", gradcheck_config, "JSON run configuration")->required();

  try {
    app.parse(argc, argv);
    if (phantom->parsed())
      return cmd_phantom(count, dims_flag, sham_fraction, seed, out_dir, blobs, gain, noise);
    if (train_cmd->parsed()) return cmd_train(config_path, runs);
    if (infer->parsed()) return cmd_infer(checkpoints, in_path, infer_out, postproc, threshold);
    if (eval_cmd->parsed())
      return cmd_eval(pred_dir, gt_dir, eval_out, compare_dir, iterations, eval_seed);
    if (summary->parsed()) return cmd_summary(summary_config);
    if (gradcheck->parsed()) return cmd_gradcheck(gradcheck_config);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  } catch (const ConfigError& e) {
    std::cerr << "error: config: " << e.what() << "\n";
    return 2;
  } catch (const DataError& e) {
    std::cerr << "error: data: " << e.what() << "\n";
    return 3;
  } catch (const ContractViolation& e) {
    std::cerr << "error: data: " << e.what() << "\n";
    return 3;
  } catch (const NumericalError& e) {
    std::cerr << "error: numerical: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: internal: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
