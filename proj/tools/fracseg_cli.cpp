// fracseg: command-line front end for the volumetric segmentation toolkit.
// Subcommands: synth, preprocess, sdt, train, infer, evaluate, gradcheck.
// Exit codes: 0 ok, 1 usage, 2 data, 3 numeric.

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "fracseg/config.hpp"
#include "fracseg/gradcheck.hpp"
#include "fracseg/losses.hpp"
#include "fracseg/metrics.hpp"
#include "fracseg/model.hpp"
#include "fracseg/preprocess.hpp"
#include "fracseg/synthetic.hpp"
#include "fracseg/trainer.hpp"
#include "fracseg/volume.hpp"

namespace fs = std::filesystem;
using namespace fracseg;

namespace {

KeyValueConfig load_config(const std::string& path, const std::vector<std::string>& overrides) {
  KeyValueConfig kv;
  if (!path.empty()) kv = KeyValueConfig::load(path);
  for (const std::string& ov : overrides) {
    const size_t eq = ov.find('=');
    if (eq == std::string::npos)
      throw UsageError("--set expects key=value, got '" + ov + "'");
    kv.set(ov.substr(0, eq), ov.substr(eq + 1));
  }
  return kv;
}

SyntheticSpec synthetic_from_config(const KeyValueConfig& kv) {
  SyntheticSpec s;
  s.seed = static_cast<uint64_t>(kv.get_int("seed", static_cast<long>(s.seed)));
  const long ext = kv.get_int("extent", s.extents[0]);
  s.extents[0] = s.extents[1] = s.extents[2] = static_cast<int>(ext);
  const double sp = kv.get_double("spacing_mm", s.spacing[0]);
  s.spacing[0] = s.spacing[1] = s.spacing[2] = sp;
  s.body_count = static_cast<int>(kv.get_int("body_count", s.body_count));
  s.radius_min_mm = kv.get_double("radius_min_mm", s.radius_min_mm);
  s.radius_max_mm = kv.get_double("radius_max_mm", s.radius_max_mm);
  s.fracture_gaps = static_cast<int>(kv.get_int("fracture_gaps", s.fracture_gaps));
  s.gap_min_mm = kv.get_double("gap_min_mm", s.gap_min_mm);
  s.gap_max_mm = kv.get_double("gap_max_mm", s.gap_max_mm);
  s.shell_thickness_mm = kv.get_double("shell_thickness_mm", s.shell_thickness_mm);
  s.bone_intensity = static_cast<float>(kv.get_double("bone_intensity", s.bone_intensity));
  s.cancellous_intensity =
      static_cast<float>(kv.get_double("cancellous_intensity", s.cancellous_intensity));
  s.soft_tissue_intensity =
      static_cast<float>(kv.get_double("soft_tissue_intensity", s.soft_tissue_intensity));
  s.noise_sigma = static_cast<float>(kv.get_double("noise_sigma", s.noise_sigma));
  // reject unknown keys so typos fail loudly
  static const std::set<std::string> known = {
      "seed", "extent", "spacing_mm", "body_count", "radius_min_mm", "radius_max_mm",
      "fracture_gaps", "gap_min_mm", "gap_max_mm", "shell_thickness_mm", "bone_intensity",
      "cancellous_intensity", "soft_tissue_intensity", "noise_sigma", "count"};
  for (const auto& [k, v] : kv.entries())
    if (!known.count(k)) throw DataError("synthetic spec: unknown key '" + k + "'");
  return s;
}

NetworkConfig network_from_config(const KeyValueConfig& kv) {
  NetworkConfig c;
  c.base_width = static_cast<int>(kv.get_int("base_width", c.base_width));
  c.use_csa = kv.get_int("use_csa", c.use_csa ? 1 : 0) != 0;
  c.csa.inter_channels =
      static_cast<int>(kv.get_int("csa_inter_channels", c.csa.inter_channels));
  return c;
}

TrainConfig train_from_config(const KeyValueConfig& kv) {
  TrainConfig c;
  c.initial_lr = static_cast<float>(kv.get_double("initial_lr", c.initial_lr));
  c.beta1 = static_cast<float>(kv.get_double("beta1", c.beta1));
  c.beta2 = static_cast<float>(kv.get_double("beta2", c.beta2));
  c.batch_size = static_cast<int>(kv.get_int("batch_size", c.batch_size));
  c.max_epochs = static_cast<int>(kv.get_int("max_epochs", c.max_epochs));
  c.steps_per_epoch = static_cast<int>(kv.get_int("steps_per_epoch", c.steps_per_epoch));
  c.lambda = static_cast<float>(kv.get_double("lambda", c.lambda));
  c.loss_mode = loss_mode_from_string(kv.get_string("loss_mode", to_string(c.loss_mode)));
  c.seed = static_cast<uint64_t>(kv.get_int("seed", static_cast<long>(c.seed)));
  c.patch_size = static_cast<int>(kv.get_int("patch_size", c.patch_size));
  c.validate_every = static_cast<int>(kv.get_int("validate_every", c.validate_every));
  return c;
}

// Read only the cfg lines of a checkpoint so the network can be constructed
// with the matching architecture before the weights load.
NetworkConfig network_from_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("checkpoint: cannot open " + path);
  std::string line;
  if (!std::getline(is, line) || line != "CKPT1")
    throw DataError("checkpoint: magic mismatch in " + path);
  NetworkConfig cfg;
  while (std::getline(is, line) && line != "data") {
    std::istringstream ls(line);
    std::string kind, key;
    int value;
    ls >> kind >> key >> value;
    if (kind != "cfg") continue;
    if (key == "in_channels") cfg.in_channels = value;
    else if (key == "num_classes") cfg.num_classes = value;
    else if (key == "base_width") cfg.base_width = value;
    else if (key == "use_csa") cfg.use_csa = value != 0;
    else if (key == "csa_inter_channels") cfg.csa.inter_channels = value;
  }
  return cfg;
}

std::vector<TrainingCase> load_dataset(const std::string& dir) {
  std::vector<std::string> ids;
  for (const auto& e : fs::directory_iterator(dir)) {
    const std::string name = e.path().filename().string();
    const std::string suffix = "_img.vol";
    if (name.size() > suffix.size() &&
        name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0)
      ids.push_back(name.substr(0, name.size() - suffix.size()));
  }
  std::sort(ids.begin(), ids.end());
  if (ids.empty())
    throw DataError("dataset: no *_img.vol files in " + dir);
  std::vector<TrainingCase> out;
  for (const std::string& id : ids) {
    TrainingCase tc;
    tc.id = id;
    tc.image = read_volume_f32(dir + "/" + id + "_img.vol");
    tc.label = read_volume_u8(dir + "/" + id + "_lab.vol");
    require_same_geometry(tc.image, tc.label, ("dataset case " + id).c_str());
    out.push_back(std::move(tc));
  }
  return out;
}

int cmd_synth(const std::string& spec_path, const std::vector<std::string>& overrides,
              const std::string& out_dir, int count) {
  KeyValueConfig kv = load_config(spec_path, overrides);
  SyntheticSpec base = synthetic_from_config(kv);
  count = static_cast<int>(kv.get_int("count", count));
  if (count < 1) throw UsageError("synth: count must be >= 1");
  fs::create_directories(out_dir);
  std::ofstream manifest(out_dir + "/manifest.txt");
  if (!manifest) throw DataError("synth: cannot write to " + out_dir);
  manifest << "case_id seed\n";
  for (int i = 0; i < count; ++i) {
    SyntheticSpec spec = base;
    spec.seed = base.seed + static_cast<uint64_t>(i);
    auto [vol, lab] = generate_synthetic(spec);
    char id[32];
    std::snprintf(id, sizeof(id), "case%03d", i);
    write_volume(vol, out_dir + "/" + id + "_img.vol");
    write_volume(lab, out_dir + "/" + id + "_lab.vol");
    manifest << id << " " << spec.seed << "\n";
  }
  std::cout << "wrote " << count << " volume/label pairs to " << out_dir << "\n";
  return 0;
}

int cmd_preprocess(const std::string& in_path, const std::string& out_path,
                   const std::string& label_in, const std::string& label_out,
                   const std::string& config_path, const std::vector<std::string>& overrides) {
  KeyValueConfig kv = load_config(config_path, overrides);
  PreprocessConfig cfg = PreprocessConfig::from_config(kv);
  Volume v = read_volume_f32(in_path);
  Volume windowed = clamp_and_window(v, cfg);
  Volume resampled = resample(windowed, cfg.target_spacing);
  write_volume(resampled, out_path);
  std::cout << "preprocessed " << in_path << " -> " << out_path << " ("
            << resampled.extents[0] << "x" << resampled.extents[1] << "x"
            << resampled.extents[2] << " @ " << cfg.target_spacing[0] << " mm)\n";
  if (!label_in.empty()) {
    if (label_out.empty()) throw UsageError("preprocess: --label-in requires --label-out");
    LabelVolume lab = read_volume_u8(label_in);
    write_volume(resample(lab, cfg.target_spacing), label_out);
  }
  return 0;
}

int cmd_sdt(const std::string& mask_path, const std::string& out_path) {
  LabelVolume mask = read_volume_u8(mask_path);
  SignedDistanceField sdf = signed_distance(mask);
  write_volume(sdf_to_volume(sdf), out_path);
  std::cout << "wrote signed distance field to " << out_path << "\n";
  return 0;
}

int cmd_train(const std::string& data_dir, const std::string& out_dir,
              const std::string& config_path, const std::vector<std::string>& overrides,
              int val_count, bool quiet) {
  KeyValueConfig kv = load_config(config_path, overrides);
  TrainConfig cfg = train_from_config(kv);
  NetworkConfig net_cfg = network_from_config(kv);
  auto data = load_dataset(data_dir);
  if (val_count < 0 || val_count >= static_cast<int>(data.size()))
    throw UsageError("train: --val-count must be in [0, dataset size)");
  std::vector<TrainingCase> val(data.end() - val_count, data.end());
  data.resize(data.size() - static_cast<size_t>(val_count));

  fs::create_directories(out_dir);
  Network net(net_cfg, cfg.seed);
  RunRecord rec = train(net, data, val, cfg, out_dir, !quiet);
  rec.write_loss_csv(out_dir + "/loss.csv");
  rec.write_manifest(out_dir + "/run.txt");
  std::cout << "trained " << cfg.max_epochs << " epochs; final checkpoint "
            << rec.final_checkpoint << "\n";
  return 0;
}

int cmd_infer(const std::string& model_path, const std::string& in_path,
              const std::string& out_path, int patch_size, int overlap) {
  NetworkConfig cfg = network_from_checkpoint(model_path);
  Network net(cfg);
  net.load_checkpoint(model_path);
  Volume v = read_volume_f32(in_path);
  LabelVolume pred = infer(net, v, patch_size, overlap);
  write_volume(pred, out_path);
  std::cout << "wrote prediction (" << pred.foreground_count() << " foreground voxels) to "
            << out_path << "\n";
  return 0;
}

int cmd_evaluate(const std::string& pred_dir, const std::string& truth_dir,
                 const std::string& out_csv) {
  std::vector<std::string> ids;
  for (const auto& e : fs::directory_iterator(pred_dir))
    if (e.path().extension() == ".vol") ids.push_back(e.path().filename().string());
  std::sort(ids.begin(), ids.end());
  if (ids.empty()) throw DataError("evaluate: no .vol files in " + pred_dir);
  std::vector<CaseMetrics> cases;
  for (const std::string& id : ids) {
    LabelVolume pred = read_volume_u8(pred_dir + "/" + id);
    LabelVolume truth = read_volume_u8(truth_dir + "/" + id);
    cases.push_back(evaluate_case(id, pred, truth));
  }
  MetricReport report = aggregate(std::move(cases));
  if (out_csv.empty()) {
    write_report_csv(report, std::cout);
  } else {
    std::ofstream os(out_csv);
    if (!os) throw DataError("evaluate: cannot open " + out_csv);
    write_report_csv(report, os);
    std::cout << "mean dsc " << report.mean_dsc << ", assd " << report.mean_assd
              << " mm, hd95 " << report.mean_hd95 << " mm over " << report.cases.size()
              << " cases -> " << out_csv << "\n";
  }
  return 0;
}

int cmd_gradcheck() {
  const auto results = run_gradient_suite();
  int failed = 0;
  for (const auto& r : results) {
    std::printf("%-28s worst_rel_err %.3e tol %.0e %s\n", r.op.c_str(), r.err, r.tol,
                r.pass() ? "pass" : "FAIL");
    failed += r.pass() ? 0 : 1;
  }
  if (failed) throw NumericError(std::to_string(failed) + " gradient check(s) failed");
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"fractured-bone CT segmentation toolkit"};
  app.require_subcommand(1);

  // synth
  auto* synth = app.add_subcommand("synth", "generate synthetic volume/label pairs");
  std::string synth_spec, synth_out = "data";
  int synth_count = 10;
  std::vector<std::string> synth_set;
  synth->add_option("--spec", synth_spec, "key=value spec file (extents in voxels, sizes in mm)");
  synth->add_option("--out-dir", synth_out, "output directory for VOL1 files")->required();
  synth->add_option("--count", synth_count, "number of volume/label pairs");
  synth->add_option("--set", synth_set, "spec override key=value (repeatable)");

  // preprocess
  auto* prep = app.add_subcommand("preprocess", "HU clamp/window and resample a volume");
  std::string prep_in, prep_out, prep_lab_in, prep_lab_out, prep_cfg;
  std::vector<std::string> prep_set;
  prep->add_option("--in", prep_in, "input VOL1 f32 volume (HU)")->required();
  prep->add_option("--out", prep_out, "output VOL1 f32 volume (normalized)")->required();
  prep->add_option("--label-in", prep_lab_in, "optional VOL1 u8 label to resample alongside");
  prep->add_option("--label-out", prep_lab_out, "output path for the resampled label");
  prep->add_option("--config", prep_cfg,
                   "key=value config (hu_min/hu_max in HU, target_spacing in mm)");
  prep->add_option("--set", prep_set, "config override key=value (repeatable)");

  // sdt
  auto* sdt = app.add_subcommand("sdt", "signed Euclidean distance field of a mask");
  std::string sdt_mask, sdt_out;
  sdt->add_option("--mask", sdt_mask, "input VOL1 u8 mask")->required();
  sdt->add_option("--out", sdt_out, "output VOL1 f32 distance field (mm)")->required();

  // train
  auto* tr = app.add_subcommand("train", "train the segmentation network");
  std::string tr_data, tr_out, tr_cfg;
  std::vector<std::string> tr_set;
  int tr_val = 0;
  bool tr_quiet = false;
  tr->add_option("--data-dir", tr_data, "directory of *_img.vol / *_lab.vol pairs")->required();
  tr->add_option("--out-dir", tr_out, "output directory (checkpoints, loss.csv, run.txt)")
      ->required();
  tr->add_option("--config", tr_cfg,
                 "key=value config (initial_lr, max_epochs, patch_size in voxels, ...)");
  tr->add_option("--set", tr_set, "config override key=value (repeatable)");
  tr->add_option("--val-count", tr_val, "cases held out for validation (taken from the end)");
  tr->add_flag("--quiet", tr_quiet, "suppress per-epoch progress on stderr");

  // infer
  auto* inf = app.add_subcommand("infer", "run tiled inference with a trained checkpoint");
  std::string inf_model, inf_in, inf_out;
  int inf_patch = 32, inf_overlap = 0;
  inf->add_option("--model", inf_model, "checkpoint file")->required();
  inf->add_option("--in", inf_in, "input VOL1 f32 volume (preprocessed)")->required();
  inf->add_option("--out", inf_out, "output VOL1 u8 prediction")->required();
  inf->add_option("--patch-size", inf_patch, "tile edge in voxels (divisible by 8)");
  inf->add_option("--overlap", inf_overlap, "tile overlap in voxels");

  // evaluate
  auto* ev = app.add_subcommand("evaluate", "DSC/ASSD/95HD report over matching mask files");
  std::string ev_pred, ev_truth, ev_out;
  ev->add_option("--pred-dir", ev_pred, "directory of predicted VOL1 u8 masks")->required();
  ev->add_option("--truth-dir", ev_truth, "directory of reference masks (same file names)")
      ->required();
  ev->add_option("--out", ev_out, "output CSV path (stdout when omitted)");

  // gradcheck
  app.add_subcommand("gradcheck",
                     "finite-difference audit of every differentiable op (dimensionless)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help
    app.exit(e);
    return 1;
  }

  try {
    if (synth->parsed()) return cmd_synth(synth_spec, synth_set, synth_out, synth_count);
    if (prep->parsed())
      return cmd_preprocess(prep_in, prep_out, prep_lab_in, prep_lab_out, prep_cfg, prep_set);
    if (sdt->parsed()) return cmd_sdt(sdt_mask, sdt_out);
    if (tr->parsed()) return cmd_train(tr_data, tr_out, tr_cfg, tr_set, tr_val, tr_quiet);
    if (inf->parsed()) return cmd_infer(inf_model, inf_in, inf_out, inf_patch, inf_overlap);
    if (ev->parsed()) return cmd_evaluate(ev_pred, ev_truth, ev_out);
    return cmd_gradcheck();
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 1;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 2;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return 3;
  }
}
