// binreplay command-line driver: synthetic data, training runs, evaluation and
// run reports.
#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "binreplay/config.hpp"
#include "binreplay/dataset.hpp"
#include "binreplay/io.hpp"
#include "binreplay/learner.hpp"

namespace fs = std::filesystem;
using namespace binreplay;

namespace {

constexpr int kExitValidation = 1;
constexpr int kExitRuntime = 2;

Shape parse_shape(const std::string& s) {
  std::vector<int64_t> dims;
  std::stringstream ss(s);
  std::string part;
  while (std::getline(ss, part, 'x')) {
    try {
      dims.push_back(std::stoll(part));
    } catch (const std::exception&) {
      throw ValidationError("bad shape \"" + s + "\" (expected HxWxC)");
    }
  }
  if (dims.size() != 3) throw ValidationError("bad shape \"" + s + "\" (expected HxWxC)");
  return Shape(dims);
}

fs::path dataset_file(const fs::path& p, const char* split) {
  return fs::is_directory(p) ? p / (std::string(split) + ".brds") : p;
}

/// Applies one sweep assignment such as q_b_bin=4.
void apply_override(RunConfig& cfg, const std::string& key, const std::string& value) {
  auto& c = cfg.continual;
  auto as_int = [&](int64_t lo) {
    try {
      const int64_t v = std::stoll(value);
      if (v >= lo) return v;
    } catch (const std::exception&) {
    }
    throw ValidationError("bad value \"" + value + "\" for " + key);
  };
  if (key == "q_f")
    c.bits.q_f = parse_bitwidth(value);
  else if (key == "q_b_nonbin")
    c.bits.q_b_nonbin = parse_bitwidth(value);
  else if (key == "q_b_bin")
    c.bits.q_b_bin = parse_bitwidth(value);
  else if (key == "B_R")
    c.batch_replay = as_int(0);
  else if (key == "B_N")
    c.batch_new = as_int(1);
  else if (key == "N")
    c.quota = as_int(1);
  else if (key == "seed")
    c.seed = static_cast<uint64_t>(as_int(0));
  else if (key == "train_backbone")
    c.train_backbone = value == "true" || value == "1";
  else
    throw ValidationError("cannot sweep over \"" + key + "\" (use q_f, q_b_nonbin, q_b_bin, B_R, B_N, N, seed, "
                          "train_backbone)");
  c.validate();
}

void run_training(const RunConfig& cfg, const fs::path& out) {
  const fs::path data(cfg.dataset);
  if (cfg.dataset.empty()) throw ValidationError("config has no dataset path");
  const Dataset train = read_dataset(dataset_file(data, "train"));
  const Dataset test = read_dataset(dataset_file(data, "test"));
  if (train.input_shape != test.input_shape || train.num_classes != test.num_classes)
    throw ValidationError("train and test sets disagree on shape or class count");
  Rng init(cfg.continual.seed);
  ContinualLearner learner(build_model(cfg, train.input_shape, init), cfg.continual, train.num_classes);
  const MetricsLog log = learner.run_protocol(train, test);
  write_file_atomic(out / "metrics.csv", log.to_csv());
  write_file_atomic(out / "config.json", cfg.dump());
  write_file_atomic(out / "test_set.sha256", log.test_set_sha256 + "\n");
  learner.save_checkpoint(out / "checkpoint.brck");
  learner.memory().save(out / "replay.brrm");
  for (const auto& r : log.rows)
    std::printf("experience %d  accuracy %.4f  loss %.4f\n", r.experience, r.test_accuracy, r.mean_train_loss);
  std::printf("wrote %s\n", out.string().c_str());
}

struct ReportRow {
  std::string name;
  std::string bits;
  double final_accuracy = 0.0;
  int64_t replay_bits = 0;
  int64_t float_bits = 0;
  double reduction = 0.0;
  double mac_ratio = 0.0;
};

ReportRow summarize(const fs::path& csv, const fs::path& root) {
  std::ifstream in(csv);
  std::string line;
  std::getline(in, line);
  if (line.rfind("experience,test_accuracy", 0) != 0) throw FormatError(csv.string() + ": not a metrics file");
  ReportRow row;
  row.name = fs::relative(csv.parent_path(), root).string();
  int64_t fwd = 0, bwd = 0;
  bool any = false;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    long long e, f, b, bits, ms;
    double acc, loss;
    if (std::sscanf(line.c_str(), "%lld,%lf,%lf,%lld,%lld,%lld,%lld", &e, &acc, &loss, &f, &b, &bits, &ms) != 7)
      throw FormatError(csv.string() + ": malformed row \"" + line + "\"");
    row.final_accuracy = acc;
    row.replay_bits = bits;
    fwd += f;
    bwd += b;
    any = true;
  }
  if (!any) throw FormatError(csv.string() + ": no rows");
  row.float_bits = 32 * row.replay_bits;
  row.reduction = row.replay_bits ? static_cast<double>(row.float_bits) / static_cast<double>(row.replay_bits) : 0.0;
  row.mac_ratio = fwd ? static_cast<double>(bwd) / static_cast<double>(fwd) : 0.0;
  const fs::path cfg_path = csv.parent_path() / "config.json";
  if (fs::exists(cfg_path)) {
    const auto c = RunConfig::load(cfg_path).continual.bits;
    row.bits = bitwidth_name(c.q_f) + "/" + bitwidth_name(c.q_b_nonbin) + "/" + bitwidth_name(c.q_b_bin);
  }
  return row;
}

int cmd_report(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw ValidationError(dir.string() + " is not a directory");
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file() && e.path().filename() == "metrics.csv") files.push_back(e.path());
  if (files.empty()) throw ValidationError("no metrics.csv under " + dir.string());
  std::sort(files.begin(), files.end());
  std::string csv = "config,bits_f_nonbin_bin,final_accuracy,replay_bits,float32_bits,reduction,bwd_fwd_mac_ratio\n";
  std::printf("%-28s %-14s %9s %12s %13s %9s %9s\n", "config", "q_f/nb/bin", "accuracy", "replay_bits",
              "float32_bits", "reduction", "mac_ratio");
  for (const auto& f : files) {
    const ReportRow r = summarize(f, dir);
    const std::string name = r.name == "." ? "(root)" : r.name;
    std::printf("%-28s %-14s %9.4f %12lld %13lld %8.2fx %9.4f\n", name.c_str(), r.bits.c_str(), r.final_accuracy,
                static_cast<long long>(r.replay_bits), static_cast<long long>(r.float_bits), r.reduction,
                r.mac_ratio);
    char line[512];
    std::snprintf(line, sizeof line, "%s,%s,%.6f,%lld,%lld,%.4f,%.6f\n", name.c_str(), r.bits.c_str(),
                  r.final_accuracy, static_cast<long long>(r.replay_bits), static_cast<long long>(r.float_bits),
                  r.reduction, r.mac_ratio);
    csv += line;
  }
  write_file_atomic(dir / "report.csv", csv);
  return 0;
}

int cmd_eval(const fs::path& checkpoint, const fs::path& data) {
  const ContinualLearner learner = ContinualLearner::load_checkpoint(checkpoint);
  const Dataset test = read_dataset(dataset_file(data, "test"));
  if (test.num_classes > learner.head().num_classes())
    throw ValidationError("dataset has " + std::to_string(test.num_classes) + " classes, the checkpoint " +
                          std::to_string(learner.head().num_classes()));
  const EvalResult r = learner.evaluate(test);
  std::printf("accuracy %.6f (%lld samples)\n", r.accuracy, static_cast<long long>(test.size()));
  for (size_t c = 0; c < r.class_total.size(); ++c) {
    if (r.class_total[c] == 0) continue;
    std::printf("class %zu  %.6f  (%lld/%lld)\n", c,
                static_cast<double>(r.class_correct[c]) / static_cast<double>(r.class_total[c]),
                static_cast<long long>(r.class_correct[c]), static_cast<long long>(r.class_total[c]));
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Binary-network continual learning with 1-bit latent replay"};
  app.require_subcommand(1);

  SynthOptions synth;
  std::string synth_out = "data", synth_shape = "16x16x3";
  auto* s = app.add_subcommand("synth", "Generate a synthetic image dataset (train.brds, test.brds)");
  s->add_option("--out", synth_out, "Output directory")->capture_default_str();
  s->add_option("--seed", synth.seed, "Generator seed")->capture_default_str();
  s->add_option("--classes", synth.classes, "Number of classes")->capture_default_str();
  s->add_option("--per-class", synth.samples_per_class, "Samples per class (train + test)")->capture_default_str();
  s->add_option("--shape", synth_shape, "Input shape HxWxC")->capture_default_str();
  s->add_option("--noise", synth.noise, "Pixel noise standard deviation")->capture_default_str();
  s->add_option("--max-shift", synth.max_shift, "Largest random shift in pixels")->capture_default_str();
  std::string idx_images, idx_labels;
  s->add_option("--idx-images", idx_images, "Import an IDX image file instead of generating");
  s->add_option("--idx-labels", idx_labels, "IDX label file for --idx-images");

  std::string config_path, out_override, sweep;
  uint64_t seed_override = 0;
  auto* t = app.add_subcommand("train", "Run the continual protocol described by a config file");
  t->footer(config_reference());
  t->add_option("--config", config_path, "JSON run config")->required();
  auto* seed_opt = t->add_option("--seed", seed_override, "Override protocol.seed");
  t->add_option("--out", out_override, "Override output_dir");
  t->add_option("--sweep", sweep, "KEY=v1,v2,... runs one configuration per value into OUT/KEY=v");

  std::string ckpt, eval_data;
  auto* e = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset");
  e->add_option("--checkpoint", ckpt, "Checkpoint file")->required();
  e->add_option("--dataset", eval_data, "Dataset file or directory (uses test.brds)")->required();

  std::string metrics_dir;
  auto* r = app.add_subcommand("report", "Summarize every metrics.csv below a directory");
  r->add_option("--out,metrics_dir", metrics_dir, "Directory holding run outputs")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    return code == 0 ? 0 : kExitValidation;
  }

  try {
    if (*s) {
      if (!idx_images.empty()) {
        if (idx_labels.empty()) throw ValidationError("--idx-images needs --idx-labels");
        const Dataset ds = import_idx(idx_images, idx_labels);
        write_dataset(fs::path(synth_out) / "imported.brds", ds);
        std::printf("imported %lld samples, %d classes\n", static_cast<long long>(ds.size()), ds.num_classes);
        return 0;
      }
      synth.input_shape = parse_shape(synth_shape);
      const auto [train, test] = synthesize(synth);
      write_dataset(fs::path(synth_out) / "train.brds", train);
      write_dataset(fs::path(synth_out) / "test.brds", test);
      std::printf("train %lld, test %lld samples in %s\n", static_cast<long long>(train.size()),
                  static_cast<long long>(test.size()), synth_out.c_str());
      return 0;
    }
    if (*t) {
      RunConfig cfg = RunConfig::load(config_path);
      if (*seed_opt) cfg.continual.seed = seed_override;
      if (!out_override.empty()) cfg.output_dir = out_override;
      if (sweep.empty()) {
        run_training(cfg, cfg.output_dir);
        return 0;
      }
      const auto eq = sweep.find('=');
      if (eq == std::string::npos) throw ValidationError("--sweep expects KEY=v1,v2,...");
      const std::string key = sweep.substr(0, eq);
      std::stringstream values(sweep.substr(eq + 1));
      std::string v;
      std::vector<RunConfig> runs;
      while (std::getline(values, v, ',')) {
        RunConfig c = cfg;
        apply_override(c, key, v);
        c.output_dir = (fs::path(cfg.output_dir) / (key + "=" + v)).string();
        runs.push_back(std::move(c));
      }
      if (runs.empty()) throw ValidationError("--sweep lists no values");
      for (const auto& c : runs) run_training(c, c.output_dir);
      return 0;
    }
    if (*e) return cmd_eval(ckpt, eval_data);
    if (*r) return cmd_report(metrics_dir);
  } catch (const ValidationError& err) {
    std::fprintf(stderr, "error: %s\n", err.what());
    return kExitValidation;
  } catch (const std::exception& err) {
    std::fprintf(stderr, "error: %s\n", err.what());
    return kExitRuntime;
  }
  return 0;
}
