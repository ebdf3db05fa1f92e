// Copyright 2026 The DDESeg Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// ddeseg: dataset generation, memory building, training, evaluation,
// prediction and gradient checks on the synthetic benchmark.
//
//   ddeseg synth    --out DIR
//   ddeseg memory   --dataset DIR [--out DIR/memory.ddem]
//   ddeseg train    --dataset DIR [--memory PATH] --out CKPT [--log CSV]
//   ddeseg eval     --dataset DIR [--memory PATH] --checkpoint CKPT --split test
//   ddeseg predict  --checkpoint CKPT --memory PATH --record FILE --out MASK.pgm [--overlay IMG.ppm]
//   ddeseg gradcheck [--seed N] [--seeds 3]
//
// Every command accepts --config PATH and repeatable --ablation KEY=VAL.
// Exit status: 0 ok, 1 contract/numeric failure, 2 IO/config/format error.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "ddeseg/ddeseg.hpp"

namespace fs = std::filesystem;
using namespace ddeseg;

namespace {

constexpr const char* kConfigFile = "config.json";
constexpr const char* kMemoryFile = "memory.ddem";

struct CommonOptions {
  std::string config;
  std::vector<std::string> ablations;
  std::optional<std::uint64_t> seed;
  std::string format = "csv";
};

void add_common(CLI::App* cmd, CommonOptions& o) {
  cmd->add_option("--config", o.config, "JSON config overlaid on the defaults");
  cmd->add_option("--ablation", o.ablations, "KEY=VAL override, repeatable")->allow_extra_args(false);
  cmd->add_option("--seed", o.seed, "seed override");
  cmd->add_option("--format", o.format, "output format")->check(CLI::IsMember({"csv"}));
}

/// --config wins; otherwise the dataset's own config.json when present.
RunConfig resolve_config(const CommonOptions& o, const std::string& dataset_dir = {}) {
  std::optional<fs::path> path;
  if (!o.config.empty())
    path = o.config;
  else if (!dataset_dir.empty() && fs::exists(fs::path(dataset_dir) / kConfigFile))
    path = fs::path(dataset_dir) / kConfigFile;
  return load_run_config(path, o.ablations);
}

std::string memory_path_or_default(const std::string& given, const std::string& dataset_dir) {
  return given.empty() ? (fs::path(dataset_dir) / kMemoryFile).string() : given;
}

void write_pgm(const LabelMap& m, const fs::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << "P5\n" << m.width << ' ' << m.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(m.labels.data()), static_cast<std::streamsize>(m.labels.size()));
  if (!out) throw IoError("short write to " + path.string());
}

void write_overlay_ppm(const ScenePair& p, const LabelMap& m, const fs::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << "P6\n" << p.width << ' ' << p.height << "\n255\n";
  std::vector<std::uint8_t> rgb(p.image);
  for (std::size_t i = 0; i < m.size(); ++i) {
    if (m.labels[i] == 0) continue;
    const auto color = detail::class_color(m.labels[i] - 1u);
    for (std::size_t ch = 0; ch < 3; ++ch)
      rgb[i * 3 + ch] = static_cast<std::uint8_t>((rgb[i * 3 + ch] + 2 * static_cast<int>(color[ch])) / 3);
  }
  out.write(reinterpret_cast<const char*>(rgb.data()), static_cast<std::streamsize>(rgb.size()));
  if (!out) throw IoError("short write to " + path.string());
}

int cmd_synth(const CommonOptions& o, const std::string& out_dir) {
  auto cfg = resolve_config(o);
  if (o.seed) cfg.synth.seed = *o.seed;
  cfg.synth.validate();
  const auto bank = gen_class_bank(cfg.synth);
  std::map<std::string, std::vector<ScenePair>> splits;
  splits["train"] = gen_split(bank, cfg.synth, "train", cfg.synth.train_size);
  splits["val"] = gen_split(bank, cfg.synth, "val", cfg.synth.val_size);
  splits["test"] = gen_split(bank, cfg.synth, "test", cfg.synth.test_size);
  const auto index = save_dataset(splits, out_dir);
  write_json_file(to_json(cfg), fs::path(out_dir) / kConfigFile);
  for (const auto& [name, pairs] : splits) std::cout << name << ',' << pairs.size() << '\n';
  std::cout << "total," << index.size() << '\n';
  return 0;
}

int cmd_memory(const CommonOptions& o, const std::string& dataset_dir, const std::string& out) {
  auto cfg = resolve_config(o, dataset_dir);
  if (o.seed) cfg.memory.build.seed = *o.seed;
  const auto bank = gen_class_bank(cfg.synth);
  const auto clips = gen_singlesource_clips(bank, cfg.synth, cfg.memory.singlesource_per_class, cfg.memory.singlesource_seed);
  const auto feats = encode_clips(clips, cfg.model);
  const auto mem = build_memory(feats, cfg.memory.build);
  const auto path = memory_path_or_default(out, dataset_dir);
  save_memory(mem, path);
  std::cout << "# C=" << mem.num_classes() << " k=" << mem.k << " m=" << mem.m << " d=" << mem.dim << '\n';
  std::cout << "class,inertia,inertia_k1\n";
  for (std::size_t c = 0; c < mem.num_classes(); ++c) {
    const auto base = kmeans(detail::to_double(feats.at(static_cast<std::uint32_t>(c))), 1, 1, cfg.memory.build.max_iters,
                             cfg.memory.build.seed);
    std::cout << c << ',' << mem.inertia[c] << ',' << base.inertia << '\n';
  }
  for (const auto& w : mem.warnings) std::cerr << "warning: " << w << '\n';
  return 0;
}

int cmd_train(const CommonOptions& o, const std::string& dataset_dir, const std::string& memory, const std::string& out,
              std::string log_path) {
  auto cfg = resolve_config(o, dataset_dir);
  if (o.seed) {
    cfg.train.seed = *o.seed;
    cfg.model.seed = *o.seed;
  }
  cfg.model.validate();
  const auto ds = load_dataset(dataset_dir);
  const auto mem = load_memory(memory_path_or_default(memory, dataset_dir), cfg.model.dim);
  require(mem.num_classes() == cfg.model.num_classes,
          "train: memory holds " + std::to_string(mem.num_classes()) + " classes, model expects " + std::to_string(cfg.model.num_classes));
  if (log_path.empty()) log_path = out + ".csv";
  std::ofstream log(log_path);
  if (!log) throw IoError("cannot write " + log_path);
  log << train_csv_header() << '\n';

  Model<float> model(cfg.model);
  TrainHooks<float> hooks;
  hooks.on_step = [&](const TrainLogRow& r) {
    if (cfg.train.log_every > 0 && (r.step % cfg.train.log_every == 0 || !std::isnan(r.val_j))) log << train_csv_row(r) << '\n';
  };
  const auto& val = ds.split("val");
  const auto result = train_model(model, ds.split("train"), val.empty() ? nullptr : &val, mem, cfg.train, hooks);
  if (!result.best_values.empty()) restore_values(model, result.best_values);
  save_checkpoint(model, out);
  std::cout << "steps," << result.steps_run << "\nbest_step," << result.best_step << "\nbest_val_JF," << result.best_val_jf << '\n';
  return 0;
}

int cmd_eval(const CommonOptions& o, const std::string& dataset_dir, const std::string& memory, const std::string& ckpt,
             const std::string& split, const std::string& out) {
  auto model = load_checkpoint<float>(ckpt);
  const auto ds = load_dataset(dataset_dir);
  const auto mem = load_memory(memory_path_or_default(memory, dataset_dir), model.config.dim);
  const auto report = evaluate(model, ds.split(split), mem);
  std::ostringstream csv;
  csv << metric_csv_header(model.config.num_classes) << '\n';
  write_metric_csv_row(csv, fs::path(dataset_dir).filename().string(), split, o.seed.value_or(model.config.seed), report,
                       model.config.num_classes);
  if (out.empty()) {
    std::cout << csv.str();
  } else {
    std::ofstream f(out);
    if (!(f << csv.str())) throw IoError("cannot write " + out);
  }
  return 0;
}

int cmd_predict(const std::string& ckpt, const std::string& memory, const std::string& record, const std::string& out,
                const std::string& overlay) {
  auto model = load_checkpoint<float>(ckpt);
  const auto pair = deserialize_scene(io::read_file(record), record);
  const auto mem_path = memory.empty() ? (fs::path(record).parent_path() / kMemoryFile).string() : memory;
  const auto mem = load_memory(mem_path, model.config.dim);
  const auto pred = model.predict(image_input<float>(pair), {pair.height, pair.width}, pair.audio, mem);
  write_pgm(pred.assembled, out);
  if (!overlay.empty()) write_overlay_ppm(pair, pred.assembled, overlay);
  std::cout << "labels";
  for (auto l : pred.assembled.foreground_labels()) std::cout << ',' << static_cast<int>(l);
  std::cout << '\n';
  return 0;
}

int cmd_gradcheck(const CommonOptions& o, std::size_t seeds) {
  const std::uint64_t first = o.seed.value_or(0);
  bool ok = true;
  std::cout << "seed,case,result,max_rel_error\n";
  for (std::uint64_t s = first; s < first + seeds; ++s) {
    const auto results = run_grad_suite(s);
    for (const auto& r : results) {
      std::cout << s << ',' << r.name << ',' << (r.report.passed ? "pass" : "FAIL") << ',' << r.report.max_rel_error() << '\n';
      if (!r.report.passed) std::cerr << r.name << ": " << r.report.summary() << '\n';
    }
    ok = ok && all_passed(results);
  }
  if (!ok) throw ContractError("gradcheck: finite-difference mismatch");
  return 0;
}

std::string one_line(std::string s) {
  for (auto& c : s)
    if (c == '\n' || c == '\r') c = ' ';
  return s;
}

int fail(const char* kind, int code, const std::string& what) {
  std::cerr << "ddeseg: error kind=" << kind << " exit=" << code << " message=\"" << one_line(what) << "\"\n";
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"DDESeg synthetic audio-visual segmentation"};
  app.require_subcommand(1);
  CommonOptions common;
  std::string dataset, memory, out, ckpt, split = "test", record, overlay, log;
  std::size_t seeds = 3;

  auto* synth = app.add_subcommand("synth", "generate the synthetic dataset");
  add_common(synth, common);
  synth->add_option("--out", out, "dataset directory")->required();

  auto* mem = app.add_subcommand("memory", "build the semantic memory from the single-source bank");
  add_common(mem, common);
  mem->add_option("--dataset", dataset, "dataset directory")->required();
  mem->add_option("--out", out, "DDEM1 output (default DATASET/memory.ddem)");

  auto* train = app.add_subcommand("train", "train and save the best-val checkpoint");
  add_common(train, common);
  train->add_option("--dataset", dataset, "dataset directory")->required();
  train->add_option("--memory", memory, "DDEM1 file (default DATASET/memory.ddem)");
  train->add_option("--out", out, "DDCK1 checkpoint")->required();
  train->add_option("--log", log, "CSV training log (default OUT.csv)");

  auto* eval = app.add_subcommand("eval", "metric report over one split");
  add_common(eval, common);
  eval->add_option("--dataset", dataset, "dataset directory")->required();
  eval->add_option("--memory", memory, "DDEM1 file (default DATASET/memory.ddem)");
  eval->add_option("--checkpoint", ckpt, "DDCK1 checkpoint")->required();
  eval->add_option("--split", split, "split name")->check(CLI::IsMember({"train", "val", "test"}));
  eval->add_option("--out", out, "CSV output (default stdout)");

  auto* predict = app.add_subcommand("predict", "predicted label map for one record");
  add_common(predict, common);
  predict->add_option("--checkpoint", ckpt, "DDCK1 checkpoint")->required();
  predict->add_option("--memory", memory, "DDEM1 file (default: next to the record)");
  predict->add_option("--record", record, "DDSP1 record")->required();
  predict->add_option("--out", out, "8-bit PGM label image")->required();
  predict->add_option("--overlay", overlay, "optional PPM overlay");

  auto* grad = app.add_subcommand("gradcheck", "finite-difference gradient suite");
  add_common(grad, common);
  grad->add_option("--seeds", seeds, "number of consecutive seeds")->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return fail("usage", 2, e.what());
  }

  try {
    if (*synth) return cmd_synth(common, out);
    if (*mem) return cmd_memory(common, dataset, out);
    if (*train) return cmd_train(common, dataset, memory, out, log);
    if (*eval) return cmd_eval(common, dataset, memory, ckpt, split, out);
    if (*predict) return cmd_predict(ckpt, memory, record, out, overlay);
    if (*grad) return cmd_gradcheck(common, seeds);
  } catch (const FormatError& e) {
    return fail("format", 2, e.what());
  } catch (const ConfigError& e) {
    return fail("config", 2, e.what());
  } catch (const IoError& e) {
    return fail("io", 2, e.what());
  } catch (const NumericError& e) {
    return fail("numeric", 1, e.what());
  } catch (const ContractError& e) {
    return fail("contract", 1, e.what());
  } catch (const std::exception& e) {
    return fail("internal", 1, e.what());
  }
  return 0;
}
