// sgg: generate synthetic scene-graph data, train, evaluate and ablate.
//
//   sgg gen-data --out DIR [--config FILE] [--seed N] [--set key=value ...]
//   sgg train    --data DIR --out DIR [--config FILE] [--no-so] [--no-kt] [--no-fc] [--no-bias]
//   sgg eval     --data DIR --checkpoint FILE [--task T] [--mode M] [--detections FILE]
//                [--report recall|tail --bottom N --baseline FILE] [--out DIR]
//   sgg ablate   --data DIR --out DIR [--config FILE] [--seeds N]
//
// Config files are flat JSON objects whose keys mirror the flags; flags win.

#include <algorithm>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "sgg/checkpoint.hpp"
#include "sgg/data.hpp"
#include "sgg/evaluation.hpp"
#include "sgg/generator.hpp"
#include "sgg/model.hpp"
#include "sgg/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw sgg::Error("cannot open config " + path.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw sgg::Error("config " + path.string() + ": " + e.what());
  }
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw sgg::Error("cannot write " + path.string());
  out << text;
}

void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

/// `key=value` pairs; the value is parsed as JSON when possible, else kept as a string.
json parse_overrides(const std::vector<std::string>& items) {
  json out = json::object();
  for (const auto& item : items) {
    const auto eq = item.find('=');
    if (eq == std::string::npos || eq == 0) throw sgg::Error("--set expects key=value, got '" + item + "'");
    const auto key = item.substr(0, eq);
    const auto raw = item.substr(eq + 1);
    try {
      out[key] = json::parse(raw);
    } catch (const json::parse_error&) {
      out[key] = raw;
    }
  }
  return out;
}

struct TrainFlags {
  std::string config;
  std::vector<std::string> set;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> epochs;
  std::optional<double> lr;
  bool no_so = false, no_kt = false, no_fc = false, no_bias = false;
};

void add_train_flags(CLI::App* cmd, TrainFlags& f) {
  cmd->add_option("--config", f.config, "JSON file of training settings")->check(CLI::ExistingFile);
  cmd->add_option("--set", f.set, "override a setting, key=value (repeatable)");
  cmd->add_option("--seed", f.seed, "training seed");
  cmd->add_option("--epochs", f.epochs, "number of epochs");
  cmd->add_option("--lr", f.lr, "initial learning rate");
  cmd->add_flag("--no-so", f.no_so, "disable scene-object interaction");
  cmd->add_flag("--no-kt", f.no_kt, "disable knowledge transfer");
  cmd->add_flag("--no-fc", f.no_fc, "disable feature calibration");
  cmd->add_flag("--no-bias", f.no_bias, "disable the frequency prior");
}

sgg::training::TrainConfig resolve(const TrainFlags& f) {
  sgg::training::TrainConfig c;
  if (!f.config.empty()) sgg::training::apply_json(c, read_json_file(f.config));
  sgg::training::apply_json(c, parse_overrides(f.set));
  if (f.seed) c.seed = *f.seed;
  if (f.epochs) c.epochs = *f.epochs;
  if (f.lr) c.lr = *f.lr;
  if (f.no_so) c.scene_object = false;
  if (f.no_kt) c.knowledge_transfer = false;
  if (f.no_fc) c.calibration = false;
  if (f.no_bias) c.frequency_bias = false;
  c.validate();
  return c;
}

sgg::eval::EvalOptions default_eval(const sgg::data::Dataset& d) {
  return {sgg::training::available_tasks(d), d.test_detections.empty() ? nullptr : &d.test_detections};
}

// ---------------------------------------------------------------------------

int run_gen_data(const std::string& config, const std::vector<std::string>& set,
                 std::optional<std::uint64_t> seed, const fs::path& out) {
  sgg::data::GeneratorConfig c;
  if (!config.empty()) sgg::data::apply_json(c, read_json_file(config));
  sgg::data::apply_json(c, parse_overrides(set));
  if (seed) c.seed = *seed;
  c.validate();
  const auto d = sgg::data::generate(c);
  sgg::data::save_dataset(d, out);
  const auto stats = sgg::data::dataset_stats(d);
  write_json(out / "config.json", sgg::data::to_json(c));
  write_json(out / "stats.json", stats);
  std::cout << "wrote " << d.train.size() << " train and " << d.test.size() << " test scenes ("
            << stats.at("triples").get<std::int64_t>() << " triples) to " << out.string() << "\n";
  return 0;
}

int run_train(const TrainFlags& flags, const fs::path& data_dir, const fs::path& out) {
  const auto cfg = resolve(flags);
  const auto d = sgg::data::load_dataset(data_dir);
  fs::create_directories(out);
  write_json(out / "config.json", sgg::training::to_json(cfg));

  std::ofstream log(out / "train_log.jsonl");
  if (!log) throw sgg::Error("cannot write " + (out / "train_log.jsonl").string());
  sgg::training::FitHooks hooks;
  hooks.on_epoch = [&](const sgg::training::EpochRecord& r, const sgg::model::Model<double>&) {
    log << sgg::training::to_json(r).dump() << '\n' << std::flush;
    std::cerr << "epoch " << r.epoch << "  loss " << r.total << "  rel acc " << r.relation_accuracy
              << "  (" << r.seconds << " s)\n";
  };
  sgg::training::FitResult fitted;
  try {
    fitted = sgg::training::fit(d, cfg, hooks);
  } catch (const sgg::training::DivergenceError& e) {
    sgg::checkpoint::save_checkpoint(e.config, e.last_good, out / "last_good.ckpt");
    throw;
  }
  sgg::checkpoint::save_checkpoint(fitted.config, fitted.params, out / "model.ckpt");

  sgg::model::Model<double> m(fitted.config, std::move(fitted.params));
  const auto report = sgg::eval::evaluate(m, d.test, default_eval(d));
  write_json(out / "metrics.json", sgg::eval::to_json(report));
  const auto table = sgg::eval::recall_table({{"model", report}});
  write_text(out / "metrics.txt", table);
  std::cout << table;
  return 0;
}

int run_eval(const fs::path& data_dir, const fs::path& checkpoint, const std::vector<std::string>& tasks,
             const std::string& mode, const std::string& detections, const std::string& report_kind,
             std::size_t bottom, const std::string& baseline, const std::string& out) {
  auto d = sgg::data::load_dataset(data_dir);
  // sgdet reads detections only from the explicit file.
  d.test_detections.clear();
  if (!detections.empty()) d.test_detections = sgg::data::load_detections(detections, d.meta);
  auto ck = sgg::checkpoint::load_checkpoint(checkpoint);
  sgg::model::Model<double> m(ck.config, std::move(ck.params));

  sgg::eval::EvalOptions opts{{}, d.test_detections.empty() ? nullptr : &d.test_detections};
  if (tasks.empty() || (tasks.size() == 1 && tasks[0] == "all")) {
    opts.tasks = sgg::training::available_tasks(d);
  } else {
    for (const auto& t : tasks) opts.tasks.push_back(sgg::eval::parse_task(t));
  }
  std::vector<sgg::eval::Mode> modes;
  if (mode == "both") modes = {sgg::eval::Mode::constrained, sgg::eval::Mode::unconstrained};
  else if (mode == "constrained") modes = {sgg::eval::Mode::constrained};
  else if (mode == "unconstrained") modes = {sgg::eval::Mode::unconstrained};
  else throw sgg::Error("unknown mode '" + mode + "' (expected constrained, unconstrained or both)");

  const auto report = sgg::eval::evaluate(m, d.test, opts);
  json result = sgg::eval::to_json(report);
  std::string text = sgg::eval::recall_table({{"model", report}}, modes);

  if (report_kind == "tail") {
    if (baseline.empty()) {
      throw sgg::Error("--report tail compares two models; pass the model without knowledge "
                       "transfer as --baseline");
    }
    auto base_ck = sgg::checkpoint::load_checkpoint(baseline);
    sgg::model::Model<double> base(base_ck.config, std::move(base_ck.params));
    const auto base_report = sgg::eval::evaluate(base, d.test, {{sgg::eval::Task::predcls}, nullptr});
    const auto hist = sgg::data::relation_histogram(d.train, d.meta.n_relations);
    const bool has_predcls = report.cells.contains(sgg::eval::Task::predcls);
    const auto with_report =
        has_predcls ? report : sgg::eval::evaluate(m, d.test, {{sgg::eval::Task::predcls}, nullptr});
    const auto rows = sgg::eval::tail_comparison(base_report, with_report, hist, bottom);
    result["tail"] = sgg::eval::to_json(rows);
    text += "bottom-" + std::to_string(bottom) + " relations, predcls unconstrained\n" +
            sgg::eval::tail_table(rows);
  } else if (report_kind != "recall") {
    throw sgg::Error("unknown report '" + report_kind + "' (expected recall or tail)");
  }

  if (!out.empty()) {
    fs::create_directories(out);
    write_json(fs::path(out) / "report.json", result);
    write_text(fs::path(out) / "report.txt", text);
  }
  std::cout << text;
  return 0;
}

int run_ablate(const TrainFlags& flags, const fs::path& data_dir, const fs::path& out, int seeds) {
  if (seeds < 1) throw sgg::Error("--seeds must be at least 1");
  const auto base = resolve(flags);
  const auto d = sgg::data::load_dataset(data_dir);
  fs::create_directories(out);
  write_json(out / "config.json", sgg::training::to_json(base));

  std::vector<sgg::training::AblationRun> runs;
  for (int k = 0; k < seeds; ++k) {
    auto c = base;
    c.seed = base.seed + static_cast<std::uint64_t>(k);
    auto part = sgg::training::ablate(d, c, [](const sgg::training::AblationRun& r) {
      std::cerr << r.variant << " seed " << r.seed << ": mean constrained "
                << 100 * r.report.mean(sgg::eval::Mode::constrained) << ", unconstrained "
                << 100 * r.report.mean(sgg::eval::Mode::unconstrained) << ", headline "
                << 100 * sgg::training::headline(r.report) << " (" << r.seconds << " s)\n";
    });
    runs.insert(runs.end(), part.begin(), part.end());
  }
  write_json(out / "ablation.json", sgg::training::to_json(runs));
  const auto table = sgg::training::ablation_table(runs);
  write_text(out / "ablation.txt", table);
  std::cout << table;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Scene-graph relation pipeline"};
  app.require_subcommand(1);
  app.failure_message(CLI::FailureMessage::help);

  std::string gen_config, gen_out;
  std::vector<std::string> gen_set;
  std::optional<std::uint64_t> gen_seed;
  auto* gen = app.add_subcommand("gen-data", "generate a synthetic long-tail dataset");
  gen->add_option("--out", gen_out, "output directory")->required();
  gen->add_option("--config", gen_config, "JSON file of generator settings")->check(CLI::ExistingFile);
  gen->add_option("--seed", gen_seed, "generator seed");
  gen->add_option("--set", gen_set, "override a setting, key=value (repeatable)");

  TrainFlags train_flags;
  std::string train_data, train_out;
  auto* train = app.add_subcommand("train", "train a model and evaluate it on the test split");
  train->add_option("--data", train_data, "dataset directory")->required()->check(CLI::ExistingDirectory);
  train->add_option("--out", train_out, "run directory")->required();
  add_train_flags(train, train_flags);

  std::string eval_data, eval_ckpt, eval_mode = "both", eval_det, eval_report = "recall", eval_base, eval_out;
  std::vector<std::string> eval_tasks;
  std::size_t eval_bottom = 10;
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint");
  ev->add_option("--data", eval_data, "dataset directory")->required()->check(CLI::ExistingDirectory);
  ev->add_option("--checkpoint", eval_ckpt, "checkpoint file")->required()->check(CLI::ExistingFile);
  ev->add_option("--task", eval_tasks, "predcls, sgcls, sgdet or all (repeatable)");
  ev->add_option("--mode", eval_mode, "constrained, unconstrained or both");
  ev->add_option("--detections", eval_det, "detections file for sgdet")->check(CLI::ExistingFile);
  ev->add_option("--report", eval_report, "recall or tail");
  ev->add_option("--bottom", eval_bottom, "tail relations to report");
  ev->add_option("--baseline", eval_base, "checkpoint without knowledge transfer, for --report tail")
      ->check(CLI::ExistingFile);
  ev->add_option("--out", eval_out, "directory for report.json and report.txt");

  TrainFlags ablate_flags;
  std::string ablate_data, ablate_out;
  int ablate_seeds = 1;
  auto* ab = app.add_subcommand("ablate", "train and evaluate BL, +SO, +KT, +FC");
  ab->add_option("--data", ablate_data, "dataset directory")->required()->check(CLI::ExistingDirectory);
  ab->add_option("--out", ablate_out, "run directory")->required();
  ab->add_option("--seeds", ablate_seeds, "number of consecutive seeds");
  add_train_flags(ab, ablate_flags);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (*gen) return run_gen_data(gen_config, gen_set, gen_seed, gen_out);
    if (*train) return run_train(train_flags, train_data, train_out);
    if (*ev) {
      if (std::find(eval_tasks.begin(), eval_tasks.end(), "sgdet") != eval_tasks.end() &&
          eval_det.empty()) {
        throw sgg::Error("task sgdet needs --detections");
      }
      return run_eval(eval_data, eval_ckpt, eval_tasks, eval_mode, eval_det, eval_report, eval_bottom,
                      eval_base, eval_out);
    }
    if (*ab) return run_ablate(ablate_flags, ablate_data, ablate_out, ablate_seeds);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
