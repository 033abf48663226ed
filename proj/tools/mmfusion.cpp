// mmfusion command-line driver.

#include <fstream>
#include <iostream>

#include <CLI11.hpp>
#include <json.hpp>

#include "mmfusion/cohort.hpp"
#include "mmfusion/errors.hpp"
#include "mmfusion/evalkit.hpp"
#include "mmfusion/trainer.hpp"

using namespace mmfusion;
using json = nlohmann::json;

namespace {

json read_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open " + path);
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ParseError(path + ": " + e.what());
  }
}

void write_json(const std::string& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write " + path);
  out << j.dump(2) << '\n';
}

cohort::FoldSplit fold_of(const cohort::Cohort& c, const trainer::TrainConfig& config, std::size_t fold) {
  auto folds = cohort::split_folds(c, config.folds, config.seed);
  if (fold >= folds.size())
    throw ConfigError("fold " + std::to_string(fold) + " out of range for " + std::to_string(folds.size()) + " folds");
  return folds[fold];
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-modal lymph node metastasis prediction on synthetic cohorts"};
  app.require_subcommand(1);

  std::string config_path, out_path, cohort_dir, ckpt_path, grid = "ablation";
  std::size_t fold = 0, chains = 0;
  std::vector<std::uint64_t> seeds{0, 1, 2};

  auto* gen = app.add_subcommand("generate", "write a synthetic cohort");
  gen->add_option("--config", config_path, "generator config (JSON)")->required();
  gen->add_option("--out", out_path, "output directory")->required();

  auto* tr = app.add_subcommand("train", "warm up and jointly train on one fold");
  tr->add_option("--config", config_path, "training config (JSON)")->required();
  tr->add_option("--cohort", cohort_dir, "cohort directory")->required();
  tr->add_option("--fold", fold, "fold index")->required();
  tr->add_option("--out", out_path, "checkpoint path")->required();

  auto* ev = app.add_subcommand("evaluate", "score a checkpoint on its fold's test split");
  ev->add_option("--ckpt", ckpt_path, "checkpoint")->required();
  ev->add_option("--cohort", cohort_dir, "cohort directory")->required();
  ev->add_option("--fold", fold, "fold index")->required();
  ev->add_option("--out", out_path, "report path (JSON)")->required();

  auto* ab = app.add_subcommand("ablate", "train and test every variant of a grid");
  ab->add_option("--grid", grid, "ablation or table3")->check(CLI::IsMember({"ablation", "table3"}));
  ab->add_option("--cohort", cohort_dir, "cohort directory")->required();
  ab->add_option("--config", config_path, "base training config (JSON)");
  ab->add_option("--seeds", seeds, "seeds")->delimiter(',');
  ab->add_option("--out", out_path, "results table (JSON)")->required();

  auto* tj = app.add_subcommand("trajectory", "dump reverse-diffusion trajectories of a test split");
  tj->add_option("--ckpt", ckpt_path, "checkpoint")->required();
  tj->add_option("--cohort", cohort_dir, "cohort directory")->required();
  tj->add_option("--fold", fold, "fold index");
  tj->add_option("--chains", chains, "chains per record (default: checkpoint config)");
  tj->add_option("--out", out_path, "dump manifest (JSON)")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) {
      const auto config = cohort::synthetic_config_from_json(read_json(config_path));
      cohort::save_cohort(cohort::generate_cohort(config), out_path);
      std::cout << "wrote " << config.n_patients << " records to " << out_path << '\n';
    } else if (*tr) {
      const auto config = trainer::train_config_from_json(read_json(config_path));
      const auto c = cohort::load_cohort(cohort_dir);
      const auto split = fold_of(c, config, fold);
      const auto ck = trainer::train(cohort::select(c, split.train_ids), cohort::select(c, split.val_ids), config);
      trainer::save_checkpoint(ck, out_path);
      std::cout << "best validation accuracy " << ck.best_val_accuracy << " at epoch " << ck.best_epoch << '\n';
    } else if (*ev) {
      const auto ck = trainer::load_checkpoint(ckpt_path);
      const auto c = cohort::load_cohort(cohort_dir);
      const auto split = fold_of(c, ck.config, fold);
      const auto report = evalkit::evaluate(ck, cohort::select(c, split.test_ids));
      write_json(out_path, evalkit::to_json(report));
      std::cout << evalkit::to_json(report).dump() << '\n';
    } else if (*ab) {
      const auto base = config_path.empty() ? trainer::TrainConfig{}
                                            : trainer::train_config_from_json(read_json(config_path));
      const auto rows = evalkit::run_ablation(std::filesystem::path(cohort_dir), evalkit::parse_grid(grid), base,
                                              seeds, [](const std::string& line) { std::cerr << line << '\n'; });
      write_json(out_path, evalkit::to_json(rows));
      for (const auto& r : rows)
        std::cout << r.name << " accuracy " << r.summary.mean.accuracy << " +- " << r.summary.std.accuracy << '\n';
    } else if (*tj) {
      const auto ck = trainer::load_checkpoint(ckpt_path);
      const auto c = cohort::load_cohort(cohort_dir);
      const auto split = fold_of(c, ck.config, fold);
      const auto dump = evalkit::export_trajectory(ck, cohort::select(c, split.test_ids),
                                                   chains ? chains : ck.config.trajectories, out_path);
      for (const auto& s : dump.snapshots) std::cout << "t=" << s.t << " db=" << s.db << '\n';
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
