#pragma once

// Metrics, paired significance tests, Davies-Bouldin trajectories and the
// ablation harness.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "mmfusion/trainer.hpp"

namespace mmfusion::evalkit {

// Percentages; positive class = 1.  Precision, recall and f1 are 0 when their
// denominator is 0.
struct MetricsReport {
  double accuracy = 0.0, precision = 0.0, recall = 0.0, f1 = 0.0;
};

MetricsReport classification_metrics(const std::vector<int>& predicted, const std::vector<int>& truth);
nlohmann::json to_json(const MetricsReport& m);

struct Summary {
  std::vector<MetricsReport> runs;
  MetricsReport mean, std;  // sample standard deviation; 0 for a single run
};
Summary summarize(const std::vector<MetricsReport>& runs);

struct TTest {
  double p_value = 1.0;
  double t = 0.0;
  std::size_t df = 0;
  std::string note;  // set when the pairing count is small
};

// Two-sided paired t-test on a[i] - b[i].  All-zero differences give p = 1,
// constant nonzero differences give p = 0.
TTest paired_t_test(const std::vector<double>& a, const std::vector<double>& b);

// points: n x m.  Euclidean centroids and scatter.
double davies_bouldin(const Tensor& points, const std::vector<int>& labels);

// Projection onto the two leading principal axes (n x 2).  Each axis is
// oriented so its largest-magnitude loading is positive.
Tensor pca_2d(const Tensor& points);

struct TrajectorySnapshot {
  std::size_t t = 0;
  Tensor points;  // n x 2 chain means
  Tensor pca;     // n x 2
  double db = 0.0;
};

struct TrajectoryDump {
  std::vector<std::string> ids;
  std::vector<int> labels;
  std::size_t chains = 0;
  std::vector<TrajectorySnapshot> snapshots;  // t = T, ..., 0
};

// Chain means of every test record at each reverse step.  Record i uses the
// same sampling stream as predict(), so the t = 0 snapshot matches its labels.
TrajectoryDump compute_trajectory(const Model& model, const trainer::Split& test,
                                  const PredictOptions& options);

// Rejects untrained checkpoints and variants without the diffusion head.
TrajectoryDump export_trajectory(const trainer::Checkpoint& checkpoint, const trainer::Split& test,
                                 std::size_t chains, const std::filesystem::path& out);

// JSON manifest at `out`, float32 blocks in `out` + ".f32": for each snapshot
// the n x 2 points then the n x 2 projection.
void write_trajectory(const TrajectoryDump& dump, const std::filesystem::path& out);

// Stream used to evaluate a trained checkpoint.
std::uint64_t evaluation_seed(const trainer::TrainConfig& config);
MetricsReport evaluate(const trainer::Checkpoint& checkpoint, const trainer::Split& test);

enum class Grid { ablation, table3 };
Grid parse_grid(std::string_view name);

struct AblationCell {
  std::string name;
  trainer::TrainConfig config;
};
std::vector<AblationCell> ablation_cells(Grid grid, const trainer::TrainConfig& base);

struct AblationRow {
  std::string name;
  Summary summary;
  TTest accuracy_vs_first;  // paired over (seed, fold) runs against row 0
};

using Progress = std::function<void(const std::string&)>;
// Sees every trained checkpoint with the test split it was scored on.
using RunHook = std::function<void(const AblationCell&, std::uint64_t seed, std::size_t fold,
                                   const trainer::Checkpoint&, const trainer::Split& test)>;

// Trains and tests every cell on each fold for each seed.
std::vector<AblationRow> run_ablation(const cohort::Cohort& cohort, Grid grid,
                                      const trainer::TrainConfig& base,
                                      const std::vector<std::uint64_t>& seeds,
                                      const Progress& progress = {}, const RunHook& on_run = {});
std::vector<AblationRow> run_ablation(const std::filesystem::path& cohort_dir, Grid grid,
                                      const trainer::TrainConfig& base,
                                      const std::vector<std::uint64_t>& seeds,
                                      const Progress& progress = {});
nlohmann::json to_json(const std::vector<AblationRow>& rows);

}  // namespace mmfusion::evalkit
