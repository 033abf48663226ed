#include "mmfusion/evalkit.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <set>

#include <Eigen/Dense>
#include <boost/math/distributions/students_t.hpp>

#include "mmfusion/errors.hpp"

namespace mmfusion::evalkit {
namespace {

using json = nlohmann::json;

constexpr std::uint64_t kEvaluationStream = 21;

double pct(std::size_t num, std::size_t den) {
  return den == 0 ? 0.0 : 100.0 * static_cast<double>(num) / static_cast<double>(den);
}

template <class F>
MetricsReport map_metrics(F f) {
  return {f(&MetricsReport::accuracy), f(&MetricsReport::precision), f(&MetricsReport::recall),
          f(&MetricsReport::f1)};
}

// Rethrows with the cell name prefixed, keeping the error category.
[[noreturn]] void rethrow_annotated(const std::string& cell) {
  try {
    throw;
  } catch (const ConfigError& e) {
    throw ConfigError(cell + ": " + e.what());
  } catch (const ParseError& e) {
    throw ParseError(cell + ": " + e.what());
  } catch (const DivergenceError& e) {
    throw DivergenceError(cell + ": " + e.what());
  } catch (const std::exception& e) {
    throw std::runtime_error(cell + ": " + e.what());
  }
}

}  // namespace

MetricsReport classification_metrics(const std::vector<int>& predicted, const std::vector<int>& truth) {
  if (predicted.size() != truth.size())
    throw ConfigError("prediction count " + std::to_string(predicted.size()) + " differs from label count " +
                      std::to_string(truth.size()));
  if (predicted.empty()) throw ConfigError("metrics need at least one prediction");
  std::size_t tp = 0, tn = 0, fp = 0, fn = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if ((predicted[i] != 0 && predicted[i] != 1) || (truth[i] != 0 && truth[i] != 1))
      throw ConfigError("labels must be 0 or 1");
    if (predicted[i] == 1) (truth[i] == 1 ? tp : fp)++;
    else (truth[i] == 0 ? tn : fn)++;
  }
  MetricsReport m;
  m.accuracy = pct(tp + tn, truth.size());
  m.precision = pct(tp, tp + fp);
  m.recall = pct(tp, tp + fn);
  m.f1 = m.precision + m.recall > 0.0 ? 2.0 * m.precision * m.recall / (m.precision + m.recall) : 0.0;
  return m;
}

json to_json(const MetricsReport& m) {
  return {{"accuracy", m.accuracy}, {"precision", m.precision}, {"recall", m.recall}, {"f1", m.f1}};
}

Summary summarize(const std::vector<MetricsReport>& runs) {
  if (runs.empty()) throw ConfigError("nothing to summarize");
  Summary s;
  s.runs = runs;
  const double n = static_cast<double>(runs.size());
  s.mean = map_metrics([&](double MetricsReport::*f) {
    double sum = 0.0;
    for (const auto& r : runs) sum += r.*f;
    return sum / n;
  });
  s.std = map_metrics([&](double MetricsReport::*f) {
    if (runs.size() < 2) return 0.0;
    double ss = 0.0;
    for (const auto& r : runs) ss += (r.*f - s.mean.*f) * (r.*f - s.mean.*f);
    return std::sqrt(ss / (n - 1.0));
  });
  return s;
}

TTest paired_t_test(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw ConfigError("paired t-test needs lists of equal length");
  if (a.size() < 2) throw ConfigError("paired t-test needs at least 2 pairs");
  const std::size_t n = a.size();
  TTest out;
  out.df = n - 1;
  if (n <= 3)
    out.note = "only " + std::to_string(n) + " pairs: the test has very low power; treat p as indicative";
  double mean = 0.0;
  for (std::size_t i = 0; i < n; ++i) mean += a[i] - b[i];
  mean /= static_cast<double>(n);
  double ss = 0.0;
  for (std::size_t i = 0; i < n; ++i) ss += (a[i] - b[i] - mean) * (a[i] - b[i] - mean);
  const double sd = std::sqrt(ss / static_cast<double>(n - 1));
  // Differences equal to rounding noise count as constant.
  double scale = 0.0;
  for (std::size_t i = 0; i < n; ++i) scale = std::max({scale, std::abs(a[i]), std::abs(b[i])});
  if (sd <= 1e-12 * std::max(scale, 1.0)) {
    const bool zero = std::abs(mean) <= 1e-12 * std::max(scale, 1.0);
    out.t = zero ? 0.0 : std::copysign(std::numeric_limits<double>::infinity(), mean);
    out.p_value = zero ? 1.0 : 0.0;
    return out;
  }
  out.t = mean / (sd / std::sqrt(static_cast<double>(n)));
  const boost::math::students_t dist(static_cast<double>(out.df));
  out.p_value = std::min(1.0, 2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(out.t))));
  return out;
}

double davies_bouldin(const Tensor& points, const std::vector<int>& labels) {
  const std::size_t n = points.rows(), m = points.cols();
  if (labels.size() != n) throw ConfigError("one label per point required");
  std::map<int, std::vector<std::size_t>> members;
  for (std::size_t i = 0; i < n; ++i) members[labels[i]].push_back(i);
  if (members.size() < 2) throw ConfigError("Davies-Bouldin needs at least 2 clusters");

  std::vector<std::vector<double>> centroid;
  std::vector<double> scatter;
  for (const auto& [label, idx] : members) {
    std::vector<double> c(m, 0.0);
    for (std::size_t i : idx)
      for (std::size_t k = 0; k < m; ++k) c[k] += points.at(i, k);
    for (double& v : c) v /= static_cast<double>(idx.size());
    double s = 0.0;
    for (std::size_t i : idx) {
      double d2 = 0.0;
      for (std::size_t k = 0; k < m; ++k) d2 += (points.at(i, k) - c[k]) * (points.at(i, k) - c[k]);
      s += std::sqrt(d2);
    }
    centroid.push_back(std::move(c));
    scatter.push_back(s / static_cast<double>(idx.size()));
  }
  const std::size_t k = centroid.size();
  double total = 0.0;
  for (std::size_t i = 0; i < k; ++i) {
    double worst = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      if (i == j) continue;
      double d2 = 0.0;
      for (std::size_t q = 0; q < m; ++q) d2 += (centroid[i][q] - centroid[j][q]) * (centroid[i][q] - centroid[j][q]);
      const double sep = std::sqrt(d2);
      const double ratio = sep > 0.0 ? (scatter[i] + scatter[j]) / sep : std::numeric_limits<double>::infinity();
      worst = std::max(worst, ratio);
    }
    total += worst;
  }
  return total / static_cast<double>(k);
}

Tensor pca_2d(const Tensor& points) {
  const std::size_t n = points.rows(), m = points.cols();
  Eigen::MatrixXd x(n, m);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) x(i, j) = points.at(i, j);
  x.rowwise() -= x.colwise().mean();
  const Eigen::MatrixXd cov = x.transpose() * x / std::max<double>(1.0, static_cast<double>(n) - 1.0);
  const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
  Tensor out({n, 2});
  for (std::size_t axis = 0; axis < std::min<std::size_t>(2, m); ++axis) {
    Eigen::VectorXd v = eig.eigenvectors().col(static_cast<Eigen::Index>(m - 1 - axis));  // ascending order
    Eigen::Index arg = 0;
    v.cwiseAbs().maxCoeff(&arg);
    if (v(arg) < 0) v = -v;
    const Eigen::VectorXd proj = x * v;
    for (std::size_t i = 0; i < n; ++i) out.data[i * 2 + axis] = proj(static_cast<Eigen::Index>(i));
  }
  return out;
}

TrajectoryDump compute_trajectory(const Model& model, const trainer::Split& test, const PredictOptions& options) {
  if (!model.config.uses_cfd()) throw ConfigError("trajectories need a model with the diffusion head");
  if (test.empty()) throw ConfigError("trajectory export needs a non-empty split");
  const std::size_t n = test.size(), steps = model.schedule.steps;
  std::vector<std::vector<Tensor>> per(n);
  const auto count = static_cast<std::int64_t>(n);
#pragma omp parallel for schedule(dynamic)
  for (std::int64_t ii = 0; ii < count; ++ii) {
    const auto i = static_cast<std::size_t>(ii);
    Rng rng(record_sampling_seed(options.seed, i));
    cfd::sample_prediction(guidance(model, *test[i]), model.denoiser, model.schedule, options.chains, rng,
                           options.reverse_mode, &per[i]);
  }
  TrajectoryDump dump;
  dump.chains = options.chains;
  for (const auto* r : test) {
    dump.ids.push_back(r->id);
    dump.labels.push_back(r->label);
  }
  for (std::size_t s = 0; s <= steps; ++s) {
    TrajectorySnapshot snap;
    snap.t = steps - s;
    snap.points = Tensor({n, 2});
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t k = 0; k < 2; ++k) snap.points.data[i * 2 + k] = per[i].at(s)[k];
    snap.db = davies_bouldin(snap.points, dump.labels);
    snap.pca = pca_2d(snap.points);
    dump.snapshots.push_back(std::move(snap));
  }
  return dump;
}

TrajectoryDump export_trajectory(const trainer::Checkpoint& ck, const trainer::Split& test, std::size_t chains,
                                 const std::filesystem::path& out) {
  if (ck.epoch == 0) throw ConfigError("checkpoint is untrained (0 epochs completed)");
  if (chains == 0) throw ConfigError("need at least one chain");
  PredictOptions options = trainer::predict_options(ck.config, evaluation_seed(ck.config));
  options.chains = chains;
  TrajectoryDump dump = compute_trajectory(ck.model, test, options);
  write_trajectory(dump, out);
  return dump;
}

void write_trajectory(const TrajectoryDump& dump, const std::filesystem::path& out) {
  std::filesystem::path blocks = out;
  blocks += ".f32";
  const std::size_t n = dump.ids.size();
  json manifest = {{"format", "mmfusion-trajectory-v1"},
                   {"ids", dump.ids},
                   {"labels", dump.labels},
                   {"chains", dump.chains},
                   {"block_file", blocks.filename().string()},
                   {"block_layout", "per snapshot: points[n][2] then pca[n][2], float32 little-endian"},
                   {"snapshots", json::array()}};
  std::vector<float> payload;
  for (const auto& s : dump.snapshots) {
    manifest["snapshots"].push_back({{"t", s.t},
                                     {"db", s.db},
                                     {"points_offset", payload.size()},
                                     {"pca_offset", payload.size() + 2 * n}});
    for (double v : s.points.data) payload.push_back(static_cast<float>(v));
    for (double v : s.pca.data) payload.push_back(static_cast<float>(v));
  }
  const auto atomic_write = [](const std::filesystem::path& path, const char* data, std::size_t size) {
    std::filesystem::path tmp = path;
    tmp += ".tmp";
    {
      std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
      if (!f) throw ConfigError("cannot write " + tmp.string());
      f.write(data, static_cast<std::streamsize>(size));
    }
    std::filesystem::rename(tmp, path);
  };
  atomic_write(blocks, reinterpret_cast<const char*>(payload.data()), payload.size() * sizeof(float));
  const std::string text = manifest.dump(1);
  atomic_write(out, text.data(), text.size());
}

std::uint64_t evaluation_seed(const trainer::TrainConfig& config) {
  return mix_seed(config.seed, kEvaluationStream);
}

MetricsReport evaluate(const trainer::Checkpoint& ck, const trainer::Split& test) {
  if (test.empty()) throw ConfigError("evaluation needs a non-empty split");
  const auto labels = predict_labels(ck.model, test, trainer::predict_options(ck.config, evaluation_seed(ck.config)));
  std::vector<int> truth;
  for (const auto* r : test) truth.push_back(r->label);
  return classification_metrics(labels, truth);
}

Grid parse_grid(std::string_view name) {
  if (name == "ablation") return Grid::ablation;
  if (name == "table3") return Grid::table3;
  throw ConfigError("unknown grid '" + std::string(name) + "'; supported: ablation, table3");
}

std::vector<AblationCell> ablation_cells(Grid grid, const trainer::TrainConfig& base) {
  std::vector<AblationCell> cells;
  if (grid == Grid::ablation) {
    for (const char* v : {"base1", "base2", "base3", "full"}) {
      trainer::TrainConfig c = base;
      c.variant = v;
      cells.push_back({v, c});
    }
    return cells;
  }
  for (const char* arch : {"resnet_small", "densenet_small"})
    for (const char* gnn : {"gcn", "gat"})
      for (const bool mask : {true, false}) {
        trainer::TrainConfig c = base;
        c.variant = "full";
        c.architecture = arch;
        c.gnn = gnn;
        c.mask_ratio = mask ? base.mask_ratio : 0.0;
        cells.push_back({std::string(arch) + "/" + gnn + "/" + (mask ? "mask" : "nomask"), c});
      }
  return cells;
}

std::vector<AblationRow> run_ablation(const cohort::Cohort& cohort, Grid grid, const trainer::TrainConfig& base,
                                      const std::vector<std::uint64_t>& seeds, const Progress& progress,
                                      const RunHook& on_run) {
  if (cohort.empty()) throw ConfigError("ablation needs a cohort");
  if (seeds.empty()) throw ConfigError("ablation needs at least one seed");
  std::vector<AblationRow> rows;
  for (const AblationCell& cell : ablation_cells(grid, base)) {
    std::vector<MetricsReport> runs;
    for (std::uint64_t seed : seeds) {
      trainer::TrainConfig c = cell.config;
      c.seed = seed;
      const auto folds = cohort::split_folds(cohort, c.folds, seed);
      for (std::size_t k = 0; k < folds.size(); ++k) {
        try {
          const auto ck = trainer::train(cohort::select(cohort, folds[k].train_ids),
                                         cohort::select(cohort, folds[k].val_ids), c);
          const auto test = cohort::select(cohort, folds[k].test_ids);
          runs.push_back(evaluate(ck, test));
          if (on_run) on_run(cell, seed, k, ck, test);
        } catch (...) {
          rethrow_annotated(cell.name);
        }
        if (progress)
          progress(cell.name + " seed " + std::to_string(seed) + " fold " + std::to_string(k) +
                   " accuracy " + std::to_string(runs.back().accuracy));
      }
    }
    rows.push_back({cell.name, summarize(runs), {}});
  }
  std::vector<double> first;
  for (const auto& r : rows.front().summary.runs) first.push_back(r.accuracy);
  for (auto& row : rows) {
    std::vector<double> acc;
    for (const auto& r : row.summary.runs) acc.push_back(r.accuracy);
    if (acc.size() >= 2) row.accuracy_vs_first = paired_t_test(acc, first);
  }
  return rows;
}

std::vector<AblationRow> run_ablation(const std::filesystem::path& cohort_dir, Grid grid,
                                      const trainer::TrainConfig& base, const std::vector<std::uint64_t>& seeds,
                                      const Progress& progress) {
  return run_ablation(cohort::load_cohort(cohort_dir), grid, base, seeds, progress);
}

json to_json(const std::vector<AblationRow>& rows) {
  json out = json::array();
  for (const auto& row : rows) {
    json runs = json::array();
    for (const auto& r : row.summary.runs) runs.push_back(to_json(r));
    out.push_back({{"name", row.name},
                   {"mean", to_json(row.summary.mean)},
                   {"std", to_json(row.summary.std)},
                   {"runs", runs},
                   {"accuracy_p_value_vs_first", row.accuracy_vs_first.p_value},
                   {"note", row.accuracy_vs_first.note}});
  }
  return out;
}

}  // namespace mmfusion::evalkit
