#pragma once

// Test-side oracles.  Everything here is written with plain loops over
// std::vector so it shares no code path with the library beyond the
// parameter structs it reads.

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <vector>

#include "mmfusion/autograd.hpp"
#include "mmfusion/hga.hpp"
#include "mmfusion/mmrl.hpp"
#include "mmfusion/params.hpp"
#include "mmfusion/random.hpp"

namespace oracle {

using Mat = std::vector<std::vector<double>>;
using Vec = std::vector<double>;

inline Mat to_mat(const mmfusion::Tensor& t) {
  Mat m(t.shape[0], Vec(t.shape[1]));
  for (std::size_t i = 0; i < t.shape[0]; ++i)
    for (std::size_t j = 0; j < t.shape[1]; ++j) m[i][j] = t.data[i * t.shape[1] + j];
  return m;
}

inline Vec to_vec(const mmfusion::Tensor& t) { return t.data; }

// y = W x + b for W out x in.
inline Vec affine(const mmfusion::Tensor& w, const mmfusion::Tensor& b, const Vec& x) {
  const std::size_t out = w.shape[0], in = w.shape[1];
  Vec y(out);
  for (std::size_t o = 0; o < out; ++o) {
    double s = b.data.empty() ? 0.0 : b.data[o];
    for (std::size_t i = 0; i < in; ++i) s += w.data[o * in + i] * x[i];
    y[o] = s;
  }
  return y;
}

inline double elu(double x) { return x > 0 ? x : std::expm1(x); }

inline double act(double x, mmfusion::hga::Activation a) {
  switch (a) {
    case mmfusion::hga::Activation::elu: return elu(x);
    case mmfusion::hga::Activation::relu: return x > 0 ? x : 0.0;
    case mmfusion::hga::Activation::identity: return x;
  }
  return x;
}

inline Vec softmax(const Vec& s) {
  double m = -INFINITY;
  for (double v : s) m = std::max(m, v);
  Vec e(s.size());
  double z = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i) z += (e[i] = std::exp(s[i] - m));
  for (double& v : e) v /= z;
  return e;
}

// Multi-head scaled dot-product attention, one query row at a time.
// keep (optional) is n_q x n_k with 0 marking a dropped score.
inline Mat attention(const Mat& queries, const Mat& keys, const mmfusion::mmrl::AttentionParams& p,
                     const Mat* keep = nullptr) {
  const std::size_t d = p.wq.shape[0], heads = p.heads, dh = d / heads;
  Mat q, k, v;
  for (const auto& x : queries) q.push_back(affine(p.wq, p.bq, x));
  for (const auto& x : keys) {
    k.push_back(affine(p.wk, p.bk, x));
    v.push_back(affine(p.wv, p.bv, x));
  }
  Mat out;
  for (std::size_t i = 0; i < queries.size(); ++i) {
    Vec concat(d, 0.0);
    for (std::size_t h = 0; h < heads; ++h) {
      std::vector<std::size_t> kept;
      Vec scores;
      for (std::size_t j = 0; j < keys.size(); ++j) {
        if (keep && (*keep)[i][j] == 0.0) continue;
        double s = 0.0;
        for (std::size_t a = 0; a < dh; ++a) s += q[i][h * dh + a] * k[j][h * dh + a];
        scores.push_back(s / std::sqrt(static_cast<double>(dh)));
        kept.push_back(j);
      }
      if (kept.empty()) continue;
      const Vec w = softmax(scores);
      for (std::size_t idx = 0; idx < kept.size(); ++idx)
        for (std::size_t a = 0; a < dh; ++a) concat[h * dh + a] += w[idx] * v[kept[idx]][h * dh + a];
    }
    out.push_back(affine(p.wo, p.bo, concat));
  }
  return out;
}

inline Vec mean_rows(const Mat& m) {
  Vec r(m[0].size(), 0.0);
  for (const auto& row : m)
    for (std::size_t j = 0; j < row.size(); ++j) r[j] += row[j] / static_cast<double>(m.size());
  return r;
}

inline Mat add(const Mat& a, const Mat& b) {
  Mat c = a;
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < a[i].size(); ++j) c[i][j] += b[i][j];
  return c;
}

// Inference-mode MMRL: returns {z_tumor, z_node}.
inline std::pair<Vec, Vec> mmrl_infer(const Vec& tumor, const Mat& nodes, const mmfusion::mmrl::MmrlParams& p) {
  const Mat tumor_tokens(p.tumor_tiles, tumor);
  const Mat node_s = attention(nodes, nodes, p.intra_node);
  const Mat tumor_s = attention(tumor_tokens, tumor_tokens, p.intra_tumor);
  const Mat node_c = attention(node_s, tumor_s, p.cross_node);
  const Mat tumor_c = attention(tumor_s, node_s, p.cross_tumor);
  return {mean_rows(add(tumor_s, tumor_c)), mean_rows(add(node_s, node_c))};
}

// Attention coefficients alpha_ij of one GAT layer.
inline Mat gat_alpha(const Mat& f, const mmfusion::hga::GnnLayer& layer, double slope) {
  const std::size_t n = f.size(), d = f[0].size();
  Mat wh;
  const mmfusion::Tensor no_bias;
  for (const auto& x : f) wh.push_back(affine(layer.weight, no_bias, x));
  Mat alpha(n, Vec(n));
  for (std::size_t i = 0; i < n; ++i) {
    Vec e(n);
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t a = 0; a < d; ++a)
        s += layer.attention.data[a] * wh[i][a] + layer.attention.data[d + a] * wh[j][a];
      e[j] = s > 0 ? s : slope * s;
    }
    alpha[i] = softmax(e);
  }
  return alpha;
}

inline Mat gat_layer(const Mat& f, const mmfusion::hga::GnnLayer& layer, mmfusion::hga::Activation a,
                     double slope) {
  const std::size_t n = f.size(), d = f[0].size();
  const mmfusion::Tensor no_bias;
  Mat wh;
  for (const auto& x : f) wh.push_back(affine(layer.weight, no_bias, x));
  const Mat alpha = gat_alpha(f, layer, slope);
  Mat out(n, Vec(d, 0.0));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t k = 0; k < d; ++k) out[i][k] += alpha[i][j] * wh[j][k];
    for (double& v : out[i]) v = act(v, a);
  }
  return out;
}

inline Mat gcn_layer(const Mat& f, const mmfusion::hga::GnnLayer& layer, mmfusion::hga::Activation a) {
  const std::size_t n = f.size(), d = f[0].size();
  const mmfusion::Tensor no_bias;
  Vec avg(d, 0.0);
  for (const auto& x : f) {
    const Vec wx = affine(layer.weight, no_bias, x);
    for (std::size_t k = 0; k < d; ++k) avg[k] += wx[k] / static_cast<double>(n);
  }
  Mat out(n, avg);
  for (auto& row : out)
    for (double& v : row) v = act(v, a);
  return out;
}

// f_phi of the graph readout head.
inline Vec hga(const Mat& features, const mmfusion::hga::GnnParams& gnn, const mmfusion::hga::FusionHeadParams& head) {
  Mat h = features;
  for (const auto& layer : gnn.layers)
    h = gnn.type == mmfusion::hga::LayerType::gat ? gat_layer(h, layer, gnn.activation, gnn.leaky_slope)
                                                  : gcn_layer(h, layer, gnn.activation);
  Vec hidden = affine(head.readout_w, head.readout_b, mean_rows(h));
  for (double& v : hidden) v = elu(v);
  return softmax(affine(head.classifier_w, head.classifier_b, hidden));
}

inline double bce(double p, double y) {
  p = std::clamp(p, 1e-7, 1.0 - 1e-7);
  return -(y * std::log(p) + (1.0 - y) * std::log(1.0 - p));
}

inline double mse(const Vec& a, const Vec& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s / static_cast<double>(a.size());
}

struct Confusion {
  double accuracy, precision, recall, f1;
};

// Counts each cell of the confusion matrix by scanning the pairs separately.
inline Confusion confusion(const std::vector<int>& pred, const std::vector<int>& truth) {
  const auto count = [&](int p, int t) {
    double c = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) c += (pred[i] == p && truth[i] == t) ? 1 : 0;
    return c;
  };
  const double tp = count(1, 1), tn = count(0, 0), fp = count(1, 0), fn = count(0, 1);
  const double precision = tp + fp > 0 ? 100.0 * tp / (tp + fp) : 0.0;
  const double recall = tp + fn > 0 ? 100.0 * tp / (tp + fn) : 0.0;
  const double f1 = precision + recall > 0 ? 2 * precision * recall / (precision + recall) : 0.0;
  return {100.0 * (tp + tn) / static_cast<double>(pred.size()), precision, recall, f1};
}

// Davies-Bouldin from the pairwise-distance formulation.
inline double davies_bouldin(const Mat& points, const std::vector<int>& labels) {
  std::map<int, Mat> groups;
  for (std::size_t i = 0; i < points.size(); ++i) groups[labels[i]].push_back(points[i]);
  const auto dist = [](const Vec& a, const Vec& b) {
    double s = 0.0;
    for (std::size_t k = 0; k < a.size(); ++k) s += (a[k] - b[k]) * (a[k] - b[k]);
    return std::sqrt(s);
  };
  std::vector<Vec> centers;
  Vec scatter;
  for (const auto& [label, pts] : groups) {
    const Vec c = mean_rows(pts);
    double s = 0.0;
    for (const auto& x : pts) s += dist(x, c);
    centers.push_back(c);
    scatter.push_back(s / static_cast<double>(pts.size()));
  }
  double total = 0.0;
  for (std::size_t i = 0; i < centers.size(); ++i) {
    double worst = 0.0;
    for (std::size_t j = 0; j < centers.size(); ++j)
      if (j != i) worst = std::max(worst, (scatter[i] + scatter[j]) / dist(centers[i], centers[j]));
    total += worst;
  }
  return total / static_cast<double>(centers.size());
}

// Two-sided p-value of Student's t by composite Simpson integration of the
// density over [0, |t|].
inline double student_t_two_sided(double t, double df) {
  const double c = std::exp(std::lgamma((df + 1) / 2) - std::lgamma(df / 2)) / std::sqrt(df * M_PI);
  const auto pdf = [&](double x) { return c * std::pow(1 + x * x / df, -(df + 1) / 2); };
  const double a = std::abs(t);
  const int n = 200000;
  const double h = a / n;
  double s = pdf(0) + pdf(a);
  for (int i = 1; i < n; ++i) s += (i % 2 ? 4 : 2) * pdf(i * h);
  return 1.0 - 2.0 * s * h / 3.0;
}

// Worst relative error between reverse-mode and central-difference gradients
// over `probes` random coordinates of `inputs`.
struct GradReport {
  double worst_rel = 0.0;
  std::size_t probes = 0;
};

inline GradReport check_gradients(const std::vector<mmfusion::Tensor*>& inputs,
                                  const std::function<mmfusion::ag::Var(mmfusion::ag::Tape&)>& build,
                                  std::size_t probes, mmfusion::Rng& rng, double h = 1e-6) {
  using namespace mmfusion;
  ag::Tape tape;
  const ag::Var loss = build(tape);
  ag::backward(loss);
  std::vector<std::pair<std::size_t, std::size_t>> coords;
  for (std::size_t i = 0; i < inputs.size(); ++i)
    for (std::size_t k = 0; k < inputs[i]->size(); ++k) coords.emplace_back(i, k);
  std::shuffle(coords.begin(), coords.end(), rng);
  GradReport report;
  for (std::size_t p = 0; p < std::min(probes, coords.size()); ++p) {
    const auto [i, k] = coords[p];
    const Tensor* g = tape.grad_of(*inputs[i]);
    const double analytic = g ? g->data[k] : 0.0;
    double& x = inputs[i]->data[k];
    const double saved = x;
    x = saved + h;
    ag::Tape t1(false);
    const double up = build(t1).item();
    x = saved - h;
    ag::Tape t2(false);
    const double down = build(t2).item();
    x = saved;
    const double numeric = (up - down) / (2 * h);
    const double rel = std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-3});
    report.worst_rel = std::max(report.worst_rel, rel);
    ++report.probes;
  }
  return report;
}

}  // namespace oracle
