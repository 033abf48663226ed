#include <doctest.h>

#include "mmfusion/errors.hpp"
#include "mmfusion/mmrl.hpp"
#include "support.hpp"

using namespace mmfusion;
using namespace mmfusion::mmrl;

namespace {

Tensor randn(Shape s, Rng& rng, double sd = 1.0) { return normal_tensor(std::move(s), sd, rng); }

double max_diff(const oracle::Mat& a, const Tensor& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < a[i].size(); ++j) m = std::max(m, std::abs(a[i][j] - b.at(i, j)));
  return m;
}

double max_diff(const oracle::Vec& a, const Tensor& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

oracle::Mat keep_of(const RelationMask& m) { return oracle::to_mat(m.keep); }

}  // namespace

TEST_CASE("a single token attends to itself") {
  Rng rng(1);
  const AttentionParams p = init_attention(8, 2, rng);
  const Tensor x = randn({1, 8}, rng);
  ag::Tape tape(false);
  const Tensor out = multi_head_self_attention(tape, tape.param(x), p).value();
  const oracle::Vec expect = oracle::affine(p.wo, p.bo, oracle::affine(p.wv, p.bv, x.data));
  CHECK(max_diff(oracle::Vec(expect), out) < 1e-12);
}

TEST_CASE("repeated identical tokens give identical rows") {
  Rng rng(2);
  const AttentionParams p = init_attention(8, 4, rng);
  const Tensor tok = randn({8}, rng);
  ag::Tape tape(false);
  const Tensor out = multi_head_self_attention(tape, ag::tile_rows(tape.param(tok), 5), p).value();
  for (std::size_t i = 1; i < 5; ++i)
    for (std::size_t j = 0; j < 8; ++j) CHECK(out.at(i, j) == out.at(0, j));
}

TEST_CASE("hand-set two-token attention matches the loop oracle") {
  AttentionParams p;
  p.heads = 1;
  p.wq = Tensor::matrix(2, 2, {0.5, -0.25, 0.1, 0.3});
  p.bq = Tensor::vector({0.05, -0.1});
  p.wk = Tensor::matrix(2, 2, {0.2, 0.4, -0.3, 0.1});
  p.bk = Tensor::vector({0.0, 0.2});
  p.wv = Tensor::matrix(2, 2, {1.0, 0.0, 0.5, -0.5});
  p.bv = Tensor::vector({0.1, 0.1});
  p.wo = Tensor::matrix(2, 2, {0.3, 0.7, -0.2, 0.9});
  p.bo = Tensor::vector({0.0, -0.05});
  const Tensor x = Tensor::matrix(2, 2, {1.0, 2.0, -0.5, 0.25});
  ag::Tape tape(false);
  const Tensor out = multi_head_self_attention(tape, tape.param(x), p).value();
  CHECK(max_diff(oracle::attention(oracle::to_mat(x), oracle::to_mat(x), p), out) < 1e-12);
}

TEST_CASE("random attention instances match the loop oracle with and without masks") {
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t heads = 1 + trial % 3, d = heads * (2 + trial % 3);
    const std::size_t nq = 1 + trial % 4, nk = 1 + (trial / 4) % 4;
    const AttentionParams p = init_attention(d, heads, rng);
    const Tensor q = randn({nq, d}, rng), k = randn({nk, d}, rng);
    const RelationMask mask = sample_relation_mask(nq, nk, 0.3, rng);
    ag::Tape tape(false);
    const Tensor plain = multi_head_attention(tape, tape.param(q), tape.param(k), p).value();
    const Tensor masked = multi_head_attention(tape, tape.param(q), tape.param(k), p, &mask).value();
    const oracle::Mat keep = keep_of(mask);
    CHECK(max_diff(oracle::attention(oracle::to_mat(q), oracle::to_mat(k), p), plain) < 1e-10);
    CHECK(max_diff(oracle::attention(oracle::to_mat(q), oracle::to_mat(k), p, &keep), masked) < 1e-10);
  }
}

TEST_CASE("attention rows sum to one over kept keys, fully masked rows output zero heads") {
  Rng rng(4);
  const AttentionParams p = init_attention(8, 2, rng);
  const Tensor q = randn({3, 8}, rng), k = randn({4, 8}, rng);
  RelationMask mask{Tensor::matrix(3, 4, {1, 0, 1, 1, 0, 0, 0, 0, 1, 1, 1, 1}), 5.0 / 12.0};
  for (const Tensor& w : attention_weights(q, k, p, &mask)) {
    for (std::size_t i = 0; i < 3; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < 4; ++j) {
        if (mask.keep.at(i, j) == 0.0) CHECK(w.at(i, j) == 0.0);
        s += w.at(i, j);
      }
      if (i == 1)
        CHECK(s == 0.0);
      else
        CHECK(std::abs(s - 1.0) < 1e-6);
    }
  }
  ag::Tape tape(false);
  const Tensor out = multi_head_attention(tape, tape.param(q), tape.param(k), p, &mask).value();
  for (std::size_t j = 0; j < 8; ++j) CHECK(out.at(1, j) == doctest::Approx(p.bo[j]).epsilon(1e-15));
}

TEST_CASE("relation masks hide exactly round(ratio * n_q * n_k) entries") {
  Rng rng(5);
  CHECK(sample_relation_mask(10, 10, 0.15, rng).masked_count() == 15);
  CHECK(sample_relation_mask(3, 3, 0.0, rng).masked_count() == 0);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t nq = 1 + rng() % 12, nk = 1 + rng() % 12;
    const double ratio = std::uniform_real_distribution<double>(0.0, 0.99)(rng);
    const RelationMask m = sample_relation_mask(nq, nk, ratio, rng);
    CHECK(m.keep.shape == Shape{nq, nk});
    CHECK(m.masked_count() == static_cast<std::size_t>(std::llround(ratio * static_cast<double>(nq * nk))));
  }
  CHECK_THROWS_AS(sample_relation_mask(3, 3, 1.0, rng), ConfigError);
  CHECK_THROWS_AS(sample_relation_mask(3, 3, -0.1, rng), ConfigError);
}

TEST_CASE("masks avoid fully masked rows when another arrangement exists") {
  Rng rng(6);
  for (int trial = 0; trial < 200; ++trial) {
    const RelationMask m = sample_relation_mask(4, 2, 0.5, rng);
    for (std::size_t i = 0; i < 4; ++i) CHECK(m.keep.at(i, 0) + m.keep.at(i, 1) > 0.0);
  }
}

TEST_CASE("mask positions are uniform") {
  Rng rng(7);
  const int draws = 10000;
  std::vector<double> freq(16, 0.0);
  // (4, 4, 0.5) with row-resampling: every position is still exchangeable.
  for (int d = 0; d < draws; ++d) {
    const RelationMask m = sample_relation_mask(4, 4, 0.5, rng);
    for (std::size_t i = 0; i < 16; ++i) freq[i] += m.keep.data[i] == 0.0;
  }
  const double se = std::sqrt(0.25 / draws);
  for (double f : freq) CHECK(std::abs(f / draws - 0.5) < 3 * se);
}

TEST_CASE("ratio zero: masked and unmasked paths coincide") {
  Rng rng(8);
  const MmrlParams p = init_mmrl(8, 2, 3, 1);
  const Tensor tumor = randn({8}, rng), nodes = randn({3, 8}, rng);
  ag::Tape tape(false);
  Rng r1(1), r2(2);
  const MmrlOutput train = mmrl_forward(tape, tape.param(tumor), tape.param(nodes), p, Mode::train, 0.0, r1);
  const MmrlOutput infer = mmrl_forward(tape, tape.param(tumor), tape.param(nodes), p, Mode::infer, 0.0, r2);
  REQUIRE(train.align_pairs.size() == 2);
  CHECK(infer.align_pairs.empty());
  CHECK(train.used_masked_path);
  CHECK_FALSE(infer.used_masked_path);
  for (const auto& pair : train.align_pairs) {
    CHECK(pair.unmasked.value() == pair.masked.value());
    CHECK(alignment_loss(pair.unmasked, pair.masked).item() == 0.0);
  }
  CHECK(train.z_node.value() == infer.z_node.value());
  CHECK(train.z_tumor.value() == infer.z_tumor.value());
}

TEST_CASE("infer mode ignores the rng and the ratio") {
  Rng rng(9);
  const MmrlParams p = init_mmrl(8, 4, 3, 2);
  const Tensor tumor = randn({8}, rng), nodes = randn({3, 8}, rng);
  ag::Tape tape(false);
  Rng a(1), b(999);
  const MmrlOutput x = mmrl_forward(tape, tape.param(tumor), tape.param(nodes), p, Mode::infer, 0.15, a);
  const MmrlOutput y = mmrl_forward(tape, tape.param(tumor), tape.param(nodes), p, Mode::infer, 0.6, b);
  CHECK(x.z_node.value() == y.z_node.value());
  CHECK(x.z_tumor.value() == y.z_tumor.value());
  CHECK(a() == Rng(1)());
}

TEST_CASE("mmrl outputs match the straight-line reference in both modes") {
  Rng rng(10);
  for (int trial = 0; trial < 20; ++trial) {
    const MmrlParams p = init_mmrl(8, 2, 3, static_cast<std::uint64_t>(trial));
    const Tensor tumor = randn({8}, rng), nodes = randn({3, 8}, rng);
    ag::Tape tape(false);
    Rng dummy(0);
    const MmrlOutput infer = mmrl_forward(tape, tape.param(tumor), tape.param(nodes), p, Mode::infer, 0.15, dummy);
    const auto [zt, zn] = oracle::mmrl_infer(tumor.data, oracle::to_mat(nodes), p);
    CHECK(max_diff(zn, infer.z_node.value()) < 1e-10);
    CHECK(max_diff(zt, infer.z_tumor.value()) < 1e-10);

    // Train mode: replay the two mask draws from a copy of the stream.
    Rng stream(static_cast<std::uint64_t>(100 + trial)), replay = stream;
    const MmrlOutput train = mmrl_forward(tape, tape.param(tumor), tape.param(nodes), p, Mode::train, 0.15, stream);
    const oracle::Mat node_keep = keep_of(sample_relation_mask(3, 3, 0.15, replay));
    const oracle::Mat tumor_keep = keep_of(sample_relation_mask(3, 3, 0.15, replay));
    const oracle::Mat nodes_m = oracle::to_mat(nodes), tumor_tokens(3, tumor.data);
    const oracle::Mat node_s = oracle::attention(nodes_m, nodes_m, p.intra_node);
    const oracle::Mat tumor_s = oracle::attention(tumor_tokens, tumor_tokens, p.intra_tumor);
    const oracle::Mat node_cm = oracle::attention(node_s, tumor_s, p.cross_node, &node_keep);
    const oracle::Mat tumor_cm = oracle::attention(tumor_s, node_s, p.cross_tumor, &tumor_keep);
    CHECK(max_diff(oracle::mean_rows(oracle::add(node_s, node_cm)), train.z_node.value()) < 1e-10);
    CHECK(max_diff(oracle::mean_rows(oracle::add(tumor_s, tumor_cm)), train.z_tumor.value()) < 1e-10);
    CHECK(max_diff(oracle::mean_rows(node_cm), train.align_pairs[0].masked.value()) < 1e-10);
    CHECK(max_diff(oracle::mean_rows(oracle::attention(node_s, tumor_s, p.cross_node)),
                   train.align_pairs[0].unmasked.value()) < 1e-10);
  }
}

TEST_CASE("alignment loss is the mean squared difference") {
  ag::Tape tape(false);
  const auto v = [&](std::initializer_list<double> x) { return ag::constant(Tensor::vector(x)); };
  CHECK(alignment_loss(v({1.5, -2.0}), v({1.5, -2.0})).item() == 0.0);
  CHECK(alignment_loss(v({0, 0}), v({2, 2})).item() == 4.0);
  Rng rng(11);
  const Tensor a = randn({17}, rng), b = randn({17}, rng);
  CHECK(std::abs(alignment_loss(ag::constant(a), ag::constant(b)).item() - oracle::mse(a.data, b.data)) < 1e-14);
  CHECK_THROWS_AS(alignment_loss(v({1, 2}), v({1, 2, 3})), ConfigError);
}

TEST_CASE("mode names parse") {
  CHECK(parse_mode("train") == Mode::train);
  CHECK(parse_mode("infer") == Mode::infer);
  CHECK_THROWS_AS(parse_mode("eval"), ConfigError);
}

TEST_CASE("heads must divide the latent size") {
  CHECK_THROWS_AS(init_mmrl(10, 4, 3, 0), ConfigError);
}

TEST_CASE("mmrl gradients match central differences for every parameter group") {
  Rng rng(12);
  MmrlParams p = init_mmrl(4, 2, 3, 5);
  Tensor tumor = randn({4}, rng), nodes = randn({3, 4}, rng);
  const auto groups = {&p.intra_node, &p.intra_tumor, &p.cross_node, &p.cross_tumor};
  for (auto* g : groups) {
    std::vector<Tensor*> inputs{&g->wq, &g->bq, &g->wk, &g->bk, &g->wv, &g->bv, &g->wo, &g->bo};
    if (g == &p.intra_node) inputs.insert(inputs.end(), {&tumor, &nodes});
    for (Mode mode : {Mode::train, Mode::infer}) {
      const auto build = [&](ag::Tape& t) {
        Rng stream(77);
        const MmrlOutput o = mmrl_forward(t, t.param(tumor), t.param(nodes), p, mode, 0.3, stream);
        ag::Var loss = ag::add(ag::sum(ag::mul(o.z_node, o.z_node)), ag::sum(o.z_tumor));
        for (const auto& pair : o.align_pairs) loss = ag::add(loss, alignment_loss(pair.unmasked, pair.masked));
        return loss;
      };
      CHECK(oracle::check_gradients(inputs, build, 20, rng).worst_rel < 1e-4);
    }
  }
}
