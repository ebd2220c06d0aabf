#include <cstdio>
#include <map>
#include <numeric>

#include "doctest.h"
#include "glscl/evalviz.hpp"
#include "glscl/rng.hpp"

using namespace glscl;

namespace {

const Vocabulary kVocab = Vocabulary::standard();

ModelConfig eval_cfg() {
  ModelConfig c;
  c.dim = 16;
  c.heads = 2;
  c.layers_vision = 1;
  c.layers_text = 1;
  c.layers_fusion = 2;
  c.frames = 1;
  c.max_text_len = 16;
  c.proj_dim = 8;
  return c;
}

DataConfig eval_data() {
  DataConfig d;
  d.frames = 1;
  d.max_text_len = 16;
  return d;
}

std::vector<ManifestEntry> manifest_of(int64_t n, uint64_t seed0) {
  std::vector<ManifestEntry> m;
  for (int64_t i = 0; i < n; ++i) m.push_back({i, seed0 + static_cast<uint64_t>(i), false});
  return m;
}

// Independent reimplementation of the two-stage procedure.
std::vector<std::vector<int64_t>> brute_force_rank(
    const std::vector<std::vector<double>>& stage1,
    const std::vector<std::vector<double>>& vtm, const std::vector<int64_t>& ids, int64_t k) {
  std::vector<std::vector<int64_t>> out;
  for (size_t q = 0; q < stage1.size(); ++q) {
    std::vector<int64_t> rows(ids.size());
    std::iota(rows.begin(), rows.end(), 0);
    auto by_stage1 = [&](int64_t a, int64_t b) {
      if (stage1[q][static_cast<size_t>(a)] != stage1[q][static_cast<size_t>(b)])
        return stage1[q][static_cast<size_t>(a)] > stage1[q][static_cast<size_t>(b)];
      return ids[static_cast<size_t>(a)] < ids[static_cast<size_t>(b)];
    };
    std::sort(rows.begin(), rows.end(), by_stage1);
    std::vector<int64_t> top(rows.begin(), rows.begin() + k);
    std::sort(top.begin(), top.end(), [&](int64_t a, int64_t b) {
      if (vtm[q][static_cast<size_t>(a)] != vtm[q][static_cast<size_t>(b)])
        return vtm[q][static_cast<size_t>(a)] > vtm[q][static_cast<size_t>(b)];
      return ids[static_cast<size_t>(a)] < ids[static_cast<size_t>(b)];
    });
    std::vector<int64_t> final_ids;
    for (int64_t r : top) final_ids.push_back(ids[static_cast<size_t>(r)]);
    for (size_t i = static_cast<size_t>(k); i < rows.size(); ++i)
      final_ids.push_back(ids[static_cast<size_t>(rows[i])]);
    out.push_back(final_ids);
  }
  return out;
}

}  // namespace

TEST_CASE("corpus encoding: unit norms, batching invariance, determinism") {
  Model<float> model(eval_cfg(), 17);
  auto manifest = manifest_of(7, 9000);
  auto c8 = encode_corpus(manifest, model, eval_data(), kVocab, 8);
  auto c1 = encode_corpus(manifest, model, eval_data(), kVocab, 1);

  REQUIRE(c8.ids.size() == 7);
  for (int64_t i = 0; i < 7; ++i) {
    double nv = 0, nt = 0;
    for (int64_t j = 0; j < 8; ++j) {
      nv += std::pow(c8.vision_index.vectors.values()[static_cast<size_t>(i * 8 + j)], 2.0);
      nt += std::pow(c8.text_index.vectors.values()[static_cast<size_t>(i * 8 + j)], 2.0);
    }
    CHECK(std::fabs(std::sqrt(nv) - 1.0) < 1e-5);
    CHECK(std::fabs(std::sqrt(nt) - 1.0) < 1e-5);
  }
  for (size_t i = 0; i < c8.vision_index.vectors.values().size(); ++i)
    CHECK(std::fabs(c8.vision_index.vectors.values()[i] - c1.vision_index.vectors.values()[i]) <
          1e-6);

  std::vector<ManifestEntry> dup{manifest[2], manifest[2]};
  auto cd = encode_corpus(dup, model, eval_data(), kVocab, 2);
  for (int64_t j = 0; j < 8; ++j)
    CHECK(cd.text_index.vectors.values()[static_cast<size_t>(j)] ==
          cd.text_index.vectors.values()[static_cast<size_t>(8 + j)]);
}

TEST_CASE("two-stage ranking core matches a brute-force oracle") {
  Rng rng(31);
  for (int trial = 0; trial < 20; ++trial) {
    int64_t n = 4 + static_cast<int64_t>(rng.below(5));  // 4..8
    int64_t k = 1 + static_cast<int64_t>(rng.below(static_cast<uint32_t>(n)));
    std::vector<int64_t> ids(static_cast<size_t>(n));
    std::iota(ids.begin(), ids.end(), 100);
    std::vector<std::vector<double>> stage1(static_cast<size_t>(n)),
        vtm(static_cast<size_t>(n));
    for (auto& row : stage1) {
      row.resize(static_cast<size_t>(n));
      for (auto& x : row) x = std::round(rng.uniform() * 8) / 8;  // force some ties
    }
    for (auto& row : vtm) {
      row.resize(static_cast<size_t>(n));
      for (auto& x : row) x = std::round(rng.uniform() * 8) / 8;
    }
    auto got = two_stage_rank(
        stage1, ids, ids, [&](int64_t q, int64_t c) { return vtm[static_cast<size_t>(q)][static_cast<size_t>(c)]; },
        k);
    auto want = brute_force_rank(stage1, vtm, ids, k);
    REQUIRE(got.size() == want.size());
    for (size_t q = 0; q < got.size(); ++q) {
      REQUIRE(got[q].ranking.size() == want[q].size());
      for (size_t i = 0; i < want[q].size(); ++i) CHECK(got[q].ranking[i].id == want[q][i]);
      // ranking is a permutation of the candidate set
      std::vector<int64_t> seen;
      for (auto& rc : got[q].ranking) seen.push_back(rc.id);
      std::sort(seen.begin(), seen.end());
      CHECK(seen == ids);
      // reranked prefix is flagged
      for (size_t i = 0; i < static_cast<size_t>(k); ++i) CHECK(got[q].ranking[i].reranked);
    }
  }

  // k = 1 keeps the stage-1 winner
  std::vector<std::vector<double>> s{{0.9, 0.1, 0.5}};
  auto res = two_stage_rank(s, {0}, {10, 11, 12}, [](int64_t, int64_t) { return 0.0; }, 1);
  CHECK(res[0].ranking[0].id == 10);

  CHECK_THROWS_AS(two_stage_rank(s, {0}, {10, 11, 12}, nullptr, 0), EvalError);
  CHECK_THROWS_AS(two_stage_rank(s, {0}, {10, 11, 12}, nullptr, 4), EvalError);
  CHECK_THROWS_AS(two_stage_rank({}, {}, {}, nullptr, 1), EvalError);
}

TEST_CASE("full rerank depends only on matching scores, ties broken by id") {
  std::vector<int64_t> ids{7, 3, 5};
  std::vector<std::vector<double>> a{{0.1, 0.2, 0.3}}, b{{0.9, 0.8, 0.7}};
  auto score = [](int64_t, int64_t c) { return c == 1 ? 0.9 : 0.4; };
  auto ra = two_stage_rank(a, {0}, ids, score, 3);
  auto rb = two_stage_rank(b, {0}, ids, score, 3);
  std::vector<int64_t> order_a, order_b;
  for (auto& rc : ra[0].ranking) order_a.push_back(rc.id);
  for (auto& rc : rb[0].ranking) order_b.push_back(rc.id);
  CHECK(order_a == order_b);
  CHECK(order_a == std::vector<int64_t>{3, 5, 7});  // 0.9 first, then tie 0.4 by id
}

TEST_CASE("recall@k") {
  auto result_of = [](std::vector<std::vector<int64_t>> rankings) {
    std::vector<QueryResult> out;
    for (size_t q = 0; q < rankings.size(); ++q) {
      QueryResult r;
      r.query_id = static_cast<int64_t>(q);
      for (int64_t id : rankings[q]) r.ranking.push_back({id, 0, 0, false});
      out.push_back(r);
    }
    return out;
  };

  std::unordered_map<int64_t, std::vector<int64_t>> truth{{0, {0}}, {1, {1}}, {2, {2}}};
  auto perfect = result_of({{0, 1, 2}, {1, 0, 2}, {2, 1, 0}});
  CHECK(recall_at_k(perfect, truth, 1) == 1.0);
  auto reversed = result_of({{2, 1, 0}, {2, 0, 1}, {0, 1, 2}});
  CHECK(recall_at_k(reversed, truth, 1) == 0.0);
  CHECK(recall_at_k(reversed, truth, 3) == 1.0);
  for (int64_t k = 1; k <= 3; ++k)
    CHECK(recall_at_k(reversed, truth, k) <= recall_at_k(reversed, truth, k + 1));

  // five captions per image: query hits if any of its caption ids is ranked
  std::unordered_map<int64_t, std::vector<int64_t>> multi{{0, {10, 11, 12, 13, 14}},
                                                          {1, {20, 21, 22, 23, 24}}};
  auto m = result_of({{99, 13, 98, 97, 96}, {99, 98, 97, 96, 20}});
  CHECK(recall_at_k(m, multi, 2) == 0.5);   // only query 0 hits within top 2
  CHECK(recall_at_k(m, multi, 5) == 1.0);

  std::unordered_map<int64_t, std::vector<int64_t>> missing{{0, {0}}};
  CHECK_THROWS_AS(recall_at_k(perfect, missing, 1), EvalError);
}

TEST_CASE("model-driven retrieval: permutations, k=1 degenerate, formatting") {
  Model<float> model(eval_cfg(), 23);
  auto corpus = encode_corpus(manifest_of(8, 9100), model, eval_data(), kVocab);

  auto res = two_stage_retrieval(corpus, model, Direction::TextToVision, 4);
  CHECK(res.queries.size() == 8);
  for (auto& q : res.queries) {
    std::vector<int64_t> seen;
    for (auto& rc : q.ranking) seen.push_back(rc.id);
    std::sort(seen.begin(), seen.end());
    CHECK(seen == corpus.ids);
  }
  CHECK(res.r1 <= res.r5);
  CHECK(res.r5 <= res.r10);

  auto r1 = two_stage_retrieval(corpus, model, Direction::VisionToText, 1);
  for (size_t q = 0; q < r1.queries.size(); ++q) {
    // with k = 1 the final winner is the stage-1 argmax
    double best = -2;
    int64_t best_id = -1;
    for (size_t c = 0; c < 8; ++c) {
      double dot = 0;
      for (int64_t j = 0; j < 8; ++j)
        dot += corpus.vision_index.vectors.values()[q * 8 + static_cast<size_t>(j)] *
               corpus.text_index.vectors.values()[c * 8 + static_cast<size_t>(j)];
      if (dot > best) {
        best = dot;
        best_id = corpus.ids[c];
      }
    }
    CHECK(r1.queries[q].ranking[0].id == best_id);
  }

  auto line = format_metrics_line(res);
  CHECK(line.rfind("dir=t2v r1=", 0) == 0);
  CHECK(line.find(" n=8") != std::string::npos);
}

TEST_CASE("PGM write and read round trip") {
  std::vector<uint8_t> px{0, 17, 255, 128, 64, 3};
  write_pgm("test_img.pgm", 3, 2, px, {"first comment", "second comment"});
  auto [w, h, back] = read_pgm("test_img.pgm");
  CHECK(w == 3);
  CHECK(h == 2);
  CHECK(back == px);
  std::remove("test_img.pgm");
}

TEST_CASE("attention heatmap export") {
  ModelConfig cfg = eval_cfg();
  Model<float> model(cfg, 29);
  auto manifest = manifest_of(1, 9200);
  auto pair = make_batch(manifest, {0}, eval_data(), kVocab);

  SUBCASE("dimensions, filenames, and pooling dominance") {
    HeatmapSpec spec;
    spec.pair_id = 42;
    spec.token_index = 1;
    auto paths = export_attention_heatmap(spec, model, pair, ".");
    REQUIRE(paths.size() == 1);  // one frame
    CHECK(paths[0] == "./42_1_0.pgm");
    auto [w, h, px] = read_pgm(paths[0]);
    CHECK(w == 4);  // sqrt(16) patches per side
    CHECK(h == 4);

    // the pooled map dominates every single head
    NoGradScope<float> ng;
    auto ve = model.vision_encode(patches_tensor<float>(pair, cfg));
    auto lens = batch_lengths(pair);
    auto fu = model.fuse(ve, model.text_encode(batch_ids(pair), lens), lens);
    const auto& attn = fu.attn_text_to_vision.back();
    const int64_t sv = attn.dim(3), kk = attn.dim(2);
    std::vector<float> pooled(static_cast<size_t>(sv), 0.f);
    for (int64_t hd = 0; hd < cfg.heads; ++hd)
      for (int64_t s = 0; s < sv; ++s) {
        float p = attn.values()[static_cast<size_t>((hd * kk + 1) * sv + s)];
        CHECK(p <= std::max(pooled[static_cast<size_t>(s)], p));
        pooled[static_cast<size_t>(s)] = std::max(pooled[static_cast<size_t>(s)], p);
      }
    std::remove(paths[0].c_str());
  }

  SUBCASE("uniform attention writes constant mid-gray") {
    // zeroing the last layer's query/key projections makes every score equal
    std::string p = "fusion.layer" + std::to_string(cfg.layers_fusion - 1) + ".t.cross";
    for (const char* part : {".q.w", ".q.b", ".k.w", ".k.b"}) {
      auto& t = model.params().get(p + part);
      std::fill(t.values().begin(), t.values().end(), 0.f);
    }
    HeatmapSpec spec;
    spec.pair_id = 7;
    auto paths = export_attention_heatmap(spec, model, pair, ".");
    auto [w, h, px] = read_pgm(paths[0]);
    for (uint8_t v : px) CHECK(v == 128);
    std::remove(paths[0].c_str());
  }

  SUBCASE("errors") {
    HeatmapSpec bad;
    bad.token_index = 99;
    CHECK_THROWS_AS(export_attention_heatmap(bad, model, pair, "."), EvalError);
    HeatmapSpec bad_layer;
    bad_layer.layer = 9;
    CHECK_THROWS_AS(export_attention_heatmap(bad_layer, model, pair, "."), EvalError);
  }
}
