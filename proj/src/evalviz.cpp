#include "glscl/evalviz.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

namespace glscl {

template <typename T>
CorpusEncodings<T> encode_corpus(const std::vector<ManifestEntry>& manifest, Model<T>& model,
                                 const DataConfig& data, const Vocabulary& vocab,
                                 int64_t batch_size) {
  if (manifest.empty()) throw EvalError("empty manifest");
  if (batch_size < 1) throw EvalError("batch size must be positive");
  NoGradScope<T> ng;

  CorpusEncodings<T> out;
  std::vector<Tensor<T>> v_tokens, v_globals, t_tokens, t_globals;
  const int64_t n = static_cast<int64_t>(manifest.size());
  for (int64_t start = 0; start < n; start += batch_size) {
    std::vector<int64_t> idx;
    for (int64_t i = start; i < std::min(n, start + batch_size); ++i) idx.push_back(i);
    PairBatch batch = make_batch(manifest, idx, data, vocab);
    for (int64_t id : batch.pair_ids) out.ids.push_back(id);
    auto lens = batch_lengths(batch);
    out.text_lengths.insert(out.text_lengths.end(), lens.begin(), lens.end());

    auto ve = model.vision_encode(patches_tensor<T>(batch, model.config()));
    auto te = model.text_encode(batch_ids(batch), lens);
    v_tokens.push_back(ve.tokens);
    v_globals.push_back(ve.global);
    t_tokens.push_back(te.tokens);
    t_globals.push_back(te.global);
  }

  out.vision.tokens = concat<T>(v_tokens, 0);
  out.vision.global = concat<T>(v_globals, 0);
  out.vision.batch = n;
  out.vision.frames = model.config().frames;
  out.text.tokens = concat<T>(t_tokens, 0);
  out.text.global = concat<T>(t_globals, 0);
  out.text.batch = n;

  out.vision_index.ids = out.ids;
  out.vision_index.vectors = l2_normalize_rows(model.project_vision(out.vision.global));
  out.text_index.ids = out.ids;
  out.text_index.vectors = l2_normalize_rows(model.project_text(out.text.global));
  return out;
}

std::vector<QueryResult> two_stage_rank(
    const std::vector<std::vector<double>>& stage1, const std::vector<int64_t>& query_ids,
    const std::vector<int64_t>& candidate_ids,
    const std::function<double(int64_t q_row, int64_t c_row)>& vtm_score, int64_t k) {
  const int64_t nq = static_cast<int64_t>(query_ids.size());
  const int64_t nc = static_cast<int64_t>(candidate_ids.size());
  if (nc == 0) throw EvalError("empty candidate set");
  if (k < 1 || k > nc)
    throw EvalError("k = " + std::to_string(k) + " outside [1, " + std::to_string(nc) + "]");
  if (static_cast<int64_t>(stage1.size()) != nq) throw EvalError("stage-1 score shape mismatch");

  std::vector<QueryResult> out(static_cast<size_t>(nq));
  for (int64_t q = 0; q < nq; ++q) {
    const auto& row = stage1[static_cast<size_t>(q)];
    if (static_cast<int64_t>(row.size()) != nc) throw EvalError("stage-1 score shape mismatch");

    std::vector<int64_t> order(static_cast<size_t>(nc));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int64_t a, int64_t b) {
      if (row[static_cast<size_t>(a)] != row[static_cast<size_t>(b)])
        return row[static_cast<size_t>(a)] > row[static_cast<size_t>(b)];
      return candidate_ids[static_cast<size_t>(a)] < candidate_ids[static_cast<size_t>(b)];
    });

    std::vector<RankedCandidate> top(static_cast<size_t>(k));
    for (int64_t i = 0; i < k; ++i) {
      int64_t c = order[static_cast<size_t>(i)];
      top[static_cast<size_t>(i)] = {candidate_ids[static_cast<size_t>(c)],
                                     row[static_cast<size_t>(c)], vtm_score(q, c), true};
    }
    std::stable_sort(top.begin(), top.end(), [](const RankedCandidate& a,
                                                const RankedCandidate& b) {
      if (a.vtm != b.vtm) return a.vtm > b.vtm;
      return a.id < b.id;
    });

    QueryResult& res = out[static_cast<size_t>(q)];
    res.query_id = query_ids[static_cast<size_t>(q)];
    res.ranking = std::move(top);
    for (int64_t i = k; i < nc; ++i) {
      int64_t c = order[static_cast<size_t>(i)];
      res.ranking.push_back(
          {candidate_ids[static_cast<size_t>(c)], row[static_cast<size_t>(c)], 0.0, false});
    }
  }
  return out;
}

template <typename T>
RetrievalResult two_stage_retrieval(const CorpusEncodings<T>& corpus, Model<T>& model,
                                    Direction direction, int64_t k) {
  NoGradScope<T> ng;
  const int64_t n = static_cast<int64_t>(corpus.ids.size());
  const bool t2v = direction == Direction::TextToVision;
  const Tensor<T>& qv = t2v ? corpus.text_index.vectors : corpus.vision_index.vectors;
  const Tensor<T>& cv = t2v ? corpus.vision_index.vectors : corpus.text_index.vectors;

  Tensor<T> sim = matmul(qv, transpose_last2(cv));
  std::vector<std::vector<double>> stage1(static_cast<size_t>(n),
                                          std::vector<double>(static_cast<size_t>(n)));
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < n; ++j)
      stage1[static_cast<size_t>(i)][static_cast<size_t>(j)] =
          static_cast<double>(sim.values()[static_cast<size_t>(i * n + j)]);

  // Matching probabilities are computed lazily per query over its top k,
  // batched through the fusion encoder in one shot.
  std::vector<double> cache;
  std::vector<int64_t> cache_rows;
  auto rerank_batch = [&](int64_t q, const std::vector<int64_t>& cands) {
    std::vector<int64_t> q_rows(cands.size(), q);
    const std::vector<int64_t>& v_rows = t2v ? cands : q_rows;
    const std::vector<int64_t>& t_rows = t2v ? q_rows : cands;

    EncoderOutput<T> ve;
    ve.tokens = index_select(corpus.vision.tokens, 0, v_rows);
    ve.global = index_select(corpus.vision.global, 0, v_rows);
    ve.batch = static_cast<int64_t>(cands.size());
    ve.frames = corpus.vision.frames;
    EncoderOutput<T> te;
    te.tokens = index_select(corpus.text.tokens, 0, t_rows);
    te.global = index_select(corpus.text.global, 0, t_rows);
    te.batch = ve.batch;
    std::vector<int64_t> lens;
    for (int64_t r : t_rows) lens.push_back(corpus.text_lengths[static_cast<size_t>(r)]);

    auto fu = model.fuse(ve, te, lens);
    Tensor<T> logits = model.vtm_logits(fu.vision_global, fu.text_global);
    std::vector<double> probs(cands.size());
    for (size_t i = 0; i < cands.size(); ++i) {
      double l0 = logits.values()[2 * i], l1 = logits.values()[2 * i + 1];
      double mx = std::max(l0, l1);
      probs[i] = std::exp(l1 - mx) / (std::exp(l0 - mx) + std::exp(l1 - mx));
    }
    return probs;
  };

  // two_stage_rank calls vtm_score per (q, c); group the calls per query
  int64_t cached_q = -1;
  std::unordered_map<int64_t, double> per_q;
  auto vtm_score = [&](int64_t q, int64_t c) {
    if (q != cached_q) {
      // recompute this query's top-k set exactly as the ranking core does
      const auto& row = stage1[static_cast<size_t>(q)];
      std::vector<int64_t> order(static_cast<size_t>(n));
      std::iota(order.begin(), order.end(), 0);
      std::stable_sort(order.begin(), order.end(), [&](int64_t a, int64_t b) {
        if (row[static_cast<size_t>(a)] != row[static_cast<size_t>(b)])
          return row[static_cast<size_t>(a)] > row[static_cast<size_t>(b)];
        return corpus.ids[static_cast<size_t>(a)] < corpus.ids[static_cast<size_t>(b)];
      });
      std::vector<int64_t> cands(order.begin(), order.begin() + k);
      auto probs = rerank_batch(q, cands);
      per_q.clear();
      for (size_t i = 0; i < cands.size(); ++i) per_q[cands[i]] = probs[i];
      cached_q = q;
    }
    return per_q.at(c);
  };

  RetrievalResult res;
  res.direction = direction;
  res.queries = two_stage_rank(stage1, corpus.ids, corpus.ids, vtm_score, k);

  std::unordered_map<int64_t, std::vector<int64_t>> truth;
  for (int64_t id : corpus.ids) truth[id] = {id};
  res.r1 = recall_at_k(res.queries, truth, 1);
  res.r5 = recall_at_k(res.queries, truth, 5);
  res.r10 = recall_at_k(res.queries, truth, 10);
  return res;
}

double recall_at_k(const std::vector<QueryResult>& queries,
                   const std::unordered_map<int64_t, std::vector<int64_t>>& truth,
                   int64_t k) {
  if (queries.empty()) throw EvalError("no queries");
  int64_t hits = 0;
  for (const auto& q : queries) {
    auto it = truth.find(q.query_id);
    if (it == truth.end() || it->second.empty())
      throw EvalError("query " + std::to_string(q.query_id) + " has no ground truth");
    int64_t top = std::min<int64_t>(k, static_cast<int64_t>(q.ranking.size()));
    bool hit = false;
    for (int64_t i = 0; i < top && !hit; ++i)
      for (int64_t want : it->second)
        if (q.ranking[static_cast<size_t>(i)].id == want) {
          hit = true;
          break;
        }
    hits += hit;
  }
  return static_cast<double>(hits) / static_cast<double>(queries.size());
}

std::string format_metrics_line(const RetrievalResult& result) {
  char buf[128];
  std::snprintf(buf, sizeof(buf), "dir=%s r1=%.4f r5=%.4f r10=%.4f n=%zu",
                result.direction == Direction::TextToVision ? "t2v" : "v2t", result.r1,
                result.r5, result.r10, result.queries.size());
  return buf;
}

void write_pgm(const std::string& path, int width, int height,
               const std::vector<uint8_t>& pixels, const std::vector<std::string>& comments) {
  if (static_cast<size_t>(width) * static_cast<size_t>(height) != pixels.size())
    throw EvalError("pixel count does not match dimensions");
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw EvalError("cannot open " + path + " for writing");
  f << "P5\n";
  for (const auto& c : comments) f << "# " << c << "\n";
  f << width << " " << height << "\n255\n";
  f.write(reinterpret_cast<const char*>(pixels.data()),
          static_cast<std::streamsize>(pixels.size()));
}

std::tuple<int, int, std::vector<uint8_t>> read_pgm(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw EvalError("cannot open " + path);
  std::string magic;
  f >> magic;
  if (magic != "P5") throw EvalError("not a binary PGM: " + path);
  auto skip = [&]() {
    f >> std::ws;
    while (f.peek() == '#') {
      std::string line;
      std::getline(f, line);
      f >> std::ws;
    }
  };
  int width, height, maxval;
  skip();
  f >> width;
  skip();
  f >> height;
  skip();
  f >> maxval;
  f.get();  // single whitespace before raster
  if (maxval != 255) throw EvalError("unsupported maxval");
  std::vector<uint8_t> pixels(static_cast<size_t>(width) * static_cast<size_t>(height));
  f.read(reinterpret_cast<char*>(pixels.data()), static_cast<std::streamsize>(pixels.size()));
  if (!f) throw EvalError("truncated PGM raster in " + path);
  return {width, height, pixels};
}

template <typename T>
std::vector<std::string> export_attention_heatmap(const HeatmapSpec& spec, Model<T>& model,
                                                  const PairBatch& pair,
                                                  const std::string& out_dir) {
  if (pair.size() != 1) throw EvalError("heatmap export takes exactly one pair");
  const ModelConfig& cfg = model.config();
  const int64_t n = cfg.patches();
  const int64_t side = static_cast<int64_t>(std::llround(std::sqrt(static_cast<double>(n))));
  if (side * side != n)
    throw EvalError("patch count " + std::to_string(n) + " is not a square grid");
  int layer = spec.layer < 0 ? static_cast<int>(cfg.layers_fusion) - 1 : spec.layer;
  if (layer < 0 || layer >= cfg.layers_fusion) throw EvalError("fusion layer out of range");

  NoGradScope<T> ng;
  auto lens = batch_lengths(pair);
  if (spec.token_index < 0 || spec.token_index >= lens[0])
    throw EvalError("token index " + std::to_string(spec.token_index) +
                    " outside the caption of length " + std::to_string(lens[0]));
  auto ve = model.vision_encode(patches_tensor<T>(pair, cfg));
  auto fu = model.fuse(ve, model.text_encode(batch_ids(pair), lens), lens);

  // [1, H, K, Sv] -> chosen text row, max over heads
  const Tensor<T>& attn = fu.attn_text_to_vision[static_cast<size_t>(layer)];
  const int64_t heads = attn.dim(1), sv = attn.dim(3), kk = attn.dim(2);
  std::vector<double> row(static_cast<size_t>(sv), 0.0);
  double row_sum = 0;
  for (int64_t h = 0; h < heads; ++h) {
    double head_sum = 0;
    for (int64_t s = 0; s < sv; ++s) {
      double p = attn.values()[static_cast<size_t>((h * kk + spec.token_index) * sv + s)];
      head_sum += p;
      row[static_cast<size_t>(s)] = std::max(row[static_cast<size_t>(s)], p);
    }
    row_sum = head_sum;
    if (std::fabs(head_sum - 1.0) > 1e-5)
      throw EvalError("attention row does not sum to 1");
  }
  (void)row_sum;

  std::vector<std::string> paths;
  std::string header1 = "fusion layer " + std::to_string(layer) + ", max pool over " +
                        std::to_string(heads) + " heads";
  std::string header2 = "min-max scaled to [0,255], frame [CLS] column dropped";
  for (int64_t f = 0; f < cfg.frames; ++f) {
    std::vector<double> grid(static_cast<size_t>(n));
    for (int64_t p = 0; p < n; ++p)
      grid[static_cast<size_t>(p)] = row[static_cast<size_t>(f * (n + 1) + 1 + p)];
    double lo = *std::min_element(grid.begin(), grid.end());
    double hi = *std::max_element(grid.begin(), grid.end());
    std::vector<uint8_t> pixels(grid.size());
    for (size_t i = 0; i < grid.size(); ++i)
      pixels[i] = hi > lo ? static_cast<uint8_t>(std::llround((grid[i] - lo) / (hi - lo) * 255.0))
                          : uint8_t(128);
    std::string path = out_dir + "/" + std::to_string(spec.pair_id) + "_" +
                       std::to_string(spec.token_index) + "_" + std::to_string(f) + ".pgm";
    write_pgm(path, static_cast<int>(side), static_cast<int>(side), pixels, {header1, header2});
    paths.push_back(path);
  }
  return paths;
}

#define GLSCL_EVAL_INSTANTIATE(T)                                                         \
  template CorpusEncodings<T> encode_corpus<T>(const std::vector<ManifestEntry>&,         \
                                               Model<T>&, const DataConfig&,              \
                                               const Vocabulary&, int64_t);               \
  template RetrievalResult two_stage_retrieval<T>(const CorpusEncodings<T>&, Model<T>&,   \
                                                  Direction, int64_t);                    \
  template std::vector<std::string> export_attention_heatmap<T>(                          \
      const HeatmapSpec&, Model<T>&, const PairBatch&, const std::string&);

GLSCL_EVAL_INSTANTIATE(float)
GLSCL_EVAL_INSTANTIATE(double)

}  // namespace glscl
