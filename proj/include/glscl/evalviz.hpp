#pragma once

#include <functional>
#include <string>
#include <tuple>
#include <unordered_map>
#include <vector>

#include "glscl/model.hpp"

// Zero-shot retrieval (cosine filtering, then matching-head reranking of the
// top k) and cross-attention heatmap export.

namespace glscl {

struct EvalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

template <typename T>
struct EmbeddingIndex {
  std::vector<int64_t> ids;
  Tensor<T> vectors;  // [n, d_c], rows L2-normalized
};

// Uni-modal encodings of a whole corpus, kept for fusion reranking, plus the
// projected and normalized index vectors used for stage-1 ranking.
template <typename T>
struct CorpusEncodings {
  std::vector<int64_t> ids;
  EncoderOutput<T> vision;
  EncoderOutput<T> text;
  std::vector<int64_t> text_lengths;
  EmbeddingIndex<T> vision_index, text_index;
};

template <typename T>
CorpusEncodings<T> encode_corpus(const std::vector<ManifestEntry>& manifest, Model<T>& model,
                                 const DataConfig& data, const Vocabulary& vocab,
                                 int64_t batch_size = 8);

enum class Direction { TextToVision, VisionToText };

struct RankedCandidate {
  int64_t id = 0;
  double stage1 = 0;
  double vtm = 0;      // matching probability; meaningful when reranked
  bool reranked = false;
};

struct QueryResult {
  int64_t query_id = 0;
  std::vector<RankedCandidate> ranking;  // final order
};

struct RetrievalResult {
  Direction direction = Direction::TextToVision;
  std::vector<QueryResult> queries;
  double r1 = 0, r5 = 0, r10 = 0;
};

// Ranking core: stage-1 scores pick the top k per query, `vtm_score` reranks
// them (descending, ties by lower candidate id), the rest follow in stage-1
// order. Exposed separately so tests can drive it with hand-set scores.
std::vector<QueryResult> two_stage_rank(
    const std::vector<std::vector<double>>& stage1, const std::vector<int64_t>& query_ids,
    const std::vector<int64_t>& candidate_ids,
    const std::function<double(int64_t q_row, int64_t c_row)>& vtm_score, int64_t k);

template <typename T>
RetrievalResult two_stage_retrieval(const CorpusEncodings<T>& corpus, Model<T>& model,
                                    Direction direction, int64_t k);

// Fraction of queries with at least one true candidate in the top k.
double recall_at_k(const std::vector<QueryResult>& queries,
                   const std::unordered_map<int64_t, std::vector<int64_t>>& truth,
                   int64_t k);

std::string format_metrics_line(const RetrievalResult& result);

struct HeatmapSpec {
  int64_t pair_id = 0;
  int64_t token_index = 0;  // 0 targets the text [CLS] query
  int layer = -1;           // fusion layer; -1 = last
};

// Writes one PGM per frame from the text-to-vision cross-attention row of
// the chosen token: max-pooled over heads, frame-[CLS] key column dropped,
// min-max scaled to [0,255] (constant rows write mid-gray 128).
// Returns the written paths, `<pair>_<token>_<frame>.pgm` under out_dir.
template <typename T>
std::vector<std::string> export_attention_heatmap(const HeatmapSpec& spec, Model<T>& model,
                                                  const PairBatch& pair,
                                                  const std::string& out_dir);

// Binary (P5) PGM helpers.
void write_pgm(const std::string& path, int width, int height,
               const std::vector<uint8_t>& pixels, const std::vector<std::string>& comments);
std::tuple<int, int, std::vector<uint8_t>> read_pgm(const std::string& path);

}  // namespace glscl
