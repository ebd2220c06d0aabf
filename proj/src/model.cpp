#include "glscl/model.hpp"

#include <cmath>
#include <cstring>

namespace glscl {

void ModelConfig::validate() const {
  if (dim <= 0 || heads <= 0 || dim % heads != 0)
    throw ConfigError("dim " + std::to_string(dim) + " must be a positive multiple of heads " +
                      std::to_string(heads));
  if (layers_vision <= 0 || layers_text <= 0 || layers_fusion <= 0)
    throw ConfigError("layer counts must be positive");
  if (ffn_mult <= 0) throw ConfigError("ffn_mult must be positive");
  if (frames <= 0) throw ConfigError("frames must be positive");
  if (patch_size <= 0 || image_size <= 0 || image_size % patch_size != 0)
    throw ConfigError("image_size " + std::to_string(image_size) +
                      " must be a positive multiple of patch_size " + std::to_string(patch_size));
  if (max_text_len < 2) throw ConfigError("max_text_len must be at least 2");
  if (vocab_size < Vocabulary::kReserved + 1)
    throw ConfigError("vocab_size must cover the special tokens");
  if (proj_dim <= 0) throw ConfigError("proj_dim must be positive");
}

template <typename T>
Tensor<T>& ParamStore<T>::add(const std::string& name, Shape shape, ParamGroup group) {
  if (index.count(name)) throw ConfigError("duplicate parameter name: " + name);
  index[name] = entries.size();
  entries.push_back({name, Tensor<T>::zeros(std::move(shape)), group});
  entries.back().tensor.set_requires_grad(true);
  return entries.back().tensor;
}

template <typename T>
Tensor<T>& ParamStore<T>::get(const std::string& name) {
  auto it = index.find(name);
  if (it == index.end()) throw ConfigError("unknown parameter: " + name);
  return entries[it->second].tensor;
}

template <typename T>
const Tensor<T>& ParamStore<T>::get(const std::string& name) const {
  auto it = index.find(name);
  if (it == index.end()) throw ConfigError("unknown parameter: " + name);
  return entries[it->second].tensor;
}

namespace {

template <typename T>
void fill_trunc_normal(Tensor<T>& t, Rng& rng, double stddev) {
  for (auto& v : t.values()) v = static_cast<T>(rng.trunc_normal(stddev));
}

constexpr double kInitStd = 0.02;

}  // namespace

template <typename T>
Model<T>::Model(ModelConfig cfg, uint64_t init_seed) : cfg_(std::move(cfg)) {
  cfg_.validate();
  Rng rng(init_seed);
  const int64_t d = cfg_.dim;
  const int64_t f = d * cfg_.ffn_mult;

  auto weight = [&](const std::string& name, Shape shape, ParamGroup g) {
    auto& t = params_.add(name, std::move(shape), g);
    fill_trunc_normal(t, rng, kInitStd);
  };
  auto bias = [&](const std::string& name, int64_t n, ParamGroup g) {
    params_.add(name, {n}, g);  // zeros
  };
  auto lnorm = [&](const std::string& prefix, ParamGroup g) {
    auto& gamma = params_.add(prefix + ".g", {d}, g);
    std::fill(gamma.values().begin(), gamma.values().end(), T(1));
    params_.add(prefix + ".b", {d}, g);
  };
  auto lin = [&](const std::string& prefix, int64_t din, int64_t dout, ParamGroup g) {
    weight(prefix + ".w", {din, dout}, g);
    bias(prefix + ".b", dout, g);
  };
  auto attn = [&](const std::string& prefix, ParamGroup g) {
    lin(prefix + ".q", d, d, g);
    lin(prefix + ".k", d, d, g);
    lin(prefix + ".v", d, d, g);
    lin(prefix + ".o", d, d, g);
  };
  auto ffn_params = [&](const std::string& prefix, ParamGroup g) {
    lin(prefix + ".fc1", d, f, g);
    lin(prefix + ".fc2", f, d, g);
  };

  // vision encoder
  const ParamGroup U = ParamGroup::UniModal;
  lin("vision.patch_embed", cfg_.patch_dim(), d, U);
  weight("vision.cls", {d}, U);
  weight("vision.mask_token", {d}, U);
  weight("vision.pos_spatial", {cfg_.patches() + 1, d}, U);
  weight("vision.pos_temporal", {cfg_.frames, d}, U);
  for (int64_t l = 0; l < cfg_.layers_vision; ++l) {
    std::string p = "vision.block" + std::to_string(l);
    lnorm(p + ".ln1", U);
    attn(p + ".temporal", U);
    attn(p + ".spatial", U);
    lnorm(p + ".ln2", U);
    ffn_params(p + ".ffn", U);
  }
  lnorm("vision.ln_f", U);

  // text encoder
  weight("text.tok_emb", {cfg_.vocab_size, d}, U);
  weight("text.pos_emb", {cfg_.max_text_len, d}, U);
  weight("text.mask_token", {d}, U);
  for (int64_t l = 0; l < cfg_.layers_text; ++l) {
    std::string p = "text.block" + std::to_string(l);
    lnorm(p + ".ln1", U);
    attn(p + ".attn", U);
    lnorm(p + ".ln2", U);
    ffn_params(p + ".ffn", U);
  }
  lnorm("text.ln_f", U);

  // dual-stream fusion encoder
  const ParamGroup F = ParamGroup::Fusion;
  for (int64_t l = 0; l < cfg_.layers_fusion; ++l) {
    std::string p = "fusion.layer" + std::to_string(l);
    for (const std::string s : {".v", ".t"}) {
      lnorm(p + s + ".ln_self", F);
      attn(p + s + ".self", F);
      lnorm(p + s + ".ln_cross_q", F);
      lnorm(p + s + ".ln_cross_kv", F);
      attn(p + s + ".cross", F);
      lnorm(p + s + ".ln_ffn", F);
      ffn_params(p + s + ".ffn", F);
    }
  }
  lnorm("fusion.ln_f_v", F);
  lnorm("fusion.ln_f_t", F);

  // heads
  const ParamGroup H = ParamGroup::Head;
  weight("heads.proj_v.w", {d, cfg_.proj_dim}, H);
  weight("heads.proj_t.w", {d, cfg_.proj_dim}, H);
  lin("heads.vtm", 2 * d, 2, H);
  lin("heads.mlm", d, cfg_.vocab_size, H);
  auto& tau = params_.add("heads.log_tau", {1}, H);
  tau.values()[0] = static_cast<T>(std::log(0.07));
}

template <typename T>
Tensor<T> Model<T>::linear(const Tensor<T>& x, const std::string& name, bool with_bias) const {
  Tensor<T> x2 = x;
  Shape orig = x.shape();
  if (x.rank() == 3) x2 = reshape(x, {orig[0] * orig[1], orig[2]});
  Tensor<T> y = matmul(x2, params_.get(name + ".w"));
  if (with_bias) y = add(y, params_.get(name + ".b"));
  if (x.rank() == 3) y = reshape(y, {orig[0], orig[1], y.dim(-1)});
  return y;
}

template <typename T>
Tensor<T> Model<T>::norm(const Tensor<T>& x, const std::string& name) const {
  return layer_norm(x, params_.get(name + ".g"), params_.get(name + ".b"));
}

template <typename T>
Tensor<T> Model<T>::ffn(const Tensor<T>& x, const std::string& prefix) const {
  return linear(gelu(linear(x, prefix + ".fc1")), prefix + ".fc2");
}

template <typename T>
Tensor<T> Model<T>::mha(const Tensor<T>& queries, const Tensor<T>& keys_values,
                        const std::string& prefix, const std::vector<uint8_t>* key_valid,
                        Tensor<T>* probs_out) const {
  const int64_t b = queries.dim(0), qs = queries.dim(1), ks = keys_values.dim(1);
  const int64_t h = cfg_.heads, dh = cfg_.dim / h;

  auto split = [&](Tensor<T> t, int64_t seq) {
    t = reshape(t, {b, seq, h, dh});
    t = permute(t, {0, 2, 1, 3});
    return reshape(t, {b * h, seq, dh});
  };
  Tensor<T> q = split(linear(queries, prefix + ".q"), qs);
  Tensor<T> k = split(linear(keys_values, prefix + ".k"), ks);
  Tensor<T> v = split(linear(keys_values, prefix + ".v"), ks);

  Tensor<T> scores = scale(bmm(q, transpose_last2(k)), static_cast<T>(1.0 / std::sqrt(double(dh))));

  std::vector<uint8_t> expanded;
  if (key_valid) {
    if (static_cast<int64_t>(key_valid->size()) != b * ks)
      throw DimensionError("key mask size mismatch");
    expanded.resize(static_cast<size_t>(b * h * qs * ks));
    for (int64_t i = 0; i < b; ++i) {
      const uint8_t* row = key_valid->data() + i * ks;
      for (int64_t j = 0; j < h * qs; ++j)
        std::memcpy(expanded.data() + (i * h * qs + j) * ks, row, static_cast<size_t>(ks));
    }
  }
  Tensor<T> probs = softmax_masked(scores, key_valid ? &expanded : nullptr);
  if (probs_out) *probs_out = reshape(probs, {b, h, qs, ks});

  Tensor<T> ctx = bmm(probs, v);
  ctx = reshape(ctx, {b, h, qs, dh});
  ctx = permute(ctx, {0, 2, 1, 3});
  ctx = reshape(ctx, {b, qs, h * dh});
  return linear(ctx, prefix + ".o");
}

template <typename T>
std::vector<int64_t> Model<T>::frame_cls_indices() const {
  std::vector<int64_t> idx(cfg_.frames);
  for (int64_t i = 0; i < cfg_.frames; ++i) idx[i] = i * (cfg_.patches() + 1);
  return idx;
}

template <typename T>
Tensor<T> Model<T>::visual_block(const Tensor<T>& x, int layer, int64_t batch) const {
  const int64_t n = cfg_.patches(), m = cfg_.frames, d = cfg_.dim;
  std::string p = "vision.block" + std::to_string(layer);
  std::vector<int64_t> cls_idx = frame_cls_indices();

  Tensor<T> xn = norm(x, p + ".ln1");
  // Temporal attention: frame [CLS] queries over every token of the clip.
  Tensor<T> cls_q = index_select(xn, 1, cls_idx);             // [B, M, D]
  Tensor<T> t_out = mha(cls_q, xn, p + ".temporal", nullptr);
  // Spatial attention: patch queries over their own frame.
  Tensor<T> xn_f = reshape(xn, {batch * m, n + 1, d});
  Tensor<T> s_q = slice(xn_f, 1, 1, n);                       // [B*M, N, D]
  Tensor<T> s_out = mha(s_q, xn_f, p + ".spatial", nullptr);

  Tensor<T> cls_new = add(index_select(x, 1, cls_idx), t_out);
  cls_new = reshape(cls_new, {batch * m, 1, d});
  Tensor<T> patch_new = add(slice(reshape(x, {batch * m, n + 1, d}), 1, 1, n), s_out);
  Tensor<T> y = reshape(concat<T>({cls_new, patch_new}, 1), {batch, m * (n + 1), d});

  return add(y, ffn(norm(y, p + ".ln2"), p + ".ffn"));
}

template <typename T>
EncoderOutput<T> Model<T>::vision_encode(
    const Tensor<T>& patches, const std::vector<std::vector<int64_t>>* mask_rows) const {
  const int64_t n = cfg_.patches(), m = cfg_.frames, d = cfg_.dim, pd = cfg_.patch_dim();
  if (patches.rank() != 4 || patches.dim(1) != m || patches.dim(2) != n ||
      patches.dim(3) != pd)
    throw DimensionError("vision input must be [B, " + std::to_string(m) + ", " +
                         std::to_string(n) + ", " + std::to_string(pd) + "], got " +
                         shape_str(patches.shape()));
  const int64_t b = patches.dim(0);

  Tensor<T> x = linear(reshape(patches, {b * m * n, pd}), "vision.patch_embed");
  if (mask_rows) {
    if (static_cast<int64_t>(mask_rows->size()) != b)
      throw DimensionError("mask row list size mismatch");
    std::vector<int64_t> rows;
    for (int64_t i = 0; i < b; ++i)
      for (int64_t pos : (*mask_rows)[i]) {
        if (pos < 0 || pos >= m * n) throw IndexError("vision mask position out of range");
        rows.push_back(i * m * n + pos);
      }
    if (!rows.empty()) x = replace_rows(x, rows, params_.get("vision.mask_token"));
  }

  x = reshape(x, {b * m, n, d});
  Tensor<T> cls = add(Tensor<T>::zeros({b * m, 1, d}),
                      reshape(params_.get("vision.cls"), {1, 1, d}));
  x = concat<T>({cls, x}, 1);                                 // [B*M, N+1, D]
  x = add(x, params_.get("vision.pos_spatial"));
  x = reshape(x, {b, m, n + 1, d});
  x = add(x, reshape(params_.get("vision.pos_temporal"), {m, 1, d}));
  x = reshape(x, {b, m * (n + 1), d});

  for (int64_t l = 0; l < cfg_.layers_vision; ++l)
    x = visual_block(x, static_cast<int>(l), b);
  x = norm(x, "vision.ln_f");

  EncoderOutput<T> out;
  out.tokens = x;
  out.global = mean_axis(index_select(x, 1, frame_cls_indices()), 1);
  out.batch = b;
  out.frames = static_cast<int64_t>(m);
  return out;
}

template <typename T>
EncoderOutput<T> Model<T>::text_encode(
    const std::vector<std::vector<int64_t>>& ids, const std::vector<int64_t>& lengths,
    const std::vector<std::vector<int64_t>>* mask_rows) const {
  const int64_t b = static_cast<int64_t>(ids.size()), k = cfg_.max_text_len, d = cfg_.dim;
  if (lengths.size() != ids.size()) throw DimensionError("lengths size mismatch");

  std::vector<int64_t> flat;
  flat.reserve(static_cast<size_t>(b * k));
  for (int64_t i = 0; i < b; ++i) {
    if (static_cast<int64_t>(ids[i].size()) != k)
      throw DimensionError("text sample " + std::to_string(i) + " has length " +
                           std::to_string(ids[i].size()) + ", expected " + std::to_string(k));
    if (lengths[i] < 1 || lengths[i] > k) throw IndexError("text length out of range");
    flat.insert(flat.end(), ids[i].begin(), ids[i].end());
  }

  Tensor<T> x = embedding(params_.get("text.tok_emb"), flat);  // [B*K, D]
  if (mask_rows) {
    if (static_cast<int64_t>(mask_rows->size()) != b)
      throw DimensionError("mask row list size mismatch");
    std::vector<int64_t> rows;
    for (int64_t i = 0; i < b; ++i)
      for (int64_t pos : (*mask_rows)[i]) {
        if (pos < 1 || pos >= lengths[i]) throw IndexError("text mask position out of range");
        rows.push_back(i * k + pos);
      }
    if (!rows.empty()) x = replace_rows(x, rows, params_.get("text.mask_token"));
  }
  x = add(reshape(x, {b, k, d}), params_.get("text.pos_emb"));

  std::vector<uint8_t> valid = key_valid_mask(lengths, k);
  for (int64_t l = 0; l < cfg_.layers_text; ++l) {
    std::string p = "text.block" + std::to_string(l);
    Tensor<T> xn = norm(x, p + ".ln1");
    x = add(x, mha(xn, xn, p + ".attn", &valid));
    x = add(x, ffn(norm(x, p + ".ln2"), p + ".ffn"));
  }
  x = norm(x, "text.ln_f");

  EncoderOutput<T> out;
  out.tokens = x;
  out.global = reshape(index_select(x, 1, {0}), {b, d});
  out.batch = b;
  return out;
}

template <typename T>
FusionOutput<T> Model<T>::fuse(const EncoderOutput<T>& vision, const EncoderOutput<T>& text,
                               const std::vector<int64_t>& text_lengths) const {
  const int64_t b = vision.batch, k = cfg_.max_text_len;
  if (text.batch != b) throw DimensionError("fusion batch mismatch");
  std::vector<uint8_t> text_valid = key_valid_mask(text_lengths, k);

  Tensor<T> v = vision.tokens;
  Tensor<T> t = text.tokens;
  FusionOutput<T> out;

  for (int64_t l = 0; l < cfg_.layers_fusion; ++l) {
    std::string p = "fusion.layer" + std::to_string(l);
    Tensor<T> vn = norm(v, p + ".v.ln_self");
    Tensor<T> tn = norm(t, p + ".t.ln_self");
    Tensor<T> vs = add(v, mha(vn, vn, p + ".v.self", nullptr));
    Tensor<T> ts = add(t, mha(tn, tn, p + ".t.self", &text_valid));
    // Cross-attention reads the other stream's post-self-attention state.
    Tensor<T> probs_v2t, probs_t2v;
    Tensor<T> vc = add(vs, mha(norm(vs, p + ".v.ln_cross_q"), norm(ts, p + ".v.ln_cross_kv"),
                               p + ".v.cross", &text_valid, &probs_v2t));
    Tensor<T> tc = add(ts, mha(norm(ts, p + ".t.ln_cross_q"), norm(vs, p + ".t.ln_cross_kv"),
                               p + ".t.cross", nullptr, &probs_t2v));
    v = add(vc, ffn(norm(vc, p + ".v.ln_ffn"), p + ".v.ffn"));
    t = add(tc, ffn(norm(tc, p + ".t.ln_ffn"), p + ".t.ffn"));
    out.attn_vision_to_text.push_back(probs_v2t);
    out.attn_text_to_vision.push_back(probs_t2v);
  }
  v = norm(v, "fusion.ln_f_v");
  t = norm(t, "fusion.ln_f_t");

  out.vision_tokens = v;
  out.text_tokens = t;
  if (cfg_.vision_global == VisionGlobalMode::FrameCls) {
    std::vector<int64_t> idx((size_t)vision.frames);
    int64_t per = v.dim(1) / vision.frames;
    for (int64_t i = 0; i < vision.frames; ++i) idx[static_cast<size_t>(i)] = i * per;
    out.vision_global = mean_axis(index_select(v, 1, idx), 1);
  } else {
    out.vision_global = mean_axis(v, 1);
  }
  out.text_global = reshape(index_select(t, 1, {0}), {b, cfg_.dim});
  return out;
}

template <typename T>
Tensor<T> Model<T>::project_vision(const Tensor<T>& global) const {
  return matmul(global, params_.get("heads.proj_v.w"));
}

template <typename T>
Tensor<T> Model<T>::project_text(const Tensor<T>& global) const {
  return matmul(global, params_.get("heads.proj_t.w"));
}

template <typename T>
Tensor<T> Model<T>::vtm_logits(const Tensor<T>& vision_global,
                               const Tensor<T>& text_global) const {
  return linear(concat<T>({vision_global, text_global}, 1), "heads.vtm");
}

template <typename T>
Tensor<T> Model<T>::mlm_logits(const Tensor<T>& token_features) const {
  return linear(token_features, "heads.mlm");
}

template <typename T>
Tensor<T> Model<T>::cl_temperature() const {
  return clamp(exp_t(params_.get("heads.log_tau")), T(0.01), T(1));
}

template <typename T>
Tensor<T> patches_tensor(const PairBatch& batch, const ModelConfig& cfg) {
  const int64_t b = batch.size(), m = cfg.frames, n = cfg.patches(), pd = cfg.patch_dim();
  std::vector<T> values;
  values.reserve(static_cast<size_t>(b * m * n * pd));
  for (const auto& v : batch.vision) {
    if (v.frames != m)
      throw DimensionError("sample has " + std::to_string(v.frames) + " frames, model expects " +
                           std::to_string(m));
    auto p = patchify(v, static_cast<int>(cfg.patch_size));
    values.insert(values.end(), p.begin(), p.end());
  }
  return Tensor<T>::from({b, m, n, pd}, std::move(values));
}

std::vector<std::vector<int64_t>> batch_ids(const PairBatch& batch) {
  std::vector<std::vector<int64_t>> out;
  out.reserve(batch.text.size());
  for (const auto& t : batch.text) out.push_back(t.ids);
  return out;
}

std::vector<int64_t> batch_lengths(const PairBatch& batch) {
  std::vector<int64_t> out;
  out.reserve(batch.text.size());
  for (const auto& t : batch.text) out.push_back(t.valid_len);
  return out;
}

std::vector<uint8_t> key_valid_mask(const std::vector<int64_t>& lengths, int64_t ks) {
  std::vector<uint8_t> mask(lengths.size() * static_cast<size_t>(ks), 0);
  for (size_t i = 0; i < lengths.size(); ++i)
    for (int64_t j = 0; j < lengths[i] && j < ks; ++j)
      mask[i * static_cast<size_t>(ks) + static_cast<size_t>(j)] = 1;
  return mask;
}

template struct ParamStore<float>;
template struct ParamStore<double>;
template class Model<float>;
template class Model<double>;
template Tensor<float> patches_tensor<float>(const PairBatch&, const ModelConfig&);
template Tensor<double> patches_tensor<double>(const PairBatch&, const ModelConfig&);

}  // namespace glscl
