#include "glscl/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

namespace glscl {

namespace {

const char* kShapeNames[] = {"circle", "square", "triangle"};
const char* kColorNames[] = {"red", "green", "blue"};
const char* kMotionNames[] = {"still", "left", "right", "up", "down"};

std::vector<std::string> split_words(const std::string& s) {
  std::vector<std::string> out;
  std::istringstream is(s);
  std::string w;
  while (is >> w) out.push_back(w);
  return out;
}

// Draw one shape into a P x P cell at pixel origin (oy, ox).
void draw_shape(std::vector<float>& pixels, int frame, int h, int w, int oy, int ox,
                int p, ShapeKind shape, ColorKind color) {
  int chan = static_cast<int>(color);
  int m = std::max(1, p / 8);
  double center = (p - 1) / 2.0;
  double radius = p * 0.375;
  for (int y = 0; y < p; ++y) {
    for (int x = 0; x < p; ++x) {
      bool inside = false;
      switch (shape) {
        case ShapeKind::Circle: {
          double dy = y - center, dx = x - center;
          inside = dy * dy + dx * dx <= radius * radius;
          break;
        }
        case ShapeKind::Square:
          inside = y >= m && y <= p - 1 - m && x >= m && x <= p - 1 - m;
          break;
        case ShapeKind::Triangle: {
          if (y >= m && y <= p - 1 - m) {
            double t = static_cast<double>(y - m) / (p - 1 - 2 * m);
            double half = t * (p / 2.0 - m);
            inside = std::fabs(x - center) <= half;
          }
          break;
        }
      }
      if (inside) {
        size_t idx = ((static_cast<size_t>(frame) * 3 + static_cast<size_t>(chan)) *
                          static_cast<size_t>(h) +
                      static_cast<size_t>(oy + y)) *
                         static_cast<size_t>(w) +
                     static_cast<size_t>(ox + x);
        pixels[idx] = 1.0f;
      }
    }
  }
}

void render_frame(VisionSample& v, int frame, int patch, const std::vector<SceneObject>& objs) {
  int g = v.width / patch;
  for (const auto& o : objs) {
    int cy = o.cell / g, cx = o.cell % g;
    draw_shape(v.pixels, frame, v.height, v.width, cy * patch, cx * patch, patch, o.shape,
               o.color);
  }
}

}  // namespace

Vocabulary Vocabulary::standard(int64_t size) {
  Vocabulary v;
  v.tokens_ = {"[CLS]", "[PAD]", "[MASK]", "a",    "and",  "red",  "green",
               "blue",  "circle", "square", "triangle", "moving", "still", "left",
               "right", "up",     "down"};
  if (size < static_cast<int64_t>(v.tokens_.size()))
    throw VocabError("vocabulary size too small: " + std::to_string(size));
  while (static_cast<int64_t>(v.tokens_.size()) < size)
    v.tokens_.push_back("w" + std::to_string(v.tokens_.size()));
  v.rebuild_index();
  return v;
}

void Vocabulary::rebuild_index() {
  index_.clear();
  for (size_t i = 0; i < tokens_.size(); ++i) index_[tokens_[i]] = static_cast<int64_t>(i);
}

int64_t Vocabulary::id(const std::string& token) const {
  auto it = index_.find(token);
  if (it == index_.end()) throw VocabError("unknown token: " + token);
  return it->second;
}

const std::string& Vocabulary::token(int64_t id) const {
  if (id < 0 || id >= size()) throw VocabError("token id out of range: " + std::to_string(id));
  return tokens_[static_cast<size_t>(id)];
}

void Vocabulary::save(const std::string& path) const {
  std::ofstream f(path);
  if (!f) throw DataError("cannot write vocabulary: " + path);
  for (const auto& t : tokens_) f << t << "\n";
}

Vocabulary Vocabulary::load(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw DataError("cannot read vocabulary: " + path);
  Vocabulary v;
  std::string line;
  while (std::getline(f, line))
    if (!line.empty()) v.tokens_.push_back(line);
  v.rebuild_index();
  return v;
}

std::string caption_for(const SceneSpec& spec) {
  std::string out;
  for (size_t i = 0; i < spec.objects.size(); ++i) {
    if (i) out += " and";
    if (!out.empty()) out += " ";
    out += "a ";
    out += kColorNames[static_cast<int>(spec.objects[i].color)];
    out += " ";
    out += kShapeNames[static_cast<int>(spec.objects[i].shape)];
  }
  if (spec.video) {
    if (spec.motion != Motion::Still) {
      out += " moving ";
      out += kMotionNames[static_cast<int>(spec.motion)];
    } else {
      out += " still";
    }
  }
  return out;
}

std::pair<VisionSample, TextSample> generate_scene_pair(uint64_t seed, const DataConfig& cfg,
                                                        const Vocabulary& vocab) {
  Rng rng(seed);
  int g = cfg.image_size / cfg.patch_size;
  int cells = g * g;
  // 1-3 objects, weighted toward busier scenes so the configuration space
  // keeps seed collisions rare.
  uint32_t r = rng.below(64);
  int n_obj = r < 1 ? 1 : (r < 17 ? 2 : 3);
  std::vector<int> cell_pool(static_cast<size_t>(cells));
  for (int i = 0; i < cells; ++i) cell_pool[static_cast<size_t>(i)] = i;
  SceneSpec spec;
  for (int i = 0; i < n_obj; ++i) {
    int j = i + static_cast<int>(rng.below(static_cast<uint32_t>(cells - i)));
    std::swap(cell_pool[static_cast<size_t>(i)], cell_pool[static_cast<size_t>(j)]);
    SceneObject o;
    o.cell = cell_pool[static_cast<size_t>(i)];
    o.shape = static_cast<ShapeKind>(rng.below(3));
    o.color = static_cast<ColorKind>(rng.below(3));
    spec.objects.push_back(o);
  }
  std::sort(spec.objects.begin(), spec.objects.end(),
            [](const SceneObject& a, const SceneObject& b) { return a.cell < b.cell; });

  VisionSample v;
  v.frames = 1;
  v.height = v.width = cfg.image_size;
  v.pixels.assign(static_cast<size_t>(3 * cfg.image_size * cfg.image_size), 0.0f);
  v.spec = spec;
  render_frame(v, 0, cfg.patch_size, spec.objects);

  TextSample t = tokenize(caption_for(spec), vocab, cfg.max_text_len);
  return {std::move(v), std::move(t)};
}

std::pair<VisionSample, TextSample> generate_video_pair(uint64_t seed, const DataConfig& cfg,
                                                        const Vocabulary& vocab) {
  Rng rng(seed);
  int g = cfg.image_size / cfg.patch_size;
  int m = cfg.frames;
  SceneSpec spec;
  spec.video = true;
  spec.motion = static_cast<Motion>(rng.below(5));
  SceneObject o;
  o.shape = static_cast<ShapeKind>(rng.below(3));
  o.color = static_cast<ColorKind>(rng.below(3));
  int span = std::min(m - 1, g - 1);
  int cy = 0, cx = 0;
  switch (spec.motion) {
    case Motion::Still:
      cy = static_cast<int>(rng.below(static_cast<uint32_t>(g)));
      cx = static_cast<int>(rng.below(static_cast<uint32_t>(g)));
      break;
    case Motion::Right:
      cy = static_cast<int>(rng.below(static_cast<uint32_t>(g)));
      cx = static_cast<int>(rng.below(static_cast<uint32_t>(g - span)));
      break;
    case Motion::Left:
      cy = static_cast<int>(rng.below(static_cast<uint32_t>(g)));
      cx = span + static_cast<int>(rng.below(static_cast<uint32_t>(g - span)));
      break;
    case Motion::Down:
      cy = static_cast<int>(rng.below(static_cast<uint32_t>(g - span)));
      cx = static_cast<int>(rng.below(static_cast<uint32_t>(g)));
      break;
    case Motion::Up:
      cy = span + static_cast<int>(rng.below(static_cast<uint32_t>(g - span)));
      cx = static_cast<int>(rng.below(static_cast<uint32_t>(g)));
      break;
  }
  o.cell = cy * g + cx;
  spec.objects.push_back(o);

  VisionSample v;
  v.frames = m;
  v.height = v.width = cfg.image_size;
  v.pixels.assign(static_cast<size_t>(m) * 3 * static_cast<size_t>(cfg.image_size) *
                      static_cast<size_t>(cfg.image_size),
                  0.0f);
  v.spec = spec;
  for (int f = 0; f < m; ++f) {
    int step = std::min(f, span);
    int fy = cy, fx = cx;
    switch (spec.motion) {
      case Motion::Still: break;
      case Motion::Right: fx += step; break;
      case Motion::Left: fx -= step; break;
      case Motion::Down: fy += step; break;
      case Motion::Up: fy -= step; break;
    }
    SceneObject fo = o;
    fo.cell = fy * g + fx;
    render_frame(v, f, cfg.patch_size, {fo});
  }

  TextSample t = tokenize(caption_for(spec), vocab, cfg.max_text_len);
  return {std::move(v), std::move(t)};
}

TextSample tokenize(const std::string& caption, const Vocabulary& vocab, int max_len) {
  TextSample t;
  t.caption = caption;
  t.ids.assign(static_cast<size_t>(max_len), Vocabulary::kPad);
  t.ids[0] = Vocabulary::kCls;
  int64_t pos = 1;
  for (const auto& w : split_words(caption)) {
    if (pos >= max_len) break;
    t.ids[static_cast<size_t>(pos++)] = vocab.id(w);
  }
  t.valid_len = pos;
  return t;
}

std::vector<float> patchify(const VisionSample& v, int patch_size) {
  if (v.height % patch_size != 0 || v.width % patch_size != 0)
    throw DataError("patchify: image " + std::to_string(v.height) + "x" +
                    std::to_string(v.width) + " not divisible by patch " +
                    std::to_string(patch_size));
  int gy = v.height / patch_size, gx = v.width / patch_size;
  int n = gy * gx;
  int pd = 3 * patch_size * patch_size;
  std::vector<float> out(static_cast<size_t>(v.frames) * static_cast<size_t>(n) *
                         static_cast<size_t>(pd));
  size_t idx = 0;
  for (int m = 0; m < v.frames; ++m)
    for (int py = 0; py < gy; ++py)
      for (int px = 0; px < gx; ++px)
        for (int c = 0; c < 3; ++c)
          for (int y = 0; y < patch_size; ++y)
            for (int x = 0; x < patch_size; ++x)
              out[idx++] =
                  v.pixels[((static_cast<size_t>(m) * 3 + static_cast<size_t>(c)) *
                                static_cast<size_t>(v.height) +
                            static_cast<size_t>(py * patch_size + y)) *
                               static_cast<size_t>(v.width) +
                           static_cast<size_t>(px * patch_size + x)];
  return out;
}

std::vector<float> unpatchify(const std::vector<float>& patches, int frames, int height,
                              int width, int patch_size) {
  int gy = height / patch_size, gx = width / patch_size;
  std::vector<float> out(static_cast<size_t>(frames) * 3 * static_cast<size_t>(height) *
                         static_cast<size_t>(width));
  size_t idx = 0;
  for (int m = 0; m < frames; ++m)
    for (int py = 0; py < gy; ++py)
      for (int px = 0; px < gx; ++px)
        for (int c = 0; c < 3; ++c)
          for (int y = 0; y < patch_size; ++y)
            for (int x = 0; x < patch_size; ++x)
              out[((static_cast<size_t>(m) * 3 + static_cast<size_t>(c)) *
                       static_cast<size_t>(height) +
                   static_cast<size_t>(py * patch_size + y)) *
                      static_cast<size_t>(width) +
                  static_cast<size_t>(px * patch_size + x)] = patches[idx++];
  return out;
}

int64_t mask_count(double ratio, int64_t eligible) {
  if (ratio < 0.0 || ratio >= 1.0) throw DataError("mask ratio out of [0,1)");
  if (ratio == 0.0) return 0;
  if (eligible < 2) throw DataError("mask: need at least 2 eligible tokens");
  int64_t c = std::llround(ratio * static_cast<double>(eligible));
  return std::clamp<int64_t>(c, 1, eligible - 1);
}

namespace {

std::vector<int64_t> sample_positions(int64_t eligible, int64_t count, Rng& rng) {
  std::vector<int64_t> pool(static_cast<size_t>(eligible));
  for (int64_t i = 0; i < eligible; ++i) pool[static_cast<size_t>(i)] = i;
  for (int64_t i = 0; i < count; ++i) {
    int64_t j = i + static_cast<int64_t>(rng.below(static_cast<uint32_t>(eligible - i)));
    std::swap(pool[static_cast<size_t>(i)], pool[static_cast<size_t>(j)]);
  }
  pool.resize(static_cast<size_t>(count));
  std::sort(pool.begin(), pool.end());
  return pool;
}

}  // namespace

MaskPlan plan_completion_mask(MaskModality modality, int64_t eligible_count, double ratio,
                              uint64_t seed) {
  MaskPlan plan;
  plan.modality = modality;
  plan.seed = seed;
  int64_t count = mask_count(ratio, eligible_count);
  if (count == 0) return plan;
  Rng rng(seed);
  plan.positions = sample_positions(eligible_count, count, rng);
  plan.kinds.assign(plan.positions.size(), MaskKind::MaskToken);
  return plan;
}

MaskPlan plan_mlm_mask(const TextSample& sample, double ratio, uint64_t seed) {
  int64_t eligible = sample.valid_len - 1;  // [CLS] excluded
  if (eligible < 1) throw DataError("plan_mlm_mask: no maskable token");
  MaskPlan plan;
  plan.modality = MaskModality::Text;
  plan.seed = seed;
  int64_t count = eligible == 1 ? 1 : mask_count(ratio, eligible);
  Rng rng(seed);
  auto rel = sample_positions(eligible, count, rng);
  for (int64_t p : rel) plan.positions.push_back(p + 1);  // shift past [CLS]
  for (size_t i = 0; i < plan.positions.size(); ++i) {
    double u = rng.uniform();
    plan.kinds.push_back(u < 0.8 ? MaskKind::MaskToken
                                 : (u < 0.9 ? MaskKind::RandomToken : MaskKind::Keep));
  }
  return plan;
}

std::vector<int64_t> apply_mlm(const std::vector<int64_t>& ids, const MaskPlan& plan,
                               const Vocabulary& vocab, uint64_t seed) {
  std::vector<int64_t> out = ids;
  Rng rng(seed);
  for (size_t i = 0; i < plan.positions.size(); ++i) {
    int64_t p = plan.positions[i];
    if (p < 0 || p >= static_cast<int64_t>(ids.size()))
      throw DataError("apply_mlm: position out of range");
    switch (plan.kinds[i]) {
      case MaskKind::MaskToken:
        out[static_cast<size_t>(p)] = Vocabulary::kMask;
        break;
      case MaskKind::RandomToken:
        out[static_cast<size_t>(p)] =
            Vocabulary::kReserved +
            static_cast<int64_t>(rng.below(static_cast<uint32_t>(vocab.size() - Vocabulary::kReserved)));
        break;
      case MaskKind::Keep:
        break;
    }
  }
  return out;
}

void write_manifest(const std::string& path, const std::vector<ManifestEntry>& entries) {
  std::ofstream f(path);
  if (!f) throw DataError("cannot write manifest: " + path);
  for (const auto& e : entries)
    f << e.pair_id << "\t" << e.seed << "\t" << (e.video ? "video" : "image") << "\n";
}

std::vector<ManifestEntry> read_manifest(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw DataError("cannot read manifest: " + path);
  std::vector<ManifestEntry> out;
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    std::istringstream is(line);
    ManifestEntry e;
    std::string modality;
    if (!(is >> e.pair_id >> e.seed >> modality) || (modality != "image" && modality != "video"))
      throw DataError("malformed manifest line: " + line);
    e.video = modality == "video";
    out.push_back(e);
  }
  return out;
}

PairBatch make_batch(const std::vector<ManifestEntry>& entries,
                     const std::vector<int64_t>& indices, const DataConfig& cfg,
                     const Vocabulary& vocab) {
  PairBatch batch;
  for (int64_t ix : indices) {
    if (ix < 0 || ix >= static_cast<int64_t>(entries.size()))
      throw DataError("batch index out of manifest range");
    const auto& e = entries[static_cast<size_t>(ix)];
    auto [v, t] = e.video ? generate_video_pair(e.seed, cfg, vocab)
                          : generate_scene_pair(e.seed, cfg, vocab);
    batch.vision.push_back(std::move(v));
    batch.text.push_back(std::move(t));
    batch.pair_ids.push_back(e.pair_id);
  }
  return batch;
}

std::vector<std::pair<ColorKind, ShapeKind>> parse_caption(const std::string& caption) {
  std::vector<std::pair<ColorKind, ShapeKind>> out;
  auto words = split_words(caption);
  for (size_t i = 0; i + 1 < words.size(); ++i) {
    int color = -1, shape = -1;
    for (int c = 0; c < 3; ++c)
      if (words[i] == kColorNames[c]) color = c;
    for (int s = 0; s < 3; ++s)
      if (words[i + 1] == kShapeNames[s]) shape = s;
    if (color >= 0 && shape >= 0)
      out.emplace_back(static_cast<ColorKind>(color), static_cast<ShapeKind>(shape));
  }
  return out;
}

Motion motion_from_frames(const VisionSample& v, int patch_size) {
  auto centroid = [&](int frame) {
    double sy = 0, sx = 0, n = 0;
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < v.height; ++y)
        for (int x = 0; x < v.width; ++x) {
          float px = v.pixels[((static_cast<size_t>(frame) * 3 + static_cast<size_t>(c)) *
                                   static_cast<size_t>(v.height) +
                               static_cast<size_t>(y)) *
                                  static_cast<size_t>(v.width) +
                              static_cast<size_t>(x)];
          if (px > 0) {
            sy += y;
            sx += x;
            n += 1;
          }
        }
    return std::pair<double, double>{sy / n, sx / n};
  };
  auto [y0, x0] = centroid(0);
  auto [y1, x1] = centroid(v.frames - 1);
  double dy = y1 - y0, dx = x1 - x0;
  double thresh = patch_size / 2.0;
  if (std::fabs(dx) >= std::fabs(dy)) {
    if (dx > thresh) return Motion::Right;
    if (dx < -thresh) return Motion::Left;
  } else {
    if (dy > thresh) return Motion::Down;
    if (dy < -thresh) return Motion::Up;
  }
  return Motion::Still;
}

}  // namespace glscl
