#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "glscl/rng.hpp"

// Synthetic paired vision-text data: grid scenes of colored shapes rendered
// from a seed, templated captions, tokenization, patch extraction, and the
// masking plans used by the pre-training objectives.

namespace glscl {

struct VocabError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

class Vocabulary {
 public:
  static constexpr int64_t kCls = 0;
  static constexpr int64_t kPad = 1;
  static constexpr int64_t kMask = 2;
  static constexpr int64_t kReserved = 3;

  // The fixed synthetic vocabulary, padded with filler words up to `size`.
  static Vocabulary standard(int64_t size = 64);

  int64_t id(const std::string& token) const;
  const std::string& token(int64_t id) const;
  int64_t size() const { return static_cast<int64_t>(tokens_.size()); }

  void save(const std::string& path) const;
  static Vocabulary load(const std::string& path);

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int64_t> index_;
  void rebuild_index();
};

enum class ShapeKind { Circle = 0, Square = 1, Triangle = 2 };
enum class ColorKind { Red = 0, Green = 1, Blue = 2 };
enum class Motion { Still = 0, Left = 1, Right = 2, Up = 3, Down = 4 };

struct SceneObject {
  ShapeKind shape;
  ColorKind color;
  int cell;  // raster index into the (H/P) x (W/P) grid
};

struct SceneSpec {
  std::vector<SceneObject> objects;  // raster order
  Motion motion = Motion::Still;     // video only
  bool video = false;
  bool operator==(const SceneSpec&) const = default;
};

struct VisionSample {
  int frames = 1;  // M; image is exactly M = 1
  int height = 0, width = 0;
  std::vector<float> pixels;  // M*3*H*W, values in [0,1]
  SceneSpec spec;
};

struct TextSample {
  std::vector<int64_t> ids;  // [CLS] first, padded to max length
  int64_t valid_len = 0;
  std::string caption;
};

struct DataConfig {
  int image_size = 32;
  int patch_size = 8;
  int frames = 4;  // video frame count
  int max_text_len = 50;
};

// Deterministic in seed. Renders 1-3 non-overlapping colored shapes.
std::pair<VisionSample, TextSample> generate_scene_pair(uint64_t seed,
                                                        const DataConfig& cfg,
                                                        const Vocabulary& vocab);

// One shape translating one cell per frame; caption names the direction.
std::pair<VisionSample, TextSample> generate_video_pair(uint64_t seed,
                                                        const DataConfig& cfg,
                                                        const Vocabulary& vocab);

std::string caption_for(const SceneSpec& spec);
TextSample tokenize(const std::string& caption, const Vocabulary& vocab, int max_len);

// [M,N,3*P*P] patch grid, raster order, lossless.
std::vector<float> patchify(const VisionSample& v, int patch_size);
std::vector<float> unpatchify(const std::vector<float>& patches, int frames, int height,
                              int width, int patch_size);

// ---- masking ----

enum class MaskKind : uint8_t { MaskToken = 0, RandomToken = 1, Keep = 2 };
enum class MaskModality : uint8_t { Vision = 0, Text = 1 };

struct MaskPlan {
  MaskModality modality = MaskModality::Text;
  std::vector<int64_t> positions;  // sorted unique, [CLS] slots excluded
  std::vector<MaskKind> kinds;     // parallel to positions
  uint64_t seed = 0;
};

// round(ratio*eligible) clamped to [1, eligible-1] for ratio > 0.
int64_t mask_count(double ratio, int64_t eligible);

MaskPlan plan_completion_mask(MaskModality modality, int64_t eligible_count,
                              double ratio, uint64_t seed);

// 15%-style selection over non-[CLS] valid tokens with 80/10/10 kinds.
MaskPlan plan_mlm_mask(const TextSample& sample, double ratio, uint64_t seed);

// Id-level application for MLM; [CLS] and padding are never altered.
std::vector<int64_t> apply_mlm(const std::vector<int64_t>& ids, const MaskPlan& plan,
                               const Vocabulary& vocab, uint64_t seed);

// ---- manifests and batches ----

struct ManifestEntry {
  int64_t pair_id = 0;
  uint64_t seed = 0;
  bool video = false;
};

void write_manifest(const std::string& path, const std::vector<ManifestEntry>& entries);
std::vector<ManifestEntry> read_manifest(const std::string& path);

struct PairBatch {
  std::vector<VisionSample> vision;
  std::vector<TextSample> text;
  std::vector<int64_t> pair_ids;
  int64_t size() const { return static_cast<int64_t>(pair_ids.size()); }
};

PairBatch make_batch(const std::vector<ManifestEntry>& entries,
                     const std::vector<int64_t>& indices, const DataConfig& cfg,
                     const Vocabulary& vocab);

// Test oracles: recover structure from rendered artifacts.
std::vector<std::pair<ColorKind, ShapeKind>> parse_caption(const std::string& caption);
Motion motion_from_frames(const VisionSample& v, int patch_size);

}  // namespace glscl
