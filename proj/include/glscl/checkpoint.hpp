#pragma once

#include <string>
#include <utility>
#include <vector>

#include "glscl/trainer.hpp"

// Binary checkpoints: magic "GLSC", version 1, little-endian throughout.
// Layout: config text block, named parameter tensors (each with a CRC32 of
// its payload), optimizer moment tensors in the same encoding, 16 bytes of
// RNG state, u64 step, u8 curriculum stage.

namespace glscl {

struct CheckpointError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

template <typename T>
struct LoadedCheckpoint {
  std::string config_text;
  std::vector<std::pair<std::string, Tensor<T>>> tensors;
  std::vector<std::pair<std::string, Tensor<T>>> opt_tensors;
  uint64_t rng_state = 0, rng_inc = 0;
  uint64_t step = 0;
  uint8_t stage = 1;
};

template <typename T>
void save_checkpoint(const std::string& path, const TrainState<T>& state);

template <typename T>
LoadedCheckpoint<T> load_checkpoint(const std::string& path);

// Copies loaded tensors into the model and optimizer. Shape mismatches are
// collected and reported together by name. When `extend_temporal` is set,
// a temporal-embedding table with fewer rows than the model's is accepted
// and its first row is replicated into the new frame slots.
template <typename T>
void restore_into(TrainState<T>& state, const LoadedCheckpoint<T>& ckpt,
                  bool extend_temporal = false);

}  // namespace glscl
