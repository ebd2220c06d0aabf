#pragma once

#include <map>
#include <string>

#include "glscl/model.hpp"
#include "glscl/trainer.hpp"

// Flat key = value configuration: defaults <- file <- command-line
// overrides. Every key has a default; unknown keys and out-of-range values
// are rejected by name. `echo()` round-trips through the parser, so the
// effective config can be embedded in logs and checkpoints verbatim.

namespace glscl {

class Config {
 public:
  static Config defaults();
  static Config from_file(const std::string& path);
  static Config from_text(const std::string& text);

  // "key=value" or "key = value"
  void apply_line(const std::string& line);
  void set(const std::string& key, const std::string& value);

  int64_t get_int(const std::string& key) const;
  double get_double(const std::string& key) const;
  bool get_bool(const std::string& key) const;
  const std::string& get_string(const std::string& key) const;

  // Cross-field constraints; throws ConfigError naming the offending key.
  void validate() const;

  std::string echo() const;  // every key, sorted, one per line

  // Typed views for the training and evaluation modules.
  ModelConfig model_config() const;         // frames from model.frames
  ModelConfig model_config(int64_t frames) const;
  TaskConfig task_config(bool stage2 = false) const;
  Schedule schedule(bool stage2 = false) const;
  DataConfig data_config(int64_t frames) const;
  OptConfig opt_config() const;
  // Full per-stage run description; stage 2 reads the stage2.* keys.
  TrainRunConfig run_config(bool stage2, uint64_t seed) const;

 private:
  std::map<std::string, std::string> values_;
};

}  // namespace glscl
