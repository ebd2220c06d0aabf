#include "glscl/config.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

namespace glscl {

namespace {

enum class KeyType { Int, Double, Bool, Enum };

struct KeySpec {
  KeyType type;
  const char* def;
  const char* choices;  // '|'-separated for Enum, else nullptr
};

const std::map<std::string, KeySpec>& key_table() {
  static const std::map<std::string, KeySpec> table = {
      {"model.dim", {KeyType::Int, "64", nullptr}},
      {"model.heads", {KeyType::Int, "4", nullptr}},
      {"model.layers_vision", {KeyType::Int, "2", nullptr}},
      {"model.layers_text", {KeyType::Int, "2", nullptr}},
      {"model.layers_fusion", {KeyType::Int, "2", nullptr}},
      {"model.ffn_mult", {KeyType::Int, "4", nullptr}},
      {"model.frames", {KeyType::Int, "1", nullptr}},
      {"model.image_size", {KeyType::Int, "32", nullptr}},
      {"model.patch_size", {KeyType::Int, "8", nullptr}},
      {"model.max_text_len", {KeyType::Int, "50", nullptr}},
      {"model.vocab_size", {KeyType::Int, "64", nullptr}},
      {"model.proj_dim", {KeyType::Int, "64", nullptr}},
      {"model.vision_global", {KeyType::Enum, "frame_cls", "frame_cls|mean_pool"}},
      {"task.cl", {KeyType::Bool, "true", nullptr}},
      {"task.vtm", {KeyType::Bool, "true", nullptr}},
      {"task.mlm", {KeyType::Bool, "true", nullptr}},
      {"task.mgsc", {KeyType::Bool, "true", nullptr}},
      {"task.mltc", {KeyType::Bool, "true", nullptr}},
      {"mgsc.image", {KeyType::Double, "0.8", nullptr}},
      {"mgsc.text", {KeyType::Double, "0.4", nullptr}},
      {"mltc.image", {KeyType::Double, "0.3", nullptr}},
      {"mlm.ratio", {KeyType::Double, "0.15", nullptr}},
      {"temp.completion", {KeyType::Double, "0.03", nullptr}},
      {"loss.completion_global", {KeyType::Enum, "infonce", "infonce|l2|cosine"}},
      {"loss.completion_local", {KeyType::Enum, "infonce", "infonce|l2|cosine"}},
      {"opt.weight_decay", {KeyType::Double, "0.01", nullptr}},
      {"opt.beta1", {KeyType::Double, "0.9", nullptr}},
      {"opt.beta2", {KeyType::Double, "0.999", nullptr}},
      {"opt.eps", {KeyType::Double, "1e-8", nullptr}},
      {"opt.clip_norm", {KeyType::Double, "1.0", nullptr}},
      {"sched.steps", {KeyType::Int, "2000", nullptr}},
      {"sched.warmup_frac", {KeyType::Double, "0.1", nullptr}},
      {"sched.peak_lr", {KeyType::Double, "1e-3", nullptr}},
      {"sched.fusion_mult", {KeyType::Double, "5.0", nullptr}},
      {"train.batch", {KeyType::Int, "16", nullptr}},
      {"train.log_every", {KeyType::Int, "1", nullptr}},
      {"stage2.steps", {KeyType::Int, "500", nullptr}},
      {"stage2.peak_lr", {KeyType::Double, "1e-3", nullptr}},
      {"stage2.frames", {KeyType::Int, "4", nullptr}},
      {"stage2.mltc", {KeyType::Bool, "false", nullptr}},
      {"eval.k", {KeyType::Int, "8", nullptr}},
      {"eval.batch", {KeyType::Int, "8", nullptr}},
  };
  return table;
}

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

}  // namespace

Config Config::defaults() {
  Config c;
  for (const auto& [key, spec] : key_table()) c.values_[key] = spec.def;
  return c;
}

Config Config::from_text(const std::string& text) {
  Config c = defaults();
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) c.apply_line(line);
  return c;
}

Config Config::from_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open config file " + path);
  std::stringstream buf;
  buf << f.rdbuf();
  return from_text(buf.str());
}

void Config::apply_line(const std::string& raw) {
  std::string line = raw;
  size_t hash = line.find('#');
  if (hash != std::string::npos) line = line.substr(0, hash);
  line = trim(line);
  if (line.empty()) return;
  size_t eq = line.find('=');
  if (eq == std::string::npos) throw ConfigError("malformed config line: " + raw);
  set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
}

void Config::set(const std::string& key, const std::string& value) {
  auto it = key_table().find(key);
  if (it == key_table().end()) throw ConfigError("unknown config key: " + key);
  const KeySpec& spec = it->second;
  switch (spec.type) {
    case KeyType::Int: {
      size_t used = 0;
      try {
        (void)std::stoll(value, &used);
      } catch (const std::exception&) {
        used = std::string::npos;
      }
      if (used != value.size())
        throw ConfigError(key + " expects an integer, got '" + value + "'");
      break;
    }
    case KeyType::Double: {
      size_t used = 0;
      try {
        (void)std::stod(value, &used);
      } catch (const std::exception&) {
        used = std::string::npos;
      }
      if (used != value.size())
        throw ConfigError(key + " expects a number, got '" + value + "'");
      break;
    }
    case KeyType::Bool:
      if (value != "true" && value != "false")
        throw ConfigError(key + " expects true or false, got '" + value + "'");
      break;
    case KeyType::Enum: {
      std::string choices = spec.choices;
      bool ok = false;
      size_t start = 0;
      while (start <= choices.size()) {
        size_t bar = choices.find('|', start);
        std::string choice = choices.substr(start, bar - start);
        if (value == choice) ok = true;
        if (bar == std::string::npos) break;
        start = bar + 1;
      }
      if (!ok) throw ConfigError(key + " must be one of {" + choices + "}, got '" + value + "'");
      break;
    }
  }
  values_[key] = value;
}

int64_t Config::get_int(const std::string& key) const { return std::stoll(get_string(key)); }
double Config::get_double(const std::string& key) const { return std::stod(get_string(key)); }
bool Config::get_bool(const std::string& key) const { return get_string(key) == "true"; }

const std::string& Config::get_string(const std::string& key) const {
  auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError("unknown config key: " + key);
  return it->second;
}

void Config::validate() const {
  auto positive = [&](const std::string& key) {
    if (get_int(key) <= 0) throw ConfigError(key + " must be positive");
  };
  for (const char* key : {"model.dim", "model.heads", "model.layers_vision",
                          "model.layers_text", "model.layers_fusion", "model.ffn_mult",
                          "model.frames", "model.image_size", "model.patch_size",
                          "model.vocab_size", "model.proj_dim", "train.batch",
                          "train.log_every", "stage2.frames", "eval.k", "eval.batch"})
    positive(key);
  if (get_int("model.dim") % get_int("model.heads") != 0)
    throw ConfigError("model.dim must be divisible by model.heads");
  if (get_int("model.image_size") % get_int("model.patch_size") != 0)
    throw ConfigError("model.image_size must be divisible by model.patch_size");
  if (get_int("model.max_text_len") < 2)
    throw ConfigError("model.max_text_len must be at least 2");
  for (const char* key : {"mgsc.image", "mgsc.text", "mltc.image", "mlm.ratio"}) {
    double r = get_double(key);
    if (!(r >= 0.0 && r < 1.0)) throw ConfigError(std::string(key) + " must lie in [0, 1)");
  }
  if (!(get_double("temp.completion") > 0))
    throw ConfigError("temp.completion must be positive");
  if (!(get_double("sched.warmup_frac") >= 0 && get_double("sched.warmup_frac") < 1))
    throw ConfigError("sched.warmup_frac must lie in [0, 1)");
  for (const char* key : {"sched.steps", "stage2.steps"})
    if (get_int(key) < 0) throw ConfigError(std::string(key) + " must be nonnegative");
  for (const char* key : {"sched.peak_lr", "stage2.peak_lr", "opt.eps"})
    if (!(get_double(key) >= 0)) throw ConfigError(std::string(key) + " must be nonnegative");
  model_config().validate();
}

std::string Config::echo() const {
  std::string out;
  for (const auto& [key, value] : values_) out += key + " = " + value + "\n";
  return out;
}

ModelConfig Config::model_config() const { return model_config(get_int("model.frames")); }

ModelConfig Config::model_config(int64_t frames) const {
  ModelConfig m;
  m.dim = get_int("model.dim");
  m.heads = get_int("model.heads");
  m.layers_vision = get_int("model.layers_vision");
  m.layers_text = get_int("model.layers_text");
  m.layers_fusion = get_int("model.layers_fusion");
  m.ffn_mult = get_int("model.ffn_mult");
  m.frames = frames;
  m.image_size = get_int("model.image_size");
  m.patch_size = get_int("model.patch_size");
  m.max_text_len = get_int("model.max_text_len");
  m.vocab_size = get_int("model.vocab_size");
  m.proj_dim = get_int("model.proj_dim");
  m.vision_global = get_string("model.vision_global") == "mean_pool"
                        ? VisionGlobalMode::MeanPooling
                        : VisionGlobalMode::FrameCls;
  return m;
}

TaskConfig Config::task_config(bool stage2) const {
  TaskConfig t;
  t.cl = get_bool("task.cl");
  t.vtm = get_bool("task.vtm");
  t.mlm = get_bool("task.mlm");
  t.mgsc = get_bool("task.mgsc");
  t.mltc = stage2 ? get_bool("stage2.mltc") : get_bool("task.mltc");
  t.mgsc_image_ratio = get_double("mgsc.image");
  t.mgsc_text_ratio = get_double("mgsc.text");
  t.mltc_image_ratio = get_double("mltc.image");
  t.mlm_ratio = get_double("mlm.ratio");
  t.completion_tau = get_double("temp.completion");
  auto variant = [](const std::string& s) {
    return s == "l2"       ? CompletionVariant::L2
           : s == "cosine" ? CompletionVariant::Cosine
                           : CompletionVariant::InfoNce;
  };
  t.completion_global = variant(get_string("loss.completion_global"));
  t.completion_local = variant(get_string("loss.completion_local"));
  return t;
}

Schedule Config::schedule(bool stage2) const {
  Schedule s;
  s.total_steps = stage2 ? get_int("stage2.steps") : get_int("sched.steps");
  s.warmup_frac = get_double("sched.warmup_frac");
  s.peak_lr = stage2 ? get_double("stage2.peak_lr") : get_double("sched.peak_lr");
  s.fusion_mult = get_double("sched.fusion_mult");
  return s;
}

OptConfig Config::opt_config() const {
  OptConfig o;
  o.beta1 = get_double("opt.beta1");
  o.beta2 = get_double("opt.beta2");
  o.eps = get_double("opt.eps");
  o.weight_decay = get_double("opt.weight_decay");
  o.clip_norm = get_double("opt.clip_norm");
  return o;
}

TrainRunConfig Config::run_config(bool stage2, uint64_t seed) const {
  TrainRunConfig r;
  r.tasks = task_config(stage2);
  r.schedule = schedule(stage2);
  r.data = data_config(stage2 ? get_int("stage2.frames") : get_int("model.frames"));
  r.opt = opt_config();
  r.batch_size = get_int("train.batch");
  r.seed = seed;
  r.log_every = get_int("train.log_every");
  return r;
}

DataConfig Config::data_config(int64_t frames) const {
  DataConfig d;
  d.image_size = static_cast<int>(get_int("model.image_size"));
  d.patch_size = static_cast<int>(get_int("model.patch_size"));
  d.frames = static_cast<int>(frames);
  d.max_text_len = static_cast<int>(get_int("model.max_text_len"));
  return d;
}

}  // namespace glscl
