#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>

#include "cdkd/config.hpp"
#include "cdkd/errors.hpp"

namespace cdkd {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::uint64_t parse_uint(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  const auto* end = v.data() + v.size();
  auto [ptr, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || ptr != end) {
    throw ConfigError(key + ": expected a nonnegative integer, got '" + v + "'");
  }
  return out;
}

double parse_float(const std::string& key, const std::string& v) {
  double out = 0.0;
  const auto* end = v.data() + v.size();
  auto [ptr, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || ptr != end) {
    throw ConfigError(key + ": expected a number, got '" + v + "'");
  }
  return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError(key + ": expected true or false, got '" + v + "'");
}

std::vector<std::size_t> parse_list(const std::string& key, const std::string& v) {
  std::vector<std::size_t> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_uint(key, trim(item)));
  if (out.empty()) throw ConfigError(key + ": expected a comma-separated list");
  return out;
}

std::string format_list(const std::vector<std::size_t>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += ',';
    out += std::to_string(v[i]);
  }
  return out;
}

struct Entry {
  ConfigKey key;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

#define CDKD_UINT(NAME, FIELD, HELP)                                                       \
  Entry {                                                                                  \
    {NAME, "int", HELP},                                                                   \
        [](RunConfig& c, const std::string& v) { c.FIELD = parse_uint(NAME, v); },          \
        [](const RunConfig& c) { return std::to_string(c.FIELD); }                         \
  }
#define CDKD_FLOAT(NAME, FIELD, HELP)                                                      \
  Entry {                                                                                  \
    {NAME, "float", HELP},                                                                 \
        [](RunConfig& c, const std::string& v) { c.FIELD = parse_float(NAME, v); },         \
        [](const RunConfig& c) { return format_double(c.FIELD); }                          \
  }
#define CDKD_BOOL(NAME, FIELD, HELP)                                                       \
  Entry {                                                                                  \
    {NAME, "bool", HELP},                                                                  \
        [](RunConfig& c, const std::string& v) { c.FIELD = parse_bool(NAME, v); },          \
        [](const RunConfig& c) { return std::string(c.FIELD ? "true" : "false"); }         \
  }
#define CDKD_STRING(NAME, FIELD, HELP)                                                     \
  Entry {                                                                                  \
    {NAME, "string", HELP}, [](RunConfig& c, const std::string& v) { c.FIELD = v; },        \
        [](const RunConfig& c) { return c.FIELD; }                                         \
  }
#define CDKD_LIST(NAME, FIELD, HELP)                                                       \
  Entry {                                                                                  \
    {NAME, "int-list", HELP},                                                              \
        [](RunConfig& c, const std::string& v) { c.FIELD = parse_list(NAME, v); },         \
        [](const RunConfig& c) { return format_list(c.FIELD); }                            \
  }

const std::vector<Entry>& entries() {
  static const std::vector<Entry> table = {
      CDKD_UINT("data.seed", data_seed, "dataset stream seed"),
      CDKD_UINT("data.n_train", n_train, "training samples"),
      CDKD_UINT("data.n_val", n_val, "validation samples"),
      CDKD_UINT("data.high_side", scene.high_side, "teacher input side in pixels"),
      Entry{{"data.scale", "int", "resolution ratio m between teacher and student"},
            [](RunConfig& c, const std::string& v) {
              c.scene.scale = parse_uint("data.scale", v);
              c.sape.scale = c.scene.scale;
            },
            [](const RunConfig& c) { return std::to_string(c.scene.scale); }},
      CDKD_FLOAT("data.noise_std", scene.noise_std, "Gaussian pixel noise"),
      CDKD_FLOAT("data.limb_thickness", scene.limb_thickness, "limb width in pixels"),
      CDKD_FLOAT("data.joint_radius", scene.joint_radius, "keypoint disk radius in pixels"),
      CDKD_LIST("model.stage_channels", backbone.stage_channels, "backbone stage widths"),
      CDKD_UINT("model.total_stride", backbone.total_stride, "backbone downsampling"),
      CDKD_UINT("model.kernel", backbone.kernel, "backbone conv kernel"),
      CDKD_FLOAT("model.split_factor", simcc.split_factor, "bins per pixel k"),
      Entry{{"model.num_keypoints", "int", "keypoints per figure"},
            [](RunConfig& c, const std::string& v) {
              c.simcc.num_keypoints = parse_uint("model.num_keypoints", v);
              c.scene.num_keypoints = c.simcc.num_keypoints;
            },
            [](const RunConfig& c) { return std::to_string(c.simcc.num_keypoints); }},
      CDKD_FLOAT("model.label_sigma", simcc.label_sigma, "label Gaussian width in bins"),
      CDKD_FLOAT("distill.alpha", weights.alpha, "feature loss weight"),
      CDKD_FLOAT("distill.beta", weights.beta, "logit loss weight"),
      CDKD_UINT("distill.num_projectors", sape.num_projectors, "projector count K"),
      CDKD_LIST("distill.kernels", sape.kernels, "scale-adaptive unit branch kernels"),
      CDKD_UINT("distill.descriptor_dim", sape.descriptor_dim, "fused descriptor width"),
      CDKD_FLOAT("distill.tau_init", tau_init, "initial temperature"),
      CDKD_FLOAT("distill.tau_min", tau_min, "temperature lower clamp"),
      CDKD_FLOAT("distill.tau_max", tau_max, "temperature upper clamp"),
      Entry{{"distill.schedule", "schedule", "difficulty schedule: linear or half-cosine"},
            [](RunConfig& c, const std::string& v) {
              auto s = cca::parse_schedule(v);
              if (!s) throw ConfigError("distill.schedule: unknown schedule '" + v + "'");
              c.schedule = *s;
            },
            [](const RunConfig& c) { return std::string(cca::schedule_name(c.schedule)); }},
      CDKD_BOOL("distill.learn_tau", learn_tau, "adversarially learn the temperature"),
      CDKD_BOOL("distill.learn_loss_weights", learn_loss_weights,
                "adversarially learn alpha and beta as well"),
      CDKD_FLOAT("distill.loss_weight_max", loss_weight_max, "clamp for learned alpha and beta"),
      CDKD_UINT("optim.seed", init_seed, "parameter initialization seed"),
      CDKD_FLOAT("optim.lr", learning_rate, "learning rate"),
      CDKD_FLOAT("optim.momentum", momentum, "SGD momentum"),
      CDKD_UINT("optim.epochs", epochs, "student epochs T_max"),
      CDKD_UINT("optim.teacher_epochs", teacher_epochs, "teacher epochs"),
      CDKD_UINT("optim.batch_size", batch_size, "minibatch size"),
      CDKD_UINT("optim.decay_epoch", decay_epoch, "epoch of the 10x learning rate decay"),
      CDKD_FLOAT("optim.decay_factor", decay_factor, "learning rate multiplier at decay"),
      CDKD_FLOAT("eval.threshold", eval_threshold, "PCK threshold as a fraction of the side"),
      CDKD_STRING("paths.out_dir", out_dir, "run directory"),
      CDKD_STRING("paths.teacher", teacher_path, "teacher checkpoint (empty: none)"),
  };
  return table;
}

#undef CDKD_UINT
#undef CDKD_FLOAT
#undef CDKD_BOOL
#undef CDKD_STRING
#undef CDKD_LIST

const Entry& find_entry(const std::string& key) {
  for (const auto& e : entries()) {
    if (e.key.name == key) return e;
  }
  throw ConfigError("unknown config key '" + key + "'");
}

}  // namespace

std::string format_double(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

void RunConfig::validate() const {
  scene.validate();
  backbone.validate();
  simcc.validate();
  if (scene.num_keypoints != simcc.num_keypoints) {
    throw ConfigError("scene and head keypoint counts differ");
  }
  if (low_side() % backbone.total_stride != 0) {
    throw ConfigError("student side " + std::to_string(low_side()) +
                      " not divisible by total stride " + std::to_string(backbone.total_stride));
  }
  if (n_train == 0 || n_val == 0) throw ConfigError("split sizes must be positive");
  if (batch_size == 0) throw ConfigError("optim.batch_size must be positive");
  if (!(learning_rate > 0.0)) throw ConfigError("optim.lr must be positive");
  if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("optim.momentum must be in [0, 1)");
  if (weights.alpha < 0.0 || weights.beta < 0.0) {
    throw ConfigError("distill.alpha and distill.beta must be nonnegative");
  }
  if (!(tau_min > 0.0) || tau_min > tau_max || tau_init < tau_min || tau_init > tau_max) {
    throw ConfigError("temperature must satisfy 0 < tau_min <= tau_init <= tau_max");
  }
  if (!(eval_threshold > 0.0)) throw ConfigError("eval.threshold must be positive");
  if (scale() >= 2) sape.validate();
}

const std::vector<ConfigKey>& config_schema() {
  static const std::vector<ConfigKey> keys = [] {
    std::vector<ConfigKey> out;
    for (const auto& e : entries()) out.push_back(e.key);
    return out;
  }();
  return keys;
}

void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value) {
  find_entry(key).set(cfg, value);
}

std::string get_config_value(const RunConfig& cfg, const std::string& key) {
  return find_entry(key).get(cfg);
}

namespace {

struct ConfigLine {
  int lineno;
  std::string key;
  std::string value;
};

std::vector<ConfigLine> parse_lines(const std::string& text, const std::string& source) {
  std::vector<ConfigLine> out;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(source + ":" + std::to_string(lineno) + ": expected 'key = value'");
    }
    auto key = trim(line.substr(0, eq));
    auto value = trim(line.substr(eq + 1));
    if (key.empty()) throw ConfigError(source + ":" + std::to_string(lineno) + ": empty key");
    out.push_back({lineno, std::move(key), std::move(value)});
  }
  return out;
}

}  // namespace

std::vector<std::pair<std::string, std::string>> parse_config_text(const std::string& text,
                                                                   const std::string& source) {
  std::vector<std::pair<std::string, std::string>> out;
  for (auto& l : parse_lines(text, source)) out.emplace_back(std::move(l.key), std::move(l.value));
  return out;
}

void apply_config_file(RunConfig& cfg, const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  for (const auto& l : parse_lines(ss.str(), path.string())) {
    try {
      set_config_value(cfg, l.key, l.value);
    } catch (const ConfigError& e) {
      throw ConfigError(path.string() + ":" + std::to_string(l.lineno) + ": " + e.what());
    }
  }
}

std::string echo_config(const RunConfig& cfg) {
  std::string out;
  for (const auto& e : entries()) out += e.key.name + " = " + e.get(cfg) + "\n";
  return out;
}

}  // namespace cdkd
