#include "canopy/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <type_traits>
#include <vector>

#include "canopy/error.hpp"

namespace canopy::config {
namespace {

struct Key {
  const char* section;
  const char* name;
  std::function<void(RunConfig&, const std::string& text, const std::string& where)> set;
  std::function<std::string(const RunConfig&)> get;
};

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::string fmt(double v) {
  char buf[32];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, end);
}

template <typename T>
T parse_num(const std::string& text, const std::string& where) {
  T v{};
  auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc{} || ptr != text.data() + text.size()) {
    fail(ErrorCode::kParse, where + ": cannot parse '" + text + "'");
  }
  return v;
}

template <typename T>
void from_text(T& out, const std::string& text, const std::string& where) {
  if constexpr (std::is_same_v<T, std::string>) {
    out = text;
  } else if constexpr (std::is_same_v<T, bool>) {
    if (text == "true" || text == "1") {
      out = true;
    } else if (text == "false" || text == "0") {
      out = false;
    } else {
      fail(ErrorCode::kParse, where + ": expected true or false, got '" + text + "'");
    }
  } else if constexpr (std::is_same_v<T, OptimKind>) {
    if (text == "auto") {
      out = OptimKind::kAuto;
    } else if (text == "sgd") {
      out = OptimKind::kSgd;
    } else if (text == "adamw") {
      out = OptimKind::kAdamW;
    } else {
      fail(ErrorCode::kParse, where + ": optimizer must be auto, sgd or adamw");
    }
  } else if constexpr (std::is_same_v<T, std::array<double, 4>>) {
    std::stringstream ss(text);
    std::string item;
    std::size_t n = 0;
    while (std::getline(ss, item, ',')) {
      if (n == 4) fail(ErrorCode::kParse, where + ": expected 4 comma-separated values");
      out[n++] = parse_num<double>(trim(item), where);
    }
    if (n != 4) fail(ErrorCode::kParse, where + ": expected 4 comma-separated values");
  } else {
    out = parse_num<T>(text, where);
  }
}

template <typename T>
std::string to_text(const T& v) {
  if constexpr (std::is_same_v<T, std::string>) {
    return v;
  } else if constexpr (std::is_same_v<T, bool>) {
    return v ? "true" : "false";
  } else if constexpr (std::is_same_v<T, OptimKind>) {
    return v == OptimKind::kSgd ? "sgd" : v == OptimKind::kAdamW ? "adamw" : "auto";
  } else if constexpr (std::is_same_v<T, std::array<double, 4>>) {
    return fmt(v[0]) + "," + fmt(v[1]) + "," + fmt(v[2]) + "," + fmt(v[3]);
  } else if constexpr (std::is_floating_point_v<T>) {
    return fmt(v);
  } else {
    return std::to_string(v);
  }
}

template <typename T>
Key key(const char* section, const char* name, T RunConfig::*m) {
  return {section, name,
          [m](RunConfig& c, const std::string& text, const std::string& where) { from_text(c.*m, text, where); },
          [m](const RunConfig& c) { return to_text(c.*m); }};
}

const std::vector<Key>& keys() {
  static const std::vector<Key> k{
      key("run", "seed", &RunConfig::seed),
      key("run", "arch", &RunConfig::arch),
      key("run", "workers", &RunConfig::workers),
      key("data", "dataset", &RunConfig::dataset),
      key("data", "tiles", &RunConfig::tiles),
      key("data", "tile_size", &RunConfig::tile_size),
      key("data", "shot_density", &RunConfig::shot_density),
      key("data", "reject_fraction", &RunConfig::reject_fraction),
      key("data", "patch", &RunConfig::patch),
      key("data", "composite_frames", &RunConfig::composite_frames),
      key("model", "stem_width", &RunConfig::stem_width),
      key("model", "bins", &RunConfig::bins),
      key("model", "vit_patch", &RunConfig::vit_patch),
      key("model", "embed", &RunConfig::embed),
      key("model", "blocks", &RunConfig::blocks),
      key("model", "heads", &RunConfig::heads),
      key("model", "mlp_ratio", &RunConfig::mlp_ratio),
      key("model", "l_hat", &RunConfig::l_hat),
      key("optim", "optimizer", &RunConfig::optimizer),
      key("optim", "lr", &RunConfig::lr),
      key("optim", "peak_lr", &RunConfig::peak_lr),
      key("optim", "warmup_start", &RunConfig::warmup_start),
      key("optim", "warmup_epochs", &RunConfig::warmup_epochs),
      key("optim", "epochs", &RunConfig::epochs),
      key("optim", "batch", &RunConfig::batch),
      key("optim", "steps_per_epoch", &RunConfig::steps_per_epoch),
      key("optim", "momentum", &RunConfig::momentum),
      key("optim", "weight_decay", &RunConfig::weight_decay),
      key("optim", "keep_checkpoints", &RunConfig::keep_checkpoints),
      key("optim", "resume", &RunConfig::resume),
      key("loss", "delta", &RunConfig::delta),
      key("loss", "alpha_cr", &RunConfig::alpha_cr),
      key("loss", "betas", &RunConfig::betas),
      key("loss", "bin_width", &RunConfig::bin_width),
      key("loss", "bin_overlap", &RunConfig::bin_overlap),
      key("loss", "adaptive_alpha", &RunConfig::adaptive_alpha),
      key("loss", "adaptive_c", &RunConfig::adaptive_c),
      key("loss", "consensus_tol", &RunConfig::consensus_tol),
      key("kd", "teacher_s1", &RunConfig::teacher_s1),
      key("kd", "teacher_s2", &RunConfig::teacher_s2),
      key("eval", "checkpoint", &RunConfig::checkpoint),
      key("eval", "split", &RunConfig::split),
      key("eval", "gsi_patch", &RunConfig::gsi_patch),
      key("eval", "edges_max", &RunConfig::edges_max),
      key("grid", "cell_size", &RunConfig::cell_size),
      key("grid", "min_shots", &RunConfig::min_shots),
      key("grid", "train_fraction", &RunConfig::train_fraction),
  };
  return k;
}

}  // namespace

void RunConfig::validate() const {
  auto need = [](bool ok, const std::string& msg) { require(ok, ErrorCode::kInvalidArgument, "config: " + msg); };
  need(workers >= 1, "workers must be >= 1");
  need(tiles >= 1 && tile_size >= 16 && tile_size % 16 == 0, "need at least one tile with a side that is a multiple of 16");
  need(shot_density > 0.0 && shot_density <= 1.0, "shot_density must be in (0, 1]");
  need(reject_fraction >= 0.0, "reject_fraction must be >= 0");
  need(patch >= 16 && patch % 16 == 0 && patch <= tile_size, "patch must be a multiple of 16 no larger than tile_size");
  need(stem_width >= 1 && bins >= 2, "stem_width >= 1 and bins >= 2 required");
  need(lr > 0.0 && peak_lr > 0.0 && warmup_start > 0.0, "learning rates must be positive");
  need(warmup_epochs >= 0.0, "warmup_epochs must be >= 0");
  need(epochs >= 1 && batch >= 1, "epochs and batch must be >= 1");
  need(momentum >= 0.0 && momentum < 1.0, "momentum must be in [0, 1)");
  need(keep_checkpoints >= 1, "keep_checkpoints must be >= 1");
  need(delta > 0.0 && alpha_cr >= 0.0, "delta > 0 and alpha_cr >= 0 required");
  for (double b : betas) need(b >= 0.0, "betas must be >= 0");
  need(bin_width > 0.0 && bin_overlap >= 0.0, "bin_width > 0 and bin_overlap >= 0 required");
  need(adaptive_c > 0.0, "adaptive_c must be positive");
  need(consensus_tol > 0.0, "consensus_tol must be positive");
  need(split == "val" || split == "train", "split must be val or train");
  need(gsi_patch >= 8, "gsi_patch must be >= 8");
  need(edges_max > 0.0, "edges_max must be positive");
  need(cell_size > 0.0 && train_fraction >= 0.0 && train_fraction <= 1.0, "bad grid settings");
}

RunConfig parse_ini(std::istream& is) {
  std::map<std::string, const Key*> index;
  for (const auto& k : keys()) index[std::string(k.section) + "." + k.name] = &k;
  std::map<std::string, bool> sections;
  for (const auto& k : keys()) sections[k.section] = true;

  RunConfig cfg;
  std::string line, section;
  std::size_t line_no = 0;
  std::map<std::string, std::size_t> seen;
  while (std::getline(is, line)) {
    ++line_no;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#' || t[0] == ';') continue;
    const std::string where = "config line " + std::to_string(line_no);
    if (t.front() == '[') {
      require(t.back() == ']', ErrorCode::kParse, where + ": unterminated section header");
      section = trim(t.substr(1, t.size() - 2));
      require(sections.count(section) == 1, ErrorCode::kParse, where + ": unknown section [" + section + "]");
      continue;
    }
    const auto eq = t.find('=');
    require(eq != std::string::npos, ErrorCode::kParse, where + ": expected key = value");
    require(!section.empty(), ErrorCode::kParse, where + ": key outside any section");
    const std::string key = trim(t.substr(0, eq));
    const std::string value = trim(t.substr(eq + 1));
    const std::string full = section + "." + key;
    const auto it = index.find(full);
    require(it != index.end(), ErrorCode::kParse, where + ": unknown key '" + full + "'");
    require(seen.emplace(full, line_no).second, ErrorCode::kParse, where + ": duplicate key '" + full + "'");
    it->second->set(cfg, value, where + " (" + full + ")");
  }
  return cfg;
}

void set_value(RunConfig& c, const std::string& dotted_key, const std::string& value) {
  for (const auto& k : keys())
    if (dotted_key == std::string(k.section) + "." + k.name) {
      k.set(c, trim(value), dotted_key);
      return;
    }
  fail(ErrorCode::kParse, "unknown key '" + dotted_key + "'");
}

RunConfig parse_ini_string(const std::string& text) {
  std::istringstream is(text);
  return parse_ini(is);
}

RunConfig load_config(const std::string& path) {
  std::ifstream is(path);
  require(static_cast<bool>(is), ErrorCode::kIo, "cannot read config " + path);
  return parse_ini(is);
}

std::string serialize(const RunConfig& c) {
  std::ostringstream os;
  std::string section;
  for (const auto& k : keys()) {
    if (section != k.section) {
      if (!section.empty()) os << '\n';
      section = k.section;
      os << '[' << section << "]\n";
    }
    os << k.name << " = " << k.get(c) << '\n';
  }
  return os.str();
}

}  // namespace canopy::config
