#include "nudiff/config.hpp"

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace nudiff {

namespace {

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

std::vector<int> parse_int_list(const std::string& v, const std::string& key) {
  std::vector<int> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (item.empty()) throw std::runtime_error("config: empty element in list for key '" + key + "'");
    size_t pos = 0;
    int x = std::stoi(item, &pos);
    if (pos != item.size()) throw std::runtime_error("config: unparsable value for key '" + key + "'");
    out.push_back(x);
  }
  if (out.empty()) throw std::runtime_error("config: empty list for key '" + key + "'");
  return out;
}

double parse_double(const std::string& v, const std::string& key) {
  try {
    size_t pos = 0;
    double x = std::stod(v, &pos);
    if (pos != v.size()) throw std::runtime_error("");
    return x;
  } catch (...) {
    throw std::runtime_error("config: unparsable value for key '" + key + "'");
  }
}

int parse_int(const std::string& v, const std::string& key) {
  try {
    size_t pos = 0;
    long x = std::stol(v, &pos);
    if (pos != v.size()) throw std::runtime_error("");
    return static_cast<int>(x);
  } catch (...) {
    throw std::runtime_error("config: unparsable value for key '" + key + "'");
  }
}

uint64_t parse_u64(const std::string& v, const std::string& key) {
  try {
    size_t pos = 0;
    unsigned long long x = std::stoull(v, &pos);
    if (pos != v.size()) throw std::runtime_error("");
    return static_cast<uint64_t>(x);
  } catch (...) {
    throw std::runtime_error("config: unparsable value for key '" + key + "'");
  }
}

}  // namespace

RunConfig parse_config_text(const std::string& text) {
  RunConfig c;
  std::stringstream ss(text);
  std::string line;
  int lineno = 0;
  while (std::getline(ss, line)) {
    ++lineno;
    size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw std::runtime_error("config: line " + std::to_string(lineno) + " is not key=value");
    std::string key = trim(line.substr(0, eq));
    std::string val = trim(line.substr(eq + 1));
    if (key == "T") c.T = parse_int(val, key);
    else if (key == "beta1") c.beta1 = parse_double(val, key);
    else if (key == "betaT") c.betaT = parse_double(val, key);
    else if (key == "levels") c.levels = parse_int(val, key);
    else if (key == "channels") c.channels = parse_int_list(val, key);
    else if (key == "attn_levels") c.attn_levels = parse_int_list(val, key);
    else if (key == "base_resolution") c.base_resolution = parse_int(val, key);
    else if (key == "blocks") c.blocks = parse_int(val, key);
    else if (key == "lr") c.lr = parse_double(val, key);
    else if (key == "lr_finetune") c.lr_finetune = parse_double(val, key);
    else if (key == "batch") c.batch = parse_int(val, key);
    else if (key == "drop_rate") c.drop_rate = parse_double(val, key);
    else if (key == "steps") c.steps = parse_int(val, key);
    else if (key == "finetune_steps") c.finetune_steps = parse_int(val, key);
    else if (key == "seed") c.seed = parse_u64(val, key);
    else if (key == "guidance_w") c.guidance_w = parse_double(val, key);
    else if (key == "sample_count") c.sample_count = parse_int(val, key);
    else if (key == "tau_s") c.tau_s = parse_double(val, key);
    else if (key == "tau_g") c.tau_g = parse_double(val, key);
    else if (key == "min_marker_area") c.min_marker_area = parse_int(val, key);
    else if (key == "patch_size") c.patch_size = parse_int(val, key);
    else if (key == "patch_stride") c.patch_stride = parse_int(val, key);
    else if (key == "k") c.k = parse_int(val, key);
    else if (key == "kmeans_max_iter") c.kmeans_max_iter = parse_int(val, key);
    else throw std::runtime_error("config: unknown key '" + key + "'");
  }
  validate_config(c);
  return c;
}

RunConfig load_config(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("config: cannot open '" + path + "'");
  std::stringstream buf;
  buf << f.rdbuf();
  return parse_config_text(buf.str());
}

void validate_config(const RunConfig& c) {
  if (c.T < 1) throw std::runtime_error("config: T must be >= 1");
  if (!(c.beta1 > 0.0 && c.beta1 <= c.betaT && c.betaT < 1.0))
    throw std::runtime_error("config: need 0 < beta1 <= betaT < 1");
  if (!(c.drop_rate >= 0.0 && c.drop_rate < 1.0))
    throw std::runtime_error("config: drop_rate must be in [0,1)");
  if (c.guidance_w < -1.0) throw std::runtime_error("config: guidance_w must be >= -1");
  if (c.k < 1) throw std::runtime_error("config: k must be >= 1");
  if (c.levels < 1) throw std::runtime_error("config: levels must be >= 1");
  if (static_cast<int>(c.channels.size()) != c.levels)
    throw std::runtime_error("config: channels list length must equal levels");
  for (int a : c.attn_levels)
    if (a < 1 || a > c.levels) throw std::runtime_error("config: attn_levels out of range");
  if (c.blocks < 1) throw std::runtime_error("config: blocks must be >= 1");
  if (c.base_resolution < 1) throw std::runtime_error("config: base_resolution must be >= 1");
  int div = 1 << (c.levels - 1);
  if (c.base_resolution % div != 0)
    throw std::runtime_error("config: base_resolution must be divisible by 2^(levels-1)");
  if (c.batch < 1) throw std::runtime_error("config: batch must be >= 1");
  if (c.steps < 0 || c.finetune_steps < 0) throw std::runtime_error("config: steps must be >= 0");
  if (c.sample_count < 0) throw std::runtime_error("config: sample_count must be >= 0");
  if (!(c.tau_g >= 0.0 && c.tau_g <= 1.0)) throw std::runtime_error("config: tau_g must be in [0,1]");
  if (c.min_marker_area < 1) throw std::runtime_error("config: min_marker_area must be >= 1");
  if (c.patch_size < 1 || c.patch_stride < 1)
    throw std::runtime_error("config: patch size/stride must be >= 1");
  if (c.kmeans_max_iter < 1) throw std::runtime_error("config: kmeans_max_iter must be >= 1");
}

}  // namespace nudiff
