#pragma once

// File formats: SPFV feature files, scenario manifests, model checkpoints
// and run logs. Binary formats are little-endian regardless of host.

#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <set>
#include <sstream>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "spurcl/error.hpp"
#include "spurcl/metrics.hpp"
#include "spurcl/nn.hpp"
#include "spurcl/sample.hpp"
#include "spurcl/scenario.hpp"

namespace spurcl::io {

using Bytes = std::vector<std::uint8_t>;

namespace detail {

inline void put_u16(Bytes& out, std::uint16_t v) {
  out.push_back(static_cast<std::uint8_t>(v & 0xff));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
}

inline void put_u32(Bytes& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xff));
}

inline void put_f32(Bytes& out, float f) { put_u32(out, std::bit_cast<std::uint32_t>(f)); }

inline std::uint16_t get_u16(std::span<const std::uint8_t> b, std::size_t at) {
  return static_cast<std::uint16_t>(b[at] | (b[at + 1] << 8));
}

inline std::uint32_t get_u32(std::span<const std::uint8_t> b, std::size_t at) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[at + static_cast<std::size_t>(i)]) << (8 * i);
  return v;
}

inline float get_f32(std::span<const std::uint8_t> b, std::size_t at) { return std::bit_cast<float>(get_u32(b, at)); }

}  // namespace detail

inline Bytes read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  return Bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

inline void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("write failed: " + path.string());
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  write_file(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

inline std::string read_text(const std::filesystem::path& path) {
  const auto b = read_file(path);
  return std::string(b.begin(), b.end());
}

// ---------------------------------------------------------------------------
// SPFV: "SPFV" | u32 version=1 | u32 n | u32 dim | n*dim f32 | n u16 labels |
//       n u16 task ids | n u8 spurious flags

inline constexpr std::uint32_t kSpfvVersion = 1;
inline constexpr std::size_t kSpfvHeader = 16;

inline std::size_t spfv_size(std::size_t n, std::size_t dim) { return kSpfvHeader + 4 * n * dim + 5 * n; }

inline Bytes write_spfv(std::span<const Sample> samples) {
  const std::size_t n = samples.size();
  const std::size_t dim = n == 0 ? 0 : samples.front().x.size();
  if (n > 0xffffffffULL || dim > 0xffffffffULL) throw DataError("spfv: n or dim exceeds u32");
  Bytes out;
  out.reserve(spfv_size(n, dim));
  for (char c : {'S', 'P', 'F', 'V'}) out.push_back(static_cast<std::uint8_t>(c));
  detail::put_u32(out, kSpfvVersion);
  detail::put_u32(out, static_cast<std::uint32_t>(n));
  detail::put_u32(out, static_cast<std::uint32_t>(dim));
  for (const auto& s : samples) {
    if (s.x.size() != dim) throw DataError("spfv: samples differ in dimension");
    for (float v : s.x) detail::put_f32(out, v);
  }
  for (const auto& s : samples) {
    if (s.y < 0 || s.y > 0xffff) throw DataError("spfv: label does not fit u16");
    detail::put_u16(out, static_cast<std::uint16_t>(s.y));
  }
  for (const auto& s : samples) {
    if (s.task_id < 0 || s.task_id > 0xffff) throw DataError("spfv: task id does not fit u16");
    detail::put_u16(out, static_cast<std::uint16_t>(s.task_id));
  }
  for (const auto& s : samples) out.push_back(s.spurious_present ? 1 : 0);
  return out;
}

/// Samples come back with mode_id and spurious_id unknown (-1).
inline Dataset read_spfv(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < kSpfvHeader) throw FormatError("spfv: file shorter than header");
  if (std::memcmp(bytes.data(), "SPFV", 4) != 0) throw FormatError("spfv: bad magic");
  const std::uint32_t version = detail::get_u32(bytes, 4);
  if (version != kSpfvVersion) throw FormatError("spfv: unsupported version " + std::to_string(version));
  const std::size_t n = detail::get_u32(bytes, 8);
  const std::size_t dim = detail::get_u32(bytes, 12);
  if (bytes.size() != spfv_size(n, dim)) {
    throw FormatError("spfv: length mismatch (have " + std::to_string(bytes.size()) + " bytes, header implies " +
                      std::to_string(spfv_size(n, dim)) + ")");
  }
  Dataset out(n);
  std::size_t at = kSpfvHeader;
  for (auto& s : out) {
    s.x.resize(dim);
    for (auto& v : s.x) {
      v = detail::get_f32(bytes, at);
      at += 4;
    }
  }
  for (auto& s : out) { s.y = detail::get_u16(bytes, at); at += 2; }
  for (auto& s : out) { s.task_id = detail::get_u16(bytes, at); at += 2; }
  for (auto& s : out) {
    if (bytes[at] > 1) throw FormatError("spfv: spurious flag must be 0 or 1");
    s.spurious_present = bytes[at++] == 1;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Scenario manifest

struct CifarFiles {
  std::vector<std::string> train_files;
  std::vector<std::string> test_files;
  std::size_t train_per_task = 0;
  std::size_t eval_per_task = 0;
  std::size_t clean_test_size = 0;
  friend bool operator==(const CifarFiles&, const CifarFiles&) = default;
};

/// Everything needed to regenerate a scenario bit-identically.
struct ScenarioManifest {
  std::string source = "synth";  // "synth" | "cifar10"
  std::uint64_t seed = 0;
  int n_tasks = 10;
  double correlation_p = 1.0;
  double support_s = 1.0;
  int square_size = 2;
  std::vector<std::array<Rgb, 2>> colors;
  SynthSpec synth;
  CifarFiles cifar;
  friend bool operator==(const ScenarioManifest&, const ScenarioManifest&) = default;
};

inline SynthSpec to_synth_spec(const ScenarioManifest& m) {
  SynthSpec s = m.synth;
  s.seed = m.seed;
  s.n_tasks = m.n_tasks;
  s.correlation_p = m.correlation_p;
  s.support_s = m.support_s;
  return s;
}

inline SpuriousSpec to_spurious_spec(const ScenarioManifest& m) {
  SpuriousSpec s;
  s.seed = m.seed;
  s.n_tasks = m.n_tasks;
  s.correlation_p = m.correlation_p;
  s.support_s = m.support_s;
  s.square_size = m.square_size;
  s.colors = m.colors;
  s.train_per_task = m.cifar.train_per_task;
  s.eval_per_task = m.cifar.eval_per_task;
  s.clean_test_size = m.cifar.clean_test_size;
  return s;
}

inline nlohmann::json synth_to_json(const SynthSpec& s) {
  return {{"dim", s.dim},
          {"n_classes", s.n_classes},
          {"modes_per_class", s.modes_per_class},
          {"mean_scale", s.mean_scale},
          {"mode_std", s.mode_std},
          {"spurious_block", {s.spurious_begin, s.spurious_end}},
          {"spurious_magnitude", s.spurious_magnitude},
          {"n_train", s.n_train},
          {"n_eval", s.n_eval},
          {"n_clean_test", s.n_clean_test},
          {"classes_per_task", s.classes_per_task}};
}

inline nlohmann::json write_manifest(const ScenarioManifest& m) {
  nlohmann::json colors = nlohmann::json::array();
  for (const auto& pair : m.colors) {
    nlohmann::json task = nlohmann::json::array();
    for (const auto& c : pair) task.push_back({c.r, c.g, c.b});
    colors.push_back(task);
  }
  nlohmann::json j = {{"seed", m.seed},
                      {"n_tasks", m.n_tasks},
                      {"correlation_p", m.correlation_p},
                      {"support_s", m.support_s},
                      {"square_size", m.square_size},
                      {"colors", colors},
                      {"source", m.source}};
  if (m.source == "synth") j["synth"] = synth_to_json(m.synth);
  if (m.source == "cifar10") {
    j["cifar"] = {{"train_files", m.cifar.train_files},
                  {"test_files", m.cifar.test_files},
                  {"train_per_task", m.cifar.train_per_task},
                  {"eval_per_task", m.cifar.eval_per_task},
                  {"clean_test_size", m.cifar.clean_test_size}};
  }
  return j;
}

/// Strict JSON field access: typed getters, required/optional keys, and
/// rejection of unknown keys, all reporting a dotted field path.
class JsonReader {
 public:
  JsonReader(const nlohmann::json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_, "expected an object");
  }

  std::string field(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }
  bool has(const std::string& key) const { return j_.contains(key); }
  const nlohmann::json& raw(const std::string& key) const {
    seen_.insert(key);
    if (!j_.contains(key)) throw ConfigError(field(key), "missing required field");
    return j_.at(key);
  }

  template <typename T>
  T get(const std::string& key) const {
    const auto& v = raw(key);
    try {
      if constexpr (std::is_same_v<T, bool>) {
        if (!v.is_boolean()) throw ConfigError(field(key), "expected a boolean");
      } else if constexpr (std::is_integral_v<T>) {
        if (!v.is_number_integer()) throw ConfigError(field(key), "expected an integer");
        if constexpr (std::is_unsigned_v<T>)
          if (v.is_number_integer() && !v.is_number_unsigned() && v.get<long long>() < 0)
            throw ConfigError(field(key), "expected a non-negative integer");
      } else if constexpr (std::is_floating_point_v<T>) {
        if (!v.is_number()) throw ConfigError(field(key), "expected a number");
      } else if constexpr (std::is_same_v<T, std::string>) {
        if (!v.is_string()) throw ConfigError(field(key), "expected a string");
      }
      return v.get<T>();
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(field(key), e.what());
    }
  }

  template <typename T>
  T get_or(const std::string& key, T fallback) const {
    if (!has(key)) return fallback;
    return get<T>(key);
  }

  JsonReader object(const std::string& key) const { return JsonReader(raw(key), field(key)); }

  void reject_unknown() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!seen_.count(it.key())) throw ConfigError(field(it.key()), "unknown field");
  }

  const nlohmann::json& json() const { return j_; }
  const std::string& path() const { return path_; }

 private:
  const nlohmann::json& j_;
  std::string path_;
  mutable std::set<std::string> seen_;
};

inline SynthSpec read_synth(const JsonReader& r, SynthSpec s = {}) {
  s.dim = r.get_or("dim", s.dim);
  s.n_classes = r.get_or("n_classes", s.n_classes);
  s.modes_per_class = r.get_or("modes_per_class", s.modes_per_class);
  s.mean_scale = r.get_or("mean_scale", s.mean_scale);
  s.mode_std = r.get_or("mode_std", s.mode_std);
  if (r.has("spurious_block")) {
    const auto& b = r.raw("spurious_block");
    if (!b.is_array() || b.size() != 2 || !b[0].is_number_integer() || !b[1].is_number_integer())
      throw ConfigError(r.field("spurious_block"), "expected [begin, end]");
    s.spurious_begin = b[0].get<int>();
    s.spurious_end = b[1].get<int>();
  }
  s.spurious_magnitude = r.get_or("spurious_magnitude", s.spurious_magnitude);
  s.n_train = r.get_or("n_train", s.n_train);
  s.n_eval = r.get_or("n_eval", s.n_eval);
  s.n_clean_test = r.get_or("n_clean_test", s.n_clean_test);
  s.classes_per_task = r.get_or("classes_per_task", s.classes_per_task);
  r.reject_unknown();
  return s;
}

inline std::vector<std::array<Rgb, 2>> read_colors(const nlohmann::json& j, const std::string& path) {
  if (!j.is_array()) throw ConfigError(path, "expected [[task][class][r,g,b]]");
  std::vector<std::array<Rgb, 2>> out;
  for (std::size_t t = 0; t < j.size(); ++t) {
    const std::string tp = path + "[" + std::to_string(t) + "]";
    if (!j[t].is_array() || j[t].size() != 2) throw ConfigError(tp, "expected two class colors");
    std::array<Rgb, 2> pair;
    for (std::size_t c = 0; c < 2; ++c) {
      const auto& rgb = j[t][c];
      const std::string cp = tp + "[" + std::to_string(c) + "]";
      if (!rgb.is_array() || rgb.size() != 3) throw ConfigError(cp, "expected [r,g,b]");
      std::array<std::uint8_t, 3> ch{};
      for (std::size_t k = 0; k < 3; ++k) {
        if (!rgb[k].is_number_integer() || rgb[k].get<long long>() < 0 || rgb[k].get<long long>() > 255)
          throw ConfigError(cp, "channel values must be integers in 0..255");
        ch[k] = static_cast<std::uint8_t>(rgb[k].get<int>());
      }
      pair[c] = Rgb{ch[0], ch[1], ch[2]};
    }
    out.push_back(pair);
  }
  return out;
}

inline ScenarioManifest read_manifest(const nlohmann::json& j) {
  JsonReader r(j, "manifest");
  ScenarioManifest m;
  m.seed = r.get<std::uint64_t>("seed");
  m.n_tasks = r.get<int>("n_tasks");
  m.correlation_p = r.get<double>("correlation_p");
  m.support_s = r.get<double>("support_s");
  m.square_size = r.get<int>("square_size");
  m.colors = read_colors(r.raw("colors"), r.field("colors"));
  m.source = r.get<std::string>("source");
  if (m.source == "synth") {
    m.synth = read_synth(r.object("synth"));
  } else if (m.source == "cifar10") {
    const auto c = r.object("cifar");
    m.cifar.train_files = c.get<std::vector<std::string>>("train_files");
    m.cifar.test_files = c.get<std::vector<std::string>>("test_files");
    m.cifar.train_per_task = c.get_or<std::size_t>("train_per_task", 0);
    m.cifar.eval_per_task = c.get_or<std::size_t>("eval_per_task", 0);
    m.cifar.clean_test_size = c.get_or<std::size_t>("clean_test_size", 0);
    c.reject_unknown();
  } else {
    throw ConfigError(r.field("source"), "expected \"synth\" or \"cifar10\"");
  }
  r.reject_unknown();
  if (!m.colors.empty() && m.colors.size() != static_cast<std::size_t>(m.n_tasks))
    throw ConfigError(r.field("colors"), "expected one color pair per task");
  if (m.source == "synth") validate(to_synth_spec(m));
  else validate(to_spurious_spec(m));
  return m;
}

inline Scenario build_scenario(const ScenarioManifest& m, ScenarioManifest* resolved = nullptr) {
  if (m.source == "synth") {
    if (resolved) *resolved = m;
    return build_scenario(to_synth_spec(m));
  }
  std::vector<cifar::Record> train, test;
  for (const auto& f : m.cifar.train_files) {
    auto part = cifar::read_batch_file(f);
    train.insert(train.end(), std::make_move_iterator(part.begin()), std::make_move_iterator(part.end()));
  }
  for (const auto& f : m.cifar.test_files) {
    auto part = cifar::read_batch_file(f);
    test.insert(test.end(), std::make_move_iterator(part.begin()), std::make_move_iterator(part.end()));
  }
  SpuriousSpec spec = to_spurious_spec(m);
  resolve_colors(spec);
  if (resolved) {
    *resolved = m;
    resolved->colors = spec.colors;
  }
  return build_scenario(spec, make_cifar_source(train, test, m.seed));
}

// ---------------------------------------------------------------------------
// Checkpoints: "SPCK" | u32 header length | JSON header | f32 payload

inline Bytes write_checkpoint(const nn::ModelParams& p, std::uint64_t seed) {
  nlohmann::json header = {{"version", 1},
                           {"seed", seed},
                           {"input_size", p.input_size},
                           {"dropout_rate", p.dropout_rate},
                           {"trunk_frozen", p.trunk_frozen}};
  header["trunk"] = nlohmann::json::array();
  for (const auto& l : p.trunk) header["trunk"].push_back({{"out", l.weight.rows}, {"in", l.weight.cols}});
  header["heads"] = nlohmann::json::array();
  for (const auto& h : p.heads) {
    header["heads"].push_back({{"kind", nn::to_string(h.kind)},
                               {"outputs", h.n_outputs()},
                               {"latent", h.latent_dim()},
                               {"frozen", h.frozen},
                               {"mean_counts", h.mean_counts}});
  }
  const std::string text = header.dump();
  Bytes out{'S', 'P', 'C', 'K'};
  detail::put_u32(out, static_cast<std::uint32_t>(text.size()));
  out.insert(out.end(), text.begin(), text.end());
  auto put_all = [&](const std::vector<double>& v) {
    for (double d : v) detail::put_f32(out, static_cast<float>(d));
  };
  for (const auto& l : p.trunk) {
    put_all(l.weight.values);
    put_all(l.bias);
  }
  for (const auto& h : p.heads) {
    if (h.kind == nn::HeadKind::MeanLayer) {
      put_all(h.class_means.values);
    } else {
      put_all(h.weight.values);
      put_all(h.bias);
    }
  }
  return out;
}

inline nn::ModelParams read_checkpoint(std::span<const std::uint8_t> bytes, std::uint64_t* seed_out = nullptr) {
  if (bytes.size() < 8 || std::memcmp(bytes.data(), "SPCK", 4) != 0) throw FormatError("checkpoint: bad magic");
  const std::size_t hlen = detail::get_u32(bytes, 4);
  if (bytes.size() < 8 + hlen) throw FormatError("checkpoint: truncated header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.begin() + 8, bytes.begin() + 8 + static_cast<std::ptrdiff_t>(hlen));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint: bad header: ") + e.what());
  }
  std::size_t at = 8 + hlen;
  auto take = [&](std::vector<double>& v, std::size_t n) {
    if (at + 4 * n > bytes.size()) throw FormatError("checkpoint: truncated payload");
    v.resize(n);
    for (auto& d : v) {
      d = detail::get_f32(bytes, at);
      at += 4;
    }
  };
  nn::ModelParams p;
  try {
    p.input_size = header.at("input_size").get<std::size_t>();
    p.dropout_rate = header.at("dropout_rate").get<double>();
    p.trunk_frozen = header.at("trunk_frozen").get<bool>();
    if (seed_out) *seed_out = header.at("seed").get<std::uint64_t>();
    for (const auto& l : header.at("trunk")) {
      nn::DenseLayer layer;
      layer.weight.rows = l.at("out").get<std::size_t>();
      layer.weight.cols = l.at("in").get<std::size_t>();
      take(layer.weight.values, layer.weight.rows * layer.weight.cols);
      take(layer.bias, layer.weight.rows);
      p.trunk.push_back(std::move(layer));
    }
    for (const auto& hj : header.at("heads")) {
      nn::Head h;
      h.kind = nn::parse_head_kind(hj.at("kind").get<std::string>());
      h.frozen = hj.at("frozen").get<bool>();
      const auto n = hj.at("outputs").get<std::size_t>();
      const auto d = hj.at("latent").get<std::size_t>();
      if (h.kind == nn::HeadKind::MeanLayer) {
        h.class_means.rows = n;
        h.class_means.cols = d;
        take(h.class_means.values, n * d);
        h.mean_counts = hj.at("mean_counts").get<std::vector<std::size_t>>();
      } else {
        h.weight.rows = n;
        h.weight.cols = d;
        take(h.weight.values, n * d);
        if (h.kind == nn::HeadKind::Linear) take(h.bias, n);
      }
      p.heads.push_back(std::move(h));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint: bad header: ") + e.what());
  }
  if (at != bytes.size()) throw FormatError("checkpoint: trailing bytes after payload");
  return p;
}

// ---------------------------------------------------------------------------
// Run logs

inline std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline const char* kRunCsvHeader = "run_id,task_idx,epoch,split,metric,value";

inline std::string run_record_csv(const RunRecord& r) {
  std::string out = std::string(kRunCsvHeader) + "\n";
  for (const auto& e : r.entries) {
    out += r.run_id + "," + std::to_string(e.task_idx) + "," + std::to_string(e.epoch) + "," + e.split + "," +
           e.metric + "," + format_double(e.value) + "\n";
  }
  return out;
}

inline RunRecord parse_run_record_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != kRunCsvHeader) throw FormatError("run csv: bad header");
  RunRecord r;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> cols;
    std::stringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) cols.push_back(cell);
    if (cols.size() != 6) throw FormatError("run csv: line " + std::to_string(lineno) + " has " +
                                            std::to_string(cols.size()) + " columns");
    try {
      r.run_id = cols[0];
      r.add(std::stoi(cols[1]), std::stoi(cols[2]), cols[3], cols[4], std::stod(cols[5]));
    } catch (const std::logic_error&) {
      throw FormatError("run csv: bad number on line " + std::to_string(lineno));
    }
  }
  return r;
}

inline nlohmann::json run_summary(const RunRecord& r) {
  nlohmann::json j = {{"run_id", r.run_id}, {"seed", r.seed}, {"config", r.config}};
  const auto clean = r.post_task(kSplitCleanTest);
  j["post_task_clean_test"] = clean;
  if (!clean.empty()) {
    j["omega"] = omega(clean);
    j["final_clean_test"] = clean.back();
  }
  nlohmann::json overfit = nlohmann::json::array();
  for (int t = 0; t < r.n_tasks(); ++t) {
    const auto spur = r.find(t, kPostTaskEpoch, eval_spurious_split(t), "accuracy");
    const auto cl = r.find(t, kPostTaskEpoch, kSplitCleanTest, "accuracy");
    if (spur && cl) overfit.push_back({{"task", t}, {"eval_spurious", *spur}, {"clean_test", *cl}});
  }
  j["overfit"] = overfit;
  return j;
}

}  // namespace spurcl::io
