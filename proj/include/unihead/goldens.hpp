#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <limits>
#include <string>
#include <vector>

#include "json.hpp"

#include "unihead/head.hpp"
#include "unihead/manifest.hpp"
#include "unihead/numkit/digest.hpp"
#include "unihead/numkit/uht.hpp"
#include "unihead/profiler.hpp"

// Regression corpus: one directory per case holding the config, the seeded
// input, the expected outputs, the expected cost report and a manifest with
// SHA-256 digests of every block output.

namespace unihead::goldens {

namespace fs = std::filesystem;

/// A required corpus file is missing or unreadable. Not the same as a mismatch.
class HarnessError : public IoError {
 public:
  using IoError::IoError;
};

struct GoldenCase {
  std::string id;
  HeadConfig config;
  std::size_t H = 12, W = 12;
  std::uint64_t input_seed = 0;
};

inline const std::vector<std::string>& case_files() {
  static const std::vector<std::string> f{"config.json", "input.uht", "cls.uht", "box.uht", "cost.json", "manifest.json"};
  return f;
}

inline HeadConfig base_config() {
  HeadConfig c;
  c.C = 8;
  c.num_classes = 3;
  c.num_anchors = 1;
  c.seed = 0;
  return c;
}

/// (1,n,n) for n = 1..4 at width 1, and widths 1/3/5 on (1,2,2).
inline std::vector<GoldenCase> corpus() {
  std::vector<GoldenCase> out;
  std::uint64_t seed = 101;
  for (std::size_t n = 1; n <= 4; ++n) {
    GoldenCase g{"stack-1-" + std::to_string(n) + "-" + std::to_string(n), base_config(), 12, 12, seed++};
    g.config.n_dat = g.config.n_cit = n;
    out.push_back(g);
  }
  for (std::size_t s : {1, 3, 5}) {
    const std::size_t side = s == 5 ? 10 : 12;
    GoldenCase g{"stripe-" + std::to_string(s), base_config(), side, side, seed++};
    g.config.stripe_width = s;
    out.push_back(g);
  }
  return out;
}

inline const GoldenCase& find_case(const std::string& id) {
  static const auto all = corpus();
  for (const auto& c : all)
    if (c.id == id) return c;
  throw ConfigError("unknown golden case '" + id + "'");
}

/// UNIHEAD_GOLDEN_DIR if set, else `fallback`.
inline fs::path default_root(const fs::path& fallback) {
  if (const char* env = std::getenv("UNIHEAD_GOLDEN_DIR"); env && *env) return fs::path(env);
  return fallback;
}

inline std::string digest(const Tensor<double>& t) {
  const auto bytes = uht::payload(t);
  return sha256_hex(bytes);
}

struct Computed {
  Tensor<double> input;
  Tensor<double> cls, box;
  std::vector<std::pair<std::string, std::string>> layer_digests;
  profiler::CostReport cost;
};

inline Computed compute(const GoldenCase& g, const Tensor<double>& input, const Head<double>& head) {
  Computed c;
  c.input = input;
  const auto trace = head.forward_traced(input);
  for (const auto& [name, t] : trace) c.layer_digests.emplace_back(name, digest(t));
  c.cls = trace[trace.size() - 2].second;
  c.box = trace.back().second;
  c.cost = profiler::count(g.config, g.H, g.W);
  return c;
}

/// Writes the case directory under `root`.
inline fs::path record(const GoldenCase& g, const fs::path& root) {
  const fs::path dir = root / g.id;
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  const auto input = synthetic_input<double>(g.H, g.W, g.config.C, g.input_seed);
  const Head<double> head(g.config);
  const auto c = compute(g, input, head);

  write_json(dir / "config.json", to_json(g.config));
  uht::save(dir / "input.uht", c.input);
  uht::save(dir / "cls.uht", c.cls);
  uht::save(dir / "box.uht", c.box);
  write_json(dir / "cost.json", profiler::to_json(c.cost));

  RunManifest m;
  m.command = "golden record";
  m.config_path = "config.json";
  m.input.kind = "synthetic";
  m.input.H = g.H;
  m.input.W = g.W;
  m.input.C = g.config.C;
  m.input.seed = g.input_seed;
  m.outputs = {"input.uht", "cls.uht", "box.uht", "cost.json"};
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& [name, d] : c.layer_digests) layers.push_back({{"layer", name}, {"sha256", d}});
  m.extra["golden"] = {{"id", g.id},
                       {"H", g.H},
                       {"W", g.W},
                       {"digests", {{"input", digest(c.input)}, {"cls", digest(c.cls)}, {"box", digest(c.box)}}},
                       {"layers", layers}};
  m.write(dir / "manifest.json");
  return dir;
}

enum class Status { pass, mismatch, harness_error };

inline const char* status_name(Status s) {
  switch (s) {
    case Status::pass: return "pass";
    case Status::mismatch: return "mismatch";
    default: return "harness_error";
  }
}

struct ReplayResult {
  std::string id;
  Status status = Status::pass;
  std::vector<std::string> problems;
  std::string first_layer;  // earliest block whose output digest differs
  double max_abs_diff_cls = 0, max_abs_diff_box = 0;

  bool pass() const { return status == Status::pass; }

  nlohmann::json to_json() const {
    nlohmann::json j{{"id", id}, {"status", status_name(status)}, {"problems", problems}};
    if (!first_layer.empty()) j["first_mismatch_layer"] = first_layer;
    if (status == Status::mismatch) j["max_abs_diff"] = {{"cls", max_abs_diff_cls}, {"box", max_abs_diff_box}};
    return j;
  }
};

namespace detail {

inline double max_abs_diff(const Tensor<double>& a, const Tensor<double>& b) {
  if (a.shape() != b.shape()) return std::numeric_limits<double>::infinity();
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::fabs(a[i] - b[i]));
  return m;
}

inline uht::Bytes read_required(const fs::path& p) {
  if (!fs::exists(p)) throw HarnessError("missing golden file " + p.string());
  try {
    return uht::read_file(p);
  } catch (const IoError& e) {
    throw HarnessError(e.what());
  }
}

inline nlohmann::json json_required(const fs::path& p) {
  if (!fs::exists(p)) throw HarnessError("missing golden file " + p.string());
  try {
    return read_json(p);
  } catch (const IoError& e) {
    throw HarnessError(e.what());
  }
}

}  // namespace detail

/// Reruns forward and count for the stored case and compares digests and reports.
/// `head_override` replaces the head built from the stored config (used to show
/// that a perturbed weight is caught and attributed).
inline ReplayResult replay(const fs::path& dir, const Head<double>* head_override = nullptr) {
  ReplayResult r;
  r.id = dir.filename().string();
  try {
    for (const auto& f : case_files())
      if (!fs::exists(dir / f)) throw HarnessError("missing golden file " + (dir / f).string());
    const auto cfg_json = detail::json_required(dir / "config.json");
    const auto manifest = detail::json_required(dir / "manifest.json");
    const auto cost_json = detail::json_required(dir / "cost.json");
    const auto input_bytes = detail::read_required(dir / "input.uht");
    const auto cls_bytes = detail::read_required(dir / "cls.uht");
    const auto box_bytes = detail::read_required(dir / "box.uht");

    HeadConfig cfg;
    nlohmann::json gold;
    uht::Decoded input, cls_stored, box_stored;
    try {
      cfg = config_from_json(cfg_json);
      gold = manifest.at("golden");
      input = uht::decode(input_bytes);
      cls_stored = uht::decode(cls_bytes);
      box_stored = uht::decode(box_bytes);
    } catch (const std::exception& e) {
      throw HarnessError(r.id + ": unreadable golden data: " + e.what());
    }
    if (digest(input.values) != gold.at("digests").at("input").get<std::string>()) {
      throw HarnessError(r.id + ": stored input does not match its recorded digest");
    }
    GoldenCase g{r.id, cfg, input.values.dim(0), input.values.dim(1), 0};

    const Head<double> own(cfg);
    const Head<double>& head = head_override ? *head_override : own;
    const auto c = compute(g, input.values, head);

    const auto& layers = gold.at("layers");
    if (layers.size() != c.layer_digests.size()) {
      r.problems.push_back("block count changed: recorded " + std::to_string(layers.size()) + ", now " +
                           std::to_string(c.layer_digests.size()));
    }
    for (std::size_t i = 0; i < std::min<std::size_t>(layers.size(), c.layer_digests.size()); ++i) {
      if (layers[i].at("sha256").get<std::string>() != c.layer_digests[i].second) {
        r.first_layer = c.layer_digests[i].first;
        r.problems.push_back("first differing block output: " + r.first_layer);
        break;
      }
    }
    const bool cls_ok = digest(c.cls) == gold.at("digests").at("cls").get<std::string>() && uht::encode(c.cls) == cls_bytes;
    const bool box_ok = digest(c.box) == gold.at("digests").at("box").get<std::string>() && uht::encode(c.box) == box_bytes;
    if (!cls_ok || !box_ok) {
      // elementwise only once the digests disagree
      r.max_abs_diff_cls = detail::max_abs_diff(c.cls, cls_stored.values);
      r.max_abs_diff_box = detail::max_abs_diff(c.box, box_stored.values);
      if (!cls_ok) r.problems.push_back("cls digest mismatch");
      if (!box_ok) r.problems.push_back("box digest mismatch");
    }
    if (profiler::to_json(c.cost) != cost_json) r.problems.push_back("cost report differs from cost.json");
    r.status = r.problems.empty() ? Status::pass : Status::mismatch;
  } catch (const HarnessError& e) {
    r.status = Status::harness_error;
    r.problems = {e.what()};
  }
  return r;
}

/// Ids of corpus cases with no directory under `root`.
inline std::vector<std::string> missing_cases(const fs::path& root) {
  std::vector<std::string> out;
  for (const auto& g : corpus())
    if (!fs::is_directory(root / g.id)) out.push_back(g.id);
  return out;
}

struct CorpusResult {
  std::vector<ReplayResult> cases;
  std::vector<std::string> missing;

  bool pass() const {
    if (!missing.empty()) return false;
    for (const auto& c : cases)
      if (!c.pass()) return false;
    return true;
  }
  bool harness_error() const {
    if (!missing.empty()) return true;
    for (const auto& c : cases)
      if (c.status == Status::harness_error) return true;
    return false;
  }
};

/// Replays every corpus case; absent cases are a harness error.
inline CorpusResult replay_all(const fs::path& root) {
  CorpusResult out;
  out.missing = missing_cases(root);
  for (const auto& g : corpus())
    if (fs::is_directory(root / g.id)) out.cases.push_back(replay(root / g.id));
  return out;
}

}  // namespace unihead::goldens
