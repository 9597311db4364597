#include <cstdio>
#include <filesystem>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "unihead.hpp"

using namespace unihead;
namespace fs = std::filesystem;
using nlohmann::json;

#ifndef UNIHEAD_DEFAULT_GOLDEN_DIR
#define UNIHEAD_DEFAULT_GOLDEN_DIR "goldens"
#endif

namespace {

// frozen exit codes
enum Exit : int { kOk = 0, kCheckFailed = 1, kConfig = 2, kShape = 3, kIo = 4, kClosedForm = 5 };

struct Globals {
  bool json_out = false;
  std::uint64_t seed = 0;
  std::size_t threads = 1;
  std::string precision = "f64";
  std::string out = ".";
};

HeadConfig load_config(const std::string& path) {
  if (path.empty()) return HeadConfig{};
  return config_from_json(read_json(path));
}

Precision precision_of(const Globals& g) { return parse_precision(g.precision); }

void require_double(const Globals& g, const char* what) {
  if (precision_of(g) != Precision::f64) throw ConfigError(std::string(what) + " runs in double precision only (--precision f64)");
}

Shape parse_hwc(const std::string& s) {
  Shape out;
  std::stringstream ss(s);
  std::string part;
  while (std::getline(ss, part, 'x')) {
    std::size_t pos = 0;
    unsigned long v = 0;
    try {
      v = std::stoul(part, &pos);
    } catch (const std::exception&) {
      pos = 0;
    }
    if (pos != part.size() || part.empty() || v == 0) throw UsageError("--synthetic expects HxWxC with positive integers, got '" + s + "'");
    out.push_back(v);
  }
  if (out.size() != 3) throw UsageError("--synthetic expects HxWxC, got '" + s + "'");
  return out;
}

void print_reports(const std::vector<oracle::OracleReport>& reports) {
  for (const auto& r : reports) std::cout << r.json_line() << '\n';
}

bool all_pass(const std::vector<oracle::OracleReport>& reports) {
  for (const auto& r : reports)
    if (!r.pass) return false;
  return true;
}

// ---------------------------------------------------------------------------

struct ForwardArgs {
  std::string config, input, synthetic;
};

template <typename T>
int run_forward(const Globals& g, const ForwardArgs& a, RunManifest& m) {
  const HeadConfig cfg = load_config(a.config);
  FeatureMap<T> x;
  if (!a.input.empty()) {
    m.input.kind = "file";
    m.input.path = a.input;
    x = FeatureMap<T>(uht::load(a.input).values.template cast<T>());
  } else {
    const Shape s = parse_hwc(a.synthetic);
    m.input.kind = "synthetic";
    m.input.H = s[0];
    m.input.W = s[1];
    m.input.C = s[2];
    m.input.seed = g.seed;
    x = synthetic_input<T>(s[0], s[1], s[2], g.seed);
  }
  const Head<T> head(cfg);
  head.check_input(x);
  const auto y = head.forward(x);
  const fs::path dir(g.out);
  uht::save(dir / "cls.uht", static_cast<const Tensor<T>&>(y.cls_logits));
  uht::save(dir / "box.uht", static_cast<const Tensor<T>&>(y.box_deltas));
  m.outputs = {(dir / "cls.uht").string(), (dir / "box.uht").string()};
  if (g.json_out) {
    std::cout << json{{"cls", m.outputs[0]}, {"box", m.outputs[1]}, {"cls_shape", y.cls_logits.shape()},
                      {"box_shape", y.box_deltas.shape()}, {"precision", g.precision}}
                     .dump()
              << '\n';
  } else {
    std::cout << "cls " << shape_str(y.cls_logits.shape()) << " -> " << m.outputs[0] << '\n'
              << "box " << shape_str(y.box_deltas.shape()) << " -> " << m.outputs[1] << '\n';
  }
  return kOk;
}

int cmd_forward(const Globals& g, const ForwardArgs& a, RunManifest& m) {
  m.config_path = a.config;
  if (a.input.empty() == a.synthetic.empty()) throw UsageError("forward needs exactly one of --input or --synthetic");
  return precision_of(g) == Precision::f32 ? run_forward<float>(g, a, m) : run_forward<double>(g, a, m);
}

struct FlopsArgs {
  std::string config;
  std::size_t h = 0, w = 0;
  std::size_t baseline_convs = 0;
  bool verify = false;
};

int cmd_flops(const Globals& g, const FlopsArgs& a, RunManifest& m) {
  m.config_path = a.config;
  const HeadConfig cfg = load_config(a.config);
  const auto report = profiler::count(cfg, a.h, a.w);
  json j = profiler::to_json(report);
  std::vector<std::string> failures;
  for (const auto& f : report.failures()) failures.push_back(f.formula_name);
  if (a.verify) {
    // instrumented forward on the same shapes
    const Head<double> head(cfg);
    json mism = json::array();
    for (const auto& d : profiler::diff(report, profiler::measure(head, a.h, a.w))) {
      mism.push_back({{"layer", d.layer},
                      {"symbolic", {{"macs", d.symbolic.macs}, {"non_mac", d.symbolic.non_mac}}},
                      {"measured", {{"macs", d.measured.macs}, {"non_mac", d.measured.non_mac}}}});
      failures.push_back("instrumented count: " + d.layer);
    }
    j["instrumented_mismatches"] = mism;
  }
  if (a.baseline_convs > 0) {
    j["baseline"] = profiler::to_json(profiler::parallel_head_baseline(cfg.C, a.baseline_convs, cfg.num_anchors, cfg.num_classes, a.h, a.w));
  }
  j["failures"] = failures;
  const fs::path path = fs::path(g.out) / "cost.json";
  write_json(path, j);
  m.outputs = {path.string()};
  if (g.json_out) {
    std::cout << j.dump() << '\n';
  } else {
    std::cout << profiler::format_table(report);
    if (a.baseline_convs > 0) {
      std::cout << '\n'
                << profiler::format_table(
                       profiler::parallel_head_baseline(cfg.C, a.baseline_convs, cfg.num_anchors, cfg.num_classes, a.h, a.w));
    }
    std::cout << '\n' << j.dump() << '\n';
  }
  if (!failures.empty()) {
    for (const auto& f : failures) std::cerr << "closed-form mismatch: " << f << '\n';
    return kClosedForm;
  }
  return kOk;
}

struct GradcheckArgs {
  std::string module = "all";
  std::size_t trials = 10;
  double h = 1e-5;
  double tol = 1e-6;
};

int cmd_gradcheck(const Globals& g, const GradcheckArgs& a, RunManifest& m) {
  require_double(g, "gradcheck");
  gradcheck::Options opt;
  opt.h = a.h;
  opt.tol = a.tol;
  opt.trials = a.trials;
  opt.seed = g.seed;
  opt.threads = g.threads;
  std::vector<std::string> modules;
  if (a.module == "all") {
    modules = gradcheck::module_names();
  } else {
    modules = {a.module};
  }
  std::vector<oracle::OracleReport> reports;
  for (const auto& mod : modules) {
    auto r = gradcheck::run_module(mod, opt);
    reports.insert(reports.end(), r.begin(), r.end());
  }
  print_reports(reports);
  m.extra["reports"] = reports.size();
  return all_pass(reports) ? kOk : kCheckFailed;
}

struct OracleArgs {
  std::string check = "all";
  std::size_t trials = 20;
};

int cmd_oracle(const Globals& g, const OracleArgs& a, RunManifest& m) {
  require_double(g, "oracle");
  checks::TrialOptions opt{a.trials, g.seed, g.threads};
  std::vector<oracle::OracleReport> reports;
  auto add = [&](std::vector<oracle::OracleReport> r) { reports.insert(reports.end(), r.begin(), r.end()); };
  if (a.check == "eda-mask" || a.check == "all") add(checks::eda_mask(opt));
  if (a.check == "eq1" || a.check == "all") add(checks::eq1(opt));
  if (a.check == "eq6" || a.check == "all") add(checks::eq6(opt));
  print_reports(reports);
  m.extra["reports"] = reports.size();
  return all_pass(reports) ? kOk : kCheckFailed;
}

int cmd_params(const Globals& g, const std::string& config, RunManifest& m) {
  m.config_path = config;
  const HeadConfig cfg = load_config(config);
  const Head<double> head(cfg);
  const auto store = head.params();
  const auto closed = profiler::closed_form_params(cfg);
  const auto total = store.total_params();
  if (g.json_out) {
    json tensors = json::array();
    head.visit([&](const std::string& n, const Tensor<double>& t) { tensors.push_back({{"name", n}, {"shape", t.shape()}, {"count", t.size()}}); });
    std::cout << json{{"tensors", tensors}, {"total", total}, {"closed_form", closed}, {"match", total == closed}}.dump() << '\n';
  } else {
    head.visit([&](const std::string& n, const Tensor<double>& t) { std::cout << n << ' ' << shape_str(t.shape()) << ' ' << t.size() << '\n'; });
    std::cout << "total " << total << "  closed form " << closed << (total == closed ? "  match" : "  MISMATCH") << '\n';
  }
  if (total != closed) {
    std::cerr << "closed-form mismatch: head params " << total << " vs " << closed << '\n';
    return kClosedForm;
  }
  return kOk;
}

struct GoldenArgs {
  std::string action;
  std::string case_id = "all";
  std::string root;
};

int cmd_golden(const Globals& g, const GoldenArgs& a, RunManifest& m) {
  require_double(g, "golden");
  const fs::path root = a.root.empty() ? goldens::default_root(UNIHEAD_DEFAULT_GOLDEN_DIR) : fs::path(a.root);
  m.extra["golden_root"] = root.string();
  std::vector<goldens::GoldenCase> cases;
  if (a.case_id == "all") {
    cases = goldens::corpus();
  } else {
    cases = {goldens::find_case(a.case_id)};
  }
  if (a.action == "record") {
    for (const auto& c : cases) {
      const auto dir = goldens::record(c, root);
      m.outputs.push_back(dir.string());
      std::cout << (g.json_out ? json{{"id", c.id}, {"recorded", dir.string()}}.dump() : "recorded " + dir.string()) << '\n';
    }
    return kOk;
  }
  bool harness = false, ok = true;
  std::vector<goldens::ReplayResult> results;
  if (a.case_id == "all") {
    const auto all = goldens::replay_all(root);
    for (const auto& id : all.missing) {
      std::cerr << "missing golden case " << (root / id).string() << '\n';
      std::cout << json{{"id", id}, {"status", "harness_error"}, {"problems", {"case directory missing"}}}.dump() << '\n';
    }
    harness = all.harness_error();
    ok = all.pass();
    results = all.cases;
  } else {
    results = {goldens::replay(root / a.case_id)};
    harness = results[0].status == goldens::Status::harness_error;
    ok = results[0].pass();
  }
  for (const auto& r : results) {
    if (g.json_out) {
      std::cout << r.to_json().dump() << '\n';
    } else {
      std::cout << goldens::status_name(r.status) << "  " << r.id;
      for (const auto& p : r.problems) std::cout << "  [" << p << ']';
      std::cout << '\n';
    }
  }
  if (harness) return kIo;
  return ok ? kOk : kCheckFailed;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"unihead: detection head reference implementation"};
  app.require_subcommand(1);
  app.fallthrough();  // global flags may also follow the subcommand
  app.set_version_flag("--version", std::string(kVersion));
  // gradcheck's --h step would collide with the default -h
  app.set_help_flag("--help", "print this help message and exit");
  Globals g;
  app.add_flag("--json", g.json_out, "machine-readable output");
  app.add_option("--seed", g.seed, "seed for synthetic inputs and random trials");
  app.add_option("--threads", g.threads, "worker threads for trial-parallel commands")->check(CLI::PositiveNumber);
  app.add_option("--precision", g.precision, "f32 | f64")->check(CLI::IsMember({"f32", "f64"}));
  app.add_option("--out", g.out, "directory for outputs and the run manifest");

  ForwardArgs fa;
  auto* forward = app.add_subcommand("forward", "run the head on a UHT tensor or a seeded synthetic input");
  forward->add_option("--config", fa.config, "head config JSON (defaults if omitted)");
  forward->add_option("--input", fa.input, "input UHT file");
  forward->add_option("--synthetic", fa.synthetic, "HxWxC synthetic input");

  FlopsArgs fl;
  auto* flops = app.add_subcommand("flops", "per-layer MAC / parameter report with closed-form checks");
  flops->add_option("--config", fl.config, "head config JSON (defaults if omitted)");
  flops->add_option("--H", fl.h, "input height")->required();
  flops->add_option("--W", fl.w, "input width")->required();
  flops->add_option("--baseline", fl.baseline_convs, "also report a parallel-tower baseline with N convs per tower");
  flops->add_flag("--verify", fl.verify, "cross-check against an instrumented forward");

  GradcheckArgs ga;
  auto* grad = app.add_subcommand("gradcheck", "analytic vs. central-difference gradients");
  grad->add_option("--module", ga.module, "module to check")->check(CLI::IsMember({"all", "numkit", "deform", "dat", "cit", "head"}));
  grad->add_option("--trials", ga.trials, "random trials per module")->check(CLI::PositiveNumber);
  grad->add_option("--h", ga.h, "central-difference step");
  grad->add_option("--tol", ga.tol, "max relative error");

  OracleArgs oa;
  auto* orc = app.add_subcommand("oracle", "production kernels vs. naive references");
  orc->add_option("--check", oa.check, "which comparison")->check(CLI::IsMember({"all", "eda-mask", "eq1", "eq6"}));
  orc->add_option("--trials", oa.trials, "random trials per comparison")->check(CLI::PositiveNumber);

  std::string params_config;
  auto* params = app.add_subcommand("params", "parameter tensors and totals");
  params->add_option("--config", params_config, "head config JSON (defaults if omitted)");

  GoldenArgs gl;
  auto* golden = app.add_subcommand("golden", "record or replay the regression corpus");
  golden->add_option("action", gl.action, "record | replay")->required()->check(CLI::IsMember({"record", "replay"}));
  golden->add_option("--case", gl.case_id, "case id or 'all'");
  golden->add_option("--root", gl.root, "corpus root (default: $UNIHEAD_GOLDEN_DIR or the source tree)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kConfig;
  }

  RunManifest m;
  m.argv.assign(argv, argv + argc);
  int code = kOk;
  try {
    std::error_code ec;
    fs::create_directories(g.out, ec);
    if (ec) throw IoError("cannot create output directory " + g.out + ": " + ec.message());
    if (*forward) {
      m.command = "forward";
      code = cmd_forward(g, fa, m);
    } else if (*flops) {
      m.command = "flops";
      code = cmd_flops(g, fl, m);
    } else if (*grad) {
      m.command = "gradcheck";
      code = cmd_gradcheck(g, ga, m);
    } else if (*orc) {
      m.command = "oracle";
      code = cmd_oracle(g, oa, m);
    } else if (*params) {
      m.command = "params";
      code = cmd_params(g, params_config, m);
    } else if (*golden) {
      m.command = "golden " + gl.action;
      code = cmd_golden(g, gl, m);
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    m.message = e.what();
    code = kConfig;
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    m.message = e.what();
    code = kConfig;
  } catch (const ShapeError& e) {
    std::cerr << "shape error: " << e.what() << '\n';
    m.message = e.what();
    code = kShape;
  } catch (const IoError& e) {
    std::cerr << "i/o error: " << e.what() << '\n';
    m.message = e.what();
    code = kIo;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << '\n';
    m.message = e.what();
    code = kCheckFailed;
  }
  m.exit_status = code;
  try {
    m.write(fs::path(g.out) / "manifest.json");
  } catch (const IoError& e) {
    std::cerr << "i/o error: " << e.what() << '\n';
    if (code == kOk) code = kIo;
  }
  return code;
}
