// dpalab: benchmark generation, base pretraining, continual runs, reports,
// verification suites, gradient checks and cost tables.
//
// Exit codes: 0 success, 1 verification or runtime failure, 2 usage or
// config error.

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "dpalab/config.hpp"
#include "dpalab/costing.hpp"
#include "dpalab/harness.hpp"
#include "dpalab/verify.hpp"

#ifndef DPALAB_VERSION
#define DPALAB_VERSION "0.1.0"
#endif

namespace fs = std::filesystem;
using nlohmann::json;
using namespace dpalab;

namespace {

struct Common {
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string config;
  std::optional<int> threads;
};

void add_common(CLI::App* cmd, Common& c, const std::string& default_out) {
  c.out = default_out;
  cmd->add_option("--seed", c.seed, "random seed (default: $DPA_LAB_SEED, else 0)");
  cmd->add_option("--out", c.out, "output directory")->capture_default_str();
  cmd->add_option("--threads", c.threads, "worker threads (default: $DPA_LAB_THREADS, else config)");
}

std::optional<std::uint64_t> env_u64(const char* name) {
  const char* v = std::getenv(name);
  if (!v || !*v) return std::nullopt;
  try {
    std::size_t pos = 0;
    const unsigned long long x = std::stoull(v, &pos);
    if (pos != std::string(v).size()) throw std::invalid_argument(v);
    return x;
  } catch (const std::exception&) {
    throw ConfigError(std::string(name) + " is not a non-negative integer: '" + v + "'");
  }
}

std::uint64_t resolve_seed(const Common& c) {
  if (c.seed) return *c.seed;
  return env_u64("DPA_LAB_SEED").value_or(0);
}

LabConfig resolve_config(const Common& c) {
  LabConfig cfg = c.config.empty() ? LabConfig{} : load_config(c.config);
  if (c.threads) {
    cfg.train.threads = *c.threads;
  } else if (auto t = env_u64("DPA_LAB_THREADS")) {
    cfg.train.threads = static_cast<int>(*t);
  }
  if (cfg.train.threads < 1) throw ConfigError("threads must be >= 1");
  return cfg;
}

void print_line(const std::string& s) { std::cout << s << std::endl; }

void write_json(const fs::path& p, const json& j) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream os(p);
  if (!os) throw ConfigError("cannot write " + p.string());
  os << j.dump(2) << '\n';
}

json read_json(const fs::path& p) {
  std::ifstream is(p);
  if (!is) throw ConfigError("cannot read " + p.string());
  try {
    return json::parse(is);
  } catch (const json::exception& e) {
    throw ConfigError(p.string() + " is not valid JSON: " + e.what());
  }
}

void write_manifest(const fs::path& dir, const std::string& command, const std::vector<std::uint64_t>& seeds,
                    const LabConfig& cfg, const json& extra = json::object(),
                    const std::string& file = "manifest.json") {
  json m{{"command", command},
         {"version", DPALAB_VERSION},
         {"seeds", seeds},
         {"config_hash", config_hash(cfg)},
         {"config", to_json(cfg)}};
  for (const auto& [k, v] : extra.items()) m[k] = v;
  write_json(dir / file, m);
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(item);
  return out;
}

std::vector<TaskDataset> load_or_generate_bench(const std::string& dir, const LabConfig& cfg) {
  if (dir.empty()) return generate(cfg.bench);
  std::vector<TaskDataset> tasks;
  for (int t = 0;; ++t) {
    const fs::path p = fs::path(dir) / ("task_" + std::to_string(t));
    if (!fs::exists(p)) break;
    tasks.push_back(load_task(p));
  }
  if (tasks.empty()) throw ConfigError("no task_<i> directories under " + dir);
  return tasks;
}

ToyVlodModel load_base(const std::string& dir, const LabConfig& cfg) {
  ToyVlodModel m(cfg.model_config());
  m.load_parameters(load_checkpoint(fs::path(dir) / "base"));
  m.set_trainable(false);
  return m;
}

// ---- commands ----

int cmd_gen_bench(const Common& c) {
  LabConfig cfg = resolve_config(c);
  const std::uint64_t seed = resolve_seed(c);
  cfg.bench.seed = seed;
  const auto tasks = generate(cfg.bench);
  json summary = json::array();
  for (const auto& t : tasks) {
    save_task(t, fs::path(c.out) / ("task_" + std::to_string(t.task_id)));
    summary.push_back({{"task", t.task_id}, {"classes", t.class_names}, {"train", t.train.size()},
                       {"test", t.test.size()}});
    print_line(Record().kv("event", "task_written").kv("task", t.task_id).kv("train", t.train.size()).kv(
        "test", t.test.size()).str());
  }
  write_manifest(c.out, "gen-bench", {seed}, cfg, {{"tasks", summary}});
  return 0;
}

int cmd_pretrain(const Common& c) {
  LabConfig cfg = resolve_config(c);
  const std::uint64_t seed = resolve_seed(c);
  cfg.model.seed = seed;
  ToyVlodModel base = pretrain_base(cfg.model_config(), cfg.bench, cfg.pretrain, print_line);
  fs::create_directories(c.out);
  base.save(fs::path(c.out) / "base");
  std::ostringstream h;
  h << std::hex << base.hash();
  write_manifest(c.out, "pretrain-base", {seed}, cfg,
                 {{"parameters", base.parameter_count()}, {"base_hash", h.str()}});
  print_line(Record().kv("event", "base_written").kv("path", (fs::path(c.out) / "base").string()).kv(
      "hash", h.str()).str());
  return 0;
}

struct TrainArgs {
  std::string methods = "idpa";
  std::string seeds;
  std::string base;
  std::string bench;
  bool forced_routing = false;
  bool fixed_union = false;
};

int cmd_train(const Common& c, const TrainArgs& a) {
  const LabConfig cfg = resolve_config(c);
  std::vector<std::uint64_t> seeds;
  if (a.seeds.empty()) {
    seeds.push_back(resolve_seed(c));
  } else {
    for (const auto& s : split_list(a.seeds)) {
      try {
        seeds.push_back(std::stoull(s));
      } catch (const std::exception&) {
        throw ConfigError("--seeds: '" + s + "' is not an integer");
      }
    }
  }
  std::vector<Method> methods;
  for (const auto& m : split_list(a.methods)) methods.push_back(method_from_string(m));
  if (methods.empty()) throw ConfigError("--method is empty");

  const auto tasks = load_or_generate_bench(a.bench, cfg);
  const fs::path out(c.out);
  fs::create_directories(out);
  ToyVlodModel base = [&] {
    if (!a.base.empty()) return load_base(a.base, cfg);
    ToyVlodModel m = pretrain_base(cfg.model_config(), cfg.bench, cfg.pretrain, print_line);
    m.save(out / "base");
    return m;
  }();
  std::ostringstream bh;
  bh << std::hex << base.hash();
  EvalOptions opts;
  opts.forced_routing = a.forced_routing;
  opts.fixed_union = a.fixed_union;
  json files = json::array();
  for (Method m : methods) {
    for (std::uint64_t s : seeds) {
      const RunRecord rec = run_sequence(base, tasks, m, cfg.train, s, opts, print_line);
      const std::string name = "record_" + rec.method + "_seed" + std::to_string(s) + ".json";
      write_json(out / name, rec.to_json());
      files.push_back(name);
    }
  }
  write_manifest(out, "train", seeds, cfg,
                 {{"methods", split_list(a.methods)},
                  {"base_hash", bh.str()},
                  {"records", files},
                  {"forced_routing", a.forced_routing},
                  {"fixed_union", a.fixed_union},
                  {"n_classes", class_union(tasks, task_order(static_cast<int>(tasks.size()), 0),
                                            tasks.size()).size()}});
  return 0;
}

int cmd_eval(const Common& c, const std::string& run_dir, const std::string& emit) {
  const fs::path run(run_dir);
  const json manifest = read_json(run / "manifest.json");
  const LabConfig cfg = config_from_json(manifest.at("config"));
  const std::uint64_t lt = manifest.value("n_classes", static_cast<std::uint64_t>(
                                                            cfg.bench.n_tasks * cfg.bench.classes_per_task));
  std::map<std::string, std::vector<RunRecord>> by_method;
  std::vector<std::string> order;
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(run)) {
    const std::string n = e.path().filename().string();
    if (n.rfind("record_", 0) == 0 && e.path().extension() == ".json") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) throw ConfigError("no record_*.json files in " + run.string());
  for (const auto& f : files) {
    RunRecord r = RunRecord::from_json(read_json(f));
    if (!by_method.count(r.method)) order.push_back(r.method);
    by_method[r.method].push_back(std::move(r));
  }
  const std::vector<std::string> canonical{"zero-shot", "sequential-ft", "naive-pa", "idpa-no-transfer", "idpa",
                                           "joint"};
  std::sort(order.begin(), order.end(), [&](const std::string& x, const std::string& y) {
    return std::find(canonical.begin(), canonical.end(), x) < std::find(canonical.begin(), canonical.end(), y);
  });
  std::vector<MethodSummary> rows;
  for (const auto& m : order) rows.push_back(summarize(by_method[m], cfg.model_config(), lt));

  const fs::path out = c.out.empty() ? run : fs::path(c.out);
  fs::create_directories(out);
  const auto kinds = split_list(emit);
  if (kinds.empty()) throw ConfigError("--emit is empty");
  for (const auto& k : kinds) {
    if (k == "csv") {
      std::ofstream(out / "report.csv") << report_csv(rows);
    } else if (k == "json") {
      write_json(out / "report.json", report_json(rows));
    } else {
      throw ConfigError("--emit: unknown format '" + k + "' (expected csv,json)");
    }
  }
  std::cout << report_csv(rows);
  std::set<std::uint64_t> seen;
  for (const auto& [m, recs] : by_method)
    for (const auto& r : recs) seen.insert(r.seed);
  // Kept apart from the train manifest, which may live in the same directory.
  write_manifest(out, "eval", {seen.begin(), seen.end()}, cfg,
                 {{"run", run.string()}, {"emit", kinds}, {"records", files.size()}}, "eval_manifest.json");
  return 0;
}

int report_suites(const std::vector<SuiteResult>& results, const fs::path& out, const std::string& file) {
  bool ok = true;
  json arr = json::array();
  for (const auto& r : results) {
    print_line(Record()
                   .kv("suite", r.name)
                   .kv("max_error", r.max_error)
                   .kv("tolerance", r.tolerance)
                   .kv("passed", r.passed ? 1 : 0)
                   .kv("seconds", r.seconds)
                   .str());
    if (!r.passed) {
      std::cerr << "FAILED suite " << r.name << ": " << r.detail << " (max error " << r.max_error
                << ", tolerance " << r.tolerance << ")\n";
      ok = false;
    }
    arr.push_back(r.to_json());
  }
  write_json(out / file, {{"version", DPALAB_VERSION}, {"suites", arr}, {"passed", ok}});
  return ok ? 0 : 1;
}

int cmd_verify(const Common& c, const std::vector<std::string>& suites, double lambda_init, const std::string& base_dir) {
  const LabConfig cfg = resolve_config(c);
  const std::uint64_t seed = resolve_seed(c);
  const std::vector<std::string> known{"decomposition", "zero-init", "gradcheck", "metrics", "cost", "ipg-gate",
                                       "routing"};
  for (const auto& s : suites)
    if (std::find(known.begin(), known.end(), s) == known.end())
      throw ConfigError("unknown suite '" + s + "'");
  const auto want = [&](const std::string& s) {
    return suites.empty() || std::find(suites.begin(), suites.end(), s) != suites.end();
  };
  std::vector<SuiteResult> results;
  if (want("decomposition")) results.push_back(decomposition_suite(100, seed));
  if (want("zero-init")) {
    const ToyVlodModel base = base_dir.empty() ? ToyVlodModel(cfg.model_config()) : load_base(base_dir, cfg);
    BenchmarkSpec one = cfg.bench;
    one.n_tasks = 1;
    const TaskDataset task = generate(one).front();
    results.push_back(zero_init_suite(100, seed, lambda_init, &base, &task, 32));
  }
  if (want("gradcheck")) results.push_back(gradient_suite(10, seed));
  if (want("metrics")) results.push_back(metrics_suite());
  if (want("cost")) results.push_back(cost_suite());
  if (want("ipg-gate")) results.push_back(ipg_gate_suite(50, seed));
  if (want("routing")) results.push_back(routing_oracle_suite(200, seed));
  fs::create_directories(c.out);
  const int rc = report_suites(results, c.out, "verify.json");
  write_manifest(c.out, "verify", {seed}, cfg, {{"lambda_init", lambda_init}});
  return rc;
}

int cmd_gradcheck(const Common& c, int points, double tol) {
  const LabConfig cfg = resolve_config(c);
  const std::uint64_t seed = resolve_seed(c);
  if (points < 1) throw ConfigError("--points must be >= 1");
  bool ok = true;
  json arr = json::array();
  for (const auto& og : gradcheck_ops(points, seed)) {
    const bool pass = og.max_rel_error <= tol;
    ok = ok && pass;
    print_line(Record().kv("op", og.name).kv("max_rel_error", og.max_rel_error).kv("passed", pass ? 1 : 0).str());
    arr.push_back({{"op", og.name}, {"max_rel_error", og.max_rel_error}, {"passed", pass}});
  }
  fs::create_directories(c.out);
  write_json(fs::path(c.out) / "gradcheck.json", {{"tolerance", tol}, {"points", points}, {"ops", arr}, {"passed", ok}});
  write_manifest(c.out, "gradcheck", {seed}, cfg);
  if (!ok) std::cerr << "FAILED gradcheck: some op exceeds tolerance " << tol << '\n';
  return ok ? 0 : 1;
}

int cmd_cost(const Common& c, const std::string& compare, std::optional<std::uint64_t> lt_flag, bool instrumented) {
  const LabConfig cfg = resolve_config(c);
  const std::uint64_t seed = resolve_seed(c);
  const ToyVlodConfig mc = cfg.model_config();
  const std::uint64_t lt =
      lt_flag.value_or(static_cast<std::uint64_t>(cfg.bench.n_tasks * cfg.bench.classes_per_task));
  const CostModel cm = CostModel::from_config(mc, lt);
  const std::uint64_t base_params = ToyVlodModel(mc).parameter_count();
  json arr = json::array();
  std::cout << std::left << std::setw(6) << "mech" << std::right << std::setw(14) << "flops" << std::setw(12)
            << "memory" << std::setw(12) << "params" << std::setw(13) << "projection" << std::setw(12) << "scores"
            << std::setw(10) << "softmax" << std::setw(12) << "aggregate" << std::setw(10) << "residual"
            << std::setw(8) << "lambda" << '\n';
  for (const auto& name : split_list(compare)) {
    const Mechanism m = mechanism_from_string(name);
    const FlopReport r = count_flops(cm.with(m));
    const std::string method = m == Mechanism::pa ? "naive-pa" : m == Mechanism::dpa ? "dpa" : "zero-shot";
    const ParamCounts p = params_count(mc, method, base_params);
    json j = r.to_json();
    j["params"] = p.to_json();
    if (instrumented) {
      const Measured x = instrument(cm.with(m), seed);
      j["instrumented"] = {{"flops", x.flops}, {"memory_words", x.words}};
    }
    arr.push_back(j);
    const CostTerms& t = r.per_term;
    std::cout << std::left << std::setw(6) << to_string(m) << std::right << std::setw(14) << r.total()
              << std::setw(12) << r.memory_words << std::setw(12) << p.total() << std::setw(13) << t.projection
              << std::setw(12) << t.scores << std::setw(10) << t.softmax << std::setw(12) << t.aggregate
              << std::setw(10) << t.residual << std::setw(8) << t.lambda << '\n';
  }
  if (arr.empty()) throw ConfigError("--compare is empty");
  fs::create_directories(c.out);
  write_json(fs::path(c.out) / "cost.json", {{"Lt", lt}, {"reports", arr}});
  write_manifest(c.out, "cost", {seed}, cfg);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"dpalab: dual-prompt attention continual detection laboratory"};
  app.set_version_flag("--version", std::string(DPALAB_VERSION));
  app.require_subcommand(1);

  Common gen, pre, train, eval, ver, grad, cost;

  auto* c_gen = app.add_subcommand("gen-bench", "write the synthetic task sequence");
  add_common(c_gen, gen, "bench");
  c_gen->add_option("--config", gen.config, "JSON config file");

  auto* c_pre = app.add_subcommand("pretrain-base", "pretrain and save the frozen base detector");
  add_common(c_pre, pre, "base");
  c_pre->add_option("--config", pre.config, "JSON config file");

  TrainArgs ta;
  auto* c_train = app.add_subcommand("train", "run the continual protocol for one or more methods");
  add_common(c_train, train, "runs");
  c_train->add_option("--config,--spec", train.config, "JSON config file");
  c_train->add_option("--method", ta.methods, "comma-separated methods")->capture_default_str();
  c_train->add_option("--seeds", ta.seeds, "comma-separated run seeds (default: --seed)");
  c_train->add_option("--base", ta.base, "directory holding a pretrained base (default: pretrain)");
  c_train->add_option("--bench", ta.bench, "directory written by gen-bench (default: generate)");
  c_train->add_flag("--forced-routing", ta.forced_routing, "evaluate each task with its own pool entry");
  c_train->add_flag("--fixed-union", ta.fixed_union, "present every task's classes from the start");

  std::string run_dir, emit = "csv,json";
  auto* c_eval = app.add_subcommand("eval", "summarise run records into a report table");
  add_common(c_eval, eval, "");
  c_eval->add_option("--run", run_dir, "directory written by train")->required();
  c_eval->add_option("--emit", emit, "report formats")->capture_default_str();

  std::vector<std::string> suites;
  double lambda_init = 0.0;
  std::string verify_base;
  auto* c_ver = app.add_subcommand("verify", "run the self-check suites");
  add_common(c_ver, ver, "verify");
  c_ver->add_option("--config", ver.config, "JSON config file");
  c_ver->add_option("--suite", suites, "suites to run (default: all)")->delimiter(',');
  c_ver->add_option("--lambda-init", lambda_init, "lambda initial value in the zero-init suite (fault injection)")
      ->capture_default_str();
  c_ver->add_option("--base", verify_base, "pretrained base for the end-to-end zero-init check");

  int points = 10;
  double tol = 1e-4;
  auto* c_grad = app.add_subcommand("gradcheck", "central-difference check of every differentiable op");
  add_common(c_grad, grad, "gradcheck");
  c_grad->add_option("--config", grad.config, "JSON config file");
  c_grad->add_option("--points", points, "random points per op")->capture_default_str();
  c_grad->add_option("--tol", tol, "max relative error")->capture_default_str();

  std::string compare = "pa,dpa";
  std::optional<std::uint64_t> lt;
  bool instrumented = false;
  auto* c_cost = app.add_subcommand("cost", "static FLOP, memory and parameter report");
  add_common(c_cost, cost, "cost");
  c_cost->add_option("--config", cost.config, "JSON config file");
  c_cost->add_option("--compare", compare, "mechanisms to report")->capture_default_str();
  c_cost->add_option("--lt", lt, "text tokens (default: all benchmark classes)");
  c_cost->add_flag("--instrumented", instrumented, "also run the counted forward pass");

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
    return 2;
  }

  try {
    if (c_gen->parsed()) return cmd_gen_bench(gen);
    if (c_pre->parsed()) return cmd_pretrain(pre);
    if (c_train->parsed()) return cmd_train(train, ta);
    if (c_eval->parsed()) return cmd_eval(eval, run_dir, emit);
    if (c_ver->parsed()) return cmd_verify(ver, suites, lambda_init, verify_base);
    if (c_grad->parsed()) return cmd_gradcheck(grad, points, tol);
    if (c_cost->parsed()) return cmd_cost(cost, compare, lt, instrumented);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 2;
}
