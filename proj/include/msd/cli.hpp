#pragma once

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <future>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "msd/association.hpp"
#include "msd/chain.hpp"
#include "msd/diagnostics.hpp"
#include "msd/simgen.hpp"

namespace msd::cli {

namespace fs = std::filesystem;

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Flag wins, then MSD_SEED; otherwise the command refuses to run.
inline std::uint64_t resolve_seed(std::optional<std::uint64_t> flag) {
  if (flag) return *flag;
  if (const char* env = std::getenv("MSD_SEED"); env && *env) {
    char* end = nullptr;
    const auto v = std::strtoull(env, &end, 10);
    if (end && *end == '\0') return v;
    throw UsageError("MSD_SEED must be a non-negative integer");
  }
  throw UsageError("an explicit seed is required (--seed or MSD_SEED)");
}

inline std::string timestamp() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

inline std::string file_hash(const std::string& path) { return hex64(fnv1a(read_file(path))); }

/// One manifest.json per output directory; each command's entry replaces an
/// earlier entry for the same command and outputs.
struct RunManifest {
  std::string command;
  std::vector<std::string> args;
  std::uint64_t seed = 0;
  std::string config_hash;
  std::string dataset_hash;
  std::string start;
  std::vector<std::string> outputs;
  nlohmann::json inputs = nlohmann::json::object();

  void write(const fs::path& dir) const {
    const fs::path path = dir / "manifest.json";
    nlohmann::json m{{"runs", nlohmann::json::array()}};
    if (fs::exists(path)) {
      try {
        m = nlohmann::json::parse(read_file(path.string()));
        if (!m.contains("runs") || !m["runs"].is_array()) m = {{"runs", nlohmann::json::array()}};
      } catch (const nlohmann::json::exception&) {
        m = {{"runs", nlohmann::json::array()}};
      }
    }
    nlohmann::json out_hashes = nlohmann::json::object();
    for (const auto& o : outputs) out_hashes[o] = file_hash((dir / o).string());
    nlohmann::json entry{{"command", command},       {"args", args},         {"seed", seed},
                         {"config_hash", config_hash}, {"dataset_hash", dataset_hash}, {"start", start},
                         {"end", timestamp()},         {"outputs", out_hashes}, {"inputs", inputs}};
    auto names = [](const nlohmann::json& outs) {
      std::vector<std::string> v;
      if (outs.is_object()) {
        for (const auto& [k, _] : outs.items()) v.push_back(k);
      }
      return v;
    };
    nlohmann::json runs = nlohmann::json::array();
    for (const auto& r : m["runs"]) {
      const bool same = r.value("command", "") == command && r.contains("outputs") && names(r["outputs"]) == names(out_hashes);
      if (!same) runs.push_back(r);
    }
    runs.push_back(entry);
    m["runs"] = runs;
    write_file(path.string(), m.dump(2) + "\n");
  }
};

inline void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw std::runtime_error("cannot create output directory '" + dir.string() + "'");
}

// ---------------------------------------------------------------------------

struct SimulateOptions {
  int case_id = 1;
  std::optional<std::size_t> n;
  std::uint64_t seed = 0;
  std::string out;
  std::size_t oracle_draws = 8000;
  std::vector<std::string> subpops{"x=0", "x=1"};
};

inline void cmd_simulate(const SimulateOptions& o, const std::vector<std::string>& args = {}) {
  if (o.case_id < 1 || o.case_id > 3) throw UsageError("--case must be 1, 2 or 3");
  const fs::path dir(o.out);
  ensure_dir(dir);
  RunManifest man{"simulate", args, o.seed, "", "", timestamp(), {}, {}};
  const auto spec = make_dgp(o.case_id, o.seed, o.n.value_or(4000));
  Rng rng(derive_seed(o.seed, 1));
  const auto ds = generate(spec, rng);
  write_dataset(ds, (dir / "subjects.csv").string(), (dir / "observations.csv").string(), (dir / "schema.json").string());
  write_file((dir / "dgp.json").string(), dgp_to_json(spec).dump(1) + "\n");
  std::vector<GammaRow> oracle;
  for (std::size_t k = 0; k < o.subpops.size(); ++k) {
    const auto q = parse_subpopulation(o.subpops[k], ds.schema);
    Rng orng(derive_seed(o.seed, 100 + k));
    const auto rows = oracle_gamma(spec, o.oracle_draws, q, orng);
    oracle.insert(oracle.end(), rows.begin(), rows.end());
  }
  write_file((dir / "oracle.csv").string(), gamma_csv(oracle));
  man.dataset_hash = dataset_hash(ds);
  man.outputs = {"subjects.csv", "observations.csv", "schema.json", "dgp.json", "oracle.csv"};
  man.write(dir);
}

// ---------------------------------------------------------------------------

struct FitOptions {
  std::string subjects, observations, schema;
  std::string config;  // optional JSON file
  std::uint64_t seed = 0;
  int chains = 1;
  int jobs = 1;
  std::string out;
  bool check = false;
  std::optional<int> burn_in, iterations, thin;
};

inline ModelConfig load_config(const std::string& path) {
  if (path.empty()) return {};
  try {
    return config_from_json(nlohmann::json::parse(read_file(path)));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path + ": " + e.what());
  }
}

inline std::string chain_stem(int k) { return "chain_" + std::to_string(k); }

/// Runs chain k (1-based) with seed derive_seed(seed, k); writes
/// chain_k.draws and chain_k.trace.csv.
inline void fit_one_chain(const PanelDataset& ds, ModelConfig cfg, std::uint64_t seed, int k, const fs::path& dir, bool check) {
  const std::uint64_t chain_seed = derive_seed(seed, static_cast<std::uint64_t>(k));
  cfg.seed = chain_seed;
  Rng rng(chain_seed);
  GibbsSampler g(ds, cfg, rng);
  const std::string stem = chain_stem(k);
  DrawWriter writer((dir / (stem + ".draws")).string(), make_header(g.context(), chain_seed, k));
  std::vector<TraceRow> trace;
  ChainOptions opt;
  opt.check_invariants = check;
  opt.trace = &trace;
  opt.dump_path = (dir / (stem + ".dump.json")).string();
  opt.on_draw = [&](const DrawRecord& d) { writer.append(d); };
  run_chain(g, rng, opt);
  writer.close();
  write_file((dir / (stem + ".trace.csv")).string(), trace_csv(trace));
}

inline void cmd_fit(const FitOptions& o, const std::vector<std::string>& args = {}) {
  if (o.chains < 1) throw UsageError("--chains must be >= 1");
  if (o.jobs < 1) throw UsageError("--jobs must be >= 1");
  const auto ds = load_dataset(o.subjects, o.observations, o.schema);
  auto cfg = load_config(o.config);
  if (o.burn_in) cfg.burn_in = *o.burn_in;
  if (o.iterations) cfg.iterations = *o.iterations;
  if (o.thin) cfg.thin = *o.thin;
  cfg.seed = o.seed;
  cfg.validate(latent_layout(ds.schema.responses).p);
  const fs::path dir(o.out);
  ensure_dir(dir);
  RunManifest man{"fit", args, o.seed, config_hash(cfg), dataset_hash(ds), timestamp(), {}, {}};
  man.inputs = {{"subjects", file_hash(o.subjects)}, {"observations", file_hash(o.observations)}, {"schema", file_hash(o.schema)}};
  for (int first = 1; first <= o.chains; first += o.jobs) {
    std::vector<std::future<void>> work;
    for (int k = first; k < first + o.jobs && k <= o.chains; ++k) {
      work.push_back(std::async(std::launch::async, [&, k] { fit_one_chain(ds, cfg, o.seed, k, dir, o.check); }));
    }
    for (auto& w : work) w.get();
  }
  for (int k = 1; k <= o.chains; ++k) {
    man.outputs.push_back(chain_stem(k) + ".draws");
    man.outputs.push_back(chain_stem(k) + ".trace.csv");
  }
  man.write(dir);
}

// ---------------------------------------------------------------------------

struct GammaOptions {
  std::vector<std::string> draws;
  std::vector<std::string> subpops;
  std::size_t R = 2500;
  std::uint64_t seed = 0;
  std::string out;
  bool unadjusted = false;
};

inline void cmd_gamma(const GammaOptions& o, const std::vector<std::string>& args = {}) {
  if (o.draws.empty()) throw UsageError("--draws is required");
  if (o.R < 2) throw UsageError("--R must be >= 2");
  std::vector<DrawRecord> records;
  std::optional<DrawHeader> header;
  nlohmann::json inputs = nlohmann::json::object();
  for (const auto& path : o.draws) {
    auto set = read_draws(path);
    if (header && (set.header.schema_hash != header->schema_hash || set.header.time_grid != header->time_grid)) {
      throw DataError("draw files '" + o.draws.front() + "' and '" + path + "' describe different models");
    }
    if (!header) header = set.header;
    inputs[path] = file_hash(path);
    for (auto& r : set.records) records.push_back(std::move(r));
  }
  if (records.empty()) throw DataError("draw files contain no records");
  const PredictiveModel model(*header);
  std::vector<std::string> exprs = o.subpops.empty() ? std::vector<std::string>{"all"} : o.subpops;
  std::vector<GammaRow> rows;
  for (std::size_t k = 0; k < exprs.size(); ++k) {
    const auto q = parse_subpopulation(exprs[k], model.schema);
    const auto r = gamma_trajectories(model, records, q, o.R, derive_seed(o.seed, k),
                                      o.unadjusted ? MixtureWeights::unadjusted : MixtureWeights::adjusted);
    rows.insert(rows.end(), r.begin(), r.end());
  }
  const fs::path out(o.out);
  const fs::path dir = out.has_parent_path() ? out.parent_path() : fs::path(".");
  ensure_dir(dir);
  write_file(out.string(), gamma_csv(rows));
  RunManifest man{"gamma", args, o.seed, header->config_hash, header->dataset_hash, timestamp(), {out.filename().string()}, inputs};
  man.write(dir);
}

// ---------------------------------------------------------------------------

struct ScoreOptions {
  std::string estimate, oracle, out;
};

inline void cmd_score(const ScoreOptions& o, const std::vector<std::string>& args = {}) {
  const auto est = parse_gamma_csv(read_file(o.estimate), o.estimate);
  const auto orc = parse_gamma_csv(read_file(o.oracle), o.oracle);
  const auto rows = score_mae(est, orc);
  const fs::path out(o.out);
  const fs::path dir = out.has_parent_path() ? out.parent_path() : fs::path(".");
  ensure_dir(dir);
  write_file(out.string(), mae_csv(rows));
  RunManifest man{"score", args, 0, "", "", timestamp(), {out.filename().string()},
                  {{o.estimate, file_hash(o.estimate)}, {o.oracle, file_hash(o.oracle)}}};
  man.write(dir);
}

// ---------------------------------------------------------------------------

struct DiagnoseOptions {
  std::string trace, out;
  std::size_t max_lag = 50;
};

inline void cmd_diagnose(const DiagnoseOptions& o, const std::vector<std::string>& args = {}) {
  const auto rows = parse_trace(read_file(o.trace));
  const auto j = diagnose(rows, o.max_lag);
  const fs::path out(o.out);
  const fs::path dir = out.has_parent_path() ? out.parent_path() : fs::path(".");
  ensure_dir(dir);
  write_file(out.string(), j.dump(2) + "\n");
  RunManifest man{"diagnose", args, 0, "", "", timestamp(), {out.filename().string()}, {{o.trace, file_hash(o.trace)}}};
  man.write(dir);
}

}  // namespace msd::cli
