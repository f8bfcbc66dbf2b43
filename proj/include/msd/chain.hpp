#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "msd/gibbs.hpp"
#include "msd/text.hpp"

namespace msd {

/// Thinned snapshot holding everything needed for posterior-predictive
/// simulation.
struct DrawRecord {
  long iteration = 0;
  double alpha = 0.0;
  double kappa_mu = 0.0;
  double kappa_xi = 0.0;
  VectorXd pi;
  VectorXd pi_tilde;
  std::vector<ComponentParams> components;
  MatrixXd mu;               // T x Q_mu
  std::vector<MatrixXd> xi;  // T entries of Q x Q_eta
};

inline DrawRecord snapshot(const GibbsSampler& g) {
  const auto& st = g.state();
  const auto& ctx = g.context();
  DrawRecord d;
  d.iteration = st.iteration;
  d.alpha = st.sticks.alpha;
  d.kappa_mu = ctx.gp.values[static_cast<std::size_t>(st.time.kappa_mu_index)];
  d.kappa_xi = ctx.gp.values[static_cast<std::size_t>(st.time.kappa_xi_index)];
  d.pi = st.sticks.pi;
  d.pi_tilde = st.pi_tilde;
  d.components = st.components;
  d.mu = st.time.mu;
  d.xi = st.time.xi;
  return d;
}

/// Dimensions and provenance written at the top of every draw file.
struct DrawHeader {
  Schema schema;
  std::vector<double> time_grid;
  int p = 0, L = 1, Q = 1, Qmu = 1, Qeta = 1, H = 1;
  std::string config_hash;
  std::string schema_hash;
  std::string dataset_hash;
  std::uint64_t seed = 0;
  int chain = 1;
  nlohmann::json config;

  int T() const { return static_cast<int>(time_grid.size()); }

  std::size_t record_size() const {
    std::size_t th = 0;
    for (const auto& c : schema.covariates) th += static_cast<std::size_t>(c.num_categories());
    const std::size_t per_h = static_cast<std::size_t>(p * L + p * Qmu + p * Q + Q * L + p) + th;
    return 4 + 2 * static_cast<std::size_t>(H) + static_cast<std::size_t>(H) * per_h +
           static_cast<std::size_t>(T() * Qmu + T() * Q * Qeta);
  }
};

inline std::string schema_hash(const Schema& s) { return hex64(fnv1a(schema_to_json(s).dump())); }
inline std::string config_hash(const ModelConfig& c) { return hex64(fnv1a(config_to_json(c).dump())); }
inline std::string dataset_hash(const PanelDataset& ds) {
  return hex64(fnv1a(observations_csv(ds), fnv1a(subjects_csv(ds), fnv1a(schema_to_json(ds.schema).dump()))));
}

inline DrawHeader make_header(const ModelContext& ctx, std::uint64_t seed, int chain) {
  DrawHeader h;
  h.schema = ctx.data->schema;
  h.time_grid = ctx.data->time_grid;
  h.p = ctx.p;
  h.L = ctx.L;
  h.Q = ctx.Q;
  h.Qmu = ctx.Qmu;
  h.Qeta = ctx.Qeta;
  h.H = ctx.H;
  h.config_hash = config_hash(ctx.config);
  h.schema_hash = schema_hash(ctx.data->schema);
  h.dataset_hash = dataset_hash(*ctx.data);
  h.seed = seed;
  h.chain = chain;
  h.config = config_to_json(ctx.config);
  return h;
}

inline nlohmann::json header_to_json(const DrawHeader& h) {
  return {{"format", "msd-draws"},
          {"version", 1},
          {"schema", schema_to_json(h.schema)},
          {"time_grid", h.time_grid},
          {"dims", {{"p", h.p}, {"L", h.L}, {"Q", h.Q}, {"Q_mu", h.Qmu}, {"Q_eta", h.Qeta}, {"H", h.H}, {"T", h.T()}}},
          {"config_hash", h.config_hash},
          {"schema_hash", h.schema_hash},
          {"dataset_hash", h.dataset_hash},
          {"seed", h.seed},
          {"chain", h.chain},
          {"record_doubles", h.record_size()},
          {"config", h.config}};
}

inline DrawHeader header_from_json(const nlohmann::json& j) {
  DrawHeader h;
  h.schema = schema_from_json(j.at("schema"));
  h.time_grid = j.at("time_grid").get<std::vector<double>>();
  const auto& d = j.at("dims");
  h.p = d.at("p");
  h.L = d.at("L");
  h.Q = d.at("Q");
  h.Qmu = d.at("Q_mu");
  h.Qeta = d.at("Q_eta");
  h.H = d.at("H");
  h.config_hash = j.at("config_hash");
  h.schema_hash = j.at("schema_hash");
  h.dataset_hash = j.value("dataset_hash", "");
  h.seed = j.at("seed");
  h.chain = j.at("chain");
  h.config = j.value("config", nlohmann::json::object());
  if (j.at("record_doubles").get<std::size_t>() != h.record_size()) throw DataError("draw file: record size mismatch");
  if (h.schema_hash != schema_hash(h.schema)) throw DataError("draw file: schema hash mismatch");
  return h;
}

namespace detail {

inline void put(std::vector<double>& out, const MatrixXd& m) {
  // column-major, matching Eigen storage
  out.insert(out.end(), m.data(), m.data() + m.size());
}

struct Reader {
  const double* p;
  double next() { return *p++; }
  void get(MatrixXd& m, Eigen::Index r, Eigen::Index c) {
    m = Eigen::Map<const MatrixXd>(p, r, c);
    p += r * c;
  }
  void get(VectorXd& v, Eigen::Index n) {
    v = Eigen::Map<const VectorXd>(p, n);
    p += n;
  }
};

}  // namespace detail

inline std::vector<double> flatten(const DrawRecord& d, const DrawHeader& h) {
  std::vector<double> out;
  out.reserve(h.record_size());
  out.push_back(static_cast<double>(d.iteration));
  out.push_back(d.alpha);
  out.push_back(d.kappa_mu);
  out.push_back(d.kappa_xi);
  detail::put(out, d.pi);
  detail::put(out, d.pi_tilde);
  for (const auto& c : d.components) {
    detail::put(out, c.B);
    detail::put(out, c.Omega);
    detail::put(out, c.Lambda);
    detail::put(out, c.V);
    detail::put(out, c.sigma2);
    for (const auto& th : c.theta_x) detail::put(out, th);
  }
  detail::put(out, d.mu);
  for (const auto& x : d.xi) detail::put(out, x);
  if (out.size() != h.record_size()) throw std::logic_error("flatten: record does not match header dimensions");
  return out;
}

inline DrawRecord unflatten(const double* data, const DrawHeader& h) {
  detail::Reader r{data};
  DrawRecord d;
  d.iteration = static_cast<long>(r.next());
  d.alpha = r.next();
  d.kappa_mu = r.next();
  d.kappa_xi = r.next();
  r.get(d.pi, h.H);
  r.get(d.pi_tilde, h.H);
  d.components.resize(static_cast<std::size_t>(h.H));
  for (auto& c : d.components) {
    r.get(c.B, h.p, h.L);
    r.get(c.Omega, h.p, h.Qmu);
    r.get(c.Lambda, h.p, h.Q);
    r.get(c.V, h.Q, h.L);
    r.get(c.sigma2, h.p);
    for (const auto& cov : h.schema.covariates) {
      VectorXd th;
      r.get(th, cov.num_categories());
      c.theta_x.push_back(std::move(th));
    }
  }
  r.get(d.mu, h.T(), h.Qmu);
  d.xi.resize(static_cast<std::size_t>(h.T()));
  for (auto& x : d.xi) r.get(x, h.Q, h.Qeta);
  return d;
}

inline constexpr char kDrawMagic[8] = {'M', 'S', 'D', 'D', 'R', 'A', 'W', '1'};

/// Append-only draw file: magic, length-prefixed JSON header, then one
/// fixed-size block of native doubles per record.
class DrawWriter {
 public:
  DrawWriter(const std::string& path, DrawHeader header) : header_(std::move(header)), out_(path, std::ios::binary | std::ios::trunc) {
    if (!out_) throw std::runtime_error("cannot write '" + path + "'");
    const std::string js = header_to_json(header_).dump();
    const std::uint64_t len = js.size();
    out_.write(kDrawMagic, sizeof kDrawMagic);
    out_.write(reinterpret_cast<const char*>(&len), sizeof len);
    out_.write(js.data(), static_cast<std::streamsize>(js.size()));
  }

  void append(const DrawRecord& d) {
    const auto flat = flatten(d, header_);
    out_.write(reinterpret_cast<const char*>(flat.data()), static_cast<std::streamsize>(flat.size() * sizeof(double)));
    if (!out_) throw std::runtime_error("draw file write failed");
  }

  void close() { out_.close(); }

 private:
  DrawHeader header_;
  std::ofstream out_;
};

struct DrawSet {
  DrawHeader header;
  std::vector<DrawRecord> records;
};

inline DrawSet read_draws(const std::string& path) {
  const std::string bytes = read_file(path);
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kDrawMagic, 8) != 0) throw DataError("'" + path + "' is not a draw file");
  std::uint64_t len = 0;
  std::memcpy(&len, bytes.data() + 8, sizeof len);
  if (16 + len > bytes.size()) throw DataError("'" + path + "': truncated header");
  DrawSet ds;
  try {
    ds.header = header_from_json(nlohmann::json::parse(bytes.substr(16, len)));
  } catch (const nlohmann::json::exception& e) {
    throw DataError("'" + path + "': bad header: " + e.what());
  }
  const std::size_t rec_bytes = ds.header.record_size() * sizeof(double);
  const std::size_t body = bytes.size() - 16 - len;
  if (body % rec_bytes != 0) throw DataError("'" + path + "': truncated record");
  std::vector<double> buf(ds.header.record_size());
  for (std::size_t off = 16 + len; off < bytes.size(); off += rec_bytes) {
    std::memcpy(buf.data(), bytes.data() + off, rec_bytes);
    ds.records.push_back(unflatten(buf.data(), ds.header));
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Trace

struct TraceRow {
  long iter;
  std::string param;
  double value;
};

/// Scalar summaries per sweep: alpha, kappa_mu, kappa_xi, the number of
/// occupied components, the largest adjusted weight and the occupancy-
/// weighted mean of each sigma2 coordinate.
inline void append_trace(const GibbsSampler& g, std::vector<TraceRow>& rows) {
  const auto& st = g.state();
  const auto& ctx = g.context();
  const long it = st.iteration;
  rows.push_back({it, "alpha", st.sticks.alpha});
  rows.push_back({it, "kappa_mu", ctx.gp.values[static_cast<std::size_t>(st.time.kappa_mu_index)]});
  rows.push_back({it, "kappa_xi", ctx.gp.values[static_cast<std::size_t>(st.time.kappa_xi_index)]});
  const auto n = g.counts();
  int occupied = 0;
  for (int c : n) occupied += c > 0;
  rows.push_back({it, "n_occupied", static_cast<double>(occupied)});
  rows.push_back({it, "pi_tilde_max", st.pi_tilde.size() ? st.pi_tilde.maxCoeff() : 0.0});
  const double total = static_cast<double>(st.subjects.size());
  for (int k = 0; k < ctx.p; ++k) {
    double s = 0.0;
    for (int h = 0; h < ctx.H; ++h) s += n[static_cast<std::size_t>(h)] * st.components[static_cast<std::size_t>(h)].sigma2[k];
    rows.push_back({it, "sigma2_" + std::to_string(k), total > 0 ? s / total : st.components[0].sigma2[k]});
  }
}

inline std::string trace_csv(const std::vector<TraceRow>& rows) {
  std::string out = "iter,param,value\n";
  for (const auto& r : rows) {
    out += std::to_string(r.iter);
    out += ',';
    out += r.param;
    out += ',';
    out += format_double(r.value);
    out += '\n';
  }
  return out;
}

inline std::vector<TraceRow> parse_trace(const std::string& text) {
  std::vector<TraceRow> rows;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (lineno == 1 || trim(line).empty()) continue;
    const auto cells = split_csv_line(line);
    const auto v = cells.size() == 3 ? parse_double(cells[2]) : std::nullopt;
    const auto it = cells.size() == 3 ? parse_double(cells[0]) : std::nullopt;
    if (!v || !it) throw DataError("trace:" + std::to_string(lineno) + ": expected iter,param,value");
    rows.push_back({static_cast<long>(*it), cells[1], *v});
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Chain orchestration

inline nlohmann::json state_to_json(const ChainState& st) {
  auto mat = [](const MatrixXd& m) {
    nlohmann::json rows = nlohmann::json::array();
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
      std::vector<double> row(static_cast<std::size_t>(m.cols()));
      for (Eigen::Index c = 0; c < m.cols(); ++c) row[static_cast<std::size_t>(c)] = m(r, c);
      rows.push_back(row);
    }
    return rows;
  };
  nlohmann::json j;
  j["iteration"] = st.iteration;
  j["alpha"] = st.sticks.alpha;
  j["pi"] = mat(st.sticks.pi.transpose());
  j["pi_tilde"] = mat(st.pi_tilde.transpose());
  j["kappa_mu_index"] = st.time.kappa_mu_index;
  j["kappa_xi_index"] = st.time.kappa_xi_index;
  j["mu"] = mat(st.time.mu);
  for (const auto& c : st.components) {
    j["components"].push_back({{"B", mat(c.B)}, {"Omega", mat(c.Omega)}, {"Lambda", mat(c.Lambda)}, {"V", mat(c.V)},
                               {"sigma2", mat(c.sigma2.transpose())}});
  }
  std::vector<int> s;
  for (const auto& sub : st.subjects) s.push_back(sub.component);
  j["allocations"] = s;
  j["delta2"] = mat(st.shrinkage.delta2);
  j["zeta2"] = mat(st.shrinkage.zeta2);
  return j;
}

struct ChainOptions {
  bool check_invariants = false;
  std::function<void(const DrawRecord&)> on_draw;  // replaces in-memory collection when set
  std::vector<TraceRow>* trace = nullptr;
  std::string dump_path;  // state dump written here when a step fails
};

/// Runs burn_in + iterations sweeps and keeps every thin-th post-burn-in
/// sweep.
inline std::vector<DrawRecord> run_chain(GibbsSampler& g, Rng& rng, const ChainOptions& opt = {}) {
  const auto& cfg = g.context().config;
  std::vector<DrawRecord> out;
  const long total = static_cast<long>(cfg.burn_in) + cfg.iterations;
  for (long it = 0; it < total; ++it) {
    try {
      g.sweep(rng);
      if (opt.check_invariants) g.check_invariants();
    } catch (const std::exception& e) {
      std::string msg = "sweep " + std::to_string(it + 1) + " failed: " + e.what();
      if (!opt.dump_path.empty()) {
        write_file(opt.dump_path, state_to_json(g.state()).dump(1));
        msg += " (state dumped to " + opt.dump_path + ")";
      }
      throw NumericalError(msg);
    }
    if (opt.trace) append_trace(g, *opt.trace);
    const long kept = it + 1 - cfg.burn_in;
    if (kept > 0 && kept % cfg.thin == 0) {
      if (opt.on_draw) {
        opt.on_draw(snapshot(g));
      } else {
        out.push_back(snapshot(g));
      }
    }
  }
  return out;
}

}  // namespace msd
