#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "msd/text.hpp"

namespace msd {

/// Raised for malformed or inconsistent input data. The message names the
/// file and line (or subject) at fault.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class VariableKind { continuous, binary, count, nominal };
enum class CutpointStyle { integer, log };

inline std::string_view to_string(VariableKind k) {
  switch (k) {
    case VariableKind::continuous: return "continuous";
    case VariableKind::binary: return "binary";
    case VariableKind::count: return "count";
    case VariableKind::nominal: return "nominal";
  }
  return "?";
}

inline std::string_view to_string(CutpointStyle s) { return s == CutpointStyle::integer ? "integer" : "log"; }

struct VariableSchema {
  std::string name;
  VariableKind kind = VariableKind::continuous;
  std::vector<std::string> categories;  // nominal only
  CutpointStyle cutpoint_style = CutpointStyle::integer;  // count only

  int num_categories() const { return static_cast<int>(categories.size()); }
  /// Number of latent coordinates: d-1 utilities for a d-category nominal.
  int latent_dim() const { return kind == VariableKind::nominal ? num_categories() - 1 : 1; }
};

/// Static categorical covariate. Binary covariates occupy one design column,
/// others a full one-hot block.
struct CovariateSchema {
  std::string name;
  bool binary = false;
  std::vector<std::string> categories;

  int num_categories() const { return static_cast<int>(categories.size()); }
  int block_size() const { return binary ? 1 : num_categories(); }
  int find_category(std::string_view label) const {
    for (std::size_t c = 0; c < categories.size(); ++c) {
      if (categories[c] == label) return static_cast<int>(c);
    }
    return -1;
  }
};

struct Schema {
  std::vector<VariableSchema> responses;
  std::vector<CovariateSchema> covariates;
  std::optional<double> population_size;

  int find_response(std::string_view name) const {
    for (std::size_t k = 0; k < responses.size(); ++k) {
      if (responses[k].name == name) return static_cast<int>(k);
    }
    return -1;
  }
  int find_covariate(std::string_view name) const {
    for (std::size_t l = 0; l < covariates.size(); ++l) {
      if (covariates[l].name == name) return static_cast<int>(l);
    }
    return -1;
  }

  void validate() const {
    std::set<std::string> names;
    for (const auto& v : responses) {
      if (v.name.empty()) throw DataError("schema: empty response name");
      if (!names.insert(v.name).second) throw DataError("schema: duplicate name '" + v.name + "'");
      if (v.kind == VariableKind::nominal && v.num_categories() < 2) {
        throw DataError("schema: nominal '" + v.name + "' needs at least 2 categories");
      }
      if (v.kind == VariableKind::nominal) {
        std::set<std::string> cats(v.categories.begin(), v.categories.end());
        if (cats.size() != v.categories.size()) throw DataError("schema: duplicate category in '" + v.name + "'");
      }
    }
    for (const auto& c : covariates) {
      if (c.name.empty()) throw DataError("schema: empty covariate name");
      if (!names.insert(c.name).second) throw DataError("schema: duplicate name '" + c.name + "'");
      if (c.num_categories() < 1) throw DataError("schema: covariate '" + c.name + "' has no categories");
      if (c.binary && c.num_categories() != 2) {
        throw DataError("schema: binary covariate '" + c.name + "' must have exactly 2 categories");
      }
      std::set<std::string> cats(c.categories.begin(), c.categories.end());
      if (cats.size() != c.categories.size()) throw DataError("schema: duplicate category in '" + c.name + "'");
    }
    if (population_size && !(*population_size > 0.0)) throw DataError("schema: population_size must be positive");
  }
};

inline nlohmann::json schema_to_json(const Schema& s) {
  nlohmann::json j;
  if (s.population_size) j["population_size"] = *s.population_size;
  j["responses"] = nlohmann::json::array();
  for (const auto& v : s.responses) {
    nlohmann::json r{{"name", v.name}, {"kind", std::string(to_string(v.kind))}};
    if (v.kind == VariableKind::nominal) r["categories"] = v.categories;
    if (v.kind == VariableKind::count) r["cutpoint_style"] = std::string(to_string(v.cutpoint_style));
    j["responses"].push_back(r);
  }
  j["covariates"] = nlohmann::json::array();
  for (const auto& c : s.covariates) {
    j["covariates"].push_back({{"name", c.name}, {"kind", c.binary ? "binary" : "categorical"}, {"categories", c.categories}});
  }
  return j;
}

inline Schema schema_from_json(const nlohmann::json& j) {
  Schema s;
  try {
    if (j.contains("population_size")) s.population_size = j.at("population_size").get<double>();
    for (const auto& r : j.at("responses")) {
      VariableSchema v;
      v.name = r.at("name").get<std::string>();
      const auto kind = r.at("kind").get<std::string>();
      if (kind == "continuous") {
        v.kind = VariableKind::continuous;
      } else if (kind == "binary") {
        v.kind = VariableKind::binary;
      } else if (kind == "count") {
        v.kind = VariableKind::count;
        const auto style = r.value("cutpoint_style", std::string("integer"));
        if (style == "integer") {
          v.cutpoint_style = CutpointStyle::integer;
        } else if (style == "log") {
          v.cutpoint_style = CutpointStyle::log;
        } else {
          throw DataError("schema: unknown cutpoint_style '" + style + "' for '" + v.name + "'");
        }
      } else if (kind == "nominal") {
        v.kind = VariableKind::nominal;
        v.categories = r.at("categories").get<std::vector<std::string>>();
      } else {
        throw DataError("schema: unknown kind '" + kind + "' for '" + v.name + "'");
      }
      s.responses.push_back(std::move(v));
    }
    if (j.contains("covariates")) {
      for (const auto& c : j.at("covariates")) {
        CovariateSchema cv;
        cv.name = c.at("name").get<std::string>();
        const auto kind = c.value("kind", std::string("categorical"));
        if (kind != "binary" && kind != "categorical") {
          throw DataError("schema: unknown covariate kind '" + kind + "' for '" + cv.name + "'");
        }
        cv.binary = kind == "binary";
        if (c.contains("categories")) {
          cv.categories = c.at("categories").get<std::vector<std::string>>();
        } else if (cv.binary) {
          cv.categories = {"0", "1"};
        }
        s.covariates.push_back(std::move(cv));
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("schema: ") + e.what());
  }
  s.validate();
  return s;
}

// ---------------------------------------------------------------------------
// Latent layout

struct LatentRange {
  int offset = 0;
  int dim = 0;
};

/// Maps each response variable onto its block of latent coordinates.
struct LatentLayout {
  std::vector<LatentRange> ranges;
  int p = 0;
};

inline LatentLayout latent_layout(std::span<const VariableSchema> schema) {
  LatentLayout layout;
  for (const auto& v : schema) {
    layout.ranges.push_back({layout.p, v.latent_dim()});
    layout.p += v.latent_dim();
  }
  return layout;
}

// ---------------------------------------------------------------------------
// Covariate design vectors

/// Intercept followed by one block per covariate.
struct CovariateEncoding {
  std::vector<int> offsets;
  std::vector<int> sizes;
  std::vector<bool> binary;
  int L = 1;

  explicit CovariateEncoding(std::span<const CovariateSchema> covariates) {
    for (const auto& c : covariates) {
      offsets.push_back(L);
      sizes.push_back(c.block_size());
      binary.push_back(c.binary);
      L += c.block_size();
    }
  }

  /// Writes the design vector for complete category codes. Negative codes
  /// (missing) leave their block at zero.
  void encode(std::span<const int> codes, Eigen::Ref<Eigen::VectorXd> x) const {
    x.setZero();
    x[0] = 1.0;
    for (std::size_t l = 0; l < offsets.size(); ++l) set_block(x, l, codes[l]);
  }

  Eigen::VectorXd encode(std::span<const int> codes) const {
    Eigen::VectorXd x(L);
    encode(codes, x);
    return x;
  }

  void set_block(Eigen::Ref<Eigen::VectorXd> x, std::size_t l, int code) const {
    const int off = offsets[l];
    for (int c = 0; c < sizes[l]; ++c) x[off + c] = 0.0;
    if (code < 0) return;
    if (binary[l]) {
      x[off] = code == 1 ? 1.0 : 0.0;
    } else {
      x[off + code] = 1.0;
    }
  }

  /// Inverse of encode for fully observed vectors.
  std::vector<int> decode(const Eigen::VectorXd& x) const {
    std::vector<int> codes(offsets.size(), -1);
    for (std::size_t l = 0; l < offsets.size(); ++l) {
      if (binary[l]) {
        codes[l] = x[offsets[l]] > 0.5 ? 1 : 0;
      } else {
        for (int c = 0; c < sizes[l]; ++c) {
          if (x[offsets[l] + c] > 0.5) codes[l] = c;
        }
      }
    }
    return codes;
  }
};

// ---------------------------------------------------------------------------
// Dataset

struct Observation {
  double time = 0.0;
  int time_index = -1;           // position in PanelDataset::time_grid
  std::vector<double> values;    // per response; category code for nominal
  std::vector<std::uint8_t> missing;
};

struct SubjectRecord {
  std::string id;
  double weight = 1.0;
  std::vector<int> covariates;  // category code, -1 when missing
  std::vector<Observation> observations;
};

struct MissingCounts {
  std::size_t design = 0;  // missing for every respondent at that time point
  std::size_t item = 0;
};

struct PanelDataset {
  Schema schema;
  std::vector<SubjectRecord> subjects;
  double population_size = 0.0;
  std::vector<double> time_grid;
  std::vector<MissingCounts> missing_by_variable;
  std::vector<std::size_t> missing_by_covariate;

  std::size_t n() const { return subjects.size(); }
  double total_weight() const {
    double s = 0.0;
    for (const auto& sub : subjects) s += sub.weight;
    return s;
  }

  /// Checks invariants, builds the time grid, time indices and missingness
  /// counts. Must be called after the subjects are assembled.
  void finalize() {
    schema.validate();
    const std::size_t nv = schema.responses.size();
    std::set<double> times;
    std::set<std::string> ids;
    for (const auto& s : subjects) {
      if (!ids.insert(s.id).second) throw DataError("duplicate subject id '" + s.id + "'");
      if (!(s.weight > 0.0) || !std::isfinite(s.weight)) {
        throw DataError("subject '" + s.id + "': weight must be positive, got " + format_double(s.weight));
      }
      if (s.covariates.size() != schema.covariates.size()) {
        throw DataError("subject '" + s.id + "': covariate count mismatch");
      }
      for (std::size_t l = 0; l < s.covariates.size(); ++l) {
        if (s.covariates[l] >= schema.covariates[l].num_categories()) {
          throw DataError("subject '" + s.id + "': invalid code for covariate '" + schema.covariates[l].name + "'");
        }
      }
      for (std::size_t j = 0; j < s.observations.size(); ++j) {
        const auto& o = s.observations[j];
        if (!std::isfinite(o.time)) throw DataError("subject '" + s.id + "': non-finite time");
        if (j > 0 && !(o.time > s.observations[j - 1].time)) {
          throw DataError("subject '" + s.id + "': observation times not strictly increasing");
        }
        if (o.values.size() != nv || o.missing.size() != nv) throw DataError("subject '" + s.id + "': response count mismatch");
        for (std::size_t k = 0; k < nv; ++k) {
          if (o.missing[k]) continue;
          check_value(schema.responses[k], o.values[k], "subject '" + s.id + "'");
        }
        times.insert(o.time);
      }
    }
    time_grid.assign(times.begin(), times.end());
    for (auto& s : subjects) {
      for (auto& o : s.observations) {
        o.time_index = static_cast<int>(std::lower_bound(time_grid.begin(), time_grid.end(), o.time) - time_grid.begin());
      }
    }
    if (schema.population_size) {
      population_size = *schema.population_size;
    } else {
      population_size = std::max(static_cast<double>(n()), std::round(total_weight()));
    }
    if (population_size < static_cast<double>(n())) throw DataError("population size N is smaller than the sample size");

    // missingness summary
    missing_by_variable.assign(nv, {});
    std::vector<std::vector<std::size_t>> cells(nv, std::vector<std::size_t>(time_grid.size(), 0));
    std::vector<std::vector<std::size_t>> miss(nv, std::vector<std::size_t>(time_grid.size(), 0));
    for (const auto& s : subjects) {
      for (const auto& o : s.observations) {
        for (std::size_t k = 0; k < nv; ++k) {
          ++cells[k][static_cast<std::size_t>(o.time_index)];
          if (o.missing[k]) ++miss[k][static_cast<std::size_t>(o.time_index)];
        }
      }
    }
    for (std::size_t k = 0; k < nv; ++k) {
      for (std::size_t t = 0; t < time_grid.size(); ++t) {
        if (miss[k][t] == 0) continue;
        if (miss[k][t] == cells[k][t]) {
          missing_by_variable[k].design += miss[k][t];
        } else {
          missing_by_variable[k].item += miss[k][t];
        }
      }
    }
    missing_by_covariate.assign(schema.covariates.size(), 0);
    for (const auto& s : subjects) {
      for (std::size_t l = 0; l < s.covariates.size(); ++l) {
        if (s.covariates[l] < 0) ++missing_by_covariate[l];
      }
    }
  }

  static void check_value(const VariableSchema& v, double value, const std::string& where) {
    switch (v.kind) {
      case VariableKind::continuous:
        if (!std::isfinite(value)) throw DataError(where + ": non-finite value for '" + v.name + "'");
        break;
      case VariableKind::binary:
        if (value != 0.0 && value != 1.0) throw DataError(where + ": binary '" + v.name + "' must be 0 or 1");
        break;
      case VariableKind::count:
        if (!(value >= 0.0) || value != std::floor(value) || !std::isfinite(value)) {
          throw DataError(where + ": count '" + v.name + "' must be a non-negative integer");
        }
        break;
      case VariableKind::nominal:
        if (value < 0.0 || value >= v.num_categories() || value != std::floor(value)) {
          throw DataError(where + ": invalid category code for '" + v.name + "'");
        }
        break;
    }
  }
};

namespace detail {

inline std::vector<std::string> csv_lines(const std::string& text) {
  std::vector<std::string> lines;
  std::size_t start = 0;
  while (start <= text.size()) {
    auto pos = text.find('\n', start);
    if (pos == std::string::npos) pos = text.size();
    std::string line = text.substr(start, pos - start);
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(std::move(line));
    start = pos + 1;
  }
  while (!lines.empty() && trim(lines.back()).empty()) lines.pop_back();
  return lines;
}

inline std::string at_line(const std::string& file, std::size_t line) { return file + ":" + std::to_string(line); }

inline double parse_response(const VariableSchema& v, const std::string& cell, const std::string& where) {
  if (v.kind == VariableKind::nominal) {
    for (std::size_t c = 0; c < v.categories.size(); ++c) {
      if (v.categories[c] == cell) return static_cast<double>(c);
    }
    throw DataError(where + ": unknown category '" + cell + "' for '" + v.name + "'");
  }
  const auto d = parse_double(cell);
  if (!d) throw DataError(where + ": cannot parse '" + cell + "' for '" + v.name + "'");
  PanelDataset::check_value(v, *d, where);
  return *d;
}

inline std::string format_response(const VariableSchema& v, double value) {
  switch (v.kind) {
    case VariableKind::nominal: return v.categories[static_cast<std::size_t>(value)];
    case VariableKind::binary:
    case VariableKind::count: {
      char buf[32];
      auto r = std::to_chars(buf, buf + sizeof(buf), static_cast<long long>(value));
      return std::string(buf, r.ptr);
    }
    case VariableKind::continuous: return format_double(value);
  }
  return {};
}

}  // namespace detail

inline Schema load_schema(const std::string& schema_file) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file(schema_file));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(schema_file + ": " + e.what());
  }
  return schema_from_json(j);
}

/// Builds a dataset from in-memory CSV text (subjects, long-format
/// observations). File names are used only in error messages.
inline PanelDataset parse_dataset(const std::string& subject_text, const std::string& observation_text, Schema schema,
                                  const std::string& subject_file = "subjects", const std::string& observation_file = "observations") {
  PanelDataset ds;
  ds.schema = std::move(schema);
  ds.schema.validate();
  const auto& sch = ds.schema;

  const auto sub_lines = detail::csv_lines(subject_text);
  if (sub_lines.empty()) throw DataError(subject_file + ": missing header");
  const auto sub_header = split_csv_line(sub_lines[0]);
  if (sub_header.size() < 2 || sub_header[0] != "id" || sub_header[1] != "weight") {
    throw DataError(detail::at_line(subject_file, 1) + ": header must start with id,weight");
  }
  std::vector<int> cov_col(sch.covariates.size(), -1);
  for (std::size_t c = 2; c < sub_header.size(); ++c) {
    const int l = sch.find_covariate(sub_header[c]);
    if (l < 0) throw DataError(detail::at_line(subject_file, 1) + ": unknown covariate column '" + sub_header[c] + "'");
    cov_col[static_cast<std::size_t>(l)] = static_cast<int>(c);
  }
  for (std::size_t l = 0; l < cov_col.size(); ++l) {
    if (cov_col[l] < 0) throw DataError(subject_file + ": missing covariate column '" + sch.covariates[l].name + "'");
  }
  std::unordered_map<std::string, std::size_t> index;
  for (std::size_t ln = 1; ln < sub_lines.size(); ++ln) {
    if (trim(sub_lines[ln]).empty()) continue;
    const auto where = detail::at_line(subject_file, ln + 1);
    const auto cells = split_csv_line(sub_lines[ln]);
    if (cells.size() != sub_header.size()) throw DataError(where + ": expected " + std::to_string(sub_header.size()) + " cells");
    SubjectRecord rec;
    rec.id = cells[0];
    if (rec.id.empty()) throw DataError(where + ": empty id");
    const auto w = parse_double(cells[1]);
    if (!w) throw DataError(where + ": cannot parse weight '" + cells[1] + "'");
    if (!(*w > 0.0)) throw DataError(where + ": subject '" + rec.id + "' has non-positive weight " + cells[1]);
    rec.weight = *w;
    rec.covariates.assign(sch.covariates.size(), -1);
    for (std::size_t l = 0; l < sch.covariates.size(); ++l) {
      const auto& cell = cells[static_cast<std::size_t>(cov_col[l])];
      if (cell.empty()) continue;
      const int code = sch.covariates[l].find_category(cell);
      if (code < 0) throw DataError(where + ": unknown category '" + cell + "' for covariate '" + sch.covariates[l].name + "'");
      rec.covariates[l] = code;
    }
    if (!index.emplace(rec.id, ds.subjects.size()).second) throw DataError(where + ": duplicate subject id '" + rec.id + "'");
    ds.subjects.push_back(std::move(rec));
  }

  const auto obs_lines = detail::csv_lines(observation_text);
  if (obs_lines.empty()) throw DataError(observation_file + ": missing header");
  const auto obs_header = split_csv_line(obs_lines[0]);
  if (obs_header.size() < 2 || obs_header[0] != "id" || obs_header[1] != "time") {
    throw DataError(detail::at_line(observation_file, 1) + ": header must start with id,time");
  }
  const std::size_t nv = sch.responses.size();
  std::vector<int> var_col(nv, -1);
  for (std::size_t c = 2; c < obs_header.size(); ++c) {
    const int k = sch.find_response(obs_header[c]);
    if (k < 0) throw DataError(detail::at_line(observation_file, 1) + ": column '" + obs_header[c] + "' not in schema");
    var_col[static_cast<std::size_t>(k)] = static_cast<int>(c);
  }
  for (std::size_t ln = 1; ln < obs_lines.size(); ++ln) {
    if (trim(obs_lines[ln]).empty()) continue;
    const auto where = detail::at_line(observation_file, ln + 1);
    const auto cells = split_csv_line(obs_lines[ln]);
    if (cells.size() != obs_header.size()) throw DataError(where + ": expected " + std::to_string(obs_header.size()) + " cells");
    const auto it = index.find(cells[0]);
    if (it == index.end()) throw DataError(where + ": unknown subject id '" + cells[0] + "'");
    auto& rec = ds.subjects[it->second];
    const auto t = parse_double(cells[1]);
    if (!t || !std::isfinite(*t)) throw DataError(where + ": cannot parse time '" + cells[1] + "'");
    if (!rec.observations.empty() && !(*t > rec.observations.back().time)) {
      throw DataError(where + ": times for subject '" + rec.id + "' are not strictly increasing");
    }
    Observation o;
    o.time = *t;
    o.values.assign(nv, 0.0);
    o.missing.assign(nv, 1);
    for (std::size_t k = 0; k < nv; ++k) {
      if (var_col[k] < 0) continue;
      const auto& cell = cells[static_cast<std::size_t>(var_col[k])];
      if (cell.empty()) continue;
      o.values[k] = detail::parse_response(sch.responses[k], cell, where);
      o.missing[k] = 0;
    }
    rec.observations.push_back(std::move(o));
  }
  ds.finalize();
  return ds;
}

inline PanelDataset load_dataset(const std::string& subject_file, const std::string& observation_file, const std::string& schema_file) {
  return parse_dataset(read_file(subject_file), read_file(observation_file), load_schema(schema_file), subject_file, observation_file);
}

inline std::string subjects_csv(const PanelDataset& ds) {
  std::string out = "id,weight";
  for (const auto& c : ds.schema.covariates) out += "," + c.name;
  out += "\n";
  for (const auto& s : ds.subjects) {
    out += s.id + "," + format_double(s.weight);
    for (std::size_t l = 0; l < s.covariates.size(); ++l) {
      out += ",";
      if (s.covariates[l] >= 0) out += ds.schema.covariates[l].categories[static_cast<std::size_t>(s.covariates[l])];
    }
    out += "\n";
  }
  return out;
}

inline std::string observations_csv(const PanelDataset& ds) {
  std::string out = "id,time";
  for (const auto& v : ds.schema.responses) out += "," + v.name;
  out += "\n";
  for (const auto& s : ds.subjects) {
    for (const auto& o : s.observations) {
      out += s.id + "," + format_double(o.time);
      for (std::size_t k = 0; k < o.values.size(); ++k) {
        out += ",";
        if (!o.missing[k]) out += detail::format_response(ds.schema.responses[k], o.values[k]);
      }
      out += "\n";
    }
  }
  return out;
}

inline void write_dataset(const PanelDataset& ds, const std::string& subject_file, const std::string& observation_file,
                          const std::string& schema_file) {
  write_file(subject_file, subjects_csv(ds));
  write_file(observation_file, observations_csv(ds));
  write_file(schema_file, schema_to_json(ds.schema).dump(2) + "\n");
}

/// Per-subject design vectors; blocks of missing covariates are zero and
/// listed in `missing` for imputation.
struct EncodedSubject {
  Eigen::VectorXd x;
  std::vector<int> missing;
};

inline std::vector<EncodedSubject> encode_covariates(const PanelDataset& ds) {
  const CovariateEncoding enc(ds.schema.covariates);
  std::vector<EncodedSubject> out;
  out.reserve(ds.n());
  for (const auto& s : ds.subjects) {
    EncodedSubject e{enc.encode(s.covariates), {}};
    for (std::size_t l = 0; l < s.covariates.size(); ++l) {
      if (s.covariates[l] < 0) e.missing.push_back(static_cast<int>(l));
    }
    out.push_back(std::move(e));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Subpopulations

/// Restriction C of the covariate space. An empty allowed-set means the
/// covariate is unconstrained.
struct SubpopulationQuery {
  std::vector<std::vector<bool>> allowed;
  std::string label = "all";

  static SubpopulationQuery all(const Schema& schema) {
    SubpopulationQuery q;
    q.allowed.assign(schema.covariates.size(), {});
    return q;
  }

  bool admits(std::size_t covariate, int code) const {
    if (covariate >= allowed.size() || allowed[covariate].empty()) return true;
    return code >= 0 && static_cast<std::size_t>(code) < allowed[covariate].size() && allowed[covariate][static_cast<std::size_t>(code)];
  }
  bool unconstrained() const {
    return std::all_of(allowed.begin(), allowed.end(), [](const auto& a) { return a.empty(); });
  }
};

/// Parses expressions such as `gender=1;race=2,3` (labels from the schema).
/// An empty expression selects the whole population.
inline SubpopulationQuery parse_subpopulation(std::string_view expr, const Schema& schema) {
  auto q = SubpopulationQuery::all(schema);
  expr = trim(expr);
  if (expr.empty() || expr == "all") return q;
  std::vector<std::string> parts;
  std::size_t start = 0;
  for (;;) {
    const auto pos = expr.find(';', start);
    const auto part = trim(expr.substr(start, pos == std::string_view::npos ? expr.npos : pos - start));
    if (!part.empty()) parts.emplace_back(part);
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  std::vector<std::string> canonical;
  for (const auto& part : parts) {
    const auto eq = part.find('=');
    if (eq == std::string::npos) throw DataError("subpopulation: expected name=labels in '" + part + "'");
    const std::string name(trim(std::string_view(part).substr(0, eq)));
    const int l = schema.find_covariate(name);
    if (l < 0) {
      std::vector<std::string> names;
      for (const auto& c : schema.covariates) names.push_back(c.name);
      throw DataError("subpopulation: unknown covariate '" + name + "' (valid: " + join(names, ", ") + ")");
    }
    const auto& cov = schema.covariates[static_cast<std::size_t>(l)];
    auto& mask = q.allowed[static_cast<std::size_t>(l)];
    if (mask.empty()) mask.assign(static_cast<std::size_t>(cov.num_categories()), false);
    for (const auto& label : split_csv_line(std::string_view(part).substr(eq + 1))) {
      const int code = cov.find_category(label);
      if (code < 0) {
        throw DataError("subpopulation: unknown category '" + label + "' for '" + name + "' (valid: " + join(cov.categories, ", ") + ")");
      }
      mask[static_cast<std::size_t>(code)] = true;
    }
  }
  for (std::size_t l = 0; l < q.allowed.size(); ++l) {
    if (q.allowed[l].empty()) continue;
    std::vector<std::string> labels;
    for (std::size_t c = 0; c < q.allowed[l].size(); ++c) {
      if (q.allowed[l][c]) labels.push_back(schema.covariates[l].categories[c]);
    }
    if (labels.empty()) throw DataError("subpopulation: no admissible category for '" + schema.covariates[l].name + "'");
    canonical.push_back(schema.covariates[l].name + "=" + join(labels, "|"));
  }
  q.label = join(canonical, ";");
  return q;
}

}  // namespace msd
