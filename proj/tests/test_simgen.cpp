#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "msd/simgen.hpp"
#include "support.hpp"

using namespace msd;
using namespace msd::testing;

namespace {

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<GammaRow> rows_of(std::vector<double> means, std::string pair = "a~b", std::string subpop = "all") {
  std::vector<GammaRow> rows;
  for (std::size_t t = 0; t < means.size(); ++t) rows.push_back({pair, double(t + 1), subpop, means[t], means[t], means[t], 1});
  return rows;
}

}  // namespace

TEST(Generate, CaseOneWaveStructure) {
  Rng rng(1);
  const auto ds = generate(make_dgp(1, 7), rng);
  ASSERT_EQ(ds.n(), 4000u);
  for (const auto& s : ds.subjects) {
    ASSERT_EQ(s.observations.size(), 3u);
    EXPECT_EQ(s.weight, 1.0);
    for (int j = 0; j < 3; ++j) {
      const double t = s.observations[j].time;
      EXPECT_GE(t, 3 * j + 1);
      EXPECT_LE(t, 3 * j + 3);
      EXPECT_EQ(t, std::floor(t));
    }
  }
  std::set<double> seen;
  for (const auto& s : ds.subjects) {
    for (const auto& o : s.observations) seen.insert(o.time);
  }
  EXPECT_EQ(seen.size(), 9u);
}

TEST(Generate, ResponsesRespectSchemaKinds) {
  for (int c = 1; c <= 3; ++c) {
    Rng rng(2);
    const auto ds = generate(make_dgp(c, 3, 300), rng);
    for (const auto& s : ds.subjects) {
      for (const auto& o : s.observations) {
        ASSERT_EQ(o.values.size(), 4u);
        EXPECT_TRUE(std::isfinite(o.values[0]));
        EXPECT_TRUE(o.values[1] == 0.0 || o.values[1] == 1.0);
        EXPECT_GE(o.values[2], 0.0);
        EXPECT_EQ(o.values[2], std::floor(o.values[2]));
        EXPECT_TRUE(o.values[3] == 0.0 || o.values[3] == 1.0 || o.values[3] == 2.0);
      }
    }
  }
}

TEST(Generate, CaseThreeStrataAndWeights) {
  Rng rng(3);
  const auto d = make_dgp(3, 7);
  const auto ds = generate(d, rng);
  ASSERT_EQ(ds.n(), 4500u);
  std::map<double, int> counts;
  double total = 0.0;
  for (const auto& s : ds.subjects) {
    ++counts[s.weight];
    total += s.weight;
  }
  ASSERT_EQ(counts.size(), 3u);
  EXPECT_EQ(counts[650000.0 / 1500.0], 1500);
  EXPECT_EQ(counts[300000.0 / 1500.0], 1500);
  EXPECT_EQ(counts[50000.0 / 1500.0], 1500);
  // floating-point accumulation of 4,500 thirds
  EXPECT_NEAR(total, 1e6, 1e-12 * 1e6);
  EXPECT_EQ(ds.population_size, 1e6);
  EXPECT_EQ(d.population_size(), 1e6);
}

TEST(Generate, MatrixDistributions) {
  const auto d1 = make_dgp(1, 11);
  ASSERT_EQ(d1.F.size(), 9u);
  for (int t = 1; t < 9; ++t) {
    const bool change = t == 3 || t == 6;  // F_4 and F_7 in 1-based time
    EXPECT_EQ((d1.F[t] - d1.F[t - 1]).norm() > 0.0, change) << t;
  }
  std::vector<double> e;
  for (int c = 1; c <= 3; ++c) {
    const auto d = make_dgp(c, 12 + c);
    for (const auto& m : d.D) e.insert(e.end(), m.data(), m.data() + m.size());
  }
  EXPECT_NEAR(mean(e), 0.0, 4.0 * 0.05 / std::sqrt(double(e.size())));
  EXPECT_NEAR(std::sqrt(variance(e)), 0.05, 0.01);
  EXPECT_THROW(make_dgp(4, 1), std::invalid_argument);
}

TEST(Generate, DeterministicFilesAndSidecar) {
  const auto dir = std::filesystem::temp_directory_path() / "msd_simgen_test";
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  std::string first[3];
  for (int rep = 0; rep < 2; ++rep) {
    Rng rng(5);
    const auto d = make_dgp(3, 5, 100);
    const auto ds = generate(d, rng);
    write_dataset(ds, (dir / "s.csv").string(), (dir / "o.csv").string(), (dir / "schema.json").string());
    const std::string cur[3] = {slurp(dir / "s.csv"), slurp(dir / "o.csv"), slurp(dir / "schema.json")};
    for (int k = 0; k < 3; ++k) {
      if (rep == 0) {
        first[k] = cur[k];
      } else {
        EXPECT_EQ(first[k], cur[k]);
      }
    }
    const auto back = dgp_from_json(dgp_to_json(d));
    EXPECT_EQ(back.case_id, 3);
    ASSERT_EQ(back.F.size(), d.F.size());
    for (std::size_t g = 0; g < d.F.size(); ++g) {
      EXPECT_EQ(back.F[g], d.F[g]);
      EXPECT_EQ(back.D[g], d.D[g]);
    }
  }
  std::filesystem::remove_all(dir);
}

TEST(Oracle, IdenticalDriverGivesOne) {
  DgpSpec d = make_dgp(1, 1);
  d.noise_sd = {0.0};
  d.D[0].setZero();
  for (auto& f : d.F) {
    f.setZero();
    f.col(0).setOnes();
  }
  Rng rng(6);
  const auto rows = oracle_gamma(d, 2000, SubpopulationQuery::all(simulation_schema()), rng);
  int checked = 0;
  for (const auto& r : rows) {
    if (r.pair == "y_cont~y_bin" || r.pair == "y_cont~y_count" || r.pair == "y_bin~y_count") {
      ASSERT_TRUE(r.mean.has_value());
      EXPECT_EQ(*r.mean, 1.0) << r.pair;
      ++checked;
    }
  }
  EXPECT_EQ(checked, 27);
}

TEST(Oracle, ReproducibleAndRestricted) {
  const auto d = make_dgp(2, 3);
  const auto s = simulation_schema();
  Rng a(7), b(7);
  EXPECT_EQ(gamma_csv(oracle_gamma(d, 500, SubpopulationQuery::all(s), a)), gamma_csv(oracle_gamma(d, 500, SubpopulationQuery::all(s), b)));
  const auto q = parse_subpopulation("x=1", s);
  Rng c(8);
  const auto rows = oracle_gamma(d, 500, q, c);
  EXPECT_EQ(rows.size(), 12u * 9u);
  for (const auto& r : rows) EXPECT_EQ(r.subpop, q.label);
  EXPECT_THROW(oracle_gamma(d, 1, q, c), std::invalid_argument);
}

TEST(Oracle, MonteCarloErrorShrinksAsRootM) {
  const auto d = make_dgp(1, 9);
  const auto q = SubpopulationQuery::all(simulation_schema());
  auto spread = [&](std::size_t M) {
    std::vector<double> v;
    for (int r = 0; r < 60; ++r) {
      Rng rng(derive_seed(100 + M, r));
      v.push_back(*oracle_gamma(d, M, q, rng)[0].mean);
    }
    return std::sqrt(variance(v));
  };
  const double ratio = spread(250) / spread(1000);
  // quadrupling M halves the SE; the ratio of two 60-draw SDs is within about 30% here
  EXPECT_GT(ratio, 1.4);
  EXPECT_LT(ratio, 2.8);
}

TEST(Score, Examples) {
  const auto truth = rows_of({0.4, -0.6, 0.2});
  const auto same = score_mae(truth, truth);
  EXPECT_EQ(*average_mae(same, "all"), 0.0);
  const auto zero = score_mae(zero_estimate(truth), truth);
  EXPECT_NEAR(*average_mae(zero, "all"), (0.4 + 0.6 + 0.2) / 3.0, 1e-15);
  const auto est = rows_of({0.1, 0.3});
  const auto tr = rows_of({0.0, 0.0});
  const auto two = score_mae(est, tr);
  EXPECT_NEAR(*average_mae(two, "all"), 0.2, 1e-15);
  ASSERT_EQ(two.size(), 3u);
  EXPECT_NEAR(two[0].mae, 0.1, 1e-15);
  EXPECT_NEAR(two[0].log_mae, std::log(0.1), 1e-12);
  EXPECT_THROW(score_mae(rows_of({0.1}, "c~d"), truth), DataError);
}

TEST(Score, UndefinedCellsAreSkippedAndSubpopsKeptApart) {
  auto truth = rows_of({0.5, 0.5}, "a~b", "x=0");
  auto more = rows_of({-0.5}, "a~b", "x=1");
  truth.insert(truth.end(), more.begin(), more.end());
  truth[1].mean.reset();
  auto est = zero_estimate(truth);
  est[1].mean = 0.9;
  const auto rows = score_mae(est, truth);
  EXPECT_EQ(*average_mae(rows, "x=0"), 0.5);
  EXPECT_EQ(*average_mae(rows, "x=1"), 0.5);
  for (const auto& r : rows) EXPECT_EQ(r.n_cells, 1u);
  const auto text = mae_csv(rows);
  EXPECT_EQ(text.substr(0, text.find('\n')), "subpop,time,mae,log_mae,n_cells");
  EXPECT_NE(text.find("x=0,average,0.5,"), std::string::npos);
}
