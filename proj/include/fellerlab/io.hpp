#ifndef FELLERLAB_IO_HPP
#define FELLERLAB_IO_HPP

#include <bit>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "mc.hpp"
#include "stats.hpp"

namespace fellerlab::io {

using json = nlohmann::ordered_json;

static_assert(std::endian::native == std::endian::little, "binary ensemble files are written in host order");

// Non-finite reals are written as the strings "inf", "-inf" and "nan".
inline json number(double x)
{
  if (std::isfinite(x)) return x;
  if (std::isnan(x)) return "nan";
  return x > 0 ? "inf" : "-inf";
}

inline json vector(const Vector& v)
{
  json a = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(number(v(i)));
  return a;
}

inline json matrix(const Matrix& m)
{
  json a = json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) a.push_back(vector(m.row(i).transpose()));
  return a;
}

inline std::string format(double x)
{
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

inline json to_json(const ModelParams& m)
{
  return {{"k", m.k()}, {"D", matrix(m.D())}, {"c", number(m.c())}, {"mu", number(m.mu())},
          {"criticality", to_string(m.criticality())}};
}

inline json to_json(const SpectralData& s)
{
  json j{{"mu", number(s.mu)}, {"xi", vector(s.xi)}, {"eta", vector(s.eta)}, {"gamma", number(s.gamma)},
         {"irreducible", s.irreducible}};
  j["P"] = s.P ? matrix(*s.P) : json(nullptr);
  return j;
}

inline json to_json(const LimitLawDescriptor& d)
{
  json j{{"form", to_string(d.form)}};
  switch (d.form) {
    case LawForm::gamma:
      j["shape"] = number(d.shape);
      j["rate"] = number(d.rate);
      break;
    case LawForm::product_of_exponentials: {
      json r = json::array();
      for (double x : d.rates) r.push_back(number(x));
      j["rates"] = r;
      break;
    }
    case LawForm::numeric_laplace: {
      json rows = json::array();
      for (std::size_t i = 0; i < d.table.values.size(); ++i)
        rows.push_back({{"lambda", vector(d.table.lambdas[i])}, {"value", number(d.table.values[i])}});
      j["table"] = rows;
      j["horizon"] = number(d.table.horizon);
      break;
    }
    default: break;
  }
  j["degenerate"] = d.degenerate;
  j["provenance"] = d.provenance;
  return j;
}

inline json to_json(const GofReport& r)
{
  return {{"statistic", number(r.statistic)}, {"n_effective", number(r.n_effective)}, {"threshold", number(r.threshold)},
          {"pass", r.pass}, {"reference", to_json(r.reference)}};
}

inline json to_json(const HTransform& h) { return {{"w", vector(h.w)}, {"rate", number(h.rate)}, {"provenance", h.provenance}}; }

inline void write_text(const std::filesystem::path& p, const std::string& text)
{
  std::ofstream os(p, std::ios::binary);
  if (!os) fail(ErrorCode::config_error, "cannot write " + p.string());
  os << text;
}

inline void write_json(const std::filesystem::path& p, const json& j) { write_text(p, j.dump(2) + "\n"); }

inline json ensemble_sidecar(const WeightedEnsemble& ens)
{
  json j{{"model", to_json(ens.model)},
         {"x0", vector(ens.x0)},
         {"seed", ens.seed},
         {"scheme", to_string(ens.scheme)},
         {"dt", number(ens.dt)},
         {"theta", number(ens.theta)},
         {"n_paths", ens.paths.size()},
         {"n_simulated", ens.n_simulated},
         {"acceptance_rate", number(ens.acceptance_rate)}};
  j["conditioning"] = ens.conditioning ? json(ens.conditioning->label()) : json(nullptr);
  j["h_transform"] = ens.h ? to_json(*ens.h) : json(nullptr);
  json times = json::array();
  if (!ens.paths.empty())
    for (double t : ens.paths.front().times()) times.push_back(number(t));
  j["times"] = times;
  json cols = json::array();
  const int k = ens.model.k();
  for (std::size_t r = 0; r < times.size(); ++r)
    for (int i = 1; i <= k; ++i) cols.push_back("x_" + std::to_string(i) + "@" + std::to_string(r));
  cols.push_back("weight");
  cols.push_back("absorbed_at");
  j["columns"] = cols;
  j["layout"] = "columnar float64 little-endian, n_paths values per column, columns in the order listed";
  return j;
}

// Writes <stem>.bin (columnar float64) and <stem>.json (sidecar). absorbed_at
// is NaN for paths that were alive at the final time.
inline void write_ensemble_binary(const WeightedEnsemble& ens, const std::filesystem::path& stem)
{
  auto bin = stem;
  bin += ".bin";
  auto side = stem;
  side += ".json";
  std::ofstream os(bin, std::ios::binary);
  if (!os) fail(ErrorCode::config_error, "cannot write " + bin.string());
  const std::size_t n = ens.paths.size();
  const std::size_t nt = n ? ens.paths.front().size() : 0;
  std::vector<double> col(n);
  auto flush = [&] { os.write(reinterpret_cast<const char*>(col.data()), static_cast<std::streamsize>(n * sizeof(double))); };
  for (std::size_t r = 0; r < nt; ++r)
    for (int i = 0; i < ens.model.k(); ++i) {
      for (std::size_t p = 0; p < n; ++p) col[p] = ens.paths[p].state(r)(i);
      flush();
    }
  for (std::size_t p = 0; p < n; ++p) col[p] = ens.weights[p];
  flush();
  for (std::size_t p = 0; p < n; ++p) col[p] = ens.paths[p].absorbed_at.value_or(std::nan(""));
  flush();
  write_json(side, ensemble_sidecar(ens));
}

inline std::vector<std::vector<double>> read_columns(const std::filesystem::path& bin, std::size_t n_paths)
{
  std::ifstream is(bin, std::ios::binary);
  if (!is) fail(ErrorCode::config_error, "cannot read " + bin.string());
  std::vector<std::vector<double>> cols;
  std::vector<double> col(n_paths);
  while (is.read(reinterpret_cast<char*>(col.data()), static_cast<std::streamsize>(n_paths * sizeof(double))))
    cols.push_back(col);
  return cols;
}

// Long format: path, t, x_1..x_k, weight.
inline void write_ensemble_csv(const WeightedEnsemble& ens, std::ostream& os)
{
  const int k = ens.model.k();
  os << "path,t";
  for (int i = 1; i <= k; ++i) os << ",x_" << i;
  os << ",weight\n";
  for (std::size_t p = 0; p < ens.paths.size(); ++p) {
    const auto& path = ens.paths[p];
    for (std::size_t r = 0; r < path.size(); ++r) {
      os << p << ',' << format(path.times()[r]);
      for (int i = 0; i < k; ++i) os << ',' << format(path.state(r)(i));
      os << ',' << format(ens.weights[p]) << '\n';
    }
  }
}

inline void write_laplace_csv(const std::vector<LaplacePoint>& pts, std::ostream& os)
{
  if (pts.empty()) return;
  const auto k = pts.front().lambda.size();
  for (Eigen::Index i = 1; i <= k; ++i) os << "lambda_" << i << ',';
  os << "value,se\n";
  for (const auto& p : pts) {
    for (Eigen::Index i = 0; i < k; ++i) os << format(p.lambda(i)) << ',';
    os << format(p.value) << ',' << format(p.se) << '\n';
  }
}

inline void write_tail_csv(const std::vector<TailPoint>& rows, std::ostream& os)
{
  os << "t,probability,se\n";
  for (const auto& r : rows) os << format(r.t) << ',' << format(r.probability) << ',' << format(r.se) << '\n';
}

}  // namespace fellerlab::io

#endif  // FELLERLAB_IO_HPP
