#ifndef FELLERLAB_CONFIG_HPP
#define FELLERLAB_CONFIG_HPP

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <openssl/evp.h>

#include <toml++/toml.hpp>

#include "error.hpp"
#include "spectral.hpp"

namespace fellerlab {

inline const std::set<std::string>& experiment_ids()
{
  static const std::set<std::string> ids{"spectral",          "cumulant-table", "closed-form-check",  "limit-law",
                                         "interchange",       "simulate",       "conditioned-sample", "martingale-check",
                                         "explosion",         "decomposable-suite"};
  return ids;
}

inline std::string sha256_hex(const std::string& bytes)
{
  std::array<unsigned char, EVP_MAX_MD_SIZE> md{};
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), md.data(), &len, EVP_sha256(), nullptr) != 1)
    fail(ErrorCode::config_error, "SHA-256 failed");
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += hex[md[i] >> 4];
    out += hex[md[i] & 15];
  }
  return out;
}

// One experiment per TOML file. Typed accessors take dotted paths and raise
// ConfigError with the offending key.
class ExperimentConfig {
 public:
  static ExperimentConfig from_string(const std::string& text, std::string origin = "<string>")
  {
    ExperimentConfig cfg;
    cfg.text_ = text;
    cfg.origin_ = std::move(origin);
    cfg.hash_ = sha256_hex(text);
    try {
      cfg.table_ = toml::parse(text, cfg.origin_);
    } catch (const toml::parse_error& e) {
      std::ostringstream os;
      os << cfg.origin_ << ":" << e.source().begin.line << ": " << e.description();
      fail(ErrorCode::config_error, os.str());
    }
    if (cfg.table_.empty()) fail(ErrorCode::config_error, cfg.origin_ + " is empty");
    const auto id = cfg.table_["experiment"].value<std::string>();
    if (!id) fail(ErrorCode::config_error, "missing string key 'experiment'");
    if (!experiment_ids().count(*id)) fail(ErrorCode::config_error, "unknown experiment id '" + *id + "'");
    cfg.experiment_ = *id;
    return cfg;
  }

  static ExperimentConfig from_file(const std::filesystem::path& p)
  {
    std::ifstream is(p, std::ios::binary);
    if (!is) fail(ErrorCode::config_error, "cannot open config " + p.string());
    std::ostringstream ss;
    ss << is.rdbuf();
    return from_string(ss.str(), p.string());
  }

  const std::string& experiment() const { return experiment_; }
  const std::string& hash() const { return hash_; }
  const std::string& text() const { return text_; }
  const std::string& origin() const { return origin_; }

  bool has(const std::string& path) const { return static_cast<bool>(table_.at_path(path)); }

  double real(const std::string& path) const
  {
    const auto v = node_or_fail(path).value<double>();
    if (!v) fail(ErrorCode::config_error, "'" + path + "' must be a number");
    return *v;
  }

  double real(const std::string& path, double fallback) const { return has(path) ? real(path) : fallback; }

  // Numbers or the strings "inf" / "infinity".
  double extended_real(const std::string& path) const
  {
    const auto node = node_or_fail(path);
    if (auto s = node.value<std::string>()) {
      if (*s == "inf" || *s == "infinity") return INFINITY;
      fail(ErrorCode::config_error, "'" + path + "' must be a number or \"inf\"");
    }
    return real(path);
  }

  double extended_real(const std::string& path, double fallback) const { return has(path) ? extended_real(path) : fallback; }

  std::int64_t integer(const std::string& path) const
  {
    const auto v = node_or_fail(path).value<std::int64_t>();
    if (!v) fail(ErrorCode::config_error, "'" + path + "' must be an integer");
    return *v;
  }

  std::int64_t integer(const std::string& path, std::int64_t fallback) const { return has(path) ? integer(path) : fallback; }

  std::size_t count(const std::string& path, std::size_t fallback) const
  {
    const auto v = integer(path, static_cast<std::int64_t>(fallback));
    if (v < 0) fail(ErrorCode::config_error, "'" + path + "' must be >= 0");
    return static_cast<std::size_t>(v);
  }

  std::string string(const std::string& path, const std::string& fallback) const
  {
    if (!has(path)) return fallback;
    const auto v = node_or_fail(path).value<std::string>();
    if (!v) fail(ErrorCode::config_error, "'" + path + "' must be a string");
    return *v;
  }

  bool boolean(const std::string& path, bool fallback) const
  {
    if (!has(path)) return fallback;
    const auto v = node_or_fail(path).value<bool>();
    if (!v) fail(ErrorCode::config_error, "'" + path + "' must be a boolean");
    return *v;
  }

  std::vector<double> reals(const std::string& path) const { return reals_of(array_or_fail(path), path); }

  std::vector<double> reals(const std::string& path, std::vector<double> fallback) const
  {
    return has(path) ? reals(path) : fallback;
  }

  Vector vector(const std::string& path) const
  {
    const auto xs = reals(path);
    return Eigen::Map<const Vector>(xs.data(), static_cast<Eigen::Index>(xs.size()));
  }

  // Array of arrays of equal length.
  Matrix matrix(const std::string& path) const
  {
    const toml::array& rows = array_or_fail(path);
    if (rows.empty()) fail(ErrorCode::config_error, "'" + path + "' is an empty matrix");
    std::vector<std::vector<double>> data;
    for (std::size_t i = 0; i < rows.size(); ++i) {
      const auto* row = rows[i].as_array();
      if (!row) fail(ErrorCode::config_error, "'" + path + "' must be an array of arrays");
      data.push_back(reals_of(*row, path));
    }
    Matrix m(static_cast<Eigen::Index>(data.size()), static_cast<Eigen::Index>(data.front().size()));
    for (std::size_t i = 0; i < data.size(); ++i) {
      if (data[i].size() != data.front().size()) fail(ErrorCode::config_error, "'" + path + "' has ragged rows");
      for (std::size_t j = 0; j < data[i].size(); ++j) m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = data[i][j];
    }
    return m;
  }

  // Array of k-vectors.
  std::vector<Vector> vectors(const std::string& path) const
  {
    const Matrix m = matrix(path);
    std::vector<Vector> out;
    for (Eigen::Index i = 0; i < m.rows(); ++i) out.push_back(m.row(i).transpose());
    return out;
  }

  // A time grid, given either as an explicit array or as {from, to, n}.
  std::vector<double> grid(const std::string& path) const
  {
    const auto node = node_or_fail(path);
    if (node.as_array()) return reals(path);
    if (node.as_table()) {
      const double lo = real(path + ".from"), hi = real(path + ".to");
      const auto n = integer(path + ".n");
      if (n < 2 || !(hi > lo)) fail(ErrorCode::config_error, "'" + path + "' needs n >= 2 and to > from");
      std::vector<double> g(static_cast<std::size_t>(n));
      for (std::int64_t i = 0; i < n; ++i) g[static_cast<std::size_t>(i)] = lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(n - 1);
      return g;
    }
    fail(ErrorCode::config_error, "'" + path + "' must be an array or a {from, to, n} table");
  }

  ModelParams model() const
  {
    const Matrix D = matrix("model.D");
    if (D.rows() != D.cols()) fail(ErrorCode::config_error, "model.D must be square");
    SpectralTolerances tol;
    tol.eig_tol = real("spectral.eig_tol", tol.eig_tol);
    tol.exp_tol = real("spectral.exp_tol", tol.exp_tol);
    try {
      return validate_model(D, real("model.c"), tol);
    } catch (const Error& e) {
      fail(ErrorCode::config_error, std::string("invalid model: ") + e.what());
    }
  }

  const toml::table& table() const { return table_; }

 private:
  toml::node_view<const toml::node> node_or_fail(const std::string& path) const
  {
    const auto node = table_.at_path(path);
    if (!node) fail(ErrorCode::config_error, "missing key '" + path + "'");
    return node;
  }

  const toml::array& array_or_fail(const std::string& path) const
  {
    const auto* a = node_or_fail(path).as_array();
    if (!a) fail(ErrorCode::config_error, "'" + path + "' must be an array");
    return *a;
  }

  static std::vector<double> reals_of(const toml::array& a, const std::string& path)
  {
    std::vector<double> out;
    for (std::size_t i = 0; i < a.size(); ++i) {
      if (auto s = a[i].value<std::string>(); s && (*s == "inf" || *s == "infinity")) {
        out.push_back(INFINITY);
        continue;
      }
      const auto v = a[i].value<double>();
      if (!v) fail(ErrorCode::config_error, "'" + path + "' must contain numbers");
      out.push_back(*v);
    }
    return out;
  }

  std::string experiment_;
  std::string text_;
  std::string origin_;
  std::string hash_;
  toml::table table_;
};

}  // namespace fellerlab

#endif  // FELLERLAB_CONFIG_HPP
