#pragma once

// Plan files: flat key = value lines grouped under [experiment-name] sections.
// Keys before the first section apply to every experiment. '#' starts a comment.
//
//   seed = 7
//   [paramagnet-converge]
//   N = 100:100000:10
//   m = 0.5
//   out = "runs/pm.csv"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "ensemble_lab/errors.hpp"
#include "ensemble_lab/experiments.hpp"

namespace ensemble_lab::config {

using experiments::ExperimentId;
using experiments::ExperimentPlan;

// Invalid configuration; field() names the offending key.
class ConfigError : public DomainError {
 public:
  ConfigError(std::string field, const std::string& what)
      : DomainError(field.empty() ? what : field + ": " + what), field_(std::move(field)) {}
  const std::string& field() const noexcept { return field_; }

 private:
  std::string field_;
};

inline const std::vector<std::string>& plan_keys() {
  static const std::vector<std::string> keys{"N",          "m",       "mu",     "rho",        "h",
                                             "J",          "epsilon", "beta",   "observable", "target",
                                             "lambda",     "samples", "sample_cap", "trials", "seed",
                                             "out"};
  return keys;
}

namespace detail {

inline std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline double parse_real(std::string_view s, const std::string& field) {
  s = trim(s);
  if (!s.empty() && s.front() == '+') s.remove_prefix(1);
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size() || s.empty())
    throw ConfigError(field, "expected a number, got '" + std::string(s) + "'");
  if (!std::isfinite(v)) throw ConfigError(field, "must be finite");
  return v;
}

inline std::uint64_t parse_unsigned(std::string_view s, const std::string& field) {
  s = trim(s);
  std::uint64_t v = 0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec == std::errc() && ptr == s.data() + s.size() && !s.empty()) return v;
  // Accept integral reals such as 1e5.
  const double d = parse_real(s, field);
  if (d < 0.0 || d != std::floor(d) || d > 9.007199254740992e15)
    throw ConfigError(field, "expected a non-negative integer, got '" + std::string(s) + "'");
  return static_cast<std::uint64_t>(d);
}

inline std::string unknown_key_message() {
  std::string known;
  for (const auto& k : plan_keys()) known += (known.empty() ? "" : ", ") + k;
  return "unknown key (known keys: " + known + ")";
}

inline std::vector<std::string_view> split(std::string_view s, char sep) {
  std::vector<std::string_view> out;
  for (;;) {
    const auto k = s.find(sep);
    out.push_back(trim(s.substr(0, k)));
    if (k == std::string_view::npos) return out;
    s.remove_prefix(k + 1);
  }
}

}  // namespace detail

// "a,b,c" or "start:stop:factor" (geometric, stop included up to rounding).
// An empty string is the empty grid.
inline std::vector<double> parse_real_grid(std::string_view s, const std::string& field) {
  s = detail::trim(s);
  std::vector<double> out;
  if (s.empty()) return out;
  if (s.find(':') != std::string_view::npos) {
    const auto parts = detail::split(s, ':');
    if (parts.size() != 3) throw ConfigError(field, "geometric grid must be start:stop:factor");
    const double a = detail::parse_real(parts[0], field), b = detail::parse_real(parts[1], field),
                 f = detail::parse_real(parts[2], field);
    if (!(a > 0.0) || !(b >= a) || !(f > 1.0))
      throw ConfigError(field, "geometric grid needs 0 < start <= stop and factor > 1");
    for (double x = a; x <= b * (1.0 + 1e-9); x *= f) out.push_back(x);
    return out;
  }
  for (auto part : detail::split(s, ',')) out.push_back(detail::parse_real(part, field));
  return out;
}

inline std::vector<std::int64_t> parse_int_grid(std::string_view s, const std::string& field) {
  std::vector<std::int64_t> out;
  for (double x : parse_real_grid(s, field)) {
    const double r = std::round(x);
    if (std::abs(x - r) > 1e-6 * std::max(1.0, std::abs(x)) || r > 9.0e15 || r < -9.0e15)
      throw ConfigError(field, "expected integers, got " + experiments::detail::fmt(x));
    out.push_back(static_cast<std::int64_t>(r));
  }
  return out;
}

// Sets one plan field from its text form. Throws ConfigError naming the key.
inline void apply_key(ExperimentPlan& p, const std::string& key, std::string_view raw) {
  using namespace detail;
  std::string_view v = trim(raw);
  if (v.size() >= 2 && v.front() == '"' && v.back() == '"') v = v.substr(1, v.size() - 2);
  if (key == "N") p.N_grid = parse_int_grid(v, key);
  else if (key == "m") p.m = parse_real(v, key);
  else if (key == "mu") p.mu = v.empty() ? std::nullopt : std::optional<double>(parse_real(v, key));
  else if (key == "rho") p.rho = parse_real(v, key);
  else if (key == "h") p.h = parse_real(v, key);
  else if (key == "J") p.J = parse_real(v, key);
  else if (key == "epsilon") p.epsilon = parse_real(v, key);
  else if (key == "beta") p.beta = v.empty() ? std::nullopt : std::optional<double>(parse_real(v, key));
  else if (key == "observable") p.observable = std::string(v);
  else if (key == "target") p.target = std::string(v);
  else if (key == "lambda") p.lambda_grid = parse_real_grid(v, key);
  else if (key == "samples") p.samples = parse_unsigned(v, key);
  else if (key == "sample_cap") p.sample_cap = parse_unsigned(v, key);
  else if (key == "trials") p.trials = parse_unsigned(v, key);
  else if (key == "seed") p.seed = parse_unsigned(v, key);
  else if (key == "out") p.output = std::string(v);
  else throw ConfigError(key, detail::unknown_key_message());
}

struct Entry {
  std::string key;
  std::string value;
  int line = 0;
};

// Section name ("" for the preamble) -> entries in file order.
using ConfigFile = std::map<std::string, std::vector<Entry>>;

inline ConfigFile parse_file_text(std::string_view text) {
  ConfigFile out;
  std::string section;
  out[section];
  int lineno = 0;
  std::istringstream in{std::string(text)};
  for (std::string line; std::getline(in, line);) {
    ++lineno;
    // Strip comments outside quotes.
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
      if (line[i] == '"') quoted = !quoted;
      if (line[i] == '#' && !quoted) {
        line.resize(i);
        break;
      }
    }
    const auto s = detail::trim(line);
    if (s.empty()) continue;
    const std::string where = "line " + std::to_string(lineno);
    if (s.front() == '[') {
      if (s.back() != ']') throw ConfigError("", where + ": malformed section header");
      section = std::string(detail::trim(s.substr(1, s.size() - 2)));
      if (!experiments::parse_id(section))
        throw ConfigError(section, where + ": unknown experiment section");
      section = experiments::cli_name(*experiments::parse_id(section));
      out[section];
      continue;
    }
    const auto eq = s.find('=');
    if (eq == std::string_view::npos) throw ConfigError("", where + ": expected key = value");
    const std::string key(detail::trim(s.substr(0, eq)));
    if (std::find(plan_keys().begin(), plan_keys().end(), key) == plan_keys().end())
      throw ConfigError(key, where + ": " + detail::unknown_key_message());
    for (const auto& e : out[section])
      if (e.key == key) throw ConfigError(key, where + ": duplicate key (first set on line " + std::to_string(e.line) + ")");
    out[section].push_back({key, std::string(detail::trim(s.substr(eq + 1))), lineno});
  }
  return out;
}

// Plan for `id`: defaults, then the preamble, then the experiment's section.
inline ExperimentPlan plan_from_file(const ConfigFile& f, ExperimentId id) {
  ExperimentPlan p = experiments::default_plan(id);
  auto apply_all = [&](const std::string& section) {
    const auto it = f.find(section);
    if (it == f.end()) return;
    for (const auto& e : it->second) apply_key(p, e.key, e.value);
  };
  apply_all("");
  apply_all(experiments::cli_name(id));
  return p;
}

inline ExperimentPlan parse_plan(std::string_view text, ExperimentId id) {
  return plan_from_file(parse_file_text(text), id);
}

inline ConfigFile load_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config", "cannot read '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_file_text(ss.str());
}

namespace detail {

inline std::string real_text(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

template <class T>
std::string join(const std::vector<T>& xs) {
  std::string s;
  for (const auto& x : xs) {
    if (!s.empty()) s += ",";
    if constexpr (std::is_floating_point_v<T>)
      s += real_text(x);
    else
      s += std::to_string(x);
  }
  return s;
}

}  // namespace detail

// Effective plan as a single section; parse_plan(serialize(p), p.id) == p.
inline std::string serialize(const ExperimentPlan& p) {
  using detail::real_text;
  std::ostringstream os;
  os << '[' << experiments::cli_name(p.id) << "]\n";
  os << "N = " << detail::join(p.N_grid) << '\n';
  os << "m = " << real_text(p.m) << '\n';
  if (p.mu) os << "mu = " << real_text(*p.mu) << '\n';
  os << "rho = " << real_text(p.rho) << '\n';
  os << "h = " << real_text(p.h) << '\n';
  os << "J = " << real_text(p.J) << '\n';
  os << "epsilon = " << real_text(p.epsilon) << '\n';
  if (p.beta) os << "beta = " << real_text(*p.beta) << '\n';
  os << "observable = \"" << p.observable << "\"\n";
  os << "target = \"" << p.target << "\"\n";
  os << "lambda = " << detail::join(p.lambda_grid) << '\n';
  os << "samples = " << p.samples << '\n';
  os << "sample_cap = " << p.sample_cap << '\n';
  os << "trials = " << p.trials << '\n';
  os << "seed = " << p.seed << '\n';
  os << "out = \"" << p.output << "\"\n";
  return os.str();
}

// Diagnostics for a plan; empty iff run(plan) passes its precondition checks.
inline std::vector<std::string> validate(const ExperimentPlan& p) { return experiments::diagnostics(p); }

}  // namespace ensemble_lab::config
