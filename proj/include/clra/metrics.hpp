#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <tuple>
#include <vector>

#include <json.hpp>

#include <clra/records.hpp>
#include <clra/scene.hpp>

namespace clra {

// Mean absolute offset error: mean |delta - delta*| + mean |eta - eta*|.
template <typename S>
S estimation_error(const TimingOffsetsT<S>& estimate, const TimingOffsetsT<S>& truth) {
  if (estimate.delta.size() != truth.delta.size() || estimate.eta.size() != truth.eta.size())
    throw std::invalid_argument("estimation_error: offset dimensions disagree");
  if (estimate.delta.size() == 0 || estimate.eta.size() == 0)
    throw std::invalid_argument("estimation_error: empty offsets");
  return (estimate.delta - truth.delta).cwiseAbs().mean() +
         (estimate.eta - truth.eta).cwiseAbs().mean();
}

inline bool is_recovered(double er) { return er < 1e-4; }

inline constexpr const char* kBandRecovered = "er<1e-4";
inline constexpr const char* kBandNear = "1e-4<=er<1e-2";

// Aggregate over Nc scene configurations, each solved from In starts.
struct MetricSummary {
  std::string method;
  Eigen::Index m{}, n{};
  double sigma{};
  int nc{};                // scene configurations seen
  int in{};                // starts per configuration
  double rr{};             // recovered runs / (nc * in)
  double cr{};             // configurations with >=1 recovery / nc
  double band_recovered{}; // fraction of runs with er < 1e-4
  double band_near{};      // fraction with 1e-4 <= er < 1e-2
  int converged{};         // runs reporting Converged
  int errors{};            // runs reporting Error
  double median_runtime_ms{};
};

namespace detail {

inline double median_of(std::vector<double> values) {
  if (values.empty()) return 0.0;
  std::sort(values.begin(), values.end());
  const std::size_t h = values.size() / 2;
  return values.size() % 2 ? values[h] : 0.5 * (values[h - 1] + values[h]);
}

}  // namespace detail

// Collapse records sharing (method, m, n, sigma) into one summary.  All
// configurations in a group must carry the same number of runs.
inline std::vector<MetricSummary> summarize(const std::vector<RunRecord>& records) {
  using Key = std::tuple<std::string, Eigen::Index, Eigen::Index, double>;
  std::map<Key, std::map<int, std::vector<const RunRecord*>>> groups;
  for (const RunRecord& rec : records)
    groups[{rec.method, rec.m, rec.n, rec.sigma}][rec.config_index].push_back(&rec);

  std::vector<MetricSummary> out;
  for (const auto& [key, configs] : groups) {
    MetricSummary s;
    s.method = std::get<0>(key);
    s.m = std::get<1>(key);
    s.n = std::get<2>(key);
    s.sigma = std::get<3>(key);
    s.nc = static_cast<int>(configs.size());
    s.in = static_cast<int>(configs.begin()->second.size());

    int total = 0, recovered = 0, near = 0, configs_hit = 0;
    std::vector<double> runtimes;
    for (const auto& [cfg, runs] : configs) {
      if (static_cast<int>(runs.size()) != s.in)
        throw std::invalid_argument("summarize: ragged run counts within a group");
      int hits = 0;
      for (const RunRecord* rec : runs) {
        ++total;
        runtimes.push_back(rec->runtime_ms);
        if (rec->status == RunStatus::Error) ++s.errors;
        if (rec->status == RunStatus::Converged) ++s.converged;
        if (std::isfinite(rec->er)) {
          if (is_recovered(rec->er)) ++hits;
          else if (rec->er < 1e-2) ++near;
        }
      }
      recovered += hits;
      if (hits > 0) ++configs_hit;
    }
    s.rr = static_cast<double>(recovered) / total;
    s.cr = static_cast<double>(configs_hit) / s.nc;
    s.band_recovered = static_cast<double>(recovered) / total;
    s.band_near = static_cast<double>(near) / total;
    s.median_runtime_ms = detail::median_of(std::move(runtimes));
    out.push_back(std::move(s));
  }
  return out;
}

inline nlohmann::json to_json(const MetricSummary& s) {
  return {{"method", s.method},
          {"m", s.m},
          {"n", s.n},
          {"sigma", s.sigma},
          {"nc", s.nc},
          {"in", s.in},
          {"rr", s.rr},
          {"cr", s.cr},
          {"bands", {{kBandRecovered, s.band_recovered}, {kBandNear, s.band_near}}},
          {"converged", s.converged},
          {"errors", s.errors},
          {"median_runtime_ms", s.median_runtime_ms}};
}

inline std::string metric_csv_header() {
  return "method,m,n,sigma,nc,in,rr,cr,band_recovered,band_near,converged,errors,"
         "median_runtime_ms";
}

inline std::string metric_csv_row(const MetricSummary& s) {
  std::ostringstream os;
  os << s.method << ',' << s.m << ',' << s.n << ',' << detail::fmt(s.sigma) << ',' << s.nc
     << ',' << s.in << ',' << detail::fmt(s.rr) << ',' << detail::fmt(s.cr) << ','
     << detail::fmt(s.band_recovered) << ',' << detail::fmt(s.band_near) << ',' << s.converged
     << ',' << s.errors << ',' << detail::fmt(s.median_runtime_ms);
  return os.str();
}

}  // namespace clra
