#pragma once

#include <array>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <clra/metrics.hpp>
#include <clra/records.hpp>
#include <clra/rng.hpp>
#include <clra/scene.hpp>
#include <clra/solver.hpp>

namespace clra {

// A Monte-Carlo study: for every (M,N) in the grid, nc random scenes, each
// solved by every method from in random starts at every noise level.
struct ExperimentPlan {
  std::vector<std::pair<Eigen::Index, Eigen::Index>> grid;
  std::vector<Method> methods;
  int nc{20};
  int in{50};
  std::vector<double> sigma_list{0.0};
  std::uint64_t master_seed{20260801};
  SolverConfig solver{};
  MeasurementKind kind{MeasurementKind::TOA};
  std::map<Method, PenaltyWeights> weight_overrides;
  Eigen::Vector3d box{10.0, 10.0, 3.0};
  double time_lo{-1.0};
  double time_hi{1.0};
  double c{340.0};
};

inline void validate_plan(const ExperimentPlan& plan) {
  if (plan.grid.empty()) throw std::invalid_argument("plan: empty (M,N) grid");
  if (plan.methods.empty()) throw std::invalid_argument("plan: no methods");
  if (plan.nc < 1 || plan.in < 1)
    throw std::invalid_argument("plan: scene and start counts must be >= 1");
  if (plan.sigma_list.empty()) throw std::invalid_argument("plan: no noise levels");
  for (double s : plan.sigma_list)
    if (!(s >= 0.0)) throw std::invalid_argument("plan: noise levels must be nonnegative");
  if (!(plan.time_lo < plan.time_hi)) throw std::invalid_argument("plan: empty time range");
  if (!(plan.box.array() > 0.0).all())
    throw std::invalid_argument("plan: box extents must be positive");
  if (!(plan.c > 0.0)) throw std::invalid_argument("plan: speed of sound must be positive");
  validate_config(plan.solver);
}

namespace detail {

struct WorkItem {
  Eigen::Index m, n;
  int cfg, init, sig_idx, method_idx;
  double sigma;
  Method method;
};

}  // namespace detail

// Runs one (scene, noise, start, method) cell.  Failures of any kind become
// Error records so a sweep never aborts half-way.
inline RunRecord execute_item(const ExperimentPlan& plan, const detail::WorkItem& it) {
  const auto u = [](auto v) { return static_cast<std::uint64_t>(v); };
  RunRecord rec;
  rec.method = method_name(it.method);
  rec.m = it.m;
  rec.n = it.n;
  rec.config_index = it.cfg;
  rec.init_index = it.init;
  rec.sigma = it.sigma;
  rec.seed = derive_seed(plan.master_seed, {3, u(it.m), u(it.n), u(it.cfg), u(it.sig_idx),
                                            u(it.init), u(it.method_idx)});
  try {
    rec.case_label = to_string(select_case(it.m, it.n));
    const std::uint64_t scene_seed =
        derive_seed(plan.master_seed, {1, u(it.m), u(it.n), u(it.cfg)});
    const Scene sc =
        generate_scene(it.m, it.n, plan.box, plan.time_lo, plan.time_hi, plan.c, scene_seed);

    MeasurementMatrix meas;
    TimingOffsets truth;
    if (plan.kind == MeasurementKind::TOA) {
      meas = toa_from_scene(sc);
      truth = {sc.delta, sc.eta};
    } else {
      meas = pseudo_toa_from_tdoa(tdoa_from_scene(sc), sc.c).measurement;
      truth = pseudo_truth_offsets(sc);
    }
    if (it.sigma > 0.0) {
      const std::uint64_t noise_seed =
          derive_seed(plan.master_seed, {2, u(it.m), u(it.n), u(it.cfg), u(it.sig_idx)});
      meas = add_noise(meas, it.sigma, noise_seed);
    }

    const TimingOffsets start = init_offsets(it.m, it.n, plan.time_lo, plan.time_hi, rec.seed);
    std::optional<PenaltyWeights> weights;
    if (auto f = plan.weight_overrides.find(it.method); f != plan.weight_overrides.end())
      weights = f->second;

    const SolveOutcome out = solve(meas, it.method, start, plan.solver, std::nullopt, weights);
    rec.status = run_status(out.status);
    rec.iterations = out.iterations;
    rec.runtime_ms = out.runtime_ms;
    rec.er = estimation_error(out.offsets, truth);
  } catch (const std::exception&) {
    rec.status = RunStatus::Error;
  }
  return rec;
}

// Record list is a pure function of the plan: item order is fixed and each
// worker writes only its own slot, so jobs > 1 changes nothing but wall time.
inline std::vector<RunRecord> run_plan(const ExperimentPlan& plan, int jobs = 0) {
  validate_plan(plan);

  std::vector<detail::WorkItem> items;
  for (const auto& [m, n] : plan.grid) {
    if (m < 5 || n < 5) {
      std::cerr << "skipping (" << m << "," << n
                << "): need at least 5 microphones and 5 sources\n";
      continue;
    }
    for (int cfg = 0; cfg < plan.nc; ++cfg)
      for (int sig = 0; sig < static_cast<int>(plan.sigma_list.size()); ++sig)
        for (int mi = 0; mi < static_cast<int>(plan.methods.size()); ++mi)
          for (int init = 0; init < plan.in; ++init)
            items.push_back(
                {m, n, cfg, init, sig, mi, plan.sigma_list[sig], plan.methods[mi]});
  }

  std::vector<RunRecord> records(items.size());
  std::size_t workers =
      jobs > 0 ? static_cast<std::size_t>(jobs)
               : std::max<std::size_t>(1, std::thread::hardware_concurrency());
  workers = std::min(workers, items.size());

  if (workers <= 1) {
    for (std::size_t k = 0; k < items.size(); ++k) records[k] = execute_item(plan, items[k]);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (std::size_t w = 0; w < workers; ++w)
      pool.emplace_back([&] {
        for (std::size_t k = next.fetch_add(1); k < items.size(); k = next.fetch_add(1))
          records[k] = execute_item(plan, items[k]);
      });
    for (std::thread& th : pool) th.join();
  }
  return records;
}

// One sub-experiment of a penalty sweep: the weight tuple 10^exponents (NaN
// exponent = weight pinned at zero) and the records it produced.
struct SweepPoint {
  std::array<double, 4> exponents;  // lambda, gamma, alpha, beta
  std::vector<RunRecord> records;
};

inline PenaltyWeights weights_from_exponents(const std::array<double, 4>& e) {
  const auto w = [](double x) { return std::isnan(x) ? 0.0 : std::pow(10.0, x); };
  return {w(e[0]), w(e[1]), w(e[2]), w(e[3])};
}

inline std::vector<SweepPoint> sweep_penalties(
    const ExperimentPlan& base, Method method,
    const std::vector<std::array<double, 4>>& exponent_grid, int jobs = 0) {
  if (exponent_grid.empty()) throw std::invalid_argument("sweep_penalties: empty exponent grid");
  std::vector<SweepPoint> out;
  out.reserve(exponent_grid.size());
  for (const std::array<double, 4>& e : exponent_grid) {
    ExperimentPlan plan = base;
    plan.methods = {method};
    plan.weight_overrides[method] = weights_from_exponents(e);
    out.push_back({e, run_plan(plan, jobs)});
  }
  return out;
}

// ---- results persistence ----

inline constexpr const char* kRecordsHeader =
    "method,m,n,case,config,init,sigma,seed,status,iterations,er,runtime_ms";

inline std::string record_csv_row(const RunRecord& r) {
  std::ostringstream os;
  os << r.method << ',' << r.m << ',' << r.n << ',' << r.case_label << ',' << r.config_index
     << ',' << r.init_index << ',' << detail::fmt(r.sigma) << ',' << r.seed << ','
     << to_string(r.status) << ',' << r.iterations << ',' << detail::fmt(r.er) << ','
     << detail::fmt(r.runtime_ms);
  return os.str();
}

inline void persist(const std::vector<RunRecord>& records, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  out << kRecordsHeader << '\n';
  for (const RunRecord& r : records) out << record_csv_row(r) << '\n';
  if (!out) throw std::runtime_error("write failed: " + path);
}

inline std::vector<RunRecord> load_records(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open for reading: " + path);
  std::string line;
  if (!std::getline(in, line) || line != kRecordsHeader)
    throw std::runtime_error("unexpected results header in " + path);
  std::vector<RunRecord> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const std::vector<std::string> f = detail::split(line, ',');
    if (f.size() != 12) throw std::runtime_error("malformed results row: " + line);
    RunRecord r;
    r.method = f[0];
    r.m = static_cast<Eigen::Index>(std::stoll(f[1]));
    r.n = static_cast<Eigen::Index>(std::stoll(f[2]));
    r.case_label = f[3];
    r.config_index = std::stoi(f[4]);
    r.init_index = std::stoi(f[5]);
    r.sigma = detail::parse_double(f[6]);
    r.seed = std::stoull(f[7]);
    r.status = run_status_from_string(f[8]);
    r.iterations = std::stoi(f[9]);
    r.er = detail::parse_double(f[10]);
    r.runtime_ms = detail::parse_double(f[11]);
    out.push_back(std::move(r));
  }
  return out;
}

// ---- plan files ----

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split_trimmed(const std::string& s, char sep) {
  std::vector<std::string> out;
  for (const std::string& item : split(s, sep)) {
    const std::string t = trim(item);
    if (!t.empty()) out.push_back(t);
  }
  return out;
}

}  // namespace detail

// key = value text, '#' comments.  Recognized keys: grid (MxN entries split by
// ';'), methods, nc, in, sigmas, master_seed, kind, m2, w_star, d_p, box,
// time_range, c, and weights.<method> = lambda,gamma,alpha,beta.  The
// CLRA_SEED environment variable, when set, overrides master_seed.
inline ExperimentPlan load_plan(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open for reading: " + path);
  ExperimentPlan plan;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string stripped = detail::trim(line.substr(0, line.find('#')));
    if (stripped.empty()) continue;
    const auto at = [&](const std::string& what) {
      return path + ":" + std::to_string(lineno) + ": " + what;
    };
    const auto eq = stripped.find('=');
    if (eq == std::string::npos) throw std::runtime_error(at("expected key = value"));
    const std::string key = detail::trim(stripped.substr(0, eq));
    const std::string val = detail::trim(stripped.substr(eq + 1));
    try {
      if (key == "grid") {
        plan.grid.clear();
        for (const std::string& entry : detail::split_trimmed(val, ';')) {
          const std::vector<std::string> mn = detail::split_trimmed(entry, 'x');
          if (mn.size() != 2) throw std::runtime_error("grid entries look like MxN");
          plan.grid.emplace_back(std::stoll(mn[0]), std::stoll(mn[1]));
        }
      } else if (key == "methods") {
        plan.methods.clear();
        for (const std::string& name : detail::split_trimmed(val, ','))
          plan.methods.push_back(method_from_name(name));
      } else if (key == "nc") {
        plan.nc = std::stoi(val);
      } else if (key == "in") {
        plan.in = std::stoi(val);
      } else if (key == "sigmas") {
        plan.sigma_list.clear();
        for (const std::string& s : detail::split_trimmed(val, ','))
          plan.sigma_list.push_back(detail::parse_double(s));
      } else if (key == "master_seed") {
        plan.master_seed = std::stoull(val);
      } else if (key == "kind") {
        plan.kind = measurement_kind_from(val);
      } else if (key == "m2") {
        plan.solver.m2 = std::stoi(val);
      } else if (key == "w_star") {
        plan.solver.w_star = detail::parse_double(val);
      } else if (key == "d_p") {
        plan.solver.d_p = detail::parse_double(val);
      } else if (key == "box") {
        const std::vector<std::string> b = detail::split_trimmed(val, ',');
        if (b.size() != 3) throw std::runtime_error("box needs three extents");
        for (int k = 0; k < 3; ++k) plan.box[k] = detail::parse_double(b[k]);
      } else if (key == "time_range") {
        const std::vector<std::string> t = detail::split_trimmed(val, ',');
        if (t.size() != 2) throw std::runtime_error("time_range needs lo, hi");
        plan.time_lo = detail::parse_double(t[0]);
        plan.time_hi = detail::parse_double(t[1]);
      } else if (key == "c") {
        plan.c = detail::parse_double(val);
      } else if (key.rfind("weights.", 0) == 0) {
        const Method method = method_from_name(key.substr(8));
        const std::vector<std::string> w = detail::split_trimmed(val, ',');
        if (w.size() != 4) throw std::runtime_error("weights need lambda,gamma,alpha,beta");
        plan.weight_overrides[method] = {detail::parse_double(w[0]), detail::parse_double(w[1]),
                                         detail::parse_double(w[2]), detail::parse_double(w[3])};
      } else {
        throw std::runtime_error("unknown key '" + key + "'");
      }
    } catch (const std::runtime_error& e) {
      throw std::runtime_error(at(e.what()));
    } catch (const std::exception& e) {
      throw std::runtime_error(at(std::string("bad value '") + val + "': " + e.what()));
    }
  }
  if (const char* env = std::getenv("CLRA_SEED")) plan.master_seed = std::stoull(env);
  validate_plan(plan);
  return plan;
}

}  // namespace clra
