#pragma once

#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>

#include <clra/solver.hpp>

namespace clra {

enum class RunStatus { Converged, Diverged, MaxIterations, Error };

inline std::string to_string(RunStatus status) {
  switch (status) {
    case RunStatus::Converged: return "Converged";
    case RunStatus::Diverged: return "Diverged";
    case RunStatus::MaxIterations: return "MaxIterations";
    default: return "Error";
  }
}

inline RunStatus run_status_from_string(const std::string& name) {
  for (RunStatus s : {RunStatus::Converged, RunStatus::Diverged, RunStatus::MaxIterations,
                      RunStatus::Error})
    if (to_string(s) == name) return s;
  throw std::invalid_argument("unknown run status: " + name);
}

inline RunStatus run_status(SolveStatus status) {
  switch (status) {
    case SolveStatus::Converged: return RunStatus::Converged;
    case SolveStatus::Diverged: return RunStatus::Diverged;
    default: return RunStatus::MaxIterations;
  }
}

// One Monte-Carlo work item: a (scene, noise, start, method) solve.
struct RunRecord {
  std::string method;
  Eigen::Index m{}, n{};
  std::string case_label;
  int config_index{};
  int init_index{};
  double sigma{};
  std::uint64_t seed{};
  RunStatus status{RunStatus::Error};
  int iterations{};
  double er{std::numeric_limits<double>::quiet_NaN()};
  double runtime_ms{};
};

}  // namespace clra
