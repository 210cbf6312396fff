#include <cmath>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include <clra/experiments.hpp>
#include <clra/lowrank.hpp>
#include <clra/metrics.hpp>
#include <clra/scene.hpp>
#include <clra/solver.hpp>

namespace {

using namespace clra;

// Machine-readable output goes to stdout unless --out was given.
void emit(const std::string& text, const std::string& out_path) {
  if (out_path.empty()) {
    std::cout << text;
    return;
  }
  std::ofstream out(out_path);
  if (!out) throw std::runtime_error("cannot open for writing: " + out_path);
  out << text;
  if (!out) throw std::runtime_error("write failed: " + out_path);
}

std::vector<double> parse_csv_doubles(const std::string& text, std::size_t want,
                                      const std::string& what) {
  const std::vector<std::string> parts = detail::split_trimmed(text, ',');
  if (parts.size() != want)
    throw std::runtime_error(what + ": expected " + std::to_string(want) +
                             " comma-separated values, got '" + text + "'");
  std::vector<double> out;
  out.reserve(want);
  for (const std::string& p : parts) out.push_back(detail::parse_double(p));
  return out;
}

struct SceneArgs {
  Eigen::Index m{10}, n{10};
  std::uint64_t seed{1};
  std::string box{"10,10,3"};
  std::string time_range{"-1,1"};
  double c{340.0};
  std::string kind{"TOA"};

  void attach(CLI::App* sub, bool require_mn) {
    CLI::Option* om = sub->add_option("--m", m, "microphone count");
    CLI::Option* on = sub->add_option("--n", n, "source count");
    if (require_mn) {
      om->required();
      on->required();
    }
    sub->add_option("--seed", seed, "scene seed");
    sub->add_option("--box", box, "room extents as x,y,z meters");
    sub->add_option("--time-range", time_range, "offset range as lo,hi seconds");
    sub->add_option("--c", c, "speed of sound, m/s");
    sub->add_option("--kind", kind, "measurement kind: TOA or PseudoTOA");
  }

  Scene make_scene() const {
    const std::vector<double> b = parse_csv_doubles(box, 3, "--box");
    const std::vector<double> t = parse_csv_doubles(time_range, 2, "--time-range");
    return generate_scene(m, n, Eigen::Vector3d(b[0], b[1], b[2]), t[0], t[1], c, seed);
  }

  // measurement plus matching ground-truth offsets, per --kind
  std::pair<MeasurementMatrix, TimingOffsets> make_measurement(const Scene& sc) const {
    if (measurement_kind_from(kind) == MeasurementKind::TOA)
      return {toa_from_scene(sc), {sc.delta, sc.eta}};
    return {pseudo_toa_from_tdoa(tdoa_from_scene(sc), sc.c).measurement,
            pseudo_truth_offsets(sc)};
  }
};

nlohmann::json offsets_json(const TimingOffsets& off) {
  return {{"delta", std::vector<double>(off.delta.begin(), off.delta.end())},
          {"eta", std::vector<double>(off.eta.begin(), off.eta.end())}};
}

// ---- generate ----

struct GenerateArgs {
  SceneArgs scene;
  double sigma{0.0};
  std::string scene_out, measurement_out, truth_out;
};

int run_generate(const GenerateArgs& a) {
  if (a.scene_out.empty() && a.measurement_out.empty() && a.truth_out.empty())
    throw std::runtime_error(
        "generate: give at least one of --scene-out, --measurement-out, --truth-out");
  const Scene sc = a.scene.make_scene();
  auto [meas, truth] = a.scene.make_measurement(sc);
  if (a.sigma > 0.0) meas = add_noise(meas, a.sigma, derive_seed(a.scene.seed, {2}));

  if (!a.scene_out.empty()) save_scene(a.scene_out, sc);
  if (!a.measurement_out.empty()) save_measurement(a.measurement_out, meas);
  if (!a.truth_out.empty()) save_offsets(a.truth_out, truth);
  std::cerr << "generated " << a.scene.m << "x" << a.scene.n << " scene (seed "
            << a.scene.seed << ", kind " << to_string(meas.kind) << ", sigma " << a.sigma
            << ")\n";
  return 0;
}

// ---- rank-check ----

struct RankCheckArgs {
  SceneArgs scene;
  std::string measurement_in, offsets_in;
  double rel_tol{1e-8};
  int top_k{8};
  std::string out;
};

int run_rank_check(const RankCheckArgs& a) {
  MeasurementMatrix meas;
  TimingOffsets off;
  if (!a.measurement_in.empty() || !a.offsets_in.empty()) {
    if (a.measurement_in.empty() || a.offsets_in.empty())
      throw std::runtime_error("rank-check: --measurement and --offsets go together");
    meas = load_measurement(a.measurement_in);
    off = load_offsets(a.offsets_in);
  } else {
    const Scene sc = a.scene.make_scene();
    std::tie(meas, off) = a.scene.make_measurement(sc);
  }

  const std::vector<RankReport> reports =
      verify_properties(build_blocks(meas, off), a.rel_tol);
  std::ostringstream os;
  bool ok = true;
  for (const RankReport& rep : reports) {
    os << to_json_line(rep, static_cast<std::size_t>(a.top_k)) << '\n';
    if (rep.applicable && !rep.holds) ok = false;
  }
  emit(os.str(), a.out);
  if (!ok) std::cerr << "rank-check: at least one applicable rank bound failed\n";
  return ok ? 0 : 1;
}

// ---- solve ----

struct SolveArgs {
  std::string measurement_in, truth_in, init_in;
  std::string method{"clra"};
  std::uint64_t seed{1};
  std::string time_range{"-1,1"};
  SolverConfig config{};
  std::string weights;  // optional "lambda,gamma,alpha,beta"
  std::string out;
};

int run_solve(const SolveArgs& a) {
  const MeasurementMatrix meas = load_measurement(a.measurement_in);
  const Eigen::Index m = meas.values.rows(), n = meas.values.cols();
  const Method method = method_from_name(a.method);

  TimingOffsets start;
  if (!a.init_in.empty()) {
    start = load_offsets(a.init_in);
  } else {
    const std::vector<double> t = parse_csv_doubles(a.time_range, 2, "--time-range");
    start = init_offsets(m, n, t[0], t[1], a.seed);
  }

  std::optional<PenaltyWeights> weights;
  if (!a.weights.empty()) {
    const std::vector<double> w = parse_csv_doubles(a.weights, 4, "--weights");
    weights = PenaltyWeights{w[0], w[1], w[2], w[3]};
  }

  const SolveOutcome outcome = solve(meas, method, start, a.config, std::nullopt, weights);

  nlohmann::json j = {{"method", method_name(method)},
                      {"m", m},
                      {"n", n},
                      {"case", to_string(select_case(m, n))},
                      {"status", to_string(outcome.status)},
                      {"iterations", outcome.iterations},
                      {"final_objective", outcome.final_objective},
                      {"runtime_ms", outcome.runtime_ms},
                      {"offsets", offsets_json(outcome.offsets)}};
  if (!a.truth_in.empty())
    j["er"] = estimation_error(outcome.offsets, load_offsets(a.truth_in));
  emit(j.dump(2) + "\n", a.out);
  return 0;
}

// ---- jacobian-check ----

struct JacobianCheckArgs {
  SceneArgs scene;
  std::string method{"clra"};
  int trials{5};
  double tol{1e-6};
  double fd_step{1e-6};
  bool all_blocks{false};
  std::string out;
};

int run_jacobian_check(const JacobianCheckArgs& a) {
  if (a.trials < 1) throw std::runtime_error("jacobian-check: --trials must be >= 1");
  const Method method = method_from_name(a.method);
  const std::vector<double> t = parse_csv_doubles(a.scene.time_range, 2, "--time-range");
  const PenaltyWeights weights = default_weights(method, select_case(a.scene.m, a.scene.n));
  const BlockLayout layout = make_layout(a.scene.m, a.scene.n, weights, a.all_blocks);

  std::ostringstream os;
  bool ok = true;
  for (int trial = 0; trial < a.trials; ++trial) {
    SceneArgs sa = a.scene;
    sa.seed = derive_seed(a.scene.seed, {1, static_cast<std::uint64_t>(trial)});
    const Scene sc = sa.make_scene();
    const MeasurementMatrix meas = toa_from_scene(sc);
    const TimingOffsets off =
        init_offsets(a.scene.m, a.scene.n, t[0], t[1],
                     derive_seed(a.scene.seed, {2, static_cast<std::uint64_t>(trial)}));
    const Eigen::VectorXd p = pack_parameters(off, init_coefficients(meas, off, layout), layout);
    const Eigen::MatrixXd analytic = jacobian_analytic(p, meas, weights, a.all_blocks);
    const Eigen::MatrixXd reference =
        finite_difference_jacobian(p, meas, weights, a.fd_step, a.all_blocks);
    const double err = max_relative_jacobian_error(reference, analytic);
    const bool pass = err < a.tol;
    ok = ok && pass;
    os << nlohmann::json{{"trial", trial}, {"max_rel_error", err}, {"ok", pass}}.dump()
       << '\n';
  }
  emit(os.str(), a.out);
  if (!ok) std::cerr << "jacobian-check: analytic and finite-difference derivatives differ\n";
  return ok ? 0 : 1;
}

// ---- monte-carlo ----

struct MonteCarloArgs {
  std::string plan_in;
  std::string out, metrics_out;
  std::string format{"json"};
  int jobs{0};
  std::uint64_t seed{0};
  bool seed_given{false};
};

std::string metrics_text(const std::vector<MetricSummary>& summaries,
                         const std::string& format) {
  if (format == "json") {
    nlohmann::json arr = nlohmann::json::array();
    for (const MetricSummary& s : summaries) arr.push_back(to_json(s));
    return arr.dump(2) + "\n";
  }
  if (format == "csv") {
    std::ostringstream os;
    os << metric_csv_header() << '\n';
    for (const MetricSummary& s : summaries) os << metric_csv_row(s) << '\n';
    return os.str();
  }
  throw std::runtime_error("unknown --format '" + format + "' (json or csv)");
}

int run_monte_carlo(const MonteCarloArgs& a) {
  ExperimentPlan plan = load_plan(a.plan_in);
  if (a.seed_given) plan.master_seed = a.seed;
  const std::vector<RunRecord> records = run_plan(plan, a.jobs);

  std::ostringstream os;
  os << kRecordsHeader << '\n';
  for (const RunRecord& r : records) os << record_csv_row(r) << '\n';
  emit(os.str(), a.out);
  if (!a.metrics_out.empty()) emit(metrics_text(summarize(records), a.format), a.metrics_out);
  std::cerr << "monte-carlo: " << records.size() << " runs\n";
  return 0;
}

// ---- sweep ----

struct SweepArgs {
  std::string plan_in;
  std::string method{"clra1"};
  std::string exponents;  // "l,g,a,b;l,g,a,b;..."
  std::string diagonal;   // "lo:hi" -> lambda = gamma = k
  int jobs{0};
  std::uint64_t seed{0};
  bool seed_given{false};
  std::string out;
};

std::vector<std::array<double, 4>> sweep_grid(const SweepArgs& a) {
  if (a.exponents.empty() == a.diagonal.empty())
    throw std::runtime_error("sweep: give exactly one of --exponents or --diagonal");
  std::vector<std::array<double, 4>> grid;
  if (!a.exponents.empty()) {
    for (const std::string& tuple : detail::split_trimmed(a.exponents, ';')) {
      const std::vector<double> e = parse_csv_doubles(tuple, 4, "--exponents");
      grid.push_back({e[0], e[1], e[2], e[3]});
    }
  } else {
    const std::vector<std::string> parts = detail::split_trimmed(a.diagonal, ':');
    if (parts.size() != 2) throw std::runtime_error("sweep: --diagonal looks like lo:hi");
    const int lo = std::stoi(parts[0]), hi = std::stoi(parts[1]);
    if (hi < lo) throw std::runtime_error("sweep: --diagonal range is empty");
    const double off = std::nan("");
    for (int k = lo; k <= hi; ++k)
      grid.push_back({static_cast<double>(k), static_cast<double>(k), off, off});
  }
  return grid;
}

int run_sweep(const SweepArgs& a) {
  ExperimentPlan plan = load_plan(a.plan_in);
  if (a.seed_given) plan.master_seed = a.seed;
  const Method method = method_from_name(a.method);
  const std::vector<SweepPoint> points = sweep_penalties(plan, method, sweep_grid(a), a.jobs);

  std::ostringstream os;
  os << "e_lambda,e_gamma,e_alpha,e_beta," << metric_csv_header() << '\n';
  for (const SweepPoint& pt : points) {
    const std::string prefix = detail::fmt(pt.exponents[0]) + ',' +
                               detail::fmt(pt.exponents[1]) + ',' +
                               detail::fmt(pt.exponents[2]) + ',' +
                               detail::fmt(pt.exponents[3]) + ',';
    for (const MetricSummary& s : summarize(pt.records)) os << prefix << metric_csv_row(s) << '\n';
  }
  emit(os.str(), a.out);
  std::cerr << "sweep: " << points.size() << " penalty points\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"timing self-calibration: estimate microphone start and source emission "
               "times from TOA/TDOA measurements via penalized low-rank approximation"};
  app.set_help_flag("--help", "print usage");
  app.require_subcommand(1);

  GenerateArgs gen;
  CLI::App* gen_cmd = app.add_subcommand("generate", "write a random scene and its measurement");
  gen.scene.attach(gen_cmd, true);
  gen_cmd->add_option("--sigma", gen.sigma, "measurement noise standard deviation, seconds");
  gen_cmd->add_option("--scene-out", gen.scene_out, "scene file to write");
  gen_cmd->add_option("--measurement-out", gen.measurement_out, "measurement file to write");
  gen_cmd->add_option("--truth-out", gen.truth_out, "ground-truth offsets file to write");

  RankCheckArgs rank;
  CLI::App* rank_cmd =
      app.add_subcommand("rank-check", "verify the low-rank bounds at given offsets");
  rank.scene.attach(rank_cmd, false);
  rank_cmd->add_option("--measurement", rank.measurement_in, "measurement file to check");
  rank_cmd->add_option("--offsets", rank.offsets_in, "offsets file to check against");
  rank_cmd->add_option("--rel-tol", rank.rel_tol, "relative singular-value cutoff");
  rank_cmd->add_option("--top-k", rank.top_k, "singular values to report per matrix");
  rank_cmd->add_option("--out", rank.out, "write JSON lines here instead of stdout");

  SolveArgs sol;
  CLI::App* sol_cmd = app.add_subcommand("solve", "estimate timing offsets from a measurement");
  sol_cmd->add_option("--measurement", sol.measurement_in, "measurement file")->required();
  sol_cmd->add_option("--method", sol.method, "stls, clra1, clra2, clra3, or clra");
  sol_cmd->add_option("--truth", sol.truth_in, "truth offsets file; adds er to the output");
  sol_cmd->add_option("--init", sol.init_in, "starting offsets file (otherwise random)");
  sol_cmd->add_option("--seed", sol.seed, "seed for the random start");
  sol_cmd->add_option("--time-range", sol.time_range, "random start range as lo,hi seconds");
  sol_cmd->add_option("--m2", sol.config.m2, "iteration cap");
  sol_cmd->add_option("--w-star", sol.config.w_star, "divergence threshold on the objective");
  sol_cmd->add_option("--d-p", sol.config.d_p, "step-norm stopping tolerance");
  sol_cmd->add_option("--weights", sol.weights, "penalty override as lambda,gamma,alpha,beta");
  sol_cmd->add_option("--out", sol.out, "write the outcome JSON here instead of stdout");

  JacobianCheckArgs jac;
  CLI::App* jac_cmd = app.add_subcommand(
      "jacobian-check", "compare analytic derivatives with finite differences");
  jac.scene.attach(jac_cmd, true);
  jac_cmd->add_option("--method", jac.method, "stls, clra1, clra2, clra3, or clra");
  jac_cmd->add_option("--trials", jac.trials, "random points to test");
  jac_cmd->add_option("--tol", jac.tol, "maximum relative error allowed");
  jac_cmd->add_option("--fd-step", jac.fd_step, "finite-difference step scale");
  jac_cmd->add_flag("--all-blocks", jac.all_blocks, "force every penalty block active");
  jac_cmd->add_option("--out", jac.out, "write JSON lines here instead of stdout");

  MonteCarloArgs mc;
  CLI::App* mc_cmd = app.add_subcommand("monte-carlo", "run a study plan and write records");
  mc_cmd->add_option("--plan", mc.plan_in, "plan file")->required();
  mc_cmd->add_option("--out", mc.out, "records CSV path (default: stdout)");
  mc_cmd->add_option("--metrics-out", mc.metrics_out, "also write aggregated metrics here");
  mc_cmd->add_option("--format", mc.format, "metrics format: json or csv");
  mc_cmd->add_option("--jobs", mc.jobs, "worker threads (default: logical cores)");
  mc_cmd->add_option("--seed", mc.seed, "override the plan's master seed");

  SweepArgs sw;
  CLI::App* sw_cmd = app.add_subcommand("sweep", "scan penalty weights over powers of ten");
  sw_cmd->add_option("--plan", sw.plan_in, "plan file")->required();
  sw_cmd->add_option("--method", sw.method, "method whose weights are swept");
  sw_cmd->add_option("--exponents", sw.exponents,
                     "semicolon-separated lambda,gamma,alpha,beta exponent tuples (nan = off)");
  sw_cmd->add_option("--diagonal", sw.diagonal, "lo:hi integer range with lambda = gamma");
  sw_cmd->add_option("--jobs", sw.jobs, "worker threads (default: logical cores)");
  sw_cmd->add_option("--seed", sw.seed, "override the plan's master seed");
  sw_cmd->add_option("--out", sw.out, "summary table CSV path (default: stdout)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  mc.seed_given = mc_cmd->count("--seed") > 0;
  sw.seed_given = sw_cmd->count("--seed") > 0;

  try {
    if (gen_cmd->parsed()) return run_generate(gen);
    if (rank_cmd->parsed()) return run_rank_check(rank);
    if (sol_cmd->parsed()) return run_solve(sol);
    if (jac_cmd->parsed()) return run_jacobian_check(jac);
    if (mc_cmd->parsed()) return run_monte_carlo(mc);
    if (sw_cmd->parsed()) return run_sweep(sw);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 2;  // unreachable with require_subcommand(1)
}
