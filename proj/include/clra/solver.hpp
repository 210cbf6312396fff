#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <clra/lowrank.hpp>
#include <clra/rng.hpp>
#include <clra/scene.hpp>

namespace clra {

struct ConfigurationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct NumericalFailure : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Size regimes deciding which rank-variant penalties apply.
enum class CaseLabel { C1, C2, C3 };

inline CaseLabel select_case(Eigen::Index m, Eigen::Index n) {
  if (m < 5 || n < 5) throw std::invalid_argument("select_case: need m >= 5 and n >= 5");
  if (m - n > 3) return CaseLabel::C1;
  if (n - m > 3) return CaseLabel::C2;
  return CaseLabel::C3;
}

inline std::string to_string(CaseLabel label) {
  switch (label) {
    case CaseLabel::C1: return "C1";
    case CaseLabel::C2: return "C2";
    default: return "C3";
  }
}

inline CaseLabel case_from_string(const std::string& name) {
  if (name == "C1" || name == "c1") return CaseLabel::C1;
  if (name == "C2" || name == "c2") return CaseLabel::C2;
  if (name == "C3" || name == "c3") return CaseLabel::C3;
  throw ConfigurationError("unknown case label: " + name);
}

enum class Method { Stls, Clra1, Clra2, Clra3, Clra };

constexpr std::array<Method, 5> kAllMethods{Method::Stls, Method::Clra1, Method::Clra2,
                                            Method::Clra3, Method::Clra};

inline std::string method_name(Method method) {
  switch (method) {
    case Method::Stls: return "stls";
    case Method::Clra1: return "clra1";
    case Method::Clra2: return "clra2";
    case Method::Clra3: return "clra3";
    default: return "clra";
  }
}

inline Method method_from_name(const std::string& name) {
  for (Method m : kAllMethods)
    if (method_name(m) == name) return m;
  throw ConfigurationError("unknown method: " + name);
}

// Penalty weights on the four constraint blocks; zero disables a block.
struct PenaltyWeights {
  double lambda{0};  // scales vec((A+F)X - (B+G))
  double gamma{0};   // scales vec(T31*Y - T32)
  double alpha{0};   // scales vec(T11*Z - T12), wide-matrix regime only
  double beta{0};    // scales vec(T21*W - T22), tall-matrix regime only
};

inline PenaltyWeights default_weights(Method method, CaseLabel label) {
  switch (method) {
    case Method::Stls:
      return {1e10, 0, 0, 0};
    case Method::Clra1:
      if (label == CaseLabel::C2) return {1e12, 1e9, 0, 0};
      return {1e10, 1e10, 0, 0};
    case Method::Clra2:
      if (label != CaseLabel::C2) throw ConfigurationError("clra2 needs n - m > 3");
      return {1e10, 0, 0, 1e11};
    case Method::Clra3:
      if (label != CaseLabel::C1) throw ConfigurationError("clra3 needs m - n > 3");
      return {1e10, 0, 1e11, 0};
    case Method::Clra:
      switch (label) {
        case CaseLabel::C1: return {1e10, 1e10, 1e11, 0};
        case CaseLabel::C2: return {1e12, 1e9, 0, 1e13};
        default: return {1e10, 1e10, 0, 0};
      }
  }
  throw ConfigurationError("unknown method");
}

inline void validate_weights(const PenaltyWeights& w, CaseLabel label) {
  if (w.lambda < 0 || w.gamma < 0 || w.alpha < 0 || w.beta < 0)
    throw ConfigurationError("penalty weights must be non-negative");
  if (w.alpha > 0 && label != CaseLabel::C1)
    throw ConfigurationError("alpha applies only when m - n > 3");
  if (w.beta > 0 && label != CaseLabel::C2)
    throw ConfigurationError("beta applies only when n - m > 3");
}

struct SolverConfig {
  double w_star{1e30};   // divergence bound on the squared-residual objective
  double d_p{1e-9};      // step-norm convergence threshold
  int m2{100};           // iteration cap
  double fd_step{1e-6};  // relative step for finite-difference checks
  bool record_trace{false};
};

inline void validate_config(const SolverConfig& cfg) {
  if (!(cfg.w_star > 0) || !(cfg.d_p > 0) || cfg.m2 < 1 || !(cfg.fd_step > 0))
    throw ConfigurationError("invalid solver configuration");
}

enum class SolveStatus { Converged, Diverged, MaxIterations };

inline std::string to_string(SolveStatus status) {
  switch (status) {
    case SolveStatus::Converged: return "Converged";
    case SolveStatus::Diverged: return "Diverged";
    default: return "MaxIterations";
  }
}

struct SolveOutcome {
  TimingOffsets offsets;
  SolveStatus status{SolveStatus::MaxIterations};
  int iterations{0};
  double final_objective{0};
  double runtime_ms{0};
  std::vector<Eigen::VectorXd> trace;  // iterates incl. start, when requested
};

// Index bookkeeping for the stacked parameter vector
//   p = [delta(1..M); eta(2..N); vec X; vec Y; vec Z; vec W]
// and the stacked residual vector
//   q = [vec U; lam*vec((A+F)X-(B+G)); gam*vec(T31*Y-T32);
//        alp*vec(T11*Z-T12); bet*vec(T21*W-T22)].
// A coefficient block is present when its weight is nonzero, or unconditionally
// in all_blocks mode (used to validate the full-size dimension formulas).
struct BlockLayout {
  Eigen::Index m{}, n{};
  Eigen::Index mm{}, nn{}, m_n{};
  bool x_active{}, y_active{}, z_active{}, w_active{};
  Eigen::Index x_rows{}, x_cols{}, y_rows{}, y_cols{};
  Eigen::Index z_rows{}, z_cols{}, w_rows{}, w_cols{};
  Eigen::Index p_x{}, p_y{}, p_z{}, p_w{}, p_size{};
  Eigen::Index q_b{}, q_c{}, q_d{}, q_e{}, q_size{};
};

inline BlockLayout make_layout(Eigen::Index m, Eigen::Index n, const PenaltyWeights& w,
                               bool all_blocks = false) {
  if (m < 5 || n < 5) throw std::invalid_argument("make_layout: need m >= 5 and n >= 5");
  BlockLayout lay;
  lay.m = m;
  lay.n = n;
  lay.mm = m - 1;
  lay.nn = n - 1;
  lay.m_n = std::min(lay.nn + 3, lay.mm + 3);
  lay.x_active = all_blocks || w.lambda > 0;
  lay.y_active = all_blocks || w.gamma > 0;
  lay.z_active = all_blocks || w.alpha > 0;
  lay.w_active = all_blocks || w.beta > 0;
  lay.x_rows = 3;
  lay.x_cols = lay.nn - 3;
  lay.y_rows = lay.m_n;
  lay.y_cols = 2 * lay.nn - lay.m_n;
  lay.z_rows = lay.nn + 3;
  lay.z_cols = lay.nn - 3;
  lay.w_rows = lay.mm + 3;
  lay.w_cols = lay.mm - 3;

  Eigen::Index pos = m + (n - 1);
  lay.p_x = pos;
  if (lay.x_active) pos += lay.x_rows * lay.x_cols;
  lay.p_y = pos;
  if (lay.y_active) pos += lay.y_rows * lay.y_cols;
  lay.p_z = pos;
  if (lay.z_active) pos += lay.z_rows * lay.z_cols;
  lay.p_w = pos;
  if (lay.w_active) pos += lay.w_rows * lay.w_cols;
  lay.p_size = pos;

  pos = lay.mm * lay.nn;
  lay.q_b = pos;
  if (lay.x_active) pos += lay.mm * lay.x_cols;
  lay.q_c = pos;
  if (lay.y_active) pos += 2 * lay.mm * lay.y_cols;
  lay.q_d = pos;
  if (lay.z_active) pos += lay.mm * lay.z_cols;
  lay.q_e = pos;
  if (lay.w_active) pos += lay.nn * lay.w_cols;
  lay.q_size = pos;
  return lay;
}

// Residual and Jacobian assembly for one measurement, templated so the
// internally accumulated quantities can use extended precision.
template <typename S>
class ProblemT {
 public:
  using Mat = Eigen::MatrixX<S>;
  using Vec = Eigen::VectorX<S>;

  ProblemT(const Eigen::MatrixXd& toa, const PenaltyWeights& w, const BlockLayout& layout)
      : lay_(layout),
        t_(toa.template cast<S>()),
        d_(build_d(t_)),
        lam_(static_cast<S>(w.lambda)),
        gam_(static_cast<S>(w.gamma)),
        alp_(static_cast<S>(w.alpha)),
        bet_(static_cast<S>(w.beta)) {
    if (toa.rows() != lay_.m || toa.cols() != lay_.n)
      throw std::invalid_argument("problem: measurement does not match layout");
  }

  const BlockLayout& layout() const { return lay_; }

  struct Unpacked {
    Vec delta, eta;
    Mat x, y, z, w;
  };

  Unpacked unpack(const Vec& p) const {
    if (p.size() != lay_.p_size)
      throw std::invalid_argument("parameter vector length does not match layout");
    Unpacked up;
    up.delta = p.head(lay_.m);
    up.eta.setZero(lay_.n);
    up.eta.tail(lay_.n - 1) = p.segment(lay_.m, lay_.n - 1);
    up.x = take(p, lay_.p_x, lay_.x_rows, lay_.x_cols, lay_.x_active);
    up.y = take(p, lay_.p_y, lay_.y_rows, lay_.y_cols, lay_.y_active);
    up.z = take(p, lay_.p_z, lay_.z_rows, lay_.z_cols, lay_.z_active);
    up.w = take(p, lay_.p_w, lay_.w_rows, lay_.w_cols, lay_.w_active);
    return up;
  }

  Vec residual(const Vec& p) const {
    const Unpacked up = unpack(p);
    const LowRankBlocksT<S> blk = assemble_variants(Mat(d_), build_u(t_, up.delta, up.eta));
    Vec q(lay_.q_size);
    put(q, 0, blk.u);
    if (lay_.x_active) put(q, lay_.q_b, Mat(lam_ * ((blk.a + blk.f) * up.x - blk.b - blk.g)));
    if (lay_.y_active) put(q, lay_.q_c, Mat(gam_ * (blk.t31 * up.y - blk.t32)));
    if (lay_.z_active) put(q, lay_.q_d, Mat(alp_ * (blk.t11 * up.z - blk.t12)));
    if (lay_.w_active) put(q, lay_.q_e, Mat(bet_ * (blk.t21 * up.w - blk.t22)));
    return q;
  }

  Mat jacobian(const Vec& p) const {
    const Unpacked up = unpack(p);
    const LowRankBlocksT<S> blk = assemble_variants(Mat(d_), build_u(t_, up.delta, up.eta));
    Mat jac = Mat::Zero(lay_.q_size, lay_.p_size);

    // Offset columns: the derivative of every block flows through dU.
    Mat du(lay_.mm, lay_.nn);
    for (Eigen::Index col = 0; col < lay_.m + lay_.n - 1; ++col) {
      du.setZero();
      if (col == 0) {
        for (Eigen::Index j = 0; j < lay_.nn; ++j)
          for (Eigen::Index i = 0; i < lay_.mm; ++i)
            du(i, j) = S(-2) * (t_(0, j + 1) - t_(0, 0)) + S(2) * up.eta(j + 1);
      } else if (col < lay_.m) {
        const Eigen::Index k = col;  // delta_k drives row k-1 of U
        for (Eigen::Index j = 0; j < lay_.nn; ++j)
          du(k - 1, j) = S(2) * (t_(k, j + 1) - t_(k, 0)) - S(2) * up.eta(j + 1);
      } else {
        const Eigen::Index k = col - lay_.m + 1;  // eta_k drives column k-1 of U
        for (Eigen::Index i = 0; i < lay_.mm; ++i)
          du(i, k - 1) = S(-2) * (t_(i + 1, k) - t_(0, k)) + S(2) * (up.delta(0) - up.delta(i + 1));
      }
      fill_offset_column(jac, col, du, up);
    }

    // Coefficient columns: block-diagonal copies of the fixed left factor.
    if (lay_.x_active)
      repeat_diag(jac, lay_.q_b, lay_.p_x, Mat(lam_ * (blk.a + blk.f)), lay_.x_cols);
    if (lay_.y_active) repeat_diag(jac, lay_.q_c, lay_.p_y, Mat(gam_ * blk.t31), lay_.y_cols);
    if (lay_.z_active) repeat_diag(jac, lay_.q_d, lay_.p_z, Mat(alp_ * blk.t11), lay_.z_cols);
    if (lay_.w_active) repeat_diag(jac, lay_.q_e, lay_.p_w, Mat(bet_ * blk.t21), lay_.w_cols);
    return jac;
  }

 private:
  static Mat take(const Vec& p, Eigen::Index at, Eigen::Index rows, Eigen::Index cols,
                  bool active) {
    if (!active) return Mat();
    return Eigen::Map<const Mat>(p.data() + at, rows, cols);
  }

  static void put(Vec& q, Eigen::Index at, const Mat& block) {
    q.segment(at, block.size()) = Eigen::Map<const Vec>(block.data(), block.size());
  }

  void fill_offset_column(Mat& jac, Eigen::Index col, const Mat& du, const Unpacked& up) const {
    auto place = [&](Eigen::Index row0, const Mat& block) {
      jac.col(col).segment(row0, block.size()) = Eigen::Map<const Vec>(block.data(), block.size());
    };
    place(0, du);
    if (lay_.x_active)
      place(lay_.q_b, Mat(lam_ * (du.leftCols(3) * up.x - du.rightCols(lay_.nn - 3))));
    if (lay_.y_active) {
      Mat dt3 = Mat::Zero(2 * lay_.mm, 2 * lay_.nn);
      dt3.topRightCorner(lay_.mm, lay_.nn) = du;
      dt3.bottomLeftCorner(lay_.mm, lay_.nn) = du;
      place(lay_.q_c,
            Mat(gam_ * (dt3.leftCols(lay_.m_n) * up.y - dt3.rightCols(2 * lay_.nn - lay_.m_n))));
    }
    if (lay_.z_active) {
      Mat dt1 = Mat::Zero(lay_.mm, 2 * lay_.nn);
      dt1.rightCols(lay_.nn) = du;
      place(lay_.q_d,
            Mat(alp_ * (dt1.leftCols(lay_.nn + 3) * up.z - dt1.rightCols(lay_.nn - 3))));
    }
    if (lay_.w_active) {
      Mat dt2 = Mat::Zero(lay_.nn, 2 * lay_.mm);
      dt2.rightCols(lay_.mm) = du.transpose();
      place(lay_.q_e,
            Mat(bet_ * (dt2.leftCols(lay_.mm + 3) * up.w - dt2.rightCols(lay_.mm - 3))));
    }
  }

  static void repeat_diag(Mat& jac, Eigen::Index row0, Eigen::Index col0, const Mat& base,
                          Eigen::Index copies) {
    for (Eigen::Index k = 0; k < copies; ++k)
      jac.block(row0 + k * base.rows(), col0 + k * base.cols(), base.rows(), base.cols()) = base;
  }

  BlockLayout lay_;
  Mat t_, d_;
  S lam_, gam_, alp_, bet_;
};

using Problem = ProblemT<double>;

// Extended precision for residual/Jacobian assembly: the penalty blocks sit on
// heavy cancellation (differences of squared arrival times), and plain double
// assembly leaves a noise floor above the step-norm stopping threshold.
using Wide = long double;

inline Eigen::MatrixXd min_norm_lstsq(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  return Eigen::CompleteOrthogonalDecomposition<Eigen::MatrixXd>(a).solve(b);
}

// Minimum-norm least-squares start for each active coefficient block at the
// given offsets; inactive blocks stay empty.
template <typename S>
struct CoefficientInitT {
  Eigen::MatrixX<S> x, y, z, w;
};
using CoefficientInit = CoefficientInitT<double>;

template <typename S = double>
CoefficientInitT<S> init_coefficients(const MeasurementMatrixT<double>& meas,
                                      const TimingOffsetsT<double>& off, const BlockLayout& lay) {
  if (meas.values.rows() != lay.m || meas.values.cols() != lay.n)
    throw std::invalid_argument("init_coefficients: measurement does not match layout");
  if (off.delta.size() != lay.m || off.eta.size() != lay.n)
    throw std::invalid_argument("init_coefficients: offset sizes do not match layout");
  // Assembled and solved in extended precision so the start sits on the
  // constraint manifold to well below the weight-amplified noise floor.
  using MatW = Eigen::MatrixX<Wide>;
  const MatW t = meas.values.cast<Wide>();
  const LowRankBlocksT<Wide> blk = assemble_variants(
      build_d(t), build_u<Wide>(t, off.delta.cast<Wide>(), off.eta.cast<Wide>()));
  const auto lsq = [](const MatW& a, const MatW& b) {
    return Eigen::CompleteOrthogonalDecomposition<MatW>(a).solve(b).template cast<S>().eval();
  };
  CoefficientInitT<S> out;
  if (lay.x_active) out.x = lsq(blk.a + blk.f, blk.b + blk.g);
  if (lay.y_active) out.y = lsq(blk.t31, blk.t32);
  if (lay.z_active) out.z = lsq(blk.t11, blk.t12);
  if (lay.w_active) out.w = lsq(blk.t21, blk.t22);
  return out;
}

template <typename S>
Eigen::VectorX<S> pack_parameters(const TimingOffsetsT<double>& off,
                                  const CoefficientInitT<S>& coef, const BlockLayout& lay) {
  if (off.delta.size() != lay.m || off.eta.size() != lay.n)
    throw std::invalid_argument("pack_parameters: offset sizes do not match layout");
  if (off.eta(0) != 0.0) throw std::invalid_argument("pack_parameters: eta[0] must be 0");
  Eigen::VectorX<S> p(lay.p_size);
  p.head(lay.m) = off.delta.cast<S>();
  p.segment(lay.m, lay.n - 1) = off.eta.tail(lay.n - 1).template cast<S>();
  auto put = [&p](Eigen::Index at, const Eigen::MatrixX<S>& mat, Eigen::Index rows,
                  Eigen::Index cols) {
    if (mat.rows() != rows || mat.cols() != cols)
      throw std::invalid_argument("pack_parameters: coefficient block has wrong shape");
    Eigen::Map<Eigen::MatrixX<S>>(p.data() + at, rows, cols) = mat;
  };
  if (lay.x_active) put(lay.p_x, coef.x, lay.x_rows, lay.x_cols);
  if (lay.y_active) put(lay.p_y, coef.y, lay.y_rows, lay.y_cols);
  if (lay.z_active) put(lay.p_z, coef.z, lay.z_rows, lay.z_cols);
  if (lay.w_active) put(lay.p_w, coef.w, lay.w_rows, lay.w_cols);
  return p;
}

inline TimingOffsets unpack_offsets(const Eigen::VectorXd& p, const BlockLayout& lay) {
  TimingOffsets off;
  off.delta = p.head(lay.m);
  off.eta.setZero(lay.n);
  off.eta.tail(lay.n - 1) = p.segment(lay.m, lay.n - 1);
  return off;
}

// Random start offsets: delta uniform over [lo,hi], eta likewise with the
// gauge entry eta[0] pinned to zero.
inline TimingOffsets init_offsets(Eigen::Index m, Eigen::Index n, double lo, double hi,
                                  std::uint64_t seed) {
  if (m < 1 || n < 1) throw std::invalid_argument("init_offsets: need m >= 1 and n >= 1");
  if (!(lo < hi)) throw std::invalid_argument("init_offsets: empty range");
  SplitMix64 rng(seed);
  TimingOffsets off;
  off.delta.resize(m);
  for (Eigen::Index i = 0; i < m; ++i) off.delta(i) = rng.uniform(lo, hi);
  off.eta.setZero(n);
  for (Eigen::Index j = 1; j < n; ++j) off.eta(j) = rng.uniform(lo, hi);
  return off;
}

inline Eigen::VectorXd residual_vector(const Eigen::VectorXd& p, const MeasurementMatrix& meas,
                                       const PenaltyWeights& w, bool all_blocks = false) {
  const BlockLayout lay = make_layout(meas.values.rows(), meas.values.cols(), w, all_blocks);
  const ProblemT<Wide> prob(meas.values, w, lay);
  return prob.residual(p.cast<Wide>()).template cast<double>();
}

inline Eigen::MatrixXd jacobian_analytic(const Eigen::VectorXd& p, const MeasurementMatrix& meas,
                                         const PenaltyWeights& w, bool all_blocks = false) {
  const BlockLayout lay = make_layout(meas.values.rows(), meas.values.cols(), w, all_blocks);
  const ProblemT<Wide> prob(meas.values, w, lay);
  return prob.jacobian(p.cast<Wide>()).template cast<double>();
}

inline Eigen::MatrixXd finite_difference_jacobian(const Eigen::VectorXd& p,
                                                  const MeasurementMatrix& meas,
                                                  const PenaltyWeights& w, double step = 1e-6,
                                                  bool all_blocks = false) {
  if (!(step > 0)) throw std::invalid_argument("finite_difference_jacobian: step must be > 0");
  const BlockLayout lay = make_layout(meas.values.rows(), meas.values.cols(), w, all_blocks);
  const ProblemT<Wide> prob(meas.values, w, lay);
  Eigen::VectorX<Wide> base = p.cast<Wide>();
  Eigen::MatrixXd out(lay.q_size, lay.p_size);
  for (Eigen::Index k = 0; k < lay.p_size; ++k) {
    const Wide h = static_cast<Wide>(step) * (Wide(1) + std::abs(base(k)));
    Eigen::VectorX<Wide> hi = base, lo = base;
    hi(k) += h;
    lo(k) -= h;
    out.col(k) = ((prob.residual(hi) - prob.residual(lo)) / (2 * h)).template cast<double>();
  }
  return out;
}

// Largest entrywise relative deviation, with an absolute floor shielding
// near-zero reference entries.
inline double max_relative_jacobian_error(const Eigen::MatrixXd& ref, const Eigen::MatrixXd& other,
                                          double floor = 1e-9) {
  if (ref.rows() != other.rows() || ref.cols() != other.cols())
    throw std::invalid_argument("max_relative_jacobian_error: shape mismatch");
  return ((ref - other).array().abs() / ref.array().abs().max(floor)).maxCoeff();
}

// One update p - step, with step the minimum-norm least-squares solution of
// the linearized system at p.
inline Eigen::VectorXd gauss_newton_step(const Eigen::VectorXd& p, const Eigen::MatrixXd& jac,
                                         const Eigen::VectorXd& q) {
  if (jac.rows() != q.size() || jac.cols() != p.size())
    throw std::invalid_argument("gauss_newton_step: inconsistent dimensions");
  if (!jac.allFinite() || !q.allFinite())
    throw NumericalFailure("gauss_newton_step: non-finite input");
  const Eigen::CompleteOrthogonalDecomposition<Eigen::MatrixXd> cod(jac);
  return p - cod.solve(q);
}

inline SolveOutcome solve(const MeasurementMatrix& meas, Method method,
                          const TimingOffsets& init, const SolverConfig& config = {},
                          std::optional<CaseLabel> case_override = std::nullopt,
                          std::optional<PenaltyWeights> weights_override = std::nullopt) {
  validate_config(config);
  const Eigen::Index m = meas.values.rows(), n = meas.values.cols();
  const CaseLabel label = case_override ? *case_override : select_case(m, n);
  const PenaltyWeights w = weights_override ? *weights_override : default_weights(method, label);
  validate_weights(w, label);
  const BlockLayout lay = make_layout(m, n, w);

  const auto t0 = std::chrono::steady_clock::now();
  const Eigen::VectorXd p0 = pack_parameters(init, init_coefficients(meas, init, lay), lay);
  const ProblemT<Wide> prob(meas.values, w, lay);

  Eigen::VectorX<Wide> p = p0.cast<Wide>();
  SolveOutcome out;
  if (config.record_trace) out.trace.push_back(p0);

  for (int it = 0; it <= config.m2; ++it) {
    const Eigen::VectorX<Wide> q = prob.residual(p);
    const double obj = static_cast<double>(q.squaredNorm());
    if (!std::isfinite(obj) || obj > config.w_star) {
      out.status = SolveStatus::Diverged;
      out.iterations = it;
      out.final_objective = obj;
      break;
    }
    if (it == config.m2) {
      out.status = SolveStatus::MaxIterations;
      out.iterations = it;
      out.final_objective = obj;
      break;
    }
    const Eigen::MatrixXd jac = prob.jacobian(p).template cast<double>();
    if (!jac.allFinite()) {
      out.status = SolveStatus::Diverged;
      out.iterations = it;
      out.final_objective = obj;
      break;
    }
    const Eigen::CompleteOrthogonalDecomposition<Eigen::MatrixXd> cod(jac);
    const Eigen::VectorXd step = cod.solve(q.template cast<double>());
    if (!step.allFinite()) {
      out.status = SolveStatus::Diverged;
      out.iterations = it;
      out.final_objective = obj;
      break;
    }
    p -= step.cast<Wide>();
    if (config.record_trace) out.trace.push_back(p.template cast<double>());
    if (step.norm() < config.d_p) {
      out.status = SolveStatus::Converged;
      out.iterations = it + 1;
      out.final_objective = static_cast<double>(prob.residual(p).squaredNorm());
      break;
    }
  }

  out.offsets = unpack_offsets(p.template cast<double>(), lay);
  out.runtime_ms =
      std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  return out;
}

}  // namespace clra
