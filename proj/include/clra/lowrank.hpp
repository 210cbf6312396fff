#pragma once

#include <Eigen/Dense>

#include <stdexcept>
#include <string>
#include <vector>

#include "clra/scene.hpp"

#include <json.hpp>

namespace clra {

struct DegenerateSceneError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// D, U and every variant/split derived from them. D = [A B], U = [F G] with
// A, F the first 3 columns; T1 = [D U]; T2 = [D^T U^T]; T3 = [[D U],[U D]].
// T1 splits after column N-1+3, T2 after M-1+3, T3 after M_N.
template <typename S>
struct LowRankBlocksT {
  Eigen::Index m{}, n{};
  Eigen::Index m_n{};  // min(N-1+3, M-1+3)
  Eigen::MatrixX<S> d, u;
  Eigen::MatrixX<S> a, b, f, g;
  Eigen::MatrixX<S> t1, t11, t12;
  Eigen::MatrixX<S> t2, t21, t22;
  Eigen::MatrixX<S> t3, t31, t32;
};
using LowRankBlocks = LowRankBlocksT<double>;

// D(i-1,j-1) = t(i,j)^2 - t(i,1)^2 - t(1,j)^2 + t(1,1)^2   (i,j from 2)
template <typename S>
Eigen::MatrixX<S> build_d(const Eigen::MatrixX<S>& t) {
  const Eigen::Index m = t.rows(), n = t.cols();
  const Eigen::MatrixX<S> t2 = t.array().square();
  Eigen::MatrixX<S> d = t2.bottomRightCorner(m - 1, n - 1);
  d.colwise() -= t2.col(0).tail(m - 1);
  d.rowwise() -= t2.row(0).tail(n - 1);
  d.array() += t2(0, 0);
  return d;
}

// U(i-1,j-1) = 2 delta_i (t(i,j)-t(i,1)) - 2 delta_1 (t(1,j)-t(1,1))
//            - 2 eta_j (t(i,j)-t(1,j)) + 2 eta_j (delta_1 - delta_i)
template <typename S>
Eigen::MatrixX<S> build_u(const Eigen::MatrixX<S>& t, const Eigen::VectorX<S>& delta,
                          const Eigen::VectorX<S>& eta) {
  const Eigen::Index m = t.rows(), n = t.cols();
  Eigen::MatrixX<S> u(m - 1, n - 1);
  for (Eigen::Index j = 1; j < n; ++j)
    for (Eigen::Index i = 1; i < m; ++i)
      u(i - 1, j - 1) = S(2) * delta(i) * (t(i, j) - t(i, 0)) -
                        S(2) * delta(0) * (t(0, j) - t(0, 0)) -
                        S(2) * eta(j) * (t(i, j) - t(0, j)) +
                        S(2) * eta(j) * (delta(0) - delta(i));
  return u;
}

// Populate the variant matrices and their column splits from D and U.
template <typename S>
LowRankBlocksT<S> assemble_variants(Eigen::MatrixX<S> d, Eigen::MatrixX<S> u) {
  LowRankBlocksT<S> blk;
  const Eigen::Index mm = d.rows(), nn = d.cols();  // M-1, N-1
  blk.m = mm + 1;
  blk.n = nn + 1;
  blk.m_n = std::min(nn + 3, mm + 3);
  blk.d = std::move(d);
  blk.u = std::move(u);
  blk.a = blk.d.leftCols(3);
  blk.b = blk.d.rightCols(nn - 3);
  blk.f = blk.u.leftCols(3);
  blk.g = blk.u.rightCols(nn - 3);

  blk.t1.resize(mm, 2 * nn);
  blk.t1 << blk.d, blk.u;
  blk.t11 = blk.t1.leftCols(nn + 3);
  blk.t12 = blk.t1.rightCols(nn - 3);

  blk.t2.resize(nn, 2 * mm);
  blk.t2 << blk.d.transpose(), blk.u.transpose();
  blk.t21 = blk.t2.leftCols(mm + 3);
  blk.t22 = blk.t2.rightCols(mm - 3);

  blk.t3.resize(2 * mm, 2 * nn);
  blk.t3 << blk.d, blk.u, blk.u, blk.d;
  blk.t31 = blk.t3.leftCols(blk.m_n);
  blk.t32 = blk.t3.rightCols(2 * nn - blk.m_n);
  return blk;
}

template <typename S>
LowRankBlocksT<S> build_blocks(const MeasurementMatrixT<S>& meas,
                               const TimingOffsetsT<S>& off) {
  const Eigen::Index m = meas.values.rows(), n = meas.values.cols();
  if (m < 5 || n < 5)
    throw std::invalid_argument("build_blocks: need at least 5 microphones and 5 sources");
  if (off.delta.size() != m || off.eta.size() != n)
    throw std::invalid_argument("build_blocks: offset sizes do not match the measurement");
  return assemble_variants(build_d(meas.values), build_u(meas.values, off.delta, off.eta));
}

struct RankReport {
  std::string matrix_name;
  int numeric_rank{};
  int bound{};
  bool applicable{true};
  bool holds{};
  std::vector<double> singular_values;  // descending
};

template <typename S>
std::vector<double> singular_values_of(const Eigen::MatrixX<S>& mat) {
  Eigen::JacobiSVD<Eigen::MatrixX<S>> svd(mat);
  std::vector<double> sv(static_cast<std::size_t>(svd.singularValues().size()));
  for (std::size_t k = 0; k < sv.size(); ++k)
    sv[k] = static_cast<double>(svd.singularValues()(static_cast<Eigen::Index>(k)));
  return sv;
}

// Singular values above rel_tol * sigma_max count toward the rank.
template <typename S>
int numeric_rank(const Eigen::MatrixX<S>& mat, double rel_tol) {
  if (mat.size() == 0) throw std::invalid_argument("numeric_rank: empty matrix");
  if (!(rel_tol > 0.0 && rel_tol < 1.0))
    throw std::invalid_argument("numeric_rank: rel_tol must be in (0,1)");
  const auto sv = singular_values_of(mat);
  if (sv.empty() || sv[0] == 0.0) return 0;
  int r = 0;
  for (const double s : sv)
    if (s > rel_tol * sv[0]) ++r;
  return r;
}

template <typename S>
RankReport rank_report(const Eigen::MatrixX<S>& mat, double rel_tol, std::string name,
                       int bound, bool applicable = true) {
  RankReport rep;
  rep.matrix_name = std::move(name);
  rep.bound = bound;
  rep.applicable = applicable;
  rep.singular_values = singular_values_of(mat);
  const double smax = rep.singular_values.empty() ? 0.0 : rep.singular_values[0];
  rep.numeric_rank = 0;
  for (const double s : rep.singular_values)
    if (smax > 0.0 && s > rel_tol * smax) ++rep.numeric_rank;
  rep.holds = rep.numeric_rank <= rep.bound;
  return rep;
}

// Rank checks for D+U (bound 3), T1 (bound N-1+3, needs M-1 > N-1+3),
// T2 (bound M-1+3, needs N-1 > M-1+3), T3 (bound M_N, always applicable).
template <typename S>
std::vector<RankReport> verify_properties(const LowRankBlocksT<S>& blk, double rel_tol) {
  const Eigen::Index mm = blk.m - 1, nn = blk.n - 1;
  std::vector<RankReport> out;
  out.push_back(rank_report<S>(blk.d + blk.u, rel_tol, "D+U", 3, true));
  out.push_back(rank_report<S>(blk.t1, rel_tol, "T1", static_cast<int>(nn + 3), mm > nn + 3));
  out.push_back(rank_report<S>(blk.t2, rel_tol, "T2", static_cast<int>(mm + 3), nn > mm + 3));
  out.push_back(rank_report<S>(blk.t3, rel_tol, "T3", static_cast<int>(blk.m_n), true));
  return out;
}

// The splits assume the first 3 columns of D+U are independent; a scene that
// violates this is reported, not silently re-permuted.
template <typename S>
void check_split_degeneracy(const LowRankBlocksT<S>& blk, double rel_tol = 1e-8) {
  if (numeric_rank<S>(blk.a + blk.f, rel_tol) < 3)
    throw DegenerateSceneError("first 3 columns of D+U are numerically dependent");
}

inline std::string to_json_line(const RankReport& rep, std::size_t top_k = 8) {
  nlohmann::json j;
  j["name"] = rep.matrix_name;
  j["rank"] = rep.numeric_rank;
  j["bound"] = rep.bound;
  j["applicable"] = rep.applicable;
  j["holds"] = rep.holds;
  j["singular_values"] = std::vector<double>(
      rep.singular_values.begin(),
      rep.singular_values.begin() +
          static_cast<std::ptrdiff_t>(std::min(top_k, rep.singular_values.size())));
  return j.dump();
}

}  // namespace clra
