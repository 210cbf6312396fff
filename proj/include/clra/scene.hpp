#pragma once

#include <Eigen/Dense>
#include <Eigen/Geometry>

#include <cstdint>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "clra/rng.hpp"

namespace clra {

template <typename S>
using Matrix3X = Eigen::Matrix<S, 3, Eigen::Dynamic>;

enum class MeasurementKind { TOA, PseudoTOA };

inline const char* to_string(MeasurementKind k) {
  return k == MeasurementKind::TOA ? "TOA" : "PseudoTOA";
}

inline MeasurementKind measurement_kind_from(const std::string& s) {
  if (s == "TOA") return MeasurementKind::TOA;
  if (s == "PseudoTOA") return MeasurementKind::PseudoTOA;
  throw std::invalid_argument("unknown measurement kind: " + s);
}

// Microphone/source geometry plus ground-truth timing offsets.
// Anchored so src 1 is the origin, mic 1 lies on the +x axis, and eta[0] = 0.
template <typename S>
struct SceneT {
  Matrix3X<S> mics;          // column i = microphone position r_i (m)
  Matrix3X<S> srcs;          // column j = source position s_j (m)
  Eigen::VectorX<S> delta;   // microphone start times (s)
  Eigen::VectorX<S> eta;     // source emission times (s), eta[0] == 0
  S c{};                     // speed of sound (m/s)
  std::uint64_t seed{};

  Eigen::Index mic_count() const { return mics.cols(); }
  Eigen::Index src_count() const { return srcs.cols(); }
};
using Scene = SceneT<double>;

template <typename S>
struct MeasurementMatrixT {
  Eigen::MatrixX<S> values;  // M x N, seconds
  MeasurementKind kind{MeasurementKind::TOA};
  S c{};
};
using MeasurementMatrix = MeasurementMatrixT<double>;

template <typename S>
struct TimingOffsetsT {
  Eigen::VectorX<S> delta;
  Eigen::VectorX<S> eta;  // eta[0] == 0 (gauge)
};
using TimingOffsets = TimingOffsetsT<double>;

template <typename S>
void anchor_scene(SceneT<S>& sc) {
  const Eigen::Vector3<S> s1 = sc.srcs.col(0);
  sc.mics.colwise() -= s1;
  sc.srcs.colwise() -= s1;
  const Eigen::Vector3<S> r1 = sc.mics.col(0);
  const S r1n = r1.norm();
  if (r1n > S(0)) {
    const Eigen::Matrix3<S> rot =
        Eigen::Quaternion<S>::FromTwoVectors(r1, Eigen::Vector3<S>::UnitX()).toRotationMatrix();
    sc.mics = (rot * sc.mics).eval();
    sc.srcs = (rot * sc.srcs).eval();
    sc.mics.col(0) = Eigen::Vector3<S>(r1n, S(0), S(0));
  }
  sc.srcs.col(0).setZero();
  const S e0 = sc.eta(0);
  sc.eta.array() -= e0;
  sc.delta.array() -= e0;
  sc.eta(0) = S(0);
}

template <typename S = double>
SceneT<S> generate_scene(Eigen::Index m, Eigen::Index n, const Eigen::Vector3d& box,
                         double time_lo, double time_hi, double c, std::uint64_t seed) {
  if (m < 2 || n < 2)
    throw std::invalid_argument("generate_scene: need at least 2 microphones and 2 sources");
  if (!(box.array() > 0.0).all())
    throw std::invalid_argument("generate_scene: box extents must be positive");
  if (!(time_lo < time_hi)) throw std::invalid_argument("generate_scene: empty time range");
  if (!(c > 0.0)) throw std::invalid_argument("generate_scene: speed of sound must be positive");

  SplitMix64 g(seed);
  SceneT<S> sc;
  sc.c = S(c);
  sc.seed = seed;
  sc.mics.resize(3, m);
  sc.srcs.resize(3, n);
  for (Eigen::Index i = 0; i < m; ++i)
    for (int k = 0; k < 3; ++k) sc.mics(k, i) = S(g.uniform(0.0, box[k]));
  for (Eigen::Index j = 0; j < n; ++j)
    for (int k = 0; k < 3; ++k) sc.srcs(k, j) = S(g.uniform(0.0, box[k]));
  sc.delta.resize(m);
  sc.eta.resize(n);
  for (Eigen::Index i = 0; i < m; ++i) sc.delta(i) = S(g.uniform(time_lo, time_hi));
  for (Eigen::Index j = 0; j < n; ++j) sc.eta(j) = S(g.uniform(time_lo, time_hi));
  anchor_scene(sc);
  return sc;
}

template <typename S>
MeasurementMatrixT<S> toa_from_scene(const SceneT<S>& sc) {
  const Eigen::Index m = sc.mic_count(), n = sc.src_count();
  if (sc.delta.size() != m || sc.eta.size() != n)
    throw std::invalid_argument("toa_from_scene: offset sizes do not match positions");
  Eigen::MatrixX<S> t(m, n);
  for (Eigen::Index j = 0; j < n; ++j)
    for (Eigen::Index i = 0; i < m; ++i)
      t(i, j) = (sc.mics.col(i) - sc.srcs.col(j)).norm() / sc.c + sc.eta(j) - sc.delta(i);
  return {std::move(t), MeasurementKind::TOA, sc.c};
}

// zeta(i,j) = t(i,j) - t(1,j); the first row is identically zero
template <typename S>
Eigen::MatrixX<S> tdoa_from_scene(const SceneT<S>& sc) {
  const Eigen::MatrixX<S> t = toa_from_scene(sc).values;
  Eigen::MatrixX<S> z = t.rowwise() - t.row(0);
  z.row(0).setZero();
  return z;
}

template <typename S>
struct PseudoToaResult {
  MeasurementMatrixT<S> measurement;
  std::string gauge_note;
};

// A TDOA matrix shares the TOA structure under pseudo offsets, so it can be
// fed to the same estimation machinery unchanged.
template <typename S>
PseudoToaResult<S> pseudo_toa_from_tdoa(const Eigen::MatrixX<S>& tdoa, S c) {
  if (tdoa.rows() < 1 || tdoa.cols() < 1)
    throw std::invalid_argument("pseudo_toa_from_tdoa: empty matrix");
  if (tdoa.row(0).cwiseAbs().maxCoeff() > S(1e-9))
    throw std::invalid_argument(
        "pseudo_toa_from_tdoa: first row must be zero (difference against microphone 1)");
  return {MeasurementMatrixT<S>{tdoa, MeasurementKind::PseudoTOA, c},
          "estimated offsets are pseudo start/emission times, gauged so the first pseudo "
          "emission time is zero"};
}

// Ground-truth pseudo offsets for a TDOA-derived measurement of this scene:
// eta_hat_j = -|r_1 - s_j|/c, delta_hat_i = delta_i - delta_1, then both are
// shifted by -eta_hat_1 so the gauge eta_hat_1 = 0 holds.
template <typename S>
TimingOffsetsT<S> pseudo_truth_offsets(const SceneT<S>& sc) {
  const Eigen::Index m = sc.mic_count(), n = sc.src_count();
  TimingOffsetsT<S> out;
  out.delta.resize(m);
  out.eta.resize(n);
  for (Eigen::Index j = 0; j < n; ++j)
    out.eta(j) = -(sc.mics.col(0) - sc.srcs.col(j)).norm() / sc.c;
  for (Eigen::Index i = 0; i < m; ++i) out.delta(i) = sc.delta(i) - sc.delta(0);
  const S g = out.eta(0);
  out.eta.array() -= g;
  out.delta.array() -= g;
  out.eta(0) = S(0);
  return out;
}

template <typename S>
MeasurementMatrixT<S> add_noise(const MeasurementMatrixT<S>& meas, double sigma,
                                std::uint64_t seed) {
  if (sigma < 0.0) throw std::invalid_argument("add_noise: sigma must be nonnegative");
  MeasurementMatrixT<S> out = meas;
  if (sigma == 0.0) return out;
  SplitMix64 g(seed);
  for (Eigen::Index j = 0; j < out.values.cols(); ++j)
    for (Eigen::Index i = 0; i < out.values.rows(); ++i)
      out.values(i, j) += S(sigma * g.gaussian());
  return out;
}

// ---- plain-text persistence ----

namespace detail {

inline std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(std::numeric_limits<double>::max_digits10) << v;
  return os.str();
}

inline std::vector<std::string> split(const std::string& line, char sep) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream is(line);
  while (std::getline(is, item, sep)) out.push_back(item);
  return out;
}

inline double parse_double(const std::string& s) {
  try {
    std::size_t pos = 0;
    const double v = std::stod(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw std::runtime_error("malformed number: '" + s + "'");
  }
}

inline Eigen::VectorXd parse_vector(const std::string& csv) {
  const auto items = split(csv, ',');
  Eigen::VectorXd v(static_cast<Eigen::Index>(items.size()));
  for (std::size_t k = 0; k < items.size(); ++k) v(static_cast<Eigen::Index>(k)) = parse_double(items[k]);
  return v;
}

inline std::string join(const Eigen::Ref<const Eigen::RowVectorXd>& v) {
  std::string s;
  for (Eigen::Index k = 0; k < v.size(); ++k) {
    if (k) s += ',';
    s += fmt(v(k));
  }
  return s;
}

}  // namespace detail

// First line "M,N,c,kind", then M rows of N comma-separated seconds.
inline void save_measurement(const std::string& path, const MeasurementMatrix& meas) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  out << meas.values.rows() << ',' << meas.values.cols() << ',' << detail::fmt(meas.c) << ','
      << to_string(meas.kind) << '\n';
  for (Eigen::Index i = 0; i < meas.values.rows(); ++i)
    out << detail::join(meas.values.row(i)) << '\n';
  if (!out) throw std::runtime_error("write failed: " + path);
}

inline MeasurementMatrix load_measurement(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open: " + path);
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error("empty measurement file: " + path);
  const auto head = detail::split(line, ',');
  if (head.size() != 4) throw std::runtime_error("malformed measurement header: " + path);
  const auto m = static_cast<Eigen::Index>(detail::parse_double(head[0]));
  const auto n = static_cast<Eigen::Index>(detail::parse_double(head[1]));
  if (m < 1 || n < 1) throw std::runtime_error("malformed measurement dimensions: " + path);
  MeasurementMatrix meas;
  meas.c = detail::parse_double(head[2]);
  meas.kind = measurement_kind_from(head[3]);
  meas.values.resize(m, n);
  for (Eigen::Index i = 0; i < m; ++i) {
    if (!std::getline(in, line)) throw std::runtime_error("truncated measurement file: " + path);
    const Eigen::VectorXd row = detail::parse_vector(line);
    if (row.size() != n) throw std::runtime_error("ragged measurement row: " + path);
    meas.values.row(i) = row.transpose();
  }
  return meas;
}

inline void save_offsets(const std::string& path, const TimingOffsets& off) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  out << "delta=" << detail::join(off.delta.transpose()) << '\n';
  out << "eta=" << detail::join(off.eta.transpose()) << '\n';
}

inline TimingOffsets load_offsets(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open: " + path);
  TimingOffsets off;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw std::runtime_error("malformed offsets line: " + line);
    const std::string key = line.substr(0, eq), val = line.substr(eq + 1);
    if (key == "delta") off.delta = detail::parse_vector(val);
    else if (key == "eta") off.eta = detail::parse_vector(val);
    else throw std::runtime_error("unknown offsets key: " + key);
  }
  if (off.delta.size() == 0 || off.eta.size() == 0)
    throw std::runtime_error("offsets file missing delta or eta: " + path);
  return off;
}

inline void save_scene(const std::string& path, const Scene& sc) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  out << "m=" << sc.mic_count() << '\n' << "n=" << sc.src_count() << '\n';
  out << "c=" << detail::fmt(sc.c) << '\n' << "seed=" << sc.seed << '\n';
  for (Eigen::Index i = 0; i < sc.mic_count(); ++i)
    out << "mic" << i << '=' << detail::join(sc.mics.col(i).transpose()) << '\n';
  for (Eigen::Index j = 0; j < sc.src_count(); ++j)
    out << "src" << j << '=' << detail::join(sc.srcs.col(j).transpose()) << '\n';
  out << "delta=" << detail::join(sc.delta.transpose()) << '\n';
  out << "eta=" << detail::join(sc.eta.transpose()) << '\n';
}

inline Scene load_scene(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open: " + path);
  Eigen::Index m = -1, n = -1;
  Scene sc;
  std::vector<std::pair<std::string, std::string>> kv;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw std::runtime_error("malformed scene line: " + line);
    kv.emplace_back(line.substr(0, eq), line.substr(eq + 1));
  }
  for (const auto& [key, val] : kv) {
    if (key == "m") m = static_cast<Eigen::Index>(detail::parse_double(val));
    else if (key == "n") n = static_cast<Eigen::Index>(detail::parse_double(val));
  }
  if (m < 1 || n < 1) throw std::runtime_error("scene file missing m or n: " + path);
  sc.mics.resize(3, m);
  sc.srcs.resize(3, n);
  for (const auto& [key, val] : kv) {
    if (key == "m" || key == "n") continue;
    if (key == "c") sc.c = detail::parse_double(val);
    else if (key == "seed") sc.seed = static_cast<std::uint64_t>(std::stoull(val));
    else if (key == "delta") sc.delta = detail::parse_vector(val);
    else if (key == "eta") sc.eta = detail::parse_vector(val);
    else if (key.rfind("mic", 0) == 0)
      sc.mics.col(std::stoi(key.substr(3))) = detail::parse_vector(val);
    else if (key.rfind("src", 0) == 0)
      sc.srcs.col(std::stoi(key.substr(3))) = detail::parse_vector(val);
    else throw std::runtime_error("unknown scene key: " + key);
  }
  if (sc.delta.size() != m || sc.eta.size() != n)
    throw std::runtime_error("scene file offset sizes inconsistent: " + path);
  return sc;
}

}  // namespace clra
