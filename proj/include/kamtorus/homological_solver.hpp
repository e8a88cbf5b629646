#pragma once

// Solvers for the linearized conjugacy equation of the iteration.  Given the
// reduced quadratic form N (tangential actions, Hermitian cluster blocks and
// creation-pair couplings, all autonomous) and a perturbation R truncated to
// monomials with 2|l| + z <= 2, the equation {N, F} + R = (kept part) is
// solved channel by channel:
//
//   * Fourier scalars                 f = i r / <k, omega>
//   * cluster-block vectors           (<k,omega> I +- A) f = i r
//   * two-cluster Sylvester systems   (<k,omega> I + s1 A) X + s2 X B = i C
//   * coupled channels generated by the creation-pair terms, assembled
//     directly from the Poisson bracket and solved densely.
//
// Every division is guarded by an explicit small-divisor floor.  Offending
// divisors are collected into reports and raised together so a caller sees
// the complete list of failures, not just the first.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "kamtorus/json_util.hpp"
#include "kamtorus/normal_form.hpp"
#include "kamtorus/series.hpp"

namespace kam {

// ---------------------------------------------------------------------------
// Small-divisor reporting
// ---------------------------------------------------------------------------

enum class DivisorKind { Scalar, BlockEigen, Tensor4 };

inline const char* divisor_kind_name(DivisorKind k) {
  switch (k) {
    case DivisorKind::Scalar: return "scalar";
    case DivisorKind::BlockEigen: return "block-eigen";
    case DivisorKind::Tensor4: return "tensor4";
  }
  return "unknown";
}

struct SmallDivisorReport {
  DivisorKind kind = DivisorKind::Scalar;
  double divisor_value = 0.0;  // modulus of the offending divisor
  double threshold = 0.0;
  std::vector<int> k;
  std::string indices;  // human-readable channel description

  bool flagged() const { return divisor_value < threshold; }

  // One JSON object per line, keys sorted, 17 significant digits.
  std::string to_json_line() const {
    std::string out = "{\"divisor\":";
    out += detail::format_double(divisor_value);
    out += ",\"flagged\":";
    out += flagged() ? "true" : "false";
    out += ",\"indices\":\"";
    out += detail::json_escape(indices);
    out += "\",\"k\":[";
    for (std::size_t i = 0; i < k.size(); ++i) {
      if (i) out += ',';
      out += std::to_string(k[i]);
    }
    out += "],\"kind\":\"";
    out += divisor_kind_name(kind);
    out += "\",\"threshold\":";
    out += detail::format_double(threshold);
    out += "}";
    return out;
  }
};

class SmallDivisorError : public std::runtime_error {
 public:
  explicit SmallDivisorError(std::vector<SmallDivisorReport> reports)
      : std::runtime_error(make_message(reports)), reports_(std::move(reports)) {}

  const std::vector<SmallDivisorReport>& reports() const { return reports_; }

 private:
  static std::string make_message(const std::vector<SmallDivisorReport>& reps) {
    std::string msg = "small divisor below floor (" +
                      std::to_string(reps.size()) + " flagged)";
    if (!reps.empty()) {
      msg += ": ";
      msg += reps.front().to_json_line();
    }
    return msg;
  }

  std::vector<SmallDivisorReport> reports_;
};

// Hard guard applied by every solver in addition to the configured floor;
// keeps a division from running into rounding noise even when the caller
// asked for no exclusion at all.
inline constexpr double kAbsoluteDivisorFloor = 1e-13;

struct DivisorFloor {
  double gamma = 0.0;  // exclusion parameter; 0 disables the scaled floor
  double K = 1.0;      // current Fourier cutoff
  double tau = 0.0;    // Diophantine exponent
  double absolute = kAbsoluteDivisorFloor;

  double threshold() const { return gamma * std::pow(K, -tau); }
  double effective() const { return std::max(threshold(), absolute); }
};

namespace detail {

inline double k_dot(const std::vector<int>& k, const std::vector<double>& omega) {
  if (k.size() != omega.size()) {
    throw std::invalid_argument("k and omega must have the same length");
  }
  double d = 0.0;
  for (std::size_t i = 0; i < k.size(); ++i) d += static_cast<double>(k[i]) * omega[i];
  return d;
}

inline bool k_is_zero(const std::vector<int>& k) {
  return std::all_of(k.begin(), k.end(), [](int v) { return v == 0; });
}

inline int k_abs_sum(const std::vector<int>& k) {
  int s = 0;
  for (int v : k) s += std::abs(v);
  return s;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Block diagonalization
// ---------------------------------------------------------------------------

struct BlockDiagonalization {
  Eigen::MatrixXcd Q;      // unitary; real orthogonal when hermitian_path is false
  Eigen::VectorXd lambda;  // real eigenvalues, ascending
  bool hermitian_path = false;
  double residual = 0.0;   // max-abs entry of Q diag(lambda) Q^H - A
};

// Diagonalizes a Hermitian (or real symmetric) block.  Inputs that deviate
// from Hermitian symmetry by more than 1e-12 * |A| are rejected; smaller
// deviations are symmetrized away.  Real inputs take the orthogonal route,
// genuinely complex ones the unitary route; the flag records which was used.
inline BlockDiagonalization diagonalize_block(const Eigen::MatrixXcd& A) {
  if (A.rows() == 0 || A.rows() != A.cols()) {
    throw std::invalid_argument("diagonalize_block: matrix must be square and nonempty");
  }
  const double scale = std::max(A.cwiseAbs().maxCoeff(), 1.0);
  const double asym = (A - A.adjoint()).cwiseAbs().maxCoeff();
  if (asym > 1e-12 * scale) {
    throw std::invalid_argument("diagonalize_block: matrix is not Hermitian");
  }
  const Eigen::MatrixXcd H = 0.5 * (A + A.adjoint());

  BlockDiagonalization out;
  out.hermitian_path = H.imag().cwiseAbs().maxCoeff() > 0.0;
  if (out.hermitian_path) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXcd> es(H);
    if (es.info() != Eigen::Success) {
      throw std::runtime_error("diagonalize_block: eigensolver failed");
    }
    out.Q = es.eigenvectors();
    out.lambda = es.eigenvalues();
  } else {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(H.real());
    if (es.info() != Eigen::Success) {
      throw std::runtime_error("diagonalize_block: eigensolver failed");
    }
    out.Q = es.eigenvectors().cast<Complex>();
    out.lambda = es.eigenvalues();
  }

  const Eigen::MatrixXcd recon =
      out.Q * out.lambda.cast<Complex>().asDiagonal() * out.Q.adjoint();
  out.residual = (recon - H).cwiseAbs().maxCoeff();
  const double unit = (out.Q.adjoint() * out.Q -
                       Eigen::MatrixXcd::Identity(A.rows(), A.cols()))
                          .cwiseAbs()
                          .maxCoeff();
  if (out.residual > 1e-10 * scale || unit > 1e-12 * A.rows()) {
    throw std::runtime_error("diagonalize_block: accuracy check failed");
  }
  return out;
}

// ---------------------------------------------------------------------------
// Channel solvers
// ---------------------------------------------------------------------------

// Fourier scalar channel: i <k,omega> f = -r, i.e. f = i r / <k,omega>.
// The zero harmonic is a kept direction, never a solvable one.
inline Complex solve_scalar(const std::vector<int>& k, const std::vector<double>& omega,
                            Complex rhs, const DivisorFloor& floor = {}) {
  if (detail::k_is_zero(k)) {
    throw std::invalid_argument("solve_scalar: zero harmonic belongs to the kept part");
  }
  const double d = detail::k_dot(k, omega);
  if (std::abs(d) < floor.effective()) {
    SmallDivisorReport rep;
    rep.kind = DivisorKind::Scalar;
    rep.divisor_value = std::abs(d);
    rep.threshold = floor.effective();
    rep.k = k;
    rep.indices = "<k,omega>";
    throw SmallDivisorError({rep});
  }
  return Complex{0.0, 1.0} * rhs / d;
}

// Cluster-block vector channel: (<k,omega> I + sign * A) f = i r with A
// Hermitian.  Solved in the eigenbasis of A; every scalar divisor
// <k,omega> + sign * lambda_j is checked against the floor.
inline Eigen::VectorXcd solve_block_vector(const std::vector<int>& k,
                                           const std::vector<double>& omega,
                                           const Eigen::MatrixXcd& A,
                                           const Eigen::VectorXcd& rhs, int sign,
                                           const DivisorFloor& floor = {}) {
  if (sign != 1 && sign != -1) {
    throw std::invalid_argument("solve_block_vector: sign must be +1 or -1");
  }
  if (A.rows() != rhs.size()) {
    throw std::invalid_argument("solve_block_vector: dimension mismatch");
  }
  const double d = detail::k_dot(k, omega);
  const BlockDiagonalization diag = diagonalize_block(A);

  std::vector<SmallDivisorReport> flags;
  for (int j = 0; j < diag.lambda.size(); ++j) {
    const double div = d + sign * diag.lambda[j];
    if (std::abs(div) < floor.effective()) {
      SmallDivisorReport rep;
      rep.kind = DivisorKind::BlockEigen;
      rep.divisor_value = std::abs(div);
      rep.threshold = floor.effective();
      rep.k = k;
      rep.indices = (sign > 0 ? "+lambda[" : "-lambda[") + std::to_string(j) + "]";
      flags.push_back(std::move(rep));
    }
  }
  if (!flags.empty()) throw SmallDivisorError(std::move(flags));

  Eigen::VectorXcd yhat = diag.Q.adjoint() * rhs;
  const Complex iu{0.0, 1.0};
  for (int j = 0; j < yhat.size(); ++j) {
    yhat[j] = iu * yhat[j] / (d + sign * diag.lambda[j]);
  }
  return diag.Q * yhat;
}

namespace detail {

inline Eigen::MatrixXcd kron(const Eigen::MatrixXcd& A, const Eigen::MatrixXcd& B) {
  Eigen::MatrixXcd out(A.rows() * B.rows(), A.cols() * B.cols());
  for (Eigen::Index i = 0; i < A.rows(); ++i) {
    for (Eigen::Index j = 0; j < A.cols(); ++j) {
      out.block(i * B.rows(), j * B.cols(), B.rows(), B.cols()) = A(i, j) * B;
    }
  }
  return out;
}

// Dense Kronecker solve of (d I + s1 A) X + s2 X B = C for general square A
// and B, via the column-major vectorization vec(X).  This is the reference
// path used to cross-check the diagonalization route, and the only path that
// applies when A or B is not Hermitian.
inline Eigen::MatrixXcd sylvester_dense(double d, const Eigen::MatrixXcd& A,
                                        const Eigen::MatrixXcd& B,
                                        const Eigen::MatrixXcd& C, int s1, int s2) {
  if (A.rows() != A.cols() || B.rows() != B.cols() || C.rows() != A.rows() ||
      C.cols() != B.rows()) {
    throw std::invalid_argument("sylvester_dense: dimension mismatch");
  }
  const Eigen::Index n = A.rows(), m = B.rows();
  const Eigen::MatrixXcd In = Eigen::MatrixXcd::Identity(n, n);
  const Eigen::MatrixXcd Im = Eigen::MatrixXcd::Identity(m, m);
  Eigen::MatrixXcd M = kron(Im, d * In + static_cast<double>(s1) * A) +
                       static_cast<double>(s2) * kron(B.transpose(), In);
  Eigen::VectorXcd c(n * m);
  for (Eigen::Index j = 0; j < m; ++j) c.segment(j * n, n) = C.col(j);
  const Eigen::VectorXcd x = M.partialPivLu().solve(c);
  Eigen::MatrixXcd X(n, m);
  for (Eigen::Index j = 0; j < m; ++j) X.col(j) = x.segment(j * n, n);
  return X;
}

}  // namespace detail

// Smallest modulus among the scalar divisors d + s1 lambda_i + s2 mu_j; the
// two-cluster channel is solvable precisely when this stays above the floor.
inline double sylvester_min_divisor(double d, const Eigen::VectorXd& lambda_a,
                                    const Eigen::VectorXd& lambda_b, int s1, int s2) {
  double mn = std::numeric_limits<double>::infinity();
  for (int i = 0; i < lambda_a.size(); ++i) {
    for (int j = 0; j < lambda_b.size(); ++j) {
      mn = std::min(mn, std::abs(d + s1 * lambda_a[i] + s2 * lambda_b[j]));
    }
  }
  return mn;
}

// Two-cluster Sylvester channel: (<k,omega> I + s1 A) X + s2 X B = i C with A
// and B Hermitian.  Both blocks are diagonalized and every combined divisor
// <k,omega> + s1 lambda_i + s2 mu_j is checked against the floor.
inline Eigen::MatrixXcd solve_sylvester(const std::vector<int>& k,
                                        const std::vector<double>& omega,
                                        const Eigen::MatrixXcd& A,
                                        const Eigen::MatrixXcd& B,
                                        const Eigen::MatrixXcd& C, int s1, int s2,
                                        const DivisorFloor& floor = {}) {
  if ((s1 != 1 && s1 != -1) || (s2 != 1 && s2 != -1)) {
    throw std::invalid_argument("solve_sylvester: signs must be +1 or -1");
  }
  if (C.rows() != A.rows() || C.cols() != B.rows()) {
    throw std::invalid_argument("solve_sylvester: dimension mismatch");
  }
  const double d = detail::k_dot(k, omega);
  const BlockDiagonalization da = diagonalize_block(A);
  const BlockDiagonalization db = diagonalize_block(B);

  std::vector<SmallDivisorReport> flags;
  for (int i = 0; i < da.lambda.size(); ++i) {
    for (int j = 0; j < db.lambda.size(); ++j) {
      const double div = d + s1 * da.lambda[i] + s2 * db.lambda[j];
      if (std::abs(div) < floor.effective()) {
        SmallDivisorReport rep;
        rep.kind = DivisorKind::BlockEigen;
        rep.divisor_value = std::abs(div);
        rep.threshold = floor.effective();
        rep.k = k;
        rep.indices = std::string(s1 > 0 ? "+" : "-") + "lambdaA[" + std::to_string(i) +
                      "]" + (s2 > 0 ? "+" : "-") + "lambdaB[" + std::to_string(j) + "]";
        flags.push_back(std::move(rep));
      }
    }
  }
  if (!flags.empty()) throw SmallDivisorError(std::move(flags));

  const Complex iu{0.0, 1.0};
  Eigen::MatrixXcd Chat = da.Q.adjoint() * C * db.Q;
  for (int i = 0; i < Chat.rows(); ++i) {
    for (int j = 0; j < Chat.cols(); ++j) {
      Chat(i, j) = iu * Chat(i, j) / (d + s1 * da.lambda[i] + s2 * db.lambda[j]);
    }
  }
  return da.Q * Chat * db.Q.adjoint();
}

// ---------------------------------------------------------------------------
// Coupled creation-pair channels
// ---------------------------------------------------------------------------

// The 2x2 creation-pair block of a coupling (n, m) with gap entries Dn, -Dm
// and off-diagonal strength a:  A = [[Dn, -a], [a, -Dm]].
//
//   MixedPlus   (d + shift) I + A   on coefficients (Z zbar_n, Z z_m)
//   MixedMinus  (d + shift) I - A   on coefficients (Z z_n, Z zbar_m)
//   PairPair    d I4 - A_n (x) I2 + I2 (x) A_n'
//               on (z_n zbar_n', z_n z_m', zbar_m zbar_n', zbar_m z_m')
enum class L2CoupledCase { MixedPlus, MixedMinus, PairPair };

namespace detail {

inline Eigen::Matrix4d kron2(const Eigen::Matrix2d& A, const Eigen::Matrix2d& B) {
  Eigen::Matrix4d out;
  for (int i = 0; i < 2; ++i) {
    for (int j = 0; j < 2; ++j) {
      out.block<2, 2>(2 * i, 2 * j) = A(i, j) * B;
    }
  }
  return out;
}

inline Eigen::Matrix2d l2_mixed_matrix(double total_d, const Eigen::Matrix2d& A,
                                       int sign) {
  return total_d * Eigen::Matrix2d::Identity() + static_cast<double>(sign) * A;
}

inline Eigen::Matrix4d l2_pair_matrix(double d, const Eigen::Matrix2d& An,
                                      const Eigen::Matrix2d& Anp) {
  const Eigen::Matrix2d I2 = Eigen::Matrix2d::Identity();
  return d * Eigen::Matrix4d::Identity() - kron2(An, I2) + kron2(I2, Anp);
}

}  // namespace detail

// Solves one coupled channel M f = i rhs where M is the matrix of the chosen
// case at total shift <k,omega> + scalar_shift.  The determinant of M is the
// guarded divisor.  A_nprime is only consulted in the PairPair case.
inline Eigen::VectorXcd solve_l2_coupled(const std::vector<int>& k,
                                         const std::vector<double>& omega,
                                         const Eigen::Matrix2d& A_n,
                                         const Eigen::Matrix2d& A_nprime,
                                         const Eigen::VectorXcd& rhs,
                                         L2CoupledCase which, double scalar_shift = 0.0,
                                         const DivisorFloor& floor = {}) {
  const double d = detail::k_dot(k, omega) + scalar_shift;
  Eigen::MatrixXd M;
  const char* name = "";
  switch (which) {
    case L2CoupledCase::MixedPlus:
      M = detail::l2_mixed_matrix(d, A_n, +1);
      name = "mixed-plus";
      break;
    case L2CoupledCase::MixedMinus:
      M = detail::l2_mixed_matrix(d, A_n, -1);
      name = "mixed-minus";
      break;
    case L2CoupledCase::PairPair:
      M = detail::l2_pair_matrix(d, A_n, A_nprime);
      name = "pair-pair";
      break;
  }
  if (rhs.size() != M.rows()) {
    throw std::invalid_argument("solve_l2_coupled: rhs dimension mismatch");
  }
  const double det = M.determinant();
  if (std::abs(det) < floor.effective()) {
    SmallDivisorReport rep;
    rep.kind = (M.rows() == 2) ? DivisorKind::BlockEigen : DivisorKind::Tensor4;
    rep.divisor_value = std::abs(det);
    rep.threshold = floor.effective();
    rep.k = k;
    rep.indices = std::string("det ") + name;
    throw SmallDivisorError({rep});
  }
  const Complex iu{0.0, 1.0};
  return M.cast<Complex>().partialPivLu().solve(iu * rhs);
}

// ---------------------------------------------------------------------------
// Divisor survey
// ---------------------------------------------------------------------------

// Evaluates every divisor class for a single harmonic k against the floor
// gamma / K^tau and returns the flagged ones: the Fourier scalar (for k != 0),
// single eigenvalues <k,omega> +- lambda_j, ordered eigenvalue pairs with all
// sign combinations (same-index pairs only with equal signs: the mixed-sign
// same-index divisor reduces to the scalar class), and the supplied channel
// determinants.  With gamma = 0 nothing is ever flagged.
inline std::vector<SmallDivisorReport> divisor_floor(
    const std::vector<int>& k, const std::vector<double>& omega,
    const std::vector<double>& lambdas, const std::vector<double>& dets, double gamma,
    double K, double tau) {
  if (K < 1.0) throw std::invalid_argument("divisor_floor: K must be at least 1");
  if (detail::k_abs_sum(k) > K) {
    throw std::invalid_argument("divisor_floor: |k|_1 exceeds the cutoff K");
  }
  const double thr = gamma * std::pow(K, -tau);
  const double d = detail::k_dot(k, omega);
  std::vector<SmallDivisorReport> out;

  auto push = [&](DivisorKind kind, double value, std::string idx) {
    if (std::abs(value) < thr) {
      SmallDivisorReport rep;
      rep.kind = kind;
      rep.divisor_value = std::abs(value);
      rep.threshold = thr;
      rep.k = k;
      rep.indices = std::move(idx);
      out.push_back(std::move(rep));
    }
  };

  if (!detail::k_is_zero(k)) push(DivisorKind::Scalar, d, "<k,omega>");

  const int n = static_cast<int>(lambdas.size());
  for (int j = 0; j < n; ++j) {
    push(DivisorKind::BlockEigen, d + lambdas[j], "+lambda[" + std::to_string(j) + "]");
    push(DivisorKind::BlockEigen, d - lambdas[j], "-lambda[" + std::to_string(j) + "]");
  }
  for (int i = 0; i < n; ++i) {
    for (int j = i; j < n; ++j) {
      const std::string si = std::to_string(i), sj = std::to_string(j);
      push(DivisorKind::BlockEigen, d + lambdas[i] + lambdas[j],
           "+lambda[" + si + "]+lambda[" + sj + "]");
      push(DivisorKind::BlockEigen, d - lambdas[i] - lambdas[j],
           "-lambda[" + si + "]-lambda[" + sj + "]");
      if (i != j) {
        push(DivisorKind::BlockEigen, d + lambdas[i] - lambdas[j],
             "+lambda[" + si + "]-lambda[" + sj + "]");
        push(DivisorKind::BlockEigen, d - lambdas[i] + lambdas[j],
             "-lambda[" + si + "]+lambda[" + sj + "]");
      }
    }
  }
  for (std::size_t t = 0; t < dets.size(); ++t) {
    push(DivisorKind::Tensor4, dets[t], "det[" + std::to_string(t) + "]");
  }
  return out;
}

// ---------------------------------------------------------------------------
// Series-level data
// ---------------------------------------------------------------------------

struct L2Coupling {
  Site n, m;      // creation-pair letters, n < m
  Complex value;  // coefficient of w_n w_m (its conjugate sits on wbar wbar)
};

// Everything the series-level solver needs to know about the reduced
// quadratic form: tangential frequencies, the cluster partition of the
// retained modes, one Hermitian block per cluster, the creation-pair
// couplings, and the form itself (used to assemble coupled channels).
struct HomologicalData {
  int b = 0;
  std::vector<double> omega;
  std::vector<Site> modes;                  // sorted
  std::vector<std::vector<Site>> clusters;  // partition of modes, each sorted
  std::vector<Eigen::MatrixXcd> blocks;     // Hermitian, indexed like clusters
  std::vector<L2Coupling> couplings;
  FourierTaylorSeries N;

  std::map<Site, int> cluster_of;
  std::map<Site, int> slot_in_cluster;
  std::map<Site, int> coupling_of;  // only letters that sit in a coupling

  bool is_coupling_letter(const Site& s) const { return coupling_of.count(s) != 0; }

  double diag(const Site& s) const {
    const int c = cluster_of.at(s);
    const int r = slot_in_cluster.at(s);
    return blocks[c](r, r).real();
  }
};

// Groups the retained modes by their lattice norm |n|^2; modes of equal norm
// share a first-order frequency and form one block of the reduced form.
inline std::vector<std::vector<Site>> equal_norm_clusters(const std::vector<Site>& modes) {
  std::map<std::int64_t, std::vector<Site>> by_norm;
  for (const Site& s : modes) by_norm[s.norm2()].push_back(s);
  std::vector<std::vector<Site>> out;
  out.reserve(by_norm.size());
  for (auto& [norm, sites] : by_norm) {
    std::sort(sites.begin(), sites.end());
    out.push_back(std::move(sites));
  }
  return out;
}

// Reads the reduced quadratic form out of its series representation and
// validates it: autonomous, action part linear with real frequencies, mode
// part a Hermitian block per cluster plus conjugate creation pairs.
inline HomologicalData extract_homological_data(
    const FourierTaylorSeries& N, const std::vector<Site>& modes,
    const std::vector<std::vector<Site>>& clusters) {
  HomologicalData D;
  D.b = N.b();
  D.N = N;
  D.modes = modes;
  D.clusters = clusters;
  if (!std::is_sorted(modes.begin(), modes.end()) ||
      std::adjacent_find(modes.begin(), modes.end()) != modes.end()) {
    throw std::invalid_argument("extract_homological_data: modes must be sorted and unique");
  }
  for (std::size_t c = 0; c < clusters.size(); ++c) {
    for (std::size_t r = 0; r < clusters[c].size(); ++r) {
      const Site& s = clusters[c][r];
      if (!std::binary_search(modes.begin(), modes.end(), s)) {
        throw std::invalid_argument("extract_homological_data: cluster site not a mode");
      }
      if (!D.cluster_of.emplace(s, static_cast<int>(c)).second) {
        throw std::invalid_argument("extract_homological_data: clusters overlap");
      }
      D.slot_in_cluster.emplace(s, static_cast<int>(r));
    }
  }
  if (D.cluster_of.size() != modes.size()) {
    throw std::invalid_argument("extract_homological_data: clusters do not cover the modes");
  }
  D.blocks.reserve(clusters.size());
  for (const auto& cl : clusters) {
    D.blocks.push_back(Eigen::MatrixXcd::Zero(cl.size(), cl.size()));
  }

  D.omega.assign(D.b, 0.0);
  std::vector<bool> omega_seen(D.b, false);
  std::map<std::pair<Site, Site>, Complex> c20, c02;

  for (const Term& t : N.terms()) {
    const MultiIndex& m = t.idx;
    if (m.k1() != 0) {
      throw std::invalid_argument("extract_homological_data: form must be autonomous");
    }
    const int l1 = m.l1();
    const int z = m.z_degree();
    if (z == 0 && l1 == 0) continue;  // constant offset carries no dynamics here
    if (z == 0 && l1 == 1) {
      for (int j = 0; j < D.b; ++j) {
        if (m.l[j] == 1) {
          if (std::abs(t.coeff.imag()) > 1e-12 * std::max(1.0, std::abs(t.coeff))) {
            throw std::invalid_argument(
                "extract_homological_data: complex tangential frequency");
          }
          D.omega[j] += t.coeff.real();
          omega_seen[j] = true;
        }
      }
      continue;
    }
    if (z == 2 && l1 == 0) {
      const int atot = [&] {
        int s = 0;
        for (int a = 0; a < m.na; ++a) s += m.alpha[a].pow;
        return s;
      }();
      if (atot == 1) {  // one creation and one annihilation letter
        const Site p = m.alpha[0].site();
        const Site q = m.beta[0].site();
        const auto cp = D.cluster_of.find(p), cq = D.cluster_of.find(q);
        if (cp == D.cluster_of.end() || cq == D.cluster_of.end()) {
          throw std::invalid_argument("extract_homological_data: unknown mode");
        }
        if (cp->second != cq->second) {
          throw std::invalid_argument(
              "extract_homological_data: mixed quadratic term crosses clusters");
        }
        D.blocks[cp->second](D.slot_in_cluster.at(p), D.slot_in_cluster.at(q)) += t.coeff;
        continue;
      }
      if (atot == 2 || atot == 0) {  // creation or annihilation pair
        auto& dest = (atot == 2) ? c20 : c02;
        const auto& arr = (atot == 2) ? m.alpha : m.beta;
        const int cnt = (atot == 2) ? m.na : m.nb;
        if (cnt != 2) {
          throw std::invalid_argument(
              "extract_homological_data: squared pair term is not a valid coupling");
        }
        Site p = arr[0].site(), q = arr[1].site();
        if (q < p) std::swap(p, q);
        dest[{p, q}] += t.coeff;
        continue;
      }
    }
    throw std::invalid_argument("extract_homological_data: unrecognized term shape");
  }

  for (int j = 0; j < D.b; ++j) {
    if (!omega_seen[j]) {
      throw std::invalid_argument("extract_homological_data: missing tangential frequency");
    }
  }
  for (std::size_t c = 0; c < D.blocks.size(); ++c) {
    const double scale = std::max(D.blocks[c].cwiseAbs().maxCoeff(), 1.0);
    const double asym = (D.blocks[c] - D.blocks[c].adjoint()).cwiseAbs().maxCoeff();
    if (asym > 1e-12 * scale) {
      throw std::invalid_argument("extract_homological_data: cluster block not Hermitian");
    }
    D.blocks[c] = 0.5 * (D.blocks[c] + D.blocks[c].adjoint().eval());
  }
  for (const auto& [key, val] : c20) {
    const auto it = c02.find(key);
    if (it == c02.end() ||
        std::abs(val - std::conj(it->second)) > 1e-12 * std::max(1.0, std::abs(val))) {
      throw std::invalid_argument(
          "extract_homological_data: creation pair lacks its conjugate");
    }
    if (val == Complex{0.0, 0.0}) continue;
    L2Coupling cp;
    cp.n = key.first;
    cp.m = key.second;
    cp.value = val;
    if (!D.cluster_of.count(cp.n) || !D.cluster_of.count(cp.m)) {
      throw std::invalid_argument("extract_homological_data: coupling letter not a mode");
    }
    const int idx = static_cast<int>(D.couplings.size());
    if (!D.coupling_of.emplace(cp.n, idx).second ||
        !D.coupling_of.emplace(cp.m, idx).second) {
      throw std::invalid_argument(
          "extract_homological_data: mode sits in two creation pairs");
    }
    D.couplings.push_back(cp);
  }
  for (const auto& [key, val] : c02) {
    if (!c20.count(key) && std::abs(val) > 0.0) {
      throw std::invalid_argument(
          "extract_homological_data: annihilation pair lacks its conjugate");
    }
  }
  return D;
}

inline HomologicalData homological_data_from_state(const NormalFormState& st) {
  return extract_homological_data(st.N, st.modes, equal_norm_clusters(st.modes));
}

// A monomial that the iteration keeps in the new reduced form rather than
// removing: the zero harmonic of the action part, mixed quadratic terms
// inside one cluster, and the creation pairs themselves.
inline bool kept_shape(const HomologicalData& D, const MultiIndex& m) {
  if (m.k1() != 0) return false;
  const int z = m.z_degree();
  if (z == 0) return m.l1() <= 1;
  if (z != 2 || m.l1() != 0) return false;
  int atot = 0;
  for (int a = 0; a < m.na; ++a) atot += m.alpha[a].pow;
  if (atot == 1) {
    return D.cluster_of.at(m.alpha[0].site()) == D.cluster_of.at(m.beta[0].site());
  }
  const auto& arr = (atot == 2) ? m.alpha : m.beta;
  const int cnt = (atot == 2) ? m.na : m.nb;
  if (cnt != 2) return false;  // a squared letter is never a creation pair
  Site p = arr[0].site(), q = arr[1].site();
  if (q < p) std::swap(p, q);
  for (const L2Coupling& c : D.couplings) {
    if (c.n == p && c.m == q) return true;
  }
  return false;
}

namespace detail {

// Matrix of the inner bracket on a fixed monomial basis: column s holds the
// coefficients of {N, basis[s]} stripped of the overall factor i, so the
// conjugacy equation on the span reads  i L f = -r.  Every bracket image must
// land back in the span; anything else is a closure bug.
inline Eigen::MatrixXcd assemble_bracket_matrix(const FourierTaylorSeries& N,
                                                const std::vector<MultiIndex>& basis) {
  const int dim = static_cast<int>(basis.size());
  std::map<MultiIndex, int> pos;
  for (int s = 0; s < dim; ++s) pos.emplace(basis[s], s);
  Eigen::MatrixXcd L = Eigen::MatrixXcd::Zero(dim, dim);
  const Complex miu{0.0, -1.0};
  for (int s = 0; s < dim; ++s) {
    const FourierTaylorSeries unit =
        FourierTaylorSeries::monomial(N.b(), basis[s], Complex{1.0, 0.0});
    const FourierTaylorSeries br = poisson_bracket(N, unit);
    for (const Term& t : br.terms()) {
      const auto it = pos.find(t.idx);
      if (it == pos.end()) {
        throw std::logic_error("assemble_bracket_matrix: basis is not bracket-invariant");
      }
      L(it->second, s) += miu * t.coeff;
    }
  }
  return L;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Series-level solve
// ---------------------------------------------------------------------------

struct HomologicalStats {
  int components = 0;        // solved channels of every kind
  int dense_components = 0;  // coupled channels assembled from the bracket
  int kept_terms = 0;
  int solved_terms = 0;
  double min_scalar_divisor = std::numeric_limits<double>::infinity();
  double min_block_divisor = std::numeric_limits<double>::infinity();
  double min_det = std::numeric_limits<double>::infinity();
};

struct HomologicalSolution {
  FourierTaylorSeries F;     // generator: {N, F} + R agrees with `kept`
  FourierTaylorSeries kept;  // zero-harmonic part absorbed into the new form
  HomologicalStats stats;
};

namespace detail {

struct SubBlocks {
  std::map<Site, int> sub_of;          // site -> global sub-block id
  std::vector<std::vector<Site>> members;  // id -> sorted sites
  std::vector<int> cluster_of_sub;     // id -> cluster index
  std::vector<bool> coupled;           // id touches a creation-pair letter
};

// Splits every cluster into the connected components of the nonzero pattern
// of its block; the solve only ever mixes modes that the form actually
// couples, so each component is an independent channel.
inline SubBlocks split_sub_blocks(const HomologicalData& D) {
  SubBlocks sb;
  for (std::size_t c = 0; c < D.clusters.size(); ++c) {
    const auto& sites = D.clusters[c];
    const int n = static_cast<int>(sites.size());
    std::vector<int> comp(n, -1);
    for (int root = 0; root < n; ++root) {
      if (comp[root] >= 0) continue;
      const int id = static_cast<int>(sb.members.size());
      std::vector<int> stack{root};
      comp[root] = id;
      std::vector<Site> mem;
      while (!stack.empty()) {
        const int u = stack.back();
        stack.pop_back();
        mem.push_back(sites[u]);
        for (int v = 0; v < n; ++v) {
          if (comp[v] < 0 && std::abs(D.blocks[c](u, v)) > 0.0) {
            comp[v] = id;
            stack.push_back(v);
          }
        }
      }
      std::sort(mem.begin(), mem.end());
      bool coupled = false;
      for (const Site& s : mem) {
        sb.sub_of.emplace(s, id);
        if (D.is_coupling_letter(s)) coupled = true;
      }
      sb.members.push_back(std::move(mem));
      sb.cluster_of_sub.push_back(static_cast<int>(c));
      sb.coupled.push_back(coupled);
    }
  }
  return sb;
}

inline Eigen::MatrixXcd sub_matrix(const HomologicalData& D, const SubBlocks& sb,
                                   int sub_id) {
  const auto& mem = sb.members[sub_id];
  const int c = sb.cluster_of_sub[sub_id];
  Eigen::MatrixXcd A(mem.size(), mem.size());
  for (std::size_t i = 0; i < mem.size(); ++i) {
    for (std::size_t j = 0; j < mem.size(); ++j) {
      A(i, j) = D.blocks[c](D.slot_in_cluster.at(mem[i]), D.slot_in_cluster.at(mem[j]));
    }
  }
  return A;
}

}  // namespace detail

// Solves {N, F} + R = kept for the generator F, where R holds only monomials
// with 2|l| + z <= 2 (the caller truncates first).  Kept directions are the
// zero-harmonic action terms, in-cluster mixed quadratics, and creation
// pairs; everything else is removed channel by channel.  All small-divisor
// violations across the whole series are gathered before a single error is
// raised, so the caller sees the complete exclusion list.
inline HomologicalSolution solve_homological(const HomologicalData& D,
                                             const FourierTaylorSeries& R,
                                             const DivisorFloor& floor = {}) {
  if (R.b() != D.b) {
    throw std::invalid_argument("solve_homological: rank mismatch between R and the form");
  }
  const double eff = floor.effective();
  const Complex iu{0.0, 1.0};

  const detail::SubBlocks sb = detail::split_sub_blocks(D);
  std::map<int, BlockDiagonalization> diag_cache;
  auto diag_of = [&](int sub_id) -> const BlockDiagonalization& {
    auto it = diag_cache.find(sub_id);
    if (it == diag_cache.end()) {
      it = diag_cache.emplace(sub_id, diagonalize_block(detail::sub_matrix(D, sb, sub_id)))
               .first;
    }
    return it->second;
  };

  HomologicalStats stats;
  std::vector<SmallDivisorReport> flags;
  std::map<MultiIndex, Complex> F_out, kept_out;
  std::unordered_set<MultiIndex, MultiIndexHash> processed;

  auto k_of = [&](const MultiIndex& m) {
    std::vector<int> k(D.b);
    for (int j = 0; j < D.b; ++j) k[j] = m.k[j];
    return k;
  };
  auto d_of = [&](const MultiIndex& m) {
    double d = 0.0;
    for (int j = 0; j < D.b; ++j) d += static_cast<double>(m.k[j]) * D.omega[j];
    return d;
  };

  // Dense route for channels that touch a creation-pair letter: close the
  // seed under the bracket moves of the form, assemble the bracket matrix,
  // project out the kept directions, and solve what remains.  The bracket of
  // F with N spills back onto kept directions; that spill joins the kept
  // output rather than being removed.
  auto dense_component = [&](const MultiIndex& seed) {
    std::set<MultiIndex> basis_set;
    std::vector<MultiIndex> queue{seed};
    basis_set.insert(seed);
    auto visit = [&](MultiIndex next) {
      if (basis_set.insert(next).second) queue.push_back(next);
    };
    while (!queue.empty()) {
      const MultiIndex cur = queue.back();
      queue.pop_back();
      if (basis_set.size() > 64) {
        throw std::logic_error("solve_homological: coupled channel closure too large");
      }
      for (const L2Coupling& cp : D.couplings) {
        if (cur.beta_pow(cp.n) >= 1) {
          MultiIndex nx = cur;
          nx.add_beta(cp.n, -1);
          nx.add_alpha(cp.m, 1);
          visit(nx);
        }
        if (cur.beta_pow(cp.m) >= 1) {
          MultiIndex nx = cur;
          nx.add_beta(cp.m, -1);
          nx.add_alpha(cp.n, 1);
          visit(nx);
        }
        if (cur.alpha_pow(cp.n) >= 1) {
          MultiIndex nx = cur;
          nx.add_alpha(cp.n, -1);
          nx.add_beta(cp.m, 1);
          visit(nx);
        }
        if (cur.alpha_pow(cp.m) >= 1) {
          MultiIndex nx = cur;
          nx.add_alpha(cp.m, -1);
          nx.add_beta(cp.n, 1);
          visit(nx);
        }
      }
      auto cluster_moves = [&](bool is_alpha) {
        const int cnt = is_alpha ? cur.na : cur.nb;
        for (int a = 0; a < cnt; ++a) {
          const Site p = is_alpha ? cur.alpha[a].site() : cur.beta[a].site();
          const int c = D.cluster_of.at(p);
          const int rp = D.slot_in_cluster.at(p);
          for (const Site& q : D.clusters[c]) {
            if (q == p) continue;
            if (std::abs(D.blocks[c](rp, D.slot_in_cluster.at(q))) == 0.0) continue;
            MultiIndex nx = cur;
            if (is_alpha) {
              nx.add_alpha(p, -1);
              nx.add_alpha(q, 1);
            } else {
              nx.add_beta(p, -1);
              nx.add_beta(q, 1);
            }
            visit(nx);
          }
        }
      };
      cluster_moves(true);
      cluster_moves(false);
    }

    std::vector<MultiIndex> basis(basis_set.begin(), basis_set.end());
    const int dim = static_cast<int>(basis.size());
    std::vector<int> kept_rows, solve_rows;
    Eigen::VectorXcd r(dim);
    for (int s = 0; s < dim; ++s) {
      processed.insert(basis[s]);
      r[s] = R.coefficient(basis[s]);
      (kept_shape(D, basis[s]) ? kept_rows : solve_rows).push_back(s);
    }

    if (solve_rows.empty()) {
      for (int s = 0; s < dim; ++s) {
        if (r[s] != Complex{0.0, 0.0}) kept_out[basis[s]] += r[s];
      }
      return;
    }

    const Eigen::MatrixXcd L = detail::assemble_bracket_matrix(D.N, basis);
    const int ns = static_cast<int>(solve_rows.size());
    Eigen::MatrixXcd M(ns, ns);
    Eigen::VectorXcd rs(ns);
    for (int i = 0; i < ns; ++i) {
      rs[i] = r[solve_rows[i]];
      for (int j = 0; j < ns; ++j) M(i, j) = L(solve_rows[i], solve_rows[j]);
    }
    const double det = std::abs(M.determinant());
    stats.min_det = std::min(stats.min_det, det);
    if (det < eff) {
      SmallDivisorReport rep;
      rep.kind = (ns <= 2) ? DivisorKind::BlockEigen : DivisorKind::Tensor4;
      rep.divisor_value = det;
      rep.threshold = eff;
      rep.k = k_of(seed);
      rep.indices = "coupled channel, dim " + std::to_string(ns);
      flags.push_back(std::move(rep));
      return;
    }
    const Eigen::VectorXcd f = M.partialPivLu().solve(iu * rs);
    for (int i = 0; i < ns; ++i) {
      if (f[i] != Complex{0.0, 0.0}) F_out[basis[solve_rows[i]]] += f[i];
      stats.solved_terms += 1;
    }
    for (int t : kept_rows) {
      Complex spill{0.0, 0.0};
      for (int i = 0; i < ns; ++i) spill += L(t, solve_rows[i]) * f[i];
      const Complex val = r[t] + iu * spill;
      if (val != Complex{0.0, 0.0}) kept_out[basis[t]] += val;
    }
    stats.components += 1;
    stats.dense_components += 1;
  };

  for (const Term& term : R.terms()) {
    const MultiIndex& m = term.idx;
    const int z = m.z_degree();
    const int l1 = m.l1();
    if (2 * l1 + z > 2) {
      throw std::invalid_argument(
          "solve_homological: R holds a monomial beyond the quadratic truncation");
    }

    if (z == 0) {
      if (m.k1() == 0) {
        kept_out[m] += term.coeff;
        continue;
      }
      const double d = d_of(m);
      stats.min_scalar_divisor = std::min(stats.min_scalar_divisor, std::abs(d));
      if (std::abs(d) < eff) {
        SmallDivisorReport rep;
        rep.kind = DivisorKind::Scalar;
        rep.divisor_value = std::abs(d);
        rep.threshold = eff;
        rep.k = k_of(m);
        rep.indices = "<k,omega>";
        flags.push_back(std::move(rep));
        continue;
      }
      F_out[m] += iu * term.coeff / d;
      stats.components += 1;
      stats.solved_terms += 1;
      continue;
    }

    if (processed.count(m)) continue;

    if (z == 1) {
      const bool is_alpha = (m.na == 1);
      const Site p = is_alpha ? m.alpha[0].site() : m.beta[0].site();
      const auto sub_it = sb.sub_of.find(p);
      if (sub_it == sb.sub_of.end()) {
        throw std::invalid_argument("solve_homological: R involves an unknown mode");
      }
      const int sub_id = sub_it->second;
      if (sb.coupled[sub_id]) {
        dense_component(m);
        continue;
      }
      const auto& mem = sb.members[sub_id];
      const int n = static_cast<int>(mem.size());
      MultiIndex base = m;
      if (is_alpha) {
        base.add_alpha(p, -1);
      } else {
        base.add_beta(p, -1);
      }
      std::vector<MultiIndex> basis(n);
      Eigen::VectorXcd r(n);
      for (int t = 0; t < n; ++t) {
        MultiIndex mi = base;
        if (is_alpha) {
          mi.add_alpha(mem[t], 1);
        } else {
          mi.add_beta(mem[t], 1);
        }
        basis[t] = mi;
        processed.insert(mi);
        r[t] = R.coefficient(mi);
      }
      const int sign = is_alpha ? -1 : +1;
      const double d = d_of(m);
      const BlockDiagonalization& dg = diag_of(sub_id);
      bool bad = false;
      for (int j = 0; j < dg.lambda.size(); ++j) {
        const double div = d + sign * dg.lambda[j];
        stats.min_block_divisor = std::min(stats.min_block_divisor, std::abs(div));
        if (std::abs(div) < eff) {
          SmallDivisorReport rep;
          rep.kind = DivisorKind::BlockEigen;
          rep.divisor_value = std::abs(div);
          rep.threshold = eff;
          rep.k = k_of(m);
          rep.indices = (sign > 0 ? "+lambda[" : "-lambda[") + std::to_string(j) +
                        "] sub " + std::to_string(sub_id);
          flags.push_back(std::move(rep));
          bad = true;
        }
      }
      if (bad) continue;
      Eigen::MatrixXcd A = detail::sub_matrix(D, sb, sub_id);
      if (!is_alpha) A.transposeInPlace();
      const Eigen::VectorXcd f =
          solve_block_vector(k_of(m), D.omega, A, r, sign, floor);
      for (int t = 0; t < n; ++t) {
        if (f[t] != Complex{0.0, 0.0}) F_out[basis[t]] += f[t];
        stats.solved_terms += 1;
      }
      stats.components += 1;
      continue;
    }

    // z == 2, l == 0: classify the two letters.
    int atot = 0;
    for (int a = 0; a < m.na; ++a) atot += m.alpha[a].pow;
    Site p, q;
    bool p_alpha = true, q_alpha = true;
    if (atot == 2) {
      p = m.alpha[0].site();
      q = (m.na == 2) ? m.alpha[1].site() : p;
    } else if (atot == 0) {
      p = m.beta[0].site();
      q = (m.nb == 2) ? m.beta[1].site() : p;
      p_alpha = q_alpha = false;
    } else {
      p = m.alpha[0].site();
      q = m.beta[0].site();
      q_alpha = false;
    }
    const auto sp = sb.sub_of.find(p), sq = sb.sub_of.find(q);
    if (sp == sb.sub_of.end() || sq == sb.sub_of.end()) {
      throw std::invalid_argument("solve_homological: R involves an unknown mode");
    }
    if (sb.coupled[sp->second] || sb.coupled[sq->second]) {
      dense_component(m);
      continue;
    }
    if (atot == 1 && m.k1() == 0 && D.cluster_of.at(p) == D.cluster_of.at(q)) {
      kept_out[m] += term.coeff;
      continue;
    }

    const auto& mem1 = sb.members[sp->second];
    const auto& mem2 = sb.members[sq->second];
    const int n1 = static_cast<int>(mem1.size());
    const int n2 = static_cast<int>(mem2.size());
    MultiIndex base = m;
    if (p_alpha) {
      base.add_alpha(p, -1);
    } else {
      base.add_beta(p, -1);
    }
    if (q_alpha) {
      base.add_alpha(q, -1);
    } else {
      base.add_beta(q, -1);
    }
    auto make = [&](const Site& u, const Site& v) {
      MultiIndex mi = base;
      if (p_alpha) {
        mi.add_alpha(u, 1);
      } else {
        mi.add_beta(u, 1);
      }
      if (q_alpha) {
        mi.add_alpha(v, 1);
      } else {
        mi.add_beta(v, 1);
      }
      return mi;
    };
    const bool same_sub = (sp->second == sq->second) && (p_alpha == q_alpha);

    Eigen::MatrixXcd C(n1, n2);
    for (int i = 0; i < n1; ++i) {
      for (int j = 0; j < n2; ++j) {
        const MultiIndex mi = make(mem1[i], mem2[j]);
        processed.insert(mi);
        const Complex rv = R.coefficient(mi);
        C(i, j) = (same_sub && i != j) ? 0.5 * rv : rv;
      }
    }

    int s1 = 0, s2 = 0;
    Eigen::MatrixXcd A1 = detail::sub_matrix(D, sb, sp->second);
    Eigen::MatrixXcd A2 = detail::sub_matrix(D, sb, sq->second);
    if (atot == 2) {
      s1 = -1;
      s2 = -1;
      A2.transposeInPlace();
    } else if (atot == 0) {
      s1 = +1;
      s2 = +1;
      A1.transposeInPlace();
    } else {
      s1 = -1;
      s2 = +1;
    }

    const double d = d_of(m);
    const BlockDiagonalization& d1 = diag_of(sp->second);
    const BlockDiagonalization& d2 = diag_of(sq->second);
    bool bad = false;
    for (int i = 0; i < d1.lambda.size(); ++i) {
      for (int j = 0; j < d2.lambda.size(); ++j) {
        const double div = d + s1 * d1.lambda[i] + s2 * d2.lambda[j];
        stats.min_block_divisor = std::min(stats.min_block_divisor, std::abs(div));
        if (std::abs(div) < eff) {
          SmallDivisorReport rep;
          rep.kind = DivisorKind::BlockEigen;
          rep.divisor_value = std::abs(div);
          rep.threshold = eff;
          rep.k = k_of(m);
          rep.indices = std::string(s1 > 0 ? "+" : "-") + "lambdaA[" + std::to_string(i) +
                        "]" + (s2 > 0 ? "+" : "-") + "lambdaB[" + std::to_string(j) + "]";
          flags.push_back(std::move(rep));
          bad = true;
        }
      }
    }
    if (bad) continue;

    const Eigen::MatrixXcd X = solve_sylvester(k_of(m), D.omega, A1, A2, C, s1, s2, floor);
    for (int i = 0; i < n1; ++i) {
      for (int j = 0; j < n2; ++j) {
        Complex fv;
        if (same_sub) {
          if (j < i) continue;  // unordered pair: upper triangle carries the value
          fv = (i == j) ? X(i, j) : X(i, j) + X(j, i);
        } else {
          fv = X(i, j);
        }
        if (fv != Complex{0.0, 0.0}) F_out[make(mem1[i], mem2[j])] += fv;
        stats.solved_terms += 1;
      }
    }
    stats.components += 1;
  }

  if (!flags.empty()) throw SmallDivisorError(std::move(flags));

  HomologicalSolution sol;
  std::vector<Term> ft, kt;
  ft.reserve(F_out.size());
  kt.reserve(kept_out.size());
  for (const auto& [idx, c] : F_out) {
    if (c != Complex{0.0, 0.0}) ft.push_back(Term{idx, c});
  }
  for (const auto& [idx, c] : kept_out) {
    if (c != Complex{0.0, 0.0}) kt.push_back(Term{idx, c});
  }
  sol.F = FourierTaylorSeries::from_terms(D.b, std::move(ft));
  sol.kept = FourierTaylorSeries::from_terms(D.b, std::move(kt));
  stats.kept_terms = static_cast<int>(sol.kept.size());
  sol.stats = stats;
  return sol;
}

}  // namespace kam
