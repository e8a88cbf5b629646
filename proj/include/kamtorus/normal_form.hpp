#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <complex>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <numbers>
#include <set>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "kamtorus/lattice_resonance.hpp"
#include "kamtorus/series.hpp"

namespace kam {

inline constexpr double kPi = std::numbers::pi;
inline constexpr double kInv2PiSq = 1.0 / (2.0 * kPi * kPi);
inline constexpr double kInv4PiSq = 1.0 / (4.0 * kPi * kPi);
inline constexpr double kInv8PiSq = 1.0 / (8.0 * kPi * kPi);

// Amplitude/scaling parameters: b positive amplitudes xi inside the box
// [xi_min, xi_max]^b, and the small scaling parameter eps.
struct Parameters {
  std::vector<double> xi;
  double eps = 0.0;
  double xi_min = 0.0;
  double xi_max = 0.0;

  Parameters() = default;
  Parameters(std::vector<double> xi_, double eps_, double lo, double hi)
      : xi(std::move(xi_)), eps(eps_), xi_min(lo), xi_max(hi) {
    validate();
  }
  Parameters(std::vector<double> xi_, double eps_)
      : xi(std::move(xi_)), eps(eps_) {
    if (xi.empty()) throw std::invalid_argument("Parameters: xi must be nonempty");
    auto [lo, hi] = std::minmax_element(xi.begin(), xi.end());
    xi_min = 0.5 * *lo;
    xi_max = 2.0 * *hi;
    validate();
  }

  int b() const { return static_cast<int>(xi.size()); }

  void validate() const {
    if (xi.empty() || static_cast<int>(xi.size()) > kMaxB) {
      throw std::invalid_argument("Parameters: amplitude dimension out of range");
    }
    if (!(eps > 0.0)) throw std::invalid_argument("Parameters: eps must be positive");
    if (!(xi_min > 0.0) || !(xi_min <= xi_max)) {
      throw std::invalid_argument("Parameters: amplitude box must satisfy 0 < xi_min <= xi_max");
    }
    for (double v : xi) {
      if (!(v >= xi_min) || !(v <= xi_max)) {
        throw std::invalid_argument("Parameters: amplitude outside the configured box");
      }
    }
  }
};

inline int tangential_index(const std::vector<Site>& S, const Site& s) {
  auto it = std::find(S.begin(), S.end(), s);
  if (it == S.end()) throw std::invalid_argument("tangential_index: site is not tangential");
  return static_cast<int>(it - S.begin());
}

// Frequencies of the quadratic part: omega over the tangential sites (in the
// order of `tangential`) and Omega over the retained normal modes.  For a
// first-type resonant pair the two entries are the split branches of the
// rotated 2x2 block; for a second-type pair the entries are the unshifted
// diagonal data consumed by the corresponding coupled block matrix.
struct FrequencyMap {
  std::vector<Site> tangential;
  std::vector<double> omega;
  std::map<Site, double> Omega;
  double a_exponent = 3.0;
};

// Classification of the retained normal modes.  A resonant site whose partner
// falls outside the retained set is listed in `orphaned` and treated as plain:
// its coupling term involves a discarded mode, so the truncated quadratic
// form really is diagonal at that site.
struct ModeClassification {
  std::vector<Site> plain;
  std::vector<ResonantPair> l1;  // first-type pairs, n = lexicographic min
  std::vector<ResonantPair> l2;  // second-type pairs, n = lexicographic min
  std::vector<Site> orphaned;
};

// All lattice sites with |n| <= mode_bound (Euclidean) outside S, sorted.
inline std::vector<Site> galerkin_modes(const std::vector<Site>& S, int mode_bound) {
  if (mode_bound < 0) throw std::invalid_argument("galerkin_modes: mode_bound must be nonnegative");
  const std::int64_t bound2 = static_cast<std::int64_t>(mode_bound) * mode_bound;
  std::vector<Site> out;
  for (std::int64_t x = -mode_bound; x <= mode_bound; ++x) {
    for (std::int64_t y = -mode_bound; y <= mode_bound; ++y) {
      Site n{x, y};
      if (n.norm2() > bound2) continue;
      if (std::find(S.begin(), S.end(), n) != S.end()) continue;
      out.push_back(n);
    }
  }
  std::sort(out.begin(), out.end());
  return out;
}

inline ModeClassification classify_modes(const std::vector<Site>& S,
                                         const std::vector<Site>& modes) {
  ModeClassification cls;
  std::set<Site> in_set(modes.begin(), modes.end());
  for (const Site& n : modes) {
    auto pair = classify_site(n, S);
    if (!pair) {
      cls.plain.push_back(n);
      continue;
    }
    if (!in_set.count(pair->m)) {
      cls.orphaned.push_back(n);
      continue;
    }
    if (pair->m < pair->n) continue;  // recorded from the smaller endpoint
    (pair->kind == LocusKind::FirstType ? cls.l1 : cls.l2).push_back(*pair);
  }
  return cls;
}

// omega_i = eps^{-3} |i|^2 - xi_i / 4pi^2 + sum_j xi_j / 2pi^2 (sum includes
// j = i).
inline std::vector<double> tangential_frequencies(const Parameters& p,
                                                  const std::vector<Site>& S) {
  if (static_cast<int>(S.size()) != p.b()) {
    throw std::invalid_argument("tangential_frequencies: dimension mismatch");
  }
  const double em3 = 1.0 / (p.eps * p.eps * p.eps);
  double sum = 0.0;
  for (double v : p.xi) sum += v;
  std::vector<double> omega(S.size());
  for (std::size_t i = 0; i < S.size(); ++i) {
    omega[i] = em3 * static_cast<double>(S[i].norm2()) - kInv4PiSq * p.xi[i] +
               kInv2PiSq * sum;
  }
  return omega;
}

namespace detail {

inline double omega_plain(const Parameters& p, const Site& n) {
  const double em3 = 1.0 / (p.eps * p.eps * p.eps);
  double sum = 0.0;
  for (double v : p.xi) sum += v;
  return em3 * static_cast<double>(n.norm2()) + kInv2PiSq * sum;
}

// Shifted 2x2 data of a first-type pair after its angle dependence has been
// absorbed into the normal variables: diagonal D_n = Omega_n + omega_i,
// D_m = Omega_m + omega_j, coupling kappa = sqrt(xi_i xi_j) / 2pi^2.
struct L1BlockData {
  double Dn = 0.0, Dm = 0.0, kappa = 0.0;
  double mean() const { return 0.5 * (Dn + Dm); }
  double split() const { return std::hypot(0.5 * (Dn - Dm), kappa); }
};

inline L1BlockData l1_block_data(const Parameters& p, const std::vector<Site>& S,
                                 const std::vector<double>& omega,
                                 const ResonantPair& pair) {
  const int ii = tangential_index(S, pair.i);
  const int jj = tangential_index(S, pair.j);
  L1BlockData d;
  d.Dn = omega_plain(p, pair.n) + omega[ii];
  d.Dm = omega_plain(p, pair.m) + omega[jj];
  d.kappa = kInv2PiSq * std::sqrt(p.xi[ii] * p.xi[jj]);
  return d;
}

}  // namespace detail

// Normal frequencies under the three-way case split: plain and orphaned sites
// get eps^{-3}|n|^2 + sum_j xi_j / 2pi^2; a first-type pair gets the two
// eigenvalue branches of its shifted block (the larger branch on the pair's
// lexicographically smaller site); second-type sites keep the plain value,
// with the coupled dynamics carried by l2_block_matrix.
inline FrequencyMap normal_frequencies(const Parameters& p, const std::vector<Site>& S,
                                       const std::vector<Site>& modes,
                                       const ModeClassification& cls) {
  FrequencyMap fm;
  fm.tangential = S;
  fm.omega = tangential_frequencies(p, S);
  (void)modes;
  for (const Site& n : cls.plain) fm.Omega[n] = detail::omega_plain(p, n);
  for (const Site& n : cls.orphaned) fm.Omega[n] = detail::omega_plain(p, n);
  for (const ResonantPair& pair : cls.l1) {
    const auto d = detail::l1_block_data(p, S, fm.omega, pair);
    fm.Omega[pair.n] = d.mean() + d.split();
    fm.Omega[pair.m] = d.mean() - d.split();
  }
  for (const ResonantPair& pair : cls.l2) {
    fm.Omega[pair.n] = detail::omega_plain(p, pair.n);
    fm.Omega[pair.m] = detail::omega_plain(p, pair.m);
  }
  return fm;
}

inline bool is_partially_hyperbolic(double xi_i, double xi_j) {
  if (!(xi_i > 0.0) || !(xi_j > 0.0)) {
    throw std::invalid_argument("is_partially_hyperbolic: amplitudes must be positive");
  }
  return xi_i * xi_i + xi_j * xi_j < 14.0 * xi_i * xi_j;
}

// The 2x2 coefficient matrix of the linearized (w_n, wbar_m) dynamics of a
// second-type pair, with the tangential indices paired in stored order
// (n with i, m with j):
//   [[Omega_n - omega_i, -a], [a, -(Omega_m - omega_j)]],
// a = sqrt(xi_i xi_j)/2pi^2.  The off-diagonal sign convention corresponds to
// one orientation of the conjugate coordinate; the spectrum is
// orientation-independent.  Eigenvalues are stored ascending (by imaginary
// part, then real part).
struct L2BlockMatrix {
  ResonantPair pair;
  Eigen::Matrix2d entries;
  std::array<Complex, 2> eigenvalues;
};

inline L2BlockMatrix l2_block_matrix(const Parameters& p, const ResonantPair& pair,
                                     const FrequencyMap& fm) {
  if (pair.kind != LocusKind::SecondType) {
    throw std::invalid_argument("l2_block_matrix: pair must be second-type");
  }
  const int ii = tangential_index(fm.tangential, pair.i);
  const int jj = tangential_index(fm.tangential, pair.j);
  const double Dn = detail::omega_plain(p, pair.n) - fm.omega[ii];
  const double Dm = detail::omega_plain(p, pair.m) - fm.omega[jj];
  const double a = kInv2PiSq * std::sqrt(p.xi[ii] * p.xi[jj]);
  L2BlockMatrix blk;
  blk.pair = pair;
  blk.entries << Dn, -a, a, -Dm;
  const double mean = 0.5 * (Dn - Dm);
  const Complex root = std::sqrt(Complex{0.25 * (Dn + Dm) * (Dn + Dm) - a * a, 0.0});
  blk.eigenvalues = {Complex{mean, 0.0} - root, Complex{mean, 0.0} + root};
  return blk;
}

// Closed form for det(A (x) I + sign * I (x) B) with 2x2 blocks A, B:
//   (det A - det B)^2 + det A (tr B)^2 + det B (tr A)^2
//   + sign * (det A + det B) tr A tr B.
inline double kron_det_closed_form(const Eigen::Matrix2d& A, const Eigen::Matrix2d& B,
                                   int sign) {
  if (sign != 1 && sign != -1) {
    throw std::invalid_argument("kron_det_closed_form: sign must be +1 or -1");
  }
  const double dA = A.determinant(), dB = B.determinant();
  const double tA = A.trace(), tB = B.trace();
  return (dA - dB) * (dA - dB) + dA * tB * tB + dB * tA * tA +
         sign * (dA + dB) * tA * tB;
}

// A symplectic change of the normal variables: each listed mode p picks up an
// angle phase exp(i<k_p, theta>) and the listed modes are mixed by the
// orthogonal matrix S (old = S * new within each block).  The actions shift by
// I_j = I^+_j + sum_p k_p[j] |(S w)_p|^2, which keeps the transformation
// symplectic.
struct SymplecticRotation {
  int b = 0;
  std::vector<Site> modes;  // sorted
  std::vector<std::array<int, kMaxB>> k_vectors;
  Eigen::MatrixXd S;

  int slot(const Site& n) const {
    auto it = std::lower_bound(modes.begin(), modes.end(), n);
    if (it == modes.end() || *it != n) return -1;
    return static_cast<int>(it - modes.begin());
  }
};

// Builds the rotation removing the angle dependence of every resonant
// coupling: a first-type pair (n, m; i, j) uses phases (+e_i, +e_j) followed
// by the orthogonal diagonalization of its shifted block (larger eigenvalue
// to the n slot); a second-type pair uses phases (-e_i, -e_j) and no mixing.
inline SymplecticRotation compute_rotation(const Parameters& p, const std::vector<Site>& S,
                                           const ModeClassification& cls) {
  SymplecticRotation rot;
  rot.b = static_cast<int>(S.size());
  for (const ResonantPair& pr : cls.l1) {
    rot.modes.push_back(pr.n);
    rot.modes.push_back(pr.m);
  }
  for (const ResonantPair& pr : cls.l2) {
    rot.modes.push_back(pr.n);
    rot.modes.push_back(pr.m);
  }
  std::sort(rot.modes.begin(), rot.modes.end());
  const int sz = static_cast<int>(rot.modes.size());
  rot.k_vectors.assign(sz, {});
  rot.S = Eigen::MatrixXd::Identity(sz, sz);
  const std::vector<double> omega = tangential_frequencies(p, S);
  for (const ResonantPair& pr : cls.l1) {
    const int sn = rot.slot(pr.n), sm = rot.slot(pr.m);
    const int ii = tangential_index(S, pr.i), jj = tangential_index(S, pr.j);
    rot.k_vectors[sn][ii] += 1;
    rot.k_vectors[sm][jj] += 1;
    const auto d = detail::l1_block_data(p, S, omega, pr);
    const double lam_plus = d.mean() + d.split();
    const double phi = std::atan2(lam_plus - d.Dn, d.kappa);
    const double c = std::cos(phi), s = std::sin(phi);
    rot.S(sn, sn) = c;
    rot.S(sn, sm) = -s;
    rot.S(sm, sn) = s;
    rot.S(sm, sm) = c;
  }
  for (const ResonantPair& pr : cls.l2) {
    const int sn = rot.slot(pr.n), sm = rot.slot(pr.m);
    rot.k_vectors[sn][tangential_index(S, pr.i)] -= 1;
    rot.k_vectors[sm][tangential_index(S, pr.j)] -= 1;
  }
  return rot;
}

namespace detail {

// Precomputed substitution series for a rotation: the old mode (and its
// conjugate) expressed in the new variables, and the quadratic action shifts.
struct RotationExpansion {
  std::vector<FourierTaylorSeries> old_mode;       // v_p   = e^{+i<k_p,th>} (S w)_p
  std::vector<FourierTaylorSeries> old_mode_bar;   // vb_p  = e^{-i<k_p,th>} (S wb)_p
  std::vector<FourierTaylorSeries> action_shift;   // Q_j   = sum_p k_p[j] (Sw)_p (Swb)_p

  RotationExpansion(const SymplecticRotation& rot, int b) {
    const int sz = static_cast<int>(rot.modes.size());
    if (rot.S.rows() != sz || rot.S.cols() != sz || static_cast<int>(rot.k_vectors.size()) != sz) {
      throw std::invalid_argument("symplectic rotation: inconsistent dimensions");
    }
    const Eigen::MatrixXd gram = rot.S.transpose() * rot.S - Eigen::MatrixXd::Identity(sz, sz);
    if (sz > 0 && gram.cwiseAbs().maxCoeff() > 1e-12) {
      throw std::invalid_argument("symplectic rotation: matrix is not orthogonal");
    }
    std::vector<FourierTaylorSeries> row0(sz), row0_bar(sz);
    for (int pidx = 0; pidx < sz; ++pidx) {
      std::vector<Term> a, abar, a0, a0bar;
      MultiIndex kplus{}, kminus{};
      for (int j = 0; j < b; ++j) {
        kplus.k[j] = static_cast<int16_t>(rot.k_vectors[pidx][j]);
        kminus.k[j] = static_cast<int16_t>(-rot.k_vectors[pidx][j]);
      }
      for (int q = 0; q < sz; ++q) {
        const double c = rot.S(pidx, q);
        if (c == 0.0) continue;
        MultiIndex ma = kplus, mabar = kminus, m0{}, m0bar{};
        ma.add_alpha(rot.modes[q], 1);
        m0.add_alpha(rot.modes[q], 1);
        mabar.add_beta(rot.modes[q], 1);
        m0bar.add_beta(rot.modes[q], 1);
        a.push_back(Term{ma, Complex{c, 0.0}});
        abar.push_back(Term{mabar, Complex{c, 0.0}});
        a0.push_back(Term{m0, Complex{c, 0.0}});
        a0bar.push_back(Term{m0bar, Complex{c, 0.0}});
      }
      old_mode.push_back(FourierTaylorSeries::from_terms(b, std::move(a)));
      old_mode_bar.push_back(FourierTaylorSeries::from_terms(b, std::move(abar)));
      row0[pidx] = FourierTaylorSeries::from_terms(b, std::move(a0));
      row0_bar[pidx] = FourierTaylorSeries::from_terms(b, std::move(a0bar));
    }
    for (int j = 0; j < b; ++j) {
      FourierTaylorSeries q(b);
      for (int pidx = 0; pidx < sz; ++pidx) {
        const int kj = rot.k_vectors[pidx][j];
        if (kj == 0) continue;
        q = add(q, multiply(row0[pidx], row0_bar[pidx]),
                Complex{static_cast<double>(kj), 0.0});
      }
      action_shift.push_back(std::move(q));
    }
  }
};

}  // namespace detail

// The old mode variable v_p of a rotated mode, written in the new variables.
inline FourierTaylorSeries rotated_mode_series(const SymplecticRotation& rot, const Site& p) {
  const int sp = rot.slot(p);
  if (sp < 0) throw std::invalid_argument("rotated_mode_series: mode is not rotated");
  return detail::RotationExpansion(rot, rot.b).old_mode[sp];
}

// The old action variable I_j written in the new variables: I^+_j + Q_j.
inline FourierTaylorSeries rotated_action_series(const SymplecticRotation& rot, int j) {
  if (j < 0 || j >= rot.b) throw std::invalid_argument("rotated_action_series: slot out of range");
  detail::RotationExpansion exp(rot, rot.b);
  MultiIndex idx{};
  idx.l[j] = 1;
  return add(FourierTaylorSeries::monomial(rot.b, idx, Complex{1.0, 0.0}),
             exp.action_shift[j]);
}

// Substitutes the rotation into a series: every listed mode factor becomes its
// block image with the angle phase, every action picks up its quadratic shift,
// unlisted modes pass through.  Angle dependence of the resonant couplings
// cancels exactly under the rotation built by compute_rotation.
inline FourierTaylorSeries apply_symplectic_rotation(const SymplecticRotation& rot,
                                                     const FourierTaylorSeries& h,
                                                     const TruncationPolicy& pol = {}) {
  if (rot.b != h.b()) {
    throw std::invalid_argument("apply_symplectic_rotation: dimension mismatch");
  }
  detail::RotationExpansion exp(rot, h.b());
  const int b = h.b();
  SeriesAccumulator acc(b);
  for (const Term& t : h.terms()) {
    // Base monomial: original harmonics, no actions, unrotated modes only.
    MultiIndex base{};
    base.k = t.idx.k;
    bool touched = false;
    std::vector<std::pair<int, int>> alpha_rot, beta_rot;  // (slot, power)
    for (int a = 0; a < t.idx.na; ++a) {
      const Site n = t.idx.alpha[a].site();
      const int sp = rot.slot(n);
      if (sp < 0) {
        base.add_alpha(n, t.idx.alpha[a].pow);
      } else {
        alpha_rot.emplace_back(sp, t.idx.alpha[a].pow);
        touched = true;
      }
    }
    for (int a = 0; a < t.idx.nb; ++a) {
      const Site n = t.idx.beta[a].site();
      const int sp = rot.slot(n);
      if (sp < 0) {
        base.add_beta(n, t.idx.beta[a].pow);
      } else {
        beta_rot.emplace_back(sp, t.idx.beta[a].pow);
        touched = true;
      }
    }
    bool shifted_action = false;
    for (int j = 0; j < b; ++j) {
      if (t.idx.l[j] > 0 && !exp.action_shift.empty() && !exp.action_shift[j].empty()) {
        shifted_action = true;
      }
    }
    if (!touched && !shifted_action) {
      acc.add(t.idx, t.coeff);
      continue;
    }
    FourierTaylorSeries cur = FourierTaylorSeries::monomial(b, base, t.coeff);
    for (int j = 0; j < b; ++j) {
      if (t.idx.l[j] == 0) continue;
      MultiIndex lj{};
      lj.l[j] = 1;
      FourierTaylorSeries action =
          add(FourierTaylorSeries::monomial(b, lj, Complex{1.0, 0.0}),
              exp.action_shift[j]);
      for (int rep = 0; rep < t.idx.l[j]; ++rep) cur = multiply(cur, action, pol);
    }
    for (auto [sp, pw] : alpha_rot) {
      for (int rep = 0; rep < pw; ++rep) cur = multiply(cur, exp.old_mode[sp], pol);
    }
    for (auto [sp, pw] : beta_rot) {
      for (int rep = 0; rep < pw; ++rep) cur = multiply(cur, exp.old_mode_bar[sp], pol);
    }
    for (const Term& u : cur.terms()) acc.add(u.idx, u.coeff);
  }
  return acc.finalize(pol);
}

namespace detail {

// Visits every collected quartic monomial q_a q_b qbar_c qbar_d with momentum
// a + b = c + d, at least two of the four factors tangential (counted with
// multiplicity), and all modes inside the Galerkin ball.  `mult` is the
// number of ordered index quadruples collapsing onto the monomial.
template <typename Fn>
inline void enumerate_quartic(const std::vector<Site>& S, int mode_bound, Fn&& fn) {
  const std::int64_t bound2 = static_cast<std::int64_t>(mode_bound) * mode_bound;
  auto in_S = [&](const Site& s) {
    return std::find(S.begin(), S.end(), s) != S.end();
  };
  auto in_M = [&](const Site& s) { return s.norm2() <= bound2 && !in_S(s); };
  auto emit = [&](Site a1, Site a2, Site b1, Site b2) {
    const int mult = (a1 == a2 ? 1 : 2) * (b1 == b2 ? 1 : 2);
    fn(a1, a2, b1, b2, mult);
  };
  const std::size_t nb = S.size();
  // Four tangential factors.
  for (std::size_t ia = 0; ia < nb; ++ia) {
    for (std::size_t ib = ia; ib < nb; ++ib) {
      for (std::size_t ic = 0; ic < nb; ++ic) {
        const Site d = S[ia] + S[ib] - S[ic];
        if (!in_S(d) || d < S[ic]) continue;
        emit(S[ia], S[ib], S[ic], d);
      }
    }
  }
  // Three tangential factors, the normal one determined by momentum.
  for (std::size_t ia = 0; ia < nb; ++ia) {
    for (std::size_t ic = 0; ic < nb; ++ic) {
      for (std::size_t id = ic; id < nb; ++id) {
        const Site n = S[ic] + S[id] - S[ia];
        if (!in_M(n)) continue;
        emit(S[ia], n, S[ic], S[id]);
      }
    }
  }
  for (std::size_t ia = 0; ia < nb; ++ia) {
    for (std::size_t ib = ia; ib < nb; ++ib) {
      for (std::size_t ic = 0; ic < nb; ++ic) {
        const Site m = S[ia] + S[ib] - S[ic];
        if (!in_M(m)) continue;
        emit(S[ia], S[ib], S[ic], m);
      }
    }
  }
  // Two tangential factors: both unconjugated, both conjugated, or one each.
  auto each_mode = [&](auto&& body) {
    for (std::int64_t x = -mode_bound; x <= mode_bound; ++x) {
      for (std::int64_t y = -mode_bound; y <= mode_bound; ++y) {
        Site n{x, y};
        if (n.norm2() > bound2 || in_S(n)) continue;
        body(n);
      }
    }
  };
  for (std::size_t ia = 0; ia < nb; ++ia) {
    for (std::size_t ib = ia; ib < nb; ++ib) {
      each_mode([&](const Site& n) {
        const Site m = S[ia] + S[ib] - n;
        if (!in_M(m) || m < n) return;
        emit(S[ia], S[ib], n, m);
        emit(n, m, S[ia], S[ib]);
      });
    }
  }
  for (std::size_t ia = 0; ia < nb; ++ia) {
    for (std::size_t ic = 0; ic < nb; ++ic) {
      each_mode([&](const Site& n) {
        const Site m = n + S[ia] - S[ic];
        if (!in_M(m)) return;
        emit(S[ia], n, S[ic], m);
      });
    }
  }
}

inline std::int64_t collected_delta_lambda(const MultiIndex& m) {
  std::int64_t d = 0;
  for (int a = 0; a < m.na; ++a) d += m.alpha[a].site().norm2() * m.alpha[a].pow;
  for (int a = 0; a < m.nb; ++a) d -= m.beta[a].site().norm2() * m.beta[a].pow;
  return d;
}

inline MultiIndex quartic_index(const Site& a1, const Site& a2, const Site& b1,
                                const Site& b2) {
  MultiIndex idx{};
  idx.add_alpha(a1, 1);
  idx.add_alpha(a2, 1);
  idx.add_beta(b1, 1);
  idx.add_beta(b2, 1);
  return idx;
}

// The quartic interaction restricted to monomials with at least two
// tangential factors; collected coefficient mult / 8pi^2.
inline FourierTaylorSeries quartic_hamiltonian(const std::vector<Site>& S, int mode_bound) {
  SeriesAccumulator acc(static_cast<int>(S.size()));
  enumerate_quartic(S, mode_bound, [&](Site a1, Site a2, Site b1, Site b2, int mult) {
    acc.add(quartic_index(a1, a2, b1, b2), Complex{mult * kInv8PiSq, 0.0});
  });
  return acc.finalize();
}

// Diagonal quadratic part sum |n|^2 q_n qbar_n over the tangential sites and
// the Galerkin ball.
inline FourierTaylorSeries h2_series(const std::vector<Site>& S, int mode_bound) {
  SeriesAccumulator acc(static_cast<int>(S.size()));
  auto put = [&](const Site& n) {
    MultiIndex idx{};
    idx.add_alpha(n, 1);
    idx.add_beta(n, 1);
    acc.add(idx, Complex{static_cast<double>(n.norm2()), 0.0});
  };
  for (const Site& s : S) put(s);
  for (const Site& n : galerkin_modes(S, mode_bound)) put(n);
  return acc.finalize();
}

// Poisson bracket for series in the mode variables only (no angles/actions),
// with the product's count of non-tangential factors capped by nd_cap.
inline FourierTaylorSeries quartic_bracket(const FourierTaylorSeries& f,
                                           const FourierTaylorSeries& g,
                                           const std::vector<Site>& S, int nd_cap) {
  const int b = common_b(f, g);
  SeriesAccumulator acc(b);
  const Complex iu{0.0, 1.0};
  auto in_S = [&](const Site& s) {
    return std::find(S.begin(), S.end(), s) != S.end();
  };
  auto normal_degree = [&](const MultiIndex& m) {
    int nd = 0;
    for (int a = 0; a < m.na; ++a)
      if (!in_S(m.alpha[a].site())) nd += m.alpha[a].pow;
    for (int a = 0; a < m.nb; ++a)
      if (!in_S(m.beta[a].site())) nd += m.beta[a].pow;
    return nd;
  };
  std::vector<int> ndf(f.size()), ndg(g.size());
  for (std::size_t i = 0; i < f.size(); ++i) ndf[i] = normal_degree(f.terms()[i].idx);
  for (std::size_t i = 0; i < g.size(); ++i) ndg[i] = normal_degree(g.terms()[i].idx);
  ModeIndex fi(f), gi(g);
  auto pair_off = [&](const std::map<Site, std::vector<uint32_t>>& left,
                      const std::map<Site, std::vector<uint32_t>>& right,
                      bool left_alpha, Complex sign) {
    auto li = left.begin();
    auto ri = right.begin();
    while (li != left.end() && ri != right.end()) {
      if (li->first < ri->first) {
        ++li;
      } else if (ri->first < li->first) {
        ++ri;
      } else {
        const Site n = li->first;
        const int nd_drop = in_S(n) ? 0 : 2;
        for (uint32_t ia : li->second) {
          const Term& tf = f.terms()[ia];
          MultiIndex df = tf.idx;
          const int pf = left_alpha ? df.alpha_pow(n) : df.beta_pow(n);
          if (left_alpha) {
            df.add_alpha(n, -1);
          } else {
            df.add_beta(n, -1);
          }
          const Complex cf = tf.coeff * static_cast<double>(pf);
          for (uint32_t ib : ri->second) {
            if (ndf[ia] + ndg[ib] - nd_drop > nd_cap) continue;
            const Term& tg = g.terms()[ib];
            MultiIndex dg = tg.idx;
            const int pg = left_alpha ? dg.beta_pow(n) : dg.alpha_pow(n);
            if (left_alpha) {
              dg.add_beta(n, -1);
            } else {
              dg.add_alpha(n, -1);
            }
            acc.add_product(df, dg, sign * cf * static_cast<double>(pg) * tg.coeff, {});
          }
        }
        ++li, ++ri;
      }
    }
  };
  pair_off(fi.by_alpha, gi.by_beta, /*left_alpha=*/true, iu);
  pair_off(fi.by_beta, gi.by_alpha, /*left_alpha=*/false, -iu);
  return acc.finalize();
}

// (p choose t) for half-integer upper argument: prod_{u<t} (h - u) / t!.
inline double binomial_half(double h, int t) {
  double num = 1.0, den = 1.0;
  for (int u = 0; u < t; ++u) {
    num *= h - u;
    den *= u + 1;
  }
  return num / den;
}

// Substitutes action-angle coordinates around the amplitudes for the
// tangential modes, rescales, and drops the additive constant:
//   q_i = sqrt(eps^3 xi_i + eps^5 I_i) e^{-i theta_i},  w -> eps^{5/2} w,
//   H -> eps^{-8} H.
// The square roots are expanded around xi with total action degree capped by
// l_cap.
inline FourierTaylorSeries to_action_angle(const FourierTaylorSeries& g,
                                           const Parameters& p, const std::vector<Site>& S,
                                           int l_cap, const TruncationPolicy& pol = {}) {
  if (g.b() != static_cast<int>(S.size()) || p.b() != g.b()) {
    throw std::invalid_argument("to_action_angle: dimension mismatch");
  }
  const int b = g.b();
  SeriesAccumulator acc(b);
  std::array<int, kMaxB> ta{}, tb{};
  for (const Term& t : g.terms()) {
    int sum_p = 0;
    for (int j = 0; j < b; ++j) {
      ta[j] = t.idx.alpha_pow(S[j]);
      tb[j] = t.idx.beta_pow(S[j]);
      sum_p += ta[j] + tb[j];
    }
    MultiIndex base{};
    base.k = t.idx.k;
    base.l = t.idx.l;
    int nz = 0;
    for (int a = 0; a < t.idx.na; ++a) {
      const Site n = t.idx.alpha[a].site();
      if (std::find(S.begin(), S.end(), n) == S.end()) {
        base.add_alpha(n, t.idx.alpha[a].pow);
        nz += t.idx.alpha[a].pow;
      }
    }
    for (int a = 0; a < t.idx.nb; ++a) {
      const Site n = t.idx.beta[a].site();
      if (std::find(S.begin(), S.end(), n) == S.end()) {
        base.add_beta(n, t.idx.beta[a].pow);
        nz += t.idx.beta[a].pow;
      }
    }
    const int epow = (3 * sum_p + 5 * nz) / 2 - 8;
    double c0 = std::pow(p.eps, static_cast<double>(epow));
    for (int j = 0; j < b; ++j) {
      base.k[j] = static_cast<int16_t>(base.k[j] + tb[j] - ta[j]);
      c0 *= std::pow(p.xi[j], 0.5 * (ta[j] + tb[j]));
    }
    const Complex cbase = t.coeff * c0;
    const double eps2 = p.eps * p.eps;
    // Expand prod_j (1 + eps^2 I_j / xi_j)^{(ta_j+tb_j)/2} to action degree
    // l_cap.
    std::function<void(int, int, MultiIndex, double)> walk =
        [&](int j, int used, MultiIndex idx, double factor) {
          if (j == b) {
            if (!idx.is_constant()) acc.add(idx, cbase * factor);
            return;
          }
          const double half = 0.5 * (ta[j] + tb[j]);
          for (int tj = 0; used + tj <= l_cap; ++tj) {
            const double bin = binomial_half(half, tj);
            if (bin == 0.0) break;  // integer exponent exhausted
            MultiIndex next = idx;
            next.l[j] = static_cast<int16_t>(next.l[j] + tj);
            walk(j + 1, used + tj,
                 next, factor * bin * std::pow(eps2 / p.xi[j], tj));
          }
        };
    walk(0, 0, base, 1.0);
  }
  return acc.finalize(pol);
}

}  // namespace detail

// Generator of the quartic averaging step: for every collected nonresonant
// monomial (Delta lambda != 0) of the quartic interaction, coefficient
// -i * mult / (8 pi^2 Delta lambda).  Applying its time-one flow cancels the
// nonresonant quartic terms exactly.
inline FourierTaylorSeries birkhoff_generator(const std::vector<Site>& S, int mode_bound) {
  detail::validate_tangential_set(S);
  for (const Site& s : S) {
    if (s.norm2() > static_cast<std::int64_t>(mode_bound) * mode_bound) {
      throw std::invalid_argument("birkhoff_generator: mode_bound excludes a tangential site");
    }
  }
  SeriesAccumulator acc(static_cast<int>(S.size()));
  detail::enumerate_quartic(S, mode_bound, [&](Site a1, Site a2, Site b1, Site b2, int mult) {
    const std::int64_t dl =
        a1.norm2() + a2.norm2() - b1.norm2() - b2.norm2();
    if (dl == 0) return;
    acc.add(detail::quartic_index(a1, a2, b1, b2),
            Complex{0.0, -mult * kInv8PiSq / static_cast<double>(dl)});
  });
  return acc.finalize();
}

struct BCoefficient {
  Site n, m;      // second-type pair, n < m
  double value;   // sqrt(xi_i xi_j) / 2pi^2
};

// Everything the iteration needs to know about the prepared quadratic part.
struct NormalFormState {
  Parameters params;
  std::vector<Site> tangential;
  std::vector<Site> modes;
  ModeClassification classes;
  FrequencyMap freq;
  std::vector<L2BlockMatrix> l2_blocks;
  SymplecticRotation rotation;
  std::vector<BCoefficient> B;
  FourierTaylorSeries N;  // kept part: <omega, I> + quadratic diagonal + couplings
};

struct NormalFormOptions {
  int normal_degree_cap = 2;   // cap on non-tangential factors in degree-6 output
  int action_degree_cap = 2;   // cap on the total action degree
  double drop_tol_rel = 1e-16; // relative coefficient floor after assembly
};

// Pipeline self-checks, all expected at rounding level.
struct NormalFormDiagnostics {
  double omega_residual = 0.0;       // extracted action coefficients vs formula
  double Omega_residual = 0.0;       // extracted quadratic diagonal vs formula
  double B_residual = 0.0;           // extracted couplings vs formula
  double coupling_residual = 0.0;    // resonant coupling terms not removed
  double h2_cancellation_residual = 0.0;  // {H2, F} + (nonresonant quartic)
  std::size_t quartic_terms = 0;
  std::size_t remainder_terms = 0;
};

struct NormalFormResult {
  NormalFormState state;
  FourierTaylorSeries P;
  NormalFormDiagnostics diagnostics;
};

// Builds the prepared form: quartic averaging (exact cancellation of the
// nonresonant quartic), action-angle reduction with scaling, and the
// symplectic rotation removing the resonant couplings' angle dependence.
// Returns the kept quadratic data plus the remainder P, with rounding-level
// self-check residuals.
inline NormalFormResult build_normal_form(const Parameters& p, const std::vector<Site>& S,
                                          int mode_bound, int degree_bound,
                                          const NormalFormOptions& opts = {}) {
  if (static_cast<int>(S.size()) != p.b()) {
    throw std::invalid_argument("build_normal_form: dimension mismatch");
  }
  if (degree_bound != 4 && degree_bound != 6) {
    throw std::invalid_argument("build_normal_form: degree_bound must be 4 or 6");
  }
  const AdmissibilityReport adm = detail::exact_admissible(S);
  if (!adm.admissible()) {
    throw std::invalid_argument("build_normal_form: tangential set is not admissible");
  }

  NormalFormResult res;
  NormalFormState& st = res.state;
  st.params = p;
  st.tangential = S;
  st.modes = galerkin_modes(S, mode_bound);
  st.classes = classify_modes(S, st.modes);
  st.freq = normal_frequencies(p, S, st.modes, st.classes);
  for (const ResonantPair& pr : st.classes.l2) {
    st.l2_blocks.push_back(l2_block_matrix(p, pr, st.freq));
    const int ii = tangential_index(S, pr.i), jj = tangential_index(S, pr.j);
    st.B.push_back(BCoefficient{pr.n, pr.m, kInv2PiSq * std::sqrt(p.xi[ii] * p.xi[jj])});
  }
  st.rotation = compute_rotation(p, S, st.classes);

  // Quartic stage.
  const FourierTaylorSeries g4 = detail::quartic_hamiltonian(S, mode_bound);
  res.diagnostics.quartic_terms = g4.size();
  std::vector<Term> res_terms, nr_terms;
  for (const Term& t : g4.terms()) {
    (detail::collected_delta_lambda(t.idx) == 0 ? res_terms : nr_terms).push_back(t);
  }
  const int b = p.b();
  FourierTaylorSeries g4res = FourierTaylorSeries::from_terms(b, std::move(res_terms));
  FourierTaylorSeries g4nr = FourierTaylorSeries::from_terms(b, std::move(nr_terms));
  const FourierTaylorSeries h2 = detail::h2_series(S, mode_bound);
  const FourierTaylorSeries gen = birkhoff_generator(S, mode_bound);
  res.diagnostics.h2_cancellation_residual = max_coeff_difference(
      detail::quartic_bracket(h2, gen, S, std::numeric_limits<int>::max()),
      scale(g4nr, Complex{-1.0, 0.0}));

  FourierTaylorSeries h_q = add(h2, g4res);
  if (degree_bound >= 6) {
    const FourierTaylorSeries b1 =
        detail::quartic_bracket(g4res, gen, S, opts.normal_degree_cap);
    const FourierTaylorSeries b2 =
        detail::quartic_bracket(g4nr, gen, S, opts.normal_degree_cap);
    h_q = add(add(h_q, b1), b2, Complex{0.5, 0.0});
  }

  TruncationPolicy pol;
  pol.l_cap = opts.action_degree_cap;
  pol.z_cap = opts.normal_degree_cap;
  FourierTaylorSeries h_pre = detail::to_action_angle(h_q, p, S, opts.action_degree_cap, pol);
  TruncationPolicy final_pol = pol;
  final_pol.drop_tol_rel = opts.drop_tol_rel;
  FourierTaylorSeries h_rot = apply_symplectic_rotation(st.rotation, h_pre, final_pol);

  // The kept part N is built from the contract formulas; the remainder is
  // P = H_rot - N.  The second-type diagonal entries carry the action-shift
  // omega offsets of the rotation.
  std::map<Site, double> expected_diag = st.freq.Omega;
  for (const L2BlockMatrix& blk : st.l2_blocks) {
    expected_diag[blk.pair.n] = blk.entries(0, 0);
    expected_diag[blk.pair.m] = -blk.entries(1, 1);
  }
  std::vector<Term> n_terms;
  for (int j = 0; j < b; ++j) {
    MultiIndex idx{};
    idx.l[j] = 1;
    n_terms.push_back(Term{idx, Complex{st.freq.omega[j], 0.0}});
  }
  for (const auto& [site, val] : expected_diag) {
    MultiIndex idx{};
    idx.add_alpha(site, 1);
    idx.add_beta(site, 1);
    n_terms.push_back(Term{idx, Complex{val, 0.0}});
  }
  for (const BCoefficient& bc : st.B) {
    MultiIndex lo{}, up{};
    lo.add_beta(bc.n, 1);
    lo.add_beta(bc.m, 1);
    up.add_alpha(bc.n, 1);
    up.add_alpha(bc.m, 1);
    n_terms.push_back(Term{lo, Complex{bc.value, 0.0}});
    n_terms.push_back(Term{up, Complex{bc.value, 0.0}});
  }
  st.N = FourierTaylorSeries::from_terms(b, std::move(n_terms));
  res.P = sub(h_rot, st.N);
  res.diagnostics.remainder_terms = res.P.size();

  // Diagnostics: read the kept slots back out of the assembled series and
  // compare with the formulas.  With degree_bound 4 the differences are pure
  // rounding; with degree_bound 6 they also contain the genuine resonant
  // corrections of the averaged sextic terms (order eps^3 relative), which
  // stay in P.
  std::set<std::pair<Site, Site>> l1_pairs, l2_pairs;
  for (const ResonantPair& pr : st.classes.l1) l1_pairs.insert({pr.n, pr.m});
  for (const ResonantPair& pr : st.classes.l2) l2_pairs.insert({pr.n, pr.m});
  std::map<int, Complex> omega_hat;
  std::map<Site, Complex> diag_hat;
  std::map<std::pair<Site, Site>, Complex> b_hat_low, b_hat_up;  // wbar wbar / w w
  for (const Term& t : h_rot.terms()) {
    const MultiIndex& m = t.idx;
    const int z = m.z_degree();
    if (m.k1() == 0 && z == 0 && m.l1() == 1) {
      for (int j = 0; j < b; ++j)
        if (m.l[j] == 1) omega_hat[j] = t.coeff;
      continue;
    }
    if (m.k1() != 0 || m.l1() != 0 || z != 2) continue;
    if (m.na == 1 && m.nb == 1 && m.alpha[0].site() == m.beta[0].site()) {
      diag_hat[m.alpha[0].site()] = t.coeff;
      continue;
    }
    if (m.na == 1 && m.nb == 1) {
      // Mixed terms over a first-type pair must be removed by the rotation.
      const Site s1 = m.alpha[0].site(), s2 = m.beta[0].site();
      if (l1_pairs.count({std::min(s1, s2), std::max(s1, s2)})) {
        res.diagnostics.coupling_residual =
            std::max(res.diagnostics.coupling_residual, std::abs(t.coeff));
      }
      continue;
    }
    if (m.na == 0 && m.nb >= 1) {
      const Site s1 = m.beta[0].site();
      const Site s2 = (m.nb == 2) ? m.beta[1].site() : s1;
      if (l2_pairs.count({std::min(s1, s2), std::max(s1, s2)})) {
        b_hat_low[{std::min(s1, s2), std::max(s1, s2)}] = t.coeff;
      }
    } else if (m.nb == 0 && m.na >= 1) {
      const Site s1 = m.alpha[0].site();
      const Site s2 = (m.na == 2) ? m.alpha[1].site() : s1;
      if (l2_pairs.count({std::min(s1, s2), std::max(s1, s2)})) {
        b_hat_up[{std::min(s1, s2), std::max(s1, s2)}] = t.coeff;
      }
    }
  }
  auto& d = res.diagnostics;
  for (int j = 0; j < b; ++j) {
    const Complex got = omega_hat.count(j) ? omega_hat[j] : Complex{};
    d.omega_residual = std::max(d.omega_residual, std::abs(got - st.freq.omega[j]));
  }
  for (const auto& [site, expect] : expected_diag) {
    const Complex got = diag_hat.count(site) ? diag_hat[site] : Complex{};
    d.Omega_residual = std::max(d.Omega_residual, std::abs(got - expect));
  }
  for (const BCoefficient& bc : st.B) {
    const auto key = std::make_pair(bc.n, bc.m);
    const Complex lo = b_hat_low.count(key) ? b_hat_low[key] : Complex{};
    const Complex up = b_hat_up.count(key) ? b_hat_up[key] : Complex{};
    d.B_residual = std::max({d.B_residual, std::abs(lo - bc.value), std::abs(up - bc.value)});
  }
  return res;
}

// Verification data for the twist and smoothness assumptions: the amplitude
// Jacobian of the tangential frequencies (closed form (2J - I)/4pi^2, J the
// all-ones matrix), its determinant both numerically and in closed form
// (2b-1)(-1)^{b-1}/(4pi^2)^b, and a sampled bound on the xi-derivatives (up to
// fourth order) of Omega_n - eps^{-3} * (leading integer part).
struct A1A2Report {
  Eigen::MatrixXd jacobian;
  double det_numeric = 0.0;
  double det_closed_form = 0.0;
  double jacobian_fd_residual = 0.0;
  double L_bound = 0.0;
  double a_exponent = 3.0;
  double fd_step = 0.0;
  std::map<Site, double> Omega_tilde;  // at the base amplitudes
};

inline A1A2Report check_A1_A2(const Parameters& p, const std::vector<Site>& S,
                              int sample_mode_bound = 4, double fd_step = 0.01) {
  const int b = p.b();
  A1A2Report rep;
  rep.fd_step = fd_step;
  rep.jacobian = (2.0 * Eigen::MatrixXd::Ones(b, b) - Eigen::MatrixXd::Identity(b, b)) *
                 kInv4PiSq;
  rep.det_numeric = rep.jacobian.determinant();
  rep.det_closed_form = (2.0 * b - 1.0) * ((b % 2 == 1) ? 1.0 : -1.0) /
                        std::pow(4.0 * kPi * kPi, b);

  // Finite-difference cross-check of the Jacobian against the formula.
  auto omega_at = [&](const std::vector<double>& xi) {
    Parameters q(xi, p.eps, 1e-12, 1e12);
    return tangential_frequencies(q, S);
  };
  for (int j = 0; j < b; ++j) {
    std::vector<double> hi = p.xi, lo = p.xi;
    hi[j] += fd_step;
    lo[j] -= fd_step;
    const auto oh = omega_at(hi), ol = omega_at(lo);
    for (int i = 0; i < b; ++i) {
      const double fd = (oh[i] - ol[i]) / (2.0 * fd_step);
      rep.jacobian_fd_residual =
          std::max(rep.jacobian_fd_residual, std::abs(fd - rep.jacobian(i, j)));
    }
  }

  // Sampled bound on the xi-derivatives of the bounded frequency parts.
  const std::vector<Site> modes = galerkin_modes(S, sample_mode_bound);
  const ModeClassification cls = classify_modes(S, modes);
  const double em3 = 1.0 / (p.eps * p.eps * p.eps);
  std::map<Site, double> lead;  // eps^{-3} coefficient per site
  for (const Site& n : cls.plain) lead[n] = static_cast<double>(n.norm2());
  for (const Site& n : cls.orphaned) lead[n] = static_cast<double>(n.norm2());
  for (const ResonantPair& pr : cls.l1) {
    const double shared = static_cast<double>(pr.n.norm2() + pr.i.norm2());
    lead[pr.n] = shared;
    lead[pr.m] = shared;
  }
  for (const ResonantPair& pr : cls.l2) {
    lead[pr.n] = static_cast<double>(pr.n.norm2());
    lead[pr.m] = static_cast<double>(pr.m.norm2());
  }
  auto tilde = [&](const std::vector<double>& xi) {
    Parameters q(xi, p.eps, 1e-12, 1e12);
    FrequencyMap fm = normal_frequencies(q, S, modes, cls);
    std::map<Site, double> out;
    for (const auto& [site, val] : fm.Omega) out[site] = val - em3 * lead[site];
    return out;
  };
  rep.Omega_tilde = tilde(p.xi);
  const double h = fd_step;
  auto shifted = [&](int j, int steps) {
    std::vector<double> xi = p.xi;
    xi[j] += steps * h;
    return tilde(xi);
  };
  for (const auto& [site, base] : rep.Omega_tilde) {
    rep.L_bound = std::max(rep.L_bound, std::abs(base));
  }
  for (int j = 0; j < b; ++j) {
    const auto f1 = shifted(j, 1), f2 = shifted(j, 2);
    const auto fm1 = shifted(j, -1), fm2 = shifted(j, -2);
    for (const auto& [site, f0] : rep.Omega_tilde) {
      const double d1 = (f1.at(site) - fm1.at(site)) / (2 * h);
      const double d2 = (f1.at(site) - 2 * f0 + fm1.at(site)) / (h * h);
      const double d3 = (f2.at(site) - 2 * f1.at(site) + 2 * fm1.at(site) - fm2.at(site)) /
                        (2 * h * h * h);
      const double d4 = (f2.at(site) - 4 * f1.at(site) + 6 * f0 - 4 * fm1.at(site) +
                         fm2.at(site)) /
                        (h * h * h * h);
      rep.L_bound = std::max({rep.L_bound, std::abs(d1), std::abs(d2), std::abs(d3),
                              std::abs(d4)});
    }
  }
  for (int i = 0; i < b; ++i) {
    for (int j = i + 1; j < b; ++j) {
      auto at = [&](int si, int sj) {
        std::vector<double> xi = p.xi;
        xi[i] += si * h;
        xi[j] += sj * h;
        return tilde(xi);
      };
      const auto pp = at(1, 1), pm = at(1, -1), mp = at(-1, 1), mm = at(-1, -1);
      for (const auto& [site, f0] : rep.Omega_tilde) {
        const double mixed =
            (pp.at(site) - pm.at(site) - mp.at(site) + mm.at(site)) / (4 * h * h);
        rep.L_bound = std::max(rep.L_bound, std::abs(mixed));
      }
    }
  }
  return rep;
}

}  // namespace kam
