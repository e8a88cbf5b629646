#pragma once

// Galerkin-truncated KAM iteration on the prepared normal form: the step-size
// schedule, one full iteration step (truncate, solve the homological equation,
// absorb the kept averages, Lie-transform the perturbation, re-verify the
// frequency-shift and divisor bounds), the multi-step driver with contraction
// diagnostics, Toeplitz-Lipschitz sampling of the quadratic coefficients along
// lattice lines, extraction of the approximate invariant torus, numeric
// Hamiltonian flows for conjugacy spot checks, and a split-step pseudospectral
// integration of the truncated mode ODE that cross-validates the extracted
// torus frequencies.

#include <algorithm>
#include <array>
#include <cmath>
#include <complex>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <unsupported/Eigen/FFT>

#include "kamtorus/homological_solver.hpp"
#include "kamtorus/json_util.hpp"
#include "kamtorus/multiindex.hpp"
#include "kamtorus/normal_form.hpp"
#include "kamtorus/series.hpp"
#include "kamtorus/site.hpp"

namespace kam {

// ---------------------------------------------------------------------------
// Step-size schedule
// ---------------------------------------------------------------------------

// Base quantities fixed for a whole run.  Zero means "use the default rule":
// gamma defaults to eps0^{1/50}, rho0 to K0^{-(1+3 eps_exp)}, Delta0 to
// K0^3/27 (so that Delta_nu = K_{nu-1}^3 extends to nu = 0 with K_{-1} =
// K0/3).  The envelope constants c_const/c_exp parameterize the one-step
// bound eps_+ <= c gamma^{-5} (r - r_+)^{-c} K^{5(tau+1)} eps^{4/3}; they are
// calibrated once against runs and frozen in fixtures.
struct ScheduleBase {
  double r = 0.5;
  double s = 0.1;
  double eps0 = 1e-4;
  double K0 = 5.0;
  double gamma = 0.0;
  double tau = 2.0;
  double rho0 = 0.0;
  double Delta0 = 0.0;
  double L0 = 0.0;
  double eps_exp = 0.05;
  double c_const = 1.0;
  double c_exp = 2.0;
};

// Sizes attached to one iteration step.
struct StepSizes {
  int nu = 0;
  double r = 0.0;
  double s = 0.0;
  double eps = 0.0;
  double K = 0.0;
  double rho = 0.0;
  double Delta = 0.0;
  double gamma = 0.0;
  double tau = 0.0;
  double L = 0.0;

  double eta() const { return std::cbrt(eps); }
  WeightedDomain domain() const { return WeightedDomain(r, s, rho); }
};

inline double default_gamma(double eps0) { return std::pow(eps0, 1.0 / 50.0); }

inline double rho_of_K(double K, double eps_exp) {
  return std::pow(K, -(1.0 + 3.0 * eps_exp));
}

// Analyticity radius at step nu: r_0 = r and, for nu >= 1,
// r_nu = r (1 - sum_{i=2}^{nu+1} 2^{-i}) = r (1/2 + 2^{-(nu+1)}).
inline double radius_at(double r, int nu) {
  if (nu <= 0) return r;
  return r * (0.5 + std::pow(2.0, -(nu + 1.0)));
}

namespace detail {

inline ScheduleBase resolve_base(ScheduleBase base) {
  if (base.r <= 0 || base.s <= 0 || base.eps0 <= 0 || base.K0 < 1.0 || base.tau < 0) {
    throw std::invalid_argument("schedule: base sizes must be positive (K0 >= 1)");
  }
  if (base.gamma == 0.0) base.gamma = default_gamma(base.eps0);
  if (base.rho0 == 0.0) base.rho0 = rho_of_K(base.K0, base.eps_exp);
  if (base.Delta0 == 0.0) base.Delta0 = std::pow(base.K0, 3.0) / 27.0;
  return base;
}

}  // namespace detail

// Envelope sequence of the iteration: the exact recursions
//   K_{nu+1} = 3 K_nu,          rho_nu = K_nu^{-(1+3 eps_exp)},
//   Delta_{nu+1} = K_nu^3,      s_{nu+1} = 2^{-2} eps_nu^{1/3} s_nu,
//   L_{nu+1} = L_nu + eps_nu,
//   eps_{nu+1} = c gamma^{-5} (r_nu - r_{nu+1})^{-c'} K_nu^{5(tau+1)} eps_nu^{4/3},
// with eps following the ENVELOPE recursion from eps0 (a run replaces it by
// the measured perturbation norm; see kam_step).  The envelope diverges
// unless eps0 is far smaller than any desk value -- that is a property of the
// bound, not a defect, and the driver never feeds the envelope back into a
// run.
inline StepSizes schedule(int nu, const ScheduleBase& base_in) {
  if (nu < 0) throw std::invalid_argument("schedule: nu must be nonnegative");
  const ScheduleBase base = detail::resolve_base(base_in);
  StepSizes st;
  st.nu = 0;
  st.r = base.r;
  st.s = base.s;
  st.eps = base.eps0;
  st.K = base.K0;
  st.rho = base.rho0;
  st.Delta = base.Delta0;
  st.gamma = base.gamma;
  st.tau = base.tau;
  st.L = base.L0;
  for (int v = 0; v < nu; ++v) {
    const double r_next = radius_at(base.r, v + 1);
    const double dr = st.r - r_next;
    const double eps_next = base.c_const * std::pow(base.gamma, -5.0) *
                            std::pow(dr, -base.c_exp) *
                            std::pow(st.K, 5.0 * (base.tau + 1.0)) *
                            std::pow(st.eps, 4.0 / 3.0);
    st.s *= 0.25 * st.eta();
    st.L += st.eps;
    st.Delta = std::pow(st.K, 3.0);
    st.K *= 3.0;
    st.rho = rho_of_K(st.K, base.eps_exp);
    st.r = r_next;
    st.eps = eps_next;
    st.nu = v + 1;
  }
  return st;
}

// Advances the non-eps sizes one step using the measured eps of the current
// step (the run-time counterpart of `schedule`); the new eps is filled in by
// the caller once the transformed perturbation has been measured.
inline StepSizes next_sizes(const StepSizes& cur, const ScheduleBase& base_in) {
  const ScheduleBase base = detail::resolve_base(base_in);
  StepSizes nxt = cur;
  nxt.nu = cur.nu + 1;
  nxt.r = radius_at(base.r, cur.nu + 1);
  nxt.s = 0.25 * cur.eta() * cur.s;
  nxt.Delta = std::pow(cur.K, 3.0);
  nxt.K = 3.0 * cur.K;
  nxt.rho = rho_of_K(nxt.K, base.eps_exp);
  nxt.L = cur.L + cur.eps;
  nxt.eps = 0.0;
  return nxt;
}

// ---------------------------------------------------------------------------
// Engine state
// ---------------------------------------------------------------------------

struct EngineOptions {
  int lie_order = 4;        // brackets kept in the Lie series; tail majorant reported
  int mode_bound = 8;       // Galerkin lattice ball |n| <= mode_bound
  int degree_bound = 4;     // 4 (quartic seed) or 6 (collected sextic seed)
  int action_degree_cap = 2;
  double drop_tol_rel = 1e-16;
};

// Full iteration state.  `form.N` and `P` are the live decomposition; the
// other NormalFormState members describe the step-0 build (classification,
// rotation, initial blocks) and are not rewritten by the iteration, which
// re-extracts the reduced data from `form.N` whenever it needs it.
struct KamState {
  int nu = 0;
  StepSizes sizes;
  ScheduleBase base;  // resolved: gamma/rho0/Delta0 defaults already applied
  EngineOptions opts;
  NormalFormState form;
  FourierTaylorSeries P;
  std::vector<FourierTaylorSeries> generators;  // chronological step generators
  double excluded_xi_fraction = 0.0;
};

namespace detail {

inline TruncationPolicy engine_policy(const EngineOptions& opts) {
  TruncationPolicy pol;
  pol.l_cap = std::max(opts.degree_bound / 2, opts.action_degree_cap);
  pol.z_cap = opts.degree_bound;
  pol.drop_tol_rel = opts.drop_tol_rel;
  return pol;
}

}  // namespace detail

// Builds the step-0 state: prepared normal form, measured initial
// perturbation size, and resolved schedule constants (the default gamma is
// taken from the MEASURED eps0, not the configured target).
inline KamState make_initial_state(const Parameters& p, const std::vector<Site>& S,
                                   const ScheduleBase& base_in,
                                   const EngineOptions& opts = {}) {
  NormalFormOptions nf_opts;
  nf_opts.action_degree_cap = opts.action_degree_cap;
  nf_opts.drop_tol_rel = opts.drop_tol_rel;
  const NormalFormResult res =
      build_normal_form(p, S, opts.mode_bound, opts.degree_bound, nf_opts);

  KamState st;
  st.nu = 0;
  st.opts = opts;
  st.form = res.state;
  st.P = res.P;

  ScheduleBase base = base_in;
  const WeightedDomain dom0(base.r, base.s,
                            base.rho0 > 0 ? base.rho0 : rho_of_K(base.K0, base.eps_exp));
  const double eps0 = vector_field_norm(st.P, dom0);
  if (base.gamma == 0.0 && eps0 > 0.0) base.gamma = default_gamma(eps0);
  st.base = detail::resolve_base(base);

  st.sizes = schedule(0, st.base);
  st.sizes.eps = eps0;
  return st;
}

// ---------------------------------------------------------------------------
// Divisor survey
// ---------------------------------------------------------------------------

// One pass over every divisor class of the reduced form at a fixed harmonic
// range: the Fourier scalar <k,omega> (k != 0), single Hermitian-block
// eigenvalues <k,omega> +- lambda, eigenvalue pairs with all sign
// combinations, and the 4x4 creation-pair determinants
// det(<k,omega> I +- A_n (x) I_2 +- I_2 (x) A_n') over couplings (k != 0).
// At k = 0 the in-cluster eigenvalue differences are the directions the
// iteration keeps, so they are not divisors and are skipped.
struct DivisorSurvey {
  std::vector<SmallDivisorReport> flagged;
  double min_scalar = std::numeric_limits<double>::infinity();
  double min_eigen = std::numeric_limits<double>::infinity();
  double min_det = std::numeric_limits<double>::infinity();
  long checked = 0;
};

// Channel matrix of one creation pair, in the convention of the reduced form:
// [[D_n, -a], [a, -D_m]] with D the stored diagonal and a the coupling value.
inline Eigen::Matrix2d coupling_matrix(const HomologicalData& D, const L2Coupling& c) {
  const double a = c.value.real();
  Eigen::Matrix2d A;
  A << D.diag(c.n), -a, a, -D.diag(c.m);
  return A;
}

inline DivisorSurvey survey_divisors(const HomologicalData& D, double gamma,
                                     double K_enum, double K_thr, double tau,
                                     bool same_pair_dets = true) {
  if (K_enum < 1.0 || K_thr < 1.0) {
    throw std::invalid_argument("survey_divisors: cutoffs must be at least 1");
  }
  DivisorSurvey out;
  const double thr = gamma * std::pow(K_thr, -tau);
  const int b = D.b;
  const int Ki = static_cast<int>(std::floor(K_enum));

  // Eigenvalues of the non-coupled sub-blocks, tagged by cluster.
  const detail::SubBlocks sb = detail::split_sub_blocks(D);
  std::vector<double> lambdas;
  std::vector<int> lambda_cluster;
  for (std::size_t id = 0; id < sb.members.size(); ++id) {
    if (sb.coupled[id]) continue;
    const BlockDiagonalization d =
        diagonalize_block(detail::sub_matrix(D, sb, static_cast<int>(id)));
    for (int i = 0; i < d.lambda.size(); ++i) {
      lambdas.push_back(d.lambda(i));
      lambda_cluster.push_back(sb.cluster_of_sub[id]);
    }
  }
  std::vector<Eigen::Matrix2d> As;
  As.reserve(D.couplings.size());
  for (const L2Coupling& c : D.couplings) As.push_back(coupling_matrix(D, c));

  auto note = [&](double& slot, double v) { slot = std::min(slot, std::abs(v)); };
  auto push = [&](DivisorKind kind, double value, const std::vector<int>& k,
                  std::string idx) {
    ++out.checked;
    if (std::abs(value) < thr) {
      SmallDivisorReport rep;
      rep.kind = kind;
      rep.divisor_value = std::abs(value);
      rep.threshold = thr;
      rep.k = k;
      rep.indices = std::move(idx);
      out.flagged.push_back(std::move(rep));
    }
  };

  // k = 0: eigenvalue classes only, cluster-aware.
  {
    const std::vector<int> k0(b, 0);
    const int n = static_cast<int>(lambdas.size());
    for (int j = 0; j < n; ++j) {
      note(out.min_eigen, lambdas[j]);
      push(DivisorKind::BlockEigen, lambdas[j], k0, "+lambda[" + std::to_string(j) + "]");
    }
    for (int i = 0; i < n; ++i) {
      for (int j = i; j < n; ++j) {
        note(out.min_eigen, lambdas[i] + lambdas[j]);
        push(DivisorKind::BlockEigen, lambdas[i] + lambdas[j], k0,
             "+lambda[" + std::to_string(i) + "]+lambda[" + std::to_string(j) + "]");
        if (i != j && lambda_cluster[i] != lambda_cluster[j]) {
          note(out.min_eigen, lambdas[i] - lambdas[j]);
          push(DivisorKind::BlockEigen, lambdas[i] - lambdas[j], k0,
               "+lambda[" + std::to_string(i) + "]-lambda[" + std::to_string(j) + "]");
        }
      }
    }
  }

  // k != 0: all four classes via the per-harmonic floor check.
  std::vector<int> k(b, 0);
  std::function<void(int, int)> loop = [&](int slot, int left) {
    if (slot == b) {
      bool zero = true;
      for (int v : k) zero = zero && v == 0;
      if (zero) return;
      const double d = [&] {
        double acc = 0.0;
        for (int j = 0; j < b; ++j) acc += k[j] * D.omega[j];
        return acc;
      }();
      note(out.min_scalar, d);
      for (double l : lambdas) {
        note(out.min_eigen, d + l);
        note(out.min_eigen, d - l);
      }
      std::vector<double> dets;
      for (std::size_t ci = 0; ci < As.size(); ++ci) {
        for (std::size_t cj = ci; cj < As.size(); ++cj) {
          if (ci == cj && !same_pair_dets) continue;
          for (int s1 : {+1, -1}) {
            for (int s2 : {+1, -1}) {
              const Eigen::Matrix4d M =
                  d * Eigen::Matrix4d::Identity() +
                  s1 * detail::kron2(As[ci], Eigen::Matrix2d::Identity()) +
                  s2 * detail::kron2(Eigen::Matrix2d::Identity(), As[cj]);
              dets.push_back(M.determinant());
            }
          }
        }
      }
      for (double dv : dets) note(out.min_det, dv);
      std::vector<SmallDivisorReport> reps =
          divisor_floor(k, D.omega, lambdas, dets, gamma, std::max(K_enum, K_thr), tau);
      for (SmallDivisorReport& r : reps) {
        r.threshold = thr;
        if (r.divisor_value < thr) out.flagged.push_back(std::move(r));
      }
      out.checked += 1 + 2 * static_cast<long>(lambdas.size()) +
                     static_cast<long>(dets.size());
      return;
    }
    for (int v = -left; v <= left; ++v) {
      k[slot] = v;
      loop(slot + 1, left - std::abs(v));
    }
    k[slot] = 0;
  };
  loop(0, Ki);
  return out;
}

// ---------------------------------------------------------------------------
// One KAM step
// ---------------------------------------------------------------------------

struct StepReport {
  int nu = 0;
  double eps_before = 0.0;
  double eps_after = 0.0;
  int divisor_flags = 0;  // post-step persistence violations (0 on a clean step)
  double F_norm = 0.0;
  double remainder_norm = 0.0;  // majorant of the first discarded Lie term
  double omega_shift = 0.0;     // sup_j |omega_j^+ - omega_j|
  double quad_shift_weighted = 0.0;  // sup |Delta quad_{ij}| e^{+|i-j| rho}
  bool freq_shift_ok = true;         // both shifts < eps_before
  double K = 0.0;
  double contraction_exponent_estimate = 0.0;  // ln eps_after / ln eps_before
  double envelope_constant = 0.0;  // eps_after / (gamma^{-5} dr^{-c} K^{5(tau+1)} eps^{4/3})

  std::string to_json_line() const {
    using kam::detail::format_double;
    std::string o = "{\"contraction_exponent_estimate\":";
    o += format_double(contraction_exponent_estimate);
    o += ",\"divisor_flags\":" + std::to_string(divisor_flags);
    o += ",\"envelope_constant\":" + format_double(envelope_constant);
    o += ",\"eps_after\":" + format_double(eps_after);
    o += ",\"eps_before\":" + format_double(eps_before);
    o += ",\"f_norm\":" + format_double(F_norm);
    o += ",\"freq_shift_ok\":";
    o += freq_shift_ok ? "true" : "false";
    o += ",\"k_cutoff\":" + format_double(K);
    o += ",\"nu\":" + std::to_string(nu);
    o += ",\"omega_shift\":" + format_double(omega_shift);
    o += ",\"quad_shift_weighted\":" + format_double(quad_shift_weighted);
    o += ",\"remainder_norm\":" + format_double(remainder_norm);
    o += "}";
    return o;
  }

  static std::string csv_header() { return "nu,eps,K,flags,exponent"; }
  std::string to_csv_row() const {
    using kam::detail::format_double;
    std::string o = std::to_string(nu);
    o += ",";
    o += format_double(eps_after);
    o += ",";
    o += format_double(K);
    o += ",";
    o += std::to_string(divisor_flags);
    o += ",";
    o += format_double(contraction_exponent_estimate);
    return o;
  }
};

struct StepOutcome {
  KamState state;
  StepReport report;
};

namespace detail {

// The autonomous mixed quadratic coefficients of a series: the map
// (alpha site, beta site) -> coefficient over terms e^{i0 theta} I^0 w_i wbar_j.
inline std::map<std::pair<Site, Site>, Complex> mixed_pair_map(
    const FourierTaylorSeries& f) {
  std::map<std::pair<Site, Site>, Complex> out;
  for (const Term& t : f.terms()) {
    if (t.idx.k1() != 0 || t.idx.l1() != 0) continue;
    if (t.idx.alpha_degree() != 1 || t.idx.beta_degree() != 1) continue;
    out[{t.idx.alpha[0].site(), t.idx.beta[0].site()}] = t.coeff;
  }
  return out;
}

// Weighted shift of the mixed quadratic coefficients across one step:
// sup_{i,j} |after_{ij} - before_{ij}| e^{+|i-j| rho}.  The step verification
// asks this to stay below the step's eps, i.e. the absorbed increments decay
// like eps e^{-|i-j| rho}.
inline double weighted_mixed_shift(const FourierTaylorSeries& before,
                                   const FourierTaylorSeries& after, double rho) {
  const auto mb = mixed_pair_map(before);
  const auto ma = mixed_pair_map(after);
  double worst = 0.0;
  auto consider = [&](const std::pair<Site, Site>& key) {
    const auto itb = mb.find(key);
    const auto ita = ma.find(key);
    const Complex cb = itb == mb.end() ? Complex{} : itb->second;
    const Complex ca = ita == ma.end() ? Complex{} : ita->second;
    const double diff = std::abs(ca - cb);
    if (diff == 0.0) return;
    const double dist =
        std::sqrt(static_cast<double>((key.first - key.second).norm2()));
    worst = std::max(worst, diff * std::exp(dist * rho));
  };
  for (const auto& [key, c] : mb) consider(key);
  for (const auto& [key, c] : ma) consider(key);
  return worst;
}

}  // namespace detail

// Executes one iteration step.  Throws SmallDivisorError (with the complete
// flag list) if the divisor survey at the current sizes fails or any solve
// channel is below the floor.  Post-step, the survey is re-evaluated at the
// tightened threshold gamma / K_{nu+1}^tau; instances that were healthy
// before and dropped below the tightened floor are counted in
// report.divisor_flags (the persistence property says the count is zero).
inline StepOutcome kam_step(const KamState& st) {
  const StepSizes& sz = st.sizes;
  const HomologicalData D =
      extract_homological_data(st.form.N, st.form.modes, equal_norm_clusters(st.form.modes));

  // Pre-check: the divisor conditions at (gamma, K_nu, tau).
  DivisorSurvey pre = survey_divisors(D, sz.gamma, sz.K, sz.K, sz.tau);
  if (!pre.flagged.empty()) throw SmallDivisorError(pre.flagged);

  // Truncate and solve the homological equation.
  const int Kint = static_cast<int>(std::llround(sz.K));
  const FourierTaylorSeries R = truncate_quadratic(st.P, Kint);
  DivisorFloor floor;
  floor.gamma = sz.gamma;
  floor.K = sz.K;
  floor.tau = sz.tau;
  const HomologicalSolution sol = solve_homological(D, R, floor);

  // New reduced form and transformed perturbation.
  const FourierTaylorSeries N_plus = add(st.form.N, sol.kept);
  const TruncationPolicy pol = detail::engine_policy(st.opts);
  StepSizes nxt = next_sizes(sz, st.base);
  const WeightedDomain next_dom = WeightedDomain(nxt.r, nxt.s, nxt.rho);
  const LieResult lie =
      lie_transform(add(st.form.N, st.P), sol.F, st.opts.lie_order, pol, &next_dom);
  const FourierTaylorSeries P_plus = sub(lie.series, N_plus);

  // Frequency-shift verification on the re-extracted form.
  const HomologicalData D_plus =
      extract_homological_data(N_plus, st.form.modes, equal_norm_clusters(st.form.modes));
  StepReport rep;
  rep.nu = sz.nu;
  rep.K = sz.K;
  rep.eps_before = sz.eps;
  for (int j = 0; j < D.b; ++j) {
    rep.omega_shift = std::max(rep.omega_shift, std::abs(D_plus.omega[j] - D.omega[j]));
  }
  rep.quad_shift_weighted = detail::weighted_mixed_shift(st.P, P_plus, sz.rho);
  rep.freq_shift_ok =
      rep.omega_shift < sz.eps && rep.quad_shift_weighted < sz.eps;

  // Post-step persistence: the conditions that held at gamma/K_nu^tau must
  // still hold for the transformed form at the tightened gamma/K_{nu+1}^tau
  // threshold over the same harmonic range.
  DivisorSurvey post = survey_divisors(D_plus, sz.gamma, sz.K, nxt.K, sz.tau);
  rep.divisor_flags = static_cast<int>(post.flagged.size());

  rep.F_norm = vector_field_norm(sol.F, sz.domain());
  rep.remainder_norm = lie.tail_majorant;
  rep.eps_after = vector_field_norm(P_plus, next_dom);
  if (rep.eps_before > 0 && rep.eps_after > 0 && rep.eps_before != 1.0) {
    rep.contraction_exponent_estimate =
        std::log(rep.eps_after) / std::log(rep.eps_before);
  }
  {
    const double dr = sz.r - nxt.r;
    const double envelope = std::pow(sz.gamma, -5.0) * std::pow(dr, -st.base.c_exp) *
                            std::pow(sz.K, 5.0 * (sz.tau + 1.0)) *
                            std::pow(rep.eps_before, 4.0 / 3.0);
    rep.envelope_constant = envelope > 0 ? rep.eps_after / envelope : 0.0;
  }

  StepOutcome out{st, rep};
  out.state.nu = st.nu + 1;
  nxt.eps = rep.eps_after;
  out.state.sizes = nxt;
  out.state.form.N = N_plus;
  out.state.P = P_plus;
  out.state.generators.push_back(sol.F);
  return out;
}

// ---------------------------------------------------------------------------
// Iteration driver
// ---------------------------------------------------------------------------

struct IterationResult {
  std::vector<StepReport> reports;
  KamState final_state;
  bool aborted = false;
  std::string abort_reason;
  std::vector<SmallDivisorReport> abort_flags;
  bool diverged = false;          // some step had eps_after >= eps_before
  double fitted_exponent = 0.0;   // least-squares slope of ln eps_+ vs ln eps
  double fitted_log_constant = 0.0;

  std::string to_csv() const {
    std::string o = StepReport::csv_header();
    o += "\n";
    for (const StepReport& r : reports) {
      o += r.to_csv_row();
      o += "\n";
    }
    return o;
  }

  std::string to_json() const {
    using kam::detail::format_double;
    std::string o = "{\"aborted\":";
    o += aborted ? "true" : "false";
    o += ",\"abort_reason\":\"" + kam::detail::json_escape(abort_reason) + "\"";
    o += ",\"diverged\":";
    o += diverged ? "true" : "false";
    o += ",\"fitted_exponent\":" + format_double(fitted_exponent);
    o += ",\"fitted_log_constant\":" + format_double(fitted_log_constant);
    o += ",\"reports\":[";
    for (std::size_t i = 0; i < reports.size(); ++i) {
      if (i) o += ",";
      o += reports[i].to_json_line();
    }
    o += "]}";
    return o;
  }
};

namespace detail {

// Least-squares fit of y = exponent * x + constant; with a single point the
// fit degenerates to the ratio through the origin-free pair slope, and with
// none it stays zero.
inline void fit_line(const std::vector<double>& xs, const std::vector<double>& ys,
                     double& slope, double& intercept) {
  const std::size_t n = xs.size();
  slope = 0.0;
  intercept = 0.0;
  if (n == 0) return;
  if (n == 1) {
    slope = ys[0] / xs[0];
    return;
  }
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (std::size_t i = 0; i < n; ++i) {
    sx += xs[i];
    sy += ys[i];
    sxx += xs[i] * xs[i];
    sxy += xs[i] * ys[i];
  }
  const double denom = n * sxx - sx * sx;
  if (std::abs(denom) < 1e-30) {
    slope = 0.0;
    intercept = sy / n;
    return;
  }
  slope = (n * sxy - sx * sy) / denom;
  intercept = (sy - slope * sx) / n;
}

}  // namespace detail

// Runs `steps` iteration steps, aborting cleanly on small-divisor errors and
// fitting the contraction exponent from the ln eps_{nu+1} vs ln eps_nu pairs.
inline IterationResult run_iteration(const KamState& st0, int steps) {
  if (steps < 0) throw std::invalid_argument("run_iteration: steps must be nonnegative");
  IterationResult res;
  res.final_state = st0;
  for (int v = 0; v < steps; ++v) {
    try {
      StepOutcome out = kam_step(res.final_state);
      res.reports.push_back(out.report);
      res.final_state = std::move(out.state);
      if (out.report.eps_after >= out.report.eps_before && out.report.eps_before > 0) {
        res.diverged = true;
      }
      if (out.report.eps_after == 0.0) break;  // nothing left to transform
    } catch (const SmallDivisorError& e) {
      res.aborted = true;
      res.abort_reason = e.what();
      res.abort_flags = e.reports();
      break;
    }
  }
  std::vector<double> xs, ys;
  for (const StepReport& r : res.reports) {
    if (r.eps_before > 0 && r.eps_after > 0) {
      xs.push_back(std::log(r.eps_before));
      ys.push_back(std::log(r.eps_after));
    }
  }
  detail::fit_line(xs, ys, res.fitted_exponent, res.fitted_log_constant);
  return res;
}

// ---------------------------------------------------------------------------
// Toeplitz-Lipschitz sampling
// ---------------------------------------------------------------------------

enum class ToeplitzClass { CreateCreate, Mixed, AnnihilateAnnihilate };

inline const char* toeplitz_class_name(ToeplitzClass c) {
  switch (c) {
    case ToeplitzClass::CreateCreate: return "20";
    case ToeplitzClass::Mixed: return "11";
    case ToeplitzClass::AnnihilateAnnihilate: return "02";
  }
  return "?";
}

struct ToeplitzLineReport {
  Site n, m, c;
  ToeplitzClass cls = ToeplitzClass::Mixed;
  bool perpendicular = false;   // <n -+ m, c> = 0 for the class's direction pair
  bool vacuous = true;          // no matching quadratic content at any sampled t
  // Perpendicular lines: entry series equal at every sampled t, coefficient-wise
  // up to accumulation rounding of the stored series (a few ulp of the entry
  // magnitude); structural deviations are orders of magnitude above that.
  bool exactly_constant = true;
  double limit = 0.0;           // diagonal lines: the constant normal-frequency part
  double max_deviation = 0.0;   // sup_t (majorant of entry minus limit)
  double envelope_constant = 0.0;  // sup_t |t| * deviation * e^{+|n -+ m| rho}
};

struct ToeplitzReport {
  int lines = 0;
  int vacuous = 0;
  double worst_envelope = 0.0;           // over non-perpendicular lines
  bool perpendicular_all_constant = true;
  std::vector<ToeplitzLineReport> samples;
};

struct ToeplitzOptions {
  int lines = 50;
  std::uint64_t seed = 1;
  int K = 5;                  // envelope regime starts beyond this cutoff
  std::vector<int> t_far;     // sampled t for sloped lines; default K+1 .. K+6
  int t_near_max = 6;         // sampled t for perpendicular lines: 1 .. this
};

// Samples second derivatives of the decomposition along lattice lines and
// checks the two Toeplitz-Lipschitz mechanisms.  Mixed-class lines
// (n + t c, m + t c) with <n - m, c> = 0 keep a constant divisor along the
// line, and the sampled entry must be exactly constant in t; all sloped
// lines -- mixed with <n - m, c> != 0, creation/annihilation pairs
// (n + t c, m - t c) with <n + m, c> != 0 -- must decay to their limit with
// a 1/|t| envelope under the class weight e^{+|n -+ m| rho}.  Creation pairs
// perpendicular to their direction carry no decay claim and are redrawn.
// Letters with non-plain quadratic content (tangential sites and rotated
// resonant letters) are skipped; the diagonal's unbounded |a|^2 part is
// removed through the plain-mode frequency formula, leaving the constant
// normal-frequency limit.
inline ToeplitzReport toeplitz_check(const NormalFormState& base,
                                     const FourierTaylorSeries& N,
                                     const FourierTaylorSeries& P,
                                     const WeightedDomain& dom,
                                     const ToeplitzOptions& opts = {}) {
  ToeplitzReport rep;
  std::mt19937_64 rng(opts.seed);
  auto draw_int = [&](int lo, int hi) {
    return lo + static_cast<int>(rng() % static_cast<std::uint64_t>(hi - lo + 1));
  };
  const FourierTaylorSeries H = add(N, P);
  const std::int64_t bound2 = [&] {
    std::int64_t worst = 0;
    for (const Site& s : base.modes) worst = std::max(worst, s.norm2());
    return worst;
  }();
  std::set<Site> special(base.rotation.modes.begin(), base.rotation.modes.end());
  special.insert(base.tangential.begin(), base.tangential.end());
  const double omega_tilde =
      kInv2PiSq * std::accumulate(base.params.xi.begin(), base.params.xi.end(), 0.0);

  std::vector<int> t_far = opts.t_far;
  if (t_far.empty()) {
    for (int t = opts.K + 1; t <= opts.K + 6; ++t) t_far.push_back(t);
  }

  for (int line = 0; line < opts.lines; ++line) {
    ToeplitzLineReport lr;
    lr.cls = static_cast<ToeplitzClass>(draw_int(0, 2));
    lr.n = Site{draw_int(-2, 2), draw_int(-2, 2)};
    lr.m = Site{draw_int(-2, 2), draw_int(-2, 2)};
    const bool mixed = lr.cls == ToeplitzClass::Mixed;
    do {
      lr.c = Site{draw_int(-2, 2), draw_int(-2, 2)};
    } while (lr.c == Site{0, 0} ||
             (!mixed && dot(lr.n + lr.m, lr.c) == 0));
    const Site combo = mixed ? lr.n - lr.m : lr.n + lr.m;
    lr.perpendicular = dot(combo, lr.c) == 0;
    const double weight = std::sqrt(static_cast<double>(combo.norm2()));

    std::vector<int> ts;
    if (lr.perpendicular) {
      for (int t = 0; t <= opts.t_near_max; ++t) {
        const Site a = lr.n + lr.c * t;
        const Site b2 = lr.m + lr.c * t;
        if (a.norm2() > bound2 || b2.norm2() > bound2) break;
        if (special.count(a) != 0 || special.count(b2) != 0) continue;
        ts.push_back(t);
      }
    } else {
      ts = t_far;
    }

    bool have_reference = false;
    FourierTaylorSeries reference;
    for (int t : ts) {
      const Site a = lr.n + lr.c * t;
      const Site b2 = mixed ? lr.m + lr.c * t : lr.m - lr.c * t;
      if (!lr.perpendicular && (special.count(a) != 0 || special.count(b2) != 0)) {
        continue;  // non-plain letters: shifted diagonals, no translate claim
      }
      FourierTaylorSeries entry;
      switch (lr.cls) {
        case ToeplitzClass::CreateCreate:
          entry = d_dw(d_dw(H, a), b2);
          break;
        case ToeplitzClass::Mixed:
          entry = d_dwbar(d_dw(H, a), b2);
          break;
        case ToeplitzClass::AnnihilateAnnihilate:
          entry = d_dwbar(d_dwbar(H, a), b2);
          break;
      }
      FourierTaylorSeries deviation = entry;
      if (mixed && a == b2) {
        lr.limit = omega_tilde;
        if (a.norm2() <= bound2) {
          // Retained plain mode: remove the full unperturbed diagonal; what
          // remains is the accumulated correction.
          deviation = add(entry, FourierTaylorSeries::monomial(
                                     H.b(), MultiIndex{},
                                     Complex{-detail::omega_plain(base.params, a), 0.0}));
        } else {
          // Beyond the retained ball the entry is empty and the unperturbed
          // diagonal matches the limit exactly: the deviation is zero.
          deviation = FourierTaylorSeries(H.b());
        }
      }
      if (!entry.empty() || !deviation.empty()) lr.vacuous = false;
      const double dev = majorant_norm(deviation, dom);
      lr.max_deviation = std::max(lr.max_deviation, dev);
      lr.envelope_constant =
          std::max(lr.envelope_constant, std::abs(t) * dev * std::exp(weight * dom.rho));
      if (lr.perpendicular) {
        if (!have_reference) {
          reference = deviation;
          have_reference = true;
        } else {
          const double scale = std::max(
              {1.0, reference.max_abs_coeff(), entry.max_abs_coeff()});
          const double noise =
              64.0 * std::numeric_limits<double>::epsilon() * scale;
          if (sub(deviation, reference).max_abs_coeff() > noise) {
            lr.exactly_constant = false;
          }
        }
      }
    }

    ++rep.lines;
    if (lr.vacuous) ++rep.vacuous;
    if (lr.perpendicular) {
      if (!lr.exactly_constant) rep.perpendicular_all_constant = false;
    } else {
      rep.worst_envelope = std::max(rep.worst_envelope, lr.envelope_constant);
    }
    rep.samples.push_back(lr);
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Torus extraction
// ---------------------------------------------------------------------------

// Harmonic expansion of one mode amplitude on the invariant torus:
// q_n(theta) = sum coeff * e^{i <k, theta>}.
struct TorusHarmonic {
  std::array<int, kMaxB> k{};
  Complex coeff;
};

struct TorusApproximation {
  Parameters params;
  std::vector<Site> tangential;
  std::vector<double> omega_infty;  // reduced tangential frequencies (scaled units)
  std::map<Site, std::vector<TorusHarmonic>> harmonics;
  int b = 0;

  // theta(t) = theta0 - omega_infty * (eps^3 t): the torus flow in original
  // time units; tangential amplitudes then rotate like e^{+i eps^3 omega t}.
  std::array<double, kMaxB> angles_at(const std::array<double, kMaxB>& theta0,
                                      double t) const {
    std::array<double, kMaxB> th = theta0;
    const double e3 = std::pow(params.eps, 3.0);
    for (int j = 0; j < b; ++j) th[j] -= omega_infty[j] * e3 * t;
    return th;
  }

  Complex mode_amplitude(const Site& n, const std::array<double, kMaxB>& theta) const {
    const auto it = harmonics.find(n);
    if (it == harmonics.end()) return Complex{};
    Complex total{};
    for (const TorusHarmonic& h : it->second) {
      double phase = 0.0;
      for (int j = 0; j < b; ++j) phase += h.k[j] * theta[j];
      total += h.coeff * std::exp(Complex{0.0, phase});
    }
    return total;
  }
};

// Pulls the original mode coordinates q_n through every accumulated
// transform (quartic averaging flow, action-angle scaling, symplectic
// rotation, then each iteration generator in order) and restricts to the
// torus I = 0, w = 0.  The half-integer part of the amplitude scaling is
// uniform across a coordinate series (odd polynomial degree), so one factor
// eps^{8.5} undoes the Hamiltonian normalization embedded in the action-angle
// substitution.
inline TorusApproximation extract_torus(const KamState& st, int embed_bound = 2) {
  const Parameters& p = st.form.params;
  const std::vector<Site>& S = st.form.tangential;
  const int b = p.b();

  TruncationPolicy pol = detail::engine_policy(st.opts);
  TruncationPolicy qpol;  // pre-substitution stage: plain polynomial degree cap
  qpol.z_cap = 5;
  qpol.drop_tol_rel = st.opts.drop_tol_rel;

  const FourierTaylorSeries Fq = birkhoff_generator(S, st.opts.mode_bound);
  const double post_scale = std::pow(p.eps, 8.5);

  TorusApproximation torus;
  torus.params = p;
  torus.tangential = S;
  torus.b = b;
  const HomologicalData D = extract_homological_data(
      st.form.N, st.form.modes, equal_norm_clusters(st.form.modes));
  torus.omega_infty = D.omega;

  std::vector<Site> wanted;
  const std::int64_t eb2 = static_cast<std::int64_t>(embed_bound) * embed_bound;
  for (std::int64_t x = -embed_bound; x <= embed_bound; ++x) {
    for (std::int64_t y = -embed_bound; y <= embed_bound; ++y) {
      const Site n{x, y};
      if (n.norm2() <= eb2) wanted.push_back(n);
    }
  }
  std::sort(wanted.begin(), wanted.end());

  for (const Site& n : wanted) {
    MultiIndex seed{};
    if (!seed.add_alpha(n, 1)) continue;
    FourierTaylorSeries coord =
        FourierTaylorSeries::monomial(b, seed, Complex{1.0, 0.0});
    coord = lie_transform(coord, Fq, st.opts.lie_order, qpol).series;
    coord = detail::to_action_angle(coord, p, S, st.opts.action_degree_cap, pol);
    coord = scale(coord, Complex{post_scale, 0.0});
    coord = apply_symplectic_rotation(st.form.rotation, coord, pol);
    for (const FourierTaylorSeries& F : st.generators) {
      coord = lie_transform(coord, F, st.opts.lie_order, pol).series;
    }
    std::vector<TorusHarmonic> hs;
    for (const Term& t : coord.terms()) {
      if (t.idx.l1() != 0 || t.idx.z_degree() != 0) continue;
      TorusHarmonic h;
      for (int j = 0; j < b; ++j) h.k[j] = t.idx.k[j];
      h.coeff = t.coeff;
      hs.push_back(h);
    }
    if (!hs.empty()) torus.harmonics.emplace(n, std::move(hs));
  }
  return torus;
}

// ---------------------------------------------------------------------------
// Numeric Hamiltonian flow (conjugacy spot checks)
// ---------------------------------------------------------------------------

struct PhasePoint {
  std::array<double, kMaxB> theta{};
  std::array<double, kMaxB> I{};
  std::map<Site, Complex> w;  // physical slice: the conjugate letter is conj(w)
};

// Classical RK4 flow of the Hamiltonian vector field of H over [0, T]:
// theta' = -dH/dI, I' = +dH/dtheta, w' = +i dH/dwbar, evaluated on the real
// slice.  The mode list fixes which w equations are integrated.
inline PhasePoint flow_hamiltonian(const FourierTaylorSeries& H, PhasePoint start,
                                   double T, double dt,
                                   const std::vector<Site>& modes) {
  const int b = H.b();
  std::vector<FourierTaylorSeries> dI(b), dTh(b);
  for (int j = 0; j < b; ++j) {
    dI[j] = d_dI(H, j);
    dTh[j] = d_dtheta(H, j);
  }
  std::vector<FourierTaylorSeries> dWbar;
  dWbar.reserve(modes.size());
  for (const Site& n : modes) dWbar.push_back(d_dwbar(H, n));

  const int M = static_cast<int>(modes.size());
  const int dim = 2 * b + 2 * M;
  auto pack = [&](const PhasePoint& pt) {
    std::vector<double> v(dim);
    for (int j = 0; j < b; ++j) {
      v[j] = pt.theta[j];
      v[b + j] = pt.I[j];
    }
    for (int i = 0; i < M; ++i) {
      const auto it = pt.w.find(modes[i]);
      const Complex z = it == pt.w.end() ? Complex{} : it->second;
      v[2 * b + 2 * i] = z.real();
      v[2 * b + 2 * i + 1] = z.imag();
    }
    return v;
  };
  auto unpack = [&](const std::vector<double>& v) {
    PhasePoint pt;
    for (int j = 0; j < b; ++j) {
      pt.theta[j] = v[j];
      pt.I[j] = v[b + j];
    }
    for (int i = 0; i < M; ++i) {
      pt.w[modes[i]] = Complex{v[2 * b + 2 * i], v[2 * b + 2 * i + 1]};
    }
    return pt;
  };
  auto deriv = [&](const std::vector<double>& v) {
    const PhasePoint pt = unpack(v);
    std::array<double, kMaxB> th{}, Iv{};
    for (int j = 0; j < b; ++j) {
      th[j] = pt.theta[j];
      Iv[j] = pt.I[j];
    }
    auto wf = [&](const Site& s) {
      const auto it = pt.w.find(s);
      return it == pt.w.end() ? Complex{} : it->second;
    };
    std::vector<double> d(dim);
    for (int j = 0; j < b; ++j) {
      d[j] = -evaluate(dI[j], th, Iv, wf).real();
      d[b + j] = evaluate(dTh[j], th, Iv, wf).real();
    }
    for (int i = 0; i < M; ++i) {
      const Complex wd = Complex{0.0, 1.0} * evaluate(dWbar[i], th, Iv, wf);
      d[2 * b + 2 * i] = wd.real();
      d[2 * b + 2 * i + 1] = wd.imag();
    }
    return d;
  };

  std::vector<double> y = pack(start);
  const int steps = std::max(1, static_cast<int>(std::ceil(T / dt)));
  const double h = T / steps;
  std::vector<double> k1, k2, k3, k4, tmp(dim);
  for (int s = 0; s < steps; ++s) {
    k1 = deriv(y);
    for (int i = 0; i < dim; ++i) tmp[i] = y[i] + 0.5 * h * k1[i];
    k2 = deriv(tmp);
    for (int i = 0; i < dim; ++i) tmp[i] = y[i] + 0.5 * h * k2[i];
    k3 = deriv(tmp);
    for (int i = 0; i < dim; ++i) tmp[i] = y[i] + h * k3[i];
    k4 = deriv(tmp);
    for (int i = 0; i < dim; ++i) {
      y[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
  }
  return unpack(y);
}

// Time-1 flow of a step generator: the canonical transform of that step.
inline PhasePoint apply_generator(const FourierTaylorSeries& F, const PhasePoint& p,
                                  const std::vector<Site>& modes, double dt = 1e-2) {
  return flow_hamiltonian(F, p, 1.0, dt, modes);
}

// ---------------------------------------------------------------------------
// Split-step pseudospectral validation
// ---------------------------------------------------------------------------

struct OdeReport {
  double T = 0.0;
  double dt = 0.0;
  int grid = 0;
  long steps = 0;
  double energy_initial = 0.0;
  double energy_drift_rel = 0.0;  // max |H - H0| / max(|H0|, tiny)
  double norm_drift_rel = 0.0;    // same for the weighted amplitude norm
  std::vector<double> peak_freq;      // per tangential mode, original time units
  std::vector<double> expected_freq;  // eps^3 * omega_infty
  std::vector<double> peak_error;

  std::string to_json() const {
    using kam::detail::format_double;
    std::string o = "{\"dt\":" + format_double(dt);
    o += ",\"energy_drift_rel\":" + format_double(energy_drift_rel);
    o += ",\"energy_initial\":" + format_double(energy_initial);
    o += ",\"expected_freq\":[";
    for (std::size_t i = 0; i < expected_freq.size(); ++i) {
      if (i) o += ",";
      o += format_double(expected_freq[i]);
    }
    o += "],\"grid\":" + std::to_string(grid);
    o += ",\"norm_drift_rel\":" + format_double(norm_drift_rel);
    o += ",\"peak_error\":[";
    for (std::size_t i = 0; i < peak_error.size(); ++i) {
      if (i) o += ",";
      o += format_double(peak_error[i]);
    }
    o += "],\"peak_freq\":[";
    for (std::size_t i = 0; i < peak_freq.size(); ++i) {
      if (i) o += ",";
      o += format_double(peak_freq[i]);
    }
    o += "],\"steps\":" + std::to_string(steps);
    o += ",\"t_final\":" + format_double(T);
    o += "}";
    return o;
  }
};

namespace detail {

// In-place 2D FFT helpers on a G x G row-major grid.
inline void fft2_rows_cols(std::vector<Complex>& a, int G, bool inverse) {
  Eigen::FFT<double> fft;
  std::vector<Complex> line(G), out(G);
  for (int r = 0; r < G; ++r) {
    std::copy(a.begin() + r * G, a.begin() + (r + 1) * G, line.begin());
    if (inverse) {
      fft.inv(out, line);
    } else {
      fft.fwd(out, line);
    }
    std::copy(out.begin(), out.end(), a.begin() + r * G);
  }
  for (int c = 0; c < G; ++c) {
    for (int r = 0; r < G; ++r) line[r] = a[r * G + c];
    if (inverse) {
      fft.inv(out, line);
    } else {
      fft.fwd(out, line);
    }
    for (int r = 0; r < G; ++r) a[r * G + c] = out[r];
  }
}

inline int wrap_index(std::int64_t f, int G) {
  std::int64_t m = f % G;
  if (m < 0) m += G;
  return static_cast<int>(m);
}

// Dominant-frequency estimate of a uniformly sampled complex signal:
// FFT magnitude argmax with parabolic refinement, returned in radians per
// time unit with the sign convention x(t) ~ e^{+i omega t}.
inline double dominant_frequency(const std::vector<Complex>& x, double sample_dt) {
  const int N = static_cast<int>(x.size());
  Eigen::FFT<double> fft;
  std::vector<Complex> X;
  // Hann window: suppresses spectral leakage so the parabolic peak refinement
  // below is unbiased to far below one bin.
  std::vector<Complex> in(x);
  for (int i = 0; i < N; ++i) {
    in[i] *= 0.5 * (1.0 - std::cos(2.0 * kPi * i / N));
  }
  fft.fwd(X, in);
  int best = 0;
  double best_mag = -1.0;
  for (int i = 0; i < N; ++i) {
    const double m = std::abs(X[i]);
    if (m > best_mag) {
      best_mag = m;
      best = i;
    }
  }
  // Parabolic refinement on the log-magnitude of the Hann spectrum.
  const auto lmag = [&](int i) {
    return std::log(std::max(std::abs(X[wrap_index(i, N)]), 1e-300));
  };
  const double m0 = lmag(best - 1), m1 = lmag(best), m2 = lmag(best + 1);
  double shift = 0.0;
  const double denom = m0 - 2.0 * m1 + m2;
  if (std::abs(denom) > 1e-300) shift = 0.5 * (m0 - m2) / denom;
  double bin = best + shift;
  if (bin > N / 2.0) bin -= N;
  return 2.0 * kPi * bin / (N * sample_dt);
}

}  // namespace detail

// Integrates the Galerkin-truncated mode system
//   dq_n/dt = i (|n|^2 q_n + (1/4pi^2) [|u|^2 u]_n),  |n| <= mode_bound,
// from the extracted torus initial data with a Strang split step: exact
// linear rotation in mode space, exact pointwise nonlinear phase kick on a
// dealiased grid, and projection back to the retained modes.  Reports energy
// and weighted-norm drift plus the dominant frequency of each tangential
// mode against eps^3 * omega_infty.
inline OdeReport ode_validate(const TorusApproximation& torus, int mode_bound,
                              double T, double dt) {
  if (T <= 0 || dt <= 0) throw std::invalid_argument("ode_validate: T, dt must be positive");
  const int b = torus.b;

  std::vector<Site> retained;
  const std::int64_t mb2 = static_cast<std::int64_t>(mode_bound) * mode_bound;
  for (std::int64_t x = -mode_bound; x <= mode_bound; ++x) {
    for (std::int64_t y = -mode_bound; y <= mode_bound; ++y) {
      const Site n{x, y};
      if (n.norm2() <= mb2) retained.push_back(n);
    }
  }
  std::sort(retained.begin(), retained.end());
  const int M = static_cast<int>(retained.size());

  int G = 16;
  while (G < 4 * mode_bound + 4) G *= 2;

  // Initial data from the torus at theta = 0.
  std::array<double, kMaxB> theta0{};
  std::vector<Complex> q(M);
  for (int i = 0; i < M; ++i) q[i] = torus.mode_amplitude(retained[i], theta0);

  const double inv4pi2 = 1.0 / (4.0 * kPi * kPi);
  auto energy = [&](const std::vector<Complex>& qs) {
    double lin = 0.0;
    for (int i = 0; i < M; ++i) {
      lin += static_cast<double>(retained[i].norm2()) * std::norm(qs[i]);
    }
    std::vector<Complex> grid(static_cast<std::size_t>(G) * G, Complex{});
    for (int i = 0; i < M; ++i) {
      grid[static_cast<std::size_t>(detail::wrap_index(retained[i].x, G)) * G +
           detail::wrap_index(retained[i].y, G)] = qs[i];
    }
    detail::fft2_rows_cols(grid, G, /*inverse=*/true);
    // Eigen's inverse transform includes 1/G per axis; undo it so the grid
    // holds u(x) = sum q_n e^{i<n,x>} at the sample points.
    double quart = 0.0;
    for (Complex& v : grid) {
      v *= static_cast<double>(G) * G;
      const double a2 = std::norm(v);
      quart += a2 * a2;
    }
    quart /= static_cast<double>(G) * G;  // mean over the grid = (2pi)^{-2} integral
    return lin + quart / (8.0 * kPi * kPi);
  };

  auto weighted_norm = [&](const std::vector<Complex>& qs) {
    double s = 0.0;
    for (int i = 0; i < M; ++i) {
      s += std::abs(qs[i]) *
           std::exp(0.1 * std::sqrt(static_cast<double>(retained[i].norm2())));
    }
    return s;
  };

  const long total_steps = std::lround(T / dt);
  const long stride = std::max<long>(1, std::lround(0.02 / dt));
  const double H0 = energy(q);
  const double W0 = weighted_norm(q);
  double amp0 = 0.0;
  for (const Complex& v : q) amp0 = std::max(amp0, std::abs(v));

  OdeReport rep;
  rep.T = T;
  rep.dt = dt;
  rep.grid = G;
  rep.steps = total_steps;
  rep.energy_initial = H0;

  std::vector<std::vector<Complex>> tangential_series(b);
  std::vector<int> tang_idx(b, -1);
  for (int j = 0; j < b; ++j) {
    const auto it = std::lower_bound(retained.begin(), retained.end(), torus.tangential[j]);
    if (it != retained.end() && *it == torus.tangential[j]) {
      tang_idx[j] = static_cast<int>(it - retained.begin());
    }
  }

  std::vector<Complex> half_rot(M), grid(static_cast<std::size_t>(G) * G);
  for (int i = 0; i < M; ++i) {
    half_rot[i] = std::exp(Complex{0.0, 0.5 * dt * static_cast<double>(retained[i].norm2())});
  }

  double maxH = 0.0, maxW = 0.0;
  const double amp_guard = std::max(1.0, std::abs(amp0)) * 1e3;
  for (long s = 0; s < total_steps; ++s) {
    for (int i = 0; i < M; ++i) q[i] *= half_rot[i];
    std::fill(grid.begin(), grid.end(), Complex{});
    for (int i = 0; i < M; ++i) {
      grid[static_cast<std::size_t>(detail::wrap_index(retained[i].x, G)) * G +
           detail::wrap_index(retained[i].y, G)] = q[i];
    }
    detail::fft2_rows_cols(grid, G, /*inverse=*/true);
    const double gg = static_cast<double>(G) * G;
    for (Complex& v : grid) {
      v *= gg;
      v *= std::exp(Complex{0.0, inv4pi2 * dt * std::norm(v)});
    }
    detail::fft2_rows_cols(grid, G, /*inverse=*/false);
    for (Complex& v : grid) v /= gg;
    for (int i = 0; i < M; ++i) {
      q[i] = grid[static_cast<std::size_t>(detail::wrap_index(retained[i].x, G)) * G +
                  detail::wrap_index(retained[i].y, G)];
    }
    for (int i = 0; i < M; ++i) q[i] *= half_rot[i];

    if ((s + 1) % stride == 0) {
      for (int j = 0; j < b; ++j) {
        if (tang_idx[j] >= 0) tangential_series[j].push_back(q[tang_idx[j]]);
      }
      const double Hs = energy(q);
      const double Ws = weighted_norm(q);
      maxH = std::max(maxH, std::abs(Hs - H0));
      maxW = std::max(maxW, std::abs(Ws - W0));
      double amax = 0.0;
      for (const Complex& v : q) amax = std::max(amax, std::abs(v));
      if (!std::isfinite(Hs) || !std::isfinite(amax) || amax > amp_guard) {
        throw std::runtime_error("ode_validate: step-size instability");
      }
    }
  }
  rep.energy_drift_rel = maxH / std::max(std::abs(H0), 1e-300);
  rep.norm_drift_rel = maxW / std::max(std::abs(W0), 1e-300);

  const double e3 = std::pow(torus.params.eps, 3.0);
  for (int j = 0; j < b; ++j) {
    rep.expected_freq.push_back(e3 * torus.omega_infty[j]);
    if (tangential_series[j].size() >= 16) {
      const double f =
          detail::dominant_frequency(tangential_series[j], dt * stride);
      rep.peak_freq.push_back(f);
      rep.peak_error.push_back(std::abs(f - rep.expected_freq.back()));
    } else {
      rep.peak_freq.push_back(std::numeric_limits<double>::quiet_NaN());
      rep.peak_error.push_back(std::numeric_limits<double>::quiet_NaN());
    }
  }
  return rep;
}

}  // namespace kam
