#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <stdexcept>
#include <unordered_map>
#include <vector>

#include "kamtorus/multiindex.hpp"
#include "kamtorus/site.hpp"

namespace kam {

using Complex = std::complex<double>;

// Analyticity domain parameters: |Im theta| < r, |I| < s^2, and the normal
// amplitudes weighted as sum_n |w_n| e^{|n| rho} < s.
struct WeightedDomain {
  double r = 0.0;
  double s = 0.0;
  double rho = 0.0;

  WeightedDomain() = default;
  WeightedDomain(double r_, double s_, double rho_) : r(r_), s(s_), rho(rho_) {
    if (!(r > 0.0) || !(s > 0.0) || !(rho > 0.0)) {
      throw std::invalid_argument("WeightedDomain: r, s, rho must all be positive");
    }
  }
};

struct Term {
  MultiIndex idx;
  Complex coeff;
};

// Caps applied while building a series.  k_cap bounds |k|_1, l_cap bounds
// |l|_1, z_cap bounds |alpha|+|beta|; drop_tol_rel prunes coefficients below
// drop_tol_rel * max|coeff| when a series is finalized.
struct TruncationPolicy {
  int k_cap = std::numeric_limits<int>::max();
  int l_cap = std::numeric_limits<int>::max();
  int z_cap = std::numeric_limits<int>::max();
  double drop_tol_rel = 0.0;

  bool keeps(const MultiIndex& m) const {
    if (m.k1() > k_cap) return false;
    if (m.l1() > l_cap) return false;
    if (m.z_degree() > z_cap) return false;
    return true;
  }
};

// Sparse Fourier-Taylor series: a sorted, duplicate-free, zero-free term
// vector over MultiIndex.  Immutable after construction; all algebra returns
// new series, and the sorted representation makes every operation
// deterministic.
class FourierTaylorSeries {
 public:
  FourierTaylorSeries() = default;
  explicit FourierTaylorSeries(int b) : b_(checked_b(b)) {}

  static FourierTaylorSeries monomial(int b, const MultiIndex& idx, Complex c) {
    FourierTaylorSeries s(b);
    if (c != Complex{}) s.terms_.push_back(Term{idx, c});
    return s;
  }

  // Takes a sorted-or-not term vector, merges duplicates, drops zeros/pruned.
  static FourierTaylorSeries from_terms(int b, std::vector<Term> terms,
                                        const TruncationPolicy& pol = {}) {
    std::sort(terms.begin(), terms.end(),
              [](const Term& a, const Term& c) { return a.idx < c.idx; });
    FourierTaylorSeries s(b);
    s.terms_.reserve(terms.size());
    for (const Term& t : terms) {
      if (!s.terms_.empty() && s.terms_.back().idx == t.idx) {
        s.terms_.back().coeff += t.coeff;
      } else {
        s.terms_.push_back(t);
      }
    }
    s.prune(pol);
    return s;
  }

  int b() const { return b_; }
  const std::vector<Term>& terms() const { return terms_; }
  bool empty() const { return terms_.empty(); }
  size_t size() const { return terms_.size(); }

  Complex coefficient(const MultiIndex& idx) const {
    auto it = std::lower_bound(
        terms_.begin(), terms_.end(), idx,
        [](const Term& t, const MultiIndex& m) { return t.idx < m; });
    if (it != terms_.end() && it->idx == idx) return it->coeff;
    return Complex{};
  }

  double max_abs_coeff() const {
    double m = 0.0;
    for (const Term& t : terms_) m = std::max(m, std::abs(t.coeff));
    return m;
  }

 private:
  static int checked_b(int b) {
    if (b < 0 || b > kMaxB) {
      throw std::invalid_argument("FourierTaylorSeries: tangential dimension out of range");
    }
    return b;
  }

  void prune(const TruncationPolicy& pol) {
    double floor_abs = pol.drop_tol_rel > 0.0 ? pol.drop_tol_rel * max_abs_coeff() : 0.0;
    std::erase_if(terms_, [&](const Term& t) {
      return t.coeff == Complex{} || std::abs(t.coeff) <= floor_abs;
    });
  }

  friend class SeriesAccumulator;

  int b_ = 0;
  std::vector<Term> terms_;
};

// Hash-map accumulator used by all series-producing algorithms.  Products
// whose merged monomial would exceed the mode-slot capacity are counted, not
// stored; the count lets callers surface genuine truncation.
class SeriesAccumulator {
 public:
  explicit SeriesAccumulator(int b) : b_(b) {}

  void add(const MultiIndex& idx, Complex c) {
    if (c == Complex{}) return;
    map_[idx] += c;
  }

  void add_product(const MultiIndex& a, const MultiIndex& b, Complex c,
                   const TruncationPolicy& pol) {
    if (c == Complex{}) return;
    auto merged = mul_index(a, b);
    if (!merged) {
      ++overflow_count_;
      return;
    }
    if (!pol.keeps(*merged)) return;
    map_[*merged] += c;
  }

  uint64_t overflow_count() const { return overflow_count_; }

  FourierTaylorSeries finalize(const TruncationPolicy& pol = {}) {
    FourierTaylorSeries s(b_);
    s.terms_.reserve(map_.size());
    for (const auto& [idx, c] : map_) s.terms_.push_back(Term{idx, c});
    std::sort(s.terms_.begin(), s.terms_.end(),
              [](const Term& a, const Term& c) { return a.idx < c.idx; });
    s.prune(pol);
    map_.clear();
    return s;
  }

 private:
  int b_;
  std::unordered_map<MultiIndex, Complex, MultiIndexHash> map_;
  uint64_t overflow_count_ = 0;
};

inline int common_b(const FourierTaylorSeries& f, const FourierTaylorSeries& g) {
  if (f.b() != g.b()) {
    throw std::invalid_argument("series operation: tangential dimensions differ");
  }
  return f.b();
}

inline FourierTaylorSeries add(const FourierTaylorSeries& f, const FourierTaylorSeries& g,
                               Complex g_scale = Complex{1.0, 0.0}) {
  int b = common_b(f, g);
  std::vector<Term> out;
  out.reserve(f.size() + g.size());
  auto fi = f.terms().begin(), fe = f.terms().end();
  auto gi = g.terms().begin(), ge = g.terms().end();
  while (fi != fe || gi != ge) {
    if (gi == ge || (fi != fe && fi->idx < gi->idx)) {
      out.push_back(*fi++);
    } else if (fi == fe || gi->idx < fi->idx) {
      out.push_back(Term{gi->idx, g_scale * gi->coeff});
      ++gi;
    } else {
      out.push_back(Term{fi->idx, fi->coeff + g_scale * gi->coeff});
      ++fi, ++gi;
    }
  }
  std::erase_if(out, [](const Term& t) { return t.coeff == Complex{}; });
  FourierTaylorSeries s(b);
  return FourierTaylorSeries::from_terms(b, std::move(out));
}

inline FourierTaylorSeries sub(const FourierTaylorSeries& f, const FourierTaylorSeries& g) {
  return add(f, g, Complex{-1.0, 0.0});
}

inline FourierTaylorSeries scale(const FourierTaylorSeries& f, Complex c) {
  std::vector<Term> out(f.terms());
  for (Term& t : out) t.coeff *= c;
  return FourierTaylorSeries::from_terms(f.b(), std::move(out));
}

inline FourierTaylorSeries multiply(const FourierTaylorSeries& f,
                                    const FourierTaylorSeries& g,
                                    const TruncationPolicy& pol = {}) {
  SeriesAccumulator acc(common_b(f, g));
  for (const Term& tf : f.terms()) {
    for (const Term& tg : g.terms()) {
      acc.add_product(tf.idx, tg.idx, tf.coeff * tg.coeff, pol);
    }
  }
  return acc.finalize(pol);
}

namespace detail {

inline uint64_t pack_site_key(const Site& n) {
  return (static_cast<uint64_t>(static_cast<uint32_t>(static_cast<int32_t>(n.x))) << 32) |
         static_cast<uint64_t>(static_cast<uint32_t>(static_cast<int32_t>(n.y)));
}

// Posting lists: for every mode, the indices of terms whose alpha (resp.
// beta) exponent at that mode is positive.  Modes are visited in sorted
// order so results are deterministic.
struct ModeIndex {
  std::map<Site, std::vector<uint32_t>> by_alpha;
  std::map<Site, std::vector<uint32_t>> by_beta;

  explicit ModeIndex(const FourierTaylorSeries& f) {
    const auto& ts = f.terms();
    for (uint32_t i = 0; i < ts.size(); ++i) {
      const MultiIndex& m = ts[i].idx;
      for (int a = 0; a < m.na; ++a) by_alpha[m.alpha[a].site()].push_back(i);
      for (int a = 0; a < m.nb; ++a) by_beta[m.beta[a].site()].push_back(i);
    }
  }
};

}  // namespace detail

// Poisson bracket {F,G} = <F_I,G_theta> - <F_theta,G_I>
//                         + i (<F_w,G_wbar> - <F_wbar,G_w>).
// The canonical pairs satisfy {w_n, wbar_n} = i and {I_j, e^{i theta_j}} =
// i e^{i theta_j}.
inline FourierTaylorSeries poisson_bracket(const FourierTaylorSeries& f,
                                           const FourierTaylorSeries& g,
                                           const TruncationPolicy& pol = {}) {
  const int b = common_b(f, g);
  SeriesAccumulator acc(b);
  const Complex iu{0.0, 1.0};

  // Angle-action part.
  for (int j = 0; j < b; ++j) {
    for (const Term& tf : f.terms()) {
      if (tf.idx.l[j] == 0) continue;
      MultiIndex df = tf.idx;
      df.l[j] = static_cast<int16_t>(df.l[j] - 1);
      const Complex cf = tf.coeff * static_cast<double>(tf.idx.l[j]);
      for (const Term& tg : g.terms()) {
        if (tg.idx.k[j] == 0) continue;
        acc.add_product(df, tg.idx,
                        cf * (iu * static_cast<double>(tg.idx.k[j])) * tg.coeff, pol);
      }
    }
    for (const Term& tf : f.terms()) {
      if (tf.idx.k[j] == 0) continue;
      const Complex cf = tf.coeff * (iu * static_cast<double>(tf.idx.k[j]));
      for (const Term& tg : g.terms()) {
        if (tg.idx.l[j] == 0) continue;
        MultiIndex dg = tg.idx;
        dg.l[j] = static_cast<int16_t>(dg.l[j] - 1);
        acc.add_product(tf.idx, dg,
                        -cf * static_cast<double>(tg.idx.l[j]) * tg.coeff, pol);
      }
    }
  }

  // Mode part, via per-mode posting lists.
  detail::ModeIndex fi(f), gi(g);
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
        for (uint32_t ia : li->second) {
          const Term& tf = f.terms()[ia];
          MultiIndex df = tf.idx;
          int pf = left_alpha ? df.alpha_pow(n) : df.beta_pow(n);
          if (left_alpha) {
            df.add_alpha(n, -1);
          } else {
            df.add_beta(n, -1);
          }
          const Complex cf = tf.coeff * static_cast<double>(pf);
          for (uint32_t ib : ri->second) {
            const Term& tg = g.terms()[ib];
            MultiIndex dg = tg.idx;
            int pg = left_alpha ? dg.beta_pow(n) : dg.alpha_pow(n);
            if (left_alpha) {
              dg.add_beta(n, -1);
            } else {
              dg.add_alpha(n, -1);
            }
            acc.add_product(df, dg, sign * cf * static_cast<double>(pg) * tg.coeff,
                            pol);
          }
        }
        ++li, ++ri;
      }
    }
  };
  pair_off(fi.by_alpha, gi.by_beta, /*left_alpha=*/true, iu);
  pair_off(fi.by_beta, gi.by_alpha, /*left_alpha=*/false, -iu);

  return acc.finalize(pol);
}

// Formal partial derivatives (each returns a series).
inline FourierTaylorSeries d_dI(const FourierTaylorSeries& f, int slot) {
  std::vector<Term> out;
  for (const Term& t : f.terms()) {
    if (t.idx.l[slot] == 0) continue;
    MultiIndex m = t.idx;
    m.l[slot] = static_cast<int16_t>(m.l[slot] - 1);
    out.push_back(Term{m, t.coeff * static_cast<double>(t.idx.l[slot])});
  }
  return FourierTaylorSeries::from_terms(f.b(), std::move(out));
}

inline FourierTaylorSeries d_dtheta(const FourierTaylorSeries& f, int slot) {
  std::vector<Term> out;
  const Complex iu{0.0, 1.0};
  for (const Term& t : f.terms()) {
    if (t.idx.k[slot] == 0) continue;
    out.push_back(Term{t.idx, t.coeff * iu * static_cast<double>(t.idx.k[slot])});
  }
  return FourierTaylorSeries::from_terms(f.b(), std::move(out));
}

inline FourierTaylorSeries d_dw(const FourierTaylorSeries& f, const Site& n) {
  std::vector<Term> out;
  for (const Term& t : f.terms()) {
    int p = t.idx.alpha_pow(n);
    if (p == 0) continue;
    MultiIndex m = t.idx;
    m.add_alpha(n, -1);
    out.push_back(Term{m, t.coeff * static_cast<double>(p)});
  }
  return FourierTaylorSeries::from_terms(f.b(), std::move(out));
}

inline FourierTaylorSeries d_dwbar(const FourierTaylorSeries& f, const Site& n) {
  std::vector<Term> out;
  for (const Term& t : f.terms()) {
    int p = t.idx.beta_pow(n);
    if (p == 0) continue;
    MultiIndex m = t.idx;
    m.add_beta(n, -1);
    out.push_back(Term{m, t.coeff * static_cast<double>(p)});
  }
  return FourierTaylorSeries::from_terms(f.b(), std::move(out));
}

// Term-wise majorant of the sup of |F| over the weighted domain: each
// monomial is bounded by |c| e^{|k|_1 r} s^{2|l|+|alpha|+|beta|}
// e^{-rho sum |n| (alpha_n+beta_n)}.
inline double term_majorant(const Term& t, const WeightedDomain& d) {
  return std::abs(t.coeff) * std::exp(t.idx.k1() * d.r) *
         std::pow(d.s, 2 * t.idx.l1() + t.idx.z_degree()) *
         std::exp(-d.rho * t.idx.mode_weight());
}

inline double majorant_norm(const FourierTaylorSeries& f, const WeightedDomain& d) {
  double s = 0.0;
  for (const Term& t : f.terms()) s += term_majorant(t, d);
  return s;
}

// Weighted vector-field norm: ||F_I|| + s^{-2} ||F_theta||
// + s^{-1} sum_n e^{|n| rho} (||F_{w_n}|| + ||F_{wbar_n}||), each component
// measured by the majorant norm.
inline double vector_field_norm(const FourierTaylorSeries& f, const WeightedDomain& d) {
  double total = 0.0;
  for (int j = 0; j < f.b(); ++j) {
    double nI = 0.0, nTh = 0.0;
    for (const Term& t : f.terms()) {
      if (t.idx.l[j] > 0) {
        Term dt{t.idx, t.coeff * static_cast<double>(t.idx.l[j])};
        dt.idx.l[j] = static_cast<int16_t>(dt.idx.l[j] - 1);
        nI += term_majorant(dt, d);
      }
      if (t.idx.k[j] != 0) {
        nTh += std::abs(t.coeff) * std::abs(static_cast<double>(t.idx.k[j])) *
               std::exp(t.idx.k1() * d.r) *
               std::pow(d.s, 2 * t.idx.l1() + t.idx.z_degree()) *
               std::exp(-d.rho * t.idx.mode_weight());
      }
    }
    total += nI + nTh / (d.s * d.s);
  }
  double nW = 0.0;
  for (const Term& t : f.terms()) {
    for (int a = 0; a < t.idx.na; ++a) {
      const Site n = t.idx.alpha[a].site();
      Term dt{t.idx, t.coeff * static_cast<double>(t.idx.alpha[a].pow)};
      dt.idx.add_alpha(n, -1);
      nW += term_majorant(dt, d) * std::exp(std::sqrt(static_cast<double>(n.norm2())) * d.rho);
    }
    for (int a = 0; a < t.idx.nb; ++a) {
      const Site n = t.idx.beta[a].site();
      Term dt{t.idx, t.coeff * static_cast<double>(t.idx.beta[a].pow)};
      dt.idx.add_beta(n, -1);
      nW += term_majorant(dt, d) * std::exp(std::sqrt(static_cast<double>(n.norm2())) * d.rho);
    }
  }
  return total + nW / d.s;
}

// Low-order truncation used by the iterative scheme: keeps |k|_1 <= K and
//   - z-degree 0 with |l| <= 1,
//   - z-degree 1 with l = 0,
//   - z-degree 2 with l = 0 and the pair cutoffs |n+m| <= K for w_n w_m /
//     wbar_n wbar_m terms, |n-m| <= K for w_n wbar_m terms.
inline FourierTaylorSeries truncate_quadratic(const FourierTaylorSeries& p, int K) {
  if (K < 0) throw std::invalid_argument("truncate_quadratic: K must be nonnegative");
  const int64_t K2 = static_cast<int64_t>(K) * K;
  std::vector<Term> out;
  for (const Term& t : p.terms()) {
    const MultiIndex& m = t.idx;
    if (m.k1() > K) continue;
    const int z = m.z_degree();
    if (z == 0) {
      if (m.l1() <= 1) out.push_back(t);
      continue;
    }
    if (m.l1() != 0) continue;
    if (z == 1) {
      out.push_back(t);
      continue;
    }
    if (z != 2) continue;
    Site first{}, second{};
    bool same_letter;
    if (m.alpha_degree() == 2) {
      first = m.alpha[0].site();
      second = (m.na == 2) ? m.alpha[1].site() : first;
      same_letter = true;
    } else if (m.beta_degree() == 2) {
      first = m.beta[0].site();
      second = (m.nb == 2) ? m.beta[1].site() : first;
      same_letter = true;
    } else {
      first = m.alpha[0].site();
      second = m.beta[0].site();
      same_letter = false;
    }
    const Site combo = same_letter ? first + second : first - second;
    if (combo.norm2() <= K2) out.push_back(t);
  }
  return FourierTaylorSeries::from_terms(p.b(), std::move(out));
}

struct LieResult {
  FourierTaylorSeries series;
  double tail_majorant = 0.0;  // majorant of the first discarded Lie term
  uint64_t overflow_count = 0;
};

// Finite Lie series H + {H,F} + {({H,F}),F}/2! + ... up to `order` brackets.
// When a domain is supplied, the next (discarded) term's majorant norm is
// reported as the truncation-tail estimate.
inline LieResult lie_transform(const FourierTaylorSeries& h, const FourierTaylorSeries& f,
                               int order, const TruncationPolicy& pol = {},
                               const WeightedDomain* tail_domain = nullptr) {
  if (order < 1) throw std::invalid_argument("lie_transform: order must be >= 1");
  LieResult res{h, 0.0, 0};
  FourierTaylorSeries current = h;
  for (int j = 1; j <= order; ++j) {
    current = poisson_bracket(current, f, pol);
    current = scale(current, Complex{1.0 / j, 0.0});
    if (current.empty()) return res;
    res.series = add(res.series, current);
  }
  if (tail_domain != nullptr) {
    FourierTaylorSeries next = poisson_bracket(current, f, pol);
    res.tail_majorant = majorant_norm(next, *tail_domain) / (order + 1.0);
  }
  return res;
}

// Numerical evaluation at a phase-space point; beta exponents act on
// conj(w_n), matching evaluation on the physical slice wbar = conj(w).
inline Complex evaluate(const FourierTaylorSeries& f,
                        const std::array<double, kMaxB>& theta,
                        const std::array<double, kMaxB>& I,
                        const std::function<Complex(const Site&)>& w) {
  Complex total{};
  for (const Term& t : f.terms()) {
    double phase = 0.0;
    double amp = 1.0;
    for (int j = 0; j < f.b(); ++j) {
      phase += t.idx.k[j] * theta[j];
      for (int p = 0; p < t.idx.l[j]; ++p) amp *= I[j];
    }
    Complex v = t.coeff * amp * Complex{std::cos(phase), std::sin(phase)};
    for (int a = 0; a < t.idx.na; ++a) {
      const Complex wn = w(t.idx.alpha[a].site());
      for (int p = 0; p < t.idx.alpha[a].pow; ++p) v *= wn;
    }
    for (int a = 0; a < t.idx.nb; ++a) {
      const Complex wn = std::conj(w(t.idx.beta[a].site()));
      for (int p = 0; p < t.idx.beta[a].pow; ++p) v *= wn;
    }
    total += v;
  }
  return total;
}

// Largest absolute coefficient difference between two series.
inline double max_coeff_difference(const FourierTaylorSeries& f,
                                   const FourierTaylorSeries& g) {
  common_b(f, g);
  double m = 0.0;
  auto fi = f.terms().begin(), fe = f.terms().end();
  auto gi = g.terms().begin(), ge = g.terms().end();
  while (fi != fe || gi != ge) {
    if (gi == ge || (fi != fe && fi->idx < gi->idx)) {
      m = std::max(m, std::abs(fi->coeff));
      ++fi;
    } else if (fi == fe || gi->idx < fi->idx) {
      m = std::max(m, std::abs(gi->coeff));
      ++gi;
    } else {
      m = std::max(m, std::abs(fi->coeff - gi->coeff));
      ++fi, ++gi;
    }
  }
  return m;
}

}  // namespace kam
