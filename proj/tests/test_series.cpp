#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <complex>
#include <random>
#include <vector>

#include "kamtorus/series.hpp"

using namespace kam;

namespace {

const Complex I_UNIT{0.0, 1.0};

FourierTaylorSeries mono(int b, const MultiIndex& m, Complex c) {
  return FourierTaylorSeries::monomial(b, m, c);
}

// Random small series over a fixed mode pool; exponents kept small so that
// triple brackets stay within slot capacity.
FourierTaylorSeries random_series(std::mt19937_64& rng, int b, int nterms) {
  static const std::vector<Site> pool = {Site{1, 0}, Site{0, 1}, Site{1, 1},
                                         Site{2, -1}, Site{-1, 2}};
  std::uniform_int_distribution<int> kd(-2, 2), ld(0, 1), zd(0, 2), md(0, 4);
  std::uniform_real_distribution<double> cd(-1.0, 1.0);
  std::vector<Term> terms;
  for (int t = 0; t < nterms; ++t) {
    MultiIndex m;
    for (int j = 0; j < b; ++j) {
      m.k[j] = static_cast<int16_t>(kd(rng));
      m.l[j] = static_cast<int16_t>(ld(rng));
    }
    int za = zd(rng), zb = zd(rng);
    for (int a = 0; a < za; ++a) m.add_alpha(pool[md(rng)], 1);
    for (int a = 0; a < zb; ++a) m.add_beta(pool[md(rng)], 1);
    terms.push_back(Term{m, Complex{cd(rng), cd(rng)}});
  }
  return FourierTaylorSeries::from_terms(b, std::move(terms));
}

}  // namespace

TEST_CASE("bracket canonical pairs") {
  const Site n{3, 4};
  auto w = mono(2, MultiIndex{}.with_alpha(n, 1), 1.0);
  auto wbar = mono(2, MultiIndex{}.with_beta(n, 1), 1.0);
  auto br = poisson_bracket(w, wbar);
  REQUIRE(br.size() == 1);
  REQUIRE(br.coefficient(MultiIndex{}) == I_UNIT);

  // action against its own angle factor
  auto I0 = mono(2, MultiIndex{}.with_l(0, 1), 1.0);
  auto e0 = mono(2, MultiIndex{}.with_k(0, 1), 1.0);
  auto br2 = poisson_bracket(I0, e0);
  REQUIRE(br2.size() == 1);
  REQUIRE(br2.coefficient(MultiIndex{}.with_k(0, 1)) == I_UNIT);

  // distinct modes commute
  auto w2 = mono(2, MultiIndex{}.with_alpha(Site{1, 0}, 1), 1.0);
  REQUIRE(poisson_bracket(w2, wbar).empty());
}

TEST_CASE("bracket reproduces the linear mode flow") {
  // H = lambda w_n wbar_n generates dw/dt = {w, H} = i lambda w.
  const Site n{2, 1};
  const double lambda = 5.0;
  auto H = mono(0, MultiIndex{}.with_alpha(n, 1).with_beta(n, 1), lambda);
  auto w = mono(0, MultiIndex{}.with_alpha(n, 1), 1.0);
  auto dw = poisson_bracket(w, H);
  REQUIRE(dw.size() == 1);
  REQUIRE(dw.coefficient(MultiIndex{}.with_alpha(n, 1)) == I_UNIT * lambda);
}

TEST_CASE("bracket of actions against a Fourier mode") {
  // H = <omega, I>, F = c e^{i<k,theta>}: {H,F} = i <k,omega> F.
  const double w0 = 2.0, w1 = std::acos(-1.0);
  auto H = add(mono(2, MultiIndex{}.with_l(0, 1), w0),
               mono(2, MultiIndex{}.with_l(1, 1), w1));
  const Complex c{0.7, -0.3};
  auto F = mono(2, MultiIndex{}.with_k(0, 1).with_k(1, -2), c);
  auto br = poisson_bracket(H, F);
  REQUIRE(br.size() == 1);
  const Complex expect = I_UNIT * (1.0 * w0 - 2.0 * w1) * c;
  REQUIRE(std::abs(br.coefficient(MultiIndex{}.with_k(0, 1).with_k(1, -2)) - expect) <
          1e-15);
}

TEST_CASE("bracket antisymmetry and Jacobi identity") {
  std::mt19937_64 rng(20240816u);
  for (int rep = 0; rep < 25; ++rep) {
    auto F = random_series(rng, 2, 6);
    auto G = random_series(rng, 2, 6);
    auto H = random_series(rng, 2, 5);

    auto fg = poisson_bracket(F, G);
    auto gf = poisson_bracket(G, F);
    REQUIRE(max_coeff_difference(fg, scale(gf, -1.0)) < 1e-12);

    auto jac = add(add(poisson_bracket(fg, H), poisson_bracket(poisson_bracket(G, H), F)),
                   poisson_bracket(poisson_bracket(H, F), G));
    REQUIRE(jac.max_abs_coeff() < 1e-11);
  }
}

TEST_CASE("bracket satisfies the Leibniz rule") {
  std::mt19937_64 rng(777u);
  for (int rep = 0; rep < 15; ++rep) {
    auto F = random_series(rng, 2, 5);
    auto G = random_series(rng, 2, 4);
    auto H = random_series(rng, 2, 4);
    auto lhs = poisson_bracket(F, multiply(G, H));
    auto rhs = add(multiply(poisson_bracket(F, G), H), multiply(G, poisson_bracket(F, H)));
    REQUIRE(max_coeff_difference(lhs, rhs) < 1e-11);
  }
}

TEST_CASE("lie transform fixtures") {
  // H = 2 q1 qbar1 + 3 q2 qbar2, F = c q1 qbar2: the double bracket vanishes,
  // so every order >= 1 gives H + i c (3-2) q1 qbar2 exactly.
  const Site s1{1, 0}, s2{0, 1};
  auto H = add(mono(0, MultiIndex{}.with_alpha(s1, 1).with_beta(s1, 1), 2.0),
               mono(0, MultiIndex{}.with_alpha(s2, 1).with_beta(s2, 1), 3.0));
  const Complex c{0.5, 0.0};
  auto F = mono(0, MultiIndex{}.with_alpha(s1, 1).with_beta(s2, 1), c);

  auto r1 = lie_transform(H, F, 2);
  auto expected =
      add(H, mono(0, MultiIndex{}.with_alpha(s1, 1).with_beta(s2, 1), I_UNIT * c * 1.0));
  REQUIRE(max_coeff_difference(r1.series, expected) < 1e-15);

  auto r2 = lie_transform(H, F, 9);
  REQUIRE(max_coeff_difference(r2.series, r1.series) == 0.0);

  // F = 0 leaves H untouched.
  auto r0 = lie_transform(H, FourierTaylorSeries(0), 4);
  REQUIRE(max_coeff_difference(r0.series, H) == 0.0);
  REQUIRE(r0.tail_majorant == 0.0);
}

TEST_CASE("majorant norm fixtures") {
  WeightedDomain D(0.5, 0.2, 0.1);

  auto F1 = mono(2, MultiIndex{}.with_k(0, 2).with_k(1, -1), Complex{3.0, 4.0});
  REQUIRE(majorant_norm(F1, D) == Catch::Approx(5.0 * std::exp(3 * 0.5)).epsilon(1e-14));

  const Site n{3, 4};
  auto F2 = mono(2, MultiIndex{}.with_alpha(n, 1), 1.0);
  REQUIRE(majorant_norm(F2, D) == Catch::Approx(0.2 * std::exp(-0.1 * 5.0)).epsilon(1e-14));

  auto F3 = mono(2, MultiIndex{}.with_l(1, 1), 1.0);
  REQUIRE(majorant_norm(F3, D) == Catch::Approx(0.04).epsilon(1e-14));

  // homogeneity under coefficient scaling
  auto F4 = scale(F1, Complex{0.0, 2.0});
  REQUIRE(majorant_norm(F4, D) == Catch::Approx(2.0 * majorant_norm(F1, D)).epsilon(1e-14));
}

TEST_CASE("vector field norm fixtures") {
  WeightedDomain D(0.3, 0.11, 0.07);

  // F = <omega, I>: only the I-gradient contributes, giving sum |omega_j|.
  auto F = add(mono(2, MultiIndex{}.with_l(0, 1), 2.5),
               mono(2, MultiIndex{}.with_l(1, 1), -1.5));
  REQUIRE(vector_field_norm(F, D) == Catch::Approx(4.0).epsilon(1e-14));

  // F = w_n wbar_n: the two mode derivatives give s e^{-|n|rho} each, and the
  // e^{|n|rho}/s weight cancels everything: the norm is exactly 2.
  const Site n{5, -2};
  auto G = mono(2, MultiIndex{}.with_alpha(n, 1).with_beta(n, 1), 1.0);
  REQUIRE(vector_field_norm(G, D) == Catch::Approx(2.0).epsilon(1e-14));
}

TEST_CASE("majorant norm is submultiplicative") {
  std::mt19937_64 rng(4242u);
  WeightedDomain D(0.4, 0.3, 0.05);
  for (int rep = 0; rep < 20; ++rep) {
    auto F = random_series(rng, 2, 6);
    auto G = random_series(rng, 2, 6);
    double lhs = majorant_norm(multiply(F, G), D);
    double rhs = majorant_norm(F, D) * majorant_norm(G, D);
    REQUIRE(lhs <= rhs * (1.0 + 1e-12));
  }
}

TEST_CASE("angle-derivative Cauchy estimate on monomials") {
  // For F = c e^{i<k,theta>}: sum_j ||F_theta_j|| on the domain shrunk by
  // sigma is |c| |k|_1 e^{|k|_1 (r-sigma)} <= |c| e^{|k|_1 r} / (e sigma).
  WeightedDomain D(0.5, 0.2, 0.1);
  const double sigma = 0.15;
  WeightedDomain Ds(D.r - sigma, D.s, D.rho);
  for (int k0 = -3; k0 <= 3; ++k0) {
    for (int k1 = 0; k1 <= 3; ++k1) {
      if (k0 == 0 && k1 == 0) continue;
      auto F = mono(2, MultiIndex{}.with_k(0, k0).with_k(1, k1), Complex{1.2, -0.4});
      double lhs = majorant_norm(d_dtheta(F, 0), Ds) + majorant_norm(d_dtheta(F, 1), Ds);
      double rhs = majorant_norm(F, D) / (std::exp(1.0) * sigma);
      REQUIRE(lhs <= rhs * (1.0 + 1e-12));
    }
  }
}

TEST_CASE("quadratic truncation rules") {
  const int K = 3;
  const Site a{1, 0}, bneart{2, 1}, far{9, 9};

  std::vector<Term> terms;
  auto keep_k = MultiIndex{}.with_k(0, 2).with_k(1, -1).with_l(0, 1);  // |k|=3, l=1, z=0
  auto cut_k = MultiIndex{}.with_k(0, 3).with_k(1, -1);                // |k|=4
  auto cut_l2 = MultiIndex{}.with_l(0, 2);                             // |l|=2
  auto keep_lin = MultiIndex{}.with_k(0, 1).with_alpha(a, 1);          // z=1, l=0
  auto cut_lin_l = MultiIndex{}.with_l(1, 1).with_alpha(a, 1);         // z=1, l=1
  auto keep_11 = MultiIndex{}.with_alpha(a, 1).with_beta(bneart, 1);   // |n-m|^2=2
  auto cut_11 = MultiIndex{}.with_alpha(a, 1).with_beta(far, 1);       // |n-m| big
  auto keep_20 = MultiIndex{}.with_alpha(a, 1).with_alpha(bneart, 1);  // |n+m|^2=10 > 9? no
  auto cut_20 = MultiIndex{}.with_alpha(bneart, 2);                    // |2n|^2=20
  auto cut_cubic = MultiIndex{}.with_alpha(a, 2).with_beta(a, 1);      // z=3

  for (auto& m : {keep_k, cut_k, cut_l2, keep_lin, cut_lin_l, keep_11, cut_11, keep_20,
                  cut_20, cut_cubic}) {
    terms.push_back(Term{m, 1.0});
  }
  auto P = FourierTaylorSeries::from_terms(2, std::move(terms));
  auto R = truncate_quadratic(P, K);

  REQUIRE(R.coefficient(keep_k) == Complex{1.0, 0.0});
  REQUIRE(R.coefficient(cut_k) == Complex{});
  REQUIRE(R.coefficient(cut_l2) == Complex{});
  REQUIRE(R.coefficient(keep_lin) == Complex{1.0, 0.0});
  REQUIRE(R.coefficient(cut_lin_l) == Complex{});
  REQUIRE(R.coefficient(keep_11) == Complex{1.0, 0.0});
  REQUIRE(R.coefficient(cut_11) == Complex{});
  // |a + bneart|^2 = |(3,1)|^2 = 10 > K^2 = 9: cut.
  REQUIRE(R.coefficient(keep_20) == Complex{});
  REQUIRE(R.coefficient(cut_20) == Complex{});
  REQUIRE(R.coefficient(cut_cubic) == Complex{});

  // A same-letter pair within range is kept: n = m = (1,0), |n+m|^2 = 4.
  auto small_20 = MultiIndex{}.with_alpha(a, 2);
  auto Q = truncate_quadratic(mono(2, small_20, 2.0), K);
  REQUIRE(Q.coefficient(small_20) == Complex{2.0, 0.0});
}

TEST_CASE("evaluation is consistent with the algebra") {
  std::mt19937_64 rng(99u);
  std::uniform_real_distribution<double> rd(-0.8, 0.8);
  for (int rep = 0; rep < 10; ++rep) {
    auto F = random_series(rng, 2, 5);
    auto G = random_series(rng, 2, 5);
    std::array<double, kMaxB> theta{rd(rng), rd(rng), 0, 0};
    std::array<double, kMaxB> I{0.3 + 0.1 * rd(rng), 0.2 + 0.1 * rd(rng), 0, 0};
    auto wfun = [&](const Site& n) {
      return Complex{0.05 * (n.x - n.y), 0.02 * (n.x + n.y)};
    };
    Complex lhs = evaluate(multiply(F, G), theta, I, wfun);
    Complex rhs = evaluate(F, theta, I, wfun) * evaluate(G, theta, I, wfun);
    REQUIRE(std::abs(lhs - rhs) < 1e-12);

    Complex sum = evaluate(add(F, G), theta, I, wfun);
    REQUIRE(std::abs(sum - (evaluate(F, theta, I, wfun) + evaluate(G, theta, I, wfun))) <
            1e-12);
  }

  // single-monomial fixture: e^{i theta_0} I_1 w_n at a concrete point
  const Site n{1, 1};
  auto M = mono(2, MultiIndex{}.with_k(0, 1).with_l(1, 1).with_alpha(n, 1), 2.0);
  std::array<double, kMaxB> theta{0.25, -1.0, 0, 0};
  std::array<double, kMaxB> I{9.0, 0.5, 0, 0};
  auto wf = [](const Site&) { return Complex{0.3, 0.4}; };
  Complex expect = 2.0 * std::exp(I_UNIT * 0.25) * 0.5 * Complex{0.3, 0.4};
  REQUIRE(std::abs(evaluate(M, theta, I, wf) - expect) < 1e-14);
}

TEST_CASE("accumulator merging and drop tolerance") {
  SeriesAccumulator acc(2);
  auto m1 = MultiIndex{}.with_k(0, 1);
  acc.add(m1, Complex{1.0, 0.0});
  acc.add(m1, Complex{-1.0, 0.0});
  acc.add(MultiIndex{}.with_l(0, 1), Complex{2.0, 0.0});
  acc.add(MultiIndex{}.with_l(1, 1), Complex{1e-18, 0.0});
  TruncationPolicy pol;
  pol.drop_tol_rel = 1e-12;
  auto S = acc.finalize(pol);
  REQUIRE(S.size() == 1);  // exact cancellation and tiny term both dropped
  REQUIRE(S.coefficient(MultiIndex{}.with_l(0, 1)) == Complex{2.0, 0.0});
}

TEST_CASE("truncation policy caps inside the bracket") {
  // A bracket product exceeding z_cap is not stored.
  const Site s1{1, 0}, s2{0, 1};
  auto F = mono(0, MultiIndex{}.with_alpha(s1, 2).with_beta(s2, 1), 1.0);
  auto G = mono(0, MultiIndex{}.with_alpha(s2, 2).with_beta(s1, 1), 1.0);
  TruncationPolicy pol;
  pol.z_cap = 2;
  REQUIRE(poisson_bracket(F, G, pol).empty());
  REQUIRE_FALSE(poisson_bracket(F, G).empty());
}
