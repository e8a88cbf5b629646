#include <catch2/catch_amalgamated.hpp>

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <complex>
#include <random>
#include <vector>

#include "kamtorus/homological_solver.hpp"

using namespace kam;

namespace {

const Complex I_UNIT{0.0, 1.0};
const std::vector<Site> kDeskS{{1, 0}, {0, 1}};

Parameters desk_params() { return Parameters({1.0, 1.25}, 0.125); }

// Tangential frequencies of the reference instance, slot order (0,1), (1,0).
const std::vector<double> kDeskOmega{512.08865603568711, 512.08232346170939};

// Frozen creation-pair block of the reference instance.
Eigen::Matrix2d desk_pair_block() {
  Eigen::Matrix2d A;
  A << -511.96833713011176, -0.056640263546251755,  //
      0.056640263546251755, -512.02533029591063;
  return A;
}

Eigen::MatrixXcd random_hermitian(std::mt19937& rng, int n, bool complex_entries) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  Eigen::MatrixXcd G(n, n);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      G(i, j) = Complex{u(rng), complex_entries ? u(rng) : 0.0};
    }
  }
  return 0.5 * (G + G.adjoint().eval());
}

// Conjugate monomial: k -> -k, creation and annihilation letters swapped.
MultiIndex mirror_index(const MultiIndex& m) {
  MultiIndex out{};
  for (int j = 0; j < kMaxB; ++j) {
    out.k[j] = static_cast<int16_t>(-m.k[j]);
    out.l[j] = m.l[j];
  }
  for (int a = 0; a < m.na; ++a) out.add_beta(m.alpha[a].site(), m.alpha[a].pow);
  for (int a = 0; a < m.nb; ++a) out.add_alpha(m.beta[a].site(), m.beta[a].pow);
  return out;
}

}  // namespace

TEST_CASE("scalar channel: formula, kept harmonic, floor") {
  // i <k,omega> f = -r  =>  f = i r / <k,omega>; here <k,omega> = 2.
  const Complex f = solve_scalar({1, 0}, {2.0, 3.14159}, Complex{1.0, 0.0});
  CHECK(f.real() == 0.0);
  CHECK(f.imag() == Catch::Approx(0.5).epsilon(1e-15));
  CHECK(solve_scalar({3, -2}, {1.5, 0.25}, Complex{}) == Complex{});

  CHECK_THROWS_AS(solve_scalar({0, 0}, {1.0, 1.0}, Complex{1.0, 0.0}),
                  std::invalid_argument);
  CHECK_THROWS_AS(solve_scalar({1}, {1.0, 1.0}, Complex{1.0, 0.0}),
                  std::invalid_argument);

  // Divisor 1e-8 against floor 1e-4 / 10^2 = 1e-6.
  DivisorFloor floor;
  floor.gamma = 1e-4;
  floor.K = 10.0;
  floor.tau = 2.0;
  try {
    solve_scalar({1, -1}, {1.0, 1.0 - 1e-8}, Complex{1.0, 0.0}, floor);
    FAIL("expected a small-divisor error");
  } catch (const SmallDivisorError& e) {
    REQUIRE(e.reports().size() == 1);
    const SmallDivisorReport& rep = e.reports()[0];
    CHECK(rep.kind == DivisorKind::Scalar);
    CHECK(rep.flagged());
    CHECK(rep.divisor_value == Catch::Approx(1e-8).epsilon(1e-6));
    CHECK(rep.threshold == Catch::Approx(1e-6).epsilon(1e-15));
    CHECK(rep.k == std::vector<int>{1, -1});
  }
}

TEST_CASE("block diagonalization: symmetric, Hermitian, and rejected inputs") {
  Eigen::MatrixXcd S(2, 2);
  S << 0.0, 1.0, 1.0, 0.0;
  const BlockDiagonalization d = diagonalize_block(S);
  CHECK_FALSE(d.hermitian_path);
  CHECK(d.lambda[0] == Catch::Approx(-1.0).epsilon(1e-14));
  CHECK(d.lambda[1] == Catch::Approx(1.0).epsilon(1e-14));
  CHECK(d.residual <= 1e-12);

  std::mt19937 rng(2024);
  for (int rep = 0; rep < 20; ++rep) {
    const int n = 2 + static_cast<int>(rng() % 5);
    const bool cplx = (rep % 2 == 1);
    const Eigen::MatrixXcd A = random_hermitian(rng, n, cplx);
    const BlockDiagonalization dg = diagonalize_block(A);
    CHECK(dg.hermitian_path == (A.imag().cwiseAbs().maxCoeff() > 0.0));
    const double scale = std::max(A.cwiseAbs().maxCoeff(), 1.0);
    CHECK((dg.Q * dg.lambda.cast<Complex>().asDiagonal() * dg.Q.adjoint() - A)
              .cwiseAbs()
              .maxCoeff() <= 1e-10 * scale);
    CHECK((dg.Q.adjoint() * dg.Q - Eigen::MatrixXcd::Identity(n, n))
              .cwiseAbs()
              .maxCoeff() <= 1e-12 * n);
    CHECK(std::is_sorted(dg.lambda.data(), dg.lambda.data() + n));
    if (!dg.hermitian_path) {
      CHECK(dg.Q.imag().cwiseAbs().maxCoeff() == 0.0);
    }
  }

  Eigen::MatrixXcd bad(2, 2);
  bad << 0.0, 1.0, 0.0, 0.0;
  CHECK_THROWS_AS(diagonalize_block(bad), std::invalid_argument);
  CHECK_THROWS_AS(diagonalize_block(Eigen::MatrixXcd(0, 0)), std::invalid_argument);
}

TEST_CASE("block vector channel: diagonal formula, residual, near-resonance") {
  // Diagonal block: f_j = i r_j / (d + sign lambda_j) with d = 5.
  Eigen::MatrixXcd A = Eigen::MatrixXcd::Zero(2, 2);
  A(0, 0) = 1.0;
  A(1, 1) = 2.0;
  Eigen::VectorXcd r(2);
  r << Complex{1.0, 0.0}, Complex{1.0, 0.0};
  const Eigen::VectorXcd f = solve_block_vector({1, 0}, {5.0, 0.0}, A, r, -1);
  CHECK(f[0].imag() == Catch::Approx(0.25).epsilon(1e-15));
  CHECK(f[1].imag() == Catch::Approx(1.0 / 3.0).epsilon(1e-15));

  std::mt19937 rng(77);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (int rep = 0; rep < 50; ++rep) {
    const int n = 2 + static_cast<int>(rng() % 5);
    const Eigen::MatrixXcd B = random_hermitian(rng, n, rep % 2 == 0);
    Eigen::VectorXcd rhs(n);
    for (int i = 0; i < n; ++i) rhs[i] = Complex{u(rng), u(rng)};
    const int sign = (rep % 2 == 0) ? 1 : -1;
    const std::vector<int> k{1, 1};
    const std::vector<double> om{2.0 + u(rng), 1.0 + u(rng)};
    const double d = om[0] + om[1];
    const Eigen::VectorXcd x = solve_block_vector(k, om, B, rhs, sign);
    const Eigen::VectorXcd resid =
        (d * Eigen::MatrixXcd::Identity(n, n) + static_cast<double>(sign) * B) * x -
        I_UNIT * rhs;
    CHECK(resid.cwiseAbs().maxCoeff() <= 1e-10 * rhs.cwiseAbs().maxCoeff());
  }

  // Eigenvalue within 1e-9 of -d: flagged against floor 1e-6.
  DivisorFloor floor;
  floor.gamma = 1e-6;
  floor.K = 1.0;
  floor.tau = 0.0;
  Eigen::MatrixXcd C = Eigen::MatrixXcd::Zero(2, 2);
  C(0, 0) = 1.0 + 1e-9;
  C(1, 1) = 3.0;
  try {
    solve_block_vector({1}, {1.0}, C, Eigen::VectorXcd::Ones(2), -1, floor);
    FAIL("expected a small-divisor error");
  } catch (const SmallDivisorError& e) {
    REQUIRE(e.reports().size() == 1);
    CHECK(e.reports()[0].kind == DivisorKind::BlockEigen);
    CHECK(e.reports()[0].divisor_value == Catch::Approx(1e-9).epsilon(1e-5));
  }

  CHECK_THROWS_AS(solve_block_vector({1}, {1.0}, C, Eigen::VectorXcd::Ones(3), -1),
                  std::invalid_argument);
  CHECK_THROWS_AS(solve_block_vector({1}, {1.0}, C, Eigen::VectorXcd::Ones(2), 2),
                  std::invalid_argument);
}

TEST_CASE("Sylvester channel: diagonal case, residual, reference cross-check") {
  // 1x1 blocks: divisor d - lambda_A + lambda_B = 2 - 1 + 2 = 3.
  Eigen::MatrixXcd A(1, 1), B(1, 1), C(1, 1);
  A << 1.0;
  B << 2.0;
  C << Complex{3.0, 0.0};
  const Eigen::MatrixXcd X = solve_sylvester({1}, {2.0}, A, B, C, -1, 1);
  CHECK(X(0, 0).imag() == Catch::Approx(1.0).epsilon(1e-15));

  std::mt19937 rng(4242);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (int rep = 0; rep < 40; ++rep) {
    const int n = 1 + static_cast<int>(rng() % 6);
    const int m = 1 + static_cast<int>(rng() % 6);
    const Eigen::MatrixXcd Ah = random_hermitian(rng, n, rep % 2 == 0);
    const Eigen::MatrixXcd Bh = random_hermitian(rng, m, rep % 3 == 0);
    Eigen::MatrixXcd Ch(n, m);
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < m; ++j) Ch(i, j) = Complex{u(rng), u(rng)};
    }
    const int s1 = (rep % 2 == 0) ? -1 : 1;
    const int s2 = (rep % 3 == 0) ? 1 : -1;
    const double d = 8.0 + u(rng);  // far from all eigenvalue combinations
    const Eigen::MatrixXcd Xs = solve_sylvester({1}, {d}, Ah, Bh, Ch, s1, s2);
    const Eigen::MatrixXcd resid = d * Xs + static_cast<double>(s1) * Ah * Xs +
                                   static_cast<double>(s2) * Xs * Bh - I_UNIT * Ch;
    CHECK(resid.cwiseAbs().maxCoeff() <= 1e-10 * Ch.cwiseAbs().maxCoeff());

    // Same system through the vectorized reference path.
    const Eigen::MatrixXcd Xd = detail::sylvester_dense(d, Ah, Bh, I_UNIT * Ch, s1, s2);
    CHECK((Xs - Xd).cwiseAbs().maxCoeff() <= 1e-9 * Xs.cwiseAbs().maxCoeff());
  }

  CHECK_THROWS_AS(solve_sylvester({1}, {2.0}, A, B, Eigen::MatrixXcd::Ones(2, 1), -1, 1),
                  std::invalid_argument);
  CHECK_THROWS_AS(solve_sylvester({1}, {2.0}, A, B, C, 0, 1), std::invalid_argument);
}

TEST_CASE("Sylvester solvability matches the spectral criterion") {
  DivisorFloor floor;
  floor.gamma = 1e-6;
  floor.K = 1.0;
  floor.tau = 0.0;
  const double eff = floor.effective();

  std::mt19937 rng(1313);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  int solvable = 0, blocked = 0;
  for (int rep = 0; rep < 1000; ++rep) {
    const int n = 1 + static_cast<int>(rng() % 6);
    const int m = 1 + static_cast<int>(rng() % 6);
    const Eigen::MatrixXcd Ah = random_hermitian(rng, n, rep % 2 == 0);
    const Eigen::MatrixXcd Bh = random_hermitian(rng, m, rep % 5 == 0);
    const int s1 = (rep % 2 == 0) ? -1 : 1;
    const int s2 = (rep % 3 == 0) ? 1 : -1;
    const Eigen::VectorXd la = diagonalize_block(Ah).lambda;
    const Eigen::VectorXd lb = diagonalize_block(Bh).lambda;
    double d = 3.0 * u(rng);
    if (rep % 3 == 0) {
      // Plant d near an exact resonance so both branches are exercised.
      const int i = static_cast<int>(rng() % n), j = static_cast<int>(rng() % m);
      d = -(s1 * la[i] + s2 * lb[j]) + 2.0 * eff * u(rng);
    }
    Eigen::MatrixXcd Ch(n, m);
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < m; ++j) Ch(i, j) = Complex{u(rng), u(rng)};
    }
    const bool spectral_ok = sylvester_min_divisor(d, la, lb, s1, s2) >= eff;
    bool op_ok = true;
    try {
      const Eigen::MatrixXcd Xs = solve_sylvester({1}, {d}, Ah, Bh, Ch, s1, s2, floor);
      const Eigen::MatrixXcd resid = d * Xs + static_cast<double>(s1) * Ah * Xs +
                                     static_cast<double>(s2) * Xs * Bh - I_UNIT * Ch;
      CHECK(resid.cwiseAbs().maxCoeff() <= 1e-10 * Ch.cwiseAbs().maxCoeff() /
                                               std::max(1e-6, sylvester_min_divisor(
                                                                  d, la, lb, s1, s2)));
    } catch (const SmallDivisorError&) {
      op_ok = false;
    }
    REQUIRE(op_ok == spectral_ok);
    (op_ok ? solvable : blocked) += 1;
  }
  // The planted cases must actually produce both outcomes.
  CHECK(solvable > 0);
  CHECK(blocked > 100);
}

TEST_CASE("vectorized reference solver reproduces the frozen system") {
  // A X - X B = C with the frozen non-Hermitian data; solution computed
  // independently and pinned.
  Eigen::MatrixXcd A(2, 2), B(2, 2), C(2, 2);
  A << 2.0, 1.0, 0.0, 3.0;
  B << 1.0, 1.0, 0.0, 1.0;
  C << 1.0, 2.0, 3.0, 4.0;
  const Eigen::MatrixXcd X = detail::sylvester_dense(0.0, A, B, C, 1, -1);
  CHECK(X(0, 0).real() == Catch::Approx(-0.5).epsilon(1e-13));
  CHECK(X(0, 1).real() == Catch::Approx(-1.25).epsilon(1e-13));
  CHECK(X(1, 0).real() == Catch::Approx(1.5).epsilon(1e-13));
  CHECK(X(1, 1).real() == Catch::Approx(2.75).epsilon(1e-13));
  CHECK(X.imag().cwiseAbs().maxCoeff() <= 1e-14);
  CHECK((A * X - X * B - C).cwiseAbs().maxCoeff() <= 1e-13);
}

TEST_CASE("coupled-pair channels match the frozen solves") {
  const Eigen::Matrix2d A = desk_pair_block();
  const Eigen::Matrix2d Z = Eigen::Matrix2d::Zero();

  SECTION("mixed channel at shift 0.1") {
    const Eigen::Matrix2d M = detail::l2_mixed_matrix(0.1, A, -1);
    CHECK(M.determinant() == Catch::Approx(262243.16949495566).epsilon(1e-13));
    Eigen::VectorXcd rhs(2);
    rhs << Complex{1.0, 0.0}, Complex{0.0, 1.0};
    const Eigen::VectorXcd F = solve_l2_coupled({0, 0}, kDeskOmega, A, Z, rhs,
                                                L2CoupledCase::MixedMinus, 0.1);
    CHECK(F[0].real() == Catch::Approx(2.159837514751409e-7).epsilon(1e-12));
    CHECK(F[0].imag() == Catch::Approx(0.0019528643254357919).epsilon(1e-12));
    CHECK(F[1].real() == Catch::Approx(-0.0019526469959781415).epsilon(1e-12));
    CHECK(F[1].imag() == Catch::Approx(2.159837514751409e-7).epsilon(1e-12));
  }

  SECTION("pair-pair channel at the first tangential frequency") {
    const double d = kDeskOmega[0];
    const Eigen::Matrix4d M4 = detail::l2_pair_matrix(d, A, A);
    CHECK(M4.determinant() == Catch::Approx(68767088460.028625).epsilon(1e-11));
    // Closed-form determinant of the Kronecker sum agrees.
    Eigen::Matrix2d dIA = d * Eigen::Matrix2d::Identity() - A;
    CHECK(kron_det_closed_form(dIA, A, +1) ==
          Catch::Approx(68767088460.028625).epsilon(1e-10));

    Eigen::VectorXcd rhs = Eigen::VectorXcd::Zero(4);
    rhs[1] = Complex{1.0, 0.0};
    const Eigen::VectorXcd F =
        solve_l2_coupled({1, 0}, kDeskOmega, A, A, rhs, L2CoupledCase::PairPair);
    CHECK(F[0].real() == 0.0);
    CHECK(F[1].real() == 0.0);
    CHECK(F[2].real() == 0.0);
    CHECK(F[3].real() == 0.0);
    CHECK(F[0].imag() == Catch::Approx(2.1601468259917894e-7).epsilon(1e-11));
    CHECK(F[1].imag() == Catch::Approx(0.0019530041754153233).epsilon(1e-12));
    CHECK(F[2].imag() == Catch::Approx(4.7779878912781432e-11).margin(1e-15));
    CHECK(F[3].imag() == Catch::Approx(2.1601468259917894e-7).epsilon(1e-11));
  }

  SECTION("zero right-hand side and the singular zero-shift pair channel") {
    CHECK(solve_l2_coupled({1, 0}, kDeskOmega, A, Z, Eigen::VectorXcd::Zero(2),
                           L2CoupledCase::MixedPlus)
              .cwiseAbs()
              .maxCoeff() == 0.0);
    // At zero total shift the same-pair channel is exactly singular: this is
    // the kept direction, and the solver must refuse it.
    try {
      solve_l2_coupled({0, 0}, kDeskOmega, A, A, Eigen::VectorXcd::Ones(4),
                       L2CoupledCase::PairPair);
      FAIL("expected a small-divisor error");
    } catch (const SmallDivisorError& e) {
      REQUIRE(e.reports().size() == 1);
      CHECK(e.reports()[0].kind == DivisorKind::Tensor4);
    }
    CHECK_THROWS_AS(solve_l2_coupled({0, 0}, kDeskOmega, A, Z,
                                     Eigen::VectorXcd::Ones(3),
                                     L2CoupledCase::MixedPlus),
                    std::invalid_argument);
  }
}

TEST_CASE("divisor survey: silence at gamma zero and an engineered flag") {
  const std::vector<double> lams{1.0};
  for (int k1 = -3; k1 <= 3; ++k1) {
    CHECK(divisor_floor({k1, 0}, {1.0, 2.0}, lams, {0.0}, 0.0, 10.0, 2.0).empty());
  }

  // d - lambda = 5e-7 below the floor 1e-4 / 10^2 = 1e-6.
  const auto reps =
      divisor_floor({1, 0}, {1.0 + 5e-7, 10.0}, lams, {}, 1e-4, 10.0, 2.0);
  REQUIRE(reps.size() == 1);
  CHECK(reps[0].kind == DivisorKind::BlockEigen);
  CHECK(reps[0].indices == "-lambda[0]");
  CHECK(reps[0].divisor_value == Catch::Approx(5e-7).epsilon(1e-9));
  CHECK(reps[0].flagged());

  CHECK_THROWS_AS(divisor_floor({11, 0}, {1.0, 1.0}, lams, {}, 1e-4, 10.0, 2.0),
                  std::invalid_argument);
  CHECK_THROWS_AS(divisor_floor({1, 0}, {1.0, 1.0}, lams, {}, 1e-4, 0.5, 2.0),
                  std::invalid_argument);
}

TEST_CASE("divisor survey matches the frozen grid counts") {
  const std::vector<double> lams{0.11398633159763, 1024.2562047752208};
  const std::vector<double> dets{1e-20, 0.5};

  auto census = [&](double gamma, double K, double tau) {
    int scalar = 0, block = 0, tensor = 0;
    for (int k1 = -10; k1 <= 10; ++k1) {
      for (int k2 = -10; k2 <= 10; ++k2) {
        if (std::abs(k1) + std::abs(k2) > 10) continue;
        for (const auto& rep :
             divisor_floor({k1, k2}, kDeskOmega, lams, dets, gamma, K, tau)) {
          CHECK(rep.flagged());
          switch (rep.kind) {
            case DivisorKind::Scalar: ++scalar; break;
            case DivisorKind::BlockEigen: ++block; break;
            case DivisorKind::Tensor4: ++tensor; break;
          }
        }
      }
    }
    return std::array<int, 3>{scalar, block, tensor};
  };

  // gamma 1e-4, K 10, tau 2: only the degenerate determinant is flagged,
  // once per grid harmonic (221 points including k = 0).
  const auto c1 = census(1e-4, 10.0, 2.0);
  CHECK(c1[0] == 0);
  CHECK(c1[1] == 0);
  CHECK(c1[2] == 221);

  // gamma 0.5, K 10, tau 1: 10 scalar flags, 18 eigenvalue-pair flags, and
  // the same 221 determinant flags; 249 in total.
  const auto c2 = census(0.5, 10.0, 1.0);
  CHECK(c2[0] == 10);
  CHECK(c2[1] == 18);
  CHECK(c2[2] == 221);
  CHECK(c2[0] + c2[1] + c2[2] == 249);
}

TEST_CASE("divisor reports serialize to sorted-key JSON lines") {
  SmallDivisorReport rep;
  rep.kind = DivisorKind::Tensor4;
  rep.divisor_value = 0.125;
  rep.threshold = 0.25;
  rep.k = {1, -2};
  rep.indices = "det[0]";
  CHECK(rep.to_json_line() ==
        "{\"divisor\":0.125,\"flagged\":true,\"indices\":\"det[0]\","
        "\"k\":[1,-2],\"kind\":\"tensor4\",\"threshold\":0.25}");

  rep.kind = DivisorKind::Scalar;
  rep.divisor_value = 0.5;
  rep.threshold = 0.1;
  rep.k = {};
  rep.indices = "";
  CHECK(rep.to_json_line() ==
        "{\"divisor\":0.5,\"flagged\":false,\"indices\":\"\",\"k\":[],"
        "\"kind\":\"scalar\",\"threshold\":0.10000000000000001}");
}

TEST_CASE("equal-norm clusters and extraction of the reference form") {
  const auto res = build_normal_form(desk_params(), kDeskS, 2, 4);
  const HomologicalData D = homological_data_from_state(res.state);

  REQUIRE(D.b == 2);
  CHECK(D.omega[0] == Catch::Approx(kDeskOmega[0]).epsilon(1e-15));
  CHECK(D.omega[1] == Catch::Approx(kDeskOmega[1]).epsilon(1e-15));

  // Mode bound 2: 11 retained modes in 4 norm shells.
  REQUIRE(D.clusters.size() == 4);
  CHECK(D.clusters[0] == std::vector<Site>{{0, 0}});
  CHECK(D.clusters[1] == std::vector<Site>{{-1, 0}, {0, -1}});
  CHECK(D.clusters[2] == std::vector<Site>{{-1, -1}, {-1, 1}, {1, -1}, {1, 1}});
  CHECK(D.clusters[3] == std::vector<Site>{{-2, 0}, {0, -2}, {0, 2}, {2, 0}});

  REQUIRE(D.couplings.size() == 1);
  CHECK(D.couplings[0].n == Site{0, 0});
  CHECK(D.couplings[0].m == Site{1, 1});
  CHECK(D.couplings[0].value.real() ==
        Catch::Approx(0.056640263546251755).epsilon(1e-13));
  CHECK(D.couplings[0].value.imag() == 0.0);
  CHECK(D.is_coupling_letter(Site{0, 0}));
  CHECK(D.is_coupling_letter(Site{1, 1}));
  CHECK_FALSE(D.is_coupling_letter(Site{-1, 1}));

  // Reduced diagonal: creation-pair letters carry the shifted gaps, the
  // rotated first-type pair carries its two branch frequencies, plain modes
  // keep their first-order frequency.
  CHECK(D.diag(Site{0, 0}) == Catch::Approx(-511.96833713011176).epsilon(1e-13));
  CHECK(D.diag(Site{1, 1}) == Catch::Approx(512.02533029591063).epsilon(1e-13));
  CHECK(D.diag(Site{-1, 0}) == Catch::Approx(1024.2562047752208).epsilon(1e-13));
  CHECK(D.diag(Site{0, -1}) == Catch::Approx(1024.142747385371).epsilon(1e-13));
  CHECK(D.diag(Site{-1, 1}) == Catch::Approx(1024.1139863315977).epsilon(1e-13));

  // All cluster blocks are diagonal at this stage.
  for (const auto& blk : D.blocks) {
    Eigen::MatrixXcd off = blk;
    off.diagonal().setZero();
    CHECK(off.cwiseAbs().maxCoeff() == 0.0);
  }

  // Malformed forms are rejected.
  const Site p{1, 1}, q{-1, 1}, far{2, 0};
  const std::vector<Site> modes{{-1, 1}, {1, 1}, {2, 0}};
  const auto clusters = equal_norm_clusters(modes);
  auto freq_terms = [&] {
    std::vector<Term> ts;
    MultiIndex l0{};
    l0.l[0] = 1;
    MultiIndex l1{};
    l1.l[1] = 1;
    ts.push_back(Term{l0, Complex{1.0, 0.0}});
    ts.push_back(Term{l1, Complex{1.0, 0.0}});
    return ts;
  };

  {
    auto ts = freq_terms();
    MultiIndex m{};
    m.add_alpha(p, 1);
    m.add_beta(q, 1);
    ts.push_back(Term{m, Complex{1.0, 0.0}});  // no conjugate partner
    const auto N = FourierTaylorSeries::from_terms(2, ts);
    CHECK_THROWS_AS(extract_homological_data(N, modes, clusters),
                    std::invalid_argument);
  }
  {
    auto ts = freq_terms();
    MultiIndex m{};
    m.add_alpha(p, 1);
    m.add_beta(far, 1);  // crosses norm shells
    ts.push_back(Term{m, Complex{1.0, 0.0}});
    const auto N = FourierTaylorSeries::from_terms(2, ts);
    CHECK_THROWS_AS(extract_homological_data(N, modes, clusters),
                    std::invalid_argument);
  }
  {
    auto ts = freq_terms();
    MultiIndex m{};
    m.add_alpha(p, 1);
    m.add_alpha(q, 1);  // creation pair without its conjugate
    ts.push_back(Term{m, Complex{0.5, 0.0}});
    const auto N = FourierTaylorSeries::from_terms(2, ts);
    CHECK_THROWS_AS(extract_homological_data(N, modes, clusters),
                    std::invalid_argument);
  }
  {
    auto ts = freq_terms();
    MultiIndex m{};
    m.k[0] = 1;  // non-autonomous
    ts.push_back(Term{m, Complex{0.5, 0.0}});
    const auto N = FourierTaylorSeries::from_terms(2, ts);
    CHECK_THROWS_AS(extract_homological_data(N, modes, clusters),
                    std::invalid_argument);
  }
  {
    std::vector<Term> ts;
    MultiIndex l0{};
    l0.l[0] = 1;  // second tangential frequency missing
    ts.push_back(Term{l0, Complex{1.0, 0.0}});
    const auto N = FourierTaylorSeries::from_terms(2, ts);
    CHECK_THROWS_AS(extract_homological_data(N, modes, clusters),
                    std::invalid_argument);
  }
}

TEST_CASE("kept shapes: zero-harmonic action, in-cluster pairs, creation pairs") {
  const auto res = build_normal_form(desk_params(), kDeskS, 2, 4);
  const HomologicalData D = homological_data_from_state(res.state);
  const Site n{0, 0}, m{1, 1}, q{-1, 1}, s{1, -1};

  MultiIndex c{};
  CHECK(kept_shape(D, c));  // constant
  MultiIndex act{};
  act.l[1] = 1;
  CHECK(kept_shape(D, act));
  act.k[0] = 1;
  CHECK_FALSE(kept_shape(D, act));

  MultiIndex pair{};
  pair.add_alpha(n, 1);
  pair.add_alpha(m, 1);
  CHECK(kept_shape(D, pair));  // the creation pair itself
  MultiIndex pair_bar{};
  pair_bar.add_beta(n, 1);
  pair_bar.add_beta(m, 1);
  CHECK(kept_shape(D, pair_bar));

  MultiIndex off{};
  off.add_alpha(n, 1);
  off.add_alpha(q, 1);
  CHECK_FALSE(kept_shape(D, off));  // not a coupling pair

  MultiIndex cl{};
  cl.add_alpha(s, 1);
  cl.add_beta(q, 1);
  CHECK(kept_shape(D, cl));  // same norm shell
  cl.k[1] = -2;
  CHECK_FALSE(kept_shape(D, cl));  // nonzero harmonic

  MultiIndex cross{};
  cross.add_alpha(s, 1);
  cross.add_beta(Site{2, 0}, 1);
  CHECK_FALSE(kept_shape(D, cross));

  MultiIndex sq{};
  sq.add_alpha(n, 2);
  CHECK_FALSE(kept_shape(D, sq));  // squared letter is never kept
}

TEST_CASE("bracket assembly reproduces the coupled-channel matrices") {
  const auto res = build_normal_form(desk_params(), kDeskS, 2, 4);
  const HomologicalData D = homological_data_from_state(res.state);
  const Eigen::Matrix2d A = desk_pair_block();
  const Site n{0, 0}, m{1, 1}, q{-1, 1};

  SECTION("same-pair channel at the zero harmonic") {
    MultiIndex b1{};
    b1.add_alpha(n, 1);
    b1.add_beta(n, 1);
    MultiIndex b2{};
    b2.add_alpha(n, 1);
    b2.add_alpha(m, 1);
    MultiIndex b3{};
    b3.add_beta(m, 1);
    b3.add_beta(n, 1);
    MultiIndex b4{};
    b4.add_beta(m, 1);
    b4.add_alpha(m, 1);
    const Eigen::MatrixXcd L =
        detail::assemble_bracket_matrix(D.N, {b1, b2, b3, b4});
    const Eigen::Matrix4d M4 = detail::l2_pair_matrix(0.0, A, A);
    CHECK((L - M4.cast<Complex>()).cwiseAbs().maxCoeff() <= 1e-12 * 1024.0);
    // The zero-shift channel is exactly singular: its kernel is the kept
    // direction, so the determinant must vanish to rounding.
    CHECK(std::abs(M4.determinant()) <= 1e-5);
  }

  SECTION("mixed channel with a spectator annihilation letter") {
    MultiIndex c1{};
    c1.k[0] = 2;
    c1.k[1] = 1;
    c1.add_alpha(n, 1);
    c1.add_beta(q, 1);
    MultiIndex c2 = c1;
    c2.add_alpha(n, -1);
    c2.add_beta(m, 1);
    const Eigen::MatrixXcd L = detail::assemble_bracket_matrix(D.N, {c1, c2});
    const double d = 2.0 * kDeskOmega[0] + kDeskOmega[1];
    const double spectator = D.diag(q);
    const Eigen::Matrix2d M = detail::l2_mixed_matrix(d + spectator, A, -1);
    CHECK((L - M.cast<Complex>()).cwiseAbs().maxCoeff() <= 1e-12 * 2048.0);
  }
}

TEST_CASE("series solve: single channels against hand formulas") {
  const auto res = build_normal_form(desk_params(), kDeskS, 2, 4);
  const HomologicalData D = homological_data_from_state(res.state);
  const Site n{0, 0};

  SECTION("plain annihilation letter") {
    MultiIndex v{};
    v.k[0] = 3;
    v.add_beta(Site{0, -1}, 1);
    const auto R = FourierTaylorSeries::monomial(2, v, Complex{1.0, 0.0});
    const auto sol = solve_homological(D, R);
    REQUIRE(sol.F.size() == 1);
    CHECK(sol.kept.empty());
    const double div = 3.0 * kDeskOmega[0] + 1024.142747385371;
    CHECK(sol.F.coefficient(v).imag() == Catch::Approx(1.0 / div).epsilon(1e-13));
    CHECK(sol.F.coefficient(v).real() == 0.0);
    const auto resid =
        add(add(poisson_bracket(D.N, sol.F), R), sol.kept, Complex{-1.0, 0.0});
    CHECK(resid.max_abs_coeff() <= 1e-12);
  }

  SECTION("squared creation letter spreads over its three-step orbit") {
    MultiIndex sq{};
    sq.k[0] = 1;
    sq.k[1] = 2;
    sq.add_alpha(n, 2);
    const auto R = FourierTaylorSeries::monomial(2, sq, Complex{0.3, -0.7});
    const auto sol = solve_homological(D, R);
    CHECK(sol.kept.empty());
    CHECK(sol.F.size() == 3);
    CHECK(sol.stats.dense_components == 1);
    const auto resid =
        add(add(poisson_bracket(D.N, sol.F), R), sol.kept, Complex{-1.0, 0.0});
    CHECK(resid.max_abs_coeff() <= 1e-12);
  }

  SECTION("kept directions pass through unchanged") {
    MultiIndex pair{};
    pair.add_alpha(n, 1);
    pair.add_alpha(Site{1, 1}, 1);
    MultiIndex act{};
    act.l[0] = 1;
    auto R = add(FourierTaylorSeries::monomial(2, pair, Complex{0.25, 0.5}),
                 FourierTaylorSeries::monomial(2, act, Complex{2.0, 0.0}));
    const auto sol = solve_homological(D, R);
    CHECK(sol.F.empty());
    REQUIRE(sol.kept.size() == 2);
    CHECK(sol.kept.coefficient(pair) == Complex{0.25, 0.5});
    CHECK(sol.kept.coefficient(act) == Complex{2.0, 0.0});
  }
}

TEST_CASE("series solve: full reference perturbation") {
  const auto res = build_normal_form(desk_params(), kDeskS, 3, 6);
  const HomologicalData D = homological_data_from_state(res.state);
  const FourierTaylorSeries R = truncate_quadratic(res.P, 5);
  REQUIRE(R.size() > 100);

  DivisorFloor floor;
  floor.gamma = 1e-3;
  floor.K = 5.0;
  floor.tau = 2.0;
  const auto sol = solve_homological(D, R, floor);

  INFO("min scalar divisor " << sol.stats.min_scalar_divisor);
  INFO("min block divisor " << sol.stats.min_block_divisor);
  INFO("min determinant " << sol.stats.min_det);

  // Substituting the generator back must cancel everything except the kept
  // directions, to 1e-9 of the perturbation size.
  const auto resid =
      add(add(poisson_bracket(D.N, sol.F), R), sol.kept, Complex{-1.0, 0.0});
  CHECK(resid.max_abs_coeff() <= 1e-9 * R.max_abs_coeff());

  // The kept output is exactly the kept-shaped part of R at this stage (the
  // solved channels do not feed back into kept directions here).
  std::size_t kept_in_R = 0;
  for (const Term& t : R.terms()) {
    if (kept_shape(D, t.idx)) {
      ++kept_in_R;
      CHECK(sol.kept.coefficient(t.idx) == t.coeff);
    }
  }
  CHECK(sol.kept.size() == kept_in_R);
  for (const Term& t : sol.kept.terms()) CHECK(kept_shape(D, t.idx));
  for (const Term& t : sol.F.terms()) CHECK_FALSE(kept_shape(D, t.idx));

  // The generator inherits the reality of the perturbation: conjugating a
  // monomial (k -> -k, letters barred) conjugates its coefficient.
  for (const Term& t : sol.F.terms()) {
    const Complex mc = sol.F.coefficient(mirror_index(t.idx));
    CHECK(std::abs(mc - std::conj(t.coeff)) <= 1e-10 * std::abs(t.coeff));
  }

  // Floors were respected with real margin.
  CHECK(sol.stats.min_scalar_divisor >= floor.effective());
  CHECK(sol.stats.min_block_divisor >= floor.effective());
  CHECK(sol.stats.min_det >= floor.effective());
  CHECK(sol.stats.dense_components >= 1);

  // Byte-for-byte determinism of a repeated solve.
  const auto sol2 = solve_homological(D, R, floor);
  REQUIRE(sol2.F.size() == sol.F.size());
  REQUIRE(sol2.kept.size() == sol.kept.size());
  for (std::size_t i = 0; i < sol.F.size(); ++i) {
    REQUIRE(sol2.F.terms()[i].idx == sol.F.terms()[i].idx);
    REQUIRE(sol2.F.terms()[i].coeff == sol.F.terms()[i].coeff);
  }
  for (std::size_t i = 0; i < sol.kept.size(); ++i) {
    REQUIRE(sol2.kept.terms()[i].coeff == sol.kept.terms()[i].coeff);
  }
}

TEST_CASE("series solve: input validation and gathered flags") {
  const auto res = build_normal_form(desk_params(), kDeskS, 2, 4);
  const HomologicalData D = homological_data_from_state(res.state);
  const Site q{-1, 1};

  MultiIndex bad1{};
  bad1.l[0] = 1;
  bad1.add_alpha(q, 1);  // 2|l| + z = 3
  CHECK_THROWS_AS(
      solve_homological(D, FourierTaylorSeries::monomial(2, bad1, Complex{1.0, 0.0})),
      std::invalid_argument);

  MultiIndex bad2{};
  bad2.add_alpha(q, 3);  // cubic
  CHECK_THROWS_AS(
      solve_homological(D, FourierTaylorSeries::monomial(2, bad2, Complex{1.0, 0.0})),
      std::invalid_argument);

  MultiIndex bad3{};
  bad3.k[0] = 1;
  bad3.add_alpha(Site{9, 9}, 1);  // not a retained mode
  CHECK_THROWS_AS(
      solve_homological(D, FourierTaylorSeries::monomial(2, bad3, Complex{1.0, 0.0})),
      std::invalid_argument);

  // A floor far above every divisor: all three channels are reported in one
  // error rather than failing fast on the first.
  DivisorFloor huge;
  huge.gamma = 1e6;
  huge.K = 1.0;
  huge.tau = 0.0;
  MultiIndex t1{};
  t1.k[0] = 1;
  MultiIndex t2{};
  t2.k[1] = 1;
  t2.l[0] = 1;
  MultiIndex t3{};
  t3.k[0] = 1;
  t3.add_alpha(Site{-1, 0}, 1);
  auto R = add(FourierTaylorSeries::monomial(2, t1, Complex{1.0, 0.0}),
               FourierTaylorSeries::monomial(2, t2, Complex{1.0, 0.0}));
  R = add(R, FourierTaylorSeries::monomial(2, t3, Complex{1.0, 0.0}));
  try {
    solve_homological(D, R, huge);
    FAIL("expected a small-divisor error");
  } catch (const SmallDivisorError& e) {
    REQUIRE(e.reports().size() == 3);
    int scalar = 0, block = 0;
    for (const auto& rep : e.reports()) {
      if (rep.kind == DivisorKind::Scalar) ++scalar;
      if (rep.kind == DivisorKind::BlockEigen) ++block;
    }
    CHECK(scalar == 2);
    CHECK(block == 1);
  }

  CHECK_THROWS_AS(
      solve_homological(D, FourierTaylorSeries::monomial(1, MultiIndex{}, Complex{1.0, 0.0})),
      std::invalid_argument);
}
