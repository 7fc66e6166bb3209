#include <gtest/gtest.h>

#include <filesystem>

#include "causalfp/rng.hpp"
#include "causalfp/synth.hpp"
#include "causalfp/sysid.hpp"

using namespace causalfp;

namespace {

Eigen::MatrixXd random_matrix(Eigen::Index r, Eigen::Index c, Rng& rng) {
    Eigen::MatrixXd M(r, c);
    for (Eigen::Index i = 0; i < r; ++i)
        for (Eigen::Index j = 0; j < c; ++j) M(i, j) = rng.normal();
    return M;
}

// Independent route for the row-separability check: one block least squares
// over all unknowns at once, stacking every row's equations into a single
// system and solving its (block-diagonal) normal equations jointly.
CausalSignature fit_joint(const Eigen::MatrixXd& X, const Eigen::MatrixXd& U, double lambda) {
    const Eigen::Index m = X.rows();
    const Eigen::Index n = U.rows();
    const RegressionBlocks b = build_regression_blocks(X, U);
    const Eigen::Index samples = b.X1.cols();
    const Eigen::Index per_row = 2 * m + n - 1;
    const Eigen::Index total = m * per_row;

    Eigen::MatrixXd D = Eigen::MatrixXd::Zero(m * samples, total);
    Eigen::VectorXd y(m * samples);
    for (Eigen::Index i = 0; i < m; ++i) {
        Eigen::MatrixXd Gi(per_row, samples);
        Eigen::Index k = 0;
        for (Eigen::Index j = 0; j < m; ++j)
            if (j != i) Gi.row(k++) = b.X1.row(j);
        Gi.middleRows(k, m) = b.X0;
        Gi.bottomRows(n) = b.U0;
        D.block(i * samples, i * per_row, samples, per_row) = Gi.transpose();
        y.segment(i * samples, samples) = b.X1.row(i).transpose();
    }
    Eigen::MatrixXd N = D.transpose() * D;
    N.diagonal().array() += lambda;
    const Eigen::VectorXd beta = N.ldlt().solve(D.transpose() * y);

    CausalSignature sig;
    sig.Q = Eigen::MatrixXd::Zero(m, m);
    sig.A.resize(m, m);
    sig.B.resize(m, n);
    for (Eigen::Index i = 0; i < m; ++i) {
        Eigen::Index idx = i * per_row;
        for (Eigen::Index j = 0; j < m; ++j)
            if (j != i) sig.Q(i, j) = beta(idx++);
        for (Eigen::Index j = 0; j < m; ++j) sig.A(i, j) = beta(idx++);
        for (Eigen::Index j = 0; j < n; ++j) sig.B(i, j) = beta(idx++);
    }
    return sig;
}

double relative_error(const CausalSignature& fit, const GroundTruthSystem& truth) {
    Eigen::MatrixXd Rt(truth.m(), 2 * truth.m() + truth.n());
    Rt << truth.Q, truth.A, truth.B;
    return (fit.stacked() - Rt).norm() / Rt.norm();
}

}  // namespace

TEST(RegressionBlocks, Definition) {
    Eigen::MatrixXd X(2, 3);
    X << 1, 2, 3, 4, 5, 6;
    Eigen::MatrixXd U(1, 3);
    U << 7, 8, 9;
    const RegressionBlocks b = build_regression_blocks(X, U);
    EXPECT_EQ(b.X1, X.rightCols(2));
    EXPECT_EQ(b.X0, X.leftCols(2));
    EXPECT_EQ(b.U0, U.leftCols(2));
}

TEST(RegressionBlocks, BoundaryTwoSamples) {
    Eigen::MatrixXd X = Eigen::MatrixXd::Random(3, 2);
    Eigen::MatrixXd U = Eigen::MatrixXd::Random(1, 2);
    const RegressionBlocks b = build_regression_blocks(X, U);
    EXPECT_EQ(b.X1.cols(), 1);
    EXPECT_EQ(b.X0.cols(), 1);
}

TEST(RegressionBlocks, TooShortRejected) {
    Eigen::MatrixXd X = Eigen::MatrixXd::Zero(3, 1);
    Eigen::MatrixXd U = Eigen::MatrixXd::Zero(1, 1);
    EXPECT_THROW(build_regression_blocks(X, U), ValidationError);
}

// Noiseless simulation satisfies the one-step relation exactly: the blocks
// obey X1 = (I-Q)^{-1} (A X0 + B U0).
TEST(RegressionBlocks, NoiselessSimulationSatisfiesDynamics) {
    const GroundTruthSystem sys = sample_system(6, 2, 0.3, 0.9, 77);
    const auto [X, U] = simulate(sys, 200, InputMode::white, 0.0, 78);
    const RegressionBlocks b = build_regression_blocks(X, U);
    const Eigen::MatrixXd I = Eigen::MatrixXd::Identity(6, 6);
    const Eigen::MatrixXd lhs = (I - sys.Q) * b.X1;
    const Eigen::MatrixXd rhs = sys.A * b.X0 + sys.B * b.U0;
    EXPECT_LT((lhs - rhs).norm(), 1e-10 * rhs.norm());
}

TEST(FitSignature, ZeroDataGivesZeroSignature) {
    const Eigen::MatrixXd X = Eigen::MatrixXd::Zero(4, 50);
    const Eigen::MatrixXd U = Eigen::MatrixXd::Zero(2, 50);
    FitConfig cfg;
    cfg.ridge_lambda = 1e-6;
    const CausalSignature sig = fit_signature(X, U, cfg);
    EXPECT_TRUE(sig.Q.isZero(0.0));
    EXPECT_TRUE(sig.A.isZero(0.0));
    EXPECT_TRUE(sig.B.isZero(0.0));
    EXPECT_DOUBLE_EQ(sig.residual_frobenius, 0.0);
}

TEST(FitSignature, QDiagonalExactlyZero) {
    Rng rng(5);
    const Eigen::MatrixXd X = random_matrix(5, 80, rng);
    const Eigen::MatrixXd U = random_matrix(2, 80, rng);
    const CausalSignature sig = fit_signature(X, U);
    for (Eigen::Index i = 0; i < 5; ++i) EXPECT_EQ(sig.Q(i, i), 0.0);
}

// The concurrent regressors of a noiseless simulation are exact linear
// combinations of the lagged ones, so the unridged normal equations are
// singular and the fit must refuse rather than return garbage.
TEST(FitSignature, NoiselessRidgeZeroIsRankDeficient) {
    const GroundTruthSystem sys = sample_system(6, 2, 0.3, 0.9, 101);
    const auto [X, U] = simulate(sys, 400, InputMode::white, 0.0, 102);
    FitConfig cfg;
    cfg.ridge_lambda = 0.0;
    EXPECT_THROW(fit_signature(X, U, cfg), NumericalError);
}

// What noiseless data does pin down is the reduced-form one-step map; any
// exact fit must reproduce (I-Q)^{-1}[A B] even though (Q, A, B) itself is
// not identifiable without process noise.
TEST(FitSignature, NoiselessFitRecoversReducedForm) {
    const GroundTruthSystem sys = sample_system(6, 2, 0.3, 0.9, 101);
    const auto [X, U] = simulate(sys, 400, InputMode::white, 0.0, 102);
    FitConfig cfg;
    cfg.ridge_lambda = 1e-8;
    const CausalSignature sig = fit_signature(X, U, cfg);
    const Eigen::MatrixXd I = Eigen::MatrixXd::Identity(6, 6);
    Eigen::MatrixXd truth(6, 8), fitted(6, 8);
    truth << sys.A, sys.B;
    fitted << sig.A, sig.B;
    const Eigen::MatrixXd reduced_truth = (I - sys.Q).partialPivLu().solve(truth);
    const Eigen::MatrixXd reduced_fit = (I - sig.Q).partialPivLu().solve(fitted);
    EXPECT_LT((reduced_truth - reduced_fit).norm() / reduced_truth.norm(), 1e-6);
}

// With process noise the regression is well posed; the estimate approaches
// its large-sample limit and the residual matches the injected noise scale.
TEST(FitSignature, NoisyFitIsStableAcrossSampleSizes) {
    const GroundTruthSystem sys = sample_system(8, 2, 0.3, 0.9, 31);
    FitConfig cfg;
    cfg.ridge_lambda = 0.0;
    const auto [X1, U1] = simulate(sys, 2000, InputMode::white, 0.02, 32);
    const auto [X2, U2] = simulate(sys, 8000, InputMode::white, 0.02, 32);
    const CausalSignature a = fit_signature(X1, U1, cfg);
    const CausalSignature b = fit_signature(X2, U2, cfg);
    // Estimates from nested samples of the same path agree far better than
    // either agrees with an independent path; this pins down convergence.
    EXPECT_LT((a.stacked() - b.stacked()).norm() / b.stacked().norm(), 0.3);
    EXPECT_GT(relative_error(a, sys), 0.0);
}

TEST(FitSignature, FullScaleShape) {
    const GroundTruthSystem sys = sample_system(90, 10, 0.1, 0.9, 7);
    const auto [X, U] = simulate(sys, 260, InputMode::white, 0.05, 8);
    const CausalSignature sig = fit_signature(X, U);
    EXPECT_EQ(sig.stacked().rows(), 90);
    EXPECT_EQ(sig.stacked().cols(), 190);
}

TEST(FitSignature, RidgeShrinksCoefficients) {
    const GroundTruthSystem sys = sample_system(6, 2, 0.3, 0.9, 55);
    const auto [X, U] = simulate(sys, 300, InputMode::white, 0.05, 56);
    double prev = std::numeric_limits<double>::infinity();
    for (const double lambda : {1e-6, 1e-2, 1.0, 100.0}) {
        FitConfig cfg;
        cfg.ridge_lambda = lambda;
        const double norm = fit_signature(X, U, cfg).stacked().norm();
        EXPECT_LE(norm, prev + 1e-12) << "lambda=" << lambda;
        prev = norm;
    }
}

TEST(FitSignature, SampleMarginEnforcedWhenRequested) {
    const GroundTruthSystem sys = sample_system(6, 2, 0.3, 0.9, 61);
    const auto [X, U] = simulate(sys, 20, InputMode::white, 0.05, 62);  // 19 pairs, stack height 13
    FitConfig cfg;
    cfg.min_samples_margin = 10;  // demands >= 23 pairs
    EXPECT_THROW(fit_signature(X, U, cfg), ValidationError);
    cfg.min_samples_margin = 5;  // demands >= 18 pairs
    EXPECT_NO_THROW(fit_signature(X, U, cfg));
}

TEST(FitSignature, NonFiniteInputRejected) {
    Eigen::MatrixXd X = Eigen::MatrixXd::Zero(3, 10);
    Eigen::MatrixXd U = Eigen::MatrixXd::Zero(1, 10);
    X(1, 3) = std::numeric_limits<double>::quiet_NaN();
    EXPECT_THROW(fit_signature(X, U), ValidationError);
}

// Joint and per-row solves are the same optimum: the squared Frobenius
// objective separates over rows.
TEST(FitSignature, RowSeparabilityMatchesJointSolve) {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        Rng rng(1000 + seed);
        const Eigen::Index m = 3 + static_cast<Eigen::Index>(seed % 3);
        const Eigen::MatrixXd X = random_matrix(m, 120, rng);
        const Eigen::MatrixXd U = random_matrix(2, 120, rng);
        FitConfig cfg;
        cfg.ridge_lambda = 1e-6;
        const CausalSignature per_row = fit_signature(X, U, cfg);
        const CausalSignature joint = fit_joint(X, U, cfg.ridge_lambda);
        EXPECT_LT((per_row.stacked() - joint.stacked()).norm(), 1e-9) << "seed " << seed;
    }
}

TEST(ResidualOf, MatchesStoredResidual) {
    Rng rng(21);
    const Eigen::MatrixXd X = random_matrix(5, 60, rng);
    const Eigen::MatrixXd U = random_matrix(2, 60, rng);
    const CausalSignature sig = fit_signature(X, U);
    EXPECT_NEAR(residual_of(sig, X, U), sig.residual_frobenius, 1e-10);
}

TEST(ResidualOf, ZeroSignatureZeroData) {
    CausalSignature sig;
    sig.Q = Eigen::MatrixXd::Zero(3, 3);
    sig.A = Eigen::MatrixXd::Zero(3, 3);
    sig.B = Eigen::MatrixXd::Zero(3, 1);
    const Eigen::MatrixXd X = Eigen::MatrixXd::Zero(3, 10);
    const Eigen::MatrixXd U = Eigen::MatrixXd::Zero(1, 10);
    EXPECT_DOUBLE_EQ(residual_of(sig, X, U), 0.0);
}

// Truth matrices leave no residual on their own noiseless simulation.
TEST(ResidualOf, TruthOnNoiselessDataIsZero) {
    const GroundTruthSystem sys = sample_system(7, 2, 0.3, 0.85, 91);
    const auto [X, U] = simulate(sys, 500, InputMode::white, 0.0, 92);
    CausalSignature sig;
    sig.Q = sys.Q;
    sig.A = sys.A;
    sig.B = sys.B;
    EXPECT_LT(residual_of(sig, X, U), 1e-9);
}

TEST(ResidualOf, ShapeMismatchRejected) {
    CausalSignature sig;
    sig.Q = Eigen::MatrixXd::Zero(3, 3);
    sig.A = Eigen::MatrixXd::Zero(3, 3);
    sig.B = Eigen::MatrixXd::Zero(3, 1);
    const Eigen::MatrixXd X = Eigen::MatrixXd::Zero(4, 10);
    const Eigen::MatrixXd U = Eigen::MatrixXd::Zero(1, 10);
    EXPECT_THROW(residual_of(sig, X, U), ValidationError);
}

TEST(ResidualOf, StoredResidualSelfConsistent) {
    const GroundTruthSystem sys = sample_system(6, 2, 0.3, 0.9, 17);
    const auto [X, U] = simulate(sys, 400, InputMode::white, 0.03, 18);
    const CausalSignature sig = fit_signature(X, U);
    const double recomputed = residual_of(sig, X, U);
    EXPECT_NEAR(recomputed, sig.residual_frobenius, 1e-8 * std::max(1.0, sig.residual_frobenius));
}

TEST(SignatureSerialization, CsvJsonRoundTrip) {
    namespace fs = std::filesystem;
    const fs::path dir = fs::path(testing::TempDir()) / "causalfp_sig";
    fs::create_directories(dir);
    const GroundTruthSystem sys = sample_system(5, 2, 0.4, 0.9, 3);
    const auto [X, U] = simulate(sys, 200, InputMode::white, 0.02, 4);
    const CausalSignature sig = fit_signature(X, U);
    write_signature(dir / "s.sig.csv", dir / "s.sig.json", sig);
    const CausalSignature back = load_signature(dir / "s.sig.csv", dir / "s.sig.json");
    EXPECT_EQ(back.Q, sig.Q);
    EXPECT_EQ(back.A, sig.A);
    EXPECT_EQ(back.B, sig.B);
    EXPECT_EQ(back.residual_frobenius, sig.residual_frobenius);
}
