#pragma once

#include <cmath>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "causalfp/common.hpp"
#include "causalfp/csv.hpp"

namespace causalfp {

struct FitConfig {
    double ridge_lambda = 1e-6;
    int min_samples_margin = 0;
};

// Fitted two-timescale model. Q couples states within a time step (zero
// diagonal), A and B couple the previous step's states and inputs to the
// current one. R = [Q A B] is the causal signature of a recording.
struct CausalSignature {
    Eigen::MatrixXd Q;  // m x m, Q(i,i) == 0
    Eigen::MatrixXd A;  // m x m
    Eigen::MatrixXd B;  // m x n
    double residual_frobenius = 0.0;
    double ridge_lambda_used = 0.0;
    double regressor_condition = 1.0;  // max over state rows

    Eigen::Index m() const { return Q.rows(); }
    Eigen::Index n() const { return B.cols(); }

    Eigen::MatrixXd stacked() const {
        Eigen::MatrixXd R(m(), 2 * m() + n());
        R << Q, A, B;
        return R;
    }
};

// Aligned one-step blocks: column k of X1 is x(k+1), of X0 is x(k), of U0 is
// u(k), for the T-1 consecutive pairs of the series.
struct RegressionBlocks {
    Eigen::MatrixXd X1;  // m x (T-1)
    Eigen::MatrixXd X0;  // m x (T-1)
    Eigen::MatrixXd U0;  // n x (T-1)
};

inline RegressionBlocks build_regression_blocks(const Eigen::MatrixXd& X, const Eigen::MatrixXd& U) {
    const Eigen::Index T = X.cols();
    if (T < 2) throw ValidationError("need at least 2 time points to form regression blocks, got " + std::to_string(T));
    if (U.cols() != T) throw ValidationError("state and input blocks disagree on sample count");
    RegressionBlocks blocks;
    blocks.X1 = X.rightCols(T - 1);
    blocks.X0 = X.leftCols(T - 1);
    blocks.U0 = U.leftCols(T - 1);
    return blocks;
}

// Frobenius norm of (Q - I) X1 + A X0 + B U0 on the given data.
inline double residual_of(const CausalSignature& sig, const Eigen::MatrixXd& X, const Eigen::MatrixXd& U) {
    if (X.rows() != sig.m() || U.rows() != sig.n())
        throw ValidationError("signature/data shape mismatch in residual computation");
    const RegressionBlocks b = build_regression_blocks(X, U);
    return ((sig.Q - Eigen::MatrixXd::Identity(sig.m(), sig.m())) * b.X1 + sig.A * b.X0 + sig.B * b.U0).norm();
}

// Solves the constrained least-squares fit row by row. For state row i the
// regressor stack is [X1 without row i; X0; U0] and the target is row i of
// X1; the missing row realizes the zero-diagonal constraint on Q. The squared
// Frobenius objective is a sum over rows, so the row fits are exactly the
// joint optimum.
inline CausalSignature fit_signature(const Eigen::MatrixXd& X, const Eigen::MatrixXd& U, const FitConfig& cfg = {}) {
    if (!X.allFinite() || !U.allFinite()) throw ValidationError("non-finite values in fit input");
    if (cfg.ridge_lambda < 0.0) throw ValidationError("ridge_lambda must be nonnegative");
    if (cfg.min_samples_margin < 0) throw ValidationError("min_samples_margin must be nonnegative");
    const Eigen::Index m = X.rows();
    const Eigen::Index n = U.rows();
    if (m < 1) throw ValidationError("need at least one state channel");
    const RegressionBlocks b = build_regression_blocks(X, U);
    if (cfg.min_samples_margin > 0 && b.X1.cols() < (2 * m + n - 1) + cfg.min_samples_margin)
        throw ValidationError("recording too short: " + std::to_string(b.X1.cols()) + " sample pairs, need " +
                              std::to_string((2 * m + n - 1) + cfg.min_samples_margin) +
                              " (regressor height plus margin)");
    const Eigen::Index r = 2 * m + n;  // full stack height, row i removed per fit

    Eigen::MatrixXd S(r, b.X1.cols());
    S << b.X1, b.X0, b.U0;
    // One Gram matrix serves all rows: row i's normal equations use M with
    // row/column i deleted.
    const Eigen::MatrixXd M = S * S.transpose();
    const Eigen::MatrixXd rhs_all = S * b.X1.transpose();  // r x m

    CausalSignature sig;
    sig.Q = Eigen::MatrixXd::Zero(m, m);
    sig.A.resize(m, m);
    sig.B.resize(m, n);
    sig.ridge_lambda_used = cfg.ridge_lambda;
    sig.regressor_condition = 1.0;

    Eigen::MatrixXd G(r - 1, r - 1);
    Eigen::VectorXd rhs(r - 1);
    std::vector<Eigen::Index> keep(static_cast<std::size_t>(r - 1));
    for (Eigen::Index i = 0; i < m; ++i) {
        Eigen::Index k = 0;
        for (Eigen::Index j = 0; j < r; ++j)
            if (j != i) keep[static_cast<std::size_t>(k++)] = j;
        for (Eigen::Index a = 0; a < r - 1; ++a) {
            rhs(a) = rhs_all(keep[static_cast<std::size_t>(a)], i);
            for (Eigen::Index c = 0; c < r - 1; ++c)
                G(a, c) = M(keep[static_cast<std::size_t>(a)], keep[static_cast<std::size_t>(c)]);
        }

        // Condition of the (unridged) row regressor: singular values are the
        // square roots of the Gram eigenvalues.
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(G, Eigen::EigenvaluesOnly);
        const double ev_max = eig.eigenvalues().maxCoeff();
        const double ev_min = eig.eigenvalues().minCoeff();
        double cond;
        if (ev_max <= 0.0)
            cond = 1.0;  // zero regressor
        else if (ev_min <= 0.0 || ev_min <= ev_max * 1e-300)
            cond = 1e300;  // numerically singular
        else
            cond = std::sqrt(ev_max / ev_min);
        if (cond > sig.regressor_condition) sig.regressor_condition = cond;

        if (cfg.ridge_lambda == 0.0 && (ev_max <= 0.0 || ev_min <= ev_max * 1e-13))
            throw NumericalError("rank-deficient normal equations for state row " + std::to_string(i) +
                                 " (add ridge or more samples)");

        G.diagonal().array() += cfg.ridge_lambda;
        const Eigen::VectorXd beta = G.ldlt().solve(rhs);
        if (!beta.allFinite())
            throw NumericalError("normal-equation solve failed for state row " + std::to_string(i));

        Eigen::Index idx = 0;
        for (Eigen::Index j = 0; j < m; ++j)
            if (j != i) sig.Q(i, j) = beta(idx++);
        for (Eigen::Index j = 0; j < m; ++j) sig.A(i, j) = beta(idx++);
        for (Eigen::Index j = 0; j < n; ++j) sig.B(i, j) = beta(idx++);
    }
    sig.residual_frobenius = ((sig.Q - Eigen::MatrixXd::Identity(m, m)) * b.X1 + sig.A * b.X0 + sig.B * b.U0).norm();
    return sig;
}

// --- serialization: one CSV holding [Q A B] plus a small JSON sidecar ---

inline void write_signature(const std::filesystem::path& csv_path, const std::filesystem::path& json_path,
                            const CausalSignature& sig) {
    const Eigen::Index m = sig.m();
    const Eigen::Index n = sig.n();
    std::vector<std::string> header;
    header.reserve(static_cast<std::size_t>(2 * m + n));
    for (Eigen::Index j = 0; j < m; ++j) header.push_back("Q" + std::to_string(j));
    for (Eigen::Index j = 0; j < m; ++j) header.push_back("A" + std::to_string(j));
    for (Eigen::Index j = 0; j < n; ++j) header.push_back("B" + std::to_string(j));
    csv::write(csv_path, header, sig.stacked());

    nlohmann::json j{{"residual", sig.residual_frobenius},
                     {"lambda", sig.ridge_lambda_used},
                     {"condition", sig.regressor_condition},
                     {"m", m},
                     {"n", n}};
    write_file_atomic(json_path, j.dump(2) + "\n");
}

inline CausalSignature load_signature(const std::filesystem::path& csv_path,
                                      const std::filesystem::path& json_path) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(read_file(json_path));
    } catch (const nlohmann::json::exception& ex) {
        throw ValidationError(json_path.string() + ": invalid JSON: " + ex.what());
    }
    const auto m = j.at("m").get<Eigen::Index>();
    const auto n = j.at("n").get<Eigen::Index>();
    const csv::Table table = csv::read(csv_path);
    if (table.values.rows() != m || table.values.cols() != 2 * m + n)
        throw ValidationError(csv_path.string() + ": signature block has wrong shape");
    CausalSignature sig;
    sig.Q = table.values.leftCols(m);
    sig.A = table.values.middleCols(m, m);
    sig.B = table.values.rightCols(n);
    sig.residual_frobenius = j.at("residual").get<double>();
    sig.ridge_lambda_used = j.at("lambda").get<double>();
    sig.regressor_condition = j.at("condition").get<double>();
    return sig;
}

}  // namespace causalfp
