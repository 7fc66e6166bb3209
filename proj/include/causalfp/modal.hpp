#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <numeric>
#include <vector>

#include <Eigen/Dense>

#include "causalfp/assignment.hpp"
#include "causalfp/common.hpp"
#include "causalfp/sysid.hpp"

namespace causalfp {

// Eigen frames of Q and A. Columns are right eigenvectors, each normalized to
// unit Hermitian norm with the largest-magnitude entry made real nonnegative,
// and ordered canonically so that equal dynamics produce identical frames.
struct ModalFeatures {
    Eigen::MatrixXcd Tbar;   // eigenvectors of Q
    Eigen::VectorXcd Lbar;   // eigenvalues of Q
    Eigen::MatrixXcd That;   // eigenvectors of A
    Eigen::VectorXcd Lhat;   // eigenvalues of A
    double cond_Tbar = 1.0;  // eigenbasis condition numbers
    double cond_That = 1.0;

    Eigen::Index m() const { return Tbar.rows(); }
    // Eigenbasis condition beyond this is numerically indistinguishable from
    // a defective matrix; the frames are still usable for matching.
    bool near_defective() const { return cond_Tbar > 1e12 || cond_That > 1e12; }
};

struct ModeMatch {
    std::vector<Eigen::Index> assignment;  // frame-1 column -> frame-2 column
    std::vector<double> similarities;
    double total = 0.0;
};

namespace detail {

inline void canonicalize_frame(Eigen::MatrixXcd& V, Eigen::VectorXcd& lam) {
    const Eigen::Index m = V.rows();
    // Unit norm, then rotate so the largest-magnitude entry (lowest index on
    // ties) is real and nonnegative.
    for (Eigen::Index c = 0; c < m; ++c) {
        const double norm = V.col(c).norm();
        if (norm > 0.0) V.col(c) /= norm;
        Eigen::Index pivot = 0;
        double best = -1.0;
        for (Eigen::Index r = 0; r < m; ++r) {
            const double mag = std::abs(V(r, c));
            if (mag > best) {  // exact ties keep the lowest index
                best = mag;
                pivot = r;
            }
        }
        const std::complex<double> z = V(pivot, c);
        if (std::abs(z) > 0.0) V.col(c) *= std::conj(z) / std::abs(z);
    }
    // Order: eigenvalue magnitude desc, real part desc, imaginary part desc
    // (puts the nonnegative member of a conjugate pair first), then
    // lexicographic comparison of the phase-fixed vectors.
    std::vector<Eigen::Index> order(static_cast<std::size_t>(m));
    std::iota(order.begin(), order.end(), 0);
    auto vec_lex_after = [&](Eigen::Index a, Eigen::Index b) {
        for (Eigen::Index r = 0; r < m; ++r) {
            if (V(r, a).real() != V(r, b).real()) return V(r, a).real() > V(r, b).real();
            if (V(r, a).imag() != V(r, b).imag()) return V(r, a).imag() > V(r, b).imag();
        }
        return false;
    };
    std::stable_sort(order.begin(), order.end(), [&](Eigen::Index a, Eigen::Index b) {
        const double ma = std::abs(lam(a)), mb = std::abs(lam(b));
        if (ma != mb) return ma > mb;
        if (lam(a).real() != lam(b).real()) return lam(a).real() > lam(b).real();
        if (lam(a).imag() != lam(b).imag()) return lam(a).imag() > lam(b).imag();
        return vec_lex_after(a, b);
    });
    Eigen::MatrixXcd V2(m, m);
    Eigen::VectorXcd l2(m);
    for (Eigen::Index c = 0; c < m; ++c) {
        V2.col(c) = V.col(order[static_cast<std::size_t>(c)]);
        l2(c) = lam(order[static_cast<std::size_t>(c)]);
    }
    V = std::move(V2);
    lam = std::move(l2);
}

inline double basis_condition(const Eigen::MatrixXcd& V) {
    Eigen::JacobiSVD<Eigen::MatrixXcd> svd(V);
    const double smin = svd.singularValues().minCoeff();
    const double smax = svd.singularValues().maxCoeff();
    if (smin <= 0.0) return 1e300;
    return smax / smin;
}

inline void eig_frame(const Eigen::MatrixXd& M, Eigen::MatrixXcd& V, Eigen::VectorXcd& lam, double& cond,
                      const char* what) {
    Eigen::EigenSolver<Eigen::MatrixXd> es(M, /*computeEigenvectors=*/true);
    if (es.info() != Eigen::Success)
        throw NumericalError(std::string("eigendecomposition of ") + what + " did not converge");
    V = es.eigenvectors();
    lam = es.eigenvalues();
    canonicalize_frame(V, lam);
    cond = basis_condition(V);
}

}  // namespace detail

inline ModalFeatures decompose(const CausalSignature& sig) {
    if (sig.m() < 1) throw ValidationError("cannot decompose an empty signature");
    ModalFeatures f;
    detail::eig_frame(sig.Q, f.Tbar, f.Lbar, f.cond_Tbar, "Q");
    detail::eig_frame(sig.A, f.That, f.Lhat, f.cond_That, "A");
    if (f.near_defective()) log(LogLevel::warn, "modal decomposition is near-defective (condition > 1e12)");
    return f;
}

// |<v, w>| for unit vectors: 1 for equal directions regardless of phase,
// 0 for orthogonal ones.
inline double mode_similarity(const Eigen::VectorXcd& v, const Eigen::VectorXcd& w) {
    if (v.size() != w.size()) throw ValidationError("mode similarity needs equal-length vectors");
    if (std::abs(v.norm() - 1.0) > 1e-9 || std::abs(w.norm() - 1.0) > 1e-9)
        throw ValidationError("mode similarity requires unit vectors");
    return std::min(1.0, std::abs(v.dot(w)));
}

namespace detail {

inline ModeMatch match_frame(const Eigen::MatrixXcd& F1, const Eigen::MatrixXcd& F2) {
    const Eigen::Index m = F1.cols();
    // S(i, j) = |<F1_i, F2_j>|; Hermitian inner product via adjoint.
    Eigen::MatrixXd S = (F1.adjoint() * F2).cwiseAbs().cwiseMin(1.0);
    ModeMatch match;
    match.assignment = solve_assignment_max(S);
    match.similarities.resize(static_cast<std::size_t>(m));
    for (Eigen::Index i = 0; i < m; ++i) {
        match.similarities[static_cast<std::size_t>(i)] = S(i, match.assignment[static_cast<std::size_t>(i)]);
        match.total += S(i, match.assignment[static_cast<std::size_t>(i)]);
    }
    return match;
}

}  // namespace detail

// Optimal pairings of the two eigenframes, one match per frame family.
inline std::pair<ModeMatch, ModeMatch> match_modes(const ModalFeatures& f1, const ModalFeatures& f2) {
    if (f1.m() != f2.m()) throw ValidationError("modal feature dimension mismatch");
    return {detail::match_frame(f1.Tbar, f2.Tbar), detail::match_frame(f1.That, f2.That)};
}

// Dist = 2m - total matched similarity over both frames. Eigenvalues do not
// enter: every mode counts equally. Zero iff the frames align mode-for-mode
// up to phase and ordering; at most 2m.
inline double modal_distance(const ModalFeatures& f1, const ModalFeatures& f2) {
    const auto [bar, hat] = match_modes(f1, f2);
    return std::max(0.0, 2.0 * static_cast<double>(f1.m()) - bar.total - hat.total);
}

// --- serialization: paired CSVs (real and imaginary parts of both frames)
// --- plus a JSON sidecar with the eigenvalue lists and condition numbers.

inline void write_modal_features(const std::filesystem::path& csv_path, const std::filesystem::path& json_path,
                                 const ModalFeatures& f) {
    const Eigen::Index m = f.m();
    std::vector<std::string> header;
    Eigen::MatrixXd block(m, 4 * m);
    const std::pair<const char*, const Eigen::MatrixXcd*> frames[] = {{"Tbar", &f.Tbar}, {"That", &f.That}};
    for (Eigen::Index k = 0; k < 2; ++k) {
        const auto& [tag, frame] = frames[k];
        for (Eigen::Index c = 0; c < m; ++c) header.push_back(std::string(tag) + "_re" + std::to_string(c));
        for (Eigen::Index c = 0; c < m; ++c) header.push_back(std::string(tag) + "_im" + std::to_string(c));
        block.middleCols(2 * k * m, m) = frame->real();
        block.middleCols((2 * k + 1) * m, m) = frame->imag();
    }
    csv::write(csv_path, header, block);

    auto eigen_list = [](const Eigen::VectorXcd& v) {
        nlohmann::json arr = nlohmann::json::array();
        for (Eigen::Index i = 0; i < v.size(); ++i) arr.push_back({v(i).real(), v(i).imag()});
        return arr;
    };
    nlohmann::json j{{"m", m},
                     {"Lbar", eigen_list(f.Lbar)},
                     {"Lhat", eigen_list(f.Lhat)},
                     {"cond_Tbar", f.cond_Tbar},
                     {"cond_That", f.cond_That}};
    write_file_atomic(json_path, j.dump(2) + "\n");
}

inline ModalFeatures load_modal_features(const std::filesystem::path& csv_path,
                                         const std::filesystem::path& json_path) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(read_file(json_path));
    } catch (const nlohmann::json::exception& ex) {
        throw ValidationError(json_path.string() + ": invalid JSON: " + ex.what());
    }
    const auto m = j.at("m").get<Eigen::Index>();
    const csv::Table table = csv::read(csv_path);
    if (table.values.rows() != m || table.values.cols() != 4 * m)
        throw ValidationError(csv_path.string() + ": modal feature block has wrong shape");
    ModalFeatures f;
    f.Tbar = table.values.middleCols(0, m) + std::complex<double>(0, 1) * table.values.middleCols(m, m);
    f.That = table.values.middleCols(2 * m, m) + std::complex<double>(0, 1) * table.values.middleCols(3 * m, m);
    auto eigen_list = [&](const char* key) {
        const auto arr = j.at(key).get<std::vector<std::pair<double, double>>>();
        Eigen::VectorXcd v(static_cast<Eigen::Index>(arr.size()));
        for (std::size_t i = 0; i < arr.size(); ++i) v(static_cast<Eigen::Index>(i)) = {arr[i].first, arr[i].second};
        return v;
    };
    f.Lbar = eigen_list("Lbar");
    f.Lhat = eigen_list("Lhat");
    f.cond_Tbar = j.at("cond_Tbar").get<double>();
    f.cond_That = j.at("cond_That").get<double>();
    if (f.Lbar.size() != m || f.Lhat.size() != m)
        throw ValidationError(json_path.string() + ": eigenvalue lists do not match the frame size");
    return f;
}

}  // namespace causalfp
