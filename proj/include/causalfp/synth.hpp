#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "causalfp/common.hpp"
#include "causalfp/ingest.hpp"
#include "causalfp/rng.hpp"

namespace causalfp {

namespace detail {

inline double spectral_norm(const Eigen::MatrixXd& M) {
    if (M.size() == 0) return 0.0;
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(M);
    return svd.singularValues().maxCoeff();
}

inline double smallest_singular_value(const Eigen::MatrixXd& M) {
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(M);
    return svd.singularValues().minCoeff();
}

inline double spectral_radius(const Eigen::MatrixXd& M) {
    Eigen::EigenSolver<Eigen::MatrixXd> es(M, /*computeEigenvectors=*/false);
    if (es.info() != Eigen::Success) throw NumericalError("spectral radius: eigensolver did not converge");
    return es.eigenvalues().cwiseAbs().maxCoeff();
}

inline Eigen::MatrixXd gaussian_matrix(Eigen::Index rows, Eigen::Index cols, Rng& rng) {
    Eigen::MatrixXd M(rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i)
        for (Eigen::Index j = 0; j < cols; ++j) M(i, j) = rng.normal();
    return M;
}

}  // namespace detail

// True system used to generate synthetic recordings. The one-step map is
// x(t) = (I - Q)^{-1} (A x(t-1) + B u(t-1)), so stability is governed by the
// spectral radius of (I - Q)^{-1} A.
struct GroundTruthSystem {
    Eigen::MatrixXd Q;  // zero diagonal
    Eigen::MatrixXd A;
    Eigen::MatrixXd B;
    double stability_margin = 0.0;  // 1 - rho((I - Q)^{-1} A)

    Eigen::Index m() const { return Q.rows(); }
    Eigen::Index n() const { return B.cols(); }

    Eigen::MatrixXd one_step_matrix() const {
        const Eigen::Index mm = m();
        return (Eigen::MatrixXd::Identity(mm, mm) - Q).partialPivLu().solve(A);
    }

    void validate() const {
        const Eigen::Index mm = m();
        const double smin =
            detail::smallest_singular_value(Eigen::MatrixXd::Identity(mm, mm) - Q);
        if (smin < 1e-6) throw NumericalError("I - Q is numerically singular");
        if (!(stability_margin > 0.0)) throw NumericalError("generated system is not stable");
    }
};

enum class InputMode { white, smooth };

// Samples a stable ground-truth system. Q gets a random sparse zero-diagonal
// pattern capped at spectral norm 0.5; A is rescaled so the one-step map has
// spectral radius exactly rho_target; B is N(0, 1/n) entrywise.
inline GroundTruthSystem sample_system(Eigen::Index m, Eigen::Index n, double sparsity_q, double rho_target,
                                       std::uint64_t seed) {
    if (!(rho_target > 0.0 && rho_target < 1.0)) throw ValidationError("rho_target must lie in (0, 1)");
    if (m < 2 || n < 1) throw ValidationError("system needs m >= 2 states and n >= 1 inputs");
    Rng rng(seed);
    for (int attempt = 0; attempt < 10; ++attempt) {
        GroundTruthSystem sys;
        sys.Q.setZero(m, m);
        for (Eigen::Index i = 0; i < m; ++i)
            for (Eigen::Index j = 0; j < m; ++j) {
                const double u = rng.uniform01();
                const double g = rng.normal();
                if (i != j && u < sparsity_q) sys.Q(i, j) = g;
            }
        const double qnorm = detail::spectral_norm(sys.Q);
        if (qnorm > 0.5) sys.Q *= 0.5 / qnorm;

        sys.A = detail::gaussian_matrix(m, m, rng);
        sys.B = detail::gaussian_matrix(m, n, rng) / std::sqrt(static_cast<double>(n));

        const double rho = detail::spectral_radius(sys.one_step_matrix());
        if (rho <= 1e-12) continue;  // resample; degenerate draw
        sys.A *= rho_target / rho;
        sys.stability_margin = 1.0 - detail::spectral_radius(sys.one_step_matrix());
        sys.validate();
        return sys;
    }
    throw NumericalError("sample_system: could not scale to the target spectral radius after 10 attempts");
}

// Simulates T samples. u is white Gaussian or one-pole low-passed Gaussian
// (unit variance either way); the state starts at zero and picks up process
// noise w ~ N(0, sigma_noise^2 I) inside the implicit update.
inline std::pair<Eigen::MatrixXd, Eigen::MatrixXd> simulate(const GroundTruthSystem& sys, Eigen::Index T,
                                                            InputMode input_mode, double sigma_noise,
                                                            std::uint64_t seed) {
    if (T < 2) throw ValidationError("simulation needs T >= 2");
    const Eigen::Index m = sys.m();
    const Eigen::Index n = sys.n();
    Rng rng(seed);

    Eigen::MatrixXd U(n, T);
    for (Eigen::Index t = 0; t < T; ++t)
        for (Eigen::Index i = 0; i < n; ++i) U(i, t) = rng.normal();
    if (input_mode == InputMode::smooth) {
        const double alpha = 0.8;
        const double gain = std::sqrt(1.0 - alpha * alpha);
        for (Eigen::Index t = 0; t < T; ++t)
            for (Eigen::Index i = 0; i < n; ++i)
                U(i, t) = t == 0 ? U(i, t) : alpha * U(i, t - 1) + gain * U(i, t);
    }

    const Eigen::PartialPivLU<Eigen::MatrixXd> lu(Eigen::MatrixXd::Identity(m, m) - sys.Q);
    Eigen::MatrixXd X = Eigen::MatrixXd::Zero(m, T);
    Eigen::VectorXd drive(m);
    for (Eigen::Index t = 1; t < T; ++t) {
        drive = sys.A * X.col(t - 1) + sys.B * U.col(t - 1);
        if (sigma_noise > 0.0)
            for (Eigen::Index i = 0; i < m; ++i) drive(i) += sigma_noise * rng.normal();
        X.col(t) = lu.solve(drive);
        if (X.col(t).norm() > 1e9)
            throw NumericalError("simulation diverged at t=" + std::to_string(t) + " (state norm > 1e9)");
    }
    return {std::move(X), std::move(U)};
}

// Cohort layout mirroring the evaluation protocols: one base system per task,
// a per-subject perturbation fixed across sessions, and a fresh per-session
// perturbation on top.
struct CohortSpec {
    int n_subjects = 30;
    std::vector<std::string> tasks = {"rest", "emotion", "language", "social"};
    Eigen::Index m = 20;
    Eigen::Index n = 4;
    double sigma_population = 0.05;
    double sigma_session = 0.01;
    double sigma_noise = 0.02;
    Eigen::Index T = 600;
    std::vector<std::string> sessions = {"REST1_LR", "REST1_RL", "REST2_LR", "REST2_RL"};
    std::uint64_t seed = 20240321;

    void validate() const {
        if (n_subjects < 2) throw ValidationError("cohort needs at least 2 subjects");
        if (tasks.empty() || sessions.empty()) throw ValidationError("cohort needs tasks and sessions");
        if (sigma_population < 0 || sigma_session < 0 || sigma_noise < 0)
            throw ValidationError("cohort sigmas must be nonnegative");
        if (m < 2 || n < 1) throw ValidationError("cohort needs m >= 2 and n >= 1");
        if (T < 2) throw ValidationError("cohort needs T >= 2");
    }
};

inline nlohmann::json cohort_spec_to_json(const CohortSpec& spec) {
    return nlohmann::json{{"n_subjects", spec.n_subjects},
                          {"tasks", spec.tasks},
                          {"m", spec.m},
                          {"n", spec.n},
                          {"sigma_population", spec.sigma_population},
                          {"sigma_session", spec.sigma_session},
                          {"sigma_noise", spec.sigma_noise},
                          {"T", spec.T},
                          {"sessions", spec.sessions},
                          {"seed", spec.seed}};
}

inline CohortSpec cohort_spec_from_json(const nlohmann::json& j) {
    CohortSpec spec;
    try {
        if (j.contains("n_subjects")) spec.n_subjects = j.at("n_subjects").get<int>();
        if (j.contains("tasks")) spec.tasks = j.at("tasks").get<std::vector<std::string>>();
        if (j.contains("m")) spec.m = j.at("m").get<Eigen::Index>();
        if (j.contains("n")) spec.n = j.at("n").get<Eigen::Index>();
        if (j.contains("sigma_population")) spec.sigma_population = j.at("sigma_population").get<double>();
        if (j.contains("sigma_session")) spec.sigma_session = j.at("sigma_session").get<double>();
        if (j.contains("sigma_noise")) spec.sigma_noise = j.at("sigma_noise").get<double>();
        if (j.contains("T")) spec.T = j.at("T").get<Eigen::Index>();
        if (j.contains("sessions")) spec.sessions = j.at("sessions").get<std::vector<std::string>>();
        if (j.contains("seed")) spec.seed = j.at("seed").get<std::uint64_t>();
    } catch (const nlohmann::json::exception& ex) {
        throw ValidationError(std::string("malformed cohort spec: ") + ex.what());
    }
    spec.validate();
    return spec;
}

namespace detail {

// Additive Gaussian perturbation; Q keeps its zero diagonal.
inline GroundTruthSystem perturb_system(const GroundTruthSystem& base, double sigma, Rng& rng) {
    GroundTruthSystem sys = base;
    const Eigen::Index m = base.m();
    const Eigen::Index n = base.n();
    for (Eigen::Index i = 0; i < m; ++i)
        for (Eigen::Index j = 0; j < m; ++j) {
            const double g = rng.normal();
            if (i != j) sys.Q(i, j) += sigma * g;
        }
    sys.A += sigma * gaussian_matrix(m, m, rng);
    sys.B += sigma * gaussian_matrix(m, n, rng);
    return sys;
}

// Re-establishes the generator invariants after a perturbation: Q stays well
// inside the invertibility region and the one-step map stays contractive.
inline void clamp_system(GroundTruthSystem& sys) {
    const double qnorm = spectral_norm(sys.Q);
    if (qnorm > 0.8) sys.Q *= 0.8 / qnorm;
    const double rho = spectral_radius(sys.one_step_matrix());
    if (rho > 0.97) sys.A *= 0.97 / rho;
    sys.stability_margin = 1.0 - spectral_radius(sys.one_step_matrix());
    sys.validate();
}

}  // namespace detail

// Stream ids for the per-recording child generators; fixed so that parallel
// generation cannot change any output.
namespace cohort_streams {
constexpr std::uint64_t task_base = 0;
constexpr std::uint64_t subject = 1;
constexpr std::uint64_t session = 2;
constexpr std::uint64_t noise = 3;
inline std::uint64_t id(std::uint64_t kind, std::uint64_t index) { return (kind << 32) | index; }
}  // namespace cohort_streams

// Generates the cohort on disk (one CSV per subject/task/session plus
// manifest.json) and returns the manifest. Deterministic in spec.seed.
inline CorpusManifest generate_cohort(const CohortSpec& spec, const std::filesystem::path& out_dir) {
    spec.validate();
    namespace fs = std::filesystem;
    fs::create_directories(out_dir);
    const Rng root(spec.seed);

    const std::size_t K = spec.tasks.size();
    const std::size_t J = spec.sessions.size();

    // Task bases: independent draws except the last two tasks, which share a
    // base up to a perturbation of twice the subject spread. That pair is the
    // designed hard case for task classification.
    std::vector<GroundTruthSystem> bases;
    bases.reserve(K);
    for (std::size_t k = 0; k < K; ++k) {
        if (k + 1 == K && K >= 2) {
            Rng rng = root.child(cohort_streams::id(cohort_streams::task_base, k));
            GroundTruthSystem sys =
                detail::perturb_system(bases[k - 1], 2.0 * spec.sigma_population, rng);
            detail::clamp_system(sys);
            bases.push_back(std::move(sys));
        } else {
            bases.push_back(sample_system(spec.m, spec.n, 0.3, 0.9,
                                          root.child(cohort_streams::id(cohort_streams::task_base, k)).next_u64()));
        }
    }

    CorpusManifest manifest;
    manifest.base_dir = out_dir;
    manifest.partition = PartitionSpec::last_n_inputs(spec.m + spec.n, spec.n);
    manifest.normalization = Normalization::zscore_per_channel;

    char subj_buf[16];
    for (int s = 0; s < spec.n_subjects; ++s) {
        std::snprintf(subj_buf, sizeof(subj_buf), "S%03d", s + 1);
        const std::string subject_id(subj_buf);
        for (std::size_t k = 0; k < K; ++k) {
            const std::uint64_t sk = static_cast<std::uint64_t>(s) * K + k;
            Rng subj_rng = root.child(cohort_streams::id(cohort_streams::subject, sk));
            GroundTruthSystem subject_sys = detail::perturb_system(bases[k], spec.sigma_population, subj_rng);
            detail::clamp_system(subject_sys);
            for (std::size_t j = 0; j < J; ++j) {
                const std::uint64_t skj = sk * J + j;
                Rng sess_rng = root.child(cohort_streams::id(cohort_streams::session, skj));
                GroundTruthSystem sess_sys = detail::perturb_system(subject_sys, spec.sigma_session, sess_rng);
                detail::clamp_system(sess_sys);
                auto [X, U] = simulate(sess_sys, spec.T, InputMode::white, spec.sigma_noise,
                                       root.child(cohort_streams::id(cohort_streams::noise, skj)).next_u64());

                Recording rec;
                rec.subject_id = subject_id;
                rec.task_id = spec.tasks[k];
                rec.session_tag = spec.sessions[j];
                rec.dt = 0.72;
                rec.data.resize(spec.m + spec.n, spec.T);
                rec.data.topRows(spec.m) = X;
                rec.data.bottomRows(spec.n) = U;

                const std::string filename = subject_id + "_" + spec.tasks[k] + "_" + spec.sessions[j] + ".csv";
                write_recording(out_dir / filename, rec);
                manifest.entries.push_back({filename, subject_id, spec.tasks[k], spec.sessions[j], rec.dt});
            }
        }
    }
    write_file_atomic(out_dir / "manifest.json", manifest_to_json(manifest).dump(2) + "\n");
    return manifest;
}

}  // namespace causalfp
