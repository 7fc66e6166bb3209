#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "causalfp/common.hpp"
#include "causalfp/ingest.hpp"
#include "causalfp/modal.hpp"
#include "causalfp/sysid.hpp"

namespace causalfp {

enum class IdMethod { cm_mdp, fc_cor, cm_fn };

inline std::string to_string(IdMethod m) {
    switch (m) {
        case IdMethod::cm_mdp: return "cm-mdp";
        case IdMethod::fc_cor: return "fc-cor";
        case IdMethod::cm_fn: return "cm-fn";
    }
    return "?";
}

inline IdMethod id_method_from_string(const std::string& s) {
    if (s == "cm-mdp") return IdMethod::cm_mdp;
    if (s == "fc-cor") return IdMethod::fc_cor;
    if (s == "cm-fn") return IdMethod::cm_fn;
    throw ValidationError("unknown identification method '" + s + "' (expected cm-mdp, fc-cor or cm-fn)");
}

struct DatabaseEntry {
    std::string subject_id;
    CausalSignature signature;
    ModalFeatures features;
};

// One labeled exemplar per subject for a single task/session.
struct SignatureDatabase {
    std::string task_id;
    std::string built_from;  // session tag
    std::vector<DatabaseEntry> entries;
};

struct Identification {
    std::string subject_id;
    double distance = 0.0;
    double margin = std::numeric_limits<double>::infinity();  // runner-up minus best
};

// Pearson correlation matrix of all channels. Constant channels get a zero
// row/column (including the diagonal) and are flagged.
struct FcMatrix {
    Eigen::MatrixXd values;
    std::vector<Eigen::Index> constant_channels;
};

inline FcMatrix fc_matrix(const Recording& rec) {
    const Eigen::Index p = rec.channels();
    const Eigen::Index T = rec.samples();
    if (T < 3) throw ValidationError("functional connectivity needs T >= 3");
    Eigen::MatrixXd centered = rec.data;
    Eigen::VectorXd norms(p);
    for (Eigen::Index i = 0; i < p; ++i) {
        centered.row(i).array() -= rec.data.row(i).mean();
        norms(i) = centered.row(i).norm();
    }
    FcMatrix fc;
    fc.values.setZero(p, p);
    for (Eigen::Index i = 0; i < p; ++i) {
        if (norms(i) == 0.0) {
            fc.constant_channels.push_back(i);
            continue;
        }
        fc.values(i, i) = 1.0;
        for (Eigen::Index j = i + 1; j < p; ++j) {
            if (norms(j) == 0.0) continue;
            const double r = std::clamp(centered.row(i).dot(centered.row(j)) / (norms(i) * norms(j)), -1.0, 1.0);
            fc.values(i, j) = r;
            fc.values(j, i) = r;
        }
    }
    return fc;
}

// Fits and decomposes one recording per subject. All recordings must share
// the task; duplicate subjects are rejected.
inline SignatureDatabase build_database(const std::vector<Recording>& recordings, const PartitionSpec& spec,
                                        const FitConfig& cfg = {}) {
    if (recordings.empty()) throw ValidationError("cannot build a database from an empty recording list");
    SignatureDatabase db;
    db.task_id = recordings.front().task_id;
    db.built_from = recordings.front().session_tag;
    std::set<std::string> seen;
    for (const auto& rec : recordings) {
        if (rec.task_id != db.task_id)
            throw ValidationError("database recordings mix tasks: " + db.task_id + " vs " + rec.task_id);
        if (!seen.insert(rec.subject_id).second)
            throw ValidationError("duplicate subject in database: " + rec.subject_id);
        try {
            auto [X, U] = partition(rec, spec);
            DatabaseEntry entry;
            entry.subject_id = rec.subject_id;
            entry.signature = fit_signature(X, U, cfg);
            entry.features = decompose(entry.signature);
            db.entries.push_back(std::move(entry));
        } catch (const std::exception& ex) {
            throw NumericalError("while fitting database subject " + rec.subject_id + ": " + ex.what());
        }
    }
    return db;
}

namespace detail {

// Shared argbest scan: smaller score wins, lexicographically smaller subject
// breaks exact ties. Returns best subject plus (runner-up - best) margin.
template <typename Score>
Identification pick_best(const std::vector<DatabaseEntry>& entries, Score&& score) {
    Identification best;
    double second = std::numeric_limits<double>::infinity();
    double best_score = std::numeric_limits<double>::infinity();
    for (const auto& entry : entries) {
        const double s = score(entry);
        const bool wins = s < best_score || (s == best_score && entry.subject_id < best.subject_id);
        if (wins) {
            second = std::min(second, best_score);
            best_score = s;
            best.subject_id = entry.subject_id;
        } else {
            second = std::min(second, s);
        }
    }
    best.distance = best_score;
    best.margin = second - best_score;
    return best;
}

}  // namespace detail

// Nearest database subject under the modal-projection distance.
inline Identification identify(const SignatureDatabase& db, const ModalFeatures& query) {
    if (db.entries.empty()) throw ValidationError("identify: database is empty");
    if (db.entries.front().features.m() != query.m())
        throw ValidationError("identify: modal dimension mismatch");
    return detail::pick_best(db.entries,
                             [&](const DatabaseEntry& e) { return modal_distance(e.features, query); });
}

// Frobenius-norm baseline on the stacked [Q A B] blocks.
inline Identification identify_fn(const SignatureDatabase& db, const CausalSignature& query) {
    if (db.entries.empty()) throw ValidationError("identify_fn: database is empty");
    if (db.entries.front().signature.m() != query.m() || db.entries.front().signature.n() != query.n())
        throw ValidationError("identify_fn: signature shape mismatch");
    const Eigen::MatrixXd Rq = query.stacked();
    return detail::pick_best(db.entries,
                             [&](const DatabaseEntry& e) { return (e.signature.stacked() - Rq).norm(); });
}

struct FcDatabaseEntry {
    std::string subject_id;
    FcMatrix fc;
};

namespace detail {

// Pearson correlation between the vectorized strict upper triangles.
inline double fc_similarity(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
    const Eigen::Index p = a.rows();
    if (b.rows() != p) throw ValidationError("FC matrices disagree on channel count");
    const Eigen::Index len = p * (p - 1) / 2;
    Eigen::VectorXd va(len), vb(len);
    Eigen::Index k = 0;
    for (Eigen::Index i = 0; i < p; ++i)
        for (Eigen::Index j = i + 1; j < p; ++j, ++k) {
            va(k) = a(i, j);
            vb(k) = b(i, j);
        }
    va.array() -= va.mean();
    vb.array() -= vb.mean();
    const double denom = va.norm() * vb.norm();
    if (denom == 0.0) return 0.0;
    return std::clamp(va.dot(vb) / denom, -1.0, 1.0);
}

}  // namespace detail

// Correlation-of-connectomes baseline: highest upper-triangle correlation
// wins. Reported distance is 1 - correlation so that smaller is better, like
// the other methods.
inline Identification identify_fc(const std::vector<FcDatabaseEntry>& db, const FcMatrix& query) {
    if (db.empty()) throw ValidationError("identify_fc: database is empty");
    Identification best;
    double best_score = std::numeric_limits<double>::infinity();
    double second = std::numeric_limits<double>::infinity();
    for (const auto& entry : db) {
        const double s = 1.0 - detail::fc_similarity(entry.fc.values, query.values);
        const bool wins = s < best_score || (s == best_score && entry.subject_id < best.subject_id);
        if (wins) {
            second = std::min(second, best_score);
            best_score = s;
            best.subject_id = entry.subject_id;
        } else {
            second = std::min(second, s);
        }
    }
    best.distance = best_score;
    best.margin = second - best_score;
    return best;
}

struct QueryRecord {
    std::string true_subject;
    std::string predicted_subject;
    double distance = 0.0;
    double margin = 0.0;
};

struct IdReport {
    IdMethod method = IdMethod::cm_mdp;
    std::string task_id;
    std::string db_session;
    std::vector<std::string> query_sessions;
    int total_queries = 0;  // queries that produced a prediction
    int correct = 0;
    double accuracy = 0.0;
    int fit_errors = 0;  // queries dropped due to numerical failure
    std::vector<std::string> error_messages;
    std::vector<QueryRecord> per_query;
};

struct IdProtocol {
    std::string task_id;
    std::string db_session;
    std::vector<std::string> query_sessions;
    IdMethod method = IdMethod::cm_mdp;
    FitConfig fit;
};

// Runs one database-session protocol over preloaded (already normalized)
// recordings: builds the database from db_session and queries every matching
// recording from the query sessions.
inline IdReport evaluate_subject_id(const std::vector<Recording>& corpus, const PartitionSpec& spec,
                                    const IdProtocol& protocol) {
    std::vector<Recording> db_recs;
    std::vector<const Recording*> queries;
    for (const auto& rec : corpus) {
        if (rec.task_id != protocol.task_id) continue;
        if (rec.session_tag == protocol.db_session) db_recs.push_back(rec);
        if (std::find(protocol.query_sessions.begin(), protocol.query_sessions.end(), rec.session_tag) !=
            protocol.query_sessions.end())
            queries.push_back(&rec);
    }
    if (db_recs.empty())
        throw ValidationError("no recordings for task '" + protocol.task_id + "', session '" +
                              protocol.db_session + "'");
    for (const auto& s : protocol.query_sessions) {
        const bool found = std::any_of(queries.begin(), queries.end(),
                                       [&](const Recording* r) { return r->session_tag == s; });
        if (!found) throw ValidationError("no recordings for query session '" + s + "'");
    }

    IdReport report;
    report.method = protocol.method;
    report.task_id = protocol.task_id;
    report.db_session = protocol.db_session;
    report.query_sessions = protocol.query_sessions;

    SignatureDatabase db;
    std::vector<FcDatabaseEntry> fc_db;
    if (protocol.method == IdMethod::fc_cor) {
        std::set<std::string> seen;
        for (const auto& rec : db_recs) {
            if (!seen.insert(rec.subject_id).second)
                throw ValidationError("duplicate subject in database: " + rec.subject_id);
            fc_db.push_back({rec.subject_id, fc_matrix(rec)});
        }
    } else {
        db = build_database(db_recs, spec, protocol.fit);
    }

    for (const Recording* q : queries) {
        Identification id;
        try {
            if (protocol.method == IdMethod::fc_cor) {
                id = identify_fc(fc_db, fc_matrix(*q));
            } else {
                auto [X, U] = partition(*q, spec);
                const CausalSignature sig = fit_signature(X, U, protocol.fit);
                id = protocol.method == IdMethod::cm_mdp ? identify(db, decompose(sig)) : identify_fn(db, sig);
            }
        } catch (const NumericalError& ex) {
            ++report.fit_errors;
            report.error_messages.push_back(q->subject_id + "/" + q->session_tag + ": " + ex.what());
            continue;
        }
        report.per_query.push_back({q->subject_id, id.subject_id, id.distance, id.margin});
        ++report.total_queries;
        if (id.subject_id == q->subject_id) ++report.correct;
    }
    report.accuracy = report.total_queries > 0
                          ? static_cast<double>(report.correct) / static_cast<double>(report.total_queries)
                          : 0.0;
    return report;
}

// Convenience overload: loads and normalizes the corpus first.
inline IdReport evaluate_subject_id(const CorpusManifest& manifest, const IdProtocol& protocol) {
    return evaluate_subject_id(load_corpus(manifest), manifest.partition, protocol);
}

inline nlohmann::json id_report_to_json(const IdReport& report, std::uint64_t seed) {
    nlohmann::json j{{"kind", "subject_id"},
                     {"method", to_string(report.method)},
                     {"task", report.task_id},
                     {"db_session", report.db_session},
                     {"query_sessions", report.query_sessions},
                     {"seed", seed},
                     {"total_queries", report.total_queries},
                     {"correct", report.correct},
                     {"accuracy", report.accuracy},
                     {"fit_errors", report.fit_errors},
                     {"error_messages", report.error_messages}};
    j["per_query"] = nlohmann::json::array();
    for (const auto& q : report.per_query)
        j["per_query"].push_back({{"true_subject", q.true_subject},
                                  {"predicted_subject", q.predicted_subject},
                                  {"distance", q.distance},
                                  {"margin", std::isfinite(q.margin) ? nlohmann::json(q.margin) : nlohmann::json()}});
    return j;
}

}  // namespace causalfp
