// causalfp: fit two-timescale causal signatures from multichannel recordings,
// identify subjects by modal projection, classify tasks with the attention
// network, and generate synthetic benchmark corpora.

#include <algorithm>
#include <exception>
#include <filesystem>
#include <iostream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "causalfp/common.hpp"
#include "causalfp/fingerprint.hpp"
#include "causalfp/ingest.hpp"
#include "causalfp/modal.hpp"
#include "causalfp/reporting.hpp"
#include "causalfp/synth.hpp"
#include "causalfp/sysid.hpp"
#include "causalfp/training.hpp"

namespace fs = std::filesystem;
using namespace causalfp;

namespace {

void log_config(const std::string& command, const nlohmann::json& cfg) {
    log(LogLevel::info, command + " config: " + cfg.dump());
}

std::vector<std::string> split_csv_list(const std::string& s) {
    std::vector<std::string> out;
    std::size_t start = 0;
    while (start <= s.size()) {
        const std::size_t pos = s.find(',', start);
        if (pos == std::string::npos) {
            if (start < s.size()) out.push_back(s.substr(start));
            break;
        }
        if (pos > start) out.push_back(s.substr(start, pos - start));
        start = pos + 1;
    }
    return out;
}

int run_synth(const std::string& spec_path, const std::string& out_dir, std::int64_t seed_override) {
    CohortSpec spec;
    if (!spec_path.empty()) spec = cohort_spec_from_json(nlohmann::json::parse(read_file(spec_path)));
    if (seed_override >= 0) spec.seed = static_cast<std::uint64_t>(seed_override);
    log_config("synth", cohort_spec_to_json(spec));
    generate_cohort(spec, out_dir);
    std::cout << "wrote cohort (" << spec.n_subjects << " subjects, " << spec.tasks.size() << " tasks, "
              << spec.sessions.size() << " sessions) to " << out_dir << "\n";
    return 0;
}

int run_fit(const std::string& manifest_path, const std::string& out_dir, double ridge) {
    FitConfig cfg;
    cfg.ridge_lambda = ridge;
    const CorpusManifest manifest = load_manifest(manifest_path);
    log_config("fit", {{"manifest", manifest_path}, {"out", out_dir}, {"ridge", ridge}});
    const std::vector<Recording> recs = load_corpus(manifest);
    fs::create_directories(out_dir);
    for (const auto& rec : recs) {
        auto [X, U] = partition(rec, manifest.partition);
        const CausalSignature sig = fit_signature(X, U, cfg);
        const std::string stem = rec.subject_id + "_" + rec.task_id + "_" + rec.session_tag;
        write_signature(fs::path(out_dir) / (stem + ".sig.csv"), fs::path(out_dir) / (stem + ".sig.json"), sig);
    }
    std::cout << "fitted " << recs.size() << " signatures to " << out_dir << "\n";
    return 0;
}

int run_subject_id(const std::string& manifest_path, std::string task, const std::string& db_session,
                   const std::string& query_sessions, const std::string& method, const std::string& report_path,
                   double ridge, std::uint64_t seed) {
    const CorpusManifest manifest = load_manifest(manifest_path);
    const std::vector<Recording> recs = load_corpus(manifest);
    if (task.empty()) {
        if (manifest.entries.empty()) throw ValidationError("manifest has no entries");
        task = manifest.entries.front().task_id;
    }
    IdProtocol protocol;
    protocol.task_id = task;
    protocol.db_session = db_session;
    protocol.query_sessions = split_csv_list(query_sessions);
    protocol.method = id_method_from_string(method);
    protocol.fit.ridge_lambda = ridge;
    if (protocol.query_sessions.empty()) throw ValidationError("need at least one query session");
    log_config("subject-id", {{"manifest", manifest_path},
                              {"task", task},
                              {"db_session", db_session},
                              {"query_sessions", protocol.query_sessions},
                              {"method", method},
                              {"ridge", ridge},
                              {"seed", seed}});
    const IdReport report = evaluate_subject_id(recs, manifest.partition, protocol);
    write_file_atomic(report_path, id_report_to_json(report, seed).dump(2) + "\n");
    std::cout << to_string(report.method) << " db=" << db_session << " accuracy=" << report.accuracy << " ("
              << report.correct << "/" << report.total_queries << ", " << report.fit_errors << " errors)\n";
    return 0;
}

struct LabeledDataset {
    std::vector<gnn::TaskGraph> graphs;
    std::vector<std::string> class_names;
};

LabeledDataset graphs_from_corpus(const CorpusManifest& manifest, const std::vector<Recording>& recs,
                                  const FitConfig& fit_cfg, const std::vector<std::string>& class_names = {}) {
    LabeledDataset ds;
    if (class_names.empty()) {
        std::set<std::string> tasks;
        for (const auto& rec : recs) tasks.insert(rec.task_id);
        ds.class_names.assign(tasks.begin(), tasks.end());
    } else {
        ds.class_names = class_names;
    }
    std::map<std::string, int> label_of;
    for (std::size_t i = 0; i < ds.class_names.size(); ++i) label_of[ds.class_names[i]] = static_cast<int>(i);
    for (const auto& rec : recs) {
        const auto it = label_of.find(rec.task_id);
        if (it == label_of.end())
            throw ValidationError("recording task '" + rec.task_id + "' is not among the model's classes");
        auto [X, U] = partition(rec, manifest.partition);
        ds.graphs.push_back(gnn::build_graph(fit_signature(X, U, fit_cfg), it->second, rec.subject_id));
    }
    return ds;
}

int run_task_train(const std::string& manifest_path, const std::string& config_path, const std::string& out_path,
                   std::string history_path, double ridge) {
    gnn::TrainConfig cfg;
    if (!config_path.empty()) cfg = gnn::train_config_from_json(nlohmann::json::parse(read_file(config_path)));
    log_config("task-train", {{"manifest", manifest_path},
                              {"out", out_path},
                              {"ridge", ridge},
                              {"train", gnn::train_config_to_json(cfg)}});
    const CorpusManifest manifest = load_manifest(manifest_path);
    const std::vector<Recording> recs = load_corpus(manifest);
    FitConfig fit_cfg;
    fit_cfg.ridge_lambda = ridge;
    const LabeledDataset ds = graphs_from_corpus(manifest, recs, fit_cfg);
    const gnn::GnnModel model = gnn::train(ds.graphs, ds.class_names, cfg);

    nlohmann::json j = gnn::model_to_json(model);
    j["train_indices"] = model.train_indices;
    j["test_indices"] = model.test_indices;
    write_file_atomic(out_path, j.dump() + "\n");
    if (history_path.empty()) history_path = (fs::path(out_path).parent_path() / "history.csv").string();
    write_file_atomic(history_path, gnn::history_to_csv(model.history));
    const auto& last = model.history.back();
    std::cout << "trained " << cfg.epochs << " epochs: train_acc=" << last.train_acc
              << " test_acc=" << last.test_acc << "; model at " << out_path << "\n";
    return 0;
}

int run_task_eval(const std::string& model_path, const std::string& manifest_path, const std::string& report_path,
                  const std::string& split, double ridge) {
    const nlohmann::json mj = nlohmann::json::parse(read_file(model_path));
    const gnn::GnnModel model = gnn::model_from_json(mj);
    log_config("task-eval", {{"model", model_path},
                             {"manifest", manifest_path},
                             {"split", split},
                             {"ridge", ridge},
                             {"seed", model.train_cfg.seed}});
    const CorpusManifest manifest = load_manifest(manifest_path);
    const std::vector<Recording> recs = load_corpus(manifest);
    FitConfig fit_cfg;
    fit_cfg.ridge_lambda = ridge;
    LabeledDataset ds = graphs_from_corpus(manifest, recs, fit_cfg, model.class_names);

    std::vector<gnn::TaskGraph> subset;
    if (split == "all") {
        subset = std::move(ds.graphs);
    } else {
        std::vector<std::size_t> idx;
        if (mj.contains(split + "_indices")) idx = mj.at(split + "_indices").get<std::vector<std::size_t>>();
        if (idx.empty()) throw ValidationError("model carries no '" + split + "' split indices");
        for (const std::size_t i : idx) {
            if (i >= ds.graphs.size()) throw ValidationError("split index out of range for this manifest");
            subset.push_back(ds.graphs[i]);
        }
    }
    const gnn::EvalResult res = gnn::evaluate(model.params, subset);

    nlohmann::json report{{"kind", "task_eval"},
                          {"method", "cm-gnn"},
                          {"split", split},
                          {"seed", model.train_cfg.seed},
                          {"classes", model.class_names},
                          {"overall_accuracy", res.accuracy},
                          {"per_class_accuracy", res.per_class_accuracy}};
    nlohmann::json conf = nlohmann::json::array();
    for (Eigen::Index r = 0; r < res.confusion.rows(); ++r) {
        nlohmann::json row = nlohmann::json::array();
        for (Eigen::Index c = 0; c < res.confusion.cols(); ++c) row.push_back(res.confusion(r, c));
        conf.push_back(std::move(row));
    }
    report["confusion"] = std::move(conf);
    write_file_atomic(report_path, report.dump(2) + "\n");
    std::cout << "task accuracy (" << split << "): " << res.accuracy << " over " << subset.size() << " graphs\n";
    return 0;
}

int run_report(const std::vector<std::string>& inputs, const std::string& out_path) {
    std::vector<nlohmann::json> reports;
    for (const auto& path : inputs) {
        try {
            reports.push_back(nlohmann::json::parse(read_file(path)));
        } catch (const nlohmann::json::exception& ex) {
            throw ValidationError(path + ": invalid JSON: " + ex.what());
        }
    }
    const ReportGrid grid = build_grid(reports);
    if (!out_path.empty()) write_file_atomic(out_path, grid.to_csv());
    std::cout << grid.to_text();
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    // the CLI logs its resolved configuration by default; CF_LOG still
    // overrides in both directions
    if (!std::getenv("CF_LOG")) log_level() = LogLevel::info;

    CLI::App app{"causal fingerprinting toolkit"};
    app.require_subcommand(1);

    std::string spec_path, out_dir, manifest_path, report_path, model_path, config_path, history_path;
    std::string task, db_session, query_sessions, method = "cm-mdp", split = "all";
    std::vector<std::string> report_inputs;
    double ridge = 1e-6;
    std::int64_t seed_override = -1;
    std::uint64_t seed = 0;

    auto* synth_cmd = app.add_subcommand("synth", "generate a synthetic cohort");
    synth_cmd->add_option("--spec", spec_path, "cohort spec JSON (defaults apply when omitted)");
    synth_cmd->add_option("--out", out_dir, "output directory")->required();
    synth_cmd->add_option("--seed", seed_override, "override the seed from the cohort file");

    auto* fit_cmd = app.add_subcommand("fit", "fit causal signatures for every manifest entry");
    fit_cmd->add_option("--manifest", manifest_path, "corpus manifest JSON")->required();
    fit_cmd->add_option("--out", out_dir, "output directory")->required();
    fit_cmd->add_option("--ridge", ridge, "ridge penalty (default 1e-6)");

    auto* sid_cmd = app.add_subcommand("subject-id", "one-shot subject identification");
    sid_cmd->add_option("--manifest", manifest_path, "corpus manifest JSON")->required();
    sid_cmd->add_option("--task", task, "task to evaluate (default: first task in manifest)");
    sid_cmd->add_option("--db-session", db_session, "session used for the database")->required();
    sid_cmd->add_option("--query-sessions", query_sessions, "comma-separated query sessions")->required();
    sid_cmd->add_option("--method", method, "cm-mdp | fc-cor | cm-fn");
    sid_cmd->add_option("--report", report_path, "output report JSON")->required();
    sid_cmd->add_option("--ridge", ridge, "ridge penalty (default 1e-6)");
    sid_cmd->add_option("--seed", seed, "seed recorded in the report");

    auto* train_cmd = app.add_subcommand("task-train", "train the task classifier");
    train_cmd->add_option("--manifest", manifest_path, "corpus manifest JSON")->required();
    train_cmd->add_option("--config", config_path, "training config JSON (defaults apply when omitted)");
    train_cmd->add_option("--out", model_path, "output model JSON")->required();
    train_cmd->add_option("--history", history_path, "per-epoch history CSV (default: history.csv next to model)");
    train_cmd->add_option("--ridge", ridge, "ridge penalty for signature fits (default 1e-6)");

    auto* eval_cmd = app.add_subcommand("task-eval", "evaluate a trained task classifier");
    eval_cmd->add_option("--model", model_path, "model JSON from task-train")->required();
    eval_cmd->add_option("--manifest", manifest_path, "corpus manifest JSON")->required();
    eval_cmd->add_option("--report", report_path, "output report JSON")->required();
    eval_cmd->add_option("--split", split, "all | train | test (default all)");
    eval_cmd->add_option("--ridge", ridge, "ridge penalty for signature fits (default 1e-6)");

    auto* report_cmd = app.add_subcommand("report", "combine report JSONs into an accuracy grid");
    report_cmd->add_option("--inputs", report_inputs, "report JSON files")->required()->delimiter(',');
    report_cmd->add_option("--out", out_dir, "output grid CSV");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);  // --help
        std::cerr << e.what() << "\n\n" << app.help();
        return 1;
    }

    try {
        if (synth_cmd->parsed()) return run_synth(spec_path, out_dir, seed_override);
        if (fit_cmd->parsed()) return run_fit(manifest_path, out_dir, ridge);
        if (sid_cmd->parsed())
            return run_subject_id(manifest_path, task, db_session, query_sessions, method, report_path, ridge, seed);
        if (train_cmd->parsed()) return run_task_train(manifest_path, config_path, model_path, history_path, ridge);
        if (eval_cmd->parsed()) return run_task_eval(model_path, manifest_path, report_path, split, ridge);
        if (report_cmd->parsed()) return run_report(report_inputs, out_dir);
    } catch (const ValidationError& ex) {
        std::cerr << "error: " << ex.what() << "\n";
        return 1;
    } catch (const NumericalError& ex) {
        std::cerr << "numerical error: " << ex.what() << "\n";
        return 2;
    } catch (const nlohmann::json::exception& ex) {
        std::cerr << "error: " << ex.what() << "\n";
        return 1;
    } catch (const std::exception& ex) {
        std::cerr << "error: " << ex.what() << "\n";
        return 1;
    }
    return 0;
}
