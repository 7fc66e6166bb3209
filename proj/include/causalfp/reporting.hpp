#pragma once

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "causalfp/common.hpp"
#include "causalfp/csv.hpp"

namespace causalfp {

// Accuracy grid assembled from report JSONs: methods down the rows, sessions
// (subject-id reports) or task classes (task-eval reports) across the
// columns. Mixing the two kinds is a schema mismatch.
struct ReportGrid {
    std::string kind;
    std::vector<std::string> row_labels;
    std::vector<std::string> col_labels;
    Eigen::MatrixXd values;  // NaN where no report was supplied

    std::string to_csv() const {
        std::string out = "method";
        for (const auto& c : col_labels) out += "," + c;
        out += "\n";
        for (std::size_t r = 0; r < row_labels.size(); ++r) {
            out += row_labels[r];
            for (std::size_t c = 0; c < col_labels.size(); ++c) {
                const double v = values(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
                out += ",";
                if (std::isfinite(v)) out += csv::format_value(v);
            }
            out += "\n";
        }
        return out;
    }

    std::string to_text() const {
        std::ostringstream os;
        std::size_t w = 10;
        for (const auto& r : row_labels) w = std::max(w, r.size() + 2);
        os << std::left << std::setw(static_cast<int>(w)) << "method";
        for (const auto& c : col_labels) os << std::right << std::setw(12) << c;
        os << "\n";
        for (std::size_t r = 0; r < row_labels.size(); ++r) {
            os << std::left << std::setw(static_cast<int>(w)) << row_labels[r];
            for (std::size_t c = 0; c < col_labels.size(); ++c) {
                const double v = values(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
                if (std::isfinite(v))
                    os << std::right << std::setw(11) << std::fixed << std::setprecision(3) << 100.0 * v << "%";
                else
                    os << std::right << std::setw(12) << "-";
            }
            os << "\n";
        }
        return os.str();
    }
};

// Recomputes a subject-id report's accuracy from its per-query records.
inline double recount_accuracy(const nlohmann::json& report) {
    const auto& per_query = report.at("per_query");
    if (per_query.empty()) return 0.0;
    double correct = 0.0;
    for (const auto& q : per_query)
        if (q.at("true_subject").get<std::string>() == q.at("predicted_subject").get<std::string>()) correct += 1.0;
    return correct / static_cast<double>(per_query.size());
}

inline ReportGrid build_grid(const std::vector<nlohmann::json>& reports) {
    if (reports.empty()) throw ValidationError("report grid needs at least one input report");
    ReportGrid grid;
    auto row_of = [&](const std::string& label) {
        const auto it = std::find(grid.row_labels.begin(), grid.row_labels.end(), label);
        if (it != grid.row_labels.end()) return static_cast<std::size_t>(it - grid.row_labels.begin());
        grid.row_labels.push_back(label);
        return grid.row_labels.size() - 1;
    };
    auto col_of = [&](const std::string& label) {
        const auto it = std::find(grid.col_labels.begin(), grid.col_labels.end(), label);
        if (it != grid.col_labels.end()) return static_cast<std::size_t>(it - grid.col_labels.begin());
        grid.col_labels.push_back(label);
        return grid.col_labels.size() - 1;
    };

    struct Cell {
        std::size_t r, c;
        double v;
    };
    std::vector<Cell> cells;
    for (const auto& rep : reports) {
        std::string kind;
        try {
            kind = rep.at("kind").get<std::string>();
        } catch (const nlohmann::json::exception&) {
            throw ValidationError("report is missing its 'kind' field");
        }
        if (grid.kind.empty()) grid.kind = kind;
        if (kind != grid.kind)
            throw ValidationError("cannot mix report kinds in one grid: " + grid.kind + " vs " + kind);
        try {
            if (kind == "subject_id") {
                const auto r = row_of(rep.at("method").get<std::string>());
                const auto c = col_of(rep.at("db_session").get<std::string>());
                cells.push_back({r, c, rep.at("accuracy").get<double>()});
            } else if (kind == "task_eval") {
                const auto r = row_of(rep.at("method").get<std::string>());
                const auto classes = rep.at("classes").get<std::vector<std::string>>();
                const auto per_class = rep.at("per_class_accuracy").get<std::vector<double>>();
                if (classes.size() != per_class.size())
                    throw ValidationError("task report class lists disagree in length");
                for (std::size_t k = 0; k < classes.size(); ++k)
                    cells.push_back({r, col_of(classes[k]), per_class[k]});
                cells.push_back({r, col_of("overall"), rep.at("overall_accuracy").get<double>()});
            } else {
                throw ValidationError("unknown report kind '" + kind + "'");
            }
        } catch (const nlohmann::json::exception& ex) {
            throw ValidationError(std::string("malformed report: ") + ex.what());
        }
    }
    grid.values = Eigen::MatrixXd::Constant(static_cast<Eigen::Index>(grid.row_labels.size()),
                                            static_cast<Eigen::Index>(grid.col_labels.size()),
                                            std::numeric_limits<double>::quiet_NaN());
    for (const auto& cell : cells)
        grid.values(static_cast<Eigen::Index>(cell.r), static_cast<Eigen::Index>(cell.c)) = cell.v;
    return grid;
}

}  // namespace causalfp
