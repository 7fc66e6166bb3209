#pragma once

#include <charconv>
#include <cstdio>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "causalfp/common.hpp"

namespace causalfp::csv {

// Formats a double with 17 significant digits, enough for an exact
// read-back of any IEEE-754 double.
inline std::string format_value(double v) {
    char buf[40];
    const int len = std::snprintf(buf, sizeof(buf), "%.17g", v);
    return std::string(buf, static_cast<std::size_t>(len));
}

struct Table {
    std::vector<std::string> header;
    // values(r, c): row-major sample layout as it appears in the file.
    Eigen::MatrixXd values;
};

inline std::vector<std::string_view> split_line(std::string_view line) {
    std::vector<std::string_view> fields;
    std::size_t start = 0;
    while (true) {
        const std::size_t pos = line.find(',', start);
        if (pos == std::string_view::npos) {
            fields.push_back(line.substr(start));
            break;
        }
        fields.push_back(line.substr(start, pos - start));
        start = pos + 1;
    }
    return fields;
}

// Reads a numeric CSV with one header row. Errors name the offending
// 1-based data row and column.
inline Table read(const std::filesystem::path& path) {
    const std::string content = read_file(path);
    Table table;
    std::vector<std::vector<double>> rows;
    std::size_t line_no = 0;
    std::size_t start = 0;
    while (start <= content.size()) {
        std::size_t end = content.find('\n', start);
        if (end == std::string::npos) end = content.size();
        std::string_view line(content.data() + start, end - start);
        if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
        start = end + 1;
        if (line.empty()) {
            if (start > content.size()) break;
            continue;
        }
        ++line_no;
        const auto fields = split_line(line);
        if (line_no == 1) {
            for (auto f : fields) table.header.emplace_back(f);
            continue;
        }
        std::vector<double> row;
        row.reserve(fields.size());
        for (std::size_t c = 0; c < fields.size(); ++c) {
            const auto f = fields[c];
            double v = 0.0;
            const auto res = std::from_chars(f.data(), f.data() + f.size(), v);
            if (res.ec != std::errc() || res.ptr != f.data() + f.size())
                throw ValidationError(path.string() + ": non-numeric cell at data row " +
                                      std::to_string(line_no - 1) + ", column " + std::to_string(c + 1) +
                                      " ('" + std::string(f) + "')");
            row.push_back(v);
        }
        if (row.size() != table.header.size())
            throw ValidationError(path.string() + ": row " + std::to_string(line_no - 1) + " has " +
                                  std::to_string(row.size()) + " fields, expected " +
                                  std::to_string(table.header.size()));
        rows.push_back(std::move(row));
    }
    if (table.header.empty()) throw ValidationError(path.string() + ": empty or missing header row");
    table.values.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(table.header.size()));
    for (std::size_t r = 0; r < rows.size(); ++r)
        for (std::size_t c = 0; c < rows[r].size(); ++c)
            table.values(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = rows[r][c];
    return table;
}

inline std::string to_string(const std::vector<std::string>& header, const Eigen::MatrixXd& values) {
    std::string out;
    out.reserve(static_cast<std::size_t>(values.size()) * 24 + header.size() * 8);
    for (std::size_t c = 0; c < header.size(); ++c) {
        if (c) out += ',';
        out += header[c];
    }
    out += '\n';
    for (Eigen::Index r = 0; r < values.rows(); ++r) {
        for (Eigen::Index c = 0; c < values.cols(); ++c) {
            if (c) out += ',';
            out += format_value(values(r, c));
        }
        out += '\n';
    }
    return out;
}

inline void write(const std::filesystem::path& path, const std::vector<std::string>& header,
                  const Eigen::MatrixXd& values) {
    write_file_atomic(path, to_string(header, values));
}

}  // namespace causalfp::csv
