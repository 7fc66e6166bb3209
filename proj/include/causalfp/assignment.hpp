#pragma once

#include <limits>
#include <vector>

#include <Eigen/Dense>

#include "causalfp/common.hpp"

namespace causalfp {

// Dense linear assignment by shortest augmenting paths with potentials
// (Jonker-Volgenant style, O(n^3)). Returns, for each row, the column that
// maximizes the total score. Ties resolve deterministically toward smaller
// column indices via the scan order.
inline std::vector<Eigen::Index> solve_assignment_max(const Eigen::MatrixXd& score) {
    const Eigen::Index n = score.rows();
    if (score.cols() != n) throw ValidationError("assignment needs a square score matrix");
    if (n == 0) return {};
    const double inf = std::numeric_limits<double>::infinity();

    // Minimize the negated score; 1-based with column 0 as virtual start.
    std::vector<double> u(static_cast<std::size_t>(n) + 1, 0.0), v(static_cast<std::size_t>(n) + 1, 0.0);
    std::vector<Eigen::Index> match(static_cast<std::size_t>(n) + 1, 0);  // match[j] = row assigned to col j
    std::vector<Eigen::Index> way(static_cast<std::size_t>(n) + 1, 0);

    for (Eigen::Index i = 1; i <= n; ++i) {
        match[0] = i;
        Eigen::Index j0 = 0;
        std::vector<double> minv(static_cast<std::size_t>(n) + 1, inf);
        std::vector<char> used(static_cast<std::size_t>(n) + 1, 0);
        do {
            used[static_cast<std::size_t>(j0)] = 1;
            const Eigen::Index i0 = match[static_cast<std::size_t>(j0)];
            double delta = inf;
            Eigen::Index j1 = -1;
            for (Eigen::Index j = 1; j <= n; ++j) {
                if (used[static_cast<std::size_t>(j)]) continue;
                const double cur = -score(i0 - 1, j - 1) - u[static_cast<std::size_t>(i0)] - v[static_cast<std::size_t>(j)];
                if (cur < minv[static_cast<std::size_t>(j)]) {
                    minv[static_cast<std::size_t>(j)] = cur;
                    way[static_cast<std::size_t>(j)] = j0;
                }
                if (minv[static_cast<std::size_t>(j)] < delta) {
                    delta = minv[static_cast<std::size_t>(j)];
                    j1 = j;
                }
            }
            for (Eigen::Index j = 0; j <= n; ++j) {
                if (used[static_cast<std::size_t>(j)]) {
                    u[static_cast<std::size_t>(match[static_cast<std::size_t>(j)])] += delta;
                    v[static_cast<std::size_t>(j)] -= delta;
                } else {
                    minv[static_cast<std::size_t>(j)] -= delta;
                }
            }
            j0 = j1;
        } while (match[static_cast<std::size_t>(j0)] != 0);
        do {
            const Eigen::Index j1 = way[static_cast<std::size_t>(j0)];
            match[static_cast<std::size_t>(j0)] = match[static_cast<std::size_t>(j1)];
            j0 = j1;
        } while (j0);
    }

    std::vector<Eigen::Index> row_to_col(static_cast<std::size_t>(n), -1);
    for (Eigen::Index j = 1; j <= n; ++j)
        row_to_col[static_cast<std::size_t>(match[static_cast<std::size_t>(j)] - 1)] = j - 1;
    return row_to_col;
}

}  // namespace causalfp
