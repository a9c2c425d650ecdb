#pragma once

#include <cstddef>
#include <vector>

namespace hps {

// Minimum-cost assignment of G ground-truth columns to N >= G distinct
// query rows. cost is row-major [N, G]. Returns, for each column j, the
// query assigned to it. Among optimal assignments the one minimizing
// sum_j (g - j) * query_j is returned, so ties go to lower query indices.
// Throws ShapeError when G > N and NumericError on non-finite entries.
std::vector<std::size_t> hungarian_assign(const std::vector<double>& cost,
                                          std::size_t n, std::size_t g);

double assignment_cost(const std::vector<double>& cost, std::size_t g,
                       const std::vector<std::size_t>& assignment);

}  // namespace hps
