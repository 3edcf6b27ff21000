#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "spine3d/tensor.hpp"

namespace spine3d {

struct GradSuiteEntry {
    std::string name;
    GradReport report;
    double seconds = 0;
};

/// Central-finite-difference checks (h = 1e-4, max relative error < 1e-3)
/// over every differentiable op, the attention / feed-forward / transformer
/// blocks, the discriminator-with-losses path, and a full small generator
/// on a 16x8 input. Deterministic.
std::vector<GradSuiteEntry> run_gradient_suite();

bool gradient_suite_passed(const std::vector<GradSuiteEntry>& entries);

/// One line per check: name, pass/fail, worst parameter, relative error, time.
void print_gradient_suite(std::ostream& os, const std::vector<GradSuiteEntry>& entries);

}  // namespace spine3d
