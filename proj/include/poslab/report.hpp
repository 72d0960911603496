#pragma once

#include <filesystem>
#include <string>

#include "poslab/protocol.hpp"

namespace poslab {

// Summary table: one block per (arm, rate) with per-step seed means, plus the
// Vision - NoVision delta rows.
std::string summary_csv(const AggregateTable& table);

// Learning curves for one injection rate: macro-F1 over steps, solid lines
// for the vision arm and dashed for no-vision, chance line at 50. Output is
// timestamp-free so identical inputs give identical bytes.
std::string learning_curve_svg(const AggregateTable& table, double rate);

// Writes summary.csv and one curves_rate_<r>.svg per rate present.
void write_reports(const AggregateTable& table, const std::filesystem::path& reports_dir);

}  // namespace poslab
