#pragma once

// Command-line front end. Verbs: synth, preprocess, train-unet, train, eval,
// gradcheck, report. Exit codes: 0 success, 1 runtime failure, 2 usage.

#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "mamt4/loss_metrics.hpp"

namespace mamt4::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int run(int argc, const char* const* argv);

// "runs/s1_seed3" -> "runs/s1": drops a "seed<digits>" token and the
// separator before it.
std::string experiment_key(const std::string& stem);

// One line per metric over a group of seeds, e.g.
// "ROC-AUC mean ± std: 84.0 ± 1.7".
std::string format_seed_summary(const std::vector<MetricsReport>& reports);

// Method | ROC-AUC | F1 | F1-macro | seeds
std::string format_report_table(const std::map<std::string, std::vector<MetricsReport>>& groups);

}  // namespace mamt4::cli
