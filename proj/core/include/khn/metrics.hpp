#pragma once

#include <filesystem>
#include <fstream>
#include <string>

#include "khn/training.hpp"

namespace khn {

// Tab-separated iteration log with the header "iteration\tloss\twall_ms".
// Rows are appended; iterations must strictly increase.
class MetricsLog {
 public:
  explicit MetricsLog(const std::filesystem::path& path);

  void append(const IterationRecord& record);
  const std::filesystem::path& path() const noexcept { return path_; }

 private:
  std::filesystem::path path_;
  std::ofstream out_;
  long long last_iteration_ = -1;
};

struct EvalSummary {
  std::string split;
  bool finetune = false;
  int iteration = -1;  // training iteration, -1 outside training
  EvalReport report;
};

// One JSON document per evaluation.
std::string serialize_eval_summary(const EvalSummary& summary);

// "mean ± ci" in percent, e.g. "91.25 ± 1.03 %".
std::string format_report(const EvalReport& report);

}  // namespace khn
