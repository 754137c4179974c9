#include "khn/metrics.hpp"

#include <cstdio>

#include <nlohmann/json.hpp>
#include "khn/errors.hpp"

namespace khn {

MetricsLog::MetricsLog(const std::filesystem::path& path) : path_(path) {
  const bool fresh = !std::filesystem::exists(path) || std::filesystem::file_size(path) == 0;
  out_.open(path, std::ios::app);
  if (!out_) throw DataError("cannot open metrics file " + path.string());
  if (fresh) out_ << "iteration\tloss\twall_ms\n";
  out_.flush();
}

void MetricsLog::append(const IterationRecord& record) {
  if (record.iteration <= last_iteration_) {
    throw StateError("metrics iterations must strictly increase (got " + std::to_string(record.iteration) +
                     " after " + std::to_string(last_iteration_) + ")");
  }
  last_iteration_ = record.iteration;
  char line[96];
  std::snprintf(line, sizeof(line), "%d\t%.17g\t%.3f\n", record.iteration, record.loss, record.wall_ms);
  out_ << line;
  out_.flush();
  if (!out_) throw DataError("cannot write metrics file " + path_.string());
}

std::string serialize_eval_summary(const EvalSummary& summary) {
  nlohmann::json j;
  j["split"] = summary.split;
  j["finetune"] = summary.finetune;
  j["iteration"] = summary.iteration;
  j["episode_count"] = summary.report.episode_count;
  j["mean_accuracy"] = summary.report.mean_accuracy;
  j["ci95_halfwidth"] = summary.report.ci95_halfwidth;
  j["per_episode_accuracies"] = summary.report.per_episode_accuracies;
  return j.dump(2) + "\n";
}

std::string format_report(const EvalReport& report) {
  char text[64];
  std::snprintf(text, sizeof(text), "%.2f ± %.2f %%", 100.0 * report.mean_accuracy,
                100.0 * report.ci95_halfwidth);
  return text;
}

}  // namespace khn
