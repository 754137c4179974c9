#include "khn/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "khn/errors.hpp"
#include "khn/instrument.hpp"
#include "khn/training.hpp"

namespace khn {

GradcheckReport gradcheck(const Model& model, const Episode& episode, const GradcheckOptions& options) {
  if (!(options.step > 0.0) || !(options.tolerance > 0.0) || !(options.error_floor > 0.0)) {
    throw ConfigError("gradcheck step, tolerance and error floor must be positive");
  }
  GradcheckReport report;
  report.total_parameters = model.parameter_count();
  if (report.total_parameters > options.max_parameters) {
    throw ConfigError("gradcheck refuses models above " + std::to_string(options.max_parameters) +
                      " parameters; this one has " + std::to_string(report.total_parameters));
  }

  Model work = model.clone();
  for (auto& p : work.all_params()) p.tensor.set_requires_grad(true);
  auto loss = episode_loss(work, episode);
  backward(loss);
  for (auto& p : work.all_params()) p.tensor.set_requires_grad(false);

  auto evaluate = [&](std::uint64_t& signature) {
    instrument::ScopedBranchRecorder recorder;
    const double value = episode_loss(work, episode).item();
    signature = recorder.signature();
    return value;
  };
  std::uint64_t base_signature = 0;
  evaluate(base_signature);

  const std::pair<const char*, ParamList*> groups[] = {
      {"theta_E", &work.encoder}, {"theta_k", &work.kernel}, {"theta_H", &work.hypernet}};
  const double h = options.step;
  for (const auto& [group_name, params] : groups) {
    GroupCheck group;
    group.group = group_name;
    group.parameters = parameter_count(*params);
    for (auto& p : *params) {
      const auto analytic = p.tensor.grad();
      auto values = p.tensor.mutable_data();
      for (std::size_t i = 0; i < values.size(); ++i) {
        const double original = values[i];
        std::uint64_t sig_plus = 0, sig_minus = 0;
        values[i] = original + h;
        const double plus = evaluate(sig_plus);
        values[i] = original - h;
        const double minus = evaluate(sig_minus);
        values[i] = original;
        if (sig_plus != base_signature || sig_minus != base_signature) {
          ++group.skipped_kinks;
          continue;
        }
        const double numeric = (plus - minus) / (2.0 * h);
        const double a = analytic.empty() ? 0.0 : analytic[i];
        const double err = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), options.error_floor});
        ++group.checked;
        if (group.worst.empty() || err > group.max_rel_error) {
          group.max_rel_error = err;
          group.worst = p.name + "[" + std::to_string(i) + "]";
          group.worst_analytic = a;
          group.worst_numeric = numeric;
        }
      }
    }
    group.passed = group.max_rel_error < options.tolerance;
    report.passed = report.passed && group.passed;
    report.groups.push_back(std::move(group));
  }
  return report;
}

}  // namespace khn
