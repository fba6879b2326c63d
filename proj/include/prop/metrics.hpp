#pragma once

#include <cstdio>
#include <numeric>
#include <string>
#include <vector>

#include "prop/dataset.hpp"
#include "prop/errors.hpp"
#include "prop/tensor.hpp"

namespace prop {

/// Accuracy after each incremental step. last[t] is top-1 accuracy over the
/// test data of every class seen through task t; avg[t] is the mean of
/// last[0..t]; per_task[t][i] is the accuracy on task i's test data after step t.
struct AccuracyRecord {
  std::vector<real> last;
  std::vector<real> avg;
  std::vector<std::vector<real>> per_task;

  void push(real last_t, std::vector<real> per_task_t = {}) {
    if (!(last_t >= 0 && last_t <= 1)) throw ContractError("accuracy outside [0, 1]");
    last.push_back(last_t);
    real s = 0;
    for (auto v : last) s += v;
    avg.push_back(s / static_cast<real>(last.size()));
    per_task.push_back(std::move(per_task_t));
  }

  std::size_t steps() const { return last.size(); }
  real final_last() const { return last.empty() ? real(0) : last.back(); }
  real final_avg() const { return avg.empty() ? real(0) : avg.back(); }
};

struct StepAccuracy {
  real seen = 0;               // over all seen classes
  std::vector<real> per_task;  // one entry per task 0..t
};

/// Evaluates `predict(sample) -> class id` on the test data of tasks 0..t.
template <class Predict>
StepAccuracy evaluate_step(const TaskStream& stream, std::size_t t, Predict&& predict) {
  StepAccuracy out;
  std::size_t correct_all = 0, total_all = 0;
  for (std::size_t i = 0; i <= t; ++i) {
    std::size_t correct = 0;
    for (const auto& s : stream.tasks[i].test) {
      if (predict(s) == s.label) ++correct;
    }
    const std::size_t n = stream.tasks[i].test.size();
    out.per_task.push_back(n ? real(correct) / real(n) : real(0));
    correct_all += correct;
    total_all += n;
  }
  if (total_all == 0) throw DataError("evaluation: no test samples for the seen classes");
  out.seen = real(correct_all) / real(total_all);
  return out;
}

inline std::string format_real(real v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.10f", static_cast<double>(v));
  return buf;
}

/// metrics.csv: step,last,avg,task_0..task_{T-1}; tasks not yet seen are left blank.
inline std::string metrics_csv(const AccuracyRecord& rec, std::size_t num_tasks) {
  std::string out = "step,last,avg";
  for (std::size_t i = 0; i < num_tasks; ++i) out += ",task_" + std::to_string(i);
  out += '\n';
  for (std::size_t t = 0; t < rec.steps(); ++t) {
    out += std::to_string(t) + ',' + format_real(rec.last[t]) + ',' + format_real(rec.avg[t]);
    for (std::size_t i = 0; i < num_tasks; ++i) {
      out += ',';
      if (i < rec.per_task[t].size()) out += format_real(rec.per_task[t][i]);
    }
    out += '\n';
  }
  return out;
}

}  // namespace prop
