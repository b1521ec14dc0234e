#include "bilbo/report.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace bilbo {

namespace {

double nearest_rank(const std::vector<double>& sorted, double q) {
  const auto n = static_cast<double>(sorted.size());
  const auto rank = static_cast<std::size_t>(std::ceil(q * n));
  return sorted[std::clamp<std::size_t>(rank, 1, sorted.size()) - 1];
}

}  // namespace

double median(std::vector<double> values) {
  if (values.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::sort(values.begin(), values.end());
  const std::size_t n = values.size();
  return n % 2 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

MetricSummary summarize(std::vector<double> values, std::size_t flags) {
  MetricSummary s;
  s.n = values.size();
  s.flags = flags;
  if (values.empty()) {
    s.median = s.p90 = std::numeric_limits<double>::quiet_NaN();
    return s;
  }
  s.median = median(values);
  std::sort(values.begin(), values.end());
  s.p90 = nearest_rank(values, 0.9);
  return s;
}

nlohmann::json to_json(const MetricSummary& s) {
  return {{"median", s.median}, {"p90", s.p90}, {"n", s.n}, {"flags", s.flags}};
}

nlohmann::json to_json(const Report& report) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [name, summary] : report) j[name] = to_json(summary);
  return j;
}

}  // namespace bilbo
