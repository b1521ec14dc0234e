#pragma once

#include <cstddef>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

namespace bilbo {

/// Distribution summary for one metric across probe points or examples.
struct MetricSummary {
  double median = 0.0;
  double p90 = 0.0;
  std::size_t n = 0;
  /// Number of probes excluded or flagged (e.g. extrapolated decoder calls).
  std::size_t flags = 0;
};

/// Median and 90th percentile (nearest-rank) of the values.
MetricSummary summarize(std::vector<double> values, std::size_t flags = 0);

/// metric name -> summary; serialises as {name: {median, p90, n, flags}}.
using Report = std::map<std::string, MetricSummary>;

nlohmann::json to_json(const MetricSummary& s);
nlohmann::json to_json(const Report& report);

double median(std::vector<double> values);

}  // namespace bilbo
