#pragma once

// JSON-lines metrics writer. One record per line: step, wall time, named
// scalar metrics. Steps must be non-decreasing within a file.

#include <chrono>
#include <fstream>
#include <map>
#include <string>

#include <json.hpp>

#include "rqunify/errors.hpp"

namespace rqunify {

struct MetricsRecord {
  int64_t step = 0;
  double wall_time_s = 0;
  std::string phase;
  std::map<std::string, double> values;  // ordered keys keep files diffable
};

class MetricsWriter {
 public:
  MetricsWriter() = default;

  // `deterministic` zeroes the wall-time field so seeded runs produce
  // byte-identical files.
  explicit MetricsWriter(const std::string& path, bool deterministic = false)
      : out_(path, std::ios::trunc), deterministic_(deterministic) {
    if (!out_) throw IoError("cannot open metrics file: " + path);
    start_ = std::chrono::steady_clock::now();
  }

  void write(MetricsRecord rec) {
    if (rec.step < last_step_)
      throw ContractError("metrics step " + std::to_string(rec.step) +
                          " went backwards from " +
                          std::to_string(last_step_));
    last_step_ = rec.step;
    if (deterministic_) {
      rec.wall_time_s = 0;
    } else if (rec.wall_time_s == 0) {
      rec.wall_time_s = std::chrono::duration<double>(
                            std::chrono::steady_clock::now() - start_)
                            .count();
    }
    nlohmann::json j;
    j["step"] = rec.step;
    j["wall_time_s"] = rec.wall_time_s;
    if (!rec.phase.empty()) j["phase"] = rec.phase;
    for (const auto& [k, v] : rec.values) j[k] = v;
    out_ << j.dump() << "\n";
    out_.flush();
    if (!out_) throw IoError("metrics write failed");
  }

 private:
  std::ofstream out_;
  bool deterministic_ = false;
  int64_t last_step_ = -1;
  std::chrono::steady_clock::time_point start_;
};

}  // namespace rqunify
