#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "cli/config.hpp"
#include "surelock/analysis.hpp"
#include "surelock/sampler.hpp"

namespace surelock::cli {

nlohmann::json step_json(const StepRecord& r, bool with_logits);
nlohmann::json event_json(const LockEvent& e);
nlohmann::json summary_json(const RunResult& run, const ExperimentConfig& cfg);
nlohmann::json timing_json(const RunResult& run);
nlohmann::json bound_json(const BoundReport& r, size_t position);
nlohmann::json constants_json(const Constants& c);

// Plot table: t,ratio,M_t,mean_D (mean_D empty when undefined).
std::string plot_csv(const StepTrace& trace);
std::string format_double(double x);

// trace.jsonl, plot.csv, summary.json, tokens.txt and timing.json under `dir`.
void write_run_outputs(const RunResult& run, const ExperimentConfig& cfg, const std::string& dir);

// Trace lines with a "logits" member turned back into step records.
StepTrace read_trace_logits(const std::string& path);

void write_text(const std::string& path, const std::string& text);

}  // namespace surelock::cli
