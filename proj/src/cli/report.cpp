#include "cli/report.hpp"

#include <cmath>
#include <charconv>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "surelock/errors.hpp"

namespace surelock::cli {

using nlohmann::json;

namespace {

json finite_or_null(double x) { return std::isfinite(x) ? json(x) : json(nullptr); }

}  // namespace

std::string format_double(double x) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, res.ptr);
}

json step_json(const StepRecord& r, bool with_logits) {
  json j;
  j["t"] = r.t;
  j["M_t"] = r.active;
  j["C_t"] = r.computed;
  j["F_base"] = r.flops_base;
  j["F_actual"] = r.flops_actual;
  j["F_counted"] = r.flops_counted;
  j["F_head"] = r.flops_head;
  j["F_probe"] = r.flops_probe;
  j["ratio"] = r.ratio;
  j["newly_unmasked"] = r.newly_unmasked;
  j["committed"] = r.committed;
  j["newly_locked"] = r.newly_locked;
  j["unlocked"] = r.unlocked;
  j["mean_D"] = r.mean_divergence ? json(*r.mean_divergence) : json(nullptr);
  if (with_logits && r.logits.rows() > 0) {
    json rows = json::array();
    for (size_t i = 0; i < r.logits.rows(); ++i)
      rows.push_back(std::vector<double>(r.logits.row(i).begin(), r.logits.row(i).end()));
    j["logits"] = std::move(rows);
  }
  return j;
}

json event_json(const LockEvent& e) {
  return {{"position", e.position},
          {"step", e.step},
          {"kind", to_string(e.kind)},
          {"D", finite_or_null(e.divergence)},
          {"u", finite_or_null(e.uncertainty)}};
}

json summary_json(const RunResult& run, const ExperimentConfig& cfg) {
  json j;
  j["config"] = to_json(cfg);
  j["config"].erase("out");  // keeps summaries of identical runs byte-identical
  j["seed"] = cfg.run.seed;
  j["tokens"] = run.tokens;
  j["n"] = run.n;
  j["steps"] = run.trace.size();
  j["total_unmasked"] = run.total_unmasked;
  j["F_base_total"] = run.flops.total_base;
  j["F_actual_total"] = run.flops.total_actual;
  j["flops_ratio"] = run.flops.total_ratio;
  j["r_bar"] = run.flops.active_ratio;
  uint64_t head = 0, probe = 0;
  for (const auto& r : run.trace) {
    head += r.flops_head;
    probe += r.flops_probe;
  }
  j["F_head_total"] = head;
  j["F_probe_total"] = probe;
  size_t locks = 0, unlocks = 0, relocks = 0;
  json events = json::array();
  for (const auto& e : run.events) {
    if (e.kind == LockEventKind::kLock) ++locks;
    if (e.kind == LockEventKind::kUnlock) ++unlocks;
    if (e.kind == LockEventKind::kRelock) ++relocks;
    events.push_back(event_json(e));
  }
  j["locks"] = locks;
  j["unlocks"] = unlocks;
  j["relocks"] = relocks;
  j["events"] = std::move(events);
  return j;
}

json timing_json(const RunResult& run) {
  json steps = json::array();
  for (const auto& r : run.trace) {
    const double tps = r.seconds > 0.0 ? static_cast<double>(r.newly_unmasked.size()) / r.seconds : 0.0;
    steps.push_back({{"t", r.t}, {"seconds", r.seconds}, {"step_tps", tps}});
  }
  const double e2e = run.seconds > 0.0 ? static_cast<double>(run.total_unmasked) / run.seconds : 0.0;
  return {{"seconds", run.seconds}, {"e2e_tps", e2e}, {"steps", std::move(steps)}};
}

json bound_json(const BoundReport& r, size_t position) {
  return {{"position", position},
          {"status", to_string(r.status)},
          {"t_star", r.lock_step},
          {"D_t_star", finite_or_null(r.lock_divergence)},
          {"rho", finite_or_null(r.rho)},
          {"L", finite_or_null(r.l)},
          {"L_sm", r.l_sm},
          {"C_tail", finite_or_null(r.c_tail)},
          {"lhs", finite_or_null(r.lhs)},
          {"rhs", finite_or_null(r.rhs)},
          {"holds", r.holds},
          {"note", r.note}};
}

json constants_json(const Constants& c) {
  json layers = json::array();
  for (const auto& l : c.layers)
    layers.push_back({{"A_att", l.head_attention},
                      {"W_O_norm", l.w_o_norm},
                      {"A_mha", l.a_mha},
                      {"A_ff", l.a_ff},
                      {"L_ln", l.l_ln}});
  return {{"R_x", c.radius},
          {"kappa", c.kappa},
          {"n", c.seq_len},
          {"E_norm", c.embedding_norm},
          {"L_emb", c.l_emb},
          {"layers", std::move(layers)},
          {"A_mha", c.a_mha},
          {"A_ff", c.a_ff},
          {"L_ln", c.l_ln},
          {"L_blk", c.l_blk},
          {"head_norm", c.head_norm},
          {"L_net", c.l_net},
          {"L_all", c.l_all},
          {"L", c.l},
          {"lipschitz_samples", c.lipschitz_samples},
          {"spectral_converged", c.all_converged}};
}

std::string plot_csv(const StepTrace& trace) {
  std::ostringstream out;
  out << "t,ratio,M_t,mean_D\n";
  for (const auto& r : trace) {
    out << r.t << ',' << format_double(r.ratio) << ',' << r.active << ',';
    if (r.mean_divergence) out << format_double(*r.mean_divergence);
    out << '\n';
  }
  return out.str();
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write '" + path + "'");
  out << text;
  if (!out) throw IoError("write to '" + path + "' failed");
}

void write_run_outputs(const RunResult& run, const ExperimentConfig& cfg, const std::string& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create output directory '" + dir + "': " + ec.message());
  const std::filesystem::path base(dir);

  std::string trace;
  for (const auto& r : run.trace) trace += step_json(r, cfg.emit_logits).dump() + '\n';
  write_text((base / "trace.jsonl").string(), trace);
  write_text((base / "plot.csv").string(), plot_csv(run.trace));
  write_text((base / "summary.json").string(), summary_json(run, cfg).dump(2) + '\n');
  std::string tokens;
  for (size_t i = 0; i < run.tokens.size(); ++i) tokens += (i ? " " : "") + std::to_string(run.tokens[i]);
  write_text((base / "tokens.txt").string(), tokens + '\n');
  write_text((base / "timing.json").string(), timing_json(run).dump(2) + '\n');
}

StepTrace read_trace_logits(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open trace '" + path + "'");
  StepTrace trace;
  std::string line;
  size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw InvalidConfig(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
    if (!j.contains("logits"))
      throw InvalidConfig(path + ": trace has no logits (rerun with --emit-logits)");
    const auto rows = j["logits"].get<std::vector<std::vector<double>>>();
    StepRecord r;
    r.t = j.value("t", static_cast<int>(lineno));
    r.logits = Matrix(rows.size(), rows.empty() ? 0 : rows[0].size());
    for (size_t i = 0; i < rows.size(); ++i) {
      if (rows[i].size() != r.logits.cols()) throw InvalidConfig(path + ": ragged logits");
      std::copy(rows[i].begin(), rows[i].end(), r.logits.row(i).begin());
    }
    trace.push_back(std::move(r));
  }
  if (trace.empty()) throw InvalidConfig(path + ": empty trace");
  return trace;
}

}  // namespace surelock::cli
