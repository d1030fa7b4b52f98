#include "petlab/report.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

#include "petlab/errors.hpp"

namespace petlab {

namespace fs = std::filesystem;

std::string format_number(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

namespace {

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create '" + dir.string() + "': " + ec.message());
}

void write_text(const fs::path& path, const std::string& text) {
  ensure_dir(path.parent_path().empty() ? fs::path(".") : path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out << text;
  if (!out) throw IoError("failed writing '" + path.string() + "'");
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

std::string join_ops(const std::vector<std::string>& ops) {
  std::string out;
  for (const auto& o : ops) out += (out.empty() ? "" : "+") + o;
  return out;
}

std::string opt_num(const std::optional<std::size_t>& v) { return v ? std::to_string(*v) : ""; }

std::string safe_name(const std::string& s) {
  std::string out;
  for (char c : s) out += std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_' ? c : '_';
  return out;
}

void write_timing(const fs::path& dir, const std::vector<RunRecord>& runs) {
  Json j = Json::object();
  for (const auto& r : runs) j[r.key] = r.report.wall_time;
  write_text(dir / "timing.json", j.dump(2) + "\n");
}

// Long format: run key, series, step, value.
void write_training_curves(const fs::path& dir, const std::vector<RunRecord>& runs) {
  std::ostringstream os;
  os << "key,series,step,value\n";
  for (const auto& r : runs) {
    for (const auto& p : r.report.loss_curve) os << csv_field(r.key) << ",train_loss," << p.step << "," << format_number(p.value) << "\n";
    for (const auto& p : r.report.eval_curve) {
      os << csv_field(r.key) << ",val_loss," << p.step << "," << format_number(p.loss) << "\n";
      os << csv_field(r.key) << ",val_accuracy," << p.step << "," << format_number(p.accuracy) << "\n";
    }
  }
  write_text(dir / "curves" / "training.csv", os.str());
}

void write_common(const fs::path& dir, const std::vector<RunRecord>& runs) {
  ensure_dir(dir);
  write_runs_jsonl(dir / "runs.jsonl", runs);
  write_training_curves(dir, runs);
  write_timing(dir, runs);
}

}  // namespace

void write_runs_jsonl(const fs::path& path, const std::vector<RunRecord>& runs) {
  std::string text;
  for (const auto& r : runs) text += run_record_to_json(r).dump() + "\n";
  write_text(path, text);
}

std::vector<RunRecord> read_runs_jsonl(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  std::vector<RunRecord> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    try {
      out.push_back(run_record_from_json(Json::parse(line)));
    } catch (const nlohmann::json::parse_error& e) {
      throw ConfigError("bad JSONL line in '" + path.string() + "': " + e.what());
    }
  }
  return out;
}

void emit_train_report(const fs::path& dir, const TrainResult& result) {
  if (result.runs.empty()) throw UsageError("no runs to report");
  write_common(dir, result.runs);
  std::ostringstream os;
  os << "key,method,structure,insertion_ops,budget,trainable_count,seed,final_metric,final_loss,steps_run,steps_to_convergence\n";
  for (const auto& r : result.runs) {
    os << csv_field(r.key) << "," << csv_field(r.method) << "," << r.structure << "," << join_ops(r.insertion_ops) << ","
       << opt_num(r.budget) << "," << r.trainable_count << "," << r.run_seed << "," << format_number(r.report.final_metric) << ","
       << format_number(r.report.final_loss) << "," << r.report.steps_run << ","
       << opt_num(r.report.steps_to_convergence) << "\n";
  }
  write_text(dir / "summary.csv", os.str());
}

void emit_sweep_report(const fs::path& dir, const SweepResult& result) {
  if (result.runs.empty()) throw UsageError("no runs to report");
  write_common(dir, result.runs);
  std::ostringstream os;
  os << "method,budget,budget_ratio,n,mean,std,feasible\n";
  Json thresholds;
  thresholds["random_baseline"] = result.random_baseline;
  thresholds["ft_performance"] = result.ft_performance;
  Json methods = Json::array();
  for (const auto& t : result.thresholds) {
    std::ostringstream curve;
    curve << "budget,budget_ratio,mean,std,n\n";
    for (const auto& row : t.curve) {
      os << csv_field(t.method) << "," << row.budget << "," << format_number(row.ratio) << "," << row.n << ","
         << format_number(row.mean) << "," << format_number(row.std) << "," << (row.feasible ? 1 : 0) << "\n";
      if (row.feasible) {
        curve << row.budget << "," << format_number(row.ratio) << "," << format_number(row.mean) << ","
              << format_number(row.std) << "," << row.n << "\n";
      }
    }
    write_text(dir / "curves" / ("budget_" + safe_name(t.method) + ".csv"), curve.str());
    methods.push_back(threshold_report_to_json(t));
  }
  thresholds["methods"] = methods;
  write_text(dir / "summary.csv", os.str());
  write_text(dir / "thresholds.json", thresholds.dump(2) + "\n");
}

void emit_ablation_report(const fs::path& dir, const AblationResult& result) {
  if (result.runs.empty()) throw UsageError("no runs to report");
  write_common(dir, result.runs);
  std::ostringstream os;
  os << "method,structure,budget,n,mean,std,converged,steps_mean,steps_std\n";
  for (const auto& r : result.rows) {
    os << csv_field(r.method) << "," << r.structure << "," << r.budget << "," << r.n << "," << format_number(r.mean)
       << "," << format_number(r.std) << "," << r.converged << "," << format_number(r.steps_mean) << ","
       << format_number(r.steps_std) << "\n";
  }
  write_text(dir / "summary.csv", os.str());
}

void emit_transfer_report(const fs::path& dir, const TransferResult& result) {
  if (result.runs.empty()) throw UsageError("no runs to report");
  write_common(dir, result.runs);
  const auto& m = result.matrix;
  std::ostringstream tr;
  tr << "source";
  for (const auto& t : m.targets) tr << "," << csv_field(t);
  tr << "\n";
  for (std::size_t s = 0; s < m.sources.size(); ++s) {
    tr << csv_field(m.sources[s]);
    for (double v : m.relative[s]) tr << "," << format_number(v);
    tr << "\n";
  }
  write_text(dir / "transfer.csv", tr.str());
  std::ostringstream os;
  os << "source,source_family,target,target_family,relative\n";
  for (std::size_t s = 0; s < m.sources.size(); ++s) {
    for (std::size_t t = 0; t < m.targets.size(); ++t) {
      os << csv_field(m.sources[s]) << "," << m.source_families[s] << "," << csv_field(m.targets[t]) << ","
         << m.target_families[t] << "," << format_number(m.relative[s][t]) << "\n";
    }
  }
  write_text(dir / "summary.csv", os.str());
  Json j;
  j["same_family_mean"] = m.same_family_mean;
  j["cross_family_mean"] = m.cross_family_mean;
  j["original"] = m.original;
  j["sources"] = m.sources;
  write_text(dir / "transfer.json", j.dump(2) + "\n");
}

void emit_gradcheck_report(const fs::path& dir, const std::vector<GradCase>& cases, double tolerance) {
  ensure_dir(dir);
  std::ostringstream os;
  os << "case,group,max_rel_err,passed\n";
  Json arr = Json::array();
  for (const auto& c : cases) {
    os << csv_field(c.name) << "," << c.group << "," << format_number(c.report.max_rel_err) << ","
       << (c.report.passed ? 1 : 0) << "\n";
    Json tensors = Json::array();
    for (const auto& t : c.report.tensors) {
      tensors.push_back({{"name", t.name}, {"coords", t.coords_checked}, {"max_rel_err", t.max_rel_err},
                         {"max_abs_err", t.max_abs_err}, {"passed", t.passed}});
    }
    arr.push_back({{"case", c.name}, {"group", c.group}, {"max_rel_err", c.report.max_rel_err},
                   {"passed", c.report.passed}, {"tensors", tensors}});
  }
  write_text(dir / "summary.csv", os.str());
  Json j;
  j["tolerance"] = tolerance;
  j["cases"] = arr;
  write_text(dir / "gradcheck.json", j.dump(2) + "\n");
}

}  // namespace petlab
