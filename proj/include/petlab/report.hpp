#pragma once

// Output files. Everything except timing.json is a pure function of the
// results, so identical runs give byte-identical files:
//   runs.jsonl        one record per fit, sorted by key
//   summary.csv       per-experiment aggregate table
//   thresholds.json   sweep thresholds and curves
//   transfer.csv      relative transfer matrix
//   curves/           plot-ready CSVs (budget curves, training curves)
//   timing.json       wall-clock seconds per run (not reproducible)

#include <filesystem>
#include <string>
#include <vector>

#include "petlab/gradsuite.hpp"
#include "petlab/harness.hpp"

namespace petlab {

// Shortest round-trip decimal form.
std::string format_number(double v);

void write_runs_jsonl(const std::filesystem::path& path, const std::vector<RunRecord>& runs);
std::vector<RunRecord> read_runs_jsonl(const std::filesystem::path& path);

void emit_train_report(const std::filesystem::path& dir, const TrainResult& result);
void emit_sweep_report(const std::filesystem::path& dir, const SweepResult& result);
void emit_ablation_report(const std::filesystem::path& dir, const AblationResult& result);
void emit_transfer_report(const std::filesystem::path& dir, const TransferResult& result);
void emit_gradcheck_report(const std::filesystem::path& dir, const std::vector<GradCase>& cases, double tolerance);

}  // namespace petlab
