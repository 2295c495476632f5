#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "fedcp/runtime.hpp"

namespace fedcp {

// File-level description of where the sample pool comes from.
struct DatasetConfig {
  enum class Source { synthetic, idx };
  Source source = Source::synthetic;
  // idx
  std::string images_path;
  std::string labels_path;
  // synthetic
  std::size_t classes = 0;
  std::size_t dim = 0;
  std::size_t per_class = 0;
  double spread = 0.0;
};

struct PartitionConfig {
  PartitionPlan::Scheme scheme = PartitionPlan::Scheme::dirichlet;
  std::size_t num_clients = 0;
  double beta = 0.0;                   // dirichlet
  std::size_t classes_per_client = 0;  // pathological
  std::size_t min_samples = 10;
};

struct TrainingConfig {
  int rounds = 0;
  JoinRatio rho;
  double lr = 0.0;
  double lambda = 5.0;
  int epochs = 1;
  int batch_size = 10;
};

// Parsed and validated form of one experiment file.
struct ExperimentConfig {
  Algorithm algorithm = Algorithm::fedcp;
  std::uint64_t master_seed = 0;
  std::string output_dir;  // may stay empty when the caller never writes
  DatasetConfig dataset;
  PartitionConfig partition;
  NetSpec model;  // input_dim / num_classes 0 here means "take the dataset's"
  TrainingConfig training;
};

// Strict parse: unknown keys are rejected with their full path, and every
// validation error names the offending key.
ExperimentConfig parse_config_text(const std::string& text,
                                   const std::string& source_name);
ExperimentConfig parse_config_file(const std::string& path);

// Everything needed to construct a Federation, derived deterministically
// from the config's master seed.
struct PreparedExperiment {
  std::shared_ptr<const Dataset> data;
  PartitionPlan plan;
  std::vector<ClientSplit> splits;
  RunSettings run;
};

PreparedExperiment prepare_experiment(const ExperimentConfig& cfg);

struct RunOptions {
  int workers = 0;  // <= 0: machine parallelism
  bool force = false;
  bool write_outputs = true;
  std::string output_override;  // non-empty: wins over cfg.output_dir
};

struct RunOutcome {
  double best_accuracy = 0.0;
  int rounds_run = 0;
  std::vector<RoundReport> reports;
  std::string output_dir;  // resolved; empty when nothing was written
};

// Full pipeline: prepare, run every round, and (unless disabled) write
// rounds.csv, clients.jsonl, partition.txt and summary.json into the
// output directory.
RunOutcome run_experiment(const ExperimentConfig& cfg, const RunOptions& opt);

struct SweepPoint {
  std::string label;
  bool ok = false;
  double best_accuracy = 0.0;
  std::string error;
};

struct SweepOutcome {
  bool ok = false;  // true iff every point succeeded
  std::vector<SweepPoint> points;
  std::string output_dir;
};

// Runs one experiment per axis value (axis: "algorithm", "lambda" or
// "beta"), each in its own subdirectory with the same master seed, and
// writes a combined sweep.csv. A failing point is recorded and the sweep
// carries on.
SweepOutcome run_sweep(const ExperimentConfig& base, const std::string& axis,
                       const std::vector<std::string>& values,
                       const RunOptions& opt);

// Serializations, exposed so tests can pin the exact bytes.
std::string round_csv(const std::vector<RoundReport>& reports);
std::string clients_jsonl(const std::vector<RoundReport>& reports);
std::string summary_json(const ExperimentConfig& cfg, const RunOutcome& out);
std::string config_echo_json(const ExperimentConfig& cfg);

// Temp-file-then-rename write; readers never observe a truncated file.
void write_atomic(const std::string& path, const std::string& content);

// Creates the directory (with parents) if absent; refuses a non-empty
// existing directory unless force is set.
void ensure_output_dir(const std::string& dir, bool force);

}  // namespace fedcp
