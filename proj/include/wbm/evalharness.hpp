#pragma once

#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "wbm/checkpoint.hpp"
#include "wbm/data.hpp"
#include "wbm/io.hpp"
#include "wbm/pretrain.hpp"

namespace wbm::eval {

// ---------------------------------------------------------------------------
// embeddings
// ---------------------------------------------------------------------------

// Deterministic per-week embeddings: dropout disabled, no augmentation,
// grids normalized with the checkpoint's training statistics. Weeks are
// processed in input order regardless of thread count.
std::vector<io::EmbeddingRecord> extract_embeddings(const checkpoint::Checkpoint& ckpt,
                                                    const std::vector<WeekGrid>& raw_grids,
                                                    int threads = 1);

// Arithmetic mean of a subject's week vectors, keyed by subject id.
std::map<std::uint64_t, std::vector<double>> subject_aggregate(
    const std::vector<io::EmbeddingRecord>& records);

// Per-variable mean/std over observed cells of the raw (pre-normalization)
// grid; missing variables contribute (0, 0). Demographics, when provided,
// append as (age, sex, bmi).
struct Demographics {
  double age = 0.0;
  double sex = 0.0;
  double bmi = 0.0;
};
std::vector<double> baseline_features(const WeekGrid& raw_grid,
                                      const std::optional<Demographics>& demographics);

// Aligned concatenation by (subject, week); throws ContractError listing
// missing keys on mismatch.
std::vector<io::EmbeddingRecord> concat_embeddings(const std::vector<io::EmbeddingRecord>& a,
                                                   const std::vector<io::EmbeddingRecord>& b);

// ---------------------------------------------------------------------------
// ridge probing
// ---------------------------------------------------------------------------

struct ProbeSpec {
  enum class Task { Regression, Binary };
  enum class Level { Week, Subject };
  Task task = Task::Regression;
  Level level = Level::Subject;
  std::vector<double> penalties;  // empty = default 9 values, 1e-4 .. 1e4
  int folds = 5;
  int resamples = 1000;
  std::uint64_t seed = 0;

  static std::vector<double> default_penalties();
  void validate() const;
};

struct RidgeFit {
  VectorD beta;        // p coefficients
  double intercept = 0.0;
  double penalty = 0.0;
  bool used_min_norm = false;  // smallest-norm fallback at penalty 0

  double predict_one(const Eigen::Ref<const VectorD>& x) const { return x.dot(beta) + intercept; }
  VectorD predict(const MatrixD& x) const { return (x * beta).array() + intercept; }
};

// Closed-form ridge with an unpenalized intercept (columns centered before
// the penalized solve). penalty 0 on a singular system falls back to the
// smallest-norm least-squares solution.
RidgeFit ridge_fit(const MatrixD& x, const VectorD& y, double penalty);

// k-fold CV over the penalty grid on the given rows only, then a refit on
// all rows at the winning penalty.
RidgeFit ridge_fit_cv(const MatrixD& x, const VectorD& y, const ProbeSpec& spec);

// ---------------------------------------------------------------------------
// metrics
// ---------------------------------------------------------------------------

double metric_mae(const VectorD& pred, const VectorD& y);
double metric_r2(const VectorD& pred, const VectorD& y);
// Rank statistic with ties counted one half; labels must contain both
// classes or a ContractError is raised.
double metric_auroc(const VectorD& scores, const std::vector<int>& labels);

// ---------------------------------------------------------------------------
// bootstrap
// ---------------------------------------------------------------------------

struct BootstrapInterval {
  double lo = 0.0;
  double hi = 0.0;
  int skipped = 0;  // resamples with an undefined metric (e.g. one class)
};

// Percentile (2.5, 97.5) interval of `metric_on_rows` over resampled row
// index sets. When group_of_row is provided, whole groups are resampled
// (subject-level resampling for subject-level tasks).
BootstrapInterval bootstrap_ci(const std::function<double(const std::vector<int>&)>& metric_on_rows,
                               int n_rows, const std::vector<int>* group_of_row, int resamples,
                               std::uint64_t seed);

// ---------------------------------------------------------------------------
// probe driver
// ---------------------------------------------------------------------------

struct ProbeData {
  MatrixD x;                          // n x p
  VectorD y;                          // target (0/1 for binary tasks)
  std::vector<std::uint64_t> subject; // per-row subject id
};

struct ProbeReport {
  std::string name;
  std::string metric;  // "mae" | "r2" | "auroc"
  double point = 0.0;
  double ci_lo = 0.0;
  double ci_hi = 0.0;
  std::int64_t n = 0;
  double penalty = 0.0;
  int bootstrap_skipped = 0;
};

// Fits on `train`, evaluates on `test`; asserts subject-level disjointness
// on every call (leakage guard). Binary tasks are fit on +/-1 targets and
// scored by the linear value.
ProbeReport run_probe(const ProbeData& train, const ProbeData& test, const ProbeSpec& spec,
                      const std::string& name);

// Group-by plumbing: the same fitted probe evaluated on per-group row
// subsets of the test split (groups with an undefined metric are skipped).
std::vector<std::pair<std::string, ProbeReport>> run_probe_grouped(
    const ProbeData& train, const ProbeData& test, const std::vector<std::string>& group_of_row,
    const ProbeSpec& spec, const std::string& name);

std::string reports_to_csv(const std::vector<ProbeReport>& reports);

// ---------------------------------------------------------------------------
// weekly-mean reconstruction probe
// ---------------------------------------------------------------------------

struct ReconRow {
  int variable_id = 0;
  std::string variable;
  std::int64_t train_weeks = 0;
  std::int64_t test_weeks = 0;
  bool skipped = false;
  double r2 = 0.0;
};

// Per-variable ridge probe predicting the weekly mean of raw observed
// values, restricted to weeks where the variable is observed. Variables
// with fewer than 2*folds observed training weeks are skipped and reported.
std::vector<ReconRow> weekly_mean_reconstruction_probe(
    const std::vector<io::EmbeddingRecord>& embeddings, const std::vector<WeekGrid>& raw_grids,
    const io::SplitAssignment& splits, const ProbeSpec& spec);

std::string recon_to_csv(const std::vector<ReconRow>& rows);

// ---------------------------------------------------------------------------
// ablation grid
// ---------------------------------------------------------------------------

struct AblationConfig {
  std::vector<model::TokenizerKind> tokenizers;
  std::vector<model::BackboneKind> backbones;
  pretrain::PretrainConfig base;  // model dims etc.; tokenizer/backbone overwritten per cell
  ProbeSpec probe;                // validation age probe settings

  // Per-cell hyperparameter search; each cell reports its best combination.
  // With full_grid off, every cell runs once at the base configuration.
  bool full_grid = false;
  std::vector<int> batch_grid = {128, 192};
  std::vector<int> layers_grid = {12, 16};
  std::vector<double> weight_decay_grid = {0.01, 0.001};
  std::vector<double> koleo_grid = {0.1, 0.2};
};

struct AblationCell {
  std::string tokenizer;
  std::string backbone;
  bool failed = false;
  std::string error;
  double val_age_mae = 0.0;
  int batch_pairs = 0;  // chosen hyperparameters (base values when not searched)
  int layers = 0;
  double weight_decay = 0.0;
  double koleo_weight = 0.0;
};

// Pretrains every tokenizer x backbone cell and probes validation-split age
// MAE on subject-aggregated embeddings. Failed cells are recorded and the
// grid continues. Output is ranked by ascending MAE.
std::vector<AblationCell> run_ablation_grid(const pretrain::Dataset& data, const LabelSet& labels,
                                            const AblationConfig& cfg);

std::string ablation_to_csv(const std::vector<AblationCell>& cells);

}  // namespace wbm::eval
