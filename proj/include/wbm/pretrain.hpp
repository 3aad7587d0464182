#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "wbm/model.hpp"
#include "wbm/nn.hpp"
#include "wbm/pipeline.hpp"

namespace wbm::pretrain {

struct LossConfig {
  double temperature = 0.1;
  double koleo_weight = 0.21;
  double token_drop = 0.233;

  void validate() const {
    if (temperature <= 0.0) throw ConfigError("loss.temperature must be positive");
    if (koleo_weight < 0.0) throw ConfigError("loss.koleo_weight must be >= 0");
    if (token_drop < 0.0 || token_drop >= 1.0) throw ConfigError("loss.token_drop must be in [0, 1)");
  }
};

// ---------------------------------------------------------------------------
// losses (tape level; float for training, double for checks)
// ---------------------------------------------------------------------------

// Symmetric InfoNCE over cosine similarity with temperature tau. h1/h2 are
// N x D with row i of each view a positive pair. Zero-norm rows are a
// contract error (cosine undefined).
template <typename S>
ad::Var<S> info_nce(ad::Tape<S>& tape, const ad::Var<S>& h1, const ad::Var<S>& h2, S tau) {
  if (h1.rows() != h2.rows() || h1.cols() != h2.cols()) {
    throw ContractError("info_nce: view shape mismatch");
  }
  if (h1.rows() < 1) throw ContractError("info_nce: empty batch");
  if (tau <= S(0)) throw ContractError("info_nce: temperature must be positive");
  for (const ad::Var<S>* h : {&h1, &h2}) {
    for (Eigen::Index i = 0; i < h->rows(); ++i) {
      if (h->val().row(i).norm() == S(0)) {
        throw ContractError("info_nce: zero-norm embedding at row " + std::to_string(i));
      }
    }
  }
  const Eigen::Index n = h1.rows();
  if (n == 1) {
    // The numerator is the whole denominator: the loss is identically zero
    // (and so is its gradient) for every input.
    return tape.scalar_const(S(0));
  }
  auto normalize = [&](const ad::Var<S>& h) {
    ad::Var<S> norms = ad::sqrt(ad::rowsum(ad::square(h)));  // N x 1
    return h / norms;
  };
  ad::Var<S> n1 = normalize(h1);
  ad::Var<S> n2 = normalize(h2);
  ad::Var<S> sim = ad::scale(ad::matmul(n1, ad::transpose(n2)), S(1) / tau);  // N x N

  Matrix<S> eye = Matrix<S>::Identity(n, n);
  ad::Var<S> eye_c = tape.constant(eye);
  auto half = [&](const ad::Var<S>& s) {
    // mean_i [ logsumexp_j s(i,j) - s(i,i) ]; cosine/tau is bounded so the
    // plain log-sum-exp is safe.
    ad::Var<S> lse = ad::log(ad::rowsum(ad::exp(s)));
    ad::Var<S> diag = ad::rowsum(s * eye_c);
    return ad::mean(lse - diag);
  };
  return ad::scale(half(sim) + half(ad::transpose(sim)), S(0.5));
}

// Kozachenko-Leonenko regularizer, symmetric over the two views:
//   L^v = -(1/N) sum_i log( min_{j != i} ||h^v_i - h^v_j||^2 )
// computed on raw embeddings. Exact duplicates raise NumericError with the
// offending pair; near-duplicates are floored at 1e-12 inside the log.
template <typename S>
ad::Var<S> koleo(ad::Tape<S>&, const ad::Var<S>& h1, const ad::Var<S>& h2) {
  if (h1.rows() != h2.rows() || h1.cols() != h2.cols()) {
    throw ContractError("koleo: view shape mismatch");
  }
  if (h1.rows() < 2) throw ContractError("koleo: needs N >= 2");
  auto view_loss = [&](const ad::Var<S>& h, const char* which) {
    const Eigen::Index n = h.rows();
    for (Eigen::Index i = 0; i < n; ++i) {
      for (Eigen::Index j = i + 1; j < n; ++j) {
        if ((h.val().row(i) - h.val().row(j)).squaredNorm() == S(0)) {
          throw NumericError(std::string("koleo: duplicate embeddings in view ") + which +
                             " at rows " + std::to_string(i) + "," + std::to_string(j));
        }
      }
    }
    ad::Var<S> r = ad::rowsum(ad::square(h));  // N x 1
    ad::Var<S> d2 = r + ad::transpose(r) - ad::scale(ad::matmul(h, ad::transpose(h)), S(2));
    ad::Var<S> mins = ad::offdiag_row_min(d2, S(1e-12));
    return ad::scale(ad::mean(ad::log(mins)), S(-1));
  };
  return ad::scale(view_loss(h1, "1") + view_loss(h2, "2"), S(0.5));
}

template <typename S>
ad::Var<S> total_loss(ad::Tape<S>& tape, const ad::Var<S>& h1, const ad::Var<S>& h2,
                      const LossConfig& cfg) {
  ad::Var<S> nce = info_nce(tape, h1, h2, static_cast<S>(cfg.temperature));
  if (cfg.koleo_weight == 0.0) return nce;
  return nce + ad::scale(koleo(tape, h1, h2), static_cast<S>(cfg.koleo_weight));
}

// ---------------------------------------------------------------------------
// augmentation
// ---------------------------------------------------------------------------

// Independent Bernoulli(p) drop per token; resamples until at least one
// token survives. Returns surviving indices, ascending.
std::vector<int> sample_keep_indices(int len, double p, Rng& rng);

// Value-level token drop preserving order and positions.
template <typename S>
TokenSequence<S> augment_token_drop(const TokenSequence<S>& seq, double p, std::uint64_t seed) {
  if (p < 0.0 || p >= 1.0) throw ConfigError("token drop rate must be in [0, 1)");
  Rng rng = Rng(seed).fork(0xd209ull);
  std::vector<int> keep = sample_keep_indices(static_cast<int>(seq.tokens.rows()), p, rng);
  TokenSequence<S> out;
  out.tokens.resize(static_cast<Eigen::Index>(keep.size()), seq.tokens.cols());
  for (std::size_t k = 0; k < keep.size(); ++k) {
    out.tokens.row(static_cast<Eigen::Index>(k)) = seq.tokens.row(keep[k]);
    out.positions.push_back(seq.positions.at(static_cast<std::size_t>(keep[k])));
    if (!seq.variable_ids.empty()) {
      out.variable_ids.push_back(seq.variable_ids.at(static_cast<std::size_t>(keep[k])));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// pair sampling
// ---------------------------------------------------------------------------

struct WeekRef {
  std::uint64_t subject_id = 0;
  int grid_index = -1;  // index into the dataset's grid vector
};

struct ContrastiveBatch {
  std::vector<std::uint64_t> subject_ids;       // N, unique within the batch
  std::vector<std::pair<int, int>> grid_pairs;  // per subject: two grid indices
};

// N subjects without replacement; two distinct weeks per subject when
// available, the same week twice otherwise.
ContrastiveBatch sample_pairs(const std::map<std::uint64_t, std::vector<int>>& subject_weeks,
                              int n_pairs, std::uint64_t seed);

// ---------------------------------------------------------------------------
// dataset preparation and the training loop (float)
// ---------------------------------------------------------------------------

struct Dataset {
  std::vector<WeekGrid> grids;  // normalized, post-filter, (subject, week) sorted
  std::vector<WeekGrid> raw_grids;  // same order, pre-normalization values
  std::map<std::uint64_t, std::vector<int>> subject_weeks;  // grid indices per subject
  io::SplitAssignment splits;
  pipeline::NormStats stats;

  std::map<std::uint64_t, std::vector<int>> weeks_for(const std::vector<std::uint64_t>& ids) const;
};

// aggregate -> grids -> wear/cohort filters -> subject split -> train-only
// normalization stats -> normalized grids.
Dataset prepare_dataset(const std::vector<MeasurementTuple>& measurements,
                        const pipeline::FilterConfig& filters, double clip_z, std::uint64_t seed);

struct OptimConfig {
  double lr = 1e-3;
  double weight_decay = 0.035;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::int64_t warmup_steps = 1000;
  double start_factor = 0.5;
  double gamma = 0.995;
  bool per_step_decay = false;
};

struct PretrainConfig {
  model::ModelConfig model;
  LossConfig loss;
  OptimConfig optim;
  int batch_pairs = 192;
  int epochs = 6;
  std::uint64_t seed = 0;
};

struct StepLog {
  std::int64_t step = 0;
  std::int64_t epoch = 0;
  double lr = 0.0;
  double infonce = 0.0;
  double koleo = 0.0;
  double total = 0.0;
};

struct PretrainResult {
  nn::ParamTree<float> params;    // encoder + projection head
  nn::ParamTree<float> bn_state;  // projection-head running statistics
  std::vector<StepLog> log;
};

std::string log_to_jsonl(const std::vector<StepLog>& log);

using EpochCallback = std::function<void(int epoch, const PretrainResult& snapshot)>;

// Deterministic under (config, seed). Numeric failures raise NumericError;
// the caller keeps the last epoch snapshot it saw.
PretrainResult pretrain(const Dataset& data, const PretrainConfig& cfg,
                        const EpochCallback& on_epoch = {});

// ---------------------------------------------------------------------------
// masked-autoencoder ablation
// ---------------------------------------------------------------------------

enum class MaskMode { Random, Temporal };

struct MaeConfig {
  model::ModelConfig encoder;  // TST tokenizer + BiMamba2 expected
  int decoder_layers = 2;
  double mask_rate = 0.5;
  MaskMode mode = MaskMode::Random;
  OptimConfig optim;
  int batch_weeks = 32;
  int epochs = 1;
  std::uint64_t seed = 0;
};

// Squared error over masked-and-originally-observed cells only.
template <typename S>
ad::Var<S> masked_recon_loss(ad::Tape<S>& tape, const ad::Var<S>& pred, const Matrix<S>& target,
                             const Matrix<S>& loss_mask) {
  if (pred.rows() != target.rows() || pred.cols() != target.cols()) {
    throw ContractError("masked_recon_loss: shape mismatch");
  }
  S count = loss_mask.sum();
  if (count == S(0)) return tape.scalar_const(S(0));
  ad::Var<S> diff = pred - tape.constant(target);
  ad::Var<S> masked = ad::square(diff) * tape.constant(loss_mask);
  return ad::scale(ad::sum(masked), S(1) / count);
}

// Chooses masked cells for one grid; cells must be observed to be maskable.
MaskMatrix sample_mae_mask(const WeekGrid& grid, double rate, MaskMode mode, Rng& rng);

struct MaeResult {
  nn::ParamTree<float> params;
  std::vector<StepLog> log;  // infonce/koleo fields unused; total = recon loss
};

MaeResult mae_pretrain(const Dataset& data, const MaeConfig& cfg);

}  // namespace wbm::pretrain
