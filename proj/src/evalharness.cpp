#include "wbm/evalharness.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <thread>

#include "wbm/errors.hpp"
#include "wbm/rng.hpp"

namespace wbm::eval {

// ---------------------------------------------------------------------------
// embeddings
// ---------------------------------------------------------------------------

std::vector<io::EmbeddingRecord> extract_embeddings(const checkpoint::Checkpoint& ckpt,
                                                    const std::vector<WeekGrid>& raw_grids,
                                                    int threads) {
  ckpt.config.validate();
  {
    auto expected = model::init_encoder_params<float>(ckpt.config, 0);
    auto head = model::init_projection_params<float>(ckpt.config.dim, 0);
    for (auto& [name, tensor] : head.tensors) expected.add(name, std::move(tensor));
    checkpoint::check_params_match(expected, ckpt.params);
  }

  std::vector<io::EmbeddingRecord> records(raw_grids.size());
  auto worker = [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) {
      WeekGrid norm = pipeline::apply_norm(raw_grids[i], ckpt.stats);
      ad::Tape<float> tape;
      nn::VarMap<float> vars = nn::upload(tape, ckpt.params, false);
      model::EncodeContext<float> ctx;
      model::WeekTokens<float> tokens = model::tokenize(tape, vars, ckpt.config, norm, ctx);
      if (!tokens.seq.valid() || tokens.seq.rows() == 0) {
        throw ContractError("extract_embeddings: week with no observations for subject " +
                            std::to_string(raw_grids[i].subject_id));
      }
      ad::Var<float> out = model::encode_tokens(tape, vars, ckpt.config, tokens, nullptr);
      ad::Var<float> pooled = model::pool_mean(out);
      io::EmbeddingRecord rec;
      rec.subject_id = raw_grids[i].subject_id;
      rec.week_index = static_cast<std::int32_t>(raw_grids[i].week_index);
      rec.vector.resize(static_cast<std::size_t>(ckpt.config.dim));
      for (int d = 0; d < ckpt.config.dim; ++d) {
        float v = pooled.val()(0, d);
        if (!std::isfinite(v)) throw NumericError("non-finite embedding");
        rec.vector[static_cast<std::size_t>(d)] = v;
      }
      records[i] = std::move(rec);
    }
  };

  threads = std::max(1, threads);
  if (threads == 1 || raw_grids.size() < 2) {
    worker(0, raw_grids.size());
  } else {
    // Fixed slot per week keeps output identical for any thread count.
    std::size_t per = (raw_grids.size() + static_cast<std::size_t>(threads) - 1) /
                      static_cast<std::size_t>(threads);
    std::vector<std::thread> pool;
    for (int t = 0; t < threads; ++t) {
      std::size_t begin = static_cast<std::size_t>(t) * per;
      std::size_t end = std::min(raw_grids.size(), begin + per);
      if (begin >= end) break;
      pool.emplace_back(worker, begin, end);
    }
    for (auto& th : pool) th.join();
  }
  return records;
}

std::map<std::uint64_t, std::vector<double>> subject_aggregate(
    const std::vector<io::EmbeddingRecord>& records) {
  std::map<std::uint64_t, std::pair<std::vector<double>, int>> acc;
  for (const auto& rec : records) {
    auto& [sum, n] = acc[rec.subject_id];
    if (sum.empty()) sum.assign(rec.vector.size(), 0.0);
    if (sum.size() != rec.vector.size()) throw ContractError("subject_aggregate: dim mismatch");
    for (std::size_t d = 0; d < sum.size(); ++d) sum[d] += static_cast<double>(rec.vector[d]);
    ++n;
  }
  std::map<std::uint64_t, std::vector<double>> out;
  for (auto& [subject, pair] : acc) {
    auto& [sum, n] = pair;
    for (double& v : sum) v /= static_cast<double>(n);
    out.emplace(subject, std::move(sum));
  }
  return out;
}

std::vector<double> baseline_features(const WeekGrid& raw_grid,
                                      const std::optional<Demographics>& demographics) {
  std::vector<double> out(2 * kNumVariables, 0.0);
  for (int v = 0; v < kNumVariables; ++v) {
    double sum = 0.0;
    int n = 0;
    for (int t = 0; t < kHoursPerWeek; ++t) {
      if (raw_grid.mask(t, v)) {
        sum += raw_grid.values(t, v);
        ++n;
      }
    }
    if (n == 0) continue;  // layout convention: (0, 0) for missing variables
    double mean = sum / n;
    double sq = 0.0;
    for (int t = 0; t < kHoursPerWeek; ++t) {
      if (raw_grid.mask(t, v)) {
        double d = raw_grid.values(t, v) - mean;
        sq += d * d;
      }
    }
    out[static_cast<std::size_t>(v)] = mean;
    out[static_cast<std::size_t>(kNumVariables + v)] = std::sqrt(sq / n);
  }
  if (demographics.has_value()) {
    out.push_back(demographics->age);
    out.push_back(demographics->sex);
    out.push_back(demographics->bmi);
  }
  return out;
}

std::vector<io::EmbeddingRecord> concat_embeddings(const std::vector<io::EmbeddingRecord>& a,
                                                   const std::vector<io::EmbeddingRecord>& b) {
  std::map<std::pair<std::uint64_t, std::int32_t>, const io::EmbeddingRecord*> index;
  for (const auto& rec : b) index[{rec.subject_id, rec.week_index}] = &rec;
  std::string missing;
  std::vector<io::EmbeddingRecord> out;
  out.reserve(a.size());
  for (const auto& rec : a) {
    auto it = index.find({rec.subject_id, rec.week_index});
    if (it == index.end()) {
      missing += " (" + std::to_string(rec.subject_id) + "," + std::to_string(rec.week_index) + ")";
      continue;
    }
    io::EmbeddingRecord joined = rec;
    joined.vector.insert(joined.vector.end(), it->second->vector.begin(), it->second->vector.end());
    out.push_back(std::move(joined));
  }
  if (!missing.empty()) throw ContractError("concat_embeddings: keys missing from b:" + missing);
  if (out.size() != b.size()) {
    throw ContractError("concat_embeddings: b contains keys absent from a");
  }
  return out;
}

// ---------------------------------------------------------------------------
// ridge
// ---------------------------------------------------------------------------

std::vector<double> ProbeSpec::default_penalties() {
  std::vector<double> out;
  for (int k = -4; k <= 4; ++k) out.push_back(std::pow(10.0, k));
  return out;
}

void ProbeSpec::validate() const {
  if (folds < 2) throw ConfigError("probe.folds must be >= 2");
  if (resamples < 100) throw ConfigError("probe.resamples must be >= 100");
  for (double p : penalties) {
    if (p < 0.0) throw ConfigError("probe.penalties must be >= 0");
  }
}

RidgeFit ridge_fit(const MatrixD& x, const VectorD& y, double penalty) {
  if (x.rows() != y.size() || x.rows() < 1) throw ContractError("ridge_fit: shape mismatch");
  const Eigen::Index n = x.rows(), p = x.cols();
  RidgeFit fit;
  fit.penalty = penalty;
  VectorD x_mean = x.colwise().mean();
  double y_mean = y.mean();
  MatrixD xc = x.rowwise() - x_mean.transpose();
  VectorD yc = y.array() - y_mean;

  if (penalty == 0.0) {
    // Smallest-norm least squares handles the singular case.
    Eigen::CompleteOrthogonalDecomposition<MatrixD> cod(xc);
    fit.beta = cod.solve(yc);
    fit.used_min_norm = cod.rank() < std::min(n, p);
  } else {
    MatrixD gram = xc.transpose() * xc;
    gram.diagonal().array() += penalty;
    fit.beta = gram.ldlt().solve(xc.transpose() * yc);
  }
  fit.intercept = y_mean - x_mean.dot(fit.beta);
  return fit;
}

RidgeFit ridge_fit_cv(const MatrixD& x, const VectorD& y, const ProbeSpec& spec) {
  spec.validate();
  std::vector<double> penalties = spec.penalties.empty() ? ProbeSpec::default_penalties() : spec.penalties;
  if (penalties.empty()) throw ConfigError("probe.penalties must be non-empty");
  const Eigen::Index n = x.rows();
  if (n < spec.folds) throw ContractError("ridge_fit_cv: fewer rows than folds");
  if (penalties.size() == 1) return ridge_fit(x, y, penalties[0]);

  // Deterministic fold assignment: shuffled row order, contiguous chunks.
  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  Rng rng = Rng(spec.seed).fork(0xcfull);
  rng.shuffle(order);
  std::vector<int> fold_of(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) {
    fold_of[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])] =
        static_cast<int>(i % spec.folds);
  }

  double best_mse = std::numeric_limits<double>::infinity();
  double best_penalty = penalties.front();
  for (double penalty : penalties) {
    double se = 0.0;
    Eigen::Index counted = 0;
    for (int fold = 0; fold < spec.folds; ++fold) {
      std::vector<int> tr, te;
      for (Eigen::Index i = 0; i < n; ++i) {
        (fold_of[static_cast<std::size_t>(i)] == fold ? te : tr).push_back(static_cast<int>(i));
      }
      if (tr.empty() || te.empty()) continue;
      MatrixD xtr(static_cast<Eigen::Index>(tr.size()), x.cols());
      VectorD ytr(static_cast<Eigen::Index>(tr.size()));
      for (std::size_t k = 0; k < tr.size(); ++k) {
        xtr.row(static_cast<Eigen::Index>(k)) = x.row(tr[k]);
        ytr(static_cast<Eigen::Index>(k)) = y(tr[k]);
      }
      RidgeFit fit = ridge_fit(xtr, ytr, penalty);
      for (int i : te) {
        double err = fit.predict_one(x.row(i).transpose()) - y(i);
        se += err * err;
        ++counted;
      }
    }
    double mse = se / static_cast<double>(counted);
    if (mse < best_mse) {
      best_mse = mse;
      best_penalty = penalty;
    }
  }
  return ridge_fit(x, y, best_penalty);
}

// ---------------------------------------------------------------------------
// metrics
// ---------------------------------------------------------------------------

double metric_mae(const VectorD& pred, const VectorD& y) {
  if (pred.size() != y.size() || pred.size() == 0) throw ContractError("metric_mae: bad shapes");
  return (pred - y).cwiseAbs().mean();
}

double metric_r2(const VectorD& pred, const VectorD& y) {
  if (pred.size() != y.size() || pred.size() == 0) throw ContractError("metric_r2: bad shapes");
  double mean = y.mean();
  double ss_tot = (y.array() - mean).square().sum();
  double ss_res = (y - pred).squaredNorm();
  if (ss_tot == 0.0) return ss_res == 0.0 ? 1.0 : -std::numeric_limits<double>::infinity();
  return 1.0 - ss_res / ss_tot;
}

double metric_auroc(const VectorD& scores, const std::vector<int>& labels) {
  if (static_cast<std::size_t>(scores.size()) != labels.size() || labels.empty()) {
    throw ContractError("metric_auroc: bad shapes");
  }
  std::int64_t n_pos = 0, n_neg = 0;
  for (int l : labels) (l ? n_pos : n_neg) += 1;
  if (n_pos == 0 || n_neg == 0) {
    throw ContractError("metric_auroc: undefined with a single class");
  }
  // Average ranks with ties shared, then the Mann-Whitney statistic.
  std::vector<int> order(labels.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int a, int b) { return scores(a) < scores(b); });
  std::vector<double> rank(labels.size());
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j + 1 < order.size() && scores(order[j + 1]) == scores(order[i])) ++j;
    double avg = 0.5 * (static_cast<double>(i) + static_cast<double>(j)) + 1.0;
    for (std::size_t k = i; k <= j; ++k) rank[static_cast<std::size_t>(order[k])] = avg;
    i = j + 1;
  }
  double rank_sum = 0.0;
  for (std::size_t k = 0; k < labels.size(); ++k) {
    if (labels[k]) rank_sum += rank[k];
  }
  double u = rank_sum - static_cast<double>(n_pos) * (static_cast<double>(n_pos) + 1.0) / 2.0;
  return u / (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

// ---------------------------------------------------------------------------
// bootstrap
// ---------------------------------------------------------------------------

namespace {

double percentile(std::vector<double>& sorted, double q) {
  if (sorted.empty()) throw ContractError("percentile of empty sample");
  double idx = q * static_cast<double>(sorted.size() - 1);
  std::size_t lo = static_cast<std::size_t>(std::floor(idx));
  std::size_t hi = static_cast<std::size_t>(std::ceil(idx));
  double frac = idx - static_cast<double>(lo);
  return sorted[lo] * (1.0 - frac) + sorted[hi] * frac;
}

}  // namespace

BootstrapInterval bootstrap_ci(const std::function<double(const std::vector<int>&)>& metric_on_rows,
                               int n_rows, const std::vector<int>* group_of_row, int resamples,
                               std::uint64_t seed) {
  if (resamples < 100) throw ConfigError("bootstrap resamples must be >= 100");
  if (n_rows < 1) throw ContractError("bootstrap_ci: empty data");
  std::vector<std::vector<int>> rows_of_group;
  if (group_of_row != nullptr) {
    if (static_cast<int>(group_of_row->size()) != n_rows) {
      throw ContractError("bootstrap_ci: group vector size mismatch");
    }
    int n_groups = *std::max_element(group_of_row->begin(), group_of_row->end()) + 1;
    rows_of_group.resize(static_cast<std::size_t>(n_groups));
    for (int i = 0; i < n_rows; ++i) {
      rows_of_group[static_cast<std::size_t>((*group_of_row)[static_cast<std::size_t>(i)])].push_back(i);
    }
  }

  Rng rng = Rng(seed).fork(0xb0075ull);
  std::vector<double> values;
  values.reserve(static_cast<std::size_t>(resamples));
  int skipped = 0;
  std::vector<int> rows;
  for (int r = 0; r < resamples; ++r) {
    rows.clear();
    if (group_of_row == nullptr) {
      for (int i = 0; i < n_rows; ++i) {
        rows.push_back(static_cast<int>(rng.below(static_cast<std::uint64_t>(n_rows))));
      }
    } else {
      std::size_t n_groups = rows_of_group.size();
      for (std::size_t g = 0; g < n_groups; ++g) {
        const auto& members = rows_of_group[rng.below(n_groups)];
        rows.insert(rows.end(), members.begin(), members.end());
      }
    }
    try {
      values.push_back(metric_on_rows(rows));
    } catch (const ContractError&) {
      ++skipped;  // e.g. a single-class AUROC resample
    }
  }
  if (values.empty()) throw NumericError("bootstrap_ci: every resample was degenerate");
  std::sort(values.begin(), values.end());
  BootstrapInterval out;
  out.lo = percentile(values, 0.025);
  out.hi = percentile(values, 0.975);
  out.skipped = skipped;
  return out;
}

// ---------------------------------------------------------------------------
// probe driver
// ---------------------------------------------------------------------------

namespace {

void assert_no_leakage(const ProbeData& train, const ProbeData& test) {
  std::set<std::uint64_t> tr(train.subject.begin(), train.subject.end());
  for (std::uint64_t s : test.subject) {
    if (tr.count(s)) {
      throw ContractError("probe leakage: subject " + std::to_string(s) +
                          " appears in both train and test");
    }
  }
}

}  // namespace

ProbeReport run_probe(const ProbeData& train, const ProbeData& test, const ProbeSpec& spec,
                      const std::string& name) {
  if (train.x.rows() != train.y.size() ||
      train.subject.size() != static_cast<std::size_t>(train.x.rows())) {
    throw ContractError("run_probe: train shape mismatch");
  }
  if (test.x.rows() != test.y.size() ||
      test.subject.size() != static_cast<std::size_t>(test.x.rows())) {
    throw ContractError("run_probe: test shape mismatch");
  }
  assert_no_leakage(train, test);

  VectorD y_fit = train.y;
  if (spec.task == ProbeSpec::Task::Binary) {
    y_fit = train.y.unaryExpr([](double v) { return v > 0.5 ? 1.0 : -1.0; });
  }
  RidgeFit fit = ridge_fit_cv(train.x, y_fit, spec);
  VectorD scores = fit.predict(test.x);

  ProbeReport report;
  report.name = name;
  report.n = test.x.rows();
  report.penalty = fit.penalty;

  if (spec.task == ProbeSpec::Task::Regression) {
    report.metric = "mae";
    report.point = metric_mae(scores, test.y);
  } else {
    report.metric = "auroc";
    std::vector<int> labels(test.subject.size());
    for (Eigen::Index i = 0; i < test.y.size(); ++i) labels[static_cast<std::size_t>(i)] = test.y(i) > 0.5;
    report.point = metric_auroc(scores, labels);
  }

  // The resampling unit matches the prediction unit: rows are subjects for
  // subject-level tasks and weeks for week-level tasks, so plain row
  // resampling realizes both.
  const std::vector<int>* groups = nullptr;
  auto metric_on_rows = [&](const std::vector<int>& rows) {
    VectorD s(static_cast<Eigen::Index>(rows.size()));
    VectorD yy(static_cast<Eigen::Index>(rows.size()));
    for (std::size_t k = 0; k < rows.size(); ++k) {
      s(static_cast<Eigen::Index>(k)) = scores(rows[k]);
      yy(static_cast<Eigen::Index>(k)) = test.y(rows[k]);
    }
    if (spec.task == ProbeSpec::Task::Regression) return metric_mae(s, yy);
    std::vector<int> lab(rows.size());
    for (std::size_t k = 0; k < rows.size(); ++k) lab[k] = yy(static_cast<Eigen::Index>(k)) > 0.5;
    return metric_auroc(s, lab);
  };
  auto ci = bootstrap_ci(metric_on_rows, static_cast<int>(test.x.rows()), groups, spec.resamples,
                         spec.seed);
  report.ci_lo = ci.lo;
  report.ci_hi = ci.hi;
  report.bootstrap_skipped = ci.skipped;
  return report;
}

std::vector<std::pair<std::string, ProbeReport>> run_probe_grouped(
    const ProbeData& train, const ProbeData& test, const std::vector<std::string>& group_of_row,
    const ProbeSpec& spec, const std::string& name) {
  if (group_of_row.size() != static_cast<std::size_t>(test.x.rows())) {
    throw ContractError("run_probe_grouped: group vector size mismatch");
  }
  std::set<std::string> groups(group_of_row.begin(), group_of_row.end());
  std::vector<std::pair<std::string, ProbeReport>> out;
  for (const auto& g : groups) {
    std::vector<int> rows;
    for (std::size_t i = 0; i < group_of_row.size(); ++i) {
      if (group_of_row[i] == g) rows.push_back(static_cast<int>(i));
    }
    ProbeData sub;
    sub.x.resize(static_cast<Eigen::Index>(rows.size()), test.x.cols());
    sub.y.resize(static_cast<Eigen::Index>(rows.size()));
    for (std::size_t k = 0; k < rows.size(); ++k) {
      sub.x.row(static_cast<Eigen::Index>(k)) = test.x.row(rows[k]);
      sub.y(static_cast<Eigen::Index>(k)) = test.y(rows[k]);
      sub.subject.push_back(test.subject[static_cast<std::size_t>(rows[k])]);
    }
    try {
      out.emplace_back(g, run_probe(train, sub, spec, name + "[" + g + "]"));
    } catch (const ContractError&) {
      // group with a single class etc.; skipped
    }
  }
  return out;
}

std::string reports_to_csv(const std::vector<ProbeReport>& reports) {
  std::string out = "task,metric,point,ci_lo,ci_hi,n,penalty,bootstrap_skipped\n";
  for (const auto& r : reports) {
    out += r.name;
    out += ',';
    out += r.metric;
    out += ',';
    out += io::format_double(r.point);
    out += ',';
    out += io::format_double(r.ci_lo);
    out += ',';
    out += io::format_double(r.ci_hi);
    out += ',';
    out += std::to_string(r.n);
    out += ',';
    out += io::format_double(r.penalty);
    out += ',';
    out += std::to_string(r.bootstrap_skipped);
    out += '\n';
  }
  return out;
}

// ---------------------------------------------------------------------------
// weekly-mean reconstruction probe
// ---------------------------------------------------------------------------

std::vector<ReconRow> weekly_mean_reconstruction_probe(
    const std::vector<io::EmbeddingRecord>& embeddings, const std::vector<WeekGrid>& raw_grids,
    const io::SplitAssignment& splits, const ProbeSpec& spec) {
  if (embeddings.size() != raw_grids.size()) {
    throw ContractError("recon probe: embeddings and grids must align");
  }
  std::set<std::uint64_t> train_ids(splits.train.begin(), splits.train.end());
  std::set<std::uint64_t> test_ids(splits.val.begin(), splits.val.end());
  test_ids.insert(splits.test.begin(), splits.test.end());

  std::vector<ReconRow> rows;
  for (int var = 0; var < kNumVariables; ++var) {
    ReconRow row;
    row.variable_id = var;
    row.variable = std::string(variable_spec(var).name);

    std::vector<int> train_rows, test_rows;
    std::vector<double> means(raw_grids.size(), 0.0);
    for (std::size_t i = 0; i < raw_grids.size(); ++i) {
      const WeekGrid& g = raw_grids[i];
      if (g.subject_id != embeddings[i].subject_id ||
          g.week_index != embeddings[i].week_index) {
        throw ContractError("recon probe: row misalignment");
      }
      double sum = 0.0;
      int n = 0;
      for (int t = 0; t < kHoursPerWeek; ++t) {
        if (g.mask(t, var)) {
          sum += g.values(t, var);
          ++n;
        }
      }
      if (n == 0) continue;  // only weeks where the variable is observed
      means[i] = sum / n;
      if (train_ids.count(g.subject_id)) {
        train_rows.push_back(static_cast<int>(i));
      } else if (test_ids.count(g.subject_id)) {
        test_rows.push_back(static_cast<int>(i));
      }
    }
    row.train_weeks = static_cast<std::int64_t>(train_rows.size());
    row.test_weeks = static_cast<std::int64_t>(test_rows.size());
    if (row.train_weeks < 2 * spec.folds || row.test_weeks < 2) {
      row.skipped = true;
      rows.push_back(row);
      continue;
    }
    const int dim = static_cast<int>(embeddings.front().vector.size());
    auto fill = [&](const std::vector<int>& idx, MatrixD& x, VectorD& y) {
      x.resize(static_cast<Eigen::Index>(idx.size()), dim);
      y.resize(static_cast<Eigen::Index>(idx.size()));
      for (std::size_t k = 0; k < idx.size(); ++k) {
        for (int d = 0; d < dim; ++d) {
          x(static_cast<Eigen::Index>(k), d) =
              static_cast<double>(embeddings[static_cast<std::size_t>(idx[k])].vector[static_cast<std::size_t>(d)]);
        }
        y(static_cast<Eigen::Index>(k)) = means[static_cast<std::size_t>(idx[k])];
      }
    };
    MatrixD xtr, xte;
    VectorD ytr, yte;
    fill(train_rows, xtr, ytr);
    fill(test_rows, xte, yte);
    RidgeFit fit = ridge_fit_cv(xtr, ytr, spec);
    row.r2 = metric_r2(fit.predict(xte), yte);
    rows.push_back(row);
  }
  return rows;
}

std::string recon_to_csv(const std::vector<ReconRow>& rows) {
  std::string out = "variable,train_weeks,test_weeks,status,r2\n";
  for (const auto& r : rows) {
    out += r.variable;
    out += ',';
    out += std::to_string(r.train_weeks);
    out += ',';
    out += std::to_string(r.test_weeks);
    out += ',';
    out += r.skipped ? "skipped" : "ok";
    out += ',';
    out += r.skipped ? "na" : io::format_double(r.r2);
    out += '\n';
  }
  return out;
}

// ---------------------------------------------------------------------------
// ablation grid
// ---------------------------------------------------------------------------

namespace {

// One pretraining run followed by a validation-split age probe.
double ablation_cell_mae(const pretrain::Dataset& data,
                         const std::map<std::uint64_t, double>& age_of,
                         const pretrain::PretrainConfig& pc, const ProbeSpec& probe) {
  pretrain::PretrainResult trained = pretrain::pretrain(data, pc);

  checkpoint::Checkpoint ckpt;
  ckpt.config = pc.model;
  ckpt.params = trained.params;
  ckpt.state = trained.bn_state;
  ckpt.stats = data.stats;
  auto records = extract_embeddings(ckpt, data.raw_grids);
  auto per_subject = subject_aggregate(records);

  auto build = [&](const std::vector<std::uint64_t>& ids, ProbeData& out) {
    std::vector<const std::vector<double>*> rows;
    std::vector<std::uint64_t> kept;
    for (std::uint64_t id : ids) {
      auto it = per_subject.find(id);
      auto ag = age_of.find(id);
      if (it == per_subject.end() || ag == age_of.end()) continue;
      rows.push_back(&it->second);
      kept.push_back(id);
    }
    out.x.resize(static_cast<Eigen::Index>(rows.size()), pc.model.dim);
    out.y.resize(static_cast<Eigen::Index>(rows.size()));
    for (std::size_t i = 0; i < rows.size(); ++i) {
      for (int d = 0; d < pc.model.dim; ++d) {
        out.x(static_cast<Eigen::Index>(i), d) = (*rows[i])[static_cast<std::size_t>(d)];
      }
      out.y(static_cast<Eigen::Index>(i)) = age_of.at(kept[i]);
      out.subject.push_back(kept[i]);
    }
  };
  ProbeData train, val;
  build(data.splits.train, train);
  build(data.splits.val, val);
  return run_probe(train, val, probe, "age").point;
}

}  // namespace

std::vector<AblationCell> run_ablation_grid(const pretrain::Dataset& data, const LabelSet& labels,
                                            const AblationConfig& cfg) {
  std::map<std::uint64_t, double> age_of;
  for (const auto& r : labels.rows) age_of[r.subject_id] = r.age;

  struct Combo {
    int batch;
    int layers;
    double wd;
    double koleo;
  };
  std::vector<Combo> combos;
  if (cfg.full_grid) {
    for (int b : cfg.batch_grid) {
      for (int l : cfg.layers_grid) {
        for (double wd : cfg.weight_decay_grid) {
          for (double k : cfg.koleo_grid) combos.push_back({b, l, wd, k});
        }
      }
    }
  } else {
    combos.push_back({cfg.base.batch_pairs, cfg.base.model.layers, cfg.base.optim.weight_decay,
                      cfg.base.loss.koleo_weight});
  }

  std::vector<AblationCell> cells;
  for (auto tok : cfg.tokenizers) {
    for (auto bb : cfg.backbones) {
      AblationCell cell;
      cell.tokenizer = model::tokenizer_name(tok);
      cell.backbone = model::backbone_name(bb);
      cell.failed = true;
      cell.val_age_mae = std::numeric_limits<double>::infinity();
      for (const Combo& combo : combos) {
        try {
          pretrain::PretrainConfig pc = cfg.base;
          pc.model.tokenizer = tok;
          pc.model.backbone = bb;
          pc.batch_pairs = combo.batch;
          pc.model.layers = combo.layers;
          pc.optim.weight_decay = combo.wd;
          pc.loss.koleo_weight = combo.koleo;
          double mae = ablation_cell_mae(data, age_of, pc, cfg.probe);
          if (mae < cell.val_age_mae) {
            cell.val_age_mae = mae;
            cell.batch_pairs = combo.batch;
            cell.layers = combo.layers;
            cell.weight_decay = combo.wd;
            cell.koleo_weight = combo.koleo;
          }
          cell.failed = false;
          cell.error.clear();
        } catch (const std::exception& e) {
          if (cell.failed) cell.error = e.what();  // keep the first failure reason
        }
      }
      if (cell.failed) cell.val_age_mae = 0.0;
      cells.push_back(std::move(cell));
    }
  }
  std::stable_sort(cells.begin(), cells.end(), [](const AblationCell& a, const AblationCell& b) {
    if (a.failed != b.failed) return !a.failed;
    return a.val_age_mae < b.val_age_mae;
  });
  return cells;
}

std::string ablation_to_csv(const std::vector<AblationCell>& cells) {
  std::string out = "rank,tokenizer,backbone,status,val_age_mae,batch_pairs,layers,weight_decay,koleo_weight\n";
  int rank = 1;
  for (const auto& c : cells) {
    out += std::to_string(rank++);
    out += ',';
    out += c.tokenizer;
    out += ',';
    out += c.backbone;
    out += ',';
    out += c.failed ? "failed" : "ok";
    out += ',';
    out += c.failed ? "na" : io::format_double(c.val_age_mae);
    out += ',';
    out += std::to_string(c.batch_pairs);
    out += ',';
    out += std::to_string(c.layers);
    out += ',';
    out += io::format_double(c.weight_decay);
    out += ',';
    out += io::format_double(c.koleo_weight);
    out += '\n';
  }
  return out;
}

}  // namespace wbm::eval
