#include "wbm/commands.hpp"

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <set>

#include "wbm/checkpoint.hpp"
#include "wbm/errors.hpp"
#include "wbm/io.hpp"

namespace wbm::cli {

int g_threads = 1;

namespace {

bool verbose() {
  const char* env = std::getenv("WBM_LOG");
  return env != nullptr && std::string(env) != "" && std::string(env) != "quiet";
}

void note(const std::string& message) {
  if (verbose()) std::cerr << "[wbm] " << message << "\n";
}

std::filesystem::path out_path(const RunConfig& cfg, const std::string& name) {
  return std::filesystem::path(cfg.data.out_dir) / name;
}

void echo_config(const RunConfig& cfg, const std::string& command) {
  io::atomic_write(out_path(cfg, command + "_config.json"), resolved_json(cfg));
}

std::vector<MeasurementTuple> load_measurements(const RunConfig& cfg) {
  return io::measurements_from_csv(io::read_file(cfg.data.measurements_path()));
}

LabelSet load_labels(const RunConfig& cfg) {
  return io::labels_from_csv(io::read_file(cfg.data.labels_path()));
}

pretrain::Dataset build_dataset(const RunConfig& cfg) {
  auto measurements = load_measurements(cfg);
  note("loaded " + std::to_string(measurements.size()) + " measurements");
  auto data = pretrain::prepare_dataset(measurements, cfg.filters, cfg.clip_z, cfg.data.seed);
  note("usable weeks " + std::to_string(data.grids.size()) + " over " +
       std::to_string(data.subject_weeks.size()) + " subjects");
  return data;
}

}  // namespace

void cmd_datagen(const RunConfig& cfg) {
  synthgen::GeneratorConfig gen = cfg.generator;
  gen.rng_seed = cfg.data.seed;
  gen.validate();
  auto cohort = synthgen::generate_cohort(gen);
  note("generated " + std::to_string(cohort.measurements.size()) + " measurements for " +
       std::to_string(cohort.latents.size()) + " subjects");
  auto oracle = synthgen::planted_effect_oracle(cohort.latents, cohort.labels, cohort.measurements);

  io::atomic_write(cfg.data.measurements_path(), io::measurements_to_csv(cohort.measurements));
  io::atomic_write(cfg.data.labels_path(), io::labels_to_csv(cohort.labels));
  io::atomic_write(out_path(cfg, "latents.csv"), synthgen::latents_to_csv(cohort.latents));
  io::atomic_write(out_path(cfg, "oracle.csv"), synthgen::oracle_to_csv(oracle));
  echo_config(cfg, "datagen");
}

void cmd_pretrain(const RunConfig& cfg) {
  auto data = build_dataset(cfg);
  pretrain::PretrainConfig pc = cfg.pretrain_config();

  auto write_checkpoint = [&](const std::filesystem::path& path, const pretrain::PretrainResult& r) {
    checkpoint::Checkpoint ckpt;
    ckpt.config = pc.model;
    ckpt.params = r.params;
    ckpt.state = r.bn_state;
    ckpt.stats = data.stats;
    checkpoint::save(path, ckpt);
  };

  std::filesystem::path last_good;
  try {
    auto result = pretrain::pretrain(data, pc, [&](int epoch, const pretrain::PretrainResult& snap) {
      std::filesystem::path p = out_path(cfg, "checkpoint_epoch" + std::to_string(epoch) + ".wbmc");
      write_checkpoint(p, snap);
      last_good = p;
      note("epoch " + std::to_string(epoch) + " done, loss " +
           std::to_string(snap.log.back().total));
    });
    write_checkpoint(cfg.data.checkpoint_path(), result);
    io::atomic_write(out_path(cfg, "train_log.jsonl"), pretrain::log_to_jsonl(result.log));
    io::atomic_write(cfg.data.splits_path(), io::splits_to_csv(data.splits));
    io::atomic_write(out_path(cfg, "grids.wbmg"), io::grids_to_bytes(data.grids));
    echo_config(cfg, "pretrain");
  } catch (const NumericError& e) {
    throw NumericError(std::string(e.what()) +
                       (last_good.empty() ? " (no checkpoint retained)"
                                          : " (last checkpoint: " + last_good.string() + ")"));
  }
}

void cmd_embed(const RunConfig& cfg) {
  checkpoint::Checkpoint ckpt = checkpoint::load(cfg.data.checkpoint_path());
  auto measurements = load_measurements(cfg);
  auto agg = pipeline::aggregate_hourly(measurements);
  auto grids = pipeline::apply_filters(pipeline::build_week_grids(agg.hourly), cfg.filters);
  if (grids.empty()) throw ConfigError("no usable weeks after filters");
  note("embedding " + std::to_string(grids.size()) + " weeks");

  auto records = eval::extract_embeddings(ckpt, grids, g_threads);
  io::atomic_write(cfg.data.embeddings_path(), io::embeddings_to_bytes(records, ckpt.config.dim));

  // The subject split is part of the run's provenance; recompute it the same
  // deterministic way pretrain does when no splits file exists yet.
  if (!std::filesystem::exists(cfg.data.splits_path())) {
    std::set<std::uint64_t> ids;
    for (const auto& g : grids) ids.insert(g.subject_id);
    auto splits = pipeline::split_subjects({ids.begin(), ids.end()}, cfg.data.seed);
    io::atomic_write(cfg.data.splits_path(), io::splits_to_csv(splits));
  }
  echo_config(cfg, "embed");
}

namespace {

struct ProbeInputs {
  std::vector<io::EmbeddingRecord> embeddings;
  LabelSet labels;
  io::SplitAssignment splits;
  std::map<std::pair<std::uint64_t, std::int64_t>, const WeekLabel*> label_of;
  std::map<std::uint64_t, const WeekLabel*> subject_label;  // any week's row
};

ProbeInputs load_probe_inputs(const RunConfig& cfg) {
  ProbeInputs in;
  in.embeddings = io::embeddings_from_bytes(io::read_file(cfg.data.embeddings_path()));
  in.labels = load_labels(cfg);
  in.splits = io::splits_from_csv(io::read_file(cfg.data.splits_path()));
  for (const auto& row : in.labels.rows) {
    in.label_of[{row.subject_id, row.week_index}] = &row;
    in.subject_label.emplace(row.subject_id, &row);
  }
  return in;
}

// Train rows come from the pretraining train split; validation and test are
// combined into the probe test split.
template <typename RowFn>
void split_rows(const io::SplitAssignment& splits, const std::vector<std::uint64_t>& subjects,
                RowFn&& emit) {
  std::set<std::uint64_t> train(splits.train.begin(), splits.train.end());
  std::set<std::uint64_t> test(splits.val.begin(), splits.val.end());
  for (auto id : splits.test) test.insert(id);
  for (std::size_t i = 0; i < subjects.size(); ++i) {
    if (train.count(subjects[i])) {
      emit(i, true);
    } else if (test.count(subjects[i])) {
      emit(i, false);
    }
  }
}

eval::ProbeSpec make_spec(const RunConfig& cfg, eval::ProbeSpec::Task task,
                          eval::ProbeSpec::Level level) {
  eval::ProbeSpec spec;
  spec.task = task;
  spec.level = level;
  spec.penalties = cfg.probe.penalties;
  spec.folds = cfg.probe.folds;
  spec.resamples = cfg.probe.resamples;
  spec.seed = cfg.data.seed;
  return spec;
}

}  // namespace

void cmd_probe(const RunConfig& cfg) {
  ProbeInputs in = load_probe_inputs(cfg);
  std::vector<eval::ProbeReport> reports;

  // Baseline features need the raw (pre-normalization) grids.
  std::map<std::pair<std::uint64_t, std::int64_t>, const WeekGrid*> raw_of;
  std::vector<WeekGrid> raw_grids;
  if (cfg.probe.baseline) {
    auto measurements = load_measurements(cfg);
    auto agg = pipeline::aggregate_hourly(measurements);
    raw_grids = pipeline::apply_filters(pipeline::build_week_grids(agg.hourly), cfg.filters);
    for (const auto& g : raw_grids) raw_of[{g.subject_id, g.week_index}] = &g;
  }

  auto subject_rows = [&](bool baseline, const char* task) {
    // Subject-level design matrix: mean embedding (or mean baseline feature
    // vector) across a subject's weeks.
    std::map<std::uint64_t, std::pair<std::vector<double>, int>> acc;
    for (const auto& rec : in.embeddings) {
      std::vector<double> row;
      if (baseline) {
        auto it = raw_of.find({rec.subject_id, rec.week_index});
        if (it == raw_of.end()) continue;
        row = eval::baseline_features(*it->second, std::nullopt);
      } else {
        row.assign(rec.vector.begin(), rec.vector.end());
      }
      auto& [sum, n] = acc[rec.subject_id];
      if (sum.empty()) sum.assign(row.size(), 0.0);
      for (std::size_t d = 0; d < row.size(); ++d) sum[d] += row[d];
      ++n;
    }
    (void)task;
    std::vector<std::uint64_t> subjects;
    MatrixD x;
    Eigen::Index p = acc.empty() ? 0 : static_cast<Eigen::Index>(acc.begin()->second.first.size());
    x.resize(static_cast<Eigen::Index>(acc.size()), p);
    Eigen::Index r = 0;
    for (auto& [id, pair] : acc) {
      auto& [sum, n] = pair;
      for (Eigen::Index d = 0; d < p; ++d) x(r, d) = sum[static_cast<std::size_t>(d)] / n;
      subjects.push_back(id);
      ++r;
    }
    return std::make_pair(std::move(subjects), std::move(x));
  };

  auto run_subject_task = [&](const char* task, bool baseline) {
    auto [subjects, x] = subject_rows(baseline, task);
    eval::ProbeData train, test;
    split_rows(in.splits, subjects, [&](std::size_t i, bool is_train) {
      auto it = in.subject_label.find(subjects[i]);
      if (it == in.subject_label.end()) return;
      double y = std::string(task) == "age" ? it->second->age : it->second->sex;
      eval::ProbeData& dst = is_train ? train : test;
      dst.x.conservativeResize(dst.x.rows() + 1, x.cols());
      dst.x.row(dst.x.rows() - 1) = x.row(static_cast<Eigen::Index>(i));
      dst.y.conservativeResize(dst.y.size() + 1);
      dst.y(dst.y.size() - 1) = y;
      dst.subject.push_back(subjects[i]);
    });
    auto spec = make_spec(cfg,
                          std::string(task) == "age" ? eval::ProbeSpec::Task::Regression
                                                     : eval::ProbeSpec::Task::Binary,
                          eval::ProbeSpec::Level::Subject);
    std::string name = std::string(task) + (baseline ? "[baseline]" : "");
    reports.push_back(eval::run_probe(train, test, spec, name));
  };

  auto run_event_task = [&](bool baseline) {
    eval::ProbeData train, test;
    std::vector<std::string> test_groups;  // per-row sex tag for group-by runs
    std::vector<std::uint64_t> subjects;
    std::vector<std::vector<double>> rows;
    std::vector<double> ys;
    for (const auto& rec : in.embeddings) {
      auto lab = in.label_of.find({rec.subject_id, rec.week_index});
      if (lab == in.label_of.end()) continue;
      std::vector<double> row;
      if (baseline) {
        auto it = raw_of.find({rec.subject_id, rec.week_index});
        if (it == raw_of.end()) continue;
        eval::Demographics demo;
        demo.age = lab->second->age;
        demo.sex = lab->second->sex;
        // BMI demographic: the subject's mean observed BMI, 0 if never seen.
        double bmi_sum = 0.0;
        int bmi_n = 0;
        for (int t = 0; t < kHoursPerWeek; ++t) {
          if (it->second->mask(t, kBodyMassIndex)) {
            bmi_sum += it->second->values(t, kBodyMassIndex);
            ++bmi_n;
          }
        }
        demo.bmi = bmi_n ? bmi_sum / bmi_n : 0.0;
        row = eval::baseline_features(*it->second, demo);
      } else {
        row.assign(rec.vector.begin(), rec.vector.end());
      }
      subjects.push_back(rec.subject_id);
      rows.push_back(std::move(row));
      ys.push_back(lab->second->event_flag);
    }
    split_rows(in.splits, subjects, [&](std::size_t i, bool is_train) {
      eval::ProbeData& dst = is_train ? train : test;
      dst.x.conservativeResize(dst.x.rows() + 1, static_cast<Eigen::Index>(rows[i].size()));
      for (std::size_t d = 0; d < rows[i].size(); ++d) {
        dst.x(dst.x.rows() - 1, static_cast<Eigen::Index>(d)) = rows[i][d];
      }
      dst.y.conservativeResize(dst.y.size() + 1);
      dst.y(dst.y.size() - 1) = ys[i];
      dst.subject.push_back(subjects[i]);
      if (!is_train) {
        auto it = in.subject_label.find(subjects[i]);
        test_groups.push_back(it != in.subject_label.end() && it->second->sex ? "sex1" : "sex0");
      }
    });
    auto spec = make_spec(cfg, eval::ProbeSpec::Task::Binary, eval::ProbeSpec::Level::Week);
    std::string name = std::string("event") + (baseline ? "[baseline]" : "");
    reports.push_back(eval::run_probe(train, test, spec, name));
    if (cfg.probe.group_by_sex) {
      for (auto& [group, report] : eval::run_probe_grouped(train, test, test_groups, spec, name)) {
        reports.push_back(std::move(report));
      }
    }
  };

  for (const auto& task : cfg.probe.tasks) {
    note("probing " + task);
    if (task == "event") {
      run_event_task(false);
      if (cfg.probe.baseline) run_event_task(true);
    } else {
      run_subject_task(task.c_str(), false);
      if (cfg.probe.baseline) run_subject_task(task.c_str(), true);
    }
  }

  io::atomic_write(out_path(cfg, "probe_report.csv"), eval::reports_to_csv(reports));

  if (cfg.probe.reconstruction) {
    auto measurements = load_measurements(cfg);
    auto agg = pipeline::aggregate_hourly(measurements);
    auto grids = pipeline::apply_filters(pipeline::build_week_grids(agg.hourly), cfg.filters);
    if (grids.size() != in.embeddings.size()) {
      throw ConfigError("reconstruction probe: embeddings and usable weeks disagree");
    }
    auto spec = make_spec(cfg, eval::ProbeSpec::Task::Regression, eval::ProbeSpec::Level::Week);
    auto table = eval::weekly_mean_reconstruction_probe(in.embeddings, grids, in.splits, spec);
    io::atomic_write(out_path(cfg, "reconstruction.csv"), eval::recon_to_csv(table));
  }
  echo_config(cfg, "probe");
}

void cmd_ablate(const RunConfig& cfg) {
  auto data = build_dataset(cfg);
  auto labels = load_labels(cfg);

  eval::AblationConfig ac;
  for (const auto& t : cfg.ablate.tokenizers) ac.tokenizers.push_back(model::tokenizer_from_name(t));
  for (const auto& b : cfg.ablate.backbones) ac.backbones.push_back(model::backbone_from_name(b));
  ac.base = cfg.pretrain_config();
  ac.base.epochs = cfg.ablate.epochs;
  ac.base.batch_pairs = cfg.ablate.batch_pairs;
  ac.full_grid = cfg.ablate.full_grid;
  ac.batch_grid = cfg.ablate.batch_grid;
  ac.layers_grid = cfg.ablate.layers_grid;
  ac.weight_decay_grid = cfg.ablate.weight_decay_grid;
  ac.koleo_grid = cfg.ablate.koleo_grid;
  ac.probe = make_spec(cfg, eval::ProbeSpec::Task::Regression, eval::ProbeSpec::Level::Subject);

  auto cells = eval::run_ablation_grid(data, labels, ac);
  io::atomic_write(out_path(cfg, "ablation.csv"), eval::ablation_to_csv(cells));
  echo_config(cfg, "ablate");
}

int run_command(const std::string& name, const RunConfig& cfg, std::string* error_out) {
  try {
    if (name == "datagen") {
      cmd_datagen(cfg);
    } else if (name == "pretrain") {
      cmd_pretrain(cfg);
    } else if (name == "embed") {
      cmd_embed(cfg);
    } else if (name == "probe") {
      cmd_probe(cfg);
    } else if (name == "ablate") {
      cmd_ablate(cfg);
    } else {
      if (error_out) *error_out = "unknown command '" + name + "'";
      return 2;
    }
    return 0;
  } catch (const ConfigError& e) {
    if (error_out) *error_out = std::string("configuration error: ") + e.what();
    return 2;
  } catch (const IoError& e) {
    if (error_out) *error_out = std::string("input/output error: ") + e.what();
    return 2;
  } catch (const ContractError& e) {
    if (error_out) *error_out = std::string("input contract violated: ") + e.what();
    return 2;
  } catch (const NumericError& e) {
    if (error_out) *error_out = std::string("numeric failure: ") + e.what();
    return 3;
  } catch (const std::exception& e) {
    if (error_out) *error_out = e.what();
    return 1;
  }
}

}  // namespace wbm::cli
