#include "wbm/pretrain.hpp"

#include <json.hpp>

#include <algorithm>

#include "wbm/io.hpp"

namespace wbm::pretrain {

std::vector<int> sample_keep_indices(int len, double p, Rng& rng) {
  if (len <= 0) throw ContractError("sample_keep_indices: empty sequence");
  if (p < 0.0 || p >= 1.0) throw ConfigError("token drop rate must be in [0, 1)");
  std::vector<int> keep;
  for (;;) {
    keep.clear();
    for (int i = 0; i < len; ++i) {
      if (!rng.bernoulli(p)) keep.push_back(i);
    }
    if (!keep.empty()) return keep;  // resample if everything was dropped
  }
}

ContrastiveBatch sample_pairs(const std::map<std::uint64_t, std::vector<int>>& subject_weeks,
                              int n_pairs, std::uint64_t seed) {
  if (n_pairs < 1) throw ConfigError("train.batch_pairs must be >= 1");
  if (static_cast<std::size_t>(n_pairs) > subject_weeks.size()) {
    throw ConfigError("train.batch_pairs exceeds the number of usable subjects");
  }
  std::vector<std::uint64_t> ids;
  ids.reserve(subject_weeks.size());
  for (const auto& [id, weeks] : subject_weeks) {
    if (weeks.empty()) throw ContractError("sample_pairs: subject with zero weeks");
    ids.push_back(id);
  }
  Rng rng = Rng(seed).fork(0x9a125ull);
  rng.shuffle(ids);

  ContrastiveBatch batch;
  for (int i = 0; i < n_pairs; ++i) {
    std::uint64_t id = ids[static_cast<std::size_t>(i)];
    const auto& weeks = subject_weeks.at(id);
    int a, b;
    if (weeks.size() == 1) {
      a = b = weeks[0];
    } else {
      a = weeks[rng.below(weeks.size())];
      do {
        b = weeks[rng.below(weeks.size())];
      } while (b == a);
    }
    batch.subject_ids.push_back(id);
    batch.grid_pairs.emplace_back(a, b);
  }
  return batch;
}

std::map<std::uint64_t, std::vector<int>> Dataset::weeks_for(
    const std::vector<std::uint64_t>& ids) const {
  std::map<std::uint64_t, std::vector<int>> out;
  for (std::uint64_t id : ids) {
    auto it = subject_weeks.find(id);
    if (it != subject_weeks.end()) out.emplace(id, it->second);
  }
  return out;
}

Dataset prepare_dataset(const std::vector<MeasurementTuple>& measurements,
                        const pipeline::FilterConfig& filters, double clip_z, std::uint64_t seed) {
  Dataset data;
  auto agg = pipeline::aggregate_hourly(measurements);
  auto grids = pipeline::build_week_grids(agg.hourly);
  data.raw_grids = pipeline::apply_filters(std::move(grids), filters);
  if (data.raw_grids.empty()) throw ConfigError("no usable weeks after wear/cohort filters");

  for (std::size_t i = 0; i < data.raw_grids.size(); ++i) {
    data.subject_weeks[data.raw_grids[i].subject_id].push_back(static_cast<int>(i));
  }
  std::vector<std::uint64_t> ids;
  for (const auto& [id, weeks] : data.subject_weeks) ids.push_back(id);
  data.splits = pipeline::split_subjects(ids, seed);

  std::vector<WeekGrid> train_grids;
  for (std::uint64_t id : data.splits.train) {
    for (int gi : data.subject_weeks.at(id)) train_grids.push_back(data.raw_grids[static_cast<std::size_t>(gi)]);
  }
  data.stats = pipeline::fit_norm_stats(train_grids, clip_z);

  data.grids.reserve(data.raw_grids.size());
  for (const auto& g : data.raw_grids) data.grids.push_back(pipeline::apply_norm(g, data.stats));
  return data;
}

std::string log_to_jsonl(const std::vector<StepLog>& log) {
  std::string out;
  for (const auto& rec : log) {
    nlohmann::json j;
    j["step"] = rec.step;
    j["epoch"] = rec.epoch;
    j["lr"] = rec.lr;
    j["infonce"] = rec.infonce;
    j["koleo"] = rec.koleo;
    j["total"] = rec.total;
    out += j.dump();
    out += '\n';
  }
  return out;
}

namespace {

// Encodes one augmented week to its pooled embedding on the shared tape.
ad::Var<float> encode_augmented(ad::Tape<float>& tape, const nn::VarMap<float>& vars,
                                const model::ModelConfig& mcfg, const WeekGrid& grid,
                                double drop_rate, Rng drop_rng, Rng* dropout_rng,
                                model::EncodeContext<float>& ctx) {
  model::WeekTokens<float> tokens = model::tokenize(tape, vars, mcfg, grid, ctx);
  if (!tokens.seq.valid() || tokens.seq.rows() == 0) {
    throw ContractError("encode_augmented: week produced an empty token sequence");
  }
  if (drop_rate > 0.0) {
    std::vector<int> keep =
        sample_keep_indices(static_cast<int>(tokens.seq.rows()), drop_rate, drop_rng);
    if (static_cast<Eigen::Index>(keep.size()) < tokens.seq.rows()) {
      tokens = model::drop_tokens(tokens, keep);
    }
  }
  ad::Var<float> outputs = model::encode_tokens(tape, vars, mcfg, tokens, dropout_rng);
  return model::pool_mean(outputs);
}

}  // namespace

PretrainResult pretrain(const Dataset& data, const PretrainConfig& cfg,
                        const EpochCallback& on_epoch) {
  cfg.model.validate();
  cfg.loss.validate();
  if (cfg.epochs < 1) throw ConfigError("train.epochs must be >= 1");

  auto train_weeks = data.weeks_for(data.splits.train);
  if (train_weeks.empty()) throw ConfigError("pretrain: empty training split");
  if (static_cast<std::size_t>(cfg.batch_pairs) > train_weeks.size()) {
    throw ConfigError("train.batch_pairs exceeds the number of training subjects");
  }

  PretrainResult result;
  result.params = model::init_encoder_params<float>(cfg.model, cfg.seed);
  {
    auto head = model::init_projection_params<float>(cfg.model.dim, cfg.seed);
    for (auto& [name, tensor] : head.tensors) result.params.add(name, std::move(tensor));
  }
  result.bn_state.add("head.bn.running_mean", MatrixF::Zero(1, 4 * cfg.model.dim));
  result.bn_state.add("head.bn.running_var", MatrixF::Ones(1, 4 * cfg.model.dim));

  nn::AdamW<float> opt;
  opt.beta1 = static_cast<float>(cfg.optim.beta1);
  opt.beta2 = static_cast<float>(cfg.optim.beta2);
  opt.eps = static_cast<float>(cfg.optim.eps);
  opt.weight_decay = static_cast<float>(cfg.optim.weight_decay);
  opt.init(result.params);

  const int steps_per_epoch =
      std::max(1, static_cast<int>(train_weeks.size()) / cfg.batch_pairs);
  nn::LrSchedule sched;
  sched.base_lr = cfg.optim.lr;
  sched.warmup_steps = cfg.optim.warmup_steps;
  sched.start_factor = cfg.optim.start_factor;
  sched.gamma = cfg.optim.gamma;
  sched.per_step_decay = cfg.optim.per_step_decay;
  sched.steps_per_epoch = steps_per_epoch;
  sched.validate();

  std::int64_t step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (int batch_i = 0; batch_i < steps_per_epoch; ++batch_i) {
      std::uint64_t batch_seed = Rng(cfg.seed)
                                     .fork(0xba7c4ull, static_cast<std::uint64_t>(epoch),
                                           static_cast<std::uint64_t>(batch_i))
                                     .next_u64();
      ContrastiveBatch batch = sample_pairs(train_weeks, cfg.batch_pairs, batch_seed);

      ad::Tape<float> tape;
      nn::VarMap<float> vars = nn::upload(tape, result.params, true);
      model::EncodeContext<float> ctx;
      Rng step_rng = Rng(cfg.seed).fork(0xd0ull, static_cast<std::uint64_t>(step));

      std::vector<ad::Var<float>> r1, r2;
      r1.reserve(batch.grid_pairs.size());
      r2.reserve(batch.grid_pairs.size());
      for (std::size_t i = 0; i < batch.grid_pairs.size(); ++i) {
        auto [ga, gb] = batch.grid_pairs[i];
        Rng drop_a = step_rng.fork(i, 0);
        Rng drop_b = step_rng.fork(i, 1);
        Rng dropout_a = step_rng.fork(i, 2);
        Rng dropout_b = step_rng.fork(i, 3);
        r1.push_back(encode_augmented(tape, vars, cfg.model,
                                      data.grids[static_cast<std::size_t>(ga)], cfg.loss.token_drop,
                                      drop_a, &dropout_a, ctx));
        r2.push_back(encode_augmented(tape, vars, cfg.model,
                                      data.grids[static_cast<std::size_t>(gb)], cfg.loss.token_drop,
                                      drop_b, &dropout_b, ctx));
      }
      ad::Var<float> R = ad::vstack<float>({ad::vstack(r1), ad::vstack(r2)});  // 2N x D
      Rng head_rng = step_rng.fork(0xbedull);
      ad::Var<float> H = model::projection_head(tape, vars, R, &head_rng, &result.bn_state);
      const Eigen::Index n = static_cast<Eigen::Index>(batch.grid_pairs.size());
      ad::Var<float> h1 = ad::rows(H, 0, n);
      ad::Var<float> h2 = ad::rows(H, n, n);

      ad::Var<float> nce = info_nce(tape, h1, h2, static_cast<float>(cfg.loss.temperature));
      ad::Var<float> reg;
      ad::Var<float> loss;
      double koleo_value = 0.0;
      if (cfg.loss.koleo_weight > 0.0 && n >= 2) {
        reg = koleo(tape, h1, h2);
        koleo_value = static_cast<double>(ad::scalar_value(reg));
        loss = nce + ad::scale(reg, static_cast<float>(cfg.loss.koleo_weight));
      } else {
        loss = nce;
      }
      float loss_value = ad::scalar_value(loss);
      if (!std::isfinite(loss_value)) throw NumericError("pretrain: non-finite loss");
      tape.backward(loss);
      nn::ParamTree<float> grads = nn::collect_grads(tape, vars);
      for (const auto& [name, g] : grads.tensors) {
        if (!g.allFinite()) throw NumericError("pretrain: non-finite gradient for '" + name + "'");
      }

      double lr = nn::lr_at(sched, step, epoch);
      opt.update(result.params, grads, static_cast<float>(lr));

      StepLog rec;
      rec.step = step;
      rec.epoch = epoch;
      rec.lr = lr;
      rec.infonce = static_cast<double>(ad::scalar_value(nce));
      rec.koleo = koleo_value;
      rec.total = static_cast<double>(loss_value);
      result.log.push_back(rec);
      ++step;
    }
    if (on_epoch) on_epoch(epoch, result);
  }
  return result;
}

MaskMatrix sample_mae_mask(const WeekGrid& grid, double rate, MaskMode mode, Rng& rng) {
  if (rate < 0.0 || rate > 1.0) throw ConfigError("mae mask rate must be in [0, 1]");
  MaskMatrix mask = MaskMatrix::Zero(kHoursPerWeek, kNumVariables);
  if (rate == 0.0) return mask;
  if (mode == MaskMode::Random) {
    for (int t = 0; t < kHoursPerWeek; ++t) {
      for (int v = 0; v < kNumVariables; ++v) {
        if (grid.mask(t, v) && rng.bernoulli(rate)) mask(t, v) = 1;
      }
    }
  } else {
    // Contiguous hour blocks until the requested fraction of hours is covered.
    const int block = 6;
    std::vector<bool> masked_hour(kHoursPerWeek, false);
    int need = static_cast<int>(std::ceil(rate * kHoursPerWeek));
    int covered = 0;
    while (covered < need) {
      int start = static_cast<int>(rng.below(kHoursPerWeek));
      for (int h = start; h < std::min(start + block, static_cast<int>(kHoursPerWeek)); ++h) {
        if (!masked_hour[static_cast<std::size_t>(h)]) {
          masked_hour[static_cast<std::size_t>(h)] = true;
          ++covered;
        }
      }
    }
    for (int t = 0; t < kHoursPerWeek; ++t) {
      if (!masked_hour[static_cast<std::size_t>(t)]) continue;
      for (int v = 0; v < kNumVariables; ++v) {
        if (grid.mask(t, v)) mask(t, v) = 1;
      }
    }
  }
  return mask;
}

MaeResult mae_pretrain(const Dataset& data, const MaeConfig& cfg) {
  cfg.encoder.validate();
  if (cfg.encoder.tokenizer != model::TokenizerKind::Tst) {
    throw ConfigError("mae_pretrain expects the dense (tst) tokenizer");
  }
  if (cfg.decoder_layers < 2 || cfg.decoder_layers % 2 != 0) {
    throw ConfigError("mae decoder_layers must be a positive even count");
  }
  auto train_weeks = data.weeks_for(data.splits.train);
  std::vector<int> train_grid_ids;
  for (const auto& [id, weeks] : train_weeks) {
    train_grid_ids.insert(train_grid_ids.end(), weeks.begin(), weeks.end());
  }
  if (train_grid_ids.empty()) throw ConfigError("mae_pretrain: empty training split");

  model::ModelConfig dec_cfg = cfg.encoder;
  dec_cfg.layers = cfg.decoder_layers;

  MaeResult result;
  result.params = model::init_encoder_params<float>(cfg.encoder, cfg.seed);
  {
    // Decoder stack + reconstruction head reuse the Mamba block machinery
    // under the "dec." prefix.
    auto dec = model::init_encoder_params<float>(dec_cfg, Rng(cfg.seed).fork(0xdecull).next_u64());
    for (auto& [name, tensor] : dec.tensors) {
      if (name.rfind("tok.", 0) == 0) continue;  // decoder consumes encoder outputs directly
      result.params.add("dec." + name, std::move(tensor));
    }
    result.params.add("dec.head.w", nn::glorot_init<float>(cfg.encoder.dim, kNumVariables,
                                                           nn::init_stream(cfg.seed, "dec.head.w")));
    result.params.add("dec.head.b", MatrixF::Zero(1, kNumVariables));
  }

  nn::AdamW<float> opt;
  opt.beta1 = static_cast<float>(cfg.optim.beta1);
  opt.beta2 = static_cast<float>(cfg.optim.beta2);
  opt.eps = static_cast<float>(cfg.optim.eps);
  opt.weight_decay = static_cast<float>(cfg.optim.weight_decay);
  opt.init(result.params);

  const int batches = std::max(1, static_cast<int>(train_grid_ids.size()) / cfg.batch_weeks);
  nn::LrSchedule sched;
  sched.base_lr = cfg.optim.lr;
  sched.warmup_steps = cfg.optim.warmup_steps;
  sched.start_factor = cfg.optim.start_factor;
  sched.gamma = cfg.optim.gamma;
  sched.per_step_decay = cfg.optim.per_step_decay;
  sched.steps_per_epoch = batches;
  sched.validate();

  std::int64_t step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng order_rng = Rng(cfg.seed).fork(0x0edeull, static_cast<std::uint64_t>(epoch));
    std::vector<int> order = train_grid_ids;
    order_rng.shuffle(order);
    for (int b = 0; b < batches; ++b) {
      ad::Tape<float> tape;
      nn::VarMap<float> vars = nn::upload(tape, result.params, true);
      Rng step_rng = Rng(cfg.seed).fork(0x3aeull, static_cast<std::uint64_t>(step));

      std::vector<ad::Var<float>> losses;
      for (int k = 0; k < cfg.batch_weeks; ++k) {
        std::size_t pos = static_cast<std::size_t>(b) * static_cast<std::size_t>(cfg.batch_weeks) +
                          static_cast<std::size_t>(k);
        if (pos >= order.size()) break;
        const WeekGrid& grid = data.grids[static_cast<std::size_t>(order[pos])];
        Rng mask_rng = step_rng.fork(static_cast<std::uint64_t>(k));
        MaskMatrix loss_mask = sample_mae_mask(grid, cfg.mask_rate, cfg.mode, mask_rng);

        // The model sees masked cells as missing: value zeroed, indicator 0.
        WeekGrid visible = grid;
        for (int t = 0; t < kHoursPerWeek; ++t) {
          for (int v = 0; v < kNumVariables; ++v) {
            if (loss_mask(t, v)) {
              visible.values(t, v) = 0.0;
              visible.mask(t, v) = 0;
            }
          }
        }
        model::EncodeContext<float> ctx;
        model::WeekTokens<float> tokens = model::tokenize(tape, vars, cfg.encoder, visible, ctx);
        ad::Var<float> enc = model::encode_tokens(tape, vars, cfg.encoder, tokens, nullptr);

        // Decoder: bidirectional Mamba over encoder outputs, then a linear
        // reconstruction head.
        const int dhalf = cfg.decoder_layers / 2;
        ad::Var<float> fwd = model::mamba_stack(tape, vars, dec_cfg, "dec.enc.f", dhalf, enc, nullptr);
        ad::Var<float> bwd = model::mamba_stack(tape, vars, dec_cfg, "dec.enc.b", dhalf,
                                                ad::reverse_rows(enc), nullptr);
        ad::Var<float> cat = ad::hstack<float>({fwd, ad::reverse_rows(bwd)});
        ad::Var<float> hcomb = ad::silu(ad::matmul(cat, vars.at("dec.enc.comb1.w")) + vars.at("dec.enc.comb1.b"));
        ad::Var<float> dec_out = ad::matmul(hcomb, vars.at("dec.enc.comb2.w")) + vars.at("dec.enc.comb2.b");
        ad::Var<float> pred = ad::matmul(dec_out, vars.at("dec.head.w")) + vars.at("dec.head.b");

        losses.push_back(masked_recon_loss(tape, pred, grid.values.cast<float>().eval(),
                                           loss_mask.cast<float>().eval()));
      }
      ad::Var<float> loss = losses.front();
      for (std::size_t i = 1; i < losses.size(); ++i) loss = loss + losses[i];
      loss = ad::scale(loss, 1.0f / static_cast<float>(losses.size()));

      float loss_value = ad::scalar_value(loss);
      if (!std::isfinite(loss_value)) throw NumericError("mae_pretrain: non-finite loss");
      tape.backward(loss);
      nn::ParamTree<float> grads = nn::collect_grads(tape, vars);
      double lr = nn::lr_at(sched, step, epoch);
      opt.update(result.params, grads, static_cast<float>(lr));

      StepLog rec;
      rec.step = step;
      rec.epoch = epoch;
      rec.lr = lr;
      rec.total = static_cast<double>(loss_value);
      result.log.push_back(rec);
      ++step;
    }
  }
  return result;
}

}  // namespace wbm::pretrain
