#include "cimp/engine.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <random>
#include <set>

#include "cimp/error.hpp"
#include "cimp/seed.hpp"

namespace cimp {
namespace {

constexpr int kEvalChunk = 100;

struct SynthRow {
  double bn;
  double tv_l2;
  double total_reg;
  double lr;
  double beta2;
  double margin;
};

// Supplementary table, phases 2-4.
constexpr SynthRow kSuppT2[] = {
    {0.2, 0.001, 0.01, 0.25, 0.09, 0.7},
    {1.0, 0.01, 0.1, 0.05, 0.9, 0.3},
    {5.0, 0.01, 0.001, 0.005, 0.009, 0.3},
};

void append_jsonl(const RunOutput& out, const nlohmann::json& line) {
  if (out.dir.empty()) return;
  std::filesystem::create_directories(out.dir);
  std::ofstream f(out.dir / "metrics.jsonl", std::ios::app);
  require(static_cast<bool>(f), ErrorKind::Io, "cannot append to " + (out.dir / "metrics.jsonl").string());
  f << line.dump() << '\n';
}

std::vector<std::span<double>> trainable(ModelState& m) {
  std::vector<std::span<double>> out;
  for_each_tensor(m, [&](const std::string&, auto, std::span<double> v, bool t) {
    if (t) out.push_back(v);
  });
  return out;
}

std::vector<bool> decay_mask(const ModelState& m) {
  std::vector<bool> out;
  for_each_tensor(m, [&](const std::string& name, auto, std::span<const double>, bool t) {
    if (t) out.push_back(name.ends_with(".weight"));
  });
  return out;
}

void sgd_step(ModelState& model, ModelState& grads, ModelState& velocity, const OptimizerConfig& o) {
  auto p = trainable(model);
  auto g = trainable(grads);
  auto v = trainable(velocity);
  const auto decay = decay_mask(model);
  for (std::size_t t = 0; t < p.size(); ++t) {
    const double wd = decay[t] ? o.weight_decay : 0.0;
    for (std::size_t i = 0; i < p[t].size(); ++i) {
      v[t][i] = o.momentum * v[t][i] + g[t][i] + wd * p[t][i];
      p[t][i] -= o.lr * v[t][i];
    }
  }
}

Matrix features_chunked(const ModelState& model, const Tensor& images) {
  Matrix out(images.n(), model.feature_dim());
  for (int start = 0; start < images.n(); start += kEvalChunk) {
    const int end = std::min(images.n(), start + kEvalChunk);
    std::vector<int> idx(static_cast<std::size_t>(end - start));
    for (int i = start; i < end; ++i) idx[static_cast<std::size_t>(i - start)] = i;
    out.middleRows(start, end - start) = forward_features(model, gather(images, idx));
  }
  return out;
}

std::vector<int> predict(const ModelState& model, const Tensor& images) {
  if (images.n() == 0) return {};
  return pseudo_label_features(model, features_chunked(model, images)).labels;
}

double accuracy(const std::vector<int>& pred, const std::vector<int>& truth) {
  if (truth.empty()) return 0.0;
  std::size_t hit = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) hit += pred[i] == truth[i];
  return static_cast<double>(hit) / static_cast<double>(truth.size());
}

void record_means(ExperimentState& state, const DataView& data, std::span<const int> classes) {
  for (int c : classes) {
    const std::vector<int> one{c};
    const auto rows = data.train_rows(one);
    require(!rows.empty(), ErrorKind::Dataset, "class " + std::to_string(c) + " has no training rows");
    state.means.put(c, record_class_means(gather_images(*data.manifest, rows, data.norm)));
  }
}

// Loss switches after strategy and ablations are applied.
struct Plan {
  bool replay = false;
  TrainLossConfig loss;
  bool real_all_seen = false;
};

Plan make_plan(const EngineConfig& cfg, const PhaseConfig& phase) {
  Plan p;
  p.loss = phase.loss;
  switch (cfg.strategy) {
    case Strategy::Full:
      p.replay = cfg.replay;
      if (cfg.ablation.no_contrastive) p.loss.alpha_contras = 0.0;
      if (cfg.ablation.no_margin) p.loss.alpha_margin = 0.0;
      break;
    case Strategy::Finetune:
      p.loss.alpha_dist = p.loss.alpha_margin = p.loss.alpha_contras = 0.0;
      break;
    case Strategy::DistillOnly:
      p.loss.alpha_margin = p.loss.alpha_contras = 0.0;
      break;
    case Strategy::Oracle:
      p.loss.alpha_dist = p.loss.alpha_margin = p.loss.alpha_contras = 0.0;
      p.real_all_seen = true;
      break;
  }
  if (!p.replay) {
    // Margin anchors and source centroids only exist with replay.
    p.loss.alpha_margin = 0.0;
    p.loss.alpha_contras = 0.0;
  }
  return p;
}

struct TrainInputs {
  Tensor pool;
  std::vector<int> pool_labels;
  std::vector<bool> pool_synth;
  TrainingStream stream;
  std::vector<int> real_rows;
};

// Pool index is the stream item's position in a canonical ordering: real
// rows first, then synthesized images class by class.
TrainInputs build_inputs(const DataView& data, std::span<const int> real_rows, const ClassImpressionSet* imp,
                         std::span<const int> old_classes, int quota, int batch_size) {
  TrainInputs in;
  in.real_rows.assign(real_rows.begin(), real_rows.end());
  in.stream = assemble_training_stream(data, real_rows, imp, old_classes, quota, batch_size);
  std::vector<Tensor> parts;
  parts.push_back(gather_images(*data.manifest, real_rows, data.norm));
  for (int r : real_rows) {
    in.pool_labels.push_back(data.manifest->rows[static_cast<std::size_t>(r)].class_id);
    in.pool_synth.push_back(false);
  }
  std::map<int, int> synth_offset;
  if (imp != nullptr) {
    for (int c : old_classes) {
      const auto& ci = imp->get(c);
      synth_offset[c] = static_cast<int>(in.pool_labels.size());
      std::vector<int> idx(static_cast<std::size_t>(quota));
      for (int i = 0; i < quota; ++i) idx[static_cast<std::size_t>(i)] = i;
      parts.push_back(gather(ci.images, idx));
      for (int i = 0; i < quota; ++i) {
        in.pool_labels.push_back(c);
        in.pool_synth.push_back(true);
      }
    }
  }
  std::vector<const Tensor*> ptrs;
  for (const auto& t : parts) ptrs.push_back(&t);
  in.pool = concat(ptrs);

  // Re-point stream items at pool positions.
  std::map<int, int> real_pos;
  for (std::size_t i = 0; i < real_rows.size(); ++i) real_pos[real_rows[i]] = static_cast<int>(i);
  for (auto& item : in.stream.items) {
    item.index = item.synthesized ? synth_offset.at(item.label) + item.index : real_pos.at(item.index);
  }
  return in;
}

template <typename T>
Matrix select_rows(const Matrix& m, const std::vector<T>& rows) {
  Matrix out(static_cast<Eigen::Index>(rows.size()), m.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = m.row(rows[i]);
  return out;
}

void scatter_add(Matrix& dst, const Matrix& src, const std::vector<int>& rows) {
  for (std::size_t i = 0; i < rows.size(); ++i) dst.row(rows[i]) += src.row(static_cast<Eigen::Index>(i));
}

LossTerm scattered(LossTerm t, const std::vector<int>& rows, Eigen::Index batch, Eigen::Index dim) {
  Matrix full = Matrix::Zero(batch, dim);
  if (t.dfeatures.size() > 0) scatter_add(full, t.dfeatures, rows);
  t.dfeatures = std::move(full);
  return t;
}

struct TrainArgs {
  int task = 0;
  const DataView* data = nullptr;
  const EngineConfig* cfg = nullptr;
  const PhaseConfig* phase = nullptr;
  Plan plan;
  const ModelState* frozen = nullptr;
  std::vector<int> old_classes;
  std::vector<int> new_classes;
};

// SGD over the stream; appends per-epoch means to `metrics`.
void train(ExperimentState& state, const TrainInputs& in, const TrainArgs& a, TaskMetrics& metrics,
           const RunOutput& out) {
  const auto& loss_cfg = a.plan.loss;
  const bool use_dist = loss_cfg.alpha_dist > 0.0 && a.frozen != nullptr;
  const bool use_margin = loss_cfg.alpha_margin > 0.0 && !a.new_classes.empty();
  const bool use_contras = loss_cfg.alpha_contras > 0.0;

  Matrix old_feats;
  if (use_dist) old_feats = features_chunked(*a.frozen, in.pool);

  Tensor target_pool;
  std::vector<int> target_rows;
  if (use_contras && a.cfg->transductive_target) {
    std::vector<int> seen = a.old_classes;
    seen.insert(seen.end(), a.new_classes.begin(), a.new_classes.end());
    target_rows = a.data->test_rows(seen);
    target_pool = gather_images(*a.data->manifest, target_rows, a.data->norm);
  }

  state.bank = CentroidBank(state.model.feature_dim(), a.phase->centroid_momentum);
  ModelState velocity = ModelState::zeros_like(state.model);
  const int D = state.model.feature_dim();
  int step = 0;

  for (int epoch = 0; epoch < a.phase->optim.epochs; ++epoch) {
    const auto batches = in.stream.epoch(state.seeds.draw("epoch", static_cast<std::uint64_t>(a.task) * 100000 + epoch));
    StepLosses sum{a.task, epoch, 0};
    int contras_steps = 0;
    for (const auto& batch : batches) {
      std::vector<int> pos, labels, synth_rows, real_rows;
      for (std::size_t i = 0; i < batch.size(); ++i) {
        pos.push_back(batch[i].index);
        labels.push_back(batch[i].label);
        (batch[i].synthesized ? synth_rows : real_rows).push_back(static_cast<int>(i));
      }
      const Tensor x = gather(in.pool, pos);
      const ForwardTape tape = forward(state.model, x, Mode::Train);
      const Matrix& F = tape.features;
      const Eigen::Index B = F.rows();

      LossParts parts;
      parts.cnce = cnce_loss(F, labels, state.model);

      if (use_dist) {
        std::vector<int> rows;
        for (int i = 0; i < B; ++i) {
          const bool synth = in.pool_synth[static_cast<std::size_t>(pos[static_cast<std::size_t>(i)])];
          if (a.cfg->distill_targets == DistillTargets::Both || (synth == (a.cfg->distill_targets == DistillTargets::Synthesized)))
            rows.push_back(i);
        }
        if (!rows.empty()) {
          std::vector<int> prow;
          for (int r : rows) prow.push_back(pos[static_cast<std::size_t>(r)]);
          const Matrix fs = select_rows(F, rows);
          const Matrix fo = select_rows(old_feats, prow);
          LossTerm t = loss_cfg.logit_distillation
                           ? logit_distillation_loss(fs, fo, state.model, *a.frozen, loss_cfg.distill_temperature)
                           : distillation_loss(fs, fo);
          parts.dist = scattered(std::move(t), rows, B, D);
        }
      }

      if (use_margin && !synth_rows.empty()) {
        std::vector<int> sl;
        for (int r : synth_rows) sl.push_back(labels[static_cast<std::size_t>(r)]);
        parts.margin = scattered(margin_loss(select_rows(F, synth_rows), sl, state.model, a.new_classes, loss_cfg.margin),
                                 synth_rows, B, D);
      }

      bool contras_skipped = true;
      if (use_contras) {
        std::vector<CentroidUpdate> updates;
        if (!synth_rows.empty()) {
          std::vector<int> sl;
          for (int r : synth_rows) sl.push_back(labels[static_cast<std::size_t>(r)]);
          CentroidUpdate u = state.bank.update(select_rows(F, synth_rows), sl, Domain::Source);
          for (auto& c : u.contributions)
            for (int& r : c.rows) r = synth_rows[static_cast<std::size_t>(r)];
          updates.push_back(std::move(u));
        }
        if (a.cfg->transductive_target) {
          // Test-split targets enter as constants: no gradient reaches them.
          std::mt19937_64 rng(state.seeds.draw("target", static_cast<std::uint64_t>(step)));
          std::vector<int> pick(std::min<std::size_t>(target_rows.size(), batch.size()));
          std::uniform_int_distribution<int> u(0, static_cast<int>(target_rows.size()) - 1);
          for (int& p : pick) p = u(rng);
          const Matrix tf = forward_features(state.model, gather(target_pool, pick));
          state.bank.update(tf, pseudo_label_features(state.model, tf).labels, Domain::Target);
        } else if (!real_rows.empty()) {
          const Matrix rf = select_rows(F, real_rows);
          CentroidUpdate u = state.bank.update(rf, pseudo_label_features(state.model, rf).labels, Domain::Target);
          for (auto& c : u.contributions)
            for (int& r : c.rows) r = real_rows[static_cast<std::size_t>(r)];
          updates.push_back(std::move(u));
        }
        const ContrastiveResult cr = contrastive_loss(state.bank, a.old_classes, loss_cfg.tau);
        contras_skipped = cr.skipped;
        parts.contras.value = cr.value;
        if (!cr.skipped) parts.contras.dfeatures = chain_centroid_grads(cr, updates, static_cast<int>(B), D);
      }

      const LossTerm total = total_loss(parts, loss_cfg);
      require(std::isfinite(total.value), ErrorKind::Numeric,
              "non-finite training loss at task " + std::to_string(a.task) + ", epoch " + std::to_string(epoch) +
                  ", step " + std::to_string(step) + " (cnce " + std::to_string(parts.cnce.value) + ", dist " +
                  std::to_string(parts.dist.value) + ", margin " + std::to_string(parts.margin.value) +
                  ", contras " + std::to_string(parts.contras.value) + ")");
      BackwardResult back = backward(state.model, tape, total.dfeatures, nullptr, true, false);
      ModelState& grads = *back.params;
      grads.class_embeddings = total.dembeddings;
      update_running_stats(state.model, tape);
      sgd_step(state.model, grads, velocity, a.phase->optim);

      StepLosses s{a.task, epoch, step, parts.cnce.value, parts.dist.value, parts.margin.value,
                   parts.contras.value, total.value, contras_skipped};
      if (out.write_step_metrics) {
        append_jsonl(out, {{"type", "step"}, {"task", s.task}, {"epoch", s.epoch}, {"step", s.step},
                           {"cnce", s.cnce}, {"dist", s.dist}, {"margin", s.margin}, {"contras", s.contras},
                           {"total", s.total}});
      }
      sum.cnce += s.cnce;
      sum.dist += s.dist;
      sum.margin += s.margin;
      sum.contras += s.contras;
      sum.total += s.total;
      contras_steps += contras_skipped ? 0 : 1;
      ++step;
    }
    const double nb = static_cast<double>(batches.size());
    sum.cnce /= nb;
    sum.dist /= nb;
    sum.margin /= nb;
    sum.contras /= nb;
    sum.total /= nb;
    sum.step = step;
    sum.contras_skipped = contras_steps == 0;
    metrics.epoch_losses.push_back(sum);
    append_jsonl(out, {{"type", "epoch"}, {"task", sum.task}, {"epoch", sum.epoch}, {"cnce", sum.cnce},
                       {"dist", sum.dist}, {"margin", sum.margin}, {"contras", sum.contras},
                       {"total", sum.total}, {"contras_active_steps", contras_steps}});
  }

  std::vector<int> truth;
  for (int r : in.real_rows) truth.push_back(a.data->manifest->rows[static_cast<std::size_t>(r)].class_id);
  metrics.train_accuracy = accuracy(predict(state.model, gather_images(*a.data->manifest, in.real_rows, a.data->norm)), truth);
}

void write_task_artifacts(const ExperimentState& state, int task, const RunOutput& out) {
  if (out.dir.empty()) return;
  const auto dir = out.dir / ("task_" + std::to_string(task));
  save_checkpoint(state.model, dir / "checkpoint.cimp");
  state.means.save(dir / "means.cimp");
  nlohmann::json metrics = nlohmann::json::array();
  for (const auto& m : state.metrics) metrics.push_back(to_json(m));
  std::ofstream f(dir / "metrics.json", std::ios::trunc);
  require(static_cast<bool>(f), ErrorKind::Io, "cannot write " + (dir / "metrics.json").string());
  f << nlohmann::json({{"completed_tasks", task}, {"seed", state.seeds.master}, {"tasks", metrics}}).dump(2) << '\n';
}

std::string cache_key_initial(const DataView& data, const TaskSchedule& schedule, const EngineConfig& cfg) {
  nlohmann::json j = {{"corpus", corpus_hash(*data.manifest)},
                      {"train", data.split.train},
                      {"arch", cfg.arch.to_json()},
                      {"eta", cfg.eta},
                      {"phase", cfg.phase(0).to_json()},
                      {"classes", schedule.tasks.front().new_class_ids},
                      {"seed", cfg.seed}};
  return j.dump();
}

}  // namespace

std::string_view to_string(Strategy s) noexcept {
  switch (s) {
    case Strategy::Full: return "full";
    case Strategy::Finetune: return "finetune";
    case Strategy::DistillOnly: return "distill-only";
    case Strategy::Oracle: return "oracle";
  }
  return "full";
}

Strategy parse_strategy(std::string_view text) {
  for (Strategy s : {Strategy::Full, Strategy::Finetune, Strategy::DistillOnly, Strategy::Oracle}) {
    if (text == to_string(s)) return s;
  }
  fail(ErrorKind::Config, "unknown strategy '" + std::string(text) + "' (full, finetune, distill-only, oracle)");
}

std::string Ablation::to_string() const {
  std::string out;
  auto add = [&](bool on, const char* name) {
    if (!on) return;
    if (!out.empty()) out += ",";
    out += name;
  };
  add(no_contrastive, "no-contrastive");
  add(no_margin, "no-margin");
  add(noise_init, "noise-init");
  return out;
}

Ablation Ablation::parse(std::string_view text) {
  Ablation a;
  std::size_t start = 0;
  while (start <= text.size()) {
    const std::size_t end = std::min(text.find(',', start), text.size());
    const std::string_view tok = text.substr(start, end - start);
    if (tok == "no-contrastive") {
      a.no_contrastive = true;
    } else if (tok == "no-margin") {
      a.no_margin = true;
    } else if (tok == "noise-init") {
      a.noise_init = true;
    } else if (!tok.empty()) {
      fail(ErrorKind::Config, "unknown ablation '" + std::string(tok) + "' (no-contrastive, no-margin, noise-init)");
    }
    start = end + 1;
  }
  return a;
}

void OptimizerConfig::validate() const {
  require(lr > 0.0, ErrorKind::Config, "optimizer lr must be positive");
  require(momentum >= 0.0 && momentum < 1.0, ErrorKind::Config, "optimizer momentum must lie in [0, 1)");
  require(weight_decay >= 0.0, ErrorKind::Config, "weight decay must be non-negative");
  require(epochs >= 1, ErrorKind::Config, "epochs must be at least 1");
  require(batch_size >= 2, ErrorKind::Config, "training batch size must be at least 2");
}

std::string_view to_string(DistillTargets t) noexcept {
  switch (t) {
    case DistillTargets::Both: return "both";
    case DistillTargets::New: return "new";
    case DistillTargets::Synthesized: return "synthesized";
  }
  return "both";
}

DistillTargets parse_distill_targets(std::string_view text) {
  for (DistillTargets t : {DistillTargets::Both, DistillTargets::New, DistillTargets::Synthesized}) {
    if (text == to_string(t)) return t;
  }
  fail(ErrorKind::Config, "unknown distillation target '" + std::string(text) + "' (both, new, synthesized)");
}

void PhaseConfig::validate(bool initial) const {
  loss.validate();
  optim.validate();
  require(centroid_momentum >= 0.0 && centroid_momentum <= 1.0, ErrorKind::Config,
          "centroid momentum must lie in [0, 1]");
  if (synthesis) synthesis->validate();
  require(!(initial && synthesis), ErrorKind::Config, "phase 1 cannot have a synthesis config");
}

nlohmann::json PhaseConfig::to_json() const {
  nlohmann::json j = {
      {"train",
       {{"eta", loss.eta},
        {"margin", loss.margin},
        {"tau", loss.tau},
        {"alpha_dist", loss.alpha_dist},
        {"alpha_margin", loss.alpha_margin},
        {"alpha_contras", loss.alpha_contras},
        {"distill_temperature", loss.distill_temperature},
        {"logit_distillation", loss.logit_distillation}}},
      {"optimizer",
       {{"lr", optim.lr},
        {"momentum", optim.momentum},
        {"weight_decay", optim.weight_decay},
        {"epochs", optim.epochs},
        {"batch_size", optim.batch_size}}},
      {"centroid_momentum", centroid_momentum}};
  j["synthesis"] = synthesis ? synthesis->to_json() : nlohmann::json(nullptr);
  return j;
}

std::vector<std::string> profile_names() { return {"paper-supp-t2", "sane", "paper-3.1"}; }

std::vector<PhaseConfig> make_profile(std::string_view name) {
  const auto names = profile_names();
  const bool known = std::find(names.begin(), names.end(), name) != names.end();
  require(known, ErrorKind::Config, "unknown profile '" + std::string(name) + "' (paper-supp-t2, sane, paper-3.1)");
  std::vector<PhaseConfig> phases(4);
  auto& first = phases[0];
  first.loss.alpha_dist = first.loss.alpha_margin = first.loss.alpha_contras = 0.0;
  for (std::size_t p = 1; p < 4; ++p) {
    const SynthRow& row = kSuppT2[p - 1];
    SynthesisConfig s;
    s.alpha_bn = row.bn;
    s.alpha_tv = row.tv_l2;
    s.alpha_l2 = row.tv_l2;
    s.alpha_reg_total = row.total_reg;
    s.lr = row.lr;
    s.beta2 = row.beta2;
    s.batch_size = 40;
    s.steps = 2000;
    if (name == "sane") {
      s.beta2 = 0.999;
      s.lr = 0.01;
    } else if (name == "paper-3.1") {
      s.lr = 0.01;
    }
    phases[p].synthesis = s;
    phases[p].loss.margin = row.margin;
    phases[p].loss.alpha_dist = 5.0;
    phases[p].loss.alpha_margin = 1.0;
    phases[p].loss.distill_temperature = 2.0;
    phases[p].centroid_momentum = 0.99;
  }
  return phases;
}

const PhaseConfig& EngineConfig::phase(std::size_t t) const {
  require(!phases.empty(), ErrorKind::Config, "no phase configs");
  return phases[std::min(t, phases.size() - 1)];
}

void EngineConfig::validate() const {
  require(eta > 0.0, ErrorKind::Config, "eta must be positive");
  require(phases.size() >= 2, ErrorKind::Config, "need configs for phase 1 and at least one incremental phase");
  for (std::size_t p = 0; p < phases.size(); ++p) {
    phases[p].validate(p == 0);
    if (p > 0) require(phases[p].synthesis.has_value(), ErrorKind::Config,
                       "phase " + std::to_string(p + 1) + " needs a synthesis config");
  }
  require(replay_quota_override >= 0, ErrorKind::Config, "replay quota must be non-negative");
  require(threads >= 1, ErrorKind::Config, "threads must be at least 1");
}

nlohmann::json EngineConfig::to_json() const {
  nlohmann::json phases_j = nlohmann::json::array();
  for (const auto& p : phases) phases_j.push_back(p.to_json());
  return {{"arch", arch.to_json()},
          {"eta", eta},
          {"strategy", std::string(cimp::to_string(strategy))},
          {"ablation", ablation.to_string()},
          {"replay", replay},
          {"transductive_target", transductive_target},
          {"distill_targets", std::string(cimp::to_string(distill_targets))},
          {"clamp_pixels", clamp_pixels},
          {"replay_quota_override", replay_quota_override},
          {"seed", seed},
          {"phases", phases_j}};
}

std::vector<int> DataView::rows(const std::vector<int>& pool, std::span<const int> class_ids) const {
  const std::set<int> want(class_ids.begin(), class_ids.end());
  std::vector<int> out;
  for (int r : pool)
    if (want.count(manifest->rows[static_cast<std::size_t>(r)].class_id) != 0) out.push_back(r);
  return out;
}

DataView make_data_view(const DatasetManifest& manifest, const SplitSpec& spec) {
  DataView v;
  v.manifest = &manifest;
  v.split = group_split(manifest, spec);
  v.norm = compute_norm_stats(manifest, v.split.train);
  return v;
}

std::uint64_t SeedLedger::draw(const std::string& tag, std::uint64_t index) {
  const std::uint64_t s = derive_seed(master, tag, index);
  entries[tag + "/" + std::to_string(index)] = s;
  return s;
}

std::vector<std::vector<double>> MetricsReport::accuracy_matrix() const {
  std::vector<std::vector<double>> a;
  for (const auto& t : tasks) a.push_back(t.task_accuracy);
  return a;
}

double MetricsReport::final_average_accuracy() const {
  return tasks.empty() ? 0.0 : tasks.back().average_accuracy;
}

double MetricsReport::forgetting() const {
  if (tasks.size() < 2) return 0.0;
  const auto& last = tasks.back();
  double total = 0.0;
  int count = 0;
  for (const auto& [cls, final_acc] : last.class_accuracy) {
    double best = -1.0;
    for (std::size_t t = 0; t + 1 < tasks.size(); ++t) {
      auto it = tasks[t].class_accuracy.find(cls);
      if (it != tasks[t].class_accuracy.end()) best = std::max(best, it->second);
    }
    if (best < 0.0) continue;  // first seen in the last task
    total += best - final_acc;
    ++count;
  }
  return count == 0 ? 0.0 : total / count;
}

const ExperimentState* RunCache::initial(const std::string& key) const {
  auto it = initial_.find(key);
  return it == initial_.end() ? nullptr : it->second.get();
}

void RunCache::put_initial(const std::string& key, const ExperimentState& state) {
  initial_[key] = std::make_shared<const ExperimentState>(state);
}

const ClassImpressionSet* RunCache::impressions(const std::string& key) const {
  auto it = impressions_.find(key);
  return it == impressions_.end() ? nullptr : it->second.get();
}

void RunCache::put_impressions(const std::string& key, const ClassImpressionSet& set) {
  impressions_[key] = std::make_shared<const ClassImpressionSet>(set);
}

PseudoLabels pseudo_label_features(const ModelState& model, const FeatureBatch& feats) {
  PseudoLabels out;
  if (feats.rows() == 0) return out;
  const Matrix z = cosine_logits(model, feats);
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    Eigen::Index k = 0;
    const double mx = z.row(i).maxCoeff(&k);
    const double denom = (z.row(i).array() - mx).exp().sum();
    out.labels.push_back(model.seen_classes[static_cast<std::size_t>(k)]);
    out.confidence.push_back(1.0 / denom);
  }
  return out;
}

PseudoLabels pseudo_label(const ModelState& model, const ImageBatch& unlabeled) {
  return pseudo_label_features(model, forward_features(model, unlabeled));
}

std::vector<std::vector<StreamItem>> TrainingStream::epoch(std::uint64_t seed) const {
  std::vector<StreamItem> order = items;
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<StreamItem>> out;
  for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(batch_size)) {
    const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(batch_size));
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start), order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  // A single-item batch has no batch statistics worth normalizing with.
  if (out.size() > 1 && out.back().size() == 1) {
    out[out.size() - 2].push_back(out.back().front());
    out.pop_back();
  }
  return out;
}

std::map<int, int> TrainingStream::composition() const {
  std::map<int, int> c;
  for (const auto& i : items) ++c[i.label];
  return c;
}

int match_new_quota(const DataView& data, std::span<const int> new_classes) {
  require(!new_classes.empty(), ErrorKind::Contract, "quota needs at least one new class");
  const auto rows = data.train_rows(new_classes);
  const auto n = static_cast<int>(rows.size());
  const auto k = static_cast<int>(new_classes.size());
  return (n + k - 1) / k;
}

TrainingStream assemble_training_stream(const DataView& data, std::span<const int> new_rows,
                                        const ClassImpressionSet* impressions, std::span<const int> old_classes,
                                        int quota, int batch_size) {
  TrainingStream s;
  s.batch_size = batch_size;
  for (int r : new_rows) s.items.push_back({false, r, data.manifest->rows[static_cast<std::size_t>(r)].class_id});
  if (impressions == nullptr) return s;
  require(quota >= 1, ErrorKind::Contract, "replay quota must be at least 1");
  for (int c : old_classes) {
    require(impressions->covers(std::span<const int>(&c, 1)), ErrorKind::ReplayCoverage,
            "impressions do not cover old class " + std::to_string(c));
    const auto& ci = impressions->get(c);
    require(ci.images.n() >= quota, ErrorKind::ReplayCoverage,
            "class " + std::to_string(c) + " has " + std::to_string(ci.images.n()) + " impressions, quota is " +
                std::to_string(quota));
    for (int i = 0; i < quota; ++i) s.items.push_back({true, i, c});
  }
  return s;
}

ExperimentState run_initial_task(const DataView& data, const TaskSchedule& schedule, const EngineConfig& cfg,
                                 const RunOutput& out, RunCache* cache) {
  cfg.validate();
  schedule.validate();
  const auto& classes = schedule.tasks.front().new_class_ids;
  for (int c : classes) {
    require(!data.train_rows(std::span<const int>(&c, 1)).empty(), ErrorKind::Dataset,
            "phase-1 class " + std::to_string(c) + " has no training data");
  }
  const std::string key = cache != nullptr ? cache_key_initial(data, schedule, cfg) : std::string();
  if (cache != nullptr) {
    if (const ExperimentState* hit = cache->initial(key)) {
      ExperimentState state = *hit;
      if (!out.dir.empty()) {
        write_task_artifacts(state, 1, out);
        append_jsonl(out, {{"type", "cached-initial"}, {"task", 1}});
      }
      return state;
    }
  }

  ExperimentState state;
  state.seeds.master = cfg.seed;
  state.model = ModelState::create(cfg.arch, classes, cfg.eta, state.seeds.draw("init"));
  const PhaseConfig& phase = cfg.phase(0);
  TrainArgs a;
  a.task = 1;
  a.data = &data;
  a.cfg = &cfg;
  a.phase = &phase;
  a.plan.loss = phase.loss;
  a.plan.loss.alpha_dist = a.plan.loss.alpha_margin = a.plan.loss.alpha_contras = 0.0;
  a.new_classes = classes;

  const auto rows = data.train_rows(classes);
  const TrainInputs in = build_inputs(data, rows, nullptr, {}, 0, phase.optim.batch_size);
  TaskMetrics tm;
  train(state, in, a, tm, out);
  record_means(state, data, classes);

  TaskMetrics ev = evaluate(state.model, data, schedule, 0);
  ev.train_accuracy = tm.train_accuracy;
  ev.epoch_losses = std::move(tm.epoch_losses);
  ev.checkpoint_hash = fingerprint(state.model);
  state.metrics.push_back(std::move(ev));
  state.completed_tasks = 1;
  write_task_artifacts(state, 1, out);
  if (cache != nullptr) cache->put_initial(key, state);
  return state;
}

void run_incremental_task(ExperimentState& state, const DataView& data, const TaskSchedule& schedule,
                          std::size_t task_index, const EngineConfig& cfg, const RunOutput& out, RunCache* cache,
                          const ClassImpressionSet* preloaded) {
  require(task_index >= 1 && task_index < schedule.tasks.size(), ErrorKind::Contract, "task index out of range");
  require(state.completed_tasks == static_cast<int>(task_index), ErrorKind::Dependency,
          "task " + std::to_string(task_index + 1) + " needs the previous " + std::to_string(task_index) +
              " task(s) completed");
  const int task = static_cast<int>(task_index) + 1;
  const auto& new_classes = schedule.tasks[task_index].new_class_ids;
  for (int c : new_classes) {
    require(!state.model.has_class(c), ErrorKind::Conflict, "class " + std::to_string(c) + " is already seen");
    require(!data.train_rows(std::span<const int>(&c, 1)).empty(), ErrorKind::Dataset,
            "class " + std::to_string(c) + " has no training data");
  }
  const PhaseConfig& phase = cfg.phase(task_index);
  const Plan plan = make_plan(cfg, phase);
  TaskMetrics tm;

  // (a) freeze
  state.frozen = state.model;
  const std::string frozen_hash = fingerprint(*state.frozen);
  tm.frozen_hash_before = frozen_hash;
  const std::vector<int> old_classes = state.frozen->seen_classes;

  // (b) synthesize
  state.impressions.reset();
  int quota = 0;
  if (plan.replay) {
    quota = task_replay_quota(cfg, data, schedule, task_index);
    const SynthesisConfig sc = task_synthesis_config(cfg, data, task_index);
    const std::uint64_t seed = state.seeds.draw("synthesis", static_cast<std::uint64_t>(task));
    SynthesisConfig key_cfg = sc;
    key_cfg.threads = 1;  // results do not depend on it
    if (preloaded != nullptr) {
      require(preloaded->covers(old_classes), ErrorKind::ReplayCoverage,
              "stored impressions do not cover every old class of task " + std::to_string(task));
      require(preloaded->quota_per_class == quota, ErrorKind::Conflict,
              "stored impressions hold " + std::to_string(preloaded->quota_per_class) + " images per class, task " +
                  std::to_string(task) + " needs " + std::to_string(quota));
      SynthesisConfig stored = preloaded->config;
      stored.threads = 1;
      require(stored.to_json() == key_cfg.to_json(), ErrorKind::Conflict,
              "stored impressions were synthesized with a different config");
      state.impressions = *preloaded;
    } else {
      const std::string key = nlohmann::json({{"frozen", frozen_hash},
                                              {"config", key_cfg.to_json()},
                                              {"quota", quota},
                                              {"seed", seed},
                                              {"classes", old_classes}})
                                  .dump();
      const ClassImpressionSet* hit = cache != nullptr ? cache->impressions(key) : nullptr;
      if (hit != nullptr) {
        state.impressions = *hit;
      } else {
        state.impressions = synthesize(*state.frozen, state.means, old_classes, quota, sc, seed);
        if (cache != nullptr) cache->put_impressions(key, *state.impressions);
      }
    }
    SynthesisSummary sum;
    for (const auto& c : state.impressions->classes) {
      ++sum.classes;
      sum.images += c.images.n();
      for (const auto& t : c.traces) {
        sum.initial_total += t.rows.front().total;
        sum.final_total += t.rows.back().total;
        sum.initial_bn += t.rows.front().parts.bn;
        sum.final_bn += t.rows.back().parts.bn;
        sum.retries += t.attempts - 1;
      }
    }
    int batches = 0;
    for (const auto& c : state.impressions->classes) batches += static_cast<int>(c.traces.size());
    if (batches > 0) {
      sum.initial_total /= batches;
      sum.final_total /= batches;
      sum.initial_bn /= batches;
      sum.final_bn /= batches;
    }
    tm.synthesis = sum;
    if (!out.dir.empty() && out.write_impressions && preloaded == nullptr) {
      save_impressions(*state.impressions, out.dir / "impressions" / ("task_" + std::to_string(task)),
                       PreviewOptions{data.norm.mean, data.norm.std, 8});
    }
  }
  tm.replay_quota = quota;

  // (c) extend
  state.model = extend_classes(state.model, new_classes, state.seeds.draw("extend", static_cast<std::uint64_t>(task)));

  // (d) train
  std::vector<int> real_classes = new_classes;
  if (plan.real_all_seen) {
    // Offline reference: a fresh model trained jointly on every seen class.
    real_classes = schedule.classes_through(task_index);
    state.model = ModelState::create(cfg.arch, real_classes, cfg.eta,
                                     state.seeds.draw("oracle-init", static_cast<std::uint64_t>(task)));
  }
  const auto rows = data.train_rows(real_classes);
  const TrainInputs in = build_inputs(data, rows, state.impressions ? &*state.impressions : nullptr, old_classes,
                                      quota, phase.optim.batch_size);
  TrainArgs a;
  a.task = task;
  a.data = &data;
  a.cfg = &cfg;
  a.phase = &phase;
  a.plan = plan;
  a.frozen = &*state.frozen;
  a.old_classes = old_classes;
  a.new_classes = new_classes;
  train(state, in, a, tm, out);

  tm.frozen_hash_after = fingerprint(*state.frozen);
  require(tm.frozen_hash_after == frozen_hash, ErrorKind::Contract, "the frozen model changed during the task");

  // (e) class means for the new classes
  record_means(state, data, new_classes);

  TaskMetrics ev = evaluate(state.model, data, schedule, task_index);
  ev.train_accuracy = tm.train_accuracy;
  ev.frozen_hash_before = tm.frozen_hash_before;
  ev.frozen_hash_after = tm.frozen_hash_after;
  ev.replay_quota = tm.replay_quota;
  ev.synthesis = tm.synthesis;
  ev.epoch_losses = std::move(tm.epoch_losses);
  ev.checkpoint_hash = fingerprint(state.model);
  state.metrics.push_back(std::move(ev));
  state.completed_tasks = task;

  // (f) checkpoint
  write_task_artifacts(state, task, out);
}

TaskMetrics evaluate(const ModelState& model, const DataView& data, const TaskSchedule& schedule,
                     std::size_t task_index) {
  TaskMetrics m;
  m.task = static_cast<int>(task_index) + 1;
  m.new_classes = schedule.tasks.at(task_index).new_class_ids;
  m.seen_classes = schedule.classes_through(task_index);
  for (int c : m.seen_classes) {
    require(model.has_class(c), ErrorKind::Label, "model has no head row for seen class " + std::to_string(c));
  }
  const auto rows = data.test_rows(m.seen_classes);
  require(!rows.empty(), ErrorKind::Dataset, "no test samples for the seen classes");
  const std::vector<int> truth = gather_labels(*data.manifest, rows);
  const std::vector<int> pred = predict(model, gather_images(*data.manifest, rows, data.norm));

  std::map<int, int> hits;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    ++m.class_test_counts[truth[i]];
    hits[truth[i]] += pred[i] == truth[i];
  }
  for (int c : m.seen_classes) {
    const int n = m.class_test_counts[c];
    m.class_accuracy[c] = n == 0 ? 0.0 : static_cast<double>(hits[c]) / n;
  }
  m.average_accuracy = accuracy(pred, truth);
  for (std::size_t tau = 0; tau <= task_index; ++tau) {
    int n = 0, h = 0;
    for (int c : schedule.tasks[tau].new_class_ids) {
      n += m.class_test_counts[c];
      h += hits[c];
    }
    m.task_accuracy.push_back(n == 0 ? 0.0 : static_cast<double>(h) / n);
  }
  return m;
}

MetricsReport run_schedule(const DataView& data, const TaskSchedule& schedule, const EngineConfig& cfg,
                           const RunOutput& out, RunCache* cache) {
  cfg.validate();
  schedule.validate();
  if (!out.dir.empty()) {
    std::filesystem::create_directories(out.dir);
    std::filesystem::remove(out.dir / "metrics.jsonl");
    std::ofstream(out.dir / "config.json", std::ios::trunc) << cfg.to_json().dump(2) << '\n';
  }
  ExperimentState state = run_initial_task(data, schedule, cfg, out, cache);
  for (std::size_t t = 1; t < schedule.tasks.size(); ++t) run_incremental_task(state, data, schedule, t, cfg, out, cache);

  MetricsReport r;
  r.strategy = cfg.strategy;
  r.ablation = cfg.ablation;
  r.seed = cfg.seed;
  r.schedule = schedule;
  r.tasks = state.metrics;
  if (!out.dir.empty()) {
    nlohmann::json seeds = nlohmann::json::object();
    for (const auto& [k, v] : state.seeds.entries) seeds[k] = v;
    std::ofstream(out.dir / "seeds.json", std::ios::trunc) << nlohmann::json({{"master", cfg.seed}, {"derived", seeds}}).dump(2) << '\n';
  }
  return r;
}

bool uses_replay(const EngineConfig& cfg) noexcept { return cfg.strategy == Strategy::Full && cfg.replay; }

SynthesisConfig task_synthesis_config(const EngineConfig& cfg, const DataView& data, std::size_t task_index) {
  const PhaseConfig& phase = cfg.phase(task_index);
  require(phase.synthesis.has_value(), ErrorKind::Config,
          "phase " + std::to_string(task_index + 1) + " has no synthesis config");
  SynthesisConfig sc = *phase.synthesis;
  if (cfg.ablation.noise_init) sc.init_mode = InitMode::GaussianNoise;
  if (cfg.clamp_pixels) {
    double lo = INFINITY, hi = -INFINITY;
    for (std::size_t c = 0; c < data.norm.mean.size(); ++c) {
      lo = std::min(lo, (0.0 - data.norm.mean[c]) / data.norm.std[c]);
      hi = std::max(hi, (1.0 - data.norm.mean[c]) / data.norm.std[c]);
    }
    sc.pixel_range = PixelRange{lo, hi};
  }
  sc.threads = engine_threads(cfg.threads);
  return sc;
}

int task_replay_quota(const EngineConfig& cfg, const DataView& data, const TaskSchedule& schedule,
                      std::size_t task_index) {
  if (cfg.replay_quota_override > 0) return cfg.replay_quota_override;
  return match_new_quota(data, schedule.tasks.at(task_index).new_class_ids);
}

nlohmann::json to_json(const TaskMetrics& m) {
  auto keyed = [](const auto& map) {
    nlohmann::json j = nlohmann::json::object();
    for (const auto& [k, v] : map) j[std::to_string(k)] = v;
    return j;
  };
  nlohmann::json epochs = nlohmann::json::array();
  for (const auto& e : m.epoch_losses) {
    epochs.push_back({{"epoch", e.epoch}, {"step", e.step}, {"cnce", e.cnce}, {"dist", e.dist},
                      {"margin", e.margin}, {"contras", e.contras}, {"total", e.total},
                      {"contras_skipped", e.contras_skipped}});
  }
  nlohmann::json j = {{"task", m.task},
                      {"new_classes", m.new_classes},
                      {"seen_classes", m.seen_classes},
                      {"average_accuracy", m.average_accuracy},
                      {"class_accuracy", keyed(m.class_accuracy)},
                      {"class_test_counts", keyed(m.class_test_counts)},
                      {"task_accuracy", m.task_accuracy},
                      {"train_accuracy", m.train_accuracy},
                      {"checkpoint_sha256", m.checkpoint_hash},
                      {"replay_quota", m.replay_quota},
                      {"epoch_losses", epochs}};
  if (!m.frozen_hash_before.empty()) {
    j["frozen_sha256_before"] = m.frozen_hash_before;
    j["frozen_sha256_after"] = m.frozen_hash_after;
  }
  if (m.synthesis) {
    const auto& s = *m.synthesis;
    j["synthesis"] = {{"classes", s.classes},       {"images", s.images},     {"initial_total", s.initial_total},
                      {"final_total", s.final_total}, {"initial_bn", s.initial_bn}, {"final_bn", s.final_bn},
                      {"retries", s.retries}};
  }
  return j;
}

TaskMetrics task_metrics_from_json(const nlohmann::json& j) {
  try {
    TaskMetrics m;
    m.task = j.at("task");
    m.new_classes = j.at("new_classes").get<std::vector<int>>();
    m.seen_classes = j.at("seen_classes").get<std::vector<int>>();
    m.average_accuracy = j.at("average_accuracy");
    for (const auto& [k, v] : j.at("class_accuracy").items()) m.class_accuracy[std::stoi(k)] = v.get<double>();
    for (const auto& [k, v] : j.at("class_test_counts").items()) m.class_test_counts[std::stoi(k)] = v.get<int>();
    m.task_accuracy = j.at("task_accuracy").get<std::vector<double>>();
    m.train_accuracy = j.at("train_accuracy");
    m.checkpoint_hash = j.at("checkpoint_sha256");
    m.replay_quota = j.at("replay_quota");
    m.frozen_hash_before = j.value("frozen_sha256_before", "");
    m.frozen_hash_after = j.value("frozen_sha256_after", "");
    if (j.contains("synthesis")) {
      const auto& s = j["synthesis"];
      m.synthesis = SynthesisSummary{s.at("classes"),   s.at("images"),   s.at("initial_total"), s.at("final_total"),
                                     s.at("initial_bn"), s.at("final_bn"), s.at("retries")};
    }
    for (const auto& e : j.value("epoch_losses", nlohmann::json::array())) {
      m.epoch_losses.push_back({m.task, e.at("epoch"), e.at("step"), e.at("cnce"), e.at("dist"), e.at("margin"),
                                e.at("contras"), e.at("total"), e.at("contras_skipped")});
    }
    return m;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::Format, std::string("malformed task metrics: ") + e.what());
  }
}

ExperimentState load_experiment_state(const std::filesystem::path& run_dir, int completed, std::uint64_t seed) {
  const auto dir = run_dir / ("task_" + std::to_string(completed));
  for (const char* f : {"checkpoint.cimp", "means.cimp", "metrics.json"}) {
    require(std::filesystem::exists(dir / f), ErrorKind::Dependency,
            "missing " + (dir / f).string() + ": run task " + std::to_string(completed) + " first");
  }
  ExperimentState s;
  s.model = load_checkpoint(dir / "checkpoint.cimp");
  s.means = ClassMeanStore::load(dir / "means.cimp");
  std::ifstream in(dir / "metrics.json");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::Format, (dir / "metrics.json").string() + ": " + e.what());
  }
  require(j.value("seed", seed) == seed, ErrorKind::Conflict,
          (dir / "metrics.json").string() + " belongs to seed " + std::to_string(j.value("seed", seed)));
  for (const auto& t : j.at("tasks")) s.metrics.push_back(task_metrics_from_json(t));
  require(static_cast<int>(s.metrics.size()) == completed, ErrorKind::Format,
          (dir / "metrics.json").string() + ": task count does not match");
  require(s.metrics.back().checkpoint_hash == fingerprint(s.model), ErrorKind::Conflict,
          (dir / "checkpoint.cimp").string() + " does not match the recorded checkpoint hash");
  s.seeds.master = seed;
  s.completed_tasks = completed;
  return s;
}

int engine_threads(int requested) {
  requested = std::max(1, requested);
  const char* env = std::getenv("CI_ENGINE_THREADS");
  if (env == nullptr || *env == '\0') return requested;
  int cap = 0;
  try {
    std::size_t used = 0;
    cap = std::stoi(env, &used);
    if (env[used] != '\0') throw std::invalid_argument(env);
  } catch (const std::exception&) {
    fail(ErrorKind::Config, "CI_ENGINE_THREADS must be an integer, got '" + std::string(env) + "'");
  }
  return std::clamp(cap, 1, requested);
}

}  // namespace cimp
