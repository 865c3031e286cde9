#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <limits>
#include <numeric>

#include "cdkd/errors.hpp"
#include "cdkd/sape.hpp"
#include "cdkd/trainer.hpp"

namespace cdkd::harness {

namespace {

// Child streams of init_seed.
constexpr std::uint64_t kTeacherStream = 1;
constexpr std::uint64_t kStudentStream = 2;
constexpr std::uint64_t kSapeStream = 3;

std::vector<std::size_t> iota_indices(std::size_t begin, std::size_t end) {
  std::vector<std::size_t> out(end - begin);
  std::iota(out.begin(), out.end(), begin);
  return out;
}

synth::View view_of(Network net) {
  return net == Network::kTeacher ? synth::View::kHigh : synth::View::kLow;
}

// Copies decoded predictions of one batch into rows [offset, offset + B).
void place_predictions(simcc::KeypointSet& all, const simcc::KeypointSet& part,
                       std::size_t offset) {
  std::copy(part.coords.begin(), part.coords.end(),
            all.coords.begin() + static_cast<std::ptrdiff_t>(offset * all.num_keypoints * 2));
}

simcc::KeypointSet ground_truth(const std::vector<synth::SyntheticSample>& samples,
                                Network net, std::size_t kps) {
  simcc::KeypointSet gt(samples.size(), kps);
  for (std::size_t b = 0; b < samples.size(); ++b) {
    const auto& src = net == Network::kTeacher ? samples[b].gt_high : samples[b].gt_low;
    for (std::size_t k = 0; k < kps; ++k) {
      gt.x(b, k) = src.x(0, k);
      gt.y(b, k) = src.y(0, k);
      gt.visible[b * kps + k] = src.visible[k];
    }
  }
  return gt;
}

double visible_count(const simcc::KeypointSet& kp) {
  double n = 0.0;
  for (auto v : kp.visible) n += v ? 1.0 : 0.0;
  return n;
}

void ensure_finite(const MetricRow& row) {
  for (double v : {row.loss_total, row.loss_ori, row.loss_fea, row.loss_logit}) {
    if (!std::isfinite(v)) throw NumericError("non-finite " + row.split + " loss");
  }
}

}  // namespace

std::string_view network_name(Network net) {
  return net == Network::kTeacher ? "teacher" : "student";
}

std::size_t input_side(const RunConfig& cfg, Network net) {
  return net == Network::kTeacher ? cfg.high_side() : cfg.low_side();
}

model::ParamSet build_network(const RunConfig& cfg, Network net) {
  cfg.validate();
  Rng rng = Rng(cfg.init_seed).split(net == Network::kTeacher ? kTeacherStream : kStudentStream);
  Rng backbone_rng = rng.split(0);
  Rng head_rng = rng.split(1);
  model::ParamSet params;
  model::init_backbone(params, cfg.backbone, backbone_rng);
  const std::size_t side = input_side(cfg, net);
  const std::size_t fside = side / cfg.backbone.total_stride;
  simcc::init_head(params, cfg.backbone.out_channels() * fside * fside, cfg.simcc, side, head_rng);
  return params;
}

model::ParamSet build_distilled_student(const RunConfig& cfg) {
  auto params = build_network(cfg, Network::kStudent);
  if (cfg.scale() < 2) throw ConfigError("distillation needs a scale factor of at least 2");
  cfg.sape.validate();
  if (cfg.sape.scale != cfg.scale()) {
    throw ConfigError("SAPE scale " + std::to_string(cfg.sape.scale) +
                      " differs from the data scale " + std::to_string(cfg.scale()));
  }
  Rng sape_rng = Rng(cfg.init_seed).split(kSapeStream);
  const std::size_t fside = cfg.low_side() / cfg.backbone.total_stride;
  for (auto k : cfg.sape.kernels) {
    if (sape::degenerate_kernel(k, fside)) {
      std::cerr << "warning: SAU kernel " << k << " exceeds twice the feature side " << fside
                << "\n";
    }
  }
  sape::init_sape(params, cfg.sape, {cfg.backbone.out_channels(), fside, fside}, sape_rng);
  params.add(kTauPath, model::Role::kEtht, ad::Tensor::scalar(cfg.tau_init, true));
  if (cfg.learn_loss_weights) {
    params.add(kAlphaPath, model::Role::kEtht, ad::Tensor::scalar(cfg.weights.alpha, true));
    params.add(kBetaPath, model::Role::kEtht, ad::Tensor::scalar(cfg.weights.beta, true));
  }
  return params;
}

Forward forward(const model::ParamSet& params, const RunConfig& cfg, Network net,
                const ad::Tensor& images) {
  Forward out;
  out.feature = model::backbone_forward(params, cfg.backbone, images);
  out.logits = simcc::head_forward(params, out.feature, cfg.simcc, input_side(cfg, net));
  return out;
}

// ---------------------------------------------------------------------------
// Teacher cache

ad::Tensor TeacherCache::feature_batch(std::span<const std::size_t> indices) const {
  const std::size_t per = ad::numel(feature_shape);
  std::vector<double> out(indices.size() * per);
  for (std::size_t b = 0; b < indices.size(); ++b) {
    std::copy_n(feature.begin() + static_cast<std::ptrdiff_t>(indices[b] * per), per,
                out.begin() + static_cast<std::ptrdiff_t>(b * per));
  }
  ad::Shape shape{indices.size()};
  shape.insert(shape.end(), feature_shape.begin(), feature_shape.end());
  return ad::Tensor::from(std::move(shape), std::move(out));
}

simcc::AxisPair TeacherCache::logits_batch(std::span<const std::size_t> indices,
                                           std::size_t num_keypoints) const {
  const std::size_t per = num_keypoints * bins;
  auto gather = [&](const std::vector<double>& src) {
    std::vector<double> out(indices.size() * per);
    for (std::size_t b = 0; b < indices.size(); ++b) {
      std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(indices[b] * per), per,
                  out.begin() + static_cast<std::ptrdiff_t>(b * per));
    }
    return simcc::AxisDistribution{
        ad::Tensor::from({indices.size(), num_keypoints, bins}, std::move(out)),
        simcc::DistKind::kLogits};
  };
  return {gather(logits_x), gather(logits_y)};
}

TeacherCache cache_teacher(const model::ParamSet& teacher, const RunConfig& cfg,
                           const std::vector<synth::SyntheticSample>& samples) {
  TeacherCache cache;
  cache.count = samples.size();
  cache.bins = cfg.simcc.bins(cfg.high_side());
  for (std::size_t b0 = 0; b0 < samples.size(); b0 += cfg.batch_size) {
    const auto idx = iota_indices(b0, std::min(samples.size(), b0 + cfg.batch_size));
    const auto batch = synth::make_batch(samples, idx, synth::View::kHigh);
    const auto out = forward(teacher, cfg, Network::kTeacher, batch.images);
    if (cache.feature_shape.empty()) {
      cache.feature_shape.assign(out.feature.shape().begin() + 1, out.feature.shape().end());
    }
    const auto f = out.feature.values();
    cache.feature.insert(cache.feature.end(), f.begin(), f.end());
    const auto lx = out.logits.x.values.values();
    const auto ly = out.logits.y.values.values();
    cache.logits_x.insert(cache.logits_x.end(), lx.begin(), lx.end());
    cache.logits_y.insert(cache.logits_y.end(), ly.begin(), ly.end());
  }
  return cache;
}

// ---------------------------------------------------------------------------
// Metrics and evaluation

std::string format_metric_row(const MetricRow& r) {
  std::string out = std::to_string(r.epoch) + "," + r.split;
  for (double v : {r.loss_total, r.loss_ori, r.loss_fea, r.loss_logit, r.tau, r.xi, r.pck}) {
    out += ",";
    out += format_double(v);
  }
  return out;
}

double PckReport::at(double threshold) const {
  for (std::size_t i = 0; i < thresholds.size(); ++i) {
    if (thresholds[i] == threshold) return aggregate[i];
  }
  throw Error("PCK report has no threshold " + format_double(threshold));
}

namespace {

simcc::KeypointSet predict_split(const model::ParamSet& params, const RunConfig& cfg,
                                 Network net, const std::vector<synth::SyntheticSample>& samples) {
  simcc::KeypointSet all(samples.size(), cfg.simcc.num_keypoints);
  for (std::size_t b0 = 0; b0 < samples.size(); b0 += cfg.batch_size) {
    const auto idx = iota_indices(b0, std::min(samples.size(), b0 + cfg.batch_size));
    const auto batch = synth::make_batch(samples, idx, view_of(net));
    const auto out = forward(params, cfg, net, batch.images);
    place_predictions(all, simcc::decode(out.logits, cfg.simcc), b0);
  }
  return all;
}

}  // namespace

PckReport evaluate(const model::ParamSet& params, const RunConfig& cfg, Network net,
                   const std::vector<synth::SyntheticSample>& samples,
                   std::span<const double> thresholds) {
  if (samples.empty()) throw DataError("evaluate: empty split");
  const std::size_t side = input_side(cfg, net);
  const auto pred = predict_split(params, cfg, net, samples);
  const auto gt = ground_truth(samples, net, cfg.simcc.num_keypoints);
  PckReport report;
  for (double t : thresholds) {
    report.thresholds.push_back(t);
    report.aggregate.push_back(simcc::pck(pred, gt, t, side));
    std::vector<double> per;
    for (std::size_t k = 0; k < cfg.simcc.num_keypoints; ++k) {
      per.push_back(simcc::pck_keypoint(pred, gt, k, t, side));
    }
    report.per_keypoint.push_back(std::move(per));
  }
  return report;
}

// ---------------------------------------------------------------------------
// Trainer

Trainer::Trainer(RunConfig cfg, const synth::Dataset& data, Network net,
                 const model::ParamSet* teacher)
    : cfg_(std::move(cfg)), data_(&data), net_(net) {
  cfg_.validate();
  distill_ = teacher != nullptr && net == Network::kStudent;
  if (teacher != nullptr && net == Network::kTeacher) {
    throw ConfigError("a teacher network cannot be distilled");
  }
  optim_.learning_rate = cfg_.learning_rate;
  optim_.momentum = cfg_.momentum;
  etht_.tau_min = cfg_.tau_min;
  etht_.tau_max = cfg_.tau_max;
  etht_.schedule = cfg_.schedule;
  etht_.max_epochs = std::max<std::size_t>(cfg_.epochs, 1);
  etht_.learn_tau = cfg_.learn_tau;
  if (!distill_) {
    params_ = build_network(cfg_, net);
    etht_.tau = ad::Tensor::scalar(cfg_.tau_init);
    return;
  }
  const std::size_t t_bins = cfg_.simcc.bins(cfg_.high_side());
  const std::size_t s_bins = cfg_.simcc.bins(cfg_.low_side());
  if (t_bins != cfg_.scale() * s_bins) {
    throw ConfigError("teacher bins " + std::to_string(t_bins) + " != m x student bins " +
                      std::to_string(s_bins));
  }
  params_ = build_distilled_student(cfg_);
  etht_.tau = params_.get(kTauPath);
  train_cache_ = cache_teacher(*teacher, cfg_, data.train());
  val_cache_ = cache_teacher(*teacher, cfg_, data.val());
  const std::size_t s_fside = cfg_.low_side() / cfg_.backbone.total_stride;
  if (train_cache_.feature_shape !=
      ad::Shape{cfg_.backbone.out_channels(), cfg_.scale() * s_fside, cfg_.scale() * s_fside}) {
    throw ConfigError("teacher feature " + ad::to_string(train_cache_.feature_shape) +
                      " is not m times the student feature side");
  }
}

double Trainer::learning_rate(std::size_t epoch) const {
  return epoch >= cfg_.decay_epoch ? cfg_.learning_rate * cfg_.decay_factor : cfg_.learning_rate;
}

cca::LossWeights Trainer::loss_weights() const {
  if (distill_ && cfg_.learn_loss_weights) {
    return {params_.get(kAlphaPath).item(), params_.get(kBetaPath).item()};
  }
  return cfg_.weights;
}

model::RoleSet Trainer::descent_roles() const {
  return {model::Role::kBackbone, model::Role::kHead, model::Role::kSape};
}

Trainer::BatchLosses Trainer::batch_losses(const synth::Batch& batch, const TeacherCache* cache,
                                           std::span<const std::size_t> indices,
                                           const ad::Tensor& tau, const ad::Tensor& alpha,
                                           const ad::Tensor& beta) {
  const std::size_t side = input_side(cfg_, net_);
  const auto out = forward(params_, cfg_, net_, batch.images);
  const auto target = simcc::encode_labels(batch.keypoints, cfg_.simcc, side);
  BatchLosses l;
  l.logits = out.logits;
  l.ori = simcc::task_loss(out.logits, target, batch.keypoints.visible);
  if (!distill_) {
    l.total = l.ori;
    return l;
  }
  const auto aligned = sape::sape_forward(out.feature, params_, cfg_.sape);
  l.fea = sape::feature_loss(aligned, cache->feature_batch(indices));
  l.logit = cca::logit_loss(cache->logits_batch(indices, cfg_.simcc.num_keypoints), out.logits,
                            tau, cfg_.scale(), cfg_.tau_min, cfg_.tau_max);
  if (alpha.defined()) {
    l.total = ad::add(ad::add(l.ori, ad::mul(alpha, l.fea)), ad::mul(beta, l.logit));
    if (!std::isfinite(l.total.item())) throw NumericError("non-finite total loss");
  } else {
    l.total = cca::total_loss(l.ori, l.fea, l.logit, cfg_.weights);
  }
  return l;
}

StepLosses Trainer::step(std::span<const std::size_t> indices, std::size_t epoch) {
  etht_.epoch = std::min(epoch, etht_.max_epochs);
  optim_.learning_rate = learning_rate(epoch);
  params_.zero_grad();
  const auto batch = synth::make_batch(data_->train(), indices, view_of(net_));

  ad::Tape tape;
  ad::TapeScope scope(tape);
  ad::Tensor tau, alpha, beta;
  if (distill_) {
    tau = cca::temperature_for_graph(etht_);
    if (cfg_.learn_loss_weights) {
      const double xi = cca::xi_schedule(etht_);
      alpha = ad::grad_reverse(params_.get(kAlphaPath), xi);
      beta = ad::grad_reverse(params_.get(kBetaPath), xi);
    }
  }
  auto l = batch_losses(batch, &train_cache_, indices, tau, alpha, beta);
  ad::backprop(l.total);

  model::sgd_step(params_, optim_, descent_roles());
  if (distill_) {
    cca::etht_step(etht_, optim_.learning_rate);
    if (cfg_.learn_loss_weights) {
      for (const char* path : {kAlphaPath, kBetaPath}) {
        auto& w = params_.get(path);
        auto v = w.mutable_values();
        v[0] = std::clamp(v[0] - optim_.learning_rate * w.grad()[0], 0.0, cfg_.loss_weight_max);
      }
    }
  }

  const double n_vis = visible_count(batch.keypoints);
  const auto pred = simcc::decode(l.logits, cfg_.simcc);
  train_hits_ += simcc::pck(pred, batch.keypoints, cfg_.eval_threshold, input_side(cfg_, net_)) *
                 n_vis;
  train_total_ += n_vis;

  StepLosses out;
  out.total = l.total.item();
  out.ori = l.ori.item();
  if (distill_) {
    out.fea = l.fea.item();
    out.logit = l.logit.item();
  }
  return out;
}

MetricRow Trainer::measure(const std::vector<synth::SyntheticSample>& samples,
                           const TeacherCache* cache, std::size_t epoch,
                           const std::string& split) {
  MetricRow row;
  row.epoch = epoch;
  row.split = split;
  row.tau = etht_.tau.item();
  row.xi = distill_ ? cca::xi_schedule(etht_) : 0.0;
  const ad::Tensor tau = etht_.tau.detach();
  ad::Tensor alpha, beta;
  if (distill_ && cfg_.learn_loss_weights) {
    alpha = params_.get(kAlphaPath).detach();
    beta = params_.get(kBetaPath).detach();
  }
  simcc::KeypointSet all(samples.size(), cfg_.simcc.num_keypoints);
  for (std::size_t b0 = 0; b0 < samples.size(); b0 += cfg_.batch_size) {
    const auto idx = iota_indices(b0, std::min(samples.size(), b0 + cfg_.batch_size));
    const auto batch = synth::make_batch(samples, idx, view_of(net_));
    const auto l = batch_losses(batch, cache, idx, tau, alpha, beta);
    const double w = static_cast<double>(idx.size()) / static_cast<double>(samples.size());
    row.loss_total += w * l.total.item();
    row.loss_ori += w * l.ori.item();
    if (distill_) {
      row.loss_fea += w * l.fea.item();
      row.loss_logit += w * l.logit.item();
    }
    place_predictions(all, simcc::decode(l.logits, cfg_.simcc), b0);
  }
  row.pck = simcc::pck(all, ground_truth(samples, net_, cfg_.simcc.num_keypoints),
                       cfg_.eval_threshold, input_side(cfg_, net_));
  return row;
}

TrainResult Trainer::fit(const TrainOptions& opts) {
  std::ofstream csv;
  if (!opts.out_dir.empty()) {
    std::filesystem::create_directories(opts.out_dir);
    write_config_echo(opts.out_dir, cfg_);
    csv.open(opts.out_dir / "metrics.csv", std::ios::trunc);
    if (!csv) throw Error("cannot write " + (opts.out_dir / "metrics.csv").string());
    csv << kMetricsHeader << "\n";
  }
  auto emit = [&](const MetricRow& row) {
    if (csv.is_open()) csv << format_metric_row(row) << "\n" << std::flush;
  };

  TrainResult result;
  result.best = params_.clone();
  result.best_val_pck = -1.0;
  const auto& train = data_->train();
  for (std::size_t epoch = 0; epoch < cfg_.epochs; ++epoch) {
    etht_.epoch = epoch;
    const auto order = data_->epoch_order(epoch);
    train_hits_ = train_total_ = 0.0;
    MetricRow row;
    row.epoch = epoch;
    row.split = "train";
    try {
      std::size_t step_index = 0;
      for (std::size_t b0 = 0; b0 < order.size(); b0 += cfg_.batch_size, ++step_index) {
        const std::span<const std::size_t> idx(order.data() + b0,
                                               std::min(cfg_.batch_size, order.size() - b0));
        const auto l = step(idx, epoch);
        const double w = static_cast<double>(idx.size()) / static_cast<double>(train.size());
        row.loss_total += w * l.total;
        row.loss_ori += w * l.ori;
        row.loss_fea += w * l.fea;
        row.loss_logit += w * l.logit;
        if (opts.on_step) opts.on_step(epoch, step_index, l);
      }
    } catch (const NumericError&) {
      const double nan = std::numeric_limits<double>::quiet_NaN();
      row.loss_total = row.loss_ori = row.loss_fea = row.loss_logit = row.pck = nan;
      row.tau = etht_.tau.item();
      row.xi = distill_ ? cca::xi_schedule(etht_) : 0.0;
      emit(row);
      throw;
    }
    row.tau = etht_.tau.item();
    row.xi = distill_ ? cca::xi_schedule(etht_) : 0.0;
    row.pck = train_total_ > 0.0 ? train_hits_ / train_total_ : 0.0;
    ensure_finite(row);
    emit(row);
    result.rows.push_back(row);

    const auto val = measure(data_->val(), distill_ ? &val_cache_ : nullptr, epoch, "val");
    ensure_finite(val);
    emit(val);
    result.rows.push_back(val);
    if (val.pck > result.best_val_pck) {
      result.best_val_pck = val.pck;
      result.best = params_.clone();
      result.best_epochs = epoch + 1;
    }
    if (opts.verbose) {
      std::cerr << network_name(net_) << " epoch " << epoch << " loss " << row.loss_total
                << " train pck " << row.pck << " val pck " << val.pck << " tau " << row.tau
                << "\n";
    }
  }
  if (cfg_.epochs == 0) {
    result.best_val_pck =
        evaluate(params_, cfg_, net_, data_->val(), std::array{cfg_.eval_threshold}).aggregate[0];
  }
  result.last = params_.clone();
  if (!opts.out_dir.empty()) {
    save_checkpoint(opts.out_dir / "best.ckpt",
                    make_checkpoint(result.best, echo_config(cfg_),
                                    static_cast<std::uint32_t>(result.best_epochs)));
  }
  return result;
}

// ---------------------------------------------------------------------------

TrainResult train_teacher(const RunConfig& cfg, const synth::Dataset& data,
                          const TrainOptions& opts) {
  RunConfig tcfg = cfg;
  tcfg.epochs = cfg.teacher_epochs;
  Trainer t(tcfg, data, Network::kTeacher);
  return t.fit(opts);
}

TrainResult train_student(const RunConfig& cfg, const synth::Dataset& data,
                          const model::ParamSet* teacher, const TrainOptions& opts) {
  Trainer t(cfg, data, Network::kStudent, teacher);
  return t.fit(opts);
}

model::ParamSet load_teacher(const RunConfig& cfg, const std::filesystem::path& path) {
  auto teacher = build_network(cfg, Network::kTeacher);
  restore(load_checkpoint(path), teacher, model::RoleSet::inference());
  teacher.set_frozen(true);
  return teacher;
}

void write_config_echo(const std::filesystem::path& out_dir, const RunConfig& cfg) {
  std::filesystem::create_directories(out_dir);
  std::ofstream os(out_dir / "config.txt", std::ios::trunc);
  if (!os) throw Error("cannot write " + (out_dir / "config.txt").string());
  os << echo_config(cfg);
}

}  // namespace cdkd::harness
