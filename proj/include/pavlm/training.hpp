#pragma once

// Model assembly, dataset splits, the phased training schedule, inference,
// evaluation and checkpoints.

#include <zlib.h>

#include <array>
#include <bit>
#include <cmath>
#include <cstdio>
#include <functional>
#include <list>
#include <map>
#include <memory>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "pavlm/autodiff.hpp"
#include "pavlm/binary_io.hpp"
#include "pavlm/dataset.hpp"
#include "pavlm/decoder.hpp"
#include "pavlm/encoder.hpp"
#include "pavlm/errors.hpp"
#include "pavlm/instruction.hpp"
#include "pavlm/layers.hpp"
#include "pavlm/losses.hpp"
#include "pavlm/metrics.hpp"
#include "pavlm/params.hpp"
#include "pavlm/rng.hpp"

namespace pavlm {

// ---------------------------------------------------------------- config

struct TrainConfig {
  std::string encoder = "geometric";  // geometric | baseline
  long long model_dim = 64;
  long long n_layers = 3;
  long long n_heads = 4;
  long long n_groups = 8;
  long long group_size = 64;
  long long propagation_knn = 16;
  long long out_dim = 64;
  long long patch_hidden = 32;
  long long query_dim = 16;
  long long text_dim = 32;
  long long token_dim = 32;
  long long align_dim = 32;
  long long vocab_size = 1024;
  long long classifier_hidden = 64;
  double learning_rate = 1e-3;
  long long align_steps = 100;
  long long label_steps = 100;
  long long affordance_steps = 500;
  bool joint = false;
  long long joint_steps = 1000;
  double lambda = 1.0;
  double margin = 1.0;
  long long batch_size = 8;
  long long seed = 0;
  bool freeze_text = true;
  std::string precision = "float32";  // float32 | float64
  long long log_every = 0;            // 0 logs every step

  void validate() const;
};

// Visits every field as (name, reference). Names are the config-file keys.
template <class C, class F>
void visit_fields(C& c, F&& f) {
  f("encoder", c.encoder);
  f("model_dim", c.model_dim);
  f("n_layers", c.n_layers);
  f("n_heads", c.n_heads);
  f("n_groups", c.n_groups);
  f("group_size", c.group_size);
  f("propagation_knn", c.propagation_knn);
  f("out_dim", c.out_dim);
  f("patch_hidden", c.patch_hidden);
  f("query_dim", c.query_dim);
  f("text_dim", c.text_dim);
  f("token_dim", c.token_dim);
  f("align_dim", c.align_dim);
  f("vocab_size", c.vocab_size);
  f("classifier_hidden", c.classifier_hidden);
  f("learning_rate", c.learning_rate);
  f("align_steps", c.align_steps);
  f("label_steps", c.label_steps);
  f("affordance_steps", c.affordance_steps);
  f("joint", c.joint);
  f("joint_steps", c.joint_steps);
  f("lambda", c.lambda);
  f("margin", c.margin);
  f("batch_size", c.batch_size);
  f("seed", c.seed);
  f("freeze_text", c.freeze_text);
  f("precision", c.precision);
  f("log_every", c.log_every);
}

inline EncoderConfig encoder_config(const TrainConfig& c) {
  EncoderConfig e;
  e.model_dim = c.model_dim;
  e.n_layers = c.n_layers;
  e.n_heads = c.n_heads;
  e.n_groups = c.n_groups;
  e.group_size = c.group_size;
  e.propagation_knn = c.propagation_knn;
  e.out_dim = c.out_dim;
  e.patch_hidden = c.patch_hidden;
  return e;
}

inline void TrainConfig::validate() const {
  if (encoder != "geometric" && encoder != "baseline")
    throw InvalidArgument("config: encoder must be geometric or baseline, got " + encoder);
  if (precision != "float32" && precision != "float64")
    throw InvalidArgument("config: precision must be float32 or float64, got " + precision);
  encoder_config(*this).validate();
  for (long long v : {query_dim, text_dim, token_dim, align_dim, vocab_size, classifier_hidden, batch_size})
    if (v < 1) throw InvalidArgument("config: dimensions and batch_size must be positive");
  for (long long v : {align_steps, label_steps, affordance_steps, joint_steps})
    if (v < 0) throw InvalidArgument("config: step counts must be non-negative");
  if (joint ? joint_steps == 0 : align_steps + label_steps + affordance_steps == 0)
    throw InvalidArgument("config: no training steps requested");
  if (!(lambda >= 0.0)) throw InvalidArgument("config: lambda must be >= 0");
  if (!(learning_rate > 0.0)) throw InvalidArgument("config: learning_rate must be positive");
  if (!(margin >= 0.0)) throw InvalidArgument("config: margin must be >= 0");
  if (log_every < 0) throw InvalidArgument("config: log_every must be >= 0");
}

inline nlohmann::ordered_json config_to_json(const TrainConfig& c) {
  nlohmann::ordered_json j;
  visit_fields(c, [&](const char* name, const auto& v) { j[name] = v; });
  return j;
}

inline TrainConfig config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  visit_fields(c, [&](const char* name, auto& v) {
    if (j.contains(name)) j.at(name).get_to(v);
  });
  return c;
}

// "key = value" lines, one per field; readable by the CLI's --config.
inline std::string config_to_text(const TrainConfig& c) {
  std::string out;
  visit_fields(c, [&](const char* name, const auto& v) {
    using V = std::decay_t<decltype(v)>;
    out += name;
    out += " = ";
    if constexpr (std::is_same_v<V, std::string>)
      out += "\"" + v + "\"";
    else if constexpr (std::is_same_v<V, bool>)
      out += v ? "true" : "false";
    else if constexpr (std::is_same_v<V, double>) {
      char buf[40];
      std::snprintf(buf, sizeof buf, "%.17g", v);
      out += buf;
    } else
      out += std::to_string(v);
    out += "\n";
  });
  return out;
}

// Digest over the fields that fix parameter shapes.
inline std::string config_digest(const TrainConfig& c) {
  nlohmann::ordered_json j;
  for (const char* key : {"encoder", "model_dim", "n_layers", "n_heads", "n_groups", "group_size", "propagation_knn",
                          "out_dim", "patch_hidden", "query_dim", "text_dim", "token_dim", "align_dim", "vocab_size",
                          "classifier_hidden", "precision"})
    j[key] = config_to_json(c)[key];
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a(j.dump())));
  return buf;
}

// ---------------------------------------------------------------- splits

enum class SplitMode { seen, unseen };

inline SplitMode parse_split_mode(const std::string& s) {
  if (s == "seen") return SplitMode::seen;
  if (s == "unseen") return SplitMode::unseen;
  throw InvalidArgument("split must be seen or unseen, got " + s);
}

struct SplitSpec {
  SplitMode mode = SplitMode::seen;
  std::array<int, 3> ratios{8, 1, 1};
  std::vector<std::string> held_out_categories;
  std::uint64_t shuffle_seed = 0;
};

struct Splits {
  std::vector<DatasetRecord> train, val, test;
};

inline Splits make_splits(const std::vector<DatasetRecord>& records, const SplitSpec& spec) {
  if (records.empty()) throw InvalidArgument("make_splits: no records");
  const int ratio_sum = spec.ratios[0] + spec.ratios[1] + spec.ratios[2];
  if (spec.ratios[0] < 0 || spec.ratios[1] < 0 || spec.ratios[2] < 0 || ratio_sum == 0)
    throw InvalidArgument("make_splits: ratios must be non-negative with a positive sum");
  Splits out;
  std::vector<DatasetRecord> pool;
  if (spec.mode == SplitMode::unseen) {
    if (spec.held_out_categories.empty()) throw InvalidArgument("make_splits: unseen mode needs held-out categories");
    for (const auto& h : spec.held_out_categories) {
      if (std::none_of(records.begin(), records.end(), [&](const DatasetRecord& r) { return r.category == h; }))
        throw InvalidArgument("make_splits: held-out category \"" + h + "\" does not occur in the data");
    }
    for (const auto& r : records) {
      const bool held = std::find(spec.held_out_categories.begin(), spec.held_out_categories.end(), r.category) !=
                        spec.held_out_categories.end();
      (held ? out.test : pool).push_back(r);
    }
  } else {
    pool = records;
  }
  Rng rng(spec.shuffle_seed);
  rng.shuffle(pool.begin(), pool.end());
  const auto n = static_cast<double>(pool.size());
  const auto n_val = static_cast<std::size_t>(std::llround(n * spec.ratios[1] / ratio_sum));
  const auto n_test = static_cast<std::size_t>(std::llround(n * spec.ratios[2] / ratio_sum));
  const std::size_t n_train = pool.size() - std::min(pool.size(), n_val + n_test);
  out.train.assign(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(n_train));
  out.val.assign(pool.begin() + static_cast<std::ptrdiff_t>(n_train),
                 pool.begin() + static_cast<std::ptrdiff_t>(std::min(pool.size(), n_train + n_val)));
  out.test.insert(out.test.end(), pool.begin() + static_cast<std::ptrdiff_t>(std::min(pool.size(), n_train + n_val)),
                  pool.end());
  if (spec.mode == SplitMode::unseen) {
    for (const auto* part : {&out.train, &out.val})
      for (const auto& r : *part)
        for (const auto& h : spec.held_out_categories)
          if (r.category == h) throw Error("make_splits: held-out category leaked into train/val: " + h);
  }
  return out;
}

inline std::vector<DatasetRecord> filter_shape(const std::vector<DatasetRecord>& records, ShapeKind kind) {
  std::vector<DatasetRecord> out;
  for (const auto& r : records)
    if (r.shape_kind == kind) out.push_back(r);
  return out;
}

// ---------------------------------------------------------------- model

template <class T>
class Model {
 public:
  explicit Model(const TrainConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(static_cast<std::uint64_t>(cfg_.seed));
    const auto ec = pavlm::encoder_config(cfg_);
    if (cfg_.encoder == "geometric")
      encoder_ = std::make_unique<GeometricEncoder<T>>(store_, ec, rng);
    else
      encoder_ = std::make_unique<BaselineEncoder<T>>(store_, ec, rng);
    text_ = std::make_unique<TextEncoder<T>>(store_, TextEncoderConfig{cfg_.vocab_size, cfg_.token_dim, cfg_.text_dim},
                                             rng);
    classifier_ =
        std::make_unique<MaskLabelClassifier<T>>(store_, cfg_.text_dim, cfg_.out_dim, cfg_.classifier_hidden, rng);
    query_ = std::make_unique<QueryProjector<T>>(store_, cfg_.query_dim, rng);
    DecoderConfig dc;
    dc.embed_dim = cfg_.out_dim;
    dc.query_dim = cfg_.query_dim;
    decoder_ = std::make_unique<AffordanceDecoder<T>>(store_, dc, rng);
    align_point_ = LinearLayer<T>::make(store_, "align.point", cfg_.out_dim, cfg_.align_dim, rng);
    align_text_ = LinearLayer<T>::make(store_, "align.text", cfg_.text_dim, cfg_.align_dim, rng);
  }

  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  const TrainConfig& config() const { return cfg_; }
  EncoderConfig encoder_config() const { return pavlm::encoder_config(cfg_); }
  ParamStore<T>& params() { return store_; }
  const ParamStore<T>& params() const { return store_; }
  const PointEncoder<T>& encoder() const { return *encoder_; }
  const TextEncoder<T>& text() const { return *text_; }
  const MaskLabelClassifier<T>& classifier() const { return *classifier_; }
  const QueryProjector<T>& query() const { return *query_; }
  const AffordanceDecoder<T>& decoder() const { return *decoder_; }
  const LinearLayer<T>& align_point() const { return align_point_; }
  const LinearLayer<T>& align_text() const { return align_text_; }

  bool label_trained = false;

 private:
  TrainConfig cfg_;
  ParamStore<T> store_;
  std::unique_ptr<PointEncoder<T>> encoder_;
  std::unique_ptr<TextEncoder<T>> text_;
  std::unique_ptr<MaskLabelClassifier<T>> classifier_;
  std::unique_ptr<QueryProjector<T>> query_;
  std::unique_ptr<AffordanceDecoder<T>> decoder_;
  LinearLayer<T> align_point_, align_text_;
};

// Geometry keyed by cloud path, built once per cloud.
template <class T>
class GeometryCache {
 public:
  GeometryCache(const Dataset& ds, EncoderConfig cfg) : ds_(ds), cfg_(std::move(cfg)) {}

  const EncoderGeometry<T>& get(const DatasetRecord& r) {
    auto it = cache_.find(r.input);
    if (it == cache_.end())
      it = cache_.emplace(r.input, build_geometry<T>(ds_.load_cloud(r), cfg_)).first;
    return it->second;
  }

 private:
  const Dataset& ds_;
  EncoderConfig cfg_;
  std::map<std::string, EncoderGeometry<T>> cache_;
};

template <class T>
struct Sample {
  const EncoderGeometry<T>* geometry = nullptr;
  std::string object;  // cloud path
  std::string instruct;
  int label = 0;
  Matrix<T> target;               // N x 1 soft ground truth
};

template <class T>
std::vector<Sample<T>> prepare_samples(const Dataset& ds, const std::vector<DatasetRecord>& records,
                                       GeometryCache<T>& cache) {
  std::vector<Sample<T>> out;
  for (const auto& r : records) {
    Sample<T> s;
    s.geometry = &cache.get(r);
    s.object = r.input;
    s.instruct = r.instruct;
    s.label = ds.label_id(r);
    const auto gt = ds.load_ground_truth(r);
    if (static_cast<Index>(gt.scores.size()) != s.geometry->n_points)
      throw FormatError("ground truth length mismatch for " + r.affordance_map);
    s.target.resize(static_cast<Index>(gt.scores.size()), 1);
    for (std::size_t i = 0; i < gt.scores.size(); ++i) s.target(static_cast<Index>(i), 0) = static_cast<T>(gt.scores[i]);
    out.push_back(std::move(s));
  }
  return out;
}

// ---------------------------------------------------------------- training

struct StepLog {
  std::string phase;
  long long step = 0;  // 1-based within the phase
  double total = 0;
  std::optional<double> align, label, affordance;
  double grad_norm = 0;
};

struct TrainOptions {
  std::function<void(const StepLog&)> on_step;
};

struct TrainSummary {
  std::vector<StepLog> log;
  std::string phase;
  long long step = 0;
  std::optional<double> initial_affordance_loss, final_affordance_loss;  // final = mean of the last 10 steps
};

namespace detail {

struct Objectives {
  bool align = false, label = false, affordance = false;
};

template <class T>
StepLog train_step(Model<T>& m, const std::vector<const Sample<T>*>& batch, Objectives obj, Adam<T>& opt,
                   const std::string& phase, long long step) {
  ad::Tape<T> tape;
  const auto& cfg = m.config();
  std::vector<ad::Var<T>> globals, texts, logits, p_ems;
  for (const auto* s : batch) {
    auto p_em = m.encoder().forward(tape, *s->geometry);
    p_ems.push_back(p_em);
    globals.push_back(ad::max_rows(p_em));
    texts.push_back(m.text().encode(tape, s->instruct));
  }
  auto rows = [](const std::vector<ad::Var<T>>& v) {
    return v.size() == 1 ? v[0] : ad::concat_rows(std::span<const ad::Var<T>>(v));
  };
  std::vector<ad::Var<T>> terms;
  StepLog log;
  log.phase = phase;
  log.step = step;
  if (obj.align) {
    loss::ContrastiveOptions co;
    co.margin = cfg.margin;
    auto l = loss::contrastive_batch_average(m.align_point()(tape, rows(globals)), m.align_text()(tape, rows(texts)), co);
    log.align = static_cast<double>(l.scalar());
    terms.push_back(l);
  }
  if (obj.label || obj.affordance) {
    auto lg = m.classifier().logits(tape, rows(texts), rows(globals));
    if (obj.label) {
      std::vector<int> targets;
      for (const auto* s : batch) targets.push_back(s->label);
      auto l = loss::query_loss(lg, targets);
      log.label = static_cast<double>(l.scalar());
      terms.push_back(l);
    }
    if (obj.affordance) {
      auto q = m.query()(tape, lg).q;
      std::vector<DecoderInput<T>> inputs;
      for (std::size_t b = 0; b < batch.size(); ++b)
        inputs.push_back({p_ems[b], batch[b]->geometry->points, ad::slice_rows(q, static_cast<Index>(b), 1)});
      auto maps = m.decoder().decode_batch(tape, inputs, Mode::train);
      std::vector<ad::Var<T>> per;
      for (std::size_t b = 0; b < batch.size(); ++b)
        per.push_back(loss::affordance_loss(maps[b], batch[b]->target, cfg.lambda));
      const std::vector<T> w(per.size(), T(1) / static_cast<T>(per.size()));
      auto l = ad::weighted_sum<T>(per, w);
      log.affordance = static_cast<double>(l.scalar());
      terms.push_back(l);
    }
  }
  const std::vector<T> ones(terms.size(), T(1));
  auto total = terms.size() == 1 ? terms[0] : ad::weighted_sum<T>(terms, ones);
  log.total = static_cast<double>(total.scalar());
  if (!std::isfinite(log.total))
    throw NumericalError("training diverged: non-finite loss in phase " + phase + " at step " + std::to_string(step));
  m.params().zero_grad();
  tape.backward(total);
  log.grad_norm = opt.step(m.params());
  return log;
}

// Seeded reshuffle-per-epoch batch order. A batch never holds two samples
// that share a key (object or instruction text); such samples wait for a
// later batch.
class BatchSampler {
 public:
  BatchSampler(std::vector<std::array<std::string, 2>> keys, std::uint64_t seed) : keys_(std::move(keys)), rng_(seed) {}

  std::vector<std::size_t> next(std::size_t batch) {
    std::vector<std::size_t> out;
    std::set<std::string> objects, texts;
    bool refilled = false;
    while (out.size() < batch) {
      if (queue_.empty()) {
        if (refilled) break;
        refill();
        refilled = true;
      }
      bool took = false;
      for (auto it = queue_.begin(); it != queue_.end() && out.size() < batch;) {
        const auto& k = keys_[*it];
        if (objects.count(k[0]) || texts.count(k[1])) {
          ++it;
          continue;
        }
        objects.insert(k[0]);
        texts.insert(k[1]);
        out.push_back(*it);
        it = queue_.erase(it);
        took = true;
      }
      if (out.size() < batch && !queue_.empty()) {
        if (!took || refilled) break;
        refill();
        refilled = true;
      }
    }
    return out;
  }

 private:
  void refill() {
    std::vector<std::size_t> order(keys_.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    rng_.shuffle(order.begin(), order.end());
    queue_.insert(queue_.end(), order.begin(), order.end());
  }

  std::vector<std::array<std::string, 2>> keys_;
  Rng rng_;
  std::list<std::size_t> queue_;
};

}  // namespace detail

template <class T>
TrainSummary train_model(Model<T>& m, const std::vector<Sample<T>>& samples, const TrainOptions& options = {}) {
  if (samples.empty()) throw InvalidArgument("train: no training records");
  const auto& cfg = m.config();
  TrainSummary summary;
  std::vector<std::array<std::string, 2>> keys;
  for (const auto& s : samples) keys.push_back({s.object, s.instruct});
  detail::BatchSampler sampler(std::move(keys), static_cast<std::uint64_t>(cfg.seed) ^ 0x9e3779b97f4a7c15ULL);
  auto run = [&](const std::string& phase, long long steps, detail::Objectives obj) {
    if (steps <= 0) return;
    typename Adam<T>::Options ao;
    ao.learning_rate = cfg.learning_rate;
    Adam<T> opt(ao);
    for (long long s = 1; s <= steps; ++s) {
      std::vector<const Sample<T>*> batch;
      for (auto i : sampler.next(static_cast<std::size_t>(cfg.batch_size))) batch.push_back(&samples[i]);
      auto log = detail::train_step(m, batch, obj, opt, phase, s);
      if (log.affordance && !summary.initial_affordance_loss) summary.initial_affordance_loss = log.affordance;
      if (options.on_step && (cfg.log_every == 0 || s % cfg.log_every == 0 || s == steps)) options.on_step(log);
      summary.log.push_back(std::move(log));
      summary.phase = phase;
      summary.step = s;
    }
  };
  auto& store = m.params();
  if (cfg.joint) {
    store.unfreeze_all();
    run("joint", cfg.joint_steps, {true, true, true});
    m.label_trained = true;
  } else {
    store.unfreeze_all();
    run("alignment", cfg.align_steps, {true, false, false});
    store.set_frozen("encoder", true);
    run("label", cfg.label_steps, {false, true, false});
    if (cfg.label_steps > 0) m.label_trained = true;
    store.unfreeze_all();
    if (cfg.freeze_text) store.set_frozen("text", true);
    run("affordance", cfg.affordance_steps, {false, false, true});
    store.unfreeze_all();
  }
  std::vector<double> tail;
  for (auto it = summary.log.rbegin(); it != summary.log.rend() && tail.size() < 10; ++it)
    if (it->affordance) tail.push_back(*it->affordance);
  if (!tail.empty()) summary.final_affordance_loss = std::accumulate(tail.begin(), tail.end(), 0.0) / tail.size();
  return summary;
}

// ---------------------------------------------------------------- inference

struct Inference {
  std::vector<double> scores;  // per point, in [0, 1]
  AffordanceLabel label;
  std::vector<double> logits;
  std::optional<std::string> warning;
};

template <class T>
Inference infer_geometry(const Model<T>& m, const EncoderGeometry<T>& geom, const std::string& instruct,
                         const LabelVocabulary& vocab) {
  ad::Tape<T> tape;
  auto p_em = m.encoder().forward(tape, geom);
  auto text = m.text().encode(tape, instruct);
  auto lg = m.classifier().logits(tape, text, ad::max_rows(p_em));
  auto q = m.query()(tape, lg).q;
  auto map = m.decoder().decode(tape, p_em, geom.points, q, Mode::eval, false);
  Inference out;
  out.logits.resize(static_cast<std::size_t>(lg.cols()));
  for (Index j = 0; j < lg.cols(); ++j) out.logits[static_cast<std::size_t>(j)] = static_cast<double>(lg.value()(0, j));
  out.label = vocab.label(argmax_label(out.logits));
  out.scores.resize(static_cast<std::size_t>(map.rows()));
  for (Index i = 0; i < map.rows(); ++i) out.scores[static_cast<std::size_t>(i)] = static_cast<double>(map.value()(i, 0));
  if (!m.label_trained) out.warning = "mask-label classifier was never trained; using its argmax anyway";
  return out;
}

template <class T>
Inference infer(const Model<T>& m, const PointCloud& pc, const std::string& instruct, const LabelVocabulary& vocab) {
  return infer_geometry(m, build_geometry<T>(pc, m.encoder_config()), instruct, vocab);
}

struct EvalOptions {
  double gt_threshold = 0.5;
  std::optional<metrics::PromptVariant> variant;
  std::uint64_t seed = 0;
};

// Runs inference on every record and pools the metrics. Also records the
// mask-label accuracy in metadata["label_accuracy"].
template <class T>
metrics::MetricsReport evaluate(const Model<T>& m, const Dataset& ds, const std::vector<DatasetRecord>& records,
                                const EvalOptions& opt = {}, GeometryCache<T>* cache = nullptr) {
  if (records.empty()) throw InvalidArgument("evaluate: empty split");
  std::optional<GeometryCache<T>> own;
  if (!cache) cache = &own.emplace(ds, m.encoder_config());
  std::vector<metrics::Prediction> preds;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& r = records[i];
    std::string text = r.instruct;
    if (opt.variant) text = metrics::rewrite_instruction(*opt.variant, r.instruct, r.category, r.affordance, opt.seed + i);
    auto res = infer_geometry(m, cache->get(r), text, ds.manifest.vocabulary);
    correct += res.label.name == r.affordance ? 1 : 0;
    const auto gt = ds.load_ground_truth(r);
    metrics::Prediction p;
    p.affordance = r.affordance;
    p.scores = std::move(res.scores);
    p.ground_truth.assign(gt.scores.begin(), gt.scores.end());
    preds.push_back(std::move(p));
  }
  auto report = metrics::evaluate_predictions(preds, opt.gt_threshold);
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", static_cast<double>(correct) / static_cast<double>(records.size()));
  report.metadata["label_accuracy"] = buf;
  report.metadata["records"] = std::to_string(records.size());
  if (opt.variant) report.metadata["variant"] = metrics::to_string(*opt.variant);
  return report;
}

template <class T>
metrics::MetricsReport prompt_ablation(const Model<T>& m, const Dataset& ds, const std::vector<DatasetRecord>& records,
                                       metrics::PromptVariant variant, double gt_threshold = 0.5,
                                       GeometryCache<T>* cache = nullptr) {
  EvalOptions opt;
  opt.gt_threshold = gt_threshold;
  opt.variant = variant;
  return evaluate(m, ds, records, opt, cache);
}

// ---------------------------------------------------------------- checkpoints

inline constexpr std::string_view kCheckpointMagic = "PAVC";
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  TrainConfig config;
  std::string digest;
  std::string phase;
  long long step = 0;
  long long seed = 0;
  bool label_trained = false;
  std::map<std::string, double> metrics;
  std::vector<std::string> vocabulary;  // label names; empty when not recorded
  std::map<std::string, Matrix<double>> params;  // float32 values widen exactly
};

template <class T>
Checkpoint make_checkpoint(const Model<T>& m, const std::string& phase, long long step,
                           std::map<std::string, double> metric_snapshot = {}) {
  Checkpoint c;
  c.config = m.config();
  c.digest = config_digest(c.config);
  c.phase = phase;
  c.step = step;
  c.seed = c.config.seed;
  c.label_trained = m.label_trained;
  c.metrics = std::move(metric_snapshot);
  for (const auto& [name, p] : m.params()) c.params.emplace(name, p.value.template cast<double>());
  return c;
}

inline std::string encode_checkpoint(const Checkpoint& c) {
  nlohmann::ordered_json h;
  h["config"] = config_to_json(c.config);
  h["config_digest"] = c.digest;
  h["phase"] = c.phase;
  h["step"] = c.step;
  h["seed"] = c.seed;
  h["label_trained"] = c.label_trained;
  h["metrics"] = nlohmann::ordered_json::object();
  for (const auto& [k, v] : c.metrics) h["metrics"][k] = v;
  if (!c.vocabulary.empty()) h["vocabulary"] = c.vocabulary;
  const std::string header = h.dump();
  const bool f64 = c.config.precision == "float64";

  std::string out(kCheckpointMagic);
  io::put_u32(out, kCheckpointVersion);
  io::put_u32(out, static_cast<std::uint32_t>(header.size()));
  out += header;
  io::put_u32(out, static_cast<std::uint32_t>(c.params.size()));
  for (const auto& [name, v] : c.params) {
    io::put_u32(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    io::put_u32(out, static_cast<std::uint32_t>(v.rows()));
    io::put_u32(out, static_cast<std::uint32_t>(v.cols()));
    for (Index i = 0; i < v.size(); ++i) {
      if (f64)
        io::put_u64(out, std::bit_cast<std::uint64_t>(v.data()[i]));
      else
        io::put_f32(out, static_cast<float>(v.data()[i]));
    }
  }
  const auto crc = static_cast<std::uint32_t>(
      crc32(0L, reinterpret_cast<const Bytef*>(out.data()), static_cast<uInt>(out.size())));
  io::put_u32(out, crc);
  return out;
}

inline Checkpoint decode_checkpoint(std::string_view data, const std::string& what = "checkpoint") {
  if (data.size() < 4 + 4 + 4 + 4 + 4) throw ChecksumError(what + ": truncated file");
  const std::size_t body = data.size() - 4;
  const auto stored = io::get_u32(data, body);
  const auto crc = static_cast<std::uint32_t>(
      crc32(0L, reinterpret_cast<const Bytef*>(data.data()), static_cast<uInt>(body)));
  if (crc != stored) throw ChecksumError(what + ": checksum mismatch (corrupt or partial file)");
  if (data.substr(0, 4) != kCheckpointMagic) throw FormatError(what + ": bad magic");
  if (io::get_u32(data, 4) != kCheckpointVersion) throw FormatError(what + ": unsupported version");
  std::size_t pos = 8;
  auto need = [&](std::size_t n) {
    if (pos + n > body) throw FormatError(what + ": truncated payload");
  };
  need(4);
  const auto header_len = io::get_u32(data, pos);
  pos += 4;
  need(header_len);
  auto h = nlohmann::json::parse(data.substr(pos, header_len), nullptr, false);
  pos += header_len;
  if (h.is_discarded()) throw FormatError(what + ": malformed header");
  Checkpoint c;
  try {
    c.config = config_from_json(h.at("config"));
    c.digest = h.at("config_digest").get<std::string>();
    c.phase = h.at("phase").get<std::string>();
    c.step = h.at("step").get<long long>();
    c.seed = h.at("seed").get<long long>();
    c.label_trained = h.at("label_trained").get<bool>();
    for (auto it = h.at("metrics").begin(); it != h.at("metrics").end(); ++it) c.metrics[it.key()] = it->get<double>();
    if (h.contains("vocabulary")) c.vocabulary = h.at("vocabulary").get<std::vector<std::string>>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(what + ": " + e.what());
  }
  if (c.digest != config_digest(c.config)) throw FormatError(what + ": header digest does not match its config");
  const bool f64 = c.config.precision == "float64";
  need(4);
  const auto count = io::get_u32(data, pos);
  pos += 4;
  for (std::uint32_t k = 0; k < count; ++k) {
    need(4);
    const auto len = io::get_u32(data, pos);
    pos += 4;
    need(len + 8);
    std::string name(data.substr(pos, len));
    pos += len;
    const auto rows = io::get_u32(data, pos), cols = io::get_u32(data, pos + 4);
    pos += 8;
    const std::size_t width = f64 ? 8 : 4;
    need(static_cast<std::size_t>(rows) * cols * width);
    Matrix<double> v(rows, cols);
    for (Index i = 0; i < v.size(); ++i, pos += width)
      v.data()[i] = f64 ? std::bit_cast<double>(io::get_u64(data, pos)) : static_cast<double>(io::get_f32(data, pos));
    c.params.emplace(std::move(name), std::move(v));
  }
  if (pos != body) throw FormatError(what + ": trailing bytes");
  return c;
}

inline void save_checkpoint(const Checkpoint& c, const fs::path& path) { io::write_file(path, encode_checkpoint(c)); }

// `expected`, when given, must match the stored architecture digest unless
// allow_mismatch is set.
inline Checkpoint load_checkpoint(const fs::path& path, const TrainConfig* expected = nullptr,
                                  bool allow_mismatch = false) {
  auto c = decode_checkpoint(io::read_file(path), path.string());
  if (expected && config_digest(*expected) != c.digest && !allow_mismatch)
    throw ConfigMismatchError(path.string() + ": config digest " + c.digest + " differs from expected " +
                              config_digest(*expected));
  return c;
}

// Rebuilds a model from a checkpoint. Parameters missing from the checkpoint
// or with a different shape are errors.
template <class T>
std::unique_ptr<Model<T>> model_from_checkpoint(const Checkpoint& c) {
  auto m = std::make_unique<Model<T>>(c.config);
  for (auto& [name, p] : m->params()) {
    auto it = c.params.find(name);
    if (it == c.params.end()) throw ConfigMismatchError("checkpoint lacks parameter " + name);
    if (it->second.rows() != p.value.rows() || it->second.cols() != p.value.cols())
      throw ConfigMismatchError("checkpoint parameter " + name + " has the wrong shape");
    p.value = it->second.template cast<T>();
  }
  if (c.params.size() != m->params().size()) throw ConfigMismatchError("checkpoint has unexpected parameters");
  m->label_trained = c.label_trained;
  return m;
}

}  // namespace pavlm
