#pragma once

// Per-affordance AP, ROC AUC, aIoU and summed MSE, pooled over a split.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <iomanip>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "pavlm/errors.hpp"
#include "pavlm/instruction.hpp"
#include "pavlm/rng.hpp"

namespace pavlm::metrics {

inline constexpr int kThresholdCount = 100;

inline double threshold(int k) { return static_cast<double>(k) / 100.0; }

namespace detail {

inline void check_lengths(std::span<const double> scores, std::span<const int> gt, const char* what) {
  if (scores.size() != gt.size()) throw InvalidArgument(std::string(what) + ": scores and labels differ in length");
  for (int g : gt)
    if (g != 0 && g != 1) throw InvalidArgument(std::string(what) + ": labels must be 0 or 1");
}

// Indices sorted by descending score, ties by index.
inline std::vector<std::size_t> descending_order(std::span<const double> scores) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  return order;
}

}  // namespace detail

// Step-sum AP over distinct score values; tied scores enter the curve together.
// nullopt when there are no positives.
inline std::optional<double> average_precision(std::span<const double> scores, std::span<const int> gt) {
  detail::check_lengths(scores, gt, "average_precision");
  const auto positives = std::count(gt.begin(), gt.end(), 1);
  if (positives == 0) return std::nullopt;
  const auto order = detail::descending_order(scores);
  double ap = 0.0, prev_recall = 0.0;
  std::size_t tp = 0, seen = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) {
      tp += static_cast<std::size_t>(gt[order[j]]);
      ++j;
    }
    seen = j;
    const double recall = static_cast<double>(tp) / static_cast<double>(positives);
    const double precision = static_cast<double>(tp) / static_cast<double>(seen);
    ap += (recall - prev_recall) * precision;
    prev_recall = recall;
    i = j;
  }
  return ap;
}

// Mann-Whitney AUC with ties counted as one half. nullopt for single-class input.
inline std::optional<double> roc_auc(std::span<const double> scores, std::span<const int> gt) {
  detail::check_lengths(scores, gt, "roc_auc");
  const auto pos = static_cast<std::size_t>(std::count(gt.begin(), gt.end(), 1));
  const std::size_t neg = gt.size() - pos;
  if (pos == 0 || neg == 0) return std::nullopt;
  auto order = detail::descending_order(scores);
  std::reverse(order.begin(), order.end());  // ascending
  // wins = sum over positives of (#neg strictly below) + 0.5 * (#neg tied)
  double wins = 0.0;
  std::size_t neg_below = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i, p = 0, n = 0;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) {
      (gt[order[j]] ? p : n) += 1;
      ++j;
    }
    wins += static_cast<double>(p) * (static_cast<double>(neg_below) + 0.5 * static_cast<double>(n));
    neg_below += n;
    i = j;
  }
  return wins / (static_cast<double>(pos) * static_cast<double>(neg));
}

struct ThresholdCounts {
  std::array<std::size_t, kThresholdCount> intersection{};
  std::array<std::size_t, kThresholdCount> union_{};
};

// Counts for every threshold t_k = k / 100 with prediction = score > t_k, from
// one sort of the scores.
inline ThresholdCounts threshold_counts(std::span<const double> scores, std::span<const int> gt) {
  detail::check_lengths(scores, gt, "aiou");
  std::vector<double> pos, neg;
  for (std::size_t i = 0; i < scores.size(); ++i) (gt[i] ? pos : neg).push_back(scores[i]);
  std::sort(pos.begin(), pos.end());
  std::sort(neg.begin(), neg.end());
  ThresholdCounts c;
  for (int k = 0; k < kThresholdCount; ++k) {
    const double t = threshold(k);
    const auto tp = static_cast<std::size_t>(pos.end() - std::upper_bound(pos.begin(), pos.end(), t));
    const auto fp = static_cast<std::size_t>(neg.end() - std::upper_bound(neg.begin(), neg.end(), t));
    c.intersection[static_cast<std::size_t>(k)] = tp;
    c.union_[static_cast<std::size_t>(k)] = pos.size() + fp;
  }
  return c;
}

// Mean IoU over the 100 thresholds. Runs of thresholds with equal counts are
// summed as run * tp / union. nullopt when gt has no positives.
inline std::optional<double> aiou(std::span<const double> scores, std::span<const int> gt) {
  const auto c = threshold_counts(scores, gt);
  if (c.union_[0] == 0 || std::count(gt.begin(), gt.end(), 1) == 0) return std::nullopt;
  double total = 0.0;
  for (int k = 0; k < kThresholdCount;) {
    int run = 1;
    while (k + run < kThresholdCount && c.intersection[static_cast<std::size_t>(k + run)] == c.intersection[static_cast<std::size_t>(k)] &&
           c.union_[static_cast<std::size_t>(k + run)] == c.union_[static_cast<std::size_t>(k)])
      ++run;
    total += static_cast<double>(static_cast<std::size_t>(run) * c.intersection[static_cast<std::size_t>(k)]) /
             static_cast<double>(c.union_[static_cast<std::size_t>(k)]);
    k += run;
  }
  return total / kThresholdCount;
}

inline double mean_squared_error(std::span<const double> pred, std::span<const double> target) {
  if (pred.size() != target.size()) throw InvalidArgument("mse: prediction and target differ in length");
  if (pred.empty()) throw InvalidArgument("mse: empty class");
  double s = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) s += (pred[i] - target[i]) * (pred[i] - target[i]);
  return s / static_cast<double>(pred.size());
}

// Per-class mean squared error, summed over classes.
inline double mse_summed(const std::vector<std::vector<double>>& preds, const std::vector<std::vector<double>>& targets) {
  if (preds.size() != targets.size()) throw InvalidArgument("mse_summed: class counts differ");
  double total = 0.0;
  for (std::size_t c = 0; c < preds.size(); ++c) total += mean_squared_error(preds[c], targets[c]);
  return total;
}

inline std::vector<int> binarize(std::span<const double> soft, double gt_threshold) {
  std::vector<int> out(soft.size());
  for (std::size_t i = 0; i < soft.size(); ++i) out[i] = soft[i] >= gt_threshold ? 1 : 0;
  return out;
}

// ---------------------------------------------------------------- report

struct ClassMetrics {
  std::string affordance;
  std::size_t points = 0;
  std::size_t positives = 0;
  std::optional<double> ap, auc, aiou;
  double mse = 0.0;
};

struct MetricsReport {
  std::vector<ClassMetrics> classes;
  std::optional<double> map, mean_auc, mean_aiou;  // unscaled
  double mse_sum = 0.0;
  std::vector<std::string> notes;
  std::map<std::string, std::string> metadata;  // split, shape_kind, checkpoint, variant, ...

  static double scaled(double v) { return std::round(v * 1000.0) / 10.0; }

  std::string table() const;
  std::string key_values() const;
};

// One predicted map with its soft ground truth and label.
struct Prediction {
  std::string affordance;
  std::vector<double> scores;
  std::vector<double> ground_truth;
};

// Pools points per affordance across the split; ground truth is binarized at
// gt_threshold (score >= threshold) for AP, AUC and aIoU, soft for MSE.
inline MetricsReport evaluate_predictions(const std::vector<Prediction>& predictions, double gt_threshold = 0.5) {
  if (predictions.empty()) throw InvalidArgument("evaluate: empty split");
  std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> pooled;
  std::vector<std::string> order;
  for (const auto& p : predictions) {
    if (p.scores.size() != p.ground_truth.size())
      throw InvalidArgument("evaluate: prediction and ground truth differ in length for " + p.affordance);
    auto [it, fresh] = pooled.try_emplace(p.affordance);
    if (fresh) order.push_back(p.affordance);
    it->second.first.insert(it->second.first.end(), p.scores.begin(), p.scores.end());
    it->second.second.insert(it->second.second.end(), p.ground_truth.begin(), p.ground_truth.end());
  }
  std::sort(order.begin(), order.end());
  MetricsReport r;
  double ap_sum = 0, auc_sum = 0, iou_sum = 0;
  int ap_n = 0, auc_n = 0, iou_n = 0;
  for (const auto& name : order) {
    const auto& [scores, soft] = pooled[name];
    const auto bin = binarize(soft, gt_threshold);
    ClassMetrics c;
    c.affordance = name;
    c.points = scores.size();
    c.positives = static_cast<std::size_t>(std::count(bin.begin(), bin.end(), 1));
    c.ap = average_precision(scores, bin);
    c.auc = roc_auc(scores, bin);
    c.aiou = aiou(scores, bin);
    c.mse = mean_squared_error(scores, soft);
    if (c.ap) ap_sum += *c.ap, ++ap_n;
    else r.notes.push_back(name + ": AP and aIoU undefined (no positive points)");
    if (c.auc) auc_sum += *c.auc, ++auc_n;
    else r.notes.push_back(name + ": AUC undefined (single-class ground truth)");
    if (c.aiou) iou_sum += *c.aiou, ++iou_n;
    r.mse_sum += c.mse;
    r.classes.push_back(std::move(c));
  }
  if (ap_n) r.map = ap_sum / ap_n;
  if (auc_n) r.mean_auc = auc_sum / auc_n;
  if (iou_n) r.mean_aiou = iou_sum / iou_n;
  r.metadata["gt_threshold"] = [&] {
    std::ostringstream s;
    s << gt_threshold;
    return s.str();
  }();
  return r;
}

namespace detail {
inline std::string fmt_scaled(const std::optional<double>& v) {
  if (!v) return "n/a";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.1f", MetricsReport::scaled(*v));
  return buf;
}
inline std::string fmt_scaled(double v) { return fmt_scaled(std::optional<double>(v)); }
}  // namespace detail

inline std::string MetricsReport::table() const {
  std::ostringstream s;
  for (const auto& [k, v] : metadata) s << "# " << k << ": " << v << "\n";
  s << std::left << std::setw(14) << "affordance" << std::right << std::setw(9) << "points" << std::setw(9) << "pos"
    << std::setw(8) << "AP" << std::setw(8) << "AUC" << std::setw(8) << "aIoU" << std::setw(8) << "MSE" << "\n";
  for (const auto& c : classes)
    s << std::left << std::setw(14) << c.affordance << std::right << std::setw(9) << c.points << std::setw(9)
      << c.positives << std::setw(8) << detail::fmt_scaled(c.ap) << std::setw(8) << detail::fmt_scaled(c.auc)
      << std::setw(8) << detail::fmt_scaled(c.aiou) << std::setw(8) << detail::fmt_scaled(c.mse) << "\n";
  s << std::left << std::setw(32) << "mean / sum" << std::right << std::setw(8) << detail::fmt_scaled(map)
    << std::setw(8) << detail::fmt_scaled(mean_auc) << std::setw(8) << detail::fmt_scaled(mean_aiou) << std::setw(8)
    << detail::fmt_scaled(mse_sum) << "\n";
  for (const auto& n : notes) s << "note: " << n << "\n";
  return s.str();
}

inline std::string MetricsReport::key_values() const {
  std::ostringstream s;
  for (const auto& [k, v] : metadata) s << "meta." << k << " = " << v << "\n";
  s << "mAP = " << detail::fmt_scaled(map) << "\n";
  s << "AUC = " << detail::fmt_scaled(mean_auc) << "\n";
  s << "aIoU = " << detail::fmt_scaled(mean_aiou) << "\n";
  s << "MSE = " << detail::fmt_scaled(mse_sum) << "\n";
  for (const auto& c : classes) {
    s << "class." << c.affordance << ".AP = " << detail::fmt_scaled(c.ap) << "\n";
    s << "class." << c.affordance << ".AUC = " << detail::fmt_scaled(c.auc) << "\n";
    s << "class." << c.affordance << ".aIoU = " << detail::fmt_scaled(c.aiou) << "\n";
    s << "class." << c.affordance << ".MSE = " << detail::fmt_scaled(c.mse) << "\n";
  }
  s << "undefined_count = " << notes.size() << "\n";
  return s.str();
}

// ---------------------------------------------------------------- prompts

enum class PromptVariant { hi, action, object_action, full_question, augmented };

inline PromptVariant parse_prompt_variant(const std::string& s) {
  if (s == "hi") return PromptVariant::hi;
  if (s == "action") return PromptVariant::action;
  if (s == "object_action") return PromptVariant::object_action;
  if (s == "full_question") return PromptVariant::full_question;
  if (s == "augmented") return PromptVariant::augmented;
  throw InvalidArgument("unknown prompt variant: " + s);
}

inline std::string to_string(PromptVariant v) {
  switch (v) {
    case PromptVariant::hi: return "hi";
    case PromptVariant::action: return "action";
    case PromptVariant::object_action: return "object_action";
    case PromptVariant::full_question: return "full_question";
    case PromptVariant::augmented: return "augmented";
  }
  return "?";
}

// Instruction text for a record under a prompt variant. `current` is returned
// unchanged for full_question when it already is the seed question.
inline std::string rewrite_instruction(PromptVariant v, const std::string& current, const std::string& object_name,
                                       const std::string& affordance, std::uint64_t seed = 0) {
  switch (v) {
    case PromptVariant::hi: return "Hi";
    case PromptVariant::action: return affordance;
    case PromptVariant::object_action: return object_name + " " + affordance;
    case PromptVariant::full_question: {
      const auto q = seed_question(object_name, affordance);
      return current == q ? current : q;
    }
    case PromptVariant::augmented: return rule_paraphrase(object_name, affordance, 1, seed).at(0).instruct_text;
  }
  return current;
}

}  // namespace pavlm::metrics
