#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "mamt4/tensor.hpp"

namespace mamt4 {

enum class Label { Normal = 0, Cancer = 1 };

// alpha1 weights the cancer class, alpha0 = 1 - alpha1 the normal class.
struct FocalConfig {
  double alpha1 = 0.95;
  double gamma = 2.0;

  double alpha0() const { return 1.0 - alpha1; }
  void validate() const;
};

// alpha1 = 1 - n_cancer / n_total
FocalConfig alpha_from_counts(std::size_t n_cancer, std::size_t n_total, double gamma = 2.0);

inline constexpr double kProbabilityClamp = 1e-7;

// -alpha_t (1 - p_t)^gamma log(p_t) with p = sigmoid(logit); p_t = p for
// cancer and 1 - p otherwise, clamped to [1e-7, 1 - 1e-7].
double focal_loss_value(double logit, Label y, const FocalConfig& cfg);
// d(focal_loss_value)/d(logit)
double focal_loss_derivative(double logit, Label y, const FocalConfig& cfg);

// Mean focal loss over logits (any shape, one logit per label).
Tensor focal_loss(const Tensor& logits, std::span<const Label> labels, const FocalConfig& cfg);
inline Tensor focal_loss(const Tensor& logit, Label y, const FocalConfig& cfg) {
  return focal_loss(logit, std::span<const Label>(&y, 1), cfg);
}

// Mean per-element binary cross-entropy on logits; targets in [0, 1].
Tensor bce_with_logits(const Tensor& logits, std::span<const double> targets);

double sigmoid_value(double x);

// Mann-Whitney rank statistic: the fraction of (cancer, normal) pairs in
// which the cancer score is higher, ties counting one half.
double roc_auc(std::span<const double> scores, std::span<const Label> labels);

struct Confusion {
  std::size_t tp = 0;
  std::size_t fp = 0;
  std::size_t tn = 0;
  std::size_t fn = 0;
  std::size_t total() const { return tp + fp + tn + fn; }
};

struct F1Scores {
  double f1_cancer = 0.0;
  double f1_normal = 0.0;
  double f1_macro = 0.0;
  Confusion confusion;
};

// An image is predicted cancer when its probability is >= threshold.
F1Scores f1_scores(std::span<const double> probabilities, std::span<const Label> labels, double threshold = 0.5);
// F1 from counts, cancer as positive; 0 when a denominator vanishes.
double f1_from_counts(std::size_t tp, std::size_t fp, std::size_t fn);

struct MetricsReport {
  double roc_auc = 0.0;
  double f1 = 0.0;
  double f1_normal = 0.0;
  double f1_macro = 0.0;
  std::size_t tp = 0;
  std::size_t fp = 0;
  std::size_t tn = 0;
  std::size_t fn = 0;
  double threshold = 0.5;

  std::string to_key_value() const;
  static MetricsReport from_key_value(const std::string& text);
  bool operator==(const MetricsReport&) const = default;
};

MetricsReport make_report(std::span<const double> probabilities, std::span<const Label> labels,
                          double threshold = 0.5);

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation (n - 1); 0 for one value
};

MeanStd mean_std(std::span<const double> values);
// Percent form with one decimal, e.g. "84.0 ± 1.7" for fractions 0.840/0.017.
std::string format_mean_std(std::span<const double> fractions);

}  // namespace mamt4
