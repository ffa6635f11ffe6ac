#include "mamt4/loss_metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>

namespace mamt4 {

void FocalConfig::validate() const {
  if (!(alpha1 >= 0.0 && alpha1 <= 1.0)) throw Error(ErrorKind::InvalidConfig, "alpha1 must lie in [0, 1]");
  if (!(gamma >= 0.0)) throw Error(ErrorKind::InvalidConfig, "gamma must be >= 0");
}

FocalConfig alpha_from_counts(std::size_t n_cancer, std::size_t n_total, double gamma) {
  if (n_cancer == 0 || n_cancer >= n_total) {
    throw Error(ErrorKind::InvalidCounts, "need 0 < N_c < N, got N_c=" + std::to_string(n_cancer) +
                                              " N=" + std::to_string(n_total));
  }
  return {1.0 - static_cast<double>(n_cancer) / static_cast<double>(n_total), gamma};
}

double sigmoid_value(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

namespace {

struct FocalTerms {
  double pt;
  double alpha;
  bool clamped;
};

FocalTerms focal_terms(double logit, Label y, const FocalConfig& cfg) {
  const double p = sigmoid_value(logit);
  double pt = y == Label::Cancer ? p : 1.0 - p;
  bool clamped = false;
  if (pt < kProbabilityClamp) {
    pt = kProbabilityClamp;
    clamped = true;
  } else if (pt > 1.0 - kProbabilityClamp) {
    pt = 1.0 - kProbabilityClamp;
    clamped = true;
  }
  return {pt, y == Label::Cancer ? cfg.alpha1 : cfg.alpha0(), clamped};
}

}  // namespace

double focal_loss_value(double logit, Label y, const FocalConfig& cfg) {
  const auto t = focal_terms(logit, y, cfg);
  return -t.alpha * std::pow(1.0 - t.pt, cfg.gamma) * std::log(t.pt);
}

double focal_loss_derivative(double logit, Label y, const FocalConfig& cfg) {
  const auto t = focal_terms(logit, y, cfg);
  if (t.clamped) return 0.0;
  const double q = 1.0 - t.pt;
  // dFL/dpt = -alpha [ -gamma q^(gamma-1) log pt + q^gamma / pt ]
  const double focus = cfg.gamma == 0.0 ? 0.0 : cfg.gamma * std::pow(q, cfg.gamma - 1.0) * std::log(t.pt);
  const double dloss_dpt = -t.alpha * (-focus + std::pow(q, cfg.gamma) / t.pt);
  // pt = sigmoid(s * logit) with s = +1 for cancer, -1 otherwise.
  const double s = y == Label::Cancer ? 1.0 : -1.0;
  return dloss_dpt * s * t.pt * q;
}

Tensor focal_loss(const Tensor& logits, std::span<const Label> labels, const FocalConfig& cfg) {
  cfg.validate();
  if (logits.numel() != labels.size() || labels.empty()) {
    throw Error(ErrorKind::ShapeMismatch, "focal_loss needs one label per logit");
  }
  const std::size_t n = labels.size();
  std::vector<Label> ys(labels.begin(), labels.end());
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) total += focal_loss_value(logits[i], ys[i], cfg);
  const double inv_n = 1.0 / static_cast<double>(n);
  return detail::record(
      {1}, {total * inv_n}, {logits},
      [logits, ys, cfg, inv_n](std::span<const double> g) {
        auto gl = detail::grad_sink(logits);
        for (std::size_t i = 0; i < gl.size(); ++i) {
          gl[i] += g[0] * inv_n * focal_loss_derivative(logits[i], ys[i], cfg);
        }
      },
      "focal_loss");
}

Tensor bce_with_logits(const Tensor& logits, std::span<const double> targets) {
  if (logits.numel() != targets.size() || targets.empty()) {
    throw Error(ErrorKind::ShapeMismatch, "bce_with_logits needs one target per logit");
  }
  const std::size_t n = targets.size();
  std::vector<double> t(targets.begin(), targets.end());
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double z = logits[i];
    total += std::max(z, 0.0) - z * t[i] + std::log1p(std::exp(-std::abs(z)));
  }
  const double inv_n = 1.0 / static_cast<double>(n);
  return detail::record(
      {1}, {total * inv_n}, {logits},
      [logits, t, inv_n](std::span<const double> g) {
        auto gl = detail::grad_sink(logits);
        for (std::size_t i = 0; i < gl.size(); ++i) gl[i] += g[0] * inv_n * (sigmoid_value(logits[i]) - t[i]);
      },
      "bce_with_logits");
}

double roc_auc(std::span<const double> scores, std::span<const Label> labels) {
  if (scores.size() != labels.size()) throw Error(ErrorKind::ShapeMismatch, "roc_auc needs one label per score");
  const std::size_t n = scores.size();
  std::size_t n_pos = 0;
  for (auto l : labels) n_pos += l == Label::Cancer ? 1 : 0;
  const std::size_t n_neg = n - n_pos;
  if (n_pos == 0 || n_neg == 0) throw Error(ErrorKind::UndefinedMetric, "ROC-AUC needs both classes");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  // Mid-ranks (1-based) are half-integers, so the rank sum is exact.
  double rank_sum_pos = 0.0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
    const double mid = 0.5 * static_cast<double>(i + 1 + j + 1);
    for (std::size_t r = i; r <= j; ++r) {
      if (labels[order[r]] == Label::Cancer) rank_sum_pos += mid;
    }
    i = j + 1;
  }
  const double u = rank_sum_pos - 0.5 * static_cast<double>(n_pos) * static_cast<double>(n_pos + 1);
  return u / (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

double f1_from_counts(std::size_t tp, std::size_t fp, std::size_t fn) {
  const std::size_t denom = 2 * tp + fp + fn;
  if (tp == 0 || denom == 0) return 0.0;
  // 2PR/(P+R) simplifies to 2TP/(2TP+FP+FN).
  return 2.0 * static_cast<double>(tp) / static_cast<double>(denom);
}

F1Scores f1_scores(std::span<const double> probabilities, std::span<const Label> labels, double threshold) {
  if (probabilities.size() != labels.size()) throw Error(ErrorKind::ShapeMismatch, "one label per prediction");
  F1Scores out;
  auto& c = out.confusion;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const bool predicted = probabilities[i] >= threshold;
    const bool actual = labels[i] == Label::Cancer;
    if (predicted && actual) ++c.tp;
    else if (predicted && !actual) ++c.fp;
    else if (!predicted && actual) ++c.fn;
    else ++c.tn;
  }
  out.f1_cancer = f1_from_counts(c.tp, c.fp, c.fn);
  out.f1_normal = f1_from_counts(c.tn, c.fn, c.fp);
  out.f1_macro = (out.f1_cancer + out.f1_normal) / 2.0;
  return out;
}

MetricsReport make_report(std::span<const double> probabilities, std::span<const Label> labels, double threshold) {
  MetricsReport r;
  r.roc_auc = roc_auc(probabilities, labels);
  const auto f1 = f1_scores(probabilities, labels, threshold);
  r.f1 = f1.f1_cancer;
  r.f1_normal = f1.f1_normal;
  r.f1_macro = f1.f1_macro;
  r.tp = f1.confusion.tp;
  r.fp = f1.confusion.fp;
  r.tn = f1.confusion.tn;
  r.fn = f1.confusion.fn;
  r.threshold = threshold;
  return r;
}

std::string MetricsReport::to_key_value() const {
  char buf[512];
  std::snprintf(buf, sizeof(buf),
                "roc_auc=%.17g\nf1=%.17g\nf1_normal=%.17g\nf1_macro=%.17g\ntp=%zu\nfp=%zu\ntn=%zu\nfn=%zu\n"
                "threshold=%.17g\n",
                roc_auc, f1, f1_normal, f1_macro, tp, fp, tn, fn, threshold);
  return buf;
}

MetricsReport MetricsReport::from_key_value(const std::string& text) {
  MetricsReport r;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    const std::string key = line.substr(0, eq);
    const std::string value = line.substr(eq + 1);
    try {
      if (key == "roc_auc") r.roc_auc = std::stod(value);
      else if (key == "f1") r.f1 = std::stod(value);
      else if (key == "f1_normal") r.f1_normal = std::stod(value);
      else if (key == "f1_macro") r.f1_macro = std::stod(value);
      else if (key == "tp") r.tp = std::stoul(value);
      else if (key == "fp") r.fp = std::stoul(value);
      else if (key == "tn") r.tn = std::stoul(value);
      else if (key == "fn") r.fn = std::stoul(value);
      else if (key == "threshold") r.threshold = std::stod(value);
    } catch (const std::exception&) {
      throw Error(ErrorKind::ParseError, "bad metrics value for " + key + ": " + value);
    }
  }
  return r;
}

MeanStd mean_std(std::span<const double> values) {
  MeanStd out;
  if (values.empty()) return out;
  const double n = static_cast<double>(values.size());
  out.mean = std::accumulate(values.begin(), values.end(), 0.0) / n;
  if (values.size() > 1) {
    double ss = 0.0;
    for (double v : values) ss += (v - out.mean) * (v - out.mean);
    out.std = std::sqrt(ss / (n - 1.0));
  }
  return out;
}

std::string format_mean_std(std::span<const double> fractions) {
  const auto ms = mean_std(fractions);
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.1f ± %.1f", 100.0 * ms.mean, 100.0 * ms.std);
  return buf;
}

}  // namespace mamt4
