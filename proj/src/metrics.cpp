#include "instcal/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "instcal/tensor.hpp"

namespace instcal {

ConfusionMatrix::ConfusionMatrix(std::size_t n_classes) : n_(n_classes), counts_(n_classes * n_classes, 0) {}

void ConfusionMatrix::add(std::span<const int> prediction, std::span<const int> truth, int ignore_index) {
  if (prediction.size() != truth.size()) {
    throw DimensionError("prediction has " + std::to_string(prediction.size()) + " pixels, truth has " +
                         std::to_string(truth.size()));
  }
  const int n = static_cast<int>(n_);
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (truth[i] == ignore_index) continue;
    if (truth[i] < 0 || truth[i] >= n) throw std::invalid_argument("truth label out of range at pixel " + std::to_string(i));
    if (prediction[i] < 0 || prediction[i] >= n) {
      throw std::invalid_argument("predicted label out of range at pixel " + std::to_string(i));
    }
    ++counts_[static_cast<std::size_t>(truth[i]) * n_ + static_cast<std::size_t>(prediction[i])];
  }
}

void ConfusionMatrix::merge(const ConfusionMatrix& other) {
  if (other.n_ != n_) throw DimensionError("cannot merge confusion matrices of different sizes");
  for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
}

std::uint64_t ConfusionMatrix::total() const { return std::accumulate(counts_.begin(), counts_.end(), std::uint64_t{0}); }

std::vector<std::optional<double>> ConfusionMatrix::per_class_iou() const {
  std::vector<std::optional<double>> iou(n_);
  for (std::size_t c = 0; c < n_; ++c) {
    std::uint64_t row = 0, col = 0;
    for (std::size_t k = 0; k < n_; ++k) {
      row += count(c, k);
      col += count(k, c);
    }
    const std::uint64_t inter = count(c, c);
    const std::uint64_t uni = row + col - inter;
    if (uni > 0) iou[c] = static_cast<double>(inter) / static_cast<double>(uni);
  }
  return iou;
}

double ConfusionMatrix::miou() const {
  if (total() == 0) throw std::invalid_argument("mIoU undefined: no evaluated pixels (all ignored?)");
  double sum = 0;
  std::size_t valid = 0;
  for (const auto& v : per_class_iou()) {
    if (!v) continue;
    sum += *v;
    ++valid;
  }
  return sum / static_cast<double>(valid);
}

MiouResult miou(std::span<const int> prediction, std::span<const int> truth, std::size_t n_classes,
                int ignore_index) {
  ConfusionMatrix cm(n_classes);
  cm.add(prediction, truth, ignore_index);
  return MiouResult{cm.miou(), cm.per_class_iou()};
}

CalibrationBins::CalibrationBins(std::size_t n_bins) : count_(n_bins, 0), confidence_sum_(n_bins, 0), correct_(n_bins, 0) {
  if (n_bins == 0) throw std::invalid_argument("need at least one calibration bin");
}

void CalibrationBins::add(double confidence, bool correct) {
  if (!(confidence >= 0 && confidence <= 1)) throw std::invalid_argument("confidence outside [0,1]");
  const std::size_t n = count_.size();
  const std::size_t b = std::min(static_cast<std::size_t>(confidence * static_cast<double>(n)), n - 1);
  ++count_[b];
  confidence_sum_[b] += confidence;
  correct_[b] += correct ? 1 : 0;
}

void CalibrationBins::merge(const CalibrationBins& other) {
  if (other.n_bins() != n_bins()) throw DimensionError("cannot merge calibration bins of different sizes");
  for (std::size_t b = 0; b < count_.size(); ++b) {
    count_[b] += other.count_[b];
    confidence_sum_[b] += other.confidence_sum_[b];
    correct_[b] += other.correct_[b];
  }
}

std::uint64_t CalibrationBins::total() const { return std::accumulate(count_.begin(), count_.end(), std::uint64_t{0}); }

double CalibrationBins::ece() const {
  const std::uint64_t n = total();
  if (n == 0) return 0;
  double gap = 0;
  for (std::size_t b = 0; b < count_.size(); ++b) {
    if (count_[b] == 0) continue;
    const auto cb = static_cast<double>(count_[b]);
    const double accuracy = static_cast<double>(correct_[b]) / cb;
    const double confidence = confidence_sum_[b] / cb;
    gap += cb / static_cast<double>(n) * std::abs(accuracy - confidence);
  }
  return gap;
}

double ece(std::span<const double> confidence, const std::vector<bool>& correct, std::size_t n_bins) {
  if (confidence.size() != correct.size()) throw DimensionError("confidence and correctness lengths differ");
  CalibrationBins bins(n_bins);
  for (std::size_t i = 0; i < confidence.size(); ++i) bins.add(confidence[i], correct[i]);
  return bins.ece();
}

void to_json(nlohmann::json& j, const MetricsReport& r) {
  nlohmann::json iou = nlohmann::json::array();
  for (const auto& v : r.per_class_iou) iou.push_back(v ? nlohmann::json(*v) : nlohmann::json(nullptr));
  j = {{"method", r.method},   {"domain", r.domain},         {"per_class_iou", iou},
       {"miou", r.miou},       {"ece", r.ece},               {"n_images", r.n_images},
       {"config_hash", r.config_hash}};
}

void from_json(const nlohmann::json& j, MetricsReport& r) {
  r.method = j.at("method").get<std::string>();
  r.domain = j.at("domain").get<DomainSpec>();
  r.per_class_iou.clear();
  for (const auto& v : j.at("per_class_iou")) {
    r.per_class_iou.push_back(v.is_null() ? std::nullopt : std::optional<double>(v.get<double>()));
  }
  r.miou = j.at("miou").get<double>();
  r.ece = j.at("ece").get<double>();
  r.n_images = j.at("n_images").get<std::size_t>();
  r.config_hash = j.at("config_hash").get<std::string>();
}

}  // namespace instcal
