#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "json.hpp"

#include "instcal/domains.hpp"

namespace instcal {

/// Mergeable class confusion counts; rows are ground truth.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::size_t n_classes = 0);

  /// Pixels whose truth equals ignore_index are skipped.
  void add(std::span<const int> prediction, std::span<const int> truth, int ignore_index);
  void merge(const ConfusionMatrix& other);

  std::size_t n_classes() const { return n_; }
  std::uint64_t count(std::size_t truth, std::size_t prediction) const { return counts_[truth * n_ + prediction]; }
  std::uint64_t total() const;

  /// Intersection over union per class; empty for classes with zero union.
  std::vector<std::optional<double>> per_class_iou() const;
  /// Mean over classes with nonzero union. Throws if no pixel was counted.
  double miou() const;

 private:
  std::size_t n_;
  std::vector<std::uint64_t> counts_;
};

struct MiouResult {
  double miou = 0;
  std::vector<std::optional<double>> per_class_iou;
};

MiouResult miou(std::span<const int> prediction, std::span<const int> truth, std::size_t n_classes,
                int ignore_index);

/// Equal-width confidence bins; mergeable.
class CalibrationBins {
 public:
  explicit CalibrationBins(std::size_t n_bins = 15);

  void add(double confidence, bool correct);
  void merge(const CalibrationBins& other);

  std::size_t n_bins() const { return count_.size(); }
  std::uint64_t total() const;
  /// Sum over bins of (bin mass) * |accuracy - mean confidence|; 0 when empty.
  double ece() const;

 private:
  std::vector<std::uint64_t> count_;
  std::vector<double> confidence_sum_;
  std::vector<std::uint64_t> correct_;
};

double ece(std::span<const double> confidence, const std::vector<bool>& correct, std::size_t n_bins = 15);

struct MetricsReport {
  std::string method;
  DomainSpec domain;
  std::vector<std::optional<double>> per_class_iou;
  double miou = 0;
  double ece = 0;
  std::size_t n_images = 0;
  std::string config_hash;
};

void to_json(nlohmann::json& j, const MetricsReport& r);
void from_json(const nlohmann::json& j, MetricsReport& r);

}  // namespace instcal
