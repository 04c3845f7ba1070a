#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "instcal/metrics.hpp"
#include "instcal/segnet.hpp"
#include "instcal/shapes.hpp"

namespace instcal {

class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(std::size_t iteration, const std::string& what)
      : std::runtime_error("training diverged at iteration " + std::to_string(iteration) + ": " + what),
        iteration_(iteration) {}
  std::size_t iteration() const { return iteration_; }

 private:
  std::size_t iteration_;
};

struct TrainConfig {
  double lr = 2.5e-3;
  double poly_power = 0.9;
  std::size_t total_iters = 4000;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  std::size_t batch_size = 1;
  /// Strong augmentation; Identity means weak augmentation only.
  DomainKind augmentation = DomainKind::NetPerturb;
  std::uint64_t seed = 0;

  void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

/// base_lr * (1 - iter/total)^power.
double poly_lr(std::size_t iter, std::size_t total, double base_lr, double power);

/// SGD with momentum and L2 weight decay (decay added to the gradient).
/// Refuses to touch any tensor outside the allowed name set.
class Sgd {
 public:
  Sgd(double momentum, double weight_decay, std::set<std::string> allowed);
  void step(const Graph& g, const std::vector<BoundParam>& params, double lr);

 private:
  double momentum_;
  double weight_decay_;
  std::set<std::string> allowed_;
  std::map<std::string, Tensor> velocity_;
};

struct CurvePoint {
  std::size_t iter;
  double lr;
  double loss;
};

using ProgressFn = std::function<void(const CurvePoint&)>;

/// Random horizontal flip and random up-scaling (1 to 1.25) with a random
/// crop back to the original size; nearest-neighbour for image and mask.
Sample weak_augment(const Sample& s, std::uint64_t seed);

/// Training sample `slot` of iteration `iter`: a fresh source scene with weak
/// augmentation, then the strong augmentation if one is configured.
Sample training_sample(const TrainConfig& config, const SceneConfig& scene, std::uint64_t stream_tag,
                       std::size_t iter, std::size_t slot);

struct TrainResult {
  SegNet model;
  std::vector<CurvePoint> curve;
};

/// The freshly initialized model pretrain() starts from.
SegNet initial_model(const SegNetConfig& model_config, const TrainConfig& config);

/// Trains every parameter of a fresh model with batch statistics.
TrainResult pretrain(const SegNetConfig& model_config, const TrainConfig& config, const SceneConfig& scene = {},
                     const ProgressFn& progress = {});

/// Trains only the calibration parameters of a converted InstCal model.
TrainResult train_instcal(SegNet model, const TrainConfig& config, const SceneConfig& scene = {},
                          const ProgressFn& progress = {});

struct EvalConfig {
  std::size_t n_images = 200;
  std::uint64_t seed = 0;
  std::size_t workers = 1;
  std::size_t n_bins = 15;
  SceneConfig scene;
};

/// Per-image predictor: N x 3 x H x W images to N x Cl x H x W logits.
using Predictor = std::function<Tensor(const Tensor& images)>;

/// Accumulated pixel statistics of one evaluation.
struct EvalAccumulator {
  ConfusionMatrix confusion;
  CalibrationBins bins;

  explicit EvalAccumulator(std::size_t n_classes = kNumClasses, std::size_t n_bins = 15)
      : confusion(n_classes), bins(n_bins) {}
  /// logits N x Cl x H x W; masks.size() == N.
  void add(const Tensor& logits, const std::vector<const LabelMask*>& masks);
  void merge(const EvalAccumulator& other);
};

/// Argmax labels and their softmax probabilities for one image's logits.
struct Prediction {
  LabelMask labels;
  std::vector<double> confidence;
};
Prediction predict(const Tensor& logits, std::size_t index = 0);

/// The i-th evaluation image of a domain: test-split scene i with the domain
/// applied.
Sample evaluation_sample(const EvalConfig& config, const DomainSpec& domain, std::size_t index);

MetricsReport evaluate_domain(const Predictor& predictor, const DomainSpec& domain, const EvalConfig& config,
                              const std::string& method, const std::string& config_hash);

/// One report per domain; the model is only read.
std::vector<MetricsReport> evaluate(const SegNet& model, const std::vector<DomainSpec>& domains,
                                    const EvalConfig& config, const std::string& method,
                                    const std::string& config_hash);

std::vector<double> default_m_values();

struct SweepRow {
  double m;
  MetricsReport report;
};

/// Converts copies of a plain model to manual calibration at each m.
std::vector<SweepRow> sweep_manual_m(const SegNet& plain, const std::vector<DomainSpec>& domains,
                                     const std::vector<double>& m_values, const EvalConfig& config,
                                     const std::string& config_hash);

struct BatchStatsRow {
  std::size_t batch_size;
  double miou;
  double ece;
};

/// Evaluates a mixed stream (image i uses domains[i % D]) in consecutive
/// batches whose calibrated layers share batch statistics. Batch size 1 is
/// ordinary instance-specific evaluation.
std::vector<BatchStatsRow> batch_stats_experiment(const SegNet& model, const std::vector<DomainSpec>& domains,
                                                  const std::vector<std::size_t>& batch_sizes,
                                                  const EvalConfig& config);

/// Adapts copies of the norm affine parameters to one image by minimizing
/// the mean prediction entropy, then returns the adapted logits. The model
/// itself is not modified.
Tensor entropy_minimize(const SegNet& model, const Tensor& images, std::size_t steps, double lr);

/// Runs fn(i) for i in [0, n) on up to `workers` threads.
void parallel_for(std::size_t n, std::size_t workers, const std::function<void(std::size_t)>& fn);

}  // namespace instcal
