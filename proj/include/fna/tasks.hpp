#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "fna/arch.hpp"
#include "fna/network.hpp"
#include "fna/tensor.hpp"

namespace fna {

enum class TaskKind { kClassification, kDense };

// Generator families:
//   stripes         classification; class = stripe orientation
//   orient_regions  dense; four quadrants of noisy oriented stripes with
//                   period 2 * context_radius, label = quadrant orientation
//   offset_sign     dense, 2 classes; label(y, x) = clean pixel at
//                   (y, (x + context_radius) mod W) is positive
//   constant        dense; every pixel is class 0
struct TaskSpec {
  std::string family = "stripes";
  int classes = 4;
  double noise = 0.0;
  int height = 16;
  int width = 16;
  std::size_t size = 512;
  std::uint64_t seed = 0;
  int context_radius = 5;
  double val_fraction = 0.2;
  double test_fraction = 0.2;
};

TaskKind family_kind(const std::string& family);
void validate_task_spec(const TaskSpec& spec);

nlohmann::ordered_json task_spec_to_json(const TaskSpec& spec);
// Missing keys keep their defaults; unknown keys are a ConfigError.
TaskSpec task_spec_from_json(const nlohmann::json& doc);

struct Dataset {
  TaskSpec spec;
  TaskKind kind = TaskKind::kClassification;
  std::vector<double> images;  // [size, 1, H, W]
  std::vector<int> labels;     // [size] or [size, H, W]

  std::size_t size() const { return spec.size; }
  std::size_t pixels() const { return static_cast<std::size_t>(spec.height) * spec.width; }
  std::size_t labels_per_sample() const { return kind == TaskKind::kDense ? pixels() : 1; }
};

// Pure functions of the spec (seed included).
Dataset make_seed_task(const TaskSpec& spec);
Dataset make_target_task(const TaskSpec& spec);
Dataset make_task(const TaskSpec& spec);

// Disjoint index ranges: train first, then validation, then test.
struct Splits {
  std::vector<std::size_t> train;
  std::vector<std::size_t> val;
  std::vector<std::size_t> test;
};
Splits split_dataset(const Dataset& data);

struct Batch {
  Tensor x;
  std::vector<int> labels;
};
Batch make_batch(const Dataset& data, std::span<const std::size_t> indices);

// Best achievable pixel accuracy on offset_sign for a network whose receptive
// field reaches `radius` pixels from the output pixel.
double offset_sign_accuracy_bound(const TaskSpec& spec, int radius);
// Receptive-field radius (in input pixels) of one output pixel.
int receptive_radius(const ArchDescriptor& arch);

struct MetricReport {
  TaskKind kind = TaskKind::kClassification;
  int classes = 0;
  double accuracy = 0.0;
  double miou = 0.0;
  std::vector<double> class_iou;  // NaN where the class is absent from truth and prediction
  std::vector<std::vector<long long>> confusion;  // [truth][prediction]

  // mIOU for dense tasks, accuracy for classification.
  double primary() const { return kind == TaskKind::kDense ? miou : accuracy; }
  nlohmann::ordered_json to_json() const;
};

MetricReport score_predictions(std::span<const int> truth, std::span<const int> prediction, int classes,
                               TaskKind kind);
// Eval-mode forward over `indices` in fixed-size batches.
MetricReport evaluate(const ArchDescriptor& arch, ParamMap& params, const Dataset& data,
                      std::span<const std::size_t> indices, std::size_t batch_size = 64);

// Portable grayscale dumps for inspection. Images map [-2, 2] onto [0, 255];
// label maps spread classes over the grey range.
void write_image_pgm(const std::filesystem::path& path, const Dataset& data, std::size_t index);
void write_label_pgm(const std::filesystem::path& path, const Dataset& data, std::size_t index);

}  // namespace fna
