#pragma once

#include <optional>
#include <string>

#include "ewa/tensor.hpp"

namespace ewa {

// Class-pattern synthetic images: each class gets a fixed random pattern and
// samples are pattern + noise. generator_seed fixes the data itself,
// independently of any training seed. shift > 0 perturbs every class pattern
// by shift * (a second fixed pattern), giving a related but different
// distribution for fine-tuning runs.
struct SyntheticSpec {
  int64_t n_train = 4096;
  int64_t n_eval = 1024;
  int64_t n_classes = 10;
  int64_t image_size = 32;
  int64_t channels = 3;
  uint64_t generator_seed = 7;
  double noise = 1.0;
  double shift = 0.0;
};

struct DatasetSpec {
  std::string kind = "synthetic";  // synthetic | idx | csv
  SyntheticSpec synthetic;
  std::string images_path, labels_path;            // idx
  std::string eval_images_path, eval_labels_path;  // idx, optional
  std::string csv_path, eval_csv_path;             // csv
};

// In-memory labeled image set, pixels stored as float64 [n, C, H, W].
class Dataset {
 public:
  Dataset(std::vector<double> pixels, std::vector<int64_t> labels, int64_t channels,
          int64_t height, int64_t width, int64_t n_classes);

  int64_t size() const { return static_cast<int64_t>(labels_.size()); }
  int64_t channels() const { return channels_; }
  int64_t height() const { return height_; }
  int64_t width() const { return width_; }
  int64_t n_classes() const { return n_classes_; }
  const std::vector<int64_t>& labels() const { return labels_; }
  const std::vector<double>& pixels() const { return pixels_; }

  // Rows picked by index as a [B, C, H, W] tensor plus their labels.
  std::pair<Tensor, std::vector<int64_t>> batch(std::span<const int64_t> indices) const;

 private:
  std::vector<double> pixels_;
  std::vector<int64_t> labels_;
  int64_t channels_, height_, width_, n_classes_;
};

struct DataSplits {
  Dataset train;
  std::optional<Dataset> eval;
};

DataSplits load_dataset(const DatasetSpec& spec);

// CLI shorthand:
//   synthetic[:key=value,...]   keys n,n_eval,classes,size,channels,seed,noise,shift
//   idx:IMAGES,LABELS[,EVAL_IMAGES,EVAL_LABELS]
//   csv:TRAIN[,EVAL]
DatasetSpec parse_dataset_arg(const std::string& arg);

}  // namespace ewa
