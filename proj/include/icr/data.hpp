#pragma once

#include <array>
#include <string>
#include <vector>

#include "icr/tensor.hpp"

namespace icr {

struct Dataset {
  Tensor images;  // (N, c, H, W), values in [0, 1]
  std::vector<int> labels;
  std::string name;
  int class_count = 0;
};

struct TransformSpec {
  enum class Interp { kNearest, kBilinear };
  int max_translation = 0;   // pixels per axis, sampled on the integer grid
  float rot_lo = 0.0f;       // degrees
  float rot_hi = 0.0f;
  Interp interpolation = Interp::kBilinear;
  float fill = 0.0f;
};

/**
 * The five test transform levels: level 1 is the identity; levels 2-5 pair
 * a 2-pixel translation with rotation ranges +-30, +-60, +-90, +-180
 * degrees.
 */
struct TestSuiteSpec {
  std::array<TransformSpec, 5> levels;
  static TestSuiteSpec standard();
};

// Big-endian IDX pair (unsigned-byte type 0x08). Image files may be
// (N, H, W) or (N, C, H, W); labels must be one-dimensional and aligned
// with the image count.
Dataset load_idx(const std::string& images_path, const std::string& labels_path);
void write_idx_images(const std::string& path, const Tensor& images);
void write_idx_labels(const std::string& path, const std::vector<int>& labels);

enum class CifarVariant { kCifar10, kCifar100Fine, kCifar100Coarse };
// One binary batch file: per record 1 (CIFAR-10) or 2 (CIFAR-100) label
// bytes followed by 3072 channel-major pixel bytes.
Dataset load_cifar_bin(const std::string& path, CifarVariant variant);
Dataset concat_datasets(const std::vector<Dataset>& parts);

// Anti-aliased disk / square / cross / triangle renderer with position
// jitter; deterministic per seed; exact class balance.
Dataset gen_synthetic(int classes, int per_class, int size, uint64_t seed);

struct TransformSample {
  int du = 0, dv = 0;
  float angle_deg = 0.0f;
};

// Integer translation sampled uniformly in [-max, max]^2 applied first,
// then rotation by a uniform angle about the image centre.
Tensor apply_transform(const Tensor& img, const TransformSpec& spec, Rng& rng,
                       TransformSample* sample = nullptr);

// Level 1 is an untransformed copy; levels 2-5 transform each image once,
// deterministically per seed.
std::array<Dataset, 5> make_test_suites(
    const Dataset& base, const TestSuiteSpec& spec, uint64_t seed,
    std::array<std::vector<TransformSample>, 5>* samples = nullptr);

// Applies `spec` to every image; used for train-time augmentation.
Dataset transform_dataset(const Dataset& base, const TransformSpec& spec, Rng& rng);

// Copy of image `idx` as (c, H, W).
Tensor slice_image(const Tensor& images, int64_t idx);

}  // namespace icr
