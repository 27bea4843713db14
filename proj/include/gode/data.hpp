#pragma once

// Image classification datasets. Pixels are kept as the source bytes and
// converted to [0, 1] tensors (byte / 255) when a batch is assembled.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "gode/tensor.hpp"

namespace gode {

enum class Split { train, test };

Split parse_split(std::string_view name);
std::string_view to_string(Split split);

struct Dataset {
  std::vector<std::uint8_t> pixels;  // [N, C, H, W] row-major
  std::vector<int> labels;
  std::size_t channels = 1;
  std::size_t height = 28;
  std::size_t width = 28;
  Split split = Split::train;

  std::size_t size() const { return labels.size(); }
  std::size_t image_size() const { return channels * height * width; }
  std::span<const std::uint8_t> image(std::size_t i) const {
    return std::span(pixels).subspan(i * image_size(), image_size());
  }
  /// Throws FormatError when sizes disagree or a label is outside 0..9.
  void validate() const;

  /// The listed samples as a [B, C, H, W] tensor with values in [0, 1].
  template <typename T>
  Tensor<T> images(std::span<const std::size_t> indices) const;
  /// Every sample, in order.
  template <typename T>
  Tensor<T> images() const;
  std::vector<int> labels_of(std::span<const std::size_t> indices) const;
};

/// Reads train-images-idx3-ubyte / train-labels-idx1-ubyte (or the t10k-*
/// pair), each raw or gzip-compressed, with or without a ".gz" suffix.
/// Throws FormatError naming the file and byte offset on bad content.
Dataset load_mnist(const std::filesystem::path& dir, Split split);

/// Reads data_batch_1..5.bin (train) or test_batch.bin (test), looking in
/// `dir` and in `dir`/cifar-10-batches-bin.
Dataset load_cifar10(const std::filesystem::path& dir, Split split);

/// IDX encodings of a single-channel dataset (magic 0x803 / 0x801).
std::vector<std::uint8_t> encode_idx_images(const Dataset& ds);
std::vector<std::uint8_t> encode_idx_labels(const Dataset& ds);
/// CIFAR-10 binary records: label byte then the 3 colour planes.
std::vector<std::uint8_t> encode_cifar_records(const Dataset& ds);

/// Writes the MNIST file pair of `split` into `dir`, gzip-compressed when
/// `gzip` is set (file names then end in ".gz").
void write_mnist(const Dataset& ds, const std::filesystem::path& dir, bool gzip);
/// Writes `ds` as a single CIFAR-10 batch file.
void write_cifar_file(const Dataset& ds, const std::filesystem::path& file);

/// Converts [0, 1] values back to bytes with round(v * 255).
std::vector<std::uint8_t> to_bytes(std::span<const float> values);
std::vector<std::uint8_t> to_bytes(std::span<const double> values);

/// Zero-pads every border of each image by `pad`, then crops the original
/// H x W window at offset (dy, dx) in [0, 2 pad]^2.
template <typename T>
Tensor<T> crop_at(const Tensor<T>& images, std::size_t pad,
                  std::span<const std::pair<std::size_t, std::size_t>> offsets);
/// crop_at with offsets drawn uniformly per image from `seed`.
template <typename T>
Tensor<T> random_crop(const Tensor<T>& images, std::size_t pad, std::uint64_t seed);

struct BatchPlan {
  std::size_t batch_size = 128;
  std::uint64_t seed = 0;
  bool drop_last = false;
  bool shuffle = true;
  /// Random-crop padding for train-split batches; 0 disables augmentation.
  std::size_t crop_pad = 4;
};

/// Index batches for one epoch. The order is a permutation drawn from
/// (plan.seed, epoch) when plan.shuffle is set, else 0..n-1.
std::vector<std::vector<std::size_t>> batch_indices(std::size_t n, const BatchPlan& plan,
                                                    std::uint64_t epoch);

template <typename T>
struct Batch {
  Tensor<T> images;
  std::vector<int> labels;
};

/// Assembles batch `index` of `epoch`. Train-split batches are randomly
/// cropped with a seed derived from (plan.seed, epoch, index); test-split
/// batches never are.
template <typename T>
Batch<T> make_batch(const Dataset& ds, std::span<const std::size_t> indices, const BatchPlan& plan,
                    std::uint64_t epoch, std::size_t index);

/// Every batch of one epoch. Throws DomainError for an empty dataset.
template <typename T>
std::vector<Batch<T>> batches(const Dataset& ds, const BatchPlan& plan, std::uint64_t epoch = 0);

/// n >= 10 single-channel 28 x 28 images; sample i has label i mod 10. Each
/// class draws a centred square whose side grows with the label, with a
/// small positional jitter and background noise.
Dataset make_synthetic(std::size_t n, std::uint64_t seed, Split split = Split::train);

/// The first k samples after a seeded shuffle (k >= size keeps everything,
/// reordered).
Dataset subset(const Dataset& ds, std::size_t k, std::uint64_t seed);

}  // namespace gode
