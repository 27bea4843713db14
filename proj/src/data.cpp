#include "gode/data.hpp"

#include <zlib.h>

#include <algorithm>
#include <array>
#include <cstdio>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

#include "gode/error.hpp"

namespace gode {

Split parse_split(std::string_view name) {
  if (name == "train") return Split::train;
  if (name == "test") return Split::test;
  throw ConfigError("unknown split '" + std::string(name) + "' (expected train or test)");
}

std::string_view to_string(Split split) { return split == Split::train ? "train" : "test"; }

void Dataset::validate() const {
  if (pixels.size() != labels.size() * image_size()) {
    throw FormatError("dataset: " + std::to_string(pixels.size()) + " pixel bytes for " +
                      std::to_string(labels.size()) + " labels of " + std::to_string(image_size()) +
                      " bytes each");
  }
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] > 9) {
      throw FormatError("dataset: label " + std::to_string(labels[i]) + " at index " +
                        std::to_string(i) + " outside 0..9");
    }
  }
}

template <typename T>
Tensor<T> Dataset::images(std::span<const std::size_t> indices) const {
  const std::size_t sz = image_size();
  std::vector<T> values(indices.size() * sz);
  for (std::size_t b = 0; b < indices.size(); ++b) {
    const auto src = image(indices[b]);
    for (std::size_t k = 0; k < sz; ++k) values[b * sz + k] = static_cast<T>(src[k]) / T(255);
  }
  return Tensor<T>({indices.size(), channels, height, width}, std::move(values));
}

template <typename T>
Tensor<T> Dataset::images() const {
  std::vector<std::size_t> all(size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  return images<T>(all);
}

std::vector<int> Dataset::labels_of(std::span<const std::size_t> indices) const {
  std::vector<int> out;
  out.reserve(indices.size());
  for (auto i : indices) out.push_back(labels.at(i));
  return out;
}

namespace {

// Whole-file read; gzread passes uncompressed files through unchanged.
std::vector<std::uint8_t> read_maybe_gz(const std::filesystem::path& path) {
  gzFile f = gzopen(path.c_str(), "rb");
  if (f == nullptr) throw FormatError("cannot open " + path.string());
  std::vector<std::uint8_t> out;
  std::vector<std::uint8_t> chunk(1 << 16);
  for (;;) {
    const int got = gzread(f, chunk.data(), static_cast<unsigned>(chunk.size()));
    if (got < 0) {
      int code = 0;
      const std::string msg = gzerror(f, &code);
      gzclose(f);
      throw FormatError(path.string() + ": decompression failed after " + std::to_string(out.size()) +
                        " bytes (" + msg + ")");
    }
    if (got == 0) break;
    out.insert(out.end(), chunk.begin(), chunk.begin() + got);
  }
  gzclose(f);
  return out;
}

std::filesystem::path find_file(const std::filesystem::path& dir, const std::string& name) {
  for (const auto& candidate : {dir / name, dir / (name + ".gz")}) {
    if (std::filesystem::exists(candidate)) return candidate;
  }
  throw FormatError("missing data file " + (dir / name).string() + "[.gz]");
}

std::uint32_t be32(const std::vector<std::uint8_t>& bytes, std::size_t offset,
                   const std::filesystem::path& path) {
  if (offset + 4 > bytes.size()) {
    throw FormatError(path.string() + ": truncated at offset " + std::to_string(bytes.size()) +
                      " (header needs " + std::to_string(offset + 4) + " bytes)");
  }
  return (std::uint32_t{bytes[offset]} << 24) | (std::uint32_t{bytes[offset + 1]} << 16) |
         (std::uint32_t{bytes[offset + 2]} << 8) | std::uint32_t{bytes[offset + 3]};
}

void check_magic(std::uint32_t got, std::uint32_t want, const std::filesystem::path& path) {
  if (got != want) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "bad magic 0x%08x at offset 0 (expected 0x%08x)", got, want);
    throw FormatError(path.string() + ": " + buf);
  }
}

void check_length(const std::vector<std::uint8_t>& bytes, std::size_t need,
                  const std::filesystem::path& path) {
  if (bytes.size() < need) {
    throw FormatError(path.string() + ": truncated at offset " + std::to_string(bytes.size()) +
                      " (expected " + std::to_string(need) + " bytes)");
  }
  if (bytes.size() > need) {
    throw FormatError(path.string() + ": unexpected trailing data at offset " + std::to_string(need));
  }
}

void put_be32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  out.push_back(static_cast<std::uint8_t>(v >> 24));
  out.push_back(static_cast<std::uint8_t>(v >> 16));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
  out.push_back(static_cast<std::uint8_t>(v));
}

}  // namespace

Dataset load_mnist(const std::filesystem::path& dir, Split split) {
  const std::string prefix = split == Split::train ? "train" : "t10k";
  const auto image_path = find_file(dir, prefix + "-images-idx3-ubyte");
  const auto label_path = find_file(dir, prefix + "-labels-idx1-ubyte");

  const auto img = read_maybe_gz(image_path);
  check_magic(be32(img, 0, image_path), 0x00000803, image_path);
  const std::size_t n = be32(img, 4, image_path);
  const std::size_t rows = be32(img, 8, image_path);
  const std::size_t cols = be32(img, 12, image_path);
  check_length(img, 16 + n * rows * cols, image_path);

  const auto lab = read_maybe_gz(label_path);
  check_magic(be32(lab, 0, label_path), 0x00000801, label_path);
  const std::size_t n_labels = be32(lab, 4, label_path);
  check_length(lab, 8 + n_labels, label_path);
  if (n_labels != n) {
    throw FormatError(label_path.string() + ": " + std::to_string(n_labels) +
                      " labels at offset 4 but " + std::to_string(n) + " images");
  }

  Dataset ds;
  ds.channels = 1;
  ds.height = rows;
  ds.width = cols;
  ds.split = split;
  ds.pixels.assign(img.begin() + 16, img.end());
  ds.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    ds.labels[i] = lab[8 + i];
    if (ds.labels[i] > 9) {
      throw FormatError(label_path.string() + ": label " + std::to_string(ds.labels[i]) +
                        " at offset " + std::to_string(8 + i));
    }
  }
  return ds;
}

namespace {

constexpr std::size_t kCifarImage = 3 * 32 * 32;
constexpr std::size_t kCifarRecord = 1 + kCifarImage;

void append_cifar(Dataset& ds, const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  if (bytes.empty() || bytes.size() % kCifarRecord != 0) {
    throw FormatError(path.string() + ": size " + std::to_string(bytes.size()) +
                      " is not a positive multiple of the " + std::to_string(kCifarRecord) +
                      "-byte record; last full record ends at offset " +
                      std::to_string(bytes.size() / kCifarRecord * kCifarRecord));
  }
  const std::size_t n = bytes.size() / kCifarRecord;
  for (std::size_t r = 0; r < n; ++r) {
    const std::size_t off = r * kCifarRecord;
    if (bytes[off] > 9) {
      throw FormatError(path.string() + ": label " + std::to_string(bytes[off]) + " at offset " +
                        std::to_string(off));
    }
    ds.labels.push_back(bytes[off]);
    ds.pixels.insert(ds.pixels.end(), bytes.begin() + static_cast<std::ptrdiff_t>(off + 1),
                     bytes.begin() + static_cast<std::ptrdiff_t>(off + kCifarRecord));
  }
}

}  // namespace

Dataset load_cifar10(const std::filesystem::path& dir, Split split) {
  std::filesystem::path base = dir;
  if (!std::filesystem::exists(base / "test_batch.bin") &&
      std::filesystem::exists(dir / "cifar-10-batches-bin")) {
    base = dir / "cifar-10-batches-bin";
  }
  std::vector<std::string> names;
  if (split == Split::train) {
    for (int i = 1; i <= 5; ++i) names.push_back("data_batch_" + std::to_string(i) + ".bin");
  } else {
    names.push_back("test_batch.bin");
  }
  Dataset ds;
  ds.channels = 3;
  ds.height = 32;
  ds.width = 32;
  ds.split = split;
  for (const auto& name : names) {
    const auto path = base / name;
    if (!std::filesystem::exists(path)) throw FormatError("missing data file " + path.string());
    append_cifar(ds, path);
  }
  return ds;
}

std::vector<std::uint8_t> encode_idx_images(const Dataset& ds) {
  if (ds.channels != 1) throw ShapeError("idx: only single-channel datasets can be encoded");
  std::vector<std::uint8_t> out;
  out.reserve(16 + ds.pixels.size());
  put_be32(out, 0x00000803);
  put_be32(out, static_cast<std::uint32_t>(ds.size()));
  put_be32(out, static_cast<std::uint32_t>(ds.height));
  put_be32(out, static_cast<std::uint32_t>(ds.width));
  out.insert(out.end(), ds.pixels.begin(), ds.pixels.end());
  return out;
}

std::vector<std::uint8_t> encode_idx_labels(const Dataset& ds) {
  std::vector<std::uint8_t> out;
  out.reserve(8 + ds.size());
  put_be32(out, 0x00000801);
  put_be32(out, static_cast<std::uint32_t>(ds.size()));
  for (int l : ds.labels) out.push_back(static_cast<std::uint8_t>(l));
  return out;
}

std::vector<std::uint8_t> encode_cifar_records(const Dataset& ds) {
  if (ds.image_size() != kCifarImage) throw ShapeError("cifar: images must be 3 x 32 x 32");
  std::vector<std::uint8_t> out;
  out.reserve(ds.size() * kCifarRecord);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    out.push_back(static_cast<std::uint8_t>(ds.labels[i]));
    const auto img = ds.image(i);
    out.insert(out.end(), img.begin(), img.end());
  }
  return out;
}

namespace {

void write_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes, bool gzip) {
  if (gzip) {
    gzFile f = gzopen(path.c_str(), "wb");
    if (f == nullptr) throw FormatError("cannot write " + path.string());
    const int wrote = gzwrite(f, bytes.data(), static_cast<unsigned>(bytes.size()));
    gzclose(f);
    if (wrote != static_cast<int>(bytes.size())) throw FormatError("short write to " + path.string());
    return;
  }
  std::ofstream os(path, std::ios::binary);
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw FormatError("cannot write " + path.string());
}

}  // namespace

void write_mnist(const Dataset& ds, const std::filesystem::path& dir, bool gzip) {
  std::filesystem::create_directories(dir);
  const std::string prefix = ds.split == Split::train ? "train" : "t10k";
  const std::string suffix = gzip ? ".gz" : "";
  write_bytes(dir / (prefix + "-images-idx3-ubyte" + suffix), encode_idx_images(ds), gzip);
  write_bytes(dir / (prefix + "-labels-idx1-ubyte" + suffix), encode_idx_labels(ds), gzip);
}

void write_cifar_file(const Dataset& ds, const std::filesystem::path& file) {
  write_bytes(file, encode_cifar_records(ds), false);
}

namespace {

template <typename T>
std::vector<std::uint8_t> to_bytes_impl(std::span<const T> values) {
  std::vector<std::uint8_t> out(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double v = std::clamp(static_cast<double>(values[i]), 0.0, 1.0);
    out[i] = static_cast<std::uint8_t>(std::lround(v * 255.0));
  }
  return out;
}

}  // namespace

std::vector<std::uint8_t> to_bytes(std::span<const float> values) { return to_bytes_impl(values); }
std::vector<std::uint8_t> to_bytes(std::span<const double> values) { return to_bytes_impl(values); }

template <typename T>
Tensor<T> crop_at(const Tensor<T>& images, std::size_t pad,
                  std::span<const std::pair<std::size_t, std::size_t>> offsets) {
  if (images.rank() != 4) throw ShapeError("crop: expected [N, C, H, W], got " + to_string(images.shape()));
  const std::size_t N = images.dim(0), C = images.dim(1), H = images.dim(2), W = images.dim(3);
  if (offsets.size() != N) {
    throw ShapeError("crop: " + std::to_string(offsets.size()) + " offsets for " + std::to_string(N) +
                     " images");
  }
  if (pad == 0) return images;
  const auto src = images.values();
  std::vector<T> out(src.size(), T(0));
  for (std::size_t n = 0; n < N; ++n) {
    const auto [dy, dx] = offsets[n];
    if (dy > 2 * pad || dx > 2 * pad) throw DomainError("crop: offset outside [0, 2 pad]");
    for (std::size_t c = 0; c < C; ++c) {
      const std::size_t plane = (n * C + c) * H * W;
      for (std::size_t y = 0; y < H; ++y) {
        // Output row y reads padded row y + dy, i.e. source row y + dy - pad.
        const std::ptrdiff_t sy = static_cast<std::ptrdiff_t>(y + dy) - static_cast<std::ptrdiff_t>(pad);
        if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(H)) continue;
        for (std::size_t x = 0; x < W; ++x) {
          const std::ptrdiff_t sx =
              static_cast<std::ptrdiff_t>(x + dx) - static_cast<std::ptrdiff_t>(pad);
          if (sx < 0 || sx >= static_cast<std::ptrdiff_t>(W)) continue;
          out[plane + y * W + x] = src[plane + static_cast<std::size_t>(sy) * W + static_cast<std::size_t>(sx)];
        }
      }
    }
  }
  return Tensor<T>(images.shape(), std::move(out));
}

template <typename T>
Tensor<T> random_crop(const Tensor<T>& images, std::size_t pad, std::uint64_t seed) {
  if (images.rank() != 4) throw ShapeError("crop: expected [N, C, H, W], got " + to_string(images.shape()));
  if (pad == 0) return images;
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> offset(0, 2 * pad);
  std::vector<std::pair<std::size_t, std::size_t>> offsets(images.dim(0));
  for (auto& o : offsets) {
    o.first = offset(rng);
    o.second = offset(rng);
  }
  return crop_at(images, pad, std::span<const std::pair<std::size_t, std::size_t>>(offsets));
}

std::vector<std::vector<std::size_t>> batch_indices(std::size_t n, const BatchPlan& plan,
                                                    std::uint64_t epoch) {
  if (plan.batch_size < 1) throw ConfigError("batches: batch_size must be >= 1");
  if (n == 0) throw DomainError("batches: empty dataset");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  if (plan.shuffle) {
    std::seed_seq seq{static_cast<std::uint32_t>(plan.seed), static_cast<std::uint32_t>(plan.seed >> 32),
                      static_cast<std::uint32_t>(epoch), static_cast<std::uint32_t>(epoch >> 32)};
    std::mt19937_64 rng(seq);
    std::shuffle(order.begin(), order.end(), rng);
  }
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t start = 0; start < n; start += plan.batch_size) {
    const std::size_t len = std::min(plan.batch_size, n - start);
    if (len < plan.batch_size && plan.drop_last) break;
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                     order.begin() + static_cast<std::ptrdiff_t>(start + len));
  }
  return out;
}

template <typename T>
Batch<T> make_batch(const Dataset& ds, std::span<const std::size_t> indices, const BatchPlan& plan,
                    std::uint64_t epoch, std::size_t index) {
  Batch<T> b{ds.images<T>(indices), ds.labels_of(indices)};
  if (ds.split == Split::train && plan.crop_pad > 0) {
    std::seed_seq seq{static_cast<std::uint32_t>(plan.seed), static_cast<std::uint32_t>(plan.seed >> 32),
                      static_cast<std::uint32_t>(epoch), static_cast<std::uint32_t>(index), 0x63726f70u};
    std::uint64_t seed = 0;
    std::array<std::uint32_t, 2> words{};
    seq.generate(words.begin(), words.end());
    seed = (std::uint64_t{words[0]} << 32) | words[1];
    b.images = random_crop(b.images, plan.crop_pad, seed);
  }
  return b;
}

template <typename T>
std::vector<Batch<T>> batches(const Dataset& ds, const BatchPlan& plan, std::uint64_t epoch) {
  const auto idx = batch_indices(ds.size(), plan, epoch);
  std::vector<Batch<T>> out;
  out.reserve(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) out.push_back(make_batch<T>(ds, idx[i], plan, epoch, i));
  return out;
}

Dataset make_synthetic(std::size_t n, std::uint64_t seed, Split split) {
  if (n < 10) throw ConfigError("make_synthetic: need n >= 10");
  Dataset ds;
  ds.channels = 1;
  ds.height = 28;
  ds.width = 28;
  ds.split = split;
  ds.pixels.assign(n * 28 * 28, 0);
  ds.labels.resize(n);
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> noise(0, 30);
  std::uniform_int_distribution<int> jitter(-1, 1);
  for (std::size_t i = 0; i < n; ++i) {
    const int c = static_cast<int>(i % 10);
    ds.labels[i] = c;
    const int side = 4 + 2 * c;
    const int y0 = (28 - side) / 2 + jitter(rng);
    const int x0 = (28 - side) / 2 + jitter(rng);
    auto* img = ds.pixels.data() + i * 28 * 28;
    for (int y = 0; y < 28; ++y) {
      for (int x = 0; x < 28; ++x) {
        const bool inside = y >= y0 && y < y0 + side && x >= x0 && x < x0 + side;
        img[y * 28 + x] = static_cast<std::uint8_t>(inside ? 255 - noise(rng) : noise(rng));
      }
    }
  }
  return ds;
}

Dataset subset(const Dataset& ds, std::size_t k, std::uint64_t seed) {
  std::vector<std::size_t> order(ds.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  order.resize(std::min(k, order.size()));
  Dataset out;
  out.channels = ds.channels;
  out.height = ds.height;
  out.width = ds.width;
  out.split = ds.split;
  out.pixels.reserve(order.size() * ds.image_size());
  for (auto i : order) {
    const auto img = ds.image(i);
    out.pixels.insert(out.pixels.end(), img.begin(), img.end());
    out.labels.push_back(ds.labels[i]);
  }
  return out;
}

#define GODE_INSTANTIATE_DATA(T)                                                                    \
  template Tensor<T> Dataset::images<T>(std::span<const std::size_t>) const;                         \
  template Tensor<T> Dataset::images<T>() const;                                                     \
  template Tensor<T> crop_at<T>(const Tensor<T>&, std::size_t,                                       \
                                std::span<const std::pair<std::size_t, std::size_t>>);               \
  template Tensor<T> random_crop<T>(const Tensor<T>&, std::size_t, std::uint64_t);                   \
  template Batch<T> make_batch<T>(const Dataset&, std::span<const std::size_t>, const BatchPlan&,     \
                                  std::uint64_t, std::size_t);                                       \
  template std::vector<Batch<T>> batches<T>(const Dataset&, const BatchPlan&, std::uint64_t);

GODE_INSTANTIATE_DATA(float)
GODE_INSTANTIATE_DATA(double)

}  // namespace gode
