#pragma once

// Dataset containers (IDX, CIFAR-10 binary), pixel scaling, Gaussian and
// shift/flip augmentation, and original/perturbed mixed batches.

#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "gandef/error.hpp"
#include "gandef/rng.hpp"
#include "gandef/tensor.hpp"

namespace gandef {

/// Undecoded images in H x W x C byte order plus their labels.
struct RawImages {
  std::size_t count = 0, height = 0, width = 0, channels = 0;
  std::vector<std::uint8_t> pixels;
  std::vector<std::uint8_t> labels;
};

struct Dataset {
  std::string name;
  Tensor images;  // (N, H, W, C) or (N, F), values in [-1, 1]
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }
  std::size_t num_classes() const {
    int m = 0;
    for (int l : labels) m = std::max(m, l);
    return static_cast<std::size_t>(m) + 1;
  }
  Shape example_shape() const { return Shape(images.shape().begin() + 1, images.shape().end()); }

  Dataset subset(std::span<const std::size_t> rows) const {
    Dataset d{name, images.gather_rows(rows), {}};
    d.labels.reserve(rows.size());
    for (auto r : rows) d.labels.push_back(labels.at(r));
    return d;
  }
};

/// Images with labels t and source indicators s (0 original, 1 perturbed).
struct LabeledBatch {
  Tensor x;
  std::vector<int> t;
  std::vector<double> s;

  std::size_t size() const { return t.size(); }
};

namespace detail {

inline std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  require(static_cast<bool>(is), ErrorKind::DatasetMissing, "cannot open " + path);
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

inline std::uint32_t be32(const std::vector<std::uint8_t>& b, std::size_t off) {
  return (std::uint32_t(b[off]) << 24) | (std::uint32_t(b[off + 1]) << 16) | (std::uint32_t(b[off + 2]) << 8) |
         std::uint32_t(b[off + 3]);
}

}  // namespace detail

inline constexpr std::uint32_t kIdxImageMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelMagic = 0x00000801;
inline constexpr std::size_t kCifarRecord = 3073;

inline RawImages load_idx(const std::string& images_path, const std::string& labels_path) {
  const auto img = detail::read_file(images_path);
  const auto lab = detail::read_file(labels_path);
  require(img.size() >= 4 && lab.size() >= 4, ErrorKind::TruncatedFile, "IDX header");
  require(detail::be32(img, 0) == kIdxImageMagic, ErrorKind::BadMagic, images_path + " is not an IDX image file");
  require(detail::be32(lab, 0) == kIdxLabelMagic, ErrorKind::BadMagic, labels_path + " is not an IDX label file");
  require(img.size() >= 16 && lab.size() >= 8, ErrorKind::TruncatedFile, "IDX header");
  RawImages r;
  r.count = detail::be32(img, 4);
  r.height = detail::be32(img, 8);
  r.width = detail::be32(img, 12);
  r.channels = 1;
  const std::size_t n_labels = detail::be32(lab, 4);
  require(img.size() - 16 >= r.count * r.height * r.width, ErrorKind::TruncatedFile, images_path);
  require(lab.size() - 8 >= n_labels, ErrorKind::TruncatedFile, labels_path);
  require(n_labels == r.count, ErrorKind::CountMismatch,
          std::to_string(r.count) + " images vs " + std::to_string(n_labels) + " labels");
  r.pixels.assign(img.begin() + 16, img.begin() + 16 + static_cast<std::ptrdiff_t>(r.count * r.height * r.width));
  r.labels.assign(lab.begin() + 8, lab.begin() + 8 + static_cast<std::ptrdiff_t>(n_labels));
  return r;
}

/// Reads 3073-byte records (label, then 1024 R, 1024 G, 1024 B bytes) and reorders to HWC.
inline RawImages load_cifar10(const std::vector<std::string>& batch_paths) {
  RawImages r;
  r.height = r.width = 32;
  r.channels = 3;
  for (const auto& path : batch_paths) {
    const auto b = detail::read_file(path);
    require(!b.empty() && b.size() % kCifarRecord == 0, ErrorKind::BadRecordSize,
            path + " has " + std::to_string(b.size()) + " bytes");
    const std::size_t n = b.size() / kCifarRecord;
    r.pixels.reserve(r.pixels.size() + n * 3072);
    for (std::size_t i = 0; i < n; ++i) {
      const std::uint8_t* rec = b.data() + i * kCifarRecord;
      r.labels.push_back(rec[0]);
      for (std::size_t p = 0; p < 1024; ++p)
        for (std::size_t c = 0; c < 3; ++c) r.pixels.push_back(rec[1 + c * 1024 + p]);
    }
    r.count += n;
  }
  return r;
}

inline double scale_to_unit_range(std::uint8_t v) { return static_cast<double>(v) / 127.5 - 1.0; }

inline Dataset to_dataset(const std::string& name, const RawImages& raw) {
  Dataset d;
  d.name = name;
  d.images = Tensor({raw.count, raw.height, raw.width, raw.channels});
  for (std::size_t i = 0; i < raw.pixels.size(); ++i) d.images[i] = scale_to_unit_range(raw.pixels[i]);
  d.labels.reserve(raw.count);
  for (auto l : raw.labels) {
    require(l <= 9, ErrorKind::BadLabel, name + " label " + std::to_string(l));
    d.labels.push_back(l);
  }
  return d;
}

/// i.i.d. Normal(0, sigma^2) noise; `feature_scale`, when given, multiplies sigma per
/// position of the last axis so noise can be confined to some channels.
inline Tensor gaussian_noise(const Shape& shape, double sigma, std::uint64_t seed,
                             std::span<const double> feature_scale = {}) {
  require(sigma >= 0.0, ErrorKind::InvalidAttribute, "sigma must be non-negative");
  require(feature_scale.empty() || feature_scale.size() == shape.back(), ErrorKind::ShapeMismatch,
          "feature scale must match the last axis");
  Tensor n(shape);
  Rng rng(seed);
  const std::size_t k = shape.back();
  for (std::size_t i = 0; i < n.size(); ++i) {
    const double scale = feature_scale.empty() ? 1.0 : feature_scale[i % k];
    n[i] = sigma * scale * standard_normal(rng);
  }
  return n;
}

/// clip(x + noise, -1, 1).
inline Tensor gaussian_perturb(const Tensor& x, double sigma, std::uint64_t seed,
                               std::span<const double> feature_scale = {}) {
  if (sigma == 0.0) return x;
  Tensor out = gaussian_noise(x.shape(), sigma, seed, feature_scale);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::clamp(x[i] + out[i], -1.0, 1.0);
  return out;
}

/// Mirrors every image of an (N, H, W, C) batch left to right.
inline Tensor flip_horizontal(const Tensor& x) {
  require(x.rank() == 4, ErrorKind::ShapeMismatch, "flip expects NHWC");
  const std::size_t n = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
  Tensor out(x.shape());
  for (std::size_t i = 0; i < n * h; ++i)
    for (std::size_t col = 0; col < w; ++col)
      for (std::size_t ch = 0; ch < c; ++ch) out[(i * w + col) * c + ch] = x[(i * w + (w - 1 - col)) * c + ch];
  return out;
}

/// Random integer shifts in +-round(fraction * extent) with zero fill, then a
/// horizontal flip with probability 0.5 when enabled. One draw set per image.
inline Tensor augment_shift_flip(const Tensor& x, double width_shift, double height_shift, bool hflip,
                                 std::uint64_t seed) {
  require(x.rank() == 4, ErrorKind::ShapeMismatch, "augment expects NHWC");
  require(width_shift >= 0.0 && width_shift < 0.5 && height_shift >= 0.0 && height_shift < 0.5,
          ErrorKind::InvalidAttribute, "shift fractions must be in [0, 0.5)");
  const std::size_t n = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
  const long max_dy = std::lround(height_shift * double(h));
  const long max_dx = std::lround(width_shift * double(w));
  if (max_dy == 0 && max_dx == 0 && !hflip) return x;
  Tensor out(x.shape(), 0.0);
  Rng rng(seed);
  for (std::size_t i = 0; i < n; ++i) {
    const long dy = max_dy ? static_cast<long>(rng() % std::uint64_t(2 * max_dy + 1)) - max_dy : 0;
    const long dx = max_dx ? static_cast<long>(rng() % std::uint64_t(2 * max_dx + 1)) - max_dx : 0;
    const bool flip = hflip && (rng() & 1);
    for (long y = 0; y < long(h); ++y) {
      const long sy = y - dy;
      if (sy < 0 || sy >= long(h)) continue;
      for (long xo = 0; xo < long(w); ++xo) {
        long sx = xo - dx;
        if (sx < 0 || sx >= long(w)) continue;
        if (flip) sx = long(w) - 1 - sx;
        const double* src = x.ptr() + ((i * h + sy) * w + sx) * c;
        double* dst = out.ptr() + ((i * h + y) * w + xo) * c;
        std::copy(src, src + c, dst);
      }
    }
  }
  return out;
}

/// Mixed batch from explicit rows: `orig` rows as originals (s=0) followed by
/// perturbed copies of `pert` rows (s=1). Labels are carried through unchanged.
inline LabeledBatch mixed_batch_from(const Dataset& clean, std::span<const std::size_t> orig,
                                     std::span<const std::size_t> pert, double sigma, std::uint64_t noise_seed,
                                     std::span<const double> feature_scale = {}) {
  Dataset a = clean.subset(orig);
  Dataset b = clean.subset(pert);
  LabeledBatch out;
  out.x = concat_rows(a.images, gaussian_perturb(b.images, sigma, noise_seed, feature_scale));
  out.t = a.labels;
  out.t.insert(out.t.end(), b.labels.begin(), b.labels.end());
  out.s.assign(orig.size(), 0.0);
  out.s.resize(orig.size() + pert.size(), 1.0);
  return out;
}

/// First half: originals (s=0); second half: perturbed copies of independently
/// sampled originals (s=1).
inline LabeledBatch make_mixed_batch(const Dataset& clean, std::size_t batch_size, double sigma, std::uint64_t seed,
                                     std::span<const double> feature_scale = {}) {
  require(batch_size % 2 == 0, ErrorKind::OddBatchSize, std::to_string(batch_size));
  require(batch_size > 0 && clean.size() > 0, ErrorKind::InvalidAttribute, "empty batch");
  const std::size_t half = batch_size / 2;
  Rng rng(derive_seed(seed, 0));
  auto pick = [&](std::size_t k) {
    std::vector<std::size_t> idx;
    if (k <= clean.size()) {
      auto perm = permutation(clean.size(), rng);
      idx.assign(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(k));
    } else {
      for (std::size_t i = 0; i < k; ++i) idx.push_back(rng() % clean.size());
    }
    return idx;
  };
  const auto orig = pick(half);
  const auto pert = pick(half);
  return mixed_batch_from(clean, orig, pert, sigma, derive_seed(seed, 1), feature_scale);
}

/// Endless stream of example indices: a fresh seeded permutation per pass.
class BatchSampler {
 public:
  BatchSampler(std::size_t n, std::uint64_t seed) : n_(n), rng_(seed) {
    require(n > 0, ErrorKind::InvalidAttribute, "sampler over an empty dataset");
  }

  std::vector<std::size_t> next(std::size_t m) {
    std::vector<std::size_t> out;
    out.reserve(m);
    while (out.size() < m) {
      if (pos_ == order_.size()) {
        order_ = permutation(n_, rng_);
        pos_ = 0;
      }
      out.push_back(order_[pos_++]);
    }
    return out;
  }

 private:
  std::size_t n_;
  Rng rng_;
  std::vector<std::size_t> order_;
  std::size_t pos_ = 0;
};

/// Seeded subset of `n` examples (the whole set when n is 0 or too large), in sampled order.
inline Dataset take_subset(const Dataset& d, std::size_t n, std::uint64_t seed) {
  if (n == 0 || n >= d.size()) return d;
  Rng rng(seed);
  auto perm = permutation(d.size(), rng);
  perm.resize(n);
  return d.subset(perm);
}

/// Seeded shuffle split for corpora without a published split.
inline std::pair<Dataset, Dataset> shuffle_split(const Dataset& d, double test_fraction, std::uint64_t seed) {
  require(test_fraction > 0.0 && test_fraction < 1.0, ErrorKind::InvalidAttribute, "test fraction");
  Rng rng(seed);
  auto perm = permutation(d.size(), rng);
  const auto n_test = static_cast<std::size_t>(std::llround(test_fraction * double(d.size())));
  std::vector<std::size_t> test(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(n_test));
  std::vector<std::size_t> train(perm.begin() + static_cast<std::ptrdiff_t>(n_test), perm.end());
  return {d.subset(train), d.subset(test)};
}

// ---- manifest -------------------------------------------------------------

/// Root directory holding manifest.json; GANDEF_DATA_DIR overrides the default.
inline std::string default_data_dir() {
  if (const char* env = std::getenv("GANDEF_DATA_DIR"); env && *env) return env;
  return "data";
}

/// Loads split "train" or "test" of a dataset declared in <data_dir>/manifest.json.
inline Dataset load_dataset(const std::string& name, const std::string& split, const std::string& data_dir) {
  namespace fs = std::filesystem;
  const fs::path root(data_dir);
  const fs::path manifest = root / "manifest.json";
  std::ifstream is(manifest);
  require(static_cast<bool>(is), ErrorKind::DatasetMissing, "no manifest at " + manifest.string());
  const auto j = nlohmann::json::parse(is);
  require(split == "train" || split == "test", ErrorKind::InvalidConfig, "split must be train or test");
  for (const auto& entry : j.at("datasets")) {
    if (entry.at("name") != name) continue;
    const fs::path dir = root / entry.at("dir").get<std::string>();
    if (entry.contains(split + "_images")) {
      const auto raw = load_idx((dir / entry.at(split + "_images").get<std::string>()).string(),
                                (dir / entry.at(split + "_labels").get<std::string>()).string());
      return to_dataset(name, raw);
    }
    std::vector<std::string> paths;
    for (const auto& f : entry.at(split + "_batches")) paths.push_back((dir / f.get<std::string>()).string());
    return to_dataset(name, load_cifar10(paths));
  }
  throw Error(ErrorKind::DatasetMissing, name + " is not declared in " + manifest.string());
}

// ---- synthetic two-feature problem ------------------------------------------

/// Two-class data with features (signal, cue). The signal is (2t-1)*0.5 plus
/// Normal(0, 0.3^2) noise; the cue is an exact copy of (2t-1)*0.5 on clean
/// data. Gaussian augmentation restricted to the cue (see toy_noise_mask)
/// makes the cue unreliable while leaving the signal intact.
inline Dataset make_toy_dataset(std::size_t n, std::uint64_t seed) {
  Dataset d;
  d.name = "toy";
  d.images = Tensor({n, 2});
  Rng rng(seed);
  for (std::size_t i = 0; i < n; ++i) {
    const int t = static_cast<int>(rng() & 1);
    const double center = t ? 0.5 : -0.5;
    d.images[2 * i] = std::clamp(center + 0.3 * standard_normal(rng), -1.0, 1.0);
    d.images[2 * i + 1] = center;
    d.labels.push_back(t);
  }
  return d;
}

/// Per-feature noise scale for the toy data: signal untouched, cue fully perturbed.
inline std::vector<double> toy_noise_mask() { return {0.0, 1.0}; }

}  // namespace gandef
