#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "xnet/tensor.hpp"

namespace xnet {

// --- Graymap files -----------------------------------------------------------

/// Binary P5 graymap. maxval < 256 stores one byte per sample, otherwise two
/// bytes big-endian.
struct GrayImage {
  Index height = 0;
  Index width = 0;
  std::uint16_t maxval = 255;
  std::vector<std::uint16_t> pixels;
};

GrayImage read_pgm(const std::filesystem::path& path);
void write_pgm(const std::filesystem::path& path, const GrayImage& image);

/// [0,1] floats → 16-bit samples (maxval 65535).
GrayImage to_gray16(std::span<const float> values, Index height, Index width);
/// {0,1} mask → 8-bit samples in {0, 255}.
GrayImage to_mask_image(std::span<const std::uint8_t> mask, Index height, Index width);
/// {0, maxval} samples → {0,1}; any other value raises FormatError.
std::vector<std::uint8_t> mask_from_image(const GrayImage& image);

// --- Manifest ----------------------------------------------------------------

struct VolumeEntry {
  std::string id;
  std::vector<std::string> images;  // relative to the manifest directory
  std::vector<std::string> masks;
  Index height = 0;
  Index width = 0;
};

struct DatasetManifest {
  std::vector<VolumeEntry> volumes;
  std::filesystem::path root;  // directory holding manifest.json

  std::size_t slice_count() const;
  nlohmann::json to_json() const;
  /// Validates the layout; throws FormatError.
  static DatasetManifest from_json(const nlohmann::json& j, std::filesystem::path root);
  static DatasetManifest load(const std::filesystem::path& dir);
  void save() const;
};

inline constexpr const char* kManifestName = "manifest.json";

// --- Synthetic lesions -------------------------------------------------------

struct Ellipse {
  double center_row = 0;
  double center_col = 0;
  double radius_row = 1;  // semi-axis along the rotated row direction
  double radius_col = 1;
  double angle = 0;       // radians

  bool contains(double row, double col) const;
};

struct SyntheticSlice {
  std::vector<float> image;  // unnormalized intensities
  std::vector<std::uint8_t> mask;
  std::vector<Ellipse> lesions;
};

struct SyntheticOptions {
  Index volumes = 10;
  Index slices_per_volume = 20;
  Index height = 64;
  Index width = 64;
  std::uint64_t seed = 7;
  /// Fixture hook: fixed lesion count per slice instead of a draw from 0..3.
  std::optional<int> lesions_per_slice;
  double blur_sigma = 1.5;
  double noise_sigma = 0.03;
};

struct SyntheticSummary {
  DatasetManifest manifest;
  Index slices = 0;
  double lesion_fraction = 0;  // mask pixels / all pixels
};

/// Pixel (r, c) is inside the mask iff its centre lies in some ellipse.
std::vector<std::uint8_t> rasterize_ellipses(std::span<const Ellipse> lesions, Index height, Index width);

/// Separable Gaussian blur with replicated borders.
std::vector<float> gaussian_blur(std::span<const float> image, Index height, Index width, double sigma);

/// Slices of one volume: smooth value-noise background, 0–3 rotated
/// elliptical lesions per slice with blurred (fuzzy) darker interiors, and
/// additive Gaussian noise. The mask is the unblurred ellipse union.
std::vector<SyntheticSlice> synthesize_volume(const SyntheticOptions& options, Index volume_index);

/// Writes the dataset (volume-wise min-max normalized 16-bit images, 8-bit
/// masks) plus manifest.json under `out_dir`. Deterministic in the seed.
SyntheticSummary generate_synthetic(const SyntheticOptions& options, const std::filesystem::path& out_dir);

// --- Preprocessing -----------------------------------------------------------

/// Top-left corner for a centred crop: floor((H − th)/2), floor((W − tw)/2).
std::pair<Index, Index> crop_offsets(Index height, Index width, Index target_height, Index target_width);

template <typename V>
std::vector<V> center_crop(std::span<const V> image, Index height, Index width, Index target_height,
                           Index target_width) {
  const auto [r0, c0] = crop_offsets(height, width, target_height, target_width);
  if (static_cast<Index>(image.size()) != height * width) throw ShapeError("center_crop: size mismatch");
  std::vector<V> out(static_cast<std::size_t>(target_height * target_width));
  for (Index r = 0; r < target_height; ++r) {
    for (Index c = 0; c < target_width; ++c) {
      out[static_cast<std::size_t>(r * target_width + c)] = image[static_cast<std::size_t>((r + r0) * width + c + c0)];
    }
  }
  return out;
}

/// [H×W] tensor → [target_h×target_w].
template <Real T>
Tensor<T> center_crop(const Tensor<T>& image, Index target_height, Index target_width);

/// Largest multiple of 16 not exceeding `n`.
Index floor_to_multiple_of_16(Index n);

/// Min-max scaling to [0,1]; a constant input maps to all zeros.
std::vector<float> normalize_intensity(std::span<const float> values);

// --- Folds -------------------------------------------------------------------

/// Volume-level k-fold split: a seeded shuffle of the ids, then round-robin.
struct FoldAssignment {
  int k = 5;
  std::uint64_t seed = 0;
  std::vector<std::string> order;  // shuffled ids
  std::map<std::string, int> fold_of;

  std::vector<std::string> fold(int index) const;
  /// Every volume outside fold `index`.
  std::vector<std::string> complement(int index) const;
};

FoldAssignment split_folds(const std::vector<std::string>& volume_ids, int k, std::uint64_t seed);
FoldAssignment split_folds(const DatasetManifest& manifest, int k, std::uint64_t seed);

// --- In-memory dataset and batching -----------------------------------------

struct SliceData {
  Index index = 0;
  std::vector<float> image;  // normalized, cropped
  std::vector<std::uint8_t> mask;
};

struct Volume {
  std::string id;
  std::vector<SliceData> slices;
};

struct VolumeDataset {
  Index height = 0;  // after cropping
  Index width = 0;
  std::vector<Volume> volumes;

  const Volume& volume(const std::string& id) const;
  std::vector<const Volume*> select(const std::vector<std::string>& ids) const;
};

/// Loads every slice, normalizes each volume's intensities to [0,1], and
/// centre-crops to `crop` (default: both sides floored to a multiple of 16).
VolumeDataset load_dataset(const DatasetManifest& manifest, std::optional<std::pair<Index, Index>> crop = {});

template <Real T>
struct Batch {
  Tensor<T> images;  // [B×1×H×W]
  Tensor<T> masks;   // [B×1×H×W], values {0,1}
  std::vector<std::pair<std::string, Index>> origin;  // (volume id, slice index) per row
};

/// Fixed-size batches over the slices of a set of volumes. The last short
/// batch is kept. With shuffling on, epoch e's order depends only on (seed, e).
template <Real T>
class BatchStream {
 public:
  BatchStream(std::vector<const Volume*> volumes, Index height, Index width, Index batch_size, std::uint64_t seed,
              bool shuffle = true);

  std::size_t slice_count() const { return slices_.size(); }
  std::size_t batches_per_epoch() const;
  std::vector<std::size_t> epoch_order(std::size_t epoch) const;
  std::vector<Batch<T>> epoch(std::size_t epoch) const;
  Batch<T> make_batch(std::span<const std::size_t> indices) const;

 private:
  struct Ref {
    const Volume* volume;
    const SliceData* slice;
  };
  std::vector<Ref> slices_;
  Index height_, width_, batch_size_;
  std::uint64_t seed_;
  bool shuffle_;
};

/// Seeded Fisher–Yates using raw engine draws (portable across standard libraries).
template <typename It>
void seeded_shuffle(It first, It last, std::mt19937_64& rng) {
  const auto n = static_cast<std::uint64_t>(last - first);
  for (std::uint64_t i = n; i > 1; --i) {
    const auto j = rng() % i;
    std::swap(first[static_cast<std::ptrdiff_t>(i - 1)], first[static_cast<std::ptrdiff_t>(j)]);
  }
}

}  // namespace xnet
