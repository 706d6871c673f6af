#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

namespace xnet {

struct ConfusionCounts {
  std::uint64_t tp = 0;
  std::uint64_t fp = 0;
  std::uint64_t fn = 0;
  std::uint64_t tn = 0;

  std::uint64_t total() const { return tp + fp + fn + tn; }
  ConfusionCounts& operator+=(const ConfusionCounts& o) {
    tp += o.tp;
    fp += o.fp;
    fn += o.fn;
    tn += o.tn;
    return *this;
  }
  bool operator==(const ConfusionCounts&) const = default;
};

struct OverlapMetrics {
  double dice = 0;
  double iou = 0;
  double precision = 0;
  double recall = 0;
};

/// Pixel counts for two equal-length {0,1} masks. Throws ShapeError on a
/// length mismatch and std::invalid_argument on any other value.
ConfusionCounts confusion(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> truth);

/// Dice, IoU, precision and recall. A metric whose denominator is zero
/// (nothing predicted and nothing present) is 1.0.
OverlapMetrics metrics_from_counts(const ConfusionCounts& c);

struct VolumeRecord {
  std::string volume_id;
  ConfusionCounts counts;
  OverlapMetrics metrics;
};

/// Per-volume records plus their arithmetic mean.
struct MetricReport {
  std::vector<VolumeRecord> volumes;
  OverlapMetrics aggregate;

  /// Recomputes `aggregate`; throws std::invalid_argument when empty.
  void finalize();
  nlohmann::json to_json() const;
  static MetricReport from_json(const nlohmann::json& j);
};

inline constexpr const char* kEmptyMaskConvention =
    "a metric with a zero denominator (empty prediction and empty ground truth) is scored 1.0";

}  // namespace xnet
