#include "xnet/metrics.hpp"

#include <stdexcept>

#include "xnet/error.hpp"

namespace xnet {

namespace {

double ratio_or_one(double num, double den) { return den == 0 ? 1.0 : num / den; }

nlohmann::json record_json(const std::string& id, const OverlapMetrics& m) {
  return {{"volume_id", id}, {"dice", m.dice}, {"iou", m.iou}, {"precision", m.precision}, {"recall", m.recall}};
}

OverlapMetrics metrics_json(const nlohmann::json& j) {
  return {j.at("dice").get<double>(), j.at("iou").get<double>(), j.at("precision").get<double>(),
          j.at("recall").get<double>()};
}

}  // namespace

ConfusionCounts confusion(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> truth) {
  if (pred.size() != truth.size()) {
    throw ShapeError("confusion: masks differ in size (" + std::to_string(pred.size()) + " vs " +
                     std::to_string(truth.size()) + ")");
  }
  ConfusionCounts c;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const auto p = pred[i];
    const auto t = truth[i];
    if (p > 1 || t > 1) throw std::invalid_argument("confusion: masks must be binary {0,1}");
    if (p && t) {
      ++c.tp;
    } else if (p) {
      ++c.fp;
    } else if (t) {
      ++c.fn;
    } else {
      ++c.tn;
    }
  }
  return c;
}

OverlapMetrics metrics_from_counts(const ConfusionCounts& c) {
  const auto tp = static_cast<double>(c.tp);
  const auto fp = static_cast<double>(c.fp);
  const auto fn = static_cast<double>(c.fn);
  return {ratio_or_one(2 * tp, 2 * tp + fp + fn), ratio_or_one(tp, tp + fp + fn), ratio_or_one(tp, tp + fp),
          ratio_or_one(tp, tp + fn)};
}

void MetricReport::finalize() {
  if (volumes.empty()) throw std::invalid_argument("MetricReport: no volumes");
  OverlapMetrics sum;
  for (const auto& v : volumes) {
    sum.dice += v.metrics.dice;
    sum.iou += v.metrics.iou;
    sum.precision += v.metrics.precision;
    sum.recall += v.metrics.recall;
  }
  const auto n = static_cast<double>(volumes.size());
  aggregate = {sum.dice / n, sum.iou / n, sum.precision / n, sum.recall / n};
}

nlohmann::json MetricReport::to_json() const {
  nlohmann::json records = nlohmann::json::array();
  for (const auto& v : volumes) {
    auto r = record_json(v.volume_id, v.metrics);
    r["counts"] = {{"tp", v.counts.tp}, {"fp", v.counts.fp}, {"fn", v.counts.fn}, {"tn", v.counts.tn}};
    records.push_back(std::move(r));
  }
  return {{"volumes", std::move(records)},
          {"aggregate", record_json("aggregate", aggregate)},
          {"convention", kEmptyMaskConvention}};
}

MetricReport MetricReport::from_json(const nlohmann::json& j) {
  MetricReport report;
  try {
    for (const auto& r : j.at("volumes")) {
      VolumeRecord v;
      v.volume_id = r.at("volume_id").get<std::string>();
      v.metrics = metrics_json(r);
      if (r.contains("counts")) {
        const auto& c = r.at("counts");
        v.counts = {c.at("tp").get<std::uint64_t>(), c.at("fp").get<std::uint64_t>(), c.at("fn").get<std::uint64_t>(),
                    c.at("tn").get<std::uint64_t>()};
      }
      report.volumes.push_back(std::move(v));
    }
    report.aggregate = metrics_json(j.at("aggregate"));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed metrics file: ") + e.what());
  }
  return report;
}

}  // namespace xnet
