#include "pgl/eval.hpp"

#include <algorithm>
#include <cmath>

namespace pgl {

EvalReport metrics_from_labels(std::span<const std::uint8_t> predicted,
                               std::span<const std::uint8_t> ground_truth,
                               std::int64_t num_classes) {
  if (predicted.size() != ground_truth.size()) {
    throw ShapeError("metrics_from_labels: prediction and ground truth sizes differ");
  }
  EvalReport report;
  for (std::int64_t cls = 1; cls < num_classes; ++cls) {
    ClassMetrics m;
    m.cls = cls;
    for (std::size_t i = 0; i < predicted.size(); ++i) {
      const bool in_pred = predicted[i] == cls;
      const bool in_gt = ground_truth[i] == cls;
      m.pred_voxels += in_pred;
      m.gt_voxels += in_gt;
      m.intersection += in_pred && in_gt;
    }
    if (m.pred_voxels + m.gt_voxels > 0) {
      m.dice = 2.0 * static_cast<double>(m.intersection) /
               static_cast<double>(m.pred_voxels + m.gt_voxels);
      const std::int64_t uni = m.pred_voxels + m.gt_voxels - m.intersection;
      m.iou = static_cast<double>(m.intersection) / static_cast<double>(uni);
    }
    report.per_class.push_back(m);
  }
  if (!report.per_class.empty()) {
    for (const auto& m : report.per_class) {
      report.mean_dice += m.dice;
      report.mean_iou += m.iou;
    }
    report.mean_dice /= static_cast<double>(report.per_class.size());
    report.mean_iou /= static_cast<double>(report.per_class.size());
  }
  return report;
}

std::vector<std::uint8_t> predict_labels(ParamStore& seg, const NetworkConfig& net,
                                         const Volume& volume, Ivec3 window) {
  for (int a = 0; a < 3; ++a) {
    if (volume.dims[a] < window[a]) {
      throw ShapeError(std::string("predict_labels: volume smaller than the window on ") +
                       kAxisNames[a] + " axis");
    }
  }
  const std::int64_t voxels = volume.voxels();
  const std::int64_t classes = net.num_classes;
  std::vector<double> logit_sum(static_cast<std::size_t>(voxels * classes), 0.0);
  std::vector<std::int32_t> counts(static_cast<std::size_t>(voxels), 0);

  // Edge-shifted tiling: windows start at multiples of the window size, the
  // last one slides back to fit.
  std::vector<std::int64_t> starts[3];
  for (int a = 0; a < 3; ++a) {
    for (std::int64_t s = 0;; s += window[a]) {
      if (s + window[a] >= volume.dims[a]) {
        starts[a].push_back(volume.dims[a] - window[a]);
        break;
      }
      starts[a].push_back(s);
    }
  }

  for (const std::int64_t d0 : starts[0]) {
    for (const std::int64_t h0 : starts[1]) {
      for (const std::int64_t w0 : starts[2]) {
        const Patch patch = extract_patch(volume, {d0, h0, w0}, window);
        const Tensor32 input =
            reshape(patch.values, {1, 1, window[0], window[1], window[2]});
        const Tensor32 logits = segment(seg, input, net, /*training=*/false,
                                        /*update_running=*/false);
        const auto ld = logits.data();
        const std::int64_t win_vox = window[0] * window[1] * window[2];
        for (std::int64_t d = 0; d < window[0]; ++d) {
          for (std::int64_t h = 0; h < window[1]; ++h) {
            for (std::int64_t w = 0; w < window[2]; ++w) {
              const std::int64_t vol_idx =
                  ((d0 + d) * volume.dims[1] + (h0 + h)) * volume.dims[2] + (w0 + w);
              const std::int64_t win_idx = (d * window[1] + h) * window[2] + w;
              for (std::int64_t c = 0; c < classes; ++c) {
                logit_sum[static_cast<std::size_t>(vol_idx * classes + c)] +=
                    ld[static_cast<std::size_t>(c * win_vox + win_idx)];
              }
              ++counts[static_cast<std::size_t>(vol_idx)];
            }
          }
        }
      }
    }
  }

  std::vector<std::uint8_t> labels(static_cast<std::size_t>(voxels));
  for (std::int64_t v = 0; v < voxels; ++v) {
    const double* row = logit_sum.data() + v * classes;
    std::int64_t best = 0;
    for (std::int64_t c = 1; c < classes; ++c) {
      if (row[c] > row[best]) {
        best = c;
      }
    }
    labels[static_cast<std::size_t>(v)] = static_cast<std::uint8_t>(best);
  }
  return labels;
}

EvalReport evaluate_volumes(ParamStore& seg, const NetworkConfig& net,
                            std::span<const Volume> volumes, Ivec3 window) {
  std::vector<std::uint8_t> all_pred, all_gt;
  for (const Volume& vol : volumes) {
    if (!vol.has_labels()) {
      throw ConfigError("evaluate_volumes: volume " + vol.provenance + " has no labels");
    }
    const auto pred = predict_labels(seg, net, vol, window);
    all_pred.insert(all_pred.end(), pred.begin(), pred.end());
    all_gt.insert(all_gt.end(), vol.labels.begin(), vol.labels.end());
  }
  return metrics_from_labels(all_pred, all_gt, net.num_classes);
}

}  // namespace pgl
