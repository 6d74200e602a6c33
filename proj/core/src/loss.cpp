#include "pgl/loss.hpp"

#include <cmath>

namespace pgl {

namespace {

constexpr double kLogClamp = 1e-7;

template <class T>
void check_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

}  // namespace

template <class T>
Tensor<T> local_consistency(const Tensor<T>& online_pred, const Tensor<T>& target_feat,
                            const LossConfig& cfg) {
  check_same_shape(online_pred, target_feat, "local_consistency");
  if (online_pred.rank() != 5) {
    throw ShapeError("local_consistency: expected NCDHW features, got shape " +
                     shape_str(online_pred.shape()));
  }
  const Tensor<T> a = l2_normalize_channels(online_pred, cfg.l2_eps);
  const Tensor<T> b = l2_normalize_channels(target_feat, cfg.l2_eps);
  const Tensor<T> diff = sub(a, b);
  const Tensor<T> total = sum_all(mul(diff, diff));
  double denom = static_cast<double>(online_pred.dim(0)) * online_pred.dim(2) *
                 online_pred.dim(3) * online_pred.dim(4);
  if (cfg.normalize_channels) {
    denom *= static_cast<double>(online_pred.dim(1));
  }
  return scale(total, 1.0 / denom);
}

template <class T>
Tensor<T> dice_ce_binary(const Tensor<T>& pred_prob, const Tensor<T>& gt, double epsilon) {
  check_same_shape(pred_prob, gt, "dice_ce_binary");
  if (epsilon <= 0) {
    throw ConfigError("dice_ce_binary: epsilon must be positive");
  }
  const auto p = pred_prob.data();
  const auto y = gt.data();
  const auto count = static_cast<double>(p.size());

  double inter = 0.0, denom = 0.0, ce = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double pi = p[i];
    const double yi = y[i];
    inter += pi * yi;
    denom += pi + yi + epsilon;
    ce -= yi * std::log(std::max(pi, kLogClamp)) +
          (1.0 - yi) * std::log(std::max(1.0 - pi, kLogClamp));
  }
  const double dice = 1.0 - 2.0 * inter / denom;
  const double loss = dice + ce / count;

  Tensor<T> result = Tensor<T>::scalar(static_cast<T>(loss));
  autograd::record_custom(
      pred_prob.tracked(), result,
      [pi_ = pred_prob.impl(), yi_ = gt.impl(), oi = result.impl(), inter, denom, count] {
        if (oi->grad.empty()) return;
        const double go = static_cast<double>(oi->grad[0]);
        auto& grad = pi_->grad;
        if (grad.empty()) grad.assign(pi_->data->size(), T(0));
        const auto& p = *pi_->data;
        const auto& y = *yi_->data;
        for (std::size_t i = 0; i < p.size(); ++i) {
          const double pi = p[i];
          const double yi = y[i];
          const double d_dice = -2.0 * (yi * denom - inter) / (denom * denom);
          double d_ce = 0.0;
          if (pi > kLogClamp) d_ce -= yi / pi;
          if (1.0 - pi > kLogClamp) d_ce += (1.0 - yi) / (1.0 - pi);
          grad[i] += static_cast<T>(go * (d_dice + d_ce / count));
        }
      });
  return result;
}

template <class T>
Tensor<T> dice_ce_multiclass(const Tensor<T>& pred_prob, const Tensor<T>& gt_onehot,
                             double epsilon, std::int64_t num_classes) {
  check_same_shape(pred_prob, gt_onehot, "dice_ce_multiclass");
  if (pred_prob.rank() < 2 || pred_prob.dim(1) != num_classes) {
    throw ShapeError("dice_ce_multiclass: prediction has " +
                     std::to_string(pred_prob.rank() >= 2 ? pred_prob.dim(1) : -1) +
                     " classes, config expects " + std::to_string(num_classes));
  }
  if (epsilon <= 0) {
    throw ConfigError("dice_ce_multiclass: epsilon must be positive");
  }
  const std::int64_t n = pred_prob.dim(0);
  std::int64_t spatial = 1;
  for (std::int64_t i = 2; i < pred_prob.rank(); ++i) {
    spatial *= pred_prob.dim(i);
  }
  const std::int64_t plane = n * spatial;  // voxels per class

  const auto p = pred_prob.data();
  const auto y = gt_onehot.data();

  std::vector<double> inter(static_cast<std::size_t>(num_classes), 0.0);
  std::vector<double> denom(static_cast<std::size_t>(num_classes), 0.0);
  double loss = 0.0;
  for (std::int64_t c = 0; c < num_classes; ++c) {
    double ce = 0.0;
    for (std::int64_t in = 0; in < n; ++in) {
      const std::size_t base = static_cast<std::size_t>((in * num_classes + c) * spatial);
      for (std::int64_t s = 0; s < spatial; ++s) {
        const double pi = p[base + static_cast<std::size_t>(s)];
        const double yi = y[base + static_cast<std::size_t>(s)];
        inter[static_cast<std::size_t>(c)] += pi * yi;
        denom[static_cast<std::size_t>(c)] += pi + yi + epsilon;
        ce -= yi * std::log(std::max(pi, kLogClamp));
      }
    }
    const double dice = 1.0 - 2.0 * inter[static_cast<std::size_t>(c)] / denom[static_cast<std::size_t>(c)];
    loss += dice + ce / static_cast<double>(plane);
  }
  loss /= static_cast<double>(num_classes);

  Tensor<T> result = Tensor<T>::scalar(static_cast<T>(loss));
  autograd::record_custom(
      pred_prob.tracked(), result,
      [pi_ = pred_prob.impl(), yi_ = gt_onehot.impl(), oi = result.impl(), inter = std::move(inter),
       denom = std::move(denom), n, spatial, plane, num_classes] {
        if (oi->grad.empty()) return;
        const double go = static_cast<double>(oi->grad[0]) / static_cast<double>(num_classes);
        auto& grad = pi_->grad;
        if (grad.empty()) grad.assign(pi_->data->size(), T(0));
        const auto& p = *pi_->data;
        const auto& y = *yi_->data;
        for (std::int64_t c = 0; c < num_classes; ++c) {
          const double ic = inter[static_cast<std::size_t>(c)];
          const double dc = denom[static_cast<std::size_t>(c)];
          for (std::int64_t in = 0; in < n; ++in) {
            const std::size_t base = static_cast<std::size_t>((in * num_classes + c) * spatial);
            for (std::int64_t s = 0; s < spatial; ++s) {
              const std::size_t i = base + static_cast<std::size_t>(s);
              const double pi = p[i];
              const double yi = y[i];
              const double d_dice = -2.0 * (yi * dc - ic) / (dc * dc);
              double d_ce = 0.0;
              if (pi > kLogClamp) d_ce = -yi / pi;
              grad[i] += static_cast<T>(go * (d_dice + d_ce / static_cast<double>(plane)));
            }
          }
        }
      });
  return result;
}

#define PGL_INSTANTIATE_LOSS(T)                                                               \
  template Tensor<T> local_consistency<T>(const Tensor<T>&, const Tensor<T>&,                \
                                          const LossConfig&);                                \
  template Tensor<T> dice_ce_binary<T>(const Tensor<T>&, const Tensor<T>&, double);          \
  template Tensor<T> dice_ce_multiclass<T>(const Tensor<T>&, const Tensor<T>&, double,       \
                                           std::int64_t);

PGL_INSTANTIATE_LOSS(float)
PGL_INSTANTIATE_LOSS(double)

#undef PGL_INSTANTIATE_LOSS

}  // namespace pgl
