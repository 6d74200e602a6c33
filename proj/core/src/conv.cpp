#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "pgl/tensor.hpp"

namespace pgl {

namespace {

struct Dims5 {
  std::int64_t n, c, d, h, w;
  std::int64_t spatial() const { return d * h * w; }
};

template <class T>
Dims5 as5(const Tensor<T>& t, const char* op) {
  if (t.rank() != 5) {
    throw ShapeError(std::string(op) + ": expected an NCDHW tensor, got shape " + shape_str(t.shape()));
  }
  return {t.dim(0), t.dim(1), t.dim(2), t.dim(3), t.dim(4)};
}

template <class T>
void accumulate_into(detail::TensorImpl<T>& impl, std::size_t index, T value) {
  if (impl.grad.empty()) {
    impl.grad.assign(impl.data->size(), T(0));
  }
  impl.grad[index] += value;
}

template <class T>
std::vector<T>& grad_vec(detail::TensorImpl<T>& impl) {
  if (impl.grad.empty()) {
    impl.grad.assign(impl.data->size(), T(0));
  }
  return impl.grad;
}

}  // namespace

// ---------------------------------------------------------------------------
// conv3d
// ---------------------------------------------------------------------------

namespace {

struct ConvGeometry {
  Dims5 in;
  std::int64_t c_out = 0;
  std::int64_t c_in_per_group = 0;
  std::int64_t c_out_per_group = 0;
  Ivec3 kernel{};
  Ivec3 out{};
};

template <class T>
ConvGeometry conv_geometry(const Tensor<T>& input, const Tensor<T>& weight,
                           const std::optional<Tensor<T>>& bias, const Conv3dSpec& spec) {
  ConvGeometry geo;
  geo.in = as5(input, "conv3d");
  if (weight.rank() != 5) {
    throw ShapeError("conv3d: weight must be [out, in/groups, kd, kh, kw], got " +
                     shape_str(weight.shape()));
  }
  for (int a = 0; a < 3; ++a) {
    if (spec.stride[a] < 1 || spec.padding[a] < 0 || spec.dilation[a] < 1) {
      throw Error(std::string("conv3d: invalid stride/padding/dilation on ") + kAxisNames[a] +
                  " axis");
    }
  }
  if (spec.groups < 1 || geo.in.c % spec.groups != 0 || weight.dim(0) % spec.groups != 0) {
    throw ShapeError("conv3d: groups " + std::to_string(spec.groups) +
                     " do not divide channel counts (in " + std::to_string(geo.in.c) + ", out " +
                     std::to_string(weight.dim(0)) + ")");
  }
  geo.c_out = weight.dim(0);
  geo.c_in_per_group = geo.in.c / spec.groups;
  geo.c_out_per_group = geo.c_out / spec.groups;
  if (weight.dim(1) != geo.c_in_per_group) {
    throw ShapeError("conv3d: input channels " + std::to_string(geo.in.c) +
                     " incompatible with weight in-channels " + std::to_string(weight.dim(1)) +
                     " * groups " + std::to_string(spec.groups));
  }
  if (bias && (bias->rank() != 1 || bias->dim(0) != geo.c_out)) {
    throw ShapeError("conv3d: bias shape " + shape_str(bias->shape()) + " does not match " +
                     std::to_string(geo.c_out) + " output channels");
  }
  geo.kernel = {weight.dim(2), weight.dim(3), weight.dim(4)};
  const std::int64_t in_size[3] = {geo.in.d, geo.in.h, geo.in.w};
  for (int a = 0; a < 3; ++a) {
    const std::int64_t eff = spec.dilation[a] * (geo.kernel[a] - 1) + 1;
    const std::int64_t num = in_size[a] + 2 * spec.padding[a] - eff;
    if (num < 0) {
      throw ShapeError(std::string("conv3d: kernel does not fit on ") + kAxisNames[a] + " axis (input " +
                       std::to_string(in_size[a]) + ", effective kernel " + std::to_string(eff) +
                       ", padding " + std::to_string(spec.padding[a]) + ")");
    }
    geo.out[a] = num / spec.stride[a] + 1;
  }
  return geo;
}

}  // namespace

template <class T>
Tensor<T> conv3d(const Tensor<T>& input, const Tensor<T>& weight,
                 const std::optional<Tensor<T>>& bias, const Conv3dSpec& spec) {
  const ConvGeometry geo = conv_geometry(input, weight, bias, spec);
  const auto x = input.data();
  const auto w = weight.data();

  std::vector<T> out(static_cast<std::size_t>(geo.in.n * geo.c_out * geo.out[0] * geo.out[1] * geo.out[2]));
  const std::int64_t in_hw = geo.in.h * geo.in.w;
  const std::int64_t k_hw = geo.kernel[1] * geo.kernel[2];

  for (std::int64_t n = 0; n < geo.in.n; ++n) {
    for (std::int64_t oc = 0; oc < geo.c_out; ++oc) {
      const std::int64_t group = oc / geo.c_out_per_group;
      const T bias_v = bias ? bias->data()[static_cast<std::size_t>(oc)] : T(0);
      std::size_t out_idx = static_cast<std::size_t>(((n * geo.c_out + oc) * geo.out[0]) * geo.out[1] * geo.out[2]);
      for (std::int64_t od = 0; od < geo.out[0]; ++od) {
        for (std::int64_t oh = 0; oh < geo.out[1]; ++oh) {
          for (std::int64_t ow = 0; ow < geo.out[2]; ++ow, ++out_idx) {
            T acc = bias_v;
            for (std::int64_t icl = 0; icl < geo.c_in_per_group; ++icl) {
              const std::int64_t ic = group * geo.c_in_per_group + icl;
              const std::size_t x_base = static_cast<std::size_t>((n * geo.in.c + ic) * geo.in.spatial());
              const std::size_t w_base = static_cast<std::size_t>((oc * geo.c_in_per_group + icl) * geo.kernel[0] * k_hw);
              for (std::int64_t kd = 0; kd < geo.kernel[0]; ++kd) {
                const std::int64_t id = od * spec.stride[0] - spec.padding[0] + kd * spec.dilation[0];
                if (id < 0 || id >= geo.in.d) continue;
                for (std::int64_t kh = 0; kh < geo.kernel[1]; ++kh) {
                  const std::int64_t ih = oh * spec.stride[1] - spec.padding[1] + kh * spec.dilation[1];
                  if (ih < 0 || ih >= geo.in.h) continue;
                  for (std::int64_t kw = 0; kw < geo.kernel[2]; ++kw) {
                    const std::int64_t iw = ow * spec.stride[2] - spec.padding[2] + kw * spec.dilation[2];
                    if (iw < 0 || iw >= geo.in.w) continue;
                    acc += x[x_base + static_cast<std::size_t>(id * in_hw + ih * geo.in.w + iw)] *
                           w[w_base + static_cast<std::size_t>(kd * k_hw + kh * geo.kernel[2] + kw)];
                  }
                }
              }
            }
            out[out_idx] = acc;
          }
        }
      }
    }
  }

  Tensor<T> result =
      Tensor<T>::from({geo.in.n, geo.c_out, geo.out[0], geo.out[1], geo.out[2]}, std::move(out));

  const bool tracked = input.tracked() || weight.tracked() || (bias && bias->tracked());
  auto bias_impl = bias ? bias->impl() : nullptr;
  autograd::record_custom(
      tracked, result,
      [xi = input.impl(), wi = weight.impl(), bi = bias_impl, oi = result.impl(), geo, spec, in_hw,
       k_hw] {
        if (oi->grad.empty()) return;
        const auto& go = oi->grad;
        const auto& x = *xi->data;
        const auto& w = *wi->data;
        const bool need_x = xi->tracked;
        const bool need_w = wi->tracked;
        const bool need_b = bi && bi->tracked;
        std::vector<T>* gx = need_x ? &grad_vec(*xi) : nullptr;
        std::vector<T>* gw = need_w ? &grad_vec(*wi) : nullptr;
        std::vector<T>* gb = need_b ? &grad_vec(*bi) : nullptr;

        for (std::int64_t n = 0; n < geo.in.n; ++n) {
          for (std::int64_t oc = 0; oc < geo.c_out; ++oc) {
            const std::int64_t group = oc / geo.c_out_per_group;
            std::size_t out_idx =
                static_cast<std::size_t>(((n * geo.c_out + oc) * geo.out[0]) * geo.out[1] * geo.out[2]);
            for (std::int64_t od = 0; od < geo.out[0]; ++od) {
              for (std::int64_t oh = 0; oh < geo.out[1]; ++oh) {
                for (std::int64_t ow = 0; ow < geo.out[2]; ++ow, ++out_idx) {
                  const T g = go[out_idx];
                  if (g == T(0)) continue;
                  if (need_b) {
                    (*gb)[static_cast<std::size_t>(oc)] += g;
                  }
                  if (!need_x && !need_w) continue;
                  for (std::int64_t icl = 0; icl < geo.c_in_per_group; ++icl) {
                    const std::int64_t ic = group * geo.c_in_per_group + icl;
                    const std::size_t x_base =
                        static_cast<std::size_t>((n * geo.in.c + ic) * geo.in.spatial());
                    const std::size_t w_base = static_cast<std::size_t>(
                        (oc * geo.c_in_per_group + icl) * geo.kernel[0] * k_hw);
                    for (std::int64_t kd = 0; kd < geo.kernel[0]; ++kd) {
                      const std::int64_t id = od * spec.stride[0] - spec.padding[0] + kd * spec.dilation[0];
                      if (id < 0 || id >= geo.in.d) continue;
                      for (std::int64_t kh = 0; kh < geo.kernel[1]; ++kh) {
                        const std::int64_t ih = oh * spec.stride[1] - spec.padding[1] + kh * spec.dilation[1];
                        if (ih < 0 || ih >= geo.in.h) continue;
                        for (std::int64_t kw = 0; kw < geo.kernel[2]; ++kw) {
                          const std::int64_t iw = ow * spec.stride[2] - spec.padding[2] + kw * spec.dilation[2];
                          if (iw < 0 || iw >= geo.in.w) continue;
                          const std::size_t xi_idx =
                              x_base + static_cast<std::size_t>(id * in_hw + ih * geo.in.w + iw);
                          const std::size_t wi_idx =
                              w_base + static_cast<std::size_t>(kd * k_hw + kh * geo.kernel[2] + kw);
                          if (need_x) (*gx)[xi_idx] += g * w[wi_idx];
                          if (need_w) (*gw)[wi_idx] += g * x[xi_idx];
                        }
                      }
                    }
                  }
                }
              }
            }
          }
        }
      });
  return result;
}

// ---------------------------------------------------------------------------
// conv_transpose3d
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> conv_transpose3d(const Tensor<T>& input, const Tensor<T>& weight,
                           const std::optional<Tensor<T>>& bias, Ivec3 stride) {
  const Dims5 in = as5(input, "conv_transpose3d");
  if (weight.rank() != 5) {
    throw ShapeError("conv_transpose3d: weight must be [in, out, kd, kh, kw], got " +
                     shape_str(weight.shape()));
  }
  if (weight.dim(0) != in.c) {
    throw ShapeError("conv_transpose3d: input channels " + std::to_string(in.c) +
                     " incompatible with weight in-channels " + std::to_string(weight.dim(0)));
  }
  for (int a = 0; a < 3; ++a) {
    if (stride[a] < 1) {
      throw Error(std::string("conv_transpose3d: invalid stride on ") + kAxisNames[a] + " axis");
    }
  }
  const std::int64_t c_out = weight.dim(1);
  const Ivec3 kernel{weight.dim(2), weight.dim(3), weight.dim(4)};
  if (bias && (bias->rank() != 1 || bias->dim(0) != c_out)) {
    throw ShapeError("conv_transpose3d: bias shape " + shape_str(bias->shape()) +
                     " does not match " + std::to_string(c_out) + " output channels");
  }
  const Ivec3 out{(in.d - 1) * stride[0] + kernel[0], (in.h - 1) * stride[1] + kernel[1],
                  (in.w - 1) * stride[2] + kernel[2]};
  const std::int64_t out_spatial = out[0] * out[1] * out[2];
  const std::int64_t k_hw = kernel[1] * kernel[2];

  std::vector<T> out_data(static_cast<std::size_t>(in.n * c_out * out_spatial));
  if (bias) {
    const auto b = bias->data();
    for (std::int64_t n = 0; n < in.n; ++n) {
      for (std::int64_t oc = 0; oc < c_out; ++oc) {
        const std::size_t base = static_cast<std::size_t>((n * c_out + oc) * out_spatial);
        std::fill_n(out_data.data() + base, static_cast<std::size_t>(out_spatial),
                    b[static_cast<std::size_t>(oc)]);
      }
    }
  }

  const auto x = input.data();
  const auto w = weight.data();
  for (std::int64_t n = 0; n < in.n; ++n) {
    for (std::int64_t ic = 0; ic < in.c; ++ic) {
      const std::size_t x_base = static_cast<std::size_t>((n * in.c + ic) * in.spatial());
      for (std::int64_t id = 0; id < in.d; ++id) {
        for (std::int64_t ih = 0; ih < in.h; ++ih) {
          for (std::int64_t iw = 0; iw < in.w; ++iw) {
            const T xv = x[x_base + static_cast<std::size_t>((id * in.h + ih) * in.w + iw)];
            if (xv == T(0)) continue;
            for (std::int64_t oc = 0; oc < c_out; ++oc) {
              const std::size_t w_base =
                  static_cast<std::size_t>((ic * c_out + oc) * kernel[0] * k_hw);
              const std::size_t o_base = static_cast<std::size_t>((n * c_out + oc) * out_spatial);
              for (std::int64_t kd = 0; kd < kernel[0]; ++kd) {
                const std::int64_t od = id * stride[0] + kd;
                for (std::int64_t kh = 0; kh < kernel[1]; ++kh) {
                  const std::int64_t oh = ih * stride[1] + kh;
                  for (std::int64_t kw = 0; kw < kernel[2]; ++kw) {
                    const std::int64_t ow = iw * stride[2] + kw;
                    out_data[o_base + static_cast<std::size_t>((od * out[1] + oh) * out[2] + ow)] +=
                        xv * w[w_base + static_cast<std::size_t>(kd * k_hw + kh * kernel[2] + kw)];
                  }
                }
              }
            }
          }
        }
      }
    }
  }

  Tensor<T> result = Tensor<T>::from({in.n, c_out, out[0], out[1], out[2]}, std::move(out_data));
  const bool tracked = input.tracked() || weight.tracked() || (bias && bias->tracked());
  auto bias_impl = bias ? bias->impl() : nullptr;
  autograd::record_custom(
      tracked, result,
      [xi = input.impl(), wi = weight.impl(), bi = bias_impl, oi = result.impl(), in, c_out, kernel,
       stride, out, out_spatial, k_hw] {
        if (oi->grad.empty()) return;
        const auto& go = oi->grad;
        const auto& x = *xi->data;
        const auto& w = *wi->data;
        const bool need_x = xi->tracked;
        const bool need_w = wi->tracked;
        if (bi && bi->tracked) {
          auto& gb = grad_vec(*bi);
          for (std::int64_t n = 0; n < in.n; ++n) {
            for (std::int64_t oc = 0; oc < c_out; ++oc) {
              const std::size_t base = static_cast<std::size_t>((n * c_out + oc) * out_spatial);
              T sum = T(0);
              for (std::int64_t s = 0; s < out_spatial; ++s) {
                sum += go[base + static_cast<std::size_t>(s)];
              }
              gb[static_cast<std::size_t>(oc)] += sum;
            }
          }
        }
        if (!need_x && !need_w) return;
        std::vector<T>* gx = need_x ? &grad_vec(*xi) : nullptr;
        std::vector<T>* gw = need_w ? &grad_vec(*wi) : nullptr;
        for (std::int64_t n = 0; n < in.n; ++n) {
          for (std::int64_t ic = 0; ic < in.c; ++ic) {
            const std::size_t x_base = static_cast<std::size_t>((n * in.c + ic) * in.spatial());
            for (std::int64_t id = 0; id < in.d; ++id) {
              for (std::int64_t ih = 0; ih < in.h; ++ih) {
                for (std::int64_t iw = 0; iw < in.w; ++iw) {
                  const std::size_t xi_idx =
                      x_base + static_cast<std::size_t>((id * in.h + ih) * in.w + iw);
                  T gx_acc = T(0);
                  for (std::int64_t oc = 0; oc < c_out; ++oc) {
                    const std::size_t w_base =
                        static_cast<std::size_t>((ic * c_out + oc) * kernel[0] * k_hw);
                    const std::size_t o_base =
                        static_cast<std::size_t>((n * c_out + oc) * out_spatial);
                    for (std::int64_t kd = 0; kd < kernel[0]; ++kd) {
                      const std::int64_t od = id * stride[0] + kd;
                      for (std::int64_t kh = 0; kh < kernel[1]; ++kh) {
                        const std::int64_t oh = ih * stride[1] + kh;
                        for (std::int64_t kw = 0; kw < kernel[2]; ++kw) {
                          const std::int64_t ow = iw * stride[2] + kw;
                          const T g = go[o_base + static_cast<std::size_t>(
                                                      (od * out[1] + oh) * out[2] + ow)];
                          const std::size_t wi_idx =
                              w_base + static_cast<std::size_t>(kd * k_hw + kh * kernel[2] + kw);
                          if (need_x) gx_acc += g * w[wi_idx];
                          if (need_w) (*gw)[wi_idx] += g * x[xi_idx];
                        }
                      }
                    }
                  }
                  if (need_x) (*gx)[xi_idx] += gx_acc;
                }
              }
            }
          }
        }
      });
  return result;
}

// ---------------------------------------------------------------------------
// batchnorm3d
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> batchnorm3d(const Tensor<T>& input, const Tensor<T>& gamma, const Tensor<T>& beta,
                      Tensor<T>& running_mean, Tensor<T>& running_var, double momentum, double eps,
                      bool training, bool update_running) {
  const Dims5 in = as5(input, "batchnorm3d");
  if (eps <= 0) {
    throw Error("batchnorm3d: eps must be positive");
  }
  for (const Tensor<T>* p :
       {&gamma, &beta, static_cast<const Tensor<T>*>(&running_mean),
        static_cast<const Tensor<T>*>(&running_var)}) {
    if (p->rank() != 1 || p->dim(0) != in.c) {
      throw ShapeError("batchnorm3d: per-channel parameter of shape " + shape_str(p->shape()) +
                       " does not match " + std::to_string(in.c) + " channels");
    }
  }
  const std::int64_t m = in.n * in.spatial();
  if (training && m <= 1) {
    throw ShapeError("batchnorm3d: training batch has a single element per channel; variance undefined");
  }

  const auto x = input.data();
  const auto g = gamma.data();
  const auto b = beta.data();

  // Per-channel statistics used for normalization: batch stats in training,
  // running stats in eval.
  std::vector<T> mean(static_cast<std::size_t>(in.c));
  std::vector<T> inv_std(static_cast<std::size_t>(in.c));
  const std::int64_t vox = in.spatial();

  if (training) {
    for (std::int64_t c = 0; c < in.c; ++c) {
      double sum = 0.0;
      for (std::int64_t n = 0; n < in.n; ++n) {
        const std::size_t base = static_cast<std::size_t>((n * in.c + c) * vox);
        for (std::int64_t s = 0; s < vox; ++s) {
          sum += static_cast<double>(x[base + static_cast<std::size_t>(s)]);
        }
      }
      const double mu = sum / static_cast<double>(m);
      double sq = 0.0;
      for (std::int64_t n = 0; n < in.n; ++n) {
        const std::size_t base = static_cast<std::size_t>((n * in.c + c) * vox);
        for (std::int64_t s = 0; s < vox; ++s) {
          const double d = static_cast<double>(x[base + static_cast<std::size_t>(s)]) - mu;
          sq += d * d;
        }
      }
      const double var = sq / static_cast<double>(m);
      mean[static_cast<std::size_t>(c)] = static_cast<T>(mu);
      inv_std[static_cast<std::size_t>(c)] = static_cast<T>(1.0 / std::sqrt(var + eps));
      if (update_running) {
        auto rm = running_mean.mutable_data();
        auto rv = running_var.mutable_data();
        const double unbiased = var * static_cast<double>(m) / static_cast<double>(m - 1);
        rm[static_cast<std::size_t>(c)] = static_cast<T>(
            (1.0 - momentum) * static_cast<double>(rm[static_cast<std::size_t>(c)]) + momentum * mu);
        rv[static_cast<std::size_t>(c)] = static_cast<T>(
            (1.0 - momentum) * static_cast<double>(rv[static_cast<std::size_t>(c)]) +
            momentum * unbiased);
      }
    }
  } else {
    const auto rm = running_mean.data();
    const auto rv = running_var.data();
    for (std::int64_t c = 0; c < in.c; ++c) {
      mean[static_cast<std::size_t>(c)] = rm[static_cast<std::size_t>(c)];
      inv_std[static_cast<std::size_t>(c)] =
          static_cast<T>(1.0 / std::sqrt(static_cast<double>(rv[static_cast<std::size_t>(c)]) + eps));
    }
  }

  std::vector<T> out(x.size());
  for (std::int64_t n = 0; n < in.n; ++n) {
    for (std::int64_t c = 0; c < in.c; ++c) {
      const std::size_t base = static_cast<std::size_t>((n * in.c + c) * vox);
      const T mu = mean[static_cast<std::size_t>(c)];
      const T inv = inv_std[static_cast<std::size_t>(c)];
      const T gc = g[static_cast<std::size_t>(c)];
      const T bc = b[static_cast<std::size_t>(c)];
      for (std::int64_t s = 0; s < vox; ++s) {
        const std::size_t i = base + static_cast<std::size_t>(s);
        out[i] = gc * (x[i] - mu) * inv + bc;
      }
    }
  }

  Tensor<T> result = Tensor<T>::from(input.shape(), std::move(out));
  const bool tracked = input.tracked() || gamma.tracked() || beta.tracked();
  autograd::record_custom(
      tracked, result,
      [xi = input.impl(), gi = gamma.impl(), bi = beta.impl(), oi = result.impl(),
       mean = std::move(mean), inv_std = std::move(inv_std), in, vox, m, training] {
        if (oi->grad.empty()) return;
        const auto& go = oi->grad;
        const auto& x = *xi->data;
        const auto& g = *gi->data;
        const bool need_x = xi->tracked;
        const bool need_g = gi->tracked;
        const bool need_b = bi->tracked;
        std::vector<T>* gx = need_x ? &grad_vec(*xi) : nullptr;
        std::vector<T>* gg = need_g ? &grad_vec(*gi) : nullptr;
        std::vector<T>* gb = need_b ? &grad_vec(*bi) : nullptr;

        for (std::int64_t c = 0; c < in.c; ++c) {
          const double mu = static_cast<double>(mean[static_cast<std::size_t>(c)]);
          const double inv = static_cast<double>(inv_std[static_cast<std::size_t>(c)]);
          double sum_go = 0.0;
          double sum_go_xhat = 0.0;
          for (std::int64_t n = 0; n < in.n; ++n) {
            const std::size_t base = static_cast<std::size_t>((n * in.c + c) * vox);
            for (std::int64_t s = 0; s < vox; ++s) {
              const std::size_t i = base + static_cast<std::size_t>(s);
              const double xhat = (static_cast<double>(x[i]) - mu) * inv;
              sum_go += static_cast<double>(go[i]);
              sum_go_xhat += static_cast<double>(go[i]) * xhat;
            }
          }
          if (need_b) {
            (*gb)[static_cast<std::size_t>(c)] += static_cast<T>(sum_go);
          }
          if (need_g) {
            (*gg)[static_cast<std::size_t>(c)] += static_cast<T>(sum_go_xhat);
          }
          if (need_x) {
            const double gc = static_cast<double>(g[static_cast<std::size_t>(c)]);
            if (training) {
              const double mean_go = sum_go / static_cast<double>(m);
              const double mean_go_xhat = sum_go_xhat / static_cast<double>(m);
              for (std::int64_t n = 0; n < in.n; ++n) {
                const std::size_t base = static_cast<std::size_t>((n * in.c + c) * vox);
                for (std::int64_t s = 0; s < vox; ++s) {
                  const std::size_t i = base + static_cast<std::size_t>(s);
                  const double xhat = (static_cast<double>(x[i]) - mu) * inv;
                  (*gx)[i] += static_cast<T>(
                      gc * inv * (static_cast<double>(go[i]) - mean_go - xhat * mean_go_xhat));
                }
              }
            } else {
              for (std::int64_t n = 0; n < in.n; ++n) {
                const std::size_t base = static_cast<std::size_t>((n * in.c + c) * vox);
                for (std::int64_t s = 0; s < vox; ++s) {
                  const std::size_t i = base + static_cast<std::size_t>(s);
                  (*gx)[i] += static_cast<T>(gc * inv * static_cast<double>(go[i]));
                }
              }
            }
          }
        }
      });
  return result;
}

// ---------------------------------------------------------------------------
// Explicit instantiations
// ---------------------------------------------------------------------------

#define PGL_INSTANTIATE_CONV(T)                                                            \
  template Tensor<T> conv3d<T>(const Tensor<T>&, const Tensor<T>&,                        \
                               const std::optional<Tensor<T>>&, const Conv3dSpec&);       \
  template Tensor<T> conv_transpose3d<T>(const Tensor<T>&, const Tensor<T>&,              \
                                         const std::optional<Tensor<T>>&, Ivec3);         \
  template Tensor<T> batchnorm3d<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, \
                                    Tensor<T>&, Tensor<T>&, double, double, bool, bool);

PGL_INSTANTIATE_CONV(float)
PGL_INSTANTIATE_CONV(double)

#undef PGL_INSTANTIATE_CONV

}  // namespace pgl
