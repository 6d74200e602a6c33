#include "pgl/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <sstream>

namespace pgl {

std::int64_t shape_numel(const Shape& shape) {
  std::int64_t n = 1;
  for (std::int64_t d : shape) {
    n *= d;
  }
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream out;
  out << "(";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i > 0) out << ",";
    out << shape[i];
  }
  out << ")";
  return out.str();
}

namespace {

template <class T>
std::shared_ptr<detail::TensorImpl<T>> make_impl(Shape shape, std::vector<T> values) {
  auto impl = std::make_shared<detail::TensorImpl<T>>();
  impl->shape = std::move(shape);
  impl->data = std::make_shared<std::vector<T>>(std::move(values));
  return impl;
}

template <class T>
void accumulate(detail::TensorImpl<T>& impl, std::span<const T> contribution) {
  if (impl.grad.empty()) {
    impl.grad.assign(impl.data->size(), T(0));
  }
  for (std::size_t i = 0; i < contribution.size(); ++i) {
    impl.grad[i] += contribution[i];
  }
}

template <class T>
std::span<T> grad_of(const std::shared_ptr<detail::TensorImpl<T>>& impl) {
  if (impl->grad.empty()) {
    impl->grad.assign(impl->data->size(), T(0));
  }
  return {impl->grad.data(), impl->grad.size()};
}

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

#ifndef NDEBUG
template <class T>
void debug_check_finite(const Tensor<T>& t, const char* op) {
  for (T v : t.data()) {
    if (!std::isfinite(static_cast<double>(v))) {
      throw NumericError(std::string(op) + ": produced a non-finite value");
    }
  }
}
#else
template <class T>
void debug_check_finite(const Tensor<T>&, const char*) {}
#endif

}  // namespace

// ---------------------------------------------------------------------------
// Tensor
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> Tensor<T>::zeros(Shape shape) {
  const auto n = static_cast<std::size_t>(shape_numel(shape));
  return Tensor(make_impl<T>(std::move(shape), std::vector<T>(n, T(0))));
}

template <class T>
Tensor<T> Tensor<T>::full(Shape shape, T value) {
  const auto n = static_cast<std::size_t>(shape_numel(shape));
  return Tensor(make_impl<T>(std::move(shape), std::vector<T>(n, value)));
}

template <class T>
Tensor<T> Tensor<T>::from(Shape shape, std::vector<T> values) {
  if (shape_numel(shape) != static_cast<std::int64_t>(values.size())) {
    throw ShapeError("Tensor::from: " + std::to_string(values.size()) +
                     " values do not fill shape " + shape_str(shape));
  }
  return Tensor(make_impl<T>(std::move(shape), std::move(values)));
}

template <class T>
Tensor<T> Tensor<T>::scalar(T value) {
  return Tensor(make_impl<T>(Shape{}, std::vector<T>{value}));
}

template <class T>
T Tensor<T>::item() const {
  if (numel() != 1) {
    throw ShapeError("Tensor::item: tensor of shape " + shape_str(shape()) + " is not a scalar");
  }
  return (*impl_->data)[0];
}

template <class T>
Tensor<T>& Tensor<T>::set_requires_grad(bool value) {
  impl_->requires_grad = value;
  impl_->tracked = value || impl_->tracked;
  return *this;
}

template <class T>
std::span<T> Tensor<T>::grad_buffer() {
  return grad_of(impl_);
}

template <class T>
void Tensor<T>::zero_grad() {
  std::fill(impl_->grad.begin(), impl_->grad.end(), T(0));
}

template <class T>
Tensor<T> Tensor<T>::detached_view() const {
  auto impl = std::make_shared<detail::TensorImpl<T>>();
  impl->shape = impl_->shape;
  impl->data = impl_->data;
  return Tensor(std::move(impl));
}

template <class T>
Tensor<T> Tensor<T>::clone_data() const {
  return Tensor(make_impl<T>(impl_->shape, *impl_->data));
}

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

namespace {
template <class T>
Tape<T>*& active_tape() {
  thread_local Tape<T>* tape = nullptr;
  return tape;
}
}  // namespace

template <class T>
Tape<T>* Tape<T>::active() {
  return active_tape<T>();
}

template <class T>
void Tape<T>::record(std::shared_ptr<detail::TensorImpl<T>> output, std::function<void()> backward) {
  nodes_.push_back(Node{std::move(output), std::move(backward)});
}

template <class T>
void Tape<T>::backward(const Tensor<T>& loss) {
  if (loss.rank() != 0) {
    throw ShapeError("Tape::backward: loss of shape " + shape_str(loss.shape()) + " is not a scalar");
  }
  if (!loss.tracked()) {
    throw Error("Tape::backward: loss was not recorded on a tape");
  }
  grad_of(loss.impl())[0] += T(1);
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    it->backward();
  }
  // Leaf gradients persist; intermediate gradients are scratch space and must
  // not leak into a later backward pass over the same tape.
  for (auto& node : nodes_) {
    if (!node.output->requires_grad) {
      node.output->grad.clear();
    }
  }
}

template <class T>
Tape<T>::Scope::Scope(Tape* tape) : previous_(active_tape<T>()) {
  active_tape<T>() = tape;
}

template <class T>
Tape<T>::Scope::~Scope() {
  active_tape<T>() = previous_;
}

// ---------------------------------------------------------------------------
// Elementwise operations
// ---------------------------------------------------------------------------

namespace {

template <class T>
void check_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

}  // namespace

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  check_same_shape(a, b, "add");
  const auto ad = a.data();
  const auto bd = b.data();
  std::vector<T> out(ad.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = ad[i] + bd[i];
  }
  Tensor<T> result = Tensor<T>::from(a.shape(), std::move(out));
  autograd::record_custom(a.tracked() || b.tracked(), result,
                          [ai = a.impl(), bi = b.impl(), oi = result.impl()] {
                            if (oi->grad.empty()) return;
                            std::span<const T> go{oi->grad.data(), oi->grad.size()};
                            if (ai->tracked) accumulate(*ai, go);
                            if (bi->tracked) accumulate(*bi, go);
                          });
  debug_check_finite(result, "add");
  return result;
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  check_same_shape(a, b, "sub");
  const auto ad = a.data();
  const auto bd = b.data();
  std::vector<T> out(ad.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = ad[i] - bd[i];
  }
  Tensor<T> result = Tensor<T>::from(a.shape(), std::move(out));
  autograd::record_custom(a.tracked() || b.tracked(), result,
                          [ai = a.impl(), bi = b.impl(), oi = result.impl()] {
                            if (oi->grad.empty()) return;
                            if (ai->tracked) {
                              accumulate(*ai, std::span<const T>{oi->grad.data(), oi->grad.size()});
                            }
                            if (bi->tracked) {
                              auto g = grad_of(bi);
                              for (std::size_t i = 0; i < g.size(); ++i) {
                                g[i] -= oi->grad[i];
                              }
                            }
                          });
  debug_check_finite(result, "sub");
  return result;
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  check_same_shape(a, b, "mul");
  const auto ad = a.data();
  const auto bd = b.data();
  std::vector<T> out(ad.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = ad[i] * bd[i];
  }
  Tensor<T> result = Tensor<T>::from(a.shape(), std::move(out));
  autograd::record_custom(a.tracked() || b.tracked(), result,
                          [ai = a.impl(), bi = b.impl(), oi = result.impl()] {
                            if (oi->grad.empty()) return;
                            if (ai->tracked) {
                              auto g = grad_of(ai);
                              for (std::size_t i = 0; i < g.size(); ++i) {
                                g[i] += oi->grad[i] * (*bi->data)[i];
                              }
                            }
                            if (bi->tracked) {
                              auto g = grad_of(bi);
                              for (std::size_t i = 0; i < g.size(); ++i) {
                                g[i] += oi->grad[i] * (*ai->data)[i];
                              }
                            }
                          });
  debug_check_finite(result, "mul");
  return result;
}

template <class T>
Tensor<T> scale(const Tensor<T>& x, double factor) {
  const auto xd = x.data();
  std::vector<T> out(xd.size());
  const T f = static_cast<T>(factor);
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = xd[i] * f;
  }
  Tensor<T> result = Tensor<T>::from(x.shape(), std::move(out));
  autograd::record_custom(x.tracked(), result, [xi = x.impl(), oi = result.impl(), f] {
    if (oi->grad.empty()) return;
    auto g = grad_of(xi);
    for (std::size_t i = 0; i < g.size(); ++i) {
      g[i] += oi->grad[i] * f;
    }
  });
  debug_check_finite(result, "scale");
  return result;
}

template <class T>
Tensor<T> relu(const Tensor<T>& x) {
  const auto xd = x.data();
  std::vector<T> out(xd.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = xd[i] > T(0) ? xd[i] : T(0);
  }
  Tensor<T> result = Tensor<T>::from(x.shape(), std::move(out));
  autograd::record_custom(x.tracked(), result, [xi = x.impl(), oi = result.impl()] {
    if (oi->grad.empty()) return;
    auto g = grad_of(xi);
    for (std::size_t i = 0; i < g.size(); ++i) {
      if ((*xi->data)[i] > T(0)) {
        g[i] += oi->grad[i];
      }
    }
  });
  debug_check_finite(result, "relu");
  return result;
}

template <class T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  const auto xd = x.data();
  std::vector<T> out(xd.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = T(1) / (T(1) + std::exp(-xd[i]));
  }
  Tensor<T> result = Tensor<T>::from(x.shape(), std::move(out));
  autograd::record_custom(x.tracked(), result, [xi = x.impl(), oi = result.impl()] {
    if (oi->grad.empty()) return;
    auto g = grad_of(xi);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const T y = (*oi->data)[i];
      g[i] += oi->grad[i] * y * (T(1) - y);
    }
  });
  debug_check_finite(result, "sigmoid");
  return result;
}

template <class T>
Tensor<T> softmax_channels(const Tensor<T>& x) {
  if (x.rank() < 2) {
    throw ShapeError("softmax_channels: expected an NC... tensor, got shape " + shape_str(x.shape()));
  }
  const std::int64_t n = x.dim(0);
  const std::int64_t c = x.dim(1);
  std::int64_t spatial = 1;
  for (std::int64_t i = 2; i < x.rank(); ++i) {
    spatial *= x.dim(i);
  }
  const auto xd = x.data();
  std::vector<T> out(xd.size());
  for (std::int64_t in = 0; in < n; ++in) {
    for (std::int64_t s = 0; s < spatial; ++s) {
      const std::size_t base = static_cast<std::size_t>(in * c * spatial + s);
      T max_v = xd[base];
      for (std::int64_t ic = 1; ic < c; ++ic) {
        max_v = std::max(max_v, xd[base + static_cast<std::size_t>(ic * spatial)]);
      }
      T sum = T(0);
      for (std::int64_t ic = 0; ic < c; ++ic) {
        const std::size_t idx = base + static_cast<std::size_t>(ic * spatial);
        out[idx] = std::exp(xd[idx] - max_v);
        sum += out[idx];
      }
      for (std::int64_t ic = 0; ic < c; ++ic) {
        out[base + static_cast<std::size_t>(ic * spatial)] /= sum;
      }
    }
  }
  Tensor<T> result = Tensor<T>::from(x.shape(), std::move(out));
  autograd::record_custom(x.tracked(), result, [xi = x.impl(), oi = result.impl(), n, c, spatial] {
    if (oi->grad.empty()) return;
    auto g = grad_of(xi);
    const auto& y = *oi->data;
    const auto& go = oi->grad;
    for (std::int64_t in = 0; in < n; ++in) {
      for (std::int64_t s = 0; s < spatial; ++s) {
        const std::size_t base = static_cast<std::size_t>(in * c * spatial + s);
        T dot = T(0);
        for (std::int64_t ic = 0; ic < c; ++ic) {
          const std::size_t idx = base + static_cast<std::size_t>(ic * spatial);
          dot += go[idx] * y[idx];
        }
        for (std::int64_t ic = 0; ic < c; ++ic) {
          const std::size_t idx = base + static_cast<std::size_t>(ic * spatial);
          g[idx] += y[idx] * (go[idx] - dot);
        }
      }
    }
  });
  debug_check_finite(result, "softmax_channels");
  return result;
}

template <class T>
Tensor<T> sum_all(const Tensor<T>& x) {
  T sum = T(0);
  for (T v : x.data()) {
    sum += v;
  }
  Tensor<T> result = Tensor<T>::scalar(sum);
  autograd::record_custom(x.tracked(), result, [xi = x.impl(), oi = result.impl()] {
    if (oi->grad.empty()) return;
    const T go = oi->grad[0];
    auto g = grad_of(xi);
    for (std::size_t i = 0; i < g.size(); ++i) {
      g[i] += go;
    }
  });
  return result;
}

template <class T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  const Dims5 dims = as5(x, "global_avg_pool");
  const auto xd = x.data();
  std::vector<T> out(static_cast<std::size_t>(dims.n * dims.c));
  const std::int64_t vox = dims.spatial();
  for (std::int64_t n = 0; n < dims.n; ++n) {
    for (std::int64_t c = 0; c < dims.c; ++c) {
      const std::size_t base = static_cast<std::size_t>((n * dims.c + c) * vox);
      T sum = T(0);
      for (std::int64_t s = 0; s < vox; ++s) {
        sum += xd[base + static_cast<std::size_t>(s)];
      }
      out[static_cast<std::size_t>(n * dims.c + c)] = sum / static_cast<T>(vox);
    }
  }
  Tensor<T> result = Tensor<T>::from({dims.n, dims.c, 1, 1, 1}, std::move(out));
  autograd::record_custom(x.tracked(), result, [xi = x.impl(), oi = result.impl(), dims, vox] {
    if (oi->grad.empty()) return;
    auto g = grad_of(xi);
    for (std::int64_t n = 0; n < dims.n; ++n) {
      for (std::int64_t c = 0; c < dims.c; ++c) {
        const T go = oi->grad[static_cast<std::size_t>(n * dims.c + c)] / static_cast<T>(vox);
        const std::size_t base = static_cast<std::size_t>((n * dims.c + c) * vox);
        for (std::int64_t s = 0; s < vox; ++s) {
          g[base + static_cast<std::size_t>(s)] += go;
        }
      }
    }
  });
  return result;
}

template <class T>
Tensor<T> concat_channels(std::span<const Tensor<T>> parts) {
  if (parts.empty()) {
    throw ShapeError("concat_channels: no inputs");
  }
  const Dims5 first = as5(parts[0], "concat_channels");
  std::int64_t total_c = 0;
  bool tracked = false;
  for (const auto& p : parts) {
    const Dims5 dims = as5(p, "concat_channels");
    if (dims.n != first.n || dims.d != first.d || dims.h != first.h || dims.w != first.w) {
      throw ShapeError("concat_channels: shape mismatch " + shape_str(p.shape()) + " vs " +
                       shape_str(parts[0].shape()));
    }
    total_c += dims.c;
    tracked = tracked || p.tracked();
  }
  const std::int64_t vox = first.spatial();
  std::vector<T> out(static_cast<std::size_t>(first.n * total_c * vox));
  std::int64_t c_offset = 0;
  for (const auto& p : parts) {
    const std::int64_t pc = p.dim(1);
    const auto pd = p.data();
    for (std::int64_t n = 0; n < first.n; ++n) {
      const std::size_t src = static_cast<std::size_t>(n * pc * vox);
      const std::size_t dst = static_cast<std::size_t>((n * total_c + c_offset) * vox);
      std::copy_n(pd.data() + src, static_cast<std::size_t>(pc * vox), out.data() + dst);
    }
    c_offset += pc;
  }
  Tensor<T> result = Tensor<T>::from({first.n, total_c, first.d, first.h, first.w}, std::move(out));

  std::vector<std::shared_ptr<detail::TensorImpl<T>>> impls;
  impls.reserve(parts.size());
  for (const auto& p : parts) {
    impls.push_back(p.impl());
  }
  autograd::record_custom(tracked, result,
                          [impls = std::move(impls), oi = result.impl(), first, total_c, vox] {
                            if (oi->grad.empty()) return;
                            std::int64_t c_offset = 0;
                            for (const auto& pi : impls) {
                              const auto pc = pi->shape[1];
                              if (pi->tracked) {
                                auto g = grad_of(pi);
                                for (std::int64_t n = 0; n < first.n; ++n) {
                                  const std::size_t dst = static_cast<std::size_t>(n * pc * vox);
                                  const std::size_t src =
                                      static_cast<std::size_t>((n * total_c + c_offset) * vox);
                                  for (std::size_t i = 0; i < static_cast<std::size_t>(pc * vox); ++i) {
                                    g[dst + i] += oi->grad[src + i];
                                  }
                                }
                              }
                              c_offset += pc;
                            }
                          });
  return result;
}

template <class T>
Tensor<T> select_batch(const Tensor<T>& x, std::span<const std::int64_t> indices) {
  if (x.rank() < 1) {
    throw ShapeError("select_batch: input must have a batch axis");
  }
  const std::int64_t n = x.dim(0);
  std::int64_t row = 1;
  for (std::int64_t i = 1; i < x.rank(); ++i) {
    row *= x.dim(i);
  }
  for (std::int64_t idx : indices) {
    if (idx < 0 || idx >= n) {
      throw ShapeError("select_batch: index " + std::to_string(idx) + " out of range [0," +
                       std::to_string(n) + ")");
    }
  }
  Shape out_shape = x.shape();
  out_shape[0] = static_cast<std::int64_t>(indices.size());
  std::vector<T> out(static_cast<std::size_t>(row) * indices.size());
  const auto xd = x.data();
  for (std::size_t i = 0; i < indices.size(); ++i) {
    std::copy_n(xd.data() + static_cast<std::size_t>(indices[i] * row), static_cast<std::size_t>(row),
                out.data() + i * static_cast<std::size_t>(row));
  }
  Tensor<T> result = Tensor<T>::from(std::move(out_shape), std::move(out));
  std::vector<std::int64_t> idx_copy(indices.begin(), indices.end());
  autograd::record_custom(x.tracked(), result,
                          [xi = x.impl(), oi = result.impl(), idx = std::move(idx_copy), row] {
                            if (oi->grad.empty()) return;
                            auto g = grad_of(xi);
                            for (std::size_t i = 0; i < idx.size(); ++i) {
                              const std::size_t src = i * static_cast<std::size_t>(row);
                              const std::size_t dst = static_cast<std::size_t>(idx[i] * row);
                              for (std::size_t k = 0; k < static_cast<std::size_t>(row); ++k) {
                                g[dst + k] += oi->grad[src + k];
                              }
                            }
                          });
  return result;
}

// ---------------------------------------------------------------------------
// Flips and reshapes
// ---------------------------------------------------------------------------

namespace {

// dst[n] = src[n] with spatial axes reversed where masks[n] is set.
template <class T>
void flip_copy(std::span<const T> src, std::span<T> dst, Dims5 dims, std::span<const Bvec3> masks) {
  for (std::int64_t n = 0; n < dims.n; ++n) {
    const Bvec3 m = masks.size() == 1 ? masks[0] : masks[static_cast<std::size_t>(n)];
    for (std::int64_t c = 0; c < dims.c; ++c) {
      const std::size_t base = static_cast<std::size_t>((n * dims.c + c) * dims.spatial());
      for (std::int64_t d = 0; d < dims.d; ++d) {
        const std::int64_t sd = m[0] ? dims.d - 1 - d : d;
        for (std::int64_t h = 0; h < dims.h; ++h) {
          const std::int64_t sh = m[1] ? dims.h - 1 - h : h;
          for (std::int64_t w = 0; w < dims.w; ++w) {
            const std::int64_t sw = m[2] ? dims.w - 1 - w : w;
            dst[base + static_cast<std::size_t>((d * dims.h + h) * dims.w + w)] =
                src[base + static_cast<std::size_t>((sd * dims.h + sh) * dims.w + sw)];
          }
        }
      }
    }
  }
}

template <class T>
Tensor<T> flip_impl(const Tensor<T>& x, std::vector<Bvec3> masks, const char* op) {
  const Dims5 dims = as5(x, op);
  if (masks.size() != 1 && static_cast<std::int64_t>(masks.size()) != dims.n) {
    throw ShapeError(std::string(op) + ": " + std::to_string(masks.size()) + " masks for batch of " +
                     std::to_string(dims.n));
  }
  std::vector<T> out(x.data().size());
  flip_copy(x.data(), std::span<T>{out}, dims, masks);
  Tensor<T> result = Tensor<T>::from(x.shape(), std::move(out));
  autograd::record_custom(x.tracked(), result,
                          [xi = x.impl(), oi = result.impl(), dims, masks = std::move(masks)] {
                            if (oi->grad.empty()) return;
                            // A flip is its own inverse, so the gradient flips back.
                            std::vector<T> flipped(oi->grad.size());
                            flip_copy(std::span<const T>{oi->grad.data(), oi->grad.size()},
                                      std::span<T>{flipped}, dims, masks);
                            accumulate(*xi, std::span<const T>{flipped});
                          });
  return result;
}

}  // namespace

template <class T>
Tensor<T> flip_spatial(const Tensor<T>& x, Bvec3 mask) {
  return flip_impl(x, std::vector<Bvec3>{mask}, "flip_spatial");
}

template <class T>
Tensor<T> flip_spatial_per_sample(const Tensor<T>& x, std::span<const Bvec3> masks) {
  return flip_impl(x, std::vector<Bvec3>(masks.begin(), masks.end()), "flip_spatial_per_sample");
}

template <class T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  auto impl = std::make_shared<detail::TensorImpl<T>>();
  impl->shape = std::move(shape);
  impl->data = x.impl()->data;
  Tensor<T> result = Tensor<T>::wrap(std::move(impl));
  autograd::record_custom(x.tracked(), result, [xi = x.impl(), oi = result.impl()] {
    if (oi->grad.empty()) return;
    accumulate(*xi, std::span<const T>{oi->grad.data(), oi->grad.size()});
  });
  return result;
}

template <class T>
Tensor<T> stop_gradient(const Tensor<T>& x) {
  return x.detached_view();
}

// ---------------------------------------------------------------------------
// Channel normalization
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> l2_normalize_channels(const Tensor<T>& x, double eps) {
  if (eps <= 0) {
    throw Error("l2_normalize_channels: eps must be positive");
  }
  if (x.rank() < 2) {
    throw ShapeError("l2_normalize_channels: expected an NC... tensor, got shape " +
                     shape_str(x.shape()));
  }
  const std::int64_t n = x.dim(0);
  const std::int64_t c = x.dim(1);
  std::int64_t spatial = 1;
  for (std::int64_t i = 2; i < x.rank(); ++i) {
    spatial *= x.dim(i);
  }
  const auto xd = x.data();
  std::vector<T> out(xd.size());
  std::vector<T> norms(static_cast<std::size_t>(n * spatial));
  const T teps = static_cast<T>(eps);
  for (std::int64_t in = 0; in < n; ++in) {
    for (std::int64_t s = 0; s < spatial; ++s) {
      const std::size_t base = static_cast<std::size_t>(in * c * spatial + s);
      T sq = T(0);
      for (std::int64_t ic = 0; ic < c; ++ic) {
        const T v = xd[base + static_cast<std::size_t>(ic * spatial)];
        sq += v * v;
      }
      const T norm = std::sqrt(sq);
      norms[static_cast<std::size_t>(in * spatial + s)] = norm;
      const T den = std::max(norm, teps);
      for (std::int64_t ic = 0; ic < c; ++ic) {
        const std::size_t idx = base + static_cast<std::size_t>(ic * spatial);
        out[idx] = xd[idx] / den;
      }
    }
  }
  Tensor<T> result = Tensor<T>::from(x.shape(), std::move(out));
  autograd::record_custom(
      x.tracked(), result,
      [xi = x.impl(), oi = result.impl(), norms = std::move(norms), teps, n, c, spatial] {
        if (oi->grad.empty()) return;
        auto g = grad_of(xi);
        const auto& y = *oi->data;
        const auto& go = oi->grad;
        for (std::int64_t in = 0; in < n; ++in) {
          for (std::int64_t s = 0; s < spatial; ++s) {
            const std::size_t base = static_cast<std::size_t>(in * c * spatial + s);
            const T norm = norms[static_cast<std::size_t>(in * spatial + s)];
            if (norm >= teps) {
              // y = x/|x|: dx = (g - y (y.g)) / |x|
              T dot = T(0);
              for (std::int64_t ic = 0; ic < c; ++ic) {
                const std::size_t idx = base + static_cast<std::size_t>(ic * spatial);
                dot += go[idx] * y[idx];
              }
              for (std::int64_t ic = 0; ic < c; ++ic) {
                const std::size_t idx = base + static_cast<std::size_t>(ic * spatial);
                g[idx] += (go[idx] - y[idx] * dot) / norm;
              }
            } else {
              // y = x/eps below the guard.
              for (std::int64_t ic = 0; ic < c; ++ic) {
                const std::size_t idx = base + static_cast<std::size_t>(ic * spatial);
                g[idx] += go[idx] / teps;
              }
            }
          }
        }
      });
  debug_check_finite(result, "l2_normalize_channels");
  return result;
}

// ---------------------------------------------------------------------------
// Trilinear sampling
// ---------------------------------------------------------------------------

namespace {

struct LerpAxis {
  std::int64_t lo, hi;
  double w_lo, w_hi;
};

// Voxel-center convention with border clamping: voxel i has center i.0 and
// coordinates outside [0, size-1] clamp to the border voxel.
LerpAxis lerp_axis(double coord, std::int64_t size) {
  const double c = std::clamp(coord, 0.0, static_cast<double>(size - 1));
  std::int64_t lo = static_cast<std::int64_t>(std::floor(c));
  if (lo > size - 1) lo = size - 1;
  const std::int64_t hi = std::min<std::int64_t>(lo + 1, size - 1);
  const double frac = c - static_cast<double>(lo);
  return {lo, hi, 1.0 - frac, frac};
}

// One output value per (point, n, c): a weighted gather over 8 neighbors.
// Both the forward gather and the backward scatter iterate the same taps.
template <class Fn>
void for_each_tap(const Dvec3& point, Ivec3 size, Fn&& fn) {
  const LerpAxis ad = lerp_axis(point[0], size[0]);
  const LerpAxis ah = lerp_axis(point[1], size[1]);
  const LerpAxis aw = lerp_axis(point[2], size[2]);
  const std::int64_t ds[2] = {ad.lo, ad.hi};
  const double wd[2] = {ad.w_lo, ad.w_hi};
  const std::int64_t hs[2] = {ah.lo, ah.hi};
  const double wh[2] = {ah.w_lo, ah.w_hi};
  const std::int64_t ws[2] = {aw.lo, aw.hi};
  const double ww[2] = {aw.w_lo, aw.w_hi};
  for (int i = 0; i < 2; ++i) {
    // Skip duplicate taps at the border where lo == hi (their weight is 0).
    if (i == 1 && ds[1] == ds[0]) continue;
    for (int j = 0; j < 2; ++j) {
      if (j == 1 && hs[1] == hs[0]) continue;
      for (int k = 0; k < 2; ++k) {
        if (k == 1 && ws[1] == ws[0]) continue;
        fn((ds[i] * size[1] + hs[j]) * size[2] + ws[k], wd[i] * wh[j] * ww[k]);
      }
    }
  }
}

// Shared kernel behind trilinear_sample, resize_trilinear, and roi_align3d:
// per batch sample, gather a list of (point, weight-normalized) values per
// output element. Points are given per output element; `points_per_sample`
// may be 1 (shared across the batch) or n.
struct SamplePlan {
  // Output element e averages points [offsets[e], offsets[e+1]).
  std::vector<Dvec3> points;
  std::vector<std::size_t> offsets;
};

template <class T>
Tensor<T> gather_op(const Tensor<T>& input, const std::vector<SamplePlan>& plans, Shape out_shape,
                    const char* op) {
  const Dims5 dims = as5(input, op);
  if (plans.size() != 1 && static_cast<std::int64_t>(plans.size()) != dims.n) {
    throw ShapeError(std::string(op) + ": plan count mismatch");
  }
  const Ivec3 size{dims.d, dims.h, dims.w};
  const std::size_t out_per_nc = plans[0].offsets.size() - 1;
  std::vector<T> out(static_cast<std::size_t>(dims.n * dims.c) * out_per_nc);
  const auto xd = input.data();
  for (std::int64_t n = 0; n < dims.n; ++n) {
    const SamplePlan& plan = plans.size() == 1 ? plans[0] : plans[static_cast<std::size_t>(n)];
    for (std::int64_t c = 0; c < dims.c; ++c) {
      const std::size_t in_base = static_cast<std::size_t>((n * dims.c + c) * dims.spatial());
      const std::size_t out_base = (static_cast<std::size_t>(n * dims.c + c)) * out_per_nc;
      for (std::size_t e = 0; e < out_per_nc; ++e) {
        const std::size_t begin = plan.offsets[e];
        const std::size_t end = plan.offsets[e + 1];
        double acc = 0.0;
        for (std::size_t p = begin; p < end; ++p) {
          for_each_tap(plan.points[p], size, [&](std::int64_t flat, double weight) {
            acc += weight * static_cast<double>(xd[in_base + static_cast<std::size_t>(flat)]);
          });
        }
        out[out_base + e] = static_cast<T>(acc / static_cast<double>(end - begin));
      }
    }
  }
  Tensor<T> result = Tensor<T>::from(std::move(out_shape), std::move(out));
  autograd::record_custom(
      input.tracked(), result,
      [xi = input.impl(), oi = result.impl(), plans, dims, size, out_per_nc] {
        if (oi->grad.empty()) return;
        auto g = grad_of(xi);
        for (std::int64_t n = 0; n < dims.n; ++n) {
          const SamplePlan& plan = plans.size() == 1 ? plans[0] : plans[static_cast<std::size_t>(n)];
          for (std::int64_t c = 0; c < dims.c; ++c) {
            const std::size_t in_base = static_cast<std::size_t>((n * dims.c + c) * dims.spatial());
            const std::size_t out_base = (static_cast<std::size_t>(n * dims.c + c)) * out_per_nc;
            for (std::size_t e = 0; e < out_per_nc; ++e) {
              const std::size_t begin = plan.offsets[e];
              const std::size_t end = plan.offsets[e + 1];
              const double go = static_cast<double>(oi->grad[out_base + e]) /
                                static_cast<double>(end - begin);
              for (std::size_t p = begin; p < end; ++p) {
                for_each_tap(plan.points[p], size, [&](std::int64_t flat, double weight) {
                  g[in_base + static_cast<std::size_t>(flat)] += static_cast<T>(weight * go);
                });
              }
            }
          }
        }
      });
  return result;
}

}  // namespace

template <class T>
Tensor<T> trilinear_sample(const Tensor<T>& input, std::span<const Dvec3> points) {
  const Dims5 dims = as5(input, "trilinear_sample");
  SamplePlan plan;
  plan.points.assign(points.begin(), points.end());
  plan.offsets.resize(points.size() + 1);
  for (std::size_t i = 0; i <= points.size(); ++i) {
    plan.offsets[i] = i;
  }
  Shape out_shape{dims.n, dims.c, static_cast<std::int64_t>(points.size())};
  if (points.empty()) {
    return Tensor<T>::zeros(std::move(out_shape));
  }
  std::vector<SamplePlan> plans;
  plans.push_back(std::move(plan));
  return gather_op(input, plans, std::move(out_shape), "trilinear_sample");
}

template <class T>
Tensor<T> resize_trilinear(const Tensor<T>& input, Ivec3 out_size) {
  const Dims5 dims = as5(input, "resize_trilinear");
  for (int a = 0; a < 3; ++a) {
    if (out_size[a] < 1) {
      throw ShapeError(std::string("resize_trilinear: non-positive output ") + kAxisNames[a]);
    }
  }
  const Ivec3 in_size{dims.d, dims.h, dims.w};
  SamplePlan plan;
  plan.points.reserve(static_cast<std::size_t>(out_size[0] * out_size[1] * out_size[2]));
  Dvec3 step;
  for (int a = 0; a < 3; ++a) {
    step[a] = static_cast<double>(in_size[a]) / static_cast<double>(out_size[a]);
  }
  for (std::int64_t d = 0; d < out_size[0]; ++d) {
    for (std::int64_t h = 0; h < out_size[1]; ++h) {
      for (std::int64_t w = 0; w < out_size[2]; ++w) {
        plan.points.push_back({(static_cast<double>(d) + 0.5) * step[0] - 0.5,
                               (static_cast<double>(h) + 0.5) * step[1] - 0.5,
                               (static_cast<double>(w) + 0.5) * step[2] - 0.5});
      }
    }
  }
  plan.offsets.resize(plan.points.size() + 1);
  for (std::size_t i = 0; i < plan.offsets.size(); ++i) {
    plan.offsets[i] = i;
  }
  Shape out_shape{dims.n, dims.c, out_size[0], out_size[1], out_size[2]};
  std::vector<SamplePlan> plans;
  plans.push_back(std::move(plan));
  return gather_op(input, plans, std::move(out_shape), "resize_trilinear");
}

template <class T>
Tensor<T> roi_align3d(const Tensor<T>& input, std::span<const SampleRoi> rois, Ivec3 out_size,
                      std::int64_t samples_per_bin) {
  const Dims5 dims = as5(input, "roi_align3d");
  if (static_cast<std::int64_t>(rois.size()) != dims.n) {
    throw ShapeError("roi_align3d: " + std::to_string(rois.size()) + " rois for batch of " +
                     std::to_string(dims.n));
  }
  if (samples_per_bin < 1) {
    throw Error("roi_align3d: samples_per_bin must be >= 1");
  }
  const Ivec3 feat{dims.d, dims.h, dims.w};
  for (const SampleRoi& roi : rois) {
    for (int a = 0; a < 3; ++a) {
      if (!(roi.start[a] >= 0.0) || !(roi.end[a] <= static_cast<double>(feat[a])) ||
          !(roi.start[a] < roi.end[a])) {
        throw ShapeError(std::string("roi_align3d: roi out of bounds on ") + kAxisNames[a] + " axis: [" +
                         std::to_string(roi.start[a]) + "," + std::to_string(roi.end[a]) + ") in " +
                         std::to_string(feat[a]) + " cells");
      }
    }
  }

  const std::int64_t spb = samples_per_bin;
  std::vector<SamplePlan> plans;
  plans.reserve(rois.size());
  for (const SampleRoi& roi : rois) {
    SamplePlan plan;
    const std::size_t bins = static_cast<std::size_t>(out_size[0] * out_size[1] * out_size[2]);
    plan.points.reserve(bins * static_cast<std::size_t>(spb * spb * spb));
    plan.offsets.reserve(bins + 1);
    plan.offsets.push_back(0);
    Dvec3 bin;
    for (int a = 0; a < 3; ++a) {
      bin[a] = (roi.end[a] - roi.start[a]) / static_cast<double>(out_size[a]);
    }
    for (std::int64_t d = 0; d < out_size[0]; ++d) {
      for (std::int64_t h = 0; h < out_size[1]; ++h) {
        for (std::int64_t w = 0; w < out_size[2]; ++w) {
          for (std::int64_t sd = 0; sd < spb; ++sd) {
            for (std::int64_t sh = 0; sh < spb; ++sh) {
              for (std::int64_t sw = 0; sw < spb; ++sw) {
                // Regularly spaced interior points in edge coordinates; the
                // -0.5 converts to voxel-center coordinates for sampling.
                const double fd = roi.start[0] + (static_cast<double>(d) + (static_cast<double>(sd) + 0.5) / static_cast<double>(spb)) * bin[0];
                const double fh = roi.start[1] + (static_cast<double>(h) + (static_cast<double>(sh) + 0.5) / static_cast<double>(spb)) * bin[1];
                const double fw = roi.start[2] + (static_cast<double>(w) + (static_cast<double>(sw) + 0.5) / static_cast<double>(spb)) * bin[2];
                plan.points.push_back({fd - 0.5, fh - 0.5, fw - 0.5});
              }
            }
          }
          plan.offsets.push_back(plan.points.size());
        }
      }
    }
    plans.push_back(std::move(plan));
  }
  Shape out_shape{dims.n, dims.c, out_size[0], out_size[1], out_size[2]};
  return gather_op(input, plans, std::move(out_shape), "roi_align3d");
}

// ---------------------------------------------------------------------------
// Explicit instantiations
// ---------------------------------------------------------------------------

template class Tensor<float>;
template class Tensor<double>;
template class Tape<float>;
template class Tape<double>;

#define PGL_INSTANTIATE_OPS(T)                                                                    \
  template Tensor<T> add<T>(const Tensor<T>&, const Tensor<T>&);                                 \
  template Tensor<T> sub<T>(const Tensor<T>&, const Tensor<T>&);                                 \
  template Tensor<T> mul<T>(const Tensor<T>&, const Tensor<T>&);                                 \
  template Tensor<T> scale<T>(const Tensor<T>&, double);                                         \
  template Tensor<T> relu<T>(const Tensor<T>&);                                                  \
  template Tensor<T> sigmoid<T>(const Tensor<T>&);                                               \
  template Tensor<T> softmax_channels<T>(const Tensor<T>&);                                      \
  template Tensor<T> sum_all<T>(const Tensor<T>&);                                               \
  template Tensor<T> global_avg_pool<T>(const Tensor<T>&);                                       \
  template Tensor<T> concat_channels<T>(std::span<const Tensor<T>>);                             \
  template Tensor<T> select_batch<T>(const Tensor<T>&, std::span<const std::int64_t>);           \
  template Tensor<T> flip_spatial<T>(const Tensor<T>&, Bvec3);                                   \
  template Tensor<T> flip_spatial_per_sample<T>(const Tensor<T>&, std::span<const Bvec3>);       \
  template Tensor<T> reshape<T>(const Tensor<T>&, Shape);                                        \
  template Tensor<T> stop_gradient<T>(const Tensor<T>&);                                         \
  template Tensor<T> l2_normalize_channels<T>(const Tensor<T>&, double);                         \
  template Tensor<T> trilinear_sample<T>(const Tensor<T>&, std::span<const Dvec3>);              \
  template Tensor<T> resize_trilinear<T>(const Tensor<T>&, Ivec3);                               \
  template Tensor<T> roi_align3d<T>(const Tensor<T>&, std::span<const SampleRoi>, Ivec3,         \
                                    std::int64_t);

PGL_INSTANTIATE_OPS(float)
PGL_INSTANTIATE_OPS(double)

#undef PGL_INSTANTIATE_OPS

}  // namespace pgl
