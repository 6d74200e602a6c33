#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "pgl/common.hpp"

namespace pgl {

/// Row-major tensor shape. Feature maps are NCDHW; raw volume patches DHW;
/// losses are rank-0 scalars.
using Shape = std::vector<std::int64_t>;

std::int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

template <class T>
struct TensorImpl {
  Shape shape;
  std::shared_ptr<std::vector<T>> data;
  std::vector<T> grad;         // empty until a gradient is first accumulated
  bool requires_grad = false;  // leaf registered for gradient accumulation
  bool tracked = false;        // participates in the active tape's graph
};

}  // namespace detail

/// Dense tensor with optional reverse-mode gradient tracking.
///
/// Handles have value semantics but share storage: copies alias the same
/// buffer. Data is immutable after creation except through mutable_data(),
/// which exists for optimizer updates, EMA, and batch-norm running
/// statistics. Gradients live in a separate buffer, allocated lazily and
/// written only during backward passes.
template <class T>
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, T value);
  static Tensor from(Shape shape, std::vector<T> values);
  static Tensor scalar(T value);  // rank-0

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::int64_t rank() const { return static_cast<std::int64_t>(impl_->shape.size()); }
  std::int64_t dim(std::int64_t axis) const { return impl_->shape[static_cast<std::size_t>(axis)]; }
  std::int64_t numel() const { return shape_numel(impl_->shape); }

  std::span<const T> data() const { return {impl_->data->data(), impl_->data->size()}; }
  /// Direct write access to storage. Only the optimizer, EMA update, and
  /// batch-norm running statistics may mutate a tensor after creation.
  std::span<T> mutable_data() { return {impl_->data->data(), impl_->data->size()}; }

  T item() const;

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool value);
  bool tracked() const { return impl_ && impl_->tracked; }

  /// Empty span when no gradient has been accumulated yet.
  std::span<const T> grad() const { return {impl_->grad.data(), impl_->grad.size()}; }
  /// Allocates a zeroed gradient buffer on first use.
  std::span<T> grad_buffer();
  bool has_grad() const { return !impl_->grad.empty(); }
  void zero_grad();

  /// Same storage, detached from gradient tracking.
  Tensor detached_view() const;
  /// Fresh storage with identical contents, untracked.
  Tensor clone_data() const;

  // Autodiff plumbing, used by modules that define fused operations.
  std::shared_ptr<detail::TensorImpl<T>> impl() const { return impl_; }
  void mark_tracked() { impl_->tracked = true; }
  static Tensor wrap(std::shared_ptr<detail::TensorImpl<T>> impl) { return Tensor(std::move(impl)); }

 private:
  explicit Tensor(std::shared_ptr<detail::TensorImpl<T>> impl) : impl_(std::move(impl)) {}
  std::shared_ptr<detail::TensorImpl<T>> impl_;
};

/// Straight-line record of differentiable operations.
///
/// Operations append a node when a tape is active and any input is tracked;
/// inputs always precede the node that consumes them, so replaying the list
/// in reverse is a valid reverse-topological walk. A node's backward rule
/// reads the accumulated gradient of its output and adds contributions to the
/// gradients of its tracked inputs. Values behind stop_gradient() are not
/// tracked, so no node ever propagates into them.
///
/// One tape is owned by one training step; tapes are not shared across
/// threads (the active tape is thread-local).
template <class T>
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active();

  void record(std::shared_ptr<detail::TensorImpl<T>> output, std::function<void()> backward);
  std::size_t size() const { return nodes_.size(); }

  /// Accumulates d(loss)/d(leaf) into every requires_grad leaf reachable from
  /// `loss`. The loss must be a rank-0 tensor recorded on this tape. Gradients
  /// of intermediate (non-leaf) tensors are cleared afterwards, so repeated
  /// backward calls on the same tape accumulate leaf gradients without
  /// double-counting shared subgraphs.
  void backward(const Tensor<T>& loss);

  /// RAII activation; pass nullptr to suspend recording (target path).
  class Scope {
   public:
    explicit Scope(Tape* tape);
    ~Scope();
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;

   private:
    Tape* previous_;
  };

 private:
  struct Node {
    std::shared_ptr<detail::TensorImpl<T>> output;
    std::function<void()> backward;
  };
  std::vector<Node> nodes_;
};

namespace autograd {

/// Registers a fused operation's backward rule on the active tape when
/// `inputs_tracked` holds; marks `output` tracked in that case. Returns true
/// when a node was recorded.
template <class T>
bool record_custom(bool inputs_tracked, Tensor<T>& output, std::function<void()> backward) {
  auto* tape = Tape<T>::active();
  if (tape == nullptr || !inputs_tracked) {
    return false;
  }
  output.mark_tracked();
  tape->record(output.impl(), std::move(backward));
  return true;
}

}  // namespace autograd

// ---------------------------------------------------------------------------
// Differentiable operations
// ---------------------------------------------------------------------------

struct Conv3dSpec {
  Ivec3 stride{1, 1, 1};
  Ivec3 padding{0, 0, 0};
  Ivec3 dilation{1, 1, 1};
  std::int64_t groups = 1;
};

/// input NCDHW, weight [Cout, Cin/groups, kd, kh, kw], optional bias [Cout].
/// Output spatial size per axis: floor((in + 2*pad - dil*(k-1) - 1)/stride)+1.
template <class T>
Tensor<T> conv3d(const Tensor<T>& input, const Tensor<T>& weight,
                 const std::optional<Tensor<T>>& bias, const Conv3dSpec& spec = {});

/// input NCDHW, weight [Cin, Cout, kd, kh, kw]. Output size per axis:
/// (in - 1)*stride + k. Used for decoder upsampling (kernel == stride).
template <class T>
Tensor<T> conv_transpose3d(const Tensor<T>& input, const Tensor<T>& weight,
                           const std::optional<Tensor<T>>& bias, Ivec3 stride);

/// Per-channel batch normalization over (N, D, H, W).
///
/// Training mode normalizes with batch statistics and, when `update_running`
/// holds, folds them into the running buffers with
/// running = (1 - momentum) * running + momentum * batch (variance unbiased).
/// Eval mode normalizes with the running buffers. Training with a single
/// element per channel is an error (variance undefined).
template <class T>
Tensor<T> batchnorm3d(const Tensor<T>& input, const Tensor<T>& gamma, const Tensor<T>& beta,
                      Tensor<T>& running_mean, Tensor<T>& running_var, double momentum,
                      double eps, bool training, bool update_running = true);

template <class T>
Tensor<T> relu(const Tensor<T>& x);  // subgradient at 0 is 0

template <class T>
Tensor<T> sigmoid(const Tensor<T>& x);

/// Softmax along the channel axis of an NC... tensor.
template <class T>
Tensor<T> softmax_channels(const Tensor<T>& x);

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <class T>
Tensor<T> scale(const Tensor<T>& x, double factor);

template <class T>
Tensor<T> sum_all(const Tensor<T>& x);  // rank-0

/// NCDHW -> NC111 spatial mean.
template <class T>
Tensor<T> global_avg_pool(const Tensor<T>& x);

template <class T>
Tensor<T> concat_channels(std::span<const Tensor<T>> parts);

/// Gathers rows along the batch axis; backward scatters.
template <class T>
Tensor<T> select_batch(const Tensor<T>& x, std::span<const std::int64_t> indices);

/// Reverses the spatial axes of an NCDHW tensor where mask is set.
template <class T>
Tensor<T> flip_spatial(const Tensor<T>& x, Bvec3 mask);

/// Per-sample spatial flips; masks.size() must equal the batch size.
template <class T>
Tensor<T> flip_spatial_per_sample(const Tensor<T>& x, std::span<const Bvec3> masks);

/// Same storage viewed under a different shape (numel preserved).
template <class T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape);

/// Barrier: shares storage, propagates no gradient.
template <class T>
Tensor<T> stop_gradient(const Tensor<T>& x);

/// Divides every channel vector of an NC... tensor by max(norm, eps).
template <class T>
Tensor<T> l2_normalize_channels(const Tensor<T>& x, double eps);

/// Trilinear interpolation of an NCDHW tensor at continuous (d, h, w)
/// points in voxel-center convention (voxel i has center i.0); out-of-range
/// coordinates clamp to the border. Output is [N, C, P]. Differentiable with
/// respect to the input values, not the coordinates.
template <class T>
Tensor<T> trilinear_sample(const Tensor<T>& input, std::span<const Dvec3> points);

/// Trilinear resize of the spatial axes of an NCDHW tensor. Output voxel j
/// samples the input at ((j + 0.5) * in/out - 0.5) per axis.
template <class T>
Tensor<T> resize_trilinear(const Tensor<T>& input, Ivec3 out_size);

/// Continuous region in cell-edge coordinates, half-open per axis: the
/// region [start, end) where cell i spans [i, i+1).
struct SampleRoi {
  Dvec3 start{0, 0, 0};
  Dvec3 end{0, 0, 0};
};

/// 3D RoIAlign: partitions each sample's ROI into out_size bins and averages
/// samples_per_bin^3 trilinear samples per bin at regularly spaced interior
/// points. rois.size() must equal the batch size.
template <class T>
Tensor<T> roi_align3d(const Tensor<T>& input, std::span<const SampleRoi> rois,
                      Ivec3 out_size, std::int64_t samples_per_bin);

using Tensor32 = Tensor<float>;
using Tensor64 = Tensor<double>;

}  // namespace pgl
