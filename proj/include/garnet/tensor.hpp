#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "garnet/errors.hpp"

namespace garnet {

using Shape = std::vector<int>;

int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

class BackwardPass;

// One node of the (acyclic) autodiff graph. Leaves have no backward_fn;
// their accumulated gradients live in `grad`.
struct TensorImpl {
    Shape shape;
    std::vector<double> data;
    bool requires_grad = false;
    std::vector<double> grad; // leaves only; empty until first backward

    std::vector<std::shared_ptr<TensorImpl>> parents;
    std::function<void(const double* gout, BackwardPass&)> backward_fn; // null for leaves
    const char* op = "leaf";

    int64_t numel() const { return static_cast<int64_t>(data.size()); }
    bool is_leaf() const { return !backward_fn; }
};

// Value-semantics handle onto a shared graph node. Tensors are immutable
// after creation except for leaf data (optimizer updates between graphs)
// and leaf grad buffers.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const { return impl_->shape; }
    int64_t numel() const { return impl_->numel(); }
    bool requires_grad() const { return impl_ && impl_->requires_grad; }

    std::span<const double> data() const { return impl_->data; }
    // Leaf-only mutation (parameter init / optimizer steps / FD probing).
    std::span<double> mutable_data();

    std::span<const double> grad() const { return impl_->grad; }
    bool has_grad() const { return impl_ && !impl_->grad.empty(); }
    void zero_grad() { if (impl_) impl_->grad.clear(); }

    double item() const;
    double at(int64_t flat_index) const { return impl_->data[static_cast<size_t>(flat_index)]; }

    TensorImpl* impl() const { return impl_.get(); }
    const std::shared_ptr<TensorImpl>& impl_ptr() const { return impl_; }

private:
    std::shared_ptr<TensorImpl> impl_;
};

// ---- elementwise --------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double c);
Tensor add_const(const Tensor& x, double c);
Tensor relu(const Tensor& x);
Tensor leaky_relu(const Tensor& x, double slope = 0.2);
Tensor sigmoid(const Tensor& x);
Tensor log(const Tensor& x);
Tensor sqrt(const Tensor& x);
Tensor abs(const Tensor& x);
Tensor clamp(const Tensor& x, double lo, double hi);

// ---- structure ----------------------------------------------------------

Tensor concat(const std::vector<Tensor>& xs, int axis);
// Row-major reinterpretation; element count must match.
Tensor reshape(const Tensor& x, Shape shape);
// Contiguous range [from, to) along axis 0.
Tensor slice_axis0(const Tensor& x, int from, int to);
// Graph-free leaf copy of the values.
Tensor detach(const Tensor& x);
Tensor reduce_sum(const Tensor& x);  // -> shape {1}
Tensor reduce_mean(const Tensor& x); // -> shape {1}

// Broadcasts a per-channel vector (C) over the spatial dims of `like`
// (C, S...); gradient sums back over the spatial extent.
Tensor broadcast_channels(const Tensor& vec, const Shape& like);
// Broadcasts a single-channel map (1, S...) over C channels.
Tensor broadcast_spatial(const Tensor& map, int channels);

// ---- pooling ------------------------------------------------------------

enum class PoolKind { kMax, kAvg };

// (C, S...) -> (C): collapse all spatial dims per channel.
Tensor global_pool(const Tensor& x, PoolKind kind);
// (C, S...) -> (1, S...): collapse the channel dim per grid cell.
Tensor channel_pool(const Tensor& x, PoolKind kind);
// (C, H, W) -> (C, H/s, W/s), non-overlapping when k == s.
Tensor avg_pool2d(const Tensor& x, int k, int s);

// ---- dense --------------------------------------------------------------

// x: (in), w: (out, in), b: (out) -> (out)
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);

// ---- convolution --------------------------------------------------------

struct ConvSpec {
    int dims = 2; // 1, 2 or 3 spatial dimensions
    int stride = 1;
    int pad = 0;
    bool transposed = false;
};

// x: (C_in, spatial...), w: (C_out, C_in, k...), b: (C_out).
// Normal conv: out = floor((in + 2p - k)/s) + 1.
// Transposed:  out = (in - 1)*s - 2p + k (exact adjoint of the normal conv
// with identical stride/pad and channel-swapped weights).
Tensor conv(const Tensor& x, const Tensor& w, const Tensor& b, const ConvSpec& spec);

// ---- softmax across a branch list ---------------------------------------

// Normalizes elementwise across the list: at every grid position the n
// outputs are nonnegative and sum to 1.
std::vector<Tensor> softmax_over_branches(const std::vector<Tensor>& logits);

// ---- backward -----------------------------------------------------------

// Keyed by leaf node; used by batch workers to keep gradient accumulation
// off the shared parameter tensors until the ordered reduction.
using GradMap = std::unordered_map<const TensorImpl*, std::vector<double>>;

// Accumulates d(loss)/d(leaf) into each requires-grad leaf's grad buffer.
// Repeated calls without zero_grad accumulate. `loss` must be scalar.
void backward(const Tensor& loss);
// Same, but accumulates into `out` instead of the leaves' own buffers.
void backward(const Tensor& loss, GradMap& out);

// Central-difference gradient check: max over probed coordinates of
// |analytic - numeric| / max(1, |numeric|). Probes every coordinate when
// max_probes == 0, otherwise a seeded random subset.
double grad_check(const std::function<Tensor(const Tensor&)>& f, Tensor x, double eps,
                  int max_probes = 0, uint64_t probe_seed = 0);

} // namespace garnet
