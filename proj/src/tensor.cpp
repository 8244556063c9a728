#include "garnet/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>

#include "garnet/rng.hpp"

namespace garnet {

int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int e : s) n *= e;
    return n;
}

std::string shape_str(const Shape& s) {
    std::string out = "(";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + ")";
}

namespace {

void check_shape(const Shape& s, const char* who) {
    if (s.empty()) throw contract_error(std::string(who) + ": empty shape");
    for (int e : s)
        if (e <= 0) throw contract_error(std::string(who) + ": non-positive extent in " + shape_str(s));
}

#ifndef NDEBUG
void debug_check_finite(const TensorImpl& t, const char* op) {
    for (double v : t.data)
        if (!std::isfinite(v)) throw numeric_error(std::string(op) + " produced a non-finite value");
}
#else
void debug_check_finite(const TensorImpl&, const char*) {}
#endif

} // namespace

class BackwardPass {
public:
    std::vector<double>& buffer(TensorImpl* node) {
        auto& buf = bufs_[node];
        if (buf.empty()) buf.assign(static_cast<size_t>(node->numel()), 0.0);
        return buf;
    }

    std::unordered_map<TensorImpl*, std::vector<double>> bufs_;
};

// ---- construction --------------------------------------------------------

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    check_shape(shape, "Tensor::full");
    auto impl = std::make_shared<TensorImpl>();
    impl->data.assign(static_cast<size_t>(shape_numel(shape)), value);
    impl->shape = std::move(shape);
    impl->requires_grad = requires_grad;
    return Tensor(impl);
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data, bool requires_grad) {
    check_shape(shape, "Tensor::from_data");
    if (shape_numel(shape) != static_cast<int64_t>(data.size()))
        throw contract_error("Tensor::from_data: " + shape_str(shape) + " does not match buffer of " +
                             std::to_string(data.size()) + " values");
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = std::move(shape);
    impl->data = std::move(data);
    impl->requires_grad = requires_grad;
    return Tensor(impl);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
    return from_data({1}, {value}, requires_grad);
}

std::span<double> Tensor::mutable_data() {
    if (!impl_) throw contract_error("mutable_data on undefined tensor");
    if (!impl_->is_leaf()) throw contract_error("mutable_data: only leaf tensors may be mutated");
    return impl_->data;
}

double Tensor::item() const {
    if (!impl_ || impl_->numel() != 1) throw contract_error("item() requires a scalar tensor");
    return impl_->data[0];
}

// ---- op plumbing ---------------------------------------------------------

namespace {

using BackwardFn = std::function<void(const double*, BackwardPass&)>;

Tensor make_op(const char* op, Shape shape, std::vector<double> data,
               std::vector<std::shared_ptr<TensorImpl>> parents, BackwardFn bw) {
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = std::move(shape);
    impl->data = std::move(data);
    bool rg = false;
    for (const auto& p : parents) rg = rg || (p && p->requires_grad);
    if (rg) {
        impl->requires_grad = true;
        impl->parents = std::move(parents);
        impl->backward_fn = std::move(bw);
        impl->op = op;
    }
    debug_check_finite(*impl, op);
    return Tensor(impl);
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw contract_error(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
}

} // namespace

// ---- elementwise ---------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "add");
    const size_t n = a.data().size();
    std::vector<double> out(n);
    for (size_t i = 0; i < n; ++i) out[i] = a.data()[i] + b.data()[i];
    auto pa = a.impl_ptr(), pb = b.impl_ptr();
    return make_op("add", a.shape(), std::move(out), {pa, pb}, [pa, pb, n](const double* g, BackwardPass& bp) {
        if (pa->requires_grad) {
            auto& ga = bp.buffer(pa.get());
            for (size_t i = 0; i < n; ++i) ga[i] += g[i];
        }
        if (pb->requires_grad) {
            auto& gb = bp.buffer(pb.get());
            for (size_t i = 0; i < n; ++i) gb[i] += g[i];
        }
    });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "sub");
    const size_t n = a.data().size();
    std::vector<double> out(n);
    for (size_t i = 0; i < n; ++i) out[i] = a.data()[i] - b.data()[i];
    auto pa = a.impl_ptr(), pb = b.impl_ptr();
    return make_op("sub", a.shape(), std::move(out), {pa, pb}, [pa, pb, n](const double* g, BackwardPass& bp) {
        if (pa->requires_grad) {
            auto& ga = bp.buffer(pa.get());
            for (size_t i = 0; i < n; ++i) ga[i] += g[i];
        }
        if (pb->requires_grad) {
            auto& gb = bp.buffer(pb.get());
            for (size_t i = 0; i < n; ++i) gb[i] -= g[i];
        }
    });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "mul");
    const size_t n = a.data().size();
    std::vector<double> out(n);
    for (size_t i = 0; i < n; ++i) out[i] = a.data()[i] * b.data()[i];
    auto pa = a.impl_ptr(), pb = b.impl_ptr();
    return make_op("mul", a.shape(), std::move(out), {pa, pb}, [pa, pb, n](const double* g, BackwardPass& bp) {
        if (pa->requires_grad) {
            auto& ga = bp.buffer(pa.get());
            for (size_t i = 0; i < n; ++i) ga[i] += g[i] * pb->data[i];
        }
        if (pb->requires_grad) {
            auto& gb = bp.buffer(pb.get());
            for (size_t i = 0; i < n; ++i) gb[i] += g[i] * pa->data[i];
        }
    });
}

Tensor div(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "div");
    const size_t n = a.data().size();
    std::vector<double> out(n);
    for (size_t i = 0; i < n; ++i) out[i] = a.data()[i] / b.data()[i];
    auto pa = a.impl_ptr(), pb = b.impl_ptr();
    return make_op("div", a.shape(), std::move(out), {pa, pb}, [pa, pb, n](const double* g, BackwardPass& bp) {
        if (pa->requires_grad) {
            auto& ga = bp.buffer(pa.get());
            for (size_t i = 0; i < n; ++i) ga[i] += g[i] / pb->data[i];
        }
        if (pb->requires_grad) {
            auto& gb = bp.buffer(pb.get());
            for (size_t i = 0; i < n; ++i) gb[i] -= g[i] * pa->data[i] / (pb->data[i] * pb->data[i]);
        }
    });
}

Tensor scale(const Tensor& x, double c) {
    const size_t n = x.data().size();
    std::vector<double> out(n);
    for (size_t i = 0; i < n; ++i) out[i] = c * x.data()[i];
    auto px = x.impl_ptr();
    return make_op("scale", x.shape(), std::move(out), {px}, [px, c, n](const double* g, BackwardPass& bp) {
        auto& gx = bp.buffer(px.get());
        for (size_t i = 0; i < n; ++i) gx[i] += c * g[i];
    });
}

Tensor add_const(const Tensor& x, double c) {
    const size_t n = x.data().size();
    std::vector<double> out(n);
    for (size_t i = 0; i < n; ++i) out[i] = c + x.data()[i];
    auto px = x.impl_ptr();
    return make_op("add_const", x.shape(), std::move(out), {px}, [px, n](const double* g, BackwardPass& bp) {
        auto& gx = bp.buffer(px.get());
        for (size_t i = 0; i < n; ++i) gx[i] += g[i];
    });
}

Tensor relu(const Tensor& x) {
    const size_t n = x.data().size();
    std::vector<double> out(n);
    for (size_t i = 0; i < n; ++i) out[i] = x.data()[i] > 0.0 ? x.data()[i] : 0.0;
    auto px = x.impl_ptr();
    return make_op("relu", x.shape(), std::move(out), {px}, [px, n](const double* g, BackwardPass& bp) {
        auto& gx = bp.buffer(px.get());
        for (size_t i = 0; i < n; ++i)
            if (px->data[i] > 0.0) gx[i] += g[i];
    });
}

Tensor leaky_relu(const Tensor& x, double slope) {
    const size_t n = x.data().size();
    std::vector<double> out(n);
    for (size_t i = 0; i < n; ++i) out[i] = x.data()[i] > 0.0 ? x.data()[i] : slope * x.data()[i];
    auto px = x.impl_ptr();
    return make_op("leaky_relu", x.shape(), std::move(out), {px},
                   [px, slope, n](const double* g, BackwardPass& bp) {
                       auto& gx = bp.buffer(px.get());
                       for (size_t i = 0; i < n; ++i) gx[i] += g[i] * (px->data[i] > 0.0 ? 1.0 : slope);
                   });
}

Tensor sigmoid(const Tensor& x) {
    const size_t n = x.data().size();
    std::vector<double> out(n);
    for (size_t i = 0; i < n; ++i) {
        const double v = x.data()[i];
        out[i] = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
    }
    auto px = x.impl_ptr();
    auto saved = std::make_shared<std::vector<double>>(out);
    return make_op("sigmoid", x.shape(), std::move(out), {px},
                   [px, saved, n](const double* g, BackwardPass& bp) {
                       auto& gx = bp.buffer(px.get());
                       for (size_t i = 0; i < n; ++i) {
                           const double y = (*saved)[i];
                           gx[i] += g[i] * y * (1.0 - y);
                       }
                   });
}

Tensor log(const Tensor& x) {
    const size_t n = x.data().size();
    std::vector<double> out(n);
    for (size_t i = 0; i < n; ++i) out[i] = std::log(x.data()[i]);
    auto px = x.impl_ptr();
    return make_op("log", x.shape(), std::move(out), {px}, [px, n](const double* g, BackwardPass& bp) {
        auto& gx = bp.buffer(px.get());
        for (size_t i = 0; i < n; ++i) gx[i] += g[i] / px->data[i];
    });
}

Tensor sqrt(const Tensor& x) {
    const size_t n = x.data().size();
    std::vector<double> out(n);
    for (size_t i = 0; i < n; ++i) out[i] = std::sqrt(x.data()[i]);
    auto px = x.impl_ptr();
    auto saved = std::make_shared<std::vector<double>>(out);
    return make_op("sqrt", x.shape(), std::move(out), {px}, [px, saved, n](const double* g, BackwardPass& bp) {
        auto& gx = bp.buffer(px.get());
        for (size_t i = 0; i < n; ++i) gx[i] += g[i] * 0.5 / (*saved)[i];
    });
}

Tensor abs(const Tensor& x) {
    const size_t n = x.data().size();
    std::vector<double> out(n);
    for (size_t i = 0; i < n; ++i) out[i] = std::fabs(x.data()[i]);
    auto px = x.impl_ptr();
    return make_op("abs", x.shape(), std::move(out), {px}, [px, n](const double* g, BackwardPass& bp) {
        auto& gx = bp.buffer(px.get());
        for (size_t i = 0; i < n; ++i) {
            const double v = px->data[i];
            gx[i] += g[i] * (v > 0.0 ? 1.0 : v < 0.0 ? -1.0 : 0.0);
        }
    });
}

Tensor clamp(const Tensor& x, double lo, double hi) {
    if (!(lo < hi)) throw contract_error("clamp: lo must be < hi");
    const size_t n = x.data().size();
    std::vector<double> out(n);
    for (size_t i = 0; i < n; ++i) out[i] = std::min(hi, std::max(lo, x.data()[i]));
    auto px = x.impl_ptr();
    return make_op("clamp", x.shape(), std::move(out), {px}, [px, lo, hi, n](const double* g, BackwardPass& bp) {
        auto& gx = bp.buffer(px.get());
        for (size_t i = 0; i < n; ++i) {
            const double v = px->data[i];
            if (v > lo && v < hi) gx[i] += g[i];
        }
    });
}

// ---- structure -----------------------------------------------------------

Tensor concat(const std::vector<Tensor>& xs, int axis) {
    if (xs.empty()) throw contract_error("concat: empty tensor list");
    const Shape& s0 = xs[0].shape();
    if (axis < 0 || axis >= static_cast<int>(s0.size())) throw contract_error("concat: axis out of range");
    Shape out_shape = s0;
    out_shape[axis] = 0;
    for (const Tensor& t : xs) {
        const Shape& s = t.shape();
        if (s.size() != s0.size()) throw contract_error("concat: rank mismatch");
        for (size_t d = 0; d < s.size(); ++d)
            if (static_cast<int>(d) != axis && s[d] != s0[d])
                throw contract_error("concat: extent mismatch on axis " + std::to_string(d));
        out_shape[axis] += s[axis];
    }

    int64_t outer = 1;
    for (int d = 0; d < axis; ++d) outer *= s0[d];
    int64_t inner = 1;
    for (size_t d = axis + 1; d < s0.size(); ++d) inner *= s0[d];

    std::vector<double> out(static_cast<size_t>(shape_numel(out_shape)));
    const int64_t out_block = out_shape[axis] * inner;
    std::vector<int64_t> offsets(xs.size());
    {
        int64_t off = 0;
        for (size_t t = 0; t < xs.size(); ++t) {
            offsets[t] = off;
            const int64_t block = xs[t].shape()[axis] * inner;
            for (int64_t o = 0; o < outer; ++o)
                std::memcpy(out.data() + o * out_block + off, xs[t].data().data() + o * block,
                            static_cast<size_t>(block) * sizeof(double));
            off += block;
        }
    }

    std::vector<std::shared_ptr<TensorImpl>> parents;
    for (const Tensor& t : xs) parents.push_back(t.impl_ptr());
    auto po = parents;
    auto offs = offsets;
    return make_op("concat", out_shape, std::move(out), std::move(parents),
                   [po, offs, outer, out_block](const double* g, BackwardPass& bp) {
                       for (size_t t = 0; t < po.size(); ++t) {
                           if (!po[t]->requires_grad) continue;
                           auto& gt = bp.buffer(po[t].get());
                           const int64_t block = static_cast<int64_t>(gt.size()) / outer;
                           for (int64_t o = 0; o < outer; ++o) {
                               const double* src = g + o * out_block + offs[t];
                               double* dst = gt.data() + o * block;
                               for (int64_t i = 0; i < block; ++i) dst[i] += src[i];
                           }
                       }
                   });
}

Tensor reshape(const Tensor& x, Shape shape) {
    check_shape(shape, "reshape");
    if (shape_numel(shape) != x.numel())
        throw contract_error("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape) +
                             " changes element count");
    auto px = x.impl_ptr();
    std::vector<double> out(x.data().begin(), x.data().end());
    const size_t n = out.size();
    return make_op("reshape", std::move(shape), std::move(out), {px}, [px, n](const double* g, BackwardPass& bp) {
        auto& gx = bp.buffer(px.get());
        for (size_t i = 0; i < n; ++i) gx[i] += g[i];
    });
}

Tensor slice_axis0(const Tensor& x, int from, int to) {
    if (x.shape().empty()) throw contract_error("slice_axis0: rank >= 1 required");
    if (from < 0 || to <= from || to > x.shape()[0]) throw contract_error("slice_axis0: range out of bounds");
    const int64_t inner = x.numel() / x.shape()[0];
    Shape out_shape = x.shape();
    out_shape[0] = to - from;
    std::vector<double> out(x.data().begin() + from * inner, x.data().begin() + to * inner);
    auto px = x.impl_ptr();
    return make_op("slice_axis0", out_shape, std::move(out), {px},
                   [px, from, inner, count = to - from](const double* g, BackwardPass& bp) {
                       auto& gx = bp.buffer(px.get());
                       double* dst = gx.data() + from * inner;
                       for (int64_t i = 0; i < count * inner; ++i) dst[i] += g[i];
                   });
}

Tensor detach(const Tensor& x) {
    return Tensor::from_data(x.shape(), std::vector<double>(x.data().begin(), x.data().end()));
}

Tensor reduce_sum(const Tensor& x) {
    double acc = 0.0;
    for (double v : x.data()) acc += v;
    auto px = x.impl_ptr();
    const size_t n = x.data().size();
    return make_op("reduce_sum", {1}, {acc}, {px}, [px, n](const double* g, BackwardPass& bp) {
        auto& gx = bp.buffer(px.get());
        for (size_t i = 0; i < n; ++i) gx[i] += g[0];
    });
}

Tensor reduce_mean(const Tensor& x) {
    double acc = 0.0;
    for (double v : x.data()) acc += v;
    const size_t n = x.data().size();
    const double inv = 1.0 / static_cast<double>(n);
    auto px = x.impl_ptr();
    return make_op("reduce_mean", {1}, {acc * inv}, {px}, [px, n, inv](const double* g, BackwardPass& bp) {
        auto& gx = bp.buffer(px.get());
        for (size_t i = 0; i < n; ++i) gx[i] += g[0] * inv;
    });
}

Tensor broadcast_channels(const Tensor& vec, const Shape& like) {
    if (vec.shape().size() != 1) throw contract_error("broadcast_channels: vector input required");
    if (like.empty() || like[0] != vec.shape()[0])
        throw contract_error("broadcast_channels: channel extent mismatch");
    const int c = like[0];
    const int64_t spatial = shape_numel(like) / c;
    std::vector<double> out(static_cast<size_t>(shape_numel(like)));
    for (int ch = 0; ch < c; ++ch)
        std::fill_n(out.begin() + ch * spatial, spatial, vec.data()[static_cast<size_t>(ch)]);
    auto pv = vec.impl_ptr();
    return make_op("broadcast_channels", like, std::move(out), {pv},
                   [pv, c, spatial](const double* g, BackwardPass& bp) {
                       auto& gv = bp.buffer(pv.get());
                       for (int ch = 0; ch < c; ++ch) {
                           double acc = 0.0;
                           const double* row = g + ch * spatial;
                           for (int64_t i = 0; i < spatial; ++i) acc += row[i];
                           gv[static_cast<size_t>(ch)] += acc;
                       }
                   });
}

Tensor broadcast_spatial(const Tensor& map, int channels) {
    if (map.shape().empty() || map.shape()[0] != 1)
        throw contract_error("broadcast_spatial: single-channel map required");
    const int64_t spatial = map.numel();
    Shape out_shape = map.shape();
    out_shape[0] = channels;
    std::vector<double> out(static_cast<size_t>(spatial * channels));
    for (int ch = 0; ch < channels; ++ch)
        std::memcpy(out.data() + ch * spatial, map.data().data(), static_cast<size_t>(spatial) * sizeof(double));
    auto pm = map.impl_ptr();
    return make_op("broadcast_spatial", out_shape, std::move(out), {pm},
                   [pm, channels, spatial](const double* g, BackwardPass& bp) {
                       auto& gm = bp.buffer(pm.get());
                       for (int ch = 0; ch < channels; ++ch) {
                           const double* row = g + ch * spatial;
                           for (int64_t i = 0; i < spatial; ++i) gm[static_cast<size_t>(i)] += row[i];
                       }
                   });
}

// ---- pooling ---------------------------------------------------------------

Tensor global_pool(const Tensor& x, PoolKind kind) {
    if (x.shape().size() < 2) throw contract_error("global_pool: rank >= 2 required");
    const int c = x.shape()[0];
    const int64_t spatial = x.numel() / c;
    if (spatial <= 0) throw contract_error("global_pool: empty spatial extent");
    std::vector<double> out(static_cast<size_t>(c));
    auto arg = std::make_shared<std::vector<int64_t>>();
    if (kind == PoolKind::kMax) arg->resize(static_cast<size_t>(c));
    for (int ch = 0; ch < c; ++ch) {
        const double* row = x.data().data() + ch * spatial;
        if (kind == PoolKind::kMax) {
            int64_t best = 0;
            for (int64_t i = 1; i < spatial; ++i)
                if (row[i] > row[best]) best = i;
            out[static_cast<size_t>(ch)] = row[best];
            (*arg)[static_cast<size_t>(ch)] = best;
        } else {
            double acc = 0.0;
            for (int64_t i = 0; i < spatial; ++i) acc += row[i];
            out[static_cast<size_t>(ch)] = acc / static_cast<double>(spatial);
        }
    }
    auto px = x.impl_ptr();
    return make_op(kind == PoolKind::kMax ? "global_max_pool" : "global_avg_pool", {c}, std::move(out), {px},
                   [px, c, spatial, kind, arg](const double* g, BackwardPass& bp) {
                       auto& gx = bp.buffer(px.get());
                       if (kind == PoolKind::kMax) {
                           for (int ch = 0; ch < c; ++ch)
                               gx[static_cast<size_t>(ch * spatial + (*arg)[static_cast<size_t>(ch)])] += g[ch];
                       } else {
                           const double inv = 1.0 / static_cast<double>(spatial);
                           for (int ch = 0; ch < c; ++ch) {
                               double* row = gx.data() + ch * spatial;
                               for (int64_t i = 0; i < spatial; ++i) row[i] += g[ch] * inv;
                           }
                       }
                   });
}

Tensor channel_pool(const Tensor& x, PoolKind kind) {
    if (x.shape().size() < 2) throw contract_error("channel_pool: rank >= 2 required");
    const int c = x.shape()[0];
    const int64_t spatial = x.numel() / c;
    if (spatial <= 0) throw contract_error("channel_pool: empty spatial extent");
    Shape out_shape = x.shape();
    out_shape[0] = 1;
    std::vector<double> out(static_cast<size_t>(spatial));
    auto arg = std::make_shared<std::vector<int>>();
    if (kind == PoolKind::kMax) arg->resize(static_cast<size_t>(spatial));
    for (int64_t i = 0; i < spatial; ++i) {
        if (kind == PoolKind::kMax) {
            int best = 0;
            for (int ch = 1; ch < c; ++ch)
                if (x.data()[ch * spatial + i] > x.data()[best * spatial + i]) best = ch;
            out[static_cast<size_t>(i)] = x.data()[best * spatial + i];
            (*arg)[static_cast<size_t>(i)] = best;
        } else {
            double acc = 0.0;
            for (int ch = 0; ch < c; ++ch) acc += x.data()[ch * spatial + i];
            out[static_cast<size_t>(i)] = acc / static_cast<double>(c);
        }
    }
    auto px = x.impl_ptr();
    return make_op(kind == PoolKind::kMax ? "channel_max_pool" : "channel_avg_pool", out_shape, std::move(out),
                   {px}, [px, c, spatial, kind, arg](const double* g, BackwardPass& bp) {
                       auto& gx = bp.buffer(px.get());
                       if (kind == PoolKind::kMax) {
                           for (int64_t i = 0; i < spatial; ++i)
                               gx[static_cast<size_t>((*arg)[static_cast<size_t>(i)] * spatial + i)] += g[i];
                       } else {
                           const double inv = 1.0 / static_cast<double>(c);
                           for (int ch = 0; ch < c; ++ch)
                               for (int64_t i = 0; i < spatial; ++i) gx[static_cast<size_t>(ch * spatial + i)] += g[i] * inv;
                       }
                   });
}

Tensor avg_pool2d(const Tensor& x, int k, int s) {
    if (x.shape().size() != 3) throw contract_error("avg_pool2d: (C,H,W) input required");
    if (k < 1 || s < 1) throw contract_error("avg_pool2d: k and s must be >= 1");
    const int c = x.shape()[0], h = x.shape()[1], w = x.shape()[2];
    if (h < k || w < k) throw contract_error("avg_pool2d: window larger than input");
    const int oh = (h - k) / s + 1, ow = (w - k) / s + 1;
    std::vector<double> out(static_cast<size_t>(c) * oh * ow);
    const double inv = 1.0 / (static_cast<double>(k) * k);
    for (int ch = 0; ch < c; ++ch)
        for (int y = 0; y < oh; ++y)
            for (int xx = 0; xx < ow; ++xx) {
                double acc = 0.0;
                for (int dy = 0; dy < k; ++dy)
                    for (int dx = 0; dx < k; ++dx)
                        acc += x.data()[(ch * h + y * s + dy) * w + xx * s + dx];
                out[static_cast<size_t>((ch * oh + y) * ow + xx)] = acc * inv;
            }
    auto px = x.impl_ptr();
    return make_op("avg_pool2d", {c, oh, ow}, std::move(out), {px},
                   [px, c, h, w, oh, ow, k, s, inv](const double* g, BackwardPass& bp) {
                       auto& gx = bp.buffer(px.get());
                       for (int ch = 0; ch < c; ++ch)
                           for (int y = 0; y < oh; ++y)
                               for (int xx = 0; xx < ow; ++xx) {
                                   const double gv = g[(ch * oh + y) * ow + xx] * inv;
                                   for (int dy = 0; dy < k; ++dy)
                                       for (int dx = 0; dx < k; ++dx)
                                           gx[static_cast<size_t>((ch * h + y * s + dy) * w + xx * s + dx)] += gv;
                               }
                   });
}

// ---- dense -----------------------------------------------------------------

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
    if (x.shape().size() != 1 || w.shape().size() != 2 || b.shape().size() != 1)
        throw contract_error("linear: expected x (in), w (out,in), b (out)");
    const int in = x.shape()[0], out_n = w.shape()[0];
    if (w.shape()[1] != in) throw contract_error("linear: weight in-extent mismatch on axis 1");
    if (b.shape()[0] != out_n) throw contract_error("linear: bias extent mismatch");
    std::vector<double> out(static_cast<size_t>(out_n));
    for (int o = 0; o < out_n; ++o) {
        double acc = b.data()[static_cast<size_t>(o)];
        const double* wr = w.data().data() + static_cast<int64_t>(o) * in;
        for (int i = 0; i < in; ++i) acc += wr[i] * x.data()[static_cast<size_t>(i)];
        out[static_cast<size_t>(o)] = acc;
    }
    auto px = x.impl_ptr(), pw = w.impl_ptr(), pb = b.impl_ptr();
    return make_op("linear", {out_n}, std::move(out), {px, pw, pb},
                   [px, pw, pb, in, out_n](const double* g, BackwardPass& bp) {
                       if (px->requires_grad) {
                           auto& gx = bp.buffer(px.get());
                           for (int o = 0; o < out_n; ++o) {
                               const double* wr = pw->data.data() + static_cast<int64_t>(o) * in;
                               for (int i = 0; i < in; ++i) gx[static_cast<size_t>(i)] += g[o] * wr[i];
                           }
                       }
                       if (pw->requires_grad) {
                           auto& gw = bp.buffer(pw.get());
                           for (int o = 0; o < out_n; ++o)
                               for (int i = 0; i < in; ++i)
                                   gw[static_cast<size_t>(o) * in + i] += g[o] * px->data[static_cast<size_t>(i)];
                       }
                       if (pb->requires_grad) {
                           auto& gb = bp.buffer(pb.get());
                           for (int o = 0; o < out_n; ++o) gb[static_cast<size_t>(o)] += g[o];
                       }
                   });
}

// ---- convolution -----------------------------------------------------------

namespace {

int div_floor(int a, int b) {
    const int q = a / b, r = a % b;
    return (r != 0 && ((r < 0) != (b < 0))) ? q - 1 : q;
}

int div_ceil(int a, int b) { return -div_floor(-a, b); }

struct Range {
    int lo, hi; // inclusive
};

// Valid o-range so that j = o*s + k - p stays inside [0, j_limit).
Range valid_range(int k, int p, int s, int o_limit, int j_limit) {
    return {std::max(0, div_ceil(p - k, s)), std::min(o_limit - 1, div_floor(j_limit - 1 + p - k, s))};
}

struct ConvGeom {
    int c_in = 0, c_out = 0;
    int in[3] = {1, 1, 1}, out[3] = {1, 1, 1};
    int k[3] = {1, 1, 1}, s[3] = {1, 1, 1}, p[3] = {0, 0, 0};
    bool transposed = false;

    int64_t in_spatial() const { return static_cast<int64_t>(in[0]) * in[1] * in[2]; }
    int64_t out_spatial() const { return static_cast<int64_t>(out[0]) * out[1] * out[2]; }
    // o-space is the side the loop ranges run over: output for a normal
    // conv, input for a transposed one. j-space is the other side.
    const int* o_ext() const { return transposed ? in : out; }
    const int* j_ext() const { return transposed ? out : in; }
};

ConvGeom make_geom(const Tensor& x, const Tensor& w, const Tensor& b, const ConvSpec& spec) {
    if (spec.dims < 1 || spec.dims > 3) throw contract_error("conv: dims must be 1, 2 or 3");
    if (spec.stride < 1) throw contract_error("conv: stride must be >= 1");
    if (spec.pad < 0) throw contract_error("conv: pad must be >= 0");
    const int d = spec.dims;
    if (static_cast<int>(x.shape().size()) != d + 1)
        throw contract_error("conv: input rank must be dims+1, got " + shape_str(x.shape()));
    if (static_cast<int>(w.shape().size()) != d + 2)
        throw contract_error("conv: weight rank must be dims+2, got " + shape_str(w.shape()));

    ConvGeom g;
    g.transposed = spec.transposed;
    g.c_out = w.shape()[0];
    g.c_in = w.shape()[1];
    if (x.shape()[0] != g.c_in)
        throw contract_error("conv: input channel extent " + std::to_string(x.shape()[0]) +
                             " does not match weight axis 1 (" + std::to_string(g.c_in) + ")");
    if (b.shape().size() != 1 || b.shape()[0] != g.c_out)
        throw contract_error("conv: bias extent must equal output channels");

    for (int i = 0; i < d; ++i) {
        const int axis = 3 - d + i;
        g.in[axis] = x.shape()[1 + i];
        g.k[axis] = w.shape()[2 + i];
        g.s[axis] = spec.stride;
        g.p[axis] = spec.pad;
        int out_e;
        if (!spec.transposed) {
            out_e = (g.in[axis] + 2 * spec.pad - g.k[axis]) / spec.stride + 1;
            if (g.in[axis] + 2 * spec.pad < g.k[axis])
                throw contract_error("conv: kernel exceeds padded input on axis " + std::to_string(i));
        } else {
            out_e = (g.in[axis] - 1) * spec.stride - 2 * spec.pad + g.k[axis];
        }
        if (out_e <= 0) throw contract_error("conv: non-positive output extent on axis " + std::to_string(i));
        g.out[axis] = out_e;
    }
    return g;
}

// dst[o] += w * src[j], j = o*s + k - p. dst lives in o-space, src in j-space.
inline void kernel_gather(double* __restrict dst, const double* __restrict src, double wv, const Range r[3],
                          const int s[3], const int koff[3], const int p[3], const int oH, const int oW,
                          const int jH, const int jW) {
    for (int od = r[0].lo; od <= r[0].hi; ++od) {
        const int jd = od * s[0] + koff[0] - p[0];
        for (int oh = r[1].lo; oh <= r[1].hi; ++oh) {
            const int jh = oh * s[1] + koff[1] - p[1];
            double* __restrict drow = dst + (static_cast<int64_t>(od) * oH + oh) * oW;
            const double* __restrict srow = src + (static_cast<int64_t>(jd) * jH + jh) * jW;
            if (s[2] == 1) {
                const double* __restrict sh = srow + koff[2] - p[2];
                for (int ow = r[2].lo; ow <= r[2].hi; ++ow) drow[ow] += wv * sh[ow];
            } else {
                for (int ow = r[2].lo; ow <= r[2].hi; ++ow)
                    drow[ow] += wv * srow[ow * s[2] + koff[2] - p[2]];
            }
        }
    }
}

// dst[j] += w * src[o], j = o*s + k - p. dst lives in j-space, src in o-space.
inline void kernel_scatter(double* __restrict dst, const double* __restrict src, double wv, const Range r[3],
                           const int s[3], const int koff[3], const int p[3], const int oH, const int oW,
                           const int jH, const int jW) {
    for (int od = r[0].lo; od <= r[0].hi; ++od) {
        const int jd = od * s[0] + koff[0] - p[0];
        for (int oh = r[1].lo; oh <= r[1].hi; ++oh) {
            const int jh = oh * s[1] + koff[1] - p[1];
            const double* __restrict srow = src + (static_cast<int64_t>(od) * oH + oh) * oW;
            double* __restrict drow = dst + (static_cast<int64_t>(jd) * jH + jh) * jW;
            if (s[2] == 1) {
                double* __restrict dh = drow + koff[2] - p[2];
                for (int ow = r[2].lo; ow <= r[2].hi; ++ow) dh[ow] += wv * srow[ow];
            } else {
                for (int ow = r[2].lo; ow <= r[2].hi; ++ow)
                    drow[ow * s[2] + koff[2] - p[2]] += wv * srow[ow];
            }
        }
    }
}

// acc += sum over o of a[o] * b[j], j = o*s + k - p. a in o-space, b in j-space.
inline double kernel_dot(const double* __restrict a, const double* __restrict b, const Range r[3],
                         const int s[3], const int koff[3], const int p[3], const int oH, const int oW,
                         const int jH, const int jW) {
    double acc = 0.0;
    for (int od = r[0].lo; od <= r[0].hi; ++od) {
        const int jd = od * s[0] + koff[0] - p[0];
        for (int oh = r[1].lo; oh <= r[1].hi; ++oh) {
            const int jh = oh * s[1] + koff[1] - p[1];
            const double* __restrict arow = a + (static_cast<int64_t>(od) * oH + oh) * oW;
            const double* __restrict brow = b + (static_cast<int64_t>(jd) * jH + jh) * jW;
            if (s[2] == 1) {
                const double* __restrict bh = brow + koff[2] - p[2];
#pragma omp simd reduction(+ : acc)
                for (int ow = r[2].lo; ow <= r[2].hi; ++ow) acc += arow[ow] * bh[ow];
            } else {
#pragma omp simd reduction(+ : acc)
                for (int ow = r[2].lo; ow <= r[2].hi; ++ow)
                    acc += arow[ow] * brow[ow * s[2] + koff[2] - p[2]];
            }
        }
    }
    return acc;
}

// ---- fast path for 3x3x3 stride-1 pad-1 convolutions ----------------------
//
// The volume mergers and the refiner spend nearly all their time in this one
// shape, so it gets a register-tiled kernel: one output row is accumulated
// across all input channels and kernel taps before being stored, with the
// three x-taps fused into a single pass.

constexpr int kFastMaxW = 64;

// dst(A,D,H,W) += taps applied to src(B,D,H,W). The tap t (0..26) of the
// channel pair (a,b) sits at wbase[a*wa + b*wb + (flip ? 26-t : t)]; flipped
// taps turn this same kernel into the input-gradient of the forward conv.
void conv333_apply(double* __restrict dst, const double* __restrict src, const double* __restrict wbase,
                   int64_t wa, int64_t wb, bool flip, int A, int B, int D, int H, int W) {
    const int64_t plane = static_cast<int64_t>(H) * W;
    const int64_t vol = static_cast<int64_t>(D) * plane;
    double acc[kFastMaxW];
    for (int a = 0; a < A; ++a) {
        for (int od = 0; od < D; ++od) {
            for (int oh = 0; oh < H; ++oh) {
                double* __restrict drow = dst + (a * vol + od * plane + static_cast<int64_t>(oh) * W);
                std::memcpy(acc, drow, static_cast<size_t>(W) * sizeof(double));
                for (int b = 0; b < B; ++b) {
                    const double* __restrict sbase = src + b * vol;
                    const double* __restrict wt = wbase + a * wa + b * wb;
                    for (int kd = 0; kd < 3; ++kd) {
                        const int id = od + kd - 1;
                        if (id < 0 || id >= D) continue;
                        for (int kh = 0; kh < 3; ++kh) {
                            const int ih = oh + kh - 1;
                            if (ih < 0 || ih >= H) continue;
                            const int t0 = (kd * 3 + kh) * 3;
                            const double w0 = wt[flip ? 26 - t0 : t0];
                            const double w1 = wt[flip ? 25 - t0 : t0 + 1];
                            const double w2 = wt[flip ? 24 - t0 : t0 + 2];
                            const double* __restrict r = sbase + id * plane + static_cast<int64_t>(ih) * W;
                            acc[0] += w1 * r[0] + w2 * r[1];
#pragma omp simd
                            for (int ow = 1; ow < W - 1; ++ow)
                                acc[ow] += w0 * r[ow - 1] + w1 * r[ow] + w2 * r[ow + 1];
                            acc[W - 1] += w0 * r[W - 2] + w1 * r[W - 1];
                        }
                    }
                }
                std::memcpy(drow, acc, static_cast<size_t>(W) * sizeof(double));
            }
        }
    }
}

// gw[(co*Ci+ci)*27 + t] += correlation of gout(Co,...) with in(Ci,...).
void conv333_weight_grad(double* __restrict gw, const double* __restrict gout, const double* __restrict in,
                         int Co, int Ci, int D, int H, int W) {
    const int64_t plane = static_cast<int64_t>(H) * W;
    const int64_t vol = static_cast<int64_t>(D) * plane;
    for (int co = 0; co < Co; ++co) {
        for (int ci = 0; ci < Ci; ++ci) {
            double acc[27] = {0.0};
            for (int od = 0; od < D; ++od) {
                for (int oh = 0; oh < H; ++oh) {
                    const double* __restrict go = gout + co * vol + od * plane + static_cast<int64_t>(oh) * W;
                    for (int kd = 0; kd < 3; ++kd) {
                        const int id = od + kd - 1;
                        if (id < 0 || id >= D) continue;
                        for (int kh = 0; kh < 3; ++kh) {
                            const int ih = oh + kh - 1;
                            if (ih < 0 || ih >= H) continue;
                            const double* __restrict ir = in + ci * vol + id * plane + static_cast<int64_t>(ih) * W;
                            double a0 = 0.0, a1 = 0.0, a2 = 0.0;
#pragma omp simd reduction(+ : a0, a1, a2)
                            for (int ow = 1; ow < W - 1; ++ow) {
                                const double g = go[ow];
                                a0 += g * ir[ow - 1];
                                a1 += g * ir[ow];
                                a2 += g * ir[ow + 1];
                            }
                            a1 += go[0] * ir[0];
                            a2 += go[0] * ir[1];
                            a0 += go[W - 1] * ir[W - 2];
                            a1 += go[W - 1] * ir[W - 1];
                            const int t0 = (kd * 3 + kh) * 3;
                            acc[t0] += a0;
                            acc[t0 + 1] += a1;
                            acc[t0 + 2] += a2;
                        }
                    }
                }
            }
            double* gw_c = gw + (static_cast<int64_t>(co) * Ci + ci) * 27;
            for (int t = 0; t < 27; ++t) gw_c[t] += acc[t];
        }
    }
}

bool fast333_applicable(const ConvGeom& g) {
    return !g.transposed && g.k[0] == 3 && g.k[1] == 3 && g.k[2] == 3 && g.s[0] == 1 && g.s[1] == 1 &&
           g.s[2] == 1 && g.p[0] == 1 && g.p[1] == 1 && g.p[2] == 1 && g.in[2] >= 4 && g.in[2] <= kFastMaxW &&
           g.in[0] == g.out[0] && g.in[1] == g.out[1] && g.in[2] == g.out[2];
}

struct KernelWalk {
    Range r[3];
    int koff[3];
};

// Enumerates kernel offsets with their valid o-ranges once per conv call.
std::vector<KernelWalk> make_walks(const ConvGeom& g) {
    std::vector<KernelWalk> walks;
    walks.reserve(static_cast<size_t>(g.k[0]) * g.k[1] * g.k[2]);
    const int* oe = g.o_ext();
    const int* je = g.j_ext();
    for (int kd = 0; kd < g.k[0]; ++kd)
        for (int kh = 0; kh < g.k[1]; ++kh)
            for (int kw = 0; kw < g.k[2]; ++kw) {
                KernelWalk wk;
                wk.koff[0] = kd;
                wk.koff[1] = kh;
                wk.koff[2] = kw;
                bool empty = false;
                for (int d = 0; d < 3; ++d) {
                    wk.r[d] = valid_range(wk.koff[d], g.p[d], g.s[d], oe[d], je[d]);
                    empty = empty || wk.r[d].lo > wk.r[d].hi;
                }
                if (!empty) walks.push_back(wk);
            }
    return walks;
}

} // namespace

Tensor conv(const Tensor& x, const Tensor& w, const Tensor& b, const ConvSpec& spec) {
    const ConvGeom g = make_geom(x, w, b, spec);
    const auto walks = make_walks(g);

    Shape out_shape{g.c_out};
    for (int i = 0; i < spec.dims; ++i) out_shape.push_back(g.out[3 - spec.dims + i]);

    const int64_t in_sp = g.in_spatial(), out_sp = g.out_spatial();
    const int64_t ksz = static_cast<int64_t>(g.k[0]) * g.k[1] * g.k[2];
    std::vector<double> out(static_cast<size_t>(g.c_out * out_sp));
    for (int co = 0; co < g.c_out; ++co)
        std::fill_n(out.begin() + co * out_sp, out_sp, b.data()[static_cast<size_t>(co)]);

    const double* xd = x.data().data();
    const double* wd = w.data().data();
    if (fast333_applicable(g)) {
        conv333_apply(out.data(), xd, wd, static_cast<int64_t>(g.c_in) * 27, 27, false, g.c_out, g.c_in,
                      g.in[0], g.in[1], g.in[2]);
    } else {
        for (int co = 0; co < g.c_out; ++co) {
            double* out_c = out.data() + co * out_sp;
            for (int ci = 0; ci < g.c_in; ++ci) {
                const double* in_c = xd + ci * in_sp;
                const double* w_c = wd + (static_cast<int64_t>(co) * g.c_in + ci) * ksz;
                for (const KernelWalk& wk : walks) {
                    const double wv =
                        w_c[(static_cast<int64_t>(wk.koff[0]) * g.k[1] + wk.koff[1]) * g.k[2] + wk.koff[2]];
                    if (!g.transposed)
                        kernel_gather(out_c, in_c, wv, wk.r, g.s, wk.koff, g.p, g.out[1], g.out[2], g.in[1],
                                      g.in[2]);
                    else
                        kernel_scatter(out_c, in_c, wv, wk.r, g.s, wk.koff, g.p, g.in[1], g.in[2], g.out[1],
                                       g.out[2]);
                }
            }
        }
    }

    auto px = x.impl_ptr(), pw = w.impl_ptr(), pb = b.impl_ptr();
    auto geom = std::make_shared<ConvGeom>(g);
    auto wks = std::make_shared<std::vector<KernelWalk>>(walks);
    return make_op(spec.transposed ? "conv_transposed" : "conv", out_shape, std::move(out), {px, pw, pb},
                   [px, pw, pb, geom, wks, in_sp, out_sp, ksz](const double* gout, BackwardPass& bp) {
                       const ConvGeom& g = *geom;
                       const bool fast = fast333_applicable(g);
                       if (px->requires_grad) {
                           auto& gx = bp.buffer(px.get());
                           if (fast) {
                               // input gradient = same conv with flipped taps and
                               // swapped channel roles
                               conv333_apply(gx.data(), gout, pw->data.data(), 27,
                                             static_cast<int64_t>(g.c_in) * 27, true, g.c_in, g.c_out, g.in[0],
                                             g.in[1], g.in[2]);
                           } else {
                               for (int co = 0; co < g.c_out; ++co) {
                                   const double* go_c = gout + co * out_sp;
                                   for (int ci = 0; ci < g.c_in; ++ci) {
                                       double* gx_c = gx.data() + ci * in_sp;
                                       const double* w_c =
                                           pw->data.data() + (static_cast<int64_t>(co) * g.c_in + ci) * ksz;
                                       for (const KernelWalk& wk : *wks) {
                                           const double wv =
                                               w_c[(static_cast<int64_t>(wk.koff[0]) * g.k[1] + wk.koff[1]) *
                                                       g.k[2] +
                                                   wk.koff[2]];
                                           if (!g.transposed)
                                               kernel_scatter(gx_c, go_c, wv, wk.r, g.s, wk.koff, g.p, g.out[1],
                                                              g.out[2], g.in[1], g.in[2]);
                                           else
                                               kernel_gather(gx_c, go_c, wv, wk.r, g.s, wk.koff, g.p, g.in[1],
                                                             g.in[2], g.out[1], g.out[2]);
                                       }
                                   }
                               }
                           }
                       }
                       if (pw->requires_grad) {
                           auto& gw = bp.buffer(pw.get());
                           if (fast) {
                               conv333_weight_grad(gw.data(), gout, px->data.data(), g.c_out, g.c_in, g.in[0],
                                                   g.in[1], g.in[2]);
                           } else {
                               for (int co = 0; co < g.c_out; ++co) {
                                   const double* go_c = gout + co * out_sp;
                                   for (int ci = 0; ci < g.c_in; ++ci) {
                                       const double* in_c = px->data.data() + ci * in_sp;
                                       double* gw_c = gw.data() + (static_cast<int64_t>(co) * g.c_in + ci) * ksz;
                                       for (const KernelWalk& wk : *wks) {
                                           double acc;
                                           if (!g.transposed)
                                               acc = kernel_dot(go_c, in_c, wk.r, g.s, wk.koff, g.p, g.out[1],
                                                                g.out[2], g.in[1], g.in[2]);
                                           else
                                               acc = kernel_dot(in_c, go_c, wk.r, g.s, wk.koff, g.p, g.in[1],
                                                                g.in[2], g.out[1], g.out[2]);
                                           gw_c[(static_cast<int64_t>(wk.koff[0]) * g.k[1] + wk.koff[1]) *
                                                    g.k[2] +
                                                wk.koff[2]] += acc;
                                       }
                                   }
                               }
                           }
                       }
                       if (pb->requires_grad) {
                           auto& gb = bp.buffer(pb.get());
                           for (int co = 0; co < g.c_out; ++co) {
                               double acc = 0.0;
                               const double* go_c = gout + co * out_sp;
                               for (int64_t i = 0; i < out_sp; ++i) acc += go_c[i];
                               gb[static_cast<size_t>(co)] += acc;
                           }
                       }
                   });
}

// ---- softmax over branches --------------------------------------------------

std::vector<Tensor> softmax_over_branches(const std::vector<Tensor>& logits) {
    if (logits.empty()) throw contract_error("softmax_over_branches: empty branch list");
    const Shape& shape = logits[0].shape();
    for (const Tensor& t : logits) require_same_shape(logits[0], t, "softmax_over_branches");
    const size_t n = logits.size();
    const size_t m = logits[0].data().size();

    // Shared buffer holding all n normalized maps; saved for backward.
    auto soft = std::make_shared<std::vector<double>>(n * m);
    for (size_t i = 0; i < m; ++i) {
        double mx = logits[0].data()[i];
        for (size_t b = 1; b < n; ++b) mx = std::max(mx, logits[b].data()[i]);
        double z = 0.0;
        for (size_t b = 0; b < n; ++b) {
            const double e = std::exp(logits[b].data()[i] - mx);
            (*soft)[b * m + i] = e;
            z += e;
        }
        const double inv = 1.0 / z;
        for (size_t b = 0; b < n; ++b) (*soft)[b * m + i] *= inv;
    }

    std::vector<std::shared_ptr<TensorImpl>> parents;
    parents.reserve(n);
    for (const Tensor& t : logits) parents.push_back(t.impl_ptr());

    std::vector<Tensor> outs;
    outs.reserve(n);
    for (size_t kbr = 0; kbr < n; ++kbr) {
        std::vector<double> data(soft->begin() + kbr * m, soft->begin() + (kbr + 1) * m);
        auto po = parents;
        outs.push_back(make_op("softmax_over_branches", shape, std::move(data), std::move(po),
                               [parents, soft, n, m, kbr](const double* g, BackwardPass& bp) {
                                   for (size_t br = 0; br < n; ++br) {
                                       if (!parents[br]->requires_grad) continue;
                                       auto& gb = bp.buffer(parents[br].get());
                                       const double* sk = soft->data() + kbr * m;
                                       const double* si = soft->data() + br * m;
                                       if (br == kbr) {
                                           for (size_t i = 0; i < m; ++i) gb[i] += g[i] * sk[i] * (1.0 - si[i]);
                                       } else {
                                           for (size_t i = 0; i < m; ++i) gb[i] -= g[i] * sk[i] * si[i];
                                       }
                                   }
                               }));
    }
    return outs;
}

// ---- backward ----------------------------------------------------------------

namespace {

void run_backward(const Tensor& loss,
                  const std::function<void(TensorImpl*, std::vector<double>&&)>& sink) {
    if (!loss.defined() || loss.numel() != 1) throw contract_error("backward: loss must be a scalar tensor");
    if (!loss.requires_grad()) throw contract_error("backward: loss is not connected to a graph");

    // Iterative post-order over requires-grad nodes; each visited once.
    std::vector<TensorImpl*> order;
    std::unordered_map<TensorImpl*, bool> visited;
    struct Frame {
        TensorImpl* node;
        size_t next;
    };
    std::vector<Frame> stack;
    stack.push_back({loss.impl(), 0});
    visited[loss.impl()] = true;
    while (!stack.empty()) {
        Frame& f = stack.back();
        if (f.next < f.node->parents.size()) {
            TensorImpl* p = f.node->parents[f.next++].get();
            if (p && p->requires_grad && !visited[p]) {
                visited[p] = true;
                stack.push_back({p, 0});
            }
        } else {
            order.push_back(f.node);
            stack.pop_back();
        }
    }

    BackwardPass bp;
    bp.buffer(loss.impl())[0] = 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        TensorImpl* node = *it;
        if (!node->backward_fn) continue;
        auto found = bp.bufs_.find(node);
        if (found == bp.bufs_.end()) continue; // no gradient flowed here
        node->backward_fn(found->second.data(), bp);
        if (node != loss.impl()) found->second.clear(); // free as consumed
    }
    for (TensorImpl* node : order) {
        if (!node->is_leaf() || !node->requires_grad) continue;
        auto found = bp.bufs_.find(node);
        if (found == bp.bufs_.end()) continue;
        sink(node, std::move(found->second));
    }
}

} // namespace

void backward(const Tensor& loss) {
    run_backward(loss, [](TensorImpl* leaf, std::vector<double>&& g) {
        if (leaf->grad.empty()) {
            leaf->grad = std::move(g);
        } else {
            for (size_t i = 0; i < g.size(); ++i) leaf->grad[i] += g[i];
        }
    });
}

void backward(const Tensor& loss, GradMap& out) {
    run_backward(loss, [&out](TensorImpl* leaf, std::vector<double>&& g) {
        auto& dst = out[leaf];
        if (dst.empty()) {
            dst = std::move(g);
        } else {
            for (size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
        }
    });
}

// ---- gradient check ------------------------------------------------------------

double grad_check(const std::function<Tensor(const Tensor&)>& f, Tensor x, double eps, int max_probes,
                  uint64_t probe_seed) {
    if (eps <= 0.0) throw contract_error("grad_check: eps must be positive");
    if (!x.requires_grad()) x.impl()->requires_grad = true;
    x.zero_grad();
    Tensor loss = f(x);
    if (loss.numel() != 1) throw contract_error("grad_check: f must return a scalar");
    backward(loss);
    std::vector<double> analytic(static_cast<size_t>(x.numel()), 0.0);
    if (x.has_grad()) analytic.assign(x.grad().begin(), x.grad().end());

    std::vector<int64_t> probes;
    const int64_t n = x.numel();
    if (max_probes <= 0 || max_probes >= n) {
        probes.resize(static_cast<size_t>(n));
        for (int64_t i = 0; i < n; ++i) probes[static_cast<size_t>(i)] = i;
    } else {
        Rng rng(probe_seed);
        std::vector<int> idx = rng.sample_without_replacement(static_cast<int>(n), max_probes);
        for (int i : idx) probes.push_back(i);
    }

    auto data = x.mutable_data();
    double worst = 0.0;
    for (int64_t c : probes) {
        const double orig = data[static_cast<size_t>(c)];
        data[static_cast<size_t>(c)] = orig + eps;
        const double fp = f(x).item();
        data[static_cast<size_t>(c)] = orig - eps;
        const double fm = f(x).item();
        data[static_cast<size_t>(c)] = orig;
        const double numeric = (fp - fm) / (2.0 * eps);
        const double err = std::fabs(analytic[static_cast<size_t>(c)] - numeric) /
                           std::max(1.0, std::fabs(numeric));
        worst = std::max(worst, err);
    }
    return worst;
}

} // namespace garnet
