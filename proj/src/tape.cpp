#include "gqkva/tape.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>

#include "gqkva/kernels.hpp"

namespace gqkva {

namespace {

struct MatmulPlan {
    kernels::MatmulDims dims;
    Shape out_shape;
};

MatmulPlan plan_matmul(const Tensor& a, const Tensor& b) {
    if (a.ndim() < 2 || b.ndim() < 2) {
        throw DimensionError("matmul: operands must have >= 2 dims, got " +
                             shape_str(a.shape()) + " x " + shape_str(b.shape()));
    }
    const int64_t m = a.dim(-2), ka = a.dim(-1);
    const int64_t kb = b.dim(-2), n = b.dim(-1);
    if (ka != kb) {
        throw DimensionError("matmul: inner extents differ: " + shape_str(a.shape()) + " x " +
                             shape_str(b.shape()));
    }
    Shape a_lead(a.shape().begin(), a.shape().end() - 2);
    Shape b_lead(b.shape().begin(), b.shape().end() - 2);
    if (!a_lead.empty() && !b_lead.empty() && a_lead != b_lead) {
        throw DimensionError("matmul: batch extents differ: " + shape_str(a.shape()) + " x " +
                             shape_str(b.shape()));
    }
    const Shape& lead = a_lead.empty() ? b_lead : a_lead;
    MatmulPlan p;
    p.dims.batch = shape_numel(lead);
    p.dims.m = m;
    p.dims.k = ka;
    p.dims.n = n;
    p.dims.a_batched = !a_lead.empty();
    p.dims.b_batched = !b_lead.empty();
    p.out_shape = lead;
    p.out_shape.push_back(m);
    p.out_shape.push_back(n);
    return p;
}

// outer x axis x inner decomposition around `axis`.
struct AxisSplit {
    int64_t outer = 1, extent = 1, inner = 1;
};

AxisSplit split_at(const Shape& s, int axis) {
    AxisSplit sp;
    for (int i = 0; i < axis; ++i) sp.outer *= s[static_cast<size_t>(i)];
    sp.extent = s[static_cast<size_t>(axis)];
    for (size_t i = static_cast<size_t>(axis) + 1; i < s.size(); ++i) sp.inner *= s[i];
    return sp;
}

int normalize_axis(int axis, int ndim, const char* op) {
    if (axis < 0) axis += ndim;
    if (axis < 0 || axis >= ndim) {
        throw DimensionError(std::string(op) + ": axis out of range");
    }
    return axis;
}

template <typename T>
void copy_axis_block(const T* src, T* dst, const AxisSplit& src_sp, int64_t src_start,
                     const AxisSplit& dst_sp, int64_t dst_start, int64_t count) {
    for (int64_t o = 0; o < src_sp.outer; ++o) {
        const T* s = src + (o * src_sp.extent + src_start) * src_sp.inner;
        T* d = dst + (o * dst_sp.extent + dst_start) * dst_sp.inner;
        std::memcpy(d, s, static_cast<size_t>(count * src_sp.inner) * sizeof(T));
    }
}

bool is_suffix(const Shape& small, const Shape& big) {
    if (small.size() > big.size()) return false;
    return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

}  // namespace

namespace ops {

Tensor matmul(const Tensor& a, const Tensor& b) {
    check_same_dtype(a, b, "matmul");
    MatmulPlan p = plan_matmul(a, b);
    Tensor out = Tensor::zeros(p.out_shape, a.dtype());
    if (a.dtype() == DType::F32) {
        kernels::matmul(a.data<float>().data(), b.data<float>().data(),
                        out.data<float>().data(), p.dims);
    } else {
        kernels::matmul(a.data<double>().data(), b.data<double>().data(),
                        out.data<double>().data(), p.dims);
    }
    check_finite(out, "matmul");
    return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
    check_same_dtype(a, b, "add");
    Tensor out = Tensor::zeros(a.shape(), a.dtype());
    if (a.shape() == b.shape()) {
        if (a.dtype() == DType::F32) {
            kernels::add(a.data<float>().data(), b.data<float>().data(),
                         out.data<float>().data(), a.numel());
        } else {
            kernels::add(a.data<double>().data(), b.data<double>().data(),
                         out.data<double>().data(), a.numel());
        }
    } else if (is_suffix(b.shape(), a.shape()) && b.ndim() < a.ndim()) {
        const int64_t width = b.numel();
        const int64_t rows = a.numel() / width;
        if (a.dtype() == DType::F32) {
            kernels::add_broadcast_rows(a.data<float>().data(), b.data<float>().data(),
                                        out.data<float>().data(), rows, width);
        } else {
            kernels::add_broadcast_rows(a.data<double>().data(), b.data<double>().data(),
                                        out.data<double>().data(), rows, width);
        }
    } else {
        throw DimensionError("add: shapes incompatible: " + shape_str(a.shape()) + " + " +
                             shape_str(b.shape()));
    }
    check_finite(out, "add");
    return out;
}

Tensor scale(const Tensor& a, double s) {
    Tensor out = Tensor::zeros(a.shape(), a.dtype());
    if (a.dtype() == DType::F32) {
        kernels::scale(a.data<float>().data(), s, out.data<float>().data(), a.numel());
    } else {
        kernels::scale(a.data<double>().data(), s, out.data<double>().data(), a.numel());
    }
    check_finite(out, "scale");
    return out;
}

Tensor permute(const Tensor& a, const std::vector<int>& perm) {
    const int nd = a.ndim();
    if (static_cast<int>(perm.size()) != nd) {
        throw DimensionError("permute: axis list size " + std::to_string(perm.size()) +
                             " does not match shape " + shape_str(a.shape()));
    }
    std::vector<bool> seen(static_cast<size_t>(nd), false);
    for (int p : perm) {
        if (p < 0 || p >= nd || seen[static_cast<size_t>(p)]) {
            throw DimensionError("permute: invalid axis permutation");
        }
        seen[static_cast<size_t>(p)] = true;
    }
    Shape out_shape(static_cast<size_t>(nd));
    for (int i = 0; i < nd; ++i) {
        out_shape[static_cast<size_t>(i)] = a.dim(perm[static_cast<size_t>(i)]);
    }
    // in_stride[i] = stride of input axis i; walk output flat order.
    std::vector<int64_t> in_strides(static_cast<size_t>(nd), 1);
    for (int i = nd - 2; i >= 0; --i) {
        in_strides[static_cast<size_t>(i)] =
            in_strides[static_cast<size_t>(i + 1)] * a.dim(i + 1);
    }
    std::vector<int64_t> out_in_stride(static_cast<size_t>(nd));
    for (int i = 0; i < nd; ++i) {
        out_in_stride[static_cast<size_t>(i)] = in_strides[static_cast<size_t>(perm[static_cast<size_t>(i)])];
    }
    Tensor out = Tensor::zeros(out_shape, a.dtype());
    const int64_t n = a.numel();
    auto run = [&](auto* dst, const auto* src) {
        for (int64_t flat = 0; flat < n; ++flat) {
            int64_t rem = flat, in_flat = 0;
            for (int i = nd - 1; i >= 0; --i) {
                const int64_t extent = out_shape[static_cast<size_t>(i)];
                in_flat += (rem % extent) * out_in_stride[static_cast<size_t>(i)];
                rem /= extent;
            }
            dst[flat] = src[in_flat];
        }
    };
    if (a.dtype() == DType::F32) {
        run(out.data<float>().data(), a.data<float>().data());
    } else {
        run(out.data<double>().data(), a.data<double>().data());
    }
    return out;
}

Tensor transpose_last2(const Tensor& a) {
    if (a.ndim() < 2) {
        throw DimensionError("transpose_last2: needs >= 2 dims, got " + shape_str(a.shape()));
    }
    std::vector<int> perm(static_cast<size_t>(a.ndim()));
    std::iota(perm.begin(), perm.end(), 0);
    std::swap(perm[perm.size() - 1], perm[perm.size() - 2]);
    return permute(a, perm);
}

Tensor reshape(const Tensor& a, Shape shape) { return a.reshaped(std::move(shape)); }

Tensor slice(const Tensor& a, int axis, int64_t start, int64_t len) {
    axis = normalize_axis(axis, a.ndim(), "slice");
    const AxisSplit sp = split_at(a.shape(), axis);
    if (start < 0 || len < 1 || start + len > sp.extent) {
        throw DimensionError("slice: range [" + std::to_string(start) + ", " +
                             std::to_string(start + len) + ") out of bounds for axis extent " +
                             std::to_string(sp.extent));
    }
    Shape out_shape = a.shape();
    out_shape[static_cast<size_t>(axis)] = len;
    Tensor out = Tensor::zeros(out_shape, a.dtype());
    AxisSplit osp = sp;
    osp.extent = len;
    if (a.dtype() == DType::F32) {
        copy_axis_block(a.data<float>().data(), out.data<float>().data(), sp, start, osp, 0, len);
    } else {
        copy_axis_block(a.data<double>().data(), out.data<double>().data(), sp, start, osp, 0,
                        len);
    }
    return out;
}

Tensor concat(const std::vector<const Tensor*>& parts, int axis) {
    if (parts.empty()) throw DimensionError("concat: no inputs");
    const Tensor& first = *parts.front();
    axis = normalize_axis(axis, first.ndim(), "concat");
    int64_t total = 0;
    for (const Tensor* p : parts) {
        check_same_dtype(first, *p, "concat");
        if (p->ndim() != first.ndim()) {
            throw DimensionError("concat: rank mismatch: " + shape_str(first.shape()) + " vs " +
                                 shape_str(p->shape()));
        }
        for (int i = 0; i < first.ndim(); ++i) {
            if (i != axis && p->dim(i) != first.dim(i)) {
                throw DimensionError("concat: extents differ off axis: " +
                                     shape_str(first.shape()) + " vs " + shape_str(p->shape()));
            }
        }
        total += p->dim(axis);
    }
    Shape out_shape = first.shape();
    out_shape[static_cast<size_t>(axis)] = total;
    Tensor out = Tensor::zeros(out_shape, first.dtype());
    const AxisSplit osp = split_at(out_shape, axis);
    int64_t offset = 0;
    for (const Tensor* p : parts) {
        const AxisSplit psp = split_at(p->shape(), axis);
        if (first.dtype() == DType::F32) {
            copy_axis_block(p->data<float>().data(), out.data<float>().data(), psp, 0, osp,
                            offset, psp.extent);
        } else {
            copy_axis_block(p->data<double>().data(), out.data<double>().data(), psp, 0, osp,
                            offset, psp.extent);
        }
        offset += psp.extent;
    }
    return out;
}

Tensor broadcast_to(const Tensor& a, const Shape& target) {
    if (static_cast<size_t>(a.ndim()) != target.size()) {
        throw DimensionError("broadcast_to: rank mismatch: " + shape_str(a.shape()) + " -> " +
                             shape_str(target));
    }
    for (int i = 0; i < a.ndim(); ++i) {
        int64_t e = target[static_cast<size_t>(i)];
        if (a.dim(i) != e && a.dim(i) != 1) {
            throw DimensionError("broadcast_to: cannot expand " + shape_str(a.shape()) +
                                 " to " + shape_str(target));
        }
    }
    Tensor out = Tensor::zeros(target, a.dtype());
    const int nd = a.ndim();
    const int64_t n = out.numel();
    for (int64_t flat = 0; flat < n; ++flat) {
        int64_t rem = flat, in_flat = 0, stride = 1;
        for (int i = nd - 1; i >= 0; --i) {
            const int64_t extent = target[static_cast<size_t>(i)];
            const int64_t idx = rem % extent;
            rem /= extent;
            if (a.dim(i) != 1) in_flat += idx * stride;
            stride *= a.dim(i);
        }
        out.set(flat, a.get(in_flat));
    }
    return out;
}

Tensor softmax_lastdim(const Tensor& a) {
    if (a.ndim() < 1) {
        throw DimensionError("softmax_lastdim: needs >= 1 dim, got " + shape_str(a.shape()));
    }
    const int64_t width = a.dim(-1);
    const int64_t rows = a.numel() / width;
    Tensor out = Tensor::zeros(a.shape(), a.dtype());
    if (a.dtype() == DType::F32) {
        kernels::softmax_rows(a.data<float>().data(), out.data<float>().data(), rows, width);
    } else {
        kernels::softmax_rows(a.data<double>().data(), out.data<double>().data(), rows, width);
    }
    check_finite(out, "softmax_lastdim");
    return out;
}

Tensor layernorm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
    check_same_dtype(x, gamma, "layernorm");
    check_same_dtype(x, beta, "layernorm");
    if (x.ndim() < 1) {
        throw DimensionError("layernorm: needs >= 1 dim, got " + shape_str(x.shape()));
    }
    if (eps <= 0.0) throw ConfigError("layernorm: eps must be positive");
    const int64_t width = x.dim(-1);
    if (gamma.numel() != width || beta.numel() != width) {
        throw DimensionError("layernorm: affine lengths " + shape_str(gamma.shape()) + "/" +
                             shape_str(beta.shape()) + " do not match last extent of " +
                             shape_str(x.shape()));
    }
    const int64_t rows = x.numel() / width;
    Tensor out = Tensor::zeros(x.shape(), x.dtype());
    if (x.dtype() == DType::F32) {
        kernels::layernorm_rows(x.data<float>().data(), gamma.data<float>().data(),
                                beta.data<float>().data(), out.data<float>().data(), rows,
                                width, eps);
    } else {
        kernels::layernorm_rows(x.data<double>().data(), gamma.data<double>().data(),
                                beta.data<double>().data(), out.data<double>().data(), rows,
                                width, eps);
    }
    check_finite(out, "layernorm");
    return out;
}

Tensor gelu(const Tensor& a) {
    Tensor out = Tensor::zeros(a.shape(), a.dtype());
    if (a.dtype() == DType::F32) {
        kernels::gelu(a.data<float>().data(), out.data<float>().data(), a.numel());
    } else {
        kernels::gelu(a.data<double>().data(), out.data<double>().data(), a.numel());
    }
    check_finite(out, "gelu");
    return out;
}

Tensor sum_leading_to(const Tensor& t, const Shape& target) {
    if (t.shape() == target) return t;
    if (!is_suffix(target, t.shape())) {
        throw DimensionError("sum_leading_to: " + shape_str(target) + " is not a suffix of " +
                             shape_str(t.shape()));
    }
    const int64_t width = shape_numel(target);
    const int64_t rows = t.numel() / width;
    Tensor out = Tensor::zeros(target, t.dtype());
    if (t.dtype() == DType::F32) {
        kernels::column_sum(t.data<float>().data(), out.data<float>().data(), rows, width);
    } else {
        kernels::column_sum(t.data<double>().data(), out.data<double>().data(), rows, width);
    }
    return out;
}

}  // namespace ops

namespace adjoint {

std::pair<Tensor, Tensor> matmul(const Tensor& g, const Tensor& a, const Tensor& b) {
    MatmulPlan p = plan_matmul(a, b);
    if (g.shape() != p.out_shape) {
        throw DimensionError("matmul backward: upstream shape " + shape_str(g.shape()) +
                             " does not match output " + shape_str(p.out_shape));
    }
    Tensor da, db;
    // dA = G B^T, reduced over batch if a was broadcast.
    {
        Tensor full = ops::matmul(g, ops::transpose_last2(b));
        da = ops::sum_leading_to(full, a.shape());
    }
    // dB = A^T G; when b was broadcast the batch collapses into the row dim.
    if (p.dims.b_batched || !p.dims.a_batched) {
        db = ops::matmul(ops::transpose_last2(a), g);
    } else {
        Tensor a2 = ops::reshape(a, Shape{p.dims.batch * p.dims.m, p.dims.k});
        Tensor g2 = ops::reshape(g, Shape{p.dims.batch * p.dims.m, p.dims.n});
        db = ops::matmul(ops::transpose_last2(a2), g2);
    }
    return {std::move(da), std::move(db)};
}

std::pair<Tensor, Tensor> add(const Tensor& g, const Shape& a_shape, const Shape& b_shape) {
    if (g.shape() != a_shape) {
        throw DimensionError("add backward: upstream shape " + shape_str(g.shape()) +
                             " does not match output " + shape_str(a_shape));
    }
    Tensor db = ops::sum_leading_to(g, b_shape);
    return {g, std::move(db)};
}

Tensor scale(const Tensor& g, double s) { return ops::scale(g, s); }

Tensor permute(const Tensor& g, const std::vector<int>& perm) {
    std::vector<int> inverse(perm.size());
    for (size_t i = 0; i < perm.size(); ++i) {
        inverse[static_cast<size_t>(perm[i])] = static_cast<int>(i);
    }
    return ops::permute(g, inverse);
}

Tensor reshape(const Tensor& g, const Shape& input_shape) { return g.reshaped(input_shape); }

Tensor slice(const Tensor& g, const Shape& input_shape, int axis, int64_t start) {
    axis = normalize_axis(axis, static_cast<int>(input_shape.size()), "slice backward");
    Tensor dx = Tensor::zeros(input_shape, g.dtype());
    const AxisSplit isp = split_at(input_shape, axis);
    const AxisSplit gsp = split_at(g.shape(), axis);
    if (g.dtype() == DType::F32) {
        copy_axis_block(g.data<float>().data(), dx.data<float>().data(), gsp, 0, isp, start,
                        gsp.extent);
    } else {
        copy_axis_block(g.data<double>().data(), dx.data<double>().data(), gsp, 0, isp, start,
                        gsp.extent);
    }
    return dx;
}

Tensor broadcast_to(const Tensor& g, const Shape& input_shape) {
    Tensor dx = Tensor::zeros(input_shape, g.dtype());
    const int nd = g.ndim();
    const int64_t n = g.numel();
    // Walk upstream in flat order; accumulation order per input element is fixed.
    for (int64_t flat = 0; flat < n; ++flat) {
        int64_t rem = flat, in_flat = 0, stride = 1;
        for (int i = nd - 1; i >= 0; --i) {
            const int64_t extent = g.dim(i);
            const int64_t idx = rem % extent;
            rem /= extent;
            if (input_shape[static_cast<size_t>(i)] != 1) in_flat += idx * stride;
            stride *= input_shape[static_cast<size_t>(i)];
        }
        dx.set(in_flat, dx.get(in_flat) + g.get(flat));
    }
    return dx;
}

Tensor softmax_lastdim(const Tensor& g, const Tensor& y) {
    const int64_t width = y.dim(-1);
    const int64_t rows = y.numel() / width;
    Tensor dx = Tensor::zeros(y.shape(), y.dtype());
    if (y.dtype() == DType::F32) {
        kernels::softmax_grad_rows(y.data<float>().data(), g.data<float>().data(),
                                   dx.data<float>().data(), rows, width);
    } else {
        kernels::softmax_grad_rows(y.data<double>().data(), g.data<double>().data(),
                                   dx.data<double>().data(), rows, width);
    }
    return dx;
}

std::tuple<Tensor, Tensor, Tensor> layernorm(const Tensor& g, const Tensor& x,
                                             const Tensor& gamma, double eps) {
    const int64_t width = x.dim(-1);
    const int64_t rows = x.numel() / width;
    Tensor xhat = Tensor::zeros(x.shape(), x.dtype());
    std::vector<double> inv_std(static_cast<size_t>(rows));
    Tensor dx = Tensor::zeros(x.shape(), x.dtype());
    Tensor dgamma = Tensor::zeros(gamma.shape(), x.dtype());
    Tensor dbeta = Tensor::zeros(gamma.shape(), x.dtype());
    if (x.dtype() == DType::F32) {
        kernels::layernorm_stats(x.data<float>().data(), xhat.data<float>().data(),
                                 inv_std.data(), rows, width, eps);
        kernels::layernorm_grad_input(xhat.data<float>().data(), inv_std.data(),
                                      gamma.data<float>().data(), g.data<float>().data(),
                                      dx.data<float>().data(), rows, width);
        kernels::column_sum_prod(g.data<float>().data(), xhat.data<float>().data(),
                                 dgamma.data<float>().data(), rows, width);
        kernels::column_sum(g.data<float>().data(), dbeta.data<float>().data(), rows, width);
    } else {
        kernels::layernorm_stats(x.data<double>().data(), xhat.data<double>().data(),
                                 inv_std.data(), rows, width, eps);
        kernels::layernorm_grad_input(xhat.data<double>().data(), inv_std.data(),
                                      gamma.data<double>().data(), g.data<double>().data(),
                                      dx.data<double>().data(), rows, width);
        kernels::column_sum_prod(g.data<double>().data(), xhat.data<double>().data(),
                                 dgamma.data<double>().data(), rows, width);
        kernels::column_sum(g.data<double>().data(), dbeta.data<double>().data(), rows, width);
    }
    return {std::move(dx), std::move(dgamma), std::move(dbeta)};
}

Tensor gelu(const Tensor& g, const Tensor& x) {
    Tensor dx = Tensor::zeros(x.shape(), x.dtype());
    if (x.dtype() == DType::F32) {
        kernels::gelu_grad(x.data<float>().data(), g.data<float>().data(),
                           dx.data<float>().data(), x.numel());
    } else {
        kernels::gelu_grad(x.data<double>().data(), g.data<double>().data(),
                           dx.data<double>().data(), x.numel());
    }
    return dx;
}

}  // namespace adjoint

Tape::Id Tape::push(Node node) {
    nodes_.push_back(std::move(node));
    return static_cast<Id>(nodes_.size() - 1);
}

const Tape::Node& Tape::at(Id id) const {
    if (id < 0 || static_cast<size_t>(id) >= nodes_.size()) {
        throw DimensionError("tape: invalid node id " + std::to_string(id));
    }
    return nodes_[static_cast<size_t>(id)];
}

Tape::Id Tape::leaf(Tensor value, bool requires_grad) {
    check_finite(value, "leaf");
    Node n;
    n.kind = OpKind::Leaf;
    n.value = std::move(value);
    n.needs_grad = requires_grad;
    return push(std::move(n));
}

Tape::Id Tape::matmul(Id a, Id b) {
    Node n;
    n.kind = OpKind::Matmul;
    n.inputs = {a, b};
    n.value = ops::matmul(at(a).value, at(b).value);
    n.needs_grad = at(a).needs_grad || at(b).needs_grad;
    return push(std::move(n));
}

Tape::Id Tape::add(Id a, Id b) {
    Node n;
    n.kind = OpKind::Add;
    n.inputs = {a, b};
    n.value = ops::add(at(a).value, at(b).value);
    n.needs_grad = at(a).needs_grad || at(b).needs_grad;
    return push(std::move(n));
}

Tape::Id Tape::scale(Id a, double s) {
    Node n;
    n.kind = OpKind::Scale;
    n.inputs = {a};
    n.scalar = s;
    n.value = ops::scale(at(a).value, s);
    n.needs_grad = at(a).needs_grad;
    return push(std::move(n));
}

Tape::Id Tape::permute(Id a, std::vector<int> perm) {
    Node n;
    n.kind = OpKind::Permute;
    n.inputs = {a};
    n.value = ops::permute(at(a).value, perm);
    n.perm = std::move(perm);
    n.needs_grad = at(a).needs_grad;
    return push(std::move(n));
}

Tape::Id Tape::transpose_last2(Id a) {
    const int nd = at(a).value.ndim();
    if (nd < 2) {
        throw DimensionError("transpose_last2: needs >= 2 dims, got " +
                             shape_str(at(a).value.shape()));
    }
    std::vector<int> perm(static_cast<size_t>(nd));
    std::iota(perm.begin(), perm.end(), 0);
    std::swap(perm[perm.size() - 1], perm[perm.size() - 2]);
    return permute(a, std::move(perm));
}

Tape::Id Tape::reshape(Id a, Shape shape) {
    Node n;
    n.kind = OpKind::Reshape;
    n.inputs = {a};
    n.value = ops::reshape(at(a).value, std::move(shape));
    n.needs_grad = at(a).needs_grad;
    return push(std::move(n));
}

Tape::Id Tape::slice(Id a, int axis, int64_t start, int64_t len) {
    Node n;
    n.kind = OpKind::Slice;
    n.inputs = {a};
    n.axis = normalize_axis(axis, at(a).value.ndim(), "slice");
    n.start = start;
    n.value = ops::slice(at(a).value, axis, start, len);
    n.needs_grad = at(a).needs_grad;
    return push(std::move(n));
}

Tape::Id Tape::concat(const std::vector<Id>& parts, int axis) {
    std::vector<const Tensor*> tensors;
    tensors.reserve(parts.size());
    bool needs = false;
    for (Id id : parts) {
        tensors.push_back(&at(id).value);
        needs = needs || at(id).needs_grad;
    }
    Node n;
    n.kind = OpKind::Concat;
    n.inputs = parts;
    n.value = ops::concat(tensors, axis);
    n.axis = normalize_axis(axis, n.value.ndim(), "concat");
    n.needs_grad = needs;
    return push(std::move(n));
}

Tape::Id Tape::broadcast_to(Id a, Shape target) {
    Node n;
    n.kind = OpKind::Broadcast;
    n.inputs = {a};
    n.value = ops::broadcast_to(at(a).value, target);
    n.needs_grad = at(a).needs_grad;
    return push(std::move(n));
}

Tape::Id Tape::softmax_lastdim(Id a) {
    Node n;
    n.kind = OpKind::Softmax;
    n.inputs = {a};
    n.value = ops::softmax_lastdim(at(a).value);
    n.needs_grad = at(a).needs_grad;
    return push(std::move(n));
}

Tape::Id Tape::layernorm(Id x, Id gamma, Id beta, double eps) {
    Node n;
    n.kind = OpKind::LayerNorm;
    n.inputs = {x, gamma, beta};
    n.scalar = eps;
    n.value = ops::layernorm(at(x).value, at(gamma).value, at(beta).value, eps);
    n.needs_grad = at(x).needs_grad || at(gamma).needs_grad || at(beta).needs_grad;
    return push(std::move(n));
}

Tape::Id Tape::gelu(Id a) {
    Node n;
    n.kind = OpKind::Gelu;
    n.inputs = {a};
    n.value = ops::gelu(at(a).value);
    n.needs_grad = at(a).needs_grad;
    return push(std::move(n));
}

const Tensor& Tape::value(Id id) const { return at(id).value; }

bool Tape::requires_grad(Id id) const { return at(id).needs_grad; }

void Tape::accumulate_grad(Id id, Tensor g) {
    Node& n = nodes_[static_cast<size_t>(id)];
    if (!n.needs_grad) return;
    check_finite(g, "backward");
    if (n.grad.has_value()) {
        n.grad = ops::add(*n.grad, g);
    } else {
        n.grad = std::move(g);
    }
}

void Tape::backward(Id output, const Tensor& upstream) {
    const Node& out = at(output);
    if (upstream.shape() != out.value.shape()) {
        throw DimensionError("backward: upstream shape " + shape_str(upstream.shape()) +
                             " does not match output " + shape_str(out.value.shape()));
    }
    check_same_dtype(upstream, out.value, "backward");
    accumulate_grad(output, upstream);
    for (Id id = output; id >= 0; --id) {
        Node& n = nodes_[static_cast<size_t>(id)];
        if (!n.needs_grad || !n.grad.has_value() || n.kind == OpKind::Leaf) continue;
        const Tensor& g = *n.grad;
        switch (n.kind) {
            case OpKind::Matmul: {
                auto [da, db] = adjoint::matmul(g, at(n.inputs[0]).value, at(n.inputs[1]).value);
                accumulate_grad(n.inputs[0], std::move(da));
                accumulate_grad(n.inputs[1], std::move(db));
                break;
            }
            case OpKind::Add: {
                auto [da, db] = adjoint::add(g, at(n.inputs[0]).value.shape(),
                                             at(n.inputs[1]).value.shape());
                accumulate_grad(n.inputs[0], std::move(da));
                accumulate_grad(n.inputs[1], std::move(db));
                break;
            }
            case OpKind::Scale:
                accumulate_grad(n.inputs[0], adjoint::scale(g, n.scalar));
                break;
            case OpKind::Permute:
                accumulate_grad(n.inputs[0], adjoint::permute(g, n.perm));
                break;
            case OpKind::Reshape:
                accumulate_grad(n.inputs[0], adjoint::reshape(g, at(n.inputs[0]).value.shape()));
                break;
            case OpKind::Slice:
                accumulate_grad(n.inputs[0], adjoint::slice(g, at(n.inputs[0]).value.shape(),
                                                            n.axis, n.start));
                break;
            case OpKind::Concat: {
                int64_t offset = 0;
                for (Id in : n.inputs) {
                    const int64_t extent = at(in).value.dim(n.axis);
                    accumulate_grad(in, ops::slice(g, n.axis, offset, extent));
                    offset += extent;
                }
                break;
            }
            case OpKind::Broadcast:
                accumulate_grad(n.inputs[0],
                                adjoint::broadcast_to(g, at(n.inputs[0]).value.shape()));
                break;
            case OpKind::Softmax:
                accumulate_grad(n.inputs[0], adjoint::softmax_lastdim(g, n.value));
                break;
            case OpKind::LayerNorm: {
                auto [dx, dgamma, dbeta] =
                    adjoint::layernorm(g, at(n.inputs[0]).value, at(n.inputs[1]).value, n.scalar);
                accumulate_grad(n.inputs[0], std::move(dx));
                accumulate_grad(n.inputs[1], std::move(dgamma));
                accumulate_grad(n.inputs[2], std::move(dbeta));
                break;
            }
            case OpKind::Gelu:
                accumulate_grad(n.inputs[0], adjoint::gelu(g, at(n.inputs[0]).value));
                break;
            case OpKind::Leaf:
                break;
        }
    }
}

bool Tape::has_grad(Id id) const { return at(id).grad.has_value(); }

const Tensor& Tape::grad(Id id) const {
    const Node& n = at(id);
    if (!n.grad.has_value()) {
        throw DimensionError("tape: node " + std::to_string(id) + " has no gradient");
    }
    return *n.grad;
}

GradPair Tape::value_and_grad(Id id) const {
    const Node& n = at(id);
    GradPair p;
    p.value = n.value;
    p.grad = n.grad.has_value() ? *n.grad : Tensor::zeros(n.value.shape(), n.value.dtype());
    return p;
}

void Tape::zero_grads() {
    for (Node& n : nodes_) n.grad.reset();
}

Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& x,
                        double step) {
    if (step <= 0.0) throw ConfigError("finite_diff_grad: step must be positive");
    Tensor g = Tensor::zeros(x.shape(), x.dtype());
    Tensor probe = x;
    const int64_t n = x.numel();
    for (int64_t i = 0; i < n; ++i) {
        const double orig = probe.get(i);
        probe.set(i, orig + step);
        const double fp = f(probe);
        probe.set(i, orig - step);
        const double fm = f(probe);
        probe.set(i, orig);
        g.set(i, (fp - fm) / (2.0 * step));
    }
    return g;
}

double max_rel_error(const Tensor& a, const Tensor& b) {
    const double denom = std::max({1e-6, a.max_abs(), b.max_abs()});
    return a.max_abs_diff(b) / denom;
}

}  // namespace gqkva
