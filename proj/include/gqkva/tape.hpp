#pragma once

#include <functional>
#include <optional>
#include <vector>

#include "gqkva/tensor.hpp"

namespace gqkva {

// Pure forward operations. Every output is checked finite.
namespace ops {

// Batched matrix product [.., m, k] x [.., k, n] -> [.., m, n]. Leading
// extents must match, or one side may carry none and is broadcast. Each
// output element accumulates over k in fixed left-to-right order.
Tensor matmul(const Tensor& a, const Tensor& b);

// Elementwise add; b may instead be a trailing-suffix shape of a, in which
// case it is added to every leading slice.
Tensor add(const Tensor& a, const Tensor& b);

Tensor scale(const Tensor& a, double s);
Tensor transpose_last2(const Tensor& a);
Tensor permute(const Tensor& a, const std::vector<int>& perm);
Tensor reshape(const Tensor& a, Shape shape);
Tensor slice(const Tensor& a, int axis, int64_t start, int64_t len);
Tensor concat(const std::vector<const Tensor*>& parts, int axis);
Tensor broadcast_to(const Tensor& a, const Shape& target);
Tensor softmax_lastdim(const Tensor& a);
Tensor layernorm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps);
Tensor gelu(const Tensor& a);

// Sums t over its extra leading extents so the result has `target` shape
// (target must be a trailing suffix of t.shape).
Tensor sum_leading_to(const Tensor& t, const Shape& target);

}  // namespace ops

// Explicit vector-Jacobian products, one per op. The tape composes these;
// tests may call them directly.
namespace adjoint {

std::pair<Tensor, Tensor> matmul(const Tensor& g, const Tensor& a, const Tensor& b);
std::pair<Tensor, Tensor> add(const Tensor& g, const Shape& a_shape, const Shape& b_shape);
Tensor scale(const Tensor& g, double s);
Tensor permute(const Tensor& g, const std::vector<int>& perm);
Tensor reshape(const Tensor& g, const Shape& input_shape);
Tensor slice(const Tensor& g, const Shape& input_shape, int axis, int64_t start);
Tensor broadcast_to(const Tensor& g, const Shape& input_shape);
Tensor softmax_lastdim(const Tensor& g, const Tensor& y);
std::tuple<Tensor, Tensor, Tensor> layernorm(const Tensor& g, const Tensor& x,
                                             const Tensor& gamma, double eps);
Tensor gelu(const Tensor& g, const Tensor& x);

}  // namespace adjoint

// Recorded forward graph. Build once per forward pass, call backward() from
// an output node, then read grads off the leaves.
class Tape {
public:
    using Id = int32_t;
    static constexpr Id kNone = -1;

    Id leaf(Tensor value, bool requires_grad = false);

    Id matmul(Id a, Id b);
    Id add(Id a, Id b);
    Id scale(Id a, double s);
    Id transpose_last2(Id a);
    Id permute(Id a, std::vector<int> perm);
    Id reshape(Id a, Shape shape);
    Id slice(Id a, int axis, int64_t start, int64_t len);
    Id concat(const std::vector<Id>& parts, int axis);
    Id broadcast_to(Id a, Shape target);
    Id softmax_lastdim(Id a);
    Id layernorm(Id x, Id gamma, Id beta, double eps);
    Id gelu(Id a);

    const Tensor& value(Id id) const;
    bool requires_grad(Id id) const;

    // Seeds node `output` with `upstream` and accumulates vector-Jacobian
    // products down to the leaves.
    void backward(Id output, const Tensor& upstream);

    bool has_grad(Id id) const;
    const Tensor& grad(Id id) const;
    GradPair value_and_grad(Id id) const;
    void zero_grads();
    size_t node_count() const { return nodes_.size(); }

private:
    enum class OpKind {
        Leaf,
        Matmul,
        Add,
        Scale,
        Permute,
        Reshape,
        Slice,
        Concat,
        Broadcast,
        Softmax,
        LayerNorm,
        Gelu,
    };

    struct Node {
        OpKind kind = OpKind::Leaf;
        std::vector<Id> inputs;
        Tensor value;
        std::optional<Tensor> grad;
        bool needs_grad = false;
        double scalar = 0.0;  // Scale factor / LayerNorm eps
        int axis = 0;
        int64_t start = 0;
        std::vector<int> perm;
    };

    Id push(Node node);
    const Node& at(Id id) const;
    void accumulate_grad(Id id, Tensor g);

    std::vector<Node> nodes_;
};

// Central-difference gradient of a scalar-valued function, (f(x+h e_i) -
// f(x-h e_i)) / 2h per element. Independent of the tape's adjoints.
Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& x,
                        double step);

// max |a-b| / max(1e-6, |a|_inf, |b|_inf).
double max_rel_error(const Tensor& a, const Tensor& b);

}  // namespace gqkva
