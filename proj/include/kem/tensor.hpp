#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace kem {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& shape);

namespace detail {
struct TensorNode;
}

// Dense row-major tensor of 64-bit reals with reverse-mode differentiation.
//
// A Tensor is a cheap handle onto a node of an eagerly recorded compute
// graph; the graph lives exactly as long as some handle reaches it and is
// rebuilt on every forward pass. Copies share the node, so tensors are
// value-semantic for cross-thread handoff while mutation stays explicit
// (mutable_values / zero_grad).
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor constant(Shape shape, double value, bool requires_grad = false);
    static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const;
    std::size_t size() const;
    std::size_t rank() const;
    // rank-2 helpers; throw on other ranks
    std::size_t rows() const;
    std::size_t cols() const;

    std::span<const double> values() const;
    // direct access to the stored values (leaf initialization, in-place
    // parameter updates, finite-difference probing)
    std::span<double> mutable_values();

    double at(std::size_t flat_index) const;
    double at(std::size_t row, std::size_t col) const;
    double item() const; // requires size() == 1

    bool requires_grad() const;
    bool has_grad() const;
    std::span<const double> grad() const;
    void zero_grad();

    // Reverse-mode sweep from a scalar root. Every tensor that requires a
    // gradient and fed this root receives grad = d(root)/d(tensor); fan-out
    // accumulates additively. Grad buffers of the traversed graph are reset
    // at the start of each call.
    void backward() const;

    // Value copy with no parents and no gradient requirement.
    Tensor detach() const;

    friend Tensor make_op(Shape shape, std::vector<double> data,
                          std::vector<Tensor> parents,
                          std::function<void(detail::TensorNode&)> backward_fn);

private:
    explicit Tensor(std::shared_ptr<detail::TensorNode> node) : node_(std::move(node)) {}
    std::shared_ptr<detail::TensorNode> node_;
};

// Records a new graph node. `backward_fn` reads the node's grad buffer and
// accumulates into the grad buffers of parents that require gradients; it is
// dropped (and parents are not retained) when no parent requires one.
Tensor make_op(Shape shape, std::vector<double> data, std::vector<Tensor> parents,
               std::function<void(detail::TensorNode&)> backward_fn);

// --- operations -----------------------------------------------------------
//
// All ops validate shapes (dimension errors name both shapes), propagate
// gradients, and keep a fixed summation order (row-major, left-to-right)
// so reference-oracle comparisons can be exact.

// c[i,j] = sum_k a[i,k] * b[k,j]; records p*q*r multiplies when a cost
// counter is active.
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& x);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b); // element-wise
Tensor scale(const Tensor& x, double c);
Tensor relu(const Tensor& x);

Tensor sum(const Tensor& x);  // -> scalar
Tensor mean(const Tensor& x); // -> scalar
// column means over rows: p x q -> 1 x q
Tensor mean_rows(const Tensor& x);

Tensor reshape(const Tensor& x, Shape shape);
// contiguous row slice of a rank-2 tensor
Tensor rows(const Tensor& x, std::size_t start, std::size_t count);
Tensor concat_rows(std::span<const Tensor> parts);

// mat: p x q, row: 1 x q; adds row to every row of mat
Tensor add_rowvec(const Tensor& mat, const Tensor& row);
// mat: (b*k) x q, block_rows: b x q; adds block_rows[i] to rows of block i
Tensor add_block_rows(const Tensor& mat, const Tensor& block_rows);

// Each row becomes exp(x - rowmax) / sum(exp(x - rowmax)); rows sum to 1
// within 1e-12. Records p*q softmax entries when instrumented.
Tensor softmax_rows(const Tensor& x);

// Softmax over the k largest entries of each row (ties broken toward the
// lowest column index); every other entry is exactly zero. Gradients flow
// only through the selected entries; the selection itself is treated as a
// constant index set. k >= row length reproduces softmax_rows bit-for-bit.
Tensor topk_softmax(const Tensor& x, std::size_t k);

// mean over batch rows of logsumexp(row) - row[label]
Tensor cross_entropy_logits(const Tensor& logits, std::span<const int> labels);
Tensor mse(const Tensor& pred, const Tensor& target);

// x: {B,H,W,C} -> {B*oh*ow, kh*kw*C} patch matrix (zero padding)
Tensor im2col(const Tensor& x, std::size_t kh, std::size_t kw, std::size_t stride,
              std::size_t pad);
// x: {B,H,W,C} -> {B,H/s,W/s,C}
Tensor avg_pool(const Tensor& x, std::size_t s);

// --- gradient oracle -------------------------------------------------------

struct GradCheckResult {
    bool pass = false;
    double max_rel_error = 0.0;
    std::size_t worst_index = 0;
};

// Central-difference check of d f / d x against the recorded gradient.
// Relative error uses max(|analytic|, |numeric|, 1e-8) as denominator.
// Non-finite evaluations of f raise a runtime error.
GradCheckResult finite_diff_check(const std::function<Tensor(const Tensor&)>& f,
                                  Tensor x, double step, double rtol);

} // namespace kem
