#include "kem/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <unordered_set>
#include <utility>

#include "kem/cost.hpp"

namespace kem {

namespace detail {

struct TensorNode {
    Shape shape;
    std::vector<double> data;
    bool requires_grad = false;
    std::vector<double> grad;
    std::vector<std::shared_ptr<TensorNode>> parents;
    std::function<void(TensorNode&)> backward_fn;

    std::size_t size() const { return data.size(); }
};

} // namespace detail

using detail::TensorNode;

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << "(";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << " x ";
        os << shape[i];
    }
    os << ")";
    return os.str();
}

namespace {

std::size_t shape_product(const Shape& shape) {
    if (shape.empty()) throw std::invalid_argument("Tensor: shape must have at least one dimension");
    std::size_t p = 1;
    for (auto v : shape) {
        if (v == 0) throw std::invalid_argument("Tensor: zero dimension in shape " + shape_str(shape));
        p *= v;
    }
    return p;
}

std::shared_ptr<TensorNode> new_leaf(Shape shape, std::vector<double> data, bool requires_grad) {
    const std::size_t n = shape_product(shape);
    if (n != data.size())
        throw std::invalid_argument("Tensor: shape " + shape_str(shape) + " does not match data length " +
                                    std::to_string(data.size()));
    auto node = std::make_shared<TensorNode>();
    node->shape = std::move(shape);
    node->data = std::move(data);
    node->requires_grad = requires_grad;
    return node;
}

// grad buffer of parent i, or null when that parent takes no gradient
std::vector<double>* parent_grad(TensorNode& self, std::size_t i) {
    TensorNode* p = self.parents[i].get();
    return p->requires_grad ? &p->grad : nullptr;
}

const std::vector<double>& parent_data(const TensorNode& self, std::size_t i) {
    return self.parents[i]->data;
}

void require_rank2(const Tensor& t, const char* op) {
    if (t.rank() != 2)
        throw std::invalid_argument(std::string(op) + ": expected a rank-2 tensor, got shape " +
                                    shape_str(t.shape()));
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw std::invalid_argument(std::string(op) + ": shape mismatch: " + shape_str(a.shape()) +
                                    " vs " + shape_str(b.shape()));
}

// Softmax over the (ascending) index subset of one row; untouched entries
// keep whatever `out` already holds. The max scan, the exponential sums and
// the divisions all run in ascending index order so a full-row subset is
// bit-identical to a dedicated full-row implementation.
void softmax_row_subset(const double* x, double* out, const std::uint32_t* idx, std::size_t n) {
    double mx = x[idx[0]];
    for (std::size_t i = 1; i < n; ++i) mx = std::max(mx, x[idx[i]]);
    double sum = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double e = std::exp(x[idx[i]] - mx);
        out[idx[i]] = e;
        sum += e;
    }
    for (std::size_t i = 0; i < n; ++i) out[idx[i]] /= sum;
}

} // namespace

// --- Tensor handle ----------------------------------------------------------

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    const std::size_t n = shape_product(shape);
    return Tensor(new_leaf(std::move(shape), std::vector<double>(n, 0.0), requires_grad));
}

Tensor Tensor::constant(Shape shape, double value, bool requires_grad) {
    const std::size_t n = shape_product(shape);
    return Tensor(new_leaf(std::move(shape), std::vector<double>(n, value), requires_grad));
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data, bool requires_grad) {
    return Tensor(new_leaf(std::move(shape), std::move(data), requires_grad));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
    return Tensor(new_leaf(Shape{1}, std::vector<double>{value}, requires_grad));
}

const Shape& Tensor::shape() const {
    if (!node_) throw std::logic_error("Tensor: undefined handle");
    return node_->shape;
}

std::size_t Tensor::size() const { return shape_product(shape()); }
std::size_t Tensor::rank() const { return shape().size(); }

std::size_t Tensor::rows() const {
    require_rank2(*this, "rows()");
    return shape()[0];
}

std::size_t Tensor::cols() const {
    require_rank2(*this, "cols()");
    return shape()[1];
}

std::span<const double> Tensor::values() const {
    if (!node_) throw std::logic_error("Tensor: undefined handle");
    return node_->data;
}

std::span<double> Tensor::mutable_values() {
    if (!node_) throw std::logic_error("Tensor: undefined handle");
    return node_->data;
}

double Tensor::at(std::size_t flat_index) const {
    const auto v = values();
    if (flat_index >= v.size()) throw std::out_of_range("Tensor::at: index out of range");
    return v[flat_index];
}

double Tensor::at(std::size_t row, std::size_t col) const {
    require_rank2(*this, "at(row, col)");
    const auto& s = shape();
    if (row >= s[0] || col >= s[1]) throw std::out_of_range("Tensor::at: index out of range");
    return node_->data[row * s[1] + col];
}

double Tensor::item() const {
    if (size() != 1)
        throw std::invalid_argument("Tensor::item: expected a scalar, got shape " + shape_str(shape()));
    return node_->data[0];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

bool Tensor::has_grad() const { return node_ && !node_->grad.empty(); }

std::span<const double> Tensor::grad() const {
    if (!has_grad()) throw std::logic_error("Tensor::grad: no gradient recorded");
    return node_->grad;
}

void Tensor::zero_grad() {
    if (!node_) throw std::logic_error("Tensor: undefined handle");
    node_->grad.assign(node_->data.size(), 0.0);
}

Tensor Tensor::detach() const {
    if (!node_) throw std::logic_error("Tensor: undefined handle");
    return Tensor(new_leaf(node_->shape, node_->data, false));
}

void Tensor::backward() const {
    if (!node_) throw std::logic_error("Tensor: undefined handle");
    if (node_->data.size() != 1)
        throw std::invalid_argument("backward: root must be a scalar, got shape " + shape_str(node_->shape));

    // Post-order over the requires-grad subgraph; each node exactly once.
    std::vector<TensorNode*> order;
    std::unordered_set<TensorNode*> visited;
    struct Frame {
        TensorNode* node;
        std::size_t next;
    };
    std::vector<Frame> stack;
    stack.push_back({node_.get(), 0});
    visited.insert(node_.get());
    while (!stack.empty()) {
        Frame& f = stack.back();
        if (f.next < f.node->parents.size()) {
            TensorNode* p = f.node->parents[f.next++].get();
            if (p->requires_grad && visited.insert(p).second) stack.push_back({p, 0});
        } else {
            order.push_back(f.node);
            stack.pop_back();
        }
    }

    for (TensorNode* n : order) n->grad.assign(n->data.size(), 0.0);
    node_->grad[0] = 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        TensorNode* n = *it;
        if (n->backward_fn) n->backward_fn(*n);
    }
}

Tensor make_op(Shape shape, std::vector<double> data, std::vector<Tensor> parents,
               std::function<void(TensorNode&)> backward_fn) {
    auto node = new_leaf(std::move(shape), std::move(data), false);
    bool needs_grad = false;
    for (const auto& p : parents) needs_grad = needs_grad || (p.node_ && p.node_->requires_grad);
    node->requires_grad = needs_grad;
    if (needs_grad) {
        node->parents.reserve(parents.size());
        for (auto& p : parents) node->parents.push_back(p.node_);
        node->backward_fn = std::move(backward_fn);
    }
    return Tensor(std::move(node));
}

// --- operations -------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_rank2(a, "matmul");
    require_rank2(b, "matmul");
    const std::size_t p = a.shape()[0], q = a.shape()[1];
    const std::size_t q2 = b.shape()[0], r = b.shape()[1];
    if (q != q2)
        throw std::invalid_argument("matmul: inner dimensions mismatch: " + shape_str(a.shape()) +
                                    " * " + shape_str(b.shape()));

    const auto av = a.values();
    const auto bv = b.values();
    std::vector<double> out(p * r, 0.0);
    // i,k,j accumulation keeps each c[i,j] summed left-to-right over k while
    // walking b row-contiguously
    for (std::size_t i = 0; i < p; ++i)
        for (std::size_t k = 0; k < q; ++k) {
            const double aik = av[i * q + k];
            const double* brow = &bv[k * r];
            double* crow = &out[i * r];
            for (std::size_t j = 0; j < r; ++j) crow[j] += aik * brow[j];
        }

    if (auto* counter = CostCounter::active())
        counter->add_multiplies(static_cast<std::uint64_t>(p) * q * r);

    return make_op(Shape{p, r}, std::move(out), {a, b}, [p, q, r](TensorNode& self) {
        const auto& g = self.grad;
        const auto& av = parent_data(self, 0);
        const auto& bv = parent_data(self, 1);
        if (auto* ga = parent_grad(self, 0)) {
            for (std::size_t i = 0; i < p; ++i)
                for (std::size_t k = 0; k < q; ++k) {
                    double acc = 0.0;
                    const double* grow = &g[i * r];
                    const double* brow = &bv[k * r];
                    for (std::size_t j = 0; j < r; ++j) acc += grow[j] * brow[j];
                    (*ga)[i * q + k] += acc;
                }
        }
        if (auto* gb = parent_grad(self, 1)) {
            for (std::size_t i = 0; i < p; ++i)
                for (std::size_t k = 0; k < q; ++k) {
                    const double aik = av[i * q + k];
                    if (aik == 0.0) continue;
                    const double* grow = &g[i * r];
                    double* gbrow = &(*gb)[k * r];
                    for (std::size_t j = 0; j < r; ++j) gbrow[j] += aik * grow[j];
                }
        }
    });
}

Tensor transpose(const Tensor& x) {
    require_rank2(x, "transpose");
    const std::size_t p = x.shape()[0], q = x.shape()[1];
    const auto xv = x.values();
    std::vector<double> out(p * q);
    for (std::size_t i = 0; i < p; ++i)
        for (std::size_t j = 0; j < q; ++j) out[j * p + i] = xv[i * q + j];
    return make_op(Shape{q, p}, std::move(out), {x}, [p, q](TensorNode& self) {
        if (auto* gx = parent_grad(self, 0)) {
            const auto& g = self.grad;
            for (std::size_t i = 0; i < p; ++i)
                for (std::size_t j = 0; j < q; ++j) (*gx)[i * q + j] += g[j * p + i];
        }
    });
}

Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "add");
    const auto av = a.values();
    const auto bv = b.values();
    std::vector<double> out(av.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
    return make_op(a.shape(), std::move(out), {a, b}, [](TensorNode& self) {
        for (std::size_t p = 0; p < 2; ++p)
            if (auto* g = parent_grad(self, p))
                for (std::size_t i = 0; i < self.grad.size(); ++i) (*g)[i] += self.grad[i];
    });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "sub");
    const auto av = a.values();
    const auto bv = b.values();
    std::vector<double> out(av.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
    return make_op(a.shape(), std::move(out), {a, b}, [](TensorNode& self) {
        if (auto* ga = parent_grad(self, 0))
            for (std::size_t i = 0; i < self.grad.size(); ++i) (*ga)[i] += self.grad[i];
        if (auto* gb = parent_grad(self, 1))
            for (std::size_t i = 0; i < self.grad.size(); ++i) (*gb)[i] -= self.grad[i];
    });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "mul");
    const auto av = a.values();
    const auto bv = b.values();
    std::vector<double> out(av.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
    return make_op(a.shape(), std::move(out), {a, b}, [](TensorNode& self) {
        const auto& av = parent_data(self, 0);
        const auto& bv = parent_data(self, 1);
        if (auto* ga = parent_grad(self, 0))
            for (std::size_t i = 0; i < self.grad.size(); ++i) (*ga)[i] += self.grad[i] * bv[i];
        if (auto* gb = parent_grad(self, 1))
            for (std::size_t i = 0; i < self.grad.size(); ++i) (*gb)[i] += self.grad[i] * av[i];
    });
}

Tensor scale(const Tensor& x, double c) {
    const auto xv = x.values();
    std::vector<double> out(xv.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = c * xv[i];
    return make_op(x.shape(), std::move(out), {x}, [c](TensorNode& self) {
        if (auto* gx = parent_grad(self, 0))
            for (std::size_t i = 0; i < self.grad.size(); ++i) (*gx)[i] += c * self.grad[i];
    });
}

Tensor relu(const Tensor& x) {
    const auto xv = x.values();
    std::vector<double> out(xv.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] > 0.0 ? xv[i] : 0.0;
    return make_op(x.shape(), std::move(out), {x}, [](TensorNode& self) {
        if (auto* gx = parent_grad(self, 0)) {
            const auto& xv = parent_data(self, 0);
            for (std::size_t i = 0; i < self.grad.size(); ++i)
                if (xv[i] > 0.0) (*gx)[i] += self.grad[i];
        }
    });
}

Tensor sum(const Tensor& x) {
    const auto xv = x.values();
    double acc = 0.0;
    for (const double v : xv) acc += v;
    return make_op(Shape{1}, {acc}, {x}, [](TensorNode& self) {
        if (auto* gx = parent_grad(self, 0)) {
            const double g = self.grad[0];
            for (auto& v : *gx) v += g;
        }
    });
}

Tensor mean(const Tensor& x) {
    const auto xv = x.values();
    double acc = 0.0;
    for (const double v : xv) acc += v;
    const double n = static_cast<double>(xv.size());
    return make_op(Shape{1}, {acc / n}, {x}, [n](TensorNode& self) {
        if (auto* gx = parent_grad(self, 0)) {
            const double g = self.grad[0] / n;
            for (auto& v : *gx) v += g;
        }
    });
}

Tensor mean_rows(const Tensor& x) {
    require_rank2(x, "mean_rows");
    const std::size_t p = x.shape()[0], q = x.shape()[1];
    const auto xv = x.values();
    std::vector<double> out(q, 0.0);
    for (std::size_t i = 0; i < p; ++i)
        for (std::size_t j = 0; j < q; ++j) out[j] += xv[i * q + j];
    for (auto& v : out) v /= static_cast<double>(p);
    return make_op(Shape{1, q}, std::move(out), {x}, [p, q](TensorNode& self) {
        if (auto* gx = parent_grad(self, 0)) {
            for (std::size_t i = 0; i < p; ++i)
                for (std::size_t j = 0; j < q; ++j)
                    (*gx)[i * q + j] += self.grad[j] / static_cast<double>(p);
        }
    });
}

Tensor reshape(const Tensor& x, Shape shape) {
    const std::size_t n = shape_product(shape);
    if (n != x.size())
        throw std::invalid_argument("reshape: cannot view " + shape_str(x.shape()) + " as " +
                                    shape_str(shape));
    const auto xv = x.values();
    return make_op(std::move(shape), std::vector<double>(xv.begin(), xv.end()), {x},
                   [](TensorNode& self) {
                       if (auto* gx = parent_grad(self, 0))
                           for (std::size_t i = 0; i < self.grad.size(); ++i) (*gx)[i] += self.grad[i];
                   });
}

Tensor rows(const Tensor& x, std::size_t start, std::size_t count) {
    require_rank2(x, "rows");
    const std::size_t p = x.shape()[0], q = x.shape()[1];
    if (count == 0 || start + count > p)
        throw std::invalid_argument("rows: slice [" + std::to_string(start) + ", " +
                                    std::to_string(start + count) + ") out of range for shape " +
                                    shape_str(x.shape()));
    const auto xv = x.values();
    std::vector<double> out(xv.begin() + static_cast<std::ptrdiff_t>(start * q),
                            xv.begin() + static_cast<std::ptrdiff_t>((start + count) * q));
    return make_op(Shape{count, q}, std::move(out), {x}, [start, q](TensorNode& self) {
        if (auto* gx = parent_grad(self, 0))
            for (std::size_t i = 0; i < self.grad.size(); ++i) (*gx)[start * q + i] += self.grad[i];
    });
}

Tensor concat_rows(std::span<const Tensor> parts) {
    if (parts.empty()) throw std::invalid_argument("concat_rows: no tensors given");
    const std::size_t q = parts[0].cols();
    std::size_t total = 0;
    for (const auto& t : parts) {
        require_rank2(t, "concat_rows");
        if (t.cols() != q)
            throw std::invalid_argument("concat_rows: column mismatch: " + shape_str(parts[0].shape()) +
                                        " vs " + shape_str(t.shape()));
        total += t.rows();
    }
    std::vector<double> out;
    out.reserve(total * q);
    std::vector<std::size_t> sizes;
    for (const auto& t : parts) {
        const auto v = t.values();
        out.insert(out.end(), v.begin(), v.end());
        sizes.push_back(v.size());
    }
    return make_op(Shape{total, q}, std::move(out), {parts.begin(), parts.end()},
                   [sizes](TensorNode& self) {
                       std::size_t offset = 0;
                       for (std::size_t p = 0; p < sizes.size(); ++p) {
                           if (auto* g = parent_grad(self, p))
                               for (std::size_t i = 0; i < sizes[p]; ++i) (*g)[i] += self.grad[offset + i];
                           offset += sizes[p];
                       }
                   });
}

Tensor add_rowvec(const Tensor& mat, const Tensor& row) {
    require_rank2(mat, "add_rowvec");
    require_rank2(row, "add_rowvec");
    const std::size_t p = mat.shape()[0], q = mat.shape()[1];
    if (row.shape()[0] != 1 || row.shape()[1] != q)
        throw std::invalid_argument("add_rowvec: expected a 1 x " + std::to_string(q) + " row, got " +
                                    shape_str(row.shape()));
    const auto mv = mat.values();
    const auto rv = row.values();
    std::vector<double> out(p * q);
    for (std::size_t i = 0; i < p; ++i)
        for (std::size_t j = 0; j < q; ++j) out[i * q + j] = mv[i * q + j] + rv[j];
    return make_op(Shape{p, q}, std::move(out), {mat, row}, [p, q](TensorNode& self) {
        if (auto* gm = parent_grad(self, 0))
            for (std::size_t i = 0; i < self.grad.size(); ++i) (*gm)[i] += self.grad[i];
        if (auto* gr = parent_grad(self, 1))
            for (std::size_t i = 0; i < p; ++i)
                for (std::size_t j = 0; j < q; ++j) (*gr)[j] += self.grad[i * q + j];
    });
}

Tensor add_block_rows(const Tensor& mat, const Tensor& block_rows) {
    require_rank2(mat, "add_block_rows");
    require_rank2(block_rows, "add_block_rows");
    const std::size_t p = mat.shape()[0], q = mat.shape()[1];
    const std::size_t b = block_rows.shape()[0];
    if (block_rows.shape()[1] != q || b == 0 || p % b != 0)
        throw std::invalid_argument("add_block_rows: incompatible shapes " + shape_str(mat.shape()) +
                                    " and " + shape_str(block_rows.shape()));
    const std::size_t rows_per_block = p / b;
    const auto mv = mat.values();
    const auto rv = block_rows.values();
    std::vector<double> out(p * q);
    for (std::size_t i = 0; i < p; ++i) {
        const std::size_t blk = i / rows_per_block;
        for (std::size_t j = 0; j < q; ++j) out[i * q + j] = mv[i * q + j] + rv[blk * q + j];
    }
    return make_op(Shape{p, q}, std::move(out), {mat, block_rows},
                   [p, q, rows_per_block](TensorNode& self) {
                       if (auto* gm = parent_grad(self, 0))
                           for (std::size_t i = 0; i < self.grad.size(); ++i) (*gm)[i] += self.grad[i];
                       if (auto* gr = parent_grad(self, 1))
                           for (std::size_t i = 0; i < p; ++i) {
                               const std::size_t blk = i / rows_per_block;
                               for (std::size_t j = 0; j < q; ++j)
                                   (*gr)[blk * q + j] += self.grad[i * q + j];
                           }
                   });
}

Tensor softmax_rows(const Tensor& x) {
    require_rank2(x, "softmax_rows");
    const std::size_t p = x.shape()[0], q = x.shape()[1];
    const auto xv = x.values();
    std::vector<double> out(p * q, 0.0);
    std::vector<std::uint32_t> all(q);
    for (std::size_t j = 0; j < q; ++j) all[j] = static_cast<std::uint32_t>(j);
    for (std::size_t i = 0; i < p; ++i) softmax_row_subset(&xv[i * q], &out[i * q], all.data(), q);

    if (auto* counter = CostCounter::active())
        counter->add_softmax_entries(static_cast<std::uint64_t>(p) * q);

    return make_op(Shape{p, q}, std::move(out), {x}, [p, q](TensorNode& self) {
        if (auto* gx = parent_grad(self, 0)) {
            for (std::size_t i = 0; i < p; ++i) {
                const double* s = &self.data[i * q];
                const double* g = &self.grad[i * q];
                double dot = 0.0;
                for (std::size_t j = 0; j < q; ++j) dot += g[j] * s[j];
                for (std::size_t j = 0; j < q; ++j) (*gx)[i * q + j] += s[j] * (g[j] - dot);
            }
        }
    });
}

Tensor topk_softmax(const Tensor& x, std::size_t k) {
    require_rank2(x, "topk_softmax");
    if (k < 1) throw std::invalid_argument("topk_softmax: k must be >= 1");
    const std::size_t p = x.shape()[0], q = x.shape()[1];
    const auto xv = x.values();
    std::vector<double> out(p * q, 0.0);
    const std::size_t take = std::min(k, q);

    // per-row selected index sets, ascending; kept for the backward pass
    auto selections = std::make_shared<std::vector<std::vector<std::uint32_t>>>(p);
    std::vector<std::uint32_t> idx(q);
    for (std::size_t i = 0; i < p; ++i) {
        const double* row = &xv[i * q];
        for (std::size_t j = 0; j < q; ++j) idx[j] = static_cast<std::uint32_t>(j);
        // stable sort by value descending keeps the lowest index first on ties
        std::stable_sort(idx.begin(), idx.end(),
                         [row](std::uint32_t a, std::uint32_t b) { return row[a] > row[b]; });
        std::vector<std::uint32_t> sel(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(take));
        std::sort(sel.begin(), sel.end());
        softmax_row_subset(row, &out[i * q], sel.data(), sel.size());
        (*selections)[i] = std::move(sel);
    }

    if (auto* counter = CostCounter::active())
        counter->add_softmax_entries(static_cast<std::uint64_t>(p) * q);

    return make_op(Shape{p, q}, std::move(out), {x}, [p, q, selections](TensorNode& self) {
        if (auto* gx = parent_grad(self, 0)) {
            for (std::size_t i = 0; i < p; ++i) {
                const double* s = &self.data[i * q];
                const double* g = &self.grad[i * q];
                double dot = 0.0;
                for (const std::uint32_t j : (*selections)[i]) dot += g[j] * s[j];
                for (const std::uint32_t j : (*selections)[i]) (*gx)[i * q + j] += s[j] * (g[j] - dot);
            }
        }
    });
}

Tensor cross_entropy_logits(const Tensor& logits, std::span<const int> labels) {
    require_rank2(logits, "cross_entropy_logits");
    const std::size_t b = logits.shape()[0], c = logits.shape()[1];
    if (labels.size() != b)
        throw std::invalid_argument("cross_entropy_logits: " + std::to_string(labels.size()) +
                                    " labels for " + std::to_string(b) + " rows");
    for (const int l : labels)
        if (l < 0 || static_cast<std::size_t>(l) >= c)
            throw std::invalid_argument("cross_entropy_logits: label " + std::to_string(l) +
                                        " out of range for " + std::to_string(c) + " classes");

    const auto xv = logits.values();
    double total = 0.0;
    for (std::size_t i = 0; i < b; ++i) {
        const double* row = &xv[i * c];
        double mx = row[0];
        for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
        double sum = 0.0;
        for (std::size_t j = 0; j < c; ++j) sum += std::exp(row[j] - mx);
        total += mx + std::log(sum) - row[static_cast<std::size_t>(labels[i])];
    }
    const double loss = total / static_cast<double>(b);

    std::vector<int> label_copy(labels.begin(), labels.end());
    return make_op(Shape{1}, {loss}, {logits}, [b, c, label_copy](TensorNode& self) {
        if (auto* gx = parent_grad(self, 0)) {
            const auto& xv = parent_data(self, 0);
            const double g = self.grad[0] / static_cast<double>(b);
            for (std::size_t i = 0; i < b; ++i) {
                const double* row = &xv[i * c];
                double mx = row[0];
                for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
                double sum = 0.0;
                for (std::size_t j = 0; j < c; ++j) sum += std::exp(row[j] - mx);
                for (std::size_t j = 0; j < c; ++j) {
                    const double soft = std::exp(row[j] - mx) / sum;
                    const double onehot = (static_cast<std::size_t>(label_copy[i]) == j) ? 1.0 : 0.0;
                    (*gx)[i * c + j] += g * (soft - onehot);
                }
            }
        }
    });
}

Tensor mse(const Tensor& pred, const Tensor& target) {
    require_same_shape(pred, target, "mse");
    const auto pv = pred.values();
    const auto tv = target.values();
    const double n = static_cast<double>(pv.size());
    double acc = 0.0;
    for (std::size_t i = 0; i < pv.size(); ++i) {
        const double d = pv[i] - tv[i];
        acc += d * d;
    }
    return make_op(Shape{1}, {acc / n}, {pred, target}, [n](TensorNode& self) {
        const auto& pv = parent_data(self, 0);
        const auto& tv = parent_data(self, 1);
        const double g = self.grad[0] * 2.0 / n;
        if (auto* gp = parent_grad(self, 0))
            for (std::size_t i = 0; i < pv.size(); ++i) (*gp)[i] += g * (pv[i] - tv[i]);
        if (auto* gt = parent_grad(self, 1))
            for (std::size_t i = 0; i < pv.size(); ++i) (*gt)[i] -= g * (pv[i] - tv[i]);
    });
}

Tensor im2col(const Tensor& x, std::size_t kh, std::size_t kw, std::size_t stride, std::size_t pad) {
    if (x.rank() != 4)
        throw std::invalid_argument("im2col: expected {B,H,W,C}, got shape " + shape_str(x.shape()));
    if (kh == 0 || kw == 0 || stride == 0) throw std::invalid_argument("im2col: zero kernel or stride");
    const std::size_t B = x.shape()[0], H = x.shape()[1], W = x.shape()[2], C = x.shape()[3];
    if (H + 2 * pad < kh || W + 2 * pad < kw)
        throw std::invalid_argument("im2col: kernel larger than padded input " + shape_str(x.shape()));
    const std::size_t oh = (H + 2 * pad - kh) / stride + 1;
    const std::size_t ow = (W + 2 * pad - kw) / stride + 1;
    const std::size_t cols = kh * kw * C;

    const auto xv = x.values();
    std::vector<double> out(B * oh * ow * cols, 0.0);
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t oy = 0; oy < oh; ++oy)
            for (std::size_t ox = 0; ox < ow; ++ox) {
                double* dst = &out[((b * oh + oy) * ow + ox) * cols];
                for (std::size_t ky = 0; ky < kh; ++ky) {
                    const std::ptrdiff_t sy =
                        static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(pad);
                    for (std::size_t kx = 0; kx < kw; ++kx) {
                        const std::ptrdiff_t sx =
                            static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(pad);
                        double* cell = dst + (ky * kw + kx) * C;
                        if (sy < 0 || sx < 0 || sy >= static_cast<std::ptrdiff_t>(H) ||
                            sx >= static_cast<std::ptrdiff_t>(W))
                            continue; // zero padding
                        const double* src =
                            &xv[((b * H + static_cast<std::size_t>(sy)) * W + static_cast<std::size_t>(sx)) * C];
                        for (std::size_t ch = 0; ch < C; ++ch) cell[ch] = src[ch];
                    }
                }
            }

    return make_op(Shape{B * oh * ow, cols}, std::move(out), {x},
                   [B, H, W, C, kh, kw, stride, pad, oh, ow, cols](TensorNode& self) {
                       if (auto* gx = parent_grad(self, 0)) {
                           const auto& g = self.grad;
                           for (std::size_t b = 0; b < B; ++b)
                               for (std::size_t oy = 0; oy < oh; ++oy)
                                   for (std::size_t ox = 0; ox < ow; ++ox) {
                                       const double* src = &g[((b * oh + oy) * ow + ox) * cols];
                                       for (std::size_t ky = 0; ky < kh; ++ky) {
                                           const std::ptrdiff_t sy = static_cast<std::ptrdiff_t>(oy * stride + ky) -
                                                                     static_cast<std::ptrdiff_t>(pad);
                                           for (std::size_t kx = 0; kx < kw; ++kx) {
                                               const std::ptrdiff_t sx =
                                                   static_cast<std::ptrdiff_t>(ox * stride + kx) -
                                                   static_cast<std::ptrdiff_t>(pad);
                                               if (sy < 0 || sx < 0 || sy >= static_cast<std::ptrdiff_t>(H) ||
                                                   sx >= static_cast<std::ptrdiff_t>(W))
                                                   continue;
                                               const double* cell = src + (ky * kw + kx) * C;
                                               double* dst = &(*gx)[((b * H + static_cast<std::size_t>(sy)) * W +
                                                                     static_cast<std::size_t>(sx)) *
                                                                    C];
                                               for (std::size_t ch = 0; ch < C; ++ch) dst[ch] += cell[ch];
                                           }
                                       }
                                   }
                       }
                   });
}

Tensor avg_pool(const Tensor& x, std::size_t s) {
    if (x.rank() != 4)
        throw std::invalid_argument("avg_pool: expected {B,H,W,C}, got shape " + shape_str(x.shape()));
    if (s == 0) throw std::invalid_argument("avg_pool: zero window");
    const std::size_t B = x.shape()[0], H = x.shape()[1], W = x.shape()[2], C = x.shape()[3];
    if (H % s != 0 || W % s != 0)
        throw std::invalid_argument("avg_pool: window " + std::to_string(s) +
                                    " does not divide spatial dims of " + shape_str(x.shape()));
    const std::size_t oh = H / s, ow = W / s;
    const double inv = 1.0 / static_cast<double>(s * s);

    const auto xv = x.values();
    std::vector<double> out(B * oh * ow * C, 0.0);
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t oy = 0; oy < oh; ++oy)
            for (std::size_t ox = 0; ox < ow; ++ox)
                for (std::size_t ch = 0; ch < C; ++ch) {
                    double acc = 0.0;
                    for (std::size_t dy = 0; dy < s; ++dy)
                        for (std::size_t dx = 0; dx < s; ++dx)
                            acc += xv[((b * H + oy * s + dy) * W + ox * s + dx) * C + ch];
                    out[((b * oh + oy) * ow + ox) * C + ch] = acc * inv;
                }

    return make_op(Shape{B, oh, ow, C}, std::move(out), {x},
                   [B, H, W, C, s, oh, ow, inv](TensorNode& self) {
                       if (auto* gx = parent_grad(self, 0)) {
                           for (std::size_t b = 0; b < B; ++b)
                               for (std::size_t oy = 0; oy < oh; ++oy)
                                   for (std::size_t ox = 0; ox < ow; ++ox)
                                       for (std::size_t ch = 0; ch < C; ++ch) {
                                           const double g =
                                               self.grad[((b * oh + oy) * ow + ox) * C + ch] * inv;
                                           for (std::size_t dy = 0; dy < s; ++dy)
                                               for (std::size_t dx = 0; dx < s; ++dx)
                                                   (*gx)[((b * H + oy * s + dy) * W + ox * s + dx) * C + ch] += g;
                                       }
                       }
                   });
}

// --- gradient oracle ---------------------------------------------------------

GradCheckResult finite_diff_check(const std::function<Tensor(const Tensor&)>& f, Tensor x,
                                  double step, double rtol) {
    if (!x.requires_grad())
        throw std::invalid_argument("finite_diff_check: x must require a gradient");
    if (step <= 0.0 || rtol <= 0.0)
        throw std::invalid_argument("finite_diff_check: step and rtol must be positive");

    Tensor y = f(x);
    if (y.size() != 1)
        throw std::invalid_argument("finite_diff_check: f must return a scalar, got shape " +
                                    shape_str(y.shape()));
    if (!std::isfinite(y.item())) throw std::runtime_error("finite_diff_check: non-finite evaluation of f");
    y.backward();
    const auto g = x.grad();
    std::vector<double> analytic(g.begin(), g.end());

    auto vals = x.mutable_values();
    GradCheckResult result;
    for (std::size_t i = 0; i < vals.size(); ++i) {
        const double orig = vals[i];
        vals[i] = orig + step;
        const double f_plus = f(x).item();
        vals[i] = orig - step;
        const double f_minus = f(x).item();
        vals[i] = orig;
        if (!std::isfinite(f_plus) || !std::isfinite(f_minus))
            throw std::runtime_error("finite_diff_check: non-finite evaluation of f");
        const double numeric = (f_plus - f_minus) / (2.0 * step);
        const double denom = std::max({std::fabs(analytic[i]), std::fabs(numeric), 1e-8});
        const double rel = std::fabs(analytic[i] - numeric) / denom;
        if (rel > result.max_rel_error) {
            result.max_rel_error = rel;
            result.worst_index = i;
        }
    }
    result.pass = result.max_rel_error <= rtol;
    return result;
}

} // namespace kem
