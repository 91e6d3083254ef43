#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "opmatch/rng.hpp"

namespace opmatch {

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

enum class PaddingMode { Zero, Replicate, Circular, Valid };

struct TensorError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

namespace detail {
struct Node {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;  // allocated lazily, same length as value
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;  // accumulates into parents' grad

    void ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
    }
};
}  // namespace detail

// Dense n-d double tensor participating in a reverse-mode tape. Values are
// immutable once a tensor has been consumed by an op; grad buffers are the
// only mutable state. Single-threaded by construction: reductions run in a
// fixed sequential order, so identical seeds give bit-identical results.
class Tensor {
public:
    Tensor() : node_(std::make_shared<detail::Node>()) {}

    static Tensor zeros(const Shape& s);
    static Tensor full(const Shape& s, double v);
    static Tensor scalar(double v) { return full({1}, v); }
    static Tensor from_data(const Shape& s, std::vector<double> data);
    static Tensor randn(const Shape& s, Rng& rng);
    // 2-d dirac: 1 at the geometric center of an odd-sized [h,w] kernel.
    static Tensor dirac(int64_t h, int64_t w);

    const Shape& shape() const { return node_->shape; }
    int64_t numel() const { return (int64_t)node_->value.size(); }
    int64_t dim(int i) const { return node_->shape.at(i); }
    int rank() const { return (int)node_->shape.size(); }

    const std::vector<double>& data() const { return node_->value; }
    std::vector<double>& mutable_data() { return node_->value; }
    double item() const;

    Tensor& set_requires_grad(bool b) {
        node_->requires_grad = b;
        return *this;
    }
    bool requires_grad() const { return node_->requires_grad; }
    bool is_leaf() const { return !node_->backward_fn; }

    const std::vector<double>& grad() const;
    void zero_grad() { node_->grad.assign(node_->value.size(), 0.0); }

    // Same values, off the tape. Never accumulates gradient.
    Tensor detach() const;
    // Deep copy of values (leaf).
    Tensor clone() const;

    std::shared_ptr<detail::Node> node() const { return node_; }
    explicit Tensor(std::shared_ptr<detail::Node> n) : node_(std::move(n)) {}

private:
    std::shared_ptr<detail::Node> node_;
};

// --- elementwise / arithmetic ---
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor add_scalar(const Tensor& a, double s);
Tensor scalar_mul(const Tensor& a, double s);
Tensor neg(const Tensor& a);
// a / b where b is a scalar (1-element) tensor; differentiable in both.
Tensor div_by_scalar_tensor(const Tensor& a, const Tensor& b);
// a * b with scalar (1-element) b; differentiable in both.
Tensor mul_by_scalar_tensor(const Tensor& a, const Tensor& b);
Tensor silu(const Tensor& a);
Tensor abs(const Tensor& a);
Tensor square(const Tensor& a);
Tensor sqrt_eps(const Tensor& a, double eps);  // sqrt(a + eps)
Tensor softplus(const Tensor& a);

// --- reductions (fixed sequential order) ---
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

// --- shape ---
Tensor reshape(const Tensor& a, const Shape& s);
Tensor concat_channels(const Tensor& a, const Tensor& b);  // [B,C,H,W] dim 1
Tensor slice_channels(const Tensor& a, int64_t start, int64_t count);
Tensor slice_dim0(const Tensor& a, int64_t start, int64_t count);
Tensor crop2d(const Tensor& a, int64_t top, int64_t left, int64_t h, int64_t w);
Tensor pad2d(const Tensor& a, int64_t top, int64_t bottom, int64_t left,
             int64_t right, PaddingMode mode);

// --- linear algebra / nn ---
// x:[B,N] w:[M,N] b:[M] -> [B,M]
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);
// Cross-correlation (no kernel flip), the deep-learning convention.
// x:[B,C,H,W] k:[O,C,kh,kw]; "same" output for Zero/Replicate/Circular
// (odd kh,kw required), shrunk output for Valid.
Tensor conv2d(const Tensor& x, const Tensor& k, PaddingMode mode);
// Depthwise: k:[C,kh,kw], channel c convolved with kernel c.
Tensor conv2d_depthwise(const Tensor& x, const Tensor& k, PaddingMode mode);
// b:[C] or [B,C], broadcast-added over spatial dims of x:[B,C,H,W].
Tensor bias_channels(const Tensor& x, const Tensor& b);
// Per-sample scalar scale: x:[B,...] s:[B].
Tensor scale_rows(const Tensor& x, const Tensor& s);
// Bilinear resize (align_corners) of [B,C,H,W] to [B,C,h2,w2].
Tensor interpolate_bilinear(const Tensor& x, int64_t h2, int64_t w2);
// Keep every s-th pixel starting from the top-left of each s x s block.
Tensor subsample2d(const Tensor& x, int64_t s);

// Runs reverse-mode accumulation from a scalar loss. Visits each node once
// (topological order); repeated calls without zero_grad accumulate.
void backward(const Tensor& loss);

// 180-degree rotation of the last 2 dims (tape-aware).
Tensor flip2d(const Tensor& k);

// Non-tape helpers (values only).
Tensor flip2d_values(const Tensor& k);  // 180-degree rotation of last 2 dims

}  // namespace opmatch
