#include "opmatch/tensor.hpp"

#include <cblas.h>

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_set>

namespace opmatch {

int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int64_t e : s) n *= e;
    return n;
}

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << "]";
    return os.str();
}

using detail::Node;

namespace {

[[noreturn]] void fail(const std::string& msg) { throw TensorError(msg); }

void check(bool ok, const std::string& msg) {
    if (!ok) fail(msg);
}

// Builds the result node. If no parent carries gradient the result is a
// plain leaf and the backward closure is dropped.
Tensor make_op(Shape shape, std::vector<double> value,
               const std::vector<Tensor>& parents,
               std::function<void(Node&)> bw) {
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->value = std::move(value);
    bool needs = false;
    for (const auto& p : parents) needs = needs || p.requires_grad();
    if (needs) {
        n->requires_grad = true;
        for (const auto& p : parents) n->parents.push_back(p.node());
        n->backward_fn = std::move(bw);
    }
    return Tensor(n);
}

void accum(const std::shared_ptr<Node>& p, const std::vector<double>& g) {
    if (!p->requires_grad) return;
    p->ensure_grad();
    for (size_t i = 0; i < g.size(); ++i) p->grad[i] += g[i];
}

double sigmoid(double x) {
    if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
    double e = std::exp(x);
    return e / (1.0 + e);
}

}  // namespace

Tensor Tensor::zeros(const Shape& s) { return full(s, 0.0); }

Tensor Tensor::full(const Shape& s, double v) {
    auto n = std::make_shared<Node>();
    n->shape = s;
    n->value.assign(shape_numel(s), v);
    return Tensor(n);
}

Tensor Tensor::from_data(const Shape& s, std::vector<double> data) {
    check((int64_t)data.size() == shape_numel(s),
          "from_data: " + shape_str(s) + " needs " +
              std::to_string(shape_numel(s)) + " values, got " +
              std::to_string(data.size()));
    auto n = std::make_shared<Node>();
    n->shape = s;
    n->value = std::move(data);
    return Tensor(n);
}

Tensor Tensor::randn(const Shape& s, Rng& rng) {
    std::vector<double> v((size_t)shape_numel(s));
    for (auto& x : v) x = rng.normal();
    return from_data(s, std::move(v));
}

Tensor Tensor::dirac(int64_t h, int64_t w) {
    Tensor t = zeros({h, w});
    t.mutable_data()[(size_t)((h / 2) * w + (w / 2))] = 1.0;
    return t;
}

double Tensor::item() const {
    check(numel() == 1, "item: tensor " + shape_str(shape()) + " is not scalar");
    return node_->value[0];
}

const std::vector<double>& Tensor::grad() const {
    node_->ensure_grad();
    return node_->grad;
}

Tensor Tensor::detach() const {
    auto n = std::make_shared<Node>();
    n->shape = node_->shape;
    n->value = node_->value;
    return Tensor(n);
}

Tensor Tensor::clone() const { return detach(); }

// --- elementwise ---

static void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    check(a.shape() == b.shape(), std::string(op) + ": shape mismatch " +
                                      shape_str(a.shape()) + " vs " +
                                      shape_str(b.shape()));
}

Tensor add(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "add");
    std::vector<double> v(a.data());
    for (size_t i = 0; i < v.size(); ++i) v[i] += b.data()[i];
    return make_op(a.shape(), std::move(v), {a, b}, [](Node& n) {
        accum(n.parents[0], n.grad);
        accum(n.parents[1], n.grad);
    });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "sub");
    std::vector<double> v(a.data());
    for (size_t i = 0; i < v.size(); ++i) v[i] -= b.data()[i];
    return make_op(a.shape(), std::move(v), {a, b}, [](Node& n) {
        accum(n.parents[0], n.grad);
        if (n.parents[1]->requires_grad) {
            n.parents[1]->ensure_grad();
            for (size_t i = 0; i < n.grad.size(); ++i)
                n.parents[1]->grad[i] -= n.grad[i];
        }
    });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "mul");
    std::vector<double> v(a.data());
    for (size_t i = 0; i < v.size(); ++i) v[i] *= b.data()[i];
    return make_op(a.shape(), std::move(v), {a, b}, [](Node& n) {
        const auto& av = n.parents[0]->value;
        const auto& bv = n.parents[1]->value;
        if (n.parents[0]->requires_grad) {
            n.parents[0]->ensure_grad();
            for (size_t i = 0; i < n.grad.size(); ++i)
                n.parents[0]->grad[i] += n.grad[i] * bv[i];
        }
        if (n.parents[1]->requires_grad) {
            n.parents[1]->ensure_grad();
            for (size_t i = 0; i < n.grad.size(); ++i)
                n.parents[1]->grad[i] += n.grad[i] * av[i];
        }
    });
}

Tensor add_scalar(const Tensor& a, double s) {
    std::vector<double> v(a.data());
    for (auto& x : v) x += s;
    return make_op(a.shape(), std::move(v), {a},
                   [](Node& n) { accum(n.parents[0], n.grad); });
}

Tensor scalar_mul(const Tensor& a, double s) {
    std::vector<double> v(a.data());
    for (auto& x : v) x *= s;
    return make_op(a.shape(), std::move(v), {a}, [s](Node& n) {
        if (!n.parents[0]->requires_grad) return;
        n.parents[0]->ensure_grad();
        for (size_t i = 0; i < n.grad.size(); ++i)
            n.parents[0]->grad[i] += n.grad[i] * s;
    });
}

Tensor neg(const Tensor& a) { return scalar_mul(a, -1.0); }

Tensor div_by_scalar_tensor(const Tensor& a, const Tensor& b) {
    check(b.numel() == 1, "div_by_scalar_tensor: divisor must be scalar, got " +
                              shape_str(b.shape()));
    double bv = b.data()[0];
    std::vector<double> v(a.data());
    for (auto& x : v) x /= bv;
    return make_op(a.shape(), std::move(v), {a, b}, [bv](Node& n) {
        const auto& av = n.parents[0]->value;
        if (n.parents[0]->requires_grad) {
            n.parents[0]->ensure_grad();
            for (size_t i = 0; i < n.grad.size(); ++i)
                n.parents[0]->grad[i] += n.grad[i] / bv;
        }
        if (n.parents[1]->requires_grad) {
            n.parents[1]->ensure_grad();
            double g = 0.0;
            for (size_t i = 0; i < n.grad.size(); ++i)
                g -= n.grad[i] * av[i] / (bv * bv);
            n.parents[1]->grad[0] += g;
        }
    });
}

Tensor mul_by_scalar_tensor(const Tensor& a, const Tensor& b) {
    check(b.numel() == 1, "mul_by_scalar_tensor: factor must be scalar, got " +
                              shape_str(b.shape()));
    double bv = b.data()[0];
    std::vector<double> v(a.data());
    for (auto& x : v) x *= bv;
    return make_op(a.shape(), std::move(v), {a, b}, [bv](Node& n) {
        const auto& av = n.parents[0]->value;
        if (n.parents[0]->requires_grad) {
            n.parents[0]->ensure_grad();
            for (size_t i = 0; i < n.grad.size(); ++i)
                n.parents[0]->grad[i] += n.grad[i] * bv;
        }
        if (n.parents[1]->requires_grad) {
            n.parents[1]->ensure_grad();
            double g = 0.0;
            for (size_t i = 0; i < n.grad.size(); ++i) g += n.grad[i] * av[i];
            n.parents[1]->grad[0] += g;
        }
    });
}

Tensor silu(const Tensor& a) {
    std::vector<double> v(a.data());
    for (auto& x : v) x = x * sigmoid(x);
    return make_op(a.shape(), std::move(v), {a}, [](Node& n) {
        if (!n.parents[0]->requires_grad) return;
        n.parents[0]->ensure_grad();
        const auto& av = n.parents[0]->value;
        for (size_t i = 0; i < n.grad.size(); ++i) {
            double s = sigmoid(av[i]);
            n.parents[0]->grad[i] += n.grad[i] * (s + av[i] * s * (1.0 - s));
        }
    });
}

Tensor abs(const Tensor& a) {
    std::vector<double> v(a.data());
    for (auto& x : v) x = std::fabs(x);
    return make_op(a.shape(), std::move(v), {a}, [](Node& n) {
        if (!n.parents[0]->requires_grad) return;
        n.parents[0]->ensure_grad();
        const auto& av = n.parents[0]->value;
        for (size_t i = 0; i < n.grad.size(); ++i) {
            double s = av[i] > 0 ? 1.0 : (av[i] < 0 ? -1.0 : 0.0);
            n.parents[0]->grad[i] += n.grad[i] * s;
        }
    });
}

Tensor square(const Tensor& a) {
    std::vector<double> v(a.data());
    for (auto& x : v) x = x * x;
    return make_op(a.shape(), std::move(v), {a}, [](Node& n) {
        if (!n.parents[0]->requires_grad) return;
        n.parents[0]->ensure_grad();
        const auto& av = n.parents[0]->value;
        for (size_t i = 0; i < n.grad.size(); ++i)
            n.parents[0]->grad[i] += n.grad[i] * 2.0 * av[i];
    });
}

Tensor sqrt_eps(const Tensor& a, double eps) {
    std::vector<double> v(a.data());
    for (auto& x : v) x = std::sqrt(x + eps);
    auto out = std::make_shared<std::vector<double>>(v);
    return make_op(a.shape(), std::move(v), {a}, [out](Node& n) {
        if (!n.parents[0]->requires_grad) return;
        n.parents[0]->ensure_grad();
        for (size_t i = 0; i < n.grad.size(); ++i)
            n.parents[0]->grad[i] += n.grad[i] * 0.5 / (*out)[i];
    });
}

Tensor softplus(const Tensor& a) {
    std::vector<double> v(a.data());
    for (auto& x : v) x = x > 30.0 ? x : std::log1p(std::exp(x));
    return make_op(a.shape(), std::move(v), {a}, [](Node& n) {
        if (!n.parents[0]->requires_grad) return;
        n.parents[0]->ensure_grad();
        const auto& av = n.parents[0]->value;
        for (size_t i = 0; i < n.grad.size(); ++i)
            n.parents[0]->grad[i] += n.grad[i] * sigmoid(av[i]);
    });
}

// --- reductions ---

Tensor sum(const Tensor& a) {
    double s = 0.0;
    for (double x : a.data()) s += x;  // fixed sequential order
    return make_op({1}, {s}, {a}, [](Node& n) {
        if (!n.parents[0]->requires_grad) return;
        n.parents[0]->ensure_grad();
        for (auto& g : n.parents[0]->grad) g += n.grad[0];
    });
}

Tensor mean(const Tensor& a) {
    return scalar_mul(sum(a), 1.0 / (double)a.numel());
}

// --- shape ---

Tensor reshape(const Tensor& a, const Shape& s) {
    check(shape_numel(s) == a.numel(), "reshape: " + shape_str(a.shape()) +
                                           " to " + shape_str(s) +
                                           " changes element count");
    std::vector<double> v(a.data());
    return make_op(s, std::move(v), {a},
                   [](Node& n) { accum(n.parents[0], n.grad); });
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
    check(a.rank() == 4 && b.rank() == 4, "concat_channels: need rank-4 inputs");
    check(a.dim(0) == b.dim(0) && a.dim(2) == b.dim(2) && a.dim(3) == b.dim(3),
          "concat_channels: mismatch " + shape_str(a.shape()) + " vs " +
              shape_str(b.shape()));
    int64_t B = a.dim(0), Ca = a.dim(1), Cb = b.dim(1), H = a.dim(2),
            W = a.dim(3);
    int64_t hw = H * W;
    std::vector<double> v((size_t)(B * (Ca + Cb) * hw));
    for (int64_t i = 0; i < B; ++i) {
        std::copy_n(a.data().begin() + i * Ca * hw, Ca * hw,
                    v.begin() + i * (Ca + Cb) * hw);
        std::copy_n(b.data().begin() + i * Cb * hw, Cb * hw,
                    v.begin() + i * (Ca + Cb) * hw + Ca * hw);
    }
    return make_op({B, Ca + Cb, H, W}, std::move(v), {a, b},
                   [B, Ca, Cb, hw](Node& n) {
                       for (int p = 0; p < 2; ++p) {
                           auto& par = n.parents[p];
                           if (!par->requires_grad) continue;
                           par->ensure_grad();
                           int64_t C = p == 0 ? Ca : Cb;
                           int64_t off = p == 0 ? 0 : Ca * hw;
                           for (int64_t i = 0; i < B; ++i)
                               for (int64_t j = 0; j < C * hw; ++j)
                                   par->grad[i * C * hw + j] +=
                                       n.grad[i * (Ca + Cb) * hw + off + j];
                       }
                   });
}

Tensor slice_channels(const Tensor& a, int64_t start, int64_t count) {
    check(a.rank() == 4, "slice_channels: need rank-4 input");
    int64_t B = a.dim(0), C = a.dim(1), H = a.dim(2), W = a.dim(3);
    check(start >= 0 && start + count <= C, "slice_channels: range out of bounds");
    int64_t hw = H * W;
    std::vector<double> v((size_t)(B * count * hw));
    for (int64_t i = 0; i < B; ++i)
        std::copy_n(a.data().begin() + (i * C + start) * hw, count * hw,
                    v.begin() + i * count * hw);
    return make_op({B, count, H, W}, std::move(v), {a},
                   [B, C, start, count, hw](Node& n) {
                       if (!n.parents[0]->requires_grad) return;
                       n.parents[0]->ensure_grad();
                       for (int64_t i = 0; i < B; ++i)
                           for (int64_t j = 0; j < count * hw; ++j)
                               n.parents[0]->grad[(i * C + start) * hw + j] +=
                                   n.grad[i * count * hw + j];
                   });
}

Tensor slice_dim0(const Tensor& a, int64_t start, int64_t count) {
    check(a.rank() >= 1 && start >= 0 && start + count <= a.dim(0),
          "slice_dim0: range out of bounds");
    int64_t stride = a.numel() / a.dim(0);
    Shape s = a.shape();
    s[0] = count;
    std::vector<double> v(a.data().begin() + start * stride,
                          a.data().begin() + (start + count) * stride);
    return make_op(s, std::move(v), {a}, [start, stride, count](Node& n) {
        if (!n.parents[0]->requires_grad) return;
        n.parents[0]->ensure_grad();
        for (int64_t j = 0; j < count * stride; ++j)
            n.parents[0]->grad[start * stride + j] += n.grad[j];
    });
}

Tensor crop2d(const Tensor& a, int64_t top, int64_t left, int64_t h, int64_t w) {
    check(a.rank() == 4, "crop2d: need rank-4 input");
    int64_t B = a.dim(0), C = a.dim(1), H = a.dim(2), W = a.dim(3);
    check(top >= 0 && left >= 0 && top + h <= H && left + w <= W,
          "crop2d: window out of range");
    std::vector<double> v((size_t)(B * C * h * w));
    for (int64_t bc = 0; bc < B * C; ++bc)
        for (int64_t y = 0; y < h; ++y)
            std::copy_n(a.data().begin() + bc * H * W + (top + y) * W + left, w,
                        v.begin() + bc * h * w + y * w);
    return make_op({B, C, h, w}, std::move(v), {a}, [=](Node& n) {
        if (!n.parents[0]->requires_grad) return;
        n.parents[0]->ensure_grad();
        for (int64_t bc = 0; bc < B * C; ++bc)
            for (int64_t y = 0; y < h; ++y)
                for (int64_t x = 0; x < w; ++x)
                    n.parents[0]->grad[bc * H * W + (top + y) * W + left + x] +=
                        n.grad[bc * h * w + y * w + x];
    });
}

namespace {

// Maps a padded index to the source index (or -1 for zero padding).
inline int64_t pad_src(int64_t i, int64_t n, PaddingMode mode) {
    if (i >= 0 && i < n) return i;
    switch (mode) {
        case PaddingMode::Zero:
            return -1;
        case PaddingMode::Replicate:
            return std::clamp<int64_t>(i, 0, n - 1);
        case PaddingMode::Circular:
            return ((i % n) + n) % n;
        default:
            fail("pad_src: invalid mode");
    }
}

}  // namespace

Tensor pad2d(const Tensor& a, int64_t top, int64_t bottom, int64_t left,
             int64_t right, PaddingMode mode) {
    check(a.rank() == 4, "pad2d: need rank-4 input");
    check(mode != PaddingMode::Valid, "pad2d: Valid is not a padding mode");
    int64_t B = a.dim(0), C = a.dim(1), H = a.dim(2), W = a.dim(3);
    int64_t H2 = H + top + bottom, W2 = W + left + right;
    std::vector<double> v((size_t)(B * C * H2 * W2), 0.0);
    for (int64_t bc = 0; bc < B * C; ++bc)
        for (int64_t y = 0; y < H2; ++y) {
            int64_t sy = pad_src(y - top, H, mode);
            if (sy < 0) continue;
            for (int64_t x = 0; x < W2; ++x) {
                int64_t sx = pad_src(x - left, W, mode);
                if (sx < 0) continue;
                v[bc * H2 * W2 + y * W2 + x] = a.data()[bc * H * W + sy * W + sx];
            }
        }
    return make_op({B, C, H2, W2}, std::move(v), {a}, [=](Node& n) {
        if (!n.parents[0]->requires_grad) return;
        n.parents[0]->ensure_grad();
        for (int64_t bc = 0; bc < B * C; ++bc)
            for (int64_t y = 0; y < H2; ++y) {
                int64_t sy = pad_src(y - top, H, mode);
                if (sy < 0) continue;
                for (int64_t x = 0; x < W2; ++x) {
                    int64_t sx = pad_src(x - left, W, mode);
                    if (sx < 0) continue;
                    n.parents[0]->grad[bc * H * W + sy * W + sx] +=
                        n.grad[bc * H2 * W2 + y * W2 + x];
                }
            }
    });
}

// --- linear ---

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
    check(x.rank() == 2,
          "linear: input must be rank-2, got " + shape_str(x.shape()));
    check(w.rank() == 2 && x.dim(1) == w.dim(1),
          "linear: weight " + shape_str(w.shape()) + " incompatible with input " +
              shape_str(x.shape()) + " (dim 1)");
    check(b.numel() == w.dim(0),
          "linear: bias length " + std::to_string(b.numel()) +
              " != output dim " + std::to_string(w.dim(0)));
    int64_t B = x.dim(0), N = x.dim(1), M = w.dim(0);
    std::vector<double> v((size_t)(B * M));
    for (int64_t i = 0; i < B; ++i)
        for (int64_t j = 0; j < M; ++j) v[i * M + j] = b.data()[j];
    cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasTrans, (int)B, (int)M, (int)N,
                1.0, x.data().data(), (int)N, w.data().data(), (int)N, 1.0,
                v.data(), (int)M);
    return make_op({B, M}, std::move(v), {x, w, b}, [B, N, M](Node& n) {
        const auto& xv = n.parents[0]->value;
        const auto& wv = n.parents[1]->value;
        if (n.parents[0]->requires_grad) {
            n.parents[0]->ensure_grad();
            cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, (int)B,
                        (int)N, (int)M, 1.0, n.grad.data(), (int)M, wv.data(),
                        (int)N, 1.0, n.parents[0]->grad.data(), (int)N);
        }
        if (n.parents[1]->requires_grad) {
            n.parents[1]->ensure_grad();
            cblas_dgemm(CblasRowMajor, CblasTrans, CblasNoTrans, (int)M, (int)N,
                        (int)B, 1.0, n.grad.data(), (int)M, xv.data(), (int)N,
                        1.0, n.parents[1]->grad.data(), (int)N);
        }
        if (n.parents[2]->requires_grad) {
            n.parents[2]->ensure_grad();
            for (int64_t i = 0; i < B; ++i)
                for (int64_t j = 0; j < M; ++j)
                    n.parents[2]->grad[j] += n.grad[i * M + j];
        }
    });
}

// --- convolution ---

namespace {

void im2col(const double* img, int64_t C, int64_t H, int64_t W, int64_t kh,
            int64_t kw, double* col) {
    int64_t OH = H - kh + 1, OW = W - kw + 1;
    double* dst = col;
    for (int64_t c = 0; c < C; ++c)
        for (int64_t i = 0; i < kh; ++i)
            for (int64_t j = 0; j < kw; ++j)
                for (int64_t y = 0; y < OH; ++y) {
                    const double* src = img + c * H * W + (y + i) * W + j;
                    std::copy_n(src, OW, dst);
                    dst += OW;
                }
}

void col2im_accum(const double* col, int64_t C, int64_t H, int64_t W,
                  int64_t kh, int64_t kw, double* img) {
    int64_t OH = H - kh + 1, OW = W - kw + 1;
    const double* src = col;
    for (int64_t c = 0; c < C; ++c)
        for (int64_t i = 0; i < kh; ++i)
            for (int64_t j = 0; j < kw; ++j)
                for (int64_t y = 0; y < OH; ++y) {
                    double* dst = img + c * H * W + (y + i) * W + j;
                    for (int64_t x = 0; x < OW; ++x) dst[x] += src[x];
                    src += OW;
                }
}

// Valid cross-correlation, x:[B,C,H,W] k:[O,C,kh,kw].
Tensor conv2d_valid(const Tensor& x, const Tensor& k) {
    int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    int64_t O = k.dim(0), kh = k.dim(2), kw = k.dim(3);
    check(k.dim(1) == C, "conv2d: kernel channel dim " +
                             std::to_string(k.dim(1)) + " != input channels " +
                             std::to_string(C));
    check(kh <= H && kw <= W, "conv2d: kernel " + shape_str(k.shape()) +
                                  " larger than input " + shape_str(x.shape()));
    int64_t OH = H - kh + 1, OW = W - kw + 1;
    int64_t K = C * kh * kw, P = OH * OW;
    std::vector<double> v((size_t)(B * O * P), 0.0);
    std::vector<double> col((size_t)(K * P));
    for (int64_t b = 0; b < B; ++b) {
        im2col(x.data().data() + b * C * H * W, C, H, W, kh, kw, col.data());
        cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, (int)O, (int)P,
                    (int)K, 1.0, k.data().data(), (int)K, col.data(), (int)P,
                    0.0, v.data() + b * O * P, (int)P);
    }
    return make_op({B, O, OH, OW}, std::move(v), {x, k},
                   [B, C, H, W, O, kh, kw, K, P](Node& n) {
        const auto& xv = n.parents[0]->value;
        const auto& kv = n.parents[1]->value;
        std::vector<double> col2((size_t)(K * P));
        bool gx = n.parents[0]->requires_grad, gk = n.parents[1]->requires_grad;
        if (gx) n.parents[0]->ensure_grad();
        if (gk) n.parents[1]->ensure_grad();
        for (int64_t b = 0; b < B; ++b) {
            const double* go = n.grad.data() + b * O * P;
            if (gk) {
                im2col(xv.data() + b * C * H * W, C, H, W, kh, kw, col2.data());
                cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasTrans, (int)O,
                            (int)K, (int)P, 1.0, go, (int)P, col2.data(),
                            (int)P, 1.0, n.parents[1]->grad.data(), (int)K);
            }
            if (gx) {
                cblas_dgemm(CblasRowMajor, CblasTrans, CblasNoTrans, (int)K,
                            (int)P, (int)O, 1.0, kv.data(), (int)K, go, (int)P,
                            0.0, col2.data(), (int)P);
                col2im_accum(col2.data(), C, H, W, kh, kw,
                             n.parents[0]->grad.data() + b * C * H * W);
            }
        }
    });
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& k, PaddingMode mode) {
    check(x.rank() == 4,
          "conv2d: input must be rank-4, got " + shape_str(x.shape()));
    check(k.rank() == 4,
          "conv2d: kernel must be rank-4, got " + shape_str(k.shape()));
    if (mode == PaddingMode::Valid) return conv2d_valid(x, k);
    int64_t kh = k.dim(2), kw = k.dim(3);
    check(kh % 2 == 1 && kw % 2 == 1,
          "conv2d: same padding needs odd kernel extents, got " +
              shape_str(k.shape()));
    return conv2d_valid(pad2d(x, kh / 2, kh / 2, kw / 2, kw / 2, mode), k);
}

Tensor conv2d_depthwise(const Tensor& x, const Tensor& k, PaddingMode mode) {
    check(x.rank() == 4 && k.rank() == 3,
          "conv2d_depthwise: need x rank-4 and k rank-3");
    int64_t C = x.dim(1), kh = k.dim(1), kw = k.dim(2);
    check(k.dim(0) == C, "conv2d_depthwise: kernel count " +
                             std::to_string(k.dim(0)) + " != channels " +
                             std::to_string(C));
    if (C == 1) return conv2d(x, reshape(k, {1, 1, kh, kw}), mode);
    Tensor out;
    for (int64_t c = 0; c < C; ++c) {
        Tensor xc = slice_channels(x, c, 1);
        Tensor kc = reshape(slice_dim0(k, c, 1), {1, 1, kh, kw});
        Tensor oc = conv2d(xc, kc, mode);
        out = c == 0 ? oc : concat_channels(out, oc);
    }
    return out;
}

Tensor bias_channels(const Tensor& x, const Tensor& b) {
    check(x.rank() == 4, "bias_channels: x must be rank-4");
    int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    bool per_sample = b.rank() == 2;
    if (per_sample)
        check(b.dim(0) == B && b.dim(1) == C,
              "bias_channels: bias " + shape_str(b.shape()) +
                  " incompatible with " + shape_str(x.shape()));
    else
        check(b.numel() == C, "bias_channels: bias length " +
                                  std::to_string(b.numel()) + " != channels " +
                                  std::to_string(C));
    int64_t hw = H * W;
    std::vector<double> v(x.data());
    for (int64_t i = 0; i < B; ++i)
        for (int64_t c = 0; c < C; ++c) {
            double bv = per_sample ? b.data()[i * C + c] : b.data()[c];
            double* p = v.data() + (i * C + c) * hw;
            for (int64_t j = 0; j < hw; ++j) p[j] += bv;
        }
    return make_op(x.shape(), std::move(v), {x, b},
                   [B, C, hw, per_sample](Node& n) {
                       accum(n.parents[0], n.grad);
                       if (!n.parents[1]->requires_grad) return;
                       n.parents[1]->ensure_grad();
                       for (int64_t i = 0; i < B; ++i)
                           for (int64_t c = 0; c < C; ++c) {
                               double g = 0.0;
                               const double* p = n.grad.data() + (i * C + c) * hw;
                               for (int64_t j = 0; j < hw; ++j) g += p[j];
                               n.parents[1]->grad[per_sample ? i * C + c : c] += g;
                           }
                   });
}

Tensor scale_rows(const Tensor& x, const Tensor& s) {
    check(x.rank() >= 1 && s.rank() == 1 && s.dim(0) == x.dim(0),
          "scale_rows: scale " + shape_str(s.shape()) + " incompatible with " +
              shape_str(x.shape()));
    int64_t B = x.dim(0), R = x.numel() / B;
    std::vector<double> v(x.data());
    for (int64_t i = 0; i < B; ++i)
        for (int64_t j = 0; j < R; ++j) v[i * R + j] *= s.data()[i];
    return make_op(x.shape(), std::move(v), {x, s}, [B, R](Node& n) {
        const auto& xv = n.parents[0]->value;
        const auto& sv = n.parents[1]->value;
        if (n.parents[0]->requires_grad) {
            n.parents[0]->ensure_grad();
            for (int64_t i = 0; i < B; ++i)
                for (int64_t j = 0; j < R; ++j)
                    n.parents[0]->grad[i * R + j] += n.grad[i * R + j] * sv[i];
        }
        if (n.parents[1]->requires_grad) {
            n.parents[1]->ensure_grad();
            for (int64_t i = 0; i < B; ++i) {
                double g = 0.0;
                for (int64_t j = 0; j < R; ++j)
                    g += n.grad[i * R + j] * xv[i * R + j];
                n.parents[1]->grad[i] += g;
            }
        }
    });
}

namespace {
inline void bilerp_index(int64_t o, double scale, int64_t n, int64_t& i0,
                         int64_t& i1, double& w1) {
    double p = o * scale;
    i0 = std::clamp<int64_t>((int64_t)std::floor(p), 0, n - 1);
    i1 = std::min<int64_t>(i0 + 1, n - 1);
    w1 = p - (double)i0;
}
}  // namespace

Tensor interpolate_bilinear(const Tensor& x, int64_t h2, int64_t w2) {
    check(x.rank() == 4, "interpolate_bilinear: need rank-4 input");
    int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    double sy = h2 > 1 ? (double)(H - 1) / (double)(h2 - 1) : 0.0;
    double sx = w2 > 1 ? (double)(W - 1) / (double)(w2 - 1) : 0.0;
    std::vector<double> v((size_t)(B * C * h2 * w2));
    for (int64_t bc = 0; bc < B * C; ++bc)
        for (int64_t y = 0; y < h2; ++y) {
            int64_t y0, y1;
            double wy;
            bilerp_index(y, sy, H, y0, y1, wy);
            for (int64_t xo = 0; xo < w2; ++xo) {
                int64_t x0, x1;
                double wx;
                bilerp_index(xo, sx, W, x0, x1, wx);
                const double* im = x.data().data() + bc * H * W;
                v[bc * h2 * w2 + y * w2 + xo] =
                    (1 - wy) *
                        ((1 - wx) * im[y0 * W + x0] + wx * im[y0 * W + x1]) +
                    wy * ((1 - wx) * im[y1 * W + x0] + wx * im[y1 * W + x1]);
            }
        }
    return make_op({B, C, h2, w2}, std::move(v), {x},
                   [B, C, H, W, h2, w2, sy, sx](Node& n) {
                       if (!n.parents[0]->requires_grad) return;
                       n.parents[0]->ensure_grad();
                       for (int64_t bc = 0; bc < B * C; ++bc)
                           for (int64_t y = 0; y < h2; ++y) {
                               int64_t y0, y1;
                               double wy;
                               bilerp_index(y, sy, H, y0, y1, wy);
                               for (int64_t xo = 0; xo < w2; ++xo) {
                                   int64_t x0, x1;
                                   double wx;
                                   bilerp_index(xo, sx, W, x0, x1, wx);
                                   double g = n.grad[bc * h2 * w2 + y * w2 + xo];
                                   double* gi =
                                       n.parents[0]->grad.data() + bc * H * W;
                                   gi[y0 * W + x0] += g * (1 - wy) * (1 - wx);
                                   gi[y0 * W + x1] += g * (1 - wy) * wx;
                                   gi[y1 * W + x0] += g * wy * (1 - wx);
                                   gi[y1 * W + x1] += g * wy * wx;
                               }
                           }
                   });
}

Tensor subsample2d(const Tensor& x, int64_t s) {
    check(x.rank() == 4, "subsample2d: need rank-4 input");
    int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    check(H % s == 0 && W % s == 0,
          "subsample2d: scale " + std::to_string(s) + " does not divide " +
              shape_str(x.shape()));
    int64_t H2 = H / s, W2 = W / s;
    std::vector<double> v((size_t)(B * C * H2 * W2));
    for (int64_t bc = 0; bc < B * C; ++bc)
        for (int64_t y = 0; y < H2; ++y)
            for (int64_t xo = 0; xo < W2; ++xo)
                v[bc * H2 * W2 + y * W2 + xo] =
                    x.data()[bc * H * W + y * s * W + xo * s];
    return make_op({B, C, H2, W2}, std::move(v), {x},
                   [B, C, H, W, H2, W2, s](Node& n) {
                       if (!n.parents[0]->requires_grad) return;
                       n.parents[0]->ensure_grad();
                       for (int64_t bc = 0; bc < B * C; ++bc)
                           for (int64_t y = 0; y < H2; ++y)
                               for (int64_t xo = 0; xo < W2; ++xo)
                                   n.parents[0]->grad[bc * H * W + y * s * W +
                                                      xo * s] +=
                                       n.grad[bc * H2 * W2 + y * W2 + xo];
                   });
}

// --- backward ---

void backward(const Tensor& loss) {
    check(loss.numel() == 1,
          "backward: loss must be scalar, got " + shape_str(loss.shape()));
    auto root = loss.node();
    if (!root->requires_grad) return;
    std::vector<Node*> topo;
    std::unordered_set<Node*> seen;
    // Iterative post-order DFS over the tape.
    std::vector<std::pair<Node*, size_t>> stack{{root.get(), 0}};
    seen.insert(root.get());
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            Node* p = node->parents[idx++].get();
            if (p->requires_grad && !seen.count(p)) {
                seen.insert(p);
                stack.push_back({p, 0});
            }
        } else {
            topo.push_back(node);
            stack.pop_back();
        }
    }
    root->ensure_grad();
    root->grad[0] += 1.0;
    for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
        Node* n = *it;
        if (n->backward_fn) {
            n->ensure_grad();
            n->backward_fn(*n);
        }
    }
}

Tensor flip2d(const Tensor& k) {
    check(k.rank() >= 2, "flip2d: need rank >= 2");
    int64_t W = k.dim(k.rank() - 1), H = k.dim(k.rank() - 2);
    int64_t outer = k.numel() / (H * W);
    std::vector<double> v((size_t)k.numel());
    for (int64_t o = 0; o < outer; ++o)
        for (int64_t y = 0; y < H; ++y)
            for (int64_t x = 0; x < W; ++x)
                v[o * H * W + y * W + x] =
                    k.data()[o * H * W + (H - 1 - y) * W + (W - 1 - x)];
    return make_op(k.shape(), std::move(v), {k}, [H, W, outer](Node& n) {
        if (!n.parents[0]->requires_grad) return;
        n.parents[0]->ensure_grad();
        for (int64_t o = 0; o < outer; ++o)
            for (int64_t y = 0; y < H; ++y)
                for (int64_t x = 0; x < W; ++x)
                    n.parents[0]->grad[o * H * W + (H - 1 - y) * W + (W - 1 - x)] +=
                        n.grad[o * H * W + y * W + x];
    });
}

Tensor flip2d_values(const Tensor& k) {
    check(k.rank() >= 2, "flip2d_values: need rank >= 2");
    int64_t W = k.dim(k.rank() - 1), H = k.dim(k.rank() - 2);
    int64_t outer = k.numel() / (H * W);
    std::vector<double> v((size_t)k.numel());
    for (int64_t o = 0; o < outer; ++o)
        for (int64_t y = 0; y < H; ++y)
            for (int64_t x = 0; x < W; ++x)
                v[o * H * W + y * W + x] =
                    k.data()[o * H * W + (H - 1 - y) * W + (W - 1 - x)];
    return Tensor::from_data(k.shape(), std::move(v));
}

}  // namespace opmatch
