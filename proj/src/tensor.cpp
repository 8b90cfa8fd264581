#define EIGEN_DONT_PARALLELIZE
#include <Eigen/Core>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <numeric>
#include <sstream>

#include "ssmlora/tensor.hpp"

namespace ssmlora {

// ============================================================
// storage and bookkeeping
// ============================================================

namespace {

std::atomic<std::size_t> g_live_bytes{0};
std::atomic<std::size_t> g_peak_bytes{0};

void count_alloc(std::size_t bytes) {
    std::size_t live = g_live_bytes.fetch_add(bytes) + bytes;
    std::size_t peak = g_peak_bytes.load();
    while (live > peak && !g_peak_bytes.compare_exchange_weak(peak, live)) {
    }
}

void count_free(std::size_t bytes) { g_live_bytes.fetch_sub(bytes); }

}  // namespace

std::size_t live_tensor_bytes() { return g_live_bytes.load(); }
std::size_t peak_tensor_bytes() { return g_peak_bytes.load(); }
void reset_peak_tensor_bytes() { g_peak_bytes.store(g_live_bytes.load()); }

std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return n;
}

std::string shape_to_string(const Shape& shape) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ", ";
        os << shape[i];
    }
    os << "]";
    return os.str();
}

namespace detail {

Storage::Storage(Shape s, double fill)
    : shape(std::move(s)), values(shape_numel(shape), fill) {
    count_alloc(values.size() * sizeof(double));
}

Storage::Storage(Shape s, std::vector<double> data)
    : shape(std::move(s)), values(std::move(data)) {
    if (values.size() != shape_numel(shape))
        throw ShapeError("tensor data length " + std::to_string(values.size()) +
                         " does not match shape " + shape_to_string(shape));
    count_alloc(values.size() * sizeof(double));
}

Storage::~Storage() {
    count_free((values.size() + grad.size()) * sizeof(double));
}

// Lazily allocate the gradient buffer.
double* grad_of(Storage& s) {
    if (s.grad.empty()) {
        s.grad.assign(s.values.size(), 0.0);
        count_alloc(s.grad.size() * sizeof(double));
    }
    return s.grad.data();
}

// nullptr when no gradient has been accumulated yet.
const double* grad_if(const Storage& s) {
    return s.grad.empty() ? nullptr : s.grad.data();
}

struct OpAccess {
    static const std::shared_ptr<Storage>& get(const Tensor& t) { return t.s_; }
    static Tensor wrap(std::shared_ptr<Storage> s) {
        Tensor t;
        t.s_ = std::move(s);
        return t;
    }
};

}  // namespace detail

namespace {

using detail::OpAccess;
using detail::Storage;
using StoragePtr = std::shared_ptr<Storage>;

const StoragePtr& st(const Tensor& t) { return OpAccess::get(t); }

Tensor make_out(Shape shape, std::vector<double> data, bool tracked) {
    auto s = std::make_shared<Storage>(std::move(shape), std::move(data));
    s->tracked = tracked;
    return OpAccess::wrap(std::move(s));
}

void require_defined(const Tensor& t, const char* op) {
    if (!t.defined()) throw Error(std::string(op) + ": undefined tensor");
}

[[noreturn]] void shape_fail(const char* op, const std::string& detail) {
    throw ShapeError(std::string(op) + ": " + detail);
}

}  // namespace

// ============================================================
// Tensor
// ============================================================

Tensor Tensor::zeros(Shape shape) { return full(std::move(shape), 0.0); }

Tensor Tensor::full(Shape shape, double value) {
    return OpAccess::wrap(std::make_shared<Storage>(std::move(shape), value));
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data) {
    return OpAccess::wrap(std::make_shared<Storage>(std::move(shape), std::move(data)));
}

Tensor Tensor::scalar(double value) { return full(Shape{}, value); }

Tensor Tensor::randn(Shape shape, Rng& rng, double sigma, double mu) {
    std::vector<double> data(shape_numel(shape));
    for (double& x : data) x = rng.normal(mu, sigma);
    return from_data(std::move(shape), std::move(data));
}

const Shape& Tensor::shape() const {
    require_defined(*this, "shape");
    return s_->shape;
}

std::size_t Tensor::numel() const { return shape_numel(shape()); }

std::size_t Tensor::dim(std::size_t axis) const {
    const Shape& s = shape();
    if (axis >= s.size())
        shape_fail("dim", "axis " + std::to_string(axis) + " out of range for " + shape_to_string(s));
    return s[axis];
}

double* Tensor::data() {
    require_defined(*this, "data");
    return s_->values.data();
}

const double* Tensor::data() const {
    require_defined(*this, "data");
    return s_->values.data();
}

double Tensor::operator[](std::size_t flat_index) const {
    require_defined(*this, "operator[]");
    return s_->values[flat_index];
}

double* Tensor::grad() {
    require_defined(*this, "grad");
    return detail::grad_of(*s_);
}

const double* Tensor::grad() const {
    require_defined(*this, "grad");
    return detail::grad_if(*s_);
}

bool Tensor::has_grad() const { return defined() && !s_->grad.empty(); }

void Tensor::zero_grad() {
    require_defined(*this, "zero_grad");
    std::fill(s_->grad.begin(), s_->grad.end(), 0.0);
}

bool Tensor::tracked() const { return defined() && s_->tracked; }

Tensor& Tensor::set_trainable(bool on) {
    require_defined(*this, "set_trainable");
    s_->tracked = on;
    return *this;
}

Tensor Tensor::clone() const {
    require_defined(*this, "clone");
    return make_out(s_->shape, s_->values, s_->tracked);
}

double Tensor::max_abs_diff(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        shape_fail("max_abs_diff", shape_to_string(a.shape()) + " vs " + shape_to_string(b.shape()));
    double worst = 0.0;
    const double* pa = a.data();
    const double* pb = b.data();
    for (std::size_t i = 0; i < a.numel(); ++i)
        worst = std::max(worst, std::abs(pa[i] - pb[i]));
    return worst;
}

// ============================================================
// Tape
// ============================================================

namespace {
thread_local Tape* g_active_tape = nullptr;
}

Tape* active_tape() { return g_active_tape; }

void Tape::record(std::function<void()> backward_fn) {
    ops_.push_back(std::move(backward_fn));
}

void Tape::backward(const Tensor& loss) {
    if (!loss.defined() || loss.numel() != 1)
        throw SequenceError("backward: loss must be a defined scalar");
    if (ops_.empty())
        throw SequenceError("backward: tape is empty; run a forward pass first");
    Tensor seed = loss;
    seed.grad()[0] = 1.0;
    for (std::size_t i = ops_.size(); i > 0; --i) ops_[i - 1]();
}

TapeScope::TapeScope(Tape& tape) : prev_(g_active_tape) { g_active_tape = &tape; }

TapeScope::~TapeScope() { g_active_tape = prev_; }

// ============================================================
// GEMM kernels (Eigen-backed; the library's only BLAS-like path)
// ============================================================

namespace {

using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Map = Eigen::Map<EMat>;
using CMap = Eigen::Map<const EMat>;
using Idx = Eigen::Index;

// c[m,n] = a[m,k] * b[k,n]
void gemm(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
    Map(c, Idx(m), Idx(n)).noalias() = CMap(a, Idx(m), Idx(k)) * CMap(b, Idx(k), Idx(n));
}

// c[p,r] += x[p,q] * y[r,q]^T
void gemm_nt_acc(const double* x, const double* y, double* c, std::size_t p, std::size_t q, std::size_t r) {
    Map(c, Idx(p), Idx(r)).noalias() += CMap(x, Idx(p), Idx(q)) * CMap(y, Idx(r), Idx(q)).transpose();
}

// c[p,r] += x[q,p]^T * y[q,r]
void gemm_tn_acc(const double* x, const double* y, double* c, std::size_t q, std::size_t p, std::size_t r) {
    Map(c, Idx(p), Idx(r)).noalias() += CMap(x, Idx(q), Idx(p)).transpose() * CMap(y, Idx(q), Idx(r));
}

}  // namespace

// ============================================================
// operations
// ============================================================

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_defined(a, "matmul");
    require_defined(b, "matmul");
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    if (sa.size() < 2 || sb.size() < 2)
        shape_fail("matmul", shape_to_string(sa) + " @ " + shape_to_string(sb) + " (need rank >= 2)");

    Tape* tape = active_tape();
    bool tracked = a.tracked() || b.tracked();

    if (sb.size() == 2) {
        // [..., m, k] @ [k, n]: flatten the leading axes into rows.
        std::size_t k = sa.back();
        if (sb[0] != k)
            shape_fail("matmul", "inner dims differ: " + shape_to_string(sa) + " @ " + shape_to_string(sb));
        std::size_t n = sb[1];
        std::size_t rows = a.numel() / k;
        Shape out_shape = sa;
        out_shape.back() = n;
        std::vector<double> out(rows * n);
        gemm(a.data(), b.data(), out.data(), rows, k, n);
        Tensor y = make_out(std::move(out_shape), std::move(out), tracked);
        if (tape && tracked) {
            tape->record([as = st(a), bs = st(b), ys = st(y), rows, k, n] {
                const double* gy = detail::grad_if(*ys);
                if (!gy) return;
                if (as->tracked)
                    gemm_nt_acc(gy, bs->values.data(), detail::grad_of(*as), rows, n, k);
                if (bs->tracked)
                    gemm_tn_acc(as->values.data(), gy, detail::grad_of(*bs), rows, k, n);
            });
        }
        return y;
    }

    // Batched: identical leading axes, [..., m, k] @ [..., k, n].
    if (sa.size() != sb.size() ||
        !std::equal(sa.begin(), sa.end() - 2, sb.begin()))
        shape_fail("matmul", "incompatible batch dims: " + shape_to_string(sa) + " @ " + shape_to_string(sb));
    std::size_t m = sa[sa.size() - 2];
    std::size_t k = sa.back();
    if (sb[sb.size() - 2] != k)
        shape_fail("matmul", "inner dims differ: " + shape_to_string(sa) + " @ " + shape_to_string(sb));
    std::size_t n = sb.back();
    std::size_t batch = 1;
    for (std::size_t i = 0; i + 2 < sa.size(); ++i) batch *= sa[i];

    Shape out_shape = sa;
    out_shape.back() = n;
    std::vector<double> out(batch * m * n);
    for (std::size_t i = 0; i < batch; ++i)
        gemm(a.data() + i * m * k, b.data() + i * k * n, out.data() + i * m * n, m, k, n);
    Tensor y = make_out(std::move(out_shape), std::move(out), tracked);
    if (tape && tracked) {
        tape->record([as = st(a), bs = st(b), ys = st(y), batch, m, k, n] {
            const double* gy = detail::grad_if(*ys);
            if (!gy) return;
            for (std::size_t i = 0; i < batch; ++i) {
                if (as->tracked)
                    gemm_nt_acc(gy + i * m * n, bs->values.data() + i * k * n,
                                detail::grad_of(*as) + i * m * k, m, n, k);
                if (bs->tracked)
                    gemm_tn_acc(as->values.data() + i * m * k, gy + i * m * n,
                                detail::grad_of(*bs) + i * k * n, m, k, n);
            }
        });
    }
    return y;
}

Tensor add(const Tensor& a, const Tensor& b) {
    require_defined(a, "add");
    require_defined(b, "add");
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    if (sb.size() > sa.size() ||
        !std::equal(sb.begin(), sb.end(), sa.end() - std::ptrdiff_t(sb.size())))
        shape_fail("add", shape_to_string(sb) + " is not a trailing suffix of " + shape_to_string(sa));

    std::size_t bn = b.numel();
    std::size_t repeats = a.numel() / std::max<std::size_t>(bn, 1);
    std::vector<double> out(a.data(), a.data() + a.numel());
    const double* pb = b.data();
    for (std::size_t r = 0; r < repeats; ++r)
        for (std::size_t j = 0; j < bn; ++j) out[r * bn + j] += pb[j];

    bool tracked = a.tracked() || b.tracked();
    Tensor y = make_out(sa, std::move(out), tracked);
    if (active_tape() && tracked) {
        active_tape()->record([as = st(a), bs = st(b), ys = st(y), repeats, bn] {
            const double* gy = detail::grad_if(*ys);
            if (!gy) return;
            std::size_t n = repeats * bn;
            if (as->tracked) {
                double* ga = detail::grad_of(*as);
                for (std::size_t i = 0; i < n; ++i) ga[i] += gy[i];
            }
            if (bs->tracked) {
                double* gb = detail::grad_of(*bs);
                for (std::size_t r = 0; r < repeats; ++r)
                    for (std::size_t j = 0; j < bn; ++j) gb[j] += gy[r * bn + j];
            }
        });
    }
    return y;
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require_defined(a, "sub");
    require_defined(b, "sub");
    if (a.shape() != b.shape())
        shape_fail("sub", shape_to_string(a.shape()) + " vs " + shape_to_string(b.shape()));
    std::size_t n = a.numel();
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = a.data()[i] - b.data()[i];
    bool tracked = a.tracked() || b.tracked();
    Tensor y = make_out(a.shape(), std::move(out), tracked);
    if (active_tape() && tracked) {
        active_tape()->record([as = st(a), bs = st(b), ys = st(y), n] {
            const double* gy = detail::grad_if(*ys);
            if (!gy) return;
            if (as->tracked) {
                double* ga = detail::grad_of(*as);
                for (std::size_t i = 0; i < n; ++i) ga[i] += gy[i];
            }
            if (bs->tracked) {
                double* gb = detail::grad_of(*bs);
                for (std::size_t i = 0; i < n; ++i) gb[i] -= gy[i];
            }
        });
    }
    return y;
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require_defined(a, "mul");
    require_defined(b, "mul");
    if (a.shape() != b.shape())
        shape_fail("mul", shape_to_string(a.shape()) + " vs " + shape_to_string(b.shape()));
    std::size_t n = a.numel();
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = a.data()[i] * b.data()[i];
    bool tracked = a.tracked() || b.tracked();
    Tensor y = make_out(a.shape(), std::move(out), tracked);
    if (active_tape() && tracked) {
        active_tape()->record([as = st(a), bs = st(b), ys = st(y), n] {
            const double* gy = detail::grad_if(*ys);
            if (!gy) return;
            if (as->tracked) {
                double* ga = detail::grad_of(*as);
                for (std::size_t i = 0; i < n; ++i) ga[i] += gy[i] * bs->values[i];
            }
            if (bs->tracked) {
                double* gb = detail::grad_of(*bs);
                for (std::size_t i = 0; i < n; ++i) gb[i] += gy[i] * as->values[i];
            }
        });
    }
    return y;
}

Tensor neg(const Tensor& a) { return scale(a, -1.0); }

Tensor scale(const Tensor& a, double c) {
    require_defined(a, "scale");
    std::size_t n = a.numel();
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = a.data()[i] * c;
    Tensor y = make_out(a.shape(), std::move(out), a.tracked());
    if (active_tape() && a.tracked()) {
        active_tape()->record([as = st(a), ys = st(y), c, n] {
            const double* gy = detail::grad_if(*ys);
            if (!gy) return;
            double* ga = detail::grad_of(*as);
            for (std::size_t i = 0; i < n; ++i) ga[i] += gy[i] * c;
        });
    }
    return y;
}

namespace {

// Flat-index remap for a two-axis transposition.
struct AxisSwapMap {
    Shape out_shape;
    std::vector<std::size_t> out_dims;
    std::vector<std::size_t> in_strides;
    std::size_t ax0, ax1;

    std::size_t operator()(std::size_t flat_out) const {
        std::size_t rank = out_dims.size();
        std::size_t in_flat = 0;
        for (std::size_t ax = rank; ax > 0; --ax) {
            std::size_t i = ax - 1;
            std::size_t coord = flat_out % out_dims[i];
            flat_out /= out_dims[i];
            std::size_t in_axis = i == ax0 ? ax1 : (i == ax1 ? ax0 : i);
            in_flat += coord * in_strides[in_axis];
        }
        return in_flat;
    }
};

AxisSwapMap build_swap_map(const Shape& in_shape, std::size_t ax0, std::size_t ax1) {
    AxisSwapMap m;
    m.ax0 = ax0;
    m.ax1 = ax1;
    m.out_shape = in_shape;
    std::swap(m.out_shape[ax0], m.out_shape[ax1]);
    m.out_dims.assign(m.out_shape.begin(), m.out_shape.end());
    m.in_strides.assign(in_shape.size(), 1);
    for (std::size_t i = in_shape.size() - 1; i > 0; --i)
        m.in_strides[i - 1] = m.in_strides[i] * in_shape[i];
    return m;
}

}  // namespace

Tensor swap_axes(const Tensor& a, std::size_t ax0, std::size_t ax1) {
    require_defined(a, "swap_axes");
    const Shape& sa = a.shape();
    if (ax0 >= sa.size() || ax1 >= sa.size())
        shape_fail("swap_axes", "axes (" + std::to_string(ax0) + ", " + std::to_string(ax1) +
                                    ") out of range for " + shape_to_string(sa));
    AxisSwapMap map = build_swap_map(sa, ax0, ax1);
    std::size_t n = a.numel();
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = a.data()[map(i)];
    Tensor y = make_out(map.out_shape, std::move(out), a.tracked());
    if (active_tape() && a.tracked()) {
        active_tape()->record([as = st(a), ys = st(y), map, n] {
            const double* gy = detail::grad_if(*ys);
            if (!gy) return;
            double* ga = detail::grad_of(*as);
            for (std::size_t i = 0; i < n; ++i) ga[map(i)] += gy[i];
        });
    }
    return y;
}

Tensor reshape(const Tensor& a, Shape shape) {
    require_defined(a, "reshape");
    if (shape_numel(shape) != a.numel())
        shape_fail("reshape", shape_to_string(a.shape()) + " -> " + shape_to_string(shape) +
                                  " changes element count");
    std::size_t n = a.numel();
    std::vector<double> out(a.data(), a.data() + n);
    Tensor y = make_out(std::move(shape), std::move(out), a.tracked());
    if (active_tape() && a.tracked()) {
        active_tape()->record([as = st(a), ys = st(y), n] {
            const double* gy = detail::grad_if(*ys);
            if (!gy) return;
            double* ga = detail::grad_of(*as);
            for (std::size_t i = 0; i < n; ++i) ga[i] += gy[i];
        });
    }
    return y;
}

Tensor slice_last(const Tensor& a, std::size_t offset, std::size_t length) {
    require_defined(a, "slice_last");
    const Shape& sa = a.shape();
    if (sa.empty()) shape_fail("slice_last", "rank-0 input");
    std::size_t last = sa.back();
    if (offset + length > last)
        shape_fail("slice_last", "window [" + std::to_string(offset) + ", " +
                                     std::to_string(offset + length) + ") exceeds last dim of " +
                                     shape_to_string(sa));
    std::size_t rows = a.numel() / last;
    Shape out_shape = sa;
    out_shape.back() = length;
    std::vector<double> out(rows * length);
    for (std::size_t r = 0; r < rows; ++r)
        std::memcpy(out.data() + r * length, a.data() + r * last + offset, length * sizeof(double));
    Tensor y = make_out(std::move(out_shape), std::move(out), a.tracked());
    if (active_tape() && a.tracked()) {
        active_tape()->record([as = st(a), ys = st(y), rows, last, offset, length] {
            const double* gy = detail::grad_if(*ys);
            if (!gy) return;
            double* ga = detail::grad_of(*as);
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t j = 0; j < length; ++j)
                    ga[r * last + offset + j] += gy[r * length + j];
        });
    }
    return y;
}

Tensor softmax_last(const Tensor& a) {
    require_defined(a, "softmax_last");
    const Shape& sa = a.shape();
    if (sa.empty()) shape_fail("softmax_last", "rank-0 input");
    std::size_t d = sa.back();
    std::size_t rows = a.numel() / d;
    std::vector<double> out(a.numel());
    for (std::size_t r = 0; r < rows; ++r) {
        const double* x = a.data() + r * d;
        double* y = out.data() + r * d;
        double hi = x[0];
        for (std::size_t i = 1; i < d; ++i) hi = std::max(hi, x[i]);
        double z = 0.0;
        for (std::size_t i = 0; i < d; ++i) {
            y[i] = std::exp(x[i] - hi);
            z += y[i];
        }
        for (std::size_t i = 0; i < d; ++i) y[i] /= z;
    }
    Tensor y = make_out(sa, std::move(out), a.tracked());
    if (active_tape() && a.tracked()) {
        active_tape()->record([as = st(a), ys = st(y), rows, d] {
            const double* gy = detail::grad_if(*ys);
            if (!gy) return;
            double* ga = detail::grad_of(*as);
            const double* p = ys->values.data();
            for (std::size_t r = 0; r < rows; ++r) {
                double dot = 0.0;
                for (std::size_t i = 0; i < d; ++i) dot += gy[r * d + i] * p[r * d + i];
                for (std::size_t i = 0; i < d; ++i)
                    ga[r * d + i] += p[r * d + i] * (gy[r * d + i] - dot);
            }
        });
    }
    return y;
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
    require_defined(x, "layer_norm");
    require_defined(gamma, "layer_norm");
    require_defined(beta, "layer_norm");
    const Shape& sx = x.shape();
    if (sx.empty()) shape_fail("layer_norm", "rank-0 input");
    std::size_t d = sx.back();
    if (gamma.shape() != Shape{d} || beta.shape() != Shape{d})
        shape_fail("layer_norm", "gamma/beta must be [" + std::to_string(d) + "], got " +
                                     shape_to_string(gamma.shape()) + " and " +
                                     shape_to_string(beta.shape()));
    std::size_t rows = x.numel() / d;

    std::vector<double> xhat(x.numel());
    std::vector<double> inv_sd(rows);
    std::vector<double> out(x.numel());
    for (std::size_t r = 0; r < rows; ++r) {
        const double* px = x.data() + r * d;
        double mu = 0.0;
        for (std::size_t i = 0; i < d; ++i) mu += px[i];
        mu /= double(d);
        double var = 0.0;
        for (std::size_t i = 0; i < d; ++i) var += (px[i] - mu) * (px[i] - mu);
        var /= double(d);
        double inv = 1.0 / std::sqrt(var + eps);
        inv_sd[r] = inv;
        for (std::size_t i = 0; i < d; ++i) {
            double h = (px[i] - mu) * inv;
            xhat[r * d + i] = h;
            out[r * d + i] = h * gamma.data()[i] + beta.data()[i];
        }
    }

    bool tracked = x.tracked() || gamma.tracked() || beta.tracked();
    Tensor y = make_out(sx, std::move(out), tracked);
    if (active_tape() && tracked) {
        active_tape()->record([xs = st(x), gs = st(gamma), bs = st(beta), ys = st(y),
                               xhat = std::move(xhat), inv_sd = std::move(inv_sd), rows, d] {
            const double* gy = detail::grad_if(*ys);
            if (!gy) return;
            for (std::size_t r = 0; r < rows; ++r) {
                const double* go = gy + r * d;
                const double* xh = xhat.data() + r * d;
                if (gs->tracked) {
                    double* gg = detail::grad_of(*gs);
                    for (std::size_t i = 0; i < d; ++i) gg[i] += go[i] * xh[i];
                }
                if (bs->tracked) {
                    double* gb = detail::grad_of(*bs);
                    for (std::size_t i = 0; i < d; ++i) gb[i] += go[i];
                }
                if (xs->tracked) {
                    double mean_g = 0.0, mean_gx = 0.0;
                    for (std::size_t i = 0; i < d; ++i) {
                        double g = go[i] * gs->values[i];
                        mean_g += g;
                        mean_gx += g * xh[i];
                    }
                    mean_g /= double(d);
                    mean_gx /= double(d);
                    double* gx = detail::grad_of(*xs);
                    for (std::size_t i = 0; i < d; ++i) {
                        double g = go[i] * gs->values[i];
                        gx[r * d + i] += inv_sd[r] * (g - mean_g - xh[i] * mean_gx);
                    }
                }
            }
        });
    }
    return y;
}

Tensor gelu(const Tensor& a) {
    require_defined(a, "gelu");
    std::size_t n = a.numel();
    constexpr double inv_sqrt2 = 0.7071067811865475244;
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        double x = a.data()[i];
        out[i] = 0.5 * x * (1.0 + std::erf(x * inv_sqrt2));
    }
    Tensor y = make_out(a.shape(), std::move(out), a.tracked());
    if (active_tape() && a.tracked()) {
        active_tape()->record([as = st(a), ys = st(y), n] {
            const double* gy = detail::grad_if(*ys);
            if (!gy) return;
            constexpr double inv_sqrt2pi = 0.3989422804014326779;
            double* ga = detail::grad_of(*as);
            for (std::size_t i = 0; i < n; ++i) {
                double x = as->values[i];
                double cdf = 0.5 * (1.0 + std::erf(x * inv_sqrt2));
                double pdf = inv_sqrt2pi * std::exp(-0.5 * x * x);
                ga[i] += gy[i] * (cdf + x * pdf);
            }
        });
    }
    return y;
}

Tensor range_normalize(const Tensor& h, double eps) {
    require_defined(h, "range_normalize");
    if (eps <= 0.0) throw ConfigError("range_normalize: eps must be positive");
    const Shape& sh = h.shape();
    if (sh.empty()) shape_fail("range_normalize", "rank-0 input");
    std::size_t d = sh.back();
    std::size_t rows = h.numel() / d;

    std::vector<double> out(h.numel());
    std::vector<std::size_t> arg_min(rows), arg_max(rows);
    std::vector<double> inv_den(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const double* x = h.data() + r * d;
        std::size_t jmin = 0, jmax = 0;
        for (std::size_t i = 1; i < d; ++i) {
            if (x[i] < x[jmin]) jmin = i;
            if (x[i] > x[jmax]) jmax = i;
        }
        double lo = x[jmin];
        double inv = 1.0 / (x[jmax] - lo + eps);
        arg_min[r] = jmin;
        arg_max[r] = jmax;
        inv_den[r] = inv;
        for (std::size_t i = 0; i < d; ++i) out[r * d + i] = (x[i] - lo) * inv;
    }

    Tensor y = make_out(sh, std::move(out), h.tracked());
    if (active_tape() && h.tracked()) {
        active_tape()->record([hs = st(h), ys = st(y), arg_min = std::move(arg_min),
                               arg_max = std::move(arg_max), inv_den = std::move(inv_den), rows, d] {
            const double* gy = detail::grad_if(*ys);
            if (!gy) return;
            double* gh = detail::grad_of(*hs);
            const double* yv = ys->values.data();
            for (std::size_t r = 0; r < rows; ++r) {
                const double* go = gy + r * d;
                double inv = inv_den[r];
                double total = 0.0;
                double weighted = 0.0;  // sum of go_i * out_i / den
                for (std::size_t i = 0; i < d; ++i) {
                    total += go[i];
                    weighted += go[i] * yv[r * d + i] * inv;
                }
                for (std::size_t i = 0; i < d; ++i) gh[r * d + i] += go[i] * inv;
                gh[r * d + arg_min[r]] += weighted - total * inv;
                gh[r * d + arg_max[r]] -= weighted;
            }
        });
    }
    return y;
}

Tensor mean_axis(const Tensor& a, std::size_t axis) {
    require_defined(a, "mean_axis");
    const Shape& sa = a.shape();
    if (axis >= sa.size())
        shape_fail("mean_axis", "axis " + std::to_string(axis) + " out of range for " + shape_to_string(sa));
    std::size_t n = sa[axis];
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= sa[i];
    for (std::size_t i = axis + 1; i < sa.size(); ++i) inner *= sa[i];
    Shape out_shape;
    for (std::size_t i = 0; i < sa.size(); ++i)
        if (i != axis) out_shape.push_back(sa[i]);

    std::vector<double> out(outer * inner, 0.0);
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < inner; ++j)
                out[o * inner + j] += a.data()[(o * n + i) * inner + j];
    for (double& v : out) v /= double(n);

    Tensor y = make_out(std::move(out_shape), std::move(out), a.tracked());
    if (active_tape() && a.tracked()) {
        active_tape()->record([as = st(a), ys = st(y), outer, n, inner] {
            const double* gy = detail::grad_if(*ys);
            if (!gy) return;
            double* ga = detail::grad_of(*as);
            double inv = 1.0 / double(n);
            for (std::size_t o = 0; o < outer; ++o)
                for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t j = 0; j < inner; ++j)
                        ga[(o * n + i) * inner + j] += gy[o * inner + j] * inv;
        });
    }
    return y;
}

Tensor sum_all(const Tensor& a) {
    require_defined(a, "sum_all");
    std::size_t n = a.numel();
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) total += a.data()[i];
    Tensor y = make_out(Shape{}, std::vector<double>{total}, a.tracked());
    if (active_tape() && a.tracked()) {
        active_tape()->record([as = st(a), ys = st(y), n] {
            const double* gy = detail::grad_if(*ys);
            if (!gy) return;
            double* ga = detail::grad_of(*as);
            for (std::size_t i = 0; i < n; ++i) ga[i] += gy[0];
        });
    }
    return y;
}

Tensor embedding_lookup(const Tensor& table, const std::vector<int>& ids,
                        std::size_t batch, std::size_t seq) {
    require_defined(table, "embedding_lookup");
    if (table.rank() != 2)
        shape_fail("embedding_lookup", "table must be rank 2, got " + shape_to_string(table.shape()));
    if (ids.size() != batch * seq)
        throw InputError("embedding_lookup: expected " + std::to_string(batch * seq) +
                         " ids, got " + std::to_string(ids.size()));
    std::size_t vocab = table.dim(0);
    std::size_t d = table.dim(1);
    std::vector<double> out(batch * seq * d);
    for (std::size_t r = 0; r < ids.size(); ++r) {
        int id = ids[r];
        if (id < 0 || std::size_t(id) >= vocab)
            throw InputError("embedding_lookup: token id " + std::to_string(id) +
                             " outside vocab of " + std::to_string(vocab));
        std::memcpy(out.data() + r * d, table.data() + std::size_t(id) * d, d * sizeof(double));
    }
    Tensor y = make_out(Shape{batch, seq, d}, std::move(out), table.tracked());
    if (active_tape() && table.tracked()) {
        active_tape()->record([ts = st(table), ys = st(y), ids, d] {
            const double* gy = detail::grad_if(*ys);
            if (!gy) return;
            double* gt = detail::grad_of(*ts);
            for (std::size_t r = 0; r < ids.size(); ++r)
                for (std::size_t j = 0; j < d; ++j)
                    gt[std::size_t(ids[r]) * d + j] += gy[r * d + j];
        });
    }
    return y;
}

Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels) {
    require_defined(logits, "cross_entropy");
    if (logits.rank() != 2)
        shape_fail("cross_entropy", "logits must be rank 2, got " + shape_to_string(logits.shape()));
    std::size_t n = logits.dim(0);
    std::size_t classes = logits.dim(1);
    if (labels.size() != n)
        throw InputError("cross_entropy: " + std::to_string(n) + " rows vs " +
                         std::to_string(labels.size()) + " labels");

    std::vector<double> probs(n * classes);
    double loss = 0.0;
    for (std::size_t r = 0; r < n; ++r) {
        int label = labels[r];
        if (label < 0 || std::size_t(label) >= classes)
            throw InputError("cross_entropy: label " + std::to_string(label) +
                             " outside " + std::to_string(classes) + " classes");
        const double* x = logits.data() + r * classes;
        double hi = x[0];
        for (std::size_t c = 1; c < classes; ++c) hi = std::max(hi, x[c]);
        double z = 0.0;
        for (std::size_t c = 0; c < classes; ++c) z += std::exp(x[c] - hi);
        double log_z = hi + std::log(z);
        loss -= x[std::size_t(label)] - log_z;
        for (std::size_t c = 0; c < classes; ++c)
            probs[r * classes + c] = std::exp(x[c] - log_z);
    }
    loss /= double(n);
    if (!std::isfinite(loss)) throw NumericError("cross_entropy: non-finite loss");

    Tensor y = make_out(Shape{}, std::vector<double>{loss}, logits.tracked());
    if (active_tape() && logits.tracked()) {
        active_tape()->record([ls = st(logits), ys = st(y), probs = std::move(probs),
                               labels, n, classes] {
            const double* gy = detail::grad_if(*ys);
            if (!gy) return;
            double* gl = detail::grad_of(*ls);
            double w = gy[0] / double(n);
            for (std::size_t r = 0; r < n; ++r)
                for (std::size_t c = 0; c < classes; ++c) {
                    double p = probs[r * classes + c];
                    gl[r * classes + c] += w * (p - (std::size_t(labels[r]) == c ? 1.0 : 0.0));
                }
        });
    }
    return y;
}

Tensor stop_gradient(const Tensor& t) {
    require_defined(t, "stop_gradient");
    return make_out(t.shape(), std::vector<double>(t.data(), t.data() + t.numel()), false);
}

Tensor dropout(const Tensor& x, double p, Rng& rng, bool training) {
    require_defined(x, "dropout");
    if (p < 0.0 || p >= 1.0)
        throw ConfigError("dropout: rate must be in [0, 1), got " + std::to_string(p));
    if (!training || p == 0.0) return x;
    std::size_t n = x.numel();
    double keep = 1.0 - p;
    std::vector<double> mask(n);
    for (std::size_t i = 0; i < n; ++i)
        mask[i] = rng.uniform01() < p ? 0.0 : 1.0 / keep;
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = x.data()[i] * mask[i];
    Tensor y = make_out(x.shape(), std::move(out), x.tracked());
    if (active_tape() && x.tracked()) {
        active_tape()->record([xs = st(x), ys = st(y), mask = std::move(mask), n] {
            const double* gy = detail::grad_if(*ys);
            if (!gy) return;
            double* gx = detail::grad_of(*xs);
            for (std::size_t i = 0; i < n; ++i) gx[i] += gy[i] * mask[i];
        });
    }
    return y;
}

// ============================================================
// finite differences
// ============================================================

namespace {

double eval_checked(const std::function<double(const Tensor&)>& f, const Tensor& theta) {
    double v = f(theta);
    if (!std::isfinite(v)) throw NumericError("finite_diff: objective returned non-finite value");
    return v;
}

}  // namespace

std::vector<double> finite_diff_coords(const std::function<double(const Tensor&)>& f,
                                       const Tensor& theta, double delta,
                                       const std::vector<std::size_t>& coords) {
    if (delta <= 0.0) throw ConfigError("finite_diff: step must be positive");
    Tensor t = theta;  // shared storage; perturb in place
    std::vector<double> g(coords.size());
    for (std::size_t c = 0; c < coords.size(); ++c) {
        std::size_t i = coords[c];
        if (i >= t.numel())
            throw InputError("finite_diff: coordinate " + std::to_string(i) +
                             " outside tensor of " + std::to_string(t.numel()));
        double saved = t.data()[i];
        t.data()[i] = saved + delta;
        double up = eval_checked(f, theta);
        t.data()[i] = saved - delta;
        double down = eval_checked(f, theta);
        t.data()[i] = saved;
        g[c] = (up - down) / (2.0 * delta);
    }
    return g;
}

std::vector<double> finite_diff(const std::function<double(const Tensor&)>& f,
                                const Tensor& theta, double delta) {
    std::vector<std::size_t> coords(theta.numel());
    std::iota(coords.begin(), coords.end(), std::size_t(0));
    return finite_diff_coords(f, theta, delta, coords);
}

}  // namespace ssmlora
