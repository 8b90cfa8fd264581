#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "ssmlora/errors.hpp"
#include "ssmlora/rng.hpp"

namespace ssmlora {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_to_string(const Shape& shape);

// Bytes currently held by live tensor storages / high-water mark.
// Used by the bench command as a deterministic allocation estimate.
std::size_t live_tensor_bytes();
std::size_t peak_tensor_bytes();
void reset_peak_tensor_bytes();

namespace detail {
struct Storage {
    Shape shape;
    std::vector<double> values;
    std::vector<double> grad;  // lazily allocated, same length as values
    bool tracked = false;      // participates in gradient flow

    Storage(Shape s, double fill);
    Storage(Shape s, std::vector<double> data);
    ~Storage();
};

struct OpAccess;
}  // namespace detail

// Dense row-major tensor of doubles. Copying a Tensor is shallow: both
// handles refer to the same storage (and the same gradient buffer), which
// is how model parameters stay shared between the graph and the optimizer.
// clone() makes an independent deep copy.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape);
    static Tensor full(Shape shape, double value);
    static Tensor from_data(Shape shape, std::vector<double> data);
    static Tensor scalar(double value);
    static Tensor randn(Shape shape, Rng& rng, double sigma = 1.0, double mu = 0.0);

    bool defined() const { return s_ != nullptr; }
    const Shape& shape() const;
    std::size_t rank() const { return shape().size(); }
    std::size_t numel() const;
    std::size_t dim(std::size_t axis) const;

    double* data();
    const double* data() const;
    double operator[](std::size_t flat_index) const;

    // Lazily allocates a zeroed gradient buffer on first use.
    double* grad();
    const double* grad() const;  // nullptr until allocated
    bool has_grad() const;
    void zero_grad();

    bool tracked() const;
    // Marks a leaf as trainable so backward accumulates into its grad.
    Tensor& set_trainable(bool on = true);

    Tensor clone() const;

    // Max |a - b| over all elements; shapes must match.
    static double max_abs_diff(const Tensor& a, const Tensor& b);

private:
    friend class Tape;
    friend struct detail::OpAccess;
    std::shared_ptr<detail::Storage> s_;
};

// Ordered record of the primitive ops of one forward pass. backward()
// replays the record once, in reverse; because ops are appended in
// execution order, the reverse is a valid topological order and each
// node's backward runs exactly once per replay.
class Tape {
public:
    void record(std::function<void()> backward_fn);
    // Seeds d(loss)/d(loss) = 1 and replays the tape. The loss must be a
    // scalar (numel == 1) and at least one op must have been recorded.
    void backward(const Tensor& loss);
    std::size_t num_ops() const { return ops_.size(); }
    void clear() { ops_.clear(); }

private:
    std::vector<std::function<void()>> ops_;
};

// Activates a tape for the current thread; ops record onto it while the
// scope is alive. Without an active tape, ops compute values only.
class TapeScope {
public:
    explicit TapeScope(Tape& tape);
    ~TapeScope();
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;

private:
    Tape* prev_;
};

Tape* active_tape();

// ---- primitive operations ----
// All ops validate shapes and throw ShapeError naming both operands.

// a: [..., m, k] with b: [k, n], or both rank >= 3 with equal leading dims.
Tensor matmul(const Tensor& a, const Tensor& b);
// Same shape, or b's shape equal to a trailing suffix of a's shape
// (broadcast over the leading axes; covers bias and position tables).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);  // elementwise, same shape
Tensor neg(const Tensor& a);
Tensor scale(const Tensor& a, double c);
Tensor swap_axes(const Tensor& a, std::size_t ax0, std::size_t ax1);
Tensor reshape(const Tensor& a, Shape shape);
Tensor slice_last(const Tensor& a, std::size_t offset, std::size_t length);
Tensor softmax_last(const Tensor& a);
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps);
Tensor gelu(const Tensor& a);
// Per row of the last axis: (h - min) / (max - min + eps). Every output
// element lies in [0, 1); constant rows map to exact zeros.
Tensor range_normalize(const Tensor& h, double eps);
Tensor mean_axis(const Tensor& a, std::size_t axis);
Tensor sum_all(const Tensor& a);  // rank-0 scalar
// table: [vocab, d]; ids: row-major [batch, seq] token ids.
Tensor embedding_lookup(const Tensor& table, const std::vector<int>& ids,
                        std::size_t batch, std::size_t seq);
// Mean negative log-likelihood over rows of logits [n, classes].
Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels);
// Identity on values (bit-exact copy); the result is a constant leaf.
Tensor stop_gradient(const Tensor& t);
// Inverted dropout on the adapter path; identity when !training or p == 0.
Tensor dropout(const Tensor& x, double p, Rng& rng, bool training);

// ---- verification oracle ----
// Central finite differences of f around theta: (f(+d) - f(-d)) / (2d).
// Independent of the tape machinery; throws NumericError on non-finite f.
std::vector<double> finite_diff(const std::function<double(const Tensor&)>& f,
                                const Tensor& theta, double delta);
std::vector<double> finite_diff_coords(const std::function<double(const Tensor&)>& f,
                                       const Tensor& theta, double delta,
                                       const std::vector<std::size_t>& coords);

}  // namespace ssmlora
