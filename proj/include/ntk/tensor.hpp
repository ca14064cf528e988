#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "ntk/errors.hpp"

namespace ntk {

// Dense row-major shape. Extents must be >= 1; rank 0 denotes a scalar.
struct Shape {
    std::vector<std::int64_t> dims;

    Shape() = default;
    Shape(std::initializer_list<std::int64_t> d) : dims(d) { validate(); }
    explicit Shape(std::vector<std::int64_t> d) : dims(std::move(d)) { validate(); }

    std::int64_t numel() const;
    std::size_t rank() const { return dims.size(); }
    std::int64_t dim(std::size_t i) const { return dims[i]; }
    bool operator==(const Shape& other) const { return dims == other.dims; }
    bool operator!=(const Shape& other) const { return dims != other.dims; }
    std::string str() const;

private:
    void validate() const;
};

// Accumulates fused multiply-adds and a live-bytes high-water mark for one
// counting session. Increments can be attributed to a named phase so that
// measured cost can be compared against per-term predictions.
class FlopCounter {
public:
    void add_fmas(std::int64_t n);
    void on_alloc(std::int64_t bytes);
    void on_release(std::int64_t bytes);

    std::int64_t fused_multiply_adds() const { return fmas_; }
    std::int64_t peak_live_bytes() const { return peak_live_bytes_; }
    std::int64_t live_bytes() const { return live_bytes_; }
    const std::map<std::string, std::int64_t>& phase_fmas() const { return per_phase_; }

    void push_phase(std::string name);
    void pop_phase();

private:
    std::int64_t fmas_ = 0;
    std::int64_t live_bytes_ = 0;
    std::int64_t peak_live_bytes_ = 0;
    std::vector<std::string> phase_stack_;
    std::map<std::string, std::int64_t> per_phase_;
};

// Installs a FlopCounter as the thread-local counting context. Counting is
// single-threaded by contract: while a session is active on a thread, all
// engine work on that thread must stay sequential.
class CountingSession {
public:
    CountingSession();
    ~CountingSession();
    CountingSession(const CountingSession&) = delete;
    CountingSession& operator=(const CountingSession&) = delete;

    FlopCounter& counter() { return *counter_; }
    static FlopCounter* current();

private:
    std::shared_ptr<FlopCounter> counter_;
    std::shared_ptr<FlopCounter> previous_;
};

// Attributes FMAs recorded inside the scope to a named phase.
class PhaseScope {
public:
    explicit PhaseScope(const char* name);
    ~PhaseScope();

private:
    bool active_ = false;
};

// Dense 64-bit float tensor, row-major, immutable by convention after the
// producing kernel returns. Buffers register with the active counting
// session so peak_live_bytes tracks logical tensor liveness.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape);
    Tensor(Shape shape, std::vector<double> values);
    Tensor(const Tensor& other);
    Tensor(Tensor&& other) noexcept;
    Tensor& operator=(const Tensor& other);
    Tensor& operator=(Tensor&& other) noexcept;
    ~Tensor();

    const Shape& shape() const { return shape_; }
    std::int64_t numel() const { return static_cast<std::int64_t>(data_.size()); }
    const double* data() const { return data_.data(); }
    double* data() { return data_.data(); }
    double at(std::int64_t flat) const { return data_[static_cast<std::size_t>(flat)]; }
    double& at(std::int64_t flat) { return data_[static_cast<std::size_t>(flat)]; }
    const std::vector<double>& values() const { return data_; }

    bool defined() const { return !data_.empty() || shape_.rank() == 0; }

private:
    void track();
    void untrack();

    Shape shape_;
    std::vector<double> data_;
    std::shared_ptr<FlopCounter> tracker_;
    std::int64_t tracked_bytes_ = 0;
};

// Records FMAs against the active counting session, if any.
void count_flops(std::int64_t n);

Tensor zeros(const Shape& shape);
Tensor ones(const Shape& shape);
Tensor full(const Shape& shape, double value);
Tensor identity(std::int64_t n);

std::vector<std::int64_t> row_major_strides(const Shape& shape);

// (M,K) x (K,P) -> (M,P); counts M*K*P fused multiply-adds.
Tensor matmul(const Tensor& a, const Tensor& b);
// acc += a * b without a separate addition pass; counts M*K*P.
void matmul_acc(Tensor& acc, const Tensor& a, const Tensor& b);

// Circular cross-correlation. x: (dh, dw, cin), filt: (fh, fw, cin, cout),
// unit stride, wraparound indexing, output (dh, dw, cout).
// Counts dh*dw*fh*fw*cin*cout.
Tensor conv2d_circular(const Tensor& x, const Tensor& filt);
// acc += conv2d_circular(x, filt); counts the same.
void conv2d_circular_acc(Tensor& acc, const Tensor& x, const Tensor& filt);

enum class ElementwiseOp { Add, Sub, Mul };

// Broadcasting elementwise ops (trailing-dim alignment). Count one op per
// output element.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double alpha);
Tensor relu(const Tensor& a);
// 0/1 indicator of positivity; counts one op per element.
Tensor relu_mask(const Tensor& a);
Tensor neg(const Tensor& a);

// Data movement; zero multiply-adds.
Tensor reshape(const Tensor& a, const Shape& target);
Tensor transpose(const Tensor& a, const std::vector<int>& perm);
// dim_map[i] gives the target axis holding input axis i; other target axes
// are tiled copies. Zero multiply-adds.
Tensor broadcast_in_dim(const Tensor& a, const Shape& target, const std::vector<int>& dim_map);

// Reductions count the input element count.
Tensor reduce_sum(const Tensor& a, const std::vector<int>& axes);
// (dh, dw, c) -> (c, 1) per-channel spatial mean; counts input element count.
Tensor global_avg_pool(const Tensor& a);

Shape broadcast_shape(const Shape& a, const Shape& b);

double dot(const Tensor& a, const Tensor& b);
double frobenius_norm(const Tensor& a);
double max_abs_diff(const Tensor& a, const Tensor& b);
double rel_frobenius_diff(const Tensor& a, const Tensor& b);

}  // namespace ntk
