#include "ntk/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace ntk {

namespace {

thread_local std::shared_ptr<FlopCounter> g_active_counter;

void count_fmas(std::int64_t n) {
    if (g_active_counter) {
        g_active_counter->add_fmas(n);
    }
}

std::int64_t checked_product(const std::vector<std::int64_t>& dims) {
    std::int64_t n = 1;
    for (std::int64_t d : dims) {
        n *= d;
    }
    return n;
}

}  // namespace

void count_flops(std::int64_t n) { count_fmas(n); }

std::int64_t Shape::numel() const { return checked_product(dims); }

void Shape::validate() const {
    for (std::int64_t d : dims) {
        if (d < 1) {
            throw DimensionError("shape " + str() + " has non-positive extent");
        }
    }
}

std::string Shape::str() const {
    std::ostringstream os;
    os << "(";
    for (std::size_t i = 0; i < dims.size(); ++i) {
        if (i) os << ",";
        os << dims[i];
    }
    os << ")";
    return os.str();
}

void FlopCounter::add_fmas(std::int64_t n) {
    fmas_ += n;
    if (!phase_stack_.empty()) {
        per_phase_[phase_stack_.back()] += n;
    }
}

void FlopCounter::on_alloc(std::int64_t bytes) {
    live_bytes_ += bytes;
    peak_live_bytes_ = std::max(peak_live_bytes_, live_bytes_);
}

void FlopCounter::on_release(std::int64_t bytes) { live_bytes_ -= bytes; }

void FlopCounter::push_phase(std::string name) { phase_stack_.push_back(std::move(name)); }

void FlopCounter::pop_phase() {
    if (!phase_stack_.empty()) {
        phase_stack_.pop_back();
    }
}

CountingSession::CountingSession()
    : counter_(std::make_shared<FlopCounter>()), previous_(g_active_counter) {
    g_active_counter = counter_;
}

CountingSession::~CountingSession() { g_active_counter = previous_; }

FlopCounter* CountingSession::current() { return g_active_counter.get(); }

PhaseScope::PhaseScope(const char* name) {
    if (g_active_counter) {
        g_active_counter->push_phase(name);
        active_ = true;
    }
}

PhaseScope::~PhaseScope() {
    if (active_ && g_active_counter) {
        g_active_counter->pop_phase();
    }
}

Tensor::Tensor(Shape shape)
    : shape_(std::move(shape)), data_(static_cast<std::size_t>(shape_.numel()), 0.0) {
    track();
}

Tensor::Tensor(Shape shape, std::vector<double> values)
    : shape_(std::move(shape)), data_(std::move(values)) {
    if (static_cast<std::int64_t>(data_.size()) != shape_.numel()) {
        throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                             " does not match shape " + shape_.str());
    }
    track();
}

Tensor::Tensor(const Tensor& other) : shape_(other.shape_), data_(other.data_) { track(); }

Tensor::Tensor(Tensor&& other) noexcept
    : shape_(std::move(other.shape_)),
      data_(std::move(other.data_)),
      tracker_(std::move(other.tracker_)),
      tracked_bytes_(other.tracked_bytes_) {
    other.tracked_bytes_ = 0;
    other.tracker_.reset();
}

Tensor& Tensor::operator=(const Tensor& other) {
    if (this != &other) {
        untrack();
        shape_ = other.shape_;
        data_ = other.data_;
        track();
    }
    return *this;
}

Tensor& Tensor::operator=(Tensor&& other) noexcept {
    if (this != &other) {
        untrack();
        shape_ = std::move(other.shape_);
        data_ = std::move(other.data_);
        tracker_ = std::move(other.tracker_);
        tracked_bytes_ = other.tracked_bytes_;
        other.tracked_bytes_ = 0;
        other.tracker_.reset();
    }
    return *this;
}

Tensor::~Tensor() { untrack(); }

void Tensor::track() {
    if (g_active_counter && !data_.empty()) {
        tracker_ = g_active_counter;
        tracked_bytes_ = static_cast<std::int64_t>(data_.size() * sizeof(double));
        tracker_->on_alloc(tracked_bytes_);
    }
}

void Tensor::untrack() {
    if (tracker_) {
        tracker_->on_release(tracked_bytes_);
        tracker_.reset();
        tracked_bytes_ = 0;
    }
}

Tensor zeros(const Shape& shape) { return Tensor(shape); }

Tensor ones(const Shape& shape) { return full(shape, 1.0); }

Tensor full(const Shape& shape, double value) {
    Tensor t(shape);
    std::fill(t.data(), t.data() + t.numel(), value);
    return t;
}

Tensor identity(std::int64_t n) {
    Tensor t(Shape{n, n});
    for (std::int64_t i = 0; i < n; ++i) {
        t.at(i * n + i) = 1.0;
    }
    return t;
}

std::vector<std::int64_t> row_major_strides(const Shape& shape) {
    std::vector<std::int64_t> strides(shape.rank(), 1);
    for (std::size_t i = shape.rank(); i-- > 1;) {
        strides[i - 1] = strides[i] * shape.dim(i);
    }
    return strides;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.shape().rank() != 2 || b.shape().rank() != 2 || a.shape().dim(1) != b.shape().dim(0)) {
        throw DimensionError("matmul shape mismatch: " + a.shape().str() + " x " + b.shape().str());
    }
    Tensor out(Shape{a.shape().dim(0), b.shape().dim(1)});
    matmul_acc(out, a, b);
    return out;
}

void matmul_acc(Tensor& acc, const Tensor& a, const Tensor& b) {
    if (a.shape().rank() != 2 || b.shape().rank() != 2 || a.shape().dim(1) != b.shape().dim(0)) {
        throw DimensionError("matmul shape mismatch: " + a.shape().str() + " x " + b.shape().str());
    }
    const std::int64_t m = a.shape().dim(0);
    const std::int64_t k = a.shape().dim(1);
    const std::int64_t p = b.shape().dim(1);
    if (acc.shape() != Shape{m, p}) {
        throw DimensionError("matmul accumulator shape " + acc.shape().str() + " does not match " +
                             Shape{m, p}.str());
    }
    const double* pa = a.data();
    const double* pb = b.data();
    double* pc = acc.data();
    for (std::int64_t i = 0; i < m; ++i) {
        for (std::int64_t kk = 0; kk < k; ++kk) {
            const double aik = pa[i * k + kk];
            const double* brow = pb + kk * p;
            double* crow = pc + i * p;
            for (std::int64_t j = 0; j < p; ++j) {
                crow[j] += aik * brow[j];
            }
        }
    }
    count_fmas(m * k * p);
}

Tensor conv2d_circular(const Tensor& x, const Tensor& filt) {
    if (x.shape().rank() != 3 || filt.shape().rank() != 4) {
        throw DimensionError("conv2d_circular expects x rank 3 and filter rank 4, got " +
                             x.shape().str() + " and " + filt.shape().str());
    }
    Tensor out(Shape{x.shape().dim(0), x.shape().dim(1), filt.shape().dim(3)});
    conv2d_circular_acc(out, x, filt);
    return out;
}

void conv2d_circular_acc(Tensor& out, const Tensor& x, const Tensor& filt) {
    if (x.shape().rank() != 3 || filt.shape().rank() != 4) {
        throw DimensionError("conv2d_circular expects x rank 3 and filter rank 4, got " +
                             x.shape().str() + " and " + filt.shape().str());
    }
    const std::int64_t dh = x.shape().dim(0), dw = x.shape().dim(1), cin = x.shape().dim(2);
    const std::int64_t fh = filt.shape().dim(0), fw = filt.shape().dim(1);
    const std::int64_t fcin = filt.shape().dim(2), cout = filt.shape().dim(3);
    if (fcin != cin) {
        throw DimensionError("conv2d_circular channel mismatch: input " + x.shape().str() +
                             " vs filter " + filt.shape().str());
    }
    if (out.shape() != Shape{dh, dw, cout}) {
        throw DimensionError("conv2d_circular accumulator shape " + out.shape().str() +
                             " does not match " + Shape{dh, dw, cout}.str());
    }
    const std::int64_t ch = fh / 2, cw = fw / 2;
    const double* px = x.data();
    const double* pf = filt.data();
    double* po = out.data();
    for (std::int64_t i = 0; i < dh; ++i) {
        for (std::int64_t j = 0; j < dw; ++j) {
            for (std::int64_t a = 0; a < fh; ++a) {
                const std::int64_t ii = ((i + a - ch) % dh + dh) % dh;
                for (std::int64_t b = 0; b < fw; ++b) {
                    const std::int64_t jj = ((j + b - cw) % dw + dw) % dw;
                    const double* xrow = px + (ii * dw + jj) * cin;
                    const double* frow = pf + ((a * fw + b) * cin) * cout;
                    double* orow = po + (i * dw + j) * cout;
                    for (std::int64_t ci = 0; ci < cin; ++ci) {
                        const double xv = xrow[ci];
                        const double* fc = frow + ci * cout;
                        for (std::int64_t co = 0; co < cout; ++co) {
                            orow[co] += xv * fc[co];
                        }
                    }
                }
            }
        }
    }
    count_fmas(dh * dw * fh * fw * cin * cout);
}

Shape broadcast_shape(const Shape& a, const Shape& b) {
    const std::size_t rank = std::max(a.rank(), b.rank());
    std::vector<std::int64_t> dims(rank, 1);
    for (std::size_t i = 0; i < rank; ++i) {
        const std::int64_t da = i < rank - a.rank() ? 1 : a.dim(i - (rank - a.rank()));
        const std::int64_t db = i < rank - b.rank() ? 1 : b.dim(i - (rank - b.rank()));
        if (da != db && da != 1 && db != 1) {
            throw DimensionError("shapes " + a.str() + " and " + b.str() + " are not broadcastable");
        }
        dims[i] = std::max(da, db);
    }
    return Shape(dims);
}

namespace {

// Strides into `t` for iterating over coordinates of `out`, with 0-stride on
// broadcast axes.
std::vector<std::int64_t> broadcast_strides(const Tensor& t, const Shape& out) {
    const std::size_t rank = out.rank();
    const std::size_t off = rank - t.shape().rank();
    const auto own = row_major_strides(t.shape());
    std::vector<std::int64_t> strides(rank, 0);
    for (std::size_t i = off; i < rank; ++i) {
        if (t.shape().dim(i - off) != 1) {
            strides[i] = own[i - off];
        } else if (out.dim(i) == 1) {
            strides[i] = own[i - off];
        }
    }
    return strides;
}

template <typename F>
Tensor binary_elementwise(const Tensor& a, const Tensor& b, F&& f) {
    const Shape out_shape = broadcast_shape(a.shape(), b.shape());
    Tensor out(out_shape);
    const auto sa = broadcast_strides(a, out_shape);
    const auto sb = broadcast_strides(b, out_shape);
    const std::size_t rank = out_shape.rank();
    std::vector<std::int64_t> idx(rank, 0);
    const std::int64_t n = out_shape.numel();
    std::int64_t ia = 0, ib = 0;
    for (std::int64_t flat = 0; flat < n; ++flat) {
        out.at(flat) = f(a.at(ia), b.at(ib));
        for (std::size_t d = rank; d-- > 0;) {
            ++idx[d];
            ia += sa[d];
            ib += sb[d];
            if (idx[d] < out_shape.dim(d)) {
                break;
            }
            idx[d] = 0;
            ia -= sa[d] * out_shape.dim(d);
            ib -= sb[d] * out_shape.dim(d);
        }
    }
    count_fmas(n);
    return out;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    return binary_elementwise(a, b, [](double x, double y) { return x + y; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    return binary_elementwise(a, b, [](double x, double y) { return x - y; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    return binary_elementwise(a, b, [](double x, double y) { return x * y; });
}

Tensor scale(const Tensor& a, double alpha) {
    Tensor out(a.shape());
    for (std::int64_t i = 0; i < a.numel(); ++i) {
        out.at(i) = alpha * a.at(i);
    }
    count_fmas(a.numel());
    return out;
}

Tensor relu(const Tensor& a) {
    Tensor out(a.shape());
    for (std::int64_t i = 0; i < a.numel(); ++i) {
        out.at(i) = a.at(i) > 0.0 ? a.at(i) : 0.0;
    }
    count_fmas(a.numel());
    return out;
}

Tensor relu_mask(const Tensor& a) {
    Tensor out(a.shape());
    for (std::int64_t i = 0; i < a.numel(); ++i) {
        out.at(i) = a.at(i) > 0.0 ? 1.0 : 0.0;
    }
    count_fmas(a.numel());
    return out;
}

Tensor neg(const Tensor& a) { return scale(a, -1.0); }

Tensor reshape(const Tensor& a, const Shape& target) {
    if (target.numel() != a.numel()) {
        throw DimensionError("reshape from " + a.shape().str() + " to " + target.str() +
                             " changes element count");
    }
    return Tensor(target, a.values());
}

Tensor transpose(const Tensor& a, const std::vector<int>& perm) {
    if (perm.size() != a.shape().rank()) {
        throw DimensionError("transpose permutation rank mismatch for " + a.shape().str());
    }
    std::vector<bool> seen(perm.size(), false);
    std::vector<std::int64_t> out_dims(perm.size());
    for (std::size_t i = 0; i < perm.size(); ++i) {
        if (perm[i] < 0 || perm[i] >= static_cast<int>(perm.size()) || seen[perm[i]]) {
            throw DimensionError("transpose permutation invalid for " + a.shape().str());
        }
        seen[perm[i]] = true;
        out_dims[i] = a.shape().dim(perm[i]);
    }
    Shape out_shape(out_dims);
    Tensor out(out_shape);
    const auto in_strides = row_major_strides(a.shape());
    const std::size_t rank = perm.size();
    std::vector<std::int64_t> idx(rank, 0);
    std::int64_t src = 0;
    const std::int64_t n = out_shape.numel();
    for (std::int64_t flat = 0; flat < n; ++flat) {
        out.at(flat) = a.at(src);
        for (std::size_t d = rank; d-- > 0;) {
            ++idx[d];
            src += in_strides[perm[d]];
            if (idx[d] < out_shape.dim(d)) {
                break;
            }
            idx[d] = 0;
            src -= in_strides[perm[d]] * out_shape.dim(d);
        }
    }
    return out;
}

Tensor broadcast_in_dim(const Tensor& a, const Shape& target, const std::vector<int>& dim_map) {
    if (dim_map.size() != a.shape().rank()) {
        throw DimensionError("broadcast_in_dim map rank mismatch for " + a.shape().str());
    }
    for (std::size_t i = 0; i < dim_map.size(); ++i) {
        if (dim_map[i] < 0 || dim_map[i] >= static_cast<int>(target.rank()) ||
            (i > 0 && dim_map[i] <= dim_map[i - 1])) {
            throw DimensionError("broadcast_in_dim map invalid for target " + target.str());
        }
        if (target.dim(dim_map[i]) != a.shape().dim(i)) {
            throw DimensionError("broadcast_in_dim extent mismatch: " + a.shape().str() + " into " +
                                 target.str());
        }
    }
    Tensor out(target);
    const auto in_strides = row_major_strides(a.shape());
    std::vector<std::int64_t> strides(target.rank(), 0);
    for (std::size_t i = 0; i < dim_map.size(); ++i) {
        strides[dim_map[i]] = in_strides[i];
    }
    const std::size_t rank = target.rank();
    std::vector<std::int64_t> idx(rank, 0);
    std::int64_t src = 0;
    const std::int64_t n = target.numel();
    for (std::int64_t flat = 0; flat < n; ++flat) {
        out.at(flat) = a.at(src);
        for (std::size_t d = rank; d-- > 0;) {
            ++idx[d];
            src += strides[d];
            if (idx[d] < target.dim(d)) {
                break;
            }
            idx[d] = 0;
            src -= strides[d] * target.dim(d);
        }
    }
    return out;
}

Tensor reduce_sum(const Tensor& a, const std::vector<int>& axes) {
    std::vector<bool> reduce(a.shape().rank(), false);
    for (int ax : axes) {
        if (ax < 0 || ax >= static_cast<int>(a.shape().rank()) || reduce[ax]) {
            throw DimensionError("reduce_sum axis invalid for " + a.shape().str());
        }
        reduce[ax] = true;
    }
    std::vector<std::int64_t> out_dims;
    for (std::size_t i = 0; i < a.shape().rank(); ++i) {
        if (!reduce[i]) {
            out_dims.push_back(a.shape().dim(i));
        }
    }
    Shape out_shape(out_dims);
    Tensor out(out_shape);
    const auto out_strides = row_major_strides(out_shape);
    const std::size_t rank = a.shape().rank();
    std::vector<std::int64_t> idx(rank, 0);
    std::int64_t dst = 0;
    std::vector<std::int64_t> dst_strides(rank, 0);
    {
        std::size_t k = 0;
        for (std::size_t i = 0; i < rank; ++i) {
            if (!reduce[i]) {
                dst_strides[i] = out_strides[k++];
            }
        }
    }
    const std::int64_t n = a.numel();
    for (std::int64_t flat = 0; flat < n; ++flat) {
        out.at(dst) += a.at(flat);
        for (std::size_t d = rank; d-- > 0;) {
            ++idx[d];
            dst += dst_strides[d];
            if (idx[d] < a.shape().dim(d)) {
                break;
            }
            idx[d] = 0;
            dst -= dst_strides[d] * a.shape().dim(d);
        }
    }
    count_fmas(n);
    return out;
}

Tensor global_avg_pool(const Tensor& a) {
    if (a.shape().rank() != 3) {
        throw DimensionError("global_avg_pool expects rank 3, got " + a.shape().str());
    }
    const std::int64_t dh = a.shape().dim(0), dw = a.shape().dim(1), c = a.shape().dim(2);
    Tensor out(Shape{c, 1});
    for (std::int64_t s = 0; s < dh * dw; ++s) {
        for (std::int64_t ch = 0; ch < c; ++ch) {
            out.at(ch) += a.at(s * c + ch);
        }
    }
    const double inv = 1.0 / static_cast<double>(dh * dw);
    for (std::int64_t ch = 0; ch < c; ++ch) {
        out.at(ch) *= inv;
    }
    count_fmas(a.numel());
    return out;
}

double dot(const Tensor& a, const Tensor& b) {
    if (a.numel() != b.numel()) {
        throw DimensionError("dot element count mismatch: " + a.shape().str() + " vs " +
                             b.shape().str());
    }
    double s = 0.0;
    for (std::int64_t i = 0; i < a.numel(); ++i) {
        s += a.at(i) * b.at(i);
    }
    return s;
}

double frobenius_norm(const Tensor& a) {
    double s = 0.0;
    for (std::int64_t i = 0; i < a.numel(); ++i) {
        s += a.at(i) * a.at(i);
    }
    return std::sqrt(s);
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    if (a.numel() != b.numel()) {
        throw DimensionError("shape mismatch: " + a.shape().str() + " vs " + b.shape().str());
    }
    double m = 0.0;
    for (std::int64_t i = 0; i < a.numel(); ++i) {
        m = std::max(m, std::abs(a.at(i) - b.at(i)));
    }
    return m;
}

double rel_frobenius_diff(const Tensor& a, const Tensor& b) {
    if (a.numel() != b.numel()) {
        throw DimensionError("shape mismatch: " + a.shape().str() + " vs " + b.shape().str());
    }
    double num = 0.0, den = 0.0;
    for (std::int64_t i = 0; i < a.numel(); ++i) {
        const double d = a.at(i) - b.at(i);
        num += d * d;
        den += std::max(a.at(i) * a.at(i), b.at(i) * b.at(i));
    }
    if (den == 0.0) {
        return std::sqrt(num);
    }
    return std::sqrt(num / den);
}

}  // namespace ntk
