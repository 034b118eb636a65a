#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace coarseem {

using Shape = std::vector<std::int64_t>;

inline std::int64_t shape_numel(const Shape& s) {
    std::int64_t n = 1;
    for (std::int64_t d : s) {
        if (d <= 0) throw std::invalid_argument("tensor extents must be positive");
        n *= d;
    }
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "(";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ")";
    return os.str();
}

namespace detail {

struct TensorData {
    Shape shape;
    std::vector<double> value;   // row-major
    std::vector<double> grad;    // empty until backward touches it
    bool requires_grad = false;

    std::int64_t numel() const { return static_cast<std::int64_t>(value.size()); }

    void ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
    }
};

}  // namespace detail

class Tape;

namespace detail {
inline thread_local std::vector<Tape*> tape_stack;
inline thread_local int nograd_depth = 0;
}  // namespace detail

// Dense 64-bit real tensor with value semantics over a shared buffer.
// Copying a Tensor aliases the underlying storage; use detach() for an
// independent constant copy.
class Tensor {
  public:
    Tensor() = default;

    explicit Tensor(Shape shape, double fill = 0.0, bool requires_grad = false)
        : d_(std::make_shared<detail::TensorData>()) {
        d_->shape = std::move(shape);
        d_->value.assign(static_cast<std::size_t>(shape_numel(d_->shape)), fill);
        d_->requires_grad = requires_grad;
    }

    static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false) {
        if (shape_numel(shape) != static_cast<std::int64_t>(data.size()))
            throw std::invalid_argument("from_data: shape " + shape_str(shape) +
                                        " does not match data length " + std::to_string(data.size()));
        Tensor t;
        t.d_ = std::make_shared<detail::TensorData>();
        t.d_->shape = std::move(shape);
        t.d_->value = std::move(data);
        t.d_->requires_grad = requires_grad;
        return t;
    }

    static Tensor scalar(double v) { return from_data({1}, {v}); }

    bool defined() const { return static_cast<bool>(d_); }

    const Shape& shape() const { return d_->shape; }
    std::int64_t numel() const { return d_->numel(); }
    std::int64_t dim(std::size_t i) const { return d_->shape.at(i); }
    std::size_t ndim() const { return d_->shape.size(); }

    bool requires_grad() const { return d_->requires_grad; }
    void set_requires_grad(bool b) { d_->requires_grad = b; }

    std::vector<double>& values() { return d_->value; }
    const std::vector<double>& values() const { return d_->value; }

    // Present (same size as value) only after a backward pass reached this tensor.
    std::vector<double>& grad() { return d_->grad; }
    const std::vector<double>& grad() const { return d_->grad; }
    bool has_grad() const { return d_->grad.size() == d_->value.size(); }
    void zero_grad() { d_->grad.assign(d_->value.size(), 0.0); }

    double item() const {
        if (numel() != 1) throw std::invalid_argument("item(): tensor is not scalar");
        return d_->value[0];
    }

    std::int64_t flat_index(std::initializer_list<std::int64_t> idx) const {
        if (idx.size() != d_->shape.size())
            throw std::invalid_argument("index rank mismatch");
        std::int64_t flat = 0;
        std::size_t k = 0;
        for (std::int64_t i : idx) {
            if (i < 0 || i >= d_->shape[k]) throw std::out_of_range("tensor index out of range");
            flat = flat * d_->shape[k] + i;
            ++k;
        }
        return flat;
    }

    double at(std::initializer_list<std::int64_t> idx) const { return d_->value[flat_index(idx)]; }
    double& at_ref(std::initializer_list<std::int64_t> idx) { return d_->value[flat_index(idx)]; }

    void fill(double v) { std::fill(d_->value.begin(), d_->value.end(), v); }

    // Independent copy with no grad tracking; used for constant targets.
    Tensor detach() const {
        Tensor t;
        t.d_ = std::make_shared<detail::TensorData>();
        t.d_->shape = d_->shape;
        t.d_->value = d_->value;
        t.d_->requires_grad = false;
        return t;
    }

    const std::shared_ptr<detail::TensorData>& impl() const { return d_; }

  private:
    std::shared_ptr<detail::TensorData> d_;
};

// Computation record for one forward pass. Ops executed while a Tape is
// active append their backward closures in execution order; backward()
// replays them once in reverse. Single-use by contract.
class Tape {
  public:
    Tape() { detail::tape_stack.push_back(this); }

    ~Tape() {
        for (auto it = detail::tape_stack.rbegin(); it != detail::tape_stack.rend(); ++it) {
            if (*it == this) {
                detail::tape_stack.erase(std::next(it).base());
                break;
            }
        }
    }

    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    static Tape* active() {
        if (detail::nograd_depth > 0 || detail::tape_stack.empty()) return nullptr;
        return detail::tape_stack.back();
    }

    void record(std::function<void()> fn) { nodes_.push_back(std::move(fn)); }

    std::size_t size() const { return nodes_.size(); }
    bool used() const { return used_; }

    void backward(const Tensor& loss) {
        if (!loss.defined() || loss.numel() != 1)
            throw std::invalid_argument("backward: loss must be a defined scalar");
        if (used_) throw std::logic_error("backward: record already consumed");
        used_ = true;
        loss.impl()->ensure_grad();
        loss.impl()->grad[0] = 1.0;
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
    }

  private:
    std::vector<std::function<void()>> nodes_;
    bool used_ = false;
};

// Suspends recording for its scope; forwards run as plain evaluation.
struct NoGrad {
    NoGrad() { ++detail::nograd_depth; }
    ~NoGrad() { --detail::nograd_depth; }
    NoGrad(const NoGrad&) = delete;
    NoGrad& operator=(const NoGrad&) = delete;
};

}  // namespace coarseem
