#pragma once

// Dense row-major tensors and the reverse-mode tape that records how they
// were produced.

#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace hft {

using Shape = std::vector<std::size_t>;

/// Raised when operand extents are inconsistent with an operation.
class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Raised when a primitive produces NaN or Inf.
class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline std::size_t shape_size(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '(';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ')';
    return os.str();
}

template <class T>
class Tape;

/// Immutable n-dimensional array. A tensor produced by a primitive whose
/// inputs live on a tape is itself recorded on that tape.
template <class T>
class Tensor {
public:
    using value_type = T;
    static constexpr std::size_t npos = std::numeric_limits<std::size_t>::max();

    Tensor() = default;

    explicit Tensor(Shape shape)
        : shape_(std::move(shape)), data_(std::make_shared<std::vector<T>>(shape_size(shape_))) {
        check_extents();
    }

    Tensor(Shape shape, std::vector<T> values)
        : shape_(std::move(shape)), data_(std::make_shared<std::vector<T>>(std::move(values))) {
        check_extents();
        if (data_->size() != shape_size(shape_))
            throw ShapeError("tensor: " + std::to_string(data_->size()) + " values for shape " +
                             shape_str(shape_));
    }

    static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

    static Tensor full(Shape shape, T value) {
        const std::size_t n = shape_size(shape);
        return Tensor(std::move(shape), std::vector<T>(n, value));
    }

    static Tensor scalar(T value) { return Tensor(Shape{}, std::vector<T>{value}); }

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t extent(std::size_t axis) const { return shape_.at(axis); }
    std::size_t size() const noexcept { return data_ ? data_->size() : 0; }
    bool empty() const noexcept { return size() == 0; }

    std::span<const T> values() const noexcept {
        return data_ ? std::span<const T>(*data_) : std::span<const T>();
    }
    const T* data() const noexcept { return data_ ? data_->data() : nullptr; }
    T operator[](std::size_t i) const { return (*data_)[i]; }

    T item() const {
        if (size() != 1) throw ShapeError("item: tensor of shape " + shape_str(shape_) + " is not a scalar");
        return (*data_)[0];
    }

    /// Writable view for tensors that are not on a tape (parameters between
    /// steps, freshly built inputs). Storage is shared with copies.
    std::span<T> mutable_values() {
        if (tracked()) throw std::logic_error("mutable_values: tensor is recorded on a tape");
        return data_ ? std::span<T>(*data_) : std::span<T>();
    }

    bool tracked() const noexcept { return tape_ != nullptr; }
    Tape<T>* tape() const noexcept { return tape_; }
    std::size_t node() const noexcept { return node_; }

    /// Untracked handle on the same storage.
    Tensor detach() const {
        Tensor out;
        out.shape_ = shape_;
        out.data_ = data_;
        return out;
    }

    /// Deep copy, untracked.
    Tensor clone() const {
        return data_ ? Tensor(shape_, *data_) : Tensor();
    }

    template <class U>
    Tensor<U> cast() const {
        std::vector<U> out(size());
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<U>((*data_)[i]);
        return Tensor<U>(shape_, std::move(out));
    }

    bool same_storage(const Tensor& other) const noexcept { return data_ == other.data_; }

private:
    void check_extents() const {
        for (auto e : shape_)
            if (e == 0) throw ShapeError("tensor: zero extent in shape " + shape_str(shape_));
    }

    Shape shape_;
    std::shared_ptr<std::vector<T>> data_;
    Tape<T>* tape_ = nullptr;
    std::size_t node_ = npos;

    friend class Tape<T>;
};

/// Gradients produced by one backward pass, addressed by the tracked tensor
/// they belong to.
template <class T>
class Gradients {
public:
    Gradients() = default;
    Gradients(const Tape<T>* tape, std::vector<std::vector<T>> grads)
        : tape_(tape), grads_(std::move(grads)) {}

    /// Gradient with respect to `t`. Tensors the loss does not depend on get
    /// zeros.
    Tensor<T> of(const Tensor<T>& t) const {
        if (!t.tracked() || t.tape() != tape_)
            throw std::invalid_argument("gradients: tensor is not recorded on this tape");
        const auto& g = grads_.at(t.node());
        if (g.empty()) return Tensor<T>::zeros(t.shape());
        return Tensor<T>(t.shape(), g);
    }

    bool reached(const Tensor<T>& t) const {
        return t.tracked() && t.tape() == tape_ && !grads_.at(t.node()).empty();
    }

private:
    const Tape<T>* tape_ = nullptr;
    std::vector<std::vector<T>> grads_;
};

/// Ordered record of primitive applications. Records are appended in
/// creation order, which is a topological order of the computation.
///
/// A tape belongs to a single execution; tensors recorded on it hold a raw
/// pointer back to it, so it must outlive them and cannot be moved.
template <class T>
class Tape {
public:
    /// Receives the gradient flowing into the recorded output and
    /// accumulates into the parents' buffers via grad_buffer().
    using Adjoint = std::function<void(Tape&, std::span<const T>)>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    /// Registers `t` as a leaf (a parameter or input to differentiate
    /// against). The returned tensor shares storage with `t`.
    Tensor<T> watch(const Tensor<T>& t) {
        if (t.tracked()) throw std::logic_error("watch: tensor is already on a tape");
        Tensor<T> out = t.detach();
        attach(out, Adjoint{});
        return out;
    }

    Tensor<T> record(Tensor<T> out, Adjoint adjoint) {
        attach(out, std::move(adjoint));
        return out;
    }

    /// Gradient accumulator for a node, allocated (zeroed) on first use.
    std::span<T> grad_buffer(std::size_t node) {
        auto& g = grads_.at(node);
        if (g.empty()) g.assign(records_[node].size, T(0));
        return g;
    }

    std::size_t size() const noexcept { return records_.size(); }

    void clear() {
        records_.clear();
        grads_.clear();
    }

    Gradients<T> backward(const Tensor<T>& loss) {
        if (loss.size() != 1)
            throw ShapeError("backward: loss must be a scalar, got shape " + shape_str(loss.shape()));
        if (loss.tape() != this) throw std::invalid_argument("backward: loss is not recorded on this tape");
        grads_.assign(records_.size(), {});
        grad_buffer(loss.node())[0] = T(1);
        for (std::size_t i = loss.node() + 1; i-- > 0;) {
            if (grads_[i].empty() || !records_[i].adjoint) continue;
            records_[i].adjoint(*this, std::span<const T>(grads_[i]));
        }
        Gradients<T> out(this, std::move(grads_));
        grads_.assign(records_.size(), {});
        return out;
    }

private:
    struct Record {
        std::size_t size;
        Adjoint adjoint;
    };

    void attach(Tensor<T>& t, Adjoint adjoint) {
        t.tape_ = this;
        t.node_ = records_.size();
        records_.push_back({t.size(), std::move(adjoint)});
        grads_.emplace_back();
    }

    std::vector<Record> records_;
    std::vector<std::vector<T>> grads_;
};

/// Reverse sweep from a scalar loss.
template <class T>
Gradients<T> backward(Tape<T>& tape, const Tensor<T>& loss) {
    return tape.backward(loss);
}

namespace detail {

template <class T>
void ensure_finite(const char* op, const Tensor<T>& t) {
    for (T v : t.values())
        if (!std::isfinite(v)) throw NumericError(std::string(op) + ": non-finite value in output");
}

template <class T>
Tape<T>* common_tape(std::initializer_list<const Tensor<T>*> inputs) {
    Tape<T>* tape = nullptr;
    for (const auto* t : inputs) {
        if (!t || !t->tracked()) continue;
        if (tape && tape != t->tape()) throw std::invalid_argument("operands are recorded on different tapes");
        tape = t->tape();
    }
    return tape;
}

template <class T>
Tape<T>* common_tape(std::span<const Tensor<T>> inputs) {
    Tape<T>* tape = nullptr;
    for (const auto& t : inputs) {
        if (!t.tracked()) continue;
        if (tape && tape != t.tape()) throw std::invalid_argument("operands are recorded on different tapes");
        tape = t.tape();
    }
    return tape;
}

/// Finite check, then record on `tape` when one is present.
template <class T, class F>
Tensor<T> finish(const char* op, Tensor<T> out, Tape<T>* tape, F&& adjoint) {
    ensure_finite(op, out);
    if (!tape) return out;
    return tape->record(std::move(out), typename Tape<T>::Adjoint(std::forward<F>(adjoint)));
}

/// Calls fn(grad span of `input`) when `input` participates in differentiation.
template <class T, class F>
void accumulate(Tape<T>& tape, const Tensor<T>& input, F&& fn) {
    if (input.tracked()) fn(tape.grad_buffer(input.node()));
}

}  // namespace detail
}  // namespace hft
