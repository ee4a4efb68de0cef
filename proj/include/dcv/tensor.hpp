#ifndef DCV_TENSOR_HPP
#define DCV_TENSOR_HPP

#include <Eigen/Core>

#include <cstdint>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace dcv {

using Index = std::int64_t;
using Shape = std::vector<Index>;

template <typename S>
using Buffer = Eigen::Array<S, Eigen::Dynamic, 1>;

template <typename S>
using RowMatrix = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename S>
using MatrixMap = Eigen::Map<RowMatrix<S>>;

template <typename S>
using ConstMatrixMap = Eigen::Map<const RowMatrix<S>>;

/// Thrown when array shapes or divisibility constraints are violated.
class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Thrown for invalid configuration values (AE, DiT, run configs).
class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Raised when a training loss becomes non-finite; carries the 1-based step.
class DivergenceError : public std::runtime_error {
public:
    DivergenceError(const std::string& what, long step) : std::runtime_error(what), step_(step) {}
    long step() const { return step_; }

private:
    long step_;
};

inline Index numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ", ";
        os << shape[i];
    }
    os << ']';
    return os.str();
}

/// Dense row-major n-d array. Storage is a flat Eigen array so that
/// elementwise math composes as Eigen expressions.
template <typename S>
struct Tensor {
    Shape shape;
    Buffer<S> data;

    Tensor() = default;
    explicit Tensor(Shape s) : shape(std::move(s)), data(Buffer<S>::Zero(dcv::numel(shape))) {}
    Tensor(Shape s, Buffer<S> d) : shape(std::move(s)), data(std::move(d)) {
        if (data.size() != dcv::numel(shape))
            throw ShapeError("tensor data size " + std::to_string(data.size()) + " does not match shape " +
                             shape_str(shape));
    }

    static Tensor constant(Shape s, S value) {
        Tensor t(std::move(s));
        t.data.setConstant(value);
        return t;
    }

    Index numel() const { return data.size(); }
    Index dim(std::size_t i) const { return shape.at(i); }
    std::size_t rank() const { return shape.size(); }
    S* ptr() { return data.data(); }
    const S* ptr() const { return data.data(); }

    template <typename T>
    Tensor<T> cast() const {
        return Tensor<T>(shape, data.template cast<T>());
    }
};

template <typename S>
bool bitwise_equal(const Tensor<S>& a, const Tensor<S>& b) {
    if (a.shape != b.shape) return false;
    for (Index i = 0; i < a.numel(); ++i)
        if (!(a.data[i] == b.data[i])) return false;
    return true;
}

}  // namespace dcv

#endif  // DCV_TENSOR_HPP
