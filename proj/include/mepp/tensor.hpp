#ifndef MEPP_TENSOR_HPP
#define MEPP_TENSOR_HPP

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace mepp {

// Dense n-dimensional array of doubles in row-major order, with an optional
// gradient buffer of the same length. All numeric state in the project flows
// through this type.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::vector<std::size_t> shape);
    Tensor(std::vector<std::size_t> shape, std::vector<double> data);

    static Tensor zeros(std::vector<std::size_t> shape) { return Tensor(std::move(shape)); }
    static Tensor scalar(double v) { return Tensor({1}, {v}); }

    const std::vector<std::size_t>& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t dim(std::size_t i) const { return shape_[i]; }
    std::size_t numel() const { return data_.size(); }
    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    std::span<double> values() { return data_; }
    std::span<const double> values() const { return data_; }

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    bool has_grad() const { return !grad_.empty(); }
    double* grad() { return grad_.data(); }
    const double* grad() const { return grad_.data(); }
    std::span<double> grad_values() { return grad_; }
    std::span<const double> grad_values() const { return grad_; }

    // Allocates (if needed) and zeroes the gradient buffer.
    void reset_grad();
    void drop_grad() { grad_.clear(); grad_.shrink_to_fit(); }

    // Reshapes in place to a new shape with identical element count.
    void reshape(std::vector<std::size_t> shape);
    // Resizes the buffer, discarding contents; grad is dropped.
    void resize(const std::vector<std::size_t>& shape);

    bool all_finite() const;

    std::string shape_str() const;

private:
    std::vector<std::size_t> shape_;
    std::vector<double> data_;
    std::vector<double> grad_;
};

std::size_t shape_numel(const std::vector<std::size_t>& shape);

} // namespace mepp

#endif
