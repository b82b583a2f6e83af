#include "mepp/tensor.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace mepp {

std::size_t shape_numel(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return n;
}

static void check_shape(const std::vector<std::size_t>& shape) {
    for (std::size_t d : shape) {
        if (d == 0) throw std::invalid_argument("tensor shape has a zero extent");
    }
}

Tensor::Tensor(std::vector<std::size_t> shape) : shape_(std::move(shape)) {
    check_shape(shape_);
    data_.assign(shape_numel(shape_), 0.0);
}

Tensor::Tensor(std::vector<std::size_t> shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
    check_shape(shape_);
    if (data_.size() != shape_numel(shape_)) {
        throw std::invalid_argument("tensor data length " + std::to_string(data_.size()) +
                                    " does not match shape " + shape_str());
    }
}

void Tensor::reset_grad() {
    grad_.assign(data_.size(), 0.0);
}

void Tensor::reshape(std::vector<std::size_t> shape) {
    check_shape(shape);
    if (shape_numel(shape) != data_.size()) {
        throw std::invalid_argument("reshape changes element count");
    }
    shape_ = std::move(shape);
}

void Tensor::resize(const std::vector<std::size_t>& shape) {
    check_shape(shape);
    shape_ = shape;
    data_.assign(shape_numel(shape), 0.0);
    grad_.clear();
}

bool Tensor::all_finite() const {
    for (double v : data_) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

std::string Tensor::shape_str() const {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape_.size(); ++i) {
        if (i) os << 'x';
        os << shape_[i];
    }
    os << ']';
    return os.str();
}

} // namespace mepp
