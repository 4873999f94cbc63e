#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace cbdiff {

using Shape = std::vector<int>;

int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

// Dense row-major tensor. Layout convention throughout the project is
// channels-last: images and feature maps are (H,W,C) or (B,H,W,C),
// matrices are (rows,cols).
template <class T>
class Tensor {
  public:
    Tensor() = default;
    explicit Tensor(Shape shape) : shape_(std::move(shape)), data_(shape_numel(shape_), T(0)) {}
    Tensor(Shape shape, std::vector<T> data);

    static Tensor full(Shape shape, T value);
    static Tensor scalar(T value) { return full({1}, value); }

    const Shape& shape() const { return shape_; }
    int dim(int i) const { return shape_[static_cast<size_t>(i)]; }
    int rank() const { return static_cast<int>(shape_.size()); }
    int64_t size() const { return static_cast<int64_t>(data_.size()); }
    bool empty() const { return data_.empty(); }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }
    T& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
    const T& operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

    std::vector<T>& vec() { return data_; }
    const std::vector<T>& vec() const { return data_; }

    template <class U>
    Tensor<U> cast() const {
        Tensor<U> out(shape_);
        for (int64_t i = 0; i < size(); ++i) out[i] = static_cast<U>(data_[static_cast<size_t>(i)]);
        return out;
    }

  private:
    Shape shape_;
    std::vector<T> data_;
};

// Throws if any element is NaN/Inf; `op` names the producing operation.
template <class T>
void ensure_finite(const Tensor<T>& t, const char* op);

void check_shapes_match(const Shape& a, const Shape& b, const char* op);

using Tensor32 = Tensor<float>;
using Tensor64 = Tensor<double>;

}  // namespace cbdiff
