#include "cbdiff/tensor.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace cbdiff {

int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int d : s) {
        if (d < 0) throw std::runtime_error("negative dimension in shape " + shape_str(s));
        n *= d;
    }
    return n;
}

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "(";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ")";
    return os.str();
}

void check_shapes_match(const Shape& a, const Shape& b, const char* op) {
    if (a != b)
        throw std::runtime_error(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

template <class T>
Tensor<T>::Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (shape_numel(shape_) != static_cast<int64_t>(data_.size()))
        throw std::runtime_error("tensor: shape " + shape_str(shape_) + " does not match data length " +
                                 std::to_string(data_.size()));
}

template <class T>
Tensor<T> Tensor<T>::full(Shape shape, T value) {
    Tensor<T> t(std::move(shape));
    for (auto& v : t.data_) v = value;
    return t;
}

template <class T>
void ensure_finite(const Tensor<T>& t, const char* op) {
    const T* p = t.data();
    const int64_t n = t.size();
    bool ok = true;
#pragma omp parallel for schedule(static) reduction(&& : ok)
    for (int64_t i = 0; i < n; ++i) ok = ok && std::isfinite(static_cast<double>(p[i]));
    if (!ok) throw std::runtime_error(std::string(op) + ": non-finite value in result");
}

template class Tensor<float>;
template class Tensor<double>;
template class Tensor<uint8_t>;
template void ensure_finite<float>(const Tensor<float>&, const char*);
template void ensure_finite<double>(const Tensor<double>&, const char*);

}  // namespace cbdiff
