#include "fec/tensor.hpp"

#include <sstream>

namespace fec {

template <typename T>
std::int64_t shape_numel(const std::vector<std::int64_t>& s) {
    std::int64_t n = 1;
    for (auto e : s) n *= e;
    return n;
}

std::string shape_to_str(const std::vector<std::int64_t>& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) os << "x";
        os << s[i];
    }
    os << "]";
    return os.str();
}

template <typename T>
Tensor<T>::Tensor(std::vector<std::int64_t> s, std::vector<T> d)
    : shape(std::move(s)), data(std::move(d)) {
    if (shape_numel<T>(shape) != static_cast<std::int64_t>(data.size())) {
        throw ShapeError("tensor: " + std::to_string(data.size()) + " values do not fill shape " +
                         shape_to_str(shape));
    }
}

template <typename T>
Tensor<T> Tensor<T>::zeros(std::vector<std::int64_t> s) {
    Tensor t;
    t.shape = std::move(s);
    t.data.assign(static_cast<std::size_t>(shape_numel<T>(t.shape)), T(0));
    return t;
}

template <typename T>
Tensor<T> Tensor<T>::full(std::vector<std::int64_t> s, T v) {
    Tensor t = zeros(std::move(s));
    t.fill(v);
    return t;
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T v) {
    return Tensor({1}, {v});
}

template <typename T>
std::int64_t Tensor<T>::numel() const {
    return shape_numel<T>(shape);
}

template <typename T>
void Tensor<T>::fill(T v) {
    std::fill(data.begin(), data.end(), v);
}

template <typename T>
bool Tensor<T>::has_nan() const {
    for (T v : data) {
        if (std::isnan(static_cast<double>(v))) return true;
    }
    return false;
}

template <typename T>
std::string Tensor<T>::shape_str() const {
    return shape_to_str(shape);
}

template <typename T>
void fill_uniform(Tensor<T>& t, Rng& rng, double lo, double hi) {
    for (auto& v : t.data) v = static_cast<T>(rng.uniform(lo, hi));
}

template <typename T>
void fill_normal(Tensor<T>& t, Rng& rng, double stddev) {
    for (auto& v : t.data) v = static_cast<T>(rng.normal() * stddev);
}

template <typename T>
void fill_kaiming(Tensor<T>& t, Rng& rng, std::int64_t fan_in) {
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    fill_uniform(t, rng, -bound, bound);
}

template struct Tensor<float>;
template struct Tensor<double>;
template std::int64_t shape_numel<float>(const std::vector<std::int64_t>&);
template std::int64_t shape_numel<double>(const std::vector<std::int64_t>&);
template void fill_uniform<float>(Tensor<float>&, Rng&, double, double);
template void fill_uniform<double>(Tensor<double>&, Rng&, double, double);
template void fill_normal<float>(Tensor<float>&, Rng&, double);
template void fill_normal<double>(Tensor<double>&, Rng&, double);
template void fill_kaiming<float>(Tensor<float>&, Rng&, std::int64_t);
template void fill_kaiming<double>(Tensor<double>&, Rng&, std::int64_t);

}  // namespace fec
