#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "fec/errors.hpp"
#include "fec/rng.hpp"

namespace fec {

/// Dense row-major tensor. Plain value type; autodiff lives on the Tape.
template <typename T>
struct Tensor {
    std::vector<std::int64_t> shape;
    std::vector<T> data;

    Tensor() = default;
    Tensor(std::vector<std::int64_t> s, std::vector<T> d);

    static Tensor zeros(std::vector<std::int64_t> s);
    static Tensor full(std::vector<std::int64_t> s, T v);
    static Tensor scalar(T v);

    std::int64_t numel() const;
    std::int64_t rank() const { return static_cast<std::int64_t>(shape.size()); }

    // 2-d accessors; only valid for rank-2 tensors.
    std::int64_t rows() const { return shape[0]; }
    std::int64_t cols() const { return shape[1]; }
    T& at(std::int64_t r, std::int64_t c) { return data[static_cast<std::size_t>(r * shape[1] + c)]; }
    const T& at(std::int64_t r, std::int64_t c) const {
        return data[static_cast<std::size_t>(r * shape[1] + c)];
    }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }
    bool is_scalar() const { return numel() == 1; }
    T scalar_value() const { return data[0]; }

    void fill(T v);
    bool has_nan() const;

    std::string shape_str() const;
};

std::string shape_to_str(const std::vector<std::int64_t>& s);

template <typename T>
std::int64_t shape_numel(const std::vector<std::int64_t>& s);

// Seeded fills used by parameter init and tests.
template <typename T>
void fill_uniform(Tensor<T>& t, Rng& rng, double lo, double hi);

template <typename T>
void fill_normal(Tensor<T>& t, Rng& rng, double stddev = 1.0);

// Kaiming-style uniform init: U(-sqrt(6/fan_in), +sqrt(6/fan_in)).
template <typename T>
void fill_kaiming(Tensor<T>& t, Rng& rng, std::int64_t fan_in);

/// Named model parameter with a persistent gradient accumulator.
template <typename T>
struct Param {
    std::string name;
    Tensor<T> value;
    Tensor<T> grad;
    bool trainable = true;
    bool weight_decay = false;  // decoupled decay applies to projection matrices only

    Param() = default;
    Param(std::string n, Tensor<T> v, bool decay = false)
        : name(std::move(n)), value(std::move(v)), grad(Tensor<T>::zeros(value.shape)),
          weight_decay(decay) {}

    void zero_grad() { grad.fill(T(0)); }
};

}  // namespace fec
