#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace emolora {

// Dense row-major float tensor. Rank is arbitrary but almost everything in
// the model is a [rows x cols] matrix.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::vector<std::size_t> shape);
    Tensor(std::vector<std::size_t> shape, std::vector<float> data);

    static Tensor zeros(std::vector<std::size_t> shape) { return Tensor(std::move(shape)); }
    static Tensor matrix(std::size_t rows, std::size_t cols, std::initializer_list<float> values);

    const std::vector<std::size_t>& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    // Matrix view helpers. A rank-1 tensor is treated as a single row.
    std::size_t rows() const;
    std::size_t cols() const;

    float& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
    float at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }
    float& operator[](std::size_t i) { return data_[i]; }
    float operator[](std::size_t i) const { return data_[i]; }

    std::span<float> row(std::size_t r) { return {data_.data() + r * cols(), cols()}; }
    std::span<const float> row(std::size_t r) const { return {data_.data() + r * cols(), cols()}; }

    std::vector<float>& data() { return data_; }
    const std::vector<float>& data() const { return data_; }

    void fill(float v);
    // Same data, new shape with the same element count.
    Tensor reshaped(std::vector<std::size_t> shape) const;

    // Bitwise equality, including shape.
    bool bitwise_equal(const Tensor& other) const;

    std::string shape_string() const;

private:
    std::vector<std::size_t> shape_;
    std::vector<float> data_;
};

std::string shape_string(const std::vector<std::size_t>& shape);

// Largest absolute elementwise difference; shapes must match.
double max_abs_diff(const Tensor& a, const Tensor& b);

bool all_finite(const Tensor& t);

struct Param {
    Tensor value;
    Tensor grad;
    bool trainable = true;

    Param() = default;
    explicit Param(Tensor v, bool is_trainable = true);

    void zero_grad() { grad.fill(0.0f); }
    std::size_t size() const { return value.size(); }
};

} // namespace emolora
