#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace anchorfuse {

// Dense row-major array of doubles. Vectors are stored as 1 x n matrices so
// every operation in the library can assume rank 2.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::vector<std::size_t> shape, double fill = 0.0);
    Tensor(std::vector<std::size_t> shape, std::vector<double> values);

    static Tensor matrix(std::size_t rows, std::size_t cols, double fill = 0.0);
    static Tensor row(std::vector<double> values);
    static Tensor from_rows(std::initializer_list<std::initializer_list<double>> rows);
    static Tensor identity(std::size_t n);
    static Tensor scalar(double value);

    const std::vector<std::size_t>& shape() const noexcept { return m_shape; }
    std::size_t rank() const noexcept { return m_shape.size(); }
    std::size_t size() const noexcept { return m_values.size(); }
    bool empty() const noexcept { return m_values.empty(); }

    std::size_t rows() const noexcept;
    std::size_t cols() const noexcept;

    double* data() noexcept { return m_values.data(); }
    const double* data() const noexcept { return m_values.data(); }
    std::span<double> values() noexcept { return m_values; }
    std::span<const double> values() const noexcept { return m_values; }
    std::vector<double>& storage() noexcept { return m_values; }

    double& operator[](std::size_t i) noexcept { return m_values[i]; }
    double operator[](std::size_t i) const noexcept { return m_values[i]; }
    double& operator()(std::size_t r, std::size_t c) noexcept { return m_values[r * cols() + c]; }
    double operator()(std::size_t r, std::size_t c) const noexcept { return m_values[r * cols() + c]; }

    std::span<double> row_span(std::size_t r) noexcept { return {m_values.data() + r * cols(), cols()}; }
    std::span<const double> row_span(std::size_t r) const noexcept {
        return {m_values.data() + r * cols(), cols()};
    }

    bool same_shape(const Tensor& other) const noexcept { return m_shape == other.m_shape; }
    bool all_finite() const noexcept;
    void fill(double value) noexcept;

    std::string shape_string() const;

    friend bool operator==(const Tensor& a, const Tensor& b) = default;

private:
    std::vector<std::size_t> m_shape;
    std::vector<double> m_values;
};

std::string shape_string(const std::vector<std::size_t>& shape);

// Plain (non-differentiable) helpers shared by the tape kernels and callers
// that only need values.
namespace kernels {

// c[n x m] (+)= a[n x k] * b[k x m]
void gemm_nn(std::size_t n, std::size_t k, std::size_t m, const double* a, const double* b, double* c,
             bool accumulate);
// c[n x m] (+)= a[n x k] * b[m x k]^T
void gemm_nt(std::size_t n, std::size_t k, std::size_t m, const double* a, const double* b, double* c,
             bool accumulate);
// c[k x m] (+)= a[n x k]^T * b[n x m]
void gemm_tn(std::size_t n, std::size_t k, std::size_t m, const double* a, const double* b, double* c,
             bool accumulate);

double dot(std::span<const double> a, std::span<const double> b);
double norm2(std::span<const double> a);

} // namespace kernels

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor concat_rows(std::span<const Tensor> parts);

// Max-subtracted softmax of s / temperature. Throws for temperature <= 0.
std::vector<double> softmax(std::span<const double> s, double temperature = 1.0);

// Unit-L2 copy of v; throws Error(numeric) when ||v|| <= min_norm.
Tensor l2_normalize(const Tensor& v, double min_norm = 1e-12);

} // namespace anchorfuse
