#include "anchorfuse/tensor.hpp"

#include "anchorfuse/error.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <numeric>
#include <sstream>

namespace anchorfuse {

namespace {

std::size_t element_count(const std::vector<std::size_t>& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

} // namespace

Tensor::Tensor(std::vector<std::size_t> shape, double fill)
    : m_shape(std::move(shape)), m_values(element_count(m_shape), fill) {}

Tensor::Tensor(std::vector<std::size_t> shape, std::vector<double> values)
    : m_shape(std::move(shape)), m_values(std::move(values)) {
    if (element_count(m_shape) != m_values.size()) {
        fail(ErrorCategory::shape_mismatch, "tensor shape " + anchorfuse::shape_string(m_shape) + " does not hold " +
                                                std::to_string(m_values.size()) + " values");
    }
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, double fill) { return Tensor({rows, cols}, fill); }

Tensor Tensor::row(std::vector<double> values) {
    const std::size_t n = values.size();
    return Tensor({1, n}, std::move(values));
}

Tensor Tensor::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r == 0 ? 0 : rows.begin()->size();
    std::vector<double> values;
    values.reserve(r * c);
    for (const auto& row : rows) {
        if (row.size() != c) {
            fail(ErrorCategory::shape_mismatch, "ragged rows in Tensor::from_rows");
        }
        values.insert(values.end(), row.begin(), row.end());
    }
    return Tensor({r, c}, std::move(values));
}

Tensor Tensor::identity(std::size_t n) {
    Tensor t = matrix(n, n);
    for (std::size_t i = 0; i < n; ++i) {
        t(i, i) = 1.0;
    }
    return t;
}

Tensor Tensor::scalar(double value) { return Tensor({1, 1}, std::vector<double>{value}); }

std::size_t Tensor::rows() const noexcept {
    if (m_shape.size() >= 2) {
        return m_shape[0];
    }
    return 1;
}

std::size_t Tensor::cols() const noexcept {
    if (m_shape.size() >= 2) {
        return m_shape[1];
    }
    if (m_shape.size() == 1) {
        return m_shape[0];
    }
    return 1;
}

bool Tensor::all_finite() const noexcept {
    return std::all_of(m_values.begin(), m_values.end(), [](double v) { return std::isfinite(v); });
}

void Tensor::fill(double value) noexcept { std::fill(m_values.begin(), m_values.end(), value); }

std::string Tensor::shape_string() const { return anchorfuse::shape_string(m_shape); }

std::string shape_string(const std::vector<std::size_t>& shape) {
    std::ostringstream out;
    out << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        out << (i ? "x" : "") << shape[i];
    }
    out << ']';
    return out.str();
}

namespace kernels {

namespace {

constexpr std::size_t kRowBlock = 4;
constexpr std::size_t kColBlock = 8;

typedef double v4d __attribute__((vector_size(32)));

inline v4d load4(const double* p) {
    v4d v;
    std::memcpy(&v, p, sizeof v);
    return v;
}

inline void store4(double* p, v4d v) { std::memcpy(p, &v, sizeof v); }

// 4 x 8 tile of c at (i0, j0), accumulators held in registers.
inline void tile4x8(std::size_t k, std::size_t m, const double* a, const double* b, double* c, std::size_t i0,
                    std::size_t j0, bool accumulate) {
    v4d acc[4][2];
    for (std::size_t r = 0; r < 4; ++r) {
        double* cr = c + (i0 + r) * m + j0;
        acc[r][0] = accumulate ? load4(cr) : v4d{0, 0, 0, 0};
        acc[r][1] = accumulate ? load4(cr + 4) : v4d{0, 0, 0, 0};
    }
    const double* a0 = a + i0 * k;
    for (std::size_t p = 0; p < k; ++p) {
        const v4d b0 = load4(b + p * m + j0);
        const v4d b1 = load4(b + p * m + j0 + 4);
        for (std::size_t r = 0; r < 4; ++r) {
            const double ar = a0[r * k + p];
            acc[r][0] += ar * b0;
            acc[r][1] += ar * b1;
        }
    }
    for (std::size_t r = 0; r < 4; ++r) {
        double* cr = c + (i0 + r) * m + j0;
        store4(cr, acc[r][0]);
        store4(cr + 4, acc[r][1]);
    }
}

// Edge rows/columns.
inline void tile_scalar(std::size_t k, std::size_t m, const double* a, const double* b, double* c, std::size_t i0,
                        std::size_t rows, std::size_t j0, std::size_t cols, bool accumulate) {
    for (std::size_t r = i0; r < i0 + rows; ++r) {
        double* cr = c + r * m;
        if (!accumulate) std::fill(cr + j0, cr + j0 + cols, 0.0);
        const double* ar = a + r * k;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = ar[p];
            const double* bp = b + p * m;
            for (std::size_t j = j0; j < j0 + cols; ++j) cr[j] += av * bp[j];
        }
    }
}

// Row-major transpose of src[rows x cols] into a reusable buffer.
const double* transposed(const double* src, std::size_t rows, std::size_t cols, std::vector<double>& buffer) {
    buffer.resize(rows * cols);
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c) buffer[c * rows + r] = src[r * cols + c];
    }
    return buffer.data();
}

} // namespace

void gemm_nn(std::size_t n, std::size_t k, std::size_t m, const double* a, const double* b, double* c,
             bool accumulate) {
    const std::size_t n4 = n - n % kRowBlock;
    const std::size_t m8 = m - m % kColBlock;
    for (std::size_t i0 = 0; i0 < n4; i0 += kRowBlock) {
        for (std::size_t j0 = 0; j0 < m8; j0 += kColBlock) tile4x8(k, m, a, b, c, i0, j0, accumulate);
        if (m8 < m) tile_scalar(k, m, a, b, c, i0, kRowBlock, m8, m - m8, accumulate);
    }
    if (n4 < n) tile_scalar(k, m, a, b, c, n4, n - n4, 0, m, accumulate);
}

void gemm_nt(std::size_t n, std::size_t k, std::size_t m, const double* a, const double* b, double* c,
             bool accumulate) {
    thread_local std::vector<double> bt;
    gemm_nn(n, k, m, a, transposed(b, m, k, bt), c, accumulate);
}

void gemm_tn(std::size_t n, std::size_t k, std::size_t m, const double* a, const double* b, double* c,
             bool accumulate) {
    thread_local std::vector<double> at;
    gemm_nn(k, n, m, transposed(a, n, k, at), b, c, accumulate);
}

double dot(std::span<const double> a, std::span<const double> b) {
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        acc += a[i] * b[i];
    }
    return acc;
}

double norm2(std::span<const double> a) { return std::sqrt(dot(a, a)); }

} // namespace kernels

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.cols() != b.rows()) {
        fail(ErrorCategory::shape_mismatch,
             "matmul inner dimensions disagree: " + a.shape_string() + " x " + b.shape_string());
    }
    Tensor out = Tensor::matrix(a.rows(), b.cols());
    kernels::gemm_nn(a.rows(), a.cols(), b.cols(), a.data(), b.data(), out.data(), false);
    return out;
}

Tensor transpose(const Tensor& a) {
    Tensor out = Tensor::matrix(a.cols(), a.rows());
    for (std::size_t r = 0; r < a.rows(); ++r) {
        for (std::size_t c = 0; c < a.cols(); ++c) {
            out(c, r) = a(r, c);
        }
    }
    return out;
}

Tensor concat_rows(std::span<const Tensor> parts) {
    if (parts.empty()) {
        return Tensor::matrix(0, 0);
    }
    const std::size_t cols = parts.front().cols();
    std::size_t rows = 0;
    for (const auto& p : parts) {
        if (p.cols() != cols) {
            fail(ErrorCategory::shape_mismatch, "concat_rows column mismatch: " + parts.front().shape_string() +
                                                    " vs " + p.shape_string());
        }
        rows += p.rows();
    }
    Tensor out = Tensor::matrix(rows, cols);
    std::size_t offset = 0;
    for (const auto& p : parts) {
        std::copy(p.data(), p.data() + p.size(), out.data() + offset);
        offset += p.size();
    }
    return out;
}

std::vector<double> softmax(std::span<const double> s, double temperature) {
    if (!(temperature > 0.0)) {
        fail(ErrorCategory::invalid_argument, "softmax temperature must be positive");
    }
    if (s.empty()) {
        return {};
    }
    const double mx = *std::max_element(s.begin(), s.end());
    std::vector<double> out(s.size());
    double total = 0.0;
    for (std::size_t i = 0; i < s.size(); ++i) {
        out[i] = std::exp((s[i] - mx) / temperature);
        total += out[i];
    }
    for (double& v : out) {
        v /= total;
    }
    return out;
}

Tensor l2_normalize(const Tensor& v, double min_norm) {
    const double norm = kernels::norm2(v.values());
    if (!(norm > min_norm)) {
        fail(ErrorCategory::numeric, "l2_normalize of near-zero vector (norm " + std::to_string(norm) + ")");
    }
    Tensor out = v;
    for (double& x : out.values()) {
        x /= norm;
    }
    return out;
}

} // namespace anchorfuse
