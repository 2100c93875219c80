#include "anchorfuse/registry.hpp"

#include "anchorfuse/error.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace anchorfuse {

Tensor& ParameterRegistry::add(const std::string& name, Tensor value, bool frozen) {
    auto [it, inserted] = m_entries.emplace(name, Entry{std::move(value), frozen});
    if (!inserted) {
        fail(ErrorCategory::invalid_argument, "duplicate parameter name '" + name + "'");
    }
    return it->second.value;
}

Tensor& ParameterRegistry::at(const std::string& name) {
    auto it = m_entries.find(name);
    if (it == m_entries.end()) {
        fail(ErrorCategory::invalid_argument, "unknown parameter '" + name + "'");
    }
    return it->second.value;
}

const Tensor& ParameterRegistry::at(const std::string& name) const {
    auto it = m_entries.find(name);
    if (it == m_entries.end()) {
        fail(ErrorCategory::invalid_argument, "unknown parameter '" + name + "'");
    }
    return it->second.value;
}

bool ParameterRegistry::frozen(const std::string& name) const {
    auto it = m_entries.find(name);
    if (it == m_entries.end()) {
        fail(ErrorCategory::invalid_argument, "unknown parameter '" + name + "'");
    }
    return it->second.frozen;
}

std::vector<std::string> ParameterRegistry::names() const {
    std::vector<std::string> out;
    out.reserve(m_entries.size());
    for (const auto& [name, entry] : m_entries) {
        out.push_back(name);
    }
    return out;
}

std::vector<std::string> ParameterRegistry::trainable_names() const {
    std::vector<std::string> out;
    for (const auto& [name, entry] : m_entries) {
        if (!entry.frozen) {
            out.push_back(name);
        }
    }
    return out;
}

std::size_t ParameterRegistry::parameter_count() const {
    std::size_t total = 0;
    for (const auto& [name, entry] : m_entries) {
        total += entry.value.size();
    }
    return total;
}

std::uint64_t ParameterRegistry::hash() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    auto mix = [&h](const void* data, std::size_t bytes) {
        const auto* p = static_cast<const unsigned char*>(data);
        for (std::size_t i = 0; i < bytes; ++i) {
            h ^= p[i];
            h *= 0x100000001b3ULL;
        }
    };
    for (const auto& [name, entry] : m_entries) {
        mix(name.data(), name.size());
        for (std::size_t dim : entry.value.shape()) {
            const auto d = static_cast<std::uint64_t>(dim);
            mix(&d, sizeof d);
        }
        mix(entry.value.data(), entry.value.size() * sizeof(double));
    }
    return h;
}

bool operator==(const ParameterRegistry::Entry& a, const ParameterRegistry::Entry& b) {
    return a.frozen == b.frozen && a.value == b.value;
}

bool operator==(const ParameterRegistry& a, const ParameterRegistry& b) { return a.m_entries == b.m_entries; }

Tensor finite_difference_grad(const std::function<double(const ParameterRegistry&)>& f,
                              const ParameterRegistry& registry, const std::string& name, double eps) {
    if (!(eps >= 1e-7 && eps <= 1e-4)) {
        fail(ErrorCategory::invalid_argument, "finite-difference step must lie in [1e-7, 1e-4]");
    }
    ParameterRegistry probe = registry;
    Tensor& theta = probe.at(name);
    Tensor grad(theta.shape(), 0.0);
    for (std::size_t i = 0; i < theta.size(); ++i) {
        const double original = theta[i];
        theta[i] = original + eps;
        const double plus = f(probe);
        theta[i] = original - eps;
        const double minus = f(probe);
        theta[i] = original;
        if (!std::isfinite(plus) || !std::isfinite(minus)) {
            fail(ErrorCategory::numeric, "non-finite objective while perturbing '" + name + "'[" +
                                             std::to_string(i) + "]");
        }
        grad[i] = (plus - minus) / (2.0 * eps);
    }
    return grad;
}

GradientComparison compare_gradients(const Tensor& analytic, const Tensor& numeric, double rel_tol,
                                     double abs_tol) {
    if (!analytic.same_shape(numeric)) {
        fail(ErrorCategory::shape_mismatch,
             "gradient shapes differ: " + analytic.shape_string() + " vs " + numeric.shape_string());
    }
    GradientComparison result;
    result.coordinates = analytic.size();
    for (std::size_t i = 0; i < analytic.size(); ++i) {
        const double diff = std::abs(analytic[i] - numeric[i]);
        const double denom = std::max(std::abs(analytic[i]), std::abs(numeric[i]));
        const double rel = denom > 0.0 ? diff / denom : 0.0;
        result.max_absolute_error = std::max(result.max_absolute_error, diff);
        if (denom > abs_tol) result.max_relative_error = std::max(result.max_relative_error, rel);
        if (diff > abs_tol && rel > rel_tol) ++result.failures;
    }
    return result;
}

} // namespace anchorfuse
