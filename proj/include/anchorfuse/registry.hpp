#pragma once

#include "anchorfuse/tensor.hpp"

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

namespace anchorfuse {

// Named tensors with a frozen/trainable flag. Iteration order is the sorted
// name order, which fixes the order of every reduction over parameters.
class ParameterRegistry {
public:
    struct Entry {
        Tensor value;
        bool frozen = false;
    };

    // Throws if `name` already exists.
    Tensor& add(const std::string& name, Tensor value, bool frozen);

    bool contains(const std::string& name) const { return m_entries.count(name) != 0; }
    Tensor& at(const std::string& name);
    const Tensor& at(const std::string& name) const;
    bool frozen(const std::string& name) const;

    std::vector<std::string> names() const;
    std::vector<std::string> trainable_names() const;
    std::size_t size() const noexcept { return m_entries.size(); }
    std::size_t parameter_count() const;

    const std::map<std::string, Entry>& entries() const noexcept { return m_entries; }

    // FNV-1a over names and raw value bytes.
    std::uint64_t hash() const;

    friend bool operator==(const ParameterRegistry& a, const ParameterRegistry& b);

private:
    std::map<std::string, Entry> m_entries;
};

bool operator==(const ParameterRegistry::Entry& a, const ParameterRegistry::Entry& b);

using GradientMap = std::map<std::string, Tensor>;

// Central-difference estimate of d f / d registry[name], one coordinate at a
// time: (f(theta + eps) - f(theta - eps)) / (2 eps).
Tensor finite_difference_grad(const std::function<double(const ParameterRegistry&)>& f,
                              const ParameterRegistry& registry, const std::string& name, double eps);

struct GradientComparison {
    double max_relative_error = 0.0;
    double max_absolute_error = 0.0;
    std::size_t coordinates = 0;
    std::size_t failures = 0;
};

// A coordinate passes when |a - n| <= abs_tol or |a - n| / max(|a|, |n|) <= rel_tol.
// max_relative_error covers the coordinates with max(|a|, |n|) > abs_tol.
GradientComparison compare_gradients(const Tensor& analytic, const Tensor& numeric, double rel_tol,
                                     double abs_tol);

} // namespace anchorfuse
