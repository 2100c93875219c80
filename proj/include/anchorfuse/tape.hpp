#pragma once

#include "anchorfuse/tensor.hpp"

#include <cstddef>
#include <deque>
#include <functional>
#include <initializer_list>
#include <span>
#include <vector>

namespace anchorfuse {

class Tape;

// Handle to a node on a Tape. Cheap to copy; only valid while the tape lives.
struct Var {
    Tape* tape = nullptr;
    std::size_t id = 0;

    bool valid() const noexcept { return tape != nullptr; }
    const Tensor& value() const;
    std::size_t rows() const { return value().rows(); }
    std::size_t cols() const { return value().cols(); }
    double item() const;
};

// Reverse-mode recording of a computation. Nodes are appended in evaluation
// order, so a reverse sweep visits every consumer before its inputs.
class Tape {
public:
    using Backward = std::function<void(Tape&, std::size_t)>;

    explicit Tape(bool grad_enabled = true) : m_grad_enabled(grad_enabled) {}
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    bool grad_enabled() const noexcept { return m_grad_enabled; }

    Var constant(Tensor value);
    // `value` must outlive the tape.
    Var constant_ref(const Tensor& value);
    // Tracked leaf whose value is read in place; `value` must outlive the tape.
    Var parameter(const Tensor& value);
    Var parameter_copy(Tensor value);

    const Tensor& value(Var v) const;
    bool requires_grad(Var v) const;
    bool has_grad(Var v) const;
    // Accumulated adjoint; a zero tensor of the right shape if nothing flowed in.
    Tensor grad(Var v) const;

    void backward(Var root);

    std::size_t size() const noexcept { return m_nodes.size(); }

    // Op-author interface.
    Var record(Tensor value, std::initializer_list<Var> inputs, Backward backward);
    Var record(Tensor value, std::span<const Var> inputs, Backward backward);
    // Adjoint buffer for `id`, zero-initialized on first use.
    Tensor& grad_buffer(std::size_t id);
    const Tensor& upstream(std::size_t id) const { return m_nodes[id].grad; }

private:
    struct Node {
        Tensor owned;
        const Tensor* ref = nullptr;
        Tensor grad;
        bool requires_grad = false;
        Backward backward;
    };

    Var push(Node node);

    bool m_grad_enabled;
    std::deque<Node> m_nodes;
};

inline const Tensor& Var::value() const { return tape->value(*this); }

} // namespace anchorfuse
