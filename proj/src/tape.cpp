#include "anchorfuse/tape.hpp"

#include "anchorfuse/error.hpp"

#include <algorithm>

namespace anchorfuse {

double Var::item() const {
    const Tensor& v = value();
    if (v.size() != 1) {
        fail(ErrorCategory::shape_mismatch, "item() on non-scalar " + v.shape_string());
    }
    return v[0];
}

Var Tape::push(Node node) {
    m_nodes.push_back(std::move(node));
    return Var{this, m_nodes.size() - 1};
}

Var Tape::constant(Tensor value) {
    Node node;
    node.owned = std::move(value);
    return push(std::move(node));
}

Var Tape::constant_ref(const Tensor& value) {
    Node node;
    node.ref = &value;
    return push(std::move(node));
}

Var Tape::parameter(const Tensor& value) {
    Node node;
    node.ref = &value;
    node.requires_grad = m_grad_enabled;
    return push(std::move(node));
}

Var Tape::parameter_copy(Tensor value) {
    Node node;
    node.owned = std::move(value);
    node.requires_grad = m_grad_enabled;
    return push(std::move(node));
}

const Tensor& Tape::value(Var v) const {
    const Node& node = m_nodes[v.id];
    return node.ref ? *node.ref : node.owned;
}

bool Tape::requires_grad(Var v) const { return m_nodes[v.id].requires_grad; }

bool Tape::has_grad(Var v) const { return !m_nodes[v.id].grad.empty(); }

Tensor Tape::grad(Var v) const {
    const Node& node = m_nodes[v.id];
    if (!node.grad.empty()) {
        return node.grad;
    }
    return Tensor(value(v).shape(), 0.0);
}

Var Tape::record(Tensor value, std::initializer_list<Var> inputs, Backward backward) {
    return record(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()), std::move(backward));
}

Var Tape::record(Tensor value, std::span<const Var> inputs, Backward backward) {
    Node node;
    node.owned = std::move(value);
    if (m_grad_enabled) {
        node.requires_grad = std::any_of(inputs.begin(), inputs.end(),
                                         [this](Var v) { return m_nodes[v.id].requires_grad; });
    }
    if (node.requires_grad) {
        node.backward = std::move(backward);
    }
    return push(std::move(node));
}

Tensor& Tape::grad_buffer(std::size_t id) {
    Node& node = m_nodes[id];
    if (node.grad.empty()) {
        node.grad = Tensor(value(Var{this, id}).shape(), 0.0);
    }
    return node.grad;
}

void Tape::backward(Var root) {
    if (value(root).size() != 1) {
        fail(ErrorCategory::shape_mismatch, "backward root must be scalar, got " + value(root).shape_string());
    }
    if (!m_nodes[root.id].requires_grad) {
        return;
    }
    grad_buffer(root.id)[0] += 1.0;
    for (std::size_t i = root.id + 1; i-- > 0;) {
        Node& node = m_nodes[i];
        if (node.backward && !node.grad.empty()) {
            node.backward(*this, i);
        }
    }
}

} // namespace anchorfuse
