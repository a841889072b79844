#pragma once

#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "lpsr/tensor.hpp"

namespace lpsr {

// A named tensor owned by a network. Buffers (batch-norm running stats) are
// stored alongside trainable weights but never receive gradients.
template <typename Scalar>
struct Parameter {
    std::string name;
    Tensor<Scalar> value;
    Tensor<Scalar> grad;
    bool trainable = true;

    void zero_grad() { grad = Tensor<Scalar>::zeros_like(value); }
};

// Ordered collection of named tensors. References returned by add()/get()
// stay valid for the lifetime of the set.
template <typename Scalar>
class ParamSet {
public:
    Parameter<Scalar>& add(const std::string& name, Tensor<Scalar> init, bool trainable = true) {
        if (index_.count(name)) throw ConfigError("duplicate parameter name: " + name);
        auto& p = storage_[name];
        p.name = name;
        p.value = std::move(init);
        p.grad = Tensor<Scalar>::zeros_like(p.value);
        p.trainable = trainable;
        index_[name] = order_.size();
        order_.push_back(&p);
        return p;
    }

    bool contains(const std::string& name) const { return index_.count(name) != 0; }

    Parameter<Scalar>& get(const std::string& name) {
        auto it = storage_.find(name);
        if (it == storage_.end()) throw ConfigError("unknown parameter: " + name);
        return it->second;
    }
    const Parameter<Scalar>& get(const std::string& name) const {
        auto it = storage_.find(name);
        if (it == storage_.end()) throw ConfigError("unknown parameter: " + name);
        return it->second;
    }

    const std::vector<Parameter<Scalar>*>& items() const { return order_; }

    std::vector<Parameter<Scalar>*> trainable() const {
        std::vector<Parameter<Scalar>*> out;
        for (auto* p : order_)
            if (p->trainable) out.push_back(p);
        return out;
    }

    void zero_grad() {
        for (auto* p : order_) p->zero_grad();
    }

    Index parameter_count() const {
        Index n = 0;
        for (auto* p : order_)
            if (p->trainable) n += p->value.size();
        return n;
    }

    bool all_finite() const {
        for (auto* p : order_)
            if (!p->value.all_finite()) return false;
        return true;
    }

    ParamSet() = default;
    ParamSet(const ParamSet& other) { *this = other; }
    ParamSet& operator=(const ParamSet& other) {
        if (this == &other) return *this;
        storage_.clear();
        index_.clear();
        order_.clear();
        for (auto* p : other.order_) {
            auto& q = add(p->name, p->value, p->trainable);
            q.grad = p->grad;
        }
        return *this;
    }
    ParamSet(ParamSet&&) = default;
    ParamSet& operator=(ParamSet&&) = default;

private:
    std::map<std::string, Parameter<Scalar>> storage_;
    std::map<std::string, std::size_t> index_;
    std::vector<Parameter<Scalar>*> order_;
};

template <typename Scalar>
class Tape;

// Handle to a node recorded on a tape.
template <typename Scalar>
struct Var {
    Tape<Scalar>* tape = nullptr;
    int id = -1;

    const Tensor<Scalar>& value() const;
    const Shape& shape() const { return value().shape(); }
    bool requires_grad() const;
};

// Reverse-mode recorder. Every op appends a node holding its forward value
// and, when any input requires a gradient, a closure that propagates the
// node's gradient to its inputs.
template <typename Scalar>
class Tape {
public:
    using Backward = std::function<void(Tape&, const Tensor<Scalar>& grad_out)>;

    explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var<Scalar> constant(Tensor<Scalar> value) { return push(std::move(value), false, nullptr); }

    // A leaf that receives a gradient (read back with grad()).
    Var<Scalar> variable(Tensor<Scalar> value) { return push(std::move(value), grad_enabled_, nullptr); }

    // A leaf bound to a parameter; backward() accumulates into param.grad.
    Var<Scalar> parameter(Parameter<Scalar>& param) {
        Var<Scalar> v = push(param.value, grad_enabled_ && param.trainable, nullptr);
        nodes_[v.id].param = &param;
        return v;
    }

    Var<Scalar> record(Tensor<Scalar> value, std::initializer_list<Var<Scalar>> inputs, Backward backward) {
        return record(std::move(value), std::span<const Var<Scalar>>(inputs.begin(), inputs.size()),
                      std::move(backward));
    }

    Var<Scalar> record(Tensor<Scalar> value, std::span<const Var<Scalar>> inputs, Backward backward) {
        bool needs = false;
        if (grad_enabled_)
            for (const auto& in : inputs) needs = needs || nodes_[in.id].requires_grad;
        return push(std::move(value), needs, needs ? std::move(backward) : Backward{});
    }

    const Tensor<Scalar>& value(Var<Scalar> v) const { return nodes_.at(v.id).value; }
    bool requires_grad(Var<Scalar> v) const { return nodes_.at(v.id).requires_grad; }
    bool grad_enabled() const { return grad_enabled_; }

    // Gradient of the last backward() root with respect to v.
    const Tensor<Scalar>& grad(Var<Scalar> v) const { return nodes_.at(v.id).grad; }

    // Add g into v's gradient accumulator. Used by op closures.
    void accumulate(Var<Scalar> v, const Tensor<Scalar>& g) {
        auto& node = nodes_[v.id];
        if (!node.requires_grad) return;
        if (node.grad.empty())
            node.grad = g;
        else
            node.grad.array() += g.array();
    }
    void accumulate(Var<Scalar> v, Tensor<Scalar>&& g) {
        auto& node = nodes_[v.id];
        if (!node.requires_grad) return;
        if (node.grad.empty())
            node.grad = std::move(g);
        else
            node.grad.array() += g.array();
    }

    // Seeds d(root)/d(root) with ones (root is normally a scalar loss) and
    // runs every recorded closure in reverse order.
    void backward(Var<Scalar> root) {
        if (!grad_enabled_) throw ConfigError("backward() on a tape recorded without gradients");
        nodes_[root.id].grad = Tensor<Scalar>(nodes_[root.id].value.shape(), Scalar(1));
        for (int i = root.id; i >= 0; --i) {
            auto& node = nodes_[i];
            if (!node.requires_grad || node.grad.empty()) continue;
            if (node.backward) node.backward(*this, node.grad);
            if (node.param) node.param->grad.array() += node.grad.array();
        }
    }

    std::size_t size() const { return nodes_.size(); }

private:
    struct Node {
        Tensor<Scalar> value;
        Tensor<Scalar> grad;
        bool requires_grad = false;
        Backward backward;
        Parameter<Scalar>* param = nullptr;
    };

    Var<Scalar> push(Tensor<Scalar> value, bool requires_grad, Backward backward) {
        Node node;
        node.value = std::move(value);
        node.requires_grad = requires_grad;
        node.backward = std::move(backward);
        nodes_.push_back(std::move(node));
        return Var<Scalar>{this, static_cast<int>(nodes_.size()) - 1};
    }

    bool grad_enabled_;
    std::vector<Node> nodes_;
};

template <typename Scalar>
const Tensor<Scalar>& Var<Scalar>::value() const {
    return tape->value(*this);
}

template <typename Scalar>
bool Var<Scalar>::requires_grad() const {
    return tape->requires_grad(*this);
}

}  // namespace lpsr
