#pragma once

#include <functional>
#include <utility>
#include <vector>

#include "b2f/tensor.hpp"

namespace b2f {

// Records the backward closures of every differentiable op in creation
// order; creation order is a topological order of the graph, so running the
// closures once in reverse propagates gradients from the loss to every
// parameter. A tape and the tensors on it belong to one logical thread.
class Tape {
public:
    struct Node {
        const char* op;
        std::function<void()> backward;
    };

    void record(const char* op, std::function<void()> backward) {
        nodes_.push_back(Node{op, std::move(backward)});
    }

    size_t size() const { return nodes_.size(); }

    void clear() { nodes_.clear(); }

    void backward_from(const Tensor& loss) {
        if (!loss.defined() || loss.numel() != 1)
            contract_error("backward requires a scalar loss, got " +
                           (loss.defined() ? loss.shape().str() : std::string("undefined")));
        if (!loss.requires_grad())
            contract_error("backward requires a loss that requires grad");
        const_cast<Tensor&>(loss).grad()[0] += 1.0f;
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it)
            it->backward();
    }

private:
    std::vector<Node> nodes_;
};

inline void backward(const Tensor& loss, Tape& tape) { tape.backward_from(loss); }

}  // namespace b2f
