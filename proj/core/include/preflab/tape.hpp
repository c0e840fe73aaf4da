#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "preflab/tensor.hpp"

namespace preflab {

class Tape;

// Handle to a node on a tape. Cheap to copy; valid for the tape's lifetime.
struct Value {
    Tape* tape = nullptr;
    int id = -1;
    bool valid() const { return tape != nullptr && id >= 0; }
};

// Reverse-mode gradient tape. One tape per forward pass; single-threaded.
// Nodes are appended in topological order, so backward() is a reverse sweep.
class Tape {
  public:
    Value leaf(Tensor value, bool requires_grad = true);
    Value constant(Tensor value);

    Value matmul(Value a, Value b);
    Value add(Value a, Value b);            // same shape
    Value sub(Value a, Value b);            // same shape
    Value mul(Value a, Value b);            // elementwise, same shape
    Value add_row(Value a, Value bias);     // [T x C] + [1 x C]
    Value scale(Value a, double c);
    Value add_const(Value a, double c);
    Value relu(Value a);
    Value transpose(Value a);
    Value slice_cols(Value a, std::size_t start, std::size_t width);
    Value concat_cols(const std::vector<Value>& parts);
    Value gather_rows(Value table, const std::vector<int>& ids);
    Value layer_norm(Value x, Value gamma, Value beta, double eps = 1e-5);
    Value softmax_rows(Value logits);
    Value causal_softmax(Value scores);     // [T x T], position t attends to <= t
    Value log_sigmoid(Value x);             // elementwise, softplus-based
    Value sum(Value a);

    // sum_t weights[t] * log softmax(logits[t])[targets[t]]
    Value weighted_target_logprob(Value logits, const std::vector<int>& targets,
                                  const std::vector<double>& weights);
    // mean of -log softmax(logits[t])[targets[t]] over positions with mask[t] != 0
    Value cross_entropy(Value logits, const std::vector<int>& targets,
                        const std::vector<double>& mask = {});

    const Tensor& value(Value v) const { return nodes_[check(v)].value; }
    const Tensor& grad(Value v) const { return nodes_[check(v)].grad; }

    // Seeds d(loss)/d(loss) = 1 and sweeps the tape in reverse.
    void backward(Value loss);

    std::size_t size() const { return nodes_.size(); }

  private:
    struct Node {
        Tensor value;
        Tensor grad;
        bool requires_grad = false;
        std::function<void()> backward;  // accumulates into parents' grads
    };

    int check(Value v) const;
    Value push(Tensor value, bool requires_grad, std::function<void()> bw = nullptr);
    Tensor& grad_buf(int id);

    std::vector<Node> nodes_;
    bool ran_backward_ = false;

    friend struct TapeOpsImpl;
};

}  // namespace preflab
