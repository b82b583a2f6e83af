#ifndef MEPP_GRAPH_HPP
#define MEPP_GRAPH_HPP

#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "mepp/tensor.hpp"

namespace mepp {

enum class NodeKind {
    Input,
    Parameter,
    MatMul,
    BiasAdd,
    Relu,
    Conv2d,    // 3x3 kernel, stride 1, zero padding 1 (shape preserving), NHWC
    MaxPool2,  // 2x2 window, stride 2
    Flatten,
    Concat,    // last axis
    Softmax,   // optionally block-structured along the last axis
    SoftmaxCrossEntropy, // fused, optionally block-structured; mean over batch
    SquaredError         // sum over features, mean over batch
};

const char* node_kind_name(NodeKind kind);

// Error thrown by graph construction/execution, carrying the offending node.
class GraphError : public std::runtime_error {
public:
    GraphError(std::string node, const std::string& what)
        : std::runtime_error("node '" + node + "': " + what), node_(std::move(node)) {}
    const std::string& node() const { return node_; }

private:
    std::string node_;
};

struct Node {
    NodeKind kind{};
    std::string name;             // inputs/parameters: lookup key; ops: diagnostic label
    std::vector<int> inputs;      // producer node ids
    std::vector<std::size_t> feature_shape; // per-sample shape, or full shape when !batched
    bool batched = false;         // leading batch axis added at execution time
    std::vector<std::size_t> blocks; // Softmax / SoftmaxCrossEntropy block widths
    Tensor out;                   // cached activation; for Parameter, the parameter itself
    std::vector<double> scratch;  // op workspace (im2col columns, cached probabilities)
    std::vector<std::int32_t> iscratch; // op workspace (argmax indices)
    std::uint64_t computed_pass = 0;
};

// Static computation graph with reverse-mode differentiation.
//
// Nodes are appended in topological order by the builder methods; forward()
// executes them in order and caches every activation, backward() walks them
// in reverse and accumulates gradients into parameter tensors. Execution is
// single-threaded and deterministic; distinct Graph instances share nothing.
class Graph {
public:
    // --- construction -----------------------------------------------------
    int add_input(const std::string& name, std::vector<std::size_t> feature_shape);
    int add_parameter(const std::string& name, Tensor value);

    int matmul(int a, int b, const std::string& label = "");
    int bias_add(int x, int bias, const std::string& label = "");
    int relu(int x, const std::string& label = "");
    int conv2d(int x, int weight, int bias, const std::string& label = "");
    int maxpool2(int x, const std::string& label = "");
    int flatten(int x, const std::string& label = "");
    int concat(const std::vector<int>& xs, const std::string& label = "");
    int softmax(int x, std::vector<std::size_t> blocks = {}, const std::string& label = "");
    int softmax_cross_entropy(int logits, int labels, std::vector<std::size_t> blocks = {},
                              const std::string& label = "");
    int squared_error(int pred, int target, const std::string& label = "");

    void mark_output(const std::string& name, int node);

    // --- execution ----------------------------------------------------------
    // Runs all nodes on the given named inputs and returns the marked outputs.
    // Every input must be supplied with matching per-sample shape and a common
    // batch extent; values must be finite.
    std::map<std::string, Tensor> forward(const std::map<std::string, Tensor>& inputs);

    // Accumulates d(loss)/d(parameter) into every parameter's grad buffer.
    // Requires a prior forward() and a scalar-valued loss node.
    void backward(int loss_node);

    // --- introspection ------------------------------------------------------
    std::size_t node_count() const { return nodes_.size(); }
    const Node& node(int id) const { return nodes_.at(static_cast<std::size_t>(id)); }
    Tensor& node_out(int id) { return nodes_.at(static_cast<std::size_t>(id)).out; }

    Tensor& parameter(const std::string& name);
    const Tensor& parameter(const std::string& name) const;
    const std::map<std::string, int>& parameter_ids() const { return param_ids_; }
    std::vector<std::string> parameter_names() const;
    std::size_t parameter_count() const; // total scalar parameters

    const std::map<std::string, int>& outputs() const { return output_ids_; }
    int output_id(const std::string& name) const;

private:
    int add_node(Node n);
    Node& at(int id) { return nodes_[static_cast<std::size_t>(id)]; }
    void require_valid(int id, const std::string& ctx) const;

    std::vector<Node> nodes_;
    std::map<std::string, int> input_ids_;
    std::map<std::string, int> param_ids_;
    std::map<std::string, int> output_ids_;
    std::uint64_t pass_ = 0;          // forward pass counter
    std::size_t current_batch_ = 0;
};

// Uniform initialization in +-sqrt(6 / (fan_in + fan_out)), biases zero.
Tensor glorot_uniform(std::vector<std::size_t> shape, std::size_t fan_in, std::size_t fan_out,
                      std::uint64_t seed);

} // namespace mepp

#endif
