#include "mepp/graph.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>

#include "mepp/rng.hpp"

namespace mepp {

using MatMap = Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
using ConstMatMap =
    Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

const char* node_kind_name(NodeKind kind) {
    switch (kind) {
        case NodeKind::Input: return "input";
        case NodeKind::Parameter: return "parameter";
        case NodeKind::MatMul: return "matmul";
        case NodeKind::BiasAdd: return "bias-add";
        case NodeKind::Relu: return "relu";
        case NodeKind::Conv2d: return "conv2d";
        case NodeKind::MaxPool2: return "maxpool2";
        case NodeKind::Flatten: return "flatten";
        case NodeKind::Concat: return "concat";
        case NodeKind::Softmax: return "softmax";
        case NodeKind::SoftmaxCrossEntropy: return "softmax-cross-entropy";
        case NodeKind::SquaredError: return "squared-error";
    }
    return "?";
}

Tensor glorot_uniform(std::vector<std::size_t> shape, std::size_t fan_in, std::size_t fan_out,
                      std::uint64_t seed) {
    Tensor t(std::move(shape));
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    Rng rng(seed);
    for (double& v : t.values()) v = rng.uniform(-limit, limit);
    return t;
}

// --- builder -----------------------------------------------------------------

int Graph::add_node(Node n) {
    if (n.name.empty()) {
        n.name = std::string(node_kind_name(n.kind)) + "#" + std::to_string(nodes_.size());
    }
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
}

void Graph::require_valid(int id, const std::string& ctx) const {
    if (id < 0 || static_cast<std::size_t>(id) >= nodes_.size()) {
        throw GraphError(ctx, "references unknown node id " + std::to_string(id));
    }
}

int Graph::add_input(const std::string& name, std::vector<std::size_t> feature_shape) {
    if (input_ids_.count(name)) throw GraphError(name, "duplicate input name");
    Node n;
    n.kind = NodeKind::Input;
    n.name = name;
    n.feature_shape = std::move(feature_shape);
    n.batched = true;
    int id = add_node(std::move(n));
    input_ids_[name] = id;
    return id;
}

int Graph::add_parameter(const std::string& name, Tensor value) {
    if (param_ids_.count(name)) throw GraphError(name, "duplicate parameter name");
    if (!value.all_finite()) throw GraphError(name, "non-finite parameter value");
    Node n;
    n.kind = NodeKind::Parameter;
    n.name = name;
    n.feature_shape = value.shape();
    n.batched = false;
    n.out = std::move(value);
    int id = add_node(std::move(n));
    param_ids_[name] = id;
    return id;
}

int Graph::matmul(int a, int b, const std::string& label) {
    require_valid(a, label.empty() ? "matmul" : label);
    require_valid(b, label.empty() ? "matmul" : label);
    const Node& na = nodes_[static_cast<std::size_t>(a)];
    const Node& nb = nodes_[static_cast<std::size_t>(b)];
    Node n;
    n.kind = NodeKind::MatMul;
    n.name = label;
    n.inputs = {a, b};
    if (nb.batched || nb.feature_shape.size() != 2) {
        throw GraphError(label.empty() ? "matmul" : label, "right operand must be a 2-d table");
    }
    std::size_t m = nb.feature_shape[0], k = nb.feature_shape[1];
    if (na.batched) {
        if (na.feature_shape.size() != 1 || na.feature_shape[0] != m) {
            throw GraphError(label.empty() ? "matmul" : label,
                             "inner extents disagree: left " + Tensor(na.feature_shape).shape_str() +
                                 " right " + Tensor(nb.feature_shape).shape_str());
        }
        n.batched = true;
        n.feature_shape = {k};
    } else {
        if (na.feature_shape.size() != 2 || na.feature_shape[1] != m) {
            throw GraphError(label.empty() ? "matmul" : label, "inner extents disagree");
        }
        n.batched = false;
        n.feature_shape = {na.feature_shape[0], k};
    }
    return add_node(std::move(n));
}

int Graph::bias_add(int x, int bias, const std::string& label) {
    require_valid(x, "bias-add");
    require_valid(bias, "bias-add");
    const Node& nx = nodes_[static_cast<std::size_t>(x)];
    const Node& nb = nodes_[static_cast<std::size_t>(bias)];
    if (!nx.batched || nx.feature_shape.size() != 1) {
        throw GraphError(label.empty() ? "bias-add" : label, "expects a batched vector input");
    }
    if (nb.batched || nb.feature_shape != nx.feature_shape) {
        throw GraphError(label.empty() ? "bias-add" : label, "bias extent mismatch");
    }
    Node n;
    n.kind = NodeKind::BiasAdd;
    n.name = label;
    n.inputs = {x, bias};
    n.batched = true;
    n.feature_shape = nx.feature_shape;
    return add_node(std::move(n));
}

int Graph::relu(int x, const std::string& label) {
    require_valid(x, "relu");
    const Node& nx = nodes_[static_cast<std::size_t>(x)];
    Node n;
    n.kind = NodeKind::Relu;
    n.name = label;
    n.inputs = {x};
    n.batched = nx.batched;
    n.feature_shape = nx.feature_shape;
    return add_node(std::move(n));
}

int Graph::conv2d(int x, int weight, int bias, const std::string& label) {
    require_valid(x, "conv2d");
    require_valid(weight, "conv2d");
    require_valid(bias, "conv2d");
    const Node& nx = nodes_[static_cast<std::size_t>(x)];
    const Node& nw = nodes_[static_cast<std::size_t>(weight)];
    const Node& nb = nodes_[static_cast<std::size_t>(bias)];
    const std::string who = label.empty() ? "conv2d" : label;
    if (!nx.batched || nx.feature_shape.size() != 3) {
        throw GraphError(who, "expects batched h*w*c images");
    }
    std::size_t c_in = nx.feature_shape[2];
    if (nw.batched || nw.feature_shape.size() != 4 || nw.feature_shape[0] != 3 ||
        nw.feature_shape[1] != 3 || nw.feature_shape[2] != c_in) {
        throw GraphError(who, "weight must have shape 3x3x" + std::to_string(c_in) + "xC");
    }
    std::size_t c_out = nw.feature_shape[3];
    if (nb.batched || nb.feature_shape != std::vector<std::size_t>{c_out}) {
        throw GraphError(who, "bias extent must match output channels");
    }
    Node n;
    n.kind = NodeKind::Conv2d;
    n.name = label;
    n.inputs = {x, weight, bias};
    n.batched = true;
    n.feature_shape = {nx.feature_shape[0], nx.feature_shape[1], c_out};
    return add_node(std::move(n));
}

int Graph::maxpool2(int x, const std::string& label) {
    require_valid(x, "maxpool2");
    const Node& nx = nodes_[static_cast<std::size_t>(x)];
    const std::string who = label.empty() ? "maxpool2" : label;
    if (!nx.batched || nx.feature_shape.size() != 3) {
        throw GraphError(who, "expects batched h*w*c images");
    }
    if (nx.feature_shape[0] < 2 || nx.feature_shape[1] < 2) {
        throw GraphError(who, "spatial extents below pooling window");
    }
    Node n;
    n.kind = NodeKind::MaxPool2;
    n.name = label;
    n.inputs = {x};
    n.batched = true;
    n.feature_shape = {nx.feature_shape[0] / 2, nx.feature_shape[1] / 2, nx.feature_shape[2]};
    return add_node(std::move(n));
}

int Graph::flatten(int x, const std::string& label) {
    require_valid(x, "flatten");
    const Node& nx = nodes_[static_cast<std::size_t>(x)];
    if (!nx.batched) throw GraphError(label.empty() ? "flatten" : label, "expects a batched input");
    Node n;
    n.kind = NodeKind::Flatten;
    n.name = label;
    n.inputs = {x};
    n.batched = true;
    n.feature_shape = {shape_numel(nx.feature_shape)};
    return add_node(std::move(n));
}

int Graph::concat(const std::vector<int>& xs, const std::string& label) {
    const std::string who = label.empty() ? "concat" : label;
    if (xs.empty()) throw GraphError(who, "needs at least one input");
    std::size_t total = 0;
    std::vector<std::size_t> lead;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        require_valid(xs[i], who);
        const Node& nx = nodes_[static_cast<std::size_t>(xs[i])];
        if (!nx.batched || nx.feature_shape.empty()) {
            throw GraphError(who, "all inputs must be batched");
        }
        std::vector<std::size_t> l(nx.feature_shape.begin(), nx.feature_shape.end() - 1);
        if (i == 0) {
            lead = l;
        } else if (l != lead) {
            throw GraphError(who, "leading extents disagree between inputs");
        }
        total += nx.feature_shape.back();
    }
    Node n;
    n.kind = NodeKind::Concat;
    n.name = label;
    n.inputs = xs;
    n.batched = true;
    n.feature_shape = lead;
    n.feature_shape.push_back(total);
    return add_node(std::move(n));
}

static void validate_blocks(const std::vector<std::size_t>& blocks, std::size_t width,
                            const std::string& who) {
    std::size_t sum = 0;
    for (std::size_t b : blocks) {
        if (b == 0) throw GraphError(who, "zero-width block");
        sum += b;
    }
    if (sum != width) {
        throw GraphError(who, "block widths sum to " + std::to_string(sum) + ", expected " +
                                  std::to_string(width));
    }
}

int Graph::softmax(int x, std::vector<std::size_t> blocks, const std::string& label) {
    require_valid(x, "softmax");
    const Node& nx = nodes_[static_cast<std::size_t>(x)];
    const std::string who = label.empty() ? "softmax" : label;
    if (!nx.batched || nx.feature_shape.size() != 1) {
        throw GraphError(who, "expects a batched vector input");
    }
    if (blocks.empty()) blocks = {nx.feature_shape[0]};
    validate_blocks(blocks, nx.feature_shape[0], who);
    Node n;
    n.kind = NodeKind::Softmax;
    n.name = label;
    n.inputs = {x};
    n.batched = true;
    n.feature_shape = nx.feature_shape;
    n.blocks = std::move(blocks);
    return add_node(std::move(n));
}

int Graph::softmax_cross_entropy(int logits, int labels, std::vector<std::size_t> blocks,
                                 const std::string& label) {
    require_valid(logits, "softmax-cross-entropy");
    require_valid(labels, "softmax-cross-entropy");
    const Node& nl = nodes_[static_cast<std::size_t>(logits)];
    const Node& ny = nodes_[static_cast<std::size_t>(labels)];
    const std::string who = label.empty() ? "softmax-cross-entropy" : label;
    if (!nl.batched || nl.feature_shape.size() != 1 || !ny.batched ||
        ny.feature_shape != nl.feature_shape) {
        throw GraphError(who, "logits and labels must be batched vectors of equal extent");
    }
    if (blocks.empty()) blocks = {nl.feature_shape[0]};
    validate_blocks(blocks, nl.feature_shape[0], who);
    Node n;
    n.kind = NodeKind::SoftmaxCrossEntropy;
    n.name = label;
    n.inputs = {logits, labels};
    n.batched = false;
    n.feature_shape = {1};
    n.blocks = std::move(blocks);
    return add_node(std::move(n));
}

int Graph::squared_error(int pred, int target, const std::string& label) {
    require_valid(pred, "squared-error");
    require_valid(target, "squared-error");
    const Node& np = nodes_[static_cast<std::size_t>(pred)];
    const Node& nt = nodes_[static_cast<std::size_t>(target)];
    const std::string who = label.empty() ? "squared-error" : label;
    if (!np.batched || !nt.batched || np.feature_shape != nt.feature_shape) {
        throw GraphError(who, "prediction and target extents disagree");
    }
    Node n;
    n.kind = NodeKind::SquaredError;
    n.name = label;
    n.inputs = {pred, target};
    n.batched = false;
    n.feature_shape = {1};
    return add_node(std::move(n));
}

void Graph::mark_output(const std::string& name, int node) {
    require_valid(node, name);
    output_ids_[name] = node;
}

Tensor& Graph::parameter(const std::string& name) {
    auto it = param_ids_.find(name);
    if (it == param_ids_.end()) throw GraphError(name, "unknown parameter");
    return nodes_[static_cast<std::size_t>(it->second)].out;
}

const Tensor& Graph::parameter(const std::string& name) const {
    auto it = param_ids_.find(name);
    if (it == param_ids_.end()) throw GraphError(name, "unknown parameter");
    return nodes_[static_cast<std::size_t>(it->second)].out;
}

std::vector<std::string> Graph::parameter_names() const {
    std::vector<std::string> names;
    names.reserve(param_ids_.size());
    for (const auto& [name, id] : param_ids_) names.push_back(name);
    return names;
}

std::size_t Graph::parameter_count() const {
    std::size_t n = 0;
    for (const auto& [name, id] : param_ids_) n += nodes_[static_cast<std::size_t>(id)].out.numel();
    return n;
}

int Graph::output_id(const std::string& name) const {
    auto it = output_ids_.find(name);
    if (it == output_ids_.end()) throw GraphError(name, "unknown output");
    return it->second;
}

// --- forward -------------------------------------------------------------

namespace {

std::vector<std::size_t> batched_shape(std::size_t n, const std::vector<std::size_t>& feature) {
    std::vector<std::size_t> s;
    s.reserve(feature.size() + 1);
    s.push_back(n);
    s.insert(s.end(), feature.begin(), feature.end());
    return s;
}

void ensure_out(Node& n, const std::vector<std::size_t>& shape) {
    if (n.out.shape() != shape) {
        n.out.resize(shape);
    }
}

// Gathers 3x3 zero-padded patches into rows ordered (sample, y, x), columns
// ordered (ky, kx, channel), matching the row-major layout of a 3x3xCinxCout
// weight tensor.
void im2col_3x3(const double* x, std::size_t n, std::size_t h, std::size_t w, std::size_t c,
                std::vector<double>& col) {
    const std::size_t row_len = 9 * c;
    col.assign(n * h * w * row_len, 0.0);
    for (std::size_t s = 0; s < n; ++s) {
        const double* img = x + s * h * w * c;
        for (std::size_t y = 0; y < h; ++y) {
            for (std::size_t ky = 0; ky < 3; ++ky) {
                const std::size_t iy = y + ky;
                if (iy < 1 || iy > h) continue; // zero padding
                const double* src_row = img + (iy - 1) * w * c;
                double* dst_row = col.data() + ((s * h + y) * w) * row_len + ky * 3 * c;
                for (std::size_t x0 = 0; x0 < w; ++x0) {
                    for (std::size_t kx = 0; kx < 3; ++kx) {
                        const std::size_t ix = x0 + kx;
                        if (ix < 1 || ix > w) continue;
                        const double* src = src_row + (ix - 1) * c;
                        double* dst = dst_row + x0 * row_len + kx * c;
                        std::copy(src, src + c, dst);
                    }
                }
            }
        }
    }
}

void col2im_3x3(const double* col, std::size_t n, std::size_t h, std::size_t w, std::size_t c,
                double* gx) {
    const std::size_t row_len = 9 * c;
    for (std::size_t s = 0; s < n; ++s) {
        double* img = gx + s * h * w * c;
        for (std::size_t y = 0; y < h; ++y) {
            for (std::size_t ky = 0; ky < 3; ++ky) {
                const std::size_t iy = y + ky;
                if (iy < 1 || iy > h) continue;
                double* dst_row = img + (iy - 1) * w * c;
                const double* src_row = col + ((s * h + y) * w) * row_len + ky * 3 * c;
                for (std::size_t x0 = 0; x0 < w; ++x0) {
                    for (std::size_t kx = 0; kx < 3; ++kx) {
                        const std::size_t ix = x0 + kx;
                        if (ix < 1 || ix > w) continue;
                        double* dst = dst_row + (ix - 1) * c;
                        const double* src = src_row + x0 * row_len + kx * c;
                        for (std::size_t i = 0; i < c; ++i) dst[i] += src[i];
                    }
                }
            }
        }
    }
}

} // namespace

std::map<std::string, Tensor> Graph::forward(const std::map<std::string, Tensor>& inputs) {
    ++pass_;
    // Bind inputs and determine the batch extent.
    std::size_t batch = 0;
    for (const auto& [name, value] : inputs) {
        if (!input_ids_.count(name)) throw GraphError(name, "not a declared input");
    }
    for (const auto& [name, id] : input_ids_) {
        auto it = inputs.find(name);
        if (it == inputs.end()) throw GraphError(name, "input not supplied");
        const Tensor& v = it->second;
        const Node& decl = nodes_[static_cast<std::size_t>(id)];
        if (v.rank() != decl.feature_shape.size() + 1 ||
            !std::equal(decl.feature_shape.begin(), decl.feature_shape.end(), v.shape().begin() + 1)) {
            throw GraphError(name, "input shape " + v.shape_str() + " does not match declared " +
                                       Tensor(decl.feature_shape).shape_str() + " per sample");
        }
        if (batch == 0) {
            batch = v.dim(0);
        } else if (v.dim(0) != batch) {
            throw GraphError(name, "batch extent disagrees with other inputs");
        }
        if (!v.all_finite()) throw GraphError(name, "non-finite input value");
    }
    current_batch_ = batch;

    for (std::size_t idx = 0; idx < nodes_.size(); ++idx) {
        Node& n = nodes_[idx];
        switch (n.kind) {
            case NodeKind::Input: {
                const Tensor& v = inputs.at(n.name);
                ensure_out(n, v.shape());
                std::copy(v.data(), v.data() + v.numel(), n.out.data());
                break;
            }
            case NodeKind::Parameter:
                break; // out is the live parameter tensor
            case NodeKind::MatMul: {
                const Tensor& a = nodes_[static_cast<std::size_t>(n.inputs[0])].out;
                const Tensor& b = nodes_[static_cast<std::size_t>(n.inputs[1])].out;
                if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
                    throw GraphError(n.name, "operand shapes " + a.shape_str() + " x " +
                                                 b.shape_str() + " are not multiplicable");
                }
                ensure_out(n, {a.dim(0), b.dim(1)});
                ConstMatMap A(a.data(), static_cast<Eigen::Index>(a.dim(0)),
                              static_cast<Eigen::Index>(a.dim(1)));
                ConstMatMap B(b.data(), static_cast<Eigen::Index>(b.dim(0)),
                              static_cast<Eigen::Index>(b.dim(1)));
                MatMap C(n.out.data(), A.rows(), B.cols());
                C.noalias() = A * B;
                break;
            }
            case NodeKind::BiasAdd: {
                const Tensor& x = nodes_[static_cast<std::size_t>(n.inputs[0])].out;
                const Tensor& b = nodes_[static_cast<std::size_t>(n.inputs[1])].out;
                ensure_out(n, x.shape());
                const std::size_t k = b.numel();
                const std::size_t rows = x.numel() / k;
                for (std::size_t r = 0; r < rows; ++r) {
                    const double* xr = x.data() + r * k;
                    double* or_ = n.out.data() + r * k;
                    for (std::size_t j = 0; j < k; ++j) or_[j] = xr[j] + b[j];
                }
                break;
            }
            case NodeKind::Relu: {
                const Tensor& x = nodes_[static_cast<std::size_t>(n.inputs[0])].out;
                ensure_out(n, x.shape());
                const double* src = x.data();
                double* dst = n.out.data();
                for (std::size_t i = 0; i < x.numel(); ++i) dst[i] = src[i] > 0.0 ? src[i] : 0.0;
                break;
            }
            case NodeKind::Conv2d: {
                const Tensor& x = nodes_[static_cast<std::size_t>(n.inputs[0])].out;
                const Tensor& wgt = nodes_[static_cast<std::size_t>(n.inputs[1])].out;
                const Tensor& b = nodes_[static_cast<std::size_t>(n.inputs[2])].out;
                const std::size_t nn = x.dim(0), h = x.dim(1), w = x.dim(2), ci = x.dim(3);
                const std::size_t co = wgt.dim(3);
                ensure_out(n, {nn, h, w, co});
                im2col_3x3(x.data(), nn, h, w, ci, n.scratch);
                ConstMatMap Col(n.scratch.data(), static_cast<Eigen::Index>(nn * h * w),
                                static_cast<Eigen::Index>(9 * ci));
                ConstMatMap W(wgt.data(), static_cast<Eigen::Index>(9 * ci),
                              static_cast<Eigen::Index>(co));
                MatMap Out(n.out.data(), Col.rows(), W.cols());
                Out.noalias() = Col * W;
                Eigen::Map<const Eigen::RowVectorXd> bias(b.data(), static_cast<Eigen::Index>(co));
                Out.rowwise() += bias;
                break;
            }
            case NodeKind::MaxPool2: {
                const Tensor& x = nodes_[static_cast<std::size_t>(n.inputs[0])].out;
                const std::size_t nn = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
                const std::size_t oh = h / 2, ow = w / 2;
                ensure_out(n, {nn, oh, ow, c});
                n.iscratch.resize(nn * oh * ow * c);
                for (std::size_t s = 0; s < nn; ++s) {
                    for (std::size_t y = 0; y < oh; ++y) {
                        for (std::size_t x0 = 0; x0 < ow; ++x0) {
                            for (std::size_t ch = 0; ch < c; ++ch) {
                                std::size_t best = ((s * h + 2 * y) * w + 2 * x0) * c + ch;
                                double bv = x[best];
                                const std::size_t cand[3] = {
                                    ((s * h + 2 * y) * w + 2 * x0 + 1) * c + ch,
                                    ((s * h + 2 * y + 1) * w + 2 * x0) * c + ch,
                                    ((s * h + 2 * y + 1) * w + 2 * x0 + 1) * c + ch};
                                for (std::size_t q : cand) {
                                    if (x[q] > bv) { bv = x[q]; best = q; }
                                }
                                const std::size_t o = ((s * oh + y) * ow + x0) * c + ch;
                                n.out[o] = bv;
                                n.iscratch[o] = static_cast<std::int32_t>(best - s * h * w * c);
                            }
                        }
                    }
                }
                break;
            }
            case NodeKind::Flatten: {
                const Tensor& x = nodes_[static_cast<std::size_t>(n.inputs[0])].out;
                ensure_out(n, {x.dim(0), x.numel() / x.dim(0)});
                std::copy(x.data(), x.data() + x.numel(), n.out.data());
                break;
            }
            case NodeKind::Concat: {
                std::size_t rows = 0, total = 0;
                for (int in : n.inputs) {
                    const Tensor& x = nodes_[static_cast<std::size_t>(in)].out;
                    total += x.shape().back();
                    rows = x.numel() / x.shape().back();
                }
                ensure_out(n, {rows, total});
                std::size_t off = 0;
                for (int in : n.inputs) {
                    const Tensor& x = nodes_[static_cast<std::size_t>(in)].out;
                    const std::size_t k = x.shape().back();
                    for (std::size_t r = 0; r < rows; ++r) {
                        std::copy(x.data() + r * k, x.data() + (r + 1) * k,
                                  n.out.data() + r * total + off);
                    }
                    off += k;
                }
                break;
            }
            case NodeKind::Softmax: {
                const Tensor& x = nodes_[static_cast<std::size_t>(n.inputs[0])].out;
                ensure_out(n, x.shape());
                const std::size_t k = x.shape().back();
                const std::size_t rows = x.numel() / k;
                for (std::size_t r = 0; r < rows; ++r) {
                    const double* xr = x.data() + r * k;
                    double* pr = n.out.data() + r * k;
                    std::size_t off = 0;
                    for (std::size_t bw : n.blocks) {
                        double mx = xr[off];
                        for (std::size_t j = 1; j < bw; ++j) mx = std::max(mx, xr[off + j]);
                        double sum = 0.0;
                        for (std::size_t j = 0; j < bw; ++j) {
                            pr[off + j] = std::exp(xr[off + j] - mx);
                            sum += pr[off + j];
                        }
                        for (std::size_t j = 0; j < bw; ++j) pr[off + j] /= sum;
                        off += bw;
                    }
                }
                break;
            }
            case NodeKind::SoftmaxCrossEntropy: {
                const Tensor& logits = nodes_[static_cast<std::size_t>(n.inputs[0])].out;
                const Tensor& labels = nodes_[static_cast<std::size_t>(n.inputs[1])].out;
                if (!logits.same_shape(labels)) {
                    throw GraphError(n.name, "logits shape " + logits.shape_str() +
                                                 " does not match labels " + labels.shape_str());
                }
                const std::size_t k = logits.shape().back();
                const std::size_t rows = logits.numel() / k;
                ensure_out(n, {1});
                n.scratch.resize(rows * k); // probabilities, reused by backward
                double total = 0.0;
                for (std::size_t r = 0; r < rows; ++r) {
                    const double* lr = logits.data() + r * k;
                    const double* yr = labels.data() + r * k;
                    double* pr = n.scratch.data() + r * k;
                    std::size_t off = 0;
                    for (std::size_t bw : n.blocks) {
                        double mx = lr[off];
                        for (std::size_t j = 1; j < bw; ++j) mx = std::max(mx, lr[off + j]);
                        double sum = 0.0;
                        for (std::size_t j = 0; j < bw; ++j) sum += std::exp(lr[off + j] - mx);
                        const double lse = mx + std::log(sum);
                        double ymass = 0.0, dot = 0.0;
                        for (std::size_t j = 0; j < bw; ++j) {
                            pr[off + j] = std::exp(lr[off + j] - lse);
                            ymass += yr[off + j];
                            dot += yr[off + j] * lr[off + j];
                        }
                        total += lse * ymass - dot;
                        off += bw;
                    }
                }
                n.out[0] = total / static_cast<double>(rows);
                break;
            }
            case NodeKind::SquaredError: {
                const Tensor& p = nodes_[static_cast<std::size_t>(n.inputs[0])].out;
                const Tensor& t = nodes_[static_cast<std::size_t>(n.inputs[1])].out;
                if (!p.same_shape(t)) {
                    throw GraphError(n.name, "prediction shape " + p.shape_str() +
                                                 " does not match target " + t.shape_str());
                }
                ensure_out(n, {1});
                double total = 0.0;
                for (std::size_t i = 0; i < p.numel(); ++i) {
                    const double d = p[i] - t[i];
                    total += d * d;
                }
                n.out[0] = total / static_cast<double>(p.dim(0));
                break;
            }
        }
        n.computed_pass = pass_;
        if (n.feature_shape == std::vector<std::size_t>{1} && !n.batched &&
            (n.kind == NodeKind::SoftmaxCrossEntropy || n.kind == NodeKind::SquaredError)) {
            if (!std::isfinite(n.out[0])) throw GraphError(n.name, "non-finite loss value");
        }
    }

    std::map<std::string, Tensor> outs;
    for (const auto& [name, id] : output_ids_) {
        outs.emplace(name, nodes_[static_cast<std::size_t>(id)].out);
    }
    return outs;
}

// --- backward ------------------------------------------------------------

void Graph::backward(int loss_node) {
    require_valid(loss_node, "backward");
    Node& loss = nodes_[static_cast<std::size_t>(loss_node)];
    if (pass_ == 0 || loss.computed_pass != pass_) {
        throw GraphError(loss.name, "backward requires a completed forward pass");
    }
    if (loss.out.numel() != 1) {
        throw GraphError(loss.name, "loss output is not scalar");
    }

    for (Node& n : nodes_) n.out.reset_grad();
    loss.out.grad()[0] = 1.0;

    for (std::size_t idx = nodes_.size(); idx-- > 0;) {
        Node& n = nodes_[idx];
        if (n.computed_pass != pass_) continue;
        switch (n.kind) {
            case NodeKind::Input:
            case NodeKind::Parameter:
                break;
            case NodeKind::MatMul: {
                Tensor& a = nodes_[static_cast<std::size_t>(n.inputs[0])].out;
                Tensor& b = nodes_[static_cast<std::size_t>(n.inputs[1])].out;
                ConstMatMap G(n.out.grad(), static_cast<Eigen::Index>(a.dim(0)),
                              static_cast<Eigen::Index>(b.dim(1)));
                ConstMatMap A(a.data(), static_cast<Eigen::Index>(a.dim(0)),
                              static_cast<Eigen::Index>(a.dim(1)));
                ConstMatMap B(b.data(), static_cast<Eigen::Index>(b.dim(0)),
                              static_cast<Eigen::Index>(b.dim(1)));
                MatMap GA(a.grad(), A.rows(), A.cols());
                MatMap GB(b.grad(), B.rows(), B.cols());
                GA.noalias() += G * B.transpose();
                GB.noalias() += A.transpose() * G;
                break;
            }
            case NodeKind::BiasAdd: {
                Tensor& x = nodes_[static_cast<std::size_t>(n.inputs[0])].out;
                Tensor& b = nodes_[static_cast<std::size_t>(n.inputs[1])].out;
                const std::size_t k = b.numel();
                const std::size_t rows = x.numel() / k;
                const double* g = n.out.grad();
                double* gx = x.grad();
                double* gb = b.grad();
                for (std::size_t i = 0; i < x.numel(); ++i) gx[i] += g[i];
                for (std::size_t r = 0; r < rows; ++r) {
                    for (std::size_t j = 0; j < k; ++j) gb[j] += g[r * k + j];
                }
                break;
            }
            case NodeKind::Relu: {
                Tensor& x = nodes_[static_cast<std::size_t>(n.inputs[0])].out;
                const double* g = n.out.grad();
                double* gx = x.grad();
                const double* y = n.out.data();
                for (std::size_t i = 0; i < x.numel(); ++i) {
                    if (y[i] > 0.0) gx[i] += g[i];
                }
                break;
            }
            case NodeKind::Conv2d: {
                Tensor& x = nodes_[static_cast<std::size_t>(n.inputs[0])].out;
                Tensor& wgt = nodes_[static_cast<std::size_t>(n.inputs[1])].out;
                Tensor& b = nodes_[static_cast<std::size_t>(n.inputs[2])].out;
                const std::size_t nn = x.dim(0), h = x.dim(1), w = x.dim(2), ci = x.dim(3);
                const std::size_t co = wgt.dim(3);
                const Eigen::Index rows = static_cast<Eigen::Index>(nn * h * w);
                ConstMatMap G(n.out.grad(), rows, static_cast<Eigen::Index>(co));
                // bias gradient
                Eigen::Map<Eigen::RowVectorXd> gb(b.grad(), static_cast<Eigen::Index>(co));
                gb += G.colwise().sum();
                // weight gradient from the cached forward columns
                ConstMatMap Col(n.scratch.data(), rows, static_cast<Eigen::Index>(9 * ci));
                MatMap GW(wgt.grad(), static_cast<Eigen::Index>(9 * ci),
                          static_cast<Eigen::Index>(co));
                GW.noalias() += Col.transpose() * G;
                // input gradient: clobber the forward columns with column grads
                ConstMatMap W(wgt.data(), static_cast<Eigen::Index>(9 * ci),
                              static_cast<Eigen::Index>(co));
                MatMap GCol(n.scratch.data(), rows, static_cast<Eigen::Index>(9 * ci));
                GCol.noalias() = G * W.transpose();
                col2im_3x3(n.scratch.data(), nn, h, w, ci, x.grad());
                break;
            }
            case NodeKind::MaxPool2: {
                Tensor& x = nodes_[static_cast<std::size_t>(n.inputs[0])].out;
                const std::size_t nn = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
                const std::size_t per = h * w * c;
                const std::size_t oper = n.out.numel() / nn;
                const double* g = n.out.grad();
                double* gx = x.grad();
                for (std::size_t s = 0; s < nn; ++s) {
                    for (std::size_t o = 0; o < oper; ++o) {
                        gx[s * per + static_cast<std::size_t>(n.iscratch[s * oper + o])] +=
                            g[s * oper + o];
                    }
                }
                break;
            }
            case NodeKind::Flatten: {
                Tensor& x = nodes_[static_cast<std::size_t>(n.inputs[0])].out;
                const double* g = n.out.grad();
                double* gx = x.grad();
                for (std::size_t i = 0; i < x.numel(); ++i) gx[i] += g[i];
                break;
            }
            case NodeKind::Concat: {
                const std::size_t total = n.out.shape().back();
                const std::size_t rows = n.out.numel() / total;
                std::size_t off = 0;
                for (int in : n.inputs) {
                    Tensor& x = nodes_[static_cast<std::size_t>(in)].out;
                    const std::size_t k = x.shape().back();
                    double* gx = x.grad();
                    const double* g = n.out.grad();
                    for (std::size_t r = 0; r < rows; ++r) {
                        for (std::size_t j = 0; j < k; ++j) gx[r * k + j] += g[r * total + off + j];
                    }
                    off += k;
                }
                break;
            }
            case NodeKind::Softmax: {
                Tensor& x = nodes_[static_cast<std::size_t>(n.inputs[0])].out;
                const std::size_t k = x.shape().back();
                const std::size_t rows = x.numel() / k;
                const double* g = n.out.grad();
                const double* p = n.out.data();
                double* gx = x.grad();
                for (std::size_t r = 0; r < rows; ++r) {
                    std::size_t off = r * k;
                    std::size_t boff = 0;
                    for (std::size_t bw : n.blocks) {
                        double dot = 0.0;
                        for (std::size_t j = 0; j < bw; ++j) {
                            dot += g[off + boff + j] * p[off + boff + j];
                        }
                        for (std::size_t j = 0; j < bw; ++j) {
                            gx[off + boff + j] += p[off + boff + j] * (g[off + boff + j] - dot);
                        }
                        boff += bw;
                    }
                }
                break;
            }
            case NodeKind::SoftmaxCrossEntropy: {
                Tensor& logits = nodes_[static_cast<std::size_t>(n.inputs[0])].out;
                const Tensor& labels = nodes_[static_cast<std::size_t>(n.inputs[1])].out;
                const std::size_t k = logits.shape().back();
                const std::size_t rows = logits.numel() / k;
                const double gscale = n.out.grad()[0] / static_cast<double>(rows);
                double* gl = logits.grad();
                const double* p = n.scratch.data();
                const double* y = labels.data();
                for (std::size_t r = 0; r < rows; ++r) {
                    std::size_t boff = 0;
                    for (std::size_t bw : n.blocks) {
                        double ymass = 0.0;
                        for (std::size_t j = 0; j < bw; ++j) ymass += y[r * k + boff + j];
                        for (std::size_t j = 0; j < bw; ++j) {
                            const std::size_t i = r * k + boff + j;
                            gl[i] += gscale * (p[i] * ymass - y[i]);
                        }
                        boff += bw;
                    }
                }
                // labels are constants; no gradient is propagated to them
                break;
            }
            case NodeKind::SquaredError: {
                Tensor& p = nodes_[static_cast<std::size_t>(n.inputs[0])].out;
                const Tensor& t = nodes_[static_cast<std::size_t>(n.inputs[1])].out;
                const double gscale = 2.0 * n.out.grad()[0] / static_cast<double>(p.dim(0));
                double* gp = p.grad();
                for (std::size_t i = 0; i < p.numel(); ++i) gp[i] += gscale * (p[i] - t[i]);
                break;
            }
        }
    }
}

} // namespace mepp
