#ifndef DUBFLOW_TENSOR_HPP
#define DUBFLOW_TENSOR_HPP

// Dense f64 tensors with reverse-mode autodiff. Graphs are built by tracing;
// every node carries a creation id, and backward accumulates in strictly
// decreasing id order, so gradient accumulation is single-order deterministic.

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <map>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace dubflow::numgrad {

using Shape = std::vector<size_t>;

size_t numel(const Shape& s);
std::string shape_str(const Shape& s);

struct Node;
using NodePtr = std::shared_ptr<Node>;

struct Node {
    uint64_t id{0};
    std::string op;  // "leaf" or primitive name
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;  // sized during backward
    bool requires_grad{false};
    std::vector<NodePtr> parents;
    // Distributes this->grad into parents' grad buffers.
    std::function<void(Node&)> backprop;
};

// While a NoGradGuard is alive, ops do not record parents or backprop
// closures; use it for inference to keep memory flat.
struct NoGradGuard {
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
};
bool grad_enabled();

class Tensor {
public:
    Tensor() = default;
    explicit Tensor(NodePtr n) : node(std::move(n)) {}

    static Tensor leaf(Shape shape, std::vector<double> value, bool requires_grad = false);
    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double v, bool requires_grad = false);
    static Tensor scalar(double v, bool requires_grad = false);

    bool defined() const { return node != nullptr; }
    const Shape& shape() const { return node->shape; }
    size_t size() const { return node->value.size(); }
    const std::vector<double>& value() const { return node->value; }
    std::vector<double>& raw_value() { return node->value; }  // leaves / params
    const std::vector<double>& grad() const;
    bool requires_grad() const { return node->requires_grad; }
    double item() const;

    NodePtr node;
};

// ---- primitives ------------------------------------------------------------
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor divide(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);
// broadcast a [d]-vector over the last axis
Tensor bias_add(const Tensor& x, const Tensor& bias);
Tensor mul_lastdim(const Tensor& x, const Tensor& w);
// multiply every element by a 1-element tensor (gradients flow to both)
Tensor mul_bcast_scalar(const Tensor& x, const Tensor& s);

// [m,k]x[k,n]; [b,m,k]x[b,k,n]; [b,m,k]x[k,n]
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor permute(const Tensor& a, const std::vector<size_t>& perm);
Tensor transpose_last2(const Tensor& a);
Tensor reshape(const Tensor& a, Shape s);
Tensor slice(const Tensor& a, size_t axis, size_t start, size_t len);
Tensor concat(const std::vector<Tensor>& parts, size_t axis);
Tensor embedding_lookup(const Tensor& table, const std::vector<size_t>& ids);

Tensor softmax_lastdim(const Tensor& a);
Tensor layer_norm_lastdim(const Tensor& a, double eps = 1e-6);
Tensor reduce_sum(const Tensor& a);
Tensor reduce_mean(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor sqrt(const Tensor& a);
Tensor gelu(const Tensor& a);
// pairwise (even,odd) -> (-odd, even) over the last axis; rotary helper
Tensor rotate_half_pairs(const Tensor& a);

Tensor cosine_similarity(const Tensor& a, const Tensor& b, double eps = 1e-12);

// ---- backward --------------------------------------------------------------
// scalar_out must have exactly one element. Populates grad on every
// requires_grad node reachable from it; unreached inputs keep empty grads
// (read as exact zero via Tensor::grad()).
void backward(const Tensor& scalar_out);

// ---- finite-difference oracle ---------------------------------------------
struct GradCheckEntry {
    std::string name;
    double max_rel_err{0.0};
    bool pass{true};
};
struct GradCheckReport {
    bool pass{true};
    std::vector<GradCheckEntry> entries;
    std::string summary() const;
};
// fn must rebuild the graph from the given leaves on every call and return a
// scalar. Inputs are perturbed in place by the central-difference oracle.
GradCheckReport grad_check(
    const std::function<Tensor(const std::vector<Tensor>&)>& fn,
    const std::vector<std::pair<std::string, Tensor>>& inputs,
    double tolerance, double step = 1e-5);

// ---- serialization ---------------------------------------------------------
// little-endian: magic "DFT1", u32 rank, u32 extents..., raw f64 payload
void write_tensor(std::ostream& os, const Tensor& t);
Tensor read_tensor(std::istream& is);
void save_tensor(const std::string& path, const Tensor& t);
Tensor load_tensor(const std::string& path);

// Named-tensor container: "<path>" binary blob of DFT1 records plus
// "<path>.idx" text index lines "name offset shape...".
class TensorStore {
public:
    std::map<std::string, Tensor> items;
    void put(const std::string& name, Tensor t) { items[name] = std::move(t); }
    Tensor& at(const std::string& name);
    const Tensor& at(const std::string& name) const;
    bool has(const std::string& name) const { return items.count(name) != 0; }
    void save(const std::string& path) const;
    static TensorStore load(const std::string& path);
};

}  // namespace dubflow::numgrad

#endif
