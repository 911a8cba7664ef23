#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "semrecon/common.hpp"

namespace semrecon::ad {

struct Tensor {
    std::vector<int> shape;
    std::vector<double> v;

    Tensor() = default;
    explicit Tensor(std::vector<int> s) : shape(std::move(s)) { v.assign(numel_of(shape), 0.0); }
    Tensor(std::vector<int> s, std::vector<double> data) : shape(std::move(s)), v(std::move(data)) {
        if (v.size() != numel_of(shape)) throw DimensionError("tensor: shape/data mismatch");
    }

    static Tensor scalar(double x) { return Tensor({1}, {x}); }
    static size_t numel_of(const std::vector<int>& s) {
        size_t n = 1;
        for (int d : s) {
            if (d <= 0) throw DimensionError("tensor: non-positive dimension");
            n *= static_cast<size_t>(d);
        }
        return n;
    }

    size_t numel() const { return v.size(); }
    int dim(size_t i) const { return shape[i]; }
    double& operator[](size_t i) { return v[i]; }
    double operator[](size_t i) const { return v[i]; }
};

using VarId = int32_t;

// Dynamic reverse-mode tape. A tape records one forward pass; backward() may
// be called once. Gradients propagate only into nodes that (transitively)
// depend on a grad-requiring leaf.
class Tape {
  public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    VarId constant(Tensor t) { return push(std::move(t), false, nullptr); }
    VarId leaf(Tensor t) { return push(std::move(t), true, nullptr); }

    const Tensor& val(VarId id) const { return nodes_[static_cast<size_t>(id)].val; }
    bool requires_grad(VarId id) const { return nodes_[static_cast<size_t>(id)].requires; }
    // Gradient of a node after backward(); zero tensor if none was received.
    Tensor grad(VarId id) const;
    size_t size() const { return nodes_.size(); }

    void backward(VarId root);

    // elementwise / reductions
    VarId add(VarId a, VarId b);
    VarId sub(VarId a, VarId b);
    VarId mul(VarId a, VarId b);
    VarId scale(VarId a, double s);
    VarId sum(VarId a);
    VarId dot(VarId a, VarId b);

    // linear algebra
    VarId matmul(VarId a, VarId b);                 // [m,k]x[k,n]
    VarId linear(VarId x, VarId w, VarId b);        // x[n,in] w[in,out] b[out]
    VarId transpose(VarId a);

    // activations
    VarId relu(VarId a);
    VarId gelu(VarId a);
    VarId sine(VarId a, double omega);

    // image ops (channel-major tensors [C,H,W])
    VarId conv3x3(VarId x, VarId kernel, VarId bias);  // kernel [Co,Ci,3,3], zero pad 1
    VarId instance_norm(VarId x, VarId gamma, VarId beta, double eps);
    VarId avg_pool2(VarId x);
    VarId upsample2(VarId x);
    VarId concat_channels(VarId a, VarId b);
    VarId complex_magnitude(VarId x2hw, double eps);   // [2,H,W] -> [H,W]
    VarId patchify(VarId xhw, int patch);              // [H,W] -> [n_patches, patch*patch]

    // sequence ops (token-major tensors [n,d])
    VarId layer_norm(VarId x, VarId gamma, VarId beta, double eps);
    VarId softmax_rows(VarId x);
    VarId mean_rows(VarId x);
    VarId rows(VarId table, std::vector<int> ids);

    // vector ops
    VarId l2_normalize(VarId x);
    VarId concat(VarId a, VarId b);                    // 1-D
    VarId stack_scalars(const std::vector<VarId>& xs);
    VarId logsumexp(VarId x);                          // [n] -> scalar
    VarId cosine(VarId a, VarId b);

    VarId reshape(VarId a, std::vector<int> shape);

    // Custom node for externally differentiated operations. `back` receives
    // the node's output gradient plus one gradient pointer per parent
    // (nullptr when that parent does not require grad).
    using CustomBackward = std::function<void(const Tensor& out_grad, const std::vector<double*>& parent_grads)>;
    VarId custom(Tensor value, std::vector<VarId> parents, CustomBackward back);

  private:
    struct Node {
        Tensor val;
        Tensor grad;  // lazily allocated during backward
        bool requires = false;
        bool has_grad = false;
        std::function<void(Tape&)> back;
    };

    VarId push(Tensor val, bool requires, std::function<void(Tape&)> back) {
        nodes_.push_back(Node{std::move(val), Tensor{}, requires, false, std::move(back)});
        return static_cast<VarId>(nodes_.size() - 1);
    }

    Node& node(VarId id) { return nodes_[static_cast<size_t>(id)]; }
    // accumulation target, or nullptr when the node does not require grad
    double* grad_ptr(VarId id);
    bool any_requires(std::initializer_list<VarId> ids) const;

    std::vector<Node> nodes_;
    bool ran_backward_ = false;
};

}  // namespace semrecon::ad
