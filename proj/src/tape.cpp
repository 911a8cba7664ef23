#define EIGEN_DONT_PARALLELIZE
#include "semrecon/tape.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>

namespace semrecon::ad {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using CMap = Eigen::Map<const RowMat>;
using MMap = Eigen::Map<RowMat>;

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape != b.shape) throw DimensionError(std::string(op) + ": shape mismatch");
}

}  // namespace

Tensor Tape::grad(VarId id) const {
    const Node& n = nodes_[static_cast<size_t>(id)];
    if (n.has_grad) return n.grad;
    Tensor z;
    z.shape = n.val.shape;
    z.v.assign(n.val.numel(), 0.0);
    return z;
}

double* Tape::grad_ptr(VarId id) {
    Node& n = node(id);
    if (!n.requires) return nullptr;
    if (!n.has_grad) {
        n.grad.shape = n.val.shape;
        n.grad.v.assign(n.val.numel(), 0.0);
        n.has_grad = true;
    }
    return n.grad.v.data();
}

bool Tape::any_requires(std::initializer_list<VarId> ids) const {
    for (VarId id : ids)
        if (nodes_[static_cast<size_t>(id)].requires) return true;
    return false;
}

void Tape::backward(VarId root) {
    if (ran_backward_) throw ValidationError("tape: backward already ran");
    ran_backward_ = true;
    Node& r = node(root);
    if (r.val.numel() != 1) throw ValidationError("tape: backward root must be scalar");
    if (!r.requires) return;  // nothing depends on a grad-requiring leaf
    if (double* g = grad_ptr(root)) g[0] = 1.0;
    for (VarId i = static_cast<VarId>(nodes_.size()) - 1; i >= 0; --i) {
        Node& n = node(i);
        if (n.requires && n.has_grad && n.back) n.back(*this);
    }
}

VarId Tape::add(VarId a, VarId b) {
    check_same_shape(val(a), val(b), "add");
    Tensor y = val(a);
    const Tensor& vb = val(b);
    for (size_t i = 0; i < y.numel(); ++i) y.v[i] += vb.v[i];
    VarId id = push(std::move(y), any_requires({a, b}), nullptr);
    node(id).back = [id, a, b](Tape& t) {
        const Tensor& g = t.node(id).grad;
        if (double* ga = t.grad_ptr(a))
            for (size_t i = 0; i < g.numel(); ++i) ga[i] += g.v[i];
        if (double* gb = t.grad_ptr(b))
            for (size_t i = 0; i < g.numel(); ++i) gb[i] += g.v[i];
    };
    return id;
}

VarId Tape::sub(VarId a, VarId b) {
    check_same_shape(val(a), val(b), "sub");
    Tensor y = val(a);
    const Tensor& vb = val(b);
    for (size_t i = 0; i < y.numel(); ++i) y.v[i] -= vb.v[i];
    VarId id = push(std::move(y), any_requires({a, b}), nullptr);
    node(id).back = [id, a, b](Tape& t) {
        const Tensor& g = t.node(id).grad;
        if (double* ga = t.grad_ptr(a))
            for (size_t i = 0; i < g.numel(); ++i) ga[i] += g.v[i];
        if (double* gb = t.grad_ptr(b))
            for (size_t i = 0; i < g.numel(); ++i) gb[i] -= g.v[i];
    };
    return id;
}

VarId Tape::mul(VarId a, VarId b) {
    check_same_shape(val(a), val(b), "mul");
    Tensor y = val(a);
    const Tensor& vb = val(b);
    for (size_t i = 0; i < y.numel(); ++i) y.v[i] *= vb.v[i];
    VarId id = push(std::move(y), any_requires({a, b}), nullptr);
    node(id).back = [id, a, b](Tape& t) {
        const Tensor& g = t.node(id).grad;
        const Tensor& va = t.val(a);
        const Tensor& vb2 = t.val(b);
        if (double* ga = t.grad_ptr(a))
            for (size_t i = 0; i < g.numel(); ++i) ga[i] += g.v[i] * vb2.v[i];
        if (double* gb = t.grad_ptr(b))
            for (size_t i = 0; i < g.numel(); ++i) gb[i] += g.v[i] * va.v[i];
    };
    return id;
}

VarId Tape::scale(VarId a, double s) {
    Tensor y = val(a);
    for (double& v : y.v) v *= s;
    VarId id = push(std::move(y), requires_grad(a), nullptr);
    node(id).back = [id, a, s](Tape& t) {
        const Tensor& g = t.node(id).grad;
        if (double* ga = t.grad_ptr(a))
            for (size_t i = 0; i < g.numel(); ++i) ga[i] += s * g.v[i];
    };
    return id;
}

VarId Tape::sum(VarId a) {
    double s = 0.0;
    for (double v : val(a).v) s += v;
    VarId id = push(Tensor::scalar(s), requires_grad(a), nullptr);
    node(id).back = [id, a](Tape& t) {
        const double g = t.node(id).grad.v[0];
        if (double* ga = t.grad_ptr(a)) {
            const size_t n = t.val(a).numel();
            for (size_t i = 0; i < n; ++i) ga[i] += g;
        }
    };
    return id;
}

VarId Tape::dot(VarId a, VarId b) {
    check_same_shape(val(a), val(b), "dot");
    double s = 0.0;
    const Tensor& va = val(a);
    const Tensor& vb = val(b);
    for (size_t i = 0; i < va.numel(); ++i) s += va.v[i] * vb.v[i];
    VarId id = push(Tensor::scalar(s), any_requires({a, b}), nullptr);
    node(id).back = [id, a, b](Tape& t) {
        const double g = t.node(id).grad.v[0];
        const Tensor& va2 = t.val(a);
        const Tensor& vb2 = t.val(b);
        if (double* ga = t.grad_ptr(a))
            for (size_t i = 0; i < va2.numel(); ++i) ga[i] += g * vb2.v[i];
        if (double* gb = t.grad_ptr(b))
            for (size_t i = 0; i < vb2.numel(); ++i) gb[i] += g * va2.v[i];
    };
    return id;
}

VarId Tape::matmul(VarId a, VarId b) {
    const Tensor& va = val(a);
    const Tensor& vb = val(b);
    if (va.shape.size() != 2 || vb.shape.size() != 2 || va.shape[1] != vb.shape[0])
        throw DimensionError("matmul: incompatible shapes");
    const int m = va.shape[0], k = va.shape[1], n = vb.shape[1];
    Tensor y({m, n});
    MMap(y.v.data(), m, n).noalias() = CMap(va.v.data(), m, k) * CMap(vb.v.data(), k, n);
    VarId id = push(std::move(y), any_requires({a, b}), nullptr);
    node(id).back = [id, a, b, m, k, n](Tape& t) {
        const Tensor& g = t.node(id).grad;
        CMap gm(g.v.data(), m, n);
        if (double* ga = t.grad_ptr(a))
            MMap(ga, m, k).noalias() += gm * CMap(t.val(b).v.data(), k, n).transpose();
        if (double* gb = t.grad_ptr(b))
            MMap(gb, k, n).noalias() += CMap(t.val(a).v.data(), m, k).transpose() * gm;
    };
    return id;
}

VarId Tape::linear(VarId x, VarId w, VarId b) {
    const Tensor& vx = val(x);
    const Tensor& vw = val(w);
    const Tensor& vb = val(b);
    if (vx.shape.size() != 2 || vw.shape.size() != 2 || vb.shape.size() != 1 || vx.shape[1] != vw.shape[0] ||
        vw.shape[1] != vb.shape[0])
        throw DimensionError("linear: incompatible shapes");
    const int n = vx.shape[0], in = vx.shape[1], out = vw.shape[1];
    Tensor y({n, out});
    MMap ym(y.v.data(), n, out);
    ym.noalias() = CMap(vx.v.data(), n, in) * CMap(vw.v.data(), in, out);
    ym.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(vb.v.data(), out);
    VarId id = push(std::move(y), any_requires({x, w, b}), nullptr);
    node(id).back = [id, x, w, b, n, in, out](Tape& t) {
        const Tensor& g = t.node(id).grad;
        CMap gm(g.v.data(), n, out);
        if (double* gx = t.grad_ptr(x))
            MMap(gx, n, in).noalias() += gm * CMap(t.val(w).v.data(), in, out).transpose();
        if (double* gw = t.grad_ptr(w))
            MMap(gw, in, out).noalias() += CMap(t.val(x).v.data(), n, in).transpose() * gm;
        if (double* gb = t.grad_ptr(b))
            Eigen::Map<Eigen::RowVectorXd>(gb, out) += gm.colwise().sum();
    };
    return id;
}

VarId Tape::transpose(VarId a) {
    const Tensor& va = val(a);
    if (va.shape.size() != 2) throw DimensionError("transpose: rank-2 only");
    const int m = va.shape[0], n = va.shape[1];
    Tensor y({n, m});
    MMap(y.v.data(), n, m) = CMap(va.v.data(), m, n).transpose();
    VarId id = push(std::move(y), requires_grad(a), nullptr);
    node(id).back = [id, a, m, n](Tape& t) {
        const Tensor& g = t.node(id).grad;
        if (double* ga = t.grad_ptr(a)) MMap(ga, m, n) += CMap(g.v.data(), n, m).transpose();
    };
    return id;
}

VarId Tape::relu(VarId a) {
    Tensor y = val(a);
    for (double& v : y.v) v = v > 0.0 ? v : 0.0;
    VarId id = push(std::move(y), requires_grad(a), nullptr);
    node(id).back = [id, a](Tape& t) {
        const Tensor& g = t.node(id).grad;
        const Tensor& va = t.val(a);
        if (double* ga = t.grad_ptr(a))
            for (size_t i = 0; i < g.numel(); ++i)
                if (va.v[i] > 0.0) ga[i] += g.v[i];
    };
    return id;
}

VarId Tape::gelu(VarId a) {
    Tensor y = val(a);
    for (double& v : y.v) v = v * 0.5 * (1.0 + std::erf(v * M_SQRT1_2));
    VarId id = push(std::move(y), requires_grad(a), nullptr);
    node(id).back = [id, a](Tape& t) {
        const Tensor& g = t.node(id).grad;
        const Tensor& va = t.val(a);
        if (double* ga = t.grad_ptr(a))
            for (size_t i = 0; i < g.numel(); ++i) {
                const double x = va.v[i];
                const double cdf = 0.5 * (1.0 + std::erf(x * M_SQRT1_2));
                const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI);
                ga[i] += g.v[i] * (cdf + x * pdf);
            }
    };
    return id;
}

VarId Tape::sine(VarId a, double omega) {
    Tensor y = val(a);
    for (double& v : y.v) v = std::sin(omega * v);
    VarId id = push(std::move(y), requires_grad(a), nullptr);
    node(id).back = [id, a, omega](Tape& t) {
        const Tensor& g = t.node(id).grad;
        const Tensor& va = t.val(a);
        if (double* ga = t.grad_ptr(a))
            for (size_t i = 0; i < g.numel(); ++i) ga[i] += g.v[i] * omega * std::cos(omega * va.v[i]);
    };
    return id;
}

VarId Tape::conv3x3(VarId x, VarId kernel, VarId bias) {
    const Tensor& vx = val(x);
    const Tensor& vk = val(kernel);
    const Tensor& vb = val(bias);
    if (vx.shape.size() != 3 || vk.shape.size() != 4 || vk.shape[2] != 3 || vk.shape[3] != 3)
        throw DimensionError("conv3x3: expected x[C,H,W], kernel[Co,Ci,3,3]");
    if (vk.shape[1] != vx.shape[0] || vb.shape != std::vector<int>{vk.shape[0]})
        throw DimensionError("conv3x3: channel mismatch");
    const int ci = vx.shape[0], h = vx.shape[1], w = vx.shape[2], co = vk.shape[0];

    Tensor y({co, h, w});
    const size_t plane = static_cast<size_t>(h) * w;
    for (int oc = 0; oc < co; ++oc) {
        double* yp = y.v.data() + static_cast<size_t>(oc) * plane;
        for (size_t i = 0; i < plane; ++i) yp[i] = vb.v[static_cast<size_t>(oc)];
        for (int icn = 0; icn < ci; ++icn) {
            const double* xp = vx.v.data() + static_cast<size_t>(icn) * plane;
            const double* kp = vk.v.data() + (static_cast<size_t>(oc) * ci + icn) * 9;
            for (int dr = -1; dr <= 1; ++dr)
                for (int dc = -1; dc <= 1; ++dc) {
                    const double kv = kp[(dr + 1) * 3 + (dc + 1)];
                    if (kv == 0.0) continue;
                    const int r0 = std::max(0, -dr), r1 = std::min(h, h - dr);
                    const int c0 = std::max(0, -dc), c1 = std::min(w, w - dc);
                    for (int r = r0; r < r1; ++r) {
                        double* yr = yp + static_cast<size_t>(r) * w;
                        const double* xr = xp + static_cast<size_t>(r + dr) * w + dc;
                        for (int c = c0; c < c1; ++c) yr[c] += kv * xr[c];
                    }
                }
        }
    }
    VarId id = push(std::move(y), any_requires({x, kernel, bias}), nullptr);
    node(id).back = [id, x, kernel, bias, ci, h, w, co, plane](Tape& t) {
        const Tensor& g = t.node(id).grad;
        const Tensor& vx2 = t.val(x);
        const Tensor& vk2 = t.val(kernel);
        double* gx = t.grad_ptr(x);
        double* gk = t.grad_ptr(kernel);
        double* gb = t.grad_ptr(bias);
        for (int oc = 0; oc < co; ++oc) {
            const double* gp = g.v.data() + static_cast<size_t>(oc) * plane;
            if (gb) {
                double s = 0.0;
                for (size_t i = 0; i < plane; ++i) s += gp[i];
                gb[oc] += s;
            }
            for (int icn = 0; icn < ci; ++icn) {
                const double* xp = vx2.v.data() + static_cast<size_t>(icn) * plane;
                const double* kp = vk2.v.data() + (static_cast<size_t>(oc) * ci + icn) * 9;
                double* gxp = gx ? gx + static_cast<size_t>(icn) * plane : nullptr;
                double* gkp = gk ? gk + (static_cast<size_t>(oc) * ci + icn) * 9 : nullptr;
                for (int dr = -1; dr <= 1; ++dr)
                    for (int dc = -1; dc <= 1; ++dc) {
                        const int r0 = std::max(0, -dr), r1 = std::min(h, h - dr);
                        const int c0 = std::max(0, -dc), c1 = std::min(w, w - dc);
                        const double kv = kp[(dr + 1) * 3 + (dc + 1)];
                        double kacc = 0.0;
                        for (int r = r0; r < r1; ++r) {
                            const double* gr = gp + static_cast<size_t>(r) * w;
                            const double* xr = xp + static_cast<size_t>(r + dr) * w + dc;
                            double* gxr = gxp ? gxp + static_cast<size_t>(r + dr) * w + dc : nullptr;
                            for (int c = c0; c < c1; ++c) {
                                if (gxr) gxr[c] += kv * gr[c];
                                kacc += gr[c] * xr[c];
                            }
                        }
                        if (gkp) gkp[(dr + 1) * 3 + (dc + 1)] += kacc;
                    }
            }
        }
    };
    return id;
}

VarId Tape::instance_norm(VarId x, VarId gamma, VarId beta, double eps) {
    const Tensor& vx = val(x);
    if (vx.shape.size() != 3) throw DimensionError("instance_norm: expected [C,H,W]");
    const int c = vx.shape[0];
    const size_t plane = static_cast<size_t>(vx.shape[1]) * vx.shape[2];
    if (val(gamma).shape != std::vector<int>{c} || val(beta).shape != std::vector<int>{c})
        throw DimensionError("instance_norm: gamma/beta must be [C]");

    Tensor y = vx;
    std::vector<double> mean(static_cast<size_t>(c)), inv_std(static_cast<size_t>(c));
    for (int ch = 0; ch < c; ++ch) {
        double* p = y.v.data() + static_cast<size_t>(ch) * plane;
        double mu = 0.0;
        for (size_t i = 0; i < plane; ++i) mu += p[i];
        mu /= static_cast<double>(plane);
        double var = 0.0;
        for (size_t i = 0; i < plane; ++i) var += (p[i] - mu) * (p[i] - mu);
        var /= static_cast<double>(plane);
        const double is = 1.0 / std::sqrt(var + eps);
        const double ga = val(gamma).v[static_cast<size_t>(ch)], be = val(beta).v[static_cast<size_t>(ch)];
        for (size_t i = 0; i < plane; ++i) p[i] = ga * (p[i] - mu) * is + be;
        mean[static_cast<size_t>(ch)] = mu;
        inv_std[static_cast<size_t>(ch)] = is;
    }
    VarId id = push(std::move(y), any_requires({x, gamma, beta}), nullptr);
    node(id).back = [id, x, gamma, beta, c, plane, mean, inv_std](Tape& t) {
        const Tensor& g = t.node(id).grad;
        const Tensor& vx2 = t.val(x);
        double* gx = t.grad_ptr(x);
        double* gg = t.grad_ptr(gamma);
        double* gb = t.grad_ptr(beta);
        for (int ch = 0; ch < c; ++ch) {
            const double* gp = g.v.data() + static_cast<size_t>(ch) * plane;
            const double* xp = vx2.v.data() + static_cast<size_t>(ch) * plane;
            const double mu = mean[static_cast<size_t>(ch)], is = inv_std[static_cast<size_t>(ch)];
            const double ga = t.val(gamma).v[static_cast<size_t>(ch)];
            double sum_g = 0.0, sum_gx = 0.0;
            for (size_t i = 0; i < plane; ++i) {
                const double xhat = (xp[i] - mu) * is;
                sum_g += gp[i];
                sum_gx += gp[i] * xhat;
            }
            if (gb) gb[ch] += sum_g;
            if (gg) gg[ch] += sum_gx;
            if (gx) {
                double* gxp = gx + static_cast<size_t>(ch) * plane;
                const double n = static_cast<double>(plane);
                for (size_t i = 0; i < plane; ++i) {
                    const double xhat = (xp[i] - mu) * is;
                    gxp[i] += ga * is * (gp[i] - sum_g / n - xhat * sum_gx / n);
                }
            }
        }
    };
    return id;
}

VarId Tape::avg_pool2(VarId x) {
    const Tensor& vx = val(x);
    if (vx.shape.size() != 3) throw DimensionError("avg_pool2: expected [C,H,W]");
    const int c = vx.shape[0], h = vx.shape[1], w = vx.shape[2];
    if (h % 2 || w % 2) throw DimensionError("avg_pool2: H and W must be even");
    Tensor y({c, h / 2, w / 2});
    for (int ch = 0; ch < c; ++ch)
        for (int r = 0; r < h / 2; ++r)
            for (int col = 0; col < w / 2; ++col) {
                const size_t base = (static_cast<size_t>(ch) * h + 2 * r) * w + 2 * col;
                y.v[(static_cast<size_t>(ch) * (h / 2) + r) * (w / 2) + col] =
                    0.25 * (vx.v[base] + vx.v[base + 1] + vx.v[base + w] + vx.v[base + w + 1]);
            }
    VarId id = push(std::move(y), requires_grad(x), nullptr);
    node(id).back = [id, x, c, h, w](Tape& t) {
        const Tensor& g = t.node(id).grad;
        if (double* gx = t.grad_ptr(x))
            for (int ch = 0; ch < c; ++ch)
                for (int r = 0; r < h / 2; ++r)
                    for (int col = 0; col < w / 2; ++col) {
                        const double gv = 0.25 * g.v[(static_cast<size_t>(ch) * (h / 2) + r) * (w / 2) + col];
                        const size_t base = (static_cast<size_t>(ch) * h + 2 * r) * w + 2 * col;
                        gx[base] += gv;
                        gx[base + 1] += gv;
                        gx[base + w] += gv;
                        gx[base + w + 1] += gv;
                    }
    };
    return id;
}

VarId Tape::upsample2(VarId x) {
    const Tensor& vx = val(x);
    if (vx.shape.size() != 3) throw DimensionError("upsample2: expected [C,H,W]");
    const int c = vx.shape[0], h = vx.shape[1], w = vx.shape[2];
    Tensor y({c, 2 * h, 2 * w});
    for (int ch = 0; ch < c; ++ch)
        for (int r = 0; r < h; ++r)
            for (int col = 0; col < w; ++col) {
                const double v = vx.v[(static_cast<size_t>(ch) * h + r) * w + col];
                const size_t base = (static_cast<size_t>(ch) * 2 * h + 2 * r) * 2 * w + 2 * col;
                y.v[base] = y.v[base + 1] = y.v[base + 2 * w] = y.v[base + 2 * w + 1] = v;
            }
    VarId id = push(std::move(y), requires_grad(x), nullptr);
    node(id).back = [id, x, c, h, w](Tape& t) {
        const Tensor& g = t.node(id).grad;
        if (double* gx = t.grad_ptr(x))
            for (int ch = 0; ch < c; ++ch)
                for (int r = 0; r < h; ++r)
                    for (int col = 0; col < w; ++col) {
                        const size_t base = (static_cast<size_t>(ch) * 2 * h + 2 * r) * 2 * w + 2 * col;
                        gx[(static_cast<size_t>(ch) * h + r) * w + col] +=
                            g.v[base] + g.v[base + 1] + g.v[base + 2 * w] + g.v[base + 2 * w + 1];
                    }
    };
    return id;
}

VarId Tape::concat_channels(VarId a, VarId b) {
    const Tensor& va = val(a);
    const Tensor& vb = val(b);
    if (va.shape.size() != 3 || vb.shape.size() != 3 || va.shape[1] != vb.shape[1] || va.shape[2] != vb.shape[2])
        throw DimensionError("concat_channels: incompatible shapes");
    Tensor y({va.shape[0] + vb.shape[0], va.shape[1], va.shape[2]});
    std::copy(va.v.begin(), va.v.end(), y.v.begin());
    std::copy(vb.v.begin(), vb.v.end(), y.v.begin() + static_cast<long>(va.numel()));
    VarId id = push(std::move(y), any_requires({a, b}), nullptr);
    const size_t na = va.numel();
    node(id).back = [id, a, b, na](Tape& t) {
        const Tensor& g = t.node(id).grad;
        if (double* ga = t.grad_ptr(a))
            for (size_t i = 0; i < na; ++i) ga[i] += g.v[i];
        if (double* gb = t.grad_ptr(b))
            for (size_t i = na; i < g.numel(); ++i) gb[i - na] += g.v[i];
    };
    return id;
}

VarId Tape::complex_magnitude(VarId x, double eps) {
    const Tensor& vx = val(x);
    if (vx.shape.size() != 3 || vx.shape[0] != 2) throw DimensionError("complex_magnitude: expected [2,H,W]");
    const size_t plane = static_cast<size_t>(vx.shape[1]) * vx.shape[2];
    Tensor y({vx.shape[1], vx.shape[2]});
    for (size_t i = 0; i < plane; ++i)
        y.v[i] = std::sqrt(vx.v[i] * vx.v[i] + vx.v[plane + i] * vx.v[plane + i] + eps * eps);
    VarId id = push(std::move(y), requires_grad(x), nullptr);
    node(id).back = [id, x, plane](Tape& t) {
        const Tensor& g = t.node(id).grad;
        const Tensor& vx2 = t.val(x);
        const Tensor& vy = t.val(id);
        if (double* gx = t.grad_ptr(x))
            for (size_t i = 0; i < plane; ++i) {
                const double inv = 1.0 / vy.v[i];
                gx[i] += g.v[i] * vx2.v[i] * inv;
                gx[plane + i] += g.v[i] * vx2.v[plane + i] * inv;
            }
    };
    return id;
}

VarId Tape::patchify(VarId x, int patch) {
    const Tensor& vx = val(x);
    if (vx.shape.size() != 2) throw DimensionError("patchify: expected [H,W]");
    const int h = vx.shape[0], w = vx.shape[1];
    if (patch <= 0 || h % patch || w % patch) throw DimensionError("patchify: H,W must be divisible by patch");
    const int ph = h / patch, pw = w / patch;
    Tensor y({ph * pw, patch * patch});
    for (int pr = 0; pr < ph; ++pr)
        for (int pc = 0; pc < pw; ++pc)
            for (int r = 0; r < patch; ++r)
                for (int c = 0; c < patch; ++c)
                    y.v[static_cast<size_t>(pr * pw + pc) * patch * patch + r * patch + c] =
                        vx.v[static_cast<size_t>(pr * patch + r) * w + pc * patch + c];
    VarId id = push(std::move(y), requires_grad(x), nullptr);
    node(id).back = [id, x, h, w, patch](Tape& t) {
        const Tensor& g = t.node(id).grad;
        const int ph2 = h / patch, pw2 = w / patch;
        (void)ph2;
        if (double* gx = t.grad_ptr(x))
            for (int pr = 0; pr < h / patch; ++pr)
                for (int pc = 0; pc < pw2; ++pc)
                    for (int r = 0; r < patch; ++r)
                        for (int c = 0; c < patch; ++c)
                            gx[static_cast<size_t>(pr * patch + r) * w + pc * patch + c] +=
                                g.v[static_cast<size_t>(pr * pw2 + pc) * patch * patch + r * patch + c];
    };
    return id;
}

VarId Tape::layer_norm(VarId x, VarId gamma, VarId beta, double eps) {
    const Tensor& vx = val(x);
    if (vx.shape.size() != 2) throw DimensionError("layer_norm: expected [n,d]");
    const int n = vx.shape[0], d = vx.shape[1];
    if (val(gamma).shape != std::vector<int>{d} || val(beta).shape != std::vector<int>{d})
        throw DimensionError("layer_norm: gamma/beta must be [d]");
    Tensor y = vx;
    std::vector<double> mean(static_cast<size_t>(n)), inv_std(static_cast<size_t>(n));
    for (int r = 0; r < n; ++r) {
        double* p = y.v.data() + static_cast<size_t>(r) * d;
        double mu = 0.0;
        for (int i = 0; i < d; ++i) mu += p[i];
        mu /= d;
        double var = 0.0;
        for (int i = 0; i < d; ++i) var += (p[i] - mu) * (p[i] - mu);
        var /= d;
        const double is = 1.0 / std::sqrt(var + eps);
        for (int i = 0; i < d; ++i)
            p[i] = val(gamma).v[static_cast<size_t>(i)] * (p[i] - mu) * is + val(beta).v[static_cast<size_t>(i)];
        mean[static_cast<size_t>(r)] = mu;
        inv_std[static_cast<size_t>(r)] = is;
    }
    VarId id = push(std::move(y), any_requires({x, gamma, beta}), nullptr);
    node(id).back = [id, x, gamma, beta, n, d, mean, inv_std](Tape& t) {
        const Tensor& g = t.node(id).grad;
        const Tensor& vx2 = t.val(x);
        double* gx = t.grad_ptr(x);
        double* gg = t.grad_ptr(gamma);
        double* gb = t.grad_ptr(beta);
        for (int r = 0; r < n; ++r) {
            const double* gp = g.v.data() + static_cast<size_t>(r) * d;
            const double* xp = vx2.v.data() + static_cast<size_t>(r) * d;
            const double mu = mean[static_cast<size_t>(r)], is = inv_std[static_cast<size_t>(r)];
            double sum_g = 0.0, sum_gx = 0.0;
            for (int i = 0; i < d; ++i) {
                const double xhat = (xp[i] - mu) * is;
                const double gscaled = gp[i] * t.val(gamma).v[static_cast<size_t>(i)];
                sum_g += gscaled;
                sum_gx += gscaled * xhat;
            }
            for (int i = 0; i < d; ++i) {
                const double xhat = (xp[i] - mu) * is;
                if (gg) gg[i] += gp[i] * xhat;
                if (gb) gb[i] += gp[i];
                if (gx) {
                    const double gscaled = gp[i] * t.val(gamma).v[static_cast<size_t>(i)];
                    gx[static_cast<size_t>(r) * d + i] += is * (gscaled - sum_g / d - xhat * sum_gx / d);
                }
            }
        }
    };
    return id;
}

VarId Tape::softmax_rows(VarId x) {
    const Tensor& vx = val(x);
    if (vx.shape.size() != 2) throw DimensionError("softmax_rows: expected [n,m]");
    const int n = vx.shape[0], m = vx.shape[1];
    Tensor y = vx;
    for (int r = 0; r < n; ++r) {
        double* p = y.v.data() + static_cast<size_t>(r) * m;
        double mx = p[0];
        for (int i = 1; i < m; ++i) mx = std::max(mx, p[i]);
        double s = 0.0;
        for (int i = 0; i < m; ++i) {
            p[i] = std::exp(p[i] - mx);
            s += p[i];
        }
        for (int i = 0; i < m; ++i) p[i] /= s;
    }
    VarId id = push(std::move(y), requires_grad(x), nullptr);
    node(id).back = [id, x, n, m](Tape& t) {
        const Tensor& g = t.node(id).grad;
        const Tensor& vy = t.val(id);
        if (double* gx = t.grad_ptr(x))
            for (int r = 0; r < n; ++r) {
                const double* gp = g.v.data() + static_cast<size_t>(r) * m;
                const double* yp = vy.v.data() + static_cast<size_t>(r) * m;
                double dotv = 0.0;
                for (int i = 0; i < m; ++i) dotv += gp[i] * yp[i];
                for (int i = 0; i < m; ++i) gx[static_cast<size_t>(r) * m + i] += yp[i] * (gp[i] - dotv);
            }
    };
    return id;
}

VarId Tape::mean_rows(VarId x) {
    const Tensor& vx = val(x);
    if (vx.shape.size() != 2) throw DimensionError("mean_rows: expected [n,d]");
    const int n = vx.shape[0], d = vx.shape[1];
    Tensor y({d});
    for (int r = 0; r < n; ++r)
        for (int i = 0; i < d; ++i) y.v[static_cast<size_t>(i)] += vx.v[static_cast<size_t>(r) * d + i];
    for (double& v : y.v) v /= n;
    VarId id = push(std::move(y), requires_grad(x), nullptr);
    node(id).back = [id, x, n, d](Tape& t) {
        const Tensor& g = t.node(id).grad;
        if (double* gx = t.grad_ptr(x))
            for (int r = 0; r < n; ++r)
                for (int i = 0; i < d; ++i) gx[static_cast<size_t>(r) * d + i] += g.v[static_cast<size_t>(i)] / n;
    };
    return id;
}

VarId Tape::rows(VarId table, std::vector<int> ids) {
    const Tensor& vt = val(table);
    if (vt.shape.size() != 2) throw DimensionError("rows: expected [V,d]");
    if (ids.empty()) throw ValidationError("rows: empty id list");
    const int v = vt.shape[0], d = vt.shape[1];
    for (int i : ids)
        if (i < 0 || i >= v) throw ValidationError("rows: id out of range");
    Tensor y({static_cast<int>(ids.size()), d});
    for (size_t r = 0; r < ids.size(); ++r)
        std::copy_n(vt.v.begin() + static_cast<long>(ids[r]) * d, d, y.v.begin() + static_cast<long>(r) * d);
    VarId id = push(std::move(y), requires_grad(table), nullptr);
    node(id).back = [id, table, ids, d](Tape& t) {
        const Tensor& g = t.node(id).grad;
        if (double* gt = t.grad_ptr(table))
            for (size_t r = 0; r < ids.size(); ++r)
                for (int i = 0; i < d; ++i)
                    gt[static_cast<size_t>(ids[r]) * d + i] += g.v[r * static_cast<size_t>(d) + i];
    };
    return id;
}

VarId Tape::l2_normalize(VarId x) {
    const Tensor& vx = val(x);
    double n2 = 0.0;
    for (double v : vx.v) n2 += v * v;
    const double n = std::sqrt(n2);
    if (n == 0.0) throw ValidationError("l2_normalize: zero vector");
    Tensor y = vx;
    for (double& v : y.v) v /= n;
    VarId id = push(std::move(y), requires_grad(x), nullptr);
    node(id).back = [id, x, n](Tape& t) {
        const Tensor& g = t.node(id).grad;
        const Tensor& vy = t.val(id);
        if (double* gx = t.grad_ptr(x)) {
            double gy = 0.0;
            for (size_t i = 0; i < g.numel(); ++i) gy += g.v[i] * vy.v[i];
            for (size_t i = 0; i < g.numel(); ++i) gx[i] += (g.v[i] - vy.v[i] * gy) / n;
        }
    };
    return id;
}

VarId Tape::concat(VarId a, VarId b) {
    const Tensor& va = val(a);
    const Tensor& vb = val(b);
    if (va.shape.size() != 1 || vb.shape.size() != 1) throw DimensionError("concat: rank-1 only");
    Tensor y({va.shape[0] + vb.shape[0]});
    std::copy(va.v.begin(), va.v.end(), y.v.begin());
    std::copy(vb.v.begin(), vb.v.end(), y.v.begin() + va.shape[0]);
    VarId id = push(std::move(y), any_requires({a, b}), nullptr);
    const size_t na = va.numel();
    node(id).back = [id, a, b, na](Tape& t) {
        const Tensor& g = t.node(id).grad;
        if (double* ga = t.grad_ptr(a))
            for (size_t i = 0; i < na; ++i) ga[i] += g.v[i];
        if (double* gb = t.grad_ptr(b))
            for (size_t i = na; i < g.numel(); ++i) gb[i - na] += g.v[i];
    };
    return id;
}

VarId Tape::stack_scalars(const std::vector<VarId>& xs) {
    if (xs.empty()) throw ValidationError("stack_scalars: empty");
    Tensor y({static_cast<int>(xs.size())});
    bool req = false;
    for (size_t i = 0; i < xs.size(); ++i) {
        if (val(xs[i]).numel() != 1) throw DimensionError("stack_scalars: inputs must be scalars");
        y.v[i] = val(xs[i]).v[0];
        req = req || requires_grad(xs[i]);
    }
    VarId id = push(std::move(y), req, nullptr);
    std::vector<VarId> parents = xs;
    node(id).back = [id, parents](Tape& t) {
        const Tensor& g = t.node(id).grad;
        for (size_t i = 0; i < parents.size(); ++i)
            if (double* gp = t.grad_ptr(parents[i])) gp[0] += g.v[i];
    };
    return id;
}

VarId Tape::logsumexp(VarId x) {
    const Tensor& vx = val(x);
    if (vx.shape.size() != 1) throw DimensionError("logsumexp: rank-1 only");
    double mx = vx.v[0];
    for (double v : vx.v) mx = std::max(mx, v);
    double s = 0.0;
    for (double v : vx.v) s += std::exp(v - mx);
    VarId id = push(Tensor::scalar(mx + std::log(s)), requires_grad(x), nullptr);
    node(id).back = [id, x, mx, s](Tape& t) {
        const double g = t.node(id).grad.v[0];
        const Tensor& vx2 = t.val(x);
        if (double* gx = t.grad_ptr(x))
            for (size_t i = 0; i < vx2.numel(); ++i) gx[i] += g * std::exp(vx2.v[i] - mx) / s;
    };
    return id;
}

VarId Tape::cosine(VarId a, VarId b) {
    const Tensor& va = val(a);
    const Tensor& vb = val(b);
    check_same_shape(va, vb, "cosine");
    double ab = 0.0, aa = 0.0, bb = 0.0;
    for (size_t i = 0; i < va.numel(); ++i) {
        ab += va.v[i] * vb.v[i];
        aa += va.v[i] * va.v[i];
        bb += vb.v[i] * vb.v[i];
    }
    if (aa == 0.0 || bb == 0.0) throw ValidationError("cosine: zero vector");
    const double na = std::sqrt(aa), nb = std::sqrt(bb);
    const double sim = ab / (na * nb);
    VarId id = push(Tensor::scalar(sim), any_requires({a, b}), nullptr);
    node(id).back = [id, a, b, na, nb, sim](Tape& t) {
        const double g = t.node(id).grad.v[0];
        const Tensor& va2 = t.val(a);
        const Tensor& vb2 = t.val(b);
        if (double* ga = t.grad_ptr(a))
            for (size_t i = 0; i < va2.numel(); ++i)
                ga[i] += g * (vb2.v[i] / (na * nb) - sim * va2.v[i] / (na * na));
        if (double* gb = t.grad_ptr(b))
            for (size_t i = 0; i < vb2.numel(); ++i)
                gb[i] += g * (va2.v[i] / (na * nb) - sim * vb2.v[i] / (nb * nb));
    };
    return id;
}

VarId Tape::reshape(VarId a, std::vector<int> shape) {
    const Tensor& va = val(a);
    Tensor y(std::move(shape), va.v);
    VarId id = push(std::move(y), requires_grad(a), nullptr);
    node(id).back = [id, a](Tape& t) {
        const Tensor& g = t.node(id).grad;
        if (double* ga = t.grad_ptr(a))
            for (size_t i = 0; i < g.numel(); ++i) ga[i] += g.v[i];
    };
    return id;
}

VarId Tape::custom(Tensor value, std::vector<VarId> parents, CustomBackward back) {
    bool req = false;
    for (VarId p : parents) req = req || requires_grad(p);
    VarId id = push(std::move(value), req, nullptr);
    node(id).back = [id, parents, back = std::move(back)](Tape& t) {
        std::vector<double*> pg(parents.size());
        for (size_t i = 0; i < parents.size(); ++i) pg[i] = t.grad_ptr(parents[i]);
        back(t.node(id).grad, pg);
    };
    return id;
}

}  // namespace semrecon::ad
