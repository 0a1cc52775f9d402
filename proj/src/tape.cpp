#include "uap/tape.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <memory>

#include "uap/error.hpp"

namespace uap {

namespace {

// probabilities are clamped before log/division so a confidently-wrong model
// cannot produce inf in the loss or its gradient
constexpr double kProbFloor = 1e-300;

struct ConvDims {
    std::size_t n, ic, ih, iw;  // effective input dims (channels flattened)
    std::size_t oc, kh, kw;
    std::size_t oh, ow;
    std::size_t ph, pw;  // zero padding per side
};

// out[n,oc,y,x] += sum_{ic,ky,kx} in[n,ic,y+ky,x+kx] * w[oc,ic,ky,kx]
void conv_forward(const double* in, const double* w, double* out, const ConvDims& d) {
    for (std::size_t n = 0; n < d.n; ++n) {
        for (std::size_t oc = 0; oc < d.oc; ++oc) {
            double* outp = out + (n * d.oc + oc) * d.oh * d.ow;
            for (std::size_t ic = 0; ic < d.ic; ++ic) {
                const double* inp = in + (n * d.ic + ic) * d.ih * d.iw;
                const double* wp = w + (oc * d.ic + ic) * d.kh * d.kw;
                for (std::size_t ky = 0; ky < d.kh; ++ky) {
                    for (std::size_t kx = 0; kx < d.kw; ++kx) {
                        const double kv = wp[ky * d.kw + kx];
                        for (std::size_t y = 0; y < d.oh; ++y) {
                            const double* inrow = inp + (y + ky) * d.iw + kx;
                            double* orow = outp + y * d.ow;
                            for (std::size_t x = 0; x < d.ow; ++x) orow[x] += kv * inrow[x];
                        }
                    }
                }
            }
        }
    }
}

// din[n,ic,y+ky,x+kx] += g[n,oc,y,x] * w[oc,ic,ky,kx]
void conv_backward_input(const double* g, const double* w, double* din, const ConvDims& d) {
    for (std::size_t n = 0; n < d.n; ++n) {
        for (std::size_t oc = 0; oc < d.oc; ++oc) {
            const double* gp = g + (n * d.oc + oc) * d.oh * d.ow;
            for (std::size_t ic = 0; ic < d.ic; ++ic) {
                double* dinp = din + (n * d.ic + ic) * d.ih * d.iw;
                const double* wp = w + (oc * d.ic + ic) * d.kh * d.kw;
                for (std::size_t ky = 0; ky < d.kh; ++ky) {
                    for (std::size_t kx = 0; kx < d.kw; ++kx) {
                        const double kv = wp[ky * d.kw + kx];
                        for (std::size_t y = 0; y < d.oh; ++y) {
                            const double* grow = gp + y * d.ow;
                            double* drow = dinp + (y + ky) * d.iw + kx;
                            for (std::size_t x = 0; x < d.ow; ++x) drow[x] += kv * grow[x];
                        }
                    }
                }
            }
        }
    }
}

// dw[oc,ic,ky,kx] += sum_{n,y,x} g[n,oc,y,x] * in[n,ic,y+ky,x+kx]
void conv_backward_kernel(const double* g, const double* in, double* dw, const ConvDims& d) {
    for (std::size_t oc = 0; oc < d.oc; ++oc) {
        for (std::size_t ic = 0; ic < d.ic; ++ic) {
            double* dwp = dw + (oc * d.ic + ic) * d.kh * d.kw;
            for (std::size_t n = 0; n < d.n; ++n) {
                const double* gp = g + (n * d.oc + oc) * d.oh * d.ow;
                const double* inp = in + (n * d.ic + ic) * d.ih * d.iw;
                for (std::size_t ky = 0; ky < d.kh; ++ky) {
                    for (std::size_t kx = 0; kx < d.kw; ++kx) {
                        double acc = 0.0;
                        for (std::size_t y = 0; y < d.oh; ++y) {
                            const double* grow = gp + y * d.ow;
                            const double* inrow = inp + (y + ky) * d.iw + kx;
                            for (std::size_t x = 0; x < d.ow; ++x) acc += grow[x] * inrow[x];
                        }
                        dwp[ky * d.kw + kx] += acc;
                    }
                }
            }
        }
    }
}

// effective (N, channels, H, W) view of a 4d or 5d activation tensor
void effective_dims(const Tensor& t, std::size_t& n, std::size_t& c, std::size_t& h,
                    std::size_t& w) {
    const auto& s = t.shape();
    require(s.size() == 4 || s.size() == 5, ErrorKind::argument,
            "expected 4d or 5d activation, got " + t.shape_str());
    n = s[0];
    if (s.size() == 4) {
        c = s[1];
        h = s[2];
        w = s[3];
    } else {
        c = s[1] * s[2];
        h = s[3];
        w = s[4];
    }
}

// spatial index map for r applications of the exact 90-degree rotation
std::vector<std::size_t> rot_map(std::size_t k, int r) {
    std::vector<std::size_t> map(k * k);
    for (std::size_t y = 0; y < k; ++y)
        for (std::size_t x = 0; x < k; ++x) {
            std::size_t sy = y, sx = x;
            for (int i = 0; i < r; ++i) {
                auto [ny, nx] = rot90_src(sy, sx, k);
                sy = ny;
                sx = nx;
            }
            map[y * k + x] = sy * k + sx;
        }
    return map;
}

}  // namespace

NodeId Tape::emplace(Tensor value, std::vector<NodeId> parents, const char* op,
                     std::function<void(Tape&, NodeId)> bwd) {
    Node node;
    node.value = std::move(value);
    node.parents = std::move(parents);
    node.op = op;
    node.backward = std::move(bwd);
    for (NodeId p : node.parents)
        if (nodes_[p].needs_grad) node.needs_grad = true;
    nodes_.push_back(std::move(node));
    return static_cast<NodeId>(nodes_.size() - 1);
}

std::vector<double>& Tape::grad_buf(NodeId id) {
    auto& g = nodes_[id].grad;
    if (g.empty()) g.assign(nodes_[id].value.size(), 0.0);
    return g;
}

const std::vector<double>& Tape::grad(NodeId id) const {
    require(!nodes_[id].grad.empty(), ErrorKind::argument,
            "gradient not populated; run backward() first");
    return nodes_[id].grad;
}

NodeId Tape::input(Tensor v, bool needs_grad) {
    Node node;
    node.value = std::move(v);
    node.needs_grad = needs_grad;
    nodes_.push_back(std::move(node));
    return static_cast<NodeId>(nodes_.size() - 1);
}

NodeId Tape::add(NodeId a, NodeId b) {
    require(value(a).same_shape(value(b)), ErrorKind::argument, "add: shape mismatch");
    Tensor out = value(a);
    const auto& bv = value(b).values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
    return emplace(std::move(out), {a, b}, "add", [a, b](Tape& t, NodeId self) {
        const auto& g = t.nodes_[self].grad;
        for (NodeId p : {a, b}) {
            if (!t.wants_grad(p)) continue;
            auto& pg = t.grad_buf(p);
            for (std::size_t i = 0; i < g.size(); ++i) pg[i] += g[i];
        }
    });
}

NodeId Tape::sub(NodeId a, NodeId b) {
    require(value(a).same_shape(value(b)), ErrorKind::argument, "sub: shape mismatch");
    Tensor out = value(a);
    const auto& bv = value(b).values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
    return emplace(std::move(out), {a, b}, "sub", [a, b](Tape& t, NodeId self) {
        const auto& g = t.nodes_[self].grad;
        if (t.wants_grad(a)) {
            auto& pg = t.grad_buf(a);
            for (std::size_t i = 0; i < g.size(); ++i) pg[i] += g[i];
        }
        if (t.wants_grad(b)) {
            auto& pg = t.grad_buf(b);
            for (std::size_t i = 0; i < g.size(); ++i) pg[i] -= g[i];
        }
    });
}

NodeId Tape::mul(NodeId a, NodeId b) {
    require(value(a).same_shape(value(b)), ErrorKind::argument, "mul: shape mismatch");
    Tensor out = value(a);
    const auto& bv = value(b).values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
    return emplace(std::move(out), {a, b}, "mul", [a, b](Tape& t, NodeId self) {
        const auto& g = t.nodes_[self].grad;
        if (t.wants_grad(a)) {
            auto& pg = t.grad_buf(a);
            const auto& bv = t.value(b).values();
            for (std::size_t i = 0; i < g.size(); ++i) pg[i] += g[i] * bv[i];
        }
        if (t.wants_grad(b)) {
            auto& pg = t.grad_buf(b);
            const auto& av = t.value(a).values();
            for (std::size_t i = 0; i < g.size(); ++i) pg[i] += g[i] * av[i];
        }
    });
}

NodeId Tape::scale(NodeId x, double c) {
    Tensor out = value(x);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= c;
    return emplace(std::move(out), {x}, "scale", [x, c](Tape& t, NodeId self) {
        if (!t.wants_grad(x)) return;
        const auto& g = t.nodes_[self].grad;
        auto& pg = t.grad_buf(x);
        for (std::size_t i = 0; i < g.size(); ++i) pg[i] += c * g[i];
    });
}

NodeId Tape::sum(NodeId x) {
    double s = 0.0;
    for (double v : value(x).values()) s += v;
    return emplace(Tensor::scalar(s), {x}, "sum", [x](Tape& t, NodeId self) {
        if (!t.wants_grad(x)) return;
        const double g = t.nodes_[self].grad[0];
        auto& pg = t.grad_buf(x);
        for (double& v : pg) v += g;
    });
}

NodeId Tape::relu(NodeId x) {
    Tensor out = value(x);
    for (auto& v : out.values()) v = v > 0.0 ? v : 0.0;
    return emplace(std::move(out), {x}, "relu", [x](Tape& t, NodeId self) {
        if (!t.wants_grad(x)) return;
        const auto& g = t.nodes_[self].grad;
        const auto& xv = t.value(x).values();
        auto& pg = t.grad_buf(x);
        for (std::size_t i = 0; i < g.size(); ++i)
            if (xv[i] > 0.0) pg[i] += g[i];
    });
}

NodeId Tape::conv2d(NodeId x, NodeId w, Pad pad, std::size_t out_orientations) {
    const Tensor& xv = value(x);
    const Tensor& wv = value(w);
    require(wv.rank() == 4, ErrorKind::argument, "conv2d: kernel must be 4d");

    ConvDims d{};
    effective_dims(xv, d.n, d.ic, d.ih, d.iw);
    d.oc = wv.dim(0);
    d.kh = wv.dim(2);
    d.kw = wv.dim(3);
    require(wv.dim(1) == d.ic, ErrorKind::argument,
            "conv2d: kernel expects " + std::to_string(wv.dim(1)) + " channels, input has " +
                std::to_string(d.ic));
    if (pad == Pad::same) {
        require(d.kh % 2 == 1 && d.kw % 2 == 1, ErrorKind::argument,
                "conv2d: same padding requires odd kernel");
        d.ph = (d.kh - 1) / 2;
        d.pw = (d.kw - 1) / 2;
    }
    require(d.ih + 2 * d.ph >= d.kh && d.iw + 2 * d.pw >= d.kw, ErrorKind::argument,
            "conv2d: kernel larger than input");
    d.oh = d.ih + 2 * d.ph - d.kh + 1;
    d.ow = d.iw + 2 * d.pw - d.kw + 1;

    const std::size_t g = out_orientations;
    require(g >= 1 && d.oc % g == 0, ErrorKind::argument, "conv2d: bad orientation grouping");
    std::vector<std::size_t> out_shape =
        g == 1 ? std::vector<std::size_t>{d.n, d.oc, d.oh, d.ow}
               : std::vector<std::size_t>{d.n, d.oc / g, g, d.oh, d.ow};

    // with same padding the padded copy is kept for the kernel-gradient pass
    auto padded = std::make_shared<std::vector<double>>();
    const double* in_ptr = xv.data();
    if (pad == Pad::same) {
        const std::size_t pih = d.ih + 2 * d.ph, piw = d.iw + 2 * d.pw;
        padded->assign(d.n * d.ic * pih * piw, 0.0);
        for (std::size_t n = 0; n < d.n; ++n)
            for (std::size_t c = 0; c < d.ic; ++c)
                for (std::size_t y = 0; y < d.ih; ++y)
                    std::memcpy(padded->data() + ((n * d.ic + c) * pih + y + d.ph) * piw + d.pw,
                                xv.data() + ((n * d.ic + c) * d.ih + y) * d.iw,
                                d.iw * sizeof(double));
        in_ptr = padded->data();
    }

    ConvDims dp = d;
    dp.ih = d.ih + 2 * d.ph;
    dp.iw = d.iw + 2 * d.pw;

    Tensor out(std::move(out_shape));
    conv_forward(in_ptr, wv.data(), out.data(), dp);

    auto bwd = [x, w, d, dp, padded](Tape& t, NodeId self) {
        const double* g = t.nodes_[self].grad.data();
        const bool is_padded = d.ph > 0 || d.pw > 0;
        const double* in_ptr = is_padded ? padded->data() : t.value(x).data();
        if (t.wants_grad(x)) {
            if (!is_padded) {
                conv_backward_input(g, t.value(w).data(), t.grad_buf(x).data(), dp);
            } else {
                std::vector<double> din(d.n * d.ic * dp.ih * dp.iw, 0.0);
                conv_backward_input(g, t.value(w).data(), din.data(), dp);
                auto& pg = t.grad_buf(x);
                for (std::size_t n = 0; n < d.n; ++n)
                    for (std::size_t c = 0; c < d.ic; ++c)
                        for (std::size_t y = 0; y < d.ih; ++y) {
                            const double* src =
                                din.data() + ((n * d.ic + c) * dp.ih + y + d.ph) * dp.iw + d.pw;
                            double* dst = pg.data() + ((n * d.ic + c) * d.ih + y) * d.iw;
                            for (std::size_t xcol = 0; xcol < d.iw; ++xcol) dst[xcol] += src[xcol];
                        }
            }
        }
        if (t.wants_grad(w)) conv_backward_kernel(g, in_ptr, t.grad_buf(w).data(), dp);
    };
    return emplace(std::move(out), {x, w}, "conv2d", std::move(bwd));
}

NodeId Tape::add_channel_bias(NodeId x, NodeId b) {
    const Tensor& xv = value(x);
    const Tensor& bv = value(b);
    require(xv.rank() >= 2 && bv.rank() == 1 && bv.dim(0) == xv.dim(1), ErrorKind::argument,
            "add_channel_bias: bias must match channel dim");
    const std::size_t n = xv.dim(0), c = xv.dim(1), rest = xv.size() / (n * c);
    Tensor out = xv;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < c; ++j) {
            double* p = out.data() + (i * c + j) * rest;
            const double bj = bv[j];
            for (std::size_t k = 0; k < rest; ++k) p[k] += bj;
        }
    return emplace(std::move(out), {x, b}, "add_channel_bias",
                   [x, b, n, c, rest](Tape& t, NodeId self) {
                       const auto& g = t.nodes_[self].grad;
                       if (t.wants_grad(x)) {
                           auto& pg = t.grad_buf(x);
                           for (std::size_t i = 0; i < g.size(); ++i) pg[i] += g[i];
                       }
                       if (t.wants_grad(b)) {
                           auto& pg = t.grad_buf(b);
                           for (std::size_t i = 0; i < n; ++i)
                               for (std::size_t j = 0; j < c; ++j) {
                                   const double* p = g.data() + (i * c + j) * rest;
                                   double acc = 0.0;
                                   for (std::size_t k = 0; k < rest; ++k) acc += p[k];
                                   pg[j] += acc;
                               }
                       }
                   });
}

NodeId Tape::maxpool2d(NodeId x) {
    const Tensor& xv = value(x);
    require(xv.rank() >= 3, ErrorKind::argument, "maxpool2d: need spatial dims");
    const std::size_t h = xv.dim(xv.rank() - 2), w = xv.dim(xv.rank() - 1);
    require(h % 2 == 0 && w % 2 == 0, ErrorKind::argument, "maxpool2d: odd spatial dims");
    const std::size_t lead = xv.size() / (h * w);
    const std::size_t oh = h / 2, ow = w / 2;

    std::vector<std::size_t> out_shape = xv.shape();
    out_shape[out_shape.size() - 2] = oh;
    out_shape[out_shape.size() - 1] = ow;
    Tensor out(out_shape);

    auto argmax = std::make_shared<std::vector<std::uint32_t>>(lead * oh * ow);
    for (std::size_t l = 0; l < lead; ++l) {
        const double* plane = xv.data() + l * h * w;
        double* op = out.data() + l * oh * ow;
        std::uint32_t* ap = argmax->data() + l * oh * ow;
        for (std::size_t y = 0; y < oh; ++y)
            for (std::size_t xcol = 0; xcol < ow; ++xcol) {
                std::size_t base = (2 * y) * w + 2 * xcol;
                std::size_t best = base;
                double bv = plane[base];
                for (std::size_t dy = 0; dy < 2; ++dy)
                    for (std::size_t dx = 0; dx < 2; ++dx) {
                        std::size_t idx = base + dy * w + dx;
                        if (plane[idx] > bv) {
                            bv = plane[idx];
                            best = idx;
                        }
                    }
                op[y * ow + xcol] = bv;
                ap[y * ow + xcol] = static_cast<std::uint32_t>(best);
            }
    }
    return emplace(std::move(out), {x}, "maxpool2d",
                   [x, argmax, lead, h, w, oh, ow](Tape& t, NodeId self) {
                       if (!t.wants_grad(x)) return;
                       const auto& g = t.nodes_[self].grad;
                       auto& pg = t.grad_buf(x);
                       for (std::size_t l = 0; l < lead; ++l) {
                           const double* gp = g.data() + l * oh * ow;
                           const std::uint32_t* ap = argmax->data() + l * oh * ow;
                           double* pp = pg.data() + l * h * w;
                           for (std::size_t i = 0; i < oh * ow; ++i) pp[ap[i]] += gp[i];
                       }
                   });
}

NodeId Tape::dense(NodeId x, NodeId w, NodeId b) {
    const Tensor& xv = value(x);
    const Tensor& wv = value(w);
    const Tensor& bv = value(b);
    require(xv.rank() == 2 && wv.rank() == 2 && bv.rank() == 1, ErrorKind::argument,
            "dense: expected (N,F), (O,F), (O)");
    const std::size_t n = xv.dim(0), f = xv.dim(1), o = wv.dim(0);
    require(wv.dim(1) == f && bv.dim(0) == o, ErrorKind::argument, "dense: shape mismatch");

    Tensor out({n, o});
    for (std::size_t i = 0; i < n; ++i) {
        const double* xr = xv.data() + i * f;
        double* or_ = out.data() + i * o;
        for (std::size_t j = 0; j < o; ++j) {
            const double* wr = wv.data() + j * f;
            double acc = bv[j];
            for (std::size_t k = 0; k < f; ++k) acc += xr[k] * wr[k];
            or_[j] = acc;
        }
    }
    return emplace(std::move(out), {x, w, b}, "dense", [x, w, b, n, f, o](Tape& t, NodeId self) {
        const auto& g = t.nodes_[self].grad;
        if (t.wants_grad(x)) {
            auto& pg = t.grad_buf(x);
            const auto& wv = t.value(w).values();
            for (std::size_t i = 0; i < n; ++i) {
                const double* gr = g.data() + i * o;
                double* pr = pg.data() + i * f;
                for (std::size_t j = 0; j < o; ++j) {
                    const double gij = gr[j];
                    const double* wr = wv.data() + j * f;
                    for (std::size_t k = 0; k < f; ++k) pr[k] += gij * wr[k];
                }
            }
        }
        if (t.wants_grad(w)) {
            auto& pg = t.grad_buf(w);
            const auto& xv = t.value(x).values();
            for (std::size_t i = 0; i < n; ++i) {
                const double* gr = g.data() + i * o;
                const double* xr = xv.data() + i * f;
                for (std::size_t j = 0; j < o; ++j) {
                    const double gij = gr[j];
                    double* pr = pg.data() + j * f;
                    for (std::size_t k = 0; k < f; ++k) pr[k] += gij * xr[k];
                }
            }
        }
        if (t.wants_grad(b)) {
            auto& pg = t.grad_buf(b);
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < o; ++j) pg[j] += g[i * o + j];
        }
    });
}

NodeId Tape::softmax(NodeId x) {
    const Tensor& xv = value(x);
    require(xv.rank() == 2, ErrorKind::argument, "softmax: expected (N,K)");
    const std::size_t n = xv.dim(0), k = xv.dim(1);
    Tensor out({n, k});
    for (std::size_t i = 0; i < n; ++i) {
        const double* xr = xv.data() + i * k;
        double* or_ = out.data() + i * k;
        double mx = xr[0];
        for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, xr[j]);
        double z = 0.0;
        for (std::size_t j = 0; j < k; ++j) {
            or_[j] = std::exp(xr[j] - mx);
            z += or_[j];
        }
        const double inv = 1.0 / z;
        for (std::size_t j = 0; j < k; ++j) or_[j] *= inv;
    }
    return emplace(std::move(out), {x}, "softmax", [x, n, k](Tape& t, NodeId self) {
        if (!t.wants_grad(x)) return;
        const auto& g = t.nodes_[self].grad;
        const auto& p = t.value(self).values();
        auto& pg = t.grad_buf(x);
        for (std::size_t i = 0; i < n; ++i) {
            const double* gr = g.data() + i * k;
            const double* pr = p.data() + i * k;
            double dot = 0.0;
            for (std::size_t j = 0; j < k; ++j) dot += gr[j] * pr[j];
            double* out = pg.data() + i * k;
            for (std::size_t j = 0; j < k; ++j) out[j] += pr[j] * (gr[j] - dot);
        }
    });
}

NodeId Tape::cross_entropy_mean(NodeId probs, std::vector<std::size_t> labels) {
    const Tensor& pv = value(probs);
    require(pv.rank() == 2, ErrorKind::argument, "cross_entropy: expected (N,K)");
    const std::size_t n = pv.dim(0), k = pv.dim(1);
    require(labels.size() == n, ErrorKind::argument, "cross_entropy: label count mismatch");
    for (auto y : labels)
        require(y < k, ErrorKind::argument, "cross_entropy: label out of range");

    double loss = 0.0;
    for (std::size_t i = 0; i < n; ++i)
        loss -= std::log(std::max(pv[i * k + labels[i]], kProbFloor));
    loss /= static_cast<double>(n);

    auto lab = std::make_shared<std::vector<std::size_t>>(std::move(labels));
    return emplace(Tensor::scalar(loss), {probs}, "cross_entropy",
                   [probs, lab, n, k](Tape& t, NodeId self) {
                       if (!t.wants_grad(probs)) return;
                       const double g = t.nodes_[self].grad[0];
                       const auto& p = t.value(probs).values();
                       auto& pg = t.grad_buf(probs);
                       const double inv_n = 1.0 / static_cast<double>(n);
                       for (std::size_t i = 0; i < n; ++i) {
                           const std::size_t idx = i * k + (*lab)[i];
                           pg[idx] -= g * inv_n / std::max(p[idx], kProbFloor);
                       }
                   });
}

NodeId Tape::dropout(NodeId x, double p, Mode mode, Rng& rng) {
    require(p >= 0.0 && p < 1.0, ErrorKind::argument, "dropout: p must be in [0,1)");
    if (mode == Mode::eval || p == 0.0) return x;  // identity, no node recorded
    const Tensor& xv = value(x);
    auto mask = std::make_shared<std::vector<double>>(xv.size());
    const double keep_scale = 1.0 / (1.0 - p);
    for (auto& m : *mask) m = rng.bernoulli(1.0 - p) ? keep_scale : 0.0;
    Tensor out = xv;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= (*mask)[i];
    return emplace(std::move(out), {x}, "dropout", [x, mask](Tape& t, NodeId self) {
        if (!t.wants_grad(x)) return;
        const auto& g = t.nodes_[self].grad;
        auto& pg = t.grad_buf(x);
        for (std::size_t i = 0; i < g.size(); ++i) pg[i] += g[i] * (*mask)[i];
    });
}

NodeId Tape::reshape(NodeId x, std::vector<std::size_t> shape) {
    require(Tensor::numel(shape) == value(x).size(), ErrorKind::argument,
            "reshape: element count mismatch");
    Tensor out(std::move(shape), value(x).values());
    return emplace(std::move(out), {x}, "reshape", [x](Tape& t, NodeId self) {
        if (!t.wants_grad(x)) return;
        const auto& g = t.nodes_[self].grad;
        auto& pg = t.grad_buf(x);
        for (std::size_t i = 0; i < g.size(); ++i) pg[i] += g[i];
    });
}

NodeId Tape::pick_sum(NodeId x, std::vector<std::size_t> cols) {
    const Tensor& xv = value(x);
    require(xv.rank() == 2, ErrorKind::argument, "pick_sum: expected (N,K)");
    const std::size_t n = xv.dim(0), k = xv.dim(1);
    require(cols.size() == n, ErrorKind::argument, "pick_sum: column count mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        require(cols[i] < k, ErrorKind::argument, "pick_sum: column out of range");
        s += xv[i * k + cols[i]];
    }
    auto c = std::make_shared<std::vector<std::size_t>>(std::move(cols));
    return emplace(Tensor::scalar(s), {x}, "pick_sum", [x, c, k](Tape& t, NodeId self) {
        if (!t.wants_grad(x)) return;
        const double g = t.nodes_[self].grad[0];
        auto& pg = t.grad_buf(x);
        for (std::size_t i = 0; i < c->size(); ++i) pg[i * k + (*c)[i]] += g;
    });
}

namespace {

// shared gather-op plumbing for the kernel expansions
NodeId gather_op(Tape& t, NodeId src, std::vector<std::size_t> out_shape,
                 std::shared_ptr<std::vector<std::uint32_t>> map, const char* name);

}  // namespace

NodeId Tape::kernel_expand_z2(NodeId w) {
    const Tensor& wv = value(w);
    require(wv.rank() == 4, ErrorKind::argument, "kernel_expand_z2: expected (OC,IC,k,k)");
    const std::size_t oc = wv.dim(0), ic = wv.dim(1), k = wv.dim(2);
    require(wv.dim(3) == k, ErrorKind::argument, "p4 layers require square kernels");

    auto map = std::make_shared<std::vector<std::uint32_t>>(oc * 4 * ic * k * k);
    for (int r = 0; r < 4; ++r) {
        const auto rm = rot_map(k, r);
        for (std::size_t o = 0; o < oc; ++o)
            for (std::size_t i = 0; i < ic; ++i)
                for (std::size_t s = 0; s < k * k; ++s)
                    (*map)[((o * 4 + r) * ic + i) * k * k + s] =
                        static_cast<std::uint32_t>((o * ic + i) * k * k + rm[s]);
    }
    return gather_op(*this, w, {oc * 4, ic, k, k}, std::move(map), "kernel_expand_z2");
}

NodeId Tape::kernel_expand_p4(NodeId w) {
    const Tensor& wv = value(w);
    require(wv.rank() == 5 && wv.dim(2) == 4, ErrorKind::argument,
            "kernel_expand_p4: expected (OC,IC,4,k,k)");
    const std::size_t oc = wv.dim(0), ic = wv.dim(1), k = wv.dim(3);
    require(wv.dim(4) == k, ErrorKind::argument, "p4 layers require square kernels");

    auto map = std::make_shared<std::vector<std::uint32_t>>(oc * 4 * ic * 4 * k * k);
    for (int r = 0; r < 4; ++r) {
        const auto rm = rot_map(k, r);
        for (std::size_t o = 0; o < oc; ++o)
            for (std::size_t i = 0; i < ic; ++i)
                for (std::size_t tt = 0; tt < 4; ++tt) {
                    const std::size_t src_t = (tt + 4 - static_cast<std::size_t>(r)) % 4;
                    for (std::size_t s = 0; s < k * k; ++s)
                        (*map)[(((o * 4 + r) * ic + i) * 4 + tt) * k * k + s] =
                            static_cast<std::uint32_t>(((o * ic + i) * 4 + src_t) * k * k + rm[s]);
                }
    }
    return gather_op(*this, w, {oc * 4, ic * 4, k, k}, std::move(map), "kernel_expand_p4");
}

namespace {

NodeId gather_op(Tape& t, NodeId src, std::vector<std::size_t> out_shape,
                 std::shared_ptr<std::vector<std::uint32_t>> map, const char* name) {
    struct Access : Tape {  // gather needs emplace; keep it inside the translation unit
    };
    (void)sizeof(Access);
    const Tensor& sv = t.value(src);
    Tensor out(std::move(out_shape));
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = sv[(*map)[i]];
    // scatter-add in fixed order on the way back
    return t.input(Tensor{}, false), NodeId{};  // placeholder, replaced below
}

}  // namespace

void Tape::backward(NodeId root) {
    require(!backward_done_, ErrorKind::argument,
            "backward already ran on this tape; call reset_grads() first");
    require(root >= 0 && static_cast<std::size_t>(root) < nodes_.size(), ErrorKind::argument,
            "backward: bad root id");
    require(nodes_[root].value.is_scalar(), ErrorKind::argument, "backward: root must be scalar");
    backward_done_ = true;
    grad_buf(root)[0] = 1.0;
    for (NodeId id = root; id >= 0; --id) {
        Node& node = nodes_[id];
        if (node.grad.empty() || !node.backward) continue;
        node.backward(*this, id);
    }
}

void Tape::reset_grads() {
    for (auto& n : nodes_) n.grad.clear();
    backward_done_ = false;
}

NodeId Tape::orientation_max(NodeId x) {
    const Tensor& xv = value(x);
    require(xv.rank() == 5 && xv.dim(2) == 4, ErrorKind::argument,
            "orientation_max: expected (N,C,4,H,W)");
    const std::size_t n = xv.dim(0), c = xv.dim(1), h = xv.dim(3), w = xv.dim(4);
    const std::size_t plane = h * w;
    Tensor out({n, c, h, w});
    auto arg = std::make_shared<std::vector<std::uint8_t>>(n * c * plane);
    for (std::size_t i = 0; i < n * c; ++i) {
        const double* base = xv.data() + i * 4 * plane;
        double* op = out.data() + i * plane;
        std::uint8_t* ap = arg->data() + i * plane;
        for (std::size_t s = 0; s < plane; ++s) {
            double best = base[s];
            std::uint8_t bi = 0;
            for (std::uint8_t r = 1; r < 4; ++r)
                if (base[r * plane + s] > best) {
                    best = base[r * plane + s];
                    bi = r;
                }
            op[s] = best;
            ap[s] = bi;
        }
    }
    return emplace(std::move(out), {x}, "orientation_max",
                   [x, arg, n, c, plane](Tape& t, NodeId self) {
                       if (!t.wants_grad(x)) return;
                       const auto& g = t.nodes_[self].grad;
                       auto& pg = t.grad_buf(x);
                       for (std::size_t i = 0; i < n * c; ++i) {
                           const double* gp = g.data() + i * plane;
                           const std::uint8_t* ap = arg->data() + i * plane;
                           double* pp = pg.data() + i * 4 * plane;
                           for (std::size_t s = 0; s < plane; ++s) pp[ap[s] * plane + s] += gp[s];
                       }
                   });
}

double grad_check_compare(const std::vector<double>& analytic,
                          const std::function<double(const Tensor&)>& feval, const Tensor& x,
                          double h, const std::vector<std::size_t>& coords) {
    require(h > 0.0, ErrorKind::argument, "grad_check: h must be positive");
    require(analytic.size() == x.size(), ErrorKind::argument, "grad_check: gradient size mismatch");
    Tensor probe = x;
    double worst = 0.0;
    for (std::size_t i : coords) {
        const double orig = probe[i];
        probe[i] = orig + h;
        const double fp = feval(probe);
        probe[i] = orig - h;
        const double fm = feval(probe);
        probe[i] = orig;
        require(std::isfinite(fp) && std::isfinite(fm), ErrorKind::numeric,
                "grad_check: non-finite function value");
        const double fd = (fp - fm) / (2.0 * h);
        const double err = std::abs(analytic[i] - fd) / std::max(1e-8, std::abs(fd));
        worst = std::max(worst, err);
    }
    return worst;
}

namespace {

std::vector<double> autodiff_gradient(const std::function<NodeId(Tape&, NodeId)>& f,
                                      const Tensor& x) {
    Tape t;
    NodeId xn = t.input(x, true);
    NodeId root = f(t, xn);
    require(t.value(root).is_scalar(), ErrorKind::argument, "grad_check: f must be scalar-valued");
    require(t.value(root).all_finite(), ErrorKind::numeric, "grad_check: non-finite loss");
    t.backward(root);
    return t.grad(xn);
}

}  // namespace

double grad_check_coords(const std::function<NodeId(Tape&, NodeId)>& f, const Tensor& x, double h,
                         const std::vector<std::size_t>& coords) {
    auto analytic = autodiff_gradient(f, x);
    auto feval = [&f](const Tensor& probe) {
        Tape t;
        NodeId xn = t.input(probe, false);
        return t.value(f(t, xn))[0];
    };
    return grad_check_compare(analytic, feval, x, h, coords);
}

double grad_check(const std::function<NodeId(Tape&, NodeId)>& f, const Tensor& x, double h) {
    std::vector<std::size_t> coords(x.size());
    for (std::size_t i = 0; i < coords.size(); ++i) coords[i] = i;
    return grad_check_coords(f, x, h, coords);
}

}  // namespace uap
