#include "dcv/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace dcv {

namespace {

template <typename S>
using NodePtr = std::shared_ptr<Node<S>>;

template <typename S, typename Expr>
void acc(const NodePtr<S>& n, const Expr& g) {
    if (n && n->requires_grad) n->ensure_grad() += g;
}

template <typename S>
bool wants(const NodePtr<S>& n) {
    return n && n->requires_grad;
}

template <typename S>
void require_same_shape(const Var<S>& a, const Var<S>& b, const char* op) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

template <typename S>
void require_rank(const Var<S>& a, std::size_t rank, const char* op) {
    if (a.shape().size() != rank)
        throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " + shape_str(a.shape()));
}

// Spatial extent (product of all dims after the first).
template <typename S>
Index inner_size(const Var<S>& x) {
    return x.numel() / x.dim(0);
}

}  // namespace

// ---- elementwise -----------------------------------------------------------

template <typename S>
Var<S> add(const Var<S>& a, const Var<S>& b) {
    require_same_shape(a, b, "add");
    Tensor<S> out(a.shape(), a.value().data + b.value().data);
    return make_result<S>(std::move(out), {a, b}, [an = a.node(), bn = b.node()](Node<S>& n) {
        acc(an, n.grad);
        acc(bn, n.grad);
    });
}

template <typename S>
Var<S> sub(const Var<S>& a, const Var<S>& b) {
    require_same_shape(a, b, "sub");
    Tensor<S> out(a.shape(), a.value().data - b.value().data);
    return make_result<S>(std::move(out), {a, b}, [an = a.node(), bn = b.node()](Node<S>& n) {
        acc(an, n.grad);
        acc(bn, -n.grad);
    });
}

template <typename S>
Var<S> mul(const Var<S>& a, const Var<S>& b) {
    require_same_shape(a, b, "mul");
    Tensor<S> out(a.shape(), a.value().data * b.value().data);
    return make_result<S>(std::move(out), {a, b}, [an = a.node(), bn = b.node()](Node<S>& n) {
        acc(an, n.grad * bn->value.data);
        acc(bn, n.grad * an->value.data);
    });
}

template <typename S>
Var<S> scale(const Var<S>& a, S factor) {
    Tensor<S> out(a.shape(), a.value().data * factor);
    return make_result<S>(std::move(out), {a}, [an = a.node(), factor](Node<S>& n) { acc(an, n.grad * factor); });
}

template <typename S>
Var<S> silu(const Var<S>& a) {
    const Buffer<S>& x = a.value().data;
    Buffer<S> sig = (S(1) + (-x).exp()).inverse();
    Tensor<S> out(a.shape(), x * sig);
    return make_result<S>(std::move(out), {a}, [an = a.node(), sig = std::move(sig)](Node<S>& n) {
        const Buffer<S>& xv = an->value.data;
        acc(an, n.grad * sig * (S(1) + xv * (S(1) - sig)));
    });
}

template <typename S>
Var<S> gelu(const Var<S>& a) {
    const S k = S(0.7978845608028654);  // sqrt(2/pi)
    const S c = S(0.044715);
    const Buffer<S>& x = a.value().data;
    Buffer<S> th = (k * (x + c * x.cube())).tanh();
    Tensor<S> out(a.shape(), S(0.5) * x * (S(1) + th));
    return make_result<S>(std::move(out), {a}, [an = a.node(), th = std::move(th), k, c](Node<S>& n) {
        const Buffer<S>& xv = an->value.data;
        Buffer<S> d = S(0.5) * (S(1) + th) + S(0.5) * xv * (S(1) - th.square()) * k * (S(1) + S(3) * c * xv.square());
        acc(an, n.grad * d);
    });
}

template <typename S>
Var<S> reshape(const Var<S>& a, Shape shape) {
    if (numel(shape) != a.numel())
        throw ShapeError("reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape));
    Tensor<S> out(std::move(shape), a.value().data);
    return make_result<S>(std::move(out), {a}, [an = a.node()](Node<S>& n) { acc(an, n.grad); });
}

// ---- reductions and losses ---------------------------------------------------

template <typename S>
Var<S> sum(const Var<S>& a) {
    Tensor<S> out(Shape{}, Buffer<S>::Constant(1, a.value().data.sum()));
    return make_result<S>(std::move(out), {a}, [an = a.node()](Node<S>& n) {
        acc(an, Buffer<S>::Constant(an->value.numel(), n.grad[0]));
    });
}

template <typename S>
Var<S> mean(const Var<S>& a) {
    const Index count = a.numel();
    Tensor<S> out(Shape{}, Buffer<S>::Constant(1, a.value().data.sum() / S(count)));
    return make_result<S>(std::move(out), {a}, [an = a.node(), count](Node<S>& n) {
        acc(an, Buffer<S>::Constant(count, n.grad[0] / S(count)));
    });
}

template <typename S>
Var<S> mse_loss(const Var<S>& pred, const Var<S>& target) {
    require_same_shape(pred, target, "mse_loss");
    Buffer<S> diff = pred.value().data - target.value().data;
    const Index count = diff.size();
    Tensor<S> out(Shape{}, Buffer<S>::Constant(1, diff.square().sum() / S(count)));
    return make_result<S>(std::move(out), {pred, target},
                          [pn = pred.node(), tn = target.node(), diff = std::move(diff), count](Node<S>& n) {
                              const S g = n.grad[0] * S(2) / S(count);
                              acc(pn, diff * g);
                              acc(tn, -diff * g);
                          });
}

template <typename S>
Var<S> l1_loss(const Var<S>& pred, const Var<S>& target) {
    require_same_shape(pred, target, "l1_loss");
    Buffer<S> diff = pred.value().data - target.value().data;
    const Index count = diff.size();
    Tensor<S> out(Shape{}, Buffer<S>::Constant(1, diff.abs().sum() / S(count)));
    return make_result<S>(std::move(out), {pred, target},
                          [pn = pred.node(), tn = target.node(), diff = std::move(diff), count](Node<S>& n) {
                              const S g = n.grad[0] / S(count);
                              Buffer<S> sgn = diff.sign() * g;
                              acc(pn, sgn);
                              acc(tn, -sgn);
                          });
}

template <typename S>
Var<S> spatial_gradient_l1(const Var<S>& pred, const Var<S>& target) {
    require_same_shape(pred, target, "spatial_gradient_l1");
    require_rank(pred, 4, "spatial_gradient_l1");
    const Index planes = pred.dim(0) * pred.dim(1), H = pred.dim(2), W = pred.dim(3);
    const Index count = planes * ((H - 1) * W + H * (W - 1));
    if (count == 0) throw ShapeError("spatial_gradient_l1: frames must be larger than 1x1");
    const S* p = pred.ptr();
    const S* t = target.ptr();
    // Sign of (d pred - d target) for every vertical, then every horizontal difference.
    Buffer<S> sgn(count);
    double total = 0;
    Index k = 0;
    for (Index pl = 0; pl < planes; ++pl) {
        const S* pp = p + pl * H * W;
        const S* tp = t + pl * H * W;
        for (Index y = 0; y + 1 < H; ++y)
            for (Index x = 0; x < W; ++x) {
                const S d = (pp[(y + 1) * W + x] - pp[y * W + x]) - (tp[(y + 1) * W + x] - tp[y * W + x]);
                total += std::abs(d);
                sgn[k++] = S((d > 0) - (d < 0));
            }
        for (Index y = 0; y < H; ++y)
            for (Index x = 0; x + 1 < W; ++x) {
                const S d = (pp[y * W + x + 1] - pp[y * W + x]) - (tp[y * W + x + 1] - tp[y * W + x]);
                total += std::abs(d);
                sgn[k++] = S((d > 0) - (d < 0));
            }
    }
    Tensor<S> out(Shape{}, Buffer<S>::Constant(1, S(total / double(count))));
    return make_result<S>(
        std::move(out), {pred, target},
        [pn = pred.node(), tn = target.node(), sgn = std::move(sgn), planes, H, W, count](Node<S>& n) {
            const S g = n.grad[0] / S(count);
            Buffer<S> gp = Buffer<S>::Zero(planes * H * W);
            Index k = 0;
            for (Index pl = 0; pl < planes; ++pl) {
                S* q = gp.data() + pl * H * W;
                for (Index y = 0; y + 1 < H; ++y)
                    for (Index x = 0; x < W; ++x) {
                        const S e = sgn[k++] * g;
                        q[(y + 1) * W + x] += e;
                        q[y * W + x] -= e;
                    }
                for (Index y = 0; y < H; ++y)
                    for (Index x = 0; x + 1 < W; ++x) {
                        const S e = sgn[k++] * g;
                        q[y * W + x + 1] += e;
                        q[y * W + x] -= e;
                    }
            }
            acc(pn, gp);
            acc(tn, -gp);
        });
}

// ---- indexing ------------------------------------------------------------------

template <typename S>
Var<S> gather(const Var<S>& a, const std::vector<Index>& index, Shape out_shape) {
    if (Index(index.size()) != numel(out_shape)) throw ShapeError("gather: index size does not match output shape");
    Tensor<S> out(std::move(out_shape));
    const S* src = a.ptr();
    for (std::size_t i = 0; i < index.size(); ++i) out.data[Index(i)] = src[index[i]];
    return make_result<S>(std::move(out), {a}, [an = a.node(), index](Node<S>& n) {
        if (!wants(an)) return;
        Buffer<S>& g = an->ensure_grad();
        for (std::size_t i = 0; i < index.size(); ++i) g[index[i]] += n.grad[Index(i)];
    });
}

template <typename S>
Var<S> slice_flat(const Var<S>& a, Index offset, Shape out_shape) {
    const Index count = numel(out_shape);
    if (offset < 0 || offset + count > a.numel()) throw ShapeError("slice_flat: range out of bounds");
    Tensor<S> out(std::move(out_shape), a.value().data.segment(offset, count));
    return make_result<S>(std::move(out), {a}, [an = a.node(), offset, count](Node<S>& n) {
        if (wants(an)) an->ensure_grad().segment(offset, count) += n.grad;
    });
}

// ---- video -----------------------------------------------------------------------

template <typename S>
Var<S> concat_time(const std::vector<Var<S>>& parts) {
    if (parts.empty()) throw ShapeError("concat_time: no inputs");
    for (const auto& p : parts) require_rank(p, 4, "concat_time");
    const Index C = parts[0].dim(0), H = parts[0].dim(2), W = parts[0].dim(3);
    Index T = 0;
    for (const auto& p : parts) {
        if (p.dim(0) != C || p.dim(2) != H || p.dim(3) != W)
            throw ShapeError("concat_time: incompatible part " + shape_str(p.shape()));
        T += p.dim(1);
    }
    if (parts.size() == 1) return parts[0];
    const Index plane = H * W;
    Tensor<S> out(Shape{C, T, H, W});
    std::vector<Index> offsets;
    Index t0 = 0;
    for (const auto& p : parts) {
        offsets.push_back(t0);
        const Index Tp = p.dim(1);
        for (Index c = 0; c < C; ++c)
            std::memcpy(out.ptr() + (c * T + t0) * plane, p.ptr() + c * Tp * plane, sizeof(S) * Tp * plane);
        t0 += Tp;
    }
    std::vector<NodePtr<S>> nodes;
    for (const auto& p : parts) nodes.push_back(p.node());
    return make_result<S>(std::move(out), parts, [nodes, offsets, C, T, plane](Node<S>& n) {
        for (std::size_t i = 0; i < nodes.size(); ++i) {
            if (!wants(nodes[i])) continue;
            const Index Tp = nodes[i]->value.dim(1);
            Buffer<S>& g = nodes[i]->ensure_grad();
            for (Index c = 0; c < C; ++c)
                g.segment(c * Tp * plane, Tp * plane) += n.grad.segment((c * T + offsets[i]) * plane, Tp * plane);
        }
    });
}

template <typename S>
Var<S> slice_time(const Var<S>& x, Index start, Index length) {
    require_rank(x, 4, "slice_time");
    const Index C = x.dim(0), T = x.dim(1), H = x.dim(2), W = x.dim(3), plane = H * W;
    if (start < 0 || length < 0 || start + length > T)
        throw ShapeError("slice_time: range [" + std::to_string(start) + ", " + std::to_string(start + length) +
                         ") outside T=" + std::to_string(T));
    if (start == 0 && length == T) return x;
    Tensor<S> out(Shape{C, length, H, W});
    for (Index c = 0; c < C; ++c)
        std::memcpy(out.ptr() + c * length * plane, x.ptr() + (c * T + start) * plane, sizeof(S) * length * plane);
    return make_result<S>(std::move(out), {x}, [xn = x.node(), C, T, start, length, plane](Node<S>& n) {
        if (!wants(xn)) return;
        Buffer<S>& g = xn->ensure_grad();
        for (Index c = 0; c < C; ++c)
            g.segment((c * T + start) * plane, length * plane) += n.grad.segment(c * length * plane, length * plane);
    });
}

template <typename S>
Var<S> repeat_frame(const Var<S>& x, Index frame, Index count) {
    require_rank(x, 4, "repeat_frame");
    const Index C = x.dim(0), T = x.dim(1), plane = x.dim(2) * x.dim(3);
    if (frame < 0 || frame >= T) throw ShapeError("repeat_frame: frame out of range");
    std::vector<Index> index(std::size_t(C * count * plane));
    std::size_t k = 0;
    for (Index c = 0; c < C; ++c)
        for (Index r = 0; r < count; ++r)
            for (Index i = 0; i < plane; ++i) index[k++] = (c * T + frame) * plane + i;
    return gather(x, index, Shape{C, count, x.dim(2), x.dim(3)});
}

namespace {

// Unfolds x [Cin, T, H, W] into rows (ci, dt, dy, dx) x columns (to, y, x).
template <typename S>
void im2col(const S* x, Index Cin, Index T, Index H, Index W, Index kt, Index kh, Index kw, S* cols) {
    const Index To = T - kt + 1, ph = kh / 2, pw = kw / 2, P = To * H * W;
    Index row = 0;
    for (Index ci = 0; ci < Cin; ++ci)
        for (Index dt = 0; dt < kt; ++dt)
            for (Index dy = 0; dy < kh; ++dy)
                for (Index dx = 0; dx < kw; ++dx, ++row) {
                    S* dst = cols + row * P;
                    const Index x0 = std::max<Index>(0, pw - dx), x1 = std::min<Index>(W, W + pw - dx);
                    for (Index to = 0; to < To; ++to) {
                        const S* frame = x + (ci * T + to + dt) * H * W;
                        for (Index y = 0; y < H; ++y, dst += W) {
                            const Index yy = y + dy - ph;
                            if (yy < 0 || yy >= H || x1 <= x0) {
                                std::fill(dst, dst + W, S(0));
                                continue;
                            }
                            std::fill(dst, dst + x0, S(0));
                            std::memcpy(dst + x0, frame + yy * W + (x0 + dx - pw), sizeof(S) * (x1 - x0));
                            std::fill(dst + x1, dst + W, S(0));
                        }
                    }
                }
}

template <typename S>
void col2im(const S* cols, Index Cin, Index T, Index H, Index W, Index kt, Index kh, Index kw, S* dx_out) {
    const Index To = T - kt + 1, ph = kh / 2, pw = kw / 2, P = To * H * W;
    Index row = 0;
    for (Index ci = 0; ci < Cin; ++ci)
        for (Index dt = 0; dt < kt; ++dt)
            for (Index dy = 0; dy < kh; ++dy)
                for (Index dx = 0; dx < kw; ++dx, ++row) {
                    const S* src = cols + row * P;
                    const Index x0 = std::max<Index>(0, pw - dx), x1 = std::min<Index>(W, W + pw - dx);
                    for (Index to = 0; to < To; ++to) {
                        S* frame = dx_out + (ci * T + to + dt) * H * W;
                        for (Index y = 0; y < H; ++y, src += W) {
                            const Index yy = y + dy - ph;
                            if (yy < 0 || yy >= H) continue;
                            S* d = frame + yy * W + (x0 + dx - pw);
                            for (Index i = x0; i < x1; ++i) *d++ += src[i];
                        }
                    }
                }
}

}  // namespace

template <typename S>
Var<S> conv3d(const Var<S>& x, const Var<S>& weight, const Var<S>& bias) {
    require_rank(x, 4, "conv3d");
    require_rank(weight, 5, "conv3d weight");
    const Index Cin = x.dim(0), T = x.dim(1), H = x.dim(2), W = x.dim(3);
    const Index Cout = weight.dim(0), kt = weight.dim(2), kh = weight.dim(3), kw = weight.dim(4);
    if (weight.dim(1) != Cin)
        throw ShapeError("conv3d: input has " + std::to_string(Cin) + " channels, weight expects " +
                         std::to_string(weight.dim(1)));
    if (kh % 2 == 0 || kw % 2 == 0) throw ShapeError("conv3d: spatial kernel sizes must be odd");
    if (T < kt) throw ShapeError("conv3d: temporal extent " + std::to_string(T) + " shorter than kernel");
    if (bias.defined() && bias.numel() != Cout) throw ShapeError("conv3d: bias size mismatch");
    const Index To = T - kt + 1, P = To * H * W, K = Cin * kt * kh * kw;
    const bool pointwise = (kt == 1 && kh == 1 && kw == 1);

    auto cols = std::make_shared<RowMatrix<S>>();
    if (!pointwise) {
        cols->resize(K, P);
        im2col(x.ptr(), Cin, T, H, W, kt, kh, kw, cols->data());
    }
    Tensor<S> out(Shape{Cout, To, H, W});
    {
        MatrixMap<S> o(out.ptr(), Cout, P);
        ConstMatrixMap<S> w(weight.ptr(), Cout, K);
        if (pointwise)
            o.noalias() = w * ConstMatrixMap<S>(x.ptr(), K, P);
        else
            o.noalias() = w * (*cols);
        if (bias.defined()) o.colwise() += Eigen::Map<const Eigen::Matrix<S, Eigen::Dynamic, 1>>(bias.ptr(), Cout);
    }
    return make_result<S>(
        std::move(out), {x, weight, bias},
        [xn = x.node(), wn = weight.node(), bn = bias.node(), cols, pointwise, Cin, T, H, W, kt, kh, kw, Cout, P,
         K](Node<S>& n) {
            ConstMatrixMap<S> g(n.grad.data(), Cout, P);
            if (wants(bn)) bn->ensure_grad() += g.rowwise().sum().transpose().array();
            if (wants(wn)) {
                MatrixMap<S> gw(wn->ensure_grad().data(), Cout, K);
                if (pointwise)
                    gw.noalias() += g * ConstMatrixMap<S>(xn->value.ptr(), K, P).transpose();
                else
                    gw.noalias() += g * cols->transpose();
            }
            if (wants(xn)) {
                ConstMatrixMap<S> w(wn->value.ptr(), Cout, K);
                if (pointwise) {
                    MatrixMap<S> gx(xn->ensure_grad().data(), K, P);
                    gx.noalias() += w.transpose() * g;
                } else {
                    RowMatrix<S> gcols = w.transpose() * g;
                    col2im(gcols.data(), Cin, T, H, W, kt, kh, kw, xn->ensure_grad().data());
                }
            }
        });
}

template <typename S>
Var<S> space_to_channel(const Var<S>& x, Index r) {
    require_rank(x, 4, "space_to_channel");
    const Index C = x.dim(0), T = x.dim(1), H = x.dim(2), W = x.dim(3);
    if (H % r || W % r) throw ShapeError("space_to_channel: H, W must be divisible by " + std::to_string(r));
    if (r == 1) return x;
    const Index Ho = H / r, Wo = W / r;
    std::vector<Index> index(std::size_t(x.numel()));
    std::size_t k = 0;
    for (Index c = 0; c < C; ++c)
        for (Index dy = 0; dy < r; ++dy)
            for (Index dx = 0; dx < r; ++dx)
                for (Index t = 0; t < T; ++t)
                    for (Index y = 0; y < Ho; ++y)
                        for (Index xx = 0; xx < Wo; ++xx)
                            index[k++] = ((c * T + t) * H + y * r + dy) * W + xx * r + dx;
    return gather(x, index, Shape{C * r * r, T, Ho, Wo});
}

template <typename S>
Var<S> channel_to_space(const Var<S>& x, Index r) {
    require_rank(x, 4, "channel_to_space");
    const Index Cr = x.dim(0), T = x.dim(1), H = x.dim(2), W = x.dim(3);
    if (Cr % (r * r)) throw ShapeError("channel_to_space: channels must be divisible by " + std::to_string(r * r));
    if (r == 1) return x;
    const Index C = Cr / (r * r), Ho = H * r, Wo = W * r;
    std::vector<Index> index(std::size_t(x.numel()));
    std::size_t k = 0;
    for (Index c = 0; c < C; ++c)
        for (Index t = 0; t < T; ++t)
            for (Index Y = 0; Y < Ho; ++Y)
                for (Index X = 0; X < Wo; ++X) {
                    const Index ci = c * r * r + (Y % r) * r + (X % r);
                    index[k++] = ((ci * T + t) * H + Y / r) * W + X / r;
                }
    return gather(x, index, Shape{C, T, Ho, Wo});
}

template <typename S>
Var<S> time_to_channel(const Var<S>& x, Index r) {
    require_rank(x, 4, "time_to_channel");
    const Index C = x.dim(0), T = x.dim(1), plane = x.dim(2) * x.dim(3);
    if (T % r) throw ShapeError("time_to_channel: T must be divisible by " + std::to_string(r));
    if (r == 1) return x;
    const Index To = T / r;
    std::vector<Index> index(std::size_t(x.numel()));
    std::size_t k = 0;
    for (Index c = 0; c < C; ++c)
        for (Index dt = 0; dt < r; ++dt)
            for (Index t = 0; t < To; ++t)
                for (Index i = 0; i < plane; ++i) index[k++] = (c * T + t * r + dt) * plane + i;
    return gather(x, index, Shape{C * r, To, x.dim(2), x.dim(3)});
}

template <typename S>
Var<S> channel_to_time(const Var<S>& x, Index r) {
    require_rank(x, 4, "channel_to_time");
    const Index Cr = x.dim(0), T = x.dim(1), plane = x.dim(2) * x.dim(3);
    if (Cr % r) throw ShapeError("channel_to_time: channels must be divisible by " + std::to_string(r));
    if (r == 1) return x;
    const Index C = Cr / r, To = T * r;
    std::vector<Index> index(std::size_t(x.numel()));
    std::size_t k = 0;
    for (Index c = 0; c < C; ++c)
        for (Index tt = 0; tt < To; ++tt)
            for (Index i = 0; i < plane; ++i) index[k++] = ((c * r + tt % r) * T + tt / r) * plane + i;
    return gather(x, index, Shape{C, To, x.dim(2), x.dim(3)});
}

template <typename S>
Var<S> channel_group_mean(const Var<S>& x, Index out_channels) {
    const Index C = x.dim(0);
    if (out_channels <= 0 || C % out_channels)
        throw ShapeError("channel_group_mean: " + std::to_string(C) + " channels not divisible into " +
                         std::to_string(out_channels) + " groups");
    const Index g = C / out_channels, inner = inner_size(x);
    Shape shape = x.shape();
    shape[0] = out_channels;
    Tensor<S> out(shape);
    for (Index o = 0; o < out_channels; ++o) {
        auto dst = out.data.segment(o * inner, inner);
        for (Index j = 0; j < g; ++j) dst += x.value().data.segment((o * g + j) * inner, inner);
        dst /= S(g);
    }
    return make_result<S>(std::move(out), {x}, [xn = x.node(), out_channels, g, inner](Node<S>& n) {
        if (!wants(xn)) return;
        Buffer<S>& gx = xn->ensure_grad();
        for (Index o = 0; o < out_channels; ++o)
            for (Index j = 0; j < g; ++j)
                gx.segment((o * g + j) * inner, inner) += n.grad.segment(o * inner, inner) / S(g);
    });
}

template <typename S>
Var<S> channel_repeat(const Var<S>& x, Index repeats) {
    const Index C = x.dim(0), inner = inner_size(x);
    if (repeats == 1) return x;
    Shape shape = x.shape();
    shape[0] = C * repeats;
    Tensor<S> out(shape);
    for (Index c = 0; c < C; ++c)
        for (Index j = 0; j < repeats; ++j)
            out.data.segment((c * repeats + j) * inner, inner) = x.value().data.segment(c * inner, inner);
    return make_result<S>(std::move(out), {x}, [xn = x.node(), C, repeats, inner](Node<S>& n) {
        if (!wants(xn)) return;
        Buffer<S>& gx = xn->ensure_grad();
        for (Index c = 0; c < C; ++c)
            for (Index j = 0; j < repeats; ++j)
                gx.segment(c * inner, inner) += n.grad.segment((c * repeats + j) * inner, inner);
    });
}

template <typename S>
Var<S> group_norm(const Var<S>& x, const Var<S>& gamma, const Var<S>& beta, Index groups, S eps) {
    const Index C = x.dim(0), inner = inner_size(x);
    if (groups <= 0 || C % groups) throw ShapeError("group_norm: channels not divisible by groups");
    if (gamma.numel() != C || beta.numel() != C) throw ShapeError("group_norm: affine size mismatch");
    const Index cg = C / groups, M = cg * inner;
    Buffer<S> xhat(x.numel());
    Buffer<S> inv_std(groups);
    Tensor<S> out(x.shape());
    for (Index gi = 0; gi < groups; ++gi) {
        auto seg = x.value().data.segment(gi * M, M);
        const S mu = seg.sum() / S(M);
        const S var = (seg - mu).square().sum() / S(M);
        inv_std[gi] = S(1) / std::sqrt(var + eps);
        xhat.segment(gi * M, M) = (seg - mu) * inv_std[gi];
    }
    for (Index c = 0; c < C; ++c)
        out.data.segment(c * inner, inner) = xhat.segment(c * inner, inner) * gamma.value().data[c] + beta.value().data[c];
    return make_result<S>(
        std::move(out), {x, gamma, beta},
        [xn = x.node(), gn = gamma.node(), bn = beta.node(), xhat = std::move(xhat), inv_std = std::move(inv_std), C,
         groups, cg, inner, M](Node<S>& n) {
            const Buffer<S>& g = n.grad;
            if (wants(gn) || wants(bn)) {
                Buffer<S> dg(C), db(C);
                for (Index c = 0; c < C; ++c) {
                    dg[c] = (g.segment(c * inner, inner) * xhat.segment(c * inner, inner)).sum();
                    db[c] = g.segment(c * inner, inner).sum();
                }
                acc(gn, dg);
                acc(bn, db);
            }
            if (!wants(xn)) return;
            Buffer<S> dxhat(g.size());
            for (Index c = 0; c < C; ++c)
                dxhat.segment(c * inner, inner) = g.segment(c * inner, inner) * gn->value.data[c];
            Buffer<S>& gx = xn->ensure_grad();
            for (Index gi = 0; gi < groups; ++gi) {
                auto dh = dxhat.segment(gi * M, M);
                auto xh = xhat.segment(gi * M, M);
                const S m1 = dh.sum() / S(M);
                const S m2 = (dh * xh).sum() / S(M);
                gx.segment(gi * M, M) += (dh - m1 - xh * m2) * inv_std[gi];
            }
            (void)cg;
        });
}

// ---- token matrices ----------------------------------------------------------------

template <typename S>
Var<S> linear(const Var<S>& x, const Var<S>& weight, const Var<S>& bias) {
    require_rank(x, 2, "linear");
    require_rank(weight, 2, "linear weight");
    const Index N = x.dim(0), K = x.dim(1), M = weight.dim(0);
    if (weight.dim(1) != K)
        throw ShapeError("linear: input width " + std::to_string(K) + " vs weight " + shape_str(weight.shape()));
    if (bias.defined() && bias.numel() != M) throw ShapeError("linear: bias size mismatch");
    Tensor<S> out(Shape{N, M});
    MatrixMap<S> o(out.ptr(), N, M);
    o.noalias() = ConstMatrixMap<S>(x.ptr(), N, K) * ConstMatrixMap<S>(weight.ptr(), M, K).transpose();
    if (bias.defined()) o.rowwise() += Eigen::Map<const Eigen::Matrix<S, 1, Eigen::Dynamic>>(bias.ptr(), M);
    return make_result<S>(std::move(out), {x, weight, bias},
                          [xn = x.node(), wn = weight.node(), bn = bias.node(), N, K, M](Node<S>& n) {
                              ConstMatrixMap<S> g(n.grad.data(), N, M);
                              if (wants(bn)) bn->ensure_grad() += g.colwise().sum().transpose().array();
                              if (wants(wn)) {
                                  MatrixMap<S> gw(wn->ensure_grad().data(), M, K);
                                  gw.noalias() += g.transpose() * ConstMatrixMap<S>(xn->value.ptr(), N, K);
                              }
                              if (wants(xn)) {
                                  MatrixMap<S> gx(xn->ensure_grad().data(), N, K);
                                  gx.noalias() += g * ConstMatrixMap<S>(wn->value.ptr(), M, K);
                              }
                          });
}

template <typename S>
Var<S> matmul(const Var<S>& a, const Var<S>& b) {
    require_rank(a, 2, "matmul");
    require_rank(b, 2, "matmul");
    const Index N = a.dim(0), K = a.dim(1), M = b.dim(1);
    if (b.dim(0) != K) throw ShapeError("matmul: inner dimensions differ");
    Tensor<S> out(Shape{N, M});
    MatrixMap<S>(out.ptr(), N, M).noalias() = ConstMatrixMap<S>(a.ptr(), N, K) * ConstMatrixMap<S>(b.ptr(), K, M);
    return make_result<S>(std::move(out), {a, b}, [an = a.node(), bn = b.node(), N, K, M](Node<S>& n) {
        ConstMatrixMap<S> g(n.grad.data(), N, M);
        if (wants(an)) {
            MatrixMap<S> ga(an->ensure_grad().data(), N, K);
            ga.noalias() += g * ConstMatrixMap<S>(bn->value.ptr(), K, M).transpose();
        }
        if (wants(bn)) {
            MatrixMap<S> gb(bn->ensure_grad().data(), K, M);
            gb.noalias() += ConstMatrixMap<S>(an->value.ptr(), N, K).transpose() * g;
        }
    });
}

template <typename S>
Var<S> layer_norm(const Var<S>& x, S eps) {
    require_rank(x, 2, "layer_norm");
    const Index N = x.dim(0), D = x.dim(1);
    Tensor<S> out(x.shape());
    Buffer<S> inv_std(N);
    for (Index i = 0; i < N; ++i) {
        auto row = x.value().data.segment(i * D, D);
        const S mu = row.sum() / S(D);
        const S var = (row - mu).square().sum() / S(D);
        inv_std[i] = S(1) / std::sqrt(var + eps);
        out.data.segment(i * D, D) = (row - mu) * inv_std[i];
    }
    Buffer<S> xhat = out.data;
    return make_result<S>(std::move(out), {x},
                          [xn = x.node(), xhat = std::move(xhat), inv_std = std::move(inv_std), N, D](Node<S>& n) {
                              if (!wants(xn)) return;
                              Buffer<S>& gx = xn->ensure_grad();
                              for (Index i = 0; i < N; ++i) {
                                  auto dh = n.grad.segment(i * D, D);
                                  auto xh = xhat.segment(i * D, D);
                                  const S m1 = dh.sum() / S(D);
                                  const S m2 = (dh * xh).sum() / S(D);
                                  gx.segment(i * D, D) += (dh - m1 - xh * m2) * inv_std[i];
                              }
                          });
}

template <typename S>
Var<S> modulate(const Var<S>& x, const Var<S>& shift, const Var<S>& scale_) {
    require_rank(x, 2, "modulate");
    const Index N = x.dim(0), D = x.dim(1);
    if (shift.numel() != D || scale_.numel() != D) throw ShapeError("modulate: shift/scale must have size D");
    Tensor<S> out(x.shape());
    {
        ConstMatrixMap<S> xm(x.ptr(), N, D);
        MatrixMap<S> o(out.ptr(), N, D);
        Eigen::Map<const Eigen::Array<S, 1, Eigen::Dynamic>> sh(shift.ptr(), D), sc(scale_.ptr(), D);
        o.array() = (xm.array().rowwise() * (S(1) + sc)).rowwise() + sh;
    }
    return make_result<S>(std::move(out), {x, shift, scale_},
                          [xn = x.node(), shn = shift.node(), scn = scale_.node(), N, D](Node<S>& n) {
                              ConstMatrixMap<S> g(n.grad.data(), N, D);
                              if (wants(shn)) shn->ensure_grad() += g.colwise().sum().transpose().array();
                              if (wants(scn)) {
                                  ConstMatrixMap<S> xm(xn->value.ptr(), N, D);
                                  scn->ensure_grad() += (g.array() * xm.array()).colwise().sum().transpose();
                              }
                              if (wants(xn)) {
                                  Eigen::Map<const Eigen::Array<S, 1, Eigen::Dynamic>> sc(scn->value.ptr(), D);
                                  MatrixMap<S> gx(xn->ensure_grad().data(), N, D);
                                  gx.array() += g.array().rowwise() * (S(1) + sc);
                              }
                          });
}

template <typename S>
Var<S> mul_rows(const Var<S>& x, const Var<S>& gate) {
    require_rank(x, 2, "mul_rows");
    const Index N = x.dim(0), D = x.dim(1);
    if (gate.numel() != D) throw ShapeError("mul_rows: gate must have size D");
    Tensor<S> out(x.shape());
    Eigen::Map<const Eigen::Array<S, 1, Eigen::Dynamic>> gv(gate.ptr(), D);
    MatrixMap<S>(out.ptr(), N, D).array() = ConstMatrixMap<S>(x.ptr(), N, D).array().rowwise() * gv;
    return make_result<S>(std::move(out), {x, gate}, [xn = x.node(), gn = gate.node(), N, D](Node<S>& n) {
        ConstMatrixMap<S> g(n.grad.data(), N, D);
        if (wants(gn)) {
            ConstMatrixMap<S> xm(xn->value.ptr(), N, D);
            gn->ensure_grad() += (g.array() * xm.array()).colwise().sum().transpose();
        }
        if (wants(xn)) {
            Eigen::Map<const Eigen::Array<S, 1, Eigen::Dynamic>> gv2(gn->value.ptr(), D);
            MatrixMap<S>(xn->ensure_grad().data(), N, D).array() += g.array().rowwise() * gv2;
        }
    });
}

template <typename S>
Var<S> add_rows(const Var<S>& x, const Var<S>& v) {
    require_rank(x, 2, "add_rows");
    const Index N = x.dim(0), D = x.dim(1);
    if (v.numel() != D) throw ShapeError("add_rows: vector must have size D");
    Tensor<S> out(x.shape());
    Eigen::Map<const Eigen::Matrix<S, 1, Eigen::Dynamic>> vv(v.ptr(), D);
    MatrixMap<S>(out.ptr(), N, D) = ConstMatrixMap<S>(x.ptr(), N, D).rowwise() + vv;
    return make_result<S>(std::move(out), {x, v}, [xn = x.node(), vn = v.node(), N, D](Node<S>& n) {
        acc(xn, n.grad);
        if (wants(vn)) vn->ensure_grad() += ConstMatrixMap<S>(n.grad.data(), N, D).colwise().sum().transpose().array();
    });
}

template <typename S>
Var<S> attention(const Var<S>& qkv, Index heads) {
    require_rank(qkv, 2, "attention");
    const Index N = qkv.dim(0), D3 = qkv.dim(1);
    if (D3 % 3 || (D3 / 3) % heads) throw ShapeError("attention: width must be 3*D with D divisible by heads");
    const Index D = D3 / 3, dh = D / heads;
    const S s = S(1) / std::sqrt(S(dh));
    ConstMatrixMap<S> all(qkv.ptr(), N, D3);
    auto probs = std::make_shared<std::vector<RowMatrix<S>>>(std::size_t(heads));
    Tensor<S> out(Shape{N, D});
    MatrixMap<S> o(out.ptr(), N, D);
    for (Index h = 0; h < heads; ++h) {
        RowMatrix<S> q = all.middleCols(h * dh, dh);
        RowMatrix<S> k = all.middleCols(D + h * dh, dh);
        RowMatrix<S> v = all.middleCols(2 * D + h * dh, dh);
        RowMatrix<S> sc = (q * k.transpose()) * s;
        for (Index i = 0; i < N; ++i) {
            auto row = sc.row(i);
            const S mx = row.maxCoeff();
            row = (row.array() - mx).exp().matrix();
            row /= row.sum();
        }
        o.middleCols(h * dh, dh).noalias() = sc * v;
        (*probs)[std::size_t(h)] = std::move(sc);
    }
    return make_result<S>(std::move(out), {qkv}, [qn = qkv.node(), probs, N, D, dh, heads, s](Node<S>& n) {
        if (!wants(qn)) return;
        ConstMatrixMap<S> all(qn->value.ptr(), N, 3 * D);
        ConstMatrixMap<S> g(n.grad.data(), N, D);
        MatrixMap<S> gq(qn->ensure_grad().data(), N, 3 * D);
        for (Index h = 0; h < heads; ++h) {
            const RowMatrix<S>& p = (*probs)[std::size_t(h)];
            RowMatrix<S> q = all.middleCols(h * dh, dh);
            RowMatrix<S> k = all.middleCols(D + h * dh, dh);
            RowMatrix<S> v = all.middleCols(2 * D + h * dh, dh);
            RowMatrix<S> go = g.middleCols(h * dh, dh);
            RowMatrix<S> dp = go * v.transpose();
            Eigen::Matrix<S, Eigen::Dynamic, 1> rs = (dp.array() * p.array()).rowwise().sum();
            RowMatrix<S> ds = (p.array() * (dp.array().colwise() - rs.array())).matrix() * s;
            gq.middleCols(h * dh, dh).noalias() += ds * k;
            gq.middleCols(D + h * dh, dh).noalias() += ds.transpose() * q;
            gq.middleCols(2 * D + h * dh, dh).noalias() += p.transpose() * go;
        }
    });
}

template <typename S>
Var<S> select_row(const Var<S>& table, Index row) {
    require_rank(table, 2, "select_row");
    const Index R = table.dim(0), D = table.dim(1);
    if (row < 0 || row >= R) throw ShapeError("select_row: row " + std::to_string(row) + " out of range");
    Tensor<S> out(Shape{D}, table.value().data.segment(row * D, D));
    return make_result<S>(std::move(out), {table}, [tn = table.node(), row, D](Node<S>& n) {
        if (wants(tn)) tn->ensure_grad().segment(row * D, D) += n.grad;
    });
}

#define DCV_INSTANTIATE_OPS(S)                                                                               \
    template Var<S> add(const Var<S>&, const Var<S>&);                                                       \
    template Var<S> sub(const Var<S>&, const Var<S>&);                                                       \
    template Var<S> mul(const Var<S>&, const Var<S>&);                                                       \
    template Var<S> scale(const Var<S>&, S);                                                                 \
    template Var<S> silu(const Var<S>&);                                                                     \
    template Var<S> gelu(const Var<S>&);                                                                     \
    template Var<S> reshape(const Var<S>&, Shape);                                                           \
    template Var<S> sum(const Var<S>&);                                                                      \
    template Var<S> mean(const Var<S>&);                                                                     \
    template Var<S> mse_loss(const Var<S>&, const Var<S>&);                                                  \
    template Var<S> l1_loss(const Var<S>&, const Var<S>&);                                                   \
    template Var<S> spatial_gradient_l1(const Var<S>&, const Var<S>&);                                       \
    template Var<S> gather(const Var<S>&, const std::vector<Index>&, Shape);                                 \
    template Var<S> slice_flat(const Var<S>&, Index, Shape);                                                 \
    template Var<S> concat_time(const std::vector<Var<S>>&);                                                 \
    template Var<S> slice_time(const Var<S>&, Index, Index);                                                 \
    template Var<S> repeat_frame(const Var<S>&, Index, Index);                                               \
    template Var<S> conv3d(const Var<S>&, const Var<S>&, const Var<S>&);                                     \
    template Var<S> space_to_channel(const Var<S>&, Index);                                                  \
    template Var<S> channel_to_space(const Var<S>&, Index);                                                  \
    template Var<S> time_to_channel(const Var<S>&, Index);                                                   \
    template Var<S> channel_to_time(const Var<S>&, Index);                                                   \
    template Var<S> channel_group_mean(const Var<S>&, Index);                                                \
    template Var<S> channel_repeat(const Var<S>&, Index);                                                    \
    template Var<S> group_norm(const Var<S>&, const Var<S>&, const Var<S>&, Index, S);                       \
    template Var<S> linear(const Var<S>&, const Var<S>&, const Var<S>&);                                     \
    template Var<S> matmul(const Var<S>&, const Var<S>&);                                                    \
    template Var<S> layer_norm(const Var<S>&, S);                                                            \
    template Var<S> modulate(const Var<S>&, const Var<S>&, const Var<S>&);                                   \
    template Var<S> mul_rows(const Var<S>&, const Var<S>&);                                                  \
    template Var<S> add_rows(const Var<S>&, const Var<S>&);                                                  \
    template Var<S> attention(const Var<S>&, Index);                                                         \
    template Var<S> select_row(const Var<S>&, Index);

DCV_INSTANTIATE_OPS(float)
DCV_INSTANTIATE_OPS(double)

#undef DCV_INSTANTIATE_OPS

}  // namespace dcv
