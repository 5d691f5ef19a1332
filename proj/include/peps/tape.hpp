#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <unordered_map>
#include <variant>
#include <vector>

#include "peps/linalg.hpp"
#include "peps/tensor.hpp"

namespace peps {

class Tape;

/// Handle to one output slot of a tape node.
struct Var {
    Tape* tape = nullptr;
    std::uint32_t node = 0;
    std::uint32_t slot = 0;
};

/// Gradients of a scalar loss with respect to leaf nodes, keyed by node id.
class GradientMap {
public:
    void set(std::uint32_t node, Tensor g) { grads_[node] = std::move(g); }
    const Tensor* find(const Var& v) const {
        auto it = grads_.find(v.node);
        return it == grads_.end() ? nullptr : &it->second;
    }
    const Tensor& at(const Var& v) const {
        const Tensor* g = find(v);
        if (!g) throw std::invalid_argument("no gradient recorded for this leaf");
        return *g;
    }
    std::size_t size() const { return grads_.size(); }
    auto begin() const { return grads_.begin(); }
    auto end() const { return grads_.end(); }

private:
    std::unordered_map<std::uint32_t, Tensor> grads_;
};

struct SvdVars {
    Var u, s, v;
    double discarded_weight = 0.0;
};

struct QrVars {
    Var q, r;
};

/// Append-only record of differentiable tensor operations. One tape per
/// sample; not thread-safe across concurrent writers.
class Tape {
public:
    using Segment = std::function<std::vector<Var>(Tape&, const std::vector<Var>&)>;

    Var leaf(Tensor value, bool parameter = true) {
        Node n;
        n.op = Op::kLeaf;
        n.out.push_back(std::move(value));
        n.needs_grad = parameter;
        n.ctx = LeafCtx{parameter};
        return push(std::move(n));
    }

    Var constant(Tensor value) { return leaf(std::move(value), false); }

    const Tensor& value(const Var& v) const { return nodes_[v.node].out[v.slot]; }

    Var add(const Var& a, const Var& b) {
        Node n = binary(Op::kAdd, a, b);
        n.out.push_back(peps::add(value(a), value(b)));
        return push(std::move(n));
    }

    Var scale(const Var& a, double k) {
        Node n = unary(Op::kScale, a);
        n.out.push_back(peps::scale(value(a), k));
        n.ctx = ScaleCtx{k};
        return push(std::move(n));
    }

    Var mul(const Var& a, const Var& b) {
        Node n = binary(Op::kMul, a, b);
        n.out.push_back(hadamard(value(a), value(b)));
        return push(std::move(n));
    }

    Var contract(const Var& a, const Var& b, const AxisPairs& pairs) {
        Node n = binary(Op::kContract, a, b);
        ContractCtx ctx{make_contract_plan(value(a).shape(), value(b).shape(), pairs)};
        const Tensor am = permute_axes(value(a), ctx.plan.perm_a);
        const Tensor bm = permute_axes(value(b), ctx.plan.perm_b);
        Tensor out(ctx.plan.out_shape);
        detail::matmul(am.data().data(), bm.data().data(), out.data().data(), ctx.plan.fa,
                       ctx.plan.k, ctx.plan.fb);
        n.out.push_back(std::move(out));
        n.ctx = std::move(ctx);
        return push(std::move(n));
    }

    Var permute(const Var& a, std::vector<std::size_t> order) {
        Node n = unary(Op::kPermute, a);
        n.out.push_back(permute_axes(value(a), order));
        n.ctx = PermuteCtx{std::move(order)};
        return push(std::move(n));
    }

    Var reshape(const Var& a, std::vector<std::size_t> new_shape) {
        Node n = unary(Op::kReshape, a);
        n.out.push_back(peps::reshape(value(a), std::move(new_shape)));
        return push(std::move(n));
    }

    Var relu(const Var& a) {
        Node n = unary(Op::kRelu, a);
        Tensor out = value(a);
        for (auto& x : out.data()) x = x > 0.0 ? x : 0.0;
        n.out.push_back(std::move(out));
        return push(std::move(n));
    }

    /// Elementwise absolute value; subgradient at 0 is 0.
    Var abs(const Var& a) {
        Node n = unary(Op::kAbs, a);
        Tensor out = value(a);
        for (auto& x : out.data()) x = std::abs(x);
        n.out.push_back(std::move(out));
        return push(std::move(n));
    }

    /// 2x2 max pooling over the trailing two axes of a (C, H, W) tensor.
    Var max_pool2(const Var& a) {
        const Tensor& in = value(a);
        if (in.rank() != 3 || in.extent(1) % 2 != 0 || in.extent(2) % 2 != 0)
            throw std::invalid_argument("max_pool2 requires (C, even H, even W)");
        const std::size_t c = in.extent(0), h = in.extent(1), w = in.extent(2);
        Node n = unary(Op::kMaxPool, a);
        Tensor out({c, h / 2, w / 2});
        MaxPoolCtx ctx;
        ctx.argmax.resize(out.size());
        std::size_t o = 0;
        for (std::size_t ci = 0; ci < c; ++ci)
            for (std::size_t y = 0; y < h; y += 2)
                for (std::size_t x = 0; x < w; x += 2, ++o) {
                    std::size_t best = (ci * h + y) * w + x;
                    for (std::size_t dy = 0; dy < 2; ++dy)
                        for (std::size_t dx = 0; dx < 2; ++dx) {
                            const std::size_t pos = (ci * h + y + dy) * w + x + dx;
                            if (in[pos] > in[best]) best = pos;
                        }
                    out[o] = in[best];
                    ctx.argmax[o] = best;
                }
        n.out.push_back(std::move(out));
        n.ctx = std::move(ctx);
        return push(std::move(n));
    }

    /// Contiguous block copy out[i...] = in[offset + i ...].
    Var slice(const Var& a, std::vector<std::size_t> offsets, std::vector<std::size_t> extents) {
        const Tensor& in = value(a);
        if (offsets.size() != in.rank() || extents.size() != in.rank())
            throw std::invalid_argument("slice rank mismatch");
        for (std::size_t i = 0; i < in.rank(); ++i)
            if (offsets[i] + extents[i] > in.extent(i))
                throw DimensionError("slice out of range");
        Node n = unary(Op::kSlice, a);
        Tensor out(extents);
        const auto strides = in.strides();
        std::vector<std::size_t> idx(in.rank(), 0);
        for (std::size_t o = 0; o < out.size(); ++o) {
            std::size_t src = 0;
            for (std::size_t ax = 0; ax < in.rank(); ++ax)
                src += (offsets[ax] + idx[ax]) * strides[ax];
            out[o] = in[src];
            for (std::size_t ax = in.rank(); ax-- > 0;) {
                if (++idx[ax] < extents[ax]) break;
                idx[ax] = 0;
            }
        }
        n.out.push_back(std::move(out));
        n.ctx = SliceCtx{std::move(offsets), std::move(extents)};
        return push(std::move(n));
    }

    /// Truncated SVD of a rank-2 input. Forward decomposes fully and keeps
    /// the full factors for backward, so the gradient of the truncated
    /// approximation is well defined even through the truncation.
    SvdVars svd(const Var& a, std::size_t chi, double eps = 1e-12) {
        if (chi < 1) throw std::invalid_argument("svd requires chi >= 1");
        const Tensor& in = value(a);
        if (in.rank() != 2) throw std::invalid_argument("svd requires a rank-2 tensor");
        Node n = unary(Op::kSvd, a);
        SvdCtx ctx;
        ctx.full = svd_full(in);
        ctx.eps = eps;
        const std::size_t k0 = static_cast<std::size_t>(ctx.full.s.size());
        const std::size_t k = std::min(chi, k0);
        ctx.kept = k;
        n.out.push_back(detail::from_eigen(ctx.full.u.leftCols(static_cast<Eigen::Index>(k))));
        Tensor s({k});
        for (std::size_t i = 0; i < k; ++i) s[i] = ctx.full.s[static_cast<Eigen::Index>(i)];
        n.out.push_back(std::move(s));
        n.out.push_back(detail::from_eigen(ctx.full.vt.topRows(static_cast<Eigen::Index>(k))));
        double tail = 0.0;
        for (std::size_t i = k; i < k0; ++i) {
            const double sv = ctx.full.s[static_cast<Eigen::Index>(i)];
            tail += sv * sv;
        }
        n.ctx = std::move(ctx);
        Var first = push_multi(std::move(n), 3);
        SvdVars out;
        out.u = first;
        out.s = Var{this, first.node, 1};
        out.v = Var{this, first.node, 2};
        out.discarded_weight = std::sqrt(tail);
        return out;
    }

    /// Reduced QR with nonnegative diag(r). Backward requires rows >= cols;
    /// wide inputs are rejected at record time.
    QrVars qr(const Var& a) {
        const Tensor& in = value(a);
        if (in.rank() != 2) throw std::invalid_argument("qr requires a rank-2 tensor");
        if (in.extent(0) < in.extent(1))
            throw DimensionError("differentiable qr requires rows >= cols");
        Node n = unary(Op::kQr, a);
        auto [q, r] = qr_reduced(in);
        n.out.push_back(std::move(q));
        n.out.push_back(std::move(r));
        n.ctx = QrCtx{};
        Var first = push_multi(std::move(n), 2);
        return {first, Var{this, first.node, 1}};
    }

    /// Fused cross entropy on contraction scores: softmax applied to the
    /// log-domain logits log|v_i| + log_scale, which reduces to the
    /// probabilities p_i = |v_i| / sum_j |v_j|. The common log_scale term is
    /// an additive constant in the log domain and drops out of the softmax,
    /// so the loss depends only on the scale-normalized score vector and is
    /// invariant under uniform rescaling of the model.
    Var cross_entropy(const Var& v, std::size_t label) {
        const Tensor& scores = value(v);
        if (scores.rank() != 1) throw std::invalid_argument("cross_entropy expects rank-1 logits");
        const std::size_t t = scores.extent(0);
        if (label >= t) throw std::invalid_argument("cross_entropy label out of range");
        Node n = unary(Op::kXent, v);
        XentCtx ctx;
        ctx.label = label;
        double sum = 0.0;
        for (std::size_t i = 0; i < t; ++i) sum += std::abs(scores[i]);
        // a zero score contributes log-domain logit -inf; floor it so an
        // all-zero or zero-label score yields a large finite loss instead of
        // inf/nan poisoning the training state
        const double floor = 1e-300;
        const double loss = std::log(std::max(sum, floor)) -
                            std::log(std::max(std::abs(scores[label]), floor));
        ctx.p.resize(t);
        for (std::size_t i = 0; i < t; ++i)
            ctx.p[i] = sum > 0.0 ? std::abs(scores[i]) / sum : 1.0 / static_cast<double>(t);
        n.out.push_back(Tensor::scalar(loss));
        n.ctx = std::move(ctx);
        return push(std::move(n));
    }

    /// Divides a tensor by its max-magnitude entry c and returns (t/c, log c)
    /// as differentiable outputs. A zero tensor passes through with log c = 0.
    std::pair<Var, Var> extract_scale(const Var& a) {
        const Tensor& in = value(a);
        Node n = unary(Op::kScaleExtract, a);
        ScaleExtractCtx ctx;
        ctx.k = 0;
        for (std::size_t i = 1; i < in.size(); ++i)
            if (std::abs(in[i]) > std::abs(in[ctx.k])) ctx.k = i;
        ctx.c = std::abs(in[ctx.k]);
        ctx.sgn = in[ctx.k] > 0.0 ? 1.0 : (in[ctx.k] < 0.0 ? -1.0 : 0.0);
        if (ctx.c == 0.0) {
            n.out.push_back(in);
            n.out.push_back(Tensor::scalar(0.0));
        } else {
            n.out.push_back(peps::scale(in, 1.0 / ctx.c));
            n.out.push_back(Tensor::scalar(std::log(ctx.c)));
        }
        n.ctx = std::move(ctx);
        Var first = push_multi(std::move(n), 2);
        return {first, Var{this, first.node, 1}};
    }

    /// Records a pure sub-computation while retaining only its inputs and
    /// outputs; internals are recomputed during backward.
    std::vector<Var> checkpoint(Segment segment, const std::vector<Var>& inputs) {
        Node n;
        n.op = Op::kCheckpoint;
        for (const Var& v : inputs) {
            n.inputs.push_back(ref(v));
            n.needs_grad = n.needs_grad || nodes_[v.node].needs_grad;
        }
        CheckpointCtx ctx;
        ctx.segment = segment;
        {
            Tape scratch;
            std::vector<Var> ins;
            ins.reserve(inputs.size());
            for (const Var& v : inputs) ins.push_back(scratch.leaf(value(v)));
            std::vector<Var> outs = segment(scratch, ins);
            if (outs.empty()) throw std::invalid_argument("checkpoint segment returned no outputs");
            for (const Var& o : outs) n.out.push_back(scratch.value(o));
        }
        const std::uint32_t slots = static_cast<std::uint32_t>(n.out.size());
        n.ctx = std::move(ctx);
        Var first = push_multi(std::move(n), slots);
        std::vector<Var> outs;
        for (std::uint32_t i = 0; i < slots; ++i) outs.push_back(Var{this, first.node, i});
        return outs;
    }

    /// Sum of all entries, as a rank-0 tensor.
    Var sum_all(const Var& a) {
        const std::size_t n = value(a).size();
        Var flat = reshape(a, {n});
        return contract(flat, constant(Tensor::ones({n})), {{0, 0}});
    }

    /// Reverse-mode sweep from a scalar loss node. Forward values are left
    /// untouched; calling backward twice yields identical results.
    GradientMap backward(const Var& loss) {
        if (value(loss).rank() != 0)
            throw std::invalid_argument("backward requires a rank-0 loss node");
        return backward_multi({{loss, Tensor::scalar(1.0)}});
    }

    GradientMap backward_multi(const std::vector<std::pair<Var, Tensor>>& seeds) {
        grads_.assign(nodes_.size(), {});
        for (const auto& [v, g] : seeds) accumulate(ref(v), g);
        for (std::uint32_t i = static_cast<std::uint32_t>(nodes_.size()); i-- > 0;) {
            if (!nodes_[i].needs_grad) continue;
            if (grads_[i].empty()) continue;
            bool any = false;
            for (const auto& g : grads_[i]) any = any || g.has_value();
            if (any) backward_node(i);
#ifdef PEPS_DEBUG_NAN
            for (const ValueRef& r : nodes_[i].inputs)
                if (r.node < grads_.size() && r.slot < grads_[r.node].size() &&
                    grads_[r.node][r.slot].has_value())
                    for (double v : grads_[r.node][r.slot]->data())
                        if (std::isnan(v))
                            warn("nan grad emitted by op " +
                                 std::to_string(static_cast<int>(nodes_[i].op)) + " node " +
                                 std::to_string(i));
#endif
        }
        GradientMap out;
        for (std::uint32_t i = 0; i < nodes_.size(); ++i) {
            const Node& n = nodes_[i];
            if (n.op != Op::kLeaf) continue;
            if (!std::get<LeafCtx>(n.ctx).parameter) continue;
            if (i < grads_.size() && !grads_[i].empty() && grads_[i][0].has_value())
                out.set(i, *grads_[i][0]);
            else
                out.set(i, Tensor::zeros(n.out[0].shape()));
        }
        return out;
    }

    std::size_t node_count() const { return nodes_.size(); }

    /// Number of forward tensors retained on the tape (checkpoint
    /// instrumentation).
    std::size_t stored_tensor_count() const {
        std::size_t n = 0;
        for (const auto& node : nodes_) n += node.out.size();
        return n;
    }

    const std::vector<std::string>& warnings() const { return warnings_; }

    /// Records a diagnostic once; repeats of the same message are dropped.
    void warn(std::string msg) {
        for (const std::string& w : warnings_)
            if (w == msg) return;
        warnings_.push_back(std::move(msg));
    }

private:
    enum class Op {
        kLeaf,
        kAdd,
        kScale,
        kMul,
        kContract,
        kPermute,
        kReshape,
        kRelu,
        kAbs,
        kMaxPool,
        kSlice,
        kSvd,
        kQr,
        kXent,
        kScaleExtract,
        kCheckpoint,
    };

    struct ValueRef {
        std::uint32_t node;
        std::uint32_t slot;
    };

    struct LeafCtx {
        bool parameter;
    };
    struct ScaleCtx {
        double k;
    };
    struct ContractCtx {
        ContractPlan plan;
    };
    struct PermuteCtx {
        std::vector<std::size_t> order;
    };
    struct MaxPoolCtx {
        std::vector<std::size_t> argmax;
    };
    struct SliceCtx {
        std::vector<std::size_t> offsets, extents;
    };
    struct SvdCtx {
        FullSvd full;
        std::size_t kept = 0;
        double eps = 1e-12;
    };
    struct QrCtx {};
    struct XentCtx {
        std::size_t label = 0;
        std::vector<double> p;
    };
    struct ScaleExtractCtx {
        std::size_t k = 0;
        double c = 0.0;
        double sgn = 0.0;
    };
    struct CheckpointCtx {
        Segment segment;
    };

    using Ctx = std::variant<std::monostate, LeafCtx, ScaleCtx, ContractCtx, PermuteCtx,
                             MaxPoolCtx, SliceCtx, SvdCtx, QrCtx, XentCtx, ScaleExtractCtx,
                             CheckpointCtx>;

    struct Node {
        Op op;
        std::vector<ValueRef> inputs;
        std::vector<Tensor> out;
        bool needs_grad = false;
        Ctx ctx;
    };

    ValueRef ref(const Var& v) const {
        if (v.tape != this) throw std::invalid_argument("variable belongs to another tape");
        if (v.node >= nodes_.size()) throw std::invalid_argument("unknown input node id");
        return {v.node, v.slot};
    }

    Node unary(Op op, const Var& a) {
        Node n;
        n.op = op;
        n.inputs.push_back(ref(a));
        n.needs_grad = nodes_[a.node].needs_grad;
        return n;
    }

    Node binary(Op op, const Var& a, const Var& b) {
        Node n;
        n.op = op;
        n.inputs.push_back(ref(a));
        n.inputs.push_back(ref(b));
        n.needs_grad = nodes_[a.node].needs_grad || nodes_[b.node].needs_grad;
        return n;
    }

    Var push(Node n) { return push_multi(std::move(n), 1); }

    Var push_multi(Node n, std::uint32_t slots) {
        (void)slots;
        nodes_.push_back(std::move(n));
        return Var{this, static_cast<std::uint32_t>(nodes_.size() - 1), 0};
    }

    void accumulate(ValueRef r, const Tensor& g) {
        auto& slots = grads_[r.node];
        if (slots.empty()) slots.resize(nodes_[r.node].out.size());
        if (!slots[r.slot].has_value())
            slots[r.slot] = g;
        else
            slots[r.slot] = peps::add(*slots[r.slot], g);
    }

    Tensor grad_or_zero(std::uint32_t node, std::uint32_t slot) const {
        if (!grads_[node].empty() && grads_[node][slot].has_value()) return *grads_[node][slot];
        return Tensor::zeros(nodes_[node].out[slot].shape());
    }

    bool has_grad(std::uint32_t node, std::uint32_t slot) const {
        return !grads_[node].empty() && grads_[node][slot].has_value();
    }

    const Tensor& in_value(const Node& n, std::size_t i) const {
        return nodes_[n.inputs[i].node].out[n.inputs[i].slot];
    }

    bool input_needs_grad(const Node& n, std::size_t i) const {
        return nodes_[n.inputs[i].node].needs_grad;
    }

    void backward_node(std::uint32_t id) {
        Node& n = nodes_[id];
        switch (n.op) {
            case Op::kLeaf:
                break;
            case Op::kAdd: {
                const Tensor g = grad_or_zero(id, 0);
                if (input_needs_grad(n, 0)) accumulate(n.inputs[0], g);
                if (input_needs_grad(n, 1)) accumulate(n.inputs[1], g);
                break;
            }
            case Op::kScale: {
                if (input_needs_grad(n, 0))
                    accumulate(n.inputs[0],
                               peps::scale(grad_or_zero(id, 0), std::get<ScaleCtx>(n.ctx).k));
                break;
            }
            case Op::kMul: {
                const Tensor g = grad_or_zero(id, 0);
                if (input_needs_grad(n, 0)) accumulate(n.inputs[0], hadamard(g, in_value(n, 1)));
                if (input_needs_grad(n, 1)) accumulate(n.inputs[1], hadamard(g, in_value(n, 0)));
                break;
            }
            case Op::kContract:
                backward_contract(id);
                break;
            case Op::kPermute: {
                if (input_needs_grad(n, 0))
                    accumulate(n.inputs[0],
                               permute_axes(grad_or_zero(id, 0),
                                            inverse_permutation(std::get<PermuteCtx>(n.ctx).order)));
                break;
            }
            case Op::kReshape: {
                if (input_needs_grad(n, 0))
                    accumulate(n.inputs[0],
                               peps::reshape(grad_or_zero(id, 0), in_value(n, 0).shape()));
                break;
            }
            case Op::kRelu: {
                if (!input_needs_grad(n, 0)) break;
                Tensor g = grad_or_zero(id, 0);
                const Tensor& x = in_value(n, 0);
                for (std::size_t i = 0; i < g.size(); ++i)
                    if (x[i] <= 0.0) g[i] = 0.0;
                accumulate(n.inputs[0], g);
                break;
            }
            case Op::kAbs: {
                if (!input_needs_grad(n, 0)) break;
                Tensor g = grad_or_zero(id, 0);
                const Tensor& x = in_value(n, 0);
                for (std::size_t i = 0; i < g.size(); ++i)
                    g[i] *= x[i] > 0.0 ? 1.0 : (x[i] < 0.0 ? -1.0 : 0.0);
                accumulate(n.inputs[0], g);
                break;
            }
            case Op::kMaxPool: {
                if (!input_needs_grad(n, 0)) break;
                const Tensor g = grad_or_zero(id, 0);
                Tensor gin = Tensor::zeros(in_value(n, 0).shape());
                const auto& argmax = std::get<MaxPoolCtx>(n.ctx).argmax;
                for (std::size_t o = 0; o < g.size(); ++o) gin[argmax[o]] += g[o];
                accumulate(n.inputs[0], gin);
                break;
            }
            case Op::kSlice: {
                if (!input_needs_grad(n, 0)) break;
                const Tensor g = grad_or_zero(id, 0);
                const auto& ctx = std::get<SliceCtx>(n.ctx);
                const Tensor& in = in_value(n, 0);
                Tensor gin = Tensor::zeros(in.shape());
                const auto strides = in.strides();
                std::vector<std::size_t> idx(in.rank(), 0);
                for (std::size_t o = 0; o < g.size(); ++o) {
                    std::size_t dst = 0;
                    for (std::size_t ax = 0; ax < in.rank(); ++ax)
                        dst += (ctx.offsets[ax] + idx[ax]) * strides[ax];
                    gin[dst] += g[o];
                    for (std::size_t ax = in.rank(); ax-- > 0;) {
                        if (++idx[ax] < ctx.extents[ax]) break;
                        idx[ax] = 0;
                    }
                }
                accumulate(n.inputs[0], gin);
                break;
            }
            case Op::kSvd:
                backward_svd(id);
                break;
            case Op::kQr:
                backward_qr(id);
                break;
            case Op::kXent:
                backward_xent(id);
                break;
            case Op::kScaleExtract:
                backward_extract_scale(id);
                break;
            case Op::kCheckpoint:
                backward_checkpoint(id);
                break;
        }
    }

    void backward_contract(std::uint32_t id) {
        Node& n = nodes_[id];
        const ContractPlan& p = std::get<ContractCtx>(n.ctx).plan;
        const Tensor g = grad_or_zero(id, 0);
        // g viewed as (fa x fb); inputs re-matricized on demand.
        if (input_needs_grad(n, 0)) {
            const Tensor bm = permute_axes(in_value(n, 1), p.perm_b);  // (k x fb)
            Tensor ga_mat({p.fa, p.k});
            // ga = g * bm^T
            const double* gd = g.data().data();
            const double* bd = bm.data().data();
            double* od = ga_mat.data().data();
            for (std::size_t i = 0; i < p.fa; ++i)
                for (std::size_t l = 0; l < p.k; ++l) {
                    double s = 0.0;
                    for (std::size_t j = 0; j < p.fb; ++j) s += gd[i * p.fb + j] * bd[l * p.fb + j];
                    od[i * p.k + l] = s;
                }
            std::vector<std::size_t> perm_shape(p.perm_a.size());
            const auto& ashape = in_value(n, 0).shape();
            for (std::size_t i = 0; i < p.perm_a.size(); ++i) perm_shape[i] = ashape[p.perm_a[i]];
            Tensor ga = permute_axes(peps::reshape(ga_mat, perm_shape),
                                     inverse_permutation(p.perm_a));
            accumulate(n.inputs[0], ga);
        }
        if (input_needs_grad(n, 1)) {
            const Tensor am = permute_axes(in_value(n, 0), p.perm_a);  // (fa x k)
            Tensor gb_mat({p.k, p.fb});
            // gb = am^T * g
            const double* gd = g.data().data();
            const double* ad = am.data().data();
            double* od = gb_mat.data().data();
            std::fill(od, od + p.k * p.fb, 0.0);
            for (std::size_t i = 0; i < p.fa; ++i)
                for (std::size_t l = 0; l < p.k; ++l) {
                    const double av = ad[i * p.k + l];
                    if (av == 0.0) continue;
                    for (std::size_t j = 0; j < p.fb; ++j)
                        od[l * p.fb + j] += av * gd[i * p.fb + j];
                }
            std::vector<std::size_t> perm_shape(p.perm_b.size());
            const auto& bshape = in_value(n, 1).shape();
            for (std::size_t i = 0; i < p.perm_b.size(); ++i) perm_shape[i] = bshape[p.perm_b[i]];
            Tensor gb = permute_axes(peps::reshape(gb_mat, perm_shape),
                                     inverse_permutation(p.perm_b));
            accumulate(n.inputs[1], gb);
        }
    }

    void backward_svd(std::uint32_t id) {
        Node& n = nodes_[id];
        if (!input_needs_grad(n, 0)) return;
        const SvdCtx& ctx = std::get<SvdCtx>(n.ctx);
        const Eigen::Index m = ctx.full.u.rows();
        const Eigen::Index nn = ctx.full.vt.cols();
        const Eigen::Index k0 = ctx.full.s.size();
        const Eigen::Index k = static_cast<Eigen::Index>(ctx.kept);

        Eigen::MatrixXd gu = Eigen::MatrixXd::Zero(m, k0);
        Eigen::VectorXd gs = Eigen::VectorXd::Zero(k0);
        Eigen::MatrixXd gv = Eigen::MatrixXd::Zero(nn, k0);
        if (has_grad(id, 0)) {
            const Tensor g = grad_or_zero(id, 0);
            gu.leftCols(k) = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic,
                                                            Eigen::RowMajor>>(g.data().data(), m, k);
        }
        if (has_grad(id, 1)) {
            const Tensor g = grad_or_zero(id, 1);
            for (Eigen::Index i = 0; i < k; ++i) gs[i] = g[static_cast<std::size_t>(i)];
        }
        if (has_grad(id, 2)) {
            const Tensor g = grad_or_zero(id, 2);
            gv.leftCols(k) =
                Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic,
                                               Eigen::RowMajor>>(g.data().data(), k, nn)
                    .transpose();
        }

        const Eigen::MatrixXd& u = ctx.full.u;
        const Eigen::VectorXd& s = ctx.full.s;
        const Eigen::MatrixXd v = ctx.full.vt.transpose();
        const double eps = ctx.eps;

        // F_ij = 1 / (s_j^2 - s_i^2) with each factor regularized as
        // x -> x / (x^2 + eps), which keeps degenerate spectra finite.
        Eigen::MatrixXd f(k0, k0);
        for (Eigen::Index i = 0; i < k0; ++i)
            for (Eigen::Index j = 0; j < k0; ++j) {
                if (i == j) {
                    f(i, j) = 0.0;
                    continue;
                }
                const double d = s[j] - s[i];
                const double t = s[j] + s[i];
                f(i, j) = (d / (d * d + eps)) * (t / (t * t + eps));
            }

        const Eigen::MatrixXd gu_h = u.transpose() * gu;
        const Eigen::MatrixXd gv_h = v.transpose() * gv;
        Eigen::MatrixXd core =
            (f.array() * (gu_h - gu_h.transpose()).array()).matrix() * s.asDiagonal();
        core += s.asDiagonal() * (f.array() * (gv_h - gv_h.transpose()).array()).matrix();
        core += gs.asDiagonal();

        Eigen::MatrixXd ga = u * core * v.transpose();
        Eigen::VectorXd sinv(k0);
        for (Eigen::Index i = 0; i < k0; ++i) sinv[i] = s[i] / (s[i] * s[i] + eps);
        if (m > k0) ga += (gu - u * gu_h) * sinv.asDiagonal() * v.transpose();
        if (nn > k0) ga += u * sinv.asDiagonal() * (gv - v * gv_h).transpose();

        Tensor out({static_cast<std::size_t>(m), static_cast<std::size_t>(nn)});
        Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
            out.data().data(), m, nn) = ga;
        accumulate(n.inputs[0], out);
    }

    void backward_qr(std::uint32_t id) {
        Node& n = nodes_[id];
        if (!input_needs_grad(n, 0)) return;
        const Eigen::MatrixXd q = detail::to_eigen(n.out[0]);
        const Eigen::MatrixXd r = detail::to_eigen(n.out[1]);
        const Eigen::Index m = q.rows(), k = q.cols();
        Eigen::MatrixXd gq = Eigen::MatrixXd::Zero(m, k);
        Eigen::MatrixXd gr = Eigen::MatrixXd::Zero(k, r.cols());
        if (has_grad(id, 0)) gq = detail::to_eigen(grad_or_zero(id, 0));
        if (has_grad(id, 1)) gr = detail::to_eigen(grad_or_zero(id, 1));

        double dmin = std::numeric_limits<double>::max(), dmax = 0.0;
        for (Eigen::Index i = 0; i < k; ++i) {
            dmin = std::min(dmin, std::abs(r(i, i)));
            dmax = std::max(dmax, std::abs(r(i, i)));
        }
        if (dmin <= 1e-12 * dmax)
            warn("qr backward on a rank-deficient input; gradient regularized");

        // rows >= cols is enforced at record time, so r is square (k = cols).
        Eigen::MatrixXd mm = r * gr.transpose() - gq.transpose() * q;
        Eigen::MatrixXd h(k, k);
        for (Eigen::Index i = 0; i < k; ++i)
            for (Eigen::Index j = 0; j < k; ++j) h(i, j) = i >= j ? mm(i, j) : mm(j, i);
        Eigen::MatrixXd rhs = gq + q * h;
        // ga = rhs * r^{-T}: solve r ga^T = rhs^T. The diagonal is clamped at
        // a relative floor so a numerically rank-deficient r (singular
        // directions below machine precision) yields a large-but-finite
        // gradient instead of inf/nan. Diagonal entries are >= 0 by the QR
        // sign convention.
        Eigen::MatrixXd rreg = r;
        const double floor = std::max(dmax, 1e-300) * 1e-12;
        for (Eigen::Index i = 0; i < k; ++i)
            if (rreg(i, i) < floor) rreg(i, i) = floor;
        Eigen::MatrixXd ga =
            rreg.triangularView<Eigen::Upper>().solve(rhs.transpose()).transpose();
        Tensor res({static_cast<std::size_t>(m), static_cast<std::size_t>(k)});
        Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
            res.data().data(), m, k) = ga;
        accumulate(n.inputs[0], res);
    }

    void backward_xent(std::uint32_t id) {
        Node& n = nodes_[id];
        const XentCtx& ctx = std::get<XentCtx>(n.ctx);
        const double gup = grad_or_zero(id, 0).value();
        const Tensor& v = in_value(n, 0);
        if (!input_needs_grad(n, 0)) return;
        double sum = 0.0;
        for (std::size_t i = 0; i < v.size(); ++i) sum += std::abs(v[i]);
        if (sum <= 0.0) {
            accumulate(n.inputs[0], Tensor::zeros(v.shape()));
            return;
        }
        // d/dv_i [log sum_j |v_j| - log |v_label|]
        //   = sign(v_i)/sum - delta_{i,label}/v_i
        Tensor gv({v.size()});
        for (std::size_t i = 0; i < v.size(); ++i) {
            double g = (v[i] > 0.0 ? 1.0 : (v[i] < 0.0 ? -1.0 : 0.0)) / sum;
            if (i == ctx.label) {
                // floor the magnitude relative to the score scale so a
                // zero-score label produces a large finite pull, not inf
                const double safe = std::max(std::abs(v[i]), 1e-12 * sum);
                g -= (v[i] < 0.0 ? -1.0 : 1.0) / safe;
            }
            gv[i] = gup * g;
        }
        accumulate(n.inputs[0], gv);
    }

    void backward_extract_scale(std::uint32_t id) {
        Node& n = nodes_[id];
        if (!input_needs_grad(n, 0)) return;
        const ScaleExtractCtx& ctx = std::get<ScaleExtractCtx>(n.ctx);
        const Tensor& in = in_value(n, 0);
        if (ctx.c == 0.0) {
            if (has_grad(id, 0)) accumulate(n.inputs[0], grad_or_zero(id, 0));
            return;
        }
        const Tensor gy = grad_or_zero(id, 0);
        const double gl = has_grad(id, 1) ? grad_or_zero(id, 1).value() : 0.0;
        Tensor gin = peps::scale(gy, 1.0 / ctx.c);
        double dot = 0.0;
        for (std::size_t i = 0; i < in.size(); ++i) dot += gy[i] * n.out[0][i];
        gin[ctx.k] += ctx.sgn * (gl / ctx.c - dot / ctx.c);
        accumulate(n.inputs[0], gin);
    }

    void backward_checkpoint(std::uint32_t id) {
        Node& n = nodes_[id];
        const CheckpointCtx& ctx = std::get<CheckpointCtx>(n.ctx);
        Tape scratch;
        std::vector<Var> ins;
        ins.reserve(n.inputs.size());
        for (std::size_t i = 0; i < n.inputs.size(); ++i)
            ins.push_back(scratch.leaf(in_value(n, i), input_needs_grad(n, i)));
        std::vector<Var> outs = ctx.segment(scratch, ins);
        std::vector<std::pair<Var, Tensor>> seeds;
        for (std::size_t i = 0; i < outs.size(); ++i)
            if (has_grad(id, static_cast<std::uint32_t>(i)))
                seeds.push_back({outs[i], grad_or_zero(id, static_cast<std::uint32_t>(i))});
        if (seeds.empty()) return;
        GradientMap inner = scratch.backward_multi(seeds);
        for (std::size_t i = 0; i < ins.size(); ++i) {
            if (!input_needs_grad(n, i)) continue;
            if (const Tensor* g = inner.find(ins[i])) accumulate(n.inputs[i], *g);
        }
    }

    std::vector<Node> nodes_;
    std::vector<std::vector<std::optional<Tensor>>> grads_;
    std::vector<std::string> warnings_;
};

}  // namespace peps
