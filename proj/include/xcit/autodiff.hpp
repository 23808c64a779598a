// Reverse-mode differentiation. A GradEngine records every primitive onto a
// tape and replays analytic adjoints in reverse; an EvalEngine runs the same
// op vocabulary without recording. Network code is written once, templated
// over the engine.
#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <unordered_map>
#include <vector>

#include "xcit/kernels.hpp"
#include "xcit/tensor.hpp"

namespace xcit {

enum class RunMode { kEval, kTrain };

// ---------------------------------------------------------------------------
// EvalEngine: plain tensor evaluation. Values are shared handles so weight
// tensors are viewed, never copied, and intermediates free as they go out of
// scope (the bench harness depends on that for its peak-byte accounting).
// ---------------------------------------------------------------------------

template <typename T>
class EvalEngine {
public:
    using Scalar = T;
    using Value = std::shared_ptr<const Tensor<T>>;

    explicit EvalEngine(RunMode mode = RunMode::kEval, Rng* rng = nullptr) : mode_(mode), rng_(rng) {}

    bool training() const { return mode_ == RunMode::kTrain; }
    Rng& rng() { return *rng_; }

    Value param(Param<T>& p) { return Value(Value{}, &p.value); }
    Value constant(Tensor<T> x) { return std::make_shared<Tensor<T>>(std::move(x)); }
    const Tensor<T>& value(const Value& v) const { return *v; }

    Value matmul(const Value& a, const Value& b) { return wrap(xcit::matmul(*a, *b)); }
    Value transpose(const Value& a) { return wrap(xcit::transpose(*a)); }
    Value reshape(const Value& a, Shape s) { return wrap(a->reshaped(std::move(s))); }
    Value add(const Value& a, const Value& b) { return wrap(xcit::add(*a, *b)); }
    Value mul(const Value& a, const Value& b) { return wrap(xcit::mul(*a, *b)); }
    Value scale(const Value& a, T s) { return wrap(xcit::scale(*a, s)); }
    Value add_row_broadcast(const Value& x, const Value& v) { return wrap(xcit::add_row_broadcast(*x, *v)); }
    Value mul_row_broadcast(const Value& x, const Value& v) { return wrap(xcit::mul_row_broadcast(*x, *v)); }

    Value mul_scalar(const Value& a, const Value& s) {
        Tensor<T> out = xcit::scale(*a, (*s)[0]);
        return wrap(std::move(out));
    }

    Value softmax_last_axis(const Value& a) { return wrap(xcit::softmax_last_axis(*a)); }
    Value l2_normalize_axis(const Value& a, int axis) { return wrap(xcit::l2_normalize_axis(*a, axis)); }
    Value layer_norm(const Value& x, const Value& g, const Value& b) {
        return wrap(xcit::layer_norm(*x, *g, *b));
    }
    Value batch_norm_2d(const Value& x, const Value& g, const Value& b, BnStats<T>& stats) {
        return wrap(xcit::batch_norm_2d(*x, *g, *b, stats, training()));
    }
    Value gelu(const Value& x) { return wrap(xcit::gelu(*x)); }
    Value depthwise_conv3x3(const Value& x, const Value& w, const Value& b) {
        return wrap(xcit::depthwise_conv3x3(*x, *w, *b));
    }
    Value conv3x3_stride2(const Value& x, const Value& w, const Value& b) {
        return wrap(xcit::conv3x3_stride2(*x, *w, *b));
    }
    Value extract_patches(const Value& x, std::int64_t p) { return wrap(xcit::extract_patches(*x, p)); }

    Value concat_rows(const std::vector<Value>& parts) {
        std::vector<const Tensor<T>*> ptrs;
        ptrs.reserve(parts.size());
        for (const auto& p : parts) ptrs.push_back(p.get());
        return wrap(xcit::concat_rows(ptrs));
    }
    Value concat_cols(const std::vector<Value>& parts) {
        std::vector<const Tensor<T>*> ptrs;
        ptrs.reserve(parts.size());
        for (const auto& p : parts) ptrs.push_back(p.get());
        return wrap(xcit::concat_cols(ptrs));
    }
    Value slice_rows(const Value& a, std::int64_t r0, std::int64_t r1) {
        return wrap(xcit::slice_rows(*a, r0, r1));
    }
    Value slice_cols(const Value& a, std::int64_t c0, std::int64_t c1) {
        return wrap(xcit::slice_cols(*a, c0, c1));
    }
    Value slice_flat(const Value& a, std::int64_t i0, std::int64_t i1) {
        return wrap(xcit::slice_flat(*a, i0, i1));
    }
    Value sum_all(const Value& a) { return wrap(xcit::sum_all(*a)); }
    Value cross_entropy(const Value& logits, std::vector<int> labels) {
        return wrap(xcit::cross_entropy(*logits, labels));
    }

private:
    Value wrap(Tensor<T>&& t) { return std::make_shared<Tensor<T>>(std::move(t)); }

    RunMode mode_;
    Rng* rng_;
};

// ---------------------------------------------------------------------------
// GradEngine: each op appends a node holding the forward value, a gradient
// buffer, and a pull closure that pushes the node's gradient into its inputs.
// backward() replays the tape once in reverse and then flushes leaf gradients
// into their bound Params (additively).
// ---------------------------------------------------------------------------

template <typename T>
class GradEngine {
public:
    using Scalar = T;
    struct Value {
        int id = -1;
    };

    explicit GradEngine(RunMode mode = RunMode::kEval, Rng* rng = nullptr) : mode_(mode), rng_(rng) {}

    bool training() const { return mode_ == RunMode::kTrain; }
    Rng& rng() { return *rng_; }

    Value param(Param<T>& p) {
        auto it = leaf_of_.find(&p);
        if (it != leaf_of_.end()) return Value{it->second};
        Value v = push(Tensor<T>(p.value), {});
        nodes_[static_cast<std::size_t>(v.id)].bound = &p;
        leaf_of_[&p] = v.id;
        return v;
    }

    Value constant(Tensor<T> x) { return push(std::move(x), {}); }

    const Tensor<T>& value(Value v) const { return nodes_[static_cast<std::size_t>(v.id)].value; }
    const Tensor<T>& grad(Value v) const { return nodes_[static_cast<std::size_t>(v.id)].grad; }

    Value matmul(Value a, Value b) {
        Value c = push(xcit::matmul(value(a), value(b)), [this, a, b](Node& n) {
            matmul_adjoint(value(a), value(b), n.grad, grad_mut(a), grad_mut(b));
        });
        return c;
    }

    Value transpose(Value a) {
        return push(xcit::transpose(value(a)), [this, a](Node& n) {
            Tensor<T> dt = xcit::transpose(n.grad);
            accumulate(a, dt);
        });
    }

    Value reshape(Value a, Shape s) {
        Shape orig = value(a).shape();
        return push(value(a).reshaped(std::move(s)), [this, a, orig](Node& n) {
            Tensor<T> dt = n.grad.reshaped(orig);
            accumulate(a, dt);
        });
    }

    Value add(Value a, Value b) {
        return push(xcit::add(value(a), value(b)), [this, a, b](Node& n) {
            accumulate(a, n.grad);
            accumulate(b, n.grad);
        });
    }

    Value mul(Value a, Value b) {
        return push(xcit::mul(value(a), value(b)), [this, a, b](Node& n) {
            Tensor<T> da = xcit::mul(n.grad, value(b));
            Tensor<T> db = xcit::mul(n.grad, value(a));
            accumulate(a, da);
            accumulate(b, db);
        });
    }

    Value scale(Value a, T s) {
        return push(xcit::scale(value(a), s), [this, a, s](Node& n) {
            Tensor<T> da = xcit::scale(n.grad, s);
            accumulate(a, da);
        });
    }

    Value add_row_broadcast(Value x, Value v) {
        return push(xcit::add_row_broadcast(value(x), value(v)), [this, x, v](Node& n) {
            accumulate(x, n.grad);
            Tensor<T>& dv = grad_mut(v);
            const Tensor<T>& g = n.grad;
            for (std::int64_t i = 0; i < g.rows(); ++i)
                for (std::int64_t j = 0; j < g.cols(); ++j) dv[j] += g.at(i, j);
        });
    }

    Value mul_row_broadcast(Value x, Value v) {
        return push(xcit::mul_row_broadcast(value(x), value(v)), [this, x, v](Node& n) {
            const Tensor<T>& g = n.grad;
            const Tensor<T>& xv = value(x);
            const Tensor<T>& vv = value(v);
            Tensor<T>& dx = grad_mut(x);
            Tensor<T>& dv = grad_mut(v);
            for (std::int64_t i = 0; i < g.rows(); ++i)
                for (std::int64_t j = 0; j < g.cols(); ++j) {
                    dx.at(i, j) += g.at(i, j) * vv[j];
                    dv[j] += g.at(i, j) * xv.at(i, j);
                }
        });
    }

    Value mul_scalar(Value a, Value s) {
        return push(xcit::scale(value(a), value(s)[0]), [this, a, s](Node& n) {
            const T sv = value(s)[0];
            const Tensor<T>& av = value(a);
            Tensor<T>& da = grad_mut(a);
            Tensor<T>& ds = grad_mut(s);
            for (std::int64_t i = 0; i < n.grad.numel(); ++i) {
                da[i] += n.grad[i] * sv;
                ds[0] += n.grad[i] * av[i];
            }
        });
    }

    Value softmax_last_axis(Value a) {
        return push(xcit::softmax_last_axis(value(a)), [this, a](Node& n) {
            softmax_last_axis_adjoint(n.value, n.grad, grad_mut(a));
        });
    }

    Value l2_normalize_axis(Value a, int axis) {
        return push(xcit::l2_normalize_axis(value(a), axis), [this, a, axis](Node& n) {
            l2_normalize_axis_adjoint(value(a), axis, n.grad, grad_mut(a));
        });
    }

    Value layer_norm(Value x, Value g, Value b) {
        return push(xcit::layer_norm(value(x), value(g), value(b)), [this, x, g, b](Node& n) {
            layer_norm_adjoint(value(x), value(g), n.grad, grad_mut(x), grad_mut(g), grad_mut(b));
        });
    }

    Value batch_norm_2d(Value x, Value g, Value b, BnStats<T>& stats) {
        const bool train = training();
        Tensor<T> out = xcit::batch_norm_2d(value(x), value(g), value(b), stats, train);
        return push(std::move(out), [this, x, g, b, &stats, train](Node& n) {
            batch_norm_2d_adjoint(value(x), value(g), stats, train, n.grad, grad_mut(x), grad_mut(g),
                                  grad_mut(b));
        });
    }

    Value gelu(Value x) {
        return push(xcit::gelu(value(x)), [this, x](Node& n) {
            gelu_adjoint(value(x), n.grad, grad_mut(x));
        });
    }

    Value depthwise_conv3x3(Value x, Value w, Value b) {
        return push(xcit::depthwise_conv3x3(value(x), value(w), value(b)), [this, x, w, b](Node& n) {
            depthwise_conv3x3_adjoint(value(x), value(w), n.grad, grad_mut(x), grad_mut(w), grad_mut(b));
        });
    }

    Value conv3x3_stride2(Value x, Value w, Value b) {
        return push(xcit::conv3x3_stride2(value(x), value(w), value(b)), [this, x, w, b](Node& n) {
            conv3x3_stride2_adjoint(value(x), value(w), n.grad, grad_mut(x), grad_mut(w), grad_mut(b));
        });
    }

    Value extract_patches(Value x, std::int64_t p) {
        Shape xs = value(x).shape();
        return push(xcit::extract_patches(value(x), p), [this, x, p, xs](Node& n) {
            extract_patches_adjoint(xs, p, n.grad, grad_mut(x));
        });
    }

    Value concat_rows(const std::vector<Value>& parts) {
        std::vector<const Tensor<T>*> ptrs;
        for (const auto& p : parts) ptrs.push_back(&value(p));
        return push(xcit::concat_rows(ptrs), [this, parts](Node& n) {
            std::int64_t r = 0;
            for (const auto& p : parts) {
                const std::int64_t pr = value(p).rows();
                Tensor<T>& dp = grad_mut(p);
                const std::int64_t cols = n.grad.cols();
                for (std::int64_t i = 0; i < pr * cols; ++i) dp[i] += n.grad[r * cols + i];
                r += pr;
            }
        });
    }

    Value concat_cols(const std::vector<Value>& parts) {
        std::vector<const Tensor<T>*> ptrs;
        for (const auto& p : parts) ptrs.push_back(&value(p));
        return push(xcit::concat_cols(ptrs), [this, parts](Node& n) {
            const std::int64_t cols = n.grad.cols();
            std::int64_t c0 = 0;
            for (const auto& p : parts) {
                const std::int64_t pc = value(p).cols();
                Tensor<T>& dp = grad_mut(p);
                for (std::int64_t i = 0; i < n.grad.rows(); ++i)
                    for (std::int64_t j = 0; j < pc; ++j) dp.at(i, j) += n.grad[i * cols + c0 + j];
                c0 += pc;
            }
        });
    }

    Value slice_rows(Value a, std::int64_t r0, std::int64_t r1) {
        return push(xcit::slice_rows(value(a), r0, r1), [this, a, r0](Node& n) {
            Tensor<T>& da = grad_mut(a);
            const std::int64_t cols = n.grad.cols();
            for (std::int64_t i = 0; i < n.grad.numel(); ++i) da[r0 * cols + i] += n.grad[i];
        });
    }

    Value slice_cols(Value a, std::int64_t c0, std::int64_t c1) {
        return push(xcit::slice_cols(value(a), c0, c1), [this, a, c0](Node& n) {
            Tensor<T>& da = grad_mut(a);
            const std::int64_t w = n.grad.cols();
            for (std::int64_t i = 0; i < n.grad.rows(); ++i)
                for (std::int64_t j = 0; j < w; ++j) da.at(i, c0 + j) += n.grad.at(i, j);
        });
    }

    Value slice_flat(Value a, std::int64_t i0, std::int64_t i1) {
        return push(xcit::slice_flat(value(a), i0, i1), [this, a, i0](Node& n) {
            Tensor<T>& da = grad_mut(a);
            for (std::int64_t i = 0; i < n.grad.numel(); ++i) da[i0 + i] += n.grad[i];
        });
    }

    Value sum_all(Value a) {
        return push(xcit::sum_all(value(a)), [this, a](Node& n) {
            Tensor<T>& da = grad_mut(a);
            for (std::int64_t i = 0; i < da.numel(); ++i) da[i] += n.grad[0];
        });
    }

    Value cross_entropy(Value logits, std::vector<int> labels) {
        return push(xcit::cross_entropy(value(logits), labels), [this, logits, labels](Node& n) {
            cross_entropy_adjoint(value(logits), labels, n.grad[0], grad_mut(logits));
        });
    }

    // Seeds d(loss)=1, replays adjoints newest-first, then adds each leaf's
    // gradient into its Param. One backward per tape.
    void backward(Value loss) {
        if (ran_backward_) throw NumericError("tape already replayed");
        ran_backward_ = true;
        Node& ln = nodes_[static_cast<std::size_t>(loss.id)];
        if (ln.value.numel() != 1) throw ShapeError("backward needs a scalar loss");
        ln.grad[0] = T(1);
        for (std::size_t i = nodes_.size(); i-- > 0;) {
            if (nodes_[i].pull) nodes_[i].pull(nodes_[i]);
        }
        for (auto& [p, id] : leaf_of_) {
            const Tensor<T>& g = nodes_[static_cast<std::size_t>(id)].grad;
            for (std::int64_t i = 0; i < g.numel(); ++i) p->grad[i] += g[i];
        }
    }

    std::size_t size() const { return nodes_.size(); }

private:
    struct Node {
        Tensor<T> value;
        Tensor<T> grad;
        std::function<void(Node&)> pull;
        Param<T>* bound = nullptr;
    };

    Value push(Tensor<T>&& v, std::function<void(Node&)> pull) {
        Node n;
        n.grad = Tensor<T>(v.shape());
        n.value = std::move(v);
        n.pull = std::move(pull);
        nodes_.push_back(std::move(n));
        return Value{static_cast<int>(nodes_.size()) - 1};
    }

    Tensor<T>& grad_mut(Value v) { return nodes_[static_cast<std::size_t>(v.id)].grad; }

    void accumulate(Value v, const Tensor<T>& g) {
        Tensor<T>& dst = grad_mut(v);
        for (std::int64_t i = 0; i < g.numel(); ++i) dst[i] += g[i];
    }

    RunMode mode_;
    Rng* rng_;
    std::vector<Node> nodes_;
    std::unordered_map<Param<T>*, int> leaf_of_;
    bool ran_backward_ = false;
};

// ---------------------------------------------------------------------------
// Finite-difference verification of the tape. `f` must be callable with
// either engine type and return the engine's scalar loss Value.
// ---------------------------------------------------------------------------

struct GradcheckReport {
    double max_rel_err = 0.0;
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;
    std::size_t checked = 0;
};

template <typename F>
GradcheckReport gradcheck(const std::vector<Param<double>*>& params, F&& f, double h = 1e-5) {
    for (Param<double>* p : params) p->zero_grad();
    {
        GradEngine<double> eng(RunMode::kEval);
        auto loss = f(eng);
        if (!std::isfinite(eng.value(loss)[0])) throw NumericError("gradcheck: non-finite loss");
        eng.backward(loss);
    }

    auto eval_loss = [&]() {
        EvalEngine<double> eng(RunMode::kEval);
        auto loss = f(eng);
        return eng.value(loss)[0];
    };

    GradcheckReport rep;
    for (Param<double>* p : params) {
        for (std::int64_t i = 0; i < p->numel(); ++i) {
            const double saved = p->value[i];
            p->value[i] = saved + h;
            const double fp = eval_loss();
            p->value[i] = saved - h;
            const double fm = eval_loss();
            p->value[i] = saved;
            if (!std::isfinite(fp) || !std::isfinite(fm)) throw NumericError("gradcheck: non-finite probe");
            const double numeric = (fp - fm) / (2.0 * h);
            const double analytic = p->grad[i];
            const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-6});
            const double rel = std::abs(analytic - numeric) / denom;
            ++rep.checked;
            if (rel > rep.max_rel_err) {
                rep.max_rel_err = rel;
                rep.worst_analytic = analytic;
                rep.worst_numeric = numeric;
            }
        }
    }
    return rep;
}

}  // namespace xcit
