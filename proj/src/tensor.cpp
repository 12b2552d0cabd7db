#include "loopmdm/tensor.hpp"

#include <Eigen/Core>

#include <cmath>
#include <cstdio>
#include <string>
#include <utility>

namespace loopmdm {

namespace {

using EMat = Eigen::Matrix<real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using EMap = Eigen::Map<EMat>;
using CMap = Eigen::Map<const EMat>;

std::string shape_str(const Tensor& t) {
    return std::to_string(t.rows()) + "x" + std::to_string(t.cols());
}

[[noreturn]] void shape_fail(const char* op, const Tensor& a, const Tensor& b) {
    throw ShapeError(std::string(op) + ": incompatible shapes " + shape_str(a) + " and " +
                     shape_str(b));
}

CMap vmap(const Tensor& t) {
    return CMap(t.values().data(), static_cast<Eigen::Index>(t.rows()),
                static_cast<Eigen::Index>(t.cols()));
}

EMap gmap(TensorData& td) {
    return EMap(ensure_grad(td).data(), static_cast<Eigen::Index>(td.rows),
                static_cast<Eigen::Index>(td.cols));
}

CMap raw_map(const std::vector<real>& buf, std::size_t rows, std::size_t cols) {
    return CMap(buf.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

thread_local Tape* g_tape = nullptr;

constexpr real kVarianceFloor = real(1e-5);
constexpr real kProbClamp = real(1e-30);

}  // namespace

// ---- Tensor ----

Tensor Tensor::zeros(std::size_t rows, std::size_t cols, bool requires_grad) {
    auto d = std::make_shared<TensorData>();
    d->rows = rows;
    d->cols = cols;
    d->value.assign(rows * cols, real(0));
    d->requires_grad = requires_grad;
    return Tensor(std::move(d));
}

Tensor Tensor::full(std::size_t rows, std::size_t cols, real v) {
    Tensor t = zeros(rows, cols, false);
    std::fill(t.values().begin(), t.values().end(), v);
    return t;
}

Tensor Tensor::from_values(std::size_t rows, std::size_t cols, std::vector<real> v,
                           bool requires_grad) {
    if (v.size() != rows * cols)
        throw ShapeError("from_values: " + std::to_string(v.size()) + " values for " +
                         std::to_string(rows) + "x" + std::to_string(cols));
    auto d = std::make_shared<TensorData>();
    d->rows = rows;
    d->cols = cols;
    d->value = std::move(v);
    d->requires_grad = requires_grad;
    return Tensor(std::move(d));
}

Tensor Tensor::scalar(real v) { return full(1, 1, v); }

Tensor Tensor::trunc_normal(std::size_t rows, std::size_t cols, real stddev, Rng& rng,
                            bool requires_grad) {
    Tensor t = zeros(rows, cols, requires_grad);
    for (auto& x : t.values()) {
        real z;
        do {
            z = rng.gauss();
        } while (std::abs(z) > real(2));
        x = z * stddev;
    }
    return t;
}

real Tensor::item() const {
    if (size() != 1)
        throw ContractError("item: tensor is " + shape_str(*this) + ", not a scalar");
    return d_->value[0];
}

std::vector<real>& Tensor::grad() { return ensure_grad(*d_); }

void Tensor::zero_grad() {
    if (!d_->grad.empty()) std::fill(d_->grad.begin(), d_->grad.end(), real(0));
}

std::vector<real>& ensure_grad(TensorData& td) {
    if (td.grad.empty()) td.grad.assign(td.value.size(), real(0));
    return td.grad;
}

bool grad_enabled_for(const Tensor& t) { return g_tape != nullptr && t.requires_grad(); }

// ---- Tape ----

Tape::Tape() : prev_(g_tape) { g_tape = this; }

Tape::~Tape() {
    if (g_tape == this) g_tape = prev_;
}

Tape* Tape::current() { return g_tape; }

void Tape::record(std::function<void()> backward_rule) { ops_.push_back(std::move(backward_rule)); }

void Tape::backward(const Tensor& loss, real seed) {
    if (loss.size() != 1) throw ContractError("backward: loss must be scalar");
    loss.node()->grad.assign(1, seed);
    for (std::size_t i = ops_.size(); i-- > 0;) ops_[i]();
    ops_.clear();
    ops_.shrink_to_fit();
}

void backward(const Tensor& loss) {
    Tape* t = Tape::current();
    if (t == nullptr) throw ContractError("backward: no active tape");
    t->backward(loss);
}

namespace {

bool taping(std::initializer_list<const Tensor*> inputs) {
    if (g_tape == nullptr) return false;
    for (const Tensor* t : inputs)
        if (t->defined() && t->requires_grad()) return true;
    return false;
}

Tensor make_out(std::size_t rows, std::size_t cols, bool requires_grad) {
    return Tensor::zeros(rows, cols, requires_grad);
}

}  // namespace

// ---- elementwise and reductions ----

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.cols() != b.rows()) shape_fail("matmul", a, b);
    bool rec = taping({&a, &b});
    Tensor out = make_out(a.rows(), b.cols(), rec);
    EMap(out.values().data(), a.rows(), b.cols()).noalias() = vmap(a) * vmap(b);
    if (rec) {
        auto an = a.node(), bn = b.node(), on = out.node();
        g_tape->record([an, bn, on] {
            CMap go(on->grad.data(), on->rows, on->cols);
            if (an->requires_grad)
                gmap(*an).noalias() += go * raw_map(bn->value, bn->rows, bn->cols).transpose();
            if (bn->requires_grad)
                gmap(*bn).noalias() += raw_map(an->value, an->rows, an->cols).transpose() * go;
        });
    }
    return out;
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias) {
    if (x.cols() != w.rows()) shape_fail("linear", x, w);
    if (bias.defined() && (bias.rows() != 1 || bias.cols() != w.cols()))
        shape_fail("linear bias", w, bias);
    bool rec = bias.defined() ? taping({&x, &w, &bias}) : taping({&x, &w});
    Tensor out = make_out(x.rows(), w.cols(), rec);
    EMap om(out.values().data(), x.rows(), w.cols());
    om.noalias() = vmap(x) * vmap(w);
    if (bias.defined()) om.rowwise() += vmap(bias).row(0);
    if (rec) {
        auto xn = x.node(), wn = w.node(), on = out.node();
        auto bn = bias.defined() ? bias.node() : nullptr;
        g_tape->record([xn, wn, bn, on] {
            CMap go(on->grad.data(), on->rows, on->cols);
            if (xn->requires_grad)
                gmap(*xn).noalias() += go * raw_map(wn->value, wn->rows, wn->cols).transpose();
            if (wn->requires_grad)
                gmap(*wn).noalias() += raw_map(xn->value, xn->rows, xn->cols).transpose() * go;
            if (bn && bn->requires_grad) {
                // Fixed-order accumulation; Eigen's partial redux rounds
                // differently depending on buffer alignment.
                auto& gb = ensure_grad(*bn);
                std::vector<real> colsum(on->cols, real(0));
                for (std::size_t r = 0; r < on->rows; ++r) {
                    const real* g = on->grad.data() + r * on->cols;
                    for (std::size_t c = 0; c < on->cols; ++c) colsum[c] += g[c];
                }
                for (std::size_t c = 0; c < on->cols; ++c) gb[c] += colsum[c];
            }
        });
    }
    return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) shape_fail("add", a, b);
    bool rec = taping({&a, &b});
    Tensor out = make_out(a.rows(), a.cols(), rec);
    for (std::size_t i = 0; i < out.size(); ++i) out.values()[i] = a.values()[i] + b.values()[i];
    if (rec) {
        auto an = a.node(), bn = b.node(), on = out.node();
        g_tape->record([an, bn, on] {
            if (an->requires_grad) {
                auto& g = ensure_grad(*an);
                for (std::size_t i = 0; i < g.size(); ++i) g[i] += on->grad[i];
            }
            if (bn->requires_grad) {
                auto& g = ensure_grad(*bn);
                for (std::size_t i = 0; i < g.size(); ++i) g[i] += on->grad[i];
            }
        });
    }
    return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) shape_fail("sub", a, b);
    bool rec = taping({&a, &b});
    Tensor out = make_out(a.rows(), a.cols(), rec);
    for (std::size_t i = 0; i < out.size(); ++i) out.values()[i] = a.values()[i] - b.values()[i];
    if (rec) {
        auto an = a.node(), bn = b.node(), on = out.node();
        g_tape->record([an, bn, on] {
            if (an->requires_grad) {
                auto& g = ensure_grad(*an);
                for (std::size_t i = 0; i < g.size(); ++i) g[i] += on->grad[i];
            }
            if (bn->requires_grad) {
                auto& g = ensure_grad(*bn);
                for (std::size_t i = 0; i < g.size(); ++i) g[i] -= on->grad[i];
            }
        });
    }
    return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) shape_fail("mul", a, b);
    bool rec = taping({&a, &b});
    Tensor out = make_out(a.rows(), a.cols(), rec);
    for (std::size_t i = 0; i < out.size(); ++i) out.values()[i] = a.values()[i] * b.values()[i];
    if (rec) {
        auto an = a.node(), bn = b.node(), on = out.node();
        g_tape->record([an, bn, on] {
            if (an->requires_grad) {
                auto& g = ensure_grad(*an);
                for (std::size_t i = 0; i < g.size(); ++i) g[i] += on->grad[i] * bn->value[i];
            }
            if (bn->requires_grad) {
                auto& g = ensure_grad(*bn);
                for (std::size_t i = 0; i < g.size(); ++i) g[i] += on->grad[i] * an->value[i];
            }
        });
    }
    return out;
}

Tensor scale(const Tensor& a, real s) {
    bool rec = taping({&a});
    Tensor out = make_out(a.rows(), a.cols(), rec);
    for (std::size_t i = 0; i < out.size(); ++i) out.values()[i] = a.values()[i] * s;
    if (rec) {
        auto an = a.node(), on = out.node();
        g_tape->record([an, on, s] {
            auto& g = ensure_grad(*an);
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += on->grad[i] * s;
        });
    }
    return out;
}

Tensor sum(const Tensor& a) {
    bool rec = taping({&a});
    Tensor out = make_out(1, 1, rec);
    real acc = 0;
    for (real v : a.values()) acc += v;
    out.values()[0] = acc;
    if (rec) {
        auto an = a.node(), on = out.node();
        g_tape->record([an, on] {
            auto& g = ensure_grad(*an);
            real go = on->grad[0];
            for (auto& gi : g) gi += go;
        });
    }
    return out;
}

Tensor softmax(const Tensor& x, int axis) {
    if (axis != 0 && axis != 1) throw ContractError("softmax: axis must be 0 or 1");
    bool rec = taping({&x});
    Tensor out = make_out(x.rows(), x.cols(), rec);
    std::size_t R = x.rows(), C = x.cols();
    std::size_t groups = (axis == 1) ? R : C;
    std::size_t len = (axis == 1) ? C : R;
    std::size_t gstride = (axis == 1) ? C : 1;
    std::size_t estride = (axis == 1) ? 1 : C;
    const real* xv = x.values().data();
    real* ov = out.values().data();
    for (std::size_t g = 0; g < groups; ++g) {
        const real* xi = xv + g * gstride;
        real* oi = ov + g * gstride;
        real m = xi[0];
        for (std::size_t j = 1; j < len; ++j) m = std::max(m, xi[j * estride]);
        real z = 0;
        for (std::size_t j = 0; j < len; ++j) {
            real e = std::exp(xi[j * estride] - m);
            oi[j * estride] = e;
            z += e;
        }
        real inv = real(1) / z;
        for (std::size_t j = 0; j < len; ++j) oi[j * estride] *= inv;
    }
    if (rec) {
        auto xn = x.node(), on = out.node();
        g_tape->record([xn, on, groups, len, gstride, estride] {
            auto& gx = ensure_grad(*xn);
            for (std::size_t g = 0; g < groups; ++g) {
                const real* p = on->value.data() + g * gstride;
                const real* go = on->grad.data() + g * gstride;
                real dot = 0;
                for (std::size_t j = 0; j < len; ++j) dot += p[j * estride] * go[j * estride];
                real* gi = gx.data() + g * gstride;
                for (std::size_t j = 0; j < len; ++j)
                    gi[j * estride] += p[j * estride] * (go[j * estride] - dot);
            }
        });
    }
    return out;
}

Tensor silu(const Tensor& x) {
    bool rec = taping({&x});
    Tensor out = make_out(x.rows(), x.cols(), rec);
    for (std::size_t i = 0; i < x.size(); ++i) {
        real v = x.values()[i];
        out.values()[i] = v / (real(1) + std::exp(-v));
    }
    if (rec) {
        auto xn = x.node(), on = out.node();
        g_tape->record([xn, on] {
            auto& g = ensure_grad(*xn);
            for (std::size_t i = 0; i < g.size(); ++i) {
                real v = xn->value[i];
                real sig = real(1) / (real(1) + std::exp(-v));
                g[i] += on->grad[i] * sig * (real(1) + v * (real(1) - sig));
            }
        });
    }
    return out;
}

Tensor gelu(const Tensor& x) {
    static constexpr real c = real(0.7978845608028654);  // sqrt(2/pi)
    static constexpr real a = real(0.044715);
    bool rec = taping({&x});
    Tensor out = make_out(x.rows(), x.cols(), rec);
    for (std::size_t i = 0; i < x.size(); ++i) {
        real v = x.values()[i];
        out.values()[i] = real(0.5) * v * (real(1) + std::tanh(c * (v + a * v * v * v)));
    }
    if (rec) {
        auto xn = x.node(), on = out.node();
        g_tape->record([xn, on] {
            auto& g = ensure_grad(*xn);
            for (std::size_t i = 0; i < g.size(); ++i) {
                real v = xn->value[i];
                real t = std::tanh(c * (v + a * v * v * v));
                real du = c * (real(1) + real(3) * a * v * v);
                g[i] += on->grad[i] *
                        (real(0.5) * (real(1) + t) + real(0.5) * v * (real(1) - t * t) * du);
            }
        });
    }
    return out;
}

Tensor embedding_gather(const Tensor& table, const std::vector<int32_t>& ids) {
    for (int32_t id : ids)
        if (id < 0 || static_cast<std::size_t>(id) >= table.rows())
            throw DomainError("embedding_gather: id " + std::to_string(id) + " outside table of " +
                              std::to_string(table.rows()) + " rows");
    bool rec = taping({&table});
    std::size_t C = table.cols();
    Tensor out = make_out(ids.size(), C, rec);
    for (std::size_t i = 0; i < ids.size(); ++i)
        std::copy_n(table.values().data() + static_cast<std::size_t>(ids[i]) * C, C,
                    out.values().data() + i * C);
    if (rec) {
        auto tn = table.node(), on = out.node();
        g_tape->record([tn, on, ids, C] {
            auto& g = ensure_grad(*tn);
            for (std::size_t i = 0; i < ids.size(); ++i) {
                const real* go = on->grad.data() + i * C;
                real* gi = g.data() + static_cast<std::size_t>(ids[i]) * C;
                for (std::size_t j = 0; j < C; ++j) gi[j] += go[j];
            }
        });
    }
    return out;
}

Tensor slice_cols(const Tensor& x, std::size_t start, std::size_t len) {
    std::size_t R = x.rows(), C = x.cols();
    if (len == 0 || start + len > C)
        throw ShapeError("slice_cols: [" + std::to_string(start) + "," +
                         std::to_string(start + len) + ") outside width " + std::to_string(C));
    bool rec = taping({&x});
    Tensor out = make_out(R, len, rec);
    for (std::size_t r = 0; r < R; ++r)
        std::copy_n(x.values().data() + r * C + start, len, out.values().data() + r * len);
    if (rec) {
        auto xn = x.node(), on = out.node();
        g_tape->record([xn, on, start, len, C] {
            auto& g = ensure_grad(*xn);
            for (std::size_t r = 0; r < on->rows; ++r) {
                const real* go = on->grad.data() + r * len;
                real* gi = g.data() + r * C + start;
                for (std::size_t j = 0; j < len; ++j) gi[j] += go[j];
            }
        });
    }
    return out;
}

// ---- normalization ----

Tensor adaln_blocks(const Tensor& x, const Tensor& sc, const Tensor& sh, std::size_t block_rows) {
    std::size_t R = x.rows(), C = x.cols();
    if (block_rows == 0 || R % block_rows != 0)
        throw ShapeError("adaln_blocks: " + std::to_string(R) + " rows not divisible by block of " +
                         std::to_string(block_rows));
    std::size_t B = R / block_rows;
    if (sc.rows() != B || sc.cols() != C) shape_fail("adaln_blocks scale", x, sc);
    if (sh.rows() != B || sh.cols() != C) shape_fail("adaln_blocks shift", x, sh);
    bool rec = taping({&x, &sc, &sh});
    Tensor out = make_out(R, C, rec);
    // xhat plus per-row 1/sigma are needed for the backward pass.
    auto xhat = std::make_shared<std::vector<real>>(R * C);
    auto inv_sigma = std::make_shared<std::vector<real>>(R);
    auto floored = std::make_shared<std::vector<uint8_t>>(R);
    for (std::size_t r = 0; r < R; ++r) {
        const real* xi = x.values().data() + r * C;
        real mu = 0;
        for (std::size_t j = 0; j < C; ++j) mu += xi[j];
        mu /= real(C);
        real var = 0;
        for (std::size_t j = 0; j < C; ++j) {
            real dv = xi[j] - mu;
            var += dv * dv;
        }
        var /= real(C);
        bool fl = var < kVarianceFloor;
        real inv = real(1) / std::sqrt(fl ? kVarianceFloor : var);
        (*inv_sigma)[r] = inv;
        (*floored)[r] = fl ? 1 : 0;
        const real* s = sc.values().data() + (r / block_rows) * C;
        const real* t = sh.values().data() + (r / block_rows) * C;
        real* xh = xhat->data() + r * C;
        real* oi = out.values().data() + r * C;
        for (std::size_t j = 0; j < C; ++j) {
            xh[j] = (xi[j] - mu) * inv;
            oi[j] = (real(1) + s[j]) * xh[j] + t[j];
        }
    }
    if (rec) {
        auto xn = x.node(), scn = sc.node(), shn = sh.node(), on = out.node();
        g_tape->record([xn, scn, shn, on, xhat, inv_sigma, floored, block_rows, C] {
            std::size_t R = xn->rows;
            for (std::size_t r = 0; r < R; ++r) {
                const real* go = on->grad.data() + r * C;
                const real* xh = xhat->data() + r * C;
                const real* s = scn->value.data() + (r / block_rows) * C;
                if (scn->requires_grad) {
                    real* gs = ensure_grad(*scn).data() + (r / block_rows) * C;
                    for (std::size_t j = 0; j < C; ++j) gs[j] += go[j] * xh[j];
                }
                if (shn->requires_grad) {
                    real* gt = ensure_grad(*shn).data() + (r / block_rows) * C;
                    for (std::size_t j = 0; j < C; ++j) gt[j] += go[j];
                }
                if (!xn->requires_grad) continue;
                real inv = (*inv_sigma)[r];
                real m1 = 0, m2 = 0;  // mean(dxhat), mean(dxhat * xhat)
                real* gx = ensure_grad(*xn).data() + r * C;
                for (std::size_t j = 0; j < C; ++j) {
                    real dxh = go[j] * (real(1) + s[j]);
                    m1 += dxh;
                    m2 += dxh * xh[j];
                }
                m1 /= real(C);
                m2 /= real(C);
                bool fl = (*floored)[r] != 0;
                for (std::size_t j = 0; j < C; ++j) {
                    real dxh = go[j] * (real(1) + s[j]);
                    real d = fl ? (dxh - m1) : (dxh - m1 - xh[j] * m2);
                    gx[j] += inv * d;
                }
            }
        });
    }
    return out;
}

Tensor layer_norm_adaptive(const Tensor& x, const Tensor& sc, const Tensor& sh) {
    return adaln_blocks(x, sc, sh, x.rows());
}

// ---- rotary ----

Tensor rotary_apply(const Tensor& x, std::size_t n_heads, const std::vector<int32_t>& positions) {
    std::size_t R = x.rows(), C = x.cols();
    if (n_heads == 0 || C % n_heads != 0)
        throw ConfigError("rotary_apply: width " + std::to_string(C) + " not divisible by " +
                          std::to_string(n_heads) + " heads");
    std::size_t dh = C / n_heads;
    if (dh % 2 != 0)
        throw ConfigError("rotary_apply: head width " + std::to_string(dh) + " must be even");
    if (positions.size() != R)
        throw ShapeError("rotary_apply: " + std::to_string(positions.size()) + " positions for " +
                         std::to_string(R) + " rows");
    bool rec = taping({&x});
    Tensor out = make_out(R, C, rec);
    std::size_t half = dh / 2;
    std::vector<real> theta(half);
    for (std::size_t i = 0; i < half; ++i)
        theta[i] = std::pow(real(10000), -real(2 * i) / real(dh));
    auto apply = [R, C, n_heads, dh, half, theta, positions](const real* src, real* dst,
                                                             real sign) {
        for (std::size_t r = 0; r < R; ++r) {
            real pos = real(positions[r]);
            for (std::size_t h = 0; h < n_heads; ++h) {
                const real* xi = src + r * C + h * dh;
                real* oi = dst + r * C + h * dh;
                for (std::size_t i = 0; i < half; ++i) {
                    real ang = pos * theta[i];
                    real cs = std::cos(ang), sn = sign * std::sin(ang);
                    real x0 = xi[2 * i], x1 = xi[2 * i + 1];
                    oi[2 * i] = x0 * cs - x1 * sn;
                    oi[2 * i + 1] = x0 * sn + x1 * cs;
                }
            }
        }
    };
    apply(x.values().data(), out.values().data(), real(1));
    if (rec) {
        auto xn = x.node(), on = out.node();
        g_tape->record([xn, on, apply] {
            std::vector<real> gx(on->grad.size());
            apply(on->grad.data(), gx.data(), real(-1));
            auto& g = ensure_grad(*xn);
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += gx[i];
        });
    }
    return out;
}

// ---- attention ----

Tensor attention_blocks(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t n_heads,
                        std::size_t block_rows, AttnMaps* capture) {
    std::size_t R = q.rows(), C = q.cols();
    if (k.rows() != R || k.cols() != C) shape_fail("attention_blocks k", q, k);
    if (v.rows() != R || v.cols() != C) shape_fail("attention_blocks v", q, v);
    if (n_heads == 0 || C % n_heads != 0)
        throw ConfigError("attention_blocks: width " + std::to_string(C) + " not divisible by " +
                          std::to_string(n_heads) + " heads");
    if (block_rows == 0 || R % block_rows != 0)
        throw ShapeError("attention_blocks: " + std::to_string(R) +
                         " rows not divisible by block of " + std::to_string(block_rows));
    std::size_t dh = C / n_heads;
    std::size_t L = block_rows;
    std::size_t nb = R / L;
    real inv_scale = real(1) / std::sqrt(real(dh));
    bool rec = taping({&q, &k, &v});
    Tensor out = make_out(R, C, rec);
    auto probs = std::make_shared<std::vector<real>>(nb * n_heads * L * L);

    using Stride = Eigen::Stride<Eigen::Dynamic, 1>;
    using HeadMap = Eigen::Map<EMat, 0, Stride>;
    using CHeadMap = Eigen::Map<const EMat, 0, Stride>;
    Stride st(static_cast<Eigen::Index>(C), 1);
    auto head = [&](const std::vector<real>& buf, std::size_t b, std::size_t h) {
        return CHeadMap(buf.data() + b * L * C + h * dh, static_cast<Eigen::Index>(L),
                        static_cast<Eigen::Index>(dh), st);
    };
    auto head_mut = [&](std::vector<real>& buf, std::size_t b, std::size_t h) {
        return HeadMap(buf.data() + b * L * C + h * dh, static_cast<Eigen::Index>(L),
                       static_cast<Eigen::Index>(dh), st);
    };

    for (std::size_t b = 0; b < nb; ++b) {
        for (std::size_t h = 0; h < n_heads; ++h) {
            EMap A(probs->data() + (b * n_heads + h) * L * L, static_cast<Eigen::Index>(L),
                   static_cast<Eigen::Index>(L));
            A.noalias() = head(q.values(), b, h) * head(k.values(), b, h).transpose() * inv_scale;
            for (std::size_t i = 0; i < L; ++i) {
                real* row = A.data() + i * L;
                real m = row[0];
                for (std::size_t j = 1; j < L; ++j) m = std::max(m, row[j]);
                real z = 0;
                for (std::size_t j = 0; j < L; ++j) {
                    row[j] = std::exp(row[j] - m);
                    z += row[j];
                }
                real inv = real(1) / z;
                for (std::size_t j = 0; j < L; ++j) row[j] *= inv;
            }
            head_mut(out.values(), b, h).noalias() = A * head(v.values(), b, h);
        }
    }
    if (capture != nullptr) {
        capture->n_blocks = nb;
        capture->n_heads = n_heads;
        capture->rows = L;
        capture->probs = *probs;
    }
    if (rec) {
        auto qn = q.node(), kn = k.node(), vn = v.node(), on = out.node();
        g_tape->record([qn, kn, vn, on, probs, n_heads, L, nb, dh, C, inv_scale, st] {
            auto chead = [&](const std::vector<real>& buf, std::size_t b, std::size_t h) {
                return CHeadMap(buf.data() + b * L * C + h * dh, static_cast<Eigen::Index>(L),
                                static_cast<Eigen::Index>(dh), st);
            };
            auto mhead = [&](std::vector<real>& buf, std::size_t b, std::size_t h) {
                return HeadMap(buf.data() + b * L * C + h * dh, static_cast<Eigen::Index>(L),
                               static_cast<Eigen::Index>(dh), st);
            };
            auto& gq = ensure_grad(*qn);
            auto& gk = ensure_grad(*kn);
            auto& gv = ensure_grad(*vn);
            EMat dA(static_cast<Eigen::Index>(L), static_cast<Eigen::Index>(L));
            EMat dS(static_cast<Eigen::Index>(L), static_cast<Eigen::Index>(L));
            for (std::size_t b = 0; b < nb; ++b) {
                for (std::size_t h = 0; h < n_heads; ++h) {
                    CMap A(probs->data() + (b * n_heads + h) * L * L,
                           static_cast<Eigen::Index>(L), static_cast<Eigen::Index>(L));
                    auto go = chead(on->grad, b, h);
                    mhead(gv, b, h).noalias() += A.transpose() * go;
                    dA.noalias() = go * chead(vn->value, b, h).transpose();
                    for (std::size_t i = 0; i < L; ++i) {
                        // Fixed-order accumulation keeps the result independent
                        // of buffer alignment, so runs are bit-reproducible.
                        real dot = 0;
                        for (std::size_t j = 0; j < L; ++j)
                            dot += A(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) *
                                   dA(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
                        dS.row(i) = A.row(i).cwiseProduct((dA.row(i).array() - dot).matrix());
                    }
                    dS *= inv_scale;
                    mhead(gq, b, h).noalias() += dS * chead(kn->value, b, h);
                    mhead(gk, b, h).noalias() += dS.transpose() * chead(qn->value, b, h);
                }
            }
        });
    }
    return out;
}

Tensor gated_residual_blocks(const Tensor& h, const Tensor& x, const Tensor& gate,
                             std::size_t block_rows) {
    std::size_t R = h.rows(), C = h.cols();
    if (x.rows() != R || x.cols() != C) shape_fail("gated_residual_blocks", h, x);
    if (block_rows == 0 || R % block_rows != 0)
        throw ShapeError("gated_residual_blocks: " + std::to_string(R) +
                         " rows not divisible by block of " + std::to_string(block_rows));
    std::size_t B = R / block_rows;
    if (gate.rows() != B || gate.cols() != C) shape_fail("gated_residual_blocks gate", h, gate);
    bool rec = taping({&h, &x, &gate});
    Tensor out = make_out(R, C, rec);
    for (std::size_t r = 0; r < R; ++r) {
        const real* hi = h.values().data() + r * C;
        const real* xi = x.values().data() + r * C;
        const real* gi = gate.values().data() + (r / block_rows) * C;
        real* oi = out.values().data() + r * C;
        for (std::size_t j = 0; j < C; ++j) oi[j] = hi[j] + gi[j] * xi[j];
    }
    if (rec) {
        auto hn = h.node(), xn = x.node(), gn = gate.node(), on = out.node();
        g_tape->record([hn, xn, gn, on, block_rows, C] {
            std::size_t R = hn->rows;
            for (std::size_t r = 0; r < R; ++r) {
                const real* go = on->grad.data() + r * C;
                const real* gi = gn->value.data() + (r / block_rows) * C;
                const real* xi = xn->value.data() + r * C;
                if (hn->requires_grad) {
                    real* gh = ensure_grad(*hn).data() + r * C;
                    for (std::size_t j = 0; j < C; ++j) gh[j] += go[j];
                }
                if (xn->requires_grad) {
                    real* gx = ensure_grad(*xn).data() + r * C;
                    for (std::size_t j = 0; j < C; ++j) gx[j] += go[j] * gi[j];
                }
                if (gn->requires_grad) {
                    real* gg = ensure_grad(*gn).data() + (r / block_rows) * C;
                    for (std::size_t j = 0; j < C; ++j) gg[j] += go[j] * xi[j];
                }
            }
        });
    }
    return out;
}

// ---- loss ----

Tensor cross_entropy(const Tensor& logits, const std::vector<int32_t>& targets,
                     const std::vector<uint8_t>& position_mask, const std::vector<real>& weights) {
    std::size_t R = logits.rows(), V = logits.cols();
    if (targets.size() != R || position_mask.size() != R || weights.size() != R)
        throw ShapeError("cross_entropy: targets/mask/weights must have one entry per row");
    for (std::size_t r = 0; r < R; ++r)
        if (position_mask[r] && (targets[r] < 0 || static_cast<std::size_t>(targets[r]) >= V))
            throw DomainError("cross_entropy: target " + std::to_string(targets[r]) +
                              " outside vocabulary of " + std::to_string(V));
    bool rec = taping({&logits});
    Tensor out = make_out(1, 1, rec);
    auto probs = rec ? std::make_shared<std::vector<real>>(R * V) : nullptr;
    const real max_nll = -std::log(kProbClamp);
    real total = 0;
    for (std::size_t r = 0; r < R; ++r) {
        if (!position_mask[r]) continue;
        const real* z = logits.values().data() + r * V;
        real m = z[0];
        for (std::size_t j = 1; j < V; ++j) m = std::max(m, z[j]);
        real lse = 0;
        for (std::size_t j = 0; j < V; ++j) lse += std::exp(z[j] - m);
        real log_z = m + std::log(lse);
        if (rec) {
            real* p = probs->data() + r * V;
            real inv = real(1) / lse;
            for (std::size_t j = 0; j < V; ++j) p[j] = std::exp(z[j] - m) * inv;
        }
        real nll = log_z - z[targets[r]];
        total += weights[r] * std::min(nll, max_nll);
    }
    out.values()[0] = total;
    if (rec) {
        auto ln = logits.node(), on = out.node();
        g_tape->record([ln, on, probs, targets, position_mask, weights, V] {
            real go = on->grad[0];
            auto& g = ensure_grad(*ln);
            std::size_t R = ln->rows;
            for (std::size_t r = 0; r < R; ++r) {
                if (!position_mask[r]) continue;
                real w = go * weights[r];
                const real* p = probs->data() + r * V;
                real* gi = g.data() + r * V;
                for (std::size_t j = 0; j < V; ++j) gi[j] += w * p[j];
                gi[targets[r]] -= w;
            }
        });
    }
    return out;
}

}  // namespace loopmdm
