#include "anchorfuse/ops.hpp"

#include "anchorfuse/error.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <memory>
#include <numbers>

namespace anchorfuse {

namespace {

struct Input {
    std::size_t id;
    const Tensor* value;
    bool tracked;
};

Input input(Var v) { return {v.id, &v.value(), v.tape->requires_grad(v)}; }

void same_tape(Var a, Var b) {
    if (a.tape != b.tape) {
        fail(ErrorCategory::invalid_argument, "operands recorded on different tapes");
    }
}

void require_same_shape(const char* op, Var a, Var b) {
    if (!a.value().same_shape(b.value())) {
        fail(ErrorCategory::shape_mismatch,
             std::string(op) + " shape mismatch: " + a.value().shape_string() + " vs " + b.value().shape_string());
    }
}

void axpy(double alpha, const Tensor& x, Tensor& y) {
    const double* xs = x.data();
    double* ys = y.data();
    for (std::size_t i = 0; i < x.size(); ++i) {
        ys[i] += alpha * xs[i];
    }
}

Tensor like(const Tensor& t) { return Tensor(t.shape(), 0.0); }

} // namespace

Var matmul(Var a, Var b) {
    same_tape(a, b);
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    if (av.cols() != bv.rows()) {
        fail(ErrorCategory::shape_mismatch,
             "matmul inner dimensions disagree: " + av.shape_string() + " x " + bv.shape_string());
    }
    const std::size_t n = av.rows(), k = av.cols(), m = bv.cols();
    Tensor out = Tensor::matrix(n, m);
    kernels::gemm_nn(n, k, m, av.data(), bv.data(), out.data(), false);
    const Input ia = input(a), ib = input(b);
    return a.tape->record(std::move(out), {a, b}, [ia, ib, n, k, m](Tape& tape, std::size_t self) {
        const Tensor& g = tape.upstream(self);
        if (ia.tracked) {
            kernels::gemm_nt(n, m, k, g.data(), ib.value->data(), tape.grad_buffer(ia.id).data(), true);
        }
        if (ib.tracked) {
            kernels::gemm_tn(n, k, m, ia.value->data(), g.data(), tape.grad_buffer(ib.id).data(), true);
        }
    });
}

Var matmul_nt(Var a, Var b) {
    same_tape(a, b);
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    if (av.cols() != bv.cols()) {
        fail(ErrorCategory::shape_mismatch,
             "matmul_nt inner dimensions disagree: " + av.shape_string() + " x " + bv.shape_string() + "^T");
    }
    const std::size_t n = av.rows(), k = av.cols(), m = bv.rows();
    Tensor out = Tensor::matrix(n, m);
    kernels::gemm_nt(n, k, m, av.data(), bv.data(), out.data(), false);
    const Input ia = input(a), ib = input(b);
    return a.tape->record(std::move(out), {a, b}, [ia, ib, n, k, m](Tape& tape, std::size_t self) {
        const Tensor& g = tape.upstream(self);
        if (ia.tracked) {
            kernels::gemm_nn(n, m, k, g.data(), ib.value->data(), tape.grad_buffer(ia.id).data(), true);
        }
        if (ib.tracked) {
            kernels::gemm_tn(n, m, k, g.data(), ia.value->data(), tape.grad_buffer(ib.id).data(), true);
        }
    });
}

Var add(Var a, Var b) {
    same_tape(a, b);
    require_same_shape("add", a, b);
    Tensor out = a.value();
    axpy(1.0, b.value(), out);
    const Input ia = input(a), ib = input(b);
    return a.tape->record(std::move(out), {a, b}, [ia, ib](Tape& tape, std::size_t self) {
        const Tensor& g = tape.upstream(self);
        if (ia.tracked) axpy(1.0, g, tape.grad_buffer(ia.id));
        if (ib.tracked) axpy(1.0, g, tape.grad_buffer(ib.id));
    });
}

Var sub(Var a, Var b) {
    same_tape(a, b);
    require_same_shape("sub", a, b);
    Tensor out = a.value();
    axpy(-1.0, b.value(), out);
    const Input ia = input(a), ib = input(b);
    return a.tape->record(std::move(out), {a, b}, [ia, ib](Tape& tape, std::size_t self) {
        const Tensor& g = tape.upstream(self);
        if (ia.tracked) axpy(1.0, g, tape.grad_buffer(ia.id));
        if (ib.tracked) axpy(-1.0, g, tape.grad_buffer(ib.id));
    });
}

Var mul(Var a, Var b) {
    same_tape(a, b);
    require_same_shape("mul", a, b);
    Tensor out = a.value();
    const Tensor& bv = b.value();
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] *= bv[i];
    }
    const Input ia = input(a), ib = input(b);
    return a.tape->record(std::move(out), {a, b}, [ia, ib](Tape& tape, std::size_t self) {
        const Tensor& g = tape.upstream(self);
        if (ia.tracked) {
            Tensor& ga = tape.grad_buffer(ia.id);
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * (*ib.value)[i];
        }
        if (ib.tracked) {
            Tensor& gb = tape.grad_buffer(ib.id);
            for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * (*ia.value)[i];
        }
    });
}

Var scale(Var a, double factor) {
    Tensor out = a.value();
    for (double& v : out.values()) {
        v *= factor;
    }
    const Input ia = input(a);
    return a.tape->record(std::move(out), {a}, [ia, factor](Tape& tape, std::size_t self) {
        axpy(factor, tape.upstream(self), tape.grad_buffer(ia.id));
    });
}

Var add_row(Var x, Var row) {
    same_tape(x, row);
    const Tensor& xv = x.value();
    const Tensor& rv = row.value();
    if (rv.rows() != 1 || rv.cols() != xv.cols()) {
        fail(ErrorCategory::shape_mismatch,
             "add_row expects 1x" + std::to_string(xv.cols()) + " row, got " + rv.shape_string());
    }
    Tensor out = xv;
    const std::size_t n = xv.rows(), m = xv.cols();
    for (std::size_t r = 0; r < n; ++r) {
        for (std::size_t c = 0; c < m; ++c) {
            out(r, c) += rv[c];
        }
    }
    const Input ix = input(x), ir = input(row);
    return x.tape->record(std::move(out), {x, row}, [ix, ir, n, m](Tape& tape, std::size_t self) {
        const Tensor& g = tape.upstream(self);
        if (ix.tracked) axpy(1.0, g, tape.grad_buffer(ix.id));
        if (ir.tracked) {
            Tensor& gr = tape.grad_buffer(ir.id);
            for (std::size_t r = 0; r < n; ++r) {
                for (std::size_t c = 0; c < m; ++c) gr[c] += g(r, c);
            }
        }
    });
}

Var sigmoid(Var x) {
    Tensor out = x.value();
    for (double& v : out.values()) {
        v = 1.0 / (1.0 + std::exp(-v));
    }
    const Input ix = input(x);
    return x.tape->record(std::move(out), {x}, [ix](Tape& tape, std::size_t self) {
        const Tensor& g = tape.upstream(self);
        const Tensor& y = tape.value(Var{&tape, self});
        Tensor& gx = tape.grad_buffer(ix.id);
        for (std::size_t i = 0; i < g.size(); ++i) {
            gx[i] += g[i] * y[i] * (1.0 - y[i]);
        }
    });
}

Var gelu(Var x) {
    // 0.5 (1 + tanh(u)) == sigmoid(2u), u = sqrt(2/pi) (x + 0.044715 x^3)
    constexpr double k = 0.7978845608028654;
    constexpr double c = 0.044715;
    const Tensor& xv = x.value();
    Tensor out = like(xv);
    auto gate = std::make_shared<std::vector<double>>(xv.size());
    for (std::size_t i = 0; i < xv.size(); ++i) {
        const double v = xv[i];
        const double s = 1.0 / (1.0 + std::exp(-2.0 * k * (v + c * v * v * v)));
        (*gate)[i] = s;
        out[i] = v * s;
    }
    const Input ix = input(x);
    if (!ix.tracked) gate.reset();
    return x.tape->record(std::move(out), {x}, [ix, gate](Tape& tape, std::size_t self) {
        const Tensor& g = tape.upstream(self);
        Tensor& gx = tape.grad_buffer(ix.id);
        const Tensor& xs = *ix.value;
        for (std::size_t i = 0; i < g.size(); ++i) {
            const double v = xs[i];
            const double s = (*gate)[i];
            const double d = s + v * s * (1.0 - s) * 2.0 * k * (1.0 + 3.0 * c * v * v);
            gx[i] += g[i] * d;
        }
    });
}

Var layer_norm_rows(Var x, double eps) {
    const Tensor& xv = x.value();
    const std::size_t n = xv.rows(), m = xv.cols();
    Tensor out = like(xv);
    auto inv_std = std::make_shared<std::vector<double>>(n);
    for (std::size_t r = 0; r < n; ++r) {
        const auto row = xv.row_span(r);
        double mean = 0.0;
        for (double v : row) mean += v;
        mean /= static_cast<double>(m);
        double var = 0.0;
        for (double v : row) var += (v - mean) * (v - mean);
        var /= static_cast<double>(m);
        const double is = 1.0 / std::sqrt(var + eps);
        (*inv_std)[r] = is;
        for (std::size_t c = 0; c < m; ++c) {
            out(r, c) = (row[c] - mean) * is;
        }
    }
    const Input ix = input(x);
    return x.tape->record(std::move(out), {x}, [ix, inv_std, n, m](Tape& tape, std::size_t self) {
        const Tensor& g = tape.upstream(self);
        const Tensor* y = &tape.value(Var{&tape, self});
        Tensor& gx = tape.grad_buffer(ix.id);
        for (std::size_t r = 0; r < n; ++r) {
            double mean_g = 0.0, mean_gy = 0.0;
            for (std::size_t c = 0; c < m; ++c) {
                mean_g += g(r, c);
                mean_gy += g(r, c) * (*y)(r, c);
            }
            mean_g /= static_cast<double>(m);
            mean_gy /= static_cast<double>(m);
            const double is = (*inv_std)[r];
            for (std::size_t c = 0; c < m; ++c) {
                gx(r, c) += is * (g(r, c) - mean_g - (*y)(r, c) * mean_gy);
            }
        }
    });
}

Var softmax_rows(Var x, double temperature) {
    if (!(temperature > 0.0)) {
        fail(ErrorCategory::invalid_argument, "softmax temperature must be positive");
    }
    const Tensor& xv = x.value();
    const std::size_t n = xv.rows(), m = xv.cols();
    Tensor out = like(xv);
    for (std::size_t r = 0; r < n; ++r) {
        const auto row = xv.row_span(r);
        const double mx = *std::max_element(row.begin(), row.end());
        double total = 0.0;
        for (std::size_t c = 0; c < m; ++c) {
            out(r, c) = std::exp((row[c] - mx) / temperature);
            total += out(r, c);
        }
        for (std::size_t c = 0; c < m; ++c) {
            out(r, c) /= total;
        }
    }
    const Input ix = input(x);
    return x.tape->record(std::move(out), {x}, [ix, n, m, temperature](Tape& tape, std::size_t self) {
        const Tensor& g = tape.upstream(self);
        const Tensor* y = &tape.value(Var{&tape, self});
        Tensor& gx = tape.grad_buffer(ix.id);
        for (std::size_t r = 0; r < n; ++r) {
            double inner = 0.0;
            for (std::size_t c = 0; c < m; ++c) inner += g(r, c) * (*y)(r, c);
            for (std::size_t c = 0; c < m; ++c) {
                gx(r, c) += (*y)(r, c) * (g(r, c) - inner) / temperature;
            }
        }
    });
}

Var concat_rows(std::span<const Var> parts) {
    if (parts.empty()) {
        fail(ErrorCategory::invalid_argument, "concat_rows of nothing");
    }
    std::vector<Tensor> values;
    values.reserve(parts.size());
    std::vector<Input> inputs;
    inputs.reserve(parts.size());
    for (Var p : parts) {
        same_tape(parts.front(), p);
        values.push_back(p.value());
        inputs.push_back(input(p));
    }
    Tensor out = anchorfuse::concat_rows(std::span<const Tensor>(values));
    return parts.front().tape->record(std::move(out), parts, [inputs](Tape& tape, std::size_t self) {
        const Tensor& g = tape.upstream(self);
        std::size_t offset = 0;
        for (const Input& in : inputs) {
            const std::size_t count = in.value->size();
            if (in.tracked) {
                Tensor& gi = tape.grad_buffer(in.id);
                for (std::size_t i = 0; i < count; ++i) gi[i] += g[offset + i];
            }
            offset += count;
        }
    });
}

Var concat_cols(Var a, Var b) {
    same_tape(a, b);
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    if (av.rows() != bv.rows()) {
        fail(ErrorCategory::shape_mismatch,
             "concat_cols row mismatch: " + av.shape_string() + " vs " + bv.shape_string());
    }
    const std::size_t n = av.rows(), ma = av.cols(), mb = bv.cols();
    Tensor out = Tensor::matrix(n, ma + mb);
    for (std::size_t r = 0; r < n; ++r) {
        std::copy_n(av.data() + r * ma, ma, out.data() + r * (ma + mb));
        std::copy_n(bv.data() + r * mb, mb, out.data() + r * (ma + mb) + ma);
    }
    const Input ia = input(a), ib = input(b);
    return a.tape->record(std::move(out), {a, b}, [ia, ib, n, ma, mb](Tape& tape, std::size_t self) {
        const Tensor& g = tape.upstream(self);
        if (ia.tracked) {
            Tensor& ga = tape.grad_buffer(ia.id);
            for (std::size_t r = 0; r < n; ++r)
                for (std::size_t c = 0; c < ma; ++c) ga(r, c) += g(r, c);
        }
        if (ib.tracked) {
            Tensor& gb = tape.grad_buffer(ib.id);
            for (std::size_t r = 0; r < n; ++r)
                for (std::size_t c = 0; c < mb; ++c) gb(r, c) += g(r, ma + c);
        }
    });
}

Var slice_rows(Var x, std::size_t begin, std::size_t count) {
    const Tensor& xv = x.value();
    if (begin + count > xv.rows()) {
        fail(ErrorCategory::shape_mismatch, "slice_rows [" + std::to_string(begin) + ", " +
                                                std::to_string(begin + count) + ") out of " + xv.shape_string());
    }
    const std::size_t m = xv.cols();
    Tensor out({count, m}, std::vector<double>(xv.data() + begin * m, xv.data() + (begin + count) * m));
    const Input ix = input(x);
    return x.tape->record(std::move(out), {x}, [ix, begin, count, m](Tape& tape, std::size_t self) {
        const Tensor& g = tape.upstream(self);
        Tensor& gx = tape.grad_buffer(ix.id);
        for (std::size_t i = 0; i < count * m; ++i) gx[begin * m + i] += g[i];
    });
}

Var l2_normalize(Var x, double min_norm) {
    const Tensor& xv = x.value();
    const double norm = kernels::norm2(xv.values());
    if (!(norm > min_norm)) {
        fail(ErrorCategory::numeric, "l2_normalize of near-zero vector (norm " + std::to_string(norm) + ")");
    }
    Tensor out = xv;
    for (double& v : out.values()) v /= norm;
    const Input ix = input(x);
    return x.tape->record(std::move(out), {x}, [ix, norm](Tape& tape, std::size_t self) {
        const Tensor& g = tape.upstream(self);
        const Tensor* y = &tape.value(Var{&tape, self});
        Tensor& gx = tape.grad_buffer(ix.id);
        const double proj = kernels::dot(g.values(), y->values());
        for (std::size_t i = 0; i < g.size(); ++i) {
            gx[i] += (g[i] - (*y)[i] * proj) / norm;
        }
    });
}

Var sum(Var x) {
    double total = 0.0;
    for (double v : x.value().values()) total += v;
    const Input ix = input(x);
    return x.tape->record(Tensor::scalar(total), {x}, [ix](Tape& tape, std::size_t self) {
        const double g = tape.upstream(self)[0];
        for (double& v : tape.grad_buffer(ix.id).values()) v += g;
    });
}

Var dot(Var a, Var b) {
    same_tape(a, b);
    if (a.value().size() != b.value().size()) {
        fail(ErrorCategory::shape_mismatch,
             "dot length mismatch: " + a.value().shape_string() + " vs " + b.value().shape_string());
    }
    const double d = kernels::dot(a.value().values(), b.value().values());
    const Input ia = input(a), ib = input(b);
    return a.tape->record(Tensor::scalar(d), {a, b}, [ia, ib](Tape& tape, std::size_t self) {
        const double g = tape.upstream(self)[0];
        if (ia.tracked) axpy(g, *ib.value, tape.grad_buffer(ia.id));
        if (ib.tracked) axpy(g, *ia.value, tape.grad_buffer(ib.id));
    });
}

Var abs_sum(Var x) {
    double total = 0.0;
    for (double v : x.value().values()) total += std::abs(v);
    const Input ix = input(x);
    return x.tape->record(Tensor::scalar(total), {x}, [ix](Tape& tape, std::size_t self) {
        const double g = tape.upstream(self)[0];
        Tensor& gx = tape.grad_buffer(ix.id);
        const Tensor& xs = *ix.value;
        for (std::size_t i = 0; i < xs.size(); ++i) {
            if (xs[i] > 0.0) gx[i] += g;
            else if (xs[i] < 0.0) gx[i] -= g;
        }
    });
}

Var weighted_sum(std::span<const Var> terms, std::span<const double> weights) {
    if (terms.empty() || terms.size() != weights.size()) {
        fail(ErrorCategory::invalid_argument, "weighted_sum needs one weight per term");
    }
    double total = 0.0;
    std::vector<Input> inputs;
    inputs.reserve(terms.size());
    for (std::size_t i = 0; i < terms.size(); ++i) {
        total += weights[i] * terms[i].item();
        inputs.push_back(input(terms[i]));
    }
    std::vector<double> w(weights.begin(), weights.end());
    return terms.front().tape->record(Tensor::scalar(total), terms, [inputs, w](Tape& tape, std::size_t self) {
        const double g = tape.upstream(self)[0];
        for (std::size_t i = 0; i < inputs.size(); ++i) {
            if (inputs[i].tracked) tape.grad_buffer(inputs[i].id)[0] += g * w[i];
        }
    });
}

namespace {

struct AttentionCache {
    Tensor q, k, v;      // projected, n x D / m x D / m x D
    Tensor probs;        // heads x n x m
    Tensor mixed;        // n x D (pre output projection)
};

} // namespace

Var attention(Var q_src, Var k_src, Var v_src, const AttentionVars& w, int heads, bool causal) {
    const Tensor& wq = w.query.value();
    const Tensor& wk = w.key.value();
    const Tensor& wv = w.value.value();
    const Tensor& wo = w.output.value();
    const std::size_t n = q_src.rows();
    const std::size_t m = k_src.rows();
    const std::size_t width = wq.cols();
    if (m == 0) {
        fail(ErrorCategory::invalid_argument, "attention needs at least one key");
    }
    if (v_src.rows() != m) {
        fail(ErrorCategory::shape_mismatch, "attention keys " + k_src.value().shape_string() + " and values " +
                                                v_src.value().shape_string() + " differ in length");
    }
    if (q_src.cols() != wq.rows() || k_src.cols() != wk.rows() || v_src.cols() != wv.rows() ||
        wk.cols() != width || wv.cols() != width || wo.rows() != width) {
        fail(ErrorCategory::shape_mismatch, "attention projection shapes disagree: q " + q_src.value().shape_string() +
                                                " Wq " + wq.shape_string() + " k " + k_src.value().shape_string() +
                                                " Wk " + wk.shape_string() + " v " + v_src.value().shape_string() +
                                                " Wv " + wv.shape_string() + " Wo " + wo.shape_string());
    }
    if (heads <= 0 || width % static_cast<std::size_t>(heads) != 0) {
        fail(ErrorCategory::invalid_argument,
             "attention width " + std::to_string(width) + " not divisible by heads " + std::to_string(heads));
    }
    if (causal && n != m) {
        fail(ErrorCategory::invalid_argument, "causal attention requires self-attention shapes");
    }
    const std::size_t h_count = static_cast<std::size_t>(heads);
    const std::size_t d = width / h_count;
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
    const std::size_t out_width = wo.cols();

    auto cache = std::make_shared<AttentionCache>();
    cache->q = Tensor::matrix(n, width);
    cache->k = Tensor::matrix(m, width);
    cache->v = Tensor::matrix(m, width);
    kernels::gemm_nn(n, wq.rows(), width, q_src.value().data(), wq.data(), cache->q.data(), false);
    kernels::gemm_nn(m, wk.rows(), width, k_src.value().data(), wk.data(), cache->k.data(), false);
    kernels::gemm_nn(m, wv.rows(), width, v_src.value().data(), wv.data(), cache->v.data(), false);
    cache->probs = Tensor({h_count, n, m}, 0.0);
    cache->mixed = Tensor::matrix(n, width);

    std::vector<double> scores(m);
    for (std::size_t h = 0; h < h_count; ++h) {
        const std::size_t off = h * d;
        for (std::size_t i = 0; i < n; ++i) {
            const double* qi = cache->q.data() + i * width + off;
            const std::size_t visible = causal ? i + 1 : m;
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t j = 0; j < visible; ++j) {
                const double* kj = cache->k.data() + j * width + off;
                double s = 0.0;
                for (std::size_t c = 0; c < d; ++c) s += qi[c] * kj[c];
                scores[j] = s * inv_sqrt_d;
                mx = std::max(mx, scores[j]);
            }
            double total = 0.0;
            double* p = cache->probs.data() + (h * n + i) * m;
            for (std::size_t j = 0; j < visible; ++j) {
                p[j] = std::exp(scores[j] - mx);
                total += p[j];
            }
            double* oi = cache->mixed.data() + i * width + off;
            for (std::size_t j = 0; j < visible; ++j) {
                p[j] /= total;
                const double* vj = cache->v.data() + j * width + off;
                for (std::size_t c = 0; c < d; ++c) oi[c] += p[j] * vj[c];
            }
        }
    }

    Tensor out = Tensor::matrix(n, out_width);
    kernels::gemm_nn(n, width, out_width, cache->mixed.data(), wo.data(), out.data(), false);

    const std::array<Var, 7> all{q_src, k_src, v_src, w.query, w.key, w.value, w.output};
    const Input iq = input(q_src), ik = input(k_src), iv = input(v_src);
    const Input iwq = input(w.query), iwk = input(w.key), iwv = input(w.value), iwo = input(w.output);
    return q_src.tape->record(
        std::move(out), std::span<const Var>(all),
        [=](Tape& tape, std::size_t self) {
            const Tensor& g = tape.upstream(self);
            if (iwo.tracked) {
                kernels::gemm_tn(n, width, out_width, cache->mixed.data(), g.data(),
                                 tape.grad_buffer(iwo.id).data(), true);
            }
            const bool need_q = iq.tracked || iwq.tracked;
            const bool need_k = ik.tracked || iwk.tracked;
            const bool need_v = iv.tracked || iwv.tracked;
            if (!need_q && !need_k && !need_v) {
                return;
            }
            Tensor d_mixed = Tensor::matrix(n, width);
            kernels::gemm_nt(n, out_width, width, g.data(), iwo.value->data(), d_mixed.data(), false);

            Tensor dq = Tensor::matrix(n, width);
            Tensor dk = Tensor::matrix(m, width);
            Tensor dv = Tensor::matrix(m, width);
            std::vector<double> dp(m);
            for (std::size_t h = 0; h < h_count; ++h) {
                const std::size_t off = h * d;
                for (std::size_t i = 0; i < n; ++i) {
                    const std::size_t visible = causal ? i + 1 : m;
                    const double* p = cache->probs.data() + (h * n + i) * m;
                    const double* go = d_mixed.data() + i * width + off;
                    double inner = 0.0;
                    for (std::size_t j = 0; j < visible; ++j) {
                        const double* vj = cache->v.data() + j * width + off;
                        double s = 0.0;
                        for (std::size_t c = 0; c < d; ++c) s += go[c] * vj[c];
                        dp[j] = s;
                        inner += s * p[j];
                        if (need_v) {
                            double* dvj = dv.data() + j * width + off;
                            for (std::size_t c = 0; c < d; ++c) dvj[c] += p[j] * go[c];
                        }
                    }
                    const double* qi = cache->q.data() + i * width + off;
                    double* dqi = dq.data() + i * width + off;
                    for (std::size_t j = 0; j < visible; ++j) {
                        const double ds = p[j] * (dp[j] - inner) * inv_sqrt_d;
                        if (ds == 0.0) continue;
                        const double* kj = cache->k.data() + j * width + off;
                        double* dkj = dk.data() + j * width + off;
                        for (std::size_t c = 0; c < d; ++c) {
                            dqi[c] += ds * kj[c];
                            dkj[c] += ds * qi[c];
                        }
                    }
                }
            }
            auto propagate = [&](const Input& src, const Input& weight, const Tensor& d_proj, std::size_t rows) {
                const std::size_t in_width = weight.value->rows();
                if (src.tracked) {
                    kernels::gemm_nt(rows, width, in_width, d_proj.data(), weight.value->data(),
                                     tape.grad_buffer(src.id).data(), true);
                }
                if (weight.tracked) {
                    kernels::gemm_tn(rows, in_width, width, src.value->data(), d_proj.data(),
                                     tape.grad_buffer(weight.id).data(), true);
                }
            };
            propagate(iq, iwq, dq, n);
            propagate(ik, iwk, dk, m);
            propagate(iv, iwv, dv, m);
        });
}

} // namespace anchorfuse
