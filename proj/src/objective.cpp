#include "anchorfuse/objective.hpp"

#include "anchorfuse/anchors.hpp"
#include "anchorfuse/error.hpp"
#include "anchorfuse/ops.hpp"

#include <algorithm>
#include <cmath>

namespace anchorfuse {

namespace {

constexpr double kLogFloor = 1e-12;
constexpr double kUnitTolerance = 1e-6;

void check_temperature(double t) {
    if (!(t > 0.0)) {
        fail(ErrorCategory::invalid_argument, "temperature must be positive, got " + std::to_string(t));
    }
}

void check_label(int y, std::size_t classes) {
    if (y < 0 || static_cast<std::size_t>(y) >= classes) {
        fail(ErrorCategory::invalid_argument,
             "label " + std::to_string(y) + " out of range for " + std::to_string(classes) + " classes");
    }
}

void check_unit(std::span<const double> v, const char* what) {
    const double n = kernels::norm2(v);
    if (std::abs(n - 1.0) > kUnitTolerance) {
        fail(ErrorCategory::numeric, std::string(what) + " is not unit norm (norm " + std::to_string(n) + ")");
    }
}

// log softmax(s / T)
std::vector<double> log_softmax(std::span<const double> s, double temperature) {
    check_temperature(temperature);
    const double m = *std::max_element(s.begin(), s.end());
    double z = 0.0;
    for (double v : s) z += std::exp((v - m) / temperature);
    const double log_z = std::log(z);
    std::vector<double> out(s.size());
    for (std::size_t i = 0; i < s.size(); ++i) out[i] = (s[i] - m) / temperature - log_z;
    return out;
}

double kl_value(std::span<const double> log_p, std::span<const double> log_q) {
    double kl = 0.0;
    for (std::size_t i = 0; i < log_p.size(); ++i) kl += std::exp(log_p[i]) * (log_p[i] - log_q[i]);
    return std::max(kl, 0.0);
}

void check_pair(std::size_t a, std::size_t b, const char* what) {
    if (a != b || a == 0) {
        fail(ErrorCategory::shape_mismatch, std::string(what) + ": lengths " + std::to_string(a) + " and " +
                                                std::to_string(b));
    }
}

Confidence weight_for(std::span<const double> s, LossSwitches switches) {
    if (!switches.use_conf_weighting) {
        return {0.0, 1.0};
    }
    return confidence(softmax(s, 1.0));
}

} // namespace

void LossConfig::validate() const {
    if (!(lambda_kd >= 0.0) || !(lambda_align >= 0.0) || !(lambda_high >= 0.0) || !(lambda_low >= 0.0)) {
        fail(ErrorCategory::config, "loss weights must be non-negative");
    }
    if (!(temperature > 0.0)) {
        fail(ErrorCategory::config, "distillation temperature must be positive");
    }
}

LossBreakdown mean_breakdown(std::span<const LossBreakdown> items) {
    LossBreakdown m{0, 0, 0, 0, 0, 0, 0};
    if (items.empty()) {
        return m;
    }
    for (const auto& b : items) {
        m.total += b.total;
        m.ce += b.ce;
        m.kl += b.kl;
        m.anchor += b.anchor;
        m.align += b.align;
        m.conf += b.conf;
        m.w += b.w;
    }
    const double n = static_cast<double>(items.size());
    for (double* f : {&m.total, &m.ce, &m.kl, &m.anchor, &m.align, &m.conf, &m.w}) *f /= n;
    return m;
}

std::vector<double> logits(const Tensor& image_embedding, std::span<const Tensor> class_text_embeddings,
                           double logit_scale) {
    check_unit(image_embedding.values(), "image embedding");
    std::vector<double> s;
    s.reserve(class_text_embeddings.size());
    for (const Tensor& t : class_text_embeddings) {
        check_pair(t.size(), image_embedding.size(), "logits");
        check_unit(t.values(), "class text embedding");
        s.push_back(logit_scale * kernels::dot(image_embedding.values(), t.values()));
    }
    return s;
}

double cross_entropy(std::span<const double> s, int y) {
    check_label(y, s.size());
    return -log_softmax(s, 1.0)[static_cast<std::size_t>(y)];
}

Confidence confidence(std::span<const double> p) {
    if (p.size() < 2) {
        fail(ErrorCategory::invalid_argument, "confidence needs at least 2 classes");
    }
    double total = 0.0;
    double h = 0.0;
    for (double v : p) {
        total += v;
        if (v > 0.0) h -= v * std::log(std::max(v, kLogFloor));
    }
    if (std::abs(total - 1.0) > 1e-9) {
        fail(ErrorCategory::invalid_argument, "probabilities sum to " + std::to_string(total));
    }
    const double conf = std::clamp(1.0 - h / std::log(static_cast<double>(p.size())), 0.0, 1.0);
    return {conf, 1.0 - conf};
}

double kl_distill(std::span<const double> s, std::span<const double> s0, double temperature) {
    check_pair(s.size(), s0.size(), "kl_distill");
    return kl_value(log_softmax(s, temperature), log_softmax(s0, temperature));
}

double align_loss(const Tensor& fused_visual, const Tensor& text_rep) {
    check_pair(fused_visual.size(), text_rep.size(), "align_loss");
    const double na = kernels::norm2(fused_visual.values());
    const double nb = kernels::norm2(text_rep.values());
    if (!(na > 0.0) || !(nb > 0.0)) {
        fail(ErrorCategory::numeric, "align_loss of a zero vector");
    }
    return 1.0 - kernels::dot(fused_visual.values(), text_rep.values()) / (na * nb);
}

LossBreakdown total_loss(const LossInputs& in, const LossConfig& cfg, LossSwitches switches) {
    cfg.validate();
    LossBreakdown b;
    b.ce = cross_entropy(in.s, in.y);
    b.kl = kl_distill(in.s, in.s0, cfg.temperature);
    b.anchor = switches.use_anchor ? anchor_loss(*in.f_text, *in.f_high, *in.f_low, cfg.lambda_high, cfg.lambda_low)
                                   : 0.0;
    b.align = align_loss(*in.fused_visual, *in.text_rep);
    const Confidence c = weight_for(in.s, switches);
    b.conf = c.conf;
    b.w = c.w;
    b.total = b.ce + cfg.lambda_kd * b.w * b.kl + b.w * b.anchor + cfg.lambda_align * b.w * b.align;
    return b;
}

Var logits(Var image_embedding, Var class_text_embeddings, double logit_scale) {
    check_unit(image_embedding.value().values(), "image embedding");
    const Tensor& texts = class_text_embeddings.value();
    for (std::size_t c = 0; c < texts.rows(); ++c) check_unit(texts.row_span(c), "class text embedding");
    return scale(matmul_nt(image_embedding, class_text_embeddings), logit_scale);
}

Var cross_entropy(Var s, int y) {
    const Tensor& sv = s.value();
    check_label(y, sv.size());
    std::vector<double> log_p = log_softmax(sv.values(), 1.0);
    const double value = -log_p[static_cast<std::size_t>(y)];
    const std::size_t in = s.id;
    return s.tape->record(Tensor::scalar(value), {s}, [in, y, log_p](Tape& tape, std::size_t self) {
        const double g = tape.upstream(self)[0];
        Tensor& gs = tape.grad_buffer(in);
        for (std::size_t i = 0; i < log_p.size(); ++i) {
            gs[i] += g * (std::exp(log_p[i]) - (static_cast<int>(i) == y ? 1.0 : 0.0));
        }
    });
}

Var kl_distill(Var s, std::span<const double> s0, double temperature) {
    const Tensor& sv = s.value();
    check_pair(sv.size(), s0.size(), "kl_distill");
    std::vector<double> log_p = log_softmax(sv.values(), temperature);
    std::vector<double> log_q = log_softmax(s0, temperature);
    const double kl = kl_value(log_p, log_q);
    const std::size_t in = s.id;
    return s.tape->record(Tensor::scalar(kl), {s},
                          [in, kl, temperature, log_p = std::move(log_p), log_q = std::move(log_q)](
                              Tape& tape, std::size_t self) {
                              const double g = tape.upstream(self)[0] / temperature;
                              Tensor& gs = tape.grad_buffer(in);
                              for (std::size_t i = 0; i < log_p.size(); ++i) {
                                  gs[i] += g * std::exp(log_p[i]) * (log_p[i] - log_q[i] - kl);
                              }
                          });
}

Var align_loss(Var fused_visual, Var text_rep) {
    const Tensor& a = fused_visual.value();
    const Tensor& b = text_rep.value();
    check_pair(a.size(), b.size(), "align_loss");
    const double na = kernels::norm2(a.values());
    const double nb = kernels::norm2(b.values());
    if (!(na > 0.0) || !(nb > 0.0)) {
        fail(ErrorCategory::numeric, "align_loss of a zero vector");
    }
    const double cosine = kernels::dot(a.values(), b.values()) / (na * nb);
    Tape& tape = *fused_visual.tape;
    const bool ta = tape.requires_grad(fused_visual);
    const bool tb = tape.requires_grad(text_rep);
    const std::size_t ia = fused_visual.id, ib = text_rep.id;
    return tape.record(Tensor::scalar(1.0 - cosine), {fused_visual, text_rep},
                       [=](Tape& t, std::size_t self) {
                           const double g = t.upstream(self)[0];
                           const Tensor& av = t.value(Var{&t, ia});
                           const Tensor& bv = t.value(Var{&t, ib});
                           // d(1 - cos)/da = -(b / (|a||b|) - cos a / |a|^2)
                           if (ta) {
                               Tensor& ga = t.grad_buffer(ia);
                               for (std::size_t i = 0; i < av.size(); ++i) {
                                   ga[i] -= g * (bv[i] / (na * nb) - cosine * av[i] / (na * na));
                               }
                           }
                           if (tb) {
                               Tensor& gb = t.grad_buffer(ib);
                               for (std::size_t i = 0; i < bv.size(); ++i) {
                                   gb[i] -= g * (av[i] / (na * nb) - cosine * bv[i] / (nb * nb));
                               }
                           }
                       });
}

RecordedLoss total_loss(Var s, std::span<const double> s0, int y, Var f_text, const Tensor& f_high,
                        const Tensor& f_low, Var fused_visual, Var text_rep, const LossConfig& cfg,
                        LossSwitches switches) {
    cfg.validate();
    Var ce = cross_entropy(s, y);
    Var kl = kl_distill(s, s0, cfg.temperature);
    Var al = align_loss(fused_visual, text_rep);
    const Confidence c = weight_for(s.value().values(), switches);

    std::vector<Var> terms{ce, kl, al};
    std::vector<double> weights{1.0, cfg.lambda_kd * c.w, cfg.lambda_align * c.w};
    RecordedLoss out;
    if (switches.use_anchor) {
        Var an = anchor_loss(f_text, f_high, f_low, cfg.lambda_high, cfg.lambda_low);
        terms.push_back(an);
        weights.push_back(c.w);
        out.values.anchor = an.item();
    } else {
        out.values.anchor = 0.0;
    }
    out.total = weighted_sum(terms, weights);
    out.values.ce = ce.item();
    out.values.kl = kl.item();
    out.values.align = al.item();
    out.values.conf = c.conf;
    out.values.w = c.w;
    out.values.total = out.total.item();
    return out;
}

} // namespace anchorfuse
