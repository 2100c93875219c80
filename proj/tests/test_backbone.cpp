#include "support.hpp"

#include <doctest.h>

#include <cmath>
#include <numbers>

using namespace anchorfuse;
using namespace anchorfuse::testing;

namespace {

// Loop-level transformer reading weights straight from the registry.
using Mat = std::vector<std::vector<double>>;

Mat from(const Tensor& t) {
    Mat m(t.rows(), std::vector<double>(t.cols()));
    for (std::size_t r = 0; r < t.rows(); ++r) {
        for (std::size_t c = 0; c < t.cols(); ++c) m[r][c] = t(r, c);
    }
    return m;
}

Mat mm(const Mat& a, const Tensor& b) {
    Mat out(a.size(), std::vector<double>(b.cols(), 0.0));
    for (std::size_t i = 0; i < a.size(); ++i) {
        for (std::size_t j = 0; j < b.cols(); ++j) {
            for (std::size_t k = 0; k < b.rows(); ++k) out[i][j] += a[i][k] * b(k, j);
        }
    }
    return out;
}

Mat layer_norm(const Mat& x) {
    Mat out = x;
    for (auto& row : out) {
        double mean = 0.0, var = 0.0;
        for (double v : row) mean += v;
        mean /= static_cast<double>(row.size());
        for (double v : row) var += (v - mean) * (v - mean);
        var /= static_cast<double>(row.size());
        for (double& v : row) v = (v - mean) / std::sqrt(var + 1e-5);
    }
    return out;
}

double gelu(double x) {
    return 0.5 * x * (1.0 + std::tanh(std::sqrt(2.0 / std::numbers::pi) * (x + 0.044715 * x * x * x)));
}

Mat block(const Mat& x, const ParameterRegistry& p, const std::string& prefix, int heads, bool causal) {
    const Mat h = layer_norm(x);
    const Mat q = mm(h, p.at(prefix + "attn.query"));
    const Mat k = mm(h, p.at(prefix + "attn.key"));
    const Mat v = mm(h, p.at(prefix + "attn.value"));
    const std::size_t n = x.size(), width = x[0].size(), d = width / static_cast<std::size_t>(heads);
    Mat concat(n, std::vector<double>(width, 0.0));
    for (std::size_t hd = 0; hd < static_cast<std::size_t>(heads); ++hd) {
        for (std::size_t i = 0; i < n; ++i) {
            const std::size_t visible = causal ? i + 1 : n;
            std::vector<double> s(visible);
            double mx = -1e300;
            for (std::size_t j = 0; j < visible; ++j) {
                double dot = 0.0;
                for (std::size_t c = 0; c < d; ++c) dot += q[i][hd * d + c] * k[j][hd * d + c];
                s[j] = dot / std::sqrt(static_cast<double>(d));
                mx = std::max(mx, s[j]);
            }
            double z = 0.0;
            for (double& e : s) z += e = std::exp(e - mx);
            for (std::size_t j = 0; j < visible; ++j) {
                for (std::size_t c = 0; c < d; ++c) concat[i][hd * d + c] += s[j] / z * v[j][hd * d + c];
            }
        }
    }
    Mat out = x;
    const Mat attn = mm(concat, p.at(prefix + "attn.output"));
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t c = 0; c < width; ++c) out[i][c] += attn[i][c];
    }
    Mat up = mm(layer_norm(out), p.at(prefix + "mlp.up"));
    for (auto& row : up) {
        for (double& v : row) v = gelu(v);
    }
    const Mat down = mm(up, p.at(prefix + "mlp.down"));
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t c = 0; c < width; ++c) out[i][c] += down[i][c];
    }
    return out;
}

std::vector<double> project_normalize(const std::vector<double>& row, const Tensor& head) {
    const Mat out = mm(layer_norm(Mat{row}), head);
    double norm = 0.0;
    for (double v : out[0]) norm += v * v;
    std::vector<double> e = out[0];
    for (double& v : e) v /= std::sqrt(norm);
    return e;
}

std::vector<double> oracle_image(const FrozenBackbone& b, const Tensor& image, const std::vector<Tensor>& prompts) {
    const BackboneConfig& c = b.config();
    const ParameterRegistry& p = b.parameters();
    const int side = c.patches_per_side();
    Mat patches;
    for (int pr = 0; pr < side; ++pr) {
        for (int pc = 0; pc < side; ++pc) {
            std::vector<double> patch;
            for (int r = 0; r < c.patch_size; ++r) {
                for (int col = 0; col < c.patch_size; ++col) {
                    patch.push_back(image[static_cast<std::size_t>((pr * c.patch_size + r) * c.image_size +
                                                                   pc * c.patch_size + col)]);
                }
            }
            patches.push_back(patch);
        }
    }
    Mat x = from(p.at("image.summary_token"));
    for (const auto& row : mm(patches, p.at("image.patch_proj"))) x.push_back(row);
    const Mat pos = from(p.at("image.position"));
    for (std::size_t r = 0; r < x.size(); ++r) {
        for (std::size_t col = 0; col < x[r].size(); ++col) x[r][col] += pos[r][col];
    }
    const std::size_t base = x.size();
    for (int l = 0; l < c.image_depth; ++l) {
        if (!prompts.empty()) {
            x.resize(base);
            for (const auto& row : from(prompts[static_cast<std::size_t>(l)])) x.push_back(row);
        }
        x = block(x, p, "image.layer" + std::to_string(l) + ".", c.heads, false);
    }
    return project_normalize(x[0], p.at("image.head"));
}

std::vector<double> oracle_text(const FrozenBackbone& b, const Tensor* context, const std::vector<int>& ids) {
    const ParameterRegistry& p = b.parameters();
    Mat x = context ? from(*context) : Mat{};
    const Mat table = from(p.at("text.token_embedding"));
    for (int id : ids) x.push_back(table[static_cast<std::size_t>(id)]);
    const Mat pos = from(p.at("text.position"));
    for (std::size_t r = 0; r < x.size(); ++r) {
        for (std::size_t col = 0; col < x[r].size(); ++col) x[r][col] += pos[r][col];
    }
    for (int l = 0; l < b.config().text_depth; ++l) {
        x = block(x, p, "text.layer" + std::to_string(l) + ".", b.config().heads, true);
    }
    return project_normalize(x.back(), p.at("text.head"));
}

BackboneConfig small_config(std::uint64_t seed) {
    BackboneConfig c = tiny_model(seed).backbone_config;
    c.vocab_size = 20;
    c.max_text_len = 8;
    return c;
}

Tensor image(Rng& rng, const BackboneConfig& c) {
    return random_tensor(rng, 1, static_cast<std::size_t>(c.image_size * c.image_size));
}

std::vector<Var> as_vars(Tape& tape, const std::vector<Tensor>& prompts) {
    std::vector<Var> out;
    for (const Tensor& t : prompts) out.push_back(tape.constant(t));
    return out;
}

} // namespace

TEST_CASE("construction is seed deterministic") {
    const BackboneConfig c = small_config(3);
    const FrozenBackbone a(c), b(c);
    CHECK(a.parameters() == b.parameters());
    CHECK(a.parameter_hash() == b.parameter_hash());
    BackboneConfig other = c;
    other.seed = 4;
    const FrozenBackbone d(other);
    CHECK(d.parameter_hash() != a.parameter_hash());
    CHECK_FALSE(d.parameters() == a.parameters());
    for (const auto& name : a.parameters().names()) CHECK(a.parameters().frozen(name));
    CHECK(a.logit_scale() == std::exp(2.0));
}

TEST_CASE("config validation") {
    BackboneConfig c;
    CHECK_NOTHROW(c.validate());
    const std::vector<int> defaults{5, 8};
    CHECK_NOTHROW(c.validate_fusion_layers(defaults));
    c.image_depth = 4;
    CHECK_THROWS_AS(c.validate_fusion_layers(defaults), Error);
    c = {};
    c.patch_size = 5;
    CHECK_THROWS_AS(c.validate(), Error);
    c = {};
    c.heads = 5;
    CHECK_THROWS_AS(c.validate(), Error);
    c = {};
    c.embed_dim = 0;
    CHECK_THROWS_AS(FrozenBackbone{c}, Error);
    c = {};
    const std::vector<int> negative{-1};
    CHECK_THROWS_AS(c.validate_fusion_layers(negative), Error);
}

TEST_CASE("image encoder matches a loop-level transformer") {
    for (std::uint64_t seed : {1u, 2u}) {
        const BackboneConfig c = small_config(seed);
        const FrozenBackbone b(c);
        Rng rng(seed + 100);
        const Tensor x = image(rng, c);

        const auto plain = oracle_image(b, x, {});
        const Tensor got = b.image_embedding(x);
        for (std::size_t i = 0; i < plain.size(); ++i) CHECK(std::abs(got[i] - plain[i]) <= 1e-10);

        std::vector<Tensor> prompts;
        for (int l = 0; l < c.image_depth; ++l) prompts.push_back(random_tensor(rng, 2, 16, 0.5));
        Tape tape;
        const ImageEncoding enc = b.encode_image(tape, x, as_vars(tape, prompts));
        const auto prompted = oracle_image(b, x, prompts);
        for (std::size_t i = 0; i < prompted.size(); ++i) CHECK(std::abs(enc.pooled.value()[i] - prompted[i]) <= 1e-10);
        CHECK(enc.tokens.rows() == static_cast<std::size_t>(c.num_patches() + 1 + 2));
    }
}

TEST_CASE("text encoder matches a loop-level transformer") {
    const FrozenBackbone b(small_config(5));
    Rng rng(6);
    const std::vector<int> ids{3, 7, 11};
    const auto plain = oracle_text(b, nullptr, ids);
    const Tensor got = b.text_embedding(ids);
    for (std::size_t i = 0; i < plain.size(); ++i) CHECK(std::abs(got[i] - plain[i]) <= 1e-10);

    const Tensor context = random_tensor(rng, 2, 12, 0.3);
    Tape tape;
    const Var e = b.encode_text(tape, tape.constant(context), ids);
    const auto with_context = oracle_text(b, &context, ids);
    for (std::size_t i = 0; i < with_context.size(); ++i) CHECK(std::abs(e.value()[i] - with_context[i]) <= 1e-10);

    // context only
    const Var only = b.encode_text(tape, tape.constant(context), std::span<const int>{});
    const auto oracle_only = oracle_text(b, &context, {});
    for (std::size_t i = 0; i < oracle_only.size(); ++i) CHECK(std::abs(only.value()[i] - oracle_only[i]) <= 1e-10);
}

TEST_CASE("no prompts and no hook is the promptless encoding bit for bit") {
    const BackboneConfig c = small_config(7);
    const FrozenBackbone b(c);
    Rng rng(8);
    const Tensor x = image(rng, c);
    Tape tape;
    const ImageEncoding enc = b.encode_image(tape, x, {}, nullptr);
    CHECK(enc.pooled.value() == b.image_embedding(x));
    CHECK(enc.tokens.rows() == static_cast<std::size_t>(c.num_patches() + 1));
}

TEST_CASE("identity hook changes nothing") {
    const BackboneConfig c = small_config(9);
    const FrozenBackbone b(c);
    Rng rng(10);
    const Tensor x = image(rng, c);
    std::vector<Tensor> prompts;
    for (int l = 0; l < c.image_depth; ++l) prompts.push_back(random_tensor(rng, 3, 16, 0.5));
    Tape tape;
    std::vector<int> seen;
    FusionHook hook{{0, 2}, [&](int layer, Var p) {
                        seen.push_back(layer);
                        return p;
                    }};
    const ImageEncoding with_hook = b.encode_image(tape, x, as_vars(tape, prompts), &hook);
    const ImageEncoding without = b.encode_image(tape, x, as_vars(tape, prompts));
    CHECK(with_hook.pooled.value() == without.pooled.value());
    CHECK(seen == std::vector<int>{0, 2});

    FusionHook bad{{1}, [&](int, Var p) { return slice_rows(p, 0, 1); }};
    CHECK_THROWS_AS(b.encode_image(tape, x, as_vars(tape, prompts), &bad), Error);
}

TEST_CASE("prompt shape errors") {
    const BackboneConfig c = small_config(11);
    const FrozenBackbone b(c);
    Rng rng(12);
    const Tensor x = image(rng, c);
    Tape tape;
    std::vector<Tensor> wrong_width(static_cast<std::size_t>(c.image_depth), Tensor::matrix(2, 15));
    CHECK_THROWS_AS(b.encode_image(tape, x, as_vars(tape, wrong_width)), Error);
    std::vector<Tensor> too_few(2, Tensor::matrix(2, 16));
    CHECK_THROWS_AS(b.encode_image(tape, x, as_vars(tape, too_few)), Error);
    std::vector<Tensor> ragged(static_cast<std::size_t>(c.image_depth), Tensor::matrix(2, 16));
    ragged[1] = Tensor::matrix(3, 16);
    CHECK_THROWS_AS(b.encode_image(tape, x, as_vars(tape, ragged)), Error);
    CHECK_THROWS_AS(b.image_embedding(Tensor::matrix(1, 63)), Error);
}

TEST_CASE("text encoder errors and determinism") {
    const BackboneConfig c = small_config(13);
    const FrozenBackbone b(c);
    Tape tape;
    CHECK_THROWS_AS(b.encode_text(tape, Var{}, std::span<const int>{}), Error);
    const std::vector<int> long_ids(9, 1);
    CHECK_THROWS_AS(b.text_embedding(long_ids), Error);
    const std::vector<int> ids{1, 2, 3, 4, 5, 6};
    CHECK_THROWS_AS(b.encode_text(tape, tape.constant(Tensor::matrix(3, 12)), ids), Error);
    CHECK_THROWS_AS(b.encode_text(tape, tape.constant(Tensor::matrix(2, 11)), std::vector<int>{1}), Error);
    CHECK_THROWS_AS(b.text_embedding(std::vector<int>{20}), Error);
    CHECK(b.text_embedding(ids) == b.text_embedding(ids));
}

TEST_CASE("embeddings are unit norm") {
    const BackboneConfig c = small_config(14);
    const FrozenBackbone b(c);
    Rng rng(15);
    for (int trial = 0; trial < 50; ++trial) {
        const Tensor e = b.image_embedding(random_tensor(rng, 1, 64, 3.0));
        CHECK(std::abs(kernels::norm2(e.values()) - 1.0) <= 1e-12);
        std::vector<int> ids;
        const auto n = 1 + rng.below(4);
        for (std::uint64_t i = 0; i < n; ++i) ids.push_back(static_cast<int>(rng.below(20)));
        Tape tape;
        const Var t = b.encode_text(tape, tape.constant(random_tensor(rng, 2, 12, 0.5)), ids);
        CHECK(std::abs(kernels::norm2(t.value().values()) - 1.0) <= 1e-12);
    }
}

TEST_CASE("token helpers") {
    const FrozenBackbone b(small_config(16));
    const std::vector<int> ids{4, 9};
    const Tensor rows = b.token_rows(ids);
    const Tensor& table = b.parameters().at("text.token_embedding");
    for (std::size_t c = 0; c < 12; ++c) {
        CHECK(rows(0, c) == table(4, c));
        CHECK(rows(1, c) == table(9, c));
    }
    const Tensor mean = b.mean_token_embedding(ids);
    for (std::size_t c = 0; c < 12; ++c) CHECK(mean(0, c) == doctest::Approx((table(4, c) + table(9, c)) / 2));
    CHECK_THROWS_AS(b.mean_token_embedding(std::vector<int>{}), Error);
}
