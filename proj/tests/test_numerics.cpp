#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "sonogen/nn.hpp"
#include "sonogen/tensor.hpp"
#include "testutil.hpp"

using namespace sonogen;
using testutil::fd_check;
using testutil::random_tensor;

TEST_CASE("matmul identity and hand-checked product") {
    Tensor id = Tensor::from({2, 2}, {1, 0, 0, 1});
    Tensor m = Tensor::from({2, 2}, {3, -1, 2, 5});
    Tensor out = matmul(id, m);
    for (std::size_t i = 0; i < 4; ++i) CHECK(out.values()[i] == m.values()[i]);

    Tensor a = Tensor::from({2, 2}, {1, 2, 3, 4});
    Tensor b = Tensor::from({2, 1}, {1, 1});
    Tensor c = matmul(a, b);
    CHECK(c.values()[0] == doctest::Approx(3));
    CHECK(c.values()[1] == doctest::Approx(7));
}

TEST_CASE("matmul shape mismatch names both shapes") {
    Tensor a = Tensor::zeros({2, 3});
    Tensor b = Tensor::zeros({4, 2});
    CHECK_THROWS_WITH_AS(matmul(a, b), doctest::Contains("[2x3]"), ShapeError);
}

TEST_CASE("matmul gradients match finite differences over 3 seeds") {
    for (std::uint64_t seed : {1u, 2u, 3u}) {
        Rng rng(seed);
        auto a = random_tensor({3, 4}, rng);
        auto b = random_tensor({4, 2}, rng);
        auto res = fd_check([](const std::vector<Tensor>& in) { return sum(mul(matmul(in[0], in[1]), matmul(in[0], in[1]))); },
                            {a, b});
        CHECK_MESSAGE(res.ok, res.detail);
    }
}

TEST_CASE("softmax uniform logits and shift invariance") {
    Tensor x = Tensor::from({1, 3}, {0, 0, 0});
    Tensor y = softmax_rows(x);
    for (float v : y.values()) CHECK(v == doctest::Approx(1.0f / 3.0f).epsilon(1e-6));

    Rng rng(7);
    for (int trial = 0; trial < 5; ++trial) {
        Tensor a = random_tensor({2, 5}, rng, -2, 2, false);
        const float c = rng.uniform(-3, 3);
        Tensor ya = softmax_rows(a);
        Tensor yb = softmax_rows(add_scalar(a, c));
        for (std::size_t i = 0; i < ya.size(); ++i)
            CHECK(std::fabs(ya.values()[i] - yb.values()[i]) < 1e-6f);
        // rows sum to 1
        for (int r = 0; r < 2; ++r) {
            float s = 0;
            for (int j = 0; j < 5; ++j) s += ya.values()[r * 5 + j];
            CHECK(std::fabs(s - 1.0f) < 1e-6f);
        }
    }
}

TEST_CASE("softmax [1,2,3] matches scalar brute force") {
    // independent oracle: direct exp/sum in double
    const double e1 = std::exp(1.0), e2 = std::exp(2.0), e3 = std::exp(3.0);
    const double z = e1 + e2 + e3;
    Tensor y = softmax_rows(Tensor::from({1, 3}, {1, 2, 3}));
    CHECK(y.values()[0] == doctest::Approx(e1 / z).epsilon(1e-5));
    CHECK(y.values()[1] == doctest::Approx(e2 / z).epsilon(1e-5));
    CHECK(y.values()[2] == doctest::Approx(e3 / z).epsilon(1e-5));
}

TEST_CASE("softmax gradient vs finite differences") {
    for (std::uint64_t seed : {11u, 12u, 13u}) {
        Rng rng(seed);
        auto x = random_tensor({2, 4}, rng);
        auto w = random_tensor({2, 4}, rng, -1, 1, false);  // fixed projection for a scalar loss
        auto res = fd_check(
            [&](const std::vector<Tensor>& in) { return sum(mul(softmax_rows(in[0]), w)); }, {x});
        CHECK_MESSAGE(res.ok, res.detail);
    }
}

TEST_CASE("layer_norm constant row is zeroed by eps") {
    Tensor x = Tensor::filled({1, 8}, 3.5f);
    Tensor gamma = Tensor::filled({1, 8}, 1.0f);
    Tensor beta = Tensor::zeros({1, 8});
    Tensor y = layer_norm(x, gamma, beta);
    for (float v : y.values()) CHECK(std::fabs(v) < 1e-6f);
}

TEST_CASE("layer_norm rows have zero mean unit variance") {
    Rng rng(21);
    Tensor x = random_tensor({4, 16}, rng, -2, 2, false);
    Tensor gamma = Tensor::filled({1, 16}, 1.0f);
    Tensor beta = Tensor::zeros({1, 16});
    Tensor y = layer_norm(x, gamma, beta);
    for (int i = 0; i < 4; ++i) {
        double mean = 0, var = 0;
        for (int j = 0; j < 16; ++j) mean += y.values()[i * 16 + j];
        mean /= 16;
        for (int j = 0; j < 16; ++j) {
            const double d = y.values()[i * 16 + j] - mean;
            var += d * d;
        }
        var /= 16;
        CHECK(std::fabs(mean) < 1e-5);
        CHECK(std::fabs(var - 1.0) < 1e-4);
    }
}

TEST_CASE("layer_norm gradient vs finite differences (x, gamma, beta)") {
    for (std::uint64_t seed : {31u, 32u, 33u}) {
        Rng rng(seed);
        auto x = random_tensor({4, 8}, rng);
        auto gamma = random_tensor({1, 8}, rng, 0.5f, 1.5f);
        auto beta = random_tensor({1, 8}, rng);
        auto w = random_tensor({4, 8}, rng, -1, 1, false);
        auto res = fd_check(
            [&](const std::vector<Tensor>& in) {
                return sum(mul(layer_norm(in[0], in[1], in[2]), w));
            },
            {x, gamma, beta});
        CHECK_MESSAGE(res.ok, res.detail);
    }
}

TEST_CASE("multi_head_attention degenerate single position") {
    Rng rng(41);
    ParamStore store;
    MultiHeadAttention mha(store, "mha", 8, 2, rng);
    Tensor x = random_tensor({1, 8}, rng, -1, 1, false);
    // With one position the attention weight is exactly 1, so the output is
    // the value projection passed through the output projection.
    Tensor expected = mha.wo(mha.wv(x));
    Tensor got = mha(x);
    for (std::size_t i = 0; i < got.size(); ++i)
        CHECK(got.values()[i] == doctest::Approx(expected.values()[i]).epsilon(1e-6));
}

TEST_CASE("attention rows sum to 1") {
    Rng rng(42);
    ParamStore store;
    MultiHeadAttention mha(store, "mha", 8, 2, rng);
    Tensor x = random_tensor({5, 8}, rng, -1, 1, false);
    for (const auto& map : mha.attention_maps(x)) {
        for (int i = 0; i < 5; ++i) {
            float s = 0;
            for (int j = 0; j < 5; ++j) s += map.values()[i * 5 + j];
            CHECK(std::fabs(s - 1.0f) < 1e-6f);
        }
    }
}

// Naive unbatched per-head attention, written directly from the definition.
static std::vector<float> naive_attention(const std::vector<float>& x, int n, int c, int heads,
                                          MultiHeadAttention& mha) {
    auto apply_linear = [&](const Linear& lin, const std::vector<float>& in) {
        std::vector<float> out(static_cast<std::size_t>(n) * c, 0.0f);
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < c; ++j) {
                double acc = lin.bias.values()[j];
                for (int k = 0; k < c; ++k) acc += in[i * c + k] * lin.weight.values()[k * c + j];
                out[i * c + j] = static_cast<float>(acc);
            }
        return out;
    };
    auto q = apply_linear(mha.wq, x), k = apply_linear(mha.wk, x), v = apply_linear(mha.wv, x);
    const int hd = c / heads;
    std::vector<float> concat(static_cast<std::size_t>(n) * c, 0.0f);
    for (int h = 0; h < heads; ++h) {
        for (int i = 0; i < n; ++i) {
            std::vector<double> scores(n, 0.0);
            for (int j = 0; j < n; ++j) {
                double s = 0;
                for (int d = 0; d < hd; ++d) s += q[i * c + h * hd + d] * k[j * c + h * hd + d];
                scores[j] = s / std::sqrt(static_cast<double>(hd));
            }
            double m = scores[0];
            for (double s : scores) m = std::max(m, s);
            double z = 0;
            for (double& s : scores) {
                s = std::exp(s - m);
                z += s;
            }
            for (double& s : scores) s /= z;
            for (int d = 0; d < hd; ++d) {
                double acc = 0;
                for (int j = 0; j < n; ++j) acc += scores[j] * v[j * c + h * hd + d];
                concat[i * c + h * hd + d] = static_cast<float>(acc);
            }
        }
    }
    return apply_linear(mha.wo, concat);
}

TEST_CASE("multi_head_attention matches naive per-head loop oracle") {
    Rng rng(43);
    ParamStore store;
    MultiHeadAttention mha(store, "mha", 8, 2, rng);
    Tensor x = random_tensor({3, 8}, rng, -1, 1, false);
    auto expected = naive_attention(x.values(), 3, 8, 2, mha);
    Tensor got = mha(x);
    for (std::size_t i = 0; i < got.size(); ++i)
        CHECK(std::fabs(got.values()[i] - expected[i]) < 1e-5f);
}

TEST_CASE("multi_head_attention rejects indivisible head count") {
    Rng rng(44);
    ParamStore store;
    CHECK_THROWS_AS(MultiHeadAttention(store, "mha", 10, 3, rng), ConfigError);
}

TEST_CASE("ffn zero weights and relu cutoff") {
    Rng rng(51);
    ParamStore store;
    FeedForward ffn(store, "ffn", 4, 16, rng);
    Tensor x = random_tensor({2, 4}, rng, -1, 1, false);

    // zero first layer -> output is exactly the second layer bias
    std::fill(ffn.fc1.weight.values().begin(), ffn.fc1.weight.values().end(), 0.0f);
    std::fill(ffn.fc1.bias.values().begin(), ffn.fc1.bias.values().end(), 0.0f);
    Tensor y = ffn(x);
    for (int i = 0; i < 2; ++i)
        for (int j = 0; j < 4; ++j)
            CHECK(y.values()[i * 4 + j] == doctest::Approx(ffn.fc2.bias.values()[j]));

    // all-negative pre-activations behave identically to zero input
    std::fill(ffn.fc1.bias.values().begin(), ffn.fc1.bias.values().end(), -5.0f);
    Tensor y2 = ffn(x);
    for (int i = 0; i < 2; ++i)
        for (int j = 0; j < 4; ++j)
            CHECK(y2.values()[i * 4 + j] == doctest::Approx(ffn.fc2.bias.values()[j]));
}

TEST_CASE("ffn gradient vs finite differences") {
    for (std::uint64_t seed : {61u, 62u, 63u}) {
        Rng rng(seed);
        ParamStore store;
        FeedForward ffn(store, "ffn", 4, 8, rng);
        auto x = random_tensor({3, 4}, rng);
        auto res = fd_check([&](const std::vector<Tensor>& in) { return sum(mul(ffn(in[0]), ffn(in[0]))); }, {x});
        CHECK_MESSAGE(res.ok, res.detail);
    }
}

TEST_CASE("backward basics") {
    Tensor x = Tensor::from({1, 3}, {1, 2, 3}, true);
    backward(sum(x));
    for (float g : x.grad()) CHECK(g == doctest::Approx(1.0f));

    Tensor y = Tensor::from({1, 2}, {1, 2}, true);
    backward(sum(mul(y, y)));
    CHECK(y.grad()[0] == doctest::Approx(2.0f));
    CHECK(y.grad()[1] == doctest::Approx(4.0f));
}

TEST_CASE("backward rejects non-scalar loss") {
    Tensor x = Tensor::from({1, 2}, {1, 2}, true);
    CHECK_THROWS_AS(backward(mul(x, x)), ContractError);
}

TEST_CASE("backward on composite MHA+FFN+layer_norm graph vs finite differences") {
    for (std::uint64_t seed : {71u, 72u, 73u}) {
        Rng rng(seed);
        ParamStore store;
        TransformerBlock block(store, "blk", 8, 2, 16, rng);
        auto x = random_tensor({4, 8}, rng);
        auto w = random_tensor({4, 8}, rng, -1, 1, false);
        auto res = fd_check([&](const std::vector<Tensor>& in) { return sum(mul(block(in[0]), w)); }, {x});
        CHECK_MESSAGE(res.ok, res.detail);
    }
}

TEST_CASE("gradient accumulation doubles exactly without zeroing") {
    Rng rng(81);
    Tensor x = random_tensor({2, 3}, rng);
    x.zero_grad();
    Tensor loss = sum(mul(x, x));
    backward(loss);
    std::vector<float> once = x.grad();
    backward(loss);
    for (std::size_t i = 0; i < once.size(); ++i) CHECK(x.grad()[i] == 2.0f * once[i]);
}

TEST_CASE("adam: zero gradient leaves parameters unchanged") {
    Rng rng(91);
    ParamStore store;
    Tensor p = store.add("p", Tensor::uniform({2, 2}, rng, -1, 1));
    std::vector<float> before = p.values();
    p.zero_grad();
    Adam opt;
    opt.step(store);
    for (std::size_t i = 0; i < before.size(); ++i) CHECK(p.values()[i] == before[i]);
}

TEST_CASE("adam: first step with constant gradient moves by about -lr*sign(g)") {
    ParamStore store;
    Tensor p = store.add("p", Tensor::from({1, 3}, {0.5f, -0.25f, 1.0f}));
    std::vector<float> before = p.values();
    p.zero_grad();
    auto& g = p.grad();
    g = {0.3f, -0.7f, 0.01f};
    Adam opt;  // lr 1e-3
    opt.step(store);
    for (std::size_t i = 0; i < 3; ++i) {
        const float delta = p.values()[i] - before[i];
        const float expected = -1e-3f * (g[i] > 0 ? 1.0f : -1.0f);
        CHECK(delta == doctest::Approx(expected).epsilon(0.01));
    }
}

TEST_CASE("adam: 10 steps on x^2 strictly decreases f") {
    ParamStore store;
    Tensor x = store.add("x", Tensor::from({1}, {1.0f}));
    Adam opt(AdamConfig{.lr = 0.05f});
    float prev = 1.0f;
    for (int i = 0; i < 10; ++i) {
        x.zero_grad();
        Tensor loss = mul(x, x);
        backward(loss);
        opt.step(store);
        const float f = x.values()[0] * x.values()[0];
        CHECK(f < prev);
        prev = f;
    }
}

TEST_CASE("determinism: identical seed gives bit-identical block output") {
    auto run = [] {
        Rng rng(123);
        ParamStore store;
        TransformerBlock block(store, "blk", 8, 2, 16, rng);
        Tensor x = Tensor::uniform({4, 8}, rng, -1, 1);
        return block(x).values();
    };
    auto a = run();
    auto b = run();
    CHECK(a == b);
}

TEST_CASE("structural op gradients (slice/concat/unfold/patchify) vs finite differences") {
    Rng rng(101);
    auto x = random_tensor({4, 6}, rng);
    auto res = fd_check(
        [](const std::vector<Tensor>& in) {
            Tensor s = slice_cols(in[0], 1, 3);
            Tensor cat = concat_cols({s, s});
            return sum(mul(cat, cat));
        },
        {x});
    CHECK_MESSAGE(res.ok, res.detail);

    auto t = random_tensor({8, 3}, rng);
    auto res2 = fd_check(
        [](const std::vector<Tensor>& in) {
            Tensor u = unfold1d(in[0], 4, 2);
            return sum(mul(u, u));
        },
        {t});
    CHECK_MESSAGE(res2.ok, res2.detail);

    auto img = random_tensor({16, 2}, rng);  // 4x4, 2 channels
    auto res3 = fd_check(
        [](const std::vector<Tensor>& in) {
            Tensor p = patchify(in[0], 4, 4, 2);
            return sum(mul(p, p));
        },
        {img});
    CHECK_MESSAGE(res3.ok, res3.detail);

    auto res4 = fd_check(
        [](const std::vector<Tensor>& in) {
            Tensor u = unfold2d(in[0], 4, 4, 3, 1);
            return sum(mul(u, u));
        },
        {img});
    CHECK_MESSAGE(res4.ok, res4.detail);

    auto res5 = fd_check(
        [](const std::vector<Tensor>& in) {
            Tensor u = zero_upsample2x(in[0], 4, 4);
            return sum(mul(u, u));
        },
        {img});
    CHECK_MESSAGE(res5.ok, res5.detail);

    auto res6 = fd_check(
        [](const std::vector<Tensor>& in) {
            Tensor u = repeat_upsample2x(in[0], 4, 4);
            return sum(mul(u, u));
        },
        {img});
    CHECK_MESSAGE(res6.ok, res6.detail);

    // nearest-neighbour upsample copies each pixel into its 2x2 block
    Tensor up = repeat_upsample2x(img, 4, 4);
    for (int y = 0; y < 8; ++y)
        for (int x2 = 0; x2 < 8; ++x2)
            for (int c = 0; c < 2; ++c)
                CHECK(up.values()[(y * 8 + x2) * 2 + c] ==
                      img.values()[((y / 2) * 4 + x2 / 2) * 2 + c]);
}

TEST_CASE("misc op gradients (normalize/div/gather/ce) vs finite differences") {
    Rng rng(111);
    auto x = random_tensor({3, 5}, rng);
    auto res = fd_check(
        [](const std::vector<Tensor>& in) { return sum(mul(l2_normalize_rows(in[0]), in[0])); }, {x});
    CHECK_MESSAGE(res.ok, res.detail);

    auto table = random_tensor({4, 3}, rng);
    auto res2 = fd_check(
        [](const std::vector<Tensor>& in) {
            Tensor g = gather_rows(in[0], {2, 0, 2});
            return sum(mul(g, g));
        },
        {table});
    CHECK_MESSAGE(res2.ok, res2.detail);

    auto logits = random_tensor({3, 4}, rng);
    auto res3 = fd_check(
        [](const std::vector<Tensor>& in) { return cross_entropy_rows(in[0], {1, 3, 0}); }, {logits});
    CHECK_MESSAGE(res3.ok, res3.detail);

    auto lse_in = random_tensor({1, 6}, rng);
    auto res4 = fd_check([](const std::vector<Tensor>& in) { return logsumexp_all(in[0]); }, {lse_in});
    CHECK_MESSAGE(res4.ok, res4.detail);

    auto s = random_tensor({2, 3}, rng, 0.5f, 2.0f);
    auto res5 = fd_check(
        [](const std::vector<Tensor>& in) { return sum(sqrt_of(log_of(exp_of(in[0])))); }, {s});
    CHECK_MESSAGE(res5.ok, res5.detail);

    auto sg = random_tensor({2, 4}, rng);
    auto res6 = fd_check([](const std::vector<Tensor>& in) { return sum(sigmoid(in[0])); }, {sg});
    CHECK_MESSAGE(res6.ok, res6.detail);
}
