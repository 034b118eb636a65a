#include <catch2/catch_amalgamated.hpp>

#include <cstring>
#include <vector>

#include "coarseem/gradcheck.hpp"
#include "coarseem/ops.hpp"
#include "coarseem/rng.hpp"
#include "coarseem/tensor.hpp"

using namespace coarseem;

namespace {

Tensor random_tensor(Shape shape, SplitMix64& rng, double lo = -1.0, double hi = 1.0,
                     bool requires_grad = true) {
    Tensor t(std::move(shape), 0.0, requires_grad);
    for (auto& v : t.values()) v = rng.uniform(lo, hi);
    return t;
}

// Direct zero-padded cross-correlation, nested loops only. Kept independent
// of the conv2d implementation on purpose.
std::vector<double> conv_oracle(const std::vector<double>& in, std::int64_t N, std::int64_t Cin,
                                std::int64_t H, std::int64_t W, const std::vector<double>& ker,
                                std::int64_t Cout, std::int64_t kh, std::int64_t kw,
                                const std::vector<double>& bias, int stride, int pad) {
    const std::int64_t outH = (H + 2 * pad - kh) / stride + 1;
    const std::int64_t outW = (W + 2 * pad - kw) / stride + 1;
    std::vector<double> out(static_cast<std::size_t>(N * Cout * outH * outW), 0.0);
    for (std::int64_t n = 0; n < N; ++n)
        for (std::int64_t oc = 0; oc < Cout; ++oc)
            for (std::int64_t oh = 0; oh < outH; ++oh)
                for (std::int64_t ow = 0; ow < outW; ++ow) {
                    double acc = bias[static_cast<std::size_t>(oc)];
                    for (std::int64_t ic = 0; ic < Cin; ++ic)
                        for (std::int64_t r = 0; r < kh; ++r)
                            for (std::int64_t c = 0; c < kw; ++c) {
                                const std::int64_t ih = oh * stride + r - pad;
                                const std::int64_t iw = ow * stride + c - pad;
                                if (ih < 0 || ih >= H || iw < 0 || iw >= W) continue;
                                acc += in[static_cast<std::size_t>(((n * Cin + ic) * H + ih) * W +
                                                                   iw)] *
                                       ker[static_cast<std::size_t>(((oc * Cin + ic) * kh + r) * kw +
                                                                    c)];
                            }
                    out[static_cast<std::size_t>(((n * Cout + oc) * outH + oh) * outW + ow)] = acc;
                }
    return out;
}

}  // namespace

TEST_CASE("finite_diff_check validates itself on closed forms") {
    SECTION("sum of squares") {
        Tensor x = Tensor::from_data({2}, {1.0, 2.0}, true);
        auto res = finite_diff_check(
            [](const std::vector<Tensor>& in) { return reduce_sum(mul(in[0], in[0])); }, {x});
        REQUIRE(res.checked == 2);
        REQUIRE(res.max_rel_err < 1e-8);
        // Analytic gradient is 2x.
        Tape tape;
        Tensor y = reduce_sum(mul(x, x));
        tape.backward(y);
        REQUIRE(x.grad()[0] == Catch::Approx(2.0).margin(1e-14));
        REQUIRE(x.grad()[1] == Catch::Approx(4.0).margin(1e-14));
    }
    SECTION("sum of abs away from the kink") {
        Tensor x = Tensor::from_data({3}, {-2.0, 0.5, 3.0}, true);
        auto res = finite_diff_check(
            [](const std::vector<Tensor>& in) { return reduce_sum(abs(in[0])); }, {x});
        REQUIRE(res.max_rel_err < 1e-8);
        REQUIRE(res.skipped == 0);
    }
    SECTION("kink coordinates are skipped") {
        Tensor x = Tensor::from_data({3}, {-2.0, 0.0, 3.0}, true);
        auto res = finite_diff_check(
            [](const std::vector<Tensor>& in) { return reduce_sum(abs(in[0])); }, {x});
        REQUIRE(res.skipped == 1);
        REQUIRE(res.checked == 2);
        REQUIRE(res.max_rel_err < 1e-8);
    }
}

TEST_CASE("elementwise forward values") {
    Tensor a = Tensor::from_data({2}, {1.0, 2.0});
    Tensor b = Tensor::from_data({2}, {3.0, 4.0});
    Tensor s = add(a, b);
    REQUIRE(s.values() == std::vector<double>{4.0, 6.0});

    Tensor x = Tensor::from_data({3}, {-2.0, 0.0, 3.0}, true);
    Tensor ax = abs(x);
    REQUIRE(ax.values() == std::vector<double>{2.0, 0.0, 3.0});

    SECTION("abs subgradient is 0 at 0") {
        Tape tape;
        Tensor loss = reduce_sum(abs(x));
        tape.backward(loss);
        REQUIRE(x.grad() == std::vector<double>{-1.0, 0.0, 1.0});
    }
    SECTION("shape mismatch throws") {
        Tensor c = Tensor::from_data({3}, {1.0, 2.0, 3.0});
        REQUIRE_THROWS_AS(add(a, c), std::invalid_argument);
    }
    SECTION("log of non-positive input throws") {
        Tensor z = Tensor::from_data({2}, {1.0, 0.0});
        REQUIRE_THROWS_AS(log(z), std::invalid_argument);
    }
}

TEST_CASE("elementwise gradients vs finite differences") {
    SplitMix64 rng(11);
    SECTION("exp, rel err < 1e-6") {
        Tensor x = random_tensor({7}, rng);
        auto res = finite_diff_check(
            [](const std::vector<Tensor>& in) { return reduce_sum(exp(in[0])); }, {x});
        REQUIRE(res.max_rel_err < 1e-6);
    }
    SECTION("all differentiable kinds, 10 random trials each") {
        for (int trial = 0; trial < 10; ++trial) {
            Tensor x = random_tensor({2, 3}, rng, 0.1, 2.0);  // positive: valid for log
            Tensor y = random_tensor({2, 3}, rng, 0.1, 2.0);
            auto check = [&](std::function<Tensor(const std::vector<Tensor>&)> f) {
                auto res = finite_diff_check(f, {x, y});
                REQUIRE(res.max_rel_err < 1e-4);
            };
            check([](const std::vector<Tensor>& in) { return reduce_sum(add(in[0], in[1])); });
            check([](const std::vector<Tensor>& in) { return reduce_sum(sub(in[0], in[1])); });
            check([](const std::vector<Tensor>& in) { return reduce_sum(mul(in[0], in[1])); });
            check([](const std::vector<Tensor>& in) { return reduce_sum(scale(in[0], -1.7)); });
            check([](const std::vector<Tensor>& in) { return reduce_sum(relu(sub(in[0], 1.0))); });
            check([](const std::vector<Tensor>& in) { return reduce_sum(exp(in[0])); });
            check([](const std::vector<Tensor>& in) { return reduce_sum(log(in[0])); });
            check([](const std::vector<Tensor>& in) { return reduce_sum(abs(sub(in[0], in[1]))); });
            check([](const std::vector<Tensor>& in) { return reduce_sum(sigmoid(in[0])); });
            check([](const std::vector<Tensor>& in) { return reduce_mean(sub(1.0, in[0])); });
        }
    }
}

TEST_CASE("matmul") {
    SECTION("identity times B is B") {
        Tensor eye = Tensor::from_data({2, 2}, {1.0, 0.0, 0.0, 1.0});
        Tensor b = Tensor::from_data({2, 3}, {1, 2, 3, 4, 5, 6});
        REQUIRE(matmul(eye, b).values() == b.values());
    }
    SECTION("small product") {
        Tensor a = Tensor::from_data({2, 2}, {1, 2, 3, 4});
        Tensor b = Tensor::from_data({2, 1}, {1, 1});
        REQUIRE(matmul(a, b).values() == std::vector<double>{3.0, 7.0});
    }
    SECTION("dimension mismatch throws") {
        Tensor a = Tensor::from_data({2, 3}, {1, 2, 3, 4, 5, 6});
        Tensor b = Tensor::from_data({2, 2}, {1, 2, 3, 4});
        REQUIRE_THROWS_AS(matmul(a, b), std::invalid_argument);
    }
    SECTION("gradient vs finite differences on random 3x4 * 4x2") {
        SplitMix64 rng(21);
        Tensor a = random_tensor({3, 4}, rng);
        Tensor b = random_tensor({4, 2}, rng);
        auto res = finite_diff_check(
            [](const std::vector<Tensor>& in) { return reduce_sum(matmul(in[0], in[1])); },
            {a, b});
        REQUIRE(res.max_rel_err < 1e-6);
    }
}

TEST_CASE("conv2d forward against direct-summation oracle") {
    SplitMix64 rng(31);
    SECTION("1x1 identity-like kernel") {
        Tensor in = random_tensor({1, 1, 4, 4}, rng, 0.0, 1.0, false);
        Tensor k = Tensor::from_data({1, 1, 1, 1}, {1.0});
        Tensor b = Tensor::from_data({1}, {0.0});
        Tensor out = conv2d(in, k, b, 1, 0);
        REQUIRE(out.values() == in.values());
    }
    SECTION("1x1 kernel of ones sums channels") {
        Tensor in = random_tensor({1, 3, 2, 2}, rng, 0.0, 1.0, false);
        Tensor k = Tensor(Shape{1, 3, 1, 1}, 1.0);
        Tensor b = Tensor::from_data({1}, {0.0});
        Tensor out = conv2d(in, k, b, 1, 0);
        for (std::int64_t p = 0; p < 4; ++p) {
            double want = in.values()[p] + in.values()[4 + p] + in.values()[8 + p];
            REQUIRE(out.values()[p] == Catch::Approx(want).margin(1e-15));
        }
    }
    SECTION("all-zero kernel with bias c gives constant c") {
        Tensor in = random_tensor({2, 2, 4, 4}, rng, 0.0, 1.0, false);
        Tensor k = Tensor(Shape{3, 2, 3, 3}, 0.0);
        Tensor b = Tensor(Shape{3}, 2.5);
        Tensor out = conv2d(in, k, b, 1, 1);
        for (double v : out.values()) REQUIRE(v == 2.5);
    }
    SECTION("random case vs 6-nested-loop oracle, pad 0 and pad 1") {
        for (int pad = 0; pad <= 1; ++pad) {
            Tensor in = random_tensor({1, 2, 5, 5}, rng);
            Tensor k = random_tensor({3, 2, 3, 3}, rng);
            Tensor b = random_tensor({3}, rng);
            Tensor out = conv2d(in, k, b, 1, pad);
            auto want = conv_oracle(in.values(), 1, 2, 5, 5, k.values(), 3, 3, 3, b.values(), 1,
                                    pad);
            REQUIRE(out.values().size() == want.size());
            for (std::size_t i = 0; i < want.size(); ++i)
                REQUIRE(out.values()[i] == Catch::Approx(want[i]).margin(1e-12));
        }
    }
    SECTION("strided 4x4 kernel vs oracle") {
        Tensor in = random_tensor({2, 3, 8, 8}, rng);
        Tensor k = random_tensor({4, 3, 4, 4}, rng);
        Tensor b = random_tensor({4}, rng);
        Tensor out = conv2d(in, k, b, 2, 1);
        REQUIRE(out.shape() == Shape{2, 4, 4, 4});
        auto want = conv_oracle(in.values(), 2, 3, 8, 8, k.values(), 4, 4, 4, b.values(), 2, 1);
        for (std::size_t i = 0; i < want.size(); ++i)
            REQUIRE(out.values()[i] == Catch::Approx(want[i]).margin(1e-12));
    }
    SECTION("errors") {
        Tensor in(Shape{1, 2, 5, 5});
        Tensor k(Shape{3, 3, 3, 3});
        Tensor b(Shape{3});
        REQUIRE_THROWS_AS(conv2d(in, k, b, 1, 0), std::invalid_argument);  // channel mismatch
        Tensor k2(Shape{3, 2, 3, 3});
        REQUIRE_THROWS_AS(conv2d(in, k2, b, 2, 1), std::invalid_argument);  // non-integral size
    }
}

TEST_CASE("conv2d gradients vs finite differences") {
    SplitMix64 rng(41);
    SECTION("stride 1") {
        Tensor in = random_tensor({1, 2, 5, 5}, rng);
        Tensor k = random_tensor({3, 2, 3, 3}, rng);
        Tensor b = random_tensor({3}, rng);
        auto res = finite_diff_check(
            [](const std::vector<Tensor>& in) {
                return reduce_sum(mul(conv2d(in[0], in[1], in[2], 1, 1),
                                      conv2d(in[0], in[1], in[2], 1, 1)));
            },
            {in, k, b});
        REQUIRE(res.max_rel_err < 1e-4);
    }
    SECTION("stride 2, 4x4 kernel") {
        Tensor in = random_tensor({1, 2, 8, 8}, rng);
        Tensor k = random_tensor({3, 2, 4, 4}, rng);
        Tensor b = random_tensor({3}, rng);
        auto res = finite_diff_check(
            [](const std::vector<Tensor>& in) {
                Tensor y = conv2d(in[0], in[1], in[2], 2, 1);
                return reduce_sum(mul(y, y));
            },
            {in, k, b});
        REQUIRE(res.max_rel_err < 1e-4);
    }
}

TEST_CASE("upsample_nearest") {
    SECTION("factor 1 is identity") {
        SplitMix64 rng(51);
        Tensor in = random_tensor({1, 2, 3, 3}, rng);
        REQUIRE(upsample_nearest(in, 1).values() == in.values());
    }
    SECTION("2x2 pattern") {
        Tensor in = Tensor::from_data({1, 1, 2, 2}, {1, 2, 3, 4});
        Tensor out = upsample_nearest(in, 2);
        REQUIRE(out.values() ==
                std::vector<double>{1, 1, 2, 2, 1, 1, 2, 2, 3, 3, 4, 4, 3, 3, 4, 4});
    }
    SECTION("backward of sum is factor^2 everywhere") {
        Tensor in(Shape{1, 1, 2, 2}, 0.5, true);
        Tape tape;
        Tensor loss = reduce_sum(upsample_nearest(in, 3));
        tape.backward(loss);
        for (double g : in.grad()) REQUIRE(g == 9.0);
    }
}

TEST_CASE("softmax_channel") {
    SECTION("uniform logits give 1/C") {
        Tensor logits(Shape{1, 3, 2, 2}, 0.7);
        Tensor p = softmax_channel(logits);
        for (double v : p.values()) REQUIRE(v == Catch::Approx(1.0 / 3.0).margin(1e-15));
    }
    SECTION("channel sums are 1 within 1e-12 and shift invariant") {
        SplitMix64 rng(61);
        Tensor logits = random_tensor({2, 4, 3, 3}, rng, -5.0, 5.0, false);
        Tensor p = softmax_channel(logits);
        const std::int64_t P = 9;
        for (std::int64_t n = 0; n < 2; ++n)
            for (std::int64_t px = 0; px < P; ++px) {
                double s = 0.0;
                for (std::int64_t c = 0; c < 4; ++c) s += p.values()[(n * 4 + c) * P + px];
                REQUIRE(std::fabs(s - 1.0) < 1e-12);
            }
        Tensor shifted = add(logits, 13.25);
        Tensor p2 = softmax_channel(shifted);
        for (std::size_t i = 0; i < p.values().size(); ++i)
            REQUIRE(std::fabs(p.values()[i] - p2.values()[i]) < 1e-12);
    }
    SECTION("closed form (0, ln 2)") {
        Tensor logits = Tensor::from_data({1, 2, 1, 1}, {0.0, std::log(2.0)});
        Tensor p = softmax_channel(logits);
        REQUIRE(p.values()[0] == Catch::Approx(1.0 / 3.0).margin(1e-15));
        REQUIRE(p.values()[1] == Catch::Approx(2.0 / 3.0).margin(1e-15));
    }
    SECTION("gradients vs finite differences, softmax and log_softmax") {
        SplitMix64 rng(71);
        Tensor logits = random_tensor({1, 3, 2, 2}, rng);
        Tensor w = random_tensor({1, 3, 2, 2}, rng, 0.0, 1.0, false);
        auto res = finite_diff_check(
            [&w](const std::vector<Tensor>& in) {
                return reduce_sum(mul(w, softmax_channel(in[0])));
            },
            {logits});
        REQUIRE(res.max_rel_err < 1e-6);
        auto res2 = finite_diff_check(
            [&w](const std::vector<Tensor>& in) {
                return reduce_sum(mul(w, log_softmax_channel(in[0])));
            },
            {logits});
        REQUIRE(res2.max_rel_err < 1e-6);
    }
}

TEST_CASE("reduce") {
    Tensor t = Tensor::from_data({2, 3}, {1, 2, 3, 4, 5, 6});
    SECTION("full sum and mean") {
        REQUIRE(reduce_sum(t).item() == 21.0);
        REQUIRE(reduce_mean(t).item() == 3.5);
    }
    SECTION("axis reductions") {
        Tensor s0 = reduce_sum(t, {0});
        REQUIRE(s0.shape() == Shape{3});
        REQUIRE(s0.values() == std::vector<double>{5, 7, 9});
        Tensor m1 = reduce_mean(t, {1});
        REQUIRE(m1.shape() == Shape{2});
        REQUIRE(m1.values() == std::vector<double>{2, 5});
    }
    SECTION("axis reduction gradient") {
        SplitMix64 rng(81);
        Tensor x = random_tensor({2, 3, 2}, rng);
        auto res = finite_diff_check(
            [](const std::vector<Tensor>& in) {
                Tensor r = reduce_mean(in[0], {1});
                return reduce_sum(mul(r, r));
            },
            {x});
        REQUIRE(res.max_rel_err < 1e-6);
    }
}

TEST_CASE("concat and slice channels") {
    SplitMix64 rng(91);
    Tensor a = random_tensor({2, 2, 3, 3}, rng);
    Tensor b = random_tensor({2, 3, 3, 3}, rng);
    Tensor cat = concat_channels(a, b);
    REQUIRE(cat.shape() == Shape{2, 5, 3, 3});
    Tensor back = slice_channels(cat, 0, 2);
    REQUIRE(back.values() == a.values());
    Tensor tail = slice_channels(cat, 2, 5);
    REQUIRE(tail.values() == b.values());

    auto res = finite_diff_check(
        [](const std::vector<Tensor>& in) {
            Tensor c = concat_channels(in[0], in[1]);
            Tensor s = slice_channels(c, 1, 4);
            return reduce_sum(mul(s, s));
        },
        {a, b});
    REQUIRE(res.max_rel_err < 1e-6);
}

TEST_CASE("backward basics") {
    SECTION("loss = sum(x) gives ones") {
        Tensor x(Shape{2, 3}, 0.3, true);
        Tape tape;
        tape.backward(reduce_sum(x));
        for (double g : x.grad()) REQUIRE(g == 1.0);
    }
    SECTION("loss = sum(x*y) swaps operands") {
        Tensor x = Tensor::from_data({3}, {1, 2, 3}, true);
        Tensor y = Tensor::from_data({3}, {4, 5, 6}, true);
        Tape tape;
        tape.backward(reduce_sum(mul(x, y)));
        REQUIRE(x.grad() == y.values());
        REQUIRE(y.grad() == x.values());
    }
    SECTION("non-scalar loss throws") {
        Tensor x(Shape{2}, 1.0, true);
        Tape tape;
        Tensor y = scale(x, 2.0);
        REQUIRE_THROWS_AS(tape.backward(y), std::invalid_argument);
    }
    SECTION("double backward on the same record throws") {
        Tensor x(Shape{1}, 1.0, true);
        Tape tape;
        Tensor y = scale(x, 2.0);
        tape.backward(y);
        REQUIRE_THROWS_AS(tape.backward(y), std::logic_error);
    }
    SECTION("NoGrad suppresses recording") {
        Tensor x(Shape{2}, 1.0, true);
        Tape tape;
        {
            NoGrad ng;
            Tensor y = scale(x, 2.0);
            REQUIRE_FALSE(y.requires_grad());
        }
        REQUIRE(tape.size() == 0);
    }
}

TEST_CASE("composed conv-relu-softmax-CE graph matches finite differences") {
    SplitMix64 rng(101);
    Tensor in = random_tensor({1, 2, 4, 4}, rng, 0.0, 1.0, false);
    Tensor k1 = random_tensor({3, 2, 3, 3}, rng, -0.5, 0.5);
    Tensor b1 = random_tensor({3}, rng, -0.1, 0.1);
    Tensor k2 = random_tensor({3, 3, 1, 1}, rng, -0.5, 0.5);
    Tensor b2 = random_tensor({3}, rng, -0.1, 0.1);
    Tensor target = Tensor(Shape{1, 3, 4, 4});
    for (std::int64_t p = 0; p < 16; ++p) target.values()[(p % 3) * 16 + p] = 1.0;

    auto loss_fn = [&](const std::vector<Tensor>& params) {
        Tensor h = relu(conv2d(in, params[0], params[1], 1, 1));
        Tensor logits = conv2d(h, params[2], params[3], 1, 0);
        Tensor p = softmax_channel(logits);
        Tensor ce = scale(reduce_sum(mul(target, log(clamp_min(p, 1e-12)))), -1.0 / 16.0);
        return ce;
    };
    auto res = finite_diff_check(loss_fn, {k1, b1, k2, b2});
    REQUIRE(res.checked > 0);
    REQUIRE(res.max_rel_err < 1e-4);
}

TEST_CASE("forward results are bitwise deterministic") {
    SplitMix64 rng(111);
    Tensor in = random_tensor({2, 3, 8, 8}, rng, 0.0, 1.0, false);
    Tensor k = random_tensor({4, 3, 4, 4}, rng, -0.5, 0.5, false);
    Tensor b = random_tensor({4}, rng, -0.5, 0.5, false);
    Tensor o1 = conv2d(in, k, b, 2, 1);
    Tensor o2 = conv2d(in, k, b, 2, 1);
    REQUIRE(std::memcmp(o1.values().data(), o2.values().data(),
                        o1.values().size() * sizeof(double)) == 0);
    Tensor s1 = softmax_channel(o1);
    Tensor s2 = softmax_channel(o2);
    REQUIRE(std::memcmp(s1.values().data(), s2.values().data(),
                        s1.values().size() * sizeof(double)) == 0);
}

TEST_CASE("non-finite forward results are an error") {
    Tensor x = Tensor::from_data({1}, {1e308});
    REQUIRE_THROWS_AS(exp(x), std::runtime_error);
    Tensor y = Tensor::from_data({1}, {1e308});
    REQUIRE_THROWS_AS(mul(x, y), std::runtime_error);
}
