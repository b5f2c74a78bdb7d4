#include <gtest/gtest.h>

#include <functional>

#include "styleseg/autograd.hpp"
#include "styleseg/nn.hpp"
#include "test_util.hpp"

using namespace styleseg;

namespace {

Tensor random_tensor(std::vector<int> shape, Rng& rng, Real lo = -1, Real hi = 1) {
    Tensor t(std::move(shape));
    for (auto& v : t.data) v = rng.uniform(lo, hi);
    return t;
}

// Central-difference check of d(sum of weighted outputs)/d(inputs) for an
// arbitrary op graph. A fixed random cotangent makes the scalarization
// sensitive to every output element.
void check_gradients(std::vector<Tensor*> inputs, const std::function<ag::Var(const std::vector<ag::Var>&)>& op,
                     Real step = 1e-6, Real tol = 1e-6) {
    Rng cot_rng(5150);
    auto eval = [&](bool want_grads, std::vector<Tensor>* grads) {
        std::vector<ag::Var> vars;
        for (Tensor* t : inputs) vars.push_back(ag::Var::leaf(*t, want_grads));
        ag::Var out = op(vars);
        Rng local(5150);
        Real scalar = 0;
        Tensor cot(out.value().shape);
        for (std::size_t i = 0; i < cot.data.size(); ++i) {
            cot.data[i] = local.uniform(-1, 1);
            scalar += cot.data[i] * out.value().data[i];
        }
        if (want_grads) {
            // backward on sum(cot * out) gives the cotangent-weighted gradients
            auto weighted = ag::mul(out, ag::Var::leaf(cot));
            ag::backward(weighted);
            for (std::size_t i = 0; i < vars.size(); ++i)
                grads->push_back(vars[i].grad().data.empty() ? Tensor(inputs[i]->shape) : vars[i].grad());
        }
        return scalar;
    };

    std::vector<Tensor> analytic;
    eval(true, &analytic);

    for (std::size_t vi = 0; vi < inputs.size(); ++vi) {
        Tensor& t = *inputs[vi];
        Rng pick(731 + static_cast<std::uint64_t>(vi));
        const std::size_t n_checks = std::min<std::size_t>(t.data.size(), 6);
        for (std::size_t k = 0; k < n_checks; ++k) {
            const std::size_t i = pick.uniform_int(t.data.size());
            const Real orig = t.data[i];
            t.data[i] = orig + step;
            const Real up = eval(false, nullptr);
            t.data[i] = orig - step;
            const Real down = eval(false, nullptr);
            t.data[i] = orig;
            const Real fd = (up - down) / (2 * step);
            const Real an = analytic[vi].data[i];
            const Real denom = std::max({Real(1), std::abs(fd), std::abs(an)});
            ASSERT_NEAR(an, fd, tol * denom) << "input " << vi << " element " << i;
        }
    }
}

} // namespace

TEST(Autograd, AddMulScale) {
    Rng rng(1);
    Tensor a = random_tensor({2, 3, 4, 4}, rng);
    Tensor b = random_tensor({2, 3, 4, 4}, rng);
    check_gradients({&a, &b}, [](const std::vector<ag::Var>& v) { return ag::add(v[0], v[1]); });
    check_gradients({&a, &b}, [](const std::vector<ag::Var>& v) { return ag::mul(v[0], v[1]); });
    check_gradients({&a}, [](const std::vector<ag::Var>& v) { return ag::scale(v[0], -2.5); });
}

TEST(Autograd, Activations) {
    Rng rng(2);
    Tensor a = random_tensor({1, 2, 3, 5}, rng, -2, 2);
    // keep values away from the relu kink so finite differences are clean
    for (auto& v : a.data)
        if (std::abs(v) < 1e-3) v = 0.5;
    check_gradients({&a}, [](const std::vector<ag::Var>& v) { return ag::relu(v[0]); });
    check_gradients({&a}, [](const std::vector<ag::Var>& v) { return ag::gelu(v[0]); });
    check_gradients({&a}, [](const std::vector<ag::Var>& v) { return ag::sigmoid(v[0]); });
}

TEST(Autograd, Conv2dStride1And2) {
    Rng rng(3);
    Tensor x = random_tensor({2, 3, 6, 6}, rng);
    Tensor w = random_tensor({4, 3, 3, 3}, rng);
    Tensor b = random_tensor({4}, rng);
    check_gradients({&x, &w, &b}, [](const std::vector<ag::Var>& v) { return ag::conv2d(v[0], v[1], v[2], 1, 1); });
    check_gradients({&x, &w, &b}, [](const std::vector<ag::Var>& v) { return ag::conv2d(v[0], v[1], v[2], 2, 1); });
    Tensor w1 = random_tensor({2, 3, 1, 1}, rng);
    Tensor b1 = random_tensor({2}, rng);
    check_gradients({&x, &w1, &b1}, [](const std::vector<ag::Var>& v) { return ag::conv2d(v[0], v[1], v[2], 1, 0); });
}

TEST(Autograd, Conv2dMatchesDirectComputation) {
    // 1x1 input channel, identity-style kernel: convolving a delta image
    // reproduces the flipped kernel footprint
    Tensor x({1, 1, 3, 3});
    x.at4(0, 0, 1, 1) = 1.0;
    Tensor w({1, 1, 3, 3});
    for (int i = 0; i < 9; ++i) w.data[static_cast<std::size_t>(i)] = i + 1;
    Tensor b({1});
    ag::NoGradGuard guard;
    auto out = ag::conv2d(ag::Var::leaf(x), ag::Var::leaf(w), ag::Var::leaf(b), 1, 1);
    // out(y, x) = sum_kh sum_kw w(kh, kw) * in(y + kh - 1, x + kw - 1)
    for (int y = 0; y < 3; ++y)
        for (int xx = 0; xx < 3; ++xx) {
            const int kh = 1 - (y - 1), kw = 1 - (xx - 1);
            const Real expect = (kh >= 0 && kh < 3 && kw >= 0 && kw < 3) ? w.data[static_cast<std::size_t>(kh) * 3 + kw] : 0.0;
            EXPECT_DOUBLE_EQ(out.value().at4(0, 0, y, xx), expect);
        }
}

TEST(Autograd, PoolingAndUpsampling) {
    Rng rng(4);
    Tensor x = random_tensor({2, 2, 6, 6}, rng);
    check_gradients({&x}, [](const std::vector<ag::Var>& v) { return ag::maxpool2(v[0]); }, 1e-7, 1e-5);
    check_gradients({&x}, [](const std::vector<ag::Var>& v) { return ag::upsample_nearest2(v[0]); });
    ag::NoGradGuard guard;
    auto up = ag::upsample_nearest2(ag::Var::leaf(x));
    EXPECT_EQ(up.value().dim(2), 12);
    for (int h = 0; h < 12; ++h)
        for (int w = 0; w < 12; ++w)
            ASSERT_DOUBLE_EQ(up.value().at4(0, 1, h, w), x.at4(0, 1, h / 2, w / 2));
}

TEST(Autograd, LinearMaps) {
    Rng rng(5);
    Tensor x = random_tensor({3, 5}, rng);
    Tensor w = random_tensor({4, 5}, rng);
    Tensor b = random_tensor({4}, rng);
    check_gradients({&x, &w, &b}, [](const std::vector<ag::Var>& v) { return ag::linear(v[0], v[1], v[2]); });

    Tensor xt = random_tensor({2, 5, 3, 3}, rng);
    Tensor wt = random_tensor({7, 5}, rng);
    Tensor bt = random_tensor({7}, rng);
    check_gradients({&xt, &wt, &bt}, [](const std::vector<ag::Var>& v) { return ag::linear_tokens(v[0], v[1], v[2]); });

    check_gradients({&xt}, [](const std::vector<ag::Var>& v) { return ag::global_avg_pool(v[0]); });
}

TEST(Autograd, Normalizations) {
    Rng rng(6);
    Tensor x = random_tensor({2, 3, 4, 4}, rng);
    Tensor gamma = random_tensor({3}, rng, 0.5, 1.5);
    Tensor beta = random_tensor({3}, rng);
    check_gradients({&x, &gamma, &beta},
                    [](const std::vector<ag::Var>& v) { return ag::instance_norm(v[0], v[1], v[2]); }, 1e-6, 1e-5);
    check_gradients({&x, &gamma, &beta},
                    [](const std::vector<ag::Var>& v) { return ag::layer_norm_channels(v[0], v[1], v[2]); }, 1e-6, 1e-5);

    Tensor gain = random_tensor({2, 3}, rng, -0.3, 0.3);
    Tensor bias = random_tensor({2, 3}, rng);
    check_gradients({&x, &gain, &bias},
                    [](const std::vector<ag::Var>& v) { return ag::cond_instance_norm(v[0], v[1], v[2]); }, 1e-6, 1e-5);
}

TEST(Autograd, SpatialShift) {
    Rng rng(7);
    Tensor x = random_tensor({1, 5, 4, 4}, rng);
    std::vector<std::pair<int, int>> shifts{{0, -2}, {0, -1}, {0, 0}, {0, 1}, {0, 2}};
    check_gradients({&x}, [&](const std::vector<ag::Var>& v) { return ag::spatial_shift(v[0], shifts); });
    ag::NoGradGuard guard;
    auto out = ag::spatial_shift(ag::Var::leaf(x), shifts);
    // channel 3 shifted right by one, zero filled on the left
    for (int h = 0; h < 4; ++h) {
        ASSERT_DOUBLE_EQ(out.value().at4(0, 3, h, 0), 0.0);
        for (int w = 1; w < 4; ++w) ASSERT_DOUBLE_EQ(out.value().at4(0, 3, h, w), x.at4(0, 3, h, w - 1));
    }
}

TEST(Autograd, Losses) {
    Rng rng(8);
    Tensor logits = random_tensor({2, 1, 4, 4}, rng, -2, 2);
    Tensor masks({2, 1, 4, 4});
    for (auto& v : masks.data) v = rng.coin() ? 1.0 : 0.0;
    check_gradients({&logits}, [&](const std::vector<ag::Var>& v) { return ag::bce_dice_loss(v[0], masks, 0.5, 1.0); },
                    1e-6, 1e-6);
    check_gradients({&logits}, [&](const std::vector<ag::Var>& v) { return ag::bce_dice_loss(v[0], masks, 1.0, 0.0); },
                    1e-6, 1e-6);
    Tensor target = random_tensor({2, 1, 4, 4}, rng);
    check_gradients({&logits}, [&](const std::vector<ag::Var>& v) { return ag::mse_loss(v[0], target); }, 1e-6, 1e-6);
}

TEST(Autograd, DropoutSemantics) {
    Rng rng(9);
    Tensor x = random_tensor({1, 1, 10, 10}, rng, 0.5, 1.5);
    // rate 0 is the identity (same node handed back)
    auto xv = ag::Var::leaf(x, true);
    Rng d0(1);
    auto same = ag::dropout(xv, 0.0, d0);
    EXPECT_EQ(same.node().get(), xv.node().get());

    // kept elements are scaled by 1/(1-rate); the backward mask matches
    Rng d1(2);
    auto xv2 = ag::Var::leaf(x, true);
    auto out = ag::dropout(xv2, 0.25, d1);
    int kept = 0;
    for (std::size_t i = 0; i < x.data.size(); ++i) {
        const Real v = out.value().data[i];
        if (v != 0.0) {
            ASSERT_NEAR(v, x.data[i] / 0.75, 1e-12);
            ++kept;
        }
    }
    EXPECT_GT(kept, 50);
    EXPECT_LT(kept, 100);
    ag::backward(out);
    for (std::size_t i = 0; i < x.data.size(); ++i) {
        const Real expected = out.value().data[i] == 0.0 ? 0.0 : 1.0 / 0.75;
        ASSERT_DOUBLE_EQ(xv2.grad().data[i], expected);
    }

    EXPECT_THROW(ag::dropout(xv, 1.0, d1), std::invalid_argument);
}

TEST(Autograd, NoGradGuardSkipsTape) {
    Tensor x({2, 2});
    x.fill(1.0);
    auto xv = ag::Var::leaf(x, true);
    ag::Var out;
    {
        ag::NoGradGuard guard;
        out = ag::scale(xv, 2.0);
    }
    EXPECT_FALSE(out.node()->requires_grad);
    EXPECT_THROW(ag::backward(out), std::logic_error);
}

TEST(Autograd, GradAccumulatesAcrossReuse) {
    // y = x + x: dy/dx = 2
    Tensor x({3});
    x.fill(1.5);
    auto xv = ag::Var::leaf(x, true);
    auto y = ag::add(xv, xv);
    ag::backward(y);
    for (Real g : xv.grad().data) EXPECT_DOUBLE_EQ(g, 2.0);
}
