#include "privdiff/autodiff.hpp"

#include <gtest/gtest.h>

#include <cmath>

#include "test_util.hpp"

namespace privdiff {
namespace {

using testing::grad_check;
using testing::random_tensor;

// ----------------------------------------------------------------- matmul --

TEST(Matmul, IdentityTimesB) {
    Tape t;
    Tensor eye({3, 3});
    for (int i = 0; i < 3; ++i) eye[i * 3 + i] = 1.0;
    Tensor b = random_tensor({3, 5}, 1);
    auto r = matmul(t.constant(eye), t.constant(b));
    for (int64_t i = 0; i < b.numel(); ++i) EXPECT_DOUBLE_EQ(t.value(r)[i], b[i]);
}

TEST(Matmul, TwoByTwoAgainstIdentity) {
    Tape t;
    auto a = t.constant(Tensor({2, 2}, {1, 2, 3, 4}));
    auto b = t.constant(Tensor({2, 2}, {1, 0, 0, 1}));
    auto r = matmul(a, b);
    EXPECT_EQ(t.value(r).data, (std::vector<double>{1, 2, 3, 4}));
}

// Triple-loop oracle, independent of the implementation's loop order.
Tensor matmul_oracle(const Tensor& a, const Tensor& b) {
    int m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor c({m, n});
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) {
            double acc = 0;
            for (int p = 0; p < k; ++p) acc += a[i * k + p] * b[p * n + j];
            c[i * n + j] = acc;
        }
    return c;
}

TEST(Matmul, RandomAgainstTripleLoopOracle) {
    Tensor a = random_tensor({5, 7}, 2);
    Tensor b = random_tensor({7, 3}, 3);
    Tensor expect = matmul_oracle(a, b);
    Tape t;
    auto r = matmul(t.constant(a), t.constant(b));
    for (int64_t i = 0; i < expect.numel(); ++i)
        EXPECT_NEAR(t.value(r)[i], expect[i], 1e-12);
}

TEST(Matmul, ShapeMismatchThrows) {
    Tape t;
    auto a = t.constant(random_tensor({2, 3}, 1));
    auto b = t.constant(random_tensor({4, 2}, 2));
    EXPECT_THROW(matmul(a, b), ShapeError);
}

// ----------------------------------------------------------------- conv2d --

// Direct 6-loop convolution oracle.
Tensor conv_oracle(const Tensor& x, const Tensor& k, int stride, int pad) {
    int b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    int o = k.dim(0), kh = k.dim(2), kw = k.dim(3);
    int oh = (h + 2 * pad - kh) / stride + 1;
    int ow = (w + 2 * pad - kw) / stride + 1;
    Tensor y({b, o, oh, ow});
    for (int n = 0; n < b; ++n)
        for (int oc = 0; oc < o; ++oc)
            for (int oy = 0; oy < oh; ++oy)
                for (int ox = 0; ox < ow; ++ox) {
                    double acc = 0;
                    for (int ic = 0; ic < c; ++ic)
                        for (int ky = 0; ky < kh; ++ky)
                            for (int kx = 0; kx < kw; ++kx) {
                                int iy = oy * stride - pad + ky;
                                int ix = ox * stride - pad + kx;
                                if (iy < 0 || iy >= h || ix < 0 || ix >= w) continue;
                                acc += x[((n * c + ic) * h + iy) * w + ix] *
                                       k[((oc * c + ic) * kh + ky) * kw + kx];
                            }
                    y[((n * o + oc) * oh + oy) * ow + ox] = acc;
                }
    return y;
}

TEST(Conv2d, OnesOneByOneKernelSumsChannels) {
    Tensor x = random_tensor({1, 3, 4, 4}, 4);
    Tensor k = Tensor::full({1, 3, 1, 1}, 1.0);
    Tape t;
    auto y = conv2d(t.constant(x), t.constant(k), Val{}, 1, 0);
    for (int i = 0; i < 16; ++i) {
        double expect = x[0 * 16 + i] + x[1 * 16 + i] + x[2 * 16 + i];
        EXPECT_NEAR(t.value(y)[i], expect, 1e-14);
    }
}

TEST(Conv2d, DeltaKernelSamePaddingIsIdentity) {
    Tensor x = random_tensor({2, 2, 5, 5}, 5);
    Tensor k({2, 2, 3, 3});
    for (int oc = 0; oc < 2; ++oc) k[((oc * 2 + oc) * 3 + 1) * 3 + 1] = 1.0;
    Tape t;
    auto y = conv2d(t.constant(x), t.constant(k), Val{}, 1, 1);
    ASSERT_TRUE(t.value(y).same_shape(x));
    for (int64_t i = 0; i < x.numel(); ++i) EXPECT_DOUBLE_EQ(t.value(y)[i], x[i]);
}

TEST(Conv2d, RandomAgainstDirectOracle) {
    Tensor x = random_tensor({2, 3, 8, 8}, 6);
    Tensor k = random_tensor({4, 3, 3, 3}, 7);
    for (int stride : {1, 2}) {
        for (int pad : {0, 1}) {
            Tensor expect = conv_oracle(x, k, stride, pad);
            Tape t;
            auto y = conv2d(t.constant(x), t.constant(k), Val{}, stride, pad);
            ASSERT_TRUE(t.value(y).same_shape(expect));
            for (int64_t i = 0; i < expect.numel(); ++i)
                EXPECT_NEAR(t.value(y)[i], expect[i], 1e-10);
        }
    }
}

TEST(Conv2d, KernelLargerThanPaddedInputThrows) {
    Tape t;
    auto x = t.constant(random_tensor({1, 1, 3, 3}, 8));
    auto k = t.constant(random_tensor({1, 1, 5, 5}, 9));
    EXPECT_THROW(conv2d(x, k, Val{}, 1, 0), ShapeError);
}

// ---------------------------------------------------------------- softmax --

TEST(Softmax, ConstantRowIsUniform) {
    Tape t;
    auto y = softmax(t.constant(Tensor::full({1, 5}, 3.7)), 1);
    for (int i = 0; i < 5; ++i) EXPECT_NEAR(t.value(y)[i], 0.2, 1e-15);
}

TEST(Softmax, AnalyticTwoPoint) {
    Tape t;
    auto y = softmax(t.constant(Tensor({1, 2}, {0.0, std::log(3.0)})), 1);
    EXPECT_NEAR(t.value(y)[0], 0.25, 1e-12);
    EXPECT_NEAR(t.value(y)[1], 0.75, 1e-12);
}

TEST(Softmax, RowsSumToOneAndLieInUnitInterval) {
    Tensor x = random_tensor({4, 6}, 10, 3.0);
    Tape t;
    auto y = softmax(t.constant(x), 1);
    for (int i = 0; i < 4; ++i) {
        double s = 0;
        for (int j = 0; j < 6; ++j) {
            double v = t.value(y)[i * 6 + j];
            EXPECT_GT(v, 0.0);
            EXPECT_LT(v, 1.0);
            s += v;
        }
        EXPECT_NEAR(s, 1.0, 1e-12);
    }
}

TEST(Softmax, NonLastAxis) {
    Tensor x = random_tensor({3, 4}, 11);
    Tape t;
    auto y = softmax(t.constant(x), 0);
    for (int j = 0; j < 4; ++j) {
        double s = 0;
        for (int i = 0; i < 3; ++i) s += t.value(y)[i * 4 + j];
        EXPECT_NEAR(s, 1.0, 1e-12);
    }
}

// --------------------------------------------------------------- backward --

TEST(Backward, LinearLossGradIsInput) {
    // loss = sum(W x): dW = x broadcast over rows of W.
    Tensor w = random_tensor({3, 4}, 12);
    Tensor x = random_tensor({4, 1}, 13);
    Tape t;
    auto wv = t.leaf(w, true);
    auto loss = sum_all(matmul(wv, t.constant(x)));
    t.backward(loss);
    std::map<std::string, Val> bound{{"w", wv}};
    GradMap gm = collect_grads(t, bound);
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 4; ++j) EXPECT_NEAR(gm.grads["w"][i * 4 + j], x[j], 1e-14);
}

TEST(Backward, FrozenParameterAbsentFromGradMap) {
    Tape t;
    auto w = t.leaf(random_tensor({2, 2}, 14), true);
    auto f = t.leaf(random_tensor({2, 2}, 15), false);
    auto loss = sum_all(matmul(w, f));
    t.backward(loss);
    std::map<std::string, Val> bound{{"w", w}, {"frozen", f}};
    GradMap gm = collect_grads(t, bound);
    EXPECT_TRUE(gm.grads.count("w"));
    EXPECT_FALSE(gm.grads.count("frozen"));
}

TEST(Backward, NonScalarLossThrows) {
    Tape t;
    auto w = t.leaf(random_tensor({2, 2}, 16), true);
    EXPECT_THROW(t.backward(w), ContractError);
}

TEST(Backward, UnreachedParameterGetsZeros) {
    Tape t;
    auto w = t.leaf(random_tensor({2, 2}, 17), true);
    auto u = t.leaf(random_tensor({3, 3}, 18), true);  // never used in the loss
    auto loss = sum_all(w);
    t.backward(loss);
    std::map<std::string, Val> bound{{"w", w}, {"unused", u}};
    GradMap gm = collect_grads(t, bound);
    ASSERT_TRUE(gm.grads.count("unused"));
    for (double v : gm.grads["unused"].data) EXPECT_EQ(v, 0.0);
}

TEST(Backward, Linearity) {
    // grad(a L1 + b L2) == a grad(L1) + b grad(L2)
    Tensor w0 = random_tensor({3, 3}, 19);
    Tensor x = random_tensor({3, 3}, 20);
    auto build = [&](double a, double b) {
        Tape t;
        auto w = t.leaf(w0, true);
        auto xl = t.constant(x);
        auto l1 = mean_all(mul(matmul(w, xl), matmul(w, xl)));
        auto l2 = sum_all(silu(w));
        auto loss = add(scale(l1, a), scale(l2, b));
        t.backward(loss);
        std::map<std::string, Val> bound{{"w", w}};
        return collect_grads(t, bound).grads["w"];
    };
    Tensor g1 = build(1, 0), g2 = build(0, 1), gc = build(0.7, -1.3);
    for (int64_t i = 0; i < g1.numel(); ++i)
        EXPECT_NEAR(gc[i], 0.7 * g1[i] - 1.3 * g2[i], 1e-10);
}

TEST(Backward, DeterministicBitwise) {
    auto run = [&]() {
        Tensor w0 = random_tensor({4, 4}, 21);
        Tensor x = random_tensor({1, 4, 4, 4}, 22);
        Tape t;
        auto w = t.leaf(w0, true);
        auto k = t.leaf(random_tensor({4, 4, 3, 3}, 23), true);
        auto h = conv2d(t.constant(x), k, Val{}, 1, 1);
        auto tok = chw_to_tokens(h);
        auto loss = mean_all(mul(tok, tok));
        auto loss2 = add(loss, mean_all(matmul(w, w)));
        t.backward(loss2);
        std::map<std::string, Val> bound{{"w", w}, {"k", k}};
        return collect_grads(t, bound);
    };
    GradMap a = run(), b = run();
    EXPECT_EQ(a.grads["w"].data, b.grads["w"].data);
    EXPECT_EQ(a.grads["k"].data, b.grads["k"].data);
    EXPECT_EQ(a.global_norm, b.global_norm);
}

TEST(GradMap, GlobalNormMatchesDefinition) {
    Tape t;
    auto w = t.leaf(Tensor({2}, {3.0, 0.0}), true);
    auto v = t.leaf(Tensor({1}, {4.0}), true);
    auto loss = add(sum_all(mul(w, w)), sum_all(mul(v, v)));
    t.backward(loss);
    std::map<std::string, Val> bound{{"w", w}, {"v", v}};
    GradMap gm = collect_grads(t, bound);
    // dw = 2w = (6,0), dv = 2v = (8): norm = 10
    EXPECT_NEAR(gm.global_norm, 10.0, 1e-12);
}

// ------------------------------------------------- finite-difference suite --

TEST(GradCheck, ElementwiseAndReductions) {
    std::map<std::string, Tensor> params;
    params["a"] = random_tensor({3, 4}, 30, 0.8);
    params["b"] = random_tensor({3, 4}, 31, 0.8);
    auto make = [&](Tape& t, std::map<std::string, Val>& bound) {
        auto a = t.leaf(params["a"], true);
        auto b = t.leaf(params["b"], true);
        bound = {{"a", a}, {"b", b}};
        auto y = add(mul(silu(a), tanh_act(b)), sub(a, scale(b, 0.3)));
        return mean_all(mul(y, y));
    };
    EXPECT_LT(grad_check(params, make), 1e-5);
}

TEST(GradCheck, MatmulLinearTranspose) {
    std::map<std::string, Tensor> params;
    params["w"] = random_tensor({4, 5}, 32, 0.5);
    params["b"] = random_tensor({4}, 33, 0.5);
    params["x"] = random_tensor({3, 5}, 34, 0.5);
    auto make = [&](Tape& t, std::map<std::string, Val>& bound) {
        auto w = t.leaf(params["w"], true);
        auto b = t.leaf(params["b"], true);
        auto x = t.leaf(params["x"], true);
        bound = {{"w", w}, {"b", b}, {"x", x}};
        auto y = linear(x, w, b);                 // [3,4]
        auto z = matmul(transpose2d(y), y);       // [4,4]
        return mean_all(mul(z, z));
    };
    EXPECT_LT(grad_check(params, make), 1e-5);
}

TEST(GradCheck, ConvPoolUpsampleConcat) {
    std::map<std::string, Tensor> params;
    params["x"] = random_tensor({2, 3, 6, 6}, 35, 0.5);
    params["k1"] = random_tensor({4, 3, 3, 3}, 36, 0.4);
    params["kb"] = random_tensor({4}, 37, 0.2);
    params["k2"] = random_tensor({2, 8, 1, 1}, 38, 0.4);
    auto make = [&](Tape& t, std::map<std::string, Val>& bound) {
        auto x = t.leaf(params["x"], true);
        auto k1 = t.leaf(params["k1"], true);
        auto kb = t.leaf(params["kb"], true);
        auto k2 = t.leaf(params["k2"], true);
        bound = {{"x", x}, {"k1", k1}, {"kb", kb}, {"k2", k2}};
        auto h = conv2d(x, k1, kb, 2, 1);              // [2,4,3,3]
        auto up = upsample2x(h);                       // [2,4,6,6]
        auto both = concat_channels(up, silu(up));     // [2,8,6,6]
        auto out = conv2d(both, k2, Val{}, 1, 0);      // [2,2,6,6]
        auto pooled = global_avg_pool(out);            // [2,2]
        return mean_all(mul(pooled, pooled));
    };
    EXPECT_LT(grad_check(params, make), 1e-5);
}

TEST(GradCheck, GroupNorm) {
    std::map<std::string, Tensor> params;
    params["x"] = random_tensor({2, 4, 3, 3}, 40, 1.0);
    params["g"] = random_tensor({4}, 41, 0.5);
    params["b"] = random_tensor({4}, 42, 0.5);
    auto make = [&](Tape& t, std::map<std::string, Val>& bound) {
        auto x = t.leaf(params["x"], true);
        auto g = t.leaf(params["g"], true);
        auto b = t.leaf(params["b"], true);
        bound = {{"x", x}, {"g", g}, {"b", b}};
        auto y = group_norm(x, g, b, 2);
        return mean_all(mul(y, silu(y)));
    };
    EXPECT_LT(grad_check(params, make), 1e-5);
}

TEST(GradCheck, SoftmaxAxes) {
    std::map<std::string, Tensor> params;
    params["x"] = random_tensor({3, 5}, 43, 1.0);
    for (int axis : {0, 1}) {
        auto make = [&, axis](Tape& t, std::map<std::string, Val>& bound) {
            auto x = t.leaf(params["x"], true);
            bound = {{"x", x}};
            auto y = softmax(x, axis);
            auto w = t.constant(random_tensor({3, 5}, 44));
            return sum_all(mul(y, w));
        };
        EXPECT_LT(grad_check(params, make), 1e-5) << "axis " << axis;
    }
}

TEST(GradCheck, EmbeddingAndCrossEntropy) {
    std::map<std::string, Tensor> params;
    params["table"] = random_tensor({5, 4}, 45, 0.7);
    params["w"] = random_tensor({3, 4}, 46, 0.7);
    std::vector<int> ids{1, 3, 3, 0};
    std::vector<int> labels{0, 2, 1, 2};
    auto make = [&](Tape& t, std::map<std::string, Val>& bound) {
        auto table = t.leaf(params["table"], true);
        auto w = t.leaf(params["w"], true);
        bound = {{"table", table}, {"w", w}};
        auto e = embed_rows(table, ids);  // [4,4]
        auto logits = linear(e, w);       // [4,3]
        return cross_entropy(logits, labels);
    };
    EXPECT_LT(grad_check(params, make), 1e-5);
}

TEST(GradCheck, FusedAttentionSelfAndCross) {
    for (bool cross : {false, true}) {
        std::map<std::string, Tensor> params;
        params["psi"] = testing::random_tensor({2, 4, 6}, 50, 0.6);
        params["wq"] = testing::random_tensor({6, 6}, 51, 0.4);
        params["wk"] = testing::random_tensor({6, cross ? 3 : 6}, 52, 0.4);
        params["wv"] = testing::random_tensor({6, cross ? 3 : 6}, 53, 0.4);
        if (cross) params["cond"] = testing::random_tensor({2, 2, 3}, 54, 0.6);
        auto make = [&, cross](Tape& t, std::map<std::string, Val>& bound) {
            auto psi = t.leaf(params["psi"], true);
            auto wq = t.leaf(params["wq"], true);
            auto wk = t.leaf(params["wk"], true);
            auto wv = t.leaf(params["wv"], true);
            bound = {{"psi", psi}, {"wq", wq}, {"wk", wk}, {"wv", wv}};
            Val cv{};
            if (cross) {
                auto c = t.leaf(params["cond"], true);
                bound["cond"] = c;
                cv = c;
            }
            auto o = attention(psi, cv, wq, wk, wv, /*heads=*/2);
            return mean_all(mul(o, o));
        };
        EXPECT_LT(grad_check(params, make), 1e-5) << (cross ? "cross" : "self");
    }
}

// ------------------------------------------------------- per-sample grads --

TEST(PerSampleGrads, SingleSampleMatchesBackward) {
    Tensor w0 = random_tensor({3, 3}, 60);
    Tensor x = random_tensor({3, 3}, 61);
    SampleLossBuilder builder = [&](Tape& t, std::map<std::string, Val>& bound, int) {
        auto w = t.leaf(w0, true);
        bound["w"] = w;
        auto y = matmul(w, t.constant(x));
        return mean_all(mul(y, y));
    };
    auto gms = per_sample_grads(builder, {0});
    ASSERT_EQ(gms.size(), 1u);

    Tape t;
    std::map<std::string, Val> bound;
    auto loss = builder(t, bound, 0);
    t.backward(loss);
    GradMap direct = collect_grads(t, bound);
    EXPECT_EQ(gms[0].grads["w"].data, direct.grads["w"].data);
}

TEST(PerSampleGrads, SumEqualsGradOfSummedLoss) {
    const int B = 4;
    Tensor w0 = random_tensor({4, 4}, 62);
    std::vector<Tensor> xs;
    for (int i = 0; i < B; ++i) xs.push_back(random_tensor({4, 1}, 63 + static_cast<uint64_t>(i)));

    SampleLossBuilder builder = [&](Tape& t, std::map<std::string, Val>& bound, int i) {
        auto w = t.leaf(w0, true);
        bound["w"] = w;
        auto y = matmul(w, t.constant(xs[static_cast<size_t>(i)]));
        return sum_all(mul(y, silu(y)));
    };
    auto gms = per_sample_grads(builder, {0, 1, 2, 3});

    Tape t;
    auto w = t.leaf(w0, true);
    Val total{};
    for (int i = 0; i < B; ++i) {
        auto y = matmul(w, t.constant(xs[static_cast<size_t>(i)]));
        auto li = sum_all(mul(y, silu(y)));
        total = (i == 0) ? li : add(total, li);
    }
    t.backward(total);
    std::map<std::string, Val> bound{{"w", w}};
    GradMap summed = collect_grads(t, bound);

    for (int64_t j = 0; j < w0.numel(); ++j) {
        double s = 0;
        for (auto& gm : gms) s += gm.grads["w"][j];
        double ref = summed.grads["w"][j];
        EXPECT_NEAR(s, ref, 1e-10 * std::max(1.0, std::abs(ref)));
    }
}

TEST(PerSampleGrads, DuplicatedSampleGivesIdenticalMaps) {
    Tensor w0 = random_tensor({3, 3}, 70);
    Tensor x = random_tensor({3, 1}, 71);
    SampleLossBuilder builder = [&](Tape& t, std::map<std::string, Val>& bound, int) {
        auto w = t.leaf(w0, true);
        bound["w"] = w;
        auto y = matmul(w, t.constant(x));
        return mean_all(mul(y, y));
    };
    auto gms = per_sample_grads(builder, {5, 5});
    EXPECT_EQ(gms[0].grads["w"].data, gms[1].grads["w"].data);
    EXPECT_EQ(gms[0].global_norm, gms[1].global_norm);
}

TEST(PerSampleGrads, EmptyBatchThrows) {
    SampleLossBuilder builder = [](Tape& t, std::map<std::string, Val>&, int) {
        return sum_all(t.constant(Tensor::full({1}, 0.0)));
    };
    EXPECT_THROW(per_sample_grads(builder, {}), ContractError);
}

// 32-bit instantiation of the core engine compiles and runs.
TEST(FloatTape, BasicOps) {
    TapeT<float> t;
    auto a = t.leaf(TensorF::full({2, 2}, 2.0f), true);
    auto b = t.constant(TensorF::full({2, 2}, 3.0f));
    auto loss = sum_all(mul(a, b));
    t.backward(loss);
    EXPECT_FLOAT_EQ(t.nodes[a.id].grad[0], 3.0f);
}

}  // namespace
}  // namespace privdiff
