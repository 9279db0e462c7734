#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "diffaug/tensor.hpp"
#include "helpers.hpp"

using namespace diffaug;
using testutil::finite_diff;
using testutil::max_rel_err;
using testutil::random_vec;

namespace {

// Runs f on a fresh tape with a grad leaf built from x, returns loss value.
double eval_loss(const std::vector<float>& x, const Dims& d,
                 const std::function<Tensor(Tape&, Tensor)>& f) {
    Tape tape;
    Tensor in = tape.leaf_grad(d, x.data());
    return f(tape, in).scalar();
}

// Gradient of sum-of-(weighted) outputs wrt input, checked against finite
// differences. The weighting makes the check sensitive to permuted outputs.
void gradcheck(const Dims& d, const std::function<Tensor(Tape&, Tensor)>& body,
               uint64_t seed, double tol = 2e-2, float lo = -1.0f, float hi = 1.0f) {
    std::vector<float> x = random_vec(static_cast<size_t>(dims_numel(d)), seed, lo, hi);
    Tape tape;
    Tensor in = tape.leaf_grad(d, x.data());
    Tensor loss = body(tape, in);
    REQUIRE(loss.size() == 1);
    tape.backward(loss);
    const float* analytic = in.grad_data();
    REQUIRE(analytic != nullptr);
    auto numeric = finite_diff(
        [&](const std::vector<float>& v) { return eval_loss(v, d, body); }, x);
    CHECK(max_rel_err(numeric, analytic) < tol);
}

// Deterministic per-element weights so reductions see distinct output coords.
Tensor weighted_sum(Tape& tape, Tensor y) {
    std::vector<float> w(static_cast<size_t>(y.size()));
    for (size_t i = 0; i < w.size(); ++i) w[i] = 0.3f + 0.07f * static_cast<float>(i % 17);
    Tensor wt = tape.input(y.dims(), w);
    return sum_all(mul(y, wt));
}

}  // namespace

TEST_CASE("elementwise ops match finite differences") {
    Dims d{2, 3, 4};
    gradcheck(d, [](Tape& t, Tensor x) { return weighted_sum(t, add(x, scale(x, 0.5f))); }, 1);
    gradcheck(d, [](Tape& t, Tensor x) { return weighted_sum(t, mul(x, add_scalar(x, 2.f))); }, 2);
    gradcheck(d, [](Tape& t, Tensor x) { return weighted_sum(t, axpby(1.7f, x, -0.3f, square(x))); }, 3);
    gradcheck(d, [](Tape& t, Tensor x) { return weighted_sum(t, silu(x)); }, 4);
    gradcheck(d, [](Tape& t, Tensor x) { return weighted_sum(t, sigmoid(x)); }, 5);
    // keep relu inputs away from the kink
    gradcheck(d, [](Tape& t, Tensor x) { return weighted_sum(t, relu(add_scalar(x, 3.f))); }, 6);
    gradcheck(d, [](Tape& t, Tensor x) { return mean_all(square(x)); }, 7);
}

TEST_CASE("softmax and rmsnorm gradients") {
    gradcheck({3, 5}, [](Tape& t, Tensor x) { return weighted_sum(t, softmax_lastdim(x)); }, 11);
    gradcheck({4, 6}, [](Tape& t, Tensor x) {
        std::vector<float> gv(6, 1.3f);
        Tensor g = t.leaf_grad({6}, gv.data());
        return weighted_sum(t, rmsnorm_rows(x, g));
    }, 12);
    // gain gradient
    std::vector<float> xs = random_vec(24, 13);
    Tape tape;
    Tensor x = tape.input({4, 6}, xs);
    std::vector<float> gv = random_vec(6, 14, 0.5f, 1.5f);
    Tensor g = tape.leaf_grad({6}, gv.data());
    Tensor loss = weighted_sum(tape, rmsnorm_rows(x, g));
    tape.backward(loss);
    auto numeric = finite_diff(
        [&](const std::vector<float>& v) {
            Tape t2;
            Tensor x2 = t2.input({4, 6}, xs);
            Tensor g2 = t2.leaf_grad({6}, v.data());
            return weighted_sum(t2, rmsnorm_rows(x2, g2)).scalar();
        },
        gv);
    CHECK(max_rel_err(numeric, g.grad_data()) < 2e-2);
}

TEST_CASE("rmsnorm maps zero rows to zero rows") {
    Tape tape;
    std::vector<float> xs(12, 0.0f);
    xs[6] = 0.5f;  // second row nonzero
    Tensor x = tape.input({2, 6}, xs);
    std::vector<float> gv(6, 1.1f);
    Tensor g = tape.input({6}, gv);
    Tensor y = rmsnorm_rows(x, g);
    for (int e = 0; e < 6; ++e) CHECK(y.data()[e] == 0.0f);
    CHECK(y.data()[6] != 0.0f);
}

TEST_CASE("linear matches finite differences for x, w and b") {
    Dims dx{3, 4};
    std::vector<float> xs = random_vec(12, 21);
    std::vector<float> ws = random_vec(8, 22);
    std::vector<float> bs = random_vec(2, 23);

    auto run = [&](const std::vector<float>& xv, const std::vector<float>& wv,
                   const std::vector<float>& bv, int which, const float** grad_out,
                   Tape& tape) {
        Tensor x = which == 0 ? tape.leaf_grad(dx, xv.data()) : tape.input(dx, xv);
        Tensor w = which == 1 ? tape.leaf_grad({2, 4}, wv.data()) : tape.input({2, 4}, wv);
        Tensor b = which == 2 ? tape.leaf_grad({2}, bv.data()) : tape.input({2}, bv);
        Tensor loss = weighted_sum(tape, linear(x, w, b));
        if (grad_out) {
            tape.backward(loss);
            Tensor target = which == 0 ? x : which == 1 ? w : b;
            *grad_out = target.grad_data();
        }
        return loss.scalar();
    };

    for (int which = 0; which < 3; ++which) {
        Tape tape;
        const float* analytic = nullptr;
        run(xs, ws, bs, which, &analytic, tape);
        REQUIRE(analytic != nullptr);
        const std::vector<float>& base = which == 0 ? xs : which == 1 ? ws : bs;
        auto numeric = finite_diff(
            [&](const std::vector<float>& v) {
                Tape t2;
                return run(which == 0 ? v : xs, which == 1 ? v : ws, which == 2 ? v : bs,
                           which, nullptr, t2);
            },
            base);
        CHECK(max_rel_err(numeric, analytic) < 2e-2);
    }
}

TEST_CASE("conv2d gradients (x, w, b) vs finite differences") {
    Dims dx{2, 3, 6, 6};
    std::vector<float> xs = random_vec(static_cast<size_t>(dims_numel(dx)), 31);
    std::vector<float> ws = random_vec(4 * 3 * 3 * 3, 32, -0.4f, 0.4f);
    std::vector<float> bs = random_vec(4, 33);

    auto run = [&](const std::vector<float>& xv, const std::vector<float>& wv,
                   const std::vector<float>& bv, int which, const float** grad_out,
                   Tape& tape, int stride) {
        Tensor x = which == 0 ? tape.leaf_grad(dx, xv.data()) : tape.input(dx, xv);
        Tensor w = which == 1 ? tape.leaf_grad({4, 3, 3, 3}, wv.data())
                              : tape.input({4, 3, 3, 3}, wv);
        Tensor b = which == 2 ? tape.leaf_grad({4}, bv.data()) : tape.input({4}, bv);
        Tensor loss = weighted_sum(tape, conv2d(x, w, b, stride, 1));
        if (grad_out) {
            tape.backward(loss);
            Tensor target = which == 0 ? x : which == 1 ? w : b;
            *grad_out = target.grad_data();
        }
        return loss.scalar();
    };

    for (int stride : {1, 2}) {
        for (int which = 0; which < 3; ++which) {
            Tape tape;
            const float* analytic = nullptr;
            run(xs, ws, bs, which, &analytic, tape, stride);
            REQUIRE(analytic != nullptr);
            const std::vector<float>& base = which == 0 ? xs : which == 1 ? ws : bs;
            auto numeric = finite_diff(
                [&](const std::vector<float>& v) {
                    Tape t2;
                    return run(which == 0 ? v : xs, which == 1 ? v : ws,
                               which == 2 ? v : bs, which, nullptr, t2, stride);
                },
                base);
            CHECK(max_rel_err(numeric, analytic) < 2e-2);
        }
    }
}

TEST_CASE("group_norm gradient vs finite differences") {
    Dims d{2, 4, 3, 3};
    std::vector<float> gs = random_vec(4, 41, 0.5f, 1.5f);
    std::vector<float> bs = random_vec(4, 42);
    gradcheck(d, [&](Tape& t, Tensor x) {
        Tensor g = t.input({4}, gs);
        Tensor b = t.input({4}, bs);
        return weighted_sum(t, group_norm(x, 2, g, b));
    }, 43, 3e-2);
    // affine params
    std::vector<float> xs = random_vec(static_cast<size_t>(dims_numel(d)), 44);
    Tape tape;
    Tensor x = tape.input(d, xs);
    Tensor g = tape.leaf_grad({4}, gs.data());
    Tensor b = tape.leaf_grad({4}, bs.data());
    Tensor loss = weighted_sum(tape, group_norm(x, 2, g, b));
    tape.backward(loss);
    auto ng = finite_diff(
        [&](const std::vector<float>& v) {
            Tape t2;
            Tensor x2 = t2.input(d, xs);
            Tensor g2 = t2.leaf_grad({4}, v.data());
            Tensor b2 = t2.input({4}, bs);
            return weighted_sum(t2, group_norm(x2, 2, g2, b2)).scalar();
        },
        gs);
    CHECK(max_rel_err(ng, g.grad_data()) < 2e-2);
}

TEST_CASE("attention gradients vs finite differences") {
    Dims dq{2, 3, 4}, dk{2, 5, 4};
    std::vector<float> qs = random_vec(24, 51);
    std::vector<float> ks = random_vec(40, 52);
    std::vector<float> vs = random_vec(40, 53);

    auto run = [&](const std::vector<float>& a, int which, const float** grad_out,
                   Tape& tape) {
        Tensor q = which == 0 ? tape.leaf_grad(dq, a.data()) : tape.input(dq, qs);
        Tensor k = which == 1 ? tape.leaf_grad(dk, a.data()) : tape.input(dk, ks);
        Tensor v = which == 2 ? tape.leaf_grad(dk, a.data()) : tape.input(dk, vs);
        Tensor loss = weighted_sum(tape, attention(q, k, v));
        if (grad_out) {
            tape.backward(loss);
            Tensor target = which == 0 ? q : which == 1 ? k : v;
            *grad_out = target.grad_data();
        }
        return loss.scalar();
    };
    for (int which = 0; which < 3; ++which) {
        Tape tape;
        const float* analytic = nullptr;
        const std::vector<float>& base = which == 0 ? qs : which == 1 ? ks : vs;
        run(base, which, &analytic, tape);
        auto numeric = finite_diff(
            [&](const std::vector<float>& v) {
                Tape t2;
                return run(v, which, nullptr, t2);
            },
            base);
        CHECK(max_rel_err(numeric, analytic) < 2e-2);
    }
}

TEST_CASE("shape ops route gradients correctly") {
    gradcheck({2, 3, 4, 4}, [](Tape& t, Tensor x) {
        return weighted_sum(t, chw_to_tokens(x));
    }, 61);
    gradcheck({2, 16, 3}, [](Tape& t, Tensor x) {
        return weighted_sum(t, tokens_to_chw(x, 4, 4));
    }, 62);
    gradcheck({2, 2, 4, 4}, [](Tape& t, Tensor x) {
        return weighted_sum(t, avg_pool2(x));
    }, 63);
    gradcheck({2, 2, 3, 3}, [](Tape& t, Tensor x) {
        return weighted_sum(t, upsample_nearest2(x));
    }, 64);
    gradcheck({3, 4}, [](Tape& t, Tensor x) {
        return weighted_sum(t, take_rows(x, {2, 0, 2}));
    }, 65);
    gradcheck({2, 3, 2, 2}, [](Tape& t, Tensor x) {
        return weighted_sum(t, concat_channels(x, scale(x, 2.0f)));
    }, 66);
    gradcheck({3, 4}, [](Tape& t, Tensor x) {
        return weighted_sum(t, concat_rows(x, scale(x, -1.0f)));
    }, 67);
    gradcheck({4, 5}, [](Tape& t, Tensor x) { return weighted_sum(t, mean_rows(x)); }, 68);
    gradcheck({5}, [](Tape& t, Tensor x) { return weighted_sum(t, repeat_row(x, 3)); }, 69);
    gradcheck({3, 2, 2}, [](Tape& t, Tensor x) {
        return weighted_sum(t, select_sample(x, 1));
    }, 70);
    gradcheck({2, 3}, [](Tape& t, Tensor x) {
        Tensor a = reshape(x, {6});
        return weighted_sum(t, reshape(a, {3, 2}));
    }, 71);
    gradcheck({2, 3}, [](Tape& t, Tensor x) {
        std::vector<Tensor> parts{x, scale(x, 0.5f), add_scalar(x, 1.0f)};
        return weighted_sum(t, stack(parts));
    }, 72);
}

TEST_CASE("bias ops") {
    std::vector<float> bs = random_vec(3, 81);
    gradcheck({2, 3, 4, 4}, [&](Tape& t, Tensor x) {
        Tensor b = t.input({3}, bs);
        return weighted_sum(t, add_channel_bias(x, b));
    }, 82);
    std::vector<float> bss = random_vec(6, 83);
    gradcheck({2, 3, 4, 4}, [&](Tape& t, Tensor x) {
        Tensor b = t.input({2, 3}, bss);
        return weighted_sum(t, add_sample_channel_bias(x, b));
    }, 84);
    // bias gradient path
    Tape tape;
    std::vector<float> xs = random_vec(2 * 3 * 16, 85);
    Tensor x = tape.input({2, 3, 4, 4}, xs);
    Tensor b = tape.leaf_grad({3}, bs.data());
    Tensor loss = weighted_sum(tape, add_channel_bias(x, b));
    tape.backward(loss);
    auto numeric = finite_diff(
        [&](const std::vector<float>& v) {
            Tape t2;
            Tensor x2 = t2.input({2, 3, 4, 4}, xs);
            Tensor b2 = t2.leaf_grad({3}, v.data());
            return weighted_sum(t2, add_channel_bias(x2, b2)).scalar();
        },
        bs);
    CHECK(max_rel_err(numeric, b.grad_data()) < 2e-2);
}

TEST_CASE("loss ops") {
    std::vector<float> ts = random_vec(24, 91);
    gradcheck({2, 3, 4}, [&](Tape& t, Tensor x) {
        Tensor tgt = t.input({2, 3, 4}, ts);
        return mse(x, tgt);
    }, 92);
    std::vector<float> bins(24);
    for (size_t i = 0; i < bins.size(); ++i) bins[i] = (i % 3 == 0) ? 1.0f : 0.0f;
    gradcheck({2, 3, 4}, [&](Tape& t, Tensor x) {
        Tensor tgt = t.input({2, 3, 4}, bins);
        return bce_logits(x, tgt);
    }, 93);
    std::vector<float> ws = random_vec(24, 94, 0.5f, 2.0f);
    gradcheck({2, 3, 4}, [&](Tape& t, Tensor x) {
        Tensor tgt = t.input({2, 3, 4}, bins);
        Tensor w = t.input({2, 3, 4}, ws);
        return bce_logits_weighted(x, tgt, w);
    }, 95);
}

TEST_CASE("forward and backward are deterministic across runs") {
    auto run = [&]() {
        std::vector<float> xs = random_vec(2 * 3 * 8 * 8, 101);
        std::vector<float> ws = random_vec(4 * 3 * 3 * 3, 102, -0.3f, 0.3f);
        Tape tape;
        Tensor x = tape.leaf_grad({2, 3, 8, 8}, xs.data());
        Tensor w = tape.leaf_grad({4, 3, 3, 3}, ws.data());
        Tensor y = conv2d(x, w, Tensor(), 1, 1);
        Tensor q = chw_to_tokens(y);
        Tensor out = attention(q, q, q);
        Tensor loss = mean_all(square(out));
        tape.backward(loss);
        std::vector<float> sig;
        sig.push_back(loss.scalar());
        const float* gx = x.grad_data();
        for (int i = 0; i < 10; ++i) sig.push_back(gx[i * 7]);
        return sig;
    };
    auto a = run();
    auto b = run();
    CHECK(a == b);
}

TEST_CASE("no-grad tape evaluates without allocating gradients") {
    Tape tape;
    tape.set_grad_enabled(false);
    std::vector<float> xs = random_vec(12, 111);
    Tensor x = tape.leaf_grad({3, 4}, xs.data());
    Tensor y = silu(x);
    CHECK(y.grad_data() == nullptr);
    CHECK(tape.num_nodes() == 2);
}
