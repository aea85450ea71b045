#include <doctest.h>

#include <cmath>
#include <functional>
#include <vector>

#include "tgfuse/rng.hpp"
#include "tgfuse/tape.hpp"

using namespace tgfuse;

namespace {

using DTensor = TensorT<double>;
using DVar = Var<double>;
using DTape = Tape<double>;

DTensor random_tensor(std::vector<int64_t> shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    DTensor t(std::move(shape));
    for (auto& v : t.data) v = rng.next_uniform(lo, hi);
    return t;
}

// Central finite differences of a scalar-valued builder against the analytic
// gradient of every input.
void check_grads(const std::vector<DTensor>& inputs,
                 const std::function<DVar(DTape&, std::vector<DVar>&)>& build, double tol = 1e-7,
                 double eps = 1e-5) {
    DTape tape;
    std::vector<DVar> vars;
    for (const auto& t : inputs) vars.push_back(tape.leaf(t, true));
    DVar out = build(tape, vars);
    REQUIRE(out.val().numel() == 1);
    tape.backward(out);

    for (size_t vi = 0; vi < inputs.size(); ++vi) {
        const DTensor& analytic = tape.grad_of(vars[vi]);
        REQUIRE(analytic.numel() == inputs[vi].numel());
        for (int64_t i = 0; i < inputs[vi].numel(); ++i) {
            auto eval = [&](double delta) {
                DTape t2;
                std::vector<DVar> vs;
                for (size_t vj = 0; vj < inputs.size(); ++vj) {
                    DTensor mod = inputs[vj];
                    if (vj == vi) mod.data[static_cast<size_t>(i)] += delta;
                    vs.push_back(t2.leaf(mod, false));
                }
                return build(t2, vs).val().data[0];
            };
            double fd = (eval(eps) - eval(-eps)) / (2 * eps);
            double an = analytic.data[static_cast<size_t>(i)];
            double err = std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-4});
            CAPTURE(vi);
            CAPTURE(i);
            CAPTURE(fd);
            CAPTURE(an);
            CHECK(err < tol);
        }
    }
}

}  // namespace

TEST_CASE("binary broadcast ops match finite differences") {
    Rng rng(7);
    DTensor a = random_tensor({2, 3, 4}, rng);
    DTensor b = random_tensor({3, 1}, rng, 0.5, 1.5);  // broadcast, away from 0 for div
    check_grads({a, b}, [](DTape&, std::vector<DVar>& v) {
        auto s = add(mul(v[0], v[1]), div(v[0], v[1]));
        return sum_all(sub(s, v[1]));
    });
}

TEST_CASE("maximum takes first branch on ties and routes gradients") {
    DTape tape;
    DTensor a({3}, {1.0, 2.0, 5.0});
    DTensor b({3}, {1.0, 3.0, 4.0});
    auto va = tape.leaf(a, true);
    auto vb = tape.leaf(b, true);
    auto m = maximum(va, vb);
    CHECK(m.val().data == std::vector<double>{1.0, 3.0, 5.0});
    tape.backward(sum_all(m));
    CHECK(tape.grad_of(va).data == std::vector<double>{1.0, 0.0, 1.0});  // tie -> first
    CHECK(tape.grad_of(vb).data == std::vector<double>{0.0, 1.0, 0.0});
}

TEST_CASE("unary ops match finite differences") {
    Rng rng(11);
    DTensor x = random_tensor({4, 5}, rng, 0.2, 2.0);
    check_grads({x}, [](DTape&, std::vector<DVar>& v) {
        auto y = add(gelu(v[0]), sigmoid(square(v[0])));
        y = add(y, sqrt_op(v[0]));
        y = add(y, abs_op(sub(v[0], add_scalar(v[0], -0.05))));
        return mean_all(mul(y, exp_op(scale(v[0], -0.3))));
    });
}

TEST_CASE("reductions with axes and keepdim") {
    Rng rng(13);
    DTensor x = random_tensor({3, 4, 2}, rng);
    check_grads({x}, [](DTape&, std::vector<DVar>& v) {
        auto m = mean_axes(v[0], {1}, true);          // (3,1,2)
        auto d = sub(v[0], m);                        // broadcast
        return sum_all(square(reduce_sum(d, {0, 2}, false)));
    });
}

TEST_CASE("matmul and bmm match finite differences") {
    Rng rng(17);
    DTensor a = random_tensor({3, 4}, rng);
    DTensor b = random_tensor({4, 2}, rng);
    check_grads({a, b}, [](DTape&, std::vector<DVar>& v) {
        return sum_all(square(matmul(v[0], v[1])));
    });
    DTensor ba = random_tensor({2, 3, 4}, rng);
    DTensor bb = random_tensor({2, 4, 5}, rng);
    check_grads({ba, bb}, [](DTape&, std::vector<DVar>& v) {
        return mean_all(square(bmm(v[0], v[1])));
    });
}

TEST_CASE("softmax rows sum to one and gradcheck passes") {
    Rng rng(19);
    DTensor x = random_tensor({3, 6}, rng, -2.0, 2.0);
    DTape tape;
    auto v = tape.leaf(x, true);
    auto y = softmax_last(v);
    for (int64_t r = 0; r < 3; ++r) {
        double s = 0;
        for (int64_t c = 0; c < 6; ++c) s += y.val().at2(r, c);
        CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
    }
    DTensor w = random_tensor({3, 6}, rng);
    check_grads({x}, [&w](DTape& t, std::vector<DVar>& v2) {
        return sum_all(mul(softmax_last(v2[0]), t.constant(w)));
    });
}

TEST_CASE("shape ops: reshape, permute, slice, concat") {
    Rng rng(23);
    DTensor x = random_tensor({2, 3, 4}, rng);
    DTensor y = random_tensor({2, 2, 4}, rng);
    check_grads({x, y}, [](DTape&, std::vector<DVar>& v) {
        auto p = permute(v[0], {1, 0, 2});            // (3,2,4)
        auto s = slice(p, 0, 1, 2);                   // (2,2,4)
        auto c = concat<double>({s, v[1]}, 1);        // (2,4,4)
        return mean_all(square(reshape(c, {32})));
    });
}

TEST_CASE("conv2d dense and depthwise match finite differences") {
    Rng rng(29);
    DTensor x = random_tensor({3, 5, 4}, rng);
    DTensor w = random_tensor({2, 3, 3, 3}, rng);
    DTensor b = random_tensor({2}, rng);
    check_grads({x, w, b}, [](DTape&, std::vector<DVar>& v) {
        return mean_all(square(conv2d(v[0], v[1], v[2], 1)));
    });
    DTensor w1 = random_tensor({2, 3, 1, 1}, rng);
    DTensor b1 = random_tensor({2}, rng);
    check_grads({x, w1, b1}, [](DTape&, std::vector<DVar>& v) {
        return mean_all(square(conv2d(v[0], v[1], v[2], 0)));
    });
    DTensor dw = random_tensor({3, 1, 3, 3}, rng);
    DTensor db = random_tensor({3}, rng);
    check_grads({x, dw, db}, [](DTape&, std::vector<DVar>& v) {
        return mean_all(square(dwconv2d(v[0], v[1], v[2], 1)));
    });
}

TEST_CASE("replicate_pad2d and unfold match finite differences") {
    Rng rng(31);
    DTensor x = random_tensor({1, 4, 5}, rng);
    check_grads({x}, [](DTape&, std::vector<DVar>& v) {
        return mean_all(square(replicate_pad2d(v[0], 2)));
    });
    DTensor x2 = random_tensor({2, 6, 6}, rng);
    check_grads({x2}, [](DTape&, std::vector<DVar>& v) {
        return mean_all(square(unfold(v[0], 3, 2)));
    });
}

TEST_CASE("layernorm_chan matches finite differences") {
    Rng rng(37);
    DTensor x = random_tensor({4, 3, 2}, rng);
    DTensor w = random_tensor({4}, rng, 0.5, 1.5);
    DTensor b = random_tensor({4}, rng);
    check_grads({x, w, b}, [](DTape&, std::vector<DVar>& v) {
        return mean_all(square(layernorm_chan(v[0], v[1], v[2])));
    }, 2e-6);
}

TEST_CASE("eager mode computes without recording") {
    DVar a(DTensor({2}, {1.0, 2.0}));
    DVar b(DTensor({2}, {3.0, 4.0}));
    auto c = add(a, b);
    CHECK_FALSE(c.taped());
    CHECK(c.val().data == std::vector<double>{4.0, 6.0});
    auto s = sum_all(mul(c, c));
    CHECK(s.val().data[0] == doctest::Approx(52.0));
}

TEST_CASE("gradients accumulate across reuse") {
    DTape tape;
    auto x = tape.leaf(DTensor({2}, {2.0, 3.0}), true);
    auto y = add(mul(x, x), x);  // x^2 + x -> grad 2x+1
    tape.backward(sum_all(y));
    CHECK(tape.grad_of(x).data[0] == doctest::Approx(5.0));
    CHECK(tape.grad_of(x).data[1] == doctest::Approx(7.0));
}
