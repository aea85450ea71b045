#include <doctest.h>

#include <cmath>

#include "oracles.hpp"
#include "tgfuse/losses.hpp"
#include "tgfuse/rng.hpp"

using namespace tgfuse;

namespace {

Image random_image(int64_t h, int64_t w, uint64_t seed) {
    Image img(h, w, 1);
    Rng rng(seed);
    for (auto& v : img.data) v = static_cast<float>(rng.next_unit());
    return img;
}

Image constant_image(int64_t h, int64_t w, float v) {
    Image img(h, w, 1);
    std::fill(img.data.begin(), img.data.end(), v);
    return img;
}

TensorT<double> to_tensor(const Image& img) {
    TensorT<double> t({1, img.height, img.width});
    for (size_t i = 0; i < img.data.size(); ++i) t.data[i] = img.data[i];
    return t;
}

// Central finite differences of a loss term with respect to the fused image.
template <typename LossFn>
void gradcheck_wrt_fused(const Image& f, const Image& i1, const Image& i2, LossFn loss,
                         double tol = 1e-4) {
    TensorT<double> tf = to_tensor(f), t1 = to_tensor(i1), t2 = to_tensor(i2);
    Tape<double> tape;
    auto vf = tape.leaf(tf, true);
    auto out = loss(vf, t1, t2);
    tape.backward(out);
    const auto& grad = tape.grad_of(vf);
    const double eps = 1e-5;
    for (int64_t i = 0; i < tf.numel(); ++i) {
        auto eval = [&](double delta) {
            TensorT<double> mod = tf;
            mod.data[static_cast<size_t>(i)] += delta;
            return loss(Var<double>(mod), t1, t2).val().data[0];
        };
        double fd = (eval(eps) - eval(-eps)) / (2 * eps);
        double an = grad.data[static_cast<size_t>(i)];
        double err = std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-4});
        CAPTURE(i);
        CAPTURE(fd);
        CAPTURE(an);
        CHECK(err < tol);
    }
}

}  // namespace

TEST_CASE("task configurations carry the published weights") {
    auto ivf = TaskConfig::for_task(FusionTask::IVF);
    CHECK(ivf.alpha1 == 10.0);
    CHECK(ivf.alpha2 == 0.0);
    CHECK(ivf.intensity_mode == IntensityMode::Max);
    CHECK_FALSE(ivf.ssim_enabled);

    auto mff = TaskConfig::for_task(FusionTask::MFF);
    CHECK(mff.alpha1 == 50.0);
    CHECK(mff.alpha2 == 10.0);
    CHECK(mff.intensity_mode == IntensityMode::Mean);

    auto mef = TaskConfig::for_task(FusionTask::MEF);
    CHECK(mef.alpha1 == 100.0);
    CHECK(mef.alpha2 == 1.0);
    CHECK(mef.intensity_mode == IntensityMode::Mean);

    CHECK_THROWS_AS(TaskConfig::for_task(FusionTask::MIF), UnsupportedTaskError);
}

TEST_CASE("intensity loss identities and oracle equivalence") {
    SUBCASE("fused = elementwise max gives exactly zero") {
        Image i1 = random_image(6, 7, 1), i2 = random_image(6, 7, 2);
        Image f(6, 7, 1);
        for (size_t i = 0; i < f.data.size(); ++i) f.data[i] = std::max(i1.data[i], i2.data[i]);
        auto v = intensity_loss(Var<double>(to_tensor(f)), to_tensor(i1), to_tensor(i2),
                                IntensityMode::Max);
        CHECK(v.val().data[0] == 0.0);
    }
    SUBCASE("constant case: f=0.6 gives 0, f=0.4 gives 0.2") {
        Image i1 = constant_image(4, 4, 0.2f), i2 = constant_image(4, 4, 0.6f);
        auto z = intensity_loss(Var<double>(to_tensor(constant_image(4, 4, 0.6f))), to_tensor(i1),
                                to_tensor(i2), IntensityMode::Max);
        CHECK(z.val().data[0] == doctest::Approx(0.0));
        auto v = intensity_loss(Var<double>(to_tensor(constant_image(4, 4, 0.4f))), to_tensor(i1),
                                to_tensor(i2), IntensityMode::Max);
        CHECK(v.val().data[0] == doctest::Approx(0.2).epsilon(1e-7));
    }
    SUBCASE("random 4x4 equals the double-loop oracle within 1e-12") {
        Image f = random_image(4, 4, 3), i1 = random_image(4, 4, 4), i2 = random_image(4, 4, 5);
        for (bool use_max : {true, false}) {
            auto v = intensity_loss(Var<double>(to_tensor(f)), to_tensor(i1), to_tensor(i2),
                                    use_max ? IntensityMode::Max : IntensityMode::Mean);
            CHECK(std::abs(v.val().data[0] - oracle::l_int(f, i1, i2, use_max)) < 1e-12);
        }
    }
    SUBCASE("shape mismatch rejected") {
        Image f = random_image(4, 4, 1), other = random_image(4, 5, 2);
        CHECK_THROWS_AS(intensity_loss(Var<double>(to_tensor(f)), to_tensor(other), to_tensor(f),
                                       IntensityMode::Max),
                        ContractViolation);
    }
}

TEST_CASE("gradient loss identities and oracle equivalence") {
    SUBCASE("constants give exactly zero") {
        Image c1 = constant_image(5, 5, 0.3f), c2 = constant_image(5, 5, 0.8f);
        Image cf = constant_image(5, 5, 0.55f);
        auto v = gradient_loss(Var<double>(to_tensor(cf)), to_tensor(c1), to_tensor(c2));
        CHECK(v.val().data[0] == 0.0);
    }
    SUBCASE("f = i1 with dominant i1 gradients gives exactly zero") {
        Image i1 = random_image(6, 6, 7);
        Image i2 = constant_image(6, 6, 0.5f);  // zero gradients everywhere
        auto v = gradient_loss(Var<double>(to_tensor(i1)), to_tensor(i1), to_tensor(i2));
        CHECK(v.val().data[0] == 0.0);
    }
    SUBCASE("random 4x4 equals the double-loop oracle within 1e-12") {
        Image f = random_image(4, 4, 8), i1 = random_image(4, 4, 9), i2 = random_image(4, 4, 10);
        auto v = gradient_loss(Var<double>(to_tensor(f)), to_tensor(i1), to_tensor(i2));
        CHECK(std::abs(v.val().data[0] - oracle::l_grad(f, i1, i2)) < 1e-12);
    }
}

TEST_CASE("mef-ssim identities and oracle equivalence") {
    SUBCASE("self comparison scores 1") {
        Image img = random_image(16, 16, 11);
        auto v = mef_ssim_score(Var<double>(to_tensor(img)), to_tensor(img), to_tensor(img));
        CHECK(v.val().data[0] == doctest::Approx(1.0).epsilon(1e-9));
        Image flat = constant_image(16, 16, 0.4f);
        auto vf = mef_ssim_score(Var<double>(to_tensor(flat)), to_tensor(flat), to_tensor(flat));
        CHECK(vf.val().data[0] == doctest::Approx(1.0).epsilon(1e-9));
    }
    SUBCASE("score never exceeds 1 (loss nonnegative up to 1e-6)") {
        for (uint64_t s = 0; s < 10; ++s) {
            Image f = random_image(12, 12, 100 + s);
            Image a = random_image(12, 12, 200 + s);
            Image b = random_image(12, 12, 300 + s);
            auto v = mef_ssim_score(Var<double>(to_tensor(f)), to_tensor(a), to_tensor(b));
            CHECK(v.val().data[0] <= 1.0 + 1e-6);
            CHECK(v.val().data[0] >= -1.0 - 1e-6);
        }
    }
    SUBCASE("16x16 synthetic two-exposure pair matches the windowed oracle") {
        // Under- and over-exposed renderings of the same smooth scene.
        Image scene = random_image(16, 16, 12);
        Image under(16, 16, 1), over(16, 16, 1), fused(16, 16, 1);
        for (size_t i = 0; i < scene.data.size(); ++i) {
            under.data[i] = 0.35f * scene.data[i];
            over.data[i] = std::min(1.0f, 0.55f + 0.45f * scene.data[i]);
            fused.data[i] = 0.5f * (under.data[i] + over.data[i]);
        }
        auto v = mef_ssim_score(Var<double>(to_tensor(fused)), to_tensor(under), to_tensor(over));
        CHECK(v.val().data[0] == doctest::Approx(oracle::mef_ssim(fused, under, over)).epsilon(1e-8));
    }
    SUBCASE("undersized images rejected") {
        Image small = random_image(6, 6, 13);
        CHECK_THROWS_AS(
            mef_ssim_score(Var<double>(to_tensor(small)), to_tensor(small), to_tensor(small)),
            ContractViolation);
    }
}

TEST_CASE("total loss composition") {
    SUBCASE("IVF with fused = max of constants is exactly zero") {
        Image i1 = constant_image(8, 8, 0.2f), i2 = constant_image(8, 8, 0.6f);
        Image f = constant_image(8, 8, 0.6f);
        auto [total, bd] = total_loss(Var<double>(to_tensor(f)), to_tensor(i1), to_tensor(i2),
                                      TaskConfig::for_task(FusionTask::IVF));
        CHECK(total.val().data[0] == 0.0);
        CHECK(bd.l_int == 0.0);
        CHECK(bd.l_grad == 0.0);
    }
    SUBCASE("alpha2 = 0 skips the SSIM term entirely") {
        // 4x4 inputs are below the SSIM window size; IVF must still evaluate.
        Image f = random_image(4, 4, 14), i1 = random_image(4, 4, 15), i2 = random_image(4, 4, 16);
        auto [total, bd] = total_loss(Var<double>(to_tensor(f)), to_tensor(i1), to_tensor(i2),
                                      TaskConfig::for_task(FusionTask::IVF));
        CHECK(bd.l_ssim == 0.0);
        CHECK(std::isfinite(total.val().data[0]));
    }
    SUBCASE("MEF total equals the recomposition from term oracles") {
        Image f = random_image(16, 16, 17), i1 = random_image(16, 16, 18),
              i2 = random_image(16, 16, 19);
        auto [total, bd] = total_loss(Var<double>(to_tensor(f)), to_tensor(i1), to_tensor(i2),
                                      TaskConfig::for_task(FusionTask::MEF));
        double expect = oracle::l_int(f, i1, i2, false) + 100.0 * oracle::l_grad(f, i1, i2) +
                        1.0 * (1.0 - oracle::mef_ssim(f, i1, i2));
        CHECK(total.val().data[0] == doctest::Approx(expect).epsilon(1e-10));
        CHECK(bd.total == total.val().data[0]);
        CHECK(bd.l_int + 100.0 * bd.l_grad + bd.l_ssim == doctest::Approx(bd.total).epsilon(1e-12));
    }
    SUBCASE("repeated evaluation is bitwise identical") {
        Image f = random_image(16, 16, 20), i1 = random_image(16, 16, 21),
              i2 = random_image(16, 16, 22);
        auto cfg = TaskConfig::for_task(FusionTask::MFF);
        auto [t1v, b1] = total_loss(Var<double>(to_tensor(f)), to_tensor(i1), to_tensor(i2), cfg);
        auto [t2v, b2] = total_loss(Var<double>(to_tensor(f)), to_tensor(i1), to_tensor(i2), cfg);
        CHECK(t1v.val().data[0] == t2v.val().data[0]);
        CHECK(b1.l_grad == b2.l_grad);
    }
    SUBCASE("all terms nonnegative on random inputs") {
        for (uint64_t s = 0; s < 5; ++s) {
            Image f = random_image(12, 12, 500 + s);
            Image i1 = random_image(12, 12, 600 + s);
            Image i2 = random_image(12, 12, 700 + s);
            auto [total, bd] =
                total_loss(Var<double>(to_tensor(f)), to_tensor(i1), to_tensor(i2),
                           TaskConfig::for_task(FusionTask::MEF));
            CHECK(bd.l_int >= 0.0);
            CHECK(bd.l_grad >= 0.0);
            CHECK(bd.l_ssim >= -1e-6);
            CHECK(total.val().data[0] >= -1e-6);
        }
    }
}

TEST_CASE("loss gradients match central finite differences on 8x8 inputs") {
    Image f = random_image(8, 8, 31), i1 = random_image(8, 8, 32), i2 = random_image(8, 8, 33);

    SUBCASE("intensity, max and mean targets") {
        gradcheck_wrt_fused(f, i1, i2, [](Var<double> vf, const auto& a, const auto& b) {
            return intensity_loss(vf, a, b, IntensityMode::Max);
        });
        gradcheck_wrt_fused(f, i1, i2, [](Var<double> vf, const auto& a, const auto& b) {
            return intensity_loss(vf, a, b, IntensityMode::Mean);
        });
    }
    SUBCASE("gradient term") {
        gradcheck_wrt_fused(f, i1, i2, [](Var<double> vf, const auto& a, const auto& b) {
            return gradient_loss(vf, a, b);
        });
    }
    SUBCASE("mef-ssim term") {
        gradcheck_wrt_fused(f, i1, i2, [](Var<double> vf, const auto& a, const auto& b) {
            return mef_ssim_score(vf, a, b);
        });
    }
    SUBCASE("weighted totals per trainable task") {
        for (FusionTask task : {FusionTask::IVF, FusionTask::MFF, FusionTask::MEF}) {
            auto cfg = TaskConfig::for_task(task);
            gradcheck_wrt_fused(f, i1, i2, [cfg](Var<double> vf, const auto& a, const auto& b) {
                return total_loss(vf, a, b, cfg).first;
            });
        }
    }
}

TEST_CASE("eager image-level breakdown helper") {
    Image f = random_image(16, 16, 41), i1 = random_image(16, 16, 42), i2 = random_image(16, 16, 43);
    auto bd = evaluate_losses(f, i1, i2, TaskConfig::for_task(FusionTask::MEF));
    CHECK(bd.l_int == doctest::Approx(oracle::l_int(f, i1, i2, false)).epsilon(1e-6));
    CHECK(bd.total > 0.0);
}
