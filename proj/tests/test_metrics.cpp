#include <doctest.h>

#include <cmath>

#include "oracles.hpp"
#include "tgfuse/metrics.hpp"
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

Image quantized(Image img) {
    for (auto& v : img.data) v = static_cast<float>(std::nearbyint(v * 255.0) / 255.0);
    return img;
}

}  // namespace

TEST_CASE("entropy") {
    CHECK(metric_en(constant_image(8, 8, 0.3f)) == 0.0);

    // 4x4 image with 8 pixels at bin 0 and 8 at bin 255: two equal bins -> 1 bit.
    Image two(4, 4, 1);
    for (int i = 0; i < 16; ++i) two.data[static_cast<size_t>(i)] = i < 8 ? 0.0f : 1.0f;
    CHECK(metric_en(two) == doctest::Approx(1.0).epsilon(1e-12));

    // Equal counts in all 256 bins -> 8 bits.
    Image uniform(16, 16, 1);
    for (int i = 0; i < 256; ++i)
        uniform.data[static_cast<size_t>(i)] = static_cast<float>(i) / 255.0f;
    CHECK(metric_en(uniform) == doctest::Approx(8.0).epsilon(1e-12));
}

TEST_CASE("standard deviation") {
    CHECK(metric_sd(constant_image(5, 9, 0.77f)) == doctest::Approx(0.0).epsilon(1e-9));

    Image two(4, 4, 1);
    for (int i = 0; i < 16; ++i) two.data[static_cast<size_t>(i)] = i < 8 ? 0.0f : 1.0f;
    CHECK(metric_sd(two) == doctest::Approx(127.5).epsilon(1e-9));
}

TEST_CASE("spatial frequency") {
    CHECK(metric_sf(constant_image(6, 6, 0.2f)) == 0.0);

    // Single column: only vertical differences contribute.
    Image col(4, 1, 1);
    for (int i = 0; i < 4; ++i) col.data[static_cast<size_t>(i)] = static_cast<float>(i % 2);
    double cf = metric_sf(col);
    CHECK(cf == doctest::Approx(255.0).epsilon(1e-9));  // alternating 0/255

    // 0/255 checkerboard: every first difference is +-255.
    Image cb(4, 4, 1);
    for (int64_t y = 0; y < 4; ++y)
        for (int64_t x = 0; x < 4; ++x) cb.at(0, y, x) = static_cast<float>((x + y) % 2);
    CHECK(metric_sf(cb) == doctest::Approx(std::sqrt(2.0) * 255.0).epsilon(1e-9));
}

TEST_CASE("average gradient") {
    CHECK(metric_ag(constant_image(7, 7, 0.9f)) == 0.0);

    // Horizontal ramp with step 1 on the 8-bit scale.
    Image ramp(5, 6, 1);
    for (int64_t y = 0; y < 5; ++y)
        for (int64_t x = 0; x < 6; ++x) ramp.at(0, y, x) = static_cast<float>(x) / 255.0f;
    CHECK(metric_ag(ramp) == doctest::Approx(std::sqrt(0.5)).epsilon(1e-6));
}

TEST_CASE("vif") {
    Image a = quantized(random_image(32, 32, 5));
    SUBCASE("self fidelity is 1") {
        CHECK(metric_vif(a, a, a) == doctest::Approx(1.0).epsilon(1e-6));
    }
    SUBCASE("blur strictly loses information") {
        Image blurred(32, 32, 1);
        for (int64_t y = 0; y < 32; ++y)
            for (int64_t x = 0; x < 32; ++x) {
                double acc = 0;
                int n = 0;
                for (int dy = -2; dy <= 2; ++dy)
                    for (int dx = -2; dx <= 2; ++dx) {
                        int64_t sy = std::clamp<int64_t>(y + dy, 0, 31);
                        int64_t sx = std::clamp<int64_t>(x + dx, 0, 31);
                        acc += a.at(0, sy, sx);
                        ++n;
                    }
                blurred.at(0, y, x) = static_cast<float>(acc / n);
            }
        CHECK(metric_vif(blurred, a, a) < 1.0);
    }
    SUBCASE("undersized input rejected") {
        Image small = random_image(16, 16, 6);
        CHECK_THROWS_AS(metric_vif(small, small, small), ContractViolation);
    }
}

TEST_CASE("qabf") {
    Image a = quantized(random_image(16, 16, 7));
    Image b = quantized(random_image(16, 16, 8));
    SUBCASE("self fusion scores high, constant fused scores near zero") {
        double self_score = metric_qabf(a, a, a);
        CHECK(self_score == doctest::Approx(oracle::qabf(a, a, a)).epsilon(1e-9));
        CHECK(self_score > 0.9);
        double flat = metric_qabf(constant_image(16, 16, 0.5f), a, b);
        CHECK(flat < 0.02);
    }
    SUBCASE("degenerate constant sources report 0") {
        Image c = constant_image(16, 16, 0.25f);
        CHECK(metric_qabf(a, c, c) == 0.0);
    }
    SUBCASE("bounded in [0,1] and symmetric under source swap") {
        for (uint64_t s = 0; s < 10; ++s) {
            Image f = quantized(random_image(12, 12, 900 + s));
            Image x = quantized(random_image(12, 12, 910 + s));
            Image y = quantized(random_image(12, 12, 920 + s));
            double v = metric_qabf(f, x, y);
            CHECK(v >= 0.0);
            CHECK(v <= 1.0);
            CHECK(std::abs(v - metric_qabf(f, y, x)) < 1e-12);
        }
    }
}

TEST_CASE("metrics equal their double-loop oracles on random instances") {
    for (uint64_t s = 0; s < 20; ++s) {
        Image f = quantized(random_image(16, 16, 1000 + s));
        Image a = quantized(random_image(16, 16, 2000 + s));
        Image b = quantized(random_image(16, 16, 3000 + s));
        CHECK(std::abs(metric_en(f) - oracle::en(f)) < 1e-8);
        CHECK(std::abs(metric_sd(f) - oracle::sd(f)) < 1e-8);
        CHECK(std::abs(metric_sf(f) - oracle::sf(f)) < 1e-8);
        CHECK(std::abs(metric_ag(f) - oracle::ag(f)) < 1e-8);
        CHECK(std::abs(metric_qabf(f, a, b) - oracle::qabf(f, a, b)) < 1e-8);
    }
    for (uint64_t s = 0; s < 5; ++s) {
        Image f = quantized(random_image(32, 32, 4000 + s));
        Image a = quantized(random_image(32, 32, 5000 + s));
        Image b = quantized(random_image(32, 32, 6000 + s));
        CHECK(std::abs(metric_vif(f, a, b) - oracle::vif(f, a, b)) < 1e-8);
        CHECK(std::abs(metric_vif(f, a, b) - metric_vif(f, b, a)) < 1e-12);
    }
}

TEST_CASE("metrics are pure functions of content") {
    Image f = quantized(random_image(32, 32, 77));
    // Append a replicated row, then crop back: identical content, identical metrics.
    Image padded(33, 32, 1);
    for (int64_t y = 0; y < 33; ++y)
        for (int64_t x = 0; x < 32; ++x) padded.at(0, y, x) = f.at(0, std::min<int64_t>(y, 31), x);
    Image cropped(32, 32, 1);
    for (int64_t y = 0; y < 32; ++y)
        for (int64_t x = 0; x < 32; ++x) cropped.at(0, y, x) = padded.at(0, y, x);
    CHECK(metric_en(cropped) == metric_en(f));
    CHECK(metric_sd(cropped) == metric_sd(f));
    CHECK(metric_sf(cropped) == metric_sf(f));
    CHECK(metric_ag(cropped) == metric_ag(f));
}

TEST_CASE("report aggregation and table output") {
    Image f = quantized(random_image(32, 32, 88));
    Image a = quantized(random_image(32, 32, 89));
    Image b = quantized(random_image(32, 32, 90));
    auto r = metric_report(f, a, b, "pair_0");
    CHECK(std::isfinite(r.en));
    CHECK(std::isfinite(r.qabf));

    auto mean = mean_report({r, r, r});
    CHECK(mean.en == doctest::Approx(r.en));
    CHECK(mean.qabf == doctest::Approx(r.qabf));

    auto table = metrics_table_text({r, r});
    CHECK(table.find("EN") != std::string::npos);
    // Header preserves the published column order.
    CHECK(table.find("EN") < table.find("SD"));
    CHECK(table.find("SD") < table.find("SF"));
    CHECK(table.find("SF") < table.find("AG"));
    CHECK(table.find("AG") < table.find("VIF"));
    CHECK(table.find("VIF") < table.find("Qabf"));
    CHECK(table.find("mean") != std::string::npos);

    auto csv = metrics_table_csv({r});
    CHECK(csv.rfind("pair,EN,SD,SF,AG,VIF,Qabf", 0) == 0);
    auto j = metric_report_json(r);
    CHECK(j.find("\"Qabf\"") != std::string::npos);
}
