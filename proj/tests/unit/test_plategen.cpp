#include "doctest.h"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>

#include "lpsr/alphabet.hpp"
#include "lpsr/errors.hpp"
#include "lpsr/plategen.hpp"

using namespace lpsr;
namespace fs = std::filesystem;

namespace {

PlateSpec simple_spec(std::vector<int> chars, double tilt = 0.0) {
    PlateSpec s;
    s.chars = std::move(chars);
    s.tilt_deg = tilt;
    s.seed = 42;
    return s;
}

fs::path scratch_dir(const std::string& name) {
    auto dir = fs::temp_directory_path() / ("lpsr_plategen_" + name);
    fs::remove_all(dir);
    return dir;
}

double rect_iou(const PlateLayout::Rect& a, const PlateLayout::Rect& b) {
    const double iw = std::max(0.0, std::min(a.x1, b.x1) - std::max(a.x0, b.x0));
    const double ih = std::max(0.0, std::min(a.y1, b.y1) - std::max(a.y0, b.y0));
    const double inter = iw * ih;
    const double area = (a.x1 - a.x0) * (a.y1 - a.y0) + (b.x1 - b.x0) * (b.y1 - b.y0);
    return inter / (area - inter);
}

}  // namespace

TEST_CASE("alphabet has 66 symbols with stable ids") {
    std::set<std::string> seen;
    for (int c = 0; c < kNumClasses; ++c) {
        seen.insert(symbol(c));
        CHECK(class_of(symbol(c)) == c);
        const Glyph& g = glyph(c);
        CHECK(g.width > 0);
        CHECK(std::count(g.ink.begin(), g.ink.end(), 1) > 0);
    }
    CHECK(seen.size() == 66);
    CHECK(symbol(0) == "0");
    CHECK(symbol(kFirstLatin) == "A");
    CHECK_THROWS_AS(symbol(66), InvalidSpecError);
    CHECK_THROWS_AS(class_of("?"), InvalidSpecError);
}

TEST_CASE("spec validation") {
    CHECK_NOTHROW(simple_spec({1, 2, 3, 4}).validate());
    CHECK_THROWS_AS(simple_spec({1, 2, 3}).validate(), InvalidSpecError);
    CHECK_THROWS_AS(simple_spec({1, 2, 3, 4, 5, 6, 7, 8, 9}).validate(), InvalidSpecError);
    CHECK_THROWS_AS(simple_spec({1, 2, 3, 66}).validate(), InvalidSpecError);
    CHECK_THROWS_AS(simple_spec({1, 2, 3, 4}, 30.5).validate(), InvalidSpecError);
    auto s = simple_spec({1, 2, 3, 4});
    s.noise_sigma = -0.1;
    CHECK_THROWS_AS(s.validate(), InvalidSpecError);
    s.noise_sigma = 0;
    s.blur_sigma = -1;
    CHECK_THROWS_AS(s.validate(), InvalidSpecError);
    CHECK_THROWS_AS(render_plate(simple_spec({1, 2, 3, -1})), InvalidSpecError);
}

TEST_CASE("render_plate count, range and determinism") {
    const auto spec = simple_spec({3, 1, 4, 1, 5, 9, 2});
    const auto [img, ann] = render_plate(spec);
    CHECK(ann.count == 7);
    CHECK(ann.boxes.size() == 7);
    CHECK(img.height() == kPlateHeight);
    CHECK(img.width() == kPlateWidth);
    CHECK(img.pixels.array().minCoeff() >= 0.0f);
    CHECK(img.pixels.array().maxCoeff() <= 1.0f);
    const auto [img2, ann2] = render_plate(spec);
    CHECK((img.pixels.array() == img2.pixels.array()).all());
    for (std::size_t i = 0; i < ann.boxes.size(); ++i) CHECK(ann.boxes[i].class_id == spec.chars[i]);
}

TEST_CASE("untilted plates share one row centre") {
    const auto [img, ann] = render_plate(simple_spec({10, 11, 12, 40, 41, 0, 1, 2}));
    const double pixel = 1.0 / kPlateHeight;
    for (const auto& b : ann.boxes) CHECK(std::abs(b.cy - ann.boxes.front().cy) <= pixel);
    for (std::size_t i = 1; i < ann.boxes.size(); ++i) CHECK(ann.boxes[i].cx > ann.boxes[i - 1].cx);
}

TEST_CASE("boxes stay inside the unit square for extreme tilts") {
    for (double tilt : {-30.0, -17.5, 0.0, 12.0, 30.0}) {
        const auto [img, ann] = render_plate(simple_spec({0, 1, 2, 3, 4, 5, 6, 7}, tilt));
        CHECK_NOTHROW(ann.validate());
        for (const auto& b : ann.boxes) {
            CHECK(b.cx - b.w / 2 >= -1e-12);
            CHECK(b.cx + b.w / 2 <= 1 + 1e-12);
            CHECK(b.cy - b.h / 2 >= -1e-12);
            CHECK(b.cy + b.h / 2 <= 1 + 1e-12);
        }
    }
}

TEST_CASE("inverse tilt maps boxes back to a left-to-right tiling") {
    std::mt19937_64 rng(11);
    for (int trial = 0; trial < 200; ++trial) {
        const PlateSpec spec = sample_plate_spec(rng());
        const PlateLayout layout = plate_layout(spec);
        const auto [img, ann] = render_plate(spec);
        REQUIRE(layout.glyph_rects.size() == ann.boxes.size());
        for (std::size_t i = 0; i < ann.boxes.size(); ++i) {
            const auto& b = ann.boxes[i];
            double ux = 0, uy = 0;
            layout.transform.inverse(b.cx * kPlateWidth, b.cy * kPlateHeight, ux, uy);
            const auto& r = layout.glyph_rects[i];
            CHECK(ux == doctest::Approx((r.x0 + r.x1) / 2).epsilon(1e-9));
            CHECK(uy == doctest::Approx((r.y0 + r.y1) / 2).epsilon(1e-9));
            if (i > 0) {
                const auto& prev = layout.glyph_rects[i - 1];
                CHECK((prev.x0 + prev.x1) / 2 < (r.x0 + r.x1) / 2);
                CHECK(rect_iou(prev, r) <= 0.1);
            }
        }
    }
}

TEST_CASE("tilt transform forward and inverse agree") {
    const PlateLayout layout = plate_layout(simple_spec({1, 2, 3, 4, 5}, 23.0));
    double x = 0, y = 0, bx = 0, by = 0;
    layout.transform.forward(17.0, 41.0, x, y);
    layout.transform.inverse(x, y, bx, by);
    CHECK(bx == doctest::Approx(17.0).epsilon(1e-12));
    CHECK(by == doctest::Approx(41.0).epsilon(1e-12));
}

TEST_CASE("degrade shape and identity cases") {
    const auto [hr, ann] = render_plate(simple_spec({5, 6, 7, 8}, 10.0));
    const PlateImage lr = degrade(hr, 4, 0.8, 0.01, 3);
    CHECK(lr.width() == 32);
    CHECK(lr.height() == 16);
    CHECK(lr.pixels.array().minCoeff() >= 0.0f);
    CHECK(lr.pixels.array().maxCoeff() <= 1.0f);

    const PlateImage same = degrade(hr, 1, 0.0, 0.0, 3);
    CHECK((same.pixels.array() == hr.pixels.array()).all());

    const PlateImage flat(64, 128, 0.37f);
    const PlateImage blurred = degrade(flat, 1, 1.5, 0.0, 0);
    CHECK((blurred.pixels.array() - 0.37f).abs().maxCoeff() < 1e-6f);

    for (int f : {2, 8}) {
        const PlateImage d = degrade(hr, f, 0.0, 0.0, 0);
        CHECK(d.width() == 128 / f);
        CHECK(d.height() == 64 / f);
    }
    CHECK_THROWS_AS(degrade(hr, 3, 0.0, 0.0, 0), ShapeError);
    CHECK_THROWS_AS(degrade(hr, 0, 0.0, 0.0, 0), ShapeError);
}

TEST_CASE("area downsample of an unblurred image averages blocks") {
    PlateImage hr(8, 8);
    for (Index i = 0; i < hr.pixels.size(); ++i) hr.pixels[i] = static_cast<float>(i % 7) / 7.0f;
    const PlateImage lr = degrade(hr, 4, 0.0, 0.0, 0);
    for (Index y = 0; y < 2; ++y)
        for (Index x = 0; x < 2; ++x)
            for (Index c = 0; c < 3; ++c) {
                double sum = 0;
                for (Index dy = 0; dy < 4; ++dy)
                    for (Index dx = 0; dx < 4; ++dx) sum += hr.pixels[((y * 4 + dy) * 8 + (x * 4 + dx)) * 3 + c];
                CHECK(lr.pixels[(y * 2 + x) * 3 + c] == doctest::Approx(sum / 16).epsilon(1e-6));
            }
}

TEST_CASE("corpus generation is order independent") {
    const auto corpus = generate_corpus(12, 99);
    for (std::uint64_t i : {11u, 3u, 7u, 0u}) {
        const PlateSample s = generate_sample(99, i);
        CHECK(s.id == corpus[i].id);
        CHECK(s.spec.chars == corpus[i].spec.chars);
        CHECK((s.hr.pixels.array() == corpus[i].hr.pixels.array()).all());
        CHECK((s.lr.pixels.array() == corpus[i].lr.pixels.array()).all());
    }
    CHECK(sample_seed(99, 1) != sample_seed(99, 2));
    CHECK(sample_seed(99, 1) != sample_seed(98, 1));
}

TEST_CASE("sampled specs respect the corpus distribution bounds") {
    std::array<int, kMaxChars + 1> lengths{};
    for (std::uint64_t i = 0; i < 2000; ++i) {
        const PlateSpec s = sample_plate_spec(sample_seed(5, i), 12.0);
        CHECK_NOTHROW(s.validate());
        CHECK(std::abs(s.tilt_deg) <= 12.0);
        ++lengths[s.chars.size()];
    }
    for (int n = kMinChars; n <= kMaxChars; ++n) CHECK(lengths[static_cast<std::size_t>(n)] > 250);
}

TEST_CASE("dataset roundtrip") {
    const auto dir = scratch_dir("roundtrip");
    const auto corpus = generate_corpus(10, 7);
    write_dataset(corpus, dir);
    CHECK(fs::exists(dir / "manifest.jsonl"));
    CHECK(fs::exists(dir / "images" / (corpus[0].id + "_hr.png")));
    CHECK(fs::exists(dir / "images" / (corpus[0].id + "_lr.png")));
    const auto back = read_dataset(dir);
    REQUIRE(back.size() == corpus.size());
    for (std::size_t i = 0; i < corpus.size(); ++i) {
        CHECK(back[i].id == corpus[i].id);
        CHECK(back[i].annotation.count == corpus[i].annotation.count);
        REQUIRE(back[i].annotation.boxes.size() == corpus[i].annotation.boxes.size());
        for (std::size_t b = 0; b < corpus[i].annotation.boxes.size(); ++b) {
            const auto& x = corpus[i].annotation.boxes[b];
            const auto& y = back[i].annotation.boxes[b];
            CHECK(x.class_id == y.class_id);
            CHECK(std::abs(x.cx - y.cx) < 1e-6);
            CHECK(std::abs(x.cy - y.cy) < 1e-6);
            CHECK(std::abs(x.w - y.w) < 1e-6);
            CHECK(std::abs(x.h - y.h) < 1e-6);
        }
        CHECK(back[i].spec.chars == corpus[i].spec.chars);
        CHECK(back[i].spec.seed == corpus[i].spec.seed);
        CHECK(back[i].spec.plate_style == corpus[i].spec.plate_style);
        // 8-bit PNG quantisation.
        CHECK((back[i].hr.pixels.array() - corpus[i].hr.pixels.array()).abs().maxCoeff() <= 0.5f / 255.0f + 1e-6f);
        CHECK((back[i].lr.pixels.array() - corpus[i].lr.pixels.array()).abs().maxCoeff() <= 0.5f / 255.0f + 1e-6f);
    }
    fs::remove_all(dir);
}

TEST_CASE("dataset reader edge cases") {
    const auto empty = scratch_dir("empty");
    fs::create_directories(empty);
    CHECK(read_dataset(empty).empty());
    CHECK_THROWS_AS(read_dataset(scratch_dir("missing")), IoError);

    const auto dir = scratch_dir("broken");
    write_dataset(generate_corpus(3, 1), dir);
    std::vector<std::string> lines;
    {
        std::ifstream in(dir / "manifest.jsonl");
        for (std::string l; std::getline(in, l);) lines.push_back(l);
    }
    REQUIRE(lines.size() == 3);

    {
        std::ofstream out(dir / "manifest.jsonl");
        out << lines[0] << '\n' << "{not json\n" << lines[2] << '\n';
    }
    try {
        read_dataset(dir);
        FAIL("expected a parse error");
    } catch (const ParseError& e) {
        CHECK(e.line == 2);
    }

    {
        auto bad = lines[1];
        const auto pos = bad.find("\"count\":");
        REQUIRE(pos != std::string::npos);
        const auto end = bad.find_first_of(",}", pos);
        bad = bad.substr(0, pos) + "\"count\":99" + bad.substr(end);
        std::ofstream out(dir / "manifest.jsonl");
        out << lines[0] << '\n' << bad << '\n' << lines[2] << '\n';
    }
    CHECK_THROWS_AS(read_dataset(dir), ValidationError);
    fs::remove_all(dir);
    fs::remove_all(empty);
}

TEST_CASE("bicubic upsampling preserves constants and grows by the factor") {
    const PlateImage flat(16, 32, 0.6f);
    const PlateImage up = bicubic_upsample(flat, 4);
    CHECK(up.width() == 128);
    CHECK(up.height() == 64);
    CHECK((up.pixels.array() - 0.6f).abs().maxCoeff() < 1e-6f);

    const auto s = generate_sample(0, 4);
    const PlateImage big = bicubic_upsample(s.lr, 4);
    CHECK(big.pixels.array().minCoeff() >= 0.0f);
    CHECK(big.pixels.array().maxCoeff() <= 1.0f);
}

TEST_CASE("batch conversion roundtrip") {
    const auto corpus = generate_corpus(3, 2);
    const auto batch = to_batch<double>({&corpus[0].hr, &corpus[1].hr, &corpus[2].hr});
    CHECK(batch.shape() == Shape{3, 64, 128, 3});
    const PlateImage back = from_batch(batch, 1);
    CHECK((back.pixels.array() == corpus[1].hr.pixels.array()).all());
}
