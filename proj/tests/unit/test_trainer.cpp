#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <random>
#include <set>

#include "lpsr/trainer.hpp"

using namespace lpsr;
namespace fs = std::filesystem;

namespace {

TrainConfig tiny_config() {
    TrainConfig c;
    c.batch_size = 2;
    c.epochs = 1;
    c.stage1_epochs = 1;
    c.detector_warmup_epochs = 0;
    c.lr_g = 2e-3;
    c.lr_d = 1e-3;
    c.lr_det = 1e-3;
    c.lr_stage2 = 1e-4;
    c.generator.s1_width = 2;
    c.generator.s1_blocks = 1;
    c.generator.s1_up_width = 2;
    c.generator.s2_width = 2;
    c.discriminator.width = 2;
    c.discriminator.blocks = 2;
    c.discriminator.head_hidden = 4;
    c.detector.width = 1;
    c.detector.head_hidden = 4;
    return c;
}

const std::vector<PlateSample>& corpus() {
    static const auto c = generate_corpus(12, 5);
    return c;
}

std::vector<const PlateSample*> batch(std::size_t start, std::size_t n) {
    std::vector<const PlateSample*> out;
    for (std::size_t i = 0; i < n; ++i) out.push_back(&corpus()[(start + i) % corpus().size()]);
    return out;
}

template <typename Scalar>
bool same_params(const ParamSet<Scalar>& a, const ParamSet<Scalar>& b) {
    for (const auto* p : a.items())
        if (!(p->value.array() == b.get(p->name).value.array()).all()) return false;
    return true;
}

template <typename Scalar>
bool same_state(TrainState<Scalar>& a, TrainState<Scalar>& b) {
    return same_params(a.pipeline.g.s1, b.pipeline.g.s1) && same_params(a.pipeline.g.s2, b.pipeline.g.s2) &&
           same_params(a.pipeline.d.params, b.pipeline.d.params) &&
           same_params(a.pipeline.det.params, b.pipeline.det.params) && a.step == b.step &&
           a.g_steps == b.g_steps && a.d_steps == b.d_steps && a.det_steps == b.det_steps;
}

fs::path scratch(const std::string& name) {
    auto dir = fs::temp_directory_path() / ("lpsr_trainer_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

}  // namespace

TEST_CASE("learning-rate schedule") {
    const TrainConfig c;
    CHECK(c.lr_d == 1e-4);
    CHECK(lr_schedule(10, c).d == 1e-4);
    CHECK(lr_schedule(11, c).d == doctest::Approx(1e-5).epsilon(1e-12));
    CHECK(lr_schedule(1, c).g == 2 * lr_schedule(1, c).d);
    CHECK(lr_schedule(11, c).g == doctest::Approx(2e-5).epsilon(1e-12));
    CHECK(lr_schedule(11, c).det == doctest::Approx(1e-5).epsilon(1e-12));
    TrainConfig none = c;
    none.stage1_epochs = 0;
    CHECK(lr_schedule(1, none).d == doctest::Approx(1e-5).epsilon(1e-12));
    CHECK_THROWS_AS(lr_schedule(0, c), DomainError);
}

TEST_CASE("gradient clipping examples") {
    Tensor<double> a({2}), b({1});
    a[0] = 0.3;
    a[1] = 0.0;
    b[0] = 0.4;
    CHECK(clip_gradients(std::vector<Tensor<double>*>{&a, &b}, 1.0) == doctest::Approx(0.5));
    CHECK(a[0] == 0.3);
    CHECK(b[0] == 0.4);

    a[0] = 0.0;
    a[1] = 4.0;
    b[0] = 0.0;
    CHECK(clip_gradients(std::vector<Tensor<double>*>{&a, &b}, 1.0) == doctest::Approx(4.0));
    CHECK(std::abs(a[1] - 1.0) < 1e-9);

    b[0] = std::numeric_limits<double>::infinity();
    CHECK_THROWS_AS(clip_gradients(std::vector<Tensor<double>*>{&a, &b}, 1.0), NumericError);
    CHECK_THROWS_AS(clip_gradients(std::vector<Tensor<double>*>{&a}, 0.0), ConfigError);
}

TEST_CASE("post-clip norm never exceeds the threshold") {
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> u(-10, 10), clip(0.01, 5);
    for (int trial = 0; trial < 200; ++trial) {
        std::vector<Tensor<double>> ts;
        for (int k = 0; k < 1 + trial % 4; ++k) {
            Tensor<double> t({1 + trial % 7});
            for (Index i = 0; i < t.size(); ++i) t[i] = u(rng);
            ts.push_back(std::move(t));
        }
        std::vector<Tensor<double>*> ptrs;
        for (auto& t : ts) ptrs.push_back(&t);
        const double c = clip(rng);
        clip_gradients(ptrs, c);
        double sq = 0;
        for (auto& t : ts) sq += t.array().square().sum();
        CHECK(std::sqrt(sq) <= c + 1e-9);
    }
}

TEST_CASE("update counters follow the generator/discriminator ratio") {
    auto state = init_train_state<float>(tiny_config());
    for (std::size_t s = 0; s < 10; ++s) {
        train_step(state, batch(2 * s, 2));
        CHECK(state.g_steps == 2 * state.d_steps);
    }
    CHECK(state.g_steps == 20);
    CHECK(state.d_steps == 10);
    CHECK(state.det_steps == 10);
    CHECK(state.step == 10);

    TrainConfig warm = tiny_config();
    warm.detector_warmup_epochs = 1;
    auto w = init_train_state<float>(warm);
    const auto row = train_step(w, batch(0, 2));
    CHECK(w.det_steps == 0);
    CHECK_FALSE(row.l_det.has_value());
}

TEST_CASE("identical seeds reproduce loss traces") {
    auto a = init_train_state<float>(tiny_config());
    auto b = init_train_state<float>(tiny_config());
    for (std::size_t s = 0; s < 3; ++s) {
        const auto ra = train_step(a, batch(2 * s, 2));
        const auto rb = train_step(b, batch(2 * s, 2));
        CHECK(std::abs(ra.total_g - rb.total_g) < 1e-6);
        CHECK(std::abs(ra.total_d - rb.total_d) < 1e-6);
        CHECK(std::abs(*ra.l_det - *rb.l_det) < 1e-6);
    }
}

TEST_CASE("checkpoint resume is bit-identical in float64") {
    const auto dir = scratch("resume");
    auto straight = init_train_state<double>(tiny_config());
    auto first = init_train_state<double>(tiny_config());
    for (std::size_t s = 0; s < 2; ++s) {
        train_step(straight, batch(2 * s, 2));
        train_step(first, batch(2 * s, 2));
    }
    save_checkpoint(first, dir / "mid.ckpt");
    auto resumed = load_checkpoint<double>(dir / "mid.ckpt");
    CHECK(same_state(resumed, first));
    CHECK(resumed.history.size() == 2);

    const auto r1 = train_step(straight, batch(4, 2));
    const auto r2 = train_step(resumed, batch(4, 2));
    CHECK(r1.total_g == r2.total_g);
    CHECK(r1.total_d == r2.total_d);
    CHECK(*r1.l_det == *r2.l_det);
    CHECK(same_state(straight, resumed));
}

TEST_CASE("training resumed from an epoch checkpoint matches an uninterrupted run") {
    const auto dir = scratch("resume_epochs");
    std::vector<PlateSample> data(corpus().begin(), corpus().begin() + 8);
    TrainConfig c = tiny_config();
    c.epochs = 2;
    c.holdout_fraction = 0.25;
    c.max_steps_per_epoch = 2;
    const auto full = train<double>(c, data, dir / "a");
    const auto partial_cfg = [&] {
        TrainConfig p = c;
        p.epochs = 1;
        return p;
    }();
    const auto first = train<double>(partial_cfg, data, dir / "b");
    const auto resumed = train<double>(c, data, dir / "c", first.run_dir / "epoch_1.ckpt");
    CHECK(resumed.epochs_completed == 2);
    auto x = load_checkpoint<double>(full.final_checkpoint);
    auto y = load_checkpoint<double>(resumed.final_checkpoint);
    CHECK(same_state(x, y));
    REQUIRE(x.history.size() == y.history.size());
    for (std::size_t i = 0; i < x.history.size(); ++i) CHECK(x.history[i].total_g == y.history[i].total_g);
}

TEST_CASE("a non-finite step leaves the state untouched") {
    auto state = init_train_state<double>(tiny_config());
    train_step(state, batch(0, 2));
    auto before = state;
    PlateSample bad = corpus()[2];
    bad.hr.pixels[0] = std::numeric_limits<float>::quiet_NaN();
    const std::vector<const PlateSample*> b{&bad, &corpus()[3]};
    CHECK_THROWS_AS(train_step(state, b), NumericError);
    CHECK(same_state(state, before));
    CHECK(state.history.size() == before.history.size());
}

TEST_CASE("single-sample overfit drives the pixel loss below 1e-3") {
    TrainConfig c = tiny_config();
    c.generator.s1_width = 32;
    c.generator.s1_up_width = 32;
    c.generator.s2_width = 4;
    c.lr_g = 5e-3;
    c.weights.adv = 0;
    c.weights.clc = 0;
    auto state = init_train_state<float>(c);
    const std::vector<const PlateSample*> one{&corpus()[0]};
    double last = 1;
    for (int step = 0; step < 200; ++step) last = train_step(state, one).l_mse;
    MESSAGE("l_mse after 200 steps: " << last);
    CHECK(last < 1e-3);
}

TEST_CASE("zero epochs writes only the initial checkpoint") {
    const auto dir = scratch("zero");
    TrainConfig c = tiny_config();
    c.epochs = 0;
    c.stage1_epochs = 0;
    std::vector<PlateSample> data(corpus().begin(), corpus().begin() + 4);
    const auto result = train<float>(c, data, dir);
    CHECK(result.epochs_completed == 0);
    CHECK(fs::exists(result.run_dir / "epoch_0.ckpt"));
    CHECK_FALSE(fs::exists(result.run_dir / "epoch_1.ckpt"));
    CHECK(load_checkpoint<float>(result.final_checkpoint).step == 0);
}

TEST_CASE("ablation runs are labelled by the zeroed term") {
    const auto dir = scratch("label");
    TrainConfig c = ablate(tiny_config(), "adv");
    c.epochs = 0;
    c.stage1_epochs = 0;
    std::vector<PlateSample> data(corpus().begin(), corpus().begin() + 4);
    const auto result = train<float>(c, data, dir);
    CHECK(result.run_dir == dir / "wo_adv");
    CHECK(fs::is_directory(dir / "wo_adv"));
    TrainConfig b = tiny_config();
    b.baseline = true;
    CHECK(b.run_label() == "baseline");
    CHECK(tiny_config().run_label() == "full");
}

TEST_CASE("config text round-trips and rejects malformed input") {
    TrainConfig c = tiny_config();
    c.weights.adv = 0.25;
    c.seed = 42;
    const auto back = parse_train_config(format_train_config(c));
    CHECK(format_train_config(back) == format_train_config(c));
    CHECK(back.weights.adv == 0.25);
    CHECK(back.seed == 42);

    try {
        parse_train_config("# comment\nlr_g 3\n");
        FAIL("expected ParseError");
    } catch (const ParseError& e) {
        CHECK(e.line == 2);
    }
    CHECK_THROWS_AS(parse_train_config("no_such_key = 1\n"), ConfigError);
    CHECK_THROWS_AS(parse_train_config("lr_g = fast\n"), ConfigError);
    CHECK_THROWS_AS(parse_train_config("lr_g = -1\n"), ConfigError);
    CHECK_THROWS_AS(parse_train_config("epochs = 2\nstage1_epochs = 3\n"), ConfigError);
}

TEST_CASE("epoch order is a deterministic permutation") {
    const auto a = epoch_order(50, 1, 1);
    CHECK(std::set<std::size_t>(a.begin(), a.end()).size() == 50);
    CHECK(*std::max_element(a.begin(), a.end()) == 49);
    CHECK(a == epoch_order(50, 1, 1));
    CHECK(a != epoch_order(50, 1, 2));
    CHECK(a != epoch_order(50, 2, 1));
    CHECK(epoch_order(0, 1, 1).empty());
}

TEST_CASE("hold-out split takes the trailing fraction") {
    const auto s = split_dataset(corpus(), 0.25);
    CHECK(s.train.size() == 9);
    CHECK(s.holdout.size() == 3);
    CHECK(s.holdout.front() == &corpus()[9]);
    CHECK(split_dataset(corpus(), 0.0).holdout.empty());
    CHECK_THROWS_AS(split_dataset(corpus(), 1.0), ConfigError);
}
