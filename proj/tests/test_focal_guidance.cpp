#include <doctest.h>

#include <cmath>
#include <limits>

#include "fg/error.hpp"
#include "fg/focal_guidance.hpp"
#include "fg/rng.hpp"
#include "fg/synth.hpp"
#include "oracles.hpp"

using namespace fg;
using namespace fg::guidance;

namespace {

std::vector<double> randvec(std::size_t n, Rng& rng) {
    std::vector<double> v(n);
    for (auto& x : v) x = rng.normal();
    return v;
}

double dot_oracle(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

double cos_oracle(std::span<const double> a, std::span<const double> b) {
    return dot_oracle(a, b) / std::sqrt(dot_oracle(a, a) * dot_oracle(b, b));
}

TokenSequence tokens(Modality m, const std::vector<std::vector<double>>& rows) {
    TokenSequence t(m, rows.front().size());
    for (const auto& r : rows) t.push_back(r);
    return t;
}

synth::RenderedScene demo_scene() {
    synth::SceneSpec spec;
    spec.blocks.push_back({"A", 1, 1, 3, 3, 0, 1, synth::one_hot(8, 1)});
    spec.blocks.push_back({"B", 5, 4, 2, 2, 1, 0, synth::one_hot(8, 2)});
    return synth::render_scene(synth::scene_from_json(synth::to_json(spec)), 5);
}

dit::DitConfig demo_config() {
    dit::DitConfig c;
    c.layers = 4;
    c.hidden = 16;
    c.heads = 2;
    c.seed = 3;
    return c;
}

LatentVideo noise_like(const LatentVideo& v, std::uint64_t seed) {
    Rng rng(seed);
    LatentVideo out = v;
    for (auto& x : out.tensor().data()) x = rng.normal();
    return out;
}

}  // namespace

TEST_CASE("keyword similarity under both sign modes") {
    const std::vector<double> a{1, 2, 3}, b{-3, 0, 1};
    const auto text = tokens(Modality::text, {a, b});
    const auto image = tokens(Modality::image, {a, b});
    const auto neg = keyword_similarity(text, image, SignMode::negative);
    const auto pos = keyword_similarity(text, image, SignMode::positive);
    CHECK(neg.at({0, 0}) == doctest::Approx(-1.0).epsilon(1e-15));
    CHECK(pos.at({0, 0}) == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(neg.at({0, 1}) == 0.0);
    CHECK(pos.at({0, 1}) == 0.0);

    Rng rng(4);
    std::vector<std::vector<double>> t, v;
    for (int i = 0; i < 4; ++i) t.push_back(randvec(5, rng));
    for (int i = 0; i < 6; ++i) v.push_back(randvec(5, rng));
    const auto s = keyword_similarity(tokens(Modality::text, t), tokens(Modality::image, v), SignMode::positive);
    REQUIRE(s.shape() == Shape{4, 6});
    for (std::size_t m = 0; m < 4; ++m)
        for (std::size_t n = 0; n < 6; ++n) CHECK(std::abs(s.at({m, n}) - cos_oracle(t[m], v[n])) < 1e-12);

    CHECK_THROWS_AS(keyword_similarity(tokens(Modality::text, {{0, 0, 0}}), image, SignMode::positive), NumericError);
    CHECK_THROWS_AS(keyword_similarity(tokens(Modality::text, {{1, 0}}), image, SignMode::positive), ConfigError);
    CHECK(sign_mode_from_string(to_string(SignMode::negative)) == SignMode::negative);
}

TEST_CASE("keyword selection") {
    const Tensor s({3, 2}, {0.2, 0.1, 0.6, -0.3, 0.4, 0.0});
    CHECK(select_keywords(s, 0.5) == std::vector<std::size_t>{1});
    CHECK(select_keywords(s, std::numeric_limits<double>::infinity()).empty());
    CHECK(select_keywords(s, -0.31) == std::vector<std::size_t>{0, 1, 2});
    CHECK(select_keywords(s, 0.6).empty());
}

TEST_CASE("anchors and projections") {
    const auto image = tokens(Modality::image, {{1, 2}, {3, 5}, {-1, 4}});
    CHECK(compute_anchor(std::vector<double>{0, 1, 0}, image) == std::vector<double>{3, 5});
    CHECK(compute_anchor(std::vector<double>{0, 0, 0}, image) == std::vector<double>{0, 0});
    const auto mean = compute_anchor(std::vector<double>(3, 1.0 / 3.0), image);
    CHECK(mean[0] == doctest::Approx(1.0));
    CHECK(mean[1] == doctest::Approx(11.0 / 3.0));
    CHECK_THROWS_AS(compute_anchor(std::vector<double>{1, 0}, image), ConfigError);

    const Tensor eye({2, 2}, {1, 0, 0, 1});
    const std::vector<double> t{0.5, -2.0}, v{3.0, 4.0};
    const auto id = project_anchor_and_text(t, v, eye, Tensor({2, 2}));
    CHECK(id.text == t);
    CHECK(id.anchor == std::vector<double>{0, 0});

    Rng rng(8);
    Tensor pt({4, 3}), pv({4, 2});
    for (auto& x : pt.data()) x = rng.normal();
    for (auto& x : pv.data()) x = rng.normal();
    const std::vector<double> t3{0.1, 0.7, -1.2};
    const auto r = project_anchor_and_text(t3, v, pt, pv);
    for (std::size_t d = 0; d < 4; ++d) {
        CHECK(r.text[d] == doctest::Approx(dot_oracle(pt.slice(d), t3)).epsilon(1e-14));
        CHECK(r.anchor[d] == doctest::Approx(dot_oracle(pv.slice(d), v)).epsilon(1e-14));
    }
    CHECK_THROWS_AS(project_anchor_and_text(t, v, pt, pv), ConfigError);
}

TEST_CASE("value fusion") {
    const std::vector<double> text{1.5, -2.0, 0.25}, vis{0.5, 1.0, -4.0};
    CHECK(fuse_text_value(text, vis, 0.0) == text);
    const std::vector<double> neg{-1.5, 2.0, -0.25};
    for (double v : fuse_text_value(text, neg, 1.0)) CHECK(v == 0.0);
    CHECK(fuse_text_value(text, vis, 2.0) == std::vector<double>{2.5, 0.0, -7.75});
}

TEST_CASE("fusion leaves the host layer's attention logits untouched") {
    for (auto mode : {dit::ConditioningMode::cross_attention, dit::ConditioningMode::token_concat}) {
        auto cfg = demo_config();
        cfg.mode = mode;
        const dit::Dit model(cfg);
        const auto scene = demo_scene();
        const auto cond = scene.conditioning();
        const auto z = noise_like(scene.latent, 1);

        for (std::size_t host = 0; host < cfg.layers; ++host) {
            GuidanceConfig gc;
            gc.lambda_txt = 5.0;
            gc.lambda_lat = 0.0;
            gc.weak_layers = {host};
            GuidedModel fused(model, cond, gc, {true, false});
            REQUIRE_FALSE(fused.plan().anchors.empty());
            const auto on = fused.forward(z, 0.4, true);
            dit::ForwardOptions hooked;
            hooked.hooks = true;
            const auto off = model.forward(z, 0.4, cond, hooked);
            CHECK(fused.counters().value_fusions == fused.plan().anchors.size());
            CHECK(bit_equal(on.states[host].logits, off.states[host].logits));
            CHECK_FALSE(bit_equal(on.states[host].text_values, off.states[host].text_values));
        }
    }
}

TEST_CASE("region extraction") {
    Rng rng(12);
    const Tensor flat({2, 3}, {0.9, 0.8, 0.95, 0.85, 0.99, 0.7});
    const auto all = extract_region(flat, -0.1);
    REQUIRE(all);
    CHECK(all->cells.size() == 6);

    Tensor spike({3, 3});
    spike.at({1, 2}) = 1.0;
    const auto one = extract_region(spike, 0.5);
    REQUIRE(one);
    CHECK(one->cells == std::vector<Cell>{{1, 2}});
    CHECK(one->weights == std::vector<double>{1.0});

    CHECK_FALSE(extract_region(Tensor({3, 3}, 0.4), 0.5));
    CHECK_FALSE(extract_region(spike, 1.0));

    for (int trial = 0; trial < 50; ++trial) {
        Tensor m({5, 4});
        for (auto& x : m.data()) x = rng.normal();
        const double tau = rng.uniform(0.0, 0.9);
        double lo = m[0], hi = m[0];
        for (double x : m.data()) lo = std::min(lo, x), hi = std::max(hi, x);
        std::vector<Cell> cells;
        std::vector<double> weights;
        double peak = 0.0;
        for (std::size_t y = 0; y < 5; ++y)
            for (std::size_t x = 0; x < 4; ++x) {
                const double n = (m.at({y, x}) - lo) / (hi - lo);
                if (n > tau) {
                    cells.push_back({y, x});
                    weights.push_back(n);
                    peak = std::max(peak, n);
                }
            }
        const auto r = extract_region(m, tau);
        REQUIRE(r);
        CHECK(r->cells == cells);
        for (std::size_t i = 0; i < cells.size(); ++i) CHECK(r->weights[i] == doctest::Approx(weights[i] / peak));
    }
}

TEST_CASE("similarity rows resample by nearest cell") {
    const std::vector<double> row{1, 2, 3, 4};
    const auto same = similarity_row_to_grid(row, 2, 2, 2, 2);
    CHECK(same.values() == row);
    const auto up = similarity_row_to_grid(row, 2, 2, 4, 4);
    CHECK(up.at({0, 0}) == 1);
    CHECK(up.at({1, 1}) == 1);
    CHECK(up.at({0, 3}) == 2);
    CHECK(up.at({3, 0}) == 3);
    CHECK(up.at({2, 2}) == 4);
    CHECK_THROWS_AS(similarity_row_to_grid(row, 3, 2, 2, 2), ConfigError);
}

TEST_CASE("latent injection") {
    Rng rng(5);
    Tensor grid({3, 3, 2});
    for (auto& x : grid.data()) x = rng.normal();
    const Tensor before = grid;
    const Region r{{{0, 1}, {2, 2}}, {1.0, 0.5}};
    const std::vector<double> v{1.0, -3.0};

    inject_latent(grid, {{&r, v}}, 0.0);
    CHECK(bit_equal(grid, before));

    inject_latent(grid, {{&r, v}}, 0.7);
    for (std::size_t y = 0; y < 3; ++y)
        for (std::size_t x = 0; x < 3; ++x) {
            const bool inside = (y == 0 && x == 1) || (y == 2 && x == 2);
            for (std::size_t c = 0; c < 2; ++c)
                CHECK((grid.at({y, x, c}) == before.at({y, x, c})) == !inside);
        }

    Tensor single({2, 2, 2});
    single.at({1, 0, 0}) = 0.25;
    const Region cell{{{1, 0}}, {1.0}};
    inject_latent(single, {{&cell, v}}, 2.0);
    CHECK(single.at({1, 0, 0}) == 0.25 + 2.0 * 1.0);
    CHECK(single.at({1, 0, 1}) == 0.0 + 2.0 * -3.0);

    const Region outside{{{3, 0}}, {1.0}};
    CHECK_THROWS_AS(inject_latent(single, {{&outside, v}}, 1.0), ConfigError);
    const std::vector<double> wide{1, 2, 3};
    CHECK_THROWS_AS(inject_latent(single, {{&cell, wide}}, 1.0), ConfigError);
}

TEST_CASE("layer similarity") {
    const std::vector<double> v{1.0, 2.0, -1.0};
    Tensor same({4, 3});
    for (std::size_t p = 0; p < 4; ++p) std::copy(v.begin(), v.end(), same.slice(p).begin());
    const auto ones = layer_similarity(v, same, 1, 2, 2);
    for (double x : ones.data()) CHECK(x == doctest::Approx(1.0).epsilon(1e-15));

    Tensor ortho({4, 3});
    for (std::size_t p = 0; p < 4; ++p) ortho.at({p, 0}) = 1.0, ortho.at({p, 2}) = 1.0;
    const auto zeros = layer_similarity(v, ortho, 1, 2, 2);
    for (double x : zeros.data()) CHECK(x == 0.0);

    Rng rng(6);
    Tensor feats({2 * 3 * 2, 3});
    for (auto& x : feats.data()) x = rng.normal();
    for (std::size_t c = 0; c < 3; ++c) feats.at({5, c}) = 0.0;
    const auto map = layer_similarity(v, feats, 2, 3, 2);
    REQUIRE(map.shape() == Shape{2, 3, 2});
    for (std::size_t p = 0; p < 12; ++p) {
        const double expected = p == 5 ? 0.0 : cos_oracle(v, feats.slice(p));
        CHECK(std::abs(map[p] - expected) < 1e-12);
    }
    CHECK_THROWS_AS(layer_similarity(v, feats, 2, 2, 2), ConfigError);
}

TEST_CASE("cache aggregation") {
    Rng rng(9);
    Tensor m({1, 1, 2, 2});
    for (auto& x : m.data()) x = rng.normal();
    const auto same = aggregate_cache({m, m, m, m}, {0}, 4);
    for (std::size_t i = 0; i < m.size(); ++i) CHECK(same.maps[i] == doctest::Approx(m[i]).epsilon(1e-15));

    const auto c = aggregate_cache({Tensor(), Tensor(), m, m}, {0, 1}, 4);
    CHECK(c.alpha == std::vector<double>{0, 0, 0.5, 0.5});

    std::vector<Tensor> maps;
    for (int l = 0; l < 5; ++l) {
        Tensor t({2, 1, 3, 3});
        for (auto& x : t.data()) x = rng.normal();
        maps.push_back(t);
    }
    const std::set<std::size_t> weak{1, 3};
    const auto r = aggregate_cache(maps, weak, 5);
    double alpha_sum = 0.0;
    for (std::size_t l = 0; l < 5; ++l) {
        CHECK(r.alpha[l] >= 0.0);
        CHECK((r.alpha[l] == 0.0) == (weak.count(l) == 1));
        alpha_sum += r.alpha[l];
    }
    CHECK(alpha_sum == doctest::Approx(1.0).epsilon(1e-15));
    for (std::size_t i = 0; i < maps[0].size(); ++i) {
        const double expected = (maps[0][i] + maps[2][i] + maps[4][i]) / 3.0;
        CHECK(std::abs(r.maps[i] - expected) < 1e-12);
    }

    try {
        aggregate_cache(maps, {0, 1, 2, 3, 4}, 5);
        FAIL("expected an error");
    } catch (const ConfigError& e) {
        CHECK(std::string(e.what()).find("no semantically responsive layers") != std::string::npos);
    }
}

TEST_CASE("cache thresholding") {
    const Tensor m({2}, {0.3, 0.6});
    CHECK(threshold_cache(m, 0.5).values() == std::vector<double>{0.0, 0.6});
    CHECK(bit_equal(threshold_cache(m, -std::numeric_limits<double>::infinity()), m));
    CHECK(threshold_cache(Tensor({1}, {0.5}), 0.5).values() == std::vector<double>{0.0});
    Rng rng(10);
    Tensor r({50});
    for (auto& x : r.data()) x = rng.normal();
    const auto once = threshold_cache(r, 0.1);
    CHECK(bit_equal(threshold_cache(once, 0.1), once));
}

TEST_CASE("cache application") {
    Rng rng(11);
    const std::set<std::size_t> weak{2};
    Tensor z({4, 3});
    for (auto& x : z.data()) x = rng.normal();
    const Tensor before = z;
    Tensor cache({1, 1, 2, 2}, {0.0, 0.8, 0.0, 0.4});
    const std::vector<std::vector<double>> values{{1.0, 0.5, -1.0}};

    apply_cache(z, 2, weak, cache, values, 0.0);
    CHECK(bit_equal(z, before));
    apply_cache(z, 2, weak, cache, values, 0.3);
    for (std::size_t c = 0; c < 3; ++c) {
        CHECK(z.at({0, c}) == before.at({0, c}));
        CHECK(z.at({2, c}) == before.at({2, c}));
        CHECK(z.at({1, c}) == before.at({1, c}) + 0.3 * 0.8 * values[0][c]);
    }
    CHECK_THROWS_AS(apply_cache(z, 1, weak, cache, values, 0.3), ConfigError);
    CHECK_THROWS_AS(apply_cache(z, 2, weak, Tensor({1, 1, 3, 2}), values, 0.3), ConfigError);
}

TEST_CASE("cache application raises alignment at supported cells") {
    Rng rng(12);
    const std::set<std::size_t> weak{0};
    int checked = 0;
    for (int trial = 0; trial < 1000; ++trial) {
        const auto v = randvec(6, rng);
        Tensor z({1, 6}, randvec(6, rng));
        const double a = rng.uniform(0.05, 1.0);
        const double before = cos_oracle(z.slice(0), v);
        if (std::abs(before) > 1.0 - 1e-9) continue;
        apply_cache(z, 0, weak, Tensor({1, 1, 1, 1}, {a}), {v}, 1e-3);
        CHECK(cos_oracle(z.slice(0), v) > before);
        ++checked;
    }
    CHECK(checked >= 990);
}

TEST_CASE("config json and validation") {
    GuidanceConfig c;
    c.weak_layers = {1, 3};
    c.sign_mode = SignMode::negative;
    c.lambda_cache = 0.25;
    const auto back = guidance_config_from_json(to_json(c));
    CHECK(back.weak_layers == c.weak_layers);
    CHECK(back.sign_mode == SignMode::negative);
    CHECK(back.lambda_cache == 0.25);
    c.lambda_txt = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = GuidanceConfig{};
    c.lambda_lat = -1.0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("plan recovers the synthetic keyword regions") {
    const dit::Dit model(demo_config());
    const auto scene = demo_scene();
    GuidanceConfig gc;
    const auto plan = prepare_plan(model, scene.conditioning(), 8, 8, gc);
    REQUIRE(plan.anchors.size() == 2);
    for (std::size_t b = 0; b < 2; ++b) {
        const auto& a = plan.anchors[b];
        CHECK(a.keyword == scene.keyword_tokens[b]);
        CHECK(synth::ground_truth_region_iou(a.region.cells, scene.regions[b]) >= 0.8);
        CHECK(a.projected_text.size() == 16);
        CHECK(a.projected_anchor.size() == 16);
    }

    gc.tau_sel = 2.0;
    CHECK(prepare_plan(model, scene.conditioning(), 8, 8, gc).anchors.empty());
}

TEST_CASE("guided model disables cleanly") {
    const dit::Dit model(demo_config());
    const auto scene = demo_scene();
    const auto cond = scene.conditioning();
    const auto z = noise_like(scene.latent, 2);
    const auto base = model.forward(z, 0.3, cond);

    GuidanceConfig zero;
    zero.lambda_txt = zero.lambda_lat = zero.lambda_cache = 0.0;
    zero.weak_layers = {0, 1};
    GuidedModel quiet(model, cond, zero, {});
    CHECK(bit_equal(quiet.forward(z, 0.3).velocity.tensor(), base.velocity.tensor()));

    GuidanceConfig gc;
    gc.weak_layers = {0, 1};
    GuidedModel off(model, cond, gc, Switches::off());
    CHECK(bit_equal(off.forward(z, 0.3).velocity.tensor(), base.velocity.tensor()));
    CHECK(off.counters().cache_builds == 0);

    GuidedModel full(model, cond, gc, {});
    const auto guided = full.forward(z, 0.3);
    CHECK_FALSE(bit_equal(guided.velocity.tensor(), base.velocity.tensor()));
    CHECK(full.counters().cache_builds == 1);
    CHECK(full.counters().cache_applications == 2);
    CHECK(full.counters().value_fusions == 8);
    CHECK(full.counters().latent_injections == 4);

    GuidedModel fsg(model, cond, gc, {true, false});
    fsg.forward(z, 0.3);
    CHECK(fsg.counters().cache_applications == 0);
    CHECK(fsg.counters().cache_builds == 0);

    GuidedModel twice(model, cond, gc, {});
    CHECK(bit_equal(twice.forward(z, 0.3).velocity.tensor(), guided.velocity.tensor()));

    gc.weak_layers = {0, 1, 2, 3};
    GuidedModel all_weak(model, cond, gc, {});
    CHECK_THROWS_AS(all_weak.forward(z, 0.3), ConfigError);
    gc.weak_layers = {7};
    CHECK_THROWS_AS(GuidedModel(model, cond, gc, {}), ConfigError);
}
