#include "fg/focal_guidance.hpp"

#include <algorithm>
#include <cmath>

#include "fg/error.hpp"

namespace fg::guidance {

std::string to_string(SignMode m) { return m == SignMode::positive ? "positive" : "negative"; }

SignMode sign_mode_from_string(const std::string& s) {
    if (s == "positive") return SignMode::positive;
    if (s == "negative") return SignMode::negative;
    throw ConfigError("unknown sign mode '" + s + "'");
}

void GuidanceConfig::validate() const {
    for (double v : {tau_sel, tau_cache, tau_region})
        if (std::isnan(v)) throw ConfigError("guidance thresholds must not be NaN");
    for (double v : {lambda_txt, lambda_lat, lambda_cache})
        if (!std::isfinite(v) || v < 0.0) throw ConfigError("guidance strengths must be finite and >= 0");
}

nlohmann::json to_json(const GuidanceConfig& c) {
    return {{"tau_sel", c.tau_sel},
            {"tau_cache", c.tau_cache},
            {"tau_region", c.tau_region},
            {"lambda_txt", c.lambda_txt},
            {"lambda_lat", c.lambda_lat},
            {"lambda_cache", c.lambda_cache},
            {"sign_mode", to_string(c.sign_mode)},
            {"weak_layers", c.weak_layers}};
}

GuidanceConfig guidance_config_from_json(const nlohmann::json& j) {
    GuidanceConfig c;
    c.tau_sel = j.value("tau_sel", c.tau_sel);
    c.tau_cache = j.value("tau_cache", c.tau_cache);
    c.tau_region = j.value("tau_region", c.tau_region);
    c.lambda_txt = j.value("lambda_txt", c.lambda_txt);
    c.lambda_lat = j.value("lambda_lat", c.lambda_lat);
    c.lambda_cache = j.value("lambda_cache", c.lambda_cache);
    c.sign_mode = sign_mode_from_string(j.value("sign_mode", to_string(c.sign_mode)));
    if (j.contains("weak_layers")) c.weak_layers = j.at("weak_layers").get<std::set<std::size_t>>();
    c.validate();
    return c;
}

// ---------------------------------------------------------------------------

Tensor keyword_similarity(const TokenSequence& text, const TokenSequence& image, SignMode sign) {
    text.validate();
    image.validate();
    if (text.dim() != image.dim())
        throw ConfigError("keyword_similarity: text dim " + std::to_string(text.dim()) + " != image dim " +
                          std::to_string(image.dim()));
    const double s = sign == SignMode::negative ? -1.0 : 1.0;
    Tensor out({text.size(), image.size()});
    for (std::size_t m = 0; m < text.size(); ++m)
        for (std::size_t n = 0; n < image.size(); ++n)
            out.at({m, n}) = s * cosine_similarity(text.token(m), image.token(n));
    return out;
}

std::vector<std::size_t> select_keywords(const Tensor& similarity, double tau_sel) {
    if (similarity.rank() != 2) throw ConfigError("select_keywords expects an [M,N] matrix");
    if (!similarity.all_finite()) throw NumericError("select_keywords: non-finite similarity");
    std::vector<std::size_t> out;
    for (std::size_t m = 0; m < similarity.extent(0); ++m) {
        const auto row = similarity.slice(m);
        if (*std::max_element(row.begin(), row.end()) > tau_sel) out.push_back(m);
    }
    return out;
}

std::vector<double> compute_anchor(std::span<const double> weights, const TokenSequence& image) {
    if (weights.size() != image.size()) throw ConfigError("compute_anchor: one weight per image token required");
    std::vector<double> anchor(image.dim(), 0.0);
    for (std::size_t n = 0; n < image.size(); ++n) axpy(weights[n], image.token(n), anchor);
    return anchor;
}

namespace {

std::vector<double> matvec(const Tensor& w, std::span<const double> x) {
    if (w.rank() != 2 || w.extent(1) != x.size()) throw ConfigError("projection dimension mismatch");
    std::vector<double> y(w.extent(0), 0.0);
    for (std::size_t o = 0; o < y.size(); ++o) y[o] = dot(w.slice(o), x);
    return y;
}

}  // namespace

ProjectedPair project_anchor_and_text(std::span<const double> text_token, std::span<const double> anchor,
                                      const Tensor& text_projection, const Tensor& image_projection) {
    return {matvec(text_projection, text_token), matvec(image_projection, anchor)};
}

std::vector<double> fuse_text_value(std::span<const double> text_value, std::span<const double> visual_value,
                                    double lambda) {
    if (text_value.size() != visual_value.size()) throw ConfigError("fuse_text_value: dimension mismatch");
    std::vector<double> out(text_value.begin(), text_value.end());
    if (lambda != 0.0) axpy(lambda, visual_value, out);
    return out;
}

Tensor similarity_row_to_grid(std::span<const double> row, std::size_t src_h, std::size_t src_w, std::size_t dst_h,
                              std::size_t dst_w) {
    if (row.size() != src_h * src_w) throw ConfigError("similarity row does not match its token grid");
    Tensor out({dst_h, dst_w});
    for (std::size_t y = 0; y < dst_h; ++y) {
        const std::size_t sy = std::min(src_h - 1, (2 * y + 1) * src_h / (2 * dst_h));
        for (std::size_t x = 0; x < dst_w; ++x) {
            const std::size_t sx = std::min(src_w - 1, (2 * x + 1) * src_w / (2 * dst_w));
            out.at({y, x}) = row[sy * src_w + sx];
        }
    }
    return out;
}

std::optional<Region> extract_region(const Tensor& grid_similarity, double tau_region) {
    if (grid_similarity.rank() != 2) throw ConfigError("extract_region expects an [H,W] map");
    const Tensor norm = minmax_normalize(grid_similarity, 2);
    Region r;
    double peak = 0.0;
    for (std::size_t y = 0; y < norm.extent(0); ++y)
        for (std::size_t x = 0; x < norm.extent(1); ++x) {
            const double v = norm.at({y, x});
            if (v > tau_region) {
                r.cells.push_back({y, x});
                r.weights.push_back(v);
                peak = std::max(peak, v);
            }
        }
    if (r.cells.empty() || !(peak > 0.0)) return std::nullopt;
    for (auto& w : r.weights) w /= peak;
    return r;
}

void inject_latent(Tensor& grid, const std::vector<LatentInjection>& injections, double lambda) {
    if (grid.rank() != 3) throw ConfigError("inject_latent expects an [H,W,C] grid");
    if (lambda == 0.0) return;
    const std::size_t h = grid.extent(0);
    const std::size_t w = grid.extent(1);
    const std::size_t c = grid.extent(2);
    for (const auto& inj : injections) {
        if (inj.value.size() != c) throw ConfigError("inject_latent: anchor value width != latent channel width");
        const Region& r = *inj.region;
        for (std::size_t i = 0; i < r.cells.size(); ++i) {
            const Cell cell = r.cells[i];
            if (cell.y >= h || cell.x >= w) throw ConfigError("inject_latent: region cell outside the grid");
            axpy(lambda * r.weights[i], inj.value, grid.data().subspan((cell.y * w + cell.x) * c, c));
        }
    }
}

// ---------------------------------------------------------------------------

Tensor layer_similarity(std::span<const double> keyword_value, const Tensor& features, std::size_t frames,
                        std::size_t height, std::size_t width) {
    if (features.rank() != 2 || features.extent(0) != frames * height * width)
        throw ConfigError("layer_similarity: features must be [F*H*W, D]");
    if (features.extent(1) != keyword_value.size())
        throw ConfigError("layer_similarity: feature width != keyword value width");
    Tensor out({frames, height, width});
    const double vn = norm(keyword_value);
    for (std::size_t p = 0; p < features.extent(0); ++p) {
        const auto z = features.slice(p);
        const double zn = norm(z);
        out[p] = (vn > 0.0 && zn > 0.0) ? std::clamp(dot(keyword_value, z) / (vn * zn), -1.0, 1.0) : 0.0;
    }
    return out;
}

AttentionCache aggregate_cache(const std::vector<Tensor>& layer_maps, const std::set<std::size_t>& weak,
                               std::size_t layers) {
    if (layer_maps.size() != layers) throw ConfigError("aggregate_cache: one map per layer required");
    std::size_t m = 0;
    for (auto l : weak) {
        if (l >= layers) throw ConfigError("aggregate_cache: weak layer index out of range");
        ++m;
    }
    if (m >= layers) throw ConfigError("no semantically responsive layers");

    AttentionCache cache;
    cache.alpha.assign(layers, 0.0);
    const double a = 1.0 / static_cast<double>(layers - m);
    for (std::size_t l = 0; l < layers; ++l) {
        if (weak.count(l)) continue;
        cache.alpha[l] = a;
        const Tensor& map = layer_maps[l];
        if (cache.maps.empty()) {
            cache.maps = Tensor(map.shape());
        } else if (map.shape() != cache.maps.shape()) {
            throw ConfigError("aggregate_cache: layer maps differ in shape");
        }
        axpy(a, map.data(), cache.maps.data());
    }
    return cache;
}

Tensor threshold_cache(const Tensor& map, double tau) {
    if (!map.all_finite()) throw NumericError("threshold_cache: non-finite map");
    Tensor out = map;
    for (auto& v : out.data())
        if (!(v > tau)) v = 0.0;
    return out;
}

void apply_cache(Tensor& features, std::size_t layer, const std::set<std::size_t>& weak, const Tensor& cache,
                 const std::vector<std::vector<double>>& visual_values, double lambda) {
    if (!weak.count(layer))
        throw ConfigError("apply_cache: layer " + std::to_string(layer) + " is not a semantic-weak layer");
    if (cache.rank() != 4 || features.rank() != 2) throw ConfigError("apply_cache: expects [K,F,H,W] cache and [P,D] features");
    const std::size_t k_count = cache.extent(0);
    const std::size_t p = cache.size() / k_count;
    if (features.extent(0) != p) throw ConfigError("apply_cache: cache grid does not match the features");
    if (visual_values.size() != k_count) throw ConfigError("apply_cache: one visual value per keyword required");
    const std::size_t d = features.extent(1);
    for (const auto& v : visual_values)
        if (v.size() != d) throw ConfigError("apply_cache: visual value width != feature width");
    if (lambda == 0.0) return;
    for (std::size_t k = 0; k < k_count; ++k) {
        const auto a = cache.slice(k);
        for (std::size_t i = 0; i < p; ++i) {
            if (a[i] == 0.0) continue;
            axpy(lambda * a[i], visual_values[k], features.slice(i));
        }
    }
}

// ---------------------------------------------------------------------------

GuidancePlan prepare_plan(const dit::Dit& model, const dit::Conditioning& cond, std::size_t height,
                          std::size_t width, const GuidanceConfig& config, std::size_t image_h, std::size_t image_w) {
    config.validate();
    if (image_h == 0 || image_w == 0) {
        image_h = height;
        image_w = width;
    }
    if (image_h * image_w != cond.image.size())
        throw ConfigError("image tokens (" + std::to_string(cond.image.size()) + ") do not form a " +
                          std::to_string(image_h) + "x" + std::to_string(image_w) + " grid");
    GuidancePlan plan;
    plan.height = height;
    plan.width = width;
    const Tensor s = keyword_similarity(cond.text, cond.image, config.sign_mode);
    for (std::size_t k : select_keywords(s, config.tau_sel)) {
        KeywordAnchor a;
        a.keyword = k;
        const auto row = s.slice(k);
        a.similarity.assign(row.begin(), row.end());
        const auto t = cond.text.token(k);
        a.text_embedding.assign(t.begin(), t.end());
        a.anchor = compute_anchor(a.similarity, cond.image);
        if (norm(a.anchor) == 0.0) plan.warnings.push_back("keyword " + std::to_string(k) + ": degenerate anchor");
        auto region = extract_region(similarity_row_to_grid(row, image_h, image_w, height, width), config.tau_region);
        if (!region) {
            plan.warnings.push_back("keyword " + std::to_string(k) + ": empty region, dropped");
            continue;
        }
        a.region = std::move(*region);
        auto proj = project_anchor_and_text(a.text_embedding, a.anchor, model.params().at("text_proj.weight"),
                                            model.params().at("image_proj.weight"));
        a.projected_text = std::move(proj.text);
        a.projected_anchor = std::move(proj.anchor);
        plan.anchors.push_back(std::move(a));
    }
    return plan;
}

GuidedModel::GuidedModel(const dit::Dit& model, dit::Conditioning cond, GuidanceConfig config, Switches switches)
    : model_(model), cond_(std::move(cond)), config_(std::move(config)), switches_(switches) {
    config_.validate();
    for (auto l : config_.weak_layers)
        if (l >= model_.config().layers) throw ConfigError("weak layer " + std::to_string(l) + " out of range");
    frames_ = cond_.reference.frames();
    plan_ = prepare_plan(model_, cond_, cond_.reference.height(), cond_.reference.width(), config_);
    visual_values_.resize(model_.config().layers);
    for (auto l : config_.weak_layers) visual_values_[l] = visual_values(l);
}

std::vector<std::vector<double>> GuidedModel::visual_values(std::size_t layer) const {
    std::vector<std::vector<double>> out;
    out.reserve(plan_.anchors.size());
    for (const auto& a : plan_.anchors) out.push_back(model_.token_value(layer, a.projected_anchor));
    return out;
}

std::vector<Tensor> GuidedModel::similarity_maps(const std::vector<dit::LayerState>& states) const {
    const std::size_t k_count = plan_.anchors.size();
    const std::size_t h = plan_.height;
    const std::size_t w = plan_.width;
    std::vector<Tensor> maps(model_.config().layers);
    for (const auto& st : states) {
        if (config_.weak_layers.count(st.layer)) continue;
        Tensor m({k_count, frames_, h, w});
        for (std::size_t k = 0; k < k_count; ++k) {
            const Tensor a = layer_similarity(st.text_values.slice(plan_.anchors[k].keyword), st.visual, frames_, h, w);
            std::copy(a.data().begin(), a.data().end(), m.slice(k).begin());
        }
        maps[st.layer] = std::move(m);
    }
    return maps;
}

dit::Interventions GuidedModel::interventions(const Tensor* cache) {
    dit::Interventions iv;
    const auto& weak = config_.weak_layers;
    if (switches_.fsg && config_.lambda_txt != 0.0) {
        iv.on_values = [this, &weak](std::size_t layer, Tensor& values) {
            if (!weak.count(layer)) return;
            for (std::size_t k = 0; k < plan_.anchors.size(); ++k) {
                auto row = values.slice(plan_.anchors[k].keyword);
                const auto fused = fuse_text_value(row, visual_values_[layer][k], config_.lambda_txt);
                std::copy(fused.begin(), fused.end(), row.begin());
                ++counters_.value_fusions;
            }
        };
    }
    const bool inject = switches_.fsg && config_.lambda_lat != 0.0;
    if (inject || cache) {
        iv.on_hidden = [this, &weak, inject, cache](std::size_t layer, Tensor& hidden) {
            if (!weak.count(layer)) return;
            const auto& values = visual_values_[layer];
            if (inject) {
                // Reference frame = the first H*W visual tokens.
                const std::size_t d = hidden.extent(1);
                const std::size_t cells = plan_.height * plan_.width;
                Tensor grid({plan_.height, plan_.width, d});
                std::copy(hidden.data().begin(), hidden.data().begin() + static_cast<std::ptrdiff_t>(cells * d),
                          grid.data().begin());
                std::vector<LatentInjection> injections;
                for (std::size_t k = 0; k < plan_.anchors.size(); ++k)
                    injections.push_back({&plan_.anchors[k].region, values[k]});
                inject_latent(grid, injections, config_.lambda_lat);
                std::copy(grid.data().begin(), grid.data().end(), hidden.data().begin());
                ++counters_.latent_injections;
            }
            if (cache) {
                apply_cache(hidden, layer, weak, *cache, values, config_.lambda_cache);
                ++counters_.cache_applications;
            }
        };
    }
    return iv;
}

dit::ForwardResult GuidedModel::forward(const LatentVideo& z_t, double t, bool hooks) {
    ++counters_.forwards;
    dit::ForwardOptions opt;
    opt.hooks = hooks;
    if (!switches_.any() || plan_.anchors.empty() || config_.weak_layers.empty())
        return model_.forward(z_t, t, cond_, opt);

    const dit::Interventions fsg = interventions(nullptr);
    opt.interventions = &fsg;
    if (!switches_.cache) return model_.forward(z_t, t, cond_, opt);

    dit::ForwardOptions first = opt;
    first.hooks = true;
    const auto captured = model_.forward(z_t, t, cond_, first);
    const AttentionCache cache =
        aggregate_cache(similarity_maps(captured.states), config_.weak_layers, model_.config().layers);
    ++counters_.cache_builds;
    const Tensor thresholded = threshold_cache(cache.maps, config_.tau_cache);
    const dit::Interventions full = interventions(&thresholded);
    opt.interventions = &full;
    return model_.forward(z_t, t, cond_, opt);
}

dit::Interventions GuidedModel::training_interventions() {
    if (!switches_.fsg || plan_.anchors.empty()) return {};
    return interventions(nullptr);
}

flow::VelocityFn GuidedModel::velocity_fn() {
    return [this](const LatentVideo& z, double t) { return forward(z, t).velocity; };
}

}  // namespace fg::guidance
