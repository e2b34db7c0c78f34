#pragma once

#include <cstddef>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "fg/dit.hpp"
#include "fg/flow.hpp"
#include "fg/tensor.hpp"

namespace fg::guidance {

/// Sign applied to the text/image cosine. `negative` negates the cosine
/// as written in the selection formula; `positive` uses the plain cosine, which is
/// what the "max similarity exceeds threshold" selection rule expects.
enum class SignMode { negative, positive };

std::string to_string(SignMode m);
SignMode sign_mode_from_string(const std::string& s);

struct GuidanceConfig {
    double tau_sel = 0.2;
    double tau_cache = 0.3;
    double tau_region = 0.5;
    double lambda_txt = 0.1;
    double lambda_lat = 0.1;
    double lambda_cache = 0.1;
    SignMode sign_mode = SignMode::positive;
    std::set<std::size_t> weak_layers;

    void validate() const;
};

nlohmann::json to_json(const GuidanceConfig& c);
GuidanceConfig guidance_config_from_json(const nlohmann::json& j);

// ---------------------------------------------------------------------------
// Fine-grained semantic guidance

/// [M, N] matrix of (signed) cosine similarities between text and image tokens.
Tensor keyword_similarity(const TokenSequence& text, const TokenSequence& image, SignMode sign);

/// Rows whose maximum strictly exceeds tau_sel, ascending.
std::vector<std::size_t> select_keywords(const Tensor& similarity, double tau_sel);

/// sum_n S[k,n] * v_n. A zero weight row gives the zero vector.
std::vector<double> compute_anchor(std::span<const double> weights, const TokenSequence& image);

struct ProjectedPair {
    std::vector<double> text;
    std::vector<double> anchor;
};

/// (P_t t_k, P_v v_anchor) with P_t: [D, D_t], P_v: [D, D_v].
ProjectedPair project_anchor_and_text(std::span<const double> text_token, std::span<const double> anchor,
                                      const Tensor& text_projection, const Tensor& image_projection);

/// V_text + lambda * V_vis.
std::vector<double> fuse_text_value(std::span<const double> text_value, std::span<const double> visual_value,
                                    double lambda);

struct Cell {
    std::size_t y = 0;
    std::size_t x = 0;
    auto operator<=>(const Cell&) const = default;
};

/// Cells of one keyword with their normalized similarity weights (max 1).
struct Region {
    std::vector<Cell> cells;
    std::vector<double> weights;
};

/// Resamples a similarity row laid out on a [src_h, src_w] token grid onto a
/// [dst_h, dst_w] latent grid by nearest cell. Identity when the grids match.
Tensor similarity_row_to_grid(std::span<const double> row, std::size_t src_h, std::size_t src_w, std::size_t dst_h,
                              std::size_t dst_w);

/// Min-max normalizes the [H, W] map, keeps cells strictly above tau_region and
/// max-normalizes their weights. Returns nullopt for an empty region.
std::optional<Region> extract_region(const Tensor& grid_similarity, double tau_region);

struct LatentInjection {
    const Region* region;
    std::span<const double> value;  // V_k^vis, length = channel width of the grid
};

/// grid[u,v] += lambda * w_k(u,v) * V_k for every (u,v) in R_k, keywords in the
/// given (ascending) order. `grid` is [H, W, C]. lambda == 0 leaves it untouched.
void inject_latent(Tensor& grid, const std::vector<LatentInjection>& injections, double lambda);

// ---------------------------------------------------------------------------
// Attention cache

/// cos(V_k, z(f,u,v)) for features [F*H*W, D]; returns [F, H, W]. Zero-norm
/// feature cells map to 0.
Tensor layer_similarity(std::span<const double> keyword_value, const Tensor& features, std::size_t frames,
                        std::size_t height, std::size_t width);

struct AttentionCache {
    Tensor maps;                 // [K, F, H, W]
    std::vector<double> alpha;   // per layer; 0 for weak layers
};

/// Weighted sum of per-layer [K, F, H, W] maps with alpha = 1/(L - m) on the
/// L - m responsive layers. Maps of weak layers are ignored and may be empty.
AttentionCache aggregate_cache(const std::vector<Tensor>& layer_maps, const std::set<std::size_t>& weak,
                               std::size_t layers);

/// Zeroes every value <= tau.
Tensor threshold_cache(const Tensor& map, double tau);

/// z(p) += lambda * A_k(p) * V_k summed over keywords in ascending order, for
/// features z of shape [F*H*W, D] and a thresholded cache [K, F, H, W].
/// Throws ConfigError when `layer` is not in `weak`.
void apply_cache(Tensor& features, std::size_t layer, const std::set<std::size_t>& weak, const Tensor& cache,
                 const std::vector<std::vector<double>>& visual_values, double lambda);

// ---------------------------------------------------------------------------
// Driver

struct KeywordAnchor {
    std::size_t keyword = 0;                 // text token index
    std::vector<double> text_embedding;      // t_k
    std::vector<double> anchor;              // v_anchor,k
    std::vector<double> similarity;          // S_k over image tokens
    Region region;
    std::vector<double> projected_text;      // P_t t_k
    std::vector<double> projected_anchor;    // P_v v_anchor,k
};

struct GuidancePlan {
    std::vector<KeywordAnchor> anchors;
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<std::string> warnings;
};

/// Keyword selection, anchors and regions for one conditioning. The image
/// tokens are assumed to form a [image_h, image_w] grid (default: the latent grid).
GuidancePlan prepare_plan(const dit::Dit& model, const dit::Conditioning& cond, std::size_t height,
                          std::size_t width, const GuidanceConfig& config, std::size_t image_h = 0,
                          std::size_t image_w = 0);

/// Which mechanisms run.
struct Switches {
    bool fsg = true;
    bool cache = true;

    static Switches off() { return {false, false}; }
    bool any() const { return fsg || cache; }
};

struct Counters {
    std::size_t forwards = 0;
    std::size_t value_fusions = 0;
    std::size_t latent_injections = 0;
    std::size_t cache_builds = 0;
    std::size_t cache_applications = 0;
};

/// DiT wrapper applying focal guidance on the configured weak layers.
///
/// With the cache enabled, each call runs two passes: the first (FSG only,
/// hooks on) captures every layer's keyword/visual similarity, the second
/// re-runs with the thresholded cache injected into the weak layers. The
/// cache is therefore rebuilt at every timestep.
class GuidedModel {
public:
    GuidedModel(const dit::Dit& model, dit::Conditioning cond, GuidanceConfig config, Switches switches);

    dit::ForwardResult forward(const LatentVideo& z_t, double t, bool hooks = false);
    flow::VelocityFn velocity_fn();

    /// Single-pass FSG edits for training (no cache). Valid while this object lives
    /// and the model parameters are unchanged.
    dit::Interventions training_interventions();

    /// Value vector V_k^vis of each keyword anchor at `layer`.
    std::vector<std::vector<double>> visual_values(std::size_t layer) const;

    /// Per-layer [K, F, H, W] keyword/visual similarity maps from hooked states.
    std::vector<Tensor> similarity_maps(const std::vector<dit::LayerState>& states) const;

    const GuidancePlan& plan() const noexcept { return plan_; }
    const Counters& counters() const noexcept { return counters_; }
    const GuidanceConfig& config() const noexcept { return config_; }
    const dit::Conditioning& conditioning() const noexcept { return cond_; }

private:
    dit::Interventions interventions(const Tensor* cache);

    const dit::Dit& model_;
    dit::Conditioning cond_;
    GuidanceConfig config_;
    Switches switches_;
    GuidancePlan plan_;
    std::vector<std::vector<std::vector<double>>> visual_values_;  // [layer][keyword]
    std::size_t frames_ = 0;
    Counters counters_;
};

}  // namespace fg::guidance
