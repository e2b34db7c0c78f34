#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fg/diagnostics.hpp"
#include "fg/dit.hpp"
#include "fg/focal_guidance.hpp"
#include "fg/synth.hpp"

namespace fg::cli {

namespace fs = std::filesystem;

struct SceneData {
    std::string id;
    synth::SceneSpec spec;
    LatentVideo latent;
    dit::Conditioning cond;
};

/// Writes one synthesized scene under <root>/scenes/<id>/.
void save_scene(const fs::path& root, const std::string& id, const synth::SceneSpec& spec,
                const synth::RenderedScene& scene);

/// All scenes under <root>/scenes, in id order. `only` selects one id.
std::vector<SceneData> load_scenes(const fs::path& root, const std::string& only = "");

struct ModelOptions {
    std::string config_file;
    std::string checkpoint;
    std::optional<std::size_t> layers;
    std::optional<std::size_t> hidden;
    std::string mode;
};

/// Loads the checkpoint when given, else initializes a model sized for the scene channels.
dit::Dit make_model(const ModelOptions& o, std::size_t channels, std::uint64_t seed);

struct GuidanceOptions {
    std::string fg = "on";
    bool fsg_only = false;
    bool ac_only = false;
    std::string config_file;
    std::string weak_rule;
    std::string profile_file;
    std::optional<double> lambda;
    std::optional<double> lambda_txt, lambda_lat, lambda_cache;
    std::optional<double> tau_sel, tau_cache, tau_region;
    std::string sign_mode;
};

guidance::GuidanceConfig make_guidance_config(const GuidanceOptions& o);
guidance::Switches make_switches(const GuidanceOptions& o);

/// `count` step indices spread evenly over [0, steps).
std::set<std::size_t> evenly_spaced(std::size_t steps, std::size_t count);

/// Per-keyword [F, H, W] cosine maps of one layer state.
std::vector<Tensor> keyword_maps(const dit::LayerState& state, const std::vector<std::size_t>& keywords,
                                 std::size_t frames, std::size_t height, std::size_t width);

struct ProfileResult {
    std::vector<std::size_t> keywords;
    std::vector<diagnostics::HeatmapRow> rows;
    std::vector<diagnostics::LayerProfile> profiles;
    std::vector<std::pair<std::string, Tensor>> maps;  // file stem, [F,H,W] map
};

/// Unguided Euler sampling with every layer hooked at the sampled steps.
ProfileResult profile_layers(const dit::Dit& model, const SceneData& scene, const guidance::GuidanceConfig& g,
                             std::size_t steps, std::size_t sampled_steps, std::uint64_t seed, bool keep_maps);

/// Resolves the weak set of a rule. Fraction rules profile `scene` when no profile file is given.
std::set<std::size_t> resolve_weak_layers(const std::string& rule_text, const std::string& profile_file,
                                          const dit::Dit& model, const SceneData& scene,
                                          const guidance::GuidanceConfig& g, std::size_t steps,
                                          std::uint64_t seed);

/// Initial noise of scene `index` for a run seeded with `seed`.
LatentVideo scene_noise(const SceneData& scene, std::size_t index, std::uint64_t seed);

/// Collects the run record and writes <out>/manifest.json last.
class Manifest {
public:
    Manifest(std::string command, std::vector<std::string> args, std::uint64_t seed);

    nlohmann::json& config() { return config_; }
    void write(const fs::path& out) const;

private:
    std::string command_;
    std::vector<std::string> args_;
    std::uint64_t seed_;
    nlohmann::json config_ = nlohmann::json::object();
};

}  // namespace fg::cli
