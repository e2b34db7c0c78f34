#include "workspace.hpp"

#include <algorithm>
#include <cmath>

#include "fg/error.hpp"
#include "fg/flow.hpp"
#include "fg/io.hpp"
#include "fg/rng.hpp"

namespace fg::cli {

namespace {

constexpr std::uint64_t kNoiseTag = 0x5A;
constexpr std::uint64_t kProfileTag = 0x91;

}  // namespace

void save_scene(const fs::path& root, const std::string& id, const synth::SceneSpec& spec,
                const synth::RenderedScene& scene) {
    const fs::path dir = root / "scenes" / id;
    write_json(dir / "scene.json", synth::to_json(spec));
    serialize_tensor(scene.latent.tensor(), dir / "latent.fgt");
    serialize_tensor(scene.reference.tensor(), dir / "reference.fgt");
    serialize_tensor(scene.text.to_tensor(), dir / "text.fgt");
    serialize_tensor(scene.image.to_tensor(), dir / "image.fgt");
    nlohmann::json regions = nlohmann::json::array();
    for (const auto& r : scene.regions) {
        nlohmann::json cells = nlohmann::json::array();
        for (const auto& c : r) cells.push_back({c.y, c.x});
        regions.push_back(cells);
    }
    write_json(dir / "regions.json", regions);
}

std::vector<SceneData> load_scenes(const fs::path& root, const std::string& only) {
    const fs::path dir = root / "scenes";
    std::error_code ec;
    if (!fs::is_directory(dir, ec)) throw IoError("no synthesized data under '" + root.string() + "'");
    std::vector<std::string> ids;
    for (const auto& e : fs::directory_iterator(dir))
        if (e.is_directory()) ids.push_back(e.path().filename().string());
    std::sort(ids.begin(), ids.end());
    if (!only.empty()) {
        if (std::find(ids.begin(), ids.end(), only) == ids.end()) throw ConfigError("unknown scene '" + only + "'");
        ids = {only};
    }
    if (ids.empty()) throw ConfigError("no scenes under '" + dir.string() + "'");

    std::vector<SceneData> out;
    for (const auto& id : ids) {
        const fs::path s = dir / id;
        SceneData d;
        d.id = id;
        d.spec = synth::scene_from_json(read_json(s / "scene.json"));
        d.latent = LatentVideo(deserialize_tensor(s / "latent.fgt"));
        d.cond.text = TokenSequence(Modality::text, deserialize_tensor(s / "text.fgt"));
        d.cond.image = TokenSequence(Modality::image, deserialize_tensor(s / "image.fgt"));
        d.cond.reference = LatentVideo(deserialize_tensor(s / "reference.fgt"));
        if (d.latent.shape() != d.cond.reference.shape())
            throw ConfigError("scene '" + id + "': latent and reference shapes differ");
        out.push_back(std::move(d));
    }
    return out;
}

dit::Dit make_model(const ModelOptions& o, std::size_t channels, std::uint64_t seed) {
    if (!o.checkpoint.empty()) {
        dit::Dit m = dit::load_checkpoint(o.checkpoint);
        if (m.config().latent_channels != channels)
            throw ConfigError("checkpoint expects " + std::to_string(m.config().latent_channels) +
                              " latent channels, data has " + std::to_string(channels));
        return m;
    }
    dit::DitConfig c = o.config_file.empty() ? dit::DitConfig{} : dit::dit_config_from_json(read_json(o.config_file));
    if (o.layers) c.layers = *o.layers;
    if (o.hidden) c.hidden = *o.hidden;
    if (!o.mode.empty()) c.mode = dit::conditioning_mode_from_string(o.mode);
    c.latent_channels = c.text_dim = c.image_dim = channels;
    c.seed = seed;
    c.validate();
    return dit::Dit(c);
}

guidance::GuidanceConfig make_guidance_config(const GuidanceOptions& o) {
    guidance::GuidanceConfig g =
        o.config_file.empty() ? guidance::GuidanceConfig{} : guidance::guidance_config_from_json(read_json(o.config_file));
    if (o.lambda) g.lambda_txt = g.lambda_lat = g.lambda_cache = *o.lambda;
    if (o.lambda_txt) g.lambda_txt = *o.lambda_txt;
    if (o.lambda_lat) g.lambda_lat = *o.lambda_lat;
    if (o.lambda_cache) g.lambda_cache = *o.lambda_cache;
    if (o.tau_sel) g.tau_sel = *o.tau_sel;
    if (o.tau_cache) g.tau_cache = *o.tau_cache;
    if (o.tau_region) g.tau_region = *o.tau_region;
    if (!o.sign_mode.empty()) g.sign_mode = guidance::sign_mode_from_string(o.sign_mode);
    g.validate();
    return g;
}

guidance::Switches make_switches(const GuidanceOptions& o) {
    if (o.fg != "on" && o.fg != "off") throw ConfigError("--fg must be 'on' or 'off'");
    if (o.fsg_only && o.ac_only) throw ConfigError("--fsg-only and --ac-only are mutually exclusive");
    if (o.fg == "off") return guidance::Switches::off();
    if (o.fsg_only) return {true, false};
    if (o.ac_only) return {false, true};
    return {};
}

std::set<std::size_t> evenly_spaced(std::size_t steps, std::size_t count) {
    std::set<std::size_t> out;
    if (steps == 0 || count == 0) return out;
    if (count == 1) return {0};
    count = std::min(count, steps);
    for (std::size_t j = 0; j < count; ++j) out.insert((j * (steps - 1) + (count - 1) / 2) / (count - 1));
    return out;
}

std::vector<Tensor> keyword_maps(const dit::LayerState& state, const std::vector<std::size_t>& keywords,
                                 std::size_t frames, std::size_t height, std::size_t width) {
    std::vector<Tensor> out;
    out.reserve(keywords.size());
    for (auto k : keywords)
        out.push_back(guidance::layer_similarity(state.text_values.slice(k), state.visual, frames, height, width));
    return out;
}

LatentVideo scene_noise(const SceneData& scene, std::size_t index, std::uint64_t seed) {
    Rng rng(derive_seed(seed, kNoiseTag + 0x100 * (index + 1)));
    return flow::standard_normal_like(scene.latent.shape(), rng);
}

ProfileResult profile_layers(const dit::Dit& model, const SceneData& scene, const guidance::GuidanceConfig& g,
                             std::size_t steps, std::size_t sampled_steps, std::uint64_t seed, bool keep_maps) {
    guidance::GuidanceConfig unguided = g;
    unguided.weak_layers.clear();
    guidance::GuidedModel gm(model, scene.cond, unguided, guidance::Switches::off());
    ProfileResult r;
    for (const auto& a : gm.plan().anchors) r.keywords.push_back(a.keyword);
    if (r.keywords.empty()) throw ConfigError("scene '" + scene.id + "': no keyword passes tau_sel");

    const std::size_t layers = model.config().layers;
    const std::size_t f = scene.latent.frames(), h = scene.latent.height(), w = scene.latent.width();
    std::vector<double> sum_i(layers, 0.0), sum_std(layers, 0.0);
    std::size_t samples = 0;
    const auto capture = evenly_spaced(steps, sampled_steps);
    std::size_t step = 0;
    const flow::VelocityFn fn = [&](const LatentVideo& z, double t) {
        const bool hooked = capture.count(step) != 0;
        auto res = gm.forward(z, t, hooked);
        if (hooked) {
            for (const auto& st : res.states) {
                const auto maps = keyword_maps(st, r.keywords, f, h, w);
                for (std::size_t k = 0; k < maps.size(); ++k) {
                    const double mi = diagnostics::morans_i_layer(maps[k]);
                    r.rows.push_back({step, st.layer, r.keywords[k], mi});
                    sum_i[st.layer] += mi;
                    sum_std[st.layer] += diagnostics::std_layer(maps[k]);
                    if (keep_maps)
                        r.maps.emplace_back("step" + std::to_string(step) + "_layer" + std::to_string(st.layer) +
                                                "_kw" + std::to_string(r.keywords[k]),
                                            maps[k]);
                }
            }
            samples += r.keywords.size();
        }
        ++step;
        return std::move(res.velocity);
    };
    Rng rng(derive_seed(seed, kProfileTag));
    flow::euler_sample(fn, flow::standard_normal_like(scene.latent.shape(), rng), steps);
    for (std::size_t l = 0; l < layers; ++l)
        r.profiles.push_back({l, sum_i[l] / static_cast<double>(samples), sum_std[l] / static_cast<double>(samples), false});
    return r;
}

std::set<std::size_t> resolve_weak_layers(const std::string& rule_text, const std::string& profile_file,
                                          const dit::Dit& model, const SceneData& scene,
                                          const guidance::GuidanceConfig& g, std::size_t steps,
                                          std::uint64_t seed) {
    if (rule_text.empty()) return g.weak_layers;
    const auto rule = diagnostics::WeakRule::parse(rule_text);
    std::vector<diagnostics::LayerProfile> profiles;
    if (rule.kind == diagnostics::WeakRule::Kind::explicit_list) {
        for (std::size_t l = 0; l < model.config().layers; ++l) profiles.push_back({l, 0.0, 0.0, false});
    } else if (!profile_file.empty()) {
        const auto j = read_json(profile_file);
        profiles = diagnostics::profiles_from_json(j.contains("profiles") ? j.at("profiles") : j);
    } else {
        profiles = profile_layers(model, scene, g, steps, 4, seed, false).profiles;
    }
    return diagnostics::identify_weak_layers(profiles, rule);
}

// ---------------------------------------------------------------------------

Manifest::Manifest(std::string command, std::vector<std::string> args, std::uint64_t seed)
    : command_(std::move(command)), args_(std::move(args)), seed_(seed) {}

void Manifest::write(const fs::path& out) const {
    nlohmann::json artifacts = nlohmann::json::array();
    std::vector<fs::path> files;
    for (const auto& e : fs::recursive_directory_iterator(out))
        if (e.is_regular_file() && e.path() != out / "manifest.json") files.push_back(e.path());
    std::sort(files.begin(), files.end());
    for (const auto& p : files)
        artifacts.push_back({{"path", fs::relative(p, out).generic_string()}, {"digest", content_digest(read_file(p))}});
    const nlohmann::json j = {{"command", command_}, {"args", args_},           {"config", config_},
                              {"seed", seed_},       {"artifacts", artifacts}, {"version", FG_VERSION}};
    write_json(out / "manifest.json", j);
}

}  // namespace fg::cli
