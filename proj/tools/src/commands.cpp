#include "commands.hpp"

#include <cmath>
#include <map>
#include <ostream>

#include "fg/bench.hpp"
#include "fg/error.hpp"
#include "fg/flow.hpp"
#include "fg/io.hpp"
#include "fg/parallel.hpp"
#include "fg/rng.hpp"

namespace fg::cli {

namespace {

constexpr std::uint64_t kSceneTag = 0x11;
constexpr std::uint64_t kTrainTag = 0x22;
constexpr std::uint64_t kEvalTag = 0x33;

std::string scene_id(std::size_t i) {
    std::string n = std::to_string(i);
    return "scene_" + std::string(n.size() < 3 ? 3 - n.size() : 0, '0') + n;
}

bench::PromptCase make_case(const std::string& id, std::size_t index, const synth::SceneSpec& spec) {
    static const bench::Dimension dims[] = {bench::Dimension::dynamic_attributes, bench::Dimension::human_motion,
                                            bench::Dimension::human_interaction};
    bench::PromptCase c;
    c.id = id;
    c.dimension = dims[index % 3];
    c.scene = "scenes/" + id + "/scene.json";
    c.video = id;
    const bool moving = spec.frames > 1;
    for (const auto& b : spec.blocks) {
        const bool right = moving && b.dx > 0, left = moving && b.dx < 0;
        const bool down = moving && b.dy > 0, up = moving && b.dy < 0;
        std::string motion = right ? "right" : left ? "left" : "";
        if (down || up) motion += std::string(motion.empty() ? "" : " and ") + (down ? "down" : "up");
        c.prompt += (c.prompt.empty() ? "" : ", ") + ("block " + b.name) +
                    (motion.empty() ? " stays still" : " moves " + motion);
        c.questions.push_back({"is block " + b.name + " visible throughout?", b.name, "present", true});
        c.questions.push_back({"does block " + b.name + " move right?", b.name, "moves_right", right});
        c.questions.push_back({"does block " + b.name + " move left?", b.name, "moves_left", left});
        c.questions.push_back({"does block " + b.name + " move down?", b.name, "moves_down", down});
        c.questions.push_back({"does block " + b.name + " move up?", b.name, "moves_up", up});
    }
    if (c.questions.empty()) {
        c.prompt = "an empty scene";
        c.questions.push_back({"is block A visible throughout?", "A", "present", false});
    }
    return c;
}

nlohmann::json guidance_json(const guidance::GuidanceConfig& g, const guidance::Switches& s) {
    nlohmann::json j = guidance::to_json(g);
    j["fsg"] = s.fsg;
    j["cache"] = s.cache;
    return j;
}

std::vector<dit::TrainingExample> eval_batch(const std::vector<SceneData>& scenes, std::uint64_t seed) {
    Rng rng(derive_seed(seed, kEvalTag));
    std::vector<dit::TrainingExample> batch;
    for (std::size_t i = 0; i < scenes.size() && i < 8; ++i)
        for (double t : {0.25, 0.75})
            batch.push_back({scenes[i].latent, flow::standard_normal_like(scenes[i].latent.shape(), rng), t,
                             scenes[i].cond});
    return batch;
}

double eval_loss(const dit::Dit& model, const std::vector<dit::TrainingExample>& batch) {
    double sum = 0.0;
    for (const auto& ex : batch) {
        const flow::FlowPath path(ex.z0, ex.z1);
        const auto z = flow::interpolate(path, ex.t);
        const auto v = model.forward(z, ex.t, ex.cond).velocity;
        sum += flow::mean_squared_error(v.tensor(), flow::target_velocity(path).tensor());
    }
    return sum / static_cast<double>(batch.size());
}

}  // namespace

int cmd_synth(const Common& c, const SynthOptions& o, std::ostream& log) {
    std::vector<synth::SceneSpec> specs;
    if (!o.spec.empty()) {
        specs.push_back(synth::scene_from_json(read_json(o.spec)));
    } else {
        if (o.count == 0) throw ConfigError("--count must be positive");
        specs = synth::default_suite(o.count, c.seed);
    }
    const fs::path out = c.out;
    for (std::size_t i = 0; i < specs.size(); ++i) {
        if (o.noise >= 0.0) specs[i].noise = o.noise;
        const std::string id = scene_id(i);
        const auto scene = synth::render_scene(specs[i], derive_seed(c.seed, kSceneTag + i));
        save_scene(out, id, specs[i], scene);
        write_json(out / "videos" / (id + ".json"), synth::to_json(scene.meta));
        write_json(out / "cases" / (id + ".json"), bench::to_json(make_case(id, i, specs[i])));
    }
    Manifest m("synth", c.args, c.seed);
    m.config()["synth"] = {{"spec", o.spec}, {"count", specs.size()}, {"noise", o.noise}};
    m.write(out);
    log << "synthesized " << specs.size() << " scene(s) into " << out.string() << "\n";
    return 0;
}

int cmd_profile(const Common& c, const ProfileOptions& o, const ModelOptions& mo, const GuidanceOptions& go,
                std::ostream& log) {
    if (o.steps == 0) throw ConfigError("--steps must be positive");
    const auto scenes = load_scenes(o.data, o.scene);
    const SceneData& scene = scenes.front();
    const dit::Dit model = make_model(mo, scene.latent.channels(), c.seed);
    const auto g = make_guidance_config(go);
    auto r = profile_layers(model, scene, g, o.steps, o.sampled_steps, c.seed, o.export_maps);
    const auto rule = diagnostics::WeakRule::parse(o.weak_rule);
    const auto weak = diagnostics::identify_weak_layers(r.profiles, rule);
    diagnostics::mark_weak(r.profiles, weak);

    const fs::path out = c.out;
    diagnostics::export_heatmap(r.rows, out / "heatmap.csv");
    diagnostics::export_profiles(r.profiles, out / "profiles.csv");
    for (const auto& [stem, map] : r.maps) export_map_csv(map, out / "maps" / (stem + ".csv"));
    write_json(out / "profile.json", {{"scene", scene.id},
                                      {"keywords", r.keywords},
                                      {"weak_rule", rule.to_string()},
                                      {"weak_layers", weak},
                                      {"profiles", diagnostics::to_json(r.profiles)}});

    Manifest m("profile", c.args, c.seed);
    m.config()["dit"] = dit::to_json(model.config());
    m.config()["guidance"] = guidance::to_json(g);
    m.config()["flow"] = {{"steps", o.steps}, {"sampled_steps", o.sampled_steps}};
    m.write(out);
    log << "profiled " << model.config().layers << " layers, weak:";
    for (auto l : weak) log << ' ' << l;
    log << "\n";
    return 0;
}

int cmd_train(const Common& c, const TrainOptions& o, const ModelOptions& mo, const GuidanceOptions& go,
              std::ostream& log) {
    if (o.batch == 0) throw ConfigError("--batch must be positive");
    if (!std::isfinite(o.lr) || o.lr < 0.0) throw ConfigError("--lr must be finite and >= 0");
    const auto scenes = load_scenes(o.data);
    dit::Dit model = make_model(mo, scenes.front().latent.channels(), c.seed);
    auto g = make_guidance_config(go);
    const auto switches = make_switches(go);
    const std::size_t layers = model.config().layers;

    dit::TrainableMask mask;
    if (!o.mask.empty()) {
        const auto idx = diagnostics::parse_index_list(o.mask);
        mask.layers = {idx.begin(), idx.end()};
        mask.globals = o.globals;
    } else if (!go.weak_rule.empty()) {
        mask.layers = resolve_weak_layers(go.weak_rule, go.profile_file, model, scenes.front(), g, 20, c.seed);
        mask.globals = o.globals;
    } else {
        mask = dit::TrainableMask::all(layers);
    }
    for (auto l : mask.layers)
        if (l >= layers) throw ConfigError("mask layer " + std::to_string(l) + " out of range");
    if (g.weak_layers.empty()) g.weak_layers = mask.layers;
    // The attention cache needs a fresh first pass per noisy input, so training applies FSG only.
    const guidance::Switches train_switches{switches.fsg, false};

    const auto evals = eval_batch(scenes, c.seed);
    const double initial = eval_loss(model, evals);
    Rng rng(derive_seed(c.seed, kTrainTag));
    const std::size_t threads = thread_budget();
    std::string curve = "step,loss\n";
    for (std::size_t step = 0; step < o.steps; ++step) {
        const auto& scene = scenes[rng.below(scenes.size())];
        std::vector<dit::TrainingExample> batch;
        for (std::size_t b = 0; b < o.batch; ++b) {
            auto z1 = flow::standard_normal_like(scene.latent.shape(), rng);
            const double t = rng.uniform();
            batch.push_back({scene.latent, std::move(z1), t, scene.cond});
        }
        double loss;
        if (train_switches.fsg) {
            guidance::GuidedModel gm(model, scene.cond, g, train_switches);
            const auto iv = gm.training_interventions();
            loss = dit::train_step(model, batch, o.lr, mask, step, &iv, threads);
        } else {
            loss = dit::train_step(model, batch, o.lr, mask, step, nullptr, threads);
        }
        curve += std::to_string(step) + ',' + format_real(loss) + '\n';
        if ((step + 1) % 100 == 0) log << "step " << step + 1 << " loss " << loss << "\n";
    }
    const double final_loss = eval_loss(model, evals);

    const fs::path out = c.out;
    write_file(out / "loss.csv", curve);
    dit::save_checkpoint(model, out / "checkpoint");
    write_json(out / "summary.json", {{"steps", o.steps},
                                      {"initial_eval_loss", initial},
                                      {"final_eval_loss", final_loss},
                                      {"mask_layers", mask.layers},
                                      {"mask_globals", mask.globals}});
    Manifest m("train", c.args, c.seed);
    m.config()["dit"] = dit::to_json(model.config());
    m.config()["guidance"] = guidance_json(g, train_switches);
    m.config()["train"] = {{"steps", o.steps}, {"batch", o.batch}, {"lr", o.lr}};
    m.write(out);
    log << "eval loss " << initial << " -> " << final_loss << "\n";
    return 0;
}

int cmd_sample(const Common& c, const SampleOptions& o, const ModelOptions& mo, const GuidanceOptions& go,
               std::ostream& log) {
    if (o.steps == 0) throw ConfigError("--steps must be positive");
    const auto scenes = load_scenes(o.data, o.scene);
    const dit::Dit model = make_model(mo, scenes.front().latent.channels(), c.seed);
    auto g = make_guidance_config(go);
    const auto switches = make_switches(go);
    g.weak_layers = resolve_weak_layers(go.weak_rule, go.profile_file, model, scenes.front(), g, o.steps, c.seed);
    if (switches.any() && g.weak_layers.empty()) log << "warning: no weak layers, guidance is inactive\n";

    const fs::path out = c.out;
    const auto capture = o.diagnostics ? evenly_spaced(o.steps, o.diag_steps) : std::set<std::size_t>{};
    std::string diag = "scene,step,layer,keyword,value\n";
    nlohmann::json per_scene = nlohmann::json::array();
    double total_i = 0.0;
    std::size_t total_n = 0;
    guidance::Counters counters;
    for (std::size_t i = 0; i < scenes.size(); ++i) {
        const auto& scene = scenes[i];
        guidance::GuidedModel gm(model, scene.cond, g, switches);
        std::vector<std::size_t> keywords;
        for (const auto& a : gm.plan().anchors) keywords.push_back(a.keyword);
        const std::size_t f = scene.latent.frames(), h = scene.latent.height(), w = scene.latent.width();
        double sum_i = 0.0;
        std::size_t n = 0;
        std::size_t step = 0;
        const flow::VelocityFn fn = [&](const LatentVideo& z, double t) {
            const bool hooked = capture.count(step) != 0;
            auto res = gm.forward(z, t, hooked);
            if (hooked) {
                for (const auto& st : res.states) {
                    if (!g.weak_layers.count(st.layer)) continue;
                    const auto maps = keyword_maps(st, keywords, f, h, w);
                    for (std::size_t k = 0; k < maps.size(); ++k) {
                        const double mi = diagnostics::morans_i_layer(maps[k]);
                        diag += scene.id + ',' + std::to_string(step) + ',' + std::to_string(st.layer) + ',' +
                                std::to_string(keywords[k]) + ',' + format_real(mi) + '\n';
                        sum_i += mi;
                        ++n;
                    }
                }
            }
            ++step;
            return std::move(res.velocity);
        };
        const LatentVideo sampled = flow::euler_sample(fn, scene_noise(scene, i, c.seed), o.steps);
        serialize_tensor(sampled.tensor(), out / "videos" / (scene.id + ".fgt"));
        write_json(out / "videos" / (scene.id + ".json"), synth::to_json(synth::track_blocks(sampled, scene.spec)));

        const auto& k = gm.counters();
        counters.forwards += k.forwards;
        counters.value_fusions += k.value_fusions;
        counters.latent_injections += k.latent_injections;
        counters.cache_builds += k.cache_builds;
        counters.cache_applications += k.cache_applications;
        nlohmann::json js = {{"id", scene.id}, {"keywords", keywords}, {"warnings", gm.plan().warnings}};
        js["mean_weak_morans_i"] = n ? nlohmann::json(sum_i / static_cast<double>(n)) : nlohmann::json(nullptr);
        per_scene.push_back(js);
        total_i += sum_i;
        total_n += n;
    }
    if (o.diagnostics) write_file(out / "diagnostics.csv", diag);
    nlohmann::json summary = {{"weak_layers", g.weak_layers},
                              {"scenes", per_scene},
                              {"counters",
                               {{"forwards", counters.forwards},
                                {"value_fusions", counters.value_fusions},
                                {"latent_injections", counters.latent_injections},
                                {"cache_builds", counters.cache_builds},
                                {"cache_applications", counters.cache_applications}}}};
    summary["mean_weak_morans_i"] =
        total_n ? nlohmann::json(total_i / static_cast<double>(total_n)) : nlohmann::json(nullptr);
    write_json(out / "summary.json", summary);

    Manifest m("sample", c.args, c.seed);
    m.config()["dit"] = dit::to_json(model.config());
    m.config()["guidance"] = guidance_json(g, switches);
    flow::FlowConfig fc;
    fc.steps = o.steps;
    fc.seed = c.seed;
    fc.guidance = switches.any();
    m.config()["flow"] = flow::to_json(fc);
    m.write(out);
    log << "sampled " << scenes.size() << " scene(s)\n";
    return 0;
}

int cmd_score(const Common& c, const ScoreOptions& o, std::ostream& log) {
    const auto cases = bench::load_cases(o.cases);
    std::map<bench::Dimension, std::vector<int>> by_dim;
    nlohmann::json per_case = nlohmann::json::array();
    for (const auto& pc : cases) {
        const fs::path video = fs::path(o.videos) / (pc.video + ".json");
        std::error_code ec;
        if (!fs::is_regular_file(video, ec)) throw IoError("missing video '" + video.string() + "'");
        const int s = bench::evaluate_case(pc, synth::video_meta_from_json(read_json(video)));
        by_dim[pc.dimension].push_back(s);
        per_case.push_back({{"id", pc.id}, {"dimension", bench::to_string(pc.dimension)}, {"score", s}});
    }
    bench::ScoreReport report;
    for (const auto& [dim, scores] : by_dim) {
        const double v = bench::dimension_score(scores);
        switch (dim) {
            case bench::Dimension::dynamic_attributes: report[bench::Metric::dynamic_attributes] = v; break;
            case bench::Dimension::human_motion: report[bench::Metric::human_motion] = v; break;
            case bench::Dimension::human_interaction: report[bench::Metric::human_interaction] = v; break;
        }
    }
    if (!o.external_metrics.empty()) bench::merge_metrics(report, read_json(o.external_metrics));

    const fs::path out = c.out;
    const auto j = bench::to_json(report);
    write_json(out / "report.json", j);
    write_json(out / "cases.json", per_case);
    Manifest m("score", c.args, c.seed);
    m.config()["score"] = {{"cases", cases.size()}, {"external_metrics", !o.external_metrics.empty()}};
    m.write(out);
    log << "total: " << (j["total"].is_null() ? std::string("incomplete") : format_real(j["total"].get<double>()))
        << "\n";
    return 0;
}

}  // namespace fg::cli
