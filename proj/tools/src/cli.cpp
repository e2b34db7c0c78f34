#include "fg_cli/cli.hpp"

#include <iostream>

#include <CLI11.hpp>

#include "commands.hpp"
#include "fg/error.hpp"
#include "fg/io.hpp"

namespace fg::cli {

namespace {

int exit_code(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::config: return 2;
        case ErrorKind::numeric: return 3;
        case ErrorKind::io: return 4;
    }
    return 1;
}

// Drops "--out X" / "--out=X" so a manifest can be replayed into another directory.
std::vector<std::string> strip_out(const std::vector<std::string>& args) {
    std::vector<std::string> kept;
    for (std::size_t i = 0; i < args.size(); ++i) {
        if (args[i] == "--out") {
            ++i;
            continue;
        }
        if (args[i].rfind("--out=", 0) == 0) continue;
        kept.push_back(args[i]);
    }
    return kept;
}

void add_model_options(CLI::App* sub, ModelOptions& m) {
    sub->add_option("--checkpoint", m.checkpoint, "Checkpoint directory to load");
    sub->add_option("--model-config", m.config_file, "DiT config JSON");
    sub->add_option("--layers", m.layers, "Transformer blocks");
    sub->add_option("--hidden", m.hidden, "Hidden width");
    sub->add_option("--mode", m.mode, "Conditioning mode: cross | concat");
}

void add_guidance_options(CLI::App* sub, GuidanceOptions& g) {
    sub->add_option("--fg", g.fg, "Focal guidance: on | off");
    sub->add_flag("--fsg-only", g.fsg_only, "Semantic guidance without the attention cache");
    sub->add_flag("--ac-only", g.ac_only, "Attention cache without semantic guidance");
    sub->add_option("--guidance-config", g.config_file, "Guidance config JSON");
    sub->add_option("--weak-rule", g.weak_rule, "bottom:<q> or list:<indices>");
    sub->add_option("--profile", g.profile_file, "profile.json used by bottom:<q> rules");
    sub->add_option("--lambda", g.lambda, "Set all three guidance strengths");
    sub->add_option("--lambda-txt", g.lambda_txt);
    sub->add_option("--lambda-lat", g.lambda_lat);
    sub->add_option("--lambda-cache", g.lambda_cache);
    sub->add_option("--tau-sel", g.tau_sel);
    sub->add_option("--tau-cache", g.tau_cache);
    sub->add_option("--tau-region", g.tau_region);
    sub->add_option("--sign-mode", g.sign_mode, "positive | negative");
}

int replay(const std::string& manifest_path, const std::string& out, std::ostream& o, std::ostream& e) {
    const auto m = read_json(manifest_path);
    std::vector<std::string> args;
    try {
        args = m.at("args").get<std::vector<std::string>>();
    } catch (const nlohmann::json::exception& ex) {
        throw ConfigError(std::string("manifest: ") + ex.what());
    }
    if (args.empty() || args.front() == "replay") throw ConfigError("manifest holds no replayable command");
    args.push_back("--out");
    args.push_back(out);
    return run(args, o, e);
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Focal guidance toolkit"};
    app.require_subcommand(1);

    Common common;
    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--out", common.out, "Output directory")->required();
        sub->add_option("--seed", common.seed, "Root seed");
    };

    SynthOptions synth_o;
    auto* synth = app.add_subcommand("synth", "Generate synthetic scenes, videos and cases");
    add_common(synth);
    synth->add_option("--spec", synth_o.spec, "Scene spec JSON (default: random suite)");
    synth->add_option("--count", synth_o.count, "Scenes in the random suite");
    synth->add_option("--noise", synth_o.noise, "Image token noise sigma");

    ProfileOptions prof_o;
    ModelOptions prof_m;
    GuidanceOptions prof_g;
    auto* profile = app.add_subcommand("profile", "Layer-wise semantic responsiveness");
    add_common(profile);
    add_model_options(profile, prof_m);
    profile->add_option("--data", prof_o.data, "Synthesized data directory")->required();
    profile->add_option("--scene", prof_o.scene, "Scene id (default: first)");
    profile->add_option("--steps", prof_o.steps, "Sampling steps");
    profile->add_option("--sampled-steps", prof_o.sampled_steps, "Evenly spaced steps to record");
    profile->add_option("--weak-rule", prof_o.weak_rule, "bottom:<q> or list:<indices>");
    profile->add_option("--tau-sel", prof_g.tau_sel);
    profile->add_flag("--export-maps", prof_o.export_maps, "Write every similarity map as CSV");

    TrainOptions train_o;
    ModelOptions train_m;
    GuidanceOptions train_g;
    train_g.fg = "off";
    auto* train = app.add_subcommand("train", "Fine-tune on synthesized data");
    add_common(train);
    add_model_options(train, train_m);
    add_guidance_options(train, train_g);
    train->add_option("--data", train_o.data, "Synthesized data directory")->required();
    train->add_option("--steps", train_o.steps, "Optimizer steps");
    train->add_option("--batch", train_o.batch, "Examples per step");
    train->add_option("--lr", train_o.lr, "Learning rate");
    train->add_option("--mask", train_o.mask, "Trainable layers, e.g. 2-5");
    train->add_flag("--globals", train_o.globals, "Also train embeddings, projections and output head");

    SampleOptions sample_o;
    ModelOptions sample_m;
    GuidanceOptions sample_g;
    sample_g.weak_rule = "bottom:0.5";
    auto* sample = app.add_subcommand("sample", "Sample videos with or without focal guidance");
    add_common(sample);
    add_model_options(sample, sample_m);
    add_guidance_options(sample, sample_g);
    sample->add_option("--data", sample_o.data, "Synthesized data directory")->required();
    sample->add_option("--scene", sample_o.scene, "Scene id (default: all)");
    sample->add_option("--steps", sample_o.steps, "Euler steps");
    sample->add_flag("--diagnostics", sample_o.diagnostics, "Record weak-layer Moran's I");
    sample->add_option("--diag-steps", sample_o.diag_steps, "Evenly spaced steps to record");

    ScoreOptions score_o;
    auto* score = app.add_subcommand("score", "Score sampled videos against prompt cases");
    add_common(score);
    score->add_option("--cases", score_o.cases, "Case directory")->required();
    score->add_option("--videos", score_o.videos, "Video metadata directory")->required();
    score->add_option("--external-metrics", score_o.external_metrics, "JSON with externally measured metrics");

    std::string manifest_path;
    std::string replay_out;
    auto* rep = app.add_subcommand("replay", "Re-run the command recorded in a manifest");
    rep->add_option("--manifest", manifest_path, "manifest.json")->required();
    rep->add_option("--out", replay_out, "Output directory")->required();

    try {
        std::vector<std::string> reversed(args.rbegin(), args.rend());
        app.parse(reversed);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return 0;
    } catch (const CLI::ParseError& e) {
        err << "fg: " << e.what() << "\n";
        return 2;
    }
    common.args = strip_out(args);

    try {
        if (*synth) return cmd_synth(common, synth_o, out);
        if (*profile) {
            prof_g.fg = "off";
            return cmd_profile(common, prof_o, prof_m, prof_g, out);
        }
        if (*train) return cmd_train(common, train_o, train_m, train_g, out);
        if (*sample) return cmd_sample(common, sample_o, sample_m, sample_g, out);
        if (*score) return cmd_score(common, score_o, out);
        if (*rep) return replay(manifest_path, replay_out, out, err);
    } catch (const Error& e) {
        err << "fg: " << e.what() << "\n";
        return exit_code(e.kind());
    } catch (const std::filesystem::filesystem_error& e) {
        err << "fg: " << e.what() << "\n";
        return 4;
    } catch (const std::exception& e) {
        err << "fg: " << e.what() << "\n";
        return 1;
    }
    return 1;
}

int run(const std::vector<std::string>& args) { return run(args, std::cout, std::cerr); }

}  // namespace fg::cli
