#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "workspace.hpp"

namespace fg::cli {

struct Common {
    std::string out;
    std::uint64_t seed = 0;
    std::vector<std::string> args;  // invocation without --out, for the manifest
};

struct SynthOptions {
    std::string spec;
    std::size_t count = 8;
    double noise = -1.0;  // < 0: keep the spec / default value
};

struct ProfileOptions {
    std::string data;
    std::string scene;
    std::size_t steps = 20;
    std::size_t sampled_steps = 4;
    std::string weak_rule = "bottom:0.5";
    bool export_maps = false;
};

struct TrainOptions {
    std::string data;
    std::size_t steps = 500;
    std::size_t batch = 4;
    double lr = 0.05;
    std::string mask;
    bool globals = false;
};

struct SampleOptions {
    std::string data;
    std::string scene;
    std::size_t steps = 20;
    bool diagnostics = false;
    std::size_t diag_steps = 4;
};

struct ScoreOptions {
    std::string cases;
    std::string videos;
    std::string external_metrics;
};

int cmd_synth(const Common& c, const SynthOptions& o, std::ostream& log);
int cmd_profile(const Common& c, const ProfileOptions& o, const ModelOptions& m, const GuidanceOptions& g,
                std::ostream& log);
int cmd_train(const Common& c, const TrainOptions& o, const ModelOptions& m, const GuidanceOptions& g,
              std::ostream& log);
int cmd_sample(const Common& c, const SampleOptions& o, const ModelOptions& m, const GuidanceOptions& g,
               std::ostream& log);
int cmd_score(const Common& c, const ScoreOptions& o, std::ostream& log);

}  // namespace fg::cli
