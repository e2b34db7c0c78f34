#pragma once

#include <array>
#include <cstddef>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fg/synth.hpp"

namespace fg::bench {

enum class Dimension { dynamic_attributes, human_motion, human_interaction };

std::string to_string(Dimension d);
Dimension dimension_from_string(const std::string& s);

/// Yes/no question about one block of a synthetic video.
struct Question {
    std::string text;
    std::string block;
    std::string predicate;  // moves_right|moves_left|moves_up|moves_down|static|present
    bool expected = true;
};

struct PromptCase {
    std::string id;
    Dimension dimension = Dimension::dynamic_attributes;
    std::string prompt;
    std::string scene;  // scene spec reference, informational
    std::string video;  // video metadata name, resolved as <videos>/<video>.json
    std::vector<Question> questions;

    void validate() const;
};

PromptCase case_from_json(const nlohmann::json& j);
nlohmann::json to_json(const PromptCase& c);

/// Every *.json file of `dir` in name order. An empty directory is an error.
std::vector<PromptCase> load_cases(const std::filesystem::path& dir);

/// Deterministic answer of `q` from ground-truth trajectories.
bool mock_vqa(const Question& q, const synth::VideoMeta& video);

/// 1 iff every answer is correct.
int vqa_case_score(const std::vector<bool>& answers_correct);

/// Mean of the per-case 0/1 scores.
double dimension_score(const std::vector<int>& case_scores);

/// Runs every question of `c` through mock_vqa and scores the case.
int evaluate_case(const PromptCase& c, const synth::VideoMeta& video);

enum class Metric { i2v_subject, i2v_background, dynamic_attributes, human_motion, human_interaction };
inline constexpr std::size_t kMetricCount = 5;

/// Table column header of a metric ("I2V Subject", ...).
std::string metric_label(Metric m);
Metric metric_from_label(const std::string& label);

struct ScoreReport {
    std::array<std::optional<double>, kMetricCount> metrics;

    std::optional<double>& operator[](Metric m) { return metrics[static_cast<std::size_t>(m)]; }
    const std::optional<double>& operator[](Metric m) const { return metrics[static_cast<std::size_t>(m)]; }
};

/// Unweighted mean of the five metrics. Throws ConfigError on a missing one.
double total_score(const ScoreReport& r);

/// Report JSON keyed by the metric labels plus "total"; absent values are null.
nlohmann::json to_json(const ScoreReport& r);

/// Reads external metric values keyed by label (or by enum name) into `r`.
void merge_metrics(ScoreReport& r, const nlohmann::json& j);

struct BBox {
    long x = 0;
    long y = 0;
    long w = 0;
    long h = 0;
};

struct Crop {
    std::string ratio;  // "16:9" or "1:1"
    BBox rect;
};

/// Portrait images get a 16:9 crop then a 1:1 crop; landscape and square
/// images get 1:1 then 16:9. Each crop is the largest rectangle of its ratio
/// inside the image, centred on the bbox and clamped to the image.
std::vector<Crop> crop_protocol(long image_w, long image_h, const BBox& bbox);

}  // namespace fg::bench
