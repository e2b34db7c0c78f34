#include "fg/bench.hpp"

#include <algorithm>
#include <cmath>

#include "fg/error.hpp"
#include "fg/io.hpp"

namespace fg::bench {

namespace {

constexpr std::array<const char*, kMetricCount> kLabels = {"I2V Subject", "I2V Background", "Dynamic Attributes",
                                                           "Human Motion", "Human Interaction"};
constexpr std::array<const char*, kMetricCount> kKeys = {"i2v_subject", "i2v_background", "dynamic_attributes",
                                                         "human_motion", "human_interaction"};

// Largest a:b rectangle inside w x h, floored.
BBox max_ratio_rect(long w, long h, long a, long b) {
    if (w * b <= h * a) return {0, 0, w, (w * b) / a};
    return {0, 0, (h * a) / b, h};
}

long place(long start, long extent, long crop, long limit) {
    const long pos = start - (crop - extent) / 2;
    return std::clamp(pos, 0L, limit - crop);
}

}  // namespace

std::string to_string(Dimension d) {
    switch (d) {
        case Dimension::dynamic_attributes: return "dynamic_attributes";
        case Dimension::human_motion: return "human_motion";
        case Dimension::human_interaction: return "human_interaction";
    }
    return "?";
}

Dimension dimension_from_string(const std::string& s) {
    if (s == "dynamic_attributes") return Dimension::dynamic_attributes;
    if (s == "human_motion") return Dimension::human_motion;
    if (s == "human_interaction") return Dimension::human_interaction;
    throw ConfigError("unknown dimension '" + s + "'");
}

void PromptCase::validate() const {
    if (id.empty()) throw ConfigError("case without id");
    if (questions.empty()) throw ConfigError("case '" + id + "' has no questions");
    if (video.empty()) throw ConfigError("case '" + id + "' names no video");
}

PromptCase case_from_json(const nlohmann::json& j) {
    try {
        PromptCase c;
        c.id = j.at("id").get<std::string>();
        c.dimension = dimension_from_string(j.at("dimension").get<std::string>());
        c.prompt = j.value("prompt", "");
        c.scene = j.value("scene", "");
        c.video = j.value("video", c.id);
        for (const auto& jq : j.at("questions"))
            c.questions.push_back({jq.value("text", ""), jq.at("block").get<std::string>(),
                                   jq.at("predicate").get<std::string>(), jq.value("expected", true)});
        c.validate();
        return c;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("case file: ") + e.what());
    }
}

nlohmann::json to_json(const PromptCase& c) {
    nlohmann::json qs = nlohmann::json::array();
    for (const auto& q : c.questions)
        qs.push_back({{"text", q.text}, {"block", q.block}, {"predicate", q.predicate}, {"expected", q.expected}});
    return {{"id", c.id},       {"dimension", to_string(c.dimension)}, {"prompt", c.prompt},
            {"scene", c.scene}, {"video", c.video},                    {"questions", qs}};
}

std::vector<PromptCase> load_cases(const std::filesystem::path& dir) {
    std::error_code ec;
    if (!std::filesystem::is_directory(dir, ec)) throw IoError("case directory '" + dir.string() + "' not found");
    std::vector<std::filesystem::path> files;
    for (const auto& e : std::filesystem::directory_iterator(dir))
        if (e.is_regular_file() && e.path().extension() == ".json") files.push_back(e.path());
    std::sort(files.begin(), files.end());
    if (files.empty()) throw ConfigError("no case files in '" + dir.string() + "'");
    std::vector<PromptCase> out;
    for (const auto& f : files) out.push_back(case_from_json(read_json(f)));
    return out;
}

bool mock_vqa(const Question& q, const synth::VideoMeta& video) {
    static const std::array<const char*, 6> known = {"moves_right", "moves_left", "moves_up",
                                                     "moves_down",  "static",     "present"};
    if (std::find(known.begin(), known.end(), q.predicate) == known.end())
        throw ConfigError("unknown predicate '" + q.predicate + "'");
    const auto& t = video.track(q.block);
    const bool present = !t.visible.empty() && std::all_of(t.visible.begin(), t.visible.end(), [](bool v) { return v; });
    if (q.predicate == "present") return present;
    if (!present) return false;
    const double dy = t.cy.back() - t.cy.front();
    const double dx = t.cx.back() - t.cx.front();
    constexpr double eps = 0.5;
    if (q.predicate == "moves_right") return dx > eps;
    if (q.predicate == "moves_left") return dx < -eps;
    if (q.predicate == "moves_down") return dy > eps;
    if (q.predicate == "moves_up") return dy < -eps;
    return std::abs(dx) <= eps && std::abs(dy) <= eps;
}

int vqa_case_score(const std::vector<bool>& answers_correct) {
    if (answers_correct.empty()) throw ConfigError("vqa_case_score needs at least one answer");
    return std::all_of(answers_correct.begin(), answers_correct.end(), [](bool b) { return b; }) ? 1 : 0;
}

double dimension_score(const std::vector<int>& case_scores) {
    if (case_scores.empty()) throw ConfigError("dimension_score needs at least one case");
    long sum = 0;
    for (int s : case_scores) {
        if (s != 0 && s != 1) throw ConfigError("case scores must be 0 or 1");
        sum += s;
    }
    return static_cast<double>(sum) / static_cast<double>(case_scores.size());
}

int evaluate_case(const PromptCase& c, const synth::VideoMeta& video) {
    c.validate();
    std::vector<bool> correct;
    for (const auto& q : c.questions) correct.push_back(mock_vqa(q, video) == q.expected);
    return vqa_case_score(correct);
}

std::string metric_label(Metric m) { return kLabels[static_cast<std::size_t>(m)]; }

Metric metric_from_label(const std::string& label) {
    for (std::size_t i = 0; i < kMetricCount; ++i)
        if (label == kLabels[i] || label == kKeys[i]) return static_cast<Metric>(i);
    throw ConfigError("unknown metric '" + label + "'");
}

double total_score(const ScoreReport& r) {
    double sum = 0.0;
    for (std::size_t i = 0; i < kMetricCount; ++i) {
        if (!r.metrics[i]) throw ConfigError(std::string("missing metric '") + kLabels[i] + "'");
        const double v = *r.metrics[i];
        if (!(v >= 0.0 && v <= 1.0)) throw ConfigError(std::string("metric '") + kLabels[i] + "' outside [0,1]");
        sum += v;
    }
    return sum / static_cast<double>(kMetricCount);
}

nlohmann::json to_json(const ScoreReport& r) {
    nlohmann::json j = nlohmann::json::object();
    bool complete = true;
    for (std::size_t i = 0; i < kMetricCount; ++i) {
        j[kLabels[i]] = r.metrics[i] ? nlohmann::json(*r.metrics[i]) : nlohmann::json(nullptr);
        complete = complete && r.metrics[i].has_value();
    }
    j["total"] = complete ? nlohmann::json(total_score(r)) : nlohmann::json(nullptr);
    return j;
}

void merge_metrics(ScoreReport& r, const nlohmann::json& j) {
    if (!j.is_object()) throw ConfigError("external metrics must be a JSON object");
    for (const auto& [key, value] : j.items()) {
        if (key == "total") continue;
        if (value.is_null()) continue;
        if (!value.is_number()) throw ConfigError("metric '" + key + "' is not a number");
        r[metric_from_label(key)] = value.get<double>();
    }
}

std::vector<Crop> crop_protocol(long image_w, long image_h, const BBox& bbox) {
    if (image_w <= 0 || image_h <= 0) throw ConfigError("image dimensions must be positive");
    if (bbox.w <= 0 || bbox.h <= 0 || bbox.x < 0 || bbox.y < 0 || bbox.x + bbox.w > image_w ||
        bbox.y + bbox.h > image_h)
        throw ConfigError("bbox must lie inside the image");
    struct Ratio {
        const char* name;
        long a, b;
    };
    const Ratio wide{"16:9", 16, 9};
    const Ratio square{"1:1", 1, 1};
    const bool portrait = image_h > image_w;
    std::vector<Crop> out;
    for (const Ratio& r : portrait ? std::array<Ratio, 2>{wide, square} : std::array<Ratio, 2>{square, wide}) {
        BBox rect = max_ratio_rect(image_w, image_h, r.a, r.b);
        if (bbox.w > rect.w || bbox.h > rect.h) throw ConfigError("subject exceeds crop");
        rect.x = place(bbox.x, bbox.w, rect.w, image_w);
        rect.y = place(bbox.y, bbox.h, rect.h, image_h);
        out.push_back({r.name, rect});
    }
    return out;
}

}  // namespace fg::bench
