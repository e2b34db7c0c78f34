#include "fg/synth.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "fg/error.hpp"
#include "fg/rng.hpp"

namespace fg::synth {

namespace {

constexpr std::uint64_t kImageNoiseTag = 1;
constexpr std::uint64_t kFillerTag = 2;

bool overlaps_at(const Block& a, const Block& b, std::size_t f) {
    const long ay = a.y_at(f), ax = a.x_at(f), by = b.y_at(f), bx = b.x_at(f);
    return ay < by + static_cast<long>(b.h) && by < ay + static_cast<long>(a.h) &&
           ax < bx + static_cast<long>(b.w) && bx < ax + static_cast<long>(a.w);
}

}  // namespace

std::vector<double> one_hot(std::size_t channels, std::size_t channel, double amplitude) {
    if (channel >= channels) throw ConfigError("one_hot: channel out of range");
    std::vector<double> v(channels, 0.0);
    v[channel] = amplitude;
    return v;
}

std::vector<double> SceneSpec::background_or_default() const {
    return background.empty() ? one_hot(channels, 0) : background;
}

void SceneSpec::validate() const {
    if (height == 0 || width == 0 || frames == 0 || channels == 0)
        throw ConfigError("scene grid, frames and channels must be positive");
    if (!std::isfinite(noise) || noise < 0.0) throw ConfigError("scene noise must be finite and >= 0");
    if (!background.empty() && background.size() != channels)
        throw ConfigError("background must have one value per channel");
    std::set<std::string> names;
    for (const auto& b : blocks) {
        if (b.name.empty()) throw ConfigError("block names must be non-empty");
        if (!names.insert(b.name).second) throw ConfigError("duplicate block name '" + b.name + "'");
        if (b.h == 0 || b.w == 0) throw ConfigError("block '" + b.name + "' has a zero extent");
        if (b.signature.size() != channels)
            throw ConfigError("block '" + b.name + "' signature needs " + std::to_string(channels) + " channels");
        if (norm(b.signature) == 0.0) throw ConfigError("block '" + b.name + "' has a zero signature");
        for (std::size_t f = 0; f < frames; ++f) {
            const long y = b.y_at(f), x = b.x_at(f);
            if (y < 0 || x < 0 || y + static_cast<long>(b.h) > static_cast<long>(height) ||
                x + static_cast<long>(b.w) > static_cast<long>(width))
                throw ConfigError("block '" + b.name + "' leaves the grid at frame " + std::to_string(f));
        }
    }
    for (std::size_t i = 0; i < blocks.size(); ++i)
        for (std::size_t j = i + 1; j < blocks.size(); ++j) {
            if (!bit_equal(std::span<const double>(blocks[i].signature), blocks[j].signature)) continue;
            for (std::size_t f = 0; f < frames; ++f)
                if (overlaps_at(blocks[i], blocks[j], f))
                    throw ConfigError("overlapping blocks with identical signatures ('" + blocks[i].name + "', '" +
                                      blocks[j].name + "')");
            throw ConfigError("blocks '" + blocks[i].name + "' and '" + blocks[j].name +
                              "' need distinct channel signatures");
        }
}

nlohmann::json to_json(const SceneSpec& s) {
    nlohmann::json blocks = nlohmann::json::array();
    for (const auto& b : s.blocks)
        blocks.push_back({{"name", b.name}, {"y", b.y}, {"x", b.x}, {"h", b.h}, {"w", b.w},
                          {"dy", b.dy}, {"dx", b.dx}, {"signature", b.signature}});
    return {{"height", s.height}, {"width", s.width},     {"frames", s.frames}, {"channels", s.channels},
            {"noise", s.noise},   {"background", s.background_or_default()}, {"fillers", s.fillers},
            {"blocks", blocks}};
}

SceneSpec scene_from_json(const nlohmann::json& j) {
    try {
        SceneSpec s;
        s.height = j.value("height", s.height);
        s.width = j.value("width", s.width);
        s.frames = j.value("frames", s.frames);
        s.channels = j.value("channels", s.channels);
        s.noise = j.value("noise", s.noise);
        s.fillers = j.value("fillers", s.fillers);
        if (j.contains("background")) s.background = j.at("background").get<std::vector<double>>();
        std::size_t next_channel = 1;
        for (const auto& jb : j.value("blocks", nlohmann::json::array())) {
            Block b;
            b.name = jb.at("name").get<std::string>();
            b.y = jb.value("y", 0L);
            b.x = jb.value("x", 0L);
            b.h = jb.value("h", std::size_t{1});
            b.w = jb.value("w", std::size_t{1});
            b.dy = jb.value("dy", 0L);
            b.dx = jb.value("dx", 0L);
            if (jb.contains("signature")) {
                b.signature = jb.at("signature").get<std::vector<double>>();
            } else {
                if (next_channel >= s.channels) throw ConfigError("not enough channels for default block signatures");
                b.signature = one_hot(s.channels, next_channel++);
            }
            s.blocks.push_back(std::move(b));
        }
        s.validate();
        return s;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("scene spec: ") + e.what());
    }
}

// ---------------------------------------------------------------------------

const Track& VideoMeta::track(const std::string& name) const {
    for (const auto& t : tracks)
        if (t.name == name) return t;
    throw ConfigError("unknown block '" + name + "'");
}

nlohmann::json to_json(const VideoMeta& m) {
    nlohmann::json tracks = nlohmann::json::array();
    for (const auto& t : m.tracks) {
        nlohmann::json pos = nlohmann::json::array();
        for (std::size_t f = 0; f < t.cy.size(); ++f)
            pos.push_back(t.visible[f] ? nlohmann::json::array({t.cy[f], t.cx[f]}) : nlohmann::json(nullptr));
        tracks.push_back({{"name", t.name}, {"positions", pos}});
    }
    return {{"frames", m.frames}, {"blocks", tracks}};
}

VideoMeta video_meta_from_json(const nlohmann::json& j) {
    try {
        VideoMeta m;
        m.frames = j.at("frames").get<std::size_t>();
        for (const auto& jt : j.at("blocks")) {
            Track t;
            t.name = jt.at("name").get<std::string>();
            for (const auto& p : jt.at("positions")) {
                t.visible.push_back(!p.is_null());
                t.cy.push_back(p.is_null() ? 0.0 : p.at(0).get<double>());
                t.cx.push_back(p.is_null() ? 0.0 : p.at(1).get<double>());
            }
            if (t.cy.size() != m.frames) throw ConfigError("track '" + t.name + "' does not cover every frame");
            m.tracks.push_back(std::move(t));
        }
        return m;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("video metadata: ") + e.what());
    }
}

VideoMeta track_blocks(const LatentVideo& video, const SceneSpec& spec) {
    if (video.channels() != spec.channels || video.height() != spec.height || video.width() != spec.width)
        throw ConfigError("track_blocks: latent does not match the scene grid");
    VideoMeta m;
    m.frames = video.frames();
    for (const auto& b : spec.blocks) {
        Track t;
        t.name = b.name;
        for (std::size_t f = 0; f < video.frames(); ++f) {
            double sy = 0.0, sx = 0.0;
            std::size_t n = 0;
            for (std::size_t y = 0; y < video.height(); ++y)
                for (std::size_t x = 0; x < video.width(); ++x) {
                    const auto c = video.cell(f, y, x);
                    if (norm(c) == 0.0) continue;
                    if (cosine_similarity(c, b.signature) > 0.5) {
                        sy += static_cast<double>(y);
                        sx += static_cast<double>(x);
                        ++n;
                    }
                }
            t.visible.push_back(n > 0);
            t.cy.push_back(n ? sy / static_cast<double>(n) : 0.0);
            t.cx.push_back(n ? sx / static_cast<double>(n) : 0.0);
        }
        m.tracks.push_back(std::move(t));
    }
    return m;
}

// ---------------------------------------------------------------------------

dit::Conditioning RenderedScene::conditioning() const { return {text, image, reference}; }

RenderedScene render_scene(const SceneSpec& spec, std::uint64_t seed) {
    spec.validate();
    const std::size_t h = spec.height, w = spec.width, c = spec.channels;
    const auto bg = spec.background_or_default();

    RenderedScene out;
    out.latent = LatentVideo(spec.frames, h, w, c);
    // owner[f][cell] = block index + 1, 0 for background. Later blocks paint over earlier ones.
    std::vector<std::vector<std::size_t>> owner(spec.frames, std::vector<std::size_t>(h * w, 0));
    for (std::size_t i = 0; i < spec.blocks.size(); ++i) {
        const auto& b = spec.blocks[i];
        for (std::size_t f = 0; f < spec.frames; ++f)
            for (std::size_t y = 0; y < b.h; ++y)
                for (std::size_t x = 0; x < b.w; ++x)
                    owner[f][(static_cast<std::size_t>(b.y_at(f)) + y) * w + static_cast<std::size_t>(b.x_at(f)) + x] =
                        i + 1;
    }
    for (std::size_t f = 0; f < spec.frames; ++f)
        for (std::size_t p = 0; p < h * w; ++p) {
            const auto& src = owner[f][p] ? spec.blocks[owner[f][p] - 1].signature : bg;
            std::copy(src.begin(), src.end(), out.latent.cell(f, p / w, p % w).begin());
        }

    out.reference = LatentVideo(spec.frames, h, w, c);
    for (std::size_t p = 0; p < h * w; ++p) {
        const auto src = out.latent.cell(0, p / w, p % w);
        std::copy(src.begin(), src.end(), out.reference.cell(0, p / w, p % w).begin());
    }

    Rng noise(derive_seed(seed, kImageNoiseTag));
    out.image = TokenSequence(Modality::image, c);
    std::vector<double> tok(c);
    for (std::size_t p = 0; p < h * w; ++p) {
        const auto src = out.latent.cell(0, p / w, p % w);
        for (std::size_t k = 0; k < c; ++k) tok[k] = src[k] + (spec.noise > 0.0 ? spec.noise * noise.normal() : 0.0);
        out.image.push_back(tok);
    }

    out.text = TokenSequence(Modality::text, c);
    out.regions.resize(spec.blocks.size());
    for (std::size_t i = 0; i < spec.blocks.size(); ++i) {
        out.text.push_back(spec.blocks[i].signature);
        out.keyword_tokens.push_back(i);
        for (std::size_t p = 0; p < h * w; ++p)
            if (owner[0][p] == i + 1) out.regions[i].push_back({p / w, p % w});
    }

    if (spec.fillers > 0) {
        // Fillers live on channels no block or the background uses, so they never match the image.
        std::vector<std::size_t> free;
        for (std::size_t k = 0; k < c; ++k) {
            bool used = bg[k] != 0.0;
            for (const auto& b : spec.blocks) used = used || b.signature[k] != 0.0;
            if (!used) free.push_back(k);
        }
        if (free.empty()) throw ConfigError("no free channels left for filler text tokens");
        Rng fr(derive_seed(seed, kFillerTag));
        for (std::size_t i = 0; i < spec.fillers; ++i) {
            std::vector<double> v(c, 0.0);
            do {
                for (auto k : free) v[k] = fr.normal();
            } while (norm(v) == 0.0);
            out.text.push_back(v);
        }
    }

    out.meta = track_blocks(out.latent, spec);
    return out;
}

double ground_truth_region_iou(const std::vector<Cell>& predicted, const std::vector<Cell>& truth) {
    const std::set<Cell> a(predicted.begin(), predicted.end());
    const std::set<Cell> b(truth.begin(), truth.end());
    std::size_t inter = 0;
    for (const auto& cell : a) inter += b.count(cell);
    const std::size_t uni = a.size() + b.size() - inter;
    return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

std::vector<SceneSpec> default_suite(std::size_t count, std::uint64_t seed) {
    std::vector<SceneSpec> suite;
    Rng rng(seed);
    const char* names[] = {"A", "B", "C"};
    while (suite.size() < count) {
        SceneSpec s;
        const std::size_t n_blocks = 1 + rng.below(3);
        for (std::size_t attempt = 0; s.blocks.size() < n_blocks && attempt < 100; ++attempt) {
            Block b;
            b.name = names[s.blocks.size()];
            b.h = 2 + rng.below(2);
            b.w = 2 + rng.below(2);
            b.dy = static_cast<long>(rng.below(3)) - 1;
            b.dx = static_cast<long>(rng.below(3)) - 1;
            const long span_y = static_cast<long>(s.height - b.h) - std::abs(b.dy) * static_cast<long>(s.frames - 1);
            const long span_x = static_cast<long>(s.width - b.w) - std::abs(b.dx) * static_cast<long>(s.frames - 1);
            b.y = static_cast<long>(rng.below(static_cast<std::uint64_t>(span_y + 1))) +
                  (b.dy < 0 ? static_cast<long>(s.frames - 1) : 0);
            b.x = static_cast<long>(rng.below(static_cast<std::uint64_t>(span_x + 1))) +
                  (b.dx < 0 ? static_cast<long>(s.frames - 1) : 0);
            b.signature = one_hot(s.channels, 1 + s.blocks.size());
            bool clash = false;
            for (const auto& o : s.blocks)
                for (std::size_t f = 0; f < s.frames; ++f) clash = clash || overlaps_at(o, b, f);
            if (!clash) s.blocks.push_back(std::move(b));
        }
        s.validate();
        suite.push_back(std::move(s));
    }
    return suite;
}

}  // namespace fg::synth
