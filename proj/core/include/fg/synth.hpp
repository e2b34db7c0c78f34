#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fg/dit.hpp"
#include "fg/focal_guidance.hpp"
#include "fg/tensor.hpp"

namespace fg::synth {

using guidance::Cell;

/// A rectangular block of constant latent content moving by (dy, dx) cells per frame.
struct Block {
    std::string name;
    long y = 0;
    long x = 0;
    std::size_t h = 1;
    std::size_t w = 1;
    long dy = 0;
    long dx = 0;
    std::vector<double> signature;  // channel content, length C

    long y_at(std::size_t frame) const { return y + dy * static_cast<long>(frame); }
    long x_at(std::size_t frame) const { return x + dx * static_cast<long>(frame); }
};

/// Text token i is bound to block i; `fillers` unbound tokens follow the bound ones.
struct SceneSpec {
    std::size_t height = 8;
    std::size_t width = 8;
    std::size_t frames = 2;
    std::size_t channels = 8;
    double noise = 0.05;
    std::vector<double> background;  // empty: unit vector on channel 0
    std::vector<Block> blocks;
    std::size_t fillers = 2;

    void validate() const;
    std::vector<double> background_or_default() const;
};

nlohmann::json to_json(const SceneSpec& s);
SceneSpec scene_from_json(const nlohmann::json& j);

/// One-hot signature on channel `channel` of a C-channel latent.
std::vector<double> one_hot(std::size_t channels, std::size_t channel, double amplitude = 1.0);

/// Per-frame block centroid (cell units); `visible` false where the block is not seen.
struct Track {
    std::string name;
    std::vector<double> cy;
    std::vector<double> cx;
    std::vector<bool> visible;
};

struct VideoMeta {
    std::size_t frames = 0;
    std::vector<Track> tracks;

    const Track& track(const std::string& name) const;
};

nlohmann::json to_json(const VideoMeta& m);
VideoMeta video_meta_from_json(const nlohmann::json& j);

/// Locates each block in a latent by cosine > 0.5 against its signature.
VideoMeta track_blocks(const LatentVideo& video, const SceneSpec& spec);

struct RenderedScene {
    LatentVideo latent;                       // clean z0, [F, H, W, C]
    LatentVideo reference;                    // frame 0 of z0, zeros elsewhere
    TokenSequence text{Modality::text, 1};    // [B + fillers, C]
    TokenSequence image{Modality::image, 1};  // frame-0 cells + noise, [H*W, C]
    std::vector<std::vector<Cell>> regions;   // visible frame-0 cells per block
    std::vector<std::size_t> keyword_tokens;  // text index of block i
    VideoMeta meta;

    dit::Conditioning conditioning() const;
};

RenderedScene render_scene(const SceneSpec& spec, std::uint64_t seed);

/// |A n B| / |A u B| over cell sets; 1 when both are empty.
double ground_truth_region_iou(const std::vector<Cell>& predicted, const std::vector<Cell>& truth);

/// Random non-overlapping scenes on the default 8x8x2 grid with 1-3 blocks.
std::vector<SceneSpec> default_suite(std::size_t count, std::uint64_t seed);

}  // namespace fg::synth
