#pragma once

#include <cstddef>
#include <filesystem>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fg/tensor.hpp"

namespace fg::diagnostics {

/// Spatial weights are 1 between 8-connected neighbours (no wraparound) and 0
/// elsewhere, including the diagonal.
struct MoranOptions {
    /// Divide by W = sum(w_ij), giving the textbook statistic. Off by default:
    /// the default is I = N * sum_ij w_ij d_i d_j / sum_i d_i^2 with no 1/W.
    bool normalize_by_w = false;
};

/// Moran's I of one [H, W] frame. A constant frame returns 0.
double morans_i_frame(const Tensor& frame, const MoranOptions& options = {});
double morans_i_frame(std::span<const double> frame, std::size_t height, std::size_t width,
                      const MoranOptions& options = {});

/// Mean over frames of a [F, H, W] map.
double morans_i_layer(const Tensor& map, const MoranOptions& options = {});

/// Population standard deviation.
double population_std(std::span<const double> values);

/// Mean over frames of the per-frame population std of a [F, H, W] map.
double std_layer(const Tensor& map);

struct LayerProfile {
    std::size_t layer = 0;
    double morans_i = 0.0;
    double std = 0.0;
    bool weak = false;
};

/// Weak-layer selection: the ceil(q * L) layers with the lowest Moran's I
/// (ties to the lower index), or an explicit index list.
struct WeakRule {
    enum class Kind { bottom_fraction, explicit_list };

    Kind kind = Kind::bottom_fraction;
    double fraction = 0.5;
    std::vector<std::size_t> layers;

    static WeakRule bottom(double q);
    static WeakRule list(std::vector<std::size_t> layers);
    /// "bottom:<q>" or "list:<a>-<b>[,<c>...]".
    static WeakRule parse(const std::string& text);
    std::string to_string() const;
};

std::set<std::size_t> identify_weak_layers(const std::vector<LayerProfile>& profiles, const WeakRule& rule);

/// Sets each profile's weak flag from `weak`.
void mark_weak(std::vector<LayerProfile>& profiles, const std::set<std::size_t>& weak);

/// Parses "2-5" / "2,3,7" / "11-26,30" into a sorted index list.
std::vector<std::size_t> parse_index_list(const std::string& text);

struct HeatmapRow {
    std::size_t step = 0;
    std::size_t layer = 0;
    std::size_t keyword = 0;
    double value = 0.0;
};

/// `step,layer,keyword,value` rows in the given order.
void export_heatmap(const std::vector<HeatmapRow>& rows, const std::filesystem::path& path);
std::vector<HeatmapRow> read_heatmap(const std::filesystem::path& path);

/// `layer,morans_i,std` rows.
void export_profiles(const std::vector<LayerProfile>& profiles, const std::filesystem::path& path);

nlohmann::json to_json(const std::vector<LayerProfile>& profiles);
std::vector<LayerProfile> profiles_from_json(const nlohmann::json& j);

}  // namespace fg::diagnostics
