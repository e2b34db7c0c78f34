#include "fg/diagnostics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "fg/error.hpp"
#include "fg/io.hpp"

namespace fg::diagnostics {

double morans_i_frame(std::span<const double> x, std::size_t height, std::size_t width,
                      const MoranOptions& options) {
    const std::size_t n = height * width;
    if (x.size() != n || n < 2) throw ConfigError("morans_i_frame: frame needs at least 2 cells");
    const auto [lo, hi] = std::minmax_element(x.begin(), x.end());
    if (*lo == *hi) return 0.0;

    double mean = 0.0;
    for (double v : x) mean += v;
    mean /= static_cast<double>(n);
    std::vector<double> d(n);
    double denom = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        d[i] = x[i] - mean;
        denom += d[i] * d[i];
    }

    double cross = 0.0;
    double weight_sum = 0.0;
    const auto h = static_cast<std::ptrdiff_t>(height);
    const auto w = static_cast<std::ptrdiff_t>(width);
    for (std::ptrdiff_t y = 0; y < h; ++y) {
        for (std::ptrdiff_t xx = 0; xx < w; ++xx) {
            double neighbours = 0.0;
            for (std::ptrdiff_t dy = -1; dy <= 1; ++dy) {
                for (std::ptrdiff_t dx = -1; dx <= 1; ++dx) {
                    if (dy == 0 && dx == 0) continue;
                    const auto ny = y + dy;
                    const auto nx = xx + dx;
                    if (ny < 0 || ny >= h || nx < 0 || nx >= w) continue;
                    neighbours += d[static_cast<std::size_t>(ny * w + nx)];
                    weight_sum += 1.0;
                }
            }
            cross += d[static_cast<std::size_t>(y * w + xx)] * neighbours;
        }
    }
    double value = static_cast<double>(n) * cross / denom;
    if (options.normalize_by_w) value /= weight_sum;
    return value;
}

double morans_i_frame(const Tensor& frame, const MoranOptions& options) {
    if (frame.rank() != 2) throw ConfigError("morans_i_frame expects an [H,W] map");
    return morans_i_frame(frame.data(), frame.extent(0), frame.extent(1), options);
}

namespace {

void check_map(const Tensor& map, const char* who) {
    if (map.rank() != 3) throw ConfigError(std::string(who) + " expects an [F,H,W] map");
}

}  // namespace

double morans_i_layer(const Tensor& map, const MoranOptions& options) {
    check_map(map, "morans_i_layer");
    const std::size_t frames = map.extent(0);
    double sum = 0.0;
    for (std::size_t f = 0; f < frames; ++f) sum += morans_i_frame(map.slice(f), map.extent(1), map.extent(2), options);
    return sum / static_cast<double>(frames);
}

double population_std(std::span<const double> values) {
    if (values.empty()) throw ConfigError("population_std: no values");
    double mean = 0.0;
    for (double v : values) mean += v;
    mean /= static_cast<double>(values.size());
    double var = 0.0;
    for (double v : values) var += (v - mean) * (v - mean);
    return std::sqrt(var / static_cast<double>(values.size()));
}

double std_layer(const Tensor& map) {
    check_map(map, "std_layer");
    double sum = 0.0;
    for (std::size_t f = 0; f < map.extent(0); ++f) sum += population_std(map.slice(f));
    return sum / static_cast<double>(map.extent(0));
}

// ---------------------------------------------------------------------------

WeakRule WeakRule::bottom(double q) {
    if (!(q > 0.0 && q < 1.0)) throw ConfigError("weak-layer fraction must lie in (0,1)");
    WeakRule r;
    r.kind = Kind::bottom_fraction;
    r.fraction = q;
    return r;
}

WeakRule WeakRule::list(std::vector<std::size_t> layers) {
    WeakRule r;
    r.kind = Kind::explicit_list;
    r.layers = std::move(layers);
    return r;
}

std::vector<std::size_t> parse_index_list(const std::string& text) {
    std::set<std::size_t> out;
    std::stringstream ss(text);
    std::string part;
    try {
        while (std::getline(ss, part, ',')) {
            if (part.empty()) continue;
            const auto dash = part.find('-');
            if (dash == std::string::npos) {
                out.insert(std::stoul(part));
            } else {
                const auto a = std::stoul(part.substr(0, dash));
                const auto b = std::stoul(part.substr(dash + 1));
                if (b < a) throw ConfigError("descending index range '" + part + "'");
                for (auto i = a; i <= b; ++i) out.insert(i);
            }
        }
    } catch (const std::logic_error&) {
        throw ConfigError("malformed index list '" + text + "'");
    }
    return {out.begin(), out.end()};
}

WeakRule WeakRule::parse(const std::string& text) {
    const auto colon = text.find(':');
    if (colon == std::string::npos) throw ConfigError("weak rule must be bottom:<q> or list:<indices>");
    const std::string kind = text.substr(0, colon);
    const std::string arg = text.substr(colon + 1);
    if (kind == "bottom") {
        try {
            return bottom(std::stod(arg));
        } catch (const std::logic_error&) {
            throw ConfigError("malformed fraction in weak rule '" + text + "'");
        }
    }
    if (kind == "list") return list(parse_index_list(arg));
    throw ConfigError("unknown weak rule kind '" + kind + "'");
}

std::string WeakRule::to_string() const {
    if (kind == Kind::bottom_fraction) {
        std::ostringstream os;
        os << "bottom:" << fraction;
        return os.str();
    }
    std::string s = "list:";
    for (std::size_t i = 0; i < layers.size(); ++i) s += (i ? "," : "") + std::to_string(layers[i]);
    return s;
}

std::set<std::size_t> identify_weak_layers(const std::vector<LayerProfile>& profiles, const WeakRule& rule) {
    if (profiles.empty()) throw ConfigError("identify_weak_layers: no profiles");
    std::set<std::size_t> known;
    for (const auto& p : profiles) known.insert(p.layer);

    if (rule.kind == WeakRule::Kind::explicit_list) {
        for (auto l : rule.layers)
            if (!known.count(l)) throw ConfigError("weak layer index " + std::to_string(l) + " out of range");
        return {rule.layers.begin(), rule.layers.end()};
    }
    if (!(rule.fraction > 0.0 && rule.fraction < 1.0)) throw ConfigError("weak-layer fraction must lie in (0,1)");
    std::vector<LayerProfile> sorted = profiles;
    std::sort(sorted.begin(), sorted.end(), [](const LayerProfile& a, const LayerProfile& b) {
        if (a.morans_i != b.morans_i) return a.morans_i < b.morans_i;
        return a.layer < b.layer;
    });
    const auto count = static_cast<std::size_t>(std::ceil(rule.fraction * static_cast<double>(profiles.size())));
    std::set<std::size_t> out;
    for (std::size_t i = 0; i < count && i < sorted.size(); ++i) out.insert(sorted[i].layer);
    return out;
}

void mark_weak(std::vector<LayerProfile>& profiles, const std::set<std::size_t>& weak) {
    for (auto& p : profiles) p.weak = weak.count(p.layer) != 0;
}

// ---------------------------------------------------------------------------

void export_heatmap(const std::vector<HeatmapRow>& rows, const std::filesystem::path& path) {
    std::string out = "step,layer,keyword,value\n";
    for (const auto& r : rows)
        out += std::to_string(r.step) + ',' + std::to_string(r.layer) + ',' + std::to_string(r.keyword) + ',' +
               format_real(r.value) + '\n';
    write_file(path, out);
}

std::vector<HeatmapRow> read_heatmap(const std::filesystem::path& path) {
    std::stringstream in(read_file(path));
    std::string line;
    if (!std::getline(in, line) || line != "step,layer,keyword,value")
        throw IoError(path.string() + ": missing heatmap header");
    std::vector<HeatmapRow> rows;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::stringstream ls(line);
        std::string a, b, c, v;
        if (!std::getline(ls, a, ',') || !std::getline(ls, b, ',') || !std::getline(ls, c, ',') ||
            !std::getline(ls, v))
            throw IoError(path.string() + ": malformed heatmap row '" + line + "'");
        try {
            rows.push_back({std::stoul(a), std::stoul(b), std::stoul(c), std::stod(v)});
        } catch (const std::logic_error&) {
            throw IoError(path.string() + ": malformed heatmap row '" + line + "'");
        }
    }
    return rows;
}

void export_profiles(const std::vector<LayerProfile>& profiles, const std::filesystem::path& path) {
    std::string out = "layer,morans_i,std\n";
    for (const auto& p : profiles)
        out += std::to_string(p.layer) + ',' + format_real(p.morans_i) + ',' + format_real(p.std) + '\n';
    write_file(path, out);
}

nlohmann::json to_json(const std::vector<LayerProfile>& profiles) {
    auto arr = nlohmann::json::array();
    for (const auto& p : profiles)
        arr.push_back({{"layer", p.layer}, {"morans_i", p.morans_i}, {"std", p.std}, {"weak", p.weak}});
    return arr;
}

std::vector<LayerProfile> profiles_from_json(const nlohmann::json& j) {
    try {
        std::vector<LayerProfile> out;
        for (const auto& e : j)
            out.push_back({e.at("layer").get<std::size_t>(), e.at("morans_i").get<double>(), e.at("std").get<double>(),
                           e.value("weak", false)});
        return out;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("layer profiles: ") + e.what());
    }
}

}  // namespace fg::diagnostics
