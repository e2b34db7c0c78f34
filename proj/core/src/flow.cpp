#include "fg/flow.hpp"

#include <cmath>

#include "fg/error.hpp"

namespace fg::flow {

FlowPath::FlowPath(LatentVideo data, LatentVideo noise) : z0(std::move(data)), z1(std::move(noise)) {
    if (z0.shape() != z1.shape())
        throw ConfigError("flow path endpoints differ in shape: " + shape_string(z0.shape()) + " vs " +
                          shape_string(z1.shape()));
}

LatentVideo interpolate(const FlowPath& path, double t) {
    if (!(t >= 0.0 && t <= 1.0)) throw ConfigError("interpolate: t must lie in [0,1]");
    LatentVideo out = path.z1;
    auto o = out.tensor().data();
    const auto a = path.z1.tensor().data();
    const auto b = path.z0.tensor().data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = (1.0 - t) * a[i] + t * b[i];
    return out;
}

LatentVideo target_velocity(const FlowPath& path) {
    LatentVideo out = path.z0;
    auto o = out.tensor().data();
    const auto n = path.z1.tensor().data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] -= n[i];
    return out;
}

double mean_squared_error(const Tensor& pred, const Tensor& target) {
    if (pred.shape() != target.shape())
        throw ConfigError("model output shape " + shape_string(pred.shape()) + " != target shape " +
                          shape_string(target.shape()));
    double s = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const double d = pred[i] - target[i];
        s += d * d;
    }
    return s / static_cast<double>(pred.size());
}

double rf_loss(const VelocityFn& model, const FlowPath& path, double t) {
    const LatentVideo zt = interpolate(path, t);
    const LatentVideo v = model(zt, t);
    return mean_squared_error(v.tensor(), target_velocity(path).tensor());
}

LatentVideo euler_sample(const VelocityFn& model, LatentVideo z, std::size_t steps) {
    if (steps == 0) throw ConfigError("euler_sample: steps must be >= 1");
    const double dt = 1.0 / static_cast<double>(steps);
    for (std::size_t k = 0; k < steps; ++k) {
        const double t = static_cast<double>(k) * dt;
        const LatentVideo v = model(z, t);
        if (v.shape() != z.shape()) throw ConfigError("velocity shape does not match latent shape");
        axpy(dt, v.tensor().data(), z.tensor().data());
        if (!z.tensor().all_finite())
            throw NumericError("euler_sample: non-finite state at step " + std::to_string(k));
    }
    return z;
}

LatentVideo standard_normal_like(const Shape& shape, Rng& rng) {
    LatentVideo z{Tensor(shape)};
    for (auto& v : z.tensor().data()) v = rng.normal();
    return z;
}

nlohmann::json to_json(const FlowConfig& c) {
    return {{"steps", c.steps}, {"seed", c.seed}, {"guidance", c.guidance ? "on" : "off"}};
}

FlowConfig flow_config_from_json(const nlohmann::json& j) {
    FlowConfig c;
    c.steps = j.value("steps", c.steps);
    c.seed = j.value("seed", c.seed);
    if (j.contains("guidance")) {
        const auto& g = j.at("guidance");
        c.guidance = g.is_boolean() ? g.get<bool>() : g.get<std::string>() == "on";
    }
    return c;
}

}  // namespace fg::flow
