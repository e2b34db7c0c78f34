#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>

#include <nlohmann/json.hpp>

#include "fg/rng.hpp"
#include "fg/tensor.hpp"

namespace fg::flow {

/// Straight path between a data latent and a noise latent of the same shape.
struct FlowPath {
    FlowPath(LatentVideo data, LatentVideo noise);

    LatentVideo z0;  // data endpoint
    LatentVideo z1;  // noise endpoint
};

/// Predicted velocity at (z_t, t); conditioning is bound into the callable.
using VelocityFn = std::function<LatentVideo(const LatentVideo& z, double t)>;

/// z_t = (1 - t) z1 + t z0; noise at t = 0, data at t = 1.
LatentVideo interpolate(const FlowPath& path, double t);

/// Ground-truth velocity z0 - z1.
LatentVideo target_velocity(const FlowPath& path);

/// Mean over entries of (pred - target)^2.
double mean_squared_error(const Tensor& pred, const Tensor& target);

/// Rectified-flow objective at a single t (mean reduction).
double rf_loss(const VelocityFn& model, const FlowPath& path, double t);

/// Explicit Euler from t = 0 (noise) to t = 1 (data) with uniform steps.
/// Throws NumericError naming the step when the state stops being finite.
LatentVideo euler_sample(const VelocityFn& model, LatentVideo z1, std::size_t steps);

LatentVideo standard_normal_like(const Shape& shape, Rng& rng);

struct FlowConfig {
    std::size_t steps = 20;
    std::uint64_t seed = 0;
    bool guidance = false;
};

nlohmann::json to_json(const FlowConfig& c);
FlowConfig flow_config_from_json(const nlohmann::json& j);

}  // namespace fg::flow
