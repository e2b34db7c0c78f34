#pragma once

#include <array>

namespace oracle {

struct PublishedRow {
    const char* method;
    std::array<double, 5> metrics;  // subject, background, dynamic, motion, interaction
    double total;
};

inline constexpr std::array<PublishedRow, 9> kPublishedRows{{
    {"CogVideoX-I2V", {0.9658, 0.9787, 0.1279, 0.6100, 0.4500}, 0.6265},
    {"Open-Sora Plan v1.3", {0.9630, 0.9781, 0.1047, 0.4300, 0.4400}, 0.5832},
    {"LTX-Video", {0.9845, 0.9893, 0.2558, 0.4800, 0.3500}, 0.6119},
    {"Wan2.1-I2V", {0.9685, 0.9870, 0.3512, 0.6920, 0.4880}, 0.6973},
    {"Wan2.2-TI2V", {0.9858, 0.9941, 0.1512, 0.7000, 0.3700}, 0.6402},
    {"HunyuanVideo-I2V", {0.9886, 0.9942, 0.1698, 0.2600, 0.1800}, 0.5185},
    {"SkyReels-V2-I2V", {0.9867, 0.9916, 0.0465, 0.7100, 0.3200}, 0.6110},
    {"FG+Wan2.1-I2V", {0.9694, 0.9875, 0.3860, 0.7500, 0.5320}, 0.7250},
    {"FG+HunyuanVideo-I2V", {0.9867, 0.9937, 0.2270, 0.3480, 0.2300}, 0.5571},
}};

}  // namespace oracle
