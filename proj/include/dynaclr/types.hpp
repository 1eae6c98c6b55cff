#pragma once

#include <array>
#include <compare>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace dynaclr {

/// Identity of one tracked observation: (fov, track, frame).
struct NodeKey {
    std::string fov;
    std::int64_t track = 0;
    int t = 0;

    auto operator<=>(const NodeKey&) const = default;
    bool operator==(const NodeKey&) const = default;
};

std::string to_string(const NodeKey& key);

struct NodeKeyHash {
    std::size_t operator()(const NodeKey& k) const noexcept {
        std::size_t h = std::hash<std::string>{}(k.fov);
        h ^= std::hash<std::int64_t>{}(k.track) + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2);
        h ^= std::hash<int>{}(k.t) + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2);
        return h;
    }
};

/// Shape of a 4D single-timepoint volume, C x Z x Y x X.
struct Shape4 {
    int c = 0, z = 0, y = 0, x = 0;

    std::size_t size() const noexcept {
        return static_cast<std::size_t>(c) * z * y * x;
    }
    bool operator==(const Shape4&) const = default;
};

/// Spatial extent (Z, Y, X).
struct Size3 {
    int z = 0, y = 0, x = 0;
    bool operator==(const Size3&) const = default;
};

/// Dense C-order float volume.
struct Volume {
    Shape4 shape;
    std::vector<float> data;

    Volume() = default;
    explicit Volume(Shape4 s) : shape(s), data(s.size(), 0.0f) {}

    std::size_t index(int c, int z, int y, int x) const noexcept {
        return ((static_cast<std::size_t>(c) * shape.z + z) * shape.y + y) * shape.x + x;
    }
    float& at(int c, int z, int y, int x) noexcept { return data[index(c, z, y, x)]; }
    float at(int c, int z, int y, int x) const noexcept { return data[index(c, z, y, x)]; }

    std::size_t channel_size() const noexcept {
        return static_cast<std::size_t>(shape.z) * shape.y * shape.x;
    }
    float* channel(int c) noexcept { return data.data() + c * channel_size(); }
    const float* channel(int c) const noexcept { return data.data() + c * channel_size(); }
};

/// Voxel-space centroid (z, y, x).
struct Centroid {
    double z = 0, y = 0, x = 0;
    bool operator==(const Centroid&) const = default;
};

}  // namespace dynaclr
