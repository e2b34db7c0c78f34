#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace fg {

using Shape = std::vector<std::size_t>;

/// Dense row-major tensor of doubles.
///
/// Extents are strictly positive and `data().size()` always equals the product
/// of the extents. A default-constructed tensor has rank 0 and no storage; it
/// is the only "empty" state and is rejected by serialization.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape, double fill = 0.0);
    Tensor(Shape shape, std::vector<double> data);

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t size() const noexcept { return data_.size(); }
    std::size_t extent(std::size_t axis) const { return shape_.at(axis); }
    bool empty() const noexcept { return data_.empty(); }

    std::span<double> data() noexcept { return data_; }
    std::span<const double> data() const noexcept { return data_; }
    const std::vector<double>& values() const noexcept { return data_; }

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    std::size_t offset(std::initializer_list<std::size_t> index) const;
    double& at(std::initializer_list<std::size_t> index) { return data_[offset(index)]; }
    double at(std::initializer_list<std::size_t> index) const { return data_[offset(index)]; }

    /// Contiguous slice along the leading axis: element `i` of axis 0.
    std::span<double> slice(std::size_t i);
    std::span<const double> slice(std::size_t i) const;

    bool all_finite() const noexcept;

private:
    Shape shape_;
    std::vector<double> data_;
};

std::size_t shape_volume(const Shape& shape);
std::string shape_string(const Shape& shape);

/// Bitwise equality of shape and payload (distinguishes -0.0 from 0.0).
bool bit_equal(const Tensor& a, const Tensor& b);
bool bit_equal(std::span<const double> a, std::span<const double> b);

double max_abs_diff(const Tensor& a, const Tensor& b);

// ---------------------------------------------------------------------------
// Vector arithmetic. Reductions run in ascending index order.

double dot(std::span<const double> a, std::span<const double> b);
double norm(std::span<const double> a);

/// a·b / (|a||b|). Throws NumericError("degenerate vector") on a zero-norm input.
double cosine_similarity(std::span<const double> a, std::span<const double> b);

/// y += alpha * x
void axpy(double alpha, std::span<const double> x, std::span<double> y);

/// Per-frame affine rescale to [0,1], where a frame is the block of trailing
/// `frame_rank` axes. Constant frames map to all zeros.
Tensor minmax_normalize(const Tensor& map, std::size_t frame_rank = 2);

// ---------------------------------------------------------------------------
// Domain containers.

/// Latent video of shape [frames, height, width, channels].
class LatentVideo {
public:
    LatentVideo() = default;
    LatentVideo(std::size_t frames, std::size_t height, std::size_t width, std::size_t channels,
                double fill = 0.0);
    explicit LatentVideo(Tensor tensor);

    std::size_t frames() const { return tensor_.extent(0); }
    std::size_t height() const { return tensor_.extent(1); }
    std::size_t width() const { return tensor_.extent(2); }
    std::size_t channels() const { return tensor_.extent(3); }
    std::size_t cells() const { return frames() * height() * width(); }

    std::span<double> cell(std::size_t f, std::size_t y, std::size_t x);
    std::span<const double> cell(std::size_t f, std::size_t y, std::size_t x) const;

    Tensor& tensor() noexcept { return tensor_; }
    const Tensor& tensor() const noexcept { return tensor_; }
    const Shape& shape() const noexcept { return tensor_.shape(); }

private:
    Tensor tensor_;
};

enum class Modality { text, image, anchor };

std::string to_string(Modality m);
Modality modality_from_string(const std::string& s);

/// Ordered list of equal-length embedding vectors.
class TokenSequence {
public:
    TokenSequence(Modality modality, std::size_t dim);
    /// Builds from a [count, dim] tensor.
    TokenSequence(Modality modality, const Tensor& tokens);

    Modality modality() const noexcept { return modality_; }
    std::size_t dim() const noexcept { return dim_; }
    std::size_t size() const noexcept { return dim_ == 0 ? 0 : values_.size() / dim_; }
    bool empty() const noexcept { return values_.empty(); }

    void push_back(std::span<const double> token);
    std::span<double> token(std::size_t i);
    std::span<const double> token(std::size_t i) const;

    /// [count, dim] tensor; throws for an empty sequence.
    Tensor to_tensor() const;

    /// Non-anchor sequences must hold at least one token.
    void validate() const;

private:
    Modality modality_;
    std::size_t dim_;
    std::vector<double> values_;
};

// ---------------------------------------------------------------------------
// Serialization.
//
// File layout (all little-endian):
//   "FGT1" | u32 rank | rank x u32 extent | product(extents) x f64, row-major

std::string encode_tensor(const Tensor& t);
Tensor decode_tensor(std::string_view bytes);
void serialize_tensor(const Tensor& t, const std::filesystem::path& path);
Tensor deserialize_tensor(const std::filesystem::path& path);

/// CSV with header `frame,y,x,value` for a [F,H,W] (or [H,W]) map; values
/// printed with 17 significant digits.
void export_map_csv(const Tensor& map, const std::filesystem::path& path);

/// Formats a double with 17 significant digits (round-trips exactly).
std::string format_real(double v);

}  // namespace fg
