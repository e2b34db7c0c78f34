#include "fg/tensor.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <sstream>

#include "fg/error.hpp"
#include "fg/io.hpp"

namespace fg {

std::size_t shape_volume(const Shape& shape) {
    std::size_t n = 1;
    for (auto e : shape) n *= e;
    return n;
}

std::string shape_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ']';
    return os.str();
}

namespace {

void check_extents(const Shape& shape) {
    for (auto e : shape)
        if (e == 0) throw ConfigError("tensor extents must be positive, got " + shape_string(shape));
}

}  // namespace

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)) {
    check_extents(shape_);
    data_.assign(shape_.empty() ? 0 : shape_volume(shape_), fill);
}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    check_extents(shape_);
    if ((shape_.empty() && !data_.empty()) || (!shape_.empty() && data_.size() != shape_volume(shape_)))
        throw ConfigError("tensor data length " + std::to_string(data_.size()) + " does not match shape " +
                          shape_string(shape_));
}

std::size_t Tensor::offset(std::initializer_list<std::size_t> index) const {
    if (index.size() != shape_.size()) throw ConfigError("index rank mismatch");
    std::size_t off = 0;
    std::size_t axis = 0;
    for (auto i : index) {
        if (i >= shape_[axis]) throw ConfigError("index out of range");
        off = off * shape_[axis] + i;
        ++axis;
    }
    return off;
}

std::span<double> Tensor::slice(std::size_t i) {
    const std::size_t stride = data_.size() / shape_.at(0);
    return std::span<double>(data_).subspan(i * stride, stride);
}

std::span<const double> Tensor::slice(std::size_t i) const {
    const std::size_t stride = data_.size() / shape_.at(0);
    return std::span<const double>(data_).subspan(i * stride, stride);
}

bool Tensor::all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

bool bit_equal(std::span<const double> a, std::span<const double> b) {
    return a.size() == b.size() && (a.empty() || std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0);
}

bool bit_equal(const Tensor& a, const Tensor& b) {
    return a.shape() == b.shape() && bit_equal(a.data(), b.data());
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) throw ConfigError("max_abs_diff: shape mismatch");
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

double dot(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw ConfigError("dot: dimension mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

double norm(std::span<const double> a) { return std::sqrt(dot(a, a)); }

double cosine_similarity(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw ConfigError("cosine_similarity: dimension mismatch");
    const double na = norm(a);
    const double nb = norm(b);
    if (!(na > 0.0) || !(nb > 0.0)) throw NumericError("degenerate vector");
    const double c = dot(a, b) / (na * nb);
    return std::clamp(c, -1.0, 1.0);
}

void axpy(double alpha, std::span<const double> x, std::span<double> y) {
    if (x.size() != y.size()) throw ConfigError("axpy: dimension mismatch");
    for (std::size_t i = 0; i < x.size(); ++i) y[i] += alpha * x[i];
}

Tensor minmax_normalize(const Tensor& map, std::size_t frame_rank) {
    if (map.empty()) throw ConfigError("minmax_normalize: empty map");
    if (frame_rank == 0 || frame_rank > map.rank())
        throw ConfigError("minmax_normalize: frame rank out of range");
    std::size_t frame = 1;
    for (std::size_t a = map.rank() - frame_rank; a < map.rank(); ++a) frame *= map.extent(a);

    Tensor out = map;
    auto d = out.data();
    for (std::size_t start = 0; start < d.size(); start += frame) {
        auto f = d.subspan(start, frame);
        const auto [lo, hi] = std::minmax_element(f.begin(), f.end());
        const double mn = *lo;
        const double range = *hi - mn;
        if (range > 0.0) {
            for (auto& v : f) v = (v - mn) / range;
        } else {
            std::fill(f.begin(), f.end(), 0.0);
        }
    }
    return out;
}

// ---------------------------------------------------------------------------

LatentVideo::LatentVideo(std::size_t frames, std::size_t height, std::size_t width, std::size_t channels,
                         double fill)
    : tensor_({frames, height, width, channels}, fill) {}

LatentVideo::LatentVideo(Tensor tensor) : tensor_(std::move(tensor)) {
    if (tensor_.rank() != 4) throw ConfigError("latent video must be rank 4, got " + shape_string(tensor_.shape()));
}

std::span<double> LatentVideo::cell(std::size_t f, std::size_t y, std::size_t x) {
    const std::size_t c = channels();
    return tensor_.data().subspan(((f * height() + y) * width() + x) * c, c);
}

std::span<const double> LatentVideo::cell(std::size_t f, std::size_t y, std::size_t x) const {
    const std::size_t c = channels();
    return tensor_.data().subspan(((f * height() + y) * width() + x) * c, c);
}

std::string to_string(Modality m) {
    switch (m) {
        case Modality::text: return "text";
        case Modality::image: return "image";
        case Modality::anchor: return "anchor";
    }
    return "unknown";
}

Modality modality_from_string(const std::string& s) {
    if (s == "text") return Modality::text;
    if (s == "image") return Modality::image;
    if (s == "anchor") return Modality::anchor;
    throw ConfigError("unknown modality '" + s + "'");
}

TokenSequence::TokenSequence(Modality modality, std::size_t dim) : modality_(modality), dim_(dim) {
    if (dim_ == 0) throw ConfigError("token dimension must be positive");
}

TokenSequence::TokenSequence(Modality modality, const Tensor& tokens) : modality_(modality) {
    if (tokens.rank() != 2) throw ConfigError("token tensor must be rank 2");
    dim_ = tokens.extent(1);
    values_ = tokens.values();
}

void TokenSequence::push_back(std::span<const double> token) {
    if (token.size() != dim_)
        throw ConfigError("token length " + std::to_string(token.size()) + " != " + std::to_string(dim_));
    values_.insert(values_.end(), token.begin(), token.end());
}

std::span<double> TokenSequence::token(std::size_t i) {
    return std::span<double>(values_).subspan(i * dim_, dim_);
}

std::span<const double> TokenSequence::token(std::size_t i) const {
    return std::span<const double>(values_).subspan(i * dim_, dim_);
}

Tensor TokenSequence::to_tensor() const {
    if (empty()) throw ConfigError("cannot convert an empty token sequence to a tensor");
    return Tensor({size(), dim_}, values_);
}

void TokenSequence::validate() const {
    if (empty() && modality_ != Modality::anchor)
        throw ConfigError(to_string(modality_) + " token sequence must not be empty");
}

// ---------------------------------------------------------------------------

namespace {

constexpr char kMagic[4] = {'F', 'G', 'T', '1'};

void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
}

void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
}

std::uint64_t get_le(std::string_view bytes, std::size_t pos, int width) {
    std::uint64_t v = 0;
    for (int i = 0; i < width; ++i)
        v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[pos + i])) << (8 * i);
    return v;
}

}  // namespace

std::string encode_tensor(const Tensor& t) {
    if (t.rank() == 0) throw ConfigError("cannot serialize an empty-shape tensor");
    if (!t.all_finite()) throw NumericError("cannot serialize a tensor with non-finite values");
    std::string out;
    out.reserve(8 + 4 * t.rank() + 8 * t.size());
    out.append(kMagic, 4);
    put_u32(out, static_cast<std::uint32_t>(t.rank()));
    for (auto e : t.shape()) put_u32(out, static_cast<std::uint32_t>(e));
    for (double v : t.data()) put_u64(out, std::bit_cast<std::uint64_t>(v));
    return out;
}

Tensor decode_tensor(std::string_view bytes) {
    if (bytes.size() < 8 || bytes.substr(0, 4) != std::string_view(kMagic, 4))
        throw IoError("bad magic: not an FGT1 tensor file");
    const auto rank = static_cast<std::size_t>(get_le(bytes, 4, 4));
    if (rank == 0) throw IoError("empty-shape tensor file");
    if (bytes.size() < 8 + 4 * rank) throw IoError("truncated tensor header");
    Shape shape(rank);
    for (std::size_t i = 0; i < rank; ++i) {
        shape[i] = static_cast<std::size_t>(get_le(bytes, 8 + 4 * i, 4));
        if (shape[i] == 0) throw IoError("tensor file has a zero extent");
    }
    const std::size_t header = 8 + 4 * rank;
    const std::size_t n = shape_volume(shape);
    if (bytes.size() != header + 8 * n)
        throw IoError("tensor payload length does not match shape " + shape_string(shape));
    std::vector<double> data(n);
    for (std::size_t i = 0; i < n; ++i) {
        data[i] = std::bit_cast<double>(get_le(bytes, header + 8 * i, 8));
        if (!std::isfinite(data[i])) throw NumericError("tensor file contains a non-finite value");
    }
    return Tensor(std::move(shape), std::move(data));
}

void serialize_tensor(const Tensor& t, const std::filesystem::path& path) {
    write_file(path, encode_tensor(t));
}

Tensor deserialize_tensor(const std::filesystem::path& path) {
    try {
        return decode_tensor(read_file(path));
    } catch (const IoError& e) {
        throw IoError(path.string() + ": " + e.what());
    }
}

std::string format_real(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

void export_map_csv(const Tensor& map, const std::filesystem::path& path) {
    std::size_t frames = 1;
    std::size_t h = 0;
    std::size_t w = 0;
    if (map.rank() == 3) {
        frames = map.extent(0);
        h = map.extent(1);
        w = map.extent(2);
    } else if (map.rank() == 2) {
        h = map.extent(0);
        w = map.extent(1);
    } else {
        throw ConfigError("export_map_csv expects a [F,H,W] or [H,W] map");
    }
    std::string out = "frame,y,x,value\n";
    for (std::size_t f = 0; f < frames; ++f)
        for (std::size_t y = 0; y < h; ++y)
            for (std::size_t x = 0; x < w; ++x) {
                out += std::to_string(f) + ',' + std::to_string(y) + ',' + std::to_string(x) + ',' +
                       format_real(map[(f * h + y) * w + x]) + '\n';
            }
    write_file(path, out);
}

}  // namespace fg
