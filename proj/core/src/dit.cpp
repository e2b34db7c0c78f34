#include "fg/dit.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>

#include "fg/error.hpp"
#include "fg/flow.hpp"
#include "fg/io.hpp"
#include "fg/parallel.hpp"
#include "fg/rng.hpp"

namespace fg::dit {

std::string to_string(ConditioningMode m) {
    return m == ConditioningMode::cross_attention ? "cross_attention" : "token_concat";
}

ConditioningMode conditioning_mode_from_string(const std::string& s) {
    if (s == "cross_attention" || s == "cross") return ConditioningMode::cross_attention;
    if (s == "token_concat" || s == "concat") return ConditioningMode::token_concat;
    throw ConfigError("unknown conditioning mode '" + s + "'");
}

void DitConfig::validate() const {
    if (layers < 2) throw ConfigError("DiT needs at least 2 layers");
    if (hidden == 0 || heads == 0 || hidden % heads != 0)
        throw ConfigError("hidden dim must be a positive multiple of heads");
    if (hidden % 2 != 0) throw ConfigError("hidden dim must be even for the timestep embedding");
    if (mlp_ratio == 0 || latent_channels == 0 || text_dim == 0 || image_dim == 0)
        throw ConfigError("DiT dimensions must be positive");
}

nlohmann::json to_json(const DitConfig& c) {
    return {{"layers", c.layers},
            {"hidden", c.hidden},
            {"heads", c.heads},
            {"mlp_ratio", c.mlp_ratio},
            {"latent_channels", c.latent_channels},
            {"text_dim", c.text_dim},
            {"image_dim", c.image_dim},
            {"conditioning_mode", to_string(c.mode)},
            {"seed", c.seed},
            {"zero_init_output", c.zero_init_output}};
}

DitConfig dit_config_from_json(const nlohmann::json& j) {
    DitConfig c;
    c.layers = j.value("layers", c.layers);
    c.hidden = j.value("hidden", c.hidden);
    c.heads = j.value("heads", c.heads);
    c.mlp_ratio = j.value("mlp_ratio", c.mlp_ratio);
    c.latent_channels = j.value("latent_channels", c.latent_channels);
    c.text_dim = j.value("text_dim", c.text_dim);
    c.image_dim = j.value("image_dim", c.image_dim);
    c.mode = conditioning_mode_from_string(j.value("conditioning_mode", to_string(c.mode)));
    c.seed = j.value("seed", c.seed);
    c.zero_init_output = j.value("zero_init_output", c.zero_init_output);
    c.validate();
    return c;
}

// ---------------------------------------------------------------------------
// Parameters

void Parameters::add(std::string name, Tensor value, int layer) {
    if (index_.count(name)) throw ConfigError("duplicate parameter '" + name + "'");
    index_.emplace(name, entries_.size());
    entries_.push_back({std::move(name), std::move(value), layer});
}

Tensor& Parameters::at(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("unknown parameter '" + name + "'");
    return entries_[it->second].value;
}

const Tensor& Parameters::at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("unknown parameter '" + name + "'");
    return entries_[it->second].value;
}

std::size_t Parameters::scalar_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.value.size();
    return n;
}

Parameters Parameters::zeros_like() const {
    Parameters out;
    for (const auto& e : entries_) out.add(e.name, Tensor(e.value.shape()), e.layer);
    return out;
}

void Parameters::scale(double s) {
    for (auto& e : entries_)
        for (auto& v : e.value.data()) v *= s;
}

void Parameters::add_scaled(double alpha, const Parameters& other) {
    if (other.entries_.size() != entries_.size()) throw ConfigError("parameter layout mismatch");
    for (std::size_t i = 0; i < entries_.size(); ++i) {
        if (entries_[i].value.shape() != other.entries_[i].value.shape())
            throw ConfigError("parameter layout mismatch at '" + entries_[i].name + "'");
        axpy(alpha, other.entries_[i].value.data(), entries_[i].value.data());
    }
}

bool bit_equal(const Parameters& a, const Parameters& b) {
    if (a.entries().size() != b.entries().size()) return false;
    for (std::size_t i = 0; i < a.entries().size(); ++i) {
        if (a.entries()[i].name != b.entries()[i].name) return false;
        if (!fg::bit_equal(a.entries()[i].value, b.entries()[i].value)) return false;
    }
    return true;
}

// ---------------------------------------------------------------------------
// Dense kernels

namespace detail {

struct Mat {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> v;

    Mat() = default;
    Mat(std::size_t r, std::size_t c) : rows(r), cols(c), v(r * c, 0.0) {}

    double* row(std::size_t i) { return v.data() + i * cols; }
    const double* row(std::size_t i) const { return v.data() + i * cols; }

    Mat& operator+=(const Mat& o) {
        for (std::size_t i = 0; i < v.size(); ++i) v[i] += o.v[i];
        return *this;
    }
};

}  // namespace detail

namespace {

using detail::Mat;


Tensor to_tensor(const Mat& m) { return Tensor({m.rows, m.cols}, m.v); }

Mat rows_of(const Mat& m, std::size_t begin, std::size_t end) {
    Mat out(end - begin, m.cols);
    std::copy(m.row(begin), m.row(begin) + out.v.size(), out.v.begin());
    return out;
}

// y = x W^T + b, W is [out, in].
Mat linear(const Mat& x, const Tensor& w, const Tensor* b) {
    const std::size_t out = w.extent(0);
    const std::size_t in = w.extent(1);
    if (x.cols != in) throw ConfigError("linear: input width mismatch");
    // W^T lets the inner loop run over contiguous outputs; each output still
    // sums bias + x_0 w_0 + x_1 w_1 + ... in the same order.
    std::vector<double> wt(in * out);
    const double* wp = w.data().data();
    for (std::size_t o = 0; o < out; ++o)
        for (std::size_t k = 0; k < in; ++k) wt[k * out + o] = wp[o * in + k];
    Mat y(x.rows, out);
    for (std::size_t i = 0; i < x.rows; ++i) {
        const double* xi = x.row(i);
        double* yi = y.row(i);
        if (b) std::copy(b->data().begin(), b->data().end(), yi);
        for (std::size_t k = 0; k < in; ++k) {
            const double xk = xi[k];
            const double* wk = wt.data() + k * out;
            for (std::size_t o = 0; o < out; ++o) yi[o] += xk * wk[o];
        }
    }
    return y;
}

// Accumulates dW (and db) and returns dx for y = x W^T + b.
Mat linear_backward(const Mat& x, const Mat& dy, const Tensor& w, Tensor& dw, Tensor* db) {
    const std::size_t out = w.extent(0);
    const std::size_t in = w.extent(1);
    Mat dx(x.rows, in);
    const double* wp = w.data().data();
    double* dwp = dw.data().data();
    for (std::size_t i = 0; i < x.rows; ++i) {
        const double* xi = x.row(i);
        const double* dyi = dy.row(i);
        double* dxi = dx.row(i);
        for (std::size_t o = 0; o < out; ++o) {
            const double g = dyi[o];
            const double* wo = wp + o * in;
            double* dwo = dwp + o * in;
            for (std::size_t k = 0; k < in; ++k) {
                dxi[k] += g * wo[k];
                dwo[k] += g * xi[k];
            }
            if (db) (*db)[o] += g;
        }
    }
    return dx;
}

constexpr double kLnEps = 1e-5;

struct LnCache {
    Mat y;
    std::vector<double> inv_std;
};

LnCache layer_norm(const Mat& x) {
    LnCache c{Mat(x.rows, x.cols), std::vector<double>(x.rows)};
    const double n = static_cast<double>(x.cols);
    for (std::size_t i = 0; i < x.rows; ++i) {
        const double* xi = x.row(i);
        double mean = 0.0;
        for (std::size_t k = 0; k < x.cols; ++k) mean += xi[k];
        mean /= n;
        double var = 0.0;
        for (std::size_t k = 0; k < x.cols; ++k) var += (xi[k] - mean) * (xi[k] - mean);
        var /= n;
        const double inv = 1.0 / std::sqrt(var + kLnEps);
        c.inv_std[i] = inv;
        double* yi = c.y.row(i);
        for (std::size_t k = 0; k < x.cols; ++k) yi[k] = (xi[k] - mean) * inv;
    }
    return c;
}

Mat layer_norm_backward(const Mat& dy, const LnCache& c) {
    Mat dx(dy.rows, dy.cols);
    const double n = static_cast<double>(dy.cols);
    for (std::size_t i = 0; i < dy.rows; ++i) {
        const double* g = dy.row(i);
        const double* y = c.y.row(i);
        double mg = 0.0;
        double mgy = 0.0;
        for (std::size_t k = 0; k < dy.cols; ++k) {
            mg += g[k];
            mgy += g[k] * y[k];
        }
        mg /= n;
        mgy /= n;
        double* d = dx.row(i);
        for (std::size_t k = 0; k < dy.cols; ++k) d[k] = c.inv_std[i] * (g[k] - mg - y[k] * mgy);
    }
    return dx;
}

// tanh approximation of GELU
constexpr double kGeluC = 0.044715;
const double kGeluK = std::sqrt(2.0 / std::numbers::pi);

double gelu(double u) { return 0.5 * u * (1.0 + std::tanh(kGeluK * (u + kGeluC * u * u * u))); }

double gelu_grad(double u) {
    const double th = std::tanh(kGeluK * (u + kGeluC * u * u * u));
    return 0.5 * (1.0 + th) + 0.5 * u * (1.0 - th * th) * kGeluK * (1.0 + 3.0 * kGeluC * u * u);
}

struct AttnWeights {
    const Tensor* wq;
    const Tensor* bq;
    const Tensor* wk;
    const Tensor* bk;
    const Tensor* wv;
    const Tensor* bv;
    const Tensor* wo;
    const Tensor* bo;
};

// Keys carry no bias: a shared offset on every key shifts each softmax row by
// a constant and has no effect on the output.
template <typename P, typename T>
auto attn_params(P& params, const std::string& prefix) {
    return std::array<T*, 8>{&params.at(prefix + ".q.weight"), &params.at(prefix + ".q.bias"),
                             &params.at(prefix + ".k.weight"), nullptr,
                             &params.at(prefix + ".v.weight"), &params.at(prefix + ".v.bias"),
                             &params.at(prefix + ".o.weight"), &params.at(prefix + ".o.bias")};
}

AttnWeights attn_weights(const Parameters& p, const std::string& prefix) {
    auto a = attn_params<const Parameters, const Tensor>(p, prefix);
    return {a[0], a[1], a[2], a[3], a[4], a[5], a[6], a[7]};
}

struct AttnCache {
    Mat q, k, v;               // v after value edits
    std::vector<double> prob;  // [heads, nq, nk]
    Mat o;                     // concatenated head outputs before the output projection
};

struct AttnOutput {
    Mat out;
    AttnCache cache;
    Tensor logits;  // filled when requested
};

AttnOutput attention(const AttnWeights& w, const Mat& xq, const Mat& xkv, std::size_t heads,
                     const std::function<void(Tensor&)>& value_edit, bool keep_logits) {
    AttnOutput r;
    AttnCache& c = r.cache;
    c.q = linear(xq, *w.wq, w.bq);
    c.k = linear(xkv, *w.wk, w.bk);
    c.v = linear(xkv, *w.wv, w.bv);
    if (value_edit) {
        Tensor vt = to_tensor(c.v);
        value_edit(vt);
        std::copy(vt.data().begin(), vt.data().end(), c.v.v.begin());
    }
    const std::size_t nq = xq.rows;
    const std::size_t nk = xkv.rows;
    const std::size_t d = c.q.cols;
    const std::size_t dh = d / heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    c.prob.assign(heads * nq * nk, 0.0);
    c.o = Mat(nq, d);
    if (keep_logits) r.logits = Tensor({heads, nq, nk});
    std::vector<double> kt(dh * nk);  // keys of one head, transposed
    for (std::size_t h = 0; h < heads; ++h) {
        const std::size_t off = h * dh;
        for (std::size_t j = 0; j < nk; ++j)
            for (std::size_t e = 0; e < dh; ++e) kt[e * nk + j] = c.k.row(j)[off + e];
        for (std::size_t i = 0; i < nq; ++i) {
            double* p = c.prob.data() + (h * nq + i) * nk;
            const double* qi = c.q.row(i) + off;
            for (std::size_t e = 0; e < dh; ++e) {
                const double qe = qi[e];
                const double* ke = kt.data() + e * nk;
                for (std::size_t j = 0; j < nk; ++j) p[j] += qe * ke[j];
            }
            double mx = -INFINITY;
            for (std::size_t j = 0; j < nk; ++j) {
                p[j] *= scale;
                mx = std::max(mx, p[j]);
            }
            if (keep_logits) std::copy(p, p + nk, r.logits.data().data() + (h * nq + i) * nk);
            double z = 0.0;
            for (std::size_t j = 0; j < nk; ++j) {
                p[j] = std::exp(p[j] - mx);
                z += p[j];
            }
            double* oi = c.o.row(i) + off;
            for (std::size_t j = 0; j < nk; ++j) {
                p[j] /= z;
                const double* vj = c.v.row(j) + off;
                for (std::size_t e = 0; e < dh; ++e) oi[e] += p[j] * vj[e];
            }
        }
    }
    r.out = linear(c.o, *w.wo, w.bo);
    return r;
}

struct AttnGrads {
    Tensor* wq;
    Tensor* bq;
    Tensor* wk;
    Tensor* bk;
    Tensor* wv;
    Tensor* bv;
    Tensor* wo;
    Tensor* bo;
};

AttnGrads attn_grads(Parameters& g, const std::string& prefix) {
    auto a = attn_params<Parameters, Tensor>(g, prefix);
    return {a[0], a[1], a[2], a[3], a[4], a[5], a[6], a[7]};
}

// Returns (dxq, dxkv).
std::pair<Mat, Mat> attention_backward(const AttnCache& c, const Mat& xq, const Mat& xkv, const Mat& dout,
                                       const AttnWeights& w, const AttnGrads& g, std::size_t heads) {
    const Mat d_o = linear_backward(c.o, dout, *w.wo, *g.wo, g.bo);
    const std::size_t nq = xq.rows;
    const std::size_t nk = xkv.rows;
    const std::size_t d = c.q.cols;
    const std::size_t dh = d / heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    Mat dq(nq, d);
    Mat dk(nk, d);
    Mat dv(nk, d);
    std::vector<double> dp(nk);
    std::vector<double> vt(dh * nk);
    for (std::size_t h = 0; h < heads; ++h) {
        const std::size_t off = h * dh;
        for (std::size_t j = 0; j < nk; ++j)
            for (std::size_t e = 0; e < dh; ++e) vt[e * nk + j] = c.v.row(j)[off + e];
        for (std::size_t i = 0; i < nq; ++i) {
            const double* p = c.prob.data() + (h * nq + i) * nk;
            const double* doi = d_o.row(i) + off;
            std::fill(dp.begin(), dp.end(), 0.0);
            for (std::size_t e = 0; e < dh; ++e) {
                const double de = doi[e];
                const double* ve = vt.data() + e * nk;
                for (std::size_t j = 0; j < nk; ++j) dp[j] += de * ve[j];
            }
            double s = 0.0;
            for (std::size_t j = 0; j < nk; ++j) s += p[j] * dp[j];
            const double* qi = c.q.row(i) + off;
            double* dqi = dq.row(i) + off;
            for (std::size_t j = 0; j < nk; ++j) {
                const double ds = p[j] * (dp[j] - s) * scale;
                const double* kj = c.k.row(j) + off;
                double* dkj = dk.row(j) + off;
                double* dvj = dv.row(j) + off;
                for (std::size_t e = 0; e < dh; ++e) {
                    dqi[e] += ds * kj[e];
                    dkj[e] += ds * qi[e];
                    dvj[e] += p[j] * doi[e];
                }
            }
        }
    }
    Mat dxq = linear_backward(xq, dq, *w.wq, *g.wq, g.bq);
    Mat dxkv = linear_backward(xkv, dk, *w.wk, *g.wk, g.bk);
    dxkv += linear_backward(xkv, dv, *w.wv, *g.wv, g.bv);
    return {std::move(dxq), std::move(dxkv)};
}

struct MlpCache {
    Mat u;  // pre-activation
    Mat g;  // activation
};

}  // namespace

// ---------------------------------------------------------------------------
// Tape

struct BlockTape {
    Mat input;  // block entry, before interventions
    LnCache ln_attn;
    AttnCache attn;  // self-attention (cross mode) or joint attention (concat mode)
    LnCache ln_cross;
    AttnCache cross;  // cross mode only
    LnCache ln_mlp;
    MlpCache mlp;
};

class Tape {
public:
    ConditioningMode mode;
    std::size_t text_tokens = 0;
    std::size_t image_tokens = 0;
    std::size_t visual_tokens = 0;
    Shape latent_shape;
    Mat input;     // [P, 2C]
    Mat text_in;   // [M, Dt]
    Mat image_in;  // [N, Dv]
    Mat context;   // cross mode: projected [M+N, D]
    std::vector<BlockTape> blocks;
    LnCache final_ln;
};

// ---------------------------------------------------------------------------
// Model

namespace {

std::string block(std::size_t l) { return "blocks." + std::to_string(l); }

Mat tokens_to_mat(const TokenSequence& s) {
    Mat m(s.size(), s.dim());
    for (std::size_t i = 0; i < s.size(); ++i) {
        auto t = s.token(i);
        std::copy(t.begin(), t.end(), m.row(i));
    }
    return m;
}

}  // namespace

Dit::Dit(DitConfig config) : config_(config) {
    config_.validate();
    init_parameters();
}

Dit::Dit(DitConfig config, Parameters params) : config_(config), params_(std::move(params)) {
    config_.validate();
    Dit reference(config_);
    const auto& want = reference.params().entries();
    const auto& have = params_.entries();
    if (want.size() != have.size()) throw ConfigError("parameter count does not match config");
    for (std::size_t i = 0; i < want.size(); ++i) {
        if (want[i].name != have[i].name || want[i].value.shape() != have[i].value.shape())
            throw ConfigError("parameter '" + have[i].name + "' does not match config layout");
        params_.entries()[i].layer = want[i].layer;
    }
}

void Dit::init_parameters() {
    const std::size_t d = config_.hidden;
    const std::size_t c = config_.latent_channels;
    const std::size_t hid = d * config_.mlp_ratio;
    auto add = [&](const std::string& name, Shape shape, int layer) { params_.add(name, Tensor(shape), layer); };
    auto add_linear = [&](const std::string& name, std::size_t out, std::size_t in, int layer) {
        add(name + ".weight", {out, in}, layer);
        add(name + ".bias", {out}, layer);
    };
    auto add_attn = [&](const std::string& prefix, int layer) {
        add_linear(prefix + ".q", d, d, layer);
        add(prefix + ".k.weight", {d, d}, layer);
        add_linear(prefix + ".v", d, d, layer);
        add_linear(prefix + ".o", d, d, layer);
    };

    add_linear("embed", d, 2 * c, -1);
    add("text_proj.weight", {d, config_.text_dim}, -1);
    add("image_proj.weight", {d, config_.image_dim}, -1);
    for (std::size_t l = 0; l < config_.layers; ++l) {
        const int li = static_cast<int>(l);
        if (config_.mode == ConditioningMode::cross_attention) {
            add_attn(block(l) + ".self_attn", li);
            add_attn(block(l) + ".cross_attn", li);
        } else {
            add_attn(block(l) + ".attn", li);
        }
        add_linear(block(l) + ".mlp.fc1", hid, d, li);
        add_linear(block(l) + ".mlp.fc2", d, hid, li);
    }
    add_linear("out", c, d, -1);

    Rng rng(config_.seed);
    const double bound = 1.0 / std::sqrt(static_cast<double>(d));
    for (auto& e : params_.entries())
        for (auto& v : e.value.data()) v = rng.uniform(-bound, bound);
    if (config_.zero_init_output) {
        for (auto& v : params_.at("out.weight").data()) v = 0.0;
        for (auto& v : params_.at("out.bias").data()) v = 0.0;
    }
}

std::string Dit::conditioning_attention(std::size_t layer) const {
    if (layer >= config_.layers) throw ConfigError("layer index out of range");
    return block(layer) + (config_.mode == ConditioningMode::cross_attention ? ".cross_attn" : ".attn");
}

std::size_t Dit::key_count(std::size_t text_tokens, std::size_t image_tokens, std::size_t visual_tokens) const {
    return text_tokens + image_tokens + (config_.mode == ConditioningMode::token_concat ? visual_tokens : 0);
}

namespace {

std::vector<double> matvec(const Tensor& w, const Tensor* b, std::span<const double> x) {
    if (w.extent(1) != x.size()) throw ConfigError("projection dimension mismatch");
    Mat xm(1, x.size());
    std::copy(x.begin(), x.end(), xm.v.begin());
    return linear(xm, w, b).v;
}

}  // namespace

std::vector<double> Dit::project_text(std::span<const double> token) const {
    return matvec(params_.at("text_proj.weight"), nullptr, token);
}

std::vector<double> Dit::project_image(std::span<const double> token) const {
    return matvec(params_.at("image_proj.weight"), nullptr, token);
}

std::vector<double> Dit::token_value(std::size_t layer, std::span<const double> hidden_token) const {
    const std::string prefix = conditioning_attention(layer);
    if (hidden_token.size() != config_.hidden) throw ConfigError("token_value: expected a hidden-width vector");
    if (config_.mode == ConditioningMode::cross_attention)
        return matvec(params_.at(prefix + ".v.weight"), &params_.at(prefix + ".v.bias"), hidden_token);
    Mat xm(1, hidden_token.size());
    std::copy(hidden_token.begin(), hidden_token.end(), xm.v.begin());
    return linear(layer_norm(xm).y, params_.at(prefix + ".v.weight"), &params_.at(prefix + ".v.bias")).v;
}

std::vector<double> timestep_embedding(double t, std::size_t dim) {
    std::vector<double> e(dim);
    const std::size_t half = dim / 2;
    for (std::size_t i = 0; i < half; ++i) {
        const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
        const double arg = 1000.0 * t * freq;
        e[i] = std::sin(arg);
        e[half + i] = std::cos(arg);
    }
    return e;
}

ForwardResult Dit::forward(const LatentVideo& z_t, double t, const Conditioning& cond,
                           const ForwardOptions& options) const {
    const auto& cfg = config_;
    const std::size_t d = cfg.hidden;
    const std::size_t c = cfg.latent_channels;
    if (z_t.channels() != c)
        throw ConfigError("latent has " + std::to_string(z_t.channels()) + " channels, model expects " +
                          std::to_string(c));
    if (cond.reference.shape() != z_t.shape())
        throw ConfigError("reference latent shape " + shape_string(cond.reference.shape()) +
                          " != noisy latent shape " + shape_string(z_t.shape()));
    cond.text.validate();
    cond.image.validate();
    if (cond.text.dim() != cfg.text_dim) throw ConfigError("text token dim does not match config");
    if (cond.image.dim() != cfg.image_dim) throw ConfigError("image token dim does not match config");

    const std::size_t m = cond.text.size();
    const std::size_t n = cond.image.size();
    const std::size_t p = z_t.cells();
    const bool concat = cfg.mode == ConditioningMode::token_concat;

    auto tape = std::make_shared<Tape>();
    tape->mode = cfg.mode;
    tape->text_tokens = m;
    tape->image_tokens = n;
    tape->visual_tokens = p;
    tape->latent_shape = z_t.shape();

    // Patch embedding (patch size 1) over [z_t ; z_ref] channels.
    tape->input = Mat(p, 2 * c);
    for (std::size_t i = 0; i < p; ++i) {
        const auto zs = z_t.tensor().data().subspan(i * c, c);
        const auto rs = cond.reference.tensor().data().subspan(i * c, c);
        std::copy(zs.begin(), zs.end(), tape->input.row(i));
        std::copy(rs.begin(), rs.end(), tape->input.row(i) + c);
    }
    Mat visual = linear(tape->input, params_.at("embed.weight"), &params_.at("embed.bias"));
    const auto temb = timestep_embedding(t, d);
    for (std::size_t i = 0; i < p; ++i)
        for (std::size_t k = 0; k < d; ++k) visual.row(i)[k] += temb[k];

    tape->text_in = tokens_to_mat(cond.text);
    tape->image_in = tokens_to_mat(cond.image);
    const Mat text_h = linear(tape->text_in, params_.at("text_proj.weight"), nullptr);
    const Mat image_h = linear(tape->image_in, params_.at("image_proj.weight"), nullptr);

    // Concat mode carries all tokens in one sequence [text; image; visual].
    Mat x;
    if (concat) {
        x = Mat(m + n + p, d);
        std::copy(text_h.v.begin(), text_h.v.end(), x.row(0));
        std::copy(image_h.v.begin(), image_h.v.end(), x.row(m));
        std::copy(visual.v.begin(), visual.v.end(), x.row(m + n));
    } else {
        x = std::move(visual);
        tape->context = Mat(m + n, d);
        std::copy(text_h.v.begin(), text_h.v.end(), tape->context.row(0));
        std::copy(image_h.v.begin(), image_h.v.end(), tape->context.row(m));
    }
    tape->blocks.resize(cfg.layers);
    return run_blocks(std::move(tape), std::move(x), 0, options);
}

ForwardResult Dit::forward_from(const std::shared_ptr<const Tape>& recorded, std::size_t layer,
                                const ForwardOptions& options) const {
    if (!recorded) throw ConfigError("forward_from: missing tape");
    if (layer >= config_.layers || recorded->blocks.size() != config_.layers || recorded->mode != config_.mode)
        throw ConfigError("forward_from: tape does not match this model");
    auto tape = std::make_shared<Tape>();
    tape->mode = recorded->mode;
    tape->text_tokens = recorded->text_tokens;
    tape->image_tokens = recorded->image_tokens;
    tape->visual_tokens = recorded->visual_tokens;
    tape->latent_shape = recorded->latent_shape;
    tape->context = recorded->context;
    tape->blocks.resize(config_.layers);
    if (options.record_tape) {
        tape->input = recorded->input;
        tape->text_in = recorded->text_in;
        tape->image_in = recorded->image_in;
        std::copy(recorded->blocks.begin(), recorded->blocks.begin() + static_cast<std::ptrdiff_t>(layer),
                  tape->blocks.begin());
    }
    Mat x = recorded->blocks[layer].input;
    return run_blocks(std::move(tape), std::move(x), layer, options);
}

ForwardResult Dit::run_blocks(std::shared_ptr<Tape> tape, Mat x, std::size_t first_layer,
                              const ForwardOptions& options) const {
    const auto& cfg = config_;
    const std::size_t d = cfg.hidden;
    const std::size_t m = tape->text_tokens;
    const std::size_t n = tape->image_tokens;
    const std::size_t p = tape->visual_tokens;
    const bool concat = cfg.mode == ConditioningMode::token_concat;
    const std::size_t vis_begin = concat ? m + n : 0;
    const Interventions* iv = options.interventions;

    ForwardResult result;
    for (std::size_t l = first_layer; l < cfg.layers; ++l) {
        BlockTape& bt = tape->blocks[l];
        bt.input = x;
        if (iv && iv->on_hidden) {
            Tensor vis({p, d});
            std::copy(x.row(vis_begin), x.row(vis_begin) + p * d, vis.data().begin());
            iv->on_hidden(l, vis);
            if (vis.shape() != Shape{p, d}) throw ConfigError("hidden intervention changed the shape");
            std::copy(vis.data().begin(), vis.data().end(), x.row(vis_begin));
        }
        std::function<void(Tensor&)> value_edit;
        if (iv && iv->on_values) value_edit = [iv, l](Tensor& v) { iv->on_values(l, v); };

        LayerState state;
        state.layer = l;
        if (concat) {
            bt.ln_attn = layer_norm(x);
            auto a = attention(attn_weights(params_, block(l) + ".attn"), bt.ln_attn.y, bt.ln_attn.y, cfg.heads,
                               value_edit, options.hooks);
            x += a.out;
            if (options.hooks) {
                state.logits = std::move(a.logits);
                state.text_values = to_tensor(rows_of(a.cache.v, 0, m));
            }
            bt.attn = std::move(a.cache);
        } else {
            bt.ln_attn = layer_norm(x);
            auto sa = attention(attn_weights(params_, block(l) + ".self_attn"), bt.ln_attn.y, bt.ln_attn.y,
                                cfg.heads, nullptr, false);
            x += sa.out;
            bt.attn = std::move(sa.cache);
            bt.ln_cross = layer_norm(x);
            auto ca = attention(attn_weights(params_, block(l) + ".cross_attn"), bt.ln_cross.y, tape->context,
                                cfg.heads, value_edit, options.hooks);
            x += ca.out;
            if (options.hooks) {
                state.logits = std::move(ca.logits);
                state.text_values = to_tensor(rows_of(ca.cache.v, 0, m));
            }
            bt.cross = std::move(ca.cache);
        }
        bt.ln_mlp = layer_norm(x);
        bt.mlp.u = linear(bt.ln_mlp.y, params_.at(block(l) + ".mlp.fc1.weight"),
                          &params_.at(block(l) + ".mlp.fc1.bias"));
        bt.mlp.g = bt.mlp.u;
        for (auto& v : bt.mlp.g.v) v = gelu(v);
        x += linear(bt.mlp.g, params_.at(block(l) + ".mlp.fc2.weight"), &params_.at(block(l) + ".mlp.fc2.bias"));

        if (options.hooks) {
            state.visual = to_tensor(rows_of(x, vis_begin, vis_begin + p));
            result.states.push_back(std::move(state));
        }
    }

    tape->final_ln = layer_norm(rows_of(x, vis_begin, vis_begin + p));
    const Mat out = linear(tape->final_ln.y, params_.at("out.weight"), &params_.at("out.bias"));
    result.velocity = LatentVideo(Tensor(tape->latent_shape, out.v));
    if (!result.velocity.tensor().all_finite()) throw NumericError("DiT forward produced non-finite velocity");
    if (options.record_tape) result.tape = std::move(tape);
    return result;
}

Gradients Dit::backward(const std::shared_ptr<const Tape>& tape_ptr, const Tensor& d_velocity) const {
    if (!tape_ptr) throw ConfigError("backward: missing tape (forward must run with record_tape)");
    const Tape& tape = *tape_ptr;
    if (tape.mode != config_.mode || tape.blocks.size() != config_.layers)
        throw ConfigError("backward: tape was recorded by a different model configuration");
    if (d_velocity.shape() != tape.latent_shape) throw ConfigError("backward: gradient shape mismatch");

    const auto& cfg = config_;
    const std::size_t d = cfg.hidden;
    const std::size_t c = cfg.latent_channels;
    const std::size_t m = tape.text_tokens;
    const std::size_t n = tape.image_tokens;
    const std::size_t p = tape.visual_tokens;
    const bool concat = cfg.mode == ConditioningMode::token_concat;
    const std::size_t vis_begin = concat ? m + n : 0;

    Gradients grads = params_.zeros_like();

    Mat dv(p, c);
    std::copy(d_velocity.data().begin(), d_velocity.data().end(), dv.v.begin());
    const Mat d_final = linear_backward(tape.final_ln.y, dv, params_.at("out.weight"), grads.at("out.weight"),
                                        &grads.at("out.bias"));
    const Mat d_vis = layer_norm_backward(d_final, tape.final_ln);

    Mat dx(concat ? m + n + p : p, d);
    std::copy(d_vis.v.begin(), d_vis.v.end(), dx.row(vis_begin));
    Mat d_context(m + n, d);

    for (std::size_t li = cfg.layers; li-- > 0;) {
        const BlockTape& bt = tape.blocks[li];
        const std::string b = block(li);

        Mat dg = linear_backward(bt.mlp.g, dx, params_.at(b + ".mlp.fc2.weight"), grads.at(b + ".mlp.fc2.weight"),
                                 &grads.at(b + ".mlp.fc2.bias"));
        for (std::size_t i = 0; i < dg.v.size(); ++i) dg.v[i] *= gelu_grad(bt.mlp.u.v[i]);
        const Mat dln = linear_backward(bt.ln_mlp.y, dg, params_.at(b + ".mlp.fc1.weight"),
                                        grads.at(b + ".mlp.fc1.weight"), &grads.at(b + ".mlp.fc1.bias"));
        dx += layer_norm_backward(dln, bt.ln_mlp);

        if (concat) {
            auto [dq, dkv] = attention_backward(bt.attn, bt.ln_attn.y, bt.ln_attn.y, dx,
                                                attn_weights(params_, b + ".attn"), attn_grads(grads, b + ".attn"),
                                                cfg.heads);
            dq += dkv;
            dx += layer_norm_backward(dq, bt.ln_attn);
        } else {
            auto [dq, dctx] = attention_backward(bt.cross, bt.ln_cross.y, tape.context, dx,
                                                 attn_weights(params_, b + ".cross_attn"),
                                                 attn_grads(grads, b + ".cross_attn"), cfg.heads);
            dx += layer_norm_backward(dq, bt.ln_cross);
            d_context += dctx;
            auto [dq2, dkv2] = attention_backward(bt.attn, bt.ln_attn.y, bt.ln_attn.y, dx,
                                                  attn_weights(params_, b + ".self_attn"),
                                                  attn_grads(grads, b + ".self_attn"), cfg.heads);
            dq2 += dkv2;
            dx += layer_norm_backward(dq2, bt.ln_attn);
        }
    }

    const Mat d_text = concat ? rows_of(dx, 0, m) : rows_of(d_context, 0, m);
    const Mat d_image = concat ? rows_of(dx, m, m + n) : rows_of(d_context, m, m + n);
    const Mat d_embed = rows_of(dx, vis_begin, vis_begin + p);
    linear_backward(tape.text_in, d_text, params_.at("text_proj.weight"), grads.at("text_proj.weight"), nullptr);
    linear_backward(tape.image_in, d_image, params_.at("image_proj.weight"), grads.at("image_proj.weight"), nullptr);
    linear_backward(tape.input, d_embed, params_.at("embed.weight"), grads.at("embed.weight"),
                    &grads.at("embed.bias"));

    for (const auto& e : grads.entries())
        if (!e.value.all_finite()) throw NumericError("backward produced non-finite gradient for '" + e.name + "'");
    return grads;
}

// ---------------------------------------------------------------------------
// Training

bool TrainableMask::allows(int layer) const {
    return layer < 0 ? globals : layers.count(static_cast<std::size_t>(layer)) != 0;
}

TrainableMask TrainableMask::all(std::size_t layers) {
    TrainableMask m;
    for (std::size_t l = 0; l < layers; ++l) m.layers.insert(l);
    m.globals = true;
    return m;
}

LossAndGradients loss_and_gradients(const Dit& model, const std::vector<TrainingExample>& batch,
                                    const Interventions* interventions, std::size_t threads) {
    if (batch.empty()) throw ConfigError("empty training batch");
    std::vector<double> losses(batch.size());
    std::vector<Gradients> grads(batch.size());
    const double inv_batch = 1.0 / static_cast<double>(batch.size());
    parallel_for(
        batch.size(),
        [&](std::size_t i) {
            const auto& ex = batch[i];
            const flow::FlowPath path(ex.z0, ex.z1);
            const LatentVideo zt = flow::interpolate(path, ex.t);
            const LatentVideo target = flow::target_velocity(path);
            ForwardOptions opt;
            opt.record_tape = true;
            opt.interventions = interventions;
            const auto fr = model.forward(zt, ex.t, ex.cond, opt);
            losses[i] = flow::mean_squared_error(fr.velocity.tensor(), target.tensor());
            Tensor dv(target.shape());
            const double k = 2.0 / static_cast<double>(dv.size()) * inv_batch;
            for (std::size_t j = 0; j < dv.size(); ++j) dv[j] = k * (fr.velocity.tensor()[j] - target.tensor()[j]);
            grads[i] = model.backward(fr.tape, dv);
        },
        threads);

    LossAndGradients out{0.0, std::move(grads[0])};
    double total = losses[0];
    for (std::size_t i = 1; i < batch.size(); ++i) {
        total += losses[i];
        out.gradients.add_scaled(1.0, grads[i]);
    }
    out.loss = total * inv_batch;
    return out;
}

double train_step(Dit& model, const std::vector<TrainingExample>& batch, double lr, const TrainableMask& mask,
                  std::size_t step_index, const Interventions* interventions, std::size_t threads) {
    if (!(lr >= 0.0) || !std::isfinite(lr)) throw ConfigError("learning rate must be finite and non-negative");
    LossAndGradients lg;
    try {
        lg = loss_and_gradients(model, batch, interventions, threads);
    } catch (const NumericError& e) {
        throw NumericError("training diverged at step " + std::to_string(step_index) + ": " + e.what());
    }
    if (!std::isfinite(lg.loss))
        throw NumericError("training diverged: non-finite loss at step " + std::to_string(step_index));
    if (lr == 0.0) return lg.loss;
    auto& entries = model.params().entries();
    const auto& g = lg.gradients.entries();
    for (std::size_t i = 0; i < entries.size(); ++i) {
        if (!mask.allows(entries[i].layer)) continue;
        axpy(-lr, g[i].value.data(), entries[i].value.data());
    }
    return lg.loss;
}

// ---------------------------------------------------------------------------
// Checkpoints

void save_checkpoint(const Dit& model, const std::filesystem::path& dir) {
    nlohmann::json manifest;
    manifest["format"] = "fg-checkpoint-1";
    manifest["config"] = to_json(model.config());
    manifest["seed"] = model.config().seed;
    auto& list = manifest["parameters"] = nlohmann::json::array();
    for (const auto& e : model.params().entries()) {
        const std::string file = "params/" + e.name + ".fgt";
        const std::string bytes = encode_tensor(e.value);
        write_file(dir / file, bytes);
        list.push_back({{"name", e.name},
                        {"shape", e.value.shape()},
                        {"layer", e.layer},
                        {"file", file},
                        {"digest", content_digest(bytes)}});
    }
    write_json(dir / "checkpoint.json", manifest);
}

Dit load_checkpoint(const std::filesystem::path& dir) {
    const auto manifest = read_json(dir / "checkpoint.json");
    if (manifest.value("format", "") != "fg-checkpoint-1") throw ConfigError("unrecognized checkpoint format");
    const DitConfig cfg = dit_config_from_json(manifest.at("config"));
    Parameters params;
    for (const auto& item : manifest.at("parameters")) {
        Tensor t = deserialize_tensor(dir / item.at("file").get<std::string>());
        if (t.shape() != item.at("shape").get<Shape>())
            throw IoError("checkpoint tensor '" + item.at("name").get<std::string>() + "' has an unexpected shape");
        params.add(item.at("name").get<std::string>(), std::move(t), item.at("layer").get<int>());
    }
    return Dit(cfg, std::move(params));
}

}  // namespace fg::dit
