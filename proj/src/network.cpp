#include "amt/network.hpp"

#include "amt/errors.hpp"
#include "amt/random.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

namespace amt {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

template <typename Scalar>
Tensor<Scalar> Tensor<Scalar>::zeros(std::vector<std::int64_t> dims) {
    Tensor t;
    std::int64_t n = 1;
    for (auto d : dims) n *= d;
    t.dims = std::move(dims);
    t.values = Vec<Scalar>::Zero(n);
    return t;
}

void ModelConfig::validate() const {
    if (input_bins < 1 || base_channels < 1 || rnn_hidden < 1 || output_pitches < 1)
        throw ConfigError("model sizes must be at least 1");
    if (unet_levels < 1 || unet_levels > 8) throw ConfigError("unet_levels must lie in 1..8");
    if (kernel < 1 || kernel % 2 == 0) throw ConfigError("kernel size must be odd");
}

int ModelConfig::padded_bins() const { return (input_bins + pad_multiple() - 1) / pad_multiple() * pad_multiple(); }

namespace {

std::string conv_name(const std::string& block, int i) { return "unet." + block + ".conv" + std::to_string(i); }

}  // namespace

ShapeList parameter_shapes(const ModelConfig& c) {
    c.validate();
    ShapeList out;
    const std::int64_t k = c.kernel;
    auto conv = [&](const std::string& block, std::int64_t cin, std::int64_t cout) {
        out.push_back({conv_name(block, 1) + ".weight", {cout, k, k, cin}});
        out.push_back({conv_name(block, 1) + ".bias", {cout}});
        out.push_back({conv_name(block, 2) + ".weight", {cout, k, k, cout}});
        out.push_back({conv_name(block, 2) + ".bias", {cout}});
    };
    for (int l = 0; l < c.unet_levels; ++l) conv("enc" + std::to_string(l), l == 0 ? 1 : c.channels(l - 1), c.channels(l));
    conv("bottleneck", c.channels(c.unet_levels - 1), c.channels(c.unet_levels));
    for (int l = c.unet_levels - 1; l >= 0; --l)
        conv("dec" + std::to_string(l), c.channels(l + 1) + c.channels(l), c.channels(l));
    out.push_back({"unet.out.weight", {1, c.channels(0)}});
    out.push_back({"unet.out.bias", {1}});
    const std::int64_t h = c.rnn_hidden;
    for (const char* dir : {"fwd", "bwd"}) {
        out.push_back({std::string("rnn.") + dir + ".w_ih", {4 * h, c.input_bins}});
        out.push_back({std::string("rnn.") + dir + ".w_hh", {4 * h, h}});
        out.push_back({std::string("rnn.") + dir + ".bias", {4 * h}});
    }
    out.push_back({"head.weight", {c.output_pitches, 2 * h}});
    out.push_back({"head.bias", {c.output_pitches}});
    return out;
}

double init_bound(const ModelConfig& c, const std::string& name) {
    for (const auto& [n, dims] : parameter_shapes(c)) {
        if (n != name) continue;
        if (dims.size() == 1) return 0.0;
        double fan_in = 0, fan_out = 0;
        if (dims.size() == 4) {  // conv: [out, k, k, in]
            fan_in = double(dims[1] * dims[2] * dims[3]);
            fan_out = double(dims[0] * dims[1] * dims[2]);
        } else {
            fan_in = double(dims[1]);
            fan_out = double(dims[0]);
        }
        return std::sqrt(6.0 / (fan_in + fan_out));
    }
    throw ArgumentError("unknown parameter '" + name + "'");
}

template <typename Scalar>
ParameterSet<Scalar> zero_params(const ModelConfig& config) {
    ParameterSet<Scalar> params;
    for (const auto& [name, dims] : parameter_shapes(config)) params.emplace(name, Tensor<Scalar>::zeros(dims));
    return params;
}

template <typename Scalar>
ParameterSet<Scalar> init_params(const ModelConfig& config, std::uint64_t seed) {
    Rng rng(seed);
    ParameterSet<Scalar> params;
    for (const auto& [name, dims] : parameter_shapes(config)) {
        auto t = Tensor<Scalar>::zeros(dims);
        const double a = init_bound(config, name);
        if (a > 0)
            for (Eigen::Index i = 0; i < t.size(); ++i) t.values[i] = static_cast<Scalar>(uniform_real(rng, -a, a));
        params.emplace(name, std::move(t));
    }
    return params;
}

template <typename Scalar>
void check_shapes(const ModelConfig& config, const ParameterSet<Scalar>& params) {
    std::ostringstream problems;
    const auto shapes = parameter_shapes(config);
    for (const auto& [name, dims] : shapes) {
        auto it = params.find(name);
        if (it == params.end()) {
            problems << "\n  missing " << name;
            continue;
        }
        if (it->second.dims != dims || it->second.values.size() != Tensor<Scalar>::zeros(dims).size()) {
            problems << "\n  " << name << ": expected [";
            for (std::size_t i = 0; i < dims.size(); ++i) problems << (i ? "," : "") << dims[i];
            problems << "] got [";
            for (std::size_t i = 0; i < it->second.dims.size(); ++i) problems << (i ? "," : "") << it->second.dims[i];
            problems << "]";
        }
    }
    for (const auto& [name, t] : params)
        if (std::none_of(shapes.begin(), shapes.end(), [&](const auto& s) { return s.first == name; }))
            problems << "\n  unexpected " << name;
    if (!problems.str().empty()) throw ValidationError("parameter/config mismatch:" + problems.str());
}

template <typename To, typename From>
ParameterSet<To> cast_params(const ParameterSet<From>& params) {
    ParameterSet<To> out;
    for (const auto& [name, t] : params) out.emplace(name, Tensor<To>{t.dims, t.values.template cast<To>()});
    return out;
}

template <typename Scalar>
std::size_t parameter_count(const ParameterSet<Scalar>& params) {
    std::size_t n = 0;
    for (const auto& [name, t] : params) n += static_cast<std::size_t>(t.size());
    return n;
}

// ---------------------------------------------------------------------------
// Forward / backward

namespace {

template <typename S>
S sigmoid(S x) {
    return S(1) / (S(1) + std::exp(-x));
}

// Feature maps are channels x (height * width) column-major matrices, pixel
// index h * width + w. Height runs along time, width along frequency.
template <typename S>
struct ConvCache {
    std::string name;
    int height = 0, width = 0, in_channels = 0;
    Mat<S> col;  // (k*k*in) x pixels, row index (dy*k + dx)*in + c
    Mat<S> out;  // post-ReLU
};

template <typename S>
struct PoolCache {
    int height = 0, width = 0;  // input size
    Eigen::Matrix<std::int32_t, Eigen::Dynamic, Eigen::Dynamic> winner;  // channels x out pixels, input pixel index
};

template <typename S>
struct LstmCache {
    Mat<S> gates;  // 4H x T post-nonlinearity: i, f, g, o
    Mat<S> cell;   // H x T
    Mat<S> tanh_cell;
    Mat<S> hidden;  // H x T (indexed by absolute frame)
};

template <typename S>
Mat<S> im2col(const Mat<S>& x, int height, int width, int k) {
    const int cin = static_cast<int>(x.rows());
    const int r = k / 2;
    Mat<S> col = Mat<S>::Zero(static_cast<Eigen::Index>(k) * k * cin, static_cast<Eigen::Index>(height) * width);
    for (int h = 0; h < height; ++h)
        for (int w = 0; w < width; ++w) {
            const Eigen::Index p = Eigen::Index(h) * width + w;
            for (int dy = 0; dy < k; ++dy) {
                const int hh = h + dy - r;
                if (hh < 0 || hh >= height) continue;
                for (int dx = 0; dx < k; ++dx) {
                    const int ww = w + dx - r;
                    if (ww < 0 || ww >= width) continue;
                    col.col(p).segment(Eigen::Index(dy * k + dx) * cin, cin) = x.col(Eigen::Index(hh) * width + ww);
                }
            }
        }
    return col;
}

template <typename S>
Mat<S> col2im(const Mat<S>& dcol, int cin, int height, int width, int k) {
    const int r = k / 2;
    Mat<S> dx = Mat<S>::Zero(cin, Eigen::Index(height) * width);
    for (int h = 0; h < height; ++h)
        for (int w = 0; w < width; ++w) {
            const Eigen::Index p = Eigen::Index(h) * width + w;
            for (int dy = 0; dy < k; ++dy) {
                const int hh = h + dy - r;
                if (hh < 0 || hh >= height) continue;
                for (int dx_ = 0; dx_ < k; ++dx_) {
                    const int ww = w + dx_ - r;
                    if (ww < 0 || ww >= width) continue;
                    dx.col(Eigen::Index(hh) * width + ww) += dcol.col(p).segment(Eigen::Index(dy * k + dx_) * cin, cin);
                }
            }
        }
    return dx;
}

}  // namespace

template <typename Scalar>
struct ForwardTrace {
    int frames = 0;
    int padded_frames = 0;
    int padded_bins = 0;
    std::vector<ConvCache<Scalar>> convs;  // execution order
    std::vector<PoolCache<Scalar>> pools;
    Mat<Scalar> features;  // frames x input_bins
    LstmCache<Scalar> lstm[2];
    Mat<Scalar> hidden_cat;  // 2H x frames
    Mat<Scalar> logits;      // frames x pitches
};

namespace {

template <typename S>
const Tensor<S>& param(const ParameterSet<S>& params, const std::string& name) {
    auto it = params.find(name);
    if (it == params.end()) throw ValidationError("missing parameter " + name);
    return it->second;
}

template <typename S>
Tensor<S>& grad(ParameterSet<S>& grads, const std::string& name) {
    auto it = grads.find(name);
    if (it == grads.end()) throw ValidationError("missing gradient slot " + name);
    return it->second;
}

template <typename S>
const Mat<S>& conv_relu(ForwardTrace<S>& trace, const ParameterSet<S>& params, const std::string& name,
                        const Mat<S>& x, int height, int width, int k) {
    ConvCache<S> c;
    c.name = name;
    c.height = height;
    c.width = width;
    c.in_channels = static_cast<int>(x.rows());
    c.col = im2col(x, height, width, k);
    const auto& w = param(params, name + ".weight");
    const auto& b = param(params, name + ".bias");
    c.out.noalias() = w.as_matrix() * c.col;
    c.out.colwise() += b.values;
    c.out = c.out.cwiseMax(S(0));
    trace.convs.push_back(std::move(c));
    return trace.convs.back().out;
}

template <typename S>
Mat<S> conv_relu_backward(const ConvCache<S>& c, const Mat<S>& dout, const ParameterSet<S>& params,
                          ParameterSet<S>& grads, int k, bool need_input_grad) {
    const Mat<S> dpre = (c.out.array() > S(0)).select(dout, S(0));
    grad(grads, c.name + ".weight").as_matrix().noalias() += dpre * c.col.transpose();
    grad(grads, c.name + ".bias").values += dpre.rowwise().sum();
    if (!need_input_grad) return {};
    const Mat<S> dcol = param(params, c.name + ".weight").as_matrix().transpose() * dpre;
    return col2im(dcol, c.in_channels, c.height, c.width, k);
}

template <typename S>
Mat<S> max_pool(ForwardTrace<S>& trace, const Mat<S>& x, int height, int width) {
    PoolCache<S> pc;
    pc.height = height;
    pc.width = width;
    const int oh = height / 2, ow = width / 2;
    Mat<S> out(x.rows(), Eigen::Index(oh) * ow);
    pc.winner.resize(x.rows(), out.cols());
    for (int h = 0; h < oh; ++h)
        for (int w = 0; w < ow; ++w) {
            const Eigen::Index o = Eigen::Index(h) * ow + w;
            const Eigen::Index p00 = Eigen::Index(2 * h) * width + 2 * w;
            const Eigen::Index cand[4] = {p00, p00 + 1, p00 + width, p00 + width + 1};
            for (Eigen::Index ch = 0; ch < x.rows(); ++ch) {
                Eigen::Index best = cand[0];
                for (int i = 1; i < 4; ++i)
                    if (x(ch, cand[i]) > x(ch, best)) best = cand[i];
                out(ch, o) = x(ch, best);
                pc.winner(ch, o) = static_cast<std::int32_t>(best);
            }
        }
    trace.pools.push_back(std::move(pc));
    return out;
}

template <typename S>
Mat<S> max_pool_backward(const PoolCache<S>& pc, const Mat<S>& dout) {
    Mat<S> dx = Mat<S>::Zero(dout.rows(), Eigen::Index(pc.height) * pc.width);
    for (Eigen::Index o = 0; o < dout.cols(); ++o)
        for (Eigen::Index ch = 0; ch < dout.rows(); ++ch) dx(ch, pc.winner(ch, o)) += dout(ch, o);
    return dx;
}

template <typename S>
Mat<S> upsample(const Mat<S>& x, int height, int width) {
    const int oh = height * 2, ow = width * 2;
    Mat<S> out(x.rows(), Eigen::Index(oh) * ow);
    for (int h = 0; h < oh; ++h)
        for (int w = 0; w < ow; ++w) out.col(Eigen::Index(h) * ow + w) = x.col(Eigen::Index(h / 2) * width + w / 2);
    return out;
}

template <typename S>
Mat<S> upsample_backward(const Mat<S>& dout, int height, int width) {
    const int ow = width * 2;
    Mat<S> dx = Mat<S>::Zero(dout.rows(), Eigen::Index(height) * width);
    for (int h = 0; h < height * 2; ++h)
        for (int w = 0; w < ow; ++w) dx.col(Eigen::Index(h / 2) * width + w / 2) += dout.col(Eigen::Index(h) * ow + w);
    return dx;
}

// One LSTM direction over features (frames x F); reverse runs t = T-1 .. 0.
template <typename S>
void lstm_forward(LstmCache<S>& cache, const ParameterSet<S>& params, const std::string& prefix,
                  const Mat<S>& features, bool reverse) {
    const auto w_ih = param(params, prefix + ".w_ih").as_matrix();
    const auto w_hh = param(params, prefix + ".w_hh").as_matrix();
    const auto& bias = param(params, prefix + ".bias").values;
    const Eigen::Index T = features.rows();
    const Eigen::Index H = w_hh.cols();

    cache.gates.noalias() = w_ih * features.transpose();
    cache.gates.colwise() += bias;
    cache.cell.resize(H, T);
    cache.tanh_cell.resize(H, T);
    cache.hidden.resize(H, T);

    Vec<S> h = Vec<S>::Zero(H), c = Vec<S>::Zero(H);
    for (Eigen::Index step = 0; step < T; ++step) {
        const Eigen::Index t = reverse ? T - 1 - step : step;
        auto z = cache.gates.col(t);
        z.noalias() += w_hh * h;
        for (Eigen::Index j = 0; j < H; ++j) {
            z[j] = sigmoid(z[j]);
            z[H + j] = sigmoid(z[H + j]);
            z[2 * H + j] = std::tanh(z[2 * H + j]);
            z[3 * H + j] = sigmoid(z[3 * H + j]);
        }
        c = z.segment(H, H).cwiseProduct(c) + z.head(H).cwiseProduct(z.segment(2 * H, H));
        cache.cell.col(t) = c;
        cache.tanh_cell.col(t) = c.array().tanh();
        h = z.tail(H).cwiseProduct(cache.tanh_cell.col(t));
        cache.hidden.col(t) = h;
    }
}

// dhidden: H x T gradient w.r.t. this direction's hidden outputs. Returns
// d(features) (frames x F).
template <typename S>
Mat<S> lstm_backward(const LstmCache<S>& cache, const ParameterSet<S>& params, ParameterSet<S>& grads,
                     const std::string& prefix, const Mat<S>& features, const Mat<S>& dhidden, bool reverse) {
    const auto w_ih = param(params, prefix + ".w_ih").as_matrix();
    const auto w_hh = param(params, prefix + ".w_hh").as_matrix();
    const Eigen::Index T = features.rows();
    const Eigen::Index H = w_hh.cols();

    Mat<S> dz(4 * H, T);
    Vec<S> dh_next = Vec<S>::Zero(H), dc_next = Vec<S>::Zero(H);
    Mat<S> dw_hh = Mat<S>::Zero(4 * H, H);
    for (Eigen::Index step = T - 1; step >= 0; --step) {
        const Eigen::Index t = reverse ? T - 1 - step : step;
        const Eigen::Index prev = reverse ? t + 1 : t - 1;
        const bool has_prev = step > 0;
        const auto g = cache.gates.col(t);
        const Vec<S> dh = dhidden.col(t) + dh_next;
        const auto i = g.head(H).array();
        const auto f = g.segment(H, H).array();
        const auto gg = g.segment(2 * H, H).array();
        const auto o = g.tail(H).array();
        const auto tc = cache.tanh_cell.col(t).array();
        const Vec<S> dc = (dh.array() * o * (S(1) - tc * tc) + dc_next.array()).matrix();
        const Vec<S> c_prev = has_prev ? Vec<S>(cache.cell.col(prev)) : Vec<S>::Zero(H);
        auto d = dz.col(t);
        d.head(H) = (dc.array() * gg * i * (S(1) - i)).matrix();
        d.segment(H, H) = (dc.array() * c_prev.array() * f * (S(1) - f)).matrix();
        d.segment(2 * H, H) = (dc.array() * i * (S(1) - gg * gg)).matrix();
        d.tail(H) = (dh.array() * tc * o * (S(1) - o)).matrix();
        dc_next = (dc.array() * f).matrix();
        if (has_prev) {
            dw_hh.noalias() += d * cache.hidden.col(prev).transpose();
            dh_next.noalias() = w_hh.transpose() * d;
        } else {
            dh_next.setZero();
        }
    }
    grad(grads, prefix + ".w_hh").as_matrix() += dw_hh;
    grad(grads, prefix + ".w_ih").as_matrix().noalias() += dz * features;
    grad(grads, prefix + ".bias").values += dz.rowwise().sum();
    return dz.transpose() * w_ih;
}

}  // namespace

template <typename Scalar>
ForwardPass<Scalar>::ForwardPass(const ModelConfig& config, const ParameterSet<Scalar>& params,
                                 const Mat<Scalar>& input)
    : config_(&config), params_(&params), trace_(std::make_unique<ForwardTrace<Scalar>>()) {
    using S = Scalar;
    if (input.cols() != config.input_bins)
        throw ArgumentError("input has " + std::to_string(input.cols()) + " bins, model expects " +
                            std::to_string(config.input_bins));
    auto& tr = *trace_;
    const int k = config.kernel;
    const int levels = config.unet_levels;
    tr.frames = static_cast<int>(input.rows());
    tr.padded_frames = (tr.frames + config.pad_multiple() - 1) / config.pad_multiple() * config.pad_multiple();
    tr.padded_bins = config.padded_bins();

    if (tr.frames == 0) {
        tr.logits = Mat<S>(0, config.output_pitches);
        return;
    }

    int height = tr.padded_frames, width = tr.padded_bins;
    Mat<S> x = Mat<S>::Zero(1, Eigen::Index(height) * width);
    for (int t = 0; t < tr.frames; ++t)
        for (int f = 0; f < config.input_bins; ++f) x(0, Eigen::Index(t) * width + f) = input(t, f);

    for (int l = 0; l < levels; ++l) {
        const std::string block = "enc" + std::to_string(l);
        Mat<S> h1 = conv_relu(tr, params, conv_name(block, 1), x, height, width, k);
        const Mat<S>& skip = conv_relu(tr, params, conv_name(block, 2), h1, height, width, k);
        x = max_pool(tr, skip, height, width);
        height /= 2;
        width /= 2;
    }
    {
        Mat<S> h1 = conv_relu(tr, params, conv_name("bottleneck", 1), x, height, width, k);
        x = conv_relu(tr, params, conv_name("bottleneck", 2), h1, height, width, k);
    }
    for (int l = levels - 1; l >= 0; --l) {
        Mat<S> up = upsample(x, height, width);
        height *= 2;
        width *= 2;
        // Encoder level l's second conv sits at index 2*l + 1.
        const Mat<S>& skip = tr.convs[static_cast<std::size_t>(2 * l + 1)].out;
        Mat<S> cat(up.rows() + skip.rows(), up.cols());
        cat << up, skip;
        const std::string block = "dec" + std::to_string(l);
        Mat<S> h1 = conv_relu(tr, params, conv_name(block, 1), cat, height, width, k);
        x = conv_relu(tr, params, conv_name(block, 2), h1, height, width, k);
    }

    const Mat<S> map = param(params, std::string("unet.out.weight")).as_matrix() * x +
                       Mat<S>::Constant(1, x.cols(), param(params, std::string("unet.out.bias")).values[0]);
    tr.features.resize(tr.frames, config.input_bins);
    for (int t = 0; t < tr.frames; ++t)
        for (int f = 0; f < config.input_bins; ++f) tr.features(t, f) = map(0, Eigen::Index(t) * width + f);

    lstm_forward(tr.lstm[0], params, "rnn.fwd", tr.features, false);
    lstm_forward(tr.lstm[1], params, "rnn.bwd", tr.features, true);
    const Eigen::Index H = config.rnn_hidden;
    tr.hidden_cat.resize(2 * H, tr.frames);
    tr.hidden_cat << tr.lstm[0].hidden, tr.lstm[1].hidden;

    Mat<S> logits_t = param(params, std::string("head.weight")).as_matrix() * tr.hidden_cat;
    logits_t.colwise() += param(params, std::string("head.bias")).values;
    tr.logits = logits_t.transpose();
}

template <typename Scalar>
ForwardPass<Scalar>::~ForwardPass() = default;
template <typename Scalar>
ForwardPass<Scalar>::ForwardPass(ForwardPass&&) noexcept = default;

template <typename Scalar>
const Mat<Scalar>& ForwardPass<Scalar>::logits() const {
    return trace_->logits;
}

template <typename Scalar>
void ForwardPass<Scalar>::backward(const Mat<Scalar>& dlogits, ParameterSet<Scalar>& grads) const {
    using S = Scalar;
    const auto& tr = *trace_;
    const auto& params = *params_;
    const ModelConfig& config = *config_;
    if (dlogits.rows() != tr.logits.rows() || dlogits.cols() != tr.logits.cols())
        throw ArgumentError("dlogits shape does not match logits");
    if (tr.frames == 0) return;
    const int k = config.kernel;
    const int levels = config.unet_levels;
    const Eigen::Index H = config.rnn_hidden;

    grad(grads, "head.weight").as_matrix().noalias() += dlogits.transpose() * tr.hidden_cat.transpose();
    grad(grads, "head.bias").values += dlogits.colwise().sum().transpose();
    const Mat<S> dhidden = param(params, std::string("head.weight")).as_matrix().transpose() * dlogits.transpose();

    Mat<S> dfeatures = lstm_backward(tr.lstm[0], params, grads, "rnn.fwd", tr.features, Mat<S>(dhidden.topRows(H)), false);
    dfeatures += lstm_backward(tr.lstm[1], params, grads, "rnn.bwd", tr.features, Mat<S>(dhidden.bottomRows(H)), true);

    int height = tr.padded_frames, width = tr.padded_bins;
    Mat<S> dmap = Mat<S>::Zero(1, Eigen::Index(height) * width);
    for (int t = 0; t < tr.frames; ++t)
        for (int f = 0; f < config.input_bins; ++f) dmap(0, Eigen::Index(t) * width + f) = dfeatures(t, f);

    const Mat<S>& last = tr.convs.back().out;
    grad(grads, "unet.out.weight").as_matrix().noalias() += dmap * last.transpose();
    grad(grads, "unet.out.bias").values[0] += dmap.sum();
    Mat<S> dx = param(params, std::string("unet.out.weight")).as_matrix().transpose() * dmap;

    std::vector<Mat<S>> dskip(static_cast<std::size_t>(levels));
    std::size_t ci = tr.convs.size();
    for (int l = 0; l < levels; ++l) {
        dx = conv_relu_backward(tr.convs[--ci], dx, params, grads, k, true);
        const Mat<S> dcat = conv_relu_backward(tr.convs[--ci], dx, params, grads, k, true);
        const Eigen::Index skip_rows = config.channels(l);
        dskip[static_cast<std::size_t>(l)] = dcat.bottomRows(skip_rows);
        height /= 2;
        width /= 2;
        dx = upsample_backward(Mat<S>(dcat.topRows(dcat.rows() - skip_rows)), height, width);
    }
    dx = conv_relu_backward(tr.convs[--ci], dx, params, grads, k, true);
    dx = conv_relu_backward(tr.convs[--ci], dx, params, grads, k, true);
    for (int l = levels - 1; l >= 0; --l) {
        dx = max_pool_backward(tr.pools[static_cast<std::size_t>(l)], dx);
        dx += dskip[static_cast<std::size_t>(l)];
        dx = conv_relu_backward(tr.convs[--ci], dx, params, grads, k, true);
        dx = conv_relu_backward(tr.convs[--ci], dx, params, grads, k, l > 0);
    }
}

template <typename Scalar>
std::vector<std::int32_t> ForwardPass<Scalar>::activation_pattern() const {
    std::vector<std::int32_t> out;
    for (const auto& c : trace_->convs)
        for (Eigen::Index i = 0; i < c.out.size(); ++i) out.push_back(c.out.data()[i] > Scalar(0));
    for (const auto& p : trace_->pools)
        for (Eigen::Index i = 0; i < p.winner.size(); ++i) out.push_back(p.winner.data()[i]);
    return out;
}

template <typename Scalar>
Mat<Scalar> forward(const ModelConfig& config, const ParameterSet<Scalar>& params, const Mat<Scalar>& input) {
    return ForwardPass<Scalar>(config, params, input).logits();
}

template <typename Scalar>
BatchGradient<Scalar> gradient(const ModelConfig& config, const ParameterSet<Scalar>& params,
                               std::span<const Mat<Scalar>> inputs, std::span<const Mat<Scalar>> targets,
                               const LossFunction<Scalar>& loss, std::size_t batch_id) {
    if (inputs.size() != targets.size() || inputs.empty())
        throw ArgumentError("gradient needs a non-empty batch with one target per input");
    BatchGradient<Scalar> out;
    out.grads = zero_params<Scalar>(config);
    const Scalar scale = Scalar(1) / static_cast<Scalar>(inputs.size());
    Mat<Scalar> dlogits;
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        ForwardPass<Scalar> pass(config, params, inputs[i]);
        if (targets[i].rows() != pass.logits().rows() || targets[i].cols() != pass.logits().cols())
            throw ArgumentError("target shape does not match model output");
        const Scalar l = loss(pass.logits(), targets[i], dlogits);
        if (!std::isfinite(l)) throw NonFiniteLoss(batch_id, double(l));
        out.loss += l * scale;
        dlogits *= scale;
        pass.backward(dlogits, out.grads);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr char kCheckpointMagic[4] = {'A', 'M', 'T', 'F'};

template <typename T>
void write_raw(std::ostream& out, const T& v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_raw(std::istream& in) {
    T v{};
    if (!in.read(reinterpret_cast<char*>(&v), sizeof(T))) throw FormatError("truncated checkpoint");
    return v;
}

std::string read_string(std::istream& in, std::uint32_t max_len) {
    const auto len = read_raw<std::uint32_t>(in);
    if (len > max_len) throw FormatError("implausible string length in checkpoint");
    std::string s(len, '\0');
    if (len && !in.read(s.data(), len)) throw FormatError("truncated checkpoint");
    return s;
}

}  // namespace

template <typename Scalar>
void save_checkpoint(const Checkpoint<Scalar>& ckpt, std::ostream& out) {
    check_shapes(ckpt.config, ckpt.params);
    out.write(kCheckpointMagic, 4);
    write_raw(out, ckpt.version);
    const ModelConfig& c = ckpt.config;
    for (int v : {c.input_bins, c.unet_levels, c.base_channels, c.kernel, c.rnn_hidden, c.output_pitches})
        write_raw(out, static_cast<std::uint32_t>(v));
    write_raw(out, static_cast<std::uint8_t>(c.dtype));
    write_raw(out, ckpt.meta.epoch);
    write_raw(out, ckpt.meta.seed);
    write_raw(out, static_cast<std::uint32_t>(ckpt.meta.source_tag.size()));
    out.write(ckpt.meta.source_tag.data(), static_cast<std::streamsize>(ckpt.meta.source_tag.size()));
    write_raw(out, static_cast<std::uint32_t>(ckpt.params.size()));
    for (const auto& [name, t] : ckpt.params) {
        write_raw(out, static_cast<std::uint32_t>(name.size()));
        out.write(name.data(), static_cast<std::streamsize>(name.size()));
        write_raw(out, static_cast<std::uint8_t>(dtype_of<Scalar>()));
        write_raw(out, static_cast<std::uint32_t>(t.dims.size()));
        for (auto d : t.dims) write_raw(out, static_cast<std::uint64_t>(d));
        out.write(reinterpret_cast<const char*>(t.values.data()), static_cast<std::streamsize>(t.size() * sizeof(Scalar)));
    }
    if (!out) throw IoError("failed writing checkpoint");
}

template <typename Scalar>
Checkpoint<Scalar> load_checkpoint(std::istream& in) {
    char magic[4];
    if (!in.read(magic, 4) || std::memcmp(magic, kCheckpointMagic, 4) != 0)
        throw FormatError("not a model checkpoint (bad magic)");
    Checkpoint<Scalar> ckpt;
    ckpt.version = read_raw<std::uint32_t>(in);
    if (ckpt.version != kCheckpointVersion)
        throw FormatError("unsupported checkpoint version " + std::to_string(ckpt.version));
    ModelConfig& c = ckpt.config;
    for (int* v : {&c.input_bins, &c.unet_levels, &c.base_channels, &c.kernel, &c.rnn_hidden, &c.output_pitches})
        *v = static_cast<int>(read_raw<std::uint32_t>(in));
    const auto dtype = read_raw<std::uint8_t>(in);
    if (dtype > 1) throw FormatError("unknown dtype tag in config block");
    c.dtype = static_cast<DType>(dtype);
    try {
        c.validate();
    } catch (const ConfigError& e) {
        throw ValidationError(std::string("checkpoint config: ") + e.what());
    }
    ckpt.meta.epoch = read_raw<std::uint32_t>(in);
    ckpt.meta.seed = read_raw<std::uint64_t>(in);
    ckpt.meta.source_tag = read_string(in, 1 << 20);

    const auto count = read_raw<std::uint32_t>(in);
    if (count > 100000) throw FormatError("implausible tensor count");
    for (std::uint32_t i = 0; i < count; ++i) {
        std::string name = read_string(in, 4096);
        const auto tag = read_raw<std::uint8_t>(in);
        if (tag > 1) throw FormatError("unknown dtype tag for " + name);
        const auto rank = read_raw<std::uint32_t>(in);
        if (rank > 8) throw FormatError("implausible rank for " + name);
        std::vector<std::int64_t> dims;
        std::uint64_t n = 1;
        for (std::uint32_t r = 0; r < rank; ++r) {
            const auto d = read_raw<std::uint64_t>(in);
            if (d > (1ull << 32)) throw FormatError("implausible dimension for " + name);
            dims.push_back(static_cast<std::int64_t>(d));
            n *= d;
        }
        if (n > (1ull << 31)) throw FormatError("implausible tensor size for " + name);
        Tensor<Scalar> t;
        t.dims = dims;
        t.values.resize(static_cast<Eigen::Index>(n));
        if (static_cast<DType>(tag) == DType::F32) {
            std::vector<float> raw(n);
            if (n && !in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(n * 4)))
                throw FormatError("truncated checkpoint");
            for (std::uint64_t j = 0; j < n; ++j) t.values[static_cast<Eigen::Index>(j)] = static_cast<Scalar>(raw[j]);
        } else {
            std::vector<double> raw(n);
            if (n && !in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(n * 8)))
                throw FormatError("truncated checkpoint");
            for (std::uint64_t j = 0; j < n; ++j) t.values[static_cast<Eigen::Index>(j)] = static_cast<Scalar>(raw[j]);
        }
        if (!ckpt.params.emplace(std::move(name), std::move(t)).second)
            throw FormatError("duplicate tensor name in checkpoint");
    }
    check_shapes(ckpt.config, ckpt.params);
    return ckpt;
}

template <typename Scalar>
void save_checkpoint_file(const Checkpoint<Scalar>& ckpt, const std::string& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + path);
    save_checkpoint(ckpt, out);
}

template <typename Scalar>
Checkpoint<Scalar> load_checkpoint_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);
    return load_checkpoint<Scalar>(in);
}

#define AMT_INSTANTIATE(S)                                                                                        \
    template struct Tensor<S>;                                                                                    \
    template ParameterSet<S> init_params<S>(const ModelConfig&, std::uint64_t);                                   \
    template ParameterSet<S> zero_params<S>(const ModelConfig&);                                                  \
    template void check_shapes<S>(const ModelConfig&, const ParameterSet<S>&);                                    \
    template std::size_t parameter_count<S>(const ParameterSet<S>&);                                              \
    template class ForwardPass<S>;                                                                                \
    template Mat<S> forward<S>(const ModelConfig&, const ParameterSet<S>&, const Mat<S>&);                        \
    template BatchGradient<S> gradient<S>(const ModelConfig&, const ParameterSet<S>&, std::span<const Mat<S>>,   \
                                          std::span<const Mat<S>>, const LossFunction<S>&, std::size_t);         \
    template void save_checkpoint<S>(const Checkpoint<S>&, std::ostream&);                                        \
    template Checkpoint<S> load_checkpoint<S>(std::istream&);                                                     \
    template void save_checkpoint_file<S>(const Checkpoint<S>&, const std::string&);                              \
    template Checkpoint<S> load_checkpoint_file<S>(const std::string&);

AMT_INSTANTIATE(float)
AMT_INSTANTIATE(double)
#undef AMT_INSTANTIATE

// Extended precision serves the finite-difference oracle only.
template class ForwardPass<long double>;
template Mat<long double> forward<long double>(const ModelConfig&, const ParameterSet<long double>&,
                                               const Mat<long double>&);
template ParameterSet<long double> cast_params<long double, double>(const ParameterSet<double>&);

template ParameterSet<float> cast_params<float, double>(const ParameterSet<double>&);
template ParameterSet<double> cast_params<double, float>(const ParameterSet<float>&);
template ParameterSet<float> cast_params<float, float>(const ParameterSet<float>&);
template ParameterSet<double> cast_params<double, double>(const ParameterSet<double>&);

}  // namespace amt
