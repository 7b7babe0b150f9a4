#include "amt/spectral.hpp"

#include "amt/digest.hpp"
#include "amt/errors.hpp"

#include <unsupported/Eigen/FFT>

#include <bit>
#include <cmath>
#include <complex>
#include <cstring>
#include <fstream>
#include <iostream>
#include <numbers>
#include <sstream>

namespace amt {

Window parse_window(const std::string& name) {
    if (name == "hann") return Window::Hann;
    if (name == "hamming") return Window::Hamming;
    if (name == "rectangular" || name == "rect") return Window::Rectangular;
    throw ConfigError("unknown window '" + name + "'");
}

std::string window_name(Window w) {
    switch (w) {
        case Window::Hann: return "hann";
        case Window::Hamming: return "hamming";
        case Window::Rectangular: return "rectangular";
    }
    return "?";
}

Eigen::VectorXd make_window(Window w, Eigen::Index n) {
    Eigen::VectorXd out(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        const double c = std::cos(2.0 * std::numbers::pi * double(i) / double(n));
        switch (w) {
            case Window::Hann: out[i] = 0.5 - 0.5 * c; break;
            case Window::Hamming: out[i] = 0.54 - 0.46 * c; break;
            case Window::Rectangular: out[i] = 1.0; break;
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// STFT

Spectrogram stft(const AudioBuffer& audio, const StftParams& p) {
    const auto len = static_cast<Eigen::Index>(audio.samples.size());
    if (!(p.hop > 0 && p.hop <= p.window_len && p.window_len <= len))
        throw ArgumentError("stft needs 0 < hop <= window_len <= signal length");

    const Eigen::Index frames = 1 + (len - p.window_len + p.hop - 1) / p.hop;
    const Eigen::Index bins = p.window_len / 2 + 1;
    const Eigen::VectorXd window = make_window(p.window, p.window_len);

    Spectrogram out;
    out.frame_period_sec = double(p.hop) / audio.sample_rate_hz;
    out.matrix.resize(frames, bins);
    for (Eigen::Index k = 0; k < bins; ++k)
        out.bin_center_freqs_hz.push_back(double(k) * audio.sample_rate_hz / double(p.window_len));

    Eigen::FFT<double> fft;
    std::vector<double> frame(static_cast<std::size_t>(p.window_len));
    std::vector<std::complex<double>> spectrum;
    for (Eigen::Index t = 0; t < frames; ++t) {
        for (Eigen::Index n = 0; n < p.window_len; ++n) {
            const Eigen::Index j = t * p.hop + n;
            frame[static_cast<std::size_t>(n)] = j < len ? window[n] * audio.samples[static_cast<std::size_t>(j)] : 0.0;
        }
        fft.fwd(spectrum, frame);
        for (Eigen::Index k = 0; k < bins; ++k) out.matrix(t, k) = std::abs(spectrum[static_cast<std::size_t>(k)]);
    }
    return out;
}

double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

Eigen::MatrixXd mel_filterbank(Eigen::Index n_mels, double f_lo, double f_hi, Eigen::Index window_len,
                               int sample_rate_hz) {
    const Eigen::Index bins = window_len / 2 + 1;
    if (n_mels < 1 || n_mels > bins) throw ArgumentError("n_mels must lie in [1, number of STFT bins]");
    if (!(f_lo >= 0.0 && f_lo < f_hi && f_hi <= sample_rate_hz / 2.0))
        throw ArgumentError("mel band needs 0 <= f_lo < f_hi <= Nyquist");

    const double m_lo = hz_to_mel(f_lo), m_hi = hz_to_mel(f_hi);
    std::vector<double> edges(static_cast<std::size_t>(n_mels + 2));
    for (std::size_t i = 0; i < edges.size(); ++i)
        edges[i] = mel_to_hz(m_lo + (m_hi - m_lo) * double(i) / double(n_mels + 1));

    const double bin_hz = double(sample_rate_hz) / double(window_len);
    Eigen::MatrixXd fb = Eigen::MatrixXd::Zero(n_mels, bins);
    for (Eigen::Index m = 0; m < n_mels; ++m) {
        const double lo = edges[m], centre = edges[m + 1], hi = edges[m + 2];
        for (Eigen::Index k = 0; k < bins; ++k) {
            const double f = double(k) * bin_hz;
            if (f > lo && f < centre)
                fb(m, k) = (f - lo) / (centre - lo);
            else if (f >= centre && f < hi)
                fb(m, k) = (hi - f) / (hi - centre);
        }
        if (fb.row(m).sum() <= 0.0) {
            const auto nearest = std::min<Eigen::Index>(bins - 1, std::lround(centre / bin_hz));
            fb(m, nearest) = 1.0;
        }
    }
    return fb;
}

Spectrogram mel_spectrogram(const AudioBuffer& audio, const StftParams& stft_params, Eigen::Index n_mels, double f_lo,
                            double f_hi) {
    const Eigen::MatrixXd fb = mel_filterbank(n_mels, f_lo, f_hi, stft_params.window_len, audio.sample_rate_hz);
    const Spectrogram linear = stft(audio, stft_params);

    Spectrogram out;
    out.frame_period_sec = linear.frame_period_sec;
    out.matrix = linear.matrix * fb.transpose();
    const double m_lo = hz_to_mel(f_lo), m_hi = hz_to_mel(f_hi);
    for (Eigen::Index m = 0; m < n_mels; ++m)
        out.bin_center_freqs_hz.push_back(mel_to_hz(m_lo + (m_hi - m_lo) * double(m + 1) / double(n_mels + 1)));
    return out;
}

// ---------------------------------------------------------------------------
// CQT

double CqtParams::quality() const { return 1.0 / (std::exp2(1.0 / bins_per_octave) - 1.0); }

double CqtParams::bin_frequency(int k) const { return f_min_hz * std::exp2(double(k) / bins_per_octave); }

Eigen::Index CqtParams::window_length(int k, int sample_rate_hz) const {
    return static_cast<Eigen::Index>(std::ceil(quality() * sample_rate_hz / bin_frequency(k)));
}

void CqtParams::validate(int sample_rate_hz) const {
    if (!(f_min_hz > 0.0)) throw ConfigError("CQT f_min must be positive");
    if (bins_per_octave < 1 || n_bins < 1) throw ConfigError("CQT bin counts must be positive");
    if (hop_samples < 1) throw ConfigError("CQT hop must be positive");
    const double top = bin_frequency(n_bins - 1);
    if (!(top * (1.0 + 1.0 / (2.0 * quality())) < sample_rate_hz / 2.0))
        throw ConfigError("top CQT bin at " + std::to_string(top) + " Hz reaches Nyquist");
}

std::string CqtParams::describe() const {
    std::ostringstream s;
    s.precision(17);
    s << "cqt f_min=" << f_min_hz << " bpo=" << bins_per_octave << " bins=" << n_bins << " hop=" << hop_samples
      << " window=" << window_name(window);
    return s.str();
}

Eigen::Index reflect_index(Eigen::Index j, Eigen::Index len) {
    if (len <= 1) return 0;
    const Eigen::Index period = 2 * (len - 1);
    Eigen::Index m = j % period;
    if (m < 0) m += period;
    return m < len ? m : period - m;
}

CqtKernel::CqtKernel(const CqtParams& params, int sample_rate_hz) : params_(params), rate_(sample_rate_hz) {
    params_.validate(sample_rate_hz);
    const double q = params_.quality();
    for (int k = 0; k < params_.n_bins; ++k) {
        const Eigen::Index n = params_.window_length(k, sample_rate_hz);
        const Eigen::VectorXd w = make_window(params_.window, n);
        Eigen::VectorXd re(n), im(n);
        for (Eigen::Index i = 0; i < n; ++i) {
            const double phase = -2.0 * std::numbers::pi * q * double(i) / double(n);
            re[i] = w[i] * std::cos(phase) / double(n);
            im[i] = w[i] * std::sin(phase) / double(n);
        }
        real_.push_back(std::move(re));
        imag_.push_back(std::move(im));
    }
}

Spectrogram CqtKernel::transform(const AudioBuffer& audio) const {
    if (audio.sample_rate_hz != rate_) throw ArgumentError("audio sample rate does not match CQT kernel");
    const auto len = static_cast<Eigen::Index>(audio.samples.size());
    const Eigen::Index hop = params_.hop_samples;
    const Eigen::Index frames = (len + hop - 1) / hop;

    Spectrogram out;
    out.frame_period_sec = double(hop) / rate_;
    for (int k = 0; k < params_.n_bins; ++k) out.bin_center_freqs_hz.push_back(params_.bin_frequency(k));
    out.matrix = Eigen::MatrixXd::Zero(frames, params_.n_bins);
    if (frames == 0) return out;

    // Pad once so every kernel reads a contiguous block.
    const Eigen::Index pad = real_.front().size() / 2 + 1;
    Eigen::VectorXd padded(len + 2 * pad + real_.front().size());
    for (Eigen::Index j = 0; j < padded.size(); ++j)
        padded[j] = audio.samples[static_cast<std::size_t>(reflect_index(j - pad, len))];

    for (Eigen::Index t = 0; t < frames; ++t) {
        const Eigen::Index centre = t * hop + pad;
        for (int k = 0; k < params_.n_bins; ++k) {
            const Eigen::Index n = real_[k].size();
            const auto segment = padded.segment(centre - n / 2, n);
            const double re = real_[k].dot(segment);
            const double im = imag_[k].dot(segment);
            out.matrix(t, k) = std::sqrt(re * re + im * im);
        }
    }
    return out;
}

Spectrogram cqt(const AudioBuffer& audio, const CqtParams& params) {
    return CqtKernel(params, audio.sample_rate_hz).transform(audio);
}

Spectrogram log_compress(const Spectrogram& spec, double gamma) {
    Spectrogram out = spec;
    out.matrix = (1.0 + gamma * spec.matrix.array()).log().matrix();
    out.log_scaled = true;
    return out;
}

// ---------------------------------------------------------------------------
// Cache

namespace {

constexpr char kCacheMagic[4] = {'A', 'M', 'T', 'C'};
constexpr std::uint32_t kCacheVersion = 1;

static_assert(std::endian::native == std::endian::little, "cache I/O assumes a little-endian host");

template <typename T>
void put(std::string& buf, const T& v) {
    buf.append(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
bool get(const std::string& buf, std::size_t& pos, T& v) {
    if (buf.size() - pos < sizeof(T)) return false;
    std::memcpy(&v, buf.data() + pos, sizeof(T));
    pos += sizeof(T);
    return true;
}

Sha256::Digest key_digest(const std::string& key) { return Sha256().update(key).finish(); }

}  // namespace

std::string spectrogram_cache_key(const AudioBuffer& audio, const std::string& params_description) {
    Sha256 h;
    h.update(params_description);
    h.update_value(static_cast<std::int64_t>(audio.sample_rate_hz));
    h.update(std::span(reinterpret_cast<const std::uint8_t*>(audio.samples.data()),
                       audio.samples.size() * sizeof(double)));
    return to_hex(h.finish());
}

void round_to_float(Spectrogram& spec) { spec.matrix = spec.matrix.cast<float>().cast<double>(); }

SpectrogramCache::SpectrogramCache(std::filesystem::path dir) : dir_(std::move(dir)) {}

std::filesystem::path SpectrogramCache::entry_path(const std::string& key) const { return dir_ / (key + ".amtc"); }

// Layout (little-endian):
//   "AMTC" | u32 version | u64 frames | u64 bins | 32-byte key digest |
//   u32 log flag | f64 frame period | f64 x bins centre freqs |
//   f32 x frames*bins row-major | 32-byte SHA-256 of everything before it
void SpectrogramCache::store(const std::string& key, const Spectrogram& spec) const {
    std::string buf;
    buf.append(kCacheMagic, 4);
    put(buf, kCacheVersion);
    put(buf, static_cast<std::uint64_t>(spec.frames()));
    put(buf, static_cast<std::uint64_t>(spec.bins()));
    const auto kd = key_digest(key);
    buf.append(reinterpret_cast<const char*>(kd.data()), kd.size());
    put(buf, static_cast<std::uint32_t>(spec.log_scaled ? 1 : 0));
    put(buf, spec.frame_period_sec);
    for (double f : spec.bin_center_freqs_hz) put(buf, f);
    for (Eigen::Index t = 0; t < spec.frames(); ++t)
        for (Eigen::Index k = 0; k < spec.bins(); ++k) put(buf, static_cast<float>(spec.matrix(t, k)));
    const auto check = Sha256().update(std::span(reinterpret_cast<const std::uint8_t*>(buf.data()), buf.size())).finish();
    buf.append(reinterpret_cast<const char*>(check.data()), check.size());

    std::filesystem::create_directories(dir_);
    const auto final_path = entry_path(key);
    auto tmp = final_path;
    tmp += ".tmp" + std::to_string(reinterpret_cast<std::uintptr_t>(&buf));
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot write " + tmp.string());
        out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
        if (!out) throw IoError("short write to " + tmp.string());
    }
    std::filesystem::rename(tmp, final_path);
}

bool SpectrogramCache::load(const std::string& key, Spectrogram& out) const {
    std::ifstream in(entry_path(key), std::ios::binary);
    if (!in) return false;
    std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (buf.size() < 4 + 32 || std::memcmp(buf.data(), kCacheMagic, 4) != 0) return false;

    const std::size_t body = buf.size() - 32;
    const auto check = Sha256().update(std::span(reinterpret_cast<const std::uint8_t*>(buf.data()), body)).finish();
    if (std::memcmp(check.data(), buf.data() + body, 32) != 0) return false;

    std::size_t pos = 4;
    std::uint32_t version = 0, log_flag = 0;
    std::uint64_t frames = 0, bins = 0;
    if (!get(buf, pos, version) || version != kCacheVersion) return false;
    if (!get(buf, pos, frames) || !get(buf, pos, bins)) return false;
    if (body - pos < 32) return false;
    const auto kd = key_digest(key);
    if (std::memcmp(kd.data(), buf.data() + pos, 32) != 0) return false;
    pos += 32;
    Spectrogram spec;
    if (!get(buf, pos, log_flag) || !get(buf, pos, spec.frame_period_sec)) return false;
    if ((body - pos) != bins * sizeof(double) + frames * bins * sizeof(float)) return false;
    spec.log_scaled = log_flag != 0;
    spec.bin_center_freqs_hz.resize(bins);
    for (auto& f : spec.bin_center_freqs_hz) get(buf, pos, f);
    spec.matrix.resize(static_cast<Eigen::Index>(frames), static_cast<Eigen::Index>(bins));
    for (Eigen::Index t = 0; t < spec.frames(); ++t)
        for (Eigen::Index k = 0; k < spec.bins(); ++k) {
            float v = 0;
            get(buf, pos, v);
            spec.matrix(t, k) = v;
        }
    out = std::move(spec);
    return true;
}

Spectrogram SpectrogramCache::get_or_compute(const std::string& key, const std::function<Spectrogram()>& compute) {
    Spectrogram spec;
    if (load(key, spec)) {
        ++hits_;
        return spec;
    }
    ++misses_;
    spec = compute();
    round_to_float(spec);
    try {
        store(key, spec);
    } catch (const std::exception& e) {
        std::cerr << "warning: spectrogram cache write failed (" << e.what() << "), continuing uncached\n";
    }
    return spec;
}

}  // namespace amt
