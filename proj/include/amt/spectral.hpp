#pragma once

#include "amt/synthesis.hpp"

#include <Eigen/Core>

#include <atomic>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

namespace amt {

/// Frames x bins magnitudes on a fixed frame clock.
struct Spectrogram {
    double frame_period_sec = 0.01;
    std::vector<double> bin_center_freqs_hz;  // strictly ascending
    Eigen::MatrixXd matrix;                   // frames x bins
    bool log_scaled = false;

    Eigen::Index frames() const { return matrix.rows(); }
    Eigen::Index bins() const { return matrix.cols(); }
};

enum class Window { Hann, Hamming, Rectangular };

Window parse_window(const std::string& name);
std::string window_name(Window w);
/// Periodic taper of length n.
Eigen::VectorXd make_window(Window w, Eigen::Index n);

// ---------------------------------------------------------------------------
// STFT / mel

struct StftParams {
    Eigen::Index window_len = 1024;
    Eigen::Index hop = 160;
    Window window = Window::Hann;
};

/// Magnitude STFT, bins 0..window_len/2. Frames start at t*hop; the tail is
/// zero-padded so the last frame is complete.
Spectrogram stft(const AudioBuffer& audio, const StftParams& params);

double hz_to_mel(double hz);
double mel_to_hz(double mel);

/// Triangular filterbank (n_mels x stft_bins) between f_lo and f_hi on the
/// 2595*log10(1 + f/700) scale. A filter too narrow to cover any STFT bin
/// takes the bin nearest its centre, so every row has positive mass.
Eigen::MatrixXd mel_filterbank(Eigen::Index n_mels, double f_lo, double f_hi, Eigen::Index window_len,
                               int sample_rate_hz);

Spectrogram mel_spectrogram(const AudioBuffer& audio, const StftParams& stft_params, Eigen::Index n_mels,
                            double f_lo, double f_hi);

// ---------------------------------------------------------------------------
// Constant-Q

struct CqtParams {
    double f_min_hz = 32.70;
    int bins_per_octave = 12;
    int n_bins = 88;
    Eigen::Index hop_samples = 160;
    Window window = Window::Hann;

    double quality() const;
    double bin_frequency(int k) const;
    /// Window length ceil(Q * rate / f_k).
    Eigen::Index window_length(int k, int sample_rate_hz) const;
    /// Throws ConfigError when the top bin's band reaches Nyquist.
    void validate(int sample_rate_hz) const;
    /// Stable textual form, part of cache keys.
    std::string describe() const;
};

/// Precomputed complex analysis kernels for one (params, sample rate) pair.
class CqtKernel {
public:
    CqtKernel(const CqtParams& params, int sample_rate_hz);

    const CqtParams& params() const { return params_; }
    int sample_rate_hz() const { return rate_; }

    /// Per frame t (centre t*hop) and bin k:
    ///   X = (1/N_k) |sum_{n<N_k} w_k[n] x[c - N_k/2 + n] exp(-2 pi i Q n / N_k)|
    /// with reflection padding outside the signal.
    Spectrogram transform(const AudioBuffer& audio) const;

private:
    CqtParams params_;
    int rate_;
    std::vector<Eigen::VectorXd> real_;
    std::vector<Eigen::VectorXd> imag_;
};

Spectrogram cqt(const AudioBuffer& audio, const CqtParams& params);

/// Index into a signal of length len with whole-sample-symmetric reflection.
Eigen::Index reflect_index(Eigen::Index j, Eigen::Index len);

inline constexpr double kDefaultLogGamma = 1000.0;

/// log(1 + gamma * magnitude), flagged as log-scaled.
Spectrogram log_compress(const Spectrogram& spec, double gamma = kDefaultLogGamma);

// ---------------------------------------------------------------------------
// Disk cache

/// Content key for a transform of `audio` under the textual parameter description.
std::string spectrogram_cache_key(const AudioBuffer& audio, const std::string& params_description);

/// One file per key under a directory. Entries store 32-bit floats, so every
/// returned matrix (hit or miss) is rounded through float32 and hits are
/// bit-identical to the first computation. Writes go to a temporary file and
/// are renamed into place.
class SpectrogramCache {
public:
    explicit SpectrogramCache(std::filesystem::path dir);

    const std::filesystem::path& dir() const { return dir_; }
    std::filesystem::path entry_path(const std::string& key) const;

    Spectrogram get_or_compute(const std::string& key, const std::function<Spectrogram()>& compute);

    /// Returns false (and leaves `out` alone) for missing or damaged entries.
    bool load(const std::string& key, Spectrogram& out) const;
    void store(const std::string& key, const Spectrogram& spec) const;

    std::size_t hits() const { return hits_; }
    std::size_t misses() const { return misses_; }

private:
    std::filesystem::path dir_;
    std::atomic<std::size_t> hits_{0};
    std::atomic<std::size_t> misses_{0};
};

/// Round every cell through float32.
void round_to_float(Spectrogram& spec);

}  // namespace amt
