#pragma once

#include "amt/note_events.hpp"

#include <cstdint>
#include <istream>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

namespace amt {

inline constexpr int kDefaultSampleRate = 16000;

/// Mono sampled audio.
struct AudioBuffer {
    int sample_rate_hz = kDefaultSampleRate;
    std::vector<double> samples;

    double duration_sec() const { return double(samples.size()) / sample_rate_hz; }
    friend bool operator==(const AudioBuffer&, const AudioBuffer&) = default;
};

struct Adsr {
    double attack_sec = 0.0;
    double decay_sec = 0.0;
    double sustain_level = 1.0;
    double release_sec = 0.0;
};

/// Parametric instrument: harmonic amplitudes (index 0 is the fundamental),
/// amplitude envelope and velocity response.
struct TimbreProfile {
    std::string name;
    std::vector<double> harmonic_amplitudes{1.0};
    Adsr adsr;
    double velocity_exponent = 1.0;
};

/// Throws ConfigError for an all-zero spectrum, negative amplitudes or times,
/// sustain outside [0, 1] or a non-positive velocity exponent.
void validate(const TimbreProfile& timbre);

struct SynthConfig {
    TimbreProfile timbre;
    int sample_rate_hz = kDefaultSampleRate;
    bool peak_normalize = false;
    double noise_floor_amplitude = 0.0;  // uniform white noise in [-a, a], a < 0.1
    std::uint64_t noise_seed = 0;
};

/// Peak level that peak normalization scales to.
inline constexpr double kNormalizedPeak = 0.9;

double midi_to_hz(double pitch);

/// Envelope value at `t` seconds after onset for a note held `held` seconds.
double envelope(const Adsr& adsr, double t, double held);

/// Additive rendering: every event contributes
///   sum_k A_k * env(t - onset) * (v/127)^exponent * sin(2*pi*k*f*t)
/// with t the absolute sample time. Harmonics at or above Nyquist are skipped.
/// Output length is ceil((max offset + release) * rate).
AudioBuffer render(const NoteTrack& track, const SynthConfig& config);

/// "piano-like", "guitar-like" and the held-out "organ-like".
const std::vector<TimbreProfile>& builtin_timbres();
std::optional<TimbreProfile> find_timbre(const std::string& name);

/// Key-value text form:
///   name = piano-like
///   harmonics = 1.0 0.5 0.25
///   attack = 0.005
///   decay = 0.8
///   sustain = 0.25
///   release = 0.12
///   velocity_exponent = 1
TimbreProfile parse_timbre(std::istream& in);
void write_timbre(const TimbreProfile& timbre, std::ostream& out);

/// RIFF/WAVE PCM 16-bit mono little-endian. Samples are clamped to [-1, 1]
/// and scaled by 32767.
void write_wav(const AudioBuffer& buffer, std::ostream& out);
/// Accepts PCM 16-bit mono only; anything else is a FormatError.
AudioBuffer read_wav(std::istream& in);

void write_wav_file(const AudioBuffer& buffer, const std::string& path);
AudioBuffer read_wav_file(const std::string& path);

}  // namespace amt
