#include "amt/synthesis.hpp"

#include "amt/errors.hpp"
#include "amt/random.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <sstream>

namespace amt {

void validate(const TimbreProfile& t) {
    if (t.harmonic_amplitudes.empty() ||
        std::none_of(t.harmonic_amplitudes.begin(), t.harmonic_amplitudes.end(), [](double a) { return a > 0.0; }))
        throw ConfigError("timbre '" + t.name + "' has no non-zero harmonic");
    for (double a : t.harmonic_amplitudes)
        if (!(a >= 0.0) || !std::isfinite(a)) throw ConfigError("timbre '" + t.name + "': negative harmonic amplitude");
    const Adsr& e = t.adsr;
    if (!(e.attack_sec >= 0 && e.decay_sec >= 0 && e.release_sec >= 0))
        throw ConfigError("timbre '" + t.name + "': envelope times must be non-negative");
    if (!(e.sustain_level >= 0 && e.sustain_level <= 1))
        throw ConfigError("timbre '" + t.name + "': sustain level outside [0, 1]");
    if (!(t.velocity_exponent > 0)) throw ConfigError("timbre '" + t.name + "': velocity exponent must be positive");
}

double midi_to_hz(double pitch) { return 440.0 * std::exp2((pitch - 69.0) / 12.0); }

namespace {

// Level of the attack/decay/sustain segment `t` seconds after onset.
double held_level(const Adsr& e, double t) {
    if (t < e.attack_sec) return t / e.attack_sec;
    t -= e.attack_sec;
    if (t < e.decay_sec) return 1.0 - (1.0 - e.sustain_level) * (t / e.decay_sec);
    return e.sustain_level;
}

}  // namespace

double envelope(const Adsr& e, double t, double held) {
    if (t < 0.0) return 0.0;
    if (t < held) return held_level(e, t);
    const double since_release = t - held;
    if (since_release >= e.release_sec) return 0.0;
    return held_level(e, held) * (1.0 - since_release / e.release_sec);
}

AudioBuffer render(const NoteTrack& track, const SynthConfig& config) {
    validate(config.timbre);
    if (config.sample_rate_hz <= 0) throw ConfigError("sample rate must be positive");
    if (!(config.noise_floor_amplitude >= 0.0 && config.noise_floor_amplitude < 0.1))
        throw ConfigError("noise floor amplitude must lie in [0, 0.1)");

    const double rate = config.sample_rate_hz;
    const Adsr& adsr = config.timbre.adsr;
    const auto& harmonics = config.timbre.harmonic_amplitudes;

    double end_sec = 0.0;
    for (const auto& e : track.events()) end_sec = std::max(end_sec, e.offset_sec + adsr.release_sec);

    AudioBuffer out;
    out.sample_rate_hz = config.sample_rate_hz;
    out.samples.assign(track.empty() ? 0 : static_cast<std::size_t>(std::ceil(end_sec * rate)), 0.0);

    constexpr double two_pi = 2.0 * std::numbers::pi;
    for (const auto& e : track.events()) {
        const double f0 = midi_to_hz(e.pitch);
        const double gain = std::pow(e.velocity / 127.0, config.timbre.velocity_exponent);
        const double held = e.duration();
        const auto first = static_cast<std::size_t>(std::ceil(e.onset_sec * rate));
        const auto last = std::min(out.samples.size(),
                                   static_cast<std::size_t>(std::ceil((e.offset_sec + adsr.release_sec) * rate)));
        for (std::size_t n = first; n < last; ++n) {
            const double t = double(n) / rate;
            const double env = envelope(adsr, t - e.onset_sec, held);
            if (env == 0.0) continue;
            double s = 0.0;
            for (std::size_t k = 0; k < harmonics.size(); ++k) {
                const double f = f0 * double(k + 1);
                if (f >= rate / 2) break;
                if (harmonics[k] != 0.0) s += harmonics[k] * std::sin(two_pi * f * t);
            }
            out.samples[n] += gain * env * s;
        }
    }

    if (config.noise_floor_amplitude > 0.0) {
        Rng rng(config.noise_seed);
        for (double& s : out.samples) s += uniform_real(rng, -config.noise_floor_amplitude, config.noise_floor_amplitude);
    }
    if (config.peak_normalize) {
        double peak = 0.0;
        for (double s : out.samples) peak = std::max(peak, std::abs(s));
        if (peak > 0.0)
            for (double& s : out.samples) s *= kNormalizedPeak / peak;
    }
    return out;
}

const std::vector<TimbreProfile>& builtin_timbres() {
    // Piano: hammered, fast attack, strong low partials, long decay.
    // Guitar: plucked, very short attack, brighter partials, quicker decay.
    // Organ: slow attack, flat sustain, odd-heavy spectrum. Reserved for zero-shot tests.
    static const std::vector<TimbreProfile> timbres = {
        {"piano-like", {1.0, 0.55, 0.3, 0.18, 0.1, 0.06, 0.035, 0.02}, {0.005, 0.9, 0.25, 0.12}, 1.0},
        {"guitar-like",
         {1.0, 0.8, 0.65, 0.5, 0.42, 0.33, 0.26, 0.2, 0.15, 0.11, 0.08, 0.05},
         {0.002, 0.45, 0.1, 0.08},
         1.2},
        {"organ-like", {1.0, 0.08, 0.55, 0.05, 0.35, 0.03, 0.22, 0.02, 0.12}, {0.03, 0.05, 0.85, 0.06}, 0.6},
    };
    return timbres;
}

std::optional<TimbreProfile> find_timbre(const std::string& name) {
    for (const auto& t : builtin_timbres())
        if (t.name == name) return t;
    return std::nullopt;
}

TimbreProfile parse_timbre(std::istream& in) {
    boost::property_tree::ptree tree;
    try {
        boost::property_tree::read_ini(in, tree);
    } catch (const boost::property_tree::ini_parser_error& e) {
        throw ParseError(e.message(), e.line());
    }
    TimbreProfile t;
    try {
        t.name = tree.get<std::string>("name");
        t.harmonic_amplitudes.clear();
        std::istringstream harm(tree.get<std::string>("harmonics"));
        for (double a; harm >> a;) t.harmonic_amplitudes.push_back(a);
        t.adsr.attack_sec = tree.get<double>("attack");
        t.adsr.decay_sec = tree.get<double>("decay");
        t.adsr.sustain_level = tree.get<double>("sustain");
        t.adsr.release_sec = tree.get<double>("release");
        t.velocity_exponent = tree.get<double>("velocity_exponent", 1.0);
    } catch (const boost::property_tree::ptree_error& e) {
        throw ConfigError(std::string("timbre file: ") + e.what());
    }
    validate(t);
    return t;
}

void write_timbre(const TimbreProfile& t, std::ostream& out) {
    std::ostringstream harm;
    harm.precision(17);
    for (std::size_t i = 0; i < t.harmonic_amplitudes.size(); ++i)
        harm << (i ? " " : "") << t.harmonic_amplitudes[i];
    out.precision(17);
    out << "name = " << t.name << '\n'
        << "harmonics = " << harm.str() << '\n'
        << "attack = " << t.adsr.attack_sec << '\n'
        << "decay = " << t.adsr.decay_sec << '\n'
        << "sustain = " << t.adsr.sustain_level << '\n'
        << "release = " << t.adsr.release_sec << '\n'
        << "velocity_exponent = " << t.velocity_exponent << '\n';
}

// ---------------------------------------------------------------------------
// WAV

namespace {

void put_u32(std::ostream& out, std::uint32_t v) {
    const char b[4] = {char(v & 0xFF), char((v >> 8) & 0xFF), char((v >> 16) & 0xFF), char((v >> 24) & 0xFF)};
    out.write(b, 4);
}

void put_u16(std::ostream& out, std::uint16_t v) {
    const char b[2] = {char(v & 0xFF), char((v >> 8) & 0xFF)};
    out.write(b, 2);
}

std::uint32_t get_u32(const unsigned char* p) { return p[0] | (p[1] << 8) | (p[2] << 16) | (std::uint32_t(p[3]) << 24); }
std::uint16_t get_u16(const unsigned char* p) { return static_cast<std::uint16_t>(p[0] | (p[1] << 8)); }

}  // namespace

void write_wav(const AudioBuffer& buffer, std::ostream& out) {
    const auto data_bytes = static_cast<std::uint32_t>(buffer.samples.size() * 2);
    out.write("RIFF", 4);
    put_u32(out, 36 + data_bytes);
    out.write("WAVEfmt ", 8);
    put_u32(out, 16);
    put_u16(out, 1);  // PCM
    put_u16(out, 1);  // mono
    put_u32(out, static_cast<std::uint32_t>(buffer.sample_rate_hz));
    put_u32(out, static_cast<std::uint32_t>(buffer.sample_rate_hz) * 2);
    put_u16(out, 2);
    put_u16(out, 16);
    out.write("data", 4);
    put_u32(out, data_bytes);
    std::vector<char> pcm(data_bytes);
    for (std::size_t i = 0; i < buffer.samples.size(); ++i) {
        const double x = std::clamp(buffer.samples[i], -1.0, 1.0);
        const auto v = static_cast<std::uint16_t>(static_cast<std::int16_t>(std::lround(x * 32767.0)));
        pcm[2 * i] = char(v & 0xFF);
        pcm[2 * i + 1] = char(v >> 8);
    }
    out.write(pcm.data(), static_cast<std::streamsize>(pcm.size()));
    if (!out) throw IoError("failed writing WAV data");
}

AudioBuffer read_wav(std::istream& in) {
    unsigned char riff[12];
    if (!in.read(reinterpret_cast<char*>(riff), 12)) throw FormatError("WAV shorter than RIFF header");
    if (std::memcmp(riff, "RIFF", 4) != 0 || std::memcmp(riff + 8, "WAVE", 4) != 0)
        throw FormatError("not a RIFF/WAVE stream");

    AudioBuffer out;
    bool have_fmt = false;
    unsigned char chunk[8];
    while (in.read(reinterpret_cast<char*>(chunk), 8)) {
        const std::uint32_t size = get_u32(chunk + 4);
        if (std::memcmp(chunk, "fmt ", 4) == 0) {
            if (size < 16) throw FormatError("fmt chunk too short");
            std::vector<unsigned char> fmt(size + (size & 1));
            if (!in.read(reinterpret_cast<char*>(fmt.data()), static_cast<std::streamsize>(fmt.size())))
                throw FormatError("truncated fmt chunk");
            const std::uint16_t format = get_u16(fmt.data());
            const std::uint16_t channels = get_u16(fmt.data() + 2);
            const std::uint16_t bits = get_u16(fmt.data() + 14);
            if (format != 1) throw FormatError("unsupported WAV encoding (only PCM)");
            if (channels != 1) throw FormatError("unsupported channel count " + std::to_string(channels));
            if (bits != 16) throw FormatError("unsupported bit depth " + std::to_string(bits));
            out.sample_rate_hz = static_cast<int>(get_u32(fmt.data() + 4));
            if (out.sample_rate_hz <= 0) throw FormatError("invalid sample rate");
            have_fmt = true;
        } else if (std::memcmp(chunk, "data", 4) == 0) {
            if (!have_fmt) throw FormatError("data chunk before fmt chunk");
            std::vector<unsigned char> pcm(size);
            if (!in.read(reinterpret_cast<char*>(pcm.data()), size)) throw FormatError("truncated data chunk");
            out.samples.resize(size / 2);
            for (std::size_t i = 0; i < out.samples.size(); ++i)
                out.samples[i] = std::max(-1.0, static_cast<std::int16_t>(get_u16(pcm.data() + 2 * i)) / 32767.0);
            return out;
        } else {
            in.ignore(size + (size & 1));
        }
    }
    throw FormatError("WAV stream has no data chunk");
}

void write_wav_file(const AudioBuffer& buffer, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open " + path + " for writing");
    write_wav(buffer, out);
}

AudioBuffer read_wav_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);
    return read_wav(in);
}

}  // namespace amt
