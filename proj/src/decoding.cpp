#include "amt/decoding.hpp"

#include "amt/errors.hpp"

namespace amt {

void validate(const DecodeConfig& c) {
    if (!(c.threshold > 0.0 && c.threshold < 1.0)) throw ConfigError("decode threshold must lie in (0, 1)");
    if (c.min_duration_frames < 1) throw ConfigError("minimum duration must be at least one frame");
    if (c.gap_tolerance_frames < 0) throw ConfigError("gap tolerance must be non-negative");
}

PianoRoll binarize(const PianoRoll& probabilities, double threshold) {
    PianoRoll out = probabilities;
    out.matrix = (probabilities.matrix.array() > threshold).cast<double>().matrix();
    return out;
}

NoteTrack decode_frames(const PianoRoll& probs, const DecodeConfig& config) {
    validate(config);
    const Eigen::Index frames = probs.frames();
    const double period = probs.frame_period_sec;
    std::vector<NoteEvent> events;
    std::vector<char> on(static_cast<std::size_t>(frames));
    for (Eigen::Index p = 0; p < probs.pitches(); ++p) {
        for (Eigen::Index f = 0; f < frames; ++f) on[f] = probs.matrix(f, p) > config.threshold;

        // Fill interior gaps of at most gap_tolerance frames.
        if (config.gap_tolerance_frames > 0) {
            Eigen::Index last_on = -1;
            for (Eigen::Index f = 0; f < frames; ++f) {
                if (!on[f]) continue;
                if (last_on >= 0 && f - last_on - 1 <= config.gap_tolerance_frames)
                    for (Eigen::Index g = last_on + 1; g < f; ++g) on[g] = 1;
                last_on = f;
            }
        }

        for (Eigen::Index f = 0; f < frames;) {
            if (!on[f]) {
                ++f;
                continue;
            }
            Eigen::Index end = f;
            while (end + 1 < frames && on[end + 1]) ++end;
            if (end - f + 1 >= config.min_duration_frames)
                events.push_back({probs.pitch_min + static_cast<int>(p), kDefaultVelocity, double(f) * period,
                                  double(end + 1) * period});
            f = end + 1;
        }
    }
    NoteTrack track(std::move(events));
    track.set_duration(double(frames) * period);
    return track;
}

PRFScore roundtrip_check(const NoteTrack& track, double frame_period_sec, const DecodeConfig& config,
                         const MatchTolerances& tol) {
    int pitch_min = kDefaultPitchMin, pitch_max = kDefaultPitchMin + kDefaultPitchCount - 1;
    for (const auto& e : track.events()) {
        pitch_min = std::min(pitch_min, e.pitch);
        pitch_max = std::max(pitch_max, e.pitch);
    }
    const PianoRoll roll = rasterize(track, frame_period_sec, pitch_min, pitch_max - pitch_min + 1);
    return note_metrics(track, decode_frames(roll, config), tol, MatchMode::Onset);
}

}  // namespace amt
