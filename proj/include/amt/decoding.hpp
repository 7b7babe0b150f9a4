#pragma once

#include "amt/metrics.hpp"
#include "amt/note_events.hpp"

namespace amt {

struct DecodeConfig {
    double threshold = 0.5;          // a frame is on when probability > threshold
    int min_duration_frames = 2;     // shorter runs are discarded
    int gap_tolerance_frames = 0;    // off-gaps this short are bridged
};

void validate(const DecodeConfig& config);

/// Per pitch column: binarize, bridge short gaps, keep runs of at least
/// min_duration frames. A run [a, b] becomes a note from a*period to
/// (b+1)*period with velocity 100.
NoteTrack decode_frames(const PianoRoll& probabilities, const DecodeConfig& config = {});

/// Binary roll of cells strictly above the threshold.
PianoRoll binarize(const PianoRoll& probabilities, double threshold);

/// rasterize -> decode -> note metrics against the original track.
PRFScore roundtrip_check(const NoteTrack& track, double frame_period_sec = 0.01, const DecodeConfig& config = {},
                         const MatchTolerances& tol = {});

}  // namespace amt
