#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <istream>
#include <ostream>
#include <set>
#include <span>
#include <string>
#include <vector>

namespace amt {

/// One symbolic note: MIDI pitch, strike velocity, start and end in seconds.
struct NoteEvent {
    int pitch = 60;
    int velocity = 100;
    double onset_sec = 0.0;
    double offset_sec = 0.0;

    double duration() const { return offset_sec - onset_sec; }
    friend bool operator==(const NoteEvent&, const NoteEvent&) = default;
};

/// Throws ValidationError unless the event has positive duration and
/// pitch/velocity in MIDI range.
void validate(const NoteEvent& event);

/// Total order used for track storage: onset, then pitch, then offset, then velocity.
bool note_order(const NoteEvent& a, const NoteEvent& b);

/// The labels of one recording. Events stay sorted by note_order and
/// duration_sec never drops below the latest offset.
class NoteTrack {
public:
    NoteTrack() = default;
    explicit NoteTrack(std::vector<NoteEvent> events, std::string id = {}, double duration_sec = 0.0);

    const std::vector<NoteEvent>& events() const { return events_; }
    const std::string& id() const { return id_; }
    double duration_sec() const { return duration_sec_; }
    std::size_t size() const { return events_.size(); }
    bool empty() const { return events_.empty(); }

    void add(const NoteEvent& event);
    void set_id(std::string id) { id_ = std::move(id); }
    /// Extends (never shrinks below the last offset) the nominal track length.
    void set_duration(double duration_sec);

    /// Same events with every onset/offset shifted by delta seconds.
    NoteTrack shifted(double delta_sec) const;

    friend bool operator==(const NoteTrack&, const NoteTrack&) = default;

private:
    std::vector<NoteEvent> events_;
    std::string id_;
    double duration_sec_ = 0.0;
};

/// Frames x pitches activation grid. Row f covers [f*period, (f+1)*period).
struct PianoRoll {
    double frame_period_sec = 0.01;
    int pitch_min = 21;
    Eigen::MatrixXd matrix;  // frames x pitches, values in [0, 1]

    Eigen::Index frames() const { return matrix.rows(); }
    Eigen::Index pitches() const { return matrix.cols(); }
};

inline constexpr int kDefaultPitchMin = 21;
inline constexpr int kDefaultPitchCount = 88;
inline constexpr int kDefaultVelocity = 100;

/// Reads `onset,offset,pitch[,velocity]` rows. Commas or whitespace separate
/// fields, `#` starts a comment and a leading non-numeric line is a header.
NoteTrack parse_note_csv(std::istream& in);
NoteTrack parse_note_csv(const std::string& text);
void write_note_csv(const NoteTrack& track, std::ostream& out);

/// Standard MIDI File reader (formats 0 and 1). All channels and tracks are
/// merged; note-on with velocity 0 ends a note; set-tempo events build the
/// tick-to-second map.
NoteTrack parse_standard_midi(std::span<const std::uint8_t> bytes);
/// Format 0, 480 ticks per quarter, tempo 500000 us. Times round to the tick grid.
std::vector<std::uint8_t> write_standard_midi(const NoteTrack& track);

struct RasterizeStats {
    std::size_t dropped_events = 0;  // pitch outside the roll
};

/// Label roll: cell (f, p) is 1 iff an event of pitch pitch_min + p has
/// onset <= f*period < offset. Frame count is ceil(duration / period).
PianoRoll rasterize(const NoteTrack& track, double frame_period_sec = 0.01,
                    int pitch_min = kDefaultPitchMin, int pitch_count = kDefaultPitchCount,
                    RasterizeStats* stats = nullptr);

/// Number of frames needed to cover duration_sec, tolerant of floating-point
/// noise in the quotient.
Eigen::Index frame_count(double duration_sec, double frame_period_sec);

struct SplitAssignment {
    std::set<std::string> train;
    std::set<std::string> valid;
    std::set<std::string> test;
    std::uint64_t seed = 0;
};

/// Sorts ids, shuffles them with a seeded Fisher-Yates pass and slices
/// floor(0.8n) / floor(0.1n) / remainder. Needs at least 3 ids.
SplitAssignment split_tracks(const std::set<std::string>& ids, std::uint64_t seed);

/// Dataset-wise union: train sets merge with train sets, and so on.
SplitAssignment merge_splits(const SplitAssignment& a, const SplitAssignment& b);

}  // namespace amt
