#include "amt/note_events.hpp"

#include "amt/errors.hpp"
#include "amt/random.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <deque>
#include <functional>
#include <iomanip>
#include <map>
#include <sstream>

namespace amt {

void validate(const NoteEvent& e) {
    if (e.pitch < 0 || e.pitch > 127)
        throw ValidationError("pitch " + std::to_string(e.pitch) + " outside 0..127");
    if (e.velocity < 1 || e.velocity > 127)
        throw ValidationError("velocity " + std::to_string(e.velocity) + " outside 1..127");
    if (!std::isfinite(e.onset_sec) || !std::isfinite(e.offset_sec) || e.onset_sec < 0.0)
        throw ValidationError("onset must be finite and non-negative");
    if (!(e.offset_sec > e.onset_sec))
        throw ValidationError("offset must be strictly after onset");
}

bool note_order(const NoteEvent& a, const NoteEvent& b) {
    if (a.onset_sec != b.onset_sec) return a.onset_sec < b.onset_sec;
    if (a.pitch != b.pitch) return a.pitch < b.pitch;
    if (a.offset_sec != b.offset_sec) return a.offset_sec < b.offset_sec;
    return a.velocity < b.velocity;
}

NoteTrack::NoteTrack(std::vector<NoteEvent> events, std::string id, double duration_sec)
    : events_(std::move(events)), id_(std::move(id)), duration_sec_(duration_sec) {
    for (const auto& e : events_) {
        validate(e);
        duration_sec_ = std::max(duration_sec_, e.offset_sec);
    }
    std::sort(events_.begin(), events_.end(), note_order);
}

void NoteTrack::add(const NoteEvent& event) {
    validate(event);
    events_.insert(std::upper_bound(events_.begin(), events_.end(), event, note_order), event);
    duration_sec_ = std::max(duration_sec_, event.offset_sec);
}

void NoteTrack::set_duration(double duration_sec) {
    double latest = 0.0;
    for (const auto& e : events_) latest = std::max(latest, e.offset_sec);
    duration_sec_ = std::max(duration_sec, latest);
}

NoteTrack NoteTrack::shifted(double delta_sec) const {
    std::vector<NoteEvent> moved = events_;
    for (auto& e : moved) {
        e.onset_sec += delta_sec;
        e.offset_sec += delta_sec;
    }
    return NoteTrack(std::move(moved), id_, duration_sec_ + delta_sec);
}

// ---------------------------------------------------------------------------
// Note CSV

namespace {

std::vector<std::string> split_fields(const std::string& line) {
    std::vector<std::string> fields;
    std::string current;
    for (char c : line) {
        if (c == ',' || c == ' ' || c == '\t' || c == '\r' || c == ';') {
            if (!current.empty()) fields.push_back(std::move(current));
            current.clear();
        } else {
            current += c;
        }
    }
    if (!current.empty()) fields.push_back(std::move(current));
    return fields;
}

bool parse_double(const std::string& s, double& out) {
    const char* first = s.data();
    const char* last = s.data() + s.size();
    if (first != last && *first == '+') ++first;
    auto [ptr, ec] = std::from_chars(first, last, out);
    return ec == std::errc() && ptr == last;
}

int parse_int_field(const std::string& s, std::size_t line, const char* what) {
    double v = 0.0;
    if (!parse_double(s, v) || v != std::floor(v))
        throw ParseError(std::string("malformed ") + what + " '" + s + "'", line);
    return static_cast<int>(v);
}

}  // namespace

NoteTrack parse_note_csv(std::istream& in) {
    NoteTrack track;
    std::string line;
    std::size_t line_no = 0;
    bool seen_data = false;
    while (std::getline(in, line)) {
        ++line_no;
        if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        const auto fields = split_fields(line);
        if (fields.empty()) continue;

        double onset = 0.0;
        if (!seen_data && !parse_double(fields[0], onset)) {
            seen_data = true;  // header row
            continue;
        }
        seen_data = true;
        if (fields.size() < 3 || fields.size() > 4)
            throw ParseError("expected 3 or 4 fields, got " + std::to_string(fields.size()), line_no);

        NoteEvent e;
        double offset = 0.0;
        if (!parse_double(fields[0], onset)) throw ParseError("malformed onset '" + fields[0] + "'", line_no);
        if (!parse_double(fields[1], offset)) throw ParseError("malformed offset '" + fields[1] + "'", line_no);
        e.onset_sec = onset;
        e.offset_sec = offset;
        e.pitch = parse_int_field(fields[2], line_no, "pitch");
        e.velocity = fields.size() == 4 ? parse_int_field(fields[3], line_no, "velocity") : kDefaultVelocity;
        try {
            track.add(e);
        } catch (const ValidationError& err) {
            throw ValidationError("line " + std::to_string(line_no) + ": " + err.what());
        }
    }
    return track;
}

NoteTrack parse_note_csv(const std::string& text) {
    std::istringstream in(text);
    return parse_note_csv(in);
}

void write_note_csv(const NoteTrack& track, std::ostream& out) {
    out << "# onset_sec,offset_sec,pitch,velocity\n";
    // 17 significant digits so that parse(write(x)) reproduces x exactly.
    out << std::setprecision(17);
    for (const auto& e : track.events())
        out << e.onset_sec << ',' << e.offset_sec << ',' << e.pitch << ',' << e.velocity << '\n';
}

// ---------------------------------------------------------------------------
// Standard MIDI File

namespace {

class ByteReader {
public:
    explicit ByteReader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

    bool at_end() const { return pos_ >= bytes_.size(); }
    std::size_t pos() const { return pos_; }

    std::uint8_t u8() {
        need(1);
        return bytes_[pos_++];
    }
    std::uint16_t u16() {
        need(2);
        std::uint16_t v = static_cast<std::uint16_t>((bytes_[pos_] << 8) | bytes_[pos_ + 1]);
        pos_ += 2;
        return v;
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v = (v << 8) | bytes_[pos_ + i];
        pos_ += 4;
        return v;
    }
    std::uint32_t varlen() {
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) {
            const std::uint8_t b = u8();
            v = (v << 7) | (b & 0x7F);
            if (!(b & 0x80)) return v;
        }
        throw FormatError("variable-length quantity longer than 4 bytes");
    }
    std::span<const std::uint8_t> take(std::size_t n) {
        need(n);
        auto s = bytes_.subspan(pos_, n);
        pos_ += n;
        return s;
    }
    std::uint8_t peek() {
        need(1);
        return bytes_[pos_];
    }

private:
    void need(std::size_t n) const {
        if (bytes_.size() - pos_ < n || pos_ > bytes_.size()) throw FormatError("truncated MIDI data");
    }

    std::span<const std::uint8_t> bytes_;
    std::size_t pos_ = 0;
};

struct RawNote {
    std::uint64_t on_tick;
    std::uint64_t off_tick;
    int pitch;
    int velocity;
};

struct TempoChange {
    std::uint64_t tick;
    std::uint32_t us_per_quarter;
};

void read_track(ByteReader& chunk, std::vector<RawNote>& notes, std::vector<TempoChange>& tempos) {
    std::uint64_t tick = 0;
    std::uint8_t status = 0;
    // Open notes per (channel, pitch), closed first-in first-out.
    std::map<std::pair<int, int>, std::deque<std::pair<std::uint64_t, int>>> open;

    auto close = [&](int channel, int pitch) {
        auto it = open.find({channel, pitch});
        if (it == open.end() || it->second.empty()) return;
        auto [on, vel] = it->second.front();
        it->second.pop_front();
        notes.push_back({on, tick, pitch, vel});
    };

    while (!chunk.at_end()) {
        tick += chunk.varlen();
        std::uint8_t byte = chunk.peek();
        if (byte & 0x80) {
            chunk.u8();
            if (byte < 0xF0) status = byte;  // running status applies to channel messages only
        } else {
            if (status == 0) throw FormatError("data byte without running status");
            byte = status;
        }

        if (byte == 0xFF) {
            const std::uint8_t type = chunk.u8();
            const std::uint32_t len = chunk.varlen();
            auto data = chunk.take(len);
            if (type == 0x51 && len == 3)
                tempos.push_back({tick, (std::uint32_t(data[0]) << 16) | (std::uint32_t(data[1]) << 8) | data[2]});
            if (type == 0x2F) break;
            continue;
        }
        if (byte == 0xF0 || byte == 0xF7) {
            chunk.take(chunk.varlen());
            continue;
        }
        if (byte >= 0xF0) throw FormatError("unexpected system message in track");

        const int kind = byte & 0xF0;
        const int channel = byte & 0x0F;
        const int data_bytes = (kind == 0xC0 || kind == 0xD0) ? 1 : 2;
        const std::uint8_t d1 = chunk.u8();
        const std::uint8_t d2 = data_bytes == 2 ? chunk.u8() : 0;
        if (kind == 0x90 && d2 > 0) {
            open[{channel, d1}].emplace_back(tick, d2);
        } else if (kind == 0x80 || kind == 0x90) {
            close(channel, d1);
        }
    }
    // Unterminated notes end at the end of their track.
    for (auto& [key, queue] : open)
        for (auto [on, vel] : queue) notes.push_back({on, tick, key.second, vel});
}

}  // namespace

NoteTrack parse_standard_midi(std::span<const std::uint8_t> bytes) {
    ByteReader reader(bytes);
    auto magic = reader.take(4);
    if (!std::equal(magic.begin(), magic.end(), "MThd")) throw FormatError("missing MThd header");
    const std::uint32_t header_len = reader.u32();
    if (header_len < 6) throw FormatError("MThd chunk too short");
    const std::uint16_t format = reader.u16();
    const std::uint16_t n_tracks = reader.u16();
    const std::uint16_t division = reader.u16();
    reader.take(header_len - 6);
    if (format > 1) throw FormatError("unsupported SMF format " + std::to_string(format));
    if (division == 0) throw FormatError("zero time division");

    std::vector<RawNote> notes;
    std::vector<TempoChange> tempos;
    for (std::uint16_t t = 0; t < n_tracks; ++t) {
        auto id = reader.take(4);
        const std::uint32_t len = reader.u32();
        auto body = reader.take(len);
        if (!std::equal(id.begin(), id.end(), "MTrk")) continue;  // unknown chunks are skipped
        ByteReader chunk(body);
        read_track(chunk, notes, tempos);
    }

    std::function<double(std::uint64_t)> to_seconds;
    if (division & 0x8000) {
        const int fps = -static_cast<std::int8_t>(division >> 8);
        const int ticks_per_frame = division & 0xFF;
        if (fps <= 0 || ticks_per_frame == 0) throw FormatError("bad SMPTE division");
        to_seconds = [=](std::uint64_t tick) { return double(tick) / (double(fps) * ticks_per_frame); };
    } else {
        std::stable_sort(tempos.begin(), tempos.end(),
                         [](const TempoChange& a, const TempoChange& b) { return a.tick < b.tick; });
        // Piecewise-linear map: (segment start tick, seconds at start, seconds per tick).
        struct Segment {
            std::uint64_t tick;
            double seconds;
            double per_tick;
        };
        std::vector<Segment> segments{{0, 0.0, 500000e-6 / division}};
        for (const auto& tc : tempos) {
            const Segment& last = segments.back();
            const double at = last.seconds + double(tc.tick - last.tick) * last.per_tick;
            const double per_tick = tc.us_per_quarter * 1e-6 / division;
            if (tc.tick == last.tick)
                segments.back().per_tick = per_tick;
            else
                segments.push_back({tc.tick, at, per_tick});
        }
        to_seconds = [segments](std::uint64_t tick) {
            auto it = std::upper_bound(segments.begin(), segments.end(), tick,
                                       [](std::uint64_t t, const Segment& s) { return t < s.tick; });
            const Segment& s = *std::prev(it);
            return s.seconds + double(tick - s.tick) * s.per_tick;
        };
    }

    std::vector<NoteEvent> events;
    for (const auto& n : notes) {
        if (n.off_tick <= n.on_tick) continue;  // zero-length notes carry no label
        events.push_back({n.pitch, n.velocity, to_seconds(n.on_tick), to_seconds(n.off_tick)});
    }
    return NoteTrack(std::move(events));
}

std::vector<std::uint8_t> write_standard_midi(const NoteTrack& track) {
    constexpr std::uint16_t kDivision = 480;
    constexpr std::uint32_t kTempo = 500000;
    constexpr double kTicksPerSecond = kDivision * 1e6 / kTempo;

    struct Msg {
        std::uint64_t tick;
        int order;  // note-offs before note-ons at the same tick
        std::uint8_t status, d1, d2;
    };
    std::vector<Msg> msgs;
    for (const auto& e : track.events()) {
        const auto on = static_cast<std::uint64_t>(std::llround(e.onset_sec * kTicksPerSecond));
        auto off = static_cast<std::uint64_t>(std::llround(e.offset_sec * kTicksPerSecond));
        if (off <= on) off = on + 1;
        msgs.push_back({on, 1, 0x90, std::uint8_t(e.pitch), std::uint8_t(e.velocity)});
        msgs.push_back({off, 0, 0x80, std::uint8_t(e.pitch), 0});
    }
    std::stable_sort(msgs.begin(), msgs.end(), [](const Msg& a, const Msg& b) {
        return a.tick != b.tick ? a.tick < b.tick : a.order < b.order;
    });

    std::vector<std::uint8_t> body;
    auto varlen = [&](std::uint64_t v) {
        std::uint8_t buf[5];
        int n = 0;
        buf[n++] = v & 0x7F;
        while (v >>= 7) buf[n++] = 0x80 | (v & 0x7F);
        while (n) body.push_back(buf[--n]);
    };
    varlen(0);
    body.insert(body.end(), {0xFF, 0x51, 0x03, (kTempo >> 16) & 0xFF, (kTempo >> 8) & 0xFF, kTempo & 0xFF});
    std::uint64_t last = 0;
    for (const auto& m : msgs) {
        varlen(m.tick - last);
        last = m.tick;
        body.insert(body.end(), {m.status, m.d1, m.d2});
    }
    varlen(0);
    body.insert(body.end(), {0xFF, 0x2F, 0x00});

    std::vector<std::uint8_t> out{'M', 'T', 'h', 'd', 0, 0, 0, 6, 0, 0, 0, 1, kDivision >> 8, kDivision & 0xFF,
                                  'M', 'T', 'r', 'k'};
    const auto len = static_cast<std::uint32_t>(body.size());
    for (int s = 24; s >= 0; s -= 8) out.push_back((len >> s) & 0xFF);
    out.insert(out.end(), body.begin(), body.end());
    return out;
}

// ---------------------------------------------------------------------------
// Piano roll

Eigen::Index frame_count(double duration_sec, double frame_period_sec) {
    if (duration_sec <= 0.0) return 0;
    return static_cast<Eigen::Index>(std::ceil(duration_sec / frame_period_sec - 1e-9));
}

PianoRoll rasterize(const NoteTrack& track, double frame_period_sec, int pitch_min, int pitch_count,
                    RasterizeStats* stats) {
    if (!(frame_period_sec > 0.0)) throw ArgumentError("frame period must be positive");
    if (pitch_count < 1) throw ArgumentError("pitch count must be positive");
    PianoRoll roll;
    roll.frame_period_sec = frame_period_sec;
    roll.pitch_min = pitch_min;
    const Eigen::Index frames = frame_count(track.duration_sec(), frame_period_sec);
    roll.matrix = Eigen::MatrixXd::Zero(frames, pitch_count);
    std::size_t dropped = 0;
    for (const auto& e : track.events()) {
        const int col = e.pitch - pitch_min;
        if (col < 0 || col >= pitch_count) {
            ++dropped;
            continue;
        }
        auto f = static_cast<Eigen::Index>(std::max(0.0, std::floor(e.onset_sec / frame_period_sec) - 1));
        for (; f < frames; ++f) {
            const double t = static_cast<double>(f) * frame_period_sec;
            if (t >= e.offset_sec) break;
            if (t >= e.onset_sec) roll.matrix(f, col) = 1.0;
        }
    }
    if (stats) stats->dropped_events = dropped;
    return roll;
}

// ---------------------------------------------------------------------------
// Splits

SplitAssignment split_tracks(const std::set<std::string>& ids, std::uint64_t seed) {
    const std::size_t n = ids.size();
    if (n < 3) throw ArgumentError("need at least 3 tracks to split, got " + std::to_string(n));
    std::vector<std::string> order(ids.begin(), ids.end());  // std::set iterates sorted
    Rng rng(seed);
    shuffle(std::span<std::string>(order), rng);

    // 80/10/10 with floors; small sets still get one validation and one test track.
    const std::size_t n_valid = std::max<std::size_t>(1, n / 10);
    const std::size_t n_train = std::min<std::size_t>(n * 8 / 10, n - n_valid - 1);

    SplitAssignment split;
    split.seed = seed;
    for (std::size_t i = 0; i < n; ++i) {
        if (i < n_train)
            split.train.insert(order[i]);
        else if (i < n_train + n_valid)
            split.valid.insert(order[i]);
        else
            split.test.insert(order[i]);
    }
    return split;
}

SplitAssignment merge_splits(const SplitAssignment& a, const SplitAssignment& b) {
    SplitAssignment out = a;
    out.train.insert(b.train.begin(), b.train.end());
    out.valid.insert(b.valid.begin(), b.valid.end());
    out.test.insert(b.test.begin(), b.test.end());
    return out;
}

}  // namespace amt
