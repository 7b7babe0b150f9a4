#include "amt/errors.hpp"
#include "amt/note_events.hpp"
#include "amt/random.hpp"

#include <doctest.h>

#include <sstream>

using namespace amt;

namespace {

std::vector<std::uint8_t> smf(std::uint16_t format, std::uint16_t division,
                              const std::vector<std::vector<std::uint8_t>>& tracks) {
    std::vector<std::uint8_t> out{'M', 'T', 'h', 'd', 0, 0, 0, 6, 0, std::uint8_t(format), 0,
                                  std::uint8_t(tracks.size()), std::uint8_t(division >> 8), std::uint8_t(division & 0xFF)};
    for (const auto& t : tracks) {
        out.insert(out.end(), {'M', 'T', 'r', 'k'});
        const auto n = std::uint32_t(t.size());
        for (int s = 24; s >= 0; s -= 8) out.push_back(std::uint8_t(n >> s));
        out.insert(out.end(), t.begin(), t.end());
    }
    return out;
}

NoteTrack random_track(Rng& rng, int n) {
    std::vector<NoteEvent> ev;
    for (int i = 0; i < n; ++i) {
        const double on = std::round(uniform_real(rng, 0, 3) * 1000) / 1000;
        ev.push_back({int(30 + uniform_index(rng, 60)), int(1 + uniform_index(rng, 127)), on,
                      on + 0.01 + std::round(uniform_real(rng, 0, 1) * 1000) / 1000});
    }
    return NoteTrack(ev, "t");
}

}  // namespace

TEST_CASE("note csv: single row with velocity") {
    const auto t = parse_note_csv(std::string("0.0,0.5,60,80\n"));
    REQUIRE(t.size() == 1);
    CHECK(t.events()[0] == NoteEvent{60, 80, 0.0, 0.5});
}

TEST_CASE("note csv: empty body, header, comments and whitespace separators") {
    CHECK(parse_note_csv(std::string("")).empty());
    const auto t = parse_note_csv(std::string("OnsetTime OffsetTime MidiPitch\n# note\n1.0\t1.5\t64\n0.2 0.4 62 # trailing\n"));
    REQUIRE(t.size() == 2);
    CHECK(t.events()[0] == NoteEvent{62, 100, 0.2, 0.4});
    CHECK(t.events()[1] == NoteEvent{64, 100, 1.0, 1.5});
    CHECK(t.duration_sec() == 1.5);
}

TEST_CASE("note csv: errors") {
    CHECK_THROWS_AS(parse_note_csv(std::string("0.5,0.5,60\n")), ValidationError);
    try {
        parse_note_csv(std::string("0,1,60\n0,x,60\n"));
        FAIL("expected a parse error");
    } catch (const ParseError& e) {
        CHECK(e.line() == 2);
    }
    CHECK_THROWS_AS(parse_note_csv(std::string("0,1\n")), ParseError);
    CHECK_THROWS_AS(parse_note_csv(std::string("0,1,60.5\n")), ParseError);
    CHECK_THROWS_AS(parse_note_csv(std::string("0,1,130\n")), ValidationError);
}

TEST_CASE("midi: one quarter note at 120 bpm") {
    // Ticks to seconds: 480 ticks / 480 per quarter * 0.5 s per quarter = 0.5 s.
    const auto bytes = smf(0, 480,
                           {{0x00, 0xFF, 0x51, 0x03, 0x07, 0xA1, 0x20,  // tempo 500000
                             0x00, 0x90, 60, 100, 0x83, 0x60, 0x80, 60, 0,  // delta 480
                             0x00, 0xFF, 0x2F, 0x00}});
    const auto t = parse_standard_midi(bytes);
    REQUIRE(t.size() == 1);
    CHECK(t.events()[0] == NoteEvent{60, 100, 0.0, 0.5});
}

TEST_CASE("midi: tempo map across tracks, running status, velocity-zero note-off") {
    // Tempo track: 500000 us until tick 480, then 250000 us.
    // Note from tick 0 to 960 -> 0.5 + 0.25 = 0.75 s. Second note 960..1200 -> 0.75..0.875 s.
    const auto bytes = smf(1, 480,
                           {{0x00, 0xFF, 0x51, 0x03, 0x07, 0xA1, 0x20, 0x83, 0x60, 0xFF, 0x51, 0x03, 0x03, 0xD0, 0x90,
                             0x00, 0xFF, 0x2F, 0x00},
                            {0x00, 0x91, 64, 90, 0x87, 0x40, 64, 0,  // running status, note-on vel 0 closes
                             0x00, 67, 70, 0x81, 0x70, 0x81, 67, 10, 0x00, 0xFF, 0x2F, 0x00}});
    const auto t = parse_standard_midi(bytes);
    REQUIRE(t.size() == 2);
    CHECK(t.events()[0].pitch == 64);
    CHECK(t.events()[0].offset_sec == doctest::Approx(0.75).epsilon(1e-12));
    CHECK(t.events()[1].pitch == 67);
    CHECK(t.events()[1].onset_sec == doctest::Approx(0.75).epsilon(1e-12));
    CHECK(t.events()[1].offset_sec == doctest::Approx(0.875).epsilon(1e-12));
}

TEST_CASE("midi: meta-only file, bad magic, truncation, unterminated note") {
    CHECK(parse_standard_midi(smf(0, 96, {{0x00, 0xFF, 0x2F, 0x00}})).empty());
    auto bad = smf(0, 96, {{0x00, 0xFF, 0x2F, 0x00}});
    bad[3] = 'x';
    CHECK_THROWS_AS(parse_standard_midi(bad), FormatError);
    auto cut = smf(0, 96, {{0x00, 0x90, 60, 100, 0x60, 0x80, 60, 0, 0x00, 0xFF, 0x2F, 0x00}});
    cut.resize(cut.size() - 6);
    CHECK_THROWS_AS(parse_standard_midi(cut), FormatError);
    const auto open = parse_standard_midi(smf(0, 96, {{0x00, 0x90, 60, 100, 0x60, 0xFF, 0x2F, 0x00}}));
    REQUIRE(open.size() == 1);
    CHECK(open.events()[0].offset_sec == doctest::Approx(0.5));
}

TEST_CASE("midi: write then parse keeps notes on the tick grid") {
    const NoteTrack t({{60, 100, 0.0, 0.5}, {64, 80, 0.25, 1.0}, {67, 1, 1.0, 1.125}});
    const auto back = parse_standard_midi(write_standard_midi(t));
    REQUIRE(back.size() == t.size());
    for (std::size_t i = 0; i < t.size(); ++i) {
        CHECK(back.events()[i].pitch == t.events()[i].pitch);
        CHECK(back.events()[i].velocity == t.events()[i].velocity);
        CHECK(back.events()[i].onset_sec == doctest::Approx(t.events()[i].onset_sec));
        CHECK(back.events()[i].offset_sec == doctest::Approx(t.events()[i].offset_sec));
    }
}

TEST_CASE("rasterize: spec example and edge cases") {
    const NoteTrack t({{60, 100, 0.0, 0.05}});
    const auto roll = rasterize(t, 0.01);
    REQUIRE(roll.frames() == 5);
    REQUIRE(roll.pitches() == 88);
    CHECK(roll.matrix.col(39).sum() == 5);
    CHECK(roll.matrix.sum() == 5);

    NoteTrack empty;
    empty.set_duration(0.1);
    CHECK(rasterize(empty, 0.01).matrix.sum() == 0);

    const NoteTrack overlap({{60, 100, 0.0, 0.05}, {60, 100, 0.03, 0.08}});
    const auto r2 = rasterize(overlap, 0.01);
    CHECK(r2.matrix.col(39).sum() == 8);
    CHECK(r2.matrix.maxCoeff() == 1.0);

    RasterizeStats stats;
    rasterize(NoteTrack({{10, 100, 0, 0.1}, {120, 100, 0, 0.1}}), 0.01, 21, 88, &stats);
    CHECK(stats.dropped_events == 2);
    CHECK_THROWS_AS(rasterize(t, 0.0), ArgumentError);
}

TEST_CASE("property: serialize, parse, rasterize is stable") {
    Rng rng(11);
    for (int trial = 0; trial < 50; ++trial) {
        const auto t = random_track(rng, 1 + int(uniform_index(rng, 20)));
        std::ostringstream s;
        write_note_csv(t, s);
        const auto back = parse_note_csv(s.str());
        CHECK(back.events() == t.events());
        CHECK(rasterize(back, 0.01).matrix == rasterize(t, 0.01).matrix);
    }
}

TEST_CASE("property: runs per pitch column never exceed events of that pitch") {
    Rng rng(12);
    for (int trial = 0; trial < 50; ++trial) {
        const auto t = random_track(rng, 1 + int(uniform_index(rng, 30)));
        const auto roll = rasterize(t, 0.01);
        for (Eigen::Index p = 0; p < roll.pitches(); ++p) {
            int runs = 0;
            for (Eigen::Index f = 0; f < roll.frames(); ++f)
                if (roll.matrix(f, p) == 1 && (f == 0 || roll.matrix(f - 1, p) == 0)) ++runs;
            int events = 0;
            for (const auto& e : t.events()) events += e.pitch == p + 21;
            CHECK(runs <= events);
        }
    }
}

TEST_CASE("split_tracks: proportions, determinism, partition") {
    std::set<std::string> ten, hundred;
    for (int i = 0; i < 10; ++i) ten.insert("id" + std::to_string(i));
    for (int i = 0; i < 100; ++i) hundred.insert("id" + std::to_string(i));
    const auto s = split_tracks(ten, 7);
    CHECK(s.train.size() == 8);
    CHECK(s.valid.size() == 1);
    CHECK(s.test.size() == 1);
    const auto s2 = split_tracks(ten, 7);
    CHECK(s.train == s2.train);
    CHECK(s.valid == s2.valid);
    const auto h = split_tracks(hundred, 3);
    CHECK(h.train.size() == 80);
    CHECK(h.valid.size() == 10);
    CHECK(h.test.size() == 10);
    CHECK_THROWS_AS(split_tracks({"a", "b"}, 1), ArgumentError);

    Rng rng(5);
    for (int trial = 0; trial < 100; ++trial) {
        std::set<std::string> ids;
        const auto n = 3 + uniform_index(rng, 60);
        while (ids.size() < n) ids.insert(std::to_string(rng() % 100000));
        const auto a = split_tracks(ids, rng());
        std::set<std::string> all;
        all.insert(a.train.begin(), a.train.end());
        all.insert(a.valid.begin(), a.valid.end());
        all.insert(a.test.begin(), a.test.end());
        CHECK(all == ids);
        CHECK(a.train.size() + a.valid.size() + a.test.size() == n);
        CHECK(!a.valid.empty());
        CHECK(!a.test.empty());
        if (n >= 10) {
            CHECK(a.train.size() == n * 8 / 10);
            CHECK(a.valid.size() == n / 10);
        }
    }
}

TEST_CASE("merge_splits is a set union per split") {
    const auto a = split_tracks({"a1", "a2", "a3", "a4"}, 1);
    const auto b = split_tracks({"b1", "b2", "b3"}, 1);
    const auto m = merge_splits(a, b);
    CHECK(m.train.size() == a.train.size() + b.train.size());
    CHECK(m.test.size() == a.test.size() + b.test.size());
}
