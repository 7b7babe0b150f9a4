#include "amt/errors.hpp"
#include "amt/metrics.hpp"

#include "oracles.hpp"

#include <doctest.h>

#include <sstream>

using namespace amt;

namespace {

PianoRoll roll(Eigen::Index frames, Eigen::Index pitches) {
    PianoRoll r;
    r.matrix = Eigen::MatrixXd::Zero(frames, pitches);
    return r;
}

}  // namespace

TEST_CASE("PRF formulas and the zero convention") {
    const auto p = PRFScore::from_counts(3, 1, 1);
    CHECK(p.precision == 0.75);
    CHECK(p.recall == 0.75);
    CHECK(p.f1 == doctest::Approx(0.75));
    const auto z = PRFScore::from_counts(0, 0, 0);
    CHECK(z.precision == 0);
    CHECK(z.f1 == 0);
    CHECK(z.vacuous());
    const auto half = PRFScore::from_counts(1, 0, 1);
    CHECK(half.precision == 1);
    CHECK(half.recall == 0.5);
    CHECK(half.f1 == doctest::Approx(2.0 / 3));
}

TEST_CASE("frame metrics") {
    auto ref = roll(10, 4), est = roll(10, 4);
    ref.matrix(1, 1) = ref.matrix(2, 1) = ref.matrix(3, 1) = ref.matrix(5, 3) = 1;
    CHECK(frame_metrics(ref, ref).f1 == 1);
    const auto empty = frame_metrics(ref, est);
    CHECK(empty.precision == 0);
    CHECK(empty.recall == 0);
    CHECK(empty.f1 == 0);
    est.matrix(1, 1) = est.matrix(2, 1) = est.matrix(5, 3) = est.matrix(9, 0) = 1;
    const auto s = frame_metrics(ref, est);
    CHECK(s.tp == 3);
    CHECK(s.fp == 1);
    CHECK(s.fn == 1);
    CHECK(s.f1 == doctest::Approx(0.75));

    auto longer = roll(14, 4);
    longer.matrix.topRows(10) = ref.matrix;
    longer.matrix(12, 2) = 1;
    const auto padded = frame_metrics(ref, longer);
    CHECK(padded.tp == 4);
    CHECK(padded.fp == 1);
    auto other = ref;
    other.frame_period_sec = 0.02;
    CHECK_THROWS_AS(frame_metrics(ref, other), ArgumentError);
}

TEST_CASE("tolerance arithmetic hand example") {
    const NoteTrack ref({{60, 100, 0.100, 0.800}});
    const NoteTrack est({{60, 100, 0.140, 0.900}});
    CHECK(match_notes(ref, est, {}, MatchMode::Onset).size() == 1);
    CHECK(match_notes(ref, est, {}, MatchMode::OnsetOffset).size() == 1);
    const NoteTrack late({{60, 100, 0.151, 0.800}});
    CHECK(match_notes(ref, late).size() == 0);
    const NoteTrack long_off({{60, 100, 0.100, 0.950}});
    CHECK(match_notes(ref, long_off, {}, MatchMode::Onset).size() == 1);
    CHECK(match_notes(ref, long_off, {}, MatchMode::OnsetOffset).size() == 0);
    const NoteTrack other_pitch({{61, 100, 0.100, 0.800}});
    CHECK(match_notes(ref, other_pitch).size() == 0);
}

TEST_CASE("crossed pair needs an augmenting path") {
    const NoteTrack ref({{60, 100, 0.000, 0.5}, {60, 100, 0.040, 0.54}});
    const NoteTrack est({{60, 100, 0.045, 0.545}, {60, 100, 0.000, 0.5}});
    const auto m = match_notes(ref, est);
    CHECK(m.size() == 2);
    CHECK(oracle::brute_force_matching(ref, est, {}, MatchMode::Onset) == 2);
    const auto s = note_metrics(ref, est);
    CHECK(s.precision == 1);
    CHECK(s.recall == 1);
    CHECK(s.f1 == 1);
    CHECK(match_notes(ref, NoteTrack{}).size() == 0);
}

TEST_CASE("note metrics: identity and partial recovery") {
    const NoteTrack five({{60, 100, 0, 0.5}, {62, 100, 0.5, 1}, {64, 100, 1, 1.5}, {65, 100, 1.5, 2}, {67, 100, 2, 2.5}});
    CHECK(note_metrics(five, five).f1 == 1);
    CHECK(note_metrics(five, five, {}, MatchMode::OnsetOffset).f1 == 1);
    const NoteTrack two({{60, 100, 0, 0.5}, {64, 100, 1, 1.5}});
    const NoteTrack one({{64, 100, 1, 1.5}});
    const auto s = note_metrics(two, one);
    CHECK(s.precision == 1);
    CHECK(s.recall == 0.5);
    CHECK(s.f1 == doctest::Approx(2.0 / 3));
}

TEST_CASE("property: matcher equals brute force, matching is valid, onset mode is symmetric") {
    Rng rng(2024);
    for (int trial = 0; trial < 400; ++trial) {
        const auto ref = oracle::random_notes(rng, 6);
        const auto est = oracle::random_notes(rng, 6);
        const auto tol = oracle::random_tolerances(rng);
        for (MatchMode mode : {MatchMode::Onset, MatchMode::OnsetOffset}) {
            const auto m = match_notes(ref, est, tol, mode);
            CHECK(m.size() == oracle::brute_force_matching(ref, est, tol, mode));
            std::set<std::size_t> rs, es;
            for (auto [r, e] : m.pairs) {
                CHECK(rs.insert(r).second);
                CHECK(es.insert(e).second);
                CHECK(notes_match(ref.events()[r], est.events()[e], tol, mode));
            }
            if (mode == MatchMode::Onset) {
                const auto a = note_metrics(ref, est, tol, mode);
                const auto b = note_metrics(est, ref, tol, mode);
                CHECK(a.precision == b.recall);
                CHECK(a.recall == b.precision);
            }
        }
        const auto on = note_metrics(ref, est, tol, MatchMode::Onset);
        const auto off = note_metrics(ref, est, tol, MatchMode::OnsetOffset);
        CHECK(off.tp <= on.tp);
        CHECK(on.tp <= std::min(ref.size(), est.size()));
        auto wider = tol;
        wider.onset_tol_sec *= 1.5;
        CHECK(match_notes(ref, est, wider).size() >= match_notes(ref, est, tol).size());
    }
}

TEST_CASE("matching is deterministic and prefers smaller onset differences on ties") {
    const NoteTrack ref({{60, 100, 0.100, 0.6}});
    const NoteTrack est({{60, 100, 0.080, 0.6}, {60, 100, 0.105, 0.6}});
    const auto m = match_notes(ref, est);
    REQUIRE(m.size() == 1);
    CHECK(m.pairs[0].second == 1);
    CHECK(match_notes(ref, est).pairs == m.pairs);
}

TEST_CASE("aggregation and result tables") {
    const std::vector<PRFScore> s{PRFScore::from_counts(1, 0, 0), PRFScore::from_counts(1, 3, 3)};
    const auto mean = aggregate(s, Aggregation::MeanOfTracks);
    CHECK(mean.f1 == doctest::Approx((1 + 0.25) / 2));
    const auto pooled = aggregate(s, Aggregation::Pooled);
    CHECK(pooled.tp == 2);
    CHECK(pooled.f1 == doctest::Approx(2.0 / 5));

    std::vector<ResultRow> rows;
    for (MetricFamily f : {MetricFamily::Frame, MetricFamily::Note, MetricFamily::NoteWithOffset})
        for (const char* d : {"A", "B"}) rows.push_back({"scratch", d, f, PRFScore::from_counts(3, 1, 1)});
    std::ostringstream csv, table;
    write_results_csv(rows, csv);
    write_results_table(rows, table);
    CHECK(csv.str().rfind("model,dataset,metric,P,R,F1\n", 0) == 0);
    CHECK(csv.str().find("scratch,B,note-with-offset,0.750000,0.750000,0.750000") != std::string::npos);
    for (const char* head : {"Results for frame metrics", "Results for note metrics", "Results for note-with-offset metrics"})
        CHECK(table.str().find(head) != std::string::npos);
}
