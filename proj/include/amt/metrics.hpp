#pragma once

#include "amt/note_events.hpp"

#include <cstddef>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

namespace amt {

/// Precision / recall / F1 with the counts behind them. Empty denominators give 0.
struct PRFScore {
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
    std::size_t tp = 0;
    std::size_t fp = 0;
    std::size_t fn = 0;

    static PRFScore from_counts(std::size_t tp, std::size_t fp, std::size_t fn);
    /// No reference and no estimate: nothing to score.
    bool vacuous() const { return tp + fp + fn == 0; }
};

struct MatchTolerances {
    double onset_tol_sec = 0.050;
    double offset_ratio = 0.2;
    double offset_min_tol_sec = 0.050;
};

enum class MatchMode { Onset, OnsetOffset };

/// Pairs (ref index, est index) sorted ascending.
struct NoteMatching {
    std::vector<std::pair<std::size_t, std::size_t>> pairs;
    std::size_t size() const { return pairs.size(); }
};

/// Pitch equal, onsets within onset_tol and, with offsets, offsets within
/// max(offset_ratio * ref duration, offset_min_tol).
bool notes_match(const NoteEvent& ref, const NoteEvent& est, const MatchTolerances& tol, MatchMode mode);

/// Maximum-cardinality matching over valid pairs. Among maximum matchings the
/// one with the least total |onset difference| wins, then the
/// lexicographically smallest sorted pair list.
NoteMatching match_notes(const NoteTrack& ref, const NoteTrack& est, const MatchTolerances& tol = {},
                         MatchMode mode = MatchMode::Onset);

PRFScore note_metrics(const NoteTrack& ref, const NoteTrack& est, const MatchTolerances& tol = {},
                      MatchMode mode = MatchMode::Onset);

/// Cell-wise counts on binary rolls; a cell is active when > 0.5. The shorter
/// roll is zero-padded to the longer.
PRFScore frame_metrics(const PianoRoll& ref, const PianoRoll& est);

enum class MetricFamily { Frame, Note, NoteWithOffset };
std::string family_name(MetricFamily f);

/// Scores of one track under all three metric families.
struct TrackScores {
    std::string id;
    PRFScore frame;
    PRFScore note;
    PRFScore note_with_offset;

    const PRFScore& get(MetricFamily f) const;
};

enum class Aggregation { MeanOfTracks, Pooled };

/// Mean of per-track P/R/F1 (counts summed), or P/R/F1 of the pooled counts.
PRFScore aggregate(const std::vector<PRFScore>& scores, Aggregation mode = Aggregation::MeanOfTracks);

/// One row of a results table.
struct ResultRow {
    std::string model;
    std::string dataset;
    MetricFamily family = MetricFamily::Frame;
    PRFScore score;
};

/// CSV with header `model,dataset,metric,P,R,F1`.
void write_results_csv(const std::vector<ResultRow>& rows, std::ostream& out);

/// Aligned text grid shaped like a paper results table: one block per metric
/// family, one line per model, P/R/F1 column triples per dataset.
void write_results_table(const std::vector<ResultRow>& rows, std::ostream& out);

}  // namespace amt
