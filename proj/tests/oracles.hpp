#pragma once

// Reference implementations used only by tests.

#include "amt/metrics.hpp"
#include "amt/random.hpp"

#include <cmath>
#include <vector>

namespace amt::oracle {

/// Largest matching by exhaustive search over every injective assignment.
inline std::size_t brute_force_matching(const NoteTrack& ref, const NoteTrack& est, const MatchTolerances& tol,
                                        MatchMode mode) {
    const auto& r = ref.events();
    const auto& e = est.events();
    std::vector<bool> used(e.size(), false);
    std::size_t best = 0;
    auto rec = [&](auto&& self, std::size_t i, std::size_t size) -> void {
        if (size + (r.size() - i) <= best) return;
        if (i == r.size()) {
            best = std::max(best, size);
            return;
        }
        self(self, i + 1, size);
        for (std::size_t j = 0; j < e.size(); ++j) {
            if (used[j]) continue;
            // Predicate restated from its definition, not via notes_match.
            if (r[i].pitch != e[j].pitch) continue;
            if (std::abs(r[i].onset_sec - e[j].onset_sec) > tol.onset_tol_sec) continue;
            if (mode == MatchMode::OnsetOffset &&
                std::abs(r[i].offset_sec - e[j].offset_sec) >
                    std::max(tol.offset_ratio * (r[i].offset_sec - r[i].onset_sec), tol.offset_min_tol_sec))
                continue;
            used[j] = true;
            self(self, i + 1, size + 1);
            used[j] = false;
        }
    };
    rec(rec, 0, 0);
    return best;
}

/// Dense random instance: few pitches and clustered onsets so many pairs compete.
inline NoteTrack random_notes(Rng& rng, std::size_t max_notes) {
    std::vector<NoteEvent> ev;
    const auto n = uniform_index(rng, max_notes + 1);
    for (std::size_t i = 0; i < n; ++i) {
        const double on = uniform_real(rng, 0, 0.3);
        ev.push_back({60 + int(uniform_index(rng, 2)), 100, on, on + uniform_real(rng, 0.05, 0.6)});
    }
    return NoteTrack(ev);
}

inline MatchTolerances random_tolerances(Rng& rng) {
    MatchTolerances t;
    t.onset_tol_sec = uniform_real(rng, 0.005, 0.15);
    t.offset_ratio = uniform_real(rng, 0.05, 0.5);
    t.offset_min_tol_sec = uniform_real(rng, 0.005, 0.15);
    return t;
}

}  // namespace amt::oracle
