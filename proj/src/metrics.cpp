#include "amt/metrics.hpp"

#include "amt/errors.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <limits>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

namespace amt {

PRFScore PRFScore::from_counts(std::size_t tp, std::size_t fp, std::size_t fn) {
    PRFScore s;
    s.tp = tp;
    s.fp = fp;
    s.fn = fn;
    s.precision = tp + fp ? double(tp) / double(tp + fp) : 0.0;
    s.recall = tp + fn ? double(tp) / double(tp + fn) : 0.0;
    s.f1 = s.precision + s.recall > 0 ? 2 * s.precision * s.recall / (s.precision + s.recall) : 0.0;
    return s;
}

bool notes_match(const NoteEvent& ref, const NoteEvent& est, const MatchTolerances& tol, MatchMode mode) {
    if (ref.pitch != est.pitch) return false;
    if (std::abs(ref.onset_sec - est.onset_sec) > tol.onset_tol_sec) return false;
    if (mode == MatchMode::OnsetOffset) {
        const double limit = std::max(tol.offset_ratio * ref.duration(), tol.offset_min_tol_sec);
        if (std::abs(ref.offset_sec - est.offset_sec) > limit) return false;
    }
    return true;
}

namespace {

struct Candidate {
    int r;  // local ref index
    int e;  // local est index
    std::int64_t cost;
};

struct Solution {
    int cardinality = 0;
    std::int64_t cost = 0;
    std::vector<int> est_of_ref;  // -1 when unmatched
};

// Minimum-cost maximum-cardinality bipartite matching by successive shortest
// augmenting paths (Bellman-Ford on the residual graph). Blocked vertices are
// ignored. Components handled here are small.
Solution solve(int n_ref, int n_est, const std::vector<Candidate>& cands, const std::vector<char>& ref_blocked,
               const std::vector<char>& est_blocked) {
    constexpr std::int64_t inf = std::numeric_limits<std::int64_t>::max() / 4;
    std::vector<std::vector<int>> adj(static_cast<std::size_t>(n_ref));
    for (int i = 0; i < static_cast<int>(cands.size()); ++i) {
        const auto& c = cands[static_cast<std::size_t>(i)];
        if (!ref_blocked[c.r] && !est_blocked[c.e]) adj[c.r].push_back(i);
    }

    Solution sol;
    sol.est_of_ref.assign(static_cast<std::size_t>(n_ref), -1);
    std::vector<int> ref_of_est(static_cast<std::size_t>(n_est), -1);
    std::vector<int> via_edge(static_cast<std::size_t>(n_est));
    std::vector<std::int64_t> dr(static_cast<std::size_t>(n_ref)), de(static_cast<std::size_t>(n_est));

    for (;;) {
        std::fill(dr.begin(), dr.end(), inf);
        std::fill(de.begin(), de.end(), inf);
        std::fill(via_edge.begin(), via_edge.end(), -1);
        for (int r = 0; r < n_ref; ++r)
            if (!ref_blocked[r] && sol.est_of_ref[r] < 0) dr[r] = 0;
        bool changed = true;
        while (changed) {
            changed = false;
            for (int r = 0; r < n_ref; ++r) {
                if (dr[r] >= inf) continue;
                for (int ci : adj[r]) {
                    const auto& c = cands[static_cast<std::size_t>(ci)];
                    if (sol.est_of_ref[r] == c.e) continue;  // matched edges run backwards
                    if (dr[r] + c.cost < de[c.e]) {
                        de[c.e] = dr[r] + c.cost;
                        via_edge[c.e] = ci;
                        const int back = ref_of_est[c.e];
                        if (back >= 0) {
                            std::int64_t back_cost = 0;
                            for (int bi : adj[back])
                                if (cands[static_cast<std::size_t>(bi)].e == c.e) back_cost = cands[static_cast<std::size_t>(bi)].cost;
                            if (de[c.e] - back_cost < dr[back]) dr[back] = de[c.e] - back_cost;
                        }
                        changed = true;
                    }
                }
            }
        }
        int target = -1;
        for (int e = 0; e < n_est; ++e)
            if (!est_blocked[e] && ref_of_est[e] < 0 && de[e] < inf && (target < 0 || de[e] < de[target])) target = e;
        if (target < 0) break;

        // Walk back along the shortest path, flipping matched/unmatched edges.
        int e = target;
        while (e >= 0) {
            const auto& c = cands[static_cast<std::size_t>(via_edge[e])];
            const int previous_est = sol.est_of_ref[c.r];
            sol.est_of_ref[c.r] = e;
            ref_of_est[e] = c.r;
            e = previous_est;
        }
        ++sol.cardinality;
    }
    for (int r = 0; r < n_ref; ++r) {
        if (sol.est_of_ref[r] < 0) continue;
        for (int ci : adj[r])
            if (cands[static_cast<std::size_t>(ci)].e == sol.est_of_ref[r]) sol.cost += cands[static_cast<std::size_t>(ci)].cost;
    }
    return sol;
}

// Finds the lexicographically smallest min-cost maximum matching of one component.
std::vector<std::pair<int, int>> solve_component(int n_ref, int n_est, const std::vector<Candidate>& cands) {
    std::vector<char> ref_blocked(static_cast<std::size_t>(n_ref), 0), est_blocked(static_cast<std::size_t>(n_est), 0);
    Solution current = solve(n_ref, n_est, cands, ref_blocked, est_blocked);
    int remaining_card = current.cardinality;
    std::int64_t remaining_cost = current.cost;

    std::vector<std::vector<const Candidate*>> by_ref(static_cast<std::size_t>(n_ref));
    for (const auto& c : cands) by_ref[c.r].push_back(&c);
    for (auto& list : by_ref)
        std::sort(list.begin(), list.end(), [](const Candidate* a, const Candidate* b) { return a->e < b->e; });

    std::vector<std::pair<int, int>> fixed;
    for (int r = 0; r < n_ref; ++r) {
        const Candidate* chosen = nullptr;
        for (const Candidate* c : by_ref[r]) {
            if (est_blocked[c->e]) continue;
            if (current.est_of_ref[r] == c->e) {
                chosen = c;
                break;
            }
            ref_blocked[r] = 1;
            est_blocked[c->e] = 1;
            Solution rest = solve(n_ref, n_est, cands, ref_blocked, est_blocked);
            ref_blocked[r] = 0;
            est_blocked[c->e] = 0;
            if (rest.cardinality == remaining_card - 1 && rest.cost == remaining_cost - c->cost) {
                rest.est_of_ref[r] = c->e;
                current = std::move(rest);
                chosen = c;
                break;
            }
        }
        ref_blocked[r] = 1;
        if (chosen) {
            est_blocked[chosen->e] = 1;
            fixed.emplace_back(r, chosen->e);
            --remaining_card;
            remaining_cost -= chosen->cost;
        }
    }
    return fixed;
}

struct DisjointSets {
    std::vector<int> parent;
    explicit DisjointSets(int n) : parent(static_cast<std::size_t>(n)) { std::iota(parent.begin(), parent.end(), 0); }
    int find(int x) {
        while (parent[x] != x) x = parent[x] = parent[parent[x]];
        return x;
    }
    void unite(int a, int b) { parent[find(a)] = find(b); }
};

}  // namespace

NoteMatching match_notes(const NoteTrack& ref, const NoteTrack& est, const MatchTolerances& tol, MatchMode mode) {
    const auto& R = ref.events();
    const auto& E = est.events();

    // Est indices per pitch, sorted by onset, for windowed candidate search.
    std::map<int, std::vector<std::size_t>> est_by_pitch;
    for (std::size_t j = 0; j < E.size(); ++j) est_by_pitch[E[j].pitch].push_back(j);

    struct GlobalPair {
        std::size_t r, e;
        std::int64_t cost;
    };
    std::vector<GlobalPair> pairs;
    for (std::size_t i = 0; i < R.size(); ++i) {
        auto it = est_by_pitch.find(R[i].pitch);
        if (it == est_by_pitch.end()) continue;
        const auto& list = it->second;
        auto lo = std::lower_bound(list.begin(), list.end(), R[i].onset_sec - tol.onset_tol_sec - 1e-9,
                                   [&](std::size_t j, double t) { return E[j].onset_sec < t; });
        for (; lo != list.end() && E[*lo].onset_sec <= R[i].onset_sec + tol.onset_tol_sec + 1e-9; ++lo)
            if (notes_match(R[i], E[*lo], tol, mode))
                pairs.push_back({i, *lo, std::llround(std::abs(R[i].onset_sec - E[*lo].onset_sec) * 1e9)});
    }

    // Split into connected components; refs are vertices [0, |R|), ests follow.
    const int n_ref = static_cast<int>(R.size());
    DisjointSets sets(n_ref + static_cast<int>(E.size()));
    for (const auto& p : pairs) sets.unite(static_cast<int>(p.r), n_ref + static_cast<int>(p.e));
    std::map<int, std::vector<const GlobalPair*>> components;
    for (const auto& p : pairs) components[sets.find(static_cast<int>(p.r))].push_back(&p);

    NoteMatching out;
    for (auto& [root, members] : components) {
        std::vector<std::size_t> refs, ests;
        for (const auto* p : members) {
            refs.push_back(p->r);
            ests.push_back(p->e);
        }
        std::sort(refs.begin(), refs.end());
        refs.erase(std::unique(refs.begin(), refs.end()), refs.end());
        std::sort(ests.begin(), ests.end());
        ests.erase(std::unique(ests.begin(), ests.end()), ests.end());
        auto local = [](const std::vector<std::size_t>& v, std::size_t x) {
            return static_cast<int>(std::lower_bound(v.begin(), v.end(), x) - v.begin());
        };
        std::vector<Candidate> cands;
        for (const auto* p : members) cands.push_back({local(refs, p->r), local(ests, p->e), p->cost});
        for (auto [r, e] : solve_component(static_cast<int>(refs.size()), static_cast<int>(ests.size()), cands))
            out.pairs.emplace_back(refs[static_cast<std::size_t>(r)], ests[static_cast<std::size_t>(e)]);
    }
    std::sort(out.pairs.begin(), out.pairs.end());
    return out;
}

PRFScore note_metrics(const NoteTrack& ref, const NoteTrack& est, const MatchTolerances& tol, MatchMode mode) {
    const std::size_t tp = match_notes(ref, est, tol, mode).size();
    return PRFScore::from_counts(tp, est.size() - tp, ref.size() - tp);
}

PRFScore frame_metrics(const PianoRoll& ref, const PianoRoll& est) {
    if (std::abs(ref.frame_period_sec - est.frame_period_sec) > 1e-12)
        throw ArgumentError("frame metrics need rolls on the same frame period");
    if (ref.pitch_min != est.pitch_min || ref.pitches() != est.pitches())
        throw ArgumentError("frame metrics need rolls over the same pitch range");
    const Eigen::Index frames = std::max(ref.frames(), est.frames());
    std::size_t tp = 0, fp = 0, fn = 0;
    for (Eigen::Index p = 0; p < ref.pitches(); ++p)
        for (Eigen::Index f = 0; f < frames; ++f) {
            const bool r = f < ref.frames() && ref.matrix(f, p) > 0.5;
            const bool e = f < est.frames() && est.matrix(f, p) > 0.5;
            tp += r && e;
            fp += !r && e;
            fn += r && !e;
        }
    return PRFScore::from_counts(tp, fp, fn);
}

std::string family_name(MetricFamily f) {
    switch (f) {
        case MetricFamily::Frame: return "frame";
        case MetricFamily::Note: return "note";
        case MetricFamily::NoteWithOffset: return "note-with-offset";
    }
    return "?";
}

const PRFScore& TrackScores::get(MetricFamily f) const {
    switch (f) {
        case MetricFamily::Frame: return frame;
        case MetricFamily::Note: return note;
        case MetricFamily::NoteWithOffset: return note_with_offset;
    }
    return frame;
}

PRFScore aggregate(const std::vector<PRFScore>& scores, Aggregation mode) {
    std::size_t tp = 0, fp = 0, fn = 0;
    for (const auto& s : scores) {
        tp += s.tp;
        fp += s.fp;
        fn += s.fn;
    }
    if (mode == Aggregation::Pooled || scores.empty()) return PRFScore::from_counts(tp, fp, fn);
    PRFScore out;
    out.tp = tp;
    out.fp = fp;
    out.fn = fn;
    for (const auto& s : scores) {
        out.precision += s.precision;
        out.recall += s.recall;
        out.f1 += s.f1;
    }
    const double n = double(scores.size());
    out.precision /= n;
    out.recall /= n;
    out.f1 /= n;
    return out;
}

void write_results_csv(const std::vector<ResultRow>& rows, std::ostream& out) {
    out << "model,dataset,metric,P,R,F1\n";
    out << std::fixed << std::setprecision(6);
    for (const auto& row : rows)
        out << row.model << ',' << row.dataset << ',' << family_name(row.family) << ',' << row.score.precision << ','
            << row.score.recall << ',' << row.score.f1 << '\n';
}

void write_results_table(const std::vector<ResultRow>& rows, std::ostream& out) {
    std::vector<std::string> models, datasets;
    auto remember = [](std::vector<std::string>& v, const std::string& s) {
        if (std::find(v.begin(), v.end(), s) == v.end()) v.push_back(s);
    };
    for (const auto& row : rows) {
        remember(models, row.model);
        remember(datasets, row.dataset);
    }
    std::size_t model_width = 18;
    constexpr int cell_width = 22;
    for (const auto& m : models) model_width = std::max(model_width, m.size() + 2);

    for (MetricFamily family : {MetricFamily::Frame, MetricFamily::Note, MetricFamily::NoteWithOffset}) {
        if (std::none_of(rows.begin(), rows.end(), [&](const ResultRow& r) { return r.family == family; })) continue;
        out << "Results for " << family_name(family) << " metrics\n";
        out << std::left << std::setw(static_cast<int>(model_width)) << "";
        for (const auto& d : datasets) out << std::left << std::setw(cell_width) << ("| " + d);
        out << '\n' << std::left << std::setw(static_cast<int>(model_width)) << "Model trained on";
        for (std::size_t i = 0; i < datasets.size(); ++i) out << std::left << std::setw(cell_width) << "| P     R     F1";
        out << '\n';
        for (const auto& m : models) {
            out << std::left << std::setw(static_cast<int>(model_width)) << m;
            for (const auto& d : datasets) {
                auto it = std::find_if(rows.begin(), rows.end(), [&](const ResultRow& r) {
                    return r.model == m && r.dataset == d && r.family == family;
                });
                std::ostringstream cell;
                cell << "| ";
                if (it == rows.end())
                    cell << "-     -     -";
                else
                    cell << std::fixed << std::setprecision(3) << it->score.precision << ' ' << it->score.recall << ' '
                         << it->score.f1;
                out << std::left << std::setw(cell_width) << cell.str();
            }
            out << '\n';
        }
        out << '\n';
    }
}

}  // namespace amt
