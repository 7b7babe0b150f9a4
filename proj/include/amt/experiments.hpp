#pragma once

#include "amt/decoding.hpp"
#include "amt/metrics.hpp"
#include "amt/network.hpp"
#include "amt/note_events.hpp"
#include "amt/spectral.hpp"
#include "amt/synthesis.hpp"
#include "amt/training.hpp"

#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace amt {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Random label generation

/// Desk-scale stand-in for real annotation sets. Onsets and lengths sit on a
/// sixteenth-note grid at a per-track tempo. Every note lasts at least
/// min_note_sec, and notes of the same pitch are separated by at least
/// min_gap_sec, so rasterize + decode recovers each track exactly.
struct RandomTrackRecipe {
    int n_tracks = 60;
    int notes_min = 12;
    int notes_max = 30;
    int polyphony_cap = 3;
    int pitch_lo = 36;
    int pitch_hi = 84;
    double duration_min_sec = 8.0;
    double duration_max_sec = 12.0;
    int length_min_steps = 1;  // note length in sixteenths
    int length_max_steps = 8;
    double tempo_min_bpm = 90.0;
    double tempo_max_bpm = 150.0;
    int velocity_min = 60;
    int velocity_max = 120;
    double min_note_sec = 0.05;
    double min_gap_sec = 0.03;
    std::uint64_t seed = 1;

    void validate() const;
};

/// Track ids are `<prefix>NNN`.
std::vector<NoteTrack> generate_tracks(const RandomTrackRecipe& recipe, const std::string& prefix = "track");

// ---------------------------------------------------------------------------
// Feature extraction shared by every stage

struct FeatureConfig {
    CqtParams cqt;
    double log_gamma = kDefaultLogGamma;

    std::string describe() const;
};

/// Log-compressed CQT of `audio`, served from `cache` when given.
Spectrogram compute_features(const AudioBuffer& audio, const FeatureConfig& features, SpectrogramCache* cache);

// ---------------------------------------------------------------------------
// Datasets on disk

inline constexpr int kManifestVersion = 1;

struct ManifestEntry {
    std::string id;
    std::string labels;  // path relative to the dataset directory
    std::string audio;
    std::string split;   // train | valid | test
    std::string labels_sha256;
    std::string audio_sha256;
};

struct DatasetManifest {
    int version = kManifestVersion;
    std::string name;
    std::string timbre;
    std::uint64_t split_seed = 0;
    std::vector<ManifestEntry> tracks;  // sorted by id

    SplitAssignment split() const;
};

void write_manifest(const DatasetManifest& manifest, std::ostream& out);
DatasetManifest read_manifest(std::istream& in);
DatasetManifest read_manifest_file(const fs::path& path);

struct DatasetSpec {
    std::string name;
    RandomTrackRecipe recipe;
    SynthConfig synth;
    FeatureConfig features;
};

struct GenerateReport {
    DatasetManifest manifest;
    std::vector<std::string> skipped;  // ids dropped for a missing or unreadable file
};

/// Writes labels/<id>.csv, audio/<id>.wav and manifest.json under `out_dir`
/// and fills the spectrogram cache.
GenerateReport generate_dataset(const DatasetSpec& spec, const fs::path& out_dir, SpectrogramCache* cache);

/// Same layout from existing label files (*.csv or *.mid). With `wav_dir`,
/// audio is taken from <wav_dir>/<basename>.wav instead of being rendered;
/// labels without a matching WAV, and WAVs without labels, are skipped and listed.
GenerateReport generate_dataset_from_labels(const std::string& name, const fs::path& label_dir,
                                            const std::optional<fs::path>& wav_dir, const SynthConfig& synth,
                                            const FeatureConfig& features, std::uint64_t split_seed,
                                            const fs::path& out_dir, SpectrogramCache* cache);

/// Features + labels for the tracks of `split` ("train", "valid", "test" or "all").
/// Ids are prefixed with `<manifest name>/`.
std::vector<LabeledTrack> load_tracks(const fs::path& dataset_dir, const std::string& split,
                                      const FeatureConfig& features, SpectrogramCache* cache);

DataSplit load_data_split(const std::vector<fs::path>& dataset_dirs, const FeatureConfig& features,
                          SpectrogramCache* cache);

// ---------------------------------------------------------------------------
// Evaluation

struct EvaluationResult {
    std::vector<TrackScores> tracks;
    PRFScore frame;
    PRFScore note;
    PRFScore note_with_offset;

    const PRFScore& get(MetricFamily f) const;
};

EvaluationResult summarize(std::vector<TrackScores> scores, Aggregation mode = Aggregation::MeanOfTracks);

/// Throws ArgumentError for an empty track list or a feature width the model does not accept.
template <typename Scalar>
EvaluationResult evaluate_model(const Checkpoint<Scalar>& checkpoint, const std::vector<LabeledTrack>& tracks,
                                const DecodeConfig& decode = {}, const MatchTolerances& tol = {},
                                Aggregation mode = Aggregation::MeanOfTracks);

/// Per-track CSV: id, then P/R/F1 for each metric family.
void write_track_scores_csv(const std::vector<TrackScores>& scores, std::ostream& out);

// ---------------------------------------------------------------------------
// Settings files

/// Everything a training or evaluation run needs besides the data.
struct RunSettings {
    ModelConfig model;
    TrainConfig train;
    FeatureConfig features;
    SynthConfig synth;
    RandomTrackRecipe recipe;
};

/// Desk-scale defaults: small U-net, short segments, quick cadence.
RunSettings desk_scale_settings();

/// INI text with optional sections [model], [train], [features], [synth],
/// [recipe] applied over `base`. Unknown keys are a ConfigError naming them.
RunSettings parse_settings(const std::string& text, const RunSettings& base);
RunSettings load_settings_file(const fs::path& path, const RunSettings& base);

// ---------------------------------------------------------------------------
// Plans

enum class StageKind { Generate, Train, TransferTrain, Evaluate };
std::string stage_kind_name(StageKind k);

struct Stage {
    std::string name;
    StageKind kind = StageKind::Generate;
    std::vector<std::string> datasets;  // generate: the one dataset; train: union; evaluate: targets
    std::string from;                   // transfer-train: source stage; evaluate: model stage
    std::string split = "test";         // evaluate only
    RunSettings settings;
    std::string settings_text;          // stage-level overrides, part of the stage digest
};

/// Row of the final comparison: pretrained model, target dataset, and the
/// runs that start from it and from scratch.
struct Comparison {
    std::string name;
    std::string pretrained;  // train stage
    std::string finetuned;   // transfer-train stage
    std::string scratch;     // train stage on the target alone
    std::string target;      // dataset
};

struct ExperimentPlan {
    std::string name;
    fs::path out_dir;
    double threshold = 0.5;  // frame F1 for epochs-to-threshold
    std::map<std::string, DatasetSpec> datasets;
    std::vector<Stage> stages;  // in file order
    std::vector<Comparison> comparisons;

    /// Stages ordered so that every dependency comes first. Throws ConfigError
    /// on unknown references or cycles.
    std::vector<const Stage*> topological_order() const;
};

/// INI plan. Relative out_dir is resolved against `base_dir`.
ExperimentPlan parse_plan(const std::string& text, const fs::path& base_dir);
ExperimentPlan load_plan_file(const fs::path& path);

struct StageOutcome {
    std::string name;
    bool skipped = false;  // up to date
    bool failed = false;
    std::string message;
};

struct PlanRunOptions {
    fs::path cache_dir;  // empty: <out_dir>/cache
    bool verbose = true;
    std::ostream* log = nullptr;
};

/// Runs every stage in dependency order. A stage whose stamp matches its
/// input digest and whose outputs are intact is skipped. A failing stage
/// halts its dependents; finished artifacts stay on disk.
std::vector<StageOutcome> run_plan(const ExperimentPlan& plan, const PlanRunOptions& options = {});

}  // namespace amt
