#include "amt/experiments.hpp"

#include "amt/digest.hpp"
#include "amt/errors.hpp"
#include "amt/random.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <set>
#include <sstream>

namespace amt {

using json = nlohmann::json;
using boost::property_tree::ptree;

// ---------------------------------------------------------------------------
// Random labels

void RandomTrackRecipe::validate() const {
    if (n_tracks < 1) throw ConfigError("recipe needs at least one track");
    if (notes_min < 0 || notes_max < notes_min) throw ConfigError("recipe note count range is empty");
    if (polyphony_cap < 1) throw ConfigError("polyphony cap must be at least 1");
    if (pitch_lo < 0 || pitch_hi > 127 || pitch_hi < pitch_lo) throw ConfigError("recipe pitch range is invalid");
    if (!(duration_min_sec > 0) || duration_max_sec < duration_min_sec)
        throw ConfigError("recipe duration range is invalid");
    if (length_min_steps < 1 || length_max_steps < length_min_steps)
        throw ConfigError("recipe note length range is invalid");
    if (!(tempo_min_bpm > 0) || tempo_max_bpm < tempo_min_bpm) throw ConfigError("recipe tempo range is invalid");
    if (velocity_min < 1 || velocity_max > 127 || velocity_max < velocity_min)
        throw ConfigError("recipe velocity range is invalid");
    if (!(min_note_sec > 0) || min_gap_sec < 0) throw ConfigError("recipe note spacing limits are invalid");
}

namespace {

int uniform_int(Rng& rng, int lo, int hi) { return lo + static_cast<int>(uniform_index(rng, std::uint64_t(hi - lo + 1))); }

bool fits(const std::vector<NoteEvent>& events, const NoteEvent& n, const RandomTrackRecipe& r) {
    std::vector<double> points{n.onset_sec};
    for (const auto& e : events) {
        if (e.pitch == n.pitch && n.onset_sec < e.offset_sec + r.min_gap_sec && e.onset_sec < n.offset_sec + r.min_gap_sec)
            return false;
        if (e.onset_sec > n.onset_sec && e.onset_sec < n.offset_sec) points.push_back(e.onset_sec);
    }
    // Overlap count only changes at onsets, so checking those inside the new note suffices.
    for (double x : points) {
        int active = 1;
        for (const auto& e : events)
            if (e.onset_sec <= x && x < e.offset_sec) ++active;
        if (active > r.polyphony_cap) return false;
    }
    return true;
}

std::string zero_pad(int i, int width) {
    std::ostringstream s;
    s << std::setw(width) << std::setfill('0') << i;
    return s.str();
}

}  // namespace

std::vector<NoteTrack> generate_tracks(const RandomTrackRecipe& r, const std::string& prefix) {
    r.validate();
    Rng rng(r.seed);
    std::vector<NoteTrack> tracks;
    const int width = std::max(3, static_cast<int>(std::to_string(r.n_tracks - 1).size()));
    for (int t = 0; t < r.n_tracks; ++t) {
        const double duration = uniform_real(rng, r.duration_min_sec, r.duration_max_sec);
        const double step = 60.0 / uniform_real(rng, r.tempo_min_bpm, r.tempo_max_bpm) / 4.0;
        const int target = uniform_int(rng, r.notes_min, r.notes_max);
        std::vector<NoteEvent> events;
        for (int attempt = 0; int(events.size()) < target && attempt < 50 * std::max(target, 1); ++attempt) {
            const int steps = uniform_int(rng, r.length_min_steps, r.length_max_steps);
            const int pitch = uniform_int(rng, r.pitch_lo, r.pitch_hi);
            const int velocity = uniform_int(rng, r.velocity_min, r.velocity_max);
            const double length = steps * step;
            const auto last_start = static_cast<long>(std::floor((duration - length) / step));
            if (length < r.min_note_sec || last_start < 0) continue;
            const double onset = double(uniform_index(rng, std::uint64_t(last_start) + 1)) * step;
            const NoteEvent n{pitch, velocity, onset, onset + length};
            if (fits(events, n, r)) events.push_back(n);
        }
        tracks.emplace_back(std::move(events), prefix + zero_pad(t, width), duration);
    }
    return tracks;
}

// ---------------------------------------------------------------------------
// Features

std::string FeatureConfig::describe() const {
    std::ostringstream s;
    s.precision(17);
    s << cqt.describe() << " log_gamma=" << log_gamma;
    return s.str();
}

Spectrogram compute_features(const AudioBuffer& audio, const FeatureConfig& features, SpectrogramCache* cache) {
    auto compute = [&] { return log_compress(cqt(audio, features.cqt), features.log_gamma); };
    if (cache) return cache->get_or_compute(spectrogram_cache_key(audio, features.describe()), compute);
    Spectrogram s = compute();
    round_to_float(s);
    return s;
}

// ---------------------------------------------------------------------------
// Manifest

SplitAssignment DatasetManifest::split() const {
    SplitAssignment s;
    s.seed = split_seed;
    for (const auto& e : tracks) {
        if (e.split == "train") s.train.insert(e.id);
        else if (e.split == "valid") s.valid.insert(e.id);
        else s.test.insert(e.id);
    }
    return s;
}

void write_manifest(const DatasetManifest& m, std::ostream& out) {
    json j;
    j["format"] = "amt-dataset";
    j["version"] = m.version;
    j["name"] = m.name;
    j["timbre"] = m.timbre;
    j["split_seed"] = m.split_seed;
    j["tracks"] = json::array();
    for (const auto& e : m.tracks)
        j["tracks"].push_back({{"id", e.id},
                               {"labels", e.labels},
                               {"audio", e.audio},
                               {"split", e.split},
                               {"labels_sha256", e.labels_sha256},
                               {"audio_sha256", e.audio_sha256}});
    out << j.dump(2) << '\n';
}

DatasetManifest read_manifest(std::istream& in) {
    json j;
    try {
        j = json::parse(in);
    } catch (const json::parse_error& e) {
        throw FormatError(std::string("manifest is not valid JSON: ") + e.what());
    }
    DatasetManifest m;
    try {
        if (j.at("format").get<std::string>() != "amt-dataset") throw FormatError("not a dataset manifest");
        m.version = j.at("version").get<int>();
        if (m.version != kManifestVersion) throw FormatError("unsupported manifest version " + std::to_string(m.version));
        m.name = j.at("name").get<std::string>();
        m.timbre = j.at("timbre").get<std::string>();
        m.split_seed = j.at("split_seed").get<std::uint64_t>();
        for (const auto& t : j.at("tracks")) {
            ManifestEntry e;
            e.id = t.at("id").get<std::string>();
            e.labels = t.at("labels").get<std::string>();
            e.audio = t.at("audio").get<std::string>();
            e.split = t.at("split").get<std::string>();
            e.labels_sha256 = t.at("labels_sha256").get<std::string>();
            e.audio_sha256 = t.at("audio_sha256").get<std::string>();
            if (e.split != "train" && e.split != "valid" && e.split != "test")
                throw FormatError("track " + e.id + " has unknown split '" + e.split + "'");
            m.tracks.push_back(std::move(e));
        }
    } catch (const json::exception& e) {
        throw FormatError(std::string("manifest: ") + e.what());
    }
    return m;
}

DatasetManifest read_manifest_file(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open manifest " + path.string());
    return read_manifest(in);
}

// ---------------------------------------------------------------------------
// Dataset generation

namespace {

void write_text_file(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out || !(out << text)) throw IoError("cannot write " + path.string());
}

std::string label_text(const NoteTrack& track) {
    std::ostringstream s;
    write_note_csv(track, s);
    return s.str();
}

std::string split_name(const SplitAssignment& s, const std::string& id) {
    if (s.train.count(id)) return "train";
    if (s.valid.count(id)) return "valid";
    return "test";
}

struct PendingTrack {
    std::string id;
    NoteTrack notes;
    std::optional<AudioBuffer> audio;  // rendered when absent
};

DatasetManifest write_dataset(const std::string& name, const std::string& timbre, std::vector<PendingTrack> tracks,
                              const SynthConfig& synth, const FeatureConfig& features, std::uint64_t split_seed,
                              const fs::path& out_dir, SpectrogramCache* cache) {
    if (tracks.size() < 3) throw ArgumentError("a dataset needs at least three tracks to split");
    std::error_code ec;
    fs::create_directories(out_dir / "labels", ec);
    fs::create_directories(out_dir / "audio", ec);
    if (ec) throw IoError("cannot create dataset directory " + out_dir.string() + ": " + ec.message());

    std::set<std::string> ids;
    for (const auto& t : tracks) ids.insert(t.id);
    if (ids.size() != tracks.size()) throw ValidationError("duplicate track ids in dataset " + name);
    const SplitAssignment split = split_tracks(ids, split_seed);

    DatasetManifest m;
    m.name = name;
    m.timbre = timbre;
    m.split_seed = split_seed;
    std::size_t index = 0;
    for (auto& t : tracks) {
        ManifestEntry e;
        e.id = t.id;
        e.labels = "labels/" + t.id + ".csv";
        e.audio = "audio/" + t.id + ".wav";
        e.split = split_name(split, t.id);
        const std::string labels = label_text(t.notes);
        write_text_file(out_dir / e.labels, labels);
        e.labels_sha256 = sha256_hex(labels);

        AudioBuffer audio;
        if (t.audio) {
            audio = std::move(*t.audio);
        } else {
            SynthConfig c = synth;
            c.noise_seed = synth.noise_seed + index;
            audio = render(t.notes, c);
        }
        std::ostringstream wav;
        write_wav(audio, wav);
        const std::string bytes = wav.str();
        write_text_file(out_dir / e.audio, bytes);
        e.audio_sha256 = sha256_hex(bytes);
        // Features are keyed on what a later load reads back from disk.
        std::istringstream back(bytes);
        compute_features(read_wav(back), features, cache);
        m.tracks.push_back(std::move(e));
        ++index;
    }
    std::sort(m.tracks.begin(), m.tracks.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
    std::ostringstream manifest;
    write_manifest(m, manifest);
    write_text_file(out_dir / "manifest.json", manifest.str());
    return m;
}

}  // namespace

GenerateReport generate_dataset(const DatasetSpec& spec, const fs::path& out_dir, SpectrogramCache* cache) {
    validate(spec.synth.timbre);
    spec.features.cqt.validate(spec.synth.sample_rate_hz);
    std::vector<PendingTrack> pending;
    for (auto& t : generate_tracks(spec.recipe)) pending.push_back({t.id(), t, std::nullopt});
    GenerateReport r;
    r.manifest = write_dataset(spec.name, spec.synth.timbre.name, std::move(pending), spec.synth, spec.features,
                               spec.recipe.seed, out_dir, cache);
    return r;
}

GenerateReport generate_dataset_from_labels(const std::string& name, const fs::path& label_dir,
                                            const std::optional<fs::path>& wav_dir, const SynthConfig& synth,
                                            const FeatureConfig& features, std::uint64_t split_seed,
                                            const fs::path& out_dir, SpectrogramCache* cache) {
    if (!fs::is_directory(label_dir)) throw IoError("label directory " + label_dir.string() + " does not exist");
    if (wav_dir && !fs::is_directory(*wav_dir)) throw IoError("WAV directory " + wav_dir->string() + " does not exist");
    GenerateReport report;
    std::map<std::string, fs::path> labels, wavs;
    for (const auto& f : fs::directory_iterator(label_dir)) {
        const auto ext = f.path().extension().string();
        if (ext == ".csv" || ext == ".txt" || ext == ".mid" || ext == ".midi") labels[f.path().stem().string()] = f.path();
    }
    if (wav_dir)
        for (const auto& f : fs::directory_iterator(*wav_dir))
            if (f.path().extension() == ".wav") wavs[f.path().stem().string()] = f.path();

    std::vector<PendingTrack> pending;
    for (const auto& [id, path] : labels) {
        PendingTrack t;
        t.id = id;
        const auto ext = path.extension().string();
        if (ext == ".mid" || ext == ".midi") {
            std::ifstream in(path, std::ios::binary);
            std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
            t.notes = parse_standard_midi(bytes);
        } else {
            std::ifstream in(path);
            if (!in) throw IoError("cannot open " + path.string());
            t.notes = parse_note_csv(in);
        }
        t.notes.set_id(id);
        if (wav_dir) {
            auto w = wavs.find(id);
            if (w == wavs.end()) {
                report.skipped.push_back(id + " (no matching WAV)");
                continue;
            }
            t.audio = read_wav_file(w->second.string());
            if (t.audio->sample_rate_hz != synth.sample_rate_hz) {
                report.skipped.push_back(id + " (sample rate " + std::to_string(t.audio->sample_rate_hz) + ")");
                continue;
            }
        }
        pending.push_back(std::move(t));
    }
    for (const auto& [id, path] : wavs)
        if (!labels.count(id)) report.skipped.push_back(id + " (WAV without labels)");
    if (!wav_dir) validate(synth.timbre);
    report.manifest = write_dataset(name, wav_dir ? "external" : synth.timbre.name, std::move(pending), synth,
                                    features, split_seed, out_dir, cache);
    return report;
}

std::vector<LabeledTrack> load_tracks(const fs::path& dataset_dir, const std::string& split,
                                      const FeatureConfig& features, SpectrogramCache* cache) {
    if (!fs::is_directory(dataset_dir)) throw IoError("dataset directory " + dataset_dir.string() + " does not exist");
    if (split != "train" && split != "valid" && split != "test" && split != "all")
        throw ArgumentError("unknown split '" + split + "'");
    const DatasetManifest m = read_manifest_file(dataset_dir / "manifest.json");
    std::vector<LabeledTrack> out;
    const double period = double(features.cqt.hop_samples) / kDefaultSampleRate;
    for (const auto& e : m.tracks) {
        if (split != "all" && e.split != split) continue;
        std::ifstream in(dataset_dir / e.labels);
        if (!in) throw IoError("cannot open " + (dataset_dir / e.labels).string());
        const NoteTrack notes = parse_note_csv(in);
        const AudioBuffer audio = read_wav_file((dataset_dir / e.audio).string());
        if (audio.sample_rate_hz != kDefaultSampleRate)
            throw ValidationError(e.id + ": expected " + std::to_string(kDefaultSampleRate) + " Hz audio");
        Spectrogram spec = compute_features(audio, features, cache);
        out.push_back(make_labeled_track(m.name + "/" + e.id, std::move(spec.matrix), notes, period));
    }
    return out;
}

DataSplit load_data_split(const std::vector<fs::path>& dirs, const FeatureConfig& features, SpectrogramCache* cache) {
    DataSplit d;
    for (const auto& dir : dirs) {
        for (auto& t : load_tracks(dir, "train", features, cache)) d.train.push_back(std::move(t));
        for (auto& t : load_tracks(dir, "valid", features, cache)) d.valid.push_back(std::move(t));
    }
    return d;
}

// ---------------------------------------------------------------------------
// Evaluation

const PRFScore& EvaluationResult::get(MetricFamily f) const {
    switch (f) {
        case MetricFamily::Frame: return frame;
        case MetricFamily::Note: return note;
        default: return note_with_offset;
    }
}

EvaluationResult summarize(std::vector<TrackScores> scores, Aggregation mode) {
    EvaluationResult r;
    std::vector<PRFScore> f, n, o;
    for (const auto& s : scores) {
        f.push_back(s.frame);
        n.push_back(s.note);
        o.push_back(s.note_with_offset);
    }
    r.frame = aggregate(f, mode);
    r.note = aggregate(n, mode);
    r.note_with_offset = aggregate(o, mode);
    r.tracks = std::move(scores);
    return r;
}

template <typename Scalar>
EvaluationResult evaluate_model(const Checkpoint<Scalar>& ckpt, const std::vector<LabeledTrack>& tracks,
                                const DecodeConfig& decode, const MatchTolerances& tol, Aggregation mode) {
    if (tracks.empty()) throw ArgumentError("cannot evaluate on an empty split");
    for (const auto& t : tracks)
        if (t.features.cols() != ckpt.config.input_bins)
            throw ArgumentError("track " + t.id + " has " + std::to_string(t.features.cols()) +
                                " bins but the model expects " + std::to_string(ckpt.config.input_bins));
    return summarize(evaluate_tracks(ckpt.config, ckpt.params, tracks, decode, tol), mode);
}

template EvaluationResult evaluate_model<float>(const Checkpoint<float>&, const std::vector<LabeledTrack>&,
                                                const DecodeConfig&, const MatchTolerances&, Aggregation);
template EvaluationResult evaluate_model<double>(const Checkpoint<double>&, const std::vector<LabeledTrack>&,
                                                 const DecodeConfig&, const MatchTolerances&, Aggregation);

void write_track_scores_csv(const std::vector<TrackScores>& scores, std::ostream& out) {
    out << "id,frame_P,frame_R,frame_F1,note_P,note_R,note_F1,note_offset_P,note_offset_R,note_offset_F1\n";
    out << std::setprecision(10);
    for (const auto& s : scores) {
        out << s.id;
        for (const PRFScore* p : {&s.frame, &s.note, &s.note_with_offset})
            out << ',' << p->precision << ',' << p->recall << ',' << p->f1;
        out << '\n';
    }
}

// ---------------------------------------------------------------------------
// Settings

RunSettings desk_scale_settings() {
    RunSettings s;
    s.model.unet_levels = 2;
    s.model.base_channels = 4;
    s.model.rnn_hidden = 24;
    s.train.sequence_len_samples = 160 * 64;
    s.train.batch_size = 4;
    s.train.max_epochs = 200;
    s.train.validate_every_epochs = 10;
    s.train.steps_per_epoch = 8;
    s.train.optimizer.learning_rate = 3e-3;
    s.synth.timbre = *find_timbre("piano-like");
    s.synth.peak_normalize = true;
    return s;
}

namespace {

template <typename T>
T convert(const std::string& section, const std::string& key, const std::string& value) {
    std::istringstream in(value);
    T v{};
    if (!(in >> v) || !(in >> std::ws).eof())
        throw ConfigError("[" + section + "] " + key + ": cannot parse '" + value + "'");
    return v;
}

template <typename T>
std::pair<T, T> convert_range(const std::string& section, const std::string& key, const std::string& value) {
    std::istringstream in(value);
    T a{}, b{};
    if (!(in >> a)) throw ConfigError("[" + section + "] " + key + ": expected one or two numbers");
    if (!(in >> b)) b = a;
    if (!(in >> std::ws).eof()) throw ConfigError("[" + section + "] " + key + ": expected one or two numbers");
    return {a, b};
}

bool convert_bool(const std::string& section, const std::string& key, const std::string& value) {
    if (value == "true" || value == "1" || value == "yes" || value == "on") return true;
    if (value == "false" || value == "0" || value == "no" || value == "off") return false;
    throw ConfigError("[" + section + "] " + key + ": expected a boolean, got '" + value + "'");
}

void apply_model(ModelConfig& m, const std::string& key, const std::string& v) {
    const std::string s = "model";
    if (key == "input_bins") m.input_bins = convert<int>(s, key, v);
    else if (key == "unet_levels") m.unet_levels = convert<int>(s, key, v);
    else if (key == "base_channels") m.base_channels = convert<int>(s, key, v);
    else if (key == "kernel") m.kernel = convert<int>(s, key, v);
    else if (key == "rnn_hidden") m.rnn_hidden = convert<int>(s, key, v);
    else if (key == "output_pitches") m.output_pitches = convert<int>(s, key, v);
    else if (key == "dtype") {
        if (v == "f32" || v == "float32") m.dtype = DType::F32;
        else if (v == "f64" || v == "float64") m.dtype = DType::F64;
        else throw ConfigError("[model] dtype: expected f32 or f64");
    } else throw ConfigError("[model] unknown key '" + key + "'");
}

void apply_train(TrainConfig& t, const std::string& key, const std::string& v) {
    const std::string s = "train";
    if (key == "sequence_len_samples") t.sequence_len_samples = convert<std::int64_t>(s, key, v);
    else if (key == "batch_size") t.batch_size = convert<int>(s, key, v);
    else if (key == "max_epochs") t.max_epochs = convert<int>(s, key, v);
    else if (key == "validate_every") t.validate_every_epochs = convert<int>(s, key, v);
    else if (key == "steps_per_epoch") t.steps_per_epoch = convert<int>(s, key, v);
    else if (key == "learning_rate") t.optimizer.learning_rate = convert<double>(s, key, v);
    else if (key == "optimizer") t.optimizer.method = parse_optimizer(v);
    else if (key == "beta1") t.optimizer.beta1 = convert<double>(s, key, v);
    else if (key == "beta2") t.optimizer.beta2 = convert<double>(s, key, v);
    else if (key == "epsilon") t.optimizer.epsilon = convert<double>(s, key, v);
    else if (key == "seed") t.seed = convert<std::uint64_t>(s, key, v);
    else if (key == "threshold") t.decode.threshold = convert<double>(s, key, v);
    else if (key == "min_duration_frames") t.decode.min_duration_frames = convert<int>(s, key, v);
    else if (key == "gap_tolerance_frames") t.decode.gap_tolerance_frames = convert<int>(s, key, v);
    else if (key == "onset_tolerance") t.tolerances.onset_tol_sec = convert<double>(s, key, v);
    else if (key == "offset_ratio") t.tolerances.offset_ratio = convert<double>(s, key, v);
    else if (key == "offset_min_tolerance") t.tolerances.offset_min_tol_sec = convert<double>(s, key, v);
    else throw ConfigError("[train] unknown key '" + key + "'");
}

void apply_features(FeatureConfig& f, const std::string& key, const std::string& v) {
    const std::string s = "features";
    if (key == "f_min") f.cqt.f_min_hz = convert<double>(s, key, v);
    else if (key == "bins_per_octave") f.cqt.bins_per_octave = convert<int>(s, key, v);
    else if (key == "n_bins") f.cqt.n_bins = convert<int>(s, key, v);
    else if (key == "hop") f.cqt.hop_samples = convert<Eigen::Index>(s, key, v);
    else if (key == "window") f.cqt.window = parse_window(v);
    else if (key == "log_gamma") f.log_gamma = convert<double>(s, key, v);
    else throw ConfigError("[features] unknown key '" + key + "'");
}

void apply_synth(SynthConfig& c, const std::string& key, const std::string& v, const fs::path& base_dir) {
    const std::string s = "synth";
    if (key == "timbre") {
        auto t = find_timbre(v);
        if (!t) throw ConfigError("[synth] unknown timbre '" + v + "'");
        c.timbre = *t;
    } else if (key == "timbre_file") {
        const fs::path p = fs::path(v).is_absolute() ? fs::path(v) : base_dir / v;
        std::ifstream in(p);
        if (!in) throw IoError("cannot open timbre file " + p.string());
        c.timbre = parse_timbre(in);
    } else if (key == "noise") c.noise_floor_amplitude = convert<double>(s, key, v);
    else if (key == "noise_seed") c.noise_seed = convert<std::uint64_t>(s, key, v);
    else if (key == "peak_normalize") c.peak_normalize = convert_bool(s, key, v);
    else if (key == "sample_rate") c.sample_rate_hz = convert<int>(s, key, v);
    else throw ConfigError("[synth] unknown key '" + key + "'");
}

void apply_recipe(RandomTrackRecipe& r, const std::string& key, const std::string& v) {
    const std::string s = "recipe";
    if (key == "tracks") r.n_tracks = convert<int>(s, key, v);
    else if (key == "notes") std::tie(r.notes_min, r.notes_max) = convert_range<int>(s, key, v);
    else if (key == "polyphony") r.polyphony_cap = convert<int>(s, key, v);
    else if (key == "pitch") std::tie(r.pitch_lo, r.pitch_hi) = convert_range<int>(s, key, v);
    else if (key == "duration") std::tie(r.duration_min_sec, r.duration_max_sec) = convert_range<double>(s, key, v);
    else if (key == "length_steps") std::tie(r.length_min_steps, r.length_max_steps) = convert_range<int>(s, key, v);
    else if (key == "tempo") std::tie(r.tempo_min_bpm, r.tempo_max_bpm) = convert_range<double>(s, key, v);
    else if (key == "velocity") std::tie(r.velocity_min, r.velocity_max) = convert_range<int>(s, key, v);
    else if (key == "seed") r.seed = convert<std::uint64_t>(s, key, v);
    else throw ConfigError("[recipe] unknown key '" + key + "'");
}

/// Applies one settings section; returns false for a section name it does not own.
bool apply_section(RunSettings& s, const std::string& section, const ptree& keys, const fs::path& base_dir) {
    using Fn = void (*)(RunSettings&, const std::string&, const std::string&, const fs::path&);
    static const std::map<std::string, Fn> handlers = {
        {"model", [](RunSettings& r, const std::string& k, const std::string& v, const fs::path&) { apply_model(r.model, k, v); }},
        {"train", [](RunSettings& r, const std::string& k, const std::string& v, const fs::path&) { apply_train(r.train, k, v); }},
        {"features", [](RunSettings& r, const std::string& k, const std::string& v, const fs::path&) { apply_features(r.features, k, v); }},
        {"synth", [](RunSettings& r, const std::string& k, const std::string& v, const fs::path& d) { apply_synth(r.synth, k, v, d); }},
        {"recipe", [](RunSettings& r, const std::string& k, const std::string& v, const fs::path&) { apply_recipe(r.recipe, k, v); }},
    };
    auto h = handlers.find(section);
    if (h == handlers.end()) return false;
    for (const auto& [k, v] : keys) h->second(s, k, v.data(), base_dir);
    return true;
}

ptree read_ini_text(const std::string& text) {
    ptree tree;
    std::istringstream in(text);
    try {
        boost::property_tree::read_ini(in, tree);
    } catch (const boost::property_tree::ini_parser_error& e) {
        throw ParseError(e.message(), e.line());
    }
    for (const auto& [k, v] : tree)
        if (v.empty() && !v.data().empty()) throw ConfigError("key '" + k + "' appears outside any section");
    return tree;
}

void finish_settings(RunSettings& s) {
    s.train.hop_samples = s.features.cqt.hop_samples;
    s.model.validate();
    s.train.validate();
    s.recipe.validate();
    s.features.cqt.validate(s.synth.sample_rate_hz);
    validate(s.synth.timbre);
    if (s.model.input_bins != s.features.cqt.n_bins)
        throw ConfigError("model input_bins (" + std::to_string(s.model.input_bins) + ") differs from CQT n_bins (" +
                          std::to_string(s.features.cqt.n_bins) + ")");
    if (s.model.output_pitches != kDefaultPitchCount)
        throw ConfigError("output_pitches must be " + std::to_string(kDefaultPitchCount) + " (MIDI 21-108)");
}

RunSettings parse_settings_in(const std::string& text, const RunSettings& base, const fs::path& base_dir) {
    RunSettings s = base;
    for (const auto& [section, keys] : read_ini_text(text))
        if (!apply_section(s, section, keys, base_dir)) throw ConfigError("unknown section [" + section + "]");
    finish_settings(s);
    return s;
}

/// Canonical text of every setting that influences results.
std::string settings_fingerprint(const RunSettings& s) {
    std::ostringstream o;
    o.precision(17);
    const auto& m = s.model;
    o << "model " << m.input_bins << ' ' << m.unet_levels << ' ' << m.base_channels << ' ' << m.kernel << ' '
      << m.rnn_hidden << ' ' << m.output_pitches << ' ' << int(m.dtype) << '\n';
    const auto& t = s.train;
    o << "train " << t.sequence_len_samples << ' ' << t.hop_samples << ' ' << t.batch_size << ' ' << t.max_epochs << ' '
      << t.validate_every_epochs << ' ' << t.steps_per_epoch << ' ' << optimizer_name(t.optimizer.method) << ' '
      << t.optimizer.learning_rate << ' ' << t.optimizer.beta1 << ' ' << t.optimizer.beta2 << ' '
      << t.optimizer.epsilon << ' ' << t.seed << ' ' << t.decode.threshold << ' ' << t.decode.min_duration_frames
      << ' ' << t.decode.gap_tolerance_frames << ' ' << t.tolerances.onset_tol_sec << ' ' << t.tolerances.offset_ratio
      << ' ' << t.tolerances.offset_min_tol_sec << '\n';
    o << "features " << s.features.describe() << '\n';
    o << "synth " << s.synth.sample_rate_hz << ' ' << s.synth.peak_normalize << ' ' << s.synth.noise_floor_amplitude
      << ' ' << s.synth.noise_seed << '\n';
    write_timbre(s.synth.timbre, o);
    const auto& r = s.recipe;
    o << "recipe " << r.n_tracks << ' ' << r.notes_min << ' ' << r.notes_max << ' ' << r.polyphony_cap << ' '
      << r.pitch_lo << ' ' << r.pitch_hi << ' ' << r.duration_min_sec << ' ' << r.duration_max_sec << ' '
      << r.length_min_steps << ' ' << r.length_max_steps << ' ' << r.tempo_min_bpm << ' ' << r.tempo_max_bpm << ' '
      << r.velocity_min << ' ' << r.velocity_max << ' ' << r.min_note_sec << ' ' << r.min_gap_sec << ' ' << r.seed
      << '\n';
    return o.str();
}

}  // namespace

RunSettings parse_settings(const std::string& text, const RunSettings& base) {
    return parse_settings_in(text, base, fs::current_path());
}

RunSettings load_settings_file(const fs::path& path, const RunSettings& base) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open settings file " + path.string());
    std::stringstream text;
    text << in.rdbuf();
    return parse_settings_in(text.str(), base, path.parent_path());
}

// ---------------------------------------------------------------------------
// Plans

std::string stage_kind_name(StageKind k) {
    switch (k) {
        case StageKind::Generate: return "generate";
        case StageKind::Train: return "train";
        case StageKind::TransferTrain: return "transfer-train";
        default: return "evaluate";
    }
}

namespace {

StageKind parse_stage_kind(const std::string& s) {
    for (StageKind k : {StageKind::Generate, StageKind::Train, StageKind::TransferTrain, StageKind::Evaluate})
        if (stage_kind_name(k) == s) return k;
    throw ConfigError("unknown stage kind '" + s + "'");
}

std::vector<std::string> words(const std::string& s) {
    std::istringstream in(s);
    std::vector<std::string> out;
    for (std::string w; in >> w;) out.push_back(w);
    return out;
}

std::string ini_section(const std::string& name, const std::vector<std::pair<std::string, std::string>>& keys) {
    std::string out = "[" + name + "]\n";
    for (const auto& [k, v] : keys) out += k + " = " + v + "\n";
    return out;
}

}  // namespace

std::vector<const Stage*> ExperimentPlan::topological_order() const {
    std::map<std::string, const Stage*> by_name;
    for (const auto& s : stages)
        if (!by_name.emplace(s.name, &s).second) throw ConfigError("duplicate stage '" + s.name + "'");
    auto deps = [&](const Stage& s) {
        std::vector<std::string> d;
        if (s.kind != StageKind::Generate)
            for (const auto& ds : s.datasets) d.push_back("generate-" + ds);
        if (!s.from.empty()) d.push_back(s.from);
        for (const auto& n : d)
            if (!by_name.count(n)) throw ConfigError("stage '" + s.name + "' depends on unknown stage '" + n + "'");
        return d;
    };
    std::vector<const Stage*> order;
    std::map<std::string, int> state;  // 1 visiting, 2 done
    std::function<void(const Stage&)> visit = [&](const Stage& s) {
        int& st = state[s.name];
        if (st == 2) return;
        if (st == 1) throw ConfigError("stage dependency cycle through '" + s.name + "'");
        st = 1;
        for (const auto& d : deps(s)) visit(*by_name.at(d));
        state[s.name] = 2;
        order.push_back(&s);
    };
    for (const auto& s : stages) visit(s);
    return order;
}

ExperimentPlan parse_plan(const std::string& text, const fs::path& base_dir) {
    const ptree tree = read_ini_text(text);
    ExperimentPlan plan;
    plan.name = "plan";
    plan.out_dir = base_dir / "out";

    // Global settings first, so dataset and stage sections can refine them.
    RunSettings global = desk_scale_settings();
    for (const auto& [section, keys] : tree) apply_section(global, section, keys, base_dir);

    for (const auto& [section, keys] : tree) {
        if (section == "plan") {
            for (const auto& [k, v] : keys) {
                if (k == "name") plan.name = v.data();
                else if (k == "out_dir") plan.out_dir = fs::path(v.data()).is_absolute() ? fs::path(v.data()) : base_dir / v.data();
                else if (k == "threshold") plan.threshold = convert<double>("plan", k, v.data());
                else throw ConfigError("[plan] unknown key '" + k + "'");
            }
        } else if (section.rfind("dataset.", 0) == 0) {
            DatasetSpec d;
            d.name = section.substr(8);
            RunSettings s = global;
            for (const auto& [k, v] : keys) {
                if (k == "timbre" || k == "timbre_file" || k == "noise" || k == "noise_seed" || k == "peak_normalize")
                    apply_synth(s.synth, k, v.data(), base_dir);
                else
                    apply_recipe(s.recipe, k, v.data());
            }
            finish_settings(s);
            d.recipe = s.recipe;
            d.synth = s.synth;
            d.features = s.features;
            if (!plan.datasets.emplace(d.name, d).second) throw ConfigError("duplicate dataset '" + d.name + "'");
            Stage g;
            g.name = "generate-" + d.name;
            g.kind = StageKind::Generate;
            g.datasets = {d.name};
            g.settings = s;
            plan.stages.push_back(g);
        } else if (section.rfind("stage.", 0) == 0) {
            Stage st;
            st.name = section.substr(6);
            std::map<std::string, std::vector<std::pair<std::string, std::string>>> overrides;
            bool has_kind = false;
            for (const auto& [k, v] : keys) {
                if (k == "kind") {
                    st.kind = parse_stage_kind(v.data());
                    has_kind = true;
                } else if (k == "data") st.datasets = words(v.data());
                else if (k == "from") st.from = v.data();
                else if (k == "split") st.split = v.data();
                else if (auto dot = k.find('.'); dot != std::string::npos)
                    overrides[k.substr(0, dot)].emplace_back(k.substr(dot + 1), v.data());
                else throw ConfigError("[" + section + "] unknown key '" + k + "'");
            }
            if (!has_kind) throw ConfigError("[" + section + "] needs a kind");
            if (st.kind == StageKind::Generate) throw ConfigError("generate stages come from [dataset.*] sections");
            if (st.datasets.empty()) throw ConfigError("[" + section + "] needs data");
            if ((st.kind == StageKind::TransferTrain || st.kind == StageKind::Evaluate) && st.from.empty())
                throw ConfigError("[" + section + "] needs from");
            if (st.kind == StageKind::Train && !st.from.empty())
                throw ConfigError("[" + section + "] train stages start from scratch; use transfer-train");
            st.settings = global;
            for (const auto& [sec, kv] : overrides) {
                st.settings_text += ini_section(sec, kv);
                ptree sub;
                for (const auto& [k, v] : kv) sub.push_back({k, ptree(v)});
                if (!apply_section(st.settings, sec, sub, base_dir))
                    throw ConfigError("[" + section + "] unknown settings group '" + sec + "'");
            }
            finish_settings(st.settings);
            plan.stages.push_back(st);
        } else if (section.rfind("compare.", 0) == 0) {
            Comparison c;
            c.name = section.substr(8);
            for (const auto& [k, v] : keys) {
                if (k == "pretrained") c.pretrained = v.data();
                else if (k == "finetuned") c.finetuned = v.data();
                else if (k == "scratch") c.scratch = v.data();
                else if (k == "target") c.target = v.data();
                else throw ConfigError("[" + section + "] unknown key '" + k + "'");
            }
            plan.comparisons.push_back(c);
        } else if (section != "model" && section != "train" && section != "features" && section != "synth" &&
                   section != "recipe") {
            throw ConfigError("unknown section [" + section + "]");
        }
    }
    // Global settings also reach stages declared before them in the file.
    for (auto& st : plan.stages) {
        for (const auto& ds : st.datasets)
            if (!plan.datasets.count(ds)) throw ConfigError("stage '" + st.name + "' uses unknown dataset '" + ds + "'");
        if (st.kind == StageKind::Evaluate && st.split != "train" && st.split != "valid" && st.split != "test")
            throw ConfigError("stage '" + st.name + "' has unknown split '" + st.split + "'");
    }
    std::map<std::string, StageKind> kinds;
    for (const auto& st : plan.stages) kinds[st.name] = st.kind;
    for (const auto& st : plan.stages) {
        if (st.from.empty()) continue;
        auto k = kinds.find(st.from);
        if (k == kinds.end()) throw ConfigError("stage '" + st.name + "' refers to unknown stage '" + st.from + "'");
        if (k->second != StageKind::Train && k->second != StageKind::TransferTrain)
            throw ConfigError("stage '" + st.name + "' needs a training stage as 'from'");
    }
    for (const auto& c : plan.comparisons) {
        for (const auto* ref : {&c.pretrained, &c.finetuned, &c.scratch})
            if (!kinds.count(*ref)) throw ConfigError("comparison '" + c.name + "' refers to unknown stage '" + *ref + "'");
        if (!plan.datasets.count(c.target)) throw ConfigError("comparison '" + c.name + "' has unknown target");
    }
    plan.topological_order();
    return plan;
}

ExperimentPlan load_plan_file(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open plan " + path.string());
    std::stringstream text;
    text << in.rdbuf();
    return parse_plan(text.str(), path.parent_path().empty() ? fs::path(".") : path.parent_path());
}

// ---------------------------------------------------------------------------
// Plan execution

namespace {

struct StageRecord {
    fs::path dir;
    std::vector<fs::path> outputs;  // relative to dir
};

fs::path stage_dir(const ExperimentPlan& plan, const Stage& s) {
    switch (s.kind) {
        case StageKind::Generate: return plan.out_dir / "datasets" / s.datasets.front();
        case StageKind::Evaluate: return plan.out_dir / "evals" / s.name;
        default: return plan.out_dir / "models" / s.name;
    }
}

std::vector<fs::path> stage_outputs(const Stage& s) {
    switch (s.kind) {
        case StageKind::Generate: return {"manifest.json"};
        case StageKind::Evaluate: return {"tracks.csv", "summary.json"};
        default: return {"best.amtf", "final.amtf", "report.csv", "train_loss.csv"};
    }
}

/// Digest over a stage's own definition and everything it reads.
std::string stage_input_digest(const ExperimentPlan& plan, const Stage& s) {
    Sha256 h;
    h.update("stage v1\n").update(s.name).update("\n").update(stage_kind_name(s.kind)).update("\n");
    h.update(settings_fingerprint(s.settings)).update(s.settings_text).update(s.split).update("\n");
    for (const auto& ds : s.datasets) {
        h.update("dataset ").update(ds).update("\n");
        if (s.kind == StageKind::Generate) {
            const auto& spec = plan.datasets.at(ds);
            RunSettings r = s.settings;
            r.recipe = spec.recipe;
            r.synth = spec.synth;
            r.features = spec.features;
            h.update(settings_fingerprint(r));
        } else {
            h.update(sha256_file((plan.out_dir / "datasets" / ds / "manifest.json").string()));
        }
    }
    if (!s.from.empty()) {
        h.update("from ").update(s.from).update("\n");
        h.update(sha256_file((plan.out_dir / "models" / s.from / "best.amtf").string()));
    }
    return to_hex(h.finish());
}

fs::path stamp_path(const ExperimentPlan& plan, const Stage& s) { return plan.out_dir / "stamps" / (s.name + ".json"); }

bool stage_up_to_date(const ExperimentPlan& plan, const Stage& s, const std::string& digest) {
    std::ifstream in(stamp_path(plan, s));
    if (!in) return false;
    try {
        const json j = json::parse(in);
        if (j.at("inputs").get<std::string>() != digest) return false;
        const fs::path dir = stage_dir(plan, s);
        for (const auto& [rel, sha] : j.at("outputs").items())
            if (!fs::exists(dir / rel) || sha256_file((dir / rel).string()) != sha.get<std::string>()) return false;
        if (s.kind == StageKind::Generate) {
            const DatasetManifest m = read_manifest_file(dir / "manifest.json");
            for (const auto& e : m.tracks)
                if (!fs::exists(dir / e.labels) || !fs::exists(dir / e.audio) ||
                    sha256_file((dir / e.audio).string()) != e.audio_sha256 ||
                    sha256_file((dir / e.labels).string()) != e.labels_sha256)
                    return false;
        }
        return true;
    } catch (const std::exception&) {
        return false;
    }
}

void write_stamp(const ExperimentPlan& plan, const Stage& s, const std::string& digest) {
    json j;
    j["stage"] = s.name;
    j["inputs"] = digest;
    j["outputs"] = json::object();
    for (const auto& rel : stage_outputs(s))
        j["outputs"][rel.string()] = sha256_file((stage_dir(plan, s) / rel).string());
    fs::create_directories(stamp_path(plan, s).parent_path());
    write_text_file(stamp_path(plan, s), j.dump(2) + "\n");
}

template <typename Scalar>
void run_training(const ExperimentPlan& plan, const Stage& s, SpectrogramCache& cache, std::ostream& log) {
    std::vector<fs::path> dirs;
    for (const auto& ds : s.datasets) dirs.push_back(plan.out_dir / "datasets" / ds);
    const DataSplit data = load_data_split(dirs, s.settings.features, &cache);
    ModelConfig model = s.settings.model;
    model.dtype = dtype_of<Scalar>();
    ParameterSet<Scalar> init;
    if (s.kind == StageKind::TransferTrain) {
        const auto src = load_checkpoint_file<Scalar>((plan.out_dir / "models" / s.from / "best.amtf").string());
        init = transfer_init(src, model);
    } else {
        init = scratch_params<Scalar>(model, s.settings.train.seed, data.train);
    }
    TrainConfig tc = s.settings.train;
    tc.tag = s.name;
    for (std::size_t i = 0; i < s.datasets.size(); ++i) tc.tag += (i ? "+" : ":") + s.datasets[i];
    const auto result = train<Scalar>(model, std::move(init), data, tc, [&](const ValidationRecord& r) {
        log << "  [" << s.name << "] epoch " << r.epoch << " val loss " << r.loss << " frame F1 " << r.frame.f1
            << " note F1 " << r.note.f1 << '\n';
    });
    const fs::path dir = stage_dir(plan, s);
    fs::create_directories(dir);
    save_checkpoint_file(result.best_checkpoint, (dir / "best.amtf").string());
    save_checkpoint_file(result.final_checkpoint, (dir / "final.amtf").string());
    std::ostringstream rep, tl;
    write_train_report_csv(result.report, rep);
    write_text_file(dir / "report.csv", rep.str());
    tl << "epoch,train_loss\n" << std::setprecision(10);
    for (std::size_t i = 0; i < result.report.train_loss.size(); ++i) tl << i + 1 << ',' << result.report.train_loss[i] << '\n';
    write_text_file(dir / "train_loss.csv", tl.str());
}

json prf_json(const PRFScore& p) {
    return {{"P", p.precision}, {"R", p.recall}, {"F1", p.f1}, {"tp", p.tp}, {"fp", p.fp}, {"fn", p.fn}};
}

PRFScore prf_from_json(const json& j) {
    PRFScore p = PRFScore::from_counts(j.at("tp").get<std::size_t>(), j.at("fp").get<std::size_t>(),
                                       j.at("fn").get<std::size_t>());
    p.precision = j.at("P").get<double>();
    p.recall = j.at("R").get<double>();
    p.f1 = j.at("F1").get<double>();
    return p;
}

void run_evaluation(const ExperimentPlan& plan, const Stage& s, SpectrogramCache& cache) {
    const auto ckpt = load_checkpoint_file<double>((plan.out_dir / "models" / s.from / "best.amtf").string());
    std::vector<TrackScores> all;
    json summary;
    summary["model"] = s.from;
    summary["split"] = s.split;
    summary["datasets"] = json::object();
    for (const auto& ds : s.datasets) {
        const auto tracks = load_tracks(plan.out_dir / "datasets" / ds, s.split, s.settings.features, &cache);
        const EvaluationResult r = evaluate_model(ckpt, tracks, s.settings.train.decode, s.settings.train.tolerances);
        summary["datasets"][ds] = {{"frame", prf_json(r.frame)},
                                   {"note", prf_json(r.note)},
                                   {"note-with-offset", prf_json(r.note_with_offset)}};
        all.insert(all.end(), r.tracks.begin(), r.tracks.end());
    }
    const fs::path dir = stage_dir(plan, s);
    fs::create_directories(dir);
    std::ostringstream csv;
    write_track_scores_csv(all, csv);
    write_text_file(dir / "tracks.csv", csv.str());
    write_text_file(dir / "summary.json", summary.dump(2) + "\n");
}

void write_reports(const ExperimentPlan& plan) {
    std::vector<ResultRow> rows;
    std::map<std::pair<std::string, std::string>, json> eval_by_model_dataset;
    for (const auto& s : plan.stages) {
        if (s.kind != StageKind::Evaluate) continue;
        std::ifstream in(stage_dir(plan, s) / "summary.json");
        if (!in) continue;
        const json j = json::parse(in);
        for (const auto& [ds, fam] : j.at("datasets").items()) {
            for (MetricFamily f : {MetricFamily::Frame, MetricFamily::Note, MetricFamily::NoteWithOffset})
                rows.push_back({s.from, ds, f, prf_from_json(fam.at(family_name(f)))});
            eval_by_model_dataset[{s.from, ds}] = fam;
        }
    }
    std::ostringstream csv, table;
    write_results_csv(rows, csv);
    write_results_table(rows, table);
    write_text_file(plan.out_dir / "results.csv", csv.str());
    write_text_file(plan.out_dir / "results.txt", table.str());

    auto report_of = [&](const std::string& stage) -> std::optional<TrainReport> {
        std::ifstream in(plan.out_dir / "models" / stage / "report.csv");
        if (!in) return std::nullopt;
        TrainReport r;
        std::string line;
        std::getline(in, line);
        while (std::getline(in, line)) {
            std::istringstream f(line);
            ValidationRecord rec;
            char comma;
            f >> rec.epoch >> comma >> rec.loss >> comma >> rec.frame.precision >> comma >> rec.frame.recall >> comma >>
                rec.frame.f1;
            r.records.push_back(rec);
        }
        return r;
    };
    auto epochs = [&](const std::string& stage) -> std::string {
        const auto r = report_of(stage);
        if (!r) return "n/a";
        const auto e = epochs_to_threshold(*r, plan.threshold);
        return e ? std::to_string(*e) : "inf";
    };
    auto frame_f1 = [&](const std::string& model, const std::string& ds) -> std::string {
        auto it = eval_by_model_dataset.find({model, ds});
        if (it == eval_by_model_dataset.end()) return "n/a";
        std::ostringstream s;
        s << std::fixed << std::setprecision(3) << it->second.at("frame").at("F1").get<double>();
        return s.str();
    };
    std::ostringstream cmp;
    cmp << "comparison,target,pretrained,zero_shot_frame_F1,finetuned_frame_F1,scratch_frame_F1,"
           "finetuned_epochs_to_threshold,scratch_epochs_to_threshold\n";
    for (const auto& c : plan.comparisons)
        cmp << c.name << ',' << c.target << ',' << c.pretrained << ',' << frame_f1(c.pretrained, c.target) << ','
            << frame_f1(c.finetuned, c.target) << ',' << frame_f1(c.scratch, c.target) << ',' << epochs(c.finetuned)
            << ',' << epochs(c.scratch) << '\n';
    write_text_file(plan.out_dir / "comparison.csv", cmp.str());
}

}  // namespace

std::vector<StageOutcome> run_plan(const ExperimentPlan& plan, const PlanRunOptions& options) {
    std::ostream& log = options.log ? *options.log : std::cerr;
    std::ostringstream sink;
    std::ostream& out = options.verbose ? log : sink;
    fs::create_directories(plan.out_dir);
    SpectrogramCache cache(options.cache_dir.empty() ? plan.out_dir / "cache" : options.cache_dir);

    std::vector<StageOutcome> outcomes;
    std::set<std::string> failed;
    for (const Stage* s : plan.topological_order()) {
        StageOutcome o;
        o.name = s->name;
        std::vector<std::string> deps;
        if (s->kind != StageKind::Generate)
            for (const auto& ds : s->datasets) deps.push_back("generate-" + ds);
        if (!s->from.empty()) deps.push_back(s->from);
        if (std::any_of(deps.begin(), deps.end(), [&](const auto& d) { return failed.count(d) > 0; })) {
            o.failed = true;
            o.message = "skipped: an upstream stage failed";
            failed.insert(s->name);
            out << "stage " << s->name << ": " << o.message << '\n';
            outcomes.push_back(o);
            continue;
        }
        try {
            const std::string digest = stage_input_digest(plan, *s);
            if (stage_up_to_date(plan, *s, digest)) {
                o.skipped = true;
                o.message = "up to date";
            } else {
                out << "stage " << s->name << " (" << stage_kind_name(s->kind) << ") running\n";
                switch (s->kind) {
                    case StageKind::Generate: {
                        DatasetSpec spec = plan.datasets.at(s->datasets.front());
                        generate_dataset(spec, stage_dir(plan, *s), &cache);
                        break;
                    }
                    case StageKind::Train:
                    case StageKind::TransferTrain:
                        if (s->settings.model.dtype == DType::F64) run_training<double>(plan, *s, cache, out);
                        else run_training<float>(plan, *s, cache, out);
                        break;
                    case StageKind::Evaluate: run_evaluation(plan, *s, cache); break;
                }
                write_stamp(plan, *s, digest);
                o.message = "done";
            }
        } catch (const std::exception& e) {
            o.failed = true;
            o.message = e.what();
            failed.insert(s->name);
        }
        out << "stage " << s->name << ": " << o.message << '\n';
        outcomes.push_back(o);
    }
    write_reports(plan);
    return outcomes;
}

}  // namespace amt
