// amt: command-line front end for the transcription workbench.

#include "amt/digest.hpp"
#include "amt/experiments.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

namespace {

using namespace amt;
using json = nlohmann::json;

struct Globals {
    std::optional<std::uint64_t> seed;
    std::string config;
    std::string cache_dir;
    bool deterministic = false;  // execution is always serial; accepted for scripts
    bool json = false;
};

struct SynthFlags {
    std::string timbre;
    std::string timbre_file;
    std::optional<double> noise;
    bool normalize = false;
};

struct FeatureFlags {
    std::optional<double> f_min;
    std::optional<int> bins_per_octave;
    std::optional<int> n_bins;
    std::optional<Eigen::Index> hop;
    std::string window;
    std::optional<double> log_gamma;
};

void add_synth_flags(CLI::App* cmd, SynthFlags& f) {
    cmd->add_option("--timbre", f.timbre, "Built-in timbre (piano-like, guitar-like, organ-like)");
    cmd->add_option("--timbre-file", f.timbre_file, "Timbre profile in key = value form");
    cmd->add_option("--noise", f.noise, "Noise floor amplitude");
    cmd->add_flag("--normalize", f.normalize, "Peak-normalize the rendered audio");
}

void add_feature_flags(CLI::App* cmd, FeatureFlags& f) {
    cmd->add_option("--f-min", f.f_min, "Lowest CQT bin frequency in Hz");
    cmd->add_option("--bins-per-octave", f.bins_per_octave);
    cmd->add_option("--n-bins", f.n_bins);
    cmd->add_option("--hop", f.hop, "Hop in samples");
    cmd->add_option("--window", f.window, "hann, hamming or rectangular");
    cmd->add_option("--log-gamma", f.log_gamma, "Log compression gain");
}

RunSettings base_settings(const Globals& g) {
    RunSettings s = desk_scale_settings();
    if (!g.config.empty()) s = load_settings_file(g.config, s);
    if (g.seed) {
        s.train.seed = *g.seed;
        s.recipe.seed = *g.seed;
        s.synth.noise_seed = *g.seed;
    }
    return s;
}

void apply(const SynthFlags& f, SynthConfig& c) {
    if (!f.timbre.empty() && !f.timbre_file.empty()) throw ArgumentError("give --timbre or --timbre-file, not both");
    if (!f.timbre.empty()) {
        auto t = find_timbre(f.timbre);
        if (!t) throw ArgumentError("unknown timbre '" + f.timbre + "'");
        c.timbre = *t;
    }
    if (!f.timbre_file.empty()) {
        std::ifstream in(f.timbre_file);
        if (!in) throw IoError("cannot open timbre file " + f.timbre_file);
        c.timbre = parse_timbre(in);
    }
    if (f.noise) c.noise_floor_amplitude = *f.noise;
    if (f.normalize) c.peak_normalize = true;
}

void apply(const FeatureFlags& f, RunSettings& s) {
    auto& c = s.features.cqt;
    if (f.f_min) c.f_min_hz = *f.f_min;
    if (f.bins_per_octave) c.bins_per_octave = *f.bins_per_octave;
    if (f.n_bins) c.n_bins = *f.n_bins;
    if (f.hop) c.hop_samples = *f.hop;
    if (!f.window.empty()) c.window = parse_window(f.window);
    if (f.log_gamma) s.features.log_gamma = *f.log_gamma;
    c.validate(s.synth.sample_rate_hz);
    s.train.hop_samples = c.hop_samples;
}

std::unique_ptr<SpectrogramCache> make_cache(const Globals& g) {
    if (g.cache_dir.empty()) return nullptr;
    return std::make_unique<SpectrogramCache>(g.cache_dir);
}

NoteTrack read_labels(const std::string& path) {
    const std::string ext = fs::path(path).extension().string();
    if (ext == ".mid" || ext == ".midi") {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw IoError("cannot open " + path);
        std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        return parse_standard_midi(bytes);
    }
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path);
    return parse_note_csv(in);
}

json prf(const PRFScore& p) {
    return {{"P", p.precision}, {"R", p.recall}, {"F1", p.f1}, {"tp", p.tp}, {"fp", p.fp}, {"fn", p.fn}};
}

void print_prf(std::ostream& out, const std::string& label, const PRFScore& p) {
    out << std::left << std::setw(18) << label << std::right << std::fixed << std::setprecision(4) << " P "
        << p.precision << "  R " << p.recall << "  F1 " << p.f1 << '\n';
    out.unsetf(std::ios::floatfield);
}

void ensure_dir(const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
}

template <typename Scalar>
json train_command(const RunSettings& s, const std::vector<std::string>& data, const std::string& from,
                   const fs::path& out, SpectrogramCache* cache, bool verbose) {
    std::vector<fs::path> dirs(data.begin(), data.end());
    const DataSplit split = load_data_split(dirs, s.features, cache);
    ModelConfig model = s.model;
    model.dtype = dtype_of<Scalar>();
    ParameterSet<Scalar> init;
    if (from.empty()) {
        init = scratch_params<Scalar>(model, s.train.seed, split.train);
    } else {
        init = transfer_init(load_checkpoint_file<Scalar>(from), model);
    }
    TrainConfig tc = s.train;
    for (std::size_t i = 0; i < dirs.size(); ++i)
        tc.tag += (i ? "+" : "") + dirs[i].filename().string();
    const auto r = train<Scalar>(model, std::move(init), split, tc, [&](const ValidationRecord& v) {
        if (verbose)
            std::cerr << "epoch " << v.epoch << "  val loss " << v.loss << "  frame F1 " << v.frame.f1 << "  note F1 "
                      << v.note.f1 << '\n';
    });
    ensure_dir(out);
    save_checkpoint_file(r.best_checkpoint, (out / "best.amtf").string());
    save_checkpoint_file(r.final_checkpoint, (out / "final.amtf").string());
    std::ofstream rep(out / "report.csv");
    write_train_report_csv(r.report, rep);
    if (!rep) throw IoError("cannot write " + (out / "report.csv").string());

    json j;
    j["best_epoch"] = r.best_checkpoint.meta.epoch;
    j["final_epoch"] = r.final_checkpoint.meta.epoch;
    j["train_tracks"] = split.train.size();
    j["valid_tracks"] = split.valid.size();
    j["best_frame_f1"] = 0.0;
    for (const auto& v : r.report.records) j["best_frame_f1"] = std::max(j["best_frame_f1"].get<double>(), v.frame.f1);
    j["best_checkpoint"] = (out / "best.amtf").string();
    j["best_sha256"] = sha256_file((out / "best.amtf").string());
    j["final_sha256"] = sha256_file((out / "final.amtf").string());
    j["report"] = (out / "report.csv").string();
    return j;
}

int run(int argc, char** argv) {
    CLI::App app{"Desk-scale automatic music transcription workbench", "amt"};
    app.require_subcommand(1);
    app.fallthrough();
    Globals g;
    app.add_option("--seed", g.seed, "Seed for synthesis, track generation and training");
    app.add_option("--config", g.config, "Settings INI ([model] [train] [features] [synth] [recipe])");
    app.add_option("--cache-dir", g.cache_dir, "Spectrogram cache directory");
    app.add_flag("--deterministic", g.deterministic, "Serial, bit-reproducible execution");
    app.add_flag("--json", g.json, "Print a JSON summary on stdout");

    // synth
    auto* synth = app.add_subcommand("synth", "Render a note file (CSV or MIDI) to a 16-bit WAV");
    std::string synth_in, synth_out;
    SynthFlags synth_flags;
    synth->add_option("labels", synth_in, "Note CSV or Standard MIDI File")->required();
    synth->add_option("-o,--output", synth_out, "Output WAV")->required();
    add_synth_flags(synth, synth_flags);

    // spectrogram
    auto* spec = app.add_subcommand("spectrogram", "Log-compressed CQT of a WAV as CSV");
    std::string spec_in, spec_out;
    FeatureFlags spec_flags;
    bool spec_raw = false;
    spec->add_option("audio", spec_in, "Input WAV")->required();
    spec->add_option("-o,--output", spec_out, "Output CSV (default stdout)");
    spec->add_flag("--linear", spec_raw, "Skip log compression");
    add_feature_flags(spec, spec_flags);

    // generate
    auto* gen = app.add_subcommand("generate", "Write a synthetic dataset (labels, audio, manifest)");
    std::string gen_out, gen_name = "dataset", gen_labels, gen_wavs;
    std::optional<int> gen_tracks;
    SynthFlags gen_synth;
    FeatureFlags gen_features;
    gen->add_option("-o,--output", gen_out, "Dataset directory")->required();
    gen->add_option("--name", gen_name);
    gen->add_option("--tracks", gen_tracks, "Number of random tracks");
    gen->add_option("--labels", gen_labels, "Use label files (CSV/MIDI) from this directory");
    gen->add_option("--wav-dir", gen_wavs, "Use these WAVs instead of rendering (matched by basename)");
    add_synth_flags(gen, gen_synth);
    add_feature_flags(gen, gen_features);

    // train / finetune
    auto* tr = app.add_subcommand("train", "Train a model from scratch");
    auto* ft = app.add_subcommand("finetune", "Continue training from a checkpoint");
    std::vector<std::string> train_data;
    std::string train_out, train_from;
    std::optional<int> train_epochs;
    std::optional<double> train_lr;
    bool train_quiet = false;
    for (auto* cmd : {tr, ft}) {
        cmd->add_option("--data", train_data, "Dataset directories (train/valid splits are merged)")->required();
        cmd->add_option("-o,--output", train_out, "Output directory for checkpoints and report")->required();
        cmd->add_option("--epochs", train_epochs);
        cmd->add_option("--learning-rate", train_lr);
        cmd->add_flag("-q,--quiet", train_quiet);
    }
    ft->add_option("--from", train_from, "Source checkpoint")->required();

    // evaluate
    auto* ev = app.add_subcommand("evaluate", "Score a checkpoint on dataset splits");
    std::string ev_model, ev_split = "test", ev_tracks;
    std::vector<std::string> ev_data;
    bool ev_pooled = false;
    ev->add_option("--model", ev_model, "Checkpoint")->required();
    ev->add_option("--data", ev_data, "Dataset directories")->required();
    ev->add_option("--split", ev_split, "train, valid, test or all");
    ev->add_flag("--pooled", ev_pooled, "Pool counts over tracks instead of averaging per-track scores");
    ev->add_option("--tracks-csv", ev_tracks, "Write per-track scores here");

    // decode
    auto* dec = app.add_subcommand("decode", "Transcribe a WAV to a note CSV");
    std::string dec_model, dec_in, dec_out;
    std::optional<double> dec_threshold;
    dec->add_option("--model", dec_model, "Checkpoint")->required();
    dec->add_option("audio", dec_in, "Input WAV")->required();
    dec->add_option("-o,--output", dec_out, "Output note CSV (default stdout)");
    dec->add_option("--threshold", dec_threshold);

    // score
    auto* sc = app.add_subcommand("score", "Compare a reference and an estimated note file");
    std::string sc_ref, sc_est;
    sc->add_option("reference", sc_ref)->required();
    sc->add_option("estimate", sc_est)->required();

    // plan run
    auto* plan = app.add_subcommand("plan", "Experiment plans");
    plan->require_subcommand(1);
    auto* plan_run = plan->add_subcommand("run", "Run every stage of a plan, skipping up-to-date ones");
    std::string plan_file;
    bool plan_quiet = false;
    plan_run->add_option("plan", plan_file, "Plan INI")->required();
    plan_run->add_flag("-q,--quiet", plan_quiet);

    try {
        app.parse(argc, argv);
    } catch (const CLI::Success& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "error: " << e.what() << "\n\n" << app.help();
        return 1;
    }

    auto cache = make_cache(g);
    json summary;
    std::ostream& out = std::cout;

    if (*synth) {
        RunSettings s = base_settings(g);
        apply(synth_flags, s.synth);
        NoteTrack track = read_labels(synth_in);
        const AudioBuffer audio = render(track, s.synth);
        write_wav_file(audio, synth_out);
        summary = {{"output", synth_out},
                   {"samples", audio.samples.size()},
                   {"timbre", s.synth.timbre.name},
                   {"sha256", sha256_file(synth_out)}};
        if (!g.json) out << "wrote " << synth_out << " (" << audio.samples.size() << " samples, " << s.synth.timbre.name << ")\n";
    } else if (*spec) {
        RunSettings s = base_settings(g);
        apply(spec_flags, s);
        const AudioBuffer audio = read_wav_file(spec_in);
        Spectrogram sg = spec_raw ? cqt(audio, s.features.cqt) : compute_features(audio, s.features, cache.get());
        std::ostringstream csv;
        csv << std::setprecision(9) << "time_sec";
        for (double f : sg.bin_center_freqs_hz) csv << ',' << f;
        csv << '\n';
        for (Eigen::Index t = 0; t < sg.frames(); ++t) {
            csv << t * sg.frame_period_sec;
            for (Eigen::Index b = 0; b < sg.bins(); ++b) csv << ',' << sg.matrix(t, b);
            csv << '\n';
        }
        if (spec_out.empty()) {
            out << csv.str();
        } else {
            std::ofstream f(spec_out);
            if (!f || !(f << csv.str())) throw IoError("cannot write " + spec_out);
            summary = {{"output", spec_out}, {"frames", sg.frames()}, {"bins", sg.bins()}};
            if (!g.json) out << "wrote " << spec_out << " (" << sg.frames() << " frames x " << sg.bins() << " bins)\n";
        }
    } else if (*gen) {
        RunSettings s = base_settings(g);
        apply(gen_synth, s.synth);
        apply(gen_features, s);
        if (gen_tracks) s.recipe.n_tracks = *gen_tracks;
        SpectrogramCache fallback(fs::path(gen_out) / "cache");
        SpectrogramCache* c = cache ? cache.get() : &fallback;
        GenerateReport r;
        if (gen_labels.empty()) {
            if (!gen_wavs.empty()) throw ArgumentError("--wav-dir needs --labels");
            r = generate_dataset({gen_name, s.recipe, s.synth, s.features}, gen_out, c);
        } else {
            std::optional<fs::path> wavs;
            if (!gen_wavs.empty()) wavs = gen_wavs;
            r = generate_dataset_from_labels(gen_name, gen_labels, wavs, s.synth, s.features, s.recipe.seed, gen_out, c);
        }
        std::size_t n[3] = {0, 0, 0};
        for (const auto& e : r.manifest.tracks) ++n[e.split == "train" ? 0 : e.split == "valid" ? 1 : 2];
        summary = {{"output", gen_out},
                   {"tracks", r.manifest.tracks.size()},
                   {"train", n[0]},
                   {"valid", n[1]},
                   {"test", n[2]},
                   {"skipped", r.skipped},
                   {"manifest_sha256", sha256_file((fs::path(gen_out) / "manifest.json").string())}};
        if (!g.json) {
            out << "wrote " << r.manifest.tracks.size() << " tracks to " << gen_out << " (split " << n[0] << '/' << n[1]
                << '/' << n[2] << ")\n";
            for (const auto& sk : r.skipped) std::cerr << "skipped: " << sk << '\n';
        }
        if (!r.skipped.empty()) {
            if (g.json) out << summary.dump(2) << '\n';
            return 1;
        }
    } else if (*tr || *ft) {
        RunSettings s = base_settings(g);
        if (train_epochs) s.train.max_epochs = *train_epochs;
        if (train_lr) s.train.optimizer.learning_rate = *train_lr;
        s.train.validate();
        const bool verbose = !train_quiet && !g.json;
        summary = s.model.dtype == DType::F64
                      ? train_command<double>(s, train_data, train_from, train_out, cache.get(), verbose)
                      : train_command<float>(s, train_data, train_from, train_out, cache.get(), verbose);
        if (!g.json)
            out << "best frame F1 " << summary["best_frame_f1"].get<double>() << " at epoch "
                << summary["best_epoch"].get<std::uint32_t>() << "; checkpoints in " << train_out << '\n';
    } else if (*ev) {
        RunSettings s = base_settings(g);
        const auto ckpt = load_checkpoint_file<double>(ev_model);
        const Aggregation mode = ev_pooled ? Aggregation::Pooled : Aggregation::MeanOfTracks;
        std::vector<TrackScores> all;
        summary["model"] = ev_model;
        summary["split"] = ev_split;
        for (const auto& d : ev_data) {
            const auto tracks = load_tracks(d, ev_split, s.features, cache.get());
            const auto r = evaluate_model(ckpt, tracks, s.train.decode, s.train.tolerances, mode);
            summary["datasets"][d] = {{"tracks", tracks.size()},
                                      {"frame", prf(r.frame)},
                                      {"note", prf(r.note)},
                                      {"note-with-offset", prf(r.note_with_offset)}};
            if (!g.json) {
                out << d << " (" << tracks.size() << " tracks, " << ev_split << ")\n";
                print_prf(out, "  frame", r.frame);
                print_prf(out, "  note", r.note);
                print_prf(out, "  note-with-offset", r.note_with_offset);
            }
            all.insert(all.end(), r.tracks.begin(), r.tracks.end());
        }
        if (!ev_tracks.empty()) {
            std::ofstream f(ev_tracks);
            if (!f) throw IoError("cannot write " + ev_tracks);
            write_track_scores_csv(all, f);
        }
    } else if (*dec) {
        RunSettings s = base_settings(g);
        if (dec_threshold) s.train.decode.threshold = *dec_threshold;
        validate(s.train.decode);
        const auto ckpt = load_checkpoint_file<double>(dec_model);
        const AudioBuffer audio = read_wav_file(dec_in);
        const Spectrogram sg = compute_features(audio, s.features, cache.get());
        if (sg.bins() != ckpt.config.input_bins)
            throw ArgumentError("features have " + std::to_string(sg.bins()) + " bins, model expects " +
                                std::to_string(ckpt.config.input_bins));
        const PianoRoll probs = predict(ckpt.config, ckpt.params, sg.matrix, sg.frame_period_sec);
        NoteTrack notes = decode_frames(probs, s.train.decode);
        notes.set_id(fs::path(dec_in).stem().string());
        if (dec_out.empty()) {
            if (!g.json) write_note_csv(notes, out);
        } else {
            std::ofstream f(dec_out);
            if (!f) throw IoError("cannot write " + dec_out);
            write_note_csv(notes, f);
            if (!g.json) out << "wrote " << notes.size() << " notes to " << dec_out << '\n';
        }
        summary = {{"notes", notes.size()}, {"frames", sg.frames()}};
        if (!dec_out.empty()) summary["output"] = dec_out;
    } else if (*sc) {
        RunSettings s = base_settings(g);
        const NoteTrack ref = read_labels(sc_ref);
        const NoteTrack est = read_labels(sc_est);
        const auto& tol = s.train.tolerances;
        const PRFScore note = note_metrics(ref, est, tol, MatchMode::Onset);
        const PRFScore off = note_metrics(ref, est, tol, MatchMode::OnsetOffset);
        const double period = double(s.features.cqt.hop_samples) / s.synth.sample_rate_hz;
        PianoRoll r = rasterize(ref, period), e = rasterize(est, period);
        const Eigen::Index frames = std::max(r.frames(), e.frames());
        r.matrix.conservativeResizeLike(Eigen::MatrixXd::Zero(frames, r.pitches()));
        e.matrix.conservativeResizeLike(Eigen::MatrixXd::Zero(frames, e.pitches()));
        const PRFScore frame = frame_metrics(r, e);
        summary = {{"frame", prf(frame)}, {"note", prf(note)}, {"note-with-offset", prf(off)}};
        if (!g.json) {
            print_prf(out, "frame", frame);
            print_prf(out, "note", note);
            print_prf(out, "note-with-offset", off);
        }
    } else if (*plan_run) {
        ExperimentPlan p = load_plan_file(plan_file);
        PlanRunOptions o;
        o.verbose = !plan_quiet && !g.json;
        if (!g.cache_dir.empty()) o.cache_dir = g.cache_dir;
        const auto outcomes = run_plan(p, o);
        bool failed = false;
        summary["out_dir"] = p.out_dir.string();
        summary["stages"] = json::array();
        for (const auto& st : outcomes) {
            failed = failed || st.failed;
            summary["stages"].push_back(
                {{"name", st.name}, {"skipped", st.skipped}, {"failed", st.failed}, {"message", st.message}});
        }
        if (!g.json) {
            std::ifstream table(p.out_dir / "results.txt");
            out << table.rdbuf();
            std::ifstream cmp(p.out_dir / "comparison.csv");
            out << '\n' << cmp.rdbuf();
        }
        if (failed) {
            if (g.json) out << summary.dump(2) << '\n';
            return 1;
        }
    }
    if (g.json) out << summary.dump(2) << '\n';
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    try {
        return run(argc, argv);
    } catch (const amt::IoError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    } catch (const std::filesystem::filesystem_error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
}
