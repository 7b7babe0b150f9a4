#include "amt/digest.hpp"
#include "amt/errors.hpp"
#include "amt/experiments.hpp"

#include <doctest.h>

#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>

#include <unistd.h>

using namespace amt;

namespace {

fs::path scratch_dir(const std::string& name) {
    const auto d = fs::temp_directory_path() / ("amt-test-" + std::to_string(::getpid())) / name;
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
}

RandomTrackRecipe small_recipe(int tracks = 3) {
    RandomTrackRecipe r;
    r.n_tracks = tracks;
    r.notes_min = 3;
    r.notes_max = 6;
    r.duration_min_sec = 1.0;
    r.duration_max_sec = 1.5;
    r.seed = 4;
    return r;
}

DatasetSpec small_spec(int tracks = 3) {
    DatasetSpec d;
    d.name = "tiny";
    d.recipe = small_recipe(tracks);
    d.synth = desk_scale_settings().synth;
    return d;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream s;
    s << in.rdbuf();
    return s.str();
}

void spit(const fs::path& p, const std::string& text) {
    std::ofstream out(p, std::ios::binary);
    out << text;
}

std::string cli() {
    const char* p = std::getenv("AMT_CLI");
    return p ? p : "";
}

int run(const std::string& args, const fs::path& out_file = {}) {
    std::string cmd = cli() + " " + args;
    cmd += out_file.empty() ? " >/dev/null 2>&1" : " >" + out_file.string() + " 2>&1";
    const int rc = std::system(cmd.c_str());
    return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

}  // namespace

TEST_CASE("generated tracks respect the recipe") {
    RandomTrackRecipe r = small_recipe(20);
    r.notes_min = 10;
    r.notes_max = 20;
    r.duration_min_sec = 4;
    r.duration_max_sec = 6;
    const auto tracks = generate_tracks(r, "x");
    REQUIRE(tracks.size() == 20);
    CHECK(tracks[0].id() == "x000");
    CHECK(tracks == generate_tracks(r, "x"));
    r.seed = 5;
    CHECK_FALSE(tracks == generate_tracks(r, "x"));
    r.seed = 4;
    for (const auto& t : tracks) {
        CHECK(t.size() <= std::size_t(r.notes_max));
        std::map<int, double> last_off;
        for (const auto& e : t.events()) {
            CHECK(e.pitch >= r.pitch_lo);
            CHECK(e.pitch <= r.pitch_hi);
            CHECK(e.offset_sec - e.onset_sec >= r.min_note_sec - 1e-12);
            CHECK(e.offset_sec <= t.duration_sec() + 1e-9);
            if (last_off.count(e.pitch)) CHECK(e.onset_sec - last_off[e.pitch] >= r.min_gap_sec - 1e-12);
            last_off[e.pitch] = std::max(last_off[e.pitch], e.offset_sec);
            int sounding = 0;
            for (const auto& o : t.events())
                if (o.onset_sec <= e.onset_sec && e.onset_sec < o.offset_sec) ++sounding;
            CHECK(sounding <= r.polyphony_cap);
        }
        CHECK(roundtrip_check(t).f1 == 1.0);
    }
    r.notes_min = r.notes_max + 1;
    CHECK_THROWS_AS(r.validate(), ConfigError);
}

TEST_CASE("dataset generation: manifest, splits, regeneration, labels as predictions") {
    const auto dir = scratch_dir("gen");
    SpectrogramCache cache(dir / "cache");
    auto spec = small_spec(10);
    const auto rep = generate_dataset(spec, dir / "a", &cache);
    CHECK(rep.skipped.empty());
    REQUIRE(rep.manifest.tracks.size() == 10);
    std::map<std::string, int> counts;
    for (const auto& e : rep.manifest.tracks) {
        ++counts[e.split];
        CHECK(sha256_file((dir / "a" / e.audio).string()) == e.audio_sha256);
        CHECK(sha256_file((dir / "a" / e.labels).string()) == e.labels_sha256);
    }
    CHECK(counts["train"] == 8);
    CHECK(counts["valid"] == 1);
    CHECK(counts["test"] == 1);

    const auto back = read_manifest_file(dir / "a" / "manifest.json");
    std::ostringstream x, y;
    write_manifest(rep.manifest, x);
    write_manifest(back, y);
    CHECK(x.str() == y.str());

    generate_dataset(spec, dir / "b", nullptr);
    for (const auto& e : rep.manifest.tracks) {
        CHECK(slurp(dir / "a" / e.audio) == slurp(dir / "b" / e.audio));
        CHECK(slurp(dir / "a" / e.labels) == slurp(dir / "b" / e.labels));
    }
    CHECK(slurp(dir / "a" / "manifest.json") == slurp(dir / "b" / "manifest.json"));

    const auto all = load_tracks(dir / "a", "all", spec.features, &cache);
    CHECK(all.size() == 10);
    CHECK(all[0].id.rfind("tiny/", 0) == 0);
    for (const auto& t : all) {
        CHECK(t.features.cols() == spec.features.cqt.n_bins);
        const auto s = score_prediction(t, t.roll, {}, {});
        CHECK(s.frame.f1 == 1.0);
        CHECK(s.note.f1 == 1.0);
    }
    const auto split = load_data_split({dir / "a"}, spec.features, &cache);
    CHECK(split.train.size() == 8);
    CHECK(split.valid.size() == 1);
    CHECK_THROWS_AS(load_tracks(dir / "a", "bogus", spec.features, &cache), ArgumentError);

    std::istringstream bad(R"({"format":"something-else","version":1})");
    CHECK_THROWS_AS(read_manifest(bad), FormatError);
}

TEST_CASE("dataset from label files skips unmatched audio") {
    const auto dir = scratch_dir("labels");
    fs::create_directories(dir / "labels");
    fs::create_directories(dir / "wavs");
    const auto tracks = generate_tracks(small_recipe(4), "t");
    const auto synth = desk_scale_settings().synth;
    for (const auto& t : tracks) {
        std::ofstream out(dir / "labels" / (t.id() + ".csv"));
        write_note_csv(t, out);
    }
    for (std::size_t i = 0; i < 3; ++i) write_wav_file(render(tracks[i], synth), (dir / "wavs" / (tracks[i].id() + ".wav")).string());
    const auto rep = generate_dataset_from_labels("ext", dir / "labels", dir / "wavs", synth, {}, 1, dir / "out", nullptr);
    REQUIRE(rep.skipped.size() == 1);
    CHECK(rep.skipped[0].rfind("t003 ", 0) == 0);
    CHECK(rep.manifest.tracks.size() == 3);
    CHECK(rep.manifest.timbre == "external");
}

TEST_CASE("settings files") {
    const auto base = desk_scale_settings();
    const auto s = parse_settings("[model]\nrnn_hidden = 8\ndtype = f64\n[train]\nmax_epochs = 7\n", base);
    CHECK(s.model.rnn_hidden == 8);
    CHECK(s.model.dtype == DType::F64);
    CHECK(s.train.max_epochs == 7);
    CHECK(s.train.batch_size == base.train.batch_size);
    CHECK_THROWS_WITH_AS(parse_settings("[model]\nwidth = 3\n", base), doctest::Contains("width"), ConfigError);
    CHECK_THROWS_AS(parse_settings("[nonsense]\na = 1\n", base), ConfigError);
    CHECK_THROWS_AS(parse_settings("[train]\nlearning_rate = fast\n", base), ConfigError);
    CHECK_THROWS_AS(parse_settings("[features]\nn_bins = 80\n", base), ConfigError);
    CHECK_THROWS_AS(parse_settings("[train]\nbatch_size = 0\n", base), ConfigError);
}

TEST_CASE("plan parsing, references and ordering") {
    const std::string text = R"(
[plan]
name = p
[dataset.A]
timbre = piano-like
tracks = 3
[dataset.B]
timbre = guitar-like
tracks = 3
[stage.ft]
kind = transfer-train
data = A
from = mix
[stage.mix]
kind = train
data = A B
train.max_epochs = 3
[stage.eval]
kind = evaluate
data = B
from = ft
)";
    const auto plan = parse_plan(text, "/tmp");
    CHECK(plan.name == "p");
    CHECK(plan.datasets.size() == 2);
    CHECK(plan.stages.size() == 5);
    const auto order = plan.topological_order();
    std::map<std::string, std::size_t> pos;
    for (std::size_t i = 0; i < order.size(); ++i) pos[order[i]->name] = i;
    CHECK(pos["generate-A"] < pos["mix"]);
    CHECK(pos["generate-B"] < pos["mix"]);
    CHECK(pos["mix"] < pos["ft"]);
    CHECK(pos["ft"] < pos["eval"]);
    for (const auto* s : order)
        if (s->name == "mix") CHECK(s->settings.train.max_epochs == 3);

    CHECK_THROWS_AS(parse_plan("[stage.x]\nkind = train\ndata = Z\n", "/tmp"), ConfigError);
    CHECK_THROWS_AS(parse_plan("[dataset.A]\n[stage.x]\nkind = transfer-train\ndata = A\nfrom = nope\n", "/tmp"), ConfigError);
    CHECK_THROWS_AS(parse_plan("[dataset.A]\n[stage.x]\nkind = dance\ndata = A\n", "/tmp"), ConfigError);
    CHECK_THROWS_AS(parse_plan("[dataset.A]\nbogus = 1\n", "/tmp"), ConfigError);

    ExperimentPlan cyc;
    cyc.datasets["A"] = small_spec();
    Stage a, b;
    a.name = "a";
    a.kind = b.kind = StageKind::TransferTrain;
    a.datasets = b.datasets = {"A"};
    b.name = "b";
    a.from = "b";
    b.from = "a";
    Stage g;
    g.name = "generate-A";
    g.datasets = {"A"};
    cyc.stages = {g, a, b};
    CHECK_THROWS_WITH_AS(cyc.topological_order(), doctest::Contains("cycle"), ConfigError);
}

TEST_CASE("plan execution is idempotent") {
    const auto dir = scratch_dir("plan");
    spit(dir / "plan.ini", R"(
[plan]
name = tiny
out_dir = out
[model]
unet_levels = 1
base_channels = 2
rnn_hidden = 4
[train]
max_epochs = 2
validate_every = 1
steps_per_epoch = 1
batch_size = 1
sequence_len_samples = 5120
[recipe]
tracks = 3
notes = 3 5
duration = 1 1.5
[dataset.A]
timbre = piano-like
[stage.scratch]
kind = train
data = A
[stage.ft]
kind = transfer-train
data = A
from = scratch
[stage.eval]
kind = evaluate
data = A
from = scratch
[compare.c]
pretrained = scratch
finetuned = ft
scratch = scratch
target = A
)");
    const auto plan = load_plan_file(dir / "plan.ini");
    std::ostringstream log;
    PlanRunOptions opt;
    opt.log = &log;
    const auto first = run_plan(plan, opt);
    REQUIRE(first.size() == 4);
    for (const auto& o : first) {
        INFO(o.name, ": ", o.message);
        CHECK_FALSE(o.failed);
        CHECK_FALSE(o.skipped);
    }
    const auto out = dir / "out";
    for (const char* f : {"results.csv", "results.txt", "comparison.csv", "models/scratch/best.amtf",
                          "evals/eval/summary.json", "stamps/scratch.json"})
        CHECK(fs::exists(out / f));
    CHECK(slurp(out / "results.csv").rfind("model,dataset,metric,P,R,F1", 0) == 0);
    const std::string best = slurp(out / "models/scratch/best.amtf");

    const auto second = run_plan(plan, opt);
    for (const auto& o : second) CHECK(o.skipped);
    CHECK(slurp(out / "models/scratch/best.amtf") == best);

    fs::remove(out / "evals/eval/tracks.csv");
    const auto third = run_plan(plan, opt);
    for (const auto& o : third) CHECK(o.skipped == (o.name != "eval"));
    CHECK(fs::exists(out / "evals/eval/tracks.csv"));
}

TEST_CASE("command line") {
    if (cli().empty()) return;
    const auto dir = scratch_dir("cli");
    spit(dir / "a.csv", "onset,offset,pitch,velocity\n0.1,0.5,60,100\n0.5,0.9,64,90\n");
    CHECK(run("score " + (dir / "a.csv").string() + " " + (dir / "a.csv").string(), dir / "score.txt") == 0);
    const std::string score = slurp(dir / "score.txt");
    const auto note_line = score.find("\nnote ");
    REQUIRE(note_line != std::string::npos);
    CHECK(score.substr(note_line, score.find('\n', note_line + 1) - note_line).find("F1 1.0000") != std::string::npos);
    CHECK(run("--json score " + (dir / "a.csv").string() + " " + (dir / "a.csv").string(), dir / "score.json") == 0);
    CHECK(slurp(dir / "score.json").find("\"note\"") != std::string::npos);

    CHECK(run("train --data " + (dir / "missing").string() + " -o " + (dir / "m").string()) == 2);
    CHECK(run("score --no-such-flag a b") == 1);
    CHECK(run("") == 1);
    spit(dir / "broken.csv", "0.5,0.1,60,100\n");
    CHECK(run("score " + (dir / "broken.csv").string() + " " + (dir / "a.csv").string()) == 1);

    CHECK(run("synth " + (dir / "a.csv").string() + " -o " + (dir / "a.wav").string()) == 0);
    CHECK(run("--deterministic synth --noise 0.01 " + (dir / "a.csv").string() + " -o " + (dir / "b.wav").string()) == 0);
    CHECK(run("--deterministic synth --noise 0.01 " + (dir / "a.csv").string() + " -o " + (dir / "c.wav").string()) == 0);
    CHECK(sha256_file((dir / "b.wav").string()) == sha256_file((dir / "c.wav").string()));
    CHECK(run("spectrogram " + (dir / "a.wav").string() + " -o " + (dir / "a_spec.csv").string()) == 0);
    CHECK(slurp(dir / "a_spec.csv").rfind("time_sec,", 0) == 0);

    fs::create_directories(dir / "lab");
    fs::create_directories(dir / "wav");
    fs::copy_file(dir / "a.csv", dir / "lab" / "a.csv");
    fs::copy_file(dir / "a.csv", dir / "lab" / "b.csv");
    fs::copy_file(dir / "a.csv", dir / "lab" / "c.csv");
    fs::copy_file(dir / "a.wav", dir / "wav" / "a.wav");
    CHECK(run("generate --labels " + (dir / "lab").string() + " --wav-dir " + (dir / "wav").string() + " -o " +
              (dir / "gen").string()) != 0);
}
