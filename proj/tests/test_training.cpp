#include "amt/errors.hpp"
#include "amt/training.hpp"

#include <doctest.h>

#include <cmath>
#include <sstream>

using namespace amt;

namespace {

ModelConfig small_model(int pitches = 3) {
    ModelConfig c;
    c.input_bins = 12;
    c.unet_levels = 1;
    c.base_channels = 2;
    c.rnn_hidden = 6;
    c.output_pitches = pitches;
    c.dtype = DType::F64;
    return c;
}

// A track whose features light up bins 3p..3p+2 for active pitch p, plus noise.
LabeledTrack toy_track(Rng& rng, const std::string& id, double seconds = 0.6) {
    std::vector<NoteEvent> ev;
    for (int p = 0; p < 3; ++p) {
        double t = uniform_real(rng, 0, 0.1);
        while (t + 0.05 < seconds) {
            const double len = uniform_real(rng, 0.05, 0.2);
            if (uniform_unit(rng) < 0.6) ev.push_back({60 + p, 100, t, std::min(seconds, t + len)});
            t += len + uniform_real(rng, 0.03, 0.1);
        }
    }
    NoteTrack notes(ev, id, seconds);
    const auto roll = rasterize(notes, 0.01, 60, 3);
    Eigen::MatrixXd f(roll.frames(), 12);
    for (Eigen::Index t = 0; t < f.rows(); ++t)
        for (int b = 0; b < 12; ++b) f(t, b) = 0.1 * uniform_unit(rng) + (b / 3 < 3 ? roll.matrix(t, b / 3) : 0.0);
    return make_labeled_track(id, f, notes, 0.01, 60, 3);
}

DataSplit toy_data(std::uint64_t seed, int n_train = 12, int n_valid = 3) {
    Rng rng(seed);
    DataSplit d;
    for (int i = 0; i < n_train; ++i) d.train.push_back(toy_track(rng, "tr" + std::to_string(i)));
    for (int i = 0; i < n_valid; ++i) d.valid.push_back(toy_track(rng, "va" + std::to_string(i)));
    return d;
}

TrainConfig toy_config() {
    TrainConfig t;
    t.sequence_len_samples = 160 * 32;
    t.batch_size = 2;
    t.max_epochs = 6;
    t.validate_every_epochs = 2;
    t.steps_per_epoch = 3;
    t.optimizer.learning_rate = 1e-2;
    t.seed = 5;
    t.tag = "toy";
    return t;
}

}  // namespace

TEST_CASE("bce: closed-form values and a direct oracle") {
    Mat<double> z = Mat<double>::Zero(3, 4), y = Mat<double>::Zero(3, 4), dz;
    y(1, 2) = 1;
    CHECK(bce_loss<double>(z, y, dz) == doctest::Approx(std::log(2.0)).epsilon(1e-15));
    Mat<double> one_z = Mat<double>::Zero(1, 1), one_y = Mat<double>::Ones(1, 1), g;
    bce_loss<double>(one_z, one_y, g);
    CHECK(g(0, 0) == -0.5);
    one_z(0, 0) = 800;
    CHECK(bce_loss<double>(one_z, one_y, g) < 1e-300);
    one_z(0, 0) = -800;
    CHECK(bce_loss<double>(one_z, one_y, g) == doctest::Approx(800));

    Rng rng(1);
    Mat<double> zr(5, 6), yr(5, 6);
    for (Eigen::Index i = 0; i < zr.size(); ++i) {
        zr.data()[i] = uniform_real(rng, -6, 6);
        yr.data()[i] = uniform_unit(rng) < 0.5;
    }
    long double ref = 0;
    for (Eigen::Index i = 0; i < zr.size(); ++i) {
        const long double s = 1.0L / (1.0L + std::exp(-(long double)zr.data()[i]));
        ref -= yr.data()[i] ? std::log(s) : std::log(1 - s);
    }
    ref /= zr.size();
    Mat<double> dr;
    CHECK(bce_loss<double>(zr, yr, dr) == doctest::Approx(double(ref)).epsilon(1e-13));
    for (Eigen::Index i = 0; i < zr.size(); ++i)
        CHECK(dr.data()[i] == doctest::Approx((1 / (1 + std::exp(-zr.data()[i])) - yr.data()[i]) / 30).epsilon(1e-12));
    Mat<double> wrong = Mat<double>::Zero(2, 2);
    CHECK_THROWS_AS(bce_loss<double>(zr, wrong, dr), ArgumentError);
}

TEST_CASE("sample_segment: exact fit, alignment, padding") {
    Rng rng(3);
    Eigen::MatrixXd f = Eigen::MatrixXd::Random(50, 4), r = (Eigen::MatrixXd::Random(50, 3).array() > 0).cast<double>();
    for (int i = 0; i < 20; ++i) CHECK(sample_segment(f, r, 50, rng).start == 0);
    for (int i = 0; i < 50; ++i) {
        const auto s = sample_segment(f, r, 16, rng);
        REQUIRE(s.start >= 0);
        REQUIRE(s.start <= 34);
        CHECK(s.input == f.middleRows(s.start, 16));
        CHECK(s.target == r.middleRows(s.start, 16));
    }
    const auto p = sample_segment(f, r, 64, rng);
    CHECK(p.input.rows() == 64);
    CHECK(p.input.topRows(50) == f);
    CHECK(p.input.bottomRows(14).cwiseAbs().maxCoeff() == 0.0);
    CHECK(p.target.bottomRows(14).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("optimizer: GD closed form, Adam first step, zero gradient, non-finite gradient") {
    ParameterSet<double> p, g;
    p["w"] = Tensor<double>::zeros({2});
    g["w"] = Tensor<double>::zeros({2});
    p["w"].values << 1.0, -3.0;
    g["w"].values << 2.0, 0.0;
    OptimizerConfig gd;
    gd.method = OptimizerMethod::GradientDescent;
    gd.learning_rate = 0.1;
    OptimizerState<double> s;
    optimizer_step(s, p, g, gd);
    CHECK(p["w"].values[0] == doctest::Approx(0.8));
    CHECK(p["w"].values[1] == -3.0);

    ParameterSet<double> q = p;
    g["w"].values << 1.0, 0.0;
    OptimizerConfig adam;
    OptimizerState<double> sa;
    optimizer_step(sa, q, g, adam);
    // t = 1: m_hat = g, v_hat = g^2, so the step is lr * 1 / (1 + eps).
    CHECK(p["w"].values[0] - q["w"].values[0] == doctest::Approx(1e-3 / (1 + 1e-8)).epsilon(1e-9));
    CHECK(q["w"].values[1] == p["w"].values[1]);

    g["w"].values[0] = std::nan("");
    CHECK_THROWS_AS(optimizer_step(sa, q, g, adam), ValidationError);
    CHECK(parse_optimizer("adam") == OptimizerMethod::Adam);
    CHECK(parse_optimizer("sgd") == OptimizerMethod::GradientDescent);
    CHECK_THROWS(parse_optimizer("lbfgs"));
}

TEST_CASE("optimizer: GD step lowers a quadratic") {
    ParameterSet<double> p, g;
    p["x"] = Tensor<double>::zeros({3});
    p["x"].values << 1, -2, 0.5;
    auto loss = [](const ParameterSet<double>& q) { return q.at("x").values.squaredNorm(); };
    g["x"] = p["x"];
    g["x"].values *= 2;
    OptimizerConfig c;
    c.method = OptimizerMethod::GradientDescent;
    c.learning_rate = 0.01;
    OptimizerState<double> s;
    const double before = loss(p);
    optimizer_step(s, p, g, c);
    CHECK(loss(p) < before);
}

TEST_CASE("train config validation") {
    TrainConfig t;
    CHECK_NOTHROW(t.validate());
    t.sequence_len_samples = 1001;
    CHECK_THROWS_AS(t.validate(), ValidationError);
    t = TrainConfig{};
    t.batch_size = 0;
    CHECK_THROWS_AS(t.validate(), ValidationError);
    CHECK(TrainConfig{}.window_frames() == 2048);
}

TEST_CASE("train: determinism, cadence, best checkpoint, loss decreases") {
    const auto data = toy_data(1);
    const auto model = small_model();
    auto cfg = toy_config();
    const auto a = train<double>(model, init_params<double>(model, 2), data, cfg);
    const auto b = train<double>(model, init_params<double>(model, 2), data, cfg);
    CHECK(a.report == b.report);
    CHECK(a.final_checkpoint.params == b.final_checkpoint.params);
    REQUIRE(a.report.records.size() == 3);
    CHECK(a.report.records[0].epoch == 2);
    CHECK(a.report.records[2].epoch == 6);
    CHECK(a.report.train_loss.size() == 6);
    CHECK(a.report.epoch_seconds.size() == 6);
    CHECK(a.final_checkpoint.meta.epoch == 6);
    CHECK(a.final_checkpoint.meta.source_tag == "toy/final");
    CHECK(a.best_checkpoint.meta.source_tag == "toy/best");
    double best = -1;
    std::uint32_t best_epoch = 0;
    for (const auto& r : a.report.records)
        if (r.frame.f1 > best) {
            best = r.frame.f1;
            best_epoch = r.epoch;
        }
    CHECK(a.best_checkpoint.meta.epoch == best_epoch);

    cfg.validate_every_epochs = 100;
    const auto c = train<double>(model, init_params<double>(model, 2), data, cfg);
    REQUIRE(c.report.records.size() == 1);
    CHECK(c.report.records[0].epoch == 6);

    std::ostringstream csv;
    write_train_report_csv(a.report, csv);
    CHECK(csv.str().rfind("epoch,loss,frame_P,frame_R,frame_F1,note_P,note_R,note_F1\n", 0) == 0);

    auto longer = toy_config();
    longer.max_epochs = 50;
    longer.validate_every_epochs = 50;
    longer.steps_per_epoch = 2;
    const auto l = train<double>(model, init_params<double>(model, 4), data, longer);
    CHECK(l.report.train_loss.back() < l.report.train_loss.front());
}

TEST_CASE("train: lr 0 fine-tuning keeps weights bit-identical") {
    const auto data = toy_data(2);
    const auto model = small_model();
    auto cfg = toy_config();
    cfg.max_epochs = 2;
    const auto first = train<double>(model, init_params<double>(model, 1), data, cfg);
    cfg.optimizer.learning_rate = 0;
    const auto tuned = train<double>(model, transfer_init(first.final_checkpoint, model), data, cfg);
    CHECK(tuned.final_checkpoint.params == first.final_checkpoint.params);
}

TEST_CASE("train: divergence reports the last good checkpoint") {
    auto data = toy_data(3);
    for (auto& t : data.train) t.features(0, 0) = std::numeric_limits<double>::infinity();
    const auto model = small_model();
    auto cfg = toy_config();
    cfg.sequence_len_samples = 160 * 128;  // every window covers frame 0
    try {
        train<double>(model, init_params<double>(model, 1), data, cfg);
        FAIL("expected divergence");
    } catch (const TrainingDiverged<double>& e) {
        CHECK(e.batch_id() == 0);
        CHECK(e.last_good().params == init_params<double>(model, 1));
        CHECK(e.last_good().meta.source_tag == "toy/last-good");
    }
}

TEST_CASE("transfer_init: copy, mismatch report, zero-shot equality") {
    const auto model = small_model();
    Checkpoint<double> src;
    src.config = model;
    src.params = init_params<double>(model, 7);
    CHECK(transfer_init(src, model) == src.params);
    auto other = model;
    other.rnn_hidden = 5;
    try {
        transfer_init(src, other);
        FAIL("expected mismatch");
    } catch (const ValidationError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("rnn.fwd.w_hh") != std::string::npos);
        CHECK(msg.find("rnn.bwd.w_ih") != std::string::npos);
        CHECK(msg.find("head.weight") != std::string::npos);
    }
    const auto data = toy_data(4, 1, 3);
    const auto copy = transfer_init(src, model);
    const auto s1 = evaluate_tracks(model, src.params, data.valid);
    const auto s2 = evaluate_tracks(model, copy, data.valid);
    for (std::size_t i = 0; i < s1.size(); ++i) {
        CHECK(s1[i].frame.f1 == s2[i].frame.f1);
        CHECK(s1[i].note.f1 == s2[i].note.f1);
    }
}

TEST_CASE("epochs to threshold") {
    TrainReport r;
    for (std::uint32_t e : {10u, 20u, 30u}) {
        ValidationRecord v;
        v.epoch = e;
        v.frame.f1 = e / 40.0;
        r.records.push_back(v);
    }
    CHECK(epochs_to_threshold(r, 0.5) == 20u);
    CHECK(epochs_to_threshold(r, 0.25) == 10u);
    CHECK_FALSE(epochs_to_threshold(r, 0.9));
}

TEST_CASE("scratch init starts the head bias at the smoothed label log-odds") {
    const auto model = small_model();
    LabeledTrack t;
    t.id = "t";
    t.features = Eigen::MatrixXd::Zero(10, 12);
    t.roll.pitch_min = 60;
    t.roll.matrix = Eigen::MatrixXd::Zero(10, 3);
    t.roll.matrix.col(0).head(4).setOnes();
    const auto p = scratch_params<double>(model, 7, {t});
    auto q = init_params<double>(model, 7);
    CHECK(p.at("head.bias").values[0] == doctest::Approx(std::log(5.0 / 7.0)));
    CHECK(p.at("head.bias").values[1] == doctest::Approx(std::log(1.0 / 11.0)));
    q["head.bias"] = p.at("head.bias");
    CHECK(p == q);
    t.roll.matrix = Eigen::MatrixXd::Zero(10, 4);
    CHECK_THROWS_AS(scratch_params<double>(model, 7, {t}), ArgumentError);
}
