#include "amt/errors.hpp"
#include "amt/network.hpp"
#include "amt/training.hpp"

#include <doctest.h>

#include <cmath>
#include <sstream>

using namespace amt;

namespace {

ModelConfig toy(int bins = 12, int levels = 2) {
    ModelConfig c;
    c.input_bins = bins;
    c.unet_levels = levels;
    c.base_channels = 2;
    c.rnn_hidden = 3;
    c.output_pitches = 5;
    c.dtype = DType::F64;
    return c;
}

Mat<double> random_matrix(Rng& rng, Eigen::Index r, Eigen::Index c, double lo = -1, double hi = 1) {
    Mat<double> m(r, c);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = uniform_real(rng, lo, hi);
    return m;
}

std::string saved(const Checkpoint<double>& c) {
    std::ostringstream s;
    save_checkpoint(c, s);
    return s.str();
}

double grad_norm(const ParameterSet<double>& g) {
    double s = 0;
    for (const auto& [n, t] : g) s += t.values.squaredNorm();
    return std::sqrt(s);
}

}  // namespace

TEST_CASE("init: deterministic, zero biases, inside the bound") {
    const auto c = toy();
    const auto a = init_params<double>(c, 42);
    const auto b = init_params<double>(c, 42);
    CHECK(a == b);
    CHECK_FALSE(a == init_params<double>(c, 43));
    for (const auto& [name, t] : a) {
        const double bound = init_bound(c, name);
        if (t.dims.size() == 1) {
            CHECK(t.values.cwiseAbs().maxCoeff() == 0.0);
        } else {
            CHECK(t.values.cwiseAbs().maxCoeff() < bound);
        }
    }
    CHECK(init_bound(c, "head.weight") == doctest::Approx(std::sqrt(6.0 / (6 + 5))));
    CHECK(init_bound(c, "unet.enc0.conv1.weight") == doctest::Approx(std::sqrt(6.0 / (9 * 1 + 2 * 9))));
    CHECK_THROWS_AS(ModelConfig{0}.validate(), ConfigError);
}

TEST_CASE("forward: shapes, zeros, bin mismatch") {
    ModelConfig c;
    c.unet_levels = 2;
    c.base_channels = 2;
    c.rnn_hidden = 4;
    const auto zero = zero_params<float>(c);
    const auto out = forward<float>(c, zero, Mat<float>::Zero(64, 88));
    CHECK(out.rows() == 64);
    CHECK(out.cols() == 88);
    CHECK(out.cwiseAbs().maxCoeff() == 0.0f);

    const auto p = init_params<float>(c, 1);
    for (int frames : {1, 3, 17, 30}) {
        Rng rng(frames);
        const auto y = forward<float>(c, p, random_matrix(rng, frames, 88).cast<float>());
        CHECK(y.rows() == frames);
        CHECK(y.allFinite());
    }
    CHECK(forward<float>(c, p, Mat<float>::Zero(0, 88)).rows() == 0);
    CHECK_THROWS_AS(forward<float>(c, p, Mat<float>::Zero(8, 87)), ArgumentError);
}

TEST_CASE("forward: palindromic input and time-symmetric parameters give a palindromic output") {
    const auto c = toy(12, 2);
    auto p = init_params<double>(c, 5);
    Rng rng(9);
    for (auto& [name, t] : p) {
        if (t.dims.size() == 1)
            for (Eigen::Index i = 0; i < t.size(); ++i) t.values[i] = uniform_real(rng, -0.2, 0.2);
        if (t.dims.size() != 4) continue;
        const auto co = t.dims[0], k = t.dims[1], ci = t.dims[3];
        auto at = [&](std::int64_t o, std::int64_t a, std::int64_t b, std::int64_t i) -> double& {
            return t.values[((o * k + a) * k + b) * ci + i];
        };
        for (std::int64_t o = 0; o < co; ++o)
            for (std::int64_t a = 0; a < k; ++a)
                for (std::int64_t b = 0; b < k; ++b)
                    for (std::int64_t i = 0; i < ci; ++i) at(o, k - 1 - a, b, i) = at(o, a, b, i);
    }
    for (const char* part : {".w_ih", ".w_hh", ".bias"}) p[std::string("rnn.bwd") + part] = p[std::string("rnn.fwd") + part];
    auto head = p["head.weight"].as_matrix();
    head.rightCols(3) = head.leftCols(3).eval();

    Mat<double> x = random_matrix(rng, 16, 12);
    for (int t = 0; t < 8; ++t) x.row(15 - t) = x.row(t);
    const auto y = forward<double>(c, p, x);
    CHECK(y.cwiseAbs().maxCoeff() > 1e-3);
    CHECK((y - y.colwise().reverse()).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("gradient: finite-difference agreement on small configs") {
    for (int seed = 0; seed < 3; ++seed) {
        Rng rng(200 + seed);
        ModelConfig c = toy(8 + 2 * seed, 1 + seed % 2);
        auto p = init_params<double>(c, seed);
        for (auto& [n, t] : p)
            if (t.dims.size() == 1)
                for (Eigen::Index i = 0; i < t.size(); ++i) t.values[i] = uniform_real(rng, -0.1, 0.1);
        std::vector<Mat<double>> in, tg;
        for (int b = 0; b < 2; ++b) {
            in.push_back(random_matrix(rng, 8, c.input_bins));
            Mat<double> y(8, c.output_pitches);
            for (Eigen::Index i = 0; i < y.size(); ++i) y.data()[i] = uniform_unit(rng) < 0.3;
            tg.push_back(y);
        }
        const auto r = gradient_check(c, p, in, tg);
        INFO("seed ", seed, " worst ", r.worst_parameter);
        CHECK(r.checked == parameter_count(p));
        CHECK(r.max_relative_error < 1e-6);
    }
}

TEST_CASE("gradient: stationary point, batch duplication, determinism, non-finite loss") {
    const auto c = toy();
    Rng rng(3);
    auto p = init_params<double>(c, 3);
    const auto loss = bce_loss_function<double>();
    const Mat<double> x = random_matrix(rng, 8, 12);

    auto sat = p;
    sat["head.weight"].values.setZero();
    sat["head.bias"].values << 40, -40, 40, -40, 40;
    Mat<double> t(8, 5);
    t.rowwise() = Eigen::RowVectorXd((Eigen::RowVectorXd(5) << 1, 0, 1, 0, 1).finished());
    const std::vector<Mat<double>> one{x}, tone{t};
    CHECK(grad_norm(gradient<double>(c, sat, one, tone, loss).grads) < 1e-12);

    Mat<double> y(8, 5);
    for (Eigen::Index i = 0; i < y.size(); ++i) y.data()[i] = uniform_unit(rng) < 0.5;
    const Mat<double> x2 = random_matrix(rng, 8, 12);
    const std::vector<Mat<double>> in{x, x2}, tg{t, y};
    const std::vector<Mat<double>> in2{x, x2, x, x2}, tg2{t, y, t, y};
    const auto g1 = gradient<double>(c, p, in, tg, loss);
    const auto g2 = gradient<double>(c, p, in2, tg2, loss);
    CHECK(g1.loss == doctest::Approx(g2.loss).epsilon(1e-14));
    for (const auto& [n, tensor] : g1.grads)
        CHECK((tensor.values - g2.grads.at(n).values).cwiseAbs().maxCoeff() < 1e-14);
    const auto g3 = gradient<double>(c, p, in, tg, loss);
    CHECK(g3.loss == g1.loss);
    CHECK(g3.grads == g1.grads);

    Mat<double> bad = x;
    bad(2, 3) = std::nan("");
    const std::vector<Mat<double>> nan_in{bad};
    try {
        gradient<double>(c, p, nan_in, tone, loss, 17);
        FAIL("expected NonFiniteLoss");
    } catch (const NonFiniteLoss& e) {
        CHECK(e.batch_id() == 17);
    }
}

TEST_CASE("checkpoint: byte-identical round trip and error cases") {
    const auto c = toy();
    Checkpoint<double> ck;
    ck.config = c;
    ck.params = init_params<double>(c, 8);
    ck.meta = {12, 99, "mixed"};
    const std::string a = saved(ck);
    CHECK(a.substr(0, 4) == "AMTF");
    std::istringstream in(a);
    const auto back = load_checkpoint<double>(in);
    CHECK(back.params == ck.params);
    CHECK(back.config == ck.config);
    CHECK(back.meta == ck.meta);
    CHECK(saved(back) == a);

    Checkpoint<float> f;
    f.config = c;
    f.config.dtype = DType::F32;
    f.params = init_params<float>(f.config, 8);
    std::ostringstream fs;
    save_checkpoint(f, fs);
    std::istringstream fin(fs.str());
    const auto fb = load_checkpoint<float>(fin);
    std::ostringstream fs2;
    save_checkpoint(fb, fs2);
    CHECK(fs2.str() == fs.str());

    for (std::size_t cut : {std::size_t(3), std::size_t(20), a.size() / 2, a.size() - 1}) {
        std::istringstream t(a.substr(0, cut));
        CHECK_THROWS_AS(load_checkpoint<double>(t), FormatError);
    }
    std::string bumped = a;
    bumped[4] = 2;
    std::istringstream v(bumped);
    CHECK_THROWS_WITH_AS(load_checkpoint<double>(v), doctest::Contains("unsupported checkpoint version"), FormatError);
    std::string magic = a;
    magic[0] = 'X';
    std::istringstream m(magic);
    CHECK_THROWS_AS(load_checkpoint<double>(m), FormatError);

    // Header claims a wider RNN than the stored tensors.
    std::string wide = a;
    wide[8 + 4 * 4] = 4;
    std::istringstream w(wide);
    CHECK_THROWS_AS(load_checkpoint<double>(w), ValidationError);
}
