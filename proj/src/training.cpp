#include "amt/training.hpp"

#include <chrono>
#include <cmath>
#include <iomanip>
#include <limits>
#include <sstream>
#include <type_traits>

namespace amt {

template <typename Scalar>
Scalar bce_loss(const Mat<Scalar>& logits, const Mat<Scalar>& targets, Mat<Scalar>& dlogits) {
    if (logits.rows() != targets.rows() || logits.cols() != targets.cols())
        throw ArgumentError("loss: logits and targets differ in shape");
    const Eigen::Index count = logits.size();
    dlogits.resize(logits.rows(), logits.cols());
    if (count == 0) return Scalar(0);
    const Scalar inv = Scalar(1) / static_cast<Scalar>(count);
    // Float runs accumulate in double so the sum does not drift with the cell count.
    using Acc = std::common_type_t<Scalar, double>;
    Acc total = 0;
    for (Eigen::Index i = 0; i < count; ++i) {
        const Scalar z = logits.data()[i];
        const Scalar y = targets.data()[i];
        total += Acc(std::max(z, Scalar(0)) - z * y + std::log1p(std::exp(-std::abs(z))));
        const Scalar s = z >= 0 ? Scalar(1) / (Scalar(1) + std::exp(-z)) : std::exp(z) / (Scalar(1) + std::exp(z));
        dlogits.data()[i] = (s - y) * inv;
    }
    return static_cast<Scalar>(total / Acc(count));
}

// ---------------------------------------------------------------------------

LabeledTrack make_labeled_track(std::string id, Eigen::MatrixXd features, const NoteTrack& notes,
                                double frame_period_sec, int pitch_min, int pitch_count) {
    LabeledTrack t;
    t.id = std::move(id);
    t.notes = notes;
    PianoRoll roll = rasterize(notes, frame_period_sec, pitch_min, pitch_count);
    const Eigen::Index frames = features.rows();
    t.roll.frame_period_sec = frame_period_sec;
    t.roll.pitch_min = pitch_min;
    t.roll.matrix = Eigen::MatrixXd::Zero(frames, pitch_count);
    const Eigen::Index keep = std::min(frames, roll.frames());
    t.roll.matrix.topRows(keep) = roll.matrix.topRows(keep);
    t.features = std::move(features);
    return t;
}

Segment sample_segment(const Eigen::MatrixXd& features, const Eigen::MatrixXd& roll, Eigen::Index window_frames,
                       Rng& rng) {
    if (features.rows() != roll.rows()) throw ArgumentError("features and labels disagree on frame count");
    if (window_frames < 1) throw ArgumentError("segment window must be at least one frame");
    const Eigen::Index frames = features.rows();
    Segment s;
    s.start = frames > window_frames ? static_cast<Eigen::Index>(uniform_index(rng, std::uint64_t(frames - window_frames + 1))) : 0;
    const Eigen::Index n = std::min(window_frames, frames - s.start);
    s.input = Eigen::MatrixXd::Zero(window_frames, features.cols());
    s.target = Eigen::MatrixXd::Zero(window_frames, roll.cols());
    s.input.topRows(n) = features.middleRows(s.start, n);
    s.target.topRows(n) = roll.middleRows(s.start, n);
    return s;
}

// ---------------------------------------------------------------------------

OptimizerMethod parse_optimizer(const std::string& name) {
    if (name == "adam") return OptimizerMethod::Adam;
    if (name == "sgd" || name == "gd") return OptimizerMethod::GradientDescent;
    throw ConfigError("unknown optimizer '" + name + "' (expected adam or sgd)");
}

std::string optimizer_name(OptimizerMethod m) { return m == OptimizerMethod::Adam ? "adam" : "sgd"; }

template <typename Scalar>
void optimizer_step(OptimizerState<Scalar>& state, ParameterSet<Scalar>& params, const ParameterSet<Scalar>& grads,
                    const OptimizerConfig& config) {
    for (const auto& [name, g] : grads) {
        if (!g.values.allFinite()) throw ValidationError("non-finite gradient for " + name);
        auto it = params.find(name);
        if (it == params.end() || it->second.size() != g.size())
            throw ArgumentError("gradient " + name + " does not match the parameters");
    }
    ++state.step;
    const Scalar lr = static_cast<Scalar>(config.learning_rate);
    if (config.method == OptimizerMethod::GradientDescent) {
        for (const auto& [name, g] : grads) {
            auto& p = params.at(name).values;
            for (Eigen::Index i = 0; i < p.size(); ++i) {
                const Scalar u = lr * g.values[i];
                if (u != Scalar(0)) p[i] -= u;
            }
        }
        return;
    }
    const Scalar b1 = static_cast<Scalar>(config.beta1), b2 = static_cast<Scalar>(config.beta2);
    const Scalar eps = static_cast<Scalar>(config.epsilon);
    const Scalar c1 = Scalar(1) - static_cast<Scalar>(std::pow(config.beta1, double(state.step)));
    const Scalar c2 = Scalar(1) - static_cast<Scalar>(std::pow(config.beta2, double(state.step)));
    for (const auto& [name, g] : grads) {
        auto& m = state.m.try_emplace(name, Tensor<Scalar>::zeros(g.dims)).first->second.values;
        auto& v = state.v.try_emplace(name, Tensor<Scalar>::zeros(g.dims)).first->second.values;
        auto& p = params.at(name).values;
        for (Eigen::Index i = 0; i < p.size(); ++i) {
            const Scalar gi = g.values[i];
            m[i] = b1 * m[i] + (Scalar(1) - b1) * gi;
            v[i] = b2 * v[i] + (Scalar(1) - b2) * gi * gi;
            const Scalar u = lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps);
            if (u != Scalar(0)) p[i] -= u;
        }
    }
}

// ---------------------------------------------------------------------------

void TrainConfig::validate() const {
    if (sequence_len_samples < 1 || hop_samples < 1 || batch_size < 1 || max_epochs < 1 ||
        validate_every_epochs < 1 || steps_per_epoch < 1)
        throw ConfigError("training sizes must all be positive");
    if (sequence_len_samples % hop_samples != 0)
        throw ConfigError("sequence length " + std::to_string(sequence_len_samples) +
                          " is not a multiple of the hop " + std::to_string(hop_samples));
    if (!(optimizer.learning_rate >= 0.0) || !std::isfinite(optimizer.learning_rate))
        throw ConfigError("learning rate must be finite and non-negative");
    if (!(optimizer.beta1 >= 0 && optimizer.beta1 < 1 && optimizer.beta2 >= 0 && optimizer.beta2 < 1))
        throw ConfigError("Adam betas must lie in [0, 1)");
    if (!(optimizer.epsilon > 0)) throw ConfigError("Adam epsilon must be positive");
    amt::validate(decode);
}

void write_train_report_csv(const TrainReport& report, std::ostream& out) {
    out << "epoch,loss,frame_P,frame_R,frame_F1,note_P,note_R,note_F1\n";
    out << std::setprecision(10);
    for (const auto& r : report.records)
        out << r.epoch << ',' << r.loss << ',' << r.frame.precision << ',' << r.frame.recall << ',' << r.frame.f1
            << ',' << r.note.precision << ',' << r.note.recall << ',' << r.note.f1 << '\n';
}

std::optional<std::uint32_t> epochs_to_threshold(const TrainReport& report, double tau) {
    for (const auto& r : report.records)
        if (r.frame.f1 >= tau) return r.epoch;
    return std::nullopt;
}

namespace {

template <typename Scalar>
Checkpoint<Scalar> make_checkpoint(const ModelConfig& model, const ParameterSet<Scalar>& params, std::uint32_t epoch,
                                   const TrainConfig& config, const std::string& suffix) {
    Checkpoint<Scalar> c;
    c.config = model;
    c.config.dtype = dtype_of<Scalar>();
    c.params = params;
    c.meta.epoch = epoch;
    c.meta.seed = config.seed;
    c.meta.source_tag = config.tag.empty() ? suffix : config.tag + "/" + suffix;
    return c;
}

template <typename Scalar>
ValidationRecord validate_model(const ModelConfig& model, const ParameterSet<Scalar>& params,
                                const std::vector<LabeledTrack>& tracks, const TrainConfig& config,
                                std::uint32_t epoch) {
    ValidationRecord rec;
    rec.epoch = epoch;
    std::vector<PRFScore> frame, note;
    double loss = 0.0;
    Mat<Scalar> dl;
    for (const auto& t : tracks) {
        const Mat<Scalar> logits = forward<Scalar>(model, params, t.features.cast<Scalar>());
        loss += double(bce_loss<Scalar>(logits, t.roll.matrix.cast<Scalar>(), dl));
        PianoRoll probs;
        probs.frame_period_sec = t.roll.frame_period_sec;
        probs.pitch_min = t.roll.pitch_min;
        probs.matrix = logits.template cast<double>().unaryExpr([](double z) { return 1.0 / (1.0 + std::exp(-z)); });
        const TrackScores s = score_prediction(t, probs, config.decode, config.tolerances);
        frame.push_back(s.frame);
        note.push_back(s.note);
    }
    rec.loss = tracks.empty() ? 0.0 : loss / double(tracks.size());
    rec.frame = aggregate(frame);
    rec.note = aggregate(note);
    return rec;
}

}  // namespace

template <typename Scalar>
TrainResult<Scalar> train(const ModelConfig& model, ParameterSet<Scalar> params, const DataSplit& data,
                          const TrainConfig& config, const ProgressFn& progress) {
    config.validate();
    model.validate();
    check_shapes(model, params);
    if (data.train.empty() || data.valid.empty()) throw ArgumentError("training needs non-empty train and validation splits");
    for (const auto* split : {&data.train, &data.valid})
        for (const auto& t : *split) {
            if (t.features.cols() != model.input_bins)
                throw ArgumentError("track " + t.id + " has " + std::to_string(t.features.cols()) +
                                    " bins, model expects " + std::to_string(model.input_bins));
            if (t.roll.pitches() != model.output_pitches)
                throw ArgumentError("track " + t.id + " labels have the wrong pitch count");
            if (t.features.rows() < 1) throw ArgumentError("track " + t.id + " is empty");
        }

    Rng rng(config.seed);
    OptimizerState<Scalar> opt;
    TrainResult<Scalar> result;
    const LossFunction<Scalar> loss = bce_loss_function<Scalar>();
    const Eigen::Index window = config.window_frames();
    double best_f1 = -1.0;
    std::size_t batch_id = 0;
    std::vector<Mat<Scalar>> inputs(static_cast<std::size_t>(config.batch_size));
    std::vector<Mat<Scalar>> targets(inputs.size());

    for (int epoch = 1; epoch <= config.max_epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        double epoch_loss = 0.0;
        for (int step = 0; step < config.steps_per_epoch; ++step, ++batch_id) {
            for (std::size_t b = 0; b < inputs.size(); ++b) {
                const auto& track = data.train[uniform_index(rng, data.train.size())];
                const Segment seg = sample_segment(track.features, track.roll.matrix, window, rng);
                inputs[b] = seg.input.cast<Scalar>();
                targets[b] = seg.target.cast<Scalar>();
            }
            BatchGradient<Scalar> g;
            try {
                g = gradient<Scalar>(model, params, inputs, targets, loss, batch_id);
            } catch (const NonFiniteLoss& e) {
                throw TrainingDiverged<Scalar>(std::string("training diverged: ") + e.what(),
                                               make_checkpoint(model, params, std::uint32_t(epoch - 1), config, "last-good"),
                                               batch_id);
            }
            optimizer_step(opt, params, g.grads, config.optimizer);
            epoch_loss += double(g.loss);
        }
        result.report.train_loss.push_back(epoch_loss / config.steps_per_epoch);

        if (epoch % config.validate_every_epochs == 0 || epoch == config.max_epochs) {
            ValidationRecord rec = validate_model(model, params, data.valid, config, std::uint32_t(epoch));
            if (rec.frame.f1 > best_f1) {
                best_f1 = rec.frame.f1;
                result.best_checkpoint = make_checkpoint(model, params, std::uint32_t(epoch), config, "best");
            }
            result.report.records.push_back(rec);
            if (progress) progress(rec);
        }
        result.report.epoch_seconds.push_back(
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
    }
    result.final_checkpoint = make_checkpoint(model, params, std::uint32_t(config.max_epochs), config, "final");
    return result;
}

template <typename Scalar>
ParameterSet<Scalar> scratch_params(const ModelConfig& model, std::uint64_t seed, const std::vector<LabeledTrack>& train) {
    ParameterSet<Scalar> p = init_params<Scalar>(model, seed);
    Eigen::VectorXd active = Eigen::VectorXd::Zero(model.output_pitches);
    double frames = 0.0;
    for (const auto& t : train) {
        if (t.roll.pitches() != model.output_pitches)
            throw ArgumentError("track " + t.id + " labels have the wrong pitch count");
        active += t.roll.matrix.colwise().sum().transpose();
        frames += double(t.roll.frames());
    }
    auto& bias = p.at("head.bias").values;
    for (Eigen::Index k = 0; k < bias.size(); ++k) {
        const double q = (active[k] + 1.0) / (frames + 2.0);
        bias[k] = static_cast<Scalar>(std::log(q / (1.0 - q)));
    }
    return p;
}

template <typename Scalar>
ParameterSet<Scalar> transfer_init(const Checkpoint<Scalar>& source, const ModelConfig& target) {
    try {
        check_shapes(target, source.params);
    } catch (const ValidationError& e) {
        throw ValidationError(std::string("cannot transfer weights: ") + e.what());
    }
    return source.params;
}

// ---------------------------------------------------------------------------

template <typename Scalar>
PianoRoll predict(const ModelConfig& model, const ParameterSet<Scalar>& params, const Eigen::MatrixXd& features,
                  double frame_period_sec, int pitch_min) {
    PianoRoll out;
    out.frame_period_sec = frame_period_sec;
    out.pitch_min = pitch_min;
    out.matrix = forward<Scalar>(model, params, features.cast<Scalar>())
                     .template cast<double>()
                     .unaryExpr([](double z) { return 1.0 / (1.0 + std::exp(-z)); });
    return out;
}

TrackScores score_prediction(const LabeledTrack& track, const PianoRoll& probabilities, const DecodeConfig& decode,
                             const MatchTolerances& tol) {
    TrackScores s;
    s.id = track.id;
    s.frame = frame_metrics(track.roll, binarize(probabilities, decode.threshold));
    const NoteTrack est = decode_frames(probabilities, decode);
    s.note = note_metrics(track.notes, est, tol, MatchMode::Onset);
    s.note_with_offset = note_metrics(track.notes, est, tol, MatchMode::OnsetOffset);
    return s;
}

template <typename Scalar>
std::vector<TrackScores> evaluate_tracks(const ModelConfig& model, const ParameterSet<Scalar>& params,
                                         const std::vector<LabeledTrack>& tracks, const DecodeConfig& decode,
                                         const MatchTolerances& tol) {
    std::vector<TrackScores> out;
    out.reserve(tracks.size());
    for (const auto& t : tracks)
        out.push_back(score_prediction(
            t, predict(model, params, t.features, t.roll.frame_period_sec, t.roll.pitch_min), decode, tol));
    return out;
}

// ---------------------------------------------------------------------------

GradientCheckResult gradient_check(const ModelConfig& model, const ParameterSet<double>& params,
                                   const std::vector<Mat<double>>& inputs, const std::vector<Mat<double>>& targets,
                                   double eps, double floor) {
    using Ext = long double;
    const BatchGradient<double> analytic = gradient<double>(model, params, inputs, targets, bce_loss_function<double>());

    std::vector<Mat<Ext>> ext_inputs, ext_targets;
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        ext_inputs.push_back(inputs[i].cast<Ext>());
        ext_targets.push_back(targets[i].cast<Ext>());
    }
    auto evaluate = [&](const ParameterSet<Ext>& p, std::vector<std::int32_t>& pattern) {
        pattern.clear();
        Ext total = 0;
        Mat<Ext> dl;
        for (std::size_t i = 0; i < ext_inputs.size(); ++i) {
            ForwardPass<Ext> pass(model, p, ext_inputs[i]);
            total += bce_loss<Ext>(pass.logits(), ext_targets[i], dl);
            const auto ap = pass.activation_pattern();
            pattern.insert(pattern.end(), ap.begin(), ap.end());
        }
        return total / Ext(ext_inputs.size());
    };

    GradientCheckResult result;
    ParameterSet<Ext> probe = cast_params<Ext, double>(params);
    std::vector<std::int32_t> base, plus, minus;
    evaluate(probe, base);
    for (const auto& [name, tensor] : params) {
        auto& values = probe.at(name).values;
        const auto& grad = analytic.grads.at(name).values;
        for (Eigen::Index i = 0; i < values.size(); ++i) {
            const Ext x0 = values[i];
            Ext h = eps;
            auto central = [&](Ext step, bool& smooth) {
                values[i] = x0 + step;
                const Ext lp = evaluate(probe, plus);
                values[i] = x0 - step;
                const Ext lm = evaluate(probe, minus);
                values[i] = x0;
                smooth = plus == base && minus == base;
                return (lp - lm) / (2 * step);
            };
            Ext numeric = 0;
            for (int attempt = 0;; ++attempt) {
                bool smooth_h = false, smooth_half = false;
                const Ext d_h = central(h, smooth_h);
                const Ext d_half = central(h / 2, smooth_half);
                // One Richardson step cancels the h^2 term of the central difference.
                numeric = (4 * d_half - d_h) / 3;
                if ((smooth_h && smooth_half) || attempt == 30) break;
                h /= 2;
                ++result.eps_reductions;
            }
            const double a = grad[i];
            const double n = static_cast<double>(numeric);
            const double rel = std::abs(a - n) / std::max({std::abs(a), std::abs(n), floor});
            if (rel > result.max_relative_error) {
                result.max_relative_error = rel;
                result.worst_parameter = name + "[" + std::to_string(i) + "]";
            }
            ++result.checked;
        }
    }
    return result;
}

#define AMT_INSTANTIATE(S)                                                                                      \
    template S bce_loss<S>(const Mat<S>&, const Mat<S>&, Mat<S>&);                                              \
    template void optimizer_step<S>(OptimizerState<S>&, ParameterSet<S>&, const ParameterSet<S>&,               \
                                    const OptimizerConfig&);                                                    \
    template TrainResult<S> train<S>(const ModelConfig&, ParameterSet<S>, const DataSplit&, const TrainConfig&, \
                                     const ProgressFn&);                                                        \
    template ParameterSet<S> transfer_init<S>(const Checkpoint<S>&, const ModelConfig&);                        \
    template ParameterSet<S> scratch_params<S>(const ModelConfig&, std::uint64_t, const std::vector<LabeledTrack>&); \
    template PianoRoll predict<S>(const ModelConfig&, const ParameterSet<S>&, const Eigen::MatrixXd&, double,   \
                                  int);                                                                         \
    template std::vector<TrackScores> evaluate_tracks<S>(const ModelConfig&, const ParameterSet<S>&,            \
                                                         const std::vector<LabeledTrack>&, const DecodeConfig&, \
                                                         const MatchTolerances&);

AMT_INSTANTIATE(float)
AMT_INSTANTIATE(double)
template long double bce_loss<long double>(const Mat<long double>&, const Mat<long double>&, Mat<long double>&);
#undef AMT_INSTANTIATE

}  // namespace amt
