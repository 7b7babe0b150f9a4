#pragma once

#include "amt/decoding.hpp"
#include "amt/errors.hpp"
#include "amt/metrics.hpp"
#include "amt/network.hpp"
#include "amt/note_events.hpp"
#include "amt/random.hpp"

#include <cstdint>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

namespace amt {

// ---------------------------------------------------------------------------
// Loss

/// Mean per-cell binary cross-entropy on logits, evaluated as
/// max(z, 0) - z*y + log(1 + exp(-|z|)). dlogits = (sigmoid(z) - y) / cells.
template <typename Scalar>
Scalar bce_loss(const Mat<Scalar>& logits, const Mat<Scalar>& targets, Mat<Scalar>& dlogits);

template <typename Scalar>
LossFunction<Scalar> bce_loss_function() {
    return [](const Mat<Scalar>& z, const Mat<Scalar>& y, Mat<Scalar>& dz) { return bce_loss<Scalar>(z, y, dz); };
}

// ---------------------------------------------------------------------------
// Data

/// One training/evaluation track: model input, frame labels and note labels
/// on the same frame clock.
struct LabeledTrack {
    std::string id;
    Eigen::MatrixXd features;  // frames x input bins
    PianoRoll roll;            // frames x pitches, same frame count as features
    NoteTrack notes;
};

/// Builds a LabeledTrack, padding or cropping the label roll to the feature frame count.
LabeledTrack make_labeled_track(std::string id, Eigen::MatrixXd features, const NoteTrack& notes,
                                double frame_period_sec = 0.01, int pitch_min = kDefaultPitchMin,
                                int pitch_count = kDefaultPitchCount);

struct DataSplit {
    std::vector<LabeledTrack> train;
    std::vector<LabeledTrack> valid;
};

struct Segment {
    Eigen::Index start = 0;
    Eigen::MatrixXd input;   // window x bins
    Eigen::MatrixXd target;  // window x pitches
};

/// Uniform start in [0, frames - window]; shorter tracks start at 0 and are
/// zero-padded at the end in both input and target.
Segment sample_segment(const Eigen::MatrixXd& features, const Eigen::MatrixXd& roll, Eigen::Index window_frames,
                       Rng& rng);

// ---------------------------------------------------------------------------
// Optimizer

enum class OptimizerMethod { Adam, GradientDescent };

OptimizerMethod parse_optimizer(const std::string& name);
std::string optimizer_name(OptimizerMethod m);

struct OptimizerConfig {
    OptimizerMethod method = OptimizerMethod::Adam;
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

template <typename Scalar>
struct OptimizerState {
    std::uint64_t step = 0;
    ParameterSet<Scalar> m;
    ParameterSet<Scalar> v;
};

/// In-place update. A zero step leaves a value bit-identical.
template <typename Scalar>
void optimizer_step(OptimizerState<Scalar>& state, ParameterSet<Scalar>& params, const ParameterSet<Scalar>& grads,
                    const OptimizerConfig& config);

// ---------------------------------------------------------------------------
// Training loop

struct TrainConfig {
    std::int64_t sequence_len_samples = 327680;
    std::int64_t hop_samples = 160;
    int batch_size = 4;
    int max_epochs = 300;
    int validate_every_epochs = 10;
    int steps_per_epoch = 8;
    OptimizerConfig optimizer;
    std::uint64_t seed = 0;
    std::string tag;  // source-dataset tag stored in checkpoints
    DecodeConfig decode;
    MatchTolerances tolerances;

    void validate() const;
    Eigen::Index window_frames() const { return sequence_len_samples / hop_samples; }
};

struct ValidationRecord {
    std::uint32_t epoch = 0;
    double loss = 0.0;  // validation BCE, mean over tracks
    PRFScore frame;
    PRFScore note;

    friend bool operator==(const ValidationRecord& a, const ValidationRecord& b) {
        auto same = [](const PRFScore& x, const PRFScore& y) {
            return x.precision == y.precision && x.recall == y.recall && x.f1 == y.f1 && x.tp == y.tp &&
                   x.fp == y.fp && x.fn == y.fn;
        };
        return a.epoch == b.epoch && a.loss == b.loss && same(a.frame, b.frame) && same(a.note, b.note);
    }
};

struct TrainReport {
    std::vector<ValidationRecord> records;
    std::vector<double> train_loss;     // per epoch, mean over steps
    std::vector<double> epoch_seconds;  // wall clock; not part of equality

    friend bool operator==(const TrainReport& a, const TrainReport& b) {
        return a.records == b.records && a.train_loss == b.train_loss;
    }
};

/// `epoch,loss,frame_P,frame_R,frame_F1,note_P,note_R,note_F1`
void write_train_report_csv(const TrainReport& report, std::ostream& out);

/// First report epoch whose validation frame F1 reaches tau.
std::optional<std::uint32_t> epochs_to_threshold(const TrainReport& report, double tau);

template <typename Scalar>
struct TrainResult {
    Checkpoint<Scalar> final_checkpoint;
    Checkpoint<Scalar> best_checkpoint;  // highest validation frame F1, earliest on ties
    TrainReport report;
};

/// Non-finite loss during training. Carries the parameters from before the failing step.
template <typename Scalar>
class TrainingDiverged : public Error {
public:
    TrainingDiverged(const std::string& what, Checkpoint<Scalar> last_good, std::size_t batch_id)
        : Error(what), last_good_(std::move(last_good)), batch_id_(batch_id) {}
    const Checkpoint<Scalar>& last_good() const { return last_good_; }
    std::size_t batch_id() const { return batch_id_; }

private:
    Checkpoint<Scalar> last_good_;
    std::size_t batch_id_;
};

/// Optional progress callback, called after every validation point.
using ProgressFn = std::function<void(const ValidationRecord&)>;

template <typename Scalar>
TrainResult<Scalar> train(const ModelConfig& model, ParameterSet<Scalar> initial, const DataSplit& data,
                          const TrainConfig& config, const ProgressFn& progress = {});

/// init_params, then head.bias set to each pitch's log-odds of being active in
/// `train`, with one pseudo-count on each side. Starting from the label prior
/// keeps the first updates from collapsing the U-net output into a constant.
template <typename Scalar>
ParameterSet<Scalar> scratch_params(const ModelConfig& model, std::uint64_t seed, const std::vector<LabeledTrack>& train);

/// Copies every tensor of `source` for a model with config `target`. Any
/// missing, extra or differently shaped tensor is an error listing all of them.
template <typename Scalar>
ParameterSet<Scalar> transfer_init(const Checkpoint<Scalar>& source, const ModelConfig& target);

// ---------------------------------------------------------------------------
// Inference and evaluation

/// Sigmoid of the model output as a frames x output_pitches roll.
template <typename Scalar>
PianoRoll predict(const ModelConfig& model, const ParameterSet<Scalar>& params, const Eigen::MatrixXd& features,
                  double frame_period_sec = 0.01, int pitch_min = kDefaultPitchMin);

/// Frame, note and note-with-offset scores for one prediction.
TrackScores score_prediction(const LabeledTrack& track, const PianoRoll& probabilities, const DecodeConfig& decode,
                             const MatchTolerances& tol);

template <typename Scalar>
std::vector<TrackScores> evaluate_tracks(const ModelConfig& model, const ParameterSet<Scalar>& params,
                                         const std::vector<LabeledTrack>& tracks, const DecodeConfig& decode = {},
                                         const MatchTolerances& tol = {});

// ---------------------------------------------------------------------------
// Finite-difference gradient check

struct GradientCheckResult {
    double max_relative_error = 0.0;
    std::string worst_parameter;
    std::size_t checked = 0;
    std::size_t eps_reductions = 0;  // entries where a kink forced a smaller step
};

/// Compares gradient() with central differences for every parameter entry.
/// The oracle runs in long double and combines steps h and h/2 by one
/// Richardson step. Relative error is |a - n| / max(|a|, |n|, floor). When the
/// activation pattern at either step differs from the unperturbed one, h is
/// halved until all evaluations lie on the same smooth piece.
GradientCheckResult gradient_check(const ModelConfig& model, const ParameterSet<double>& params,
                                   const std::vector<Mat<double>>& inputs, const std::vector<Mat<double>>& targets,
                                   double eps = 1e-4, double floor = 1e-8);

}  // namespace amt
