#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <functional>
#include <istream>
#include <map>
#include <memory>
#include <stdexcept>
#include <ostream>
#include <span>
#include <string>
#include <vector>

namespace amt {

enum class DType : std::uint8_t { F32 = 0, F64 = 1 };

template <typename Scalar>
constexpr DType dtype_of();
template <>
constexpr DType dtype_of<float>() { return DType::F32; }
template <>
constexpr DType dtype_of<double>() { return DType::F64; }

template <typename Scalar>
using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
template <typename Scalar>
using RowMajorMat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Shaped row-major array.
template <typename Scalar>
struct Tensor {
    std::vector<std::int64_t> dims;
    Vec<Scalar> values;

    static Tensor zeros(std::vector<std::int64_t> dims);
    Eigen::Index size() const { return values.size(); }

    /// Rank-2 row-major view with the first dim as rows and the rest flattened.
    Eigen::Map<const RowMajorMat<Scalar>> as_matrix() const {
        return {values.data(), dims.empty() ? 0 : dims.front(), dims.empty() ? 0 : values.size() / dims.front()};
    }
    Eigen::Map<RowMajorMat<Scalar>> as_matrix() {
        return {values.data(), dims.empty() ? 0 : dims.front(), dims.empty() ? 0 : values.size() / dims.front()};
    }

    friend bool operator==(const Tensor& a, const Tensor& b) {
        return a.dims == b.dims && a.values.size() == b.values.size() && (a.values.array() == b.values.array()).all();
    }
};

struct ModelConfig {
    int input_bins = 88;
    int unet_levels = 3;
    int base_channels = 8;
    int kernel = 3;
    int rnn_hidden = 64;
    int output_pitches = 88;
    DType dtype = DType::F32;

    void validate() const;
    /// Multiple of 2^levels that every U-net input dimension is padded to.
    int pad_multiple() const { return 1 << unet_levels; }
    int padded_bins() const;
    int channels(int level) const { return base_channels << level; }

    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// Parameter name and shape, in creation order.
using ShapeList = std::vector<std::pair<std::string, std::vector<std::int64_t>>>;
ShapeList parameter_shapes(const ModelConfig& config);

/// Named parameter tensors, ordered by name.
template <typename Scalar>
using ParameterSet = std::map<std::string, Tensor<Scalar>>;

/// Glorot-uniform weights, a = sqrt(6 / (fan_in + fan_out)), zero biases.
template <typename Scalar>
ParameterSet<Scalar> init_params(const ModelConfig& config, std::uint64_t seed);

/// Glorot bound used by init_params for the named tensor (0 for biases).
double init_bound(const ModelConfig& config, const std::string& name);

template <typename Scalar>
ParameterSet<Scalar> zero_params(const ModelConfig& config);

/// Throws ValidationError naming every tensor whose presence or shape disagrees with config.
template <typename Scalar>
void check_shapes(const ModelConfig& config, const ParameterSet<Scalar>& params);

template <typename To, typename From>
ParameterSet<To> cast_params(const ParameterSet<From>& params);

template <typename Scalar>
std::size_t parameter_count(const ParameterSet<Scalar>& params);

/// Everything the backward pass needs from one forward evaluation.
template <typename Scalar>
struct ForwardTrace;

/// Frames x input_bins spectrogram -> frames x output_pitches logits.
///
/// U-net over (time, frequency): per level conv-ReLU-conv-ReLU then 2x2 max
/// pooling; a bottleneck block; mirrored decoder with nearest-neighbour
/// upsampling and skip concatenation; a 1x1 convolution to a single channel.
/// Each frame's frequency row is fed to a bidirectional LSTM, and the two
/// hidden states are mapped to pitch logits by an affine layer. Both spatial
/// dims are zero-padded to a multiple of 2^levels and cropped afterwards.
template <typename Scalar>
Mat<Scalar> forward(const ModelConfig& config, const ParameterSet<Scalar>& params, const Mat<Scalar>& input);

template <typename Scalar>
class ForwardPass {
public:
    ForwardPass(const ModelConfig& config, const ParameterSet<Scalar>& params, const Mat<Scalar>& input);
    ~ForwardPass();
    ForwardPass(ForwardPass&&) noexcept;

    const Mat<Scalar>& logits() const;
    /// Accumulates d(loss)/d(params) for the given d(loss)/d(logits) into grads.
    void backward(const Mat<Scalar>& dlogits, ParameterSet<Scalar>& grads) const;
    /// ReLU on/off bits and max-pool winners; equal patterns mean both
    /// evaluations lie on the same smooth piece of the network function.
    std::vector<std::int32_t> activation_pattern() const;

private:
    const ModelConfig* config_;
    const ParameterSet<Scalar>* params_;
    std::unique_ptr<ForwardTrace<Scalar>> trace_;
};

/// Loss of one example; writes d(loss)/d(logits) into `dlogits`.
template <typename Scalar>
using LossFunction = std::function<Scalar(const Mat<Scalar>& logits, const Mat<Scalar>& targets, Mat<Scalar>& dlogits)>;

template <typename Scalar>
struct BatchGradient {
    Scalar loss = 0;  // mean over examples
    ParameterSet<Scalar> grads;
};

/// Non-finite loss in a batch.
class NonFiniteLoss : public std::runtime_error {
public:
    NonFiniteLoss(std::size_t batch_id, double loss)
        : std::runtime_error("non-finite loss " + std::to_string(loss) + " in batch " + std::to_string(batch_id)),
          batch_id_(batch_id) {}
    std::size_t batch_id() const noexcept { return batch_id_; }

private:
    std::size_t batch_id_;
};

/// Exact reverse-mode gradient of the batch-mean loss.
template <typename Scalar>
BatchGradient<Scalar> gradient(const ModelConfig& config, const ParameterSet<Scalar>& params,
                               std::span<const Mat<Scalar>> inputs, std::span<const Mat<Scalar>> targets,
                               const LossFunction<Scalar>& loss, std::size_t batch_id = 0);

// ---------------------------------------------------------------------------
// Checkpoints

struct TrainingMetadata {
    std::uint32_t epoch = 0;
    std::uint64_t seed = 0;
    std::string source_tag;

    friend bool operator==(const TrainingMetadata&, const TrainingMetadata&) = default;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

template <typename Scalar>
struct Checkpoint {
    std::uint32_t version = kCheckpointVersion;
    ModelConfig config;
    ParameterSet<Scalar> params;
    TrainingMetadata meta;
};

/// Binary layout, little-endian:
///   "AMTF" | u32 version | config (6 x u32, u8 dtype) |
///   meta (u32 epoch, u64 seed, u32 len + UTF-8 tag) | u32 tensor count |
///   per tensor: u32 name len, name, u8 dtype, u32 rank, u64 dims, raw values
template <typename Scalar>
void save_checkpoint(const Checkpoint<Scalar>& ckpt, std::ostream& out);
/// Values stored in another precision are converted.
template <typename Scalar>
Checkpoint<Scalar> load_checkpoint(std::istream& in);

template <typename Scalar>
void save_checkpoint_file(const Checkpoint<Scalar>& ckpt, const std::string& path);
template <typename Scalar>
Checkpoint<Scalar> load_checkpoint_file(const std::string& path);

}  // namespace amt
