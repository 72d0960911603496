#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "poslab/error.hpp"
#include "poslab/image.hpp"

namespace poslab {

struct ModelConfig {
    int vocab_size = 0;
    int d_model = 128;
    int n_heads = 4;
    int encoder_layers = 2;
    int decoder_layers = 2;
    int patch_size = 8;
    int max_caption_len = 16;
    int canvas_size = 64;
    uint64_t seed = 0;

    void validate() const;
    int patches_per_side() const { return canvas_size / patch_size; }
    int n_patches() const { return patches_per_side() * patches_per_side(); }
    int patch_dim() const { return 3 * patch_size * patch_size; }

    bool operator==(const ModelConfig&) const = default;
};

// Flat parameter storage addressed through a stable name -> (offset, shape)
// manifest; the manifest order defines the checkpoint layout.
struct ParamInfo {
    std::string name;
    size_t offset = 0;
    int rows = 0;
    int cols = 0;
    size_t count() const { return static_cast<size_t>(rows) * cols; }
};

// AdamW hyperparameters and the linear-decay schedule.
struct TrainHyper {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
    int warmup_steps = 0;
    int max_steps = 1000;

    bool operator==(const TrainHyper&) const = default;
};

// lr0 * (1 - step/max_steps), floored at zero past max_steps.
double lr_at_step(const TrainHyper& hyper, int step);

template <typename Scalar>
struct AdamState {
    std::vector<Scalar> m;
    std::vector<Scalar> v;
    int64_t step = 0;  // applied updates (drives bias correction)
};

// Per-item noise-replacement augmentation: with probability `prob` an item's
// image is swapped for white noise keyed on (key, step, item), so the stream
// is a pure function of the checkpointed state.
struct NoiseSpec {
    double prob = 0.0;
    uint64_t key = 0;
};

// One training batch, already tokenized and padded: row b of `inputs` is
// [BOS, w1, ..] and of `targets` is [w1, .., EOS, PAD..]; images are
// canvas*canvas RGB buffers.
struct TokenBatch {
    int batch = 0;
    int seq_len = 0;
    std::vector<int> inputs;
    std::vector<int> targets;
    std::vector<const uint8_t*> images;
};

// Packs caption ids into an (input, target) row pair; throws if the caption
// plus EOS does not fit in seq_len.
void pack_sequence(const std::vector<int>& ids, int seq_len, int* input_row, int* target_row);

template <typename Scalar>
class Net {
public:
    explicit Net(const ModelConfig& cfg);
    ~Net();
    Net(Net&&) noexcept;
    Net& operator=(Net&&) noexcept;

    const ModelConfig& config() const { return cfg_; }
    const std::vector<ParamInfo>& manifest() const { return manifest_; }
    std::vector<Scalar>& params() { return params_; }
    const std::vector<Scalar>& params() const { return params_; }
    size_t param_count() const { return params_.size(); }
    const ParamInfo& param_info(const std::string& name) const;

    AdamState<Scalar> fresh_optimizer() const;

    // Forward + backward + AdamW update over the whole parameter set
    // (encoder included). Returns mean cross-entropy over non-pad targets.
    double train_step(const TokenBatch& batch, AdamState<Scalar>& opt, const TrainHyper& hyper,
                      int step, const NoiseSpec& noise);

    // Forward-only mean cross-entropy.
    double eval_loss(const TokenBatch& batch);

    // Encoder output for one image: n_patches() rows of d_model values.
    std::vector<Scalar> encode_image(const ImageBuffer& image);

    // log p(w1..wn, EOS | image) summed over per-position softmax conditionals.
    double caption_logprob(const ImageBuffer& image, const std::vector<int>& token_ids);
    // Batched scoring; consecutive groups of `seqs_per_image` captions share
    // one image (the image is encoded once per group).
    std::vector<double> score_captions(const std::vector<const uint8_t*>& images,
                                       const std::vector<std::vector<int>>& token_seqs,
                                       int seqs_per_image = 1);

    // Length-normalized beam search; beam_width 1 is greedy argmax.
    std::vector<int> generate_caption(const ImageBuffer& image, int beam_width);

    // Softmax rows of the last decoder forward (one row per position of the
    // last batch); row t is p(. | w_<=t, v). Exposed for normalization and
    // causality checks. train_step consumes the buffer for backprop, so read
    // it after eval_loss / score_captions only.
    std::vector<Scalar> last_probs() const;

    // Forward + backward without the optimizer update; the gradient of the
    // mean cross-entropy w.r.t. every parameter is left in grads().
    double loss_and_grad(const TokenBatch& batch);
    std::span<const Scalar> grads() const;

    struct Impl;  // opaque; holds activations and scratch

private:
    ModelConfig cfg_;
    std::vector<ParamInfo> manifest_;
    std::vector<Scalar> params_;
    std::unique_ptr<Impl> impl_;
};

using NetF = Net<float>;
using NetD = Net<double>;

template <typename Scalar>
struct Checkpoint {
    ModelConfig config;
    std::vector<Scalar> params;
    std::vector<Scalar> opt_m;
    std::vector<Scalar> opt_v;
    int64_t opt_step = 0;
    int64_t trained_steps = 0;
    std::array<uint64_t, 4> rng_state{};
};

template <typename Scalar>
void save_checkpoint(const Checkpoint<Scalar>& ck, const std::vector<ParamInfo>& manifest,
                     const std::string& path);
template <typename Scalar>
Checkpoint<Scalar> load_checkpoint(const std::string& path);

}  // namespace poslab
