// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cpmtp/cp_distribution.hpp>
#include <cpmtp/encoder.hpp>
#include <cpmtp/heads.hpp>

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

namespace cpmtp {

/// `Scratch`: full CP head, base model is the first-position marginal.
/// `Finetune`: reduced head over a frozen shared head W, which is the base model.
enum class Mode : std::uint32_t { Scratch = 0, Finetune = 1 };

std::string_view to_string(Mode mode);
Mode parse_mode(std::string_view text);

struct Model {
    Mode mode = Mode::Scratch;
    EncoderParams encoder;
    std::variant<FullHeadParamsd, ReducedHeadParamsd> head;

    const HeadDims& dims() const;
    void check() const;

    const FullHeadParamsd& full_head() const { return std::get<FullHeadParamsd>(head); }
    FullHeadParamsd& full_head() { return std::get<FullHeadParamsd>(head); }
    const ReducedHeadParamsd& reduced_head() const { return std::get<ReducedHeadParamsd>(head); }
    ReducedHeadParamsd& reduced_head() { return std::get<ReducedHeadParamsd>(head); }
};

struct ModelShape {
    HeadDims dims;
    double decay = 0.7;
    double encoder_scale = 1.0;
};

/// Random scratch-mode model: encoder table ~ U(-scale, scale), head
/// weights ~ U(-1/sqrt(E), 1/sqrt(E)).
Model make_scratch_model(const ModelShape& shape, std::uint64_t seed);

/// Fine-tuning model built on a pretrained next-token model. The source
/// must be a rank-1 scratch model; its first-position head becomes the
/// frozen shared matrix W and its encoder is frozen. Adapters start at the
/// identity plus U(-adapter_noise, adapter_noise).
Model make_finetune_model(const Model& pretrained, int horizon, int rank, std::uint64_t seed,
                          double adapter_noise = 0.0);

HeadLogits<double> head_logits(const Model& model, const Embedding& e);

/// Draft distribution over the next n tokens at embedding e.
CPJointDistd draft_dist(const Model& model, const Embedding& e);

/// Next-token distribution of the base model: the first-position marginal of
/// the CP head in scratch mode, log-softmax(W e) of the frozen head in
/// finetune mode.
LogDistributiond base_next_token_dist(const Model& model, const Embedding& e);

/// Named parameter arrays in checkpoint order. Frozen arrays are included
/// with `trainable == false`.
struct ParamRef {
    std::string name;
    MatrixXd* value;
    bool trainable;
};
std::vector<ParamRef> parameters(Model& model);

struct ConstParamRef {
    std::string name;
    const MatrixXd* value;
    bool trainable;
};
std::vector<ConstParamRef> parameters(const Model& model);

/**
 * Checkpoint layout (little-endian):
 *
 *     magic "CPMTPCKP" (8 bytes)
 *     u32 version, u32 mode, u32 n, u32 r, u32 V, u32 E
 *     f64 encoder decay, u32 encoder trainable flag
 *     u32 array count, then per array:
 *         u32 name length, name bytes, u32 rows, u32 cols,
 *         rows*cols f64 in column-major order
 *
 * Arrays are written in the fixed order returned by parameters().
 */
inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const Model& model, const std::filesystem::path& path);
Model load_checkpoint(const std::filesystem::path& path);

} // namespace cpmtp
