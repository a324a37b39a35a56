// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cpmtp/corpus.hpp>
#include <cpmtp/cp_distribution.hpp>
#include <cpmtp/model.hpp>

#include <json.hpp>

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace cpmtp {

struct TrainConfig {
    Mode mode = Mode::Scratch;
    int rank = 4;
    int horizon = 2;
    double aux_coefficient = 0.1;
    double distill_beta = 0.9;
    double discount = 0.9;
    double learning_rate = 1e-2;
    int warmup_steps = 0;
    int batch_size = 64;
    int steps = 1000;
    int context = 16;
    std::uint64_t seed = 0;
    bool train_encoder = true;
    int threads = 1;

    void check() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
/// Rejects unknown keys; missing keys keep their defaults.
void from_json(const nlohmann::json& j, TrainConfig& c);

/// Expert utilization over a batch of gate distributions (one row each).
struct BalanceStats {
    std::vector<std::size_t> counts; ///< argmax assignments, ties to lowest index
    std::size_t total = 0;
    double hard = 0.0;               ///< sum_a (n_a / N - 1/r)^2
    VectorXd mean_gate;              ///< column means p_a

    std::vector<double> utilization() const;
    double max_utilization() const;
};

BalanceStats balance_stats(const MatrixXd& gate_probs);

struct AuxLoss {
    double hard = 0.0;
    double surrogate = 0.0;     ///< sum_a (p_a - 1/r)^2
    MatrixXd surrogate_grad;    ///< d surrogate / d gate_probs, B x r
    BalanceStats stats;
};

/// Balancing penalty on a B x r matrix of gate probabilities. The hard
/// argmax-count value is piecewise constant, so the gradient comes from the
/// column-mean surrogate.
AuxLoss aux_loss(const MatrixXd& gate_probs);

double joint_nll(const CPJointDistd& dist, std::span<const Token> targets);

/// Loss gradients with respect to gate logits and factor logits.
struct LogitGrad {
    VectorXd gate;
    std::vector<MatrixXd> factors; ///< V x r per position

    static LogitGrad zeros(const HeadDims& d);
    LogitGrad& operator+=(const LogitGrad& other);
    LogitGrad& operator*=(double s);
};

struct JointNllLogitGrad {
    double loss = 0.0;
    VectorXd responsibilities; ///< posterior over experts given the targets
    LogitGrad grad;
};

/// Gradient of -log P(targets) with respect to the logits that produced
/// `dist` through from_logits.
JointNllLogitGrad joint_nll_logit_grad(const CPJointDistd& dist, std::span<const Token> targets);

/// Gradient of a head's parameters, shaped like the head.
struct HeadGrad {
    std::vector<MatrixXd> factors; ///< V x E (full) or E x E (adapter) per (s, a)
    MatrixXd gate;
    VectorXd embedding;            ///< dL/de
    double loss = 0.0;
};

/// Joint NLL and its gradient for a full head at embedding e.
HeadGrad joint_nll_grad(const FullHeadParamsd& params, const Embedding& e, std::span<const Token> targets);

/// Maps logit gradients back to head parameters (and the embedding).
void backprop_head(const FullHeadParamsd& params, const Embedding& e, const LogitGrad& g, HeadGrad& out);
void backprop_head(const ReducedHeadParamsd& params, const Embedding& e, const LogitGrad& g, HeadGrad& out);

struct DistillLoss {
    double loss = 0.0;
    std::vector<VectorXd> grad_log_draft; ///< dL/d log p^d_k(v) per position
    int clamped_teacher_entries = 0;      ///< teacher log-probs raised to -700
};

/**
 * sum_k discount^k [ beta KL(p^d_k || p^c_k) + (1 - beta) CE(p^d_k, x_k) ],
 * k counted from 0. The teacher gets no gradient; its log-probabilities are
 * clamped at -700 where the draft has mass.
 */
DistillLoss distill_loss(std::span<const LogDistributiond> draft, std::span<const LogDistributiond> teacher,
                         std::span<const Token> targets, double beta, double discount);

/// Draft conditional at `position` given targets[0..position) under `dist`.
LogDistributiond draft_conditional(const CPJointDistd& dist, std::span<const Token> targets, int position);

/// Chains dL/d log p^d (for the conditional at `position` given the earlier
/// targets) into gate and factor logit gradients, accumulating into `out`.
void draft_conditional_backprop(const CPJointDistd& dist, std::span<const Token> targets, int position,
                                const VectorXd& grad_log_draft, LogitGrad& out);

/// Gradient for every parameter of a model, aligned with parameters(model).
struct ModelGrad {
    std::vector<MatrixXd> arrays;
    double loss = 0.0;
    double joint_nll = 0.0;
    double first_token_nll = 0.0;
    double distill = 0.0;
    AuxLoss aux;
    int clamped_teacher_entries = 0;
};

/// Objective on one minibatch: mean joint NLL (scratch) or mean distillation
/// loss (finetune), plus aux_coefficient times the balance surrogate.
/// Per-example work is split into fixed blocks and summed in block order, so
/// the result does not depend on `config.threads`.
ModelGrad batch_loss_and_grad(const Model& model, const TrainConfig& config, std::span<const Window> batch);

struct StepMetrics {
    int step = 0;
    double loss = 0.0;
    double joint_nll = 0.0;
    double first_token_nll = 0.0;
    double distill = 0.0;
    double aux_hard = 0.0;
    double aux_surrogate = 0.0;
    std::vector<double> utilization;
    double wall_ms = 0.0;
};

nlohmann::json to_json_line(const StepMetrics& m);

struct TrainMetrics {
    std::vector<StepMetrics> steps;
};

using MetricsSink = std::function<void(const StepMetrics&)>;

/// Adam (0.9 / 0.999 / 1e-8) on the trainable parameters, constant learning
/// rate with optional linear warmup. Deterministic given config.seed.
/// Throws DivergenceError (with the offending batch in the message) when
/// the loss becomes non-finite.
std::pair<Model, TrainMetrics> train(const TrainConfig& config, const Corpus& corpus, Model model,
                                     const MetricsSink& sink = {});

struct EvalMetrics {
    double joint_nll = 0.0;
    double first_token_nll = 0.0;
    std::size_t windows = 0;
    BalanceStats balance;
};

/// Mean losses over (up to `max_windows`, 0 = all) windows of a split.
EvalMetrics evaluate(const Model& model, const Corpus& corpus, Split split, int context,
                     std::size_t max_windows = 0);

} // namespace cpmtp
