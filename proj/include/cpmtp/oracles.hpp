// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cpmtp/corpus.hpp>
#include <cpmtp/cp_distribution.hpp>
#include <cpmtp/model.hpp>
#include <cpmtp/rng.hpp>
#include <cpmtp/training.hpp>

#include <json.hpp>

#include <functional>
#include <span>
#include <string>
#include <vector>

// Brute-force reference computations. None of these call the log-space
// code paths they are used to check.
namespace cpmtp::oracle {

/// Random CP distribution with logits ~ U(-scale, scale).
CPJointDistd random_dist(int horizon, int vocab, int rank, CounterRng& rng, double scale = 2.0);

/// Dense joint tensor computed with plain probabilities and nested loops.
std::vector<double> dense_joint(const CPJointDistd& dist);

/// P(x_position | x_0..x_{position-1} = prefix) by slicing the dense joint,
/// summing out later positions and renormalizing.
VectorXd dense_conditional(const std::vector<double>& joint, int horizon, int vocab,
                           std::span<const Token> prefix, int position);

double naive_kl(const VectorXd& p, const VectorXd& q);
double total_variation(const VectorXd& p, const VectorXd& q);

/// Central differences of f with respect to every entry of `x` (restored
/// afterwards).
MatrixXd finite_difference(const std::function<double()>& f, MatrixXd& x, double h = 1e-5);

/// ||a - b|| / max(||a||, ||b||, tiny), over all arrays.
double relative_error(const std::vector<MatrixXd>& a, const std::vector<MatrixXd>& b);

/// Finite-difference check of batch_loss_and_grad over every trainable array
/// of `model`. Returns the relative error.
double model_gradient_error(Model model, const TrainConfig& config, std::span<const Window> batch,
                            double h = 1e-5);

struct Check {
    std::string name;
    bool passed = false;
    nlohmann::json detail;
};

struct VerifyOptions {
    std::uint64_t seed = 0;
    int dist_instances = 200;
    int grad_instances = 10;
    int sampler_draws = 200'000;
    int lossless_prompts = 20;
};

/// Runs the oracle suite on freshly drawn random models.
std::vector<Check> run_verify_suite(const VerifyOptions& options);

nlohmann::json report_json(const std::vector<Check>& checks);

} // namespace cpmtp::oracle
