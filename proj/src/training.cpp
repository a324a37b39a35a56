// SPDX-License-Identifier: Apache-2.0
#include <cpmtp/training.hpp>

#include <cpmtp/errors.hpp>
#include <cpmtp/parallel.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <set>
#include <sstream>

namespace cpmtp {

namespace {

/// Examples per reduction block. Fixed so the summation order never depends
/// on the worker count.
constexpr std::size_t kBlockSize = 8;

constexpr double kTeacherFloor = -kLogitClamp;

struct ExampleState {
    Embedding e;
    LogitGrad grad;
    VectorXd gate_probs;
    double joint_nll = 0.0;
    double first_token_nll = 0.0;
    double distill = 0.0;
    int clamped = 0;
};

void add_arrays(std::vector<MatrixXd>& into, const std::vector<MatrixXd>& from)
{
    for (std::size_t i = 0; i < into.size(); ++i) {
        into[i] += from[i];
    }
}

std::vector<MatrixXd> zero_grad_arrays(const Model& model)
{
    std::vector<MatrixXd> out;
    const auto& d = model.dims();
    out.push_back(MatrixXd::Zero(d.vocab, d.embed));
    const bool full = model.mode == Mode::Scratch;
    for (int i = 0; i < d.horizon * d.rank; ++i) {
        out.push_back(full ? MatrixXd::Zero(d.vocab, d.embed) : MatrixXd::Zero(d.embed, d.embed));
    }
    out.push_back(MatrixXd::Zero(d.rank, d.embed));
    return out;
}

std::string describe_batch(std::span<const Window> batch)
{
    nlohmann::json j = nlohmann::json::array();
    for (const auto& w : batch) {
        j.push_back({{"context", std::vector<Token>(w.context.begin(), w.context.end())},
                     {"targets", std::vector<Token>(w.targets.begin(), w.targets.end())}});
    }
    return j.dump();
}

} // namespace

void TrainConfig::check() const
{
    if (rank < 1 || horizon < 1) {
        throw ArgumentError("rank and horizon must be >= 1");
    }
    if (!(distill_beta >= 0.0 && distill_beta <= 1.0)) {
        throw ArgumentError("distill_beta must lie in [0, 1]");
    }
    if (!(discount > 0.0 && discount <= 1.0)) {
        throw ArgumentError("discount must lie in (0, 1]");
    }
    if (!(aux_coefficient >= 0.0)) {
        throw ArgumentError("aux_coefficient must be >= 0");
    }
    if (!(learning_rate > 0.0)) {
        throw ArgumentError("learning_rate must be > 0");
    }
    if (batch_size < 1 || steps < 0 || context < 1 || warmup_steps < 0 || threads < 1) {
        throw ArgumentError("batch_size, context, threads must be >= 1 and steps, warmup_steps >= 0");
    }
}

void to_json(nlohmann::json& j, const TrainConfig& c)
{
    j = nlohmann::json{{"mode", std::string(to_string(c.mode))},
                       {"rank", c.rank},
                       {"horizon", c.horizon},
                       {"aux_coefficient", c.aux_coefficient},
                       {"distill_beta", c.distill_beta},
                       {"discount", c.discount},
                       {"learning_rate", c.learning_rate},
                       {"warmup_steps", c.warmup_steps},
                       {"batch_size", c.batch_size},
                       {"steps", c.steps},
                       {"context", c.context},
                       {"seed", c.seed},
                       {"train_encoder", c.train_encoder},
                       {"threads", c.threads}};
}

void from_json(const nlohmann::json& j, TrainConfig& c)
{
    static const std::set<std::string> known = {"mode",          "rank",         "horizon",    "aux_coefficient",
                                                "distill_beta",  "discount",     "learning_rate", "warmup_steps",
                                                "batch_size",    "steps",        "context",    "seed",
                                                "train_encoder", "threads"};
    for (const auto& [key, _] : j.items()) {
        if (!known.contains(key)) {
            throw ArgumentError("unknown training config key '" + key + "'");
        }
    }
    if (j.contains("mode")) {
        c.mode = parse_mode(j.at("mode").get<std::string>());
    }
    c.rank = j.value("rank", c.rank);
    c.horizon = j.value("horizon", c.horizon);
    c.aux_coefficient = j.value("aux_coefficient", c.aux_coefficient);
    c.distill_beta = j.value("distill_beta", c.distill_beta);
    c.discount = j.value("discount", c.discount);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.warmup_steps = j.value("warmup_steps", c.warmup_steps);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.steps = j.value("steps", c.steps);
    c.context = j.value("context", c.context);
    c.seed = j.value("seed", c.seed);
    c.train_encoder = j.value("train_encoder", c.train_encoder);
    c.threads = j.value("threads", c.threads);
}

std::vector<double> BalanceStats::utilization() const
{
    std::vector<double> out(counts.size(), 0.0);
    for (std::size_t a = 0; a < counts.size(); ++a) {
        out[a] = total == 0 ? 0.0 : static_cast<double>(counts[a]) / static_cast<double>(total);
    }
    return out;
}

double BalanceStats::max_utilization() const
{
    const auto u = utilization();
    return u.empty() ? 0.0 : *std::max_element(u.begin(), u.end());
}

BalanceStats balance_stats(const MatrixXd& gate_probs)
{
    if (gate_probs.rows() == 0 || gate_probs.cols() == 0) {
        throw ArgumentError("balance statistics need a non-empty batch");
    }
    const auto r = gate_probs.cols();
    BalanceStats st;
    st.total = static_cast<std::size_t>(gate_probs.rows());
    st.counts.assign(static_cast<std::size_t>(r), 0);
    for (Eigen::Index b = 0; b < gate_probs.rows(); ++b) {
        ++st.counts[static_cast<std::size_t>(argmax_lowest(gate_probs.row(b).transpose()))];
    }
    st.mean_gate = gate_probs.colwise().mean().transpose();
    const double target = 1.0 / static_cast<double>(r);
    for (auto c : st.counts) {
        const double f = static_cast<double>(c) / static_cast<double>(st.total) - target;
        st.hard += f * f;
    }
    return st;
}

AuxLoss aux_loss(const MatrixXd& gate_probs)
{
    AuxLoss out;
    out.stats = balance_stats(gate_probs);
    out.hard = out.stats.hard;
    const auto r = gate_probs.cols();
    const auto b = gate_probs.rows();
    const VectorXd dev = out.stats.mean_gate.array() - 1.0 / static_cast<double>(r);
    out.surrogate = dev.squaredNorm();
    out.surrogate_grad = (2.0 / static_cast<double>(b)) * VectorXd::Ones(b) * dev.transpose();
    return out;
}

double joint_nll(const CPJointDistd& dist, std::span<const Token> targets)
{
    return -log_prob(dist, targets);
}

LogitGrad LogitGrad::zeros(const HeadDims& d)
{
    LogitGrad g;
    g.gate = VectorXd::Zero(d.rank);
    g.factors.assign(static_cast<std::size_t>(d.horizon), MatrixXd::Zero(d.vocab, d.rank));
    return g;
}

LogitGrad& LogitGrad::operator+=(const LogitGrad& other)
{
    gate += other.gate;
    for (std::size_t s = 0; s < factors.size(); ++s) {
        factors[s] += other.factors[s];
    }
    return *this;
}

LogitGrad& LogitGrad::operator*=(double s)
{
    gate *= s;
    for (auto& f : factors) {
        f *= s;
    }
    return *this;
}

JointNllLogitGrad joint_nll_logit_grad(const CPJointDistd& dist, std::span<const Token> targets)
{
    const VectorXd terms = expert_log_terms(dist, targets);
    const double lse = logsumexp(terms);
    JointNllLogitGrad out;
    out.loss = -lse;
    out.responsibilities = (terms.array() - lse).exp().matrix();
    const VectorXd w = dist.log_weights().array().exp().matrix();
    out.grad.gate = w - out.responsibilities;
    out.grad.factors.resize(static_cast<std::size_t>(dist.horizon()));
    for (int s = 0; s < dist.horizon(); ++s) {
        // rho_a * (softmax(z_a) - onehot(x_s))
        MatrixXd g = dist.log_factor(s).array().exp().matrix();
        g.row(targets[static_cast<std::size_t>(s)]).array() -= 1.0;
        out.grad.factors[static_cast<std::size_t>(s)] = g * out.responsibilities.asDiagonal();
    }
    return out;
}

void backprop_head(const FullHeadParamsd& params, const Embedding& e, const LogitGrad& g, HeadGrad& out)
{
    const auto& d = params.dims;
    if (out.factors.empty()) {
        out.factors.assign(static_cast<std::size_t>(d.horizon * d.rank), MatrixXd::Zero(d.vocab, d.embed));
        out.gate = MatrixXd::Zero(d.rank, d.embed);
        out.embedding = VectorXd::Zero(d.embed);
    }
    for (int s = 0; s < d.horizon; ++s) {
        for (int a = 0; a < d.rank; ++a) {
            const auto dz = g.factors[static_cast<std::size_t>(s)].col(a);
            out.factors[static_cast<std::size_t>(s * d.rank + a)].noalias() += dz * e.transpose();
            out.embedding.noalias() += params.factor(s, a).transpose() * dz;
        }
    }
    out.gate.noalias() += g.gate * e.transpose();
    out.embedding.noalias() += params.gate_weights.transpose() * g.gate;
}

void backprop_head(const ReducedHeadParamsd& params, const Embedding& e, const LogitGrad& g, HeadGrad& out)
{
    const auto& d = params.dims;
    if (out.factors.empty()) {
        out.factors.assign(static_cast<std::size_t>(d.horizon * d.rank), MatrixXd::Zero(d.embed, d.embed));
        out.gate = MatrixXd::Zero(d.rank, d.embed);
        out.embedding = VectorXd::Zero(d.embed);
    }
    VectorXd du(d.embed);
    for (int s = 0; s < d.horizon; ++s) {
        for (int a = 0; a < d.rank; ++a) {
            du.noalias() = params.shared_head->transpose() * g.factors[static_cast<std::size_t>(s)].col(a);
            out.factors[static_cast<std::size_t>(s * d.rank + a)].noalias() += du * e.transpose();
            out.embedding.noalias() += params.adapter(s, a).transpose() * du;
        }
    }
    out.gate.noalias() += g.gate * e.transpose();
    out.embedding.noalias() += params.gate_weights.transpose() * g.gate;
}

HeadGrad joint_nll_grad(const FullHeadParamsd& params, const Embedding& e, std::span<const Token> targets)
{
    const auto dist = forward_full(params, e);
    const auto lg = joint_nll_logit_grad(dist, targets);
    HeadGrad out;
    backprop_head(params, e, lg.grad, out);
    out.loss = lg.loss;
    return out;
}

DistillLoss distill_loss(std::span<const LogDistributiond> draft, std::span<const LogDistributiond> teacher,
                         std::span<const Token> targets, double beta, double discount)
{
    if (draft.size() != teacher.size() || draft.size() != targets.size()) {
        throw StructuralError("distill_loss: draft, teacher and targets must have equal length");
    }
    if (!(beta >= 0.0 && beta <= 1.0) || !(discount > 0.0 && discount <= 1.0)) {
        throw ArgumentError("distill_loss: beta must lie in [0, 1] and discount in (0, 1]");
    }
    DistillLoss out;
    double weight = 1.0;
    for (std::size_t k = 0; k < draft.size(); ++k) {
        const VectorXd& lq = draft[k].log_probs;
        VectorXd lp = teacher[k].log_probs;
        if (lp.size() != lq.size()) {
            throw StructuralError("distill_loss: draft and teacher vocabularies differ");
        }
        detail::check_token(targets[k], static_cast<int>(lq.size()));
        const VectorXd q = lq.array().exp().matrix();
        for (Eigen::Index v = 0; v < lp.size(); ++v) {
            if (lp(v) < kTeacherFloor && q(v) > 0.0) {
                lp(v) = kTeacherFloor;
                ++out.clamped_teacher_entries;
            }
        }
        double kl = 0.0;
        VectorXd g = VectorXd::Zero(lq.size());
        for (Eigen::Index v = 0; v < lq.size(); ++v) {
            if (q(v) > 0.0) {
                kl += q(v) * (lq(v) - lp(v));
                g(v) = beta * q(v) * (lq(v) - lp(v) + 1.0);
            }
        }
        const double ce = -lq(targets[k]);
        g(targets[k]) -= (1.0 - beta);
        out.loss += weight * (beta * kl + (1.0 - beta) * ce);
        out.grad_log_draft.push_back(weight * g);
        weight *= discount;
    }
    return out;
}

namespace {

/// Unnormalized log-weights after observing targets[0..position).
VectorXd conditioned_log_weights(const CPJointDistd& dist, std::span<const Token> targets, int position)
{
    VectorXd b = dist.log_weights();
    for (int j = 0; j < position; ++j) {
        b += dist.log_factor(j).row(targets[static_cast<std::size_t>(j)]).transpose();
    }
    return b;
}

} // namespace

LogDistributiond draft_conditional(const CPJointDistd& dist, std::span<const Token> targets, int position)
{
    CPJointDistd d = dist;
    for (int j = 0; j < position; ++j) {
        d = condition_on(d, j, targets[static_cast<std::size_t>(j)]);
    }
    return marginal(d, position);
}

void draft_conditional_backprop(const CPJointDistd& dist, std::span<const Token> targets, int position,
                                const VectorXd& grad_log_draft, LogitGrad& out)
{
    const int r = dist.rank();
    const VectorXd b = conditioned_log_weights(dist, targets, position);
    const VectorXd log_rho = b.array() - logsumexp(b);
    const VectorXd rho = log_rho.array().exp().matrix();
    const MatrixXd& lf = dist.log_factor(position);
    const MatrixXd f = lf.array().exp().matrix();

    // joint(v, a) = log_rho_a + log F_a(v); log q(v) = logsumexp_a joint(v, a)
    MatrixXd joint = lf;
    joint.rowwise() += log_rho.transpose();
    VectorXd da = VectorXd::Zero(r);
    for (Eigen::Index v = 0; v < lf.rows(); ++v) {
        const double lq = logsumexp(joint.row(v).transpose());
        for (int a = 0; a < r; ++a) {
            const double gva = grad_log_draft(v) * std::exp(joint(v, a) - lq); // dL/d log F_a(v)
            joint(v, a) = gva;
            da(a) += gva;
        }
    }
    // joint now holds dL/d log F; map through log-softmax to the logits.
    MatrixXd& dz = out.factors[static_cast<std::size_t>(position)];
    for (int a = 0; a < r; ++a) {
        dz.col(a) += joint.col(a) - f.col(a) * joint.col(a).sum();
    }
    // log_rho = b - logsumexp(b)
    const VectorXd db = da - rho * da.sum();
    for (int j = 0; j < position; ++j) {
        const Token x = targets[static_cast<std::size_t>(j)];
        const MatrixXd fj = dist.log_factor(j).array().exp().matrix();
        MatrixXd& dzj = out.factors[static_cast<std::size_t>(j)];
        for (int a = 0; a < r; ++a) {
            dzj.col(a) -= db(a) * fj.col(a);
            dzj(x, a) += db(a);
        }
    }
    const VectorXd w = dist.log_weights().array().exp().matrix();
    out.gate += db - w * db.sum();
}

ModelGrad batch_loss_and_grad(const Model& model, const TrainConfig& config, std::span<const Window> batch)
{
    if (batch.empty()) {
        throw ArgumentError("batch_loss_and_grad: empty batch");
    }
    const auto& d = model.dims();
    const auto bsz = batch.size();
    const double inv_b = 1.0 / static_cast<double>(bsz);
    const bool finetune = model.mode == Mode::Finetune;
    const bool encoder_grad = !finetune && config.train_encoder && model.encoder.trainable;
    const std::size_t blocks = (bsz + kBlockSize - 1) / kBlockSize;

    std::vector<ExampleState> ex(bsz);
    parallel_for(blocks, static_cast<std::size_t>(config.threads), [&](std::size_t blk) {
        for (std::size_t i = blk * kBlockSize; i < std::min(bsz, (blk + 1) * kBlockSize); ++i) {
            const Window& w = batch[i];
            if (w.targets.size() != static_cast<std::size_t>(d.horizon)) {
                throw StructuralError("window target count != model horizon");
            }
            ExampleState& st = ex[i];
            EncoderState enc = advance(model.encoder, EncoderState::initial(model.encoder), w.context);
            st.e = enc.embedding();
            const auto dist = draft_dist(model, st.e);
            st.gate_probs = dist.log_weights().array().exp().matrix();
            st.joint_nll = joint_nll(dist, w.targets);
            st.first_token_nll = -marginal(dist, 0).log_probs(w.targets[0]);
            if (!finetune) {
                auto lg = joint_nll_logit_grad(dist, w.targets);
                st.grad = std::move(lg.grad);
                st.grad *= inv_b;
                continue;
            }
            // Teacher p^c_k at the ground-truth context extended by x_1..x_{k-1}.
            std::vector<LogDistributiond> teacher;
            std::vector<LogDistributiond> draft;
            for (int k = 0; k < d.horizon; ++k) {
                if (k > 0) {
                    enc = advance(model.encoder, enc, w.targets[static_cast<std::size_t>(k - 1)]);
                }
                teacher.push_back(base_next_token_dist(model, enc.embedding()));
                draft.push_back(draft_conditional(dist, w.targets, k));
            }
            const auto dl = distill_loss(draft, teacher, w.targets, config.distill_beta, config.discount);
            st.distill = dl.loss;
            st.clamped = dl.clamped_teacher_entries;
            st.grad = LogitGrad::zeros(d);
            for (int k = 0; k < d.horizon; ++k) {
                draft_conditional_backprop(dist, w.targets, k, dl.grad_log_draft[static_cast<std::size_t>(k)],
                                           st.grad);
            }
            st.grad *= inv_b;
        }
    });

    ModelGrad out;
    MatrixXd gates(static_cast<Eigen::Index>(bsz), d.rank);
    for (std::size_t i = 0; i < bsz; ++i) {
        gates.row(static_cast<Eigen::Index>(i)) = ex[i].gate_probs.transpose();
        out.joint_nll += ex[i].joint_nll * inv_b;
        out.first_token_nll += ex[i].first_token_nll * inv_b;
        out.distill += ex[i].distill * inv_b;
        out.clamped_teacher_entries += ex[i].clamped;
    }
    out.aux = aux_loss(gates);
    out.loss = (finetune ? out.distill : out.joint_nll) + config.aux_coefficient * out.aux.surrogate;

    std::vector<std::vector<MatrixXd>> partial(blocks);
    parallel_for(blocks, static_cast<std::size_t>(config.threads), [&](std::size_t blk) {
        auto arrays = zero_grad_arrays(model);
        HeadGrad hg;
        for (std::size_t i = blk * kBlockSize; i < std::min(bsz, (blk + 1) * kBlockSize); ++i) {
            ExampleState& st = ex[i];
            if (config.aux_coefficient > 0.0) {
                // Through the softmax: dg = w * (dw - <w, dw>).
                const VectorXd dw =
                    config.aux_coefficient * out.aux.surrogate_grad.row(static_cast<Eigen::Index>(i)).transpose();
                st.grad.gate += st.gate_probs.cwiseProduct(dw) - st.gate_probs * st.gate_probs.dot(dw);
            }
            hg = HeadGrad{};
            std::visit([&](const auto& h) { backprop_head(h, st.e, st.grad, hg); }, model.head);
            for (std::size_t k = 0; k < hg.factors.size(); ++k) {
                arrays[k + 1] += hg.factors[k];
            }
            arrays.back() += hg.gate;
            if (encoder_grad) {
                accumulate_encode_grad_last(model.encoder, batch[i].context, hg.embedding, arrays.front());
            }
        }
        partial[blk] = std::move(arrays);
    });
    out.arrays = std::move(partial.front());
    for (std::size_t blk = 1; blk < blocks; ++blk) {
        add_arrays(out.arrays, partial[blk]);
    }
    return out;
}

nlohmann::json to_json_line(const StepMetrics& m)
{
    return nlohmann::json{{"step", m.step},
                          {"loss", m.loss},
                          {"joint_nll", m.joint_nll},
                          {"first_token_nll", m.first_token_nll},
                          {"distill", m.distill},
                          {"aux_hard", m.aux_hard},
                          {"aux_surrogate", m.aux_surrogate},
                          {"utilization", m.utilization},
                          {"wall_ms", m.wall_ms}};
}

std::pair<Model, TrainMetrics> train(const TrainConfig& config, const Corpus& corpus, Model model,
                                     const MetricsSink& sink)
{
    config.check();
    model.check();
    if (model.mode != config.mode) {
        throw ArgumentError("train: model mode does not match config mode");
    }
    if (model.dims().rank != config.rank || model.dims().horizon != config.horizon) {
        throw ArgumentError("train: model rank/horizon do not match config");
    }
    if (corpus.vocab != model.dims().vocab) {
        throw ArgumentError("train: corpus vocabulary does not match the model");
    }
    TrainMetrics metrics;
    if (config.steps == 0) {
        return {std::move(model), std::move(metrics)};
    }
    BatchStream stream(corpus, Split::Train, config.horizon, config.batch_size, config.seed, config.context);

    auto params = parameters(model);
    std::vector<MatrixXd> m1;
    std::vector<MatrixXd> m2;
    for (const auto& p : params) {
        m1.push_back(MatrixXd::Zero(p.value->rows(), p.value->cols()));
        m2.push_back(MatrixXd::Zero(p.value->rows(), p.value->cols()));
    }
    constexpr double kBeta1 = 0.9;
    constexpr double kBeta2 = 0.999;
    constexpr double kEps = 1e-8;

    for (int step = 1; step <= config.steps; ++step) {
        const auto t0 = std::chrono::steady_clock::now();
        const auto batch = stream.next();
        ModelGrad g;
        try {
            g = batch_loss_and_grad(model, config, batch);
        } catch (const NumericError& e) {
            throw DivergenceError("training diverged at step " + std::to_string(step) + " (" + e.what() +
                                  "); last batch: " + describe_batch(batch));
        }
        if (!std::isfinite(g.loss)) {
            throw DivergenceError("training diverged at step " + std::to_string(step) +
                                  " (loss = " + std::to_string(g.loss) + "); last batch: " + describe_batch(batch));
        }
        double lr = config.learning_rate;
        if (config.warmup_steps > 0 && step <= config.warmup_steps) {
            lr *= static_cast<double>(step) / static_cast<double>(config.warmup_steps);
        }
        const double c1 = 1.0 - std::pow(kBeta1, step);
        const double c2 = 1.0 - std::pow(kBeta2, step);
        for (std::size_t i = 0; i < params.size(); ++i) {
            if (!params[i].trainable || (i == 0 && !config.train_encoder)) {
                continue;
            }
            m1[i] = kBeta1 * m1[i] + (1.0 - kBeta1) * g.arrays[i];
            m2[i] = kBeta2 * m2[i] + (1.0 - kBeta2) * g.arrays[i].cwiseAbs2();
            params[i].value->array() -=
                lr * (m1[i].array() / c1) / ((m2[i].array() / c2).sqrt() + kEps);
        }
        StepMetrics sm;
        sm.step = step;
        sm.loss = g.loss;
        sm.joint_nll = g.joint_nll;
        sm.first_token_nll = g.first_token_nll;
        sm.distill = g.distill;
        sm.aux_hard = g.aux.hard;
        sm.aux_surrogate = g.aux.surrogate;
        sm.utilization = g.aux.stats.utilization();
        sm.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
        if (sink) {
            sink(sm);
        }
        metrics.steps.push_back(std::move(sm));
    }
    return {std::move(model), std::move(metrics)};
}

EvalMetrics evaluate(const Model& model, const Corpus& corpus, Split split, int context, std::size_t max_windows)
{
    auto ws = windows(corpus, split, model.dims().horizon, context);
    if (ws.empty()) {
        throw ArgumentError("evaluate: split has no complete windows");
    }
    if (max_windows > 0 && ws.size() > max_windows) {
        ws.resize(max_windows);
    }
    EvalMetrics out;
    out.windows = ws.size();
    MatrixXd gates(static_cast<Eigen::Index>(ws.size()), model.dims().rank);
    for (std::size_t i = 0; i < ws.size(); ++i) {
        const Embedding e = encode_last(model.encoder, ws[i].context);
        const auto dist = draft_dist(model, e);
        gates.row(static_cast<Eigen::Index>(i)) = dist.log_weights().array().exp().matrix().transpose();
        out.joint_nll += joint_nll(dist, ws[i].targets);
        out.first_token_nll -= base_next_token_dist(model, e).log_probs(ws[i].targets[0]);
    }
    out.joint_nll /= static_cast<double>(ws.size());
    out.first_token_nll /= static_cast<double>(ws.size());
    out.balance = balance_stats(gates);
    return out;
}

} // namespace cpmtp
